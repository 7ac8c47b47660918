//! Named benchmark models with λ-independent coefficients.

use super::PolyNoiseModel;
use crate::{Error, Result};

/// Starting state of the scalar benchmarks.
pub const BENCHMARK_X_T: f64 = 0.01;

/// VP schedule (β_min, β_max, T) of the benchmarks.
pub const BENCHMARK_SCHEDULE: (f64, f64, f64) = (0.1, 20.0, 1.0);

pub const NAMES: &[&str] = &["zero", "linear", "weak_quadratic", "quadratic", "cubic", "dissipative"];

/// ε ≡ 0.
pub fn zero(dim: usize) -> Result<PolyNoiseModel> {
    PolyNoiseModel::zero(dim)
}

/// ε = 0.2x (J = 1).
pub fn linear() -> PolyNoiseModel {
    PolyNoiseModel::scalar(&[(1, 0, 0.2)]).unwrap()
}

/// ε = 0.2x + 0.05x².
pub fn weak_quadratic() -> PolyNoiseModel {
    PolyNoiseModel::scalar(&[(1, 0, 0.2), (2, 0, 0.05)]).unwrap()
}

/// ε = 0.2x + 0.05x² + 0.01x³.
pub fn cubic() -> PolyNoiseModel {
    PolyNoiseModel::scalar(&[(1, 0, 0.2), (2, 0, 0.05), (3, 0, 0.01)]).unwrap()
}

/// Separable ε_i = c_i x_i + 0.02 x_i³ with c_i evenly spaced in [1.5, 3].
///
/// Every symmetrized drift eigenvalue is positive along the VP flow.
pub fn dissipative(dim: usize) -> Result<PolyNoiseModel> {
    if dim == 0 {
        return Err(Error::Domain("dimension must be >= 1".into()));
    }
    let coords: Vec<_> = (0..dim)
        .map(|i| {
            let c = if dim == 1 { 1.5 } else { 1.5 + 1.5 * i as f64 / (dim - 1) as f64 };
            vec![(1, 0, c), (3, 0, 0.02)]
        })
        .collect();
    PolyNoiseModel::separable(&coords)
}

/// Looks up a preset; `dim` only matters for `zero` and `dissipative`.
pub fn by_name(name: &str, dim: usize) -> Result<PolyNoiseModel> {
    let scalar_only = |m: PolyNoiseModel| {
        if dim == 1 {
            Ok(m)
        } else {
            Err(Error::Domain(format!("preset '{name}' is scalar (d = 1)")))
        }
    };
    match name {
        "zero" => zero(dim),
        "linear" => scalar_only(linear()),
        "weak_quadratic" | "quadratic" => scalar_only(weak_quadratic()),
        "cubic" => scalar_only(cubic()),
        "dissipative" => dissipative(dim),
        _ => Err(Error::Domain(format!("unknown preset '{name}' (known: {})", NAMES.join(", ")))),
    }
}
