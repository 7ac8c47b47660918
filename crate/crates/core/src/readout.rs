//! Measurement-based extraction of a sparse solution vector.
//!
//! Sampling only reveals magnitudes; amplitude signs are copied from the classical vector.

use nalgebra::DVector;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::{Error, Result};

/// Basis-outcome counts of `shots` draws with probabilities `|v_i|²/‖v‖²`.
pub fn sample_state(v: &DVector<f64>, shots: usize, seed: u64) -> Result<Vec<u64>> {
    let probs: Vec<f64> = v.iter().map(|x| x * x).collect();
    if !(probs.iter().sum::<f64>() > 0.0) {
        return Err(Error::ZeroVector);
    }
    let dist = WeightedIndex::new(&probs).map_err(|e| Error::Domain(format!("sampling weights: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0u64; v.len()];
    for _ in 0..shots {
        counts[dist.sample(&mut rng)] += 1;
    }
    Ok(counts)
}

/// `⌈c·r·ln r⌉` support shots, at least one.
pub fn support_shots(r: usize, c: f64) -> usize {
    let r = r as f64;
    ((c * r * r.ln()).ceil() as usize).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReadoutReport {
    /// Indices of the `r` largest |v_i| among the nonzeros, ascending.
    pub true_support: Vec<usize>,
    pub recovered_support: Vec<usize>,
    /// `(index, estimate)` on the recovered support; signs come from the classical vector.
    pub amplitudes: Vec<(usize, f64)>,
    /// ℓ₂ error of the estimate against `v/‖v‖`.
    pub l2_error: f64,
    pub support_shots: u64,
    pub amp_shots: usize,
    pub success: bool,
    /// The cap `r` cut through a group of equal counts.
    pub ambiguous: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoverOptions {
    pub r: usize,
    pub amp_shots: usize,
    /// Minimum observed frequency for an index to enter the support.
    pub threshold: f64,
    pub seed: u64,
}

fn top_support(v: &DVector<f64>, r: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).filter(|&i| v[i] != 0.0).collect();
    idx.sort_by(|&a, &b| v[b].abs().total_cmp(&v[a].abs()).then(a.cmp(&b)));
    idx.truncate(r);
    idx.sort_unstable();
    idx
}

/// Support from `counts`, then magnitudes from `amp_shots` fresh samples of `v`.
pub fn recover_sparse(counts: &[u64], v: &DVector<f64>, opts: &RecoverOptions) -> Result<ReadoutReport> {
    if counts.len() != v.len() {
        return Err(Error::DimensionMismatch { expected: v.len(), got: counts.len() });
    }
    if opts.r == 0 {
        return Err(Error::Domain("sparsity cap r must be ≥ 1".into()));
    }
    let vn = v.norm();
    if vn == 0.0 {
        return Err(Error::ZeroVector);
    }
    let total: u64 = counts.iter().sum();
    let mut cand: Vec<usize> = (0..counts.len())
        .filter(|&i| counts[i] > 0 && counts[i] as f64 / total.max(1) as f64 >= opts.threshold)
        .collect();
    cand.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let ambiguous = cand.len() > opts.r && counts[cand[opts.r]] == counts[cand[opts.r - 1]];
    cand.truncate(opts.r);
    cand.sort_unstable();

    let mut amplitudes = Vec::with_capacity(cand.len());
    let mut estimate = DVector::zeros(v.len());
    if opts.amp_shots > 0 && !cand.is_empty() {
        let amp = sample_state(v, opts.amp_shots, opts.seed.wrapping_add(1))?;
        for &i in &cand {
            let mag = (amp[i] as f64 / opts.amp_shots as f64).sqrt();
            let val = mag.copysign(v[i]);
            estimate[i] = val;
            amplitudes.push((i, val));
        }
    }
    let true_support = top_support(v, opts.r);
    let success = !ambiguous && cand == true_support;
    Ok(ReadoutReport {
        l2_error: (estimate - v / vn).norm(),
        true_support,
        recovered_support: cand,
        amplitudes,
        support_shots: total,
        amp_shots: opts.amp_shots,
        success,
        ambiguous,
    })
}

/// Sample-count scaling model `m²·r³/eps²` with unit constant.
pub fn tomography_cost_model(m_qubits: f64, r: f64, eps: f64) -> Result<f64> {
    if !(m_qubits > 0.0 && r > 0.0 && eps > 0.0) {
        return Err(Error::Domain("cost model arguments must be positive".into()));
    }
    Ok(m_qubits * m_qubits * r * r * r / (eps * eps))
}

/// Uniform-magnitude `r`-sparse vector with seeded support positions and signs.
pub fn sparse_fixture(dim: usize, r: usize, seed: u64) -> Result<DVector<f64>> {
    if r == 0 || r > dim {
        return Err(Error::Domain(format!("need 1 ≤ r ≤ dim, got r = {r}, dim = {dim}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = DVector::zeros(dim);
    for (n, i) in sample(&mut rng, dim, r).into_iter().enumerate() {
        v[i] = if seed.wrapping_add(n as u64).is_multiple_of(2) { 1.0 } else { -1.0 };
    }
    Ok(v)
}

/// Aggregate of seeded support-recovery trials.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialSummary {
    pub r: usize,
    pub dim: usize,
    pub shots: usize,
    pub trials: usize,
    pub successes: usize,
    pub amp_shots: usize,
    /// Mean amplitude ℓ₂ error over trials.
    pub l2_err: f64,
}

impl TrialSummary {
    pub const CSV_HEADER: &'static str = "r,dim,shots,trials,successes,amp_shots,l2_err";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.10e}",
            self.r, self.dim, self.shots, self.trials, self.successes, self.amp_shots, self.l2_err
        )
    }
}

/// Runs `trials` seeds `seed0..seed0+trials` on sparse fixtures; merged in seed order.
pub fn support_trials(
    dim: usize,
    r: usize,
    shots: usize,
    amp_shots: usize,
    trials: usize,
    seed0: u64,
) -> Result<TrialSummary> {
    let reports: Vec<ReadoutReport> = (0..trials as u64)
        .into_par_iter()
        .map(|k| {
            let seed = seed0.wrapping_add(k);
            let v = sparse_fixture(dim, r, seed)?;
            let counts = sample_state(&v, shots, seed.wrapping_mul(0x9E37_79B9_7F4A_7C15))?;
            recover_sparse(&counts, &v, &RecoverOptions { r, amp_shots, threshold: 0.0, seed })
        })
        .collect::<Result<_>>()?;
    let successes = reports.iter().filter(|r| r.success).count();
    let l2_err = if trials > 0 { reports.iter().map(|r| r.l2_error).sum::<f64>() / trials as f64 } else { 0.0 };
    Ok(TrialSummary { r, dim, shots, trials, successes, amp_shots, l2_err })
}
