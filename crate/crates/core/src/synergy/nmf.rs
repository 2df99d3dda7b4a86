use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EmgRecord, EMG_LABELS};

/// Nonnegative muscles × time matrix of normalized envelopes.
#[derive(Debug, Clone, PartialEq)]
pub struct EmgMatrix(Array2<f64>);

impl EmgMatrix {
    pub fn new(e: Array2<f64>) -> Result<Self> {
        if e.nrows() != EMG_LABELS.len() {
            return Err(Error::InvalidParameter(format!(
                "EMG matrix needs {} muscle rows, got {}",
                EMG_LABELS.len(),
                e.nrows()
            )));
        }
        if e.ncols() == 0 {
            return Err(Error::InsufficientData("EMG matrix has no samples".into()));
        }
        if let Some(v) = e.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidParameter(format!(
                "EMG matrix entries must lie in [0, 1], found {v}"
            )));
        }
        Ok(EmgMatrix(e))
    }

    /// Concatenates envelopes along time, keeping every `decimate`-th sample.
    pub fn from_records(records: &[&EmgRecord], decimate: usize) -> Result<Self> {
        let step = decimate.max(1);
        let cols: usize = records.iter().map(|r| r.len().div_ceil(step)).sum();
        let mut e = Array2::zeros((EMG_LABELS.len(), cols));
        let mut c0 = 0;
        for r in records {
            for (m, ch) in r.channels().iter().enumerate() {
                for (j, v) in ch.iter().step_by(step).enumerate() {
                    e[[m, c0 + j]] = *v;
                }
            }
            c0 += r.len().div_ceil(step);
        }
        EmgMatrix::new(e)
    }

    pub fn view(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn samples(&self) -> usize {
        self.0.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmfOptions {
    pub max_iter: usize,
    /// Relative objective improvement below which iteration stops.
    pub tol: f64,
}

impl Default for NmfOptions {
    fn default() -> Self {
        NmfOptions {
            max_iter: 500,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynergyDecomposition {
    pub rank: usize,
    /// Muscles × rank, unit-norm columns.
    pub w: Array2<f64>,
    /// Rank × time activations.
    pub h: Array2<f64>,
    pub objective: f64,
    /// None for the exact identity solution.
    pub seed: Option<u64>,
    pub iterations: usize,
    /// Largest relative objective increase seen across the updates of every
    /// restart (zero or negative when all runs were monotone).
    pub max_relative_increase: f64,
}

impl SynergyDecomposition {
    /// Σ_t H[j, t] per synergy.
    pub fn activation_energy(&self) -> Vec<f64> {
        self.h.sum_axis(Axis(1)).to_vec()
    }

    pub fn synergy(&self, j: usize) -> Vec<f64> {
        self.w.column(j).to_vec()
    }

    /// Synergy indices ordered by descending activation energy.
    pub fn energy_order(&self) -> Vec<usize> {
        let energy = self.activation_energy();
        let mut idx: Vec<usize> = (0..self.rank).collect();
        idx.sort_by(|&a, &b| energy[b].total_cmp(&energy[a]).then(a.cmp(&b)));
        idx
    }
}

pub fn objective(e: &Array2<f64>, w: &Array2<f64>, h: &Array2<f64>) -> f64 {
    let wh = w.dot(h);
    e.iter().zip(wh.iter()).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Global variance accounted for, clipped below at zero.
pub fn vaf(e: &Array2<f64>, w: &Array2<f64>, h: &Array2<f64>) -> Result<f64> {
    let total: f64 = e.iter().map(|v| v * v).sum();
    if total == 0.0 {
        return Err(Error::Degenerate("VAF of an all-zero matrix".into()));
    }
    if w.nrows() != e.nrows() || h.ncols() != e.ncols() || w.ncols() != h.nrows() {
        return Err(Error::InvalidParameter(format!(
            "shape mismatch: E {:?}, W {:?}, H {:?}",
            e.shape(),
            w.shape(),
            h.shape()
        )));
    }
    Ok((1.0 - objective(e, w, h) / total).max(0.0))
}

/// VAF per muscle row; rows with no energy report 1 when reconstructed
/// exactly and 0 otherwise.
pub fn vaf_per_channel(e: &Array2<f64>, w: &Array2<f64>, h: &Array2<f64>) -> Vec<f64> {
    let wh = w.dot(h);
    e.outer_iter()
        .zip(wh.outer_iter())
        .map(|(er, rr)| {
            let total: f64 = er.iter().map(|v| v * v).sum();
            let err: f64 = er.iter().zip(rr.iter()).map(|(a, b)| (a - b).powi(2)).sum();
            if total > 0.0 {
                (1.0 - err / total).max(0.0)
            } else if err == 0.0 {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Scales each W column to unit norm and the matching H row inversely.
pub fn normalize_columns(w: &mut Array2<f64>, h: &mut Array2<f64>) {
    for j in 0..w.ncols() {
        let norm = w.column(j).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            w.column_mut(j).mapv_inplace(|v| v / norm);
            h.row_mut(j).mapv_inplace(|v| v * norm);
        }
    }
}

/// `x *= num / den` elementwise; entries with a zero denominator are kept.
fn multiplicative_step(x: &mut Array2<f64>, num: &Array2<f64>, den: &Array2<f64>) {
    ndarray::Zip::from(x).and(num).and(den).for_each(|x, &n, &d| {
        if d > 0.0 {
            *x *= n / d;
        }
    });
}

struct Run {
    w: Array2<f64>,
    h: Array2<f64>,
    objective: f64,
    iterations: usize,
    max_relative_increase: f64,
}

fn run_single(e: &Array2<f64>, k: usize, seed: u64, opts: &NmfOptions) -> Run {
    let (m, t) = e.dim();
    let mean = e.mean().unwrap_or(0.0);
    let scale = 2.0 * (mean / k as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Array2::from_shape_fn((m, k), |_| rng.gen::<f64>() * scale);
    let mut h = Array2::from_shape_fn((k, t), |_| rng.gen::<f64>() * scale);
    let mut obj = objective(e, &w, &h);
    let mut max_inc = f64::NEG_INFINITY;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        let wt = w.t();
        let num = wt.dot(e);
        let den = wt.dot(&w).dot(&h);
        multiplicative_step(&mut h, &num, &den);

        let ht = h.t();
        let num = e.dot(&ht);
        let den = w.dot(&h.dot(&ht));
        multiplicative_step(&mut w, &num, &den);

        iterations += 1;
        let next = objective(e, &w, &h);
        let scale = obj.max(f64::MIN_POSITIVE);
        max_inc = max_inc.max((next - obj) / scale);
        let improvement = (obj - next) / scale;
        obj = next;
        if obj == 0.0 || improvement < opts.tol {
            break;
        }
    }
    Run {
        w,
        h,
        objective: obj,
        iterations,
        max_relative_increase: max_inc,
    }
}

/// Best-of-seeds Lee-Seung factorization `E ≈ W H` under the Frobenius loss.
/// When `k` equals the number of muscles the exact solution `W = I, H = E`
/// also competes.
pub fn nmf(e: &EmgMatrix, k: usize, seeds: &[u64], opts: &NmfOptions) -> Result<SynergyDecomposition> {
    let m = e.view().nrows();
    if k == 0 || k > m {
        return Err(Error::InvalidParameter(format!("synergy rank must be in 1..={m}, got {k}")));
    }
    if seeds.is_empty() {
        return Err(Error::InvalidParameter("NMF needs at least one seed".into()));
    }
    let ev = e.view();
    if ev.iter().all(|&v| v == 0.0) {
        return Err(Error::Degenerate("NMF of an all-zero EMG matrix".into()));
    }
    let runs: Vec<Run> = seeds.par_iter().map(|&s| run_single(ev, k, s, opts)).collect();
    let max_inc = runs.iter().map(|r| r.max_relative_increase).fold(f64::NEG_INFINITY, f64::max);
    let (best_i, best) = runs
        .into_iter()
        .enumerate()
        .min_by(|a, b| a.1.objective.total_cmp(&b.1.objective))
        .expect("non-empty seeds");
    let mut out = SynergyDecomposition {
        rank: k,
        w: best.w,
        h: best.h,
        objective: best.objective,
        seed: Some(seeds[best_i]),
        iterations: best.iterations,
        max_relative_increase: max_inc,
    };
    if k == m && out.objective > 0.0 {
        out.w = Array2::eye(m);
        out.h = ev.clone();
        out.objective = 0.0;
        out.seed = None;
        out.iterations = 0;
    }
    normalize_columns(&mut out.w, &mut out.h);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OscRule {
    pub max_k: usize,
    pub vaf_threshold: f64,
    pub vaf_increment: f64,
}

impl Default for OscRule {
    fn default() -> Self {
        OscRule {
            max_k: 8,
            vaf_threshold: 0.90,
            vaf_increment: 0.03,
        }
    }
}

impl OscRule {
    /// Smallest k whose VAF exceeds the threshold and whose gain from one
    /// more synergy is below the increment. Returns (k*, saturated).
    pub fn select(&self, vaf: &[f64]) -> (usize, bool) {
        let last = vaf.len();
        for k in 1..=last {
            let v = vaf[k - 1];
            if v > self.vaf_threshold && (k == last || vaf[k] - v < self.vaf_increment) {
                return (k, false);
            }
        }
        (last, true)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VafCurve {
    /// vaf[k - 1] for k = 1..=max_k.
    pub vaf: Vec<f64>,
    /// Per-muscle diagnostic, same indexing.
    pub per_channel: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynergyCount {
    pub k_star: usize,
    pub saturated: bool,
    pub curve: VafCurve,
    pub decompositions: Vec<SynergyDecomposition>,
}

impl SynergyCount {
    pub fn optimal(&self) -> &SynergyDecomposition {
        &self.decompositions[self.k_star - 1]
    }

    pub fn max_relative_increase(&self) -> f64 {
        self.decompositions
            .iter()
            .map(|d| d.max_relative_increase)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn optimal_synergy_count(
    e: &EmgMatrix,
    seeds: &[u64],
    opts: &NmfOptions,
    rule: &OscRule,
) -> Result<SynergyCount> {
    let ev = e.view();
    let decompositions = (1..=rule.max_k)
        .map(|k| nmf(e, k, seeds, opts))
        .collect::<Result<Vec<_>>>()?;
    let mut vafs = Vec::with_capacity(rule.max_k);
    let mut per_channel = Vec::with_capacity(rule.max_k);
    for d in &decompositions {
        vafs.push(vaf(ev, &d.w, &d.h)?);
        per_channel.push(vaf_per_channel(ev, &d.w, &d.h));
    }
    let (k_star, saturated) = rule.select(&vafs);
    Ok(SynergyCount {
        k_star,
        saturated,
        curve: VafCurve {
            vaf: vafs,
            per_channel,
        },
        decompositions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn planted(k: usize, t: usize, seed: u64) -> (Array2<f64>, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Array2::from_shape_fn((8, k), |(i, j)| if i % k == j { 0.5 + rng.gen::<f64>() } else { 0.0 });
        let h = Array2::from_shape_fn((k, t), |_| rng.gen::<f64>());
        (w, h)
    }

    fn scaled(e: Array2<f64>) -> EmgMatrix {
        let max = e.iter().cloned().fold(0.0, f64::max);
        EmgMatrix::new(e / max).unwrap()
    }

    #[test]
    fn planted_rank_two_is_recovered_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Array2::from_shape_fn((8, 2), |_| 0.1 + rng.gen::<f64>());
        let h = Array2::from_shape_fn((2, 200), |_| 0.1 + rng.gen::<f64>());
        let e = scaled(w.dot(&h));
        let d = nmf(&e, 2, &[1, 2, 3, 4], &NmfOptions { max_iter: 20_000, tol: 0.0 }).unwrap();
        let total: f64 = e.view().iter().map(|v| v * v).sum();
        assert!(d.objective < 1e-8 * total, "objective {}", d.objective);
    }

    #[test]
    fn full_rank_uses_identity_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = EmgMatrix::new(Array2::from_shape_fn((8, 50), |_| rng.gen::<f64>())).unwrap();
        let d = nmf(&e, 8, &[0], &NmfOptions::default()).unwrap();
        assert!(vaf(e.view(), &d.w, &d.h).unwrap() >= 0.99);
    }

    #[test]
    fn single_active_muscle_is_rank_one() {
        let mut e = Array2::zeros((8, 40));
        for t in 0..40 {
            e[[3, t]] = (t as f64 / 40.0).sin().abs();
        }
        let e = EmgMatrix::new(e).unwrap();
        let d = nmf(&e, 1, &[0, 1], &NmfOptions::default()).unwrap();
        assert!(vaf(e.view(), &d.w, &d.h).unwrap() >= 0.999);
        let osc = optimal_synergy_count(&e, &[0, 1], &NmfOptions::default(), &OscRule::default()).unwrap();
        assert_eq!(osc.k_star, 1);
    }

    #[test]
    fn nmf_rejects_bad_input() {
        let zero = EmgMatrix::new(Array2::zeros((8, 5))).unwrap();
        assert!(nmf(&zero, 2, &[0], &NmfOptions::default()).is_err());
        let e = EmgMatrix::new(Array2::from_elem((8, 5), 0.5)).unwrap();
        assert!(nmf(&e, 0, &[0], &NmfOptions::default()).is_err());
        assert!(nmf(&e, 9, &[0], &NmfOptions::default()).is_err());
        assert!(EmgMatrix::new(Array2::from_elem((7, 5), 0.5)).is_err());
        assert!(EmgMatrix::new(Array2::from_elem((8, 5), -0.1)).is_err());
    }

    #[test]
    fn vaf_cases() {
        let e = array![[1.0, 2.0], [3.0, 4.0]];
        let w = array![[1.0], [1.0]];
        let h = array![[2.0, 3.0]];
        // residual [[-1, -1], [1, 1]] → 4 / 30
        assert!((vaf(&e, &w, &h).unwrap() - (1.0 - 4.0 / 30.0)).abs() < 1e-15);
        assert_eq!(vaf(&e, &Array2::eye(2), &e).unwrap(), 1.0);
        assert_eq!(vaf(&e, &Array2::zeros((2, 1)), &h).unwrap(), 0.0);
        assert!(vaf(&Array2::zeros((2, 2)), &w, &h).is_err());
    }

    #[test]
    fn osc_rule_walkthrough() {
        let rule = OscRule::default();
        let curve = [0.85, 0.92, 0.96, 0.97, 0.975, 0.98, 0.99, 1.0];
        assert_eq!(rule.select(&curve), (3, false));
        assert_eq!(rule.select(&[0.5, 0.6, 0.7, 0.75, 0.8, 0.85, 0.88, 0.89]), (8, true));
        assert_eq!(rule.select(&[0.5, 0.6, 0.7, 0.75, 0.8, 0.85, 0.88, 0.95]), (8, false));
    }

    #[test]
    fn normalization_leaves_product_unchanged() {
        let (w, h) = planted(3, 30, 9);
        let before = w.dot(&h);
        let (mut w2, mut h2) = (w.clone(), h.clone());
        normalize_columns(&mut w2, &mut h2);
        let after = w2.dot(&h2);
        for (a, b) in before.iter().zip(after.iter()) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
        for j in 0..3 {
            let n: f64 = w2.column(j).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn objective_is_monotone_and_factors_nonnegative() {
        let (w, h) = planted(3, 100, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let e = scaled(w.dot(&h).mapv(|v| v + 0.05 * rng.gen::<f64>()));
        for k in 1..=8 {
            let d = nmf(&e, k, &[10, 11, 12], &NmfOptions::default()).unwrap();
            assert!(d.max_relative_increase <= 1e-12, "k={k}: {}", d.max_relative_increase);
            assert!(d.w.iter().chain(d.h.iter()).all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn best_of_seeds_curve_peaks_at_full_rank() {
        let (w, h) = planted(4, 80, 2);
        let e = scaled(w.dot(&h));
        let osc = optimal_synergy_count(&e, &[1, 2], &NmfOptions::default(), &OscRule::default()).unwrap();
        let last = osc.curve.vaf[7];
        assert!(osc.curve.vaf.iter().all(|&v| v <= last));
        assert_eq!(osc.k_star, 4);
    }

    #[test]
    fn decomposition_is_deterministic() {
        let (w, h) = planted(2, 60, 5);
        let e = scaled(w.dot(&h));
        let a = nmf(&e, 3, &[7, 8], &NmfOptions::default()).unwrap();
        let b = nmf(&e, 3, &[7, 8], &NmfOptions::default()).unwrap();
        assert_eq!(a, b);
    }
}
