//! Two-state Gaussian hidden Markov models over 8-channel EMG envelopes:
//! Baum-Welch fitting, Viterbi decoding and the label-swap-invariant subtask
//! classification error.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gamesync::align_nearest;
use crate::model::{EmgRecord, SubtaskSequence, TaskSpec, TrialKey};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceKind {
    #[default]
    Diagonal,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HmmOptions {
    pub n_states: usize,
    pub max_iter: usize,
    /// Absolute log-likelihood improvement below which EM stops.
    pub tol: f64,
    pub var_floor: f64,
    pub covariance: CovarianceKind,
}

impl Default for HmmOptions {
    fn default() -> Self {
        HmmOptions {
            n_states: 2,
            max_iter: 200,
            tol: 1e-4,
            var_floor: 1e-6,
            covariance: CovarianceKind::Diagonal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmModel {
    pub pi: Vec<f64>,
    /// Row-stochastic transition matrix.
    pub transitions: Vec<Vec<f64>>,
    pub means: Vec<Vec<f64>>,
    /// Per-state covariance, row-major D×D; only the diagonal is non-zero for
    /// diagonal emissions.
    pub covariances: Vec<Vec<f64>>,
    pub covariance: CovarianceKind,
    pub seed: u64,
    pub log_likelihood_trace: Vec<f64>,
    pub iterations: usize,
}

impl HmmModel {
    pub fn n_states(&self) -> usize {
        self.pi.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn variance(&self, state: usize, channel: usize) -> f64 {
        self.covariances[state][channel * self.dim() + channel]
    }

    fn validate(&self, obs: &Array2<f64>) -> Result<()> {
        if obs.ncols() != self.dim() {
            return Err(Error::LengthMismatch {
                left: obs.ncols(),
                right: self.dim(),
            });
        }
        if obs.nrows() == 0 {
            return Err(Error::InsufficientData("no observations".into()));
        }
        if obs.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("observations must be finite".into()));
        }
        Ok(())
    }

    /// T × N log emission densities.
    pub fn log_emissions(&self, obs: &Array2<f64>) -> Result<Array2<f64>> {
        let (t_len, d) = obs.dim();
        let n = self.n_states();
        let mut out = Array2::zeros((t_len, n));
        match self.covariance {
            CovarianceKind::Diagonal => {
                for s in 0..n {
                    let inv: Vec<f64> = (0..d).map(|c| 1.0 / self.variance(s, c)).collect();
                    let konst = -0.5 * (0..d).map(|c| LN_2PI + self.variance(s, c).ln()).sum::<f64>();
                    let mu = &self.means[s];
                    for (t, row) in obs.outer_iter().enumerate() {
                        let q: f64 = (0..d).map(|c| (row[c] - mu[c]).powi(2) * inv[c]).sum();
                        out[[t, s]] = konst - 0.5 * q;
                    }
                }
            }
            CovarianceKind::Full => {
                for s in 0..n {
                    let cov = DMatrix::from_row_slice(d, d, &self.covariances[s]);
                    let chol = cov.cholesky().ok_or_else(|| {
                        Error::Degenerate(format!("state {s} covariance is not positive definite"))
                    })?;
                    let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                    let konst = -0.5 * (d as f64 * LN_2PI + log_det);
                    for (t, row) in obs.outer_iter().enumerate() {
                        let diff = DVector::from_iterator(d, (0..d).map(|c| row[c] - self.means[s][c]));
                        let z = chol.l().solve_lower_triangular(&diff).expect("non-singular factor");
                        out[[t, s]] = konst - 0.5 * z.norm_squared();
                    }
                }
            }
        }
        Ok(out)
    }
}

struct Posterior {
    log_likelihood: f64,
    gamma: Array2<f64>,
    /// Expected transition counts, N × N.
    xi: Vec<Vec<f64>>,
}

/// Scaled forward-backward pass.
fn forward_backward(model: &HmmModel, log_b: &Array2<f64>, want_posterior: bool) -> Posterior {
    let (t_len, n) = log_b.dim();
    let mut b = Array2::zeros((t_len, n));
    let mut shift = vec![0.0; t_len];
    for t in 0..t_len {
        let m = (0..n).map(|s| log_b[[t, s]]).fold(f64::NEG_INFINITY, f64::max);
        shift[t] = m;
        for s in 0..n {
            b[[t, s]] = (log_b[[t, s]] - m).exp();
        }
    }
    let a = &model.transitions;
    let mut alpha = Array2::zeros((t_len, n));
    let mut scale = vec![0.0; t_len];
    for t in 0..t_len {
        for s in 0..n {
            let prior = if t == 0 {
                model.pi[s]
            } else {
                (0..n).map(|r| alpha[[t - 1, r]] * a[r][s]).sum()
            };
            alpha[[t, s]] = prior * b[[t, s]];
        }
        let c: f64 = (0..n).map(|s| alpha[[t, s]]).sum();
        scale[t] = c;
        for s in 0..n {
            alpha[[t, s]] /= c;
        }
    }
    let log_likelihood = scale.iter().zip(&shift).map(|(c, m)| c.ln() + m).sum();
    if !want_posterior {
        return Posterior {
            log_likelihood,
            gamma: Array2::zeros((0, n)),
            xi: vec![],
        };
    }
    let mut beta = Array2::from_elem((t_len, n), 1.0);
    for t in (0..t_len - 1).rev() {
        for s in 0..n {
            beta[[t, s]] = (0..n).map(|r| a[s][r] * b[[t + 1, r]] * beta[[t + 1, r]]).sum::<f64>() / scale[t + 1];
        }
    }
    let mut gamma = &alpha * &beta;
    for mut row in gamma.outer_iter_mut() {
        let z: f64 = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    let mut xi = vec![vec![0.0; n]; n];
    for t in 0..t_len - 1 {
        for (s, xs) in xi.iter_mut().enumerate() {
            for (r, x) in xs.iter_mut().enumerate() {
                *x += alpha[[t, s]] * a[s][r] * b[[t + 1, r]] * beta[[t + 1, r]] / scale[t + 1];
            }
        }
    }
    Posterior {
        log_likelihood,
        gamma,
        xi,
    }
}

pub fn log_likelihood(model: &HmmModel, obs: &Array2<f64>) -> Result<f64> {
    model.validate(obs)?;
    let log_b = model.log_emissions(obs)?;
    Ok(forward_backward(model, &log_b, false).log_likelihood)
}

fn initial_model(obs: &Array2<f64>, opts: &HmmOptions, seed: u64) -> HmmModel {
    let (t_len, d) = obs.dim();
    let n = opts.n_states;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = vec![vec![0.0; d]; n];
    let mut vars = vec![0.0; d];
    for c in 0..d {
        let mut col: Vec<f64> = obs.column(c).to_vec();
        let mean = col.iter().sum::<f64>() / t_len as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t_len as f64;
        vars[c] = var.max(opts.var_floor);
        col.sort_by(f64::total_cmp);
        let noise = Normal::new(0.0, 0.1 * vars[c].sqrt()).expect("finite spread");
        for (s, m) in means.iter_mut().enumerate() {
            let part = &col[s * t_len / n..(s + 1) * t_len / n];
            m[c] = part.iter().sum::<f64>() / part.len() as f64 + noise.sample(&mut rng);
        }
    }
    let stay = 0.95;
    let switch = if n > 1 { (1.0 - stay) / (n - 1) as f64 } else { 0.0 };
    let transitions = (0..n)
        .map(|s| (0..n).map(|r| if n == 1 { 1.0 } else if r == s { stay } else { switch }).collect())
        .collect();
    let cov: Vec<f64> = (0..d * d).map(|i| if i % (d + 1) == 0 { vars[i / d] } else { 0.0 }).collect();
    HmmModel {
        pi: vec![1.0 / n as f64; n],
        transitions,
        means,
        covariances: vec![cov; n],
        covariance: opts.covariance,
        seed,
        log_likelihood_trace: vec![],
        iterations: 0,
    }
}

fn m_step(model: &mut HmmModel, obs: &Array2<f64>, post: &Posterior, floor: f64) {
    let (t_len, d) = obs.dim();
    let n = model.n_states();
    let g0: f64 = (0..n).map(|s| post.gamma[[0, s]]).sum();
    for s in 0..n {
        model.pi[s] = post.gamma[[0, s]] / g0;
        let row: f64 = post.xi[s].iter().sum();
        if row > 0.0 {
            for r in 0..n {
                model.transitions[s][r] = post.xi[s][r] / row;
            }
        }
        let weight: f64 = post.gamma.column(s).sum();
        // A state with no responsibility keeps its emission parameters.
        if weight <= f64::MIN_POSITIVE * t_len as f64 {
            continue;
        }
        let mut mu = vec![0.0; d];
        for (t, x) in obs.outer_iter().enumerate() {
            let g = post.gamma[[t, s]];
            for c in 0..d {
                mu[c] += g * x[c];
            }
        }
        mu.iter_mut().for_each(|m| *m /= weight);
        let mut cov = vec![0.0; d * d];
        for (t, x) in obs.outer_iter().enumerate() {
            let g = post.gamma[[t, s]];
            match model.covariance {
                CovarianceKind::Diagonal => {
                    for c in 0..d {
                        cov[c * d + c] += g * (x[c] - mu[c]).powi(2);
                    }
                }
                CovarianceKind::Full => {
                    for i in 0..d {
                        for j in 0..d {
                            cov[i * d + j] += g * (x[i] - mu[i]) * (x[j] - mu[j]);
                        }
                    }
                }
            }
        }
        cov.iter_mut().for_each(|v| *v /= weight);
        for c in 0..d {
            cov[c * d + c] = cov[c * d + c].max(floor);
        }
        model.means[s] = mu;
        model.covariances[s] = cov;
    }
}

/// Baum-Welch from a seeded quantile-split initialization.
pub fn fit_hmm(obs: &Array2<f64>, opts: &HmmOptions, seed: u64) -> Result<HmmModel> {
    let (t_len, d) = obs.dim();
    if opts.n_states == 0 {
        return Err(Error::InvalidParameter("an HMM needs at least one state".into()));
    }
    if t_len < 2 * opts.n_states || d == 0 {
        return Err(Error::InsufficientData(format!(
            "HMM with {} states needs at least {} observations, got {t_len}",
            opts.n_states,
            2 * opts.n_states
        )));
    }
    if obs.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("observations must be finite".into()));
    }
    if !(opts.var_floor > 0.0) {
        return Err(Error::InvalidParameter("variance floor must be positive".into()));
    }
    let flat = obs.columns().into_iter().all(|col| {
        let mean = col.sum() / t_len as f64;
        col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (t_len as f64) < opts.var_floor
    });
    if flat {
        return Err(Error::Degenerate(
            "observations have no variance above the floor on any channel".into(),
        ));
    }
    let mut model = initial_model(obs, opts, seed);
    let mut evaluated = false;
    while model.iterations < opts.max_iter {
        let log_b = model.log_emissions(obs)?;
        let post = forward_backward(&model, &log_b, true);
        let ll = post.log_likelihood;
        let done = model
            .log_likelihood_trace
            .last()
            .is_some_and(|&prev| ll - prev < opts.tol);
        model.log_likelihood_trace.push(ll);
        if done {
            evaluated = true;
            break;
        }
        m_step(&mut model, obs, &post, opts.var_floor);
        model.iterations += 1;
    }
    if !evaluated {
        let ll = log_likelihood(&model, obs)?;
        model.log_likelihood_trace.push(ll);
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViterbiPath {
    pub states: Vec<u8>,
    pub log_probability: f64,
}

/// Most probable state sequence; ties resolve to the lower state index.
pub fn viterbi(model: &HmmModel, obs: &Array2<f64>) -> Result<ViterbiPath> {
    model.validate(obs)?;
    let log_b = model.log_emissions(obs)?;
    let (t_len, n) = log_b.dim();
    let log_a: Vec<Vec<f64>> = model.transitions.iter().map(|r| r.iter().map(|v| v.ln()).collect()).collect();
    let mut delta: Vec<f64> = (0..n).map(|s| model.pi[s].ln() + log_b[[0, s]]).collect();
    let mut back = vec![vec![0u8; n]; t_len];
    for t in 1..t_len {
        let mut next = vec![f64::NEG_INFINITY; n];
        for s in 0..n {
            for r in 0..n {
                let v = delta[r] + log_a[r][s];
                if v > next[s] {
                    next[s] = v;
                    back[t][s] = r as u8;
                }
            }
            next[s] += log_b[[t, s]];
        }
        delta = next;
    }
    let (mut state, log_probability) = delta
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (s, &v)| if v > acc.1 { (s, v) } else { acc });
    let mut states = vec![0u8; t_len];
    for t in (0..t_len).rev() {
        states[t] = state as u8;
        state = back[t][state] as usize;
    }
    Ok(ViterbiPath {
        states,
        log_probability,
    })
}

/// min(hamming(A, V), hamming(!A, V)) as a fraction of positions.
pub fn subtask_error(a: &[u8], v: &[u8]) -> Result<f64> {
    if a.len() != v.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: v.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::InsufficientData("subtask error of empty sequences".into()));
    }
    if a.iter().chain(v).any(|&x| x > 1) {
        return Err(Error::InvalidParameter("subtask error needs binary labels".into()));
    }
    let h = a.iter().zip(v).filter(|(x, y)| x != y).count() as f64 / a.len() as f64;
    Ok(h.min(1.0 - h))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmErrorReport {
    pub key: Option<TrialKey>,
    pub seeds: Vec<u64>,
    pub errors: Vec<f64>,
    pub iterations: Vec<usize>,
    pub mean: f64,
    /// Population variance over restarts.
    pub variance: f64,
    pub restarts: usize,
    /// Aligned (subtask, EMG) sample pairs that were scored.
    pub scored_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmTrialOutcome {
    pub report: HmmErrorReport,
    /// EMG timeline after decimation.
    pub timestamps: Vec<f64>,
    pub paths: Vec<ViterbiPath>,
}

/// Keeps every `step`-th envelope sample as a T × channels matrix.
pub fn observation_matrix(envelope: &EmgRecord, step: usize) -> (Vec<f64>, Array2<f64>) {
    let step = step.max(1);
    let rows: Vec<usize> = (0..envelope.len()).step_by(step).collect();
    let ts = rows.iter().map(|&i| envelope.timestamps()[i]).collect();
    let obs = Array2::from_shape_fn((rows.len(), envelope.channel_count()), |(t, c)| envelope.channel(c)[rows[t]]);
    (ts, obs)
}

/// Fits `restarts` independent HMMs (seeds `base_seed..base_seed + restarts`)
/// and scores each Viterbi path against the prescribed subtasks at the game
/// samples that have an EMG sample within one EMG period.
pub fn multi_restart_error(
    task: &TaskSpec,
    envelope: &EmgRecord,
    subtasks: &SubtaskSequence,
    opts: &HmmOptions,
    restarts: usize,
    base_seed: u64,
    decimate: usize,
) -> Result<HmmTrialOutcome> {
    if !task.id.is_single_axis() {
        return Err(Error::NotSingleAxis(task.id));
    }
    if restarts == 0 {
        return Err(Error::InvalidParameter("at least one restart is required".into()));
    }
    let (ts, obs) = observation_matrix(envelope, decimate);
    if ts.len() < 2 {
        return Err(Error::InsufficientData("envelope too short for an HMM".into()));
    }
    let mut gaps: Vec<f64> = ts.windows(2).map(|w| w[1] - w[0]).collect();
    gaps.sort_by(f64::total_cmp);
    let period = gaps[gaps.len() / 2];
    let alignment = align_nearest(&subtasks.timestamps, &ts, period)?;
    let target: Vec<u8> = alignment.pairs.iter().map(|p| subtasks.labels[p.game_index]).collect();

    let seeds: Vec<u64> = (0..restarts as u64).map(|i| base_seed.wrapping_add(i)).collect();
    let fits = seeds
        .par_iter()
        .map(|&seed| {
            let model = fit_hmm(&obs, opts, seed)?;
            let path = viterbi(&model, &obs)?;
            let decoded: Vec<u8> = alignment.pairs.iter().map(|p| path.states[p.sensor_index]).collect();
            Ok((subtask_error(&target, &decoded)?, model.iterations, path))
        })
        .collect::<Result<Vec<_>>>()?;
    let errors: Vec<f64> = fits.iter().map(|f| f.0).collect();
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let variance = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    Ok(HmmTrialOutcome {
        report: HmmErrorReport {
            key: None,
            seeds,
            iterations: fits.iter().map(|f| f.1).collect(),
            errors,
            mean,
            variance,
            restarts,
            scored_samples: alignment.pairs.len(),
        },
        timestamps: ts,
        paths: fits.into_iter().map(|f| f.2).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_model(rng: &mut ChaCha8Rng, d: usize) -> HmmModel {
        let p: f64 = rng.gen_range(0.05..0.95);
        let a: f64 = rng.gen_range(0.05..0.95);
        let b: f64 = rng.gen_range(0.05..0.95);
        let means = (0..2).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let covariances = (0..2)
            .map(|_| (0..d * d).map(|i| if i % (d + 1) == 0 { rng.gen_range(0.2..2.0) } else { 0.0 }).collect())
            .collect();
        HmmModel {
            pi: vec![p, 1.0 - p],
            transitions: vec![vec![a, 1.0 - a], vec![1.0 - b, b]],
            means,
            covariances,
            covariance: CovarianceKind::Diagonal,
            seed: 0,
            log_likelihood_trace: vec![],
            iterations: 0,
        }
    }

    fn sequence_log_prob(m: &HmmModel, log_b: &Array2<f64>, states: &[usize]) -> f64 {
        let mut lp = m.pi[states[0]].ln() + log_b[[0, states[0]]];
        for t in 1..states.len() {
            lp += m.transitions[states[t - 1]][states[t]].ln() + log_b[[t, states[t]]];
        }
        lp
    }

    #[test]
    fn small_instances_match_exhaustive_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let m = random_model(&mut rng, 3);
            let t_len = rng.gen_range(1..=10);
            let obs = Array2::from_shape_fn((t_len, 3), |_| rng.gen_range(-2.0..2.0));
            let log_b = m.log_emissions(&obs).unwrap();
            let mut best = (f64::NEG_INFINITY, 0usize);
            let mut terms = Vec::new();
            for code in 0..1usize << t_len {
                let states: Vec<usize> = (0..t_len).map(|t| (code >> t) & 1).collect();
                let lp = sequence_log_prob(&m, &log_b, &states);
                terms.push(lp);
                if lp > best.0 {
                    best = (lp, code);
                }
            }
            let top = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let marginal = top + terms.iter().map(|v| (v - top).exp()).sum::<f64>().ln();
            assert!((log_likelihood(&m, &obs).unwrap() - marginal).abs() < 1e-8);
            let path = viterbi(&m, &obs).unwrap();
            let expected: Vec<u8> = (0..t_len).map(|t| ((best.1 >> t) & 1) as u8).collect();
            assert_eq!(path.states, expected);
            assert!((path.log_probability - best.0).abs() < 1e-9);
        }
    }

    #[test]
    fn dominant_emissions_decode_per_sample() {
        let mut m = random_model(&mut ChaCha8Rng::seed_from_u64(1), 1);
        m.transitions = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        m.pi = vec![0.5, 0.5];
        m.means = vec![vec![-10.0], vec![10.0]];
        m.covariances = vec![vec![0.01], vec![0.01]];
        let obs = Array2::from_shape_vec((6, 1), vec![-10.0, 10.0, 10.0, -10.0, 10.0, -10.0]).unwrap();
        assert_eq!(viterbi(&m, &obs).unwrap().states, vec![0, 1, 1, 0, 1, 0]);
    }

    #[test]
    fn symmetric_model_constant_path_probability() {
        let m = HmmModel {
            pi: vec![0.5, 0.5],
            transitions: vec![vec![0.9, 0.1], vec![0.1, 0.9]],
            means: vec![vec![0.0], vec![0.0]],
            covariances: vec![vec![1.0], vec![1.0]],
            covariance: CovarianceKind::Diagonal,
            seed: 0,
            log_likelihood_trace: vec![],
            iterations: 0,
        };
        let obs = Array2::from_shape_vec((4, 1), vec![0.0, 1.0, -1.0, 0.5]).unwrap();
        let path = viterbi(&m, &obs).unwrap();
        let emissions: f64 = [0.0f64, 1.0, -1.0, 0.5].iter().map(|x| -0.5 * (LN_2PI + x * x)).sum();
        let expected = 0.5f64.ln() + 3.0 * 0.9f64.ln() + emissions;
        assert!((path.log_probability - expected).abs() < 1e-12);
        assert!(path.states.windows(2).all(|w| w[0] == w[1]));
    }

    fn planted(t_len: usize, seed: u64) -> (Array2<f64>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let mut state = 0u8;
        let mut states = Vec::with_capacity(t_len);
        for _ in 0..t_len {
            if rng.gen::<f64>() < 0.02 {
                state ^= 1;
            }
            states.push(state);
        }
        let obs = Array2::from_shape_fn((t_len, 8), |(t, c)| {
            let hi = (states[t] == 1) ^ (c % 3 == 0);
            (if hi { 0.7 } else { 0.2 }) + noise.sample(&mut rng)
        });
        (obs, states)
    }

    #[test]
    fn planted_means_are_recovered() {
        let (obs, states) = planted(5000, 3);
        let m = fit_hmm(&obs, &HmmOptions::default(), 0).unwrap();
        let flip = m.means[0][1] > m.means[1][1];
        for s in 0..2 {
            let truth = s as u8 ^ flip as u8;
            for c in 0..8 {
                let hi = (truth == 1) ^ (c % 3 == 0);
                let expected = if hi { 0.7 } else { 0.2 };
                assert!((m.means[s][c] - expected).abs() < 0.05, "state {s} channel {c}");
            }
        }
        let path = viterbi(&m, &obs).unwrap();
        assert!(subtask_error(&states, &path.states).unwrap() < 0.01);
    }

    #[test]
    fn log_likelihood_trace_is_non_decreasing() {
        for kind in [CovarianceKind::Diagonal, CovarianceKind::Full] {
            let (obs, _) = planted(800, 9);
            let opts = HmmOptions {
                covariance: kind,
                tol: 0.0,
                max_iter: 30,
                ..HmmOptions::default()
            };
            let m = fit_hmm(&obs, &opts, 4).unwrap();
            for w in m.log_likelihood_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-8, "{kind:?}: {} then {}", w[0], w[1]);
            }
            let final_ll = log_likelihood(&m, &obs).unwrap();
            assert!((final_ll - m.log_likelihood_trace.last().unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_observations_are_degenerate() {
        let obs = Array2::from_elem((100, 8), 0.3);
        assert!(matches!(fit_hmm(&obs, &HmmOptions::default(), 0), Err(Error::Degenerate(_))));
        let tiny = Array2::from_elem((3, 8), 0.3);
        assert!(fit_hmm(&tiny, &HmmOptions::default(), 0).is_err());
    }

    #[test]
    fn fitting_is_reproducible() {
        let (obs, _) = planted(500, 2);
        let a = fit_hmm(&obs, &HmmOptions::default(), 17).unwrap();
        let b = fit_hmm(&obs, &HmmOptions::default(), 17).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn subtask_error_cases() {
        assert_eq!(subtask_error(&[0, 1, 1, 0], &[0, 1, 1, 0]).unwrap(), 0.0);
        assert_eq!(subtask_error(&[0, 1, 1, 0], &[1, 0, 0, 1]).unwrap(), 0.0);
        assert_eq!(subtask_error(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap(), 0.25);
        assert!(subtask_error(&[0, 1], &[0]).is_err());
        assert!(subtask_error(&[0, 2], &[0, 1]).is_err());
    }
}
