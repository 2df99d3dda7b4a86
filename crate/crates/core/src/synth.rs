//! Seeded generators for trials and datasets with known ground truth:
//! force offsets and ideal force, planted synergy factors and planted HMM
//! state sequences.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gamesync::{align_nearest, central_difference, derive_subtasks, SubtaskThreshold};
use crate::ingest::{write_trial, DatasetManifest, SampleRates};
use crate::model::{
    Cohort, EmgRecord, GameAxis, GameTrace, ParticipantInfo, PoseCondition, Rotation, SubtaskSequence, TaskId,
    TaskSpec, Trial, WrenchChannel, WrenchRecord, EMG_LABELS,
};
use crate::seed::derive_seed;
use crate::synergy::EmgMatrix;

/// Peak target excursion in game units.
pub const TARGET_AMPLITUDE: f64 = 10.0;

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn triangle(phase: f64) -> f64 {
    let p = phase.rem_euclid(1.0);
    if p < 0.25 {
        4.0 * p
    } else if p < 0.75 {
        2.0 - 4.0 * p
    } else {
        4.0 * p - 4.0
    }
}

fn catmull_rom(points: &[[f64; 2]], s: f64) -> [f64; 2] {
    let n = points.len();
    let s = s.rem_euclid(n as f64);
    let i = s.floor() as usize;
    let u = s - i as f64;
    let p = |k: usize| points[(i + n + k - 1) % n];
    let (p0, p1, p2, p3) = (p(0), p(1), p(2), p(3));
    let mut out = [0.0; 2];
    for d in 0..2 {
        out[d] = 0.5
            * (2.0 * p1[d]
                + (p2[d] - p0[d]) * u
                + (2.0 * p0[d] - 5.0 * p1[d] + 4.0 * p2[d] - p3[d]) * u * u
                + (3.0 * p1[d] - p0[d] - 3.0 * p2[d] + p3[d]) * u * u * u);
    }
    out
}

const SPLINE1: [[f64; 2]; 5] = [[0.0, 10.0], [9.0, 3.0], [5.0, -8.0], [-5.0, -8.0], [-9.0, 3.0]];
const SPLINE2: [[f64; 2]; 6] = [[0.0, 6.0], [8.0, 9.0], [10.0, -2.0], [1.0, -9.0], [-7.0, -5.0], [-10.0, 4.0]];

/// Target position (x, y) at trial time `tau` for a trial of `duration` seconds
/// that performs the task's repetitions back to back.
pub fn target_position(task: &TaskSpec, tau: f64, duration: f64) -> [f64; 2] {
    let cycles = tau * task.repetitions as f64 / duration;
    let a = TARGET_AMPLITUDE;
    match task.id {
        TaskId::XAxis | TaskId::YAxis | TaskId::ZAxis | TaskId::Torque => {
            let v = a * triangle(cycles);
            match task.output_axes()[0] {
                GameAxis::X => [v, 0.0],
                GameAxis::Y => [0.0, v],
            }
        }
        TaskId::CircleCw | TaskId::CircleCcw => {
            let th = 2.0 * std::f64::consts::PI * cycles;
            let sign = if task.rotation == Some(Rotation::Clockwise) { 1.0 } else { -1.0 };
            [sign * a * th.sin(), a * th.cos()]
        }
        TaskId::Spline1 | TaskId::Spline2 => {
            let mut pts: Vec<[f64; 2]> = if task.id == TaskId::Spline1 { SPLINE1.to_vec() } else { SPLINE2.to_vec() };
            if task.rotation == Some(Rotation::CounterClockwise) {
                pts.reverse();
            }
            catmull_rom(&pts, cycles * pts.len() as f64)
        }
    }
}

/// Sensor and game clocks sharing one integer sample grid, so that every game
/// sample coincides with a sensor sample.
struct Timeline {
    sensor: Vec<f64>,
    game: Vec<f64>,
    /// Sensor index of each game sample.
    game_at: Vec<usize>,
    /// Trial time (seconds since the first game sample) of each game sample.
    tau: Vec<f64>,
}

fn timeline(sensor_hz: f64, game_hz: f64, lead_in: f64, duration: f64, lead_out: f64) -> Result<Timeline> {
    if !(sensor_hz > 0.0 && game_hz > 0.0 && game_hz <= sensor_hz && duration > 0.0 && lead_in >= 0.0 && lead_out >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "invalid timeline: sensor {sensor_hz} Hz, game {game_hz} Hz, duration {duration} s"
        )));
    }
    let j0 = (lead_in * sensor_hz).round() as usize;
    let n_game = (duration * game_hz).floor() as usize + 1;
    let game_at: Vec<usize> = (0..n_game).map(|i| j0 + (i as f64 * sensor_hz / game_hz).round() as usize).collect();
    let n_sensor = game_at[n_game - 1] + (lead_out * sensor_hz).round() as usize + 1;
    let sensor = (0..n_sensor).map(|j| j as f64 / sensor_hz).collect();
    let game = game_at.iter().map(|&j| j as f64 / sensor_hz).collect();
    let tau = game_at.iter().map(|&j| (j - j0) as f64 / sensor_hz).collect();
    Ok(Timeline {
        sensor,
        game,
        game_at,
        tau,
    })
}

impl Timeline {
    /// Piecewise-linear interpolation of game-rate values onto the sensor
    /// grid, exact at game samples and held constant outside the game window.
    fn to_sensor(&self, values: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.sensor.len()];
        let first = self.game_at[0];
        let last = *self.game_at.last().unwrap();
        for (j, o) in out.iter_mut().enumerate() {
            *o = if j <= first {
                values[0]
            } else if j >= last {
                values[values.len() - 1]
            } else {
                let i = self.game_at.partition_point(|&g| g <= j) - 1;
                let (a, b) = (self.game_at[i], self.game_at[i + 1]);
                let w = (j - a) as f64 / (b - a) as f64;
                values[i] * (1.0 - w) + values[i + 1] * w
            };
        }
        out
    }
}

/// Smooth zero-mean signal: mean of three sinusoids with random frequency in
/// [0.3, 1.2] Hz and random phase, scaled by `amplitude`.
fn wobble(rng: &mut ChaCha8Rng, amplitude: f64) -> impl Fn(f64) -> f64 {
    let parts: Vec<(f64, f64)> = (0..3)
        .map(|_| (rng.gen_range(0.3..1.2), rng.gen_range(0.0..std::f64::consts::TAU)))
        .collect();
    move |t| {
        amplitude * parts.iter().map(|(f, p)| (std::f64::consts::TAU * f * t + p).sin()).sum::<f64>() / 3.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    /// Hidden state equals the prescribed subtask label.
    Aligned,
    /// Hidden state follows its own Markov chain.
    Independent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedHmm {
    pub coupling: Coupling,
    /// Distance between state means in noise standard deviations.
    pub separation_sd: f64,
    pub noise_sd: f64,
    /// Per-sample probability of staying in the current state (independent
    /// coupling only).
    pub stickiness: f64,
    /// Mean of the low state.
    pub low: f64,
}

impl PlantedHmm {
    pub fn new(coupling: Coupling) -> Self {
        PlantedHmm {
            coupling,
            separation_sd: 5.0,
            noise_sd: 0.1,
            stickiness: 0.9,
            low: 0.2,
        }
    }

    /// Per-state channel means; every third channel is active in state 0.
    pub fn means(&self) -> [[f64; 8]; 2] {
        let high = self.low + self.separation_sd * self.noise_sd;
        let mut m = [[0.0; 8]; 2];
        for c in 0..8 {
            let reversed = c % 3 == 0;
            m[0][c] = if reversed { high } else { self.low };
            m[1][c] = if reversed { self.low } else { high };
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynergyPlan {
    /// Muscles × rank planted synergy vectors.
    pub w0: Array2<f64>,
    pub coupling: Coupling,
    pub stickiness: f64,
    pub noise_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmgSource {
    /// Near-silent muscles.
    Quiet,
    Hmm(PlantedHmm),
    Synergy(SynergyPlan),
}

fn subtask_states(task: &TaskSpec, game: &GameTrace, emg_ts: &[f64]) -> Result<Vec<u8>> {
    let labels = derive_subtasks(task, game, SubtaskThreshold::default())?;
    let map = align_nearest(emg_ts, &labels.timestamps, f64::INFINITY)?;
    Ok(map.pairs.iter().map(|p| labels.labels[p.sensor_index]).collect())
}

fn markov_states(rng: &mut ChaCha8Rng, n: usize, stickiness: f64) -> Vec<u8> {
    let mut s = rng.gen_range(0..2u8);
    (0..n)
        .map(|_| {
            if rng.gen::<f64>() >= stickiness {
                s ^= 1;
            }
            s
        })
        .collect()
}

fn states_for(
    coupling: Coupling,
    stickiness: f64,
    task: &TaskSpec,
    game: &GameTrace,
    emg_ts: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<u8>> {
    match coupling {
        Coupling::Aligned => subtask_states(task, game, emg_ts),
        Coupling::Independent => Ok(markov_states(rng, emg_ts.len(), stickiness)),
    }
}

/// Channel-major envelopes and, for state-driven sources, the planted states.
fn envelopes(
    source: &EmgSource,
    task: &TaskSpec,
    game: &GameTrace,
    emg_ts: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Vec<f64>>, Option<Vec<u8>>)> {
    let n = emg_ts.len();
    match source {
        EmgSource::Quiet => Ok((vec![vec![0.01; n]; EMG_LABELS.len()], None)),
        EmgSource::Hmm(p) => {
            let states = states_for(p.coupling, p.stickiness, task, game, emg_ts, rng)?;
            let means = p.means();
            let noise = Normal::new(0.0, p.noise_sd).map_err(|e| Error::InvalidParameter(e.to_string()))?;
            let env = (0..EMG_LABELS.len())
                .map(|c| {
                    states
                        .iter()
                        .map(|&s| (means[s as usize][c] + noise.sample(rng)).max(0.0))
                        .collect()
                })
                .collect();
            Ok((env, Some(states)))
        }
        EmgSource::Synergy(plan) => {
            let r = plan.w0.ncols();
            let states = if task.id.is_single_axis() && r >= 2 {
                Some(states_for(plan.coupling, plan.stickiness, task, game, emg_ts, rng)?)
            } else {
                None
            };
            let mut h = Array2::zeros((r, n));
            for j in 0..r {
                let f = wobble(rng, 1.0);
                for (t, &ts) in emg_ts.iter().enumerate() {
                    let slow = 0.5 * (1.0 + f(ts));
                    h[[j, t]] = match (&states, j) {
                        (Some(s), 0) => 0.2 * slow + 0.8 * f64::from(s[t]),
                        (Some(s), 1) => 0.2 * slow + 0.8 * f64::from(1 - s[t]),
                        _ => slow,
                    };
                }
            }
            let e = plan.w0.dot(&h);
            let noise = Normal::new(0.0, plan.noise_sd).map_err(|e| Error::InvalidParameter(e.to_string()))?;
            let env = e
                .outer_iter()
                .map(|row| row.iter().map(|v| (0.02 + v + noise.sample(rng)).max(0.0)).collect())
                .collect();
            Ok((env, states))
        }
    }
}

/// Raw EMG whose RMS envelope follows `env`: envelope times a unit-variance
/// white carrier.
fn modulate(env: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let carrier = Normal::new(0.0, 1.0).expect("unit normal");
    env.iter().map(|ch| ch.iter().map(|e| e * carrier.sample(rng)).collect()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceTrialSpec {
    pub participant: ParticipantInfo,
    pub condition: PoseCondition,
    pub task: TaskId,
    pub duration_s: f64,
    pub lead_in_s: f64,
    pub lead_out_s: f64,
    pub rates: SampleRates,
    pub scaling_factor: f64,
    /// Constant Fx, Fy, Fz offsets in newtons.
    pub offsets: [f64; 3],
    pub noise_sd: f64,
    /// Avatar deviation from the target in game units (0 = perfect tracking).
    pub tracking_deviation: f64,
    /// Force amplitude on non-productive force axes in newtons.
    pub nonproductive: f64,
    pub emg: EmgSource,
    pub seed: u64,
}

impl ForceTrialSpec {
    pub fn new(task: TaskId, seed: u64) -> Self {
        ForceTrialSpec {
            participant: ParticipantInfo::new("01", Cohort::Healthy),
            condition: PoseCondition::A,
            task,
            duration_s: 8.0,
            lead_in_s: 0.5,
            lead_out_s: 0.5,
            rates: SampleRates::default(),
            scaling_factor: 2.0,
            offsets: [1.5, -0.7, 3.2],
            noise_sd: 0.0,
            tracking_deviation: 0.0,
            nonproductive: 0.0,
            emg: EmgSource::Quiet,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceTruth {
    pub offsets: [f64; 3],
    pub axes: Vec<WrenchChannel>,
    /// Offset-free force actually exerted, per productive axis, at game samples.
    pub force: Vec<Vec<f64>>,
    /// Ideal force per productive axis at game samples, offsets included.
    pub ideal_force: Vec<Vec<f64>>,
    /// Planted hidden states on the EMG timeline, when the EMG is state driven.
    pub states: Option<Vec<u8>>,
}

/// Force-task trial: target per the task shape, avatar = target + deviation,
/// exerted force = avatar velocity / k, measured wrench = force + offsets +
/// noise on a 1 kHz grid. Series are in raw sensor time (the game starts at
/// `lead_in_s`).
pub fn gen_force_trial(spec: &ForceTrialSpec) -> Result<(Trial, ForceTruth)> {
    if !(spec.scaling_factor > 0.0) || spec.noise_sd < 0.0 || spec.rates.emg_hz != spec.rates.wrench_hz {
        return Err(Error::InvalidParameter(
            "force trials need k > 0, non-negative noise and equal EMG and wrench rates".into(),
        ));
    }
    let task = spec.task.spec();
    let tl = timeline(spec.rates.wrench_hz, spec.rates.game_hz, spec.lead_in_s, spec.duration_s, spec.lead_out_s)?;
    let mut rng = rng_for(spec.seed);
    let k = spec.scaling_factor;

    let mut target = [vec![0.0; tl.game.len()], vec![0.0; tl.game.len()]];
    for (i, &tau) in tl.tau.iter().enumerate() {
        let p = target_position(&task, tau, spec.duration_s);
        target[0][i] = p[0];
        target[1][i] = p[1];
    }
    let mut avatar = target.clone();
    for &axis in &task.output_axes() {
        let d = wobble(&mut rng, spec.tracking_deviation);
        let a = axis.target_channel();
        for (i, &tau) in tl.tau.iter().enumerate() {
            avatar[a][i] += d(tau);
        }
    }
    let game = GameTrace::from_channels(
        tl.game.clone(),
        vec![target[0].clone(), target[1].clone(), avatar[0].clone(), avatar[1].clone()],
    )?;

    let noise = Normal::new(0.0, spec.noise_sd.max(f64::MIN_POSITIVE)).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let n = tl.sensor.len();
    let mut wrench = vec![vec![0.0; n]; 6];
    let mut truth = ForceTruth {
        offsets: spec.offsets,
        axes: vec![],
        force: vec![],
        ideal_force: vec![],
        states: None,
    };
    for &channel in &WrenchChannel::ALL {
        let b = if channel.is_force() { spec.offsets[channel.index()] } else { 0.0 };
        let base = match task.output_for(channel) {
            Some(axis) => {
                let a = axis.target_channel();
                let f: Vec<f64> = central_difference(&tl.game, &avatar[a])?.iter().map(|v| v / k).collect();
                let ideal: Vec<f64> = central_difference(&tl.game, &target[a])?.iter().map(|v| v / k + b).collect();
                let on_sensor = tl.to_sensor(&f);
                truth.axes.push(channel);
                truth.force.push(f);
                truth.ideal_force.push(ideal);
                on_sensor
            }
            None if channel.is_force() => {
                let leak = wobble(&mut rng, spec.nonproductive);
                tl.sensor.iter().map(|&t| leak(t)).collect()
            }
            None => vec![0.0; n],
        };
        for (w, v) in wrench[channel.index()].iter_mut().zip(base) {
            *w = v + b + if spec.noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        }
    }

    let (env, states) = envelopes(&spec.emg, &task, &game, &tl.sensor, &mut rng)?;
    truth.states = states;
    let emg = EmgRecord::from_channels(tl.sensor.clone(), modulate(&env, &mut rng))?;
    let trial = Trial {
        participant: spec.participant.clone(),
        condition: spec.condition,
        task,
        emg,
        wrench: WrenchRecord::from_channels(tl.sensor, wrench)?,
        game,
        scaling_factor: k,
    };
    Ok((trial, truth))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmTrialSpec {
    pub task: TaskId,
    /// EMG samples.
    pub samples: usize,
    pub emg_hz: f64,
    pub game_hz: f64,
    pub planted: PlantedHmm,
    pub seed: u64,
}

impl HmmTrialSpec {
    pub fn new(task: TaskId, coupling: Coupling, seed: u64) -> Self {
        HmmTrialSpec {
            task,
            samples: 5000,
            emg_hz: 1000.0,
            game_hz: 60.0,
            planted: PlantedHmm::new(coupling),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedHmmTrial {
    pub task: TaskSpec,
    pub game: GameTrace,
    /// Normalized-envelope-unit observations on the EMG timeline.
    pub envelope: EmgRecord,
    pub states: Vec<u8>,
    pub subtasks: SubtaskSequence,
}

/// Envelope-level trial for a single-axis task with planted hidden states.
pub fn gen_hmm_trial(spec: &HmmTrialSpec) -> Result<PlantedHmmTrial> {
    let task = spec.task.spec();
    if !task.id.is_single_axis() {
        return Err(Error::NotSingleAxis(task.id));
    }
    if spec.samples < 4 {
        return Err(Error::InvalidParameter("planted HMM trials need at least 4 samples".into()));
    }
    let duration = (spec.samples - 1) as f64 / spec.emg_hz;
    let tl = timeline(spec.emg_hz, spec.game_hz, 0.0, duration, 0.0)?;
    let emg_ts: Vec<f64> = (0..spec.samples).map(|j| j as f64 / spec.emg_hz).collect();
    let target: Vec<[f64; 2]> = tl.tau.iter().map(|&t| target_position(&task, t, duration)).collect();
    let xs: Vec<f64> = target.iter().map(|p| p[0]).collect();
    let ys: Vec<f64> = target.iter().map(|p| p[1]).collect();
    let game = GameTrace::from_channels(tl.game.clone(), vec![xs.clone(), ys.clone(), xs, ys])?;
    let mut rng = rng_for(spec.seed);
    let (env, states) = envelopes(&EmgSource::Hmm(spec.planted.clone()), &task, &game, &emg_ts, &mut rng)?;
    let subtasks = derive_subtasks(&task, &game, SubtaskThreshold::default())?;
    Ok(PlantedHmmTrial {
        task,
        game,
        envelope: EmgRecord::from_channels(emg_ts, env)?,
        states: states.expect("state-driven source"),
        subtasks,
    })
}

/// Muscle partition into `rank` disjoint groups with weights in [0.5, 1].
pub fn disjoint_synergies(rank: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((EMG_LABELS.len(), rank), |(m, j)| {
        let w = rng.gen_range(0.5..1.0);
        if m % rank == j {
            w
        } else {
            0.0
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedSynergies {
    pub e: EmgMatrix,
    pub w0: Array2<f64>,
    pub h0: Array2<f64>,
}

/// E = (W0 H0 + N) / max with disjoint-support W0, sparse independent
/// activations and half-normal noise at the requested SNR.
pub fn gen_synergy_matrix(rank: usize, samples: usize, snr_db: f64, seed: u64) -> Result<PlantedSynergies> {
    if rank == 0 || rank > EMG_LABELS.len() || samples == 0 {
        return Err(Error::InvalidParameter(format!(
            "planted rank must be in 1..=8 with samples > 0, got rank {rank}"
        )));
    }
    let mut rng = rng_for(seed);
    let w0 = disjoint_synergies(rank, &mut rng);
    let h0 = Array2::from_shape_fn((rank, samples), |_| {
        if rng.gen::<f64>() < 0.5 {
            rng.gen_range(0.2..1.0)
        } else {
            0.0
        }
    });
    let clean = w0.dot(&h0);
    let power: f64 = clean.iter().map(|v| v * v).sum::<f64>() / clean.len() as f64;
    let sd = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    let noise = Normal::new(0.0, sd).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let noisy = clean.mapv(|v| v + noise.sample(&mut rng).abs());
    let max = noisy.iter().cloned().fold(0.0, f64::max);
    let e = EmgMatrix::new(noisy.mapv(|v| v / max))?;
    Ok(PlantedSynergies { e, w0, h0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// One participant, one x-axis trial.
    Minimal,
    /// Small two-cohort dataset over both poses and all tasks.
    Cohort,
    /// 13 healthy and 2 post-stroke participants whose force metrics are
    /// completely separated.
    Separation,
    /// Single-axis trials whose EMG states follow the subtasks.
    HmmAligned,
    /// Single-axis trials whose EMG states ignore the subtasks.
    HmmIndependent,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::Minimal,
        Scenario::Cohort,
        Scenario::Separation,
        Scenario::HmmAligned,
        Scenario::HmmIndependent,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Minimal => "minimal",
            Scenario::Cohort => "cohort",
            Scenario::Separation => "separation",
            Scenario::HmmAligned => "hmm-aligned",
            Scenario::HmmIndependent => "hmm-independent",
        }
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown scenario `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortProfile {
    /// Tracking deviation range in game units.
    pub deviation: (f64, f64),
    /// Non-productive force amplitude range in newtons.
    pub nonproductive: (f64, f64),
    pub coupling: Coupling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub scenario: Scenario,
    pub seed: u64,
    pub healthy: usize,
    pub post_stroke: usize,
    pub conditions: Vec<PoseCondition>,
    pub tasks: Vec<TaskId>,
    pub duration_s: f64,
    pub rates: SampleRates,
    pub scaling_factor: f64,
    pub noise_sd: f64,
    /// Offsets are drawn uniformly from ±this range per participant and pose.
    pub offset_range: f64,
    pub healthy_profile: CohortProfile,
    pub post_stroke_profile: CohortProfile,
    /// State-driven EMG instead of synergy-driven EMG.
    pub hmm_emg: Option<Coupling>,
}

impl SynthSpec {
    pub fn scenario(scenario: Scenario, seed: u64) -> Self {
        let mut s = SynthSpec {
            scenario,
            seed,
            healthy: 4,
            post_stroke: 2,
            conditions: vec![PoseCondition::A, PoseCondition::B],
            tasks: TaskId::ALL.to_vec(),
            duration_s: 12.0,
            rates: SampleRates::default(),
            scaling_factor: 2.0,
            noise_sd: 0.2,
            offset_range: 3.0,
            healthy_profile: CohortProfile {
                deviation: (0.5, 1.5),
                nonproductive: (0.2, 0.6),
                coupling: Coupling::Aligned,
            },
            post_stroke_profile: CohortProfile {
                deviation: (4.0, 6.0),
                nonproductive: (1.5, 2.5),
                coupling: Coupling::Independent,
            },
            hmm_emg: None,
        };
        match scenario {
            Scenario::Minimal => {
                s.healthy = 1;
                s.post_stroke = 0;
                s.conditions = vec![PoseCondition::A];
                s.tasks = vec![TaskId::XAxis];
                s.duration_s = 4.0;
            }
            Scenario::Cohort => {}
            Scenario::Separation => {
                s.healthy = 13;
                s.post_stroke = 2;
                s.conditions = vec![PoseCondition::A];
                s.duration_s = 4.0;
            }
            Scenario::HmmAligned | Scenario::HmmIndependent => {
                s.healthy = 1;
                s.post_stroke = 0;
                s.conditions = vec![PoseCondition::A];
                s.tasks = vec![TaskId::XAxis, TaskId::YAxis, TaskId::ZAxis, TaskId::Torque];
                s.duration_s = 5.0;
                s.hmm_emg = Some(if scenario == Scenario::HmmAligned {
                    Coupling::Aligned
                } else {
                    Coupling::Independent
                });
            }
        }
        s
    }

    pub fn participants(&self) -> Vec<ParticipantInfo> {
        let healthy = (0..self.healthy).map(|i| ParticipantInfo::new(format!("{:02}", i + 2), Cohort::Healthy));
        let stroke = (0..self.post_stroke).map(|i| ParticipantInfo::new(format!("{:02}", i + 21), Cohort::PostStroke));
        healthy.chain(stroke).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantTruth {
    pub id: String,
    pub cohort: Cohort,
    pub tracking_deviation: f64,
    pub nonproductive: f64,
    pub synergy_rank: usize,
    pub w0: Array2<f64>,
    pub offsets: Vec<(PoseCondition, [f64; 3])>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: SynthSpec,
    pub participants: Vec<ParticipantTruth>,
}

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes a canonical dataset (manifest, per-trial CSVs and a ground-truth
/// sidecar) under `dir`.
pub fn gen_cohort(spec: &SynthSpec, dir: &Path) -> Result<(DatasetManifest, GroundTruth)> {
    if spec.healthy + spec.post_stroke == 0 || spec.conditions.is_empty() || spec.tasks.is_empty() {
        return Err(Error::InvalidParameter("a cohort needs participants, conditions and tasks".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let trial_dir = dir.join("trials");
    let participants = spec.participants();
    let mut truths = Vec::new();
    let mut entries = Vec::new();
    for p in &participants {
        let mut rng = rng_for(derive_seed(spec.seed, &["synth", "participant", &p.id]));
        let profile = match p.cohort {
            Cohort::Healthy => &spec.healthy_profile,
            Cohort::PostStroke => &spec.post_stroke_profile,
        };
        let deviation = rng.gen_range(profile.deviation.0..=profile.deviation.1);
        let nonproductive = rng.gen_range(profile.nonproductive.0..=profile.nonproductive.1);
        let rank = rng.gen_range(3..=5);
        let w0 = disjoint_synergies(rank, &mut rng);
        let mut offsets = Vec::new();
        for &condition in &spec.conditions {
            let r = spec.offset_range;
            let b = [rng.gen_range(-r..=r), rng.gen_range(-r..=r), rng.gen_range(-r..=r)];
            offsets.push((condition, b));
            for &task in &spec.tasks {
                let key = format!("{}_{}_{}", p.id, condition, task);
                let emg = match spec.hmm_emg {
                    Some(c) if task.is_single_axis() => EmgSource::Hmm(PlantedHmm::new(c)),
                    Some(_) => EmgSource::Quiet,
                    None => EmgSource::Synergy(SynergyPlan {
                        w0: w0.clone(),
                        coupling: profile.coupling,
                        stickiness: 0.999,
                        noise_sd: 0.02,
                    }),
                };
                let trial_spec = ForceTrialSpec {
                    participant: p.clone(),
                    condition,
                    task,
                    duration_s: spec.duration_s,
                    rates: spec.rates,
                    scaling_factor: spec.scaling_factor,
                    offsets: b,
                    noise_sd: spec.noise_sd,
                    tracking_deviation: deviation,
                    nonproductive,
                    emg,
                    seed: derive_seed(spec.seed, &["synth", "trial", &key]),
                    ..ForceTrialSpec::new(task, 0)
                };
                let (trial, _) = gen_force_trial(&trial_spec)?;
                entries.push(write_trial(&trial_dir, dir, &trial)?);
            }
        }
        truths.push(ParticipantTruth {
            id: p.id.clone(),
            cohort: p.cohort,
            tracking_deviation: deviation,
            nonproductive,
            synergy_rank: rank,
            w0,
            offsets,
        });
    }
    let manifest = DatasetManifest {
        name: format!("synthetic-{}", spec.scenario.as_str()),
        version: format!("seed-{}", spec.seed),
        scaling_factor: spec.scaling_factor,
        sample_rates: spec.rates,
        participants,
        trials: entries,
        root: dir.to_path_buf(),
    };
    manifest.write(&dir.join(MANIFEST_FILE))?;
    let truth = GroundTruth {
        spec: spec.clone(),
        participants: truths,
    };
    let path = dir.join(GROUND_TRUTH_FILE);
    fs::write(&path, serde_json::to_string_pretty(&truth)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok((manifest, truth))
}
