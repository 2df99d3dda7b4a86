//! Game/sensor timeline alignment, target and avatar velocities, constant
//! force-offset estimation, ideal-force reconstruction and prescribed
//! subtask labels.
//!
//! The game maps baseline-free force to avatar velocity through a constant
//! scaling factor `k`: `v = k (F_measured - b)`. Offsets `b` are the
//! least-squares constants `b = mean(F - v / k)` pooled over every aligned
//! sample of every task in which the axis is productive.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    GameAxis, GameTrace, SampledSeries, SubtaskSequence, TaskSpec, Trial, WrenchChannel,
};

pub const DEFAULT_ALIGN_THRESHOLD_S: f64 = 0.001;
pub const DEFAULT_EPSILON_FRACTION: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignedPair {
    pub game_index: usize,
    pub sensor_index: usize,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentMap {
    pub threshold: f64,
    pub pairs: Vec<AlignedPair>,
    /// Game samples whose nearest sensor sample is farther than `threshold`.
    pub unmatched: Vec<usize>,
}

impl AlignmentMap {
    pub fn game_len(&self) -> usize {
        self.pairs.len() + self.unmatched.len()
    }

    pub fn coverage(&self) -> f64 {
        match self.game_len() {
            0 => 0.0,
            n => self.pairs.len() as f64 / n as f64,
        }
    }

    pub fn max_gap(&self) -> f64 {
        self.pairs.iter().map(|p| p.gap).fold(0.0, f64::max)
    }
}

/// Matches every query (game) timestamp to its nearest reference (sensor)
/// timestamp; pairs farther apart than `threshold` seconds are excluded.
pub fn align_nearest(game: &[f64], sensor: &[f64], threshold: f64) -> Result<AlignmentMap> {
    if game.is_empty() || sensor.is_empty() {
        return Err(Error::InsufficientData("alignment needs non-empty series".into()));
    }
    let mut pairs = Vec::with_capacity(game.len());
    let mut unmatched = Vec::new();
    let mut j = 0;
    for (i, &t) in game.iter().enumerate() {
        while j + 1 < sensor.len() && (sensor[j + 1] - t).abs() < (sensor[j] - t).abs() {
            j += 1;
        }
        let gap = (sensor[j] - t).abs();
        if gap <= threshold {
            pairs.push(AlignedPair {
                game_index: i,
                sensor_index: j,
                gap,
            });
        } else {
            unmatched.push(i);
        }
    }
    if pairs.is_empty() {
        return Err(Error::NoAlignment { threshold });
    }
    Ok(AlignmentMap {
        threshold,
        pairs,
        unmatched,
    })
}

/// Central differences inside, one-sided differences at both ends.
pub fn central_difference(t: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    let n = t.len();
    if n < 3 {
        return Err(Error::InsufficientData(format!(
            "differentiation needs at least 3 samples, got {n}"
        )));
    }
    let mut v = Vec::with_capacity(n);
    v.push((x[1] - x[0]) / (t[1] - t[0]));
    for i in 1..n - 1 {
        v.push((x[i + 1] - x[i - 1]) / (t[i + 1] - t[i - 1]));
    }
    v.push((x[n - 1] - x[n - 2]) / (t[n - 1] - t[n - 2]));
    Ok(v)
}

fn velocity(game: &GameTrace, offset: usize, prefix: &str) -> Result<SampledSeries> {
    let t = game.timestamps();
    let vx = central_difference(t, game.channel(offset))?;
    let vy = central_difference(t, game.channel(offset + 1))?;
    SampledSeries::new(
        t.to_vec(),
        vec![format!("{prefix}_vx"), format!("{prefix}_vy")],
        vec![vx, vy],
    )
}

/// Target velocity per game axis (channel 0 = x, 1 = y), game units/s.
pub fn target_velocity(game: &GameTrace) -> Result<SampledSeries> {
    velocity(game, 0, "target")
}

pub fn avatar_velocity(game: &GameTrace) -> Result<SampledSeries> {
    velocity(game, 2, "avatar")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetEstimate {
    /// Constant offsets for Fx, Fy, Fz in newtons.
    pub offsets: [f64; 3],
    pub residual_rms: [f64; 3],
    pub samples: [usize; 3],
}

/// Pools offset evidence over one participant × condition. An axis that is
/// never productive keeps a zero offset and reports zero samples.
pub fn estimate_offsets<'a>(
    trials: impl IntoIterator<Item = &'a Trial>,
    scaling_factor: f64,
    threshold: f64,
) -> Result<OffsetEstimate> {
    if !(scaling_factor > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "scaling factor must be positive, got {scaling_factor}"
        )));
    }
    let mut evidence: [Vec<f64>; 3] = Default::default();
    for trial in trials {
        if !trial.task.id.is_force_task() {
            continue;
        }
        let alignment = align_nearest(trial.game.timestamps(), trial.wrench.timestamps(), threshold)?;
        let avatar_v = avatar_velocity(&trial.game)?;
        for &(channel, axis) in &trial.task.mapping {
            if !channel.is_force() {
                continue;
            }
            let force = trial.wrench.axis(channel);
            let v = avatar_v.channel(axis.target_channel());
            evidence[channel.index()].extend(
                alignment
                    .pairs
                    .iter()
                    .map(|p| force[p.sensor_index] - v[p.game_index] / scaling_factor),
            );
        }
    }
    let mut out = OffsetEstimate {
        offsets: [0.0; 3],
        residual_rms: [0.0; 3],
        samples: [0; 3],
    };
    if evidence.iter().all(Vec::is_empty) {
        return Err(Error::InsufficientData("no force-task samples to estimate offsets from".into()));
    }
    for (a, ev) in evidence.iter().enumerate() {
        if ev.is_empty() {
            continue;
        }
        let n = ev.len() as f64;
        let mean = ev.iter().sum::<f64>() / n;
        out.offsets[a] = mean;
        out.residual_rms[a] = (ev.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        out.samples[a] = ev.len();
    }
    Ok(out)
}

/// Force that would keep the avatar on the target, per productive axis, in the
/// raw sensor frame (offsets included).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdealForceSeries {
    pub timestamps: Vec<f64>,
    pub axes: Vec<WrenchChannel>,
    pub values: Vec<Vec<f64>>,
    pub offsets: [f64; 3],
}

impl IdealForceSeries {
    /// Ideal force on axis `i` with its offset removed.
    pub fn corrected(&self, i: usize) -> impl Iterator<Item = f64> + '_ {
        let b = self.offsets[self.axes[i].index()];
        self.values[i].iter().map(move |v| v - b)
    }
}

pub fn ideal_force(
    task: &TaskSpec,
    game: &GameTrace,
    scaling_factor: f64,
    offsets: &OffsetEstimate,
) -> Result<IdealForceSeries> {
    if !task.id.is_force_task() {
        return Err(Error::ExcludedTask(task.id));
    }
    let tv = target_velocity(game)?;
    let mut axes = Vec::new();
    let mut values = Vec::new();
    for &(channel, axis) in &task.mapping {
        let b = offsets.offsets[channel.index()];
        axes.push(channel);
        values.push(
            tv.channel(axis.target_channel())
                .iter()
                .map(|v| v / scaling_factor + b)
                .collect(),
        );
    }
    Ok(IdealForceSeries {
        timestamps: game.timestamps().to_vec(),
        axes,
        values,
        offsets: offsets.offsets,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubtaskThreshold {
    /// Game units per second.
    Absolute(f64),
    /// Fraction of the trace's peak absolute target velocity.
    PeakFraction(f64),
}

impl Default for SubtaskThreshold {
    fn default() -> Self {
        SubtaskThreshold::PeakFraction(DEFAULT_EPSILON_FRACTION)
    }
}

/// Direction labels along the task's output axis: 1 while the target moves in
/// the positive direction, 0 in the negative direction, previous label held
/// while |v| <= epsilon.
pub fn derive_subtasks(
    task: &TaskSpec,
    game: &GameTrace,
    threshold: SubtaskThreshold,
) -> Result<SubtaskSequence> {
    if !task.id.is_single_axis() {
        return Err(Error::NotSingleAxis(task.id));
    }
    let axis: GameAxis = task.output_axes()[0];
    let v = central_difference(game.timestamps(), game.target(axis))?;
    let epsilon = match threshold {
        SubtaskThreshold::Absolute(e) => e,
        SubtaskThreshold::PeakFraction(f) => f * v.iter().fold(0.0_f64, |m, x| m.max(x.abs())),
    };
    let mut labels: Vec<Option<u8>> = Vec::with_capacity(v.len());
    let mut current = None;
    for &vi in &v {
        if vi > epsilon {
            current = Some(1);
        } else if vi < -epsilon {
            current = Some(0);
        }
        labels.push(current);
    }
    let first = labels.iter().flatten().next().copied().ok_or_else(|| {
        Error::Degenerate(format!(
            "target velocity never exceeds ±{epsilon} on the {axis:?} axis"
        ))
    })?;
    let labels = labels.into_iter().map(|l| l.unwrap_or(first)).collect();
    SubtaskSequence::new(game.timestamps().to_vec(), labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TaskId;
    use std::f64::consts::PI;

    fn game(ts: &[f64], tx: impl Fn(f64) -> f64, ax: impl Fn(f64) -> f64) -> GameTrace {
        GameTrace::from_channels(
            ts.to_vec(),
            vec![
                ts.iter().map(|&t| tx(t)).collect(),
                vec![0.0; ts.len()],
                ts.iter().map(|&t| ax(t)).collect(),
                vec![0.0; ts.len()],
            ],
        )
        .unwrap()
    }

    #[test]
    fn identical_grids_align_exactly() {
        let ts: Vec<f64> = (0..100).map(|i| i as f64 * 0.01).collect();
        let m = align_nearest(&ts, &ts, 0.001).unwrap();
        assert!(m.unmatched.is_empty());
        assert!(m.pairs.iter().all(|p| p.game_index == p.sensor_index && p.gap == 0.0));
    }

    #[test]
    fn sixty_hz_on_kilohertz_grid_gap_is_half_period() {
        let game: Vec<f64> = (0..600).map(|i| i as f64 / 60.0).collect();
        let sensor: Vec<f64> = (0..10_001).map(|i| i as f64 / 1000.0).collect();
        let m = align_nearest(&game, &sensor, 0.001).unwrap();
        assert_eq!(m.pairs.len(), 600);
        assert!(m.max_gap() <= 0.0005 + 1e-12);
        for p in &m.pairs {
            assert_eq!(p.gap, (game[p.game_index] - sensor[p.sensor_index]).abs());
            // brute-force nearest
            let best = sensor
                .iter()
                .map(|s| (s - game[p.game_index]).abs())
                .fold(f64::INFINITY, f64::min);
            assert_eq!(p.gap, best);
        }
    }

    #[test]
    fn sparse_offset_sensor_has_no_matches() {
        let game: Vec<f64> = (0..50).map(|i| i as f64 / 60.0).collect();
        let sensor: Vec<f64> = (0..10).map(|i| 0.005 + i as f64 / 10.0).collect();
        // every game sample is at least 1 ms from every sensor sample
        assert!(game
            .iter()
            .all(|g| sensor.iter().all(|s| (g - s).abs() > 0.001)));
        assert!(matches!(
            align_nearest(&game, &sensor, 0.001),
            Err(Error::NoAlignment { .. })
        ));
    }

    #[test]
    fn ramp_and_constant_velocities() {
        let ts: Vec<f64> = (0..50).map(|i| i as f64 * 0.02).collect();
        let g = game(&ts, |t| 2.0 * t, |_| 0.0);
        let v = target_velocity(&g).unwrap();
        assert!(v.channel(0).iter().all(|x| (x - 2.0).abs() < 1e-12));
        assert!(v.channel(1).iter().all(|&x| x == 0.0));
        let short = game(&ts[..2], |t| t, |t| t);
        assert!(target_velocity(&short).is_err());
    }

    #[test]
    fn sine_velocity_truncation_bound() {
        let ts: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        let g = game(&ts, |t| (2.0 * PI * t).sin(), |_| 0.0);
        let v = target_velocity(&g).unwrap();
        // interior points only: the one-sided end differences are first order
        let err = ts[1..100]
            .iter()
            .zip(&v.channel(0)[1..100])
            .map(|(t, vi)| (vi - 2.0 * PI * (2.0 * PI * t).cos()).abs())
            .fold(0.0, f64::max);
        // (2π)^3 h^2 / 6 with h = 0.01
        assert!(err < (2.0 * PI).powi(3) * 1e-4 / 6.0 + 1e-9, "{err}");
    }

    #[test]
    fn ideal_force_closed_form() {
        let ts: Vec<f64> = (0..30).map(|i| i as f64 / 60.0).collect();
        let k = 4.0;
        let offsets = OffsetEstimate {
            offsets: [0.5, 0.0, 0.0],
            residual_rms: [0.0; 3],
            samples: [1; 3],
        };
        let g = game(&ts, |t| 3.0 * t, |_| 0.0);
        let ideal = ideal_force(&TaskId::XAxis.spec(), &g, k, &offsets).unwrap();
        assert!(ideal.values[0].iter().all(|f| (f - (3.0 / k + 0.5)).abs() < 1e-12));
        assert!(ideal.corrected(0).all(|f| (f - 0.75).abs() < 1e-12));

        let still = game(&ts, |_| 1.0, |_| 0.0);
        let zero = OffsetEstimate {
            offsets: [0.0; 3],
            ..offsets.clone()
        };
        let ideal = ideal_force(&TaskId::CircleCw.spec(), &still, k, &zero).unwrap();
        assert_eq!(ideal.axes, vec![WrenchChannel::Fx, WrenchChannel::Fy]);
        assert!(ideal.values.iter().flatten().all(|&f| f == 0.0));

        assert!(matches!(
            ideal_force(&TaskId::Torque.spec(), &still, k, &zero),
            Err(Error::ExcludedTask(TaskId::Torque))
        ));
    }

    #[test]
    fn z_axis_ideal_force_uses_target_y() {
        let ts: Vec<f64> = (0..30).map(|i| i as f64 / 60.0).collect();
        let g = GameTrace::from_channels(
            ts.clone(),
            vec![vec![0.0; 30], ts.iter().map(|t| -2.0 * t).collect(), vec![0.0; 30], vec![0.0; 30]],
        )
        .unwrap();
        let offsets = OffsetEstimate {
            offsets: [0.0, 0.0, 1.0],
            residual_rms: [0.0; 3],
            samples: [1; 3],
        };
        let ideal = ideal_force(&TaskId::ZAxis.spec(), &g, 2.0, &offsets).unwrap();
        assert_eq!(ideal.axes, vec![WrenchChannel::Fz]);
        assert!(ideal.values[0].iter().all(|f| (f - 0.0).abs() < 1e-12));
    }

    fn triangle(t: f64, period: f64) -> f64 {
        let p = (t / period).fract();
        if p < 0.5 {
            4.0 * p - 1.0
        } else {
            3.0 - 4.0 * p
        }
    }

    #[test]
    fn triangle_target_gives_square_labels() {
        let ts: Vec<f64> = (0..400).map(|i| i as f64 / 100.0).collect();
        let g = game(&ts, |t| triangle(t, 1.0), |_| 0.0);
        let seq = derive_subtasks(&TaskId::XAxis.spec(), &g, SubtaskThreshold::default()).unwrap();
        for (i, &t) in ts.iter().enumerate() {
            let phase = (t / 1.0).fract();
            // skip the samples whose central difference straddles a corner
            if (phase - 0.5).abs() < 0.011 || phase < 0.011 || phase > 0.989 {
                continue;
            }
            let expected = u8::from(phase < 0.5);
            assert_eq!(seq.labels[i], expected, "t={t}");
        }
        let transitions = seq.labels.windows(2).filter(|w| w[0] != w[1]).count();
        assert_eq!(transitions, 7);
    }

    #[test]
    fn ramp_gives_constant_labels_and_still_target_errors() {
        let ts: Vec<f64> = (0..100).map(|i| i as f64 / 60.0).collect();
        let g = game(&ts, |t| -t, |_| 0.0);
        let seq = derive_subtasks(&TaskId::XAxis.spec(), &g, SubtaskThreshold::default()).unwrap();
        assert!(seq.labels.iter().all(|&l| l == 0));

        let still = game(&ts, |_| 0.3, |_| 0.0);
        assert!(derive_subtasks(&TaskId::XAxis.spec(), &still, SubtaskThreshold::default()).is_err());
        assert!(matches!(
            derive_subtasks(&TaskId::CircleCw.spec(), &g, SubtaskThreshold::default()),
            Err(Error::NotSingleAxis(_))
        ));
    }

    #[test]
    fn sine_labels_switch_near_analytic_zero_crossings() {
        let fs = 100.0;
        let ts: Vec<f64> = (0..400).map(|i| i as f64 / fs).collect();
        let g = game(&ts, |t| (2.0 * PI * t).sin(), |_| 0.0);
        let seq = derive_subtasks(&TaskId::XAxis.spec(), &g, SubtaskThreshold::PeakFraction(0.01)).unwrap();
        // velocity 2π cos(2πt) changes sign at t = 0.25 + m/2
        let crossings: Vec<f64> = (0..8).map(|m| 0.25 + m as f64 * 0.5).collect();
        let switches: Vec<usize> = seq
            .labels
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[0] != w[1])
            .map(|(i, _)| i + 1)
            .collect();
        assert_eq!(switches.len(), crossings.len());
        for (s, c) in switches.iter().zip(&crossings) {
            let analytic = c * fs;
            assert!((*s as f64 - analytic).abs() <= 1.0, "switch {s} vs {analytic}");
        }
    }

    #[test]
    fn subtasks_invariant_to_time_rescaling() {
        let ts: Vec<f64> = (0..300).map(|i| i as f64 / 60.0).collect();
        let g = game(&ts, |t| triangle(t, 1.3) + 0.1 * (5.0 * t).sin(), |_| 0.0);
        let scaled_ts: Vec<f64> = ts.iter().map(|t| t * 2.5).collect();
        let g2 = GameTrace::from_channels(scaled_ts, g.channels().to_vec()).unwrap();
        let task = TaskId::XAxis.spec();
        let a = derive_subtasks(&task, &g, SubtaskThreshold::default()).unwrap();
        let b = derive_subtasks(&task, &g2, SubtaskThreshold::default()).unwrap();
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn never_productive_axis_keeps_zero_offset() {
        use crate::synth::{gen_force_trial, ForceTrialSpec};
        let (x, _) = gen_force_trial(&ForceTrialSpec::new(TaskId::XAxis, 1)).unwrap();
        let est = estimate_offsets([&x], x.scaling_factor, DEFAULT_ALIGN_THRESHOLD_S).unwrap();
        assert!((est.offsets[0] - 1.5).abs() < 0.05, "{:?}", est.offsets);
        assert_eq!(&est.offsets[1..], &[0.0, 0.0]);
        assert_eq!(&est.samples[1..], &[0, 0]);
        assert!(est.samples[0] > 0);

        let (torque, _) = gen_force_trial(&ForceTrialSpec::new(TaskId::Torque, 2)).unwrap();
        assert!(matches!(
            estimate_offsets([&torque], 2.0, DEFAULT_ALIGN_THRESHOLD_S),
            Err(Error::InsufficientData(_))
        ));
    }
}
