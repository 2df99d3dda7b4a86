//! Force metrics on productive and non-productive axes, and per-participant
//! aggregation over the seven force tasks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gamesync::{AlignmentMap, IdealForceSeries};
use crate::model::{
    nonproductive_forces, productive_channels, Cohort, ParticipantInfo, PoseCondition, TaskId,
    TaskSpec, TrialKey, WrenchChannel, WrenchRecord,
};

/// Productive force of one trial: the single axis (signed) or the pointwise
/// L2 norm over several axes. Per-axis components are kept for RMSE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductiveSeries {
    pub timestamps: Vec<f64>,
    pub axes: Vec<WrenchChannel>,
    pub components: Vec<Vec<f64>>,
    pub values: Vec<f64>,
}

pub fn productive_series(task: &TaskSpec, corrected: &WrenchRecord) -> Result<ProductiveSeries> {
    if !task.id.is_force_task() {
        return Err(Error::ExcludedTask(task.id));
    }
    let axes = productive_channels(task);
    let components: Vec<Vec<f64>> = axes.iter().map(|&a| corrected.axis(a).to_vec()).collect();
    let values = if components.len() == 1 {
        components[0].clone()
    } else {
        (0..corrected.len())
            .map(|i| components.iter().map(|c| c[i] * c[i]).sum::<f64>().sqrt())
            .collect()
    };
    Ok(ProductiveSeries {
        timestamps: corrected.timestamps().to_vec(),
        axes,
        components,
        values,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RmseMode {
    /// Residuals per axis, stacked.
    #[default]
    Stacked,
    /// Difference of the measured and ideal force norms.
    NormDiff,
}

/// RMSE between measured (offset-corrected) and ideal force over aligned
/// game/sensor pairs.
pub fn force_rmse(
    measured: &ProductiveSeries,
    ideal: &IdealForceSeries,
    alignment: &AlignmentMap,
    mode: RmseMode,
) -> Result<f64> {
    if alignment.pairs.is_empty() {
        return Err(Error::NoAlignment {
            threshold: alignment.threshold,
        });
    }
    if measured.axes != ideal.axes {
        return Err(Error::InvalidParameter(format!(
            "measured axes {:?} differ from ideal axes {:?}",
            measured.axes, ideal.axes
        )));
    }
    let ideal_corrected: Vec<Vec<f64>> = (0..ideal.axes.len()).map(|i| ideal.corrected(i).collect()).collect();
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in &alignment.pairs {
        match mode {
            RmseMode::Stacked => {
                for (m, id) in measured.components.iter().zip(&ideal_corrected) {
                    let r = m[p.sensor_index] - id[p.game_index];
                    sum += r * r;
                    count += 1;
                }
            }
            RmseMode::NormDiff => {
                let (m, id) = if measured.axes.len() == 1 {
                    (measured.values[p.sensor_index], ideal_corrected[0][p.game_index])
                } else {
                    let id = ideal_corrected.iter().map(|c| c[p.game_index].powi(2)).sum::<f64>().sqrt();
                    (measured.values[p.sensor_index], id)
                };
                sum += (m - id).powi(2);
                count += 1;
            }
        }
    }
    Ok((sum / count as f64).sqrt())
}

/// Trapezoidal integral of |F| over time.
pub fn impulse(timestamps: &[f64], values: &[f64]) -> Result<f64> {
    if values.len() < 2 || timestamps.len() != values.len() {
        return Err(Error::InsufficientData(format!(
            "impulse needs at least 2 samples, got {}",
            values.len()
        )));
    }
    Ok(timestamps
        .windows(2)
        .zip(values.windows(2))
        .map(|(t, f)| 0.5 * (f[0].abs() + f[1].abs()) * (t[1] - t[0]))
        .sum())
}

pub fn rms_average(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InsufficientData("RMS of an empty series".into()));
    }
    Ok((values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt())
}

pub fn peak(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InsufficientData("peak of an empty series".into()));
    }
    Ok(values.iter().fold(0.0, |m, v| m.max(v.abs())))
}

fn variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisProfile {
    pub axis: WrenchChannel,
    pub rms_average: f64,
    pub peak: f64,
    pub impulse: f64,
    /// Variance of the signed, offset-corrected series.
    pub variance: f64,
    /// Variance of the rectified series (for plotting).
    pub rectified_variance: f64,
}

pub fn nonproductive_profile(task: &TaskSpec, corrected: &WrenchRecord) -> Result<Vec<AxisProfile>> {
    if !task.id.is_force_task() {
        return Err(Error::ExcludedTask(task.id));
    }
    nonproductive_forces(task)
        .into_iter()
        .map(|axis| {
            let x = corrected.axis(axis);
            let rect: Vec<f64> = x.iter().map(|v| v.abs()).collect();
            Ok(AxisProfile {
                axis,
                rms_average: rms_average(x)?,
                peak: peak(x)?,
                impulse: impulse(corrected.timestamps(), x)?,
                variance: variance(x),
                rectified_variance: variance(&rect),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForceMetric {
    Rmse,
    Impulse,
    RmsAverage,
    Peak,
}

impl ForceMetric {
    pub const ALL: [ForceMetric; 4] = [
        ForceMetric::Rmse,
        ForceMetric::Impulse,
        ForceMetric::RmsAverage,
        ForceMetric::Peak,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ForceMetric::Rmse => "rmse",
            ForceMetric::Impulse => "impulse",
            ForceMetric::RmsAverage => "rms_average",
            ForceMetric::Peak => "peak",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceMetricsReport {
    pub key: TrialKey,
    pub cohort: Cohort,
    pub rmse: f64,
    pub impulse: f64,
    pub rms_average: f64,
    pub peak: f64,
    pub nonproductive: Vec<AxisProfile>,
}

impl ForceMetricsReport {
    pub fn metric(&self, m: ForceMetric) -> f64 {
        match m {
            ForceMetric::Rmse => self.rmse,
            ForceMetric::Impulse => self.impulse,
            ForceMetric::RmsAverage => self.rms_average,
            ForceMetric::Peak => self.peak,
        }
    }
}

/// All force metrics for one trial whose wrench is already trimmed and
/// offset-corrected.
pub fn trial_metrics(
    key: TrialKey,
    cohort: Cohort,
    task: &TaskSpec,
    corrected: &WrenchRecord,
    ideal: &IdealForceSeries,
    alignment: &AlignmentMap,
    mode: RmseMode,
) -> Result<ForceMetricsReport> {
    let series = productive_series(task, corrected)?;
    Ok(ForceMetricsReport {
        key,
        cohort,
        rmse: force_rmse(&series, ideal, alignment, mode)?,
        impulse: impulse(&series.timestamps, &series.values)?,
        rms_average: rms_average(&series.values)?,
        peak: peak(&series.values)?,
        nonproductive: nonproductive_profile(task, corrected)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Sample standard deviation (n - 1).
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> MeanSd {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanSd { mean, sd }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantAggregate {
    pub participant: String,
    pub cohort: Cohort,
    pub condition: PoseCondition,
    pub summary: BTreeMap<ForceMetric, MeanSd>,
    /// Per-task values in task-table order.
    pub task_values: BTreeMap<ForceMetric, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortAggregate {
    pub participants: Vec<ParticipantAggregate>,
}

impl CohortAggregate {
    pub fn conditions(&self) -> Vec<PoseCondition> {
        let mut c: Vec<PoseCondition> = self.participants.iter().map(|p| p.condition).collect();
        c.sort();
        c.dedup();
        c
    }

    /// Per-participant means of `metric` for one cohort and condition.
    pub fn means(&self, metric: ForceMetric, cohort: Cohort, condition: PoseCondition) -> Vec<f64> {
        self.participants
            .iter()
            .filter(|p| p.cohort == cohort && p.condition == condition)
            .filter_map(|p| p.summary.get(&metric).map(|s| s.mean))
            .collect()
    }
}

pub fn aggregate_cohorts(
    reports: &[ForceMetricsReport],
    participants: &[ParticipantInfo],
) -> Result<CohortAggregate> {
    let force_tasks: Vec<TaskId> = TaskId::ALL.into_iter().filter(|t| t.is_force_task()).collect();
    let mut groups: BTreeMap<(String, PoseCondition), BTreeMap<TaskId, &ForceMetricsReport>> =
        BTreeMap::new();
    for r in reports {
        groups
            .entry((r.key.participant.clone(), r.key.condition))
            .or_default()
            .insert(r.key.task, r);
    }
    let mut out = Vec::with_capacity(groups.len());
    for ((pid, condition), by_task) in groups {
        let info = participants
            .iter()
            .find(|p| p.id == pid)
            .ok_or_else(|| Error::Missing {
                what: "participant record".into(),
                key: pid.clone(),
            })?;
        if let Some(missing) = force_tasks.iter().find(|t| !by_task.contains_key(t)) {
            return Err(Error::Missing {
                what: format!("{missing} metrics report"),
                key: format!("{pid}_{condition}"),
            });
        }
        let mut summary = BTreeMap::new();
        let mut task_values = BTreeMap::new();
        for metric in ForceMetric::ALL {
            let values: Vec<f64> = force_tasks.iter().map(|t| by_task[t].metric(metric)).collect();
            summary.insert(metric, MeanSd::of(&values));
            task_values.insert(metric, values);
        }
        out.push(ParticipantAggregate {
            participant: pid,
            cohort: info.cohort,
            condition,
            summary,
            task_values,
        });
    }
    Ok(CohortAggregate { participants: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gamesync::AlignedPair;
    use std::f64::consts::PI;

    fn wrench(ts: &[f64], f: impl Fn(usize, f64) -> f64) -> WrenchRecord {
        WrenchRecord::from_channels(
            ts.to_vec(),
            (0..6).map(|c| ts.iter().map(|&t| f(c, t)).collect()).collect(),
        )
        .unwrap()
    }

    fn grid(n: usize, dt: f64) -> Vec<f64> {
        (0..n).map(|i| i as f64 * dt).collect()
    }

    fn identity_alignment(n: usize) -> AlignmentMap {
        AlignmentMap {
            threshold: 0.001,
            pairs: (0..n)
                .map(|i| AlignedPair {
                    game_index: i,
                    sensor_index: i,
                    gap: 0.0,
                })
                .collect(),
            unmatched: vec![],
        }
    }

    #[test]
    fn productive_series_cases() {
        let ts = grid(10, 0.001);
        let w = wrench(&ts, |c, t| match c {
            0 => 3.0 + t,
            1 => 4.0,
            _ => 0.0,
        });
        let x = productive_series(&TaskId::XAxis.spec(), &w).unwrap();
        assert_eq!(x.values, w.channel(0));

        let w = wrench(&ts, |c, _| [3.0, 4.0, 9.0, 0.0, 0.0, 0.0][c]);
        let cw = productive_series(&TaskId::CircleCw.spec(), &w).unwrap();
        assert!(cw.values.iter().all(|&v| v == 5.0));

        assert!(matches!(
            productive_series(&TaskId::Torque.spec(), &w),
            Err(Error::ExcludedTask(TaskId::Torque))
        ));
    }

    fn ideal_from(axes: Vec<WrenchChannel>, values: Vec<Vec<f64>>, ts: &[f64]) -> IdealForceSeries {
        IdealForceSeries {
            timestamps: ts.to_vec(),
            axes,
            values,
            offsets: [0.0; 3],
        }
    }

    #[test]
    fn rmse_identity_and_constant_residual() {
        let ts = grid(100, 0.01);
        let w = wrench(&ts, |c, t| if c == 0 { (3.0 * t).sin() } else { 0.0 });
        let m = productive_series(&TaskId::XAxis.spec(), &w).unwrap();
        let ideal = ideal_from(vec![WrenchChannel::Fx], vec![w.channel(0).to_vec()], &ts);
        let align = identity_alignment(100);
        assert_eq!(force_rmse(&m, &ideal, &align, RmseMode::Stacked).unwrap(), 0.0);

        let shifted = ideal_from(
            vec![WrenchChannel::Fx],
            vec![w.channel(0).iter().map(|v| v - 2.0).collect()],
            &ts,
        );
        let r = force_rmse(&m, &shifted, &align, RmseMode::Stacked).unwrap();
        assert!((r - 2.0).abs() < 1e-12);

        let empty = AlignmentMap {
            threshold: 0.001,
            pairs: vec![],
            unmatched: vec![0],
        };
        assert!(force_rmse(&m, &ideal, &empty, RmseMode::Stacked).is_err());
    }

    #[test]
    fn stacked_rmse_sees_direction_errors_norm_diff_does_not() {
        let ts = grid(50, 0.01);
        let w = wrench(&ts, |c, _| [3.0, 4.0, 0.0, 0.0, 0.0, 0.0][c]);
        let m = productive_series(&TaskId::CircleCw.spec(), &w).unwrap();
        let ideal = ideal_from(
            vec![WrenchChannel::Fx, WrenchChannel::Fy],
            vec![vec![4.0; 50], vec![3.0; 50]],
            &ts,
        );
        let align = identity_alignment(50);
        let stacked = force_rmse(&m, &ideal, &align, RmseMode::Stacked).unwrap();
        assert!((stacked - 1.0).abs() < 1e-12);
        assert_eq!(force_rmse(&m, &ideal, &align, RmseMode::NormDiff).unwrap(), 0.0);
    }

    #[test]
    fn impulse_cases() {
        let ts = grid(10_001, 0.001);
        let five = vec![5.0; ts.len()];
        assert!((impulse(&ts, &five).unwrap() - 50.0).abs() < 1e-9);
        let neg = vec![-5.0; ts.len()];
        assert!((impulse(&ts, &neg).unwrap() - 50.0).abs() < 1e-9);
        assert!(impulse(&ts[..1], &five[..1]).is_err());

        let ts = grid(1001, 0.001);
        let s: Vec<f64> = ts.iter().map(|t| (2.0 * PI * t).sin()).collect();
        assert!((impulse(&ts, &s).unwrap() - 2.0 / PI).abs() < 1e-4);
    }

    #[test]
    fn rms_and_peak_cases() {
        assert_eq!(rms_average(&[3.0; 4]).unwrap(), 3.0);
        assert_eq!(peak(&[3.0; 4]).unwrap(), 3.0);
        let alt = [2.0, -2.0, 2.0, -2.0];
        assert_eq!(rms_average(&alt).unwrap(), 2.0);
        assert_eq!(peak(&alt).unwrap(), 2.0);
        let s: Vec<f64> = (0..100_000).map(|i| (2.0 * PI * i as f64 / 100_000.0).sin()).collect();
        assert!((rms_average(&s).unwrap() - 0.5f64.sqrt()).abs() < 1e-3);
        assert!((peak(&s).unwrap() - 1.0).abs() < 1e-3);
        assert!(rms_average(&[]).is_err());
        assert!(peak(&[]).is_err());
    }

    #[test]
    fn nonproductive_axes_follow_task_table() {
        let ts = grid(20, 0.001);
        let w = wrench(&ts, |c, _| if c == 0 { 1.0 } else { 0.0 });
        let x = nonproductive_profile(&TaskId::XAxis.spec(), &w).unwrap();
        assert_eq!(x.iter().map(|p| p.axis).collect::<Vec<_>>(), vec![WrenchChannel::Fy, WrenchChannel::Fz]);
        assert!(x.iter().all(|p| p.rms_average == 0.0 && p.peak == 0.0 && p.impulse == 0.0 && p.variance == 0.0));

        let ccw = nonproductive_profile(&TaskId::CircleCcw.spec(), &w).unwrap();
        assert_eq!(ccw.len(), 1);
        assert_eq!(ccw[0].axis, WrenchChannel::Fz);
        assert!(nonproductive_profile(&TaskId::Torque.spec(), &w).is_err());
    }

    #[test]
    fn signed_and_rectified_variance_differ() {
        let ts = grid(4, 0.001);
        let w = wrench(&ts, |c, t| if c == 2 { if t < 0.0015 { -1.0 } else { 1.0 } } else { 0.0 });
        let p = nonproductive_profile(&TaskId::XAxis.spec(), &w).unwrap();
        let fz = &p[1];
        assert_eq!(fz.variance, 1.0);
        assert_eq!(fz.rectified_variance, 0.0);
    }

    fn report(pid: &str, task: TaskId, v: f64) -> ForceMetricsReport {
        ForceMetricsReport {
            key: TrialKey {
                participant: pid.into(),
                condition: PoseCondition::A,
                task,
            },
            cohort: Cohort::Healthy,
            rmse: v,
            impulse: v,
            rms_average: v,
            peak: v,
            nonproductive: vec![],
        }
    }

    #[test]
    fn aggregation_mean_and_sample_sd() {
        let people = vec![ParticipantInfo::new("02", Cohort::Healthy), ParticipantInfo::new("03", Cohort::PostStroke)];
        let force: Vec<TaskId> = TaskId::ALL.into_iter().filter(|t| t.is_force_task()).collect();
        let mut reports: Vec<_> = force.iter().map(|&t| report("02", t, 4.2)).collect();
        reports.extend(force.iter().enumerate().map(|(i, &t)| report("03", t, (i + 1) as f64)));
        reports.push(report("03", TaskId::Torque, 1e9));
        let agg = aggregate_cohorts(&reports, &people).unwrap();
        assert_eq!(agg.participants.len(), 2);
        let a = &agg.participants[0].summary[&ForceMetric::Rmse];
        assert!((a.mean - 4.2).abs() < 1e-12);
        assert_eq!(a.sd, 0.0);
        let b = &agg.participants[1];
        assert_eq!(b.cohort, Cohort::PostStroke);
        assert!((b.summary[&ForceMetric::Peak].mean - 4.0).abs() < 1e-12);
        // sqrt(28 / 6)
        assert!((b.summary[&ForceMetric::Peak].sd - 2.160_246_899_469_287).abs() < 1e-12);

        reports.retain(|r| !(r.key.participant == "02" && r.key.task == TaskId::Spline2));
        assert!(matches!(aggregate_cohorts(&reports, &people), Err(Error::Missing { .. })));
    }
}
