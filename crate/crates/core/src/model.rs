//! Shared domain types: participants, pose conditions, the task table and
//! validated multichannel time series.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cohort {
    Healthy,
    PostStroke,
}

impl fmt::Display for Cohort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cohort::Healthy => f.write_str("healthy"),
            Cohort::PostStroke => f.write_str("post_stroke"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParticipantInfo {
    /// Opaque label; ids are never interpreted numerically.
    pub id: String,
    pub cohort: Cohort,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub handedness: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub impaired_side: Option<String>,
}

impl ParticipantInfo {
    pub fn new(id: impl Into<String>, cohort: Cohort) -> Self {
        ParticipantInfo {
            id: id.into(),
            cohort,
            handedness: None,
            impaired_side: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PoseCondition {
    A,
    B,
}

impl fmt::Display for PoseCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PoseCondition::A => f.write_str("A"),
            PoseCondition::B => f.write_str("B"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    XAxis,
    YAxis,
    ZAxis,
    Torque,
    CircleCw,
    CircleCcw,
    Spline1,
    Spline2,
}

impl TaskId {
    pub const ALL: [TaskId; 8] = [
        TaskId::XAxis,
        TaskId::YAxis,
        TaskId::ZAxis,
        TaskId::Torque,
        TaskId::CircleCw,
        TaskId::CircleCcw,
        TaskId::Spline1,
        TaskId::Spline2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskId::XAxis => "x_axis",
            TaskId::YAxis => "y_axis",
            TaskId::ZAxis => "z_axis",
            TaskId::Torque => "torque",
            TaskId::CircleCw => "circle_cw",
            TaskId::CircleCcw => "circle_ccw",
            TaskId::Spline1 => "spline1",
            TaskId::Spline2 => "spline2",
        }
    }

    pub fn spec(self) -> TaskSpec {
        use GameAxis::{X, Y};
        use WrenchChannel::{Fx, Fy, Fz, Tz};
        let planar = vec![(Fx, X), (Fy, Y)];
        let (mapping, repetitions, rotation) = match self {
            TaskId::XAxis => (vec![(Fx, X)], 7, None),
            TaskId::YAxis => (vec![(Fy, Y)], 7, None),
            TaskId::ZAxis => (vec![(Fz, Y)], 7, None),
            TaskId::Torque => (vec![(Tz, X)], 5, None),
            TaskId::CircleCw => (planar, 3, Some(Rotation::Clockwise)),
            TaskId::CircleCcw => (planar, 3, Some(Rotation::CounterClockwise)),
            TaskId::Spline1 => (planar, 3, Some(Rotation::CounterClockwise)),
            TaskId::Spline2 => (planar, 3, Some(Rotation::Clockwise)),
        };
        TaskSpec {
            id: self,
            mapping,
            repetitions,
            rotation,
        }
    }

    pub fn is_force_task(self) -> bool {
        self != TaskId::Torque
    }

    pub fn is_single_axis(self) -> bool {
        matches!(
            self,
            TaskId::XAxis | TaskId::YAxis | TaskId::ZAxis | TaskId::Torque
        )
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown task id `{s}`")))
    }
}

/// Six-axis wrench channel, in canonical column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum WrenchChannel {
    Fx,
    Fy,
    Fz,
    Tx,
    Ty,
    Tz,
}

impl WrenchChannel {
    pub const ALL: [WrenchChannel; 6] = [
        WrenchChannel::Fx,
        WrenchChannel::Fy,
        WrenchChannel::Fz,
        WrenchChannel::Tx,
        WrenchChannel::Ty,
        WrenchChannel::Tz,
    ];
    pub const FORCES: [WrenchChannel; 3] = [WrenchChannel::Fx, WrenchChannel::Fy, WrenchChannel::Fz];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_force(self) -> bool {
        self.index() < 3
    }

    pub fn label(self) -> &'static str {
        WRENCH_LABELS[self.index()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GameAxis {
    X,
    Y,
}

impl GameAxis {
    pub fn target_channel(self) -> usize {
        match self {
            GameAxis::X => 0,
            GameAxis::Y => 1,
        }
    }

    pub fn avatar_channel(self) -> usize {
        self.target_channel() + 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rotation {
    Clockwise,
    CounterClockwise,
}

/// One row of the task table: which wrench inputs drive which game axes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: TaskId,
    pub mapping: Vec<(WrenchChannel, GameAxis)>,
    pub repetitions: u32,
    pub rotation: Option<Rotation>,
}

impl TaskSpec {
    pub fn input_channels(&self) -> Vec<WrenchChannel> {
        self.mapping.iter().map(|&(c, _)| c).collect()
    }

    pub fn output_axes(&self) -> Vec<GameAxis> {
        self.mapping.iter().map(|&(_, a)| a).collect()
    }

    /// Game axis driven by a wrench channel, if that channel is productive.
    pub fn output_for(&self, channel: WrenchChannel) -> Option<GameAxis> {
        self.mapping
            .iter()
            .find(|&&(c, _)| c == channel)
            .map(|&(_, a)| a)
    }
}

pub fn builtin_task_table() -> Vec<TaskSpec> {
    TaskId::ALL.iter().map(|t| t.spec()).collect()
}

pub fn productive_channels(task: &TaskSpec) -> Vec<WrenchChannel> {
    task.input_channels()
}

/// Force axes that have no influence on the task (complement within Fx, Fy, Fz).
pub fn nonproductive_forces(task: &TaskSpec) -> Vec<WrenchChannel> {
    let productive = productive_channels(task);
    WrenchChannel::FORCES
        .into_iter()
        .filter(|c| !productive.contains(c))
        .collect()
}

pub const EMG_LABELS: [&str; 8] = ["AD", "MD", "PD", "BB", "TR", "BR", "FL", "EX"];
pub const WRENCH_LABELS: [&str; 6] = ["fx", "fy", "fz", "tx", "ty", "tz"];
pub const GAME_LABELS: [&str; 4] = ["target_x", "target_y", "avatar_x", "avatar_y"];
pub const NOMINAL_EMG_RATE_HZ: f64 = 1000.0;

/// Multichannel series stored channel-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledSeries {
    timestamps: Vec<f64>,
    labels: Vec<String>,
    channels: Vec<Vec<f64>>,
}

impl SampledSeries {
    pub fn new(timestamps: Vec<f64>, labels: Vec<String>, channels: Vec<Vec<f64>>) -> Result<Self> {
        Self::check(&timestamps, &labels, &channels)?;
        Ok(SampledSeries {
            timestamps,
            labels,
            channels,
        })
    }

    fn check(timestamps: &[f64], labels: &[String], channels: &[Vec<f64>]) -> Result<()> {
        if labels.len() != channels.len() {
            return Err(Error::series(
                "series",
                format!("{} labels for {} channels", labels.len(), channels.len()),
            ));
        }
        if let Some((i, t)) = timestamps.iter().enumerate().find(|(_, t)| !t.is_finite()) {
            return Err(Error::series("timestamps", format!("non-finite value {t} at row {i}")));
        }
        if let Some(i) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::series(
                "timestamps",
                format!(
                    "not strictly increasing at row {}: {} then {}",
                    i + 1,
                    timestamps[i],
                    timestamps[i + 1]
                ),
            ));
        }
        for (label, ch) in labels.iter().zip(channels) {
            if ch.len() != timestamps.len() {
                return Err(Error::series(
                    label.clone(),
                    format!("{} values for {} timestamps", ch.len(), timestamps.len()),
                ));
            }
            if let Some((i, v)) = ch.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(Error::series(label.clone(), format!("non-finite value {v} at row {i}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn channel(&self, index: usize) -> &[f64] {
        &self.channels[index]
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn start(&self) -> Option<f64> {
        self.timestamps.first().copied()
    }

    pub fn end(&self) -> Option<f64> {
        self.timestamps.last().copied()
    }

    /// Median spacing between consecutive timestamps.
    pub fn median_interval(&self) -> Option<f64> {
        if self.timestamps.len() < 2 {
            return None;
        }
        let mut d: Vec<f64> = self.timestamps.windows(2).map(|w| w[1] - w[0]).collect();
        d.sort_by(f64::total_cmp);
        let n = d.len();
        Some(if n % 2 == 0 {
            0.5 * (d[n / 2 - 1] + d[n / 2])
        } else {
            d[n / 2]
        })
    }

    /// Same timestamps and labels with each channel replaced by `f(channel)`.
    pub fn map_channels<F>(&self, mut f: F) -> Result<Self>
    where
        F: FnMut(usize, &[f64]) -> Vec<f64>,
    {
        let channels = self
            .channels
            .iter()
            .enumerate()
            .map(|(i, c)| f(i, c))
            .collect();
        SampledSeries::new(self.timestamps.clone(), self.labels.clone(), channels)
    }

    pub fn with_timestamps(&self, timestamps: Vec<f64>) -> Result<Self> {
        SampledSeries::new(timestamps, self.labels.clone(), self.channels.clone())
    }

    /// Rows whose index satisfies `keep`.
    pub fn select_rows(&self, keep: impl Fn(usize) -> bool) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        SampledSeries {
            timestamps: idx.iter().map(|&i| self.timestamps[i]).collect(),
            labels: self.labels.clone(),
            channels: self
                .channels
                .iter()
                .map(|c| idx.iter().map(|&i| c[i]).collect())
                .collect(),
        }
    }

    pub fn into_parts(self) -> (Vec<f64>, Vec<String>, Vec<Vec<f64>>) {
        (self.timestamps, self.labels, self.channels)
    }
}

fn expect_labels(context: &str, series: &SampledSeries, expected: &[&str]) -> Result<()> {
    let found = series.labels();
    let matches = found.len() == expected.len()
        && found
            .iter()
            .zip(expected)
            .all(|(a, b)| a.eq_ignore_ascii_case(b));
    if matches {
        Ok(())
    } else {
        Err(Error::Channels {
            context: context.to_string(),
            expected: expected.iter().map(|s| s.to_string()).collect(),
            found: found.to_vec(),
        })
    }
}

macro_rules! record_type {
    ($(#[$meta:meta])* $name:ident, $labels:expr, $context:literal) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        pub struct $name(SampledSeries);

        impl $name {
            pub const LABELS: &'static [&'static str] = &$labels;

            pub fn new(series: SampledSeries) -> Result<Self> {
                expect_labels($context, &series, Self::LABELS)?;
                Ok($name(series))
            }

            pub fn from_channels(timestamps: Vec<f64>, channels: Vec<Vec<f64>>) -> Result<Self> {
                let labels = Self::LABELS.iter().map(|s| s.to_string()).collect();
                Self::new(SampledSeries::new(timestamps, labels, channels)?)
            }

            pub fn series(&self) -> &SampledSeries {
                &self.0
            }

            pub fn into_series(self) -> SampledSeries {
                self.0
            }
        }

        impl std::ops::Deref for $name {
            type Target = SampledSeries;

            fn deref(&self) -> &SampledSeries {
                &self.0
            }
        }
    };
}

record_type!(
    /// Eight sEMG channels in canonical muscle order.
    EmgRecord,
    EMG_LABELS,
    "emg"
);
record_type!(
    /// Forces (N) then torques (N·m).
    WrenchRecord,
    WRENCH_LABELS,
    "wrench"
);
record_type!(
    /// Target and avatar positions in game-screen units.
    GameTrace,
    GAME_LABELS,
    "game"
);

impl WrenchRecord {
    pub fn axis(&self, channel: WrenchChannel) -> &[f64] {
        self.channel(channel.index())
    }
}

impl GameTrace {
    pub fn target(&self, axis: GameAxis) -> &[f64] {
        self.channel(axis.target_channel())
    }

    pub fn avatar(&self, axis: GameAxis) -> &[f64] {
        self.channel(axis.avatar_channel())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TrialKey {
    pub participant: String,
    pub condition: PoseCondition,
    pub task: TaskId,
}

impl fmt::Display for TrialKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}_{}", self.participant, self.condition, self.task)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub participant: ParticipantInfo,
    pub condition: PoseCondition,
    pub task: TaskSpec,
    pub emg: EmgRecord,
    pub wrench: WrenchRecord,
    pub game: GameTrace,
    /// Game units per second per newton.
    pub scaling_factor: f64,
}

impl Trial {
    pub fn key(&self) -> TrialKey {
        TrialKey {
            participant: self.participant.id.clone(),
            condition: self.condition,
            task: self.task.id,
        }
    }

    /// Game window `[start, end]` in trial time.
    pub fn game_window(&self) -> (f64, f64) {
        (
            self.game.start().unwrap_or(0.0),
            self.game.end().unwrap_or(0.0),
        )
    }
}

/// Prescribed direction labels (0 or 1) on some reference timeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskSequence {
    pub timestamps: Vec<f64>,
    pub labels: Vec<u8>,
}

impl SubtaskSequence {
    pub fn new(timestamps: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if timestamps.len() != labels.len() {
            return Err(Error::LengthMismatch {
                left: timestamps.len(),
                right: labels.len(),
            });
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::InvalidParameter("subtask labels must be 0 or 1".into()));
        }
        Ok(SubtaskSequence { timestamps, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_table_matches_mapping_rows() {
        let table = builtin_task_table();
        assert_eq!(table.len(), 8);

        let x = &table[0];
        assert_eq!(x.id, TaskId::XAxis);
        assert_eq!(x.mapping, vec![(WrenchChannel::Fx, GameAxis::X)]);
        assert_eq!(x.repetitions, 7);

        let z = TaskId::ZAxis.spec();
        assert_eq!(z.mapping, vec![(WrenchChannel::Fz, GameAxis::Y)]);
        assert_eq!(z.repetitions, 7);

        let torque = TaskId::Torque.spec();
        assert_eq!(torque.mapping, vec![(WrenchChannel::Tz, GameAxis::X)]);
        assert_eq!(torque.repetitions, 5);

        let cw = TaskId::CircleCw.spec();
        assert_eq!(cw.input_channels(), vec![WrenchChannel::Fx, WrenchChannel::Fy]);
        assert_eq!(cw.output_axes(), vec![GameAxis::X, GameAxis::Y]);
        assert_eq!(cw.repetitions, 3);

        let s1 = TaskId::Spline1.spec();
        assert_eq!(s1.rotation, Some(Rotation::CounterClockwise));
        let s2 = TaskId::Spline2.spec();
        assert_eq!(s2.rotation, Some(Rotation::Clockwise));
        assert_eq!(s2.repetitions, 3);
        assert_eq!(s2.input_channels(), vec![WrenchChannel::Fx, WrenchChannel::Fy]);
    }

    #[test]
    fn torque_is_only_torque_input() {
        for spec in builtin_task_table() {
            let uses_torque = spec.input_channels().iter().any(|c| !c.is_force());
            assert_eq!(uses_torque, spec.id == TaskId::Torque, "{:?}", spec.id);
        }
    }

    #[test]
    fn productive_and_nonproductive_partition_forces() {
        assert_eq!(productive_channels(&TaskId::XAxis.spec()), vec![WrenchChannel::Fx]);
        assert_eq!(
            nonproductive_forces(&TaskId::XAxis.spec()),
            vec![WrenchChannel::Fy, WrenchChannel::Fz]
        );
        assert_eq!(
            nonproductive_forces(&TaskId::CircleCcw.spec()),
            vec![WrenchChannel::Fz]
        );
        for spec in builtin_task_table().into_iter().filter(|s| s.id.is_force_task()) {
            let mut all = productive_channels(&spec);
            all.extend(nonproductive_forces(&spec));
            all.sort();
            assert_eq!(all, WrenchChannel::FORCES.to_vec());
        }
    }

    #[test]
    fn task_id_parses_its_own_name() {
        for t in TaskId::ALL {
            assert_eq!(t.as_str().parse::<TaskId>().unwrap(), t);
        }
        assert!("wiggle".parse::<TaskId>().is_err());
    }

    #[test]
    fn series_rejects_bad_timestamps_and_values() {
        let labels = vec!["a".to_string()];
        assert!(SampledSeries::new(vec![0.0, 0.0], labels.clone(), vec![vec![1.0, 2.0]]).is_err());
        assert!(SampledSeries::new(vec![0.0, 1.0], labels.clone(), vec![vec![1.0, f64::NAN]]).is_err());
        assert!(SampledSeries::new(vec![0.0, 1.0], labels.clone(), vec![vec![1.0]]).is_err());
        assert!(SampledSeries::new(vec![0.0, 1.0], labels, vec![vec![1.0, 2.0]]).is_ok());
    }

    #[test]
    fn emg_requires_canonical_labels() {
        let ts = vec![0.0, 0.001];
        let ok = EmgRecord::from_channels(ts.clone(), vec![vec![0.0; 2]; 8]);
        assert!(ok.is_ok());
        let seven: Vec<String> = EMG_LABELS[..7].iter().map(|s| s.to_string()).collect();
        let s = SampledSeries::new(ts, seven, vec![vec![0.0; 2]; 7]).unwrap();
        assert!(matches!(EmgRecord::new(s), Err(Error::Channels { .. })));
    }

    #[test]
    fn subtask_sequence_is_binary() {
        assert!(SubtaskSequence::new(vec![0.0, 1.0], vec![0, 2]).is_err());
        assert!(SubtaskSequence::new(vec![0.0], vec![0, 1]).is_err());
        assert!(SubtaskSequence::new(vec![0.0, 1.0], vec![0, 1]).is_ok());
    }
}
