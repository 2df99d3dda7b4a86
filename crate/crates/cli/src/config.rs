use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use neuromotor_core::dsp::{EnvelopeSpec, FilterSpec};
use neuromotor_core::gamesync::{DEFAULT_ALIGN_THRESHOLD_S, DEFAULT_EPSILON_FRACTION};
use neuromotor_core::hmm::HmmOptions;
use neuromotor_core::metrics::RmseMode;
use neuromotor_core::synergy::{NmfOptions, OscRule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Dsp,
    Sync,
    Metrics,
    Synergy,
    Hmm,
    Stats,
    PlotData,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Dsp,
        Stage::Sync,
        Stage::Metrics,
        Stage::Synergy,
        Stage::Hmm,
        Stage::Stats,
        Stage::PlotData,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Dsp => "dsp",
            Stage::Sync => "sync",
            Stage::Metrics => "metrics",
            Stage::Synergy => "synergy",
            Stage::Hmm => "hmm",
            Stage::Stats => "stats",
            Stage::PlotData => "plot-data",
        }
    }

    /// Output directory under the run root.
    pub fn dir(self) -> &'static str {
        match self {
            Stage::PlotData => "plot_data",
            s => s.as_str(),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

/// How single-axis trials are split by prescribed direction for the
/// per-subtask synergy re-analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SegmentMode {
    Off,
    /// All samples of one direction form a single matrix.
    #[default]
    Concatenated,
    /// Every contiguous run of one direction is factorized on its own.
    PerRepetition,
}

impl FromStr for SegmentMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "off" => Ok(SegmentMode::Off),
            "concatenated" => Ok(SegmentMode::Concatenated),
            "per-repetition" => Ok(SegmentMode::PerRepetition),
            _ => Err(format!("expected `off`, `concatenated` or `per-repetition`, got `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynergyConfig {
    pub nmf: NmfOptions,
    pub restarts: usize,
    pub osc: OscRule,
    /// Keep every n-th envelope sample before factorization.
    pub decimate: usize,
    pub procedures: Vec<u8>,
    pub top_n: usize,
    pub clusters: (usize, usize),
    pub kmeans_restarts: usize,
    pub kmeans_max_iter: usize,
    pub segments: SegmentMode,
}

impl Default for SynergyConfig {
    fn default() -> Self {
        SynergyConfig {
            nmf: NmfOptions::default(),
            restarts: 20,
            osc: OscRule::default(),
            decimate: 10,
            procedures: vec![1, 2, 3],
            top_n: 3,
            clusters: (1, 8),
            kmeans_restarts: 20,
            kmeans_max_iter: 300,
            segments: SegmentMode::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmConfig {
    pub options: HmmOptions,
    pub restarts: usize,
    pub decimate: usize,
}

impl Default for HmmConfig {
    fn default() -> Self {
        HmmConfig {
            options: HmmOptions::default(),
            restarts: 25,
            decimate: 1,
        }
    }
}

/// Everything that determines a run's outputs. Serialized next to the results;
/// the output directory itself is left out so relocated runs compare equal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub manifest: PathBuf,
    #[serde(skip)]
    pub out: PathBuf,
    pub stages: Vec<Stage>,
    pub seed: u64,
    pub filter: FilterSpec,
    pub envelope: EnvelopeSpec,
    pub epsilon_fraction: f64,
    pub align_threshold_s: f64,
    pub rmse_mode: RmseMode,
    pub synergy: SynergyConfig,
    pub hmm: HmmConfig,
}

impl RunConfig {
    pub fn new(manifest: PathBuf, out: PathBuf) -> Self {
        RunConfig {
            manifest,
            out,
            stages: Stage::ALL.to_vec(),
            seed: 0,
            filter: FilterSpec::default(),
            envelope: EnvelopeSpec::default(),
            epsilon_fraction: DEFAULT_EPSILON_FRACTION,
            align_threshold_s: DEFAULT_ALIGN_THRESHOLD_S,
            rmse_mode: RmseMode::default(),
            synergy: SynergyConfig::default(),
            hmm: HmmConfig::default(),
        }
    }

    pub fn runs(&self, stage: Stage) -> bool {
        self.stages.contains(&stage)
    }
}
