//! Dataset manifest, canonical CSV series files, and dataset validation.
//!
//! File layout:
//!
//! * EMG: `t,AD,MD,PD,BB,TR,BR,FL,EX`
//! * wrench: `t,fx,fy,fz,tx,ty,tz`
//! * game: `t,target_x,target_y,avatar_x,avatar_y`
//!
//! `t` is in seconds. The manifest is one JSON document whose file paths are
//! relative to the manifest's directory. On load every series is shifted so
//! that the first game sample sits at `t = 0`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    Cohort, EmgRecord, GameTrace, ParticipantInfo, PoseCondition, SampledSeries, TaskId, Trial,
    TrialKey, WrenchRecord, NOMINAL_EMG_RATE_HZ,
};

/// Relative deviation allowed between declared and observed sample rates.
pub const RATE_TOLERANCE: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleRates {
    pub emg_hz: f64,
    pub wrench_hz: f64,
    pub game_hz: f64,
}

impl Default for SampleRates {
    fn default() -> Self {
        SampleRates {
            emg_hz: NOMINAL_EMG_RATE_HZ,
            wrench_hz: 1000.0,
            game_hz: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialEntry {
    pub participant: String,
    pub condition: PoseCondition,
    pub task: TaskId,
    pub emg: PathBuf,
    pub wrench: PathBuf,
    pub game: PathBuf,
}

impl TrialEntry {
    pub fn key(&self) -> TrialKey {
        TrialKey {
            participant: self.participant.clone(),
            condition: self.condition,
            task: self.task,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    #[serde(default)]
    pub version: String,
    pub scaling_factor: f64,
    #[serde(default)]
    pub sample_rates: SampleRates,
    #[serde(default)]
    pub participants: Vec<ParticipantInfo>,
    #[serde(default)]
    pub trials: Vec<TrialEntry>,
    /// Directory that relative paths resolve against.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn participant(&self, id: &str) -> Option<&ParticipantInfo> {
        self.participants.iter().find(|p| p.id == id)
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.root.join(path)
        }
    }

    /// Checks invariants that do not require touching the series files.
    pub fn check(&self, source: &Path) -> Result<()> {
        let bad = |message: String| Error::Manifest {
            path: source.to_path_buf(),
            message,
        };
        if !(self.scaling_factor.is_finite() && self.scaling_factor > 0.0) {
            return Err(bad(format!(
                "scaling_factor must be positive, got {}",
                self.scaling_factor
            )));
        }
        let rates = self.sample_rates;
        for (name, r) in [("emg_hz", rates.emg_hz), ("wrench_hz", rates.wrench_hz), ("game_hz", rates.game_hz)] {
            if !(r.is_finite() && r > 0.0) {
                return Err(bad(format!("{name} must be positive, got {r}")));
            }
        }
        let mut ids = BTreeSet::new();
        for p in &self.participants {
            if p.id.is_empty() {
                return Err(bad("empty participant id".into()));
            }
            if !ids.insert(p.id.as_str()) {
                return Err(bad(format!("participant `{}` listed twice", p.id)));
            }
        }
        let mut seen = BTreeSet::new();
        for t in &self.trials {
            if t.participant.is_empty() {
                return Err(bad("trial with empty participant id".into()));
            }
            if !seen.insert(t.key()) {
                return Err(Error::DuplicateTrial {
                    participant: t.participant.clone(),
                    condition: t.condition.to_string(),
                    task: t.task.to_string(),
                });
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    manifest.root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    manifest.check(path)?;
    Ok(manifest)
}

/// Reads a canonical CSV file and checks its header against `labels`.
pub fn read_series_csv(path: &Path, labels: &[&str]) -> Result<SampledSeries> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_err)?;
    let header: Vec<String> = reader
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(str::to_string)
        .collect();
    let context = path.display().to_string();
    let expected: Vec<String> = std::iter::once("t")
        .chain(labels.iter().copied())
        .map(str::to_string)
        .collect();
    let header_ok = header.len() == expected.len()
        && header
            .iter()
            .zip(&expected)
            .all(|(a, b)| a.eq_ignore_ascii_case(b));
    if !header_ok {
        return Err(Error::Channels {
            context,
            expected,
            found: header,
        });
    }
    let mut timestamps = Vec::new();
    let mut channels = vec![Vec::new(); labels.len()];
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        if record.len() != labels.len() + 1 {
            return Err(Error::series(
                &context,
                format!("row {} has {} fields, expected {}", row + 1, record.len(), labels.len() + 1),
            ));
        }
        let mut fields = record.iter().map(|f| {
            f.parse::<f64>().map_err(|_| {
                Error::series(&context, format!("row {}: cannot parse `{f}` as a number", row + 1))
            })
        });
        timestamps.push(fields.next().unwrap()?);
        for ch in channels.iter_mut() {
            ch.push(fields.next().unwrap()?);
        }
    }
    if timestamps.is_empty() {
        return Err(Error::series(&context, "series is empty"));
    }
    let labels = labels.iter().map(|s| s.to_string()).collect();
    SampledSeries::new(timestamps, labels, channels).map_err(|e| match e {
        Error::Series { context: c, message } => Error::series(format!("{context} ({c})"), message),
        other => other,
    })
}

/// Writes a series in canonical CSV form. Values use the shortest
/// representation that parses back to the identical `f64`.
pub fn write_series_csv(path: &Path, series: &SampledSeries) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["t".to_string()];
    header.extend(series.labels().iter().cloned());
    writer.write_record(&header).map_err(csv_err)?;
    let mut row = Vec::with_capacity(series.channel_count() + 1);
    for i in 0..series.len() {
        row.clear();
        row.push(series.timestamps()[i].to_string());
        row.extend(series.channels().iter().map(|c| c[i].to_string()));
        writer.write_record(&row).map_err(csv_err)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

fn shift(series: SampledSeries, offset: f64) -> Result<SampledSeries> {
    if offset == 0.0 {
        return Ok(series);
    }
    let ts = series.timestamps().iter().map(|t| t - offset).collect();
    series.with_timestamps(ts)
}

fn overlaps(series: &SampledSeries, start: f64, end: f64) -> bool {
    match (series.start(), series.end()) {
        (Some(a), Some(b)) => a <= end && b >= start,
        _ => false,
    }
}

pub fn load_trial(manifest: &DatasetManifest, entry: &TrialEntry) -> Result<Trial> {
    let participant = manifest
        .participant(&entry.participant)
        .cloned()
        .ok_or_else(|| Error::Missing {
            what: "participant record".into(),
            key: entry.participant.clone(),
        })?;
    let emg = read_series_csv(&manifest.resolve(&entry.emg), EmgRecord::LABELS)?;
    let wrench = read_series_csv(&manifest.resolve(&entry.wrench), WrenchRecord::LABELS)?;
    let game = read_series_csv(&manifest.resolve(&entry.game), GameTrace::LABELS)?;
    let origin = game.start().unwrap_or(0.0);
    let emg = EmgRecord::new(shift(emg, origin)?)?;
    let wrench = WrenchRecord::new(shift(wrench, origin)?)?;
    let game = GameTrace::new(shift(game, origin)?)?;
    let end = game.end().unwrap_or(0.0);
    for (name, s) in [("emg", emg.series()), ("wrench", wrench.series())] {
        if !overlaps(s, 0.0, end) {
            return Err(Error::series(
                format!("{} {name}", entry.key()),
                format!("does not overlap game window [0, {end}]"),
            ));
        }
    }
    Ok(Trial {
        participant,
        condition: entry.condition,
        task: entry.task.spec(),
        emg,
        wrench,
        game,
        scaling_factor: manifest.scaling_factor,
    })
}

/// Writes a trial's three series under `dir` and returns its manifest entry.
pub fn write_trial(dir: &Path, manifest_root: &Path, trial: &Trial) -> Result<TrialEntry> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let key = trial.key();
    let mut paths = Vec::new();
    for (suffix, series) in [
        ("emg", trial.emg.series()),
        ("wrench", trial.wrench.series()),
        ("game", trial.game.series()),
    ] {
        let path = dir.join(format!("{key}_{suffix}.csv"));
        write_series_csv(&path, series)?;
        let rel = path
            .strip_prefix(manifest_root)
            .map(Path::to_path_buf)
            .unwrap_or(path);
        paths.push(rel);
    }
    let game = paths.pop().unwrap();
    let wrench = paths.pop().unwrap();
    let emg = paths.pop().unwrap();
    Ok(TrialEntry {
        participant: key.participant,
        condition: key.condition,
        task: key.task,
        emg,
        wrench,
        game,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Issue {
    pub severity: Severity,
    pub location: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub trials: BTreeMap<String, Vec<Issue>>,
    pub dataset: Vec<Issue>,
    pub passed: bool,
}

impl ValidationReport {
    pub fn issues(&self) -> impl Iterator<Item = &Issue> {
        self.dataset.iter().chain(self.trials.values().flatten())
    }

    pub fn error_count(&self) -> usize {
        self.issues().filter(|i| i.severity == Severity::Error).count()
    }

    pub fn warning_count(&self) -> usize {
        self.issues().filter(|i| i.severity == Severity::Warning).count()
    }
}

fn rate_issue(location: &str, name: &str, series: &SampledSeries, declared_hz: f64) -> Option<Issue> {
    let observed = series.median_interval()?;
    let expected = 1.0 / declared_hz;
    let rel = (observed - expected).abs() / expected;
    (rel > RATE_TOLERANCE).then(|| Issue {
        severity: Severity::Warning,
        location: format!("{location}/{name}"),
        message: format!(
            "declared {declared_hz} Hz but median interval is {:.6} s ({:.3} Hz)",
            observed,
            1.0 / observed
        ),
    })
}

/// Loads every trial and collects problems instead of stopping at the first.
pub fn validate_dataset(manifest: &DatasetManifest) -> ValidationReport {
    let mut dataset = Vec::new();
    let rates = manifest.sample_rates;
    if (rates.emg_hz - NOMINAL_EMG_RATE_HZ).abs() / NOMINAL_EMG_RATE_HZ > RATE_TOLERANCE {
        dataset.push(Issue {
            severity: Severity::Error,
            location: "manifest".into(),
            message: format!(
                "declared EMG rate {} Hz is outside {} Hz ± {}%",
                rates.emg_hz,
                NOMINAL_EMG_RATE_HZ,
                RATE_TOLERANCE * 100.0
            ),
        });
    }
    let mut cohorts: BTreeMap<&str, Cohort> = BTreeMap::new();
    for p in &manifest.participants {
        cohorts.insert(&p.id, p.cohort);
    }

    let mut trials = BTreeMap::new();
    for entry in &manifest.trials {
        let location = entry.key().to_string();
        let mut issues = Vec::new();
        for path in [&entry.emg, &entry.wrench, &entry.game] {
            let full = manifest.resolve(path);
            if !full.is_file() {
                issues.push(Issue {
                    severity: Severity::Error,
                    location: location.clone(),
                    message: format!("missing file {}", full.display()),
                });
            }
        }
        if issues.is_empty() {
            match load_trial(manifest, entry) {
                Ok(trial) => {
                    issues.extend(rate_issue(&location, "emg", trial.emg.series(), rates.emg_hz));
                    issues.extend(rate_issue(&location, "wrench", trial.wrench.series(), rates.wrench_hz));
                    issues.extend(rate_issue(&location, "game", trial.game.series(), rates.game_hz));
                }
                Err(e) => issues.push(Issue {
                    severity: Severity::Error,
                    location: location.clone(),
                    message: e.to_string(),
                }),
            }
        }
        trials.insert(location, issues);
    }
    let passed = dataset
        .iter()
        .chain(trials.values().flatten())
        .all(|i| i.severity != Severity::Error);
    ValidationReport {
        trials,
        dataset,
        passed,
    }
}
