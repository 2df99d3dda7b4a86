//! Stage orchestration. Each stage writes under its own directory and keeps
//! its results in memory for later stages; a stage whose inputs were produced
//! by an earlier invocation reads them back from the run directory.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use neuromotor_core::dsp::{self, FilterSpec};
use neuromotor_core::gamesync::{
    align_nearest, derive_subtasks, estimate_offsets, ideal_force, OffsetEstimate, SubtaskThreshold,
};
use neuromotor_core::hmm::{multi_restart_error, HmmErrorReport, HmmTrialOutcome};
use neuromotor_core::ingest::{load_manifest, load_trial, read_series_csv, validate_dataset, DatasetManifest};
use neuromotor_core::metrics::{aggregate_cohorts, trial_metrics, CohortAggregate, ForceMetric, ForceMetricsReport};
use neuromotor_core::seed::derive_seed;
use neuromotor_core::stats::{box_stats, compare_cohorts, mann_whitney, mean_ci95, rank_biserial, BoxStats};
use neuromotor_core::synergy::{
    cluster_procedure, optimal_synergy_count, ClusterAssignment, EmgMatrix, KMeansOptions, Procedure,
    SynergyDecomposition,
};
use neuromotor_core::{
    Cohort, EmgRecord, PoseCondition, SubtaskSequence, TaskId, Trial, TrialKey, WrenchRecord, EMG_LABELS,
};

use crate::config::{RunConfig, SegmentMode, Stage};
use crate::index::{sha256_hex, write_json_file, FileRecord, RunIndex, StageWriter, CONFIG_FILE};

/// A stage needs results that neither this run nor an earlier one produced.
#[derive(Debug)]
pub struct CacheMissing {
    pub stage: Stage,
    pub path: PathBuf,
}

impl fmt::Display for CacheMissing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "missing {} (run the `{}` stage first)",
            self.path.display(),
            self.stage
        )
    }
}

impl std::error::Error for CacheMissing {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetRow {
    pub participant: String,
    pub condition: PoseCondition,
    pub estimate: OffsetEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OscRow {
    pub key: String,
    pub participant: String,
    pub cohort: Cohort,
    pub condition: PoseCondition,
    pub task: TaskId,
    pub k_star: usize,
    pub saturated: bool,
    pub vaf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SegmentOscRow {
    key: String,
    participant: String,
    cohort: Cohort,
    condition: PoseCondition,
    task: TaskId,
    direction: u8,
    /// Index of the contiguous run; empty when all runs are concatenated.
    repetition: Option<usize>,
    samples: usize,
    k_star: usize,
    saturated: bool,
    vaf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct SegmentClusters {
    task: TaskId,
    direction: u8,
    assignments: Vec<ClusterAssignment>,
}

/// One trial's envelope split by prescribed direction.
struct Segment {
    direction: u8,
    repetition: Option<usize>,
    record: EmgRecord,
}

fn direction_segments(env: &EmgRecord, sub: &SubtaskSequence, mode: SegmentMode) -> Result<Vec<Segment>> {
    let labels: Vec<u8> = env
        .timestamps()
        .iter()
        .map(|&t| nearest_label(&sub.timestamps, &sub.labels, t))
        .collect();
    let select = |keep: &dyn Fn(usize) -> bool| EmgRecord::new(env.series().select_rows(keep));
    let mut out = Vec::new();
    match mode {
        SegmentMode::Off => {}
        SegmentMode::Concatenated => {
            for direction in 0..2u8 {
                if labels.contains(&direction) {
                    let record = select(&|i| labels[i] == direction)?;
                    out.push(Segment { direction, repetition: None, record });
                }
            }
        }
        SegmentMode::PerRepetition => {
            let mut start = 0;
            let mut count = [0usize; 2];
            for end in 1..=labels.len() {
                if end == labels.len() || labels[end] != labels[start] {
                    let direction = labels[start];
                    let record = select(&|i| (start..end).contains(&i))?;
                    out.push(Segment {
                        direction,
                        repetition: Some(count[direction as usize]),
                        record,
                    });
                    count[direction as usize] += 1;
                    start = end;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SubtaskRow {
    t: f64,
    label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BoxRow<'a> {
    group: &'a str,
    condition: PoseCondition,
    cohort: Cohort,
    n: usize,
    median: f64,
    q1: f64,
    q3: f64,
    whisker_low: f64,
    whisker_high: f64,
    outliers: String,
}

impl<'a> BoxRow<'a> {
    fn new(group: &'a str, condition: PoseCondition, cohort: Cohort, b: BoxStats) -> Self {
        BoxRow {
            group,
            condition,
            cohort,
            n: b.n,
            median: b.median,
            q1: b.q1,
            q3: b.q3,
            whisker_low: b.whisker_low,
            whisker_high: b.whisker_high,
            outliers: b.outliers.iter().map(f64::to_string).collect::<Vec<_>>().join(";"),
        }
    }
}

const COHORTS: [Cohort; 2] = [Cohort::Healthy, Cohort::PostStroke];

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn read_json<T: DeserializeOwned>(path: &Path, stage: Stage) -> Result<T> {
    if !path.exists() {
        return Err(CacheMissing {
            stage,
            path: path.to_path_buf(),
        }
        .into());
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn read_csv_rows<T: DeserializeOwned>(path: &Path, stage: Stage) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(CacheMissing {
            stage,
            path: path.to_path_buf(),
        }
        .into());
    }
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .with_context(|| format!("parsing {}", path.display()))
}

/// Nearest-neighbour lookup of `labels` (sampled at sorted `ts`) at time `t`.
fn nearest_label(ts: &[f64], labels: &[u8], t: f64) -> u8 {
    let i = ts.partition_point(|&x| x < t);
    if i == 0 {
        labels[0]
    } else if i == ts.len() || t - ts[i - 1] <= ts[i] - t {
        labels[i - 1]
    } else {
        labels[i]
    }
}

fn seeds(base: u64, stage: &str, key: &str, n: usize) -> Vec<u64> {
    let first = derive_seed(base, &[stage, key]);
    (0..n as u64).map(|i| first.wrapping_add(i)).collect()
}

struct Run {
    cfg: RunConfig,
    manifest: DatasetManifest,
    trials: Option<Vec<Trial>>,
    envelopes: Option<BTreeMap<TrialKey, EmgRecord>>,
    offsets: Option<Vec<OffsetRow>>,
    subtasks: Option<BTreeMap<TrialKey, SubtaskSequence>>,
    reports: Option<Vec<ForceMetricsReport>>,
    aggregate: Option<CohortAggregate>,
    hmm: Option<Vec<HmmErrorReport>>,
    osc: Option<Vec<OscRow>>,
}

impl Run {
    fn out(&self, rel: &str) -> PathBuf {
        self.cfg.out.join(rel)
    }

    fn cohort(&self, participant: &str) -> Cohort {
        self.manifest
            .participant(participant)
            .map(|p| p.cohort)
            .unwrap_or(Cohort::Healthy)
    }

    fn keys(&self) -> Vec<TrialKey> {
        let mut keys: Vec<TrialKey> = self.manifest.trials.iter().map(|e| e.key()).collect();
        keys.sort();
        keys
    }

    fn ensure_trials(&mut self) -> Result<()> {
        if self.trials.is_none() {
            let manifest = &self.manifest;
            let mut trials = manifest
                .trials
                .par_iter()
                .map(|e| load_trial(manifest, e))
                .collect::<neuromotor_core::Result<Vec<_>>>()?;
            trials.sort_by_key(|t| t.key());
            self.trials = Some(trials);
        }
        Ok(())
    }

    fn ensure_envelopes(&mut self) -> Result<()> {
        if self.envelopes.is_some() {
            return Ok(());
        }
        let loaded = self
            .keys()
            .into_par_iter()
            .map(|key| {
                let path = self.out(&format!("dsp/{key}.proc.csv"));
                if !path.exists() {
                    return Err(CacheMissing { stage: Stage::Dsp, path }.into());
                }
                let env = EmgRecord::new(read_series_csv(&path, EmgRecord::LABELS)?)?;
                Ok((key, env))
            })
            .collect::<Result<Vec<_>>>()?;
        self.envelopes = Some(loaded.into_iter().collect());
        Ok(())
    }

    fn ensure_offsets(&mut self) -> Result<()> {
        if self.offsets.is_none() {
            self.offsets = Some(read_json(&self.out("sync/offsets.json"), Stage::Sync)?);
        }
        Ok(())
    }

    fn ensure_subtasks(&mut self) -> Result<()> {
        if self.subtasks.is_some() {
            return Ok(());
        }
        let mut out = BTreeMap::new();
        for key in self.keys().into_iter().filter(|k| k.task.is_single_axis()) {
            let rows: Vec<SubtaskRow> = read_csv_rows(&self.out(&format!("sync/subtasks/{key}.csv")), Stage::Sync)?;
            let (ts, labels) = rows.into_iter().map(|r| (r.t, r.label)).unzip();
            out.insert(key, SubtaskSequence::new(ts, labels)?);
        }
        self.subtasks = Some(out);
        Ok(())
    }

    fn ensure_reports(&mut self) -> Result<()> {
        if self.reports.is_none() {
            self.reports = Some(read_json(&self.out("metrics/reports.json"), Stage::Metrics)?);
        }
        if self.aggregate.is_none() {
            self.aggregate = Some(read_json(&self.out("metrics/aggregate.json"), Stage::Metrics)?);
        }
        Ok(())
    }

    fn ensure_hmm(&mut self) -> Result<()> {
        if self.hmm.is_none() {
            self.hmm = Some(read_json(&self.out("hmm/reports.json"), Stage::Hmm)?);
        }
        Ok(())
    }

    fn ensure_osc(&mut self) -> Result<()> {
        if self.osc.is_none() {
            self.osc = Some(read_csv_rows(&self.out("synergy/osc.csv"), Stage::Synergy)?);
        }
        Ok(())
    }

    fn offsets_for(&self, participant: &str, condition: PoseCondition) -> Result<&OffsetEstimate> {
        self.offsets
            .as_ref()
            .and_then(|rows| {
                rows.iter()
                    .find(|r| r.participant == participant && r.condition == condition)
            })
            .map(|r| &r.estimate)
            .ok_or_else(|| anyhow::anyhow!("no offset estimate for participant {participant}, condition {condition}"))
    }

    fn run_stage(&mut self, stage: Stage, w: &mut StageWriter) -> Result<()> {
        match stage {
            Stage::Dsp => self.dsp(w),
            Stage::Sync => self.sync(w),
            Stage::Metrics => self.metrics(w),
            Stage::Synergy => self.synergy(w),
            Stage::Hmm => self.hmm(w),
            Stage::Stats => self.stats(w),
            Stage::PlotData => self.plot_data(w),
        }
    }

    fn dsp(&mut self, w: &mut StageWriter) -> Result<()> {
        self.ensure_trials()?;
        let filter: FilterSpec = self.cfg.filter;
        let envelope = self.cfg.envelope;
        let trials = self.trials.as_ref().expect("loaded");
        let trimmed = trials
            .par_iter()
            .map(|t| {
                let env = dsp::emg_envelope(&t.emg, &filter, &envelope)?;
                let (start, end) = t.game_window();
                EmgRecord::new(dsp::trim_to_game_window(env.series(), start, end)?)
            })
            .collect::<neuromotor_core::Result<Vec<_>>>()
            .context("envelope extraction")?;

        let mut by_participant: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, t) in trials.iter().enumerate() {
            by_participant.entry(&t.participant.id).or_default().push(i);
        }
        let mut envelopes = BTreeMap::new();
        let mut maxima_rows = Vec::new();
        for (pid, idx) in by_participant {
            let records: Vec<EmgRecord> = idx.iter().map(|&i| trimmed[i].clone()).collect();
            let (normalized, maxima) = dsp::normalize_per_muscle(&records)?;
            for (&i, env) in idx.iter().zip(normalized) {
                envelopes.insert(trials[i].key(), env);
            }
            let mut row = vec![pid.to_string()];
            row.extend(maxima.iter().map(f64::to_string));
            maxima_rows.push(row);
        }
        for (key, env) in &envelopes {
            w.series(&format!("dsp/{key}.proc.csv"), env.series())?;
        }
        let mut header = vec!["participant"];
        header.extend(EMG_LABELS);
        w.csv("dsp/normalization.csv", &header, maxima_rows)?;
        self.envelopes = Some(envelopes);
        Ok(())
    }

    fn sync(&mut self, w: &mut StageWriter) -> Result<()> {
        self.ensure_trials()?;
        let trials = self.trials.as_ref().expect("loaded");
        let threshold = self.cfg.align_threshold_s;

        let mut groups: BTreeMap<(String, PoseCondition), Vec<&Trial>> = BTreeMap::new();
        for t in trials {
            groups.entry((t.participant.id.clone(), t.condition)).or_default().push(t);
        }
        let mut offsets = Vec::new();
        for ((participant, condition), group) in groups {
            if !group.iter().any(|t| t.task.id.is_force_task()) {
                continue;
            }
            let estimate = estimate_offsets(group.iter().copied(), self.manifest.scaling_factor, threshold)
                .with_context(|| format!("offsets for participant {participant}, condition {condition}"))?;
            for (axis, &n) in ["fx", "fy", "fz"].iter().zip(&estimate.samples) {
                if n == 0 {
                    w.note(format!(
                        "participant {participant}, condition {condition}: {axis} is never productive; offset left at 0"
                    ));
                }
            }
            offsets.push(OffsetRow {
                participant,
                condition,
                estimate,
            });
        }

        let alignment = trials
            .par_iter()
            .map(|t| {
                let a = align_nearest(t.game.timestamps(), t.wrench.timestamps(), threshold)?;
                Ok(vec![
                    t.key().to_string(),
                    a.game_len().to_string(),
                    a.pairs.len().to_string(),
                    a.coverage().to_string(),
                    a.max_gap().to_string(),
                ])
            })
            .collect::<neuromotor_core::Result<Vec<_>>>()?;

        let eps = SubtaskThreshold::PeakFraction(self.cfg.epsilon_fraction);
        let subtasks: BTreeMap<TrialKey, SubtaskSequence> = trials
            .par_iter()
            .filter(|t| t.task.id.is_single_axis())
            .map(|t| Ok((t.key(), derive_subtasks(&t.task, &t.game, eps)?)))
            .collect::<neuromotor_core::Result<Vec<_>>>()?
            .into_iter()
            .collect();

        w.json("sync/offsets.json", &offsets)?;
        w.csv(
            "sync/offsets.csv",
            &[
                "participant", "condition", "fx", "fy", "fz", "residual_rms_fx", "residual_rms_fy", "residual_rms_fz",
                "samples_fx", "samples_fy", "samples_fz",
            ],
            offsets.iter().map(|r| {
                let e = &r.estimate;
                let mut row = vec![r.participant.clone(), r.condition.to_string()];
                row.extend(e.offsets.iter().map(f64::to_string));
                row.extend(e.residual_rms.iter().map(f64::to_string));
                row.extend(e.samples.iter().map(usize::to_string));
                row
            }),
        )?;
        w.csv(
            "sync/alignment.csv",
            &["key", "game_samples", "matched", "coverage", "max_gap_s"],
            alignment,
        )?;
        for (key, s) in &subtasks {
            w.csv(
                &format!("sync/subtasks/{key}.csv"),
                &["t", "label"],
                s.timestamps.iter().zip(&s.labels).map(|(t, l)| [t.to_string(), l.to_string()]),
            )?;
        }
        self.offsets = Some(offsets);
        self.subtasks = Some(subtasks);
        Ok(())
    }

    fn corrected_wrench(&self, t: &Trial) -> Result<WrenchRecord> {
        let offsets = self.offsets_for(&t.participant.id, t.condition)?;
        let (start, end) = t.game_window();
        let trimmed = WrenchRecord::new(dsp::trim_to_game_window(t.wrench.series(), start, end)?)?;
        Ok(dsp::baseline_correct_forces(&trimmed, offsets.offsets)?)
    }

    fn metrics(&mut self, w: &mut StageWriter) -> Result<()> {
        self.ensure_trials()?;
        self.ensure_offsets()?;
        let trials = self.trials.as_ref().expect("loaded");
        let this = &*self;
        let reports = trials
            .par_iter()
            .filter(|t| t.task.id.is_force_task())
            .map(|t| {
                let corrected = this.corrected_wrench(t)?;
                let offsets = this.offsets_for(&t.participant.id, t.condition)?;
                let ideal = ideal_force(&t.task, &t.game, t.scaling_factor, offsets)?;
                let alignment = align_nearest(t.game.timestamps(), corrected.timestamps(), this.cfg.align_threshold_s)?;
                trial_metrics(
                    t.key(),
                    t.participant.cohort,
                    &t.task,
                    &corrected,
                    &ideal,
                    &alignment,
                    this.cfg.rmse_mode,
                )
                .with_context(|| format!("metrics for {}", t.key()))
            })
            .collect::<Result<Vec<_>>>()?;

        let force_tasks = TaskId::ALL.iter().filter(|t| t.is_force_task()).count();
        let mut per_group: BTreeMap<(String, PoseCondition), usize> = BTreeMap::new();
        for r in &reports {
            *per_group.entry((r.key.participant.clone(), r.key.condition)).or_default() += 1;
        }
        let complete: Vec<ForceMetricsReport> = reports
            .iter()
            .filter(|r| per_group[&(r.key.participant.clone(), r.key.condition)] == force_tasks)
            .cloned()
            .collect();
        for ((p, c), n) in &per_group {
            if *n != force_tasks {
                w.note(format!(
                    "participant {p}, condition {c}: {n} of {force_tasks} force tasks; left out of cohort aggregates"
                ));
            }
        }
        let aggregate = if complete.is_empty() {
            CohortAggregate { participants: vec![] }
        } else {
            aggregate_cohorts(&complete, &self.manifest.participants)?
        };

        w.csv(
            "metrics/trials.csv",
            &["key", "participant", "cohort", "condition", "task", "rmse", "impulse", "rms_average", "peak"],
            reports.iter().map(|r| {
                vec![
                    r.key.to_string(),
                    r.key.participant.clone(),
                    r.cohort.to_string(),
                    r.key.condition.to_string(),
                    r.key.task.to_string(),
                    r.rmse.to_string(),
                    r.impulse.to_string(),
                    r.rms_average.to_string(),
                    r.peak.to_string(),
                ]
            }),
        )?;
        w.csv(
            "metrics/nonproductive.csv",
            &["key", "axis", "rms_average", "peak", "impulse", "variance", "rectified_variance"],
            reports.iter().flat_map(|r| {
                r.nonproductive.iter().map(move |a| {
                    vec![
                        r.key.to_string(),
                        a.axis.label().to_string(),
                        a.rms_average.to_string(),
                        a.peak.to_string(),
                        a.impulse.to_string(),
                        a.variance.to_string(),
                        a.rectified_variance.to_string(),
                    ]
                })
            }),
        )?;
        w.json("metrics/reports.json", &reports)?;
        w.json("metrics/aggregate.json", &aggregate)?;
        w.csv(
            "metrics/participants.csv",
            &["participant", "cohort", "condition", "metric", "mean", "sd"],
            aggregate.participants.iter().flat_map(|p| {
                p.summary.iter().map(move |(m, s)| {
                    vec![
                        p.participant.clone(),
                        p.cohort.to_string(),
                        p.condition.to_string(),
                        m.as_str().to_string(),
                        s.mean.to_string(),
                        s.sd.to_string(),
                    ]
                })
            }),
        )?;
        let rows = productive_box_rows(&aggregate)?;
        w.rows("metrics/box_stats.csv", &rows)?;
        self.reports = Some(reports);
        self.aggregate = Some(aggregate);
        Ok(())
    }

    fn synergy(&mut self, w: &mut StageWriter) -> Result<()> {
        self.ensure_envelopes()?;
        let envelopes = self.envelopes.as_ref().expect("loaded");
        let sc = &self.cfg.synergy;
        let seed = self.cfg.seed;

        let per_trial = envelopes
            .par_iter()
            .map(|(key, env)| {
                let e = EmgMatrix::from_records(&[env], sc.decimate)?;
                let count = optimal_synergy_count(&e, &seeds(seed, "nmf", &key.to_string(), sc.restarts), &sc.nmf, &sc.osc)
                    .with_context(|| format!("synergies for {key}"))?;
                Ok((key, env, count))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut osc = Vec::new();
        let mut vaf_rows = Vec::new();
        for (key, env, count) in &per_trial {
            let k = count.k_star;
            osc.push(OscRow {
                key: key.to_string(),
                participant: key.participant.clone(),
                cohort: self.cohort(&key.participant),
                condition: key.condition,
                task: key.task,
                k_star: k,
                saturated: count.saturated,
                vaf: count.curve.vaf[k - 1],
            });
            for (i, (v, per)) in count.curve.vaf.iter().zip(&count.curve.per_channel).enumerate() {
                let mut row = vec![key.to_string(), (i + 1).to_string(), v.to_string()];
                row.extend(per.iter().map(f64::to_string));
                vaf_rows.push(row);
            }
            let d = count.optimal();
            w.csv(&format!("synergy/factors/{key}_W.csv"), &factor_header("muscle", k), w_rows(d))?;
            let ts: Vec<f64> = env.timestamps().iter().step_by(sc.decimate.max(1)).copied().collect();
            w.csv(
                &format!("synergy/factors/{key}_H.csv"),
                &factor_header("t", k),
                ts.iter().enumerate().map(|(c, t)| {
                    let mut row = vec![t.to_string()];
                    row.extend((0..k).map(|j| d.h[[j, c]].to_string()));
                    row
                }),
            )?;
        }
        w.rows("synergy/osc.csv", &osc)?;
        let mut vaf_header = vec!["key", "k", "vaf"];
        vaf_header.extend(EMG_LABELS);
        w.csv("synergy/vaf.csv", &vaf_header, vaf_rows)?;

        let mut by_participant: BTreeMap<String, Vec<&EmgRecord>> = BTreeMap::new();
        for (key, env) in envelopes {
            by_participant.entry(key.participant.clone()).or_default().push(env);
        }
        let participant_fits = by_participant
            .par_iter()
            .map(|(pid, records)| {
                let e = EmgMatrix::from_records(records, sc.decimate)?;
                let count = optimal_synergy_count(&e, &seeds(seed, "nmf-participant", pid, sc.restarts), &sc.nmf, &sc.osc)
                    .with_context(|| format!("synergies for participant {pid}"))?;
                Ok((pid.clone(), count))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut optimal: BTreeMap<String, SynergyDecomposition> = BTreeMap::new();
        let mut participant_rows = Vec::new();
        for (pid, count) in participant_fits {
            let k = count.k_star;
            participant_rows.push(vec![
                pid.clone(),
                self.cohort(&pid).to_string(),
                k.to_string(),
                count.saturated.to_string(),
                count.curve.vaf[k - 1].to_string(),
            ]);
            let d = count.decompositions[k - 1].clone();
            w.csv(&format!("synergy/participants/{pid}_W.csv"), &factor_header("muscle", k), w_rows(&d))?;
            optimal.insert(pid, d);
        }
        w.csv(
            "synergy/participants.csv",
            &["participant", "cohort", "k_star", "saturated", "vaf"],
            participant_rows,
        )?;

        let assignments = self.cluster(&optimal, &[])?;
        w.json("synergy/clusters.json", &assignments)?;
        let this = &*self;
        w.csv(
            "synergy/cluster_labels.csv",
            &["procedure", "clusters", "participant", "cohort", "label"],
            assignments.iter().flat_map(|a| {
                a.participant_labels.iter().map(move |(p, l)| {
                    vec![
                        a.procedure.to_string(),
                        a.clusters.to_string(),
                        p.clone(),
                        this.cohort(p).to_string(),
                        l.to_string(),
                    ]
                })
            }),
        )?;
        let mut box_rows = Vec::new();
        for condition in conditions_of(osc.iter().map(|r| r.condition)) {
            for cohort in COHORTS {
                let ks: Vec<f64> = osc
                    .iter()
                    .filter(|r| r.cohort == cohort && r.condition == condition)
                    .map(|r| r.k_star as f64)
                    .collect();
                if !ks.is_empty() {
                    box_rows.push(BoxRow::new("k_star", condition, cohort, box_stats(&ks)?));
                }
            }
        }
        w.rows("synergy/osc_box.csv", &box_rows)?;
        self.osc = Some(osc);
        if self.cfg.synergy.segments != SegmentMode::Off {
            self.segment_synergy(w)?;
        }
        Ok(())
    }

    /// Runs every configured clustering procedure; `tag` separates the
    /// k-means seeds of independent analyses.
    fn cluster(&self, optimal: &BTreeMap<String, SynergyDecomposition>, tag: &[&str]) -> Result<Vec<ClusterAssignment>> {
        let sc = &self.cfg.synergy;
        let mut assignments = Vec::new();
        for &id in &sc.procedures {
            let procedure = match id {
                1 => Procedure::Individual,
                2 => Procedure::TopN(sc.top_n),
                3 => Procedure::Concatenated,
                other => anyhow::bail!("unknown clustering procedure {other}"),
            };
            let id = id.to_string();
            let mut parts = vec!["kmeans", id.as_str()];
            parts.extend(tag);
            let opts = KMeansOptions {
                restarts: sc.kmeans_restarts,
                base_seed: derive_seed(self.cfg.seed, &parts),
                max_iter: sc.kmeans_max_iter,
            };
            assignments.extend(cluster_procedure(procedure, optimal, sc.clusters.0..=sc.clusters.1, &opts)?);
        }
        Ok(assignments)
    }

    /// Synergy counts and clustering repeated on each prescribed direction of
    /// the single-axis trials.
    fn segment_synergy(&mut self, w: &mut StageWriter) -> Result<()> {
        self.ensure_subtasks()?;
        let envelopes = self.envelopes.as_ref().expect("loaded");
        let subtasks = self.subtasks.as_ref().expect("loaded");
        let sc = &self.cfg.synergy;
        let seed = self.cfg.seed;
        let step = sc.decimate.max(1);
        let min_samples = sc.osc.max_k;

        let mut segments = Vec::new();
        for (key, sub) in subtasks {
            let env = envelopes.get(key).ok_or_else(|| CacheMissing {
                stage: Stage::Dsp,
                path: self.out(&format!("dsp/{key}.proc.csv")),
            })?;
            for seg in direction_segments(env, sub, sc.segments)? {
                segments.push((key, seg));
            }
        }
        let (usable, short): (Vec<_>, Vec<_>) = segments
            .into_iter()
            .partition(|(_, seg)| seg.record.len().div_ceil(step) >= min_samples);
        if !short.is_empty() {
            w.note(format!(
                "{} direction segments shorter than {min_samples} samples after decimation were not factorized",
                short.len()
            ));
        }

        let fits = usable
            .par_iter()
            .map(|(key, seg)| {
                let id = format!("{key}/{}/{}", seg.direction, seg.repetition.map_or("all".into(), |r| r.to_string()));
                let e = EmgMatrix::from_records(&[&seg.record], step)?;
                let count = optimal_synergy_count(&e, &seeds(seed, "nmf-segment", &id, sc.restarts), &sc.nmf, &sc.osc)
                    .with_context(|| format!("synergies for segment {id}"))?;
                Ok((e.samples(), count))
            })
            .collect::<Result<Vec<_>>>()?;
        let rows: Vec<SegmentOscRow> = usable
            .iter()
            .zip(&fits)
            .map(|((key, seg), (samples, count))| SegmentOscRow {
                key: key.to_string(),
                participant: key.participant.clone(),
                cohort: self.cohort(&key.participant),
                condition: key.condition,
                task: key.task,
                direction: seg.direction,
                repetition: seg.repetition,
                samples: *samples,
                k_star: count.k_star,
                saturated: count.saturated,
                vaf: count.curve.vaf[count.k_star - 1],
            })
            .collect();
        w.rows("synergy/segments/osc.csv", &rows)?;

        // Participant-level decompositions per task and direction, pooled over
        // conditions and repetitions, feed the clustering.
        let mut pooled: BTreeMap<(TaskId, u8), BTreeMap<String, Vec<&EmgRecord>>> = BTreeMap::new();
        for (key, seg) in &usable {
            pooled
                .entry((key.task, seg.direction))
                .or_default()
                .entry(key.participant.clone())
                .or_default()
                .push(&seg.record);
        }
        let jobs: Vec<(TaskId, u8, &String, &Vec<&EmgRecord>)> = pooled
            .iter()
            .flat_map(|(&(task, d), by_pid)| by_pid.iter().map(move |(pid, recs)| (task, d, pid, recs)))
            .collect();
        let participant_fits = jobs
            .par_iter()
            .map(|&(task, d, pid, recs)| {
                let id = format!("{pid}/{task}/{d}");
                let e = EmgMatrix::from_records(recs, step)?;
                let count = optimal_synergy_count(&e, &seeds(seed, "nmf-participant-segment", &id, sc.restarts), &sc.nmf, &sc.osc)
                    .with_context(|| format!("synergies for {id}"))?;
                Ok(((task, d), pid.clone(), count.optimal().clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut optimal: BTreeMap<(TaskId, u8), BTreeMap<String, SynergyDecomposition>> = BTreeMap::new();
        for (group, pid, d) in participant_fits {
            optimal.entry(group).or_default().insert(pid, d);
        }

        let mut clusters = Vec::new();
        let mut label_rows = Vec::new();
        for ((task, direction), decomps) in &optimal {
            let (t, d) = (task.to_string(), direction.to_string());
            let assignments = self.cluster(decomps, &[&t, &d])?;
            for a in &assignments {
                for (p, l) in &a.participant_labels {
                    label_rows.push(vec![
                        t.clone(),
                        d.clone(),
                        a.procedure.to_string(),
                        a.clusters.to_string(),
                        p.clone(),
                        self.cohort(p).to_string(),
                        l.to_string(),
                    ]);
                }
            }
            clusters.push(SegmentClusters {
                task: *task,
                direction: *direction,
                assignments,
            });
        }
        w.json("synergy/segments/clusters.json", &clusters)?;
        w.csv(
            "synergy/segments/cluster_labels.csv",
            &["task", "direction", "procedure", "clusters", "participant", "cohort", "label"],
            label_rows,
        )?;
        Ok(())
    }

    fn hmm(&mut self, w: &mut StageWriter) -> Result<()> {
        self.ensure_envelopes()?;
        self.ensure_subtasks()?;
        let envelopes = self.envelopes.as_ref().expect("loaded");
        let subtasks = self.subtasks.as_ref().expect("loaded");
        let hc = &self.cfg.hmm;
        let seed = self.cfg.seed;
        let jobs: Vec<(&TrialKey, &EmgRecord, &SubtaskSequence)> = envelopes
            .iter()
            .filter_map(|(k, env)| subtasks.get(k).map(|s| (k, env, s)))
            .collect();
        let outcomes: Vec<(TrialKey, HmmTrialOutcome)> = jobs
            .par_iter()
            .map(|&(key, env, s)| {
                let base = derive_seed(seed, &["hmm", &key.to_string()]);
                let mut o = multi_restart_error(&key.task.spec(), env, s, &hc.options, hc.restarts, base, hc.decimate)
                    .with_context(|| format!("HMM for {key}"))?;
                o.report.key = Some(key.clone());
                Ok((key.clone(), o))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut summary = Vec::new();
        let mut restarts = Vec::new();
        for (key, o) in &outcomes {
            let r = &o.report;
            summary.push(vec![
                key.to_string(),
                key.participant.clone(),
                self.cohort(&key.participant).to_string(),
                key.condition.to_string(),
                key.task.to_string(),
                r.restarts.to_string(),
                r.mean.to_string(),
                r.variance.to_string(),
                r.scored_samples.to_string(),
            ]);
            for (i, path) in o.paths.iter().enumerate() {
                restarts.push(vec![
                    key.to_string(),
                    i.to_string(),
                    r.seeds[i].to_string(),
                    r.errors[i].to_string(),
                    r.iterations[i].to_string(),
                    path.log_probability.to_string(),
                ]);
            }
            let s = &subtasks[key];
            let best = best_restart(o);
            let mut header = vec!["t".to_string(), "target".to_string(), "best".to_string()];
            header.extend((0..o.paths.len()).map(|i| format!("r{i}")));
            let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
            w.csv(
                &format!("hmm/paths/{key}.csv"),
                &header_refs,
                o.timestamps.iter().enumerate().map(|(j, &t)| {
                    let mut row = vec![
                        t.to_string(),
                        nearest_label(&s.timestamps, &s.labels, t).to_string(),
                        o.paths[best].states[j].to_string(),
                    ];
                    row.extend(o.paths.iter().map(|p| p.states[j].to_string()));
                    row
                }),
            )?;
        }
        let reports: Vec<HmmErrorReport> = outcomes.into_iter().map(|(_, o)| o.report).collect();
        w.json("hmm/reports.json", &reports)?;
        w.csv(
            "hmm/summary.csv",
            &["key", "participant", "cohort", "condition", "task", "restarts", "mean", "variance", "scored_samples"],
            summary,
        )?;
        w.csv(
            "hmm/restarts.csv",
            &["key", "restart", "seed", "error", "iterations", "log_probability"],
            restarts,
        )?;
        let rows = self.hmm_box_rows(&reports)?;
        w.rows("hmm/box_stats.csv", &rows)?;
        self.hmm = Some(reports);
        Ok(())
    }

    fn hmm_box_rows<'a>(&self, reports: &[HmmErrorReport]) -> Result<Vec<BoxRow<'a>>> {
        let mut rows = Vec::new();
        let keyed: Vec<(&TrialKey, f64)> = reports.iter().filter_map(|r| r.key.as_ref().map(|k| (k, r.mean))).collect();
        for condition in conditions_of(keyed.iter().map(|(k, _)| k.condition)) {
            for cohort in COHORTS {
                let v: Vec<f64> = keyed
                    .iter()
                    .filter(|(k, _)| k.condition == condition && self.cohort(&k.participant) == cohort)
                    .map(|(_, m)| *m)
                    .collect();
                if !v.is_empty() {
                    rows.push(BoxRow::new("subtask_error", condition, cohort, box_stats(&v)?));
                }
            }
        }
        Ok(rows)
    }

    fn stats(&mut self, w: &mut StageWriter) -> Result<()> {
        self.ensure_reports()?;
        let aggregate = self.aggregate.as_ref().expect("loaded");
        let mut usable = CohortAggregate { participants: vec![] };
        for c in aggregate.conditions() {
            let has = |cohort| aggregate.participants.iter().any(|p| p.condition == c && p.cohort == cohort);
            if has(Cohort::Healthy) && has(Cohort::PostStroke) {
                usable
                    .participants
                    .extend(aggregate.participants.iter().filter(|p| p.condition == c).cloned());
            } else {
                w.note(format!("condition {c}: both cohorts are needed for a comparison"));
            }
        }
        let comparisons = if usable.participants.is_empty() {
            vec![]
        } else {
            compare_cohorts(&usable)?
        };
        w.json("stats/comparisons.json", &comparisons)?;
        w.csv(
            "stats/comparisons.csv",
            &[
                "metric", "condition", "n_post_stroke", "n_healthy", "u", "p_two_sided", "method", "r",
                "post_stroke_mean", "post_stroke_ci_low", "post_stroke_ci_high", "healthy_mean", "healthy_ci_low",
                "healthy_ci_high",
            ],
            comparisons.iter().map(|c| {
                let ci = |m: &Option<neuromotor_core::stats::MeanCI>| {
                    [
                        fmt_opt(m.as_ref().map(|x| x.mean)),
                        fmt_opt(m.as_ref().map(|x| x.lower)),
                        fmt_opt(m.as_ref().map(|x| x.upper)),
                    ]
                };
                let mut row = vec![
                    c.metric.as_str().to_string(),
                    c.condition.to_string(),
                    c.n_post_stroke.to_string(),
                    c.n_healthy.to_string(),
                    c.u.to_string(),
                    c.p_two_sided.to_string(),
                    serde_json::to_value(c.method)
                        .ok()
                        .and_then(|v| v.as_str().map(str::to_string))
                        .unwrap_or_default(),
                    c.r.to_string(),
                ];
                row.extend(ci(&c.post_stroke));
                row.extend(ci(&c.healthy));
                row
            }),
        )?;

        if self.hmm.is_none() && !self.out("hmm/reports.json").exists() {
            w.note("no HMM results; subtask-error comparison skipped");
            return Ok(());
        }
        self.ensure_hmm()?;
        let reports = self.hmm.as_ref().expect("loaded");
        let mut per_participant: BTreeMap<(PoseCondition, Cohort, String), Vec<f64>> = BTreeMap::new();
        for r in reports {
            if let Some(k) = &r.key {
                per_participant
                    .entry((k.condition, self.cohort(&k.participant), k.participant.clone()))
                    .or_default()
                    .push(r.mean);
            }
        }
        let mut rows = Vec::new();
        for condition in conditions_of(per_participant.keys().map(|k| k.0)) {
            let means = |cohort: Cohort| -> Vec<f64> {
                per_participant
                    .iter()
                    .filter(|(k, _)| k.0 == condition && k.1 == cohort)
                    .map(|(_, v)| v.iter().sum::<f64>() / v.len() as f64)
                    .collect()
            };
            let (a, b) = (means(Cohort::PostStroke), means(Cohort::Healthy));
            if a.is_empty() || b.is_empty() {
                w.note(format!("condition {condition}: both cohorts are needed for the subtask-error comparison"));
                continue;
            }
            let mw = mann_whitney(&a, &b)?;
            rows.push(serde_json::json!({
                "metric": "subtask_error",
                "condition": condition,
                "n_post_stroke": a.len(),
                "n_healthy": b.len(),
                "u": mw.u,
                "p_two_sided": mw.p_two_sided,
                "method": mw.method,
                "r": rank_biserial(mw.u, mw.n1, mw.n2),
                "post_stroke": mean_ci95(&a).ok(),
                "healthy": mean_ci95(&b).ok(),
            }));
        }
        w.json("stats/subtask_error.json", &rows)?;
        Ok(())
    }

    fn plot_data(&mut self, w: &mut StageWriter) -> Result<()> {
        self.ensure_reports()?;
        let aggregate = self.aggregate.as_ref().expect("loaded");
        w.rows("plot_data/fig5_productive_box.csv", &productive_box_rows(aggregate)?)?;

        let reports = self.reports.as_ref().expect("loaded");
        let mut np: BTreeMap<(String, PoseCondition, &'static str), Vec<f64>> = BTreeMap::new();
        for r in reports {
            for a in &r.nonproductive {
                np.entry((r.key.participant.clone(), r.key.condition, a.axis.label()))
                    .or_default()
                    .push(a.rms_average);
            }
        }
        let mut np_rows = Vec::new();
        for axis in ["fx", "fy", "fz"] {
            for condition in conditions_of(np.keys().map(|k| k.1)) {
                for cohort in COHORTS {
                    let v: Vec<f64> = np
                        .iter()
                        .filter(|(k, _)| k.2 == axis && k.1 == condition && self.cohort(&k.0) == cohort)
                        .map(|(_, v)| v.iter().sum::<f64>() / v.len() as f64)
                        .collect();
                    if !v.is_empty() {
                        np_rows.push(BoxRow::new(axis, condition, cohort, box_stats(&v)?));
                    }
                }
            }
        }
        w.rows("plot_data/fig6_nonproductive_box.csv", &np_rows)?;

        if self.osc.is_some() || self.out("synergy/osc.csv").exists() {
            self.ensure_osc()?;
            let mut counts: BTreeMap<(Cohort, PoseCondition, usize), usize> = BTreeMap::new();
            for r in self.osc.as_ref().expect("loaded") {
                *counts.entry((r.cohort, r.condition, r.k_star)).or_default() += 1;
            }
            w.csv(
                "plot_data/fig7_osc_counts.csv",
                &["cohort", "condition", "k_star", "trials"],
                counts
                    .iter()
                    .map(|((c, p, k), n)| [c.to_string(), p.to_string(), k.to_string(), n.to_string()]),
            )?;
        } else {
            w.note("no synergy results; OSC table skipped");
        }

        if self.hmm.is_some() || self.out("hmm/reports.json").exists() {
            self.ensure_hmm()?;
            let hmm = self.hmm.clone().expect("loaded");
            let rows = self.hmm_box_rows(&hmm)?;
            w.rows("plot_data/fig8_subtask_error_box.csv", &rows)?;
            for key in hmm.iter().filter_map(|r| r.key.as_ref()) {
                let src = self.out(&format!("hmm/paths/{key}.csv"));
                let paths: Vec<ViterbiRow> = read_csv_rows(&src, Stage::Hmm)?;
                w.csv(
                    &format!("plot_data/viterbi/{key}.csv"),
                    &["t", "target_subtask", "viterbi_state"],
                    paths.iter().map(|r| [r.t.to_string(), r.target.to_string(), r.best.to_string()]),
                )?;
            }
        } else {
            w.note("no HMM results; subtask-error tables skipped");
        }

        self.ensure_trials()?;
        self.ensure_offsets()?;
        let trials = self.trials.as_ref().expect("loaded");
        let this = &*self;
        let traces = trials
            .par_iter()
            .filter(|t| t.task.id.is_force_task())
            .map(|t| this.trace_rows(t).map(|rows| (t.key(), t.task.input_channels(), rows)))
            .collect::<Result<Vec<_>>>()?;
        for (key, axes, rows) in traces {
            let mut header = vec!["t".to_string()];
            for a in &axes {
                header.push(format!("ideal_{}", a.label()));
                header.push(format!("measured_{}", a.label()));
            }
            let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
            w.csv(&format!("plot_data/traces/{key}.csv"), &header_refs, rows)?;
        }
        Ok(())
    }

    /// Ideal and measured productive force (offsets removed) at each game
    /// sample; the measured value is blank where no sensor sample aligns.
    fn trace_rows(&self, t: &Trial) -> Result<Vec<Vec<String>>> {
        let corrected = self.corrected_wrench(t)?;
        let offsets = self.offsets_for(&t.participant.id, t.condition)?;
        let ideal = ideal_force(&t.task, &t.game, t.scaling_factor, offsets)?;
        let alignment = align_nearest(t.game.timestamps(), corrected.timestamps(), self.cfg.align_threshold_s)?;
        let mut matched = vec![None; t.game.len()];
        for p in &alignment.pairs {
            matched[p.game_index] = Some(p.sensor_index);
        }
        let ideal_corrected: Vec<Vec<f64>> = (0..ideal.axes.len()).map(|i| ideal.corrected(i).collect()).collect();
        Ok(t.game
            .timestamps()
            .iter()
            .enumerate()
            .map(|(g, time)| {
                let mut row = vec![time.to_string()];
                for (i, &axis) in ideal.axes.iter().enumerate() {
                    row.push(ideal_corrected[i][g].to_string());
                    row.push(fmt_opt(matched[g].map(|s| corrected.axis(axis)[s])));
                }
                row
            })
            .collect())
    }
}

#[derive(Debug, Deserialize)]
struct ViterbiRow {
    t: f64,
    target: u8,
    best: u8,
}

/// Restart whose Viterbi path is most probable under its own model; the
/// lowest index wins ties.
fn best_restart(o: &HmmTrialOutcome) -> usize {
    o.paths
        .iter()
        .enumerate()
        .fold(0, |best, (i, p)| if p.log_probability > o.paths[best].log_probability { i } else { best })
}

fn factor_header(first: &str, k: usize) -> Vec<String> {
    std::iter::once(first.to_string()).chain((1..=k).map(|j| format!("s{j}"))).collect()
}

fn w_rows(d: &SynergyDecomposition) -> Vec<Vec<String>> {
    EMG_LABELS
        .iter()
        .enumerate()
        .map(|(m, label)| {
            let mut row = vec![label.to_string()];
            row.extend((0..d.rank).map(|j| d.w[[m, j]].to_string()));
            row
        })
        .collect()
}

fn conditions_of(it: impl Iterator<Item = PoseCondition>) -> Vec<PoseCondition> {
    let mut v: Vec<PoseCondition> = it.collect();
    v.sort();
    v.dedup();
    v
}

fn productive_box_rows(aggregate: &CohortAggregate) -> Result<Vec<BoxRow<'static>>> {
    let mut rows = Vec::new();
    for metric in ForceMetric::ALL {
        for condition in aggregate.conditions() {
            for cohort in COHORTS {
                let v = aggregate.means(metric, cohort, condition);
                if !v.is_empty() {
                    rows.push(BoxRow::new(metric.as_str(), condition, cohort, box_stats(&v)?));
                }
            }
        }
    }
    Ok(rows)
}

/// Runs the configured stages in order and returns the run index. A failing
/// stage is recorded in the index before the error is returned.
pub fn run_pipeline(config: &RunConfig) -> Result<RunIndex> {
    let manifest = load_manifest(&config.manifest)?;
    let mut cfg = config.clone();
    cfg.filter.sample_rate_hz = manifest.sample_rates.emg_hz;
    let root = cfg.out.clone();
    fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;

    let config_path = root.join(CONFIG_FILE);
    write_json_file(&config_path, &cfg)?;
    let config_bytes = fs::read(&config_path)?;
    let config_sha = sha256_hex(&config_bytes);
    let mut index = RunIndex::load_or_default(&root);
    index.config = Some(FileRecord {
        sha256: config_sha.clone(),
        bytes: config_bytes.len() as u64,
    });
    // Stages removed from the run directory by hand are dropped from the index.
    index.stages.retain(|_, rec| rec.files.keys().all(|f| root.join(f).exists()));

    let mut run = Run {
        cfg,
        manifest,
        trials: None,
        envelopes: None,
        offsets: None,
        subtasks: None,
        reports: None,
        aggregate: None,
        hmm: None,
        osc: None,
    };

    if run.cfg.runs(Stage::Dsp) {
        let report = validate_dataset(&run.manifest);
        let mut w = StageWriter::new(&root);
        w.json("validation.json", &report)?;
        let passed = report.passed;
        let error = (!passed).then(|| format!("dataset validation failed with {} errors", report.error_count()));
        index.stages.insert("validate".into(), w.finish(&config_sha, error.clone()));
        index.write(&root)?;
        if let Some(e) = error {
            anyhow::bail!(e);
        }
    }

    let stages: Vec<Stage> = Stage::ALL.into_iter().filter(|s| run.cfg.runs(*s)).collect();
    for stage in stages {
        let dir = root.join(stage.dir());
        if dir.exists() {
            fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
        log::info!("stage {stage}");
        let mut w = StageWriter::new(&root);
        let result = run.run_stage(stage, &mut w);
        let error = result.as_ref().err().map(|e| format!("{e:#}"));
        index.stages.insert(stage.as_str().into(), w.finish(&config_sha, error));
        index.write(&root)?;
        result.with_context(|| format!("stage `{stage}` failed"))?;
    }
    Ok(index)
}
