//! Batch pipeline behind the `neuromotor` command.

pub mod config;
pub mod index;
pub mod pipeline;

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use neuromotor_core::hmm::CovarianceKind;
use neuromotor_core::ingest::{load_manifest, validate_dataset};
use neuromotor_core::metrics::RmseMode;
use neuromotor_core::synth::{self, Scenario, SynthSpec};

pub use config::{RunConfig, SegmentMode, Stage};
pub use index::RunIndex;
pub use pipeline::{run_pipeline, CacheMissing};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "neuromotor", version, about = "Neuromotor behavior analysis for rehabilitation-robot trials")]
struct Cli {
    /// Worker threads (defaults to one per core).
    #[arg(long, global = true, env = "NEUROMOTOR_THREADS")]
    threads: Option<usize>,
    /// Log stage progress.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a manifest and every series it references.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
        /// Also write the full report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Generate a synthetic dataset with known ground truth.
    Synth(SynthArgs),
    /// Band-pass, RMS envelope, per-muscle normalization.
    Dsp(StageArgs),
    /// Offsets, alignment coverage and subtask labels.
    Sync(StageArgs),
    /// Productive and non-productive force metrics.
    Metrics(StageArgs),
    /// NMF synergies, optimal synergy counts and clustering.
    Synergy {
        #[command(flatten)]
        stage: StageArgs,
        /// NMF restarts per rank (same as --nmf-restarts).
        #[arg(long)]
        restarts: Option<usize>,
    },
    /// HMM subtask classification error.
    Hmm {
        #[command(flatten)]
        stage: StageArgs,
        #[arg(long)]
        states: Option<usize>,
        /// Independent fits per trial (same as --hmm-restarts).
        #[arg(long)]
        restarts: Option<usize>,
        #[arg(long)]
        max_iter: Option<usize>,
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Cohort comparisons on the aggregated metrics.
    Stats(StageArgs),
    /// Box-plot, OSC, trace and Viterbi tables for plotting.
    PlotData(StageArgs),
    /// Full pipeline.
    Analyze {
        #[command(flatten)]
        stage: StageArgs,
        /// Comma-separated subset of stages to run.
        #[arg(long, value_delimiter = ',')]
        stages: Option<Vec<Stage>>,
    },
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value = "cohort")]
    scenario: Scenario,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Game duration per trial in seconds.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    healthy: Option<usize>,
    #[arg(long)]
    post_stroke: Option<usize>,
}

fn parse_rmse_mode(s: &str) -> std::result::Result<RmseMode, String> {
    match s {
        "stacked" => Ok(RmseMode::Stacked),
        "norm-diff" => Ok(RmseMode::NormDiff),
        _ => Err(format!("expected `stacked` or `norm-diff`, got `{s}`")),
    }
}

fn parse_covariance(s: &str) -> std::result::Result<CovarianceKind, String> {
    match s {
        "diagonal" => Ok(CovarianceKind::Diagonal),
        "full" => Ok(CovarianceKind::Full),
        _ => Err(format!("expected `diagonal` or `full`, got `{s}`")),
    }
}

fn parse_range(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once('-').unwrap_or((s, s));
    let lo: usize = a.trim().parse().map_err(|_| format!("bad range `{s}`"))?;
    let hi: usize = b.trim().parse().map_err(|_| format!("bad range `{s}`"))?;
    if lo == 0 || lo > hi {
        return Err(format!("range `{s}` must be ascending and start at 1 or more"));
    }
    Ok((lo, hi))
}

#[derive(Debug, Args)]
struct StageArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Global seed; every stage, trial and restart seed derives from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,

    #[arg(long, default_value_t = 30.0)]
    low_hz: f64,
    #[arg(long, default_value_t = 450.0)]
    high_hz: f64,
    #[arg(long, default_value_t = 4)]
    order: usize,
    /// Moving-RMS window in samples.
    #[arg(long, default_value_t = 400)]
    rms_window: usize,
    /// Single forward pass instead of zero-phase filtering.
    #[arg(long)]
    causal: bool,

    /// Subtask hysteresis as a fraction of peak target speed.
    #[arg(long, default_value_t = 0.02)]
    epsilon_frac: f64,
    #[arg(long, default_value_t = 1.0)]
    align_threshold_ms: f64,
    #[arg(long, default_value = "stacked", value_parser = parse_rmse_mode)]
    rmse_mode: RmseMode,

    #[arg(long, default_value_t = 8)]
    max_k: usize,
    #[arg(long, default_value_t = 20)]
    nmf_restarts: usize,
    #[arg(long, default_value_t = 500)]
    nmf_max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    nmf_tol: f64,
    #[arg(long, default_value_t = 0.90)]
    vaf_threshold: f64,
    #[arg(long, default_value_t = 0.03)]
    vaf_increment: f64,
    /// Keep every n-th envelope sample for factorization.
    #[arg(long, default_value_t = 10)]
    synergy_decimate: usize,
    /// Clustering procedures to run.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    procedure: Vec<u8>,
    /// Synergies per participant for procedure 2.
    #[arg(long, default_value_t = 3)]
    top_n: usize,
    /// Cluster counts, e.g. `1-8`.
    #[arg(long, default_value = "1-8", value_parser = parse_range)]
    clusters: (usize, usize),
    #[arg(long, default_value_t = 20)]
    kmeans_restarts: usize,
    /// Per-direction synergy re-analysis of single-axis trials.
    #[arg(long, default_value = "concatenated")]
    segments: SegmentMode,

    #[arg(long, default_value_t = 2)]
    hmm_states: usize,
    #[arg(long, default_value_t = 25)]
    hmm_restarts: usize,
    #[arg(long, default_value_t = 200)]
    hmm_max_iter: usize,
    #[arg(long, default_value_t = 1e-4)]
    hmm_tol: f64,
    #[arg(long, default_value = "diagonal", value_parser = parse_covariance)]
    covariance: CovarianceKind,
    /// Keep every n-th envelope sample for HMM fitting.
    #[arg(long, default_value_t = 1)]
    hmm_decimate: usize,
}

impl StageArgs {
    fn config(&self, stages: Vec<Stage>) -> RunConfig {
        let mut c = RunConfig::new(self.manifest.clone(), self.out.clone());
        c.stages = stages;
        c.seed = self.seed;
        c.filter.low_hz = self.low_hz;
        c.filter.high_hz = self.high_hz;
        c.filter.order = self.order;
        c.filter.zero_phase = !self.causal;
        c.envelope.window = self.rms_window;
        c.epsilon_fraction = self.epsilon_frac;
        c.align_threshold_s = self.align_threshold_ms / 1000.0;
        c.rmse_mode = self.rmse_mode;
        let s = &mut c.synergy;
        s.osc.max_k = self.max_k;
        s.osc.vaf_threshold = self.vaf_threshold;
        s.osc.vaf_increment = self.vaf_increment;
        s.restarts = self.nmf_restarts;
        s.nmf.max_iter = self.nmf_max_iter;
        s.nmf.tol = self.nmf_tol;
        s.decimate = self.synergy_decimate;
        s.procedures = self.procedure.clone();
        s.top_n = self.top_n;
        s.clusters = self.clusters;
        s.segments = self.segments;
        s.kmeans_restarts = self.kmeans_restarts;
        let h = &mut c.hmm;
        h.options.n_states = self.hmm_states;
        h.options.max_iter = self.hmm_max_iter;
        h.options.tol = self.hmm_tol;
        h.options.covariance = self.covariance;
        h.restarts = self.hmm_restarts;
        h.decimate = self.hmm_decimate;
        c
    }
}

/// Maps an error chain to the exit-code contract: I/O, parse and missing
/// input problems are usage errors, everything else is an analysis failure.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use neuromotor_core::Error as E;
    for cause in err.chain() {
        if cause.is::<std::io::Error>() || cause.is::<CacheMissing>() || cause.is::<serde_json::Error>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Io { .. } | E::Csv { .. } | E::Json(_) | E::Manifest { .. } => EXIT_USAGE,
                _ => EXIT_FAILURE,
            };
        }
    }
    EXIT_FAILURE
}

fn validate(manifest: &PathBuf, report_path: Option<&PathBuf>) -> Result<i32> {
    let manifest = load_manifest(manifest)?;
    let report = validate_dataset(&manifest);
    for issue in report.issues() {
        println!("{:?} {}: {}", issue.severity, issue.location, issue.message);
    }
    println!(
        "{} trials, {} errors, {} warnings: {}",
        report.trials.len(),
        report.error_count(),
        report.warning_count(),
        if report.passed { "passed" } else { "failed" }
    );
    if let Some(p) = report_path {
        index::write_json_file(p, &report)?;
    }
    Ok(if report.passed { EXIT_OK } else { EXIT_FAILURE })
}

fn synth_cmd(a: &SynthArgs) -> Result<i32> {
    let mut spec = SynthSpec::scenario(a.scenario, a.seed);
    if let Some(d) = a.duration {
        spec.duration_s = d;
    }
    if let Some(n) = a.healthy {
        spec.healthy = n;
    }
    if let Some(n) = a.post_stroke {
        spec.post_stroke = n;
    }
    let (manifest, _) = synth::gen_cohort(&spec, &a.out)?;
    println!(
        "wrote {} trials for {} participants to {}",
        manifest.trials.len(),
        manifest.participants.len(),
        a.out.join(synth::MANIFEST_FILE).display()
    );
    Ok(EXIT_OK)
}

fn pipeline_cmd(config: RunConfig) -> Result<i32> {
    let index = run_pipeline(&config)?;
    let files: usize = index.stages.values().map(|s| s.files.len()).sum();
    println!(
        "{} stages, {files} files indexed in {}",
        config.stages.len(),
        config.out.join(index::INDEX_FILE).display()
    );
    Ok(EXIT_OK)
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Validate { manifest, report } => validate(&manifest, report.as_ref()),
        Command::Synth(a) => synth_cmd(&a),
        Command::Dsp(s) => pipeline_cmd(s.config(vec![Stage::Dsp])),
        Command::Sync(s) => pipeline_cmd(s.config(vec![Stage::Sync])),
        Command::Metrics(s) => pipeline_cmd(s.config(vec![Stage::Metrics])),
        Command::Synergy { stage, restarts } => {
            let mut c = stage.config(vec![Stage::Synergy]);
            if let Some(r) = restarts {
                c.synergy.restarts = r;
            }
            pipeline_cmd(c)
        }
        Command::Hmm {
            stage,
            states,
            restarts,
            max_iter,
            tol,
        } => {
            let mut c = stage.config(vec![Stage::Hmm]);
            let h = &mut c.hmm;
            h.options.n_states = states.unwrap_or(h.options.n_states);
            h.restarts = restarts.unwrap_or(h.restarts);
            h.options.max_iter = max_iter.unwrap_or(h.options.max_iter);
            h.options.tol = tol.unwrap_or(h.options.tol);
            pipeline_cmd(c)
        }
        Command::Stats(s) => pipeline_cmd(s.config(vec![Stage::Stats])),
        Command::PlotData(s) => pipeline_cmd(s.config(vec![Stage::PlotData])),
        Command::Analyze { stage, stages } => {
            let mut stages = stages.unwrap_or_else(|| Stage::ALL.to_vec());
            stages.sort();
            stages.dedup();
            pipeline_cmd(stage.config(stages))
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    if let Some(n) = cli.threads {
        // The global pool can only be set once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match dispatch(cli).context("neuromotor") {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
