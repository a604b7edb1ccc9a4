use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cfc_core::data::{load_jsonl, save_jsonl};
use cfc_core::harness::{run_calibrate, run_evaluate, run_sweep, BinSide};
use cfc_core::synth::generate;
use cfc_core::{CfcError, FeatureMapSpec, MethodSpec, Result, RunConfig, SetMode, ThresholdSolver};

#[derive(Parser)]
#[command(name = "cfc", version, about = "Conditional factuality control for verifier-scored candidate sets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic cal.jsonl and test.jsonl.
    Synth(Overrides),
    /// Fit calibration artifacts, one JSON file per method and alpha.
    Calibrate(Overrides),
    /// Evaluate saved artifacts on a test file.
    Evaluate(Overrides),
    /// Calibrate and evaluate over the alpha grid and seeds.
    Sweep(Overrides),
    /// Validate a JSONL file and report schema warnings.
    IngestCheck {
        file: PathBuf,
    },
}

/// Flags mirror the JSON config keys; a flag wins over the config file.
#[derive(Args, Default)]
struct Overrides {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    cal: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Artifact path; repeatable.
    #[arg(long = "artifact", alias = "artifacts")]
    artifacts: Vec<PathBuf>,
    #[arg(long, alias = "n_cal")]
    n_cal: Option<usize>,
    #[arg(long, alias = "n_test")]
    n_test: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    p0: Option<f64>,
    #[arg(long)]
    p1: Option<f64>,
    #[arg(long, alias = "score_shift")]
    score_shift: Option<f64>,
    /// Comma-separated labels, e.g. `icp,cfc,cfc-pac-full`.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<MethodSpec>>,
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Single seed; shorthand for `--seeds N`.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    #[arg(long, alias = "n_bins")]
    n_bins: Option<usize>,
    #[arg(long, alias = "group_by")]
    group_by: Option<String>,
    /// `test` or `calibration`.
    #[arg(long, alias = "bins_on")]
    bins_on: Option<String>,
    /// Feature map as JSON, e.g. `{"kind":"poly","degree":2,"proxy":"difficulty"}`.
    #[arg(long, alias = "feature_map")]
    feature_map: Option<String>,
    /// `full` or `truncated`; applied to every threshold method.
    #[arg(long, alias = "set_mode")]
    set_mode: Option<String>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    c4: Option<f64>,
    #[arg(long, alias = "pac_ridge")]
    pac_ridge: Option<f64>,
    #[arg(long, alias = "learnt_cp_ridge")]
    learnt_cp_ridge: Option<f64>,
    /// `exact` or `grid`.
    #[arg(long, alias = "threshold_solver")]
    threshold_solver: Option<String>,
    #[arg(long, alias = "grid_points")]
    grid_points: Option<usize>,
    #[arg(long, alias = "grid_width")]
    grid_width: Option<f64>,
    #[arg(long, alias = "n_keep")]
    n_keep: Option<usize>,
    #[arg(long, alias = "frac_cal")]
    frac_cal: Option<f64>,
    #[arg(long, alias = "out_dir")]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

fn parse_enum<T: serde::de::DeserializeOwned>(key: &str, value: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|e| CfcError::Schema(format!("--{key} {value}: {e}")))
}

impl Overrides {
    fn resolve(self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })*
            };
        }
        set!(n_cal, n_test, m, p0, p1, score_shift, methods, alphas, seeds, n_bins, group_by);
        set!(delta, c4, pac_ridge, grid_points, grid_width, frac_cal, out_dir);
        if self.data.is_some() {
            cfg.data = self.data;
        }
        if self.cal.is_some() {
            cfg.cal = self.cal;
        }
        if self.test.is_some() {
            cfg.test = self.test;
        }
        if !self.artifacts.is_empty() {
            cfg.artifacts = self.artifacts;
        }
        if self.n_keep.is_some() {
            cfg.n_keep = self.n_keep;
        }
        if self.learnt_cp_ridge.is_some() {
            cfg.learnt_cp_ridge = self.learnt_cp_ridge;
        }
        if self.threads.is_some() {
            cfg.threads = self.threads;
        }
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(v) = self.bins_on {
            cfg.bins_on = parse_enum::<BinSide>("bins-on", &v)?;
        }
        if let Some(v) = self.threshold_solver {
            cfg.threshold_solver = parse_enum::<ThresholdSolver>("threshold-solver", &v)?;
        }
        if let Some(v) = self.feature_map {
            cfg.feature_map = serde_json::from_str::<FeatureMapSpec>(&v)
                .map_err(|e| CfcError::Schema(format!("--feature-map: {e}")))?;
        }
        if let Some(v) = self.set_mode {
            let mode = parse_enum::<SetMode>("set-mode", &v)?;
            for spec in &mut cfg.methods {
                spec.set_mode = mode;
            }
        }
        Ok(cfg)
    }
}

fn cmd_synth(cfg: RunConfig) -> Result<()> {
    let seed = cfg.seeds.first().copied().unwrap_or(0);
    let synth = cfg.synth_config(seed);
    let (cal, test) = generate(&synth)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| CfcError::io(&cfg.out_dir, e))?;
    save_jsonl(cfg.out_dir.join("cal.jsonl"), &cal)?;
    save_jsonl(cfg.out_dir.join("test.jsonl"), &test)?;
    println!(
        "synth: {} cal + {} test records, M={}, seed={}, params={}",
        cal.len(),
        test.len(),
        synth.params.m,
        seed,
        synth.param_hash()
    );
    Ok(())
}

fn cmd_ingest_check(file: PathBuf) -> Result<()> {
    let ingested = load_jsonl(&file)?;
    let recs = &ingested.records;
    let sizes = recs.iter().map(|r| r.candidates.len());
    let min_m = sizes.clone().min().unwrap_or(0);
    let max_m = sizes.max().unwrap_or(0);
    let uncoverable = recs.iter().filter(|r| r.candidates.iter().all(|c| !c.correct)).count();
    println!(
        "{}: {} records, {}..{} candidates, {} without a correct candidate",
        file.display(),
        recs.len(),
        min_m,
        max_m,
        uncoverable
    );
    let report = &ingested.report;
    if report.clamped_scores > 0 {
        println!("warning: {} scores clamped into [0,1]", report.clamped_scores);
    }
    if report.derived_signals > 0 {
        println!("warning: {} records had signals derived from candidates", report.derived_signals);
    }
    if min_m != max_m {
        println!("warning: candidate counts vary across records");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::IngestCheck { file } => cmd_ingest_check(file),
        Command::Synth(o) => cmd_synth(o.resolve()?),
        Command::Calibrate(o) => {
            let cfg = o.resolve()?;
            for path in run_calibrate(&cfg)? {
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Evaluate(o) => {
            let cfg = o.resolve()?;
            let pool = cfg.thread_pool()?;
            let results = pool.install(|| run_evaluate(&cfg))?;
            for r in &results {
                println!(
                    "{} alpha={} ecr={:.6} apss={:.6} gsc={:.6}",
                    r.spec, r.alpha, r.report.ecr, r.report.apss, r.report.gsc
                );
            }
            Ok(())
        }
        Command::Sweep(o) => {
            let cfg = o.resolve()?;
            let pool = cfg.thread_pool()?;
            let out = pool.install(|| run_sweep(&cfg))?;
            println!(
                "sweep: {} rows in {} (config {})",
                out.results.len(),
                cfg.out_dir.display(),
                &cfg.hash()[..12]
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
