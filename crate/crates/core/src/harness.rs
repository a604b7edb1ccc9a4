//! Experiment plumbing: run configuration, per-(alpha, seed) cells,
//! deterministic CSV output and multi-seed aggregation.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_jsonl, split_records, truncate_candidates, PromptRecord, SIGNAL_DIFFICULTY};
use crate::error::{CfcError, Result};
use crate::features::{fit_feature_map, rank_normalize, FeatureMapSpec, FittedFeatureMap};
use crate::methods::{
    calibrate, threshold_set, CalibrationArtifact, CalibrationOptions, Method, MethodSpec,
    PredictionSet, Predictor, ThresholdSolver,
};
use crate::metrics::{equal_frequency_bins, evaluate, EvalReport};
use crate::quantile::{Design, SolverOptions};
use crate::synth::{generate, SynthConfig, SynthParams};

/// Test prompts are scored in chunks of this size, each with its own
/// predictor, so results do not depend on the thread count.
const PREDICT_CHUNK: usize = 256;

pub const THREADS_ENV: &str = "CFC_THREADS";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinSide {
    #[default]
    Test,
    Calibration,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// One JSONL file, split into calibration and test per seed.
    pub data: Option<PathBuf>,
    /// Fixed calibration file (used with `test`).
    pub cal: Option<PathBuf>,
    /// Fixed test file.
    pub test: Option<PathBuf>,
    /// Calibration artifacts for `evaluate`.
    pub artifacts: Vec<PathBuf>,

    pub n_cal: usize,
    pub n_test: usize,
    pub m: usize,
    pub p0: f64,
    pub p1: f64,
    pub score_shift: f64,

    pub methods: Vec<MethodSpec>,
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub n_bins: usize,
    /// `auto`, a signal name, `hard_group` or `record_group`.
    pub group_by: String,
    pub bins_on: BinSide,
    pub feature_map: FeatureMapSpec,
    pub delta: f64,
    pub c4: f64,
    pub pac_ridge: f64,
    /// Unset: the PAC ridge when a PAC variant is configured, else 0.
    pub learnt_cp_ridge: Option<f64>,
    pub threshold_solver: ThresholdSolver,
    pub grid_points: usize,
    pub grid_width: f64,
    pub n_keep: Option<usize>,
    pub frac_cal: f64,
    pub out_dir: PathBuf,
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        RunConfig {
            data: None,
            cal: None,
            test: None,
            artifacts: Vec::new(),
            n_cal: synth.n_cal,
            n_test: synth.n_test,
            m: synth.params.m,
            p0: synth.params.p0,
            p1: synth.params.p1,
            score_shift: synth.params.score_shift,
            methods: ["topk", "icp", "learnt_cp", "cfc", "cfc-full", "cfc-pac", "cfc-pac-full"]
                .iter()
                .map(|m| m.parse().expect("known label"))
                .collect(),
            alphas: vec![0.1],
            seeds: vec![0],
            n_bins: 10,
            group_by: "auto".into(),
            bins_on: BinSide::Test,
            feature_map: FeatureMapSpec::poly(2, SIGNAL_DIFFICULTY),
            delta: 0.9,
            c4: 1.0,
            pac_ridge: 1e-3,
            learnt_cp_ridge: None,
            threshold_solver: ThresholdSolver::Exact,
            grid_points: 256,
            grid_width: 1e-5,
            n_keep: None,
            frac_cal: 0.5,
            out_dir: PathBuf::from("out"),
            threads: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CfcError::Schema(format!("run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CfcError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn synth_params(&self) -> SynthParams {
        SynthParams {
            m: self.m,
            p0: self.p0,
            p1: self.p1,
            score_shift: self.score_shift,
        }
    }

    pub fn synth_config(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            n_cal: self.n_cal,
            n_test: self.n_test,
            seed,
            params: self.synth_params(),
        }
    }

    pub fn calibration_options(&self, alpha: f64) -> CalibrationOptions {
        CalibrationOptions {
            alpha,
            pac_ridge: self.pac_ridge,
            learnt_cp_ridge: self.learnt_cp_ridge.unwrap_or_else(|| {
                if self.methods.iter().any(|m| m.method == Method::CfcPac) {
                    self.pac_ridge
                } else {
                    0.0
                }
            }),
            delta: self.delta,
            c4: self.c4,
            threshold_solver: self.threshold_solver,
            grid_points: self.grid_points,
            grid_width: self.grid_width,
            solver: SolverOptions::default(),
            generator: Some(self.synth_params()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(CfcError::domain("no methods configured"));
        }
        if let Some(a) = self.alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return Err(CfcError::domain(format!("alpha {a} outside (0,1)")));
        }
        if self.alphas.is_empty() || self.seeds.is_empty() {
            return Err(CfcError::domain("alpha grid and seed list must be nonempty"));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(CfcError::domain("seeds must be distinct"));
        }
        if self.n_bins == 0 {
            return Err(CfcError::domain("n_bins must be at least 1"));
        }
        if self.n_keep == Some(0) {
            return Err(CfcError::domain("n_keep must be at least 1"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, as hex.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Worker count: explicit setting, then `CFC_THREADS`, then rayon's default.
    pub fn thread_count(&self) -> Option<usize> {
        self.threads.or_else(|| {
            std::env::var(THREADS_ENV)
                .ok()
                .and_then(|v| v.trim().parse::<usize>().ok())
                .filter(|&n| n > 0)
        })
    }

    pub fn thread_pool(&self) -> Result<rayon::ThreadPool> {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = self.thread_count() {
            builder = builder.num_threads(n);
        }
        builder
            .build()
            .map_err(|e| CfcError::domain(format!("thread pool: {e}")))
    }
}

/// Calibration and test records for one cell.
#[derive(Clone, Debug)]
pub struct CellData {
    pub cal: Vec<PromptRecord>,
    pub test: Vec<PromptRecord>,
}

/// Records loaded once and shared by all cells.
#[derive(Clone, Debug)]
pub enum DataSource {
    Synthetic,
    Pooled(Arc<Vec<PromptRecord>>),
    Fixed(Arc<CellData>),
}

fn load_truncated(path: &Path, n_keep: Option<usize>) -> Result<Vec<PromptRecord>> {
    let ingested = load_jsonl(path)?;
    match n_keep {
        Some(k) => ingested.records.iter().map(|r| truncate_candidates(r, k)).collect(),
        None => Ok(ingested.records),
    }
}

impl DataSource {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        if let Some(path) = &cfg.data {
            return Ok(DataSource::Pooled(Arc::new(load_truncated(path, cfg.n_keep)?)));
        }
        match (&cfg.cal, &cfg.test) {
            (Some(c), Some(t)) => Ok(DataSource::Fixed(Arc::new(CellData {
                cal: load_truncated(c, cfg.n_keep)?,
                test: load_truncated(t, cfg.n_keep)?,
            }))),
            (None, None) => Ok(DataSource::Synthetic),
            _ => Err(CfcError::domain("`cal` and `test` must be given together")),
        }
    }

    pub fn cell(&self, cfg: &RunConfig, seed: u64) -> Result<CellData> {
        match self {
            DataSource::Synthetic => {
                let (cal, test) = generate(&cfg.synth_config(seed))?;
                let trunc = |v: Vec<PromptRecord>| -> Result<Vec<PromptRecord>> {
                    match cfg.n_keep {
                        Some(k) => v.iter().map(|r| truncate_candidates(r, k)).collect(),
                        None => Ok(v),
                    }
                };
                Ok(CellData {
                    cal: trunc(cal)?,
                    test: trunc(test)?,
                })
            }
            DataSource::Pooled(records) => {
                let (cal, test) = split_records(records, seed, cfg.frac_cal)?;
                Ok(CellData { cal, test })
            }
            DataSource::Fixed(d) => Ok((**d).clone()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub spec: MethodSpec,
    pub alpha: f64,
    pub seed: u64,
    pub report: EvalReport,
    /// Deployed threshold per test prompt, in test order.
    pub thresholds: Vec<f64>,
    pub alpha_eff: f64,
}

/// Thresholds for every test record, in chunks with fresh predictors.
pub fn predict_thresholds(art: &CalibrationArtifact, test: &[PromptRecord]) -> Result<Vec<f64>> {
    let chunks: Vec<Vec<f64>> = test
        .par_chunks(PREDICT_CHUNK)
        .map(|chunk| {
            let mut p = Predictor::new(art)?;
            chunk.iter().map(|r| p.threshold(r)).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(chunks.concat())
}

pub fn predict_sets(art: &CalibrationArtifact, test: &[PromptRecord]) -> Result<Vec<PredictionSet>> {
    let chunks: Vec<Vec<PredictionSet>> = test
        .par_chunks(PREDICT_CHUNK)
        .map(|chunk| {
            let mut p = Predictor::new(art)?;
            chunk.iter().map(|r| p.predict(r)).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(chunks.concat())
}

/// Group ids for the test records.
pub fn assign_groups(
    cfg: &RunConfig,
    map: &FittedFeatureMap,
    cal: &[PromptRecord],
    test: &[PromptRecord],
) -> Result<Vec<usize>> {
    let by = match cfg.group_by.as_str() {
        "auto" => match &cfg.feature_map {
            FeatureMapSpec::Poly { degree, proxy, .. } if *degree > 0 => proxy.clone(),
            FeatureMapSpec::GroupIndicator { .. } => "hard_group".to_string(),
            _ => SIGNAL_DIFFICULTY.to_string(),
        },
        other => other.to_string(),
    };
    match by.as_str() {
        "hard_group" => test
            .iter()
            .map(|r| Ok(usize::from(map.is_hard(r)?.unwrap_or(false))))
            .collect(),
        "record_group" => {
            let mut labels = BTreeMap::new();
            for r in test {
                let g = r.group_label.ok_or_else(|| CfcError::MissingField {
                    id: r.id.clone(),
                    field: "group".into(),
                })?;
                labels.insert(g, 0usize);
            }
            for (k, v) in labels.values_mut().enumerate() {
                *v = k;
            }
            Ok(test.iter().map(|r| labels[&r.group_label.expect("checked")]).collect())
        }
        signal => {
            let values = test
                .iter()
                .map(|r| r.signal(signal))
                .collect::<Result<Vec<_>>>()?;
            match cfg.bins_on {
                BinSide::Test => equal_frequency_bins(&values, cfg.n_bins),
                BinSide::Calibration => {
                    let mut sorted = cal
                        .iter()
                        .map(|r| r.signal(signal))
                        .collect::<Result<Vec<_>>>()?;
                    sorted.sort_by(f64::total_cmp);
                    let b = cfg.n_bins as f64;
                    Ok(values
                        .iter()
                        .map(|&v| ((rank_normalize(v, &sorted) * b) as usize).min(cfg.n_bins - 1))
                        .collect())
                }
            }
        }
    }
}

/// Basis for conditional residuals: the method basis when nonnegative on
/// the test set, else intercept plus one-hot groups.
fn residual_basis(map: &FittedFeatureMap, test: &[PromptRecord], groups: &[usize]) -> Result<Design> {
    let x = map.design(test)?;
    if x.as_slice().iter().all(|&v| v >= 0.0) {
        return Ok(x);
    }
    let n_groups = groups.iter().max().map_or(0, |g| g + 1);
    let mut out = Design::empty(1 + n_groups);
    for &g in groups {
        let mut row = vec![0.0; 1 + n_groups];
        row[0] = 1.0;
        row[1 + g] = 1.0;
        out.push_row(&row)?;
    }
    Ok(out)
}

/// Calibrates and evaluates every method on one (alpha, seed) cell.
/// Methods that differ only in set mode share one threshold pass.
pub fn run_cell(
    cfg: &RunConfig,
    data: &CellData,
    specs: &[MethodSpec],
    alpha: f64,
    seed: u64,
) -> Result<Vec<CellResult>> {
    let map = fit_feature_map(&cfg.feature_map, &data.cal)?;
    let groups = assign_groups(cfg, &map, &data.cal, &data.test)?;
    let basis = residual_basis(&map, &data.test, &groups)?;
    let opts = cfg.calibration_options(alpha);
    let mut shared: BTreeMap<Method, Vec<f64>> = BTreeMap::new();
    let mut out = Vec::with_capacity(specs.len());
    for &spec in specs {
        let art = calibrate(spec, &map, &data.cal, &opts)?;
        let (sets, thresholds) = if spec.method == Method::Topk {
            let sets = predict_sets(&art, &data.test)?;
            let thresholds = sets.iter().map(|s| s.threshold).collect();
            (sets, thresholds)
        } else {
            let thresholds = match shared.entry(spec.method) {
                Entry::Occupied(e) => e.get().clone(),
                Entry::Vacant(e) => e.insert(predict_thresholds(&art, &data.test)?).clone(),
            };
            let sets = data
                .test
                .iter()
                .zip(&thresholds)
                .map(|(r, &t)| threshold_set(r, t, spec.set_mode))
                .collect();
            (sets, thresholds)
        };
        let report = evaluate(&data.test, &sets, &groups, Some(&basis), alpha, seed)?;
        out.push(CellResult {
            spec,
            alpha,
            seed,
            report,
            thresholds,
            alpha_eff: art.alpha_eff,
        });
    }
    Ok(out)
}

fn f6(v: f64) -> String {
    let s = format!("{v:.6}");
    if s == "-0.000000" {
        "0.000000".into()
    } else {
        s
    }
}

pub const SUMMARY_HEADER: [&str; 7] = ["method", "alpha", "seed", "ecr", "apss", "gsc", "abstention_rate"];
pub const GROUPS_HEADER: [&str; 7] = ["method", "alpha", "seed", "group_id", "coverage", "miscoverage", "count"];
pub const AGGREGATE_HEADER: [&str; 9] = [
    "method", "alpha", "n_seeds", "ecr_mean", "ecr_sd", "apss_mean", "apss_sd", "gsc_mean", "gsc_sd",
];

pub fn summary_row(r: &CellResult) -> Vec<String> {
    vec![
        r.spec.label(),
        f6(r.alpha),
        r.seed.to_string(),
        f6(r.report.ecr),
        f6(r.report.apss),
        f6(r.report.gsc),
        f6(r.report.abstention_rate),
    ]
}

pub fn group_rows(r: &CellResult) -> Vec<Vec<String>> {
    r.report
        .group_miscoverage
        .iter()
        .map(|g| {
            vec![
                r.spec.label(),
                f6(r.alpha),
                r.seed.to_string(),
                g.group.to_string(),
                f6(g.coverage),
                f6(g.miscoverage),
                g.count.to_string(),
            ]
        })
        .collect()
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub spec: MethodSpec,
    pub alpha: f64,
    pub n_seeds: usize,
    pub ecr: (f64, f64),
    pub apss: (f64, f64),
    pub gsc: (f64, f64),
}

/// Per (method, alpha) mean ± sd over seeds; `results` must be in
/// canonical order.
pub fn aggregate(results: &[CellResult]) -> Vec<AggregateRow> {
    let mut order: Vec<(MethodSpec, u64)> = Vec::new();
    let mut cells: BTreeMap<(MethodSpec, u64), Vec<&CellResult>> = BTreeMap::new();
    for r in results {
        let key = (r.spec, r.alpha.to_bits());
        if !cells.contains_key(&key) {
            order.push(key);
        }
        cells.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let rs = &cells[&key];
            if rs.len() == 1 {
                log::warn!("{} at alpha {}: one seed, sd reported as 0", key.0, f64::from_bits(key.1));
            }
            let pick = |f: fn(&EvalReport) -> f64| mean_sd(&rs.iter().map(|r| f(&r.report)).collect::<Vec<_>>());
            AggregateRow {
                spec: key.0,
                alpha: f64::from_bits(key.1),
                n_seeds: rs.len(),
                ecr: pick(|r| r.ecr),
                apss: pick(|r| r.apss),
                gsc: pick(|r| r.gsc),
            }
        })
        .collect()
}

fn aggregate_row(a: &AggregateRow) -> Vec<String> {
    vec![
        a.spec.label(),
        f6(a.alpha),
        a.n_seeds.to_string(),
        f6(a.ecr.0),
        f6(a.ecr.1),
        f6(a.apss.0),
        f6(a.apss.1),
        f6(a.gsc.0),
        f6(a.gsc.1),
    ]
}

/// CSV file that is valid after every flush: header first, then rows.
struct CsvSink {
    path: PathBuf,
    writer: csv::Writer<BufWriter<File>>,
}

impl CsvSink {
    fn create(path: PathBuf, header: &[&str]) -> Result<Self> {
        let file = File::create(&path).map_err(|e| CfcError::io(&path, e))?;
        let mut writer = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(BufWriter::new(file));
        writer.write_record(header).map_err(|e| csv_error(&path, e))?;
        let mut sink = CsvSink { path, writer };
        sink.flush()?;
        Ok(sink)
    }

    fn rows(&mut self, rows: &[Vec<String>]) -> Result<()> {
        for r in rows {
            self.writer.write_record(r).map_err(|e| csv_error(&self.path, e))?;
        }
        self.flush()
    }

    fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(|e| CfcError::io(&self.path, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> CfcError {
    CfcError::io(path, std::io::Error::other(e.to_string()))
}

/// Writes a whole CSV atomically (temporary file, then rename).
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let tmp = path.with_extension("csv.tmp");
    {
        let mut sink = CsvSink::create(tmp.clone(), header)?;
        sink.rows(rows)?;
    }
    fs::rename(&tmp, path).map_err(|e| CfcError::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CfcError::io(dir, e))
}

#[derive(Clone, Debug)]
pub struct SweepOutput {
    pub results: Vec<CellResult>,
    pub aggregate: Vec<AggregateRow>,
}

/// Runs every (alpha, seed) cell on the current rayon pool and writes
/// summary.csv, groups.csv and aggregate.csv to `cfg.out_dir`. Rows are
/// appended as cells finish; on success the files are rewritten in
/// (method, alpha, seed) order.
pub fn run_sweep(cfg: &RunConfig) -> Result<SweepOutput> {
    cfg.validate()?;
    ensure_dir(&cfg.out_dir)?;
    let source = DataSource::from_config(cfg)?;
    let summary_path = cfg.out_dir.join("summary.csv");
    let groups_path = cfg.out_dir.join("groups.csv");
    let sinks = Mutex::new((
        CsvSink::create(summary_path.clone(), &SUMMARY_HEADER)?,
        CsvSink::create(groups_path.clone(), &GROUPS_HEADER)?,
    ));

    let cells: Vec<(usize, usize)> = (0..cfg.alphas.len())
        .flat_map(|a| (0..cfg.seeds.len()).map(move |s| (a, s)))
        .collect();
    let per_cell: Vec<Vec<CellResult>> = cells
        .par_iter()
        .map(|&(ai, si)| {
            let (alpha, seed) = (cfg.alphas[ai], cfg.seeds[si]);
            let data = source.cell(cfg, seed)?;
            let res = run_cell(cfg, &data, &cfg.methods, alpha, seed)?;
            log::info!("cell alpha={alpha} seed={seed} done");
            let mut guard = sinks.lock().expect("writer lock");
            let summary: Vec<_> = res.iter().map(summary_row).collect();
            let groups: Vec<_> = res.iter().flat_map(group_rows).collect();
            guard.0.rows(&summary)?;
            guard.1.rows(&groups)?;
            Ok(res)
        })
        .collect::<Result<_>>()?;
    drop(sinks);

    // canonical order: method (config order), alpha, seed
    let mut results: Vec<(usize, usize, usize, CellResult)> = Vec::new();
    for (cell, (ai, si)) in per_cell.into_iter().zip(&cells) {
        for r in cell {
            let mi = cfg.methods.iter().position(|m| *m == r.spec).expect("configured");
            results.push((mi, *ai, *si, r));
        }
    }
    results.sort_by_key(|(m, a, s, _)| (*m, *a, *s));
    let results: Vec<CellResult> = results.into_iter().map(|t| t.3).collect();

    write_csv(&summary_path, &SUMMARY_HEADER, &results.iter().map(summary_row).collect::<Vec<_>>())?;
    write_csv(&groups_path, &GROUPS_HEADER, &results.iter().flat_map(group_rows).collect::<Vec<_>>())?;
    let agg = aggregate(&results);
    write_csv(
        &cfg.out_dir.join("aggregate.csv"),
        &AGGREGATE_HEADER,
        &agg.iter().map(aggregate_row).collect::<Vec<_>>(),
    )?;
    Ok(SweepOutput {
        results,
        aggregate: agg,
    })
}

/// Artifact file name for a method label and alpha.
pub fn artifact_name(spec: MethodSpec, alpha: f64, n_alphas: usize) -> String {
    if n_alphas == 1 {
        format!("{}.json", spec.label())
    } else {
        format!("{}_alpha{}.json", spec.label(), f6(alpha))
    }
}

/// Calibrates every configured method and alpha on the calibration records
/// and writes one artifact per pair. Returns the written paths.
pub fn run_calibrate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let cal = match (&cfg.cal, &cfg.data) {
        (Some(p), _) | (None, Some(p)) => load_truncated(p, cfg.n_keep)?,
        (None, None) => return Err(CfcError::domain("calibrate needs `cal` (or `data`)")),
    };
    ensure_dir(&cfg.out_dir)?;
    let map = fit_feature_map(&cfg.feature_map, &cal)?;
    let mut written = Vec::new();
    for &alpha in &cfg.alphas {
        let opts = cfg.calibration_options(alpha);
        for &spec in &cfg.methods {
            let art = calibrate(spec, &map, &cal, &opts)?;
            let path = cfg.out_dir.join(artifact_name(spec, alpha, cfg.alphas.len()));
            fs::write(&path, art.to_json()?).map_err(|e| CfcError::io(&path, e))?;
            written.push(path);
        }
    }
    Ok(written)
}

pub fn load_artifact(path: &Path) -> Result<CalibrationArtifact> {
    let text = fs::read_to_string(path).map_err(|e| CfcError::io(path, e))?;
    CalibrationArtifact::from_json(&text)
}

/// Checks that the test records carry every signal the artifact's map needs.
fn check_schema(art: &CalibrationArtifact, test: &[PromptRecord]) -> Result<()> {
    for name in art.feature_map.spec.required_signals() {
        if let Some(r) = test.iter().find(|r| !r.raw_signals.contains_key(&name)) {
            return Err(CfcError::Schema(format!(
                "record `{}` lacks signal `{name}` required by the {} artifact",
                r.id,
                art.method.as_str()
            )));
        }
    }
    Ok(())
}

/// Evaluates saved artifacts on a test file; writes summary.csv and groups.csv.
pub fn run_evaluate(cfg: &RunConfig) -> Result<Vec<CellResult>> {
    if cfg.artifacts.is_empty() {
        return Err(CfcError::domain("evaluate needs at least one artifact"));
    }
    let test_path = cfg
        .test
        .as_ref()
        .ok_or_else(|| CfcError::domain("evaluate needs `test`"))?;
    let test = load_truncated(test_path, cfg.n_keep)?;
    let seed = cfg.seeds.first().copied().unwrap_or(0);
    ensure_dir(&cfg.out_dir)?;
    let mut results = Vec::new();
    for path in &cfg.artifacts {
        let art = load_artifact(path)?;
        check_schema(&art, &test)?;
        let map = &art.feature_map;
        // calibration-side binning has no calibration records here
        let group_cfg = RunConfig {
            bins_on: BinSide::Test,
            feature_map: map.spec.clone(),
            ..cfg.clone()
        };
        let groups = assign_groups(&group_cfg, map, &[], &test)?;
        let basis = residual_basis(map, &test, &groups)?;
        let sets = predict_sets(&art, &test)?;
        let thresholds = sets.iter().map(|s| s.threshold).collect();
        let report = evaluate(&test, &sets, &groups, Some(&basis), art.alpha, seed)?;
        results.push(CellResult {
            spec: art.spec(),
            alpha: art.alpha,
            seed,
            report,
            thresholds,
            alpha_eff: art.alpha_eff,
        });
    }
    write_csv(
        &cfg.out_dir.join("summary.csv"),
        &SUMMARY_HEADER,
        &results.iter().map(summary_row).collect::<Vec<_>>(),
    )?;
    write_csv(
        &cfg.out_dir.join("groups.csv"),
        &GROUPS_HEADER,
        &results.iter().flat_map(group_rows).collect::<Vec<_>>(),
    )?;
    Ok(results)
}
