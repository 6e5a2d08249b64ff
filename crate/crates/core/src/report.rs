//! Run orchestration over a directory of dumps and the CSV/JSON reports.
//!
//! Cells `(layer, step)` are processed one at a time in canonical order.
//! Each cell holds exactly one pre/post pair of covariances while the
//! eigensolver runs, and both are dropped before the next cell is read.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::approx::{
    apply_plan, correlation_fidelity, fidelity_report, make_plan, FidelityReport, FIDELITY_METRICS,
};
use crate::covariance::{covariance_of, gauge, paired_population_check, CovarianceSummary};
use crate::diagnostics::{
    classify_regime, match_signature, pearson, trend_of, CorrelationResult, RegimeLabel,
    RegimeThresholds, Signature, DEFAULT_SLOPE_TOL,
};
use crate::eigen::{
    eig_full, eig_lanczos, eig_randsvd, Eigenspectrum, DEFAULT_OVERSAMPLE, DEFAULT_POWER_ITERS,
};
use crate::error::{arg, Error, Result};
use crate::ingest::{read_dump, read_header, stratify_by_position, ActivationBatch, Tag};
use crate::metrics::{MetricRecord, Truncation, METRIC_NAMES};
use crate::synth::derive_seed;

/// Metrics that get a layer × step grid.
pub const GRID_METRICS: [&str; 7] = [
    "se_pre", "se_post", "pr_pre", "pr_post", "eee_pre", "eee_post", "js",
];

/// `(tag, metric, record field)` rows of the long-form metrics table.
const LONG_FORM: [(&str, &str, &str); 9] = [
    ("pre", "se", "se_pre"),
    ("post", "se", "se_post"),
    ("pre", "pr", "pr_pre"),
    ("post", "pr", "pr_post"),
    ("pre", "eee", "eee_pre"),
    ("post", "eee", "eee_post"),
    ("pair", "js", "js"),
    ("pair", "pr_gain", "pr_gain"),
    ("pair", "delta_eee", "delta_eee"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum Solver {
    Full,
    RandSvd {
        k: usize,
        oversample: usize,
        power_iters: usize,
    },
    Lanczos {
        k: usize,
        max_iters: usize,
    },
}

impl Solver {
    pub fn randsvd(k: usize) -> Self {
        Solver::RandSvd {
            k,
            oversample: DEFAULT_OVERSAMPLE,
            power_iters: DEFAULT_POWER_ITERS,
        }
    }

    /// Lanczos with `8k` steps, capped at `D` by the solver itself.
    pub fn lanczos(k: usize) -> Self {
        Solver::Lanczos {
            k,
            max_iters: 8 * k,
        }
    }

    pub fn is_truncating(self) -> bool {
        !matches!(self, Solver::Full)
    }

    fn method(self) -> &'static str {
        match self {
            Solver::Full => "full",
            Solver::RandSvd { .. } => "randsvd",
            Solver::Lanczos { .. } => "lanczos",
        }
    }

    fn with_rank(self, k: usize) -> Self {
        match self {
            Solver::Lanczos { .. } => Solver::lanczos(k),
            Solver::RandSvd {
                oversample,
                power_iters,
                ..
            } => Solver::RandSvd {
                k,
                oversample,
                power_iters,
            },
            Solver::Full => Solver::randsvd(k),
        }
    }

    pub fn solve(self, cov: &CovarianceSummary, seed: u64) -> Result<Eigenspectrum> {
        match self {
            Solver::Full => eig_full(cov),
            Solver::RandSvd {
                k,
                oversample,
                power_iters,
            } => eig_randsvd(cov, k.min(cov.dim()), oversample, power_iters, seed),
            Solver::Lanczos { k, max_iters } => {
                let k = k.min(cov.dim());
                eig_lanczos(cov, k, max_iters.max(k), seed)
            }
        }
    }
}

impl fmt::Display for Solver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Solver::Full => f.write_str("full"),
            Solver::RandSvd { k, .. } => write!(f, "randsvd({k})"),
            Solver::Lanczos { k, .. } => write!(f, "lanczos({k})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisOptions {
    pub sample_fraction: f64,
    pub seed: u64,
    pub solver: Solver,
    pub stratify: Option<usize>,
    pub chunk_rows: usize,
    pub thresholds: RegimeThresholds,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            sample_fraction: 1.0,
            seed: 0,
            solver: Solver::Full,
            stratify: None,
            chunk_rows: 4096,
            thresholds: RegimeThresholds::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub dump_dir: PathBuf,
    /// Restrict to these layers; all discovered layers when `None`.
    pub layers: Option<Vec<u32>>,
    pub steps: Option<Vec<u64>>,
    pub options: AnalysisOptions,
}

impl RunManifest {
    pub fn new(dump_dir: impl Into<PathBuf>) -> Self {
        RunManifest {
            dump_dir: dump_dir.into(),
            layers: None,
            steps: None,
            options: AnalysisOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.options;
        if !(o.sample_fraction > 0.0 && o.sample_fraction <= 1.0) {
            return Err(arg(format!(
                "sample fraction must be in (0, 1], got {}",
                o.sample_fraction
            )));
        }
        if o.chunk_rows == 0 {
            return Err(arg("chunk_rows must be positive"));
        }
        if o.stratify == Some(0) {
            return Err(arg("stratify needs at least one group"));
        }
        match o.solver {
            Solver::RandSvd { k: 0, .. } | Solver::Lanczos { k: 0, .. } => {
                return Err(arg("rank must be positive"))
            }
            _ => {}
        }
        o.thresholds.validate()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CellFiles {
    pub pre: Option<PathBuf>,
    pub post: Option<PathBuf>,
}

/// Dump files found under `dir`, keyed by `(layer, step)`, after the
/// manifest's layer and step filters.
pub fn discover(manifest: &RunManifest) -> Result<BTreeMap<(u32, u64), CellFiles>> {
    let dir = &manifest.dump_dir;
    let entries = fs::read_dir(dir).map_err(|source| Error::Io {
        path: dir.clone(),
        source,
    })?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|source| Error::Io {
                path: dir.clone(),
                source,
            })?
            .path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if path.is_file() && matches!(ext.as_deref(), Some("nrv" | "csv")) {
            paths.push(path);
        }
    }
    paths.sort();
    let mut cells: BTreeMap<(u32, u64), CellFiles> = BTreeMap::new();
    for path in paths {
        let h = match read_header(&path) {
            Ok(h) => h,
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        if manifest
            .layers
            .as_ref()
            .is_some_and(|l| !l.contains(&h.layer))
            || manifest
                .steps
                .as_ref()
                .is_some_and(|s| !s.contains(&h.step))
        {
            continue;
        }
        let cell = cells.entry((h.layer, h.step)).or_default();
        let slot = match h.tag {
            Tag::Pre => &mut cell.pre,
            Tag::Post => &mut cell.post,
        };
        if let Some(prev) = slot {
            return Err(Error::Data(format!(
                "duplicate {} dump for layer {} step {}: {} and {}",
                h.tag,
                h.layer,
                h.step,
                prev.display(),
                path.display()
            )));
        }
        *slot = Some(path);
    }
    if cells.is_empty() {
        return Err(Error::NoDumps("no dumps found".into()));
    }
    Ok(cells)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MissingCell {
    pub layer: u32,
    pub step: u64,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StratifiedRecord {
    pub group: String,
    pub record: MetricRecord,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisRun {
    pub layers: Vec<u32>,
    pub steps: Vec<u64>,
    /// One record per complete cell, ordered by layer then step.
    pub records: Vec<MetricRecord>,
    pub missing: Vec<MissingCell>,
    pub stratified: Vec<StratifiedRecord>,
    pub dim: Option<usize>,
    pub solver: Solver,
    pub sample_fraction: f64,
    pub seed: u64,
    pub solver_warnings: u64,
    /// Most covariance entries alive at once during the run (see [`gauge`]).
    pub peak_covariance_values: usize,
}

impl AnalysisRun {
    pub fn record(&self, layer: u32, step: u64) -> Option<&MetricRecord> {
        self.records
            .iter()
            .find(|r| r.layer == layer && r.step == step)
    }

    pub fn grid(&self, metric: &str) -> Result<HeatmapGrid> {
        if !METRIC_NAMES.contains(&metric) {
            return Err(arg(format!("unknown metric {metric:?}")));
        }
        let values = self
            .layers
            .iter()
            .map(|&l| {
                self.steps
                    .iter()
                    .map(|&s| self.record(l, s).and_then(|r| r.get(metric)))
                    .collect()
            })
            .collect();
        HeatmapGrid::new(metric, self.layers.clone(), self.steps.clone(), values)
    }

    pub fn grids(&self) -> Result<Vec<HeatmapGrid>> {
        GRID_METRICS.iter().map(|m| self.grid(m)).collect()
    }
}

struct CellOutput {
    record: MetricRecord,
    stratified: Vec<StratifiedRecord>,
    warnings: u64,
    dim: usize,
}

fn spectra_pair(
    pre: &ActivationBatch,
    post: &ActivationBatch,
    opts: &AnalysisOptions,
    seeds: (u64, u64),
) -> Result<(Eigenspectrum, Eigenspectrum)> {
    let cov_pre = covariance_of(pre, opts.chunk_rows)?;
    let cov_post = covariance_of(post, opts.chunk_rows)?;
    let s_pre = opts.solver.solve(&cov_pre, seeds.0)?;
    let s_post = opts.solver.solve(&cov_post, seeds.1)?;
    Ok((s_pre, s_post))
}

fn analyze_cell(
    layer: u32,
    step: u64,
    files: &CellFiles,
    opts: &AnalysisOptions,
) -> Result<CellOutput> {
    let (Some(pre_path), Some(post_path)) = (&files.pre, &files.post) else {
        let which = if files.pre.is_none() { "pre" } else { "post" };
        return Err(Error::Data(format!("{which} dump missing")));
    };
    let pre = read_dump(pre_path)?;
    let post = read_dump(post_path)?;
    paired_population_check(&pre, &post)?;
    // Same seed for every layer of a step, so all layers see the same tokens.
    let plan = make_plan(
        pre.n_rows(),
        opts.sample_fraction,
        derive_seed(opts.seed, u32::MAX, step, Tag::Pre),
    )?;
    let pre = apply_plan(&pre, &plan)?;
    let post = apply_plan(&post, &plan)?;
    paired_population_check(&pre, &post)?;

    let policy = if opts.solver.is_truncating() {
        Truncation::Allow
    } else {
        Truncation::Reject
    };
    let seeds = (
        derive_seed(opts.seed, layer, step, Tag::Pre),
        derive_seed(opts.seed, layer, step, Tag::Post),
    );
    let (s_pre, s_post) = spectra_pair(&pre, &post, opts, seeds)?;
    let record = MetricRecord::from_spectra(layer, step, &s_pre, &s_post, policy)?;
    let mut warnings = u64::from(s_pre.warnings() + s_post.warnings());

    let mut stratified = Vec::new();
    if let Some(g) = opts.stratify {
        for group in stratify_by_position(&pre, g)? {
            let label = group.label.to_string();
            let result = pre
                .select_rows(&group.row_indices)
                .and_then(|a| Ok((a, post.select_rows(&group.row_indices)?)))
                .and_then(|(a, b)| spectra_pair(&a, &b, opts, seeds))
                .and_then(|(a, b)| MetricRecord::from_spectra(layer, step, &a, &b, policy));
            match result {
                Ok(record) => stratified.push(StratifiedRecord {
                    group: label,
                    record,
                }),
                Err(e) => {
                    warnings += 1;
                    warn!("layer {layer} step {step} group {label}: {e}");
                }
            }
        }
    }
    Ok(CellOutput {
        record,
        stratified,
        warnings,
        dim: pre.dim(),
    })
}

/// Computes one metric record per `(layer, step)` cell. Cells without both
/// dumps, or whose computation fails, are reported as missing.
pub fn analyze(manifest: &RunManifest) -> Result<AnalysisRun> {
    manifest.validate()?;
    let cells = discover(manifest)?;
    let opts = &manifest.options;
    let layers: BTreeSet<u32> = cells.keys().map(|k| k.0).collect();
    let steps: BTreeSet<u64> = cells.keys().map(|k| k.1).collect();

    let live_before = gauge::live();
    gauge::reset_peak();
    let mut run = AnalysisRun {
        layers: layers.into_iter().collect(),
        steps: steps.into_iter().collect(),
        records: Vec::new(),
        missing: Vec::new(),
        stratified: Vec::new(),
        dim: None,
        solver: opts.solver,
        sample_fraction: opts.sample_fraction,
        seed: opts.seed,
        solver_warnings: 0,
        peak_covariance_values: 0,
    };
    for &layer in &run.layers {
        for &step in &run.steps {
            let files = cells.get(&(layer, step)).cloned().unwrap_or_default();
            match analyze_cell(layer, step, &files, opts) {
                Ok(out) => {
                    if let Some(d) = run.dim.filter(|&d| d != out.dim) {
                        warn!(
                            "layer {layer} step {step}: width {} differs from {d}",
                            out.dim
                        );
                    }
                    run.dim.get_or_insert(out.dim);
                    run.solver_warnings += out.warnings;
                    run.records.push(out.record);
                    run.stratified.extend(out.stratified);
                }
                Err(e) => {
                    warn!("layer {layer} step {step} skipped: {e}");
                    run.missing.push(MissingCell {
                        layer,
                        step,
                        reason: e.to_string(),
                    });
                }
            }
        }
    }
    run.peak_covariance_values = gauge::peak().saturating_sub(live_before);
    Ok(run)
}

/// A metric over layers (rows) and steps (columns); `None` marks a missing cell.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapGrid {
    pub metric: String,
    pub layers: Vec<u32>,
    pub steps: Vec<u64>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl HeatmapGrid {
    pub fn new(
        metric: impl Into<String>,
        layers: Vec<u32>,
        steps: Vec<u64>,
        values: Vec<Vec<Option<f64>>>,
    ) -> Result<Self> {
        if values.len() != layers.len() || values.iter().any(|r| r.len() != steps.len()) {
            return Err(Error::Data(
                "grid dimensions do not match its layers and steps".into(),
            ));
        }
        if values.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Data("grid values must be finite".into()));
        }
        Ok(HeatmapGrid {
            metric: metric.into(),
            layers,
            steps,
            values,
        })
    }

    pub fn get(&self, layer: u32, step: u64) -> Option<f64> {
        let i = self.layers.iter().position(|&l| l == layer)?;
        let j = self.steps.iter().position(|&s| s == step)?;
        self.values[i][j]
    }

    /// CSV with header `layer,<step>,<step>,...`; missing cells are empty.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["layer".to_string()];
        header.extend(self.steps.iter().map(u64::to_string));
        w.write_record(&header)?;
        for (layer, row) in self.layers.iter().zip(&self.values) {
            let mut rec = vec![layer.to_string()];
            rec.extend(
                row.iter()
                    .map(|v| v.map(|x| x.to_string()).unwrap_or_default()),
            );
            w.write_record(&rec)?;
        }
        finish_csv(w)
    }

    /// Parses the layout written by [`HeatmapGrid::to_csv`].
    pub fn from_csv(metric: impl Into<String>, text: &str) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_reader(text.as_bytes());
        let mut records = r.records();
        let header = records
            .next()
            .ok_or_else(|| Error::Format("empty grid file".into()))??;
        if header.get(0).map(str::trim) != Some("layer") {
            return Err(Error::Format(
                "grid header must start with \"layer\"".into(),
            ));
        }
        let steps = header
            .iter()
            .skip(1)
            .map(|s| {
                s.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::Format(format!("bad step {s:?} in grid header")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut layers = Vec::new();
        let mut values = Vec::new();
        for rec in records {
            let rec = rec?;
            let mut fields = rec.iter();
            let layer = fields.next().unwrap_or("");
            layers.push(
                layer
                    .trim()
                    .parse::<u32>()
                    .map_err(|_| Error::Format(format!("bad layer {layer:?} in grid")))?,
            );
            values.push(fields.map(parse_optional).collect::<Result<Vec<_>>>()?);
        }
        HeatmapGrid::new(metric, layers, steps, values).map_err(|e| Error::Format(e.to_string()))
    }
}

fn parse_optional(s: &str) -> Result<Option<f64>> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::Format(format!("bad value {s:?}")))
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|source| Error::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Write {
        path: dir.to_path_buf(),
        source,
    })
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Long-form `layer,step,tag,metric,value` table, missing cells included
/// with empty values.
pub fn metrics_csv(run: &AnalysisRun) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["layer", "step", "tag", "metric", "value"])?;
    for &layer in &run.layers {
        for &step in &run.steps {
            let rec = run.record(layer, step);
            for (tag, metric, field) in LONG_FORM {
                let value = rec
                    .and_then(|r| r.get(field))
                    .map(|v| v.to_string())
                    .unwrap_or_default();
                w.write_record([
                    layer.to_string(),
                    step.to_string(),
                    tag.into(),
                    metric.into(),
                    value,
                ])?;
            }
        }
    }
    finish_csv(w)
}

/// `layer,step,group,metric,value` rows for position-stratified records.
pub fn stratified_csv(run: &AnalysisRun) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["layer", "step", "group", "metric", "value"])?;
    for s in &run.stratified {
        for (name, value) in s.record.values() {
            w.write_record([
                s.record.layer.to_string(),
                s.record.step.to_string(),
                s.group.clone(),
                name.into(),
                value.to_string(),
            ])?;
        }
    }
    finish_csv(w)
}

pub fn summary_json(run: &AnalysisRun) -> Value {
    json!({
        "records": run.records.len(),
        "missing": run.missing,
        "layers": run.layers,
        "steps": run.steps,
        "dim": run.dim,
        "solver": run.solver.to_string(),
        "truncated": run.solver.is_truncating(),
        "sample_fraction": run.sample_fraction,
        "seed": run.seed,
        "solver_warnings": run.solver_warnings,
        "peak_covariance_values": run.peak_covariance_values,
        "grids": GRID_METRICS,
    })
}

/// Writes `metrics.csv`, one `grid_<metric>.csv` per grid metric,
/// `summary.json` and, when stratifying, `metrics_by_position.csv`.
pub fn write_analysis(run: &AnalysisRun, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    write_file(&out.join("metrics.csv"), &metrics_csv(run)?)?;
    for grid in run.grids()? {
        write_file(
            &out.join(format!("grid_{}.csv", grid.metric)),
            &grid.to_csv()?,
        )?;
    }
    if !run.stratified.is_empty() {
        write_file(&out.join("metrics_by_position.csv"), &stratified_csv(run)?)?;
    }
    write_file(
        &out.join("summary.json"),
        &serde_json::to_string_pretty(&summary_json(run))?,
    )
}

/// One approximation configuration: token sub-sampling or low rank.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Approximation {
    Sampling(f64),
    Rank(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FidelityRow {
    pub method: String,
    pub param: String,
    pub metric: String,
    pub mean_percent_error: f64,
    pub max_percent_error: f64,
    pub cells: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRun {
    pub config: Approximation,
    pub method: String,
    pub run: AnalysisRun,
    pub reports: Vec<FidelityReport>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub exact: AnalysisRun,
    pub runs: Vec<ComparisonRun>,
}

impl Comparison {
    pub fn rows(&self) -> Vec<FidelityRow> {
        let mut rows = Vec::new();
        for c in &self.runs {
            let param = match c.config {
                Approximation::Sampling(f) => f.to_string(),
                Approximation::Rank(k) => k.to_string(),
            };
            for metric in FIDELITY_METRICS {
                let errs: Vec<f64> = c.reports.iter().filter_map(|r| r.get(metric)).collect();
                let (mean, max) = if errs.is_empty() {
                    (f64::NAN, f64::NAN)
                } else {
                    (
                        errs.iter().sum::<f64>() / errs.len() as f64,
                        errs.iter().copied().fold(0.0, f64::max),
                    )
                };
                rows.push(FidelityRow {
                    method: c.method.clone(),
                    param: param.clone(),
                    metric: metric.to_string(),
                    mean_percent_error: mean,
                    max_percent_error: max,
                    cells: errs.len(),
                });
            }
        }
        rows
    }
}

/// Re-runs the analysis under each approximation and reports per-metric
/// percent errors against the exact run (all tokens, full eigensolver).
/// Ranks use the manifest's solver family, or randomized SVD when it is full.
pub fn compare(manifest: &RunManifest, fractions: &[f64], ranks: &[usize]) -> Result<Comparison> {
    let mut exact_manifest = manifest.clone();
    exact_manifest.options.sample_fraction = 1.0;
    exact_manifest.options.solver = Solver::Full;
    exact_manifest.options.stratify = None;
    let exact = analyze(&exact_manifest)?;

    let configs = fractions
        .iter()
        .map(|&f| Approximation::Sampling(f))
        .chain(ranks.iter().map(|&k| Approximation::Rank(k)));
    let mut runs = Vec::new();
    for config in configs {
        let mut m = exact_manifest.clone();
        let method = match config {
            Approximation::Sampling(f) => {
                m.options.sample_fraction = f;
                "sampling".to_string()
            }
            Approximation::Rank(k) => {
                m.options.solver = manifest.options.solver.with_rank(k);
                m.options.solver.method().to_string()
            }
        };
        let run = analyze(&m)?;
        let reports = exact
            .records
            .iter()
            .filter_map(|e| run.record(e.layer, e.step).map(|a| fidelity_report(e, a)))
            .collect::<Result<Vec<_>>>()?;
        runs.push(ComparisonRun {
            config,
            method,
            run,
            reports,
        });
    }
    Ok(Comparison { exact, runs })
}

pub fn fidelity_csv(rows: &[FidelityRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "method",
        "param",
        "metric",
        "mean_percent_error",
        "max_percent_error",
        "cells",
    ])?;
    let fmt = |v: f64| {
        if v.is_finite() {
            v.to_string()
        } else {
            String::new()
        }
    };
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.param.clone(),
            r.metric.clone(),
            fmt(r.mean_percent_error),
            fmt(r.max_percent_error),
            r.cells.to_string(),
        ])?;
    }
    finish_csv(w)
}

/// Layer-averaged `step -> value` series of one record metric.
pub fn layer_mean_series(records: &[MetricRecord], metric: &str) -> BTreeMap<u64, f64> {
    let mut acc: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for r in records {
        if let Some(v) = r.get(metric) {
            let e = acc.entry(r.step).or_default();
            e.0 += v;
            e.1 += 1;
        }
    }
    acc.into_iter()
        .map(|(s, (sum, n))| (s, sum / n as f64))
        .collect()
}

fn correlation_entry(result: Result<CorrelationResult>) -> Value {
    match result {
        Ok(c) => json!({ "r": c.r, "n_points": c.n_points }),
        Err(e) => json!({ "r": null, "error": e.to_string() }),
    }
}

/// Pearson correlation of each layer-averaged metric with the loss, for the
/// exact run and every approximation, keyed by method/param then metric.
pub fn correlation_fidelity_json(cmp: &Comparison, loss: &BTreeMap<u64, f64>) -> Value {
    let mut out = Map::new();
    for c in &cmp.runs {
        let mut per_metric = Map::new();
        for metric in METRIC_NAMES {
            let ex = layer_mean_series(&cmp.exact.records, metric);
            let ap = layer_mean_series(&c.run.records, metric);
            let pairs = |s: &BTreeMap<u64, f64>| -> Vec<(f64, f64)> {
                s.iter()
                    .filter_map(|(step, v)| loss.get(step).map(|l| (*v, *l)))
                    .collect()
            };
            let entry = match correlation_fidelity(&pairs(&ex), &pairs(&ap)) {
                Ok((a, b)) => json!({
                    "exact": { "r": a.r, "n_points": a.n_points },
                    "approx": { "r": b.r, "n_points": b.n_points },
                }),
                Err(e) => json!({ "exact": null, "approx": null, "error": e.to_string() }),
            };
            per_metric.insert(metric.to_string(), entry);
        }
        let key = match c.config {
            Approximation::Sampling(f) => format!("sampling:{f}"),
            Approximation::Rank(k) => format!("{}:{k}", c.method),
        };
        out.insert(key, Value::Object(per_metric));
    }
    Value::Object(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegimeRow {
    pub layer: u32,
    pub step: u64,
    pub label: RegimeLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SignatureRow {
    pub layer: u32,
    pub step: u64,
    pub label: Signature,
}

/// One regime label per record.
pub fn classify(run: &AnalysisRun, th: &RegimeThresholds) -> Result<Vec<RegimeRow>> {
    th.validate()?;
    run.records
        .iter()
        .map(|r| {
            Ok(RegimeRow {
                layer: r.layer,
                step: r.step,
                label: classify_regime(r, th)?,
            })
        })
        .collect()
}

/// Joint-trend signatures per layer over the post-activation SE, PR, EEE
/// and JS series, one row per record once `window` steps are available.
pub fn signatures(run: &AnalysisRun, window: usize) -> Result<Vec<SignatureRow>> {
    if window < 2 {
        return Err(arg(format!(
            "trend window must be at least 2, got {window}"
        )));
    }
    let mut rows = Vec::new();
    for &layer in &run.layers {
        let recs: Vec<&MetricRecord> = run.records.iter().filter(|r| r.layer == layer).collect();
        let series =
            |f: fn(&MetricRecord) -> f64| -> Vec<f64> { recs.iter().map(|r| f(r)).collect() };
        let (se, pr, eee, js) = (
            series(|r| r.se_post),
            series(|r| r.pr_post),
            series(|r| r.eee_post),
            series(|r| r.js),
        );
        for end in window..=recs.len() {
            let t = |s: &[f64]| trend_of(&s[..end], window, DEFAULT_SLOPE_TOL);
            rows.push(SignatureRow {
                layer,
                step: recs[end - 1].step,
                label: match_signature(t(&se)?, t(&pr)?, t(&eee)?, t(&js)?),
            });
        }
    }
    Ok(rows)
}

fn labels_csv<'a>(rows: impl Iterator<Item = (u32, u64, &'a str)>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["layer", "step", "label"])?;
    for (layer, step, label) in rows {
        w.write_record([layer.to_string(), step.to_string(), label.to_string()])?;
    }
    finish_csv(w)
}

pub fn regimes_csv(rows: &[RegimeRow]) -> Result<String> {
    labels_csv(rows.iter().map(|r| (r.layer, r.step, r.label.as_str())))
}

pub fn signatures_csv(rows: &[SignatureRow]) -> Result<String> {
    labels_csv(rows.iter().map(|r| (r.layer, r.step, r.label.as_str())))
}

/// Writes `regimes.csv`, `regimes.json` and `signatures.csv`.
pub fn write_classification(
    regimes: &[RegimeRow],
    sigs: &[SignatureRow],
    out: &Path,
) -> Result<()> {
    ensure_dir(out)?;
    write_file(&out.join("regimes.csv"), &regimes_csv(regimes)?)?;
    write_file(
        &out.join("regimes.json"),
        &serde_json::to_string_pretty(regimes)?,
    )?;
    write_file(&out.join("signatures.csv"), &signatures_csv(sigs)?)
}

/// Reads a long-form metrics table back into `(layer, step) -> metric -> value`.
/// Record metric names are rebuilt from tag and metric (`se` + `pre` is
/// `se_pre`, pair metrics keep their name). Empty values are skipped.
pub fn parse_metrics_csv(text: &str) -> Result<BTreeMap<(u32, u64), BTreeMap<String, f64>>> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("metrics table lacks a {name:?} column")))
    };
    let (cl, cs, ct, cm, cv) = (
        col("layer")?,
        col("step")?,
        col("tag")?,
        col("metric")?,
        col("value")?,
    );
    let mut out: BTreeMap<(u32, u64), BTreeMap<String, f64>> = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let layer: u32 = field(cl)
            .parse()
            .map_err(|_| Error::Format(format!("bad layer {:?}", field(cl))))?;
        let step: u64 = field(cs)
            .parse()
            .map_err(|_| Error::Format(format!("bad step {:?}", field(cs))))?;
        let tag = field(ct);
        let metric = field(cm);
        let name = match tag {
            "pre" | "post" => format!("{metric}_{tag}"),
            "pair" => metric.to_string(),
            _ => return Err(Error::Format(format!("bad tag {tag:?}"))),
        };
        if !METRIC_NAMES.contains(&name.as_str()) {
            return Err(Error::Format(format!(
                "unknown metric {metric:?} with tag {tag:?}"
            )));
        }
        let Some(value) = parse_optional(field(cv))? else {
            continue;
        };
        if !value.is_finite() {
            return Err(Error::Format(format!("non-finite value for {name}")));
        }
        out.entry((layer, step)).or_default().insert(name, value);
    }
    Ok(out)
}

/// Reads a `step,loss` table (header required, extra columns ignored).
pub fn parse_loss_csv(text: &str) -> Result<BTreeMap<u64, f64>> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("loss table lacks a {name:?} column")))
    };
    let (cs, cl) = (col("step")?, col("loss")?);
    let mut out = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        let s = rec.get(cs).unwrap_or("");
        let l = rec.get(cl).unwrap_or("");
        let step: u64 = s
            .parse()
            .map_err(|_| Error::Format(format!("bad step {s:?}")))?;
        let loss: f64 = l
            .parse()
            .map_err(|_| Error::Format(format!("bad loss {l:?}")))?;
        if !loss.is_finite() {
            return Err(Error::Format(format!("non-finite loss at step {step}")));
        }
        if out.insert(step, loss).is_some() {
            return Err(Error::Format(format!(
                "duplicate step {step} in loss table"
            )));
        }
    }
    Ok(out)
}

/// Pearson correlation between each layer-averaged metric and the loss over
/// the steps both tables share. Fails when fewer than 3 steps are shared;
/// a metric whose correlation is undefined maps to `r: null` with a reason.
pub fn correlate(
    metrics: &BTreeMap<(u32, u64), BTreeMap<String, f64>>,
    loss: &BTreeMap<u64, f64>,
) -> Result<BTreeMap<String, Result<CorrelationResult>>> {
    let metric_steps: BTreeSet<u64> = metrics.keys().map(|k| k.1).collect();
    let common: Vec<u64> = metric_steps
        .into_iter()
        .filter(|s| loss.contains_key(s))
        .collect();
    if common.len() < 3 {
        return Err(arg(format!(
            "need at least 3 steps shared by metrics and loss, found {}",
            common.len()
        )));
    }
    let mut out = BTreeMap::new();
    for metric in METRIC_NAMES {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for &step in &common {
            let vals: Vec<f64> = metrics
                .range((0, step)..=(u32::MAX, step))
                .filter(|((_, s), _)| *s == step)
                .filter_map(|(_, m)| m.get(metric).copied())
                .collect();
            if !vals.is_empty() {
                xs.push(vals.iter().sum::<f64>() / vals.len() as f64);
                ys.push(loss[&step]);
            }
        }
        out.insert(
            metric.to_string(),
            pearson(&xs, &ys).map(|c| c.named(metric)),
        );
    }
    Ok(out)
}

pub fn correlations_json(results: &BTreeMap<String, Result<CorrelationResult>>) -> Value {
    let map: Map<String, Value> = results
        .iter()
        .map(|(k, v)| {
            let entry = match v {
                Ok(c) => correlation_entry(Ok(c.clone())),
                Err(e) => json!({ "r": null, "error": e.to_string() }),
            };
            (k.clone(), entry)
        })
        .collect();
    Value::Object(map)
}

/// Reads both tables, correlates, and writes `correlations.json` into `out`.
pub fn correlate_files(metrics_csv: &Path, loss_csv: &Path, out: &Path) -> Result<Value> {
    let metrics = parse_metrics_csv(&read_text(metrics_csv)?)?;
    let loss = parse_loss_csv(&read_text(loss_csv)?)?;
    let json = correlations_json(&correlate(&metrics, &loss)?);
    ensure_dir(out)?;
    write_file(
        &out.join("correlations.json"),
        &serde_json::to_string_pretty(&json)?,
    )?;
    Ok(json)
}

pub fn load_loss(path: &Path) -> Result<BTreeMap<u64, f64>> {
    parse_loss_csv(&read_text(path)?)
}

pub fn load_thresholds(path: &Path) -> Result<RegimeThresholds> {
    RegimeThresholds::from_json(&read_text(path)?)
}

impl FromStr for Solver {
    type Err = Error;

    /// `full`, `randsvd` or `lanczos`; the latter two take their rank
    /// from `randsvd:K` / `lanczos:K` or are given one later.
    fn from_str(s: &str) -> Result<Self> {
        let (name, k) = match s.split_once(':') {
            Some((n, k)) => (
                n,
                Some(
                    k.parse::<usize>()
                        .map_err(|_| arg(format!("bad rank {k:?}")))?,
                ),
            ),
            None => (s, None),
        };
        match (name, k) {
            ("full", None) => Ok(Solver::Full),
            ("randsvd", k) => Ok(Solver::randsvd(k.unwrap_or(0))),
            ("lanczos", k) => Ok(Solver::lanczos(k.unwrap_or(0))),
            _ => Err(arg(format!(
                "unknown solver {s:?}; expected full, randsvd or lanczos"
            ))),
        }
    }
}
