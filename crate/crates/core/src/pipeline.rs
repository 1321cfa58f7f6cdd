//! End-to-end batch run driven by one JSON configuration.
//!
//! Work is split into (scenario, ticker, date) units that run on a bounded
//! worker pool. Every artifact is written once by the coordinating thread,
//! hashed, and listed in `manifest.json` together with the resolved
//! configuration, so two runs with the same inputs produce byte-identical
//! trees under consecutive `run-NNNN` directories.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assignment::{assign_day, write_assignment, Participation};
use crate::binning::{opt, BinnedCurve};
use crate::error::{Error, Result};
use crate::impact::{
    duration_curve, fit_decay, fit_execution_profile, post_execution_samples, profile_points,
    sql_curve, DecaySettings, FitSettings, ImpactObservation, SqlMode,
};
use crate::lmf::{
    acf, classify_traders, default_tau_range, fit_alpha, fit_gamma, lmf_compare, run_lengths,
    AcfEstimate, AcfVariant, ClassifySettings, StockLmf, TraderClass,
};
use crate::market_data::{
    compute_daily_stats, parse_trades, rolling_stats, split_days, write_daily_stats,
    DailyStats, RejectionReport, Schema, Sign, TradeEvent, DATE_FORMAT, ROLLING_WINDOW,
};
use crate::metaorder::{build_metaorders, child_records, write_records, Metaorder, MetaorderRecord};
use crate::nls::{CurveModel, DecayModel, FitResult, PowerLaw};
use crate::powerlaw::PowerLawFit;
use crate::simulator::{simulate, true_run_check, RunCheckReport, SimConfig, SimOutput};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DateRange {
    #[serde(default)]
    pub start: Option<NaiveDate>,
    #[serde(default)]
    pub end: Option<NaiveDate>,
}

impl DateRange {
    pub fn contains(&self, d: NaiveDate) -> bool {
        self.start.is_none_or(|s| d >= s) && self.end.is_none_or(|e| d <= e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub label: String,
    pub n_traders: usize,
    #[serde(flatten)]
    pub participation: Participation,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRun {
    pub label: String,
    #[serde(flatten)]
    pub config: SimConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyticsConfig {
    pub sql: bool,
    pub duration: bool,
    pub profile: bool,
    pub decay: bool,
    pub lmf: bool,
    pub sql_bins: usize,
    pub duration_bins: usize,
    pub min_children: usize,
    pub phi_bins: usize,
    pub z_bins: usize,
    pub z_max: f64,
    pub min_bin_count: usize,
    pub tau_min: Option<usize>,
    pub tau_max: Option<usize>,
    pub acf_centered: bool,
    pub st_test_level: f64,
    pub min_orders: usize,
    pub compare_bins: usize,
}

impl Default for AnalyticsConfig {
    fn default() -> Self {
        AnalyticsConfig {
            sql: true,
            duration: true,
            profile: true,
            decay: true,
            lmf: true,
            sql_bins: crate::impact::DEFAULT_SQL_BINS,
            duration_bins: crate::impact::DEFAULT_SQL_BINS,
            min_children: crate::impact::DEFAULT_MIN_CHILDREN,
            phi_bins: crate::impact::DEFAULT_PHI_BINS,
            z_bins: crate::impact::DEFAULT_Z_BINS,
            z_max: crate::impact::DEFAULT_Z_MAX,
            min_bin_count: crate::impact::MIN_BIN_COUNT,
            tau_min: None,
            tau_max: None,
            acf_centered: false,
            st_test_level: crate::lmf::DEFAULT_TEST_LEVEL,
            min_orders: crate::lmf::DEFAULT_MIN_ORDERS,
            compare_bins: 10,
        }
    }
}

impl AnalyticsConfig {
    pub fn lmf_settings(&self) -> LmfSettings {
        LmfSettings {
            tau_min: self.tau_min,
            tau_max: self.tau_max,
            variant: if self.acf_centered {
                AcfVariant::Centered
            } else {
                AcfVariant::Raw
            },
            classify: ClassifySettings {
                test_level: self.st_test_level,
                min_orders: self.min_orders,
            },
        }
    }
}

fn default_delimiter() -> String {
    ",".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Glob per ticker, relative to the configuration file.
    #[serde(default)]
    pub data: BTreeMap<String, String>,
    /// Tickers to process; all keys of `data` when absent.
    #[serde(default)]
    pub tickers: Option<Vec<String>>,
    #[serde(default)]
    pub date_range: Option<DateRange>,
    #[serde(default)]
    pub schema: Schema,
    #[serde(default = "default_delimiter")]
    pub delimiter: String,
    #[serde(default)]
    pub scenarios: Vec<Scenario>,
    #[serde(default)]
    pub analytics: AnalyticsConfig,
    #[serde(default)]
    pub simulator: Vec<SimRun>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub workers: Option<usize>,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Read a config file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg = Self::from_json(&text)?;
        let base = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok((cfg, base))
    }

    pub fn tickers(&self) -> Vec<String> {
        self.tickers
            .clone()
            .unwrap_or_else(|| self.data.keys().cloned().collect())
    }

    pub fn delimiter_byte(&self) -> Result<u8> {
        match self.delimiter.as_bytes() {
            [b] => Ok(*b),
            _ => Err(Error::Config(format!(
                "delimiter must be one byte, got {:?}",
                self.delimiter
            ))),
        }
    }

    /// Check labels and expand every data glob. Each ticker must match at
    /// least one file.
    pub fn validate(&self, base: &Path) -> Result<BTreeMap<String, Vec<PathBuf>>> {
        self.delimiter_byte()?;
        if self.scenarios.is_empty() && self.simulator.is_empty() {
            return Err(Error::Config("nothing to run: no scenarios and no simulator runs".into()));
        }
        let mut labels = std::collections::BTreeSet::new();
        for l in self
            .scenarios
            .iter()
            .map(|s| &s.label)
            .chain(self.simulator.iter().map(|s| &s.label))
        {
            if l.is_empty() || l.contains(['/', '\\']) || l == "sim" || l == "plots" {
                return Err(Error::Config(format!("invalid label {l:?}")));
            }
            if !labels.insert(l.clone()) {
                return Err(Error::Config(format!("duplicate label {l:?}")));
            }
        }
        for s in &self.scenarios {
            if s.n_traders == 0 {
                return Err(Error::Config(format!("scenario {} has no traders", s.label)));
            }
        }
        for s in &self.simulator {
            s.config
                .validate()
                .map_err(|e| Error::Config(format!("simulator run {}: {e}", s.label)))?;
        }
        if !self.scenarios.is_empty() && self.tickers().is_empty() {
            return Err(Error::Config("scenarios given but no data".into()));
        }
        let mut files = BTreeMap::new();
        for t in self.tickers() {
            let pat = self
                .data
                .get(&t)
                .ok_or_else(|| Error::Config(format!("no data path for ticker {t}")))?;
            let full = base.join(pat);
            let pattern = full.to_string_lossy();
            let mut paths: Vec<PathBuf> = glob::glob(&pattern)
                .map_err(|e| Error::Config(format!("bad pattern {pat}: {e}")))?
                .filter_map(std::result::Result::ok)
                .filter(|p| p.is_file())
                .collect();
            paths.sort();
            if paths.is_empty() {
                return Err(Error::Config(format!("pattern {pat} for {t} matches no files")));
            }
            files.insert(t, paths);
        }
        Ok(files)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
    pub stage: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ticker: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub date: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ticker: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub date: Option<String>,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub ticker: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config: PipelineConfig,
    pub inputs: Vec<InputFile>,
    pub artifacts: Vec<Artifact>,
    pub failures: Vec<Failure>,
    /// Analyses that could not run for lack of data; not failures.
    pub skipped: Vec<Failure>,
}

impl Manifest {
    pub fn artifact(&self, path: &str) -> Option<&Artifact> {
        self.artifacts.iter().find(|a| a.path == path)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub manifest: Manifest,
}

impl RunOutcome {
    /// 0 when every unit succeeded, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.manifest.failures.is_empty() {
            0
        } else {
            1
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Default)]
struct Scope {
    stage: &'static str,
    scenario: Option<String>,
    ticker: Option<String>,
    date: Option<String>,
}

impl Scope {
    fn stage(stage: &'static str) -> Self {
        Scope {
            stage,
            ..Default::default()
        }
    }

    fn scenario(mut self, s: &str) -> Self {
        self.scenario = Some(s.to_string());
        self
    }

    fn unit(mut self, ticker: &str, date: NaiveDate) -> Self {
        self.ticker = Some(ticker.to_string());
        self.date = Some(date.format(DATE_FORMAT).to_string());
        self
    }

    fn ticker(mut self, t: &str) -> Self {
        self.ticker = Some(t.to_string());
        self
    }

    fn fail(&self, e: impl std::fmt::Display) -> Failure {
        Failure {
            stage: self.stage.to_string(),
            scenario: self.scenario.clone(),
            ticker: self.ticker.clone(),
            date: self.date.clone(),
            error: e.to_string(),
        }
    }
}

/// Single writer for a run directory. Files are created exclusively so
/// nothing is overwritten within a run.
struct Sink {
    root: PathBuf,
    artifacts: Vec<Artifact>,
}

impl Sink {
    fn put(&mut self, rel: &str, bytes: &[u8], scope: &Scope) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&path, e))?;
        self.artifacts.push(Artifact {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
            stage: scope.stage.to_string(),
            scenario: scope.scenario.clone(),
            ticker: scope.ticker.clone(),
            date: scope.date.clone(),
        });
        Ok(())
    }

    fn put_json<T: Serialize>(&mut self, rel: &str, value: &T, scope: &Scope) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.put(rel, &bytes, scope)
    }
}

fn csv_bytes<F: FnOnce(&mut Vec<u8>) -> Result<()>>(f: F) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

/// `<output_dir>/run-NNNN` for the smallest unused `NNNN`.
pub fn next_run_dir(output_dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(output_dir).map_err(|e| Error::io(output_dir, e))?;
    for k in 1..100_000 {
        let p = output_dir.join(format!("run-{k:04}"));
        match fs::create_dir(&p) {
            Ok(()) => return Ok(p),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&p, e)),
        }
    }
    Err(Error::Config(format!("no free run directory under {}", output_dir.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmfSettings {
    pub tau_min: Option<usize>,
    pub tau_max: Option<usize>,
    pub variant: AcfVariant,
    pub classify: ClassifySettings,
}

impl Default for LmfSettings {
    fn default() -> Self {
        AnalyticsConfig::default().lmf_settings()
    }
}

impl LmfSettings {
    pub fn tau_range(&self, n_signs: usize) -> (usize, usize) {
        let (lo, hi) = default_tau_range(n_signs);
        (self.tau_min.unwrap_or(lo), self.tau_max.unwrap_or(hi))
    }
}

/// γ from the full market sign stream of a stock.
pub fn infer_gamma(
    report: &mut StockLmf,
    market_signs: &[Sign],
    settings: &LmfSettings,
) -> Option<AcfEstimate> {
    report.n_signs = market_signs.len();
    let (lo, hi) = settings.tau_range(market_signs.len());
    let est = match acf(market_signs, hi, settings.variant) {
        Ok(a) => a,
        Err(e) => {
            report.errors.push(format!("acf: {e}"));
            return None;
        }
    };
    match fit_gamma(&est, lo, hi) {
        Ok(g) => report.set_gamma(&g),
        Err(e) => report.errors.push(format!("gamma: {e}")),
    }
    Some(est)
}

/// γ from the market stream and α from the run lengths of traders
/// classified as splitters.
pub fn infer_stock<K: Ord + Clone>(
    stock: &str,
    market_signs: &[Sign],
    trader_sequences: &BTreeMap<K, Vec<Sign>>,
    settings: &LmfSettings,
) -> (StockLmf, Option<AcfEstimate>) {
    let mut report = StockLmf::new(stock, settings.variant);
    let est = infer_gamma(&mut report, market_signs, settings);
    let classes = classify_traders(trader_sequences, &settings.classify);
    let mut lengths = Vec::new();
    for (k, c) in &classes {
        match c.class {
            TraderClass::Splitter => {
                report.n_splitters += 1;
                lengths.extend(run_lengths(&trader_sequences[k]));
            }
            TraderClass::Random => report.n_random += 1,
            TraderClass::Unlabelled => report.n_unlabelled += 1,
        }
    }
    match fit_alpha(&lengths) {
        Ok(f) => report.set_alpha(&f),
        Err(e) => report.errors.push(format!("alpha: {e}")),
    }
    (report, est)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub label: String,
    pub config: SimConfig,
    pub check: Option<RunCheckReport>,
    pub check_error: Option<String>,
    /// γ from the sign stream, α from the recorded completed metaorders.
    pub lmf: StockLmf,
    /// α re-estimated from per-trader sign runs of splitters, as the
    /// reconstruction pipeline would see them.
    pub alpha_from_runs: Option<PowerLawFit>,
}

/// Simulate, self-check and run the inference on one configuration.
pub fn simulate_and_infer(label: &str, config: &SimConfig, settings: &LmfSettings) -> Result<(SimOutput, SimReport, Option<AcfEstimate>)> {
    let out = simulate(config)?;
    let (check, check_error) = match true_run_check(&out) {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let (run_based, est) = infer_stock(label, &out.signs, &out.trader_sequences(), settings);
    let mut lmf = run_based.clone();
    lmf.alpha_pdf = None;
    lmf.alpha_lmf = None;
    lmf.errors.retain(|e| !e.starts_with("alpha"));
    let lengths: Vec<usize> = out.completed_lengths().iter().map(|&l| l as usize).collect();
    match fit_alpha(&lengths) {
        Ok(f) => lmf.set_alpha(&f),
        Err(e) => lmf.errors.push(format!("alpha: {e}")),
    }
    let alpha_from_runs = run_based.alpha_pdf.map(|a| PowerLawFit {
        alpha_pdf: a,
        alpha_lmf: a - 1.0,
        x_min: run_based.x_min.unwrap_or(0),
        ks_distance: run_based.ks.unwrap_or(f64::NAN),
        n_tail: run_based.n_tail.unwrap_or(0),
        std_err: run_based.alpha_std_err.unwrap_or(f64::NAN),
        small_tail: run_based.small_tail.unwrap_or(true),
    });
    let report = SimReport {
        label: label.to_string(),
        config: config.clone(),
        check,
        check_error,
        lmf,
        alpha_from_runs,
    };
    Ok((out, report, est))
}

/// Binned curve plus optional fit, as stored under `analysis/`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveReport {
    pub family: String,
    pub curve: BinnedCurve,
    pub fit: Option<FitResult>,
    /// Multiplier of `Y·sqrt(x)` in the square-root overlay.
    pub theory_scale: Option<f64>,
    pub note: Option<String>,
    pub settings: serde_json::Value,
}

fn model_for(name: &str) -> Option<&'static dyn CurveModel> {
    match name {
        "power_law" => Some(&PowerLaw),
        "impact_decay" => Some(&DecayModel),
        _ => None,
    }
}

/// CSV bytes for one curve report.
///
/// Square-root-law reports get a `theory` column, profile and decay reports
/// a `fitted` column evaluated at the bin centers; other families have the
/// four base columns only.
pub fn plot_rows(report: &CurveReport) -> Result<Vec<u8>> {
    let c = &report.curve;
    let (extra_name, extra): (Option<&str>, Vec<Option<f64>>) = match report.family.as_str() {
        "sql" => {
            let col = c
                .bin_centers
                .iter()
                .map(|x| {
                    report
                        .fit
                        .as_ref()
                        .map(|f| f.params[0] * report.theory_scale.unwrap_or(1.0) * x.sqrt())
                })
                .collect();
            (Some("theory"), col)
        }
        "profile" | "decay" => {
            let model = report.fit.as_ref().and_then(|f| model_for(&f.model).map(|m| (m, f)));
            let col = c
                .bin_centers
                .iter()
                .map(|&x| model.map(|(m, f)| m.value(x, &f.params)))
                .collect();
            (Some("fitted"), col)
        }
        _ => (None, Vec::new()),
    };
    let mean_name = if report.family == "sql" { "mean_impact" } else { "mean" };
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["bin_center", mean_name, "count", "stderr"];
    header.extend(extra_name);
    w.write_record(&header)?;
    for i in 0..c.n_bins() {
        let mut row = vec![
            c.bin_centers[i].to_string(),
            opt(c.mean_y[i]),
            c.count[i].to_string(),
            opt(c.stderr[i]),
        ];
        if extra_name.is_some() {
            row.push(opt(extra[i]));
        }
        w.write_record(&row)?;
    }
    w.into_inner()
        .map_err(|e| Error::io("<plot buffer>", e.into_error()))
}

/// Plot-ready CSV for every curve report in `analysis_dir`.
///
/// `required` names report files (without `.json`) that must exist; the
/// result maps each report's stem to its CSV bytes.
pub fn emit_plot_data(analysis_dir: &Path, required: &[&str]) -> Result<BTreeMap<String, Vec<u8>>> {
    for r in required {
        let p = analysis_dir.join(format!("{r}.json"));
        if !p.is_file() {
            return Err(Error::MissingArtifact {
                stage: format!("analyze {}", r.split('_').next().unwrap_or(r)),
                path: p,
            });
        }
    }
    let mut stems: Vec<(String, PathBuf)> = match fs::read_dir(analysis_dir) {
        Ok(rd) => rd
            .filter_map(std::result::Result::ok)
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .filter_map(|p| Some((p.file_stem()?.to_string_lossy().into_owned(), p)))
            .collect(),
        Err(_) => {
            return Err(Error::MissingArtifact {
                stage: "analyze".into(),
                path: analysis_dir.to_path_buf(),
            })
        }
    };
    stems.sort();
    let mut out = BTreeMap::new();
    for (stem, path) in stems {
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let report: CurveReport = serde_json::from_str(&text)?;
        out.insert(stem, plot_rows(&report)?);
    }
    Ok(out)
}

/// Output of one (scenario, ticker, date) unit.
struct UnitResult {
    ticker: String,
    date: NaiveDate,
    assignment_csv: Vec<u8>,
    metaorders: Vec<Metaorder>,
    metaorders_csv: Vec<u8>,
    children_csv: Vec<u8>,
    decay_points: Vec<(f64, f64)>,
    sequences: BTreeMap<u32, Vec<Sign>>,
}

fn run_unit(
    scenario: &Scenario,
    trades: &[TradeEvent],
    stats: &DailyStats,
    z_max: f64,
) -> Result<UnitResult> {
    let (_, assignment) = assign_day(
        trades,
        scenario.n_traders,
        &scenario.participation,
        scenario.seed,
        &stats.ticker,
        stats.date,
    )?;
    let day = build_metaorders(trades, &assignment, stats)?;
    let q: f64 = day.metaorders.iter().map(|m| m.total_volume).sum();
    if q + day.filtered_volume != stats.daily_volume {
        return Err(Error::Contract(format!(
            "volume not conserved: {} + {} != {}",
            q, day.filtered_volume, stats.daily_volume
        )));
    }
    let mut decay_points = Vec::new();
    for m in &day.metaorders {
        for s in post_execution_samples(m, trades, z_max)? {
            if s.scaled_impact.is_finite() {
                decay_points.push((s.z, s.scaled_impact));
            }
        }
    }
    let mut sequences: BTreeMap<u32, Vec<Sign>> = BTreeMap::new();
    for (t, id) in trades.iter().zip(&assignment.trader_ids) {
        sequences.entry(*id).or_default().push(t.sign);
    }
    let records: Vec<MetaorderRecord> = day.metaorders.iter().map(MetaorderRecord::from).collect();
    let mut children = Vec::new();
    for m in &day.metaorders {
        children.extend(child_records(m)?);
    }
    Ok(UnitResult {
        ticker: stats.ticker.clone(),
        date: stats.date,
        assignment_csv: csv_bytes(|b| write_assignment(b, trades, &assignment))?,
        metaorders_csv: csv_bytes(|b| write_records(b, &records))?,
        children_csv: csv_bytes(|b| write_records(b, &children))?,
        metaorders: day.metaorders,
        decay_points,
        sequences,
    })
}

fn fit_or_skip<T>(
    r: Result<T>,
    scope: &Scope,
    what: &str,
    skipped: &mut Vec<Failure>,
    failures: &mut Vec<Failure>,
) -> Option<T> {
    match r {
        Ok(v) => Some(v),
        Err(e @ (Error::InsufficientData(_) | Error::NonConvergence { .. })) => {
            skipped.push(scope.fail(format!("{what}: {e}")));
            None
        }
        Err(e) => {
            failures.push(scope.fail(format!("{what}: {e}")));
            None
        }
    }
}

struct Analyses<'a> {
    cfg: &'a AnalyticsConfig,
    sink: &'a mut Sink,
    failures: &'a mut Vec<Failure>,
    skipped: &'a mut Vec<Failure>,
}

impl Analyses<'_> {
    fn curve(
        &mut self,
        rel: &str,
        scope: &Scope,
        report: CurveReport,
    ) -> Result<()> {
        self.sink.put_json(rel, &report, scope)
    }

    fn run(&mut self, label: &str, units: &[UnitResult]) -> Result<Vec<&'static str>> {
        let cfg = self.cfg;
        let dir = format!("{label}/analysis");
        let metaorders: Vec<&Metaorder> = units.iter().flat_map(|u| &u.metaorders).collect();
        let obs: Vec<ImpactObservation> = metaorders.iter().map(|m| ImpactObservation::from(*m)).collect();
        let mut required = Vec::new();

        if cfg.sql {
            let scope = Scope::stage("analyze sql").scenario(label);
            let settings = serde_json::json!({ "n_bins": cfg.sql_bins, "mode": "pooled" });
            if let Some(c) = fit_or_skip(sql_curve(&obs, SqlMode::Pooled, cfg.sql_bins), &scope, "sql", self.skipped, self.failures) {
                if c.fit.is_none() {
                    self.skipped.push(scope.fail("sql: insufficient bins for the power fit"));
                }
                self.curve(&format!("{dir}/sql_pooled.json"), &scope, CurveReport {
                    family: "sql".into(),
                    curve: c.curve,
                    fit: c.fit,
                    theory_scale: Some(1.0),
                    note: None,
                    settings,
                })?;
                required.push("sql_pooled");
            }
            let mut by_stock: BTreeMap<&str, Vec<ImpactObservation>> = BTreeMap::new();
            for o in &obs {
                by_stock.entry(o.ticker.as_str()).or_default().push(o.clone());
            }
            for (t, o) in by_stock {
                let scope = scope.clone().ticker(t);
                if let Some(c) = fit_or_skip(sql_curve(&o, SqlMode::PerStock, cfg.sql_bins), &scope, "sql", self.skipped, self.failures) {
                    let mean_vol = c.mean_vol;
                    self.curve(&format!("{dir}/sql_stock_{t}.json"), &scope, CurveReport {
                        family: "sql".into(),
                        curve: c.curve,
                        fit: c.fit,
                        theory_scale: Some(mean_vol),
                        note: None,
                        settings: serde_json::json!({ "n_bins": cfg.sql_bins, "mode": "per_stock" }),
                    })?;
                }
            }
        }

        if cfg.duration {
            let scope = Scope::stage("analyze duration").scenario(label);
            if let Some(c) = fit_or_skip(duration_curve(&obs, cfg.duration_bins), &scope, "duration", self.skipped, self.failures) {
                self.curve(&format!("{dir}/duration.json"), &scope, CurveReport {
                    family: "duration".into(),
                    curve: c,
                    fit: None,
                    theory_scale: None,
                    note: None,
                    settings: serde_json::json!({ "n_bins": cfg.duration_bins }),
                })?;
                required.push("duration");
            }
        }

        if cfg.profile {
            let scope = Scope::stage("analyze profile").scenario(label);
            let owned: Vec<Metaorder> = metaorders.iter().map(|m| (*m).clone()).collect();
            let settings = FitSettings {
                n_bins: cfg.phi_bins,
                min_bin_count: cfg.min_bin_count,
                count_weighted: false,
            };
            let pts = profile_points(&owned, cfg.min_children)?;
            let curve = crate::binning::linear_bin(&pts, cfg.phi_bins, 0.0, 1.0);
            let fit = fit_or_skip(fit_execution_profile(&pts, &settings), &scope, "profile", self.skipped, self.failures);
            self.curve(&format!("{dir}/profile.json"), &scope, CurveReport {
                family: "profile".into(),
                curve,
                fit: fit.map(|f| f.fit),
                theory_scale: None,
                note: None,
                settings: serde_json::json!({ "settings": settings, "min_children": cfg.min_children }),
            })?;
            required.push("profile");
        }

        if cfg.decay {
            let scope = Scope::stage("analyze decay").scenario(label);
            let settings = DecaySettings {
                n_bins: cfg.z_bins,
                z_max: cfg.z_max,
                min_bin_count: cfg.min_bin_count,
                count_weighted: false,
            };
            let pts: Vec<(f64, f64)> = units.iter().flat_map(|u| u.decay_points.iter().copied()).collect();
            let curve = crate::binning::log_bin_range(&pts, cfg.z_bins, 1.0, cfg.z_max);
            let fit = fit_or_skip(fit_decay(&pts, &settings), &scope, "decay", self.skipped, self.failures);
            self.curve(&format!("{dir}/decay.json"), &scope, CurveReport {
                family: "decay".into(),
                curve,
                fit: fit.map(|f| f.fit),
                theory_scale: None,
                note: None,
                settings: serde_json::to_value(&settings)?,
            })?;
            required.push("decay");
        }
        Ok(required)
    }
}

/// Ingest and daily statistics for every configured ticker.
struct Loaded {
    days: BTreeMap<(String, NaiveDate), Vec<TradeEvent>>,
    stats: BTreeMap<(String, NaiveDate), DailyStats>,
}

fn load(
    cfg: &PipelineConfig,
    files: &BTreeMap<String, Vec<PathBuf>>,
    sink: &mut Sink,
    failures: &mut Vec<Failure>,
) -> Result<Loaded> {
    let schema = &cfg.schema;
    let delim = cfg.delimiter_byte()?;
    let parsed: Vec<(String, Result<crate::market_data::ParsedTrades>)> = files
        .par_iter()
        .flat_map(|(t, paths)| paths.par_iter().map(move |p| (t.clone(), p)))
        .map(|(t, p)| {
            let r = fs::File::open(p)
                .map_err(|e| Error::io(p, e))
                .and_then(|f| parse_trades(std::io::BufReader::new(f), schema, delim));
            (t, r)
        })
        .collect();
    let mut reports: BTreeMap<String, RejectionReport> = BTreeMap::new();
    let mut all = Vec::new();
    for (t, r) in parsed {
        let scope = Scope::stage("ingest").ticker(&t);
        match r {
            Ok(p) => {
                reports.entry(t.clone()).or_default().merge(&p.report);
                all.extend(p.trades.into_iter().filter(|x| {
                    x.ticker == t && cfg.date_range.as_ref().is_none_or(|r| r.contains(x.date))
                }));
            }
            Err(e) => failures.push(scope.fail(e)),
        }
    }
    sink.put_json("ingest/rejections.json", &reports, &Scope::stage("ingest"))?;
    let days = split_days(all);

    let mut daily = Vec::new();
    for ((t, d), trades) in &days {
        match compute_daily_stats(trades) {
            Ok(s) => daily.push(s),
            Err(e) => failures.push(Scope::stage("stats").unit(t, *d).fail(e)),
        }
    }
    let daily = rolling_stats(&daily, ROLLING_WINDOW);
    sink.put("daily_stats.csv", &csv_bytes(|b| write_daily_stats(b, &daily))?, &Scope::stage("stats"))?;
    let stats = daily
        .into_iter()
        .map(|s| ((s.ticker.clone(), s.date), s))
        .collect();
    Ok(Loaded { days, stats })
}

fn put_lmf(
    sink: &mut Sink,
    dir: &str,
    name: &str,
    report: &StockLmf,
    est: Option<&AcfEstimate>,
    scope: &Scope,
) -> Result<()> {
    sink.put_json(&format!("{dir}/{name}.json"), report, scope)?;
    if let Some(a) = est {
        sink.put(&format!("{dir}/acf_{name}.csv"), &csv_bytes(|b| a.write_csv(b))?, scope)?;
    }
    Ok(())
}

/// Execute the whole configuration into a fresh run directory.
///
/// Returns an error only for problems that stop the run as a whole
/// (configuration, output directory); per-unit problems are recorded as
/// failures in the manifest.
pub fn run_pipeline(cfg: &PipelineConfig, base: &Path) -> Result<RunOutcome> {
    let files = cfg.validate(base)?;
    let out_dir = base.join(&cfg.output_dir);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let run_dir = next_run_dir(&out_dir)?;
    let manifest = pool.install(|| execute(cfg, base, &files, &run_dir))?;
    Ok(RunOutcome { run_dir, manifest })
}

fn execute(
    cfg: &PipelineConfig,
    base: &Path,
    files: &BTreeMap<String, Vec<PathBuf>>,
    run_dir: &Path,
) -> Result<Manifest> {
    let mut sink = Sink {
        root: run_dir.to_path_buf(),
        artifacts: Vec::new(),
    };
    let mut failures = Vec::new();
    let mut skipped = Vec::new();
    let mut inputs = Vec::new();
    for (t, paths) in files {
        for p in paths {
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            let rel = p.strip_prefix(base).unwrap_or(p);
            inputs.push(InputFile {
                ticker: t.clone(),
                path: rel.to_string_lossy().replace('\\', "/"),
                sha256: sha256_hex(&bytes),
            });
        }
    }

    let loaded = if cfg.scenarios.is_empty() {
        Loaded {
            days: BTreeMap::new(),
            stats: BTreeMap::new(),
        }
    } else {
        load(cfg, files, &mut sink, &mut failures)?
    };
    let lmf_settings = cfg.analytics.lmf_settings();
    let mut alpha_by_key: BTreeMap<String, f64> = BTreeMap::new();
    let mut gamma_by_key: BTreeMap<String, f64> = BTreeMap::new();

    for scenario in &cfg.scenarios {
        let label = &scenario.label;
        let units: Vec<(&(String, NaiveDate), &Vec<TradeEvent>, &DailyStats)> = loaded
            .days
            .iter()
            .filter_map(|(k, v)| loaded.stats.get(k).map(|s| (k, v, s)))
            .collect();
        let results: Vec<(Scope, Result<UnitResult>)> = units
            .par_iter()
            .map(|(k, trades, stats)| {
                let scope = Scope::stage("metaorders").scenario(label).unit(&k.0, k.1);
                (scope, run_unit(scenario, trades, stats, cfg.analytics.z_max))
            })
            .collect();
        let mut ok = Vec::new();
        for (scope, r) in results {
            match r {
                Ok(u) => ok.push(u),
                Err(e) => failures.push(scope.fail(e)),
            }
        }
        let mut all_records: Vec<u8> = Vec::new();
        for u in &ok {
            let stem = format!("{}_{}", u.ticker, u.date.format(DATE_FORMAT));
            let scope = Scope::stage("assign").scenario(label).unit(&u.ticker, u.date);
            sink.put(&format!("{label}/assign/{stem}.csv"), &u.assignment_csv, &scope)?;
            let scope = Scope { stage: "metaorders", ..scope };
            sink.put(&format!("{label}/metaorders/{stem}.csv"), &u.metaorders_csv, &scope)?;
            sink.put(&format!("{label}/children/{stem}.csv"), &u.children_csv, &scope)?;
        }
        {
            let records: Vec<MetaorderRecord> =
                ok.iter().flat_map(|u| u.metaorders.iter().map(MetaorderRecord::from)).collect();
            write_records(&mut all_records, &records)?;
            sink.put(
                &format!("{label}/metaorders.csv"),
                &all_records,
                &Scope::stage("metaorders").scenario(label),
            )?;
        }

        let required = Analyses {
            cfg: &cfg.analytics,
            sink: &mut sink,
            failures: &mut failures,
            skipped: &mut skipped,
        }
        .run(label, &ok)?;
        match emit_plot_data(&run_dir.join(label).join("analysis"), &required) {
            Ok(plots) => {
                for (stem, bytes) in plots {
                    sink.put(
                        &format!("{label}/plots/{stem}.csv"),
                        &bytes,
                        &Scope::stage("plots").scenario(label),
                    )?;
                }
            }
            Err(e) if required.is_empty() => {
                tracing::debug!("no curve reports for {label}: {e}");
            }
            Err(e) => failures.push(Scope::stage("plots").scenario(label).fail(e)),
        }

        if cfg.analytics.lmf {
            let mut by_stock: BTreeMap<&str, Vec<&UnitResult>> = BTreeMap::new();
            for u in &ok {
                by_stock.entry(u.ticker.as_str()).or_default().push(u);
            }
            let reports: Vec<(String, StockLmf, Option<AcfEstimate>)> = by_stock
                .par_iter()
                .map(|(t, us)| {
                    // days concatenated in date order
                    let market: Vec<Sign> = us
                        .iter()
                        .flat_map(|u| loaded.days[&(u.ticker.clone(), u.date)].iter().map(|x| x.sign))
                        .collect();
                    let seqs: BTreeMap<(NaiveDate, u32), Vec<Sign>> = us
                        .iter()
                        .flat_map(|u| u.sequences.iter().map(move |(id, s)| ((u.date, *id), s.clone())))
                        .collect();
                    let (r, a) = infer_stock(t, &market, &seqs, &lmf_settings);
                    (t.to_string(), r, a)
                })
                .collect();
            for (t, r, a) in reports {
                let scope = Scope::stage("lmf").scenario(label).ticker(&t);
                for e in &r.errors {
                    skipped.push(scope.fail(e));
                }
                put_lmf(&mut sink, &format!("{label}/lmf"), &t, &r, a.as_ref(), &scope)?;
                let key = format!("{label}/{t}");
                if let Some(v) = r.alpha_lmf {
                    alpha_by_key.insert(key.clone(), v);
                }
                if let Some(v) = r.gamma {
                    gamma_by_key.insert(key, v);
                }
            }
        }
    }

    let sims: Vec<(&SimRun, Result<(SimOutput, SimReport, Option<AcfEstimate>)>)> = cfg
        .simulator
        .par_iter()
        .map(|s| (s, simulate_and_infer(&s.label, &s.config, &lmf_settings)))
        .collect();
    for (s, r) in sims {
        let scope = Scope::stage("simulate").scenario(&s.label);
        let dir = format!("sim/{}", s.label);
        match r {
            Ok((out, report, est)) => {
                if let Some(e) = &report.check_error {
                    failures.push(scope.fail(e));
                }
                sink.put_json(&format!("{dir}/config.json"), &s.config, &scope)?;
                sink.put(&format!("{dir}/signs.csv"), &csv_bytes(|b| out.write_signs(b))?, &scope)?;
                sink.put(&format!("{dir}/metaorders.csv"), &csv_bytes(|b| out.write_metaorders(b))?, &scope)?;
                sink.put_json(&format!("{dir}/report.json"), &report, &scope)?;
                if let Some(a) = est {
                    sink.put(&format!("{dir}/acf.csv"), &csv_bytes(|b| a.write_csv(b))?, &scope)?;
                }
                let key = format!("sim/{}", s.label);
                if let Some(v) = report.lmf.alpha_lmf {
                    alpha_by_key.insert(key.clone(), v);
                }
                if let Some(v) = report.lmf.gamma {
                    gamma_by_key.insert(key, v);
                }
            }
            Err(e) => failures.push(scope.fail(e)),
        }
    }

    if !alpha_by_key.is_empty() || !gamma_by_key.is_empty() {
        let cmp = lmf_compare(&alpha_by_key, &gamma_by_key, cfg.analytics.compare_bins);
        let scope = Scope::stage("lmf compare");
        sink.put("lmf_compare.csv", &csv_bytes(|b| cmp.write_table(b))?, &scope)?;
        sink.put_json("lmf_compare.json", &cmp, &scope)?;
        sink.put("plots/lmf_scatter.csv", &csv_bytes(|b| cmp.write_plot(b))?, &scope)?;
    }

    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        inputs,
        artifacts: sink.artifacts.clone(),
        failures,
        skipped,
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    let path = run_dir.join(MANIFEST);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
