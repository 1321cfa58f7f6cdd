//! Order-splitting inference: sign autocorrelation and its decay exponent γ,
//! classification of traders into splitters and random traders, the run
//! length tail exponent α, and the comparison of γ with α − 1.

use std::collections::BTreeMap;
use std::io::Write;

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::error::{Error, Result};
use crate::market_data::Sign;
use crate::metaorder::SignRun;
use crate::powerlaw::{fit_discrete_power_law, PowerLawFit};

pub const DEFAULT_TAU_MIN: usize = 10;
pub const DEFAULT_TAU_MAX: usize = 1000;
pub const MIN_POSITIVE_LAGS: usize = 10;
pub const DEFAULT_TEST_LEVEL: f64 = 0.01;
pub const DEFAULT_MIN_ORDERS: usize = 30;
/// Sign imbalance above which a trader is labelled a splitter outright.
pub const BALANCE_GUARD: f64 = 0.9;

// Above this many multiply-adds the lag sums go through an FFT.
const DIRECT_WORK_LIMIT: usize = 5_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcfVariant {
    /// `Σ ε_l ε_{l+τ} / (N − τ)` with no mean removal.
    Raw,
    /// Mean removed and divided by the sample variance `1 − m²`.
    Centered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcfEstimate {
    pub lags: Vec<usize>,
    pub values: Vec<f64>,
    pub n_signs: usize,
    pub variant: AcfVariant,
}

impl AcfEstimate {
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["tau", "acf"])?;
        for (t, v) in self.lags.iter().zip(&self.values) {
            w.write_record([t.to_string(), v.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<acf sink>", e))?;
        Ok(())
    }
}

/// `S_τ = Σ_l ε_l ε_{l+τ}` for `τ = 0..=tau_max`, exact in integers.
fn lag_sums(x: &[i64], tau_max: usize) -> Vec<i64> {
    let n = x.len();
    if n.saturating_mul(tau_max + 1) <= DIRECT_WORK_LIMIT {
        return (0..=tau_max)
            .map(|t| x[..n - t].iter().zip(&x[t..]).map(|(a, b)| a * b).sum())
            .collect();
    }
    let m = (2 * n).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(m);
    let inv = planner.plan_fft_inverse(m);
    let mut buf: Vec<Complex<f64>> = x
        .iter()
        .map(|&v| Complex::new(v as f64, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(m)
        .collect();
    fwd.process(&mut buf);
    for c in &mut buf {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    inv.process(&mut buf);
    // the sums are integers well inside f64's exact range, so rounding
    // removes the transform's floating-point error entirely
    buf[..=tau_max]
        .iter()
        .map(|c| (c.re / m as f64).round() as i64)
        .collect()
}

fn sign_values(signs: &[Sign]) -> Vec<i64> {
    signs.iter().map(|s| i64::from(s.value())).collect()
}

/// Sample autocorrelation of a sign sequence for `τ = 1..=tau_max`.
pub fn acf(signs: &[Sign], tau_max: usize, variant: AcfVariant) -> Result<AcfEstimate> {
    let n = signs.len();
    if tau_max == 0 || tau_max + 2 > n {
        return Err(Error::Parameter(format!(
            "tau_max {tau_max} needs 1 <= tau_max <= N - 2 (N = {n})"
        )));
    }
    let x = sign_values(signs);
    let s = lag_sums(&x, tau_max);
    let lags: Vec<usize> = (1..=tau_max).collect();
    let values = match variant {
        AcfVariant::Raw => lags
            .iter()
            .map(|&t| s[t] as f64 / (n - t) as f64)
            .collect(),
        AcfVariant::Centered => {
            let total: i64 = x.iter().sum();
            let m = total as f64 / n as f64;
            let var = 1.0 - m * m;
            if var <= 0.0 {
                return Err(Error::Data(
                    "constant sign sequence has no variance to normalise by".into(),
                ));
            }
            // prefix[k] = Σ x[..k]
            let mut prefix = Vec::with_capacity(n + 1);
            prefix.push(0i64);
            for v in &x {
                prefix.push(prefix.last().unwrap() + v);
            }
            lags.iter()
                .map(|&t| {
                    let k = (n - t) as f64;
                    let head = prefix[n - t] as f64;
                    let tail = (total - prefix[t]) as f64;
                    (s[t] as f64 - m * (head + tail) + k * m * m) / k / var
                })
                .collect()
        }
    };
    Ok(AcfEstimate {
        lags,
        values,
        n_signs: n,
        variant,
    })
}

/// Single-lag sample autocorrelation, any `τ < N` including zero.
pub fn autocorrelation_at(signs: &[Sign], tau: usize) -> Result<f64> {
    let n = signs.len();
    if tau >= n {
        return Err(Error::Parameter(format!("lag {tau} needs a sequence longer than {n}")));
    }
    let x = sign_values(signs);
    let s: i64 = x[..n - tau].iter().zip(&x[tau..]).map(|(a, b)| a * b).sum();
    Ok(s as f64 / (n - tau) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaFit {
    pub gamma: f64,
    pub half_width: f64,
    pub tau_min: usize,
    pub tau_max: usize,
    pub r_squared: f64,
    pub n_lags: usize,
}

/// `[10, min(1000, N/20)]`.
pub fn default_tau_range(n_signs: usize) -> (usize, usize) {
    (DEFAULT_TAU_MIN, DEFAULT_TAU_MAX.min(n_signs / 20))
}

/// Ordinary least squares of `ln Ĉ(τ)` on `ln τ` over the lags in
/// `[tau_min, tau_max]` where `Ĉ > 0`.
pub fn fit_gamma(acf: &AcfEstimate, tau_min: usize, tau_max: usize) -> Result<GammaFit> {
    if tau_min >= tau_max {
        return Err(Error::Parameter(format!(
            "tau range [{tau_min}, {tau_max}] is empty"
        )));
    }
    let (x, y): (Vec<f64>, Vec<f64>) = acf
        .lags
        .iter()
        .zip(&acf.values)
        .filter(|(t, c)| **t >= tau_min && **t <= tau_max && **c > 0.0)
        .map(|(t, c)| ((*t as f64).ln(), c.ln()))
        .unzip();
    let n = x.len();
    if n < MIN_POSITIVE_LAGS {
        return Err(Error::InsufficientData(format!(
            "{n} lags with positive autocorrelation in [{tau_min}, {tau_max}], need {MIN_POSITIVE_LAGS}"
        )));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = x
        .iter()
        .zip(&y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    let se = (rss / (nf - 2.0) / sxx).sqrt();
    let r_squared = if syy > 0.0 { 1.0 - rss / syy } else { 1.0 };
    Ok(GammaFit {
        gamma: -slope,
        half_width: crate::nls::WALD_Z95 * se,
        tau_min,
        tau_max,
        r_squared,
        n_lags: n,
    })
}

/// Lengths of the maximal same-sign runs, in order.
pub fn run_lengths(signs: &[Sign]) -> Vec<usize> {
    signs.chunk_by(|a, b| a == b).map(<[Sign]>::len).collect()
}

/// Run lengths stored in per-trader run lists, concatenated in key order.
pub fn trader_run_lengths<K: Ord>(runs: &BTreeMap<K, Vec<SignRun>>) -> Vec<usize> {
    runs.values().flatten().map(|r| r.length).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraderClass {
    /// Order-splitting trader.
    Splitter,
    /// Random trader.
    Random,
    /// Too few orders to label.
    Unlabelled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifySettings {
    pub test_level: f64,
    pub min_orders: usize,
}

impl Default for ClassifySettings {
    fn default() -> Self {
        ClassifySettings {
            test_level: DEFAULT_TEST_LEVEL,
            min_orders: DEFAULT_MIN_ORDERS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub class: TraderClass,
    pub n_orders: usize,
    pub continuations: usize,
    /// Continuation probability under independence, `p₊² + p₋²`.
    pub null_rate: f64,
    pub p_value: Option<f64>,
}

/// Label one trader from its chronological sign sequence.
///
/// The continuation count `k` over the `n − 1` adjacent pairs is tested
/// two-sided against `Binomial(n − 1, p₊² + p₋²)`. A rejection with `k`
/// above its expectation marks a splitter.
pub fn classify_signs(signs: &[Sign], settings: &ClassifySettings) -> Classification {
    let n = signs.len();
    let continuations = signs.windows(2).filter(|w| w[0] == w[1]).count();
    let buys = signs.iter().filter(|s| **s == Sign::Buy).count();
    let p_buy = if n > 0 { buys as f64 / n as f64 } else { 0.5 };
    let null_rate = p_buy * p_buy + (1.0 - p_buy) * (1.0 - p_buy);
    let mut out = Classification {
        class: TraderClass::Unlabelled,
        n_orders: n,
        continuations,
        null_rate,
        p_value: None,
    };
    if n < settings.min_orders.max(2) {
        return out;
    }
    if (2.0 * p_buy - 1.0).abs() > BALANCE_GUARD {
        out.class = TraderClass::Splitter;
        return out;
    }
    let pairs = (n - 1) as u64;
    let k = continuations as u64;
    let p = match Binomial::new(null_rate, pairs) {
        Ok(b) => {
            let lower = b.cdf(k);
            let upper = if k == 0 { 1.0 } else { b.sf(k - 1) };
            (2.0 * lower.min(upper)).min(1.0)
        }
        Err(_) => 1.0,
    };
    out.p_value = Some(p);
    let excess = continuations as f64 > pairs as f64 * null_rate;
    out.class = if p < settings.test_level && excess {
        TraderClass::Splitter
    } else {
        TraderClass::Random
    };
    out
}

pub fn classify_traders<K: Ord + Clone>(
    sequences: &BTreeMap<K, Vec<Sign>>,
    settings: &ClassifySettings,
) -> BTreeMap<K, Classification> {
    sequences
        .iter()
        .map(|(k, s)| (k.clone(), classify_signs(s, settings)))
        .collect()
}

/// Fit the discrete power-law tail of run lengths; `alpha_lmf = a − 1`.
pub fn fit_alpha(lengths: &[usize]) -> Result<PowerLawFit> {
    let data: Vec<u64> = lengths.iter().map(|&l| l as u64).collect();
    fit_discrete_power_law(&data)
}

/// Per-stock summary written as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StockLmf {
    pub stock: String,
    pub alpha_pdf: Option<f64>,
    pub alpha_lmf: Option<f64>,
    pub x_min: Option<u64>,
    pub ks: Option<f64>,
    pub n_tail: Option<usize>,
    pub alpha_std_err: Option<f64>,
    pub small_tail: Option<bool>,
    pub gamma: Option<f64>,
    pub gamma_ci: Option<[f64; 2]>,
    pub tau_range: Option<[usize; 2]>,
    pub r_squared: Option<f64>,
    pub estimator_variant: AcfVariant,
    pub n_signs: usize,
    pub n_splitters: usize,
    pub n_random: usize,
    pub n_unlabelled: usize,
    pub errors: Vec<String>,
}

impl StockLmf {
    pub fn new(stock: &str, variant: AcfVariant) -> Self {
        StockLmf {
            stock: stock.to_string(),
            alpha_pdf: None,
            alpha_lmf: None,
            x_min: None,
            ks: None,
            n_tail: None,
            alpha_std_err: None,
            small_tail: None,
            gamma: None,
            gamma_ci: None,
            tau_range: None,
            r_squared: None,
            estimator_variant: variant,
            n_signs: 0,
            n_splitters: 0,
            n_random: 0,
            n_unlabelled: 0,
            errors: Vec::new(),
        }
    }

    pub fn set_alpha(&mut self, f: &PowerLawFit) {
        self.alpha_pdf = Some(f.alpha_pdf);
        self.alpha_lmf = Some(f.alpha_lmf);
        self.x_min = Some(f.x_min);
        self.ks = Some(f.ks_distance);
        self.n_tail = Some(f.n_tail);
        self.alpha_std_err = Some(f.std_err);
        self.small_tail = Some(f.small_tail);
    }

    pub fn set_gamma(&mut self, g: &GammaFit) {
        self.gamma = Some(g.gamma);
        self.gamma_ci = Some([g.gamma - g.half_width, g.gamma + g.half_width]);
        self.tau_range = Some([g.tau_min, g.tau_max]);
        self.r_squared = Some(g.r_squared);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub stock: String,
    pub alpha_minus_1: f64,
    pub gamma: f64,
    pub abs_dev: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareBin {
    pub lo: f64,
    pub hi: f64,
    pub center: f64,
    pub count: usize,
    pub median_gamma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<CompareRow>,
    pub bins: Vec<CompareBin>,
    pub median_abs_dev: Option<f64>,
    /// Stocks present on only one side.
    pub dropped: Vec<String>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Pair `alpha_lmf` and γ by stock, bin `α − 1` into `n_bins` equal-width
/// bins and report the per-bin median γ.
pub fn lmf_compare(
    alpha_lmf: &BTreeMap<String, f64>,
    gamma: &BTreeMap<String, f64>,
    n_bins: usize,
) -> Comparison {
    let mut rows = Vec::new();
    let mut dropped = Vec::new();
    for (stock, a) in alpha_lmf {
        match gamma.get(stock) {
            Some(g) => rows.push(CompareRow {
                stock: stock.clone(),
                alpha_minus_1: a - 1.0,
                gamma: *g,
                abs_dev: (g - (a - 1.0)).abs(),
            }),
            None => dropped.push(stock.clone()),
        }
    }
    dropped.extend(gamma.keys().filter(|s| !alpha_lmf.contains_key(*s)).cloned());
    for s in &dropped {
        tracing::warn!(stock = %s, "dropping unpaired entry from the comparison");
    }
    let median_abs_dev = median(&rows.iter().map(|r| r.abs_dev).collect::<Vec<_>>());
    let bins = if rows.is_empty() || n_bins == 0 {
        Vec::new()
    } else {
        let lo = rows.iter().map(|r| r.alpha_minus_1).fold(f64::INFINITY, f64::min);
        let hi = rows.iter().map(|r| r.alpha_minus_1).fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
        let edges = crate::binning::linear_edges(lo, hi, n_bins);
        let mut members: Vec<Vec<f64>> = vec![Vec::new(); n_bins];
        for r in &rows {
            if let Some(k) = crate::binning::bin_index(&edges, r.alpha_minus_1) {
                members[k].push(r.gamma);
            }
        }
        members
            .iter()
            .enumerate()
            .map(|(k, g)| CompareBin {
                lo: edges[k],
                hi: edges[k + 1],
                center: 0.5 * (edges[k] + edges[k + 1]),
                count: g.len(),
                median_gamma: median(g),
            })
            .collect()
    };
    Comparison {
        rows,
        bins,
        median_abs_dev,
        dropped,
    }
}

impl Comparison {
    /// `stock,alpha_minus_1,gamma,abs_dev`.
    pub fn write_table<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["stock", "alpha_minus_1", "gamma", "abs_dev"])?;
        for r in &self.rows {
            w.write_record([
                r.stock.clone(),
                r.alpha_minus_1.to_string(),
                r.gamma.to_string(),
                r.abs_dev.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<comparison sink>", e))?;
        Ok(())
    }

    /// Scatter rows followed by per-bin medians, one file for plotting.
    pub fn write_plot<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["kind", "stock", "alpha_minus_1", "gamma", "count"])?;
        for r in &self.rows {
            w.write_record([
                "point".to_string(),
                r.stock.clone(),
                r.alpha_minus_1.to_string(),
                r.gamma.to_string(),
                String::new(),
            ])?;
        }
        for b in &self.bins {
            w.write_record([
                "bin_median".to_string(),
                String::new(),
                b.center.to_string(),
                crate::binning::opt(b.median_gamma),
                b.count.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<comparison sink>", e))?;
        Ok(())
    }
}
