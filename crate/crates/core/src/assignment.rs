//! Mapping of anonymous trades onto synthetic traders.
//!
//! Each trader `j` gets a frequency `f_j` drawn from the participation law,
//! normalised into weights `p_j` with cumulative thresholds `c_j`. Trades are
//! then visited in chronological order and handed to the trader whose
//! half-open interval `[c_{j-1}, c_j)` contains a fresh uniform draw.

use std::io::Write;

use chrono::NaiveDate;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::TradeEvent;
use crate::rng::{day_stream, StreamRng};

/// Participation law as configured by the user.
///
/// `f_max = None` means "total number of trades that day".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "participation", rename_all = "snake_case")]
pub enum Participation {
    Homogeneous,
    PowerLaw {
        #[serde(default = "default_delta")]
        delta: f64,
        #[serde(default = "default_f_min")]
        f_min: f64,
        #[serde(default)]
        f_max: Option<f64>,
    },
}

fn default_delta() -> f64 {
    2.0
}

fn default_f_min() -> f64 {
    1.0
}

impl Participation {
    pub fn power_law(delta: f64) -> Self {
        Participation::PowerLaw {
            delta,
            f_min: 1.0,
            f_max: None,
        }
    }

    /// Fix the frequency bounds for a day with `n_trades` trades.
    pub fn resolve(&self, n_trades: usize) -> ProfileKind {
        match *self {
            Participation::Homogeneous => ProfileKind::Homogeneous,
            Participation::PowerLaw {
                delta,
                f_min,
                f_max,
            } => ProfileKind::PowerLaw {
                delta,
                f_min,
                f_max: f_max.unwrap_or((n_trades as f64).max(f_min)),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProfileKind {
    Homogeneous,
    PowerLaw { delta: f64, f_min: f64, f_max: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipationProfile {
    pub n_traders: usize,
    pub kind: ProfileKind,
    pub raw_freq: Vec<f64>,
    pub weights: Vec<f64>,
    /// `cum[j-1] = c_j`; `c_0 = 0` is implicit.
    pub cum: Vec<f64>,
}

/// Inverse CDF of the density `∝ f^(-delta)` truncated to `[f_min, f_max]`.
pub fn truncated_pareto_quantile(u: f64, delta: f64, f_min: f64, f_max: f64) -> f64 {
    if f_max <= f_min {
        return f_min;
    }
    let k = delta - 1.0;
    let tail = (f_min / f_max).powf(k);
    f_min * (1.0 - u * (1.0 - tail)).powf(-1.0 / k)
}

/// CDF matching [`truncated_pareto_quantile`].
pub fn truncated_pareto_cdf(f: f64, delta: f64, f_min: f64, f_max: f64) -> f64 {
    if f <= f_min {
        return 0.0;
    }
    if f >= f_max {
        return 1.0;
    }
    let k = delta - 1.0;
    (1.0 - (f_min / f).powf(k)) / (1.0 - (f_min / f_max).powf(k))
}

impl ParticipationProfile {
    pub fn build<R: Rng + ?Sized>(n_traders: usize, kind: ProfileKind, rng: &mut R) -> Result<Self> {
        if n_traders == 0 {
            return Err(Error::Parameter("number of traders must be at least 1".into()));
        }
        let raw_freq: Vec<f64> = match kind {
            ProfileKind::Homogeneous => vec![1.0; n_traders],
            ProfileKind::PowerLaw {
                delta,
                f_min,
                f_max,
            } => {
                if !(delta > 1.0) {
                    return Err(Error::Parameter(format!(
                        "power-law exponent delta must exceed 1, got {delta}"
                    )));
                }
                if !(f_min >= 1.0 && f_max >= f_min && f_max.is_finite()) {
                    return Err(Error::Parameter(format!(
                        "frequency bounds need 1 <= f_min <= f_max, got [{f_min}, {f_max}]"
                    )));
                }
                (0..n_traders)
                    .map(|_| truncated_pareto_quantile(rng.random::<f64>(), delta, f_min, f_max))
                    .collect()
            }
        };
        Ok(Self::from_frequencies(kind, raw_freq))
    }

    pub fn homogeneous(n_traders: usize) -> Result<Self> {
        if n_traders == 0 {
            return Err(Error::Parameter("number of traders must be at least 1".into()));
        }
        Ok(Self::from_frequencies(
            ProfileKind::Homogeneous,
            vec![1.0; n_traders],
        ))
    }

    fn from_frequencies(kind: ProfileKind, raw_freq: Vec<f64>) -> Self {
        let total: f64 = raw_freq.iter().sum();
        let weights: Vec<f64> = raw_freq.iter().map(|f| f / total).collect();
        let mut cum = Vec::with_capacity(weights.len());
        let mut acc = 0.0;
        for w in &weights {
            acc += w;
            cum.push(acc);
        }
        if let Some(last) = cum.last_mut() {
            *last = 1.0;
        }
        ParticipationProfile {
            n_traders: raw_freq.len(),
            kind,
            raw_freq,
            weights,
            cum,
        }
    }

    /// Trader (1-based) owning the interval that contains `u`.
    ///
    /// `u >= 1` maps to the last trader.
    pub fn trader_for(&self, u: f64) -> u32 {
        let j = self.cum.partition_point(|&c| c <= u);
        (j.min(self.n_traders - 1) + 1) as u32
    }
}

/// Trader ids aligned index-for-index with the trade sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub trader_ids: Vec<u32>,
}

impl Assignment {
    pub fn len(&self) -> usize {
        self.trader_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trader_ids.is_empty()
    }

    /// Trade indices per trader, in chronological order.
    pub fn per_trader(&self, n_traders: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); n_traders];
        for (i, &t) in self.trader_ids.iter().enumerate() {
            out[(t - 1) as usize].push(i);
        }
        out
    }
}

pub fn assign_with_uniforms<I>(profile: &ParticipationProfile, uniforms: I) -> Assignment
where
    I: IntoIterator<Item = f64>,
{
    Assignment {
        trader_ids: uniforms.into_iter().map(|u| profile.trader_for(u)).collect(),
    }
}

pub fn assign_trades<R: Rng + ?Sized>(
    n_trades: usize,
    profile: &ParticipationProfile,
    rng: &mut R,
) -> Assignment {
    assign_with_uniforms(profile, (0..n_trades).map(|_| rng.random::<f64>()))
}

pub const PROFILE_STREAM: &str = "profile";
pub const ASSIGN_STREAM: &str = "assign";

/// Profile plus assignment for one (ticker, day), using independent
/// substreams derived from `seed`.
pub fn assign_day(
    trades: &[TradeEvent],
    n_traders: usize,
    participation: &Participation,
    seed: u64,
    ticker: &str,
    date: NaiveDate,
) -> Result<(ParticipationProfile, Assignment)> {
    let mut profile_rng: StreamRng = day_stream(seed, PROFILE_STREAM, ticker, date);
    let profile = ParticipationProfile::build(
        n_traders,
        participation.resolve(trades.len()),
        &mut profile_rng,
    )?;
    let mut assign_rng = day_stream(seed, ASSIGN_STREAM, ticker, date);
    let assignment = assign_trades(trades.len(), &profile, &mut assign_rng);
    Ok((profile, assignment))
}

pub fn write_assignment<W: Write>(
    sink: W,
    trades: &[TradeEvent],
    assignment: &Assignment,
) -> Result<()> {
    if trades.len() != assignment.len() {
        return Err(Error::Contract(format!(
            "assignment has {} entries for {} trades",
            assignment.len(),
            trades.len()
        )));
    }
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["seq_no", "trader_id"])?;
    for (t, id) in trades.iter().zip(&assignment.trader_ids) {
        w.write_record([t.seq_no.to_string(), id.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<assignment sink>", e))?;
    Ok(())
}

pub fn read_assignment<R: std::io::Read>(source: R) -> Result<Vec<(u64, u32)>> {
    let mut r = csv::Reader::from_reader(source);
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}
