//! Synthetic order flow from the order-splitting model.
//!
//! Traders are picked by participation weight at every step. A trader whose
//! current metaorder is exhausted draws a fresh length from
//! `P(L) ∝ L^(−(α+1))` on `[l_min, l_cap]` and a fair-coin sign, then emits
//! one child per selection until the metaorder is done.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{Participation, ParticipationProfile};
use crate::error::{Error, Result};
use crate::market_data::Sign;
use crate::powerlaw::ks_pvalue;
use crate::rng::substream;

pub const DEFAULT_L_MIN: u64 = 2;
pub const DEFAULT_L_CAP: u64 = 100_000;
pub const KS_LEVEL: f64 = 0.01;

const PROFILE_STREAM: &str = "sim-profile";
const SELECT_STREAM: &str = "sim-select";
const LENGTH_STREAM: &str = "sim-length";

fn default_l_min() -> u64 {
    DEFAULT_L_MIN
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_traders: usize,
    pub alpha: f64,
    #[serde(default = "default_l_min")]
    pub l_min: u64,
    /// Largest drawable length; `None` means [`DEFAULT_L_CAP`].
    #[serde(default)]
    pub l_cap: Option<u64>,
    pub n_orders: usize,
    #[serde(flatten)]
    pub participation: Participation,
    pub seed: u64,
}

impl SimConfig {
    pub fn l_cap(&self) -> u64 {
        self.l_cap.unwrap_or(DEFAULT_L_CAP)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 1.0) {
            return Err(Error::Parameter(format!("alpha must exceed 1, got {}", self.alpha)));
        }
        if self.l_min < 1 || self.l_cap() < self.l_min {
            return Err(Error::Parameter(format!(
                "length bounds need 1 <= l_min <= l_cap, got [{}, {}]",
                self.l_min,
                self.l_cap()
            )));
        }
        if self.n_orders < 1 {
            return Err(Error::Parameter("n_orders must be at least 1".into()));
        }
        if self.n_traders < 1 {
            return Err(Error::Parameter("n_traders must be at least 1".into()));
        }
        Ok(())
    }
}

/// Exact discrete law `P(L) ∝ L^(−exponent)` on `[l_min, l_cap]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedDiscretePowerLaw {
    pub l_min: u64,
    cdf: Vec<f64>,
}

impl TruncatedDiscretePowerLaw {
    pub fn new(exponent: f64, l_min: u64, l_cap: u64) -> Result<Self> {
        if l_min < 1 || l_cap < l_min {
            return Err(Error::Parameter(format!("bad length bounds [{l_min}, {l_cap}]")));
        }
        let w: Vec<f64> = (l_min..=l_cap).map(|l| (l as f64).powf(-exponent)).collect();
        let total: f64 = w.iter().sum();
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = w
            .iter()
            .map(|v| {
                acc += v / total;
                acc
            })
            .collect();
        *cdf.last_mut().unwrap() = 1.0;
        Ok(TruncatedDiscretePowerLaw { l_min, cdf })
    }

    pub fn l_cap(&self) -> u64 {
        self.l_min + self.cdf.len() as u64 - 1
    }

    /// Smallest `L` with `F(L) > u`.
    pub fn quantile(&self, u: f64) -> u64 {
        let k = self.cdf.partition_point(|&c| c <= u).min(self.cdf.len() - 1);
        self.l_min + k as u64
    }

    /// `P(L <= x)`.
    pub fn cdf(&self, x: u64) -> f64 {
        if x < self.l_min {
            0.0
        } else if x >= self.l_cap() {
            1.0
        } else {
            self.cdf[(x - self.l_min) as usize]
        }
    }
}

/// Ground-truth metaorder of a simulated trader.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrueMetaorder {
    pub trader: u32,
    /// Stream index of the first child.
    pub start: usize,
    /// Children actually emitted.
    pub length: u64,
    /// Length drawn at creation.
    pub target_length: u64,
    pub sign: i32,
    /// Cut short by the end of the stream.
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub config: SimConfig,
    pub signs: Vec<Sign>,
    /// 1-based trader ids aligned with `signs`.
    pub trader_ids: Vec<u32>,
    pub metaorders: Vec<TrueMetaorder>,
    pub profile: ParticipationProfile,
}

impl SimOutput {
    pub fn completed_lengths(&self) -> Vec<u64> {
        self.metaorders
            .iter()
            .filter(|m| !m.truncated)
            .map(|m| m.length)
            .collect()
    }

    /// Chronological sign sequence of every trader.
    pub fn trader_sequences(&self) -> BTreeMap<u32, Vec<Sign>> {
        let mut out: BTreeMap<u32, Vec<Sign>> = BTreeMap::new();
        for (s, t) in self.signs.iter().zip(&self.trader_ids) {
            out.entry(*t).or_default().push(*s);
        }
        out
    }

    /// `index,trader_id,sign`.
    pub fn write_signs<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["index", "trader_id", "sign"])?;
        for (i, (s, t)) in self.signs.iter().zip(&self.trader_ids).enumerate() {
            w.write_record([i.to_string(), t.to_string(), s.value().to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<signs sink>", e))?;
        Ok(())
    }

    pub fn write_metaorders<W: Write>(&self, sink: W) -> Result<()> {
        crate::metaorder::write_records(sink, &self.metaorders)
    }
}

/// Run the order-splitting model.
///
/// Trader selection and length/sign draws come from separate substreams, so
/// the first `k` steps do not depend on `n_orders` once the participation
/// bounds are fixed.
pub fn simulate(config: &SimConfig) -> Result<SimOutput> {
    config.validate()?;
    let kind = config.participation.resolve(config.n_orders);
    let mut profile_rng = substream(config.seed, PROFILE_STREAM, &[]);
    let profile = ParticipationProfile::build(config.n_traders, kind, &mut profile_rng)?;
    let law = TruncatedDiscretePowerLaw::new(config.alpha + 1.0, config.l_min, config.l_cap())?;
    let mut select = substream(config.seed, SELECT_STREAM, &[]);
    let mut draws = substream(config.seed, LENGTH_STREAM, &[]);

    let m = config.n_orders;
    let mut signs = Vec::with_capacity(m);
    let mut trader_ids = Vec::with_capacity(m);
    let mut metaorders: Vec<TrueMetaorder> = Vec::new();
    // per trader: (remaining children, index into `metaorders`)
    let mut state: Vec<(u64, usize)> = vec![(0, 0); config.n_traders];
    for step in 0..m {
        let trader = profile.trader_for(select.random::<f64>());
        let slot = &mut state[trader as usize - 1];
        if slot.0 == 0 {
            let length = law.quantile(draws.random::<f64>());
            let sign = if draws.random::<bool>() { 1 } else { -1 };
            metaorders.push(TrueMetaorder {
                trader,
                start: step,
                length: 0,
                target_length: length,
                sign,
                truncated: false,
            });
            *slot = (length, metaorders.len() - 1);
        }
        let rec = &mut metaorders[slot.1];
        rec.length += 1;
        slot.0 -= 1;
        signs.push(if rec.sign > 0 { Sign::Buy } else { Sign::Sell });
        trader_ids.push(trader);
    }
    for &(remaining, idx) in &state {
        if remaining > 0 {
            metaorders[idx].truncated = true;
        }
    }
    Ok(SimOutput {
        config: config.clone(),
        signs,
        trader_ids,
        metaorders,
        profile,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunCheckReport {
    pub n_metaorders: usize,
    pub n_completed: usize,
    pub n_truncated: usize,
    pub ks_distance: f64,
    pub ks_pvalue: f64,
}

/// KS distance between integer samples and a discrete CDF, checked on both
/// sides of every jump of the empirical CDF.
pub fn discrete_ks<F: Fn(u64) -> f64>(samples: &[u64], cdf: F) -> f64 {
    let mut s = samples.to_vec();
    s.sort_unstable();
    let n = s.len() as f64;
    let mut d = 0.0f64;
    let mut i = 0;
    while i < s.len() {
        let v = s[i];
        let below = i as f64 / n;
        let mut j = i;
        while j < s.len() && s[j] == v {
            j += 1;
        }
        let at = j as f64 / n;
        if v > 0 {
            d = d.max((below - cdf(v - 1)).abs());
        }
        d = d.max((at - cdf(v)).abs());
        i = j;
    }
    d
}

/// Verify that every trader's sign stream splits exactly into its recorded
/// metaorders and that completed lengths follow the target law.
pub fn true_run_check(out: &SimOutput) -> Result<RunCheckReport> {
    let n_traders = out.config.n_traders;
    let mut positions: Vec<Vec<usize>> = vec![Vec::new(); n_traders];
    for (i, &t) in out.trader_ids.iter().enumerate() {
        positions
            .get_mut(t as usize - 1)
            .ok_or_else(|| Error::OracleIntegrity(format!("trader {t} out of range")))?
            .push(i);
    }
    let mut cursor = vec![0usize; n_traders];
    let mut last_open = vec![false; n_traders];
    for (k, m) in out.metaorders.iter().enumerate() {
        let t = m.trader as usize - 1;
        if last_open[t] {
            return Err(Error::OracleIntegrity(format!(
                "metaorder {k} follows a truncated metaorder of trader {}",
                m.trader
            )));
        }
        let idx = &positions[t];
        let c = cursor[t];
        let end = c + m.length as usize;
        if end > idx.len() || idx.get(c) != Some(&m.start) {
            return Err(Error::OracleIntegrity(format!(
                "metaorder {k} of trader {} does not start at index {}",
                m.trader, m.start
            )));
        }
        if m.truncated != (m.length < m.target_length) || m.length > m.target_length {
            return Err(Error::OracleIntegrity(format!("metaorder {k} has inconsistent length")));
        }
        if let Some(&bad) = idx[c..end].iter().find(|&&i| out.signs[i].value() != m.sign) {
            return Err(Error::OracleIntegrity(format!(
                "sign at index {bad} disagrees with metaorder {k}"
            )));
        }
        cursor[t] = end;
        last_open[t] = m.truncated;
    }
    if let Some(t) = (0..n_traders).find(|&t| cursor[t] != positions[t].len()) {
        return Err(Error::OracleIntegrity(format!(
            "trader {} has {} orders but metaorders cover {}",
            t + 1,
            positions[t].len(),
            cursor[t]
        )));
    }

    let completed = out.completed_lengths();
    let law = TruncatedDiscretePowerLaw::new(out.config.alpha + 1.0, out.config.l_min, out.config.l_cap())?;
    let (d, p) = if completed.is_empty() {
        (0.0, 1.0)
    } else {
        let d = discrete_ks(&completed, |x| law.cdf(x));
        (d, ks_pvalue(d, completed.len()))
    };
    if p <= KS_LEVEL {
        return Err(Error::OracleIntegrity(format!(
            "completed lengths reject the target law: KS {d:.5}, p = {p:.2e}"
        )));
    }
    Ok(RunCheckReport {
        n_metaorders: out.metaorders.len(),
        n_completed: completed.len(),
        n_truncated: out.metaorders.len() - completed.len(),
        ks_distance: d,
        ks_pvalue: p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n_traders: usize, n_orders: usize, seed: u64) -> SimConfig {
        SimConfig {
            n_traders,
            alpha: 1.5,
            l_min: 2,
            l_cap: None,
            n_orders,
            participation: Participation::power_law(2.0),
            seed,
        }
    }

    #[test]
    fn emits_exactly_m_and_passes_check() {
        let out = simulate(&cfg(20, 50_000, 1)).unwrap();
        assert_eq!(out.signs.len(), 50_000);
        assert_eq!(out.trader_ids.len(), 50_000);
        let total: u64 = out.metaorders.iter().map(|m| m.length).sum();
        assert_eq!(total, 50_000);
        assert!(out.metaorders.iter().filter(|m| m.truncated).count() <= 20);
        true_run_check(&out).unwrap();
    }

    #[test]
    fn deterministic() {
        let a = simulate(&cfg(5, 5000, 7)).unwrap();
        let b = simulate(&cfg(5, 5000, 7)).unwrap();
        assert_eq!(a, b);
        let c = simulate(&cfg(5, 5000, 8)).unwrap();
        assert_ne!(a.signs, c.signs);
    }

    #[test]
    fn prefix_stable_under_longer_runs() {
        let mut short = cfg(5, 2000, 3);
        short.participation = Participation::Homogeneous;
        let mut long = short.clone();
        long.n_orders = 4000;
        let a = simulate(&short).unwrap();
        let b = simulate(&long).unwrap();
        assert_eq!(a.signs[..], b.signs[..2000]);
        assert_eq!(a.trader_ids[..], b.trader_ids[..2000]);
    }

    #[test]
    fn single_metaorder_is_constant() {
        let c = SimConfig {
            n_traders: 1,
            l_min: 1000,
            l_cap: Some(1000),
            n_orders: 1000,
            participation: Participation::Homogeneous,
            ..cfg(1, 1000, 0)
        };
        let out = simulate(&c).unwrap();
        assert!(out.signs.iter().all(|s| *s == out.signs[0]));
        assert_eq!(out.metaorders.len(), 1);
        assert!(!out.metaorders[0].truncated);
    }

    #[test]
    fn tampering_is_detected() {
        let mut out = simulate(&cfg(10, 20_000, 2)).unwrap();
        out.signs[1234] = out.signs[1234].flip();
        assert!(matches!(true_run_check(&out), Err(Error::OracleIntegrity(_))));
    }

    #[test]
    fn quantile_inverts_cdf() {
        let law = TruncatedDiscretePowerLaw::new(2.5, 2, 50).unwrap();
        assert_eq!(law.quantile(0.0), 2);
        assert_eq!(law.quantile(0.999_999_999_9), 50);
        for x in 2..50 {
            assert_eq!(law.quantile(law.cdf(x)), x + 1);
        }
        assert_eq!(law.cdf(1), 0.0);
        assert_eq!(law.cdf(50), 1.0);
    }

    #[test]
    fn ks_on_exact_sample_is_small() {
        let law = TruncatedDiscretePowerLaw::new(2.5, 2, 1000).unwrap();
        // stratified quantiles reproduce the law up to 1/n
        let n = 10_000;
        let s: Vec<u64> = (0..n).map(|i| law.quantile((i as f64 + 0.5) / n as f64)).collect();
        assert!(discrete_ks(&s, |x| law.cdf(x)) <= 1.0 / n as f64);
        let shifted: Vec<u64> = s.iter().map(|x| x + 1).collect();
        assert!(discrete_ks(&shifted, |x| law.cdf(x)) > 0.3);
    }

    #[test]
    fn invalid_configs() {
        let mut c = cfg(3, 10, 0);
        c.alpha = 1.0;
        assert!(simulate(&c).is_err());
        let mut c = cfg(3, 10, 0);
        c.l_cap = Some(1);
        assert!(simulate(&c).is_err());
        let mut c = cfg(3, 0, 0);
        c.n_orders = 0;
        assert!(simulate(&c).is_err());
    }
}
