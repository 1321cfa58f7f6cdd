//! Stylised-fact analyses of metaorder impact: the square-root law, impact
//! versus duration, the execution profile and the post-execution decay.
//!
//! Normalisations use the 20-day averaged daily volume and volatility carried
//! on each metaorder. Fits run on bin means of bins holding at least
//! [`MIN_BIN_COUNT`] points unless stated otherwise.

use serde::{Deserialize, Serialize};

use crate::binning::{linear_bin, log_bin, log_bin_range, log_edges, bin_with_edges, BinnedCurve};
use crate::error::{Error, Result};
use crate::market_data::TradeEvent;
use crate::metaorder::{child_impact_profile, metaorder_impact, ChildRecord, Metaorder, MetaorderRecord};
use crate::nls::{nls_fit, DecayModel, FitResult, NlsOptions, PowerLaw};

pub const DEFAULT_SQL_BINS: usize = 40;
pub const DEFAULT_PHI_BINS: usize = 25;
pub const DEFAULT_Z_BINS: usize = 30;
pub const DEFAULT_Z_MAX: f64 = 10.0;
pub const DEFAULT_MIN_CHILDREN: usize = 10;
pub const MIN_BIN_COUNT: usize = 5;
pub const MIN_FIT_BINS: usize = 5;

/// Whole-metaorder quantities needed by the square-root-law and duration
/// analyses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpactObservation {
    pub metaorder_id: String,
    pub ticker: String,
    pub volume: f64,
    pub impact: f64,
    pub duration_min: f64,
    pub avg_volume_20: f64,
    pub avg_vol_20: f64,
}

impl From<&Metaorder> for ImpactObservation {
    fn from(m: &Metaorder) -> Self {
        ImpactObservation {
            metaorder_id: m.id.clone(),
            ticker: m.ticker.clone(),
            volume: m.total_volume,
            impact: m.impact_simple,
            duration_min: m.duration_min,
            avg_volume_20: m.avg_volume_20,
            avg_vol_20: m.avg_vol_20,
        }
    }
}

impl From<&MetaorderRecord> for ImpactObservation {
    fn from(m: &MetaorderRecord) -> Self {
        ImpactObservation {
            metaorder_id: m.metaorder_id.clone(),
            ticker: m.ticker.clone(),
            volume: m.total_volume,
            impact: m.impact_simple,
            duration_min: m.duration_min,
            avg_volume_20: m.avg_volume_20,
            avg_vol_20: m.avg_vol_20,
        }
    }
}

impl ImpactObservation {
    fn check(&self) -> Result<()> {
        if !(self.avg_volume_20 > 0.0) || !self.avg_vol_20.is_finite() {
            return Err(Error::Data(format!(
                "metaorder {} has no usable daily averages",
                self.metaorder_id
            )));
        }
        Ok(())
    }

    pub fn relative_size(&self) -> f64 {
        self.volume / self.avg_volume_20
    }

    /// `I / (σ · sqrt(Q/V))`; `None` when the volatility is zero.
    pub fn scaled_impact(&self) -> Option<f64> {
        let d = self.avg_vol_20 * self.relative_size().sqrt();
        (d > 0.0).then(|| self.impact / d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SqlMode {
    /// Raw impact for a single stock.
    PerStock,
    /// Impact divided by each metaorder's volatility, all stocks together.
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqlCurve {
    pub mode: SqlMode,
    pub curve: BinnedCurve,
    /// Power fit `I/σ = Y·(Q/V)^slope` on the raw metaorders.
    pub fit: Option<FitResult>,
    /// Mean volatility of the metaorders; scales the overlay in per-stock mode.
    pub mean_vol: f64,
}

impl SqlCurve {
    /// `Y·σ·sqrt(Q/V)` at each bin center (σ = 1 in pooled mode).
    pub fn theory(&self, prefactor: f64) -> Vec<f64> {
        let s = match self.mode {
            SqlMode::Pooled => 1.0,
            SqlMode::PerStock => self.mean_vol,
        };
        self.curve
            .bin_centers
            .iter()
            .map(|c| prefactor * s * c.sqrt())
            .collect()
    }

    pub fn prefactor(&self) -> Option<f64> {
        self.fit.as_ref().map(|f| f.params[0])
    }

    pub fn slope(&self) -> Option<f64> {
        self.fit.as_ref().map(|f| f.params[1])
    }
}

/// Fit `y = Y·x^slope` to volatility-normalised impact against `Q/V`.
///
/// Needs at least two occupied bins in `curve`.
pub fn fit_sqrt_law(obs: &[ImpactObservation], curve: &BinnedCurve) -> Result<FitResult> {
    if curve.occupied_bins() < 2 {
        return Err(Error::InsufficientData(format!(
            "insufficient bins: {} occupied",
            curve.occupied_bins()
        )));
    }
    let (x, y): (Vec<f64>, Vec<f64>) = obs
        .iter()
        .filter(|o| o.avg_vol_20 > 0.0)
        .map(|o| (o.relative_size(), o.impact / o.avg_vol_20))
        .unzip();
    // linear least squares for Y at the square-root exponent as a start
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| a.sqrt() * b).sum();
    let sxx: f64 = x.iter().sum();
    let y0 = if sxx > 0.0 { sxy / sxx } else { 1.0 };
    let y0 = if y0 != 0.0 { y0 } else { 1e-3 };
    nls_fit(&PowerLaw, &x, &y, &[y0, 0.5], &NlsOptions::default())
}

/// Impact against relative size `Q/V_20` in `n_bins` log bins.
pub fn sql_curve(obs: &[ImpactObservation], mode: SqlMode, n_bins: usize) -> Result<SqlCurve> {
    for o in obs {
        o.check()?;
    }
    let points: Vec<(f64, f64)> = obs
        .iter()
        .filter(|o| o.volume > 0.0)
        .filter_map(|o| {
            let y = match mode {
                SqlMode::PerStock => o.impact,
                SqlMode::Pooled => {
                    if o.avg_vol_20 > 0.0 {
                        o.impact / o.avg_vol_20
                    } else {
                        return None;
                    }
                }
            };
            Some((o.relative_size(), y))
        })
        .collect();
    let curve = log_bin(&points, n_bins)?;
    let fit = match fit_sqrt_law(obs, &curve) {
        Ok(f) => Some(f),
        Err(Error::InsufficientData(_)) | Err(Error::NonConvergence { .. }) => None,
        Err(e) => return Err(e),
    };
    let mean_vol = if obs.is_empty() {
        0.0
    } else {
        obs.iter().map(|o| o.avg_vol_20).sum::<f64>() / obs.len() as f64
    };
    Ok(SqlCurve {
        mode,
        curve,
        fit,
        mean_vol,
    })
}

/// Scaled impact `I/(σ·sqrt(Q/V))` against duration `T` in log bins.
///
/// Zero-duration metaorders land in the first bin. Bin counts double as the
/// duration histogram.
pub fn duration_curve(obs: &[ImpactObservation], n_bins: usize) -> Result<BinnedCurve> {
    if n_bins == 0 {
        return Err(Error::Parameter("need at least one bin".into()));
    }
    if let Some(o) = obs.iter().find(|o| !(o.duration_min >= 0.0)) {
        return Err(Error::Data(format!(
            "negative duration for metaorder {}",
            o.metaorder_id
        )));
    }
    for o in obs {
        o.check()?;
    }
    let points: Vec<(f64, f64)> = obs
        .iter()
        .filter_map(|o| o.scaled_impact().map(|y| (o.duration_min, y)))
        .collect();
    if points.is_empty() {
        return Ok(BinnedCurve::default());
    }
    let positive: Vec<f64> = points.iter().map(|p| p.0).filter(|&t| t > 0.0).collect();
    let (lo, hi) = match (
        positive.iter().copied().fold(f64::INFINITY, f64::min),
        positive.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    ) {
        (lo, hi) if hi > lo => (lo, hi),
        (lo, _) if lo.is_finite() => (lo / 10f64.sqrt(), lo * 10f64.sqrt()),
        _ => (0.1, 1.0),
    };
    let edges = log_edges(lo, hi, n_bins);
    let centers = edges.windows(2).map(|w| (w[0] * w[1]).sqrt()).collect();
    let mapped: Vec<(f64, f64)> = points
        .into_iter()
        .map(|(t, y)| (if t > 0.0 { t } else { lo }, y))
        .collect();
    Ok(bin_with_edges(&mapped, edges, centers))
}

/// `(φ_i, I_i/(σ·sqrt(Q)))` for every child of metaorders with at least
/// `min_children` children.
pub fn profile_points(metaorders: &[Metaorder], min_children: usize) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    for m in metaorders.iter().filter(|m| m.n_children >= min_children) {
        let norm = m.avg_vol_20 * m.total_volume.sqrt();
        if !(norm > 0.0) {
            continue;
        }
        for (phi, i) in child_impact_profile(m)? {
            out.push((phi, i / norm));
        }
    }
    Ok(out)
}

/// Same as [`profile_points`] from the flat table and child dump.
pub fn profile_points_from_records(
    metaorders: &[MetaorderRecord],
    children: &[ChildRecord],
    min_children: usize,
) -> Vec<(f64, f64)> {
    let norms: std::collections::HashMap<&str, f64> = metaorders
        .iter()
        .filter(|m| m.n_children >= min_children)
        .map(|m| (m.metaorder_id.as_str(), m.avg_vol_20 * m.total_volume.sqrt()))
        .filter(|(_, n)| *n > 0.0)
        .collect();
    children
        .iter()
        .filter_map(|c| norms.get(c.metaorder_id.as_str()).map(|n| (c.phi, c.impact / n)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveFit {
    pub curve: BinnedCurve,
    pub fit: FitResult,
    /// Bins with fewer points than this were left out of the fit.
    pub min_bin_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSettings {
    pub n_bins: usize,
    pub min_bin_count: usize,
    pub count_weighted: bool,
}

impl Default for FitSettings {
    fn default() -> Self {
        FitSettings {
            n_bins: DEFAULT_PHI_BINS,
            min_bin_count: MIN_BIN_COUNT,
            count_weighted: false,
        }
    }
}

fn fit_bins(
    curve: BinnedCurve,
    model: &dyn crate::nls::CurveModel,
    second_init: f64,
    settings: &FitSettings,
) -> Result<CurveFit> {
    let used = curve.populated(settings.min_bin_count);
    if used.len() < MIN_FIT_BINS {
        return Err(Error::InsufficientData(format!(
            "{} bins with at least {} points (need {MIN_FIT_BINS})",
            used.len(),
            settings.min_bin_count
        )));
    }
    let x: Vec<f64> = used.iter().map(|u| u.0).collect();
    let y: Vec<f64> = used.iter().map(|u| u.1).collect();
    let peak = y.iter().fold(0.0f64, |m, v| if v.abs() > m.abs() { *v } else { m });
    let opts = NlsOptions {
        weights: settings
            .count_weighted
            .then(|| used.iter().map(|u| u.2 as f64).collect()),
        ..Default::default()
    };
    let fit = nls_fit(model, &x, &y, &[peak, second_init], &opts)?;
    Ok(CurveFit {
        curve,
        fit,
        min_bin_count: settings.min_bin_count,
    })
}

/// Fit `γ₁·φ^γ₂` to binned execution-profile points (φ bins of equal width
/// on `[0, 1]`).
pub fn fit_execution_profile(points: &[(f64, f64)], settings: &FitSettings) -> Result<CurveFit> {
    if let Some(p) = points.iter().find(|p| !(p.0 > 0.0 && p.0 <= 1.0)) {
        return Err(Error::Data(format!("phi {} outside (0, 1]", p.0)));
    }
    let curve = linear_bin(points, settings.n_bins, 0.0, 1.0);
    fit_bins(curve, &PowerLaw, 0.5, settings)
}

/// One post-execution observation of a metaorder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecaySample {
    pub metaorder_id: String,
    /// Minutes since the metaorder's first child.
    pub t_min: f64,
    pub z: f64,
    pub mid: f64,
    pub impact: f64,
    /// `impact / (σ·sqrt(Q))`.
    pub scaled_impact: f64,
}

/// Prevailing mid-price (the `mid_before` of each later trade of the day)
/// against `m_0`, at rescaled times `1 <= z <= z_max`.
///
/// Metaorders with zero duration have no rescaled clock and yield nothing.
pub fn post_execution_samples(
    m: &Metaorder,
    day_trades: &[TradeEvent],
    z_max: f64,
) -> Result<Vec<DecaySample>> {
    let last = match m.children.last() {
        Some(c) => c.trade_index,
        None => return Ok(Vec::new()),
    };
    if !(m.duration_min > 0.0) {
        return Ok(Vec::new());
    }
    let norm = m.avg_vol_20 * m.total_volume.sqrt();
    let mut out = Vec::new();
    for t in day_trades.iter().skip(last + 1) {
        let us = (t.timestamp - m.start_time).num_microseconds().unwrap_or(i64::MAX);
        let t_min = us as f64 / 60e6;
        let z = t_min / m.duration_min;
        if z > z_max {
            break;
        }
        if z < 1.0 {
            continue;
        }
        let impact = metaorder_impact(m.sign, m.m_start, t.mid_before)?;
        out.push(DecaySample {
            metaorder_id: m.id.clone(),
            t_min,
            z,
            mid: t.mid_before,
            impact,
            scaled_impact: if norm > 0.0 { impact / norm } else { f64::NAN },
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecaySettings {
    pub n_bins: usize,
    pub z_max: f64,
    pub min_bin_count: usize,
    pub count_weighted: bool,
}

impl Default for DecaySettings {
    fn default() -> Self {
        DecaySettings {
            n_bins: DEFAULT_Z_BINS,
            z_max: DEFAULT_Z_MAX,
            min_bin_count: MIN_BIN_COUNT,
            count_weighted: false,
        }
    }
}

/// Fit `γ₀·(z^(1−β) − (z−1)^(1−β))` to log-binned `(z, scaled impact)`.
pub fn fit_decay(points: &[(f64, f64)], settings: &DecaySettings) -> Result<CurveFit> {
    if !(settings.z_max > 1.0) {
        return Err(Error::Parameter(format!("z_max must exceed 1, got {}", settings.z_max)));
    }
    let pts: Vec<(f64, f64)> = points
        .iter()
        .copied()
        .filter(|(z, y)| *z >= 1.0 && *z <= settings.z_max && y.is_finite())
        .collect();
    let curve = log_bin_range(&pts, settings.n_bins, 1.0, settings.z_max);
    let s = FitSettings {
        n_bins: settings.n_bins,
        min_bin_count: settings.min_bin_count,
        count_weighted: settings.count_weighted,
    };
    fit_bins(curve, &DecayModel, 0.25, &s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nls::decay_kernel;

    fn obs(q: f64, impact: f64, v: f64, sigma: f64, t: f64) -> ImpactObservation {
        ImpactObservation {
            metaorder_id: format!("m{q}-{t}"),
            ticker: "TST".into(),
            volume: q,
            impact,
            duration_min: t,
            avg_volume_20: v,
            avg_vol_20: sigma,
        }
    }

    fn sqrt_law_sample(y_pref: f64) -> Vec<ImpactObservation> {
        (0..400)
            .map(|i| {
                let q = 10f64.powf(1.0 + 4.0 * i as f64 / 399.0);
                let v = 1e6 * (1.0 + (i % 7) as f64);
                let s = 0.01 * (1.0 + (i % 5) as f64);
                obs(q, y_pref * s * (q / v).sqrt(), v, s, 1.0)
            })
            .collect()
    }

    #[test]
    fn exact_sqrt_law_is_recovered() {
        let c = sql_curve(&sqrt_law_sample(0.5), SqlMode::Pooled, 40).unwrap();
        assert!((c.slope().unwrap() - 0.5).abs() < 1e-6);
        assert!((c.prefactor().unwrap() - 0.5).abs() < 1e-6);
        let th = c.theory(0.5);
        assert_eq!(th.len(), 40);
        assert!((th[3] - 0.5 * c.curve.bin_centers[3].sqrt()).abs() < 1e-15);
    }

    #[test]
    fn identical_metaorders_refuse_fit() {
        let o = vec![obs(100.0, 1e-3, 1e5, 0.01, 1.0); 20];
        let c = sql_curve(&o, SqlMode::Pooled, 40).unwrap();
        assert_eq!(c.curve.occupied_bins(), 1);
        assert!(c.fit.is_none());
        match fit_sqrt_law(&o, &c.curve) {
            Err(Error::InsufficientData(msg)) => assert!(msg.contains("insufficient bins")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pooled_normalisation_is_linear_in_volatility() {
        let a = sqrt_law_sample(0.5);
        let mut b = a.clone();
        // scaling every σ by k while holding impact fixed rescales I/σ by 1/k
        for o in &mut b {
            o.avg_vol_20 *= 2.0;
        }
        let ca = sql_curve(&a, SqlMode::Pooled, 40).unwrap();
        let cb = sql_curve(&b, SqlMode::Pooled, 40).unwrap();
        for (ya, yb) in ca.curve.mean_y.iter().zip(&cb.curve.mean_y) {
            if let (Some(ya), Some(yb)) = (ya, yb) {
                assert!((ya / 2.0 - yb).abs() <= 1e-15 * ya.abs());
            }
        }
    }

    #[test]
    fn flat_duration_curve() {
        let o: Vec<_> = (0..50)
            .map(|i| {
                let q = 100.0 + i as f64;
                obs(q, 0.7 * 0.02 * (q / 1e5f64).sqrt(), 1e5, 0.02, 0.5 + i as f64)
            })
            .collect();
        let c = duration_curve(&o, 10).unwrap();
        let means: Vec<f64> = c.mean_y.iter().flatten().copied().collect();
        let max = means.iter().copied().fold(f64::MIN, f64::max);
        let min = means.iter().copied().fold(f64::MAX, f64::min);
        assert!(max - min < 1e-12);
        assert_eq!(c.total_count(), 50);
    }

    #[test]
    fn zero_duration_goes_to_first_bin() {
        let o = vec![
            obs(100.0, 1e-3, 1e5, 0.01, 0.0),
            obs(100.0, 1e-3, 1e5, 0.01, 1.0),
            obs(100.0, 1e-3, 1e5, 0.01, 100.0),
        ];
        let c = duration_curve(&o, 4).unwrap();
        assert_eq!(c.count, vec![2, 0, 0, 1]);
    }

    fn centers(n: usize) -> Vec<f64> {
        (0..n).map(|k| (k as f64 + 0.5) / n as f64).collect()
    }

    #[test]
    fn exact_sqrt_profile() {
        let pts: Vec<(f64, f64)> = centers(25)
            .into_iter()
            .flat_map(|p| std::iter::repeat((p, 3e-4 * p.sqrt())).take(6))
            .collect();
        let f = fit_execution_profile(&pts, &FitSettings::default()).unwrap();
        assert!((f.fit.params[1] - 0.5).abs() < 1e-9);
        assert!((f.fit.params[0] - 3e-4).abs() < 1e-12);
    }

    #[test]
    fn linear_profile() {
        let pts: Vec<(f64, f64)> = centers(25)
            .into_iter()
            .flat_map(|p| std::iter::repeat((p, 9.79e-4 * p)).take(5))
            .collect();
        let f = fit_execution_profile(&pts, &FitSettings::default()).unwrap();
        assert!((f.fit.params[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sparse_profile_is_rejected() {
        let pts: Vec<(f64, f64)> = centers(25).into_iter().map(|p| (p, p)).collect();
        assert!(matches!(
            fit_execution_profile(&pts, &FitSettings::default()),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn decay_exact_and_flat() {
        let e = log_edges(1.0, 10.0, 30);
        let zc: Vec<f64> = e.windows(2).map(|w| (w[0] * w[1]).sqrt()).collect();
        let pts: Vec<(f64, f64)> = zc
            .iter()
            .flat_map(|&z| std::iter::repeat((z, 5.01e-4 * decay_kernel(z, 0.241))).take(5))
            .collect();
        let f = fit_decay(&pts, &DecaySettings::default()).unwrap();
        assert!((f.fit.params[0] / 5.01e-4 - 1.0).abs() < 1e-6);
        assert!((f.fit.params[1] / 0.241 - 1.0).abs() < 1e-6);

        let flat: Vec<(f64, f64)> = zc
            .iter()
            .flat_map(|&z| std::iter::repeat((z, 4e-4)).take(5))
            .collect();
        let f = fit_decay(&flat, &DecaySettings::default()).unwrap();
        assert!(f.fit.params[1].abs() < 1e-6);
    }
}
