//! Discrete power-law tail fitting: maximum likelihood for the exponent with
//! the lower cutoff chosen by minimal Kolmogorov–Smirnov distance.
//!
//! The model is `P(L = x) = x^(−a) / ζ(a, x_min)` for integer `x >= x_min`,
//! with `ζ` the Hurwitz zeta function.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fewer tail samples than this make a fit unreportable (it is still
/// returned, with `small_tail` set).
pub const MIN_TAIL: usize = 50;
/// Highest quantile of the data tried as a lower cutoff.
pub const XMIN_QUANTILE: f64 = 0.9;

const EXPONENT_BOUNDS: (f64, f64) = (1.0 + 1e-6, 20.0);

// B_{2j} / (2j)! for j = 1..=8
const BERNOULLI_OVER_FACTORIAL: [f64; 8] = [
    1.0 / 12.0,
    -1.0 / 720.0,
    1.0 / 30240.0,
    -1.0 / 1209600.0,
    1.0 / 47900160.0,
    -691.0 / 1307674368000.0,
    1.0 / 74724249600.0,
    -3617.0 / 10670622842880000.0,
];

/// Hurwitz zeta `ζ(s, q) = Σ_{k>=0} (q + k)^(−s)` for `s > 1`, `q > 0`,
/// by Euler–Maclaurin summation.
pub fn hurwitz_zeta(s: f64, q: f64) -> f64 {
    debug_assert!(s > 1.0 && q > 0.0);
    const N: usize = 12;
    let mut sum = 0.0;
    for k in 0..N {
        sum += (q + k as f64).powf(-s);
    }
    let x = q + N as f64;
    let xs = x.powf(-s);
    sum += x * xs / (s - 1.0) + 0.5 * xs;
    // rising factorial s(s+1)...(s+2j-2) times x^(-s-2j+1)
    let mut fact = s;
    let mut pow = xs / x;
    let x2 = x * x;
    for (j, b) in BERNOULLI_OVER_FACTORIAL.iter().enumerate() {
        let term = b * fact * pow;
        sum += term;
        if term.abs() < 1e-17 * sum.abs() {
            break;
        }
        let m = 2.0 * j as f64;
        fact *= (s + m + 1.0) * (s + m + 2.0);
        pow /= x2;
    }
    sum
}

/// `P(X >= x)` under the discrete power law with cutoff `x_min`.
pub fn discrete_ccdf(x: f64, a: f64, x_min: f64) -> f64 {
    if x <= x_min {
        1.0
    } else {
        hurwitz_zeta(a, x) / hurwitz_zeta(a, x_min)
    }
}

/// Asymptotic Kolmogorov p-value for a one-sample KS distance `d` from `n`
/// samples, with the small-sample correction to the scaling argument.
pub fn ks_pvalue(d: f64, n: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    /// Density exponent `a` of `P(L) ∝ L^(−a)`.
    pub alpha_pdf: f64,
    /// Tail exponent `α = a − 1` of the order-splitting model.
    pub alpha_lmf: f64,
    pub x_min: u64,
    pub ks_distance: f64,
    pub n_tail: usize,
    pub std_err: f64,
    /// `n_tail` fell below [`MIN_TAIL`].
    pub small_tail: bool,
}

struct Support {
    values: Vec<u64>,
    counts: Vec<usize>,
    // suffix sums over unique values, index i covers values[i..]
    tail_n: Vec<usize>,
    tail_log: Vec<f64>,
}

impl Support {
    fn new(data: &[u64]) -> Support {
        let mut sorted = data.to_vec();
        sorted.sort_unstable();
        let mut values = Vec::new();
        let mut counts: Vec<usize> = Vec::new();
        for v in sorted {
            if values.last() == Some(&v) {
                *counts.last_mut().unwrap() += 1;
            } else {
                values.push(v);
                counts.push(1);
            }
        }
        let k = values.len();
        let mut tail_n = vec![0; k + 1];
        let mut tail_log = vec![0.0; k + 1];
        for i in (0..k).rev() {
            tail_n[i] = tail_n[i + 1] + counts[i];
            tail_log[i] = tail_log[i + 1] + counts[i] as f64 * (values[i] as f64).ln();
        }
        Support {
            values,
            counts,
            tail_n,
            tail_log,
        }
    }
}

/// Maximise `−n ln ζ(a, x_min) − a Σ ln x` over `a` by golden-section search.
fn mle_exponent(n: usize, sum_log: f64, x_min: f64) -> f64 {
    let nll = |a: f64| n as f64 * hurwitz_zeta(a, x_min).ln() + a * sum_log;
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let (mut lo, mut hi) = EXPONENT_BOUNDS;
    let mut c = hi - g * (hi - lo);
    let mut d = lo + g * (hi - lo);
    let (mut fc, mut fd) = (nll(c), nll(d));
    while hi - lo > 1e-10 {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - g * (hi - lo);
            fc = nll(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + g * (hi - lo);
            fd = nll(d);
        }
    }
    0.5 * (lo + hi)
}

/// Standard error from the observed Fisher information,
/// `n · d²/da² ln ζ(a, x_min)`.
fn std_err(a: f64, n: usize, x_min: f64) -> f64 {
    let h = 1e-4 * a.max(1.0);
    let lz = |s: f64| hurwitz_zeta(s, x_min).ln();
    let lo = (a - h).max(1.0 + 1e-9);
    let hi = a + h;
    let mid = 0.5 * (lo + hi);
    let hh = 0.5 * (hi - lo);
    let d2 = (lz(hi) - 2.0 * lz(mid) + lz(lo)) / (hh * hh);
    if d2 > 0.0 {
        1.0 / (n as f64 * d2).sqrt()
    } else {
        f64::INFINITY
    }
}

/// KS distance between the tail `values[start..]` and the fitted model.
fn ks_distance(sup: &Support, start: usize, a: f64) -> f64 {
    let x_min = sup.values[start] as f64;
    let zmin = hurwitz_zeta(a, x_min);
    let n = sup.tail_n[start] as f64;
    let mut below = 0usize;
    let mut d = 0.0f64;
    for k in start..sup.values.len() {
        below += sup.counts[k];
        let emp = below as f64 / n;
        let x = sup.values[k] as f64;
        // model CDF at the jump and just before the next observed value
        let at = 1.0 - hurwitz_zeta(a, x + 1.0) / zmin;
        d = d.max((emp - at).abs());
        if let Some(&next) = sup.values.get(k + 1) {
            let before = 1.0 - hurwitz_zeta(a, next as f64) / zmin;
            d = d.max((emp - before).abs());
        }
    }
    d
}

/// Fit a discrete power law to integer samples.
///
/// Every distinct observed value from `max(2, min)` up to the 90th
/// percentile is tried as the cutoff. Cutoffs whose tail holds a single
/// distinct value are skipped since the likelihood has no maximum there.
pub fn fit_discrete_power_law(data: &[u64]) -> Result<PowerLawFit> {
    if data.len() < MIN_TAIL {
        return Err(Error::InsufficientData(format!(
            "{} samples, need at least {MIN_TAIL}",
            data.len()
        )));
    }
    let sup = Support::new(data);
    if sup.values.len() < 2 {
        return Err(Error::Data(format!(
            "degenerate sample: every value equals {}",
            sup.values[0]
        )));
    }
    let mut sorted = data.to_vec();
    sorted.sort_unstable();
    let q_idx = ((XMIN_QUANTILE * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    let cap = sorted[q_idx];
    let mut best: Option<PowerLawFit> = None;
    for (i, &v) in sup.values.iter().enumerate() {
        if v < 2 {
            continue;
        }
        if v > cap || i + 1 >= sup.values.len() {
            break;
        }
        let n = sup.tail_n[i];
        let x_min = v as f64;
        let a = mle_exponent(n, sup.tail_log[i], x_min);
        let ks = ks_distance(&sup, i, a);
        if best.as_ref().is_none_or(|b| ks < b.ks_distance) {
            best = Some(PowerLawFit {
                alpha_pdf: a,
                alpha_lmf: a - 1.0,
                x_min: v,
                ks_distance: ks,
                n_tail: n,
                std_err: std_err(a, n, x_min),
                small_tail: n < MIN_TAIL,
            });
        }
    }
    best.ok_or_else(|| {
        Error::InsufficientData(format!(
            "no cutoff candidate between 2 and the 90th percentile ({cap})"
        ))
    })
}

/// Maximum-likelihood exponent at a fixed cutoff.
pub fn fit_fixed_xmin(data: &[u64], x_min: u64) -> Result<f64> {
    let tail: Vec<u64> = data.iter().copied().filter(|&x| x >= x_min).collect();
    if tail.len() < 2 || tail.iter().all(|&x| x == tail[0]) {
        return Err(Error::InsufficientData(format!(
            "tail above {x_min} has no spread"
        )));
    }
    let sum_log: f64 = tail.iter().map(|&x| (x as f64).ln()).sum();
    Ok(mle_exponent(tail.len(), sum_log, x_min as f64))
}
