//! Damped nonlinear least squares (Levenberg–Marquardt) with Wald intervals.
//!
//! The minimiser only ever accepts steps that lower the residual sum of
//! squares. At the optimum the parameter covariance is `s²·(JᵀJ)⁻¹` with
//! `s² = RSS/(n − p)`, and each reported half-width is `1.96·sqrt(cov_ii)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const WALD_Z95: f64 = 1.96;

/// A curve `y = f(x; θ)` that is smooth in its parameters.
pub trait CurveModel: Sync {
    fn name(&self) -> &'static str;
    fn param_names(&self) -> &'static [&'static str];
    fn value(&self, x: f64, params: &[f64]) -> f64;
    /// `∂f/∂θ_k` written into `grad`.
    fn gradient(&self, x: f64, params: &[f64], grad: &mut [f64]);
}

/// `y = scale · x^exponent`.
#[derive(Debug, Clone, Copy, Default)]
pub struct PowerLaw;

impl CurveModel for PowerLaw {
    fn name(&self) -> &'static str {
        "power_law"
    }

    fn param_names(&self) -> &'static [&'static str] {
        &["scale", "exponent"]
    }

    fn value(&self, x: f64, p: &[f64]) -> f64 {
        p[0] * x.powf(p[1])
    }

    fn gradient(&self, x: f64, p: &[f64], g: &mut [f64]) {
        let xb = x.powf(p[1]);
        g[0] = xb;
        g[1] = p[0] * xb * x.ln();
    }
}

/// Post-execution decay kernel `z^(1-β) − (z−1)^(1-β)`, equal to 1 at `z = 1`.
pub fn decay_kernel(z: f64, beta: f64) -> f64 {
    let e = 1.0 - beta;
    let tail = if z > 1.0 { (z - 1.0).powf(e) } else { 0.0 };
    z.powf(e) - tail
}

/// `y = prefactor · decay_kernel(z, β)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct DecayModel;

impl CurveModel for DecayModel {
    fn name(&self) -> &'static str {
        "impact_decay"
    }

    fn param_names(&self) -> &'static [&'static str] {
        &["prefactor", "beta"]
    }

    fn value(&self, z: f64, p: &[f64]) -> f64 {
        p[0] * decay_kernel(z, p[1])
    }

    fn gradient(&self, z: f64, p: &[f64], g: &mut [f64]) {
        let e = 1.0 - p[1];
        let head = z.powf(e);
        let (tail, dtail) = if z > 1.0 {
            let t = (z - 1.0).powf(e);
            (t, -(z - 1.0).ln() * t)
        } else {
            (0.0, 0.0)
        };
        g[0] = head - tail;
        g[1] = p[0] * (-z.ln() * head - dtail);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NlsOptions {
    pub max_iter: usize,
    /// Relative RSS decrease below which an accepted step counts as converged.
    pub ftol: f64,
    /// Relative step size below which an accepted step counts as converged.
    pub xtol: f64,
    /// Optional per-point weights (e.g. bin counts).
    pub weights: Option<Vec<f64>>,
}

impl Default for NlsOptions {
    fn default() -> Self {
        NlsOptions {
            max_iter: 500,
            ftol: 1e-15,
            xtol: 1e-13,
            weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: String,
    pub param_names: Vec<String>,
    pub params: Vec<f64>,
    /// 95% Wald half-widths; infinite when the fit is degenerate.
    pub half_widths: Vec<f64>,
    pub rss: f64,
    pub n_points: usize,
    pub iterations: usize,
    /// `JᵀJ` was numerically singular at the optimum.
    pub degenerate: bool,
}

impl FitResult {
    pub fn param(&self, name: &str) -> Option<(f64, f64)> {
        self.param_names
            .iter()
            .position(|n| n == name)
            .map(|i| (self.params[i], self.half_widths[i]))
    }

    pub fn covers(&self, index: usize, truth: f64) -> bool {
        (self.params[index] - truth).abs() <= self.half_widths[index]
    }
}

struct Problem<'a> {
    model: &'a dyn CurveModel,
    x: &'a [f64],
    y: &'a [f64],
    sqrt_w: Vec<f64>,
}

impl Problem<'_> {
    fn rss(&self, p: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..self.x.len() {
            let r = self.sqrt_w[i] * (self.y[i] - self.model.value(self.x[i], p));
            s += r * r;
        }
        if s.is_finite() {
            s
        } else {
            f64::INFINITY
        }
    }

    /// Normal equations `(JᵀJ, Jᵀr)` at `p`.
    fn normal_equations(&self, p: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let k = p.len();
        let mut jtj = vec![vec![0.0; k]; k];
        let mut jtr = vec![0.0; k];
        let mut g = vec![0.0; k];
        for i in 0..self.x.len() {
            self.model.gradient(self.x[i], p, &mut g);
            let w = self.sqrt_w[i];
            let r = w * (self.y[i] - self.model.value(self.x[i], p));
            for a in 0..k {
                let ga = w * g[a];
                jtr[a] += ga * r;
                for b in 0..=a {
                    jtj[a][b] += ga * w * g[b];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                jtj[b][a] = jtj[a][b];
            }
        }
        (jtj, jtr)
    }
}

/// Cholesky factorisation of a symmetric matrix scaled to unit diagonal.
/// Returns `None` when a pivot falls below `tol`.
fn cholesky(a: &[Vec<f64>], tol: f64) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if !(s > tol) {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    Some(l)
}

fn cholesky_solve(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut z = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i][k] * z[k];
        }
        z[i] = s / l[i][i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = z[i];
        for k in i + 1..n {
            s -= l[k][i] * x[k];
        }
        x[i] = s / l[i][i];
    }
    x
}

/// Solve `A x = b` for symmetric positive-definite `A` via unit-diagonal
/// scaling; `None` if `A` is numerically singular.
fn solve_scaled(a: &[Vec<f64>], b: &[f64], tol: f64) -> Option<Vec<f64>> {
    let n = b.len();
    let d: Vec<f64> = (0..n).map(|i| a[i][i].abs().sqrt()).collect();
    if d.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return None;
    }
    let s: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| a[i][j] / (d[i] * d[j])).collect())
        .collect();
    let l = cholesky(&s, tol)?;
    let bs: Vec<f64> = (0..n).map(|i| b[i] / d[i]).collect();
    Some(
        cholesky_solve(&l, &bs)
            .into_iter()
            .zip(&d)
            .map(|(v, di)| v / di)
            .collect(),
    )
}

/// Inverse of a symmetric positive-definite matrix, `None` if singular.
fn invert_spd(a: &[Vec<f64>], tol: f64) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut inv = vec![vec![0.0; n]; n];
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let col = solve_scaled(a, &e, tol)?;
        for i in 0..n {
            inv[i][j] = col[i];
        }
    }
    Some(inv)
}

const SINGULAR_PIVOT: f64 = 1e-13;

/// Minimise `Σ w_i (y_i − f(x_i; θ))²` starting from `init`.
pub fn nls_fit(
    model: &dyn CurveModel,
    x: &[f64],
    y: &[f64],
    init: &[f64],
    opts: &NlsOptions,
) -> Result<FitResult> {
    let p = init.len();
    if p != model.param_names().len() {
        return Err(Error::Parameter(format!(
            "{} takes {} parameters, got {}",
            model.name(),
            model.param_names().len(),
            p
        )));
    }
    if x.len() != y.len() {
        return Err(Error::Contract(format!(
            "x has {} points, y has {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    if n < 2 * p {
        return Err(Error::InsufficientData(format!(
            "{n} points for {p} parameters (need at least {})",
            2 * p
        )));
    }
    let sqrt_w = match &opts.weights {
        Some(w) if w.len() == n => w.iter().map(|v| v.max(0.0).sqrt()).collect(),
        Some(w) => {
            return Err(Error::Contract(format!(
                "{} weights for {n} points",
                w.len()
            )))
        }
        None => vec![1.0; n],
    };
    let prob = Problem {
        model,
        x,
        y,
        sqrt_w,
    };

    let scale_y: f64 = (0..n).map(|i| (prob.sqrt_w[i] * y[i]).powi(2)).sum();
    let mut theta = init.to_vec();
    let mut rss = prob.rss(&theta);
    if !rss.is_finite() {
        return Err(Error::Parameter(format!(
            "model is not finite at the initial guess {init:?}"
        )));
    }
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;

    'outer: while iterations < opts.max_iter {
        iterations += 1;
        if rss <= 1e-32 * scale_y || rss == 0.0 {
            converged = true;
            break;
        }
        let (jtj, jtr) = prob.normal_equations(&theta);
        loop {
            let mut damped = jtj.clone();
            let max_diag = (0..p).map(|i| jtj[i][i]).fold(0.0, f64::max);
            for i in 0..p {
                damped[i][i] += lambda * jtj[i][i].max(1e-12 * max_diag);
            }
            let step = solve_scaled(&damped, &jtr, 1e-300);
            if let Some(step) = step {
                let cand: Vec<f64> = theta.iter().zip(&step).map(|(t, s)| t + s).collect();
                let cand_rss = prob.rss(&cand);
                if cand_rss < rss {
                    let rel_f = (rss - cand_rss) / rss;
                    let step_norm = step.iter().zip(&theta).fold(0.0f64, |m, (s, t)| {
                        m.max(s.abs() / (t.abs() + opts.xtol))
                    });
                    theta = cand;
                    rss = cand_rss;
                    lambda = (lambda / 10.0).max(1e-15);
                    if rel_f <= opts.ftol || step_norm <= opts.xtol {
                        converged = true;
                        break 'outer;
                    }
                    continue 'outer;
                }
            }
            lambda *= 10.0;
            if lambda > 1e16 {
                // no descent direction left at working precision
                converged = true;
                break 'outer;
            }
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            iterations,
            last: theta,
        });
    }

    let (jtj, _) = prob.normal_equations(&theta);
    let dof = (n - p) as f64;
    let s2 = rss / dof;
    let (half_widths, degenerate) = match invert_spd(&jtj, SINGULAR_PIVOT) {
        Some(cov) => (
            (0..p)
                .map(|i| WALD_Z95 * (s2 * cov[i][i]).max(0.0).sqrt())
                .collect(),
            false,
        ),
        None => (vec![f64::INFINITY; p], true),
    };
    Ok(FitResult {
        model: model.name().to_string(),
        param_names: model.param_names().iter().map(|s| s.to_string()).collect(),
        params: theta,
        half_widths,
        rss,
        n_points: n,
        iterations,
        degenerate,
    })
}
