//! Scatter aggregation into linear or logarithmic bins.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-bin summary of a scatter. Empty bins carry `count = 0` and `None`
/// for every mean/stderr field.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BinnedCurve {
    pub bin_edges: Vec<f64>,
    pub bin_centers: Vec<f64>,
    pub mean_x: Vec<Option<f64>>,
    pub mean_y: Vec<Option<f64>>,
    pub count: Vec<usize>,
    /// Sample standard deviation over `sqrt(count)`; needs two points.
    pub stderr: Vec<Option<f64>>,
    pub min_y: Vec<Option<f64>>,
    pub max_y: Vec<Option<f64>>,
}

impl BinnedCurve {
    pub fn n_bins(&self) -> usize {
        self.bin_centers.len()
    }

    pub fn occupied_bins(&self) -> usize {
        self.count.iter().filter(|&&c| c > 0).count()
    }

    pub fn total_count(&self) -> usize {
        self.count.iter().sum()
    }

    /// `(center, mean_y, count)` for bins holding at least `min_count` points.
    pub fn populated(&self, min_count: usize) -> Vec<(f64, f64, usize)> {
        (0..self.n_bins())
            .filter(|&i| self.count[i] >= min_count.max(1))
            .filter_map(|i| self.mean_y[i].map(|m| (self.bin_centers[i], m, self.count[i])))
            .collect()
    }

    /// Rows of `bin_center,mean,count,stderr`; absent values are empty fields.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["bin_center", "mean", "count", "stderr"])?;
        for i in 0..self.n_bins() {
            w.write_record([
                self.bin_centers[i].to_string(),
                opt(self.mean_y[i]),
                self.count[i].to_string(),
                opt(self.stderr[i]),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<curve sink>", e))?;
        Ok(())
    }
}

pub(crate) fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `n + 1` edges equally spaced in `log10` between `lo` and `hi`.
pub fn log_edges(lo: f64, hi: f64, n_bins: usize) -> Vec<f64> {
    let (a, b) = (lo.log10(), hi.log10());
    let w = (b - a) / n_bins as f64;
    let mut edges: Vec<f64> = (0..=n_bins).map(|i| 10f64.powf(a + w * i as f64)).collect();
    edges[0] = lo;
    edges[n_bins] = hi;
    edges
}

pub fn linear_edges(lo: f64, hi: f64, n_bins: usize) -> Vec<f64> {
    let w = (hi - lo) / n_bins as f64;
    let mut edges: Vec<f64> = (0..=n_bins).map(|i| lo + w * i as f64).collect();
    edges[n_bins] = hi;
    edges
}

/// Index of the bin holding `x`, closed on the right for the last bin.
/// Points outside `[edges[0], edges[n]]` get `None`.
pub fn bin_index(edges: &[f64], x: f64) -> Option<usize> {
    let n = edges.len().checked_sub(1)?;
    if n == 0 || !(x >= edges[0] && x <= edges[n]) {
        return None;
    }
    let k = edges.partition_point(|&e| e <= x);
    Some(k.saturating_sub(1).min(n - 1))
}

#[derive(Default, Clone)]
struct Acc {
    n: usize,
    sx: f64,
    sy: f64,
    syy_dev: f64,
    mean: f64,
    min: f64,
    max: f64,
}

impl Acc {
    fn push(&mut self, x: f64, y: f64) {
        if self.n == 0 {
            self.min = y;
            self.max = y;
        }
        self.n += 1;
        self.sx += x;
        self.sy += y;
        // Welford update for the spread
        let d = y - self.mean;
        self.mean += d / self.n as f64;
        self.syy_dev += d * (y - self.mean);
        self.min = self.min.min(y);
        self.max = self.max.max(y);
    }
}

/// Aggregate points into the bins defined by `edges`, with the given
/// representative centers. Points outside the edge range are ignored.
pub fn bin_with_edges(points: &[(f64, f64)], edges: Vec<f64>, centers: Vec<f64>) -> BinnedCurve {
    let n = centers.len();
    let mut acc = vec![Acc::default(); n];
    for &(x, y) in points {
        if let Some(k) = bin_index(&edges, x) {
            acc[k].push(x, y);
        }
    }
    let mut curve = BinnedCurve {
        bin_edges: edges,
        bin_centers: centers,
        ..Default::default()
    };
    for a in acc {
        curve.count.push(a.n);
        if a.n == 0 {
            curve.mean_x.push(None);
            curve.mean_y.push(None);
            curve.stderr.push(None);
            curve.min_y.push(None);
            curve.max_y.push(None);
            continue;
        }
        let nf = a.n as f64;
        curve.mean_x.push(Some(a.sx / nf));
        curve.mean_y.push(Some(a.sy / nf));
        curve.stderr.push(if a.n > 1 {
            Some((a.syy_dev / (nf - 1.0)).sqrt() / nf.sqrt())
        } else {
            None
        });
        curve.min_y.push(Some(a.min));
        curve.max_y.push(Some(a.max));
    }
    curve
}

/// Bin by `x` into `n_bins` log10-equal bins spanning the observed range.
///
/// Centers are geometric midpoints. When every `x` is identical the range is
/// widened by half a decade each side so that edges stay strictly increasing.
pub fn log_bin(points: &[(f64, f64)], n_bins: usize) -> Result<BinnedCurve> {
    if n_bins == 0 {
        return Err(Error::Parameter("need at least one bin".into()));
    }
    if let Some(&(x, _)) = points.iter().find(|(x, _)| !(*x > 0.0 && x.is_finite())) {
        return Err(Error::Data(format!("log binning needs x > 0, got {x}")));
    }
    if points.is_empty() {
        return Ok(BinnedCurve::default());
    }
    let lo = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo {
        (lo, hi)
    } else {
        (lo / 10f64.sqrt(), hi * 10f64.sqrt())
    };
    Ok(log_bin_range(points, n_bins, lo, hi))
}

/// Log bins on a fixed `[lo, hi]` range.
pub fn log_bin_range(points: &[(f64, f64)], n_bins: usize, lo: f64, hi: f64) -> BinnedCurve {
    let edges = log_edges(lo, hi, n_bins);
    let centers = edges.windows(2).map(|w| (w[0] * w[1]).sqrt()).collect();
    bin_with_edges(points, edges, centers)
}

/// Equal-width bins on `[lo, hi]`, arithmetic centers.
pub fn linear_bin(points: &[(f64, f64)], n_bins: usize, lo: f64, hi: f64) -> BinnedCurve {
    let edges = linear_edges(lo, hi, n_bins);
    let centers = edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    bin_with_edges(points, edges, centers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn single_point() {
        let c = log_bin(&[(1.0, 5.0)], 1).unwrap();
        assert_eq!(c.count, vec![1]);
        assert_eq!(c.mean_y, vec![Some(5.0)]);
        assert_eq!(c.stderr, vec![None]);
    }

    #[test]
    fn arithmetic_mean() {
        let c = log_bin(&[(1.0, 2.0), (1.0001, 4.0)], 1).unwrap();
        assert_eq!(c.mean_y, vec![Some(3.0)]);
        let se = (2f64).sqrt() / 2f64.sqrt();
        assert!((c.stderr[0].unwrap() - se).abs() < 1e-12);
    }

    #[test]
    fn domain_and_empty() {
        assert!(matches!(log_bin(&[(0.0, 1.0)], 3), Err(Error::Data(_))));
        assert!(matches!(log_bin(&[(-1.0, 1.0)], 3), Err(Error::Data(_))));
        assert_eq!(log_bin(&[], 40).unwrap().n_bins(), 0);
    }

    #[test]
    fn identical_x_single_occupied_bin() {
        let pts = vec![(0.01, 1.0); 10];
        let c = log_bin(&pts, 40).unwrap();
        assert_eq!(c.n_bins(), 40);
        assert_eq!(c.occupied_bins(), 1);
        assert!(c.bin_edges.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn log_uniform_bin_means_stay_in_bin() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<(f64, f64)> = (0..1000)
            .map(|_| {
                let x = 10f64.powf(-5.0 + 5.0 * rng.random::<f64>());
                (x, x)
            })
            .collect();
        let c = log_bin(&pts, 40).unwrap();
        assert_eq!(c.total_count(), 1000);
        for i in 0..40 {
            // brute-force per-bin mean over the points inside the bin
            let inside: Vec<f64> = pts
                .iter()
                .filter(|p| bin_index(&c.bin_edges, p.0) == Some(i))
                .map(|p| p.1)
                .collect();
            assert_eq!(inside.len(), c.count[i]);
            if let Some(m) = c.mean_y[i] {
                let brute = inside.iter().sum::<f64>() / inside.len() as f64;
                assert!((m - brute).abs() <= 1e-12 * brute);
                assert!(m >= c.bin_edges[i] && m <= c.bin_edges[i + 1]);
            }
        }
    }

    #[test]
    fn linear_bins_close_last_edge() {
        let c = linear_bin(&[(0.0, 1.0), (1.0, 3.0), (0.5, 2.0)], 4, 0.0, 1.0);
        assert_eq!(c.count, vec![1, 0, 1, 1]);
        assert_eq!(c.bin_centers, vec![0.125, 0.375, 0.625, 0.875]);
    }

    #[test]
    fn csv_leaves_empty_bins_blank() {
        let c = linear_bin(&[(0.1, 1.0)], 2, 0.0, 1.0);
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s, "bin_center,mean,count,stderr\n0.25,1,1,\n0.75,,0,\n");
    }

    proptest! {
        #[test]
        fn counts_and_bounds(pts in prop::collection::vec((1e-6f64..1e3, -10f64..10.0), 1..200),
                             n in 1usize..50) {
            let c = log_bin(&pts, n).unwrap();
            prop_assert_eq!(c.total_count(), pts.len());
            for i in 0..c.n_bins() {
                if let (Some(m), Some(lo), Some(hi)) = (c.mean_y[i], c.min_y[i], c.max_y[i]) {
                    prop_assert!(m >= lo - 1e-9 && m <= hi + 1e-9);
                }
            }
        }
    }
}
