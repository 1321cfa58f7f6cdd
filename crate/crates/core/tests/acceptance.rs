//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use chrono::{NaiveDate, NaiveDateTime};
use metaorder_core::assignment::{
    assign_day, assign_trades, write_assignment, Assignment, Participation, ParticipationProfile,
};
use metaorder_core::impact::{
    fit_decay, fit_execution_profile, sql_curve, DecaySettings, FitSettings, ImpactObservation,
    SqlMode,
};
use metaorder_core::lmf::{acf, fit_alpha, fit_gamma, median, AcfVariant};
use metaorder_core::market_data::{
    compute_daily_stats, parse_trades, split_days, Schema, Sign, TradeEvent,
};
use metaorder_core::metaorder::{build_metaorders, child_impact_profile};
use metaorder_core::nls::{decay_kernel, FitResult};
use metaorder_core::pipeline::{infer_stock, run_pipeline, sha256_hex, LmfSettings, PipelineConfig};
use metaorder_core::powerlaw::fit_discrete_power_law;
use metaorder_core::rng::substream;
use metaorder_core::simulator::{simulate, true_run_check, SimConfig};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

// ---------------------------------------------------------------------------
// 1. golden metaorder

const GOLDEN_VOLUMES: [f64; 11] = [
    2500.0, 14559.0, 11652.0, 989.0, 254.0, 8700.0, 2266.0, 2100.0, 7455.0, 13724.0, 13181.0,
];
const GOLDEN_MIDS: [f64; 11] = [
    1478.0, 1479.0, 1479.0, 1479.5, 1479.5, 1479.5, 1479.5, 1480.0, 1479.5, 1480.0, 1479.5,
];
const GOLDEN_IMPACT_E4: [f64; 11] = [
    6.77, 13.53, 13.53, 16.91, 16.91, 16.91, 16.91, 20.29, 16.91, 20.29, 16.91,
];
const GOLDEN_PHI: [f64; 11] = [0.03, 0.22, 0.37, 0.38, 0.39, 0.50, 0.53, 0.56, 0.65, 0.83, 1.00];

fn date() -> NaiveDate {
    NaiveDate::from_ymd_opt(2023, 1, 3).unwrap()
}

fn at(sec: u32) -> NaiveDateTime {
    date().and_hms_opt(9, 0, 0).unwrap() + chrono::Duration::seconds(i64::from(sec))
}

fn golden_metaorder() -> Verdict {
    // opening mid implied by the first row
    let m0 = GOLDEN_MIDS[0] * (-GOLDEN_IMPACT_E4[0] * 1e-4).exp();
    let trades: Vec<TradeEvent> = (0..11)
        .map(|i| TradeEvent {
            mic: "XJSE".into(),
            ticker: "GLD".into(),
            listing_id: 1,
            date: date(),
            timestamp: at(30 * i as u32),
            seq_no: i as u64,
            sign: Sign::Buy,
            price: GOLDEN_MIDS[i],
            volume: GOLDEN_VOLUMES[i],
            mid_before: if i == 0 { m0 } else { GOLDEN_MIDS[i - 1] },
            mid_after: GOLDEN_MIDS[i],
            mid_after_delayed: None,
        })
        .collect();
    let stats = compute_daily_stats(&trades).unwrap();
    let day = build_metaorders(&trades, &Assignment { trader_ids: vec![1; 11] }, &stats).unwrap();
    assert_eq!(day.metaorders.len(), 1);
    let profile = child_impact_profile(&day.metaorders[0]).unwrap();
    let mut max_dphi = 0.0f64;
    let mut max_di = 0.0f64;
    for (i, (phi, imp)) in profile.iter().enumerate() {
        max_dphi = max_dphi.max((phi - GOLDEN_PHI[i]).abs());
        max_di = max_di.max((imp - GOLDEN_IMPACT_E4[i] * 1e-4).abs());
    }
    verdict(
        profile.len() == 11 && max_dphi <= 0.005 && max_di <= 0.01e-4,
        format!("m0 = {m0:.5}, max |dphi| = {max_dphi:.4}, max |dI| = {:.4}e-4", max_di * 1e4),
    )
}

// ---------------------------------------------------------------------------
// 2. simulator end to end

fn lmf_end_to_end() -> Verdict {
    let rows: Vec<(f64, f64, Option<f64>)> = (1..=10u64)
        .into_par_iter()
        .map(|seed| {
            let cfg = SimConfig {
                n_traders: 50,
                alpha: 1.5,
                l_min: 2,
                l_cap: None,
                n_orders: 1_000_000,
                participation: Participation::power_law(2.0),
                seed,
            };
            let out = simulate(&cfg).unwrap();
            true_run_check(&out).unwrap();
            let c = acf(&out.signs, 1000, AcfVariant::Raw).unwrap();
            let g = fit_gamma(&c, 10, 1000).unwrap();
            let lengths: Vec<usize> = out.completed_lengths().iter().map(|&l| l as usize).collect();
            let a = fit_alpha(&lengths).unwrap();
            let (runs, _) = infer_stock("sim", &out.signs, &out.trader_sequences(), &LmfSettings::default());
            (g.gamma, a.alpha_lmf, runs.alpha_lmf)
        })
        .collect();
    let gammas: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let alphas: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let devs: Vec<f64> = rows.iter().map(|r| (r.0 - (r.1 - 1.0)).abs()).collect();
    let run_alphas: Vec<f64> = rows.iter().filter_map(|r| r.2).collect();
    let mg = median(&gammas).unwrap();
    let ma = median(&alphas).unwrap();
    let md = median(&devs).unwrap();
    verdict(
        (mg - 0.5).abs() <= 0.15 && (ma - 1.5).abs() <= 0.10 && md < 0.1,
        format!(
            "median gamma = {mg:.4}, median alpha_lmf = {ma:.4}, median |gamma-(alpha-1)| = {md:.4} \
             (diagnostic: alpha from merged splitter runs = {:.4})",
            median(&run_alphas).unwrap_or(f64::NAN)
        ),
    )
}

// ---------------------------------------------------------------------------
// 3. power-law tail recovery

/// Inverse-CDF sampler on an explicit table of `x^(-a)` weights. The mass
/// above the table end is below 1e-8 for the exponents used here.
struct TableSampler {
    x_min: u64,
    cdf: Vec<f64>,
}

impl TableSampler {
    fn new(a: f64, x_min: u64, x_max: u64) -> Self {
        let w: Vec<f64> = (x_min..=x_max).map(|x| (x as f64).powf(-a)).collect();
        let total: f64 = w.iter().sum();
        let mut acc = 0.0;
        let cdf = w
            .iter()
            .map(|v| {
                acc += v / total;
                acc
            })
            .collect();
        TableSampler { x_min, cdf }
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> u64 {
        let u: f64 = rng.random();
        self.x_min + self.cdf.partition_point(|&c| c < u).min(self.cdf.len() - 1) as u64
    }
}

fn clauset_recovery() -> Verdict {
    let sampler = TableSampler::new(2.5, 2, 1_000_000);
    let fits: Vec<(f64, u64)> = (1..=10u64)
        .into_par_iter()
        .map(|seed| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<u64> = (0..100_000).map(|_| sampler.draw(&mut rng)).collect();
            let f = fit_discrete_power_law(&data).unwrap();
            (f.alpha_pdf, f.x_min)
        })
        .collect();
    let good = fits
        .iter()
        .filter(|(a, x)| (2.45..=2.55).contains(a) && *x <= 4)
        .count();
    let summary: Vec<String> = fits.iter().map(|(a, x)| format!("{a:.3}@{x}")).collect();
    verdict(good >= 9, format!("{good}/10 seeds recovered [{}]", summary.join(" ")))
}

// ---------------------------------------------------------------------------
// 4. curve fits with Wald intervals

fn coverage<F>(truth: [f64; 2], reps: u64, fit: F) -> ([usize; 2], usize)
where
    F: Fn(u64) -> FitResult + Sync,
{
    let hits: Vec<[bool; 2]> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let f = fit(r);
            [f.covers(0, truth[0]), f.covers(1, truth[1])]
        })
        .collect();
    let each = [
        hits.iter().filter(|h| h[0]).count(),
        hits.iter().filter(|h| h[1]).count(),
    ];
    (each, hits.iter().filter(|h| h[0] && h[1]).count())
}

fn nls_golden() -> Verdict {
    let noise = Normal::new(0.0, 5e-6).unwrap();
    let (g1, g2) = (4.54e-4, 0.766);
    let profile = coverage([g1, g2], 100, |rep| {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1000 + rep);
        let pts: Vec<(f64, f64)> = (0..40)
            .map(|k| {
                let phi = (k as f64 + 0.5) / 40.0;
                (phi, g1 * phi.powf(g2) + noise.sample(&mut rng))
            })
            .collect();
        let s = FitSettings {
            n_bins: 40,
            min_bin_count: 1,
            count_weighted: false,
        };
        fit_execution_profile(&pts, &s).unwrap().fit
    });
    let (g0, beta) = (5.01e-4, 0.241);
    let decay = coverage([g0, beta], 100, |rep| {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2000 + rep);
        let pts: Vec<(f64, f64)> = (0..30)
            .map(|k| {
                // geometric midpoint of the k-th log bin on [1, 10]
                let z = 10f64.powf((k as f64 + 0.5) / 30.0);
                (z, g0 * decay_kernel(z, beta) + noise.sample(&mut rng))
            })
            .collect();
        let s = DecaySettings {
            n_bins: 30,
            z_max: 10.0,
            min_bin_count: 1,
            count_weighted: false,
        };
        fit_decay(&pts, &s).unwrap().fit
    });
    let pass = profile.0.iter().chain(&decay.0).all(|&c| c >= 90);
    verdict(
        pass,
        format!(
            "profile coverage gamma1 {}/100, gamma2 {}/100 (joint {}); \
             decay coverage gamma0 {}/100, beta {}/100 (joint {})",
            profile.0[0], profile.0[1], profile.1, decay.0[0], decay.0[1], decay.1
        ),
    )
}

// ---------------------------------------------------------------------------
// 5. square-root law exactness

fn sql_exactness() -> Verdict {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let obs: Vec<ImpactObservation> = (0..2000)
        .map(|i| {
            let v = 10f64.powf(rng.random_range(5.0..7.0));
            let q = v * 10f64.powf(rng.random_range(-5.0..-0.5));
            let sigma = rng.random_range(0.005..0.05);
            ImpactObservation {
                metaorder_id: format!("m{i}"),
                ticker: if i % 2 == 0 { "AAA".into() } else { "BBB".into() },
                volume: q,
                impact: 0.5 * sigma * (q / v).sqrt(),
                duration_min: 1.0,
                avg_volume_20: v,
                avg_vol_20: sigma,
            }
        })
        .collect();
    let c = sql_curve(&obs, SqlMode::Pooled, 40).unwrap();
    let (y, b) = (c.prefactor().unwrap(), c.slope().unwrap());
    let y3 = format!("{:.3}", y);
    verdict(
        (b - 0.5).abs() <= 0.001 && y3 == "0.500",
        format!("slope = {b:.6}, Y = {y:.6}"),
    )
}

// ---------------------------------------------------------------------------
// 6. autocorrelation unit truths

fn acf_truths() -> Verdict {
    use Sign::{Buy as P, Sell as M};
    let constant = acf(&[P; 100], 20, AcfVariant::Raw).unwrap();
    let alt: Vec<Sign> = (0..100).map(|i| if i % 2 == 0 { P } else { M }).collect();
    let alternating = acf(&alt, 2, AcfVariant::Raw).unwrap();
    let hand = acf(&[P, P, M, P], 2, AcfVariant::Raw).unwrap();
    let ok = constant.values.iter().all(|&v| v == 1.0)
        && alternating.values == [-1.0, 1.0]
        && hand.values[0] == -1.0 / 3.0
        && hand.values[1] == 0.0;
    verdict(
        ok,
        format!(
            "constant all 1: {}, alternating {:?}, hand case C(1) = {}",
            constant.values.iter().all(|&v| v == 1.0),
            alternating.values,
            hand.values[0]
        ),
    )
}

// ---------------------------------------------------------------------------
// 7 and 8. assignment and volume conservation on the bundled corpus

fn corpus_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/corpus")
}

fn corpus_days() -> BTreeMap<(String, NaiveDate), Vec<TradeEvent>> {
    let mut all = Vec::new();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(corpus_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    paths.sort();
    for p in paths {
        let f = std::fs::File::open(&p).unwrap();
        all.extend(parse_trades(f, &Schema::default(), b',').unwrap().trades);
    }
    split_days(all)
}

fn scenarios() -> Vec<(usize, Participation, u64)> {
    vec![
        (4, Participation::Homogeneous, 1),
        (5, Participation::Homogeneous, 2),
        (10, Participation::power_law(2.0), 3),
        (50, Participation::power_law(2.0), 4),
    ]
}

fn partition_holds(a: &Assignment, n: usize) -> bool {
    let per = a.per_trader(n);
    let mut seen = vec![false; a.len()];
    for list in &per {
        if !list.windows(2).all(|w| w[0] < w[1]) {
            return false;
        }
        for &i in list {
            if seen[i] {
                return false;
            }
            seen[i] = true;
        }
    }
    seen.iter().all(|&s| s) && a.trader_ids.iter().all(|&t| t >= 1 && t as usize <= n)
}

fn assignment_statistics() -> Verdict {
    let profile = ParticipationProfile::homogeneous(4).unwrap();
    let n = 1_000_000;
    let a = assign_trades(n, &profile, &mut substream(7, "assign", &[]));
    let b = assign_trades(n, &profile, &mut substream(7, "assign", &[]));
    let shares: Vec<f64> = a.per_trader(4).iter().map(|l| l.len() as f64 / n as f64).collect();
    let shares_ok = shares.iter().all(|s| (s - 0.25).abs() <= 0.002);
    let mut invariants = partition_holds(&a, 4) && a == b;
    let mut bytes_equal = true;
    let days = corpus_days();
    for (n_traders, p, seed) in scenarios() {
        for ((t, d), trades) in &days {
            let (_, a1) = assign_day(trades, n_traders, &p, seed, t, *d).unwrap();
            let (_, a2) = assign_day(trades, n_traders, &p, seed, t, *d).unwrap();
            invariants &= a1.len() == trades.len() && partition_holds(&a1, n_traders);
            let (mut x, mut y) = (Vec::new(), Vec::new());
            write_assignment(&mut x, trades, &a1).unwrap();
            write_assignment(&mut y, trades, &a2).unwrap();
            bytes_equal &= x == y;
        }
    }
    verdict(
        shares_ok && invariants && bytes_equal,
        format!(
            "shares {:?}; partition/order invariants {}; byte-identical reruns {} ({} corpus units x {} scenarios)",
            shares.iter().map(|s| format!("{s:.4}")).collect::<Vec<_>>(),
            invariants,
            bytes_equal,
            days.len(),
            scenarios().len()
        ),
    )
}

fn volume_conservation() -> Verdict {
    let days = corpus_days();
    let mut checked = 0;
    let mut bad = Vec::new();
    for (n_traders, p, seed) in scenarios() {
        for ((t, d), trades) in &days {
            let stats = compute_daily_stats(trades).unwrap();
            let (_, a) = assign_day(trades, n_traders, &p, seed, t, *d).unwrap();
            let day = build_metaorders(trades, &a, &stats).unwrap();
            let q: f64 = day.metaorders.iter().map(|m| m.total_volume).sum();
            checked += 1;
            if q + day.filtered_volume != stats.daily_volume {
                bad.push(format!("{t} {d} N={n_traders}"));
            }
        }
    }
    verdict(bad.is_empty(), format!("{checked} (ticker, day, scenario) units, mismatches: {bad:?}"))
}

// ---------------------------------------------------------------------------
// 9. pipeline determinism

fn pipeline_determinism() -> Verdict {
    let out = tempfile::tempdir().unwrap();
    let corpus = corpus_dir();
    let mut cfg = PipelineConfig::from_json(
        r#"{
            "scenarios": [
                {"label": "n5-homogeneous", "n_traders": 5, "participation": "homogeneous", "seed": 1},
                {"label": "n10-power-law", "n_traders": 10, "participation": "power_law", "delta": 2.0, "seed": 2}
            ],
            "simulator": [
                {"label": "a15", "n_traders": 10, "alpha": 1.5, "n_orders": 50000,
                 "participation": "power_law", "delta": 2.0, "seed": 9}
            ],
            "output_dir": "unused"
        }"#,
    )
    .unwrap();
    for t in ["SYNA", "SYNB"] {
        cfg.data.insert(t.into(), format!("{t}_*.csv"));
    }
    cfg.output_dir = out.path().to_path_buf();
    let a = run_pipeline(&cfg, &corpus).unwrap();
    let b = run_pipeline(&cfg, &corpus).unwrap();
    let same_list = a.manifest.artifacts == b.manifest.artifacts;
    // hashes recorded in the manifest match the files on disk
    let on_disk = a.manifest.artifacts.iter().all(|art| {
        let x = std::fs::read(a.run_dir.join(&art.path)).unwrap();
        let y = std::fs::read(b.run_dir.join(&art.path)).unwrap();
        sha256_hex(&x) == art.sha256 && x == y
    });
    let manifests = std::fs::read(a.run_dir.join("manifest.json")).unwrap()
        == std::fs::read(b.run_dir.join("manifest.json")).unwrap();
    verdict(
        same_list && on_disk && manifests && a.exit_code() == 0 && a.run_dir != b.run_dir,
        format!(
            "{} artifacts, identical hashes {}, identical manifests {}, failures {}",
            a.manifest.artifacts.len(),
            same_list && on_disk,
            manifests,
            a.manifest.failures.len()
        ),
    )
}

fn main() {
    type Check = fn() -> Verdict;
    let checks: [(u32, &str, Check, Duration); 9] = [
        (1, "golden metaorder profile", golden_metaorder, Duration::from_secs(1)),
        (2, "simulator end-to-end gamma and alpha", lmf_end_to_end, Duration::from_secs(300)),
        (3, "power-law tail recovery", clauset_recovery, Duration::from_secs(30)),
        (4, "curve fits inside Wald intervals", nls_golden, Duration::from_secs(60)),
        (5, "square-root law exactness", sql_exactness, Duration::from_secs(60)),
        (6, "autocorrelation unit truths", acf_truths, Duration::from_secs(60)),
        (7, "assignment statistics and invariants", assignment_statistics, Duration::from_secs(120)),
        (8, "volume conservation", volume_conservation, Duration::from_secs(120)),
        (9, "pipeline determinism", pipeline_determinism, Duration::from_secs(300)),
    ];
    let mut failed = 0;
    for (id, name, check, budget) in checks {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check));
        let elapsed = start.elapsed();
        let (pass, detail) = match result {
            Ok(v) => (v.pass && elapsed < budget, v.detail),
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {id} [{name}]: {} ({detail}; {:.2}s of {}s budget)",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!("acceptance: {}/9 criteria passed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
