use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::NaiveDate;
use metaorder_core::assignment::{assign_day, write_assignment, Assignment, Participation};
use metaorder_core::corpus::{write_corpus, CorpusConfig};
use metaorder_core::impact::{
    duration_curve, fit_decay, fit_execution_profile, post_execution_samples,
    profile_points_from_records, sql_curve, DecaySettings, FitSettings, ImpactObservation,
    SqlMode,
};
use metaorder_core::lmf::{fit_alpha, lmf_compare, StockLmf};
use metaorder_core::market_data::{
    compute_daily_stats, parse_trades, read_daily_stats, rolling_stats, split_days,
    write_daily_stats, write_trades, DailyStats, ParsedTrades, RejectionReport, Schema,
    TradeEvent, DATE_FORMAT, ROLLING_WINDOW,
};
use metaorder_core::metaorder::{
    build_metaorders, child_records, read_records, write_records, ChildRecord, MetaorderRecord,
};
use metaorder_core::pipeline::{
    infer_gamma, infer_stock, plot_rows, run_pipeline, simulate_and_infer, CurveReport,
    LmfSettings, PipelineConfig, Scenario,
};
use metaorder_core::simulator::SimConfig;
use metaorder_core::Error;
use serde::Serialize;

use crate::{
    AnalyzeCommand, Cli, Command, LmfCommand, LmfFlags, ParticipationArgs, ParticipationKind,
    UnitArgs,
};

pub fn dispatch(cli: &Cli) -> Result<u8> {
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    match &cli.command {
        Command::Run => return run(cli),
        Command::Ingest(a) => ingest(&a.inputs, a.delimiter, &out)?,
        Command::Stats(a) => stats(&a.trades, &out)?,
        Command::Assign(a) => {
            let p = participation(&a.participation);
            assign(&a.trades.trades, a.n_traders, &p, cli.seed.unwrap_or(0), &out)?
        }
        Command::Metaorders(a) => metaorders(a, &out)?,
        Command::Analyze(a) => analyze(a, &out)?,
        Command::Lmf(c) => lmf(c, &out)?,
        Command::Simulate(a) => {
            let cfg = SimConfig {
                n_traders: a.n_traders,
                alpha: a.alpha,
                l_min: a.l_min,
                l_cap: a.l_cap,
                n_orders: a.n_orders,
                participation: participation(&a.participation),
                seed: cli.seed.unwrap_or(0),
            };
            simulate(&cfg, &lmf_settings(&a.flags), &out)?
        }
        Command::Synth(a) => synth(a.trades_per_day, cli.seed, &out)?,
    }
    Ok(0)
}

fn participation(a: &ParticipationArgs) -> Participation {
    match a.participation {
        ParticipationKind::Homogeneous => Participation::Homogeneous,
        ParticipationKind::PowerLaw => Participation::PowerLaw {
            delta: a.delta,
            f_min: a.f_min,
            f_max: a.f_max,
        },
    }
}

fn lmf_settings(f: &LmfFlags) -> LmfSettings {
    let mut s = LmfSettings::default();
    s.tau_min = f.tau_min;
    s.tau_max = f.tau_max;
    if f.acf_centered {
        s.variant = metaorder_core::lmf::AcfVariant::Centered;
    }
    s.classify.test_level = f.st_test_level;
    s.classify.min_orders = f.min_orders;
    s
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    tracing::info!("wrote {}", path.display());
    Ok(())
}

fn open(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(BufReader::new(f))
}

fn read_trades(paths: &[PathBuf], delimiter: u8) -> Result<ParsedTrades> {
    let mut all = ParsedTrades {
        trades: Vec::new(),
        report: RejectionReport::default(),
    };
    for p in paths {
        let parsed = parse_trades(open(p)?, &Schema::default(), delimiter)
            .with_context(|| format!("parsing {}", p.display()))?;
        all.report.merge(&parsed.report);
        all.trades.extend(parsed.trades);
    }
    Ok(all)
}

fn trade_days(paths: &[PathBuf]) -> Result<BTreeMap<(String, NaiveDate), Vec<TradeEvent>>> {
    Ok(split_days(read_trades(paths, b',')?.trades))
}

fn unit_stem(ticker: &str, date: NaiveDate) -> String {
    format!("{ticker}_{}", date.format(DATE_FORMAT))
}

fn ingest(inputs: &[PathBuf], delimiter: char, out: &Path) -> Result<()> {
    if !delimiter.is_ascii() {
        return Err(Error::Parameter(format!("delimiter {delimiter:?} is not one byte")).into());
    }
    let mut parsed = read_trades(inputs, delimiter as u8)?;
    metaorder_core::market_data::sort_trades(&mut parsed.trades);
    let path = out.join("trades.csv");
    let mut w = create(&path)?;
    write_trades(&mut w, &parsed.trades)?;
    w.flush()?;
    write_json(&out.join("rejections.json"), &parsed.report)?;
    tracing::info!(
        accepted = parsed.report.accepted,
        rejected = parsed.report.rejected,
        "wrote {}",
        path.display()
    );
    Ok(())
}

fn stats(trades: &[PathBuf], out: &Path) -> Result<()> {
    let days = trade_days(trades)?;
    let mut daily = Vec::new();
    for d in days.values() {
        daily.push(compute_daily_stats(d)?);
    }
    let daily = rolling_stats(&daily, ROLLING_WINDOW);
    let path = out.join("daily_stats.csv");
    let mut w = create(&path)?;
    write_daily_stats(&mut w, &daily)?;
    w.flush()?;
    tracing::info!("wrote {}", path.display());
    Ok(())
}

fn assign(trades: &[PathBuf], n: usize, p: &Participation, seed: u64, out: &Path) -> Result<()> {
    for ((ticker, date), day) in trade_days(trades)? {
        let (_, a) = assign_day(&day, n, p, seed, &ticker, date)?;
        let path = out.join(format!("assign_{}.csv", unit_stem(&ticker, date)));
        let mut w = create(&path)?;
        write_assignment(&mut w, &day, &a)?;
        w.flush()?;
    }
    Ok(())
}

/// Trades, assignment and statistics of every unit named in `args`.
fn load_units(args: &UnitArgs) -> Result<Vec<(Vec<TradeEvent>, Assignment, DailyStats)>> {
    let stats: BTreeMap<(String, NaiveDate), DailyStats> = read_daily_stats(open(&args.stats)?)?
        .into_iter()
        .map(|s| ((s.ticker.clone(), s.date), s))
        .collect();
    let mut units = Vec::new();
    for ((ticker, date), day) in trade_days(&args.trades.trades)? {
        let s = stats.get(&(ticker.clone(), date)).cloned().ok_or_else(|| {
            Error::MissingDailyStats {
                ticker: ticker.clone(),
                date: date.to_string(),
            }
        })?;
        let path = args
            .assign_dir
            .join(format!("assign_{}.csv", unit_stem(&ticker, date)));
        let rows = metaorder_core::assignment::read_assignment(open(&path)?)?;
        let by_seq: BTreeMap<u64, u32> = rows.into_iter().collect();
        let trader_ids = day
            .iter()
            .map(|t| {
                by_seq.get(&t.seq_no).copied().ok_or_else(|| {
                    Error::Contract(format!("trade {} missing from {}", t.seq_no, path.display()))
                })
            })
            .collect::<std::result::Result<Vec<u32>, Error>>()?;
        units.push((day, Assignment { trader_ids }, s));
    }
    Ok(units)
}

fn metaorders(args: &UnitArgs, out: &Path) -> Result<()> {
    let mut records = Vec::new();
    let mut children: Vec<ChildRecord> = Vec::new();
    for (day, a, s) in load_units(args)? {
        let built = build_metaorders(&day, &a, &s)?;
        for m in &built.metaorders {
            records.push(MetaorderRecord::from(m));
            children.extend(child_records(m)?);
        }
    }
    let mut w = create(&out.join("metaorders.csv"))?;
    write_records(&mut w, &records)?;
    w.flush()?;
    let mut w = create(&out.join("children.csv"))?;
    write_records(&mut w, &children)?;
    w.flush()?;
    tracing::info!(metaorders = records.len(), "wrote {}", out.display());
    Ok(())
}

fn save_report(out: &Path, stem: &str, report: &CurveReport) -> Result<()> {
    write_json(&out.join(format!("{stem}.json")), report)?;
    let path = out.join(format!("{stem}.csv"));
    let mut w = create(&path)?;
    w.write_all(&plot_rows(report)?)?;
    w.flush()?;
    Ok(())
}

fn read_metaorders(path: &Path) -> Result<Vec<MetaorderRecord>> {
    Ok(read_records(open(path)?)?)
}

fn analyze(cmd: &AnalyzeCommand, out: &Path) -> Result<()> {
    match cmd {
        AnalyzeCommand::Sql {
            metaorders,
            bins,
            per_stock,
        } => {
            let records = read_metaorders(metaorders)?;
            let obs: Vec<ImpactObservation> = records.iter().map(ImpactObservation::from).collect();
            let mut groups: BTreeMap<String, Vec<ImpactObservation>> = BTreeMap::new();
            if *per_stock {
                for o in obs {
                    groups.entry(format!("sql_stock_{}", o.ticker)).or_default().push(o);
                }
            } else {
                groups.insert("sql_pooled".into(), obs);
            }
            let mode = if *per_stock { SqlMode::PerStock } else { SqlMode::Pooled };
            for (stem, o) in groups {
                let c = sql_curve(&o, mode, *bins)?;
                if c.fit.is_none() {
                    tracing::warn!("{stem}: too few occupied bins for the power fit");
                }
                let scale = match mode {
                    SqlMode::Pooled => 1.0,
                    SqlMode::PerStock => c.mean_vol,
                };
                save_report(out, &stem, &CurveReport {
                    family: "sql".into(),
                    curve: c.curve,
                    fit: c.fit,
                    theory_scale: Some(scale),
                    note: None,
                    settings: serde_json::json!({ "n_bins": bins, "mode": mode }),
                })?;
            }
        }
        AnalyzeCommand::Duration { metaorders, bins } => {
            let records = read_metaorders(metaorders)?;
            let obs: Vec<ImpactObservation> = records.iter().map(ImpactObservation::from).collect();
            save_report(out, "duration", &CurveReport {
                family: "duration".into(),
                curve: duration_curve(&obs, *bins)?,
                fit: None,
                theory_scale: None,
                note: None,
                settings: serde_json::json!({ "n_bins": bins }),
            })?;
        }
        AnalyzeCommand::Profile {
            metaorders,
            children,
            bins,
            min_children,
        } => {
            let records = read_metaorders(metaorders)?;
            let kids: Vec<ChildRecord> = read_records(open(children)?)?;
            let pts = profile_points_from_records(&records, &kids, *min_children);
            let settings = FitSettings {
                n_bins: *bins,
                ..Default::default()
            };
            let f = fit_execution_profile(&pts, &settings)?;
            save_report(out, "profile", &CurveReport {
                family: "profile".into(),
                curve: f.curve,
                fit: Some(f.fit),
                theory_scale: None,
                note: None,
                settings: serde_json::json!({ "settings": settings, "min_children": min_children }),
            })?;
        }
        AnalyzeCommand::Decay { unit, bins, z_max } => {
            let mut pts = Vec::new();
            for (day, a, s) in load_units(unit)? {
                for m in build_metaorders(&day, &a, &s)?.metaorders {
                    for x in post_execution_samples(&m, &day, *z_max)? {
                        if x.scaled_impact.is_finite() {
                            pts.push((x.z, x.scaled_impact));
                        }
                    }
                }
            }
            let settings = DecaySettings {
                n_bins: *bins,
                z_max: *z_max,
                ..Default::default()
            };
            let f = fit_decay(&pts, &settings)?;
            save_report(out, "decay", &CurveReport {
                family: "decay".into(),
                curve: f.curve,
                fit: Some(f.fit),
                theory_scale: None,
                note: None,
                settings: serde_json::to_value(&settings)?,
            })?;
        }
    }
    Ok(())
}

fn lmf(cmd: &LmfCommand, out: &Path) -> Result<()> {
    match cmd {
        LmfCommand::Acf { trades, flags } => {
            let settings = lmf_settings(flags);
            let mut by_stock: BTreeMap<String, Vec<_>> = BTreeMap::new();
            for ((t, _), day) in trade_days(&trades.trades)? {
                by_stock.entry(t).or_default().extend(day.iter().map(|x| x.sign));
            }
            for (t, signs) in by_stock {
                let mut r = StockLmf::new(&t, settings.variant);
                let est = infer_gamma(&mut r, &signs, &settings);
                if let Some(a) = est {
                    let mut w = create(&out.join(format!("acf_{t}.csv")))?;
                    a.write_csv(&mut w)?;
                    w.flush()?;
                }
                write_json(&out.join(format!("{t}.json")), &r)?;
            }
        }
        LmfCommand::Alpha {
            lengths,
            trades,
            assign_dir,
            flags,
        } => {
            if let Some(p) = lengths {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                let l = text
                    .split_whitespace()
                    .map(str::parse::<usize>)
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .with_context(|| format!("parsing lengths in {}", p.display()))?;
                write_json(&out.join("alpha.json"), &fit_alpha(&l)?)?;
                return Ok(());
            }
            let Some(dir) = assign_dir else {
                bail!(Error::Parameter("lmf alpha needs --lengths or --trades with --assign-dir".into()));
            };
            let settings = lmf_settings(flags);
            let mut per_stock: BTreeMap<String, (Vec<_>, BTreeMap<(NaiveDate, u32), Vec<_>>)> =
                BTreeMap::new();
            for ((t, date), day) in trade_days(trades)? {
                let path = dir.join(format!("assign_{}.csv", unit_stem(&t, date)));
                let ids: BTreeMap<u64, u32> =
                    metaorder_core::assignment::read_assignment(open(&path)?)?.into_iter().collect();
                let entry = per_stock.entry(t).or_default();
                for x in &day {
                    let id = *ids.get(&x.seq_no).ok_or_else(|| {
                        Error::Contract(format!("trade {} missing from {}", x.seq_no, path.display()))
                    })?;
                    entry.0.push(x.sign);
                    entry.1.entry((date, id)).or_default().push(x.sign);
                }
            }
            for (t, (market, seqs)) in per_stock {
                let (r, _) = infer_stock(&t, &market, &seqs, &settings);
                write_json(&out.join(format!("{t}.json")), &r)?;
            }
        }
        LmfCommand::Compare { reports, bins } => {
            let mut alpha = BTreeMap::new();
            let mut gamma = BTreeMap::new();
            for p in reports {
                let r: StockLmf = serde_json::from_reader(open(p)?)
                    .with_context(|| format!("reading {}", p.display()))?;
                if let Some(a) = r.alpha_lmf {
                    alpha.insert(r.stock.clone(), a);
                }
                if let Some(g) = r.gamma {
                    gamma.insert(r.stock.clone(), g);
                }
            }
            let cmp = lmf_compare(&alpha, &gamma, *bins);
            let mut w = create(&out.join("lmf_compare.csv"))?;
            cmp.write_table(&mut w)?;
            w.flush()?;
            let mut w = create(&out.join("lmf_scatter.csv"))?;
            cmp.write_plot(&mut w)?;
            w.flush()?;
            write_json(&out.join("lmf_compare.json"), &cmp)?;
        }
    }
    Ok(())
}

fn simulate(cfg: &SimConfig, settings: &LmfSettings, out: &Path) -> Result<()> {
    let (sim, report, est) = simulate_and_infer("sim", cfg, settings)?;
    write_json(&out.join("config.json"), cfg)?;
    let mut w = create(&out.join("signs.csv"))?;
    sim.write_signs(&mut w)?;
    w.flush()?;
    let mut w = create(&out.join("metaorders.csv"))?;
    sim.write_metaorders(&mut w)?;
    w.flush()?;
    if let Some(a) = est {
        let mut w = create(&out.join("acf.csv"))?;
        a.write_csv(&mut w)?;
        w.flush()?;
    }
    write_json(&out.join("report.json"), &report)?;
    if let Some(e) = &report.check_error {
        bail!(Error::OracleIntegrity(e.clone()));
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<u8> {
    let Some(path) = &cli.config else {
        bail!(Error::Config("run needs --config".into()));
    };
    let (mut cfg, base) = PipelineConfig::load(path)?;
    if let Some(o) = &cli.out {
        // --out is taken relative to the working directory, not the config
        cfg.output_dir = std::env::current_dir()?.join(o);
    }
    if let Some(w) = cli.workers {
        cfg.workers = Some(w);
    }
    if let Some(s) = cli.seed {
        for sc in &mut cfg.scenarios {
            sc.seed = s;
        }
        for r in &mut cfg.simulator {
            r.config.seed = s;
        }
    }
    let outcome = run_pipeline(&cfg, &base)?;
    for f in &outcome.manifest.failures {
        tracing::error!(
            stage = %f.stage,
            scenario = f.scenario.as_deref().unwrap_or("-"),
            ticker = f.ticker.as_deref().unwrap_or("-"),
            date = f.date.as_deref().unwrap_or("-"),
            "{}",
            f.error
        );
    }
    println!("{}", outcome.run_dir.display());
    Ok(outcome.exit_code() as u8)
}

/// Write the synthetic corpus under `<out>/data` and a two-scenario
/// configuration next to it.
fn synth(trades_per_day: usize, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cc = CorpusConfig {
        trades_per_day,
        ..Default::default()
    };
    if let Some(s) = seed {
        cc.seed = s;
    }
    let data = out.join("data");
    let files = write_corpus(&cc, &data)?;
    let mut cfg = PipelineConfig::from_json(r#"{"output_dir": "runs"}"#)?;
    for t in &cc.tickers {
        cfg.data.insert(t.ticker.clone(), format!("data/{}_*.csv", t.ticker));
    }
    cfg.scenarios = vec![
        Scenario {
            label: "n5-homogeneous".into(),
            n_traders: 5,
            participation: Participation::Homogeneous,
            seed: 1,
        },
        Scenario {
            label: "n10-power-law".into(),
            n_traders: 10,
            participation: Participation::power_law(2.0),
            seed: 2,
        },
    ];
    write_json(&out.join("config.json"), &cfg)?;
    tracing::info!(files = files.len(), "wrote corpus under {}", data.display());
    Ok(())
}
