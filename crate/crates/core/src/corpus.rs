//! Deterministic synthetic trade-and-quote days for tests and demos.
//!
//! Mid-prices follow a tick-sized random walk that is pushed in the
//! direction of each aggressive trade; trade signs are persistent so that
//! the sign stream has positive autocorrelation.

use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::{write_trades, Sign, TradeEvent};
use crate::rng::day_stream;

const CORPUS_STREAM: &str = "corpus";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusTicker {
    pub ticker: String,
    pub start_mid: f64,
    pub listing_id: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub tickers: Vec<CorpusTicker>,
    pub dates: Vec<NaiveDate>,
    pub trades_per_day: usize,
    pub tick: f64,
    /// Probability that a trade repeats the previous sign.
    pub persistence: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        let d = |day| NaiveDate::from_ymd_opt(2023, 1, day).unwrap();
        CorpusConfig {
            tickers: vec![
                CorpusTicker {
                    ticker: "SYNA".into(),
                    start_mid: 1478.0,
                    listing_id: 100001,
                },
                CorpusTicker {
                    ticker: "SYNB".into(),
                    start_mid: 312.5,
                    listing_id: 100002,
                },
            ],
            dates: vec![d(3), d(4), d(5)],
            trades_per_day: 2000,
            tick: 0.5,
            persistence: 0.8,
            seed: 20230103,
        }
    }
}

/// One synthetic day. Every trade's `mid_before` equals the previous
/// trade's delayed mid, so the mid stream is continuous.
pub fn generate_day(
    cfg: &CorpusConfig,
    ticker: &CorpusTicker,
    date: NaiveDate,
    start_mid: f64,
) -> Vec<TradeEvent> {
    let mut rng = day_stream(cfg.seed, CORPUS_STREAM, &ticker.ticker, date);
    let mut ts = date.and_hms_opt(9, 0, 0).unwrap();
    let mut mid = start_mid;
    let mut sign = Sign::Buy;
    let mut seq = 1000u64;
    let mut out: Vec<TradeEvent> = Vec::with_capacity(cfg.trades_per_day);
    for _ in 0..cfg.trades_per_day {
        let gap_us = (-(1.0 - rng.random::<f64>()).ln() * 8e6) as i64 + 1;
        ts += Duration::microseconds(gap_us);
        seq += rng.random_range(1..50);
        if rng.random::<f64>() >= cfg.persistence {
            sign = sign.flip();
        }
        let mid_before = mid;
        let u: f64 = rng.random();
        let step = if u < 0.3 {
            sign.as_f64() * cfg.tick
        } else if u < 0.35 {
            -sign.as_f64() * cfg.tick
        } else {
            0.0
        };
        let mid_after = (mid_before + step).max(cfg.tick);
        // quotes may move between trades
        let drift = match rng.random_range(0..10) {
            0 => cfg.tick,
            1 => -cfg.tick,
            _ => 0.0,
        };
        mid = (mid_after + drift).max(cfg.tick);
        let volume = (10f64.powf(rng.random_range(0.0..4.0))).round().max(1.0);
        if let Some(prev) = out.last_mut() {
            prev.mid_after_delayed = Some(mid_before);
        }
        out.push(TradeEvent {
            mic: "XSYN".into(),
            ticker: ticker.ticker.clone(),
            listing_id: ticker.listing_id,
            date,
            timestamp: ts,
            seq_no: seq,
            sign,
            price: mid_before + sign.as_f64() * cfg.tick * 0.5,
            volume,
            mid_before,
            mid_after,
            mid_after_delayed: None,
        });
    }
    if let Some(last) = out.last_mut() {
        last.mid_after_delayed = Some(mid);
    }
    out
}

/// Every (ticker, date) of the config, with each ticker's mid carried
/// across days.
pub fn generate(cfg: &CorpusConfig) -> Vec<Vec<TradeEvent>> {
    let mut days = Vec::new();
    for t in &cfg.tickers {
        let mut mid = t.start_mid;
        for &d in &cfg.dates {
            let day = generate_day(cfg, t, d, mid);
            if let Some(last) = day.last() {
                mid = last.mid_after_delayed.unwrap_or(last.mid_after);
            }
            days.push(day);
        }
    }
    days
}

/// Write one `<ticker>_<date>.csv` per day under `dir`.
pub fn write_corpus(cfg: &CorpusConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for day in generate(cfg) {
        let Some(first) = day.first() else { continue };
        let path = dir.join(format!("{}_{}.csv", first.ticker, first.date));
        let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_trades(std::io::BufWriter::new(f), &day)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::{parse_trades, Schema};

    #[test]
    fn deterministic_and_valid() {
        let cfg = CorpusConfig {
            trades_per_day: 300,
            ..Default::default()
        };
        let a = generate(&cfg);
        assert_eq!(a, generate(&cfg));
        assert_eq!(a.len(), 6);
        for day in &a {
            assert!(day.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
            assert!(day.windows(2).all(|w| w[0].mid_after_delayed == Some(w[1].mid_before)));
            assert!(day.iter().all(|t| t.volume >= 1.0 && t.mid_before > 0.0));
        }
    }

    #[test]
    fn round_trips_through_csv() {
        let cfg = CorpusConfig {
            trades_per_day: 100,
            ..Default::default()
        };
        let day = &generate(&cfg)[0];
        let mut buf = Vec::new();
        write_trades(&mut buf, day).unwrap();
        let parsed = parse_trades(buf.as_slice(), &Schema::default(), b',').unwrap();
        assert_eq!(parsed.report.rejected, 0);
        assert_eq!(&parsed.trades, day);
    }
}
