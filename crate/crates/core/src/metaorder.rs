//! Synthetic metaorder construction.
//!
//! For one (ticker, day), trades are grouped by their assigned trader and each
//! trader's chronological stream is cut at every sign change. Runs with at
//! least two child orders become [`Metaorder`]s; single-trade runs are
//! dropped after their volume has been accounted for.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::assignment::Assignment;
use crate::error::{Error, Result};
use crate::market_data::{DailyStats, Sign, TradeEvent, DATE_FORMAT, TIMESTAMP_FORMAT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChildOrder {
    /// 1-based position inside the metaorder.
    pub index: usize,
    /// Position of the trade in the day's trade sequence.
    pub trade_index: usize,
    pub timestamp: NaiveDateTime,
    pub volume: f64,
    pub price: f64,
    pub mid_before: f64,
    pub mid_after: f64,
    /// Cumulative executed fraction of the metaorder volume.
    pub phi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metaorder {
    pub id: String,
    pub ticker: String,
    pub date: NaiveDate,
    pub trader_id: u32,
    pub sign: Sign,
    pub start_time: NaiveDateTime,
    pub end_time: NaiveDateTime,
    /// Execution duration in minutes.
    pub duration_min: f64,
    pub n_children: usize,
    pub total_volume: f64,
    pub m_start: f64,
    pub m_end: f64,
    pub children: Vec<ChildOrder>,
    pub impact_simple: f64,
    /// `ε·(ln VWAP − ln m_0)`; schema filler, not used by any analysis.
    pub impact_shortfall: f64,
    /// Mean per-child `ε·(ln m_after − ln m_before)`; schema filler only.
    pub impact_avg_per_trade: f64,
    pub daily_volume: f64,
    pub intraday_vol: f64,
    pub avg_volume_20: f64,
    pub avg_vol_20: f64,
}

/// One maximal same-sign run of a single trader.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignRun {
    pub sign: Sign,
    pub length: usize,
    pub volume: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DayMetaorders {
    pub metaorders: Vec<Metaorder>,
    pub filtered_runs: usize,
    pub filtered_volume: f64,
    /// Every run per trader, single-trade runs included, in time order.
    pub trader_runs: BTreeMap<u32, Vec<SignRun>>,
}

/// `ε·(ln m_end − ln m_start)`.
pub fn metaorder_impact(sign: Sign, m_start: f64, m_end: f64) -> Result<f64> {
    if !(m_start > 0.0 && m_end > 0.0) {
        return Err(Error::Data(format!(
            "impact needs positive mids, got {m_start} and {m_end}"
        )));
    }
    Ok(sign.as_f64() * (m_end.ln() - m_start.ln()))
}

/// `(φ_i, I_i)` for every child, with `I_i` anchored at the pre-metaorder mid.
pub fn child_impact_profile(m: &Metaorder) -> Result<Vec<(f64, f64)>> {
    m.children
        .iter()
        .map(|c| Ok((c.phi, metaorder_impact(m.sign, m.m_start, c.mid_after)?)))
        .collect()
}

fn minutes_between(start: NaiveDateTime, end: NaiveDateTime) -> f64 {
    let d = end - start;
    match d.num_microseconds() {
        Some(us) => us as f64 / 60e6,
        None => d.num_milliseconds() as f64 / 60e3,
    }
}

fn assemble(
    id: String,
    trader_id: u32,
    run: &[usize],
    trades: &[TradeEvent],
    daily: &DailyStats,
) -> Result<Metaorder> {
    let first = &trades[run[0]];
    let last = &trades[*run.last().expect("non-empty run")];
    let sign = first.sign;
    let eps = sign.as_f64();
    let total_volume: f64 = run.iter().map(|&i| trades[i].volume).sum();
    let mut cum = 0.0;
    let mut notional = 0.0;
    let mut per_trade = 0.0;
    let mut children = Vec::with_capacity(run.len());
    for (k, &i) in run.iter().enumerate() {
        let t = &trades[i];
        cum += t.volume;
        notional += t.price * t.volume;
        per_trade += eps * (t.mid_after.ln() - t.mid_before.ln());
        children.push(ChildOrder {
            index: k + 1,
            trade_index: i,
            timestamp: t.timestamp,
            volume: t.volume,
            price: t.price,
            mid_before: t.mid_before,
            mid_after: t.mid_after,
            phi: cum / total_volume,
        });
    }
    let m_start = first.mid_before;
    let m_end = last.mid_after;
    let vwap = notional / total_volume;
    Ok(Metaorder {
        id,
        ticker: first.ticker.clone(),
        date: first.date,
        trader_id,
        sign,
        start_time: first.timestamp,
        end_time: last.timestamp,
        duration_min: minutes_between(first.timestamp, last.timestamp),
        n_children: run.len(),
        total_volume,
        m_start,
        m_end,
        children,
        impact_simple: metaorder_impact(sign, m_start, m_end)?,
        impact_shortfall: metaorder_impact(sign, m_start, vwap)?,
        impact_avg_per_trade: per_trade / run.len() as f64,
        daily_volume: daily.daily_volume,
        intraday_vol: daily.intraday_vol,
        avg_volume_20: daily.avg_volume_20,
        avg_vol_20: daily.avg_vol_20,
    })
}

/// Cut each trader's trades into maximal same-sign runs and build metaorders
/// from runs of length two or more.
///
/// Output is ordered by trader id, then start time.
pub fn build_metaorders(
    trades: &[TradeEvent],
    assignment: &Assignment,
    daily: &DailyStats,
) -> Result<DayMetaorders> {
    if trades.len() != assignment.len() {
        return Err(Error::Contract(format!(
            "assignment has {} entries for {} trades",
            assignment.len(),
            trades.len()
        )));
    }
    if let Some(t) = trades
        .iter()
        .find(|t| t.ticker != daily.ticker || t.date != daily.date)
    {
        return Err(Error::Contract(format!(
            "trade for ({}, {}) in a unit for ({}, {})",
            t.ticker, t.date, daily.ticker, daily.date
        )));
    }

    let mut by_trader: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &id) in assignment.trader_ids.iter().enumerate() {
        by_trader.entry(id).or_default().push(i);
    }

    let mut out = DayMetaorders::default();
    for (&trader, indices) in &by_trader {
        let mut ordinal = 0usize;
        let runs = out.trader_runs.entry(trader).or_default();
        for run in indices.chunk_by(|&a, &b| trades[a].sign == trades[b].sign) {
            let volume: f64 = run.iter().map(|&i| trades[i].volume).sum();
            runs.push(SignRun {
                sign: trades[run[0]].sign,
                length: run.len(),
                volume,
            });
            if run.len() < 2 {
                out.filtered_runs += 1;
                out.filtered_volume += volume;
                continue;
            }
            ordinal += 1;
            let id = format!(
                "{}-{}-T{:03}-{:04}",
                daily.ticker,
                daily.date.format(DATE_FORMAT),
                trader,
                ordinal
            );
            out.metaorders.push(assemble(id, trader, run, trades, daily)?);
        }
    }
    Ok(out)
}

/// Flat row of the metaorder table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaorderRecord {
    #[serde(rename = "RIC")]
    pub ticker: String,
    #[serde(rename = "Date")]
    pub date: String,
    #[serde(rename = "Start time")]
    pub start_time: String,
    #[serde(rename = "End time")]
    pub end_time: String,
    #[serde(rename = "daily volume")]
    pub daily_volume: f64,
    #[serde(rename = "intraday volatility")]
    pub intraday_vol: f64,
    #[serde(rename = "number child orders")]
    pub n_children: usize,
    #[serde(rename = "volume traded")]
    pub total_volume: f64,
    #[serde(rename = "trade sign")]
    pub sign: i32,
    #[serde(rename = "impact(shortfall)")]
    pub impact_shortfall: f64,
    #[serde(rename = "impact(ave per trade)")]
    pub impact_avg_per_trade: f64,
    #[serde(rename = "impact(simple)")]
    pub impact_simple: f64,
    #[serde(rename = "20 AD volume")]
    pub avg_volume_20: f64,
    #[serde(rename = "20 AD volatility")]
    pub avg_vol_20: f64,
    pub metaorder_id: String,
    pub trader_id: u32,
    pub duration_min: f64,
}

impl From<&Metaorder> for MetaorderRecord {
    fn from(m: &Metaorder) -> Self {
        MetaorderRecord {
            ticker: m.ticker.clone(),
            date: m.date.format(DATE_FORMAT).to_string(),
            start_time: m.start_time.format(TIMESTAMP_FORMAT).to_string(),
            end_time: m.end_time.format(TIMESTAMP_FORMAT).to_string(),
            daily_volume: m.daily_volume,
            intraday_vol: m.intraday_vol,
            n_children: m.n_children,
            total_volume: m.total_volume,
            sign: m.sign.value(),
            impact_shortfall: m.impact_shortfall,
            impact_avg_per_trade: m.impact_avg_per_trade,
            impact_simple: m.impact_simple,
            avg_volume_20: m.avg_volume_20,
            avg_vol_20: m.avg_vol_20,
            metaorder_id: m.id.clone(),
            trader_id: m.trader_id,
            duration_min: m.duration_min,
        }
    }
}

/// Child-level row: `(metaorder_id, i, φ, q_i, m_{i+1}, I_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChildRecord {
    pub metaorder_id: String,
    pub i: usize,
    pub phi: f64,
    pub volume: f64,
    pub mid_after: f64,
    pub impact: f64,
}

pub fn child_records(m: &Metaorder) -> Result<Vec<ChildRecord>> {
    Ok(child_impact_profile(m)?
        .into_iter()
        .zip(&m.children)
        .map(|((phi, impact), c)| ChildRecord {
            metaorder_id: m.id.clone(),
            i: c.index,
            phi,
            volume: c.volume,
            mid_after: c.mid_after,
            impact,
        })
        .collect())
}

pub fn write_records<W: Write, T: Serialize>(sink: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv sink>", e))?;
    Ok(())
}

pub fn read_records<R: Read, T: for<'de> Deserialize<'de>>(source: R) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_reader(source);
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assignment::Assignment;

    fn day() -> NaiveDate {
        NaiveDate::from_ymd_opt(2023, 1, 3).unwrap()
    }

    fn trade(sec: u32, sign: Sign, volume: f64, mid_before: f64, mid_after: f64) -> TradeEvent {
        TradeEvent {
            mic: "XJSE".into(),
            ticker: "TST".into(),
            listing_id: 1,
            date: day(),
            timestamp: day().and_hms_opt(9, 0, 0).unwrap() + chrono::Duration::seconds(sec.into()),
            seq_no: sec.into(),
            sign,
            price: mid_before,
            volume,
            mid_before,
            mid_after,
            mid_after_delayed: None,
        }
    }

    fn stats(trades: &[TradeEvent]) -> DailyStats {
        crate::market_data::compute_daily_stats(trades).unwrap()
    }

    #[test]
    fn run_decomposition_filters_singletons() {
        use Sign::*;
        let trades: Vec<_> = [Buy, Buy, Sell, Sell, Buy]
            .iter()
            .enumerate()
            .map(|(i, &s)| trade(i as u32, s, 10.0 + i as f64, 100.0, 100.0))
            .collect();
        let a = Assignment {
            trader_ids: vec![1; 5],
        };
        let out = build_metaorders(&trades, &a, &stats(&trades)).unwrap();
        let lens: Vec<usize> = out.trader_runs[&1].iter().map(|r| r.length).collect();
        assert_eq!(lens, vec![2, 2, 1]);
        assert_eq!(out.metaorders.len(), 2);
        assert_eq!(out.filtered_runs, 1);
        assert_eq!(out.filtered_volume, 14.0);
        assert_eq!(out.metaorders[0].sign, Buy);
        assert_eq!(out.metaorders[1].sign, Sell);
        assert_eq!(out.metaorders[1].total_volume, 25.0);
    }

    #[test]
    fn interleaved_traders_are_independent() {
        let trades = vec![
            trade(1, Sign::Buy, 5.0, 100.0, 100.5),
            trade(2, Sign::Sell, 5.0, 100.5, 100.0),
            trade(3, Sign::Buy, 5.0, 100.0, 101.0),
        ];
        let a = Assignment {
            trader_ids: vec![1, 2, 1],
        };
        let out = build_metaorders(&trades, &a, &stats(&trades)).unwrap();
        assert_eq!(out.metaorders.len(), 1);
        let m = &out.metaorders[0];
        assert_eq!(m.trader_id, 1);
        assert_eq!(m.n_children, 2);
        assert_eq!(m.m_start, 100.0);
        assert_eq!(m.m_end, 101.0);
        assert!((m.duration_min - 2.0 / 60.0).abs() < 1e-12);
        assert!(out.trader_runs[&2].iter().all(|r| r.length == 1));
    }

    #[test]
    fn impact_sign_convention() {
        assert_eq!(metaorder_impact(Sign::Buy, 100.0, 100.0).unwrap(), 0.0);
        let i = metaorder_impact(Sign::Sell, 100.0, 99.0).unwrap();
        assert!((i - (100f64 / 99.0).ln()).abs() < 1e-15);
        assert!(i > 0.0);
        assert!(metaorder_impact(Sign::Buy, 0.0, 1.0).is_err());
    }

    #[test]
    fn equal_children_split_phi() {
        let trades = vec![
            trade(0, Sign::Buy, 50.0, 100.0, 100.0),
            trade(1, Sign::Buy, 50.0, 100.0, 100.0),
        ];
        let a = Assignment {
            trader_ids: vec![1, 1],
        };
        let out = build_metaorders(&trades, &a, &stats(&trades)).unwrap();
        let prof = child_impact_profile(&out.metaorders[0]).unwrap();
        assert_eq!(prof, vec![(0.5, 0.0), (1.0, 0.0)]);
    }

    #[test]
    fn auxiliary_impacts() {
        let mut trades = vec![
            trade(0, Sign::Buy, 1.0, 100.0, 101.0),
            trade(60, Sign::Buy, 3.0, 101.0, 102.0),
        ];
        trades[0].price = 101.0;
        trades[1].price = 103.0;
        let a = Assignment {
            trader_ids: vec![1, 1],
        };
        let m = &build_metaorders(&trades, &a, &stats(&trades)).unwrap().metaorders[0];
        let vwap: f64 = (101.0 + 3.0 * 103.0) / 4.0;
        assert!((m.impact_shortfall - (vwap.ln() - 100f64.ln())).abs() < 1e-15);
        let avg = ((101f64 / 100.0).ln() + (102f64 / 101.0).ln()) / 2.0;
        assert!((m.impact_avg_per_trade - avg).abs() < 1e-15);
        assert!((m.duration_min - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mismatched_assignment_is_a_contract_error() {
        let trades = vec![trade(0, Sign::Buy, 1.0, 100.0, 100.0)];
        let a = Assignment {
            trader_ids: vec![1, 1],
        };
        assert!(matches!(
            build_metaorders(&trades, &a, &stats(&trades)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn zero_duration_is_kept() {
        let mut trades = vec![
            trade(0, Sign::Sell, 1.0, 100.0, 100.0),
            trade(0, Sign::Sell, 1.0, 100.0, 99.0),
        ];
        trades[1].seq_no = 1;
        let a = Assignment {
            trader_ids: vec![3, 3],
        };
        let out = build_metaorders(&trades, &a, &stats(&trades)).unwrap();
        assert_eq!(out.metaorders[0].duration_min, 0.0);
    }

    #[test]
    fn table_rows_read_back() {
        let trades = vec![
            trade(0, Sign::Buy, 2.0, 100.0, 100.5),
            trade(5, Sign::Buy, 3.0, 100.5, 101.0),
        ];
        let a = Assignment {
            trader_ids: vec![1, 1],
        };
        let m = &build_metaorders(&trades, &a, &stats(&trades)).unwrap().metaorders[0];
        let rows = vec![MetaorderRecord::from(m)];
        let mut buf = Vec::new();
        write_records(&mut buf, &rows).unwrap();
        let header = std::str::from_utf8(&buf).unwrap().lines().next().unwrap().to_string();
        assert!(header.starts_with(
            "RIC,Date,Start time,End time,daily volume,intraday volatility,number child orders,volume traded,trade sign,impact(shortfall),impact(ave per trade),impact(simple),20 AD volume,20 AD volatility"
        ));
        let back: Vec<MetaorderRecord> = read_records(buf.as_slice()).unwrap();
        assert_eq!(back, rows);
    }
}
