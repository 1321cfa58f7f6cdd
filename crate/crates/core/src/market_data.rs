//! Trade-and-quote ingestion and per-day liquidity statistics.
//!
//! Input files carry one executed trade per row together with the mid-price
//! just before and just after the trade. Rows that violate the basic
//! invariants (sign outside ±1, non-positive price/volume/mids, unparseable
//! timestamps) are dropped and tallied in a [`RejectionReport`].

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::{NaiveDate, NaiveDateTime, NaiveTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S%.6f";
pub const DATE_FORMAT: &str = "%Y-%m-%d";

/// Direction of the aggressive side of a trade.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sign {
    Buy,
    Sell,
}

impl Sign {
    pub fn value(self) -> i32 {
        match self {
            Sign::Buy => 1,
            Sign::Sell => -1,
        }
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.value())
    }

    pub fn from_value(v: i64) -> Option<Sign> {
        match v {
            1 => Some(Sign::Buy),
            -1 => Some(Sign::Sell),
            _ => None,
        }
    }

    pub fn flip(self) -> Sign {
        match self {
            Sign::Buy => Sign::Sell,
            Sign::Sell => Sign::Buy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeEvent {
    pub mic: String,
    pub ticker: String,
    pub listing_id: i64,
    pub date: NaiveDate,
    pub timestamp: NaiveDateTime,
    pub seq_no: u64,
    pub sign: Sign,
    pub price: f64,
    pub volume: f64,
    pub mid_before: f64,
    pub mid_after: f64,
    /// Mid-price just before the next trade. Carried through, never analysed.
    pub mid_after_delayed: Option<f64>,
}

/// Header names for each logical column of a trade file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schema {
    pub mic: String,
    pub ticker: String,
    pub listing_id: String,
    pub date: String,
    pub timestamp: String,
    pub seq_no: String,
    pub sign: String,
    pub price: String,
    pub volume: String,
    pub mid_before: String,
    pub mid_after: String,
    pub mid_after_delayed: String,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            mic: "MIC".into(),
            ticker: "Ticker".into(),
            listing_id: "ListingId".into(),
            date: "Date".into(),
            timestamp: "DateTime".into(),
            seq_no: "ExchangeSequenceNumber".into(),
            sign: "Trade Sign".into(),
            price: "Trade Price".into(),
            volume: "Volume".into(),
            mid_before: "Mid-price before".into(),
            mid_after: "Mid-price after(immediate)".into(),
            mid_after_delayed: "Mid-price after(delayed)".into(),
        }
    }
}

/// Tally of rows dropped during parsing, keyed by reason.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionReport {
    pub rows_read: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub reasons: BTreeMap<String, usize>,
}

impl RejectionReport {
    fn reject(&mut self, reason: &str) {
        self.rejected += 1;
        *self.reasons.entry(reason.to_string()).or_default() += 1;
    }

    pub fn merge(&mut self, other: &RejectionReport) {
        self.rows_read += other.rows_read;
        self.accepted += other.accepted;
        self.rejected += other.rejected;
        for (k, v) in &other.reasons {
            *self.reasons.entry(k.clone()).or_default() += v;
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParsedTrades {
    pub trades: Vec<TradeEvent>,
    pub report: RejectionReport,
}

struct ColumnIndex {
    mic: Option<usize>,
    ticker: usize,
    listing_id: Option<usize>,
    date: usize,
    timestamp: usize,
    seq_no: usize,
    sign: usize,
    price: usize,
    volume: usize,
    mid_before: usize,
    mid_after: usize,
    mid_after_delayed: Option<usize>,
}

impl ColumnIndex {
    fn resolve(headers: &csv::StringRecord, schema: &Schema) -> Result<Self> {
        let find = |name: &str| headers.iter().position(|h| h.trim() == name);
        let need = |name: &str| find(name).ok_or_else(|| Error::MissingColumn(name.to_string()));
        Ok(ColumnIndex {
            mic: find(&schema.mic),
            ticker: need(&schema.ticker)?,
            listing_id: find(&schema.listing_id),
            date: need(&schema.date)?,
            timestamp: need(&schema.timestamp)?,
            seq_no: need(&schema.seq_no)?,
            sign: need(&schema.sign)?,
            price: need(&schema.price)?,
            volume: need(&schema.volume)?,
            mid_before: need(&schema.mid_before)?,
            mid_after: need(&schema.mid_after)?,
            mid_after_delayed: find(&schema.mid_after_delayed),
        })
    }
}

fn parse_timestamp(raw: &str, date: NaiveDate) -> Option<NaiveDateTime> {
    let raw = raw.trim();
    for fmt in ["%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M:%S%.f"] {
        if let Ok(ts) = NaiveDateTime::parse_from_str(raw, fmt) {
            return Some(ts);
        }
    }
    NaiveTime::parse_from_str(raw, "%H:%M:%S%.f")
        .ok()
        .map(|t| date.and_time(t))
}

fn parse_positive(raw: &str) -> std::result::Result<f64, &'static str> {
    let v: f64 = raw.trim().parse().map_err(|_| "unparseable number")?;
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err("non-positive value")
    }
}

fn parse_row(
    rec: &csv::StringRecord,
    idx: &ColumnIndex,
) -> std::result::Result<TradeEvent, &'static str> {
    let field = |i: usize| rec.get(i).unwrap_or("").trim();
    let date =
        NaiveDate::parse_from_str(field(idx.date), DATE_FORMAT).map_err(|_| "unparseable date")?;
    let timestamp = parse_timestamp(field(idx.timestamp), date).ok_or("unparseable timestamp")?;
    let sign_raw: f64 = field(idx.sign).parse().map_err(|_| "invalid sign")?;
    let sign = if sign_raw == 1.0 {
        Sign::Buy
    } else if sign_raw == -1.0 {
        Sign::Sell
    } else {
        return Err("invalid sign");
    };
    let seq_no: u64 = field(idx.seq_no)
        .parse()
        .map_err(|_| "unparseable sequence number")?;
    let listing_id = match idx.listing_id {
        Some(i) if !field(i).is_empty() => field(i).parse().map_err(|_| "unparseable listing id")?,
        _ => 0,
    };
    let mid_after_delayed = match idx.mid_after_delayed {
        Some(i) if !field(i).is_empty() => Some(field(i).parse().map_err(|_| "unparseable number")?),
        _ => None,
    };
    Ok(TradeEvent {
        mic: idx.mic.map(|i| field(i).to_string()).unwrap_or_default(),
        ticker: field(idx.ticker).to_string(),
        listing_id,
        date,
        timestamp,
        seq_no,
        sign,
        price: parse_positive(field(idx.price))?,
        volume: parse_positive(field(idx.volume))?,
        mid_before: parse_positive(field(idx.mid_before))?,
        mid_after: parse_positive(field(idx.mid_after))?,
        mid_after_delayed,
    })
}

/// Parse a delimiter-separated trade file.
///
/// Accepted rows come back sorted by `(ticker, timestamp, seq_no)`.
pub fn parse_trades<R: Read>(source: R, schema: &Schema, delimiter: u8) -> Result<ParsedTrades> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = reader.headers()?.clone();
    if headers.iter().all(|h| h.trim().is_empty()) {
        return Ok(ParsedTrades::default());
    }
    let idx = ColumnIndex::resolve(&headers, schema)?;

    let mut out = ParsedTrades::default();
    for rec in reader.records() {
        let rec = rec?;
        if rec.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        out.report.rows_read += 1;
        match parse_row(&rec, &idx) {
            Ok(t) => out.trades.push(t),
            Err(reason) => out.report.reject(reason),
        }
    }
    out.report.accepted = out.trades.len();
    sort_trades(&mut out.trades);
    Ok(out)
}

pub fn sort_trades(trades: &mut [TradeEvent]) {
    trades.sort_by(|a, b| {
        (a.ticker.as_str(), a.timestamp, a.seq_no).cmp(&(b.ticker.as_str(), b.timestamp, b.seq_no))
    });
}

/// Serialise trades with the default header names.
pub fn write_trades<W: Write>(sink: W, trades: &[TradeEvent]) -> Result<()> {
    let s = Schema::default();
    let mut w = csv::Writer::from_writer(sink);
    w.write_record([
        &s.mic,
        &s.ticker,
        &s.listing_id,
        &s.date,
        &s.timestamp,
        &s.seq_no,
        &s.sign,
        &s.price,
        &s.volume,
        &s.mid_before,
        &s.mid_after,
        &s.mid_after_delayed,
    ])?;
    for t in trades {
        w.write_record([
            t.mic.clone(),
            t.ticker.clone(),
            t.listing_id.to_string(),
            t.date.format(DATE_FORMAT).to_string(),
            t.timestamp.format(TIMESTAMP_FORMAT).to_string(),
            t.seq_no.to_string(),
            t.sign.value().to_string(),
            t.price.to_string(),
            t.volume.to_string(),
            t.mid_before.to_string(),
            t.mid_after.to_string(),
            t.mid_after_delayed.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<trade sink>", e))?;
    Ok(())
}

/// Split a sorted trade stream into per-(ticker, date) units.
pub fn split_days(trades: Vec<TradeEvent>) -> BTreeMap<(String, NaiveDate), Vec<TradeEvent>> {
    let mut days: BTreeMap<(String, NaiveDate), Vec<TradeEvent>> = BTreeMap::new();
    for t in trades {
        days.entry((t.ticker.clone(), t.date)).or_default().push(t);
    }
    for v in days.values_mut() {
        sort_trades(v);
    }
    days
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyStats {
    pub ticker: String,
    pub date: NaiveDate,
    pub daily_volume: f64,
    pub intraday_vol: f64,
    /// `ln(m_max) - ln(m_min)`; emitted only.
    pub intraday_vol_alt: f64,
    pub avg_volume_20: f64,
    pub avg_vol_20: f64,
}

/// Volume and range-based volatility of one (ticker, day).
///
/// `m_open` is the first trade's `mid_before`; the extrema scan both the
/// before and after mid streams. Averages start out as the day's own values
/// until [`rolling_stats`] fills them.
pub fn compute_daily_stats(trades: &[TradeEvent]) -> Result<DailyStats> {
    let first = trades
        .first()
        .ok_or_else(|| Error::Data("no trades".into()))?;
    let m_open = first.mid_before;
    if !(m_open > 0.0) {
        return Err(Error::Data(format!(
            "non-positive opening mid {m_open} for {} {}",
            first.ticker, first.date
        )));
    }
    let mut volume = 0.0;
    let mut m_max = f64::NEG_INFINITY;
    let mut m_min = f64::INFINITY;
    for t in trades {
        volume += t.volume;
        for m in [t.mid_before, t.mid_after] {
            m_max = m_max.max(m);
            m_min = m_min.min(m);
        }
    }
    if !(m_min > 0.0) {
        return Err(Error::Data(format!("non-positive mid {m_min}")));
    }
    let intraday_vol = (m_max - m_min) / m_open;
    Ok(DailyStats {
        ticker: first.ticker.clone(),
        date: first.date,
        daily_volume: volume,
        intraday_vol,
        intraday_vol_alt: m_max.ln() - m_min.ln(),
        avg_volume_20: volume,
        avg_vol_20: intraday_vol,
    })
}

pub const ROLLING_WINDOW: usize = 20;

/// Trailing means of volume and volatility over up to `window` trading days
/// (current day included). Output is sorted by `(ticker, date)`; each ticker
/// is averaged independently.
pub fn rolling_stats(days: &[DailyStats], window: usize) -> Vec<DailyStats> {
    let window = window.max(1);
    let mut out: Vec<DailyStats> = days.to_vec();
    out.sort_by(|a, b| (a.ticker.as_str(), a.date).cmp(&(b.ticker.as_str(), b.date)));
    let mut start = 0;
    while start < out.len() {
        let mut end = start;
        while end < out.len() && out[end].ticker == out[start].ticker {
            end += 1;
        }
        let vols: Vec<f64> = out[start..end].iter().map(|d| d.daily_volume).collect();
        let sigmas: Vec<f64> = out[start..end].iter().map(|d| d.intraday_vol).collect();
        for i in 0..vols.len() {
            let lo = (i + 1).saturating_sub(window);
            let n = (i + 1 - lo) as f64;
            out[start + i].avg_volume_20 = vols[lo..=i].iter().sum::<f64>() / n;
            out[start + i].avg_vol_20 = sigmas[lo..=i].iter().sum::<f64>() / n;
        }
        start = end;
    }
    out
}

pub fn write_daily_stats<W: Write>(sink: W, days: &[DailyStats]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record([
        "ticker",
        "date",
        "daily_volume",
        "intraday_vol",
        "intraday_vol_alt",
        "avg_volume_20",
        "avg_vol_20",
    ])?;
    for d in days {
        w.write_record([
            d.ticker.clone(),
            d.date.format(DATE_FORMAT).to_string(),
            d.daily_volume.to_string(),
            d.intraday_vol.to_string(),
            d.intraday_vol_alt.to_string(),
            d.avg_volume_20.to_string(),
            d.avg_vol_20.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<daily stats sink>", e))?;
    Ok(())
}

pub fn read_daily_stats<R: Read>(source: R) -> Result<Vec<DailyStats>> {
    let mut r = csv::Reader::from_reader(source);
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}
