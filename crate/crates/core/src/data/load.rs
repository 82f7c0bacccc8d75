use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, NaiveDateTime};

use super::UsageEvent;
use crate::config::KeyValues;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeFormat {
    EpochSeconds,
    EpochMillis,
    /// Extended (`2016-04-21T06:18:30`, optional offset) or basic
    /// (`20160421061830`) ISO-8601. Offsets are converted to UTC; values
    /// without an offset are taken as UTC.
    Iso8601,
}

impl FromStr for TimeFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epoch_s" => Ok(TimeFormat::EpochSeconds),
            "epoch_ms" => Ok(TimeFormat::EpochMillis),
            "iso8601" => Ok(TimeFormat::Iso8601),
            other => Err(Error::Config(format!("unknown time_format {other:?} (expected epoch_s, epoch_ms or iso8601)"))),
        }
    }
}

/// Column mapping for a header-bearing CSV log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormatSpec {
    pub user_col: String,
    pub time_col: String,
    pub app_col: String,
    pub duration_col: Option<String>,
    pub time_format: TimeFormat,
    pub delimiter: u8,
}

impl FormatSpec {
    /// Schema written by the synthetic generator.
    pub fn synth() -> Self {
        Self {
            user_col: "user_id".into(),
            time_col: "timestamp".into(),
            app_col: "app_id".into(),
            duration_col: Some("duration".into()),
            time_format: TimeFormat::EpochSeconds,
            delimiter: b',',
        }
    }

    /// Tsinghua App Usage style: user, compact timestamp, app id; no duration.
    pub fn tsinghua() -> Self {
        Self {
            user_col: "user_id".into(),
            time_col: "timestamp".into(),
            app_col: "app_id".into(),
            duration_col: None,
            time_format: TimeFormat::Iso8601,
            delimiter: b',',
        }
    }

    /// LSapp style: user, `YYYY-MM-DD HH:MM:SS` timestamp, app name.
    pub fn lsapp() -> Self {
        Self {
            user_col: "user_id".into(),
            time_col: "timestamp".into(),
            app_col: "app_name".into(),
            duration_col: None,
            time_format: TimeFormat::Iso8601,
            delimiter: b',',
        }
    }

    pub fn preset(tag: &str) -> Result<Self> {
        match tag {
            "synth" => Ok(Self::synth()),
            "tsinghua" => Ok(Self::tsinghua()),
            "lsapp" => Ok(Self::lsapp()),
            other => Err(Error::Config(format!("unknown format tag {other:?} (expected tsinghua, lsapp or synth)"))),
        }
    }

    /// Override a preset with keys from a mapping file.
    pub fn with_overrides(mut self, kv: &KeyValues) -> Result<Self> {
        if let Some(v) = kv.get("user_col") {
            self.user_col = v.into();
        }
        if let Some(v) = kv.get("time_col") {
            self.time_col = v.into();
        }
        if let Some(v) = kv.get("app_col") {
            self.app_col = v.into();
        }
        if let Some(v) = kv.get("duration_col") {
            self.duration_col = if v.is_empty() { None } else { Some(v.into()) };
        }
        if let Some(v) = kv.get("time_format") {
            self.time_format = v.parse()?;
        }
        if let Some(v) = kv.get("delimiter") {
            self.delimiter = match v {
                "tab" | "\\t" => b'\t',
                s if s.len() == 1 => s.as_bytes()[0],
                other => return Err(Error::Config(format!("delimiter must be one byte, got {other:?}"))),
            };
        }
        Ok(self)
    }
}

pub fn parse_timestamp(raw: &str, format: TimeFormat) -> std::result::Result<i64, String> {
    let raw = raw.trim();
    match format {
        TimeFormat::EpochSeconds => raw.parse::<i64>().map_err(|_| format!("timestamp {raw:?} is not an integer")),
        TimeFormat::EpochMillis => raw
            .parse::<i64>()
            .map(|ms| ms.div_euclid(1000))
            .map_err(|_| format!("timestamp {raw:?} is not an integer")),
        TimeFormat::Iso8601 => {
            if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
                return Ok(dt.timestamp());
            }
            for f in ["%Y-%m-%d %H:%M:%S%:z", "%Y-%m-%d %H:%M:%S%.f%:z"] {
                if let Ok(dt) = DateTime::parse_from_str(raw, f) {
                    return Ok(dt.timestamp());
                }
            }
            for f in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y%m%dT%H%M%S", "%Y%m%d%H%M%S"] {
                if let Ok(dt) = NaiveDateTime::parse_from_str(raw, f) {
                    return Ok(dt.and_utc().timestamp());
                }
            }
            Err(format!("timestamp {raw:?} is not ISO-8601"))
        }
    }
}

/// Parse events from any reader; `origin` is used in error messages. Lines
/// starting with `#` are skipped.
pub fn read_events<R: Read>(reader: R, spec: &FormatSpec, origin: &Path) -> Result<Vec<UsageEvent>> {
    let mut rdr =
        csv::ReaderBuilder::new().delimiter(spec.delimiter).trim(csv::Trim::All).comment(Some(b'#')).from_reader(reader);
    let parse_err = |line: u64, message: String| Error::Parse { path: origin.to_path_buf(), line, message };
    let headers = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(1, format!("missing column {name:?} in header {:?}", headers.iter().collect::<Vec<_>>())))
    };
    let (ui, ti, ai) = (col(&spec.user_col)?, col(&spec.time_col)?, col(&spec.app_col)?);
    let di = spec.duration_col.as_deref().map(col).transpose()?;

    let mut events = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize| rec.get(i).ok_or_else(|| parse_err(line, format!("missing field {i}")));
        let user_id = field(ui)?.to_string();
        let app_id = field(ai)?.to_string();
        if user_id.is_empty() || app_id.is_empty() {
            return Err(parse_err(line, "empty user or app id".into()));
        }
        let timestamp = parse_timestamp(field(ti)?, spec.time_format).map_err(|m| parse_err(line, m))?;
        if timestamp < 0 {
            return Err(parse_err(line, format!("negative timestamp {timestamp}")));
        }
        let duration = match di {
            Some(i) if !field(i)?.is_empty() => {
                let raw = field(i)?;
                let d: f64 = raw.parse().map_err(|_| parse_err(line, format!("duration {raw:?} is not a number")))?;
                if !(d.is_finite() && d >= 0.0) {
                    return Err(parse_err(line, format!("duration {d} must be finite and non-negative")));
                }
                Some(d)
            }
            _ => None,
        };
        events.push(UsageEvent { user_id, timestamp, app_id, duration });
    }
    events.sort_by(|a, b| a.user_id.cmp(&b.user_id).then(a.timestamp.cmp(&b.timestamp)));
    Ok(events)
}

/// Load a CSV log and return events sorted by `(user, timestamp)`.
pub fn load_events(path: &Path, spec: &FormatSpec) -> Result<Vec<UsageEvent>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_events(std::io::BufReader::new(file), spec, path)
}

/// Write events in the synthetic schema (`user_id,timestamp,app_id,duration`).
pub fn write_events_csv<W: Write>(writer: W, events: &[UsageEvent]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::Data(format!("csv write: {e}"));
    w.write_record(["user_id", "timestamp", "app_id", "duration"]).map_err(csv_err)?;
    for e in events {
        let d = e.duration.map(|d| format!("{d}")).unwrap_or_default();
        w.write_record([e.user_id.as_str(), &e.timestamp.to_string(), e.app_id.as_str(), &d]).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Data(format!("csv write: {e}")))?;
    Ok(())
}
