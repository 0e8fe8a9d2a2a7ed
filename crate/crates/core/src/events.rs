//! Raw event records and their CSV / JSON-lines ingestion.
//!
//! Both formats carry the same five fields in the same order:
//! `user_id,timestamp_iso8601,event_kind,duration_s,country`. Timestamps are
//! RFC 3339 and are normalised to UTC at second resolution. `duration_s` is
//! present exactly for `session_end` and `video_stop` events.

use std::cmp::Ordering;
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::str::FromStr;
use std::sync::Arc;

use chrono::{DateTime, SecondsFormat, Timelike, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const CSV_HEADER: [&str; 5] = ["user_id", "timestamp_iso8601", "event_kind", "duration_s", "country"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Login,
    SessionEnd,
    Click,
    VideoStart,
    VideoStop,
    TestPassed,
    ActionCardView,
    DrugListView,
}

impl EventKind {
    pub const ALL: [EventKind; 8] = [
        EventKind::Login,
        EventKind::SessionEnd,
        EventKind::Click,
        EventKind::VideoStart,
        EventKind::VideoStop,
        EventKind::TestPassed,
        EventKind::ActionCardView,
        EventKind::DrugListView,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Login => "login",
            EventKind::SessionEnd => "session_end",
            EventKind::Click => "click",
            EventKind::VideoStart => "video_start",
            EventKind::VideoStop => "video_stop",
            EventKind::TestPassed => "test_passed",
            EventKind::ActionCardView => "action_card_view",
            EventKind::DrugListView => "drug_list_view",
        }
    }

    /// Whether records of this kind must carry `duration_s`.
    pub fn carries_duration(self) -> bool {
        matches!(self, EventKind::SessionEnd | EventKind::VideoStop)
    }

    /// Click-type events: everything a user does inside a session.
    pub fn is_action(self) -> bool {
        !matches!(self, EventKind::Login | EventKind::SessionEnd)
    }

    /// Clicks on videos, action cards and testing features.
    pub fn is_elearning(self) -> bool {
        matches!(
            self,
            EventKind::VideoStart | EventKind::VideoStop | EventKind::TestPassed | EventKind::ActionCardView
        )
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EventKind::ALL
            .iter()
            .copied()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown event kind `{s}`")))
    }
}

/// One timestamped user action.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub user_id: Arc<str>,
    pub timestamp: DateTime<Utc>,
    pub kind: EventKind,
    pub duration_s: Option<f64>,
    pub country: Arc<str>,
}

impl EventRecord {
    pub fn new(
        user_id: &str,
        timestamp: DateTime<Utc>,
        kind: EventKind,
        duration_s: Option<f64>,
        country: &str,
    ) -> Self {
        Self {
            user_id: Arc::from(user_id),
            timestamp,
            kind,
            duration_s,
            country: Arc::from(country),
        }
    }

    /// Checks the per-record invariants: duration presence matches the kind,
    /// durations are finite and non-negative, identifiers are non-empty.
    pub fn validate(&self) -> Result<()> {
        if self.user_id.is_empty() {
            return Err(invalid("empty user_id"));
        }
        if self.country.is_empty() {
            return Err(invalid("empty country"));
        }
        match (self.kind.carries_duration(), self.duration_s) {
            (true, None) => Err(invalid(format!("{} requires duration_s", self.kind))),
            (false, Some(_)) => Err(invalid(format!("{} must not carry duration_s", self.kind))),
            (true, Some(d)) if !d.is_finite() || d < 0.0 => {
                Err(invalid(format!("duration_s must be a non-negative number, got {d}")))
            }
            _ => Ok(()),
        }
    }

    fn cmp_key(&self, other: &Self) -> Ordering {
        self.user_id
            .cmp(&other.user_id)
            .then(self.timestamp.cmp(&other.timestamp))
            .then(self.kind.cmp(&other.kind))
            .then_with(|| match (self.duration_s, other.duration_s) {
                (Some(a), Some(b)) => a.total_cmp(&b),
                (a, b) => a.is_some().cmp(&b.is_some()),
            })
            .then_with(|| self.country.cmp(&other.country))
    }
}

impl Eq for EventRecord {}

impl PartialOrd for EventRecord {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for EventRecord {
    fn cmp(&self, other: &Self) -> Ordering {
        self.cmp_key(other)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputFormat {
    Csv,
    Jsonl,
}

impl FromStr for InputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(InputFormat::Csv),
            "jsonl" | "json" => Ok(InputFormat::Jsonl),
            other => Err(invalid(format!("unknown input format `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    /// Inclusive observation window; records outside it are rejected.
    pub window: Option<(DateTime<Utc>, DateTime<Utc>)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Rejection {
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct IngestReport {
    /// Sorted by (user_id, timestamp), exact duplicates removed.
    pub records: Vec<EventRecord>,
    pub rejections: Vec<Rejection>,
    pub duplicates_removed: usize,
}

#[derive(Debug, Deserialize, Serialize)]
struct RawEvent {
    user_id: String,
    timestamp_iso8601: String,
    event_kind: String,
    duration_s: Option<f64>,
    country: String,
}

fn parse_timestamp(s: &str) -> Result<DateTime<Utc>> {
    let ts = DateTime::parse_from_rfc3339(s.trim())
        .map_err(|e| invalid(format!("bad timestamp `{s}`: {e}")))?
        .with_timezone(&Utc);
    Ok(ts.with_nanosecond(0).unwrap_or(ts))
}

pub fn format_timestamp(ts: &DateTime<Utc>) -> String {
    ts.to_rfc3339_opts(SecondsFormat::Secs, true)
}

fn record_from_fields(
    user_id: &str,
    timestamp: &str,
    kind: &str,
    duration: Option<f64>,
    country: &str,
    opts: &IngestOptions,
) -> Result<EventRecord> {
    let rec = EventRecord::new(
        user_id.trim(),
        parse_timestamp(timestamp)?,
        kind.trim().parse()?,
        duration,
        country.trim(),
    );
    rec.validate()?;
    if let Some((start, end)) = opts.window {
        if rec.timestamp < start || rec.timestamp > end {
            return Err(invalid(format!(
                "timestamp {} outside the observation window",
                format_timestamp(&rec.timestamp)
            )));
        }
    }
    Ok(rec)
}

fn parse_duration_field(s: &str) -> Result<Option<f64>> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|_| invalid(format!("bad duration_s `{s}`")))
}

/// Reads an event log, collecting malformed rows instead of failing on them.
pub fn ingest_events<R: Read>(source: R, format: InputFormat, opts: &IngestOptions) -> Result<IngestReport> {
    let mut records = Vec::new();
    let mut rejections = Vec::new();
    let mut rows_seen = 0usize;

    match format {
        InputFormat::Csv => {
            let mut rdr = csv::ReaderBuilder::new()
                .has_headers(true)
                .flexible(true)
                .from_reader(source);
            let headers = rdr.headers()?.clone();
            if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
                return Err(Error::EmptyInput("no csv header".into()));
            }
            let found: Vec<&str> = headers.iter().map(str::trim).collect();
            if found != CSV_HEADER {
                return Err(invalid(format!(
                    "csv header must be `{}`, found `{}`",
                    CSV_HEADER.join(","),
                    found.join(",")
                )));
            }
            let mut row = csv::StringRecord::new();
            loop {
                let line = rdr.position().line();
                match rdr.read_record(&mut row) {
                    Ok(false) => break,
                    Ok(true) => {
                        rows_seen += 1;
                        let line = row.position().map_or(line, |p| p.line());
                        if row.len() != CSV_HEADER.len() {
                            rejections.push(Rejection {
                                line,
                                reason: format!("expected {} fields, found {}", CSV_HEADER.len(), row.len()),
                            });
                            continue;
                        }
                        let parsed = parse_duration_field(&row[3])
                            .and_then(|d| record_from_fields(&row[0], &row[1], &row[2], d, &row[4], opts));
                        match parsed {
                            Ok(r) => records.push(r),
                            Err(e) => rejections.push(Rejection { line, reason: e.to_string() }),
                        }
                    }
                    Err(e) => {
                        if let csv::ErrorKind::Io(_) = e.kind() {
                            return Err(e.into());
                        }
                        rows_seen += 1;
                        let line = e.position().map_or(line, |p| p.line());
                        rejections.push(Rejection { line, reason: e.to_string() });
                    }
                }
            }
        }
        InputFormat::Jsonl => {
            for (idx, line) in BufReader::new(source).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                rows_seen += 1;
                let lineno = idx as u64 + 1;
                let parsed = serde_json::from_str::<RawEvent>(&line)
                    .map_err(Error::from)
                    .and_then(|raw| {
                        record_from_fields(
                            &raw.user_id,
                            &raw.timestamp_iso8601,
                            &raw.event_kind,
                            raw.duration_s,
                            &raw.country,
                            opts,
                        )
                    });
                match parsed {
                    Ok(r) => records.push(r),
                    Err(e) => rejections.push(Rejection { line: lineno, reason: e.to_string() }),
                }
            }
        }
    }

    if rows_seen == 0 {
        return Err(Error::EmptyInput("event log has no rows".into()));
    }

    records.sort();
    let before = records.len();
    records.dedup();
    let duplicates_removed = before - records.len();

    Ok(IngestReport {
        records,
        rejections,
        duplicates_removed,
    })
}

fn duration_field(d: Option<f64>) -> String {
    d.map(|v| v.to_string()).unwrap_or_default()
}

/// Writes events in canonical CSV form (header first, UTC `Z` timestamps).
pub fn write_events_csv<W: Write>(events: &[EventRecord], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(CSV_HEADER)?;
    for e in events {
        w.write_record([
            e.user_id.as_ref(),
            &format_timestamp(&e.timestamp),
            e.kind.as_str(),
            &duration_field(e.duration_s),
            e.country.as_ref(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_events_jsonl<W: Write>(events: &[EventRecord], mut out: W) -> Result<()> {
    for e in events {
        let raw = RawEvent {
            user_id: e.user_id.to_string(),
            timestamp_iso8601: format_timestamp(&e.timestamp),
            event_kind: e.kind.as_str().to_string(),
            duration_s: e.duration_s,
            country: e.country.to_string(),
        };
        serde_json::to_writer(&mut out, &raw)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "user_id,timestamp_iso8601,event_kind,duration_s,country\n";

    fn ingest_csv(body: &str) -> Result<IngestReport> {
        ingest_events(format!("{HEADER}{body}").as_bytes(), InputFormat::Csv, &IngestOptions::default())
    }

    #[test]
    fn single_login_row() {
        let rep = ingest_csv("u1,2021-08-01T10:00:00Z,login,,IN\n").unwrap();
        assert_eq!(rep.records.len(), 1);
        assert!(rep.rejections.is_empty());
        assert_eq!(rep.duplicates_removed, 0);
        assert_eq!(rep.records[0].kind, EventKind::Login);
    }

    #[test]
    fn triplicate_rows_dedupe_to_one() {
        let row = "u1,2021-08-01T10:00:00Z,login,,IN\n";
        let rep = ingest_csv(&row.repeat(3)).unwrap();
        assert_eq!(rep.records.len(), 1);
        assert!(rep.rejections.is_empty());
        assert_eq!(rep.duplicates_removed, 2);
    }

    #[test]
    fn malformed_rows_are_reported_with_line_numbers() {
        let body = "u1,2021-08-01T10:00:00Z,login,,IN\n\
                    u1,not-a-time,login,,IN\n\
                    u1,2021-08-01T10:05:00Z,session_end,,IN\n\
                    u1,2021-08-01T10:06:00Z,click,5,IN\n\
                    u1,2021-08-01T10:07:00Z,teleport,,IN\n\
                    u1,2021-08-01T10:08:00Z,click\n\
                    u1,2021-08-01T10:09:00Z,video_stop,-3,IN\n\
                    u1,2021-08-01T10:10:00Z,session_end,600,IN\n";
        let rep = ingest_csv(body).unwrap();
        assert_eq!(rep.records.len(), 2);
        let lines: Vec<u64> = rep.rejections.iter().map(|r| r.line).collect();
        assert_eq!(lines, vec![3, 4, 5, 6, 7, 8]);
    }

    #[test]
    fn empty_input_is_an_error() {
        let err = ingest_events(&b""[..], InputFormat::Csv, &IngestOptions::default()).unwrap_err();
        assert!(matches!(err, Error::EmptyInput(_)));
        let err = ingest_csv("").unwrap_err();
        assert!(matches!(err, Error::EmptyInput(_)));
        let err = ingest_events(&b"\n\n"[..], InputFormat::Jsonl, &IngestOptions::default()).unwrap_err();
        assert!(matches!(err, Error::EmptyInput(_)));
    }

    #[test]
    fn wrong_header_is_an_error() {
        let err = ingest_events(&b"a,b,c\n1,2,3\n"[..], InputFormat::Csv, &IngestOptions::default()).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn records_come_back_sorted() {
        let body = "u2,2021-08-01T10:00:00Z,login,,IN\n\
                    u1,2021-08-02T10:00:00Z,login,,IN\n\
                    u1,2021-08-01T10:00:00Z,login,,IN\n";
        let rep = ingest_csv(body).unwrap();
        let keys: Vec<(String, String)> = rep
            .records
            .iter()
            .map(|r| (r.user_id.to_string(), format_timestamp(&r.timestamp)))
            .collect();
        assert_eq!(
            keys,
            vec![
                ("u1".into(), "2021-08-01T10:00:00Z".into()),
                ("u1".into(), "2021-08-02T10:00:00Z".into()),
                ("u2".into(), "2021-08-01T10:00:00Z".into()),
            ]
        );
    }

    #[test]
    fn timestamps_normalise_to_utc() {
        let rep = ingest_csv("u1,2021-08-01T12:00:00+02:00,login,,IN\n").unwrap();
        assert_eq!(format_timestamp(&rep.records[0].timestamp), "2021-08-01T10:00:00Z");
    }

    #[test]
    fn observation_window_rejects_outside_rows() {
        let start = parse_timestamp("2021-01-01T00:00:00Z").unwrap();
        let end = parse_timestamp("2021-12-31T23:59:59Z").unwrap();
        let opts = IngestOptions { window: Some((start, end)) };
        let body = format!("{HEADER}u1,2020-12-31T23:00:00Z,login,,IN\nu1,2021-01-02T00:00:00Z,login,,IN\n");
        let rep = ingest_events(body.as_bytes(), InputFormat::Csv, &opts).unwrap();
        assert_eq!(rep.records.len(), 1);
        assert_eq!(rep.rejections.len(), 1);
        assert_eq!(rep.rejections[0].line, 2);
    }

    #[test]
    fn jsonl_matches_csv() {
        let csv_body = "u1,2021-08-01T10:00:00Z,login,,ET\nu1,2021-08-01T10:30:00Z,session_end,1800,ET\n";
        let from_csv = ingest_csv(csv_body).unwrap();
        let mut buf = Vec::new();
        write_events_jsonl(&from_csv.records, &mut buf).unwrap();
        let from_json = ingest_events(buf.as_slice(), InputFormat::Jsonl, &IngestOptions::default()).unwrap();
        assert_eq!(from_csv.records, from_json.records);
    }

    #[test]
    fn jsonl_bad_lines_are_rejected() {
        let body = "{\"user_id\":\"u1\",\"timestamp_iso8601\":\"2021-08-01T10:00:00Z\",\"event_kind\":\"login\",\"duration_s\":null,\"country\":\"IN\"}\n{oops\n";
        let rep = ingest_events(body.as_bytes(), InputFormat::Jsonl, &IngestOptions::default()).unwrap();
        assert_eq!(rep.records.len(), 1);
        assert_eq!(rep.rejections[0].line, 2);
    }
}
