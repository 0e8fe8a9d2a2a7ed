//! Per-user daily metric panels built from sorted event logs.
//!
//! Every user's rows run gaplessly from their first login day to the shared
//! panel end. Days are bucketed in UTC. Sessions open on `login` and close on
//! a matching `session_end` (same or previous UTC day) or after the configured
//! timeout; connection time is split across midnights in proportion to the
//! seconds spent on each side.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::sync::Arc;

use chrono::{Datelike, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::events::{EventKind, EventRecord};
use crate::metric::Metric;

const DAY_S: f64 = 86_400.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PanelConfig {
    /// Sessions without an explicit end close this many seconds after login
    /// (or at the next login, whichever is earlier).
    pub session_timeout_s: f64,
}

impl Default for PanelConfig {
    fn default() -> Self {
        Self { session_timeout_s: 1800.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserDayMetrics {
    pub day: NaiveDate,
    pub lifetime_days: u32,
    pub connection_time_s: f64,
    pub action_count: u32,
    pub elearning_action_count: u32,
    /// Tests passed on this day (see [`Metric::CumulativeProgression`] for the running total).
    pub progression: u32,
    pub video_view_count: u32,
    pub video_watch_time_s: f64,
    pub loyalty_index: f64,
    pub days_since_last_login: u32,
    pub logged_in: bool,
    pub session_count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserPanel {
    pub user_id: String,
    pub group: String,
    pub first_login: NaiveDate,
    /// `days[i].day == first_login + i`, through the panel end.
    pub days: Vec<UserDayMetrics>,
}

pub(crate) fn day_number(d: NaiveDate) -> i64 {
    d.num_days_from_ce() as i64
}

pub(crate) fn add_days(d: NaiveDate, n: i64) -> NaiveDate {
    d + chrono::Duration::days(n)
}

impl UserPanel {
    pub fn day_index(&self, day: NaiveDate) -> Option<usize> {
        let off = day_number(day) - day_number(self.first_login);
        (off >= 0 && (off as usize) < self.days.len()).then_some(off as usize)
    }

    pub fn last_day(&self) -> NaiveDate {
        self.days.last().map_or(self.first_login, |d| d.day)
    }

    /// Day indices (offsets from the first login) with a login.
    pub fn login_indices(&self) -> Vec<usize> {
        self.days
            .iter()
            .enumerate()
            .filter(|(_, d)| d.logged_in)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn last_login_index(&self) -> usize {
        self.days.iter().rposition(|d| d.logged_in).unwrap_or(0)
    }

    /// Completed login-to-login gaps as `(closing day index, gap in days)`.
    pub fn completed_gaps(&self) -> Vec<(usize, u32)> {
        self.login_indices()
            .windows(2)
            .map(|w| (w[1], (w[1] - w[0]) as u32))
            .collect()
    }

    /// Full daily series of one metric, aligned with `days`.
    pub fn series(&self, metric: Metric) -> Vec<f64> {
        match metric {
            Metric::WeeklyLoyaltyIndex => {
                let mut out = Vec::with_capacity(self.days.len());
                let mut window = 0u32;
                for (i, d) in self.days.iter().enumerate() {
                    window += d.logged_in as u32;
                    if i >= 7 && self.days[i - 7].logged_in {
                        window -= 1;
                    }
                    out.push(window as f64 / 7.0);
                }
                out
            }
            Metric::CumulativeProgression => {
                let mut acc = 0.0;
                self.days
                    .iter()
                    .map(|d| {
                        acc += d.progression as f64;
                        acc
                    })
                    .collect()
            }
            _ => self.days.iter().map(|d| day_value(d, metric)).collect(),
        }
    }
}

/// Value of a metric that depends only on the day's own row.
fn day_value(d: &UserDayMetrics, metric: Metric) -> f64 {
    match metric {
        Metric::LifetimeDays => d.lifetime_days as f64,
        Metric::ConnectionTime => d.connection_time_s,
        Metric::ActionCount => d.action_count as f64,
        Metric::ElearningActionCount => d.elearning_action_count as f64,
        Metric::Progression => d.progression as f64,
        Metric::VideoViewCount => d.video_view_count as f64,
        Metric::VideoWatchTime => d.video_watch_time_s,
        Metric::LoyaltyIndex => d.loyalty_index,
        Metric::DaysSinceLastLogin => d.days_since_last_login as f64,
        Metric::SessionCount => d.session_count as f64,
        Metric::LoggedIn => d.logged_in as u8 as f64,
        Metric::ElearningConnectionTime => {
            if d.action_count == 0 {
                0.0
            } else {
                d.connection_time_s * d.elearning_action_count as f64 / d.action_count as f64
            }
        }
        Metric::WeeklyLoyaltyIndex | Metric::CumulativeProgression => {
            unreachable!("window metrics are computed over the series")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortPanel {
    pub panel_end: NaiveDate,
    /// Sorted by `user_id`.
    pub users: Vec<UserPanel>,
}

impl CohortPanel {
    pub fn user(&self, user_id: &str) -> Option<&UserPanel> {
        self.users
            .binary_search_by(|u| u.user_id.as_str().cmp(user_id))
            .ok()
            .map(|i| &self.users[i])
    }

    pub fn try_user(&self, user_id: &str) -> Result<&UserPanel> {
        self.user(user_id).ok_or_else(|| Error::UnknownUser(user_id.to_string()))
    }

    pub fn groups(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.users.iter().map(|u| u.group.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    pub fn group_users<'a>(&'a self, group: &'a str) -> impl Iterator<Item = &'a UserPanel> + 'a {
        self.users.iter().filter(move |u| u.group == group)
    }

    /// Checks the structural and per-row invariants.
    pub fn validate(&self) -> Result<()> {
        for pair in self.users.windows(2) {
            if pair[0].user_id >= pair[1].user_id {
                return Err(invalid("users must be sorted by id without duplicates"));
            }
        }
        for u in &self.users {
            if u.days.is_empty() || u.last_day() != self.panel_end {
                return Err(invalid(format!("user {} does not end on the panel end", u.user_id)));
            }
            if !u.days[0].logged_in {
                return Err(invalid(format!("user {} has no login on the first day", u.user_id)));
            }
            let mut logins = 0u32;
            for (i, d) in u.days.iter().enumerate() {
                if d.day != add_days(u.first_login, i as i64) || d.lifetime_days as usize != i {
                    return Err(invalid(format!("user {} has a gap or misdated row at {}", u.user_id, d.day)));
                }
                logins += d.logged_in as u32;
                let loyalty = logins as f64 / (i + 1) as f64;
                if d.elearning_action_count > d.action_count
                    || (d.loyalty_index - loyalty).abs() > 1e-9
                    || (d.days_since_last_login == 0) != d.logged_in
                    || d.connection_time_s < 0.0
                    || d.video_watch_time_s < 0.0
                {
                    return Err(invalid(format!("user {} violates a metric invariant on {}", u.user_id, d.day)));
                }
            }
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        for u in &self.users {
            for d in &u.days {
                w.serialize(PanelCsvRow::from_parts(u, d))?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<CohortPanel> {
        let mut rdr = csv::Reader::from_reader(input);
        let mut users: Vec<UserPanel> = Vec::new();
        for row in rdr.deserialize::<PanelCsvRow>() {
            let row = row?;
            let day = row.metrics();
            match users.last_mut() {
                Some(u) if u.user_id == row.user_id => u.days.push(day),
                _ => users.push(UserPanel {
                    user_id: row.user_id.clone(),
                    group: row.group.clone(),
                    first_login: row.day,
                    days: vec![day],
                }),
            }
        }
        let panel_end = users
            .first()
            .map(|u| u.last_day())
            .ok_or_else(|| Error::EmptyInput("panel has no rows".into()))?;
        let panel = CohortPanel { panel_end, users };
        panel.validate()?;
        Ok(panel)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PanelCsvRow {
    user_id: String,
    group: String,
    day: NaiveDate,
    lifetime_days: u32,
    connection_time_s: f64,
    action_count: u32,
    elearning_action_count: u32,
    progression: u32,
    video_view_count: u32,
    video_watch_time_s: f64,
    loyalty_index: f64,
    days_since_last_login: u32,
    logged_in: u8,
    session_count: u32,
}

impl PanelCsvRow {
    fn from_parts(u: &UserPanel, d: &UserDayMetrics) -> Self {
        Self {
            user_id: u.user_id.clone(),
            group: u.group.clone(),
            day: d.day,
            lifetime_days: d.lifetime_days,
            connection_time_s: d.connection_time_s,
            action_count: d.action_count,
            elearning_action_count: d.elearning_action_count,
            progression: d.progression,
            video_view_count: d.video_view_count,
            video_watch_time_s: d.video_watch_time_s,
            loyalty_index: d.loyalty_index,
            days_since_last_login: d.days_since_last_login,
            logged_in: d.logged_in as u8,
            session_count: d.session_count,
        }
    }

    fn metrics(&self) -> UserDayMetrics {
        UserDayMetrics {
            day: self.day,
            lifetime_days: self.lifetime_days,
            connection_time_s: self.connection_time_s,
            action_count: self.action_count,
            elearning_action_count: self.elearning_action_count,
            progression: self.progression,
            video_view_count: self.video_view_count,
            video_watch_time_s: self.video_watch_time_s,
            loyalty_index: self.loyalty_index,
            days_since_last_login: self.days_since_last_login,
            logged_in: self.logged_in != 0,
            session_count: self.session_count,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionClose {
    /// Closed by a `session_end` matched to an open login.
    Explicit,
    /// Closed by the timeout or the next login.
    Timeout,
    /// A `session_end` without an open login; its duration is booked on its own day.
    Unmatched,
}

/// One reconstructed session. Times are UTC epoch seconds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Session {
    pub user_id: Arc<str>,
    pub start_s: f64,
    pub end_s: f64,
    pub close: SessionClose,
}

impl Session {
    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }
}

/// Writes `user_id,start_s,end_s,duration_s,close`.
pub fn write_sessions_csv<W: Write>(sessions: &[Session], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["user_id", "start_s", "end_s", "duration_s", "close"])?;
    for s in sessions {
        let close = match s.close {
            SessionClose::Explicit => "explicit",
            SessionClose::Timeout => "timeout",
            SessionClose::Unmatched => "unmatched",
        };
        w.write_record([
            s.user_id.to_string(),
            s.start_s.to_string(),
            s.end_s.to_string(),
            s.duration_s().to_string(),
            close.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct PanelBuild {
    pub panel: CohortPanel,
    pub sessions: Vec<Session>,
    pub warnings: Vec<String>,
    /// Events dropped for invalid durations or identifiers.
    pub rejected: usize,
}

struct UserBuild {
    panel: UserPanel,
    sessions: Vec<Session>,
    warnings: Vec<String>,
    rejected: usize,
}

fn epoch_s(e: &EventRecord) -> f64 {
    e.timestamp.timestamp() as f64
}

fn epoch_day(t: f64) -> i64 {
    (t / DAY_S).floor() as i64
}

fn date_epoch_day(d: NaiveDate) -> i64 {
    d.and_hms_opt(0, 0, 0).unwrap().and_utc().timestamp().div_euclid(86_400)
}

/// Builds the daily panel. Input order does not matter; events are sorted
/// internally by (user, timestamp).
pub fn build_panel(events: &[EventRecord], panel_end: NaiveDate, cfg: &PanelConfig) -> Result<PanelBuild> {
    if events.is_empty() {
        return Err(Error::EmptyInput("no events".into()));
    }
    let mut sorted: Vec<&EventRecord> = events.iter().collect();
    sorted.par_sort_unstable();

    let mut chunks: Vec<&[&EventRecord]> = Vec::new();
    let mut start = 0;
    for i in 1..=sorted.len() {
        if i == sorted.len() || sorted[i].user_id != sorted[start].user_id {
            chunks.push(&sorted[start..i]);
            start = i;
        }
    }

    let built: Vec<UserBuild> = chunks
        .par_iter()
        .map(|evs| build_user(evs, panel_end, cfg))
        .collect::<Result<_>>()?;

    let mut users = Vec::with_capacity(built.len());
    let mut sessions = Vec::new();
    let mut warnings = Vec::new();
    let mut rejected = 0;
    for b in built {
        users.push(b.panel);
        sessions.extend(b.sessions);
        warnings.extend(b.warnings);
        rejected += b.rejected;
    }
    Ok(PanelBuild {
        panel: CohortPanel { panel_end, users },
        sessions,
        warnings,
        rejected,
    })
}

#[derive(Default, Clone)]
struct DayAcc {
    connection: f64,
    actions: u32,
    elearning: u32,
    tests: u32,
    video_views: u32,
    watch: f64,
    logins: u32,
}

fn build_user(evs: &[&EventRecord], panel_end: NaiveDate, cfg: &PanelConfig) -> Result<UserBuild> {
    let user_id = evs[0].user_id.clone();
    let first = evs
        .iter()
        .find(|e| e.kind == EventKind::Login)
        .ok_or_else(|| invalid(format!("user {user_id} has no login")))?;
    let first_day = first.timestamp.date_naive();
    let group = first.country.to_string();
    if let Some(last) = evs.last() {
        if last.timestamp.date_naive() > panel_end {
            return Err(invalid(format!(
                "user {user_id} has events after the panel end {panel_end}"
            )));
        }
    }

    let day0 = date_epoch_day(first_day);
    let n_days = (day_number(panel_end) - day_number(first_day) + 1) as usize;
    let panel_end_s = (date_epoch_day(panel_end) + 1) as f64 * DAY_S;
    let mut acc = vec![DayAcc::default(); n_days];
    let mut sessions = Vec::new();
    let mut warnings = Vec::new();
    let mut rejected = 0;
    let mut open: Option<f64> = None;

    let close_timeout = |open_s: f64, limit_s: f64, sessions: &mut Vec<Session>| {
        let end = (open_s + cfg.session_timeout_s).min(limit_s);
        sessions.push(Session {
            user_id: user_id.clone(),
            start_s: open_s,
            end_s: end,
            close: SessionClose::Timeout,
        });
    };

    for e in evs {
        if let Err(err) = e.validate() {
            warnings.push(format!("user {user_id}: rejected event at {}: {err}", e.timestamp));
            rejected += 1;
            continue;
        }
        let t = epoch_s(e);
        let idx = epoch_day(t) - day0;
        if idx < 0 {
            warnings.push(format!("user {user_id}: {} before first login dropped", e.kind));
            continue;
        }
        let idx = idx as usize;
        match e.kind {
            EventKind::Login => {
                if let Some(o) = open.take() {
                    close_timeout(o, t, &mut sessions);
                }
                open = Some(t);
                acc[idx].logins += 1;
            }
            EventKind::SessionEnd => {
                let dur = e.duration_s.unwrap_or(0.0);
                match open {
                    Some(o) if epoch_day(o) >= epoch_day(t) - 1 => {
                        sessions.push(Session {
                            user_id: user_id.clone(),
                            start_s: (t - dur).max(o),
                            end_s: t,
                            close: SessionClose::Explicit,
                        });
                        open = None;
                    }
                    stale => {
                        if let Some(o) = stale {
                            close_timeout(o, t, &mut sessions);
                            open = None;
                        }
                        warnings.push(format!(
                            "user {user_id}: session_end at {} without a matching login; booked on its own day",
                            e.timestamp
                        ));
                        sessions.push(Session {
                            user_id: user_id.clone(),
                            start_s: t - dur,
                            end_s: t,
                            close: SessionClose::Unmatched,
                        });
                    }
                }
            }
            kind => {
                let a = &mut acc[idx];
                a.actions += 1;
                a.elearning += kind.is_elearning() as u32;
                match kind {
                    EventKind::TestPassed => a.tests += 1,
                    EventKind::VideoStart => a.video_views += 1,
                    EventKind::VideoStop => a.watch += e.duration_s.unwrap_or(0.0),
                    _ => {}
                }
            }
        }
    }
    if let Some(o) = open {
        close_timeout(o, panel_end_s, &mut sessions);
    }

    for s in &sessions {
        match s.close {
            SessionClose::Unmatched => {
                let idx = epoch_day(s.end_s) - day0;
                acc[idx as usize].connection += s.duration_s();
            }
            _ => split_across_days(s.start_s, s.end_s, day0, &mut acc),
        }
    }

    let mut days = Vec::with_capacity(n_days);
    let mut login_days = 0u32;
    let mut last_login = 0usize;
    for (i, a) in acc.iter().enumerate() {
        let logged_in = a.logins > 0;
        if logged_in {
            login_days += 1;
            last_login = i;
        }
        days.push(UserDayMetrics {
            day: add_days(first_day, i as i64),
            lifetime_days: i as u32,
            connection_time_s: a.connection,
            action_count: a.actions,
            elearning_action_count: a.elearning,
            progression: a.tests,
            video_view_count: a.video_views,
            video_watch_time_s: a.watch,
            loyalty_index: login_days as f64 / (i + 1) as f64,
            days_since_last_login: (i - last_login) as u32,
            logged_in,
            session_count: a.logins,
        });
    }

    Ok(UserBuild {
        panel: UserPanel {
            user_id: user_id.to_string(),
            group,
            first_login: first_day,
            days,
        },
        sessions,
        warnings,
        rejected,
    })
}

fn split_across_days(start: f64, end: f64, day0: i64, acc: &mut [DayAcc]) {
    let mut t = start;
    while t < end {
        let day = epoch_day(t);
        let boundary = (day + 1) as f64 * DAY_S;
        let stop = end.min(boundary);
        let idx = day - day0;
        if idx >= 0 && (idx as usize) < acc.len() {
            acc[idx as usize].connection += stop - t;
        }
        t = stop;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{TimeZone, Utc};

    fn ts(y: i32, m: u32, d: u32, h: u32, mi: u32) -> chrono::DateTime<Utc> {
        Utc.with_ymd_and_hms(y, m, d, h, mi, 0).unwrap()
    }

    fn ev(user: &str, t: chrono::DateTime<Utc>, kind: EventKind, dur: Option<f64>) -> EventRecord {
        EventRecord::new(user, t, kind, dur, "IN")
    }

    fn date(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    #[test]
    fn single_login_single_day() {
        let events = vec![ev("u", ts(2021, 8, 1, 9, 0), EventKind::Login, None)];
        let b = build_panel(&events, date(2021, 8, 1), &PanelConfig::default()).unwrap();
        let u = &b.panel.users[0];
        assert_eq!(u.days.len(), 1);
        let d = &u.days[0];
        assert_eq!(d.lifetime_days, 0);
        assert_eq!(d.loyalty_index, 1.0);
        assert_eq!(d.days_since_last_login, 0);
        assert!(d.logged_in);
        b.panel.validate().unwrap();
    }

    #[test]
    fn loyalty_and_days_since_last_login() {
        let events = vec![
            ev("u", ts(2021, 8, 1, 9, 0), EventKind::Login, None),
            ev("u", ts(2021, 8, 3, 9, 0), EventKind::Login, None),
        ];
        let b = build_panel(&events, date(2021, 8, 4), &PanelConfig::default()).unwrap();
        let last = b.panel.users[0].days.last().unwrap();
        assert_eq!(last.loyalty_index, 0.5);
        assert_eq!(last.days_since_last_login, 1);
        let dsl: Vec<u32> = b.panel.users[0].days.iter().map(|d| d.days_since_last_login).collect();
        assert_eq!(dsl, vec![0, 1, 0, 1]);
    }

    #[test]
    fn midnight_session_is_prorated() {
        let events = vec![
            ev("u", ts(2021, 8, 1, 23, 30), EventKind::Login, None),
            ev("u", ts(2021, 8, 2, 0, 15), EventKind::SessionEnd, Some(2700.0)),
        ];
        let b = build_panel(&events, date(2021, 8, 2), &PanelConfig::default()).unwrap();
        let days = &b.panel.users[0].days;
        assert_eq!(days[0].connection_time_s, 1800.0);
        assert_eq!(days[1].connection_time_s, 900.0);
        assert!(!days[1].logged_in);
        assert_eq!(b.sessions.len(), 1);
        assert_eq!(b.sessions[0].close, SessionClose::Explicit);
    }

    #[test]
    fn sessions_without_end_time_out() {
        let events = vec![
            ev("u", ts(2021, 8, 1, 9, 0), EventKind::Login, None),
            ev("u", ts(2021, 8, 1, 9, 10), EventKind::Login, None),
            ev("u", ts(2021, 8, 1, 9, 15), EventKind::Click, None),
        ];
        let b = build_panel(&events, date(2021, 8, 1), &PanelConfig::default()).unwrap();
        let d = &b.panel.users[0].days[0];
        // 600 s until the second login, then the 1800 s timeout.
        assert_eq!(d.connection_time_s, 2400.0);
        assert_eq!(d.session_count, 2);
        assert_eq!(d.action_count, 1);
    }

    #[test]
    fn unmatched_session_end_is_booked_on_its_day_with_warning() {
        let events = vec![
            ev("u", ts(2021, 8, 1, 9, 0), EventKind::Login, None),
            ev("u", ts(2021, 8, 1, 9, 20), EventKind::SessionEnd, Some(1200.0)),
            ev("u", ts(2021, 8, 5, 0, 10), EventKind::SessionEnd, Some(1800.0)),
        ];
        let b = build_panel(&events, date(2021, 8, 5), &PanelConfig::default()).unwrap();
        let days = &b.panel.users[0].days;
        assert_eq!(days[0].connection_time_s, 1200.0);
        assert_eq!(days[4].connection_time_s, 1800.0);
        assert_eq!(days[3].connection_time_s, 0.0);
        assert_eq!(b.warnings.len(), 1);
    }

    #[test]
    fn negative_durations_are_rejected() {
        let events = vec![
            ev("u", ts(2021, 8, 1, 9, 0), EventKind::Login, None),
            ev("u", ts(2021, 8, 1, 9, 5), EventKind::VideoStop, Some(-5.0)),
        ];
        let b = build_panel(&events, date(2021, 8, 1), &PanelConfig::default()).unwrap();
        assert_eq!(b.rejected, 1);
        assert_eq!(b.panel.users[0].days[0].video_watch_time_s, 0.0);
    }

    #[test]
    fn user_without_login_is_an_error() {
        let events = vec![ev("u", ts(2021, 8, 1, 9, 0), EventKind::Click, None)];
        assert!(build_panel(&events, date(2021, 8, 1), &PanelConfig::default()).is_err());
    }

    #[test]
    fn events_after_panel_end_are_an_error() {
        let events = vec![ev("u", ts(2021, 8, 2, 9, 0), EventKind::Login, None)];
        assert!(build_panel(&events, date(2021, 8, 1), &PanelConfig::default()).is_err());
    }

    #[test]
    fn action_classification() {
        let t = ts(2021, 8, 1, 9, 0);
        let events = vec![
            ev("u", t, EventKind::Login, None),
            ev("u", t, EventKind::Click, None),
            ev("u", t, EventKind::VideoStart, None),
            ev("u", t, EventKind::VideoStop, Some(30.0)),
            ev("u", t, EventKind::TestPassed, None),
            ev("u", t, EventKind::ActionCardView, None),
            ev("u", t, EventKind::DrugListView, None),
        ];
        let b = build_panel(&events, date(2021, 8, 1), &PanelConfig::default()).unwrap();
        let d = &b.panel.users[0].days[0];
        assert_eq!(d.action_count, 6);
        assert_eq!(d.elearning_action_count, 4);
        assert_eq!(d.progression, 1);
        assert_eq!(d.video_view_count, 1);
        assert_eq!(d.video_watch_time_s, 30.0);
    }

    #[test]
    fn weekly_loyalty_and_cumulative_progression() {
        let mut events = Vec::new();
        for day in [1u32, 2, 3, 9] {
            events.push(ev("u", ts(2021, 8, day, 9, 0), EventKind::Login, None));
            events.push(ev("u", ts(2021, 8, day, 9, 1), EventKind::TestPassed, None));
        }
        let b = build_panel(&events, date(2021, 8, 10), &PanelConfig::default()).unwrap();
        let u = &b.panel.users[0];
        let weekly = u.series(Metric::WeeklyLoyaltyIndex);
        assert_eq!(weekly[2], 3.0 / 7.0);
        // Day 9 window covers days 3..=9: logins on 3 and 9.
        assert_eq!(weekly[8], 2.0 / 7.0);
        assert_eq!(weekly[9], 1.0 / 7.0);
        assert_eq!(u.series(Metric::CumulativeProgression)[9], 4.0);
    }

    #[test]
    fn panel_csv_round_trip() {
        let events = vec![
            ev("a", ts(2021, 8, 1, 23, 30), EventKind::Login, None),
            ev("a", ts(2021, 8, 2, 0, 15), EventKind::SessionEnd, Some(2700.0)),
            ev("b", ts(2021, 8, 2, 10, 0), EventKind::Login, None),
        ];
        let b = build_panel(&events, date(2021, 8, 4), &PanelConfig::default()).unwrap();
        let mut buf = Vec::new();
        b.panel.write_csv(&mut buf).unwrap();
        let back = CohortPanel::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, b.panel);
    }
}
