//! Identifiers for the per-day metrics a panel exposes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    LifetimeDays,
    ConnectionTime,
    ActionCount,
    ElearningActionCount,
    Progression,
    /// Tests passed from first login through the day.
    CumulativeProgression,
    VideoViewCount,
    VideoWatchTime,
    LoyaltyIndex,
    /// Login days over the trailing 7 days, divided by 7.
    WeeklyLoyaltyIndex,
    DaysSinceLastLogin,
    SessionCount,
    /// Connection time apportioned by the e-learning share of the day's actions.
    ElearningConnectionTime,
    LoggedIn,
}

impl Metric {
    pub const ALL: [Metric; 14] = [
        Metric::LifetimeDays,
        Metric::ConnectionTime,
        Metric::ActionCount,
        Metric::ElearningActionCount,
        Metric::Progression,
        Metric::CumulativeProgression,
        Metric::VideoViewCount,
        Metric::VideoWatchTime,
        Metric::LoyaltyIndex,
        Metric::WeeklyLoyaltyIndex,
        Metric::DaysSinceLastLogin,
        Metric::SessionCount,
        Metric::ElearningConnectionTime,
        Metric::LoggedIn,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Metric::LifetimeDays => "lifetime_days",
            Metric::ConnectionTime => "connection_time_s",
            Metric::ActionCount => "action_count",
            Metric::ElearningActionCount => "elearning_action_count",
            Metric::Progression => "progression",
            Metric::CumulativeProgression => "cumulative_progression",
            Metric::VideoViewCount => "video_view_count",
            Metric::VideoWatchTime => "video_watch_time_s",
            Metric::LoyaltyIndex => "loyalty_index",
            Metric::WeeklyLoyaltyIndex => "weekly_loyalty_index",
            Metric::DaysSinceLastLogin => "days_since_last_login",
            Metric::SessionCount => "session_count",
            Metric::ElearningConnectionTime => "elearning_connection_time_s",
            Metric::LoggedIn => "logged_in",
        }
    }

    /// Parses a comma-separated list of metric ids.
    pub fn parse_list(s: &str) -> Result<Vec<Metric>> {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(str::parse)
            .collect()
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(m) = Metric::ALL.iter().find(|m| m.id() == s) {
            return Ok(*m);
        }
        match s {
            "lifetime" => Ok(Metric::LifetimeDays),
            "connection_time" => Ok(Metric::ConnectionTime),
            "video_watch_time" => Ok(Metric::VideoWatchTime),
            "elearning_connection_time" => Ok(Metric::ElearningConnectionTime),
            "days_between_logins" => Ok(Metric::DaysSinceLastLogin),
            "session_count" | "sessions" => Ok(Metric::SessionCount),
            _ => Err(Error::UnknownMetric(s.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_round_trip() {
        for m in Metric::ALL {
            assert_eq!(m.id().parse::<Metric>().unwrap(), m);
        }
    }

    #[test]
    fn aliases_and_lists() {
        let list = Metric::parse_list("connection_time,action_count, progression").unwrap();
        assert_eq!(list, vec![Metric::ConnectionTime, Metric::ActionCount, Metric::Progression]);
        assert!(matches!("nope".parse::<Metric>(), Err(Error::UnknownMetric(_))));
    }
}
