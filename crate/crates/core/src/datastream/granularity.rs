use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::Timestamp;

/// A bucket width on the downsampling ladder, finest first.
///
/// Every width is an integer multiple of the previous one and buckets are
/// aligned to the Unix epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Granularity {
    #[serde(rename = "10s")]
    Seconds10,
    #[serde(rename = "1min")]
    Minutes1,
    #[serde(rename = "5min")]
    Minutes5,
    #[serde(rename = "30min")]
    Minutes30,
    #[serde(rename = "3h")]
    Hours3,
    #[serde(rename = "1d")]
    Days1,
}

impl Granularity {
    pub const LADDER: [Granularity; 6] = [
        Granularity::Seconds10,
        Granularity::Minutes1,
        Granularity::Minutes5,
        Granularity::Minutes30,
        Granularity::Hours3,
        Granularity::Days1,
    ];

    pub const fn seconds(self) -> i64 {
        match self {
            Granularity::Seconds10 => 10,
            Granularity::Minutes1 => 60,
            Granularity::Minutes5 => 300,
            Granularity::Minutes30 => 1800,
            Granularity::Hours3 => 10_800,
            Granularity::Days1 => 86_400,
        }
    }

    /// Start of the bucket containing `ts`.
    pub fn bucket_start(self, ts: Timestamp) -> Timestamp {
        let width = self.seconds();
        ts.div_euclid(width) * width
    }

    /// Granularities strictly coarser than `self`, finest first.
    pub fn coarser(self) -> impl Iterator<Item = Granularity> {
        Self::LADDER.into_iter().filter(move |g| *g > self)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Seconds10 => "10s",
            Granularity::Minutes1 => "1min",
            Granularity::Minutes5 => "5min",
            Granularity::Minutes30 => "30min",
            Granularity::Hours3 => "3h",
            Granularity::Days1 => "1d",
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("unknown granularity `{0}`")]
pub struct ParseGranularityError(String);

impl FromStr for Granularity {
    type Err = ParseGranularityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::LADDER
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| ParseGranularityError(s.to_string()))
    }
}
