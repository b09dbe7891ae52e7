//! Interval scheduling of pipelines.
//!
//! The scheduler is clock-agnostic: callers feed it the current time and it
//! returns which pipelines are due. A pipeline that is still running when its
//! next tick comes up gets a skipped entry instead of a second run.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::Timestamp;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("pipeline `{0}` is scheduled twice")]
    DuplicateName(String),
    #[error("pipeline `{0}` needs an interval of at least one second")]
    ZeroInterval(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fire {
    pub pipeline: String,
    pub at: Timestamp,
    pub skipped: bool,
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    interval_s: i64,
    next_at: Timestamp,
}

#[derive(Clone, Debug, Default)]
pub struct Scheduler {
    entries: Vec<Entry>,
}

impl Scheduler {
    /// Schedules `(name, interval)` pairs with their first run at `start`.
    pub fn new<'a>(
        pipelines: impl IntoIterator<Item = (&'a str, u64)>,
        start: Timestamp,
    ) -> Result<Self, ScheduleError> {
        let mut seen = BTreeSet::new();
        let mut entries = Vec::new();
        for (name, interval) in pipelines {
            if !seen.insert(name) {
                return Err(ScheduleError::DuplicateName(name.into()));
            }
            if interval == 0 {
                return Err(ScheduleError::ZeroInterval(name.into()));
            }
            entries.push(Entry { name: name.into(), interval_s: interval as i64, next_at: start });
        }
        Ok(Self { entries })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// Earliest pending tick across all pipelines.
    pub fn next_due(&self) -> Option<Timestamp> {
        self.entries.iter().map(|e| e.next_at).min()
    }

    /// All ticks at or before `now`, in time order. `running` says whether a
    /// pipeline's previous run is still in progress at a given tick.
    pub fn poll(&mut self, now: Timestamp, mut running: impl FnMut(&str, Timestamp) -> bool) -> Vec<Fire> {
        let mut fires = Vec::new();
        while let Some(at) = self.next_due().filter(|t| *t <= now) {
            for e in self.entries.iter_mut().filter(|e| e.next_at == at) {
                let skipped = running(&e.name, at);
                fires.push(Fire { pipeline: e.name.clone(), at, skipped });
                e.next_at += e.interval_s;
            }
        }
        fires
    }

    /// Replays the schedule on a virtual clock over `[0, horizon)`, where a
    /// run started at `t` occupies its pipeline until `t + duration(name, t)`.
    pub fn simulate(
        mut self,
        horizon: Timestamp,
        mut duration: impl FnMut(&str, Timestamp) -> i64,
    ) -> Vec<Fire> {
        let mut busy_until: std::collections::HashMap<String, Timestamp> = Default::default();
        let mut fires = Vec::new();
        while let Some(at) = self.next_due().filter(|t| *t < horizon) {
            for f in self.poll(at, |name, t| busy_until.get(name).is_some_and(|b| *b > t)) {
                if !f.skipped {
                    busy_until.insert(f.pipeline.clone(), f.at + duration(&f.pipeline, f.at));
                }
                fires.push(f);
            }
        }
        fires
    }
}
