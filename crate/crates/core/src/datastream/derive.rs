//! Streams computed from other streams.
//!
//! Operators are incremental state machines. Each one only emits a point
//! once every input that could still influence it has been seen, which is
//! tracked through each source's `complete_through` watermark: the greatest
//! timestamp after which no earlier point can be appended. Because decisions
//! never need to be revisited, feeding points one at a time produces the same
//! derived series as feeding the complete history at once.

use std::collections::BTreeMap;
use std::ops::Bound::{Excluded, Included, Unbounded};

use serde::{Deserialize, Serialize};

use super::{Granularity, StreamId, Value};
use crate::Timestamp;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operator {
    /// Emits an event whenever a monotonic value (e.g. uptime) decreases.
    Reset,
    /// Per-second rate of a counter, null across reset events.
    CounterDerivative,
    /// Per-bucket sum of several streams.
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivedSpec {
    pub operator: Operator,
    pub sources: Vec<StreamId>,
    /// Largest value the counter can hold before wrapping.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_value: Option<u64>,
}

impl DerivedSpec {
    pub fn reset(uptime: StreamId) -> Self {
        Self { operator: Operator::Reset, sources: vec![uptime], max_value: None }
    }

    pub fn counter_derivative(counter: StreamId, resets: StreamId, max_value: u64) -> Self {
        Self {
            operator: Operator::CounterDerivative,
            sources: vec![counter, resets],
            max_value: Some(max_value),
        }
    }

    pub fn sum(sources: Vec<StreamId>) -> Self {
        Self { operator: Operator::Sum, sources, max_value: None }
    }
}

/// Read-only view of a source stream handed to an operator.
pub(crate) struct SourceView<'a> {
    pub points: &'a BTreeMap<Timestamp, Value>,
    pub complete_through: Option<Timestamp>,
}

#[derive(Clone, Debug, Default)]
pub(crate) enum OperatorState {
    #[default]
    Fresh,
    Reset {
        cursor: Option<Timestamp>,
        last: Option<f64>,
    },
    Counter {
        cursor: Option<Timestamp>,
        prev: Option<(Timestamp, f64)>,
    },
    Sum {
        next_bucket: Option<Timestamp>,
    },
}

/// Output of one operator step.
pub(crate) struct Step {
    pub points: Vec<(Timestamp, Value)>,
    pub complete_through: Option<Timestamp>,
}

fn after(cursor: Option<Timestamp>) -> std::ops::Bound<Timestamp> {
    cursor.map_or(Unbounded, Excluded)
}

pub(crate) fn step_reset(state: &mut OperatorState, source: &SourceView<'_>) -> Step {
    if matches!(state, OperatorState::Fresh) {
        *state = OperatorState::Reset { cursor: None, last: None };
    }
    let OperatorState::Reset { cursor, last } = state else {
        unreachable!("reset operator with foreign state");
    };
    let mut points = Vec::new();
    if let Some(limit) = source.complete_through {
        for (&ts, value) in source.points.range((after(*cursor), Included(limit))) {
            *cursor = Some(ts);
            let Some(v) = value.as_number() else { continue };
            if let Some(prev) = *last {
                if v < prev {
                    points.push((ts, Value::Number(1.0)));
                }
            }
            *last = Some(v);
        }
    }
    Step { points, complete_through: source.complete_through }
}

/// Rate between consecutive counter samples `(t0, v0)`, `(t1, v1)`:
/// null if a reset event lies in `(t0, t1]`, the plain difference quotient
/// if the counter grew, and `(max_value - v0 + v1) / (t1 - t0)` otherwise
/// (the decrease is classified as a wrap).
pub(crate) fn step_counter(
    state: &mut OperatorState,
    counter: &SourceView<'_>,
    resets: &SourceView<'_>,
    max_value: f64,
) -> Step {
    if matches!(state, OperatorState::Fresh) {
        *state = OperatorState::Counter { cursor: None, prev: None };
    }
    let OperatorState::Counter { cursor, prev } = state else {
        unreachable!("counter operator with foreign state");
    };
    let limit = match (counter.complete_through, resets.complete_through) {
        (Some(a), Some(b)) => Some(a.min(b)),
        _ => None,
    };
    let mut points = Vec::new();
    if let Some(limit) = limit {
        for (&t1, value) in counter.points.range((after(*cursor), Included(limit))) {
            *cursor = Some(t1);
            let Some(v1) = value.as_number() else { continue };
            if let Some((t0, v0)) = *prev {
                let reset = resets
                    .points
                    .range((Excluded(t0), Included(t1)))
                    .any(|(_, ev)| !ev.is_null());
                let rate = if reset {
                    Value::Null
                } else {
                    let dt = (t1 - t0) as f64;
                    let delta = if v1 >= v0 { v1 - v0 } else { max_value - v0 + v1 };
                    Value::Number(delta / dt)
                };
                points.push((t1, rate));
            }
            *prev = Some((t1, v1));
        }
    }
    Step { points, complete_through: limit }
}

/// For every bucket at `granularity` in which some source has a point, emits
/// the sum of each source's first value in that bucket at the bucket start.
/// If a source has no point (or a null one) there, the bucket is null.
pub(crate) fn step_sum(
    state: &mut OperatorState,
    sources: &[SourceView<'_>],
    granularity: Granularity,
) -> Step {
    if matches!(state, OperatorState::Fresh) {
        *state = OperatorState::Sum { next_bucket: None };
    }
    let OperatorState::Sum { next_bucket } = state else {
        unreachable!("sum operator with foreign state");
    };
    let width = granularity.seconds();
    let mut points = Vec::new();
    loop {
        let lower = next_bucket.map_or(Unbounded, Included);
        let candidate = sources
            .iter()
            .filter_map(|s| s.points.range((lower, Unbounded)).next().map(|(ts, _)| *ts))
            .min()
            .map(|ts| granularity.bucket_start(ts));
        let Some(bucket) = candidate else { break };
        let end = bucket + width;

        let firsts: Vec<Option<&Value>> = sources
            .iter()
            .map(|s| s.points.range(bucket..end).next().map(|(_, v)| v))
            .collect();
        let value = if firsts.iter().all(Option::is_some) {
            firsts
                .iter()
                .map(|v| v.and_then(Value::as_number))
                .sum::<Option<f64>>()
                .map_or(Value::Null, Value::Number)
        } else if sources
            .iter()
            .zip(&firsts)
            .filter(|(_, first)| first.is_none())
            .all(|(s, _)| s.complete_through.is_some_and(|ct| ct >= end - 1))
        {
            Value::Null
        } else {
            break;
        };
        points.push((bucket, value));
        *next_bucket = Some(end);
    }
    Step { points, complete_through: next_bucket.map(|n| n - 1) }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(points: &[(Timestamp, f64)]) -> BTreeMap<Timestamp, Value> {
        points.iter().map(|&(t, v)| (t, Value::Number(v))).collect()
    }

    fn view(points: &BTreeMap<Timestamp, Value>) -> SourceView<'_> {
        SourceView { points, complete_through: points.keys().next_back().copied() }
    }

    #[test]
    fn reset_fires_on_decrease_only() {
        let up = series(&[(0, 10.0), (10, 20.0), (20, 30.0), (30, 5.0)]);
        let mut st = OperatorState::default();
        let out = step_reset(&mut st, &view(&up));
        assert_eq!(out.points, vec![(30, Value::Number(1.0))]);
    }

    #[test]
    fn counter_wrap_rate() {
        let c = series(&[(0, 212.0), (10, 37.0)]);
        let r = BTreeMap::new();
        let rv = SourceView { points: &r, complete_through: Some(10) };
        let mut st = OperatorState::default();
        let out = step_counter(&mut st, &view(&c), &rv, 255.0);
        assert_eq!(out.points, vec![(10, Value::Number(8.0))]);
    }

    #[test]
    fn counter_waits_for_reset_watermark() {
        let c = series(&[(0, 0.0), (10, 50.0)]);
        let r = BTreeMap::new();
        let mut st = OperatorState::default();
        let lagging = SourceView { points: &r, complete_through: Some(5) };
        assert!(step_counter(&mut st, &view(&c), &lagging, 255.0).points.is_empty());
        let caught_up = SourceView { points: &r, complete_through: Some(10) };
        let out = step_counter(&mut st, &view(&c), &caught_up, 255.0);
        assert_eq!(out.points, vec![(10, Value::Number(5.0))]);
    }

    #[test]
    fn sum_needs_every_source() {
        let a = series(&[(0, 1.0), (10, 1.0)]);
        let b = series(&[(0, 2.0), (20, 2.0)]);
        let mut st = OperatorState::default();
        let out = step_sum(&mut st, &[view(&a), view(&b)], Granularity::Seconds10);
        assert_eq!(
            out.points,
            vec![(0, Value::Number(3.0)), (10, Value::Null)],
            "bucket 20 still open for `a`"
        );
    }
}
