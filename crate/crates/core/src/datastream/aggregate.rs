use serde::{Deserialize, Serialize};

use crate::Timestamp;

/// Moments of the numeric datapoints that fell into one bucket.
///
/// Field names on the wire are abbreviated: `c` count, `s` sum, `ss` sum of
/// squares, `m` mean, `l` minimum, `u` maximum, `d` standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateBucket {
    #[serde(rename = "t")]
    pub ts: Timestamp,
    #[serde(rename = "c")]
    pub count: u64,
    #[serde(rename = "s")]
    pub sum: f64,
    #[serde(rename = "ss")]
    pub sum_squares: f64,
    #[serde(rename = "m")]
    pub mean: f64,
    #[serde(rename = "l")]
    pub min: f64,
    #[serde(rename = "u")]
    pub max: f64,
    #[serde(rename = "d")]
    pub stddev: f64,
}

/// Running accumulator for [`AggregateBucket`].
///
/// The deviation is tracked with Welford's update rather than derived from
/// `sum_squares`, which cancels badly when the spread is small next to the
/// mean.
#[derive(Clone, Copy, Debug)]
pub struct Moments {
    count: u64,
    sum: f64,
    sum_squares: f64,
    min: f64,
    max: f64,
    running_mean: f64,
    /// Sum of squared deviations from the running mean.
    m2: f64,
}

impl Default for Moments {
    fn default() -> Self {
        Self {
            count: 0,
            sum: 0.0,
            sum_squares: 0.0,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            running_mean: 0.0,
            m2: 0.0,
        }
    }
}

impl Moments {
    pub fn push(&mut self, v: f64) {
        self.count += 1;
        self.sum += v;
        self.sum_squares += v * v;
        self.min = self.min.min(v);
        self.max = self.max.max(v);
        let delta = v - self.running_mean;
        self.running_mean += delta / self.count as f64;
        self.m2 += delta * (v - self.running_mean);
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Closes the bucket; the deviation is the population one.
    pub fn finish(&self, ts: Timestamp) -> Option<AggregateBucket> {
        if self.count == 0 {
            return None;
        }
        let n = self.count as f64;
        Some(AggregateBucket {
            ts,
            count: self.count,
            sum: self.sum,
            sum_squares: self.sum_squares,
            mean: self.sum / n,
            min: self.min,
            max: self.max,
            stddev: (self.m2 / n).max(0.0).sqrt(),
        })
    }
}

impl FromIterator<f64> for Moments {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut m = Moments::default();
        for v in iter {
            m.push(v);
        }
        m
    }
}
