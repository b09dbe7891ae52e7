//! Downsampling and derived streams against recomputation from raw points.

use std::collections::BTreeMap;

use meshwatch_core::datastream::{tags, AggregateBucket, Datapoint, Datastream, Granularity, Series, Tags, Value, ValueType};
use meshwatch_core::Timestamp;
use proptest::prelude::*;

const REL: f64 = 1e-9;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= REL * a.abs().max(b.abs()).max(1.0)
}

fn series() -> impl Strategy<Value = Vec<(Timestamp, f64)>> {
    prop::collection::vec((1i64..900, -1e6f64..1e6), 1..400).prop_map(|steps| {
        let mut t = 1_700_000_000;
        steps
            .into_iter()
            .map(|(dt, v)| {
                t += dt;
                (t, v)
            })
            .collect()
    })
}

fn oracle(points: &[(Timestamp, f64)], g: Granularity) -> Vec<(Timestamp, Vec<f64>)> {
    let watermark = points.last().unwrap().0;
    let mut groups: BTreeMap<Timestamp, Vec<f64>> = BTreeMap::new();
    for &(t, v) in points {
        groups.entry(g.bucket_start(t)).or_default().push(v);
    }
    // Only buckets that can no longer receive points are aggregated.
    groups.into_iter().filter(|(b, _)| b + g.seconds() <= watermark + 1).collect()
}

fn check_bucket(got: &AggregateBucket, ts: Timestamp, values: &[f64]) -> Result<(), TestCaseError> {
    let n = values.len() as f64;
    let sum: f64 = values.iter().sum();
    let ss: f64 = values.iter().map(|v| v * v).sum();
    let mean = sum / n;
    let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    prop_assert_eq!(got.ts, ts);
    prop_assert_eq!(got.count, values.len() as u64);
    prop_assert_eq!(got.sum, sum);
    prop_assert_eq!(got.min, values.iter().copied().fold(f64::INFINITY, f64::min));
    prop_assert_eq!(got.max, values.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    prop_assert!(close(got.sum_squares, ss), "ss {} vs {}", got.sum_squares, ss);
    prop_assert!(close(got.mean, mean), "mean {} vs {}", got.mean, mean);
    prop_assert!(close(got.stddev, variance.sqrt()), "stddev {} vs {}", got.stddev, variance.sqrt());
    // Moment consistency; the raw second moment carries cancellation error.
    let var_scale = (ss / n).max(1.0);
    prop_assert!(close(got.count as f64 * got.mean, got.sum));
    prop_assert!((got.stddev.powi(2) + got.mean.powi(2) - got.sum_squares / n).abs() <= REL * var_scale);
    prop_assert!(got.min <= got.mean + REL * got.mean.abs() && got.mean <= got.max + REL * got.mean.abs());
    Ok(())
}

fn buckets(store: &Datastream, id: u64, g: Granularity) -> Vec<AggregateBucket> {
    match store.query(id, g, i64::MIN, i64::MAX).unwrap() {
        Series::Buckets(b) => b,
        Series::Points(_) => panic!("numeric streams return buckets"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn buckets_equal_recomputation(points in series(), checkpoints in prop::collection::vec(any::<prop::sample::Index>(), 0..5)) {
        let store = Datastream::new();
        let id = store.ensure_stream(tags([("m", "x")]), ValueType::Numeric, Granularity::Seconds10, None).unwrap();
        let cuts: Vec<usize> = checkpoints.iter().map(|i| i.index(points.len())).collect();
        for (i, &(t, v)) in points.iter().enumerate() {
            store.append(id, t, v).unwrap();
            // Downsampling part way must not change the final buckets.
            if cuts.contains(&i) {
                store.downsample(id, t).unwrap();
            }
        }
        store.downsample(id, i64::MAX).unwrap();
        for g in Granularity::Seconds10.coarser() {
            let want = oracle(&points, g);
            let got = buckets(&store, id, g);
            prop_assert_eq!(got.len(), want.len(), "{:?}", g);
            for (b, (ts, values)) in got.iter().zip(&want) {
                check_bucket(b, *ts, values)?;
            }
        }
        let raw: Vec<(Timestamp, f64)> =
            store.points(id).unwrap().iter().map(|p| (p.ts, p.value.as_number().unwrap())).collect();
        prop_assert_eq!(raw, points);
    }
}

/// Uptime and counter samples of one simulated interface, with the indices
/// of injected reboots.
#[derive(Clone, Debug)]
struct Trace {
    samples: Vec<(Timestamp, f64, f64)>,
    reboots: Vec<usize>,
    max: u64,
}

fn trace() -> impl Strategy<Value = Trace> {
    let bits = prop::sample::select(vec![8u32, 16, 32]);
    (bits, prop::collection::vec((1i64..40, any::<bool>(), 0.0f64..1.0, 0u64..5000), 2..200)).prop_map(|(bits, steps)| {
        let max = (1u64 << bits) - 1;
        let modulus = 1u128 << bits;
        let (mut t, mut uptime, mut counter) = (0i64, 1000.0f64, 0u128);
        let mut samples = Vec::new();
        let mut reboots = Vec::new();
        for (i, (dt, reboot, frac, inc)) in steps.into_iter().enumerate() {
            t += dt * 10;
            if reboot && i > 0 && i % 7 == 0 {
                uptime = (uptime * frac).floor().min(uptime - 1.0).max(0.0);
                counter = 0;
                reboots.push(i);
            } else {
                uptime += (dt * 10) as f64;
                counter = (counter + u128::from(inc)) % modulus;
            }
            samples.push((t, uptime, counter as f64));
        }
        Trace { samples, reboots, max }
    })
}

struct Chain {
    uptime: u64,
    counter: u64,
    reset: u64,
    rate: u64,
}

fn chain(store: &Datastream, max: u64) -> Chain {
    let g = Granularity::Seconds10;
    let uptime = store.ensure_stream(tags([("metric", "uptime")]), ValueType::Numeric, g, None).unwrap();
    let counter = store.ensure_stream(tags([("metric", "tx_bytes")]), ValueType::Numeric, g, None).unwrap();
    let reset = store.derive_reset(tags([("metric", "reset")]), uptime).unwrap();
    let rate = store.derive_counter(tags([("metric", "tx_rate")]), counter, reset, max).unwrap();
    Chain { uptime, counter, reset, rate }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn derivation_chain_replays_exactly(tr in trace(), interleave in any::<bool>()) {
        // Streaming: derived streams exist before the first sample.
        let live = Datastream::new();
        let c = chain(&live, tr.max);
        for &(t, u, v) in &tr.samples {
            if interleave {
                live.append(c.counter, t, v).unwrap();
                live.append(c.uptime, t, u).unwrap();
            } else {
                live.append(c.uptime, t, u).unwrap();
                live.append(c.counter, t, v).unwrap();
            }
        }

        // Batch: raw series first, derivations created afterwards.
        let batch = Datastream::new();
        let g = Granularity::Seconds10;
        let up = batch.ensure_stream(tags([("metric", "uptime")]), ValueType::Numeric, g, None).unwrap();
        let ctr = batch.ensure_stream(tags([("metric", "tx_bytes")]), ValueType::Numeric, g, None).unwrap();
        for &(t, u, v) in &tr.samples {
            batch.append(up, t, u).unwrap();
            batch.append(ctr, t, v).unwrap();
        }
        let reset = batch.derive_reset(tags([("metric", "reset")]), up).unwrap();
        let rate = batch.derive_counter(tags([("metric", "tx_rate")]), ctr, reset, tr.max).unwrap();
        prop_assert_eq!(live.points(c.reset).unwrap(), batch.points(reset).unwrap());
        prop_assert_eq!(live.points(c.rate).unwrap(), batch.points(rate).unwrap());

        // Oracle from the generator's own knowledge.
        let events: Vec<Timestamp> = live.points(c.reset).unwrap().iter().map(|p| p.ts).collect();
        let injected: Vec<Timestamp> = tr.reboots.iter().map(|&i| tr.samples[i].0).collect();
        prop_assert_eq!(events, injected);
        let mut want = Vec::new();
        for w in tr.samples.windows(2) {
            let ((t0, _, v0), (t1, _, v1)) = (w[0], w[1]);
            let value = if tr.reboots.iter().any(|&i| tr.samples[i].0 == t1) {
                Value::Null
            } else {
                let delta = if v1 >= v0 { v1 - v0 } else { tr.max as f64 - v0 + v1 };
                Value::Number(delta / (t1 - t0) as f64)
            };
            want.push(Datapoint { ts: t1, value });
        }
        prop_assert_eq!(live.points(c.rate).unwrap(), want);
    }

    #[test]
    fn sums_add_the_first_sample_per_bucket(a in prop::collection::btree_map(0i64..60, -100i32..100, 0..40),
                                            b in prop::collection::btree_map(0i64..60, -100i32..100, 0..40)) {
        let store = Datastream::new();
        let g = Granularity::Seconds10;
        let sa = store.ensure_stream(tags([("s", "a")]), ValueType::Numeric, g, None).unwrap();
        let sb = store.ensure_stream(tags([("s", "b")]), ValueType::Numeric, g, None).unwrap();
        let sum = store.derive_sum(tags([("s", "sum")]), vec![sa, sb]).unwrap();
        // Interleave appends in global time order, five seconds apart.
        let mut merged: Vec<(Timestamp, u64, f64)> = a.iter().map(|(&k, &v)| (k * 5, sa, f64::from(v))).collect();
        merged.extend(b.iter().map(|(&k, &v)| (k * 5, sb, f64::from(v))));
        merged.sort_by_key(|&(t, s, _)| (t, s));
        for (t, s, v) in merged {
            store.append(s, t, v).unwrap();
        }

        let first = |m: &BTreeMap<i64, i32>, bucket: i64| m.iter().find(|(k, _)| *k * 5 / 10 * 10 == bucket).map(|(_, v)| f64::from(*v));
        let last = |m: &BTreeMap<i64, i32>| m.keys().next_back().map(|k| k * 5);
        let mut want = Vec::new();
        let starts: std::collections::BTreeSet<i64> = a.keys().chain(b.keys()).map(|k| k * 5 / 10 * 10).collect();
        for bucket in starts {
            let value = match (first(&a, bucket), first(&b, bucket)) {
                (Some(x), Some(y)) => Value::Number(x + y),
                (x, y) => {
                    // A missing source only settles once it has moved past the bucket.
                    let settled = |present: Option<f64>, m: &BTreeMap<i64, i32>| present.is_some() || last(m).is_some_and(|l| l >= bucket + 9);
                    if settled(x, &a) && settled(y, &b) { Value::Null } else { break }
                }
            };
            want.push(Datapoint { ts: bucket, value });
        }
        prop_assert_eq!(store.points(sum).unwrap(), want);
    }
}

fn tag_sets() -> impl Strategy<Value = Vec<Tags>> {
    let pair = (prop::sample::select(vec!["node", "metric", "interface", "site"]), 0u8..4);
    prop::collection::vec(prop::collection::btree_map(pair.0, pair.1, 1..4), 1..120).prop_map(|sets| {
        sets.into_iter().map(|m| m.into_iter().map(|(k, v)| (k.to_string(), format!("v{v}"))).collect()).collect()
    })
}

proptest! {
    #[test]
    fn tag_queries_equal_a_linear_scan(sets in tag_sets(), queries in prop::collection::vec(tag_sets(), 1..4)) {
        let store = Datastream::new();
        let mut ids: BTreeMap<Tags, u64> = BTreeMap::new();
        for t in &sets {
            let id = store.ensure_stream(t.clone(), ValueType::Numeric, Granularity::Minutes1, None).unwrap();
            ids.insert(t.clone(), id);
        }
        for q in queries.into_iter().flatten().chain([Tags::new()]) {
            let got: Vec<u64> = store.find(&q).iter().map(|m| m.id).collect();
            let mut want: Vec<u64> =
                ids.iter().filter(|(t, _)| q.iter().all(|(k, v)| t.get(k) == Some(v))).map(|(_, &id)| id).collect();
            want.sort_unstable();
            prop_assert_eq!(got, want);
        }
    }

    #[test]
    fn export_import_round_trips(tr in trace()) {
        let store = Datastream::new();
        let c = chain(&store, tr.max);
        for &(t, u, v) in &tr.samples {
            store.append(c.uptime, t, u).unwrap();
            store.append(c.counter, t, v).unwrap();
        }
        let mut out = Vec::new();
        store.export_jsonl(&mut out).unwrap();
        let back = Datastream::import_jsonl(out.as_slice()).unwrap();
        for id in [c.uptime, c.counter, c.reset, c.rate] {
            prop_assert_eq!(back.points(id).unwrap(), store.points(id).unwrap());
            prop_assert_eq!(back.meta(id).unwrap(), store.meta(id).unwrap());
        }
    }
}
