//! Derived quantities: the latency/bandwidth cost model, communication to
//! work ratios, effective bandwidth, update rate, speedup, efficiency and
//! population standard deviation.
//!
//! Everything is SI internally (seconds, bytes). Reported bandwidths use
//! MBytes = 10^6 bytes.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BYTES_PER_MB: f64 = 1e6;
const BYTES_PER_DOUBLE: f64 = 8.0;

/// Point-to-point message cost `t = l + m/B`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModelParams {
    /// Latency in seconds.
    pub latency_s: f64,
    /// Bandwidth in MBytes/s.
    pub bandwidth_mbps: f64,
}

impl CostModelParams {
    pub fn new(latency_s: f64, bandwidth_mbps: f64) -> Result<Self> {
        if !(latency_s >= 0.0) || !(bandwidth_mbps > 0.0) || !latency_s.is_finite() {
            return Err(Error::Config(format!(
                "cost model needs latency >= 0 and bandwidth > 0, got l={latency_s} B={bandwidth_mbps}"
            )));
        }
        Ok(Self {
            latency_s,
            bandwidth_mbps,
        })
    }

    pub fn message_cost(&self, bytes: usize) -> f64 {
        self.latency_s + bytes as f64 / (self.bandwidth_mbps * BYTES_PER_MB)
    }

    pub fn message_duration(&self, bytes: usize) -> Duration {
        Duration::from_secs_f64(self.message_cost(bytes))
    }
}

pub fn message_cost(p: &CostModelParams, bytes: usize) -> f64 {
    p.message_cost(bytes)
}

/// Serial cost of a sequence of messages: `sum(l + m_i/B)`.
pub fn total_cost(p: &CostModelParams, message_sizes: &[usize]) -> f64 {
    message_sizes.iter().map(|&m| p.message_cost(m)).sum()
}

/// `(a+2)(b+2)(c+2) - abc`: the number of halo sites around an `a x b x c` box.
pub fn halo_sites(dims: [usize; 3]) -> usize {
    let [a, b, c] = dims;
    (a + 2) * (b + 2) * (c + 2) - a * b * c
}

pub fn comm_work_ratio_cubic(l: f64) -> f64 {
    (6.0 * l * l + 12.0 * l + 8.0) / (l * l * l)
}

pub fn comm_work_ratio(dims: [f64; 3]) -> f64 {
    let [a, b, c] = dims;
    (2.0 * b * c + 2.0 * a * c + 2.0 * a * b + 4.0 * a + 4.0 * b + 4.0 * c + 8.0) / (a * b * c)
}

/// Halo bytes moved per exchange divided by the exchange time, in MBytes/s.
pub fn effective_bandwidth(local_dims: [usize; 3], m: usize, t_exchange: f64) -> f64 {
    halo_bytes(local_dims, m) as f64 / t_exchange / BYTES_PER_MB
}

pub fn halo_bytes(local_dims: [usize; 3], m: usize) -> usize {
    halo_sites(local_dims) * m * BYTES_PER_DOUBLE as usize
}

/// Interior sites per second of exchange time.
pub fn updates_per_core(local_dims: [usize; 3], t_exchange: f64) -> f64 {
    local_dims.iter().product::<usize>() as f64 / t_exchange
}

/// Which T1 a speedup series is normalised by.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Baseline {
    /// Each series divides by its own smallest-p time.
    PerVersion,
    /// Every series divides by one shared reference time.
    Common(f64),
}

/// The shared baseline: the reference series' time at its smallest p.
pub fn common_baseline(reference: &BTreeMap<usize, f64>) -> Result<Baseline> {
    reference
        .values()
        .next()
        .map(|&t| Baseline::Common(t))
        .ok_or_else(|| Error::Config("reference series is empty; no base time".into()))
}

pub fn speedup(times_by_p: &BTreeMap<usize, f64>, base: Baseline) -> Result<BTreeMap<usize, f64>> {
    let t1 = match base {
        Baseline::PerVersion => *times_by_p
            .values()
            .next()
            .ok_or_else(|| Error::Config("speedup of an empty series".into()))?,
        Baseline::Common(t) => t,
    };
    if !(t1 > 0.0) {
        return Err(Error::Config(format!("base time must be positive, got {t1}")));
    }
    Ok(times_by_p.iter().map(|(&p, &t)| (p, t1 / t)).collect())
}

/// `E(p) = S(p) / (p / base_p)`.
pub fn efficiency(speedups: &BTreeMap<usize, f64>, base_p: usize) -> BTreeMap<usize, f64> {
    speedups
        .iter()
        .map(|(&p, &s)| (p, s / (p as f64 / base_p as f64)))
        .collect()
}

pub fn mean(samples: &[f64]) -> f64 {
    samples.iter().sum::<f64>() / samples.len() as f64
}

/// Population standard deviation (divides by N).
pub fn stddev(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    let mu = mean(samples);
    let var = samples.iter().map(|o| (o - mu) * (o - mu)).sum::<f64>() / samples.len() as f64;
    var.sqrt()
}

/// Mean and sigma of a quantity derived from each sample; the derivation is
/// applied per sample before aggregating.
pub fn summarize_derived<F: Fn(f64) -> f64>(samples: &[f64], derive: F) -> (f64, f64) {
    let derived: Vec<f64> = samples.iter().map(|&s| derive(s)).collect();
    (mean(&derived), stddev(&derived))
}

/// One benchmark observation set: a configuration and its per-repetition times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub strategy: String,
    pub proc_dims: [usize; 3],
    pub local_dims: [usize; 3],
    pub m: usize,
    pub iterations: usize,
    /// Wall time of `iterations` exchanges, one entry per repetition.
    pub times: Vec<f64>,
}

impl BenchRecord {
    pub fn contexts(&self) -> usize {
        self.proc_dims.iter().product()
    }

    pub fn per_exchange(&self) -> Vec<f64> {
        self.times.iter().map(|t| t / self.iterations as f64).collect()
    }

    pub fn mean_time(&self) -> f64 {
        mean(&self.times)
    }

    pub fn sigma_time(&self) -> f64 {
        stddev(&self.times)
    }

    /// (mean, sigma) of B_eff with the division done per repetition.
    pub fn effective_bandwidth(&self) -> (f64, f64) {
        let n = self.iterations as f64;
        summarize_derived(&self.times, |t| effective_bandwidth(self.local_dims, self.m, t / n))
    }

    pub fn updates_per_core(&self) -> (f64, f64) {
        let n = self.iterations as f64;
        summarize_derived(&self.times, |t| updates_per_core(self.local_dims, t / n))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn series(pairs: &[(usize, f64)]) -> BTreeMap<usize, f64> {
        pairs.iter().copied().collect()
    }

    #[test]
    fn message_cost_examples() {
        let p = CostModelParams::new(0.0, 1.0).unwrap();
        assert_eq!(p.message_cost(1_000_000), 1.0);
        let p = CostModelParams::new(1e-6, 350.0).unwrap();
        assert!((p.message_cost(500_000) - (1e-6 + 0.5 / 350.0)).abs() < 1e-18);
        assert!((p.message_cost(500_000) - 1.4296e-3).abs() < 1e-7);
        assert_eq!(p.message_cost(0), 1e-6);
        assert!(CostModelParams::new(-1.0, 1.0).is_err());
        assert!(CostModelParams::new(0.0, 0.0).is_err());
    }

    #[test]
    fn total_cost_examples() {
        let p = CostModelParams::new(2e-5, 100.0).unwrap();
        assert_eq!(total_cost(&p, &[]), 0.0);
        assert_eq!(total_cost(&p, &[4096]), p.message_cost(4096));
        // 6 vs 26 messages with the same byte total.
        let six = vec![2600usize; 6];
        let twenty_six = vec![600usize; 26];
        assert_eq!(six.iter().sum::<usize>(), twenty_six.iter().sum::<usize>());
        let diff = total_cost(&p, &twenty_six) - total_cost(&p, &six);
        assert!((diff - 20.0 * p.latency_s).abs() < 1e-15);
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(comm_work_ratio_cubic(2.0), 7.0);
        for l in 1..=64 {
            let l = l as f64;
            assert_eq!(comm_work_ratio([l, l, l]), comm_work_ratio_cubic(l));
        }
        for x in (2..=56).step_by(2) {
            let x = x as f64;
            let general = comm_work_ratio([x, 1.5 * x, 2.0 * x]);
            // Faces are x*1.5x, x*2x and 1.5x*2x: 2*(1.5 + 2 + 3) = 13.
            let closed = (13.0 * x * x + 18.0 * x + 8.0) / (3.0 * x * x * x);
            assert!((general - closed).abs() <= 1e-12 * closed);
        }
    }

    #[test]
    fn noncubic_ratio_matches_enumerated_halo() {
        for x in (2..=20).step_by(2) {
            let d = [x, 3 * x / 2, 2 * x];
            let mut halo = 0usize;
            for i in 0..d[0] + 2 {
                for j in 0..d[1] + 2 {
                    for k in 0..d[2] + 2 {
                        let inside = (1..=d[0]).contains(&i) && (1..=d[1]).contains(&j) && (1..=d[2]).contains(&k);
                        halo += usize::from(!inside);
                    }
                }
            }
            let volume = (d[0] * d[1] * d[2]) as f64;
            let ratio = comm_work_ratio(d.map(|v| v as f64));
            assert!((ratio - halo as f64 / volume).abs() <= 1e-12 * ratio);
        }
    }

    #[test]
    fn ratio_strictly_decreasing() {
        let mut prev = f64::INFINITY;
        for l in 1..=128 {
            let r = comm_work_ratio_cubic(l as f64);
            assert!(r < prev);
            prev = r;
        }
    }

    #[test]
    fn bandwidth_examples() {
        assert_eq!(halo_sites([16, 16, 16]), 1736);
        assert_eq!(effective_bandwidth([16; 3], 19, 1.0), 0.263872);
        assert_eq!(effective_bandwidth([16; 3], 19, 2.0), 0.263872 / 2.0);
        assert_eq!(halo_sites([2, 3, 4]), 96);
    }

    #[test]
    fn update_examples() {
        assert!((updates_per_core([16; 3], 1e-3) - 4.096e6).abs() < 1e-6);
        assert_eq!(
            updates_per_core([32; 3], 1e-3) / updates_per_core([16; 3], 1e-3),
            8.0
        );
    }

    #[test]
    fn speedup_examples() {
        let ideal = series(&[(1, 8.0), (2, 4.0), (4, 2.0), (8, 1.0)]);
        let s = speedup(&ideal, Baseline::PerVersion).unwrap();
        assert_eq!(s, series(&[(1, 1.0), (2, 2.0), (4, 4.0), (8, 8.0)]));
        assert!(efficiency(&s, 1).values().all(|&e| e == 1.0));

        let flat = series(&[(1, 3.0), (2, 3.0), (4, 3.0)]);
        let s = speedup(&flat, Baseline::PerVersion).unwrap();
        assert!(s.values().all(|&v| v == 1.0));
        assert_eq!(efficiency(&s, 1), series(&[(1, 1.0), (2, 0.5), (4, 0.25)]));

        let a = series(&[(1, 10.0), (2, 6.0)]);
        let b = series(&[(1, 8.0), (2, 5.0)]);
        let base = common_baseline(&a).unwrap();
        assert_eq!(speedup(&b, base).unwrap()[&1], 1.25);

        let e = efficiency(&series(&[(24, 1.0), (48, 1.8)]), 24);
        assert!((e[&48] - 0.9).abs() < 1e-15);

        assert!(speedup(&BTreeMap::new(), Baseline::PerVersion).is_err());
        assert!(common_baseline(&BTreeMap::new()).is_err());
    }

    #[test]
    fn stddev_examples() {
        assert_eq!(stddev(&[3.0; 5]), 0.0);
        assert_eq!(stddev(&[1.0, 3.0]), 1.0);
        assert_eq!(stddev(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]), 2.0);
    }

    #[test]
    fn derived_then_sigma_differs_from_sigma_then_derived() {
        let rec = BenchRecord {
            strategy: "blocking".into(),
            proc_dims: [1, 1, 1],
            local_dims: [4, 4, 4],
            m: 19,
            iterations: 1,
            times: vec![1.0, 1.0, 4.0],
        };
        let (mean_b, sigma_b) = rec.effective_bandwidth();
        let bytes = halo_bytes([4; 3], 19) as f64 / 1e6;
        let per_rep = [bytes, bytes, bytes / 4.0];
        assert!((mean_b - mean(&per_rep)).abs() < 1e-15);
        assert!((sigma_b - stddev(&per_rep)).abs() < 1e-15);
        // The wrong order: B_eff of the mean time.
        let wrong = effective_bandwidth([4; 3], 19, rec.mean_time());
        assert!((wrong - mean_b).abs() > 1e-3 * mean_b);
    }

    proptest! {
        #[test]
        fn cost_difference_is_pure_latency(l in 0.0f64..1e-3, b in 1.0f64..1e4,
                                           total in 26usize..1_000_000, n in 6usize..64) {
            let p = CostModelParams::new(l, b).unwrap();
            let split = |k: usize| {
                let mut v = vec![total / k; k];
                v[0] += total % k;
                v
            };
            let diff = total_cost(&p, &split(n)) - total_cost(&p, &split(6));
            prop_assert!((diff - (n as f64 - 6.0) * l).abs() <= 1e-12);
        }

        #[test]
        fn bandwidth_inverts_to_halo_count(a in 1usize..40, b in 1usize..40, c in 1usize..40,
                                           m in 1usize..28, t in 1e-6f64..10.0) {
            let beff = effective_bandwidth([a, b, c], m, t);
            let sites = beff * t * 1e6 / (8.0 * m as f64);
            prop_assert!((sites - halo_sites([a, b, c]) as f64).abs() <= 1e-9 * sites);
        }

        #[test]
        fn common_baseline_ranks_like_runtime(ta in 0.1f64..100.0, tb in 0.1f64..100.0,
                                              t1 in 0.1f64..100.0) {
            let a = series(&[(24, t1), (48, ta)]);
            let b = series(&[(24, t1 * 0.9), (48, tb)]);
            let base = common_baseline(&a).unwrap();
            let sa = speedup(&a, base).unwrap()[&48];
            let sb = speedup(&b, base).unwrap()[&48];
            prop_assert!((sa / sb - tb / ta).abs() <= 1e-12 * (tb / ta));
        }
    }
}
