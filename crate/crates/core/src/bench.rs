//! Multi-rank orchestration: timed benchmark runs, the boundary-encoding
//! halo test, and the cross-strategy regression.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Case, Physics, RunConfig};
use crate::error::{Error, Result};
use crate::halo::{halo_source, HaloExchanger, Strategy};
use crate::lattice::{DistributionField, VelocitySet};
use crate::metrics::{effective_bandwidth, updates_per_core};
use crate::overlap::{step_serial, step_with_overlap, SyntheticWorkload};
use crate::topology::CartesianTopology;
use crate::transport::{run_ranks, TransportConfig};

/// One raw benchmark observation. Column names are the CSV header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub strategy: String,
    #[serde(rename = "Px")]
    pub px: usize,
    #[serde(rename = "Py")]
    pub py: usize,
    #[serde(rename = "Pz")]
    pub pz: usize,
    #[serde(rename = "Lx")]
    pub lx: usize,
    #[serde(rename = "Ly")]
    pub ly: usize,
    #[serde(rename = "Lz")]
    pub lz: usize,
    pub m: usize,
    pub rep: usize,
    pub iterations: usize,
    pub t_halo_total_s: f64,
    pub t_step_total_s: f64,
    pub bytes_sent: u64,
    pub messages_sent: u64,
    pub waits: u64,
    #[serde(rename = "B_eff_MBps")]
    pub b_eff_mbps: f64,
    pub updates_per_core: f64,
}

impl ResultRow {
    pub fn proc_dims(&self) -> [usize; 3] {
        [self.px, self.py, self.pz]
    }

    pub fn local_dims(&self) -> [usize; 3] {
        [self.lx, self.ly, self.lz]
    }

    pub fn contexts(&self) -> usize {
        self.px * self.py * self.pz
    }

    pub fn seconds_per_exchange(&self) -> f64 {
        self.t_halo_total_s / self.iterations as f64
    }

    /// The derived columns, recomputed from the raw ones.
    pub fn derived(&self) -> (f64, f64) {
        let t = self.seconds_per_exchange();
        (
            effective_bandwidth(self.local_dims(), self.m, t),
            updates_per_core(self.local_dims(), t),
        )
    }
}

/// Descriptive facts about a benchmark run, written next to the CSVs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub tau: f64,
    pub warmup: usize,
    pub iterations: usize,
    pub repetitions: usize,
    pub physics: String,
    pub overlap_enabled: bool,
    pub overlap_intensity: usize,
    /// "halo" when derived runtimes use the exchange timer, "step" otherwise.
    pub timing_scope: String,
    pub transport_model: Option<(f64, f64)>,
    pub periodic: [bool; 3],
    pub seed: u64,
    pub host_parallelism: usize,
    pub max_contexts: usize,
    /// More rank contexts than hardware threads: timings are not publishable.
    pub oversubscribed: bool,
    pub scaling_sweep: bool,
}

impl RunMetadata {
    pub fn from_config(cfg: &RunConfig, max_contexts: usize) -> Self {
        let host = std::thread::available_parallelism().map_or(1, |n| n.get());
        Self {
            tau: cfg.tau,
            warmup: cfg.warmup,
            iterations: cfg.iterations,
            repetitions: cfg.repetitions,
            physics: format!("{:?}", cfg.physics).to_lowercase(),
            overlap_enabled: cfg.overlap_enabled,
            overlap_intensity: cfg.overlap_intensity,
            timing_scope: if cfg.overlap_intensity > 0 || cfg.physics == Physics::Full {
                "step".into()
            } else {
                "halo".into()
            },
            transport_model: cfg.model.map(|m| (m.latency_s * 1e6, m.bandwidth_mbps)),
            periodic: cfg.periodic,
            seed: cfg.seed,
            host_parallelism: host,
            max_contexts,
            oversubscribed: max_contexts > host,
            scaling_sweep: cfg.sweep.is_scaling(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOutput {
    pub rows: Vec<ResultRow>,
    pub metadata: RunMetadata,
}

/// Deterministic per-rank initial field.
pub fn initial_field(
    vs: &VelocitySet,
    dims: [usize; 3],
    seed: u64,
    rank: usize,
) -> Result<DistributionField> {
    let mut f = DistributionField::new(dims, vs.m())?;
    let stream = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(rank as u64);
    f.fill_perturbed(vs, &mut ChaCha8Rng::seed_from_u64(stream))?;
    Ok(f)
}

/// A field of `m` arbitrary components seeded per rank. Used when no
/// velocity set is needed (halo-only runs with unusual `m`).
fn random_field(dims: [usize; 3], m: usize, seed: u64, rank: usize) -> Result<DistributionField> {
    use rand::Rng;
    let mut f = DistributionField::new(dims, m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((rank as u64) << 32));
    let sites: Vec<_> = f.interior_sites().collect();
    for s in sites {
        for v in f.site_mut(s) {
            *v = rng.gen_range(0.0..1.0);
        }
    }
    Ok(f)
}

struct RepTiming {
    halo: f64,
    step: f64,
    messages: u64,
    bytes: u64,
    waits: u64,
}

/// Runs every repetition of one case and strategy.
pub fn run_case(cfg: &RunConfig, case: Case, strategy: Strategy) -> Result<Vec<ResultRow>> {
    let topo = CartesianTopology::new(case.proc_dims, cfg.periodic)?;
    let vs = match cfg.physics {
        Physics::Full => Some(VelocitySet::with_count(cfg.m)?),
        Physics::None => None,
    };
    let intensity = cfg.overlap_intensity;
    let overlapped = cfg.overlap_enabled && strategy == Strategy::Nonblocking;
    let per_rank = run_ranks(topo.nranks(), cfg.transport(), |ep| {
        let rank = ep.rank();
        let mut field = match &vs {
            Some(vs) => initial_field(vs, case.local_dims, cfg.seed, rank)?,
            None => random_field(case.local_dims, cfg.m, cfg.seed, rank)?,
        };
        let mut ex = HaloExchanger::new(ep, &topo, case.local_dims, cfg.m)?;
        let mut work = SyntheticWorkload { intensity };
        let mut step = |ex: &mut HaloExchanger, field: &mut DistributionField| -> Result<f64> {
            if let Some(vs) = &vs {
                field.collide(vs, cfg.tau)?;
            }
            let t = Instant::now();
            if intensity > 0 {
                if overlapped {
                    step_with_overlap(ex, field, &mut work)?;
                } else if strategy == Strategy::Nonblocking {
                    step_serial(ex, field, &mut work)?;
                } else {
                    ex.exchange_blocking(field)?;
                    std::hint::black_box(crate::overlap::synthetic_workload(field, intensity));
                }
            } else {
                ex.exchange(strategy, field)?;
            }
            let halo = t.elapsed().as_secs_f64();
            if let Some(vs) = &vs {
                field.stream(vs)?;
            }
            Ok(halo)
        };
        let mut reps = Vec::with_capacity(cfg.repetitions);
        for _ in 0..cfg.repetitions {
            ex.barrier()?;
            for _ in 0..cfg.warmup {
                step(&mut ex, &mut field)?;
            }
            ex.barrier()?;
            let before = ex.stats();
            let t0 = Instant::now();
            let mut halo = 0.0;
            for _ in 0..cfg.iterations {
                halo += step(&mut ex, &mut field)?;
            }
            ex.barrier()?;
            let elapsed = t0.elapsed().as_secs_f64();
            let after = ex.stats();
            reps.push(RepTiming {
                halo,
                step: elapsed,
                messages: after.messages_sent - before.messages_sent,
                bytes: after.bytes_sent - before.bytes_sent,
                waits: after.barriers - before.barriers,
            });
        }
        Ok(reps)
    })?;

    let mut rows = Vec::with_capacity(cfg.repetitions);
    for rep in 0..cfg.repetitions {
        let ranks = per_rank.iter().map(|r| &r[rep]);
        let halo = ranks.clone().map(|r| r.halo).fold(0.0, f64::max);
        let step = ranks.clone().map(|r| r.step).fold(0.0, f64::max);
        let mut row = ResultRow {
            strategy: strategy.to_string(),
            px: case.proc_dims[0],
            py: case.proc_dims[1],
            pz: case.proc_dims[2],
            lx: case.local_dims[0],
            ly: case.local_dims[1],
            lz: case.local_dims[2],
            m: cfg.m,
            rep,
            iterations: cfg.iterations,
            t_halo_total_s: halo,
            t_step_total_s: step,
            bytes_sent: ranks.clone().map(|r| r.bytes).sum(),
            messages_sent: ranks.clone().map(|r| r.messages).sum(),
            waits: ranks.map(|r| r.waits).sum(),
            b_eff_mbps: 0.0,
            updates_per_core: 0.0,
        };
        (row.b_eff_mbps, row.updates_per_core) = row.derived();
        rows.push(row);
    }
    Ok(rows)
}

/// Runs the whole experiment matrix of a configuration.
pub fn run_benchmark(cfg: &RunConfig) -> Result<BenchOutput> {
    cfg.validate()?;
    let cases = cfg.cases()?;
    let max_contexts = cases
        .iter()
        .map(|c| c.proc_dims.iter().product())
        .max()
        .unwrap_or(1);
    let mut rows = Vec::new();
    for case in cases {
        for strategy in cfg.strategy.strategies() {
            rows.extend(run_case(cfg, case, strategy)?);
        }
    }
    Ok(BenchOutput {
        rows,
        metadata: RunMetadata::from_config(cfg, max_contexts),
    })
}

/// A field state evolved on every rank, in rank order.
#[derive(Debug, Clone)]
pub struct SimulationResult {
    pub fields: Vec<DistributionField>,
}

impl SimulationResult {
    pub fn total_mass(&self) -> f64 {
        self.fields.iter().map(DistributionField::interior_mass).sum()
    }

    pub fn total_momentum(&self, vs: &VelocitySet) -> [f64; 3] {
        let mut p = [0.0; 3];
        for f in &self.fields {
            let q = f.interior_momentum(vs);
            for k in 0..3 {
                p[k] += q[k];
            }
        }
        p
    }
}

/// Parameters of a full-physics run.
#[derive(Debug, Clone)]
pub struct SimulationSpec {
    pub topo: CartesianTopology,
    pub local_dims: [usize; 3],
    pub velocity_set: VelocitySet,
    pub tau: f64,
    pub steps: usize,
    pub seed: u64,
    pub transport: TransportConfig,
    /// Synthetic work placed inside each non-blocking exchange.
    pub overlap_intensity: Option<usize>,
}

/// Runs `steps` of collide, exchange, stream on every rank.
pub fn simulate(spec: &SimulationSpec, strategy: Strategy) -> Result<SimulationResult> {
    let fields = run_ranks(spec.topo.nranks(), spec.transport, |ep| {
        let vs = &spec.velocity_set;
        let mut field = initial_field(vs, spec.local_dims, spec.seed, ep.rank())?;
        let mut ex = HaloExchanger::new(ep, &spec.topo, spec.local_dims, vs.m())?;
        for _ in 0..spec.steps {
            field.collide(vs, spec.tau)?;
            match (strategy, spec.overlap_intensity) {
                (Strategy::Nonblocking, Some(intensity)) => {
                    step_with_overlap(&mut ex, &mut field, &mut SyntheticWorkload { intensity })?;
                }
                _ => ex.exchange(strategy, &mut field)?,
            }
            field.stream(vs)?;
        }
        Ok(field)
    })?;
    Ok(SimulationResult { fields })
}

/// Outcome of the boundary-encoding halo test.
#[derive(Debug, Clone, PartialEq)]
pub struct TestHaloReport {
    pub strategy: Strategy,
    pub checked_values: usize,
    pub mismatch: Option<HaloMismatch>,
}

impl TestHaloReport {
    pub fn passed(&self) -> bool {
        self.mismatch.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HaloMismatch {
    pub rank: usize,
    pub site: [usize; 3],
    pub component: usize,
    pub expected: f64,
    pub got: f64,
}

/// A deliberate corruption applied to one received halo value, for testing
/// that the checker catches it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaultInjection {
    pub rank: usize,
    pub site: [usize; 3],
    pub component: usize,
}

/// Unique nonzero value for population `i` of padded site `s` on `rank`.
/// Exact in f64 for any lattice this crate can allocate.
pub fn boundary_code(dims: [usize; 3], m: usize, rank: usize, s: [usize; 3], i: usize) -> f64 {
    let (px, py, pz) = (dims[0] + 2, dims[1] + 2, dims[2] + 2);
    let site = ((rank * px + s[0]) * py + s[1]) * pz + s[2];
    (1 + site * m + i) as f64
}

fn is_boundary(dims: [usize; 3], s: [usize; 3]) -> bool {
    (0..3).any(|k| s[k] == 1 || s[k] == dims[k])
}

/// Zeroes every rank's lattice except its boundary sites, which get unique
/// codes; exchanges once; then checks every halo site that has a source
/// against the code of that source.
pub fn run_test_halo(
    topo: &CartesianTopology,
    local_dims: [usize; 3],
    m: usize,
    strategy: Strategy,
    transport: TransportConfig,
    fault: Option<FaultInjection>,
) -> Result<TestHaloReport> {
    let outcomes = run_ranks(topo.nranks(), transport, |ep| {
        let rank = ep.rank();
        let mut field = DistributionField::new(local_dims, m)?;
        let sites: Vec<_> = field.interior_sites().filter(|&s| is_boundary(local_dims, s)).collect();
        for s in sites {
            for (i, v) in field.site_mut(s).iter_mut().enumerate() {
                *v = boundary_code(local_dims, m, rank, s, i);
            }
        }
        let interior_before = field.clone();
        let mut ex = HaloExchanger::new(ep, topo, local_dims, m)?;
        ex.exchange(strategy, &mut field)?;
        if let Some(f) = fault.filter(|f| f.rank == rank) {
            field.site_mut(f.site)[f.component] += 0.5;
        }

        let mut checked = 0usize;
        let mut first = None;
        let halo: Vec<_> = field.halo_sites().collect();
        'sites: for s in halo {
            let Some((src_rank, src)) = halo_source(ex.neighbours(), local_dims, s) else {
                continue;
            };
            for i in 0..m {
                let expected = if is_boundary(local_dims, src) {
                    boundary_code(local_dims, m, src_rank, src, i)
                } else {
                    0.0
                };
                let got = field.site(s)[i];
                checked += 1;
                if got.to_bits() != expected.to_bits() {
                    first = Some(HaloMismatch {
                        rank,
                        site: s,
                        component: i,
                        expected,
                        got,
                    });
                    break 'sites;
                }
            }
        }
        // The exchange must never write the interior.
        if first.is_none() {
            for s in field.interior_sites() {
                for i in 0..m {
                    let (e, g) = (interior_before.site(s)[i], field.site(s)[i]);
                    if e.to_bits() != g.to_bits() {
                        first = Some(HaloMismatch {
                            rank,
                            site: s,
                            component: i,
                            expected: e,
                            got: g,
                        });
                        break;
                    }
                }
                if first.is_some() {
                    break;
                }
            }
        }
        Ok((checked, first))
    })?;
    Ok(TestHaloReport {
        strategy,
        checked_values: outcomes.iter().map(|o| o.0).sum(),
        mismatch: outcomes.into_iter().find_map(|o| o.1),
    })
}

/// Largest per-population difference between two runs.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionReport {
    pub steps: usize,
    pub max_abs_diff: f64,
    /// (rank, site, component) of the largest difference.
    pub location: Option<(usize, [usize; 3], usize)>,
    pub tolerance: f64,
}

impl RegressionReport {
    pub fn passed(&self) -> bool {
        self.max_abs_diff <= self.tolerance
    }
}

pub const REGRESSION_TOLERANCE: f64 = 1e-12;

pub fn compare_fields(a: &SimulationResult, b: &SimulationResult, steps: usize) -> RegressionReport {
    let mut max = 0.0f64;
    let mut location = None;
    for (rank, (fa, fb)) in a.fields.iter().zip(&b.fields).enumerate() {
        for s in fa.interior_sites() {
            for (i, (x, y)) in fa.site(s).iter().zip(fb.site(s)).enumerate() {
                let d = (x - y).abs();
                // NaN differences count as failures.
                if d > max || d.is_nan() {
                    max = if d.is_nan() { f64::INFINITY } else { d };
                    location = Some((rank, s, i));
                }
            }
        }
    }
    RegressionReport {
        steps,
        max_abs_diff: max,
        location,
        tolerance: REGRESSION_TOLERANCE,
    }
}

/// Runs the same seeded simulation under both strategies and compares
/// every interior population.
pub fn run_regression(cfg: &RunConfig) -> Result<RegressionReport> {
    cfg.validate()?;
    let spec = SimulationSpec {
        topo: CartesianTopology::new(cfg.proc_dims, cfg.periodic)?,
        local_dims: cfg.local_dims()?,
        velocity_set: VelocitySet::with_count(cfg.m)?,
        tau: cfg.tau,
        steps: cfg.steps,
        seed: cfg.seed,
        transport: cfg.transport(),
        overlap_intensity: None,
    };
    if cfg.periodic != [true; 3] {
        return Err(Error::Config(
            "the regression compares whole fields and needs a fully periodic topology".into(),
        ));
    }
    let blocking = simulate(&spec, Strategy::Blocking)?;
    let nonblocking = simulate(&spec, Strategy::Nonblocking)?;
    Ok(compare_fields(&blocking, &nonblocking, cfg.steps))
}

/// Watchdog used by in-process correctness checks; short enough that a
/// protocol bug fails fast.
pub fn check_transport() -> TransportConfig {
    TransportConfig {
        watchdog: Duration::from_secs(10),
        model: None,
    }
}
