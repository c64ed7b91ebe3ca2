//! Shared fixtures for the integration tests.

#![allow(dead_code)]

use halolab::halo::halo_source;
use halolab::transport::{run_ranks, TransportConfig};
use halolab::{CartesianTopology, DistributionField, HaloExchanger, Strategy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fast_transport() -> TransportConfig {
    TransportConfig {
        watchdog: std::time::Duration::from_secs(20),
        model: None,
    }
}

/// Random field for one rank; halo filled with a sentinel so stale values
/// are visible.
pub fn random_field(dims: [usize; 3], m: usize, seed: u64, rank: usize) -> DistributionField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (rank as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut f = DistributionField::new(dims, m).unwrap();
    for s in f.interior_sites().collect::<Vec<_>>() {
        for v in f.site_mut(s) {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    for s in f.halo_sites().collect::<Vec<_>>() {
        f.site_mut(s).fill(-7.0);
    }
    f
}

/// Initial and exchanged fields for every rank.
pub fn exchange_once(
    topo: &CartesianTopology,
    dims: [usize; 3],
    m: usize,
    seed: u64,
    strategy: Strategy,
) -> (Vec<DistributionField>, Vec<DistributionField>) {
    let initial: Vec<_> = (0..topo.nranks()).map(|r| random_field(dims, m, seed, r)).collect();
    let after = run_ranks(topo.nranks(), fast_transport(), |ep| {
        let mut f = initial[ep.rank()].clone();
        let mut ex = HaloExchanger::new(ep, topo, dims, m)?;
        ex.exchange(strategy, &mut f)?;
        Ok(f)
    })
    .unwrap();
    (initial, after)
}

/// Number of values checked, or a description of the first discrepancy
/// between `after` and the direct source-lookup oracle.
pub fn check_against_sources(
    topo: &CartesianTopology,
    initial: &[DistributionField],
    after: &[DistributionField],
) -> Result<usize, String> {
    let mut checked = 0;
    for (rank, f) in after.iter().enumerate() {
        let dims = f.dims();
        let table = topo.neighbour_table(rank).unwrap();
        for s in f.interior_sites() {
            if f.site(s) != initial[rank].site(s) {
                return Err(format!("rank {rank}: interior site {s:?} modified"));
            }
        }
        for s in f.halo_sites() {
            if let Some((src_rank, src)) = halo_source(&table, dims, s) {
                let want = initial[src_rank].site(src);
                let got = f.site(s);
                if want.iter().zip(got).any(|(a, b)| a.to_bits() != b.to_bits()) {
                    return Err(format!(
                        "rank {rank}: halo {s:?} differs from rank {src_rank} site {src:?}"
                    ));
                }
                checked += got.len();
            }
        }
    }
    Ok(checked)
}

/// Compares the sourced halo sites of two exchanged states bit for bit.
pub fn shells_identical(
    topo: &CartesianTopology,
    a: &[DistributionField],
    b: &[DistributionField],
) -> Result<usize, String> {
    let mut checked = 0;
    for rank in 0..a.len() {
        let table = topo.neighbour_table(rank).unwrap();
        let dims = a[rank].dims();
        for s in a[rank].halo_sites() {
            if halo_source(&table, dims, s).is_none() {
                continue;
            }
            for (i, (x, y)) in a[rank].site(s).iter().zip(b[rank].site(s)).enumerate() {
                if x.to_bits() != y.to_bits() {
                    return Err(format!("rank {rank} site {s:?} component {i}: {x} vs {y}"));
                }
                checked += 1;
            }
        }
    }
    Ok(checked)
}

/// Randomised (topology, dims, m, seed) case for the equivalence matrix.
pub struct Case {
    pub topo: CartesianTopology,
    pub dims: [usize; 3],
    pub m: usize,
    pub seed: u64,
}

pub const PROC_GRIDS: [[usize; 3]; 4] = [[1, 1, 1], [2, 2, 2], [2, 1, 1], [4, 3, 2]];

pub fn random_cases(n: usize, seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|k| {
            let procs = PROC_GRIDS[k % PROC_GRIDS.len()];
            // Every fourth case opens some axes.
            let periodic = if k % 4 == 3 {
                [rng.gen(), rng.gen(), rng.gen()]
            } else {
                [true; 3]
            };
            let dims = if rng.gen_bool(0.5) {
                let l = rng.gen_range(2..=6);
                [l, l, l]
            } else {
                [rng.gen_range(2..=6), rng.gen_range(2..=6), rng.gen_range(2..=6)]
            };
            Case {
                topo: CartesianTopology::new(procs, periodic).unwrap(),
                dims,
                m: [1, 5, 19][rng.gen_range(0..3)],
                seed: rng.gen(),
            }
        })
        .collect()
}
