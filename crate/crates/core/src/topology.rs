//! Cartesian process grid with periodic wrap and neighbour tables.
//!
//! Ranks are laid out row-major with x slowest: `rank = (x*Py + y)*Pz + z`.

use crate::error::{Error, Result};

pub const X: usize = 0;
pub const Y: usize = 1;
pub const Z: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Backward = 0,
    Forward = 1,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::Backward, Direction::Forward];

    pub fn displacement(self) -> i64 {
        match self {
            Direction::Backward => -1,
            Direction::Forward => 1,
        }
    }

    pub fn reverse(self) -> Self {
        match self {
            Direction::Backward => Direction::Forward,
            Direction::Forward => Direction::Backward,
        }
    }
}

/// The 26 neighbour displacements, read as XYZ with N = -1, M = 0, P = +1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[rustfmt::skip]
pub enum HaloNeighbour {
    NNN = 0, NNM, NNP, NMN, NMM, NMP, NPN, NPM, NPP,
    MNN, MNM, MNP, MMN, MMP, MPN, MPM, MPP,
    PNN, PNM, PNP, PMN, PMM, PMP, PPN, PPM, PPP,
}

#[rustfmt::skip]
const ALL_NEIGHBOURS: [HaloNeighbour; 26] = {
    use HaloNeighbour::*;
    [
        NNN, NNM, NNP, NMN, NMM, NMP, NPN, NPM, NPP,
        MNN, MNM, MNP, MMN, MMP, MPN, MPM, MPP,
        PNN, PNM, PNP, PMN, PMM, PMP, PPN, PPM, PPP,
    ]
};

impl HaloNeighbour {
    pub const COUNT: usize = 26;

    pub fn all() -> [HaloNeighbour; 26] {
        ALL_NEIGHBOURS
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        ALL_NEIGHBOURS.get(i).copied()
    }

    pub fn displacement(self) -> [i64; 3] {
        // Skip the (0,0,0) slot, which would sit at base-3 index 13.
        let mut k = self as i64;
        if k >= 13 {
            k += 1;
        }
        [k / 9 - 1, (k / 3) % 3 - 1, k % 3 - 1]
    }

    pub fn from_displacement(d: [i64; 3]) -> Option<Self> {
        if d.iter().any(|c| !(-1..=1).contains(c)) || d == [0, 0, 0] {
            return None;
        }
        let k = 9 * (d[0] + 1) + 3 * (d[1] + 1) + (d[2] + 1);
        let k = if k > 13 { k - 1 } else { k };
        Self::from_index(k as usize)
    }

    pub fn opposite(self) -> Self {
        Self::from_index(25 - self.index()).expect("in range")
    }

    /// Number of nonzero displacement components: 1 plane, 2 edge, 3 corner.
    pub fn order(self) -> usize {
        self.displacement().iter().filter(|&&c| c != 0).count()
    }

    pub fn name(self) -> String {
        self.displacement()
            .iter()
            .map(|c| match c {
                -1 => 'N',
                0 => 'M',
                _ => 'P',
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CartesianTopology {
    dims: [usize; 3],
    periodic: [bool; 3],
}

impl CartesianTopology {
    pub fn new(dims: [usize; 3], periodic: [bool; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("process grid must be positive, got {dims:?}")));
        }
        Ok(Self { dims, periodic })
    }

    pub fn periodic(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, [true; 3])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn is_periodic(&self) -> [bool; 3] {
        self.periodic
    }

    pub fn nranks(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn cart_coords(&self, rank: usize) -> Result<[usize; 3]> {
        self.check_rank(rank)?;
        let [_, py, pz] = self.dims;
        Ok([rank / (py * pz), (rank / pz) % py, rank % pz])
    }

    pub fn cart_rank(&self, coords: [i64; 3]) -> Result<usize> {
        let mut wrapped = [0usize; 3];
        for dim in 0..3 {
            let extent = self.dims[dim] as i64;
            let c = coords[dim];
            wrapped[dim] = if self.periodic[dim] {
                c.rem_euclid(extent) as usize
            } else if (0..extent).contains(&c) {
                c as usize
            } else {
                return Err(Error::Boundary {
                    dim,
                    coord: c,
                    extent: self.dims[dim],
                });
            };
        }
        let [_, py, pz] = self.dims;
        Ok((wrapped[0] * py + wrapped[1]) * pz + wrapped[2])
    }

    /// Rank at `disp` from `rank`, or `None` past a non-periodic edge.
    pub fn shift(&self, rank: usize, disp: [i64; 3]) -> Result<Option<usize>> {
        let c = self.cart_coords(rank)?;
        let target = [
            c[0] as i64 + disp[0],
            c[1] as i64 + disp[1],
            c[2] as i64 + disp[2],
        ];
        match self.cart_rank(target) {
            Ok(r) => Ok(Some(r)),
            Err(Error::Boundary { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn orthogonal_neighbours(&self, rank: usize) -> Result<[[Option<usize>; 3]; 2]> {
        let mut out = [[None; 3]; 2];
        for dim in 0..3 {
            for dir in Direction::BOTH {
                let mut d = [0i64; 3];
                d[dim] = dir.displacement();
                out[dir as usize][dim] = self.shift(rank, d)?;
            }
        }
        Ok(out)
    }

    pub fn full_neighbours(&self, rank: usize) -> Result<[Option<usize>; 26]> {
        let mut out = [None; 26];
        let mut n = 0;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if (dx, dy, dz) == (0, 0, 0) {
                        continue;
                    }
                    out[n] = self.shift(rank, [dx, dy, dz])?;
                    n += 1;
                }
            }
        }
        Ok(out)
    }

    pub fn neighbour_table(&self, rank: usize) -> Result<NeighbourTable> {
        Ok(NeighbourTable {
            orthogonal: self.orthogonal_neighbours(rank)?,
            full: self.full_neighbours(rank)?,
        })
    }

    fn check_rank(&self, rank: usize) -> Result<()> {
        if rank < self.nranks() {
            Ok(())
        } else {
            Err(Error::InvalidRank {
                rank,
                nranks: self.nranks(),
            })
        }
    }
}

/// Neighbour ranks of one process; `None` marks an open boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighbourTable {
    pub orthogonal: [[Option<usize>; 3]; 2],
    pub full: [Option<usize>; 26],
}

impl NeighbourTable {
    pub fn get(&self, n: HaloNeighbour) -> Option<usize> {
        self.full[n.index()]
    }

    pub fn along(&self, dir: Direction, dim: usize) -> Option<usize> {
        self.orthogonal[dir as usize][dim]
    }
}

/// Uniform split of a global lattice over the process grid.
pub fn decompose(global_dims: [usize; 3], proc_dims: [usize; 3]) -> Result<[usize; 3]> {
    let mut local = [0; 3];
    for k in 0..3 {
        let (g, p) = (global_dims[k], proc_dims[k]);
        if g == 0 || p == 0 || g % p != 0 {
            return Err(Error::Config(format!(
                "global dims {global_dims:?} do not divide evenly over process grid {proc_dims:?}"
            )));
        }
        local[k] = g / p;
    }
    Ok(local)
}
