//! Discrete-velocity models and the per-rank distribution field.
//!
//! Storage is site-major: the `m` populations of one site are contiguous and
//! sites are ordered x-slowest, z-fastest over the padded box
//! `(Lx+2) x (Ly+2) x (Lz+2)`. Interior coordinates run `1..=L` on each axis;
//! `0` and `L+1` are the halo shell.

use rand::Rng;

use crate::error::{Error, Result};

pub const MAX_VELOCITIES: usize = 27;

/// A DnQm velocity set: lattice vectors, quadrature weights and the
/// opposite-direction map.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocitySet {
    e: Vec<[i32; 3]>,
    w: Vec<f64>,
    opposite: Vec<usize>,
}

impl VelocitySet {
    /// The 19-velocity model: rest, 6 faces, 12 edges.
    pub fn d3q19() -> Self {
        Self::from_shells(&[(0, 1.0 / 3.0), (1, 1.0 / 18.0), (2, 1.0 / 36.0)])
    }

    /// The 15-velocity model: rest, 6 faces, 8 corners.
    pub fn d3q15() -> Self {
        Self::from_shells(&[(0, 2.0 / 9.0), (1, 1.0 / 9.0), (3, 1.0 / 72.0)])
    }

    /// The full 27-velocity model.
    pub fn d3q27() -> Self {
        Self::from_shells(&[
            (0, 8.0 / 27.0),
            (1, 2.0 / 27.0),
            (2, 1.0 / 54.0),
            (3, 1.0 / 216.0),
        ])
    }

    /// Picks the standard model with `m` velocities.
    pub fn with_count(m: usize) -> Result<Self> {
        match m {
            15 => Ok(Self::d3q15()),
            19 => Ok(Self::d3q19()),
            27 => Ok(Self::d3q27()),
            _ => Err(Error::Config(format!(
                "no velocity set with m = {m} (supported: 15, 19, 27)"
            ))),
        }
    }

    // Shells are given as (|e|^2, weight). Within a shell the vectors come in
    // (v, -v) pairs so the opposite of an odd index is the preceding one.
    fn from_shells(shells: &[(i32, f64)]) -> Self {
        let mut e = Vec::new();
        let mut w = Vec::new();
        for &(norm2, weight) in shells {
            let mut shell = Vec::new();
            for x in -1..=1 {
                for y in -1..=1 {
                    for z in -1..=1 {
                        let v = [x, y, z];
                        if x * x + y * y + z * z != norm2 {
                            continue;
                        }
                        let neg = [-x, -y, -z];
                        if !shell.contains(&v) && !shell.contains(&neg) {
                            shell.push(v);
                        }
                    }
                }
            }
            for v in shell {
                let neg = [-v[0], -v[1], -v[2]];
                e.push(v);
                w.push(weight);
                if neg != v {
                    e.push(neg);
                    w.push(weight);
                }
            }
        }
        // Positive-first ordering reads more naturally: (1,0,0) before (-1,0,0).
        for pair in e[1..].chunks_mut(2) {
            if pair[0] < pair[1] {
                pair.swap(0, 1);
            }
        }
        let opposite = e
            .iter()
            .map(|v| {
                let neg = [-v[0], -v[1], -v[2]];
                e.iter().position(|u| *u == neg).expect("closed under negation")
            })
            .collect();
        Self { e, w, opposite }
    }

    pub fn m(&self) -> usize {
        self.e.len()
    }

    pub fn vectors(&self) -> &[[i32; 3]] {
        &self.e
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn opposite(&self, i: usize) -> usize {
        self.opposite[i]
    }

    /// Second-order polynomial BGK equilibrium with `c_s^2 = 1/3`.
    pub fn equilibrium(&self, rho: f64, u: [f64; 3]) -> Vec<f64> {
        let mut out = vec![0.0; self.m()];
        self.equilibrium_into(rho, u, &mut out);
        out
    }

    pub fn equilibrium_into(&self, rho: f64, u: [f64; 3], out: &mut [f64]) {
        let usq = u[0] * u[0] + u[1] * u[1] + u[2] * u[2];
        for ((f, e), w) in out.iter_mut().zip(&self.e).zip(&self.w) {
            let eu = e[0] as f64 * u[0] + e[1] as f64 * u[1] + e[2] as f64 * u[2];
            *f = w * rho * (1.0 + 3.0 * eu + 4.5 * eu * eu - 1.5 * usq);
        }
    }

    /// Zeroth and first moments of one site's populations.
    pub fn moments(&self, f: &[f64]) -> (f64, [f64; 3]) {
        let mut rho = 0.0;
        let mut mom = [0.0; 3];
        for (fi, e) in f.iter().zip(&self.e) {
            rho += fi;
            mom[0] += fi * e[0] as f64;
            mom[1] += fi * e[1] as f64;
            mom[2] += fi * e[2] as f64;
        }
        (rho, mom)
    }
}

/// The populations of one subdomain, including a one-site halo shell.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionField {
    dims: [usize; 3],
    m: usize,
    data: Vec<f64>,
    scratch: Vec<f64>,
}

impl DistributionField {
    pub fn new(dims: [usize; 3], m: usize) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("local dims must be positive, got {dims:?}")));
        }
        if m == 0 || m > MAX_VELOCITIES {
            return Err(Error::Config(format!(
                "velocity count must be in 1..={MAX_VELOCITIES}, got {m}"
            )));
        }
        let len = padded_sites(dims)
            .checked_mul(m)
            .ok_or_else(|| Error::Overflow(format!("field of {dims:?} x {m}")))?;
        Ok(Self {
            dims,
            m,
            data: vec![0.0; len],
            scratch: Vec::new(),
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn padded_dims(&self) -> [usize; 3] {
        [self.dims[0] + 2, self.dims[1] + 2, self.dims[2] + 2]
    }

    pub fn interior_site_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn halo_site_count(&self) -> usize {
        padded_sites(self.dims) - self.interior_site_count()
    }

    /// Offset of the first population of site `(x, y, z)` in padded coordinates.
    #[inline]
    pub fn site_offset(&self, x: usize, y: usize, z: usize) -> usize {
        let [_, py, pz] = self.padded_dims();
        ((x * py + y) * pz + z) * self.m
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize, i: usize) -> usize {
        self.site_offset(x, y, z) + i
    }

    pub fn site(&self, [x, y, z]: [usize; 3]) -> &[f64] {
        let off = self.site_offset(x, y, z);
        &self.data[off..off + self.m]
    }

    pub fn site_mut(&mut self, [x, y, z]: [usize; 3]) -> &mut [f64] {
        let off = self.site_offset(x, y, z);
        let m = self.m;
        &mut self.data[off..off + m]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_interior(&self, site: [usize; 3]) -> bool {
        site.iter().zip(&self.dims).all(|(&c, &l)| (1..=l).contains(&c))
    }

    fn check_interior(&self, site: [usize; 3]) -> Result<()> {
        if self.is_interior(site) {
            Ok(())
        } else {
            Err(Error::OutOfRange {
                coord: site,
                dims: self.dims,
            })
        }
    }

    /// All interior sites in ascending (x, y, z) order.
    pub fn interior_sites(&self) -> impl Iterator<Item = [usize; 3]> {
        let [lx, ly, lz] = self.dims;
        (1..=lx).flat_map(move |x| (1..=ly).flat_map(move |y| (1..=lz).map(move |z| [x, y, z])))
    }

    /// All halo-shell sites in ascending (x, y, z) order.
    pub fn halo_sites(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let [px, py, pz] = self.padded_dims();
        (0..px)
            .flat_map(move |x| (0..py).flat_map(move |y| (0..pz).map(move |z| [x, y, z])))
            .filter(|&s| !self.is_interior(s))
    }

    pub fn density(&self, site: [usize; 3]) -> Result<f64> {
        self.check_interior(site)?;
        Ok(self.site(site).iter().sum())
    }

    pub fn velocity(&self, site: [usize; 3], vs: &VelocitySet) -> Result<[f64; 3]> {
        self.check_interior(site)?;
        self.check_model(vs)?;
        let (rho, mom) = vs.moments(self.site(site));
        if rho == 0.0 {
            return Err(Error::ZeroDensity(site));
        }
        Ok([mom[0] / rho, mom[1] / rho, mom[2] / rho])
    }

    fn check_model(&self, vs: &VelocitySet) -> Result<()> {
        if vs.m() != self.m {
            return Err(Error::Config(format!(
                "field carries {} populations but the velocity set has {}",
                self.m,
                vs.m()
            )));
        }
        Ok(())
    }

    /// Sets every interior site to the equilibrium of `(rho, u)`.
    pub fn fill_equilibrium(&mut self, vs: &VelocitySet, rho: f64, u: [f64; 3]) -> Result<()> {
        self.check_model(vs)?;
        let feq = vs.equilibrium(rho, u);
        let sites: Vec<_> = self.interior_sites().collect();
        for s in sites {
            self.site_mut(s).copy_from_slice(&feq);
        }
        Ok(())
    }

    /// Fills the interior with a random perturbation of a near-rest equilibrium.
    /// Halo sites are left at zero.
    pub fn fill_perturbed<R: Rng>(&mut self, vs: &VelocitySet, rng: &mut R) -> Result<()> {
        self.check_model(vs)?;
        let mut feq = vec![0.0; self.m];
        let sites: Vec<_> = self.interior_sites().collect();
        for s in sites {
            let rho = 1.0 + rng.gen_range(-0.05..0.05);
            let u = [
                rng.gen_range(-0.05..0.05),
                rng.gen_range(-0.05..0.05),
                rng.gen_range(-0.05..0.05),
            ];
            vs.equilibrium_into(rho, u, &mut feq);
            for (f, eq) in self.site_mut(s).iter_mut().zip(&feq) {
                *f = eq * (1.0 + rng.gen_range(-0.01..0.01));
            }
        }
        Ok(())
    }

    /// BGK relaxation of every interior site toward its local equilibrium.
    pub fn collide(&mut self, vs: &VelocitySet, tau: f64) -> Result<()> {
        self.check_model(vs)?;
        if !(tau > 0.5) || !tau.is_finite() {
            return Err(Error::Config(format!("relaxation time must exceed 0.5, got {tau}")));
        }
        let omega = 1.0 / tau;
        let mut feq = vec![0.0; self.m];
        let sites: Vec<_> = self.interior_sites().collect();
        for s in sites {
            let f = self.site(s);
            if let Some((i, &v)) = f.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(Error::NonFinite {
                    site: s,
                    component: i,
                    value: v,
                });
            }
            let (rho, mom) = vs.moments(f);
            if rho == 0.0 {
                return Err(Error::ZeroDensity(s));
            }
            let u = [mom[0] / rho, mom[1] / rho, mom[2] / rho];
            vs.equilibrium_into(rho, u, &mut feq);
            for (fi, eq) in self.site_mut(s).iter_mut().zip(&feq) {
                *fi -= (*fi - eq) * omega;
            }
        }
        Ok(())
    }

    /// Pull streaming: `f_i(r) <- f_i(r - e_i)` over the interior, reading
    /// the halo shell where needed. Halo contents afterwards are stale.
    pub fn stream(&mut self, vs: &VelocitySet) -> Result<()> {
        self.check_model(vs)?;
        let [_, py, pz] = self.padded_dims();
        let m = self.m;
        let offsets: Vec<isize> = vs
            .vectors()
            .iter()
            .map(|e| {
                ((e[0] as isize * py as isize + e[1] as isize) * pz as isize + e[2] as isize)
                    * m as isize
            })
            .collect();
        if self.scratch.len() != self.data.len() {
            self.scratch = vec![0.0; self.data.len()];
        }
        let [lx, ly, lz] = self.dims;
        for x in 1..=lx {
            for y in 1..=ly {
                let row = self.site_offset(x, y, 1);
                for k in 0..lz {
                    let base = row + k * m;
                    for (i, off) in offsets.iter().enumerate() {
                        let src = (base as isize - off) as usize + i;
                        self.scratch[base + i] = self.data[src];
                    }
                }
            }
        }
        std::mem::swap(&mut self.data, &mut self.scratch);
        Ok(())
    }

    /// Fills the halo shell with the periodic image of this field's own
    /// interior, by direct indexing.
    pub fn wrap_periodic_halo(&mut self) {
        let dims = self.dims;
        let wrap = |c: usize, l: usize| -> usize {
            if c == 0 {
                l
            } else if c == l + 1 {
                1
            } else {
                c
            }
        };
        let halo: Vec<_> = self.halo_sites().collect();
        for s in halo {
            let src = [wrap(s[0], dims[0]), wrap(s[1], dims[1]), wrap(s[2], dims[2])];
            let from = self.site_offset(src[0], src[1], src[2]);
            let to = self.site_offset(s[0], s[1], s[2]);
            self.data.copy_within(from..from + self.m, to);
        }
    }

    /// Sum of every interior population.
    pub fn interior_mass(&self) -> f64 {
        self.interior_sites().map(|s| self.site(s).iter().sum::<f64>()).sum()
    }

    /// Sum of `f_i e_i` over the interior.
    pub fn interior_momentum(&self, vs: &VelocitySet) -> [f64; 3] {
        let mut total = [0.0; 3];
        for s in self.interior_sites() {
            let (_, mom) = vs.moments(self.site(s));
            for k in 0..3 {
                total[k] += mom[k];
            }
        }
        total
    }
}

fn padded_sites(dims: [usize; 3]) -> usize {
    (dims[0] + 2) * (dims[1] + 2) * (dims[2] + 2)
}

/// Bytes needed to hold one double-precision population set over a global lattice.
pub fn memory_estimate(global_dims: [u64; 3], m: u64) -> Result<u64> {
    if global_dims.iter().any(|&d| d == 0) || m == 0 {
        return Err(Error::Config("memory estimate needs positive dims and m".into()));
    }
    [global_dims[0], global_dims[1], global_dims[2], m]
        .iter()
        .try_fold(8u64, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Overflow(format!("8 * {m} * {global_dims:?} exceeds u64")))
}
