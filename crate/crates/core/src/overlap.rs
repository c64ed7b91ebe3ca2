//! Halo-independent work scheduled between the start and end of a
//! non-blocking exchange.

use std::hint::black_box;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::halo::HaloExchanger;
use crate::lattice::DistributionField;

/// Read-only access to a field's interior. Any request for a halo site is
/// a contract violation: work placed inside an exchange must not depend on
/// data that is still in flight.
#[derive(Debug, Clone, Copy)]
pub struct InteriorView<'a> {
    field: &'a DistributionField,
}

impl<'a> InteriorView<'a> {
    pub fn new(field: &'a DistributionField) -> Self {
        Self { field }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.field.dims()
    }

    pub fn m(&self) -> usize {
        self.field.m()
    }

    pub fn site(&self, site: [usize; 3]) -> Result<&'a [f64]> {
        if !self.field.is_interior(site) {
            return Err(Error::ContractViolation(site));
        }
        Ok(self.field.site(site))
    }

    /// Contiguous z-runs of interior populations, one per (x, y) column.
    pub fn columns(&self) -> impl Iterator<Item = &'a [f64]> + 'a {
        let field = self.field;
        let [lx, ly, lz] = field.dims();
        let run = lz * field.m();
        (1..=lx).flat_map(move |x| {
            (1..=ly).map(move |y| {
                let at = field.site_offset(x, y, 1);
                &field.data()[at..at + run]
            })
        })
    }
}

/// Work that only touches interior sites.
pub trait HaloIndependentWork {
    fn run(&mut self, view: InteriorView<'_>) -> Result<f64>;
}

/// Synthetic per-site compute kernel with tunable cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticWorkload {
    /// Dependent floating-point updates per interior site.
    pub intensity: usize,
}

impl HaloIndependentWork for SyntheticWorkload {
    fn run(&mut self, view: InteriorView<'_>) -> Result<f64> {
        let m = view.m();
        let mut checksum = 0.0;
        for column in view.columns() {
            for site in column.chunks_exact(m) {
                let mut acc: f64 = site.iter().sum();
                for _ in 0..self.intensity {
                    acc = black_box(acc.mul_add(0.999_999_9, 1e-9));
                }
                checksum += acc;
            }
        }
        Ok(checksum)
    }
}

pub fn synthetic_workload(field: &DistributionField, intensity: usize) -> f64 {
    SyntheticWorkload { intensity }
        .run(InteriorView::new(field))
        .expect("synthetic workload only reads the interior")
}

/// start, work, end.
pub fn step_with_overlap<W: HaloIndependentWork>(
    exchanger: &mut HaloExchanger,
    field: &mut DistributionField,
    work: &mut W,
) -> Result<f64> {
    let mut token = exchanger.start(field)?;
    let result = work.run(InteriorView::new(field));
    // Complete the exchange even if the work failed so no message is orphaned.
    exchanger.end(&mut token, field)?;
    result
}

/// start, end, work: the same computation with no overlap.
pub fn step_serial<W: HaloIndependentWork>(
    exchanger: &mut HaloExchanger,
    field: &mut DistributionField,
    work: &mut W,
) -> Result<f64> {
    let mut token = exchanger.start(field)?;
    exchanger.end(&mut token, field)?;
    work.run(InteriorView::new(field))
}

/// Intensity whose synthetic workload takes roughly `target` on `field`.
pub fn calibrate_intensity(field: &DistributionField, target: Duration) -> usize {
    let mut intensity = 64;
    loop {
        let t = best_of(3, || {
            black_box(synthetic_workload(field, intensity));
        });
        if t >= Duration::from_millis(2) || intensity >= 1 << 24 {
            let per_unit = t.as_secs_f64() / intensity as f64;
            return ((target.as_secs_f64() / per_unit).round() as usize).max(1);
        }
        intensity *= 4;
    }
}

/// Shortest of `n` timed runs.
pub fn best_of<F: FnMut()>(n: usize, mut f: F) -> Duration {
    (0..n.max(1))
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed()
        })
        .min()
        .expect("at least one run")
}
