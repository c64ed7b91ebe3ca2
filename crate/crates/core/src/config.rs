//! Run configuration: a flat `key = value` file plus `key=value` overrides.
//!
//! ```text
//! # 24 contexts, cubic 16^3 subdomains
//! proc_dims = 4,3,2
//! local_dims = 16,16,16
//! halo.strategy = both
//! iterations = 2000
//! transport.model = {100, 350}     # latency_us, bandwidth_MBps; "off" disables
//! ```
//!
//! Keys are listed in [`KEYS`]. Unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::halo::Strategy;
use crate::metrics::CostModelParams;
use crate::topology::decompose;
use crate::transport::TransportConfig;

pub const KEYS: &[&str] = &[
    "global_dims",
    "local_dims",
    "proc_dims",
    "periodic",
    "m",
    "halo.strategy",
    "iterations",
    "repetitions",
    "warmup",
    "tau",
    "physics",
    "overlap.enabled",
    "overlap.intensity",
    "transport.watchdog_seconds",
    "transport.model",
    "transport.model.latency_us",
    "transport.model.bandwidth_MBps",
    "seed",
    "output",
    "steps",
    "sweep.kind",
    "sweep.sizes",
    "sweep.proc_grids",
];

/// Which strategies a run covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategySelection {
    Blocking,
    Nonblocking,
    Both,
}

impl StrategySelection {
    pub fn strategies(self) -> Vec<Strategy> {
        match self {
            StrategySelection::Blocking => vec![Strategy::Blocking],
            StrategySelection::Nonblocking => vec![Strategy::Nonblocking],
            StrategySelection::Both => Strategy::ALL.to_vec(),
        }
    }
}

impl FromStr for StrategySelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "both" => Ok(StrategySelection::Both),
            other => Ok(match other.parse::<Strategy>()? {
                Strategy::Blocking => StrategySelection::Blocking,
                Strategy::Nonblocking => StrategySelection::Nonblocking,
            }),
        }
    }
}

/// Whether collide/stream run between halo calls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Physics {
    None,
    Full,
}

impl FromStr for Physics {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" | "halo" | "off" => Ok(Physics::None),
            "full" | "on" => Ok(Physics::Full),
            other => Err(Error::Config(format!("unknown physics mode '{other}'"))),
        }
    }
}

/// How the lattice is specified.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Extent {
    Global([usize; 3]),
    Local([usize; 3]),
}

/// Experiment matrix expanded from one configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", content = "values", rename_all = "lowercase")]
pub enum Sweep {
    None,
    /// Cubic local sizes L, on the configured process grid.
    Cubic(Vec<usize>),
    /// Local dims x by 1.5x by 2x, on the configured process grid.
    Noncubic(Vec<usize>),
    /// Fixed global lattice over several process grids.
    Strong(Vec<[usize; 3]>),
}

impl Sweep {
    pub fn is_scaling(&self) -> bool {
        matches!(self, Sweep::Strong(_))
    }
}

/// One point of the experiment matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Case {
    pub proc_dims: [usize; 3],
    pub local_dims: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub extent: Extent,
    pub proc_dims: [usize; 3],
    pub periodic: [bool; 3],
    pub m: usize,
    pub strategy: StrategySelection,
    pub iterations: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub tau: f64,
    pub physics: Physics,
    pub overlap_enabled: bool,
    pub overlap_intensity: usize,
    pub watchdog_seconds: f64,
    pub model: Option<CostModelParams>,
    pub seed: u64,
    pub output: PathBuf,
    /// Timesteps for the regression harness.
    pub steps: usize,
    pub sweep: Sweep,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            extent: Extent::Local([16, 16, 16]),
            proc_dims: [1, 1, 1],
            periodic: [true; 3],
            m: 19,
            strategy: StrategySelection::Both,
            iterations: 2000,
            repetitions: 5,
            warmup: 10,
            tau: 1.0,
            physics: Physics::None,
            overlap_enabled: false,
            overlap_intensity: 0,
            watchdog_seconds: 30.0,
            model: None,
            seed: 1,
            output: PathBuf::from("results"),
            steps: 10,
            sweep: Sweep::None,
        }
    }
}

fn parse_triple<T: FromStr>(key: &str, value: &str) -> Result<[T; 3]> {
    let parts: Vec<&str> = value
        .split(|c: char| c == ',' || c == 'x' || c.is_whitespace())
        .filter(|p| !p.is_empty())
        .collect();
    let bad = || Error::Config(format!("{key} expects three values, got '{value}'"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let v: Vec<T> = parts
        .iter()
        .map(|p| p.parse::<T>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let mut it = v.into_iter();
    Ok([it.next().unwrap(), it.next().unwrap(), it.next().unwrap()])
}

fn parse_scalar<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got '{value}'"))),
    }
}

/// `16,24,32` or `16..88:8` (inclusive, step 8).
fn parse_sizes(key: &str, value: &str) -> Result<Vec<usize>> {
    let value = value.trim();
    if let Some((range, step)) = value.split_once(':') {
        let (lo, hi) = range
            .split_once("..")
            .ok_or_else(|| Error::Config(format!("{key}: expected lo..hi:step, got '{value}'")))?;
        let (lo, hi, step): (usize, usize, usize) = (
            parse_scalar(key, lo)?,
            parse_scalar(key, hi)?,
            parse_scalar(key, step)?,
        );
        if step == 0 || lo > hi {
            return Err(Error::Config(format!("{key}: empty range '{value}'")));
        }
        return Ok((lo..=hi).step_by(step).collect());
    }
    value
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| parse_scalar(key, p))
        .collect()
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut pending_kind: Option<String> = None;
        let mut pending_values: Vec<(String, String)> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            // Sweep keys are resolved together once the file is read.
            if k == "sweep.kind" {
                pending_kind = Some(v);
            } else if k.starts_with("sweep.") {
                pending_values.push((k, v));
            } else {
                self.set(&k, &v)?;
            }
        }
        if let Some(kind) = pending_kind {
            self.set("sweep.kind", &kind)?;
        }
        for (k, v) in pending_values {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "global_dims" => self.extent = Extent::Global(parse_triple(key, value)?),
            "local_dims" => self.extent = Extent::Local(parse_triple(key, value)?),
            "proc_dims" => self.proc_dims = parse_triple(key, value)?,
            "periodic" => {
                let v: [String; 3] = parse_triple(key, value)?;
                self.periodic = [
                    parse_bool(key, &v[0])?,
                    parse_bool(key, &v[1])?,
                    parse_bool(key, &v[2])?,
                ];
            }
            "m" => self.m = parse_scalar(key, value)?,
            "halo.strategy" => self.strategy = value.parse()?,
            "iterations" => self.iterations = parse_scalar(key, value)?,
            "repetitions" => self.repetitions = parse_scalar(key, value)?,
            "warmup" => self.warmup = parse_scalar(key, value)?,
            "tau" => self.tau = parse_scalar(key, value)?,
            "physics" => self.physics = value.parse()?,
            "overlap.enabled" => self.overlap_enabled = parse_bool(key, value)?,
            "overlap.intensity" => self.overlap_intensity = parse_scalar(key, value)?,
            "transport.watchdog_seconds" => self.watchdog_seconds = parse_scalar(key, value)?,
            "transport.model" => {
                let v = value.trim().trim_start_matches('{').trim_end_matches('}');
                if matches!(v.trim().to_ascii_lowercase().as_str(), "off" | "none" | "") {
                    self.model = None;
                } else {
                    let parts: Vec<&str> = v.split(',').collect();
                    if parts.len() != 2 {
                        return Err(Error::Config(format!(
                            "transport.model expects {{latency_us, bandwidth_MBps}}, got '{value}'"
                        )));
                    }
                    let l: f64 = parse_scalar(key, parts[0])?;
                    let b: f64 = parse_scalar(key, parts[1])?;
                    self.model = Some(CostModelParams::new(l * 1e-6, b)?);
                }
            }
            "transport.model.latency_us" => {
                let l: f64 = parse_scalar(key, value)?;
                let b = self.model.map_or(f64::INFINITY, |m| m.bandwidth_mbps);
                self.model = Some(CostModelParams::new(l * 1e-6, b)?);
            }
            "transport.model.bandwidth_MBps" => {
                let b: f64 = parse_scalar(key, value)?;
                let l = self.model.map_or(0.0, |m| m.latency_s);
                self.model = Some(CostModelParams::new(l, b)?);
            }
            "seed" => self.seed = parse_scalar(key, value)?,
            "output" => self.output = PathBuf::from(value.trim()),
            "steps" => self.steps = parse_scalar(key, value)?,
            "sweep.kind" => {
                self.sweep = match value.trim().to_ascii_lowercase().as_str() {
                    "none" => Sweep::None,
                    "cubic" => Sweep::Cubic(Vec::new()),
                    "noncubic" => Sweep::Noncubic(Vec::new()),
                    "strong" => Sweep::Strong(Vec::new()),
                    other => return Err(Error::Config(format!("unknown sweep kind '{other}'"))),
                }
            }
            "sweep.sizes" => {
                let sizes = parse_sizes(key, value)?;
                match &mut self.sweep {
                    Sweep::Cubic(v) | Sweep::Noncubic(v) => *v = sizes,
                    _ => {
                        return Err(Error::Config(
                            "sweep.sizes needs sweep.kind = cubic or noncubic".into(),
                        ))
                    }
                }
            }
            "sweep.proc_grids" => {
                let grids = value
                    .split(';')
                    .filter(|g| !g.trim().is_empty())
                    .map(|g| parse_triple(key, g))
                    .collect::<Result<Vec<[usize; 3]>>>()?;
                match &mut self.sweep {
                    Sweep::Strong(v) => *v = grids,
                    _ => {
                        return Err(Error::Config(
                            "sweep.proc_grids needs sweep.kind = strong".into(),
                        ))
                    }
                }
            }
            other => return Err(Error::Config(format!("unknown configuration key '{other}'"))),
        }
        Ok(())
    }

    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{}' is not key=value", o.as_ref())))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn transport(&self) -> TransportConfig {
        TransportConfig {
            watchdog: Duration::from_secs_f64(self.watchdog_seconds),
            model: self.model,
        }
    }

    /// Local dims for the base (unswept) configuration.
    pub fn local_dims(&self) -> Result<[usize; 3]> {
        match self.extent {
            Extent::Local(l) => Ok(l),
            Extent::Global(g) => decompose(g, self.proc_dims),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.repetitions == 0 {
            return fail("repetitions must be at least 1".into());
        }
        if self.iterations == 0 {
            return fail("iterations must be at least 1".into());
        }
        if !(self.tau > 0.5) {
            return fail(format!("tau must exceed 0.5, got {}", self.tau));
        }
        if !(self.watchdog_seconds > 0.0) || !self.watchdog_seconds.is_finite() {
            return fail("transport.watchdog_seconds must be positive".into());
        }
        if let Some(model) = self.model {
            CostModelParams::new(model.latency_s, model.bandwidth_mbps)?;
        }
        if self.m == 0 || self.m > crate::lattice::MAX_VELOCITIES {
            return fail(format!("m must be in 1..=27, got {}", self.m));
        }
        if self.physics == Physics::Full {
            crate::lattice::VelocitySet::with_count(self.m)?;
        }
        for case in self.cases()? {
            if case.proc_dims.iter().chain(&case.local_dims).any(|&d| d == 0) {
                return fail(format!("zero extent in {case:?}"));
            }
        }
        Ok(())
    }

    /// Expands the sweep into concrete (process grid, local dims) cases.
    pub fn cases(&self) -> Result<Vec<Case>> {
        let single = |local_dims| Case {
            proc_dims: self.proc_dims,
            local_dims,
        };
        let cases = match &self.sweep {
            Sweep::None => vec![single(self.local_dims()?)],
            Sweep::Cubic(sizes) => sizes.iter().map(|&l| single([l, l, l])).collect(),
            Sweep::Noncubic(xs) => xs
                .iter()
                .map(|&x| {
                    if x % 2 != 0 {
                        Err(Error::Config(format!("non-cubic x must be even, got {x}")))
                    } else {
                        Ok(single([x, 3 * x / 2, 2 * x]))
                    }
                })
                .collect::<Result<_>>()?,
            Sweep::Strong(grids) => {
                let Extent::Global(g) = self.extent else {
                    return Err(Error::Config("a strong-scaling sweep needs global_dims".into()));
                };
                grids
                    .iter()
                    .map(|&p| {
                        Ok(Case {
                            proc_dims: p,
                            local_dims: decompose(g, p)?,
                        })
                    })
                    .collect::<Result<_>>()?
            }
        };
        if cases.is_empty() {
            return Err(Error::Config("the sweep expands to no cases".into()));
        }
        Ok(cases)
    }

    /// Named experiment matrices.
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = Self::default();
        match name {
            // 4x3x2 contexts, cubic subdomains 16^3..88^3.
            "cubic" => {
                cfg.proc_dims = [4, 3, 2];
                cfg.sweep = Sweep::Cubic((16..=88).step_by(8).collect());
            }
            // 4x3x2 contexts, x by 1.5x by 2x subdomains.
            "noncubic" => {
                cfg.proc_dims = [4, 3, 2];
                cfg.sweep = Sweep::Noncubic(NONCUBIC_X.to_vec());
            }
            "strong96" => {
                cfg.extent = Extent::Global([96; 3]);
                cfg.sweep = Sweep::Strong(STRONG_96.iter().map(|&(_, p, _)| p).collect());
            }
            "strong192" => {
                cfg.extent = Extent::Global([192; 3]);
                cfg.sweep = Sweep::Strong(STRONG_192.iter().map(|&(_, p, _)| p).collect());
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown preset '{other}' (cubic, noncubic, strong96, strong192)"
                )))
            }
        }
        Ok(cfg)
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:?} on {:?}, m={}, {:?}, {} iterations x {} repetitions",
            self.extent, self.proc_dims, self.m, self.strategy, self.iterations, self.repetitions
        )
    }
}

/// x values of the x by 1.5x by 2x subdomain sweep.
pub const NONCUBIC_X: [usize; 10] = [16, 24, 28, 32, 36, 40, 44, 48, 52, 56];

/// (contexts, process grid, local dims) for the 96^3 strong-scaling runs.
pub const STRONG_96: [(usize, [usize; 3], [usize; 3]); 6] = [
    (24, [4, 3, 2], [24, 32, 48]),
    (48, [4, 4, 3], [24, 24, 32]),
    (72, [6, 4, 3], [16, 24, 32]),
    (96, [6, 4, 4], [16, 24, 24]),
    (144, [6, 6, 4], [16, 16, 24]),
    (192, [8, 6, 4], [12, 16, 24]),
];

/// (contexts, process grid, local dims) for the 192^3 strong-scaling runs.
pub const STRONG_192: [(usize, [usize; 3], [usize; 3]); 7] = [
    (24, [4, 3, 2], [48, 64, 96]),
    (48, [4, 4, 3], [48, 48, 64]),
    (96, [6, 4, 4], [32, 48, 48]),
    (192, [8, 6, 4], [24, 32, 48]),
    (384, [8, 8, 6], [24, 24, 32]),
    (576, [12, 8, 6], [16, 24, 32]),
    (768, [12, 8, 8], [16, 24, 24]),
];
