//! CSV emission, summaries, plot-ready data files and the verifier.
//!
//! Files written into the output directory:
//!
//! | file | content |
//! |------|---------|
//! | `raw.csv` | one [`ResultRow`] per repetition |
//! | `summary.csv` | mean and population sigma per configuration |
//! | `metadata.json` | [`RunMetadata`] |
//! | `*.dat` | two-column plot data, one file per figure family and strategy |

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::{ResultRow, RunMetadata};
use crate::error::{Error, Result};
use crate::metrics::{
    common_baseline, efficiency, halo_bytes, mean, speedup, stddev, Baseline, BYTES_PER_MB,
};

/// Mean and sigma of one configuration across its repetitions. Derived
/// quantities are computed per repetition before aggregating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
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
    pub contexts: usize,
    pub repetitions: usize,
    pub iterations: usize,
    pub t_halo_mean_s: f64,
    pub t_halo_sigma_s: f64,
    pub t_step_mean_s: f64,
    pub t_step_sigma_s: f64,
    #[serde(rename = "B_eff_mean_MBps")]
    pub b_eff_mean_mbps: f64,
    #[serde(rename = "B_eff_sigma_MBps")]
    pub b_eff_sigma_mbps: f64,
    pub updates_mean: f64,
    pub updates_sigma: f64,
}

impl SummaryRow {
    pub fn local_dims(&self) -> [usize; 3] {
        [self.lx, self.ly, self.lz]
    }

    fn runtime(&self, scope: TimingScope) -> (f64, f64) {
        match scope {
            TimingScope::Halo => (self.t_halo_mean_s, self.t_halo_sigma_s),
            TimingScope::Step => (self.t_step_mean_s, self.t_step_sigma_s),
        }
    }
}

type GroupKey = (String, [usize; 3], [usize; 3], usize, usize);

fn group_key(r: &ResultRow) -> GroupKey {
    (r.strategy.clone(), r.proc_dims(), r.local_dims(), r.m, r.iterations)
}

/// Aggregates raw rows, preserving first-appearance order of configurations.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut order: Vec<GroupKey> = Vec::new();
    let mut groups: BTreeMap<GroupKey, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        let k = group_key(r);
        if !groups.contains_key(&k) {
            order.push(k.clone());
        }
        groups.entry(k).or_default().push(r);
    }
    order
        .into_iter()
        .map(|k| {
            let g = &groups[&k];
            let col = |f: fn(&ResultRow) -> f64| -> Vec<f64> { g.iter().map(|r| f(r)).collect() };
            let halo = col(|r| r.t_halo_total_s);
            let step = col(|r| r.t_step_total_s);
            let beff = col(|r| r.derived().0);
            let upd = col(|r| r.derived().1);
            let first = g[0];
            SummaryRow {
                strategy: first.strategy.clone(),
                px: first.px,
                py: first.py,
                pz: first.pz,
                lx: first.lx,
                ly: first.ly,
                lz: first.lz,
                m: first.m,
                contexts: first.contexts(),
                repetitions: g.len(),
                iterations: first.iterations,
                t_halo_mean_s: mean(&halo),
                t_halo_sigma_s: stddev(&halo),
                t_step_mean_s: mean(&step),
                t_step_sigma_s: stddev(&step),
                b_eff_mean_mbps: mean(&beff),
                b_eff_sigma_mbps: stddev(&beff),
                updates_mean: mean(&upd),
                updates_sigma: stddev(&upd),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimingScope {
    Halo,
    Step,
}

impl TimingScope {
    pub fn from_metadata(meta: &RunMetadata) -> Self {
        if meta.timing_scope == "step" {
            TimingScope::Step
        } else {
            TimingScope::Halo
        }
    }
}

/// Which figure families to emit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotMode {
    /// B_eff against message size and update rate against subdomain size.
    Size,
    /// Runtime, speedup, efficiency and runtime difference against contexts.
    Scaling,
}

/// One two-column data series.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub x_label: &'static str,
    pub y_label: &'static str,
    pub points: Vec<(f64, f64)>,
}

fn by_strategy(summary: &[SummaryRow]) -> BTreeMap<String, Vec<&SummaryRow>> {
    let mut out: BTreeMap<String, Vec<&SummaryRow>> = BTreeMap::new();
    for s in summary {
        out.entry(s.strategy.clone()).or_default().push(s);
    }
    out
}

/// Builds the plot series for a summary.
pub fn plot_series(summary: &[SummaryRow], mode: PlotMode, scope: TimingScope) -> Result<Vec<Series>> {
    let mut out = Vec::new();
    let groups = by_strategy(summary);
    match mode {
        PlotMode::Size => {
            for (strategy, rows) in &groups {
                out.push(Series {
                    name: format!("beff_vs_message_mb.{strategy}"),
                    x_label: "halo_MB_per_exchange",
                    y_label: "B_eff_MBps",
                    points: rows
                        .iter()
                        .map(|r| (halo_bytes(r.local_dims(), r.m) as f64 / BYTES_PER_MB, r.b_eff_mean_mbps))
                        .collect(),
                });
                out.push(Series {
                    name: format!("updates_vs_subdomain.{strategy}"),
                    x_label: "subdomain_sites",
                    y_label: "updates_per_core_per_s",
                    points: rows
                        .iter()
                        .map(|r| (r.local_dims().iter().product::<usize>() as f64, r.updates_mean))
                        .collect(),
                });
            }
        }
        PlotMode::Scaling => {
            let runtimes: BTreeMap<&String, BTreeMap<usize, f64>> = groups
                .iter()
                .map(|(s, rows)| (s, rows.iter().map(|r| (r.contexts, r.runtime(scope).0)).collect()))
                .collect();
            // The shared baseline is the blocking series when present.
            let reference = runtimes
                .iter()
                .find(|(s, _)| s.as_str() == "blocking")
                .or_else(|| runtimes.iter().next())
                .map(|(_, t)| t);
            let common = reference.map(common_baseline).transpose()?;
            for (strategy, times) in &runtimes {
                let base_p = *times.keys().next().expect("non-empty series");
                out.push(Series {
                    name: format!("runtime_vs_contexts.{strategy}"),
                    x_label: "contexts",
                    y_label: "runtime_s",
                    points: times.iter().map(|(&p, &t)| (p as f64, t)).collect(),
                });
                let own = speedup(times, Baseline::PerVersion)?;
                out.push(Series {
                    name: format!("speedup_vs_contexts.{strategy}"),
                    x_label: "contexts",
                    y_label: "speedup",
                    points: own.iter().map(|(&p, &s)| (p as f64, s)).collect(),
                });
                if let Some(common) = common {
                    let shared = speedup(times, common)?;
                    out.push(Series {
                        name: format!("speedup_common_vs_contexts.{strategy}"),
                        x_label: "contexts",
                        y_label: "speedup_common_T1",
                        points: shared.iter().map(|(&p, &s)| (p as f64, s)).collect(),
                    });
                }
                out.push(Series {
                    name: format!("efficiency_vs_contexts.{strategy}"),
                    x_label: "contexts",
                    y_label: "efficiency",
                    points: efficiency(&own, base_p).iter().map(|(&p, &e)| (p as f64, e)).collect(),
                });
            }
            let find = |name: &str| runtimes.iter().find(|(s, _)| s.as_str() == name).map(|(_, t)| t);
            if let (Some(b), Some(nb)) = (find("blocking"), find("nonblocking")) {
                out.push(Series {
                    name: "runtime_difference_vs_contexts".into(),
                    x_label: "contexts",
                    y_label: "nonblocking_minus_blocking_s",
                    points: nb
                        .iter()
                        .filter_map(|(p, t)| b.get(p).map(|tb| (*p as f64, t - tb)))
                        .collect(),
                });
            }
        }
    }
    Ok(out)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Writes raw rows, the summary, metadata and plot files. Returns the
/// paths written.
pub fn emit_summary(
    rows: &[ResultRow],
    metadata: &RunMetadata,
    mode: PlotMode,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let raw = dir.join("raw.csv");
    write_csv(&raw, rows)?;
    written.push(raw);

    let summary = summarize(rows);
    let path = dir.join("summary.csv");
    write_csv(&path, &summary)?;
    written.push(path);

    let path = dir.join("metadata.json");
    fs::write(&path, serde_json::to_string_pretty(metadata)?)?;
    written.push(path);

    for series in plot_series(&summary, mode, TimingScope::from_metadata(metadata))? {
        let path = dir.join(format!("{}.dat", series.name));
        let mut f = fs::File::create(&path)?;
        writeln!(f, "# {} {}", series.x_label, series.y_label)?;
        for (x, y) in &series.points {
            writeln!(f, "{x} {y}")?;
        }
        written.push(path);
    }
    Ok(written)
}

/// Problems found by [`verify`]; empty means the files are consistent.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VerifyReport {
    pub rows_checked: usize,
    pub problems: Vec<String>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.problems.is_empty()
    }
}

/// Recomputes every derived column from the raw columns and checks the
/// summary and message accounting against them, bit for bit.
pub fn verify(dir: &Path) -> Result<VerifyReport> {
    let rows: Vec<ResultRow> = read_csv(&dir.join("raw.csv"))?;
    let mut report = VerifyReport {
        rows_checked: rows.len(),
        problems: Vec::new(),
    };
    let meta: Option<RunMetadata> = fs::read_to_string(dir.join("metadata.json"))
        .ok()
        .map(|s| serde_json::from_str(&s))
        .transpose()?;
    let periodic = meta.as_ref().map_or(false, |m| m.periodic == [true; 3]);

    for (n, r) in rows.iter().enumerate() {
        let (beff, upd) = r.derived();
        if beff.to_bits() != r.b_eff_mbps.to_bits() {
            report
                .problems
                .push(format!("row {n}: B_eff_MBps {} != recomputed {beff}", r.b_eff_mbps));
        }
        if upd.to_bits() != r.updates_per_core.to_bits() {
            report.problems.push(format!(
                "row {n}: updates_per_core {} != recomputed {upd}",
                r.updates_per_core
            ));
        }
        if periodic {
            let per = match r.strategy.as_str() {
                "blocking" => Some(6),
                "nonblocking" => Some(26),
                _ => None,
            };
            if let Some(per) = per {
                let expect = (per * r.contexts() * r.iterations) as u64;
                if r.messages_sent != expect {
                    report.problems.push(format!(
                        "row {n}: messages_sent {} != {per} x {} ranks x {} iterations",
                        r.messages_sent,
                        r.contexts(),
                        r.iterations
                    ));
                }
                let bytes = (halo_bytes(r.local_dims(), r.m) * r.contexts() * r.iterations) as u64;
                if r.bytes_sent != bytes {
                    report
                        .problems
                        .push(format!("row {n}: bytes_sent {} != expected {bytes}", r.bytes_sent));
                }
            }
        }
    }

    let summary_path = dir.join("summary.csv");
    if summary_path.exists() {
        let stored: Vec<SummaryRow> = read_csv(&summary_path)?;
        let fresh = summarize(&rows);
        if stored.len() != fresh.len() {
            report.problems.push(format!(
                "summary has {} rows, raw data gives {}",
                stored.len(),
                fresh.len()
            ));
        }
        for (n, (a, b)) in stored.iter().zip(&fresh).enumerate() {
            if !summary_bits_equal(a, b) {
                report.problems.push(format!("summary row {n} differs from recomputation"));
            }
        }
    }
    Ok(report)
}

fn summary_bits_equal(a: &SummaryRow, b: &SummaryRow) -> bool {
    let floats = |s: &SummaryRow| {
        [
            s.t_halo_mean_s,
            s.t_halo_sigma_s,
            s.t_step_mean_s,
            s.t_step_sigma_s,
            s.b_eff_mean_mbps,
            s.b_eff_sigma_mbps,
            s.updates_mean,
            s.updates_sigma,
        ]
        .map(f64::to_bits)
    };
    a.strategy == b.strategy
        && a.local_dims() == b.local_dims()
        && (a.px, a.py, a.pz, a.m, a.contexts, a.repetitions, a.iterations)
            == (b.px, b.py, b.pz, b.m, b.contexts, b.repetitions, b.iterations)
        && floats(a) == floats(b)
}
