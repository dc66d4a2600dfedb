//! Analytic inference-time model for running a tuned task next to its
//! frozen backbone, plus an event-driven pipeline simulator used as an
//! independent oracle.
//!
//! The model assumes compute and weight IO overlap: while layer `i`
//! computes, the weights of layer `i+1` load. A tuned range `[l_start,
//! l_end]` forks the pipeline (double compute and double IO per layer);
//! after `l_end` the two streams merge along the batch axis, doubling
//! compute while sharing IO. Boundary conventions: `c_0 = 0`,
//! `s_{N+1} = 0`.
//!
//! `total_time` measures the forked portion's pipeline: the clock starts
//! when the last shared layer begins computing and the fork's first loads
//! begin, so the shared prefix before `l_start - 1` contributes nothing.
//! `baseline_time` is the whole single-task pipeline from its first load.
//! Their difference (`added_cost`) is meaningful for comparing tuned
//! ranges; for fork ranges starting at layer 1 it is provably nonnegative.

use serde::{Deserialize, Serialize};

use crate::model::BlockNetwork;
use crate::{Error, Result};

/// Per-layer compute times `c` and IO times `s`, in abstract units.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostProfile {
    pub c: Vec<f64>,
    pub s: Vec<f64>,
}

impl CostProfile {
    pub fn new(c: Vec<f64>, s: Vec<f64>) -> Result<CostProfile> {
        if c.len() != s.len() {
            return Err(Error::InvalidConfig(format!(
                "cost profile needs matching lengths, got c={} s={}",
                c.len(),
                s.len()
            )));
        }
        if c.is_empty() {
            return Err(Error::InvalidConfig("cost profile must have at least one layer".into()));
        }
        if c.iter().chain(s.iter()).any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidConfig("cost entries must be finite and >= 0".into()));
        }
        Ok(CostProfile { c, s })
    }

    pub fn layers(&self) -> usize {
        self.c.len()
    }

    /// `c_i` with the 1-based convention and `c_0 = 0`.
    fn compute(&self, i: usize) -> f64 {
        if i == 0 {
            0.0
        } else {
            self.c[i - 1]
        }
    }

    /// `s_i` with the 1-based convention and `s_{N+1} = 0`.
    fn io(&self, i: usize) -> f64 {
        if i > self.layers() {
            0.0
        } else {
            self.s[i - 1]
        }
    }
}

/// Consecutive tuned layers `[l_start, l_end]`, 1-based inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TuneRange {
    pub l_start: usize,
    pub l_end: usize,
}

impl TuneRange {
    pub fn new(l_start: usize, l_end: usize) -> TuneRange {
        TuneRange { l_start, l_end }
    }

    pub fn validate(&self, profile: &CostProfile) -> Result<()> {
        if self.l_start < 1 || self.l_start > self.l_end || self.l_end > profile.layers() {
            return Err(Error::InvalidConfig(format!(
                "invalid tune range [{}, {}] for {} layers",
                self.l_start,
                self.l_end,
                profile.layers()
            )));
        }
        Ok(())
    }
}

/// Closed-form time of the forked pipeline:
///
/// `max(2 s_ls, c_{ls-1}) + sum_{i=ls}^{le} 2 max(c_i, s_{i+1})
///  + sum_{i=le+1}^{N-1} max(2 c_i, s_{i+1}) + 2 c_N`
pub fn total_time(profile: &CostProfile, range: &TuneRange) -> Result<f64> {
    range.validate(profile)?;
    let n = profile.layers();
    let (ls, le) = (range.l_start, range.l_end);
    let mut t = (2.0 * profile.io(ls)).max(profile.compute(ls - 1));
    for i in ls..=le {
        t += 2.0 * profile.compute(i).max(profile.io(i + 1));
    }
    for i in (le + 1)..n {
        t += (2.0 * profile.compute(i)).max(profile.io(i + 1));
    }
    t += 2.0 * profile.compute(n);
    Ok(t)
}

/// Single-task pipeline under the same overlap model:
/// `s_1 + sum_{i=1}^{N-1} max(c_i, s_{i+1}) + c_N`.
pub fn baseline_time(profile: &CostProfile) -> f64 {
    let n = profile.layers();
    let mut t = profile.io(1);
    for i in 1..n {
        t += profile.compute(i).max(profile.io(i + 1));
    }
    t + profile.compute(n)
}

/// Extra time of serving the tuned task next to the backbone:
/// `total_time - baseline_time`. Comparable across ranges on one profile.
pub fn added_cost(profile: &CostProfile, range: &TuneRange) -> Result<f64> {
    Ok(total_time(profile, range)? - baseline_time(profile))
}

// ---------------------------------------------------------------------------
// Event-driven simulator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct Stage {
    compute: f64,
    /// Prefetch issued for the *next* stage when this stage's compute
    /// starts; zero when nothing is left to load.
    prefetch: f64,
}

/// Two-resource discrete-event simulation (one compute unit, one IO unit,
/// prefetch depth 1). Each stage's prefetch is triggered by the start of
/// its compute; the next compute starts once both the current compute and
/// its prefetch have finished.
///
/// With `fork = true` the tuned range doubles both compute and IO, the
/// merged tail doubles compute only, and the clock starts at the last
/// shared layer (matching `total_time`'s measurement window). With
/// `fork = false` it reproduces `baseline_time` exactly.
pub fn simulate_pipeline(profile: &CostProfile, range: &TuneRange, fork: bool) -> Result<f64> {
    let n = profile.layers();
    let mut stages: Vec<Stage> = Vec::new();
    let first_load;
    if fork {
        range.validate(profile)?;
        let (ls, le) = (range.l_start, range.l_end);
        // Entry: the prefix tail computes while both weight copies of the
        // first forked layer load.
        first_load = 2.0 * profile.io(ls);
        stages.push(Stage {
            compute: profile.compute(ls - 1),
            prefetch: first_load,
        });
        for i in ls..=le {
            stages.push(Stage {
                compute: 2.0 * profile.compute(i),
                prefetch: 2.0 * profile.io(i + 1),
            });
        }
        for i in (le + 1)..n {
            stages.push(Stage {
                compute: 2.0 * profile.compute(i),
                prefetch: profile.io(i + 1),
            });
        }
        // Final double compute of layer N; when le == N this repeats the
        // model's own double-count of c_N.
        stages.push(Stage {
            compute: 2.0 * profile.compute(n),
            prefetch: 0.0,
        });
    } else {
        first_load = profile.io(1);
        stages.push(Stage {
            compute: 0.0,
            prefetch: first_load,
        });
        for i in 1..=n {
            stages.push(Stage {
                compute: profile.compute(i),
                prefetch: profile.io(i + 1),
            });
        }
    }

    // Event loop over the two resource clocks. Compute unit processes
    // stages in order; the IO unit is serial with the prefetch for stage
    // k+1 triggered by the start of stage k's compute.
    let mut io_free = 0.0f64;
    let mut compute_free = 0.0f64;
    let mut weights_ready = 0.0f64; // completion of the pending prefetch
    for (k, stage) in stages.iter().enumerate() {
        let start = if k == 0 {
            // clock zero: entry compute and the first load both begin
            0.0f64
        } else {
            compute_free.max(weights_ready)
        };
        // issue this stage's prefetch at its compute start
        let io_start = start.max(io_free);
        io_free = io_start + stage.prefetch;
        weights_ready = io_free;
        compute_free = start + stage.compute;
    }
    Ok(compute_free)
}

/// One row of a fixed-width range sweep.
#[derive(Debug, Clone, Copy)]
pub struct SweepRow {
    pub l_start: usize,
    pub l_end: usize,
    pub total: f64,
    pub baseline: f64,
    pub added: f64,
}

/// Evaluates every width-`w` range; also returns the argmin-added row index.
pub fn sweep_ranges(profile: &CostProfile, width: usize) -> Result<(Vec<SweepRow>, usize)> {
    let n = profile.layers();
    if width < 1 || width > n {
        return Err(Error::InvalidConfig(format!(
            "sweep width {width} out of range for {n} layers"
        )));
    }
    let baseline = baseline_time(profile);
    let mut rows = Vec::with_capacity(n - width + 1);
    for ls in 1..=(n - width + 1) {
        let range = TuneRange::new(ls, ls + width - 1);
        let total = total_time(profile, &range)?;
        rows.push(SweepRow {
            l_start: ls,
            l_end: range.l_end,
            total,
            baseline,
            added: total - baseline,
        });
    }
    let mut argmin = 0;
    for (i, row) in rows.iter().enumerate().skip(1) {
        if row.added < rows[argmin].added {
            argmin = i;
        }
    }
    Ok((rows, argmin))
}

/// Calibration constants mapping network arithmetic to abstract time.
#[derive(Debug, Clone, Copy)]
pub struct UnitCosts {
    pub time_per_mac: f64,
    pub time_per_byte: f64,
}

impl Default for UnitCosts {
    fn default() -> Self {
        UnitCosts {
            time_per_mac: 1.0,
            time_per_byte: 0.05,
        }
    }
}

/// Derives a cost profile from a network: per-sample multiply-adds set the
/// compute entries, parameter bytes (8 per f64) set the IO entries.
pub fn profile_from_network(net: &BlockNetwork, units: &UnitCosts) -> Result<CostProfile> {
    if !(units.time_per_mac > 0.0) || !(units.time_per_byte > 0.0) {
        return Err(Error::InvalidConfig("unit costs must be positive".into()));
    }
    let mut c = Vec::with_capacity(net.num_blocks());
    let mut s = Vec::with_capacity(net.num_blocks());
    for block in net.blocks() {
        let d = block.width() as f64;
        let h = block.hidden_width() as f64;
        let macs = d * h + h * d;
        let bytes = block.param_count() as f64 * 8.0;
        c.push(macs * units.time_per_mac);
        s.push(bytes * units.time_per_byte);
    }
    CostProfile::new(c, s)
}
