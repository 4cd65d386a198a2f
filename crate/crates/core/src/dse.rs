//! Area / power feasibility, design-space sweeps and array-size scaling.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    run_end_to_end, run_single_layer, E2eParams, RunOptions, SimReport, Strategy,
};
use crate::config::{validate_configs, HardwareConfig, ModelConfig};
use crate::error::SimError;
use crate::workload::WorkloadParams;

/// Per-die area budget and package power budget coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DseConstraints {
    /// mm² per D2D module.
    pub a_ucie: f64,
    /// Bytes/s per D2D module.
    pub bw_ucie: f64,
    /// mm² of compute logic per die.
    pub a_compute: f64,
    /// mm² per buffer byte.
    pub a_buffer_per_byte: f64,
    /// Die area ceiling, mm².
    pub a_th: f64,
    /// Compute power of the package, W.
    pub p_compute: f64,
    /// W per byte/s of per-die D2D bandwidth.
    pub p_d2d_per_bw: f64,
    /// W per byte/s of total DDR bandwidth.
    pub p_ddr_per_bw: f64,
    /// Package power ceiling, W.
    pub p_th: f64,
}

impl Default for DseConstraints {
    fn default() -> Self {
        DseConstraints {
            a_ucie: 1.5,
            bw_ucie: 192e9,
            a_compute: 4.0,
            a_buffer_per_byte: 1.2e-6,
            a_th: 30.0,
            p_compute: 8.748,
            p_d2d_per_bw: 1.6e-11,
            p_ddr_per_bw: 1.6e-10,
            p_th: 60.0,
        }
    }
}

impl DseConstraints {
    pub fn validate(&self) -> Result<(), String> {
        let all = [
            self.a_ucie,
            self.bw_ucie,
            self.a_compute,
            self.a_buffer_per_byte,
            self.a_th,
            self.p_compute,
            self.p_d2d_per_bw,
            self.p_ddr_per_bw,
            self.p_th,
        ];
        if all.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err("constraint coefficients must be finite and non-negative".into());
        }
        if self.bw_ucie <= 0.0 {
            return Err("bw_ucie must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Feasibility {
    pub d2d_modules: u64,
    pub area_mm2: f64,
    pub power_w: f64,
    pub violations: Vec<String>,
}

impl Feasibility {
    pub fn feasible(&self) -> bool {
        self.violations.is_empty()
    }
}

/// `ceil(BW_D2D / BW_UCIe) A_UCIe + A_Compute + A_Buffer <= A_th` and
/// `P_Compute + P_D2D + P_DDR <= P_th`.
pub fn check_constraints(hw: &HardwareConfig, c: &DseConstraints) -> Feasibility {
    let d2d_modules = (hw.d2d_bw_bytes_per_s / c.bw_ucie).ceil().max(0.0) as u64;
    let area_mm2 = d2d_modules as f64 * c.a_ucie
        + c.a_compute
        + c.a_buffer_per_byte * hw.buffer_bytes_per_chiplet as f64;
    let ddr_total = hw.ddr_bw_bytes_per_s_per_channel * hw.ddr_channels as f64;
    let power_w = c.p_compute + c.p_d2d_per_bw * hw.d2d_bw_bytes_per_s + c.p_ddr_per_bw * ddr_total;
    let mut violations = Vec::new();
    if area_mm2 > c.a_th {
        violations.push(format!("area {area_mm2:.3} mm2 > {}", c.a_th));
    }
    if power_w > c.p_th {
        violations.push(format!("power {power_w:.3} W > {}", c.p_th));
    }
    Feasibility {
        d2d_modules,
        area_mm2,
        power_w,
        violations,
    }
}

/// Workload, strategy and seeds shared by every point of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub strategy: Strategy,
    pub tokens_per_iteration: usize,
    pub skew: f64,
    pub num_requests: usize,
    pub seeds: Vec<u64>,
    /// Multi-iteration runs when set, single MoE layers otherwise.
    pub e2e: Option<E2eParams>,
    pub options: RunOptions,
}

impl SweepSpec {
    pub fn single_layer(strategy: Strategy, tokens: usize, seeds: Vec<u64>) -> Self {
        SweepSpec {
            strategy,
            tokens_per_iteration: tokens,
            skew: 1.2,
            num_requests: 4.min(tokens.max(1)),
            seeds,
            e2e: None,
            options: RunOptions::default(),
        }
    }

    fn workload(&self, seed: u64) -> WorkloadParams {
        WorkloadParams {
            tokens_per_iteration: self.tokens_per_iteration,
            num_requests: self.num_requests,
            skew: self.skew,
            seed,
            iterations: self.e2e.map_or(1, |e| e.iterations),
        }
    }

    /// Runs one seed; latency is the layer makespan, or the time per iteration.
    pub fn run(
        &self,
        seed: u64,
        hw: &HardwareConfig,
        model: &ModelConfig,
    ) -> Result<(f64, f64, SimReport), SimError> {
        let w = self.workload(seed);
        let rep = match &self.e2e {
            Some(e) => run_end_to_end(&w, self.strategy, hw, model, e, &self.options)?,
            None => run_single_layer(&w, 0, self.strategy, hw, model, &self.options)?,
        };
        let latency = match &self.e2e {
            Some(e) => rep.makespan_s / e.iterations.max(1) as f64,
            None => rep.makespan_s,
        };
        Ok((rep.mean_utilization(), latency, rep))
    }
}

/// Axes of a sweep; every combination is one point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DseGrid {
    pub buffer_bytes: Vec<u64>,
    /// Bytes/s per DDR channel.
    pub ddr_bw: Vec<f64>,
    /// Bytes/s per D2D link.
    pub d2d_bw: Vec<f64>,
    pub micro_slices: Vec<usize>,
}

impl DseGrid {
    /// The single point described by `hw` and `model`.
    pub fn point(hw: &HardwareConfig, model: &ModelConfig) -> Self {
        DseGrid {
            buffer_bytes: vec![hw.buffer_bytes_per_chiplet],
            ddr_bw: vec![hw.ddr_bw_bytes_per_s_per_channel],
            d2d_bw: vec![hw.d2d_bw_bytes_per_s],
            micro_slices: vec![model.micro_slices_per_expert],
        }
    }

    pub fn points(&self) -> Vec<DsePoint> {
        let mut out = Vec::new();
        for &buffer_bytes in &self.buffer_bytes {
            for &ddr_bw in &self.ddr_bw {
                for &d2d_bw in &self.d2d_bw {
                    for &micro_slices in &self.micro_slices {
                        out.push(DsePoint {
                            buffer_bytes,
                            ddr_bw,
                            d2d_bw,
                            micro_slices,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DsePoint {
    pub buffer_bytes: u64,
    pub ddr_bw: f64,
    pub d2d_bw: f64,
    pub micro_slices: usize,
}

impl DsePoint {
    pub fn apply(&self, hw: &HardwareConfig, model: &ModelConfig) -> (HardwareConfig, ModelConfig) {
        let mut h = hw.clone();
        h.buffer_bytes_per_chiplet = self.buffer_bytes;
        h.ddr_bw_bytes_per_s_per_channel = self.ddr_bw;
        h.d2d_bw_bytes_per_s = self.d2d_bw;
        (h, model.with_micro_slices(self.micro_slices))
    }

    fn key(&self) -> (u64, u64, u64, usize) {
        (
            self.buffer_bytes,
            self.ddr_bw.to_bits(),
            self.d2d_bw.to_bits(),
            self.micro_slices,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DseRow {
    pub point: DsePoint,
    /// Seed-averaged mean utilization.
    pub utilization: f64,
    pub latency_s: f64,
    pub per_seed_utilization: Vec<f64>,
    pub per_seed_latency_s: Vec<f64>,
    pub feasibility: Feasibility,
    /// Configuration or simulation error of the first seed that could not run.
    pub error: Option<String>,
}

fn pool(jobs: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .expect("thread pool")
}

/// Runs every (point, seed) pair on at most `jobs` workers (0 = all cores)
/// and returns rows sorted by grid key.
pub fn dse_sweep(
    grid: &DseGrid,
    hw: &HardwareConfig,
    model: &ModelConfig,
    spec: &SweepSpec,
    constraints: &DseConstraints,
    jobs: usize,
) -> Vec<DseRow> {
    let points = grid.points();
    let tasks: Vec<(usize, u64)> = (0..points.len())
        .flat_map(|p| spec.seeds.iter().map(move |&s| (p, s)))
        .collect();
    let results: Vec<Result<(f64, f64), String>> = pool(jobs).install(|| {
        tasks
            .par_iter()
            .map(|&(p, seed)| {
                let (h, m) = points[p].apply(hw, model);
                validate_configs(&h, &m).map_err(|e| e.to_string())?;
                spec.run(seed, &h, &m)
                    .map(|(u, l, _)| (u, l))
                    .map_err(|e| e.to_string())
            })
            .collect()
    });
    let mut rows: Vec<DseRow> = points
        .iter()
        .enumerate()
        .map(|(p, point)| {
            let mine: Vec<&Result<(f64, f64), String>> = tasks
                .iter()
                .zip(&results)
                .filter(|((q, _), _)| *q == p)
                .map(|(_, r)| r)
                .collect();
            let ok: Vec<(f64, f64)> = mine
                .iter()
                .filter_map(|r| r.as_ref().ok().copied())
                .collect();
            let error = mine.iter().find_map(|r| r.as_ref().err().cloned());
            let per_seed_utilization: Vec<f64> = ok.iter().map(|x| x.0).collect();
            let per_seed_latency_s: Vec<f64> = ok.iter().map(|x| x.1).collect();
            let (h, _) = point.apply(hw, model);
            DseRow {
                point: *point,
                utilization: avg_or_nan(&per_seed_utilization),
                latency_s: avg_or_nan(&per_seed_latency_s),
                per_seed_utilization,
                per_seed_latency_s,
                feasibility: check_constraints(&h, constraints),
                error,
            }
        })
        .collect();
    rows.sort_by_key(|r| r.point.key());
    rows
}

fn avg_or_nan(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

pub const DSE_HEADER: &str =
    "buffer_bytes,ddr_bw_bytes_per_s,d2d_bw_bytes_per_s,micro_slices,utilization,latency_s,\
feasible,area_mm2,power_w,d2d_modules,error";

pub fn write_dse_csv(mut w: impl Write, rows: &[DseRow]) -> std::io::Result<()> {
    writeln!(w, "{DSE_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{:e},{:e},{},{},{:e},{},{},{},{},{}",
            r.point.buffer_bytes,
            r.point.ddr_bw,
            r.point.d2d_bw,
            r.point.micro_slices,
            r.utilization,
            r.latency_s,
            r.feasibility.feasible(),
            r.feasibility.area_mm2,
            r.feasibility.power_w,
            r.feasibility.d2d_modules,
            r.error.as_deref().map(csv_text).unwrap_or_default()
        )?;
    }
    Ok(())
}

fn csv_text(s: &str) -> String {
    s.replace([',', '\n', '"'], " ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleRow {
    pub rows: usize,
    pub cols: usize,
    pub strategy: Strategy,
    pub utilization: f64,
    pub latency_s: f64,
    pub per_seed_utilization: Vec<f64>,
}

/// Utilization of every strategy on every grid; tokens are re-striped over
/// each grid's chiplets. Rows keep the order of `grids` then `strategies`.
pub fn scalability_run(
    grids: &[(usize, usize)],
    strategies: &[Strategy],
    hw: &HardwareConfig,
    model: &ModelConfig,
    spec: &SweepSpec,
    jobs: usize,
) -> Result<Vec<ScaleRow>, SimError> {
    let mut tasks = Vec::new();
    for (g, _) in grids.iter().enumerate() {
        for (s, _) in strategies.iter().enumerate() {
            for &seed in &spec.seeds {
                tasks.push((g, s, seed));
            }
        }
    }
    let results: Vec<Result<(f64, f64), SimError>> = pool(jobs).install(|| {
        tasks
            .par_iter()
            .map(|&(g, s, seed)| {
                let (r, c) = grids[g];
                let h = hw.with_grid(r, c);
                let sp = SweepSpec {
                    strategy: strategies[s],
                    ..spec.clone()
                };
                sp.run(seed, &h, model).map(|(u, l, _)| (u, l))
            })
            .collect()
    });
    let mut out = Vec::new();
    let mut it = results.into_iter();
    for &(rows, cols) in grids {
        for &strategy in strategies {
            let mut us = Vec::new();
            let mut ls = Vec::new();
            for _ in &spec.seeds {
                let (u, l) = it.next().expect("one result per task")?;
                us.push(u);
                ls.push(l);
            }
            out.push(ScaleRow {
                rows,
                cols,
                strategy,
                utilization: avg_or_nan(&us),
                latency_s: avg_or_nan(&ls),
                per_seed_utilization: us,
            });
        }
    }
    Ok(out)
}

/// `util(first grid) - util(last grid)` of `strategy`, per seed.
pub fn utilization_drop(rows: &[ScaleRow], strategy: Strategy) -> Vec<f64> {
    let mine: Vec<&ScaleRow> = rows.iter().filter(|r| r.strategy == strategy).collect();
    match (mine.first(), mine.last()) {
        (Some(a), Some(b)) => a
            .per_seed_utilization
            .iter()
            .zip(&b.per_seed_utilization)
            .map(|(x, y)| x - y)
            .collect(),
        _ => Vec::new(),
    }
}

pub const SCALABILITY_HEADER: &str =
    "grid,chiplets,strategy,utilization,latency_s,utilization_drop";

/// One row per (grid, strategy); the drop column is relative to the first grid.
pub fn write_scalability_csv(mut w: impl Write, rows: &[ScaleRow]) -> std::io::Result<()> {
    writeln!(w, "{SCALABILITY_HEADER}")?;
    for r in rows {
        let base = rows
            .iter()
            .find(|x| x.strategy == r.strategy)
            .map_or(r.utilization, |x| x.utilization);
        writeln!(
            w,
            "{}x{},{},{},{},{:e},{}",
            r.rows,
            r.cols,
            r.rows * r.cols,
            r.strategy,
            r.utilization,
            r.latency_s,
            base - r.utilization
        )?;
    }
    Ok(())
}
