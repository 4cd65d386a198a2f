//! Micro-slice partitioning and the analytic compute / transfer time models.

use serde::Serialize;

use crate::config::{HardwareConfig, ModelConfig};

/// One streaming unit of an expert's weights: a contiguous block of
/// `d_expert` columns across every weight matrix of the expert.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct MicroSliceId {
    pub expert: usize,
    pub index: usize,
    pub elements: u64,
    pub size_bytes: u64,
}

/// Ceil-partition of `total` columns into `parts` blocks; the last block takes
/// what remains. `None` when some block would be empty.
pub fn partition_columns(total: u64, parts: usize) -> Option<Vec<u64>> {
    if parts == 0 || total == 0 {
        return None;
    }
    let parts64 = parts as u64;
    let step = total.div_ceil(parts64);
    let head = step * (parts64 - 1);
    if head >= total {
        return None;
    }
    let mut cols = vec![step; parts - 1];
    cols.push(total - head);
    Some(cols)
}

/// Micro-slices of `expert` under `model`. Panics on an unvalidated model.
pub fn micro_slices(model: &ModelConfig, elem_bytes: u64, expert: usize) -> Vec<MicroSliceId> {
    slices_with(model, elem_bytes, expert, model.micro_slices_per_expert)
}

/// Partition of an expert into an arbitrary number of equal-ish slices.
pub fn slices_with(
    model: &ModelConfig,
    elem_bytes: u64,
    expert: usize,
    parts: usize,
) -> Vec<MicroSliceId> {
    let cols = partition_columns(model.d_expert, parts).expect("model must be validated");
    let per_col = model.matrices_per_expert * model.d_model;
    cols.into_iter()
        .enumerate()
        .map(|(index, c)| MicroSliceId {
            expert,
            index,
            elements: c * per_col,
            size_bytes: c * per_col * elem_bytes,
        })
        .collect()
}

/// Throughput-limited timing of compute, D2D and DDR operations. Pure and
/// monotone in every argument; zero work takes zero time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingModel {
    /// Weight elements processed per second for a single token.
    pub element_rate: f64,
    pub ddr_bw: f64,
    pub d2d_bw: f64,
    pub hop_latency_s: f64,
    pub overhead_s: f64,
}

impl TimingModel {
    pub fn new(hw: &HardwareConfig) -> Self {
        let element_rate = match hw.effective_tops {
            Some(tops) => tops * 1e12 / 2.0,
            None => hw.macs_per_chiplet as f64 * hw.clock_hz,
        };
        TimingModel {
            element_rate,
            ddr_bw: hw.ddr_bw_bytes_per_s_per_channel,
            d2d_bw: hw.d2d_bw_bytes_per_s,
            hop_latency_s: hw.d2d_hop_latency_s,
            overhead_s: hw.microslice_overhead_s,
        }
    }

    /// Dense GEMV time of `tokens` against `elements` weights:
    /// `2 * tokens * elements / (2 * macs * clock)`.
    pub fn compute_s(&self, tokens: u64, elements: u64) -> f64 {
        if tokens == 0 || elements == 0 {
            return 0.0;
        }
        tokens as f64 * elements as f64 / self.element_rate
    }

    pub fn microslice_compute_s(&self, tokens: u64, slice: &MicroSliceId) -> f64 {
        self.compute_s(tokens, slice.elements)
    }

    /// `bytes / bw + hops * hop_latency` (a single-hop transfer is one link).
    pub fn d2d_transfer_s(&self, bytes: u64, hops: usize) -> f64 {
        if bytes == 0 {
            return 0.0;
        }
        bytes as f64 / self.d2d_bw + hops.max(1) as f64 * self.hop_latency_s
    }

    pub fn ddr_load_s(&self, bytes: u64) -> f64 {
        if bytes == 0 {
            return 0.0;
        }
        bytes as f64 / self.ddr_bw
    }
}
