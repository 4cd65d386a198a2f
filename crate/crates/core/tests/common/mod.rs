#![allow(dead_code)]

use chiplet_moe_sim::engine::LayerResult;
use chiplet_moe_sim::scheduler::LayerWork;
use chiplet_moe_sim::timing::partition_columns;
use chiplet_moe_sim::workload::TokenGate;
use chiplet_moe_sim::{GatingTrace, HardwareConfig, ModelConfig};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A small randomized single-layer instance.
#[derive(Debug, Clone)]
pub struct Instance {
    pub hw: HardwareConfig,
    pub model: ModelConfig,
    pub trace: GatingTrace,
}

impl Instance {
    pub fn work(&self) -> LayerWork {
        LayerWork::from_trace(&self.trace, 0)
    }

    pub fn activated_bytes(&self) -> u64 {
        let w = self.work();
        w.activated().len() as u64
            * self
                .model
                .expert_weight_bytes(self.hw.weight_bytes_per_element)
    }
}

/// At most 4 chiplets, 8 experts, 6 micro-slices and 32 tokens, with a
/// buffer between 2 and 8 largest micro-slices.
pub fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grids = [
        (1, 1),
        (1, 2),
        (2, 1),
        (2, 2),
        (1, 3),
        (1, 4),
        (3, 1),
        (4, 1),
    ];
    let (rows, cols) = grids[rng.gen_range(0..grids.len())];
    let chiplets = rows * cols;
    let experts = rng.gen_range(1..=8);
    let top_k = rng.gen_range(1..=experts.min(4));
    let m = rng.gen_range(1..=6);
    let d_expert = loop {
        let d = rng.gen_range(m as u64..=4 * m as u64);
        if partition_columns(d, m).is_some() {
            break d;
        }
    };
    let mut model = ModelConfig::qwen3_a3b();
    model.name = format!("rand-{seed}");
    model.d_model = rng.gen_range(1..=16);
    model.d_expert = d_expert;
    model.matrices_per_expert = rng.gen_range(1..=3);
    model.num_experts = experts;
    model.top_k = top_k;
    model.num_layers = 1;
    model.micro_slices_per_expert = m;

    let mut hw = HardwareConfig::test_chip();
    hw.grid_rows = rows;
    hw.grid_cols = cols;
    hw.ddr_channels = rng.gen_range(1..=4);
    hw.macs_per_chiplet = rng.gen_range(1..=64);
    hw.clock_hz = 1e9;
    hw.ddr_bw_bytes_per_s_per_channel = rng.gen_range(1e9..100e9);
    hw.d2d_bw_bytes_per_s = rng.gen_range(1e9..400e9);
    hw.d2d_hop_latency_s = rng.gen_range(0.0..1e-8);
    hw.microslice_overhead_s = if rng.gen_bool(0.5) { 0.0 } else { 1e-8 };
    hw.ddr_prefetch_depth = rng.gen_range(1..=3);
    hw.flow_window_slices = rng.gen_range(2..=4);
    let widest = d_expert.div_ceil(m as u64);
    let max_slice =
        model.matrices_per_expert * model.d_model * widest * hw.weight_bytes_per_element;
    hw.buffer_bytes_per_chiplet = max_slice * rng.gen_range(2..=8);

    let tokens = rng.gen_range(0..=32);
    let gates = (0..tokens)
        .map(|t| {
            let mut ex: Vec<usize> = sample(&mut rng, experts, top_k).into_vec();
            ex.sort_unstable();
            TokenGate {
                token: t,
                request: t % 4,
                experts: ex,
            }
        })
        .collect();
    let trace = GatingTrace {
        num_experts: experts,
        top_k,
        num_chiplets: chiplets,
        layers: vec![gates],
    };
    Instance { hw, model, trace }
}

/// Brute-force recount: every (token, gated expert, weight column) computed
/// exactly once and nothing else computed.
pub fn recount(inst: &Instance, res: &LayerResult) -> Result<(), String> {
    let e_n = inst.model.num_experts;
    let cols = inst.model.d_expert as usize;
    let tokens = inst.trace.layers[0].len();
    let mut hits = vec![vec![vec![0u32; cols]; e_n]; tokens];
    for r in &res.computes {
        for &t in &r.tokens {
            for col in r.col_start as usize..r.col_end as usize {
                hits[t][r.expert][col] += 1;
            }
        }
    }
    for g in &inst.trace.layers[0] {
        for e in 0..e_n {
            let want = u32::from(g.experts.contains(&e));
            if let Some(col) = hits[g.token][e].iter().position(|&h| h != want) {
                return Err(format!(
                    "token {} expert {e} column {col}: computed {} times, want {want}",
                    g.token, hits[g.token][e][col]
                ));
            }
        }
    }
    Ok(())
}
