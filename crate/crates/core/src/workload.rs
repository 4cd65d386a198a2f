//! Synthetic long-tail gating traces and the CSV trace format.
//!
//! Expert popularity follows a Zipf law over a per-layer ranking of experts.
//! Each token draws `top_k` distinct experts without replacement, weighted by
//! `1 / (rank + 1)^skew`. Tokens are homed on chiplets round-robin by arrival
//! order. Trace files are UTF-8 CSV with a header
//! `layer,token,request,expert0,...,expert{k-1}`.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{HardwareConfig, ModelConfig};
use crate::error::TraceError;

/// One in-flight request and its token-buffering state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub id: usize,
    pub tokens: Vec<usize>,
    pub resume_layer: usize,
    pub qos_timer: u32,
    pub fw_counter: u32,
}

impl Request {
    pub fn new(id: usize, tokens: Vec<usize>) -> Self {
        Request {
            id,
            tokens,
            resume_layer: 0,
            qos_timer: 0,
            fw_counter: 0,
        }
    }
}

fn default_requests() -> usize {
    4
}

fn default_iterations() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadParams {
    pub tokens_per_iteration: usize,
    #[serde(default = "default_requests")]
    pub num_requests: usize,
    pub skew: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
}

impl WorkloadParams {
    pub fn long_tail(tokens: usize, seed: u64) -> Self {
        WorkloadParams {
            tokens_per_iteration: tokens,
            num_requests: 4.min(tokens.max(1)),
            skew: 1.2,
            seed,
            iterations: 1,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.num_requests == 0 {
            return Err("num_requests must be at least 1".into());
        }
        if self.tokens_per_iteration < self.num_requests {
            return Err("tokens_per_iteration must be >= num_requests".into());
        }
        if !(self.skew.is_finite() && self.skew >= 0.0) {
            return Err("skew must be a non-negative number".into());
        }
        Ok(())
    }

    /// Request owning each token of an iteration: contiguous equal blocks.
    pub fn request_of(&self, token: usize) -> usize {
        token * self.num_requests / self.tokens_per_iteration
    }
}

/// Gating decision of one token at one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGate {
    pub token: usize,
    pub request: usize,
    /// Exactly `top_k` distinct expert ids, ascending.
    pub experts: Vec<usize>,
}

/// Per-layer token-to-expert assignments for one iteration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GatingTrace {
    pub num_experts: usize,
    pub top_k: usize,
    pub num_chiplets: usize,
    pub layers: Vec<Vec<TokenGate>>,
}

impl GatingTrace {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Round-robin placement by arrival order.
    pub fn home_chiplet(&self, token: usize) -> usize {
        token % self.num_chiplets
    }

    /// Same assignments with token placement striped over a different grid.
    pub fn restriped(&self, num_chiplets: usize) -> Self {
        let mut t = self.clone();
        t.num_chiplets = num_chiplets;
        t
    }

    /// Number of tokens gating each expert, `n_e`.
    pub fn token_counts(&self, layer: usize) -> Vec<u32> {
        token_counts_per_expert(self, layer)
    }

    /// Tokens of `layer` homed on each chiplet, per expert: `[expert][chiplet]`.
    pub fn tokens_by_chiplet(&self, layer: usize) -> Vec<Vec<Vec<usize>>> {
        let mut out = vec![vec![Vec::new(); self.num_chiplets]; self.num_experts];
        for g in &self.layers[layer] {
            let home = self.home_chiplet(g.token);
            for &e in &g.experts {
                out[e][home].push(g.token);
            }
        }
        out
    }

    pub fn activated_experts(&self, layer: usize) -> Vec<usize> {
        self.token_counts(layer)
            .iter()
            .enumerate()
            .filter(|(_, &n)| n > 0)
            .map(|(e, _)| e)
            .collect()
    }

    /// Writes the trace in the documented CSV format.
    pub fn export(&self, mut w: impl Write) -> std::io::Result<()> {
        let mut header = String::from("layer,token,request");
        for i in 0..self.top_k {
            header.push_str(&format!(",expert{i}"));
        }
        writeln!(w, "{header}")?;
        for (layer, gates) in self.layers.iter().enumerate() {
            for g in gates {
                write!(w, "{layer},{},{}", g.token, g.request)?;
                for e in &g.experts {
                    write!(w, ",{e}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }

    pub fn export_to_path(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.export(&mut w)?;
        w.flush()
    }
}

/// Exact per-expert token counts at `layer`; absent experts count zero.
pub fn token_counts_per_expert(trace: &GatingTrace, layer: usize) -> Vec<u32> {
    let mut counts = vec![0u32; trace.num_experts];
    for g in &trace.layers[layer] {
        for &e in &g.experts {
            counts[e] += 1;
        }
    }
    counts
}

/// SplitMix64 finaliser, used to derive independent stream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Zipf popularity over a seeded per-layer ranking of experts.
#[derive(Debug, Clone)]
pub struct GatingModel {
    top_k: usize,
    /// `rank_to_expert[layer][rank]`
    rank_to_expert: Vec<Vec<usize>>,
    weights: Vec<f64>,
}

impl GatingModel {
    pub fn new(model: &ModelConfig, skew: f64, seed: u64) -> Self {
        let e = model.num_experts;
        let rank_to_expert = (0..model.num_layers)
            .map(|layer| {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xA11C_E000 + layer as u64));
                let mut perm: Vec<usize> = (0..e).collect();
                perm.shuffle(&mut rng);
                perm
            })
            .collect();
        let weights = (0..e).map(|r| ((r + 1) as f64).powf(-skew)).collect();
        GatingModel {
            top_k: model.top_k,
            rank_to_expert,
            weights,
        }
    }

    /// Draws `top_k` distinct experts for one token at `layer`.
    pub fn sample(&self, layer: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let ranks = rand::seq::index::sample_weighted(
            rng,
            self.weights.len(),
            |r| self.weights[r],
            self.top_k,
        )
        .expect("weights are positive and top_k <= experts");
        let mut experts: Vec<usize> = ranks
            .iter()
            .map(|r| self.rank_to_expert[layer][r])
            .collect();
        experts.sort_unstable();
        experts
    }

    /// Gating of one token, keyed by an arbitrary stream id so that re-drawing
    /// the same (stream, layer) always yields the same experts.
    pub fn sample_keyed(&self, seed: u64, stream: u64, layer: usize) -> Vec<usize> {
        let key = mix_seed(mix_seed(seed, stream), layer as u64 + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        self.sample(layer, &mut rng)
    }
}

/// Generates iteration 0 of the workload.
pub fn generate_gating(
    params: &WorkloadParams,
    model: &ModelConfig,
    hw: &HardwareConfig,
) -> GatingTrace {
    generate_iteration(params, model, hw, 0)
}

/// Generates one iteration; iterations share the per-layer popularity ranking.
pub fn generate_iteration(
    params: &WorkloadParams,
    model: &ModelConfig,
    hw: &HardwareConfig,
    iteration: usize,
) -> GatingTrace {
    let gm = GatingModel::new(model, params.skew, params.seed);
    let n = params.tokens_per_iteration;
    let layers = (0..model.num_layers)
        .map(|layer| {
            (0..n)
                .map(|token| {
                    let stream = ((iteration as u64) << 32) | token as u64;
                    TokenGate {
                        token,
                        request: params.request_of(token),
                        experts: gm.sample_keyed(params.seed, stream, layer),
                    }
                })
                .collect()
        })
        .collect();
    GatingTrace {
        num_experts: model.num_experts,
        top_k: model.top_k,
        num_chiplets: hw.num_chiplets(),
        layers,
    }
}

/// Reads a trace written by [`GatingTrace::export`].
pub fn ingest_trace(
    path: impl AsRef<Path>,
    model: &ModelConfig,
    num_chiplets: usize,
) -> Result<GatingTrace, TraceError> {
    let f = std::fs::File::open(path)?;
    parse_trace(std::io::BufReader::new(f), model, num_chiplets)
}

pub fn parse_trace(
    r: impl BufRead,
    model: &ModelConfig,
    num_chiplets: usize,
) -> Result<GatingTrace, TraceError> {
    let mut lines = r.lines();
    let header = match lines.next() {
        Some(l) => l?,
        None => {
            return Err(TraceError::Parse {
                line: 1,
                reason: "missing header".into(),
            })
        }
    };
    let cols: Vec<&str> = header.trim().split(',').collect();
    if cols.len() < 4 || cols[..3] != ["layer", "token", "request"] {
        return Err(TraceError::Parse {
            line: 1,
            reason: "header must be layer,token,request,expert0,...".into(),
        });
    }
    for (i, c) in cols[3..].iter().enumerate() {
        if *c != format!("expert{i}") {
            return Err(TraceError::Parse {
                line: 1,
                reason: format!("unexpected column {c:?}"),
            });
        }
    }
    let k = cols.len() - 3;
    if k != model.top_k {
        return Err(TraceError::TopKMismatch {
            line: 1,
            expected: model.top_k,
            found: k,
        });
    }

    let mut layers: Vec<Vec<TokenGate>> = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| TraceError::Parse {
            line: line_no,
            reason,
        };
        let fields = line
            .trim()
            .split(',')
            .map(|f| {
                f.trim()
                    .parse::<usize>()
                    .map_err(|e| bad(format!("{f:?}: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if fields.len() < 3 {
            return Err(bad("expected layer,token,request".into()));
        }
        let experts = &fields[3..];
        if experts.len() != k {
            return Err(TraceError::TopKMismatch {
                line: line_no,
                expected: k,
                found: experts.len(),
            });
        }
        let mut sorted = experts.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != k {
            return Err(bad("duplicate expert id".into()));
        }
        if sorted.iter().any(|&e| e >= model.num_experts) {
            return Err(bad(format!(
                "expert id out of range (E = {})",
                model.num_experts
            )));
        }
        let layer = fields[0];
        if layer >= 1 << 20 {
            return Err(bad("layer index too large".into()));
        }
        if layers.len() <= layer {
            layers.resize_with(layer + 1, Vec::new);
        }
        layers[layer].push(TokenGate {
            token: fields[1],
            request: fields[2],
            experts: sorted,
        });
    }
    Ok(GatingTrace {
        num_experts: model.num_experts,
        top_k: k,
        num_chiplets,
        layers,
    })
}
