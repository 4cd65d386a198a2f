//! Strategies, run reports, windowed utilization, multi-iteration runs with an
//! attention stage, and the sign test used for "A beats B" comparisons.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{ep_run_layer, hydra_place, EpPlacement, PopularityStats};
use crate::config::{HardwareConfig, ModelConfig};
use crate::engine::{run_layer, EngineMode, LayerResult};
use crate::error::SimError;
use crate::scheduler::{
    schedule_layer, token_buffering_update, BufferDecision, BufferingParams, LayerWork, OrderPolicy,
};
use crate::timing::TimingModel;
use crate::workload::{generate_iteration, GatingModel, Request, WorkloadParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    /// A1: coarse slices, one expert at a time.
    FsedpNaive,
    /// A2: micro-slice flows, expert-id order.
    Fsedp,
    /// A3: A2 with paired load.
    FsedpPaired,
    /// A4: A3 with Rule 5 targeting.
    FsedpRule5,
    /// A5: A3 with token buffering.
    FsedpBuffered,
    Ep,
    Hydra,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::FsedpNaive,
        Strategy::Fsedp,
        Strategy::FsedpPaired,
        Strategy::FsedpRule5,
        Strategy::FsedpBuffered,
        Strategy::Ep,
        Strategy::Hydra,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::FsedpNaive => "fsedp-naive",
            Strategy::Fsedp => "fsedp",
            Strategy::FsedpPaired => "fsedp-paired",
            Strategy::FsedpRule5 => "fsedp-rule5",
            Strategy::FsedpBuffered => "fsedp-buffered",
            Strategy::Ep => "ep",
            Strategy::Hydra => "hydra",
        }
    }

    /// Ablation level `a1`..`a5`, if any.
    pub fn level(self) -> Option<&'static str> {
        match self {
            Strategy::FsedpNaive => Some("a1"),
            Strategy::Fsedp => Some("a2"),
            Strategy::FsedpPaired => Some("a3"),
            Strategy::FsedpRule5 => Some("a4"),
            Strategy::FsedpBuffered => Some("a5"),
            _ => None,
        }
    }

    pub fn is_fsedp(self) -> bool {
        self.level().is_some()
    }

    pub fn engine_mode(self) -> Option<EngineMode> {
        match self {
            Strategy::FsedpNaive => Some(EngineMode::naive()),
            Strategy::Fsedp => Some(EngineMode {
                fusion: false,
                ..EngineMode::fsedp()
            }),
            Strategy::FsedpPaired | Strategy::FsedpBuffered => Some(EngineMode::fsedp()),
            Strategy::FsedpRule5 => Some(EngineMode {
                rule5: true,
                ..EngineMode::fsedp()
            }),
            Strategy::Ep | Strategy::Hydra => None,
        }
    }

    pub fn order_policy(self) -> OrderPolicy {
        match self {
            Strategy::FsedpNaive | Strategy::Fsedp => OrderPolicy::ExpertId,
            _ => OrderPolicy::Paired,
        }
    }

    pub fn default_slack_pct(self) -> u32 {
        if self == Strategy::FsedpBuffered {
            20
        } else {
            0
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        Strategy::ALL
            .into_iter()
            .find(|x| x.name() == s || x.level() == Some(s.as_str()))
            .ok_or_else(|| {
                let names: Vec<&str> = Strategy::ALL.iter().map(|x| x.name()).collect();
                format!(
                    "unknown strategy `{s}` (expected one of {} or a1..a5)",
                    names.join(", ")
                )
            })
    }
}

/// Overrides applied on top of a strategy's defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub mode: Option<EngineMode>,
    pub slack_pct: Option<u32>,
    /// Iterations of gating history Hydra observes before a single-layer run.
    pub hydra_history: usize,
    pub hydra_decay: f64,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            mode: None,
            slack_pct: None,
            hydra_history: 8,
            hydra_decay: 0.5,
        }
    }
}

impl RunOptions {
    pub fn slack_for(&self, s: Strategy) -> u32 {
        self.slack_pct.unwrap_or(s.default_slack_pct())
    }
}

/// Runs one layer's work under `strategy`. Hydra places experts from `stats`
/// (round-robin when absent or empty).
pub fn run_work(
    work: &LayerWork,
    layer: usize,
    strategy: Strategy,
    hw: &HardwareConfig,
    model: &ModelConfig,
    opts: &RunOptions,
    stats: Option<&PopularityStats>,
) -> Result<LayerResult, SimError> {
    match strategy {
        Strategy::Ep => ep_run_layer(
            work,
            &EpPlacement::round_robin(model.num_experts, hw.num_chiplets()),
            hw,
            model,
        ),
        Strategy::Hydra => {
            let placement = match stats {
                Some(s) if s.observations > 0 => hydra_place(s, hw, model),
                _ => EpPlacement::round_robin(model.num_experts, hw.num_chiplets()),
            };
            ep_run_layer(work, &placement, hw, model)
        }
        _ => {
            let mode = opts
                .mode
                .or(strategy.engine_mode())
                .expect("fsedp strategy");
            let schedule = schedule_layer(work, layer, strategy.order_policy(), &[]);
            run_layer(&schedule, work, hw, model, &mode)
        }
    }
}

/// Hydra's popularity history for `layer`: iterations `1..=history` of the
/// same workload stream.
pub fn hydra_history(
    params: &WorkloadParams,
    layer: usize,
    hw: &HardwareConfig,
    model: &ModelConfig,
    opts: &RunOptions,
) -> PopularityStats {
    let mut stats = PopularityStats::new(model.num_experts, hw.num_chiplets(), opts.hydra_decay);
    for it in 1..=opts.hydra_history {
        let trace = generate_iteration(params, model, hw, it);
        stats.observe(&LayerWork::from_trace(&trace, layer));
    }
    stats
}

/// Single MoE layer of iteration 0 of a generated workload.
pub fn run_single_layer(
    params: &WorkloadParams,
    layer: usize,
    strategy: Strategy,
    hw: &HardwareConfig,
    model: &ModelConfig,
    opts: &RunOptions,
) -> Result<SimReport, SimError> {
    simulate_layer(params, layer, strategy, hw, model, opts).map(|(rep, _)| rep)
}

/// [`run_single_layer`] that also returns the engine result with its timeline.
pub fn simulate_layer(
    params: &WorkloadParams,
    layer: usize,
    strategy: Strategy,
    hw: &HardwareConfig,
    model: &ModelConfig,
    opts: &RunOptions,
) -> Result<(SimReport, LayerResult), SimError> {
    let mut m = model.clone();
    m.num_layers = m.num_layers.max(layer + 1);
    let trace = generate_iteration(params, &m, hw, 0);
    let work = LayerWork::from_trace(&trace, layer);
    let stats = (strategy == Strategy::Hydra).then(|| hydra_history(params, layer, hw, &m, opts));
    let res = run_work(&work, layer, strategy, hw, &m, opts, stats.as_ref())?;
    Ok((SimReport::from_layer(strategy, &m, params, &res), res))
}

/// Aggregated metrics of one run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimReport {
    pub strategy: String,
    pub model: String,
    pub tokens_per_iteration: usize,
    pub seed: u64,
    /// MoE stage latency of every executed layer, in execution order.
    pub layer_latency_s: Vec<f64>,
    pub attention_s: f64,
    pub makespan_s: f64,
    /// Compute-busy intervals per chiplet on the run's clock.
    pub busy: Vec<Vec<(f64, f64)>>,
    pub peak_bytes: Vec<u64>,
    pub ddr_bytes: u64,
    pub ddr_bytes_per_channel: Vec<u64>,
    pub d2d_bytes: u64,
    pub tokens_completed: u64,
    /// Tokens of completed forward passes per second (multi-iteration runs).
    pub throughput_tok_s: Option<f64>,
    pub deferrals: Vec<u32>,
    pub passes: Vec<u32>,
    /// Every (block, layer) visit of a multi-iteration run, in execution order.
    pub blocks: Vec<BlockRecord>,
}

/// One request's pass reaching one MoE layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockRecord {
    pub iteration: usize,
    pub request: usize,
    pub pass: u32,
    pub layer: usize,
    pub deferred: bool,
    /// Digest of the pass's gating at this layer.
    pub gates: u64,
}

impl SimReport {
    pub fn from_layer(
        strategy: Strategy,
        model: &ModelConfig,
        params: &WorkloadParams,
        res: &LayerResult,
    ) -> Self {
        SimReport {
            strategy: strategy.name().to_string(),
            model: model.name.clone(),
            tokens_per_iteration: params.tokens_per_iteration,
            seed: params.seed,
            layer_latency_s: vec![res.makespan_s],
            makespan_s: res.makespan_s,
            busy: res.busy.clone(),
            peak_bytes: res.peak_bytes.clone(),
            ddr_bytes: res.ddr_bytes,
            ddr_bytes_per_channel: res.ddr_bytes_per_channel.clone(),
            d2d_bytes: res.d2d_bytes,
            ..Default::default()
        }
    }

    pub fn num_chiplets(&self) -> usize {
        self.busy.len()
    }

    pub fn busy_time(&self, chiplet: usize) -> f64 {
        self.busy[chiplet].iter().map(|(a, b)| b - a).sum()
    }

    pub fn utilization(&self) -> Vec<f64> {
        (0..self.num_chiplets())
            .map(|c| {
                if self.makespan_s > 0.0 {
                    (self.busy_time(c) / self.makespan_s).min(1.0)
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub fn mean_utilization(&self) -> f64 {
        let u = self.utilization();
        if u.is_empty() {
            0.0
        } else {
            u.iter().sum::<f64>() / u.len() as f64
        }
    }

    pub fn mean_layer_latency_s(&self) -> f64 {
        if self.layer_latency_s.is_empty() {
            0.0
        } else {
            self.layer_latency_s.iter().sum::<f64>() / self.layer_latency_s.len() as f64
        }
    }

    pub fn max_peak_bytes(&self) -> u64 {
        self.peak_bytes.iter().copied().max().unwrap_or(0)
    }

    pub fn total_deferrals(&self) -> u64 {
        self.deferrals.iter().map(|&d| d as u64).sum()
    }
}

/// Fraction of every window spent compute-busy.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilizationSeries {
    pub window_s: f64,
    /// Busy seconds per chiplet and window.
    pub busy_s: Vec<Vec<f64>>,
    /// Utilization per chiplet and window; the last window may be shorter.
    pub per_chiplet: Vec<Vec<f64>>,
    /// Mean over chiplets per window.
    pub package: Vec<f64>,
}

impl UtilizationSeries {
    /// Population variance over every (chiplet, window) sample.
    pub fn variance(&self) -> f64 {
        variance(&self.per_chiplet.concat())
    }

    /// Population variance of the package series.
    pub fn package_variance(&self) -> f64 {
        variance(&self.package)
    }
}

pub fn utilization_series(report: &SimReport, window_s: f64) -> UtilizationSeries {
    window_utilization(&report.busy, report.makespan_s, window_s)
}

/// Windows `[k w, (k+1) w)` covering `[0, makespan)`.
pub fn window_utilization(
    busy: &[Vec<(f64, f64)>],
    makespan_s: f64,
    window_s: f64,
) -> UtilizationSeries {
    assert!(window_s > 0.0, "window must be positive");
    let n = if makespan_s > 0.0 {
        (makespan_s / window_s).ceil() as usize
    } else {
        0
    };
    let len = |k: usize| (makespan_s - k as f64 * window_s).min(window_s);
    let busy_s: Vec<Vec<f64>> = busy
        .iter()
        .map(|iv| {
            let mut acc = vec![0.0; n];
            for &(a, b) in iv {
                let first = ((a / window_s).floor() as usize).min(n.saturating_sub(1));
                for (k, slot) in acc.iter_mut().enumerate().skip(first) {
                    let (lo, hi) = (
                        k as f64 * window_s,
                        (k as f64 * window_s + window_s).min(makespan_s),
                    );
                    if lo >= b {
                        break;
                    }
                    *slot += (b.min(hi) - a.max(lo)).max(0.0);
                }
            }
            acc
        })
        .collect();
    let per_chiplet: Vec<Vec<f64>> = busy_s
        .iter()
        .map(|w| {
            w.iter()
                .enumerate()
                .map(|(k, &b)| (b / len(k)).min(1.0))
                .collect()
        })
        .collect();
    let c = per_chiplet.len().max(1) as f64;
    let package = (0..n)
        .map(|k| per_chiplet.iter().map(|w| w[k]).sum::<f64>() / c)
        .collect();
    UtilizationSeries {
        window_s,
        busy_s,
        per_chiplet,
        package,
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    mean(&xs.iter().map(|x| (x - m) * (x - m)).collect::<Vec<_>>())
}

/// Paired one-sided sign test of "a > b".
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// `P(X >= wins)` for `X ~ Binomial(wins + losses, 1/2)`.
    pub p_value: f64,
}

impl SignTest {
    pub fn significant(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

pub fn sign_test(a: &[f64], b: &[f64]) -> SignTest {
    assert_eq!(a.len(), b.len(), "paired samples");
    let wins = a.iter().zip(b).filter(|(x, y)| x > y).count();
    let losses = a.iter().zip(b).filter(|(x, y)| x < y).count();
    let n = wins + losses;
    let p_value = (wins..=n).map(|k| binomial(n, k)).sum::<f64>() / 2f64.powi(n as i32);
    SignTest {
        wins,
        losses,
        ties: a.len() - n,
        p_value: p_value.min(1.0),
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Multi-iteration run settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct E2eParams {
    pub iterations: usize,
    /// Context tokens every request holds before its first pass.
    pub initial_context: u64,
}

impl Default for E2eParams {
    fn default() -> Self {
        E2eParams {
            iterations: 100,
            initial_context: 128,
        }
    }
}

/// Attention stage of one layer, heads striped over the chiplets. Returns the
/// per-chiplet compute time, per-chiplet DDR bytes and the stage time.
pub fn attention_stage(
    contexts: &[u64],
    hw: &HardwareConfig,
    model: &ModelConfig,
) -> (f64, u64, f64) {
    if contexts.is_empty() {
        return (0.0, 0, 0.0);
    }
    let c = hw.num_chiplets() as u64;
    let heads = model.attention_heads.max(1) as u64;
    let frac = heads.div_ceil(c) as f64 / heads as f64;
    let d = model.d_model;
    let elem = hw.weight_bytes_per_element;
    let timing = TimingModel::new(hw);
    let macs: u64 = contexts.iter().map(|&ctx| 4 * d * d + 2 * ctx * d).sum();
    let compute = frac * macs as f64 / timing.element_rate;
    let kv: u64 = contexts.iter().map(|&ctx| ctx * d * 2 * elem).sum();
    let bytes = (frac * (4 * d * d * elem + kv) as f64).ceil() as u64;
    let per_die_bw = hw.ddr_bw_bytes_per_s_per_channel * hw.ddr_channels as f64 / c as f64;
    let ddr = bytes as f64 / per_die_bw;
    (compute, bytes, compute.max(ddr))
}

/// A block of one request's tokens making one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Block {
    request: usize,
    pass: u32,
    start_layer: usize,
}

/// `iterations` forward iterations of attention followed by the MoE stage.
/// Every iteration each request starts a new pass; a request deferred at a
/// layer keeps that pass, with its gating, and resumes it at the same layer
/// in the next iteration alongside its new pass.
pub fn run_end_to_end(
    workload: &WorkloadParams,
    strategy: Strategy,
    hw: &HardwareConfig,
    model: &ModelConfig,
    e2e: &E2eParams,
    opts: &RunOptions,
) -> Result<SimReport, SimError> {
    let c = hw.num_chiplets();
    let n = workload.tokens_per_iteration;
    let mut requests: Vec<Request> = (0..workload.num_requests)
        .map(|r| Request::new(r, (0..n).filter(|&t| workload.request_of(t) == r).collect()))
        .collect();
    let buffering = BufferingParams::from_slack(opts.slack_for(strategy), n);
    let gm = GatingModel::new(model, workload.skew, workload.seed);
    let mut stats: Vec<PopularityStats> = (0..model.num_layers)
        .map(|_| PopularityStats::new(model.num_experts, c, opts.hydra_decay))
        .collect();
    let mut context = vec![e2e.initial_context; requests.len()];
    let mut next_pass = vec![0u32; requests.len()];
    let mut carried: Vec<Block> = Vec::new();
    let mut rep = SimReport {
        strategy: strategy.name().to_string(),
        model: model.name.clone(),
        tokens_per_iteration: n,
        seed: workload.seed,
        busy: vec![Vec::new(); c],
        peak_bytes: vec![0; c],
        ddr_bytes_per_channel: vec![0; hw.ddr_channels],
        deferrals: vec![0; requests.len()],
        passes: vec![0; requests.len()],
        ..Default::default()
    };
    let mut t = 0.0;
    for iteration in 0..e2e.iterations {
        let mut blocks = std::mem::take(&mut carried);
        for r in 0..requests.len() {
            blocks.push(Block {
                request: r,
                pass: next_pass[r],
                start_layer: 0,
            });
            next_pass[r] += 1;
        }
        let mut deferred_at: Vec<Option<usize>> = vec![None; blocks.len()];
        for layer in 0..model.num_layers {
            let live: Vec<usize> = (0..blocks.len())
                .filter(|&b| blocks[b].start_layer <= layer && deferred_at[b].is_none())
                .collect();
            if live.is_empty() {
                continue;
            }
            let gates: Vec<Vec<(usize, Vec<usize>)>> = live
                .iter()
                .map(|&b| {
                    let blk = blocks[b];
                    requests[blk.request]
                        .tokens
                        .iter()
                        .map(|&tok| {
                            let stream = ((blk.pass as u64) << 32) | tok as u64;
                            (tok, gm.sample_keyed(workload.seed, stream, layer))
                        })
                        .collect()
                })
                .collect();
            let mut counts = vec![0u32; model.num_experts];
            for g in gates.iter().flatten() {
                for &e in &g.1 {
                    counts[e] += 1;
                }
            }
            let mut keep = vec![true; live.len()];
            if buffering.enabled() {
                for (i, &b) in live.iter().enumerate() {
                    let mut act: Vec<usize> =
                        gates[i].iter().flat_map(|g| g.1.iter().copied()).collect();
                    act.sort_unstable();
                    act.dedup();
                    let n_e: Vec<u32> = act.iter().map(|&e| counts[e]).collect();
                    let r = blocks[b].request;
                    if token_buffering_update(&mut requests[r], &n_e, &buffering)
                        == BufferDecision::Defer
                    {
                        keep[i] = false;
                        deferred_at[b] = Some(layer);
                        requests[r].resume_layer = layer;
                        rep.deferrals[r] += 1;
                    }
                }
            }
            for (i, &b) in live.iter().enumerate() {
                let mut h = DefaultHasher::new();
                gates[i].hash(&mut h);
                rep.blocks.push(BlockRecord {
                    iteration,
                    request: blocks[b].request,
                    pass: blocks[b].pass,
                    layer,
                    deferred: !keep[i],
                    gates: h.finish(),
                });
            }
            let mut tokens = vec![vec![Vec::new(); c]; model.num_experts];
            let mut ctxs = Vec::new();
            let mut id = 0;
            for (i, &b) in live.iter().enumerate() {
                if !keep[i] {
                    continue;
                }
                let r = blocks[b].request;
                for (tok, experts) in &gates[i] {
                    for &e in experts {
                        tokens[e][tok % c].push(id);
                    }
                    ctxs.push(context[r] + requests[r].tokens.len() as u64);
                    id += 1;
                }
            }
            let (att_compute, att_bytes, att_s) = attention_stage(&ctxs, hw, model);
            for ch in 0..c {
                if att_compute > 0.0 {
                    rep.busy[ch].push((t, t + att_compute));
                }
                rep.ddr_bytes += att_bytes;
                rep.ddr_bytes_per_channel[ch % hw.ddr_channels] += att_bytes;
            }
            rep.attention_s += att_s;
            t += att_s;
            let work = LayerWork {
                num_chiplets: c,
                tokens,
            };
            let res = run_work(&work, layer, strategy, hw, model, opts, Some(&stats[layer]))?;
            stats[layer].observe(&work);
            for ch in 0..c {
                rep.busy[ch].extend(res.busy[ch].iter().map(|&(a, b)| (a + t, b + t)));
                rep.peak_bytes[ch] = rep.peak_bytes[ch].max(res.peak_bytes[ch]);
            }
            rep.ddr_bytes += res.ddr_bytes;
            for (acc, b) in rep
                .ddr_bytes_per_channel
                .iter_mut()
                .zip(&res.ddr_bytes_per_channel)
            {
                *acc += b;
            }
            rep.d2d_bytes += res.d2d_bytes;
            rep.layer_latency_s.push(res.makespan_s);
            t += res.makespan_s;
        }
        for (b, blk) in blocks.iter().enumerate() {
            let r = blk.request;
            match deferred_at[b] {
                Some(layer) => carried.push(Block {
                    start_layer: layer,
                    ..*blk
                }),
                None => {
                    let len = requests[r].tokens.len() as u64;
                    rep.tokens_completed += len;
                    rep.passes[r] += 1;
                    context[r] += len;
                    requests[r].fw_counter += 1;
                }
            }
        }
        for (r, req) in requests.iter_mut().enumerate() {
            req.resume_layer = carried
                .iter()
                .filter(|b| b.request == r)
                .map(|b| b.start_layer)
                .min()
                .unwrap_or(0);
        }
    }
    rep.makespan_s = t;
    rep.throughput_tok_s = Some(if t > 0.0 {
        rep.tokens_completed as f64 / t
    } else {
        0.0
    });
    Ok(rep)
}

/// Column header of `report.csv`.
pub const REPORT_HEADER: &str = "label,strategy,model,tokens_per_iteration,seed,layers,mean_layer_latency_s,makespan_s,\
throughput_tok_s,mean_utilization,utilization_variance,peak_buffer_bytes,ddr_bytes,d2d_bytes,deferrals,\
speedup_vs_first,buffer_ratio_vs_first";

/// One `report.csv` row. Ratio columns compare against the first row:
/// `speedup = latency / first latency`, `buffer ratio = first peak / peak`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub report: SimReport,
    pub window_s: f64,
}

pub fn write_report_csv(mut w: impl Write, rows: &[ReportRow]) -> std::io::Result<()> {
    writeln!(w, "{REPORT_HEADER}")?;
    let first = rows.first().map(|r| &r.report);
    for row in rows {
        let r = &row.report;
        let var = if row.window_s > 0.0 && r.makespan_s > 0.0 {
            utilization_series(r, row.window_s).variance()
        } else {
            0.0
        };
        let (speedup, ratio) = match first {
            Some(f) => (
                ratio_or_nan(r.mean_layer_latency_s(), f.mean_layer_latency_s()),
                ratio_or_nan(f.max_peak_bytes() as f64, r.max_peak_bytes() as f64),
            ),
            None => (f64::NAN, f64::NAN),
        };
        writeln!(
            w,
            "{},{},{},{},{},{},{:e},{:e},{},{},{:e},{},{},{},{},{},{}",
            row.label,
            r.strategy,
            r.model,
            r.tokens_per_iteration,
            r.seed,
            r.layer_latency_s.len(),
            r.mean_layer_latency_s(),
            r.makespan_s,
            r.throughput_tok_s
                .map(|x| format!("{x:e}"))
                .unwrap_or_default(),
            r.mean_utilization(),
            var,
            r.max_peak_bytes(),
            r.ddr_bytes,
            r.d2d_bytes,
            r.total_deferrals(),
            speedup,
            ratio
        )?;
    }
    Ok(())
}

/// `num / den`; a run against itself is exactly 1.
fn ratio_or_nan(num: f64, den: f64) -> f64 {
    if num == den {
        1.0
    } else if den == 0.0 {
        f64::NAN
    } else {
        num / den
    }
}
