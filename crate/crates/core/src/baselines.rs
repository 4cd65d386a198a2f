//! Expert-parallel baselines on the same resource model: round-robin EP and
//! a popularity-driven placement in the style of Hydra.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use crate::config::{HardwareConfig, ModelConfig};
use crate::engine::{ComputeRecord, EventKind, Fabric, LayerResult, TimelineEvent};
use crate::error::SimError;
use crate::scheduler::LayerWork;
use crate::timing::TimingModel;

/// Owner chiplet of every expert.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpPlacement {
    pub owner: Vec<usize>,
}

impl EpPlacement {
    /// `owner = expert mod C`.
    pub fn round_robin(num_experts: usize, num_chiplets: usize) -> Self {
        EpPlacement {
            owner: (0..num_experts).map(|e| e % num_chiplets).collect(),
        }
    }

    pub fn validate(&self, num_chiplets: usize) -> Result<(), SimError> {
        match self.owner.iter().position(|&c| c >= num_chiplets) {
            Some(e) => Err(SimError::InvalidSchedule(format!(
                "expert {e} placed on chiplet {} of {num_chiplets}",
                self.owner[e]
            ))),
            None => Ok(()),
        }
    }

    pub fn experts_on(&self, chiplet: usize) -> Vec<usize> {
        (0..self.owner.len())
            .filter(|&e| self.owner[e] == chiplet)
            .collect()
    }

    /// One line per chiplet: `chiplet c: e0 e4 ...`.
    pub fn dump(&self, num_chiplets: usize) -> String {
        (0..num_chiplets)
            .map(|c| {
                let es: Vec<String> = self.experts_on(c).iter().map(|e| format!("e{e}")).collect();
                format!("chiplet {c}: {}\n", es.join(" "))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EpEv {
    LoadDone,
    Wake,
    ComputeDone,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Timed {
    t: f64,
    chiplet: usize,
    kind: EpEv,
    expert: usize,
}

impl Eq for Timed {}
impl PartialOrd for Timed {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Timed {
    fn cmp(&self, o: &Self) -> Ordering {
        o.t.total_cmp(&self.t)
            .then(o.chiplet.cmp(&self.chiplet))
            .then(o.kind.cmp(&self.kind))
            .then(o.expert.cmp(&self.expert))
    }
}

#[derive(Debug, Default, Clone)]
struct Owner {
    queue: VecDeque<usize>,
    /// Loaded or loading experts in load order.
    resident: Vec<(usize, bool)>,
    resident_bytes: u64,
    loading: bool,
    computing: bool,
}

/// Expert parallelism: tokens travel to the owners of their experts, owners
/// stream whole experts from DDR, results travel back.
pub fn ep_run_layer(
    work: &LayerWork,
    placement: &EpPlacement,
    hw: &HardwareConfig,
    model: &ModelConfig,
) -> Result<LayerResult, SimError> {
    let c = hw.num_chiplets();
    placement.validate(c)?;
    if placement.owner.len() != work.num_experts() {
        return Err(SimError::InvalidSchedule(
            "placement must cover every expert".into(),
        ));
    }
    let mut fab = Fabric::new(hw);
    let timing = fab.timing;
    let mut res = LayerResult::empty(c, hw.ddr_channels);
    let elem = hw.weight_bytes_per_element;
    let act = model.d_model * elem;
    let eb = model.expert_weight_bytes(elem);
    let activated = work.activated();

    // all-to-all dispatch: each token travels once to every distinct owner
    let mut arrival = vec![vec![0.0f64; c]; c];
    for h in 0..c {
        for o in 0..c {
            if h == o {
                continue;
            }
            let mut toks: Vec<usize> = activated
                .iter()
                .filter(|&&e| placement.owner[e] == o)
                .flat_map(|&e| work.tokens[e][h].iter().copied())
                .collect();
            toks.sort_unstable();
            toks.dedup();
            if toks.is_empty() {
                continue;
            }
            let bytes = toks.len() as u64 * act;
            let (start, end) = fab.transfer(0.0, h, o, bytes);
            res.d2d_bytes += bytes;
            push_xfer(&mut res, start, end, h, o, bytes);
            arrival[h][o] = end;
        }
    }
    let mut ready_at = vec![0.0f64; work.num_experts()];
    for &e in &activated {
        let o = placement.owner[e];
        for h in 0..c {
            if h != o && !work.tokens[e][h].is_empty() {
                ready_at[e] = ready_at[e].max(arrival[h][o]);
            }
        }
    }

    let mut owners: Vec<Owner> = vec![Owner::default(); c];
    for &e in &activated {
        owners[placement.owner[e]].queue.push_back(e);
    }
    let mut occupied = vec![0u64; c];
    let mut heap = BinaryHeap::new();
    let mut now = 0.0;
    let mut pending_returns: Vec<(f64, usize, usize)> = Vec::new();
    let mut left = activated.len();
    loop {
        // progress
        let mut changed = true;
        while changed {
            changed = false;
            for o in 0..c {
                let ow = &mut owners[o];
                if !ow.loading {
                    if let Some(&e) = ow.queue.front() {
                        if ow.resident.is_empty()
                            || ow.resident_bytes + eb <= hw.buffer_bytes_per_chiplet
                        {
                            ow.queue.pop_front();
                            ow.loading = true;
                            ow.resident.push((e, false));
                            ow.resident_bytes += eb;
                            occupied[o] += eb;
                            res.peak_bytes[o] = res.peak_bytes[o].max(occupied[o]);
                            let (_, end) = fab.ddr_load(now, o, eb);
                            let ch = fab.channel_of(o);
                            res.ddr_bytes += eb;
                            res.ddr_bytes_per_channel[ch] += eb;
                            res.timeline
                                .push(ev(now, o, EventKind::DdrLoad, Some(e), eb));
                            heap.push(Timed {
                                t: end,
                                chiplet: o,
                                kind: EpEv::LoadDone,
                                expert: e,
                            });
                            changed = true;
                        }
                    }
                }
                let ow = &mut owners[o];
                if !ow.computing {
                    let pick = ow
                        .resident
                        .iter()
                        .find(|(e, loaded)| *loaded && ready_at[*e] <= now)
                        .map(|x| x.0);
                    if let Some(e) = pick {
                        ow.computing = true;
                        let n = work.count(e) as u64;
                        let end =
                            now + timing.compute_s(n, model.expert_elements()) + timing.overhead_s;
                        res.busy[o].push((now, end));
                        let mut tokens: Vec<usize> =
                            work.tokens[e].iter().flatten().copied().collect();
                        tokens.sort_unstable();
                        res.computes.push(ComputeRecord {
                            chiplet: o,
                            expert: e,
                            col_start: 0,
                            col_end: model.d_expert,
                            tokens,
                            start_s: now,
                            end_s: end,
                        });
                        res.timeline
                            .push(ev(now, o, EventKind::Compute, Some(e), eb));
                        heap.push(Timed {
                            t: end,
                            chiplet: o,
                            kind: EpEv::ComputeDone,
                            expert: e,
                        });
                        changed = true;
                    }
                }
            }
        }
        if left == 0 {
            break;
        }
        let Some(first) = heap.pop() else {
            return Err(SimError::DeadlockDetected {
                time: now,
                state: format!("{left} experts unfinished"),
            });
        };
        now = first.t;
        let mut batch = vec![first];
        while heap.peek().is_some_and(|x| x.t == now) {
            batch.push(heap.pop().expect("peeked"));
        }
        for x in batch {
            let o = x.chiplet;
            match x.kind {
                EpEv::LoadDone => {
                    owners[o].loading = false;
                    for r in owners[o].resident.iter_mut() {
                        if r.0 == x.expert {
                            r.1 = true;
                        }
                    }
                    if ready_at[x.expert] > now {
                        heap.push(Timed {
                            t: ready_at[x.expert],
                            chiplet: o,
                            kind: EpEv::Wake,
                            expert: x.expert,
                        });
                    }
                }
                EpEv::Wake => {}
                EpEv::ComputeDone => {
                    let ow = &mut owners[o];
                    ow.computing = false;
                    ow.resident.retain(|r| r.0 != x.expert);
                    ow.resident_bytes -= eb;
                    occupied[o] -= eb;
                    res.timeline
                        .push(ev(now, o, EventKind::Release, Some(x.expert), eb));
                    pending_returns.push((now, o, x.expert));
                    left -= 1;
                }
            }
        }
    }

    // results travel home in completion order
    let mut makespan = res.busy.iter().flatten().map(|b| b.1).fold(0.0, f64::max);
    for (t, o, e) in pending_returns {
        for h in 0..c {
            let n = work.tokens[e][h].len() as u64;
            if h == o || n == 0 {
                continue;
            }
            let (start, end) = fab.transfer(t, o, h, n * act);
            res.d2d_bytes += n * act;
            push_xfer(&mut res, start, end, o, h, n * act);
            makespan = makespan.max(end);
        }
    }
    res.makespan_s = makespan;
    Ok(res)
}

fn ev(t: f64, chiplet: usize, kind: EventKind, expert: Option<usize>, bytes: u64) -> TimelineEvent {
    TimelineEvent {
        time_s: t,
        chiplet,
        kind,
        expert,
        slice: None,
        bytes,
    }
}

fn push_xfer(res: &mut LayerResult, start: f64, end: f64, src: usize, dst: usize, bytes: u64) {
    res.timeline
        .push(ev(start, src, EventKind::D2dSend, None, bytes));
    res.timeline
        .push(ev(end, dst, EventKind::D2dRecv, None, bytes));
}

/// Exponentially weighted token counts per (expert, home chiplet).
#[derive(Debug, Clone, PartialEq)]
pub struct PopularityStats {
    pub decay: f64,
    /// `ewma[expert][chiplet]`
    pub ewma: Vec<Vec<f64>>,
    pub observations: usize,
}

impl PopularityStats {
    pub fn new(num_experts: usize, num_chiplets: usize, decay: f64) -> Self {
        assert!(decay > 0.0 && decay <= 1.0, "decay must lie in (0, 1]");
        PopularityStats {
            decay,
            ewma: vec![vec![0.0; num_chiplets]; num_experts],
            observations: 0,
        }
    }

    pub fn observe(&mut self, work: &LayerWork) {
        let first = self.observations == 0;
        for (e, row) in self.ewma.iter_mut().enumerate() {
            for (h, v) in row.iter_mut().enumerate() {
                let n = work.count_at(e, h) as f64;
                *v = if first {
                    n
                } else {
                    self.decay * n + (1.0 - self.decay) * *v
                };
            }
        }
        self.observations += 1;
    }

    pub fn popularity(&self, expert: usize) -> f64 {
        self.ewma[expert].iter().sum()
    }
}

/// Projected per-expert costs under a placement.
struct Projection<'a> {
    stats: &'a PopularityStats,
    timing: TimingModel,
    mesh: crate::topology::Mesh,
    act: u64,
    expert_elems: u64,
    expert_bytes: u64,
}

impl Projection<'_> {
    /// Token dispatch plus result return time if `e` lives on `c`.
    fn transfer_s(&self, e: usize, c: usize) -> f64 {
        self.stats.ewma[e]
            .iter()
            .enumerate()
            .map(|(h, &n)| {
                2.0 * n * self.act as f64 * self.mesh.hops(h, c) as f64 / self.timing.d2d_bw
            })
            .sum()
    }

    fn load_s(&self, e: usize) -> f64 {
        if self.stats.popularity(e) <= 0.0 {
            return 0.0;
        }
        self.stats.popularity(e) * self.expert_elems as f64 / self.timing.element_rate
            + self.expert_bytes as f64 / self.timing.ddr_bw
    }

    fn objective(&self, p: &EpPlacement, chiplets: usize) -> f64 {
        let mut load = vec![0.0; chiplets];
        let mut xfer = 0.0;
        for (e, &c) in p.owner.iter().enumerate() {
            load[c] += self.load_s(e);
            xfer += self.transfer_s(e, c);
        }
        xfer + load.iter().copied().fold(0.0, f64::max)
    }
}

/// Projected cost of a placement: total token transfer time plus the most
/// loaded chiplet's compute and weight-load time.
pub fn projected_cost(
    stats: &PopularityStats,
    placement: &EpPlacement,
    hw: &HardwareConfig,
    model: &ModelConfig,
) -> f64 {
    projection(stats, hw, model).objective(placement, hw.num_chiplets())
}

fn projection<'a>(
    stats: &'a PopularityStats,
    hw: &HardwareConfig,
    model: &ModelConfig,
) -> Projection<'a> {
    Projection {
        stats,
        timing: TimingModel::new(hw),
        mesh: crate::topology::Mesh::new(hw.grid_rows, hw.grid_cols),
        act: model.d_model * hw.weight_bytes_per_element,
        expert_elems: model.expert_elements(),
        expert_bytes: model.expert_weight_bytes(hw.weight_bytes_per_element),
    }
}

/// Greedy popularity-driven placement. Experts are taken in descending
/// popularity and each goes to the chiplet minimising its projected transfer
/// time plus that chiplet's accumulated load. The result is never worse than
/// round-robin under [`projected_cost`].
pub fn hydra_place(
    stats: &PopularityStats,
    hw: &HardwareConfig,
    model: &ModelConfig,
) -> EpPlacement {
    let c = hw.num_chiplets();
    let e = stats.ewma.len();
    let proj = projection(stats, hw, model);
    let mut order: Vec<usize> = (0..e).collect();
    order.sort_by(|&a, &b| {
        stats
            .popularity(b)
            .total_cmp(&stats.popularity(a))
            .then(a.cmp(&b))
    });
    let mut load = vec![0.0f64; c];
    let mut owner = vec![0; e];
    for x in order {
        let w = proj.load_s(x);
        let best = (0..c)
            .min_by(|&a, &b| {
                let ca = proj.transfer_s(x, a) + load[a] + w;
                let cb = proj.transfer_s(x, b) + load[b] + w;
                ca.total_cmp(&cb).then(a.cmp(&b))
            })
            .expect("at least one chiplet");
        owner[x] = best;
        load[best] += w;
    }
    let greedy = EpPlacement { owner };
    let rr = EpPlacement::round_robin(e, c);
    if proj.objective(&greedy, c) <= proj.objective(&rr, c) {
        greedy
    } else {
        rr
    }
}
