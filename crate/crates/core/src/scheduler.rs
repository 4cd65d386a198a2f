//! Expert ordering, trajectories, trajectory scheduling and token buffering.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::topology::Mesh;
use crate::workload::{GatingTrace, Request};

/// Chiplet bit vector (bit i = chiplet i), up to 64 chiplets.
pub type Mask = u64;

pub fn mask_of(chiplets: impl IntoIterator<Item = usize>) -> Mask {
    chiplets.into_iter().fold(0, |m, c| m | (1 << c))
}

pub fn mask_members(mask: Mask) -> impl Iterator<Item = usize> {
    (0..64).filter(move |i| mask >> i & 1 == 1)
}

/// Idle Chiplet Vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Icv(pub Mask);

impl Icv {
    pub fn all_idle(chiplets: usize) -> Self {
        Icv(full_mask(chiplets))
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

pub fn full_mask(chiplets: usize) -> Mask {
    if chiplets >= 64 {
        u64::MAX
    } else {
        (1u64 << chiplets) - 1
    }
}

/// Allocation: `icv AND NOT mask`.
pub fn icv_allocate(icv: Icv, mask: Mask) -> Icv {
    Icv(icv.0 & !mask)
}

/// Release: `icv OR mask`.
pub fn icv_release(icv: Icv, mask: Mask) -> Icv {
    Icv(icv.0 | mask)
}

/// Tokens of one layer grouped by expert and home chiplet, after removing
/// deferred requests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerWork {
    pub num_chiplets: usize,
    /// `tokens[expert][chiplet]`
    pub tokens: Vec<Vec<Vec<usize>>>,
}

impl LayerWork {
    pub fn from_trace(trace: &GatingTrace, layer: usize) -> Self {
        Self::excluding(trace, layer, &[])
    }

    /// Work of `layer` with every token of the listed requests removed.
    pub fn excluding(trace: &GatingTrace, layer: usize, deferred: &[usize]) -> Self {
        let c = trace.num_chiplets;
        let mut tokens = vec![vec![Vec::new(); c]; trace.num_experts];
        for g in &trace.layers[layer] {
            if deferred.contains(&g.request) {
                continue;
            }
            let home = trace.home_chiplet(g.token);
            for &e in &g.experts {
                tokens[e][home].push(g.token);
            }
        }
        LayerWork {
            num_chiplets: c,
            tokens,
        }
    }

    pub fn num_experts(&self) -> usize {
        self.tokens.len()
    }

    pub fn count(&self, expert: usize) -> u32 {
        self.tokens[expert].iter().map(|t| t.len() as u32).sum()
    }

    pub fn counts(&self) -> Vec<u32> {
        (0..self.num_experts()).map(|e| self.count(e)).collect()
    }

    pub fn count_at(&self, expert: usize, chiplet: usize) -> u32 {
        self.tokens[expert][chiplet].len() as u32
    }

    pub fn mask(&self, expert: usize) -> Mask {
        mask_of((0..self.num_chiplets).filter(|&c| !self.tokens[expert][c].is_empty()))
    }

    pub fn activated(&self) -> Vec<usize> {
        (0..self.num_experts())
            .filter(|&e| self.count(e) > 0)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EitEntry {
    pub mask: Mask,
    pub tokens: u32,
}

/// Expert Information Table: trajectory mask and token count per expert.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertInfoTable {
    pub entries: Vec<EitEntry>,
}

impl ExpertInfoTable {
    pub fn build(work: &LayerWork) -> Self {
        ExpertInfoTable {
            entries: (0..work.num_experts())
                .map(|e| EitEntry {
                    mask: work.mask(e),
                    tokens: work.count(e),
                })
                .collect(),
        }
    }
}

/// Sorts activated experts by descending token count (ties by ascending id)
/// and pairs opposite ends of the list.
pub fn paired_load_order(counts: &[u32]) -> Vec<(usize, Option<usize>)> {
    let sorted = sorted_by_count(counts);
    let l = sorted.len();
    let mut out: Vec<_> = (0..l / 2)
        .map(|i| (sorted[i], Some(sorted[l - 1 - i])))
        .collect();
    if l % 2 == 1 {
        out.push((sorted[l / 2], None));
    }
    out
}

fn sorted_by_count(counts: &[u32]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..counts.len()).filter(|&e| counts[e] > 0).collect();
    ids.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    ids
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    Forward,
    Reverse,
}

/// Ordered chiplet path all micro-slices of an expert follow.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertTrajectory {
    pub expert: usize,
    pub path: Vec<usize>,
    pub direction: Direction,
}

impl ExpertTrajectory {
    /// Members of `mask` in snake order (reversed for [`Direction::Reverse`]),
    /// rotated so that `start` comes first. `start` must be a member.
    pub fn from_mask(
        expert: usize,
        mask: Mask,
        mesh: &Mesh,
        start: usize,
        direction: Direction,
    ) -> Self {
        let mut path: Vec<usize> = mesh
            .snake_order()
            .into_iter()
            .filter(|&c| mask >> c & 1 == 1)
            .collect();
        if direction == Direction::Reverse {
            path.reverse();
        }
        let at = path
            .iter()
            .position(|&c| c == start)
            .expect("start chiplet on trajectory");
        path.rotate_left(at);
        ExpertTrajectory {
            expert,
            path,
            direction,
        }
    }

    pub fn mask(&self) -> Mask {
        mask_of(self.path.iter().copied())
    }

    pub fn next_hop(&self, pos: usize) -> Option<usize> {
        (self.path.len() > 1).then(|| self.path[(pos + 1) % self.path.len()])
    }
}

/// Trajectory of `expert` at `layer`, injected at the lowest-id token holder.
pub fn build_trajectory(
    expert: usize,
    trace: &GatingTrace,
    layer: usize,
    mesh: &Mesh,
) -> ExpertTrajectory {
    let work = LayerWork::from_trace(trace, layer);
    let mask = work.mask(expert);
    assert!(mask != 0, "expert {expert} has no tokens at layer {layer}");
    ExpertTrajectory::from_mask(
        expert,
        mask,
        mesh,
        mask.trailing_zeros() as usize,
        Direction::Forward,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderPolicy {
    /// Paired-load: hot experts paired with cold ones.
    Paired,
    /// Expert-id order, one expert per dispatch group.
    ExpertId,
}

/// Experts dispatched together, with their trajectory masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DispatchGroup {
    pub experts: Vec<usize>,
    pub union_mask: Mask,
}

/// Static part of a layer schedule: dispatch order and deferrals.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduledLayer {
    pub layer: usize,
    pub groups: Vec<DispatchGroup>,
    pub eit: ExpertInfoTable,
    pub deferred_requests: Vec<usize>,
}

impl ScheduledLayer {
    pub fn experts(&self) -> impl Iterator<Item = usize> + '_ {
        self.groups.iter().flat_map(|g| g.experts.iter().copied())
    }

    /// Same order with every pair split into consecutive singletons.
    pub fn split_pairs(&self) -> Self {
        let mut s = self.clone();
        s.groups = self
            .experts()
            .map(|e| DispatchGroup {
                experts: vec![e],
                union_mask: self.eit.entries[e].mask,
            })
            .collect();
        s
    }
}

/// Builds the dispatch order of one layer.
pub fn schedule_layer(
    work: &LayerWork,
    layer: usize,
    policy: OrderPolicy,
    deferred: &[usize],
) -> ScheduledLayer {
    let eit = ExpertInfoTable::build(work);
    let counts: Vec<u32> = eit.entries.iter().map(|e| e.tokens).collect();
    let groups = match policy {
        OrderPolicy::Paired => paired_load_order(&counts)
            .into_iter()
            .map(|(a, b)| {
                let experts: Vec<usize> = std::iter::once(a).chain(b).collect();
                let union_mask = experts.iter().fold(0, |m, &e| m | eit.entries[e].mask);
                DispatchGroup {
                    experts,
                    union_mask,
                }
            })
            .collect(),
        OrderPolicy::ExpertId => (0..counts.len())
            .filter(|&e| counts[e] > 0)
            .map(|e| DispatchGroup {
                experts: vec![e],
                union_mask: eit.entries[e].mask,
            })
            .collect(),
    };
    ScheduledLayer {
        layer,
        groups,
        eit,
        deferred_requests: deferred.to_vec(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SchedAction {
    Dispatch {
        group: usize,
        experts: Vec<usize>,
        c_star: usize,
    },
    Preload {
        group: usize,
        experts: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DispatchRecord {
    pub time: f64,
    pub group: usize,
    pub experts: Vec<usize>,
    pub c_star: usize,
    pub idle_before: Mask,
    pub idle_after: Mask,
}

/// Event-driven trajectory scheduler. Call [`TrajectoryScheduler::poll`]
/// whenever the idle set may have changed and
/// [`TrajectoryScheduler::on_complete`] when an expert finishes.
#[derive(Debug, Clone)]
pub struct TrajectoryScheduler {
    groups: Vec<DispatchGroup>,
    masks: Vec<Mask>,
    pending: Vec<bool>,
    preloaded: Vec<bool>,
    running: Vec<usize>,
    idle: Icv,
    /// Only dispatch when the whole trajectory is idle.
    strict: bool,
    allow_preload: bool,
    pub log: Vec<DispatchRecord>,
}

impl TrajectoryScheduler {
    pub fn new(
        schedule: &ScheduledLayer,
        num_chiplets: usize,
        strict: bool,
        allow_preload: bool,
    ) -> Self {
        TrajectoryScheduler {
            groups: schedule.groups.clone(),
            masks: schedule.eit.entries.iter().map(|e| e.mask).collect(),
            pending: vec![true; schedule.groups.len()],
            preloaded: vec![false; schedule.groups.len()],
            running: Vec::new(),
            idle: Icv::all_idle(num_chiplets),
            strict,
            allow_preload,
            log: Vec::new(),
        }
    }

    pub fn idle(&self) -> Icv {
        self.idle
    }

    pub fn set_idle(&mut self, icv: Icv) {
        self.idle = icv;
    }

    pub fn running(&self) -> &[usize] {
        &self.running
    }

    pub fn finished(&self) -> bool {
        self.running.is_empty() && !self.pending.iter().any(|&p| p)
    }

    fn dispatchable(&self, g: usize) -> bool {
        let m = self.groups[g].union_mask;
        if self.strict {
            m & self.idle.0 == m
        } else {
            m & self.idle.0 != 0
        }
    }

    /// Dispatches groups in order while chiplets are idle, then asks for a
    /// pre-load of every group still waiting.
    pub fn poll(&mut self, now: f64) -> Vec<SchedAction> {
        let mut out = Vec::new();
        loop {
            if self.idle.is_empty() {
                break;
            }
            let Some(g) = (0..self.groups.len()).find(|&g| self.pending[g] && self.dispatchable(g))
            else {
                break;
            };
            let before = self.idle;
            let mask = self.groups[g].union_mask;
            let c_star = (mask & before.0).trailing_zeros() as usize;
            self.idle = icv_allocate(self.idle, mask);
            self.pending[g] = false;
            self.running.extend(self.groups[g].experts.iter().copied());
            self.log.push(DispatchRecord {
                time: now,
                group: g,
                experts: self.groups[g].experts.clone(),
                c_star,
                idle_before: before.0,
                idle_after: self.idle.0,
            });
            out.push(SchedAction::Dispatch {
                group: g,
                experts: self.groups[g].experts.clone(),
                c_star,
            });
        }
        if self.allow_preload {
            for g in 0..self.groups.len() {
                if self.pending[g] && !self.preloaded[g] {
                    self.preloaded[g] = true;
                    out.push(SchedAction::Preload {
                        group: g,
                        experts: self.groups[g].experts.clone(),
                    });
                }
            }
        }
        out
    }

    /// Returns chiplets of the finished expert that no running expert uses.
    pub fn on_complete(&mut self, expert: usize) {
        let Some(i) = self.running.iter().position(|&e| e == expert) else {
            return;
        };
        self.running.remove(i);
        let busy = self.running.iter().fold(0, |m, &e| m | self.masks[e]);
        self.idle = icv_release(self.idle, self.masks[expert] & !busy);
    }
}

/// Human-readable schedule dump: dispatch order, trajectories, deferrals.
pub fn schedule_dump(schedule: &ScheduledLayer, log: &[DispatchRecord], mesh: &Mesh) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "layer {}", schedule.layer);
    let _ = writeln!(s, "  deferred requests: {:?}", schedule.deferred_requests);
    for (i, g) in schedule.groups.iter().enumerate() {
        let trajs: Vec<String> = g
            .experts
            .iter()
            .map(|&e| {
                let m = schedule.eit.entries[e].mask;
                let t = ExpertTrajectory::from_mask(
                    e,
                    m,
                    mesh,
                    m.trailing_zeros() as usize,
                    Direction::Forward,
                );
                format!("e{}(n={}) {:?}", e, schedule.eit.entries[e].tokens, t.path)
            })
            .collect();
        let _ = writeln!(s, "  group {i}: {}", trajs.join(" + "));
    }
    for r in log {
        let _ = writeln!(
            s,
            "  t={:.9} dispatch group {} experts {:?} c*={} idle {:#b} -> {:#b}",
            r.time, r.group, r.experts, r.c_star, r.idle_before, r.idle_after
        );
    }
    s
}

/// Token-buffering knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BufferingParams {
    pub theta_min: u32,
    pub n_threshold: u32,
    pub slack_pct: u32,
}

impl BufferingParams {
    /// `N = round(100 / slack)`, `theta_min = max(2, tokens / 64)`.
    /// A slack of 0 disables buffering.
    pub fn from_slack(slack_pct: u32, tokens_per_iteration: usize) -> Self {
        let n_threshold = if slack_pct == 0 {
            u32::MAX
        } else {
            ((100.0 / slack_pct as f64).round() as u32).max(1)
        };
        BufferingParams {
            theta_min: (tokens_per_iteration as u32 / 64).max(2),
            n_threshold,
            slack_pct,
        }
    }

    pub fn enabled(&self) -> bool {
        self.slack_pct > 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BufferDecision {
    Proceed,
    Defer,
}

/// One buffering decision for `request` at a layer boundary. `activated_counts`
/// holds `n_e` for every expert the request activates at this layer.
pub fn token_buffering_update(
    request: &mut Request,
    activated_counts: &[u32],
    params: &BufferingParams,
) -> BufferDecision {
    if !params.enabled() {
        return BufferDecision::Proceed;
    }
    if request.fw_counter >= params.n_threshold {
        request.qos_timer += 1;
        request.fw_counter = 0;
    }
    if request.qos_timer > 0 && activated_counts.iter().any(|&n| n < params.theta_min) {
        request.qos_timer -= 1;
        BufferDecision::Defer
    } else {
        BufferDecision::Proceed
    }
}
