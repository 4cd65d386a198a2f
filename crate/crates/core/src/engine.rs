//! Discrete-event simulation of micro-slice flows on the chiplet array.
//!
//! Every chiplet owns a weight buffer, one compute unit and one DDR DMA
//! engine. Directed mesh links carry one transfer at a time. A DDR load is
//! admitted only when every chiplet on the slice's trajectory can still hold
//! it, so forwards never wait for buffer space and the flow cannot deadlock.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::config::{HardwareConfig, ModelConfig};
use crate::error::SimError;
use crate::scheduler::{
    mask_members, Direction, DispatchRecord, ExpertTrajectory, LayerWork, SchedAction,
    ScheduledLayer, TrajectoryScheduler,
};
use crate::timing::{micro_slices, slices_with, MicroSliceId, TimingModel};
use crate::topology::Mesh;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineMode {
    /// Forward while computing and prefer the latest received slice.
    pub eager: bool,
    /// Co-execute paired experts and pre-load the next group.
    pub fusion: bool,
    /// Pick the DDR target with the most free buffer space.
    pub rule5: bool,
    /// Coarse slice circulation with token redispatch.
    pub naive_slice_mode: bool,
    /// Dispatch only when the whole trajectory is idle.
    #[serde(default)]
    pub strict_dispatch: bool,
}

impl EngineMode {
    pub fn fsedp() -> Self {
        EngineMode {
            eager: true,
            fusion: true,
            rule5: false,
            naive_slice_mode: false,
            strict_dispatch: false,
        }
    }

    /// Non-eager flow: local slices first, forward after compute.
    pub fn baseline_flow() -> Self {
        EngineMode {
            eager: false,
            fusion: false,
            ..Self::fsedp()
        }
    }

    pub fn naive() -> Self {
        EngineMode {
            eager: false,
            fusion: false,
            rule5: false,
            naive_slice_mode: true,
            strict_dispatch: false,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.naive_slice_mode && (self.eager || self.fusion || self.rule5) {
            return Err("naive slice mode excludes eager, fusion and rule5".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    DdrLoad,
    D2dSend,
    D2dRecv,
    Compute,
    Release,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::DdrLoad => "ddr_load",
            EventKind::D2dSend => "d2d_send",
            EventKind::D2dRecv => "d2d_recv",
            EventKind::Compute => "compute",
            EventKind::Release => "release",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimelineEvent {
    pub time_s: f64,
    pub chiplet: usize,
    pub kind: EventKind,
    /// `None` for token transfers carrying several experts' tokens.
    pub expert: Option<usize>,
    /// `None` for whole-expert operations and token transfers.
    pub slice: Option<usize>,
    pub bytes: u64,
}

/// One compute operation: `tokens` against columns `[col_start, col_end)` of
/// every matrix of `expert`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComputeRecord {
    pub chiplet: usize,
    pub expert: usize,
    pub col_start: u64,
    pub col_end: u64,
    pub tokens: Vec<usize>,
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerResult {
    pub makespan_s: f64,
    /// Compute-busy intervals per chiplet, in start order.
    pub busy: Vec<Vec<(f64, f64)>>,
    pub peak_bytes: Vec<u64>,
    pub timeline: Vec<TimelineEvent>,
    pub computes: Vec<ComputeRecord>,
    pub ddr_bytes: u64,
    pub ddr_bytes_per_channel: Vec<u64>,
    pub d2d_bytes: u64,
    pub dispatch_log: Vec<DispatchRecord>,
}

impl LayerResult {
    pub fn empty(chiplets: usize, channels: usize) -> Self {
        LayerResult {
            busy: vec![Vec::new(); chiplets],
            peak_bytes: vec![0; chiplets],
            ddr_bytes_per_channel: vec![0; channels],
            ..Default::default()
        }
    }

    pub fn busy_time(&self, chiplet: usize) -> f64 {
        self.busy[chiplet].iter().map(|(a, b)| b - a).sum()
    }

    pub fn utilization(&self, chiplet: usize) -> f64 {
        if self.makespan_s <= 0.0 {
            0.0
        } else {
            (self.busy_time(chiplet) / self.makespan_s).min(1.0)
        }
    }

    pub fn mean_utilization(&self) -> f64 {
        let c = self.busy.len().max(1);
        (0..self.busy.len())
            .map(|i| self.utilization(i))
            .sum::<f64>()
            / c as f64
    }

    pub fn max_peak_bytes(&self) -> u64 {
        self.peak_bytes.iter().copied().max().unwrap_or(0)
    }

    /// Writes the timeline CSV (`time_s,chiplet,kind,expert,slice,bytes`).
    pub fn write_timeline(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "time_s,chiplet,kind,expert,slice,bytes")?;
        for e in &self.timeline {
            let slice = e.slice.map(|s| s.to_string()).unwrap_or_default();
            let expert = e.expert.map(|s| s.to_string()).unwrap_or_default();
            writeln!(
                w,
                "{:.12e},{},{},{},{},{}",
                e.time_s,
                e.chiplet,
                e.kind.as_str(),
                expert,
                slice,
                e.bytes
            )?;
        }
        Ok(())
    }
}

/// Where a resident micro-slice came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Ddr,
    D2d,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceStatus {
    Loading,
    Ready,
    Computing,
    Forwarding,
    Done,
}

/// A resident micro-slice as seen by the per-chiplet decision rules.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceView {
    pub expert: usize,
    pub slice: usize,
    pub origin: Origin,
    pub status: SliceStatus,
    pub arrived_at: f64,
    pub hop: usize,
    pub last_hop: bool,
    pub forwarded: bool,
}

/// Snapshot of one chiplet for [`decide_next_action`].
#[derive(Debug, Clone, PartialEq)]
pub struct ChipletState {
    pub chiplet_id: usize,
    pub capacity: u64,
    pub occupied_bytes: u64,
    pub compute_idle: bool,
    pub slices: Vec<SliceView>,
    /// Size of the next micro-slice scheduled for DDR load here, if any.
    pub next_load_bytes: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    ComputeAndForward { expert: usize, slice: usize },
    ComputeLocalPick { expert: usize, slice: usize },
    Release { expert: usize, slice: usize },
    PrefetchFromDdr { bytes: u64 },
    Idle,
}

/// Per-chiplet rule evaluation: release of finished slices first, then
/// Rule 1 (latest received slice), Rule 2 (oldest local slice), then Rule 4.
pub fn decide_next_action(state: &ChipletState, mode: &EngineMode) -> Action {
    for s in &state.slices {
        let finished = s.status == SliceStatus::Done && (s.last_hop || s.forwarded);
        if finished {
            return Action::Release {
                expert: s.expert,
                slice: s.slice,
            };
        }
    }
    if state.compute_idle {
        let cands: Vec<Candidate> = state
            .slices
            .iter()
            .enumerate()
            .filter(|(_, s)| s.status == SliceStatus::Ready)
            .map(|(i, s)| Candidate {
                id: i,
                expert: s.expert,
                slice: s.slice,
                origin: s.origin,
                arrived_at: s.arrived_at,
                hop: s.hop,
            })
            .collect();
        if let Some(i) = select_compute(&cands, mode.eager) {
            let s = &state.slices[cands[i].id];
            return if s.last_hop {
                Action::ComputeLocalPick {
                    expert: s.expert,
                    slice: s.slice,
                }
            } else if s.origin == Origin::D2d || mode.eager {
                Action::ComputeAndForward {
                    expert: s.expert,
                    slice: s.slice,
                }
            } else {
                Action::ComputeLocalPick {
                    expert: s.expert,
                    slice: s.slice,
                }
            };
        }
    }
    if let Some(bytes) = state.next_load_bytes {
        if state.capacity - state.occupied_bytes >= bytes {
            return Action::PrefetchFromDdr { bytes };
        }
    }
    Action::Idle
}

/// Chooses the Rule 5 DDR target: most free bytes, ties to the lowest id.
pub fn rule5_target(free_bytes: &[(usize, u64)]) -> Option<usize> {
    free_bytes
        .iter()
        .copied()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(c, _)| c)
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    id: usize,
    expert: usize,
    slice: usize,
    origin: Origin,
    arrived_at: f64,
    hop: usize,
}

fn select_compute(cands: &[Candidate], eager: bool) -> Option<usize> {
    let tie = |a: &Candidate, b: &Candidate| a.expert.cmp(&b.expert).then(a.slice.cmp(&b.slice));
    if eager {
        let received = (0..cands.len())
            .filter(|&i| cands[i].origin == Origin::D2d)
            .min_by(|&i, &j| {
                let (a, b) = (&cands[i], &cands[j]);
                b.arrived_at.total_cmp(&a.arrived_at).then(tie(a, b))
            });
        if received.is_some() {
            return received;
        }
        (0..cands.len()).min_by(|&i, &j| {
            let (a, b) = (&cands[i], &cands[j]);
            a.arrived_at.total_cmp(&b.arrived_at).then(tie(a, b))
        })
    } else {
        (0..cands.len()).min_by(|&i, &j| {
            let (a, b) = (&cands[i], &cands[j]);
            a.hop
                .cmp(&b.hop)
                .then(a.arrived_at.total_cmp(&b.arrived_at))
                .then(tie(a, b))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Fwd {
    Last,
    NotYet,
    InFlight,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum St {
    Loading,
    Incoming,
    Ready,
    Computing,
    Computed,
}

#[derive(Debug, Clone)]
struct Inst {
    expert: usize,
    slice: usize,
    bytes: u64,
    chiplet: usize,
    /// Position of the loader on the trajectory.
    origin_pos: usize,
    hop: usize,
    origin: Origin,
    st: St,
    arrived: f64,
    fwd: Fwd,
    released: bool,
    preload: bool,
    /// Loaded off the trajectory; handed to `path[origin_pos]` on dispatch.
    staged: bool,
}

#[derive(Debug, Clone, Default)]
struct ExpRun {
    slices: Vec<MicroSliceId>,
    mask: u64,
    path: Vec<usize>,
    pos: Vec<usize>,
    started: bool,
    dispatched: bool,
    dispatch_seq: usize,
    /// Static per-chiplet DDR load queues.
    queue: Vec<VecDeque<usize>>,
    /// Unassigned slices when Rule 5 picks targets.
    pool: VecDeque<usize>,
    loads_issued: Vec<u32>,
    preloading: bool,
    computes_left: usize,
    done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EvKind {
    ComputeDone,
    XferDone,
    DdrDone,
    XferStart,
}

#[derive(Debug, Clone, Copy)]
struct Ev {
    t: f64,
    chiplet: usize,
    kind: EvKind,
    seq: u64,
    /// Instance for DDR/compute events; receiver instance for transfers.
    inst: usize,
    /// Sender instance for transfers.
    other: usize,
}

impl PartialEq for Ev {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Ev {}
impl PartialOrd for Ev {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Ev {
    // Reversed: BinaryHeap pops the earliest event.
    fn cmp(&self, o: &Self) -> Ordering {
        o.t.total_cmp(&self.t)
            .then(o.kind.cmp(&self.kind))
            .then(o.chiplet.cmp(&self.chiplet))
            .then(o.seq.cmp(&self.seq))
    }
}

/// Shared link / channel reservation state.
#[derive(Debug, Clone)]
pub(crate) struct Fabric {
    pub mesh: Mesh,
    pub link_busy: Vec<f64>,
    pub channel_busy: Vec<f64>,
    pub timing: TimingModel,
}

impl Fabric {
    pub fn new(hw: &HardwareConfig) -> Self {
        let mesh = Mesh::new(hw.grid_rows, hw.grid_cols);
        Fabric {
            mesh,
            link_busy: vec![0.0; mesh.len() * 4],
            channel_busy: vec![0.0; hw.ddr_channels],
            timing: TimingModel::new(hw),
        }
    }

    /// Reserves every link of the XY route; returns (start, end).
    pub fn transfer(&mut self, now: f64, src: usize, dst: usize, bytes: u64) -> (f64, f64) {
        let route = self.mesh.xy_route(src, dst);
        let idx: Vec<usize> = route.iter().map(|&l| self.mesh.link_index(l)).collect();
        let start = idx.iter().fold(now, |t, &i| t.max(self.link_busy[i]));
        let end = start + self.timing.d2d_transfer_s(bytes, route.len()) + self.timing.overhead_s;
        for i in idx {
            self.link_busy[i] = end;
        }
        (start, end)
    }

    pub fn channel_of(&self, chiplet: usize) -> usize {
        chiplet % self.channel_busy.len()
    }

    /// Sequential DDR load on the chiplet's channel; returns (start, end).
    pub fn ddr_load(&mut self, now: f64, chiplet: usize, bytes: u64) -> (f64, f64) {
        let ch = self.channel_of(chiplet);
        let start = now.max(self.channel_busy[ch]);
        let end = start + self.timing.ddr_load_s(bytes) + self.timing.overhead_s;
        self.channel_busy[ch] = end;
        (start, end)
    }
}

struct Engine<'a> {
    hw: &'a HardwareConfig,
    work: &'a LayerWork,
    mode: EngineMode,
    fab: Fabric,
    cap: u64,
    /// Admission limit on committed bytes.
    adm: u64,
    max_slice: u64,
    per_col: u64,
    now: f64,
    seq: u64,
    heap: BinaryHeap<Ev>,
    insts: Vec<Inst>,
    resident: Vec<Vec<usize>>,
    occupied: Vec<u64>,
    committed: Vec<u64>,
    compute_busy: Vec<bool>,
    ddr_busy: Vec<bool>,
    /// Dispatched DDR-origin slices loading or waiting for their first compute.
    ddr_pending: Vec<usize>,
    /// Pre-loaded or staged slices waiting for dispatch or hand-over.
    parked: Vec<usize>,
    preload_order: Vec<usize>,
    exps: Vec<ExpRun>,
    sched: TrajectoryScheduler,
    dispatch_count: usize,
    group_dir: Vec<Direction>,
    remaining: usize,
    /// Exactly-once ledger: computes per (expert, slice, chiplet).
    ledger: Vec<Vec<Vec<u8>>>,
    res: LayerResult,
}

/// Runs one MoE layer of FSE-DP flows.
pub fn run_layer(
    schedule: &ScheduledLayer,
    work: &LayerWork,
    hw: &HardwareConfig,
    model: &ModelConfig,
    mode: &EngineMode,
) -> Result<LayerResult, SimError> {
    mode.validate().map_err(SimError::InvalidSchedule)?;
    if mode.naive_slice_mode {
        return run_naive_fsedp_layer(work, hw, model);
    }
    let c = hw.num_chiplets();
    if work.num_chiplets != c {
        return Err(SimError::InvalidSchedule(format!(
            "work striped over {} chiplets, hardware has {c}",
            work.num_chiplets
        )));
    }
    let schedule = if mode.fusion {
        schedule.clone()
    } else {
        schedule.split_pairs()
    };
    let elem = hw.weight_bytes_per_element;
    let mut exps: Vec<ExpRun> = Vec::with_capacity(work.num_experts());
    let mut remaining = 0;
    for e in 0..work.num_experts() {
        let slices = micro_slices(model, elem, e);
        let mask = work.mask(e);
        if mask != 0 {
            remaining += 1;
        }
        exps.push(ExpRun {
            computes_left: slices.len() * mask.count_ones() as usize,
            slices,
            mask,
            queue: vec![VecDeque::new(); c],
            loads_issued: vec![0; c],
            pos: vec![usize::MAX; c],
            ..Default::default()
        });
    }
    let listed: usize = schedule.groups.iter().map(|g| g.experts.len()).sum();
    if listed != remaining || schedule.experts().any(|e| exps[e].mask == 0) {
        return Err(SimError::InvalidSchedule(
            "schedule must list every activated expert exactly once".into(),
        ));
    }
    let max_slice = exps
        .iter()
        .flat_map(|x| x.slices.iter().map(|s| s.size_bytes))
        .max()
        .unwrap_or(0);
    if remaining > 0 && max_slice > hw.buffer_bytes_per_chiplet {
        return Err(SimError::InvalidSchedule(format!(
            "micro-slice of {max_slice} bytes exceeds the {}-byte buffer",
            hw.buffer_bytes_per_chiplet
        )));
    }
    let mut group_dir = vec![Direction::Forward; work.num_experts()];
    for g in &schedule.groups {
        for (i, &e) in g.experts.iter().enumerate() {
            group_dir[e] = if i == 0 {
                Direction::Forward
            } else {
                Direction::Reverse
            };
        }
    }
    let m = model.micro_slices_per_expert;
    let mut eng = Engine {
        hw,
        work,
        mode: *mode,
        fab: Fabric::new(hw),
        cap: hw.buffer_bytes_per_chiplet,
        adm: if mode.eager {
            ((hw.flow_window_slices + hw.num_chiplets() - 1) as u64 * max_slice)
                .min(hw.buffer_bytes_per_chiplet)
        } else {
            hw.buffer_bytes_per_chiplet
        },
        max_slice,
        per_col: model.matrices_per_expert * model.d_model,
        now: 0.0,
        seq: 0,
        heap: BinaryHeap::new(),
        insts: Vec::new(),
        resident: vec![Vec::new(); c],
        occupied: vec![0; c],
        committed: vec![0; c],
        compute_busy: vec![false; c],
        ddr_busy: vec![false; c],
        ddr_pending: vec![0; c],
        parked: vec![0; c],
        preload_order: Vec::new(),
        exps,
        sched: TrajectoryScheduler::new(&schedule, c, mode.strict_dispatch, mode.fusion),
        dispatch_count: 0,
        group_dir,
        remaining,
        ledger: vec![vec![vec![0; c]; m]; work.num_experts()],
        res: LayerResult::empty(c, hw.ddr_channels),
    };
    eng.run()?;
    Ok(eng.res)
}

impl<'a> Engine<'a> {
    fn push(&mut self, t: f64, chiplet: usize, kind: EvKind, inst: usize, other: usize) {
        self.seq += 1;
        self.heap.push(Ev {
            t,
            chiplet,
            kind,
            seq: self.seq,
            inst,
            other,
        });
    }

    fn log(
        &mut self,
        t: f64,
        chiplet: usize,
        kind: EventKind,
        expert: usize,
        slice: Option<usize>,
        bytes: u64,
    ) {
        self.res.timeline.push(TimelineEvent {
            time_s: t,
            chiplet,
            kind,
            expert: Some(expert),
            slice,
            bytes,
        });
    }

    fn run(&mut self) -> Result<(), SimError> {
        self.progress()?;
        while self.remaining > 0 {
            let Some(first) = self.heap.pop() else {
                return Err(SimError::DeadlockDetected {
                    time: self.now,
                    state: self.describe(),
                });
            };
            self.now = first.t;
            self.handle(first)?;
            while self.heap.peek().is_some_and(|e| e.t == self.now) {
                let ev = self.heap.pop().expect("peeked");
                self.handle(ev)?;
            }
            self.progress()?;
        }
        // Drain trailing events (final releases, in-flight forwards cannot
        // exist once every compute is done).
        while let Some(ev) = self.heap.pop() {
            self.now = ev.t;
            self.handle(ev)?;
        }
        self.res.makespan_s = self
            .res
            .timeline
            .iter()
            .filter(|e| e.kind != EventKind::Release)
            .map(|e| e.time_s)
            .chain(self.res.busy.iter().flat_map(|b| b.iter().map(|x| x.1)))
            .fold(0.0, f64::max);
        self.res.dispatch_log = std::mem::take(&mut self.sched.log);
        self.check_ledger()
    }

    fn describe(&self) -> String {
        let live: Vec<String> = self
            .insts
            .iter()
            .filter(|i| !i.released)
            .map(|i| {
                format!(
                    "e{}s{}@c{}:{:?}/{:?}",
                    i.expert, i.slice, i.chiplet, i.st, i.fwd
                )
            })
            .collect();
        format!(
            "{} experts unfinished; occupied {:?}; committed {:?}; live [{}]",
            self.remaining,
            self.occupied,
            self.committed,
            live.join(" ")
        )
    }

    fn check_ledger(&self) -> Result<(), SimError> {
        for (e, x) in self.exps.iter().enumerate() {
            for s in 0..x.slices.len() {
                for c in 0..self.work.num_chiplets {
                    let want = u8::from(x.mask >> c & 1 == 1);
                    if self.ledger[e][s][c] != want {
                        return Err(SimError::InvalidSchedule(format!(
                            "expert {e} slice {s} computed {} times on chiplet {c}",
                            self.ledger[e][s][c]
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn handle(&mut self, ev: Ev) -> Result<(), SimError> {
        match ev.kind {
            EvKind::DdrDone => {
                let i = ev.inst;
                self.insts[i].st = St::Ready;
                self.insts[i].arrived = self.now;
                self.ddr_busy[self.insts[i].chiplet] = false;
                if self.insts[i].staged && !self.insts[i].preload {
                    self.send_staged(i);
                }
            }
            EvKind::XferStart => {
                let r = ev.inst;
                let (c, bytes, e, s) = {
                    let x = &self.insts[r];
                    (x.chiplet, x.bytes, x.expert, x.slice)
                };
                let src = self.insts[ev.other].chiplet;
                self.occupy(c, bytes)?;
                self.log(self.now, src, EventKind::D2dSend, e, Some(s), bytes);
            }
            EvKind::XferDone => {
                let r = ev.inst;
                self.insts[r].st = St::Ready;
                self.insts[r].arrived = self.now;
                let x = &self.insts[r];
                let (c, e, s, b) = (x.chiplet, x.expert, x.slice, x.bytes);
                self.log(self.now, c, EventKind::D2dRecv, e, Some(s), b);
                let snd = ev.other;
                self.insts[snd].fwd = Fwd::Done;
                if self.insts[snd].st == St::Computed {
                    self.release(snd);
                }
            }
            EvKind::ComputeDone => {
                let i = ev.inst;
                let c = self.insts[i].chiplet;
                self.compute_busy[c] = false;
                self.insts[i].st = St::Computed;
                let e = self.insts[i].expert;
                match self.insts[i].fwd {
                    Fwd::Last | Fwd::Done => self.release(i),
                    Fwd::NotYet => self.forward(i),
                    Fwd::InFlight => {}
                }
                let x = &mut self.exps[e];
                x.computes_left -= 1;
                if x.computes_left == 0 {
                    x.done = true;
                    self.remaining -= 1;
                    self.sched.on_complete(e);
                }
            }
        }
        Ok(())
    }

    fn occupy(&mut self, c: usize, bytes: u64) -> Result<(), SimError> {
        self.occupied[c] += bytes;
        if self.occupied[c] > self.cap {
            return Err(SimError::BufferOverflow {
                chiplet: c,
                occupied: self.occupied[c],
                capacity: self.cap,
            });
        }
        self.res.peak_bytes[c] = self.res.peak_bytes[c].max(self.occupied[c]);
        Ok(())
    }

    fn release(&mut self, i: usize) {
        let (c, b, e, s) = {
            let x = &mut self.insts[i];
            debug_assert!(!x.released);
            x.released = true;
            (x.chiplet, x.bytes, x.expert, x.slice)
        };
        self.occupied[c] -= b;
        self.committed[c] -= b;
        self.resident[c].retain(|&j| j != i);
        self.log(self.now, c, EventKind::Release, e, Some(s), b);
    }

    fn forward(&mut self, i: usize) {
        let (e, s, b, c, origin_pos, hop) = {
            let x = &self.insts[i];
            (x.expert, x.slice, x.bytes, x.chiplet, x.origin_pos, x.hop)
        };
        let k = self.exps[e].path.len();
        let next_hop = hop + 1;
        let dst = self.exps[e].path[(origin_pos + next_hop) % k];
        let (start, end) = self.fab.transfer(self.now, c, dst, b);
        self.res.d2d_bytes += b;
        self.insts[i].fwd = Fwd::InFlight;
        let r = self.insts.len();
        self.insts.push(Inst {
            expert: e,
            slice: s,
            bytes: b,
            chiplet: dst,
            origin_pos,
            hop: next_hop,
            origin: Origin::D2d,
            st: St::Incoming,
            arrived: f64::INFINITY,
            fwd: if next_hop + 1 == k {
                Fwd::Last
            } else {
                Fwd::NotYet
            },
            released: false,
            preload: false,
            staged: false,
        });
        self.resident[dst].push(r);
        self.push(start, dst, EvKind::XferStart, r, i);
        self.push(end, dst, EvKind::XferDone, r, i);
    }

    fn progress(&mut self) -> Result<(), SimError> {
        loop {
            let mut changed = self.poll_scheduler();
            for c in 0..self.work.num_chiplets {
                changed |= self.try_compute(c);
            }
            changed |= self.issue_loads()?;
            if !changed {
                return Ok(());
            }
        }
    }

    fn poll_scheduler(&mut self) -> bool {
        let acts = self.sched.poll(self.now);
        let changed = !acts.is_empty();
        for a in acts {
            match a {
                SchedAction::Dispatch {
                    experts, c_star, ..
                } => {
                    let idle_before = self.sched.log.last().map(|r| r.idle_before).unwrap_or(0);
                    for e in experts {
                        self.dispatch(e, c_star, idle_before);
                    }
                }
                SchedAction::Preload { experts, .. } => {
                    for e in experts {
                        self.request_preload(e);
                    }
                }
            }
        }
        changed
    }

    fn start_expert(&mut self, e: usize, start: usize) {
        let mesh = self.fab.mesh;
        let dir = self.group_dir[e];
        let t = ExpertTrajectory::from_mask(e, self.exps[e].mask, &mesh, start, dir);
        let rule5 = self.mode.rule5;
        let x = &mut self.exps[e];
        x.started = true;
        x.path = t.path;
        for (p, &c) in x.path.iter().enumerate() {
            x.pos[c] = p;
        }
        let (m, k) = (x.slices.len(), x.path.len());
        if rule5 {
            x.pool = (0..m).collect();
        } else {
            for j in 0..m {
                let c = x.path[j * k / m];
                x.queue[c].push_back(j);
            }
        }
    }

    fn dispatch(&mut self, e: usize, c_star: usize, idle_before: u64) {
        if !self.exps[e].started {
            let mask = self.exps[e].mask;
            let start = if mask >> c_star & 1 == 1 {
                c_star
            } else if mask & idle_before != 0 {
                (mask & idle_before).trailing_zeros() as usize
            } else {
                mask.trailing_zeros() as usize
            };
            self.start_expert(e, start);
        }
        let seq = self.dispatch_count;
        self.dispatch_count += 1;
        let x = &mut self.exps[e];
        x.dispatched = true;
        x.dispatch_seq = seq;
        x.preloading = false;
        for i in 0..self.insts.len() {
            let inst = &mut self.insts[i];
            if inst.expert == e && inst.preload {
                inst.preload = false;
                if inst.staged {
                    if inst.st == St::Ready {
                        self.send_staged(i);
                    }
                } else {
                    self.parked[inst.chiplet] -= 1;
                    self.ddr_pending[inst.chiplet] += 1;
                }
            }
        }
    }

    fn send_staged(&mut self, i: usize) {
        let (e, s, b, c, origin_pos) = {
            let x = &self.insts[i];
            (x.expert, x.slice, x.bytes, x.chiplet, x.origin_pos)
        };
        let k = self.exps[e].path.len();
        let dst = self.exps[e].path[origin_pos];
        self.parked[c] -= 1;
        let (start, end) = self.fab.transfer(self.now, c, dst, b);
        self.res.d2d_bytes += b;
        self.insts[i].st = St::Computed;
        self.insts[i].fwd = Fwd::InFlight;
        let r = self.insts.len();
        self.insts.push(Inst {
            expert: e,
            slice: s,
            bytes: b,
            chiplet: dst,
            origin_pos,
            hop: 0,
            origin: Origin::D2d,
            st: St::Incoming,
            arrived: f64::INFINITY,
            fwd: if k == 1 { Fwd::Last } else { Fwd::NotYet },
            released: false,
            preload: false,
            staged: false,
        });
        self.resident[dst].push(r);
        self.push(start, dst, EvKind::XferStart, r, i);
        self.push(end, dst, EvKind::XferDone, r, i);
    }

    fn request_preload(&mut self, e: usize) {
        if self.exps[e].started {
            return;
        }
        let members: Vec<(usize, u64)> = mask_members(self.exps[e].mask)
            .map(|c| (c, self.cap - self.occupied[c]))
            .collect();
        let target = rule5_target(&members).expect("activated expert has a trajectory");
        self.start_expert(e, target);
        self.exps[e].preloading = true;
        self.preload_order.push(e);
    }

    fn try_compute(&mut self, c: usize) -> bool {
        if self.compute_busy[c] {
            return false;
        }
        let cands: Vec<Candidate> = self.resident[c]
            .iter()
            .filter(|&&i| {
                let x = &self.insts[i];
                x.st == St::Ready && !x.preload && !x.staged && self.exps[x.expert].dispatched
            })
            .map(|&i| {
                let x = &self.insts[i];
                Candidate {
                    id: i,
                    expert: x.expert,
                    slice: x.slice,
                    origin: x.origin,
                    arrived_at: x.arrived,
                    hop: x.hop,
                }
            })
            .collect();
        let Some(pick) = select_compute(&cands, self.mode.eager) else {
            return false;
        };
        let i = cands[pick].id;
        let (e, s) = (self.insts[i].expert, self.insts[i].slice);
        if self.insts[i].origin == Origin::Ddr {
            self.ddr_pending[c] -= 1;
        }
        self.insts[i].st = St::Computing;
        self.compute_busy[c] = true;
        let slice = self.exps[e].slices[s];
        let toks = &self.work.tokens[e][c];
        let dur = self
            .fab
            .timing
            .microslice_compute_s(toks.len() as u64, &slice)
            + self.fab.timing.overhead_s;
        let end = self.now + dur;
        self.res.busy[c].push((self.now, end));
        let per_col = self.per_col;
        let col_start = self.exps[e].slices[..s]
            .iter()
            .map(|x| x.elements / per_col)
            .sum::<u64>();
        self.res.computes.push(ComputeRecord {
            chiplet: c,
            expert: e,
            col_start,
            col_end: col_start + slice.elements / per_col,
            tokens: toks.clone(),
            start_s: self.now,
            end_s: end,
        });
        self.ledger[e][s][c] += 1;
        self.log(
            self.now,
            c,
            EventKind::Compute,
            e,
            Some(s),
            slice.size_bytes,
        );
        self.push(end, c, EvKind::ComputeDone, i, 0);
        if self.mode.eager && self.insts[i].fwd == Fwd::NotYet {
            self.forward(i);
        }
        true
    }

    fn fits(&self, e: usize, bytes: u64, extra: u64) -> bool {
        mask_members(self.exps[e].mask).all(|c| self.committed[c] + bytes + extra <= self.adm)
    }

    fn fits_at(&self, c: usize, bytes: u64, extra: u64) -> bool {
        self.committed[c] + bytes + extra <= self.adm
    }

    fn depth(&self) -> usize {
        if self.mode.eager {
            self.hw.ddr_prefetch_depth
        } else {
            usize::MAX
        }
    }

    fn issue_loads(&mut self) -> Result<bool, SimError> {
        let mut changed = false;
        if self.mode.rule5 {
            changed |= self.issue_rule5_loads()?;
        }
        for c in 0..self.work.num_chiplets {
            if self.ddr_busy[c] || self.ddr_pending[c] >= self.depth() {
                continue;
            }
            // dispatched experts first, interleaving co-running experts
            let mut best: Option<(u32, usize, usize)> = None;
            if !self.mode.rule5 {
                for (e, x) in self.exps.iter().enumerate() {
                    if !x.dispatched || x.queue[c].is_empty() {
                        continue;
                    }
                    let j = x.queue[c][0];
                    if !self.fits(e, x.slices[j].size_bytes, 0) {
                        continue;
                    }
                    let key = (x.loads_issued[c], x.dispatch_seq, e);
                    if best.is_none_or(|b| key < b) {
                        best = Some(key);
                    }
                }
            }
            if let Some((_, _, e)) = best {
                let j = self.exps[e].queue[c].pop_front().expect("non-empty");
                self.start_load(c, e, j, false)?;
                changed = true;
            }
        }
        for c in 0..self.work.num_chiplets {
            if self.ddr_busy[c]
                || self.ddr_pending[c] + self.parked[c] >= self.hw.ddr_prefetch_depth
            {
                continue;
            }
            if self.mode.fusion && !self.mode.rule5 && self.steal(c)? {
                changed = true;
                continue;
            }
            changed |= self.issue_preload(c)?;
        }
        Ok(changed)
    }

    /// An idle DDR engine loads the last queued slice of the busiest home
    /// chiplet of a dispatched expert and hands it to that home.
    fn steal(&mut self, c: usize) -> Result<bool, SimError> {
        let mut best: Option<(usize, std::cmp::Reverse<usize>, usize, usize)> = None;
        for (e, x) in self.exps.iter().enumerate() {
            if !x.dispatched {
                continue;
            }
            for &m in &x.path {
                let len = x.queue[m].len();
                if m == c || len == 0 || (len == 1 && !self.ddr_busy[m]) {
                    continue;
                }
                let j = *x.queue[m].back().expect("non-empty");
                let bytes = x.slices[j].size_bytes;
                let twice = if x.mask >> c & 1 == 1 { bytes } else { 0 };
                if !self.fits(e, bytes, twice) || !self.fits_at(c, bytes, twice) {
                    continue;
                }
                let key = (len, std::cmp::Reverse(x.dispatch_seq), e, m);
                if best.is_none_or(|b| (key.0, key.1) > (b.0, b.1)) {
                    best = Some(key);
                }
            }
        }
        let Some((_, _, e, m)) = best else {
            return Ok(false);
        };
        let j = self.exps[e].queue[m].pop_back().expect("non-empty");
        self.start_load(c, e, j, false)?;
        self.ddr_pending[c] -= 1;
        self.parked[c] += 1;
        if self.exps[e].mask >> c & 1 == 1 {
            self.committed[c] += self.exps[e].slices[j].size_bytes;
        }
        let i = self.insts.len() - 1;
        self.insts[i].staged = true;
        self.insts[i].origin_pos = self.exps[e].pos[m];
        self.insts[i].fwd = Fwd::NotYet;
        Ok(true)
    }

    /// Rule 4 for experts not yet dispatched: fill free buffer space in
    /// schedule order, keeping room for the running flows. Chiplets off the
    /// trajectory stage slices taken from the longest member queue.
    fn issue_preload(&mut self, c: usize) -> Result<bool, SimError> {
        if self.ddr_busy[c] {
            return Ok(false);
        }
        let reserve = (self.hw.ddr_prefetch_depth as u64 + 2) * self.max_slice;
        for k in 0..self.preload_order.len() {
            let e = self.preload_order[k];
            let x = &self.exps[e];
            if !x.preloading {
                continue;
            }
            let member = x.mask >> c & 1 == 1;
            let pick = if self.mode.rule5 {
                x.pool.front().map(|&j| (j, usize::MAX))
            } else if member {
                x.queue[c].front().map(|&j| (j, c))
            } else {
                x.path
                    .iter()
                    .copied()
                    .max_by_key(|&m| (x.queue[m].len(), std::cmp::Reverse(m)))
                    .filter(|&m| x.queue[m].len() > 1)
                    .and_then(|m| x.queue[m].back().map(|&j| (j, m)))
            };
            let Some((j, from)) = pick else { continue };
            let bytes = x.slices[j].size_bytes;
            if !self.fits(e, bytes, reserve) || (!member && !self.fits_at(c, bytes, reserve)) {
                return Ok(false);
            }
            if self.mode.rule5 {
                self.exps[e].pool.pop_front();
            } else if member {
                self.exps[e].queue[c].pop_front();
            } else {
                self.exps[e].queue[from].pop_back();
            }
            self.start_load(c, e, j, true)?;
            if !member {
                let entry = if from == usize::MAX {
                    let members: Vec<(usize, u64)> = mask_members(self.exps[e].mask)
                        .map(|m| (m, self.cap - self.occupied[m]))
                        .collect();
                    rule5_target(&members).expect("non-empty trajectory")
                } else {
                    from
                };
                let i = self.insts.len() - 1;
                self.insts[i].staged = true;
                self.insts[i].origin_pos = self.exps[e].pos[entry];
                self.insts[i].fwd = Fwd::NotYet;
            }
            return Ok(true);
        }
        Ok(false)
    }

    fn issue_rule5_loads(&mut self) -> Result<bool, SimError> {
        let mut changed = false;
        loop {
            let mut order: Vec<usize> = (0..self.exps.len())
                .filter(|&e| self.exps[e].dispatched && !self.exps[e].pool.is_empty())
                .collect();
            order.sort_by_key(|&e| self.exps[e].dispatch_seq);
            let mut issued = false;
            for e in order {
                let j = self.exps[e].pool[0];
                let bytes = self.exps[e].slices[j].size_bytes;
                if !self.fits(e, bytes, 0) {
                    continue;
                }
                let depth = self.depth();
                let eligible: Vec<(usize, u64)> = mask_members(self.exps[e].mask)
                    .filter(|&c| !self.ddr_busy[c] && self.ddr_pending[c] < depth)
                    .map(|c| (c, self.cap - self.occupied[c]))
                    .collect();
                if let Some(c) = rule5_target(&eligible) {
                    self.exps[e].pool.pop_front();
                    self.start_load(c, e, j, false)?;
                    issued = true;
                    changed = true;
                    break;
                }
            }
            if !issued {
                return Ok(changed);
            }
        }
    }

    fn start_load(&mut self, c: usize, e: usize, j: usize, preload: bool) -> Result<(), SimError> {
        let bytes = self.exps[e].slices[j].size_bytes;
        for m in mask_members(self.exps[e].mask | 1 << c).collect::<Vec<_>>() {
            self.committed[m] += bytes;
        }
        self.occupy(c, bytes)?;
        let (_, end) = self.fab.ddr_load(self.now, c, bytes);
        let ch = self.fab.channel_of(c);
        self.res.ddr_bytes += bytes;
        self.res.ddr_bytes_per_channel[ch] += bytes;
        self.ddr_busy[c] = true;
        if preload {
            self.parked[c] += 1;
        } else {
            self.ddr_pending[c] += 1;
        }
        self.exps[e].loads_issued[c] += 1;
        let k = self.exps[e].path.len();
        let i = self.insts.len();
        self.insts.push(Inst {
            expert: e,
            slice: j,
            bytes,
            chiplet: c,
            origin_pos: self.exps[e].pos[c].min(k.saturating_sub(1)),
            hop: 0,
            origin: Origin::Ddr,
            st: St::Loading,
            arrived: f64::INFINITY,
            fwd: if k == 1 { Fwd::Last } else { Fwd::NotYet },
            released: false,
            preload,
            staged: false,
        });
        self.resident[c].push(i);
        self.log(self.now, c, EventKind::DdrLoad, e, Some(j), bytes);
        self.push(end, c, EvKind::DdrDone, i, 0);
        Ok(())
    }
}

/// Coarse-grained FSE-DP: one expert at a time, tokens rebalanced over D2D,
/// `C` expert slices circulating in lockstep phases.
pub fn run_naive_fsedp_layer(
    work: &LayerWork,
    hw: &HardwareConfig,
    model: &ModelConfig,
) -> Result<LayerResult, SimError> {
    let c = hw.num_chiplets();
    let mut fab = Fabric::new(hw);
    let mut res = LayerResult::empty(c, hw.ddr_channels);
    let snake = fab.mesh.snake_order();
    let elem = hw.weight_bytes_per_element;
    let act_bytes = model.d_model * elem;
    let parts = (1..=c)
        .rev()
        .find(|&p| crate::timing::partition_columns(model.d_expert, p).is_some())
        .unwrap_or(1);
    let cols = crate::timing::partition_columns(model.d_expert, parts)
        .expect("at least one column per part");
    let mut t = 0.0f64;
    let mut occupied = vec![0u64; c];
    // Coarse slices are not bounded by the buffer; the peak is reported.
    let bump = |occ: &mut Vec<u64>,
                res: &mut LayerResult,
                ch: usize,
                delta: i64|
     -> Result<(), SimError> {
        occ[ch] = (occ[ch] as i64 + delta) as u64;
        res.peak_bytes[ch] = res.peak_bytes[ch].max(occ[ch]);
        Ok(())
    };
    for e in work.activated() {
        let slices: Vec<MicroSliceId> = slices_with(model, elem, e, parts);
        // token redispatch to balance per-chiplet counts
        let mut local: Vec<Vec<usize>> = work.tokens[e].clone();
        let n: usize = local.iter().map(|v| v.len()).sum();
        let target: Vec<usize> = (0..c).map(|i| n / c + usize::from(i < n % c)).collect();
        let mut moves: Vec<(usize, usize, usize)> = Vec::new();
        let mut surplus: Vec<(usize, usize)> = Vec::new();
        for i in 0..c {
            while local[i].len() > target[i] {
                surplus.push((i, local[i].pop().expect("non-empty")));
            }
        }
        for i in 0..c {
            while local[i].len() < target[i] {
                let (src, tok) = surplus.remove(0);
                local[i].push(tok);
                moves.push((src, i, tok));
            }
        }
        let mut ready = vec![t; c];
        let mut pairs: Vec<(usize, usize)> = moves.iter().map(|m| (m.0, m.1)).collect();
        pairs.sort_unstable();
        pairs.dedup();
        for (src, dst) in pairs {
            let k = moves.iter().filter(|m| m.0 == src && m.1 == dst).count() as u64;
            let (start, end) = fab.transfer(t, src, dst, k * act_bytes);
            res.d2d_bytes += k * act_bytes;
            res.timeline.push(TimelineEvent {
                time_s: start,
                chiplet: src,
                kind: EventKind::D2dSend,
                expert: Some(e),
                slice: None,
                bytes: k * act_bytes,
            });
            res.timeline.push(TimelineEvent {
                time_s: end,
                chiplet: dst,
                kind: EventKind::D2dRecv,
                expert: Some(e),
                slice: None,
                bytes: k * act_bytes,
            });
            ready[dst] = ready[dst].max(end);
        }
        // each snake position p loads slice p
        let mut holding: Vec<usize> = (0..parts).collect();
        holding.resize(c, usize::MAX);
        for p in 0..c {
            let ch = snake[p];
            let s = holding[p];
            if s == usize::MAX {
                continue;
            }
            let b = slices[s].size_bytes;
            bump(&mut occupied, &mut res, ch, b as i64)?;
            let (_, end) = fab.ddr_load(t, ch, b);
            let chan = fab.channel_of(ch);
            res.ddr_bytes += b;
            res.ddr_bytes_per_channel[chan] += b;
            res.timeline.push(TimelineEvent {
                time_s: t,
                chiplet: ch,
                kind: EventKind::DdrLoad,
                expert: Some(e),
                slice: Some(s),
                bytes: b,
            });
            ready[ch] = ready[ch].max(end);
        }
        let mut phase_start = ready.iter().copied().fold(t, f64::max);
        for phase in 0..c {
            let last = phase + 1 == c;
            let mut phase_end = phase_start;
            let mut next_holding = vec![usize::MAX; c];
            for p in 0..c {
                let ch = snake[p];
                let s = holding[p];
                if s == usize::MAX {
                    continue;
                }
                let sl = &slices[s];
                let toks = &local[ch];
                let mut end = phase_start;
                if !toks.is_empty() {
                    end = phase_start
                        + fab.timing.microslice_compute_s(toks.len() as u64, sl)
                        + fab.timing.overhead_s;
                    res.busy[ch].push((phase_start, end));
                    let col_start: u64 = cols[..s].iter().sum();
                    res.computes.push(ComputeRecord {
                        chiplet: ch,
                        expert: e,
                        col_start,
                        col_end: col_start + cols[s],
                        tokens: toks.clone(),
                        start_s: phase_start,
                        end_s: end,
                    });
                    res.timeline.push(TimelineEvent {
                        time_s: phase_start,
                        chiplet: ch,
                        kind: EventKind::Compute,
                        expert: Some(e),
                        slice: Some(s),
                        bytes: sl.size_bytes,
                    });
                }
                if !last && c > 1 {
                    let dst = snake[(p + 1) % c];
                    bump(&mut occupied, &mut res, dst, sl.size_bytes as i64)?;
                    let (start, tend) = fab.transfer(phase_start, ch, dst, sl.size_bytes);
                    res.d2d_bytes += sl.size_bytes;
                    res.timeline.push(TimelineEvent {
                        time_s: start,
                        chiplet: ch,
                        kind: EventKind::D2dSend,
                        expert: Some(e),
                        slice: Some(s),
                        bytes: sl.size_bytes,
                    });
                    res.timeline.push(TimelineEvent {
                        time_s: tend,
                        chiplet: dst,
                        kind: EventKind::D2dRecv,
                        expert: Some(e),
                        slice: Some(s),
                        bytes: sl.size_bytes,
                    });
                    end = end.max(tend);
                    next_holding[(p + 1) % c] = s;
                }
                phase_end = phase_end.max(end);
            }
            // barrier: every chiplet drops its current slice
            for p in 0..c {
                let s = holding[p];
                if s == usize::MAX {
                    continue;
                }
                let ch = snake[p];
                bump(&mut occupied, &mut res, ch, -(slices[s].size_bytes as i64))?;
                res.timeline.push(TimelineEvent {
                    time_s: phase_end,
                    chiplet: ch,
                    kind: EventKind::Release,
                    expert: Some(e),
                    slice: Some(s),
                    bytes: slices[s].size_bytes,
                });
            }
            if !last {
                holding = next_holding;
            }
            phase_start = phase_end;
        }
        t = phase_start;
    }
    res.makespan_s = t;
    Ok(res)
}

/// Writes a timeline CSV for `res` to `path`.
pub fn write_timeline_csv(
    res: &LayerResult,
    path: impl AsRef<std::path::Path>,
) -> std::io::Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    res.write_timeline(&mut w)?;
    w.flush()
}
