//! Deterministic discrete-event engine for NAND operations.
//!
//! Every NAND operation is decomposed into phases. Each phase holds a set of
//! resources for a fixed duration:
//!
//! | phase           | resources held                      |
//! |-----------------|-------------------------------------|
//! | `read_phase`    | chip unit, `t_read`                 |
//! | `dma_out`       | channel bus + one DRAM port         |
//! | `dma_in`        | channel bus + one DRAM port         |
//! | `program_phase` | chip unit, `t_prog`                 |
//! | `erase`         | chip unit, `t_erase`                |
//!
//! A copyback keeps its chip unit from the start of the read until the end of
//! the program and never touches a bus or DRAM port. DMA phases acquire the
//! channel first and then a DRAM port, so no cycle of waiters can form.
//!
//! Every resource serves waiters FIFO. Events fire in `(time, seq)` order,
//! which makes the engine bit-for-bit reproducible.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};
use std::fmt::{self, Write as _};
use std::io::Write;

use serde::Serialize;

use crate::error::AddressError;
use crate::geometry::{copyback_compatible, Geometry, Micros, PhysAddr, TimingParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceKind {
    ChannelBus,
    ChipUnit,
    DramPort,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ResourceId {
    pub kind: ResourceKind,
    pub index: u32,
}

impl fmt::Display for ResourceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ResourceKind::ChannelBus => write!(f, "ch{}", self.index),
            ResourceKind::ChipUnit => write!(f, "chip{}", self.index),
            ResourceKind::DramPort => write!(f, "dram{}", self.index),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    OffchipCopy,
    Copyback,
    HostRead,
    HostWrite,
    Erase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    ReadPhase,
    DmaOut,
    DmaIn,
    ProgramPhase,
    Erase,
}

impl PhaseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PhaseKind::ReadPhase => "read_phase",
            PhaseKind::DmaOut => "dma_out",
            PhaseKind::DmaIn => "dma_in",
            PhaseKind::ProgramPhase => "program_phase",
            PhaseKind::Erase => "erase",
        }
    }

    pub fn is_dma(self) -> bool {
        matches!(self, PhaseKind::DmaOut | PhaseKind::DmaIn)
    }
}

/// Non-NAND events the driver schedules for itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TimerKind {
    HostArrival,
    IdleCheck,
}

/// A NAND operation to submit. Unused addresses mirror the used one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NandOpRequest {
    pub op: OpKind,
    pub src: PhysAddr,
    pub dst: PhysAddr,
}

impl NandOpRequest {
    pub fn offchip_copy(src: PhysAddr, dst: PhysAddr) -> Self {
        Self { op: OpKind::OffchipCopy, src, dst }
    }

    pub fn copyback(src: PhysAddr, dst: PhysAddr) -> Self {
        Self { op: OpKind::Copyback, src, dst }
    }

    pub fn host_read(addr: PhysAddr) -> Self {
        Self { op: OpKind::HostRead, src: addr, dst: addr }
    }

    pub fn host_write(addr: PhysAddr) -> Self {
        Self { op: OpKind::HostWrite, src: addr, dst: addr }
    }

    pub fn erase(addr: PhysAddr) -> Self {
        Self { op: OpKind::Erase, src: addr, dst: addr }
    }

    fn phase(&self, idx: usize) -> Option<(PhaseKind, PhysAddr)> {
        use PhaseKind::*;
        let (kind, on_dst) = match (self.op, idx) {
            (OpKind::OffchipCopy, 0) => (ReadPhase, false),
            (OpKind::OffchipCopy, 1) => (DmaOut, false),
            (OpKind::OffchipCopy, 2) => (DmaIn, true),
            (OpKind::OffchipCopy, 3) => (ProgramPhase, true),
            (OpKind::Copyback, 0) => (ReadPhase, false),
            (OpKind::Copyback, 1) => (ProgramPhase, true),
            (OpKind::HostRead, 0) => (ReadPhase, false),
            (OpKind::HostRead, 1) => (DmaOut, false),
            (OpKind::HostWrite, 0) => (DmaIn, true),
            (OpKind::HostWrite, 1) => (ProgramPhase, true),
            (OpKind::Erase, 0) => (Erase, true),
            _ => return None,
        };
        Some((kind, if on_dst { self.dst } else { self.src }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TicketId(pub u32);

/// A finished NAND operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NandOpTicket {
    pub id: TicketId,
    pub op: OpKind,
    pub src: PhysAddr,
    pub dst: PhysAddr,
    pub issue_time: Micros,
    pub completion_time: Micros,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Notification {
    Completed(NandOpTicket),
    Timer { kind: TimerKind, token: u64, at: Micros },
}

/// One executed phase, as recorded in the event log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhaseRecord {
    pub ticket: TicketId,
    pub op: OpKind,
    pub kind: PhaseKind,
    pub addr: PhysAddr,
    pub start: Micros,
    pub end: Micros,
    pub resources: Vec<ResourceId>,
}

impl PhaseRecord {
    /// `time,kind,channel,chip,plane,block,page,resource_held`
    pub fn csv_line(&self) -> String {
        let held = self.resources.iter().map(ToString::to_string).collect::<Vec<_>>().join("+");
        format!(
            "{},{},{},{},{},{},{},{}",
            self.start,
            self.kind.as_str(),
            self.addr.channel,
            self.addr.chip,
            self.addr.plane,
            self.addr.block,
            self.addr.page,
            held
        )
    }
}

pub const EVENT_LOG_HEADER: &str = "time,kind,channel,chip,plane,block,page,resource_held";

pub fn write_event_log<W: Write>(mut w: W, log: &[PhaseRecord]) -> std::io::Result<()> {
    writeln!(w, "{EVENT_LOG_HEADER}")?;
    for rec in log {
        writeln!(w, "{}", rec.csv_line())?;
    }
    Ok(())
}

/// Busy-time accounting, indexed by resource index.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct EngineStats {
    pub channel_busy: Vec<Micros>,
    pub chip_busy: Vec<Micros>,
    pub dram_busy: Vec<Micros>,
    pub completed_offchip_copies: u64,
    pub completed_copybacks: u64,
    pub completed_host_reads: u64,
    pub completed_host_writes: u64,
    pub completed_erases: u64,
}

impl EngineStats {
    pub fn completed(&self, op: OpKind) -> u64 {
        match op {
            OpKind::OffchipCopy => self.completed_offchip_copies,
            OpKind::Copyback => self.completed_copybacks,
            OpKind::HostRead => self.completed_host_reads,
            OpKind::HostWrite => self.completed_host_writes,
            OpKind::Erase => self.completed_erases,
        }
    }

    fn bump(&mut self, op: OpKind) {
        match op {
            OpKind::OffchipCopy => self.completed_offchip_copies += 1,
            OpKind::Copyback => self.completed_copybacks += 1,
            OpKind::HostRead => self.completed_host_reads += 1,
            OpKind::HostWrite => self.completed_host_writes += 1,
            OpKind::Erase => self.completed_erases += 1,
        }
    }
}

/// A pool of identical units with one FIFO wait queue. Channels and chips
/// are single-unit pools; the DRAM ports form one multi-unit pool.
#[derive(Debug)]
struct Pool {
    kind: ResourceKind,
    holders: Vec<Option<TicketId>>,
    since: Vec<Micros>,
    busy: Vec<Micros>,
    queue: VecDeque<TicketId>,
}

impl Pool {
    fn new(kind: ResourceKind, units: usize) -> Self {
        Self {
            kind,
            holders: vec![None; units],
            since: vec![0; units],
            busy: vec![0; units],
            queue: VecDeque::new(),
        }
    }

    fn free_unit(&self) -> Option<usize> {
        self.holders.iter().position(Option::is_none)
    }

    fn grant(&mut self, unit: usize, who: TicketId, now: Micros) {
        debug_assert!(self.holders[unit].is_none());
        self.holders[unit] = Some(who);
        self.since[unit] = now;
    }

    fn release(&mut self, unit: usize, who: TicketId, now: Micros) {
        debug_assert_eq!(self.holders[unit], Some(who));
        self.holders[unit] = None;
        self.busy[unit] += now - self.since[unit];
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Channel(u32),
    Chip(u32),
    Dram,
}

#[derive(Debug)]
struct OpState {
    req: NandOpRequest,
    issue: Micros,
    phase: usize,
    /// Resources still to acquire for the current phase, in order.
    need: Vec<Slot>,
    held: Vec<ResourceId>,
    /// Chip kept across phases (copyback).
    kept_chip: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    PhaseEnd(u32),
    Timer(u8, u64),
}

fn timer_code(kind: TimerKind) -> u8 {
    match kind {
        TimerKind::HostArrival => 0,
        TimerKind::IdleCheck => 1,
    }
}

fn timer_kind(code: u8) -> TimerKind {
    match code {
        0 => TimerKind::HostArrival,
        _ => TimerKind::IdleCheck,
    }
}

pub struct Engine {
    geometry: Geometry,
    timing: TimingParams,
    now: Micros,
    seq: u64,
    heap: BinaryHeap<Reverse<(Micros, u64, EventKind)>>,
    channels: Vec<Pool>,
    chips: Vec<Pool>,
    dram: Pool,
    ops: Vec<Option<OpState>>,
    free_ops: Vec<u32>,
    in_flight: usize,
    pending: VecDeque<Notification>,
    drained: Vec<Notification>,
    log: Option<Vec<PhaseRecord>>,
    stats: EngineStats,
}

impl Engine {
    pub fn new(geometry: Geometry, timing: TimingParams, dram_ports: u32) -> Self {
        let channels = (0..geometry.channels).map(|_| Pool::new(ResourceKind::ChannelBus, 1)).collect();
        let chips = (0..geometry.chips()).map(|_| Pool::new(ResourceKind::ChipUnit, 1)).collect();
        Self {
            geometry,
            timing,
            now: 0,
            seq: 0,
            heap: BinaryHeap::new(),
            channels,
            chips,
            dram: Pool::new(ResourceKind::DramPort, dram_ports.max(1) as usize),
            ops: Vec::new(),
            free_ops: Vec::new(),
            in_flight: 0,
            pending: VecDeque::new(),
            drained: Vec::new(),
            log: None,
            stats: EngineStats::default(),
        }
    }

    /// Records every executed phase from now on.
    pub fn enable_log(&mut self) {
        self.log.get_or_insert_with(Vec::new);
    }

    pub fn log(&self) -> &[PhaseRecord] {
        self.log.as_deref().unwrap_or(&[])
    }

    pub fn take_log(&mut self) -> Vec<PhaseRecord> {
        self.log.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn now(&self) -> Micros {
        self.now
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn timing(&self) -> &TimingParams {
        &self.timing
    }

    /// NAND operations submitted and not yet completed.
    pub fn in_flight(&self) -> usize {
        self.in_flight
    }

    pub fn has_events(&self) -> bool {
        !self.heap.is_empty() || !self.pending.is_empty()
    }

    pub fn submit(&mut self, req: NandOpRequest) -> Result<TicketId, AddressError> {
        self.geometry.check(req.src)?;
        self.geometry.check(req.dst)?;
        if req.op == OpKind::Copyback && !copyback_compatible(&self.geometry, req.src, req.dst)? {
            return Err(AddressError::NotCopybackCompatible {
                src: format!("{:?}", req.src),
                dst: format!("{:?}", req.dst),
            });
        }
        let state = OpState { req, issue: self.now, phase: 0, need: Vec::new(), held: Vec::new(), kept_chip: None };
        let id = match self.free_ops.pop() {
            Some(i) => {
                self.ops[i as usize] = Some(state);
                i
            }
            None => {
                self.ops.push(Some(state));
                (self.ops.len() - 1) as u32
            }
        };
        self.in_flight += 1;
        self.begin_phase(id);
        Ok(TicketId(id))
    }

    pub fn schedule_timer(&mut self, at: Micros, kind: TimerKind, token: u64) {
        let at = at.max(self.now);
        self.push(at, EventKind::Timer(timer_code(kind), token));
    }

    /// Dispatches events with `at <= t_end` until one produces a notification.
    /// Returns `None` once no such event remains.
    pub fn poll(&mut self, t_end: Micros) -> Option<Notification> {
        loop {
            if let Some(n) = self.pending.pop_front() {
                // Ticket ids are recycled only once the caller has seen the completion.
                if let Notification::Completed(t) = &n {
                    self.free_ops.push(t.id.0);
                }
                return Some(n);
            }
            let &Reverse((at, _, _)) = self.heap.peek()?;
            if at > t_end {
                return None;
            }
            let Reverse((at, _, ev)) = self.heap.pop().expect("peeked");
            debug_assert!(at >= self.now);
            self.now = at;
            match ev {
                EventKind::PhaseEnd(id) => self.end_phase(id),
                EventKind::Timer(code, token) => {
                    self.pending.push_back(Notification::Timer { kind: timer_kind(code), token, at })
                }
            }
        }
    }

    /// Dispatches every event with `at <= t_end` and advances the clock to
    /// `t_end`. Notifications are kept for [`Engine::take_notifications`].
    pub fn run_until(&mut self, t_end: Micros) -> EngineStats {
        while let Some(n) = self.poll(t_end) {
            self.drained.push(n);
        }
        self.now = self.now.max(t_end);
        self.stats()
    }

    /// Moves the clock forward without dispatching anything. Events due
    /// before `t` must already have been polled.
    pub fn advance_to(&mut self, t: Micros) {
        debug_assert!(self.heap.peek().is_none_or(|Reverse((at, _, _))| *at >= t));
        self.now = self.now.max(t);
    }

    pub fn take_notifications(&mut self) -> Vec<Notification> {
        std::mem::take(&mut self.drained)
    }

    pub fn stats(&self) -> EngineStats {
        let busy = |pools: &[Pool]| pools.iter().map(|p| p.busy.iter().sum()).collect();
        EngineStats {
            channel_busy: busy(&self.channels),
            chip_busy: busy(&self.chips),
            dram_busy: self.dram.busy.clone(),
            ..self.stats.clone()
        }
    }

    fn push(&mut self, at: Micros, ev: EventKind) {
        let seq = self.seq;
        self.seq += 1;
        self.heap.push(Reverse((at, seq, ev)));
    }

    fn op(&mut self, id: u32) -> &mut OpState {
        self.ops[id as usize].as_mut().expect("live op")
    }

    fn begin_phase(&mut self, id: u32) {
        let geometry = self.geometry;
        let op = self.op(id);
        let (kind, addr) = op.req.phase(op.phase).expect("phase exists");
        let chip = geometry.chip_index(addr);
        op.need.clear();
        if kind.is_dma() {
            op.need.push(Slot::Channel(addr.channel));
            op.need.push(Slot::Dram);
        } else if op.kept_chip != Some(chip) {
            op.need.push(Slot::Chip(chip));
        }
        op.need.reverse();
        self.acquire(id);
    }

    /// Acquires the remaining resources of the op's current phase, parking the
    /// op on the first busy pool.
    fn acquire(&mut self, id: u32) {
        let now = self.now;
        loop {
            let Some(&slot) = self.op(id).need.last() else {
                self.start_phase(id);
                return;
            };
            let pool = match slot {
                Slot::Channel(c) => &mut self.channels[c as usize],
                Slot::Chip(c) => &mut self.chips[c as usize],
                Slot::Dram => &mut self.dram,
            };
            match pool.free_unit() {
                Some(unit) if pool.queue.is_empty() => {
                    pool.grant(unit, TicketId(id), now);
                    let rid = ResourceId { kind: pool.kind, index: resource_index(slot, unit) };
                    let op = self.op(id);
                    op.need.pop();
                    op.held.push(rid);
                }
                _ => {
                    pool.queue.push_back(TicketId(id));
                    return;
                }
            }
        }
    }

    fn start_phase(&mut self, id: u32) {
        let now = self.now;
        let timing = self.timing;
        let op = self.op(id);
        let (kind, addr) = op.req.phase(op.phase).expect("phase exists");
        let dur = match kind {
            PhaseKind::ReadPhase => timing.t_read,
            PhaseKind::DmaOut => timing.t_dma_out,
            PhaseKind::DmaIn => timing.t_dma_in,
            PhaseKind::ProgramPhase => timing.t_prog,
            PhaseKind::Erase => timing.t_erase,
        };
        let opk = op.req.op;
        let resources = op.held.clone();
        if let Some(log) = self.log.as_mut() {
            log.push(PhaseRecord {
                ticket: TicketId(id),
                op: opk,
                kind,
                addr,
                start: now,
                end: now + dur,
                resources,
            });
        }
        self.push(now + dur, EventKind::PhaseEnd(id));
    }

    fn end_phase(&mut self, id: u32) {
        let now = self.now;
        let op = self.op(id);
        let keep_chip = op.req.op == OpKind::Copyback && op.phase == 0;
        let held = std::mem::take(&mut op.held);
        let mut kept = Vec::new();
        // DRAM before channel, so a waiter granted the channel finds the port free.
        for rid in held.iter().rev() {
            if keep_chip && rid.kind == ResourceKind::ChipUnit {
                kept.push(*rid);
                continue;
            }
            self.release(*rid, TicketId(id), now);
        }
        let op = self.op(id);
        op.held = kept;
        if keep_chip {
            op.kept_chip = Some(op.held[0].index);
        }
        op.phase += 1;
        if op.req.phase(op.phase).is_some() {
            self.begin_phase(id);
            return;
        }
        let op = self.ops[id as usize].take().expect("live op");
        debug_assert!(op.held.is_empty());
        self.in_flight -= 1;
        self.stats.bump(op.req.op);
        self.pending.push_back(Notification::Completed(NandOpTicket {
            id: TicketId(id),
            op: op.req.op,
            src: op.req.src,
            dst: op.req.dst,
            issue_time: op.issue,
            completion_time: now,
        }));
    }

    fn release(&mut self, rid: ResourceId, who: TicketId, now: Micros) {
        let (pool, unit) = match rid.kind {
            ResourceKind::ChannelBus => (&mut self.channels[rid.index as usize], 0),
            ResourceKind::ChipUnit => (&mut self.chips[rid.index as usize], 0),
            ResourceKind::DramPort => (&mut self.dram, rid.index as usize),
        };
        pool.release(unit, who, now);
        if let Some(next) = pool.queue.pop_front() {
            pool.grant(unit, next, now);
            let index = match rid.kind {
                ResourceKind::DramPort => unit as u32,
                _ => rid.index,
            };
            let op = self.op(next.0);
            op.need.pop();
            op.held.push(ResourceId { kind: rid.kind, index });
            self.acquire(next.0);
        }
    }
}

fn resource_index(slot: Slot, unit: usize) -> u32 {
    match slot {
        Slot::Channel(c) => c,
        Slot::Chip(c) => c,
        Slot::Dram => unit as u32,
    }
}

/// Checks that no two logged phases overlap on a shared resource. Returns a
/// description of the first overlap found.
pub fn audit_exclusivity(log: &[PhaseRecord]) -> Result<(), String> {
    let mut by_resource: std::collections::BTreeMap<ResourceId, Vec<(Micros, Micros, TicketId)>> =
        std::collections::BTreeMap::new();
    for rec in log {
        for r in &rec.resources {
            by_resource.entry(*r).or_default().push((rec.start, rec.end, rec.ticket));
        }
    }
    for (res, mut spans) in by_resource {
        spans.sort_unstable();
        for pair in spans.windows(2) {
            // A copyback's read and program share a ticket and abut.
            if pair[1].0 < pair[0].1 {
                let mut msg = String::new();
                let _ = write!(msg, "{res}: {:?} overlaps {:?}", pair[0], pair[1]);
                return Err(msg);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn engine(dram_ports: u32) -> Engine {
        let mut e = Engine::new(Geometry::default(), TimingParams::default(), dram_ports);
        e.enable_log();
        e
    }

    fn completions(e: &mut Engine) -> Vec<NandOpTicket> {
        e.take_notifications()
            .into_iter()
            .filter_map(|n| match n {
                Notification::Completed(t) => Some(t),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn single_offchip_copy_takes_780() {
        let mut e = engine(1);
        let a = PhysAddr::new(0, 0, 0, 1, 0);
        e.submit(NandOpRequest::offchip_copy(a, PhysAddr { block: 2, ..a })).unwrap();
        e.run_until(u64::MAX);
        let done = completions(&mut e);
        assert_eq!(done.len(), 1);
        assert_eq!(done[0].completion_time, 780);
    }

    #[test]
    fn single_copyback_takes_700() {
        let mut e = engine(1);
        let a = PhysAddr::new(3, 5, 0, 1, 0);
        e.submit(NandOpRequest::copyback(a, PhysAddr { block: 9, ..a })).unwrap();
        let stats = e.run_until(u64::MAX);
        assert_eq!(completions(&mut e)[0].completion_time, 700);
        assert_eq!(stats.channel_busy.iter().sum::<u64>(), 0);
        assert_eq!(stats.dram_busy.iter().sum::<u64>(), 0);
        assert_eq!(stats.chip_busy[e.geometry().chip_index(a) as usize], 700);
    }

    #[test]
    fn two_same_channel_copies_serialize() {
        let mut e = engine(1);
        let a = PhysAddr::new(0, 0, 0, 1, 0);
        let b = PhysAddr::new(0, 1, 0, 1, 0);
        let t1 = e.submit(NandOpRequest::offchip_copy(a, PhysAddr { block: 2, ..a })).unwrap();
        let t2 = e.submit(NandOpRequest::offchip_copy(b, PhysAddr { block: 2, ..b })).unwrap();
        e.run_until(u64::MAX);
        let done = completions(&mut e);
        let at = |t: TicketId| done.iter().find(|d| d.id == t).unwrap().completion_time;
        assert_eq!((at(t1), at(t2)), (820, 860));
        let dma: Vec<(PhaseKind, Micros, Micros)> =
            e.log().iter().filter(|r| r.kind.is_dma()).map(|r| (r.kind, r.start, r.end)).collect();
        assert_eq!(
            dma,
            vec![
                (PhaseKind::DmaOut, 60, 100),
                (PhaseKind::DmaOut, 100, 140),
                (PhaseKind::DmaIn, 140, 180),
                (PhaseKind::DmaIn, 180, 220),
            ]
        );
    }

    #[test]
    fn copyback_rejects_cross_plane() {
        let mut e = engine(1);
        let err = e
            .submit(NandOpRequest::copyback(PhysAddr::new(0, 0, 0, 1, 0), PhysAddr::new(0, 1, 0, 1, 0)))
            .unwrap_err();
        assert!(matches!(err, AddressError::NotCopybackCompatible { .. }));
        assert!(e.submit(NandOpRequest::host_read(PhysAddr::new(9, 0, 0, 0, 0))).is_err());
    }

    #[test]
    fn empty_engine() {
        let mut e = engine(1);
        assert_eq!(e.now(), 0);
        let stats = e.run_until(100);
        assert_eq!(e.now(), 100);
        assert!(stats.channel_busy.iter().chain(&stats.chip_busy).chain(&stats.dram_busy).all(|&b| b == 0));
    }

    #[test]
    fn timers_fire_in_order() {
        let mut e = engine(1);
        e.schedule_timer(50, TimerKind::IdleCheck, 7);
        e.schedule_timer(20, TimerKind::HostArrival, 1);
        e.schedule_timer(50, TimerKind::HostArrival, 8);
        let mut seen = Vec::new();
        while let Some(Notification::Timer { token, at, .. }) = e.poll(100) {
            assert!(e.now() >= at);
            seen.push((at, token));
        }
        assert_eq!(seen, vec![(20, 1), (50, 7), (50, 8)]);
        e.run_until(100);
        assert_eq!(e.now(), 100);
    }

    #[test]
    fn eight_copybacks_on_one_channel_run_in_parallel() {
        let mut e = engine(1);
        for chip in 0..8 {
            let a = PhysAddr::new(0, chip, 0, 1, 0);
            e.submit(NandOpRequest::copyback(a, PhysAddr { block: 2, ..a })).unwrap();
        }
        let stats = e.run_until(u64::MAX);
        assert!(completions(&mut e).iter().all(|t| t.completion_time == 700));
        assert_eq!(stats.channel_busy[0], 0);
        assert!(e.log().iter().all(|r| !r.kind.is_dma()));
    }

    #[test]
    fn eight_offchip_copies_serialize_on_channel() {
        let mut e = engine(1);
        for chip in 0..8 {
            let a = PhysAddr::new(0, chip, 0, 1, 0);
            e.submit(NandOpRequest::offchip_copy(a, PhysAddr { block: 2, ..a })).unwrap();
        }
        let stats = e.run_until(u64::MAX);
        assert_eq!(stats.channel_busy[0], 8 * 80);
        let last_dma = e.log().iter().filter(|r| r.kind.is_dma()).map(|r| r.end).max().unwrap();
        assert!(last_dma >= 60 + 8 * 80);
        audit_exclusivity(e.log()).unwrap();
    }

    #[test]
    fn dram_ports_isolate_channels() {
        // With one port per channel, two channels transfer concurrently.
        let mut e = Engine::new(Geometry::default(), TimingParams::default(), 8);
        let a = PhysAddr::new(0, 0, 0, 1, 0);
        let b = PhysAddr::new(1, 0, 0, 1, 0);
        e.submit(NandOpRequest::offchip_copy(a, PhysAddr { block: 2, ..a })).unwrap();
        e.submit(NandOpRequest::offchip_copy(b, PhysAddr { block: 2, ..b })).unwrap();
        e.run_until(u64::MAX);
        assert!(completions(&mut e).iter().all(|t| t.completion_time == 780));
    }

    #[test]
    fn event_log_csv_format() {
        let mut e = engine(1);
        let a = PhysAddr::new(0, 0, 0, 1, 0);
        e.submit(NandOpRequest::host_read(a)).unwrap();
        e.run_until(u64::MAX);
        let mut out = Vec::new();
        write_event_log(&mut out, e.log()).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text, format!("{EVENT_LOG_HEADER}\n0,read_phase,0,0,0,1,0,chip0\n60,dma_out,0,0,0,1,0,ch0+dram0\n"));
    }
}
