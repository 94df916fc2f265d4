//! Page-mapping FTL driven by the event engine.
//!
//! Metadata (mapping, validity, block state) changes when an operation is
//! submitted; the engine only decides when it finishes. A GC job submits all
//! migrations of its victim at once and erases the victim after the last one
//! completes.

pub mod block;
mod buffer;

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{RunConfig, Variant};
use crate::dmms::{greedy_select_mode, select_mode, DecisionRecord, Urgency, UtilizationTracker};
use crate::engine::{Engine, EngineStats, NandOpRequest, Notification, PhaseRecord, TimerKind};
use crate::epm::{ActiveBlockSet, EpmPolicy, MigrationDecision, MigrationMode, Stream};
use crate::error::{AddressError, SimError};
use crate::geometry::{Geometry, Micros, PhysAddr};
use crate::reliability::ErrorModel;
use crate::workload::{IoOp, IoRequest};

use block::{BlockMeta, BlockState, PlaneBlocks};
pub use buffer::{BufferedPage, WriteBuffer};

const UNMAPPED: u64 = u64::MAX;

macro_rules! counters {
    ($($(#[$doc:meta])* $field:ident),* $(,)?) => {
        /// Cumulative event counts of a run.
        #[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
        pub struct Counters {
            $($(#[$doc])* pub $field: u64,)*
        }

        impl Counters {
            /// Field-wise `self - earlier`.
            pub fn since(&self, earlier: &Counters) -> Counters {
                Counters { $($field: self.$field - earlier.$field,)* }
            }
        }
    };
}

counters! {
    read_requests,
    write_requests,
    read_bytes,
    write_bytes,
    host_pages_read,
    host_pages_written,
    buffer_hits,
    unmapped_reads,
    nand_reads,
    host_programs,
    migrations_copyback,
    migrations_offchip,
    fg_copyback,
    fg_offchip,
    bg_copyback,
    bg_offchip,
    /// Pages the mode selector sent to rcopyback that EPM forced off-chip.
    forced_offchip,
    gc_foreground,
    gc_background,
    wear_level_runs,
    decisions_rcopyback,
    decisions_offchip,
    erases,
}

impl Counters {
    pub fn migrations(&self) -> u64 {
        self.migrations_copyback + self.migrations_offchip
    }

    pub fn nand_pages_programmed(&self) -> u64 {
        self.host_programs + self.migrations()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Gc,
    WearLevel,
}

#[derive(Debug, Clone, Copy)]
struct Job {
    victim: u32,
    outstanding: u32,
    next_page: u32,
    hint: MigrationMode,
    urgency: Urgency,
    /// Background jobs keep one migration in flight and pause while the
    /// host is active, until the plane runs short of free blocks.
    throttled: bool,
}

#[derive(Debug, Clone, Copy)]
enum Purpose {
    Idle,
    HostWrite { slot: u32, plane: u32 },
    HostRead { read: u32 },
    Migration { plane: u32 },
    Erase { plane: u32, block: u32 },
}

#[derive(Debug, Clone)]
struct PlaneState {
    blocks: PlaneBlocks,
    active: ActiveBlockSet,
    job: Option<Job>,
    host_inflight: u32,
    erases_since_wl: u32,
}

#[derive(Debug)]
struct ClosedLoop {
    requests: Vec<IoRequest>,
    next_issue: usize,
}

#[derive(Debug, Clone, Copy)]
struct HostReq {
    idx: usize,
    req: IoRequest,
    next: u64,
    last: u64,
}

#[derive(Debug, Clone, Copy)]
struct PendingRead {
    idx: usize,
    arrival: Micros,
    bytes: u64,
    outstanding: u32,
}

/// Results of the per-page hop oracle.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ShadowStats {
    pub enabled: bool,
    pub copybacks_checked: u64,
    /// Pages whose hops exceeded the table or their block's counter.
    pub violations: u64,
    pub max_hops: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Snapshot {
    pub time: Micros,
    pub free_blocks: u64,
    pub u: f64,
    pub smoothed_u: f64,
    pub host_pages_written: u64,
    pub nand_pages_programmed: u64,
    pub gc_foreground: u64,
    pub gc_background: u64,
    pub wear_level_runs: u64,
    pub migrations_copyback: u64,
    pub migrations_offchip: u64,
    /// Mean fill of the migration active blocks, one entry per slot.
    pub slot_fill: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LatencyStats {
    pub count: u64,
    pub sum_us: u64,
    pub max_us: u64,
}

impl LatencyStats {
    fn add(&mut self, l: Micros) {
        self.count += 1;
        self.sum_us += l;
        self.max_us = self.max_us.max(l);
    }

    pub fn mean_us(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum_us as f64 / self.count as f64
        }
    }
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub requests: u64,
    pub counters: Counters,
    pub steady: Counters,
    pub first_arrival: Micros,
    pub last_completion: Micros,
    pub steady_start: Micros,
    pub steady_bytes: u64,
    pub read_latency: LatencyStats,
    pub write_latency: LatencyStats,
    /// Migrations per page version -> number of versions.
    pub migration_histogram: BTreeMap<u32, u64>,
    pub shadow: ShadowStats,
    /// Full counter-0 blocks seen each time the host came back from idle.
    pub counter0_at_idle_end: Vec<u64>,
    pub final_free_blocks: u64,
    /// Full blocks by copyback counter at the end of the run.
    pub full_blocks_by_counter: Vec<u64>,
    pub pe_min: u32,
    pub pe_max: u32,
    pub pe_mean: f64,
    pub engine: EngineStats,
    pub snapshots: Vec<Snapshot>,
    pub decisions: Vec<DecisionRecord>,
    pub event_log: Vec<PhaseRecord>,
    pub mapping_checks: u64,
}

/// One simulated SSD.
pub struct Ssd {
    cfg: RunConfig,
    g: Geometry,
    ppb: u64,
    engine: Engine,
    policy: EpmPolicy,
    model: ErrorModel,
    months: f64,
    planes: Vec<PlaneState>,
    map: Vec<u64>,
    rmap: Vec<u64>,
    phys_tag: Vec<u64>,
    expected: Vec<u64>,
    migrations_of_version: Vec<u32>,
    hops: Vec<u8>,
    buffer: WriteBuffer,
    purposes: Vec<Purpose>,
    reads: Vec<Option<PendingRead>>,
    free_reads: Vec<u32>,
    queue: VecDeque<HostReq>,
    tracker: UtilizationTracker,
    rr: usize,
    next_tag: u64,
    arrivals: u64,
    total_requests: u64,
    completed: u64,
    idle: bool,
    last_arrival: Micros,
    idle_timer: Option<u64>,
    counters: Counters,
    steady_base: Option<(Micros, Counters)>,
    warm_index: usize,
    closed: Option<ClosedLoop>,
    steady_bytes: u64,
    histogram: BTreeMap<u32, u64>,
    shadow: ShadowStats,
    counter0_samples: Vec<u64>,
    snapshots: Vec<Snapshot>,
    next_snapshot: Micros,
    decisions: Option<Vec<DecisionRecord>>,
    read_latency: LatencyStats,
    write_latency: LatencyStats,
    first_arrival: Option<Micros>,
    last_completion: Micros,
    mapping_checks: u64,
}

impl Ssd {
    pub fn new(cfg: &RunConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let g = cfg.geometry;
        let m = cfg.variant.max_threshold();
        let policy = EpmPolicy::new(m, cfg.reliability.ct_table());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_b10c);
        let (lo, hi) = (cfg.ftl.initial_pe_min, cfg.ftl.initial_pe_max);
        let mut planes = Vec::with_capacity(g.planes() as usize);
        for p in 0..g.planes() {
            let mut blocks = if lo == hi {
                PlaneBlocks::new(g.blocks_per_plane, lo)
            } else {
                PlaneBlocks::with_wear((0..g.blocks_per_plane).map(|_| rng.random_range(lo..=hi)))
            };
            let mut active = ActiveBlockSet::new(m);
            active.allocate_active(p, Stream::Host, &mut blocks, &policy)?;
            for slot in 0..=m {
                active.allocate_active(p, Stream::Migration(slot), &mut blocks, &policy)?;
            }
            planes.push(PlaneState { blocks, active, job: None, host_inflight: 0, erases_since_wl: 0 });
        }
        let total_pages = g.total_pages() as usize;
        let logical = cfg.logical_pages() as usize;
        let mut engine = Engine::new(g, cfg.timing, cfg.engine.dram_ports);
        if cfg.output.event_log {
            engine.enable_log();
        }
        let initial_window = u64::from(g.pages_per_block) * cfg.timing.t_prog;
        let mut ssd = Ssd {
            g,
            ppb: u64::from(g.pages_per_block),
            engine,
            policy,
            model: cfg.reliability.error_model.clone(),
            months: cfg.reliability.retention_months,
            planes,
            map: vec![UNMAPPED; logical],
            rmap: vec![UNMAPPED; total_pages],
            phys_tag: vec![0; total_pages],
            expected: vec![0; logical],
            migrations_of_version: vec![0; logical],
            hops: if cfg.audit.shadow_oracle { vec![0; total_pages] } else { Vec::new() },
            buffer: WriteBuffer::new(cfg.buffer_pages() as usize),
            purposes: Vec::new(),
            reads: Vec::new(),
            free_reads: Vec::new(),
            queue: VecDeque::new(),
            tracker: UtilizationTracker::new(initial_window, cfg.dmms.window_ewma_weight, g.planes() as usize),
            rr: 0,
            next_tag: 1,
            arrivals: 0,
            total_requests: 0,
            completed: 0,
            idle: false,
            last_arrival: 0,
            idle_timer: None,
            counters: Counters::default(),
            steady_base: None,
            warm_index: 0,
            closed: None,
            steady_bytes: 0,
            histogram: BTreeMap::new(),
            shadow: ShadowStats { enabled: cfg.audit.shadow_oracle, ..ShadowStats::default() },
            counter0_samples: Vec::new(),
            snapshots: Vec::new(),
            next_snapshot: 0,
            decisions: cfg.output.decision_log.then(Vec::new),
            read_latency: LatencyStats::default(),
            write_latency: LatencyStats::default(),
            first_arrival: None,
            last_completion: 0,
            mapping_checks: 0,
            cfg: cfg.clone(),
        };
        if cfg.ftl.precondition {
            ssd.precondition()?;
        }
        Ok(ssd)
    }

    /// Writes every logical page once, striped across planes, without
    /// spending simulated time.
    fn precondition(&mut self) -> Result<(), SimError> {
        let planes = self.planes.len() as u64;
        for lpn in 0..self.map.len() as u64 {
            let plane = (lpn % planes) as u32;
            let tag = self.fresh_tag();
            self.expected[lpn as usize] = tag;
            self.place_host_page(plane, lpn, tag, false)?
                .ok_or(SimError::Capacity { plane, purpose: "preconditioning" })?;
        }
        Ok(())
    }

    pub fn geometry(&self) -> &Geometry {
        &self.g
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    pub fn logical_pages(&self) -> u64 {
        self.map.len() as u64
    }

    pub fn lookup(&self, lpn: u64) -> Option<PhysAddr> {
        match self.map.get(lpn as usize) {
            Some(&ppn) if ppn != UNMAPPED => Some(self.addr(ppn)),
            _ => None,
        }
    }

    pub fn block_meta(&self, plane: u32, block: u32) -> BlockMeta {
        self.planes[plane as usize].blocks.meta[block as usize]
    }

    pub fn plane_blocks(&self, plane: u32) -> &PlaneBlocks {
        &self.planes[plane as usize].blocks
    }

    /// Direct access for setting up scenarios (e.g. skewed wear).
    pub fn plane_blocks_mut(&mut self, plane: u32) -> &mut PlaneBlocks {
        &mut self.planes[plane as usize].blocks
    }

    pub fn active_blocks(&self, plane: u32) -> &ActiveBlockSet {
        &self.planes[plane as usize].active
    }

    pub fn free_blocks(&self) -> u64 {
        self.planes.iter().map(|p| p.blocks.free.len() as u64).sum()
    }

    pub fn buffer(&self) -> &WriteBuffer {
        &self.buffer
    }

    fn fresh_tag(&mut self) -> u64 {
        let t = self.next_tag;
        self.next_tag += 1;
        t
    }

    fn ppn(&self, plane: u32, block: u32, page: u32) -> u64 {
        (u64::from(plane) * u64::from(self.g.blocks_per_plane) + u64::from(block)) * self.ppb + u64::from(page)
    }

    fn locate(&self, ppn: u64) -> (u32, u32) {
        let flat = ppn / self.ppb;
        let bpp = u64::from(self.g.blocks_per_plane);
        ((flat / bpp) as u32, (flat % bpp) as u32)
    }

    fn addr(&self, ppn: u64) -> PhysAddr {
        self.g.decode(ppn).expect("ppn in range")
    }

    fn submit(&mut self, req: NandOpRequest, purpose: Purpose) -> Result<(), SimError> {
        let id = self.engine.submit(req)?.0 as usize;
        if id >= self.purposes.len() {
            self.purposes.resize(id + 1, Purpose::Idle);
        }
        self.purposes[id] = purpose;
        Ok(())
    }

    fn sample_utilization(&mut self) {
        let u = self.buffer.utilization();
        self.tracker.record_sample(self.engine.now(), u);
    }

    // ---- host side -------------------------------------------------------

    /// Replays `requests` (sorted by arrival) to completion.
    pub fn run(self, requests: &[IoRequest]) -> Result<RunResult, SimError> {
        self.run_with(requests, None)
    }

    /// Closed-loop replay: at most `depth` requests are outstanding and each
    /// new one is issued after a completion plus its gap to the predecessor.
    pub fn run_closed(self, requests: &[IoRequest], depth: u32) -> Result<RunResult, SimError> {
        assert!(depth > 0, "queue depth must be positive");
        self.run_with(requests, Some(depth))
    }

    fn run_with(mut self, requests: &[IoRequest], depth: Option<u32>) -> Result<RunResult, SimError> {
        self.replay(requests, depth)?;
        self.conclude()
    }

    /// Replays `requests` open-loop and waits for all of them, keeping the
    /// device for further requests or inspection.
    pub fn apply(&mut self, requests: &[IoRequest]) -> Result<(), SimError> {
        self.replay(requests, None)?;
        if self.completed != self.total_requests {
            return Err(SimError::Stalled {
                time: self.engine.now(),
                pending: (self.total_requests - self.completed) as usize,
            });
        }
        Ok(())
    }

    fn replay(&mut self, requests: &[IoRequest], depth: Option<u32>) -> Result<(), SimError> {
        let logical = self.logical_pages();
        for r in requests {
            let last = *r.pages(self.g.page_size).end();
            if last >= logical {
                return Err(AddressError::Logical { lpn: last, capacity: logical }.into());
            }
        }
        let base = self.total_requests as usize;
        self.total_requests += requests.len() as u64;
        if base == 0 {
            self.warm_index = (requests.len() as f64 * self.cfg.output.warmup_fraction).floor() as usize;
        }
        if let Some(depth) = depth {
            assert_eq!(base, 0, "closed-loop replay needs a fresh device");
            self.closed = Some(ClosedLoop {
                requests: requests.to_vec(),
                next_issue: (depth as usize).min(requests.len()),
            });
            if let Some(first) = requests.first() {
                for i in 0..(depth as usize).min(requests.len()) {
                    self.engine.schedule_timer(first.arrival, TimerKind::HostArrival, i as u64);
                }
            }
            while let Some(n) = self.engine.poll(Micros::MAX) {
                self.dispatch(n)?;
                self.maybe_snapshot();
            }
            return Ok(());
        }
        let mut next = 0;
        loop {
            let t_next = requests.get(next).map(|r| r.arrival);
            if let Some(n) = self.engine.poll(t_next.unwrap_or(Micros::MAX)) {
                self.dispatch(n)?;
            } else if let Some(t) = t_next {
                self.engine.advance_to(t);
                self.arrive(base + next, requests[next])?;
                next += 1;
            } else {
                break;
            }
            self.maybe_snapshot();
        }
        Ok(())
    }

    fn conclude(self) -> Result<RunResult, SimError> {
        if self.completed != self.total_requests {
            return Err(SimError::Stalled {
                time: self.engine.now(),
                pending: (self.total_requests - self.completed) as usize,
            });
        }
        self.finish()
    }

    fn arrive(&mut self, idx: usize, req: IoRequest) -> Result<(), SimError> {
        self.arrivals += 1;
        self.last_arrival = req.arrival;
        self.first_arrival.get_or_insert(req.arrival);
        if self.idle {
            self.idle = false;
            let c0 = self.full_blocks_with_counter(0);
            self.counter0_samples.push(c0);
        }
        let pages = req.pages(self.g.page_size);
        self.queue.push_back(HostReq { idx, req, next: *pages.start(), last: *pages.end() });
        self.admit()?;
        self.flush()
    }

    /// Admits queued requests in order. Reads go straight to the flash;
    /// writes enter the buffer page by page and block the queue when it is full.
    fn admit(&mut self) -> Result<(), SimError> {
        while let Some(head) = self.queue.front().copied() {
            if head.idx == self.warm_index && self.steady_base.is_none() {
                self.steady_base = Some((self.engine.now(), self.counters.clone()));
            }
            match head.req.op {
                IoOp::Read => {
                    self.queue.pop_front();
                    self.admit_read(head)?;
                }
                IoOp::Write => {
                    let mut next = head.next;
                    while next <= head.last && !self.buffer.is_full() {
                        let tag = self.fresh_tag();
                        self.expected[next as usize] = tag;
                        self.buffer.push(next, tag);
                        self.counters.host_pages_written += 1;
                        self.sample_utilization();
                        next += 1;
                    }
                    if next <= head.last {
                        self.queue.front_mut().expect("head").next = next;
                        return Ok(());
                    }
                    self.queue.pop_front();
                    self.complete(head.idx, head.req.arrival, IoOp::Write, head.req.length);
                }
            }
        }
        // One idle check per quiet period, keyed by the arrival count.
        if self.arrivals < self.total_requests && self.idle_timer != Some(self.arrivals) {
            self.idle_timer = Some(self.arrivals);
            let at = self.engine.now().max(self.last_arrival + self.cfg.gc.bg_idle_threshold_us);
            self.engine.schedule_timer(at, TimerKind::IdleCheck, self.arrivals);
        }
        Ok(())
    }

    fn admit_read(&mut self, head: HostReq) -> Result<(), SimError> {
        let mut outstanding = 0;
        let read = self.free_reads.pop().unwrap_or_else(|| {
            self.reads.push(None);
            (self.reads.len() - 1) as u32
        });
        for lpn in head.next..=head.last {
            self.counters.host_pages_read += 1;
            let got = if let Some(tag) = self.buffer.lookup(lpn) {
                self.counters.buffer_hits += 1;
                tag
            } else if self.map[lpn as usize] == UNMAPPED {
                self.counters.unmapped_reads += 1;
                0
            } else {
                let ppn = self.map[lpn as usize];
                self.check_readable(ppn, lpn)?;
                self.counters.nand_reads += 1;
                outstanding += 1;
                let addr = self.addr(ppn);
                self.submit(NandOpRequest::host_read(addr), Purpose::HostRead { read })?;
                self.phys_tag[ppn as usize]
            };
            if self.cfg.audit.integrity && got != self.expected[lpn as usize] {
                return Err(SimError::Integrity {
                    time: self.engine.now(),
                    lpn,
                    got,
                    expected: self.expected[lpn as usize],
                });
            }
        }
        if outstanding == 0 {
            self.free_reads.push(read);
            self.complete(head.idx, head.req.arrival, IoOp::Read, head.req.length);
        } else {
            self.reads[read as usize] =
                Some(PendingRead { idx: head.idx, arrival: head.req.arrival, bytes: head.req.length, outstanding });
        }
        Ok(())
    }

    fn complete(&mut self, idx: usize, arrival: Micros, op: IoOp, bytes: u64) {
        let now = self.engine.now();
        self.completed += 1;
        self.last_completion = self.last_completion.max(now);
        match op {
            IoOp::Read => {
                self.counters.read_requests += 1;
                self.counters.read_bytes += bytes;
                self.read_latency.add(now - arrival);
            }
            IoOp::Write => {
                self.counters.write_requests += 1;
                self.counters.write_bytes += bytes;
                self.write_latency.add(now - arrival);
            }
        }
        if idx >= self.warm_index {
            self.steady_bytes += bytes;
        }
        if let Some(cl) = &mut self.closed {
            let i = cl.next_issue;
            if i < cl.requests.len() {
                let think = cl.requests[i].arrival.saturating_sub(cl.requests[i - 1].arrival);
                cl.next_issue += 1;
                self.engine.schedule_timer(now + think, TimerKind::HostArrival, i as u64);
            }
        }
    }

    /// Hands buffered pages to planes that can take a host program.
    fn flush(&mut self) -> Result<(), SimError> {
        while self.buffer.pending() > 0 {
            let Some(plane) = self.pick_host_plane() else { break };
            let (slot, page) = self.buffer.pop_pending().expect("pending page");
            let ppn = self.place_host_page(plane, page.lpn, page.tag, true)?.expect("plane accepts host writes");
            let addr = self.addr(ppn);
            self.submit(NandOpRequest::host_write(addr), Purpose::HostWrite { slot, plane })?;
            self.planes[plane as usize].host_inflight += 1;
            self.counters.host_programs += 1;
            self.maybe_start_job(plane)?;
        }
        Ok(())
    }

    fn pick_host_plane(&mut self) -> Option<u32> {
        let n = self.planes.len();
        let limit = self.cfg.ftl.host_inflight_per_plane;
        for i in 0..n {
            let p = (self.rr + i) % n;
            if self.planes[p].host_inflight < limit && self.host_writable(p as u32) {
                self.rr = (p + 1) % n;
                return Some(p as u32);
            }
        }
        None
    }

    fn host_writable(&self, plane: u32) -> bool {
        let ps = &self.planes[plane as usize];
        let has_room = ps.active.host.is_some_and(|b| ps.blocks.meta[b as usize].write_ptr < self.g.pages_per_block);
        has_room || ps.blocks.free.len() > self.cfg.ftl.host_reserve as usize
    }

    /// Appends `lpn` to the plane's host block. `None` if the plane has no
    /// block it may use for host data.
    fn place_host_page(&mut self, plane: u32, lpn: u64, tag: u64, timed: bool) -> Result<Option<u64>, SimError> {
        if !self.host_writable(plane) {
            return Ok(None);
        }
        let ppb = self.g.pages_per_block;
        let ps = &mut self.planes[plane as usize];
        let block = match ps.active.host {
            Some(b) if ps.blocks.meta[b as usize].write_ptr < ppb => b,
            _ => ps
                .active
                .allocate_active(plane, Stream::Host, &mut ps.blocks, &self.policy)?
                .expect("counter-0 blocks are always eligible"),
        };
        let ppn = self.program_page(plane, block, Stream::Host, timed);
        self.remap(lpn, ppn);
        self.phys_tag[ppn as usize] = tag;
        if !self.hops.is_empty() {
            self.hops[ppn as usize] = 0;
        }
        Ok(Some(ppn))
    }

    /// Takes the next page of an active block and returns its ppn.
    fn program_page(&mut self, plane: u32, block: u32, stream: Stream, timed: bool) -> u64 {
        let ppb = self.g.pages_per_block;
        let ps = &mut self.planes[plane as usize];
        let m = &mut ps.blocks.meta[block as usize];
        debug_assert_eq!(m.state, BlockState::Active);
        let page = m.write_ptr;
        m.write_ptr += 1;
        m.valid += 1;
        if m.write_ptr == ppb {
            m.state = BlockState::Full;
            ps.active.retire(stream);
            if timed {
                self.tracker.observe_block_fill(plane as usize, self.engine.now());
            }
        }
        self.ppn(plane, block, page)
    }

    /// Points `lpn` at `ppn`, invalidating its previous location.
    fn remap(&mut self, lpn: u64, ppn: u64) {
        let old = self.map[lpn as usize];
        if old != UNMAPPED {
            self.invalidate(old);
            let k = std::mem::take(&mut self.migrations_of_version[lpn as usize]);
            if k > 0 {
                *self.histogram.entry(k).or_default() += 1;
            }
        }
        self.map[lpn as usize] = ppn;
        self.rmap[ppn as usize] = lpn;
    }

    fn invalidate(&mut self, ppn: u64) {
        self.rmap[ppn as usize] = UNMAPPED;
        let (plane, block) = self.locate(ppn);
        self.planes[plane as usize].blocks.meta[block as usize].valid -= 1;
    }

    // ---- event dispatch ----------------------------------------------------

    fn dispatch(&mut self, n: Notification) -> Result<(), SimError> {
        match n {
            Notification::Completed(t) => {
                let purpose = std::mem::replace(&mut self.purposes[t.id.0 as usize], Purpose::Idle);
                match purpose {
                    Purpose::HostWrite { slot, plane } => {
                        self.buffer.release(slot);
                        self.planes[plane as usize].host_inflight -= 1;
                        self.sample_utilization();
                        self.admit()?;
                        self.flush()?;
                    }
                    Purpose::HostRead { read } => {
                        let r = self.reads[read as usize].as_mut().expect("pending read");
                        r.outstanding -= 1;
                        if r.outstanding == 0 {
                            let r = self.reads[read as usize].take().expect("pending read");
                            self.free_reads.push(read);
                            self.complete(r.idx, r.arrival, IoOp::Read, r.bytes);
                        }
                    }
                    Purpose::Migration { plane } => {
                        let job = self.planes[plane as usize].job.as_mut().expect("migration belongs to a job");
                        job.outstanding -= 1;
                        self.pump_job(plane)?;
                    }
                    Purpose::Erase { plane, block } => self.finish_erase(plane, block)?,
                    Purpose::Idle => unreachable!("completion for unknown ticket {:?}", t.id),
                }
            }
            Notification::Timer { kind: TimerKind::IdleCheck, token, .. } => {
                if token == self.arrivals && self.queue.is_empty() && self.arrivals < self.total_requests {
                    self.idle = true;
                    for p in 0..self.planes.len() as u32 {
                        // Resumes paused background jobs too.
                        self.maybe_start_job(p)?;
                    }
                }
            }
            Notification::Timer { kind: TimerKind::HostArrival, token, .. } => {
                let cl = self.closed.as_ref().expect("arrival timers only in closed-loop runs");
                let req = IoRequest { arrival: self.engine.now(), ..cl.requests[token as usize] };
                self.arrive(token as usize, req)?;
            }
        }
        Ok(())
    }

    // ---- garbage collection and wear leveling --------------------------------

    /// Starts foreground GC, wear leveling or background GC on an idle plane.
    fn maybe_start_job(&mut self, plane: u32) -> Result<(), SimError> {
        let ps = &mut self.planes[plane as usize];
        let free = ps.blocks.free.len() as u32;
        if let Some(job) = ps.job.as_mut() {
            if job.throttled && free < self.cfg.gc.fg_watermark {
                job.throttled = false;
            }
            return self.pump_job(plane);
        }
        if free < self.cfg.gc.fg_watermark && self.start_job(plane, JobKind::Gc, Urgency::Foreground)? {
            return Ok(());
        }
        let wl = self.cfg.wear_leveling;
        let ps = &mut self.planes[plane as usize];
        if wl.enabled && ps.erases_since_wl >= wl.check_interval {
            ps.erases_since_wl = 0;
            if self.wear_level_check(plane)? {
                return Ok(());
            }
        }
        if self.idle && free < self.cfg.gc.bg_watermark {
            self.start_job(plane, JobKind::Gc, Urgency::Background)?;
        }
        Ok(())
    }

    /// Migrates the plane's coldest block if its wear spread exceeds the
    /// configured gap. Returns whether a job started.
    pub fn wear_level_check(&mut self, plane: u32) -> Result<bool, SimError> {
        let ps = &self.planes[plane as usize];
        if ps.job.is_some() || ps.blocks.pe_gap() <= self.cfg.wear_leveling.pe_gap {
            return Ok(false);
        }
        self.start_job(plane, JobKind::WearLevel, Urgency::Background)
    }

    /// Runs one GC job on `plane` regardless of watermarks. Returns the
    /// number of pages it migrates, or `None` without a victim.
    pub fn force_gc(&mut self, plane: u32, urgency: Urgency) -> Result<Option<u64>, SimError> {
        if self.planes[plane as usize].job.is_some() {
            return Ok(None);
        }
        let before = self.counters.migrations();
        if !self.start_job(plane, JobKind::Gc, urgency)? {
            return Ok(None);
        }
        if let Some(job) = self.planes[plane as usize].job.as_mut() {
            job.throttled = false;
        }
        self.pump_job(plane)?;
        Ok(Some(self.counters.migrations() - before))
    }

    /// Dispatches engine events until nothing is in flight.
    pub fn drain(&mut self) -> Result<(), SimError> {
        while let Some(n) = self.engine.poll(Micros::MAX) {
            self.dispatch(n)?;
        }
        Ok(())
    }

    fn mode_hint(&mut self, urgency: Urgency) -> MigrationMode {
        match self.cfg.variant {
            Variant::Baseline => MigrationMode::Offchip,
            Variant::RcftlGreedy(_) => greedy_select_mode(urgency),
            Variant::Rcftl(_) => select_mode(self.tracker.smoothed_at(self.engine.now()), &self.cfg.dmms, urgency),
        }
    }

    fn start_job(&mut self, plane: u32, kind: JobKind, urgency: Urgency) -> Result<bool, SimError> {
        let ppb = self.g.pages_per_block;
        let ps = &self.planes[plane as usize];
        let victim = match kind {
            JobKind::Gc => ps.blocks.select_victim(ppb),
            JobKind::WearLevel => ps.blocks.coldest_full(),
        };
        let Some(victim) = victim else { return Ok(false) };
        let hint = self.mode_hint(urgency);
        let now = self.engine.now();
        if let Some(log) = self.decisions.as_mut() {
            let smoothed_u = self.tracker.smoothed();
            log.push(DecisionRecord { time: now, urgency, smoothed_u, mode: hint });
        }
        match (kind, urgency) {
            (JobKind::WearLevel, _) => self.counters.wear_level_runs += 1,
            (JobKind::Gc, Urgency::Foreground) => self.counters.gc_foreground += 1,
            (JobKind::Gc, Urgency::Background) => self.counters.gc_background += 1,
        }
        match hint {
            MigrationMode::Rcopyback => self.counters.decisions_rcopyback += 1,
            MigrationMode::Offchip => self.counters.decisions_offchip += 1,
        }
        self.planes[plane as usize].blocks.meta[victim as usize].state = BlockState::Victim;
        self.planes[plane as usize].job = Some(Job {
            victim,
            outstanding: 0,
            next_page: 0,
            hint,
            urgency,
            throttled: urgency == Urgency::Background,
        });
        self.pump_job(plane)?;
        Ok(true)
    }

    /// Submits the job's next migrations, or the erase once all valid pages
    /// have been moved.
    fn pump_job(&mut self, plane: u32) -> Result<(), SimError> {
        let Some(job) = self.planes[plane as usize].job else { return Ok(()) };
        let vm = self.planes[plane as usize].blocks.meta[job.victim as usize];
        if vm.state != BlockState::Victim {
            return Ok(());
        }
        let (mut next, mut outstanding) = (job.next_page, job.outstanding);
        while next < vm.write_ptr {
            if job.throttled && (outstanding > 0 || !self.idle) {
                break;
            }
            let src = self.ppn(plane, job.victim, next);
            next += 1;
            let lpn = self.rmap[src as usize];
            if lpn == UNMAPPED {
                continue;
            }
            let mut decision = self.policy.decide_destination(vm.copyback_counter, vm.pe_cycles, job.hint);
            let dst_block = match self.migration_block(plane, decision.destination_slot)? {
                Some(b) => b,
                None => {
                    decision = MigrationDecision::OFFCHIP;
                    self.migration_block(plane, 0)?.expect("counter-0 blocks are always eligible")
                }
            };
            if job.hint == MigrationMode::Rcopyback && decision.mode == MigrationMode::Offchip {
                self.counters.forced_offchip += 1;
            }
            self.migrate_page(plane, src, lpn, dst_block, decision, job.urgency)?;
            outstanding += 1;
        }
        let j = self.planes[plane as usize].job.as_mut().expect("job");
        j.next_page = next;
        j.outstanding = outstanding;
        if next == vm.write_ptr && outstanding == 0 {
            self.submit_erase(plane, job.victim)?;
        }
        Ok(())
    }

    /// Active block of a migration slot with room, allocating one if needed.
    /// `None` if no free block is worn little enough to serve the slot.
    fn migration_block(&mut self, plane: u32, slot: u32) -> Result<Option<u32>, SimError> {
        let ppb = self.g.pages_per_block;
        let ps = &mut self.planes[plane as usize];
        match ps.active.get(Stream::Migration(slot)) {
            Some(b) if ps.blocks.meta[b as usize].write_ptr < ppb => Ok(Some(b)),
            _ => ps.active.allocate_active(plane, Stream::Migration(slot), &mut ps.blocks, &self.policy),
        }
    }

    fn migrate_page(
        &mut self,
        plane: u32,
        src: u64,
        lpn: u64,
        dst_block: u32,
        decision: MigrationDecision,
        urgency: Urgency,
    ) -> Result<(), SimError> {
        let (_, src_block) = self.locate(src);
        let src_meta = self.planes[plane as usize].blocks.meta[src_block as usize];
        let dst_meta = self.planes[plane as usize].blocks.meta[dst_block as usize];
        let copyback = decision.mode == MigrationMode::Rcopyback;
        debug_assert_eq!(dst_meta.copyback_counter, decision.destination_slot);
        debug_assert!(!copyback || dst_meta.copyback_counter == src_meta.copyback_counter + 1);
        let dst = self.program_page(plane, dst_block, Stream::Migration(decision.destination_slot), true);
        self.remap_migrated(lpn, src, dst);
        if !self.hops.is_empty() {
            let h = u32::from(self.hops[src as usize]);
            self.check_readable(src, lpn)?;
            let new = if copyback { h + 1 } else { 0 };
            if copyback {
                self.shadow.copybacks_checked += 1;
                if new > self.policy.ct.lookup(src_meta.pe_cycles) || new > dst_meta.copyback_counter {
                    self.shadow.violations += 1;
                }
                self.shadow.max_hops = self.shadow.max_hops.max(new);
            }
            self.hops[dst as usize] = new as u8;
            if copyback {
                self.check_readable(dst, lpn)?;
            }
        }
        match (copyback, urgency) {
            (true, Urgency::Foreground) => self.counters.fg_copyback += 1,
            (true, Urgency::Background) => self.counters.bg_copyback += 1,
            (false, Urgency::Foreground) => self.counters.fg_offchip += 1,
            (false, Urgency::Background) => self.counters.bg_offchip += 1,
        }
        let (src_addr, dst_addr) = (self.addr(src), self.addr(dst));
        if copyback {
            self.counters.migrations_copyback += 1;
            self.submit(NandOpRequest::copyback(src_addr, dst_addr), Purpose::Migration { plane })
        } else {
            self.counters.migrations_offchip += 1;
            self.submit(NandOpRequest::offchip_copy(src_addr, dst_addr), Purpose::Migration { plane })
        }
    }

    fn remap_migrated(&mut self, lpn: u64, src: u64, dst: u64) {
        debug_assert_eq!(self.map[lpn as usize], src);
        self.invalidate(src);
        self.map[lpn as usize] = dst;
        self.rmap[dst as usize] = lpn;
        self.phys_tag[dst as usize] = self.phys_tag[src as usize];
        self.migrations_of_version[lpn as usize] += 1;
    }

    /// Raises a data-loss fault if the page's accumulated error exceeds ECC.
    fn check_readable(&self, ppn: u64, lpn: u64) -> Result<(), SimError> {
        if self.hops.is_empty() {
            return Ok(());
        }
        let (plane, block) = self.locate(ppn);
        let pe = self.planes[plane as usize].blocks.meta[block as usize].pe_cycles;
        let hops = u32::from(self.hops[ppn as usize]);
        let state = self.model.state_at(pe, self.months, hops);
        if self.model.is_readable(state) {
            return Ok(());
        }
        Err(SimError::DataLoss {
            time: self.engine.now(),
            lpn,
            ppn,
            history: format!(
                "{hops} copyback hops since the last ECC pass in a block with {pe} P/E cycles; error {:.3} exceeds {:.3}",
                state.accumulated_error, self.model.ecc_capacity
            ),
        })
    }

    fn submit_erase(&mut self, plane: u32, block: u32) -> Result<(), SimError> {
        let m = &mut self.planes[plane as usize].blocks.meta[block as usize];
        debug_assert_eq!(m.valid, 0);
        m.state = BlockState::Erasing;
        let addr = self.g.block_addr(plane, block);
        self.submit(NandOpRequest::erase(addr), Purpose::Erase { plane, block })
    }

    fn finish_erase(&mut self, plane: u32, block: u32) -> Result<(), SimError> {
        for page in 0..self.g.pages_per_block {
            let ppn = self.ppn(plane, block, page);
            if self.rmap[ppn as usize] != UNMAPPED {
                return Err(SimError::Mapping(format!(
                    "plane {plane} block {block} page {page} still maps lpn {} at erase",
                    self.rmap[ppn as usize]
                )));
            }
        }
        let ps = &mut self.planes[plane as usize];
        ps.blocks.erase(block);
        ps.job = None;
        ps.erases_since_wl += 1;
        self.counters.erases += 1;
        let interval = self.cfg.audit.mapping_check_interval;
        if interval > 0 && self.counters.erases.is_multiple_of(interval) {
            self.check_mapping()?;
        }
        self.flush()?;
        self.maybe_start_job(plane)
    }

    /// Full consistency check of forward map, reverse map and valid counts.
    pub fn check_mapping(&mut self) -> Result<(), SimError> {
        self.mapping_checks += 1;
        let mut mapped = 0u64;
        for (lpn, &ppn) in self.map.iter().enumerate() {
            if ppn == UNMAPPED {
                continue;
            }
            mapped += 1;
            if self.rmap[ppn as usize] != lpn as u64 {
                return Err(SimError::Mapping(format!("lpn {lpn} -> ppn {ppn}, but ppn maps back to {}", self.rmap[ppn as usize])));
            }
        }
        let mut reverse = 0u64;
        let ppb = self.ppb as usize;
        for (flat, chunk) in self.rmap.chunks(ppb).enumerate() {
            let valid = chunk.iter().filter(|&&l| l != UNMAPPED).count() as u32;
            reverse += u64::from(valid);
            let bpp = self.g.blocks_per_plane as usize;
            let meta = &self.planes[flat / bpp].blocks.meta[flat % bpp];
            if meta.valid != valid {
                return Err(SimError::Mapping(format!(
                    "plane {} block {} counts {} valid pages, reverse map has {valid}",
                    flat / bpp,
                    flat % bpp,
                    meta.valid
                )));
            }
        }
        if mapped != reverse {
            return Err(SimError::Mapping(format!("{mapped} mapped logical pages but {reverse} valid physical pages")));
        }
        Ok(())
    }

    // ---- reporting -----------------------------------------------------------

    fn full_blocks_with_counter(&self, counter: u32) -> u64 {
        self.planes
            .iter()
            .flat_map(|p| p.blocks.meta.iter())
            .filter(|m| m.state == BlockState::Full && m.copyback_counter == counter)
            .count() as u64
    }

    fn maybe_snapshot(&mut self) {
        let interval = self.cfg.output.snapshot_interval_us;
        let now = self.engine.now();
        if interval == 0 || now < self.next_snapshot {
            return;
        }
        self.next_snapshot = (now / interval + 1) * interval;
        let ppb = f64::from(self.g.pages_per_block);
        let slots = self.planes[0].active.slots.len();
        let slot_fill = (0..slots)
            .map(|s| {
                let sum: f64 = self
                    .planes
                    .iter()
                    .map(|p| p.active.slots[s].map_or(0.0, |b| f64::from(p.blocks.meta[b as usize].write_ptr) / ppb))
                    .sum();
                sum / self.planes.len() as f64
            })
            .collect();
        let c = &self.counters;
        let snap = Snapshot {
            time: now,
            free_blocks: self.planes.iter().map(|p| p.blocks.free.len() as u64).sum(),
            u: self.buffer.utilization(),
            smoothed_u: self.tracker.smoothed_at(now),
            host_pages_written: c.host_pages_written,
            nand_pages_programmed: c.nand_pages_programmed(),
            gc_foreground: c.gc_foreground,
            gc_background: c.gc_background,
            wear_level_runs: c.wear_level_runs,
            migrations_copyback: c.migrations_copyback,
            migrations_offchip: c.migrations_offchip,
            slot_fill,
        };
        self.snapshots.push(snap);
    }

    fn finish(mut self) -> Result<RunResult, SimError> {
        if self.cfg.audit.integrity {
            self.check_mapping()?;
        }
        for (lpn, &k) in self.migrations_of_version.iter().enumerate() {
            if k > 0 && self.map[lpn] != UNMAPPED {
                *self.histogram.entry(k).or_default() += 1;
            }
        }
        let m = self.cfg.variant.max_threshold() as usize;
        let mut by_counter = vec![0u64; m + 1];
        let (mut pe_min, mut pe_max, mut pe_sum, mut blocks) = (u32::MAX, 0u32, 0u64, 0u64);
        for meta in self.planes.iter().flat_map(|p| p.blocks.meta.iter()) {
            if meta.state == BlockState::Full {
                by_counter[meta.copyback_counter as usize] += 1;
            }
            pe_min = pe_min.min(meta.pe_cycles);
            pe_max = pe_max.max(meta.pe_cycles);
            pe_sum += u64::from(meta.pe_cycles);
            blocks += 1;
        }
        let (steady_start, steady) = match &self.steady_base {
            Some((t, base)) => (*t, self.counters.since(base)),
            None => (self.last_completion, Counters::default()),
        };
        Ok(RunResult {
            requests: self.total_requests,
            steady,
            first_arrival: self.first_arrival.unwrap_or(0),
            last_completion: self.last_completion,
            steady_start,
            steady_bytes: self.steady_bytes,
            read_latency: self.read_latency,
            write_latency: self.write_latency,
            migration_histogram: std::mem::take(&mut self.histogram),
            shadow: self.shadow,
            counter0_at_idle_end: std::mem::take(&mut self.counter0_samples),
            final_free_blocks: self.free_blocks(),
            full_blocks_by_counter: by_counter,
            pe_min,
            pe_max,
            pe_mean: pe_sum as f64 / blocks as f64,
            engine: self.engine.stats(),
            snapshots: std::mem::take(&mut self.snapshots),
            decisions: self.decisions.take().unwrap_or_default(),
            event_log: self.engine.take_log(),
            mapping_checks: self.mapping_checks,
            counters: self.counters,
        })
    }
}
