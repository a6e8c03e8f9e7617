//! Simulated verbs transport: RC queue pairs with one-sided read, write and
//! write-with-immediate, a minimal UD send/recv path, receive queues and
//! completion queues.
//!
//! Every work request walks the same staged pipeline, each stage a scheduled
//! event: doorbell and descriptor fetch, initiator PU pass, wire, target PU
//! pass, target DMA, wire back, initiator completion pass, CQE write. Each
//! stage's delay is charged to one of four latency buckets so an op's
//! breakdown always sums to its end-to-end latency.

use std::collections::{HashMap, VecDeque};

use thiserror::Error;

use crate::nic::{
    CacheOutcome, HostConfig, LatencyBreakdown, MemoryRegionMeta, Nic, NicError, Preset, StateKey,
};
use crate::sim::{Engine, EventKind, NodeId, SimEvent, SimTime};

pub type WrId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct QpId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CqId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transport {
    Rc,
    Ud,
}

#[derive(Debug, Error, PartialEq)]
pub enum VerbsError {
    #[error("unknown queue pair {0:?}")]
    UnknownQp(QpId),
    #[error("unknown completion queue {0:?}")]
    UnknownCq(CqId),
    #[error("queue pair {0:?} is not connected")]
    NotConnected(QpId),
    #[error("queue pair {0:?} is already connected")]
    AlreadyConnected(QpId),
    #[error("operation not supported on {0:?} transport")]
    WrongTransport(Transport),
    #[error("local buffer outside registered region {region} (offset {offset}, len {len})")]
    LocalProtection { region: u32, offset: u64, len: u64 },
    #[error("work request length must be at least one byte")]
    EmptyRequest,
    #[error(transparent)]
    Nic(#[from] NicError),
}

/// A buffer in the initiator's own registered memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalBuf {
    pub region: u32,
    pub offset: u64,
    pub len: u64,
}

/// Target of a one-sided operation in the peer's memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RemoteAddr {
    pub region: u32,
    pub offset: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Opcode {
    Read,
    Write,
    WriteImm,
    Send,
}

impl Opcode {
    fn one_sided(self) -> bool {
        !matches!(self, Opcode::Send)
    }
}

/// A posted work request.
#[derive(Debug, Clone, PartialEq)]
pub struct Wqe {
    pub wr_id: WrId,
    pub opcode: Opcode,
    pub local: LocalBuf,
    pub remote: Option<RemoteAddr>,
    pub imm: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompletionStatus {
    Ok,
    ProtectionError,
    ReceiverNotReady,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompletionKind {
    /// Completion of a locally posted work request.
    Send(Opcode),
    /// A message consumed one of this QP's posted receive buffers.
    Recv,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub wr_id: WrId,
    pub qp: QpId,
    pub kind: CompletionKind,
    pub status: CompletionStatus,
    pub byte_len: u64,
    pub imm: Option<u32>,
    pub timestamp: SimTime,
    /// UD receive: the sending QP.
    pub src_qp: Option<QpId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecvBuf {
    pub wr_id: WrId,
    pub buf: LocalBuf,
}

#[derive(Debug, Clone)]
pub struct QueuePair {
    pub id: QpId,
    pub node: usize,
    pub transport: Transport,
    pub peer: Option<QpId>,
    pub send_cq: CqId,
    pub recv_cq: CqId,
    local_index: u32,
    recv_queue: VecDeque<(u64, RecvBuf)>,
    outstanding: u64,
    last_target_arrival: SimTime,
    last_cqe: SimTime,
}

impl QueuePair {
    pub fn rq_depth(&self) -> usize {
        self.recv_queue.len()
    }
    pub fn outstanding(&self) -> u64 {
        self.outstanding
    }
}

#[derive(Debug, Default, Clone)]
pub struct CompletionQueue {
    pub node: usize,
    entries: VecDeque<Completion>,
    delivered: u64,
}

impl CompletionQueue {
    pub fn len(&self) -> usize {
        self.entries.len()
    }
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
    pub fn delivered(&self) -> u64 {
        self.delivered
    }
}

const PAGE: u64 = 4096;

/// Sparse byte store backing one registered region. Unwritten bytes read as zero.
#[derive(Debug, Clone)]
pub struct RegionData {
    pub meta: MemoryRegionMeta,
    pages: HashMap<u64, Box<[u8]>>,
}

impl RegionData {
    fn new(meta: MemoryRegionMeta) -> Self {
        RegionData {
            meta,
            pages: HashMap::new(),
        }
    }

    pub fn in_bounds(&self, offset: u64, len: u64) -> bool {
        offset
            .checked_add(len)
            .is_some_and(|end| end <= self.meta.length_bytes)
    }

    pub fn read(&self, offset: u64, len: u64) -> Vec<u8> {
        let mut out = vec![0u8; len as usize];
        let mut done = 0u64;
        while done < len {
            let at = offset + done;
            let page = at / PAGE;
            let in_page = at % PAGE;
            let n = (PAGE - in_page).min(len - done);
            if let Some(p) = self.pages.get(&page) {
                out[done as usize..(done + n) as usize]
                    .copy_from_slice(&p[in_page as usize..(in_page + n) as usize]);
            }
            done += n;
        }
        out
    }

    pub fn write(&mut self, offset: u64, bytes: &[u8]) {
        let len = bytes.len() as u64;
        let mut done = 0u64;
        while done < len {
            let at = offset + done;
            let page = at / PAGE;
            let in_page = at % PAGE;
            let n = (PAGE - in_page).min(len - done);
            let p = self
                .pages
                .entry(page)
                .or_insert_with(|| vec![0u8; PAGE as usize].into_boxed_slice());
            p[in_page as usize..(in_page + n) as usize]
                .copy_from_slice(&bytes[done as usize..(done + n) as usize]);
            done += n;
        }
    }
}

pub struct Node {
    pub nic: Nic,
    pub regions: Vec<RegionData>,
    qp_count: u32,
}

/// Host node and NIC ids are distinct dispatch targets.
pub fn host_target(node: usize) -> NodeId {
    (2 * node) as NodeId
}

pub fn nic_target(node: usize) -> NodeId {
    (2 * node + 1) as NodeId
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Fetched,
    InitiatorTx,
    TargetArrive,
    TargetDone,
    TargetDma,
    RecvCqe,
    InitiatorArrive,
    InitiatorCqe,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Fetched => "fetched",
            Stage::InitiatorTx => "initiator_tx",
            Stage::TargetArrive => "target_arrive",
            Stage::TargetDone => "target_done",
            Stage::TargetDma => "target_dma",
            Stage::RecvCqe => "recv_cqe",
            Stage::InitiatorArrive => "initiator_arrive",
            Stage::InitiatorCqe => "initiator_cqe",
        }
    }
}

#[derive(Debug, Clone)]
pub enum FabricEvent<U> {
    Verbs { stage: Stage, wr: WrId },
    Upper(U),
}

impl<U: EventKind> EventKind for FabricEvent<U> {
    fn kind(&self) -> &'static str {
        match self {
            FabricEvent::Verbs { stage, .. } => stage.name(),
            FabricEvent::Upper(u) => u.kind(),
        }
    }
}

/// Placeholder upper layer for fabrics driven directly through verbs.
#[derive(Debug, Clone)]
pub enum NoUpper {}

impl EventKind for NoUpper {
    fn kind(&self) -> &'static str {
        match *self {}
    }
}

const PCIE_CONST: usize = 0;
const PCIE_VAR: usize = 1;
const NET_CONST: usize = 2;
const NET_VAR: usize = 3;

struct InFlight {
    wqe: Wqe,
    qp: QpId,
    peer_qp: QpId,
    initiator: usize,
    target: usize,
    post_time: SimTime,
    buckets: [u64; 4],
    outcomes: Vec<CacheOutcome>,
    status: CompletionStatus,
    data: Option<Vec<u8>>,
    recv: Option<RecvBuf>,
}

impl InFlight {
    fn len(&self) -> u64 {
        self.wqe.local.len
    }
}

/// Finished work request with its measured latency split.
#[derive(Debug, Clone, PartialEq)]
pub struct OpRecord {
    pub wr_id: WrId,
    pub opcode: Opcode,
    pub payload_bytes: u64,
    pub post_time: SimTime,
    pub complete_time: SimTime,
    pub buckets: [u64; 4],
    pub outcomes: Vec<CacheOutcome>,
    pub status: CompletionStatus,
}

impl OpRecord {
    pub fn latency_ns(&self) -> u64 {
        self.complete_time.0 - self.post_time.0
    }

    pub fn breakdown(&self) -> LatencyBreakdown {
        LatencyBreakdown {
            pcie_const: self.buckets[PCIE_CONST] as f64,
            pcie_var: self.buckets[PCIE_VAR] as f64,
            net_const: self.buckets[NET_CONST] as f64,
            net_var: self.buckets[NET_VAR] as f64,
        }
    }
}

/// Aggregate op statistics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FabricStats {
    pub completed: u64,
    pub reads: u64,
    pub writes: u64,
    pub write_imms: u64,
    pub sends: u64,
    pub latency_sum_ns: u64,
    pub bucket_sums: [u64; 4],
    pub errors: u64,
}

impl FabricStats {
    pub fn mean_breakdown(&self) -> LatencyBreakdown {
        if self.completed == 0 {
            return LatencyBreakdown::default();
        }
        let n = self.completed as f64;
        LatencyBreakdown {
            pcie_const: self.bucket_sums[PCIE_CONST] as f64 / n,
            pcie_var: self.bucket_sums[PCIE_VAR] as f64 / n,
            net_const: self.bucket_sums[NET_CONST] as f64 / n,
            net_var: self.bucket_sums[NET_VAR] as f64 / n,
        }
    }

    pub fn mean_latency_ns(&self) -> f64 {
        if self.completed == 0 {
            0.0
        } else {
            self.latency_sum_ns as f64 / self.completed as f64
        }
    }
}

pub enum Step<U> {
    Idle,
    Verbs,
    Upper(SimEvent<U>),
}

/// The simulated cluster interconnect: nodes with NICs and memory, QPs, CQs,
/// and the event engine that drives them.
pub struct Fabric<U = NoUpper> {
    pub engine: Engine<FabricEvent<U>>,
    pub host: HostConfig,
    nodes: Vec<Node>,
    qps: Vec<QueuePair>,
    cqs: Vec<CompletionQueue>,
    inflight: HashMap<WrId, InFlight>,
    next_wr: WrId,
    next_recv_key: u64,
    /// Delay between the current instant and the doorbell of the next post;
    /// the host layer sets it to the CPU time already spent.
    pub post_delay: u64,
    notified: Vec<CqId>,
    stats: FabricStats,
    record_ops: bool,
    records: Vec<OpRecord>,
}

impl<U: EventKind> Fabric<U> {
    pub fn new(n_nodes: usize, preset: &Preset) -> Self {
        let nodes = (0..n_nodes)
            .map(|_| Node {
                nic: Nic::new(preset.nic.clone()),
                regions: Vec::new(),
                qp_count: 0,
            })
            .collect();
        Fabric {
            engine: Engine::new(),
            host: preset.host.clone(),
            nodes,
            qps: Vec::new(),
            cqs: Vec::new(),
            inflight: HashMap::new(),
            next_wr: 1,
            next_recv_key: 1,
            post_delay: 0,
            notified: Vec::new(),
            stats: FabricStats::default(),
            record_ops: false,
            records: Vec::new(),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn now(&self) -> SimTime {
        self.engine.now()
    }

    pub fn node(&self, n: usize) -> &Node {
        &self.nodes[n]
    }

    pub fn nic(&self, n: usize) -> &Nic {
        &self.nodes[n].nic
    }

    pub fn nic_mut(&mut self, n: usize) -> &mut Nic {
        &mut self.nodes[n].nic
    }

    pub fn stats(&self) -> &FabricStats {
        &self.stats
    }

    pub fn reset_stats(&mut self) {
        self.stats = FabricStats::default();
        self.records.clear();
        for n in &mut self.nodes {
            n.nic.cache.reset_counters();
        }
    }

    pub fn record_ops(&mut self, on: bool) {
        self.record_ops = on;
    }

    pub fn take_records(&mut self) -> Vec<OpRecord> {
        std::mem::take(&mut self.records)
    }

    pub fn take_notifications(&mut self) -> Vec<CqId> {
        std::mem::take(&mut self.notified)
    }

    pub fn register_region(
        &mut self,
        node: usize,
        length: u64,
        page_size: u64,
        is_physical_segment: bool,
    ) -> Result<MemoryRegionMeta, VerbsError> {
        let meta = self.nodes[node]
            .nic
            .register_region(length, page_size, is_physical_segment)?;
        self.nodes[node].regions.push(RegionData::new(meta.clone()));
        Ok(meta)
    }

    pub fn region(&self, node: usize, region: u32) -> Option<&RegionData> {
        self.nodes[node].regions.get(region as usize)
    }

    /// CPU-side load from the node's own memory.
    pub fn read_local(&self, node: usize, region: u32, offset: u64, len: u64) -> Vec<u8> {
        let r = &self.nodes[node].regions[region as usize];
        assert!(r.in_bounds(offset, len), "local read out of bounds");
        r.read(offset, len)
    }

    /// CPU-side store into the node's own memory.
    pub fn write_local(&mut self, node: usize, region: u32, offset: u64, bytes: &[u8]) {
        let r = &mut self.nodes[node].regions[region as usize];
        assert!(
            r.in_bounds(offset, bytes.len() as u64),
            "local write out of bounds"
        );
        r.write(offset, bytes);
    }

    pub fn create_cq(&mut self, node: usize) -> CqId {
        let id = CqId(self.cqs.len() as u32);
        self.cqs.push(CompletionQueue {
            node,
            ..Default::default()
        });
        id
    }

    pub fn create_qp(
        &mut self,
        node: usize,
        transport: Transport,
        send_cq: CqId,
        recv_cq: CqId,
    ) -> QpId {
        let id = QpId(self.qps.len() as u32);
        let n = &mut self.nodes[node];
        let local_index = n.qp_count;
        n.qp_count += 1;
        n.nic.add_qp();
        // Bringing the QP up writes its context through the NIC cache.
        n.nic
            .cache
            .install(StateKey::qp(id.0 as u64))
            .expect("cache holds at least one QP context");
        self.qps.push(QueuePair {
            id,
            node,
            transport,
            peer: None,
            send_cq,
            recv_cq,
            local_index,
            recv_queue: VecDeque::new(),
            outstanding: 0,
            last_target_arrival: SimTime::ZERO,
            last_cqe: SimTime::ZERO,
        });
        id
    }

    pub fn qp(&self, id: QpId) -> Result<&QueuePair, VerbsError> {
        self.qps.get(id.0 as usize).ok_or(VerbsError::UnknownQp(id))
    }

    pub fn connect(&mut self, a: QpId, b: QpId) -> Result<(), VerbsError> {
        for id in [a, b] {
            let qp = self.qp(id)?;
            if qp.transport != Transport::Rc {
                return Err(VerbsError::WrongTransport(qp.transport));
            }
            if qp.peer.is_some() {
                return Err(VerbsError::AlreadyConnected(id));
            }
        }
        self.qps[a.0 as usize].peer = Some(b);
        self.qps[b.0 as usize].peer = Some(a);
        Ok(())
    }

    pub fn post_recv(&mut self, qp: QpId, buf: RecvBuf) -> Result<(), VerbsError> {
        let node = self.qp(qp)?.node;
        self.check_local(node, &buf.buf)?;
        let key = self.next_recv_key;
        self.next_recv_key += 1;
        let nic = &mut self.nodes[node].nic;
        let entry = StateKey::recv_wqe(&nic.cfg, key);
        nic.cache.install(entry)?;
        nic.account_recv_posted(1);
        self.qps[qp.0 as usize].recv_queue.push_back((key, buf));
        Ok(())
    }

    pub fn poll_cq(&mut self, cq: CqId, max: usize) -> Result<Vec<Completion>, VerbsError> {
        let q = self
            .cqs
            .get_mut(cq.0 as usize)
            .ok_or(VerbsError::UnknownCq(cq))?;
        let n = max.min(q.entries.len());
        Ok(q.entries.drain(..n).collect())
    }

    pub fn cq(&self, cq: CqId) -> &CompletionQueue {
        &self.cqs[cq.0 as usize]
    }

    pub fn post_read(
        &mut self,
        qp: QpId,
        local: LocalBuf,
        remote: RemoteAddr,
    ) -> Result<WrId, VerbsError> {
        self.post_one_sided(qp, Opcode::Read, local, remote, None)
    }

    pub fn post_write(
        &mut self,
        qp: QpId,
        local: LocalBuf,
        remote: RemoteAddr,
    ) -> Result<WrId, VerbsError> {
        self.post_one_sided(qp, Opcode::Write, local, remote, None)
    }

    pub fn post_write_imm(
        &mut self,
        qp: QpId,
        local: LocalBuf,
        remote: RemoteAddr,
        imm: u32,
    ) -> Result<WrId, VerbsError> {
        self.post_one_sided(qp, Opcode::WriteImm, local, remote, Some(imm))
    }

    /// UD datagram send to `dest`; the payload lands in the receiver's posted buffer.
    pub fn post_send(&mut self, qp: QpId, dest: QpId, local: LocalBuf) -> Result<WrId, VerbsError> {
        let q = self.qp(qp)?;
        if q.transport != Transport::Ud {
            return Err(VerbsError::WrongTransport(q.transport));
        }
        let d = self.qp(dest)?;
        if d.transport != Transport::Ud {
            return Err(VerbsError::WrongTransport(d.transport));
        }
        self.post_common(qp, dest, Opcode::Send, local, None, None)
    }

    fn post_one_sided(
        &mut self,
        qp: QpId,
        opcode: Opcode,
        local: LocalBuf,
        remote: RemoteAddr,
        imm: Option<u32>,
    ) -> Result<WrId, VerbsError> {
        let q = self.qp(qp)?;
        if q.transport != Transport::Rc {
            return Err(VerbsError::WrongTransport(q.transport));
        }
        let peer = q.peer.ok_or(VerbsError::NotConnected(qp))?;
        self.post_common(qp, peer, opcode, local, Some(remote), imm)
    }

    fn check_local(&self, node: usize, buf: &LocalBuf) -> Result<(), VerbsError> {
        if buf.len == 0 {
            return Err(VerbsError::EmptyRequest);
        }
        let ok = self.nodes[node]
            .regions
            .get(buf.region as usize)
            .is_some_and(|r| r.in_bounds(buf.offset, buf.len));
        if ok {
            Ok(())
        } else {
            Err(VerbsError::LocalProtection {
                region: buf.region,
                offset: buf.offset,
                len: buf.len,
            })
        }
    }

    fn post_common(
        &mut self,
        qp: QpId,
        peer_qp: QpId,
        opcode: Opcode,
        local: LocalBuf,
        remote: Option<RemoteAddr>,
        imm: Option<u32>,
    ) -> Result<WrId, VerbsError> {
        let initiator = self.qps[qp.0 as usize].node;
        let target = self.qps[peer_qp.0 as usize].node;
        self.check_local(initiator, &local)?;
        let wr_id = self.next_wr;
        self.next_wr += 1;

        let nic = &mut self.nodes[initiator].nic;
        let wqe_key = StateKey::send_wqe(&nic.cfg, wr_id);
        nic.cache.install(wqe_key)?;
        nic.account_send_inflight(1);
        let fetch = nic.cfg.pcie_write_ns + nic.cfg.pcie_dma_rt_ns;
        self.qps[qp.0 as usize].outstanding += 1;

        let post_time = self.engine.now() + self.post_delay;
        let mut op = InFlight {
            wqe: Wqe {
                wr_id,
                opcode,
                local,
                remote,
                imm,
            },
            qp,
            peer_qp,
            initiator,
            target,
            post_time,
            buckets: [0; 4],
            outcomes: Vec::new(),
            status: CompletionStatus::Ok,
            data: None,
            recv: None,
        };
        op.buckets[PCIE_CONST] += fetch;
        self.inflight.insert(wr_id, op);
        self.engine.schedule(
            self.post_delay + fetch,
            nic_target(initiator),
            FabricEvent::Verbs {
                stage: Stage::Fetched,
                wr: wr_id,
            },
        );
        Ok(wr_id)
    }

    fn schedule_stage(&mut self, wr: WrId, node: usize, stage: Stage, delay: u64) {
        self.engine
            .schedule(delay, nic_target(node), FabricEvent::Verbs { stage, wr });
    }

    /// Handles engine events until one belonging to the upper layer is found.
    pub fn step(&mut self, limit: SimTime) -> Step<U> {
        match self.engine.pop_until(limit) {
            None => Step::Idle,
            Some(ev) => match ev.payload {
                FabricEvent::Verbs { stage, wr } => {
                    self.handle_stage(stage, wr);
                    Step::Verbs
                }
                FabricEvent::Upper(u) => Step::Upper(SimEvent {
                    fire_at: ev.fire_at,
                    seq: ev.seq,
                    target: ev.target,
                    payload: u,
                }),
            },
        }
    }

    fn handle_stage(&mut self, stage: Stage, wr: WrId) {
        match stage {
            Stage::Fetched => self.on_fetched(wr),
            Stage::InitiatorTx => self.on_initiator_tx(wr),
            Stage::TargetArrive => self.on_target_arrive(wr),
            Stage::TargetDone => self.on_target_done(wr),
            Stage::TargetDma => self.on_target_dma(wr),
            Stage::RecvCqe => self.on_recv_cqe(wr),
            Stage::InitiatorArrive => self.on_initiator_arrive(wr),
            Stage::InitiatorCqe => self.on_initiator_cqe(wr),
        }
    }

    fn on_fetched(&mut self, wr: WrId) {
        let now = self.engine.now();
        let op = self.inflight.get_mut(&wr).expect("unknown wr");
        let qp = &self.qps[op.qp.0 as usize];
        let nic = &mut self.nodes[op.initiator].nic;
        let region = nic
            .region(op.wqe.local.region)
            .expect("checked at post")
            .clone();
        let mut keys = vec![
            StateKey::qp(qp.id.0 as u64),
            StateKey::mpt(&nic.cfg, region.region_id),
        ];
        push_mtt_keys(
            &mut keys,
            &nic.cfg,
            &region,
            op.wqe.local.offset,
            op.wqe.local.len,
        );
        let mut work = nic.lookups(&keys, now, &mut op.outcomes);
        work.service_ns = nic.cfg.pu_service_ns;
        let slot = nic.pu_dispatch(qp.local_index, now, work);
        let mut delay = slot.done.0 - now.0;
        op.buckets[NET_CONST] += delay;
        if matches!(
            op.wqe.opcode,
            Opcode::Write | Opcode::WriteImm | Opcode::Send
        ) {
            let dma = nic.cfg.pcie_bytes_ns(op.len());
            op.buckets[PCIE_VAR] += dma;
            delay += dma;
        }
        let node = op.initiator;
        self.schedule_stage(wr, node, Stage::InitiatorTx, delay);
    }

    fn on_initiator_tx(&mut self, wr: WrId) {
        let now = self.engine.now();
        let op = self.inflight.get_mut(&wr).expect("unknown wr");
        let cfg = &self.nodes[op.initiator].nic.cfg;
        let mut delay = cfg.wire_prop_ns;
        op.buckets[NET_CONST] += cfg.wire_prop_ns;
        if op.wqe.opcode != Opcode::Read {
            let bytes = self.nodes[op.initiator].regions[op.wqe.local.region as usize]
                .read(op.wqe.local.offset, op.wqe.local.len);
            op.data = Some(bytes);
            let ser = cfg.wire_bytes_ns(op.len());
            op.buckets[NET_VAR] += ser;
            delay += ser;
        }
        // RC delivers in order per QP.
        let qp = &mut self.qps[op.qp.0 as usize];
        if qp.transport == Transport::Rc {
            let arrival = (now + delay).max(qp.last_target_arrival);
            let wait = arrival.0 - (now.0 + delay);
            op.buckets[NET_CONST] += wait;
            delay += wait;
            qp.last_target_arrival = arrival;
        }
        let target = op.target;
        let is_send = op.wqe.opcode == Opcode::Send;
        self.schedule_stage(wr, target, Stage::TargetArrive, delay);
        if is_send {
            // UD send completes once the datagram leaves the NIC.
            let initiator = self.inflight[&wr].initiator;
            self.engine.schedule(
                0,
                nic_target(initiator),
                FabricEvent::Verbs {
                    stage: Stage::InitiatorArrive,
                    wr: wr | SEND_LOCAL_FLAG,
                },
            );
        }
    }

    fn on_target_arrive(&mut self, wr: WrId) {
        let now = self.engine.now();
        let op = self.inflight.get_mut(&wr).expect("unknown wr");
        let target = op.target;
        let opcode = op.wqe.opcode;
        let len = op.len();

        // Resolve where the payload lands and check protection.
        let peer = op.peer_qp;
        let needs_recv = matches!(opcode, Opcode::WriteImm | Opcode::Send);
        let mut recv = None;
        if needs_recv {
            match self.qps[peer.0 as usize].recv_queue.pop_front() {
                Some(r) => recv = Some(r),
                None => op.status = CompletionStatus::ReceiverNotReady,
            }
        }
        let dest = match opcode {
            Opcode::Send => recv.map(|(_, r)| RemoteAddr {
                region: r.buf.region,
                offset: r.buf.offset,
            }),
            _ => op.wqe.remote,
        };
        let region = dest.and_then(|d| {
            self.nodes[target]
                .regions
                .get(d.region as usize)
                .filter(|r| {
                    let fits = r.in_bounds(d.offset, len);
                    let recv_fits =
                        recv.is_none_or(|(_, rb)| opcode != Opcode::Send || len <= rb.buf.len);
                    fits && recv_fits
                })
                .map(|r| r.meta.clone())
        });
        if op.status == CompletionStatus::Ok && region.is_none() {
            op.status = CompletionStatus::ProtectionError;
        }
        if op.status != CompletionStatus::Ok {
            // Put an unconsumed receive back at the head.
            if let Some(r) = recv {
                self.qps[peer.0 as usize].recv_queue.push_front(r);
            }
            let nak = self.nodes[target].nic.cfg.wire_prop_ns;
            op.buckets[NET_CONST] += nak;
            let initiator = op.initiator;
            self.schedule_stage(wr, initiator, Stage::InitiatorArrive, nak);
            return;
        }
        let region = region.expect("checked above");
        let dest = dest.expect("checked above");
        let nic = &mut self.nodes[target].nic;
        let mut keys = vec![
            StateKey::qp(peer.0 as u64),
            StateKey::mpt(&nic.cfg, region.region_id),
        ];
        push_mtt_keys(&mut keys, &nic.cfg, &region, dest.offset, len);
        if let Some((key, _)) = recv {
            keys.push(StateKey::recv_wqe(&nic.cfg, key));
        }
        let mut work = nic.lookups(&keys, now, &mut op.outcomes);
        if let Some((key, _)) = recv {
            nic.cache.remove(&StateKey::recv_wqe(&nic.cfg, key));
            nic.account_recv_posted(-1);
        }
        work.service_ns = nic.cfg.pu_service_ns;
        let slot = nic.pu_dispatch(self.qps[peer.0 as usize].local_index, now, work);
        let delay = slot.done.0 - now.0;
        op.buckets[NET_CONST] += delay;
        op.recv = recv.map(|(_, r)| r);
        if opcode == Opcode::Send {
            op.wqe.remote = Some(dest);
        }
        self.schedule_stage(wr, target, Stage::TargetDone, delay);
    }

    fn on_target_done(&mut self, wr: WrId) {
        let op = self.inflight.get_mut(&wr).expect("unknown wr");
        let cfg = &self.nodes[op.target].nic.cfg;
        let dma = cfg.pcie_bytes_ns(op.len());
        op.buckets[PCIE_VAR] += dma;
        let mut delay = dma;
        if op.wqe.opcode == Opcode::Read {
            op.buckets[PCIE_CONST] += cfg.pcie_dma_rt_ns;
            delay += cfg.pcie_dma_rt_ns;
        }
        let target = op.target;
        self.schedule_stage(wr, target, Stage::TargetDma, delay);
    }

    fn on_target_dma(&mut self, wr: WrId) {
        let op = self.inflight.get_mut(&wr).expect("unknown wr");
        let target = op.target;
        let dest = op.wqe.remote.expect("resolved at arrival");
        let cfg = self.nodes[target].nic.cfg.clone();
        match op.wqe.opcode {
            Opcode::Read => {
                let bytes =
                    self.nodes[target].regions[dest.region as usize].read(dest.offset, op.len());
                op.data = Some(bytes);
            }
            _ => {
                let bytes = op.data.as_ref().expect("payload captured at tx");
                self.nodes[target].regions[dest.region as usize].write(dest.offset, bytes);
            }
        }
        let mut delay = cfg.wire_prop_ns;
        op.buckets[NET_CONST] += cfg.wire_prop_ns;
        if op.wqe.opcode == Opcode::Read {
            let ser = cfg.wire_bytes_ns(op.len());
            op.buckets[NET_VAR] += ser;
            delay += ser;
        }
        let initiator = op.initiator;
        let notify = matches!(op.wqe.opcode, Opcode::WriteImm | Opcode::Send);
        let is_send = op.wqe.opcode == Opcode::Send;
        if notify {
            self.schedule_stage(wr, target, Stage::RecvCqe, cfg.pcie_write_ns);
        }
        if !is_send {
            self.schedule_stage(wr, initiator, Stage::InitiatorArrive, delay);
        }
    }

    fn on_recv_cqe(&mut self, wr: WrId) {
        let now = self.engine.now();
        let op = self.inflight.get_mut(&wr).expect("unknown wr");
        let recv = op.recv.expect("recv consumed at arrival");
        let peer = &self.qps[op.peer_qp.0 as usize];
        let c = Completion {
            wr_id: recv.wr_id,
            qp: peer.id,
            kind: CompletionKind::Recv,
            status: CompletionStatus::Ok,
            byte_len: op.wqe.local.len,
            imm: op.wqe.imm,
            timestamp: now,
            src_qp: (op.wqe.opcode == Opcode::Send).then_some(op.qp),
        };
        let cq = peer.recv_cq;
        if op.wqe.opcode == Opcode::Send {
            // UD sends never hear back; retire the op once it has been delivered.
            if let Some(op) = self.inflight.remove(&wr) {
                self.finish_record(op, now);
            }
        }
        self.deliver(cq, c);
    }

    fn on_initiator_arrive(&mut self, wr_raw: WrId) {
        let now = self.engine.now();
        let local_send = wr_raw & SEND_LOCAL_FLAG != 0;
        let wr = wr_raw & !SEND_LOCAL_FLAG;
        let op = self.inflight.get_mut(&wr).expect("unknown wr");
        let initiator = op.initiator;
        let qp = &self.qps[op.qp.0 as usize];
        let nic = &mut self.nodes[initiator].nic;
        let key = StateKey::send_wqe(&nic.cfg, wr);
        let mut outcomes = Vec::new();
        let work = nic.lookups(&[key], now, &mut outcomes);
        nic.cache.remove(&key);
        nic.account_send_inflight(-1);
        let slot = nic.pu_dispatch(qp.local_index, now, work);
        let mut delay = slot.done.0 - now.0;
        if !local_send {
            op.outcomes.extend(outcomes);
            op.buckets[NET_CONST] += delay;
        }
        if op.wqe.opcode == Opcode::Read && op.status == CompletionStatus::Ok {
            let dma = nic.cfg.pcie_bytes_ns(op.len());
            op.buckets[PCIE_VAR] += dma;
            delay += dma;
        }
        let cqe = nic.cfg.pcie_write_ns;
        if !local_send {
            op.buckets[PCIE_CONST] += cqe;
        }
        delay += cqe;
        let qp = &mut self.qps[op.qp.0 as usize];
        let at = (now + delay).max(qp.last_cqe);
        if !local_send {
            op.buckets[NET_CONST] += at.0 - (now.0 + delay);
        }
        qp.last_cqe = at;
        self.engine.schedule_at(
            at,
            nic_target(initiator),
            FabricEvent::Verbs {
                stage: Stage::InitiatorCqe,
                wr: wr_raw,
            },
        );
    }

    fn on_initiator_cqe(&mut self, wr_raw: WrId) {
        let now = self.engine.now();
        let local_send = wr_raw & SEND_LOCAL_FLAG != 0;
        let wr = wr_raw & !SEND_LOCAL_FLAG;
        let (cq, c) = {
            let op = self.inflight.get(&wr);
            let op = match op {
                Some(op) => op,
                // A UD op may already be retired by its receive side.
                None if local_send => {
                    return;
                }
                None => panic!("unknown wr"),
            };
            let qp = &self.qps[op.qp.0 as usize];
            (
                qp.send_cq,
                Completion {
                    wr_id: wr,
                    qp: op.qp,
                    kind: CompletionKind::Send(op.wqe.opcode),
                    status: op.status,
                    byte_len: op.len(),
                    imm: None,
                    timestamp: now,
                    src_qp: None,
                },
            )
        };
        self.qps[c.qp.0 as usize].outstanding -= 1;
        if !local_send {
            let op = self.inflight.remove(&wr).expect("present");
            if op.wqe.opcode == Opcode::Read && op.status == CompletionStatus::Ok {
                let data = op.data.as_ref().expect("read data");
                let l = op.wqe.local;
                self.nodes[op.initiator].regions[l.region as usize].write(l.offset, data);
            }
            self.finish_record(op, now);
        }
        self.deliver(cq, c);
    }

    fn finish_record(&mut self, op: InFlight, now: SimTime) {
        let s = &mut self.stats;
        s.completed += 1;
        match op.wqe.opcode {
            Opcode::Read => s.reads += 1,
            Opcode::Write => s.writes += 1,
            Opcode::WriteImm => s.write_imms += 1,
            Opcode::Send => s.sends += 1,
        }
        if op.status != CompletionStatus::Ok {
            s.errors += 1;
        }
        let latency = now.0 - op.post_time.0;
        if op.wqe.opcode.one_sided() {
            debug_assert_eq!(op.buckets.iter().sum::<u64>(), latency, "bucket accounting");
        }
        s.latency_sum_ns += latency;
        for (acc, b) in s.bucket_sums.iter_mut().zip(op.buckets) {
            *acc += b;
        }
        if self.record_ops {
            self.records.push(OpRecord {
                wr_id: op.wqe.wr_id,
                opcode: op.wqe.opcode,
                payload_bytes: op.len(),
                post_time: op.post_time,
                complete_time: now,
                buckets: op.buckets,
                outcomes: op.outcomes,
                status: op.status,
            });
        }
    }

    fn deliver(&mut self, cq: CqId, c: Completion) {
        let q = &mut self.cqs[cq.0 as usize];
        q.entries.push_back(c);
        q.delivered += 1;
        self.notified.push(cq);
    }

    pub fn inflight(&self) -> usize {
        self.inflight.len()
    }
}

const SEND_LOCAL_FLAG: u64 = 1 << 63;

fn push_mtt_keys(
    keys: &mut Vec<StateKey>,
    cfg: &crate::nic::NicConfig,
    region: &MemoryRegionMeta,
    offset: u64,
    len: u64,
) {
    let first = region.first_page(offset);
    for p in 0..region.pages_touched(offset, len) {
        keys.push(StateKey::mtt(cfg, region.region_id, first + p));
    }
}

impl Fabric<NoUpper> {
    /// Drives the fabric until `limit`, returning the number of events handled.
    pub fn run_until(&mut self, limit: SimTime) -> u64 {
        let mut n = 0;
        loop {
            match self.step(limit) {
                Step::Idle => break,
                Step::Verbs => n += 1,
                Step::Upper(ev) => match ev.payload {},
            }
        }
        self.engine.advance_to(limit);
        n
    }

    /// Runs until no events remain.
    pub fn run_to_quiescence(&mut self) -> u64 {
        let mut n = 0;
        loop {
            match self.step(SimTime(u64::MAX)) {
                Step::Idle => break,
                Step::Verbs => n += 1,
                Step::Upper(ev) => match ev.payload {},
            }
        }
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair() -> (Fabric, QpId, QpId, CqId, CqId) {
        let mut f: Fabric = Fabric::new(2, &Preset::default());
        let c0 = f.create_cq(0);
        let c1 = f.create_cq(1);
        let a = f.create_qp(0, Transport::Rc, c0, c0);
        let b = f.create_qp(1, Transport::Rc, c1, c1);
        f.connect(a, b).unwrap();
        f.register_region(0, 1 << 20, 4096, false).unwrap();
        f.register_region(1, 1 << 20, 4096, false).unwrap();
        (f, a, b, c0, c1)
    }

    fn buf(offset: u64, len: u64) -> LocalBuf {
        LocalBuf {
            region: 0,
            offset,
            len,
        }
    }

    #[test]
    fn read_returns_written_bytes() {
        let (mut f, a, _b, c0, _) = pair();
        f.write_local(1, 0, 128, &[7u8; 64]);
        f.post_read(
            a,
            buf(0, 64),
            RemoteAddr {
                region: 0,
                offset: 128,
            },
        )
        .unwrap();
        f.run_to_quiescence();
        let cs = f.poll_cq(c0, 10).unwrap();
        assert_eq!(cs.len(), 1);
        assert_eq!(cs[0].status, CompletionStatus::Ok);
        assert_eq!(f.read_local(0, 0, 0, 64), vec![7u8; 64]);
    }

    #[test]
    fn read_past_region_end_is_protection_error() {
        let (mut f, a, _b, c0, _) = pair();
        f.write_local(0, 0, 0, &[1u8; 8]);
        f.post_read(
            a,
            buf(0, 64),
            RemoteAddr {
                region: 0,
                offset: (1 << 20) - 32,
            },
        )
        .unwrap();
        f.run_to_quiescence();
        let cs = f.poll_cq(c0, 10).unwrap();
        assert_eq!(cs[0].status, CompletionStatus::ProtectionError);
        assert_eq!(f.read_local(0, 0, 0, 8), vec![1u8; 8], "no data transfer");
    }

    #[test]
    fn write_imm_notifies_peer() {
        let (mut f, a, b, c0, c1) = pair();
        f.post_recv(
            b,
            RecvBuf {
                wr_id: 99,
                buf: buf(0, 8),
            },
        )
        .unwrap();
        f.write_local(0, 0, 0, &[3u8; 128]);
        f.post_write_imm(
            a,
            buf(0, 128),
            RemoteAddr {
                region: 0,
                offset: 4096,
            },
            7,
        )
        .unwrap();
        f.run_to_quiescence();
        let recv = f.poll_cq(c1, 10).unwrap();
        assert_eq!(recv.len(), 1);
        assert_eq!(recv[0].imm, Some(7));
        assert_eq!(recv[0].byte_len, 128);
        assert_eq!(recv[0].wr_id, 99);
        assert_eq!(f.poll_cq(c0, 10).unwrap()[0].status, CompletionStatus::Ok);
        assert_eq!(f.read_local(1, 0, 4096, 128), vec![3u8; 128]);
    }

    #[test]
    fn write_imm_without_recv_is_rejected() {
        let (mut f, a, _b, c0, c1) = pair();
        f.write_local(0, 0, 0, &[3u8; 64]);
        f.post_write_imm(
            a,
            buf(0, 64),
            RemoteAddr {
                region: 0,
                offset: 0,
            },
            1,
        )
        .unwrap();
        f.run_to_quiescence();
        assert_eq!(
            f.poll_cq(c0, 10).unwrap()[0].status,
            CompletionStatus::ReceiverNotReady
        );
        assert!(f.poll_cq(c1, 10).unwrap().is_empty());
        assert_eq!(f.read_local(1, 0, 0, 64), vec![0u8; 64]);
    }

    #[test]
    fn connect_rules() {
        let mut f: Fabric = Fabric::new(2, &Preset::default());
        let c = f.create_cq(0);
        let a = f.create_qp(0, Transport::Rc, c, c);
        let b = f.create_qp(1, Transport::Rc, c, c);
        let u = f.create_qp(1, Transport::Ud, c, c);
        assert_eq!(
            f.connect(a, u),
            Err(VerbsError::WrongTransport(Transport::Ud))
        );
        f.connect(a, b).unwrap();
        assert_eq!(f.connect(a, b), Err(VerbsError::AlreadyConnected(a)));
    }

    #[test]
    fn unconnected_rc_qp_cannot_post() {
        let mut f: Fabric = Fabric::new(1, &Preset::default());
        let c = f.create_cq(0);
        let a = f.create_qp(0, Transport::Rc, c, c);
        f.register_region(0, 4096, 4096, false).unwrap();
        assert_eq!(
            f.post_read(
                a,
                buf(0, 8),
                RemoteAddr {
                    region: 0,
                    offset: 0
                }
            ),
            Err(VerbsError::NotConnected(a))
        );
    }

    #[test]
    fn poll_empty_and_recv_depth() {
        let (mut f, a, b, _c0, c1) = pair();
        assert!(f.poll_cq(c1, 4).unwrap().is_empty());
        for i in 0..3 {
            f.post_recv(
                b,
                RecvBuf {
                    wr_id: i,
                    buf: buf(0, 8),
                },
            )
            .unwrap();
        }
        for _ in 0..2 {
            f.post_write_imm(
                a,
                buf(0, 8),
                RemoteAddr {
                    region: 0,
                    offset: 0,
                },
                0,
            )
            .unwrap();
        }
        f.run_to_quiescence();
        assert_eq!(f.qp(b).unwrap().rq_depth(), 1);
        let got = f.poll_cq(c1, 10).unwrap();
        assert_eq!(got.iter().map(|c| c.wr_id).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn one_sided_read_never_targets_remote_host() {
        let (mut f, a, _b, _c0, _) = pair();
        f.engine.capture_log();
        f.post_read(
            a,
            buf(0, 64),
            RemoteAddr {
                region: 0,
                offset: 0,
            },
        )
        .unwrap();
        f.run_to_quiescence();
        let host1 = host_target(1).to_string();
        for line in f.engine.take_log() {
            let target = line.split(',').nth(2).unwrap();
            assert_ne!(target, host1, "{line}");
        }
    }

    #[test]
    fn ud_send_lands_in_recv_buffer() {
        let mut f: Fabric = Fabric::new(2, &Preset::default());
        let c0 = f.create_cq(0);
        let c1 = f.create_cq(1);
        let a = f.create_qp(0, Transport::Ud, c0, c0);
        let b = f.create_qp(1, Transport::Ud, c1, c1);
        f.register_region(0, 4096, 4096, false).unwrap();
        f.register_region(1, 4096, 4096, false).unwrap();
        f.post_recv(
            b,
            RecvBuf {
                wr_id: 5,
                buf: buf(256, 64),
            },
        )
        .unwrap();
        f.write_local(0, 0, 0, &[9u8; 32]);
        f.post_send(a, b, buf(0, 32)).unwrap();
        f.run_to_quiescence();
        let got = f.poll_cq(c1, 4).unwrap();
        assert_eq!(got[0].src_qp, Some(a));
        assert_eq!(f.read_local(1, 0, 256, 32), vec![9u8; 32]);
        assert_eq!(f.poll_cq(c0, 4).unwrap().len(), 1);
        assert_eq!(f.inflight(), 0);
    }

    #[test]
    fn buckets_sum_to_latency() {
        let (mut f, a, b, _c0, _) = pair();
        f.record_ops(true);
        f.post_recv(
            b,
            RecvBuf {
                wr_id: 1,
                buf: buf(0, 8),
            },
        )
        .unwrap();
        f.post_read(
            a,
            buf(0, 4096),
            RemoteAddr {
                region: 0,
                offset: 100,
            },
        )
        .unwrap();
        f.post_write(
            a,
            buf(0, 300),
            RemoteAddr {
                region: 0,
                offset: 0,
            },
        )
        .unwrap();
        f.post_write_imm(
            a,
            buf(0, 64),
            RemoteAddr {
                region: 0,
                offset: 0,
            },
            1,
        )
        .unwrap();
        f.run_to_quiescence();
        let recs = f.take_records();
        assert_eq!(recs.len(), 3);
        for r in recs {
            assert_eq!(r.buckets.iter().sum::<u64>(), r.latency_ns());
        }
    }
}
