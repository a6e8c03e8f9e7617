//! Host-side dataplane: per-thread event loops, coroutine scheduling, a
//! write-with-immediate RPC pipeline, remote reads, and the hybrid
//! read-then-RPC lookup used for read sets.
//!
//! Coroutines are ordinary `async` blocks. A coroutine suspends only inside
//! [`Ctx::remote_read`] and [`Ctx::rpc`]; the runtime polls it again once the
//! completion it waits for has been processed by its thread. Each simulated
//! thread is a serial CPU: completions are handled one at a time and every
//! handler invocation or coroutine resume occupies the thread for a fixed
//! cost, delaying any verbs it posts by the same amount.

use std::any::Any;
use std::cell::{Ref, RefCell, RefMut};
use std::collections::{BTreeMap, HashMap, VecDeque};
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::task::{Context, Poll, Waker};

use thiserror::Error;

use crate::nic::{MemoryRegionMeta, Preset};
use crate::sim::{EventKind, SeededRng, SimTime};
use crate::verbs::{
    host_target, CompletionKind, CompletionStatus, CqId, Fabric, FabricEvent, LocalBuf, Opcode,
    QpId, RecvBuf, RemoteAddr, Step, Transport, VerbsError, WrId,
};

pub const RPC_HEADER_BYTES: usize = 16;
/// Region id of the RPC buffer region every node registers first.
pub const RPC_REGION: u32 = 0;
const SCRATCH_BYTES: u64 = 8192;
const READ_BUF_BYTES: u64 = 4096;

#[derive(Debug, Error, PartialEq)]
pub enum DataplaneError {
    #[error("object {0} already has a handler on node {1}")]
    DuplicateHandler(u16, usize),
    #[error("no handler for object {0} on node {1}")]
    NoHandler(u16, usize),
    #[error("thread {thread} on node {node} already runs {max} coroutines")]
    TooManyCoroutines {
        node: usize,
        thread: usize,
        max: usize,
    },
    #[error("remote read failed: {0:?}")]
    ReadFailed(CompletionStatus),
    #[error("message of {0} bytes exceeds the {1}-byte RPC buffer")]
    MessageTooLarge(usize, u64),
    #[error("read of {0} bytes exceeds the coroutine read buffer")]
    ReadTooLarge(u64),
    #[error("invalid dataplane configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Verbs(#[from] VerbsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum RpcOpcode {
    Read = 1,
    LockRead = 2,
    UpdateUnlock = 3,
    Insert = 4,
    Delete = 5,
    Unlock = 6,
    Reply = 7,
    Echo = 8,
}

impl RpcOpcode {
    pub fn from_u8(v: u8) -> Option<Self> {
        use RpcOpcode::*;
        Some(match v {
            1 => Read,
            2 => LockRead,
            3 => UpdateUnlock,
            4 => Insert,
            5 => Delete,
            6 => Unlock,
            7 => Reply,
            8 => Echo,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum RpcStatus {
    Ok = 0,
    NotFound = 1,
    LockBusy = 2,
    NoHandler = 3,
    BadRequest = 4,
    Exists = 5,
}

impl RpcStatus {
    pub fn from_u8(v: u8) -> Self {
        match v {
            0 => RpcStatus::Ok,
            1 => RpcStatus::NotFound,
            2 => RpcStatus::LockBusy,
            3 => RpcStatus::NoHandler,
            5 => RpcStatus::Exists,
            _ => RpcStatus::BadRequest,
        }
    }
}

/// Fixed 16-byte message header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RpcHeader {
    pub sender: u16,
    pub thread: u16,
    pub coroutine: u32,
    pub opcode: RpcOpcode,
    pub status: RpcStatus,
    pub object_id: u16,
    pub request_id: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RpcMessage {
    pub header: RpcHeader,
    pub payload: Vec<u8>,
}

impl RpcMessage {
    pub fn encode(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(RPC_HEADER_BYTES + self.payload.len());
        out.extend_from_slice(&h.sender.to_le_bytes());
        out.extend_from_slice(&h.thread.to_le_bytes());
        out.extend_from_slice(&h.coroutine.to_le_bytes());
        out.push(h.opcode as u8);
        out.push(h.status as u8);
        out.extend_from_slice(&h.object_id.to_le_bytes());
        out.extend_from_slice(&h.request_id.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Decodes `bytes`; the payload is everything after the header.
    pub fn decode(bytes: &[u8]) -> Option<RpcMessage> {
        if bytes.len() < RPC_HEADER_BYTES {
            return None;
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        Some(RpcMessage {
            header: RpcHeader {
                sender: u16_at(0),
                thread: u16_at(2),
                coroutine: u32_at(4),
                opcode: RpcOpcode::from_u8(bytes[8])?,
                status: RpcStatus::from_u8(bytes[9]),
                object_id: u16_at(10),
                request_id: u32_at(12),
            },
            payload: bytes[RPC_HEADER_BYTES..].to_vec(),
        })
    }

    pub fn reply(&self, status: RpcStatus, payload: Vec<u8>) -> RpcMessage {
        RpcMessage {
            header: RpcHeader {
                opcode: RpcOpcode::Reply,
                status,
                ..self.header
            },
            payload,
        }
    }
}

/// Address of an object in a node's registered memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RemoteLoc {
    pub node: usize,
    pub region: u32,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LookupSource {
    Read(RemoteLoc),
    Rpc { node: usize, status: RpcStatus },
}

/// Bytes handed to `lookup_end`, tagged with how they were obtained.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LookupBuffer {
    pub bytes: Vec<u8>,
    pub source: LookupSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReadPath {
    ReadOnly,
    ReadThenRpc,
    RpcOnly,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadItem {
    pub buffer: LookupBuffer,
    pub path: ReadPath,
    pub found: bool,
    /// One-sided reads this lookup issued.
    pub reads: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PathCounters {
    pub read_only: u64,
    pub read_then_rpc: u64,
    pub rpc_only: u64,
    pub reads_issued: u64,
    pub read_rpcs_issued: u64,
    pub not_found: u64,
}

impl PathCounters {
    pub fn add(&mut self, o: &PathCounters) {
        self.read_only += o.read_only;
        self.read_then_rpc += o.read_then_rpc;
        self.rpc_only += o.rpc_only;
        self.reads_issued += o.reads_issued;
        self.read_rpcs_issued += o.read_rpcs_issued;
        self.not_found += o.not_found;
    }

    pub fn items(&self) -> u64 {
        self.read_only + self.read_then_rpc + self.rpc_only
    }
}

/// CPU-side access to one node's registered memory, handed to RPC handlers.
pub struct NodeMemory<'a> {
    fabric: &'a mut Fabric<HostEvent>,
    node: usize,
}

impl NodeMemory<'_> {
    pub fn node(&self) -> usize {
        self.node
    }

    pub fn now(&self) -> SimTime {
        self.fabric.now()
    }

    pub fn read(&self, region: u32, offset: u64, len: u64) -> Vec<u8> {
        self.fabric.read_local(self.node, region, offset, len)
    }

    pub fn write(&mut self, region: u32, offset: u64, bytes: &[u8]) {
        self.fabric.write_local(self.node, region, offset, bytes)
    }

    pub fn register_region(
        &mut self,
        length: u64,
        page_size: u64,
        physical: bool,
    ) -> Result<MemoryRegionMeta, VerbsError> {
        self.fabric
            .register_region(self.node, length, page_size, physical)
    }
}

/// Per-node callbacks of a remote data structure.
pub trait Callbacks {
    /// Node owning `key`.
    fn home(&self, key: u64) -> usize;
    /// Best guess for where `key` lives, or `None` if there is no guess.
    fn lookup_start(&mut self, key: u64) -> Option<RemoteLoc>;
    /// Whether `buffer` holds a valid copy of `key`; may update client caches.
    fn lookup_end(&mut self, key: u64, buffer: &LookupBuffer) -> bool;
    /// Serves a request against the node's local memory.
    fn rpc_handler(&mut self, mem: &mut NodeMemory<'_>, request: &RpcMessage) -> RpcMessage;
    /// Payload of the READ request for `key`.
    fn read_request(&self, key: u64) -> Vec<u8> {
        key.to_le_bytes().to_vec()
    }
    fn as_any(&mut self) -> &mut dyn Any;
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataplaneConfig {
    pub threads_per_node: usize,
    pub coroutines_per_thread: usize,
    /// Receive slots, and therefore outstanding RPC credits, per connection.
    pub recv_slots: usize,
    /// Size of each RPC buffer slot.
    pub msg_buffer_bytes: u64,
    /// Requests shorter than this are zero-padded on the wire.
    pub min_request_bytes: u64,
    /// Number of machines whose connections and buffers each node allocates;
    /// defaults to the physical node count.
    pub virtual_nodes: Option<usize>,
    /// Failed one-sided reads tolerated before falling back to an RPC.
    pub rr_fallback_after: u32,
}

impl Default for DataplaneConfig {
    fn default() -> Self {
        DataplaneConfig {
            threads_per_node: 1,
            coroutines_per_thread: 32,
            recv_slots: 32,
            msg_buffer_bytes: 256,
            min_request_bytes: 128,
            virtual_nodes: None,
            rr_fallback_after: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub enum HostEvent {
    ThreadPoll { node: usize, thread: usize },
    Wake { coro: usize },
}

impl EventKind for HostEvent {
    fn kind(&self) -> &'static str {
        match self {
            HostEvent::ThreadPoll { .. } => "thread_poll",
            HostEvent::Wake { .. } => "wake",
        }
    }
}

enum Outcome {
    Read(Result<Vec<u8>, CompletionStatus>),
    Reply(RpcMessage),
    Credit(u32),
}

#[derive(Default)]
struct CoroSlot {
    result: Option<Outcome>,
    request_id: u32,
    awaiting_request: Option<u32>,
    done: bool,
}

struct ThreadState {
    node: usize,
    thread: usize,
    cq: CqId,
    busy_until: SimTime,
    poll_scheduled: bool,
    ready: VecDeque<usize>,
    cqes: u64,
    handler_calls: u64,
    busy_ns: u64,
}

struct ClientConn {
    qp: QpId,
    server_index: usize,
    free_slots: Vec<u32>,
    waiters: VecDeque<usize>,
}

struct ServerConn {
    qp: QpId,
    peer: usize,
    peer_client_index: usize,
}

#[derive(Clone, Copy)]
enum Role {
    Client { node: usize, index: usize },
    Server { node: usize, index: usize },
}

struct HostNode {
    clients: Vec<ClientConn>,
    servers: Vec<ServerConn>,
    /// Client connection indexes per (thread, physical target).
    routes: Vec<BTreeMap<usize, Vec<usize>>>,
    handlers: BTreeMap<u16, Box<dyn Callbacks>>,
    reply_inbox_base: u64,
    outbox_base: u64,
    scratch_base: u64,
}

/// Shared simulation state: fabric plus host-side bookkeeping.
pub struct World {
    pub fabric: Fabric<HostEvent>,
    pub cfg: DataplaneConfig,
    hosts: Vec<HostNode>,
    threads: Vec<ThreadState>,
    coros: Vec<CoroSlot>,
    read_waiters: HashMap<WrId, usize>,
    roles: Vec<Option<Role>>,
    rngs: Vec<SeededRng>,
    paths: PathCounters,
    rpcs_sent: u64,
    local_ops: u64,
}

impl World {
    fn coros_per_node(&self) -> usize {
        self.cfg.threads_per_node * self.cfg.coroutines_per_thread
    }

    fn coro_id(&self, node: usize, thread: usize, local: usize) -> usize {
        node * self.coros_per_node() + thread * self.cfg.coroutines_per_thread + local
    }

    fn coro_place(&self, cid: usize) -> (usize, usize, usize) {
        let per_node = self.coros_per_node();
        let node = cid / per_node;
        let rest = cid % per_node;
        (
            node,
            rest / self.cfg.coroutines_per_thread,
            rest % self.cfg.coroutines_per_thread,
        )
    }

    fn thread_index(&self, node: usize, thread: usize) -> usize {
        node * self.cfg.threads_per_node + thread
    }

    fn slot_offset(&self, base: u64, conn: usize, slot: u32) -> u64 {
        base + (conn as u64 * self.cfg.recv_slots as u64 + slot as u64) * self.cfg.msg_buffer_bytes
    }

    fn scratch(&self, cid: usize) -> u64 {
        let (node, _, _) = self.coro_place(cid);
        let local = cid - node * self.coros_per_node();
        self.hosts[node].scratch_base + local as u64 * SCRATCH_BYTES
    }

    pub fn paths(&self) -> PathCounters {
        self.paths
    }

    pub fn rpcs_sent(&self) -> u64 {
        self.rpcs_sent
    }

    pub fn local_ops(&self) -> u64 {
        self.local_ops
    }

    pub fn handler_calls(&self) -> u64 {
        self.threads.iter().map(|t| t.handler_calls).sum()
    }

    pub fn cqes_processed(&self) -> u64 {
        self.threads.iter().map(|t| t.cqes).sum()
    }

    /// Fraction of elapsed time each host thread spent busy, averaged.
    pub fn thread_utilization(&self, elapsed_ns: u64) -> f64 {
        if elapsed_ns == 0 || self.threads.is_empty() {
            return 0.0;
        }
        let busy: u64 = self.threads.iter().map(|t| t.busy_ns).sum();
        busy as f64 / (elapsed_ns as f64 * self.threads.len() as f64)
    }

    /// RC connections allocated on each node.
    pub fn connections_per_node(&self) -> usize {
        self.hosts
            .first()
            .map_or(0, |h| h.clients.len() + h.servers.len())
    }

    /// Bytes of RPC buffers registered on each node.
    pub fn rpc_buffer_bytes(&self) -> u64 {
        self.hosts.first().map_or(0, |h| h.scratch_base)
    }

    pub fn handler_mut<T: 'static>(&mut self, node: usize, object: u16) -> Option<&mut T> {
        self.hosts[node]
            .handlers
            .get_mut(&object)
            .and_then(|h| h.as_any().downcast_mut::<T>())
    }

    /// Runs `f` on a node's handler together with that node's memory.
    pub fn with_handler<T: 'static, R>(
        &mut self,
        node: usize,
        object: u16,
        f: impl FnOnce(&mut T, &mut NodeMemory<'_>) -> R,
    ) -> R {
        let World { fabric, hosts, .. } = self;
        let h = hosts[node]
            .handlers
            .get_mut(&object)
            .and_then(|h| h.as_any().downcast_mut::<T>())
            .expect("handler of the requested type");
        let mut mem = NodeMemory { fabric, node };
        f(h, &mut mem)
    }

    pub fn node_memory(&mut self, node: usize) -> NodeMemory<'_> {
        NodeMemory {
            fabric: &mut self.fabric,
            node,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.hosts.len()
    }

    fn schedule_poll(&mut self, ti: usize) {
        let t = &mut self.threads[ti];
        if t.poll_scheduled {
            return;
        }
        t.poll_scheduled = true;
        let at = t.busy_until.max(self.fabric.now());
        let ev = HostEvent::ThreadPoll {
            node: t.node,
            thread: t.thread,
        };
        self.fabric
            .engine
            .schedule_at(at, host_target(t.node), FabricEvent::Upper(ev));
    }

    /// Marks the thread busy for `ns` starting now (or when it frees up) and
    /// delays the posts of the current step accordingly.
    fn charge(&mut self, ti: usize, ns: u64) {
        let now = self.fabric.now();
        let t = &mut self.threads[ti];
        let start = t.busy_until.max(now);
        t.busy_until = start + ns;
        t.busy_ns += ns;
        self.fabric.post_delay = t.busy_until.0 - now.0;
    }

    fn make_ready(&mut self, cid: usize) {
        let (node, thread, _) = self.coro_place(cid);
        let ti = self.thread_index(node, thread);
        self.threads[ti].ready.push_back(cid);
        self.schedule_poll(ti);
    }

    fn pick_route(&mut self, node: usize, thread: usize, target: usize) -> usize {
        let candidates = &self.hosts[node].routes[thread][&target];
        if candidates.len() == 1 {
            return candidates[0];
        }
        let ti = node * self.cfg.threads_per_node + thread;
        let k = self.rngs[ti].below(candidates.len() as u64) as usize;
        self.hosts[node].routes[thread][&target][k]
    }
}

/// Maps client connection `v` of node `a` onto a physical peer. For a fixed
/// `v` this is a bijection between source and destination nodes, so every
/// node serves exactly one connection per virtual slot.
pub fn virtual_peer(a: usize, v: usize, n_phys: usize) -> usize {
    (a + 1 + v % (n_phys - 1)) % n_phys
}

/// Source node whose client connection `v` lands on `b`.
pub fn virtual_source(b: usize, v: usize, n_phys: usize) -> usize {
    (b + n_phys - 1 - v % (n_phys - 1)) % n_phys
}

type Task = Pin<Box<dyn Future<Output = ()>>>;

/// Owner of the world and of every coroutine future.
pub struct Runtime {
    world: Rc<RefCell<World>>,
    tasks: Vec<Option<Task>>,
    spawned: Vec<usize>,
}

impl Runtime {
    pub fn new(
        n_nodes: usize,
        preset: &Preset,
        cfg: DataplaneConfig,
        seed: u64,
    ) -> Result<Self, DataplaneError> {
        if n_nodes < 2 {
            return Err(DataplaneError::Config(
                "at least two nodes are required".into(),
            ));
        }
        if cfg.threads_per_node == 0 || cfg.coroutines_per_thread == 0 || cfg.recv_slots == 0 {
            return Err(DataplaneError::Config(
                "threads, coroutines and recv slots must be positive".into(),
            ));
        }
        let m = cfg.virtual_nodes.unwrap_or(n_nodes);
        if m < n_nodes {
            return Err(DataplaneError::Config(format!(
                "virtual node count {m} is below the physical count {n_nodes}"
            )));
        }
        let emulated = cfg.virtual_nodes.is_some();
        let mut fabric: Fabric<HostEvent> = Fabric::new(n_nodes, preset);
        let t = cfg.threads_per_node;
        let slots = cfg.recv_slots;
        let root = SeededRng::new(seed);

        // Peers per (node, thread): virtual slots when emulating, else every other node.
        let peers: Vec<Vec<(usize, usize)>> = (0..n_nodes)
            .map(|a| {
                if emulated {
                    (0..m).map(|v| (v, virtual_peer(a, v, n_nodes))).collect()
                } else {
                    (0..n_nodes).filter(|&b| b != a).enumerate().collect()
                }
            })
            .collect();
        let conns_per_thread = peers[0].len();

        let mut hosts = Vec::with_capacity(n_nodes);
        let mut threads = Vec::new();
        for a in 0..n_nodes {
            let n_client = conns_per_thread * t;
            let n_server = conns_per_thread * t;
            let msg = cfg.msg_buffer_bytes;
            let req_bytes = (n_server * slots) as u64 * msg;
            let rep_bytes = (n_client * slots) as u64 * msg;
            let scratch_base = 2 * req_bytes + rep_bytes;
            let coros = (t * cfg.coroutines_per_thread) as u64;
            let total = scratch_base + coros * SCRATCH_BYTES;
            let page = 2 << 20;
            let len = total.div_ceil(page) * page;
            let meta = fabric.register_region(a, len, page, false)?;
            debug_assert_eq!(meta.region_id, RPC_REGION);
            hosts.push(HostNode {
                clients: Vec::with_capacity(n_client),
                servers: Vec::with_capacity(n_server),
                routes: vec![BTreeMap::new(); t],
                handlers: BTreeMap::new(),
                reply_inbox_base: req_bytes,
                outbox_base: req_bytes + rep_bytes,
                scratch_base,
            });
            for th in 0..t {
                let cq = fabric.create_cq(a);
                threads.push(ThreadState {
                    node: a,
                    thread: th,
                    cq,
                    busy_until: SimTime::ZERO,
                    poll_scheduled: false,
                    ready: VecDeque::new(),
                    cqes: 0,
                    handler_calls: 0,
                    busy_ns: 0,
                });
            }
        }

        // Client connection (a, slot v, thread i) pairs with server connection
        // (b, slot v, thread i); both sides index connections by v * t + i.
        let mut roles: Vec<Option<Role>> = Vec::new();
        for a in 0..n_nodes {
            for (v, &(_, b)) in peers[a].iter().enumerate() {
                for i in 0..t {
                    let cq = threads[a * t + i].cq;
                    let qp = fabric.create_qp(a, Transport::Rc, cq, cq);
                    let index = hosts[a].clients.len();
                    let server_slot = if emulated {
                        v
                    } else {
                        peers[b]
                            .iter()
                            .position(|&(_, x)| x == a)
                            .expect("full mesh")
                    };
                    hosts[a].clients.push(ClientConn {
                        qp,
                        server_index: server_slot * t + i,
                        free_slots: (0..slots as u32).rev().collect(),
                        waiters: VecDeque::new(),
                    });
                    hosts[a].routes[i].entry(b).or_default().push(index);
                    set_role(&mut roles, qp, Role::Client { node: a, index });
                }
            }
        }
        for b in 0..n_nodes {
            for (v, &(_, _)) in peers[b].iter().enumerate() {
                for i in 0..t {
                    let cq = threads[b * t + i].cq;
                    let qp = fabric.create_qp(b, Transport::Rc, cq, cq);
                    let index = hosts[b].servers.len();
                    let a = if emulated {
                        virtual_source(b, v, n_nodes)
                    } else {
                        peers[b][v].1
                    };
                    let client_slot = if emulated {
                        v
                    } else {
                        peers[a]
                            .iter()
                            .position(|&(_, x)| x == b)
                            .expect("full mesh")
                    };
                    let peer_client_index = client_slot * t + i;
                    fabric.connect(hosts[a].clients[peer_client_index].qp, qp)?;
                    debug_assert_eq!(hosts[a].clients[peer_client_index].server_index, index);
                    hosts[b].servers.push(ServerConn {
                        qp,
                        peer: a,
                        peer_client_index,
                    });
                    set_role(&mut roles, qp, Role::Server { node: b, index });
                }
            }
        }

        let world = World {
            fabric,
            hosts,
            threads,
            coros: (0..n_nodes * t * cfg.coroutines_per_thread)
                .map(|_| CoroSlot::default())
                .collect(),
            read_waiters: HashMap::new(),
            roles,
            rngs: (0..n_nodes * t).map(|i| root.fork(i as u64 + 1)).collect(),
            paths: PathCounters::default(),
            rpcs_sent: 0,
            local_ops: 0,
            cfg,
        };
        let mut rt = Runtime {
            world: Rc::new(RefCell::new(world)),
            tasks: Vec::new(),
            spawned: Vec::new(),
        };
        rt.post_initial_recvs()?;
        let n = rt.world.borrow().coros.len();
        rt.tasks = (0..n).map(|_| None).collect();
        rt.spawned = vec![0; n_nodes * t];
        Ok(rt)
    }

    fn post_initial_recvs(&mut self) -> Result<(), DataplaneError> {
        let mut w = self.world.borrow_mut();
        let w = &mut *w;
        let slots = w.cfg.recv_slots as u32;
        let msg = w.cfg.msg_buffer_bytes;
        for a in 0..w.hosts.len() {
            for c in 0..w.hosts[a].clients.len() {
                for s in 0..slots {
                    let off = w.slot_offset(w.hosts[a].reply_inbox_base, c, s);
                    let qp = w.hosts[a].clients[c].qp;
                    w.fabric.post_recv(qp, recv_buf(off, msg))?;
                }
            }
            for c in 0..w.hosts[a].servers.len() {
                for s in 0..slots {
                    let off = w.slot_offset(0, c, s);
                    let qp = w.hosts[a].servers[c].qp;
                    w.fabric.post_recv(qp, recv_buf(off, msg))?;
                }
            }
        }
        Ok(())
    }

    pub fn world(&self) -> Ref<'_, World> {
        self.world.borrow()
    }

    pub fn world_mut(&self) -> RefMut<'_, World> {
        self.world.borrow_mut()
    }

    pub fn now(&self) -> SimTime {
        self.world.borrow().fabric.now()
    }

    pub fn register_handler(
        &mut self,
        node: usize,
        object_id: u16,
        callbacks: Box<dyn Callbacks>,
    ) -> Result<(), DataplaneError> {
        let mut w = self.world.borrow_mut();
        let handlers = &mut w.hosts[node].handlers;
        if handlers.contains_key(&object_id) {
            return Err(DataplaneError::DuplicateHandler(object_id, node));
        }
        handlers.insert(object_id, callbacks);
        Ok(())
    }

    /// Starts a coroutine on (`node`, `thread`). It first runs at the current
    /// instant, subject to the thread being free.
    pub fn spawn<F, Fut>(
        &mut self,
        node: usize,
        thread: usize,
        body: F,
    ) -> Result<usize, DataplaneError>
    where
        F: FnOnce(Ctx) -> Fut,
        Fut: Future<Output = ()> + 'static,
    {
        let (cid, ti, rng) = {
            let w = self.world.borrow();
            let ti = w.thread_index(node, thread);
            let max = w.cfg.coroutines_per_thread;
            if self.spawned[ti] >= max {
                return Err(DataplaneError::TooManyCoroutines { node, thread, max });
            }
            let cid = w.coro_id(node, thread, self.spawned[ti]);
            (cid, ti, w.rngs[ti].fork(0x1000 + cid as u64))
        };
        self.spawned[ti] += 1;
        let local = cid % self.world.borrow().cfg.coroutines_per_thread;
        let ctx = Ctx {
            world: self.world.clone(),
            cid,
            node,
            thread,
            local,
            rng: Rc::new(RefCell::new(rng)),
        };
        self.tasks[cid] = Some(Box::pin(body(ctx)));
        self.world.borrow_mut().make_ready(cid);
        Ok(cid)
    }

    /// Runs the simulation until `limit`. Returns the number of completions
    /// processed by host threads.
    pub fn run_until(&mut self, limit: SimTime) -> u64 {
        let n = self.drain(limit);
        self.world.borrow_mut().fabric.engine.advance_to(limit);
        n
    }

    /// Runs until every coroutine has finished and no event remains. The
    /// clock stays at the last event.
    pub fn run_to_completion(&mut self) -> u64 {
        self.drain(SimTime(u64::MAX))
    }

    fn drain(&mut self, limit: SimTime) -> u64 {
        let before = self.world.borrow().cqes_processed();
        loop {
            let step = self.world.borrow_mut().fabric.step(limit);
            match step {
                Step::Idle => break,
                Step::Verbs => {}
                Step::Upper(ev) => self.on_host_event(ev.payload),
            }
            let mut w = self.world.borrow_mut();
            for cq in w.fabric.take_notifications() {
                // Threads own the CQs in creation order.
                let ti = cq.0 as usize;
                debug_assert_eq!(w.threads[ti].cq, cq);
                w.schedule_poll(ti);
            }
        }
        let w = self.world.borrow();
        w.cqes_processed() - before
    }

    pub fn all_done(&self) -> bool {
        let w = self.world.borrow();
        self.tasks
            .iter()
            .zip(&w.coros)
            .all(|(t, c)| t.is_none() || c.done)
    }

    fn on_host_event(&mut self, ev: HostEvent) {
        match ev {
            HostEvent::Wake { coro } => self.world.borrow_mut().make_ready(coro),
            HostEvent::ThreadPoll { node, thread } => self.thread_poll(node, thread),
        }
    }

    fn thread_poll(&mut self, node: usize, thread: usize) {
        let resume = {
            let mut w = self.world.borrow_mut();
            let w = &mut *w;
            let ti = w.thread_index(node, thread);
            w.threads[ti].poll_scheduled = false;
            let now = w.fabric.now();
            if w.threads[ti].busy_until > now {
                w.schedule_poll(ti);
                return;
            }
            let cq = w.threads[ti].cq;
            let polled = w.fabric.poll_cq(cq, 1).expect("thread CQ exists");
            let resume = if let Some(c) = polled.into_iter().next() {
                w.threads[ti].cqes += 1;
                handle_completion(w, ti, c)
            } else {
                w.threads[ti].ready.pop_front()
            };
            if resume.is_some() {
                let cost = w.fabric.host.cpu_switch_ns;
                w.charge(ti, cost);
            }
            resume
        };
        if let Some(cid) = resume {
            self.poll_task(cid);
        }
        let mut w = self.world.borrow_mut();
        w.fabric.post_delay = 0;
        let ti = w.thread_index(node, thread);
        let cq = w.threads[ti].cq;
        if !w.fabric.cq(cq).is_empty() || !w.threads[ti].ready.is_empty() {
            w.schedule_poll(ti);
        }
    }

    fn poll_task(&mut self, cid: usize) {
        let Some(task) = self.tasks[cid].as_mut() else {
            return;
        };
        let mut cx = Context::from_waker(Waker::noop());
        if let Poll::Ready(()) = task.as_mut().poll(&mut cx) {
            self.tasks[cid] = None;
            self.world.borrow_mut().coros[cid].done = true;
        }
    }
}

fn set_role(roles: &mut Vec<Option<Role>>, qp: QpId, role: Role) {
    let i = qp.0 as usize;
    if roles.len() <= i {
        roles.resize(i + 1, None);
    }
    roles[i] = Some(role);
}

fn recv_buf(offset: u64, len: u64) -> RecvBuf {
    RecvBuf {
        wr_id: offset,
        buf: LocalBuf {
            region: RPC_REGION,
            offset,
            len,
        },
    }
}

/// Processes one completion on thread `ti`; returns a coroutine to resume.
fn handle_completion(w: &mut World, ti: usize, c: crate::verbs::Completion) -> Option<usize> {
    match c.kind {
        CompletionKind::Send(Opcode::Read) => {
            let cid = w
                .read_waiters
                .remove(&c.wr_id)
                .expect("read has a waiting coroutine");
            let result = if c.status == CompletionStatus::Ok {
                let (node, _, _) = w.coro_place(cid);
                let off = w.scratch(cid);
                Ok(w.fabric.read_local(node, RPC_REGION, off, c.byte_len))
            } else {
                Err(c.status)
            };
            w.coros[cid].result = Some(Outcome::Read(result));
            Some(cid)
        }
        CompletionKind::Send(_) => {
            assert_eq!(
                c.status,
                CompletionStatus::Ok,
                "RPC message rejected: {c:?}"
            );
            None
        }
        CompletionKind::Recv => match w.roles[c.qp.0 as usize].expect("known qp") {
            Role::Server { node, index } => {
                serve_request(w, ti, node, index, c);
                None
            }
            Role::Client { node, index } => accept_reply(w, node, index, c),
        },
    }
}

fn serve_request(w: &mut World, ti: usize, node: usize, index: usize, c: crate::verbs::Completion) {
    let slot = c.imm.expect("RPC carries its slot");
    let inbox = w.slot_offset(0, index, slot);
    let bytes = w.fabric.read_local(node, RPC_REGION, inbox, c.byte_len);
    let request = RpcMessage::decode(&bytes).expect("well-formed request");
    let reply = dispatch(w, node, &request);
    w.threads[ti].handler_calls += 1;
    let cost = w.fabric.host.rpc_handler_ns;
    w.charge(ti, cost);

    let encoded = reply.encode();
    assert!(
        encoded.len() as u64 <= w.cfg.msg_buffer_bytes,
        "reply exceeds buffer"
    );
    let out = w.slot_offset(w.hosts[node].outbox_base, index, slot);
    w.fabric.write_local(node, RPC_REGION, out, &encoded);
    let server = &w.hosts[node].servers[index];
    let (qp, peer, peer_idx) = (server.qp, server.peer, server.peer_client_index);
    let dest = w.slot_offset(w.hosts[peer].reply_inbox_base, peer_idx, slot);
    let msg = w.cfg.msg_buffer_bytes;
    w.fabric
        .post_recv(qp, recv_buf(inbox, msg))
        .expect("repost request buffer");
    w.fabric
        .post_write_imm(
            qp,
            LocalBuf {
                region: RPC_REGION,
                offset: out,
                len: encoded.len() as u64,
            },
            RemoteAddr {
                region: RPC_REGION,
                offset: dest,
            },
            slot,
        )
        .expect("post reply");
}

fn dispatch(w: &mut World, node: usize, request: &RpcMessage) -> RpcMessage {
    if request.header.opcode == RpcOpcode::Echo {
        return request.reply(RpcStatus::Ok, request.payload.clone());
    }
    let World { fabric, hosts, .. } = w;
    match hosts[node].handlers.get_mut(&request.header.object_id) {
        Some(h) => {
            let mut mem = NodeMemory { fabric, node };
            h.rpc_handler(&mut mem, request)
        }
        None => request.reply(RpcStatus::NoHandler, Vec::new()),
    }
}

fn accept_reply(
    w: &mut World,
    node: usize,
    index: usize,
    c: crate::verbs::Completion,
) -> Option<usize> {
    let slot = c.imm.expect("reply carries its slot");
    let inbox = w.slot_offset(w.hosts[node].reply_inbox_base, index, slot);
    let bytes = w.fabric.read_local(node, RPC_REGION, inbox, c.byte_len);
    let reply = RpcMessage::decode(&bytes).expect("well-formed reply");
    let msg = w.cfg.msg_buffer_bytes;
    let qp = w.hosts[node].clients[index].qp;
    w.fabric
        .post_recv(qp, recv_buf(inbox, msg))
        .expect("repost reply buffer");
    let cid = w.coro_id(
        node,
        reply.header.thread as usize,
        reply.header.coroutine as usize,
    );
    let slot_state = &mut w.coros[cid];
    assert_eq!(
        slot_state.awaiting_request,
        Some(reply.header.request_id),
        "reply matched to the wrong request"
    );
    slot_state.awaiting_request = None;
    slot_state.result = Some(Outcome::Reply(reply));

    let conn = &mut w.hosts[node].clients[index];
    if let Some(waiter) = conn.waiters.pop_front() {
        w.coros[waiter].result = Some(Outcome::Credit(slot));
        w.make_ready(waiter);
    } else {
        conn.free_slots.push(slot);
    }
    Some(cid)
}

/// Suspends the calling coroutine until the runtime stores its outcome.
struct Suspend {
    world: Rc<RefCell<World>>,
    cid: usize,
}

impl Future for Suspend {
    type Output = Outcome;
    fn poll(self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<Outcome> {
        match self.world.borrow_mut().coros[self.cid].result.take() {
            Some(o) => Poll::Ready(o),
            None => Poll::Pending,
        }
    }
}

/// Handle a coroutine uses to reach the dataplane.
#[derive(Clone)]
pub struct Ctx {
    world: Rc<RefCell<World>>,
    cid: usize,
    node: usize,
    thread: usize,
    local: usize,
    rng: Rc<RefCell<SeededRng>>,
}

impl Ctx {
    pub fn node(&self) -> usize {
        self.node
    }

    pub fn thread(&self) -> usize {
        self.thread
    }

    pub fn coroutine(&self) -> usize {
        self.local
    }

    /// Globally unique coroutine index.
    pub fn id(&self) -> usize {
        self.cid
    }

    pub fn now(&self) -> SimTime {
        self.world.borrow().fabric.now()
    }

    pub fn n_nodes(&self) -> usize {
        self.world.borrow().hosts.len()
    }

    pub fn rng(&self) -> RefMut<'_, SeededRng> {
        self.rng.borrow_mut()
    }

    pub fn world(&self) -> RefMut<'_, World> {
        self.world.borrow_mut()
    }

    fn suspend(&self) -> Suspend {
        Suspend {
            world: self.world.clone(),
            cid: self.cid,
        }
    }

    /// Completes a node-local operation after `cost` ns of thread time.
    async fn local_completion(&self, outcome: Outcome, cost: u64) -> Outcome {
        {
            let mut w = self.world.borrow_mut();
            let ti = w.thread_index(self.node, self.thread);
            w.charge(ti, cost);
            let at = w.threads[ti].busy_until;
            w.coros[self.cid].result = Some(outcome);
            w.local_ops += 1;
            w.fabric.engine.schedule_at(
                at,
                host_target(self.node),
                FabricEvent::Upper(HostEvent::Wake { coro: self.cid }),
            );
        }
        self.suspend().await
    }

    /// One-sided read of `loc`; never involves the owner's CPU.
    pub async fn remote_read(&self, loc: RemoteLoc) -> Result<Vec<u8>, DataplaneError> {
        if loc.len > READ_BUF_BYTES {
            return Err(DataplaneError::ReadTooLarge(loc.len));
        }
        let outcome = if loc.node == self.node {
            let bytes = {
                let w = self.world.borrow();
                w.fabric
                    .region(loc.node, loc.region)
                    .filter(|r| r.in_bounds(loc.offset, loc.len))
                    .map(|r| r.read(loc.offset, loc.len))
                    .ok_or(CompletionStatus::ProtectionError)
            };
            let cost = self.world.borrow().fabric.host.cpu_switch_ns;
            self.local_completion(Outcome::Read(bytes), cost).await
        } else {
            {
                let mut w = self.world.borrow_mut();
                let conn = w.pick_route(self.node, self.thread, loc.node);
                let qp = w.hosts[self.node].clients[conn].qp;
                let local = LocalBuf {
                    region: RPC_REGION,
                    offset: w.scratch(self.cid),
                    len: loc.len,
                };
                let wr = w.fabric.post_read(
                    qp,
                    local,
                    RemoteAddr {
                        region: loc.region,
                        offset: loc.offset,
                    },
                )?;
                w.read_waiters.insert(wr, self.cid);
            }
            self.suspend().await
        };
        match outcome {
            Outcome::Read(Ok(bytes)) => Ok(bytes),
            Outcome::Read(Err(status)) => Err(DataplaneError::ReadFailed(status)),
            _ => unreachable!("read resumed by a non-read outcome"),
        }
    }

    /// Sends a request to `target` and waits for the reply.
    pub async fn rpc(
        &self,
        target: usize,
        object_id: u16,
        opcode: RpcOpcode,
        payload: Vec<u8>,
    ) -> Result<RpcMessage, DataplaneError> {
        let request_id = {
            let mut w = self.world.borrow_mut();
            let slot = &mut w.coros[self.cid];
            slot.request_id = slot.request_id.wrapping_add(1);
            w.rpcs_sent += 1;
            w.coros[self.cid].request_id
        };
        let request = RpcMessage {
            header: RpcHeader {
                sender: self.node as u16,
                thread: self.thread as u16,
                coroutine: self.local as u32,
                opcode,
                status: RpcStatus::Ok,
                object_id,
                request_id,
            },
            payload,
        };
        let mut encoded = request.encode();
        let (min, cap) = {
            let w = self.world.borrow();
            (w.cfg.min_request_bytes, w.cfg.msg_buffer_bytes)
        };
        if encoded.len() as u64 > cap {
            return Err(DataplaneError::MessageTooLarge(encoded.len(), cap));
        }
        if (encoded.len() as u64) < min {
            encoded.resize(min as usize, 0);
        }

        if target == self.node {
            let reply = {
                let mut w = self.world.borrow_mut();
                let ti = w.thread_index(self.node, self.thread);
                w.threads[ti].handler_calls += 1;
                dispatch(&mut w, self.node, &request)
            };
            let cost = self.world.borrow().fabric.host.rpc_handler_ns;
            return match self.local_completion(Outcome::Reply(reply), cost).await {
                Outcome::Reply(r) => Ok(r),
                _ => unreachable!("local rpc resumed by a non-reply outcome"),
            };
        }

        let conn = self
            .world
            .borrow_mut()
            .pick_route(self.node, self.thread, target);
        let slot = {
            let mut w = self.world.borrow_mut();
            match w.hosts[self.node].clients[conn].free_slots.pop() {
                Some(s) => Some(s),
                None => {
                    w.hosts[self.node].clients[conn].waiters.push_back(self.cid);
                    None
                }
            }
        };
        let slot = match slot {
            Some(s) => s,
            None => match self.suspend().await {
                Outcome::Credit(s) => s,
                _ => unreachable!("credit wait resumed by another outcome"),
            },
        };
        {
            let mut w = self.world.borrow_mut();
            let staging = w.scratch(self.cid) + READ_BUF_BYTES;
            w.fabric
                .write_local(self.node, RPC_REGION, staging, &encoded);
            let c = &w.hosts[self.node].clients[conn];
            let (qp, server_index) = (c.qp, c.server_index);
            let dest = w.slot_offset(0, server_index, slot);
            w.coros[self.cid].awaiting_request = Some(request_id);
            w.fabric.post_write_imm(
                qp,
                LocalBuf {
                    region: RPC_REGION,
                    offset: staging,
                    len: encoded.len() as u64,
                },
                RemoteAddr {
                    region: RPC_REGION,
                    offset: dest,
                },
                slot,
            )?;
        }
        match self.suspend().await {
            Outcome::Reply(r) => Ok(r),
            _ => unreachable!("rpc resumed by a non-reply outcome"),
        }
    }

    fn with_callbacks<R>(
        &self,
        object_id: u16,
        f: impl FnOnce(&mut dyn Callbacks) -> R,
    ) -> Result<R, DataplaneError> {
        let mut w = self.world.borrow_mut();
        let h = w.hosts[self.node]
            .handlers
            .get_mut(&object_id)
            .ok_or(DataplaneError::NoHandler(object_id, self.node))?;
        Ok(f(h.as_mut()))
    }

    /// Home node of `key` under the object's partitioning.
    pub fn home(&self, object_id: u16, key: u64) -> Result<usize, DataplaneError> {
        self.with_callbacks(object_id, |h| h.home(key))
    }

    /// Looks up one read-set item: try the guessed address with one-sided
    /// reads, fall back to a READ RPC at the key's home.
    pub async fn read_set_item(
        &self,
        object_id: u16,
        key: u64,
    ) -> Result<ReadItem, DataplaneError> {
        let max_reads = self.world.borrow().cfg.rr_fallback_after.max(1);
        let mut reads = 0u32;
        while reads < max_reads {
            let Some(loc) = self.with_callbacks(object_id, |h| h.lookup_start(key))? else {
                break;
            };
            reads += 1;
            self.world.borrow_mut().paths.reads_issued += 1;
            let buffer = match self.remote_read(loc).await {
                Ok(bytes) => LookupBuffer {
                    bytes,
                    source: LookupSource::Read(loc),
                },
                Err(DataplaneError::ReadFailed(_)) => continue,
                Err(e) => return Err(e),
            };
            if self.with_callbacks(object_id, |h| h.lookup_end(key, &buffer))? {
                self.world.borrow_mut().paths.read_only += 1;
                return Ok(ReadItem {
                    buffer,
                    path: ReadPath::ReadOnly,
                    found: true,
                    reads,
                });
            }
        }
        let home = self.home(object_id, key)?;
        let payload = self.with_callbacks(object_id, |h| h.read_request(key))?;
        self.world.borrow_mut().paths.read_rpcs_issued += 1;
        let reply = self.rpc(home, object_id, RpcOpcode::Read, payload).await?;
        let buffer = LookupBuffer {
            bytes: reply.payload,
            source: LookupSource::Rpc {
                node: home,
                status: reply.header.status,
            },
        };
        let found = self.with_callbacks(object_id, |h| h.lookup_end(key, &buffer))?;
        let path = if reads > 0 {
            ReadPath::ReadThenRpc
        } else {
            ReadPath::RpcOnly
        };
        let mut w = self.world.borrow_mut();
        match path {
            ReadPath::ReadThenRpc => w.paths.read_then_rpc += 1,
            _ => w.paths.rpc_only += 1,
        }
        if !found {
            w.paths.not_found += 1;
        }
        Ok(ReadItem {
            buffer,
            path,
            found,
            reads,
        })
    }
}
