//! RNIC model: a finite SRAM cache holding transport state, a pool of
//! processing units, and the constant/variable latency pipeline between the
//! host (over PCIe) and the remote NIC (over the wire).

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::sim::SimTime;

pub const CACHELINE: u64 = 64;
/// Size of the per-connection QP context.
pub const QP_STATE_BYTES: u64 = 375;

#[derive(Debug, Error, PartialEq)]
pub enum NicError {
    #[error("state entry of {size} bytes exceeds cache capacity {capacity}")]
    EntryTooLarge { size: u64, capacity: u64 },
    #[error("region base {base:#x} not aligned to page size {page}")]
    Unaligned { base: u64, page: u64 },
    #[error("region length must be positive")]
    EmptyRegion,
    #[error("unsupported page size {0}")]
    BadPageSize(u64),
}

#[derive(Debug, Error)]
pub enum PresetError {
    #[error("{path}:{line}: {msg}")]
    Syntax {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("{path}:{line}: unknown preset key `{key}`")]
    UnknownKey {
        path: String,
        line: usize,
        key: String,
    },
    #[error("{path}: invalid preset: {msg}")]
    Invalid { path: String, msg: String },
    #[error("reading {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Page sizes the NIC can translate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PageSize {
    K4,
    M2,
    G1,
}

impl PageSize {
    pub fn bytes(self) -> u64 {
        match self {
            PageSize::K4 => 4 << 10,
            PageSize::M2 => 2 << 20,
            PageSize::G1 => 1 << 30,
        }
    }

    pub fn from_bytes(bytes: u64) -> Result<Self, NicError> {
        match bytes {
            b if b == 4 << 10 => Ok(PageSize::K4),
            b if b == 2 << 20 => Ok(PageSize::M2),
            b if b == 1 << 30 => Ok(PageSize::G1),
            other => Err(NicError::BadPageSize(other)),
        }
    }
}

/// NIC parameters. All latencies are nanoseconds.
#[derive(Debug, Clone, PartialEq)]
pub struct NicConfig {
    pub cache_capacity_bytes: u64,
    pub num_pus: u32,
    pub pu_service_ns: u64,
    pub cache_hit_ns: u64,
    /// A PCIe DMA round trip to fetch evicted state from host memory.
    pub cache_miss_ns: u64,
    /// Posted MMIO/DMA write: doorbell ring, CQE write.
    pub pcie_write_ns: u64,
    /// Constant part of a DMA read round trip (descriptor fetch, remote memory read).
    pub pcie_dma_rt_ns: u64,
    pub pcie_per_byte_ns: f64,
    pub wire_prop_ns: u64,
    pub wire_per_byte_ns: f64,
    pub miss_overlap_factor: f64,
    pub mtt_entry_bytes: u64,
    pub mpt_entry_bytes: u64,
    /// In-flight send WQE context kept by the initiator until completion.
    pub wqe_bytes: u64,
    pub recv_wqe_bytes: u64,
}

impl Default for NicConfig {
    fn default() -> Self {
        NicConfig {
            cache_capacity_bytes: 2 << 20,
            num_pus: 8,
            pu_service_ns: 200,
            cache_hit_ns: 5,
            cache_miss_ns: 350,
            pcie_write_ns: 300,
            pcie_dma_rt_ns: 350,
            pcie_per_byte_ns: 0.0625,
            wire_prop_ns: 200,
            wire_per_byte_ns: 0.078125,
            miss_overlap_factor: 1.0,
            mtt_entry_bytes: 16,
            mpt_entry_bytes: 32,
            wqe_bytes: 64,
            recv_wqe_bytes: 16,
        }
    }
}

impl NicConfig {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("cache_capacity_bytes", self.cache_capacity_bytes),
            ("num_pus", self.num_pus as u64),
            ("pu_service_ns", self.pu_service_ns),
            ("cache_hit_ns", self.cache_hit_ns),
            ("cache_miss_ns", self.cache_miss_ns),
            ("pcie_write_ns", self.pcie_write_ns),
            ("pcie_dma_rt_ns", self.pcie_dma_rt_ns),
            ("wire_prop_ns", self.wire_prop_ns),
            ("mtt_entry_bytes", self.mtt_entry_bytes),
            ("mpt_entry_bytes", self.mpt_entry_bytes),
            ("wqe_bytes", self.wqe_bytes),
            ("recv_wqe_bytes", self.recv_wqe_bytes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(format!("{name} must be > 0"));
            }
        }
        if [self.pcie_per_byte_ns, self.wire_per_byte_ns]
            .iter()
            .any(|x| x.is_nan() || *x <= 0.0)
        {
            return Err("per-byte costs must be > 0".into());
        }
        if self.cache_miss_ns <= self.cache_hit_ns {
            return Err("cache_miss_ns must exceed cache_hit_ns".into());
        }
        if !(self.miss_overlap_factor > 0.0 && self.miss_overlap_factor <= 1.0) {
            return Err("miss_overlap_factor must lie in (0, 1]".into());
        }
        if QP_STATE_BYTES > self.cache_capacity_bytes {
            return Err("cache cannot hold a single QP context".into());
        }
        Ok(())
    }

    /// Latency of `bytes` crossing PCIe once.
    pub fn pcie_bytes_ns(&self, bytes: u64) -> u64 {
        (bytes as f64 * self.pcie_per_byte_ns).round() as u64
    }

    pub fn wire_bytes_ns(&self, bytes: u64) -> u64 {
        (bytes as f64 * self.wire_per_byte_ns).round() as u64
    }

    pub fn lookup_ns(&self, outcome: CacheOutcome) -> u64 {
        match outcome {
            CacheOutcome::Hit => self.cache_hit_ns,
            CacheOutcome::Miss => self.cache_miss_ns,
        }
    }
}

/// Host-side CPU costs that ride along with a platform preset.
#[derive(Debug, Clone, PartialEq)]
pub struct HostConfig {
    /// CPU time to run an RPC handler and post its reply.
    pub rpc_handler_ns: u64,
    /// Coroutine resume on completion.
    pub cpu_switch_ns: u64,
    /// UD only: reposting a consumed receive buffer.
    pub host_repost_ns: u64,
}

impl Default for HostConfig {
    fn default() -> Self {
        HostConfig {
            rpc_handler_ns: 50,
            cpu_switch_ns: 20,
            host_repost_ns: 100,
        }
    }
}

/// A platform preset: NIC and host parameters loaded from a `key = value` file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Preset {
    pub name: String,
    pub nic: NicConfig,
    pub host: HostConfig,
}

macro_rules! preset_keys {
    ($($key:ident : $sect:ident),* $(,)?) => {
        const PRESET_KEYS: &[&str] = &["name", $(stringify!($key)),*];

        impl Preset {
            fn set(&mut self, key: &str, value: &str) -> Result<bool, String> {
                if key == "name" {
                    self.name = value.to_string();
                    return Ok(true);
                }
                $(
                    if key == stringify!($key) {
                        self.$sect.$key = value
                            .parse()
                            .map_err(|e| format!("bad value `{value}` for {key}: {e}"))?;
                        return Ok(true);
                    }
                )*
                Ok(false)
            }

            /// Serializes every key; parsing the result yields an equal preset.
            pub fn to_text(&self) -> String {
                let mut out = format!("name = {}\n", self.name);
                $(
                    out.push_str(&format!("{} = {}\n", stringify!($key), self.$sect.$key));
                )*
                out
            }
        }
    };
}

preset_keys! {
    cache_capacity_bytes: nic,
    num_pus: nic,
    pu_service_ns: nic,
    cache_hit_ns: nic,
    cache_miss_ns: nic,
    pcie_write_ns: nic,
    pcie_dma_rt_ns: nic,
    pcie_per_byte_ns: nic,
    wire_prop_ns: nic,
    wire_per_byte_ns: nic,
    miss_overlap_factor: nic,
    mtt_entry_bytes: nic,
    mpt_entry_bytes: nic,
    wqe_bytes: nic,
    recv_wqe_bytes: nic,
    rpc_handler_ns: host,
    cpu_switch_ns: host,
    host_repost_ns: host,
}

impl Preset {
    pub fn keys() -> &'static [&'static str] {
        PRESET_KEYS
    }

    pub fn parse(text: &str, origin: &str) -> Result<Preset, PresetError> {
        let mut preset = Preset::default();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(PresetError::Syntax {
                    path: origin.into(),
                    line: line_no,
                    msg: format!("expected `key = value`, got `{line}`"),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            match preset.set(key, value) {
                Ok(true) => {}
                Ok(false) => {
                    return Err(PresetError::UnknownKey {
                        path: origin.into(),
                        line: line_no,
                        key: key.into(),
                    })
                }
                Err(msg) => {
                    return Err(PresetError::Syntax {
                        path: origin.into(),
                        line: line_no,
                        msg,
                    })
                }
            }
        }
        preset.nic.validate().map_err(|msg| PresetError::Invalid {
            path: origin.into(),
            msg,
        })?;
        Ok(preset)
    }

    pub fn load(path: &Path) -> Result<Preset, PresetError> {
        let text = std::fs::read_to_string(path).map_err(|source| PresetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Preset::parse(&text, &path.display().to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StateKind {
    Qp,
    Mtt,
    Mpt,
    RecvWqe,
    SendWqe,
}

/// One cacheable piece of transport state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StateKey {
    pub kind: StateKind,
    pub id: u64,
    pub size_bytes: u64,
}

impl StateKey {
    pub fn qp(id: u64) -> Self {
        StateKey {
            kind: StateKind::Qp,
            id,
            size_bytes: QP_STATE_BYTES,
        }
    }

    pub fn mtt(cfg: &NicConfig, region: u32, page: u64) -> Self {
        StateKey {
            kind: StateKind::Mtt,
            id: ((region as u64) << 40) | page,
            size_bytes: cfg.mtt_entry_bytes,
        }
    }

    pub fn mpt(cfg: &NicConfig, region: u32) -> Self {
        StateKey {
            kind: StateKind::Mpt,
            id: region as u64,
            size_bytes: cfg.mpt_entry_bytes,
        }
    }

    pub fn send_wqe(cfg: &NicConfig, wr_id: u64) -> Self {
        StateKey {
            kind: StateKind::SendWqe,
            id: wr_id,
            size_bytes: cfg.wqe_bytes,
        }
    }

    pub fn recv_wqe(cfg: &NicConfig, id: u64) -> Self {
        StateKey {
            kind: StateKind::RecvWqe,
            id,
            size_bytes: cfg.recv_wqe_bytes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CacheOutcome {
    Hit,
    Miss,
}

/// Byte-granular LRU cache of transport state.
#[derive(Debug, Clone)]
pub struct NicCache {
    capacity: u64,
    occupancy: u64,
    tick: u64,
    resident: HashMap<(StateKind, u64), (u64, u64)>,
    order: BTreeMap<u64, (StateKind, u64)>,
    hits: u64,
    misses: u64,
    evictions: u64,
}

impl NicCache {
    pub fn new(capacity: u64) -> Self {
        NicCache {
            capacity,
            occupancy: 0,
            tick: 0,
            resident: HashMap::new(),
            order: BTreeMap::new(),
            hits: 0,
            misses: 0,
            evictions: 0,
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }
    pub fn occupancy(&self) -> u64 {
        self.occupancy
    }
    pub fn hits(&self) -> u64 {
        self.hits
    }
    pub fn misses(&self) -> u64 {
        self.misses
    }
    pub fn evictions(&self) -> u64 {
        self.evictions
    }
    pub fn len(&self) -> usize {
        self.resident.len()
    }
    pub fn is_empty(&self) -> bool {
        self.resident.is_empty()
    }

    pub fn hit_rate(&self) -> f64 {
        let total = self.hits + self.misses;
        if total == 0 {
            0.0
        } else {
            self.hits as f64 / total as f64
        }
    }

    pub fn contains(&self, key: &StateKey) -> bool {
        self.resident.contains_key(&(key.kind, key.id))
    }

    /// Sum of resident entry sizes, recomputed from scratch.
    pub fn recount(&self) -> u64 {
        self.resident.values().map(|&(_, size)| size).sum()
    }

    pub fn reset_counters(&mut self) {
        self.hits = 0;
        self.misses = 0;
        self.evictions = 0;
    }

    /// Looks `key` up; a miss inserts it and evicts LRU entries as needed.
    /// `_at` is informational: recency is the order of accesses.
    pub fn access(&mut self, key: StateKey, _at: SimTime) -> Result<CacheOutcome, NicError> {
        if key.size_bytes > self.capacity {
            return Err(NicError::EntryTooLarge {
                size: key.size_bytes,
                capacity: self.capacity,
            });
        }
        let outcome = if self.bump(&key) {
            self.hits += 1;
            CacheOutcome::Hit
        } else {
            self.misses += 1;
            self.insert_fresh(key);
            CacheOutcome::Miss
        };
        Ok(outcome)
    }

    /// Installs `key` (or refreshes it) without counting a lookup.
    pub fn install(&mut self, key: StateKey) -> Result<(), NicError> {
        if key.size_bytes > self.capacity {
            return Err(NicError::EntryTooLarge {
                size: key.size_bytes,
                capacity: self.capacity,
            });
        }
        if !self.bump(&key) {
            self.insert_fresh(key);
        }
        Ok(())
    }

    pub fn remove(&mut self, key: &StateKey) -> bool {
        match self.resident.remove(&(key.kind, key.id)) {
            Some((tick, size)) => {
                self.order.remove(&tick);
                self.occupancy -= size;
                true
            }
            None => false,
        }
    }

    fn bump(&mut self, key: &StateKey) -> bool {
        let slot = (key.kind, key.id);
        let Some(entry) = self.resident.get_mut(&slot) else {
            return false;
        };
        self.order.remove(&entry.0);
        self.tick += 1;
        entry.0 = self.tick;
        self.order.insert(self.tick, slot);
        true
    }

    fn insert_fresh(&mut self, key: StateKey) {
        while self.occupancy + key.size_bytes > self.capacity {
            let (_, victim) = self.order.pop_first().expect("occupancy without entries");
            let (_, size) = self
                .resident
                .remove(&victim)
                .expect("order/resident mismatch");
            self.occupancy -= size;
            self.evictions += 1;
        }
        self.tick += 1;
        self.resident
            .insert((key.kind, key.id), (self.tick, key.size_bytes));
        self.order.insert(self.tick, (key.kind, key.id));
        self.occupancy += key.size_bytes;
    }
}

/// Registration record of a memory region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryRegionMeta {
    pub region_id: u32,
    pub base: u64,
    pub length_bytes: u64,
    pub page_size_bytes: u64,
    pub is_physical_segment: bool,
    pub mtt_entry_count: u64,
    pub mpt_entry_count: u64,
}

impl MemoryRegionMeta {
    /// MTT entries consulted to translate `[offset, offset+len)`.
    pub fn pages_touched(&self, offset: u64, len: u64) -> u64 {
        if self.is_physical_segment {
            return 1;
        }
        let page = self.page_size_bytes;
        ((offset % page) + len.max(1)).div_ceil(page)
    }

    pub fn first_page(&self, offset: u64) -> u64 {
        if self.is_physical_segment {
            0
        } else {
            offset / self.page_size_bytes
        }
    }
}

/// Computes the registration footprint of a region without touching any NIC.
pub fn region_meta(
    region_id: u32,
    base: u64,
    length: u64,
    page_size: u64,
    is_physical_segment: bool,
) -> Result<MemoryRegionMeta, NicError> {
    let page = PageSize::from_bytes(page_size)?.bytes();
    if length == 0 {
        return Err(NicError::EmptyRegion);
    }
    if !base.is_multiple_of(page) {
        return Err(NicError::Unaligned { base, page });
    }
    let (mtt, mpt) = if is_physical_segment {
        (1, 1)
    } else {
        (length.div_ceil(page), 1)
    };
    Ok(MemoryRegionMeta {
        region_id,
        base,
        length_bytes: length,
        page_size_bytes: page,
        is_physical_segment,
        mtt_entry_count: mtt,
        mpt_entry_count: mpt,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OneSidedOp {
    Read,
    Write,
    WriteImm,
}

impl fmt::Display for OneSidedOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OneSidedOp::Read => "read",
            OneSidedOp::Write => "write",
            OneSidedOp::WriteImm => "write_imm",
        })
    }
}

/// Latency split into PCIe/network and constant/variable parts.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LatencyBreakdown {
    pub pcie_const: f64,
    pub pcie_var: f64,
    pub net_const: f64,
    pub net_var: f64,
}

impl LatencyBreakdown {
    pub fn total(&self) -> f64 {
        self.pcie_const + self.pcie_var + self.net_const + self.net_var
    }

    pub fn pcie_share(&self) -> f64 {
        let t = self.total();
        if t == 0.0 {
            0.0
        } else {
            (self.pcie_const + self.pcie_var) / t
        }
    }

    pub fn variable_share(&self) -> f64 {
        let t = self.total();
        if t == 0.0 {
            0.0
        } else {
            (self.pcie_var + self.net_var) / t
        }
    }

    pub fn add(&mut self, other: &LatencyBreakdown) {
        self.pcie_const += other.pcie_const;
        self.pcie_var += other.pcie_var;
        self.net_const += other.net_const;
        self.net_var += other.net_var;
    }

    pub fn scaled(&self, k: f64) -> LatencyBreakdown {
        LatencyBreakdown {
            pcie_const: self.pcie_const * k,
            pcie_var: self.pcie_var * k,
            net_const: self.net_const * k,
            net_var: self.net_var * k,
        }
    }
}

/// Number of state lookups on the critical path of an op when nothing misses
/// the page boundary: QP, MPT and one MTT per page on each side, the recv WQE
/// for write-with-immediate, and the send WQE when the initiator completes.
pub fn critical_path_lookups(op: OneSidedOp, local_pages: u64, remote_pages: u64) -> u64 {
    let initiator = 2 + local_pages;
    let target = 2 + remote_pages + u64::from(op == OneSidedOp::WriteImm);
    initiator + target + 1
}

/// Closed-form unloaded latency of a one-sided operation.
///
/// `outcomes` lists the cache outcome of every state lookup on the critical
/// path (initiator request pass, target pass, initiator completion pass).
pub fn one_sided_latency(
    cfg: &NicConfig,
    op: OneSidedOp,
    payload_bytes: u64,
    outcomes: &[CacheOutcome],
) -> LatencyBreakdown {
    let b = payload_bytes as f64;
    let lookups: u64 = outcomes.iter().map(|&o| cfg.lookup_ns(o)).sum();
    let target_fetch = if op == OneSidedOp::Read {
        cfg.pcie_dma_rt_ns
    } else {
        0
    };
    LatencyBreakdown {
        pcie_const: (2 * cfg.pcie_write_ns + cfg.pcie_dma_rt_ns + target_fetch) as f64,
        pcie_var: 2.0 * b * cfg.pcie_per_byte_ns,
        net_const: (2 * cfg.wire_prop_ns + 2 * cfg.pu_service_ns + lookups) as f64,
        net_var: b * cfg.wire_per_byte_ns,
    }
}

/// One-way delivery of a write-with-immediate up to the receiver's CQE.
pub fn one_way_imm_latency(
    cfg: &NicConfig,
    payload_bytes: u64,
    outcomes: &[CacheOutcome],
) -> LatencyBreakdown {
    let b = payload_bytes as f64;
    let lookups: u64 = outcomes.iter().map(|&o| cfg.lookup_ns(o)).sum();
    LatencyBreakdown {
        pcie_const: (2 * cfg.pcie_write_ns + cfg.pcie_dma_rt_ns) as f64,
        pcie_var: 2.0 * b * cfg.pcie_per_byte_ns,
        net_const: (cfg.wire_prop_ns + 2 * cfg.pu_service_ns + lookups) as f64,
        net_var: b * cfg.wire_per_byte_ns,
    }
}

/// Unloaded round trip of a write-based RPC: request delivery, handler, reply delivery.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RpcLatency {
    pub request: LatencyBreakdown,
    pub handler_ns: f64,
    pub reply: LatencyBreakdown,
}

impl RpcLatency {
    pub fn total(&self) -> f64 {
        self.request.total() + self.handler_ns + self.reply.total()
    }
}

/// All-hit unloaded RPC round trip; each one-way leg does QP, MPT, one MTT
/// per side plus the receiver's recv WQE.
pub fn rpc_latency(
    cfg: &NicConfig,
    host: &HostConfig,
    request_bytes: u64,
    reply_bytes: u64,
) -> RpcLatency {
    let hits = [CacheOutcome::Hit; 7];
    RpcLatency {
        request: one_way_imm_latency(cfg, request_bytes, &hits),
        handler_ns: host.rpc_handler_ns as f64,
        reply: one_way_imm_latency(cfg, reply_bytes, &hits),
    }
}

/// All-hit unloaded latency of a one-sided op touching one page per side.
pub fn unloaded_latency(cfg: &NicConfig, op: OneSidedOp, payload_bytes: u64) -> LatencyBreakdown {
    let n = critical_path_lookups(op, 1, 1) as usize;
    one_sided_latency(cfg, op, payload_bytes, &vec![CacheOutcome::Hit; n])
}

/// Work a processing unit performs for one pass over a WQE.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PuWork {
    pub service_ns: u64,
    /// Sum of hit and miss latencies on the path.
    pub lookup_ns: u64,
    /// Sum of miss latencies only (drives occupancy).
    pub miss_ns: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PuSlot {
    pub pu: u32,
    pub start: SimTime,
    /// Time the pass leaves the PU pipeline.
    pub done: SimTime,
    pub busy_until: SimTime,
}

/// State accounting over everything registered with a NIC.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StateAccount {
    pub qps: u64,
    pub mtt_entries: u64,
    pub mpt_entries: u64,
    pub recv_wqes: u64,
    pub send_wqes: u64,
}

/// One RNIC.
#[derive(Debug, Clone)]
pub struct Nic {
    pub cfg: NicConfig,
    pub cache: NicCache,
    pu_free: Vec<SimTime>,
    pu_busy_ns: Vec<u64>,
    account: StateAccount,
    regions: Vec<MemoryRegionMeta>,
    next_base: u64,
}

impl Nic {
    pub fn new(cfg: NicConfig) -> Self {
        let pus = cfg.num_pus as usize;
        Nic {
            cache: NicCache::new(cfg.cache_capacity_bytes),
            cfg,
            pu_free: vec![SimTime::ZERO; pus],
            pu_busy_ns: vec![0; pus],
            account: StateAccount::default(),
            regions: Vec::new(),
            next_base: 1 << 30,
        }
    }

    /// Registers a region at a NIC-chosen, suitably aligned base address.
    pub fn register_region(
        &mut self,
        length: u64,
        page_size: u64,
        is_physical_segment: bool,
    ) -> Result<MemoryRegionMeta, NicError> {
        let page = PageSize::from_bytes(page_size)?.bytes();
        let base = self.next_base.div_ceil(page) * page;
        self.register_region_at(base, length, page_size, is_physical_segment)
    }

    pub fn register_region_at(
        &mut self,
        base: u64,
        length: u64,
        page_size: u64,
        is_physical_segment: bool,
    ) -> Result<MemoryRegionMeta, NicError> {
        let meta = region_meta(
            self.regions.len() as u32,
            base,
            length,
            page_size,
            is_physical_segment,
        )?;
        self.account.mtt_entries += meta.mtt_entry_count;
        self.account.mpt_entries += meta.mpt_entry_count;
        self.next_base = self.next_base.max(base + length);
        self.regions.push(meta.clone());
        Ok(meta)
    }

    pub fn region(&self, id: u32) -> Option<&MemoryRegionMeta> {
        self.regions.get(id as usize)
    }

    pub fn regions(&self) -> &[MemoryRegionMeta] {
        &self.regions
    }

    pub fn add_qp(&mut self) {
        self.account.qps += 1;
    }

    pub fn account(&self) -> StateAccount {
        self.account
    }

    pub fn account_recv_posted(&mut self, delta: i64) {
        self.account.recv_wqes = (self.account.recv_wqes as i64 + delta) as u64;
    }

    pub fn account_send_inflight(&mut self, delta: i64) {
        self.account.send_wqes = (self.account.send_wqes as i64 + delta) as u64;
    }

    /// Total trackable state bytes, by category.
    pub fn trackable_bytes(&self) -> u64 {
        let a = &self.account;
        QP_STATE_BYTES * a.qps
            + a.mtt_entries * self.cfg.mtt_entry_bytes
            + a.mpt_entries * self.cfg.mpt_entry_bytes
            + a.recv_wqes * self.cfg.recv_wqe_bytes
            + a.send_wqes * self.cfg.wqe_bytes
    }

    pub fn cache_access(
        &mut self,
        key: StateKey,
        at: SimTime,
    ) -> Result<(CacheOutcome, u64), NicError> {
        let outcome = self.cache.access(key, at)?;
        Ok((outcome, self.cfg.lookup_ns(outcome)))
    }

    /// Looks up a list of keys and folds the results into a pass description.
    pub fn lookups(
        &mut self,
        keys: &[StateKey],
        at: SimTime,
        out: &mut Vec<CacheOutcome>,
    ) -> PuWork {
        let mut work = PuWork {
            service_ns: 0,
            lookup_ns: 0,
            miss_ns: 0,
        };
        for key in keys {
            let outcome = self
                .cache
                .access(*key, at)
                .expect("state entry larger than NIC cache");
            let ns = self.cfg.lookup_ns(outcome);
            work.lookup_ns += ns;
            if outcome == CacheOutcome::Miss {
                work.miss_ns += ns;
            }
            out.push(outcome);
        }
        work
    }

    pub fn pu_of(&self, qp_id: u32) -> u32 {
        qp_id % self.cfg.num_pus
    }

    /// Queues a pass on the PU owning `qp_id`. Passes on a PU are FIFO; the
    /// PU stays occupied for the service time plus the overlapped share of
    /// miss latency.
    pub fn pu_dispatch(&mut self, qp_id: u32, at: SimTime, work: PuWork) -> PuSlot {
        let pu = self.pu_of(qp_id);
        let idx = pu as usize;
        let start = at.max(self.pu_free[idx]);
        let occupancy =
            work.service_ns + (self.cfg.miss_overlap_factor * work.miss_ns as f64).round() as u64;
        let busy_until = start + occupancy;
        self.pu_free[idx] = busy_until;
        self.pu_busy_ns[idx] += occupancy;
        PuSlot {
            pu,
            start,
            done: start + work.service_ns + work.lookup_ns,
            busy_until,
        }
    }

    pub fn pu_busy_ns(&self) -> &[u64] {
        &self.pu_busy_ns
    }
}
