//! Distributed hash table with inlined key/lock/version headers, fixed-width
//! buckets, overflow chains, and client-side address caching; plus the
//! chunked allocator that keeps the number of registered regions small.
//!
//! Slot layout: `key:u64 | lock:u64 | version:u64 | value`. Key 0 marks an
//! empty slot, so stored keys must be nonzero. A bucket is `width` slots
//! followed by an 8-byte overflow pointer; overflow nodes hold one slot and a
//! next pointer. Pointers encode `(region + 1) << 48 | offset`, 0 is nil.

use std::any::Any;
use std::collections::{BTreeMap, HashMap, VecDeque};

use thiserror::Error;

use crate::dataplane::{
    Callbacks, LookupBuffer, LookupSource, NodeMemory, RemoteLoc, RpcMessage, RpcOpcode, RpcStatus,
    Runtime,
};
use crate::verbs::VerbsError;

pub const SLOT_HEADER_BYTES: u64 = 24;
pub const DEFAULT_VALUE_BYTES: u64 = 104;
pub const DEFAULT_CHUNK_BYTES: u64 = 64 << 20;
const PTR_BYTES: u64 = 8;
const OFFSET_MASK: u64 = (1 << 48) - 1;

#[derive(Debug, Error, PartialEq)]
pub enum KvError {
    #[error("allocation of {size} bytes exceeds the {chunk}-byte chunk")]
    TooLarge { size: u64, chunk: u64 },
    #[error("zero-sized allocation")]
    ZeroSize,
    #[error("invalid table configuration: {0}")]
    Config(String),
    #[error("key 0 is reserved for empty slots")]
    ReservedKey,
    #[error("key {0} already present")]
    Exists(u64),
    #[error(transparent)]
    Verbs(#[from] VerbsError),
}

/// Fixed-constant 64-bit multiplicative mix.
pub fn hash64(key: u64) -> u64 {
    let mut h = key.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    h ^= h >> 29;
    h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^ (h >> 32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotHeader {
    pub key: u64,
    pub lock: u64,
    pub version: u64,
}

impl SlotHeader {
    pub fn decode(bytes: &[u8]) -> SlotHeader {
        let at = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap());
        SlotHeader {
            key: at(0),
            lock: at(8),
            version: at(16),
        }
    }

    pub fn encode(&self) -> [u8; 24] {
        let mut out = [0u8; 24];
        out[0..8].copy_from_slice(&self.key.to_le_bytes());
        out[8..16].copy_from_slice(&self.lock.to_le_bytes());
        out[16..24].copy_from_slice(&self.version.to_le_bytes());
        out
    }
}

/// Encoded address of a slot in its home node's memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SlotAddr {
    pub region: u32,
    pub offset: u64,
}

impl SlotAddr {
    pub fn encode(self) -> u64 {
        ((self.region as u64 + 1) << 48) | (self.offset & OFFSET_MASK)
    }

    pub fn decode(v: u64) -> Option<SlotAddr> {
        if v == 0 {
            return None;
        }
        Some(SlotAddr {
            region: ((v >> 48) - 1) as u32,
            offset: v & OFFSET_MASK,
        })
    }
}

/// A decoded slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotView {
    pub addr: SlotAddr,
    pub header: SlotHeader,
    pub value: Vec<u8>,
}

/// Sizing of one node's share of the table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TableConfig {
    pub n_buckets: u64,
    pub bucket_width: u64,
    pub value_bytes: u64,
    pub occupancy_target: f64,
    pub chunk_bytes: u64,
    /// Client address-cache entries per node; 0 means unbounded.
    pub address_cache_capacity: usize,
    pub page_size: u64,
    /// When false, clients skip the one-sided read and go straight to RPC.
    pub one_sided_reads: bool,
}

impl Default for TableConfig {
    fn default() -> Self {
        TableConfig {
            n_buckets: 1024,
            bucket_width: 1,
            value_bytes: DEFAULT_VALUE_BYTES,
            occupancy_target: 0.6,
            chunk_bytes: DEFAULT_CHUNK_BYTES,
            address_cache_capacity: 0,
            page_size: 2 << 20,
            one_sided_reads: true,
        }
    }
}

/// Smallest power-of-two bucket count keeping `keys` at or below `occupancy`.
pub fn buckets_for(keys: u64, width: u64, occupancy: f64) -> Result<u64, KvError> {
    if keys == 0 || width == 0 || !(occupancy > 0.0 && occupancy <= 1.0) {
        return Err(KvError::Config(format!(
            "keys={keys} width={width} occupancy={occupancy}"
        )));
    }
    let need = (keys as f64 / (occupancy * width as f64)).ceil() as u64;
    Ok(need.max(1).next_power_of_two())
}

impl TableConfig {
    /// Sizes each node's bucket array for `key_count` keys spread over `n_nodes`.
    pub fn configure(
        key_count: u64,
        n_nodes: usize,
        bucket_width: u64,
        occupancy_target: f64,
    ) -> Result<TableConfig, KvError> {
        let per_node = key_count.div_ceil(n_nodes as u64);
        Ok(TableConfig {
            n_buckets: buckets_for(per_node, bucket_width, occupancy_target)?,
            bucket_width,
            occupancy_target,
            ..Default::default()
        })
    }

    pub fn validate(&self) -> Result<(), KvError> {
        if self.n_buckets == 0 || !self.n_buckets.is_power_of_two() {
            return Err(KvError::Config(format!(
                "n_buckets {} is not a power of two",
                self.n_buckets
            )));
        }
        if self.bucket_width == 0 || self.value_bytes == 0 {
            return Err(KvError::Config(
                "bucket width and value size must be positive".into(),
            ));
        }
        if self.chunk_bytes < self.node_bytes() {
            return Err(KvError::Config(
                "chunk smaller than an overflow node".into(),
            ));
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout {
            slot_bytes: SLOT_HEADER_BYTES + self.value_bytes,
            bucket_width: self.bucket_width,
            value_bytes: self.value_bytes,
        }
    }

    fn bucket_bytes(&self) -> u64 {
        self.bucket_width * self.layout().slot_bytes + PTR_BYTES
    }

    fn node_bytes(&self) -> u64 {
        self.layout().slot_bytes + PTR_BYTES
    }
}

/// Byte geometry clients need to interpret read buffers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub slot_bytes: u64,
    pub bucket_width: u64,
    pub value_bytes: u64,
}

impl Layout {
    /// Finds `key` in a lookup buffer (one-sided read or READ reply).
    pub fn extract(&self, key: u64, buf: &LookupBuffer) -> Option<SlotView> {
        match buf.source {
            LookupSource::Read(loc) => buf
                .bytes
                .chunks_exact(self.slot_bytes as usize)
                .enumerate()
                .find(|(_, s)| SlotHeader::decode(s).key == key)
                .map(|(i, s)| SlotView {
                    addr: SlotAddr {
                        region: loc.region,
                        offset: loc.offset + i as u64 * self.slot_bytes,
                    },
                    header: SlotHeader::decode(s),
                    value: s[SLOT_HEADER_BYTES as usize..].to_vec(),
                }),
            LookupSource::Rpc { .. } => self
                .decode_addressed(&buf.bytes)
                .filter(|v| v.header.key == key),
        }
    }

    /// Decodes an `[address][slot]` reply payload.
    pub fn decode_addressed(&self, bytes: &[u8]) -> Option<SlotView> {
        if (bytes.len() as u64) < PTR_BYTES + self.slot_bytes {
            return None;
        }
        let addr = SlotAddr::decode(u64::from_le_bytes(bytes[0..8].try_into().unwrap()))?;
        let slot = &bytes[8..(8 + self.slot_bytes) as usize];
        Some(SlotView {
            addr,
            header: SlotHeader::decode(slot),
            value: slot[SLOT_HEADER_BYTES as usize..].to_vec(),
        })
    }
}

/// Registers regions on behalf of an allocator.
pub trait Registrar {
    fn register(&mut self, length: u64) -> Result<u32, KvError>;
}

/// Registrar over a node's memory with a fixed page size.
pub struct NodeRegistrar<'m, 'a> {
    pub mem: &'m mut NodeMemory<'a>,
    pub page_size: u64,
}

impl Registrar for NodeRegistrar<'_, '_> {
    fn register(&mut self, length: u64) -> Result<u32, KvError> {
        let len = length.div_ceil(self.page_size) * self.page_size;
        Ok(self
            .mem
            .register_region(len, self.page_size, false)?
            .region_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub region_id: u32,
    pub length: u64,
    pub bump: u64,
}

/// Bump allocator over a few large registered chunks, with exact-size
/// free lists for reuse. Chunks are never deregistered.
#[derive(Debug, Clone)]
pub struct ContiguousAllocator {
    chunk_bytes: u64,
    chunks: Vec<Chunk>,
    free: BTreeMap<u64, Vec<SlotAddr>>,
    allocated: u64,
}

impl ContiguousAllocator {
    pub fn new(chunk_bytes: u64) -> Self {
        ContiguousAllocator {
            chunk_bytes,
            chunks: Vec::new(),
            free: BTreeMap::new(),
            allocated: 0,
        }
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn regions(&self) -> usize {
        self.chunks.len()
    }

    pub fn allocated_bytes(&self) -> u64 {
        self.allocated
    }

    pub fn alloc(&mut self, size: u64, reg: &mut dyn Registrar) -> Result<SlotAddr, KvError> {
        if size == 0 {
            return Err(KvError::ZeroSize);
        }
        if size > self.chunk_bytes {
            return Err(KvError::TooLarge {
                size,
                chunk: self.chunk_bytes,
            });
        }
        if let Some(addr) = self.free.get_mut(&size).and_then(|v| v.pop()) {
            self.allocated += size;
            return Ok(addr);
        }
        let chunk = match self.chunks.iter().position(|c| c.length - c.bump >= size) {
            Some(i) => i,
            None => {
                let region_id = reg.register(self.chunk_bytes)?;
                self.chunks.push(Chunk {
                    region_id,
                    length: self.chunk_bytes,
                    bump: 0,
                });
                self.chunks.len() - 1
            }
        };
        let c = &mut self.chunks[chunk];
        let addr = SlotAddr {
            region: c.region_id,
            offset: c.bump,
        };
        c.bump += size;
        self.allocated += size;
        Ok(addr)
    }

    pub fn free(&mut self, addr: SlotAddr, size: u64) {
        self.allocated -= size;
        self.free.entry(size).or_default().push(addr);
    }
}

/// Baseline that registers a separate region for every allocation.
#[derive(Debug, Default)]
pub struct NaiveAllocator {
    regions: usize,
}

impl NaiveAllocator {
    pub fn alloc(&mut self, size: u64, reg: &mut dyn Registrar) -> Result<SlotAddr, KvError> {
        if size == 0 {
            return Err(KvError::ZeroSize);
        }
        let region = reg.register(size)?;
        self.regions += 1;
        Ok(SlotAddr { region, offset: 0 })
    }

    pub fn regions(&self) -> usize {
        self.regions
    }
}

/// Client-side key → address hints with FIFO eviction.
#[derive(Debug, Clone, Default)]
pub struct AddressCache {
    capacity: usize,
    map: HashMap<u64, RemoteLoc>,
    order: VecDeque<u64>,
    pub hits: u64,
    pub misses: u64,
}

impl AddressCache {
    pub fn new(capacity: usize) -> Self {
        AddressCache {
            capacity,
            ..Default::default()
        }
    }

    pub fn get(&mut self, key: u64) -> Option<RemoteLoc> {
        let hit = self.map.get(&key).copied();
        if hit.is_some() {
            self.hits += 1;
        } else {
            self.misses += 1;
        }
        hit
    }

    pub fn insert(&mut self, key: u64, loc: RemoteLoc) {
        if self.map.insert(key, loc).is_none() {
            self.order.push_back(key);
            if self.capacity > 0 && self.map.len() > self.capacity {
                while let Some(old) = self.order.pop_front() {
                    if self.map.remove(&old).is_some() {
                        break;
                    }
                }
            }
        }
    }

    pub fn invalidate(&mut self, key: u64) {
        // The order queue keeps the stale key; eviction skips it.
        self.map.remove(&key);
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Counters kept by a node's handler.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TableStats {
    pub chain_hops: u64,
    pub inserts: u64,
    pub deletes: u64,
    pub updates: u64,
    pub lock_conflicts: u64,
}

/// One node's instance of the table: server-side partition plus client cache.
pub struct HashTable {
    node: usize,
    n_nodes: usize,
    cfg: TableConfig,
    bucket_region: u32,
    allocator: ContiguousAllocator,
    /// Versions reached by deleted keys, so a re-insert continues the sequence.
    tombstones: HashMap<u64, u64>,
    pub cache: AddressCache,
    pub stats: TableStats,
}

/// Builds request payloads for the table's RPCs.
pub mod request {
    pub fn read(key: u64) -> Vec<u8> {
        key.to_le_bytes().to_vec()
    }

    pub fn keyed(key: u64, tx: u64) -> Vec<u8> {
        let mut v = key.to_le_bytes().to_vec();
        v.extend_from_slice(&tx.to_le_bytes());
        v
    }

    pub fn with_value(key: u64, tx: u64, value: &[u8]) -> Vec<u8> {
        let mut v = keyed(key, tx);
        v.extend_from_slice(value);
        v
    }
}

fn u64_at(b: &[u8], i: usize) -> Option<u64> {
    b.get(i..i + 8)
        .map(|s| u64::from_le_bytes(s.try_into().unwrap()))
}

impl HashTable {
    /// Registers the bucket array on every node and installs a handler
    /// instance per node under `object_id`.
    pub fn install(rt: &mut Runtime, object_id: u16, cfg: TableConfig) -> Result<(), KvError> {
        cfg.validate()?;
        let n = rt.world().n_nodes();
        for node in 0..n {
            let region = {
                let mut w = rt.world_mut();
                let bytes = cfg.n_buckets * cfg.bucket_bytes();
                let len = bytes.div_ceil(cfg.page_size) * cfg.page_size;
                w.fabric
                    .register_region(node, len, cfg.page_size, false)?
                    .region_id
            };
            let table = HashTable {
                node,
                n_nodes: n,
                cfg,
                bucket_region: region,
                allocator: ContiguousAllocator::new(cfg.chunk_bytes),
                tombstones: HashMap::new(),
                cache: AddressCache::new(cfg.address_cache_capacity),
                stats: TableStats::default(),
            };
            rt.register_handler(node, object_id, Box::new(table))
                .map_err(|e| KvError::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Loads `key → value` at version 0 directly into the home node's memory.
    pub fn load(rt: &mut Runtime, object_id: u16, key: u64, value: &[u8]) -> Result<(), KvError> {
        let home = {
            let mut w = rt.world_mut();
            let t = w
                .handler_mut::<HashTable>(0, object_id)
                .expect("table installed");
            t.home(key)
        };
        rt.world_mut()
            .with_handler::<HashTable, _>(home, object_id, |t, mem| {
                t.insert_local(mem, key, value, Some(0)).map(|_| ())
            })
    }

    pub fn layout(&self) -> Layout {
        self.cfg.layout()
    }

    pub fn config(&self) -> &TableConfig {
        &self.cfg
    }

    pub fn allocator(&self) -> &ContiguousAllocator {
        &self.allocator
    }

    pub fn bucket_of(&self, key: u64) -> u64 {
        hash64(key) & (self.cfg.n_buckets - 1)
    }

    fn bucket_offset(&self, bucket: u64) -> u64 {
        bucket * self.cfg.bucket_bytes()
    }

    fn slot_bytes(&self) -> u64 {
        self.cfg.layout().slot_bytes
    }

    fn read_header(&self, mem: &NodeMemory<'_>, at: SlotAddr) -> SlotHeader {
        SlotHeader::decode(&mem.read(at.region, at.offset, SLOT_HEADER_BYTES))
    }

    fn write_header(&self, mem: &mut NodeMemory<'_>, at: SlotAddr, h: SlotHeader) {
        mem.write(at.region, at.offset, &h.encode());
    }

    fn read_ptr(&self, mem: &NodeMemory<'_>, at: SlotAddr) -> Option<SlotAddr> {
        SlotAddr::decode(u64::from_le_bytes(
            mem.read(at.region, at.offset, PTR_BYTES)
                .try_into()
                .unwrap(),
        ))
    }

    fn write_ptr(&self, mem: &mut NodeMemory<'_>, at: SlotAddr, to: Option<SlotAddr>) {
        let v = to.map_or(0, SlotAddr::encode);
        mem.write(at.region, at.offset, &v.to_le_bytes());
    }

    fn bucket_slots(&self, bucket: u64) -> impl Iterator<Item = SlotAddr> + '_ {
        let base = self.bucket_offset(bucket);
        (0..self.cfg.bucket_width).map(move |i| SlotAddr {
            region: self.bucket_region,
            offset: base + i * self.slot_bytes(),
        })
    }

    fn bucket_ptr(&self, bucket: u64) -> SlotAddr {
        SlotAddr {
            region: self.bucket_region,
            offset: self.bucket_offset(bucket) + self.cfg.bucket_width * self.slot_bytes(),
        }
    }

    /// Locates `key`; returns the slot and, for chained slots, the pointer
    /// cell that links to its node.
    fn find(&mut self, mem: &NodeMemory<'_>, key: u64) -> Option<(SlotAddr, Option<SlotAddr>)> {
        let b = self.bucket_of(key);
        for s in self.bucket_slots(b) {
            if self.read_header(mem, s).key == key {
                return Some((s, None));
            }
        }
        let mut link = self.bucket_ptr(b);
        let mut hops = 0u64;
        while let Some(node) = self.read_ptr(mem, link) {
            hops += 1;
            if self.read_header(mem, node).key == key {
                self.stats.chain_hops += hops;
                return Some((node, Some(link)));
            }
            link = SlotAddr {
                region: node.region,
                offset: node.offset + self.slot_bytes(),
            };
        }
        self.stats.chain_hops += hops;
        None
    }

    fn slot(&self, mem: &NodeMemory<'_>, at: SlotAddr) -> Vec<u8> {
        mem.read(at.region, at.offset, self.slot_bytes())
    }

    fn addressed(&self, mem: &NodeMemory<'_>, at: SlotAddr) -> Vec<u8> {
        let mut out = at.encode().to_le_bytes().to_vec();
        out.extend(self.slot(mem, at));
        out
    }

    fn padded_value(&self, value: &[u8]) -> Vec<u8> {
        let mut v = value.to_vec();
        v.resize(self.cfg.value_bytes as usize, 0);
        v
    }

    /// Server-side insert. `version` overrides the version sequence (bulk load).
    pub fn insert_local(
        &mut self,
        mem: &mut NodeMemory<'_>,
        key: u64,
        value: &[u8],
        version: Option<u64>,
    ) -> Result<(SlotAddr, u64), KvError> {
        if key == 0 {
            return Err(KvError::ReservedKey);
        }
        if self.find(mem, key).is_some() {
            return Err(KvError::Exists(key));
        }
        let version = version.unwrap_or_else(|| self.tombstones.get(&key).map_or(1, |v| v + 1));
        self.tombstones.remove(&key);
        let b = self.bucket_of(key);
        let free = self
            .bucket_slots(b)
            .find(|&s| self.read_header(mem, s).key == 0);
        let at = match free {
            Some(s) => s,
            None => {
                let size = self.cfg.node_bytes();
                let page = self.cfg.page_size;
                let node = self.allocator.alloc(
                    size,
                    &mut NodeRegistrar {
                        mem,
                        page_size: page,
                    },
                )?;
                // Prepend to the chain.
                let head = self.read_ptr(mem, self.bucket_ptr(b));
                let next_cell = SlotAddr {
                    region: node.region,
                    offset: node.offset + self.slot_bytes(),
                };
                self.write_ptr(mem, next_cell, head);
                self.write_ptr(mem, self.bucket_ptr(b), Some(node));
                node
            }
        };
        let mut bytes = SlotHeader {
            key,
            lock: 0,
            version,
        }
        .encode()
        .to_vec();
        bytes.extend(self.padded_value(value));
        mem.write(at.region, at.offset, &bytes);
        self.stats.inserts += 1;
        Ok((at, version))
    }

    /// Server-side lookup, for tests and oracles.
    pub fn get_local(&mut self, mem: &NodeMemory<'_>, key: u64) -> Option<SlotView> {
        let (at, _) = self.find(mem, key)?;
        let s = self.slot(mem, at);
        Some(SlotView {
            addr: at,
            header: SlotHeader::decode(&s),
            value: s[SLOT_HEADER_BYTES as usize..].to_vec(),
        })
    }

    /// Server-side unconditional update; bumps the version.
    pub fn update_local(
        &mut self,
        mem: &mut NodeMemory<'_>,
        key: u64,
        value: &[u8],
    ) -> Option<u64> {
        let (at, _) = self.find(mem, key)?;
        let h = self.read_header(mem, at);
        let version = h.version + 1;
        self.write_header(mem, at, SlotHeader { version, ..h });
        mem.write(
            at.region,
            at.offset + SLOT_HEADER_BYTES,
            &self.padded_value(value),
        );
        self.stats.updates += 1;
        Some(version)
    }

    /// Server-side delete; returns the version the key reached.
    pub fn delete_local(&mut self, mem: &mut NodeMemory<'_>, key: u64) -> Option<u64> {
        let (at, link) = self.find(mem, key)?;
        let h = self.read_header(mem, at);
        let version = h.version + 1;
        match link {
            None => mem.write(at.region, at.offset, &vec![0u8; self.slot_bytes() as usize]),
            Some(link) => {
                let next_cell = SlotAddr {
                    region: at.region,
                    offset: at.offset + self.slot_bytes(),
                };
                let next = self.read_ptr(mem, next_cell);
                self.write_ptr(mem, link, next);
                mem.write(
                    at.region,
                    at.offset,
                    &vec![0u8; self.cfg.node_bytes() as usize],
                );
                self.allocator.free(at, self.cfg.node_bytes());
            }
        }
        self.tombstones.insert(key, version);
        self.stats.deletes += 1;
        Some(version)
    }

    /// Walks every bucket and chain. Returns (key, address) pairs, or an
    /// error naming the first structural problem found.
    pub fn walk(&mut self, mem: &NodeMemory<'_>) -> Result<Vec<(u64, SlotAddr)>, String> {
        let mut out = Vec::new();
        for b in 0..self.cfg.n_buckets {
            for s in self.bucket_slots(b).collect::<Vec<_>>() {
                let k = self.read_header(mem, s).key;
                if k != 0 {
                    out.push((k, s));
                }
            }
            let mut seen = std::collections::HashSet::new();
            let mut link = self.bucket_ptr(b);
            while let Some(node) = self.read_ptr(mem, link) {
                if !seen.insert(node) {
                    return Err(format!("cycle in bucket {b}"));
                }
                let k = self.read_header(mem, node).key;
                if k == 0 {
                    return Err(format!("empty node on chain of bucket {b}"));
                }
                out.push((k, node));
                link = SlotAddr {
                    region: node.region,
                    offset: node.offset + self.slot_bytes(),
                };
            }
        }
        for &(k, _) in &out {
            if self.home(k) != self.node {
                return Err(format!(
                    "key {k} stored on node {} but homed on {}",
                    self.node,
                    self.home(k)
                ));
            }
        }
        let mut keys: Vec<u64> = out.iter().map(|&(k, _)| k).collect();
        keys.sort_unstable();
        if keys.windows(2).any(|w| w[0] == w[1]) {
            return Err("duplicate key".into());
        }
        for &(k, at) in &out {
            let found = self.find(mem, k).map(|(a, _)| a);
            if found != Some(at) {
                return Err(format!("key {k} not reachable from its bucket"));
            }
        }
        Ok(out)
    }

    fn loc(&self, node: usize, at: SlotAddr, len: u64) -> RemoteLoc {
        RemoteLoc {
            node,
            region: at.region,
            offset: at.offset,
            len,
        }
    }

    fn handle(&mut self, mem: &mut NodeMemory<'_>, req: &RpcMessage) -> RpcMessage {
        let p = &req.payload;
        let Some(key) = u64_at(p, 0) else {
            return req.reply(RpcStatus::BadRequest, Vec::new());
        };
        let tx = u64_at(p, 8).unwrap_or(0);
        let vb = self.cfg.value_bytes as usize;
        let value = p.get(16..).map(|v| &v[..v.len().min(vb)]).unwrap_or(&[]);
        match req.header.opcode {
            RpcOpcode::Read => match self.find(mem, key) {
                Some((at, _)) => {
                    let h = self.read_header(mem, at);
                    let status = if h.lock != 0 {
                        RpcStatus::LockBusy
                    } else {
                        RpcStatus::Ok
                    };
                    req.reply(status, self.addressed(mem, at))
                }
                None => req.reply(RpcStatus::NotFound, Vec::new()),
            },
            RpcOpcode::LockRead => match self.find(mem, key) {
                Some((at, _)) => {
                    let h = self.read_header(mem, at);
                    if h.lock != 0 && h.lock != tx {
                        self.stats.lock_conflicts += 1;
                        return req.reply(RpcStatus::LockBusy, Vec::new());
                    }
                    self.write_header(mem, at, SlotHeader { lock: tx, ..h });
                    req.reply(RpcStatus::Ok, self.addressed(mem, at))
                }
                None => req.reply(RpcStatus::NotFound, Vec::new()),
            },
            RpcOpcode::UpdateUnlock => match self.find(mem, key) {
                Some((at, _)) => {
                    let h = self.read_header(mem, at);
                    if h.lock != tx || tx == 0 {
                        return req.reply(RpcStatus::BadRequest, Vec::new());
                    }
                    let version = h.version + 1;
                    mem.write(
                        at.region,
                        at.offset + SLOT_HEADER_BYTES,
                        &self.padded_value(value),
                    );
                    self.write_header(
                        mem,
                        at,
                        SlotHeader {
                            key,
                            lock: 0,
                            version,
                        },
                    );
                    self.stats.updates += 1;
                    req.reply(RpcStatus::Ok, version.to_le_bytes().to_vec())
                }
                None => req.reply(RpcStatus::NotFound, Vec::new()),
            },
            RpcOpcode::Unlock => {
                if let Some((at, _)) = self.find(mem, key) {
                    let h = self.read_header(mem, at);
                    if h.lock == tx {
                        self.write_header(mem, at, SlotHeader { lock: 0, ..h });
                    }
                }
                req.reply(RpcStatus::Ok, Vec::new())
            }
            RpcOpcode::Insert => match self.insert_local(mem, key, value, None) {
                Ok((at, version)) => {
                    let mut out = at.encode().to_le_bytes().to_vec();
                    out.extend_from_slice(&version.to_le_bytes());
                    req.reply(RpcStatus::Ok, out)
                }
                Err(KvError::Exists(_)) => req.reply(RpcStatus::Exists, Vec::new()),
                Err(KvError::ReservedKey) => req.reply(RpcStatus::BadRequest, Vec::new()),
                Err(e) => panic!("insert failed: {e}"),
            },
            RpcOpcode::Delete => match self.find(mem, key) {
                Some((at, _)) => {
                    let h = self.read_header(mem, at);
                    if h.lock != 0 && h.lock != tx {
                        self.stats.lock_conflicts += 1;
                        return req.reply(RpcStatus::LockBusy, Vec::new());
                    }
                    let v = self.delete_local(mem, key).expect("found above");
                    req.reply(RpcStatus::Ok, v.to_le_bytes().to_vec())
                }
                None => req.reply(RpcStatus::NotFound, Vec::new()),
            },
            _ => req.reply(RpcStatus::BadRequest, Vec::new()),
        }
    }
}

impl Callbacks for HashTable {
    fn home(&self, key: u64) -> usize {
        ((hash64(key) >> 40) % self.n_nodes as u64) as usize
    }

    fn lookup_start(&mut self, key: u64) -> Option<RemoteLoc> {
        if !self.cfg.one_sided_reads {
            return None;
        }
        if let Some(loc) = self.cache.get(key) {
            return Some(loc);
        }
        let home = self.home(key);
        let at = SlotAddr {
            region: self.bucket_region,
            offset: self.bucket_offset(self.bucket_of(key)),
        };
        Some(self.loc(home, at, self.cfg.bucket_width * self.slot_bytes()))
    }

    fn lookup_end(&mut self, key: u64, buffer: &LookupBuffer) -> bool {
        let layout = self.layout();
        let (node, view) = match buffer.source {
            LookupSource::Read(loc) => (loc.node, layout.extract(key, buffer)),
            LookupSource::Rpc { node, status } => {
                if status == RpcStatus::NotFound {
                    self.cache.invalidate(key);
                    return false;
                }
                (node, layout.extract(key, buffer))
            }
        };
        match view {
            Some(v) if v.header.lock == 0 => {
                let loc = self.loc(node, v.addr, layout.slot_bytes);
                self.cache.insert(key, loc);
                true
            }
            Some(_) => false,
            None => {
                self.cache.invalidate(key);
                false
            }
        }
    }

    fn rpc_handler(&mut self, mem: &mut NodeMemory<'_>, request: &RpcMessage) -> RpcMessage {
        self.handle(mem, request)
    }

    fn read_request(&self, key: u64) -> Vec<u8> {
        request::read(key)
    }

    fn as_any(&mut self) -> &mut dyn Any {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataplane::DataplaneConfig;
    use crate::nic::Preset;

    struct Counting {
        next: u32,
    }
    impl Registrar for Counting {
        fn register(&mut self, _len: u64) -> Result<u32, KvError> {
            self.next += 1;
            Ok(self.next - 1)
        }
    }

    fn rt_with_table(cfg: TableConfig) -> Runtime {
        let mut rt = Runtime::new(2, &Preset::default(), DataplaneConfig::default(), 3).unwrap();
        HashTable::install(&mut rt, 1, cfg).unwrap();
        rt
    }

    #[test]
    fn sizing_arithmetic() {
        assert_eq!(buckets_for(1_000_000, 1, 0.6).unwrap(), 1 << 21);
        assert!(buckets_for(0, 1, 0.6).is_err());
        assert!(buckets_for(10, 0, 0.6).is_err());
    }

    #[test]
    fn small_allocations_share_one_chunk() {
        let mut a = ContiguousAllocator::new(64 << 20);
        let mut r = Counting { next: 0 };
        for _ in 0..1000 {
            a.alloc(1024, &mut r).unwrap();
        }
        assert_eq!(a.regions(), 1);
    }

    #[test]
    fn exhausting_a_chunk_registers_another() {
        let mut a = ContiguousAllocator::new(64 << 20);
        let mut r = Counting { next: 0 };
        for _ in 0..65 {
            a.alloc(1 << 20, &mut r).unwrap();
        }
        assert_eq!(a.regions(), 2);
        assert!(matches!(
            a.alloc(65 << 20, &mut r),
            Err(KvError::TooLarge { .. })
        ));
    }

    #[test]
    fn freed_space_is_reused() {
        let mut a = ContiguousAllocator::new(4096);
        let mut r = Counting { next: 0 };
        let x = a.alloc(128, &mut r).unwrap();
        a.free(x, 128);
        assert_eq!(a.alloc(128, &mut r).unwrap(), x);
    }

    #[test]
    fn naive_allocator_registers_per_allocation() {
        let mut n = NaiveAllocator::default();
        let mut r = Counting { next: 0 };
        for _ in 0..1000 {
            n.alloc(64, &mut r).unwrap();
        }
        assert_eq!(n.regions(), 1000);
    }

    #[test]
    fn slot_addr_round_trip() {
        let a = SlotAddr {
            region: 3,
            offset: 12345,
        };
        assert_eq!(SlotAddr::decode(a.encode()), Some(a));
        assert_eq!(SlotAddr::decode(0), None);
        let z = SlotAddr {
            region: 0,
            offset: 0,
        };
        assert_eq!(SlotAddr::decode(z.encode()), Some(z));
    }

    #[test]
    fn chained_keys_survive_deletes() {
        let cfg = TableConfig {
            n_buckets: 1,
            ..Default::default()
        };
        let rt = rt_with_table(cfg);
        let mut w = rt.world_mut();
        w.with_handler::<HashTable, _>(0, 1, |t, mem| {
            let keys: Vec<u64> = (1..).filter(|&k| t.home(k) == 0).take(6).collect();
            for &k in &keys {
                t.insert_local(mem, k, &[k as u8], Some(0)).unwrap();
            }
            assert_eq!(t.stats.inserts, 6);
            t.delete_local(mem, keys[0]).unwrap();
            t.delete_local(mem, keys[3]).unwrap();
            let mut left: Vec<u64> = t.walk(mem).unwrap().into_iter().map(|(k, _)| k).collect();
            left.sort();
            assert_eq!(left, vec![keys[1], keys[2], keys[4], keys[5]]);
            assert_eq!(t.get_local(mem, keys[4]).unwrap().value[0], keys[4] as u8);
            // Re-insert continues the version sequence.
            let (_, v) = t.insert_local(mem, keys[3], &[9], None).unwrap();
            assert_eq!(v, 2);
        });
    }

    #[test]
    fn lookup_start_guesses_bucket_then_uses_cache() {
        let rt = rt_with_table(TableConfig::default());
        let mut w = rt.world_mut();
        let t = w.handler_mut::<HashTable>(0, 1).unwrap();
        let key = 77;
        let guess = t.lookup_start(key).unwrap();
        assert_eq!(guess.offset, t.bucket_of(key) * t.cfg.bucket_bytes());
        assert_eq!(guess.len, 128);
        let cached = RemoteLoc {
            node: guess.node,
            region: 5,
            offset: 640,
            len: 128,
        };
        t.cache.insert(key, cached);
        assert_eq!(t.lookup_start(key), Some(cached));
    }

    #[test]
    fn lookup_end_rules() {
        let rt = rt_with_table(TableConfig::default());
        let mut w = rt.world_mut();
        let t = w.handler_mut::<HashTable>(0, 1).unwrap();
        let loc = RemoteLoc {
            node: 1,
            region: 1,
            offset: 0,
            len: 128,
        };
        let mut slot = SlotHeader {
            key: 9,
            lock: 0,
            version: 3,
        }
        .encode()
        .to_vec();
        slot.resize(128, 0);
        let ok = LookupBuffer {
            bytes: slot.clone(),
            source: LookupSource::Read(loc),
        };
        assert!(t.lookup_end(9, &ok));
        assert_eq!(t.cache.len(), 1);
        assert!(!t.lookup_end(10, &ok));
        let mut locked = SlotHeader {
            key: 9,
            lock: 77,
            version: 3,
        }
        .encode()
        .to_vec();
        locked.resize(128, 0);
        let locked = LookupBuffer {
            bytes: locked,
            source: LookupSource::Read(loc),
        };
        assert!(!t.lookup_end(9, &locked));
    }

    #[test]
    fn wide_buckets_read_whole_bucket() {
        let rt = rt_with_table(TableConfig {
            bucket_width: 8,
            ..Default::default()
        });
        let mut w = rt.world_mut();
        let t = w.handler_mut::<HashTable>(0, 1).unwrap();
        assert_eq!(t.lookup_start(5).unwrap().len, 8 * 128);
    }
}
