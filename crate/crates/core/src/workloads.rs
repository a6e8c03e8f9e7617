//! Workload generators and the experiment drivers built on them.

use std::cell::RefCell;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Zipf};
use thiserror::Error;

use crate::dataplane::{DataplaneConfig, DataplaneError, PathCounters, Runtime};
use crate::kvstore::{HashTable, KvError, TableConfig};
use crate::nic::{LatencyBreakdown, Preset, CACHELINE};
use crate::oracle::Store;
use crate::sim::{EventLog, SeededRng, SimTime};
use crate::txengine::{TxEngine, TxError, TxRecord, TxStatus, WriteKind, WriteRecord};
use crate::verbs::{
    CompletionKind, CompletionStatus, Fabric, LocalBuf, QpId, RecvBuf, RemoteAddr, Step, Transport,
    VerbsError,
};

/// Object id the hash table is registered under.
pub const TABLE_OBJECT: u16 = 1;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid workload: {0}")]
    Spec(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Dataplane(#[from] DataplaneError),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Verbs(#[from] VerbsError),
    #[error(transparent)]
    Tx(#[from] TxError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkloadKind {
    KvLookups,
    TatpLite,
    SyncMirroring,
    RandomReads,
}

impl WorkloadKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kv_lookups" | "kvlookups" => Some(Self::KvLookups),
            "tatp_lite" | "tatplite" => Some(Self::TatpLite),
            "sync_mirroring" | "syncmirroring" => Some(Self::SyncMirroring),
            "random_reads" | "randomreads" => Some(Self::RandomReads),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::KvLookups => "kv_lookups",
            Self::TatpLite => "tatp_lite",
            Self::SyncMirroring => "sync_mirroring",
            Self::RandomReads => "random_reads",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KeyDistribution {
    Uniform,
    Zipf(f64),
}

impl KeyDistribution {
    /// Accepts `uniform`, `zipf` (θ = 0.99) or `zipf:<θ>`.
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "uniform" => Some(Self::Uniform),
            "zipf" => Some(Self::Zipf(0.99)),
            _ => s
                .strip_prefix("zipf:")
                .and_then(|t| t.parse().ok())
                .filter(|t: &f64| *t > 0.0)
                .map(Self::Zipf),
        }
    }
}

/// Draws keys in `1..=n`.
#[derive(Debug, Clone)]
pub struct KeySampler {
    n: u64,
    zipf: Option<Zipf<f64>>,
}

impl KeySampler {
    pub fn new(n: u64, dist: KeyDistribution) -> Result<Self, WorkloadError> {
        if n == 0 {
            return Err(WorkloadError::Spec("key_count must be positive".into()));
        }
        let zipf = match dist {
            KeyDistribution::Uniform => None,
            KeyDistribution::Zipf(theta) => Some(
                Zipf::new(n as f64, theta)
                    .map_err(|e| WorkloadError::Spec(format!("zipf: {e}")))?,
            ),
        };
        Ok(KeySampler { n, zipf })
    }

    pub fn sample(&self, rng: &mut SeededRng) -> u64 {
        match &self.zipf {
            None => 1 + rng.below(self.n),
            Some(z) => (z.sample(rng.rng()) as u64).clamp(1, self.n),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpMix {
    pub read_frac: f64,
    pub write_frac: f64,
    pub insert_frac: f64,
    pub delete_frac: f64,
}

impl OpMix {
    pub fn reads_only() -> Self {
        OpMix {
            read_frac: 1.0,
            write_frac: 0.0,
            insert_frac: 0.0,
            delete_frac: 0.0,
        }
    }

    pub fn tatp() -> Self {
        OpMix {
            read_frac: 0.80,
            write_frac: 0.16,
            insert_frac: 0.02,
            delete_frac: 0.02,
        }
    }

    fn weights(&self) -> [f64; 4] {
        [
            self.read_frac,
            self.write_frac,
            self.insert_frac,
            self.delete_frac,
        ]
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let w = self.weights();
        if w.iter().any(|x| x.is_nan() || *x < 0.0) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(WorkloadError::Spec(format!(
                "op mix {w:?} must be non-negative and sum to 1"
            )));
        }
        Ok(())
    }
}

/// Histogram of message sizes in cachelines.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageSizeDistribution {
    pub bins: Vec<(u64, f64)>,
}

impl MessageSizeDistribution {
    /// Three quarters single-cacheline messages, the rest spread evenly over
    /// powers of two up to 256 cachelines.
    pub fn sync_mirroring() -> Self {
        let big = [2u64, 4, 8, 16, 32, 64, 128, 256];
        let mut bins = vec![(1, 0.75)];
        bins.extend(big.iter().map(|&c| (c, 0.25 / big.len() as f64)));
        MessageSizeDistribution { bins }
    }

    pub fn fixed(cachelines: u64) -> Self {
        MessageSizeDistribution {
            bins: vec![(cachelines, 1.0)],
        }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let total: f64 = self.bins.iter().map(|b| b.1).sum();
        if self.bins.is_empty()
            || self
                .bins
                .iter()
                .any(|&(c, w)| c == 0 || c > 256 || w.is_nan() || w < 0.0)
            || (total - 1.0).abs() > 1e-9
        {
            return Err(WorkloadError::Spec(
                "size histogram needs 1..=256 cachelines with weights summing to 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    pub n_nodes: usize,
    pub threads_per_node: usize,
    pub coroutines_per_thread: usize,
    pub key_count: u64,
    pub key_distribution: KeyDistribution,
    pub op_count: usize,
    pub seed: u64,
    pub mix: OpMix,
    pub sizes: MessageSizeDistribution,
}

impl WorkloadSpec {
    pub fn new(kind: WorkloadKind) -> Self {
        WorkloadSpec {
            kind,
            n_nodes: 2,
            threads_per_node: 1,
            coroutines_per_thread: 1,
            key_count: 1024,
            key_distribution: KeyDistribution::Uniform,
            op_count: 1000,
            seed: 1,
            mix: match kind {
                WorkloadKind::TatpLite => OpMix::tatp(),
                _ => OpMix::reads_only(),
            },
            sizes: MessageSizeDistribution::sync_mirroring(),
        }
    }

    pub fn streams(&self) -> usize {
        self.n_nodes * self.threads_per_node * self.coroutines_per_thread
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.streams() == 0 {
            return Err(WorkloadError::Spec("need at least one coroutine".into()));
        }
        if self.key_count == 0 {
            return Err(WorkloadError::Spec("key_count must be positive".into()));
        }
        self.mix.validate()?;
        if self.kind == WorkloadKind::SyncMirroring {
            self.sizes.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Read { key: u64 },
    Write { key: u64 },
    Insert { key: u64 },
    Delete { key: u64 },
    Mirror { cachelines: u64 },
}

/// Largest-remainder rounding of `weights · n`; the counts sum to `n`.
pub fn quota(weights: &[f64], n: usize) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest: Vec<usize> = (0..weights.len()).collect();
    rest.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let short = n - counts.iter().sum::<usize>();
    for &i in rest.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

/// Builds one op stream per coroutine, in (node, thread, coroutine) order.
/// Op kinds are realized exactly by quota, shuffled, then dealt round-robin.
pub fn generate(spec: &WorkloadSpec) -> Result<Vec<Vec<Op>>, WorkloadError> {
    spec.validate()?;
    let mut rng = SeededRng::new(spec.seed).fork(0x5eed);
    let keys = KeySampler::new(spec.key_count, spec.key_distribution)?;
    let n = spec.op_count;

    let mut ops: Vec<Op> = match spec.kind {
        WorkloadKind::SyncMirroring => {
            let weights: Vec<f64> = spec.sizes.bins.iter().map(|b| b.1).collect();
            quota(&weights, n)
                .into_iter()
                .zip(&spec.sizes.bins)
                .flat_map(|(count, &(c, _))| {
                    std::iter::repeat_n(Op::Mirror { cachelines: c }, count)
                })
                .collect()
        }
        _ => {
            let counts = quota(&spec.mix.weights(), n);
            let mut v = Vec::with_capacity(n);
            for (i, &count) in counts.iter().enumerate() {
                v.extend(std::iter::repeat_n(i, count).map(|i| match i {
                    0 => Op::Read { key: 0 },
                    1 => Op::Write { key: 0 },
                    2 => Op::Insert { key: 0 },
                    _ => Op::Delete { key: 0 },
                }));
            }
            v
        }
    };
    ops.shuffle(rng.rng());
    for op in &mut ops {
        match op {
            Op::Read { key } | Op::Write { key } | Op::Insert { key } | Op::Delete { key } => {
                *key = keys.sample(&mut rng)
            }
            Op::Mirror { .. } => {}
        }
    }

    let s = spec.streams();
    let mut streams = vec![Vec::with_capacity(n / s + 1); s];
    for (i, op) in ops.into_iter().enumerate() {
        streams[i % s].push(op);
    }
    Ok(streams)
}

/// Deterministic initial value of `key`.
pub fn kv_value(key: u64, len: u64) -> Vec<u8> {
    key.to_le_bytes()
        .iter()
        .copied()
        .cycle()
        .take(len as usize)
        .collect()
}

/// Value a TatpLite update writes over `old`: bump the counter in the first
/// word and stamp the writer's id in the second.
pub fn tatp_update(old: &[u8], tx_id: u64) -> Vec<u8> {
    let mut v = old.to_vec();
    if v.len() < 16 {
        v.resize(16, 0);
    }
    let c = u64::from_le_bytes(v[0..8].try_into().unwrap()).wrapping_add(1);
    v[0..8].copy_from_slice(&c.to_le_bytes());
    v[8..16].copy_from_slice(&tx_id.to_le_bytes());
    v
}

/// Derivation rule for the serializability oracle.
pub fn tatp_derive(t: &TxRecord, w: &WriteRecord, old: &[u8]) -> Option<Vec<u8>> {
    (w.kind == WriteKind::Update).then(|| tatp_update(old, t.tx_id))
}

/// Table shape shared by the lookup and transaction drivers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TableShape {
    pub key_count: u64,
    pub bucket_width: u64,
    pub occupancy: f64,
    pub one_sided_reads: bool,
}

impl Default for TableShape {
    fn default() -> Self {
        TableShape {
            key_count: 4096,
            bucket_width: 1,
            occupancy: 0.6,
            one_sided_reads: true,
        }
    }
}

/// Installs the table and loads keys `1..=key_count` at version 0.
pub fn build_table(rt: &mut Runtime, shape: &TableShape) -> Result<TableConfig, WorkloadError> {
    let n = rt.world().n_nodes();
    let mut cfg = TableConfig::configure(shape.key_count, n, shape.bucket_width, shape.occupancy)?;
    cfg.one_sided_reads = shape.one_sided_reads;
    HashTable::install(rt, TABLE_OBJECT, cfg)?;
    for key in 1..=shape.key_count {
        HashTable::load(rt, TABLE_OBJECT, key, &kv_value(key, cfg.value_bytes))?;
    }
    Ok(cfg)
}

/// Committed contents of the table across all nodes, plus the number of
/// slots still holding a lock.
pub fn table_snapshot(rt: &Runtime) -> Result<(Store, usize), WorkloadError> {
    let n = rt.world().n_nodes();
    let mut store = Store::new();
    let mut locked = 0;
    for node in 0..n {
        let items = rt
            .world_mut()
            .with_handler::<HashTable, _>(node, TABLE_OBJECT, |t, mem| {
                let keys = t.walk(mem)?;
                Ok::<_, String>(
                    keys.into_iter()
                        .map(|(k, _)| t.get_local(mem, k).expect("walked key is present"))
                        .collect::<Vec<_>>(),
                )
            })
            .map_err(WorkloadError::Invariant)?;
        for v in items {
            if v.header.lock != 0 {
                locked += 1;
            }
            if store
                .insert(v.header.key, (v.header.version, v.value))
                .is_some()
            {
                return Err(WorkloadError::Invariant(format!(
                    "key {} stored twice",
                    v.header.key
                )));
            }
        }
    }
    Ok((store, locked))
}

fn attach_log(rt: &Runtime, log: &Option<EventLog>) {
    if let Some(log) = log {
        rt.world_mut()
            .fabric
            .engine
            .set_log_sink(Box::new(log.clone()));
    }
}

fn nic_hit_rate<U: crate::sim::EventKind>(f: &Fabric<U>) -> f64 {
    let (mut h, mut m) = (0u64, 0u64);
    for n in 0..f.n_nodes() {
        h += f.nic(n).cache.hits();
        m += f.nic(n).cache.misses();
    }
    if h + m == 0 {
        1.0
    } else {
        h as f64 / (h + m) as f64
    }
}

/// Nearest-rank percentile of sorted samples.
pub fn percentile(sorted: &[u64], p: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvSpec {
    pub nodes: usize,
    pub threads: usize,
    pub coroutines: usize,
    pub table: TableShape,
    pub key_distribution: KeyDistribution,
    /// Only look up keys homed on another node.
    pub remote_only: bool,
    pub virtual_nodes: Option<usize>,
    pub recv_slots: usize,
    pub warmup_ns: u64,
    pub measure_ns: u64,
    pub seed: u64,
    /// Receives one line per dispatched event.
    pub log: Option<EventLog>,
}

impl Default for KvSpec {
    fn default() -> Self {
        KvSpec {
            nodes: 2,
            threads: 1,
            coroutines: 8,
            table: TableShape::default(),
            key_distribution: KeyDistribution::Uniform,
            remote_only: false,
            virtual_nodes: None,
            recv_slots: 32,
            warmup_ns: 50_000,
            measure_ns: 200_000,
            seed: 1,
            log: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvResult {
    pub nodes: usize,
    pub connections_per_node: usize,
    pub ops: u64,
    /// Lookups per microsecond per machine.
    pub throughput: f64,
    pub p50_ns: u64,
    pub p99_ns: u64,
    pub paths: PathCounters,
    pub cache_hit_rate: f64,
    pub wrong_values: u64,
    pub mean_breakdown: LatencyBreakdown,
}

#[derive(Default)]
struct WindowStats {
    ops: u64,
    latencies: Vec<u64>,
    wrong: u64,
}

fn runtime_for(
    preset: &Preset,
    nodes: usize,
    threads: usize,
    coroutines: usize,
    recv_slots: usize,
    virtual_nodes: Option<usize>,
    seed: u64,
) -> Result<Runtime, WorkloadError> {
    let cfg = DataplaneConfig {
        threads_per_node: threads,
        coroutines_per_thread: coroutines,
        recv_slots,
        virtual_nodes,
        ..Default::default()
    };
    Ok(Runtime::new(nodes, preset, cfg, seed)?)
}

/// Each coroutine looks up random keys back to back; throughput is counted
/// over the measurement window that follows the warmup.
pub fn run_kv_lookups(preset: &Preset, spec: &KvSpec) -> Result<KvResult, WorkloadError> {
    let mut rt = runtime_for(
        preset,
        spec.nodes,
        spec.threads,
        spec.coroutines,
        spec.recv_slots,
        spec.virtual_nodes,
        spec.seed,
    )?;
    let cfg = build_table(&mut rt, &spec.table)?;
    attach_log(&rt, &spec.log);
    let sampler = KeySampler::new(spec.table.key_count, spec.key_distribution)?;
    let mut by_home = vec![Vec::new(); spec.nodes];
    if spec.remote_only {
        let mut w = rt.world_mut();
        let t = w
            .handler_mut::<HashTable>(0, TABLE_OBJECT)
            .expect("table installed");
        for key in 1..=spec.table.key_count {
            by_home[crate::dataplane::Callbacks::home(t, key)].push(key);
        }
    }
    let by_home = Rc::new(by_home);
    let stats = Rc::new(RefCell::new(WindowStats::default()));
    let (start, end) = (spec.warmup_ns, spec.warmup_ns + spec.measure_ns);
    let value_len = cfg.value_bytes;

    for node in 0..spec.nodes {
        for thread in 0..spec.threads {
            for _ in 0..spec.coroutines {
                let (stats, sampler, by_home) = (stats.clone(), sampler.clone(), by_home.clone());
                let remote_only = spec.remote_only;
                rt.spawn(node, thread, move |ctx| async move {
                    while ctx.now().0 < end {
                        let key = if remote_only {
                            let n = by_home.len() as u64;
                            let mut rng = ctx.rng();
                            let home = (ctx.node() as u64 + 1 + rng.below(n - 1)) % n;
                            let keys = &by_home[home as usize];
                            keys[rng.below(keys.len() as u64) as usize]
                        } else {
                            sampler.sample(&mut ctx.rng())
                        };
                        let t0 = ctx.now().0;
                        let item = ctx.read_set_item(TABLE_OBJECT, key).await.expect("lookup");
                        let t1 = ctx.now().0;
                        let layout = ctx.world().with_handler::<HashTable, _>(
                            ctx.node(),
                            TABLE_OBJECT,
                            |t, _| t.layout(),
                        );
                        let ok = item.found
                            && layout
                                .extract(key, &item.buffer)
                                .is_some_and(|v| v.value == kv_value(key, value_len));
                        if (start..end).contains(&t1) {
                            let mut s = stats.borrow_mut();
                            s.ops += 1;
                            s.latencies.push(t1 - t0);
                            if !ok {
                                s.wrong += 1;
                            }
                        }
                    }
                })?;
            }
        }
    }
    rt.run_until(SimTime(start));
    rt.world_mut().fabric.reset_stats();
    rt.run_until(SimTime(end));

    let w = rt.world();
    let mut s = stats.borrow_mut();
    s.latencies.sort_unstable();
    Ok(KvResult {
        nodes: spec.virtual_nodes.unwrap_or(spec.nodes),
        connections_per_node: w.connections_per_node(),
        ops: s.ops,
        throughput: s.ops as f64 / (spec.measure_ns as f64 / 1000.0) / spec.nodes as f64,
        p50_ns: percentile(&s.latencies, 50.0),
        p99_ns: percentile(&s.latencies, 99.0),
        paths: w.paths(),
        cache_hit_rate: nic_hit_rate(&w.fabric),
        wrong_values: s.wrong,
        mean_breakdown: w.fabric.stats().mean_breakdown(),
    })
}

/// Cluster emulation: a few physical nodes allocate the connections and
/// receive buffers of `virtual_nodes` machines and look up remote keys.
#[derive(Debug, Clone, PartialEq)]
pub struct EmulationSpec {
    pub phys_nodes: usize,
    pub virtual_nodes: usize,
    pub threads: usize,
    pub coroutines: usize,
    pub recv_slots: usize,
    pub table: TableShape,
    pub warmup_ns: u64,
    pub measure_ns: u64,
    pub seed: u64,
    /// Receives one line per dispatched event.
    pub log: Option<EventLog>,
}

impl Default for EmulationSpec {
    fn default() -> Self {
        EmulationSpec {
            phys_nodes: 4,
            virtual_nodes: 32,
            threads: 20,
            coroutines: 4,
            recv_slots: 16,
            table: TableShape {
                key_count: 16384,
                one_sided_reads: false,
                ..Default::default()
            },
            warmup_ns: 100_000,
            measure_ns: 200_000,
            seed: 1,
            log: None,
        }
    }
}

pub fn emulate_cluster(preset: &Preset, spec: &EmulationSpec) -> Result<KvResult, WorkloadError> {
    if spec.virtual_nodes < spec.phys_nodes {
        return Err(WorkloadError::Spec(format!(
            "virtual nodes {} below physical nodes {}",
            spec.virtual_nodes, spec.phys_nodes
        )));
    }
    run_kv_lookups(
        preset,
        &KvSpec {
            nodes: spec.phys_nodes,
            threads: spec.threads,
            coroutines: spec.coroutines,
            table: spec.table,
            key_distribution: KeyDistribution::Uniform,
            remote_only: true,
            virtual_nodes: Some(spec.virtual_nodes),
            recv_slots: spec.recv_slots,
            warmup_ns: spec.warmup_ns,
            measure_ns: spec.measure_ns,
            seed: spec.seed,
            log: spec.log.clone(),
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TatpRun {
    /// Execute every generated op exactly once.
    Ops(usize),
    /// Cycle through the streams and count commits inside the window.
    Window { warmup_ns: u64, measure_ns: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TatpSpec {
    pub nodes: usize,
    pub threads: usize,
    pub coroutines: usize,
    pub table: TableShape,
    pub key_distribution: KeyDistribution,
    pub mix: OpMix,
    pub run: TatpRun,
    pub seed: u64,
    /// Receives one line per dispatched event.
    pub log: Option<EventLog>,
}

impl Default for TatpSpec {
    fn default() -> Self {
        TatpSpec {
            nodes: 4,
            threads: 1,
            coroutines: 2,
            table: TableShape {
                key_count: 64,
                ..Default::default()
            },
            key_distribution: KeyDistribution::Uniform,
            mix: OpMix::tatp(),
            run: TatpRun::Ops(1000),
            seed: 1,
            log: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TatpResult {
    pub records: Vec<TxRecord>,
    pub committed: u64,
    pub aborted: u64,
    /// Committed transactions per microsecond per machine.
    pub throughput: f64,
    pub p50_ns: u64,
    pub p99_ns: u64,
    pub initial: Store,
    pub final_state: Store,
    pub leaked_locks: usize,
    pub paths: PathCounters,
    pub cache_hit_rate: f64,
    pub mean_breakdown: LatencyBreakdown,
    pub connections_per_node: usize,
}

impl TatpResult {
    pub fn abort_rate(&self) -> f64 {
        let n = self.committed + self.aborted;
        if n == 0 {
            0.0
        } else {
            self.aborted as f64 / n as f64
        }
    }
}

async fn run_tx(engine: &mut TxEngine, op: Op, value_len: u64) -> Result<TxRecord, TxError> {
    match op {
        Op::Read { key } => {
            let mut tx = engine.start_tx()?;
            if engine.read(&mut tx, TABLE_OBJECT, key).await?.is_some() {
                engine.commit(&mut tx).await?;
            }
            Ok(engine.record(&tx))
        }
        Op::Write { key } => {
            let mut tx = engine.start_tx()?;
            if let Some(old) = engine.read(&mut tx, TABLE_OBJECT, key).await? {
                let new = tatp_update(&old, tx.tx_id);
                if engine.write(&mut tx, TABLE_OBJECT, key, new).await? {
                    engine.commit(&mut tx).await?;
                }
            }
            Ok(engine.record(&tx))
        }
        Op::Insert { key } => {
            engine
                .insert(TABLE_OBJECT, key, kv_value(key, value_len))
                .await
        }
        Op::Delete { key } => engine.delete(TABLE_OBJECT, key).await,
        Op::Mirror { .. } => unreachable!("mirror ops are not transactions"),
    }
}

/// TatpLite: single-table transactions following the op mix.
pub fn run_tatp(preset: &Preset, spec: &TatpSpec) -> Result<TatpResult, WorkloadError> {
    let mut rt = runtime_for(
        preset,
        spec.nodes,
        spec.threads,
        spec.coroutines,
        32,
        None,
        spec.seed,
    )?;
    let cfg = build_table(&mut rt, &spec.table)?;
    attach_log(&rt, &spec.log);
    let (initial, _) = table_snapshot(&rt)?;
    let op_count = match spec.run {
        TatpRun::Ops(n) => n,
        TatpRun::Window { .. } => spec.nodes * spec.threads * spec.coroutines * 64,
    };
    let streams = generate(&WorkloadSpec {
        kind: WorkloadKind::TatpLite,
        n_nodes: spec.nodes,
        threads_per_node: spec.threads,
        coroutines_per_thread: spec.coroutines,
        key_count: spec.table.key_count,
        key_distribution: spec.key_distribution,
        op_count,
        seed: spec.seed,
        mix: spec.mix,
        sizes: MessageSizeDistribution::fixed(1),
    })?;
    let (start, end, cycle) = match spec.run {
        TatpRun::Ops(_) => (0, u64::MAX, false),
        TatpRun::Window {
            warmup_ns,
            measure_ns,
        } => (warmup_ns, warmup_ns + measure_ns, true),
    };
    let records: Rc<RefCell<Vec<(u64, TxRecord)>>> = Rc::new(RefCell::new(Vec::new()));
    let layout = cfg.layout();
    let mut it = streams.into_iter();
    for node in 0..spec.nodes {
        for thread in 0..spec.threads {
            for _ in 0..spec.coroutines {
                let stream = it.next().expect("one stream per coroutine");
                let records = records.clone();
                rt.spawn(node, thread, move |ctx| async move {
                    if stream.is_empty() {
                        return;
                    }
                    let mut engine = TxEngine::new(ctx.clone(), layout);
                    let mut i = 0;
                    while ctx.now().0 < end && (cycle || i < stream.len()) {
                        let op = stream[i % stream.len()];
                        i += 1;
                        let rec = run_tx(&mut engine, op, layout.value_bytes)
                            .await
                            .expect("transaction");
                        records.borrow_mut().push((ctx.now().0, rec));
                    }
                })?;
            }
        }
    }
    match spec.run {
        TatpRun::Ops(_) => {
            rt.run_to_completion();
            if !rt.all_done() {
                return Err(WorkloadError::Invariant(
                    "transactions left unfinished".into(),
                ));
            }
        }
        TatpRun::Window { .. } => {
            rt.run_until(SimTime(start));
            rt.world_mut().fabric.reset_stats();
            rt.run_until(SimTime(end));
        }
    }
    let (paths, cache_hit_rate, mean_breakdown, connections_per_node) = {
        let w = rt.world();
        (
            w.paths(),
            nic_hit_rate(&w.fabric),
            w.fabric.stats().mean_breakdown(),
            w.connections_per_node(),
        )
    };
    let elapsed_ns = rt.now().0.max(1);
    if matches!(spec.run, TatpRun::Window { .. }) {
        // Coroutines stop starting transactions at the window's end; let the
        // ones in flight finish so the final store is quiescent.
        rt.run_to_completion();
        if !rt.all_done() {
            return Err(WorkloadError::Invariant(
                "transactions left unfinished".into(),
            ));
        }
    }

    let all = std::mem::take(&mut *records.borrow_mut());
    let in_window: Vec<&(u64, TxRecord)> = all
        .iter()
        .filter(|(t, _)| (start..end).contains(t))
        .collect();
    let committed = in_window
        .iter()
        .filter(|(_, r)| r.status == TxStatus::Committed)
        .count() as u64;
    let aborted = in_window.len() as u64 - committed;
    let mut lat: Vec<u64> = in_window
        .iter()
        .filter(|(_, r)| r.status == TxStatus::Committed)
        .map(|(_, r)| r.latency_ns)
        .collect();
    lat.sort_unstable();
    let throughput = match spec.run {
        TatpRun::Ops(_) => committed as f64 / (elapsed_ns as f64 / 1000.0) / spec.nodes as f64,
        TatpRun::Window { measure_ns, .. } => {
            committed as f64 / (measure_ns as f64 / 1000.0) / spec.nodes as f64
        }
    };
    let (final_state, leaked_locks) = table_snapshot(&rt)?;
    Ok(TatpResult {
        committed,
        aborted,
        throughput,
        p50_ns: percentile(&lat, 50.0),
        p99_ns: percentile(&lat, 99.0),
        initial,
        final_state,
        leaked_locks,
        paths,
        cache_hit_rate,
        mean_breakdown,
        connections_per_node,
        records: all.into_iter().map(|(_, r)| r).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MirrorRecord {
    pub cachelines: u64,
    pub breakdown: LatencyBreakdown,
    pub latency_ns: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MirrorSummary {
    pub cachelines: u64,
    pub count: usize,
    pub mean: LatencyBreakdown,
}

impl MirrorSummary {
    pub fn pcie_share(&self) -> f64 {
        self.mean.pcie_share()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MirrorResult {
    pub records: Vec<MirrorRecord>,
    /// Per message size, ascending.
    pub by_size: Vec<MirrorSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MirrorSpec {
    pub messages: usize,
    pub sizes: MessageSizeDistribution,
    pub seed: u64,
    /// Receives one line per dispatched event.
    pub log: Option<EventLog>,
}

impl Default for MirrorSpec {
    fn default() -> Self {
        MirrorSpec {
            messages: 1000,
            sizes: MessageSizeDistribution::sync_mirroring(),
            seed: 1,
            log: None,
        }
    }
}

/// Synchronous mirroring: each write is sent to the backup and acknowledged
/// before the next one is issued.
pub fn run_sync_mirroring(
    preset: &Preset,
    spec: &MirrorSpec,
) -> Result<MirrorResult, WorkloadError> {
    let streams = generate(&WorkloadSpec {
        kind: WorkloadKind::SyncMirroring,
        n_nodes: 1,
        op_count: spec.messages,
        seed: spec.seed,
        sizes: spec.sizes.clone(),
        ..WorkloadSpec::new(WorkloadKind::SyncMirroring)
    })?;
    let mut f: Fabric = Fabric::new(2, preset);
    if let Some(log) = &spec.log {
        f.engine.set_log_sink(Box::new(log.clone()));
    }
    let page = 2 << 20;
    let src = f.register_region(0, page, page, false)?.region_id;
    let dst = f.register_region(1, page, page, false)?.region_id;
    let (c0, c1) = (f.create_cq(0), f.create_cq(1));
    let a = f.create_qp(0, Transport::Rc, c0, c0);
    let b = f.create_qp(1, Transport::Rc, c1, c1);
    f.connect(a, b)?;

    let write =
        |f: &mut Fabric, cachelines: u64, seq: u64| -> Result<MirrorRecord, WorkloadError> {
            let len = cachelines * CACHELINE;
            f.write_local(0, src, 0, &kv_value(seq, len));
            f.record_ops(true);
            f.post_write(
                a,
                LocalBuf {
                    region: src,
                    offset: 0,
                    len,
                },
                RemoteAddr {
                    region: dst,
                    offset: 0,
                },
            )?;
            f.run_to_quiescence();
            let done = f.poll_cq(c0, usize::MAX)?;
            if done.len() != 1 || done[0].status != CompletionStatus::Ok {
                return Err(WorkloadError::Invariant(
                    "mirrored write did not complete".into(),
                ));
            }
            let rec = f.take_records().pop().expect("recorded op");
            let bd = rec.breakdown();
            if (bd.total() - rec.latency_ns() as f64).abs() > 1e-6 {
                return Err(WorkloadError::Invariant(
                    "latency buckets do not sum to the total".into(),
                ));
            }
            Ok(MirrorRecord {
                cachelines,
                breakdown: bd,
                latency_ns: rec.latency_ns(),
            })
        };
    // Warm the NIC state so every measured write sees the steady state.
    write(&mut f, 1, 0)?;
    let mut records = Vec::with_capacity(spec.messages);
    for (i, op) in streams.into_iter().flatten().enumerate() {
        let Op::Mirror { cachelines } = op else {
            unreachable!()
        };
        records.push(write(&mut f, cachelines, i as u64 + 1)?);
    }
    let mut sizes: Vec<u64> = records.iter().map(|r| r.cachelines).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let by_size = sizes
        .into_iter()
        .map(|c| {
            let mut sum = LatencyBreakdown::default();
            let mut count = 0;
            for r in records.iter().filter(|r| r.cachelines == c) {
                sum.add(&r.breakdown);
                count += 1;
            }
            MirrorSummary {
                cachelines: c,
                count,
                mean: sum.scaled(1.0 / count as f64),
            }
        })
        .collect();
    Ok(MirrorResult { records, by_size })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomReadsSpec {
    pub depth: usize,
    pub payload_bytes: u64,
    pub region_bytes: u64,
    pub page_size: u64,
    /// Completions discarded before measuring, as a multiple of the reads in flight.
    pub warmup_rounds: usize,
    pub min_measured: usize,
    pub seed: u64,
    /// Receives one line per dispatched event.
    pub log: Option<EventLog>,
}

impl Default for RandomReadsSpec {
    fn default() -> Self {
        RandomReadsSpec {
            depth: 1024,
            payload_bytes: 64,
            region_bytes: 20 << 30,
            page_size: 2 << 20,
            warmup_rounds: 2,
            min_measured: 20_000,
            seed: 1,
            log: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomReadsPoint {
    pub connections: usize,
    /// Reads per microsecond.
    pub throughput: f64,
    pub mean_latency_ns: f64,
    pub cache_hit_rate: f64,
    pub mean_breakdown: LatencyBreakdown,
}

/// One client node keeps `depth` random reads outstanding on each of
/// `connections` QPs against a large region on the server node.
pub fn random_reads_at(
    preset: &Preset,
    spec: &RandomReadsSpec,
    connections: usize,
) -> Result<RandomReadsPoint, WorkloadError> {
    if connections == 0
        || spec.depth == 0
        || spec.payload_bytes == 0
        || spec.payload_bytes > spec.page_size
    {
        return Err(WorkloadError::Spec(
            "connections, depth and payload must be positive".into(),
        ));
    }
    let mut rng = SeededRng::new(spec.seed).fork(connections as u64);
    let mut f: Fabric = Fabric::new(2, preset);
    if let Some(log) = &spec.log {
        f.engine.set_log_sink(Box::new(log.clone()));
    }
    let local = f
        .register_region(0, spec.page_size, spec.page_size, false)?
        .region_id;
    let remote = f
        .register_region(1, spec.region_bytes, spec.page_size, false)?
        .region_id;
    let c0 = f.create_cq(0);
    let c1 = f.create_cq(1);
    let mut qps = Vec::with_capacity(connections);
    for _ in 0..connections {
        let a = f.create_qp(0, Transport::Rc, c0, c0);
        let b = f.create_qp(1, Transport::Rc, c1, c1);
        f.connect(a, b)?;
        qps.push(a);
    }
    let slots = spec.page_size / spec.payload_bytes;
    let targets = spec.region_bytes / spec.payload_bytes;
    let mut next_slot = 0u64;
    let mut post = |f: &mut Fabric, qp: QpId, rng: &mut SeededRng| -> Result<(), WorkloadError> {
        let offset = (next_slot % slots) * spec.payload_bytes;
        next_slot += 1;
        let remote_off = rng.below(targets) * spec.payload_bytes;
        f.post_read(
            qp,
            LocalBuf {
                region: local,
                offset,
                len: spec.payload_bytes,
            },
            RemoteAddr {
                region: remote,
                offset: remote_off,
            },
        )?;
        Ok(())
    };
    for _ in 0..spec.depth {
        for &qp in &qps {
            post(&mut f, qp, &mut rng)?;
        }
    }
    let inflight = connections * spec.depth;
    let warmup = (spec.warmup_rounds * inflight).max(1000);
    let measured = spec.min_measured.max(inflight);
    let mut completed = 0usize;
    let mut t0 = SimTime::ZERO;
    loop {
        match f.step(SimTime(u64::MAX)) {
            Step::Idle => return Err(WorkloadError::Invariant("reads drained".into())),
            Step::Verbs => {}
            Step::Upper(ev) => match ev.payload {},
        }
        if f.take_notifications().is_empty() {
            continue;
        }
        for c in f.poll_cq(c0, usize::MAX)? {
            if c.status != CompletionStatus::Ok {
                return Err(WorkloadError::Invariant(format!(
                    "read failed: {:?}",
                    c.status
                )));
            }
            completed += 1;
            if completed == warmup {
                t0 = f.now();
                f.reset_stats();
            }
            if completed == warmup + measured {
                let elapsed = (f.now().0 - t0.0).max(1) as f64;
                let nic = &f.nic(0).cache;
                let total = nic.hits() + nic.misses();
                return Ok(RandomReadsPoint {
                    connections,
                    throughput: measured as f64 * 1000.0 / elapsed,
                    mean_latency_ns: f.stats().mean_latency_ns(),
                    cache_hit_rate: if total == 0 {
                        1.0
                    } else {
                        nic.hits() as f64 / total as f64
                    },
                    mean_breakdown: f.stats().mean_breakdown(),
                });
            }
            post(&mut f, c.qp, &mut rng)?;
        }
    }
}

pub fn run_random_reads(
    preset: &Preset,
    spec: &RandomReadsSpec,
    connections: &[usize],
) -> Result<Vec<RandomReadsPoint>, WorkloadError> {
    connections
        .iter()
        .map(|&c| random_reads_at(preset, spec, c))
        .collect()
}

/// Relative throughput loss going from `base` to `scaled`.
pub fn drop_fraction(base: f64, scaled: f64) -> f64 {
    1.0 - scaled / base
}

#[derive(Debug, Clone, PartialEq)]
pub struct RpcSaturationSpec {
    /// Client connections, each a QP pair served by the one server thread.
    pub connections: usize,
    pub outstanding_per_connection: usize,
    pub payload_bytes: u64,
    pub warmup: usize,
    pub measured: usize,
}

impl Default for RpcSaturationSpec {
    fn default() -> Self {
        RpcSaturationSpec {
            connections: 8,
            outstanding_per_connection: 8,
            payload_bytes: 64,
            warmup: 2_000,
            measured: 10_000,
        }
    }
}

/// Echo RPCs against a single server thread, over RC write-with-immediate or
/// the UD send/recv baseline. Returns served RPCs per microsecond.
pub fn rpc_saturation(
    preset: &Preset,
    transport: Transport,
    spec: &RpcSaturationSpec,
) -> Result<f64, WorkloadError> {
    let mut f: Fabric = Fabric::new(2, preset);
    let page = 2 << 20;
    let len = spec.payload_bytes;
    let per_conn = spec.outstanding_per_connection as u64;
    let slots = spec.connections as u64 * per_conn;
    if slots == 0 || len == 0 || slots * len > page {
        return Err(WorkloadError::Spec(
            "outstanding requests must fit one page of buffers".into(),
        ));
    }
    let buf = [
        f.register_region(0, page, page, false)?.region_id,
        f.register_region(1, page, page, false)?.region_id,
    ];
    let cq = [f.create_cq(0), f.create_cq(1)];
    let mut pairs = Vec::with_capacity(spec.connections);
    for _ in 0..spec.connections {
        let pair = [
            f.create_qp(0, transport, cq[0], cq[0]),
            f.create_qp(1, transport, cq[1], cq[1]),
        ];
        if transport == Transport::Rc {
            f.connect(pair[0], pair[1])?;
        }
        pairs.push(pair);
    }
    // Slot s belongs to connection s / per_conn on both sides.
    let slot_buf = |node: usize, slot: u64| LocalBuf {
        region: buf[node],
        offset: slot * len,
        len,
    };
    #[allow(clippy::needless_range_loop)]
    for node in 0..2 {
        for s in 0..slots {
            let qp = pairs[(s / per_conn) as usize][node];
            f.post_recv(
                qp,
                RecvBuf {
                    wr_id: s,
                    buf: slot_buf(node, s),
                },
            )?;
        }
    }
    let send = |f: &mut Fabric, from: usize, slot: u64| -> Result<(), WorkloadError> {
        let to = 1 - from;
        let pair = pairs[(slot / per_conn) as usize];
        match transport {
            Transport::Rc => f.post_write_imm(
                pair[from],
                slot_buf(from, slot),
                RemoteAddr {
                    region: buf[to],
                    offset: slot * len,
                },
                slot as u32,
            )?,
            Transport::Ud => f.post_send(pair[from], pair[to], slot_buf(from, slot))?,
        };
        Ok(())
    };
    for s in 0..slots {
        send(&mut f, 0, s)?;
    }
    let per_msg = preset.host.rpc_handler_ns
        + if transport == Transport::Ud {
            preset.host.host_repost_ns
        } else {
            0
        };
    let mut server_busy = 0u64;
    let mut replies = 0usize;
    let mut t0 = 0u64;
    loop {
        match f.step(SimTime(u64::MAX)) {
            Step::Idle => return Err(WorkloadError::Invariant("rpc loop drained".into())),
            Step::Verbs => {}
            Step::Upper(ev) => match ev.payload {},
        }
        for cqid in f.take_notifications() {
            let node = if cqid == cq[0] { 0 } else { 1 };
            for c in f.poll_cq(cqid, usize::MAX)? {
                if c.status != CompletionStatus::Ok {
                    return Err(WorkloadError::Invariant(format!(
                        "rpc completion failed: {:?}",
                        c.status
                    )));
                }
                if c.kind != CompletionKind::Recv {
                    continue;
                }
                let slot = match transport {
                    Transport::Rc => c.imm.expect("write-imm carries the slot") as u64,
                    Transport::Ud => c.wr_id,
                };
                let qp = pairs[(slot / per_conn) as usize][node];
                f.post_recv(
                    qp,
                    RecvBuf {
                        wr_id: slot,
                        buf: slot_buf(node, slot),
                    },
                )?;
                let now = f.now().0;
                if node == 1 {
                    server_busy = server_busy.max(now) + per_msg;
                    f.post_delay = server_busy - now;
                    send(&mut f, 1, slot)?;
                    f.post_delay = 0;
                } else {
                    replies += 1;
                    if replies == spec.warmup {
                        t0 = now;
                    }
                    if replies == spec.warmup + spec.measured {
                        return Ok(spec.measured as f64 * 1000.0 / (now - t0).max(1) as f64);
                    }
                    send(&mut f, 0, slot)?;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quota_is_exact() {
        assert_eq!(
            quota(&OpMix::tatp().weights(), 10_000),
            vec![8000, 1600, 200, 200]
        );
        assert_eq!(quota(&[1.0, 1.0, 1.0], 10).iter().sum::<usize>(), 10);
    }

    #[test]
    fn tatp_stream_realizes_mix_exactly() {
        let spec = WorkloadSpec {
            op_count: 10_000,
            n_nodes: 4,
            coroutines_per_thread: 2,
            ..WorkloadSpec::new(WorkloadKind::TatpLite)
        };
        let streams = generate(&spec).unwrap();
        assert_eq!(streams.len(), 8);
        let all: Vec<Op> = streams.into_iter().flatten().collect();
        let count = |f: fn(&Op) -> bool| all.iter().filter(|o| f(o)).count();
        assert_eq!(count(|o| matches!(o, Op::Read { .. })), 8000);
        assert_eq!(count(|o| matches!(o, Op::Write { .. })), 1600);
        assert_eq!(
            count(|o| matches!(o, Op::Insert { .. } | Op::Delete { .. })),
            400
        );
    }

    #[test]
    fn same_seed_same_streams() {
        let spec = WorkloadSpec {
            key_distribution: KeyDistribution::Zipf(0.99),
            ..WorkloadSpec::new(WorkloadKind::TatpLite)
        };
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = WorkloadSpec {
            seed: 2,
            ..spec.clone()
        };
        assert_ne!(generate(&spec).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn kv_lookups_are_all_reads() {
        let streams = generate(&WorkloadSpec::new(WorkloadKind::KvLookups)).unwrap();
        assert!(streams
            .iter()
            .flatten()
            .all(|o| matches!(o, Op::Read { key } if (1..=1024).contains(key))));
    }

    #[test]
    fn mirroring_sizes_follow_histogram() {
        let spec = WorkloadSpec {
            op_count: 800,
            ..WorkloadSpec::new(WorkloadKind::SyncMirroring)
        };
        let ops: Vec<Op> = generate(&spec).unwrap().into_iter().flatten().collect();
        let ones = ops
            .iter()
            .filter(|o| **o == Op::Mirror { cachelines: 1 })
            .count();
        assert_eq!(ones, 600);
    }

    #[test]
    fn bad_mix_is_rejected() {
        let spec = WorkloadSpec {
            mix: OpMix {
                read_frac: 0.5,
                ..OpMix::tatp()
            },
            ..WorkloadSpec::new(WorkloadKind::TatpLite)
        };
        assert!(matches!(generate(&spec), Err(WorkloadError::Spec(_))));
    }

    #[test]
    fn zipf_skews_toward_low_ranks() {
        let s = KeySampler::new(1000, KeyDistribution::Zipf(0.99)).unwrap();
        let mut rng = SeededRng::new(3);
        let hot = (0..10_000).filter(|_| s.sample(&mut rng) <= 10).count();
        assert!(hot > 2000, "hot draws {hot}");
    }

    #[test]
    fn tatp_update_bumps_counter() {
        let old = kv_value(5, 32);
        let new = tatp_update(&old, 77);
        assert_eq!(u64::from_le_bytes(new[0..8].try_into().unwrap()), 6);
        assert_eq!(u64::from_le_bytes(new[8..16].try_into().unwrap()), 77);
        assert_eq!(new[16..], old[16..]);
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<u64> = (1..=100).collect();
        assert_eq!(percentile(&v, 50.0), 50);
        assert_eq!(percentile(&v, 99.0), 99);
        assert_eq!(percentile(&[], 50.0), 0);
    }

    #[test]
    fn fixed_count_tatp_throughput_uses_elapsed_time() {
        let r = run_tatp(&Preset::default(), &TatpSpec::default()).unwrap();
        assert_eq!(r.committed + r.aborted, 1000);
        assert!(
            r.throughput > 0.01 && r.throughput < 100.0,
            "{}",
            r.throughput
        );
    }
}
