//! Optimistic transactions over the hash table: write-set keys are locked
//! during execution, read-set versions are validated with one-sided header
//! reads, and updates are installed with update-and-unlock RPCs.

use std::io::Write;

use thiserror::Error;

use crate::dataplane::{
    Ctx, DataplaneError, LookupSource, ReadPath, RemoteLoc, RpcOpcode, RpcStatus,
};
use crate::kvstore::{request, Layout, SlotHeader, SLOT_HEADER_BYTES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AbortReason {
    LockBusy,
    ValidationFailed,
    NotFound,
    /// Insert of a key that is already present.
    Exists,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TxStatus {
    Active,
    Validating,
    Committed,
    Aborted(AbortReason),
}

impl TxStatus {
    pub fn label(&self) -> &'static str {
        match self {
            TxStatus::Active => "active",
            TxStatus::Validating => "validating",
            TxStatus::Committed => "committed",
            TxStatus::Aborted(AbortReason::LockBusy) => "aborted_lock_busy",
            TxStatus::Aborted(AbortReason::ValidationFailed) => "aborted_validation",
            TxStatus::Aborted(AbortReason::NotFound) => "aborted_not_found",
            TxStatus::Aborted(AbortReason::Exists) => "aborted_exists",
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TxError {
    #[error("a transaction is already active on this coroutine")]
    Nested,
    #[error("transaction is not active")]
    NotActive,
    #[error(transparent)]
    Dataplane(#[from] DataplaneError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadEntry {
    pub object_id: u16,
    pub key: u64,
    /// Slot address at the key's home node.
    pub remote: RemoteLoc,
    pub version: u64,
    pub value: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WriteEntry {
    pub object_id: u16,
    pub key: u64,
    pub remote: RemoteLoc,
    pub locked_version: u64,
    pub new_value: Vec<u8>,
    pub lock_held: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteKind {
    Update,
    Insert,
    Delete,
}

/// A write a committed transaction installed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WriteRecord {
    pub key: u64,
    pub kind: WriteKind,
    pub installed_version: u64,
    pub value: Vec<u8>,
}

/// Everything the serializability oracle and the trace need about one transaction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TxRecord {
    pub tx_id: u64,
    pub status: TxStatus,
    pub reads: Vec<(u64, u64)>,
    pub writes: Vec<WriteRecord>,
    pub n_reads: u64,
    pub n_rpcs: u64,
    pub n_validation_reads: u64,
    pub latency_ns: u64,
}

#[derive(Debug, Clone)]
pub struct TxContext {
    pub tx_id: u64,
    pub status: TxStatus,
    pub read_set: Vec<ReadEntry>,
    pub write_set: Vec<WriteEntry>,
    single: Vec<WriteRecord>,
    n_reads: u64,
    n_rpcs: u64,
    n_validation_reads: u64,
    started_ns: u64,
}

impl TxContext {
    fn find_read(&self, key: u64) -> Option<&ReadEntry> {
        self.read_set.iter().find(|e| e.key == key)
    }

    fn find_write(&mut self, key: u64) -> Option<&mut WriteEntry> {
        self.write_set.iter_mut().find(|e| e.key == key)
    }
}

/// Per-coroutine transaction driver bound to one table.
pub struct TxEngine {
    ctx: Ctx,
    layout: Layout,
    active: bool,
    seq: u64,
}

impl TxEngine {
    pub fn new(ctx: Ctx, layout: Layout) -> Self {
        TxEngine {
            ctx,
            layout,
            active: false,
            seq: 0,
        }
    }

    pub fn ctx(&self) -> &Ctx {
        &self.ctx
    }

    fn next_id(&mut self) -> u64 {
        self.seq += 1;
        ((self.ctx.node() as u64 + 1) << 48)
            | ((self.ctx.thread() as u64 & 0xff) << 40)
            | ((self.ctx.coroutine() as u64 & 0xfff) << 28)
            | (self.seq & 0x0fff_ffff)
    }

    pub fn start_tx(&mut self) -> Result<TxContext, TxError> {
        if self.active {
            return Err(TxError::Nested);
        }
        self.active = true;
        Ok(TxContext {
            tx_id: self.next_id(),
            status: TxStatus::Active,
            read_set: Vec::new(),
            write_set: Vec::new(),
            single: Vec::new(),
            n_reads: 0,
            n_rpcs: 0,
            n_validation_reads: 0,
            started_ns: self.ctx.now().0,
        })
    }

    async fn rpc(
        &self,
        tx: &mut TxContext,
        target: usize,
        object_id: u16,
        op: RpcOpcode,
        payload: Vec<u8>,
    ) -> Result<crate::dataplane::RpcMessage, TxError> {
        tx.n_rpcs += 1;
        Ok(self.ctx.rpc(target, object_id, op, payload).await?)
    }

    /// Releases every held lock and marks the transaction aborted.
    async fn abort(
        &mut self,
        tx: &mut TxContext,
        reason: AbortReason,
    ) -> Result<TxStatus, TxError> {
        let held: Vec<(u16, u64, usize)> = tx
            .write_set
            .iter()
            .filter(|e| e.lock_held)
            .map(|e| (e.object_id, e.key, e.remote.node))
            .collect();
        for (object_id, key, home) in held {
            self.rpc(
                tx,
                home,
                object_id,
                RpcOpcode::Unlock,
                request::keyed(key, tx.tx_id),
            )
            .await?;
        }
        for e in &mut tx.write_set {
            e.lock_held = false;
        }
        tx.status = TxStatus::Aborted(reason);
        self.active = false;
        Ok(tx.status)
    }

    /// Adds `key` to the read set and returns its value. `Ok(None)` means the
    /// transaction aborted.
    pub async fn read(
        &mut self,
        tx: &mut TxContext,
        object_id: u16,
        key: u64,
    ) -> Result<Option<Vec<u8>>, TxError> {
        if tx.status != TxStatus::Active {
            return Err(TxError::NotActive);
        }
        if let Some(w) = tx.find_write(key) {
            return Ok(Some(w.new_value.clone()));
        }
        if let Some(r) = tx.find_read(key) {
            return Ok(Some(r.value.clone()));
        }
        let item = self.ctx.read_set_item(object_id, key).await?;
        tx.n_reads += item.reads as u64;
        if item.path != ReadPath::ReadOnly {
            tx.n_rpcs += 1;
        }
        if !item.found {
            let reason = match item.buffer.source {
                LookupSource::Rpc {
                    status: RpcStatus::LockBusy,
                    ..
                } => AbortReason::LockBusy,
                _ => AbortReason::NotFound,
            };
            self.abort(tx, reason).await?;
            return Ok(None);
        }
        let view = self
            .layout
            .extract(key, &item.buffer)
            .expect("found item has its slot");
        let home = self.ctx.home(object_id, key)?;
        tx.read_set.push(ReadEntry {
            object_id,
            key,
            remote: RemoteLoc {
                node: home,
                region: view.addr.region,
                offset: view.addr.offset,
                len: SLOT_HEADER_BYTES,
            },
            version: view.header.version,
            value: view.value.clone(),
        });
        Ok(Some(view.value))
    }

    /// Locks `key` and buffers `new_value`. Returns `Ok(false)` if the
    /// transaction aborted.
    pub async fn write(
        &mut self,
        tx: &mut TxContext,
        object_id: u16,
        key: u64,
        new_value: Vec<u8>,
    ) -> Result<bool, TxError> {
        if tx.status != TxStatus::Active {
            return Err(TxError::NotActive);
        }
        if let Some(w) = tx.find_write(key) {
            w.new_value = new_value;
            return Ok(true);
        }
        let home = self.ctx.home(object_id, key)?;
        let reply = self
            .rpc(
                tx,
                home,
                object_id,
                RpcOpcode::LockRead,
                request::keyed(key, tx.tx_id),
            )
            .await?;
        match reply.header.status {
            RpcStatus::Ok => {}
            RpcStatus::LockBusy => {
                self.abort(tx, AbortReason::LockBusy).await?;
                return Ok(false);
            }
            _ => {
                self.abort(tx, AbortReason::NotFound).await?;
                return Ok(false);
            }
        }
        let view = self
            .layout
            .decode_addressed(&reply.payload)
            .expect("lock reply carries the slot");
        tx.write_set.push(WriteEntry {
            object_id,
            key,
            remote: RemoteLoc {
                node: home,
                region: view.addr.region,
                offset: view.addr.offset,
                len: SLOT_HEADER_BYTES,
            },
            locked_version: view.header.version,
            new_value,
            lock_held: true,
        });
        // A value read earlier in this transaction must still be current.
        if let Some(r) = tx.find_read(key) {
            if r.version != view.header.version {
                self.abort(tx, AbortReason::ValidationFailed).await?;
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Validates the read set, then installs and unlocks the write set.
    pub async fn commit(&mut self, tx: &mut TxContext) -> Result<TxStatus, TxError> {
        if tx.status != TxStatus::Active {
            return Err(TxError::NotActive);
        }
        tx.status = TxStatus::Validating;
        let to_check: Vec<ReadEntry> = tx
            .read_set
            .iter()
            .filter(|r| !tx.write_set.iter().any(|w| w.key == r.key))
            .cloned()
            .collect();
        for r in to_check {
            tx.n_validation_reads += 1;
            let ok = match self.ctx.remote_read(r.remote).await {
                Ok(bytes) => {
                    let h = SlotHeader::decode(&bytes);
                    h.key == r.key && h.version == r.version && (h.lock == 0 || h.lock == tx.tx_id)
                }
                Err(DataplaneError::ReadFailed(_)) => false,
                Err(e) => return Err(e.into()),
            };
            if !ok {
                tx.status = TxStatus::Active;
                return self.abort(tx, AbortReason::ValidationFailed).await;
            }
        }
        let writes: Vec<(u16, u64, usize, Vec<u8>)> = tx
            .write_set
            .iter()
            .map(|w| (w.object_id, w.key, w.remote.node, w.new_value.clone()))
            .collect();
        for (i, (object_id, key, home, value)) in writes.into_iter().enumerate() {
            let reply = self
                .rpc(
                    tx,
                    home,
                    object_id,
                    RpcOpcode::UpdateUnlock,
                    request::with_value(key, tx.tx_id, &value),
                )
                .await?;
            assert_eq!(
                reply.header.status,
                RpcStatus::Ok,
                "update of a locked key failed"
            );
            let installed = u64::from_le_bytes(reply.payload[0..8].try_into().unwrap());
            tx.write_set[i].lock_held = false;
            tx.single.push(WriteRecord {
                key,
                kind: WriteKind::Update,
                installed_version: installed,
                value: padded(&value, self.layout.value_bytes),
            });
        }
        tx.status = TxStatus::Committed;
        self.active = false;
        Ok(tx.status)
    }

    /// Inserts `key` as a single-request transaction.
    pub async fn insert(
        &mut self,
        object_id: u16,
        key: u64,
        value: Vec<u8>,
    ) -> Result<TxRecord, TxError> {
        let mut tx = self.start_tx()?;
        let home = self.ctx.home(object_id, key)?;
        let payload = request::with_value(key, tx.tx_id, &value);
        let reply = self
            .rpc(&mut tx, home, object_id, RpcOpcode::Insert, payload)
            .await?;
        tx.status = match reply.header.status {
            RpcStatus::Ok => {
                let version = u64::from_le_bytes(reply.payload[8..16].try_into().unwrap());
                tx.single.push(WriteRecord {
                    key,
                    kind: WriteKind::Insert,
                    installed_version: version,
                    value: padded(&value, self.layout.value_bytes),
                });
                TxStatus::Committed
            }
            RpcStatus::Exists => TxStatus::Aborted(AbortReason::Exists),
            other => panic!("unexpected insert status {other:?}"),
        };
        self.active = false;
        Ok(self.record(&tx))
    }

    /// Deletes `key` as a single-request transaction.
    pub async fn delete(&mut self, object_id: u16, key: u64) -> Result<TxRecord, TxError> {
        let mut tx = self.start_tx()?;
        let home = self.ctx.home(object_id, key)?;
        let payload = request::keyed(key, tx.tx_id);
        let reply = self
            .rpc(&mut tx, home, object_id, RpcOpcode::Delete, payload)
            .await?;
        tx.status = match reply.header.status {
            RpcStatus::Ok => {
                let version = u64::from_le_bytes(reply.payload[0..8].try_into().unwrap());
                tx.single.push(WriteRecord {
                    key,
                    kind: WriteKind::Delete,
                    installed_version: version,
                    value: Vec::new(),
                });
                TxStatus::Committed
            }
            RpcStatus::NotFound => TxStatus::Aborted(AbortReason::NotFound),
            RpcStatus::LockBusy => TxStatus::Aborted(AbortReason::LockBusy),
            other => panic!("unexpected delete status {other:?}"),
        };
        self.active = false;
        Ok(self.record(&tx))
    }

    /// Summary of a finished transaction.
    pub fn record(&self, tx: &TxContext) -> TxRecord {
        let committed = tx.status == TxStatus::Committed;
        TxRecord {
            tx_id: tx.tx_id,
            status: tx.status,
            reads: if committed {
                tx.read_set.iter().map(|r| (r.key, r.version)).collect()
            } else {
                Vec::new()
            },
            writes: if committed {
                tx.single.clone()
            } else {
                Vec::new()
            },
            n_reads: tx.n_reads + tx.n_validation_reads,
            n_rpcs: tx.n_rpcs,
            n_validation_reads: tx.n_validation_reads,
            latency_ns: self.ctx.now().0 - tx.started_ns,
        }
    }
}

fn padded(v: &[u8], len: u64) -> Vec<u8> {
    let mut out = v.to_vec();
    out.resize(len as usize, 0);
    out
}

/// Writes the per-transaction trace as CSV.
pub fn write_trace<W: Write>(records: &[TxRecord], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "tx_id",
        "status",
        "n_reads",
        "n_rpcs",
        "n_validation_reads",
        "latency_ns",
    ])?;
    for r in records {
        w.write_record([
            r.tx_id.to_string(),
            r.status.label().to_string(),
            r.n_reads.to_string(),
            r.n_rpcs.to_string(),
            r.n_validation_reads.to_string(),
            r.latency_ns.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
