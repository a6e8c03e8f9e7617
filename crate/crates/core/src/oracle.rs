//! Serializability checker for committed transactions.
//!
//! Builds the conflict graph from version records (write-read, write-write
//! and read-write edges), rejects cycles, then replays a topological order
//! against the initial store and compares the result with the final store
//! byte for byte.

use std::collections::{BTreeMap, HashMap};

use petgraph::algo::toposort;
use petgraph::graph::{DiGraph, NodeIndex};
use thiserror::Error;

use crate::txengine::{TxRecord, TxStatus, WriteKind, WriteRecord};

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("two transactions installed version {version} of key {key}")]
    DuplicateVersion { key: u64, version: u64 },
    #[error("conflict graph has a cycle through transaction {0:#x}")]
    Cycle(u64),
    #[error(
        "transaction {tx:#x} read key {key} at version {read} but the serial order has {expected}"
    )]
    StaleRead {
        tx: u64,
        key: u64,
        read: u64,
        expected: u64,
    },
    #[error("transaction {tx:#x} installed version {installed} of key {key}, expected {expected}")]
    VersionGap {
        tx: u64,
        key: u64,
        installed: u64,
        expected: u64,
    },
    #[error("transaction {tx:#x} wrote a value for key {key} not derived from the serial state")]
    WrongValue { tx: u64, key: u64 },
    #[error("final store differs at key {key}: {detail}")]
    StateMismatch { key: u64, detail: String },
    #[error("key {key} has version {version} after {writes} committed writes")]
    VersionCount { key: u64, version: u64, writes: u64 },
}

/// A stored item: version and value bytes.
pub type Store = BTreeMap<u64, (u64, Vec<u8>)>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleReport {
    pub committed: usize,
    pub edges: usize,
}

#[derive(Clone)]
enum Cell {
    Present(u64, Vec<u8>),
    Absent(u64),
}

impl Cell {
    fn version(&self) -> u64 {
        match self {
            Cell::Present(v, _) | Cell::Absent(v) => *v,
        }
    }
}

/// Recomputes the value an update should have written from the value it
/// overwrote; `None` skips the check for that write.
pub type Derive<'a> = dyn Fn(&TxRecord, &WriteRecord, &[u8]) -> Option<Vec<u8>> + 'a;

pub fn check_serializable(
    initial: &Store,
    records: &[TxRecord],
    final_state: &Store,
    derive: &Derive<'_>,
) -> Result<OracleReport, OracleError> {
    let committed: Vec<&TxRecord> = records
        .iter()
        .filter(|r| r.status == TxStatus::Committed)
        .collect();
    let mut graph: DiGraph<usize, ()> = DiGraph::new();
    let nodes: Vec<NodeIndex> = (0..committed.len()).map(|i| graph.add_node(i)).collect();

    let mut writer: HashMap<(u64, u64), usize> = HashMap::new();
    let mut readers: HashMap<(u64, u64), Vec<usize>> = HashMap::new();
    for (i, t) in committed.iter().enumerate() {
        for w in &t.writes {
            if writer.insert((w.key, w.installed_version), i).is_some() {
                return Err(OracleError::DuplicateVersion {
                    key: w.key,
                    version: w.installed_version,
                });
            }
        }
        for &(k, v) in &t.reads {
            readers.entry((k, v)).or_default().push(i);
        }
    }

    let mut edges = 0;
    let mut add = |g: &mut DiGraph<usize, ()>, a: usize, b: usize| {
        if a != b {
            g.update_edge(nodes[a], nodes[b], ());
            edges += 1;
        }
    };
    for (i, t) in committed.iter().enumerate() {
        for &(k, v) in &t.reads {
            if let Some(&w) = writer.get(&(k, v)) {
                add(&mut graph, w, i);
            }
        }
        for w in &t.writes {
            let prev = w.installed_version.wrapping_sub(1);
            if let Some(&pw) = writer.get(&(w.key, prev)) {
                add(&mut graph, pw, i);
            }
            if let Some(rs) = readers.get(&(w.key, prev)) {
                for &r in rs {
                    add(&mut graph, r, i);
                }
            }
        }
    }

    let order = toposort(&graph, None)
        .map_err(|c| OracleError::Cycle(committed[graph[c.node_id()]].tx_id))?;

    let mut state: BTreeMap<u64, Cell> = initial
        .iter()
        .map(|(&k, (v, val))| (k, Cell::Present(*v, val.clone())))
        .collect();
    let mut write_counts: BTreeMap<u64, u64> = BTreeMap::new();
    for n in order {
        let t = committed[graph[n]];
        for &(k, v) in &t.reads {
            let expected = state.get(&k).map_or(0, Cell::version);
            if expected != v || !matches!(state.get(&k), Some(Cell::Present(..))) {
                return Err(OracleError::StaleRead {
                    tx: t.tx_id,
                    key: k,
                    read: v,
                    expected,
                });
            }
        }
        for w in &t.writes {
            *write_counts.entry(w.key).or_default() += 1;
            let cur = state.get(&w.key).cloned();
            let expected = cur.as_ref().map_or(0, Cell::version) + 1;
            if w.installed_version != expected {
                return Err(OracleError::VersionGap {
                    tx: t.tx_id,
                    key: w.key,
                    installed: w.installed_version,
                    expected,
                });
            }
            let next = match w.kind {
                WriteKind::Update => {
                    let Some(Cell::Present(_, old)) = cur else {
                        return Err(OracleError::WrongValue {
                            tx: t.tx_id,
                            key: w.key,
                        });
                    };
                    if let Some(want) = derive(t, w, &old) {
                        if want != w.value {
                            return Err(OracleError::WrongValue {
                                tx: t.tx_id,
                                key: w.key,
                            });
                        }
                    }
                    Cell::Present(w.installed_version, w.value.clone())
                }
                WriteKind::Insert => Cell::Present(w.installed_version, w.value.clone()),
                WriteKind::Delete => Cell::Absent(w.installed_version),
            };
            state.insert(w.key, next);
        }
    }

    let keys: std::collections::BTreeSet<u64> =
        state.keys().chain(final_state.keys()).copied().collect();
    for k in keys {
        let want = match state.get(&k) {
            Some(Cell::Present(v, val)) => Some((*v, val)),
            _ => None,
        };
        let got = final_state.get(&k).map(|(v, val)| (*v, val));
        if want != got {
            return Err(OracleError::StateMismatch {
                key: k,
                detail: format!(
                    "replay has {:?}, store has {:?}",
                    want.map(|w| w.0),
                    got.map(|g| g.0)
                ),
            });
        }
        if let Some((v, _)) = got {
            let base = initial.get(&k).map_or(0, |(v0, _)| *v0);
            let writes = write_counts.get(&k).copied().unwrap_or(0);
            if v != base + writes {
                return Err(OracleError::VersionCount {
                    key: k,
                    version: v,
                    writes,
                });
            }
        }
    }
    Ok(OracleReport {
        committed: committed.len(),
        edges,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: u64, reads: &[(u64, u64)], writes: &[(u64, u64, u8)]) -> TxRecord {
        TxRecord {
            tx_id: id,
            status: TxStatus::Committed,
            reads: reads.to_vec(),
            writes: writes
                .iter()
                .map(|&(key, installed_version, b)| WriteRecord {
                    key,
                    kind: WriteKind::Update,
                    installed_version,
                    value: vec![b],
                })
                .collect(),
            n_reads: 0,
            n_rpcs: 0,
            n_validation_reads: 0,
            latency_ns: 0,
        }
    }

    fn store(items: &[(u64, u64, u8)]) -> Store {
        items.iter().map(|&(k, v, b)| (k, (v, vec![b]))).collect()
    }

    fn no_derive(_: &TxRecord, _: &WriteRecord, _: &[u8]) -> Option<Vec<u8>> {
        None
    }

    #[test]
    fn serial_history_passes() {
        let init = store(&[(1, 0, 0), (2, 0, 0)]);
        let recs = vec![
            rec(1, &[(1, 0)], &[(1, 1, 5)]),
            rec(2, &[(1, 1)], &[(2, 1, 6)]),
        ];
        let fin = store(&[(1, 1, 5), (2, 1, 6)]);
        let r = check_serializable(&init, &recs, &fin, &no_derive).unwrap();
        assert_eq!(r.committed, 2);
    }

    #[test]
    fn write_skew_is_a_cycle() {
        // Each reads the other's key at version 0 and writes its own.
        let init = store(&[(1, 0, 0), (2, 0, 0)]);
        let recs = vec![
            rec(1, &[(2, 0)], &[(1, 1, 1)]),
            rec(2, &[(1, 0)], &[(2, 1, 1)]),
        ];
        let fin = store(&[(1, 1, 1), (2, 1, 1)]);
        assert!(matches!(
            check_serializable(&init, &recs, &fin, &no_derive),
            Err(OracleError::Cycle(_))
        ));
    }

    #[test]
    fn final_state_mismatch_detected() {
        let init = store(&[(1, 0, 0)]);
        let recs = vec![rec(1, &[], &[(1, 1, 5)])];
        let fin = store(&[(1, 1, 9)]);
        assert!(matches!(
            check_serializable(&init, &recs, &fin, &no_derive),
            Err(OracleError::StateMismatch { .. })
        ));
    }

    #[test]
    fn lost_update_detected_by_derivation() {
        let init = store(&[(1, 0, 10)]);
        // Increment rule: new = old + 1. The second writer used a stale value.
        let recs = vec![rec(1, &[], &[(1, 1, 11)]), rec(2, &[], &[(1, 2, 11)])];
        let fin = store(&[(1, 2, 11)]);
        let inc = |_: &TxRecord, _: &WriteRecord, old: &[u8]| Some(vec![old[0] + 1]);
        assert!(matches!(
            check_serializable(&init, &recs, &fin, &inc),
            Err(OracleError::WrongValue { .. })
        ));
    }

    #[test]
    fn aborted_transactions_are_ignored() {
        let init = store(&[(1, 0, 0)]);
        let mut bad = rec(9, &[(1, 7)], &[(1, 1, 3)]);
        bad.status = TxStatus::Aborted(crate::txengine::AbortReason::LockBusy);
        let r = check_serializable(&init, &[bad], &init, &no_derive).unwrap();
        assert_eq!(r.committed, 0);
    }
}
