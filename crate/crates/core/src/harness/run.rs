//! Runs a parsed experiment and turns driver results into CSV rows.

use std::fmt;

use thiserror::Error;

use super::config::ExperimentConfig;
use super::results::ResultRow;
use crate::nic::{LatencyBreakdown, CACHELINE};
use crate::oracle::{check_serializable, OracleError};
use crate::sim::EventLog;
use crate::workloads::{
    emulate_cluster, percentile, random_reads_at, run_kv_lookups, run_sync_mirroring, run_tatp,
    tatp_derive, EmulationSpec, KvResult, KvSpec, MessageSizeDistribution, MirrorSpec,
    RandomReadsSpec, TatpRun, TatpSpec, WorkloadError, WorkloadKind,
};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("serializability check failed: {0}")]
    Oracle(#[from] OracleError),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("sweep: {0}")]
    Sweep(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    MsgSize,
    Connections,
    Nodes,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "msg_size" => SweepAxis::MsgSize,
            "connections" => SweepAxis::Connections,
            "nodes" => SweepAxis::Nodes,
            _ => return None,
        })
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::MsgSize => "msg_size",
            SweepAxis::Connections => "connections",
            SweepAxis::Nodes => "nodes",
        })
    }
}

fn kv_row(cfg: &ExperimentConfig, r: &KvResult) -> Result<ResultRow, RunError> {
    if r.wrong_values > 0 {
        return Err(RunError::Invariant(format!(
            "{} lookups returned wrong values",
            r.wrong_values
        )));
    }
    Ok(ResultRow {
        experiment: cfg.id.clone(),
        workload: cfg.workload.kind.label().into(),
        nodes: r.nodes,
        connections: r.connections_per_node,
        msg_cachelines: None,
        throughput: r.throughput,
        p50_ns: r.p50_ns,
        p99_ns: r.p99_ns,
        abort_rate: None,
        cache_hit_rate: r.cache_hit_rate,
        read_only: r.paths.read_only,
        read_then_rpc: r.paths.read_then_rpc,
        rpc_only: r.paths.rpc_only,
        breakdown: r.mean_breakdown,
        relative_throughput: None,
    })
}

/// Runs one experiment. Rows come back in a fixed order for a given config.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    log: Option<EventLog>,
) -> Result<Vec<ResultRow>, RunError> {
    let t = &cfg.topology;
    let w = &cfg.workload;
    let preset = &cfg.preset;
    match w.kind {
        WorkloadKind::KvLookups => {
            let measure_ns = w.measure_ns.ok_or_else(|| {
                RunError::Invariant("kv_lookups needs a measurement window".into())
            })?;
            let r = match t.virtual_nodes {
                Some(v) => emulate_cluster(
                    preset,
                    &EmulationSpec {
                        phys_nodes: t.nodes,
                        virtual_nodes: v,
                        threads: t.threads_per_node,
                        coroutines: t.coroutines_per_thread,
                        recv_slots: t.recv_slots,
                        table: cfg.table,
                        warmup_ns: w.warmup_ns,
                        measure_ns,
                        seed: cfg.seed,
                        log,
                    },
                )?,
                None => run_kv_lookups(
                    preset,
                    &KvSpec {
                        nodes: t.nodes,
                        threads: t.threads_per_node,
                        coroutines: t.coroutines_per_thread,
                        table: cfg.table,
                        key_distribution: w.key_distribution,
                        remote_only: false,
                        virtual_nodes: None,
                        recv_slots: t.recv_slots,
                        warmup_ns: w.warmup_ns,
                        measure_ns,
                        seed: cfg.seed,
                        log,
                    },
                )?,
            };
            Ok(vec![kv_row(cfg, &r)?])
        }
        WorkloadKind::TatpLite => {
            let r = run_tatp(
                preset,
                &TatpSpec {
                    nodes: t.nodes,
                    threads: t.threads_per_node,
                    coroutines: t.coroutines_per_thread,
                    table: cfg.table,
                    key_distribution: w.key_distribution,
                    mix: w.mix,
                    run: match w.measure_ns {
                        Some(measure_ns) => TatpRun::Window {
                            warmup_ns: w.warmup_ns,
                            measure_ns,
                        },
                        None => TatpRun::Ops(w.op_count),
                    },
                    seed: cfg.seed,
                    log,
                },
            )?;
            if r.leaked_locks > 0 {
                return Err(RunError::Invariant(format!(
                    "{} buckets still locked",
                    r.leaked_locks
                )));
            }
            check_serializable(&r.initial, &r.records, &r.final_state, &tatp_derive)?;
            Ok(vec![ResultRow {
                experiment: cfg.id.clone(),
                workload: w.kind.label().into(),
                nodes: t.nodes,
                connections: r.connections_per_node,
                msg_cachelines: None,
                throughput: r.throughput,
                p50_ns: r.p50_ns,
                p99_ns: r.p99_ns,
                abort_rate: Some(r.abort_rate()),
                cache_hit_rate: r.cache_hit_rate,
                read_only: r.paths.read_only,
                read_then_rpc: r.paths.read_then_rpc,
                rpc_only: r.paths.rpc_only,
                breakdown: r.mean_breakdown,
                relative_throughput: None,
            }])
        }
        WorkloadKind::SyncMirroring => {
            let r = run_sync_mirroring(
                preset,
                &MirrorSpec {
                    messages: w.op_count,
                    sizes: w.sizes.clone(),
                    seed: cfg.seed,
                    log,
                },
            )?;
            Ok(r.by_size
                .iter()
                .map(|s| {
                    let mut lat: Vec<u64> = r
                        .records
                        .iter()
                        .filter(|m| m.cachelines == s.cachelines)
                        .map(|m| m.latency_ns)
                        .collect();
                    lat.sort_unstable();
                    ResultRow {
                        experiment: cfg.id.clone(),
                        workload: w.kind.label().into(),
                        nodes: 2,
                        connections: 1,
                        msg_cachelines: Some(s.cachelines),
                        // One writer waiting on each mirrored write.
                        throughput: 1000.0 / s.mean.total(),
                        p50_ns: percentile(&lat, 50.0),
                        p99_ns: percentile(&lat, 99.0),
                        abort_rate: None,
                        cache_hit_rate: 1.0,
                        read_only: 0,
                        read_then_rpc: 0,
                        rpc_only: 0,
                        breakdown: s.mean,
                        relative_throughput: None,
                    }
                })
                .collect())
        }
        WorkloadKind::RandomReads => {
            let payload_bytes = match w.sizes.bins.as_slice() {
                [(c, _)] => c * CACHELINE,
                _ => CACHELINE,
            };
            let p = random_reads_at(
                preset,
                &RandomReadsSpec {
                    depth: w.depth,
                    payload_bytes,
                    region_bytes: w.region_bytes,
                    seed: cfg.seed,
                    log,
                    ..RandomReadsSpec::default()
                },
                w.connections,
            )?;
            check_sum(&p.mean_breakdown, p.mean_latency_ns)?;
            Ok(vec![ResultRow {
                experiment: cfg.id.clone(),
                workload: w.kind.label().into(),
                nodes: 2,
                connections: p.connections,
                msg_cachelines: Some(payload_bytes / CACHELINE),
                throughput: p.throughput,
                p50_ns: p.mean_latency_ns.round() as u64,
                p99_ns: p.mean_latency_ns.round() as u64,
                abort_rate: None,
                cache_hit_rate: p.cache_hit_rate,
                read_only: 0,
                read_then_rpc: 0,
                rpc_only: 0,
                breakdown: p.mean_breakdown,
                relative_throughput: None,
            }])
        }
    }
}

fn check_sum(b: &LatencyBreakdown, total: f64) -> Result<(), RunError> {
    if (b.total() - total).abs() > 1e-6 * total.max(1.0) {
        return Err(RunError::Invariant(format!(
            "latency buckets sum to {:.3} but mean latency is {total:.3}",
            b.total()
        )));
    }
    Ok(())
}

/// Applies one sweep value to a copy of `base`.
pub fn apply_axis(
    base: &ExperimentConfig,
    axis: SweepAxis,
    value: u64,
) -> Result<ExperimentConfig, RunError> {
    let mut cfg = base.clone();
    let kind = cfg.workload.kind;
    let bad = || RunError::Sweep(format!("axis {axis} does not apply to {}", kind.label()));
    match axis {
        SweepAxis::MsgSize => match kind {
            WorkloadKind::SyncMirroring | WorkloadKind::RandomReads => {
                cfg.workload.sizes = MessageSizeDistribution::fixed(value)
            }
            _ => return Err(bad()),
        },
        SweepAxis::Connections => match kind {
            WorkloadKind::RandomReads => cfg.workload.connections = value as usize,
            _ => return Err(bad()),
        },
        SweepAxis::Nodes => match (kind, cfg.topology.virtual_nodes) {
            (WorkloadKind::KvLookups, Some(_)) => cfg.topology.virtual_nodes = Some(value as usize),
            (WorkloadKind::KvLookups | WorkloadKind::TatpLite, None) => {
                cfg.topology.nodes = value as usize
            }
            _ => return Err(bad()),
        },
    }
    cfg.validate()
        .map_err(|m| RunError::Sweep(format!("{axis} = {value}: {m}")))?;
    Ok(cfg)
}

/// Runs every sweep point and fills in throughput relative to the first
/// row. Points run on separate threads unless an event log is attached,
/// since the log must be written in a fixed order.
pub fn run_sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[u64],
    log: Option<EventLog>,
) -> Result<Vec<ResultRow>, RunError> {
    if values.is_empty() {
        return Err(RunError::Sweep("no values given".into()));
    }
    let configs: Vec<ExperimentConfig> = values
        .iter()
        .map(|&v| apply_axis(base, axis, v))
        .collect::<Result<_, _>>()?;
    let per_point: Vec<Result<Vec<ResultRow>, RunError>> = match log {
        Some(log) => configs
            .iter()
            .map(|c| run_experiment(c, Some(log.clone())))
            .collect(),
        None => std::thread::scope(|s| {
            let handles: Vec<_> = configs
                .iter()
                .map(|c| s.spawn(move || run_experiment(c, None)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("sweep worker panicked"))
                .collect()
        }),
    };
    let mut rows = Vec::new();
    for r in per_point {
        rows.extend(r?);
    }
    let base_tput = rows[0].throughput;
    for r in &mut rows {
        r.relative_throughput = Some(if base_tput > 0.0 {
            r.throughput / base_tput
        } else {
            0.0
        });
    }
    Ok(rows)
}

/// Parses a comma-separated value list; `a..b` expands to powers of two.
pub fn parse_values(s: &str) -> Result<Vec<u64>, String> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let a: u64 = a
                .trim()
                .parse()
                .map_err(|_| format!("bad range start in `{part}`"))?;
            let b: u64 = b
                .trim()
                .parse()
                .map_err(|_| format!("bad range end in `{part}`"))?;
            if a == 0 || a > b {
                return Err(format!("empty range `{part}`"));
            }
            let mut v = a;
            while v <= b {
                out.push(v);
                v *= 2;
            }
        } else {
            out.push(part.parse().map_err(|_| format!("bad value `{part}`"))?);
        }
    }
    if out.is_empty() {
        return Err("no values given".into());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_expand_ranges() {
        assert_eq!(parse_values("1..8").unwrap(), vec![1, 2, 4, 8]);
        assert_eq!(parse_values("8, 64").unwrap(), vec![8, 64]);
        assert!(parse_values("").is_err());
        assert!(parse_values("4..2").is_err());
        assert!(parse_values("x").is_err());
    }

    #[test]
    fn axes_parse() {
        assert_eq!(SweepAxis::parse("msg_size"), Some(SweepAxis::MsgSize));
        assert_eq!(SweepAxis::parse("threads"), None);
    }
}
