//! Small fixed workloads shared by the criterion benches and their smoke test.

use stormsim::nic::Preset;
use stormsim::workloads::{
    run_kv_lookups, run_random_reads, run_sync_mirroring, KvSpec, MirrorSpec, RandomReadsSpec,
    TableShape, WorkloadError,
};

/// Mean end-to-end latency of `messages` mirrored writes, in ns.
pub fn mirroring(messages: usize) -> Result<f64, WorkloadError> {
    let spec = MirrorSpec {
        messages,
        ..Default::default()
    };
    let r = run_sync_mirroring(&Preset::default(), &spec)?;
    let n = r.records.len().max(1) as f64;
    Ok(r.records.iter().map(|m| m.latency_ns as f64).sum::<f64>() / n)
}

/// Throughput of one random-reads point with `connections` QPs.
pub fn random_reads(connections: usize) -> Result<f64, WorkloadError> {
    let spec = RandomReadsSpec {
        depth: 64,
        min_measured: 2_000,
        ..Default::default()
    };
    let points = run_random_reads(&Preset::default(), &spec, &[connections])?;
    Ok(points[0].throughput)
}

/// Lookup throughput of a short two-node KV window.
pub fn kv_lookups(measure_ns: u64) -> Result<f64, WorkloadError> {
    let spec = KvSpec {
        table: TableShape {
            key_count: 4096,
            ..Default::default()
        },
        warmup_ns: 10_000,
        measure_ns,
        ..Default::default()
    };
    Ok(run_kv_lookups(&Preset::default(), &spec)?.throughput)
}
