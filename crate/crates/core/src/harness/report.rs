//! Markdown breakdown report over a results CSV.

use std::fmt::Write as _;

use super::results::ResultRow;

fn pct(part: f64, total: f64) -> f64 {
    if total == 0.0 {
        0.0
    } else {
        100.0 * part / total
    }
}

fn label(r: &ResultRow) -> String {
    match r.msg_cachelines {
        Some(1) => "1 cacheline".to_string(),
        Some(c) => format!("{c} cachelines"),
        None => format!("{} nodes, {} connections", r.nodes, r.connections),
    }
}

/// Renders one section per experiment, in first-appearance order. No rows
/// renders the empty string.
pub fn render(rows: &[ResultRow]) -> String {
    let mut ids: Vec<&str> = Vec::new();
    for r in rows {
        if !ids.contains(&r.experiment.as_str()) {
            ids.push(&r.experiment);
        }
    }
    let mut out = String::new();
    for id in ids {
        let group: Vec<&ResultRow> = rows.iter().filter(|r| r.experiment == id).collect();
        let _ = writeln!(out, "## {id} ({})\n", group[0].workload);
        out.push_str("| nodes | conns | cachelines | ops/us/machine | p50 ns | p99 ns | abort | hit rate | total ns |\n");
        out.push_str("|---|---|---|---|---|---|---|---|---|\n");
        for r in &group {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {:.3} | {} | {} | {} | {:.3} | {:.1} |",
                r.nodes,
                r.connections,
                r.msg_cachelines
                    .map(|c| c.to_string())
                    .unwrap_or_else(|| "-".into()),
                r.throughput,
                r.p50_ns,
                r.p99_ns,
                r.abort_rate
                    .map(|a| format!("{a:.3}"))
                    .unwrap_or_else(|| "-".into()),
                r.cache_hit_rate,
                r.total_latency(),
            );
        }
        out.push('\n');
        for r in &group {
            let b = &r.breakdown;
            let t = r.total_latency();
            if t == 0.0 {
                continue;
            }
            let _ = writeln!(
                out,
                "- {}: PCIe share: {:.0}% (constant {:.0}%, variable {:.0}%); network constant {:.0}%, variable {:.0}%",
                label(r),
                pct(b.pcie_const + b.pcie_var, t),
                pct(b.pcie_const, t),
                pct(b.pcie_var, t),
                pct(b.net_const, t),
                pct(b.net_var, t),
            );
        }
        let paths: u64 = group
            .iter()
            .map(|r| r.read_only + r.read_then_rpc + r.rpc_only)
            .sum();
        if paths > 0 {
            let (ro, rr, rp) = group.iter().fold((0, 0, 0), |(a, b, c), r| {
                (a + r.read_only, b + r.read_then_rpc, c + r.rpc_only)
            });
            let p = paths as f64;
            let _ = writeln!(
                out,
                "- lookup paths: read-only {:.1}%, read then RPC {:.1}%, RPC only {:.1}%",
                pct(ro as f64, p),
                pct(rr as f64, p),
                pct(rp as f64, p)
            );
        }
        if group.len() > 1 {
            let (first, last) = (group[0], group[group.len() - 1]);
            if first.throughput > 0.0 && last.throughput > 0.0 {
                let _ = writeln!(
                    out,
                    "- throughput {} -> {}: drop {:.1}%, ratio {:.2}x",
                    label(first),
                    label(last),
                    100.0 * (1.0 - last.throughput / first.throughput),
                    first.throughput / last.throughput
                );
            }
        }
        out.push('\n');
    }
    out
}
