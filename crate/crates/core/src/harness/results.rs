//! Versioned results CSV. Every row carries the schema tag in its first
//! column so concatenated files stay self-describing.

use std::io::{Read, Write};

use thiserror::Error;

use crate::nic::LatencyBreakdown;

pub const SCHEMA_VERSION: &str = "stormsim-results-v1";

pub const COLUMNS: &[&str] = &[
    "schema",
    "experiment",
    "workload",
    "nodes",
    "connections",
    "msg_cachelines",
    "throughput_ops_per_us_per_machine",
    "p50_ns",
    "p99_ns",
    "abort_rate",
    "cache_hit_rate",
    "read_only",
    "read_then_rpc",
    "rpc_only",
    "pcie_const_ns",
    "pcie_var_ns",
    "net_const_ns",
    "net_var_ns",
    "total_latency_ns",
    "relative_throughput",
];

/// Tolerance for the bucket-sum check; values are written with three decimals.
const SUM_TOLERANCE: f64 = 0.002;

#[derive(Debug, Error)]
pub enum ResultsError {
    #[error("malformed results CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("results CSV header mismatch: expected `{expected}`, got `{got}`")]
    Header { expected: String, got: String },
    #[error("row {row}: unknown schema `{schema}`")]
    Schema { row: usize, schema: String },
    #[error("row {row}: bad `{column}` value `{value}`")]
    Field {
        row: usize,
        column: &'static str,
        value: String,
    },
    #[error("row {row}: latency buckets sum to {sum:.3} but total is {total:.3}")]
    BucketSum { row: usize, sum: f64, total: f64 },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub experiment: String,
    pub workload: String,
    pub nodes: usize,
    pub connections: usize,
    pub msg_cachelines: Option<u64>,
    pub throughput: f64,
    pub p50_ns: u64,
    pub p99_ns: u64,
    pub abort_rate: Option<f64>,
    pub cache_hit_rate: f64,
    pub read_only: u64,
    pub read_then_rpc: u64,
    pub rpc_only: u64,
    pub breakdown: LatencyBreakdown,
    /// Throughput relative to the first row of a sweep.
    pub relative_throughput: Option<f64>,
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

fn f3(x: f64) -> String {
    format!("{x:.3}")
}

impl ResultRow {
    /// Buckets rounded the way they are written; the total is their sum, so
    /// the written columns add up exactly.
    fn rounded_buckets(&self) -> [f64; 4] {
        let b = &self.breakdown;
        [
            round3(b.pcie_const),
            round3(b.pcie_var),
            round3(b.net_const),
            round3(b.net_var),
        ]
    }

    fn fields(&self) -> Vec<String> {
        let [pc, pv, nc, nv] = self.rounded_buckets();
        vec![
            SCHEMA_VERSION.to_string(),
            self.experiment.clone(),
            self.workload.clone(),
            self.nodes.to_string(),
            self.connections.to_string(),
            self.msg_cachelines
                .map(|c| c.to_string())
                .unwrap_or_default(),
            f3(self.throughput),
            self.p50_ns.to_string(),
            self.p99_ns.to_string(),
            self.abort_rate.map(f3).unwrap_or_default(),
            f3(self.cache_hit_rate),
            self.read_only.to_string(),
            self.read_then_rpc.to_string(),
            self.rpc_only.to_string(),
            f3(pc),
            f3(pv),
            f3(nc),
            f3(nv),
            f3(pc + pv + nc + nv),
            self.relative_throughput.map(f3).unwrap_or_default(),
        ]
    }

    pub fn total_latency(&self) -> f64 {
        self.rounded_buckets().iter().sum()
    }
}

/// Writes the header and rows. An empty slice still yields the header.
pub fn write_rows<W: Write>(out: W, rows: &[ResultRow]) -> Result<(), ResultsError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COLUMNS)?;
    for r in rows {
        w.write_record(r.fields())?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_csv_string(rows: &[ResultRow]) -> String {
    let mut buf = Vec::new();
    write_rows(&mut buf, rows).expect("writing to memory");
    String::from_utf8(buf).expect("csv is utf-8")
}

fn parse<T: std::str::FromStr>(
    row: usize,
    column: &'static str,
    s: &str,
) -> Result<T, ResultsError> {
    s.parse().map_err(|_| ResultsError::Field {
        row,
        column,
        value: s.to_string(),
    })
}

fn parse_opt<T: std::str::FromStr>(
    row: usize,
    column: &'static str,
    s: &str,
) -> Result<Option<T>, ResultsError> {
    if s.is_empty() {
        Ok(None)
    } else {
        parse(row, column, s).map(Some)
    }
}

/// Parses a results file. Empty input parses to no rows. Each row's
/// buckets must add up to its total.
pub fn read_rows<R: Read>(input: R) -> Result<Vec<ResultRow>, ResultsError> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(input);
    let mut records = r.records();
    let Some(header) = records.next().transpose()? else {
        return Ok(Vec::new());
    };
    if header.iter().ne(COLUMNS.iter().copied()) {
        return Err(ResultsError::Header {
            expected: COLUMNS.join(","),
            got: header.iter().collect::<Vec<_>>().join(","),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in records.enumerate() {
        let rec = rec?;
        let n = i + 1;
        let g = |c: usize| rec.get(c).unwrap_or("");
        if g(0) != SCHEMA_VERSION {
            return Err(ResultsError::Schema {
                row: n,
                schema: g(0).to_string(),
            });
        }
        let breakdown = LatencyBreakdown {
            pcie_const: parse(n, "pcie_const_ns", g(14))?,
            pcie_var: parse(n, "pcie_var_ns", g(15))?,
            net_const: parse(n, "net_const_ns", g(16))?,
            net_var: parse(n, "net_var_ns", g(17))?,
        };
        let total: f64 = parse(n, "total_latency_ns", g(18))?;
        if (breakdown.total() - total).abs() > SUM_TOLERANCE {
            return Err(ResultsError::BucketSum {
                row: n,
                sum: breakdown.total(),
                total,
            });
        }
        rows.push(ResultRow {
            experiment: g(1).to_string(),
            workload: g(2).to_string(),
            nodes: parse(n, "nodes", g(3))?,
            connections: parse(n, "connections", g(4))?,
            msg_cachelines: parse_opt(n, "msg_cachelines", g(5))?,
            throughput: parse(n, "throughput_ops_per_us_per_machine", g(6))?,
            p50_ns: parse(n, "p50_ns", g(7))?,
            p99_ns: parse(n, "p99_ns", g(8))?,
            abort_rate: parse_opt(n, "abort_rate", g(9))?,
            cache_hit_rate: parse(n, "cache_hit_rate", g(10))?,
            read_only: parse(n, "read_only", g(11))?,
            read_then_rpc: parse(n, "read_then_rpc", g(12))?,
            rpc_only: parse(n, "rpc_only", g(13))?,
            breakdown,
            relative_throughput: parse_opt(n, "relative_throughput", g(19))?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row() -> ResultRow {
        ResultRow {
            experiment: "e".into(),
            workload: "sync_mirroring".into(),
            nodes: 2,
            connections: 1,
            msg_cachelines: Some(1),
            throughput: 0.0,
            p50_ns: 10,
            p99_ns: 20,
            abort_rate: None,
            cache_hit_rate: 1.0,
            read_only: 0,
            read_then_rpc: 0,
            rpc_only: 0,
            breakdown: LatencyBreakdown {
                pcie_const: 960.0,
                pcie_var: 8.0,
                net_const: 485.0,
                net_var: 5.0,
            },
            relative_throughput: None,
        }
    }

    #[test]
    fn round_trip() {
        let rows = vec![
            row(),
            ResultRow {
                abort_rate: Some(0.25),
                ..row()
            },
        ];
        let text = to_csv_string(&rows);
        assert!(text.starts_with("schema,experiment,"));
        assert_eq!(read_rows(text.as_bytes()).unwrap(), rows);
    }

    #[test]
    fn thirds_still_sum() {
        let mut r = row();
        r.breakdown = LatencyBreakdown {
            pcie_const: 1.0 / 3.0,
            pcie_var: 1.0 / 3.0,
            net_const: 1.0 / 3.0,
            net_var: 2.0 / 3.0,
        };
        let back = read_rows(to_csv_string(&[r]).as_bytes()).unwrap();
        assert!((back[0].total_latency() - 1.666).abs() < 1e-9);
    }

    #[test]
    fn empty_input_is_no_rows() {
        assert!(read_rows(&b""[..]).unwrap().is_empty());
        assert!(read_rows(to_csv_string(&[]).as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn bad_sum_rejected() {
        let text = to_csv_string(&[row()]).replace("1458.000", "1500.000");
        assert!(matches!(
            read_rows(text.as_bytes()),
            Err(ResultsError::BucketSum { row: 1, .. })
        ));
    }

    #[test]
    fn wrong_header_rejected() {
        assert!(matches!(
            read_rows(&b"a,b\n"[..]),
            Err(ResultsError::Header { .. })
        ));
    }
}
