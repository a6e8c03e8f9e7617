//! Preset calibration.
//!
//! Latency anchors fix the two free latency constants, `pcie_write_ns` and
//! `wire_prop_ns`, by linear least squares over the closed-form latency.
//! Drop anchors then tune one cache parameter each by bisection against the
//! simulated workload. Everything else comes from the prior preset.

use std::fmt;
use std::io::Read;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::nic::{rpc_latency, unloaded_latency, NicConfig, OneSidedOp, Preset};
use crate::workloads::{
    drop_fraction, emulate_cluster, random_reads_at, EmulationSpec, RandomReadsSpec, WorkloadError,
};

/// Base connection count for `random_reads` drop anchors.
pub const RANDOM_READS_BASE: usize = 8;
/// Base virtual node count for `emulation` drop anchors.
pub const EMULATION_BASE: usize = 32;

const BISECT_STEPS: usize = 14;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("malformed anchors CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("anchors line {line}: {msg}")]
    Anchor { line: usize, msg: String },
    #[error("underdetermined: {anchors} latency anchors for {params} free parameters")]
    Underdetermined { anchors: usize, params: usize },
    #[error("latency anchors do not separate the free parameters")]
    RankDeficient,
    #[error("fit gives non-physical {param} = {value:.1} ns")]
    NonPhysical { param: &'static str, value: f64 },
    #[error("drop target {target} for {op} is outside what the parameter range reaches ({low:.3}..{high:.3})")]
    Unreachable {
        op: String,
        target: f64,
        low: f64,
        high: f64,
    },
    #[error(transparent)]
    Workload(#[from] WorkloadError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatencyOp {
    OneSided(OneSidedOp),
    Rpc,
}

impl LatencyOp {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "read" => LatencyOp::OneSided(OneSidedOp::Read),
            "write" => LatencyOp::OneSided(OneSidedOp::Write),
            "write_imm" => LatencyOp::OneSided(OneSidedOp::WriteImm),
            "rpc" => LatencyOp::Rpc,
            _ => return None,
        })
    }

    /// Closed-form all-hit latency. RPCs use equal request and reply sizes.
    pub fn predict(self, preset: &Preset, bytes: u64) -> f64 {
        self.predict_with(&preset.nic, preset, bytes)
    }

    fn predict_with(self, nic: &NicConfig, preset: &Preset, bytes: u64) -> f64 {
        match self {
            LatencyOp::OneSided(op) => unloaded_latency(nic, op, bytes).total(),
            LatencyOp::Rpc => rpc_latency(nic, &preset.host, bytes, bytes).total(),
        }
    }
}

impl fmt::Display for LatencyOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LatencyOp::OneSided(op) => write!(f, "{op}"),
            LatencyOp::Rpc => f.write_str("rpc"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropOp {
    /// RandomReads throughput drop fraction from the base to `scaled` connections.
    RandomReads,
    /// Emulated per-machine throughput ratio from the base to `scaled` virtual nodes.
    Emulation,
}

impl fmt::Display for DropOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DropOp::RandomReads => "random_reads",
            DropOp::Emulation => "emulation",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Anchor {
    /// Fitted latency target in ns.
    Latency {
        op: LatencyOp,
        bytes: u64,
        target_ns: f64,
    },
    /// Held-out latency target, reported but not fitted.
    Check {
        op: LatencyOp,
        bytes: u64,
        target_ns: f64,
    },
    Drop {
        op: DropOp,
        scaled: usize,
        target: f64,
    },
}

/// Reads `kind,op,size,target` rows. `size` is payload bytes for latency
/// rows and the scaled connection or node count for drop rows.
pub fn read_anchors<R: Read>(input: R) -> Result<Vec<Anchor>, FitError> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers = r.headers()?.clone();
    if headers.iter().ne(["kind", "op", "size", "target"]) {
        return Err(FitError::Anchor {
            line: 1,
            msg: "header must be `kind,op,size,target`".into(),
        });
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let bad = |msg: String| FitError::Anchor { line, msg };
        let (kind, op, size, target) = (&rec[0], &rec[1], &rec[2], &rec[3]);
        let size: u64 = size
            .parse()
            .map_err(|_| bad(format!("bad size `{size}`")))?;
        let target: f64 = target
            .parse()
            .map_err(|_| bad(format!("bad target `{target}`")))?;
        if !(target.is_finite() && target > 0.0) || size == 0 {
            return Err(bad("size and target must be positive".into()));
        }
        let lat_op =
            || LatencyOp::parse(op).ok_or_else(|| bad(format!("unknown latency op `{op}`")));
        out.push(match kind {
            "latency" => Anchor::Latency {
                op: lat_op()?,
                bytes: size,
                target_ns: target,
            },
            "check" => Anchor::Check {
                op: lat_op()?,
                bytes: size,
                target_ns: target,
            },
            "drop" => {
                let (op, base) = match op {
                    "random_reads" => (DropOp::RandomReads, RANDOM_READS_BASE),
                    "emulation" => (DropOp::Emulation, EMULATION_BASE),
                    _ => return Err(bad(format!("unknown drop op `{op}`"))),
                };
                if (size as usize) <= base {
                    return Err(bad(format!(
                        "scaled count {size} must exceed the base {base}"
                    )));
                }
                Anchor::Drop {
                    op,
                    scaled: size as usize,
                    target,
                }
            }
            _ => return Err(bad(format!("unknown anchor kind `{kind}`"))),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    pub kind: &'static str,
    pub op: String,
    pub size: u64,
    pub target: f64,
    pub achieved: f64,
}

impl Residual {
    pub fn relative(&self) -> f64 {
        (self.achieved - self.target).abs() / self.target
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub preset: Preset,
    pub residuals: Vec<Residual>,
}

impl FitReport {
    /// Worst relative residual over fitted latency anchors.
    pub fn max_latency_residual(&self) -> f64 {
        self.residuals
            .iter()
            .filter(|r| r.kind == "latency")
            .map(Residual::relative)
            .fold(0.0, f64::max)
    }

    pub fn residual(&self, kind: &str, op: &str) -> Option<&Residual> {
        self.residuals.iter().find(|r| r.kind == kind && r.op == op)
    }
}

impl fmt::Display for FitReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "preset {}: pcie_write_ns = {}, wire_prop_ns = {}",
            self.preset.name, self.preset.nic.pcie_write_ns, self.preset.nic.wire_prop_ns
        )?;
        writeln!(
            f,
            "{:<8} {:<13} {:>6} {:>10} {:>10} {:>9}",
            "kind", "op", "size", "target", "achieved", "residual"
        )?;
        for r in &self.residuals {
            writeln!(
                f,
                "{:<8} {:<13} {:>6} {:>10.3} {:>10.3} {:>8.2}%",
                r.kind,
                r.op,
                r.size,
                r.target,
                r.achieved,
                r.relative() * 100.0
            )?;
        }
        write!(
            f,
            "max latency residual: {:.2}%",
            self.max_latency_residual() * 100.0
        )
    }
}

/// Fits `pcie_write_ns` and `wire_prop_ns`. Predictions are affine in both,
/// so the design matrix comes from unit perturbations of the prior.
fn fit_latency(prior: &Preset, anchors: &[(LatencyOp, u64, f64)]) -> Result<(u64, u64), FitError> {
    const PARAMS: usize = 2;
    if anchors.len() < PARAMS {
        return Err(FitError::Underdetermined {
            anchors: anchors.len(),
            params: PARAMS,
        });
    }
    let at = |a: u64, w: u64| NicConfig {
        pcie_write_ns: a,
        wire_prop_ns: w,
        ..prior.nic.clone()
    };
    let (base, da, dw) = (at(0, 0), at(1, 0), at(0, 1));
    let n = anchors.len();
    let mut m = DMatrix::<f64>::zeros(n, PARAMS);
    let mut rhs = DVector::<f64>::zeros(n);
    for (i, &(op, bytes, target)) in anchors.iter().enumerate() {
        let c = op.predict_with(&base, prior, bytes);
        m[(i, 0)] = op.predict_with(&da, prior, bytes) - c;
        m[(i, 1)] = op.predict_with(&dw, prior, bytes) - c;
        rhs[i] = target - c;
    }
    let svd = m.svd(true, true);
    if svd.rank(1e-9) < PARAMS {
        return Err(FitError::RankDeficient);
    }
    let x = svd.solve(&rhs, 1e-9).map_err(|_| FitError::RankDeficient)?;
    for (param, value) in [("pcie_write_ns", x[0]), ("wire_prop_ns", x[1])] {
        if value.round() < 1.0 {
            return Err(FitError::NonPhysical { param, value });
        }
    }
    Ok((x[0].round() as u64, x[1].round() as u64))
}

/// Knobs for the simulated drop measurements.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DropSetup {
    pub random_reads: RandomReadsSpec,
    pub emulation: EmulationSpec,
}

/// Measures a drop anchor's quantity under `preset`.
pub fn measure_drop(
    preset: &Preset,
    op: DropOp,
    scaled: usize,
    setup: &DropSetup,
) -> Result<f64, FitError> {
    Ok(match op {
        DropOp::RandomReads => {
            let base = random_reads_at(preset, &setup.random_reads, RANDOM_READS_BASE)?;
            let high = random_reads_at(preset, &setup.random_reads, scaled)?;
            drop_fraction(base.throughput, high.throughput)
        }
        DropOp::Emulation => {
            let run = |v| {
                emulate_cluster(
                    preset,
                    &EmulationSpec {
                        virtual_nodes: v,
                        ..setup.emulation.clone()
                    },
                )
            };
            run(EMULATION_BASE)?.throughput / run(scaled)?.throughput
        }
    })
}

/// Bisects one parameter until the measured quantity meets `target`. The
/// measurement must grow with the parameter.
fn bisect(
    preset: &Preset,
    op: DropOp,
    scaled: usize,
    target: f64,
    setup: &DropSetup,
) -> Result<(Preset, f64), FitError> {
    let (mut lo, mut hi, set): (f64, f64, fn(&mut Preset, f64)) = match op {
        DropOp::RandomReads => (0.02, 1.0, |p, v| {
            p.nic.miss_overlap_factor = (v * 1000.0).round() / 1000.0
        }),
        DropOp::Emulation => (50.0, 4000.0, |p, v| p.nic.cache_miss_ns = v.round() as u64),
    };
    let eval = |v: f64| -> Result<(Preset, f64), FitError> {
        let mut p = preset.clone();
        set(&mut p, v);
        let got = measure_drop(&p, op, scaled, setup)?;
        Ok((p, got))
    };
    let (low, high) = (eval(lo)?, eval(hi)?);
    if target < low.1 || target > high.1 {
        return Err(FitError::Unreachable {
            op: op.to_string(),
            target,
            low: low.1,
            high: high.1,
        });
    }
    let mut best = if (low.1 - target).abs() < (high.1 - target).abs() {
        low
    } else {
        high
    };
    for _ in 0..BISECT_STEPS {
        let mid = (lo + hi) / 2.0;
        let (p, got) = eval(mid)?;
        if (got - target).abs() < (best.1 - target).abs() {
            best = (p, got);
        }
        if got < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(best)
}

/// Runs the full calibration: latency constants first, then each drop anchor
/// in file order.
pub fn fit(prior: &Preset, anchors: &[Anchor], setup: &DropSetup) -> Result<FitReport, FitError> {
    let lat: Vec<(LatencyOp, u64, f64)> = anchors
        .iter()
        .filter_map(|a| match *a {
            Anchor::Latency {
                op,
                bytes,
                target_ns,
            } => Some((op, bytes, target_ns)),
            _ => None,
        })
        .collect();
    let (a, w) = fit_latency(prior, &lat)?;
    let mut preset = prior.clone();
    preset.nic.pcie_write_ns = a;
    preset.nic.wire_prop_ns = w;

    let mut residuals = Vec::new();
    for anchor in anchors {
        match *anchor {
            Anchor::Latency {
                op,
                bytes,
                target_ns,
            }
            | Anchor::Check {
                op,
                bytes,
                target_ns,
            } => {
                residuals.push(Residual {
                    kind: if matches!(anchor, Anchor::Latency { .. }) {
                        "latency"
                    } else {
                        "check"
                    },
                    op: op.to_string(),
                    size: bytes,
                    target: target_ns,
                    achieved: op.predict(&preset, bytes),
                });
            }
            Anchor::Drop { op, scaled, target } => {
                let (p, got) = bisect(&preset, op, scaled, target, setup)?;
                preset = p;
                residuals.push(Residual {
                    kind: "drop",
                    op: op.to_string(),
                    size: scaled as u64,
                    target,
                    achieved: got,
                });
            }
        }
    }
    Ok(FitReport { preset, residuals })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ib_prior() -> Preset {
        let mut p = Preset::default();
        p.nic.pu_service_ns = 100;
        p
    }

    fn lat(op: &str, bytes: u64, target_ns: f64) -> Anchor {
        Anchor::Latency {
            op: LatencyOp::parse(op).unwrap(),
            bytes,
            target_ns,
        }
    }

    #[test]
    fn two_anchors_fit_exactly_up_to_rounding() {
        let r = fit(
            &ib_prior(),
            &[lat("read", 64, 1800.0), lat("rpc", 64, 2700.0)],
            &DropSetup::default(),
        )
        .unwrap();
        assert!(r.max_latency_residual() < 0.002, "{r}");
    }

    #[test]
    fn recovers_known_constants() {
        let mut truth = ib_prior();
        truth.nic.pcie_write_ns = 240;
        truth.nic.wire_prop_ns = 170;
        let anchors: Vec<Anchor> = [
            ("read", 64),
            ("write", 512),
            ("rpc", 128),
            ("write_imm", 4096),
        ]
        .iter()
        .map(|&(op, b)| lat(op, b, LatencyOp::parse(op).unwrap().predict(&truth, b)))
        .collect();
        let r = fit(&ib_prior(), &anchors, &DropSetup::default()).unwrap();
        assert_eq!(
            (r.preset.nic.pcie_write_ns, r.preset.nic.wire_prop_ns),
            (240, 170)
        );
    }

    #[test]
    fn single_anchor_refused() {
        assert!(matches!(
            fit(
                &ib_prior(),
                &[lat("read", 64, 1800.0)],
                &DropSetup::default()
            ),
            Err(FitError::Underdetermined {
                anchors: 1,
                params: 2
            })
        ));
    }

    #[test]
    fn collinear_anchors_refused() {
        // Two one-sided reads move A and W in the same 2:2 proportion.
        assert!(matches!(
            fit(
                &ib_prior(),
                &[lat("read", 64, 1800.0), lat("read", 64, 1810.0)],
                &DropSetup::default()
            ),
            Err(FitError::RankDeficient)
        ));
    }

    #[test]
    fn non_physical_refused() {
        assert!(matches!(
            fit(
                &ib_prior(),
                &[lat("read", 64, 300.0), lat("rpc", 64, 400.0)],
                &DropSetup::default()
            ),
            Err(FitError::NonPhysical { .. })
        ));
    }

    #[test]
    fn anchors_parse_with_comments() {
        let text = "kind,op,size,target\n# held out\nlatency,read,64,1800\ncheck,read,1024,2100\ndrop,random_reads,64,0.32\n";
        let a = read_anchors(text.as_bytes()).unwrap();
        assert_eq!(a.len(), 3);
        assert!(matches!(
            a[2],
            Anchor::Drop {
                op: DropOp::RandomReads,
                scaled: 64,
                ..
            }
        ));
    }

    #[test]
    fn bad_anchor_rows_rejected() {
        for text in [
            "kind,op,size,target\nlatency,teleport,64,1\n",
            "kind,op,size,target\nlatency,read,64,-5\n",
            "kind,op,size,target\ndrop,random_reads,4,0.5\n",
            "op,size\nread,64\n",
        ] {
            assert!(read_anchors(text.as_bytes()).is_err(), "{text}");
        }
    }
}
