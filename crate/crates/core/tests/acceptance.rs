//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fail.
//! Criteria run on separate threads; each builds its own simulations.

use std::cell::RefCell;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::time::Instant;

use stormsim::dataplane::{Callbacks, DataplaneConfig, Runtime};
use stormsim::harness::{self, fit::DropSetup, ExperimentConfig};
use stormsim::kvstore::{ContiguousAllocator, HashTable, KvError, NaiveAllocator, Registrar};
use stormsim::nic::{
    one_sided_latency, region_meta, unloaded_latency, Nic, OneSidedOp, Preset, CACHELINE,
};
use stormsim::oracle::check_serializable;
use stormsim::sim::{EventLog, SeededRng};
use stormsim::txengine::{TxEngine, TxStatus};
use stormsim::verbs::{
    CompletionStatus, Fabric, LocalBuf, RecvBuf, RemoteAddr, Transport, VerbsError,
};
use stormsim::workloads::*;

type Outcome = Result<Vec<String>, Vec<String>>;

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn preset(name: &str) -> Preset {
    Preset::load(&repo().join("presets").join(format!("{name}.preset")))
        .expect("shipped preset loads")
}

/// Collects detail lines and whether every check held.
#[derive(Default)]
struct Checks {
    lines: Vec<String>,
    ok: bool,
}

impl Checks {
    fn new() -> Self {
        Checks {
            lines: Vec::new(),
            ok: true,
        }
    }

    fn check(&mut self, cond: bool, line: String) {
        self.lines
            .push(format!("{} {line}", if cond { "ok  " } else { "FAIL" }));
        self.ok &= cond;
    }

    fn note(&mut self, line: String) {
        self.lines.push(format!("     {line}"));
    }

    fn done(self) -> Outcome {
        if self.ok {
            Ok(self.lines)
        } else {
            Err(self.lines)
        }
    }
}

fn err<E: std::fmt::Display>(e: E) -> Vec<String> {
    vec![format!("FAIL error: {e}")]
}

fn closed_form_oracle() -> Outcome {
    let names = ["cx3", "cx4roce", "cx5", "cx4ib"];
    let presets: Vec<Preset> = names.iter().map(|n| preset(n)).collect();
    let mut rng = SeededRng::new(2024);
    let mut c = Checks::new();
    let (mut worst_cold, mut worst_warm) = (0.0f64, 0.0f64);
    let mut misses_seen = 0usize;
    for _ in 0..50 {
        let p = &presets[rng.below(4) as usize];
        let op = [OneSidedOp::Read, OneSidedOp::Write, OneSidedOp::WriteImm][rng.below(3) as usize];
        let bytes = (1 + rng.below(256)) * CACHELINE;
        let mut f: Fabric = Fabric::new(2, p);
        let page = 2 << 20;
        let r0 = f
            .register_region(0, page, page, false)
            .map_err(err)?
            .region_id;
        let r1 = f
            .register_region(1, page, page, false)
            .map_err(err)?
            .region_id;
        let (c0, c1) = (f.create_cq(0), f.create_cq(1));
        let a = f.create_qp(0, Transport::Rc, c0, c0);
        let b = f.create_qp(1, Transport::Rc, c1, c1);
        f.connect(a, b).map_err(err)?;
        f.record_ops(true);
        // First op runs cold, the second with its state cached.
        for round in 0..2u64 {
            let local = LocalBuf {
                region: r0,
                offset: 0,
                len: bytes,
            };
            let remote = RemoteAddr {
                region: r1,
                offset: 0,
            };
            match op {
                OneSidedOp::Read => f.post_read(a, local, remote),
                OneSidedOp::Write => f.post_write(a, local, remote),
                OneSidedOp::WriteImm => {
                    f.post_recv(
                        b,
                        RecvBuf {
                            wr_id: round,
                            buf: LocalBuf {
                                region: r1,
                                offset: page / 2,
                                len: 8,
                            },
                        },
                    )
                    .map_err(err)?;
                    f.post_write_imm(a, local, remote, round as u32)
                }
            }
            .map_err(err)?;
            f.run_to_quiescence();
            let done = f.poll_cq(c0, 8).map_err(err)?;
            if done.len() != 1 || done[0].status != CompletionStatus::Ok {
                return Err(vec![format!("FAIL {op} of {bytes} B did not complete")]);
            }
            f.poll_cq(c1, 8).map_err(err)?;
            let rec = f
                .take_records()
                .pop()
                .ok_or_else(|| vec!["FAIL no op record".to_string()])?;
            let sim = rec.latency_ns() as f64;
            let formula = one_sided_latency(&p.nic, op, bytes, &rec.outcomes).total();
            let diff = (sim - formula).abs();
            if round == 0 {
                worst_cold = worst_cold.max(diff);
                misses_seen += usize::from(
                    rec.outcomes
                        .iter()
                        .any(|o| *o != stormsim::nic::CacheOutcome::Hit),
                );
            } else {
                let all_hit = unloaded_latency(&p.nic, op, bytes).total();
                worst_warm = worst_warm.max(diff).max((sim - all_hit).abs());
            }
        }
    }
    c.check(worst_cold <= 1.0, format!("cold ops: max |simulated - formula| = {worst_cold:.3} ns ({misses_seen} of 50 saw misses)"));
    c.check(
        worst_warm <= 1.0,
        format!("warm ops vs all-hit formula: max deviation = {worst_warm:.3} ns"),
    );
    c.done()
}

fn calibration() -> Outcome {
    let mut c = Checks::new();
    for (set, prior, shipped) in [("ib", "cx4ib", "cx4ib"), ("roce", "cx4roce", "cx4roce")] {
        let anchors =
            std::fs::File::open(repo().join(format!("anchors/{set}.csv"))).map_err(err)?;
        let anchors = harness::read_anchors(anchors).map_err(err)?;
        let base =
            Preset::load(&repo().join(format!("presets/base/{prior}.preset"))).map_err(err)?;
        let report = harness::fit(&base, &anchors, &DropSetup::default()).map_err(err)?;
        for r in &report.residuals {
            c.note(format!(
                "{set} {} {}@{}B: target {:.0} ns, fitted {:.0} ns, residual {:.2}%",
                r.kind,
                r.op,
                r.size,
                r.target,
                r.achieved,
                100.0 * r.relative()
            ));
        }
        let max = report.max_latency_residual();
        c.check(
            max <= 0.06,
            format!("{set}: max fitted residual {:.2}% <= 6%", 100.0 * max),
        );
        if let Some(chk) = report.residual("check", "read") {
            c.check(
                chk.relative() <= 0.10,
                format!(
                    "{set}: held-out {}B read {:.2}% off (<= 10%)",
                    chk.size,
                    100.0 * chk.relative()
                ),
            );
        }
        let p = preset(shipped);
        c.check(
            (p.nic.pcie_write_ns, p.nic.wire_prop_ns)
                == (
                    report.preset.nic.pcie_write_ns,
                    report.preset.nic.wire_prop_ns,
                ),
            format!(
                "{shipped}.preset carries the fitted constants (pcie_write_ns {}, wire_prop_ns {})",
                p.nic.pcie_write_ns, p.nic.wire_prop_ns
            ),
        );
    }
    c.done()
}

fn pcie_dominance() -> Outcome {
    let p = preset("cx4ib");
    let mut c = Checks::new();
    let mut shares = Vec::new();
    for k in 0..=8 {
        let size = 1u64 << k;
        let r = run_sync_mirroring(
            &p,
            &MirrorSpec {
                messages: 20,
                sizes: MessageSizeDistribution::fixed(size),
                seed: 1,
                log: None,
            },
        )
        .map_err(err)?;
        shares.push((size, r.by_size[0].pcie_share()));
    }
    let line: Vec<String> = shares.iter().map(|(s, v)| format!("{s}:{v:.4}")).collect();
    c.note(format!("PCIe share by cachelines: {}", line.join(" ")));
    let one = shares[0].1;
    c.check(
        (0.55..=0.75).contains(&one),
        format!("1-cacheline PCIe share {one:.3} in [0.55, 0.75]"),
    );
    c.check(
        shares.windows(2).all(|w| w[1].1 < w[0].1),
        "share strictly decreases from 1 to 256 cachelines".to_string(),
    );
    c.done()
}

fn connection_scaling() -> Outcome {
    let mut c = Checks::new();
    let spec = RandomReadsSpec::default();
    let mut drops = Vec::new();
    for (name, lo, hi) in [
        ("cx3", 0.70, 0.90),
        ("cx4roce", 0.32, 0.52),
        ("cx5", 0.22, 0.42),
    ] {
        let p = preset(name);
        let base = random_reads_at(&p, &spec, 8).map_err(err)?;
        let high = random_reads_at(&p, &spec, 64).map_err(err)?;
        let d = drop_fraction(base.throughput, high.throughput);
        c.check(
            (lo..=hi).contains(&d),
            format!(
                "{name}: 8 -> 64 connections {:.2} -> {:.2} reqs/us, drop {d:.3} in [{lo}, {hi}]",
                base.throughput, high.throughput
            ),
        );
        drops.push(d);
    }
    c.check(
        drops[0] > drops[1] && drops[1] > drops[2],
        "drops ordered cx3 > cx4 > cx5".to_string(),
    );

    // One outstanding read per connection, so the connection count alone sets the QP state.
    let p = preset("cx5");
    let exhaustion = p.nic.cache_capacity_bytes / 375;
    let start = (exhaustion.next_power_of_two() * 2) as usize;
    let one_deep = RandomReadsSpec { depth: 1, ..spec };
    let mut points = Vec::new();
    for conns in [start, 2 * start, 4 * start] {
        points.push(random_reads_at(&p, &one_deep, conns).map_err(err)?);
    }
    c.note(format!(
        "cx5 QP contexts fill the cache at ~{exhaustion} connections; depth-1 throughput {}",
        points
            .iter()
            .map(|p| format!("{}: {:.2}", p.connections, p.throughput))
            .collect::<Vec<_>>()
            .join(", ")
    ));
    for w in points.windows(2) {
        let delta = (w[1].throughput - w[0].throughput).abs() / w[0].throughput;
        c.check(
            delta < 0.05,
            format!(
                "cx5 plateau {} -> {} connections: delta {:.2}% < 5%",
                w[0].connections,
                w[1].connections,
                100.0 * delta
            ),
        );
    }
    c.done()
}

fn one_two_sided() -> Outcome {
    let p = preset("cx5");
    let mut c = Checks::new();
    let table = |one_sided_reads| TableShape {
        key_count: 100_000,
        bucket_width: 1,
        occupancy: 0.6,
        one_sided_reads,
    };
    let kv = |one| {
        run_kv_lookups(
            &p,
            &KvSpec {
                nodes: 8,
                threads: 4,
                coroutines: 16,
                table: table(one),
                ..Default::default()
            },
        )
    };
    let (a, b) = (kv(true).map_err(err)?, kv(false).map_err(err)?);
    c.check(
        a.wrong_values == 0 && b.wrong_values == 0,
        "lookups returned correct values".to_string(),
    );
    let ratio = a.throughput / b.throughput;
    c.check(
        ratio >= 1.3,
        format!(
            "KvLookups 8 nodes: one-sided {:.2} vs RPC-only {:.2} ops/us/machine, ratio {ratio:.2} >= 1.3",
            a.throughput, b.throughput
        ),
    );
    let tatp = |one| {
        run_tatp(
            &p,
            &TatpSpec {
                nodes: 8,
                threads: 4,
                coroutines: 16,
                table: table(one),
                run: TatpRun::Window {
                    warmup_ns: 50_000,
                    measure_ns: 200_000,
                },
                ..Default::default()
            },
        )
    };
    let (a, b) = (tatp(true).map_err(err)?, tatp(false).map_err(err)?);
    let ratio = a.throughput / b.throughput;
    c.check(
        ratio >= 1.15,
        format!(
            "TatpLite 8 nodes: one-sided {:.2} vs RPC-only {:.2} commits/us/machine, ratio {ratio:.2} >= 1.15",
            a.throughput, b.throughput
        ),
    );
    c.done()
}

fn serializability() -> Outcome {
    let p = preset("cx5");
    let mut c = Checks::new();
    let started = Instant::now();
    let (mut committed, mut aborted, mut failures) = (0u64, 0u64, Vec::new());
    for seed in 1..=20u64 {
        let r = run_tatp(
            &p,
            &TatpSpec {
                nodes: 4,
                threads: 1,
                coroutines: 8,
                table: TableShape {
                    key_count: 64,
                    ..Default::default()
                },
                run: TatpRun::Ops(1000),
                seed,
                ..Default::default()
            },
        )
        .map_err(err)?;
        committed += r.committed;
        aborted += r.aborted;
        if r.records.len() != 1000 {
            failures.push(format!("seed {seed}: {} records", r.records.len()));
        }
        if r.leaked_locks != 0 {
            failures.push(format!("seed {seed}: {} leaked locks", r.leaked_locks));
        }
        if let Err(e) = check_serializable(&r.initial, &r.records, &r.final_state, &tatp_derive) {
            failures.push(format!("seed {seed}: {e}"));
        }
    }
    let secs = started.elapsed().as_secs_f64();
    for f in &failures {
        c.note(f.clone());
    }
    c.check(
        failures.is_empty(),
        format!("20 seeds x 1000 transactions: acyclic, replay matches, no leaked locks, versions match ({committed} committed, {aborted} aborted)"),
    );
    c.check(secs < 60.0, format!("runtime {secs:.1} s < 60 s"));
    c.done()
}

fn stale_hints() -> Outcome {
    const NODES: usize = 4;
    let p = preset("cx5");
    let mut c = Checks::new();
    let dp = DataplaneConfig {
        coroutines_per_thread: 3,
        ..Default::default()
    };
    let mut rt = Runtime::new(NODES, &p, dp, 21).map_err(err)?;
    let shape = TableShape {
        key_count: 256,
        ..Default::default()
    };
    let cfg = build_table(&mut rt, &shape).map_err(err)?;
    let (layout, len) = (cfg.layout(), cfg.value_bytes);

    // Every 8th key is moved: deleted, its slot handed to a fresh key from the
    // same bucket, then re-inserted wherever the table puts it.
    let moved: Vec<(u64, u64)> =
        rt.world_mut()
            .with_handler::<HashTable, _>(0, TABLE_OBJECT, |t, _| {
                let mut next = shape.key_count + 1;
                (1..=shape.key_count)
                    .step_by(8)
                    .map(|k| {
                        while !(t.bucket_of(next) == t.bucket_of(k) && t.home(next) == t.home(k)) {
                            next += 1;
                        }
                        next += 1;
                        (k, next - 1)
                    })
                    .collect()
            });
    let mut all_keys: Vec<u64> = (1..=shape.key_count).collect();
    all_keys.extend(moved.iter().map(|&(_, fresh)| fresh));

    let errors: Rc<RefCell<Vec<String>>> = Rc::default();
    let lookups = |rt: &mut Runtime, keys: Vec<u64>| -> Result<(), Vec<String>> {
        for node in 0..NODES {
            let (keys, errors) = (keys.clone(), errors.clone());
            rt.spawn(node, 0, move |ctx| async move {
                for key in keys {
                    let item = ctx.read_set_item(TABLE_OBJECT, key).await.expect("lookup");
                    match layout.extract(key, &item.buffer) {
                        Some(v) if item.found && v.value == kv_value(key, len) => {}
                        _ => errors
                            .borrow_mut()
                            .push(format!("node {} key {key}: wrong or missing", ctx.node())),
                    }
                }
            })
            .map_err(err)?;
        }
        Ok(())
    };

    lookups(&mut rt, (1..=shape.key_count).collect())?;
    rt.run_until(stormsim::sim::SimTime(20_000_000));
    let moves = moved.clone();
    rt.spawn(0, 0, move |ctx| async move {
        let mut engine = TxEngine::new(ctx.clone(), layout);
        for (k, fresh) in moves {
            for rec in [
                engine.delete(TABLE_OBJECT, k).await,
                engine
                    .insert(TABLE_OBJECT, fresh, kv_value(fresh, len))
                    .await,
                engine.insert(TABLE_OBJECT, k, kv_value(k, len)).await,
            ] {
                assert_eq!(rec.expect("move").status, TxStatus::Committed);
            }
        }
    })
    .map_err(err)?;
    rt.run_until(stormsim::sim::SimTime(40_000_000));

    // Poison the remaining hints: adjacent keys swap cached locations.
    let mut swapped = 0;
    {
        let mut w = rt.world_mut();
        for node in 0..NODES {
            w.with_handler::<HashTable, _>(node, TABLE_OBJECT, |t, _| {
                for k in (2..shape.key_count).step_by(2) {
                    if let (Some(a), Some(b)) = (t.cache.get(k), t.cache.get(k + 1)) {
                        t.cache.insert(k, b);
                        t.cache.insert(k + 1, a);
                        swapped += 2;
                    }
                }
            });
        }
    }
    let before = rt.world().paths();
    lookups(&mut rt, all_keys.clone())?;
    rt.run_until(stormsim::sim::SimTime(60_000_000));
    if !rt.all_done() {
        return Err(vec!["FAIL lookups did not finish".into()]);
    }

    let paths = rt.world().paths();
    let last_read_then_rpc = paths.read_then_rpc - before.read_then_rpc;
    c.note(format!(
        "{} moved keys, {swapped} poisoned hints; paths: read-only {}, read-then-RPC {}, RPC-only {}; reads {}, read RPCs {}",
        moved.len(),
        paths.read_only,
        paths.read_then_rpc,
        paths.rpc_only,
        paths.reads_issued,
        paths.read_rpcs_issued
    ));
    c.check(
        last_read_then_rpc as usize >= swapped / 2,
        format!("stale hints forced {last_read_then_rpc} read-then-RPC lookups"),
    );
    c.check(
        paths.reads_issued == paths.read_only + paths.read_then_rpc,
        "reads == ReadOnly + ReadThenRpc".to_string(),
    );
    c.check(
        paths.read_rpcs_issued == paths.rpc_only + paths.read_then_rpc,
        "read RPCs == RpcOnly + ReadThenRpc".to_string(),
    );
    let errs = errors.borrow();
    c.check(
        errs.is_empty(),
        format!(
            "{} lookups returned the right value ({} wrong){}",
            (shape.key_count as usize + all_keys.len()) * NODES,
            errs.len(),
            errs.first()
                .map(|e| format!(", first: {e}"))
                .unwrap_or_default()
        ),
    );
    c.done()
}

struct NicRegistrar<'a> {
    nic: &'a mut Nic,
    page: u64,
}

impl Registrar for NicRegistrar<'_> {
    fn register(&mut self, length: u64) -> Result<u32, KvError> {
        let len = length.div_ceil(self.page) * self.page;
        Ok(self
            .nic
            .register_region(len, self.page, false)
            .map_err(VerbsError::from)?
            .region_id)
    }
}

fn allocator_bound() -> Outcome {
    let mut c = Checks::new();
    let chunk = 16u64 << 20;
    let page = 4096;
    let mut rng = SeededRng::new(8);
    let sizes: Vec<u64> = (0..10_000).map(|_| 64 + rng.below(1024)).collect();
    let total: u64 = sizes.iter().sum();
    let mut pooled_nic = Nic::new(Preset::default().nic);
    let mut naive_nic = Nic::new(Preset::default().nic);
    let mut pooled = ContiguousAllocator::new(chunk);
    let mut naive = NaiveAllocator::default();
    for &s in &sizes {
        pooled
            .alloc(
                s,
                &mut NicRegistrar {
                    nic: &mut pooled_nic,
                    page,
                },
            )
            .map_err(err)?;
        naive
            .alloc(
                s,
                &mut NicRegistrar {
                    nic: &mut naive_nic,
                    page,
                },
            )
            .map_err(err)?;
    }
    let (a, b) = (pooled_nic.account(), naive_nic.account());
    c.check(
        total < chunk && pooled.regions() == 1 && a.mpt_entries == 1,
        format!(
            "10000 allocations, {total} B < {chunk} B chunk: {} region, {} MPT entry",
            pooled.regions(),
            a.mpt_entries
        ),
    );
    let reduction = b.mpt_entries as f64 / a.mpt_entries as f64;
    c.check(
        reduction >= 1000.0,
        format!(
            "per-allocation registration needs {} MPT entries: {reduction:.0}x reduction",
            b.mpt_entries
        ),
    );
    let mut phys_ok = true;
    for len in [4096u64, 1 << 20, 1 << 30, 64 << 30, (1 << 40) + 4096] {
        let m = region_meta(0, 0, len, page, true).map_err(err)?;
        phys_ok &= m.mtt_entry_count == 1 && m.mpt_entry_count == 1;
    }
    c.check(
        phys_ok,
        "physical segments register 1 MTT + 1 MPT entry for 4 KiB to 1 TiB".to_string(),
    );
    c.done()
}

#[derive(Clone, Default)]
struct SharedBuf(Rc<RefCell<Vec<u8>>>);

impl Write for SharedBuf {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.borrow_mut().extend_from_slice(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

fn determinism() -> Outcome {
    let mut c = Checks::new();
    let run = |cfg: &ExperimentConfig| -> Result<(String, Vec<u8>), Vec<String>> {
        let buf = SharedBuf::default();
        let log = EventLog::new(Box::new(buf.clone()));
        let rows = harness::run_experiment(cfg, Some(log)).map_err(err)?;
        let bytes = buf.0.borrow().clone();
        Ok((harness::to_csv_string(&rows), bytes))
    };
    for name in ["lookup", "tatp", "mirroring", "random_reads", "emulation"] {
        let mut cfg =
            ExperimentConfig::load(&repo().join(format!("configs/{name}.ini"))).map_err(err)?;
        if name == "emulation" {
            cfg.workload.measure_ns = Some(20_000);
            cfg.workload.warmup_ns = 10_000;
        }
        let (a, b) = (run(&cfg)?, run(&cfg)?);
        cfg.seed += 1;
        let other = run(&cfg)?;
        c.check(
            a == b && !a.1.is_empty() && other.1 != a.1,
            format!(
                "{name}: identical CSV and {} KiB event log across reruns; another seed changes the log",
                a.1.len() / 1024
            ),
        );
    }
    c.done()
}

fn emulation_trend() -> Outcome {
    let p = preset("cx4ib");
    let mut c = Checks::new();
    let tput = |threads, v| {
        emulate_cluster(
            &p,
            &EmulationSpec {
                threads,
                virtual_nodes: v,
                ..Default::default()
            },
        )
        .map(|r| r.throughput)
    };
    let (a, b) = (tput(20, 32).map_err(err)?, tput(20, 96).map_err(err)?);
    let r = a / b;
    c.check(
        (1.3..=1.9).contains(&r),
        format!("20 threads, 32 -> 96 nodes: {a:.2} -> {b:.2} ops/us/machine, drop {r:.2}x in [1.3, 1.9]"),
    );
    let (a, b) = (tput(10, 32).map_err(err)?, tput(10, 128).map_err(err)?);
    let r = a / b;
    c.check(
        r <= 1.1,
        format!(
            "10 threads, 32 -> 128 nodes: {a:.2} -> {b:.2} ops/us/machine, drop {r:.2}x <= 1.1"
        ),
    );
    c.done()
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 10] = [
        ("closed-form latency oracle", closed_form_oracle),
        ("calibration quality", calibration),
        ("PCIe dominance", pcie_dominance),
        ("connection scaling", connection_scaling),
        ("one-sided plus RPC benefit", one_two_sided),
        ("serializability oracle", serializability),
        ("lookup path accounting under stale hints", stale_hints),
        ("allocator and MPT bound", allocator_bound),
        ("determinism", determinism),
        ("emulation trend", emulation_trend),
    ];
    let started = Instant::now();
    let results: Vec<(Outcome, f64)> = std::thread::scope(|s| {
        let handles: Vec<_> = criteria
            .iter()
            .map(|&(_, f)| {
                s.spawn(move || {
                    let t = Instant::now();
                    (f(), t.elapsed().as_secs_f64())
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| (Err(vec!["FAIL panicked".into()]), 0.0))
            })
            .collect()
    });
    let mut failed = 0;
    for (i, ((name, _), (outcome, secs))) in criteria.iter().zip(&results).enumerate() {
        let (tag, lines) = match outcome {
            Ok(l) => ("PASS", l),
            Err(l) => {
                failed += 1;
                ("FAIL", l)
            }
        };
        println!("criterion {:>2} {tag}: {name} ({secs:.1} s)", i + 1);
        for l in lines {
            println!("    {l}");
        }
    }
    println!(
        "{} of {} criteria passed in {:.1} s",
        criteria.len() - failed,
        criteria.len(),
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
