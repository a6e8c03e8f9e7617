use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use proptest::prelude::*;
use stormsim::dataplane::{DataplaneConfig, Runtime};
use stormsim::kvstore::{ContiguousAllocator, KvError, Registrar};
use stormsim::nic::{
    critical_path_lookups, one_sided_latency, unloaded_latency, CacheOutcome, NicCache, NicConfig,
    OneSidedOp, Preset, StateKey, StateKind,
};
use stormsim::sim::{Engine, EventKind, SimTime};
use stormsim::txengine::{TxEngine, TxStatus};
use stormsim::workloads::{
    build_table, kv_value, quota, run_kv_lookups, table_snapshot, KvSpec, TableShape, TABLE_OBJECT,
};

struct Counting(u32);

impl Registrar for Counting {
    fn register(&mut self, _len: u64) -> Result<u32, KvError> {
        self.0 += 1;
        Ok(self.0 - 1)
    }
}

#[derive(Debug, Clone)]
struct Tick;

impl EventKind for Tick {
    fn kind(&self) -> &'static str {
        "tick"
    }
}

fn state_key() -> impl Strategy<Value = StateKey> {
    (0u8..5, 0u64..64, 1u64..300).prop_map(|(k, id, size)| StateKey {
        kind: match k {
            0 => StateKind::Qp,
            1 => StateKind::Mtt,
            2 => StateKind::Mpt,
            3 => StateKind::RecvWqe,
            _ => StateKind::SendWqe,
        },
        id,
        size_bytes: size,
    })
}

#[derive(Debug, Clone)]
enum KvOp {
    Read(u64),
    Update(u64, u8),
    Insert(u64, u8),
    Delete(u64),
}

fn kv_op() -> impl Strategy<Value = KvOp> {
    let key = 1u64..=16;
    prop_oneof![
        key.clone().prop_map(KvOp::Read),
        (key.clone(), any::<u8>()).prop_map(|(k, v)| KvOp::Update(k, v)),
        (key.clone(), any::<u8>()).prop_map(|(k, v)| KvOp::Insert(k, v)),
        key.prop_map(KvOp::Delete),
    ]
}

fn padded(v: &[u8], len: u64) -> Vec<u8> {
    let mut out = v.to_vec();
    out.resize(len as usize, 0);
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cache_occupancy_stays_within_capacity(
        capacity in 300u64..4096,
        ops in prop::collection::vec((state_key(), any::<bool>()), 1..400),
    ) {
        let mut cache = NicCache::new(capacity);
        for (key, remove) in ops {
            if remove {
                cache.remove(&key);
            } else {
                cache.access(key, SimTime(0)).unwrap();
                prop_assert!(cache.contains(&key));
            }
            prop_assert!(cache.occupancy() <= cache.capacity());
            prop_assert_eq!(cache.recount(), cache.occupancy());
        }
        prop_assert!(cache.hits() + cache.misses() > 0 || cache.is_empty());
    }

    #[test]
    fn allocations_never_overlap(
        ops in prop::collection::vec((1u64..5000, any::<bool>()), 1..300),
    ) {
        let mut a = ContiguousAllocator::new(16 << 10);
        let mut reg = Counting(0);
        let mut live: Vec<(u32, u64, u64)> = Vec::new();
        for (size, free) in ops {
            if free && !live.is_empty() {
                let (region, offset, len) = live.swap_remove(size as usize % live.len());
                a.free(stormsim::kvstore::SlotAddr { region, offset }, len);
                continue;
            }
            let at = a.alloc(size, &mut reg).unwrap();
            prop_assert!(at.offset + size <= 16 << 10);
            for &(r, o, l) in &live {
                prop_assert!(r != at.region || at.offset + size <= o || o + l <= at.offset);
            }
            live.push((at.region, at.offset, size));
        }
        prop_assert_eq!(a.allocated_bytes(), live.iter().map(|l| l.2).sum::<u64>());
    }

    #[test]
    fn quota_sums_to_n(weights in prop::collection::vec(0.01f64..10.0, 1..8), n in 0usize..100_000) {
        let q = quota(&weights, n);
        prop_assert_eq!(q.iter().sum::<usize>(), n);
        let total: f64 = weights.iter().sum();
        for (c, w) in q.iter().zip(&weights) {
            prop_assert!((*c as f64 - w / total * n as f64).abs() < 1.0);
        }
    }

    #[test]
    fn events_fire_in_time_order(delays in prop::collection::vec(0u64..1000, 1..200)) {
        let mut e: Engine<Tick> = Engine::new();
        for (i, d) in delays.iter().enumerate() {
            e.schedule(*d, i as u32, Tick);
        }
        let mut last = (SimTime(0), 0u64);
        let mut n = 0;
        while let Some(ev) = e.pop_until(SimTime(u64::MAX)) {
            prop_assert!((ev.fire_at, ev.seq) >= last);
            last = (ev.fire_at, ev.seq);
            n += 1;
        }
        prop_assert_eq!(n, delays.len());
    }

    #[test]
    fn latency_grows_with_payload_and_misses(
        op in prop_oneof![Just(OneSidedOp::Read), Just(OneSidedOp::Write), Just(OneSidedOp::WriteImm)],
        a in 1u64..8192,
        b in 1u64..8192,
        miss_at in 0usize..8,
    ) {
        let cfg = NicConfig::default();
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(unloaded_latency(&cfg, op, lo).total() <= unloaded_latency(&cfg, op, hi).total());
        let n = critical_path_lookups(op, 1, 1) as usize;
        let mut outcomes = vec![CacheOutcome::Hit; n];
        let hit = one_sided_latency(&cfg, op, lo, &outcomes).total();
        outcomes[miss_at % n] = CacheOutcome::Miss;
        prop_assert!(hit < one_sided_latency(&cfg, op, lo, &outcomes).total());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn kv_matches_reference_map(ops in prop::collection::vec(kv_op(), 1..40)) {
        let cfg = DataplaneConfig { coroutines_per_thread: 1, ..Default::default() };
        let mut rt = Runtime::new(2, &Preset::default(), cfg, 5).unwrap();
        let shape = TableShape { key_count: 8, ..Default::default() };
        let layout = build_table(&mut rt, &shape).unwrap().layout();
        let vb = layout.value_bytes;
        let mut model: BTreeMap<u64, Vec<u8>> = (1..=8).map(|k| (k, kv_value(k, vb))).collect();
        let mismatches = Rc::new(RefCell::new(Vec::new()));
        let expected: Vec<(KvOp, bool, Option<Vec<u8>>)> = ops
            .iter()
            .map(|op| match *op {
                KvOp::Read(k) => (op.clone(), model.contains_key(&k), model.get(&k).cloned()),
                KvOp::Update(k, v) => {
                    let ok = model.contains_key(&k);
                    if ok {
                        model.insert(k, padded(&[v], vb));
                    }
                    (op.clone(), ok, None)
                }
                KvOp::Insert(k, v) => {
                    let ok = !model.contains_key(&k);
                    if ok {
                        model.insert(k, padded(&[v], vb));
                    }
                    (op.clone(), ok, None)
                }
                KvOp::Delete(k) => (op.clone(), model.remove(&k).is_some(), None),
            })
            .collect();
        let bad = mismatches.clone();
        rt.spawn(0, 0, move |ctx| async move {
            let mut e = TxEngine::new(ctx, layout);
            for (op, ok, value) in expected {
                let (committed, got) = match op {
                    KvOp::Read(k) => {
                        let mut tx = e.start_tx().unwrap();
                        let got = e.read(&mut tx, TABLE_OBJECT, k).await.unwrap();
                        if got.is_some() {
                            e.commit(&mut tx).await.unwrap();
                        }
                        (tx.status == TxStatus::Committed, got)
                    }
                    KvOp::Update(k, v) => {
                        let mut tx = e.start_tx().unwrap();
                        if e.write(&mut tx, TABLE_OBJECT, k, vec![v]).await.unwrap() {
                            e.commit(&mut tx).await.unwrap();
                        }
                        (tx.status == TxStatus::Committed, None)
                    }
                    KvOp::Insert(k, v) => {
                        let r = e.insert(TABLE_OBJECT, k, vec![v]).await.unwrap();
                        (r.status == TxStatus::Committed, None)
                    }
                    KvOp::Delete(k) => {
                        let r = e.delete(TABLE_OBJECT, k).await.unwrap();
                        (r.status == TxStatus::Committed, None)
                    }
                };
                if committed != ok || got != value {
                    bad.borrow_mut().push(format!("{op:?}: committed {committed}, read {got:?}"));
                }
            }
        })
        .unwrap();
        rt.run_to_completion();
        prop_assert!(rt.all_done());
        prop_assert!(mismatches.borrow().is_empty(), "{:?}", mismatches.borrow());
        let (store, locked) = table_snapshot(&rt).unwrap();
        prop_assert_eq!(locked, 0);
        let stored: BTreeMap<u64, Vec<u8>> = store.into_iter().map(|(k, (_, v))| (k, v)).collect();
        prop_assert_eq!(stored, model);
    }

    #[test]
    fn lookup_paths_account_for_every_read(
        nodes in 2usize..5,
        coroutines in 1usize..8,
        keys in 64u64..2048,
        one_sided in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let spec = KvSpec {
            nodes,
            coroutines,
            table: TableShape { key_count: keys, one_sided_reads: one_sided, ..Default::default() },
            warmup_ns: 5_000,
            measure_ns: 20_000,
            seed,
            ..Default::default()
        };
        let r = run_kv_lookups(&Preset::default(), &spec).unwrap();
        let p = r.paths;
        prop_assert_eq!(r.wrong_values, 0);
        // The window closes with at most one lookup in flight per coroutine.
        let in_flight = (nodes * coroutines) as u64;
        let read_gap = p.reads_issued - (p.read_only + p.read_then_rpc);
        let rpc_gap = p.read_rpcs_issued - (p.rpc_only + p.read_then_rpc);
        prop_assert!(read_gap <= in_flight && rpc_gap <= in_flight, "{:?}", p);
        if !one_sided {
            prop_assert_eq!(p.reads_issued, 0);
        }
    }

    #[test]
    fn drained_lookup_paths_balance_exactly(
        coroutines in 1usize..6,
        wanted in prop::collection::vec(1u64..300, 1..60),
        one_sided in any::<bool>(),
    ) {
        let cfg = DataplaneConfig { coroutines_per_thread: coroutines, ..Default::default() };
        let mut rt = Runtime::new(3, &Preset::default(), cfg, 9).unwrap();
        let shape = TableShape { key_count: 200, one_sided_reads: one_sided, ..Default::default() };
        build_table(&mut rt, &shape).unwrap();
        let found = Rc::new(RefCell::new(0u64));
        for c in 0..coroutines {
            let keys: Vec<u64> = wanted.iter().skip(c).step_by(coroutines).copied().collect();
            let found = found.clone();
            rt.spawn(c % 3, 0, move |ctx| async move {
                for k in keys {
                    let item = ctx.read_set_item(TABLE_OBJECT, k).await.unwrap();
                    assert_eq!(item.found, k <= 200, "lookup of {k}");
                    *found.borrow_mut() += u64::from(item.found);
                }
            })
            .unwrap();
        }
        rt.run_to_completion();
        prop_assert!(rt.all_done());
        let p = rt.world().paths();
        prop_assert_eq!(p.reads_issued, p.read_only + p.read_then_rpc);
        prop_assert_eq!(p.read_rpcs_issued, p.rpc_only + p.read_then_rpc);
        prop_assert_eq!(*found.borrow(), wanted.iter().filter(|&&k| k <= 200).count() as u64);
    }
}
