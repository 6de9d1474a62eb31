// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;

use proptest::prelude::*;
use vblk_core::store::{
    FaultPoint, LatencyModel, ObjectAccess, ObjectId, ObjectStore, SnapshotId, StoreConfig, StoreError, StoreOp,
    Transaction,
};

const OBJ: u64 = 64 << 10;

fn config() -> StoreConfig {
    StoreConfig {
        image_id: 1,
        physical_object_bytes: OBJ,
        sector_bytes: 4096,
        latency: LatencyModel::default(),
    }
}

#[derive(Clone, Default, PartialEq, Debug)]
struct Shadow {
    bytes: Vec<u8>,
    kv: BTreeMap<u64, Vec<u8>>,
}

impl Shadow {
    fn new() -> Self {
        Self {
            bytes: vec![0; OBJ as usize],
            kv: BTreeMap::new(),
        }
    }

    fn apply(&mut self, op: &StoreOp) {
        match op {
            StoreOp::WriteExtent { offset, bytes } => {
                self.bytes[*offset as usize..*offset as usize + bytes.len()].copy_from_slice(bytes)
            }
            StoreOp::KvSetRange { pairs } => {
                for (k, v) in pairs {
                    self.kv.insert(*k, v.clone());
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Step {
    Tx {
        object: u64,
        ops: Vec<StoreOp>,
        crash_at: Option<usize>,
    },
    Snapshot,
}

fn op() -> impl Strategy<Value = StoreOp> {
    prop_oneof![
        (0..OBJ - 1, 1usize..6000, any::<u8>()).prop_map(|(off, len, b)| {
            let len = len.min((OBJ - off) as usize);
            StoreOp::WriteExtent {
                offset: off,
                bytes: vec![b; len],
            }
        }),
        prop::collection::vec((0u64..16, any::<u8>()), 1..4).prop_map(|pairs| StoreOp::KvSetRange {
            pairs: pairs.into_iter().map(|(k, b)| (k * 4096, vec![b; 16])).collect(),
        }),
    ]
}

fn step() -> impl Strategy<Value = Step> {
    prop_oneof![
        6 => (0u64..3, prop::collection::vec(op(), 1..4), prop::option::weighted(0.3, 0usize..5)).prop_map(
            |(object, ops, crash)| {
                let crash_at = crash.map(|c| c.min(ops.len()));
                Step::Tx { object, ops, crash_at }
            }
        ),
        1 => Just(Step::Snapshot),
    ]
}

fn check(store: &ObjectStore, shadows: &[Vec<Shadow>]) -> Result<(), TestCaseError> {
    for (object, versions) in shadows.iter().enumerate() {
        let oid = ObjectId {
            image_id: 1,
            index: object as u64,
        };
        // versions[g] is the state visible at generation g; the last entry is head.
        for (g, shadow) in versions.iter().enumerate() {
            let at = if g == versions.len() - 1 {
                SnapshotId::HEAD
            } else {
                SnapshotId(g as u64 + 1)
            };
            prop_assert_eq!(&store.read_extent(oid, 0, OBJ, at).unwrap(), &shadow.bytes);
            let kv = store.kv_get_range(oid, 0, u64::MAX, at).unwrap();
            let expect: Vec<(u64, Vec<u8>)> = shadow.kv.clone().into_iter().collect();
            prop_assert_eq!(kv, expect);
        }
    }
    Ok(())
}

/// Per object: one shadow per snapshot generation plus the head.
fn fresh() -> Vec<Vec<Shadow>> {
    vec![vec![Shadow::new()]; 3]
}

fn run(store: &ObjectStore, steps: &[Step], shadows: &mut [Vec<Shadow>]) -> Result<(), TestCaseError> {
    for s in steps {
        match s {
            Step::Snapshot => {
                store.create_snapshot().unwrap();
                for v in shadows.iter_mut() {
                    let head = v.last().unwrap().clone();
                    v.push(head);
                }
            }
            Step::Tx { object, ops, crash_at } => {
                if let Some(k) = crash_at {
                    store.inject_fault(FaultPoint {
                        tx_index: store.next_tx_index(),
                        op_index: *k,
                    });
                }
                let res = store.submit(Transaction {
                    target: ObjectId {
                        image_id: 1,
                        index: *object,
                    },
                    ops: ops.clone(),
                });
                match (res, crash_at) {
                    (Ok(_), None) => {
                        let head = shadows[*object as usize].last_mut().unwrap();
                        ops.iter().for_each(|op| head.apply(op));
                    }
                    (Err(StoreError::Crashed { .. }), Some(_)) => store.recover().unwrap(),
                    (other, _) => prop_assert!(false, "unexpected submit outcome {other:?}"),
                }
            }
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn memory_store_matches_shadow(steps in prop::collection::vec(step(), 1..25)) {
        let store = ObjectStore::in_memory(config());
        let mut shadows = fresh();
        run(&store, &steps, &mut shadows)?;
        check(&store, &shadows)?;
    }

    #[test]
    fn file_store_matches_shadow_after_reopen(steps in prop::collection::vec(step(), 1..25), flush_every in 1usize..8) {
        let tmp = tempfile::tempdir().unwrap();
        let mut shadows = fresh();
        {
            let store = ObjectStore::create_dir(tmp.path(), config(), Default::default()).unwrap();
            let mut chunks = steps.chunks(flush_every).peekable();
            while let Some(chunk) = chunks.next() {
                run(&store, chunk, &mut shadows)?;
                // The last chunk stays in the journal only.
                if chunks.peek().is_some() {
                    store.flush().unwrap();
                }
            }
        }
        let store = ObjectStore::open_dir(tmp.path(), LatencyModel::default()).unwrap();
        check(&store, &shadows)?;
    }
}

#[test]
fn concurrent_snapshots_and_writes_stay_consistent() {
    let store = ObjectStore::in_memory(config());
    let oid = ObjectId { image_id: 1, index: 0 };
    // Each transaction sets two distant ranges to the same byte; every
    // version must show them equal.
    std::thread::scope(|s| {
        for t in 0..4u8 {
            let store = &store;
            s.spawn(move || {
                for i in 0..50u8 {
                    let b = t.wrapping_mul(50).wrapping_add(i);
                    store
                        .submit(Transaction {
                            target: oid,
                            ops: vec![
                                StoreOp::WriteExtent {
                                    offset: 0,
                                    bytes: vec![b; 100],
                                },
                                StoreOp::WriteExtent {
                                    offset: OBJ - 100,
                                    bytes: vec![b; 100],
                                },
                            ],
                        })
                        .unwrap();
                }
            });
        }
        s.spawn(|| {
            for _ in 0..20 {
                store.create_snapshot().unwrap();
            }
        });
    });
    for g in 0..=store.latest_snapshot().generation() {
        let a = store.read_extent(oid, 0, 100, SnapshotId(g)).unwrap();
        let b = store.read_extent(oid, OBJ - 100, 100, SnapshotId(g)).unwrap();
        assert_eq!(a, b, "generation {g}");
    }
}
