use std::collections::BTreeMap;

use geoloop_store::{CrashPoint, Mutation, Store, StoreError, StoreOptions};
use proptest::prelude::*;
use serde_json::{json, Value};

#[derive(Debug, Clone)]
enum Op {
    Put(u8, i64),
    Delete(u8),
    Append(u8),
}

#[derive(Debug, Clone)]
enum Step {
    Txn(Vec<Op>),
    Crash(u8, Vec<Op>),
    Checkpoint,
    Reopen,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0u8..8, any::<i64>()).prop_map(|(k, v)| Op::Put(k, v)),
        (0u8..8).prop_map(Op::Delete),
        (0u8..3).prop_map(Op::Append),
    ]
}

fn step() -> impl Strategy<Value = Step> {
    prop_oneof![
        6 => prop::collection::vec(op(), 1..5).prop_map(Step::Txn),
        1 => (0u8..3, prop::collection::vec(op(), 1..5)).prop_map(|(c, ops)| Step::Crash(c, ops)),
        1 => Just(Step::Checkpoint),
        1 => Just(Step::Reopen),
    ]
}

fn mutations(ops: &[Op]) -> Vec<Mutation> {
    ops.iter()
        .map(|o| match o {
            Op::Put(k, v) => Mutation::put("t", k.to_string(), json!(v)),
            Op::Delete(k) => Mutation::delete("t", k.to_string()),
            Op::Append(t) => Mutation::append(&format!("topic{t}"), json!(t)),
        })
        .collect()
}

#[derive(Default)]
struct Model {
    rows: BTreeMap<String, i64>,
    topics: BTreeMap<String, usize>,
    seq: u64,
}

impl Model {
    fn apply(&mut self, ops: &[Op]) {
        for o in ops {
            match o {
                Op::Put(k, v) => {
                    self.rows.insert(k.to_string(), *v);
                }
                Op::Delete(k) => {
                    self.rows.remove(&k.to_string());
                }
                Op::Append(t) => *self.topics.entry(format!("topic{t}")).or_default() += 1,
            }
        }
        self.seq += 1;
    }

    fn matches(&self, s: &Store) -> bool {
        let rows: BTreeMap<String, i64> = s.read(|v| {
            v.scan("t")
                .map(|(k, r)| (k.clone(), r.value.as_i64().unwrap()))
                .collect()
        });
        let topics: BTreeMap<String, usize> = s
            .topics()
            .into_iter()
            .map(|t| {
                let n = s.read_topic(&t, 0).len();
                (t, n)
            })
            .filter(|(_, n)| *n > 0)
            .collect();
        rows == self.rows && topics == self.topics && s.commit_seq() == self.seq
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Whatever sequence of commits, crashes, checkpoints and restarts
    /// happens, the recovered store equals the committed prefix.
    #[test]
    fn recovery_equals_committed_prefix(steps in prop::collection::vec(step(), 1..40)) {
        let dir = tempfile::tempdir().unwrap();
        let opts = StoreOptions { sync: false, checkpoint_every: 5 };
        let mut store = Store::open_with(dir.path(), opts.clone()).unwrap();
        let mut model = Model::default();
        for s in steps {
            match s {
                Step::Txn(ops) => {
                    store.transact(mutations(&ops)).unwrap();
                    model.apply(&ops);
                }
                Step::Crash(c, ops) => {
                    let point = [CrashPoint::BeforeWal, CrashPoint::TornWal, CrashPoint::AfterWal][c as usize];
                    store.inject_crash(point);
                    let r = store.transact(mutations(&ops));
                    prop_assert!(matches!(r, Err(StoreError::InjectedCrash)));
                    if point == CrashPoint::AfterWal {
                        model.apply(&ops);
                    }
                    drop(store);
                    store = Store::open_with(dir.path(), opts.clone()).unwrap();
                }
                Step::Checkpoint => store.checkpoint().unwrap(),
                Step::Reopen => {
                    drop(store);
                    store = Store::open_with(dir.path(), opts.clone()).unwrap();
                }
            }
            prop_assert!(model.matches(&store));
        }
        let reopened_once = {
            drop(store);
            Store::open_with(dir.path(), opts.clone()).unwrap().dump()
        };
        let reopened_twice = Store::open_with(dir.path(), opts).unwrap().dump();
        prop_assert_eq!(reopened_once, reopened_twice);
    }
}

#[test]
fn concurrent_writers_get_distinct_sequence_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let store = std::sync::Arc::new(
        Store::open_with(dir.path(), StoreOptions { sync: false, checkpoint_every: 100 }).unwrap(),
    );
    let handles: Vec<_> = (0..8)
        .map(|w| {
            let s = store.clone();
            std::thread::spawn(move || {
                (0..125)
                    .map(|i| s.transact(vec![Mutation::put("t", format!("{w}-{i}"), Value::Null)]).unwrap())
                    .collect::<Vec<u64>>()
            })
        })
        .collect();
    let mut seqs: Vec<u64> = handles.into_iter().flat_map(|h| h.join().unwrap()).collect();
    seqs.sort_unstable();
    assert_eq!(seqs, (1..=1000).collect::<Vec<_>>());
}
