//! Embedded storage for a single node.
//!
//! A data directory holds three areas:
//!
//! * `records/`: JSON records in named tables. Every transaction is appended
//!   to `records/wal.log` and fsynced before it becomes visible; checkpoints
//!   fold the log into `records/snapshot.json`.
//! * `blobs/`: opaque files written to `blobs/.tmp` and renamed into place.
//! * `log/`: one append-only segment per pub/sub topic.
//!
//! Writers are serialized; readers see the last committed transaction.

mod error;
mod snapshot;
mod wal;

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use error::{Result, StoreError};
pub use snapshot::FORMAT_VERSION;

/// Zero-padded key for numeric ids, so key order equals numeric order.
pub fn id_key(id: u64) -> String {
    format!("{id:020}")
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RecordRef {
    pub table: String,
    pub key: String,
}

impl RecordRef {
    pub fn new(table: &str, key: impl Into<String>) -> Self {
        Self {
            table: table.to_string(),
            key: key.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub version: u64,
    pub value: Value,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub refs: Vec<RecordRef>,
}

/// Precondition on the current state of a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expect {
    Any,
    Absent,
    Version(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Mutation {
    Put {
        table: String,
        key: String,
        value: Value,
        expect: Expect,
        /// Records that must exist once the transaction commits.
        refs: Vec<RecordRef>,
    },
    Delete {
        table: String,
        key: String,
        expect: Expect,
    },
    Append {
        topic: String,
        event: Value,
    },
}

impl Mutation {
    pub fn put(table: &str, key: impl Into<String>, value: Value) -> Self {
        Mutation::Put {
            table: table.to_string(),
            key: key.into(),
            value,
            expect: Expect::Any,
            refs: Vec::new(),
        }
    }

    pub fn create(table: &str, key: impl Into<String>, value: Value) -> Self {
        Mutation::Put {
            table: table.to_string(),
            key: key.into(),
            value,
            expect: Expect::Absent,
            refs: Vec::new(),
        }
    }

    pub fn delete(table: &str, key: impl Into<String>) -> Self {
        Mutation::Delete {
            table: table.to_string(),
            key: key.into(),
            expect: Expect::Any,
        }
    }

    pub fn append(topic: &str, event: Value) -> Self {
        Mutation::Append {
            topic: topic.to_string(),
            event,
        }
    }

    pub fn expect(mut self, e: Expect) -> Self {
        match &mut self {
            Mutation::Put { expect, .. } | Mutation::Delete { expect, .. } => *expect = e,
            Mutation::Append { .. } => {}
        }
        self
    }

    pub fn with_ref(mut self, table: &str, key: impl Into<String>) -> Self {
        if let Mutation::Put { refs, .. } = &mut self {
            refs.push(RecordRef::new(table, key));
        }
        self
    }
}

/// A committed event of a topic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicEvent {
    pub topic: String,
    pub seq: u64,
    pub event: Value,
}

/// Mutations as written to the WAL: versions and topic sequence numbers
/// already resolved, so replay is deterministic.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Applied {
    Put { table: String, key: String, record: Record },
    Delete { table: String, key: String },
    Append { topic: String, seq: u64, event: Value },
}

#[derive(Debug, Serialize, Deserialize)]
struct Txn {
    ops: Vec<Applied>,
}

pub type Tables = BTreeMap<String, BTreeMap<String, Record>>;

/// Read access to committed state.
pub struct View<'a> {
    tables: &'a Tables,
    topics: &'a BTreeMap<String, Vec<(u64, Value)>>,
    seq: u64,
}

impl View<'_> {
    pub fn get(&self, table: &str, key: &str) -> Option<&Record> {
        self.tables.get(table).and_then(|t| t.get(key))
    }

    pub fn scan(&self, table: &str) -> impl Iterator<Item = (&String, &Record)> {
        self.tables.get(table).into_iter().flat_map(|t| t.iter())
    }

    /// Records whose key starts with `prefix`, in key order.
    pub fn scan_prefix<'b>(&'b self, table: &str, prefix: &'b str) -> impl Iterator<Item = (&'b String, &'b Record)> {
        self.tables
            .get(table)
            .into_iter()
            .flat_map(move |t| t.range(prefix.to_string()..).take_while(move |(k, _)| k.starts_with(prefix)))
    }

    pub fn len(&self, table: &str) -> usize {
        self.tables.get(table).map_or(0, |t| t.len())
    }

    pub fn last_key(&self, table: &str) -> Option<&String> {
        self.tables.get(table).and_then(|t| t.keys().next_back())
    }

    /// Next numeric id for tables keyed by [`id_key`].
    pub fn next_id(&self, table: &str) -> u64 {
        self.last_key(table).and_then(|k| k.parse::<u64>().ok()).map_or(1, |v| v + 1)
    }

    pub fn commit_seq(&self) -> u64 {
        self.seq
    }

    pub fn topic_head(&self, topic: &str) -> u64 {
        self.topics.get(topic).and_then(|e| e.last()).map_or(0, |(s, _)| *s)
    }
}

#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrashPoint {
    /// Fail before anything reaches the WAL.
    BeforeWal,
    /// Write half of the WAL line, then fail.
    TornWal,
    /// Make the WAL line durable, then fail before memory is updated.
    AfterWal,
}

#[derive(Debug, Clone)]
pub struct StoreOptions {
    /// fsync the WAL on every commit.
    pub sync: bool,
    /// Commits between automatic checkpoints; 0 disables them.
    pub checkpoint_every: u64,
}

impl Default for StoreOptions {
    fn default() -> Self {
        Self {
            sync: true,
            checkpoint_every: 2000,
        }
    }
}

type ReverseRefs = BTreeMap<RecordRef, std::collections::BTreeSet<RecordRef>>;

struct State {
    tables: Tables,
    /// Referenced record to the records holding a reference to it.
    referrers: ReverseRefs,
    seq: u64,
    topics: BTreeMap<String, Vec<(u64, Value)>>,
    wal: File,
    since_checkpoint: u64,
    poisoned: bool,
    crash: Option<CrashPoint>,
}

/// Called with the topic events of each commit, in commit order, while the
/// writer lock is still held.
pub type CommitHook = Box<dyn Fn(&[TopicEvent]) + Send + Sync>;

pub struct Store {
    dir: PathBuf,
    opts: StoreOptions,
    state: RwLock<State>,
    tmp_counter: AtomicU64,
    hook: RwLock<Option<CommitHook>>,
}

#[derive(Serialize, Deserialize)]
struct SnapshotFile {
    seq: u64,
    tables: Tables,
}

const SNAPSHOT: &str = "records/snapshot.json";
const WAL: &str = "records/wal.log";

fn valid_name(s: &str) -> bool {
    !s.is_empty()
        && !s.starts_with('.')
        && s.bytes().all(|b| b.is_ascii_alphanumeric() || b"._-".contains(&b))
}

fn check_topic(topic: &str) -> Result<()> {
    if valid_name(topic) {
        Ok(())
    } else {
        Err(StoreError::InvalidName(topic.to_string()))
    }
}

fn check_blob_key(key: &str) -> Result<()> {
    if key.split('/').all(|seg| valid_name(seg) && seg != "..") {
        Ok(())
    } else {
        Err(StoreError::InvalidName(key.to_string()))
    }
}

fn sync_dir(path: &Path) {
    if let Ok(d) = File::open(path) {
        let _ = d.sync_all();
    }
}

fn topic_path(dir: &Path, topic: &str) -> PathBuf {
    dir.join("log").join(format!("{topic}.log"))
}

fn append_topic_file(dir: &Path, topic: &str, seq: u64, event: &Value) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(topic_path(dir, topic))?;
    f.write_all(wal::encode_line(seq, &event.to_string()).as_bytes())?;
    Ok(())
}

fn unlink(referrers: &mut ReverseRefs, holder: &RecordRef, old: &Record) {
    for r in &old.refs {
        if let Some(set) = referrers.get_mut(r) {
            set.remove(holder);
            if set.is_empty() {
                referrers.remove(r);
            }
        }
    }
}

fn link(referrers: &mut ReverseRefs, holder: &RecordRef, rec: &Record) {
    for r in &rec.refs {
        referrers.entry(r.clone()).or_default().insert(holder.clone());
    }
}

fn apply(
    state_tables: &mut Tables,
    referrers: &mut ReverseRefs,
    topics: &mut BTreeMap<String, Vec<(u64, Value)>>,
    dir: &Path,
    txn: Txn,
) -> Result<()> {
    for op in txn.ops {
        match op {
            Applied::Put { table, key, record } => {
                let holder = RecordRef::new(&table, key.clone());
                link(referrers, &holder, &record);
                if let Some(old) = state_tables.entry(table).or_default().insert(key, record) {
                    unlink(referrers, &holder, &old);
                    // re-link in case old and new share a reference
                    let t = &state_tables[&holder.table][&holder.key];
                    link(referrers, &holder, t);
                }
            }
            Applied::Delete { table, key } => {
                if let Some(t) = state_tables.get_mut(&table) {
                    if let Some(old) = t.remove(&key) {
                        unlink(referrers, &RecordRef::new(&table, key.clone()), &old);
                    }
                    if t.is_empty() {
                        state_tables.remove(&table);
                    }
                }
            }
            Applied::Append { topic, seq, event } => {
                let log = topics.entry(topic.clone()).or_default();
                if log.last().is_none_or(|(s, _)| *s < seq) {
                    append_topic_file(dir, &topic, seq, &event)?;
                    log.push((seq, event));
                }
            }
        }
    }
    Ok(())
}

type Overlay = BTreeMap<(String, String), Option<Record>>;

/// A record as seen by a transaction in progress: its own writes first.
fn lookup<'a>(overlay: &'a Overlay, tables: &'a Tables, table: &str, key: &str) -> Option<&'a Record> {
    match overlay.get(&(table.to_string(), key.to_string())) {
        Some(r) => r.as_ref(),
        None => tables.get(table).and_then(|t| t.get(key)),
    }
}

/// Loads snapshot, topic segments and WAL, repairing torn tails in place.
fn recover(dir: &Path) -> Result<State> {
    for sub in ["records", "blobs", "blobs/.tmp", "log"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let (mut tables, snap_seq) = match fs::read(dir.join(SNAPSHOT)) {
        Ok(bytes) => {
            let s: SnapshotFile =
                serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt(format!("snapshot: {e}")))?;
            (s.tables, s.seq)
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => (Tables::new(), 0),
        Err(e) => return Err(e.into()),
    };
    let mut topics = BTreeMap::new();
    for entry in fs::read_dir(dir.join("log"))? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(topic) = name.strip_suffix(".log") else {
            continue;
        };
        if !valid_name(topic) {
            continue;
        }
        let (lines, valid) = wal::read_lines(&path)?;
        if fs::metadata(&path)?.len() != valid {
            OpenOptions::new().write(true).open(&path)?.set_len(valid)?;
        }
        let mut events = Vec::with_capacity(lines.len());
        for (seq, json) in lines {
            let v: Value = serde_json::from_str(&json).map_err(|e| StoreError::Corrupt(format!("log {topic}: {e}")))?;
            events.push((seq, v));
        }
        topics.insert(topic.to_string(), events);
    }

    let wal_path = dir.join(WAL);
    let (lines, valid) = wal::read_lines(&wal_path)?;
    let mut referrers = ReverseRefs::new();
    for (table, rows) in &tables {
        for (key, rec) in rows {
            link(&mut referrers, &RecordRef::new(table, key.clone()), rec);
        }
    }
    let mut seq = snap_seq;
    for (s, json) in lines {
        if s <= snap_seq {
            continue;
        }
        if s != seq + 1 {
            return Err(StoreError::Corrupt(format!("WAL gap: expected {}, found {s}", seq + 1)));
        }
        let txn: Txn = serde_json::from_str(&json).map_err(|e| StoreError::Corrupt(format!("WAL {s}: {e}")))?;
        apply(&mut tables, &mut referrers, &mut topics, dir, txn)?;
        seq = s;
    }
    let wal = OpenOptions::new().create(true).append(true).open(&wal_path)?;
    if wal.metadata()?.len() != valid {
        wal.set_len(valid)?;
        wal.sync_all()?;
    }
    Ok(State {
        tables,
        referrers,
        seq,
        topics,
        wal,
        since_checkpoint: 0,
        poisoned: false,
        crash: None,
    })
}

impl Store {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Store> {
        Self::open_with(dir, StoreOptions::default())
    }

    pub fn open_with(dir: impl Into<PathBuf>, opts: StoreOptions) -> Result<Store> {
        let dir = dir.into();
        let state = recover(&dir)?;
        Ok(Store {
            dir,
            opts,
            state: RwLock::new(state),
            tmp_counter: AtomicU64::new(0),
            hook: RwLock::new(None),
        })
    }

    pub fn set_commit_hook(&self, hook: CommitHook) {
        *self.hook.write() = Some(hook);
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Runs `f` against committed state.
    pub fn read<T>(&self, f: impl FnOnce(&View) -> T) -> T {
        let s = self.state.read();
        f(&View {
            tables: &s.tables,
            topics: &s.topics,
            seq: s.seq,
        })
    }

    pub fn get(&self, table: &str, key: &str) -> Option<Record> {
        self.read(|v| v.get(table, key).cloned())
    }

    pub fn commit_seq(&self) -> u64 {
        self.state.read().seq
    }

    /// Commits `ops` atomically and returns the commit sequence number.
    pub fn transact(&self, ops: Vec<Mutation>) -> Result<u64> {
        self.atomically(|_| Ok::<_, StoreError>((ops, ()))).map(|(seq, _)| seq)
    }

    /// Builds mutations from a consistent view and commits them while no
    /// other writer can interleave. `f` returning an error aborts with no
    /// effect. Committed topic events are returned with the result.
    pub fn atomically<T, E: From<StoreError>>(
        &self,
        f: impl FnOnce(&View) -> std::result::Result<(Vec<Mutation>, T), E>,
    ) -> std::result::Result<(u64, T), E> {
        let (seq, out, _) = self.atomically_events(f)?;
        Ok((seq, out))
    }

    pub fn atomically_events<T, E: From<StoreError>>(
        &self,
        f: impl FnOnce(&View) -> std::result::Result<(Vec<Mutation>, T), E>,
    ) -> std::result::Result<(u64, T, Vec<TopicEvent>), E> {
        let mut guard = self.state.write();
        let st = &mut *guard;
        if st.poisoned {
            return Err(StoreError::Poisoned.into());
        }
        let (ops, out) = f(&View {
            tables: &st.tables,
            topics: &st.topics,
            seq: st.seq,
        })?;
        let (txn, events) = self.resolve(st, ops)?;
        let seq = st.seq + 1;
        let line = wal::encode_line(seq, &serde_json::to_string(&txn).expect("records serialize"));

        match st.crash.take() {
            Some(CrashPoint::BeforeWal) => {
                st.poisoned = true;
                return Err(StoreError::InjectedCrash.into());
            }
            Some(CrashPoint::TornWal) => {
                st.poisoned = true;
                st.wal.write_all(&line.as_bytes()[..line.len() / 2]).map_err(StoreError::from)?;
                st.wal.sync_data().map_err(StoreError::from)?;
                return Err(StoreError::InjectedCrash.into());
            }
            Some(CrashPoint::AfterWal) => {
                st.poisoned = true;
                st.wal.write_all(line.as_bytes()).map_err(StoreError::from)?;
                st.wal.sync_data().map_err(StoreError::from)?;
                return Err(StoreError::InjectedCrash.into());
            }
            None => {}
        }
        if let Err(e) = st.wal.write_all(line.as_bytes()).and_then(|_| {
            if self.opts.sync {
                st.wal.sync_data()
            } else {
                Ok(())
            }
        }) {
            st.poisoned = true;
            return Err(StoreError::from(e).into());
        }
        if let Err(e) = apply(&mut st.tables, &mut st.referrers, &mut st.topics, &self.dir, txn) {
            st.poisoned = true;
            return Err(e.into());
        }
        st.seq = seq;
        if !events.is_empty() {
            if let Some(hook) = self.hook.read().as_ref() {
                hook(&events);
            }
        }
        st.since_checkpoint += 1;
        if self.opts.checkpoint_every > 0 && st.since_checkpoint >= self.opts.checkpoint_every {
            self.checkpoint_locked(st)?;
        }
        Ok((seq, out, events))
    }

    /// Checks preconditions and integrity against the post-transaction
    /// state, and assigns versions and topic sequence numbers.
    fn resolve(&self, st: &State, ops: Vec<Mutation>) -> Result<(Txn, Vec<TopicEvent>)> {
        // Overlay of this transaction's writes: Some(record) or None for deleted.
        let mut overlay = Overlay::new();
        let mut heads: BTreeMap<String, u64> = BTreeMap::new();
        let mut applied = Vec::with_capacity(ops.len());
        let mut events = Vec::new();
        let mut refs_to_check: Vec<(RecordRef, RecordRef)> = Vec::new();
        let mut deleted: Vec<RecordRef> = Vec::new();

        let check = |table: &str, key: &str, expect: Expect, cur: Option<u64>| -> Result<()> {
            let fail = |reason: String| {
                Err(StoreError::Conflict {
                    table: table.to_string(),
                    key: key.to_string(),
                    reason,
                })
            };
            match (expect, cur) {
                (Expect::Any, _) => Ok(()),
                (Expect::Absent, None) => Ok(()),
                (Expect::Absent, Some(v)) => fail(format!("exists at version {v}")),
                (Expect::Version(v), Some(c)) if c == v => Ok(()),
                (Expect::Version(v), Some(c)) => fail(format!("expected version {v}, found {c}")),
                (Expect::Version(v), None) => fail(format!("expected version {v}, record absent")),
            }
        };

        for op in ops {
            match op {
                Mutation::Put {
                    table,
                    key,
                    value,
                    expect,
                    refs,
                } => {
                    if !valid_name(&table) || key.is_empty() {
                        return Err(StoreError::InvalidName(format!("{table}/{key}")));
                    }
                    let cur = lookup(&overlay, &st.tables, &table, &key).map(|r| r.version);
                    check(&table, &key, expect, cur)?;
                    let record = Record {
                        version: cur.map_or(1, |v| v + 1),
                        value,
                        refs: refs.clone(),
                    };
                    for r in refs {
                        refs_to_check.push((RecordRef::new(&table, key.clone()), r));
                    }
                    overlay.insert((table.clone(), key.clone()), Some(record.clone()));
                    applied.push(Applied::Put { table, key, record });
                }
                Mutation::Delete { table, key, expect } => {
                    let cur = lookup(&overlay, &st.tables, &table, &key).map(|r| r.version);
                    check(&table, &key, expect, cur)?;
                    if cur.is_some() {
                        overlay.insert((table.clone(), key.clone()), None);
                        deleted.push(RecordRef::new(&table, key.clone()));
                        applied.push(Applied::Delete { table, key });
                    }
                }
                Mutation::Append { topic, event } => {
                    check_topic(&topic)?;
                    let head = heads.entry(topic.clone()).or_insert_with(|| {
                        st.topics.get(&topic).and_then(|e| e.last()).map_or(0, |(s, _)| *s)
                    });
                    *head += 1;
                    events.push(TopicEvent {
                        topic: topic.clone(),
                        seq: *head,
                        event: event.clone(),
                    });
                    applied.push(Applied::Append {
                        topic,
                        seq: *head,
                        event,
                    });
                }
            }
        }
        for (from, to) in &refs_to_check {
            if lookup(&overlay, &st.tables, &to.table, &to.key).is_none() {
                return Err(StoreError::IntegrityViolation(format!(
                    "{}/{} references missing {}/{}",
                    from.table, from.key, to.table, to.key
                )));
            }
        }
        // A deleted record must not be referenced by anything that survives.
        for gone in &deleted {
            if lookup(&overlay, &st.tables, &gone.table, &gone.key).is_some() {
                continue;
            }
            let committed = st.referrers.get(gone).into_iter().flatten();
            let pending = refs_to_check.iter().filter(|(_, to)| to == gone).map(|(from, _)| from);
            for holder in committed.chain(pending) {
                let still_refers =
                    lookup(&overlay, &st.tables, &holder.table, &holder.key).is_some_and(|r| r.refs.contains(gone));
                if still_refers {
                    return Err(StoreError::IntegrityViolation(format!(
                        "{}/{} is referenced by {}/{}",
                        gone.table, gone.key, holder.table, holder.key
                    )));
                }
            }
        }
        Ok((Txn { ops: applied }, events))
    }

    /// Folds the WAL into the snapshot file and truncates it.
    pub fn checkpoint(&self) -> Result<()> {
        let mut st = self.state.write();
        if st.poisoned {
            return Err(StoreError::Poisoned);
        }
        self.checkpoint_locked(&mut st)
    }

    fn checkpoint_locked(&self, st: &mut State) -> Result<()> {
        for topic in st.topics.keys() {
            if let Ok(f) = OpenOptions::new().append(true).open(topic_path(&self.dir, topic)) {
                f.sync_all()?;
            }
        }
        let snap = serde_json::to_vec(&SnapshotFile {
            seq: st.seq,
            tables: st.tables.clone(),
        })
        .expect("records serialize");
        let tmp = self.dir.join("records/snapshot.json.tmp");
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&snap)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, self.dir.join(SNAPSHOT))?;
        sync_dir(&self.dir.join("records"));
        st.wal.set_len(0)?;
        st.wal.sync_all()?;
        st.since_checkpoint = 0;
        Ok(())
    }

    #[doc(hidden)]
    pub fn inject_crash(&self, point: CrashPoint) {
        self.state.write().crash = Some(point);
    }

    /// Events of `topic` with sequence number `>= from`, in order.
    pub fn read_topic(&self, topic: &str, from: u64) -> Vec<(u64, Value)> {
        let st = self.state.read();
        match st.topics.get(topic) {
            None => Vec::new(),
            Some(events) => {
                let start = events.partition_point(|(s, _)| *s < from);
                events[start..].to_vec()
            }
        }
    }

    pub fn topic_exists(&self, topic: &str) -> bool {
        self.state.read().topics.contains_key(topic)
    }

    pub fn topic_head(&self, topic: &str) -> u64 {
        self.read(|v| v.topic_head(topic))
    }

    pub fn topics(&self) -> Vec<String> {
        self.state.read().topics.keys().cloned().collect()
    }

    /// Writes a blob atomically (temp file, fsync, rename).
    pub fn put_blob(&self, key: &str, bytes: &[u8]) -> Result<()> {
        check_blob_key(key)?;
        let n = self.tmp_counter.fetch_add(1, Ordering::Relaxed);
        let tmp = self.dir.join("blobs/.tmp").join(format!("{}-{n}", std::process::id()));
        {
            let mut f = File::create(&tmp)?;
            f.write_all(bytes)?;
            if self.opts.sync {
                f.sync_all()?;
            }
        }
        let dest = self.dir.join("blobs").join(key);
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::rename(&tmp, &dest)?;
        Ok(())
    }

    pub fn get_blob(&self, key: &str) -> Result<Option<Vec<u8>>> {
        check_blob_key(key)?;
        match fs::read(self.dir.join("blobs").join(key)) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn blob_exists(&self, key: &str) -> bool {
        check_blob_key(key).is_ok() && self.dir.join("blobs").join(key).is_file()
    }

    /// Every blob key, sorted.
    pub fn blob_keys(&self) -> Result<Vec<String>> {
        let mut out = Vec::new();
        snapshot::walk_blobs(&self.dir.join("blobs"), "", &mut out)?;
        out.sort();
        Ok(out)
    }

    /// Canonical dump of records and topics, for equality checks.
    pub fn dump(&self) -> Value {
        let st = self.state.read();
        serde_json::json!({
            "seq": st.seq,
            "tables": st.tables,
            "topics": st.topics,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn open(dir: &Path) -> Store {
        Store::open(dir).unwrap()
    }

    #[test]
    fn sequential_commits_are_numbered() {
        let d = tempfile::tempdir().unwrap();
        let s = open(d.path());
        for i in 1..=1000u64 {
            assert_eq!(s.transact(vec![Mutation::put("t", id_key(i), json!(i))]).unwrap(), i);
        }
        drop(s);
        let s = open(d.path());
        assert_eq!(s.commit_seq(), 1000);
        assert_eq!(s.read(|v| v.len("t")), 1000);
        assert_eq!(s.read(|v| v.next_id("t")), 1001);
    }

    #[test]
    fn all_or_nothing() {
        let d = tempfile::tempdir().unwrap();
        let s = open(d.path());
        s.transact(vec![Mutation::create("models", "1", json!({"name": "root"}))]).unwrap();
        let err = s
            .transact(vec![
                Mutation::put("adaptations", "1", json!({})),
                Mutation::create("models", "1", json!({"name": "dup"})),
            ])
            .unwrap_err();
        assert!(matches!(err, StoreError::Conflict { .. }));
        assert!(s.get("adaptations", "1").is_none());
        assert_eq!(s.get("models", "1").unwrap().value["name"], "root");
    }

    #[test]
    fn versions_and_cas() {
        let d = tempfile::tempdir().unwrap();
        let s = open(d.path());
        s.transact(vec![Mutation::put("t", "a", json!(1))]).unwrap();
        s.transact(vec![Mutation::put("t", "a", json!(2)).expect(Expect::Version(1))]).unwrap();
        assert_eq!(s.get("t", "a").unwrap().version, 2);
        assert!(s.transact(vec![Mutation::put("t", "a", json!(3)).expect(Expect::Version(1))]).is_err());
        assert!(s.transact(vec![Mutation::delete("t", "a").expect(Expect::Version(5))]).is_err());
    }

    #[test]
    fn referential_integrity() {
        let d = tempfile::tempdir().unwrap();
        let s = open(d.path());
        let err = s
            .transact(vec![Mutation::put("sets", "1", json!({})).with_ref("rasters", "9")])
            .unwrap_err();
        assert!(matches!(err, StoreError::IntegrityViolation(_)));
        s.transact(vec![
            Mutation::put("rasters", "9", json!({})),
            Mutation::put("sets", "1", json!({})).with_ref("rasters", "9"),
        ])
        .unwrap();
        assert!(matches!(
            s.transact(vec![Mutation::delete("rasters", "9")]),
            Err(StoreError::IntegrityViolation(_))
        ));
        s.transact(vec![Mutation::delete("sets", "1"), Mutation::delete("rasters", "9")]).unwrap();

        // dropping the reference by rewriting the holder frees the target
        s.transact(vec![
            Mutation::put("rasters", "7", json!({})),
            Mutation::put("sets", "2", json!({})).with_ref("rasters", "7"),
        ])
        .unwrap();
        s.transact(vec![Mutation::put("sets", "2", json!({"detached": true}))]).unwrap();
        s.transact(vec![Mutation::delete("rasters", "7")]).unwrap();
        drop(s);
        let s = open(d.path());
        s.transact(vec![
            Mutation::put("rasters", "5", json!({})),
            Mutation::put("sets", "3", json!({})).with_ref("rasters", "5"),
        ])
        .unwrap();
        assert!(s.transact(vec![Mutation::delete("rasters", "5")]).is_err());
    }

    #[test]
    fn commit_hook_sees_events_in_commit_order() {
        let d = tempfile::tempdir().unwrap();
        let s = std::sync::Arc::new(open(d.path()));
        let seen = std::sync::Arc::new(parking_lot::Mutex::new(Vec::new()));
        let sink = seen.clone();
        s.set_commit_hook(Box::new(move |evs: &[TopicEvent]| sink.lock().extend(evs.iter().map(|e| e.seq))));
        let threads: Vec<_> = (0..4)
            .map(|_| {
                let s = s.clone();
                std::thread::spawn(move || {
                    for _ in 0..50 {
                        s.transact(vec![Mutation::append("t", json!(null))]).unwrap();
                    }
                })
            })
            .collect();
        for t in threads {
            t.join().unwrap();
        }
        assert_eq!(*seen.lock(), (1..=200).collect::<Vec<u64>>());
    }

    #[test]
    fn crash_points() {
        for (point, visible) in [
            (CrashPoint::BeforeWal, false),
            (CrashPoint::TornWal, false),
            (CrashPoint::AfterWal, true),
        ] {
            let d = tempfile::tempdir().unwrap();
            let s = open(d.path());
            s.transact(vec![Mutation::put("t", "base", json!(0))]).unwrap();
            s.inject_crash(point);
            let r = s.transact(vec![
                Mutation::put("models", "1", json!({})),
                Mutation::put("adaptations", "1", json!({})),
                Mutation::append("jobs", json!({"n": 1})),
            ]);
            assert!(matches!(r, Err(StoreError::InjectedCrash)));
            assert!(matches!(s.transact(vec![]), Err(StoreError::Poisoned)));
            drop(s);
            let s = open(d.path());
            assert_eq!(s.get("models", "1").is_some(), visible, "{point:?}");
            assert_eq!(s.get("adaptations", "1").is_some(), visible, "{point:?}");
            assert_eq!(s.read_topic("jobs", 0).len(), usize::from(visible));
            assert!(s.get("t", "base").is_some());
            // the store accepts writes again after recovery
            let seq = s.transact(vec![Mutation::put("t", "after", json!(1))]).unwrap();
            assert_eq!(seq, if visible { 3 } else { 2 });
        }
    }

    #[test]
    fn recovery_is_idempotent() {
        let d = tempfile::tempdir().unwrap();
        let s = open(d.path());
        for i in 0..20 {
            s.transact(vec![
                Mutation::put("t", id_key(i), json!({"i": i})),
                Mutation::append("project.1", json!({"i": i})),
            ])
            .unwrap();
        }
        s.inject_crash(CrashPoint::TornWal);
        let _ = s.transact(vec![Mutation::put("t", "x", json!(0))]);
        drop(s);
        let a = open(d.path()).dump();
        let b = open(d.path()).dump();
        assert_eq!(a, b);
        assert_eq!(a["seq"], 20);
    }

    #[test]
    fn checkpoint_then_recover() {
        let d = tempfile::tempdir().unwrap();
        let s = Store::open_with(
            d.path(),
            StoreOptions {
                sync: false,
                checkpoint_every: 7,
            },
        )
        .unwrap();
        for i in 0..30 {
            s.transact(vec![Mutation::put("t", id_key(i), json!(i)), Mutation::append("jobs", json!(i))]).unwrap();
        }
        let before = s.dump();
        drop(s);
        let s = open(d.path());
        assert_eq!(s.dump(), before);
        assert_eq!(s.read_topic("jobs", 28).len(), 3);
    }

    #[test]
    fn topics_resume_from_cursor() {
        let d = tempfile::tempdir().unwrap();
        let s = open(d.path());
        let (_, _, ev) = s
            .atomically_events(|_| {
                Ok::<_, StoreError>((
                    vec![
                        Mutation::append("a", json!(1)),
                        Mutation::append("a", json!(2)),
                        Mutation::append("b", json!(3)),
                    ],
                    (),
                ))
            })
            .unwrap();
        assert_eq!(ev.iter().map(|e| e.seq).collect::<Vec<_>>(), vec![1, 2, 1]);
        s.transact(vec![Mutation::append("a", json!(4))]).unwrap();
        let from3: Vec<u64> = s.read_topic("a", 3).iter().map(|(s, _)| *s).collect();
        assert_eq!(from3, vec![3]);
        assert_eq!(s.read_topic("a", 0).len(), 3);
        assert!(matches!(
            s.transact(vec![Mutation::append("../x", json!(0))]),
            Err(StoreError::InvalidName(_))
        ));
    }

    #[test]
    fn blobs_are_atomic_files() {
        let d = tempfile::tempdir().unwrap();
        let s = open(d.path());
        s.put_blob("tiles/1/3/2/1.png", b"abc").unwrap();
        s.put_blob("tiles/1/3/2/1.png", b"abcd").unwrap();
        assert_eq!(s.get_blob("tiles/1/3/2/1.png").unwrap().unwrap(), b"abcd");
        assert_eq!(s.get_blob("nope").unwrap(), None);
        assert!(s.put_blob("../escape", b"x").is_err());
        assert!(s.put_blob(".tmp/x", b"x").is_err());
        assert_eq!(s.blob_keys().unwrap(), vec!["tiles/1/3/2/1.png".to_string()]);
        assert_eq!(fs::read_dir(d.path().join("blobs/.tmp")).unwrap().count(), 0);
    }
}
