//! Live fan-out of committed topic events, and gap-free subscriptions that
//! replay the persisted log before switching to live delivery.

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use geoloop_store::{Store, TopicEvent};
use parking_lot::Mutex;
use serde_json::Value;
use tokio::sync::broadcast;

const CHANNEL_CAPACITY: usize = 4096;

/// An event as delivered to subscribers: the stored body plus `topic` and
/// `seq`.
pub fn delivered(topic: &str, seq: u64, body: &Value) -> Value {
    let mut v = body.clone();
    if let Value::Object(m) = &mut v {
        m.insert("topic".into(), Value::String(topic.to_string()));
        m.insert("seq".into(), Value::from(seq));
    }
    v
}

#[derive(Default)]
pub struct EventBus {
    channels: Mutex<HashMap<String, broadcast::Sender<Arc<TopicEvent>>>>,
}

impl EventBus {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    /// Hands committed events to live subscribers. Returns the number of
    /// subscriber deliveries.
    pub fn publish(&self, events: &[TopicEvent]) -> usize {
        let mut channels = self.channels.lock();
        let mut delivered = 0;
        for e in events {
            if let Some(tx) = channels.get(&e.topic) {
                match tx.send(Arc::new(e.clone())) {
                    Ok(n) => delivered += n,
                    Err(_) => {
                        channels.remove(&e.topic);
                    }
                }
            }
        }
        delivered
    }

    fn receiver(&self, topic: &str) -> broadcast::Receiver<Arc<TopicEvent>> {
        self.channels
            .lock()
            .entry(topic.to_string())
            .or_insert_with(|| broadcast::channel(CHANNEL_CAPACITY).0)
            .subscribe()
    }

    /// Subscribes to `topic`, delivering every event with `seq > after`.
    pub fn subscribe(self: &Arc<Self>, store: Arc<Store>, topic: &str, after: u64) -> Subscription {
        let rx = self.receiver(topic);
        Subscription {
            store,
            topic: topic.to_string(),
            last: after,
            rx,
            pending: VecDeque::new(),
            backfill: true,
        }
    }
}

pub struct Subscription {
    store: Arc<Store>,
    topic: String,
    last: u64,
    rx: broadcast::Receiver<Arc<TopicEvent>>,
    pending: VecDeque<(u64, Value)>,
    backfill: bool,
}

impl Subscription {
    pub fn topic(&self) -> &str {
        &self.topic
    }

    /// Sequence number of the last delivered event.
    pub fn cursor(&self) -> u64 {
        self.last
    }

    fn refill_from_log(&mut self) {
        self.pending = self.store.read_topic(&self.topic, self.last + 1).into();
        self.backfill = false;
    }

    /// Next event in sequence order, without gaps or duplicates. `None`
    /// once the bus shuts down.
    pub async fn next(&mut self) -> Option<(u64, Value)> {
        loop {
            if self.backfill {
                self.refill_from_log();
            }
            while let Some((seq, body)) = self.pending.pop_front() {
                if seq == self.last + 1 {
                    self.last = seq;
                    return Some((seq, body));
                }
            }
            match self.rx.recv().await {
                Ok(e) if e.seq <= self.last => continue,
                Ok(e) if e.seq == self.last + 1 => {
                    self.last = e.seq;
                    return Some((e.seq, e.event.clone()));
                }
                Ok(_) | Err(broadcast::error::RecvError::Lagged(_)) => self.backfill = true,
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use geoloop_store::Mutation;
    use serde_json::json;

    fn setup() -> (tempfile::TempDir, Arc<Store>, Arc<EventBus>) {
        let d = tempfile::tempdir().unwrap();
        let opts = geoloop_store::StoreOptions {
            sync: false,
            ..Default::default()
        };
        let store = Arc::new(Store::open_with(d.path(), opts).unwrap());
        let bus = EventBus::new();
        let b = bus.clone();
        store.set_commit_hook(Box::new(move |evs| {
            b.publish(evs);
        }));
        (d, store, bus)
    }

    fn publish(store: &Store, topic: &str, n: i64) {
        store.transact(vec![Mutation::append(topic, json!({ "n": n }))]).unwrap();
    }

    #[tokio::test]
    async fn replay_then_live_in_order() {
        let (_d, store, bus) = setup();
        for i in 1..=3 {
            publish(&store, "t", i);
        }
        let mut sub = bus.subscribe(store.clone(), "t", 0);
        for i in 1..=3u64 {
            assert_eq!(sub.next().await.unwrap().0, i);
        }
        publish(&store, "t", 4);
        assert_eq!(sub.next().await.unwrap(), (4, json!({"n": 4})));
    }

    #[tokio::test]
    async fn resume_after_disconnect_has_no_gaps() {
        let (_d, store, bus) = setup();
        publish(&store, "t", 1);
        publish(&store, "t", 2);
        let mut first = bus.subscribe(store.clone(), "t", 0);
        first.next().await.unwrap();
        let cursor = first.next().await.unwrap().0;
        drop(first);
        publish(&store, "t", 3);
        let mut again = bus.subscribe(store.clone(), "t", cursor);
        assert_eq!(again.next().await.unwrap().0, 3);
    }

    #[tokio::test]
    async fn independent_subscribers_and_isolation() {
        let (_d, store, bus) = setup();
        let mut a = bus.subscribe(store.clone(), "project.1", 0);
        let mut b = bus.subscribe(store.clone(), "project.1", 0);
        let mut other = bus.subscribe(store.clone(), "project.2", 0);
        publish(&store, "project.1", 1);
        assert_eq!(a.next().await.unwrap().0, 1);
        assert_eq!(b.next().await.unwrap().0, 1);
        let quiet = tokio::time::timeout(std::time::Duration::from_millis(50), other.next()).await;
        assert!(quiet.is_err());
    }

    #[test]
    fn delivered_count() {
        let (_d, store, bus) = setup();
        let ev = |seq| TopicEvent {
            topic: "x".into(),
            seq,
            event: json!({}),
        };
        assert_eq!(bus.publish(&[ev(1)]), 0);
        let _s1 = bus.subscribe(store.clone(), "x", 0);
        let _s2 = bus.subscribe(store.clone(), "x", 0);
        assert_eq!(bus.publish(&[ev(2)]), 2);
    }

    #[tokio::test]
    async fn lagging_subscriber_backfills_from_log() {
        let (_d, store, bus) = setup();
        let mut sub = bus.subscribe(store.clone(), "t", 0);
        for i in 0..(CHANNEL_CAPACITY as i64 + 50) {
            publish(&store, "t", i);
        }
        let mut expected = 1;
        while expected <= CHANNEL_CAPACITY as u64 + 50 {
            assert_eq!(sub.next().await.unwrap().0, expected);
            expected += 1;
        }
    }
}
