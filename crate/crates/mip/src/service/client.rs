//! Client connection kit: a small pub/sub core, a TCP connection speaking
//! the wire protocol, and the middleware wrappers views are built on.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use crate::events::{Event, Kind};
use crate::gateway::RequestMeta;
use crate::value::canonical_json;

pub type EventCallback = Arc<dyn Fn(&Event) + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnStatus {
    Ok,
    Err,
}

/// Synchronous publish/subscribe: subscribers register under a dispatch
/// value, publications invoke every callback whose value matches.
pub struct PubSub<T> {
    dispatch: Box<dyn Fn(&T) -> String + Send + Sync>,
    subs: Mutex<HashMap<String, Vec<Arc<dyn Fn(&T) + Send + Sync>>>>,
}

impl<T> PubSub<T> {
    pub fn new(dispatch: impl Fn(&T) -> String + Send + Sync + 'static) -> PubSub<T> {
        PubSub {
            dispatch: Box::new(dispatch),
            subs: Mutex::new(HashMap::new()),
        }
    }

    pub fn sub(&self, key: &str, callback: Arc<dyn Fn(&T) + Send + Sync>) {
        self.subs
            .lock()
            .unwrap()
            .entry(key.to_owned())
            .or_default()
            .push(callback);
    }

    pub fn publish(&self, message: &T) {
        let key = (self.dispatch)(message);
        let callbacks: Vec<Arc<dyn Fn(&T) + Send + Sync>> = self
            .subs
            .lock()
            .unwrap()
            .get(&key)
            .map(|cbs| cbs.to_vec())
            .unwrap_or_default();
        for cb in callbacks {
            cb(message);
        }
    }
}

/// A connection to the platform, as seen by client-side views: publish
/// events, subscribe to events by name, and a few ambient utilities.
pub trait Connection: Send + Sync {
    fn publish(&self, e: Event);
    fn subscribe(&self, name: &str, callback: EventCallback);
    /// Current time in milliseconds, unique per call.
    fn time(&self) -> i64;
    fn uuid(&self) -> String;
    /// The identity announced by the server's init event, once received.
    fn identity(&self) -> Option<String>;
    fn status(&self) -> ConnStatus;
}

struct TcpInner {
    writer: Mutex<TcpStream>,
    pubsub: PubSub<Event>,
    identity: Mutex<Option<String>>,
    identity_cv: Condvar,
    status: Mutex<ConnStatus>,
}

/// A live TCP session with the server.
pub struct TcpClient {
    inner: Arc<TcpInner>,
}

impl TcpClient {
    pub fn connect(
        addr: impl std::net::ToSocketAddrs,
        meta: &RequestMeta,
    ) -> std::io::Result<TcpClient> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true).ok();
        let mut hello = stream.try_clone()?;
        let frame = serde_json::json!({
            "kind": "hello",
            "params": meta.params,
            "cookies": meta.cookies,
        });
        hello.write_all(canonical_json(&frame).as_bytes())?;
        hello.write_all(b"\n")?;
        hello.flush()?;

        let inner = Arc::new(TcpInner {
            writer: Mutex::new(stream.try_clone()?),
            pubsub: PubSub::new(|e: &Event| e.name.clone()),
            identity: Mutex::new(None),
            identity_cv: Condvar::new(),
            status: Mutex::new(ConnStatus::Ok),
        });
        let reader_inner = Arc::clone(&inner);
        std::thread::Builder::new()
            .name("mip-client-reader".into())
            .spawn(move || {
                let reader = BufReader::new(stream);
                for line in reader.lines() {
                    let Ok(line) = line else { break };
                    if line.trim().is_empty() {
                        continue;
                    }
                    let Ok(event) = Event::from_wire(&line) else {
                        continue;
                    };
                    if event.kind == Kind::Init {
                        *reader_inner.identity.lock().unwrap() = event.identity.clone();
                        reader_inner.identity_cv.notify_all();
                    }
                    reader_inner.pubsub.publish(&event);
                }
                *reader_inner.status.lock().unwrap() = ConnStatus::Err;
            })
            .expect("spawn client reader");
        Ok(TcpClient { inner })
    }

    /// Wait until the server's init event announces the identity.
    pub fn wait_identity(&self, timeout: Duration) -> Option<String> {
        let deadline = std::time::Instant::now() + timeout;
        let mut identity = self.inner.identity.lock().unwrap();
        while identity.is_none() {
            let now = std::time::Instant::now();
            if now >= deadline {
                break;
            }
            let (guard, _) = self
                .inner
                .identity_cv
                .wait_timeout(identity, deadline - now)
                .unwrap();
            identity = guard;
        }
        identity.clone()
    }
}

impl Connection for TcpClient {
    fn publish(&self, e: Event) {
        let mut writer = self.inner.writer.lock().unwrap();
        if writer.write_all(e.to_wire().as_bytes()).is_err()
            || writer.write_all(b"\n").is_err()
            || writer.flush().is_err()
        {
            *self.inner.status.lock().unwrap() = ConnStatus::Err;
        }
    }

    fn subscribe(&self, name: &str, callback: EventCallback) {
        self.inner.pubsub.sub(name, callback);
    }

    fn time(&self) -> i64 {
        crate::engine::unique_ts()
    }

    fn uuid(&self) -> String {
        uuid::Uuid::new_v4().to_string()
    }

    fn identity(&self) -> Option<String> {
        self.inner.identity.lock().unwrap().clone()
    }

    fn status(&self) -> ConnStatus {
        *self.inner.status.lock().unwrap()
    }
}

/// In-process connection for tests: published events loop straight back to
/// subscribers, time is a counter, and the identity is fixed.
pub struct MockConnection {
    pubsub: PubSub<Event>,
    published: Mutex<Vec<Event>>,
    user: Option<String>,
    clock: AtomicI64,
    loopback: bool,
}

impl MockConnection {
    pub fn new(user: impl Into<String>) -> Arc<MockConnection> {
        Arc::new(MockConnection {
            pubsub: PubSub::new(|e: &Event| e.name.clone()),
            published: Mutex::new(Vec::new()),
            user: Some(user.into()),
            clock: AtomicI64::new(0),
            loopback: true,
        })
    }

    /// A mock whose publications are recorded but never echoed back;
    /// the test drives the subscriber side explicitly via [`receive`].
    ///
    /// [`receive`]: MockConnection::receive
    pub fn silent(user: impl Into<String>) -> Arc<MockConnection> {
        Arc::new(MockConnection {
            pubsub: PubSub::new(|e: &Event| e.name.clone()),
            published: Mutex::new(Vec::new()),
            user: Some(user.into()),
            clock: AtomicI64::new(0),
            loopback: false,
        })
    }

    /// Everything published so far, in order.
    pub fn published(&self) -> Vec<Event> {
        self.published.lock().unwrap().clone()
    }

    /// Simulate an event arriving from the server.
    pub fn receive(&self, e: &Event) {
        self.pubsub.publish(e);
    }
}

impl Connection for MockConnection {
    fn publish(&self, e: Event) {
        self.published.lock().unwrap().push(e.clone());
        if self.loopback {
            self.pubsub.publish(&e);
        }
    }

    fn subscribe(&self, name: &str, callback: EventCallback) {
        self.pubsub.sub(name, callback);
    }

    fn time(&self) -> i64 {
        self.clock.fetch_add(1, Ordering::SeqCst)
    }

    fn uuid(&self) -> String {
        format!("mock-{}", self.clock.fetch_add(1, Ordering::SeqCst))
    }

    fn identity(&self) -> Option<String> {
        self.user.clone()
    }

    fn status(&self) -> ConnStatus {
        ConnStatus::Ok
    }
}

/// Identity of an event for feed-forward matching: everything except the
/// readers- and writers-sets, which the server may rewrite.
fn feed_forward_key(e: &Event) -> String {
    let mut json = e.to_json();
    if let Some(obj) = json.as_object_mut() {
        obj.remove("readers");
        obj.remove("writers");
    }
    canonical_json(&json)
}

struct FfState {
    downstream: PubSub<Event>,
    wired: Mutex<HashSet<String>>,
    pending: Mutex<HashMap<String, usize>>,
}

struct FeedForward {
    inner: Arc<dyn Connection>,
    state: Arc<FfState>,
}

/// Propagate published facts straight to local subscribers, then suppress
/// the single echo of each that comes back from the server. Later arrivals
/// of an equal event pass through.
pub fn wrap_feed_forward(inner: Arc<dyn Connection>) -> Arc<dyn Connection> {
    Arc::new(FeedForward {
        inner,
        state: Arc::new(FfState {
            downstream: PubSub::new(|e: &Event| e.name.clone()),
            wired: Mutex::new(HashSet::new()),
            pending: Mutex::new(HashMap::new()),
        }),
    })
}

impl Connection for FeedForward {
    fn publish(&self, e: Event) {
        if e.kind == Kind::Fact {
            *self
                .state
                .pending
                .lock()
                .unwrap()
                .entry(feed_forward_key(&e))
                .or_insert(0) += 1;
            self.state.downstream.publish(&e);
        }
        self.inner.publish(e);
    }

    fn subscribe(&self, name: &str, callback: EventCallback) {
        self.state.downstream.sub(name, callback);
        if self.state.wired.lock().unwrap().insert(name.to_owned()) {
            let state = Arc::clone(&self.state);
            self.inner.subscribe(
                name,
                Arc::new(move |e: &Event| {
                    let key = feed_forward_key(e);
                    {
                        let mut pending = state.pending.lock().unwrap();
                        if let Some(count) = pending.get_mut(&key) {
                            *count -= 1;
                            if *count == 0 {
                                pending.remove(&key);
                            }
                            return; // the echo of our own publication
                        }
                    }
                    state.downstream.publish(e);
                }),
            );
        }
    }

    fn time(&self) -> i64 {
        self.inner.time()
    }

    fn uuid(&self) -> String {
        self.inner.uuid()
    }

    fn identity(&self) -> Option<String> {
        self.inner.identity()
    }

    fn status(&self) -> ConnStatus {
        self.inner.status()
    }
}

struct AtomicUpdates {
    inner: Arc<dyn Connection>,
}

/// Deliver atomic updates as their two underlying changes: first the
/// removal (negated change, removed tuple as data), then the addition.
pub fn wrap_atomic_updates(inner: Arc<dyn Connection>) -> Arc<dyn Connection> {
    Arc::new(AtomicUpdates { inner })
}

impl Connection for AtomicUpdates {
    fn publish(&self, e: Event) {
        self.inner.publish(e);
    }

    fn subscribe(&self, name: &str, callback: EventCallback) {
        self.inner.subscribe(
            name,
            Arc::new(move |e: &Event| match &e.removed {
                Some(removed) => {
                    let mut removal = e.clone();
                    removal.data = removed.clone();
                    removal.change = -e.change;
                    removal.removed = None;
                    callback(&removal);
                    let mut addition = e.clone();
                    addition.removed = None;
                    callback(&addition);
                }
                None => callback(e),
            }),
        );
    }

    fn time(&self) -> i64 {
        self.inner.time()
    }

    fn uuid(&self) -> String {
        self.inner.uuid()
    }

    fn identity(&self) -> Option<String> {
        self.inner.identity()
    }

    fn status(&self) -> ConnStatus {
        self.inner.status()
    }
}

struct RegDedup {
    inner: Arc<dyn Connection>,
    seen: Mutex<HashSet<(String, String)>>,
}

/// Send each distinct registration to the server only once; facts and other
/// kinds pass through unchanged.
pub fn wrap_reg(inner: Arc<dyn Connection>) -> Arc<dyn Connection> {
    Arc::new(RegDedup {
        inner,
        seen: Mutex::new(HashSet::new()),
    })
}

impl Connection for RegDedup {
    fn publish(&self, e: Event) {
        if e.kind == Kind::Reg {
            let key = (e.name.clone(), e.key.canonical());
            if !self.seen.lock().unwrap().insert(key) {
                return;
            }
        }
        self.inner.publish(e);
    }

    fn subscribe(&self, name: &str, callback: EventCallback) {
        self.inner.subscribe(name, callback);
    }

    fn time(&self) -> i64 {
        self.inner.time()
    }

    fn uuid(&self) -> String {
        self.inner.uuid()
    }

    fn identity(&self) -> Option<String> {
        self.inner.identity()
    }

    fn status(&self) -> ConnStatus {
        self.inner.status()
    }
}

struct LsState {
    downstream: PubSub<Event>,
    history: Mutex<HashMap<String, Vec<Event>>>,
    wired: Mutex<HashSet<String>>,
}

struct LateSubs {
    inner: Arc<dyn Connection>,
    state: Arc<LsState>,
}

/// Persist incoming events and replay them to subscribers that arrive after
/// the registration already happened.
pub fn wrap_late_subs(inner: Arc<dyn Connection>) -> Arc<dyn Connection> {
    Arc::new(LateSubs {
        inner,
        state: Arc::new(LsState {
            downstream: PubSub::new(|e: &Event| e.name.clone()),
            history: Mutex::new(HashMap::new()),
            wired: Mutex::new(HashSet::new()),
        }),
    })
}

impl Connection for LateSubs {
    fn publish(&self, e: Event) {
        self.inner.publish(e);
    }

    fn subscribe(&self, name: &str, callback: EventCallback) {
        let replay: Vec<Event> = self
            .state
            .history
            .lock()
            .unwrap()
            .get(name)
            .cloned()
            .unwrap_or_default();
        for e in replay {
            callback(&e);
        }
        self.state.downstream.sub(name, callback);
        if self.state.wired.lock().unwrap().insert(name.to_owned()) {
            let state = Arc::clone(&self.state);
            self.inner.subscribe(
                name,
                Arc::new(move |e: &Event| {
                    state
                        .history
                        .lock()
                        .unwrap()
                        .entry(e.name.clone())
                        .or_default()
                        .push(e.clone());
                    state.downstream.publish(e);
                }),
            );
        }
    }

    fn time(&self) -> i64 {
        self.inner.time()
    }

    fn uuid(&self) -> String {
        self.inner.uuid()
    }

    fn identity(&self) -> Option<String> {
        self.inner.identity()
    }

    fn status(&self) -> ConnStatus {
        self.inner.status()
    }
}

/// The stack a view-layer client normally wants: a TCP connection with
/// feed-forward echo suppression and atomic updates split for display.
pub fn default_connection(
    addr: impl std::net::ToSocketAddrs,
    meta: &RequestMeta,
) -> std::io::Result<Arc<dyn Connection>> {
    let tcp = TcpClient::connect(addr, meta)?;
    Ok(wrap_atomic_updates(wrap_feed_forward(Arc::new(tcp))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value::Value;

    fn collector() -> (EventCallback, Arc<Mutex<Vec<Event>>>) {
        let seen = Arc::new(Mutex::new(Vec::new()));
        let sink = Arc::clone(&seen);
        (
            Arc::new(move |e: &Event| sink.lock().unwrap().push(e.clone())),
            seen,
        )
    }

    #[test]
    fn pubsub_dispatches_by_key() {
        let ps: PubSub<Event> = PubSub::new(|e: &Event| e.name.clone());
        let (cb, seen) = collector();
        ps.sub("alice", cb);
        ps.publish(&Event::fact("alice", 1i64, vec![]));
        ps.publish(&Event::fact("bob", 1i64, vec![]));
        assert_eq!(seen.lock().unwrap().len(), 1);
        assert_eq!(seen.lock().unwrap()[0].name, "alice");
        // zero subscribers: publishing is a no-op
        let silent: PubSub<Event> = PubSub::new(|e: &Event| e.name.clone());
        silent.publish(&Event::fact("nobody", 1i64, vec![]));
    }

    #[test]
    fn feed_forward_delivers_immediately_and_suppresses_one_echo() {
        let mock = MockConnection::new("foo");
        // the mock loops publications back, playing the server's echo
        let conn = wrap_feed_forward(mock.clone());
        let (cb, seen) = collector();
        conn.subscribe("foo", cb);
        let e = Event::fact("foo", 1i64, vec![2.into(), 3.into()]).with_ts(1000);
        conn.publish(e.clone());
        // delivered once: the immediate local copy; the loopback echo from
        // the mock was suppressed
        assert_eq!(seen.lock().unwrap().len(), 1);
        // a second arrival from the server is not suppressed
        mock.receive(&e);
        assert_eq!(seen.lock().unwrap().len(), 2);
        // the wrapped connection still forwarded the publication
        assert_eq!(mock.published().len(), 1);
    }

    #[test]
    fn feed_forward_suppression_ignores_reader_writer_changes() {
        let mock = MockConnection::silent("foo");
        let conn = wrap_feed_forward(mock.clone());
        let (cb, seen) = collector();
        conn.subscribe("foo", cb);
        let published = Event::fact("foo", 1i64, vec![2.into()])
            .with_ts(1000)
            .with_readers(crate::interset::Interset::singleton("foo"));
        conn.publish(published.clone());
        assert_eq!(seen.lock().unwrap().len(), 1);
        // the server changed the readers before echoing
        let echoed = published.with_readers(crate::interset::Interset::singleton("bar"));
        mock.receive(&echoed);
        assert_eq!(seen.lock().unwrap().len(), 1);
        mock.receive(&echoed);
        assert_eq!(seen.lock().unwrap().len(), 2);
    }

    #[test]
    fn feed_forward_passes_pure_server_events() {
        let mock = MockConnection::new("foo");
        let conn = wrap_feed_forward(mock.clone());
        let (cb, seen) = collector();
        conn.subscribe("foo", cb);
        mock.receive(&Event::fact("foo", 1i64, vec![2.into()]));
        assert_eq!(seen.lock().unwrap().len(), 1);
    }

    #[test]
    fn atomic_updates_split_for_subscribers() {
        let mock = MockConnection::new("x");
        let conn = wrap_atomic_updates(mock.clone());
        let (cb, seen) = collector();
        conn.subscribe("foo", cb);
        mock.receive(
            &Event::fact("foo", "bar", vec![2.into(), 3.into(), 4.into()]).with_removed(vec![
                1.into(),
                2.into(),
                3.into(),
            ]),
        );
        let seen = seen.lock().unwrap();
        assert_eq!(seen.len(), 2);
        assert_eq!(
            seen[0].data,
            vec![Value::Int(1), Value::Int(2), Value::Int(3)]
        );
        assert_eq!(seen[0].change, -1);
        assert_eq!(seen[0].removed, None);
        assert_eq!(
            seen[1].data,
            vec![Value::Int(2), Value::Int(3), Value::Int(4)]
        );
        assert_eq!(seen[1].change, 1);
        assert_eq!(seen[1].removed, None);
    }

    #[test]
    fn atomic_updates_leave_plain_events_alone() {
        let mock = MockConnection::new("x");
        let conn = wrap_atomic_updates(mock.clone());
        let (cb, seen) = collector();
        conn.subscribe("foo", cb);
        let plain = Event::fact("foo", "bar", vec![1.into(), 2.into(), 3.into()]);
        mock.receive(&plain);
        assert_eq!(seen.lock().unwrap().as_slice(), &[plain]);
    }

    #[test]
    fn atomic_updates_mirror_negative_changes() {
        let mock = MockConnection::new("x");
        let conn = wrap_atomic_updates(mock.clone());
        let (cb, seen) = collector();
        conn.subscribe("foo", cb);
        mock.receive(
            &Event::fact("foo", "bar", vec![2.into()])
                .with_change(-1)
                .with_removed(vec![1.into()]),
        );
        let seen = seen.lock().unwrap();
        assert_eq!(seen[0].change, 1);
        assert_eq!(seen[1].change, -1);
    }

    #[test]
    fn reg_dedup_sends_each_registration_once() {
        let mock = MockConnection::new("x");
        let conn = wrap_reg(mock.clone());
        conn.publish(Event::reg("some/fact", 1i64));
        conn.publish(Event::reg("some/fact", 2i64));
        conn.publish(Event::reg("some/fact", 1i64)); // repeat
        assert_eq!(mock.published().len(), 2);
        // facts are not deduplicated
        for _ in 0..10 {
            conn.publish(Event::fact("some/fact", 1i64, vec![2.into()]));
        }
        assert_eq!(mock.published().len(), 12);
    }

    #[test]
    fn late_subscribers_replay_history() {
        let mock = MockConnection::new("x");
        let conn = wrap_late_subs(mock.clone());
        let (first_cb, _first_seen) = collector();
        conn.subscribe("some/fact", first_cb);
        mock.receive(&Event::fact("some/fact", 1i64, vec![2.into()]));
        mock.receive(&Event::fact("some/fact", 2i64, vec![3.into()]));
        // late subscriber still sees both
        let (late_cb, late_seen) = collector();
        conn.subscribe("some/fact", late_cb);
        let late = late_seen.lock().unwrap();
        assert_eq!(late.len(), 2);
        assert_eq!(late[0].key, Value::Int(1));
        assert_eq!(late[1].key, Value::Int(2));
    }

    #[test]
    fn early_subscribers_see_live_events_once() {
        let mock = MockConnection::new("x");
        let conn = wrap_late_subs(mock.clone());
        let (cb, seen) = collector();
        conn.subscribe("some/fact", Arc::new(|_| {}));
        conn.subscribe("some/fact", cb);
        mock.receive(&Event::fact("some/fact", 1i64, vec![2.into()]));
        mock.receive(&Event::fact("some/fact", 2i64, vec![3.into()]));
        assert_eq!(seen.lock().unwrap().len(), 2);
    }

    #[test]
    fn mock_connection_clock_counts() {
        let mock = MockConnection::new("foo");
        assert_eq!(mock.identity().as_deref(), Some("foo"));
        assert_eq!(mock.time(), 0);
        assert_eq!(mock.time(), 1);
        assert_eq!(mock.time(), 2);
    }
}
