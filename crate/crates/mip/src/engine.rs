//! Event processors and the dispatch loop.
//!
//! An *emitter* applies a rule's first link to raw fact events. A
//! *multiplier* combines a stored rule tuple with a matching fact event into
//! their products: data from the rule body, writers from the rule (it owns
//! its derivations), readers narrowed to the intersection of both sides,
//! change multiplied, and ts combined by modular multiplication so the same
//! pair always produces the same event ID. A *matcher* cross-references one
//! incoming event against everything stored on the other side of its link. A
//! [`Dispatcher`] wires these into a recursive topology: every stored event
//! is routed to every processor that consumes it, products are stored and
//! dispatched in turn, and duplicate deliveries die at the store.

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicI64, AtomicUsize, Ordering};
use std::sync::mpsc::{RecvTimeoutError, Sender};
use std::sync::{mpsc, Arc, Condvar, Mutex, RwLock, Weak};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::events::{join_atomic_updates, split_atomic_update, Accumulator, Event, Kind};
use crate::interset::{intersection, universe, Interset};
use crate::rules::{CompiledRule, LinkOutput, RuleDef, RuleError};
use crate::store::{EventPattern, EventStore, QueryChan, QueryRequest, StoreError};
use crate::value::Value;

/// Product IDs live modulo 2^48.
pub const TS_MODULUS: i128 = 1 << 48;

/// Combine the timestamps of a rule event and a fact event into the product
/// event's ID. Multiplication keeps the result specific to the pair (sums
/// collide far too easily) and the modulus keeps repeated multiplication
/// from growing without bound.
pub fn product_ts(rule_ts: i64, fact_ts: i64) -> i64 {
    ((rule_ts as i128 * fact_ts as i128).rem_euclid(TS_MODULUS)) as i64
}

static TS_SEQ: AtomicI64 = AtomicI64::new(0);

/// Fresh unique timestamp: wall-clock milliseconds bumped monotonically, so
/// no two calls in a process ever return the same value.
pub fn unique_ts() -> i64 {
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(1);
    let mut prev = TS_SEQ.load(Ordering::Relaxed);
    loop {
        let next = now.max(prev + 1);
        match TS_SEQ.compare_exchange_weak(prev, next, Ordering::Relaxed, Ordering::Relaxed) {
            Ok(_) => return next,
            Err(actual) => prev = actual,
        }
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("store endpoint is gone")]
    StoreUnavailable,
    #[error("store query for {0} timed out")]
    MatchTimeout(String),
    #[error("derivation exceeded depth {depth} at {name}")]
    DepthExceeded { name: String, depth: u32 },
    #[error(transparent)]
    Rule(#[from] RuleError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// The event standing for a freshly introduced rule: written by the rule's
/// own namespace, readable by anyone, one copy, fresh unique ID.
pub fn initial_rule_event(def: &RuleDef) -> Event {
    Event::rule(def.name.clone(), 0i64, vec![Value::Str(def.name.clone())])
        .with_ts(unique_ts())
        .with_change(1)
        .with_writers(Interset::singleton(def.namespace()))
        .with_readers(universe())
}

/// Applies a rule's link 0 to fact events.
pub struct Emitter {
    rule: Arc<CompiledRule>,
}

impl Emitter {
    pub fn new(rule: Arc<CompiledRule>) -> Emitter {
        Emitter { rule }
    }

    /// Evaluate the first link on a fact event. Outputs carry the rule
    /// namespace as their writers-set, the input's readers, and the input's
    /// ts and change untouched. Atomic updates evaluate as their two halves.
    pub fn emit(&self, e: &Event) -> Vec<Event> {
        if e.kind != Kind::Fact {
            return Vec::new();
        }
        let mut out = Vec::new();
        for part in split_atomic_update(e) {
            for output in self.rule.eval_link0(&part.key, &part.data, &part.writers) {
                out.push(product_event(&self.rule, 0, output, &part, &part, true));
            }
        }
        out
    }
}

/// Applies one continuation link of a rule to a (rule event, fact event)
/// pair.
pub struct Multiplier {
    rule: Arc<CompiledRule>,
    link: usize,
}

impl Multiplier {
    pub fn new(rule: Arc<CompiledRule>, link: usize) -> Multiplier {
        assert!(link >= 1, "multipliers handle links >= 1");
        Multiplier { rule, link }
    }

    pub fn multiply(&self, rule_ev: &Event, fact_ev: &Event) -> Vec<Event> {
        let mut out = Vec::new();
        for rpart in split_atomic_update(rule_ev) {
            for fpart in split_atomic_update(fact_ev) {
                for output in self.rule.eval_continuation(
                    self.link,
                    &rpart.data,
                    &fpart.key,
                    &fpart.data,
                    &fpart.writers,
                ) {
                    out.push(product_event(
                        &self.rule, self.link, output, &rpart, &fpart, false,
                    ));
                }
            }
        }
        join_atomic_updates(&out)
    }
}

fn product_event(
    rule: &CompiledRule,
    link: usize,
    output: LinkOutput,
    rule_side: &Event,
    fact_side: &Event,
    emitter: bool,
) -> Event {
    let (kind, name, key, data) = match output {
        LinkOutput::Fact { key, data } => (Kind::Fact, rule.output_name().to_owned(), key, data),
        LinkOutput::Tuple { key, data } => (Kind::Rule, rule.tuple_name(link), key, data),
    };
    let (writers, readers, ts, change) = if emitter {
        // The rule takes ownership: writers become its namespace. Readers,
        // ts and change move over from the consumed fact.
        (
            Interset::singleton(rule.namespace()),
            fact_side.readers.clone(),
            fact_side.ts,
            fact_side.change,
        )
    } else {
        (
            rule_side.writers.clone(),
            intersection(&rule_side.readers, &fact_side.readers),
            product_ts(rule_side.ts, fact_side.ts),
            rule_side.change * fact_side.change,
        )
    };
    Event {
        kind,
        name,
        key,
        data,
        ts,
        change,
        writers,
        readers,
        removed: None,
        get_existing: false,
        identity: None,
    }
}

/// Cross-references one event against the stored events on the other side
/// of its link: an incoming fact queries stored rule tuples, an incoming
/// rule tuple queries stored facts. Replies are accumulated first so
/// cancelled counterparts contribute nothing.
pub struct Matcher {
    rule: Arc<CompiledRule>,
    link: usize,
    db: QueryChan,
    timeout: Duration,
}

impl Matcher {
    pub fn new(rule: Arc<CompiledRule>, link: usize, db: QueryChan) -> Matcher {
        assert!(link >= 1, "matchers handle links >= 1");
        Matcher {
            rule,
            link,
            db,
            timeout: Duration::from_secs(5),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Matcher {
        self.timeout = timeout;
        self
    }

    /// Match an event and collect all products.
    pub fn apply(&self, e: &Event) -> Result<Vec<Event>, EngineError> {
        self.apply_merging(e, &[])
    }

    /// Match an event, treating `extra` as if it had also been returned by
    /// the store (minus exact duplicates). This is how recent events that
    /// may not be query-visible yet are taken into account.
    pub fn apply_merging(&self, e: &Event, extra: &[Event]) -> Result<Vec<Event>, EngineError> {
        let pattern = match e.kind {
            Kind::Fact => EventPattern::new(
                Kind::Rule,
                self.rule.tuple_name(self.link - 1),
                e.key.clone(),
            ),
            Kind::Rule => EventPattern::new(
                Kind::Fact,
                self.rule.link_source(self.link).name.clone(),
                e.key.clone(),
            ),
            _ => return Ok(Vec::new()),
        };
        let (reply_tx, reply_rx) = mpsc::channel();
        self.db
            .send(QueryRequest {
                pattern: pattern.clone(),
                reply: reply_tx,
            })
            .map_err(|_| EngineError::StoreUnavailable)?;
        let mut acc = Accumulator::new();
        let mut seen: HashSet<String> = HashSet::new();
        loop {
            match reply_rx.recv_timeout(self.timeout) {
                Ok(reply) => {
                    if seen.insert(reply.dedup_key()) {
                        acc.accumulate(&reply);
                    }
                }
                Err(RecvTimeoutError::Disconnected) => break,
                Err(RecvTimeoutError::Timeout) => {
                    return Err(EngineError::MatchTimeout(pattern.name))
                }
            }
        }
        for candidate in extra {
            if candidate.kind == pattern.kind
                && candidate.name == pattern.name
                && candidate.key == pattern.key
                && seen.insert(candidate.dedup_key())
            {
                acc.accumulate(candidate);
            }
        }
        let multiplier = Multiplier::new(Arc::clone(&self.rule), self.link);
        let mut out = Vec::new();
        for counterpart in acc.accumulated_events() {
            out.extend(match e.kind {
                Kind::Fact => multiplier.multiply(&counterpart, e),
                _ => multiplier.multiply(e, &counterpart),
            });
        }
        Ok(out)
    }

    /// Streaming form: products go to `out`, which closes when matching
    /// completes.
    pub fn apply_streaming(&self, e: &Event, out: Sender<Event>) -> Result<(), EngineError> {
        for product in self.apply(e)? {
            if out.send(product).is_err() {
                break;
            }
        }
        Ok(())
    }
}

/// Wrap a query endpoint so every reply stream arrives accumulated: one
/// event per surviving identity, nothing for cancelled ones.
pub fn accumulate_query(inner: QueryChan) -> QueryChan {
    let (tx, rx) = mpsc::channel::<QueryRequest>();
    std::thread::Builder::new()
        .name("accumulate-query".into())
        .spawn(move || {
            for req in rx {
                let (reply_tx, reply_rx) = mpsc::channel();
                if inner
                    .send(QueryRequest {
                        pattern: req.pattern,
                        reply: reply_tx,
                    })
                    .is_err()
                {
                    continue;
                }
                let mut acc = Accumulator::new();
                for reply in reply_rx {
                    acc.accumulate(&reply);
                }
                for e in acc.accumulated_events() {
                    if req.reply.send(e).is_err() {
                        break;
                    }
                }
            }
        })
        .expect("spawn accumulate-query");
    tx
}

pub struct DispatcherConfig {
    pub workers: usize,
    /// Derivation chains longer than this are reported as faults.
    pub max_depth: u32,
    /// How long recently stored events stay merged into matcher replies.
    pub window: Duration,
    pub match_timeout: Duration,
}

impl Default for DispatcherConfig {
    fn default() -> DispatcherConfig {
        DispatcherConfig {
            workers: 4,
            max_depth: 32,
            window: Duration::from_secs(30),
            match_timeout: Duration::from_secs(5),
        }
    }
}

struct Task {
    event: Event,
    depth: u32,
}

#[derive(Default)]
struct RuleIndex {
    rules: HashMap<String, Arc<CompiledRule>>,
    /// fact name -> rules whose link 0 consumes it
    emitters: HashMap<String, Vec<String>>,
    /// fact name -> (rule, link) pairs for links >= 1
    fact_matchers: HashMap<String, Vec<(String, usize)>>,
    /// tuple name ("<rule>!<n>") -> (rule, link n+1)
    tuple_matchers: HashMap<String, (String, usize)>,
}

struct Buffer {
    kind: Kind,
    name: String,
    events: Vec<Event>,
}

type Listener = Arc<dyn Fn(&Event) + Send + Sync>;
type Service = (Kind, String, Listener);

struct DispatchInner {
    store: Arc<EventStore>,
    queues: Vec<(Mutex<VecDeque<Task>>, Condvar)>,
    inflight: AtomicUsize,
    idle: (Mutex<()>, Condvar),
    rules: RwLock<RuleIndex>,
    buffers: Mutex<HashMap<String, Buffer>>,
    services: RwLock<Vec<Service>>,
    listeners: RwLock<Vec<Listener>>,
    window: Mutex<VecDeque<(Instant, Event)>>,
    faults: Mutex<Vec<String>>,
    shutdown: AtomicBool,
    config: DispatcherConfig,
    db: QueryChan,
}

/// Routes events through the registered rules until no rule consumes their
/// products. Events are partitioned by key across a pool of serial
/// executors, so all events sharing a key are processed in order; every
/// event is stored before it is routed, which together with deterministic
/// product IDs makes redelivery and racing counterparts converge.
pub struct Dispatcher {
    inner: Arc<DispatchInner>,
    workers: Mutex<Vec<std::thread::JoinHandle<()>>>,
}

/// Cheap handle for submitting events from hooks and services.
#[derive(Clone)]
pub struct DispatchHandle {
    inner: Weak<DispatchInner>,
}

impl DispatchHandle {
    pub fn submit(&self, e: Event) {
        if let Some(inner) = self.inner.upgrade() {
            inner.enqueue(Task { event: e, depth: 0 });
        }
    }
}

impl Dispatcher {
    pub fn new(store: Arc<EventStore>, config: DispatcherConfig) -> Dispatcher {
        let workers = config.workers.max(1);
        let db = store.spawn_endpoint();
        let inner = Arc::new(DispatchInner {
            store,
            queues: (0..workers)
                .map(|_| (Mutex::new(VecDeque::new()), Condvar::new()))
                .collect(),
            inflight: AtomicUsize::new(0),
            idle: (Mutex::new(()), Condvar::new()),
            rules: RwLock::new(RuleIndex::default()),
            buffers: Mutex::new(HashMap::new()),
            services: RwLock::new(Vec::new()),
            listeners: RwLock::new(Vec::new()),
            window: Mutex::new(VecDeque::new()),
            faults: Mutex::new(Vec::new()),
            shutdown: AtomicBool::new(false),
            config,
            db,
        });
        let handles = (0..workers)
            .map(|slot| {
                let inner = Arc::clone(&inner);
                std::thread::Builder::new()
                    .name(format!("dispatch-{slot}"))
                    .spawn(move || inner.worker_loop(slot))
                    .expect("spawn dispatch worker")
            })
            .collect();
        Dispatcher {
            inner,
            workers: Mutex::new(handles),
        }
    }

    pub fn store(&self) -> &Arc<EventStore> {
        &self.inner.store
    }

    pub fn handle(&self) -> DispatchHandle {
        DispatchHandle {
            inner: Arc::downgrade(&self.inner),
        }
    }

    /// Queue an event for storage and routing.
    pub fn submit(&self, e: Event) {
        self.inner.enqueue(Task { event: e, depth: 0 });
    }

    /// Block until every queued event and all its products are processed.
    pub fn drain(&self) {
        let (lock, cv) = &self.inner.idle;
        let mut guard = lock.lock().unwrap();
        while self.inner.inflight.load(Ordering::SeqCst) != 0 {
            guard = cv.wait_timeout(guard, Duration::from_millis(50)).unwrap().0;
        }
    }

    /// Register a rule for live processing and replay anything buffered for
    /// it while it was migrating.
    pub fn activate_rule(&self, def: RuleDef) -> Result<(), EngineError> {
        let compiled = Arc::new(CompiledRule::compile(def)?);
        let name = compiled.name().to_owned();
        {
            let mut index = self.inner.rules.write().unwrap();
            if index.rules.contains_key(&name) {
                return Ok(());
            }
            index
                .emitters
                .entry(compiled.link_source(0).name.clone())
                .or_default()
                .push(name.clone());
            for link in 1..compiled.link_count() {
                index
                    .fact_matchers
                    .entry(compiled.link_source(link).name.clone())
                    .or_default()
                    .push((name.clone(), link));
                index
                    .tuple_matchers
                    .insert(compiled.tuple_name(link - 1), (name.clone(), link));
            }
            index.rules.insert(name.clone(), compiled);
        }
        // Drain events buffered for this rule by its fact declarers.
        let buffered: Vec<Event> = {
            let mut buffers = self.inner.buffers.lock().unwrap();
            let prefix = format!("fact-for-rule/{name}!");
            let keys: Vec<String> = buffers
                .keys()
                .filter(|q| q.starts_with(&prefix))
                .cloned()
                .collect();
            let mut drained = Vec::new();
            for key in keys {
                if let Some(buffer) = buffers.remove(&key) {
                    drained.extend(buffer.events);
                }
            }
            drained
        };
        for e in buffered {
            self.apply_to_rule(&name, &e);
        }
        Ok(())
    }

    pub fn is_live(&self, rule_name: &str) -> bool {
        self.inner
            .rules
            .read()
            .unwrap()
            .rules
            .contains_key(rule_name)
    }

    pub fn live_rules(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .inner
            .rules
            .read()
            .unwrap()
            .rules
            .keys()
            .cloned()
            .collect();
        names.sort();
        names
    }

    /// Declare a buffering queue for events matching `(kind, name)`. Events
    /// keep flowing into the buffer until the owning rule goes live.
    pub fn declare_buffer(&self, queue: impl Into<String>, kind: Kind, name: impl Into<String>) {
        let queue = queue.into();
        self.inner
            .buffers
            .lock()
            .unwrap()
            .entry(queue)
            .or_insert_with(|| Buffer {
                kind,
                name: name.into(),
                events: Vec::new(),
            });
    }

    pub fn buffered_queues(&self) -> Vec<String> {
        let mut queues: Vec<String> = self.inner.buffers.lock().unwrap().keys().cloned().collect();
        queues.sort();
        queues
    }

    /// Register a callback invoked after every non-duplicate store of an
    /// event with the given kind and name.
    pub fn add_service(
        &self,
        kind: Kind,
        name: impl Into<String>,
        callback: impl Fn(&Event) + Send + Sync + 'static,
    ) {
        self.inner
            .services
            .write()
            .unwrap()
            .push((kind, name.into(), Arc::new(callback)));
    }

    /// Register a callback invoked after every non-duplicate store of any
    /// event (the live feed sessions subscribe to).
    pub fn add_listener(&self, callback: impl Fn(&Event) + Send + Sync + 'static) {
        self.inner
            .listeners
            .write()
            .unwrap()
            .push(Arc::new(callback));
    }

    /// Route one event through a single rule's processors, storing and
    /// cascading the products. Used when draining migration buffers.
    pub fn apply_to_rule(&self, rule_name: &str, e: &Event) {
        let rule = {
            let index = self.inner.rules.read().unwrap();
            index.rules.get(rule_name).cloned()
        };
        let Some(rule) = rule else { return };
        let mut products = Vec::new();
        if e.kind == Kind::Fact {
            if rule.link_source(0).name == e.name {
                products.extend(Emitter::new(Arc::clone(&rule)).emit(e));
            }
            for link in 1..rule.link_count() {
                if rule.link_source(link).name == e.name {
                    match self.inner.matcher(&rule, link).apply(e) {
                        Ok(more) => products.extend(more),
                        Err(err) => self.inner.fault(format!("{rule_name}: {err}")),
                    }
                }
            }
        }
        for product in products {
            self.inner.enqueue(Task {
                event: product,
                depth: 0,
            });
        }
    }

    /// Faults recorded since the last call: depth overruns, match timeouts,
    /// storage errors.
    pub fn take_faults(&self) -> Vec<String> {
        std::mem::take(&mut self.inner.faults.lock().unwrap())
    }

    pub fn shutdown(&self) {
        self.inner.shutdown.store(true, Ordering::SeqCst);
        for (lock, cv) in &self.inner.queues {
            let _guard = lock.lock().unwrap();
            cv.notify_all();
        }
        let mut workers = self.workers.lock().unwrap();
        for handle in workers.drain(..) {
            let _ = handle.join();
        }
    }
}

impl Drop for Dispatcher {
    fn drop(&mut self) {
        self.shutdown();
    }
}

impl DispatchInner {
    fn slot_of(&self, e: &Event) -> usize {
        (crate::store::fnv1a(e.key.canonical().as_bytes()) % self.queues.len() as u64) as usize
    }

    fn enqueue(&self, task: Task) {
        self.inflight.fetch_add(1, Ordering::SeqCst);
        let slot = self.slot_of(&task.event);
        let (lock, cv) = &self.queues[slot];
        lock.lock().unwrap().push_back(task);
        cv.notify_one();
    }

    fn fault(&self, message: String) {
        self.faults.lock().unwrap().push(message);
    }

    fn matcher(&self, rule: &Arc<CompiledRule>, link: usize) -> Matcher {
        Matcher::new(Arc::clone(rule), link, self.db.clone())
            .with_timeout(self.config.match_timeout)
    }

    fn worker_loop(&self, slot: usize) {
        let (lock, cv) = &self.queues[slot];
        loop {
            let task = {
                let mut queue = lock.lock().unwrap();
                loop {
                    if let Some(task) = queue.pop_front() {
                        break task;
                    }
                    if self.shutdown.load(Ordering::SeqCst) {
                        return;
                    }
                    queue = cv
                        .wait_timeout(queue, Duration::from_millis(100))
                        .unwrap()
                        .0;
                }
            };
            self.process(task);
            if self.inflight.fetch_sub(1, Ordering::SeqCst) == 1 {
                let (idle_lock, idle_cv) = &self.idle;
                let _guard = idle_lock.lock().unwrap();
                idle_cv.notify_all();
            }
        }
    }

    fn process(&self, task: Task) {
        let e = &task.event;
        match self.store.put(e) {
            Ok(crate::store::PutOutcome::Stored) => {}
            Ok(crate::store::PutOutcome::Duplicate) => return,
            Err(err) => {
                self.fault(format!("store {}: {err}", e.name));
                return;
            }
        }

        // Recent-events window: merged into matcher replies so nothing in
        // flight is invisible to a join.
        {
            let mut window = self.window.lock().unwrap();
            let now = Instant::now();
            window.push_back((now, e.clone()));
            while window
                .front()
                .is_some_and(|(at, _)| now.duration_since(*at) > self.config.window)
            {
                window.pop_front();
            }
        }

        for listener in self.listeners.read().unwrap().iter() {
            listener(e);
        }
        let services: Vec<Listener> = self
            .services
            .read()
            .unwrap()
            .iter()
            .filter(|(kind, name, _)| *kind == e.kind && *name == e.name)
            .map(|(_, _, cb)| Arc::clone(cb))
            .collect();
        for service in services {
            service(e);
        }

        if e.kind == Kind::Fact {
            let mut buffers = self.buffers.lock().unwrap();
            for buffer in buffers.values_mut() {
                if buffer.kind == e.kind && buffer.name == e.name {
                    buffer.events.push(e.clone());
                }
            }
        }

        let mut products = Vec::new();
        let window_snapshot: Vec<Event> = self
            .window
            .lock()
            .unwrap()
            .iter()
            .map(|(_, w)| w.clone())
            .collect();
        {
            let index = self.rules.read().unwrap();
            match e.kind {
                Kind::Fact => {
                    if let Some(rule_names) = index.emitters.get(&e.name) {
                        for rule_name in rule_names {
                            let rule = &index.rules[rule_name];
                            products.extend(Emitter::new(Arc::clone(rule)).emit(e));
                        }
                    }
                    if let Some(links) = index.fact_matchers.get(&e.name) {
                        for (rule_name, link) in links {
                            let rule = &index.rules[rule_name];
                            match self.matcher(rule, *link).apply_merging(e, &window_snapshot) {
                                Ok(more) => products.extend(more),
                                Err(err) => self.fault(format!("{rule_name}: {err}")),
                            }
                        }
                    }
                }
                Kind::Rule => {
                    if let Some((rule_name, link)) = index.tuple_matchers.get(&e.name) {
                        let rule = &index.rules[rule_name];
                        match self.matcher(rule, *link).apply_merging(e, &window_snapshot) {
                            Ok(more) => products.extend(more),
                            Err(err) => self.fault(format!("{rule_name}: {err}")),
                        }
                    }
                }
                Kind::Reg | Kind::Init => {}
            }
        }

        for product in products {
            if task.depth + 1 > self.config.max_depth {
                self.fault(format!(
                    "derivation exceeded depth {} at {}",
                    self.config.max_depth, product.name
                ));
                continue;
            }
            self.enqueue(Task {
                event: product,
                depth: task.depth + 1,
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interset::GroupTerm;
    use crate::rules::{Expr, FactPattern, Guard, Link, RuleKind, SimFact};
    use crate::store::query_all;

    fn compiled(def: RuleDef) -> Arc<CompiledRule> {
        Arc::new(CompiledRule::compile(def).unwrap())
    }

    fn foo_yx() -> Arc<CompiledRule> {
        compiled(RuleDef {
            kind: RuleKind::Rule,
            name: "test-engine/foo-yx".into(),
            links: vec![Link {
                source: FactPattern::new("test/foo", Expr::var("x"), vec![Expr::var("y")]),
                guards: vec![Guard::ByAnyone],
            }],
            output: FactPattern::new("test-engine/foo-yx", Expr::var("y"), vec![Expr::var("x")]),
        })
    }

    fn timeline() -> RuleDef {
        RuleDef {
            kind: RuleKind::Rule,
            name: "test-engine/timeline".into(),
            links: vec![
                Link {
                    source: FactPattern::new(
                        "test/follows",
                        Expr::var("user"),
                        vec![Expr::var("author")],
                    ),
                    guards: vec![Guard::ByAnyone],
                },
                Link {
                    source: FactPattern::new(
                        "test/tweeted",
                        Expr::var("author"),
                        vec![Expr::var("tweet")],
                    ),
                    guards: vec![Guard::ByAnyone],
                },
            ],
            output: FactPattern::new(
                "test-engine/timeline",
                Expr::var("user"),
                vec![Expr::var("tweet")],
            ),
        }
    }

    #[test]
    fn initial_rule_events_are_owned_by_the_namespace() {
        let def = timeline();
        let e = initial_rule_event(&def);
        assert_eq!(e.kind, Kind::Rule);
        assert_eq!(e.writers, Interset::singleton("test-engine"));
        assert_eq!(e.readers, universe());
        assert_eq!(e.change, 1);
        let e2 = initial_rule_event(&def);
        assert_ne!(e.ts, e2.ts);
    }

    #[test]
    fn emitter_produces_derived_facts_for_single_link_rules() {
        let em = Emitter::new(foo_yx());
        let out = em.emit(&Event::fact("test/foo", 2i64, vec![3.into()]));
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].kind, Kind::Fact);
        assert_eq!(out[0].name, "test-engine/foo-yx");
        assert_eq!(out[0].key, Value::Int(3));
        assert_eq!(out[0].data, vec![Value::Int(2)]);
        assert_eq!(out[0].writers, Interset::singleton("test-engine"));
        assert_eq!(out[0].ts, 1);
        assert_eq!(out[0].change, 1);
    }

    #[test]
    fn emitter_produces_rule_tuples_for_joins() {
        let em = Emitter::new(compiled(timeline()));
        let out = em.emit(&Event::fact("test/follows", "alice", vec!["bob".into()]));
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].kind, Kind::Rule);
        assert_eq!(out[0].name, "test-engine/timeline!0");
        assert_eq!(out[0].key, Value::from("bob"));
        assert_eq!(out[0].data, vec![Value::from("alice"), Value::from("bob")]);
        assert_eq!(out[0].writers, Interset::singleton("test-engine"));
    }

    #[test]
    fn emitter_overrides_input_writers() {
        let em = Emitter::new(foo_yx());
        let input = Event::fact("test/foo", 2i64, vec![3.into()]).with_writers(Interset::simple([
            GroupTerm::identity("foo"),
            GroupTerm::identity("bar"),
        ]));
        let out = em.emit(&input);
        assert_eq!(out[0].writers, Interset::singleton("test-engine"));
    }

    #[test]
    fn emitter_keeps_input_readers_and_ts() {
        let em = Emitter::new(foo_yx());
        let readers = Interset::simple([
            GroupTerm::identity("male"),
            GroupTerm::identity("long-time-users"),
        ]);
        let input = Event::fact("test/foo", 1i64, vec![2.into()])
            .with_readers(readers.clone())
            .with_ts(1234);
        let out = em.emit(&input);
        assert_eq!(out[0].readers, readers);
        assert_eq!(out[0].ts, 1234);
    }

    #[test]
    fn emitter_splits_atomic_updates() {
        let em = Emitter::new(foo_yx());
        let out =
            em.emit(&Event::fact("test/foo", 2i64, vec![3.into()]).with_removed(vec![1.into()]));
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].key, Value::Int(3));
        assert_eq!(out[0].data, vec![Value::Int(2)]);
        assert_eq!(out[0].change, 1);
        assert_eq!(out[1].key, Value::Int(1));
        assert_eq!(out[1].data, vec![Value::Int(2)]);
        assert_eq!(out[1].change, -1);
    }

    fn timeline_tuple(user: &str, author: &str) -> Event {
        Event::rule(
            "test-engine/timeline!0",
            author,
            vec![user.into(), author.into()],
        )
        .with_writers(Interset::singleton("test-engine"))
    }

    #[test]
    fn multiplier_joins_tuple_and_fact() {
        let mult = Multiplier::new(compiled(timeline()), 1);
        let out = mult.multiply(
            &timeline_tuple("alice", "bob"),
            &Event::fact("test/tweeted", "bob", vec!["something".into()]),
        );
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].kind, Kind::Fact);
        assert_eq!(out[0].name, "test-engine/timeline");
        assert_eq!(out[0].key, Value::from("alice"));
        assert_eq!(out[0].data, vec![Value::from("something")]);
        assert_eq!(out[0].writers, Interset::singleton("test-engine"));
    }

    #[test]
    fn multiplier_multiplies_change() {
        let mult = Multiplier::new(compiled(timeline()), 1);
        let out = mult.multiply(
            &timeline_tuple("alice", "bob").with_change(2),
            &Event::fact("test/tweeted", "bob", vec!["something".into()]).with_change(3),
        );
        assert_eq!(out[0].change, 6);
    }

    #[test]
    fn multiplier_combines_ts_by_modular_multiplication() {
        let mult = Multiplier::new(compiled(timeline()), 1);
        let (ts1, ts2) = (1_676_432_770_123i64, 998_877_665_544i64);
        let out = mult.multiply(
            &timeline_tuple("alice", "bob").with_ts(ts1),
            &Event::fact("test/tweeted", "bob", vec!["hello".into()]).with_ts(ts2),
        );
        assert_eq!(
            out[0].ts,
            ((ts1 as i128 * ts2 as i128) % (1i128 << 48)) as i64
        );
        assert_eq!(out[0].ts, product_ts(ts1, ts2));
    }

    #[test]
    fn multiplier_takes_writers_from_the_rule_event() {
        let mult = Multiplier::new(compiled(timeline()), 1);
        let out = mult.multiply(
            &timeline_tuple("alice", "bob").with_writers(Interset::singleton("example.com")),
            &Event::fact("test/tweeted", "bob", vec!["hello".into()]).with_writers(
                Interset::simple([GroupTerm::group("user=", [Value::from("bob")])]),
            ),
        );
        assert_eq!(out[0].writers, Interset::singleton("example.com"));
    }

    #[test]
    fn multiplier_intersects_readers() {
        let mult = Multiplier::new(compiled(timeline()), 1);
        let rule_readers = Interset::simple([
            GroupTerm::identity("male"),
            GroupTerm::group("user=", [Value::from("bob")]),
        ]);
        let fact_readers = Interset::simple([
            GroupTerm::identity("male"),
            GroupTerm::identity("long-time-users"),
        ]);
        let out = mult.multiply(
            &timeline_tuple("alice", "bob").with_readers(rule_readers),
            &Event::fact("test/tweeted", "bob", vec!["hi".into()]).with_readers(fact_readers),
        );
        assert_eq!(
            out[0].readers,
            Interset::simple([
                GroupTerm::identity("male"),
                GroupTerm::identity("long-time-users"),
                GroupTerm::group("user=", [Value::from("bob")]),
            ])
        );
    }

    #[test]
    fn multiplier_handles_atomic_updates_in_the_fact() {
        let mult = Multiplier::new(compiled(timeline()), 1);
        let out = mult.multiply(
            &timeline_tuple("alice", "bob"),
            &Event::fact("test/tweeted", "bob", vec!["something else".into()])
                .with_removed(vec!["something".into()]),
        );
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].data, vec![Value::from("something else")]);
        assert_eq!(out[0].removed, Some(vec![Value::from("something")]));
        assert_eq!(out[0].change, 1);
    }

    #[test]
    fn multiplier_handles_atomic_updates_in_the_rule() {
        let mult = Multiplier::new(compiled(timeline()), 1);
        let rule_ev = Event::rule(
            "test-engine/timeline!0",
            "bob",
            vec!["eve".into(), "bob".into()],
        )
        .with_removed(vec!["alice".into(), "bob".into()]);
        let out = mult.multiply(
            &rule_ev,
            &Event::fact("test/tweeted", "bob", vec!["something".into()]),
        );
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].key, Value::from("eve"));
        assert_eq!(out[0].change, 1);
        assert_eq!(out[1].key, Value::from("alice"));
        assert_eq!(out[1].change, -1);
    }

    /// Service a mock database channel from a test thread.
    fn mock_db(
        expect: EventPattern,
        replies: Vec<Event>,
    ) -> (QueryChan, std::thread::JoinHandle<()>) {
        let (tx, rx) = mpsc::channel::<QueryRequest>();
        let handle = std::thread::spawn(move || {
            if let Ok(req) = rx.recv() {
                assert_eq!(req.pattern, expect);
                for e in replies {
                    req.reply.send(e).unwrap();
                }
            }
        });
        (tx, handle)
    }

    #[test]
    fn matcher_queries_rules_for_facts() {
        let expect = EventPattern::new(Kind::Rule, "test-engine/timeline!0", "bob");
        let replies = vec![
            timeline_tuple("alice", "bob"),
            timeline_tuple("eve", "bob"),
            // the next two cancel one another
            timeline_tuple("fred", "bob"),
            timeline_tuple("fred", "bob").with_change(-1),
        ];
        let (db, served) = mock_db(expect, replies);
        let matcher = Matcher::new(compiled(timeline()), 1, db);
        let (out_tx, out_rx) = mpsc::channel();
        let fact = Event::fact("test/tweeted", "bob", vec!["hello".into()]);
        matcher.apply_streaming(&fact, out_tx).unwrap();
        served.join().unwrap();
        let got: Vec<Event> = out_rx.into_iter().collect(); // sender dropped: stream ended
        let mut keys: Vec<String> = got.iter().map(|e| e.key.canonical()).collect();
        keys.sort();
        assert_eq!(keys, vec!["\"alice\"", "\"eve\""]);
        assert!(got
            .iter()
            .all(|e| e.name == "test-engine/timeline" && e.data == vec![Value::from("hello")]));
    }

    #[test]
    fn matcher_queries_facts_for_rules() {
        let expect = EventPattern::new(Kind::Fact, "test/tweeted", "bob");
        let replies = vec![
            Event::fact("test/tweeted", "bob", vec!["hello".into()]),
            Event::fact("test/tweeted", "bob", vec!["world".into()]).with_ts(2),
        ];
        let (db, served) = mock_db(expect, replies);
        let matcher = Matcher::new(compiled(timeline()), 1, db);
        let out = matcher.apply(&timeline_tuple("alice", "bob")).unwrap();
        served.join().unwrap();
        let mut data: Vec<String> = out.iter().map(|e| e.data[0].canonical()).collect();
        data.sort();
        assert_eq!(data, vec!["\"hello\"", "\"world\""]);
        assert!(out.iter().all(|e| e.key == Value::from("alice")));
    }

    #[test]
    fn matcher_with_no_counterparts_emits_nothing() {
        let expect = EventPattern::new(Kind::Rule, "test-engine/timeline!0", "bob");
        let (db, served) = mock_db(expect, vec![]);
        let matcher = Matcher::new(compiled(timeline()), 1, db);
        let out = matcher
            .apply(&Event::fact("test/tweeted", "bob", vec!["hello".into()]))
            .unwrap();
        served.join().unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn matcher_times_out_when_the_store_never_answers() {
        let (tx, _rx) = mpsc::channel::<QueryRequest>();
        let matcher =
            Matcher::new(compiled(timeline()), 1, tx).with_timeout(Duration::from_millis(50));
        let err = matcher
            .apply(&Event::fact("test/tweeted", "bob", vec!["hello".into()]))
            .unwrap_err();
        assert!(matches!(err, EngineError::MatchTimeout(_)));
    }

    #[test]
    fn accumulate_query_folds_reply_streams() {
        // mock database answering every request with the same three events,
        // the first and third of which cancel
        let (inner_tx, inner_rx) = mpsc::channel::<QueryRequest>();
        std::thread::spawn(move || {
            for req in inner_rx {
                let k1 = Event::fact("foo/bar", "k1", vec![1.into(), 2.into()]);
                let k2 = Event::fact("foo/bar", "k2", vec![3.into(), 4.into()]);
                req.reply.send(k1.clone()).unwrap();
                req.reply.send(k2).unwrap();
                req.reply.send(k1.with_change(-1)).unwrap();
            }
        });
        let wrapped = accumulate_query(inner_tx);
        for _ in 0..2 {
            let got = query_all(&wrapped, EventPattern::new(Kind::Fact, "foo/bar", "k"));
            assert_eq!(got.len(), 1);
            assert_eq!(got[0].key, Value::from("k2"));
        }
    }

    fn test_dispatcher() -> Dispatcher {
        Dispatcher::new(
            Arc::new(EventStore::in_memory()),
            DispatcherConfig {
                workers: 2,
                match_timeout: Duration::from_secs(2),
                ..DispatcherConfig::default()
            },
        )
    }

    #[test]
    fn dispatch_joins_across_links() {
        let dispatcher = test_dispatcher();
        dispatcher.activate_rule(timeline()).unwrap();
        dispatcher.submit(Event::fact("test/follows", "a", vec!["b".into()]).with_ts(unique_ts()));
        dispatcher.drain();
        dispatcher.submit(Event::fact("test/tweeted", "b", vec!["T".into()]).with_ts(unique_ts()));
        dispatcher.drain();
        assert!(dispatcher.take_faults().is_empty());

        let stored = dispatcher.store().events_for(&EventPattern::new(
            Kind::Fact,
            "test-engine/timeline",
            "a",
        ));
        assert_eq!(stored.len(), 1);
        assert_eq!(stored[0].data, vec![Value::from("T")]);

        // independently check against the exhaustive-join oracle
        let oracle = crate::rules::simulate_with(
            &timeline(),
            &[
                SimFact::new("test/follows", "a", vec!["b".into()]),
                SimFact::new("test/tweeted", "b", vec!["T".into()]),
            ],
        )
        .unwrap();
        assert_eq!(
            oracle,
            std::collections::BTreeSet::from([Value::list(["a".into(), "T".into()])])
        );
    }

    #[test]
    fn duplicate_delivery_adds_no_accumulated_change() {
        let dispatcher = test_dispatcher();
        dispatcher.activate_rule(timeline()).unwrap();
        let follows = Event::fact("test/follows", "a", vec!["b".into()]).with_ts(77);
        let tweet = Event::fact("test/tweeted", "b", vec!["T".into()]).with_ts(88);
        for e in [&follows, &tweet, &follows, &tweet] {
            dispatcher.submit(e.clone());
            dispatcher.drain();
        }
        let stored = dispatcher.store().events_for(&EventPattern::new(
            Kind::Fact,
            "test-engine/timeline",
            "a",
        ));
        let acc = crate::events::accumulate_all(&stored).accumulated_events();
        assert_eq!(acc.len(), 1);
        assert_eq!(acc[0].change, 1);
    }

    #[test]
    fn cancellation_reaches_derived_totals() {
        let dispatcher = test_dispatcher();
        dispatcher.activate_rule(timeline()).unwrap();
        dispatcher.submit(Event::fact("test/follows", "a", vec!["b".into()]).with_ts(10));
        dispatcher.drain();
        dispatcher.submit(
            Event::fact("test/follows", "a", vec!["b".into()])
                .with_ts(11)
                .with_change(-1),
        );
        dispatcher.drain();
        dispatcher.submit(Event::fact("test/tweeted", "b", vec!["T".into()]).with_ts(12));
        dispatcher.drain();
        assert!(dispatcher.take_faults().is_empty());

        let stored = dispatcher.store().events_for(&EventPattern::new(
            Kind::Fact,
            "test-engine/timeline",
            "a",
        ));
        let acc = crate::events::accumulate_all(&stored);
        // oracle: +1 and -1 tuples cancel, so the tweet derives nothing
        assert!(acc.accumulated_events().is_empty());
    }

    #[test]
    fn multiplicity_equals_unit_dispatch() {
        // n copies of a fact times m copies of a rule tuple == n*m products
        let mult = Multiplier::new(compiled(timeline()), 1);
        let products = mult.multiply(
            &timeline_tuple("alice", "bob").with_change(4),
            &Event::fact("test/tweeted", "bob", vec!["x".into()]).with_change(5),
        );
        assert_eq!(products[0].change, 20);

        let mut acc = Accumulator::new();
        for _ in 0..4 {
            for _ in 0..5 {
                for p in mult.multiply(
                    &timeline_tuple("alice", "bob"),
                    &Event::fact("test/tweeted", "bob", vec!["x".into()]),
                ) {
                    acc.accumulate(&p);
                }
            }
        }
        let unit_total = acc.accumulated_events()[0].change;
        assert_eq!(unit_total, 20);
    }

    #[test]
    fn products_narrow_readers_and_keep_rule_writers() {
        let mult = Multiplier::new(compiled(timeline()), 1);
        let rule_ev = timeline_tuple("alice", "bob")
            .with_readers(Interset::simple([GroupTerm::identity("r1")]))
            .with_writers(Interset::singleton("w"));
        let fact_ev = Event::fact("test/tweeted", "bob", vec!["x".into()])
            .with_readers(Interset::simple([GroupTerm::identity("r2")]));
        for p in mult.multiply(&rule_ev, &fact_ev) {
            assert!(crate::interset::subset(&p.readers, &rule_ev.readers));
            assert!(crate::interset::subset(&p.readers, &fact_ev.readers));
            assert_eq!(p.writers, rule_ev.writers);
        }
    }

    #[test]
    fn product_ts_is_deterministic_across_runs() {
        let mult = Multiplier::new(compiled(timeline()), 1);
        let rule_ev = timeline_tuple("alice", "bob").with_ts(123_456_789);
        let fact_ev = Event::fact("test/tweeted", "bob", vec!["x".into()]).with_ts(987_654_321);
        let a = mult.multiply(&rule_ev, &fact_ev);
        let b = mult.multiply(&rule_ev, &fact_ev);
        assert_eq!(a, b);
    }

    #[test]
    fn depth_overruns_are_reported_not_silent() {
        // a rule that consumes its own output and counts up: every product
        // is new, so only the depth cap stops it
        let looping = RuleDef {
            kind: RuleKind::Rule,
            name: "loop/again".into(),
            links: vec![Link {
                source: FactPattern::new("loop/again", Expr::var("k"), vec![Expr::var("v")]),
                guards: vec![Guard::ByAnyone],
            }],
            output: FactPattern::new(
                "loop/again",
                Expr::var("k"),
                vec![Expr::call("+", [Expr::var("v"), Expr::lit(1i64)])],
            ),
        };
        let dispatcher = Dispatcher::new(
            Arc::new(EventStore::in_memory()),
            DispatcherConfig {
                workers: 1,
                max_depth: 4,
                ..DispatcherConfig::default()
            },
        );
        dispatcher.activate_rule(looping).unwrap();
        dispatcher.submit(Event::fact("loop/again", "k", vec![1.into()]).with_ts(9));
        dispatcher.drain();
        let faults = dispatcher.take_faults();
        assert!(!faults.is_empty());
        assert!(faults[0].contains("depth"));
    }

    #[test]
    fn buffered_events_replay_on_activation() {
        let dispatcher = test_dispatcher();
        dispatcher.declare_buffer(
            "fact-for-rule/test-engine/timeline!1",
            Kind::Fact,
            "test/tweeted",
        );
        // tuple already in the store, as migration would have left it
        dispatcher
            .store()
            .put(&timeline_tuple("alice", "bob").with_ts(50))
            .unwrap();
        // tweet arrives while the rule is still migrating: buffered only
        dispatcher.submit(Event::fact("test/tweeted", "bob", vec!["live".into()]).with_ts(60));
        dispatcher.drain();
        assert!(dispatcher
            .store()
            .events_for(&EventPattern::new(
                Kind::Fact,
                "test-engine/timeline",
                "alice"
            ))
            .is_empty());

        dispatcher.activate_rule(timeline()).unwrap();
        dispatcher.drain();
        let stored = dispatcher.store().events_for(&EventPattern::new(
            Kind::Fact,
            "test-engine/timeline",
            "alice",
        ));
        assert_eq!(stored.len(), 1);
        assert_eq!(stored[0].data, vec![Value::from("live")]);
        assert!(dispatcher.buffered_queues().is_empty());
    }
}
