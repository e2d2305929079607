//! The runnable platform: assembly of store, dispatcher, migration services
//! and the TCP wire protocol, plus the client connection kit and the
//! micro-blogging fixture used across the integration tests.
//!
//! Wire protocol: newline-delimited JSON, one event per line. A session may
//! open with a `{"kind":"hello","params":{...},"cookies":{...}}` frame
//! carrying authentication and version parameters; the server answers with
//! an init event announcing the authenticated identity, then filters every
//! subsequent event through the gateway in both directions. Registrations
//! (`kind: reg`) replay stored matching facts when `get-existing` is set and
//! subscribe the session to live ones.

pub mod client;
pub mod fixture;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc, Mutex, Weak};
use std::time::Duration;

use thiserror::Error;

use crate::engine::{unique_ts, Dispatcher, DispatcherConfig, EngineError};
use crate::events::{Event, Kind};
use crate::gateway::{
    authenticate, select_version, translate_names, Direction, GatewaySession, RequestMeta,
    RuleVersionVerifier,
};
use crate::migrate::{
    build_plan, clause_migrator, deploy_dir, execute_plan, perm_tracker, DeployOutcome,
    MigrateError, MigrationEnv, APP_VERSION, PERMS_EXIST, PERM_VERSIONS, RULE_READY,
};
use crate::permastore::{eval_symbol, DirStore, Hasher, MemStore, PermRef};
use crate::store::{accumulate_pattern, EventPattern, EventStore, QuerySource};
use crate::value::Value;

#[derive(Debug, Error)]
pub enum PlatformError {
    #[error(transparent)]
    Store(#[from] crate::store::StoreError),
    #[error(transparent)]
    Blob(#[from] crate::permastore::StoreError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Migrate(#[from] MigrateError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PlatformConfig {
    /// Durable state directory; in-memory when absent.
    pub data_dir: Option<PathBuf>,
    /// Shard count for migration scans.
    pub shards: usize,
    /// Dispatcher worker pool size.
    pub workers: usize,
    /// Recent-events window merged into matcher replies, in milliseconds.
    pub window_ms: u64,
    /// Worker threads per migration plan.
    pub migration_threads: usize,
    /// Version assumed for sessions that do not pick one.
    pub default_version: Option<String>,
    /// Identity assumed for sessions that do not authenticate.
    pub default_identity: Option<String>,
}

impl Default for PlatformConfig {
    fn default() -> PlatformConfig {
        PlatformConfig {
            data_dir: None,
            shards: 3,
            workers: 4,
            window_ms: 30_000,
            migration_threads: 2,
            default_version: None,
            default_identity: None,
        }
    }
}

/// A fully wired platform instance: event store, blob store, dispatcher and
/// the deployment/migration services.
pub struct Platform {
    store: Arc<EventStore>,
    blobs: Arc<dyn Hasher>,
    dispatcher: Arc<Dispatcher>,
    verifier: Arc<RuleVersionVerifier>,
    config: PlatformConfig,
    faults: Mutex<Vec<String>>,
}

impl Platform {
    pub fn new(config: PlatformConfig) -> Result<Arc<Platform>, PlatformError> {
        let (store, blobs): (Arc<EventStore>, Arc<dyn Hasher>) = match &config.data_dir {
            Some(dir) => (
                Arc::new(EventStore::open(&dir.join("events"))?),
                Arc::new(DirStore::open(dir.join("blobs"))?),
            ),
            None => (Arc::new(EventStore::in_memory()), Arc::new(MemStore::new())),
        };
        let dispatcher = Arc::new(Dispatcher::new(
            Arc::clone(&store),
            DispatcherConfig {
                workers: config.workers,
                window: Duration::from_millis(config.window_ms),
                ..DispatcherConfig::default()
            },
        ));
        let verifier = Arc::new(RuleVersionVerifier::new(
            Arc::clone(&store) as Arc<dyn QuerySource>
        ));
        let platform = Arc::new(Platform {
            store,
            blobs,
            dispatcher,
            verifier,
            config,
            faults: Mutex::new(Vec::new()),
        });
        platform.wire_services();
        platform.reactivate_ready_rules();
        Ok(platform)
    }

    /// Register the deployment pipeline: version events feed the module
    /// tracker, newly existing modules trigger migration plans and clause
    /// queues, and ready announcements turn rules live.
    fn wire_services(self: &Arc<Platform>) {
        // a version announcement carrying a local directory path deploys it
        let weak = Arc::downgrade(self);
        self.dispatcher
            .add_service(Kind::Fact, APP_VERSION, move |e| {
                let Some(platform) = weak.upgrade() else {
                    return;
                };
                if e.change <= 0 {
                    return;
                }
                let (Some(version), Some(Value::Str(dir))) = (e.key.as_str(), e.data.first())
                else {
                    platform.fault("app-version without a version key and path".into());
                    return;
                };
                let publish = platform.dispatcher.handle();
                if let Err(err) = deploy_dir(
                    platform.blobs.as_ref(),
                    version,
                    std::path::Path::new(dir),
                    |ev| publish.submit(ev),
                ) {
                    platform.fault(format!("deploy {version}: {err}"));
                }
            });

        let weak = Arc::downgrade(self);
        self.dispatcher
            .add_service(Kind::Fact, PERM_VERSIONS, move |e| {
                let Some(platform) = weak.upgrade() else {
                    return;
                };
                let publish = platform.dispatcher.handle();
                if let Err(err) = perm_tracker(&platform.store, e, |ev| publish.submit(ev)) {
                    platform.fault(format!("perm-tracker: {err}"));
                }
            });

        let weak = Arc::downgrade(self);
        self.dispatcher
            .add_service(Kind::Fact, PERMS_EXIST, move |e| {
                let Some(platform) = weak.upgrade() else {
                    return;
                };
                if let Err(err) = platform.migrate_new_perms(e) {
                    platform.fault(format!("rule-migrator: {err}"));
                }
                let env = platform.migration_env();
                let publish = platform.dispatcher.handle();
                if let Err(err) = clause_migrator(&env, e, |ev| publish.submit(ev)) {
                    platform.fault(format!("clause-migrator: {err}"));
                }
            });

        let weak = Arc::downgrade(self);
        self.dispatcher
            .add_service(Kind::Fact, RULE_READY, move |e| {
                let Some(platform) = weak.upgrade() else {
                    return;
                };
                if e.change <= 0 {
                    return;
                }
                let Some(Value::Str(rule_name)) = e.data.first() else {
                    platform.fault("rule-ready without a rule name".into());
                    return;
                };
                if let Err(err) = platform.activate(rule_name) {
                    platform.fault(format!("activate {rule_name}: {err}"));
                }
            });
    }

    /// On reopen of a durable store, everything announced ready in a prior
    /// run goes live again.
    fn reactivate_ready_rules(self: &Arc<Platform>) {
        let acc = accumulate_pattern(
            self.store.as_ref(),
            &EventPattern::new(Kind::Fact, RULE_READY, 0i64),
        );
        for e in acc.accumulated_events() {
            if let Some(Value::Str(rule_name)) = e.data.first() {
                if let Err(err) = self.activate(rule_name) {
                    self.fault(format!("reactivate {rule_name}: {err}"));
                }
            }
        }
    }

    fn activate(&self, rule_name: &str) -> Result<(), PlatformError> {
        let def = eval_symbol(self.blobs.as_ref(), rule_name).map_err(MigrateError::Publish)?;
        self.dispatcher.activate_rule(def)?;
        Ok(())
    }

    /// Build and execute the migration plan for freshly existing modules.
    /// Runs synchronously, so a drain of the dispatcher waits for the whole
    /// migration.
    fn migrate_new_perms(&self, e: &Event) -> Result<(), MigrateError> {
        if e.change <= 0 {
            return Ok(());
        }
        let Some(Value::List(refs)) = e.data.first() else {
            return Err(MigrateError::BadEvent("axiom/perms-exist"));
        };
        let perms: BTreeSet<PermRef> = refs
            .iter()
            .filter_map(|r| r.as_str())
            .filter(|r| r.starts_with(crate::permastore::MODULE_PREFIX))
            .map(|r| PermRef(r.to_owned()))
            .collect();
        let plan = build_plan(self.blobs.as_ref(), &perms, &e.writers, self.config.shards)?;
        let env = self.migration_env();
        let state_file = self.config.data_dir.as_ref().map(|dir| {
            let plans = dir.join("plans");
            let _ = std::fs::create_dir_all(&plans);
            let tag = crate::store::fnv1a(
                format!("{}:{}", e.key.canonical(), e.data[0].canonical()).as_bytes(),
            );
            plans.join(format!("plan-{tag:016x}.json"))
        });
        execute_plan(
            &plan,
            &env,
            self.config.migration_threads,
            state_file.as_deref(),
        )
    }

    pub fn migration_env(&self) -> MigrationEnv {
        MigrationEnv {
            hasher: Arc::clone(&self.blobs),
            store: Arc::clone(&self.store),
            dispatcher: Arc::clone(&self.dispatcher),
            db: self.store.spawn_endpoint(),
            publish: self.dispatcher.handle(),
        }
    }

    pub fn store(&self) -> &Arc<EventStore> {
        &self.store
    }

    pub fn blobs(&self) -> &Arc<dyn Hasher> {
        &self.blobs
    }

    pub fn dispatcher(&self) -> &Arc<Dispatcher> {
        &self.dispatcher
    }

    pub fn verifier(&self) -> &Arc<RuleVersionVerifier> {
        &self.verifier
    }

    pub fn config(&self) -> &PlatformConfig {
        &self.config
    }

    /// Submit an event for dispatch, stamping a fresh unique ID when the
    /// caller left it out.
    pub fn publish(&self, mut e: Event) {
        if e.ts == 0 {
            e.ts = unique_ts();
        }
        self.dispatcher.submit(e);
    }

    /// Wait for every submitted event, its cascade, and any migration it
    /// triggered to complete.
    pub fn drain(&self) {
        self.dispatcher.drain();
    }

    /// Deploy a version directory and run its migration to completion.
    pub fn deploy(&self, version: &str, dir: &Path) -> Result<DeployOutcome, MigrateError> {
        let publish = self.dispatcher.handle();
        let outcome = deploy_dir(self.blobs.as_ref(), version, dir, |e| publish.submit(e))?;
        self.drain();
        Ok(outcome)
    }

    /// Accumulated events for one `(kind, name, key)`.
    pub fn accumulated(&self, pattern: &EventPattern) -> Vec<Event> {
        accumulate_pattern(self.store.as_ref(), pattern).accumulated_events()
    }

    /// Module-name-to-hash translation table for one deployed version.
    pub fn translation_table(&self, version: &str) -> BTreeMap<String, String> {
        let mut table = BTreeMap::new();
        for e in self.accumulated(&EventPattern::new(Kind::Fact, PERM_VERSIONS, version)) {
            if let Some(Value::Map(code_map)) = e.data.first() {
                for (name, hash) in code_map {
                    if let Value::Str(hash) = hash {
                        table.insert(name.clone(), hash.clone());
                    }
                }
            }
        }
        table
    }

    fn fault(&self, message: String) {
        self.faults.lock().unwrap().push(message);
    }

    /// Service and engine faults recorded since the last call.
    pub fn take_faults(&self) -> Vec<String> {
        let mut faults = std::mem::take(&mut *self.faults.lock().unwrap());
        faults.extend(self.dispatcher.take_faults());
        faults
    }
}

#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    /// TCP port; 0 picks an ephemeral one.
    pub port: u16,
    #[serde(flatten)]
    pub platform: PlatformConfig,
}

/// A running TCP server speaking the newline-delimited JSON protocol.
pub struct Server {
    platform: Arc<Platform>,
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    accept_thread: Option<std::thread::JoinHandle<()>>,
}

pub fn serve(config: ServerConfig) -> Result<Server, PlatformError> {
    let platform = Platform::new(config.platform)?;
    serve_on(platform, config.port)
}

/// Serve an already-built platform (lets tests seed state first).
pub fn serve_on(platform: Arc<Platform>, port: u16) -> Result<Server, PlatformError> {
    let listener = TcpListener::bind(("127.0.0.1", port))?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let shutdown = Arc::new(AtomicBool::new(false));
    let accept_platform = Arc::clone(&platform);
    let accept_shutdown = Arc::clone(&shutdown);
    let accept_thread = std::thread::Builder::new()
        .name("mip-accept".into())
        .spawn(move || loop {
            if accept_shutdown.load(Ordering::SeqCst) {
                return;
            }
            match listener.accept() {
                Ok((stream, _)) => {
                    let platform = Arc::clone(&accept_platform);
                    let shutdown = Arc::clone(&accept_shutdown);
                    std::thread::Builder::new()
                        .name("mip-session".into())
                        .spawn(move || {
                            let _ = run_session(platform, stream, shutdown);
                        })
                        .expect("spawn session");
                }
                Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    std::thread::sleep(Duration::from_millis(10));
                }
                Err(_) => return,
            }
        })
        .expect("spawn accept loop");
    Ok(Server {
        platform,
        addr,
        shutdown,
        accept_thread: Some(accept_thread),
    })
}

impl Server {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn platform(&self) -> &Arc<Platform> {
        &self.platform
    }

    pub fn shutdown(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        if let Some(handle) = self.accept_thread.take() {
            let _ = handle.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.shutdown();
    }
}

struct SessionState {
    gateway: GatewaySession,
    table: BTreeMap<String, String>,
    subs: Mutex<Vec<(String, Value)>>,
    sent: Mutex<HashSet<String>>,
    out: mpsc::Sender<String>,
    alive: AtomicBool,
}

impl SessionState {
    /// Deliver one stored or live event if the session registered for it,
    /// the gateway admits it, and it has not already been sent.
    fn offer(&self, e: &Event) {
        if !self.alive.load(Ordering::SeqCst) || e.kind != Kind::Fact {
            return;
        }
        let registered = self
            .subs
            .lock()
            .unwrap()
            .iter()
            .any(|(name, key)| *name == e.name && *key == e.key);
        if !registered || !self.gateway.filter_server_to_client(e) {
            return;
        }
        if !self.sent.lock().unwrap().insert(e.dedup_key()) {
            return;
        }
        let outbound = translate_names(e, &self.table, Direction::ToClient);
        if self.out.send(outbound.to_wire()).is_err() {
            self.alive.store(false, Ordering::SeqCst);
        }
    }
}

fn diagnostic(message: &str) -> String {
    crate::value::canonical_json(&serde_json::json!({ "kind": "err", "error": message }))
}

fn run_session(
    platform: Arc<Platform>,
    stream: TcpStream,
    shutdown: Arc<AtomicBool>,
) -> std::io::Result<()> {
    stream.set_nodelay(true).ok();
    stream
        .set_read_timeout(Some(Duration::from_millis(100)))
        .ok();
    let mut reader = BufReader::new(stream.try_clone()?);

    // Writer thread decouples slow clients from dispatcher workers.
    let (out_tx, out_rx) = mpsc::channel::<String>();
    let mut write_half = stream;
    let writer = std::thread::Builder::new()
        .name("mip-session-writer".into())
        .spawn(move || {
            for line in out_rx {
                if write_half.write_all(line.as_bytes()).is_err() {
                    return;
                }
                if write_half.write_all(b"\n").is_err() {
                    return;
                }
                let _ = write_half.flush();
            }
        })
        .expect("spawn session writer");

    // An optional hello frame carries connection parameters.
    let mut meta = RequestMeta::default();
    let mut held_line: Option<String> = None;
    if let Some(line) = read_line(&mut reader, &shutdown)? {
        match serde_json::from_str::<serde_json::Value>(&line) {
            Ok(json) if json["kind"] == "hello" => {
                let read_map = |field: &str| -> BTreeMap<String, String> {
                    json[field]
                        .as_object()
                        .map(|obj| {
                            obj.iter()
                                .filter_map(|(k, v)| v.as_str().map(|s| (k.clone(), s.to_owned())))
                                .collect()
                        })
                        .unwrap_or_default()
                };
                meta.params = read_map("params");
                meta.cookies = read_map("cookies");
            }
            _ => held_line = Some(line),
        }
    }

    let identity = authenticate(&meta).or_else(|| platform.config().default_identity.clone());
    let version = select_version(&meta, platform.config().default_version.as_deref());
    let table = version
        .as_deref()
        .map(|v| platform.translation_table(v))
        .unwrap_or_default();
    let session = Arc::new(SessionState {
        gateway: GatewaySession::new(
            Arc::clone(platform.store()) as Arc<dyn QuerySource>,
            Arc::clone(platform.verifier()),
            identity.clone(),
            version,
        ),
        table,
        subs: Mutex::new(Vec::new()),
        sent: Mutex::new(HashSet::new()),
        out: out_tx.clone(),
        alive: AtomicBool::new(true),
    });

    // Live feed: every non-duplicate stored event is offered to the session.
    let weak: Weak<SessionState> = Arc::downgrade(&session);
    platform.dispatcher().add_listener(move |e| {
        if let Some(session) = weak.upgrade() {
            session.offer(e);
        }
    });

    // First frame out: who the server thinks the client is.
    let _ = out_tx.send(Event::init(identity).to_wire());

    loop {
        let line = match held_line.take() {
            Some(line) => line,
            None => match read_line(&mut reader, &shutdown)? {
                Some(line) => line,
                None => break,
            },
        };
        if line.trim().is_empty() {
            continue;
        }
        let event = match Event::from_wire(&line) {
            Ok(event) => event,
            Err(err) => {
                // malformed frame: answer with a diagnostic and end the session
                let _ = out_tx.send(diagnostic(&err.to_string()));
                break;
            }
        };
        let event = translate_names(&event, &session.table, Direction::ToServer);
        let Some(event) = session.gateway.filter_client_to_server(&event) else {
            continue; // blocked silently
        };
        match event.kind {
            Kind::Reg => {
                session
                    .subs
                    .lock()
                    .unwrap()
                    .push((event.name.clone(), event.key.clone()));
                if event.get_existing {
                    for stored in platform.store().events_for(&EventPattern::new(
                        Kind::Fact,
                        &event.name,
                        event.key.clone(),
                    )) {
                        session.offer(&stored);
                    }
                }
            }
            Kind::Fact => {
                if event.ts <= 0 {
                    let _ = out_tx.send(diagnostic("fact events need a positive ts"));
                    continue;
                }
                platform.publish(event);
            }
            _ => {}
        }
    }
    session.alive.store(false, Ordering::SeqCst);
    // the writer exits when every sender is gone, including the session's
    drop(session);
    drop(out_tx);
    let _ = writer.join();
    Ok(())
}

fn read_line(
    reader: &mut BufReader<TcpStream>,
    shutdown: &AtomicBool,
) -> std::io::Result<Option<String>> {
    let mut line = String::new();
    loop {
        line.clear();
        match reader.read_line(&mut line) {
            Ok(0) => return Ok(None),
            Ok(_) => return Ok(Some(line.trim_end().to_owned())),
            Err(ref e)
                if e.kind() == std::io::ErrorKind::WouldBlock
                    || e.kind() == std::io::ErrorKind::TimedOut =>
            {
                if shutdown.load(Ordering::SeqCst) {
                    return Ok(None);
                }
            }
            Err(e) => return Err(e),
        }
    }
}

pub struct BenchReport {
    pub runs: usize,
    pub one_link_mean_ms: f64,
    pub two_link_mean_ms: f64,
}

impl std::fmt::Display for BenchReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "latency over {} runs:", self.runs)?;
        writeln!(f, "  1-link path mean: {:.3} ms", self.one_link_mean_ms)?;
        write!(f, "  2-link path mean: {:.3} ms", self.two_link_mean_ms)
    }
}

/// Measure end-to-end dispatch latency of a single-link derivation against
/// a two-link join on this host. Absolute numbers are hardware-bound; the
/// stable property is that the two-link path costs more.
pub fn bench_latency(runs: usize) -> Result<BenchReport, PlatformError> {
    use crate::rules::{Expr, FactPattern, Guard, Link, RuleDef, RuleKind};
    let platform = Platform::new(PlatformConfig {
        workers: 2,
        ..PlatformConfig::default()
    })?;
    let one_link = RuleDef {
        kind: RuleKind::Rule,
        name: "bench/echo".into(),
        links: vec![Link {
            source: FactPattern::new("bench/ping", Expr::var("k"), vec![Expr::var("v")]),
            guards: vec![Guard::ByAnyone],
        }],
        output: FactPattern::new("bench/echo", Expr::var("k"), vec![Expr::var("v")]),
    };
    let two_link = RuleDef {
        kind: RuleKind::Rule,
        name: "bench/join".into(),
        links: vec![
            Link {
                source: FactPattern::new("bench/seed", Expr::var("s"), vec![Expr::var("t")]),
                guards: vec![Guard::ByAnyone],
            },
            Link {
                source: FactPattern::new("bench/pong", Expr::var("t"), vec![Expr::var("v")]),
                guards: vec![Guard::ByAnyone],
            },
        ],
        output: FactPattern::new("bench/join", Expr::var("s"), vec![Expr::var("v")]),
    };
    platform.dispatcher().activate_rule(one_link)?;
    platform.dispatcher().activate_rule(two_link)?;
    platform.publish(Event::fact("bench/seed", "s", vec!["t".into()]));
    platform.drain();

    let mut one_total = Duration::ZERO;
    let mut two_total = Duration::ZERO;
    for i in 0..runs {
        let start = std::time::Instant::now();
        platform.publish(Event::fact(
            "bench/ping",
            format!("k{i}"),
            vec![i64::try_from(i).unwrap().into()],
        ));
        platform.drain();
        one_total += start.elapsed();

        let start = std::time::Instant::now();
        platform.publish(Event::fact(
            "bench/pong",
            "t",
            vec![i64::try_from(i).unwrap().into()],
        ));
        platform.drain();
        two_total += start.elapsed();
    }
    Ok(BenchReport {
        runs,
        one_link_mean_ms: one_total.as_secs_f64() * 1000.0 / runs as f64,
        two_link_mean_ms: two_total.as_secs_f64() * 1000.0 / runs as f64,
    })
}
