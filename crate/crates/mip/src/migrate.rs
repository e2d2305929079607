//! Version deployment and data migration.
//!
//! Deploying a directory publishes its rule modules and static files as an
//! `axiom/perm-versions` event. A tracker counts how many versions reference
//! each module; the first reference triggers a migration: a dependency-
//! ordered plan of tasks that declare buffering queues for the rule's input
//! facts, replay stored history through the rule's links shard by shard, and
//! finally announce `axiom/rule-ready`, at which point the rule goes live
//! and its buffered events drain. Replayed work is idempotent because
//! product IDs are deterministic and the store swallows duplicates.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{DispatchHandle, Dispatcher, Emitter, EngineError, Matcher};
use crate::events::{Event, Kind};
use crate::interset::{universe, Interset};
use crate::permastore::{
    eval_symbol, hash_all, hash_static_files, module_publics, Hasher, PermRef, PublishError,
};
use crate::rules::{CompiledRule, RuleDef, RuleError, RuleModule};
use crate::store::{EventStore, QueryChan, StoreError};
use crate::value::Value;

pub const APP_VERSION: &str = "axiom/app-version";
pub const PERM_VERSIONS: &str = "axiom/perm-versions";
pub const PERMS_EXIST: &str = "axiom/perms-exist";
pub const RULE_READY: &str = "axiom/rule-ready";

/// Namespace the platform itself writes under.
pub const PLATFORM_NS: &str = "axiom";

#[derive(Debug, Error)]
pub enum MigrateError {
    #[error(transparent)]
    Publish(#[from] PublishError),
    #[error(transparent)]
    Rule(#[from] RuleError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Blob(#[from] crate::permastore::StoreError),
    #[error("malformed {0} event")]
    BadEvent(&'static str),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Deterministic event ID derived from a tag string: replaying the same
/// logical publication always lands on the same ID, so the store swallows
/// the repeat.
pub fn deterministic_ts(tag: &str) -> i64 {
    (crate::store::fnv1a(tag.as_bytes()) % ((1u64 << 48) - 1)) as i64 + 1
}

/// Track how many deployed versions reference each rule module, and publish
/// `axiom/perms-exist` whenever modules come into existence (their counter
/// crosses zero upward) or vanish (it returns to zero).
pub fn perm_tracker(
    store: &EventStore,
    e: &Event,
    mut publish: impl FnMut(Event),
) -> Result<(), MigrateError> {
    let Some(Value::Map(code_map)) = e.data.first() else {
        return Err(MigrateError::BadEvent("axiom/perm-versions"));
    };
    let refs: BTreeSet<&str> = code_map.values().filter_map(Value::as_str).collect();
    let mut crossed: Vec<&str> = Vec::new();
    for r in refs {
        let new = store.counter_add(&format!("/perms/{r}"), e.change)?;
        let came_alive = e.change > 0 && new == e.change;
        let died = e.change < 0 && new == 0;
        if came_alive || died {
            crossed.push(r);
        }
    }
    if crossed.is_empty() {
        return Ok(());
    }
    let direction = if e.change > 0 { 1 } else { -1 };
    let data = vec![Value::List(
        crossed.iter().map(|r| Value::from(*r)).collect(),
    )];
    let tag = format!(
        "{PERMS_EXIST}:{}:{}:{}:{direction}",
        e.key.canonical(),
        Value::List(data[0].as_list().unwrap().to_vec()).canonical(),
        e.ts,
    );
    publish(
        Event::fact(PERMS_EXIST, e.key.clone(), data)
            .with_ts(deterministic_ts(&tag))
            .with_change(direction)
            .with_writers(e.writers.clone())
            .with_readers(e.readers.clone()),
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TaskKind {
    /// Declare the queue that buffers events for one link of a rule while
    /// the rule migrates.
    FactDeclarer { rule: String, link: usize },
    /// Replay one shard of the link-0 facts through the rule's emitter.
    InitialMigrator {
        rule: String,
        shard: usize,
        shards: usize,
    },
    /// Replay one shard of a continuation link's facts through a matcher.
    LinkMigrator {
        rule: String,
        link: usize,
        shard: usize,
        shards: usize,
    },
    /// Announce the rule is fully migrated.
    EndNotifier { rule: String, writers: Interset },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: usize,
    pub kind: TaskKind,
    pub deps: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub tasks: Vec<Task>,
    pub ready: bool,
}

impl Plan {
    /// Stable text rendering of the plan, with rule names reduced to their
    /// local part. One line per task plus the final ready mark.
    pub fn trace(&self) -> String {
        fn local(name: &str) -> &str {
            name.split_once('/').map(|(_, l)| l).unwrap_or(name)
        }
        fn deps(deps: &[usize]) -> String {
            let items: Vec<String> = deps.iter().map(usize::to_string).collect();
            format!("[{}]", items.join(" "))
        }
        let mut out = String::new();
        for task in &self.tasks {
            match &task.kind {
                TaskKind::FactDeclarer { rule, link } => {
                    let _ = writeln!(
                        out,
                        "{} fact-declarer {} {} deps {}",
                        task.id,
                        local(rule),
                        link,
                        deps(&task.deps)
                    );
                }
                TaskKind::InitialMigrator {
                    rule,
                    shard,
                    shards,
                } => {
                    let _ = writeln!(
                        out,
                        "{} initial-migrator {} {} {} deps {}",
                        task.id,
                        local(rule),
                        shard,
                        shards,
                        deps(&task.deps)
                    );
                }
                TaskKind::LinkMigrator {
                    rule,
                    link,
                    shard,
                    shards,
                } => {
                    let _ = writeln!(
                        out,
                        "{} link-migrator {} {} {} {} deps {}",
                        task.id,
                        local(rule),
                        link,
                        shard,
                        shards,
                        deps(&task.deps)
                    );
                }
                TaskKind::EndNotifier { rule, .. } => {
                    let _ = writeln!(
                        out,
                        "{} migration-end-notifier {} deps {}",
                        task.id,
                        local(rule),
                        deps(&task.deps)
                    );
                }
            }
        }
        if self.ready {
            out.push_str("mark-as-ready\n");
        }
        out
    }
}

/// Rules defined in a published module, excluding clauses.
pub fn extract_version_rules(
    hasher: &dyn Hasher,
    perm: &PermRef,
) -> Result<Vec<RuleDef>, PublishError> {
    Ok(module_publics(hasher, perm)?
        .into_values()
        .filter(|def| !def.links[0].source.name.ends_with('?'))
        .collect())
}

/// Clauses defined in a published module: definitions whose source fact is
/// a query (ends with `?`).
pub fn extract_version_clauses(
    hasher: &dyn Hasher,
    perm: &PermRef,
) -> Result<Vec<RuleDef>, PublishError> {
    Ok(module_publics(hasher, perm)?
        .into_values()
        .filter(|def| def.links[0].source.name.ends_with('?'))
        .collect())
}

/// Order rules so that a rule consuming another's derived facts migrates
/// after it. Independent rules keep a stable lexicographic order.
pub fn sort_rules(mut rules: Vec<RuleDef>) -> Vec<RuleDef> {
    rules.sort_by(|a, b| a.name.cmp(&b.name));
    let mut ordered: Vec<RuleDef> = Vec::with_capacity(rules.len());
    let mut remaining = rules;
    while !remaining.is_empty() {
        let ready_idx = remaining.iter().position(|candidate| {
            // ready when no other remaining rule produces a fact it consumes
            !candidate.links.iter().any(|link| {
                remaining.iter().any(|other| {
                    other.name != candidate.name && other.output.name == link.source.name
                })
            })
        });
        match ready_idx {
            Some(i) => ordered.push(remaining.remove(i)),
            None => {
                // dependency cycle between rules: fall back to name order
                ordered.append(&mut remaining);
            }
        }
    }
    ordered
}

/// Build the migration plan for a set of freshly published modules: for
/// each rule, in topological order, declare link 0, run the sharded initial
/// migrators, then per continuation link declare and run the sharded link
/// migrators, and finally notify completion. Task IDs are ordinal and a
/// task's dependencies always precede it.
pub fn build_plan(
    hasher: &dyn Hasher,
    perms: &BTreeSet<PermRef>,
    writers: &Interset,
    shards: usize,
) -> Result<Plan, MigrateError> {
    let mut rules: Vec<RuleDef> = Vec::new();
    for perm in perms {
        rules.extend(extract_version_rules(hasher, perm)?);
    }
    let rules = sort_rules(rules);

    let mut tasks: Vec<Task> = Vec::new();
    let mut next_id = 1usize;
    let mut push = |kind: TaskKind, deps: Vec<usize>, tasks: &mut Vec<Task>| -> usize {
        let id = next_id;
        next_id += 1;
        tasks.push(Task { id, kind, deps });
        id
    };

    let mut prev_end: Option<usize> = None;
    for rule in &rules {
        let compiled = CompiledRule::compile(rule.clone())?;
        let declarer0 = push(
            TaskKind::FactDeclarer {
                rule: rule.name.clone(),
                link: 0,
            },
            prev_end.into_iter().collect(),
            &mut tasks,
        );
        let mut phase: Vec<usize> = (0..shards)
            .map(|shard| {
                push(
                    TaskKind::InitialMigrator {
                        rule: rule.name.clone(),
                        shard,
                        shards,
                    },
                    vec![declarer0],
                    &mut tasks,
                )
            })
            .collect();
        for link in 1..compiled.link_count() {
            let declarer = push(
                TaskKind::FactDeclarer {
                    rule: rule.name.clone(),
                    link,
                },
                phase.clone(),
                &mut tasks,
            );
            phase = (0..shards)
                .map(|shard| {
                    push(
                        TaskKind::LinkMigrator {
                            rule: rule.name.clone(),
                            link,
                            shard,
                            shards,
                        },
                        vec![declarer],
                        &mut tasks,
                    )
                })
                .collect();
        }
        prev_end = Some(push(
            TaskKind::EndNotifier {
                rule: rule.name.clone(),
                writers: writers.clone(),
            },
            phase,
            &mut tasks,
        ));
    }
    Ok(Plan { tasks, ready: true })
}

/// Everything a migration task needs to run.
pub struct MigrationEnv {
    pub hasher: Arc<dyn Hasher>,
    pub store: Arc<EventStore>,
    pub dispatcher: Arc<Dispatcher>,
    pub db: QueryChan,
    pub publish: DispatchHandle,
}

impl MigrationEnv {
    fn resolve(&self, rule: &str) -> Result<Arc<CompiledRule>, MigrateError> {
        let def = eval_symbol(self.hasher.as_ref(), rule)?;
        Ok(Arc::new(CompiledRule::compile(def)?))
    }
}

/// Declare the buffering queue for one link of a rule, so facts arriving
/// during migration wait for the rule instead of being lost. Idempotent.
pub fn run_fact_declarer(env: &MigrationEnv, rule: &str, link: usize) -> Result<(), MigrateError> {
    let compiled = env.resolve(rule)?;
    let source = compiled.link_source(link).name.clone();
    env.dispatcher
        .declare_buffer(format!("fact-for-rule/{rule}!{link}"), Kind::Fact, source);
    Ok(())
}

/// Replay one shard of the rule's link-0 facts through its emitter, writing
/// each product with an acknowledged put.
pub fn run_initial_migrator(
    env: &MigrationEnv,
    rule: &str,
    shard: usize,
    shards: usize,
) -> Result<(), MigrateError> {
    let compiled = env.resolve(rule)?;
    let emitter = Emitter::new(Arc::clone(&compiled));
    let source = compiled.link_source(0).name.clone();
    let mut scanned = Vec::new();
    env.store.scan(&source, shard, shards, |e| scanned.push(e));
    let sink = env.store.write_sink();
    for fact in scanned {
        for product in emitter.emit(&fact) {
            sink.submit(product)?;
        }
    }
    Ok(())
}

/// Replay one shard of a continuation link's facts, matching each against
/// the rule tuples stored by the previous phase.
pub fn run_link_migrator(
    env: &MigrationEnv,
    rule: &str,
    link: usize,
    shard: usize,
    shards: usize,
) -> Result<(), MigrateError> {
    let compiled = env.resolve(rule)?;
    let matcher = Matcher::new(Arc::clone(&compiled), link, env.db.clone());
    let source = compiled.link_source(link).name.clone();
    let mut scanned = Vec::new();
    env.store.scan(&source, shard, shards, |e| scanned.push(e));
    let sink = env.store.write_sink();
    for fact in scanned {
        for product in matcher.apply(&fact)? {
            sink.submit(product)?;
        }
    }
    Ok(())
}

/// Announce that a rule has been fully migrated. The event ID derives from
/// the rule name, so repeated notifications deduplicate at the store.
pub fn run_end_notifier(env: &MigrationEnv, rule: &str, writers: &Interset) {
    env.publish.submit(
        Event::fact(RULE_READY, 0i64, vec![Value::from(rule)])
            .with_ts(deterministic_ts(&format!("{RULE_READY}:{rule}")))
            .with_change(1)
            .with_writers(writers.clone())
            .with_readers(universe()),
    );
}

/// Run one task of a migration plan.
pub fn run_task(env: &MigrationEnv, kind: &TaskKind) -> Result<(), MigrateError> {
    match kind {
        TaskKind::FactDeclarer { rule, link } => run_fact_declarer(env, rule, *link),
        TaskKind::InitialMigrator {
            rule,
            shard,
            shards,
        } => run_initial_migrator(env, rule, *shard, *shards),
        TaskKind::LinkMigrator {
            rule,
            link,
            shard,
            shards,
        } => run_link_migrator(env, rule, *link, *shard, *shards),
        TaskKind::EndNotifier { rule, writers } => {
            run_end_notifier(env, rule, writers);
            Ok(())
        }
    }
}

#[derive(Default, Serialize, Deserialize)]
struct PlanState {
    completed: BTreeSet<usize>,
}

/// Execute a plan with a small worker pool, honoring task dependencies.
/// Completed task IDs are recorded in `state_file` (when given) so a
/// re-executed plan skips work it already did.
pub fn execute_plan(
    plan: &Plan,
    env: &MigrationEnv,
    threads: usize,
    state_file: Option<&Path>,
) -> Result<(), MigrateError> {
    if !plan.ready {
        return Ok(());
    }
    let mut state = match state_file {
        Some(path) if path.exists() => {
            let text = std::fs::read_to_string(path).map_err(|source| MigrateError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            serde_json::from_str(&text).unwrap_or_default()
        }
        _ => PlanState::default(),
    };
    let threads = threads.max(1);
    while state.completed.len() < plan.tasks.len() {
        let runnable: Vec<&Task> = plan
            .tasks
            .iter()
            .filter(|t| {
                !state.completed.contains(&t.id)
                    && t.deps.iter().all(|d| state.completed.contains(d))
            })
            .take(threads)
            .collect();
        if runnable.is_empty() {
            // dependency on a task that can never complete
            return Err(MigrateError::BadEvent("plan"));
        }
        let results: Mutex<Vec<(usize, Result<(), MigrateError>)>> = Mutex::new(Vec::new());
        std::thread::scope(|scope| {
            for task in &runnable {
                let results = &results;
                scope.spawn(move || {
                    let outcome = run_task(env, &task.kind);
                    results.lock().unwrap().push((task.id, outcome));
                });
            }
        });
        for (id, outcome) in results.into_inner().unwrap() {
            outcome?;
            state.completed.insert(id);
        }
        if let Some(path) = state_file {
            let text = serde_json::to_string(&state).expect("plan state serializes");
            std::fs::write(path, text).map_err(|source| MigrateError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        }
    }
    Ok(())
}

/// React to newly existing modules: declare the input queues of every
/// clause they define and announce each clause ready. Clauses replay no
/// history, so there is no plan to run.
pub fn clause_migrator(
    env: &MigrationEnv,
    e: &Event,
    mut publish: impl FnMut(Event),
) -> Result<(), MigrateError> {
    if e.change <= 0 {
        return Ok(());
    }
    let Some(Value::List(refs)) = e.data.first() else {
        return Err(MigrateError::BadEvent("axiom/perms-exist"));
    };
    for r in refs {
        let Some(name) = r.as_str() else { continue };
        for clause in extract_version_clauses(env.hasher.as_ref(), &PermRef(name.to_owned()))? {
            let compiled = CompiledRule::compile(clause.clone())?;
            for link in 0..compiled.link_count() {
                env.dispatcher.declare_buffer(
                    format!("fact-for-rule/{}!{link}", clause.name),
                    Kind::Fact,
                    compiled.link_source(link).name.clone(),
                );
            }
            publish(
                Event::fact(RULE_READY, 0i64, vec![Value::from(clause.name.as_str())])
                    .with_ts(deterministic_ts(&format!("{RULE_READY}:{}", clause.name)))
                    .with_change(1)
                    .with_writers(e.writers.clone())
                    .with_readers(universe()),
            );
        }
    }
    Ok(())
}

#[derive(Debug)]
pub struct DeployOutcome {
    pub code_map: BTreeMap<String, PermRef>,
    pub static_map: BTreeMap<String, PermRef>,
    pub event: Event,
}

/// Publish the modules under `<dir>/src` and the files under
/// `<dir>/resources/public` as one `axiom/perm-versions` event for the given
/// version. Re-deploying an identical directory publishes an identical
/// event, which the store then swallows.
pub fn deploy_dir(
    hasher: &dyn Hasher,
    version: &str,
    dir: &Path,
    mut publish: impl FnMut(Event),
) -> Result<DeployOutcome, MigrateError> {
    let src = dir.join("src");
    if !src.is_dir() {
        return Err(MigrateError::Io {
            path: src,
            source: std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "a deployable directory needs a src/ subdirectory",
            ),
        });
    }
    let mut modules: Vec<RuleModule> = Vec::new();
    {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&src)
            .map_err(|source| MigrateError::Io {
                path: src.clone(),
                source,
            })?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
            .collect();
        paths.sort();
        for path in paths {
            let text = std::fs::read_to_string(&path).map_err(|source| MigrateError::Io {
                path: path.clone(),
                source,
            })?;
            let module = RuleModule::parse(&text).map_err(|source| {
                MigrateError::Publish(PublishError::Malformed {
                    module: path.display().to_string(),
                    source,
                })
            })?;
            modules.push(module);
        }
    }
    let code_map = hash_all(hasher, &modules)?;
    let static_map = hash_static_files(hasher, &dir.join("resources/public"))?;

    let code_value = Value::Map(
        code_map
            .iter()
            .map(|(name, r)| (name.clone(), Value::from(r.as_str())))
            .collect(),
    );
    let static_value = Value::Map(
        static_map
            .iter()
            .map(|(path, r)| (path.clone(), Value::from(r.as_str())))
            .collect(),
    );
    let tag = format!(
        "{PERM_VERSIONS}:{version}:{}:{}",
        code_value.canonical(),
        static_value.canonical()
    );
    let event = Event::fact(PERM_VERSIONS, version, vec![code_value, static_value])
        .with_ts(deterministic_ts(&tag))
        .with_change(1)
        .with_writers(Interset::singleton(PLATFORM_NS))
        .with_readers(universe());
    publish(event.clone());
    Ok(DeployOutcome {
        code_map,
        static_map,
        event,
    })
}
