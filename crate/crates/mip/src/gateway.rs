//! The trust boundary between clients and the information tier.
//!
//! Instead of asking *which users* belong to a readers- or writers-set (an
//! unanswerable question over symbolic sets), the gateway asks whether one
//! authenticated user belongs to a given set. Group membership is defined by
//! derived facts: user `u` is in group `[g, args...]` exactly when the
//! accumulated facts named `g`, keyed by `u`, contain `args` with a positive
//! total — considering only facts written by `g`'s own namespace (so nobody
//! can forge membership) and readable by the bare user (so the lookup itself
//! leaks nothing).
//!
//! On top of the membership predicate sit the two filters every session
//! event crosses: outbound events must be readable by the user and traceable
//! to a trusted writer; inbound facts must be attributed to the user and are
//! patched to stay readable by their own author.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::events::{namespace_of, Event, Kind};
use crate::interset::{subset, union, GroupTerm, Interset};
use crate::permastore::{Hasher, PermRef, StoreError};
use crate::store::{accumulate_pattern, EventPattern, QuerySource};
use crate::value::Value;

/// Membership test for one authenticated user, with per-group caching.
/// An unauthenticated session (no user) belongs to no set at all.
pub struct IdentityPred {
    source: Arc<dyn QuerySource>,
    user: Option<String>,
    cache: Mutex<HashMap<String, HashMap<Vec<Value>, i64>>>,
}

impl IdentityPred {
    pub fn new(source: Arc<dyn QuerySource>, user: Option<String>) -> IdentityPred {
        IdentityPred {
            source,
            user,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn user(&self) -> Option<&str> {
        self.user.as_deref()
    }

    /// Does the user belong to the given set? True when some canonical
    /// component holds: every identity term names the user and every group
    /// term is backed by a positive accumulated membership fact.
    pub fn contains(&self, s: &Interset) -> bool {
        let Some(user) = &self.user else {
            return false;
        };
        s.components().iter().any(|component| {
            component.iter().all(|term| match term {
                GroupTerm::Identity(id) => id == user,
                GroupTerm::Group { rule, args } => self.member_of(rule, args),
            })
        })
    }

    fn member_of(&self, group_rule: &str, args: &[Value]) -> bool {
        let user = self.user.as_deref().expect("checked by contains");
        let mut cache = self.cache.lock().unwrap();
        let totals = cache.entry(group_rule.to_owned()).or_insert_with(|| {
            let events = self.source.fetch(&EventPattern::new(
                Kind::Fact,
                group_rule,
                Value::from(user),
            ));
            let mut acc = crate::events::Accumulator::new();
            for e in &events {
                // Integrity: only facts produced by the group's own rule
                // count; a client cannot pose as the rule's namespace.
                if !subset(&e.writers, &Interset::singleton(namespace_of(group_rule))) {
                    continue;
                }
                // Confidentiality bootstrap: only facts the bare user could
                // read anyway, judged without any group lookups.
                if !bare_member(&e.readers, user) {
                    continue;
                }
                acc.accumulate(e);
            }
            acc.entries()
                .map(|entry| (entry.base.data.clone(), entry.total_change))
                .collect()
        });
        totals.get(args).copied().unwrap_or(0) > 0
    }
}

/// Would `user` be in the set judging by identity terms alone? Group terms
/// cannot be verified without lookups, so they fail here.
fn bare_member(s: &Interset, user: &str) -> bool {
    s.components().iter().any(|component| {
        component.iter().all(|term| match term {
            GroupTerm::Identity(id) => id == user,
            GroupTerm::Group { .. } => false,
        })
    })
}

/// Answers whether a writers-set is one of the rule hashes belonging to a
/// deployed application version. Results are cached per version.
pub struct RuleVersionVerifier {
    source: Arc<dyn QuerySource>,
    cache: Mutex<HashMap<String, HashSet<String>>>,
}

impl RuleVersionVerifier {
    pub fn new(source: Arc<dyn QuerySource>) -> RuleVersionVerifier {
        RuleVersionVerifier {
            source,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn verify(&self, version: &str, writers: &Interset) -> bool {
        let mut cache = self.cache.lock().unwrap();
        let hashes = cache.entry(version.to_owned()).or_insert_with(|| {
            let acc = accumulate_pattern(
                self.source.as_ref(),
                &EventPattern::new(Kind::Fact, "axiom/perm-versions", version),
            );
            let mut hashes = HashSet::new();
            for e in acc.accumulated_events() {
                if let Some(Value::Map(code_map)) = e.data.first() {
                    hashes.extend(
                        code_map
                            .values()
                            .filter_map(|v| v.as_str().map(str::to_owned)),
                    );
                }
            }
            hashes
        });
        crate::interset::enum_groups(writers)
            .iter()
            .any(|term| matches!(term, GroupTerm::Identity(id) if hashes.contains(id)))
    }
}

/// One authenticated session's view of the trust boundary.
pub struct GatewaySession {
    identity: Option<String>,
    app_version: Option<String>,
    ipred: IdentityPred,
    verifier: Arc<RuleVersionVerifier>,
}

impl GatewaySession {
    pub fn new(
        source: Arc<dyn QuerySource>,
        verifier: Arc<RuleVersionVerifier>,
        identity: Option<String>,
        app_version: Option<String>,
    ) -> GatewaySession {
        GatewaySession {
            ipred: IdentityPred::new(source, identity.clone()),
            identity,
            app_version,
            verifier,
        }
    }

    pub fn identity(&self) -> Option<&str> {
        self.identity.as_deref()
    }

    pub fn identity_pred(&self) -> &IdentityPred {
        &self.ipred
    }

    /// May this fact event be delivered to the client? The writers-set must
    /// be trustworthy from the client's point of view (written by the user,
    /// by the application version in use, or self-verified by the event's
    /// own namespace) and the readers-set must admit the user.
    pub fn filter_server_to_client(&self, e: &Event) -> bool {
        if e.kind != Kind::Fact {
            return false;
        }
        let integrity = self.ipred.contains(&e.writers)
            || self
                .app_version
                .as_deref()
                .is_some_and(|ver| self.verifier.verify(ver, &e.writers))
            || subset(&e.writers, &Interset::singleton(namespace_of(&e.name)));
        integrity && self.ipred.contains(&e.readers)
    }

    /// Screen an event published by the client. Facts must be attributed to
    /// the user; a fact whose readers-set would exclude its own author gets
    /// the author's singleton set added. Registrations must carry a name and
    /// a key. Anything else passes unchanged.
    pub fn filter_client_to_server(&self, e: &Event) -> Option<Event> {
        match e.kind {
            Kind::Fact => {
                if !self.ipred.contains(&e.writers) {
                    return None;
                }
                let mut out = e.clone();
                if !self.ipred.contains(&e.readers) {
                    let user = self.identity.as_deref()?;
                    out.readers = union(&e.readers, &Interset::singleton(user));
                }
                Some(out)
            }
            Kind::Reg => {
                if e.name.is_empty() || e.key == Value::Null {
                    return None;
                }
                Some(e.clone())
            }
            _ => Some(e.clone()),
        }
    }
}

/// Which way names are being translated across the gateway.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Source names to published hashes.
    ToServer,
    /// Published hashes back to source names.
    ToClient,
}

/// Rewrite the namespace of the event name and of every group term in the
/// readers- and writers-sets through the translation table (module name to
/// published hash). Unknown namespaces pass through untouched.
pub fn translate_names(e: &Event, table: &BTreeMap<String, String>, direction: Direction) -> Event {
    let lookup = |ns: &str| -> Option<String> {
        match direction {
            Direction::ToServer => table.get(ns).cloned(),
            Direction::ToClient => table
                .iter()
                .find(|(_, hash)| hash.as_str() == ns)
                .map(|(name, _)| name.clone()),
        }
    };
    let translate_name = |name: &str| -> String {
        match name.split_once('/') {
            Some((ns, local)) => match lookup(ns) {
                Some(new_ns) => format!("{new_ns}/{local}"),
                None => name.to_owned(),
            },
            None => name.to_owned(),
        }
    };
    let translate_set = |s: &Interset| -> Interset {
        let map_term = |term: &GroupTerm| -> GroupTerm {
            match term {
                GroupTerm::Identity(_) => term.clone(),
                GroupTerm::Group { rule, args } => GroupTerm::Group {
                    rule: translate_name(rule),
                    args: args.clone(),
                },
            }
        };
        match s {
            Interset::Simple(terms) => Interset::Simple(terms.iter().map(map_term).collect()),
            Interset::Union(components) => Interset::Union(
                components
                    .iter()
                    .map(|c| c.iter().map(map_term).collect())
                    .collect(),
            ),
        }
    };
    let mut out = e.clone();
    out.name = translate_name(&e.name);
    out.writers = translate_set(&e.writers);
    out.readers = translate_set(&e.readers);
    out
}

/// Connection metadata the authenticator and version selector read.
#[derive(Debug, Clone, Default)]
pub struct RequestMeta {
    pub params: BTreeMap<String, String>,
    pub cookies: BTreeMap<String, String>,
}

impl RequestMeta {
    pub fn with_param(mut self, key: &str, value: &str) -> RequestMeta {
        self.params.insert(key.to_owned(), value.to_owned());
        self
    }

    pub fn with_cookie(mut self, key: &str, value: &str) -> RequestMeta {
        self.cookies.insert(key.to_owned(), value.to_owned());
        self
    }
}

/// Development-grade authentication: trust the identity the connection
/// claims, reading the `_identity` parameter first and the `user_identity`
/// token second. Absent both, the session stays anonymous.
pub fn authenticate(meta: &RequestMeta) -> Option<String> {
    meta.params
        .get("_identity")
        .or_else(|| meta.cookies.get("user_identity"))
        .cloned()
}

/// Version selection: the `_ver` parameter wins, then the `app-version`
/// token, then the configured default.
pub fn select_version(meta: &RequestMeta, default: Option<&str>) -> Option<String> {
    meta.params
        .get("_ver")
        .or_else(|| meta.cookies.get("app-version"))
        .cloned()
        .or_else(|| default.map(str::to_owned))
}

#[derive(Debug, Error)]
pub enum StaticError {
    #[error("no such version: {0}")]
    NoSuchVersion(String),
    #[error("no such path: {0}")]
    NoSuchPath(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub struct StaticFile {
    pub bytes: Vec<u8>,
    pub content_type: &'static str,
}

pub fn content_type_of(path: &str) -> &'static str {
    match path.rsplit_once('.').map(|(_, ext)| ext) {
        Some("html") | Some("htm") => "text/html",
        Some("css") => "text/css",
        Some("js") => "text/javascript",
        Some("json") => "application/json",
        Some("png") => "image/png",
        Some("jpg") | Some("jpeg") => "image/jpeg",
        Some("svg") => "image/svg+xml",
        Some("txt") => "text/plain",
        _ => "application/octet-stream",
    }
}

/// Serve one static file for an application version: look up the version's
/// static map and fetch the blob behind the path's hash.
pub fn static_content(
    source: &dyn QuerySource,
    hasher: &dyn Hasher,
    version: &str,
    path: &str,
) -> Result<StaticFile, StaticError> {
    let acc = accumulate_pattern(
        source,
        &EventPattern::new(Kind::Fact, "axiom/perm-versions", version),
    );
    let events = acc.accumulated_events();
    if events.is_empty() {
        return Err(StaticError::NoSuchVersion(version.to_owned()));
    }
    for e in &events {
        if let Some(Value::Map(static_map)) = e.data.get(1) {
            if let Some(Value::Str(hash)) = static_map.get(path) {
                let bytes = hasher.unhash(&PermRef(hash.clone()))?;
                return Ok(StaticFile {
                    bytes,
                    content_type: content_type_of(path),
                });
            }
        }
    }
    Err(StaticError::NoSuchPath(path.to_owned()))
}
