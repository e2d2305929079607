//! Content addressing for rule modules and static blobs.
//!
//! A module's name is a cryptographic hash of its canonical serialization,
//! so a name pins down exact logic forever: referencing another module embeds
//! that module's hash, making the module graph a Merkle DAG. Publishing
//! validates that modules use only the pure operator whitelist, rewrites
//! imports to their hashes in topological order, and stores the bytes in a
//! hash-addressed blob store.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rules::expr::{GUARD_HEADS, PURE_OPS};
use crate::rules::{validate_rule, ModuleFormatError, RuleDef, RuleError, RuleModule};
use crate::value::canonical_json;

/// Prefix for published rule modules.
pub const MODULE_PREFIX: &str = "perm.";
/// Prefix for static content blobs.
pub const STATIC_PREFIX: &str = "static.";

/// A content hash naming a stored blob: `perm.<base32(SHA-256)>` for rule
/// modules, `static.<base32(SHA-256)>` for static files.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PermRef(pub String);

impl PermRef {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Digest part of the reference, without the prefix.
    pub fn digest(&self) -> &str {
        self.0
            .split_once('.')
            .map(|(_, digest)| digest)
            .unwrap_or(&self.0)
    }

    pub fn is_module(&self) -> bool {
        self.0.starts_with(MODULE_PREFIX)
    }
}

impl std::fmt::Display for PermRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn ref_for(prefix: &str, content: &[u8]) -> PermRef {
    let digest = Sha256::digest(content);
    // RFC 4648 base32 without padding: 256-bit digests encode to 52 chars.
    PermRef(format!(
        "{prefix}{}",
        data_encoding::BASE32_NOPAD.encode(&digest)
    ))
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("no content stored under {0}")]
    NotFound(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Hash-addressed blob storage: `hash` stores bytes and returns their name,
/// `unhash` retrieves them. Writes are idempotent.
pub trait Hasher: Send + Sync {
    fn hash(&self, prefix: &str, content: &[u8]) -> Result<PermRef, StoreError>;
    fn unhash(&self, r: &PermRef) -> Result<Vec<u8>, StoreError>;
}

/// In-memory blob store.
#[derive(Default)]
pub struct MemStore {
    blobs: Mutex<BTreeMap<PermRef, Vec<u8>>>,
}

impl MemStore {
    pub fn new() -> MemStore {
        MemStore::default()
    }
}

impl Hasher for MemStore {
    fn hash(&self, prefix: &str, content: &[u8]) -> Result<PermRef, StoreError> {
        let r = ref_for(prefix, content);
        self.blobs
            .lock()
            .unwrap()
            .entry(r.clone())
            .or_insert_with(|| content.to_vec());
        Ok(r)
    }

    fn unhash(&self, r: &PermRef) -> Result<Vec<u8>, StoreError> {
        self.blobs
            .lock()
            .unwrap()
            .get(r)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(r.0.clone()))
    }
}

/// Content-addressed file directory: blobs live at
/// `<root>/<first two digest chars>/<rest of the name>`.
pub struct DirStore {
    root: PathBuf,
}

impl DirStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<DirStore, StoreError> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|source| StoreError::Io {
            path: root.clone(),
            source,
        })?;
        Ok(DirStore { root })
    }

    fn path_of(&self, r: &PermRef) -> PathBuf {
        let digest = r.digest();
        let (head, tail) = digest.split_at(2.min(digest.len()));
        let prefix = r.0.split_once('.').map(|(p, _)| p).unwrap_or("blob");
        self.root.join(head).join(format!("{prefix}.{tail}"))
    }
}

impl Hasher for DirStore {
    fn hash(&self, prefix: &str, content: &[u8]) -> Result<PermRef, StoreError> {
        let r = ref_for(prefix, content);
        let path = self.path_of(&r);
        if !path.exists() {
            let io = |source| StoreError::Io {
                path: path.clone(),
                source,
            };
            std::fs::create_dir_all(path.parent().expect("blob path has parent")).map_err(io)?;
            let mut f = std::fs::File::create(&path).map_err(io)?;
            f.write_all(content).map_err(io)?;
        }
        Ok(r)
    }

    fn unhash(&self, r: &PermRef) -> Result<Vec<u8>, StoreError> {
        let path = self.path_of(r);
        std::fs::read(&path).map_err(|_| StoreError::NotFound(r.0.clone()))
    }
}

#[derive(Debug, Error)]
pub enum PublishError {
    #[error("symbols {0:?} are not allowed")]
    ImpureSymbols(BTreeSet<String>),
    #[error("import cycle involving modules {0:?}")]
    ImportCycle(Vec<String>),
    #[error("module {module} imports unknown module {import}")]
    UnknownImport { module: String, import: String },
    #[error("module {module}: {source}")]
    InvalidRule {
        module: String,
        #[source]
        source: RuleError,
    },
    #[error("module {module}: {source}")]
    Malformed {
        module: String,
        #[source]
        source: ModuleFormatError,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("module {0} not found")]
    NotFound(String),
}

/// Check that a module only uses whitelisted operators. The whitelist covers
/// arithmetic, comparison, tuple and string operations plus the guard heads;
/// anything imperative is absent by construction.
pub fn validate_pure(module: &RuleModule) -> Result<(), PublishError> {
    let offenders: BTreeSet<String> = module
        .used_symbols()
        .into_iter()
        .filter(|op| !PURE_OPS.contains(&op.as_str()) && !GUARD_HEADS.contains(&op.as_str()))
        .collect();
    if offenders.is_empty() {
        Ok(())
    } else {
        Err(PublishError::ImpureSymbols(offenders))
    }
}

fn validate_module(module: &RuleModule) -> Result<(), PublishError> {
    validate_pure(module)?;
    for rule in module.qualified_rules(&module.name) {
        validate_rule(&rule).map_err(|source| PublishError::InvalidRule {
            module: module.name.clone(),
            source,
        })?;
    }
    Ok(())
}

/// Publish a set of modules: validate them, rewrite imports to hashes in
/// topological order, store each module's canonical bytes, and return the
/// name-to-hash map. The result is independent of the input order.
pub fn hash_all(
    hasher: &dyn Hasher,
    modules: &[RuleModule],
) -> Result<BTreeMap<String, PermRef>, PublishError> {
    let by_name: BTreeMap<&str, &RuleModule> =
        modules.iter().map(|m| (m.name.as_str(), m)).collect();
    for module in modules {
        validate_module(module)?;
        for import in &module.imports {
            if !import.starts_with(MODULE_PREFIX) && !by_name.contains_key(import.as_str()) {
                return Err(PublishError::UnknownImport {
                    module: module.name.clone(),
                    import: import.clone(),
                });
            }
        }
    }

    // Depth-first topological order with lexicographic tie-breaking.
    fn visit<'a>(
        name: &'a str,
        by_name: &BTreeMap<&'a str, &'a RuleModule>,
        state: &mut BTreeMap<&'a str, u8>,
        order: &mut Vec<&'a str>,
    ) -> Result<(), PublishError> {
        match state.get(name) {
            Some(2) => return Ok(()),
            Some(1) => return Err(PublishError::ImportCycle(vec![name.to_owned()])),
            _ => {}
        }
        state.insert(name, 1);
        for import in &by_name[name].imports {
            if let Some(imported) = by_name.get(import.as_str()) {
                visit(imported.name.as_str(), by_name, state, order).map_err(|e| match e {
                    PublishError::ImportCycle(mut names) => {
                        if !names.contains(&name.to_owned()) {
                            names.push(name.to_owned());
                        }
                        PublishError::ImportCycle(names)
                    }
                    other => other,
                })?;
            }
        }
        state.insert(name, 2);
        order.push(name);
        Ok(())
    }
    let mut order: Vec<&str> = Vec::new();
    let mut state: BTreeMap<&str, u8> = BTreeMap::new(); // 1 = visiting, 2 = done
    let mut names: Vec<&str> = by_name.keys().copied().collect();
    names.sort_unstable();
    for name in names {
        visit(name, &by_name, &mut state, &mut order)?;
    }

    let mut published: BTreeMap<String, PermRef> = BTreeMap::new();
    for name in order {
        let rewritten = by_name[name]
            .rewrite_namespaces(&|ns: &str| published.get(ns).map(|r: &PermRef| r.0.clone()));
        let bytes = canonical_json(&rewritten.to_json()).into_bytes();
        let r = hasher.hash(MODULE_PREFIX, &bytes)?;
        published.insert(name.to_owned(), r);
    }
    Ok(published)
}

/// Load a published module and return its definitions, qualified by the
/// module's hash: rule names become `<hash>/<local>` and self-references are
/// rewritten to the hash.
pub fn module_publics(
    hasher: &dyn Hasher,
    r: &PermRef,
) -> Result<BTreeMap<String, RuleDef>, PublishError> {
    let bytes = hasher
        .unhash(r)
        .map_err(|_| PublishError::NotFound(r.0.clone()))?;
    let text = String::from_utf8_lossy(&bytes);
    let module = RuleModule::parse(&text).map_err(|source| PublishError::Malformed {
        module: r.0.clone(),
        source,
    })?;
    Ok(module
        .qualified_rules(r.as_str())
        .into_iter()
        .map(|rule| (rule.local_name().to_owned(), rule))
        .collect())
}

/// Resolve a fully qualified `perm.<hash>/<name>` symbol to its definition.
/// The result is value-identical wherever and whenever it is evaluated.
pub fn eval_symbol(hasher: &dyn Hasher, qualified: &str) -> Result<RuleDef, PublishError> {
    let (ns, local) = qualified
        .split_once('/')
        .ok_or_else(|| PublishError::NotFound(qualified.to_owned()))?;
    let mut publics = module_publics(hasher, &PermRef(ns.to_owned()))?;
    publics
        .remove(local)
        .ok_or_else(|| PublishError::NotFound(qualified.to_owned()))
}

/// Store every regular file under `root` and return a map from `/`-prefixed
/// relative paths to blob references. A missing root yields the empty map.
pub fn hash_static_files(
    hasher: &dyn Hasher,
    root: &Path,
) -> Result<BTreeMap<String, PermRef>, StoreError> {
    let mut out = BTreeMap::new();
    if !root.exists() {
        return Ok(out);
    }
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| StoreError::Io {
            path: root.to_path_buf(),
            source: e.into(),
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let content = std::fs::read(entry.path()).map_err(|source| StoreError::Io {
            path: entry.path().to_path_buf(),
            source,
        })?;
        let rel = entry
            .path()
            .strip_prefix(root)
            .expect("walkdir stays under root");
        let mut key = String::from("/");
        key.push_str(&rel.to_string_lossy().replace('\\', "/"));
        out.insert(key, hasher.hash(STATIC_PREFIX, &content)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rules::{Expr, FactPattern, Guard, Link, RuleKind};

    fn simple_module(name: &str, fact: &str, imports: Vec<String>) -> RuleModule {
        RuleModule {
            name: name.into(),
            imports,
            rules: vec![RuleDef {
                kind: RuleKind::Rule,
                name: "echo".into(),
                links: vec![Link {
                    source: FactPattern::new(fact, Expr::var("k"), vec![Expr::var("v")]),
                    guards: vec![Guard::ByAnyone],
                }],
                output: FactPattern::new("echo", Expr::var("k"), vec![Expr::var("v")]),
            }],
        }
    }

    #[test]
    fn pure_modules_pass_validation() {
        let mut module = simple_module("m.core", "raw/facts", vec![]);
        module.rules[0].links[0].guards.push(Guard::Let(vec![(
            "sum".into(),
            Expr::call("+", [Expr::var("v"), Expr::lit(1i64)]),
        )]));
        assert!(validate_pure(&module).is_ok());
    }

    #[test]
    fn impure_symbols_are_named() {
        let mut module = simple_module("m.core", "raw/facts", vec![]);
        module.rules[0].links[0].guards.push(Guard::Let(vec![(
            "a".into(),
            Expr::call("atom", [Expr::lit(0i64)]),
        )]));
        match validate_pure(&module) {
            Err(PublishError::ImpureSymbols(syms)) => {
                assert_eq!(syms, BTreeSet::from(["atom".to_owned()]))
            }
            other => panic!("expected ImpureSymbols, got {other:?}"),
        }

        let mut module = simple_module("m.core", "raw/facts", vec![]);
        module.rules[0].links[0]
            .guards
            .push(Guard::When(Expr::call("eval", [Expr::var("v")])));
        match validate_pure(&module) {
            Err(PublishError::ImpureSymbols(syms)) => {
                assert_eq!(syms, BTreeSet::from(["eval".to_owned()]))
            }
            other => panic!("expected ImpureSymbols, got {other:?}"),
        }
    }

    #[test]
    fn imports_are_rewritten_to_hashes_before_hashing() {
        let store = MemStore::new();
        let leaf = simple_module("leaf.core", "raw/facts", vec![]);
        let mut importer =
            simple_module("importer.core", "leaf.core/echo", vec!["leaf.core".into()]);
        importer.rules[0].name = "echo2".into();
        importer.rules[0].output.name = "echo2".into();

        let published = hash_all(&store, &[importer, leaf]).unwrap();
        let leaf_ref = &published["leaf.core"];
        let importer_bytes = store.unhash(&published["importer.core"]).unwrap();
        let text = String::from_utf8(importer_bytes).unwrap();
        assert!(text.contains(leaf_ref.as_str()), "{text}");
    }

    #[test]
    fn publishing_is_deterministic_and_order_independent() {
        let store = MemStore::new();
        let a = simple_module("a.core", "raw/facts", vec![]);
        let b = simple_module("b.core", "a.core/echo", vec!["a.core".into()]);
        let forward = hash_all(&store, &[a.clone(), b.clone()]).unwrap();
        let reverse = hash_all(&store, &[b, a.clone()]).unwrap();
        assert_eq!(forward, reverse);

        let again = hash_all(&store, &[a]).unwrap();
        assert_eq!(again["a.core"], forward["a.core"]);
    }

    #[test]
    fn editing_a_leaf_changes_every_transitive_importer_only() {
        let store = MemStore::new();
        let leaf = simple_module("leaf.core", "raw/facts", vec![]);
        let mid = simple_module("mid.core", "leaf.core/echo", vec!["leaf.core".into()]);
        let top = simple_module("top.core", "mid.core/echo", vec!["mid.core".into()]);
        let other = simple_module("other.core", "raw/other", vec![]);
        let before = hash_all(
            &store,
            &[leaf.clone(), mid.clone(), top.clone(), other.clone()],
        )
        .unwrap();

        let mut edited = leaf;
        edited.rules[0].links[0].source.name = "raw/changed".into();
        let after = hash_all(&store, &[edited, mid, top, other]).unwrap();

        assert_ne!(before["leaf.core"], after["leaf.core"]);
        assert_ne!(before["mid.core"], after["mid.core"]);
        assert_ne!(before["top.core"], after["top.core"]);
        assert_eq!(before["other.core"], after["other.core"]);
    }

    #[test]
    fn import_cycles_and_unknown_imports_are_rejected() {
        let store = MemStore::new();
        let a = simple_module("a.core", "raw/facts", vec!["b.core".into()]);
        let b = simple_module("b.core", "raw/facts", vec!["a.core".into()]);
        assert!(matches!(
            hash_all(&store, &[a.clone(), b]),
            Err(PublishError::ImportCycle(_))
        ));
        assert!(matches!(
            hash_all(&store, &[a]),
            Err(PublishError::UnknownImport { .. })
        ));
    }

    #[test]
    fn module_publics_returns_qualified_definitions() {
        let store = MemStore::new();
        let module = simple_module("m.core", "m.core/echo", vec![]);
        let published = hash_all(&store, &[module]).unwrap();
        let r = &published["m.core"];
        let publics = module_publics(&store, r).unwrap();
        let echo = &publics["echo"];
        assert_eq!(echo.name, format!("{r}/echo"));
        // self-reference rewritten to the hash
        assert_eq!(echo.links[0].source.name, format!("{r}/echo"));

        assert!(matches!(
            module_publics(&store, &PermRef("perm.MISSING".into())),
            Err(PublishError::NotFound(_))
        ));
        let empty = RuleModule {
            name: "none.core".into(),
            imports: vec![],
            rules: vec![],
        };
        let published = hash_all(&store, &[empty]).unwrap();
        assert!(module_publics(&store, &published["none.core"])
            .unwrap()
            .is_empty());
    }

    #[test]
    fn eval_symbol_is_stable_across_stores() {
        let module = simple_module("m.core", "raw/facts", vec![]);
        let store1 = MemStore::new();
        let store2 = MemStore::new();
        let r1 = hash_all(&store1, &[module.clone()]).unwrap()["m.core"].clone();
        let r2 = hash_all(&store2, &[module]).unwrap()["m.core"].clone();
        assert_eq!(r1, r2);
        let d1 = eval_symbol(&store1, &format!("{r1}/echo")).unwrap();
        let d2 = eval_symbol(&store2, &format!("{r2}/echo")).unwrap();
        assert_eq!(d1, d2);
        assert!(matches!(
            eval_symbol(&store1, &format!("{r1}/missing")),
            Err(PublishError::NotFound(_))
        ));
    }

    #[test]
    fn static_files_hash_by_relative_path() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.html"), "Some html...").unwrap();
        std::fs::write(dir.path().join("b.css"), "Some CSS...").unwrap();
        std::fs::create_dir(dir.path().join("js")).unwrap();
        std::fs::write(dir.path().join("js/c.js"), "Some JavaScript...").unwrap();

        let store = MemStore::new();
        let map = hash_static_files(&store, dir.path()).unwrap();
        assert_eq!(
            map.keys().collect::<Vec<_>>(),
            ["/a.html", "/b.css", "/js/c.js"]
        );
        assert_eq!(
            store.unhash(&map["/a.html"]).unwrap(),
            b"Some html...".to_vec()
        );
        // determinism
        assert_eq!(hash_static_files(&store, dir.path()).unwrap(), map);
        // empty dir
        let empty = tempfile::tempdir().unwrap();
        assert!(hash_static_files(&store, empty.path()).unwrap().is_empty());
    }

    #[test]
    fn dir_store_round_trips_and_shards_paths() {
        let dir = tempfile::tempdir().unwrap();
        let store = DirStore::open(dir.path()).unwrap();
        let r = store.hash(MODULE_PREFIX, b"some bytes").unwrap();
        assert_eq!(store.unhash(&r).unwrap(), b"some bytes".to_vec());
        // layout: <root>/<two digest chars>/<rest>
        let digest = r.digest();
        assert!(dir.path().join(&digest[..2]).exists());
        // idempotent rewrite
        let again = store.hash(MODULE_PREFIX, b"some bytes").unwrap();
        assert_eq!(again, r);
    }

    #[test]
    fn no_collisions_across_many_random_modules() {
        let store = MemStore::new();
        let mut seen = BTreeSet::new();
        for i in 0..10_000 {
            let module = simple_module(&format!("m{i}.core"), &format!("raw/f{i}"), vec![]);
            let bytes = canonical_json(&module.to_json()).into_bytes();
            let r = store.hash(MODULE_PREFIX, &bytes).unwrap();
            assert!(seen.insert(r), "collision at module {i}");
        }
    }

    #[test]
    fn blob_round_trip_property() {
        let store = MemStore::new();
        for seed in 0u64..200 {
            let bytes: Vec<u8> = (0..(seed % 64))
                .map(|i| (seed.wrapping_mul(31).wrapping_add(i) % 251) as u8)
                .collect();
            let r = store.hash(STATIC_PREFIX, &bytes).unwrap();
            assert_eq!(store.unhash(&r).unwrap(), bytes);
        }
    }
}
