//! Publishing rule modules under content hashes: names pin down logic
//! forever, imports form a Merkle DAG, and editing a module renames it and
//! every transitive importer; nothing else moves.
//!
//! Run with: cargo run --example content_addressing

use mip::permastore::{eval_symbol, hash_all, module_publics, validate_pure, MemStore};
use mip::rules::{Expr, FactPattern, Guard, Link, RuleDef, RuleKind, RuleModule};

fn module(name: &str, fact: &str, imports: Vec<String>) -> RuleModule {
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

fn main() {
    let store = MemStore::new();
    let base = module("base.core", "raw/things", vec![]);
    // the importer consumes the base module's derived facts by name
    let importer = module("app.core", "base.core/echo", vec!["base.core".into()]);
    validate_pure(&base).unwrap();
    validate_pure(&importer).unwrap();

    let published = hash_all(&store, &[base.clone(), importer.clone()]).unwrap();
    println!("published:");
    for (name, r) in &published {
        println!("  {name} -> {r}");
    }

    // loading by hash qualifies definitions with the hash itself
    let publics = module_publics(&store, &published["app.core"]).unwrap();
    let echo = &publics["echo"];
    println!("app.core/echo now consumes {}", echo.links[0].source.name);
    assert!(echo.links[0].source.name.starts_with("perm."));

    // a fully qualified symbol resolves to the same value anywhere
    let resolved = eval_symbol(&store, &format!("{}/echo", published["app.core"])).unwrap();
    assert_eq!(&resolved, echo);

    // editing the base module changes its hash and the importer's, only
    let mut edited = base;
    edited.rules[0].links[0].source.name = "raw/other-things".into();
    let republished = hash_all(&store, &[edited, importer]).unwrap();
    println!("after editing base.core:");
    for (name, r) in &republished {
        let moved = if r == &published[name] {
            "unchanged"
        } else {
            "new hash"
        };
        println!("  {name}: {moved}");
    }
    assert_ne!(republished["base.core"], published["base.core"]);
    assert_ne!(republished["app.core"], published["app.core"]);
}
