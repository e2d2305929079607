//! Defining a rule as data, validating it, and simulating it against a
//! fact multiset without any storage or engine.
//!
//! Run with: cargo run --example rule_simulation

use mip::rules::{
    simulate_with, validate_rule, Expr, FactPattern, Guard, Link, RuleDef, RuleKind, SimFact,
};
use mip::value::Value;

fn main() {
    // tweets from followed authors land in the follower's timeline
    let timeline = RuleDef {
        kind: RuleKind::Rule,
        name: "demo.core/timeline".into(),
        links: vec![
            Link {
                source: FactPattern::new(
                    "demo/follows",
                    Expr::var("user"),
                    vec![Expr::var("author")],
                ),
                // integrity: the follow must have been stated by the follower
                guards: vec![Guard::By(Expr::var("user"))],
            },
            Link {
                source: FactPattern::new(
                    "demo/tweeted",
                    Expr::var("author"),
                    vec![Expr::var("text")],
                ),
                guards: vec![Guard::By(Expr::var("author"))],
            },
        ],
        output: FactPattern::new(
            "demo.core/timeline",
            Expr::var("user"),
            vec![Expr::var("author"), Expr::var("text")],
        ),
    };
    validate_rule(&timeline).expect("every link is guarded and keys are bound");

    // a rule without an integrity guard is rejected outright
    let mut insecure = timeline.clone();
    insecure.links[1].guards.clear();
    println!("unguarded rule: {}", validate_rule(&insecure).unwrap_err());

    // simulate against a handful of facts, each tagged with its writers
    let writers = |u: &str| mip::interset::Interset::singleton(u);
    let facts = vec![
        SimFact::new("demo/follows", "alice", vec!["bob".into()]).with_writers(writers("alice")),
        SimFact::new("demo/follows", "alice", vec!["carol".into()]).with_writers(writers("alice")),
        SimFact::new("demo/tweeted", "bob", vec!["morning!".into()]).with_writers(writers("bob")),
        SimFact::new("demo/tweeted", "carol", vec!["shipping it".into()])
            .with_writers(writers("carol")),
        // a forged tweet in bob's name is filtered by the `by` guard
        SimFact::new("demo/tweeted", "bob", vec!["forged".into()]).with_writers(writers("eve")),
    ];
    let timeline_entries = simulate_with(&timeline, &facts).unwrap();
    println!("alice's simulated timeline:");
    for entry in &timeline_entries {
        let tuple = entry.as_list().unwrap();
        println!("  {} -> {} said {}", tuple[0], tuple[1], tuple[2]);
    }
    assert_eq!(timeline_entries.len(), 2);
    assert!(!timeline_entries.contains(&Value::list([
        "alice".into(),
        "bob".into(),
        "forged".into()
    ])));
}
