//! The event-processing pipeline, processor by processor, then the whole
//! dispatcher: facts in, derived facts out, with integrity and
//! confidentiality annotations maintained along the way.
//!
//! Run with: cargo run --example engine_pipeline

use std::sync::Arc;

use mip::engine::{unique_ts, Dispatcher, DispatcherConfig, Emitter, Multiplier};
use mip::events::Event;
use mip::interset::{GroupTerm, Interset};
use mip::rules::{CompiledRule, Expr, FactPattern, Guard, Link, RuleDef, RuleKind};
use mip::store::{EventPattern, EventStore};
use mip::Kind;

fn timeline() -> RuleDef {
    RuleDef {
        kind: RuleKind::Rule,
        name: "demo.core/timeline".into(),
        links: vec![
            Link {
                source: FactPattern::new(
                    "demo/follows",
                    Expr::var("user"),
                    vec![Expr::var("author")],
                ),
                guards: vec![Guard::ByAnyone],
            },
            Link {
                source: FactPattern::new(
                    "demo/tweeted",
                    Expr::var("author"),
                    vec![Expr::var("text")],
                ),
                guards: vec![Guard::ByAnyone],
            },
        ],
        output: FactPattern::new(
            "demo.core/timeline",
            Expr::var("user"),
            vec![Expr::var("text")],
        ),
    }
}

fn main() {
    let rule = Arc::new(CompiledRule::compile(timeline()).unwrap());

    // the emitter turns a follow into a residual rule tuple keyed by the
    // author, carrying the bindings the join will need
    let follow = Event::fact("demo/follows", "alice", vec!["bob".into()]).with_ts(unique_ts());
    let tuples = Emitter::new(Arc::clone(&rule)).emit(&follow);
    println!(
        "emitter: {} keyed {} data {:?}",
        tuples[0].name, tuples[0].key, tuples[0].data
    );

    // the multiplier combines the stored tuple with a matching tweet:
    // writers come from the rule, readers narrow to both sides' readers
    let tweet = Event::fact("demo/tweeted", "bob", vec!["hello world".into()])
        .with_ts(unique_ts())
        .with_readers(Interset::simple([GroupTerm::identity("subscribers")]));
    let products = Multiplier::new(Arc::clone(&rule), 1).multiply(&tuples[0], &tweet);
    println!(
        "multiplier: {} keyed {} readers {}",
        products[0].name,
        products[0].key,
        products[0].readers.canonical_text()
    );

    // the dispatcher does all of that recursively against live storage
    let dispatcher = Dispatcher::new(
        Arc::new(EventStore::in_memory()),
        DispatcherConfig::default(),
    );
    dispatcher.activate_rule(timeline()).unwrap();
    for e in [
        Event::fact("demo/follows", "alice", vec!["bob".into()]).with_ts(unique_ts()),
        Event::fact("demo/follows", "carol", vec!["bob".into()]).with_ts(unique_ts()),
        Event::fact("demo/tweeted", "bob", vec!["good morning".into()]).with_ts(unique_ts()),
        // a retraction flows like any other change
        Event::fact("demo/follows", "carol", vec!["bob".into()])
            .with_ts(unique_ts())
            .with_change(-1),
        Event::fact("demo/tweeted", "bob", vec!["good night".into()]).with_ts(unique_ts()),
    ] {
        dispatcher.submit(e);
        dispatcher.drain();
    }

    for user in ["alice", "carol"] {
        let mut acc = mip::events::Accumulator::new();
        for e in dispatcher.store().events_for(&EventPattern::new(
            Kind::Fact,
            "demo.core/timeline",
            user,
        )) {
            acc.accumulate(&e);
        }
        let entries = acc.accumulated_events();
        println!("{user}'s timeline ({} entries):", entries.len());
        for e in entries {
            println!("  {}", e.data[0]);
        }
    }
    // carol unfollowed before the second tweet, and the first tweet's
    // entry cancelled with her follow
    dispatcher.shutdown();
}
