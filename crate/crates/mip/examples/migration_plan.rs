//! Deploying new logic over existing data: the dependency-ordered migration
//! plan, and the replay that backfills derived facts shard by shard.
//!
//! Run with: cargo run --example migration_plan

use std::collections::BTreeSet;

use mip::events::Event;
use mip::migrate::build_plan;
use mip::service::fixture::{seed_tweetmi, write_fixture_dir, MODULE_NAME};
use mip::service::{Platform, PlatformConfig};
use mip::store::EventPattern;
use mip::value::Value;
use mip::Kind;

fn main() {
    let platform = Platform::new(PlatformConfig::default()).unwrap();

    // history exists before the application does
    let base_ts = 1_700_000_000_000;
    seed_tweetmi(&platform, base_ts);
    println!("seeded 27 tweets and a full follow matrix");

    // deploying publishes the modules and replays history through them
    let dir = tempfile::tempdir().unwrap();
    write_fixture_dir(dir.path()).unwrap();
    let outcome = platform.deploy("v1", dir.path()).unwrap();
    let perm_ns = outcome.code_map[MODULE_NAME].to_string();
    println!("deployed {MODULE_NAME} as {perm_ns}");

    // the plan the deployment executed, rebuilt for display
    let perms = BTreeSet::from([outcome.code_map[MODULE_NAME].clone()]);
    let plan = build_plan(
        platform.blobs().as_ref(),
        &perms,
        &mip::interset::Interset::singleton("axiom"),
        platform.config().shards,
    )
    .unwrap();
    println!("migration plan:\n{}", plan.trace());

    // the backfill produced everyone's timeline partitions
    let day = base_ts / 86_400_000;
    for user in ["alice", "bob", "charlie"] {
        let entries = platform.accumulated(&EventPattern::new(
            Kind::Fact,
            format!("{perm_ns}/followee-tweets"),
            Value::list([user.into(), Value::Int(day)]),
        ));
        println!("{user}: {} followee tweets", entries.len());
    }

    // and the rules are live: new facts flow without another migration
    platform.publish(
        Event::fact(
            "tweetmi/tweeted",
            "bob",
            vec!["fresh after deploy".into(), Value::Int(base_ts + 60_000)],
        )
        .with_ts(base_ts + 60_000)
        .with_writers(mip::interset::Interset::singleton("bob")),
    );
    platform.drain();
    let alices = platform.accumulated(&EventPattern::new(
        Kind::Fact,
        format!("{perm_ns}/followee-tweets"),
        Value::list(["alice".into(), Value::Int(day)]),
    ));
    println!("alice after bob's new tweet: {} entries", alices.len());
}
