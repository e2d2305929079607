//! Whole-platform properties: determinism of full runs, migration under
//! live traffic, and durable restart behavior.

use std::collections::BTreeMap;
use std::sync::Arc;

use mip::events::{Accumulator, Event};
use mip::service::fixture::{self, seed_tweetmi, write_fixture_dir, MODULE_NAME};
use mip::service::{Platform, PlatformConfig};
use mip::store::{EventPattern, EventStore};
use mip::value::Value;
use mip::Kind;

const BASE_TS: i64 = 1_700_000_000_000;

fn accumulated_state(store: &EventStore) -> BTreeMap<String, (i64, i64)> {
    let mut acc = Accumulator::new();
    for e in store.all_events() {
        acc.accumulate(&e);
    }
    acc.entries()
        .map(|e| (e.base.identity_key(), (e.total_change, e.latest_ts)))
        .collect()
}

fn run_fixture(platform: &Platform, dir: &std::path::Path) {
    seed_tweetmi(platform, BASE_TS);
    platform.deploy("v1", dir).unwrap();
    let faults = platform.take_faults();
    assert!(faults.is_empty(), "faults: {faults:?}");
}

#[test]
fn two_full_runs_produce_identical_store_states() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture_dir(dir.path()).unwrap();
    let mut states = Vec::new();
    for _ in 0..2 {
        let platform = Platform::new(PlatformConfig::default()).unwrap();
        run_fixture(&platform, dir.path());
        states.push(accumulated_state(platform.store()));
    }
    assert_eq!(states[0], states[1]);
}

#[test]
fn facts_published_during_migration_are_not_lost() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture_dir(dir.path()).unwrap();

    // control: all facts exist before the deploy
    let control = Platform::new(PlatformConfig::default()).unwrap();
    seed_tweetmi(&control, BASE_TS);
    for i in 0..10 {
        control.publish(fixture::tweet(
            "bob",
            &format!("burst {i}"),
            BASE_TS + 100 + i,
        ));
    }
    control.drain();
    control.deploy("v1", dir.path()).unwrap();
    assert!(control.take_faults().is_empty());

    // experiment: a burst of tweets races the migration
    let racing = Platform::new(PlatformConfig::default()).unwrap();
    seed_tweetmi(&racing, BASE_TS);
    let racer = {
        let platform = Arc::clone(&racing);
        std::thread::spawn(move || {
            for i in 0..10 {
                platform.publish(fixture::tweet(
                    "bob",
                    &format!("burst {i}"),
                    BASE_TS + 100 + i,
                ));
            }
        })
    };
    racing.deploy("v1", dir.path()).unwrap();
    racer.join().unwrap();
    racing.drain();
    assert!(racing.take_faults().is_empty());

    assert_eq!(
        accumulated_state(control.store()),
        accumulated_state(racing.store()),
        "racing a migration lost or duplicated derivations"
    );
}

#[test]
fn durable_platform_survives_restart() {
    let data = tempfile::tempdir().unwrap();
    let fixture_dir = tempfile::tempdir().unwrap();
    write_fixture_dir(fixture_dir.path()).unwrap();
    let config = PlatformConfig {
        data_dir: Some(data.path().to_path_buf()),
        ..PlatformConfig::default()
    };

    let day = BASE_TS / 86_400_000;
    let perm_ns;
    let before;
    {
        let platform = Platform::new(config.clone()).unwrap();
        seed_tweetmi(&platform, BASE_TS);
        let outcome = platform.deploy("v1", fixture_dir.path()).unwrap();
        perm_ns = outcome.code_map[MODULE_NAME].to_string();
        before = accumulated_state(platform.store());
        platform.store().snapshot().unwrap();
        platform.dispatcher().shutdown();
    }

    // reopen: stored state is intact and the rules are live again
    let platform = Platform::new(config).unwrap();
    assert_eq!(accumulated_state(platform.store()), before);
    assert!(platform
        .dispatcher()
        .is_live(&format!("{perm_ns}/followee-tweets")));

    // a fresh tweet still derives timeline entries
    platform.publish(fixture::tweet(
        "bob",
        "after the restart",
        BASE_TS + 777_000,
    ));
    platform.drain();
    assert!(platform.take_faults().is_empty());
    let alices = platform.accumulated(&EventPattern::new(
        Kind::Fact,
        format!("{perm_ns}/followee-tweets"),
        Value::list(["alice".into(), Value::Int(day)]),
    ));
    assert_eq!(alices.len(), 19, "18 migrated plus the fresh one");
    assert!(alices
        .iter()
        .any(|e| e.data[1] == Value::from("after the restart")));
}

#[test]
fn second_deploy_of_the_same_directory_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture_dir(dir.path()).unwrap();
    let platform = Platform::new(PlatformConfig::default()).unwrap();
    run_fixture(&platform, dir.path());
    let before = accumulated_state(platform.store());
    platform.deploy("v1", dir.path()).unwrap();
    assert!(platform.take_faults().is_empty());
    assert_eq!(accumulated_state(platform.store()), before);
}

#[test]
fn static_content_serves_deployed_files() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture_dir(dir.path()).unwrap();
    let platform = Platform::new(PlatformConfig::default()).unwrap();
    platform.deploy("v1", dir.path()).unwrap();
    let found = mip::gateway::static_content(
        platform.store().as_ref(),
        platform.blobs().as_ref(),
        "v1",
        "/index.html",
    )
    .unwrap();
    assert_eq!(found.bytes, b"<h1>tweetmi</h1>\n".to_vec());
    assert_eq!(found.content_type, "text/html");
    assert!(matches!(
        mip::gateway::static_content(
            platform.store().as_ref(),
            platform.blobs().as_ref(),
            "v2",
            "/index.html"
        ),
        Err(mip::gateway::StaticError::NoSuchVersion(_))
    ));
}

#[test]
fn mention_indexing_matches_the_simulation_oracle() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture_dir(dir.path()).unwrap();
    let platform = Platform::new(PlatformConfig::default()).unwrap();
    platform.publish(fixture::tweet("alice", "ping @bob and @charlie!", BASE_TS));
    platform.publish(fixture::tweet("bob", "@alice hi", BASE_TS + 1));
    platform.drain();
    let outcome = platform.deploy("v1", dir.path()).unwrap();
    assert!(platform.take_faults().is_empty());
    let perm_ns = outcome.code_map[MODULE_NAME].to_string();

    // oracle: the same rule, simulated directly against the raw tuples
    let rules = fixture::tweetmi_module().qualified_rules(&perm_ns);
    let mentions = rules.iter().find(|r| r.local_name() == "mentions").unwrap();
    let sim_facts = vec![
        mip::rules::SimFact::new(
            "tweetmi/tweeted",
            "alice",
            vec!["ping @bob and @charlie!".into(), Value::Int(BASE_TS)],
        )
        .with_writers(mip::interset::Interset::singleton("alice")),
        mip::rules::SimFact::new(
            "tweetmi/tweeted",
            "bob",
            vec!["@alice hi".into(), Value::Int(BASE_TS + 1)],
        )
        .with_writers(mip::interset::Interset::singleton("bob")),
    ];
    let oracle = mip::rules::simulate_with(mentions, &sim_facts).unwrap();

    let mut engine_out = std::collections::BTreeSet::new();
    let mut acc = Accumulator::new();
    platform
        .store()
        .scan(&format!("{perm_ns}/mentions"), 0, 1, |e| acc.accumulate(&e));
    for e in acc.accumulated_events() {
        let mut tuple = vec![e.key.clone()];
        tuple.extend(e.data.clone());
        engine_out.insert(Value::List(tuple));
    }
    assert_eq!(engine_out, oracle);
    assert_eq!(oracle.len(), 3, "three mentions across the two tweets");
}

#[test]
fn deploying_a_broken_module_aborts_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    std::fs::create_dir_all(&src).unwrap();
    // a rule invoking a non-whitelisted operator
    let bad = serde_json::json!({
        "module_name": "bad.core",
        "imports": [],
        "rules": [{
            "kind": "rule",
            "name": "evil",
            "links": [{
                "source": {"name": "raw/x", "key": "?k", "args": ["?v"]},
                "guards": [["by-anyone"], ["let", "?z", ["eval", "?v"]]],
            }],
            "output": {"key": "?k", "args": ["?z"]},
        }],
    });
    std::fs::write(src.join("bad.core.json"), bad.to_string()).unwrap();
    let platform = Platform::new(PlatformConfig::default()).unwrap();
    let err = platform.deploy("v1", dir.path()).unwrap_err();
    assert!(err.to_string().contains("eval"), "{err}");
    // nothing was published
    assert!(platform
        .store()
        .events_for(&EventPattern::new(Kind::Fact, "axiom/perm-versions", "v1"))
        .is_empty());
}

#[test]
fn app_version_events_trigger_deployment() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture_dir(dir.path()).unwrap();
    let platform = Platform::new(PlatformConfig::default()).unwrap();
    seed_tweetmi(&platform, BASE_TS);
    platform.publish(
        Event::fact(
            "axiom/app-version",
            "v1",
            vec![Value::from(dir.path().to_str().unwrap())],
        )
        .with_ts(BASE_TS + 1_000_000)
        .with_writers(mip::interset::Interset::singleton("axiom")),
    );
    platform.drain();
    let faults = platform.take_faults();
    assert!(faults.is_empty(), "faults: {faults:?}");

    // migration ran: the deployed module exists and every user has entries
    let versions =
        platform.accumulated(&EventPattern::new(Kind::Fact, "axiom/perm-versions", "v1"));
    assert_eq!(versions.len(), 1);
    let Value::Map(code_map) = &versions[0].data[0] else {
        panic!("missing code map")
    };
    let perm_ns = code_map[MODULE_NAME].as_str().unwrap().to_owned();
    let day = BASE_TS / 86_400_000;
    let alices = platform.accumulated(&EventPattern::new(
        Kind::Fact,
        format!("{perm_ns}/followee-tweets"),
        Value::list(["alice".into(), Value::Int(day)]),
    ));
    assert_eq!(alices.len(), 18);
}

#[test]
fn publish_stamps_missing_timestamps() {
    let platform = Platform::new(PlatformConfig::default()).unwrap();
    platform.publish(Event::fact("raw/x", "k", vec![1.into()]));
    platform.drain();
    let stored = platform
        .store()
        .events_for(&EventPattern::new(Kind::Fact, "raw/x", "k"));
    assert_eq!(stored.len(), 1);
    assert!(stored[0].ts > 0);
}
