//! Drive the installed binary end to end against a durable data directory:
//! deploy, publish, query, bench, and error paths.

use std::path::Path;
use std::process::Command;
use std::sync::Arc;

use mip::gateway::IdentityPred;
use mip::interset::{GroupTerm, Interset};
use mip::service::fixture::write_fixture_dir;
use mip::store::QuerySource;
use mip::value::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mip"))
}

fn run(data: &Path, args: &[&str]) -> (String, String, bool) {
    let out = bin()
        .arg("--data-dir")
        .arg(data)
        .args(args)
        .output()
        .expect("binary runs");
    (
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
        out.status.success(),
    )
}

#[test]
fn deploy_publish_query_round_trip() {
    let data = tempfile::tempdir().unwrap();
    let fixture = tempfile::tempdir().unwrap();
    write_fixture_dir(fixture.path()).unwrap();

    let (stdout, stderr, ok) = run(
        data.path(),
        &["deploy", "v1", fixture.path().to_str().unwrap()],
    );
    assert!(ok, "deploy failed: {stderr}");
    assert!(stdout.contains("tweetmi.core -> perm."), "{stdout}");
    let perm_ns = stdout
        .lines()
        .find_map(|l| l.trim().strip_prefix("tweetmi.core -> "))
        .unwrap()
        .to_owned();

    // publish a follow and a tweet from files, in separate processes
    let follow = data.path().join("follow.json");
    std::fs::write(
        &follow,
        r#"{"kind":"fact","name":"tweetmi/follows","key":"alice","data":["bob"],"ts":1700000000200,"change":1,"writers":[[{"id":"alice"}]],"readers":[[]]}"#,
    )
    .unwrap();
    let tweet = data.path().join("tweet.json");
    std::fs::write(
        &tweet,
        r#"{"kind":"fact","name":"tweetmi/tweeted","key":"bob","data":["hello from the cli",1700000000123],"ts":1700000000123,"change":1,"writers":[[{"id":"bob"}]],"readers":[[]]}"#,
    )
    .unwrap();
    let (_, stderr, ok) = run(data.path(), &["publish", follow.to_str().unwrap()]);
    assert!(ok, "publish follow failed: {stderr}");
    let (_, stderr, ok) = run(data.path(), &["publish", tweet.to_str().unwrap()]);
    assert!(ok, "publish tweet failed: {stderr}");

    // a scalar key lists the per-day partitions it prefixes
    let (stdout, stderr, ok) = run(
        data.path(),
        &[
            "query",
            "fact",
            &format!("{perm_ns}/followee-tweets"),
            "alice",
        ],
    );
    assert!(ok, "query failed: {stderr}");
    assert!(stdout.contains("hello from the cli"), "{stdout}");
    assert!(stderr.contains("1 rows"), "{stderr}");

    // exact compound keys work too
    let day = 1_700_000_000_123i64 / 86_400_000;
    let (stdout, _, ok) = run(
        data.path(),
        &[
            "query",
            "fact",
            &format!("{perm_ns}/followee-tweets"),
            &format!("[\"alice\",{day}]"),
        ],
    );
    assert!(ok);
    assert!(stdout.contains("hello from the cli"));
}

#[test]
fn forged_events_grant_no_membership_even_when_published_directly() {
    // operator-side publishing bypasses the gateway, but the identity
    // predicate still rejects facts not written by the group's rule
    let data = tempfile::tempdir().unwrap();
    let forged = data.path().join("forged.json");
    std::fs::write(
        &forged,
        r#"{"kind":"fact","name":"perm.AAA/friend","key":"eve","data":["alice"],"ts":3000,"change":1,"writers":[[{"id":"eve"}]],"readers":[[]]}"#,
    )
    .unwrap();
    let (_, stderr, ok) = run(data.path(), &["publish", forged.to_str().unwrap()]);
    assert!(ok, "publish failed: {stderr}");

    let store = Arc::new(mip::store::EventStore::open(&data.path().join("events")).unwrap());
    let pred = IdentityPred::new(store as Arc<dyn QuerySource>, Some("eve".into()));
    assert!(!pred.contains(&Interset::simple([GroupTerm::group(
        "perm.AAA/friend",
        [Value::from("alice")]
    )])));
}

#[test]
fn bench_reports_both_paths() {
    let out = bin().args(["bench", "--runs", "20"]).output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("1-link path mean"), "{stdout}");
    assert!(stdout.contains("2-link path mean"), "{stdout}");
}

#[test]
fn usage_errors_exit_nonzero() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert!(!out.status.success());
    let out = bin()
        .args(["deploy", "v1", "/definitely/not/a/dir"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let out = bin()
        .args(["query", "nonsense-kind", "a/b", "k"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn config_file_sets_the_data_dir() {
    let data = tempfile::tempdir().unwrap();
    let fixture = tempfile::tempdir().unwrap();
    write_fixture_dir(fixture.path()).unwrap();
    let cfg = data.path().join("cfg.json");
    std::fs::write(
        &cfg,
        serde_json::json!({ "data_dir": data.path().join("state") }).to_string(),
    )
    .unwrap();
    let out = bin()
        .args(["--config", cfg.to_str().unwrap()])
        .args(["deploy", "v1", fixture.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(data.path().join("state/events/events.log").exists());
}
