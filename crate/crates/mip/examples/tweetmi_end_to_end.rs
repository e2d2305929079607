//! The whole platform over the wire: a server with deployed logic, clients
//! authenticating, registering, querying through clauses, and publishing —
//! all across the newline-delimited JSON TCP protocol.
//!
//! Run with: cargo run --example tweetmi_end_to_end

use std::sync::mpsc;
use std::sync::Arc;
use std::time::Duration;

use mip::events::Event;
use mip::gateway::RequestMeta;
use mip::interset::Interset;
use mip::service::client::{Connection, TcpClient};
use mip::service::fixture::{seed_tweetmi, tweet, write_fixture_dir, MODULE_NAME};
use mip::service::{serve_on, Platform, PlatformConfig};
use mip::value::Value;

fn main() {
    let base_ts = 1_700_000_000_000;
    let platform = Platform::new(PlatformConfig::default()).unwrap();
    seed_tweetmi(&platform, base_ts);
    let dir = tempfile::tempdir().unwrap();
    write_fixture_dir(dir.path()).unwrap();
    platform.deploy("v1", dir.path()).unwrap();
    let server = serve_on(platform, 0).unwrap();
    println!("server on {}", server.addr());

    // alice connects, authenticated by the development scheme
    let meta = RequestMeta::default()
        .with_param("_identity", "alice")
        .with_param("_ver", "v1");
    let alice = TcpClient::connect(server.addr(), &meta).unwrap();
    let who = alice.wait_identity(Duration::from_secs(5));
    println!("authenticated as {who:?}");

    // register for stored timeline entries: the server replays history,
    // then streams live matches
    let (tx, rx) = mpsc::channel();
    let followee_name = format!("{MODULE_NAME}/followee-tweets");
    alice.subscribe(
        &followee_name,
        Arc::new(move |e: &Event| {
            let _ = tx.send(e.clone());
        }),
    );
    let day = base_ts / 86_400_000;
    alice.publish(
        Event::reg(
            followee_name.clone(),
            Value::list(["alice".into(), Value::Int(day)]),
        )
        .with_get_existing(true),
    );
    let mut replayed = 0;
    while rx.recv_timeout(Duration::from_secs(2)).is_ok() {
        replayed += 1;
        if replayed == 18 {
            break;
        }
    }
    println!("replayed {replayed} followee tweets for alice");

    // a timeline query answered by the deployed clauses
    let (qtx, qrx) = mpsc::channel();
    alice.subscribe(
        "tweetmi/timeline!",
        Arc::new(move |e: &Event| {
            let _ = qtx.send(e.clone());
        }),
    );
    let q = alice.uuid();
    alice.publish(Event::reg("tweetmi/timeline!", q.as_str()));
    alice.publish(
        Event::fact(
            "tweetmi/timeline?",
            q.as_str(),
            vec!["alice".into(), Value::Int(day), Value::Int(day + 1)],
        )
        .with_ts(alice.time())
        .with_writers(Interset::singleton("alice"))
        .with_readers(Interset::singleton("alice")),
    );
    let mut answers = 0;
    while qrx.recv_timeout(Duration::from_secs(2)).is_ok() {
        answers += 1;
        if answers == 27 {
            break;
        }
    }
    println!("timeline query answered with {answers} entries (followees + own)");

    // live flow: bob tweets, alice's registration picks up the derivation
    let bob = TcpClient::connect(
        server.addr(),
        &RequestMeta::default()
            .with_param("_identity", "bob")
            .with_param("_ver", "v1"),
    )
    .unwrap();
    bob.wait_identity(Duration::from_secs(5));
    bob.publish(tweet("bob", "hot off the presses", base_ts + 80_000));
    match rx.recv_timeout(Duration::from_secs(5)) {
        Ok(live) => println!("live entry for alice: {}", live.data[1]),
        Err(_) => println!("no live entry arrived"),
    }
}
