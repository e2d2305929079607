//! The trust boundary in action: group membership answered from derived
//! facts, forged and unreadable events stopped at the door, and the
//! readability fix for self-excluding readers-sets.
//!
//! Run with: cargo run --example gateway_filtering

use std::sync::Arc;

use mip::events::Event;
use mip::gateway::{GatewaySession, IdentityPred, RuleVersionVerifier};
use mip::interset::{universe, GroupTerm, Interset};
use mip::store::{EventStore, QuerySource};
use mip::value::Value;

fn main() {
    let store = Arc::new(EventStore::in_memory());
    let friend_term = |of: &str| GroupTerm::group("perm.AAA/friend", [Value::from(of)]);

    // membership facts as a rule would derive them: written by the rule's
    // namespace, keyed by the member
    store
        .put(
            &Event::fact("perm.AAA/friend", "alice", vec!["bob".into()])
                .with_ts(1_000)
                .with_writers(Interset::singleton("perm.AAA")),
        )
        .unwrap();
    // a forged one, written by eve herself
    store
        .put(
            &Event::fact("perm.AAA/friend", "eve", vec!["alice".into()])
                .with_ts(2_000)
                .with_writers(Interset::singleton("eve")),
        )
        .unwrap();

    let source: Arc<dyn QuerySource> = store.clone();
    let alice = IdentityPred::new(source.clone(), Some("alice".into()));
    let eve = IdentityPred::new(source.clone(), Some("eve".into()));
    println!(
        "alice in [friend bob]: {}",
        alice.contains(&Interset::simple([friend_term("bob")]))
    );
    println!(
        "eve in [friend alice] via her forged fact: {}",
        eve.contains(&Interset::simple([friend_term("alice")]))
    );

    // a session filters both directions
    let verifier = Arc::new(RuleVersionVerifier::new(source.clone()));
    let session = GatewaySession::new(source, verifier, Some("alice".into()), None);

    // outbound: readable and trustworthy events only
    let own = Event::fact("chat/msg", "alice", vec!["mine".into()])
        .with_writers(Interset::singleton("alice"));
    let someone_elses = Event::fact("chat/msg", "bob", vec!["not yours".into()])
        .with_writers(Interset::singleton("bob"))
        .with_readers(Interset::singleton("bob"));
    println!(
        "deliver own message: {}",
        session.filter_server_to_client(&own)
    );
    println!(
        "deliver bob's private message: {}",
        session.filter_server_to_client(&someone_elses)
    );

    // inbound: you can only publish as yourself, and you always remain able
    // to read what you published
    let forged = Event::fact("chat/msg", "x", vec![]).with_writers(Interset::singleton("bob"));
    println!(
        "alice publishing as bob: {:?}",
        session.filter_client_to_server(&forged).map(|_| "passed")
    );
    let self_excluding = Event::fact("chat/msg", "x", vec![])
        .with_writers(Interset::singleton("alice"))
        .with_readers(Interset::simple([friend_term("alice")]))
        .with_ts(3_000);
    let fixed = session.filter_client_to_server(&self_excluding).unwrap();
    println!(
        "readers after the readability fix: {}",
        fixed.readers.canonical_text()
    );
    assert_ne!(fixed.readers, universe());
}
