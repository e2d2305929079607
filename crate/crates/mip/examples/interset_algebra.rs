//! Tour of the interset algebra: building symbolic user sets and reasoning
//! about containment without ever enumerating members.
//!
//! Run with: cargo run --example interset_algebra

use mip::interset::{
    empty_set, enum_groups, intersection, subset, union, universe, GroupTerm, Interset,
};
use mip::value::Value;

fn main() {
    let friend = |of: &str| GroupTerm::group("app/friend", [Value::from(of)]);

    // the universal set is the intersection of no sets; the empty set is
    // the union of no sets
    println!("universe: {}", universe().canonical_text());
    println!("empty:    {}", empty_set().canonical_text());

    // "alice, and also all of alice's friends"
    let alice_circle =
        Interset::union_of([vec![GroupTerm::identity("alice")], vec![friend("alice")]]);
    let bob_circle = Interset::union_of([vec![GroupTerm::identity("bob")], vec![friend("bob")]]);
    println!("alice's circle: {}", alice_circle.canonical_text());

    // intersecting the two circles keeps mutual friends plus each user if
    // they are in the other's circle; "alice who is also bob" drops out
    let both = intersection(&alice_circle, &bob_circle);
    println!("both circles:   {}", both.canonical_text());

    // union concatenates, subsuming components that are already covered
    let either = union(
        &Interset::singleton("alice"),
        &Interset::simple([GroupTerm::identity("alice"), friend("bob")]),
    );
    println!("subsumed union: {}", either.canonical_text());

    // subset questions answer membership symbolically: intersecting more
    // sets always shrinks
    let narrow = intersection(
        &Interset::singleton("alice"),
        &Interset::simple([friend("bob")]),
    );
    assert!(subset(&narrow, &Interset::singleton("alice")));
    assert!(subset(&narrow, &Interset::simple([friend("bob")])));
    assert!(!subset(&Interset::singleton("alice"), &narrow));
    println!("subset checks hold");

    // every group mentioned anywhere, for prefetching memberships
    let groups = enum_groups(&both);
    println!("groups referenced: {}", groups.len());
}
