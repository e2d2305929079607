//! Events as the only unit of state: changes accumulate into per-observer
//! totals, and atomic updates remove one tuple while adding another at a
//! single instant.
//!
//! Run with: cargo run --example event_accumulation

use mip::events::{accumulate_all, join_atomic_updates, split_atomic_update, Event};

fn main() {
    // a task list keyed by owner: set, edit, complete
    let created = Event::fact("todo/task", "alice", vec!["buy milk".into()]).with_ts(1_000);
    let edited = Event::fact("todo/task", "alice", vec!["buy oat milk".into()])
        .with_removed(vec!["buy milk".into()])
        .with_ts(2_000);
    let done = Event::fact("todo/task", "alice", vec!["buy oat milk".into()])
        .with_change(-1)
        .with_ts(3_000);

    // an atomic update is one event carrying both halves
    let halves = split_atomic_update(&edited);
    println!("the edit splits into {} changes:", halves.len());
    for h in &halves {
        println!("  change {:+} {}", h.change, h.data[0]);
    }
    // and the halves join back into the original
    assert_eq!(join_atomic_updates(&halves), vec![edited.clone()]);

    // accumulate the full history: totals per distinct tuple
    let acc = accumulate_all(&[created, edited, done]);
    println!("accumulated entries:");
    for entry in acc.entries() {
        println!(
            "  {:?} total {:+} latest ts {}",
            entry.base.data[0], entry.total_change, entry.latest_ts
        );
    }
    // only positive totals surface as current state: the list is empty
    let current = acc.accumulated_events();
    println!("current state: {} live tasks", current.len());
    assert!(current.is_empty());
}
