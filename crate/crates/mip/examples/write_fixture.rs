//! Write the micro-blogging fixture as a deployable version directory.
//!
//! Run with: cargo run --example write_fixture -- <dir>

fn main() {
    let dir = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "tweetmi-fixture".into());
    mip::service::fixture::write_fixture_dir(std::path::Path::new(&dir)).unwrap();
    println!("fixture written to {dir}");
}
