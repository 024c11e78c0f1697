//! Acceptance suite: runs every criterion and prints one line per criterion.
//!
//! Runs under `cargo test` with its own `main`; the process fails if any
//! criterion fails. Pass criterion ids as arguments to run a subset.

use scaffolding::experiments::acceptance::{self, Criterion};

fn main() {
    let selected: Vec<Criterion> = {
        let ids: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
        if ids.is_empty() {
            Criterion::ALL.to_vec()
        } else {
            ids.into_iter().filter_map(Criterion::from_id).collect()
        }
    };
    let mut failed = 0;
    for c in selected {
        let outcome = acceptance::run(c);
        println!("{}", outcome.line());
        if !outcome.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("acceptance: {failed} criterion(s) failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
