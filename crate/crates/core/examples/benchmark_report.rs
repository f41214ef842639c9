//! Comparing tracker variants across conditions and printing a results table.
//!
//! `cargo run --release --example benchmark_report -- 3` averages over three seeds.

use gbot::bench::{build_table, render_markdown, run_builtin, Method};
use gbot::detector::Condition;
use gbot::scene::ScriptOptions;

fn main() {
    let seeds: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1);
    let mut records = Vec::new();
    for condition in [Condition::Normal, Condition::Hand] {
        for method in Method::ALL {
            for seed in 0..seeds {
                let opts = ScriptOptions {
                    n_frames: 120,
                    condition,
                    seed,
                    ..ScriptOptions::default()
                };
                records.push(
                    run_builtin("hobby_corner_clamp", &opts, method)
                        .unwrap()
                        .record,
                );
            }
        }
    }
    print!("{}", render_markdown(&build_table(&records).unwrap()));
}
