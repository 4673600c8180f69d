//! Runs every acceptance criterion, prints one PASS/FAIL line each, and fails only on
//! criteria checks that are not recorded as known-unattainable.

use kerrvapor_cli::commands::default_workers;
use kerrvapor_cli::validate::{self, ValidateOptions, KNOWN_UNATTAINABLE};

fn main() {
    // `cargo test -- --list` and filters should not trigger an hour of Monte-Carlo
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let opts = ValidateOptions {
        quick: false,
        only: None,
        seed: 1,
        workers: default_workers(),
    };
    println!("known-unattainable checks: {KNOWN_UNATTAINABLE:?}");
    let reports = validate::run(&opts, |r| println!("{}", r.line())).expect("acceptance suite could not start");
    let unexpected: Vec<(u8, Vec<String>)> = reports
        .iter()
        .map(|r| (r.id, r.unexpected_failures()))
        .filter(|(_, f)| !f.is_empty())
        .collect();
    let passed = reports.iter().filter(|r| r.passed()).count();
    println!("{passed} of {} criteria passed", reports.len());
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
