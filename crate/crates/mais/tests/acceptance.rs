//! Acceptance run: computes the default experiments and prints one PASS/FAIL
//! line per criterion. Documented known failures are reported but only fail
//! the run when MAIS_ACCEPTANCE_STRICT is set.

use mais::acceptance::{evaluate, fatal_count, strict, SuiteResults, KNOWN_FAILURES};
use mais::config::resolve_workers;

fn main() {
    // `cargo test -- --list` and filters meant for other targets
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    if let Some(filter) = args.iter().find(|a| !a.starts_with('-')) {
        if !"acceptance".contains(filter.as_str()) {
            return;
        }
    }
    let workers = resolve_workers(None).expect("worker count");
    let results = SuiteResults::defaults(workers, |id| {
        eprintln!("computing {id} on {workers} worker(s)")
    })
    .expect("default experiments run");
    let criteria = evaluate(&results).expect("criteria evaluate");
    for c in &criteria {
        println!("{}", c.line());
        for l in c.detail_lines() {
            println!("{l}");
        }
    }
    let strict = strict();
    let fatal = fatal_count(&criteria, strict);
    println!(
        "{}/{} criteria pass; {} fatal ({} mode, {} documented known failure checks)",
        criteria.iter().filter(|c| c.pass()).count(),
        criteria.len(),
        fatal,
        if strict { "strict" } else { "default" },
        KNOWN_FAILURES.len()
    );
    if fatal > 0 {
        std::process::exit(1);
    }
}
