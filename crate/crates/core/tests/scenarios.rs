use std::path::PathBuf;

use ucap_core::scenario::{run, Scenario};

fn corpus() -> Vec<PathBuf> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "scn"))
        .collect();
    files.sort();
    files
}

#[test]
fn shipped_scenarios_pass() {
    let files = corpus();
    assert!(files.len() >= 17);
    let mut failures = Vec::new();
    for f in &files {
        let scenario = Scenario::load(f).unwrap_or_else(|e| panic!("{}: {e}", f.display()));
        let outcome = run(&scenario);
        if let Some(fail) = outcome.failure {
            failures.push(format!("{}: {fail}", f.display()));
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn scenarios_are_deterministic() {
    for f in corpus() {
        let s = Scenario::load(&f).unwrap();
        assert_eq!(run(&s).trace, run(&s).trace, "{}", f.display());
    }
}
