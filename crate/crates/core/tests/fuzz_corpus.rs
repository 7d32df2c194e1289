//! Replays the checked-in fuzz corpus through the fuzz checks, plus random
//! mutations of every seed, so the decoders are exercised on stable.

#[path = "../../../fuzz/src/checks.rs"]
mod checks;

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn fuzz_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz")
}

fn seeds(target: &str) -> Vec<Vec<u8>> {
    let dir = fuzz_dir().join("corpus").join(target);
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .collect();
    paths.sort();
    paths.iter().map(|p| fs::read(p).unwrap()).collect()
}

#[test]
fn every_target_has_seeds_and_a_binary() {
    let manifest = fs::read_to_string(fuzz_dir().join("Cargo.toml")).unwrap();
    for (name, _) in checks::TARGETS {
        assert!(!seeds(name).is_empty(), "{name} has no seeds");
        assert!(
            manifest.contains(&format!("name = \"{name}\"")),
            "{name} has no fuzz binary"
        );
        assert!(fuzz_dir().join(format!("fuzz_targets/{name}.rs")).exists());
    }
}

#[test]
fn seeds_pass_their_checks() {
    for (name, check) in checks::TARGETS {
        for s in seeds(name) {
            check(&s);
        }
    }
}

#[test]
fn mutated_seeds_never_panic() {
    let mut rng = ChaCha20Rng::seed_from_u64(0xf022);
    for (name, check) in checks::TARGETS {
        let rounds = if *name == "medium" { 300 } else { 1000 };
        for seed in seeds(name) {
            for _ in 0..rounds {
                let mut m = seed.clone();
                match rng.gen_range(0..4) {
                    0 if !m.is_empty() => {
                        let i = rng.gen_range(0..m.len());
                        m[i] ^= 1 << rng.gen_range(0..8);
                    }
                    1 if !m.is_empty() => {
                        let i = rng.gen_range(0..m.len());
                        m[i] = rng.gen();
                    }
                    2 => m.truncate(rng.gen_range(0..=m.len())),
                    _ => {
                        let i = rng.gen_range(0..=m.len());
                        m.insert(i, rng.gen());
                    }
                }
                check(&m);
            }
        }
    }
}
