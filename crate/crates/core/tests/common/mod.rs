#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use selfner::corpus::{write_dataset, Sample};
use selfner::pipeline::RunConfig;

const PEOPLE: &[&str] = &[
    "Barbara Starr", "John Irvine", "Maria Lopez", "Ahmed Karim", "Chen Wei", "Laura Bush", "Tony Blair",
    "Kofi Annan", "Ann Curry", "Paul Bremer",
];
const ORGS: &[&str] = &["ITV News", "Reuters", "the Pentagon press office", "CNN", "the UN", "NATO", "Al Jazeera"];
const GPES: &[&str] = &["Baghdad", "Washington", "France", "Basra", "Texas", "Iraq", "London"];
const LOCS: &[&str] = &["the Gulf", "the desert", "the Tigris river", "the border"];
const FACS: &[&str] = &["the white house", "Pentagon", "the airport", "Camp Doha"];
const VEHS: &[&str] = &["a Humvee", "the tanker", "a helicopter"];
const WEAS: &[&str] = &["missiles", "a rifle", "artillery"];
const FILLER: &[&str] = &[
    "said", "today", "that", "officials", "were", "waiting", "in", "near", "after", "reports", "the", "talks",
    "continued", "on", "monday", "with", "new", "plans", "for", "security",
];

/// A deterministic ACE05-style corpus: every sentence is unique, carries
/// zero to four gold entities and some filler words.
pub fn synthetic_corpus(prefix: &str, n: usize, seed: u64) -> Vec<Sample> {
    let pools: [(&[&str], &str); 7] = [
        (PEOPLE, "Person"),
        (ORGS, "Organization"),
        (GPES, "Geo-Political Entity"),
        (LOCS, "Location"),
        (FACS, "Facility"),
        (VEHS, "Vehicle"),
        (WEAS, "Weapon"),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let n_ents = rng.random_range(0..=4usize);
            let mut words: Vec<String> = Vec::new();
            let mut gold: Vec<(String, String)> = Vec::new();
            for _ in 0..n_ents {
                let (names, etype) = pools[rng.random_range(0..pools.len())];
                let name = names[rng.random_range(0..names.len())];
                if gold.iter().any(|(s, _)| s == name) {
                    continue;
                }
                for _ in 0..rng.random_range(1..4) {
                    words.push(FILLER[rng.random_range(0..FILLER.len())].to_string());
                }
                words.push(name.to_string());
                gold.push((name.to_string(), etype.to_string()));
            }
            for _ in 0..rng.random_range(2..6) {
                words.push(FILLER[rng.random_range(0..FILLER.len())].to_string());
            }
            words.push(format!("( item {prefix}{i} )"));
            words.push(".".into());
            Sample::new(format!("{prefix}{i}"), words.join(" ")).with_gold(gold)
        })
        .collect()
}

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub unlabeled: PathBuf,
    pub test: PathBuf,
}

impl Fixture {
    pub fn new(n_unlabeled: usize, n_test: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let unlabeled = dir.path().join("unlabeled.jsonl");
        let test = dir.path().join("test.jsonl");
        write_dataset(&unlabeled, &synthetic_corpus("u", n_unlabeled, 11)).unwrap();
        write_dataset(&test, &synthetic_corpus("t", n_test, 12)).unwrap();
        Fixture { dir, unlabeled, test }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    /// A noisy scripted configuration writing under `out`.
    pub fn config(&self, out: &str) -> RunConfig {
        let mut c = RunConfig::default();
        c.apply_text(
            "p_hit = 0.9\np_confuse = 0.1\np_spurious = 0.5\nnoise_seed = 7\nk = 4\nbig_k = 12\n\
             test_subsample = 30\nunlabeled_subsample = 60\nseeds = 0,1\nparallelism = 4\n",
            "fixture",
        )
        .unwrap();
        c.out = self.path(out);
        c
    }
}

/// Relative path -> bytes for every file under `root`.
pub fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in walk(root) {
        let rel = entry.strip_prefix(root).unwrap().to_string_lossy().into_owned();
        out.push((rel, std::fs::read(&entry).unwrap()));
    }
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut files = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            files.extend(walk(&p));
        } else {
            files.push(p);
        }
    }
    files
}
