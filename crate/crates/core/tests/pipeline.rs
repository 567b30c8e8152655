mod common;

use std::path::Path;
use std::process::Command;

use common::{tree, Fixture};
use selfner::corpus::LabelSet;
use selfner::eval::MeanStd;
use selfner::pipeline::{
    compare_reports, predictions_file, Pipeline, PoolSource, PredictionRecord, RunReport, SweepAxis, ANNOTATED_FILE,
    POOL_FILE, REPORT_FILE,
};
use selfner::prompting::build_zero_shot_prompt;
use selfner::retrieval::RetrievalKind;
use selfner::{AnnotatedSample, Error};

fn predictions(p: &Pipeline, path: &Path) -> Vec<PredictionRecord> {
    p.read_predictions(path).unwrap().1
}

fn cached_prompts(cache: &Path) -> Vec<(f64, String)> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(cache).unwrap() {
        let path = e.unwrap().path();
        if path.extension().is_some_and(|x| x == "meta") {
            let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
            out.push((v["temperature"].as_f64().unwrap(), v["prompt"].as_str().unwrap().to_string()));
        }
    }
    out
}

#[test]
fn annotation_requests_n_per_sample_and_resumes_from_cache() {
    let fx = Fixture::new(40, 10);
    let mut cfg = fx.config("run");
    cfg.unlabeled_subsample = 40;
    let out = fx.path("run/annotated.jsonl");
    let p = Pipeline::new(cfg.clone()).unwrap();
    let a = p.run_annotate(&fx.unlabeled, None, &out).unwrap();
    assert_eq!(a.len(), 40);
    assert_eq!(p.backend_calls(), 40 * 5);
    let first = std::fs::read(&out).unwrap();

    let again = Pipeline::new(cfg).unwrap();
    again.run_annotate(&fx.unlabeled, None, &out).unwrap();
    assert_eq!(again.backend_calls(), 0);
    assert_eq!(std::fs::read(&out).unwrap(), first);
}

#[test]
fn bootstrapped_annotation_prompts_carry_k_demonstrations() {
    let fx = Fixture::new(30, 10);
    let mut cfg = fx.config("zero");
    cfg.cache_dir = Some(fx.path("cache_zero"));
    let zero = Pipeline::new(cfg).unwrap();
    zero.run_annotate(&fx.unlabeled, None, &fx.path("zero/annotated.jsonl")).unwrap();
    zero.run_select(&fx.path("zero/annotated.jsonl"), &fx.path("zero/pool.jsonl")).unwrap();

    let mut cfg = fx.config("boot");
    cfg.cache_dir = Some(fx.path("cache_boot"));
    let k = cfg.retrieval.k;
    let boot = Pipeline::new(cfg).unwrap();
    let pool = fx.path("zero/pool.jsonl");
    boot.run_annotate(
        &fx.unlabeled,
        Some(PoolSource {
            pool: &pool,
            index: None,
        }),
        &fx.path("boot/annotated.jsonl"),
    )
    .unwrap();
    let prompts = cached_prompts(&fx.path("cache_boot"));
    assert_eq!(prompts.len(), 30 * 5);
    for (_, prompt) in &prompts {
        assert_eq!(prompt.matches("Text:").count(), k + 1);
    }
}

#[test]
fn no_demos_and_zero_k_inference_use_zero_shot_prompts() {
    let fx = Fixture::new(10, 20);
    let ls = LabelSet::ace05();
    for variant in ["no_demos", "k0"] {
        let mut cfg = fx.config(variant);
        if variant == "no_demos" {
            cfg.retrieval.kind = RetrievalKind::NoDemos;
        } else {
            cfg.retrieval.k = 0;
        }
        let p = Pipeline::new(cfg).unwrap();
        let dir = fx.path(variant);
        let files = p.run_infer(None, &fx.test, &dir).unwrap();
        assert_eq!(files.len(), 2);
        for f in files {
            for r in predictions(&p, &f) {
                assert_eq!(r.prompt, build_zero_shot_prompt(&ls, &r.text));
                assert!(r.demo_ids.is_empty());
            }
        }
    }
}

#[test]
fn inference_with_demonstrations_needs_a_non_empty_pool() {
    let fx = Fixture::new(10, 10);
    let p = Pipeline::new(fx.config("x")).unwrap();
    assert!(matches!(p.run_infer(None, &fx.test, &fx.path("x")), Err(Error::Config(_))));
    let empty = fx.path("empty_pool.jsonl");
    std::fs::write(&empty, "").unwrap();
    let src = PoolSource {
        pool: &empty,
        index: None,
    };
    assert!(matches!(p.run_infer(Some(src), &fx.test, &fx.path("x")), Err(Error::EmptyPool)));
}

#[test]
fn gold_pool_carries_full_votes_and_drives_inference() {
    let fx = Fixture::new(30, 20);
    let cfg = fx.config("gold");
    let p = Pipeline::new(cfg).unwrap();
    let pool = fx.path("gold/pool.jsonl");
    assert_eq!(p.run_ingest(&fx.unlabeled, &pool, None, 0, true).unwrap(), 30);
    let samples: Vec<AnnotatedSample> = p.read_annotated(&pool).unwrap();
    assert!(samples.iter().all(|s| s.sample_score == 5.0 && s.predictions.iter().all(|e| e.votes == 5)));
    let files = p
        .run_infer(
            Some(PoolSource {
                pool: &pool,
                index: None,
            }),
            &fx.test,
            &fx.path("gold"),
        )
        .unwrap();
    for r in predictions(&p, &files[0]) {
        assert_eq!(r.demo_ids.len(), 4);
        assert_eq!(r.prompt.matches("Text:").count(), 5);
    }
}

#[test]
fn two_seeds_give_two_files_and_a_mean_std_report() {
    let fx = Fixture::new(30, 60);
    let p = Pipeline::new(fx.config("seeds")).unwrap();
    let dir = fx.path("seeds");
    let files = p.run_infer(None, &fx.test, &dir).unwrap_err();
    assert!(matches!(files, Error::Config(_)));

    let mut cfg = fx.config("seeds");
    cfg.retrieval.kind = RetrievalKind::NoDemos;
    let p = Pipeline::new(cfg).unwrap();
    p.run_infer(None, &fx.test, &dir).unwrap();
    assert!(dir.join(predictions_file(0)).exists());
    assert!(dir.join(predictions_file(1)).exists());
    let ids0: Vec<String> = predictions(&p, &dir.join(predictions_file(0))).into_iter().map(|r| r.id).collect();
    let ids1: Vec<String> = predictions(&p, &dir.join(predictions_file(1))).into_iter().map(|r| r.id).collect();
    assert_eq!(ids0.len(), 30);
    assert_ne!(ids0, ids1);

    let report = p.run_eval(&fx.test, &dir, &dir).unwrap();
    let f1s: Vec<f64> = report.per_seed.iter().map(|s| s.score.f1).collect();
    assert_eq!(f1s.len(), 2);
    let ms = MeanStd::of(&f1s);
    assert!((report.aggregate.f1.mean - ms.mean).abs() < 1e-12);
    assert!((report.aggregate.f1.std - ms.std).abs() < 1e-12);
    assert_eq!(report.formatted.f1, ms.format_percent());
    assert_eq!(report.config_digest, p.digest());
    assert!(report.generated_at.is_none());
}

#[test]
fn outputs_do_not_depend_on_parallelism() {
    let fx = Fixture::new(30, 20);
    let mut runs = Vec::new();
    for threads in [1, 4] {
        let name = format!("par{threads}");
        let mut cfg = fx.config(&name);
        cfg.parallelism = threads;
        cfg.cache_dir = Some(fx.path(&format!("cache{threads}")));
        let p = Pipeline::new(cfg).unwrap();
        p.run_loop(&fx.unlabeled, &fx.test, &fx.path(&name)).unwrap();
        runs.push(tree(&fx.path(&name)));
    }
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn loop_writes_every_iteration_and_a_summary() {
    let fx = Fixture::new(30, 20);
    let mut cfg = fx.config("loop");
    cfg.iterations = 3;
    let p = Pipeline::new(cfg).unwrap();
    let out = fx.path("loop");
    let reports = p.run_loop(&fx.unlabeled, &fx.test, &out).unwrap();
    assert_eq!(reports.len(), 4);
    for t in 1..=3 {
        let dir = out.join(format!("iter_{t}"));
        for f in [ANNOTATED_FILE, POOL_FILE, REPORT_FILE] {
            assert!(dir.join(f).exists(), "{}", dir.join(f).display());
        }
    }
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 5);
    assert!(summary.lines().nth(1).unwrap().starts_with("iter_0,"));

    // Iteration 0 equals a standalone no-demos run.
    let mut base = fx.config("base");
    base.retrieval.kind = RetrievalKind::NoDemos;
    let b = Pipeline::new(base).unwrap();
    b.run_infer(None, &fx.test, &fx.path("base")).unwrap();
    let standalone = b.run_eval(&fx.test, &fx.path("base"), &fx.path("base")).unwrap();
    assert_eq!(standalone.per_seed, reports[0].per_seed);
    assert_eq!(standalone.formatted, reports[0].formatted);
    for s in [0, 1] {
        assert_eq!(
            predictions(&b, &fx.path("base").join(predictions_file(s))),
            predictions(&b, &out.join("iter_0").join(predictions_file(s)))
        );
    }

    // Iteration t annotates with demonstrations from iteration t - 1. Scripted
    // answers ignore demonstrations, so iterations 2 and 3 send identical
    // prompts and the second set is served from the cache.
    let prompts = cached_prompts(&fx.path("loop/cache"));
    let icl_annotation = prompts
        .iter()
        .filter(|(t, p)| *t == 0.7 && p.matches("Text:").count() == 5)
        .count();
    assert_eq!(icl_annotation, 30 * 5);
    assert_eq!(
        std::fs::read(out.join("iter_2/pool.jsonl")).unwrap(),
        std::fs::read(out.join("iter_3/pool.jsonl")).unwrap()
    );
}

#[test]
fn sweep_annotates_once_and_records_failures() {
    let fx = Fixture::new(30, 20);
    let p = Pipeline::new(fx.config("sweep")).unwrap();
    let out = fx.path("sweep");
    let values: Vec<String> = ["3.0", "4.0", "5.0", "7.0"].iter().map(|s| s.to_string()).collect();
    let table = p.run_sweep(SweepAxis::ThEntity, &values, &fx.unlabeled, &fx.test, &out).unwrap();
    assert_eq!(table.rows.len(), 4);
    assert_eq!(table.rows[0].0, "th_entity=3.0");
    let err_col = table.columns.iter().position(|c| c == "error").unwrap();
    assert!(table.rows[3].1[err_col].contains("th_entity"));
    assert!(table.rows[..3].iter().all(|(_, cells)| cells[err_col].is_empty()));
    assert_eq!(
        std::fs::read_dir(&out)
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().join(ANNOTATED_FILE).exists())
            .count(),
        0
    );
    assert!(out.join(ANNOTATED_FILE).exists());
    assert!(out.join("sweep.csv").exists());

    let annotation_calls = 30 * 5;
    let p2 = Pipeline::new(fx.config("sweep")).unwrap();
    let vals: Vec<String> = vec!["0".into(), "2".into(), "4".into()];
    p2.run_sweep(SweepAxis::K, &vals, &fx.unlabeled, &fx.test, &fx.path("sweep_k")).unwrap();
    assert!(p2.backend_calls() < annotation_calls + 3 * 2 * 20);
}

#[test]
fn eval_and_report_refuse_mismatched_label_sets() {
    let fx = Fixture::new(10, 20);
    let mut cfg = fx.config("a");
    cfg.retrieval.kind = RetrievalKind::NoDemos;
    let p = Pipeline::new(cfg.clone()).unwrap();
    p.run_infer(None, &fx.test, &fx.path("a")).unwrap();
    p.run_eval(&fx.test, &fx.path("a"), &fx.path("a")).unwrap();

    let custom = fx.path("labels.json");
    let mut types = LabelSet::ace05().types;
    types.push("Miscellaneous".into());
    std::fs::write(&custom, serde_json::json!({ "name": "ace05-plus", "types": types }).to_string()).unwrap();
    cfg.labelset = custom.display().to_string();
    let q = Pipeline::new(cfg).unwrap();
    assert!(matches!(q.run_eval(&fx.test, &fx.path("a"), &fx.path("b")), Err(Error::Data(_))));

    let mut other: RunReport = RunReport::load(&fx.path("a/report.json")).unwrap();
    other.labelset = q.labelset.clone();
    std::fs::write(fx.path("other.json"), serde_json::to_string(&other).unwrap()).unwrap();
    let named = vec![
        ("a".to_string(), fx.path("a/report.json")),
        ("b".to_string(), fx.path("other.json")),
    ];
    assert!(matches!(compare_reports(&named), Err(Error::Data(_))));
    let same = vec![
        ("a".to_string(), fx.path("a/report.json")),
        ("again".to_string(), fx.path("a/report.json")),
    ];
    let t = compare_reports(&same).unwrap();
    assert_eq!(t.columns, vec!["P", "R", "F1"]);
}

#[test]
fn density_separates_true_and_false_votes() {
    let fx = Fixture::new(60, 10);
    let p = Pipeline::new(fx.config("d")).unwrap();
    p.run_annotate(&fx.unlabeled, None, &fx.path("d/annotated.jsonl")).unwrap();
    let d = p.run_density(&fx.path("d/annotated.jsonl"), 5, &fx.path("d")).unwrap();
    assert!(d.mean_true.unwrap() > d.mean_false.unwrap());
    assert!(fx.path("d/density.csv").exists());
}

fn cli(args: &[&str], cwd: &Path) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_selfner"))
        .args(args)
        .current_dir(cwd)
        .env_remove("SELFNER_ENDPOINT")
        .output()
        .unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn cli_exit_codes_follow_the_error_class() {
    let fx = Fixture::new(10, 10);
    let dir = fx.dir.path();
    assert_eq!(cli(&["--help"], dir).0, 0);
    assert_eq!(cli(&["loop", "--bogus"], dir).0, 1);
    assert_eq!(cli(&["eval", "--test", "test.jsonl", "--set", "seeds="], dir).0, 1);
    assert_eq!(cli(&["eval", "--test", "missing.jsonl"], dir).0, 2);
    std::fs::write(dir.join("bad.jsonl"), "{\"id\": \"x\"}\n").unwrap();
    let (code, _, err) = cli(&["ingest", "--input", "bad.jsonl", "--output", "o.jsonl"], dir);
    assert_eq!(code, 2, "{err}");
    let (code, _, err) = cli(
        &[
            "annotate",
            "--unlabeled",
            "unlabeled.jsonl",
            "--backend",
            "remote",
            "--set",
            "endpoint=http://127.0.0.1:9",
            "--set",
            "retry_attempts=1",
            "--set",
            "timeout_secs=2",
        ],
        dir,
    );
    assert_eq!(code, 3, "{err}");
}

#[test]
fn cli_runs_the_stages_in_sequence() {
    let fx = Fixture::new(20, 20);
    let dir = fx.dir.path();
    let common = ["--out", "run", "--k", "4", "--set", "big_k=10", "--set", "p_hit=0.9"];
    let steps: Vec<Vec<&str>> = vec![
        vec!["annotate", "--unlabeled", "unlabeled.jsonl"],
        vec!["select", "--annotated", "run/annotated.jsonl"],
        vec!["index", "--pool", "run/pool.jsonl"],
        vec!["infer", "--test", "test.jsonl", "--pool", "run/pool.jsonl", "--index", "run/index.jsonl"],
        vec!["eval", "--test", "test.jsonl"],
    ];
    for s in steps {
        let args: Vec<&str> = s.iter().chain(common.iter()).copied().collect();
        let (code, _, err) = cli(&args, dir);
        assert_eq!(code, 0, "{args:?}: {err}");
    }
    let (code, out, _) = cli(&["report", "x=run/report.json"], dir);
    assert_eq!(code, 0);
    assert!(out.starts_with("Method"));
    let config = dir.join("cfg.txt");
    std::fs::write(&config, "iterations = 2\nk = 2\nbig_k = 8\n").unwrap();
    let (code, out, err) = cli(
        &["loop", "--config", "cfg.txt", "--unlabeled", "unlabeled.jsonl", "--test", "test.jsonl", "--out", "l"],
        dir,
    );
    assert_eq!(code, 0, "{err}");
    assert_eq!(out.lines().count(), 3);
}
