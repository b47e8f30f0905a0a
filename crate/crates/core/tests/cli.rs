mod common;

use std::fs;

use common::{fixtures, nomos, smoke_config, smoke_pipeline, stderr, stdout};
use nomos::training::{aggregate_seeds, format_mean_std, MeanStd, RunResult};

#[test]
fn normalize_writes_one_file_per_document() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("norm");
    let manifest = fixtures().join("pretrain/manifest.jsonl");
    let o = nomos(&["normalize", "--manifest", manifest.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let txt = fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "txt"))
        .count();
    assert_eq!(txt, 5);
    let report = fs::read_to_string(out.join("report.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 5);
    assert!(out.join("resolved_config.toml").exists());
    assert!(out.join("run.json").exists());
}

#[test]
fn normalize_missing_file_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixtures().join("missing_manifest.jsonl");
    let o = nomos(&[
        "normalize",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("does_not_exist.txt"), "{}", stderr(&o));
}

#[test]
fn normalize_corrupted_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("norm");
    let manifest = fixtures().join("corrupt/manifest.jsonl");
    let o = nomos(&["normalize", "--manifest", manifest.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("fek_damaged"));
    let report = fs::read_to_string(out.join("report.jsonl")).unwrap();
    let flagged: Vec<&str> = report.lines().filter(|l| l.contains("\"flagged\":true")).collect();
    assert_eq!(flagged.len(), 1);
    assert!(flagged[0].contains("fek_damaged"));
}

#[test]
fn unknown_config_key_exits_1_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[finetune]\nepochs = 3\nlearnig_rate = 3e-5\nbatch_size = 8\nseed = 1\n").unwrap();
    let o = nomos(&["tokenizer-train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learnig_rate"), "{}", stderr(&o));
}

#[test]
fn report_matches_aggregate() {
    let runs = fixtures().join("runs_5seed.jsonl");
    let o = nomos(&["report", "--runs", runs.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);

    let results: Vec<RunResult> = fs::read_to_string(&runs)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let agg = aggregate_seeds(&results).unwrap();
    assert_eq!(agg.seeds, vec![3, 5, 7, 11, 19]);
    let micro = agg.test["micro"];
    let cell = format_mean_std(
        MeanStd {
            mean: micro.mean * 100.0,
            std: micro.std * 100.0,
        },
        1,
    );
    // test micro values 78.1 77.2 77.9 77.0 77.8
    assert_eq!(cell, "77.6 (0.5)");
    let test_row = text.lines().find(|l| l.starts_with("test")).unwrap();
    assert!(test_row.contains(&cell), "{text}");
    let header = text.lines().next().unwrap();
    assert!(header.contains("MICRO") || header.contains("micro"), "{header}");
}

#[test]
fn smoke_pipeline_and_task_head_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let root = smoke_pipeline(dir.path());
    for stage in ["normalize", "tokenizer", "pretrain", "finetune-ner", "evaluate-ner"] {
        let d = root.join(stage);
        assert!(d.join("resolved_config.toml").exists(), "{stage}");
        assert!(d.join("run.json").exists(), "{stage}");
    }
    assert!(root.join("evaluate-ner/report.tsv").exists());
    assert!(root.join("evaluate-ner/metrics.json").exists());
    assert_eq!(
        fs::read_to_string(root.join("pretrain/loss_curve.tsv")).unwrap().lines().count(),
        1 + 200 / 20
    );

    // an NER checkpoint has no sequence head
    let cfg = dir.path().join("run.toml");
    let o = nomos(&[
        "evaluate",
        "--config",
        cfg.to_str().unwrap(),
        "--task",
        "volume",
        "--checkpoint",
        root.join("finetune-ner").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    // a pretrained checkpoint has no task head at all
    let o = nomos(&[
        "evaluate",
        "--config",
        cfg.to_str().unwrap(),
        "--task",
        "ner",
        "--checkpoint",
        root.join("pretrain").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn resolved_config_reparses() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let o = nomos(&["tokenizer-train", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let resolved = dir.path().join("runs/tokenizer/resolved_config.toml");
    let o = nomos(&[
        "tokenizer-train",
        "--config",
        resolved.to_str().unwrap(),
        "--out",
        dir.path().join("again").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(dir.path().join("runs/tokenizer/vocab.txt")).unwrap(),
        fs::read(dir.path().join("again/vocab.txt")).unwrap()
    );
}

#[test]
fn output_root_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixtures().join("pretrain/manifest.jsonl");
    let o = std::process::Command::new(env!("CARGO_BIN_EXE_nomos"))
        .args(["normalize", "--manifest", manifest.to_str().unwrap()])
        .env("NOMOS_OUT", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("normalize/report.jsonl").exists());
}
