use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pgl_cli::{run, EXIT_FAILURE, EXIT_OK, EXIT_USAGE};
use pgl_core::networks::{init_online, target_from_online, NetworkConfig, ENCODER};
use pgl_core::rng::{stream, streams};
use pgl_core::trainer::Checkpoint;

fn cli(args: &[&str]) -> i32 {
    run(args.iter().map(|s| s.to_string()))
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

/// Small pretrain/train/val splits under `root`.
fn datasets(root: &Path) -> Vec<String> {
    for (split, seed, count) in [("pretrain", "1", "3"), ("train", "2", "2"), ("val", "3", "1")] {
        let out = s(&root.join(split));
        assert_eq!(cli(&["gendata", "--out", &out, "--count", count, "--seed", seed, "--split", split]), EXIT_OK);
    }
    ["pretrain", "train", "val"]
        .iter()
        .map(|split| format!("--data.{split}={}", s(&root.join(split).join("manifest.txt"))))
        .collect()
}

fn with(base: &[&str], extra: &[String]) -> Vec<String> {
    base.iter().map(|s| s.to_string()).chain(extra.iter().cloned()).collect()
}

fn cli_owned(args: &[String]) -> i32 {
    run(args.iter().cloned())
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn help_and_bad_invocations() {
    assert_eq!(cli(&["--help"]), EXIT_OK);
    assert_eq!(cli(&["frobnicate"]), EXIT_USAGE);
    assert_eq!(cli(&["pretrain", "--trainer.bogus=1"]), EXIT_USAGE);
    assert_eq!(cli(&["pretrain", "--trainer.steps=many"]), EXIT_USAGE);
    assert_eq!(cli(&["finetune", "--init", "pretrained"]), EXIT_USAGE);
}

#[test]
fn config_file_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "[trainer]\nnot_a_key = 3\n").unwrap();
    assert_eq!(cli(&["pretrain", "--config", &s(&bad)]), EXIT_USAGE);
    let missing = dir.path().join("missing.cfg");
    assert_eq!(cli(&["pretrain", "--config", &s(&missing)]), EXIT_FAILURE);
}

#[test]
fn gendata_writes_volumes_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("set");
    assert_eq!(cli(&["gendata", "--out", &s(&out), "--count", "10", "--seed", "4"]), EXIT_OK);
    let vols: Vec<PathBuf> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "rvf"))
        .collect();
    assert_eq!(vols.len(), 10);
    let manifest = pgl_core::data::DatasetManifest::load(out.join("manifest.txt")).unwrap();
    assert_eq!(manifest.paths.len(), 10);
    assert!(manifest.paths.iter().all(|p| p.exists()));
    assert!(out.join(pgl_cli::RESOLVED_CONFIG).exists());
}

#[test]
fn pretrain_finetune_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = datasets(root);

    let pre = root.join("pre");
    let steps = 4;
    let args = with(
        &["pretrain", "--trainer.steps=4", "--trainer.warmup_steps=1", "--trainer.checkpoint_every=2"],
        &[data.clone(), vec![format!("--output.dir={}", s(&pre))]].concat(),
    );
    assert_eq!(cli_owned(&args), EXIT_OK);
    // header plus one row per step
    assert_eq!(csv_rows(&pre.join("metrics.csv")).len(), steps + 1);
    let ckpt = pre.join("ckpt_000004.pgl");
    assert!(ckpt.exists() && pre.join("ckpt_000002.pgl").exists());
    assert!(pre.join(pgl_cli::RESOLVED_CONFIG).exists());

    let ft = |name: &str, init: &[&str]| -> PathBuf {
        let out = root.join(name);
        let mut args = vec!["finetune".to_string(), "--finetune.steps=3".into(), "--finetune.eval_every=3".into()];
        args.push("--init".into());
        args.extend(init.iter().map(|s| s.to_string()));
        args.extend(data.iter().cloned());
        args.push(format!("--output.dir={}", s(&out)));
        assert_eq!(cli_owned(&args), EXIT_OK);
        out
    };
    let random = ft("ft_random", &["random"]);
    let pretrained = ft("ft_ckpt", &["checkpoint", &s(&ckpt)]);

    // same fine-tune seed: the two initializations differ only in encoder rows
    let table = |dir: &Path| -> BTreeMap<String, (String, String)> {
        csv_rows(&dir.join("init.csv"))
            .into_iter()
            .skip(1)
            .map(|r| (r[0].clone(), (r[1].clone(), r[2].clone())))
            .collect()
    };
    let (a, b) = (table(&random), table(&pretrained));
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    let differing: Vec<&String> = a.keys().filter(|k| a[*k].1 != b[*k].1).collect();
    assert!(!differing.is_empty());
    assert!(differing.iter().all(|k| k.starts_with(ENCODER)), "{differing:?}");
    assert!(b.iter().all(|(k, (src, _))| (src == "checkpoint") == k.starts_with(ENCODER)));

    let val = csv_rows(&pretrained.join("val.csv"));
    assert_eq!(val[0][..3], ["step", "mean_dice", "mean_iou"]);

    let weights = pretrained.join("seg.pgl");
    let eval_dir = root.join("eval");
    let test_manifest = root.join("val").join("manifest.txt");
    let args = vec![
        "eval".to_string(),
        "--weights".into(),
        s(&weights),
        "--manifest".into(),
        s(&test_manifest),
        format!("--output.dir={}", s(&eval_dir)),
    ];
    assert_eq!(cli_owned(&args), EXIT_OK);
    let rows = csv_rows(&eval_dir.join("eval.csv"));
    assert_eq!(rows[0], ["class", "dice", "iou"]);
    // three classes plus the mean row
    assert_eq!(rows.len(), 1 + 3 + 1);
    assert_eq!(rows[4][0], "mean");
    for r in &rows[1..] {
        let d: f64 = r[1].parse().unwrap();
        assert!((0.0..=1.0).contains(&d));
    }
}

#[test]
fn finetune_rejects_out_of_range_labels() {
    let dir = tempfile::tempdir().unwrap();
    let data = datasets(dir.path());
    let args = with(
        &["finetune", "--finetune.num_classes=2", "--finetune.steps=1"],
        &[data, vec![format!("--output.dir={}", s(&dir.path().join("o")))]].concat(),
    );
    assert_eq!(cli_owned(&args), EXIT_USAGE);
}

#[test]
fn finetune_rejects_mismatched_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = datasets(dir.path());
    let mut other = NetworkConfig::desk();
    other.encoder.widths = vec![8, 24];
    let online = init_online::<f32>(&other, &mut stream(0, streams::INIT)).unwrap();
    let path = dir.path().join("wrong.pgl");
    Checkpoint {
        target: target_from_online(&online),
        online,
        opt: BTreeMap::new(),
        step: 0,
        rng: [0; 7],
    }
    .save(&path)
    .unwrap();
    let args = with(
        &["finetune", "--finetune.steps=1", "--init", "checkpoint", &s(&path)],
        &[data, vec![format!("--output.dir={}", s(&dir.path().join("o")))]].concat(),
    );
    assert_eq!(cli_owned(&args), EXIT_USAGE);
}

#[test]
fn inspect_align_reports_full_agreement() {
    let report = pgl_cli::cmd_inspect_align(&pgl_core::config::RunConfig::default(), 50, 3, true).unwrap();
    assert!(report.contains("oracle agreement: 50/50"), "{report}");
    assert_eq!(cli(&["inspect-align", "--pairs", "20", "--quiet"]), EXIT_OK);
}
