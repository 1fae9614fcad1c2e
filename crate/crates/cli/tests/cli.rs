//! End-to-end runs of the shipped binary: data gen, train, eval, plot,
//! ablate, anchors, diagnostics, and the seed override env var.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_lisa");

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("lisa-cli-tests").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("LISA_SEED")
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "lisa {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_train_config(path: &Path, run_id: &str, seed: u64, data_dir: Option<&Path>) {
    let data = match data_dir {
        Some(dir) => format!("[data]\npath = {:?}\n", dir.display().to_string()),
        None => "[data.scene]\nn_samples = 12\nn_subjects = 3\nimage_size = [16, 16]\nseed = 5\n"
            .to_string(),
    };
    let text = format!(
        "run_id = {run_id:?}\n\
         epochs = 1\n\
         batch_size = 4\n\
         learning_rate = 1e-3\n\
         seed = {seed}\n\
         [model]\n\
         embed_dim = 6\n\
         [model.backbone]\n\
         in_channels = 3\n\
         stage_channels = [4, 6]\n\
         detail_stage_index = 0\n\
         guide_stage_index = 1\n\
         aligned_channels = 6\n\
         [model.fusion]\n\
         gate_hidden_channels = 4\n\
         [model.head]\n\
         mlp_hidden = [6, 4]\n\
         {data}"
    );
    fs::write(path, text).unwrap();
}

#[test]
fn full_pipeline_runs_through_the_binary() {
    let dir = tmp("pipeline");

    // data gen
    let spec = dir.join("scene.toml");
    fs::write(
        &spec,
        "n_samples = 8\nn_subjects = 2\nimage_size = [16, 16]\nseed = 3\n",
    )
    .unwrap();
    let data_dir = dir.join("data");
    let out = run_ok(&[
        "data",
        "gen",
        "--spec",
        spec.to_str().unwrap(),
        "--out",
        data_dir.to_str().unwrap(),
    ]);
    assert!(out.contains("8 samples"));
    assert!(data_dir.join("manifest.csv").exists());
    assert!(data_dir.join("images/00000.png").exists());

    // train on the generated directory
    let cfg = dir.join("train.toml");
    write_train_config(&cfg, "cli", 11, Some(&data_dir));
    let run_dir = dir.join("run");
    let out = run_ok(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert!(out.contains("final loss"));
    let ckpt = run_dir.join("cli.ckpt");
    let metrics = run_dir.join("cli_metrics.csv");
    assert!(ckpt.exists() && metrics.exists());

    // eval the checkpoint on the same directory
    let out = run_ok(&[
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        data_dir.to_str().unwrap(),
        "--group-by",
        "attrs",
    ]);
    assert!(out.starts_with("group,count,mean_deg,std_deg,acc_lt_8deg"));
    assert!(out.contains("overall,8,"));
    let eval_csv = run_dir.join("cli_eval.csv");
    let preds_csv = run_dir.join("cli_preds.csv");
    assert!(eval_csv.exists() && preds_csv.exists());

    // plot all three chart kinds
    run_ok(&["plot", "--in", metrics.to_str().unwrap()]);
    assert!(run_dir.join("cli_loss.png").exists());
    run_ok(&["plot", "--in", eval_csv.to_str().unwrap()]);
    assert!(run_dir.join("cli_groups.png").exists());
    run_ok(&["plot", "--in", preds_csv.to_str().unwrap()]);
    assert!(run_dir.join("cli_heatmap.png").exists());
}

#[test]
fn ablate_writes_the_four_variant_table() {
    let dir = tmp("ablate");
    let cfg = dir.join("ab.toml");
    write_train_config(&cfg, "ab", 9, None);
    let mut text = fs::read_to_string(&cfg).unwrap();
    text.push_str(
        "[data.eval_scene]\nn_samples = 6\nn_subjects = 2\nimage_size = [16, 16]\nseed = 21\n",
    );
    text = text.replace("epochs = 1\n", "epochs = 1\nmax_steps = 2\n");
    fs::write(&cfg, text).unwrap();
    let out_dir = dir.join("ablation");
    let out = run_ok(&[
        "ablate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.contains("Ours,"));
    assert!(out.contains("w/o Spectral Injection Block,"));
    assert!(out.contains("w/o Spatial Saliency Gating,"));
    assert!(out.contains("w/o SDM,"));
    assert!(out_dir.join("ab_ablation.csv").exists());
}

#[test]
fn anchors_build_round_trips() {
    let dir = tmp("anchors");
    let prompts = dir.join("prompts.txt");
    fs::write(
        &prompts,
        "a driver looking left\na driver looking right\n\na glance down\n",
    )
    .unwrap();
    let out_file = dir.join("anchors.bin");
    let out = run_ok(&[
        "anchors",
        "build",
        "--prompts",
        prompts.to_str().unwrap(),
        "--out",
        out_file.to_str().unwrap(),
        "--pseudo",
        "--dim",
        "16",
    ]);
    assert!(out.contains("3 anchors of dim 16"));
    let set = lisa_core::sdm::load_anchors(&out_file).unwrap();
    assert_eq!(set.len(), 3);
    assert_eq!(set.dim(), 16);
    assert_eq!(set.prompts[2], "a glance down");
}

#[test]
fn anchors_build_from_encoder_dump() {
    let dir = tmp("dump");
    let prompts = dir.join("prompts.txt");
    fs::write(&prompts, "p one\np two\n").unwrap();
    let dump = dir.join("dump.json");
    fs::write(
        &dump,
        r#"[{"prompt": "p two", "embedding": [0.0, 1.0, 0.0]},
            {"prompt": "p one", "embedding": [1.0, 0.0, 0.0]}]"#,
    )
    .unwrap();
    let out_file = dir.join("anchors.bin");
    run_ok(&[
        "anchors",
        "build",
        "--prompts",
        prompts.to_str().unwrap(),
        "--out",
        out_file.to_str().unwrap(),
        "--encoder-dump",
        dump.to_str().unwrap(),
    ]);
    let set = lisa_core::sdm::load_anchors(&out_file).unwrap();
    assert_eq!(set.len(), 2);
    assert_eq!(set.dim(), 3);
    // Dump order does not matter; prompt text is the join key.
    assert_eq!(set.embeddings()[[0, 0]], 1.0);
    assert_eq!(set.embeddings()[[1, 1]], 1.0);
}

#[test]
fn diag_spectrum_emits_per_corruption_rows() {
    let out = run_ok(&["diag", "spectrum", "--severity", "0.5"]);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("corruption,severity,stability"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 6, "one row per corruption: {rows:?}");
    for row in rows {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 3);
        let stability: f64 = fields[2].parse().unwrap();
        assert!(stability.is_finite() && stability >= 0.0, "{row}");
    }
}

#[test]
fn env_seed_overrides_config_seed() {
    let dir = tmp("envseed");
    let cfg = dir.join("train.toml");
    write_train_config(&cfg, "env", 11, None);

    let base = dir.join("base");
    run_ok(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        base.to_str().unwrap(),
    ]);
    let over = dir.join("over");
    let out = Command::new(BIN)
        .args([
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            over.to_str().unwrap(),
        ])
        .env("LISA_SEED", "99")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let a = fs::read(base.join("env_metrics.csv")).unwrap();
    let b = fs::read(over.join("env_metrics.csv")).unwrap();
    assert_ne!(a, b, "seed override must change the training trajectory");

    let bad = Command::new(BIN)
        .args([
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.join("bad").to_str().unwrap(),
        ])
        .env("LISA_SEED", "not-a-number")
        .output()
        .unwrap();
    assert!(!bad.status.success(), "garbage LISA_SEED must fail");
}

#[test]
fn eval_rejects_unknown_grouping() {
    let dir = tmp("badgroup");
    let out = run(&[
        "eval",
        "--ckpt",
        dir.join("missing.ckpt").to_str().unwrap(),
        "--data",
        dir.to_str().unwrap(),
        "--group-by",
        "subject",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("attrs"));
}
