//! Command-level integration tests: training artifacts, resume, eval
//! determinism, detection output contracts and process exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use dettransnet::cli::checkpoint::Checkpoint;
use dettransnet::cli::commands::{
    cmd_detect, cmd_eval, cmd_gen_data, cmd_train, DetectFlags, EvalFlags, TrainFlags,
};
use dettransnet::cli::RunConfig;
use dettransnet::data::{load_coco_json, Split};

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("dtn_cli_{}", tag));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

/// A fast config: tiny model, synthetic data, short schedule.
fn tiny_config_text(out_dir: &Path) -> String {
    format!(
        r#"
[patch]
image_size = 32
patch_size = 8
overlap = 2

[encoder]
embed_dim = 16
depth = 1
heads = 2
mlp_ratio = 2

[residual]
blocks = 1

[rpn]
hidden_dim = 16
pre_nms_top = 50
post_nms_top = 20
anchor_scales = [8.0, 16.0]

[roi]
pool_size = 3
head_hidden = 32
num_classes = 3

[train]
phase1_iters = 10
phase2_iters = 10
batch_size = 2
rois_per_image = 16
seed = 11
warmup_iters = 4
checkpoint_every = 5

[dataset]
mode = "synthetic"
resize_target = 32
synth_count = 6
synth_image_size = 32
synth_seed = 3

[output]
dir = "{}"
"#,
        out_dir.display()
    )
}

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, tiny_config_text(&dir.join("out"))).unwrap();
    path
}

#[test]
fn train_writes_checkpoints_and_full_loss_csv() {
    let dir = workdir("train_smoke");
    let config = write_config(&dir);
    cmd_train(&TrainFlags {
        config,
        ..TrainFlags::default()
    })
    .unwrap();

    let out = dir.join("out");
    assert!(out.join("final.ckpt").exists());
    assert!(out.join("phase1_final.ckpt").exists());
    assert!(out.join("ckpt_000005.ckpt").exists());
    let csv = fs::read_to_string(out.join("loss.csv")).unwrap();
    let lines: Vec<&str> = csv.trim().lines().collect();
    assert_eq!(lines[0], "iteration,phase,total_loss,cls_loss,reg_loss");
    assert_eq!(lines.len(), 21, "header plus one row per iteration");
    // both phases present
    assert!(lines[1].starts_with("0,1,"));
    assert!(lines[20].starts_with("19,2,"));
}

#[test]
fn resume_after_kill_is_bit_identical() {
    let dir = workdir("resume");
    let config = write_config(&dir);

    // uninterrupted run
    let full_out = dir.join("full");
    cmd_train(&TrainFlags {
        config: config.clone(),
        out: Some(full_out.clone()),
        ..TrainFlags::default()
    })
    .unwrap();

    // interrupted at iteration 5 (the cadence checkpoint), then resumed
    let part_out = dir.join("part");
    cmd_train(&TrainFlags {
        config: config.clone(),
        iters_phase1: Some(5),
        iters_phase2: Some(0),
        out: Some(part_out.clone()),
        ..TrainFlags::default()
    })
    .unwrap();
    // the 5-iteration run's final state equals the long run's 5-iter ckpt;
    // resume from the cadence checkpoint of the full config
    let resume_out = dir.join("resumed");
    fs::create_dir_all(&resume_out).unwrap();
    cmd_train(&TrainFlags {
        config,
        out: Some(resume_out.clone()),
        resume: Some(full_out.join("ckpt_000005.ckpt")),
        ..TrainFlags::default()
    })
    .unwrap();

    let a = fs::read(full_out.join("final.ckpt")).unwrap();
    let b = fs::read(resume_out.join("final.ckpt")).unwrap();
    assert_eq!(a, b, "resumed weights differ from the uninterrupted run");
}

#[test]
fn resume_rejects_schedule_overrides() {
    let dir = workdir("resume_flags");
    let config = write_config(&dir);
    cmd_train(&TrainFlags {
        config: config.clone(),
        iters_phase1: Some(5),
        iters_phase2: Some(0),
        ..TrainFlags::default()
    })
    .unwrap();
    let out = dir.join("out");
    let err = cmd_train(&TrainFlags {
        config,
        resume: Some(out.join("final.ckpt")),
        seed: Some(99),
        ..TrainFlags::default()
    })
    .unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn eval_twice_is_byte_identical_and_schema_valid() {
    let dir = workdir("eval");
    let config = write_config(&dir);
    cmd_train(&TrainFlags {
        config,
        ..TrainFlags::default()
    })
    .unwrap();
    let ckpt = dir.join("out/final.ckpt");

    let run = |out: &Path| {
        cmd_eval(&EvalFlags {
            checkpoint: ckpt.clone(),
            out: Some(out.to_path_buf()),
            plot: Some(dir.join("pr.svg")),
            score_threshold: 0.05,
            ..EvalFlags::default()
        })
        .unwrap();
        fs::read(out).unwrap()
    };
    let a = run(&dir.join("eval_a.json"));
    let b = run(&dir.join("eval_b.json"));
    assert_eq!(a, b, "eval JSON must be byte-identical across runs");

    let parsed: serde_json::Value = serde_json::from_slice(&a).unwrap();
    for key in ["ap", "ap50", "ap_small", "ap_medium", "ap_large", "per_class"] {
        assert!(parsed.get(key).is_some(), "missing key {}", key);
    }
    for key in ["ap", "ap50"] {
        if let Some(v) = parsed[key].as_f64() {
            assert!((0.0..=1.0).contains(&v));
        }
    }
    assert!(dir.join("pr.svg").exists());
}

#[test]
fn detect_score_threshold_one_yields_empty_and_boxes_stay_in_bounds() {
    let dir = workdir("detect");
    let config = write_config(&dir);
    cmd_train(&TrainFlags {
        config,
        ..TrainFlags::default()
    })
    .unwrap();
    let ckpt = dir.join("out/final.ckpt");

    // an image of the right shape from the generator
    cmd_gen_data(&dir.join("data"), 2, 32, 77).unwrap();
    let image = dir.join("data/images/synth-00000.png");

    let none = cmd_detect(&DetectFlags {
        checkpoint: ckpt.clone(),
        image: image.clone(),
        score_threshold: Some(1.0),
        ..DetectFlags::default()
    })
    .unwrap();
    assert!(none.is_empty(), "nothing exceeds a score of 1.0");

    let out_image = dir.join("annotated.png");
    let dets = cmd_detect(&DetectFlags {
        checkpoint: ckpt,
        image,
        score_threshold: Some(0.0),
        out_json: Some(dir.join("dets.jsonl")),
        out_image: Some(out_image.clone()),
        ..DetectFlags::default()
    })
    .unwrap();
    for d in &dets {
        assert!(d.bbox.x_min >= 0.0 && d.bbox.y_min >= 0.0);
        assert!(d.bbox.x_max <= 32.0 && d.bbox.y_max <= 32.0);
    }
    // scores are sorted descending in the output
    for w in dets.windows(2) {
        assert!(w[0].score >= w[1].score);
    }
    assert!(out_image.exists());
    let jsonl = fs::read_to_string(dir.join("dets.jsonl")).unwrap();
    assert_eq!(jsonl.trim().lines().count(), dets.len());
}

#[test]
fn gen_data_output_reloads_and_roundtrips() {
    let dir = workdir("gendata");
    cmd_gen_data(&dir, 5, 64, 9).unwrap();
    let load = load_coco_json(&dir.join("annotations.json"), &dir.join("images"), Split::Train).unwrap();
    assert_eq!(load.manifest.samples.len(), 5);
    assert_eq!(load.dropped_boxes, 0);
    assert_eq!(
        load.manifest.class_names,
        vec!["rectangle", "ellipse", "triangle"]
    );
    load.manifest.validate().unwrap();

    // regeneration is byte-deterministic
    let dir2 = workdir("gendata2");
    cmd_gen_data(&dir2, 5, 64, 9).unwrap();
    assert_eq!(
        fs::read(dir.join("annotations.json")).unwrap(),
        fs::read(dir2.join("annotations.json")).unwrap()
    );
    assert_eq!(
        fs::read(dir.join("images/synth-00003.png")).unwrap(),
        fs::read(dir2.join("images/synth-00003.png")).unwrap()
    );
}

#[test]
fn config_file_round_trip_through_disk() {
    let dir = workdir("config");
    let path = write_config(&dir);
    let cfg = RunConfig::load(&path).unwrap();
    let re_path = dir.join("resaved.toml");
    fs::write(&re_path, cfg.to_toml()).unwrap();
    let again = RunConfig::load(&re_path).unwrap();
    assert_eq!(cfg, again);
}

#[test]
fn checkpoint_roundtrip_through_disk_is_bit_exact() {
    let dir = workdir("ckpt");
    let config = write_config(&dir);
    cmd_train(&TrainFlags {
        config,
        iters_phase1: Some(3),
        iters_phase2: Some(2),
        ..TrainFlags::default()
    })
    .unwrap();
    let path = dir.join("out/final.ckpt");
    let ckpt = Checkpoint::load(&path).unwrap();
    // save -> load reproduces every byte
    let path2 = dir.join("out/resaved.ckpt");
    ckpt.save(&path2).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
}

// ── process-level exit codes ─────────────────────────────────────────

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dettransnet"))
}

#[test]
fn exit_codes_follow_the_contract() {
    // usage error: unknown flag
    let out = binary().arg("train").arg("--nope").output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    // config error: missing file
    let out = binary()
        .args(["train", "--config", "/nonexistent/definitely.toml"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    // runtime error: corrupt checkpoint
    let dir = workdir("exitcodes");
    let bad = dir.join("bad.ckpt");
    fs::write(&bad, b"DTNCgarbage").unwrap();
    let out = binary()
        .args(["eval", "--checkpoint"])
        .arg(&bad)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // success path: gen-data
    let out = binary()
        .args(["gen-data", "--count", "1", "--image-size", "32", "--out"])
        .arg(dir.join("d"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn gradcheck_command_reports_per_op_lines() {
    let out = binary()
        .args(["gradcheck", "--instances", "2", "--loss-instances", "1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("gradcheck matmul"));
    assert!(stdout.contains("rpn_loss (end-to-end)"));
    assert!(stdout.lines().filter(|l| l.contains("PASS")).count() >= 25);
}
