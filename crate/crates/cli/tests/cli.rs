//! End-to-end checks of the command-line surface: artifact layout, error
//! formatting, flag validation, and the language-mode audio/text-only
//! guarantee (separating with a text query must keep working after every
//! video file is deleted).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vast_core::datagen::{DataConfig, Dataset, Split};
use vast_core::losses::LossRecord;
use vast_core::sepmodel::{SepConfig, SepModel};
use vast_core::trainer::{save_checkpoint, Checkpoint, TrainConfig, CHECKPOINT_VERSION};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vast"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn vast")
}

fn stderr_line(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).trim().to_string()
}

fn tmp(tag: &str) -> PathBuf {
    tempfile::Builder::new()
        .prefix(&format!("vast-cli-{tag}-"))
        .tempdir()
        .expect("tempdir")
        .keep()
}

/// Small corpus: enough examples for every subcommand, fast to render.
fn tiny_data(dir: &Path) -> Dataset {
    let cfg = DataConfig {
        train_solos: 3,
        val_solos: 1,
        test_solos: 2,
        test_duets: 2,
        seed: 505,
        ..DataConfig::default()
    };
    Dataset::generate(cfg, dir).expect("generate dataset")
}

/// An untrained but loadable checkpoint for commands that only need weights.
fn fresh_checkpoint(path: &Path) -> Checkpoint {
    let model = SepModel::init(SepConfig::default(), 11).expect("init model");
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        step: 0,
        params: model.params().clone(),
        config_hash: TrainConfig::default().hash(),
        summary: LossRecord {
            step: 0,
            l_mask: 0.0,
            l_tri: 0.0,
            l_al: 0.0,
            total: 0.0,
            lr: 0.0,
        },
    };
    save_checkpoint(&ckpt, path).expect("save checkpoint");
    ckpt
}

#[test]
fn gen_data_renders_a_corpus_and_records_its_resolved_config() {
    let out = tmp("gen");
    let cfg_path = out.join("data-config.json");
    let cfg = DataConfig {
        train_solos: 2,
        val_solos: 1,
        test_solos: 1,
        test_duets: 1,
        seed: 7,
        ..DataConfig::default()
    };
    fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let data_dir = out.join("data");
    let res = run(&[
        "gen-data",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        data_dir.to_str().unwrap(),
        "--seed",
        "7",
    ]);
    assert!(res.status.success(), "stderr: {}", stderr_line(&res));
    assert!(data_dir.join("manifest.jsonl").is_file());
    assert!(data_dir.join("run-manifest.json").is_file());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(data_dir.join("run-manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "gen-data");
    assert_eq!(manifest["config"]["seed"], 7);
    let reloaded = Dataset::load(&data_dir).expect("reload");
    assert_eq!(reloaded.records(Split::Train).len(), 2);
    let rec = reloaded.records(Split::Train)[0];
    assert!(data_dir.join(&rec.wav).is_file());
    assert!(data_dir.join(&rec.grid).is_file());
}

#[test]
fn unknown_flags_are_rejected_with_a_single_error_line() {
    let res = run(&["train", "--bogus-flag", "1"]);
    assert!(!res.status.success());
    let err = stderr_line(&res);
    assert_eq!(err.lines().count(), 1, "stderr was: {err}");
    assert!(err.starts_with("error: "), "stderr was: {err}");

    let res = run(&["no-such-command"]);
    assert!(!res.status.success());
    assert!(stderr_line(&res).starts_with("error: "));
}

#[test]
fn missing_required_arguments_fail_on_one_line() {
    let out = tmp("noquery");
    let data_dir = out.join("data");
    let data = tiny_data(&data_dir);
    let ckpt_path = out.join("ckpt.bin");
    fresh_checkpoint(&ckpt_path);
    let example = data.records(Split::Test)[0].id.clone();
    let res = run(&[
        "separate",
        "--ckpt",
        ckpt_path.to_str().unwrap(),
        "--data",
        data_dir.to_str().unwrap(),
        "--example",
        &example,
        "--mode",
        "al",
        "--out",
        out.join("sep").to_str().unwrap(),
    ]);
    assert!(!res.status.success());
    let err = stderr_line(&res);
    assert_eq!(err.lines().count(), 1, "stderr was: {err}");
    assert!(err.contains("concept"), "stderr was: {err}");
}

#[test]
fn language_mode_separation_survives_deleting_every_video_file() {
    let out = tmp("audit");
    let data_dir = out.join("data");
    let data = tiny_data(&data_dir);
    let ckpt_path = out.join("ckpt.bin");
    fresh_checkpoint(&ckpt_path);
    let duet = data.duets(Split::Test)[0];
    let example = duet.id.clone();
    let concept = duet.concepts[0];

    // Remove every video grid; language-queried separation must not notice.
    let mut removed = 0;
    for split in [Split::Train, Split::Val, Split::Test] {
        for rec in data.records(split) {
            fs::remove_file(data_dir.join(&rec.grid)).expect("delete grid");
            removed += 1;
        }
    }
    assert!(removed > 0);

    let sep_dir = out.join("sep-al");
    let res = run(&[
        "separate",
        "--ckpt",
        ckpt_path.to_str().unwrap(),
        "--data",
        data_dir.to_str().unwrap(),
        "--example",
        &example,
        "--mode",
        "al",
        "--query",
        &format!("concept:{concept}"),
        "--out",
        sep_dir.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "stderr: {}", stderr_line(&res));
    assert!(sep_dir.join("separated.wav").is_file());
    assert!(sep_dir.join("mask.pgm").is_file());
    assert!(sep_dir.join("run-manifest.json").is_file());
    assert!(
        !sep_dir.join("attention-00.pgm").exists(),
        "language mode must not produce attention maps"
    );

    // The same example in video mode must now fail: it really reads grids.
    let res = run(&[
        "separate",
        "--ckpt",
        ckpt_path.to_str().unwrap(),
        "--data",
        data_dir.to_str().unwrap(),
        "--example",
        &example,
        "--mode",
        "av",
        "--out",
        out.join("sep-av").to_str().unwrap(),
    ]);
    assert!(!res.status.success());
    assert_eq!(stderr_line(&res).lines().count(), 1);
}

#[test]
fn video_mode_separation_writes_mask_and_per_frame_attention_maps() {
    let out = tmp("avsep");
    let data_dir = out.join("data");
    let data = tiny_data(&data_dir);
    let ckpt_path = out.join("ckpt.bin");
    fresh_checkpoint(&ckpt_path);
    let example = data.duets(Split::Test)[0].id.clone();
    let sep_dir = out.join("sep");
    let res = run(&[
        "separate",
        "--ckpt",
        ckpt_path.to_str().unwrap(),
        "--data",
        data_dir.to_str().unwrap(),
        "--example",
        &example,
        "--mode",
        "av",
        "--mil",
        "region",
        "--out",
        sep_dir.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "stderr: {}", stderr_line(&res));
    assert!(sep_dir.join("separated.wav").is_file());
    let mask = fs::read(sep_dir.join("mask.pgm")).unwrap();
    assert!(mask.starts_with(b"P5\n"), "mask.pgm must be binary PGM");
    let frames = data.config().layout.t;
    for t in 0..frames {
        let p = sep_dir.join(format!("attention-{t:02}.pgm"));
        assert!(p.is_file(), "missing {}", p.display());
        assert!(fs::read(p).unwrap().starts_with(b"P5\n"));
    }
}

#[test]
fn train_eval_and_invert_produce_their_artifacts() {
    let out = tmp("pipeline");
    let data_dir = out.join("data");
    tiny_data(&data_dir);

    let train_dir = out.join("train");
    let res = bin()
        .env("VAST_THREADS", "1")
        .args([
            "train",
            "--data",
            data_dir.to_str().unwrap(),
            "--out",
            train_dir.to_str().unwrap(),
            "--steps",
            "2",
            "--warmup",
            "1",
            "--mil",
            "video",
            "--lambda-tri",
            "0.01",
            "--lambda-al",
            "0.001",
            "--seed",
            "3",
        ])
        .output()
        .expect("spawn vast");
    assert!(res.status.success(), "stderr: {}", stderr_line(&res));
    let ckpt = train_dir.join("checkpoint.bin");
    assert!(ckpt.is_file());
    assert!(train_dir.join("loss_log.csv").is_file());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(train_dir.join("run-manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["config"]["total_steps"], 2);
    assert_eq!(manifest["config"]["weights"]["lambda_tri"], 0.01);

    let eval_dir = out.join("eval");
    let res = run(&[
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        data_dir.to_str().unwrap(),
        "--mode",
        "al",
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "stderr: {}", stderr_line(&res));
    let csv = fs::read_to_string(eval_dir.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "example_id,mode,target_concept,sdr_db,sir_db,sar_db,nsdr_db"
    );
    assert!(csv.lines().last().unwrap().starts_with("aggregate,"));
    assert!(csv.lines().skip(1).all(|l| l.contains(",AL,") || l.starts_with("aggregate,")));

    let invert_dir = out.join("invert");
    let res = run(&[
        "invert",
        "--data",
        data_dir.to_str().unwrap(),
        "--out",
        invert_dir.to_str().unwrap(),
        "--tokens",
        "2",
        "--iters",
        "40",
        "--seed",
        "5",
    ]);
    assert!(res.status.success(), "stderr: {}", stderr_line(&res));
    let captions: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(invert_dir.join("captions.json")).unwrap())
            .unwrap();
    let rows = captions.as_array().unwrap();
    assert_eq!(rows.len(), 3 + 1 + 2 + 2);
    assert!(rows.iter().all(|r| r["fit"].as_f64().unwrap().is_finite()));
}

#[test]
fn gradcheck_reports_every_objective_within_tolerance() {
    let res = run(&["gradcheck", "--seed", "12"]);
    assert!(res.status.success(), "stderr: {}", stderr_line(&res));
    let stdout = String::from_utf8_lossy(&res.stdout);
    for needle in ["tensor-ops:", "mask:", "audio-language:", "trimodal:"] {
        assert!(stdout.contains(needle), "missing {needle} in: {stdout}");
    }
}
