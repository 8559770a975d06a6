//! End-to-end smoke tests of the `drivelens` binary: every subcommand, the
//! config plumbing, exit codes, and byte-level rerun determinism.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use drivelens::training::is_validation;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_drivelens")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(args: &[&str]) -> i32 {
    run(args).status.code().expect("exit code")
}

fn path_str(p: &Path) -> String {
    p.to_str().expect("utf-8 path").to_string()
}

/// Recursively collect (relative path, bytes) for a deterministic tree
/// comparison.
fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in fs::read_dir(dir).expect("readable dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).expect("under root");
                out.insert(
                    rel.to_str().expect("utf-8 path").to_string(),
                    fs::read(&path).expect("readable file"),
                );
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// A small shared pipeline: dataset plus initialization checkpoints for
/// both models. Built once; tests treat it as read-only.
struct Fixture {
    data: PathBuf,
    gen_ckpt: PathBuf,
    vlm_ckpt: PathBuf,
    clip_ids: Vec<String>,
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();

const SCENE_ARGS: &[&str] = &[
    "--set",
    "scene.frame_height=32",
    "--set",
    "scene.frame_width=32",
    "--set",
    "scene.n_frames=2",
];

const SMALL_MODEL_ARGS: &[&str] = &[
    "--set",
    "model.d_model=32",
    "--set",
    "model.n_queries=2",
    "--set",
    "model.n_enc_blocks=1",
    "--set",
    "model.n_qf_blocks=1",
    "--set",
    "model.n_dec_blocks=1",
];

fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(|| {
        let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli_smoke_fixture");
        if root.exists() {
            fs::remove_dir_all(&root).expect("stale fixture removed");
        }
        fs::create_dir_all(&root).expect("fixture root created");
        let data = root.join("data");
        let gen_ckpt = root.join("gen_ckpt");
        let vlm_ckpt = root.join("vlm_ckpt");

        let mut args = vec![
            "gen-data",
            "--clips",
            "80",
            "--seed",
            "11",
            "--out",
        ];
        let data_s = path_str(&data);
        args.push(&data_s);
        args.extend_from_slice(SCENE_ARGS);
        run_ok(&args);

        run_ok(&[
            "train-gen",
            "--dataset",
            &data_s,
            "--out",
            &path_str(&gen_ckpt),
            "--epochs",
            "0",
        ]);

        let mut args = vec![
            "train-vlm",
            "--dataset",
            data_s.as_str(),
            "--attention",
            "oracle-object",
            "--epochs",
            "0",
            "--out",
        ];
        let vlm_s = path_str(&vlm_ckpt);
        args.push(&vlm_s);
        args.extend_from_slice(SMALL_MODEL_ARGS);
        run_ok(&args);

        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(data.join("manifest.json")).unwrap())
                .unwrap();
        let clip_ids: Vec<String> = manifest["clip_ids"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_str().unwrap().to_string())
            .collect();
        assert_eq!(clip_ids.len(), 80);

        Fixture {
            data,
            gen_ckpt,
            vlm_ckpt,
            clip_ids,
        }
    })
}

fn tmp(name: &str) -> PathBuf {
    let p = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    if p.exists() {
        fs::remove_dir_all(&p).expect("stale dir removed");
    }
    p
}

#[test]
fn gen_data_is_byte_deterministic() {
    let a = tmp("gen_det_a");
    let b = tmp("gen_det_b");
    for out in [&a, &b] {
        let mut args = vec!["gen-data", "--clips", "12", "--seed", "7", "--out"];
        let s = path_str(out);
        args.push(&s);
        args.extend_from_slice(SCENE_ARGS);
        run_ok(&args);
    }
    let (ta, tb) = (read_tree(&a), read_tree(&b));
    assert_eq!(
        ta.keys().collect::<Vec<_>>(),
        tb.keys().collect::<Vec<_>>(),
        "directory layouts differ"
    );
    for (path, bytes) in &ta {
        assert_eq!(bytes, &tb[path], "file {path} differs between identical runs");
    }
    assert!(ta.contains_key("manifest.json"));
    assert!(ta.contains_key("config.json"));
}

#[test]
fn gen_data_rejects_zero_clips() {
    let out = tmp("gen_zero");
    assert_eq!(
        exit_code(&["gen-data", "--clips", "0", "--out", &path_str(&out)]),
        2
    );
    assert!(!out.exists(), "no output for a rejected run");
}

#[test]
fn gen_data_requires_force_to_replace() {
    let out = tmp("gen_force");
    let s = path_str(&out);
    let mut args = vec!["gen-data", "--clips", "5", "--seed", "1", "--out", &s];
    args.extend_from_slice(SCENE_ARGS);
    run_ok(&args);

    let rerun = run(&args);
    assert_eq!(rerun.status.code(), Some(2));
    assert!(
        String::from_utf8_lossy(&rerun.stderr).contains("--force"),
        "error should mention --force"
    );

    let mut forced = args.clone();
    forced.push("--force");
    run_ok(&forced);
}

#[test]
fn unknown_config_keys_exit_2() {
    let out = tmp("gen_unknown_key");
    assert_eq!(
        exit_code(&[
            "gen-data",
            "--clips",
            "3",
            "--set",
            "scene.bogus=1",
            "--out",
            &path_str(&out)
        ]),
        2
    );
}

#[test]
fn config_file_drives_a_run() {
    let dir = tmp("gen_from_file");
    fs::create_dir_all(&dir).unwrap();
    let cfg = dir.join("run.json");
    fs::write(
        &cfg,
        r#"{"clips": 6, "scene.seed": 3, "scene.frame_height": 32, "scene.frame_width": 32, "scene.n_frames": 2}"#,
    )
    .unwrap();
    let out = dir.join("data");
    let stdout = run_ok(&[
        "gen-data",
        "--config",
        &path_str(&cfg),
        "--out",
        &path_str(&out),
    ])
    .stdout;
    let text = String::from_utf8_lossy(&stdout);
    assert!(text.contains("generated 6 clips"), "stdout: {text}");
    assert!(text.contains("action marginals"), "stdout: {text}");

    // the echoed config is itself a valid config file for a rerun
    let echo = out.join("config.json");
    let out2 = dir.join("data2");
    run_ok(&[
        "gen-data",
        "--config",
        &path_str(&echo),
        "--out",
        &path_str(&out2),
    ]);
    assert_eq!(
        fs::read(out.join("manifest.json")).unwrap(),
        fs::read(out2.join("manifest.json")).unwrap()
    );
}

#[test]
fn train_epochs_zero_writes_initialization_checkpoints() {
    let fx = fixture();
    for (dir, kind) in [(&fx.gen_ckpt, "generator"), (&fx.vlm_ckpt, "vlm")] {
        let (_params, manifest) = drivelens::nn::load_checkpoint(dir).expect("loadable");
        assert_eq!(manifest.model_kind, kind);
        assert_eq!(manifest.step_count, 0);
        assert_eq!(manifest.config_hash.len(), 64);

        let history: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.join("history.json")).unwrap())
                .unwrap();
        assert_eq!(history["entries"].as_array().unwrap().len(), 0);
        assert!(history["best_epoch"].is_null());
        assert!(dir.join("config.json").is_file());
    }
}

#[test]
fn train_vlm_predicted_patch_needs_a_generator_checkpoint() {
    let fx = fixture();
    let out = tmp("vlm_no_gen");
    let code = exit_code(&[
        "train-vlm",
        "--dataset",
        &path_str(&fx.data),
        "--attention",
        "predicted-patch",
        "--epochs",
        "0",
        "--out",
        &path_str(&out),
    ]);
    assert_eq!(code, 2);
}

#[test]
fn eval_self_check_scores_references_perfectly() {
    let fx = fixture();
    let out = tmp("eval_self_check");
    run_ok(&[
        "eval",
        "--dataset",
        &path_str(&fx.data),
        "--vlm-checkpoint",
        &path_str(&fx.vlm_ckpt),
        "--generator-checkpoint",
        &path_str(&fx.gen_ckpt),
        "--self-check",
        "--out",
        &path_str(&out),
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["bleu4"].as_f64().unwrap(), 1.0);
    assert_eq!(report["rouge_l"].as_f64().unwrap(), 1.0);
    assert_eq!(report["spice_slot"].as_f64().unwrap(), 1.0);
    assert!(report["cider"].as_f64().unwrap().is_finite());
    // a generator was supplied, so the significance accuracies are present
    assert!(report["top1_accuracy"].as_f64().is_some());
    assert!(report["top3_accuracy"].as_f64().is_some());
    assert!(!report["notes"].as_array().unwrap().is_empty());
}

#[test]
fn eval_generates_over_the_validation_split_deterministically() {
    let fx = fixture();
    let expected_val = fx.clip_ids.iter().filter(|id| is_validation(id)).count();
    assert!(expected_val > 0, "fixture needs validation clips");

    let out1 = tmp("eval_run1");
    let out2 = tmp("eval_run2");
    for out in [&out1, &out2] {
        run_ok(&[
            "eval",
            "--dataset",
            &path_str(&fx.data),
            "--vlm-checkpoint",
            &path_str(&fx.vlm_ckpt),
            "--out",
            &path_str(out),
        ]);
    }

    let jsonl = fs::read_to_string(out1.join("generations.jsonl")).unwrap();
    let lines: Vec<&str> = jsonl.lines().collect();
    assert_eq!(lines.len(), expected_val);
    for line in &lines {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(is_validation(v["clip_id"].as_str().unwrap()));
        assert_eq!(v["attention_source"].as_str().unwrap(), "oracle-object");
        assert!(v["generated"].is_string());
        assert!(!v["reference"].as_str().unwrap().is_empty());
    }

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out1.join("report.json")).unwrap()).unwrap();
    for key in ["bleu4", "rouge_l", "cider", "spice_slot"] {
        assert!(
            report[key].as_f64().unwrap().is_finite(),
            "{key} must be finite"
        );
    }
    // no generator checkpoint: the accuracy columns are omitted
    assert!(report.get("top1_accuracy").is_none());

    for name in ["report.json", "generations.jsonl", "config.json"] {
        assert_eq!(
            fs::read(out1.join(name)).unwrap(),
            fs::read(out2.join(name)).unwrap(),
            "{name} differs between identical runs"
        );
    }
}

#[test]
fn eval_without_a_checkpoint_errors() {
    let fx = fixture();
    let out = tmp("eval_missing_ckpt");
    // missing checkpoint directory → runtime/data error
    let missing = tmp("eval_no_such_ckpt");
    let code = exit_code(&[
        "eval",
        "--dataset",
        &path_str(&fx.data),
        "--vlm-checkpoint",
        &path_str(&missing),
        "--out",
        &path_str(&out),
    ]);
    assert_eq!(code, 3);
    // no checkpoint argument at all → validation error
    let code = exit_code(&["eval", "--dataset", &path_str(&fx.data), "--out", &path_str(&out)]);
    assert_eq!(code, 2);
}

#[test]
fn visualize_writes_a_scaled_png_with_config_sidecar() {
    let fx = fixture();
    let dir = tmp("viz_out");
    fs::create_dir_all(&dir).unwrap();
    let png = dir.join("overlay.png");
    let stdout = run_ok(&[
        "visualize",
        "--dataset",
        &path_str(&fx.data),
        "--vlm-checkpoint",
        &path_str(&fx.vlm_ckpt),
        "--generator-checkpoint",
        &path_str(&fx.gen_ckpt),
        "--clip-id",
        &fx.clip_ids[0],
        "--scale",
        "3",
        "--out",
        &path_str(&png),
    ])
    .stdout;
    let text = String::from_utf8_lossy(&stdout);
    assert!(text.contains("generated:"), "stdout: {text}");
    assert!(text.contains("reference:"), "stdout: {text}");

    let img = image::open(&png).expect("valid PNG").to_rgb8();
    assert_eq!(img.dimensions(), (32 * 3, 32 * 3));
    assert!(dir.join("overlay.config.json").is_file());
}

#[test]
fn visualize_unknown_clip_errors() {
    let fx = fixture();
    let png = Path::new(env!("CARGO_TARGET_TMPDIR")).join("viz_unknown.png");
    let code = exit_code(&[
        "visualize",
        "--dataset",
        &path_str(&fx.data),
        "--vlm-checkpoint",
        &path_str(&fx.vlm_ckpt),
        "--clip-id",
        "clip_99999",
        "--out",
        &path_str(&png),
    ]);
    assert_eq!(code, 3);
    assert!(!png.exists());
}
