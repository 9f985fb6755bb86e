//! End-to-end runs of the compiled binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use slidesampler_core::model::{lattice_slide, manifest_from_json, manifest_to_json, CellClass};
use slidesampler_core::sync::mock::MockServer;
use slidesampler_core::{DatasetManifest, Rect, SplitRole};

fn binary() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_slidesampler"));
    // The surrounding environment must not leak into the runs.
    cmd.env_remove("SLIDESAMPLER_BASE_URL");
    cmd.env_remove("SLIDESAMPLER_TOKEN");
    cmd.env_remove("RUST_LOG");
    cmd
}

fn run(args: &[&str]) -> Output {
    binary().args(args).output().expect("spawning the binary")
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A single fully screened training slide with 30 cells on a lattice,
/// compact enough that every cell admits a centered 256 px patch.
fn grid_manifest() -> DatasetManifest {
    let counts: Vec<(CellClass, u64)> = (0..5).map(|k| (CellClass(k), 6)).collect();
    let slide = lattice_slide(
        "grid",
        1200,
        1200,
        vec![Rect::new(0, 0, 1200, 1200)],
        &counts,
        Rect::new(300, 300, 600, 600),
        40,
        12,
        SplitRole::Train,
        1,
    )
    .unwrap();
    let mut manifest = DatasetManifest::new(vec![slide]);
    manifest.patch_size = 256;
    manifest.epoch_length = 48;
    manifest
}

fn write_grid_manifest(dir: &Path) -> PathBuf {
    let path = dir.join("manifest.json");
    fs::write(&path, manifest_to_json(&grid_manifest())).unwrap();
    path
}

#[test]
fn help_prints_and_exits_zero() {
    let out = run(&["--help"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("sample") && text.contains("eval"), "{text}");
}

#[test]
fn usage_errors_exit_sixty_four() {
    assert_eq!(code(&run(&[])), 64);
    assert_eq!(code(&run(&["eval", "--nonsense"])), 64);
    assert_eq!(code(&run(&["frobnicate"])), 64);
}

#[test]
fn sampling_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_grid_manifest(dir.path());
    let args = [
        "sample",
        "--manifest",
        manifest.to_str().unwrap(),
        "--mode",
        "live",
        "--bs",
        "16",
        "--epochs",
        "1",
        "--seed",
        "7",
    ];
    let first = run(&args);
    let second = run(&args);
    assert_eq!(code(&first), 0, "{}", stderr_of(&first));
    assert_eq!(first.stdout, second.stdout);

    let lines: Vec<&str> = std::str::from_utf8(&first.stdout).unwrap().lines().collect();
    assert_eq!(lines.len(), 48, "one record per patch of the epoch");
    for line in lines {
        let record: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(record["slide_id"], "grid");
    }
}

#[test]
fn config_file_seed_matches_the_flag_and_loses_to_it() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_grid_manifest(dir.path());
    let m = manifest.to_str().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[run]\nseed = 7\n").unwrap();
    let c = cfg.to_str().unwrap();

    let with_flag = run(&["sample", "--manifest", m, "--seed", "7"]);
    let with_file = run(&["sample", "--manifest", m, "--config", c]);
    let flag_wins = run(&["sample", "--manifest", m, "--config", c, "--seed", "9"]);
    assert_eq!(code(&with_file), 0, "{}", stderr_of(&with_file));
    assert_eq!(with_flag.stdout, with_file.stdout);
    assert_ne!(flag_wins.stdout, with_file.stdout);
}

#[test]
fn misspelled_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_grid_manifest(dir.path());
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[run]\nseedz = 7\n").unwrap();
    let out = run(&[
        "sample",
        "--manifest",
        manifest.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1, "{}", stderr_of(&out));
}

#[test]
fn pull_without_a_server_url_is_a_validation_error() {
    let out = run(&["pull", "--out", "/dev/null"]);
    assert_eq!(code(&out), 1);
    assert!(stderr_of(&out).contains("--base-url"), "{}", stderr_of(&out));
}

#[test]
fn trainsim_writes_a_deterministic_epoch_log() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_grid_manifest(dir.path());
    let args = [
        "trainsim",
        "--manifest",
        manifest.to_str().unwrap(),
        "--bs",
        "16",
        "--max-epochs",
        "8",
        "--seed",
        "3",
    ];
    let first = run(&args);
    let second = run(&args);
    assert_eq!(code(&first), 0, "{}", stderr_of(&first));
    assert_eq!(first.stdout, second.stdout);

    let lines: Vec<&str> = std::str::from_utf8(&first.stdout).unwrap().lines().collect();
    assert_eq!(lines.len(), 8);
    let last: serde_json::Value = serde_json::from_str(lines[7]).unwrap();
    assert_eq!(last["epoch"], 8);
    assert!(last["event"].as_str().unwrap().contains("stop:max_epochs"), "{last}");
}

#[test]
fn synthesize_infer_evaluate_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let slides = dir.path().join("slides");
    let synth = run(&[
        "synth",
        "--out",
        slides.to_str().unwrap(),
        "--slides",
        "3",
        "--width",
        "768",
        "--height",
        "768",
        "--cells",
        "30",
        "--partial",
        "1",
        "--patch-size",
        "256",
        "--seed",
        "11",
    ]);
    assert_eq!(code(&synth), 0, "{}", stderr_of(&synth));
    assert!(slides.join("synth-00.png").exists());
    let manifest_path = slides.join("manifest.json");
    let manifest =
        manifest_from_json(&fs::read_to_string(&manifest_path).unwrap()).unwrap();
    assert_eq!(manifest.slides.len(), 3);
    assert!(manifest.slides.iter().all(|s| !s.annotations.is_empty()));

    // A noiseless detector over the freshly rendered rasters should score
    // perfectly against the manifest it came from.
    let dets = dir.path().join("dets.jsonl");
    let infer = run(&[
        "infer",
        "--manifest",
        manifest_path.to_str().unwrap(),
        "--tile",
        "512",
        "--overlap",
        "128",
        "--out",
        dets.to_str().unwrap(),
    ]);
    assert_eq!(code(&infer), 0, "{}", stderr_of(&infer));

    let eval = run(&[
        "eval",
        "--gt",
        manifest_path.to_str().unwrap(),
        "--dets",
        dets.to_str().unwrap(),
    ]);
    assert_eq!(code(&eval), 0, "{}", stderr_of(&eval));
    let report: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(report["map"].as_f64().unwrap(), 1.0, "{report}");

    let eval_path = dir.path().join("zero.json");
    fs::write(&eval_path, &eval.stdout).unwrap();
    let rows = dir.path().join("rows.json");
    fs::write(
        &rows,
        r#"[{"mode":"live","backbone":"oracle","batch_size":16,"eval":"zero.json"}]"#,
    )
    .unwrap();
    let table = run(&["report", "--rows", rows.to_str().unwrap()]);
    assert_eq!(code(&table), 0, "{}", stderr_of(&table));
    let text = std::str::from_utf8(&table.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "mode,backbone,batch_size,eosinophil,mast_cell,neutrophil,macrophage,lymphocyte,mean"
    );
    assert_eq!(lines.next().unwrap(), "live,oracle,16,1.00,1.00,1.00,1.00,1.00,1.00");
    assert_eq!(lines.next(), None);
}

#[test]
fn pull_and_push_against_a_live_server() {
    let dir = tempfile::tempdir().unwrap();
    let server = MockServer::spawn(&grid_manifest(), "sesame", "set-a").unwrap();
    let url = server.base_url();

    let pulled_path = dir.path().join("pulled.json");
    let pull = run(&[
        "pull",
        "--base-url",
        &url,
        "--token",
        "sesame",
        "--set",
        "set-a",
        "--out",
        pulled_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&pull), 0, "{}", stderr_of(&pull));
    let pulled = manifest_from_json(&fs::read_to_string(&pulled_path).unwrap()).unwrap();
    assert_eq!(pulled.slides.len(), 1);
    assert_eq!(pulled.slides[0].annotations.len(), 30);

    let dets = dir.path().join("dets.jsonl");
    fs::write(
        &dets,
        concat!(
            "{\"id\":1,\"image_id\":\"grid\",\"class\":\"lymphocyte\",\"score\":0.9,\"bbox\":[310.0,310.0,24.0,24.0]}\n",
            "{\"id\":2,\"image_id\":\"grid\",\"class\":\"mast_cell\",\"score\":0.2,\"bbox\":[400.0,400.0,24.0,24.0]}\n",
        ),
    )
    .unwrap();
    let push = run(&[
        "push",
        "--base-url",
        &url,
        "--token",
        "sesame",
        "--set",
        "set-a",
        "--dets",
        dets.to_str().unwrap(),
        "--min-score",
        "0.5",
    ]);
    assert_eq!(code(&push), 0, "{}", stderr_of(&push));
    assert_eq!(server.prediction_count("grid"), 1, "the low scorer stays home");
    let summary = String::from_utf8_lossy(&push.stdout);
    assert!(summary.contains("accepted 1 of 2"), "{summary}");

    let bad_token = run(&[
        "pull",
        "--base-url",
        &url,
        "--token",
        "wrong",
        "--set",
        "set-a",
        "--out",
        pulled_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&bad_token), 2, "{}", stderr_of(&bad_token));
}
