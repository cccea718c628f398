//! End-to-end tests of the `keyroll` binary: exit codes, determinism,
//! config overlay resolution, and the full synth -> train -> infer ->
//! decode -> eval -> calib pipeline on a micro model.

use std::path::Path;
use std::process::{Command, Output};

fn keyroll() -> Command {
    Command::new(env!("CARGO_BIN_EXE_keyroll"))
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary spawns")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Micro synth + model so training stays around a second.
const MICRO_JSON: &str = r#"{
  "synth": { "n_pitches": 4, "n_bins": 16, "duration": 2.0 },
  "model": {
    "n_pitches": 4, "n_mels": 16,
    "conv_channels": [3, 3, 4], "fc_acoustic": 24,
    "embed_dim": 2, "lstm_width": 24, "lstm_layers": 1, "dropout": 0.0
  },
  "train": { "steps": 60, "batch_size": 2, "lr": 0.004 }
}"#;

fn synth_micro(dir: &Path, config: &Path, seed: u64, count: usize) {
    let out = run(keyroll()
        .arg("synth")
        .arg("--config")
        .arg(config)
        .arg("--out-dir")
        .arg(dir)
        .args(["--count", &count.to_string(), "--seed", &seed.to_string()]));
    assert_success(&out);
}

#[test]
fn missing_input_file_exits_2() {
    let out = run(keyroll().args(["encode", "/nonexistent/in.mid"]));
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("error:"));
}

#[test]
fn beam_mode_without_model_is_a_usage_error() {
    let out = run(keyroll().args([
        "decode",
        "--probs",
        "p.bin",
        "--out",
        "n.csv",
        "--mode",
        "beam",
    ]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_output_is_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("micro.json");
    std::fs::write(&cfg, MICRO_JSON).unwrap();
    let (d1, d2) = (tmp.path().join("d1"), tmp.path().join("d2"));
    synth_micro(&d1, &cfg, 7, 2);
    synth_micro(&d2, &cfg, 7, 2);
    for name in [
        "manifest.json",
        "piece-000.feat",
        "piece-000.roll",
        "piece-000.mid",
        "piece-001.feat",
    ] {
        let a = std::fs::read(d1.join(name)).unwrap();
        let b = std::fs::read(d2.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
}

#[test]
fn config_overlay_is_logged_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(
        tmp.path().join("micro.toml"),
        "[synth]\nn_pitches = 4\nn_bins = 16\nduration = 2.0\n",
    )
    .unwrap();
    // relative --config resolved through the env var directory
    let out = run(keyroll()
        .env("KEYROLL_CONFIG_DIR", tmp.path())
        .current_dir("/")
        .arg("synth")
        .args(["--config", "micro.toml"])
        .arg("--out-dir")
        .arg(tmp.path().join("d"))
        .args(["--count", "1", "--seed", "1"]));
    assert_success(&out);
    assert!(stderr(&out).contains("\"n_pitches\":4"), "{}", stderr(&out));

    let out = run(keyroll()
        .env("KEYROLL_CONFIG_DIR", tmp.path())
        .current_dir("/")
        .arg("synth")
        .args(["--config", "micro.toml"])
        .arg("--out-dir")
        .arg(tmp.path().join("d5"))
        .args(["--count", "1", "--seed", "1", "--pitches", "5"]));
    assert_success(&out);
    assert!(stderr(&out).contains("\"n_pitches\":5"), "{}", stderr(&out));
}

#[test]
fn unknown_config_section_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, r#"{"bogus": {}}"#).unwrap();
    let out = run(keyroll()
        .arg("synth")
        .arg("--config")
        .arg(&cfg)
        .arg("--out-dir")
        .arg(tmp.path().join("d"))
        .args(["--count", "1"]));
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("unknown config section"));
}

#[test]
fn train_rejects_representation_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("micro.json");
    std::fs::write(&cfg, MICRO_JSON).unwrap();
    let data = tmp.path().join("data");
    synth_micro(&data, &cfg, 3, 1);
    let out = run(keyroll()
        .arg("train")
        .arg("--config")
        .arg(&cfg)
        .arg("--data")
        .arg(data.join("manifest.json"))
        .arg("--out")
        .arg(tmp.path().join("m.ckpt"))
        .args(["--rep", "three", "--steps", "1"]));
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("representation mismatch"));
}

#[test]
fn encode_reports_roll_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("micro.json");
    std::fs::write(&cfg, MICRO_JSON).unwrap();
    let data = tmp.path().join("data");
    synth_micro(&data, &cfg, 12, 1);
    let roll = tmp.path().join("p0.roll");
    let out = run(keyroll()
        .arg("encode")
        .arg(data.join("piece-000.mid"))
        .args(["--rep", "five"])
        .arg("--out")
        .arg(&roll));
    assert_success(&out);
    let line = stdout(&out);
    assert!(line.starts_with("frames="), "{line}");
    assert!(line.contains(" notes="), "{line}");
    assert!(line.contains(" re-onsets="), "{line}");
    assert!(roll.exists());
}

#[test]
fn binary_encode_warns_about_merged_overlaps() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    // denser piece so pedal elongation produces same-pitch overlaps
    let out = run(keyroll()
        .arg("synth")
        .arg("--out-dir")
        .arg(&data)
        .args([
            "--count", "1", "--seed", "3", "--pitches", "12", "--bins", "48",
            "--duration", "6.0",
        ]));
    assert_success(&out);
    let out = run(keyroll()
        .arg("encode")
        .arg(data.join("piece-000.mid"))
        .args(["--rep", "binary"])
        .arg("--out")
        .arg(tmp.path().join("b.roll")));
    assert_success(&out);
    assert!(
        stderr(&out).contains("merged into sustained runs under binary"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn eval_of_identical_files_scores_one_everywhere() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("micro.json");
    std::fs::write(&cfg, MICRO_JSON).unwrap();
    let data = tmp.path().join("data");
    synth_micro(&data, &cfg, 5, 1);
    let mid = data.join("piece-000.mid");
    let csv = tmp.path().join("eval.csv");
    let out = run(keyroll()
        .arg("eval")
        .arg(&mid)
        .arg(&mid)
        .arg("--csv")
        .arg(&csv));
    assert_success(&out);
    let table = stdout(&out);
    assert_eq!(table.matches("1.0000").count(), 9, "{table}");
    let csv_text = std::fs::read_to_string(&csv).unwrap();
    for row in ["frame", "note-onset", "note-with-offset"] {
        assert!(
            csv_text.contains(&format!("{row},1.000000,1.000000,1.000000")),
            "{csv_text}"
        );
    }
}

#[test]
fn pipeline_runs_end_to_end_and_beam_half_matches_greedy() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("micro.json");
    std::fs::write(&cfg, MICRO_JSON).unwrap();
    let data = tmp.path().join("data");
    synth_micro(&data, &cfg, 12, 3);

    let model = tmp.path().join("model.ckpt");
    let loss_csv = tmp.path().join("loss.csv");
    let out = run(keyroll()
        .arg("train")
        .arg("--config")
        .arg(&cfg)
        .arg("--data")
        .arg(data.join("manifest.json"))
        .arg("--out")
        .arg(&model)
        .arg("--loss-csv")
        .arg(&loss_csv));
    assert_success(&out);
    assert!(stdout(&out).contains("trained 60 step(s)"));
    let loss = std::fs::read_to_string(&loss_csv).unwrap();
    assert!(loss.starts_with("step,loss\n"));
    assert_eq!(loss.lines().count(), 61);

    let feats = data.join("piece-000.feat");
    let probs = tmp.path().join("probs.bin");
    let out = run(keyroll()
        .arg("infer")
        .arg("--model")
        .arg(&model)
        .arg("--features")
        .arg(&feats)
        .arg("--out")
        .arg(&probs));
    assert_success(&out);
    assert!(stdout(&out).contains("pitches=4"));

    let greedy_csv = tmp.path().join("greedy.csv");
    let greedy_roll = tmp.path().join("greedy.roll");
    let out = run(keyroll()
        .arg("decode")
        .arg("--probs")
        .arg(&probs)
        .arg("--out")
        .arg(&greedy_csv)
        .arg("--roll-out")
        .arg(&greedy_roll));
    assert_success(&out);

    // threshold 0.5 can never trigger, so beam must reproduce greedy
    let beam_csv = tmp.path().join("beam.csv");
    let beam_roll = tmp.path().join("beam.roll");
    let out = run(keyroll()
        .arg("decode")
        .arg("--probs")
        .arg(&probs)
        .arg("--out")
        .arg(&beam_csv)
        .arg("--roll-out")
        .arg(&beam_roll)
        .args(["--mode", "beam", "--beam-threshold", "0.5"])
        .arg("--model")
        .arg(&model)
        .arg("--features")
        .arg(&feats));
    assert_success(&out);
    assert_eq!(
        std::fs::read(&greedy_csv).unwrap(),
        std::fs::read(&beam_csv).unwrap()
    );
    assert_eq!(
        std::fs::read(&greedy_roll).unwrap(),
        std::fs::read(&beam_roll).unwrap()
    );

    // a live beam pass also decodes cleanly
    let out = run(keyroll()
        .arg("decode")
        .arg("--probs")
        .arg(&probs)
        .arg("--out")
        .arg(tmp.path().join("beam2.csv"))
        .args(["--mode", "beam", "--beam-threshold", "0.2", "--lookahead", "3"])
        .arg("--model")
        .arg(&model)
        .arg("--features")
        .arg(&feats));
    assert_success(&out);

    let calib_csv = tmp.path().join("calib.csv");
    let calib_svg = tmp.path().join("calib.svg");
    let out = run(keyroll()
        .arg("calib")
        .arg("--probs")
        .arg(&probs)
        .arg("--roll")
        .arg(data.join("piece-000.roll"))
        .arg("--out-csv")
        .arg(&calib_csv)
        .arg("--out-svg")
        .arg(&calib_svg)
        .arg("--by-state"));
    assert_success(&out);
    assert!(stdout(&out).starts_with("ece="));
    assert!(std::fs::read_to_string(&calib_csv)
        .unwrap()
        .starts_with("bin,"));
    assert!(std::fs::read_to_string(&calib_svg)
        .unwrap()
        .starts_with("<svg"));
}
