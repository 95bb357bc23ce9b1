use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use spfm::checkpoint::Checkpoint;
use spfm::cli;
use spfm::config::ExperimentConfig;
use spfm::data::{self, Polar};
use spfm::net::{self, ModelParameters, OptimizerState};
use spfm::sampler;

fn tiny_config(out: &Path, extra: &str) -> String {
    format!(
        r#"
[run]
output_dir = "{}"
[dataset]
name = "two_circles"
n = 120
seed = 4
corruption_rate = 0.4
[training]
epochs = 3
warmup_epochs = 1
batch_size = 32
hidden_widths = [16, 16]
{extra}
[sampler]
n_eval = 40
n_steps = 10
omega = [0, 1]
[analysis]
n_samples = 30
"#,
        out.display()
    )
}

fn write_config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, tiny_config(&dir.join("run"), extra)).unwrap();
    path
}

fn spfm(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_spfm")).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_pipeline_through_binary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "");
    let run = dir.path().join("run");

    let (code, out, err) = spfm(&["gen-data", "--config", s(&cfg)]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("n=120 corrupted=48"), "{out}");

    let (code, _, err) = spfm(&["train", "--config", s(&cfg), "--spfm", "on", "-q"]);
    assert_eq!(code, 0, "{err}");
    let model = run.join("spfm");
    for f in ["checkpoint.bin", "metrics.csv", "gates.csv", "purification.csv"] {
        assert!(model.join(f).exists(), "{f}");
    }
    let gates = fs::read_to_string(model.join("gates.csv")).unwrap();
    assert!(gates.starts_with("sample_index,epoch,l_cond,l_uncond,decision\n"));
    assert_eq!(gates.lines().count(), 1 + 2 * 120);

    let ckpt = model.join("checkpoint.bin");
    let (code, out, err) = spfm(&["eval", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--omega", "0,0.5,0.5"]);
    assert_eq!(code, 0, "{err}");
    assert!(err.contains("duplicate guidance scale 0.5"), "{err}");
    assert!(out.contains("omega=0.5"));
    let eval_dir = model.join("eval");
    for f in ["mse.csv", "mse.svg", "samples_w0.csv", "samples_w0.5.csv"] {
        assert!(eval_dir.join(f).exists(), "{f}");
    }

    let (code, _, err) = spfm(&["analyze", "--config", s(&cfg), "--checkpoint", s(&ckpt)]);
    assert_eq!(code, 0, "{err}");
    let detection = fs::read_to_string(model.join("analysis/detection.csv")).unwrap();
    assert_eq!(detection.lines().count(), 6);
    assert!(model.join("analysis/hist_t0.5.svg").exists());
}

#[test]
fn baseline_training_writes_no_gate_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::parse(&tiny_config(&dir.path().join("run"), "spfm_enabled = false")).unwrap();
    let ds_dir = dir.path().join("run");
    let g = cli::cmd_gen_data(&cfg, &ds_dir, None, false).unwrap();
    let out = ds_dir.join("baseline");
    let summary = cli::cmd_train(&cfg, &g.path, &out, false).unwrap();
    assert!(summary.purification.is_none());
    assert!(!out.join("gates.csv").exists());
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.lines().skip(1).all(|l| l.split(',').nth(2) == Some("0")));
}

#[test]
fn training_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::parse(&tiny_config(&dir.path().join("run"), "")).unwrap();
    let g = cli::cmd_gen_data(&cfg, dir.path(), None, false).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    cli::cmd_train(&cfg, &g.path, &a, false).unwrap();
    cli::cmd_train(&cfg, &g.path, &b, false).unwrap();
    for f in ["checkpoint.bin", "metrics.csv", "gates.csv", "purification.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

fn zero_checkpoint(path: &Path) {
    let params = ModelParameters::zeros(&net::default_widths()).unwrap();
    Checkpoint { opt_state: OptimizerState::new(&params), params, config_hash: [0; 32] }
        .save(path)
        .unwrap();
}

#[test]
fn zero_field_eval_reports_noise_mse() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::parse(&tiny_config(&dir.path().join("run"), "")).unwrap();
    let g = cli::cmd_gen_data(&cfg, dir.path(), None, false).unwrap();
    let ckpt = dir.path().join("zero.bin");
    zero_checkpoint(&ckpt);
    let out = dir.path().join("eval");
    let summary = cli::cmd_eval(&cfg, &ckpt, &g.path, None, &out).unwrap();

    let ds = data::load(&g.path).unwrap();
    let conds: Vec<Polar> = cli::eval_conditions(&ds, cfg.sampler.n_eval, cfg.sampler.seed).unwrap();
    let mut expected = 0.0;
    for (i, c) in conds.iter().enumerate() {
        let x = sampler::initial_noise(cfg.sampler.seed, i as u64);
        let y = data::polar_to_euclidean(*c).unwrap();
        expected += (x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2);
    }
    expected /= conds.len() as f64;
    for (_, mse) in &summary.mse {
        assert!((mse - expected).abs() <= 1e-12 * expected, "{mse} vs {expected}");
    }
    let rows = fs::read_to_string(out.join("samples_w1.csv")).unwrap();
    let mean: f64 = rows
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap())
        .sum::<f64>()
        / conds.len() as f64;
    assert!((mean - expected).abs() <= 1e-12 * expected);
}

#[test]
fn zero_field_analysis_has_no_positives() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::parse(&tiny_config(&dir.path().join("run"), "")).unwrap();
    let g = cli::cmd_gen_data(&cfg, dir.path(), None, false).unwrap();
    let ckpt = dir.path().join("zero.bin");
    zero_checkpoint(&ckpt);
    let summary = cli::cmd_analyze(&cfg, &ckpt, &g.path, &dir.path().join("an")).unwrap();
    assert_eq!(summary.scores.len(), 5);
    for s in &summary.scores {
        assert_eq!(s.f1, 0.0);
        assert!(s.zero_positive);
        assert_eq!(s.true_pos + s.false_pos, 0);
    }
    assert_eq!(summary.records, 5 * 2 * 30);
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = tempfile::tempdir().unwrap();

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[training]\nepochs = -3\n").unwrap();
    assert_eq!(spfm(&["gen-data", "--config", s(&bad)]).0, 1);
    assert_eq!(spfm(&["no-such-command"]).0, 1);
    assert_eq!(spfm(&["train", "--spfm", "maybe"]).0, 1);

    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let cfg = write_config(dir.path(), "c.toml", "");
    assert_eq!(spfm(&["gen-data", "--config", s(&cfg), "--out", s(&blocker.join("sub"))]).0, 1);

    let (code, _, _) = spfm(&["gen-data", "--config", s(&cfg)]);
    assert_eq!(code, 0);
    let ckpt = dir.path().join("zero.bin");
    zero_checkpoint(&ckpt);
    let ds = dir.path().join("run/dataset.txt");
    let (code, _, err) = spfm(&["eval", "--checkpoint", s(&ckpt), "--dataset", s(&ds), "--omega", ""]);
    assert_eq!(code, 1, "{err}");

    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[8] = 99;
    let old = dir.path().join("old.bin");
    fs::write(&old, bytes).unwrap();
    let (code, _, err) = spfm(&["eval", "--checkpoint", s(&old), "--dataset", s(&ds)]);
    assert_eq!(code, 1);
    assert!(err.contains("version"), "{err}");

    let hot = write_config(dir.path(), "hot.toml", "[training.adam]\nlr = 1e300");
    let out = dir.path().join("hot");
    let (code, _, err) = spfm(&["train", "--config", s(&hot), "--dataset", s(&ds), "--out", s(&out), "-q"]);
    assert_eq!(code, 2, "{err}");
    assert!(out.join("checkpoint.bin.failed").exists());
    let partial = Checkpoint::load(&out.join("checkpoint.bin")).unwrap();
    assert!(partial.params.is_finite());
}

#[test]
fn config_hash_mismatch_is_a_warning() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "");
    let other = write_config(dir.path(), "other.toml", "train_seed = 7");
    assert_eq!(spfm(&["gen-data", "--config", s(&cfg)]).0, 0);
    assert_eq!(spfm(&["train", "--config", s(&cfg), "-q"]).0, 0);
    let ckpt = dir.path().join("run/spfm/checkpoint.bin");
    let (code, _, err) = spfm(&["eval", "--config", s(&other), "--checkpoint", s(&ckpt)]);
    assert_eq!(code, 0);
    assert!(err.contains("warning"));
    let notes = fs::read_to_string(dir.path().join("run/spfm/eval/notes.txt")).unwrap();
    assert!(notes.contains("config hash"));
}

#[test]
fn locked_output_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::parse(&tiny_config(&dir.path().join("run"), "")).unwrap();
    let _held = cli::OutputLock::acquire(dir.path()).unwrap();
    let err = cli::cmd_gen_data(&cfg, dir.path(), None, false).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn imported_csv_is_corrupted_and_saved() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("points.csv");
    let mut text = String::from("radius,angle,x1_y,x1_x,orig_radius,orig_angle,corrupted\n");
    for i in 0..20 {
        let a = i as f64 * 0.3;
        text.push_str(&format!("1,{a},{},{},1,{a},0\n", a.sin(), a.cos()));
    }
    fs::write(&csv, text).unwrap();
    let cfg = ExperimentConfig::parse(&tiny_config(&dir.path().join("run"), "")).unwrap();
    let g = cli::cmd_gen_data(&cfg, &dir.path().join("imp"), Some(&csv), true).unwrap();
    assert_eq!((g.n, g.corrupted), (20, 8));
    assert!(g.path.ends_with("dataset.bin"));
    assert_eq!(data::load(&g.path).unwrap().len(), 20);
}
