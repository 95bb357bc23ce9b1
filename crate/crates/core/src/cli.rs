//! Experiment commands behind the `spfm` binary.
//!
//! Each `cmd_*` function is what one subcommand does, minus argument
//! parsing: it takes a resolved [`ExperimentConfig`] plus paths, writes its
//! artifacts, and returns a summary. Commands lock their output directory
//! with a `.spfm.lock` file for their duration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, FIG2_CONFIG, FIG3_CONFIG};
use crate::data::{self, Dataset, DatasetKind, Polar, Sample};
use crate::error::{Result, SpfmError};
use crate::eval::{self, DetectionScore, LossDiffRecord, PurificationReport};
use crate::flow::{self, EpochMetrics, GateRecord};
use crate::plot;
use crate::rng::{self, domain};
use crate::sampler;

pub const DATASET_FILE: &str = "dataset.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const GATES_FILE: &str = "gates.csv";
pub const PURIFICATION_FILE: &str = "purification.csv";
pub const LOCK_FILE: &str = ".spfm.lock";

/// Holds `<dir>/.spfm.lock` until dropped.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        ensure_dir(dir)?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(OutputLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(SpfmError::Input(format!(
                "output directory {} is locked by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(SpfmError::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| SpfmError::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| SpfmError::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| SpfmError::Input(format!("{}: {e}", path.display())))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> SpfmError + '_ {
    move |e| SpfmError::Input(format!("{}: {e}", path.display()))
}

/// Parse a comma-separated list of numbers.
pub fn parse_list(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| SpfmError::Input(format!("'{s}' is not a number")))
        })
        .collect()
}

/// Command-line overrides layered on a loaded config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub spfm: Option<bool>,
    pub out: Option<PathBuf>,
    pub omega: Option<Vec<f64>>,
    pub tprime: Option<Vec<f64>>,
    pub threshold: Option<f64>,
    pub steps: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(s) = self.spfm {
            cfg.training.spfm_enabled = s;
        }
        if let Some(o) = &self.out {
            cfg.run.output_dir = o.clone();
        }
        if let Some(w) = &self.omega {
            cfg.sampler.omega = w.clone();
        }
        if let Some(t) = &self.tprime {
            cfg.analysis.t_prime = t.clone();
        }
        if let Some(x) = self.threshold {
            cfg.analysis.threshold = x;
        }
        if let Some(n) = self.steps {
            cfg.sampler.n_steps = n;
        }
        cfg.validate()
    }
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GenDataSummary {
    pub n: usize,
    pub corrupted: usize,
    pub path: PathBuf,
}

impl std::fmt::Display for GenDataSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "n={} corrupted={} path={}", self.n, self.corrupted, self.path.display())
    }
}

/// Build the configured dataset: generate clean samples, then corrupt.
pub fn build_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let d = &cfg.dataset;
    let clean = data::generate(d.name, d.n, d.seed, &d.constants)?;
    data::corrupt_labels(&clean, d.corruption_rate, d.seed, d.corruption_mode)
}

/// Write the configured dataset (or an imported CSV, corrupted per config)
/// to `<out>/dataset.txt`, or `dataset.bin` when `binary` is set.
pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path, import: Option<&Path>, binary: bool) -> Result<GenDataSummary> {
    let _lock = OutputLock::acquire(out)?;
    gen_data_into(cfg, out, import, binary)
}

fn gen_data_into(cfg: &ExperimentConfig, out: &Path, import: Option<&Path>, binary: bool) -> Result<GenDataSummary> {
    let ds = match import {
        Some(p) => {
            let f = fs::File::open(p).map_err(|e| SpfmError::io(p, e))?;
            let raw = data::import_csv(f)?;
            if raw.corrupted_count() > 0 {
                raw
            } else {
                let d = &cfg.dataset;
                data::corrupt_labels(&raw, d.corruption_rate, d.seed, d.corruption_mode)?
            }
        }
        None => build_dataset(cfg)?,
    };
    let path = out.join(if binary { "dataset.bin" } else { DATASET_FILE });
    data::save(&ds, &path)?;
    Ok(GenDataSummary {
        n: ds.len(),
        corrupted: ds.corrupted_count(),
        path,
    })
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub epochs: usize,
    pub final_metrics: Option<EpochMetrics>,
    pub purification: Option<PurificationReport>,
    pub checkpoint: PathBuf,
    pub gate_records: usize,
}

impl std::fmt::Display for TrainSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.final_metrics {
            Some(m) => write!(
                f,
                "epochs={} final_loss={:.6} gated_fraction={:.4} dropped_fraction={:.4}",
                self.epochs, m.mean_loss, m.gated_fraction, m.dropped_fraction
            )?,
            None => write!(f, "epochs=0")?,
        }
        if let Some(p) = &self.purification {
            write!(
                f,
                " retained={} filtered={} retained_corruption={:.4} filtered_corruption={:.4}",
                p.retained,
                p.filtered,
                p.retained_corruption_rate(),
                p.filtered_corruption_rate()
            )?;
        }
        write!(f, " checkpoint={}", self.checkpoint.display())
    }
}

pub fn write_metrics_csv(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let e = csv_err(path);
    w.write_record(["epoch", "mean_loss", "gated_fraction", "dropped_fraction", "wall_ms"]).map_err(&e)?;
    for m in metrics {
        w.write_record([
            m.epoch.to_string(),
            m.mean_loss.to_string(),
            m.gated_fraction.to_string(),
            m.dropped_fraction.to_string(),
            m.wall_ms.to_string(),
        ])
        .map_err(&e)?;
    }
    w.flush().map_err(|err| SpfmError::io(path, err))
}

pub fn write_gates_csv(path: &Path, records: &[GateRecord]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let e = csv_err(path);
    w.write_record(["sample_index", "epoch", "l_cond", "l_uncond", "decision"]).map_err(&e)?;
    for r in records {
        w.write_record([
            r.sample_index.to_string(),
            r.epoch.to_string(),
            r.l_cond.to_string(),
            r.l_uncond.to_string(),
            r.decision.as_str().to_string(),
        ])
        .map_err(&e)?;
    }
    w.flush().map_err(|err| SpfmError::io(path, err))
}

fn write_purification_csv(path: &Path, r: &PurificationReport) -> Result<()> {
    let text = format!(
        "subset,count,corrupted,corruption_rate\nretained,{},{},{}\nfiltered,{},{},{}\n",
        r.retained,
        r.retained_corrupted,
        r.retained_corruption_rate(),
        r.filtered,
        r.filtered_corrupted,
        r.filtered_corruption_rate()
    );
    write_file(path, text)
}

/// Train on the dataset at `dataset_path`, writing the checkpoint, metrics
/// and (with the gate on) gate records into `out`.
///
/// A numeric failure leaves the last completed epoch's checkpoint next to a
/// `checkpoint.bin.failed` marker.
pub fn cmd_train(cfg: &ExperimentConfig, dataset_path: &Path, out: &Path, verbose: bool) -> Result<TrainSummary> {
    let _lock = OutputLock::acquire(out)?;
    train_into(cfg, dataset_path, out, verbose)
}

fn train_into(cfg: &ExperimentConfig, dataset_path: &Path, out: &Path, verbose: bool) -> Result<TrainSummary> {
    let ds = data::load(dataset_path)?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let failed_marker = out.join(format!("{CHECKPOINT_FILE}.failed"));
    let gates_path = out.join(GATES_FILE);
    let purification_path = out.join(PURIFICATION_FILE);
    for stale in [&failed_marker, &gates_path, &purification_path] {
        if stale.exists() {
            fs::remove_file(stale).map_err(|e| SpfmError::io(stale, e))?;
        }
    }
    let config_hash = cfg.hash();
    let progress = |m: &EpochMetrics| {
        if verbose && (m.epoch % 10 == 0 || m.epoch == 1) {
            eprintln!(
                "epoch {:>4}  loss {:.5}  gated {:.4}  dropped {:.4}",
                m.epoch, m.mean_loss, m.gated_fraction, m.dropped_fraction
            );
        }
    };
    let run = match flow::train_run_with(&ds, &cfg.training, progress) {
        Ok(run) => run,
        Err(abort) => {
            let ck = Checkpoint {
                params: abort.params.clone(),
                opt_state: abort.opt_state.clone(),
                config_hash,
            };
            ck.save(&ckpt_path)?;
            write_metrics_csv(&out.join(METRICS_FILE), &abort.metrics)?;
            write_file(&failed_marker, format!("{abort}\n"))?;
            return Err(abort.into());
        }
    };
    Checkpoint {
        params: run.params,
        opt_state: run.opt_state,
        config_hash,
    }
    .save(&ckpt_path)?;
    write_metrics_csv(&out.join(METRICS_FILE), &run.metrics)?;
    let mut purification = None;
    if cfg.training.spfm_enabled {
        write_gates_csv(&gates_path, &run.gate_records)?;
        let last = flow::final_epoch_records(&run.gate_records);
        if !last.is_empty() && last.len() == ds.len() && last[0].epoch == cfg.training.epochs {
            let report = eval::purification_report(&ds, &last)?;
            write_purification_csv(&purification_path, &report)?;
            purification = Some(report);
        }
    }
    Ok(TrainSummary {
        epochs: run.metrics.len(),
        final_metrics: run.metrics.last().copied(),
        purification,
        checkpoint: ckpt_path,
        gate_records: run.gate_records.len(),
    })
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// Fresh evaluation conditions from the dataset's generator distribution.
///
/// Generated datasets are re-sampled on a dedicated stream, so the
/// conditions are not the training labels. Imported datasets have no
/// generator; their clean conditions are resampled with replacement.
pub fn eval_conditions(ds: &Dataset, n: usize, seed: u64) -> Result<Vec<Polar>> {
    match ds.kind {
        DatasetKind::External => {
            let clean: Vec<&Sample> = ds.samples.iter().filter(|s| !s.corrupted).collect();
            if clean.is_empty() {
                return Err(SpfmError::Input("dataset has no clean samples to draw conditions from".into()));
            }
            let mut r = rng::stream(seed, domain::EVAL, 2);
            Ok((0..n).map(|_| clean[r.random_range(0..clean.len())].condition).collect())
        }
        kind => Ok(data::generate_in_domain(kind, n, seed, domain::EVAL, &ds.constants)?
            .samples
            .into_iter()
            .map(|s| s.condition)
            .collect()),
    }
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    /// `(ω, MSE)` per distinct guidance scale, in request order.
    pub mse: Vec<(f64, f64)>,
    pub notes: Vec<String>,
}

impl std::fmt::Display for EvalSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.mse.iter().map(|(w, m)| format!("omega={w} mse={m:.6}")).collect();
        write!(f, "{}", parts.join("; "))
    }
}

pub fn samples_file_name(omega: f64) -> String {
    format!("samples_w{omega}.csv")
}

fn dedup_omegas(omegas: &[f64], notes: &mut Vec<String>) -> Result<Vec<f64>> {
    if omegas.is_empty() {
        return Err(SpfmError::Input("guidance scale list is empty".into()));
    }
    let mut seen: Vec<f64> = Vec::new();
    for &w in omegas {
        if !(w.is_finite() && w >= 0.0) {
            return Err(SpfmError::Input(format!("guidance scale must be >= 0, got {w}")));
        }
        if seen.contains(&w) {
            notes.push(format!("duplicate guidance scale {w} ignored"));
        } else {
            seen.push(w);
        }
    }
    Ok(seen)
}

/// Sample `cfg.sampler.n_eval` fresh conditions at every guidance scale and
/// write `mse.csv`, one `samples_w<ω>.csv` per scale, and `mse.svg`.
///
/// `expected_hash` is the hash of a config the caller vouches for; a
/// mismatch with the checkpoint's hash is a warning written to `notes.txt`.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    dataset_path: &Path,
    expected_hash: Option<[u8; 32]>,
    out: &Path,
) -> Result<EvalSummary> {
    let _lock = OutputLock::acquire(out)?;
    eval_into(cfg, checkpoint, dataset_path, expected_hash, out)
}

fn eval_into(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    dataset_path: &Path,
    expected_hash: Option<[u8; 32]>,
    out: &Path,
) -> Result<EvalSummary> {
    let ck = Checkpoint::load(checkpoint)?;
    let ds = data::load(dataset_path)?;
    let mut notes = Vec::new();
    if let Some(h) = expected_hash {
        if h != ck.config_hash {
            notes.push(format!(
                "warning: checkpoint config hash {} differs from supplied config hash {}",
                hex::encode(ck.config_hash),
                hex::encode(h)
            ));
        }
    }
    let omegas = dedup_omegas(&cfg.sampler.omega, &mut notes)?;
    let conditions = eval_conditions(&ds, cfg.sampler.n_eval, cfg.sampler.seed)?;
    let targets = conditions
        .iter()
        .map(|&c| data::polar_to_euclidean(c))
        .collect::<Result<Vec<_>>>()?;

    let mut mse_csv = String::from("omega,mse,n_eval\n");
    let mut results = Vec::new();
    for &w in &omegas {
        let generated = sampler::sample_batch(&ck.params, &conditions, &cfg.sampler.sampler_config(w))?;
        let mse = eval::conditional_mse(&generated, &conditions)?;
        let path = out.join(samples_file_name(w));
        let mut sw = csv_writer(&path)?;
        let e = csv_err(&path);
        sw.write_record(["condition_angle", "condition_radius", "gen_x", "gen_y", "target_x", "target_y", "sq_error"])
            .map_err(&e)?;
        for ((c, g), t) in conditions.iter().zip(&generated).zip(&targets) {
            sw.write_record([
                c.angle.to_string(),
                c.radius.to_string(),
                g[0].to_string(),
                g[1].to_string(),
                t[0].to_string(),
                t[1].to_string(),
                crate::net::sq_dist(*g, *t).to_string(),
            ])
            .map_err(&e)?;
        }
        sw.flush().map_err(|err| SpfmError::io(&path, err))?;
        let _ = writeln!(mse_csv, "{w},{mse},{}", conditions.len());
        results.push((w, mse));
    }
    write_file(&out.join("mse.csv"), &mse_csv)?;
    write_file(&out.join("mse.svg"), plot::mse_chart_svg(&mse_csv)?)?;
    let notes_path = out.join("notes.txt");
    if notes.is_empty() {
        if notes_path.exists() {
            fs::remove_file(&notes_path).map_err(|e| SpfmError::io(&notes_path, e))?;
        }
    } else {
        write_file(&notes_path, notes.join("\n") + "\n")?;
    }
    Ok(EvalSummary { mse: results, notes })
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AnalyzeSummary {
    pub scores: Vec<DetectionScore>,
    pub records: usize,
}

impl std::fmt::Display for AnalyzeSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self
            .scores
            .iter()
            .map(|s| format!("t'={} f1={:.4}{}", s.t_prime, s.f1, if s.zero_positive { " (zero-positive)" } else { "" }))
            .collect();
        write!(f, "{}", parts.join("; "))
    }
}

/// Up to `n` clean samples of the dataset, in a seeded random order.
pub fn clean_subset(ds: &Dataset, n: usize, seed: u64) -> Vec<Sample> {
    let mut clean: Vec<Sample> = ds.samples.iter().filter(|s| !s.corrupted).cloned().collect();
    clean.shuffle(&mut rng::stream(seed, domain::EVAL, 1));
    clean.truncate(n);
    clean
}

pub fn hist_file_stem(t_prime: f64) -> String {
    format!("hist_t{t_prime}")
}

/// Loss-difference sweep with correct and mismatched labels, detection
/// scores per `t'`, and one histogram CSV/SVG pair per `t'`.
pub fn cmd_analyze(cfg: &ExperimentConfig, checkpoint: &Path, dataset_path: &Path, out: &Path) -> Result<AnalyzeSummary> {
    let _lock = OutputLock::acquire(out)?;
    analyze_into(cfg, checkpoint, dataset_path, out)
}

pub fn write_loss_diff_csv(path: &Path, records: &[LossDiffRecord]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let e = csv_err(path);
    w.write_record(["sample_index", "t_prime", "loss_diff", "label_state"]).map_err(&e)?;
    for r in records {
        w.write_record([
            r.sample_index.to_string(),
            r.t_prime.to_string(),
            r.loss_diff.to_string(),
            r.label_state.as_str().to_string(),
        ])
        .map_err(&e)?;
    }
    w.flush().map_err(|err| SpfmError::io(path, err))
}

pub fn write_scores_csv(path: &Path, scores: &[DetectionScore]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let e = csv_err(path);
    w.write_record([
        "t_prime", "threshold", "precision", "recall", "f1", "true_pos", "false_pos", "false_neg", "true_neg", "zero_positive",
    ])
    .map_err(&e)?;
    for s in scores {
        w.write_record([
            s.t_prime.to_string(),
            s.threshold.to_string(),
            s.precision.to_string(),
            s.recall.to_string(),
            s.f1.to_string(),
            s.true_pos.to_string(),
            s.false_pos.to_string(),
            s.false_neg.to_string(),
            s.true_neg.to_string(),
            s.zero_positive.to_string(),
        ])
        .map_err(&e)?;
    }
    w.flush().map_err(|err| SpfmError::io(path, err))
}

fn analyze_into(cfg: &ExperimentConfig, checkpoint: &Path, dataset_path: &Path, out: &Path) -> Result<AnalyzeSummary> {
    let a = &cfg.analysis;
    eval::check_t_list(&a.t_prime)?;
    let ck = Checkpoint::load(checkpoint)?;
    let ds = data::load(dataset_path)?;
    let clean = clean_subset(&ds, a.n_samples, a.seed);
    let labeled = eval::mismatched_label_set(&clean, a.seed)?;
    let records = eval::loss_diff_sweep_averaged(&ck.params, &labeled, &a.t_prime, a.seed, a.draws)?;
    let scores = eval::detection_scores(&records, a.threshold)?;
    write_loss_diff_csv(&out.join("loss_diff.csv"), &records)?;
    write_scores_csv(&out.join("detection.csv"), &scores)?;
    for &t in &a.t_prime {
        let h = eval::export_histogram(&records, t, a.bins)?;
        let mut text = String::from("t_prime,bin_lo,bin_hi,correct,incorrect\n");
        for b in 0..h.correct.len() {
            let _ = writeln!(text, "{t},{},{},{},{}", h.edges[b], h.edges[b + 1], h.correct[b], h.incorrect[b]);
        }
        let stem = hist_file_stem(t);
        write_file(&out.join(format!("{stem}.csv")), &text)?;
        write_file(&out.join(format!("{stem}.svg")), plot::histogram_svg(&text)?)?;
    }
    Ok(AnalyzeSummary { scores, records: records.len() })
}

// ---------------------------------------------------------------------------
// reproduce
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Figure {
    Fig2,
    Fig3,
}

impl std::str::FromStr for Figure {
    type Err = SpfmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fig2" => Ok(Figure::Fig2),
            "fig3" => Ok(Figure::Fig3),
            other => Err(SpfmError::Input(format!("unknown figure '{other}' (expected fig2 or fig3)"))),
        }
    }
}

impl Figure {
    pub fn pinned_config(self) -> ExperimentConfig {
        let text = match self {
            Figure::Fig2 => FIG2_CONFIG,
            Figure::Fig3 => FIG3_CONFIG,
        };
        ExperimentConfig::parse(text).expect("pinned configs are valid")
    }
}

#[derive(Debug, Clone)]
pub struct ReproduceSummary {
    pub manifest: PathBuf,
    /// `(dataset, model, ω, MSE)` rows for fig2.
    pub mse: Vec<(String, String, f64, f64)>,
    pub scores: Vec<DetectionScore>,
    pub files: Vec<PathBuf>,
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        SpfmError::Config(m) => SpfmError::Config(format!("stage {name}: {m}")),
        SpfmError::Input(m) => SpfmError::Input(format!("stage {name}: {m}")),
        SpfmError::Numeric(m) => SpfmError::Numeric(format!("stage {name}: {m}")),
        SpfmError::Internal(m) => SpfmError::Internal(format!("stage {name}: {m}")),
        SpfmError::Io { path, source } => SpfmError::Input(format!("stage {name}: {}: {source}", path.display())),
    })
}

fn model_name(spfm: bool) -> &'static str {
    if spfm {
        "spfm"
    } else {
        "baseline"
    }
}

fn files_under(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| SpfmError::io(&dir, e))? {
            let entry = entry.map_err(|e| SpfmError::io(&dir, e))?;
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n != LOCK_FILE && n != "manifest.txt") {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn write_manifest(out: &Path, figure: &str, configs: &[(String, &ExperimentConfig)]) -> Result<(PathBuf, Vec<PathBuf>)> {
    let mut text = format!("figure {figure}\n");
    for (name, cfg) in configs {
        let _ = writeln!(
            text,
            "config {name} hash={} dataset_seed={} train_seed={} sampler_seed={} analysis_seed={}",
            cfg.hash_hex(),
            cfg.dataset.seed,
            cfg.training.train_seed,
            cfg.sampler.seed,
            cfg.analysis.seed
        );
    }
    let files = files_under(out)?;
    for f in &files {
        let bytes = fs::read(f).map_err(|e| SpfmError::io(f, e))?;
        let rel = f.strip_prefix(out).unwrap_or(f);
        let _ = writeln!(text, "file {} sha256={}", rel.display(), hex::encode(Sha256::digest(&bytes)));
    }
    let path = out.join("manifest.txt");
    write_file(&path, text)?;
    Ok((path, files))
}

/// Regenerate a figure's full artifact bundle under `out`.
///
/// fig2: both datasets, baseline and self-purifying models, the guidance
/// sweep, `mse_summary.csv`, `mse_vs_omega.svg` and a scatter grid.
/// fig3: one self-purifying model and its loss-difference analysis.
/// A `manifest.txt` lists seeds, config hashes and a SHA-256 per file.
pub fn cmd_reproduce(figure: Figure, cfg: &ExperimentConfig, out: &Path, verbose: bool) -> Result<ReproduceSummary> {
    let _lock = OutputLock::acquire(out)?;
    match figure {
        Figure::Fig2 => reproduce_fig2(cfg, out, verbose),
        Figure::Fig3 => reproduce_fig3(cfg, out, verbose),
    }
}

fn reproduce_fig2(base: &ExperimentConfig, out: &Path, verbose: bool) -> Result<ReproduceSummary> {
    let mut rows = Vec::new();
    let mut configs = Vec::new();
    let mut panels = Vec::new();
    let omegas = dedup_omegas(&base.sampler.omega, &mut Vec::new())?;
    for kind in [DatasetKind::TwoCircles, DatasetKind::Spiral] {
        let ds_dir = out.join(kind.as_str());
        ensure_dir(&ds_dir)?;
        let mut cfg = base.clone();
        cfg.dataset.name = kind;
        let summary = stage(&format!("gen-data {kind}"), gen_data_into(&cfg, &ds_dir, None, false))?;
        for spfm_on in [false, true] {
            let model = model_name(spfm_on);
            let mut mcfg = cfg.clone();
            mcfg.training.spfm_enabled = spfm_on;
            let model_dir = ds_dir.join(model);
            ensure_dir(&model_dir)?;
            if verbose {
                eprintln!("[fig2] training {model} on {kind}");
            }
            stage(&format!("train {kind}/{model}"), train_into(&mcfg, &summary.path, &model_dir, verbose))?;
            let eval_dir = model_dir.join("eval");
            ensure_dir(&eval_dir)?;
            let ev = stage(
                &format!("eval {kind}/{model}"),
                eval_into(&mcfg, &model_dir.join(CHECKPOINT_FILE), &summary.path, Some(mcfg.hash()), &eval_dir),
            )?;
            for (w, mse) in ev.mse {
                rows.push((kind.as_str().to_string(), model.to_string(), w, mse));
            }
            for &w in &omegas {
                let path = eval_dir.join(samples_file_name(w));
                let text = fs::read_to_string(&path).map_err(|e| SpfmError::io(&path, e))?;
                panels.push((format!("{kind} {model} ω={w}"), text));
            }
            configs.push((format!("{kind}/{model}"), mcfg));
        }
    }
    let mut summary_csv = String::from("dataset,model,omega,mse\n");
    for (d, m, w, mse) in &rows {
        let _ = writeln!(summary_csv, "{d},{m},{w},{mse}");
    }
    write_file(&out.join("mse_summary.csv"), &summary_csv)?;
    write_file(&out.join("mse_vs_omega.svg"), plot::mse_chart_svg(&summary_csv)?)?;
    write_file(&out.join("grid.svg"), plot::scatter_grid_svg(&panels, omegas.len())?)?;
    let refs: Vec<(String, &ExperimentConfig)> = configs.iter().map(|(n, c)| (n.clone(), c)).collect();
    let (manifest, files) = write_manifest(out, "fig2", &refs)?;
    Ok(ReproduceSummary { manifest, mse: rows, scores: Vec::new(), files })
}

fn reproduce_fig3(base: &ExperimentConfig, out: &Path, verbose: bool) -> Result<ReproduceSummary> {
    let mut cfg = base.clone();
    cfg.training.spfm_enabled = true;
    let summary = stage("gen-data", gen_data_into(&cfg, out, None, false))?;
    let model_dir = out.join("spfm");
    ensure_dir(&model_dir)?;
    if verbose {
        eprintln!("[fig3] training spfm on {}", cfg.dataset.name);
    }
    stage("train", train_into(&cfg, &summary.path, &model_dir, verbose))?;
    let analysis_dir = out.join("analysis");
    ensure_dir(&analysis_dir)?;
    let an = stage("analyze", analyze_into(&cfg, &model_dir.join(CHECKPOINT_FILE), &summary.path, &analysis_dir))?;
    let (manifest, files) = write_manifest(out, "fig3", &[("spfm".to_string(), &cfg)])?;
    Ok(ReproduceSummary { manifest, mse: Vec::new(), scores: an.scores, files })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lists_parse() {
        assert_eq!(parse_list("0, 0.5,1").unwrap(), vec![0.0, 0.5, 1.0]);
        assert!(parse_list("").unwrap().is_empty());
        assert!(parse_list("0,x").is_err());
    }

    #[test]
    fn omega_dedup_keeps_order_and_notes() {
        let mut notes = Vec::new();
        assert_eq!(dedup_omegas(&[1.0, 0.0, 1.0], &mut notes).unwrap(), vec![1.0, 0.0]);
        assert_eq!(notes.len(), 1);
        assert!(dedup_omegas(&[], &mut notes).is_err());
        assert!(dedup_omegas(&[-1.0], &mut notes).is_err());
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = OutputLock::acquire(dir.path()).unwrap();
        assert!(OutputLock::acquire(dir.path()).is_err());
        drop(lock);
        assert!(OutputLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn figures_parse() {
        assert_eq!("fig2".parse::<Figure>().unwrap(), Figure::Fig2);
        assert!("fig9".parse::<Figure>().is_err());
        assert_eq!(Figure::Fig2.pinned_config().sampler.omega.len(), 5);
    }

    #[test]
    fn eval_conditions_avoid_training_stream() {
        let ds = data::gen_two_circles(50, 3).unwrap();
        let conds = eval_conditions(&ds, 50, 3).unwrap();
        assert_eq!(conds.len(), 50);
        assert!(conds.iter().zip(&ds.samples).any(|(c, s)| *c != s.condition));
    }
}
