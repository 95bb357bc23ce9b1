//! Synthetic 2D datasets with polar-coordinate conditions.
//!
//! Two generators are provided (two concentric rings and an Archimedean
//! spiral). Every sample carries the polar pair it was generated from as its
//! condition; [`corrupt_labels`] then reassigns a fixed fraction of those
//! conditions while keeping a ground-truth flag for evaluation.

use std::f64::consts::TAU;
use std::fmt;
use std::io::{BufRead, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpfmError};
use crate::rng::{self, domain};

/// A polar condition: angle in radians and a non-negative radius.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Polar {
    pub angle: f64,
    pub radius: f64,
}

impl Polar {
    pub const fn new(angle: f64, radius: f64) -> Self {
        Polar { angle, radius }
    }

    pub fn to_euclidean(self) -> Result<[f64; 2]> {
        polar_to_euclidean(self)
    }
}

/// `(r cos θ, r sin θ)`; negative radii are rejected.
pub fn polar_to_euclidean(c: Polar) -> Result<[f64; 2]> {
    if !(c.radius >= 0.0) {
        return Err(SpfmError::Input(format!(
            "polar radius must be >= 0, got {}",
            c.radius
        )));
    }
    Ok([c.radius * c.angle.cos(), c.radius * c.angle.sin()])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    TwoCircles,
    Spiral,
    /// Imported from CSV; no generator is attached.
    External,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::TwoCircles => "two_circles",
            DatasetKind::Spiral => "spiral",
            DatasetKind::External => "external",
        }
    }

    fn code(self) -> u8 {
        match self {
            DatasetKind::TwoCircles => 0,
            DatasetKind::Spiral => 1,
            DatasetKind::External => 2,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DatasetKind::TwoCircles),
            1 => Ok(DatasetKind::Spiral),
            2 => Ok(DatasetKind::External),
            other => Err(SpfmError::Input(format!("unknown dataset kind code {other}"))),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetKind {
    type Err = SpfmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_circles" => Ok(DatasetKind::TwoCircles),
            "spiral" => Ok(DatasetKind::Spiral),
            "external" => Ok(DatasetKind::External),
            other => Err(SpfmError::Input(format!("unknown dataset name '{other}'"))),
        }
    }
}

/// How a corrupted sample's new condition is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionMode {
    /// Copy the condition of a uniformly chosen other sample.
    #[default]
    SwapExisting,
    /// Draw a fresh angle in `[0, 2π)` and radius in the dataset's radius range.
    DrawUniform,
}

/// Shape constants shared by the generators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConstants {
    pub r_inner: f64,
    pub r_outer: f64,
    pub r_min: f64,
    pub r_max: f64,
    pub turns: f64,
    pub jitter: f64,
}

impl Default for GenConstants {
    fn default() -> Self {
        GenConstants {
            r_inner: 1.0,
            r_outer: 2.0,
            r_min: 0.5,
            r_max: 2.5,
            turns: 2.0,
            jitter: 0.03,
        }
    }
}

impl GenConstants {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("r_inner", self.r_inner),
            ("r_outer", self.r_outer),
            ("r_min", self.r_min),
            ("r_max", self.r_max),
            ("turns", self.turns),
            ("jitter", self.jitter),
        ];
        for (name, v) in all {
            if !v.is_finite() || v < 0.0 {
                return Err(SpfmError::Config(format!(
                    "dataset.constants.{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if self.r_min > self.r_max {
            return Err(SpfmError::Config(
                "dataset.constants.r_min must not exceed r_max".into(),
            ));
        }
        Ok(())
    }

    fn radius_range(&self, kind: DatasetKind) -> (f64, f64) {
        match kind {
            DatasetKind::Spiral => (self.r_min, self.r_max),
            _ => (
                self.r_inner.min(self.r_outer),
                self.r_inner.max(self.r_outer),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x1: [f64; 2],
    pub condition: Polar,
    /// Ground truth for evaluation only; training never reads it.
    pub corrupted: bool,
    pub original_condition: Polar,
}

impl Sample {
    pub fn clean(x1: [f64; 2], condition: Polar) -> Self {
        Sample {
            x1,
            condition,
            corrupted: false,
            original_condition: condition,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub seed: u64,
    pub constants: GenConstants,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn corrupted_count(&self) -> usize {
        self.samples.iter().filter(|s| s.corrupted).count()
    }

    /// Fraction of corrupted samples, computed from the flags.
    pub fn corruption_rate(&self) -> f64 {
        if self.samples.is_empty() {
            0.0
        } else {
            self.corrupted_count() as f64 / self.samples.len() as f64
        }
    }
}

fn check_count(n: usize) -> Result<()> {
    if n == 0 {
        return Err(SpfmError::Input("dataset size must be >= 1".into()));
    }
    Ok(())
}

fn jittered<R: Rng>(rng: &mut R, c: Polar, sigma: f64) -> [f64; 2] {
    let [x, y] = [c.radius * c.angle.cos(), c.radius * c.angle.sin()];
    let dx: f64 = rng.sample(StandardNormal);
    let dy: f64 = rng.sample(StandardNormal);
    [x + sigma * dx, y + sigma * dy]
}

fn uniform_angle<R: Rng>(rng: &mut R) -> f64 {
    let a = rng.random::<f64>() * TAU;
    if a >= TAU {
        a - TAU
    } else {
        a
    }
}

/// Polar pair at arc parameter `u` along the spiral, before jitter.
pub fn spiral_point(u: f64, k: &GenConstants) -> Polar {
    let radius = k.r_min + (k.r_max - k.r_min) * u;
    let angle = (k.turns * TAU * u).rem_euclid(TAU);
    Polar { angle, radius }
}

pub fn gen_two_circles(n: usize, seed: u64) -> Result<Dataset> {
    generate(DatasetKind::TwoCircles, n, seed, &GenConstants::default())
}

pub fn gen_spiral(n: usize, seed: u64) -> Result<Dataset> {
    generate(DatasetKind::Spiral, n, seed, &GenConstants::default())
}

/// Draw `n` clean samples from the named generator.
pub fn generate(kind: DatasetKind, n: usize, seed: u64, k: &GenConstants) -> Result<Dataset> {
    generate_in_domain(kind, n, seed, domain::DATA, k)
}

/// [`generate`] on a different stream domain, for held-out draws that must
/// not coincide with the training set when seeds happen to match.
pub fn generate_in_domain(
    kind: DatasetKind,
    n: usize,
    seed: u64,
    stream_domain: u64,
    k: &GenConstants,
) -> Result<Dataset> {
    check_count(n)?;
    k.validate()?;
    let mut rng = rng::stream(seed, stream_domain, kind.code() as u64);
    let samples = match kind {
        DatasetKind::TwoCircles => (0..n)
            .map(|_| {
                let radius = if rng.random::<bool>() { k.r_outer } else { k.r_inner };
                let angle = uniform_angle(&mut rng);
                let c = Polar { angle, radius };
                Sample::clean(jittered(&mut rng, c, k.jitter), c)
            })
            .collect(),
        DatasetKind::Spiral => (0..n)
            .map(|_| {
                let c = spiral_point(rng.random::<f64>(), k);
                Sample::clean(jittered(&mut rng, c, k.jitter), c)
            })
            .collect(),
        DatasetKind::External => {
            return Err(SpfmError::Input(
                "external datasets are imported, not generated".into(),
            ))
        }
    };
    Ok(Dataset {
        kind,
        seed,
        constants: *k,
        samples,
    })
}

/// Reassign the conditions of exactly `round(rate * n)` samples.
///
/// The affected samples are the head of a seeded shuffle of all indices.
/// `x1` and `original_condition` are never touched. The input must be clean.
pub fn corrupt_labels(
    dataset: &Dataset,
    rate: f64,
    seed: u64,
    mode: CorruptionMode,
) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(SpfmError::Input(format!(
            "corruption rate must lie in [0, 1], got {rate}"
        )));
    }
    if dataset.corrupted_count() > 0 {
        return Err(SpfmError::Input(
            "dataset is already corrupted; corrupt a clean dataset".into(),
        ));
    }
    let n = dataset.len();
    let count = (rate * n as f64).round() as usize;
    let mut rng = rng::stream(seed, domain::CORRUPT, 0);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let (r_lo, r_hi) = dataset.constants.radius_range(dataset.kind);
    let mut out = dataset.clone();
    for &i in &order[..count] {
        let replacement = if mode == CorruptionMode::SwapExisting && n > 1 {
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            dataset.samples[j].condition
        } else {
            let angle = uniform_angle(&mut rng);
            let radius = r_lo + (r_hi - r_lo) * rng.random::<f64>();
            Polar { angle, radius }
        };
        let s = &mut out.samples[i];
        s.condition = replacement;
        s.corrupted = true;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

const TEXT_MAGIC: &str = "# spfm-dataset v1";
const BIN_MAGIC: &[u8; 8] = b"SPFMDATA";
const BIN_VERSION: u8 = 1;

/// Column names used by the text format and by CSV import.
pub const COLUMNS: [&str; 7] = [
    "x1_x",
    "x1_y",
    "angle",
    "radius",
    "corrupted",
    "orig_angle",
    "orig_radius",
];

/// Text format: one header line with metadata, then one comma-separated
/// record per sample in [`COLUMNS`] order. Floats use Rust's shortest
/// round-trip formatting, so save/load is bit-exact.
pub fn write_text<W: Write>(ds: &Dataset, mut w: W) -> std::io::Result<()> {
    let k = &ds.constants;
    writeln!(
        w,
        "{TEXT_MAGIC} name={} n={} seed={} corruption_rate={} r_inner={} r_outer={} r_min={} r_max={} turns={} jitter={}",
        ds.kind,
        ds.len(),
        ds.seed,
        ds.corruption_rate(),
        k.r_inner,
        k.r_outer,
        k.r_min,
        k.r_max,
        k.turns,
        k.jitter
    )?;
    for s in &ds.samples {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            s.x1[0],
            s.x1[1],
            s.condition.angle,
            s.condition.radius,
            u8::from(s.corrupted),
            s.original_condition.angle,
            s.original_condition.radius
        )?;
    }
    Ok(())
}

fn parse_f64(field: &str, what: &str, line: usize) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| SpfmError::Input(format!("line {line}: bad {what} value '{field}'")))
}

fn parse_flag(field: &str, line: usize) -> Result<bool> {
    match field.trim() {
        "0" | "false" => Ok(false),
        "1" | "true" => Ok(true),
        other => Err(SpfmError::Input(format!(
            "line {line}: bad corrupted flag '{other}'"
        ))),
    }
}

fn sample_from_fields(fields: &[&str], line: usize) -> Result<Sample> {
    if fields.len() != COLUMNS.len() {
        return Err(SpfmError::Input(format!(
            "line {line}: expected {} fields, found {}",
            COLUMNS.len(),
            fields.len()
        )));
    }
    let mut v = [0.0; 7];
    for (idx, slot) in v.iter_mut().enumerate() {
        if idx != 4 {
            *slot = parse_f64(fields[idx], COLUMNS[idx], line)?;
        }
    }
    let corrupted = parse_flag(fields[4], line)?;
    let s = Sample {
        x1: [v[0], v[1]],
        condition: Polar::new(v[2], v[3]),
        corrupted,
        original_condition: Polar::new(v[5], v[6]),
    };
    validate_sample(&s, line)?;
    Ok(s)
}

fn validate_sample(s: &Sample, line: usize) -> Result<()> {
    let vals = [
        s.x1[0],
        s.x1[1],
        s.condition.angle,
        s.condition.radius,
        s.original_condition.angle,
        s.original_condition.radius,
    ];
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(SpfmError::Input(format!("line {line}: non-finite value")));
    }
    if s.condition.radius < 0.0 || s.original_condition.radius < 0.0 {
        return Err(SpfmError::Input(format!("line {line}: negative radius")));
    }
    if !s.corrupted && s.condition != s.original_condition {
        return Err(SpfmError::Input(format!(
            "line {line}: clean sample whose condition differs from original_condition"
        )));
    }
    Ok(())
}

pub fn read_text<R: BufRead>(r: R) -> Result<Dataset> {
    let mut lines = r.lines();
    let header = match lines.next() {
        Some(l) => l.map_err(|e| SpfmError::Input(format!("reading header: {e}")))?,
        None => return Err(SpfmError::Input("empty dataset file".into())),
    };
    let rest = header
        .strip_prefix(TEXT_MAGIC)
        .ok_or_else(|| SpfmError::Input("missing dataset header".into()))?;
    let mut kind = None;
    let mut seed = None;
    let mut n = None;
    let mut k = GenConstants::default();
    for kv in rest.split_whitespace() {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| SpfmError::Input(format!("header: malformed entry '{kv}'")))?;
        match key {
            "name" => kind = Some(value.parse::<DatasetKind>()?),
            "seed" => {
                seed = Some(value.parse::<u64>().map_err(|_| {
                    SpfmError::Input(format!("header: bad seed '{value}'"))
                })?)
            }
            "n" => {
                n = Some(value.parse::<usize>().map_err(|_| {
                    SpfmError::Input(format!("header: bad n '{value}'"))
                })?)
            }
            "corruption_rate" => {}
            "r_inner" => k.r_inner = parse_f64(value, key, 1)?,
            "r_outer" => k.r_outer = parse_f64(value, key, 1)?,
            "r_min" => k.r_min = parse_f64(value, key, 1)?,
            "r_max" => k.r_max = parse_f64(value, key, 1)?,
            "turns" => k.turns = parse_f64(value, key, 1)?,
            "jitter" => k.jitter = parse_f64(value, key, 1)?,
            other => {
                return Err(SpfmError::Input(format!("header: unknown key '{other}'")))
            }
        }
    }
    let kind = kind.ok_or_else(|| SpfmError::Input("header: missing name".into()))?;
    let seed = seed.ok_or_else(|| SpfmError::Input("header: missing seed".into()))?;
    let mut samples = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line.map_err(|e| SpfmError::Input(format!("reading record: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        samples.push(sample_from_fields(&fields, idx + 2)?);
    }
    if let Some(n) = n {
        if n != samples.len() {
            return Err(SpfmError::Input(format!(
                "header declares n={n} but {} records follow",
                samples.len()
            )));
        }
    }
    if samples.is_empty() {
        return Err(SpfmError::Input("dataset has no records".into()));
    }
    Ok(Dataset {
        kind,
        seed,
        constants: k,
        samples,
    })
}

/// Compact little-endian binary form: `SPFMDATA`, version byte, kind byte,
/// seed (u64), count (u64), six generator constants (f64), then per sample
/// six f64 (`x1_x x1_y angle radius orig_angle orig_radius`) and one flag byte.
pub fn write_binary<W: Write>(ds: &Dataset, mut w: W) -> std::io::Result<()> {
    w.write_all(BIN_MAGIC)?;
    w.write_all(&[BIN_VERSION, ds.kind.code()])?;
    w.write_all(&ds.seed.to_le_bytes())?;
    w.write_all(&(ds.len() as u64).to_le_bytes())?;
    let k = &ds.constants;
    for v in [k.r_inner, k.r_outer, k.r_min, k.r_max, k.turns, k.jitter] {
        w.write_all(&v.to_le_bytes())?;
    }
    for s in &ds.samples {
        for v in [
            s.x1[0],
            s.x1[1],
            s.condition.angle,
            s.condition.radius,
            s.original_condition.angle,
            s.original_condition.radius,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&[u8::from(s.corrupted)])?;
    }
    Ok(())
}

fn take<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| SpfmError::Input(format!("truncated binary dataset: {e}")))?;
    Ok(buf)
}

pub fn read_binary<R: Read>(mut r: R) -> Result<Dataset> {
    if &take::<8, _>(&mut r)? != BIN_MAGIC {
        return Err(SpfmError::Input("not a binary dataset (bad magic)".into()));
    }
    let [version, kind] = take::<2, _>(&mut r)?;
    if version != BIN_VERSION {
        return Err(SpfmError::Input(format!(
            "unsupported binary dataset version {version}"
        )));
    }
    let kind = DatasetKind::from_code(kind)?;
    let seed = u64::from_le_bytes(take(&mut r)?);
    let n = u64::from_le_bytes(take(&mut r)?) as usize;
    let mut f = || -> Result<f64> { Ok(f64::from_le_bytes(take(&mut r)?)) };
    let constants = GenConstants {
        r_inner: f()?,
        r_outer: f()?,
        r_min: f()?,
        r_max: f()?,
        turns: f()?,
        jitter: f()?,
    };
    let mut samples = Vec::with_capacity(n.min(1 << 20));
    for i in 0..n {
        let mut v = [0.0; 6];
        for slot in v.iter_mut() {
            *slot = f64::from_le_bytes(take(&mut r)?);
        }
        let [flag] = take::<1, _>(&mut r)?;
        let s = Sample {
            x1: [v[0], v[1]],
            condition: Polar::new(v[2], v[3]),
            corrupted: flag != 0,
            original_condition: Polar::new(v[4], v[5]),
        };
        validate_sample(&s, i + 1)?;
        samples.push(s);
    }
    Ok(Dataset {
        kind,
        seed,
        constants,
        samples,
    })
}

/// Import an external 2D dataset from a CSV with a header row naming the
/// [`COLUMNS`] (any order).
pub fn import_csv<R: Read>(r: R) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let headers = reader
        .headers()
        .map_err(|e| SpfmError::Input(format!("csv header: {e}")))?
        .clone();
    let mut positions = [0usize; 7];
    for (slot, name) in positions.iter_mut().zip(COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| SpfmError::Input(format!("csv: missing column '{name}'")))?;
    }
    let mut samples = Vec::new();
    for (idx, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| SpfmError::Input(format!("csv record {}: {e}", idx + 1)))?;
        let fields: Vec<&str> = positions
            .iter()
            .map(|&p| rec.get(p).unwrap_or(""))
            .collect();
        samples.push(sample_from_fields(&fields, idx + 2)?);
    }
    check_count(samples.len())?;
    Ok(Dataset {
        kind: DatasetKind::External,
        seed: 0,
        constants: GenConstants::default(),
        samples,
    })
}

/// Save by extension: `.bin` selects the binary form, anything else text.
pub fn save(ds: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| SpfmError::io(path, e))?;
    let w = std::io::BufWriter::new(file);
    let res = if path.extension().is_some_and(|e| e == "bin") {
        write_binary(ds, w)
    } else {
        write_text(ds, w)
    };
    res.map_err(|e| SpfmError::io(path, e))
}

/// Load by content: binary magic, text header, or else CSV import.
pub fn load(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| SpfmError::io(path, e))?;
    if bytes.starts_with(BIN_MAGIC) {
        read_binary(bytes.as_slice())
    } else if bytes.starts_with(TEXT_MAGIC.as_bytes()) {
        read_text(bytes.as_slice())
    } else {
        import_csv(bytes.as_slice())
    }
}
