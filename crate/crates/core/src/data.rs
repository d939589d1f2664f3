//! Bivariate datasets: synthetic mechanism-mixture generators, a simplified
//! simulated-pair generator, cause-effect pair-file and CSV loaders, and
//! standardization.
//!
//! All generators are pure functions of their spec and seed.

use std::fmt;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Ground-truth causal direction of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    XtoY,
    YtoX,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Direction::XtoY => write!(f, "x->y"),
            Direction::YtoX => write!(f, "y->x"),
        }
    }
}

/// Paired real-valued samples with optional ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BivariateDataset {
    pub name: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Benchmark pair weight (weighted accuracy), defaults to 1.
    pub weight: Option<f64>,
    pub ground_truth_direction: Option<Direction>,
    pub mechanism_labels: Option<Vec<usize>>,
}

impl BivariateDataset {
    pub fn new(name: impl Into<String>, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::Dimension(format!(
                "x has {} samples, y has {}",
                x.len(),
                y.len()
            )));
        }
        if x.len() < 2 {
            return Err(Error::Config("dataset needs at least 2 samples".into()));
        }
        Ok(BivariateDataset {
            name: name.into(),
            x,
            y,
            weight: None,
            ground_truth_direction: None,
            mechanism_labels: None,
        })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Dataset with x and y exchanged (labels and weight carried over, the
    /// ground-truth direction mirrored).
    pub fn swapped(&self) -> BivariateDataset {
        BivariateDataset {
            name: self.name.clone(),
            x: self.y.clone(),
            y: self.x.clone(),
            weight: self.weight,
            ground_truth_direction: self.ground_truth_direction.map(|d| match d {
                Direction::XtoY => Direction::YtoX,
                Direction::YtoX => Direction::XtoY,
            }),
            mechanism_labels: self.mechanism_labels.clone(),
        }
    }
}

/// The five synthetic mechanism shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MechanismFamily {
    F1,
    F2,
    F3,
    F4,
    F5,
}

impl MechanismFamily {
    /// The noise-free mechanism curve.
    pub fn eval(self, x: f64) -> f64 {
        match self {
            MechanismFamily::F1 => 1.0 / (1.0 + x * x),
            MechanismFamily::F2 => (-2.0 * x).exp(),
            MechanismFamily::F3 => x * x,
            MechanismFamily::F4 => x.tanh(),
            MechanismFamily::F5 => (5.0 * x).ln(),
        }
    }

    pub fn all() -> [MechanismFamily; 5] {
        [
            MechanismFamily::F1,
            MechanismFamily::F2,
            MechanismFamily::F3,
            MechanismFamily::F4,
            MechanismFamily::F5,
        ]
    }
}

impl fmt::Display for MechanismFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = match self {
            MechanismFamily::F1 => 1,
            MechanismFamily::F2 => 2,
            MechanismFamily::F3 => 3,
            MechanismFamily::F4 => 4,
            MechanismFamily::F5 => 5,
        };
        write!(f, "f{n}")
    }
}

/// One mechanism class: `y = a·(f(x) + ε)` with `a ~ U(a_range)` per sample,
/// `x ~ U(x_range)`, `ε ~ N(0, σ²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismSpec {
    pub family: MechanismFamily,
    /// Offset law for `a`, half-open uniform interval.
    pub a_range: (f64, f64),
    /// Cause support, uniform interval.
    #[serde(default = "default_x_range")]
    pub x_range: (f64, f64),
    pub noise_sigma: f64,
    pub samples_per_class: usize,
}

fn default_x_range() -> (f64, f64) {
    (0.1, 1.1)
}

impl MechanismSpec {
    pub fn new(family: MechanismFamily, a_range: (f64, f64)) -> Self {
        MechanismSpec {
            family,
            a_range,
            x_range: default_x_range(),
            noise_sigma: 0.05,
            samples_per_class: 100,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.a_range.0 >= self.a_range.1 {
            return Err(Error::Config(format!(
                "offset interval lower bound {} must be below upper bound {}",
                self.a_range.0, self.a_range.1
            )));
        }
        if self.x_range.0 >= self.x_range.1 {
            return Err(Error::Config("empty cause support interval".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise sigma must be >= 0".into()));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Config("samples per class must be >= 1".into()));
        }
        if self.family == MechanismFamily::F5 && self.x_range.0 <= 0.0 {
            return Err(Error::Config(
                "f5 requires strictly positive cause support".into(),
            ));
        }
        Ok(())
    }
}

/// Default two-class mixture: offsets `a₁ ~ U(1, 1.1)` and `a₂ ~ U(0.5, 0.6)`.
pub fn default_two_class_specs(family: MechanismFamily) -> Vec<MechanismSpec> {
    vec![
        MechanismSpec::new(family, (1.0, 1.1)),
        MechanismSpec::new(family, (0.5, 0.6)),
    ]
}

/// Generates a mechanism-mixture dataset; labels record the spec index.
/// Classes are concatenated then shuffled by `seed`.
pub fn gen_mechanism_mixture(specs: &[MechanismSpec], seed: u64) -> Result<BivariateDataset> {
    if specs.is_empty() {
        return Err(Error::Config("at least one mechanism spec required".into()));
    }
    for s in specs {
        s.validate()?;
    }
    let mut rng = seed::rng(seed);
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut labels = Vec::new();
    for (idx, spec) in specs.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let a = rng.random_range(spec.a_range.0..spec.a_range.1);
            let xi = rng.random_range(spec.x_range.0..spec.x_range.1);
            let eps: f64 = if spec.noise_sigma > 0.0 {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * spec.noise_sigma
            } else {
                0.0
            };
            x.push(xi);
            y.push(a * (spec.family.eval(xi) + eps));
            labels.push(idx);
        }
    }

    let mut order: Vec<usize> = (0..x.len()).collect();
    shuffle(&mut order, &mut rng);
    let x: Vec<f64> = order.iter().map(|&i| x[i]).collect();
    let y: Vec<f64> = order.iter().map(|&i| y[i]).collect();
    let labels: Vec<usize> = order.iter().map(|&i| labels[i]).collect();

    let name = format!("{}-mixture", specs[0].family);
    let mut ds = BivariateDataset::new(name, x, y)?;
    ds.ground_truth_direction = Some(Direction::XtoY);
    ds.mechanism_labels = Some(labels);
    Ok(ds)
}

/// Noise levels for the simplified simulated-pair generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimNoise {
    /// Measurement noise on the cause.
    pub x: f64,
    /// Measurement noise on the effect.
    pub y: f64,
    /// Additive mechanism noise fed through the function.
    pub mechanism: f64,
}

impl Default for SimNoise {
    fn default() -> Self {
        SimNoise {
            x: 0.05,
            y: 0.05,
            mechanism: 0.2,
        }
    }
}

/// Simplified simulated pair: the latent cause is a Gaussian mixture, the
/// mechanism a random smooth function (random Fourier features), and both
/// observations carry additive measurement noise:
/// `x = x' + ε_x`, `y = f(x') + ε + ε_y`.
pub fn gen_sim_style(n: usize, noise: SimNoise, seed: u64) -> Result<BivariateDataset> {
    if n < 2 {
        return Err(Error::Config("need at least 2 samples".into()));
    }
    let mut rng = seed::rng(seed);

    let components = rng.random_range(1..=3usize);
    let means: Vec<f64> = (0..components)
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    let stds: Vec<f64> = (0..components)
        .map(|_| rng.random_range(0.3..1.0))
        .collect();

    let features = 6;
    let amps: Vec<f64> = (0..features)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let freqs: Vec<f64> = (0..features)
        .map(|_| rng.random_range(0.3..1.8))
        .collect();
    let phases: Vec<f64> = (0..features)
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();
    let f = |x: f64| -> f64 {
        amps.iter()
            .zip(&freqs)
            .zip(&phases)
            .map(|((a, w), p)| a * (w * x + p).cos())
            .sum()
    };

    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.random_range(0..components);
        let z: f64 = StandardNormal.sample(&mut rng);
        let x_latent = means[c] + stds[c] * z;
        let e_mech: f64 = StandardNormal.sample(&mut rng);
        let e_x: f64 = StandardNormal.sample(&mut rng);
        let e_y: f64 = StandardNormal.sample(&mut rng);
        x.push(x_latent + noise.x * e_x);
        y.push(f(x_latent) + noise.mechanism * e_mech + noise.y * e_y);
    }
    let mut ds = BivariateDataset::new(format!("sim-{seed}"), x, y)?;
    ds.ground_truth_direction = Some(Direction::XtoY);
    Ok(ds)
}

/// One row of the benchmark meta table: pair id, 1-based cause/effect
/// column ranges, weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairMeta {
    pub id: u32,
    pub cause_cols: (usize, usize),
    pub effect_cols: (usize, usize),
    pub weight: f64,
}

impl PairMeta {
    /// Parses `id cause_first cause_last effect_first effect_last weight`.
    pub fn parse_line(line: &str, path: &str, line_no: usize) -> Result<Self> {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 6 {
            return Err(Error::Parse {
                path: path.into(),
                line: line_no,
                msg: format!("meta row needs 6 fields, got {}", fields.len()),
            });
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| Error::Parse {
                path: path.into(),
                line: line_no,
                msg: format!("bad {what}: `{s}`"),
            })
        };
        Ok(PairMeta {
            id: num(fields[0], "pair id")? as u32,
            cause_cols: (num(fields[1], "cause col")? as usize, num(fields[2], "cause col")? as usize),
            effect_cols: (num(fields[3], "effect col")? as usize, num(fields[4], "effect col")? as usize),
            weight: num(fields[5], "weight")?,
        })
    }

    pub fn cause_is_scalar(&self) -> bool {
        self.cause_cols.0 == self.cause_cols.1
    }

    pub fn effect_is_scalar(&self) -> bool {
        self.effect_cols.0 == self.effect_cols.1
    }
}

/// Loads a whitespace-separated numeric pair file using its meta row.
///
/// Pairs whose cause or effect spans more than one column are rejected with
/// a `Config` error naming the reason (the benchmark runner skips them).
pub fn load_pair_file(data_path: &Path, meta: &PairMeta) -> Result<BivariateDataset> {
    if !meta.cause_is_scalar() || !meta.effect_is_scalar() {
        return Err(Error::Config(format!(
            "pair {} is multi-dimensional (cause cols {}..{}, effect cols {}..{})",
            meta.id, meta.cause_cols.0, meta.cause_cols.1, meta.effect_cols.0, meta.effect_cols.1
        )));
    }
    let text = std::fs::read_to_string(data_path)?;
    let path_str = data_path.display().to_string();
    let cause_idx = meta.cause_cols.0 - 1;
    let effect_idx = meta.effect_cols.0 - 1;

    let mut x = Vec::new();
    let mut y = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let need = cause_idx.max(effect_idx) + 1;
        if fields.len() < need {
            return Err(Error::Parse {
                path: path_str.clone(),
                line: i + 1,
                msg: format!("row has {} columns, need {need}", fields.len()),
            });
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| Error::Parse {
                path: path_str.clone(),
                line: i + 1,
                msg: format!("bad number `{s}`"),
            })
        };
        x.push(parse(fields[cause_idx])?);
        y.push(parse(fields[effect_idx])?);
    }

    let stem = data_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| format!("pair{:04}", meta.id));
    let mut ds = BivariateDataset::new(stem, x, y)?;
    ds.weight = Some(meta.weight);
    ds.ground_truth_direction = Some(Direction::XtoY);
    Ok(ds)
}

fn is_null_cell(s: &str) -> bool {
    let t = s.trim();
    t.is_empty()
        || t.eq_ignore_ascii_case("null")
        || t.eq_ignore_ascii_case("na")
        || t.eq_ignore_ascii_case("nan")
}

/// Summary of rows a loader dropped, so nothing is coerced silently.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LoadReport {
    pub rows_read: usize,
    pub rows_dropped_null: usize,
}

/// Loads a headered CSV, dropping rows with null cells in the selected
/// columns. An optional label column becomes mechanism labels (distinct
/// values coded in order of first appearance).
pub fn load_csv(
    path: &Path,
    x_col: &str,
    y_col: &str,
    label_col: Option<&str>,
) -> Result<(BivariateDataset, LoadReport)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Config(format!("bad header in {}: {e}", path.display())))?
        .clone();
    let col_index = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("unknown column `{name}` in {}", path.display())))
    };
    let xi = col_index(x_col)?;
    let yi = col_index(y_col)?;
    let li = label_col.map(col_index).transpose()?;

    let path_str = path.display().to_string();
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut raw_labels: Vec<String> = Vec::new();
    let mut report = LoadReport::default();

    for (row_no, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            path: path_str.clone(),
            line: row_no + 2,
            msg: e.to_string(),
        })?;
        report.rows_read += 1;
        let cells: Vec<&str> = {
            let mut c = vec![record.get(xi).unwrap_or(""), record.get(yi).unwrap_or("")];
            if let Some(l) = li {
                c.push(record.get(l).unwrap_or(""));
            }
            c
        };
        if cells.iter().any(|c| is_null_cell(c)) {
            report.rows_dropped_null += 1;
            continue;
        }
        let parse = |s: &str, col: &str| -> Result<f64> {
            s.trim().parse::<f64>().map_err(|_| Error::Parse {
                path: path_str.clone(),
                line: row_no + 2,
                msg: format!("non-numeric cell `{s}` in column `{col}`"),
            })
        };
        x.push(parse(cells[0], x_col)?);
        y.push(parse(cells[1], y_col)?);
        if li.is_some() {
            raw_labels.push(cells[2].trim().to_string());
        }
    }

    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    let mut ds = BivariateDataset::new(stem, x, y)?;
    if li.is_some() {
        let mut codes: Vec<String> = Vec::new();
        let labels = raw_labels
            .iter()
            .map(|v| match codes.iter().position(|c| c == v) {
                Some(i) => i,
                None => {
                    codes.push(v.clone());
                    codes.len() - 1
                }
            })
            .collect();
        ds.mechanism_labels = Some(labels);
    }
    Ok((ds, report))
}

/// Affine transforms that undo standardization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StandardizeTransform {
    pub x_mean: f64,
    pub x_std: f64,
    pub y_mean: f64,
    pub y_std: f64,
}

impl StandardizeTransform {
    pub fn invert_x(&self, v: f64) -> f64 {
        v * self.x_std + self.x_mean
    }

    pub fn invert_y(&self, v: f64) -> f64 {
        v * self.y_std + self.y_mean
    }
}

/// Population mean/std (divide by n) of a column.
pub fn mean_std_population(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Sample std (divide by n−1); used for KDE bandwidths.
pub fn std_sample(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    var.sqrt()
}

/// Standardizes both columns to zero mean and unit population variance.
pub fn standardize(ds: &BivariateDataset) -> Result<(BivariateDataset, StandardizeTransform)> {
    let (x_mean, x_std) = mean_std_population(&ds.x);
    let (y_mean, y_std) = mean_std_population(&ds.y);
    if x_std <= 0.0 || y_std <= 0.0 {
        return Err(Error::DegenerateData(
            "zero variance column cannot be standardized".into(),
        ));
    }
    let mut out = ds.clone();
    for v in &mut out.x {
        *v = (*v - x_mean) / x_std;
    }
    for v in &mut out.y {
        *v = (*v - y_mean) / y_std;
    }
    Ok((
        out,
        StandardizeTransform {
            x_mean,
            x_std,
            y_mean,
            y_std,
        },
    ))
}

/// Fisher–Yates with the given generator.
pub fn shuffle<T>(items: &mut [T], rng: &mut rand_chacha::ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Seeded train/test index split; `fraction` is the training share.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config("split fraction must lie in (0,1)".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = seed::rng(seed);
    shuffle(&mut idx, &mut rng);
    let cut = ((n as f64) * fraction).round() as usize;
    let cut = cut.clamp(1, n - 1);
    let test = idx.split_off(cut);
    Ok((idx, test))
}
