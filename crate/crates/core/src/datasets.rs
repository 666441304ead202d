//! Synthetic datasets, splitting, standardization and CSV interchange.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resnet::Batch;

pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Smiley,
    Spiral,
    Analytic,
}

impl Generator {
    pub fn name(self) -> &'static str {
        match self {
            Generator::Smiley => "smiley",
            Generator::Spiral => "spiral",
            Generator::Analytic => "analytic",
        }
    }

    pub fn generate(self, n: usize, seed: u64) -> Result<LabeledDataset> {
        match self {
            Generator::Smiley => gen_smiley(n, seed),
            Generator::Spiral => gen_spiral(n, seed),
            Generator::Analytic => gen_analytic_regression(n, seed),
        }
    }
}

impl std::str::FromStr for Generator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smiley" => Ok(Generator::Smiley),
            "spiral" => Ok(Generator::Spiral),
            "analytic" => Ok(Generator::Analytic),
            other => Err(Error::Dataset(format!("unknown generator `{other}`"))),
        }
    }
}

/// Samples stored one per column.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub task: Task,
    pub seed: Option<u64>,
    /// `n_in × n`.
    pub features: DMatrix<f64>,
    /// `n_out × n`; one-hot for classification.
    pub targets: DMatrix<f64>,
}

impl LabeledDataset {
    pub fn new(name: impl Into<String>, task: Task, features: DMatrix<f64>, targets: DMatrix<f64>) -> Result<Self> {
        if features.ncols() != targets.ncols() {
            return Err(Error::Shape {
                what: "dataset targets",
                expected: features.ncols(),
                got: targets.ncols(),
            });
        }
        Ok(Self {
            name: name.into(),
            task,
            seed: None,
            features,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.features.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_in(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_out(&self) -> usize {
        self.targets.nrows()
    }

    /// Class index of each sample (arg-max of the target column).
    pub fn labels(&self) -> Vec<usize> {
        (0..self.len())
            .map(|j| {
                let c = self.targets.column(j);
                (0..c.len()).fold(0, |best, i| if c[i] > c[best] { i } else { best })
            })
            .collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_out()];
        for l in self.labels() {
            counts[l] += 1;
        }
        counts
    }

    pub fn subset(&self, columns: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            task: self.task,
            seed: self.seed,
            features: self.features.select_columns(columns.iter()),
            targets: self.targets.select_columns(columns.iter()),
        }
    }

    pub fn to_batch(&self) -> Result<Batch> {
        Batch::new(self.features.clone(), self.targets.clone(), (0..self.len()).collect())
    }

    /// Seeded shuffle into disjoint training and validation parts.
    pub fn split(&self, n_train: usize, seed: u64) -> Result<SplitDataset> {
        if n_train == 0 || n_train > self.len() {
            return Err(Error::Dataset(format!(
                "cannot take {n_train} training samples from {}",
                self.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(SplitDataset {
            train: self.subset(&order[..n_train]),
            validation: self.subset(&order[n_train..]),
        })
    }

    /// Writes `x1,…,c1,…` rows and a `.meta.json` sidecar.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let header: Vec<String> = (1..=self.n_in())
            .map(|i| format!("x{i}"))
            .chain((1..=self.n_out()).map(|i| format!("c{i}")))
            .collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for j in 0..self.len() {
            let row: Vec<String> = self
                .features
                .column(j)
                .iter()
                .chain(self.targets.column(j).iter())
                .map(|v| format!("{v:?}"))
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        fs::write(path, out)?;
        let meta = DatasetMeta {
            schema_version: DATASET_SCHEMA_VERSION,
            generator: self.name.clone(),
            task: self.task,
            seed: self.seed,
            n: self.len(),
            n_in: self.n_in(),
            n_out: self.n_out(),
        };
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    /// Reads a CSV written by [`write_csv`](Self::write_csv). Without a
    /// sidecar the task is classification iff every target row is one-hot.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Dataset(format!("{}: empty file", path.display())))?;
        let names: Vec<&str> = header.split(',').map(str::trim).collect();
        let n_in = names.iter().filter(|h| h.starts_with('x')).count();
        let n_out = names.iter().filter(|h| h.starts_with('c')).count();
        if n_in == 0 || n_out == 0 || n_in + n_out != names.len() {
            return Err(Error::Dataset(format!(
                "{}: header must be x1..xn,c1..cm",
                path.display()
            )));
        }
        let mut feats = Vec::new();
        let mut targs = Vec::new();
        for (row, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let values = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| Error::Dataset(format!("{}: row {}: {e}", path.display(), row + 2)))?;
            if values.len() != names.len() {
                return Err(Error::Dataset(format!(
                    "{}: row {} has {} fields, expected {}",
                    path.display(),
                    row + 2,
                    values.len(),
                    names.len()
                )));
            }
            feats.extend_from_slice(&values[..n_in]);
            targs.extend_from_slice(&values[n_in..]);
        }
        let n = feats.len() / n_in;
        let features = DMatrix::from_column_slice(n_in, n, &feats);
        let targets = DMatrix::from_column_slice(n_out, n, &targs);
        let meta = fs::read_to_string(sidecar_path(path))
            .ok()
            .map(|s| serde_json::from_str::<DatasetMeta>(&s))
            .transpose()?;
        let (name, task, seed) = match meta {
            Some(m) => (m.generator, m.task, m.seed),
            None => {
                let one_hot = targets
                    .column_iter()
                    .all(|c| c.iter().all(|v| *v == 0.0 || *v == 1.0) && c.sum() == 1.0);
                let task = if one_hot {
                    Task::Classification
                } else {
                    Task::Regression
                };
                ("csv".to_string(), task, None)
            }
        };
        let mut ds = Self::new(name, task, features, targets)?;
        ds.seed = seed;
        Ok(ds)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub schema_version: u32,
    pub generator: String,
    pub task: Task,
    pub seed: Option<u64>,
    pub n: usize,
    pub n_in: usize,
    pub n_out: usize,
}

pub fn sidecar_path(csv: &Path) -> PathBuf {
    let mut s = csv.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: LabeledDataset,
    pub validation: LabeledDataset,
}

impl SplitDataset {
    /// Standardizes features with training-split statistics.
    pub fn standardize(&self) -> (SplitDataset, Standardizer) {
        let st = Standardizer::fit(&self.train.features);
        let mut train = self.train.clone();
        let mut validation = self.validation.clone();
        train.features = st.apply(&train.features);
        validation.features = st.apply(&validation.features);
        (SplitDataset { train, validation }, st)
    }
}

/// Per-feature affine map `x ↦ (x − mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Population statistics per row; zero variance gives scale 1.
    pub fn fit(features: &DMatrix<f64>) -> Self {
        let n = features.ncols().max(1) as f64;
        let mut mean = Vec::with_capacity(features.nrows());
        let mut scale = Vec::with_capacity(features.nrows());
        for row in features.row_iter() {
            let m = row.sum() / n;
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            mean.push(m);
            scale.push(if var > 0.0 { var.sqrt() } else { 1.0 });
        }
        Self { mean, scale }
    }

    pub fn apply(&self, features: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(features.nrows(), features.ncols(), |i, j| {
            (features[(i, j)] - self.mean[i]) / self.scale[i]
        })
    }

    pub fn invert(&self, features: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(features.nrows(), features.ncols(), |i, j| {
            features[(i, j)] * self.scale[i] + self.mean[i]
        })
    }
}

fn one_hot(class: usize, classes: usize) -> DVector<f64> {
    DVector::from_fn(classes, |i, _| if i == class { 1.0 } else { 0.0 })
}

fn quotas(n: usize, classes: usize) -> Vec<usize> {
    (0..classes)
        .map(|c| n / classes + usize::from(c < n % classes))
        .collect()
}

/// Draws points until every class quota is filled.
fn balanced<R: Rng>(
    n: usize,
    classes: usize,
    rng: &mut R,
    mut draw: impl FnMut(&mut R) -> (Vec<f64>, usize),
) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut left = quotas(n, classes);
    let mut xs = Vec::with_capacity(n);
    let mut cs = Vec::with_capacity(n);
    while xs.len() < n {
        let (x, c) = draw(rng);
        if left[c] > 0 {
            left[c] -= 1;
            xs.push(DVector::from_vec(x));
            cs.push(one_hot(c, classes));
        }
    }
    (DMatrix::from_columns(&xs), DMatrix::from_columns(&cs))
}

pub const SMILEY_BACKGROUND: usize = 0;
pub const SMILEY_LEFT_EYE: usize = 1;
pub const SMILEY_RIGHT_EYE: usize = 2;
pub const SMILEY_MOUTH: usize = 3;

/// Region of a point of `[−5, 5]²` in the smiley picture.
pub fn smiley_label(x: f64, y: f64) -> usize {
    let dist = |cx: f64, cy: f64| ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
    if dist(-1.5, 1.5) <= 0.6 {
        SMILEY_LEFT_EYE
    } else if dist(1.5, 1.5) <= 0.6 {
        SMILEY_RIGHT_EYE
    } else if (2.0..=2.6).contains(&dist(0.0, 0.5)) && y < -0.2 {
        SMILEY_MOUTH
    } else {
        SMILEY_BACKGROUND
    }
}

/// Four balanced classes on `[−5, 5]²`: background, two eyes and a mouth.
pub fn gen_smiley(n: usize, seed: u64) -> Result<LabeledDataset> {
    if n < 4 {
        return Err(Error::Dataset("smiley needs at least 4 samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (features, targets) = balanced(n, 4, &mut rng, |r| {
        let x = r.random_range(-5.0..=5.0);
        let y = r.random_range(-5.0..=5.0);
        (vec![x, y], smiley_label(x, y))
    });
    let mut ds = LabeledDataset::new("smiley", Task::Classification, features, targets)?;
    ds.seed = Some(seed);
    Ok(ds)
}

pub const SPIRAL_CLASSES: usize = 5;
pub const SPIRAL_CHUNKS: usize = 10;
pub const SPIRAL_NOISE: f64 = 0.05;

/// Noise-free point of the spiral at parameter `t ∈ [0, 4π]`.
pub fn spiral_point(t: f64) -> [f64; 3] {
    let r = 0.1 + 1.3 * t / (4.0 * PI);
    [r * t.cos(), r * t.sin(), 3.0 * t / (4.0 * PI) - 1.5]
}

pub fn spiral_chunk(t: f64) -> usize {
    ((t / (4.0 * PI) * SPIRAL_CHUNKS as f64) as usize).min(SPIRAL_CHUNKS - 1)
}

/// Seeded assignment of the ten chunks to five classes, two chunks each.
pub fn spiral_chunk_classes(seed: u64) -> [usize; SPIRAL_CHUNKS] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c1a5);
    let mut map = [0; SPIRAL_CHUNKS];
    for (i, m) in map.iter_mut().enumerate() {
        *m = i / 2;
    }
    map.shuffle(&mut rng);
    map
}

pub fn gen_spiral(n: usize, seed: u64) -> Result<LabeledDataset> {
    gen_spiral_with_noise(n, seed, SPIRAL_NOISE)
}

/// Points along a 3-D spiral cut into ten equal-parameter chunks.
pub fn gen_spiral_with_noise(n: usize, seed: u64, noise: f64) -> Result<LabeledDataset> {
    if n < SPIRAL_CHUNKS {
        return Err(Error::Dataset("spiral needs at least 10 samples".into()));
    }
    if !(noise >= 0.0) {
        return Err(Error::Dataset(format!("noise must be non-negative, got {noise}")));
    }
    let map = spiral_chunk_classes(seed);
    let normal = Normal::new(0.0, noise).map_err(|e| Error::Dataset(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (features, targets) = balanced(n, SPIRAL_CLASSES, &mut rng, |r| {
        let t = r.random_range(0.0..4.0 * PI);
        let p = spiral_point(t);
        let x = p
            .iter()
            .map(|v| {
                let e = if noise > 0.0 { normal.sample(r) } else { 0.0 };
                (v + e).clamp(-1.5, 1.5)
            })
            .collect();
        (x, map[spiral_chunk(t)])
    });
    let mut ds = LabeledDataset::new("spiral", Task::Classification, features, targets)?;
    ds.seed = Some(seed);
    Ok(ds)
}

/// `[sin(x₁)x₂ + x₃², cos(x₁x₂) − x₃]`.
pub fn analytic_target(x: &[f64; 3]) -> [f64; 2] {
    [x[0].sin() * x[1] + x[2] * x[2], (x[0] * x[1]).cos() - x[2]]
}

/// Three uniform inputs on `[−1, 1]` mapped to two smooth outputs.
pub fn gen_analytic_regression(n: usize, seed: u64) -> Result<LabeledDataset> {
    if n == 0 {
        return Err(Error::Dataset("analytic regression needs at least 1 sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = DMatrix::zeros(3, n);
    let mut targets = DMatrix::zeros(2, n);
    for j in 0..n {
        let x = [
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
        ];
        let c = analytic_target(&x);
        features.set_column(j, &DVector::from_row_slice(&x));
        targets.set_column(j, &DVector::from_row_slice(&c));
    }
    let mut ds = LabeledDataset::new("analytic", Task::Regression, features, targets)?;
    ds.seed = Some(seed);
    Ok(ds)
}
