//! Continuous-in-depth dense residual network.
//!
//! The network integrates `dq/dt = σ(W(t) q + b(t))` with the explicit Euler
//! scheme on a uniform grid of `K` steps, lifting the input with `q_0 = Q x`
//! and reading out with a hypothesis `y = P(W_K q_K + b_K)`. Controls are
//! piecewise constant, so block `k` owns `(W_k, b_k)` on the `k`-th interval.
//!
//! All parameters live in one flat vector laid out as
//! `(Q, W_0, b_0, …, W_{K-1}, b_{K-1}, W_K, b_K)`, each matrix stored
//! column-major. Samples are stored column-wise (`n_in × n_b`) so the whole
//! batch moves through a block with one matrix product.
//!
//! Evaluations are pure and sequential: samples are reduced in a fixed order,
//! so identical inputs give bit-identical outputs.

use std::ops::Range;

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut, DVector, DVectorView};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability floor used inside the cross-entropy logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hypothesis {
    Softmax,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    LeastSquares,
}

/// How the block count relates to the time step.
///
/// `Intervals` treats the `K` blocks as `K` time intervals (`Δt = T/K`);
/// `Nodes` treats them as grid nodes (`Δt = T/(K-1)`), which keeps the step
/// halving exactly under node-doubling refinement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TimeGrid {
    #[default]
    Intervals,
    Nodes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub n_in: usize,
    pub n_out: usize,
    /// Hidden state dimension.
    pub width: usize,
    /// Number of residual blocks `K`.
    pub blocks: usize,
    /// Final time `T`.
    pub final_time: f64,
    pub activation: Activation,
    pub hypothesis: Hypothesis,
    pub loss: LossKind,
    pub beta1: f64,
    pub beta2: f64,
    #[serde(default)]
    pub grid: TimeGrid,
}

impl NetworkConfig {
    /// Softmax / cross-entropy network with tanh blocks and no regularization.
    pub fn classifier(n_in: usize, n_out: usize, width: usize, blocks: usize, final_time: f64) -> Self {
        Self {
            n_in,
            n_out,
            width,
            blocks,
            final_time,
            activation: Activation::Tanh,
            hypothesis: Hypothesis::Softmax,
            loss: LossKind::CrossEntropy,
            beta1: 0.0,
            beta2: 0.0,
            grid: TimeGrid::Intervals,
        }
    }

    /// Identity / least-squares network with tanh blocks and no regularization.
    pub fn regressor(n_in: usize, n_out: usize, width: usize, blocks: usize, final_time: f64) -> Self {
        Self {
            hypothesis: Hypothesis::Identity,
            loss: LossKind::LeastSquares,
            ..Self::classifier(n_in, n_out, width, blocks, final_time)
        }
    }

    pub fn with_regularization(mut self, beta1: f64, beta2: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self
    }

    pub fn with_blocks(&self, blocks: usize) -> Self {
        Self { blocks, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_in == 0 || self.n_out == 0 {
            return bad("input and output dimensions must be positive");
        }
        if self.width == 0 {
            return bad("width must be at least 1");
        }
        if self.blocks == 0 {
            return bad("at least one residual block is required");
        }
        if self.grid == TimeGrid::Nodes && self.blocks < 2 {
            return bad("node time grid needs at least two blocks");
        }
        if !(self.final_time.is_finite() && self.final_time > 0.0) {
            return bad("final time must be finite and positive");
        }
        match (self.hypothesis, self.loss) {
            (Hypothesis::Softmax, LossKind::CrossEntropy) | (Hypothesis::Identity, LossKind::LeastSquares) => {}
            _ => return bad("softmax pairs with cross-entropy, identity with least squares"),
        }
        if !(self.beta1 >= 0.0 && self.beta2 >= 0.0) {
            return bad("regularization weights must be non-negative");
        }
        let dt = self.dt();
        if !(dt.is_finite() && dt > 0.0) {
            return bad("time step must be finite and positive");
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        match self.grid {
            TimeGrid::Intervals => self.final_time / self.blocks as f64,
            TimeGrid::Nodes => self.final_time / (self.blocks as f64 - 1.0),
        }
    }

    pub fn layout(&self) -> Layout {
        Layout {
            n_in: self.n_in,
            n_out: self.n_out,
            width: self.width,
            blocks: self.blocks,
        }
    }

    pub fn num_params(&self) -> usize {
        self.layout().len()
    }
}

/// Offsets of each parameter segment inside the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub n_in: usize,
    pub n_out: usize,
    pub width: usize,
    pub blocks: usize,
}

impl Layout {
    pub fn input(&self) -> Range<usize> {
        0..self.width * self.n_in
    }

    pub fn block_len(&self) -> usize {
        self.width * self.width + self.width
    }

    pub fn block(&self, k: usize) -> Range<usize> {
        let start = self.width * self.n_in + k * self.block_len();
        start..start + self.block_len()
    }

    pub fn block_weight(&self, k: usize) -> Range<usize> {
        let r = self.block(k);
        r.start..r.start + self.width * self.width
    }

    pub fn block_bias(&self, k: usize) -> Range<usize> {
        let r = self.block(k);
        r.end - self.width..r.end
    }

    /// All block controls as one contiguous range.
    pub fn controls(&self) -> Range<usize> {
        self.block(0).start..self.block(0).start + self.blocks * self.block_len()
    }

    pub fn head_weight(&self) -> Range<usize> {
        let start = self.controls().end;
        start..start + self.n_out * self.width
    }

    pub fn head_bias(&self) -> Range<usize> {
        let start = self.head_weight().end;
        start..start + self.n_out
    }

    pub fn head(&self) -> Range<usize> {
        self.head_weight().start..self.head_bias().end
    }

    pub fn len(&self) -> usize {
        self.head_bias().end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Structured view of the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    /// Input lift `Q` (`width × n_in`).
    pub input: DMatrix<f64>,
    /// Per-block controls `(W_k, b_k)`.
    pub blocks: Vec<(DMatrix<f64>, DVector<f64>)>,
    pub head_weight: DMatrix<f64>,
    pub head_bias: DVector<f64>,
}

impl ParamVector {
    pub fn zeros(cfg: &NetworkConfig) -> Self {
        let w = cfg.width;
        Self {
            input: DMatrix::zeros(w, cfg.n_in),
            blocks: (0..cfg.blocks)
                .map(|_| (DMatrix::zeros(w, w), DVector::zeros(w)))
                .collect(),
            head_weight: DMatrix::zeros(cfg.n_out, w),
            head_bias: DVector::zeros(cfg.n_out),
        }
    }

    /// Seeded initialization: weights `N(0, 1/width)`, biases zero.
    pub fn random<R: Rng + ?Sized>(cfg: &NetworkConfig, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 1.0 / (cfg.width as f64).sqrt()).expect("valid std");
        let mut p = Self::zeros(cfg);
        p.input.iter_mut().for_each(|x| *x = normal.sample(rng));
        for (w, _) in p.blocks.iter_mut() {
            w.iter_mut().for_each(|x| *x = normal.sample(rng));
        }
        p.head_weight.iter_mut().for_each(|x| *x = normal.sample(rng));
        p
    }

    pub fn from_flat(cfg: &NetworkConfig, flat: &[f64]) -> Result<Self> {
        let lay = cfg.layout();
        check_len("parameter vector", lay.len(), flat.len())?;
        let w = cfg.width;
        Ok(Self {
            input: DMatrix::from_column_slice(w, cfg.n_in, &flat[lay.input()]),
            blocks: (0..cfg.blocks)
                .map(|k| {
                    (
                        DMatrix::from_column_slice(w, w, &flat[lay.block_weight(k)]),
                        DVector::from_column_slice(&flat[lay.block_bias(k)]),
                    )
                })
                .collect(),
            head_weight: DMatrix::from_column_slice(cfg.n_out, w, &flat[lay.head_weight()]),
            head_bias: DVector::from_column_slice(&flat[lay.head_bias()]),
        })
    }

    pub fn to_flat(&self) -> DVector<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(self.input.as_slice());
        for (w, b) in &self.blocks {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b.as_slice());
        }
        out.extend_from_slice(self.head_weight.as_slice());
        out.extend_from_slice(self.head_bias.as_slice());
        DVector::from_vec(out)
    }
}

/// A set of samples, stored one sample per column.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    features: DMatrix<f64>,
    targets: DMatrix<f64>,
    indices: Vec<usize>,
}

impl Batch {
    /// `features` is `n_in × n_b` and `targets` is `n_out × n_b`.
    pub fn new(features: DMatrix<f64>, targets: DMatrix<f64>, indices: Vec<usize>) -> Result<Self> {
        if features.ncols() == 0 {
            return Err(Error::Dataset("a batch needs at least one sample".into()));
        }
        check_len("batch targets", features.ncols(), targets.ncols())?;
        check_len("batch indices", features.ncols(), indices.len())?;
        Ok(Self {
            features,
            targets,
            indices,
        })
    }

    /// Builds a batch from row-major `n_b × n_in` features and `n_b × n_out` targets.
    pub fn from_rows(n_in: usize, n_out: usize, features: &[f64], targets: &[f64]) -> Result<Self> {
        let n = features.len() / n_in.max(1);
        check_len("feature buffer", n * n_in, features.len())?;
        check_len("target buffer", n * n_out, targets.len())?;
        Self::new(
            DMatrix::from_column_slice(n_in, n, features),
            DMatrix::from_column_slice(n_out, n, targets),
            (0..n).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.features.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn targets(&self) -> &DMatrix<f64> {
        &self.targets
    }

    /// Source indices into the parent dataset.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Gathers the listed columns, in order.
    pub fn select(&self, columns: &[usize]) -> Result<Self> {
        if let Some(&bad) = columns.iter().find(|&&c| c >= self.len()) {
            return Err(Error::Dataset(format!(
                "column {bad} out of range for a batch of {}",
                self.len()
            )));
        }
        Self::new(
            self.features.select_columns(columns.iter()),
            self.targets.select_columns(columns.iter()),
            columns.iter().map(|&c| self.indices[c]).collect(),
        )
    }

    /// Contiguous sub-batch of columns.
    pub fn slice(&self, range: Range<usize>) -> Result<Self> {
        let n = range.len();
        Self::new(
            self.features.columns(range.start, n).into_owned(),
            self.targets.columns(range.start, n).into_owned(),
            self.indices[range].to_vec(),
        )
    }
}

/// Stored forward pass.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// States `q_0 … q_K`, each `width × n_b`.
    pub states: Vec<DMatrix<f64>>,
    /// Block activations `σ(W_k q_k + b_k)`.
    pub activations: Vec<DMatrix<f64>>,
    pub logits: DMatrix<f64>,
    /// Hypothesis outputs, `n_out × n_b`.
    pub outputs: DMatrix<f64>,
}

/// Unnormalized data-term sums over a batch (no regularizer).
#[derive(Debug, Clone)]
pub struct DataSums {
    pub loss: f64,
    pub grad: DVector<f64>,
    pub samples: usize,
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Shape { what, expected, got });
    }
    Ok(())
}

fn check_inputs(cfg: &NetworkConfig, theta: &[f64], batch: &Batch) -> Result<()> {
    cfg.validate()?;
    check_len("parameter vector", cfg.num_params(), theta.len())?;
    check_len("batch features", cfg.n_in, batch.features.nrows())?;
    check_len("batch targets", cfg.n_out, batch.targets.nrows())?;
    Ok(())
}

fn view(theta: &[f64], range: Range<usize>, rows: usize, cols: usize) -> DMatrixView<'_, f64> {
    DMatrixView::from_slice(&theta[range], rows, cols)
}

fn view_mut(theta: &mut [f64], range: Range<usize>, rows: usize, cols: usize) -> DMatrixViewMut<'_, f64> {
    DMatrixViewMut::from_slice(&mut theta[range], rows, cols)
}

fn add_bias(m: &mut DMatrix<f64>, bias: DVectorView<'_, f64>) {
    for mut col in m.column_iter_mut() {
        col += &bias;
    }
}

fn activate(act: Activation, m: &mut DMatrix<f64>) {
    match act {
        Activation::Tanh => m.apply(|x| *x = x.tanh()),
        Activation::Relu => m.apply(|x| *x = x.max(0.0)),
    }
}

/// σ'(a) written in terms of h = σ(a).
fn slope(act: Activation, h: f64) -> f64 {
    match act {
        Activation::Tanh => 1.0 - h * h,
        Activation::Relu => {
            if h > 0.0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// σ''(a) written in terms of h = σ(a).
fn curvature(act: Activation, h: f64) -> f64 {
    match act {
        Activation::Tanh => -2.0 * h * (1.0 - h * h),
        Activation::Relu => 0.0,
    }
}

fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

fn row_sums_into(m: &DMatrix<f64>, out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o += m.row(i).iter().sum::<f64>();
    }
}

fn head_logits(cfg: &NetworkConfig, theta: &[f64], q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let lay = cfg.layout();
    let hw = view(theta, lay.head_weight(), cfg.n_out, cfg.width);
    let hb = DVectorView::from_slice(&theta[lay.head_bias()], cfg.n_out);
    let mut z = hw * q;
    add_bias(&mut z, hb);
    if !all_finite(&z) {
        return Err(Error::Diverged { block: cfg.blocks });
    }
    Ok(z)
}

fn block_step(cfg: &NetworkConfig, theta: &[f64], k: usize, q: &DMatrix<f64>) -> DMatrix<f64> {
    let lay = cfg.layout();
    let w = view(theta, lay.block_weight(k), cfg.width, cfg.width);
    let b = DVectorView::from_slice(&theta[lay.block_bias(k)], cfg.width);
    let mut h = w * q;
    add_bias(&mut h, b);
    activate(cfg.activation, &mut h);
    h
}

fn apply_hypothesis(hyp: Hypothesis, logits: &DMatrix<f64>) -> DMatrix<f64> {
    match hyp {
        Hypothesis::Identity => logits.clone(),
        Hypothesis::Softmax => {
            let mut y = logits.clone();
            for j in 0..y.ncols() {
                let lse = log_sum_exp(column(logits, j));
                y.column_mut(j).apply(|x| *x = (*x - lse).exp());
            }
            y
        }
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn column(m: &DMatrix<f64>, j: usize) -> &[f64] {
    let r = m.nrows();
    &m.as_slice()[j * r..(j + 1) * r]
}

/// Forward propagation retaining every state for backpropagation.
pub fn forward(cfg: &NetworkConfig, theta: &[f64], batch: &Batch) -> Result<Trajectory> {
    check_inputs(cfg, theta, batch)?;
    let lay = cfg.layout();
    let dt = cfg.dt();
    let lift = view(theta, lay.input(), cfg.width, cfg.n_in);
    let q0 = lift * &batch.features;
    if !all_finite(&q0) {
        return Err(Error::Diverged { block: 0 });
    }
    let mut states = Vec::with_capacity(cfg.blocks + 1);
    let mut activations = Vec::with_capacity(cfg.blocks);
    states.push(q0);
    for k in 0..cfg.blocks {
        let h = block_step(cfg, theta, k, &states[k]);
        let mut next = states[k].clone();
        next.zip_apply(&h, |q, hi| *q += dt * hi);
        if !all_finite(&next) {
            return Err(Error::Diverged { block: k });
        }
        activations.push(h);
        states.push(next);
    }
    let logits = head_logits(cfg, theta, &states[cfg.blocks])?;
    let outputs = apply_hypothesis(cfg.hypothesis, &logits);
    Ok(Trajectory {
        states,
        activations,
        logits,
        outputs,
    })
}

/// Final logits without storing intermediate states.
fn propagate(cfg: &NetworkConfig, theta: &[f64], batch: &Batch) -> Result<DMatrix<f64>> {
    check_inputs(cfg, theta, batch)?;
    let lay = cfg.layout();
    let dt = cfg.dt();
    let mut q = view(theta, lay.input(), cfg.width, cfg.n_in) * &batch.features;
    if !all_finite(&q) {
        return Err(Error::Diverged { block: 0 });
    }
    for k in 0..cfg.blocks {
        let h = block_step(cfg, theta, k, &q);
        q.zip_apply(&h, |qi, hi| *qi += dt * hi);
        if !all_finite(&q) {
            return Err(Error::Diverged { block: k });
        }
    }
    head_logits(cfg, theta, &q)
}

/// Per-sample loss summed over columns, and optionally `∂(sum)/∂z`.
fn data_loss(
    cfg: &NetworkConfig,
    logits: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    want_grad: bool,
) -> (f64, Option<DMatrix<f64>>) {
    let n = logits.ncols();
    let mut total = 0.0;
    let mut dz = want_grad.then(|| DMatrix::zeros(cfg.n_out, n));
    match cfg.loss {
        LossKind::LeastSquares => {
            for j in 0..n {
                let mut s = 0.0;
                for i in 0..cfg.n_out {
                    let r = logits[(i, j)] - targets[(i, j)];
                    s += r * r;
                    if let Some(d) = dz.as_mut() {
                        d[(i, j)] = 2.0 * r;
                    }
                }
                total += s;
            }
        }
        LossKind::CrossEntropy => {
            let floor = PROB_FLOOR.ln();
            for j in 0..n {
                let col = column(logits, j);
                let lse = log_sum_exp(col);
                let mut s = 0.0;
                let mut active_mass = 0.0;
                for i in 0..cfg.n_out {
                    let logp = col[i] - lse;
                    let c = targets[(i, j)];
                    if logp > floor {
                        s -= c * logp;
                        active_mass += c;
                    } else {
                        s -= c * floor;
                    }
                }
                total += s;
                if let Some(d) = dz.as_mut() {
                    for i in 0..cfg.n_out {
                        let logp = col[i] - lse;
                        let c = if logp > floor { targets[(i, j)] } else { 0.0 };
                        d[(i, j)] = logp.exp() * active_mass - c;
                    }
                }
            }
        }
    }
    (total, dz)
}

/// Tangent of `∂(sum)/∂z` in direction `dz_in`.
fn data_loss_tangent(
    cfg: &NetworkConfig,
    logits: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    dz_in: &DMatrix<f64>,
) -> DMatrix<f64> {
    match cfg.loss {
        LossKind::LeastSquares => dz_in * 2.0,
        LossKind::CrossEntropy => {
            let floor = PROB_FLOOR.ln();
            let mut out = DMatrix::zeros(cfg.n_out, logits.ncols());
            for j in 0..logits.ncols() {
                let col = column(logits, j);
                let lse = log_sum_exp(col);
                let mut active_mass = 0.0;
                let mut ydot = 0.0;
                for i in 0..cfg.n_out {
                    let logp = col[i] - lse;
                    if logp > floor {
                        active_mass += targets[(i, j)];
                    }
                    ydot += logp.exp() * dz_in[(i, j)];
                }
                for i in 0..cfg.n_out {
                    let y = (col[i] - lse).exp();
                    out[(i, j)] = active_mass * y * (dz_in[(i, j)] - ydot);
                }
            }
            out
        }
    }
}

/// Backpropagates `dz` (gradient of the data sum w.r.t. logits) into a flat gradient.
fn backward(cfg: &NetworkConfig, theta: &[f64], batch: &Batch, traj: &Trajectory, dz: &DMatrix<f64>) -> DVector<f64> {
    let lay = cfg.layout();
    let (w, k_blocks, dt) = (cfg.width, cfg.blocks, cfg.dt());
    let mut grad = DVector::zeros(lay.len());
    let g = grad.as_mut_slice();

    let q_last = &traj.states[k_blocks];
    view_mut(g, lay.head_weight(), cfg.n_out, w).copy_from(&(dz * q_last.transpose()));
    row_sums_into(dz, &mut g[lay.head_bias()]);
    let mut gq = view(theta, lay.head_weight(), cfg.n_out, w).transpose() * dz;

    for k in (0..k_blocks).rev() {
        let h = &traj.activations[k];
        let d = gq.zip_map(h, |gi, hi| dt * slope(cfg.activation, hi) * gi);
        view_mut(g, lay.block_weight(k), w, w).copy_from(&(&d * traj.states[k].transpose()));
        row_sums_into(&d, &mut g[lay.block_bias(k)]);
        gq.gemm(1.0, &view(theta, lay.block_weight(k), w, w).transpose(), &d, 1.0);
    }
    view_mut(g, lay.input(), w, cfg.n_in).copy_from(&(&gq * batch.features.transpose()));
    grad
}

/// Data-term loss and gradient summed (not averaged) over the batch.
pub fn data_sums(cfg: &NetworkConfig, theta: &[f64], batch: &Batch) -> Result<DataSums> {
    let traj = forward(cfg, theta, batch)?;
    let (loss, dz) = data_loss(cfg, &traj.logits, &batch.targets, true);
    let grad = backward(cfg, theta, batch, &traj, &dz.expect("gradient requested"));
    Ok(DataSums {
        loss,
        grad,
        samples: batch.len(),
    })
}

/// Data-term loss summed over the batch.
pub fn data_loss_sum(cfg: &NetworkConfig, theta: &[f64], batch: &Batch) -> Result<f64> {
    let logits = propagate(cfg, theta, batch)?;
    Ok(data_loss(cfg, &logits, &batch.targets, false).0)
}

/// Smoothness regularizer `(β1/2) Σ_{k≥1} ‖θ_k − θ_{k−1}‖² / (2Δt)`.
pub fn smoothness_term(cfg: &NetworkConfig, theta: &[f64]) -> f64 {
    let lay = cfg.layout();
    let scale = 0.5 * cfg.beta1 / (2.0 * cfg.dt());
    let mut total = 0.0;
    for k in 1..cfg.blocks {
        let (prev, cur) = (lay.block(k - 1), lay.block(k));
        let sq: f64 = theta[cur]
            .iter()
            .zip(&theta[prev])
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        total += scale * sq;
    }
    total
}

/// Head regularizer `(β2/2)(½‖W_K‖²_F + ½‖b_K‖²)`.
pub fn head_term(cfg: &NetworkConfig, theta: &[f64]) -> f64 {
    let lay = cfg.layout();
    let sq: f64 = theta[lay.head()].iter().map(|x| x * x).sum();
    0.5 * cfg.beta2 * 0.5 * sq
}

/// Adds `∇R(v) + ∇S(v)` into `out`. Both regularizers are quadratic, so this
/// is both the regularizer gradient at `v` and its Hessian applied to `v`.
pub fn add_regularizer_gradient(cfg: &NetworkConfig, v: &[f64], out: &mut [f64]) {
    let lay = cfg.layout();
    let c = cfg.beta1 / (2.0 * cfg.dt());
    if c != 0.0 {
        for k in 1..cfg.blocks {
            let (prev, cur) = (lay.block(k - 1), lay.block(k));
            for (ip, ic) in prev.zip(cur) {
                let d = c * (v[ic] - v[ip]);
                out[ic] += d;
                out[ip] -= d;
            }
        }
    }
    let h = 0.5 * cfg.beta2;
    if h != 0.0 {
        for i in lay.head() {
            out[i] += h * v[i];
        }
    }
}

/// Reduced loss `(1/n_b) Σ ℓ(y_s, c_s) + R + S`.
pub fn loss(cfg: &NetworkConfig, theta: &[f64], batch: &Batch) -> Result<f64> {
    let sum = data_loss_sum(cfg, theta, batch)?;
    Ok(combine_value(cfg, theta, sum, batch.len()))
}

pub(crate) fn combine_value(cfg: &NetworkConfig, theta: &[f64], data_sum: f64, n: usize) -> f64 {
    data_sum / n as f64 + smoothness_term(cfg, theta) + head_term(cfg, theta)
}

pub(crate) fn combine_gradient(
    cfg: &NetworkConfig,
    theta: &[f64],
    mut data_grad: DVector<f64>,
    n: usize,
) -> DVector<f64> {
    data_grad /= n as f64;
    add_regularizer_gradient(cfg, theta, data_grad.as_mut_slice());
    data_grad
}

pub fn loss_and_gradient(cfg: &NetworkConfig, theta: &[f64], batch: &Batch) -> Result<(f64, DVector<f64>)> {
    let sums = data_sums(cfg, theta, batch)?;
    let n = batch.len();
    Ok((
        combine_value(cfg, theta, sums.loss, n),
        combine_gradient(cfg, theta, sums.grad, n),
    ))
}

pub fn gradient(cfg: &NetworkConfig, theta: &[f64], batch: &Batch) -> Result<DVector<f64>> {
    Ok(loss_and_gradient(cfg, theta, batch)?.1)
}

/// Exact Hessian-vector product of the reduced loss (forward-over-reverse).
pub fn hvp(cfg: &NetworkConfig, theta: &[f64], batch: &Batch, v: &[f64]) -> Result<DVector<f64>> {
    check_len("direction", cfg.num_params(), v.len())?;
    let traj = forward(cfg, theta, batch)?;
    let lay = cfg.layout();
    let (w, k_blocks, dt, act) = (cfg.width, cfg.blocks, cfg.dt(), cfg.activation);
    let x = &batch.features;

    // Tangent forward sweep.
    let mut dq = view(v, lay.input(), w, cfg.n_in) * x;
    let mut dstates = Vec::with_capacity(k_blocks + 1);
    let mut dpre = Vec::with_capacity(k_blocks);
    for k in 0..k_blocks {
        let q = &traj.states[k];
        let mut da = view(v, lay.block_weight(k), w, w) * q;
        da.gemm(1.0, &view(theta, lay.block_weight(k), w, w), &dq, 1.0);
        add_bias(&mut da, DVectorView::from_slice(&v[lay.block_bias(k)], w));
        let dh = da.zip_map(&traj.activations[k], |d, h| slope(act, h) * d);
        let next = &dq + dh * dt;
        dstates.push(std::mem::replace(&mut dq, next));
        dpre.push(da);
    }
    dstates.push(dq);
    let q_last = &traj.states[k_blocks];
    let dq_last = &dstates[k_blocks];
    let mut dz = view(v, lay.head_weight(), cfg.n_out, w) * q_last;
    dz.gemm(1.0, &view(theta, lay.head_weight(), cfg.n_out, w), dq_last, 1.0);
    add_bias(&mut dz, DVectorView::from_slice(&v[lay.head_bias()], cfg.n_out));

    // Adjoint and its tangent.
    let (_, gz) = data_loss(cfg, &traj.logits, &batch.targets, true);
    let gz = gz.expect("gradient requested");
    let dgz = data_loss_tangent(cfg, &traj.logits, &batch.targets, &dz);

    let mut out = DVector::zeros(lay.len());
    let o = out.as_mut_slice();
    let head_w = view(theta, lay.head_weight(), cfg.n_out, w);
    let head_dw = view(v, lay.head_weight(), cfg.n_out, w);
    let mut hw = &dgz * q_last.transpose();
    hw.gemm(1.0, &gz, &dq_last.transpose(), 1.0);
    view_mut(o, lay.head_weight(), cfg.n_out, w).copy_from(&hw);
    row_sums_into(&dgz, &mut o[lay.head_bias()]);

    let mut gq = head_w.transpose() * &gz;
    let mut dgq = head_dw.transpose() * &gz;
    dgq.gemm(1.0, &head_w.transpose(), &dgz, 1.0);

    for k in (0..k_blocks).rev() {
        let h = &traj.activations[k];
        let q = &traj.states[k];
        let da = &dpre[k];
        let d = gq.zip_map(h, |g, hi| dt * slope(act, hi) * g);
        let mut dd = DMatrix::zeros(w, q.ncols());
        for ((((out, &g), &dg), &hi), &dai) in dd
            .iter_mut()
            .zip(gq.iter())
            .zip(dgq.iter())
            .zip(h.iter())
            .zip(da.iter())
        {
            *out = dt * (curvature(act, hi) * dai * g + slope(act, hi) * dg);
        }
        let mut bw = &dd * q.transpose();
        bw.gemm(1.0, &d, &dstates[k].transpose(), 1.0);
        view_mut(o, lay.block_weight(k), w, w).copy_from(&bw);
        row_sums_into(&dd, &mut o[lay.block_bias(k)]);

        let wk = view(theta, lay.block_weight(k), w, w);
        dgq.gemm(1.0, &view(v, lay.block_weight(k), w, w).transpose(), &d, 1.0);
        dgq.gemm(1.0, &wk.transpose(), &dd, 1.0);
        gq.gemm(1.0, &wk.transpose(), &d, 1.0);
    }
    view_mut(o, lay.input(), w, cfg.n_in).copy_from(&(&dgq * x.transpose()));

    out /= batch.len() as f64;
    add_regularizer_gradient(cfg, v, out.as_mut_slice());
    Ok(out)
}

/// Hypothesis outputs for a batch.
pub fn predict(cfg: &NetworkConfig, theta: &[f64], batch: &Batch) -> Result<DMatrix<f64>> {
    let logits = propagate(cfg, theta, batch)?;
    Ok(apply_hypothesis(cfg.hypothesis, &logits))
}

/// Fraction of samples whose arg-max output matches the arg-max target.
pub fn accuracy(cfg: &NetworkConfig, theta: &[f64], batch: &Batch) -> Result<f64> {
    let logits = propagate(cfg, theta, batch)?;
    Ok(hit_rate(&logits, &batch.targets))
}

/// Loss and accuracy from a single forward pass.
pub fn loss_and_accuracy(cfg: &NetworkConfig, theta: &[f64], batch: &Batch) -> Result<(f64, f64)> {
    let logits = propagate(cfg, theta, batch)?;
    let sum = data_loss(cfg, &logits, &batch.targets, false).0;
    Ok((
        combine_value(cfg, theta, sum, batch.len()),
        hit_rate(&logits, &batch.targets),
    ))
}

fn hit_rate(logits: &DMatrix<f64>, targets: &DMatrix<f64>) -> f64 {
    let hits = (0..logits.ncols())
        .filter(|&j| argmax(logits.column(j).iter()) == argmax(targets.column(j).iter()))
        .count();
    hits as f64 / logits.ncols() as f64
}

fn argmax<'a>(it: impl Iterator<Item = &'a f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &x) in it.enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_hot_batch(n_in: usize, n_out: usize, n: usize, rng: &mut ChaCha8Rng) -> Batch {
        let x: Vec<f64> = (0..n * n_in).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut c = vec![0.0; n * n_out];
        for j in 0..n {
            c[j * n_out + rng.random_range(0..n_out)] = 1.0;
        }
        Batch::from_rows(n_in, n_out, &x, &c).unwrap()
    }

    #[test]
    fn zero_params_give_uniform_softmax() {
        let cfg = NetworkConfig::classifier(3, 4, 5, 3, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = one_hot_batch(3, 4, 6, &mut rng);
        let theta = vec![0.0; cfg.num_params()];
        let traj = forward(&cfg, &theta, &batch).unwrap();
        for y in traj.outputs.iter() {
            assert!((y - 0.25).abs() < 1e-15);
        }
        let l = loss(&cfg, &theta, &batch).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn identity_composition() {
        let cfg = NetworkConfig::regressor(1, 1, 1, 1, 1.0);
        // Q = 1, W_0 = 0, b_0 = 0, W_K = 1, b_K = 0
        let theta = [1.0, 0.0, 0.0, 1.0, 0.0];
        let batch = Batch::from_rows(1, 1, &[0.7], &[0.0]).unwrap();
        let y = predict(&cfg, &theta, &batch).unwrap();
        assert_eq!(y[(0, 0)], 0.7);
    }

    #[test]
    fn flat_round_trip_is_exact() {
        let cfg = NetworkConfig::classifier(2, 3, 4, 5, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = ParamVector::random(&cfg, &mut rng);
        let flat = p.to_flat();
        assert_eq!(flat.len(), 4 * 2 + 5 * (16 + 4) + 3 * 4 + 3);
        assert_eq!(ParamVector::from_flat(&cfg, flat.as_slice()).unwrap(), p);
    }

    #[test]
    fn mismatched_hypothesis_is_rejected() {
        let mut cfg = NetworkConfig::classifier(2, 3, 4, 5, 2.0);
        cfg.loss = LossKind::LeastSquares;
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
        let cfg = NetworkConfig::classifier(2, 3, 4, 0, 2.0);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn divergence_names_the_block() {
        let mut cfg = NetworkConfig::regressor(1, 1, 1, 3, 3.0);
        cfg.activation = Activation::Relu;
        let lay = cfg.layout();
        let mut theta = vec![0.0; cfg.num_params()];
        theta[lay.input()][0] = 1.0;
        theta[lay.block_weight(1)][0] = f64::MAX;
        theta[lay.block_bias(1)][0] = f64::MAX;
        let batch = Batch::from_rows(1, 1, &[1.0], &[0.0]).unwrap();
        match forward(&cfg, &theta, &batch) {
            Err(Error::Diverged { block }) => assert_eq!(block, 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn residual_free_fit_has_zero_data_gradient() {
        let cfg = NetworkConfig::regressor(2, 2, 3, 2, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let theta = ParamVector::random(&cfg, &mut rng).to_flat();
        let x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let probe = Batch::from_rows(2, 2, &x, &[0.0; 8]).unwrap();
        let y = predict(&cfg, theta.as_slice(), &probe).unwrap();
        let batch = Batch::new(probe.features().clone(), y, vec![0, 1, 2, 3]).unwrap();
        let g = gradient(&cfg, theta.as_slice(), &batch).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn regularizer_gradients() {
        let cfg = NetworkConfig::classifier(2, 2, 2, 3, 1.0).with_regularization(0.3, 0.7);
        let lay = cfg.layout();
        let mut theta = vec![0.0; cfg.num_params()];
        for k in 0..cfg.blocks {
            for (i, x) in theta[lay.block(k)].iter_mut().enumerate() {
                *x = 0.1 * i as f64 - 0.2;
            }
        }
        for (i, x) in theta[lay.head()].iter_mut().enumerate() {
            *x = i as f64 + 1.0;
        }
        assert_eq!(smoothness_term(&cfg, &theta), 0.0);
        let mut g = vec![0.0; theta.len()];
        add_regularizer_gradient(&cfg, &theta, &mut g);
        assert!(g[lay.controls()].iter().all(|&v| v == 0.0));
        for i in lay.head() {
            assert_eq!(g[i], 0.5 * cfg.beta2 * theta[i]);
        }
    }

    #[test]
    fn hvp_of_zero_direction_is_zero() {
        let cfg = NetworkConfig::classifier(2, 3, 3, 2, 1.0).with_regularization(1e-2, 1e-2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let theta = ParamVector::random(&cfg, &mut rng).to_flat();
        let batch = one_hot_batch(2, 3, 5, &mut rng);
        let hv = hvp(&cfg, theta.as_slice(), &batch, &vec![0.0; theta.len()]).unwrap();
        assert!(hv.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn node_grid_time_step() {
        let mut cfg = NetworkConfig::classifier(2, 2, 2, 7, 1.0);
        cfg.grid = TimeGrid::Nodes;
        assert_eq!(cfg.dt(), 1.0 / 6.0);
    }
}
