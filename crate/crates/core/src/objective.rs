//! Objective functions seen by the trust-region solvers.

use std::cell::RefCell;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::ledger::Tally;
use crate::resnet::{self, Batch, DataSums, NetworkConfig};

/// Value, gradient and (when the objective defines a smaller sample set for
/// curvature pairs) the gradient restricted to that set.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    pub grad: DVector<f64>,
    pub secant_grad: Option<DVector<f64>>,
}

pub trait Objective {
    fn dim(&self) -> usize;

    fn value(&self, theta: &DVector<f64>) -> Result<f64>;

    fn evaluate(&self, theta: &DVector<f64>) -> Result<Evaluation>;

    /// Whether secant pairs use a strict subset of the objective's samples.
    fn has_secant_subset(&self) -> bool {
        false
    }

    /// Gradient on the secant sample set alone.
    fn secant_gradient(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        let e = self.evaluate(theta)?;
        Ok(e.secant_grad.unwrap_or(e.grad))
    }

    fn hvp(&self, theta: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>>;

    fn tally(&self) -> &Tally;
}

/// A point together with whatever has already been evaluated there.
#[derive(Debug, Clone)]
pub struct Iterate {
    pub theta: DVector<f64>,
    value: Option<f64>,
    grad: Option<DVector<f64>>,
    secant_grad: Option<DVector<f64>>,
}

impl Iterate {
    pub fn new(theta: DVector<f64>) -> Self {
        Self {
            theta,
            value: None,
            grad: None,
            secant_grad: None,
        }
    }

    pub fn with_value(theta: DVector<f64>, value: f64) -> Self {
        Self {
            value: Some(value),
            ..Self::new(theta)
        }
    }

    pub fn from_evaluation(theta: DVector<f64>, e: Evaluation) -> Self {
        Self {
            theta,
            value: Some(e.value),
            grad: Some(e.grad),
            secant_grad: e.secant_grad,
        }
    }

    pub fn known_value(&self) -> Option<f64> {
        self.value
    }

    pub fn known_grad(&self) -> Option<&DVector<f64>> {
        self.grad.as_ref()
    }

    /// Drops cached evaluations, e.g. when the objective changes.
    pub fn forget(&mut self) {
        self.value = None;
        self.grad = None;
        self.secant_grad = None;
    }

    pub fn into_theta(self) -> DVector<f64> {
        self.theta
    }

    pub fn value<O: Objective + ?Sized>(&mut self, obj: &O) -> Result<f64> {
        if let Some(v) = self.value {
            return Ok(v);
        }
        let v = obj.value(&self.theta)?;
        self.value = Some(v);
        Ok(v)
    }

    /// Ensures value and gradient are known. A value computed earlier is kept
    /// so that accepted trial values are never silently replaced.
    pub fn gradient<O: Objective + ?Sized>(&mut self, obj: &O) -> Result<&DVector<f64>> {
        if self.grad.is_none() {
            let e = obj.evaluate(&self.theta)?;
            self.value.get_or_insert(e.value);
            self.secant_grad = e.secant_grad;
            self.grad = Some(e.grad);
        }
        Ok(self.grad.as_ref().expect("gradient just computed"))
    }

    /// Gradient on the secant sample set, computing only that part if possible.
    pub fn secant_gradient<O: Objective + ?Sized>(&mut self, obj: &O) -> Result<DVector<f64>> {
        if let Some(g) = &self.secant_grad {
            return Ok(g.clone());
        }
        if !obj.has_secant_subset() {
            return Ok(self.gradient(obj)?.clone());
        }
        let g = obj.secant_gradient(&self.theta)?;
        self.secant_grad = Some(g.clone());
        Ok(g)
    }
}

/// `½ xᵀ A x − bᵀ x + c` with symmetric `A`.
#[derive(Debug)]
pub struct Quadratic {
    a: DMatrix<f64>,
    b: DVector<f64>,
    c: f64,
    tally: Tally,
}

impl Quadratic {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if !a.is_square() || a.nrows() != b.len() {
            return Err(Error::Shape {
                what: "quadratic",
                expected: a.nrows(),
                got: b.len(),
            });
        }
        let a = (&a + a.transpose()) * 0.5;
        Ok(Self {
            a,
            b,
            c: 0.0,
            tally: Tally::default(),
        })
    }

    pub fn with_constant(mut self, c: f64) -> Self {
        self.c = c;
        self
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn linear(&self) -> &DVector<f64> {
        &self.b
    }
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.b.len()
    }

    fn value(&self, x: &DVector<f64>) -> Result<f64> {
        self.tally.value(1);
        Ok(0.5 * x.dot(&(&self.a * x)) - self.b.dot(x) + self.c)
    }

    fn evaluate(&self, x: &DVector<f64>) -> Result<Evaluation> {
        self.tally.gradient(1);
        let ax = &self.a * x;
        Ok(Evaluation {
            value: 0.5 * x.dot(&ax) - self.b.dot(x) + self.c,
            grad: ax - &self.b,
            secant_grad: None,
        })
    }

    fn hvp(&self, _x: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.tally.hvp(1);
        Ok(&self.a * v)
    }

    fn tally(&self) -> &Tally {
        &self.tally
    }
}

#[derive(Debug, Default)]
struct SegmentCache {
    theta: Option<DVector<f64>>,
    sums: Vec<Option<DataSums>>,
}

/// Reduced ResNet loss bound to one batch.
///
/// The batch is split into up to three contiguous segments: a prefix shared
/// with the previous batch, the interior, and a suffix shared with the next
/// batch. Curvature pairs use the suffix. Per-segment data sums at the most
/// recent point are cached so that a suffix gradient computed for a secant
/// pair is reused by a later full gradient at the same point, and can seed
/// the next batch's prefix.
#[derive(Debug)]
pub struct BatchObjective {
    cfg: NetworkConfig,
    segments: Vec<Batch>,
    has_prefix: bool,
    suffix_start: Option<usize>,
    len: usize,
    cache: RefCell<SegmentCache>,
    tally: Tally,
}

impl BatchObjective {
    /// Whole batch; secant pairs use every sample.
    pub fn new(cfg: &NetworkConfig, batch: &Batch) -> Result<Self> {
        Self::with_overlap(cfg, batch, 0, 0)
    }

    /// Batch whose first `prefix` samples are shared with the previous batch
    /// and whose last `suffix` samples are shared with the next one.
    pub fn with_overlap(cfg: &NetworkConfig, batch: &Batch, prefix: usize, suffix: usize) -> Result<Self> {
        cfg.validate()?;
        let n = batch.len();
        if n == 0 {
            return Err(Error::Dataset("empty batch".into()));
        }
        if prefix + suffix > n {
            return Err(Error::Shape {
                what: "batch overlap",
                expected: n,
                got: prefix + suffix,
            });
        }
        let suffix = if suffix == n { 0 } else { suffix };
        let mut bounds = vec![0];
        if prefix > 0 {
            bounds.push(prefix);
        }
        if suffix > 0 && n - suffix > *bounds.last().unwrap() {
            bounds.push(n - suffix);
        }
        bounds.push(n);
        let bounds: Vec<usize> = {
            let mut b = bounds;
            b.dedup();
            b
        };
        let segments = bounds
            .windows(2)
            .map(|w| batch.slice(w[0]..w[1]))
            .collect::<Result<Vec<_>>>()?;
        let suffix_start = (suffix > 0).then(|| segments.len() - 1);
        Ok(Self {
            cfg: cfg.clone(),
            has_prefix: prefix > 0,
            suffix_start,
            len: n,
            cache: RefCell::new(SegmentCache {
                theta: None,
                sums: vec![None; segments.len()],
            }),
            segments,
            tally: Tally::default(),
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Installs prefix data sums evaluated at `theta` by the previous batch.
    pub fn seed_prefix(&self, theta: &DVector<f64>, sums: DataSums) {
        if !self.has_prefix || sums.samples != self.segments[0].len() {
            return;
        }
        let mut cache = self.cache.borrow_mut();
        if cache.theta.as_ref() != Some(theta) {
            cache.theta = Some(theta.clone());
            cache.sums.iter_mut().for_each(|s| *s = None);
        }
        cache.sums[0] = Some(sums);
    }

    /// Suffix data sums at `theta`, if they were evaluated there.
    pub fn cached_suffix(&self, theta: &DVector<f64>) -> Option<DataSums> {
        let i = self.suffix_start?;
        let cache = self.cache.borrow();
        if cache.theta.as_ref() != Some(theta) {
            return None;
        }
        cache.sums[i].clone()
    }

    fn segment_sums(&self, theta: &DVector<f64>, range: std::ops::Range<usize>) -> Result<Vec<DataSums>> {
        let mut cache = self.cache.borrow_mut();
        if cache.theta.as_ref() != Some(theta) {
            cache.theta = Some(theta.clone());
            cache.sums.iter_mut().for_each(|s| *s = None);
        }
        let mut computed = 0;
        let mut out = Vec::with_capacity(range.len());
        for i in range {
            let sums = match &cache.sums[i] {
                Some(s) => s.clone(),
                None => {
                    let s = resnet::data_sums(&self.cfg, theta.as_slice(), &self.segments[i])?;
                    computed += s.samples;
                    cache.sums[i] = Some(s.clone());
                    s
                }
            };
            out.push(sums);
        }
        if computed > 0 {
            self.tally.gradient(computed);
        }
        Ok(out)
    }

    fn reduce(&self, theta: &DVector<f64>, parts: &[DataSums]) -> (f64, DVector<f64>, usize) {
        let mut loss = 0.0;
        let mut grad = DVector::zeros(self.cfg.num_params());
        let mut n = 0;
        for p in parts {
            loss += p.loss;
            grad += &p.grad;
            n += p.samples;
        }
        let value = resnet::combine_value(&self.cfg, theta.as_slice(), loss, n);
        (value, resnet::combine_gradient(&self.cfg, theta.as_slice(), grad, n), n)
    }
}

impl Objective for BatchObjective {
    fn dim(&self) -> usize {
        self.cfg.num_params()
    }

    fn value(&self, theta: &DVector<f64>) -> Result<f64> {
        let mut loss = 0.0;
        {
            let cache = self.cache.borrow();
            let hit = cache.theta.as_ref() == Some(theta);
            let mut computed = 0;
            for (i, seg) in self.segments.iter().enumerate() {
                loss += match (&cache.sums[i], hit) {
                    (Some(s), true) => s.loss,
                    _ => {
                        computed += seg.len();
                        resnet::data_loss_sum(&self.cfg, theta.as_slice(), seg)?
                    }
                };
            }
            if computed > 0 {
                self.tally.value(computed);
            }
        }
        Ok(resnet::combine_value(&self.cfg, theta.as_slice(), loss, self.len))
    }

    fn evaluate(&self, theta: &DVector<f64>) -> Result<Evaluation> {
        let parts = self.segment_sums(theta, 0..self.segments.len())?;
        let (value, grad, _) = self.reduce(theta, &parts);
        let secant_grad = self.suffix_start.map(|i| self.reduce(theta, &parts[i..]).1);
        Ok(Evaluation {
            value,
            grad,
            secant_grad,
        })
    }

    fn has_secant_subset(&self) -> bool {
        self.suffix_start.is_some()
    }

    fn secant_gradient(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        let start = self.suffix_start.unwrap_or(0);
        let parts = self.segment_sums(theta, start..self.segments.len())?;
        Ok(self.reduce(theta, &parts).1)
    }

    fn hvp(&self, theta: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        // Per-segment products are averaged with sample weights.
        let mut out = DVector::zeros(self.dim());
        let plain = self.cfg.clone().with_regularization(0.0, 0.0);
        for seg in &self.segments {
            let hv = resnet::hvp(&plain, theta.as_slice(), seg, v.as_slice())?;
            out.axpy(seg.len() as f64 / self.len as f64, &hv, 1.0);
        }
        resnet::add_regularizer_gradient(&self.cfg, v.as_slice(), out.as_mut_slice());
        self.tally.hvp(self.len);
        Ok(out)
    }

    fn tally(&self) -> &Tally {
        &self.tally
    }
}
