//! Single-level trust-region machinery: radius control, Cauchy point,
//! compact L-SR1 memory and its orthonormal-basis subproblem solver.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{Iterate, Objective};

/// Radius-control constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrConstants {
    pub eta1: f64,
    pub eta2: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub delta_max: f64,
}

impl Default for TrConstants {
    fn default() -> Self {
        Self {
            eta1: 0.1,
            eta2: 0.75,
            gamma1: 0.5,
            gamma2: 2.0,
            delta_max: 100.0,
        }
    }
}

impl TrConstants {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.eta1 && self.eta1 <= self.eta2 && self.eta2 < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < eta1 <= eta2 < 1, got eta1={}, eta2={}",
                self.eta1, self.eta2
            )));
        }
        if !(0.0 < self.gamma1 && self.gamma1 < 1.0 && 1.0 < self.gamma2) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < gamma1 < 1 < gamma2, got gamma1={}, gamma2={}",
                self.gamma1, self.gamma2
            )));
        }
        if !(self.delta_max > 0.0 && self.delta_max.is_finite()) {
            return Err(Error::InvalidConfig("delta_max must be positive and finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrustRegionState {
    pub delta: f64,
    pub constants: TrConstants,
}

impl TrustRegionState {
    pub fn new(delta: f64, constants: TrConstants) -> Result<Self> {
        constants.validate()?;
        if !(delta > 0.0 && delta <= constants.delta_max) {
            return Err(Error::InvalidConfig(format!(
                "initial radius {delta} must lie in (0, {}]",
                constants.delta_max
            )));
        }
        Ok(Self { delta, constants })
    }

    /// Radius after observing ratio `rho`.
    pub fn updated_radius(&self, rho: f64) -> f64 {
        let c = &self.constants;
        let next = if rho < c.eta1 {
            c.gamma1 * self.delta
        } else if rho <= c.eta2 {
            self.delta
        } else {
            c.gamma2 * self.delta
        };
        next.min(c.delta_max)
    }

    /// Applies the radius rule and reports whether the step is accepted.
    pub fn control(&mut self, rho: f64) -> bool {
        self.delta = self.updated_radius(rho);
        rho > self.constants.eta1
    }
}

/// Accepts `theta + s` iff `rho > eta1` and adjusts the radius.
pub fn conv_control(
    rho: f64,
    theta: &DVector<f64>,
    s: &DVector<f64>,
    state: &TrustRegionState,
) -> (DVector<f64>, TrustRegionState) {
    let mut next = *state;
    let theta = if next.control(rho) { theta + s } else { theta.clone() };
    (theta, next)
}

/// Symmetric model Hessian seen through its action on vectors.
pub trait HessianApprox {
    fn apply(&self, v: &DVector<f64>) -> DVector<f64>;
}

/// The first-order model `B = 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroHessian;

impl HessianApprox for ZeroHessian {
    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(v.len())
    }
}

impl HessianApprox for DMatrix<f64> {
    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        self * v
    }
}

/// `m(0) − m(s) = −gᵀs − ½ sᵀBs`.
pub fn model_decrease(g: &DVector<f64>, b: &(impl HessianApprox + ?Sized), s: &DVector<f64>) -> f64 {
    -(g.dot(s) + 0.5 * s.dot(&b.apply(s)))
}

/// Minimizer of the model along `−g` inside the ball of radius `delta`.
pub fn cauchy_point(g: &DVector<f64>, b: &(impl HessianApprox + ?Sized), delta: f64) -> DVector<f64> {
    let gnorm = g.norm();
    if gnorm == 0.0 {
        return DVector::zeros(g.len());
    }
    let t_max = delta / gnorm;
    let curv = g.dot(&b.apply(g));
    let t = if curv <= 0.0 {
        t_max
    } else {
        (gnorm * gnorm / curv).min(t_max)
    };
    g * -t
}

/// Safeguards of the L-SR1 memory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SecantSettings {
    /// Relative SR1 skip threshold `r`.
    pub skip_tol: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    /// Pairs are dropped (oldest first) while the middle matrix has relative
    /// conditioning below this value.
    pub cond_tol: f64,
}

impl Default for SecantSettings {
    fn default() -> Self {
        Self {
            skip_tol: 1e-8,
            gamma_min: 1e-6,
            gamma_max: 1e6,
            cond_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateOutcome {
    Stored { evicted: usize },
    Skipped,
}

/// Eigen-structure of `B − γI = P Λ̂ Pᵀ` with orthonormal `P`.
#[derive(Debug, Clone)]
struct Spectral {
    p: DMatrix<f64>,
    lambda: DVector<f64>,
}

/// Bounded store of secant pairs with the compact L-SR1 factors
/// `B = γI + Ψ N⁻¹ Ψᵀ`, `Ψ = Z − γS`, `N = D + L + Lᵀ − γ SᵀS`.
#[derive(Debug, Clone)]
pub struct SecantMemory {
    dim: usize,
    capacity: usize,
    pairs: VecDeque<(DVector<f64>, DVector<f64>)>,
    gamma: f64,
    settings: SecantSettings,
    spectral: Option<Spectral>,
}

impl SecantMemory {
    pub fn new(dim: usize, capacity: usize) -> Self {
        Self::with_settings(dim, capacity, SecantSettings::default())
    }

    pub fn with_settings(dim: usize, capacity: usize, settings: SecantSettings) -> Self {
        Self {
            dim,
            capacity: capacity.max(1),
            pairs: VecDeque::new(),
            gamma: 1.0,
            settings,
            spectral: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn settings(&self) -> &SecantSettings {
        &self.settings
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&DVector<f64>, &DVector<f64>)> {
        self.pairs.iter().map(|(s, z)| (s, z))
    }

    pub fn clear(&mut self) {
        self.pairs.clear();
        self.gamma = 1.0;
        self.spectral = None;
    }

    pub fn set_capacity(&mut self, capacity: usize) {
        self.capacity = capacity.max(1);
        if self.pairs.len() > self.capacity {
            while self.pairs.len() > self.capacity {
                self.pairs.pop_front();
            }
            self.rebuild();
        }
    }

    /// SR1 update with the skip test `|sᵀ(z − Bs)| ≥ r‖s‖‖z − Bs‖`.
    pub fn update(&mut self, s: DVector<f64>, z: DVector<f64>) -> UpdateOutcome {
        assert_eq!(s.len(), self.dim, "secant pair dimension");
        let snorm = s.norm();
        if snorm == 0.0 || !snorm.is_finite() || !z.iter().all(|v| v.is_finite()) {
            return UpdateOutcome::Skipped;
        }
        let r = &z - self.apply(&s);
        let den = s.dot(&r);
        if den == 0.0 || den.abs() < self.settings.skip_tol * snorm * r.norm() {
            return UpdateOutcome::Skipped;
        }
        self.pairs.push_back((s, z));
        let mut evicted = 0;
        while self.pairs.len() > self.capacity {
            self.pairs.pop_front();
            evicted += 1;
        }
        evicted += self.rebuild();
        if self.pairs.is_empty() {
            UpdateOutcome::Skipped
        } else {
            UpdateOutcome::Stored { evicted }
        }
    }

    /// Recomputes γ and the spectral factors; returns how many pairs had to
    /// be dropped to keep the middle matrix invertible.
    fn rebuild(&mut self) -> usize {
        let mut dropped = 0;
        loop {
            if self.pairs.is_empty() {
                self.gamma = 1.0;
                self.spectral = None;
                return dropped;
            }
            let (s, z) = self.matrices();
            self.gamma = gamma_from_pairs(&s, &z, &self.settings);
            match compact_spectral(&s, &z, self.gamma, self.settings.cond_tol) {
                Some(sp) => {
                    self.spectral = Some(sp);
                    return dropped;
                }
                None => {
                    self.pairs.pop_front();
                    dropped += 1;
                }
            }
        }
    }

    fn matrices(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let m = self.pairs.len();
        let s = DMatrix::from_fn(self.dim, m, |i, j| self.pairs[j].0[i]);
        let z = DMatrix::from_fn(self.dim, m, |i, j| self.pairs[j].1[i]);
        (s, z)
    }

    /// Eigenvalues of `B` on the span of the memory, ascending.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut v: Vec<f64> = match &self.spectral {
            Some(sp) => sp.lambda.iter().map(|l| l + self.gamma).collect(),
            None => Vec::new(),
        };
        v.sort_by(f64::total_cmp);
        v
    }

    /// Dense `B`; intended for small dimensions and tests.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut b = DMatrix::identity(self.dim, self.dim) * self.gamma;
        if let Some(sp) = &self.spectral {
            b += &sp.p * DMatrix::from_diagonal(&sp.lambda) * sp.p.transpose();
        }
        b
    }
}

impl HessianApprox for SecantMemory {
    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = v * self.gamma;
        if let Some(sp) = &self.spectral {
            let coeff = sp.p.tr_mul(v).component_mul(&sp.lambda);
            out.gemv(1.0, &sp.p, &coeff, 1.0);
        }
        out
    }
}

fn middle_gram(s: &DMatrix<f64>, z: &DMatrix<f64>) -> DMatrix<f64> {
    let sz = s.tr_mul(z);
    let m = sz.nrows();
    DMatrix::from_fn(m, m, |i, j| if i >= j { sz[(i, j)] } else { sz[(j, i)] })
}

/// Smallest eigenvalue of the pencil `(D + L + Lᵀ, SᵀS)`, or `None` when
/// `SᵀS` is not positive definite.
pub fn pencil_min_eigenvalue(s: &DMatrix<f64>, z: &DMatrix<f64>) -> Option<f64> {
    let a = middle_gram(s, z);
    let chol = s.tr_mul(s).cholesky()?;
    let l = chol.l();
    let linv_a = l.solve_lower_triangular(&a)?;
    let c = l.solve_lower_triangular(&linv_a.transpose())?;
    let c = (&c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::new(c);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    min.is_finite().then_some(min)
}

/// `max(zᵀz / sᵀz, γ_min)` for the newest pair.
pub fn fallback_gamma(s: &DVector<f64>, z: &DVector<f64>, gamma_min: f64) -> f64 {
    let sz = s.dot(z);
    let ratio = z.dot(z) / sz;
    if sz > 0.0 && ratio.is_finite() {
        ratio.max(gamma_min)
    } else {
        gamma_min
    }
}

fn gamma_from_pairs(s: &DMatrix<f64>, z: &DMatrix<f64>, set: &SecantSettings) -> f64 {
    let raw = match pencil_min_eigenvalue(s, z) {
        Some(l) if l > 0.0 => 0.9 * l,
        _ => {
            let last = s.ncols() - 1;
            fallback_gamma(
                &s.column(last).into_owned(),
                &z.column(last).into_owned(),
                set.gamma_min,
            )
        }
    };
    raw.clamp(set.gamma_min, set.gamma_max)
}

/// Initial scaling `γ` for the memory's current pairs (1 when empty).
pub fn init_gamma(mem: &SecantMemory) -> f64 {
    if mem.is_empty() {
        return 1.0;
    }
    let (s, z) = mem.matrices();
    gamma_from_pairs(&s, &z, &mem.settings)
}

fn compact_spectral(s: &DMatrix<f64>, z: &DMatrix<f64>, gamma: f64, cond_tol: f64) -> Option<Spectral> {
    let psi = z - s * gamma;
    let n_mid = middle_gram(s, z) - s.tr_mul(s) * gamma;
    let eig = SymmetricEigen::new(n_mid);
    let max_abs = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let min_abs = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &b| a.min(b.abs()));
    if !(max_abs > 0.0 && max_abs.is_finite()) || min_abs <= cond_tol * max_abs {
        return None;
    }
    let inv_diag = eig.eigenvalues.map(|l| 1.0 / l);
    let n_inv = &eig.eigenvectors * DMatrix::from_diagonal(&inv_diag) * eig.eigenvectors.transpose();
    let qr = psi.qr();
    let (q, r) = (qr.q(), qr.r());
    let small = &r * n_inv * r.transpose();
    let small = (&small + small.transpose()) * 0.5;
    let se = SymmetricEigen::new(small);
    if !se.eigenvalues.iter().all(|l| l.is_finite()) {
        return None;
    }
    Some(Spectral {
        p: q * se.eigenvectors,
        lambda: se.eigenvalues,
    })
}

/// Exact solution of the L-SR1 trust-region subproblem.
#[derive(Debug, Clone)]
pub struct ObsStep {
    pub step: DVector<f64>,
    pub sigma: f64,
    pub hard_case: bool,
}

/// Orthonormal-basis solve of `min gᵀs + ½ sᵀBs` subject to `‖s‖ ≤ delta`.
pub fn obs_solve(g: &DVector<f64>, mem: &SecantMemory, delta: f64) -> ObsStep {
    let n = g.len();
    let gamma = mem.gamma;
    let (p, lam) = match &mem.spectral {
        Some(sp) => (sp.p.clone(), sp.lambda.map(|l| l + gamma)),
        None => (DMatrix::zeros(n, 0), DVector::zeros(0)),
    };
    let k = lam.len();
    let complement = p.ncols() < n;
    let gpar = p.tr_mul(g);
    let gperp = if complement { g - &p * &gpar } else { DVector::zeros(n) };
    let gperp_norm = gperp.norm();

    let mut lam_min = lam.iter().copied().fold(f64::INFINITY, f64::min);
    if complement {
        lam_min = lam_min.min(gamma);
    }

    let norm_at = |sigma: f64, skip: &dyn Fn(usize) -> bool, skip_perp: bool| -> f64 {
        let mut sq = 0.0;
        for i in 0..k {
            if !skip(i) {
                sq += (gpar[i] / (lam[i] + sigma)).powi(2);
            }
        }
        if complement && !skip_perp {
            sq += (gperp_norm / (gamma + sigma)).powi(2);
        }
        sq.sqrt()
    };
    let step_at = |sigma: f64, skip: &dyn Fn(usize) -> bool, skip_perp: bool| -> DVector<f64> {
        let coeff = DVector::from_fn(k, |i, _| if skip(i) { 0.0 } else { -gpar[i] / (lam[i] + sigma) });
        let mut s = &p * coeff;
        if complement && !skip_perp {
            s.axpy(-1.0 / (gamma + sigma), &gperp, 1.0);
        }
        s
    };
    let keep_all = |_: usize| false;

    if lam_min > 0.0 && norm_at(0.0, &keep_all, false) <= delta {
        return ObsStep {
            step: step_at(0.0, &keep_all, false),
            sigma: 0.0,
            hard_case: false,
        };
    }

    let sigma_lo = (-lam_min).max(0.0);
    if lam_min <= 0.0 {
        let eig_tol = 1e-12 * (1.0 + lam_min.abs());
        let g_tol = 1e-10 * g.norm().max(f64::MIN_POSITIVE);
        let in_min = |i: usize| lam[i] - lam_min <= eig_tol;
        let perp_in_min = complement && gamma - lam_min <= eig_tol;
        let negligible =
            (0..k).filter(|&i| in_min(i)).all(|i| gpar[i].abs() <= g_tol) && (!perp_in_min || gperp_norm <= g_tol);
        if negligible {
            let base_norm = norm_at(sigma_lo, &in_min, perp_in_min);
            if base_norm <= delta {
                let mut s = step_at(sigma_lo, &in_min, perp_in_min);
                let u = match (0..k).find(|&i| in_min(i)) {
                    Some(i) => p.column(i).into_owned(),
                    None => complement_direction(&p),
                };
                let tau = (delta * delta - base_norm * base_norm).max(0.0).sqrt();
                s.axpy(tau, &u, 1.0);
                return ObsStep {
                    step: s,
                    sigma: sigma_lo,
                    hard_case: true,
                };
            }
        }
    }

    // Safeguarded Newton on φ(σ) = 1/‖s(σ)‖ − 1/Δ over (σ_lo, σ_hi].
    let gnorm = g.norm();
    let mut lo = sigma_lo;
    let mut hi = (gnorm / delta - lam_min).max(sigma_lo);
    if norm_at(hi, &keep_all, false) > delta {
        hi = hi * 2.0 + 1.0;
    }
    let deriv_sum = |sigma: f64| -> f64 {
        let mut d = 0.0;
        for i in 0..k {
            d += gpar[i] * gpar[i] / (lam[i] + sigma).powi(3);
        }
        if complement {
            d += gperp_norm * gperp_norm / (gamma + sigma).powi(3);
        }
        d
    };
    let mut sigma = hi;
    let mut converged = false;
    for _ in 0..300 {
        let ns = norm_at(sigma, &keep_all, false);
        if (ns - delta).abs() <= 1e-13 * delta {
            converged = true;
            break;
        }
        if ns > delta {
            lo = sigma;
        } else {
            hi = sigma;
        }
        let phi = 1.0 / ns - 1.0 / delta;
        let dphi = deriv_sum(sigma) / ns.powi(3);
        let newton = sigma - phi / dphi;
        sigma = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo <= 4.0 * f64::EPSILON * hi.max(1.0) {
            sigma = hi;
            break;
        }
    }
    if !converged && norm_at(sigma, &keep_all, false) > delta {
        sigma = hi;
    }
    ObsStep {
        step: step_at(sigma, &keep_all, false),
        sigma,
        hard_case: false,
    }
}

/// Unit vector orthogonal to the columns of `p`.
fn complement_direction(p: &DMatrix<f64>) -> DVector<f64> {
    let n = p.nrows();
    let j = (0..n)
        .min_by(|&a, &b| p.row(a).norm_squared().total_cmp(&p.row(b).norm_squared()))
        .unwrap_or(0);
    let mut e = DVector::zeros(n);
    e[j] = 1.0;
    let proj = &p.tr_mul(&e);
    let u = e - p * proj;
    let norm = u.norm();
    u / norm
}

/// Source of the model Hessian used by the trust-region iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianMode {
    /// First-order model; steps are Cauchy points.
    #[serde(alias = "cp")]
    CauchyPoint,
    /// L-SR1 with pairs from successive iterates (gradient differences on the secant sample set).
    #[serde(alias = "lsr1o")]
    Lsr1Overlap,
    /// L-SR1 with pairs from uniformly sampled directions and exact Hessian products.
    #[serde(alias = "lsr1s")]
    Lsr1Sampled,
}

impl HessianMode {
    pub fn label(self) -> &'static str {
        match self {
            HessianMode::CauchyPoint => "CP",
            HessianMode::Lsr1Overlap => "L-SR1o",
            HessianMode::Lsr1Sampled => "L-SR1s",
        }
    }
}

/// What a run of trust-region iterations did.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrOutcome {
    pub iterations: usize,
    pub accepted: usize,
    /// Sum of actual reductions over accepted steps.
    pub reduction: f64,
    pub grad_calls: u64,
    pub last_rho: f64,
}

/// Relative guard below which a predicted decrease counts as zero.
pub const DECREASE_GUARD: f64 = 1e-15;

/// Ratio of actual to predicted decrease, `−∞` when the prediction is not positive.
pub fn trust_ratio(actual: f64, predicted: f64, reference: f64) -> f64 {
    if !(predicted > DECREASE_GUARD * (1.0 + reference.abs())) || !actual.is_finite() {
        f64::NEG_INFINITY
    } else {
        actual / predicted
    }
}

/// Samples fresh curvature pairs `(s, ∇²H s)` with `s ~ U(0,1)^n`.
pub fn sample_pairs<O: Objective + ?Sized, R: Rng + ?Sized>(
    obj: &O,
    theta: &DVector<f64>,
    count: usize,
    rng: &mut R,
) -> Result<Vec<(DVector<f64>, DVector<f64>)>> {
    (0..count)
        .map(|_| {
            let s = DVector::from_fn(theta.len(), |_, _| rng.random::<f64>());
            let z = obj.hvp(theta, &s)?;
            Ok((s, z))
        })
        .collect()
}

/// Performs `mu` trust-region iterations on `obj` starting from `it`.
pub fn tr_iterate<O: Objective + ?Sized, R: Rng + ?Sized>(
    obj: &O,
    it: &mut Iterate,
    state: &mut TrustRegionState,
    mem: &mut SecantMemory,
    mu: usize,
    mode: HessianMode,
    rng: &mut R,
) -> Result<TrOutcome> {
    let calls_before = obj.tally().get().grad_calls;
    let mut out = TrOutcome {
        last_rho: f64::NAN,
        ..TrOutcome::default()
    };
    let mut pending: Option<(DVector<f64>, DVector<f64>)> = None;
    for _ in 0..mu {
        let h0 = it.value(obj)?;
        let g = it.gradient(obj)?.clone();
        if let Some((s, old)) = pending.take() {
            let z = it.secant_gradient(obj)? - old;
            mem.update(s, z);
        }
        if mode == HessianMode::Lsr1Sampled {
            mem.clear();
            for (s, z) in sample_pairs(obj, &it.theta, mem.capacity(), rng)? {
                mem.update(s, z);
            }
        }
        let (step, predicted) = match mode {
            HessianMode::CauchyPoint => {
                let s = cauchy_point(&g, &ZeroHessian, state.delta);
                let p = model_decrease(&g, &ZeroHessian, &s);
                (s, p)
            }
            _ => {
                let s = obs_solve(&g, mem, state.delta).step;
                let p = model_decrease(&g, mem, &s);
                (s, p)
            }
        };
        let trial = &it.theta + &step;
        let mut trial_value = f64::NAN;
        let rho = if predicted > DECREASE_GUARD * (1.0 + h0.abs()) {
            match obj.value(&trial) {
                Ok(v) => {
                    trial_value = v;
                    trust_ratio(h0 - v, predicted, h0)
                }
                Err(Error::Diverged { .. }) => f64::NEG_INFINITY,
                Err(e) => return Err(e),
            }
        } else {
            f64::NEG_INFINITY
        };
        out.iterations += 1;
        out.last_rho = rho;
        if state.control(rho) {
            if mode == HessianMode::Lsr1Overlap {
                pending = Some((step, it.secant_gradient(obj)?));
            }
            out.accepted += 1;
            out.reduction += h0 - trial_value;
            *it = Iterate::with_value(trial, trial_value);
        }
    }
    if let Some((s, old)) = pending {
        let z = it.secant_gradient(obj)? - old;
        mem.update(s, z);
    }
    out.grad_calls = obj.tally().get().grad_calls - calls_before;
    Ok(out)
}
