//! Recursive multilevel trust-region cycles.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::Hierarchy;
use crate::ledger::Tally;
use crate::objective::{Evaluation, Iterate, Objective};
use crate::tr::{tr_iterate, trust_ratio, HessianMode, SecantMemory, TrustRegionState};

/// Largest relative first-order coherence error tolerated in assert mode.
pub const COHERENCE_TOL: f64 = 1e-12;

/// Moves vectors between adjacent levels (1 = coarsest).
pub trait LevelTransfer {
    /// Level `from` to level `from + 1`.
    fn prolong(&self, v: &DVector<f64>, from: usize) -> Result<DVector<f64>>;
    /// Level `from` to level `from − 1`, adjoint of `prolong`.
    fn restrict_gradient(&self, v: &DVector<f64>, from: usize) -> Result<DVector<f64>>;
    /// Level `from` to level `from − 1`, left inverse of `prolong`.
    fn restrict_params(&self, v: &DVector<f64>, from: usize) -> Result<DVector<f64>>;
}

impl LevelTransfer for Hierarchy {
    fn prolong(&self, v: &DVector<f64>, from: usize) -> Result<DVector<f64>> {
        Hierarchy::prolong(self, v, from, from + 1)
    }

    fn restrict_gradient(&self, v: &DVector<f64>, from: usize) -> Result<DVector<f64>> {
        Hierarchy::restrict_gradient(self, v, from, from - 1)
    }

    fn restrict_params(&self, v: &DVector<f64>, from: usize) -> Result<DVector<f64>> {
        Hierarchy::restrict_params(self, v, from, from - 1)
    }
}

/// `H(θ) = L(θ) + ⟨δg, θ − θ₀⟩`.
pub struct CoarseObjective<'a> {
    inner: &'a dyn Objective,
    anchor: DVector<f64>,
    delta_g: DVector<f64>,
}

impl<'a> CoarseObjective<'a> {
    pub fn new(inner: &'a dyn Objective, anchor: DVector<f64>, delta_g: DVector<f64>) -> Result<Self> {
        if anchor.len() != inner.dim() || delta_g.len() != inner.dim() {
            return Err(Error::Shape {
                what: "coarse objective",
                expected: inner.dim(),
                got: anchor.len().max(delta_g.len()),
            });
        }
        Ok(Self { inner, anchor, delta_g })
    }

    pub fn anchor(&self) -> &DVector<f64> {
        &self.anchor
    }

    pub fn delta_g(&self) -> &DVector<f64> {
        &self.delta_g
    }

    fn shift(&self, theta: &DVector<f64>) -> f64 {
        self.delta_g.dot(&(theta - &self.anchor))
    }

    /// Lifts an evaluation of the inner objective at `theta`.
    pub fn lift(&self, theta: &DVector<f64>, e: Evaluation) -> Evaluation {
        Evaluation {
            value: e.value + self.shift(theta),
            grad: e.grad + &self.delta_g,
            secant_grad: e.secant_grad.map(|g| g + &self.delta_g),
        }
    }
}

impl Objective for CoarseObjective<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn value(&self, theta: &DVector<f64>) -> Result<f64> {
        Ok(self.inner.value(theta)? + self.shift(theta))
    }

    fn evaluate(&self, theta: &DVector<f64>) -> Result<Evaluation> {
        let e = self.inner.evaluate(theta)?;
        Ok(self.lift(theta, e))
    }

    fn has_secant_subset(&self) -> bool {
        self.inner.has_secant_subset()
    }

    fn secant_gradient(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.inner.secant_gradient(theta)? + &self.delta_g)
    }

    fn hvp(&self, theta: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.inner.hvp(theta, v)
    }

    fn tally(&self) -> &Tally {
        self.inner.tally()
    }
}

/// Ratio of the fine-level reduction to the coarse-level reduction that produced it.
pub fn multilevel_ratio(fine_before: f64, fine_after: f64, coarse_before: f64, coarse_after: f64) -> f64 {
    trust_ratio(fine_before - fine_after, coarse_before - coarse_after, coarse_before)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoherenceMode {
    Off,
    /// Record the error at every coarse entry.
    #[default]
    Record,
    /// Record and fail when the error exceeds the tolerance.
    Assert,
}

/// Smoothing and coarse iteration counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CycleConfig {
    pub mu1: usize,
    pub mu2: usize,
    pub mu_coarse: usize,
    pub mode: HessianMode,
    pub coherence: CoherenceMode,
}

impl Default for CycleConfig {
    fn default() -> Self {
        Self {
            mu1: 1,
            mu2: 1,
            mu_coarse: 1,
            mode: HessianMode::Lsr1Overlap,
            coherence: CoherenceMode::Record,
        }
    }
}

/// Diagnostics collected while cycling.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CycleStats {
    /// `(level, relative error)` at each coarse entry; the level is the coarse one.
    pub coherence: Vec<(usize, f64)>,
    /// `(level, ratio, accepted)` for each prolongated correction; the level is the fine one.
    pub corrections: Vec<(usize, f64, bool)>,
    pub smoothing_steps: usize,
    pub coarsest_iterations: usize,
}

impl CycleStats {
    pub fn max_coherence_error(&self) -> f64 {
        self.coherence.iter().map(|c| c.1).fold(0.0, f64::max)
    }
}

/// Coarse objective and its entry iterate built from a smoothed fine iterate.
pub struct CoarseEntry<'a> {
    pub objective: CoarseObjective<'a>,
    pub iterate: Iterate,
    pub restricted_gradient: DVector<f64>,
    pub coherence_error: f64,
}

/// Restricts `fine` to level `l − 1` and builds the first-order coherent coarse objective.
pub fn build_coarse_objective<'a, O: Objective + ?Sized, T: LevelTransfer + ?Sized>(
    fine_objective: &O,
    fine: &mut Iterate,
    l: usize,
    coarse_loss: &'a dyn Objective,
    transfer: &T,
) -> Result<CoarseEntry<'a>> {
    let rg = transfer.restrict_gradient(fine.gradient(fine_objective)?, l)?;
    let anchor = transfer.restrict_params(&fine.theta, l)?;
    let e0 = coarse_loss.evaluate(&anchor)?;
    let delta_g = &rg - &e0.grad;
    let objective = CoarseObjective::new(coarse_loss, anchor.clone(), delta_g)?;
    let lifted = objective.lift(&anchor, e0);
    let coherence_error = (&lifted.grad - &rg).norm() / (1.0 + rg.norm());
    Ok(CoarseEntry {
        objective,
        iterate: Iterate::from_evaluation(anchor, lifted),
        restricted_gradient: rg,
        coherence_error,
    })
}

/// One V-cycle rooted at level `l`.
///
/// `objective` is `H^l`; `losses[i]` is the plain loss of level `i + 1` used to
/// build coarser objectives; `memories[i]` is the secant memory of level `i + 1`.
#[allow(clippy::too_many_arguments)]
pub fn rmtr_vcycle<O: Objective + ?Sized, T: LevelTransfer + ?Sized, R: Rng + ?Sized>(
    l: usize,
    objective: &O,
    losses: &[&dyn Objective],
    it: &mut Iterate,
    state: &mut TrustRegionState,
    transfer: &T,
    cfg: &CycleConfig,
    memories: &mut [SecantMemory],
    rng: &mut R,
    stats: &mut CycleStats,
) -> Result<()> {
    if l == 0 || memories.len() < l || losses.len() + 1 < l {
        return Err(Error::LevelMismatch {
            from: l,
            to: memories.len(),
        });
    }
    if l == 1 {
        let out = tr_iterate(objective, it, state, &mut memories[0], cfg.mu_coarse, cfg.mode, rng)?;
        stats.coarsest_iterations += out.iterations;
        return Ok(());
    }

    let pre = tr_iterate(objective, it, state, &mut memories[l - 1], cfg.mu1, cfg.mode, rng)?;
    stats.smoothing_steps += pre.iterations;

    let mut entry = build_coarse_objective(objective, it, l, losses[l - 2], transfer)?;
    if cfg.coherence != CoherenceMode::Off {
        stats.coherence.push((l - 1, entry.coherence_error));
    }
    if cfg.coherence == CoherenceMode::Assert && !(entry.coherence_error < COHERENCE_TOL) {
        return Err(Error::Coherence {
            level: l - 1,
            error: entry.coherence_error,
        });
    }
    let coarse_before = entry.iterate.value(&entry.objective)?;
    let mut coarse_state = *state;
    if l == 2 {
        let out = tr_iterate(
            &entry.objective,
            &mut entry.iterate,
            &mut coarse_state,
            &mut memories[0],
            cfg.mu_coarse,
            cfg.mode,
            rng,
        )?;
        stats.coarsest_iterations += out.iterations;
    } else {
        rmtr_vcycle(
            l - 1,
            &entry.objective,
            losses,
            &mut entry.iterate,
            &mut coarse_state,
            transfer,
            cfg,
            memories,
            rng,
            stats,
        )?;
    }
    let coarse_after = entry.iterate.value(&entry.objective)?;
    let correction = &entry.iterate.theta - entry.objective.anchor();

    let fine_before = it.value(objective)?;
    let mut rho = f64::NEG_INFINITY;
    let mut trial_value = f64::NAN;
    let mut trial = None;
    if coarse_before - coarse_after > 0.0 {
        let step = transfer.prolong(&correction, l - 1)?;
        let point = &it.theta + step;
        match objective.value(&point) {
            Ok(v) => {
                trial_value = v;
                rho = multilevel_ratio(fine_before, v, coarse_before, coarse_after);
            }
            Err(Error::Diverged { .. }) => {}
            Err(e) => return Err(e),
        }
        trial = Some(point);
    }
    let accepted = state.control(rho);
    stats.corrections.push((l, rho, accepted));
    if accepted {
        *it = Iterate::with_value(trial.expect("accepted trial exists"), trial_value);
    }

    let post = tr_iterate(objective, it, state, &mut memories[l - 1], cfg.mu2, cfg.mode, rng)?;
    stats.smoothing_steps += post.iterations;
    Ok(())
}

/// Outcome of a nested-iteration run.
#[derive(Debug, Clone)]
pub struct FCycleResult {
    pub theta: DVector<f64>,
    pub delta: f64,
    pub budget_exhausted: bool,
    pub stats: CycleStats,
}

/// Nested iteration over full-batch objectives: `cycles_per_level` coarsest
/// TR sweeps on level 1, then on every finer level the prolongated iterate is
/// improved by `cycles_per_level` V-cycles rooted there.
///
/// `budget` is polled after every sweep or cycle and stops the run when it
/// returns `true`.
#[allow(clippy::too_many_arguments)]
pub fn rmtr_fcycle<T: LevelTransfer + ?Sized, R: Rng + ?Sized>(
    losses: &[&dyn Objective],
    transfer: &T,
    theta_coarse: DVector<f64>,
    state: &mut TrustRegionState,
    cfg: &CycleConfig,
    cycles_per_level: usize,
    memory: usize,
    rng: &mut R,
    budget: &mut dyn FnMut() -> bool,
) -> Result<FCycleResult> {
    let levels = losses.len();
    if levels == 0 {
        return Err(Error::InvalidConfig("no levels".into()));
    }
    let mut memories: Vec<SecantMemory> = losses.iter().map(|o| SecantMemory::new(o.dim(), memory)).collect();
    let mut stats = CycleStats::default();
    let mut theta = theta_coarse;
    for level in 1..=levels {
        if level > 1 {
            theta = transfer.prolong(&theta, level - 1)?;
        }
        let mut it = Iterate::new(theta);
        for _ in 0..cycles_per_level {
            rmtr_vcycle(
                level,
                losses[level - 1],
                losses,
                &mut it,
                state,
                transfer,
                cfg,
                &mut memories,
                rng,
                &mut stats,
            )?;
            if budget() {
                return Ok(FCycleResult {
                    theta: transfer_to_finest(transfer, it.into_theta(), level, levels)?,
                    delta: state.delta,
                    budget_exhausted: true,
                    stats,
                });
            }
        }
        theta = it.into_theta();
    }
    Ok(FCycleResult {
        theta,
        delta: state.delta,
        budget_exhausted: false,
        stats,
    })
}

fn transfer_to_finest<T: LevelTransfer + ?Sized>(
    transfer: &T,
    mut theta: DVector<f64>,
    from: usize,
    to: usize,
) -> Result<DVector<f64>> {
    for l in from..to {
        theta = transfer.prolong(&theta, l)?;
    }
    Ok(theta)
}
