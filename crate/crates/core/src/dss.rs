//! Dynamic sample size: overlapping mini-batches and the global acceptance test.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::Objective;
use crate::tr::DECREASE_GUARD;

/// Mini-batches tiling a shuffled index list; neighbours share `overlap` indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MiniBatchPlan {
    pub batches: Vec<Vec<usize>>,
    pub mbs: usize,
    pub overlap: usize,
}

impl MiniBatchPlan {
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    /// Number of leading indices of batch `b` shared with batch `b − 1`.
    pub fn prefix(&self, b: usize) -> usize {
        if b == 0 {
            0
        } else {
            self.overlap
        }
    }

    /// Number of trailing indices of batch `b` shared with batch `b + 1`.
    pub fn suffix(&self, b: usize) -> usize {
        if b + 1 < self.batches.len() {
            self.overlap
        } else {
            0
        }
    }
}

/// Shuffles `0..n` and cuts it into batches of `mbs` with stride `mbs − overlap`.
///
/// The last batch absorbs the remainder. When `mbs ≥ n` the plan is the
/// unshuffled full dataset and the overlap is ignored.
pub fn gen_minibatches<R: Rng + ?Sized>(n: usize, mbs: usize, overlap: usize, rng: &mut R) -> Result<MiniBatchPlan> {
    if n == 0 || mbs == 0 {
        return Err(Error::InvalidConfig(
            "mini-batches need a nonempty dataset and mbs ≥ 1".into(),
        ));
    }
    if mbs >= n {
        return Ok(MiniBatchPlan {
            batches: vec![(0..n).collect()],
            mbs: n,
            overlap: 0,
        });
    }
    if 2 * overlap > mbs {
        return Err(Error::InvalidConfig(format!(
            "overlap {overlap} exceeds half the mini-batch size {mbs}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let stride = mbs - overlap;
    let count = (n - mbs) / stride + 1;
    let batches = (0..count)
        .map(|b| {
            let start = b * stride;
            let end = if b + 1 == count { n } else { start + mbs };
            order[start..end].to_vec()
        })
        .collect();
    Ok(MiniBatchPlan { batches, mbs, overlap })
}

/// Overlap size for the whole run: 20% of the initial mini-batch by default.
pub fn overlap_size(mbs0: usize, fraction: f64) -> usize {
    (fraction * mbs0 as f64).round() as usize
}

/// Full-dataset decrease over the mean of the per-batch decreases.
pub fn global_ratio(loss_before: f64, loss_after: f64, local_reductions: &[f64]) -> f64 {
    if local_reductions.is_empty() || !loss_after.is_finite() {
        return f64::NEG_INFINITY;
    }
    let mean = local_reductions.iter().sum::<f64>() / local_reductions.len() as f64;
    if !(mean > DECREASE_GUARD * (1.0 + loss_before.abs())) {
        return f64::NEG_INFINITY;
    }
    (loss_before - loss_after) / mean
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DssConstants {
    pub zeta1: f64,
    pub zeta2: f64,
    pub omega: f64,
}

impl Default for DssConstants {
    fn default() -> Self {
        Self {
            zeta1: 0.1,
            zeta2: 0.0,
            omega: 2.0,
        }
    }
}

impl DssConstants {
    pub fn validate(&self) -> Result<()> {
        if !(self.zeta1 > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "zeta1 must be positive, got {}",
                self.zeta1
            )));
        }
        if !(0.0..=0.2).contains(&self.zeta2) {
            return Err(Error::InvalidConfig(format!(
                "zeta2 must lie in [0, 0.2], got {}",
                self.zeta2
            )));
        }
        if !(self.omega > 1.0) {
            return Err(Error::InvalidConfig(format!("omega must exceed 1, got {}", self.omega)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Stochastic,
    Deterministic,
}

/// Mini-batch size and secant memory capacity of the outer loop.
#[derive(Debug, Clone, PartialEq)]
pub struct DssState {
    pub epoch: usize,
    pub mbs: usize,
    pub memory: usize,
    pub dataset_size: usize,
    pub constants: DssConstants,
}

impl DssState {
    pub fn new(dataset_size: usize, mbs0: usize, memory: usize, constants: DssConstants) -> Result<Self> {
        constants.validate()?;
        if dataset_size == 0 || mbs0 == 0 || memory == 0 {
            return Err(Error::InvalidConfig(
                "dataset size, mbs0 and memory must be positive".into(),
            ));
        }
        Ok(Self {
            epoch: 0,
            mbs: mbs0.min(dataset_size),
            memory,
            dataset_size,
            constants,
        })
    }

    pub fn regime(&self) -> Regime {
        if self.mbs >= self.dataset_size {
            Regime::Deterministic
        } else {
            Regime::Stochastic
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GcontrolDecision {
    pub accepted: bool,
    pub grew: bool,
}

/// Accepts the trial iff `ρ > ζ1`; grows the mini-batch (and the memory by one) iff `ρ < ζ2`.
pub fn gcontrol_decision(rho: f64, state: &mut DssState) -> GcontrolDecision {
    let accepted = rho > state.constants.zeta1;
    let mut grew = false;
    if rho < state.constants.zeta2 && state.mbs < state.dataset_size {
        let next = (state.constants.omega * state.mbs as f64).ceil() as usize;
        state.mbs = next.min(state.dataset_size);
        state.memory += 1;
        grew = true;
    }
    GcontrolDecision { accepted, grew }
}

/// [`gcontrol_decision`] applied to a pair of iterates.
pub fn gcontrol(
    rho: f64,
    before: DVector<f64>,
    trial: DVector<f64>,
    state: &mut DssState,
) -> (DVector<f64>, GcontrolDecision) {
    let d = gcontrol_decision(rho, state);
    (if d.accepted { trial } else { before }, d)
}

/// Secant pair from gradients of an objective restricted to the overlap samples.
/// Returns `None` when the iterates coincide.
pub fn secant_pair_overlap<O: Objective + ?Sized>(
    overlap_objective: &O,
    next: &DVector<f64>,
    current: &DVector<f64>,
) -> Result<Option<(DVector<f64>, DVector<f64>)>> {
    let s = next - current;
    if s.iter().all(|v| *v == 0.0) {
        return Ok(None);
    }
    let z = overlap_objective.secant_gradient(next)? - overlap_objective.secant_gradient(current)?;
    Ok(Some((s, z)))
}
