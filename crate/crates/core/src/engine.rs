//! Training driver shared by every solver.
//!
//! A run is a sequence of phases, one per level being trained. Single-level
//! solvers and V-cycles have one phase on the finest level; nested iteration
//! (F-cycle) starts on level 1 and prolongs the result after each phase. Each
//! phase is a sequence of epochs over a mini-batch plan with one cycle per
//! batch; with a full-batch plan an epoch is exactly one cycle.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::Task;
use crate::dss::{gcontrol_decision, gen_minibatches, global_ratio, overlap_size, DssConstants, DssState, Regime};
use crate::error::{Error, Result};
use crate::hierarchy::{build_hierarchy, Hierarchy, RefinementRule};
use crate::ledger::{WorkCounts, WorkLedger};
use crate::objective::{BatchObjective, Iterate, Objective};
use crate::resnet::{self, Batch, DataSums, NetworkConfig, ParamVector};
use crate::rmtr::{rmtr_vcycle, CoherenceMode, CycleConfig, CycleStats};
use crate::tr::{HessianMode, SecantMemory, TrConstants, TrustRegionState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Solver {
    #[serde(rename = "TR", alias = "tr")]
    Tr,
    #[serde(rename = "RMTR_V", alias = "rmtr_v")]
    RmtrV,
    #[serde(rename = "RMTR_F", alias = "rmtr_f")]
    RmtrF,
    #[serde(rename = "DSS_TR", alias = "dss_tr")]
    DssTr,
    #[serde(rename = "DSS_RMTR", alias = "dss_rmtr")]
    DssRmtr,
}

impl Solver {
    /// Whether cycles descend through coarser levels.
    pub fn multilevel(self, levels: usize) -> bool {
        matches!(self, Solver::RmtrV | Solver::RmtrF | Solver::DssRmtr) && levels > 1
    }

    /// Whether training starts on level 1 and moves up (nested iteration).
    pub fn nested(self, levels: usize) -> bool {
        matches!(self, Solver::RmtrF | Solver::DssRmtr) && levels > 1
    }

    pub fn stochastic(self) -> bool {
        matches!(self, Solver::DssTr | Solver::DssRmtr)
    }

    /// Display name; a multilevel solver on one level reports its single-level twin.
    pub fn label(self, levels: usize) -> &'static str {
        match (self, levels > 1) {
            (Solver::Tr, _) | (Solver::RmtrV, false) | (Solver::RmtrF, false) => "TR",
            (Solver::RmtrV, true) => "RMTR-V",
            (Solver::RmtrF, true) => "RMTR-F",
            (Solver::DssTr, _) | (Solver::DssRmtr, false) => "DSS-TR",
            (Solver::DssRmtr, true) => "DSS-RMTR",
        }
    }
}

impl std::str::FromStr for Solver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "TR" => Ok(Solver::Tr),
            "RMTR_V" => Ok(Solver::RmtrV),
            "RMTR_F" => Ok(Solver::RmtrF),
            "DSS_TR" => Ok(Solver::DssTr),
            "DSS_RMTR" => Ok(Solver::DssRmtr),
            _ => Err(Error::InvalidConfig(format!("unknown solver `{s}`"))),
        }
    }
}

/// When nested iteration leaves a level below the finest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LevelStop {
    /// Once the level meets the accuracy rule, or after `level_epochs` epochs.
    #[default]
    Criterion,
    /// After exactly `level_epochs` epochs.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub solver: Solver,
    pub levels: usize,
    pub refinement: RefinementRule,
    pub hessian: HessianMode,
    /// Initial secant memory size `M`.
    pub memory: usize,
    pub delta0: f64,
    #[serde(flatten)]
    pub tr: TrConstants,
    pub mu1: usize,
    pub mu2: usize,
    pub mu_coarse: usize,
    pub coherence: CoherenceMode,
    /// Initial mini-batch size; `0` means the full training set.
    pub mbs0: usize,
    pub overlap_fraction: f64,
    /// Epochs between global ratio tests.
    pub global_period: usize,
    #[serde(flatten)]
    pub dss: DssConstants,
    pub level_stop: LevelStop,
    pub level_epochs: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            solver: Solver::RmtrF,
            levels: 3,
            refinement: RefinementRule::IntervalDoubling,
            hessian: HessianMode::Lsr1Overlap,
            memory: 1,
            delta0: 1.0,
            tr: TrConstants::default(),
            mu1: 1,
            mu2: 1,
            mu_coarse: 1,
            coherence: CoherenceMode::Record,
            mbs0: 0,
            overlap_fraction: 0.2,
            global_period: 1,
            dss: DssConstants::default(),
            level_stop: LevelStop::Criterion,
            level_epochs: 1000,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.levels == 0 {
            return bad("levels must be at least 1".into());
        }
        if self.memory == 0 {
            return bad("memory must be at least 1".into());
        }
        if !(self.delta0 > 0.0) || self.delta0 > self.tr.delta_max {
            return bad(format!("delta0 must lie in (0, delta_max], got {}", self.delta0));
        }
        if !(0.0..0.5).contains(&self.overlap_fraction) {
            return bad(format!(
                "overlap_fraction must lie in [0, 0.5), got {}",
                self.overlap_fraction
            ));
        }
        if self.global_period == 0 {
            return bad("global_period must be at least 1".into());
        }
        if self.mu_coarse == 0 {
            return bad("mu_coarse must be at least 1".into());
        }
        if self.level_epochs == 0 {
            return bad("level_epochs must be at least 1".into());
        }
        self.tr.validate()?;
        self.dss.validate()
    }

    pub fn label(&self) -> &'static str {
        self.solver.label(self.levels)
    }

    fn cycle(&self) -> CycleConfig {
        CycleConfig {
            mu1: self.mu1,
            mu2: self.mu2,
            mu_coarse: self.mu_coarse,
            mode: self.hessian,
            coherence: self.coherence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StopRule {
    /// Accuracy threshold τ; ignored for regression.
    pub accuracy: f64,
    pub work_max: f64,
    pub epoch_max: usize,
}

impl Default for StopRule {
    fn default() -> Self {
        Self {
            accuracy: 0.98,
            work_max: 1000.0,
            epoch_max: 100_000,
        }
    }
}

/// Training and validation samples.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: Batch,
    pub validation: Option<Batch>,
    pub task: Task,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    Budget,
    EpochLimit,
    Diverged,
}

impl Termination {
    pub fn label(self) -> &'static str {
        match self {
            Termination::Converged => "converged",
            Termination::Budget => "budget",
            Termination::EpochLimit => "epoch_limit",
            Termination::Diverged => "diverged",
        }
    }
}

/// Monitoring snapshot taken after one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub level: usize,
    pub phase_epoch: usize,
    pub work: f64,
    pub hvp_work: f64,
    pub value_work: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub train_acc: Option<f64>,
    pub val_acc: Option<f64>,
    pub mbs: usize,
    pub memory: usize,
    pub batches: usize,
    pub delta: f64,
    pub rho_g: Option<f64>,
    pub accepted: bool,
    pub mbs_increased: bool,
    pub max_coherence: Option<f64>,
}

/// Finest-level loss right after a prolongation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prolongation {
    pub level: usize,
    pub loss_before: f64,
    pub loss_after: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub theta: DVector<f64>,
    pub level: usize,
    pub termination: Termination,
    pub ledger: WorkLedger,
    pub rows: Vec<EpochRow>,
    pub prolongations: Vec<Prolongation>,
    pub coherence: Vec<(usize, f64)>,
}

impl TrainOutcome {
    pub fn work(&self) -> f64 {
        self.ledger.total()
    }

    pub fn last(&self) -> Option<&EpochRow> {
        self.rows.last()
    }
}

#[derive(Clone)]
struct Metrics {
    train_loss: f64,
    val_loss: Option<f64>,
    train_acc: Option<f64>,
    val_acc: Option<f64>,
}

/// Trains a network whose coarsest level is `base`.
///
/// `seed` drives initialization, batch shuffling and sampled curvature.
/// `on_row` sees every epoch row as soon as it is produced.
pub fn train(
    settings: &SolverSettings,
    stop: &StopRule,
    base: &NetworkConfig,
    data: &TrainData,
    seed: u64,
    on_row: &mut dyn FnMut(&EpochRow),
) -> Result<TrainOutcome> {
    settings.validate()?;
    let hierarchy = build_hierarchy(base, settings.levels, settings.refinement)?;
    let mut run = Run::new(settings, stop, hierarchy, data, seed)?;
    let termination = match run.execute(on_row) {
        Ok(t) => t,
        Err(Error::Diverged { .. }) => Termination::Diverged,
        Err(e) => return Err(e),
    };
    Ok(TrainOutcome {
        theta: run.theta,
        level: run.level,
        termination,
        ledger: run.ledger,
        rows: run.rows,
        prolongations: run.prolongations,
        coherence: run.coherence,
    })
}

struct Run<'a> {
    settings: &'a SolverSettings,
    stop: &'a StopRule,
    hierarchy: Hierarchy,
    data: &'a TrainData,
    rng: ChaCha8Rng,
    ledger: WorkLedger,
    theta: DVector<f64>,
    level: usize,
    state: TrustRegionState,
    epoch: usize,
    rows: Vec<EpochRow>,
    prolongations: Vec<Prolongation>,
    coherence: Vec<(usize, f64)>,
    metrics_cache: Option<(usize, DVector<f64>, Metrics)>,
}

impl<'a> Run<'a> {
    fn new(
        settings: &'a SolverSettings,
        stop: &'a StopRule,
        hierarchy: Hierarchy,
        data: &'a TrainData,
        seed: u64,
    ) -> Result<Self> {
        let levels = hierarchy.num_levels();
        let level = if settings.solver.nested(levels) { 1 } else { levels };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = ParamVector::random(&hierarchy.level(level).cfg, &mut rng).to_flat();
        let ledger = WorkLedger::for_hierarchy(data.train.len(), &hierarchy)?;
        Ok(Self {
            settings,
            stop,
            hierarchy,
            data,
            rng,
            ledger,
            theta,
            level,
            state: TrustRegionState::new(settings.delta0, settings.tr)?,
            epoch: 0,
            rows: Vec::new(),
            prolongations: Vec::new(),
            coherence: Vec::new(),
            metrics_cache: None,
        })
    }

    fn execute(&mut self, on_row: &mut dyn FnMut(&EpochRow)) -> Result<Termination> {
        let levels = self.hierarchy.num_levels();
        loop {
            if let Some(t) = self.phase(on_row)? {
                return Ok(t);
            }
            if self.level == levels {
                return Ok(Termination::EpochLimit);
            }
            let before = self.full_metrics(self.level, &self.theta.clone())?.train_loss;
            self.theta = self.hierarchy.prolong(&self.theta, self.level, self.level + 1)?;
            self.level += 1;
            let after = self.full_metrics(self.level, &self.theta.clone())?.train_loss;
            if !after.is_finite() {
                return Err(Error::Diverged { block: 0 });
            }
            self.prolongations.push(Prolongation {
                level: self.level,
                loss_before: before,
                loss_after: after,
            });
        }
    }

    fn mbs0(&self) -> usize {
        let n = self.data.train.len();
        if self.settings.solver.stochastic() && self.settings.mbs0 > 0 {
            self.settings.mbs0.min(n)
        } else {
            n
        }
    }

    /// Trains the current level. Returns a termination when the run is over,
    /// `None` when the level is done and the next one should start.
    fn phase(&mut self, on_row: &mut dyn FnMut(&EpochRow)) -> Result<Option<Termination>> {
        let levels = self.hierarchy.num_levels();
        let finest = self.level == levels;
        let n = self.data.train.len();
        let mbs0 = self.mbs0();
        let overlap = overlap_size(mbs0, self.settings.overlap_fraction);
        let mut dss = DssState::new(n, mbs0, self.settings.memory, self.settings.dss)?;
        let depth = if self.settings.solver.multilevel(levels) {
            self.level
        } else {
            1
        };
        let first = self.level + 1 - depth;
        let mut memories: Vec<SecantMemory> = (first..=self.level)
            .map(|l| SecantMemory::new(self.hierarchy.level(l).cfg.num_params(), dss.memory))
            .collect();
        let cycle = self.settings.cycle();

        // Full-batch objectives and iterate survive across epochs.
        let mut full: Option<(Vec<BatchObjective>, Iterate)> = None;
        let mut checkpoint: Option<(DVector<f64>, f64, Vec<f64>)> = None;
        let mut phase_epoch = 0;
        loop {
            let regime = dss.regime();
            let mut stats = CycleStats::default();
            let mut rho_g = None;
            let mut accepted = true;
            let mut grew = false;
            let batches;
            match regime {
                Regime::Deterministic => {
                    checkpoint = None;
                    if full.is_none() {
                        let objs = self.objectives(first, &self.data.train, 0, 0)?;
                        memories.iter_mut().for_each(SecantMemory::clear);
                        full = Some((objs, Iterate::new(self.theta.clone())));
                    }
                    let (objs, it) = full.as_mut().expect("full-batch state");
                    let views: Vec<&dyn Objective> = objs.iter().map(|o| o as &dyn Objective).collect();
                    rmtr_vcycle(
                        depth,
                        views[depth - 1],
                        &views,
                        it,
                        &mut self.state,
                        &self.hierarchy,
                        &cycle,
                        &mut memories,
                        &mut self.rng,
                        &mut stats,
                    )?;
                    self.theta = it.theta.clone();
                    for (i, o) in objs.iter().enumerate() {
                        self.ledger
                            .record_counts(self.epoch, 0, first + i, n, o.tally().take())?;
                    }
                    batches = 1;
                }
                Regime::Stochastic => {
                    full = None;
                    let plan = gen_minibatches(n, dss.mbs, overlap, &mut self.rng)?;
                    batches = plan.len();
                    if checkpoint.is_none() {
                        let start = self.full_loss(self.level, &self.theta.clone())?;
                        checkpoint = Some((self.theta.clone(), start, Vec::new()));
                    }
                    let mut local = Vec::with_capacity(plan.len());
                    let mut carried: Option<DataSums> = None;
                    for (b, idx) in plan.batches.iter().enumerate() {
                        let batch = self.data.train.select(idx)?;
                        let objs = self.objectives(first, &batch, plan.prefix(b), plan.suffix(b))?;
                        let fine = &objs[depth - 1];
                        if let Some(sums) = carried.take() {
                            fine.seed_prefix(&self.theta, sums);
                        }
                        let (coarse, _) = memories.split_at_mut(depth - 1);
                        coarse.iter_mut().for_each(SecantMemory::clear);
                        let mut it = Iterate::new(self.theta.clone());
                        it.gradient(fine)?;
                        let before = it.value(fine)?;
                        let views: Vec<&dyn Objective> = objs.iter().map(|o| o as &dyn Objective).collect();
                        rmtr_vcycle(
                            depth,
                            fine,
                            &views,
                            &mut it,
                            &mut self.state,
                            &self.hierarchy,
                            &cycle,
                            &mut memories,
                            &mut self.rng,
                            &mut stats,
                        )?;
                        local.push(before - it.value(fine)?);
                        carried = fine.cached_suffix(&it.theta);
                        self.theta = it.into_theta();
                        for (i, o) in objs.iter().enumerate() {
                            self.ledger
                                .record_counts(self.epoch, b, first + i, batch.len(), o.tally().take())?;
                        }
                    }
                    checkpoint.as_mut().expect("checkpoint set").2.extend(local);
                    if (phase_epoch + 1) % self.settings.global_period == 0 {
                        let (start, loss_start, reductions) = checkpoint.take().expect("checkpoint set");
                        let loss_end = self.full_loss(self.level, &self.theta.clone())?;
                        let rho = global_ratio(loss_start, loss_end, &reductions);
                        let decision = gcontrol_decision(rho, &mut dss);
                        rho_g = Some(rho);
                        accepted = decision.accepted;
                        grew = decision.grew;
                        if !accepted {
                            self.theta = start;
                            memories.last_mut().expect("finest memory").clear();
                        }
                        if grew {
                            memories.iter_mut().for_each(|m| m.set_capacity(dss.memory));
                        }
                    }
                }
            }
            self.coherence.extend(stats.coherence.iter().copied());
            let metrics = self.full_metrics(self.level, &self.theta.clone())?;
            if !metrics.train_loss.is_finite() {
                return Err(Error::Diverged { block: 0 });
            }
            let totals = self.ledger.totals();
            let row = EpochRow {
                epoch: self.epoch,
                level: self.level,
                phase_epoch,
                work: totals.work,
                hvp_work: totals.hvp_work,
                value_work: totals.value_work,
                train_loss: metrics.train_loss,
                val_loss: metrics.val_loss,
                train_acc: metrics.train_acc,
                val_acc: metrics.val_acc,
                mbs: if regime == Regime::Deterministic { n } else { dss.mbs },
                memory: dss.memory,
                batches,
                delta: self.state.delta,
                rho_g,
                accepted,
                mbs_increased: grew,
                max_coherence: (!stats.coherence.is_empty()).then(|| stats.max_coherence_error()),
            };
            on_row(&row);
            self.rows.push(row);
            self.epoch += 1;
            phase_epoch += 1;

            let reached = self.data.task == Task::Classification
                && (metrics.train_acc.is_some_and(|a| a > self.stop.accuracy)
                    || metrics.val_acc.is_some_and(|a| a > self.stop.accuracy));
            if finest && reached {
                return Ok(Some(Termination::Converged));
            }
            if totals.work > self.stop.work_max {
                return Ok(Some(Termination::Budget));
            }
            if self.epoch >= self.stop.epoch_max {
                return Ok(Some(Termination::EpochLimit));
            }
            if !finest {
                let done = match self.settings.level_stop {
                    LevelStop::Criterion => reached || phase_epoch >= self.settings.level_epochs,
                    LevelStop::Fixed => phase_epoch >= self.settings.level_epochs,
                };
                if done {
                    return Ok(None);
                }
            }
        }
    }

    /// Objectives for levels `first..=self.level` bound to `batch`.
    fn objectives(&self, first: usize, batch: &Batch, prefix: usize, suffix: usize) -> Result<Vec<BatchObjective>> {
        (first..=self.level)
            .map(|l| {
                let cfg = &self.hierarchy.level(l).cfg;
                if l == self.level {
                    BatchObjective::with_overlap(cfg, batch, prefix, suffix)
                } else {
                    BatchObjective::with_overlap(cfg, batch, 0, suffix)
                }
            })
            .collect()
    }

    fn full_loss(&mut self, level: usize, theta: &DVector<f64>) -> Result<f64> {
        let cfg = &self.hierarchy.level(level).cfg;
        let v = resnet::loss(cfg, theta.as_slice(), &self.data.train)?;
        self.ledger.record_monitor(WorkCounts {
            value_calls: 1,
            value_samples: self.data.train.len() as u64,
            ..WorkCounts::default()
        });
        Ok(v)
    }

    /// Train and validation metrics; a rejected epoch reuses the previous ones.
    fn full_metrics(&mut self, level: usize, theta: &DVector<f64>) -> Result<Metrics> {
        if let Some((l, t, m)) = &self.metrics_cache {
            if *l == level && t == theta {
                return Ok(m.clone());
            }
        }
        let cfg = self.hierarchy.level(level).cfg.clone();
        let classify = self.data.task == Task::Classification;
        let (train_loss, acc) = resnet::loss_and_accuracy(&cfg, theta.as_slice(), &self.data.train)?;
        let train_acc = classify.then_some(acc);
        let mut samples = self.data.train.len() as u64;
        let (val_loss, val_acc) = match &self.data.validation {
            Some(v) => {
                samples += v.len() as u64;
                let (loss, acc) = resnet::loss_and_accuracy(&cfg, theta.as_slice(), v)?;
                (Some(loss), classify.then_some(acc))
            }
            None => (None, None),
        };
        self.ledger.record_monitor(WorkCounts {
            value_calls: 1,
            value_samples: samples,
            ..WorkCounts::default()
        });
        let metrics = Metrics {
            train_loss,
            val_loss,
            train_acc,
            val_acc,
        };
        self.metrics_cache = Some((level, theta.clone(), metrics.clone()));
        Ok(metrics)
    }
}
