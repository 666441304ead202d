//! Work accounting in units of one finest-level, full-dataset gradient.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{Hierarchy, RefinementRule};

pub const LEDGER_SCHEMA_VERSION: u32 = 1;

/// Raw evaluation counters. Sample counts let partial (overlap-only or
/// cache-assisted) gradients be charged for exactly the samples they touched.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkCounts {
    pub grad_calls: u64,
    pub grad_samples: u64,
    pub value_calls: u64,
    pub value_samples: u64,
    pub hvp_calls: u64,
    pub hvp_samples: u64,
}

impl WorkCounts {
    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }
}

impl Add for WorkCounts {
    type Output = Self;

    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

impl AddAssign for WorkCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.grad_calls += rhs.grad_calls;
        self.grad_samples += rhs.grad_samples;
        self.value_calls += rhs.value_calls;
        self.value_samples += rhs.value_samples;
        self.hvp_calls += rhs.hvp_calls;
        self.hvp_samples += rhs.hvp_samples;
    }
}

/// Interior-mutable counters owned by an objective.
#[derive(Debug, Default)]
pub struct Tally(Cell<WorkCounts>);

impl Tally {
    pub fn gradient(&self, samples: usize) {
        self.bump(|c| {
            c.grad_calls += 1;
            c.grad_samples += samples as u64;
        });
    }

    pub fn value(&self, samples: usize) {
        self.bump(|c| {
            c.value_calls += 1;
            c.value_samples += samples as u64;
        });
    }

    pub fn hvp(&self, samples: usize) {
        self.bump(|c| {
            c.hvp_calls += 1;
            c.hvp_samples += samples as u64;
        });
    }

    pub fn get(&self) -> WorkCounts {
        self.0.get()
    }

    /// Returns the counts accumulated so far and resets them.
    pub fn take(&self) -> WorkCounts {
        self.0.take()
    }

    fn bump(&self, f: impl FnOnce(&mut WorkCounts)) {
        let mut c = self.0.get();
        f(&mut c);
        self.0.set(c);
    }
}

/// How coarse-level gradients are discounted relative to the finest level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelScaling {
    /// `2^{l−L}`.
    PowerOfTwo,
    /// `K_l / K_L`, used when depth does not exactly double between levels.
    BlockRatio,
}

/// Extra cost weights for evaluations the gradient-only total ignores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub hvp: f64,
    pub value: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self { hvp: 2.0, value: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub epoch: usize,
    pub batch: usize,
    pub level: usize,
    pub batch_size: usize,
    #[serde(flatten)]
    pub counts: WorkCounts,
}

/// Per-(epoch, batch, level) counters with a running work total.
#[derive(Debug, Clone)]
pub struct WorkLedger {
    dataset_size: usize,
    factors: Vec<f64>,
    scaling: LevelScaling,
    weights: CostWeights,
    entries: BTreeMap<(usize, usize, usize), (usize, WorkCounts)>,
    work: f64,
    monitor: WorkCounts,
}

#[derive(Serialize, Deserialize)]
struct LedgerFile {
    schema_version: u32,
    dataset_size: usize,
    scaling: LevelScaling,
    level_factors: Vec<f64>,
    weights: CostWeights,
    entries: Vec<LedgerEntry>,
    monitor: WorkCounts,
    totals: LedgerTotals,
}

/// Summary figures of a ledger.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LedgerTotals {
    /// Gradient-only work.
    pub work: f64,
    pub hvp_work: f64,
    pub value_work: f64,
    /// `work` plus the weighted Hvp and function-value columns.
    pub weighted: f64,
}

impl WorkLedger {
    /// Ledger for `levels` levels with power-of-two discounting.
    pub fn new(dataset_size: usize, levels: usize) -> Result<Self> {
        if levels == 0 {
            return Err(Error::InvalidConfig("ledger needs at least one level".into()));
        }
        let factors = (1..=levels).map(|l| 0.5f64.powi((levels - l) as i32)).collect();
        Self::with_factors(dataset_size, factors, LevelScaling::PowerOfTwo)
    }

    /// Ledger whose level discounts follow the hierarchy's refinement rule.
    pub fn for_hierarchy(dataset_size: usize, hierarchy: &Hierarchy) -> Result<Self> {
        let levels = hierarchy.num_levels();
        match hierarchy.rule() {
            RefinementRule::IntervalDoubling => Self::new(dataset_size, levels),
            RefinementRule::NodeDoubling => {
                let factors = (1..=levels).map(|l| hierarchy.cost_factor(l)).collect();
                Self::with_factors(dataset_size, factors, LevelScaling::BlockRatio)
            }
        }
    }

    pub fn with_factors(dataset_size: usize, factors: Vec<f64>, scaling: LevelScaling) -> Result<Self> {
        if dataset_size == 0 {
            return Err(Error::InvalidConfig("ledger dataset size must be positive".into()));
        }
        if factors.is_empty() || factors.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return Err(Error::InvalidConfig("level factors must be positive and finite".into()));
        }
        Ok(Self {
            dataset_size,
            factors,
            scaling,
            weights: CostWeights::default(),
            entries: BTreeMap::new(),
            work: 0.0,
            monitor: WorkCounts::default(),
        })
    }

    pub fn with_weights(mut self, weights: CostWeights) -> Self {
        self.weights = weights;
        self
    }

    pub fn dataset_size(&self) -> usize {
        self.dataset_size
    }

    pub fn num_levels(&self) -> usize {
        self.factors.len()
    }

    pub fn scaling(&self) -> LevelScaling {
        self.scaling
    }

    pub fn level_factor(&self, level: usize) -> f64 {
        self.factors[level - 1]
    }

    /// Records `calls` full gradient evaluations on a batch of `batch_size` samples.
    pub fn record(&mut self, epoch: usize, batch: usize, level: usize, batch_size: usize, calls: u64) -> Result<()> {
        let counts = WorkCounts {
            grad_calls: calls,
            grad_samples: calls * batch_size as u64,
            ..WorkCounts::default()
        };
        self.record_counts(epoch, batch, level, batch_size, counts)
    }

    /// Records arbitrary counters gathered while optimizing on one batch.
    pub fn record_counts(
        &mut self,
        epoch: usize,
        batch: usize,
        level: usize,
        batch_size: usize,
        counts: WorkCounts,
    ) -> Result<()> {
        if level == 0 || level > self.factors.len() {
            return Err(Error::LevelMismatch {
                from: level,
                to: self.factors.len(),
            });
        }
        let slot = self
            .entries
            .entry((epoch, batch, level))
            .or_insert((batch_size, WorkCounts::default()));
        slot.0 = slot.0.max(batch_size);
        slot.1 += counts;
        self.work += self.sample_work(level, counts.grad_samples);
        Ok(())
    }

    /// Function values spent on monitoring (global ratio, stopping checks).
    /// Reported, never part of the work total.
    pub fn record_monitor(&mut self, counts: WorkCounts) {
        self.monitor += counts;
    }

    pub fn monitor(&self) -> WorkCounts {
        self.monitor
    }

    fn sample_work(&self, level: usize, samples: u64) -> f64 {
        samples as f64 / self.dataset_size as f64 * self.factors[level - 1]
    }

    /// Running gradient-only work `W`.
    pub fn total(&self) -> f64 {
        self.work
    }

    /// `W` recomputed from the stored counters.
    pub fn recompute(&self) -> f64 {
        self.entries
            .iter()
            .map(|(&(_, _, level), (_, c))| self.sample_work(level, c.grad_samples))
            .sum()
    }

    pub fn totals(&self) -> LedgerTotals {
        let mut hvp = 0.0;
        let mut value = 0.0;
        for (&(_, _, level), (_, c)) in &self.entries {
            hvp += self.sample_work(level, c.hvp_samples);
            value += self.sample_work(level, c.value_samples);
        }
        LedgerTotals {
            work: self.work,
            hvp_work: hvp,
            value_work: value,
            weighted: self.work + self.weights.hvp * hvp + self.weights.value * value,
        }
    }

    /// Summed counters for one level.
    pub fn level_counts(&self, level: usize) -> WorkCounts {
        self.entries
            .iter()
            .filter(|(k, _)| k.2 == level)
            .fold(WorkCounts::default(), |acc, (_, (_, c))| acc + *c)
    }

    pub fn entries(&self) -> impl Iterator<Item = LedgerEntry> + '_ {
        self.entries
            .iter()
            .map(|(&(epoch, batch, level), &(batch_size, counts))| LedgerEntry {
                epoch,
                batch,
                level,
                batch_size,
                counts,
            })
    }

    /// Folds a finished run's ledger into this one.
    pub fn merge(&mut self, other: &WorkLedger) -> Result<()> {
        if other.dataset_size != self.dataset_size || other.factors != self.factors {
            return Err(Error::InvalidConfig(
                "cannot merge ledgers with different cost models".into(),
            ));
        }
        for e in other.entries() {
            self.record_counts(e.epoch, e.batch, e.level, e.batch_size, e.counts)?;
        }
        self.monitor += other.monitor;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = LedgerFile {
            schema_version: LEDGER_SCHEMA_VERSION,
            dataset_size: self.dataset_size,
            scaling: self.scaling,
            level_factors: self.factors.clone(),
            weights: self.weights,
            entries: self.entries().collect(),
            monitor: self.monitor,
            totals: self.totals(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: LedgerFile = serde_json::from_str(text)?;
        if file.schema_version != LEDGER_SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported ledger schema version {}",
                file.schema_version
            )));
        }
        let mut ledger =
            Self::with_factors(file.dataset_size, file.level_factors, file.scaling)?.with_weights(file.weights);
        for e in file.entries {
            ledger.record_counts(e.epoch, e.batch, e.level, e.batch_size, e.counts)?;
        }
        ledger.monitor = file.monitor;
        Ok(ledger)
    }
}
