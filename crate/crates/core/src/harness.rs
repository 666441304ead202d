//! Experiment configuration, seeded runs, logs and replication summaries.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datasets::{Generator, LabeledDataset, Task};
use crate::engine::{train, EpochRow, Prolongation, SolverSettings, StopRule, Termination, TrainData};
use crate::error::{Error, Result};
use crate::resnet::{Activation, Hypothesis, LossKind, NetworkConfig, TimeGrid};

/// Version tag written into every JSON Lines record.
pub const LOG_SCHEMA_VERSION: u32 = 1;

/// Where the samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    /// Synthetic generator; ignored when `path` is set.
    pub generator: Generator,
    /// CSV file written by `gen-data` (or any file with the same header).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub n: usize,
    /// Seed of the data stream: generation and the train/validation split.
    pub seed: u64,
    /// Training split size; defaults to five sevenths of the samples.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_train: Option<usize>,
    pub standardize: bool,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            generator: Generator::Smiley,
            path: None,
            n: 7000,
            seed: 1,
            n_train: None,
            standardize: true,
        }
    }
}

impl DataSpec {
    fn train_size(&self, n: usize) -> usize {
        self.n_train.unwrap_or_else(|| (n * 5).div_ceil(7))
    }

    /// Samples before splitting.
    pub fn load(&self) -> Result<LabeledDataset> {
        match &self.path {
            Some(p) => LabeledDataset::read_csv(p),
            None => self.generator.generate(self.n, self.seed),
        }
    }

    /// Split (and optionally standardized) training data.
    pub fn prepare(&self) -> Result<TrainData> {
        let ds = self.load()?;
        let n_train = self.train_size(ds.len());
        if n_train == 0 || n_train > ds.len() {
            return Err(Error::config(
                "data.n_train",
                format!("need 1 ≤ n_train ≤ {}, got {n_train}", ds.len()),
            ));
        }
        let mut split = ds.split(n_train, self.seed)?;
        if self.standardize {
            split = split.standardize().0;
        }
        let validation = if split.validation.is_empty() {
            None
        } else {
            Some(split.validation.to_batch()?)
        };
        Ok(TrainData {
            train: split.train.to_batch()?,
            validation,
            task: ds.task,
        })
    }
}

/// Level-1 network shape; input, output and loss follow the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    pub width: usize,
    /// Residual blocks on the coarsest level.
    pub blocks: usize,
    pub final_time: f64,
    pub activation: Activation,
    pub beta1: f64,
    pub beta2: f64,
    pub grid: TimeGrid,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            width: 10,
            blocks: 7,
            final_time: 1.0,
            activation: Activation::Tanh,
            beta1: 1e-4,
            beta2: 1e-4,
            grid: TimeGrid::Intervals,
        }
    }
}

impl NetworkSpec {
    pub fn config(&self, n_in: usize, n_out: usize, task: Task) -> NetworkConfig {
        let (hypothesis, loss) = match task {
            Task::Classification => (Hypothesis::Softmax, LossKind::CrossEntropy),
            Task::Regression => (Hypothesis::Identity, LossKind::LeastSquares),
        };
        NetworkConfig {
            n_in,
            n_out,
            width: self.width,
            blocks: self.blocks,
            final_time: self.final_time,
            activation: self.activation,
            hypothesis,
            loss,
            beta1: self.beta1,
            beta2: self.beta2,
            grid: self.grid,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Replication {
    pub seeds: Vec<u64>,
}

impl Default for Replication {
    fn default() -> Self {
        Self {
            seeds: (1..=5).collect(),
        }
    }
}

/// Everything needed to reproduce a run, as read from a TOML file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed of the initialization and solver stream.
    pub seed: u64,
    pub data: DataSpec,
    pub network: NetworkSpec,
    pub solver: SolverSettings,
    pub stop: StopRule,
    pub replication: Replication,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(toml_path(text, &e), e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config("", e.to_string()))
    }

    /// Checks every field, reporting the first offender by its dotted path.
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.path.is_none() {
            let min = match d.generator {
                Generator::Smiley => 4,
                Generator::Spiral => 10,
                Generator::Analytic => 1,
            };
            if d.n < min {
                return Err(Error::config(
                    "data.n",
                    format!("{} needs at least {min} samples", d.generator.name()),
                ));
            }
            if d.n_train.is_some_and(|t| t == 0 || t > d.n) {
                return Err(Error::config("data.n_train", format!("must lie in 1..={}", d.n)));
            }
        }
        let net = &self.network;
        if net.width == 0 {
            return Err(Error::config("network.width", "must be at least 1"));
        }
        if net.blocks == 0 {
            return Err(Error::config("network.blocks", "must be at least 1"));
        }
        if !(net.final_time > 0.0 && net.final_time.is_finite()) {
            return Err(Error::config("network.final_time", "must be positive and finite"));
        }
        for (name, beta) in [("network.beta1", net.beta1), ("network.beta2", net.beta2)] {
            if !(beta >= 0.0 && beta.is_finite()) {
                return Err(Error::config(name, "must be a finite nonnegative number"));
            }
        }
        self.solver.validate().map_err(|e| match e {
            Error::InvalidConfig(m) => Error::config("solver", m),
            other => other,
        })?;
        let stop = &self.stop;
        if !(stop.accuracy > 0.0 && stop.accuracy <= 1.0) {
            return Err(Error::config("stop.accuracy", "must lie in (0, 1]"));
        }
        if !(stop.work_max >= 0.0) {
            return Err(Error::config("stop.work_max", "must be nonnegative"));
        }
        if self.replication.seeds.is_empty() {
            return Err(Error::config("replication.seeds", "need at least one seed"));
        }
        Ok(())
    }
}

/// Best-effort dotted key path of a TOML parse error.
fn toml_path(text: &str, err: &toml::de::Error) -> String {
    let start = err.span().map_or(text.len(), |s| s.start.min(text.len()));
    let mut table = String::new();
    // Errors inside flattened tables point at the table header itself.
    let header_end = text[start..].find('\n').map_or(text.len(), |i| start + i);
    for line in text[..header_end].lines() {
        let t = line.trim();
        if t.starts_with('[') && t.ends_with(']') {
            table = t.trim_matches(|c| c == '[' || c == ']').trim().to_string();
        }
    }
    let key: String = match err.message().strip_prefix("unknown field `") {
        Some(rest) => rest.chars().take_while(|&c| c != '`').collect(),
        None => text[start..]
            .chars()
            .take_while(|c| c.is_alphanumeric() || *c == '_')
            .collect(),
    };
    match (table.is_empty(), key.is_empty()) {
        (true, _) => key,
        (false, true) => table,
        (false, false) => format!("{table}.{key}"),
    }
}

/// First record of a log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub schema_version: u32,
    /// Display name, e.g. `RMTR-F` or `DSS-TR`.
    pub solver: String,
    pub levels: usize,
    pub seed: u64,
    pub data_seed: u64,
    pub dataset: String,
    pub n_train: usize,
    pub blocks: Vec<usize>,
    pub config: ExperimentConfig,
}

/// Last record of a log. Wall time is kept out so logs compare bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub termination: Termination,
    pub epochs: usize,
    pub level: usize,
    pub work: f64,
    pub hvp_work: f64,
    pub value_work: f64,
    pub monitor_value_calls: u64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub train_acc: Option<f64>,
    pub val_acc: Option<f64>,
    pub prolongations: Vec<Prolongation>,
    pub max_coherence: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
struct LogRow<'a> {
    schema_version: u32,
    #[serde(flatten)]
    row: &'a EpochRow,
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub header: RunHeader,
    pub rows: Vec<EpochRow>,
    pub summary: RunSummary,
    pub ledger_json: String,
    pub wall_time_s: f64,
}

impl RunRecord {
    /// Converged for classification; any orderly stop counts for regression.
    pub fn succeeded(&self) -> bool {
        match self.summary.termination {
            Termination::Converged => true,
            Termination::Budget | Termination::EpochLimit => self.summary.train_acc.is_none(),
            Termination::Diverged => false,
        }
    }

    /// The JSON Lines log: header, one row per epoch, summary.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for row in &self.rows {
            out.push_str(&serde_json::to_string(&LogRow {
                schema_version: LOG_SCHEMA_VERSION,
                row,
            })?);
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&self.summary)?);
        out.push('\n');
        Ok(out)
    }
}

/// Runs `cfg` with initialization seed `seed`.
///
/// `on_row` observes rows as they are produced (for streaming logs).
pub fn run_experiment_with(cfg: &ExperimentConfig, seed: u64, on_row: &mut dyn FnMut(&EpochRow)) -> Result<RunRecord> {
    cfg.validate()?;
    let clock = Instant::now();
    let data = cfg.data.prepare()?;
    let n_in = data.train.features().nrows();
    let n_out = data.train.targets().nrows();
    let base = cfg.network.config(n_in, n_out, data.task);
    let mut effective = cfg.clone();
    effective.seed = seed;
    let blocks = {
        let h = crate::hierarchy::build_hierarchy(&base, cfg.solver.levels, cfg.solver.refinement)?;
        (1..=h.num_levels()).map(|l| h.level(l).cfg.blocks).collect()
    };
    let header = RunHeader {
        schema_version: LOG_SCHEMA_VERSION,
        solver: cfg.solver.label().to_string(),
        levels: cfg.solver.levels,
        seed,
        data_seed: cfg.data.seed,
        dataset: match &cfg.data.path {
            Some(p) => p.display().to_string(),
            None => cfg.data.generator.name().to_string(),
        },
        n_train: data.train.len(),
        blocks,
        config: effective,
    };
    let outcome = train(&cfg.solver, &cfg.stop, &base, &data, seed, on_row)?;
    let last = outcome
        .last()
        .cloned()
        .ok_or_else(|| Error::config("stop.epoch_max", "run produced no epochs"))?;
    let totals = outcome.ledger.totals();
    let summary = RunSummary {
        schema_version: LOG_SCHEMA_VERSION,
        termination: outcome.termination,
        epochs: outcome.rows.len(),
        level: outcome.level,
        work: totals.work,
        hvp_work: totals.hvp_work,
        value_work: totals.value_work,
        monitor_value_calls: outcome.ledger.monitor().value_calls,
        train_loss: last.train_loss,
        val_loss: last.val_loss,
        train_acc: last.train_acc,
        val_acc: last.val_acc,
        prolongations: outcome.prolongations.clone(),
        max_coherence: outcome.coherence.iter().map(|c| c.1).reduce(f64::max),
    };
    Ok(RunRecord {
        header,
        rows: outcome.rows,
        summary,
        ledger_json: outcome.ledger.to_json()?,
        wall_time_s: clock.elapsed().as_secs_f64(),
    })
}

pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<RunRecord> {
    run_experiment_with(cfg, seed, &mut |_| {})
}

/// Median, mean and population standard deviation of one column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub count: usize,
    pub median: f64,
    pub mean: f64,
    pub std: f64,
    /// `std / mean` in percent.
    pub rel_std_pct: f64,
}

impl Stats {
    /// `None` for an empty sample.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len() % 2 == 1 {
            sorted[mid]
        } else {
            0.5 * (sorted[mid - 1] + sorted[mid])
        };
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let rel_std_pct = if mean != 0.0 { 100.0 * std / mean.abs() } else { 0.0 };
        Some(Self {
            count: values.len(),
            median,
            mean,
            std,
            rel_std_pct,
        })
    }
}

/// One seed of a replication: its record, or the error that ended it.
pub type SeedOutcome = (u64, std::result::Result<RunRecord, String>);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicationSummary {
    pub solver: String,
    pub levels: usize,
    pub seeds: Vec<u64>,
    pub succeeded: usize,
    pub failed: usize,
    pub work: Option<Stats>,
    pub train_acc: Option<Stats>,
    pub val_acc: Option<Stats>,
    pub train_loss: Option<Stats>,
}

impl ReplicationSummary {
    /// Statistics over the successful runs; the rest are only counted.
    pub fn from_outcomes(solver: &str, levels: usize, outcomes: &[SeedOutcome]) -> Self {
        let ok: Vec<&RunRecord> = outcomes
            .iter()
            .filter_map(|(_, r)| r.as_ref().ok())
            .filter(|r| r.succeeded())
            .collect();
        let column = |f: &dyn Fn(&RunRecord) -> Option<f64>| {
            let v: Vec<f64> = ok.iter().filter_map(|r| f(r)).collect();
            Stats::of(&v)
        };
        Self {
            solver: solver.to_string(),
            levels,
            seeds: outcomes.iter().map(|o| o.0).collect(),
            succeeded: ok.len(),
            failed: outcomes.len() - ok.len(),
            work: column(&|r| Some(r.summary.work)),
            train_acc: column(&|r| r.summary.train_acc),
            val_acc: column(&|r| r.summary.val_acc),
            train_loss: column(&|r| Some(r.summary.train_loss)),
        }
    }

    /// CSV with one line per statistic column.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("solver,levels,metric,succeeded,failed,median,mean,std,rel_std_pct\n");
        for (name, stats) in [
            ("work", &self.work),
            ("train_acc", &self.train_acc),
            ("val_acc", &self.val_acc),
            ("train_loss", &self.train_loss),
        ] {
            let cells = match stats {
                Some(s) => format!("{},{},{},{}", s.median, s.mean, s.std, s.rel_std_pct),
                None => ",,,".to_string(),
            };
            out.push_str(&format!(
                "{},{},{name},{},{},{cells}\n",
                self.solver, self.levels, self.succeeded, self.failed
            ));
        }
        out
    }
}

/// Runs every seed in turn.
pub fn replicate(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<(ReplicationSummary, Vec<SeedOutcome>)> {
    if seeds.is_empty() {
        return Err(Error::config("replication.seeds", "need at least one seed"));
    }
    cfg.validate()?;
    let outcomes: Vec<SeedOutcome> = seeds
        .iter()
        .map(|&s| (s, run_experiment(cfg, s).map_err(|e| e.to_string())))
        .collect();
    let summary = ReplicationSummary::from_outcomes(cfg.solver.label(), cfg.solver.levels, &outcomes);
    Ok((summary, outcomes))
}

/// Header of the per-run CSV table.
pub const RUN_CSV_HEADER: &str =
    "solver,levels,seed,termination,epochs,work,hvp_work,value_work,train_loss,train_acc,val_acc,wall_time_s";

/// One CSV line (no newline) matching [`RUN_CSV_HEADER`].
pub fn run_csv_line(r: &RunRecord) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let s = &r.summary;
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{:.3}",
        r.header.solver,
        r.header.levels,
        r.header.seed,
        s.termination.label(),
        s.epochs,
        s.work,
        s.hvp_work,
        s.value_work,
        s.train_loss,
        opt(s.train_acc),
        opt(s.val_acc),
        r.wall_time_s
    )
}

/// Writes `run_seed<N>.jsonl` and `ledger_seed<N>.json` into `dir`.
pub fn write_run_files(dir: &Path, record: &RunRecord) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let seed = record.header.seed;
    let mut log = BufWriter::new(File::create(dir.join(format!("run_seed{seed}.jsonl")))?);
    log.write_all(record.to_jsonl()?.as_bytes())?;
    log.flush()?;
    std::fs::write(dir.join(format!("ledger_seed{seed}.json")), &record.ledger_json)?;
    Ok(())
}
