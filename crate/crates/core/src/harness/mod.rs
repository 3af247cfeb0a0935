//! Experiment orchestration: configuration, training, evaluation,
//! checkpoints, and the ablation studies.

mod checkpoint;
mod config;
mod evaluate;
mod experiments;
mod train;

use std::path::Path;

pub use checkpoint::Checkpoint;
pub use config::{EvalConfig, ExperimentConfig, KdMode, ModelConfig, TeacherPaths, TrainConfig};
pub use evaluate::evaluate;
pub use experiments::{
    lambda_sweep, median, run_ablation_suite, seeds, spearman, AblationRow, AblationRowKind, AblationTable, Runner,
    SweepResult, SweepRow, TeacherKind, TeacherSet, DEFAULT_LAMBDAS,
};
pub use train::{train_with, LutAudit, StepLog, Teachers, TrainOutcome};

use crate::codec::write_file;
use crate::error::{Error, Result};
use crate::eval::MetricsReport;
use crate::oim::{LookupTable, OimConfig};
use crate::synthscene::{generate_dataset, DatasetSplit};

/// A finished run: trained checkpoint, metrics and training log.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub outcome: TrainOutcome,
    pub report: MetricsReport,
}

/// Trains and evaluates on an already generated dataset.
pub fn run(cfg: &ExperimentConfig, data: &DatasetSplit, teachers: &Teachers) -> Result<RunResult> {
    let outcome = train_with(cfg, data, teachers)?;
    let report = evaluate(&outcome.checkpoint.model, data, &cfg.inference, &cfg.eval)?;
    Ok(RunResult { outcome, report })
}

/// Generates the dataset, resolves teachers from the configured paths,
/// trains, evaluates, and writes `checkpoint.psck`, `metrics.csv`,
/// `train_log.csv` and `config.toml` into `out_dir`.
pub fn train(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunResult> {
    cfg.validate()?;
    let data = generate_dataset(&cfg.dataset)?;
    let teachers = Teachers::resolve(cfg)?;
    let result = run(cfg, &data, &teachers)?;
    write_run(cfg, &result, out_dir)?;
    Ok(result)
}

pub fn write_run(cfg: &ExperimentConfig, result: &RunResult, out_dir: &Path) -> Result<()> {
    result.outcome.checkpoint.save(&out_dir.join("checkpoint.psck"))?;
    write_file(&out_dir.join("metrics.csv"), result.report.to_csv().as_bytes())?;
    let mut log = String::from(StepLog::CSV_HEADER);
    log.push('\n');
    for e in &result.outcome.log {
        log.push_str(&e.csv_row());
        log.push('\n');
    }
    write_file(&out_dir.join("train_log.csv"), log.as_bytes())?;
    write_file(&out_dir.join("config.toml"), cfg.to_toml().as_bytes())
}

/// Writes the lookup table stored in a checkpoint.
pub fn export_lut(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    checkpoint.lut.export(path)
}

/// Reads a lookup-table file and checks it against a student's identity
/// configuration.
pub fn import_lut(path: &Path, student: &OimConfig) -> Result<LookupTable> {
    let lut = LookupTable::import(path)?;
    if lut.dim() != student.dim || lut.num_labeled() != student.num_labeled {
        return Err(Error::DimensionMismatch(format!(
            "{} holds a {}×{} table, student expects {}×{}",
            path.display(),
            lut.dim(),
            lut.num_labeled(),
            student.dim,
            student.num_labeled
        )));
    }
    Ok(lut)
}
