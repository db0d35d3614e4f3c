//! Experiment orchestration: per-task tuning, the measured transfer-gain
//! matrix, predictor evaluation and the two checkpoint studies.

mod studies;
mod train;

use rayon::prelude::*;

pub use studies::{
    correlation_study, datasize_matrix, default_variants, early_vs_best_study, evaluate_predictor,
    families, tupate_embeddings, tupate_matrix, CorrelationReport, EarlyVsBest, RunRecord, Which,
};
pub use train::{
    base_model, init_rng, shuffle_rng, test_accuracy, train_task, Checkpoint, TrainConfig,
    TrainOutcome, Tuned,
};

use crate::model::ModelParams;
use crate::rank::{GainMatrix, ScoreMatrix};
use crate::tasks::Suite;
use crate::{Error, Result};

/// Measured transfer gains together with the accuracies they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferResult {
    pub gains: GainMatrix,
    /// Test accuracy after tuning on `t` from `s`'s checkpoint.
    pub transfer_accuracy: ScoreMatrix,
    /// Test accuracy of direct tuning on each target, in suite order.
    pub direct_accuracy: Vec<f64>,
}

/// `gains[s][t] = acc(t | start from s) − acc(t | fresh start)`, both tuned
/// with `cfg` on `targets` and scored on the target test split. `sources[i]`
/// is the trained checkpoint of `targets.tasks[i]` (possibly trained on other
/// data, e.g. the full split when targets are limited). Each job depends only
/// on the seed and its (source, target) pair, so the parallel and sequential
/// schedules give identical matrices.
pub fn transfer_gain_matrix(
    base: &ModelParams,
    sources: &[Checkpoint],
    targets: &Suite,
    cfg: &TrainConfig,
    parallel: bool,
) -> Result<TransferResult> {
    let ids = targets.ids();
    if ids.len() < 2 {
        return Err(Error::Config("transfer needs at least two tasks".into()));
    }
    if sources.len() != ids.len() || sources.iter().zip(&ids).any(|(c, id)| c.task != *id) {
        return Err(Error::Alignment(
            "source checkpoints do not match the suite's tasks".into(),
        ));
    }
    let k = ids.len();
    let direct_job = |t: usize| -> Result<f64> {
        let task = &targets.tasks[t];
        let out = train_task(base, &task.spec.id, &task.data, cfg, None)?;
        test_accuracy(base, &out.best, &task.data)
    };
    let pair_job = |(s, t): (usize, usize)| -> Result<f64> {
        let task = &targets.tasks[t];
        let out = train_task(base, &task.spec.id, &task.data, cfg, Some(&sources[s]))?;
        test_accuracy(base, &out.best, &task.data)
    };
    let pairs: Vec<(usize, usize)> = (0..k)
        .flat_map(|s| (0..k).filter(move |&t| t != s).map(move |t| (s, t)))
        .collect();
    let (direct, transfer): (Vec<f64>, Vec<f64>) = if parallel {
        let d = (0..k)
            .into_par_iter()
            .map(direct_job)
            .collect::<Result<Vec<_>>>()?;
        let p = pairs
            .par_iter()
            .map(|&p| pair_job(p))
            .collect::<Result<Vec<_>>>()?;
        (d, p)
    } else {
        let d = (0..k).map(direct_job).collect::<Result<Vec<_>>>()?;
        let p = pairs
            .iter()
            .map(|&p| pair_job(p))
            .collect::<Result<Vec<_>>>()?;
        (d, p)
    };
    let mut acc = vec![0.0; k * k];
    for (&(s, t), a) in pairs.iter().zip(&transfer) {
        acc[s * k + t] = *a;
    }
    let transfer_accuracy = ScoreMatrix::from_fn(&ids, |s, t| Ok(acc[s * k + t]))?;
    let gains = ScoreMatrix::from_fn(&ids, |s, t| Ok(acc[s * k + t] - direct[t]))?;
    Ok(TransferResult {
        gains,
        transfer_accuracy,
        direct_accuracy: direct,
    })
}

/// Tunes every task of the suite.
pub fn train_suite(
    base: &ModelParams,
    suite: &Suite,
    cfg: &TrainConfig,
    parallel: bool,
) -> Result<Vec<TrainOutcome>> {
    let job = |t: &crate::tasks::Task| train_task(base, &t.spec.id, &t.data, cfg, None);
    if parallel {
        suite.tasks.par_iter().map(job).collect()
    } else {
        suite.tasks.iter().map(job).collect()
    }
}
