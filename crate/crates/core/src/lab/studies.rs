use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::train::{test_accuracy, train_task, TrainConfig, TrainOutcome};
use crate::embed::{datasize_score, tupate_embed, TaskEmbedding};
use crate::model::ModelParams;
use crate::rank::{
    all_candidates, in_class_candidates, pearson, similarity_matrix, GainMatrix, Grouping, Metrics,
    RankingReport, Regime, ScoreMatrix,
};
use crate::tasks::{Family, Suite};
use crate::{Error, Result};

pub fn families(suite: &Suite) -> HashMap<String, Family> {
    suite
        .tasks
        .iter()
        .map(|t| (t.spec.id.clone(), t.spec.family))
        .collect()
}

/// Ranks sources for every target of `gains` and scores the rankings. In-class
/// grouping keeps only sources from the target's family.
pub fn evaluate_predictor(
    name: &str,
    scores: &ScoreMatrix,
    gains: &GainMatrix,
    grouping: Grouping,
    families: &HashMap<String, Family>,
    regime: Regime,
) -> Result<RankingReport> {
    let cands = match grouping {
        Grouping::AllClass => all_candidates(gains),
        Grouping::InClass => in_class_candidates(gains, |id| families.get(id).copied())?,
    };
    if let Some(c) = cands.iter().find(|c| c.sources.is_empty()) {
        return Err(Error::Degenerate(format!(
            "target `{}` has no candidate sources",
            c.target
        )));
    }
    RankingReport::build(name, regime, grouping, scores, gains, &cands)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Which {
    Early,
    Best,
}

pub fn tupate_embeddings(outcomes: &[TrainOutcome], which: Which) -> Result<Vec<TaskEmbedding>> {
    outcomes
        .iter()
        .map(|o| {
            let ck = match which {
                Which::Early => &o.early,
                Which::Best => &o.best,
            };
            let adapter = ck
                .adapter()
                .ok_or_else(|| Error::Config(format!("`{}` has no adapter checkpoint", ck.task)))?;
            Ok(tupate_embed(adapter, None, &ck.task)?.embedding)
        })
        .collect()
}

/// Cosine similarity of the tuned-parameter embeddings of every task pair.
pub fn tupate_matrix(outcomes: &[TrainOutcome], which: Which) -> Result<ScoreMatrix> {
    similarity_matrix(&tupate_embeddings(outcomes, which)?)
}

/// `score[s][t]` = training-set size of `s`.
pub fn datasize_matrix(suite: &Suite) -> Result<ScoreMatrix> {
    let ids = suite.ids();
    ScoreMatrix::from_fn(&ids, |s, _| Ok(datasize_score(&suite.tasks[s].data.train)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyVsBest {
    pub early: Metrics,
    pub best: Metrics,
}

/// Early and best-validation embeddings scored against the same gains.
pub fn early_vs_best_study(
    outcomes: &[TrainOutcome],
    gains: &GainMatrix,
    grouping: Grouping,
    families: &HashMap<String, Family>,
    regime: Regime,
) -> Result<EarlyVsBest> {
    let eval = |which| -> Result<Metrics> {
        let scores = tupate_matrix(outcomes, which)?;
        Ok(evaluate_predictor("tupate", &scores, gains, grouping, families, regime)?.metrics)
    };
    Ok(EarlyVsBest {
        early: eval(Which::Early)?,
        best: eval(Which::Best)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub lr: f64,
    pub seed: u64,
    /// Mean test accuracy over the suite's tasks.
    pub mean_accuracy: f64,
    pub rho: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub pearson: f64,
    /// Metrics of the most accurate run minus those of the least accurate.
    pub delta_rho: f64,
    pub delta_ndcg: f64,
    pub runs: Vec<RunRecord>,
}

/// `n` learning-rate/seed combinations: grid points in turn, seeds counting
/// up from the configured one.
pub fn default_variants(cfg: &TrainConfig, n: usize) -> Vec<(f64, u64)> {
    (0..n)
        .map(|i| (cfg.lr_grid[i % cfg.lr_grid.len()], cfg.seed + i as u64))
        .collect()
}

/// Trains the suite once per variant and relates mean task accuracy to the
/// ranking quality of the resulting embeddings.
pub fn correlation_study(
    base: &ModelParams,
    suite: &Suite,
    gains: &GainMatrix,
    cfg: &TrainConfig,
    variants: &[(f64, u64)],
    grouping: Grouping,
) -> Result<CorrelationReport> {
    if variants.len() < 2 {
        return Err(Error::Config(
            "correlation study needs at least two runs".into(),
        ));
    }
    let fam = families(suite);
    let mut runs = Vec::with_capacity(variants.len());
    for &(lr, seed) in variants {
        let vcfg = TrainConfig {
            lr_grid: vec![lr],
            seed,
            ..cfg.clone()
        };
        let mut outcomes = Vec::with_capacity(suite.tasks.len());
        let mut acc = 0.0;
        for t in &suite.tasks {
            let o = train_task(base, &t.spec.id, &t.data, &vcfg, None)?;
            acc += test_accuracy(base, &o.best, &t.data)?;
            outcomes.push(o);
        }
        let scores = tupate_matrix(&outcomes, Which::Best)?;
        let report =
            evaluate_predictor("tupate", &scores, gains, grouping, &fam, Regime::FullToFull)?;
        runs.push(RunRecord {
            lr,
            seed,
            mean_accuracy: acc / suite.tasks.len() as f64,
            rho: report.metrics.rho,
            ndcg: report.metrics.ndcg,
        });
    }
    let acc: Vec<f64> = runs.iter().map(|r| r.mean_accuracy).collect();
    let nd: Vec<f64> = runs.iter().map(|r| r.ndcg).collect();
    let pearson = pearson(&nd, &acc)?;
    // first occurrence wins ties, so the choice is reproducible
    let pick = |better: fn(f64, f64) -> bool| {
        let mut i = 0;
        for j in 1..runs.len() {
            if better(runs[j].mean_accuracy, runs[i].mean_accuracy) {
                i = j;
            }
        }
        i
    };
    let (hi, lo) = (pick(|a, b| a > b), pick(|a, b| a < b));
    Ok(CorrelationReport {
        pearson,
        delta_rho: runs[hi].rho - runs[lo].rho,
        delta_ndcg: runs[hi].ndcg - runs[lo].ndcg,
        runs,
    })
}
