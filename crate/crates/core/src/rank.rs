//! Source ranking by similarity and ranking quality against measured gains.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embed::TaskEmbedding;
use crate::numerics::Real;
use crate::{Error, Result};

/// `K_src × K_tgt` matrix indexed by task id. A cell with the same source and
/// target id is never read.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    sources: Vec<String>,
    targets: Vec<String>,
    /// Row-major `[source][target]`.
    values: Vec<f64>,
}

/// Measured `acc(t | s → t) − acc(t | direct)`, in the same layout.
pub type GainMatrix = ScoreMatrix;

fn check_unique(ids: &[String], what: &str) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::Alignment(format!("duplicate {what} id `{id}`")));
        }
    }
    Ok(())
}

impl ScoreMatrix {
    pub fn new(sources: Vec<String>, targets: Vec<String>, values: Vec<f64>) -> Result<Self> {
        check_unique(&sources, "source")?;
        check_unique(&targets, "target")?;
        if values.len() != sources.len() * targets.len() {
            return Err(Error::shape(format!(
                "{} values for {}×{} matrix",
                values.len(),
                sources.len(),
                targets.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            let (s, t) = (i / targets.len(), i % targets.len());
            return Err(Error::NonFinite(format!(
                "cell ({}, {})",
                sources[s], targets[t]
            )));
        }
        Ok(Self {
            sources,
            targets,
            values,
        })
    }

    /// Square matrix over `ids` with `f(source, target)`; the diagonal is 0.
    pub fn from_fn(ids: &[String], mut f: impl FnMut(usize, usize) -> Result<f64>) -> Result<Self> {
        let mut values = Vec::with_capacity(ids.len() * ids.len());
        for s in 0..ids.len() {
            for t in 0..ids.len() {
                values.push(if s == t { 0.0 } else { f(s, t)? });
            }
        }
        Self::new(ids.to_vec(), ids.to_vec(), values)
    }

    pub fn sources(&self) -> &[String] {
        &self.sources
    }

    pub fn targets(&self) -> &[String] {
        &self.targets
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, s: usize, t: usize) -> f64 {
        self.values[s * self.targets.len() + t]
    }

    pub fn get(&self, source: &str, target: &str) -> Option<f64> {
        let s = self.sources.iter().position(|x| x == source)?;
        let t = self.targets.iter().position(|x| x == target)?;
        Some(self.at(s, t))
    }

    fn lookup(&self, source: &str, target: &str) -> Result<f64> {
        self.get(source, target).ok_or_else(|| {
            Error::Alignment(format!("no score for source `{source}`, target `{target}`"))
        })
    }

    /// Header row `source,<target ids>`, then one row per source. Cells use
    /// the shortest decimal form that round-trips.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header = std::iter::once("source").chain(self.targets.iter().map(String::as_str));
        w.write_record(header).map_err(csv_err)?;
        for (s, id) in self.sources.iter().enumerate() {
            let mut row = vec![id.clone()];
            row.extend((0..self.targets.len()).map(|t| self.at(s, t).to_string()));
            w.write_record(&row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_reader(text.as_bytes());
        let mut rows = r.records();
        let header = rows
            .next()
            .ok_or_else(|| Error::Format("empty matrix file".into()))?
            .map_err(csv_err)?;
        let targets: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut sources = Vec::new();
        let mut values = Vec::new();
        for (line, rec) in rows.enumerate() {
            let rec = rec.map_err(csv_err)?;
            if rec.len() != targets.len() + 1 {
                return Err(Error::Format(format!(
                    "row {} has {} cells, expected {}",
                    line + 2,
                    rec.len(),
                    targets.len() + 1
                )));
            }
            sources.push(rec[0].to_string());
            for cell in rec.iter().skip(1) {
                let v: f64 = cell.trim().parse().map_err(|_| {
                    Error::Format(format!("row {}: `{cell}` is not a number", line + 2))
                })?;
                values.push(v);
            }
        }
        Self::new(sources, targets, values)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// `a·b / (‖a‖‖b‖)`, accumulated in `f64`.
pub fn cosine<T: Real>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "embedding dims differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x.to_f64(), y.to_f64());
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::Degenerate("cosine of a zero vector".into()));
    }
    Ok((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

/// Cosine similarity between every pair of embeddings; sources and targets are
/// the same task set.
pub fn similarity_matrix(embeddings: &[TaskEmbedding]) -> Result<ScoreMatrix> {
    if let Some(first) = embeddings.first() {
        if let Some(other) = embeddings.iter().find(|e| e.dim() != first.dim()) {
            return Err(Error::shape(format!(
                "embedding dims differ: `{}` has {}, `{}` has {}",
                first.source,
                first.dim(),
                other.source,
                other.dim()
            )));
        }
    }
    let ids: Vec<String> = embeddings.iter().map(|e| e.source.clone()).collect();
    ScoreMatrix::from_fn(&ids, |s, t| {
        cosine(embeddings[s].vector.data(), embeddings[t].vector.data())
    })
}

/// Descending score; equal scores fall back to ascending id.
fn by_score_then_id(a: &(String, f64), b: &(String, f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.0.cmp(&b.0))
}

/// Orders scored candidates best first; ties go to the smaller id.
pub fn order_candidates(mut scored: Vec<(String, f64)>) -> Result<Vec<(String, f64)>> {
    if scored.is_empty() {
        return Err(Error::Degenerate("no candidate sources".into()));
    }
    scored.sort_by(by_score_then_id);
    Ok(scored)
}

/// Sources ordered by cosine similarity to `target`. Any source with the
/// target's id is skipped.
pub fn rank_sources(
    target: &TaskEmbedding,
    sources: &[TaskEmbedding],
) -> Result<Vec<(String, f64)>> {
    let mut scored = Vec::with_capacity(sources.len());
    for s in sources.iter().filter(|s| s.source != target.source) {
        if s.dim() != target.dim() {
            return Err(Error::shape(format!(
                "embedding dims differ: target `{}` has {}, source `{}` has {}",
                target.source,
                target.dim(),
                s.source,
                s.dim()
            )));
        }
        scored.push((
            s.source.clone(),
            cosine(target.vector.data(), s.vector.data())?,
        ));
    }
    order_candidates(scored)
}

/// Elementwise mean of matrices over identical id lists.
pub fn ensemble(matrices: &[ScoreMatrix]) -> Result<ScoreMatrix> {
    let first = matrices
        .first()
        .ok_or_else(|| Error::Degenerate("nothing to ensemble".into()))?;
    for m in &matrices[1..] {
        if m.sources != first.sources || m.targets != first.targets {
            return Err(Error::Alignment(
                "ensemble inputs have different ids".into(),
            ));
        }
    }
    let n = matrices.len() as f64;
    let values = (0..first.values.len())
        .map(|i| {
            let x = first.values[i];
            // summing n copies of x and dividing can round away from x
            if matrices.iter().all(|m| m.values[i] == x) {
                x
            } else {
                matrices.iter().map(|m| m.values[i]).sum::<f64>() / n
            }
        })
        .collect();
    ScoreMatrix::new(first.sources.clone(), first.targets.clone(), values)
}

/// Candidate sources for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Grouping {
    /// Only sources from the target's family.
    InClass,
    /// Every other task.
    AllClass,
}

impl fmt::Display for Grouping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Grouping::InClass => "in-class",
            Grouping::AllClass => "all-class",
        })
    }
}

impl FromStr for Grouping {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in-class" => Ok(Grouping::InClass),
            "all-class" => Ok(Grouping::AllClass),
            other => Err(Error::Format(format!("unknown grouping `{other}`"))),
        }
    }
}

/// Per-target evaluation input: the target id and its eligible sources.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetCandidates {
    pub target: String,
    pub sources: Vec<String>,
}

/// Every gain-matrix target against every other gain-matrix source.
pub fn all_candidates(gains: &GainMatrix) -> Vec<TargetCandidates> {
    gains
        .targets
        .iter()
        .map(|t| TargetCandidates {
            target: t.clone(),
            sources: gains.sources.iter().filter(|s| *s != t).cloned().collect(),
        })
        .collect()
}

/// Candidates whose family (given by `family_of`) matches the target's.
pub fn in_class_candidates<F: Eq>(
    gains: &GainMatrix,
    family_of: impl Fn(&str) -> Option<F>,
) -> Result<Vec<TargetCandidates>> {
    let mut out = Vec::new();
    for t in &gains.targets {
        let ft = family_of(t).ok_or_else(|| Error::Alignment(format!("no family for `{t}`")))?;
        let mut sources = Vec::new();
        for s in gains.sources.iter().filter(|s| *s != t) {
            let fs =
                family_of(s).ok_or_else(|| Error::Alignment(format!("no family for `{s}`")))?;
            if fs == ft {
                sources.push(s.clone());
            }
        }
        out.push(TargetCandidates {
            target: t.clone(),
            sources,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRanking {
    pub target: String,
    /// Candidate sources, best predicted first.
    pub order: Vec<String>,
    pub scores: Vec<f64>,
    /// Source with the largest measured gain (smallest id on ties).
    pub best_source: String,
    /// 1-based predicted position of `best_source`.
    pub best_rank: usize,
    pub ndcg: f64,
}

/// Ranking quality of one target: predicted order, rank of the truly best
/// source, and NDCG.
pub fn evaluate_target(
    scores: &ScoreMatrix,
    gains: &GainMatrix,
    c: &TargetCandidates,
) -> Result<TargetRanking> {
    let scored = c
        .sources
        .iter()
        .map(|s| Ok((s.clone(), scores.lookup(s, &c.target)?)))
        .collect::<Result<Vec<_>>>()?;
    let ordered = order_candidates(scored).map_err(|_| {
        Error::Degenerate(format!("target `{}` has no candidate sources", c.target))
    })?;
    let gain = |s: &str| gains.lookup(s, &c.target);
    let mut best: Option<(String, f64)> = None;
    for s in &c.sources {
        let g = gain(s)?;
        let better = match &best {
            None => true,
            Some((id, bg)) => g > *bg || (g == *bg && s < id),
        };
        if better {
            best = Some((s.clone(), g));
        }
    }
    let best_source = best.expect("nonempty candidates").0;
    let best_rank = ordered
        .iter()
        .position(|(s, _)| *s == best_source)
        .expect("best is a candidate")
        + 1;
    let predicted_gains: Vec<f64> = ordered
        .iter()
        .map(|(s, _)| gain(s))
        .collect::<Result<_>>()?;
    Ok(TargetRanking {
        target: c.target.clone(),
        order: ordered.iter().map(|(s, _)| s.clone()).collect(),
        scores: ordered.iter().map(|(_, v)| *v).collect(),
        best_source,
        best_rank,
        ndcg: ndcg_of_order(&predicted_gains),
    })
}

/// NDCG of gains listed in predicted order. Relevance is min-max scaled to
/// `[0, 1]` with gain `2^rel − 1` and discount `log2(i + 1)`; constant gains
/// score 1.
pub fn ndcg_of_order(gains_in_order: &[f64]) -> f64 {
    let lo = gains_in_order.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = gains_in_order
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if gains_in_order.len() < 2 || hi == lo {
        return 1.0;
    }
    let rel: Vec<f64> = gains_in_order
        .iter()
        .map(|g| (g - lo) / (hi - lo))
        .collect();
    let dcg = dcg(&rel);
    let mut ideal = rel;
    ideal.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
    dcg / self::dcg(&ideal)
}

fn dcg(rel: &[f64]) -> f64 {
    rel.iter()
        .enumerate()
        .map(|(i, r)| (r.exp2() - 1.0) / ((i + 2) as f64).log2())
        .sum()
}

fn per_target(
    scores: &ScoreMatrix,
    gains: &GainMatrix,
    cands: &[TargetCandidates],
) -> Result<Vec<TargetRanking>> {
    if cands.is_empty() {
        return Err(Error::Degenerate("no targets".into()));
    }
    cands
        .iter()
        .map(|c| evaluate_target(scores, gains, c))
        .collect()
}

/// Mean over targets of the predicted 1-based position of the best source.
pub fn avg_best_rank(
    scores: &ScoreMatrix,
    gains: &GainMatrix,
    cands: &[TargetCandidates],
) -> Result<f64> {
    let r = per_target(scores, gains, cands)?;
    Ok(r.iter().map(|t| t.best_rank as f64).sum::<f64>() / r.len() as f64)
}

/// Mean over targets of NDCG, on `[0, 1]`.
pub fn ndcg(scores: &ScoreMatrix, gains: &GainMatrix, cands: &[TargetCandidates]) -> Result<f64> {
    let r = per_target(scores, gains, cands)?;
    Ok(r.iter().map(|t| t.ndcg).sum::<f64>() / r.len() as f64)
}

/// Expected NDCG of a predictor whose order is uniformly random, averaged over
/// targets. Each item lands at every position with probability `1/K`, so
/// `E[DCG] = Σ_i (2^rel_i − 1) · mean_p 1/log2(p + 1)`.
pub fn random_ndcg(gains: &GainMatrix, cands: &[TargetCandidates]) -> Result<f64> {
    if cands.is_empty() {
        return Err(Error::Degenerate("no targets".into()));
    }
    let mut total = 0.0;
    for c in cands {
        if c.sources.is_empty() {
            return Err(Error::Degenerate(format!(
                "target `{}` has no candidate sources",
                c.target
            )));
        }
        let g: Vec<f64> = c
            .sources
            .iter()
            .map(|s| gains.lookup(s, &c.target))
            .collect::<Result<_>>()?;
        let lo = g.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if g.len() < 2 || hi == lo {
            total += 1.0;
            continue;
        }
        let mut rel: Vec<f64> = g.iter().map(|x| (x - lo) / (hi - lo)).collect();
        let k = rel.len() as f64;
        let mean_discount = (0..rel.len())
            .map(|i| 1.0 / ((i + 2) as f64).log2())
            .sum::<f64>()
            / k;
        let expected = rel.iter().map(|r| r.exp2() - 1.0).sum::<f64>() * mean_discount;
        rel.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
        total += expected / dcg(&rel);
    }
    Ok(total / cands.len() as f64)
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape(format!(
            "pearson inputs of length {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::Degenerate(
            "pearson needs at least two points".into(),
        ));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Which data regimes produced the embeddings and the gains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    FullToFull,
    FullToLimited,
    LimitedToLimited,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::FullToFull => "full-to-full",
            Regime::FullToLimited => "full-to-limited",
            Regime::LimitedToLimited => "limited-to-limited",
        })
    }
}

impl FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full-to-full" => Ok(Regime::FullToFull),
            "full-to-limited" => Ok(Regime::FullToLimited),
            "limited-to-limited" => Ok(Regime::LimitedToLimited),
            other => Err(Error::Format(format!("unknown regime `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rho: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub predictor: String,
    pub regime: Regime,
    pub grouping: Grouping,
    pub metrics: Metrics,
    pub targets: Vec<TargetRanking>,
}

impl RankingReport {
    pub fn build(
        predictor: &str,
        regime: Regime,
        grouping: Grouping,
        scores: &ScoreMatrix,
        gains: &GainMatrix,
        cands: &[TargetCandidates],
    ) -> Result<Self> {
        let targets = per_target(scores, gains, cands)?;
        let n = targets.len() as f64;
        let metrics = Metrics {
            rho: targets.iter().map(|t| t.best_rank as f64).sum::<f64>() / n,
            ndcg: targets.iter().map(|t| t.ndcg).sum::<f64>() / n,
        };
        Ok(Self {
            predictor: predictor.to_string(),
            regime,
            grouping,
            metrics,
            targets,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Predicted source orders without measured gains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedOrder {
    pub target: String,
    pub order: Vec<String>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub predictor: String,
    pub targets: Vec<PredictedOrder>,
}

impl Predictions {
    /// Every target of `scores` against every other source.
    pub fn from_scores(predictor: &str, scores: &ScoreMatrix) -> Result<Self> {
        let targets = scores
            .targets
            .iter()
            .map(|t| {
                let scored = scores
                    .sources
                    .iter()
                    .filter(|s| *s != t)
                    .map(|s| {
                        (
                            s.clone(),
                            scores.lookup(s, t).expect("ids come from the matrix"),
                        )
                    })
                    .collect();
                let ordered = order_candidates(scored)?;
                Ok(PredictedOrder {
                    target: t.clone(),
                    order: ordered.iter().map(|(s, _)| s.clone()).collect(),
                    scores: ordered.iter().map(|(_, v)| *v).collect(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            predictor: predictor.to_string(),
            targets,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }
}
