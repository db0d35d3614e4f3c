//! Synthetic classification tasks with controllable relatedness.
//!
//! Each task carries a latent vector `θ`. A suite-wide random projection maps
//! `θ` to one token distribution per class; sequences are drawn token by token
//! from the distribution of their label. Tasks in the same cluster share a
//! centroid, so their decision rules (and their tuned parameters) are close.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::model::Batch;
use crate::numerics::{Rng, Tensor};
use crate::{Error, Result};

/// Task family tag, the unit of in-class evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    A,
    B,
}

impl Family {
    pub fn for_cluster(cluster: usize) -> Self {
        if cluster.is_multiple_of(2) {
            Family::A
        } else {
            Family::B
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::A => "A",
            Family::B => "B",
        })
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" => Ok(Family::A),
            "B" => Ok(Family::B),
            other => Err(Error::Format(format!("unknown family `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub n_clusters: usize,
    pub tasks_per_cluster: usize,
    /// Standard deviation of a task's `θ` around its cluster centroid.
    pub cluster_spread: f64,
    /// Norm of every cluster centroid.
    pub centroid_radius: f64,
    /// Upper bound on the cosine between any two centroids.
    pub max_centroid_cosine: f64,
    pub task_dim: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub n_classes: usize,
    /// Scale of the class logits.
    pub signal: f64,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub min_bayes_accuracy: f64,
    pub bayes_samples: usize,
    pub max_retries: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            n_clusters: 2,
            tasks_per_cluster: 5,
            cluster_spread: 0.5,
            centroid_radius: 3.0,
            max_centroid_cosine: 0.0,
            task_dim: 8,
            vocab_size: 64,
            seq_len: 16,
            n_classes: 2,
            signal: 1.0,
            train_size: 2000,
            val_size: 200,
            test_size: 200,
            min_bayes_accuracy: 0.9,
            bayes_samples: 1000,
            max_retries: 200,
        }
    }
}

/// Default size of the Limited training regime.
pub const LIMITED_TRAIN_SIZE: usize = 100;

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters == 0 || self.tasks_per_cluster == 0 {
            return Err(Error::Config(
                "suite needs at least one cluster and task".into(),
            ));
        }
        if !self.cluster_spread.is_finite() || self.cluster_spread < 0.0 {
            return Err(Error::Config(
                "cluster spread must be a finite value ≥ 0".into(),
            ));
        }
        if self.task_dim == 0 || self.vocab_size < 2 || self.seq_len == 0 || self.n_classes < 2 {
            return Err(Error::Config("degenerate task dimensions".into()));
        }
        if self.train_size < self.n_classes || self.val_size == 0 || self.test_size == 0 {
            return Err(Error::Config("split sizes too small".into()));
        }
        Ok(())
    }

    pub fn n_tasks(&self) -> usize {
        self.n_clusters * self.tasks_per_cluster
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub id: String,
    pub cluster: usize,
    pub family: Family,
    pub theta: Tensor,
    /// `[n_classes × vocab]` token logits per class.
    pub class_logits: Tensor,
}

impl TaskSpec {
    /// Per-class token log-probabilities.
    pub fn class_log_probs(&self) -> Vec<Vec<f64>> {
        (0..self.class_logits.rows())
            .map(|c| log_softmax(self.class_logits.row(c)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub train: Batch,
    pub val: Batch,
    pub test: Batch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub spec: TaskSpec,
    pub data: TaskDataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Suite {
    pub config: SuiteConfig,
    pub seed: u64,
    pub tasks: Vec<Task>,
}

impl Suite {
    pub fn ids(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.spec.id.clone()).collect()
    }

    pub fn task(&self, id: &str) -> Option<&Task> {
        self.tasks.iter().find(|t| t.spec.id == id)
    }

    /// Same suite with every training split capped at `n` examples.
    pub fn limited(&self, n: usize, seed: u64) -> Result<Suite> {
        let mut out = self.clone();
        for t in &mut out.tasks {
            t.data = limit(&t.data, n, seed)?;
        }
        Ok(out)
    }
}

fn log_softmax(row: &[f32]) -> Vec<f64> {
    let max = row
        .iter()
        .map(|&v| v as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + row
            .iter()
            .map(|&v| (v as f64 - max).exp())
            .sum::<f64>()
            .ln();
    row.iter().map(|&v| v as f64 - lse).collect()
}

fn unit_direction(rng: &mut Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal(0.0, 1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

struct Projection {
    /// `[class][token][dim]`
    weights: Vec<f64>,
    n_classes: usize,
    vocab: usize,
    dim: usize,
}

impl Projection {
    fn new(cfg: &SuiteConfig, rng: &mut Rng) -> Self {
        let n = cfg.n_classes * cfg.vocab_size * cfg.task_dim;
        Self {
            weights: (0..n).map(|_| rng.normal(0.0, 1.0)).collect(),
            n_classes: cfg.n_classes,
            vocab: cfg.vocab_size,
            dim: cfg.task_dim,
        }
    }

    fn class_logits(&self, theta: &[f64], signal: f64) -> Tensor {
        let scale = signal / (self.dim as f64).sqrt();
        let mut out = Vec::with_capacity(self.n_classes * self.vocab);
        for c in 0..self.n_classes {
            for v in 0..self.vocab {
                let w = &self.weights[(c * self.vocab + v) * self.dim..][..self.dim];
                let z: f64 = w.iter().zip(theta).map(|(a, b)| a * b).sum();
                out.push((scale * z) as f32);
            }
        }
        Tensor::new(vec![self.n_classes, self.vocab], out).expect("logit dims")
    }
}

fn sample_sequence(rng: &mut Rng, probs: &[f64], len: usize) -> Vec<u32> {
    (0..len).map(|_| rng.categorical(probs) as u32).collect()
}

/// Accuracy of the exact likelihood-ratio classifier on fresh samples.
fn bayes_accuracy(class_logits: &Tensor, seq_len: usize, samples: usize, rng: &mut Rng) -> f64 {
    let logp: Vec<Vec<f64>> = (0..class_logits.rows())
        .map(|c| log_softmax(class_logits.row(c)))
        .collect();
    let probs: Vec<Vec<f64>> = logp
        .iter()
        .map(|r| r.iter().map(|v| v.exp()).collect())
        .collect();
    let n_classes = logp.len();
    let mut correct = 0;
    for i in 0..samples {
        let label = i % n_classes;
        let seq = sample_sequence(rng, &probs[label], seq_len);
        let scores: Vec<f64> = logp
            .iter()
            .map(|lp| seq.iter().map(|&t| lp[t as usize]).sum())
            .collect();
        if crate::model::argmax(&scores) == label {
            correct += 1;
        }
    }
    correct as f64 / samples as f64
}

fn gen_split(
    rng: &mut Rng,
    probs: &[Vec<f64>],
    n: usize,
    seq_len: usize,
    seen: &mut HashSet<Vec<u32>>,
    max_retries: usize,
) -> Result<Batch> {
    let n_classes = probs.len();
    let mut labels: Vec<u32> = (0..n).map(|i| (i % n_classes) as u32).collect();
    rng.shuffle(&mut labels);
    let mut tokens = Vec::with_capacity(n * seq_len);
    for &label in &labels {
        let mut attempt = 0;
        loop {
            let seq = sample_sequence(rng, &probs[label as usize], seq_len);
            if seen.insert(seq.clone()) {
                tokens.extend(seq);
                break;
            }
            attempt += 1;
            if attempt > max_retries {
                return Err(Error::Generation(
                    "could not draw enough distinct sequences".into(),
                ));
            }
        }
    }
    Batch::new(tokens, labels, seq_len)
}

/// Draw a suite. Ids are `t00`, `t01`, … in cluster-major order.
pub fn gen_suite(cfg: &SuiteConfig, seed: u64) -> Result<Suite> {
    cfg.validate()?;
    let root = Rng::new(seed);
    let projection = Projection::new(cfg, &mut root.fork_str("projection"));
    let mut check_rng = root.fork_str("bayes-check");

    let mut centroid_rng = root.fork_str("centroids");
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_clusters);
    let mut attempts = 0;
    while centroids.len() < cfg.n_clusters {
        attempts += 1;
        if attempts > cfg.max_retries * cfg.n_clusters.max(1) * 10 {
            return Err(Error::Generation(format!(
                "could not place {} separated centroids",
                cfg.n_clusters
            )));
        }
        let c: Vec<f64> = unit_direction(&mut centroid_rng, cfg.task_dim)
            .into_iter()
            .map(|x| x * cfg.centroid_radius)
            .collect();
        let separated = centroids.iter().all(|o| {
            let cos = c.iter().zip(o).map(|(a, b)| a * b).sum::<f64>()
                / (cfg.centroid_radius * cfg.centroid_radius);
            distance(&c, o) >= 2.0 * cfg.cluster_spread && cos <= cfg.max_centroid_cosine
        });
        if !separated {
            continue;
        }
        let logits = projection.class_logits(&c, cfg.signal);
        if bayes_accuracy(&logits, cfg.seq_len, cfg.bayes_samples, &mut check_rng)
            < cfg.min_bayes_accuracy
        {
            continue;
        }
        centroids.push(c);
    }

    let width = cfg.n_tasks().saturating_sub(1).to_string().len().max(2);
    let mut tasks = Vec::with_capacity(cfg.n_tasks());
    for (cluster, centroid) in centroids.iter().enumerate() {
        for j in 0..cfg.tasks_per_cluster {
            let index = cluster * cfg.tasks_per_cluster + j;
            let id = format!("t{index:0width$}");
            let mut task_rng = root.fork_str(&format!("task/{index}"));
            let mut accepted = None;
            for _ in 0..cfg.max_retries {
                let theta: Vec<f64> = centroid
                    .iter()
                    .map(|&c| c + task_rng.normal(0.0, cfg.cluster_spread))
                    .collect();
                let logits = projection.class_logits(&theta, cfg.signal);
                if bayes_accuracy(&logits, cfg.seq_len, cfg.bayes_samples, &mut check_rng)
                    >= cfg.min_bayes_accuracy
                {
                    accepted = Some((theta, logits));
                    break;
                }
            }
            let (theta, class_logits) = accepted.ok_or_else(|| {
                Error::Generation(format!("task {id} never reached the Bayes accuracy floor"))
            })?;
            let probs: Vec<Vec<f64>> = (0..cfg.n_classes)
                .map(|c| {
                    log_softmax(class_logits.row(c))
                        .into_iter()
                        .map(f64::exp)
                        .collect()
                })
                .collect();
            let mut data_rng = task_rng.fork_str("data");
            let mut seen = HashSet::new();
            let train = gen_split(
                &mut data_rng,
                &probs,
                cfg.train_size,
                cfg.seq_len,
                &mut seen,
                cfg.max_retries,
            )?;
            let val = gen_split(
                &mut data_rng,
                &probs,
                cfg.val_size,
                cfg.seq_len,
                &mut seen,
                cfg.max_retries,
            )?;
            let test = gen_split(
                &mut data_rng,
                &probs,
                cfg.test_size,
                cfg.seq_len,
                &mut seen,
                cfg.max_retries,
            )?;
            tasks.push(Task {
                spec: TaskSpec {
                    id,
                    cluster,
                    family: Family::for_cluster(cluster),
                    theta: Tensor::vector(theta.iter().map(|&x| x as f32).collect()),
                    class_logits,
                },
                data: TaskDataset { train, val, test },
            });
        }
    }
    Ok(Suite {
        config: cfg.clone(),
        seed,
        tasks,
    })
}

/// Label-stratified subsample of the training split; validation and test are
/// untouched. Selected examples keep their original order.
pub fn limit(data: &TaskDataset, n: usize, seed: u64) -> Result<TaskDataset> {
    let total = data.train.len();
    let classes: Vec<u32> = {
        let mut c: Vec<u32> = data.train.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    };
    if n < classes.len().max(1) {
        return Err(Error::Config(format!(
            "limit {n} is below the number of classes {}",
            classes.len()
        )));
    }
    if n > total {
        return Err(Error::Config(format!(
            "limit {n} exceeds training size {total}"
        )));
    }
    if n == total {
        return Ok(data.clone());
    }
    let rng = Rng::new(seed);
    let mut per_class: Vec<Vec<usize>> = classes
        .iter()
        .map(|&c| (0..total).filter(|&i| data.train.labels[i] == c).collect())
        .collect();
    // largest-remainder quotas, at least one per class
    let mut quotas: Vec<(usize, f64)> = per_class
        .iter()
        .map(|idx| {
            let exact = n as f64 * idx.len() as f64 / total as f64;
            (exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let mut assigned: usize = quotas.iter().map(|q| q.0).sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| quotas[b].1.total_cmp(&quotas[a].1).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if assigned >= n {
            break;
        }
        if quotas[i].0 < per_class[i].len() {
            quotas[i].0 += 1;
            assigned += 1;
        }
    }
    let mut chosen = Vec::with_capacity(n);
    for (k, idx) in per_class.iter_mut().enumerate() {
        rng.fork(classes[k] as u64).shuffle(idx);
        chosen.extend_from_slice(&idx[..quotas[k].0]);
    }
    chosen.sort_unstable();
    Ok(TaskDataset {
        train: data.train.select(&chosen),
        val: data.val.clone(),
        test: data.test.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SuiteConfig {
        SuiteConfig {
            train_size: 200,
            val_size: 40,
            test_size: 40,
            bayes_samples: 300,
            ..Default::default()
        }
    }

    fn theta(t: &Task) -> Vec<f64> {
        t.spec.theta.data().iter().map(|&x| x as f64).collect()
    }

    #[test]
    fn deterministic() {
        let a = gen_suite(&small(), 3).unwrap();
        let b = gen_suite(&small(), 3).unwrap();
        assert_eq!(a, b);
        let c = gen_suite(&small(), 4).unwrap();
        assert_ne!(a.tasks[0].data.train, c.tasks[0].data.train);
    }

    #[test]
    fn zero_spread_shares_theta() {
        let cfg = SuiteConfig {
            cluster_spread: 0.0,
            ..small()
        };
        let s = gen_suite(&cfg, 1).unwrap();
        for c in 0..cfg.n_clusters {
            let members: Vec<&Task> = s.tasks.iter().filter(|t| t.spec.cluster == c).collect();
            assert!(members
                .iter()
                .all(|t| t.spec.theta == members[0].spec.theta));
        }
    }

    #[test]
    fn within_cluster_closer_than_across() {
        let s = gen_suite(&small(), 5).unwrap();
        let (mut within, mut across) = (vec![], vec![]);
        for (i, a) in s.tasks.iter().enumerate() {
            for b in &s.tasks[i + 1..] {
                let d = distance(&theta(a), &theta(b));
                if a.spec.cluster == b.spec.cluster {
                    within.push(d);
                } else {
                    across.push(d);
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&within) < mean(&across));
    }

    #[test]
    fn splits_balanced_and_disjoint() {
        let s = gen_suite(&small(), 2).unwrap();
        for t in &s.tasks {
            let d = &t.data;
            for split in [&d.train, &d.val, &d.test] {
                let ones = split.labels.iter().filter(|&&l| l == 1).count() as f64;
                let frac = ones / split.len() as f64;
                assert!((frac - 0.5).abs() <= 0.1 * 0.5);
            }
            let mut seen = HashSet::new();
            for split in [&d.train, &d.val, &d.test] {
                for i in 0..split.len() {
                    assert!(seen.insert(split.sequence(i).to_vec()));
                }
            }
            assert_eq!(t.spec.class_logits.dims(), &[2, 64]);
        }
        assert_eq!(s.ids()[0], "t00");
        assert_eq!(s.tasks[5].spec.family, Family::B);
    }

    #[test]
    fn bayes_floor_is_enforced() {
        let cfg = SuiteConfig {
            signal: 0.0,
            max_retries: 3,
            ..small()
        };
        assert!(matches!(gen_suite(&cfg, 0), Err(Error::Generation(_))));
    }

    #[test]
    fn limit_examples() {
        let s = gen_suite(&small(), 2).unwrap();
        let d = &s.tasks[0].data;
        assert_eq!(&limit(d, d.train.len(), 0).unwrap(), d);
        let l = limit(d, 100, 9).unwrap();
        assert_eq!(l.train.len(), 100);
        assert_eq!(l.train.labels.iter().filter(|&&x| x == 0).count(), 50);
        assert_eq!(l.val, d.val);
        assert_eq!(l, limit(d, 100, 9).unwrap());
        assert_ne!(l.train, limit(d, 100, 10).unwrap().train);
        assert!(limit(d, 1, 0).is_err());
        assert!(limit(d, d.train.len() + 1, 0).is_err());
    }

    #[test]
    fn invalid_configs() {
        assert!(gen_suite(
            &SuiteConfig {
                n_clusters: 0,
                ..small()
            },
            0
        )
        .is_err());
        assert!(gen_suite(
            &SuiteConfig {
                cluster_spread: -1.0,
                ..small()
            },
            0
        )
        .is_err());
    }
}
