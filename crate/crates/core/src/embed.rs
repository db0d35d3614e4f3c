//! Task embeddings: tuned parameters averaged over layers, plus the TextEmb,
//! Fisher (TaskEmb) and DataSize baselines.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::model::{loss_and_grads, mean_hidden, Batch, ModelParams};
use crate::numerics::{Real, Tensor};
use crate::peft::{trainable_mask, AdapterParams, Method};
use crate::{Error, Result};

/// How an embedding was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EmbedKind {
    Tupate(Method),
    TextEmb,
    TaskEmb,
}

impl fmt::Display for EmbedKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EmbedKind::Tupate(m) => write!(f, "tupate-{m}"),
            EmbedKind::TextEmb => f.write_str("textemb"),
            EmbedKind::TaskEmb => f.write_str("taskemb"),
        }
    }
}

impl FromStr for EmbedKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "textemb" => Ok(EmbedKind::TextEmb),
            "taskemb" => Ok(EmbedKind::TaskEmb),
            _ => match s.strip_prefix("tupate-") {
                Some(m) => Ok(EmbedKind::Tupate(m.parse()?)),
                None => Err(Error::Format(format!("unknown embedding kind `{s}`"))),
            },
        }
    }
}

impl Serialize for EmbedKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EmbedKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskEmbedding {
    /// Rank-1 tensor of length `D`.
    pub vector: Tensor,
    pub kind: EmbedKind,
    /// Task (or checkpoint) the embedding was extracted from.
    pub source: String,
}

impl TaskEmbedding {
    pub fn new(vector: Tensor, kind: EmbedKind, source: impl Into<String>) -> Result<Self> {
        if vector.rank() != 1 {
            return Err(Error::shape(format!(
                "embedding must be rank 1, got {:?}",
                vector.dims()
            )));
        }
        vector.ensure_finite("embedding")?;
        if vector.is_zero() {
            return Err(Error::Degenerate("all-zero embedding".into()));
        }
        Ok(Self {
            vector,
            kind,
            source: source.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedWarning {
    /// The adapter is bit-identical to its initialization.
    Untrained,
}

impl fmt::Display for EmbedWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EmbedWarning::Untrained => f.write_str("adapter is identical to its initialization"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub embedding: TaskEmbedding,
    pub warnings: Vec<EmbedWarning>,
}

/// One layer's tuned tensors flattened: prefix keys then values; bias deltas
/// q, k, v, o, up, down; LoRA `A` then `B` for `W_q`, then for `W_v`. Each
/// tensor is row-major.
pub fn flatten_layer<T: Real>(adapter: &AdapterParams<T>, layer: usize) -> Vec<f64> {
    adapter
        .layer_tensors(layer)
        .into_iter()
        .flat_map(|(_, t)| t.data().iter().map(|v| v.to_f64()))
        .collect()
}

/// Mean over layers of the flattened per-layer tuned parameters. The
/// classifier head is not part of an adapter and never enters the vector.
/// `initial`, when given, is the adapter before training; an unchanged adapter
/// yields [`EmbedWarning::Untrained`].
pub fn tupate_embed(
    adapter: &AdapterParams,
    initial: Option<&AdapterParams>,
    source: &str,
) -> Result<Extraction> {
    let n_layers = adapter.n_layers();
    if n_layers == 0 {
        return Err(Error::shape("adapter has no layers"));
    }
    let mut sum = flatten_layer(adapter, 0);
    for l in 1..n_layers {
        let v = flatten_layer(adapter, l);
        if v.len() != sum.len() {
            return Err(Error::shape(format!(
                "layer {l} flattens to {} values, layer 0 to {}",
                v.len(),
                sum.len()
            )));
        }
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
    }
    let inv = 1.0 / n_layers as f64;
    let vector = Tensor::vector(sum.into_iter().map(|s| (s * inv) as f32).collect());
    let mut warnings = Vec::new();
    if let Some(init) = initial {
        let same = init.method() == adapter.method()
            && init.tensors().len() == adapter.tensors().len()
            && init
                .tensors()
                .iter()
                .zip(adapter.tensors())
                .all(|((_, a), (_, b))| a.bit_eq(b));
        if same {
            warnings.push(EmbedWarning::Untrained);
        }
    }
    Ok(Extraction {
        embedding: TaskEmbedding::new(vector, EmbedKind::Tupate(adapter.method()), source)?,
        warnings,
    })
}

/// Dataset average of the frozen model's token-averaged final hidden states.
pub fn textemb(params: &ModelParams, data: &Batch, source: &str) -> Result<TaskEmbedding> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    data.validate(&params.config)?;
    let d = params.config.hidden_size;
    let mut acc = vec![0.0f64; d];
    for i in 0..data.len() {
        let h = mean_hidden(params, data.sequence(i))?;
        for (a, v) in acc.iter_mut().zip(h.data()) {
            *a += *v as f64;
        }
    }
    let inv = 1.0 / data.len() as f64;
    let vector = Tensor::vector(acc.into_iter().map(|a| (a * inv) as f32).collect());
    TaskEmbedding::new(vector, EmbedKind::TextEmb, source)
}

/// Empirical diagonal Fisher of a fully tuned model: per parameter, the mean
/// over examples of the squared gradient of `log p(label | x)`. Entries follow
/// the model's canonical tensor order, each tensor row-major.
pub fn fisher_diagonal<T: Real>(params: &ModelParams<T>, data: &Batch) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mask = trainable_mask(Method::Full, &params.config);
    let mut acc = vec![0.0f64; params.param_count()];
    for i in 0..data.len() {
        // single-example loss is -log p(label|x); squaring drops the sign
        let (_, grads) = loss_and_grads(params, None, &data.select(&[i]), &mask)?;
        let mut offset = 0;
        for (_, g) in &grads {
            for (a, v) in acc[offset..offset + g.len()].iter_mut().zip(g.data()) {
                let v = v.to_f64();
                *a += v * v;
            }
            offset += g.len();
        }
        debug_assert_eq!(offset, acc.len());
    }
    let inv = 1.0 / data.len() as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    Ok(acc)
}

pub fn fisher_taskemb(params: &ModelParams, data: &Batch, source: &str) -> Result<TaskEmbedding> {
    let f = fisher_diagonal(params, data)?;
    let vector = Tensor::vector(f.into_iter().map(|v| v as f32).collect());
    TaskEmbedding::new(vector, EmbedKind::TaskEmb, source)
}

/// Training-set size, used as a ranking score directly.
pub fn datasize_score(train: &Batch) -> f64 {
    train.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::Rng;
    use crate::peft::{init_adapter, AdapterConfig};

    fn tiny(n_layers: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: 10,
            max_seq_len: 5,
            hidden_size: 4,
            n_heads: 2,
            n_layers,
            ffn_size: 6,
            n_classes: 2,
        }
    }

    fn bias_with(layers: &[Vec<f32>]) -> AdapterParams {
        let cfg = tiny(layers.len());
        let mut a: AdapterParams = init_adapter(
            Method::Bias,
            &cfg,
            &AdapterConfig::default(),
            &mut Rng::new(0),
        )
        .unwrap();
        for (l, values) in layers.iter().enumerate() {
            let mut it = values.iter();
            for (name, t) in a.tensors_mut() {
                if name.starts_with(&format!("layers.{l}.")) {
                    for x in t.data_mut() {
                        *x = *it.next().unwrap();
                    }
                }
            }
        }
        a
    }

    fn bias_dim() -> usize {
        5 * 4 + 6
    }

    #[test]
    fn single_layer_is_its_flattening() {
        let v: Vec<f32> = (0..bias_dim()).map(|i| i as f32 + 1.0).collect();
        let a = bias_with(std::slice::from_ref(&v));
        let e = tupate_embed(&a, None, "t").unwrap().embedding;
        assert_eq!(e.vector.data(), &v[..]);
        assert_eq!(e.kind, EmbedKind::Tupate(Method::Bias));
    }

    #[test]
    fn identical_layers_average_to_one_layer() {
        let v: Vec<f32> = (0..bias_dim()).map(|i| (i as f32) * 0.5 - 3.0).collect();
        let a = bias_with(&[v.clone(), v.clone(), v.clone()]);
        let e = tupate_embed(&a, None, "t").unwrap().embedding;
        assert_eq!(e.vector.data(), &v[..]);
    }

    #[test]
    fn two_layer_average() {
        let n = bias_dim();
        let mut v1 = vec![0.0; n];
        let mut v2 = vec![0.0; n];
        v1[0] = 1.0;
        v2[1] = 1.0;
        let e = tupate_embed(&bias_with(&[v1, v2]), None, "t")
            .unwrap()
            .embedding;
        assert_eq!(&e.vector.data()[..2], &[0.5, 0.5]);
        assert!(e.vector.data()[2..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn flatten_order_is_bias_definition_order() {
        let a = bias_with(&[(0..bias_dim()).map(|i| i as f32).collect()]);
        let flat = flatten_layer(&a, 0);
        // q occupies the first d entries, down the last d
        assert_eq!(flat[..4], [0.0, 1.0, 2.0, 3.0]);
        assert_eq!(
            a.get("layers.0.bitfit.down").unwrap().data()[0],
            flat[flat.len() - 4] as f32
        );
    }

    #[test]
    fn dim_matches_per_layer_count() {
        let cfg = tiny(3);
        let acfg = AdapterConfig {
            prefix_len: 3,
            lora_rank: 2,
            lora_alpha: 2.0,
        };
        for m in Method::PEFT {
            let mut a: AdapterParams = init_adapter(m, &cfg, &acfg, &mut Rng::new(1)).unwrap();
            for (_, t) in a.tensors_mut() {
                t.fill(0.25);
            }
            let e = tupate_embed(&a, None, "t").unwrap().embedding;
            assert_eq!(e.dim(), crate::peft::per_layer_dim(m, &cfg, &acfg));
            assert_eq!(
                e.dim() * cfg.n_layers,
                crate::peft::count_tuned_params(m, &cfg, &acfg)
            );
        }
    }

    #[test]
    fn untrained_adapter_warns_and_zero_adapter_errors() {
        let cfg = tiny(2);
        let acfg = AdapterConfig::default();
        let a: AdapterParams = init_adapter(Method::Prefix, &cfg, &acfg, &mut Rng::new(3)).unwrap();
        let x = tupate_embed(&a, Some(&a), "t").unwrap();
        assert_eq!(x.warnings, vec![EmbedWarning::Untrained]);
        let b: AdapterParams = init_adapter(Method::Bias, &cfg, &acfg, &mut Rng::new(3)).unwrap();
        assert!(matches!(
            tupate_embed(&b, None, "t"),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn kind_round_trips_through_text() {
        for k in [
            EmbedKind::TextEmb,
            EmbedKind::TaskEmb,
            EmbedKind::Tupate(Method::Prefix),
            EmbedKind::Tupate(Method::Bias),
            EmbedKind::Tupate(Method::Lora),
        ] {
            assert_eq!(k.to_string().parse::<EmbedKind>().unwrap(), k);
        }
        assert!("tupate-adam".parse::<EmbedKind>().is_err());
    }

    fn model(n_classes: usize) -> ModelParams {
        let cfg = ModelConfig {
            n_classes,
            ..tiny(2)
        };
        ModelParams::init(&cfg, &mut Rng::new(11)).unwrap()
    }

    #[test]
    fn textemb_single_and_duplicated() {
        let p = model(2);
        let one = Batch::new(vec![1, 2, 3, 4], vec![0], 4).unwrap();
        let e = textemb(&p, &one, "t").unwrap();
        assert!(e.vector.bit_eq(
            &mean_hidden(&p, &[1, 2, 3, 4])
                .unwrap()
                .reshape(vec![4])
                .unwrap()
        ));
        let two = Batch::new(vec![1, 2, 3, 4, 5, 6, 7, 8], vec![0, 1], 4).unwrap();
        let dup = Batch::new(
            [two.tokens.clone(), two.tokens.clone()].concat(),
            vec![0, 1, 0, 1],
            4,
        )
        .unwrap();
        let a = textemb(&p, &two, "t").unwrap().vector;
        let b = textemb(&p, &dup, "t").unwrap().vector;
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0));
        }
        // labels never reach the embedding
        let relabeled = Batch::new(two.tokens.clone(), vec![1, 1], 4).unwrap();
        assert!(a.bit_eq(&textemb(&p, &relabeled, "t").unwrap().vector));
        assert!(matches!(
            textemb(&p, &Batch::new(vec![], vec![], 4).unwrap(), "t"),
            Err(Error::EmptyDataset)
        ));
    }

    /// Finite-difference estimate of `∂ log p(y|x) / ∂θ_i`, independent of the
    /// analytic backward pass.
    fn fd_log_prob_grad(p: &ModelParams<f64>, x: &Batch, name: &str, idx: usize) -> f64 {
        let h = 1e-5;
        let eval = |delta: f64| {
            let mut q = p.clone();
            for (n, t) in q.tensors_mut() {
                if n == name {
                    t.data_mut()[idx] += delta;
                }
            }
            -crate::model::loss_value(&q, None, x).unwrap()
        };
        (eval(h) - eval(-h)) / (2.0 * h)
    }

    #[test]
    fn fisher_matches_per_example_loop() {
        let p: ModelParams<f64> = model(3).cast();
        let data = Batch::new(vec![1, 2, 3, 4, 5, 6, 0, 9, 8, 8, 8, 1], vec![0, 2, 1], 4).unwrap();
        let f = fisher_diagonal(&p, &data).unwrap();
        assert_eq!(f.len(), p.param_count());
        assert!(f.iter().all(|&v| v >= 0.0));
        let mut rng = Rng::new(5);
        let mut offset = 0;
        for (name, t) in p.tensors() {
            for _ in 0..3 {
                let idx = rng.below(t.len());
                let oracle: f64 = (0..data.len())
                    .map(|i| fd_log_prob_grad(&p, &data.select(&[i]), &name, idx).powi(2))
                    .sum::<f64>()
                    / data.len() as f64;
                let got = f[offset + idx];
                assert!(
                    (got - oracle).abs() <= 1e-6 * oracle.abs().max(1e-4),
                    "{name}[{idx}]: {got} vs {oracle}"
                );
            }
            offset += t.len();
        }
    }

    #[test]
    fn fisher_single_example_is_squared_gradient_and_unused_rows_are_zero() {
        let p: ModelParams<f64> = model(2).cast();
        let x = Batch::new(vec![1, 2, 3, 4], vec![1], 4).unwrap();
        let f = fisher_diagonal(&p, &x).unwrap();
        let (_, g) =
            loss_and_grads(&p, None, &x, &trainable_mask(Method::Full, &p.config)).unwrap();
        let flat: Vec<f64> = g
            .values()
            .flat_map(|t| t.data().iter().map(|v| v * v))
            .collect();
        assert_eq!(f, flat);
        // token 9 never appears, so its embedding row has zero gradient
        let d = p.config.hidden_size;
        assert!(f[9 * d..10 * d].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn datasize_counts_train_examples() {
        let b = Batch::new(vec![0; 2000 * 2], vec![0; 2000], 2).unwrap();
        assert_eq!(datasize_score(&b), 2000.0);
        let idx: Vec<usize> = (0..100).collect();
        assert_eq!(datasize_score(&b.select(&idx)), 100.0);
    }
}
