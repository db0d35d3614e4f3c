use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::numerics::{Real, Rng, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub hidden_size: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_size: usize,
    pub n_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            max_seq_len: 16,
            hidden_size: 32,
            n_heads: 2,
            n_layers: 2,
            ffn_size: 64,
            n_classes: 2,
        }
    }
}

impl ModelConfig {
    /// 12 layers, hidden 768, FFN 3072: only used for parameter arithmetic.
    pub fn bert_base_shape() -> Self {
        Self {
            vocab_size: 30_522,
            max_seq_len: 512,
            hidden_size: 768,
            n_heads: 12,
            n_layers: 12,
            ffn_size: 3072,
            n_classes: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("hidden_size", self.hidden_size),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("ffn_size", self.ffn_size),
            ("n_classes", self.n_classes),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.hidden_size.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "hidden_size {} not divisible by n_heads {}",
                self.hidden_size, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.n_heads
    }

    /// Short stable digest of the configuration, recorded in manifests.
    pub fn hash(&self) -> String {
        let text = format!(
            "vocab={};seq={};hidden={};heads={};layers={};ffn={};classes={}",
            self.vocab_size,
            self.max_seq_len,
            self.hidden_size,
            self.n_heads,
            self.n_layers,
            self.ffn_size,
            self.n_classes
        );
        let digest = Sha256::digest(text.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T: Real = f32> {
    /// `[out × in]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T: Real = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T: Real = f32> {
    pub attn_norm: LayerNorm<T>,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub ffn_norm: LayerNorm<T>,
    pub up: Linear<T>,
    pub down: Linear<T>,
}

/// Weights of the pre-norm encoder with a mean-pooled linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Real = f32> {
    pub config: ModelConfig,
    pub token_embedding: Tensor<T>,
    pub position_embedding: Tensor<T>,
    pub layers: Vec<Block<T>>,
    pub final_norm: LayerNorm<T>,
    pub classifier: Linear<T>,
}

fn gaussian<T: Real>(rng: &mut Rng, dims: &[usize], std: f64) -> Tensor<T> {
    let n: usize = dims.iter().product();
    Tensor::new(
        dims.to_vec(),
        (0..n).map(|_| T::from_f64(rng.normal(0.0, std))).collect(),
    )
    .expect("dims match element count")
}

impl<T: Real> Linear<T> {
    fn init(rng: &mut Rng, out: usize, inp: usize) -> Self {
        Self {
            weight: gaussian(rng, &[out, inp], 1.0 / (inp as f64).sqrt()),
            bias: Tensor::zeros(&[out]),
        }
    }
}

impl<T: Real> LayerNorm<T> {
    fn init(d: usize) -> Self {
        Self {
            gamma: Tensor::full(&[d], T::ONE),
            beta: Tensor::zeros(&[d]),
        }
    }
}

macro_rules! block_fields {
    ($b:expr, $f:ident) => {
        [
            ("attn_norm.gamma", $f!($b.attn_norm.gamma)),
            ("attn_norm.beta", $f!($b.attn_norm.beta)),
            ("attn.q.weight", $f!($b.q.weight)),
            ("attn.q.bias", $f!($b.q.bias)),
            ("attn.k.weight", $f!($b.k.weight)),
            ("attn.k.bias", $f!($b.k.bias)),
            ("attn.v.weight", $f!($b.v.weight)),
            ("attn.v.bias", $f!($b.v.bias)),
            ("attn.o.weight", $f!($b.o.weight)),
            ("attn.o.bias", $f!($b.o.bias)),
            ("ffn_norm.gamma", $f!($b.ffn_norm.gamma)),
            ("ffn_norm.beta", $f!($b.ffn_norm.beta)),
            ("ffn.up.weight", $f!($b.up.weight)),
            ("ffn.up.bias", $f!($b.up.bias)),
            ("ffn.down.weight", $f!($b.down.weight)),
            ("ffn.down.bias", $f!($b.down.bias)),
        ]
    };
}

macro_rules! by_ref {
    ($e:expr) => {
        &$e
    };
}
macro_rules! by_mut {
    ($e:expr) => {
        &mut $e
    };
}

impl<T: Real> ModelParams<T> {
    /// Random base model. Linear weights ~ N(0, 1/fan_in), embeddings ~ N(0, 1),
    /// the head ~ N(0, 0.02²); biases zero and norms identity.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_size;
        let token_embedding = gaussian(rng, &[config.vocab_size, d], 1.0);
        let position_embedding = gaussian(rng, &[config.max_seq_len, d], 1.0);
        let layers = (0..config.n_layers)
            .map(|_| Block {
                attn_norm: LayerNorm::init(d),
                q: Linear::init(rng, d, d),
                k: Linear::init(rng, d, d),
                v: Linear::init(rng, d, d),
                o: Linear::init(rng, d, d),
                ffn_norm: LayerNorm::init(d),
                up: Linear::init(rng, config.ffn_size, d),
                down: Linear::init(rng, d, config.ffn_size),
            })
            .collect();
        let classifier = Linear {
            weight: gaussian(rng, &[config.n_classes, d], 0.02),
            bias: Tensor::zeros(&[config.n_classes]),
        };
        Ok(Self {
            config: *config,
            token_embedding,
            position_embedding,
            layers,
            final_norm: LayerNorm::init(d),
            classifier,
        })
    }

    /// Canonical tensor names in definition order.
    pub fn names(config: &ModelConfig) -> Vec<String> {
        let mut out = vec!["embed.tokens".to_string(), "embed.positions".to_string()];
        let block_names = [
            "attn_norm.gamma",
            "attn_norm.beta",
            "attn.q.weight",
            "attn.q.bias",
            "attn.k.weight",
            "attn.k.bias",
            "attn.v.weight",
            "attn.v.bias",
            "attn.o.weight",
            "attn.o.bias",
            "ffn_norm.gamma",
            "ffn_norm.beta",
            "ffn.up.weight",
            "ffn.up.bias",
            "ffn.down.weight",
            "ffn.down.bias",
        ];
        for l in 0..config.n_layers {
            out.extend(block_names.iter().map(|n| format!("layers.{l}.{n}")));
        }
        out.extend(
            [
                "final_norm.gamma",
                "final_norm.beta",
                "classifier.weight",
                "classifier.bias",
            ]
            .iter()
            .map(|s| s.to_string()),
        );
        out
    }

    pub fn param_count_for(config: &ModelConfig) -> usize {
        let d = config.hidden_size;
        let f = config.ffn_size;
        let block = 4 * d + 4 * (d * d + d) + (f * d + f) + (d * f + d);
        config.vocab_size * d
            + config.max_seq_len * d
            + config.n_layers * block
            + 2 * d
            + config.n_classes * d
            + config.n_classes
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("embed.tokens".to_string(), &self.token_embedding),
            ("embed.positions".to_string(), &self.position_embedding),
        ];
        for (l, b) in self.layers.iter().enumerate() {
            for (n, t) in block_fields!(b, by_ref) {
                out.push((format!("layers.{l}.{n}"), t));
            }
        }
        out.push(("final_norm.gamma".into(), &self.final_norm.gamma));
        out.push(("final_norm.beta".into(), &self.final_norm.beta));
        out.push(("classifier.weight".into(), &self.classifier.weight));
        out.push(("classifier.bias".into(), &self.classifier.bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("embed.tokens".to_string(), &mut self.token_embedding),
            ("embed.positions".to_string(), &mut self.position_embedding),
        ];
        for (l, b) in self.layers.iter_mut().enumerate() {
            for (n, t) in block_fields!(b, by_mut) {
                out.push((format!("layers.{l}.{n}"), t));
            }
        }
        out.push(("final_norm.gamma".into(), &mut self.final_norm.gamma));
        out.push(("final_norm.beta".into(), &mut self.final_norm.beta));
        out.push(("classifier.weight".into(), &mut self.classifier.weight));
        out.push(("classifier.bias".into(), &mut self.classifier.bias));
        out
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(T::ZERO);
        }
        z
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let lin = |l: &Linear<T>| Linear {
            weight: l.weight.cast(),
            bias: l.bias.cast(),
        };
        let ln = |l: &LayerNorm<T>| LayerNorm {
            gamma: l.gamma.cast(),
            beta: l.beta.cast(),
        };
        ModelParams {
            config: self.config,
            token_embedding: self.token_embedding.cast(),
            position_embedding: self.position_embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|b| Block {
                    attn_norm: ln(&b.attn_norm),
                    q: lin(&b.q),
                    k: lin(&b.k),
                    v: lin(&b.v),
                    o: lin(&b.o),
                    ffn_norm: ln(&b.ffn_norm),
                    up: lin(&b.up),
                    down: lin(&b.down),
                })
                .collect(),
            final_norm: ln(&self.final_norm),
            classifier: lin(&self.classifier),
        }
    }

    /// Rebuild from named tensors (e.g. a loaded container). Every canonical
    /// name must be present with the shape implied by `config`.
    pub fn from_named<'a>(
        config: &ModelConfig,
        mut lookup: impl FnMut(&str) -> Option<&'a Tensor<T>>,
    ) -> Result<Self> {
        let mut model = Self::init(config, &mut Rng::new(0))?;
        for (name, slot) in model.tensors_mut() {
            let t =
                lookup(&name).ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
            t.ensure_shape(slot.dims(), &name)?;
            *slot = t.clone();
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_match_tensors() {
        let cfg = ModelConfig::default();
        let m = ModelParams::<f32>::init(&cfg, &mut Rng::new(0)).unwrap();
        let names: Vec<String> = m.tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ModelParams::<f32>::names(&cfg));
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert_eq!(m.param_count(), ModelParams::<f32>::param_count_for(&cfg));
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            n_heads: 3,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let zero = ModelConfig {
            n_classes: 0,
            ..Default::default()
        };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ModelConfig::default();
        assert_eq!(a.hash(), ModelConfig::default().hash());
        assert_eq!(a.hash().len(), 16);
        assert_ne!(a.hash(), ModelConfig { n_layers: 3, ..a }.hash());
    }
}
