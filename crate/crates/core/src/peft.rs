//! Parameter-efficient tuning: attention prefixes, bias-only deltas and
//! low-rank updates, plus the trainable masks and parameter arithmetic for
//! each method.
//!
//! Tensor naming (also the flatten order used for task embeddings):
//!
//! | method | per layer `l`                                                  |
//! |--------|----------------------------------------------------------------|
//! | prefix | `layers.l.prefix.keys` `[n×d]`, `layers.l.prefix.values` `[n×d]` |
//! | bias   | `layers.l.bitfit.{q,k,v,o,up,down}`                             |
//! | lora   | `layers.l.lora.q.a` `[r×k]`, `.q.b` `[d×r]`, then the same for `v` |

use std::fmt;
use std::str::FromStr;

use indexmap::IndexSet;
use serde::{Deserialize, Serialize};

use crate::model::{attention, Linear, ModelConfig, ModelParams};
use crate::numerics::{matmul_nt, Real, Rng, Tensor};
use crate::{Error, Result};

pub const PREFIX_INIT_STD: f64 = 0.02;
pub const LORA_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Prefix,
    Bias,
    Lora,
    /// Full fine-tuning; used by the Fisher baseline, not an adapter.
    Full,
}

impl Method {
    pub const PEFT: [Method; 3] = [Method::Prefix, Method::Bias, Method::Lora];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Prefix => "prefix",
            Method::Bias => "bias",
            Method::Lora => "lora",
            Method::Full => "full",
        }
    }

    pub fn is_adapter(self) -> bool {
        self != Method::Full
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prefix" => Ok(Method::Prefix),
            "bias" => Ok(Method::Bias),
            "lora" => Ok(Method::Lora),
            "full" => Ok(Method::Full),
            other => Err(Error::UnknownMethod(other.to_string())),
        }
    }
}

/// Hyperparameters that shape an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub prefix_len: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            prefix_len: 20,
            lora_rank: 8,
            lora_alpha: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrefixLayer<T: Real = f32> {
    pub keys: Tensor<T>,
    pub values: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrefixAdapter<T: Real = f32> {
    pub len: usize,
    pub layers: Vec<PrefixLayer<T>>,
}

/// Deltas added to every linear-layer bias of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasLayer<T: Real = f32> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    pub o: Tensor<T>,
    pub up: Tensor<T>,
    pub down: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasAdapter<T: Real = f32> {
    pub layers: Vec<BiasLayer<T>>,
}

/// `A: [r×k]`, `B: [d×r]` for a linear map `W: [d×k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair<T: Real = f32> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer<T: Real = f32> {
    pub q: LoraPair<T>,
    pub v: LoraPair<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T: Real = f32> {
    pub rank: usize,
    pub alpha: f64,
    pub layers: Vec<LoraLayer<T>>,
}

impl<T: Real> LoraAdapter<T> {
    pub fn scale(&self) -> f64 {
        if self.rank == 0 {
            0.0
        } else {
            self.alpha / self.rank as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AdapterParams<T: Real = f32> {
    Prefix(PrefixAdapter<T>),
    Bias(BiasAdapter<T>),
    Lora(LoraAdapter<T>),
}

fn gaussian<T: Real>(rng: &mut Rng, dims: &[usize], std: f64) -> Tensor<T> {
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.normal(0.0, std))).collect();
    Tensor::new(dims.to_vec(), data).expect("dims match element count")
}

/// Fresh adapter: prefixes ~ N(0, 0.02²), bias deltas 0, LoRA `A` ~ N(0, 0.02²)
/// with `B = 0`.
pub fn init_adapter<T: Real>(
    method: Method,
    model: &ModelConfig,
    cfg: &AdapterConfig,
    rng: &mut Rng,
) -> Result<AdapterParams<T>> {
    model.validate()?;
    let d = model.hidden_size;
    match method {
        Method::Prefix => Ok(AdapterParams::Prefix(PrefixAdapter {
            len: cfg.prefix_len,
            layers: (0..model.n_layers)
                .map(|_| PrefixLayer {
                    keys: gaussian(rng, &[cfg.prefix_len, d], PREFIX_INIT_STD),
                    values: gaussian(rng, &[cfg.prefix_len, d], PREFIX_INIT_STD),
                })
                .collect(),
        })),
        Method::Bias => Ok(AdapterParams::Bias(BiasAdapter {
            layers: (0..model.n_layers)
                .map(|_| BiasLayer {
                    q: Tensor::zeros(&[d]),
                    k: Tensor::zeros(&[d]),
                    v: Tensor::zeros(&[d]),
                    o: Tensor::zeros(&[d]),
                    up: Tensor::zeros(&[model.ffn_size]),
                    down: Tensor::zeros(&[d]),
                })
                .collect(),
        })),
        Method::Lora => {
            let r = cfg.lora_rank;
            if r > d {
                return Err(Error::Config(format!(
                    "LoRA rank {r} exceeds min(d, k) = {d}"
                )));
            }
            if !(cfg.lora_alpha.is_finite()) {
                return Err(Error::Config("LoRA alpha must be finite".into()));
            }
            let pair = |rng: &mut Rng| LoraPair {
                a: gaussian(rng, &[r, d], LORA_INIT_STD),
                b: Tensor::zeros(&[d, r]),
            };
            Ok(AdapterParams::Lora(LoraAdapter {
                rank: r,
                alpha: cfg.lora_alpha,
                layers: (0..model.n_layers)
                    .map(|_| {
                        let q = pair(rng);
                        let v = pair(rng);
                        LoraLayer { q, v }
                    })
                    .collect(),
            }))
        }
        Method::Full => Err(Error::Config("full fine-tuning has no adapter".to_string())),
    }
}

impl<T: Real> AdapterParams<T> {
    pub fn method(&self) -> Method {
        match self {
            AdapterParams::Prefix(_) => Method::Prefix,
            AdapterParams::Bias(_) => Method::Bias,
            AdapterParams::Lora(_) => Method::Lora,
        }
    }

    pub fn n_layers(&self) -> usize {
        match self {
            AdapterParams::Prefix(p) => p.layers.len(),
            AdapterParams::Bias(b) => b.layers.len(),
            AdapterParams::Lora(l) => l.layers.len(),
        }
    }

    /// Tensors of one layer, in flatten order.
    pub fn layer_tensors(&self, layer: usize) -> Vec<(String, &Tensor<T>)> {
        let p = |s: &str| format!("layers.{layer}.{s}");
        match self {
            AdapterParams::Prefix(a) => {
                let l = &a.layers[layer];
                vec![(p("prefix.keys"), &l.keys), (p("prefix.values"), &l.values)]
            }
            AdapterParams::Bias(a) => {
                let l = &a.layers[layer];
                vec![
                    (p("bitfit.q"), &l.q),
                    (p("bitfit.k"), &l.k),
                    (p("bitfit.v"), &l.v),
                    (p("bitfit.o"), &l.o),
                    (p("bitfit.up"), &l.up),
                    (p("bitfit.down"), &l.down),
                ]
            }
            AdapterParams::Lora(a) => {
                let l = &a.layers[layer];
                vec![
                    (p("lora.q.a"), &l.q.a),
                    (p("lora.q.b"), &l.q.b),
                    (p("lora.v.a"), &l.v.a),
                    (p("lora.v.b"), &l.v.b),
                ]
            }
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        (0..self.n_layers())
            .flat_map(|l| self.layer_tensors(l))
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        match self {
            AdapterParams::Prefix(a) => {
                for (i, l) in a.layers.iter_mut().enumerate() {
                    out.push((format!("layers.{i}.prefix.keys"), &mut l.keys));
                    out.push((format!("layers.{i}.prefix.values"), &mut l.values));
                }
            }
            AdapterParams::Bias(a) => {
                for (i, l) in a.layers.iter_mut().enumerate() {
                    let BiasLayer {
                        q,
                        k,
                        v,
                        o,
                        up,
                        down,
                    } = l;
                    for (n, t) in [
                        ("q", q),
                        ("k", k),
                        ("v", v),
                        ("o", o),
                        ("up", up),
                        ("down", down),
                    ] {
                        out.push((format!("layers.{i}.bitfit.{n}"), t));
                    }
                }
            }
            AdapterParams::Lora(a) => {
                for (i, l) in a.layers.iter_mut().enumerate() {
                    out.push((format!("layers.{i}.lora.q.a"), &mut l.q.a));
                    out.push((format!("layers.{i}.lora.q.b"), &mut l.q.b));
                    out.push((format!("layers.{i}.lora.v.a"), &mut l.v.a));
                    out.push((format!("layers.{i}.lora.v.b"), &mut l.v.b));
                }
            }
        }
        out
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(T::ZERO);
        }
        z
    }

    pub fn cast<U: Real>(&self) -> AdapterParams<U> {
        match self {
            AdapterParams::Prefix(a) => AdapterParams::Prefix(PrefixAdapter {
                len: a.len,
                layers: a
                    .layers
                    .iter()
                    .map(|l| PrefixLayer {
                        keys: l.keys.cast(),
                        values: l.values.cast(),
                    })
                    .collect(),
            }),
            AdapterParams::Bias(a) => AdapterParams::Bias(BiasAdapter {
                layers: a
                    .layers
                    .iter()
                    .map(|l| BiasLayer {
                        q: l.q.cast(),
                        k: l.k.cast(),
                        v: l.v.cast(),
                        o: l.o.cast(),
                        up: l.up.cast(),
                        down: l.down.cast(),
                    })
                    .collect(),
            }),
            AdapterParams::Lora(a) => AdapterParams::Lora(LoraAdapter {
                rank: a.rank,
                alpha: a.alpha,
                layers: a
                    .layers
                    .iter()
                    .map(|l| LoraLayer {
                        q: LoraPair {
                            a: l.q.a.cast(),
                            b: l.q.b.cast(),
                        },
                        v: LoraPair {
                            a: l.v.a.cast(),
                            b: l.v.b.cast(),
                        },
                    })
                    .collect(),
            }),
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Check the adapter against a model configuration.
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.n_layers() != model.n_layers {
            return Err(Error::shape(format!(
                "adapter has {} layers, model has {}",
                self.n_layers(),
                model.n_layers
            )));
        }
        let d = model.hidden_size;
        match self {
            AdapterParams::Prefix(a) => {
                for l in &a.layers {
                    l.keys.ensure_shape(&[a.len, d], "prefix keys")?;
                    l.values.ensure_shape(&[a.len, d], "prefix values")?;
                }
            }
            AdapterParams::Bias(a) => {
                for l in &a.layers {
                    for t in [&l.q, &l.k, &l.v, &l.o, &l.down] {
                        t.ensure_shape(&[d], "bias delta")?;
                    }
                    l.up.ensure_shape(&[model.ffn_size], "bias delta")?;
                }
            }
            AdapterParams::Lora(a) => {
                if a.rank > d {
                    return Err(Error::Config(format!(
                        "LoRA rank {} exceeds min(d, k) = {d}",
                        a.rank
                    )));
                }
                for l in &a.layers {
                    for p in [&l.q, &l.v] {
                        p.a.ensure_shape(&[a.rank, d], "LoRA A")?;
                        p.b.ensure_shape(&[d, a.rank], "LoRA B")?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Names of the model's classifier head, trainable under every method.
pub fn classifier_names() -> [&'static str; 2] {
    ["classifier.weight", "classifier.bias"]
}

/// Set of tensor names a method is allowed to update.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainableMask {
    names: IndexSet<String>,
}

impl TrainableMask {
    pub fn from_names(names: impl IntoIterator<Item = String>) -> Self {
        Self {
            names: names.into_iter().collect(),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    /// True when some base-model tensor other than the head is trainable.
    pub fn touches_base(&self) -> bool {
        self.names.iter().any(|n| {
            !classifier_names().contains(&n.as_str())
                && !n.contains(".prefix.")
                && !n.contains(".bitfit.")
                && !n.contains(".lora.")
        })
    }
}

/// Trainable set for a method: its adapter tensors plus the classifier head.
/// Base weights are only included for [`Method::Full`].
pub fn trainable_mask(method: Method, model: &ModelConfig) -> TrainableMask {
    let mut names: Vec<String> = Vec::new();
    for l in 0..model.n_layers {
        match method {
            Method::Prefix => {
                names.push(format!("layers.{l}.prefix.keys"));
                names.push(format!("layers.{l}.prefix.values"));
            }
            Method::Bias => {
                for n in ["q", "k", "v", "o", "up", "down"] {
                    names.push(format!("layers.{l}.bitfit.{n}"));
                }
            }
            Method::Lora => {
                for t in ["q", "v"] {
                    names.push(format!("layers.{l}.lora.{t}.a"));
                    names.push(format!("layers.{l}.lora.{t}.b"));
                }
            }
            Method::Full => {}
        }
    }
    if method == Method::Full {
        return TrainableMask::from_names(ModelParams::<f32>::names(model));
    }
    names.extend(classifier_names().iter().map(|s| s.to_string()));
    TrainableMask::from_names(names)
}

/// Tuned parameter count, excluding the classifier head.
pub fn count_tuned_params(method: Method, model: &ModelConfig, cfg: &AdapterConfig) -> usize {
    per_layer_dim(method, model, cfg) * model.n_layers
}

/// Length of one layer's flattened tuned parameters; the task-embedding size.
pub fn per_layer_dim(method: Method, model: &ModelConfig, cfg: &AdapterConfig) -> usize {
    let d = model.hidden_size;
    match method {
        Method::Prefix => 2 * cfg.prefix_len * d,
        Method::Bias => 5 * d + model.ffn_size,
        // W_q and W_v are both d×d: r·k + d·r each
        Method::Lora => 2 * (cfg.lora_rank * d + d * cfg.lora_rank),
        Method::Full => ModelParams::<f32>::param_count_for(model) / model.n_layers.max(1),
    }
}

/// Scaled dot-product attention with a learned prefix prepended to keys and
/// values. `q` is `[m×d]`, `k`/`v` are `[m×d]`, prefixes `[n×d]`. Returns the
/// attention output `[m×d]` and the per-head weights `[m×(n+m)]`.
pub fn prefix_attention<T: Real>(
    prefix_keys: &Tensor<T>,
    prefix_values: &Tensor<T>,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    n_heads: usize,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let (out, cache) = attention::forward(q, k, v, Some((prefix_keys, prefix_values)), n_heads)?;
    Ok((out, cache.probs))
}

/// `h = Wx + b + (alpha/r)·B(Ax)` for a batch of row vectors `x: [n×k]`.
pub fn lora_linear<T: Real>(
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    alpha: f64,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (d, k) = (weight.rows(), weight.cols());
    let r = a.rows();
    if r > d.min(k) {
        return Err(Error::Config(format!(
            "LoRA rank {r} exceeds min({d}, {k})"
        )));
    }
    a.ensure_shape(&[r, k], "LoRA A")?;
    b.ensure_shape(&[d, r], "LoRA B")?;
    let lin = Linear {
        weight: weight.clone(),
        bias: bias.clone(),
    };
    let scale = if r == 0 { 0.0 } else { alpha / r as f64 };
    let pair = LoraPair {
        a: a.clone(),
        b: b.clone(),
    };
    Ok(crate::model::linear_forward(x, &lin, None, Some((&pair, scale)))?.0)
}

/// `h = Wx + (b + delta)`.
pub fn bias_forward<T: Real>(
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    delta: &Tensor<T>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    if !delta.same_shape(bias) {
        return Err(Error::shape(format!(
            "bias delta {:?} vs bias {:?}",
            delta.dims(),
            bias.dims()
        )));
    }
    let lin = Linear {
        weight: weight.clone(),
        bias: bias.clone(),
    };
    Ok(crate::model::linear_forward(x, &lin, Some(delta), None)?.0)
}

/// Plain `Wx + b` (reference for the hooked variants).
pub fn linear<T: Real>(weight: &Tensor<T>, bias: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut h = matmul_nt(x, weight)?;
    let c = h.cols();
    for row in h.data_mut().chunks_mut(c) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bert_base() -> ModelConfig {
        ModelConfig::bert_base_shape()
    }

    #[test]
    fn lora_count_at_bert_base() {
        let cfg = AdapterConfig::default();
        assert_eq!(
            count_tuned_params(Method::Lora, &bert_base(), &cfg),
            294_912
        );
        assert_eq!(per_layer_dim(Method::Lora, &bert_base(), &cfg), 24_576);
    }

    #[test]
    fn prefix_count_at_bert_base() {
        let cfg = AdapterConfig::default();
        assert_eq!(
            count_tuned_params(Method::Prefix, &bert_base(), &cfg),
            368_640
        );
        assert_eq!(per_layer_dim(Method::Prefix, &bert_base(), &cfg), 30_720);
    }

    #[test]
    fn degenerate_counts_are_zero() {
        let m = bert_base();
        let cfg = AdapterConfig {
            prefix_len: 0,
            lora_rank: 0,
            lora_alpha: 8.0,
        };
        assert_eq!(count_tuned_params(Method::Prefix, &m, &cfg), 0);
        assert_eq!(count_tuned_params(Method::Lora, &m, &cfg), 0);
        let no_layers = ModelConfig { n_layers: 0, ..m };
        assert_eq!(count_tuned_params(Method::Bias, &no_layers, &cfg), 0);
    }

    #[test]
    fn count_matches_initialized_adapter() {
        let m = ModelConfig::default();
        let cfg = AdapterConfig::default();
        for method in Method::PEFT {
            let a = init_adapter::<f32>(method, &m, &cfg, &mut Rng::new(0)).unwrap();
            assert_eq!(
                a.param_count(),
                count_tuned_params(method, &m, &cfg),
                "{method}"
            );
            let layer: usize = a.layer_tensors(0).iter().map(|(_, t)| t.len()).sum();
            assert_eq!(layer, per_layer_dim(method, &m, &cfg));
        }
    }

    #[test]
    fn init_conventions() {
        let m = ModelConfig::default();
        let cfg = AdapterConfig::default();
        let AdapterParams::Lora(l) =
            init_adapter::<f32>(Method::Lora, &m, &cfg, &mut Rng::new(1)).unwrap()
        else {
            unreachable!()
        };
        assert!(l.layers.iter().all(|x| x.q.b.is_zero() && x.v.b.is_zero()));
        assert!(l.layers.iter().all(|x| !x.q.a.is_zero()));
        assert_eq!(l.scale(), 1.0);
        let b = init_adapter::<f32>(Method::Bias, &m, &cfg, &mut Rng::new(1)).unwrap();
        assert!(b.tensors().iter().all(|(_, t)| t.is_zero()));
    }

    #[test]
    fn init_is_seeded() {
        let m = ModelConfig::default();
        let cfg = AdapterConfig::default();
        for method in Method::PEFT {
            let a = init_adapter::<f32>(method, &m, &cfg, &mut Rng::new(5)).unwrap();
            let b = init_adapter::<f32>(method, &m, &cfg, &mut Rng::new(5)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn init_rejects_oversized_rank() {
        let m = ModelConfig::default();
        let cfg = AdapterConfig {
            lora_rank: m.hidden_size + 1,
            ..Default::default()
        };
        assert!(init_adapter::<f32>(Method::Lora, &m, &cfg, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn masks() {
        let m = ModelConfig::default();
        let bias = trainable_mask(Method::Bias, &m);
        assert!(bias
            .iter()
            .all(|n| !n.ends_with(".weight") || n == "classifier.weight"));
        let prefix = trainable_mask(Method::Prefix, &m);
        assert_eq!(prefix.len(), 2 * m.n_layers + 2);
        let lora = trainable_mask(Method::Lora, &m);
        let head: Vec<&str> = classifier_names().to_vec();
        for (x, y) in [(&bias, &prefix), (&bias, &lora), (&prefix, &lora)] {
            let shared: Vec<&str> = x.iter().filter(|n| y.contains(n)).collect();
            assert_eq!(shared, head);
        }
        assert!(!bias.touches_base() && !prefix.touches_base() && !lora.touches_base());
        assert!(trainable_mask(Method::Full, &m).touches_base());
    }

    #[test]
    fn unknown_method() {
        assert!(matches!(
            "adapter".parse::<Method>(),
            Err(Error::UnknownMethod(_))
        ));
        assert_eq!("lora".parse::<Method>().unwrap(), Method::Lora);
    }

    #[test]
    fn lora_linear_hand_example() {
        let w = Tensor::<f64>::zeros(&[2, 2]);
        let b = Tensor::<f64>::zeros(&[2]);
        let a = Tensor::from_rows(&[&[1.0, 0.0]]).unwrap();
        let bb = Tensor::from_rows(&[&[1.0], &[1.0]]).unwrap();
        let x = Tensor::from_rows(&[&[3.0, 5.0]]).unwrap();
        let h = lora_linear(&w, &b, &a, &bb, 1.0, &x).unwrap();
        assert_eq!(h.data(), &[3.0, 3.0]);
    }

    #[test]
    fn lora_linear_zero_b_is_base() {
        let mut rng = Rng::new(2);
        let w = gaussian::<f32>(&mut rng, &[4, 3], 1.0);
        let b = gaussian::<f32>(&mut rng, &[4], 1.0);
        let a = gaussian::<f32>(&mut rng, &[2, 3], 1.0);
        let x = gaussian::<f32>(&mut rng, &[5, 3], 1.0);
        let h = lora_linear(&w, &b, &a, &Tensor::zeros(&[4, 2]), 8.0, &x).unwrap();
        assert!(h.bit_eq(&linear(&w, &b, &x).unwrap()));
        let too_big = gaussian::<f32>(&mut rng, &[4, 3], 1.0);
        assert!(lora_linear(&w, &b, &too_big, &Tensor::zeros(&[4, 4]), 8.0, &x).is_err());
    }

    #[test]
    fn bias_forward_examples() {
        let w = Tensor::<f64>::identity(2);
        let b = Tensor::<f64>::zeros(&[2]);
        let x = Tensor::from_rows(&[&[0.0, 0.0]]).unwrap();
        let h = bias_forward(&w, &b, &Tensor::vector(vec![1.0, 1.0]), &x).unwrap();
        assert_eq!(h.data(), &[1.0, 1.0]);
        let x = Tensor::from_rows(&[&[2.0, -1.0]]).unwrap();
        let h = bias_forward(&w, &b, &Tensor::zeros(&[2]), &x).unwrap();
        assert!(h.bit_eq(&linear(&w, &b, &x).unwrap()));
        assert!(bias_forward(&w, &b, &Tensor::zeros(&[3]), &x).is_err());
    }

    #[test]
    fn prefix_attention_hand_example() {
        // one query, one key, one prefix slot, single head, d=2
        let q = Tensor::<f64>::from_rows(&[&[1.0, 0.0]]).unwrap();
        let k = Tensor::from_rows(&[&[0.0, 1.0]]).unwrap();
        let v = Tensor::from_rows(&[&[2.0, 0.0]]).unwrap();
        let pk = Tensor::from_rows(&[&[2.0, 0.0]]).unwrap();
        let pv = Tensor::from_rows(&[&[0.0, 4.0]]).unwrap();
        let (out, probs) = prefix_attention(&pk, &pv, &q, &k, &v, 1).unwrap();
        // scores: prefix 2/√2 = √2, key 0
        let s = 2f64.sqrt();
        let wp = s.exp() / (s.exp() + 1.0);
        let wk = 1.0 / (s.exp() + 1.0);
        assert_eq!(probs[0].dims(), &[1, 2]);
        assert!((probs[0].data()[0] - wp).abs() < 1e-12);
        assert!((out.data()[0] - 2.0 * wk).abs() < 1e-12);
        assert!((out.data()[1] - 4.0 * wp).abs() < 1e-12);
    }

    #[test]
    fn prefix_attention_shapes_and_empty_prefix() {
        let mut rng = Rng::new(4);
        let (m, n, d) = (5, 3, 8);
        let q = gaussian::<f64>(&mut rng, &[m, d], 1.0);
        let k = gaussian::<f64>(&mut rng, &[m, d], 1.0);
        let v = gaussian::<f64>(&mut rng, &[m, d], 1.0);
        let pk = gaussian::<f64>(&mut rng, &[n, d], 1.0);
        let pv = gaussian::<f64>(&mut rng, &[n, d], 1.0);
        let (_, probs) = prefix_attention(&pk, &pv, &q, &k, &v, 2).unwrap();
        assert_eq!(probs.len(), 2);
        for p in &probs {
            assert_eq!(p.dims(), &[m, m + n]);
            for r in 0..m {
                let s: f64 = p.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
        let empty = Tensor::<f64>::zeros(&[0, d]);
        let (with_empty, _) = prefix_attention(&empty, &empty, &q, &k, &v, 2).unwrap();
        let (plain, _) = attention::forward(&q, &k, &v, None, 2).unwrap();
        assert!(with_empty.bit_eq(&plain));
        assert!(prefix_attention(&Tensor::zeros(&[n, d + 1]), &pv, &q, &k, &v, 2).is_err());
    }
}
