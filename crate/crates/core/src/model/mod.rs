//! Tiny pre-norm transformer encoder with a mean-pooled classification head
//! and hand-derived gradients. Adapter hooks sit in the attention keys/values
//! (prefixes), every linear bias (bias deltas) and the query/value
//! projections (low-rank updates).

pub mod attention;
mod params;

use indexmap::IndexMap;

pub use params::{Block, LayerNorm, Linear, ModelConfig, ModelParams};

use crate::numerics::ops::{gelu, gelu_grad, layer_norm, layer_norm_backward, LayerNormCache};
use crate::numerics::{matmul, matmul_nt, matmul_tn, Real, Tensor};
use crate::peft::{AdapterParams, BiasLayer, LoraLayer, LoraPair, PrefixLayer, TrainableMask};
use crate::{Error, Result};

/// Token sequences of a fixed length with one label each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub tokens: Vec<u32>,
    pub labels: Vec<u32>,
    pub seq_len: usize,
}

impl Batch {
    pub fn new(tokens: Vec<u32>, labels: Vec<u32>, seq_len: usize) -> Result<Self> {
        if seq_len == 0 || tokens.len() != labels.len() * seq_len {
            return Err(Error::shape(format!(
                "{} tokens for {} labels at length {seq_len}",
                tokens.len(),
                labels.len()
            )));
        }
        Ok(Self {
            tokens,
            labels,
            seq_len,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sequence(&self, i: usize) -> &[u32] {
        &self.tokens[i * self.seq_len..(i + 1) * self.seq_len]
    }

    pub fn select(&self, indices: &[usize]) -> Batch {
        let mut tokens = Vec::with_capacity(indices.len() * self.seq_len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            tokens.extend_from_slice(self.sequence(i));
            labels.push(self.labels[i]);
        }
        Batch {
            tokens,
            labels,
            seq_len: self.seq_len,
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.seq_len > config.max_seq_len {
            return Err(Error::shape(format!(
                "sequence length {} exceeds max {}",
                self.seq_len, config.max_seq_len
            )));
        }
        if let Some(t) = self
            .tokens
            .iter()
            .find(|&&t| t as usize >= config.vocab_size)
        {
            return Err(Error::shape(format!(
                "token {t} outside vocab {}",
                config.vocab_size
            )));
        }
        if let Some(l) = self
            .labels
            .iter()
            .find(|&&l| l as usize >= config.n_classes)
        {
            return Err(Error::shape(format!(
                "label {l} outside {} classes",
                config.n_classes
            )));
        }
        Ok(())
    }
}

/// `x·Wᵀ + b (+ delta) (+ scale·(x·Aᵀ)·Bᵀ)`. Returns the output and, for the
/// low-rank path, the intermediate `x·Aᵀ`.
pub fn linear_forward<T: Real>(
    x: &Tensor<T>,
    lin: &Linear<T>,
    delta: Option<&Tensor<T>>,
    lora: Option<(&LoraPair<T>, f64)>,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    let mut h = matmul_nt(x, &lin.weight)?;
    let d = h.cols();
    lin.bias.ensure_shape(&[d], "linear bias")?;
    let mut low = None;
    if let Some((pair, scale)) = lora {
        let u = matmul_nt(x, &pair.a)?;
        let mut delta_h = matmul_nt(&u, &pair.b)?;
        delta_h.scale(T::from_f64(scale));
        h.add_assign(&delta_h)?;
        low = Some(u);
    }
    for row in h.data_mut().chunks_mut(d) {
        match delta {
            Some(dl) => {
                for ((v, &b), &e) in row.iter_mut().zip(lin.bias.data()).zip(dl.data()) {
                    *v += b + e;
                }
            }
            None => {
                for (v, &b) in row.iter_mut().zip(lin.bias.data()) {
                    *v += b;
                }
            }
        }
    }
    Ok((h, low))
}

/// Destinations for the gradients of one hooked linear layer.
struct LinearGradSink<'a, T: Real> {
    base: Option<&'a mut Linear<T>>,
    delta: Option<&'a mut Tensor<T>>,
    lora: Option<&'a mut LoraPair<T>>,
}

fn column_sum_into<T: Real>(dst: &mut Tensor<T>, dh: &Tensor<T>) {
    let d = dh.cols();
    for r in 0..dh.rows() {
        for (t, &g) in dst.data_mut()[..d].iter_mut().zip(dh.row(r)) {
            *t += g;
        }
    }
}

fn linear_backward<T: Real>(
    dh: &Tensor<T>,
    x: &Tensor<T>,
    lin: &Linear<T>,
    lora: Option<(&LoraPair<T>, f64, &Tensor<T>)>,
    sink: LinearGradSink<'_, T>,
) -> Result<Tensor<T>> {
    let mut dx = matmul(dh, &lin.weight)?;
    if let Some(base) = sink.base {
        base.weight.add_assign(&matmul_tn(dh, x)?)?;
        column_sum_into(&mut base.bias, dh);
    }
    if let Some(delta) = sink.delta {
        column_sum_into(delta, dh);
    }
    if let Some((pair, scale, u)) = lora {
        let s = T::from_f64(scale);
        let mut du = matmul(dh, &pair.b)?;
        du.scale(s);
        if let Some(g) = sink.lora {
            let mut db = matmul_tn(dh, u)?;
            db.scale(s);
            g.b.add_assign(&db)?;
            g.a.add_assign(&matmul_tn(&du, x)?)?;
        }
        dx.add_assign(&matmul(&du, &pair.a)?)?;
    }
    Ok(dx)
}

/// Per-layer adapter view used by the forward pass.
#[derive(Clone, Copy)]
struct Hooks<'a, T: Real> {
    prefix: Option<&'a PrefixLayer<T>>,
    bias: Option<&'a BiasLayer<T>>,
    lora: Option<(&'a LoraLayer<T>, f64)>,
}

impl<'a, T: Real> Hooks<'a, T> {
    fn for_layer(adapter: Option<&'a AdapterParams<T>>, l: usize) -> Self {
        let mut h = Hooks {
            prefix: None,
            bias: None,
            lora: None,
        };
        match adapter {
            Some(AdapterParams::Prefix(p)) => h.prefix = Some(&p.layers[l]),
            Some(AdapterParams::Bias(b)) => h.bias = Some(&b.layers[l]),
            Some(AdapterParams::Lora(a)) => h.lora = Some((&a.layers[l], a.scale())),
            None => {}
        }
        h
    }
}

struct BlockCache<T: Real> {
    ln1: LayerNormCache<T>,
    a: Tensor<T>,
    u_q: Option<Tensor<T>>,
    u_v: Option<Tensor<T>>,
    attn: attention::AttentionCache<T>,
    o: Tensor<T>,
    ln2: LayerNormCache<T>,
    c: Tensor<T>,
    f1: Tensor<T>,
    g: Tensor<T>,
}

fn block_forward<T: Real>(
    x: &Tensor<T>,
    blk: &Block<T>,
    hooks: Hooks<'_, T>,
    n_heads: usize,
) -> Result<(Tensor<T>, BlockCache<T>)> {
    let (a, ln1) = layer_norm(x, &blk.attn_norm.gamma, &blk.attn_norm.beta)?;
    let bias = hooks.bias;
    let (q, u_q) = linear_forward(
        &a,
        &blk.q,
        bias.map(|b| &b.q),
        hooks.lora.map(|(l, s)| (&l.q, s)),
    )?;
    let (k, _) = linear_forward(&a, &blk.k, bias.map(|b| &b.k), None)?;
    let (v, u_v) = linear_forward(
        &a,
        &blk.v,
        bias.map(|b| &b.v),
        hooks.lora.map(|(l, s)| (&l.v, s)),
    )?;
    let (o, attn) = attention::forward(
        &q,
        &k,
        &v,
        hooks.prefix.map(|p| (&p.keys, &p.values)),
        n_heads,
    )?;
    let (ao, _) = linear_forward(&o, &blk.o, bias.map(|b| &b.o), None)?;
    let mut x1 = x.clone();
    x1.add_assign(&ao)?;
    let (c, ln2) = layer_norm(&x1, &blk.ffn_norm.gamma, &blk.ffn_norm.beta)?;
    let (f1, _) = linear_forward(&c, &blk.up, bias.map(|b| &b.up), None)?;
    let g = f1.map(|v| T::from_f64(gelu(v.to_f64())));
    let (f2, _) = linear_forward(&g, &blk.down, bias.map(|b| &b.down), None)?;
    x1.add_assign(&f2)?;
    Ok((
        x1,
        BlockCache {
            ln1,
            a,
            u_q,
            u_v,
            attn,
            o,
            ln2,
            c,
            f1,
            g,
        },
    ))
}

/// Gradient destinations for one block.
struct BlockSink<'a, T: Real> {
    base: Option<&'a mut Block<T>>,
    prefix: Option<&'a mut PrefixLayer<T>>,
    bias: Option<&'a mut BiasLayer<T>>,
    lora: Option<&'a mut LoraLayer<T>>,
}

fn block_backward<T: Real>(
    dx_out: &Tensor<T>,
    blk: &Block<T>,
    hooks: Hooks<'_, T>,
    cache: &BlockCache<T>,
    sink: BlockSink<'_, T>,
) -> Result<Tensor<T>> {
    let BlockSink {
        base,
        prefix,
        bias,
        lora,
    } = sink;
    let (mut b_attn_norm, mut b_q, mut b_k, mut b_v, mut b_o, mut b_ffn_norm, mut b_up, mut b_down) =
        match base {
            Some(b) => {
                let Block {
                    attn_norm,
                    q,
                    k,
                    v,
                    o,
                    ffn_norm,
                    up,
                    down,
                } = b;
                (
                    Some(attn_norm),
                    Some(q),
                    Some(k),
                    Some(v),
                    Some(o),
                    Some(ffn_norm),
                    Some(up),
                    Some(down),
                )
            }
            None => (None, None, None, None, None, None, None, None),
        };
    let (mut d_q, mut d_k, mut d_v, mut d_o, mut d_up, mut d_down) = match bias {
        Some(b) => {
            let BiasLayer {
                q,
                k,
                v,
                o,
                up,
                down,
            } = b;
            (Some(q), Some(k), Some(v), Some(o), Some(up), Some(down))
        }
        None => (None, None, None, None, None, None),
    };
    let (mut l_q, mut l_v) = match lora {
        Some(l) => {
            let LoraLayer { q, v } = l;
            (Some(q), Some(v))
        }
        None => (None, None),
    };

    // FFN branch
    let dg = linear_backward(
        dx_out,
        &cache.g,
        &blk.down,
        None,
        LinearGradSink {
            base: b_down.take(),
            delta: d_down.take(),
            lora: None,
        },
    )?;
    let mut df1 = dg;
    for (v, &pre) in df1.data_mut().iter_mut().zip(cache.f1.data()) {
        *v = T::from_f64(v.to_f64() * gelu_grad(pre.to_f64()));
    }
    let dc = linear_backward(
        &df1,
        &cache.c,
        &blk.up,
        None,
        LinearGradSink {
            base: b_up.take(),
            delta: d_up.take(),
            lora: None,
        },
    )?;
    let ln2_grads = b_ffn_norm.take().map(|n| (&mut n.gamma, &mut n.beta));
    let mut dx1 = layer_norm_backward(&dc, &blk.ffn_norm.gamma, &cache.ln2, ln2_grads);
    dx1.add_assign(dx_out)?;

    // attention branch
    let do_ = linear_backward(
        &dx1,
        &cache.o,
        &blk.o,
        None,
        LinearGradSink {
            base: b_o.take(),
            delta: d_o.take(),
            lora: None,
        },
    )?;
    let ag = attention::backward(&do_, &cache.attn)?;
    if let Some(p) = prefix {
        p.keys.add_assign(&ag.dprefix_keys)?;
        p.values.add_assign(&ag.dprefix_values)?;
    }
    let lora_q = hooks
        .lora
        .map(|(l, s)| (&l.q, s, cache.u_q.as_ref().expect("low-rank cache")));
    let lora_v = hooks
        .lora
        .map(|(l, s)| (&l.v, s, cache.u_v.as_ref().expect("low-rank cache")));
    let mut da = linear_backward(
        &ag.dq,
        &cache.a,
        &blk.q,
        lora_q,
        LinearGradSink {
            base: b_q.take(),
            delta: d_q.take(),
            lora: l_q.take(),
        },
    )?;
    da.add_assign(&linear_backward(
        &ag.dk,
        &cache.a,
        &blk.k,
        None,
        LinearGradSink {
            base: b_k.take(),
            delta: d_k.take(),
            lora: None,
        },
    )?)?;
    da.add_assign(&linear_backward(
        &ag.dv,
        &cache.a,
        &blk.v,
        lora_v,
        LinearGradSink {
            base: b_v.take(),
            delta: d_v.take(),
            lora: l_v.take(),
        },
    )?)?;
    let ln1_grads = b_attn_norm.take().map(|n| (&mut n.gamma, &mut n.beta));
    let mut dx = layer_norm_backward(&da, &blk.attn_norm.gamma, &cache.ln1, ln1_grads);
    dx.add_assign(&dx1)?;
    Ok(dx)
}

struct SequenceCache<T: Real> {
    blocks: Vec<BlockCache<T>>,
    final_ln: LayerNormCache<T>,
    pooled: Tensor<T>,
}

struct SequenceOutput<T: Real> {
    logits: Vec<f64>,
    layer_outputs: Vec<Tensor<T>>,
    last_hidden: Tensor<T>,
    cache: SequenceCache<T>,
}

fn sequence_forward<T: Real>(
    params: &ModelParams<T>,
    adapter: Option<&AdapterParams<T>>,
    tokens: &[u32],
    keep_layers: bool,
) -> Result<SequenceOutput<T>> {
    let cfg = &params.config;
    let d = cfg.hidden_size;
    let s = tokens.len();
    let mut x = Vec::with_capacity(s * d);
    for (pos, &t) in tokens.iter().enumerate() {
        let te = params.token_embedding.row(t as usize);
        let pe = params.position_embedding.row(pos);
        x.extend(te.iter().zip(pe).map(|(&a, &b)| a + b));
    }
    let mut x = Tensor::new(vec![s, d], x)?;
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    let mut layer_outputs = Vec::new();
    for (l, blk) in params.layers.iter().enumerate() {
        let (next, cache) = block_forward(&x, blk, Hooks::for_layer(adapter, l), cfg.n_heads)?;
        if keep_layers {
            layer_outputs.push(next.clone());
        }
        x = next;
        blocks.push(cache);
    }
    let (z, final_ln) = layer_norm(&x, &params.final_norm.gamma, &params.final_norm.beta)?;
    let mut pooled = vec![0.0f64; d];
    for r in 0..s {
        for (p, &v) in pooled.iter_mut().zip(z.row(r)) {
            *p += v.to_f64();
        }
    }
    let pooled = Tensor::new(
        vec![1, d],
        pooled.iter().map(|p| T::from_f64(p / s as f64)).collect(),
    )?;
    let logits_t = linear_forward(&pooled, &params.classifier, None, None)?.0;
    let logits: Vec<f64> = logits_t.data().iter().map(|v| v.to_f64()).collect();
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    Ok(SequenceOutput {
        logits,
        layer_outputs,
        last_hidden: z,
        cache: SequenceCache {
            blocks,
            final_ln,
            pooled,
        },
    })
}

/// Output of [`forward`].
#[derive(Debug, Clone)]
pub struct ForwardOutput<T: Real = f32> {
    /// `[batch × n_classes]`
    pub logits: Tensor<T>,
    /// Residual stream after each block, `[batch × seq × d]`.
    pub layer_outputs: Vec<Tensor<T>>,
    /// Final-norm output that feeds the pooled head, `[batch × seq × d]`.
    pub last_hidden: Tensor<T>,
}

fn check_inputs<T: Real>(
    params: &ModelParams<T>,
    adapter: Option<&AdapterParams<T>>,
    batch: &Batch,
) -> Result<()> {
    params.config.validate()?;
    batch.validate(&params.config)?;
    if let Some(a) = adapter {
        a.validate(&params.config)?;
    }
    Ok(())
}

pub fn forward<T: Real>(
    params: &ModelParams<T>,
    adapter: Option<&AdapterParams<T>>,
    batch: &Batch,
) -> Result<ForwardOutput<T>> {
    check_inputs(params, adapter, batch)?;
    let cfg = &params.config;
    let (b, s, d) = (batch.len(), batch.seq_len, cfg.hidden_size);
    let mut logits = Vec::with_capacity(b * cfg.n_classes);
    let mut layers: Vec<Vec<T>> = vec![Vec::with_capacity(b * s * d); cfg.n_layers];
    let mut last = Vec::with_capacity(b * s * d);
    for i in 0..b {
        let out = sequence_forward(params, adapter, batch.sequence(i), true)?;
        logits.extend(out.logits.iter().map(|&v| T::from_f64(v)));
        for (dst, src) in layers.iter_mut().zip(&out.layer_outputs) {
            dst.extend_from_slice(src.data());
        }
        last.extend_from_slice(out.last_hidden.data());
    }
    Ok(ForwardOutput {
        logits: Tensor::new(vec![b, cfg.n_classes], logits)?,
        layer_outputs: layers
            .into_iter()
            .map(|l| Tensor::new(vec![b, s, d], l))
            .collect::<Result<_>>()?,
        last_hidden: Tensor::new(vec![b, s, d], last)?,
    })
}

/// Logits only; skips collecting hidden states.
pub fn predict<T: Real>(
    params: &ModelParams<T>,
    adapter: Option<&AdapterParams<T>>,
    tokens: &[u32],
) -> Result<Vec<f64>> {
    Ok(sequence_forward(params, adapter, tokens, false)?.logits)
}

/// Mean-over-tokens of the final hidden states for one sequence.
pub fn mean_hidden<T: Real>(params: &ModelParams<T>, tokens: &[u32]) -> Result<Tensor<T>> {
    Ok(sequence_forward(params, None, tokens, false)?.cache.pooled)
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

/// Gradients keyed by tensor name, in canonical order (model, then adapter).
pub type Gradients<T = f32> = IndexMap<String, Tensor<T>>;

/// Full gradient buffers for one pass.
struct GradBuffers<T: Real> {
    base: Option<ModelParams<T>>,
    head: Linear<T>,
    adapter: Option<AdapterParams<T>>,
}

fn accumulate_sequence<T: Real>(
    params: &ModelParams<T>,
    adapter: Option<&AdapterParams<T>>,
    tokens: &[u32],
    label: usize,
    weight: f64,
    bufs: &mut GradBuffers<T>,
) -> Result<f64> {
    let cfg = &params.config;
    let out = sequence_forward(params, adapter, tokens, false)?;
    let logp = log_softmax(&out.logits);
    let loss = -logp[label];
    let dlogits: Vec<T> = logp
        .iter()
        .enumerate()
        .map(|(c, lp)| {
            let p = lp.exp();
            T::from_f64(weight * (p - if c == label { 1.0 } else { 0.0 }))
        })
        .collect();
    let dlogits = Tensor::new(vec![1, cfg.n_classes], dlogits)?;
    let cache = &out.cache;

    let dpooled = linear_backward(
        &dlogits,
        &cache.pooled,
        &params.classifier,
        None,
        LinearGradSink {
            base: Some(&mut bufs.head),
            delta: None,
            lora: None,
        },
    )?;
    let s = tokens.len();
    let d = cfg.hidden_size;
    let inv = T::from_f64(1.0 / s as f64);
    let mut dz = Tensor::zeros(&[s, d]);
    for r in 0..s {
        for (t, &g) in dz.row_mut(r).iter_mut().zip(dpooled.data()) {
            *t = g * inv;
        }
    }
    let mut base = bufs.base.as_mut();
    let final_grads = base
        .as_mut()
        .map(|b| (&mut b.final_norm.gamma, &mut b.final_norm.beta));
    let mut dx = layer_norm_backward(&dz, &params.final_norm.gamma, &cache.final_ln, final_grads);

    for l in (0..cfg.n_layers).rev() {
        let hooks = Hooks::for_layer(adapter, l);
        let (prefix, bias, lora) = match bufs.adapter.as_mut() {
            Some(AdapterParams::Prefix(p)) => (Some(&mut p.layers[l]), None, None),
            Some(AdapterParams::Bias(b)) => (None, Some(&mut b.layers[l]), None),
            Some(AdapterParams::Lora(a)) => (None, None, Some(&mut a.layers[l])),
            None => (None, None, None),
        };
        let sink = BlockSink {
            base: base.as_mut().map(|b| &mut b.layers[l]),
            prefix,
            bias,
            lora,
        };
        dx = block_backward(&dx, &params.layers[l], hooks, &cache.blocks[l], sink)?;
    }
    if let Some(b) = base {
        for (pos, &t) in tokens.iter().enumerate() {
            let g = dx.row(pos);
            for (dst, &v) in b.token_embedding.row_mut(t as usize).iter_mut().zip(g) {
                *dst += v;
            }
            for (dst, &v) in b.position_embedding.row_mut(pos).iter_mut().zip(g) {
                *dst += v;
            }
        }
    }
    Ok(loss)
}

/// Mean cross-entropy over the batch and its gradient for the masked tensors.
/// Tensors outside the mask get no entry in the result.
pub fn loss_and_grads<T: Real>(
    params: &ModelParams<T>,
    adapter: Option<&AdapterParams<T>>,
    batch: &Batch,
    mask: &TrainableMask,
) -> Result<(f64, Gradients<T>)> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    check_inputs(params, adapter, batch)?;
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let model_names = ModelParams::<T>::names(&params.config);
    let adapter_names: Vec<String> = adapter
        .map(|a| a.tensors().into_iter().map(|(n, _)| n).collect())
        .unwrap_or_default();
    if let Some(unknown) = mask
        .iter()
        .find(|n| !model_names.iter().any(|m| m == n) && !adapter_names.iter().any(|m| m == n))
    {
        return Err(Error::Config(format!(
            "mask names unknown tensor `{unknown}`"
        )));
    }
    let mut bufs = GradBuffers {
        base: mask.touches_base().then(|| params.zeros_like()),
        head: Linear {
            weight: Tensor::zeros(params.classifier.weight.dims()),
            bias: Tensor::zeros(params.classifier.bias.dims()),
        },
        adapter: adapter.map(|a| a.zeros_like()),
    };
    let weight = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for i in 0..batch.len() {
        loss += accumulate_sequence(
            params,
            adapter,
            batch.sequence(i),
            batch.labels[i] as usize,
            weight,
            &mut bufs,
        )?;
    }
    loss /= batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }

    let mut grads = Gradients::new();
    match &bufs.base {
        Some(base) => {
            let mut base = base.clone();
            base.classifier = bufs.head.clone();
            for (name, t) in base.tensors() {
                if mask.contains(&name) {
                    grads.insert(name, t.clone());
                }
            }
        }
        None => {
            if mask.contains("classifier.weight") {
                grads.insert("classifier.weight".into(), bufs.head.weight.clone());
            }
            if mask.contains("classifier.bias") {
                grads.insert("classifier.bias".into(), bufs.head.bias.clone());
            }
        }
    }
    if let Some(a) = &bufs.adapter {
        for (name, t) in a.tensors() {
            if mask.contains(&name) {
                grads.insert(name, t.clone());
            }
        }
    }
    Ok((loss, grads))
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Fraction of argmax-correct predictions.
pub fn evaluate<T: Real>(
    params: &ModelParams<T>,
    adapter: Option<&AdapterParams<T>>,
    data: &Batch,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_inputs(params, adapter, data)?;
    let mut correct = 0usize;
    for i in 0..data.len() {
        let logits = predict(params, adapter, data.sequence(i))?;
        if argmax(&logits) == data.labels[i] as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests;

fn set_named<T: Real>(
    params: &mut ModelParams<T>,
    adapter: Option<&mut AdapterParams<T>>,
    name: &str,
    values: &[f64],
) -> Result<()> {
    let slot = params
        .tensors_mut()
        .into_iter()
        .chain(adapter.map(|a| a.tensors_mut()).unwrap_or_default())
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Config(format!("unknown tensor `{name}`")))?;
    for (dst, &v) in slot.data_mut().iter_mut().zip(values) {
        *dst = T::from_f64(v);
    }
    Ok(())
}

/// Central-difference check of [`loss_and_grads`] in `f64` on `n_coords`
/// coordinates drawn without replacement from the masked tensors. Returns the
/// worst relative error.
pub fn gradient_check(
    params: &ModelParams<f32>,
    adapter: Option<&AdapterParams<f32>>,
    batch: &Batch,
    mask: &TrainableMask,
    n_coords: usize,
    rng: &mut crate::numerics::Rng,
) -> Result<f64> {
    let p64: ModelParams<f64> = params.cast();
    let a64: Option<AdapterParams<f64>> = adapter.map(|a| a.cast());
    let (_, grads) = loss_and_grads(&p64, a64.as_ref(), batch, mask)?;
    let mut layout = Vec::new();
    let mut flat = Vec::new();
    let mut analytic = Vec::new();
    for (name, g) in &grads {
        let current = p64
            .get(name)
            .or_else(|| a64.as_ref().and_then(|a| a.get(name)))
            .expect("gradient names come from the model or adapter");
        layout.push((name.clone(), flat.len(), g.len()));
        flat.extend_from_slice(current.data());
        analytic.extend_from_slice(g.data());
    }
    let mut coords: Vec<usize> = (0..flat.len()).collect();
    rng.shuffle(&mut coords);
    coords.truncate(n_coords);
    let objective = |x: &[f64]| -> Result<f64> {
        let mut p = p64.clone();
        let mut a = a64.clone();
        for (name, start, len) in &layout {
            set_named(&mut p, a.as_mut(), name, &x[*start..start + len])?;
        }
        loss_and_grads_value(&p, a.as_ref(), batch)
    };
    crate::numerics::finite_diff_check(
        objective,
        &flat,
        &analytic,
        &coords,
        crate::numerics::FD_STEP,
    )
}

/// Mean cross-entropy without gradients.
pub fn loss_value<T: Real>(
    params: &ModelParams<T>,
    adapter: Option<&AdapterParams<T>>,
    batch: &Batch,
) -> Result<f64> {
    check_inputs(params, adapter, batch)?;
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    loss_and_grads_value(params, adapter, batch)
}

fn loss_and_grads_value<T: Real>(
    params: &ModelParams<T>,
    adapter: Option<&AdapterParams<T>>,
    batch: &Batch,
) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..batch.len() {
        let logits = predict(params, adapter, batch.sequence(i))?;
        total -= log_softmax(&logits)[batch.labels[i] as usize];
    }
    Ok(total / batch.len() as f64)
}
