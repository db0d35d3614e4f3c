//! Multi-head scaled dot-product attention over an optional key/value prefix.

use crate::numerics::ops::softmax_rows_in_place;
use crate::numerics::{matmul, matmul_nt, matmul_tn, Real, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct AttentionCache<T: Real> {
    /// Per head `[m × (n+m)]`.
    pub probs: Vec<Tensor<T>>,
    q_heads: Vec<Tensor<T>>,
    k_ext: Vec<Tensor<T>>,
    v_ext: Vec<Tensor<T>>,
    prefix_len: usize,
}

pub struct AttentionGrads<T: Real> {
    pub dq: Tensor<T>,
    pub dk: Tensor<T>,
    pub dv: Tensor<T>,
    pub dprefix_keys: Tensor<T>,
    pub dprefix_values: Tensor<T>,
}

fn head_slice<T: Real>(x: &Tensor<T>, h: usize, hd: usize) -> Tensor<T> {
    let rows = x.rows();
    let mut out = Vec::with_capacity(rows * hd);
    for r in 0..rows {
        out.extend_from_slice(&x.row(r)[h * hd..(h + 1) * hd]);
    }
    Tensor::new(vec![rows, hd], out).expect("slice dims")
}

/// Rows of `prefix` followed by rows of `x`, restricted to head `h`.
fn head_concat<T: Real>(
    prefix: Option<&Tensor<T>>,
    x: &Tensor<T>,
    h: usize,
    hd: usize,
) -> Tensor<T> {
    let n = prefix.map_or(0, |p| p.rows());
    let mut out = Vec::with_capacity((n + x.rows()) * hd);
    if let Some(p) = prefix {
        for r in 0..n {
            out.extend_from_slice(&p.row(r)[h * hd..(h + 1) * hd]);
        }
    }
    for r in 0..x.rows() {
        out.extend_from_slice(&x.row(r)[h * hd..(h + 1) * hd]);
    }
    Tensor::new(vec![n + x.rows(), hd], out).expect("concat dims")
}

fn scatter_head<T: Real>(
    dst: &mut Tensor<T>,
    src: &Tensor<T>,
    row_offset: usize,
    h: usize,
    hd: usize,
) {
    for r in 0..src.rows() {
        let target = &mut dst.row_mut(r + row_offset)[h * hd..(h + 1) * hd];
        for (t, &s) in target.iter_mut().zip(src.row(r)) {
            *t += s;
        }
    }
}

/// `q`, `k`, `v`: `[m × d]`; prefix keys/values `[n × d]` are prepended to the
/// keys and values of every head (head `h` reads columns `h·d_h..(h+1)·d_h`).
pub fn forward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    prefix: Option<(&Tensor<T>, &Tensor<T>)>,
    n_heads: usize,
) -> Result<(Tensor<T>, AttentionCache<T>)> {
    let (m, d) = (q.rows(), q.cols());
    if k.dims() != q.dims() || v.dims() != q.dims() {
        return Err(Error::shape(format!(
            "attention q {:?}, k {:?}, v {:?}",
            q.dims(),
            k.dims(),
            v.dims()
        )));
    }
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::shape(format!(
            "{d} columns not divisible into {n_heads} heads"
        )));
    }
    let mut n = 0;
    if let Some((pk, pv)) = prefix {
        n = pk.rows();
        if pk.rank() != 2 || pk.cols() != d || pv.dims() != pk.dims() {
            return Err(Error::shape(format!(
                "prefix keys {:?} / values {:?} incompatible with width {d}",
                pk.dims(),
                pv.dims()
            )));
        }
    }
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = Tensor::zeros(&[m, d]);
    let mut cache = AttentionCache {
        probs: Vec::with_capacity(n_heads),
        q_heads: Vec::with_capacity(n_heads),
        k_ext: Vec::with_capacity(n_heads),
        v_ext: Vec::with_capacity(n_heads),
        prefix_len: n,
    };
    for h in 0..n_heads {
        let qh = head_slice(q, h, hd);
        let kh = head_concat(prefix.map(|p| p.0), k, h, hd);
        let vh = head_concat(prefix.map(|p| p.1), v, h, hd);
        let mut scores = matmul_nt(&qh, &kh)?;
        scores.scale(T::from_f64(scale));
        softmax_rows_in_place(&mut scores);
        let oh = matmul(&scores, &vh)?;
        scatter_head(&mut out, &oh, 0, h, hd);
        cache.probs.push(scores);
        cache.q_heads.push(qh);
        cache.k_ext.push(kh);
        cache.v_ext.push(vh);
    }
    Ok((out, cache))
}

pub fn backward<T: Real>(dout: &Tensor<T>, cache: &AttentionCache<T>) -> Result<AttentionGrads<T>> {
    let (m, d) = (dout.rows(), dout.cols());
    let n_heads = cache.probs.len();
    let hd = d / n_heads;
    let n = cache.prefix_len;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut g = AttentionGrads {
        dq: Tensor::zeros(&[m, d]),
        dk: Tensor::zeros(&[m, d]),
        dv: Tensor::zeros(&[m, d]),
        dprefix_keys: Tensor::zeros(&[n, d]),
        dprefix_values: Tensor::zeros(&[n, d]),
    };
    for h in 0..n_heads {
        let probs = &cache.probs[h];
        let doh = head_slice(dout, h, hd);
        let dprobs = matmul_nt(&doh, &cache.v_ext[h])?;
        let dv_ext = matmul_tn(probs, &doh)?;
        // softmax Jacobian, then the 1/√d_h scaling
        let cols = probs.cols();
        let mut dscores = Vec::with_capacity(m * cols);
        for r in 0..m {
            let p = probs.row(r);
            let dp = dprobs.row(r);
            let inner: f64 = p.iter().zip(dp).map(|(a, b)| a.to_f64() * b.to_f64()).sum();
            for (pi, dpi) in p.iter().zip(dp) {
                dscores.push(T::from_f64(pi.to_f64() * (dpi.to_f64() - inner) * scale));
            }
        }
        let dscores = Tensor::new(vec![m, cols], dscores)?;
        let dqh = matmul(&dscores, &cache.k_ext[h])?;
        let dk_ext = matmul_tn(&dscores, &cache.q_heads[h])?;
        scatter_head(&mut g.dq, &dqh, 0, h, hd);
        split_scatter(&mut g.dprefix_keys, &mut g.dk, &dk_ext, n, h, hd);
        split_scatter(&mut g.dprefix_values, &mut g.dv, &dv_ext, n, h, hd);
    }
    Ok(g)
}

fn split_scatter<T: Real>(
    prefix: &mut Tensor<T>,
    main: &mut Tensor<T>,
    ext: &Tensor<T>,
    n: usize,
    h: usize,
    hd: usize,
) {
    for r in 0..ext.rows() {
        let src = ext.row(r);
        let dst = if r < n {
            &mut prefix.row_mut(r)[h * hd..(h + 1) * hd]
        } else {
            &mut main.row_mut(r - n)[h * hd..(h + 1) * hd]
        };
        for (t, &s) in dst.iter_mut().zip(src) {
            *t += s;
        }
    }
}
