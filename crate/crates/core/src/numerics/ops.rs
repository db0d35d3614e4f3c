//! Dense kernels. Sums accumulate in `f64` regardless of the element type.

use super::tensor::{Real, Tensor};
use crate::{Error, Result};

fn matrix_dims<T: Real>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match t.dims() {
        [r, c] => Ok((*r, *c)),
        [c] => Ok((1, *c)),
        d => Err(Error::shape(format!(
            "{what}: expected a matrix, got {d:?}"
        ))),
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = matrix_dims(a, "matmul lhs")?;
    let (k2, n) = matrix_dims(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dims differ: [{m}×{k}] · [{k2}×{n}]"
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(m * n);
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.fill(0.0);
        for t in 0..k {
            let x = ad[i * k + t].to_f64();
            if x == 0.0 {
                continue;
            }
            for (slot, &y) in acc.iter_mut().zip(&bd[t * n..(t + 1) * n]) {
                *slot += x * y.to_f64();
            }
        }
        out.extend(acc.iter().map(|&v| T::from_f64(v)));
    }
    Tensor::new(vec![m, n], out)
}

/// `a[m×k] · b[n×k]ᵀ`, the layout of `x · Wᵀ` for a weight stored out×in.
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = matrix_dims(a, "matmul_nt lhs")?;
    let (n, k2) = matrix_dims(b, "matmul_nt rhs")?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul_nt inner dims differ: [{m}×{k}] · [{n}×{k2}]ᵀ"
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let ar = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &bd[j * k..(j + 1) * k];
            out.push(T::from_f64(dot(ar, br)));
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a[k×m]ᵀ · b[k×n]`, used for weight gradients.
pub fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = matrix_dims(a, "matmul_tn lhs")?;
    let (k2, n) = matrix_dims(b, "matmul_tn rhs")?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul_tn inner dims differ: [{k}×{m}]ᵀ · [{k2}×{n}]"
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut acc = vec![0.0f64; m * n];
    for t in 0..k {
        let brow = &bd[t * n..(t + 1) * n];
        for i in 0..m {
            let x = ad[t * m + i].to_f64();
            if x == 0.0 {
                continue;
            }
            for (slot, &y) in acc[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *slot += x * y.to_f64();
            }
        }
    }
    Tensor::new(vec![m, n], acc.into_iter().map(T::from_f64).collect())
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| x.to_f64() * y.to_f64())
        .sum()
}

/// Softmax along `axis` with max subtraction.
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let dims = x.dims();
    if axis >= dims.len() {
        return Err(Error::shape(format!(
            "softmax axis {axis} out of range for {dims:?}"
        )));
    }
    x.ensure_finite("softmax input")?;
    let len = dims[axis];
    let inner: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    let src = x.data();
    let mut out = vec![T::ZERO; src.len()];
    let mut buf = vec![0.0f64; len];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = src[idx(j)].to_f64();
            }
            softmax_f64_in_place(&mut buf);
            for (j, &b) in buf.iter().enumerate() {
                out[idx(j)] = T::from_f64(b);
            }
        }
    }
    Tensor::new(dims.to_vec(), out)
}

pub(crate) fn softmax_f64_in_place(buf: &mut [f64]) {
    let max = buf.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for b in buf.iter_mut() {
        *b = (*b - max).exp();
        sum += *b;
    }
    for b in buf.iter_mut() {
        *b /= sum;
    }
}

/// Row-wise softmax over the last axis, in place.
pub fn softmax_rows_in_place<T: Real>(x: &mut Tensor<T>) {
    let cols = x.cols();
    let mut buf = vec![0.0f64; cols];
    for row in x.data_mut().chunks_mut(cols) {
        for (b, &v) in buf.iter_mut().zip(row.iter()) {
            *b = v.to_f64();
        }
        softmax_f64_in_place(&mut buf);
        for (v, &b) in row.iter_mut().zip(&buf) {
            *v = T::from_f64(b);
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Cached statistics from a layer-norm forward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache<T: Real> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<f64>,
}

/// Row-wise layer norm: `gamma · (x − μ)/σ + beta`.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let d = x.cols();
    gamma.ensure_shape(&[d], "layer norm gamma")?;
    beta.ensure_shape(&[d], "layer norm beta")?;
    let rows = x.rows();
    let mut y = Vec::with_capacity(x.len());
    let mut xhat = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / d as f64;
        let var = row
            .iter()
            .map(|v| {
                let c = v.to_f64() - mean;
                c * c
            })
            .sum::<f64>()
            / d as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(is);
        for (j, v) in row.iter().enumerate() {
            let h = (v.to_f64() - mean) * is;
            xhat.push(T::from_f64(h));
            y.push(T::from_f64(
                gamma.data()[j].to_f64() * h + beta.data()[j].to_f64(),
            ));
        }
    }
    let dims = x.dims().to_vec();
    Ok((
        Tensor::new(dims.clone(), y)?,
        LayerNormCache {
            normalized: Tensor::new(dims, xhat)?,
            inv_std,
        },
    ))
}

/// Backward through [`layer_norm`]: returns `dx` and accumulates into
/// `dgamma`/`dbeta` when provided.
pub fn layer_norm_backward<T: Real>(
    dy: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &LayerNormCache<T>,
    mut grads: Option<(&mut Tensor<T>, &mut Tensor<T>)>,
) -> Tensor<T> {
    let d = dy.cols();
    let rows = dy.rows();
    let mut dx = Vec::with_capacity(dy.len());
    let mut dxhat = vec![0.0f64; d];
    for r in 0..rows {
        let dyr = dy.row(r);
        let xh = cache.normalized.row(r);
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for j in 0..d {
            let g = dyr[j].to_f64();
            dxhat[j] = g * gamma.data()[j].to_f64();
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xh[j].to_f64();
        }
        mean_d /= d as f64;
        mean_dx /= d as f64;
        let is = cache.inv_std[r];
        for j in 0..d {
            dx.push(T::from_f64(
                is * (dxhat[j] - mean_d - xh[j].to_f64() * mean_dx),
            ));
        }
        if let Some((dg, db)) = grads.as_mut() {
            for j in 0..d {
                dg.data_mut()[j] += T::from_f64(dyr[j].to_f64() * xh[j].to_f64());
                db.data_mut()[j] += dyr[j];
            }
        }
    }
    Tensor::new(dy.dims().to_vec(), dx).expect("same dims as dy")
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn naive(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (m, k) = (a.dims()[0], a.dims()[1]);
        let n = b.dims()[1];
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for t in 0..k {
                    c[i * n + j] += a.at(i, t) * b.at(t, j);
                }
            }
        }
        c
    }

    fn random(rng: &mut Rng, dims: &[usize]) -> Tensor<f64> {
        let n = dims.iter().product();
        Tensor::new(
            dims.to_vec(),
            (0..n).map(|_| rng.normal(0.0, 1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn matmul_identity() {
        let x = Tensor::<f32>::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[7.0, 8.0, 9.0]])
            .unwrap();
        assert_eq!(matmul(&Tensor::identity(3), &x).unwrap(), x);
    }

    #[test]
    fn matmul_hand_example() {
        let a = Tensor::<f32>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Tensor::<f32>::from_rows(&[&[5.0], &[6.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.dims(), &[2, 1]);
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(11);
        let a = random(&mut rng, &[4, 5]);
        let b = random(&mut rng, &[5, 3]);
        let c = matmul(&a, &b).unwrap();
        for (x, y) in c.data().iter().zip(naive(&a, &b)) {
            assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0));
        }
    }

    #[test]
    fn transposed_variants_agree() {
        let mut rng = Rng::new(3);
        let a = random(&mut rng, &[4, 5]);
        let b = random(&mut rng, &[5, 3]);
        let bt = transpose(&b);
        let at = transpose(&a);
        let c = matmul(&a, &b).unwrap();
        let c_nt = matmul_nt(&a, &bt).unwrap();
        let c_tn = matmul_tn(&at, &b).unwrap();
        for ((x, y), z) in c.data().iter().zip(c_nt.data()).zip(c_tn.data()) {
            assert!((x - y).abs() < 1e-12 && (x - z).abs() < 1e-12);
        }
    }

    fn transpose(t: &Tensor<f64>) -> Tensor<f64> {
        let (r, c) = (t.dims()[0], t.dims()[1]);
        let mut d = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                d[j * r + i] = t.at(i, j);
            }
        }
        Tensor::new(vec![c, r], d).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::<f32>::vector(vec![0.0, 0.0]), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&Tensor::<f32>::vector(vec![1000.0, 1000.0]), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        // exp(k)/(e+e²+e³) evaluated in high precision
        let s = softmax(&Tensor::<f64>::vector(vec![1.0, 2.0, 3.0]), 0).unwrap();
        for (x, y) in s.data().iter().zip([0.09003057, 0.24472847, 0.66524096]) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_inner_axis() {
        let x = Tensor::<f64>::new(vec![2, 2], vec![0.0, 5.0, 0.0, 5.0]).unwrap();
        let s = softmax(&x, 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_nan() {
        assert!(softmax(&Tensor::<f32>::vector(vec![f32::NAN]), 0).is_err());
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_shift_invariant(
            xs in proptest::collection::vec(-50.0f64..50.0, 1..12),
            c in -100.0f64..100.0,
        ) {
            let t = Tensor::vector(xs.clone());
            let s = softmax(&t, 0).unwrap();
            let sum: f64 = s.data().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            prop_assert!(s.data().iter().all(|&v| v >= 0.0));
            let shifted = softmax(&Tensor::vector(xs.iter().map(|x| x + c).collect()), 0).unwrap();
            for (a, b) in s.data().iter().zip(shifted.data()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn matmul_random_matches_naive(seed in 0u64..1000, m in 1usize..6, k in 1usize..6, n in 1usize..6) {
            let mut rng = Rng::new(seed);
            let a = random(&mut rng, &[m, k]);
            let b = random(&mut rng, &[k, n]);
            let c = matmul(&a, &b).unwrap();
            for (x, y) in c.data().iter().zip(naive(&a, &b)) {
                prop_assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0));
            }
        }
    }
}
