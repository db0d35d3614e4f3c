use std::fmt;

use crate::{Error, Result};

/// Floating point element type. Training runs in `f32`; `f64` is used by the
/// gradient checker so central differences stay well above rounding noise.
pub trait Real:
    Copy
    + Default
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    fn is_finite(self) -> bool {
        self.to_f64().is_finite()
    }
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// Dense row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Real = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.dims)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if dims.contains(&0) && !data.is_empty() {
            return Err(Error::shape(format!("zero-sized dims {dims:?} with data")));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} need {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![T::ZERO; n],
        }
    }

    pub fn full(dims: &[usize], value: T) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self {
            dims: vec![data.len()],
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::ONE;
        }
        t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Rows of a matrix view; a vector counts as one row.
    pub fn rows(&self) -> usize {
        match self.dims.len() {
            0 => 1,
            1 => 1,
            _ => self.dims[..self.dims.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.dims.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(mut self, dims: Vec<usize>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims
            )));
        }
        self.dims = dims;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|x| U::from_f64(x.to_f64())).collect(),
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.dims == other.dims
    }

    pub fn ensure_shape(&self, dims: &[usize], what: &str) -> Result<()> {
        if self.dims != dims {
            return Err(Error::shape(format!(
                "{what}: expected {dims:?}, got {:?}",
                self.dims
            )));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&x| x == T::ZERO)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::shape(format!(
                "add {:?} + {:?}",
                self.dims, other.dims
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for x in &mut self.data {
            *x *= s;
        }
    }

    pub fn fill(&mut self, v: T) {
        self.data.fill(v);
    }

    pub fn sum_sq(&self) -> f64 {
        self.data
            .iter()
            .map(|x| {
                let v = x.to_f64();
                v * v
            })
            .sum()
    }

    /// Bitwise equality of the payload, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_f64().to_bits() == b.to_f64().to_bits())
    }
}
