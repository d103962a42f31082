//! Dense row-major tensors and complex images stored as paired real channels.

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;

/// Dense real tensor, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RealTensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> RealTensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        RealTensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        RealTensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(CoreError::ShapeMismatch {
                context: "RealTensor::from_vec",
                expected: vec![n],
                got: vec![data.len()],
            });
        }
        Ok(RealTensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(value: T) -> Self {
        RealTensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Row/column access for 2-D tensors.
    pub fn at(&self, row: usize, col: usize) -> T {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[row * self.shape[1] + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: T) {
        debug_assert_eq!(self.shape.len(), 2);
        let w = self.shape[1];
        self.data[row * w + col] = value;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        RealTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_value(&self) -> T {
        self.data
            .iter()
            .copied()
            .fold(T::neg_infinity(), |a, b| a.max(b))
    }

    pub fn dot(&self, other: &Self) -> T {
        debug_assert_eq!(self.len(), other.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum()
    }

    pub fn norm2(&self) -> T {
        self.dot(self).sqrt()
    }
}

/// Complex image over an H×W grid, stored as paired real channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexImage<T> {
    h: usize,
    w: usize,
    pub re: RealTensor<T>,
    pub im: RealTensor<T>,
}

impl<T: Scalar> ComplexImage<T> {
    pub fn zeros(h: usize, w: usize) -> Self {
        ComplexImage {
            h,
            w,
            re: RealTensor::zeros(&[h, w]),
            im: RealTensor::zeros(&[h, w]),
        }
    }

    pub fn new(re: RealTensor<T>, im: RealTensor<T>) -> Result<Self> {
        if re.shape() != im.shape() || re.shape().len() != 2 {
            return Err(CoreError::ShapeMismatch {
                context: "ComplexImage::new",
                expected: re.shape().to_vec(),
                got: im.shape().to_vec(),
            });
        }
        let (h, w) = (re.shape()[0], re.shape()[1]);
        Ok(ComplexImage { h, w, re, im })
    }

    /// Real image promoted to complex with zero imaginary part.
    pub fn from_real(re: RealTensor<T>) -> Result<Self> {
        let im = RealTensor::zeros(re.shape());
        ComplexImage::new(re, im)
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn at(&self, row: usize, col: usize) -> (T, T) {
        (self.re.at(row, col), self.im.at(row, col))
    }

    pub fn set(&mut self, row: usize, col: usize, re: T, im: T) {
        self.re.set(row, col, re);
        self.im.set(row, col, im);
    }

    /// Pointwise magnitude (exact, no regularization).
    pub fn magnitude(&self) -> RealTensor<T> {
        let data = self
            .re
            .data()
            .iter()
            .zip(self.im.data())
            .map(|(&r, &i)| (r * r + i * i).sqrt())
            .collect();
        RealTensor::from_vec(&[self.h, self.w], data).expect("shape")
    }

    /// Energy ‖x‖₂ over both channels.
    pub fn norm2(&self) -> T {
        (self.re.dot(&self.re) + self.im.dot(&self.im)).sqrt()
    }

    /// Real inner product ⟨a, b⟩ = Σ (a_re·b_re + a_im·b_im).
    pub fn inner_re(&self, other: &Self) -> T {
        self.re.dot(&other.re) + self.im.dot(&other.im)
    }

    /// Complex inner product ⟨a, b⟩ = Σ conj(a)·b, returned as (re, im).
    pub fn inner_complex(&self, other: &Self) -> (T, T) {
        let mut re = T::zero();
        let mut im = T::zero();
        for k in 0..self.len() {
            let (ar, ai) = (self.re.data()[k], self.im.data()[k]);
            let (br, bi) = (other.re.data()[k], other.im.data()[k]);
            re += ar * br + ai * bi;
            im += ar * bi - ai * br;
        }
        (re, im)
    }

    /// Elementwise product with a real mask.
    pub fn mask(&self, mask: &RealTensor<T>) -> Self {
        debug_assert_eq!(mask.len(), self.len());
        let re = RealTensor::from_vec(
            &[self.h, self.w],
            self.re
                .data()
                .iter()
                .zip(mask.data())
                .map(|(&v, &m)| v * m)
                .collect(),
        )
        .expect("shape");
        let im = RealTensor::from_vec(
            &[self.h, self.w],
            self.im
                .data()
                .iter()
                .zip(mask.data())
                .map(|(&v, &m)| v * m)
                .collect(),
        )
        .expect("shape");
        ComplexImage {
            h: self.h,
            w: self.w,
            re,
            im,
        }
    }

    /// Elementwise complex product with `conj(other)`.
    pub fn mul_conj(&self, other: &Self) -> Self {
        let mut out = ComplexImage::zeros(self.h, self.w);
        for k in 0..self.len() {
            let (ar, ai) = (self.re.data()[k], self.im.data()[k]);
            let (br, bi) = (other.re.data()[k], other.im.data()[k]);
            out.re.data_mut()[k] = ar * br + ai * bi;
            out.im.data_mut()[k] = ai * br - ar * bi;
        }
        out
    }

    /// Elementwise complex product.
    pub fn mul(&self, other: &Self) -> Self {
        let mut out = ComplexImage::zeros(self.h, self.w);
        for k in 0..self.len() {
            let (ar, ai) = (self.re.data()[k], self.im.data()[k]);
            let (br, bi) = (other.re.data()[k], other.im.data()[k]);
            out.re.data_mut()[k] = ar * br - ai * bi;
            out.im.data_mut()[k] = ar * bi + ai * br;
        }
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for k in 0..self.len() {
            out.re.data_mut()[k] += other.re.data()[k];
            out.im.data_mut()[k] += other.im.data()[k];
        }
        out
    }

    pub fn sub(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for k in 0..self.len() {
            out.re.data_mut()[k] -= other.re.data()[k];
            out.im.data_mut()[k] -= other.im.data()[k];
        }
        out
    }

    pub fn scale(&self, s: T) -> Self {
        let mut out = self.clone();
        for v in out.re.data_mut() {
            *v *= s;
        }
        for v in out.im.data_mut() {
            *v *= s;
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.re.all_finite() && self.im.all_finite()
    }
}
