use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type of a tensor: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    /// Name written into checkpoints and cache indexes.
    const DTYPE: &'static str;
    /// Bytes per element in little-endian files.
    const WIDTH: usize;

    fn lit(x: f64) -> Self;
    fn put_le(self, out: &mut Vec<u8>);
    fn get_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const WIDTH: usize = 4;

    fn lit(x: f64) -> Self {
        x as f32
    }

    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn get_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const WIDTH: usize = 8;

    fn lit(x: f64) -> Self {
        x
    }

    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn get_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Lower bound applied to each vector norm inside cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Cosine similarity pieces shared by the graph op and the serving path.
///
/// Norms are stored already clamped to [`COSINE_EPS`].
#[derive(Clone, Copy, Debug)]
pub struct CosineParts<F> {
    pub cos: F,
    pub norm_a: F,
    pub norm_b: F,
    pub a_clamped: bool,
    pub b_clamped: bool,
}

impl<F> CosineParts<F> {
    pub fn clamped(&self) -> bool {
        self.a_clamped || self.b_clamped
    }
}

pub fn cosine_parts<F: Scalar>(a: &[F], b: &[F]) -> CosineParts<F> {
    let eps = F::lit(COSINE_EPS);
    let mut dot = F::zero();
    let mut aa = F::zero();
    let mut bb = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        aa += x * x;
        bb += y * y;
    }
    let (na, nb) = (aa.sqrt(), bb.sqrt());
    let (a_clamped, b_clamped) = (na < eps, nb < eps);
    let (norm_a, norm_b) = (na.max(eps), nb.max(eps));
    CosineParts { cos: dot / (norm_a * norm_b), norm_a, norm_b, a_clamped, b_clamped }
}

/// Dense row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
    requires_grad: bool,
    grad: Option<Vec<F>>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![F::zero(); n], requires_grad: false, grad: None }
    }

    pub fn scalar(x: F) -> Self {
        Tensor { shape: vec![1], data: vec![x], requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[F]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, &x)| *b += x),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Removes and returns the gradient buffer.
    pub fn take_grad(&mut self) -> Option<Vec<F>> {
        self.grad.take()
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[F] {
        let w = *self.shape.last().unwrap_or(&1);
        &self.data[i * w..(i + 1) * w]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect()
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::lit(x.to_f64().unwrap_or(f64::NAN))).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}
