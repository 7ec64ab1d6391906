//! Dense tensors, trainable parameters, and the layer primitives the
//! reference network is built from.

mod gradcheck;
mod ops;
mod optim;

pub use gradcheck::finite_difference_check;
pub use ops::*;
pub use optim::{adam_step, cosine_lr, sgd_step, AdamParams, SgdParams};

use crate::error::{Error, Result};
use crate::rng::Rng;
use std::fmt;

/// Scalar element: f32 for training, f64 for gradient-check builds.
pub trait Elem:
    num_traits::Float + num_traits::FromPrimitive + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    fn lit(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// C := alpha * A(m x k) * B(k x n) + beta * C(m x n) with explicit
    /// row/column strides, so callers can pass transposed views.
    ///
    /// # Safety
    /// Caller guarantees the pointers cover the full strided matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Elem for f32 {
    fn lit(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Elem for f64 {
    fn lit(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Dense row-major n-dimensional array with an optional gradient slot.
#[derive(Clone, PartialEq)]
pub struct Tensor<E: Elem = f32> {
    shape: Vec<usize>,
    data: Vec<E>,
    grad: Option<Vec<E>>,
}

impl<E: Elem> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dim(format!("zero extent in shape {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::Dim(format!(
                "shape {shape:?} wants {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![E::zero(); numel], grad: None }
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel], grad: None }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> E) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..numel).map(&mut f).collect(), grad: None }
    }

    pub fn scalar(value: E) -> Self {
        Tensor { shape: vec![1], data: vec![value], grad: None }
    }

    /// I.i.d. standard normal entries scaled by `std`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        Self::from_fn(shape, |_| E::lit(rng.gaussian() * std))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn grad(&self) -> Option<&[E]> {
        self.grad.as_deref()
    }

    /// Gradient slot, allocated to zeros on first use.
    pub fn grad_mut(&mut self) -> &mut [E] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![E::zero(); n])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.fill(E::zero());
        }
    }

    pub fn accumulate_grad(&mut self, delta: &[E]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let g = self.grad_mut();
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi = *gi + *di;
        }
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect(), grad: None }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// Casts elementwise; used by the f64 gradient-check paths.
    pub fn cast<T: Elem>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| T::lit(x.as_f64())).collect(),
            grad: None,
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

impl<E: Elem> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

/// A learnable tensor with gradient accumulator and lazily allocated
/// optimizer slots. `decay` is false for step sizes and BN affine terms.
#[derive(Clone, Debug)]
pub struct Parameter<E: Elem = f32> {
    pub value: Tensor<E>,
    pub learnable: bool,
    pub decay: bool,
    pub(crate) momentum: Option<Vec<E>>,
    pub(crate) adam_m: Option<Vec<E>>,
    pub(crate) adam_v: Option<Vec<E>>,
    pub(crate) adam_t: u64,
}

impl<E: Elem> Parameter<E> {
    pub fn new(value: Tensor<E>) -> Self {
        Parameter { value, learnable: true, decay: true, momentum: None, adam_m: None, adam_v: None, adam_t: 0 }
    }

    pub fn no_decay(value: Tensor<E>) -> Self {
        Parameter { decay: false, ..Self::new(value) }
    }

    pub fn frozen(value: Tensor<E>) -> Self {
        Parameter { learnable: false, decay: false, ..Self::new(value) }
    }

    pub fn scalar(value: E) -> Self {
        Self::new(Tensor::scalar(value))
    }

    pub fn scalar_value(&self) -> E {
        self.value.data()[0]
    }

    pub fn set_scalar(&mut self, v: E) {
        self.value.data_mut()[0] = v;
    }

    pub fn zero_grad(&mut self) {
        self.value.zero_grad();
    }

    pub fn add_grad(&mut self, delta: &[E]) {
        self.value.accumulate_grad(delta);
    }

    pub fn add_scalar_grad(&mut self, delta: E) {
        self.value.accumulate_grad(&[delta]);
    }

    /// Elementwise EMA pull toward `src`: self = tau * self + (1 - tau) * src.
    pub fn ema_from(&mut self, src: &Parameter<E>, tau: E) {
        ema_slice(self.value.data_mut(), src.value.data(), tau);
    }
}

pub(crate) fn ema_slice<E: Elem>(dst: &mut [E], src: &[E], tau: E) {
    debug_assert_eq!(dst.len(), src.len());
    let one = E::one();
    for (d, s) in dst.iter_mut().zip(src) {
        *d = tau * *d + (one - tau) * *s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    #[test]
    fn new_checks_shape() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn grad_matches_shape() {
        let mut t = Tensor::<f32>::zeros(&[2, 2]);
        t.grad_mut()[3] = 1.0;
        assert_eq!(t.grad().unwrap().len(), t.numel());
        t.zero_grad();
        assert!(t.grad().unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn randn_deterministic() {
        let mut a = Rng::new(3, Stream::Init);
        let mut b = Rng::new(3, Stream::Init);
        let x = Tensor::<f32>::randn(&[8], 1.0, &mut a);
        let y = Tensor::<f32>::randn(&[8], 1.0, &mut b);
        assert_eq!(x, y);
    }

    #[test]
    fn gemm_small() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0f32, 2.0, 3.0, 4.0];
        let b = [5.0f32, 6.0, 7.0, 8.0];
        let mut c = [0.0f32; 4];
        unsafe {
            f32::gemm(2, 2, 2, 1.0, a.as_ptr(), 2, 1, b.as_ptr(), 2, 1, 0.0, c.as_mut_ptr(), 2, 1)
        };
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }
}
