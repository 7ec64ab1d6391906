//! Forward/backward rules for the layer primitives: convolution, batch
//! normalization, relu, pooling, fully-connected, and the two losses.
//!
//! Backward functions take the caches their forward produced and return input
//! gradients; parameter gradients are accumulated into the owning
//! [`Parameter`]s by the caller (or here, where the parameter is an argument).

use super::{Elem, Parameter, Tensor};
use crate::error::{Error, Result};

/// Forward mode for stateful layers.
///
/// `Frozen` normalizes by batch statistics like `Train` but leaves running
/// statistics untouched; teacher passes use it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
    Frozen,
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation), square kernel, symmetric padding.
// ---------------------------------------------------------------------------

pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let span = input + 2 * pad;
    if span < kernel || stride == 0 {
        return Err(Error::Dim(format!(
            "conv output size not positive for input {input}, kernel {kernel}, stride {stride}, pad {pad}"
        )));
    }
    Ok((span - kernel) / stride + 1)
}

fn conv_dims<E: Elem>(input: &Tensor<E>, weight: &Tensor<E>, stride: usize, pad: usize) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    let [n, c_in, h, w] = match *input.shape() {
        [n, c, h, w] => [n, c, h, w],
        _ => return Err(Error::Dim(format!("conv input must be 4-d, got {:?}", input.shape()))),
    };
    let [c_out, wc_in, kh, kw] = match *weight.shape() {
        [o, i, kh, kw] => [o, i, kh, kw],
        _ => return Err(Error::Dim(format!("conv weight must be 4-d, got {:?}", weight.shape()))),
    };
    if wc_in != c_in {
        return Err(Error::Dim(format!("conv channels: input has {c_in}, weight wants {wc_in}")));
    }
    if kh != kw {
        return Err(Error::Dim(format!("conv kernel must be square, got {kh}x{kw}")));
    }
    let oh = conv_out_dim(h, kh, stride, pad)?;
    let ow = conv_out_dim(w, kw, stride, pad)?;
    Ok((n, c_in, h, w, c_out, oh, ow))
}

/// Unfolds one sample `x[C,H,W]` into `col[C*K*K, OH*OW]`.
fn im2col<E: Elem>(x: &[E], c_in: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, oh: usize, ow: usize, col: &mut [E]) {
    debug_assert_eq!(col.len(), c_in * k * k * oh * ow);
    let mut row = 0;
    for c in 0..c_in {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                row += 1;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst_row.fill(E::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize { E::zero() } else { src_row[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-adds `col[C*K*K, OH*OW]` back into one sample `dx[C,H,W]`.
fn col2im_add<E: Elem>(col: &[E], c_in: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, oh: usize, ow: usize, dx: &mut [E]) {
    let mut row = 0;
    for c in 0..c_in {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                row += 1;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            let idx = base + ix as usize;
                            plane[idx] = plane[idx] + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Standard cross-correlation: `input[N,C_in,H,W] * weight[C_out,C_in,K,K]`.
pub fn conv2d_forward<E: Elem>(input: &Tensor<E>, weight: &Tensor<E>, stride: usize, pad: usize) -> Result<Tensor<E>> {
    let (n, c_in, h, w, c_out, oh, ow) = conv_dims(input, weight, stride, pad)?;
    let k = weight.shape()[2];
    let ckk = c_in * k * k;
    let mut out = Tensor::zeros(&[n, c_out, oh, ow]);
    let mut col = vec![E::zero(); ckk * oh * ow];
    for s in 0..n {
        im2col(&input.data()[s * c_in * h * w..], c_in, h, w, k, stride, pad, oh, ow, &mut col);
        let dst = &mut out.data_mut()[s * c_out * oh * ow..(s + 1) * c_out * oh * ow];
        unsafe {
            E::gemm(
                c_out,
                ckk,
                oh * ow,
                E::one(),
                weight.data().as_ptr(),
                ckk as isize,
                1,
                col.as_ptr(),
                (oh * ow) as isize,
                1,
                E::zero(),
                dst.as_mut_ptr(),
                (oh * ow) as isize,
                1,
            );
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d_forward`] w.r.t. input and weight.
pub fn conv2d_backward<E: Elem>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    stride: usize,
    pad: usize,
    dy: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let (n, c_in, h, w, c_out, oh, ow) = conv_dims(input, weight, stride, pad)?;
    let k = weight.shape()[2];
    let ckk = c_in * k * k;
    if dy.shape() != [n, c_out, oh, ow] {
        return Err(Error::Dim(format!("conv dy shape {:?} != [{n},{c_out},{oh},{ow}]", dy.shape())));
    }
    let mut dinput = Tensor::zeros(input.shape());
    let mut dweight = Tensor::zeros(weight.shape());
    let mut col = vec![E::zero(); ckk * oh * ow];
    let mut dcol = vec![E::zero(); ckk * oh * ow];
    for s in 0..n {
        im2col(&input.data()[s * c_in * h * w..], c_in, h, w, k, stride, pad, oh, ow, &mut col);
        let dys = &dy.data()[s * c_out * oh * ow..(s + 1) * c_out * oh * ow];
        unsafe {
            // dW += dy[s] (C_out x OHOW) * col^T (OHOW x CKK)
            E::gemm(
                c_out,
                oh * ow,
                ckk,
                E::one(),
                dys.as_ptr(),
                (oh * ow) as isize,
                1,
                col.as_ptr(),
                1,
                (oh * ow) as isize,
                E::one(),
                dweight.data_mut().as_mut_ptr(),
                ckk as isize,
                1,
            );
            // dcol = W^T (CKK x C_out) * dy[s] (C_out x OHOW)
            E::gemm(
                ckk,
                c_out,
                oh * ow,
                E::one(),
                weight.data().as_ptr(),
                1,
                ckk as isize,
                dys.as_ptr(),
                (oh * ow) as isize,
                1,
                E::zero(),
                dcol.as_mut_ptr(),
                (oh * ow) as isize,
                1,
            );
        }
        col2im_add(&dcol, c_in, h, w, k, stride, pad, oh, ow, &mut dinput.data_mut()[s * c_in * h * w..(s + 1) * c_in * h * w]);
    }
    Ok((dinput, dweight))
}

// ---------------------------------------------------------------------------
// Batch normalization with running statistics (biased variance).
// ---------------------------------------------------------------------------

/// Per-channel affine batch normalization state.
#[derive(Clone, Debug)]
pub struct BnState<E: Elem = f32> {
    pub gamma: Parameter<E>,
    pub beta: Parameter<E>,
    pub running_mean: Vec<E>,
    pub running_var: Vec<E>,
    pub momentum: E,
    pub eps: E,
    /// Number of train-mode statistic updates this instance has absorbed.
    pub update_count: u64,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub struct BnCache<E: Elem = f32> {
    xhat: Tensor<E>,
    inv_std: Vec<E>,
    batch_stats: bool,
}

impl<E: Elem> BnState<E> {
    pub fn new(channels: usize) -> Self {
        BnState {
            gamma: Parameter::no_decay(Tensor::full(&[channels], E::one())),
            beta: Parameter::no_decay(Tensor::zeros(&[channels])),
            running_mean: vec![E::zero(); channels],
            running_var: vec![E::one(); channels],
            momentum: E::lit(BN_MOMENTUM),
            eps: E::lit(BN_EPS),
            update_count: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn forward(&mut self, input: &Tensor<E>, mode: Mode) -> Result<(Tensor<E>, BnCache<E>)> {
        let [n, c, h, w] = match *input.shape() {
            [n, c, h, w] => [n, c, h, w],
            _ => return Err(Error::Dim(format!("bn input must be 4-d, got {:?}", input.shape()))),
        };
        if c != self.channels() {
            return Err(Error::Dim(format!("bn channels: input has {c}, state has {}", self.channels())));
        }
        if n == 0 {
            return Err(Error::Dim("bn train mode needs a non-empty batch".into()));
        }
        let plane = h * w;
        let count = E::lit((n * plane) as f64);
        let (mean, var) = match mode {
            Mode::Eval => (self.running_mean.clone(), self.running_var.clone()),
            Mode::Train | Mode::Frozen => {
                let mut mean = vec![E::zero(); c];
                let mut var = vec![E::zero(); c];
                for ch in 0..c {
                    let mut sum = E::zero();
                    let mut sq = E::zero();
                    for s in 0..n {
                        let base = (s * c + ch) * plane;
                        for &x in &input.data()[base..base + plane] {
                            sum = sum + x;
                            sq = sq + x * x;
                        }
                    }
                    let m = sum / count;
                    mean[ch] = m;
                    var[ch] = (sq / count - m * m).max(E::zero());
                }
                if mode == Mode::Train {
                    let mom = self.momentum;
                    let keep = E::one() - mom;
                    for ch in 0..c {
                        self.running_mean[ch] = keep * self.running_mean[ch] + mom * mean[ch];
                        self.running_var[ch] = keep * self.running_var[ch] + mom * var[ch];
                    }
                    self.update_count += 1;
                }
                (mean, var)
            }
        };
        let inv_std: Vec<E> = var.iter().map(|&v| E::one() / (v + self.eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(input.shape());
        let mut out = Tensor::zeros(input.shape());
        let gamma = self.gamma.value.data();
        let beta = self.beta.value.data();
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                let (m, is, g, b) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
                for i in base..base + plane {
                    let xh = (input.data()[i] - m) * is;
                    xhat.data_mut()[i] = xh;
                    out.data_mut()[i] = g * xh + b;
                }
            }
        }
        let batch_stats = mode != Mode::Eval;
        Ok((out, BnCache { xhat, inv_std, batch_stats }))
    }

    /// Cache-free, non-mutating forward: batch statistics when
    /// `batch_stats`, running statistics otherwise.
    pub fn forward_lean(&self, input: &Tensor<E>, batch_stats: bool) -> Result<Tensor<E>> {
        let [n, c, h, w] = match *input.shape() {
            [n, c, h, w] => [n, c, h, w],
            _ => return Err(Error::Dim(format!("bn input must be 4-d, got {:?}", input.shape()))),
        };
        if c != self.channels() {
            return Err(Error::Dim(format!("bn channels: input has {c}, state has {}", self.channels())));
        }
        let plane = h * w;
        let (mean, var) = if batch_stats {
            if n == 0 {
                return Err(Error::Dim("bn needs a non-empty batch".into()));
            }
            let count = E::lit((n * plane) as f64);
            let mut mean = vec![E::zero(); c];
            let mut var = vec![E::zero(); c];
            for ch in 0..c {
                let mut sum = E::zero();
                let mut sq = E::zero();
                for s in 0..n {
                    let base = (s * c + ch) * plane;
                    for &x in &input.data()[base..base + plane] {
                        sum = sum + x;
                        sq = sq + x * x;
                    }
                }
                let m = sum / count;
                mean[ch] = m;
                var[ch] = (sq / count - m * m).max(E::zero());
            }
            (mean, var)
        } else {
            (self.running_mean.clone(), self.running_var.clone())
        };
        // Same expression tree as the cached forward, so a frozen pass over
        // identical parameters reproduces a train-mode pass bit-exactly.
        let mut out = Tensor::zeros(input.shape());
        for ch in 0..c {
            let inv_std = E::one() / (var[ch] + self.eps).sqrt();
            let (m, g, b) = (mean[ch], self.gamma.value.data()[ch], self.beta.value.data()[ch]);
            for s in 0..n {
                let base = (s * c + ch) * plane;
                for i in base..base + plane {
                    out.data_mut()[i] = g * ((input.data()[i] - m) * inv_std) + b;
                }
            }
        }
        Ok(out)
    }

    /// Input gradient; accumulates gamma/beta gradients in place.
    pub fn backward(&mut self, cache: &BnCache<E>, dy: &Tensor<E>) -> Tensor<E> {
        let shape = cache.xhat.shape();
        let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
        let count = E::lit((n * plane) as f64);
        let mut dgamma = vec![E::zero(); c];
        let mut dbeta = vec![E::zero(); c];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                for i in base..base + plane {
                    dgamma[ch] = dgamma[ch] + dy.data()[i] * cache.xhat.data()[i];
                    dbeta[ch] = dbeta[ch] + dy.data()[i];
                }
            }
        }
        let mut dx = Tensor::zeros(shape);
        let gamma = self.gamma.value.data();
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                let scale = gamma[ch] * cache.inv_std[ch];
                if cache.batch_stats {
                    let mg = dbeta[ch] / count;
                    let mgx = dgamma[ch] / count;
                    for i in base..base + plane {
                        dx.data_mut()[i] = scale * (dy.data()[i] - mg - cache.xhat.data()[i] * mgx);
                    }
                } else {
                    for i in base..base + plane {
                        dx.data_mut()[i] = scale * dy.data()[i];
                    }
                }
            }
        }
        self.gamma.add_grad(&dgamma);
        self.beta.add_grad(&dbeta);
        dx
    }

    pub fn ema_from(&mut self, src: &BnState<E>, tau: E) {
        self.gamma.ema_from(&src.gamma, tau);
        self.beta.ema_from(&src.beta, tau);
        super::ema_slice(&mut self.running_mean, &src.running_mean, tau);
        super::ema_slice(&mut self.running_var, &src.running_var, tau);
    }
}

/// Free-function form of the BN forward (output only).
pub fn batchnorm_forward<E: Elem>(input: &Tensor<E>, stats: &mut BnState<E>, mode: Mode) -> Result<Tensor<E>> {
    stats.forward(input, mode).map(|(out, _)| out)
}

// ---------------------------------------------------------------------------
// Relu / pooling / fully-connected.
// ---------------------------------------------------------------------------

pub fn relu<E: Elem>(x: &Tensor<E>) -> Tensor<E> {
    x.map(|v| v.max(E::zero()))
}

/// Gradient 0 at exactly 0 (subgradient convention).
pub fn relu_backward<E: Elem>(x: &Tensor<E>, dy: &Tensor<E>) -> Tensor<E> {
    debug_assert_eq!(x.shape(), dy.shape());
    Tensor::from_fn(x.shape(), |i| if x.data()[i] > E::zero() { dy.data()[i] } else { E::zero() })
}

/// `[N,C,H,W] -> [N,C]` spatial mean.
pub fn global_avg_pool<E: Elem>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let [n, c, h, w] = match *x.shape() {
        [n, c, h, w] => [n, c, h, w],
        _ => return Err(Error::Dim(format!("gap input must be 4-d, got {:?}", x.shape()))),
    };
    let plane = h * w;
    let inv = E::one() / E::lit(plane as f64);
    let mut out = Tensor::zeros(&[n, c]);
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * plane;
            let mut sum = E::zero();
            for &v in &x.data()[base..base + plane] {
                sum = sum + v;
            }
            out.data_mut()[s * c + ch] = sum * inv;
        }
    }
    Ok(out)
}

pub fn global_avg_pool_backward<E: Elem>(input_shape: &[usize], dy: &Tensor<E>) -> Tensor<E> {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let plane = h * w;
    let inv = E::one() / E::lit(plane as f64);
    let mut dx = Tensor::zeros(input_shape);
    for s in 0..n {
        for ch in 0..c {
            let g = dy.data()[s * c + ch] * inv;
            let base = (s * c + ch) * plane;
            for v in &mut dx.data_mut()[base..base + plane] {
                *v = g;
            }
        }
    }
    dx
}

/// `x[N,Din] * w^T[Din,Dout] + b`.
pub fn fully_connected<E: Elem>(x: &Tensor<E>, w: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let [n, din] = match *x.shape() {
        [n, d] => [n, d],
        _ => return Err(Error::Dim(format!("fc input must be 2-d, got {:?}", x.shape()))),
    };
    let [dout, wdin] = match *w.shape() {
        [o, i] => [o, i],
        _ => return Err(Error::Dim(format!("fc weight must be 2-d, got {:?}", w.shape()))),
    };
    if wdin != din || b.numel() != dout {
        return Err(Error::Dim(format!(
            "fc shapes: x {:?}, w {:?}, b {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros(&[n, dout]);
    unsafe {
        E::gemm(
            n,
            din,
            dout,
            E::one(),
            x.data().as_ptr(),
            din as isize,
            1,
            w.data().as_ptr(),
            1,
            din as isize,
            E::zero(),
            out.data_mut().as_mut_ptr(),
            dout as isize,
            1,
        );
    }
    for s in 0..n {
        for o in 0..dout {
            let i = s * dout + o;
            out.data_mut()[i] = out.data()[i] + b.data()[o];
        }
    }
    Ok(out)
}

/// Returns (dx, dw, db).
pub fn fully_connected_backward<E: Elem>(x: &Tensor<E>, w: &Tensor<E>, dy: &Tensor<E>) -> (Tensor<E>, Tensor<E>, Tensor<E>) {
    let (n, din) = (x.shape()[0], x.shape()[1]);
    let dout = w.shape()[0];
    debug_assert_eq!(dy.shape(), [n, dout]);
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[dout]);
    unsafe {
        // dx = dy (N x Dout) * w (Dout x Din)
        E::gemm(
            n,
            dout,
            din,
            E::one(),
            dy.data().as_ptr(),
            dout as isize,
            1,
            w.data().as_ptr(),
            din as isize,
            1,
            E::zero(),
            dx.data_mut().as_mut_ptr(),
            din as isize,
            1,
        );
        // dw = dy^T (Dout x N) * x (N x Din)
        E::gemm(
            dout,
            n,
            din,
            E::one(),
            dy.data().as_ptr(),
            1,
            dout as isize,
            x.data().as_ptr(),
            din as isize,
            1,
            E::zero(),
            dw.data_mut().as_mut_ptr(),
            din as isize,
            1,
        );
    }
    for s in 0..n {
        for o in 0..dout {
            db.data_mut()[o] = db.data()[o] + dy.data()[s * dout + o];
        }
    }
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// Losses.
// ---------------------------------------------------------------------------

const PROB_FLOOR: f64 = 1e-12;

/// Row-wise softmax, numerically stabilized.
pub fn softmax_rows<E: Elem>(logits: &Tensor<E>) -> Tensor<E> {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let mut out = Tensor::zeros(logits.shape());
    for s in 0..n {
        let row = &logits.data()[s * k..(s + 1) * k];
        let max = row.iter().cloned().fold(E::neg_infinity(), E::max);
        let mut denom = E::zero();
        for (i, &z) in row.iter().enumerate() {
            let e = (z - max).exp();
            out.data_mut()[s * k + i] = e;
            denom = denom + e;
        }
        for i in 0..k {
            let idx = s * k + i;
            out.data_mut()[idx] = out.data()[idx] / denom;
        }
    }
    out
}

fn log_softmax_rows<E: Elem>(logits: &Tensor<E>) -> Tensor<E> {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let mut out = Tensor::zeros(logits.shape());
    for s in 0..n {
        let row = &logits.data()[s * k..(s + 1) * k];
        let max = row.iter().cloned().fold(E::neg_infinity(), E::max);
        let lse = row.iter().map(|&z| (z - max).exp()).fold(E::zero(), |a, b| a + b).ln() + max;
        for i in 0..k {
            out.data_mut()[s * k + i] = row[i] - lse;
        }
    }
    out
}

/// Mean cross-entropy over the batch; returns the loss and the softmax
/// probabilities (the backward cache).
pub fn softmax_cross_entropy<E: Elem>(logits: &Tensor<E>, labels: &[usize]) -> Result<(E, Tensor<E>)> {
    let (n, k) = match *logits.shape() {
        [n, k] => (n, k),
        _ => return Err(Error::Dim(format!("ce logits must be 2-d, got {:?}", logits.shape()))),
    };
    if labels.len() != n {
        return Err(Error::Dim(format!("ce labels: {} labels for batch {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Domain(format!("ce label {bad} out of range for {k} classes")));
    }
    let logp = log_softmax_rows(logits);
    let mut loss = E::zero();
    for (s, &label) in labels.iter().enumerate() {
        loss = loss - logp.data()[s * k + label];
    }
    loss = loss / E::lit(n as f64);
    let probs = logp.map(|lp| lp.exp());
    Ok((loss, probs))
}

/// d loss / d logits for [`softmax_cross_entropy`].
pub fn softmax_cross_entropy_backward<E: Elem>(probs: &Tensor<E>, labels: &[usize]) -> Tensor<E> {
    let (n, k) = (probs.shape()[0], probs.shape()[1]);
    let inv_n = E::one() / E::lit(n as f64);
    let mut d = probs.map(|p| p);
    for (s, &label) in labels.iter().enumerate() {
        let idx = s * k + label;
        d.data_mut()[idx] = d.data()[idx] - E::one();
    }
    for v in d.data_mut() {
        *v = *v * inv_n;
    }
    d
}

/// Batch-mean KL(teacher || softmax(student_logits)); the teacher is a
/// constant. Returns the loss and the student probabilities (backward cache).
pub fn kl_divergence<E: Elem>(teacher_probs: &Tensor<E>, student_logits: &Tensor<E>) -> Result<(E, Tensor<E>)> {
    if teacher_probs.shape() != student_logits.shape() {
        return Err(Error::Dim(format!(
            "kl shapes differ: teacher {:?}, student {:?}",
            teacher_probs.shape(),
            student_logits.shape()
        )));
    }
    let (n, k) = (teacher_probs.shape()[0], teacher_probs.shape()[1]);
    let tol = E::lit(1e-5);
    for s in 0..n {
        let sum: E = teacher_probs.data()[s * k..(s + 1) * k].iter().fold(E::zero(), |a, &b| a + b);
        if (sum - E::one()).abs() > tol {
            return Err(Error::Domain(format!("kl teacher row {s} sums to {sum}, not 1")));
        }
    }
    let floor = E::lit(PROB_FLOOR);
    let logq = log_softmax_rows(student_logits);
    let mut loss = E::zero();
    for i in 0..n * k {
        let p = teacher_probs.data()[i].max(floor);
        loss = loss + p * (p.ln() - logq.data()[i]);
    }
    loss = loss / E::lit(n as f64);
    let student_probs = logq.map(|lq| lq.exp());
    Ok((loss, student_probs))
}

/// d loss / d student_logits for [`kl_divergence`].
pub fn kl_divergence_backward<E: Elem>(student_probs: &Tensor<E>, teacher_probs: &Tensor<E>) -> Tensor<E> {
    let n = student_probs.shape()[0];
    let inv_n = E::one() / E::lit(n as f64);
    Tensor::from_fn(student_probs.shape(), |i| (student_probs.data()[i] - teacher_probs.data()[i]) * inv_n)
}
