//! Fake quantization with learned step sizes: clip-round forward rules for
//! weights and activations, straight-through input gradients, step-size
//! gradients, initialization, and quantization-noise diagnostics.
//!
//! All quantization is simulated in real arithmetic: outputs live on the grid
//! `{s * k : Q_b <= k <= P_b}`, never as integer tensors (except when a
//! checkpoint is exported in the aligned storage mode).

use crate::error::{Error, Result};
use crate::tensor::{Elem, Parameter, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

/// Sentinel marking a full-precision (non-quantized) layer.
pub const FULL_PRECISION: u8 = 32;

pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 8;

/// Step sizes are clamped to this floor after every optimizer update.
pub const STEP_FLOOR: f64 = 1e-9;

/// A quantization bit-width in `[2, 8]`, or the full-precision sentinel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BitWidth(u8);

impl BitWidth {
    pub fn new(b: u8) -> Result<Self> {
        if (MIN_BITS..=MAX_BITS).contains(&b) || b == FULL_PRECISION {
            Ok(BitWidth(b))
        } else {
            Err(Error::Domain(format!("bit-width {b} outside [{MIN_BITS}, {MAX_BITS}]")))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub fn is_full_precision(self) -> bool {
        self.0 == FULL_PRECISION
    }
}

impl fmt::Display for BitWidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Ordered set of switchable bit-widths, strictly decreasing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitSet(Vec<u8>);

impl BitSet {
    /// Accepts any strictly decreasing, duplicate-free list with entries in
    /// `[2, 8]`. Singletons are allowed (fixed-bit baselines); a switchable
    /// super-net wants at least two entries, which the trainer enforces.
    pub fn new(bits: &[u8]) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::Domain("bit set must not be empty".into()));
        }
        for &b in bits {
            if !(MIN_BITS..=MAX_BITS).contains(&b) {
                return Err(Error::Domain(format!("bit set entry {b} outside [{MIN_BITS}, {MAX_BITS}]")));
            }
        }
        if !bits.windows(2).all(|w| w[0] > w[1]) {
            return Err(Error::Domain(format!("bit set {bits:?} must be strictly decreasing")));
        }
        Ok(BitSet(bits.to_vec()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bits: Vec<u8> = text
            .split(',')
            .map(|p| p.trim().parse::<u8>().map_err(|_| Error::Format(format!("bad bit-width `{p}`"))))
            .collect::<Result<_>>()?;
        BitSet::new(&bits)
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn max(&self) -> u8 {
        self.0[0]
    }

    pub fn min(&self) -> u8 {
        *self.0.last().unwrap()
    }

    /// Entries that are neither the maximum nor the minimum.
    pub fn mids(&self) -> &[u8] {
        &self.0[1..self.0.len().saturating_sub(1).max(1)]
    }

    pub fn contains(&self, b: u8) -> bool {
        self.0.contains(&b)
    }

    pub fn index_of(&self, b: u8) -> Option<usize> {
        self.0.iter().position(|&x| x == b)
    }
}

impl fmt::Display for BitSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|b| b.to_string()).collect();
        write!(f, "{}", parts.join(","))
    }
}

/// What a tensor holds, for bound selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Weights,
    Activations,
}

/// Integer clipping levels of a b-bit quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantBounds {
    pub lo: i32,
    pub hi: i32,
}

/// Signed bounds `[-2^(b-1), 2^(b-1)-1]` for weights, unsigned `[0, 2^b-1]`
/// for activations.
pub fn bounds_for(b: u8, kind: TensorKind) -> Result<QuantBounds> {
    if !(MIN_BITS..=MAX_BITS).contains(&b) {
        return Err(Error::Domain(format!("bit-width {b} outside [{MIN_BITS}, {MAX_BITS}]")));
    }
    Ok(match kind {
        TensorKind::Weights => QuantBounds { lo: -(1 << (b - 1)), hi: (1 << (b - 1)) - 1 },
        TensorKind::Activations => QuantBounds { lo: 0, hi: (1 << b) - 1 },
    })
}

/// Storage/derivation rule for quantized weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    /// Quantize every bit-width directly from the full-precision master.
    RoundMaster,
    /// Derive sub-maximum bit-widths by re-quantizing the max-bit weights;
    /// lets checkpoints store the max-bit codes instead of the fp32 master.
    WeightsAligned,
}

impl QuantMode {
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "round_master" => Ok(QuantMode::RoundMaster),
            "weights_aligned" => Ok(QuantMode::WeightsAligned),
            other => Err(Error::Format(format!("unknown quant mode `{other}`"))),
        }
    }
}

impl fmt::Display for QuantMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QuantMode::RoundMaster => write!(f, "round_master"),
            QuantMode::WeightsAligned => write!(f, "weights_aligned"),
        }
    }
}

fn check_step<E: Elem>(s: E) -> Result<()> {
    if s <= E::zero() || !s.is_finite() {
        Err(Error::Domain(format!("step size must be positive and finite, got {s}")))
    } else {
        Ok(())
    }
}

/// `s * round(clip(t / s, Q_b, P_b))`, rounding half away from zero.
pub fn quantize_round<E: Elem>(t: &Tensor<E>, s: E, bounds: QuantBounds) -> Result<Tensor<E>> {
    check_step(s)?;
    let lo = E::lit(bounds.lo as f64);
    let hi = E::lit(bounds.hi as f64);
    Ok(t.map(|v| s * (v / s).max(lo).min(hi).round()))
}

/// Re-quantizes a max-bit-grid tensor onto a lower-bit grid; identical
/// clip-round rule, so at `b = b_max` (grid input) it is the identity chain.
pub fn quantize_weights_aligned<E: Elem>(master_q: &Tensor<E>, s: E, bounds: QuantBounds) -> Result<Tensor<E>> {
    quantize_round(master_q, s, bounds)
}

/// The integer levels `round(clip(t / s, Q_b, P_b))` behind
/// [`quantize_round`]; multiplying by `s` reproduces its output bit-exactly.
pub fn quantize_codes<E: Elem>(t: &Tensor<E>, s: E, bounds: QuantBounds) -> Result<Vec<i32>> {
    check_step(s)?;
    let lo = E::lit(bounds.lo as f64);
    let hi = E::lit(bounds.hi as f64);
    Ok(t.data()
        .iter()
        .map(|&v| (v / s).max(lo).min(hi).round().as_f64() as i32)
        .collect())
}

/// Straight-through input-gradient mask: 1 where `Q_b < t/s < P_b` fails to
/// clip, 0 where the clip saturates (hard zero outside the range).
pub fn ste_grad_input<E: Elem>(t: &Tensor<E>, s: E, bounds: QuantBounds) -> Result<Tensor<E>> {
    check_step(s)?;
    let lo = E::lit(bounds.lo as f64);
    let hi = E::lit(bounds.hi as f64);
    Ok(t.map(|v| {
        let u = v / s;
        if u >= lo && u <= hi {
            E::one()
        } else {
            E::zero()
        }
    }))
}

/// Per-element step-size gradient factor: `round(u) - u` inside the bounds,
/// `Q_b` below, `P_b` above (u = t/s).
pub fn step_grad_elem<E: Elem>(v: E, s: E, bounds: QuantBounds) -> E {
    let lo = E::lit(bounds.lo as f64);
    let hi = E::lit(bounds.hi as f64);
    let u = v / s;
    if u < lo {
        lo
    } else if u > hi {
        hi
    } else {
        u.round() - u
    }
}

/// Gradient scale `g = 1 / sqrt(numel * P_b)`.
pub fn lsq_grad_scale<E: Elem>(numel: usize, bounds: QuantBounds) -> E {
    E::one() / E::lit((numel as f64 * bounds.hi.max(1) as f64).sqrt())
}

/// Scalar step-size gradient: per-element factors contracted with the
/// incoming gradient and multiplied by the gradient scale.
pub fn lsq_grad_step<E: Elem>(t: &Tensor<E>, s: E, bounds: QuantBounds, upstream: &Tensor<E>) -> Result<E> {
    check_step(s)?;
    if t.shape() != upstream.shape() {
        return Err(Error::Dim(format!(
            "lsq upstream shape {:?} != tensor shape {:?}",
            upstream.shape(),
            t.shape()
        )));
    }
    let g = lsq_grad_scale::<E>(t.numel(), bounds);
    let mut acc = E::zero();
    for (&v, &up) in t.data().iter().zip(upstream.data()) {
        acc = acc + up * step_grad_elem(v, s, bounds);
    }
    Ok(acc * g)
}

/// Combined backward through one fake-quantizer: returns the input gradient
/// and the scalar step gradient.
pub fn quantize_backward<E: Elem>(
    t: &Tensor<E>,
    s: E,
    bounds: QuantBounds,
    dy: &Tensor<E>,
) -> Result<(Tensor<E>, E)> {
    check_step(s)?;
    let lo = E::lit(bounds.lo as f64);
    let hi = E::lit(bounds.hi as f64);
    let g = lsq_grad_scale::<E>(t.numel(), bounds);
    let mut ds = E::zero();
    let mut dt = Tensor::zeros(t.shape());
    for i in 0..t.numel() {
        let u = t.data()[i] / s;
        let up = dy.data()[i];
        if u < lo {
            ds = ds + up * lo;
        } else if u > hi {
            ds = ds + up * hi;
        } else {
            dt.data_mut()[i] = up;
            ds = ds + up * (u.round() - u);
        }
    }
    Ok((dt, ds * g))
}

/// Weight step initializer: `max(|mu - 3 sigma|, |mu + 3 sigma|) / 2^(b-1)`
/// from the weight statistics; falls back to 1e-3 for an all-zero tensor.
pub fn init_step_weight<E: Elem>(w: &Tensor<E>, b: u8) -> Result<E> {
    if w.numel() == 0 {
        return Err(Error::Dim("weight tensor is empty".into()));
    }
    if !(MIN_BITS..=MAX_BITS).contains(&b) {
        return Err(Error::Domain(format!("bit-width {b} outside [{MIN_BITS}, {MAX_BITS}]")));
    }
    let n = E::lit(w.numel() as f64);
    let mean = w.data().iter().fold(E::zero(), |a, &x| a + x) / n;
    let var = w.data().iter().fold(E::zero(), |a, &x| a + (x - mean) * (x - mean)) / n;
    let sigma = var.sqrt();
    let three = E::lit(3.0);
    let spread = (mean - three * sigma).abs().max((mean + three * sigma).abs());
    let denom = E::lit((1u64 << (b - 1)) as f64);
    let s = spread / denom;
    Ok(if s > E::zero() { s } else { E::lit(1e-3) })
}

/// Activation step initializer from one calibration batch:
/// `2 * mean(|x|) / sqrt(P_b)`.
pub fn init_step_activation<E: Elem>(calibration_abs_mean: E, b: u8) -> Result<E> {
    let bounds = bounds_for(b, TensorKind::Activations)?;
    let s = E::lit(2.0) * calibration_abs_mean / E::lit(bounds.hi as f64).sqrt();
    Ok(if s > E::zero() { s } else { E::lit(1e-3) })
}

/// Learnable step sizes for one quantizable layer: one scalar per
/// (bit-width, weights|activations).
#[derive(Debug, Clone)]
pub struct StepSizeBank {
    weights: BTreeMap<u8, Parameter>,
    activations: BTreeMap<u8, Parameter>,
}

impl StepSizeBank {
    pub fn new(bits: &BitSet) -> Self {
        let mk = || {
            bits.bits()
                .iter()
                .map(|&b| (b, Parameter::no_decay(Tensor::scalar(1.0f32))))
                .collect::<BTreeMap<_, _>>()
        };
        StepSizeBank { weights: mk(), activations: mk() }
    }

    pub fn step(&self, kind: TensorKind, b: u8) -> Result<f32> {
        self.param(kind, b).map(|p| p.scalar_value())
    }

    pub fn param(&self, kind: TensorKind, b: u8) -> Result<&Parameter> {
        let map = match kind {
            TensorKind::Weights => &self.weights,
            TensorKind::Activations => &self.activations,
        };
        map.get(&b).ok_or_else(|| Error::Domain(format!("no step size for bit {b}")))
    }

    pub fn param_mut(&mut self, kind: TensorKind, b: u8) -> Result<&mut Parameter> {
        let map = match kind {
            TensorKind::Weights => &mut self.weights,
            TensorKind::Activations => &mut self.activations,
        };
        map.get_mut(&b).ok_or_else(|| Error::Domain(format!("no step size for bit {b}")))
    }

    pub fn set(&mut self, kind: TensorKind, b: u8, value: f32) -> Result<()> {
        self.param_mut(kind, b)?.set_scalar(value.max(STEP_FLOOR as f32));
        Ok(())
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        for p in self.weights.values_mut().chain(self.activations.values_mut()) {
            f(p);
        }
    }

    /// Re-applies the positivity floor; call after every optimizer step.
    pub fn clamp_floor(&mut self) {
        let floor = STEP_FLOOR as f32;
        for p in self.weights.values_mut().chain(self.activations.values_mut()) {
            if p.scalar_value() < floor {
                p.set_scalar(floor);
            }
        }
    }

    pub fn ema_from(&mut self, src: &StepSizeBank, tau: f32) {
        for (dst, src) in self.weights.values_mut().zip(src.weights.values()) {
            dst.ema_from(src, tau);
        }
        for (dst, src) in self.activations.values_mut().zip(src.activations.values()) {
            dst.ema_from(src, tau);
        }
    }
}

/// Per-bit variance of the quantization error `t - quantize(t)`, using the
/// bank's step sizes. Feeds the noise-monotonicity diagnostics.
pub fn noise_variance_report<E: Elem>(
    t: &Tensor<E>,
    steps: &[(u8, E)],
    kind: TensorKind,
) -> Result<Vec<(u8, f64)>> {
    let mut out = Vec::with_capacity(steps.len());
    for &(b, s) in steps {
        let bounds = bounds_for(b, kind)?;
        let q = quantize_round(t, s, bounds)?;
        let n = t.numel() as f64;
        let mut sum = 0.0f64;
        let mut sq = 0.0f64;
        for (a, b) in t.data().iter().zip(q.data()) {
            let d = a.as_f64() - b.as_f64();
            sum += d;
            sq += d * d;
        }
        let mean = sum / n;
        out.push((b, (sq / n - mean * mean).max(0.0)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent scalar clip-round oracle, branch-based rounding.
    pub fn oracle_quantize(v: f32, s: f32, bounds: QuantBounds) -> f32 {
        let u = v / s;
        let c = if u < bounds.lo as f32 {
            bounds.lo as f32
        } else if u > bounds.hi as f32 {
            bounds.hi as f32
        } else {
            u
        };
        let fl = c.floor();
        let frac = c - fl;
        let r = if frac > 0.5 {
            fl + 1.0
        } else if frac < 0.5 {
            fl
        } else if c > 0.0 {
            fl + 1.0
        } else {
            fl
        };
        s * r
    }

    #[test]
    fn bounds_examples() {
        assert_eq!(bounds_for(2, TensorKind::Weights).unwrap(), QuantBounds { lo: -2, hi: 1 });
        assert_eq!(bounds_for(3, TensorKind::Activations).unwrap(), QuantBounds { lo: 0, hi: 7 });
        assert_eq!(bounds_for(8, TensorKind::Weights).unwrap(), QuantBounds { lo: -128, hi: 127 });
        assert!(bounds_for(1, TensorKind::Weights).is_err());
        assert!(bounds_for(9, TensorKind::Activations).is_err());
    }

    #[test]
    fn quantize_round_example() {
        let t = Tensor::new(vec![3], vec![0.3f32, -1.4, 10.0]).unwrap();
        let q = quantize_round(&t, 0.5, QuantBounds { lo: -2, hi: 1 }).unwrap();
        assert_eq!(q.data(), &[0.5, -1.0, 0.5]);
    }

    #[test]
    fn quantize_zero_and_grid_fixed_points() {
        let bounds = QuantBounds { lo: -2, hi: 1 };
        let z = Tensor::<f32>::zeros(&[4]);
        assert_eq!(quantize_round(&z, 0.37, bounds).unwrap().data(), z.data());
        let s = 0.37f32;
        let grid = Tensor::new(vec![4], vec![-2.0 * s, -s, 0.0, s]).unwrap();
        assert_eq!(quantize_round(&grid, s, bounds).unwrap().data(), grid.data());
    }

    #[test]
    fn non_positive_step_rejected() {
        let t = Tensor::<f32>::zeros(&[1]);
        assert!(quantize_round(&t, 0.0, QuantBounds { lo: -2, hi: 1 }).is_err());
        assert!(quantize_round(&t, -1.0, QuantBounds { lo: -2, hi: 1 }).is_err());
    }

    #[test]
    fn ste_and_step_grad_examples() {
        let bounds = QuantBounds { lo: -2, hi: 1 };
        // t/s = 0.4: inside; step-grad element = round(0.4) - 0.4 = -0.4.
        let t = Tensor::new(vec![1], vec![0.4f32]).unwrap();
        assert_eq!(ste_grad_input(&t, 1.0, bounds).unwrap().data(), &[1.0]);
        assert!((step_grad_elem(0.4f32, 1.0, bounds) - -0.4).abs() < 1e-7);
        // t/s = 5.0: clipped above; mask 0, step-grad element = P_b = 1.
        let t = Tensor::new(vec![1], vec![5.0f32]).unwrap();
        assert_eq!(ste_grad_input(&t, 1.0, bounds).unwrap().data(), &[0.0]);
        assert_eq!(step_grad_elem(5.0f32, 1.0, bounds), 1.0);
        // t = 0: mask 1, step-grad element 0.
        let t = Tensor::new(vec![1], vec![0.0f32]).unwrap();
        assert_eq!(ste_grad_input(&t, 1.0, bounds).unwrap().data(), &[1.0]);
        assert_eq!(step_grad_elem(0.0f32, 1.0, bounds), 0.0);
    }

    #[test]
    fn lsq_grad_matches_manual_sum() {
        let bounds = QuantBounds { lo: -2, hi: 1 };
        let t = Tensor::new(vec![4], vec![0.4f32, 5.0, -3.0, 0.0]).unwrap();
        let up = Tensor::new(vec![4], vec![1.0f32, 1.0, 1.0, 1.0]).unwrap();
        let g = 1.0 / (4.0f32 * 1.0).sqrt();
        let expect = g * (-0.4 + 1.0 + -2.0 + 0.0);
        let got = lsq_grad_step(&t, 1.0, bounds, &up).unwrap();
        assert!((got - expect).abs() < 1e-6, "{got} vs {expect}");
        let (dt, ds) = quantize_backward(&t, 1.0, bounds, &up).unwrap();
        assert_eq!(dt.data(), &[1.0, 0.0, 0.0, 1.0]);
        assert!((ds - expect).abs() < 1e-6);
    }

    #[test]
    fn init_step_weight_examples() {
        // mu = 0, sigma = 1 exactly: data {-1, +1}.
        let w = Tensor::new(vec![4], vec![-1.0f32, 1.0, -1.0, 1.0]).unwrap();
        let s = init_step_weight(&w, 4).unwrap();
        assert!((s - 0.375).abs() < 1e-6);
        let zeros = Tensor::<f32>::zeros(&[8]);
        assert_eq!(init_step_weight(&zeros, 4).unwrap(), 1e-3);
    }

    #[test]
    fn init_step_activation_example() {
        // Calibration batch all ones, b = 2 => P = 3 => s = 2/sqrt(3).
        let s = init_step_activation(1.0f32, 2).unwrap();
        assert!((s - 2.0 / 3.0f32.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn noise_variance_zero_on_grid() {
        let s = 0.25f32;
        let t = Tensor::new(vec![3], vec![0.25f32, -0.5, 0.0]).unwrap();
        let report = noise_variance_report(&t, &[(2, s)], TensorKind::Weights).unwrap();
        assert_eq!(report[0].1, 0.0);
        let constant = Tensor::full(&[16], 0.25f32);
        for (_, var) in noise_variance_report(&constant, &[(2, s), (4, s)], TensorKind::Weights).unwrap() {
            assert_eq!(var, 0.0);
        }
    }

    #[test]
    fn bitset_rules() {
        assert!(BitSet::new(&[4, 3, 2]).is_ok());
        assert!(BitSet::new(&[4]).is_ok());
        assert!(BitSet::new(&[3, 4]).is_err());
        assert!(BitSet::new(&[4, 4]).is_err());
        assert!(BitSet::new(&[]).is_err());
        assert!(BitSet::new(&[4, 1]).is_err());
        let b = BitSet::new(&[8, 4, 3, 2]).unwrap();
        assert_eq!(b.max(), 8);
        assert_eq!(b.min(), 2);
        assert_eq!(b.mids(), &[4, 3]);
        assert_eq!(BitSet::parse("4, 3,2").unwrap(), BitSet::new(&[4, 3, 2]).unwrap());
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        use crate::rng::{Rng, Stream};
        let mut rng = Rng::new(11, Stream::Test);
        for _ in 0..200 {
            let b = [2u8, 3, 4, 8][rng.below(4) as usize];
            let kind = if rng.below(2) == 0 { TensorKind::Weights } else { TensorKind::Activations };
            let bounds = bounds_for(b, kind).unwrap();
            let s = (rng.range_f64(1e-3, 1.5)) as f32;
            let t = Tensor::<f32>::from_fn(&[17], |_| (rng.gaussian() * 2.0) as f32);
            let q = quantize_round(&t, s, bounds).unwrap();
            for (i, &v) in t.data().iter().enumerate() {
                assert_eq!(q.data()[i], oracle_quantize(v, s, bounds), "v={v}, s={s}, b={b}");
            }
        }
    }
}
