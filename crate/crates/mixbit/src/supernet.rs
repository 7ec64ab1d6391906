//! The weight-shared, layer-wise quantizable network: a full-precision stem,
//! a stack of quantizable conv layers sharing one master weight set with
//! per-bit step sizes and per-bit batch-norm instances, and a full-precision
//! classifier head. Any bit assignment in `B^L_q` runs without retraining.

use crate::cost::{macs_of_layer, CostTable, LayerGeometry};
use crate::error::{Error, Result};
use crate::quant::{
    bounds_for, init_step_activation, init_step_weight, quantize_backward, quantize_round, BitSet,
    QuantMode, StepSizeBank, TensorKind,
};
use crate::rng::Rng;
use crate::tensor::{
    conv2d_backward, conv2d_forward, conv_out_dim, fully_connected, fully_connected_backward,
    global_avg_pool, global_avg_pool_backward, relu, relu_backward, BnCache, BnState, Mode,
    Parameter, Tensor,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

pub const KERNEL: usize = 3;
pub const PAD: usize = 1;

/// One bit-width choice per quantizable layer; identifies a subnet.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BitConfig(Vec<u8>);

impl BitConfig {
    pub fn new(bits: Vec<u8>) -> Self {
        BitConfig(bits)
    }

    pub fn uniform(b: u8, layers: usize) -> Self {
        BitConfig(vec![b; layers])
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bits: Vec<u8> = text
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<u8>()
                    .map_err(|_| Error::Format(format!("bad bit-width `{p}` in config")))
            })
            .collect::<Result<_>>()?;
        if bits.is_empty() {
            return Err(Error::Format("empty bit config".into()));
        }
        Ok(BitConfig(bits))
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_uniform(&self, b: u8) -> bool {
        self.0.iter().all(|&x| x == b)
    }
}

impl fmt::Display for BitConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|b| b.to_string()).collect();
        write!(f, "{}", parts.join(","))
    }
}

/// One quantizable conv layer in the architecture description.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QConvSpec {
    pub c_out: usize,
    pub stride: usize,
}

/// Fixed architecture description; all convs are 3x3 with padding 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub stem_channels: usize,
    pub qconvs: Vec<QConvSpec>,
    pub classes: usize,
}

/// The fixed desk-scale reference architecture:
/// 28x28x1 -> fp conv 16/s1 -> q convs 32/s2, 32/s1, 64/s2, 64/s1 -> gap -> fc.
pub fn reference_arch(classes: usize) -> ArchSpec {
    ArchSpec {
        in_channels: 1,
        in_h: 28,
        in_w: 28,
        stem_channels: 16,
        qconvs: vec![
            QConvSpec { c_out: 32, stride: 2 },
            QConvSpec { c_out: 32, stride: 1 },
            QConvSpec { c_out: 64, stride: 2 },
            QConvSpec { c_out: 64, stride: 1 },
        ],
        classes,
    }
}

/// A small architecture for fast tests.
pub fn micro_arch(classes: usize) -> ArchSpec {
    ArchSpec {
        in_channels: 1,
        in_h: 28,
        in_w: 28,
        stem_channels: 4,
        qconvs: vec![QConvSpec { c_out: 8, stride: 2 }, QConvSpec { c_out: 8, stride: 2 }],
        classes,
    }
}

/// Full-precision conv + BN + relu stem.
#[derive(Clone, Debug)]
pub struct ConvBnBlock {
    pub weight: Parameter,
    pub stride: usize,
    pub bn: BnState,
}

/// Full-precision classifier head (global average pool + linear).
#[derive(Clone, Debug)]
pub struct LinearHead {
    pub weight: Parameter,
    pub bias: Parameter,
}

/// One quantizable conv layer: shared master weights, per-bit step sizes,
/// per-bit batch norm.
#[derive(Clone, Debug)]
pub struct QuantConvLayer {
    pub weight: Parameter,
    pub stride: usize,
    pub steps: StepSizeBank,
    pub bn: BTreeMap<u8, BnState>,
    pub geometry: LayerGeometry,
}

impl QuantConvLayer {
    fn new(c_in: usize, spec: QConvSpec, bits: &BitSet, h_in: usize, w_in: usize) -> Result<Self> {
        let h_out = conv_out_dim(h_in, KERNEL, spec.stride, PAD)?;
        let w_out = conv_out_dim(w_in, KERNEL, spec.stride, PAD)?;
        let bn = bits
            .bits()
            .iter()
            .map(|&b| (b, BnState::new(spec.c_out)))
            .collect();
        Ok(QuantConvLayer {
            weight: Parameter::new(Tensor::zeros(&[spec.c_out, c_in, KERNEL, KERNEL])),
            stride: spec.stride,
            steps: StepSizeBank::new(bits),
            bn,
            geometry: LayerGeometry { c_in, c_out: spec.c_out, kernel: KERNEL, h_out, w_out },
        })
    }

    pub fn c_in(&self) -> usize {
        self.geometry.c_in
    }

    fn bn_for(&self, b: u8) -> Result<&BnState> {
        self.bn.get(&b).ok_or_else(|| Error::Domain(format!("no BN instance for bit {b}")))
    }

    fn bn_for_mut(&mut self, b: u8) -> Result<&mut BnState> {
        self.bn.get_mut(&b).ok_or_else(|| Error::Domain(format!("no BN instance for bit {b}")))
    }
}

/// Caches from one training-mode forward, consumed by `SuperNet::backward`.
pub struct Trace {
    stem: StemCache,
    layers: Vec<QLayerCache>,
    head: HeadCache,
}

struct StemCache {
    input: Tensor,
    bn_cache: BnCache,
    pre_relu: Tensor,
}

struct QLayerCache {
    bit: u8,
    /// Raw (pre-quantization) input feature map.
    x_raw: Tensor,
    /// Activation step size; `None` on full-precision passes.
    s_x: Option<f32>,
    /// Quantized input, the conv operand.
    x_q: Tensor,
    /// Weight quantization chain: (stage input, step, bit), master first;
    /// empty on full-precision passes.
    w_stages: Vec<(Tensor, f32, u8)>,
    w_q: Tensor,
    bn_cache: BnCache,
    pre_relu: Tensor,
}

struct HeadCache {
    gap_in_shape: Vec<usize>,
    gap_out: Tensor,
}

/// The weight-shared super-network.
#[derive(Clone, Debug)]
pub struct SuperNet {
    pub arch: ArchSpec,
    pub bits: BitSet,
    pub mode: QuantMode,
    pub stem: ConvBnBlock,
    pub qlayers: Vec<QuantConvLayer>,
    pub head: LinearHead,
}

impl SuperNet {
    pub fn new(arch: ArchSpec, bits: BitSet, mode: QuantMode) -> Result<Self> {
        if arch.qconvs.is_empty() {
            return Err(Error::Dim("architecture needs at least one quantizable layer".into()));
        }
        let mut h = conv_out_dim(arch.in_h, KERNEL, 1, PAD)?;
        let mut w = conv_out_dim(arch.in_w, KERNEL, 1, PAD)?;
        let stem = ConvBnBlock {
            weight: Parameter::new(Tensor::zeros(&[arch.stem_channels, arch.in_channels, KERNEL, KERNEL])),
            stride: 1,
            bn: BnState::new(arch.stem_channels),
        };
        let mut qlayers = Vec::with_capacity(arch.qconvs.len());
        let mut c_in = arch.stem_channels;
        for spec in &arch.qconvs {
            let layer = QuantConvLayer::new(c_in, *spec, &bits, h, w)?;
            h = layer.geometry.h_out;
            w = layer.geometry.w_out;
            c_in = spec.c_out;
            qlayers.push(layer);
        }
        let head = LinearHead {
            weight: Parameter::new(Tensor::zeros(&[arch.classes, c_in])),
            bias: Parameter::new(Tensor::zeros(&[arch.classes])),
        };
        Ok(SuperNet { arch, bits, mode, stem, qlayers, head })
    }

    /// Number of quantizable layers.
    pub fn l_q(&self) -> usize {
        self.qlayers.len()
    }

    pub fn qlayer_in_channels(&self) -> Vec<usize> {
        self.qlayers.iter().map(|l| l.c_in()).collect()
    }

    /// He initialization for conv/fc weights; BN and steps keep defaults
    /// until `init_step_sizes`.
    pub fn init_weights(&mut self, rng: &mut Rng) {
        let fan = (self.arch.in_channels * KERNEL * KERNEL) as f64;
        self.stem.weight.value = Tensor::randn(self.stem.weight.value.shape(), (2.0 / fan).sqrt(), rng);
        for layer in &mut self.qlayers {
            let fan = (layer.geometry.c_in * KERNEL * KERNEL) as f64;
            layer.weight.value = Tensor::randn(layer.weight.value.shape(), (2.0 / fan).sqrt(), rng);
        }
        let fan = self.head.weight.value.shape()[1] as f64;
        self.head.weight.value = Tensor::randn(self.head.weight.value.shape(), (1.0 / fan).sqrt(), rng);
        self.head.bias.value = Tensor::zeros(self.head.bias.value.shape());
    }

    /// Initializes every step size: weight steps from master-weight
    /// statistics, activation steps from one full-precision calibration pass.
    pub fn init_step_sizes(&mut self, calibration: &Tensor) -> Result<()> {
        let mut x = self.stem_fp_forward(calibration, true)?;
        let bits: Vec<u8> = self.bits.bits().to_vec();
        for i in 0..self.qlayers.len() {
            let abs_mean = {
                let n = x.numel() as f64;
                let sum: f64 = x.data().iter().map(|v| v.abs() as f64).sum();
                (sum / n) as f32
            };
            for &b in &bits {
                let sw = init_step_weight(&self.qlayers[i].weight.value, b)?;
                self.qlayers[i].steps.set(TensorKind::Weights, b, sw)?;
                let sx = init_step_activation(abs_mean, b)?;
                self.qlayers[i].steps.set(TensorKind::Activations, b, sx)?;
            }
            // Advance the calibration features through the layer at full precision.
            let layer = &self.qlayers[i];
            let conv = conv2d_forward(&x, &layer.weight.value, layer.stride, PAD)?;
            let bn_out = layer.bn_for(bits[0])?.forward_lean(&conv, true)?;
            x = relu(&bn_out);
        }
        Ok(())
    }

    fn stem_fp_forward(&self, x: &Tensor, batch_stats: bool) -> Result<Tensor> {
        let conv = conv2d_forward(x, &self.stem.weight.value, self.stem.stride, PAD)?;
        let bn_out = self.stem.bn.forward_lean(&conv, batch_stats)?;
        Ok(relu(&bn_out))
    }

    pub fn validate_config(&self, cfg: &BitConfig) -> Result<()> {
        if cfg.len() != self.l_q() {
            return Err(Error::Dim(format!(
                "bit config has {} entries, net has {} quantizable layers",
                cfg.len(),
                self.l_q()
            )));
        }
        for &b in cfg.bits() {
            if !self.bits.contains(b) {
                return Err(Error::Domain(format!("bit {b} not in the net's bit set {}", self.bits)));
            }
        }
        Ok(())
    }

    /// Quantized weights for layer `i` at bit `b`, with the quantization
    /// chain (one stage in round-master mode; two in aligned mode below
    /// b_max).
    fn quantize_layer_weights(&self, i: usize, b: u8) -> Result<(Tensor, Vec<(Tensor, f32, u8)>)> {
        let layer = &self.qlayers[i];
        let bmax = self.bits.max();
        let mut stages = Vec::with_capacity(2);
        let master = layer.weight.value.clone();
        match self.mode {
            QuantMode::RoundMaster => {
                let s = layer.steps.step(TensorKind::Weights, b)?;
                let out = quantize_round(&master, s, bounds_for(b, TensorKind::Weights)?)?;
                stages.push((master, s, b));
                Ok((out, stages))
            }
            QuantMode::WeightsAligned => {
                let s_max = layer.steps.step(TensorKind::Weights, bmax)?;
                let w_max = quantize_round(&master, s_max, bounds_for(bmax, TensorKind::Weights)?)?;
                stages.push((master, s_max, bmax));
                if b == bmax {
                    Ok((w_max, stages))
                } else {
                    let s = layer.steps.step(TensorKind::Weights, b)?;
                    let out = quantize_round(&w_max, s, bounds_for(b, TensorKind::Weights)?)?;
                    stages.push((w_max, s, b));
                    Ok((out, stages))
                }
            }
        }
    }

    /// Eval-mode forward of one quantizable layer (no caches, no mutation).
    pub fn qlayer_eval(&self, i: usize, x: &Tensor, b: u8) -> Result<Tensor> {
        let layer = &self.qlayers[i];
        let s_x = layer.steps.step(TensorKind::Activations, b)?;
        let x_q = quantize_round(x, s_x, bounds_for(b, TensorKind::Activations)?)?;
        let (w_q, _) = self.quantize_layer_weights(i, b)?;
        let conv = conv2d_forward(&x_q, &w_q, layer.stride, PAD)?;
        let bn_out = layer.bn_for(b)?.forward_lean(&conv, false)?;
        Ok(relu(&bn_out))
    }

    /// Eval-mode stem forward.
    pub fn stem_eval(&self, x: &Tensor) -> Result<Tensor> {
        self.stem_fp_forward(x, false)
    }

    /// Eval-mode head forward (global average pool + fc).
    pub fn head_eval(&self, features: &Tensor) -> Result<Tensor> {
        let pooled = global_avg_pool(features)?;
        fully_connected(&pooled, &self.head.weight.value, &self.head.bias.value)
    }

    /// Whole-net forward. `Train` updates the BN running statistics of the
    /// BN instances selected by `cfg`; `Eval`/`Frozen` leave state untouched.
    pub fn forward(&mut self, x: &Tensor, cfg: &BitConfig, mode: Mode) -> Result<Tensor> {
        self.validate_config(cfg)?;
        match mode {
            Mode::Eval => {
                let mut h = self.stem_eval(x)?;
                for (i, &b) in cfg.bits().iter().enumerate() {
                    h = self.qlayer_eval(i, &h, b)?;
                }
                self.head_eval(&h)
            }
            Mode::Frozen => self.forward_frozen(x, cfg),
            Mode::Train => self.forward_train(x, cfg).map(|(logits, _)| logits),
        }
    }

    /// Batch-statistics forward without any state mutation (teacher passes).
    pub fn forward_frozen(&self, x: &Tensor, cfg: &BitConfig) -> Result<Tensor> {
        self.validate_config(cfg)?;
        let mut h = self.stem_fp_forward(x, true)?;
        for (i, &b) in cfg.bits().iter().enumerate() {
            let layer = &self.qlayers[i];
            let s_x = layer.steps.step(TensorKind::Activations, b)?;
            let x_q = quantize_round(&h, s_x, bounds_for(b, TensorKind::Activations)?)?;
            let (w_q, _) = self.quantize_layer_weights(i, b)?;
            let conv = conv2d_forward(&x_q, &w_q, layer.stride, PAD)?;
            let bn_out = layer.bn_for(b)?.forward_lean(&conv, true)?;
            h = relu(&bn_out);
        }
        self.head_eval(&h)
    }

    /// Eval-mode forward that also returns each quantizable layer's raw
    /// input feature map (the policy state source).
    pub fn forward_snapshots(&self, x: &Tensor, cfg: &BitConfig) -> Result<(Tensor, Vec<Tensor>)> {
        self.validate_config(cfg)?;
        let mut h = self.stem_eval(x)?;
        let mut snaps = Vec::with_capacity(self.l_q());
        for (i, &b) in cfg.bits().iter().enumerate() {
            snaps.push(h.clone());
            h = self.qlayer_eval(i, &h, b)?;
        }
        Ok((self.head_eval(&h)?, snaps))
    }

    /// Training forward: updates the selected BN running statistics and
    /// returns the caches needed by [`SuperNet::backward`].
    pub fn forward_train(&mut self, x: &Tensor, cfg: &BitConfig) -> Result<(Tensor, Trace)> {
        self.forward_train_inner(x, cfg, true)
    }

    /// Full-precision training forward: quantizers bypassed, BN instances of
    /// the maximum bit selected (the pretraining phase).
    pub fn forward_fp_train(&mut self, x: &Tensor) -> Result<(Tensor, Trace)> {
        let cfg = BitConfig::uniform(self.bits.max(), self.l_q());
        self.forward_train_inner(x, &cfg, false)
    }

    /// Eval-mode full-precision forward (max-bit BN running statistics).
    pub fn fp_eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.stem_eval(x)?;
        let b = self.bits.max();
        for layer in &self.qlayers {
            let conv = conv2d_forward(&h, &layer.weight.value, layer.stride, PAD)?;
            let bn_out = layer.bn_for(b)?.forward_lean(&conv, false)?;
            h = relu(&bn_out);
        }
        self.head_eval(&h)
    }

    /// Clones the max-bit BN instances into every other bit slot (used when
    /// switching from full-precision pretraining to quantized training).
    pub fn copy_bn_across_bits(&mut self) {
        let bmax = self.bits.max();
        let others: Vec<u8> = self.bits.bits().iter().copied().filter(|&b| b != bmax).collect();
        for layer in &mut self.qlayers {
            let src = layer.bn[&bmax].clone();
            for &b in &others {
                layer.bn.insert(b, src.clone());
            }
        }
    }

    fn forward_train_inner(&mut self, x: &Tensor, cfg: &BitConfig, quantize: bool) -> Result<(Tensor, Trace)> {
        self.validate_config(cfg)?;
        let conv = conv2d_forward(x, &self.stem.weight.value, self.stem.stride, PAD)?;
        let (bn_out, bn_cache) = self.stem.bn.forward(&conv, Mode::Train)?;
        let mut h = relu(&bn_out);
        let stem_cache = StemCache { input: x.clone(), bn_cache, pre_relu: bn_out };

        let mut layer_caches = Vec::with_capacity(self.l_q());
        for (i, &b) in cfg.bits().iter().enumerate() {
            let (s_x, x_q) = if quantize {
                let s = self.qlayers[i].steps.step(TensorKind::Activations, b)?;
                (Some(s), quantize_round(&h, s, bounds_for(b, TensorKind::Activations)?)?)
            } else {
                (None, h.clone())
            };
            let (w_q, w_stages) = if quantize {
                self.quantize_layer_weights(i, b)?
            } else {
                (self.qlayers[i].weight.value.clone(), Vec::new())
            };
            let layer = &mut self.qlayers[i];
            let conv = conv2d_forward(&x_q, &w_q, layer.stride, PAD)?;
            let (bn_out, bn_cache) = layer.bn_for_mut(b)?.forward(&conv, Mode::Train)?;
            let out = relu(&bn_out);
            layer_caches.push(QLayerCache {
                bit: b,
                x_raw: h,
                s_x,
                x_q,
                w_stages,
                w_q,
                bn_cache,
                pre_relu: bn_out,
            });
            h = out;
        }

        let pooled = global_avg_pool(&h)?;
        let logits = fully_connected(&pooled, &self.head.weight.value, &self.head.bias.value)?;
        let head_cache = HeadCache { gap_in_shape: h.shape().to_vec(), gap_out: pooled };
        Ok((logits, Trace { stem: stem_cache, layers: layer_caches, head: head_cache }))
    }

    /// Accumulates gradients from `dlogits` into every parameter touched by
    /// the traced forward.
    pub fn backward(&mut self, trace: &Trace, dlogits: &Tensor) -> Result<()> {
        let (dpool, dw, db) =
            fully_connected_backward(&trace.head.gap_out, &self.head.weight.value, dlogits);
        self.head.weight.add_grad(dw.data());
        self.head.bias.add_grad(db.data());
        let mut dh = global_avg_pool_backward(&trace.head.gap_in_shape, &dpool);

        for (i, cache) in trace.layers.iter().enumerate().rev() {
            let drelu = relu_backward(&cache.pre_relu, &dh);
            let layer = &mut self.qlayers[i];
            let dconv = layer.bn_for_mut(cache.bit)?.backward(&cache.bn_cache, &drelu);
            let (dx_q, dw_q) = conv2d_backward(&cache.x_q, &cache.w_q, layer.stride, PAD, &dconv)?;

            // Weight chain, innermost stage first.
            let mut dgrad = dw_q;
            for (stage_in, s, bit) in cache.w_stages.iter().rev() {
                let bounds = bounds_for(*bit, TensorKind::Weights)?;
                let (dstage, ds) = quantize_backward(stage_in, *s, bounds, &dgrad)?;
                layer.steps.param_mut(TensorKind::Weights, *bit)?.add_scalar_grad(ds);
                dgrad = dstage;
            }
            layer.weight.add_grad(dgrad.data());

            // Activation quantizer (identity on full-precision passes).
            match cache.s_x {
                Some(s_x) => {
                    let bounds = bounds_for(cache.bit, TensorKind::Activations)?;
                    let (dx_raw, ds_x) = quantize_backward(&cache.x_raw, s_x, bounds, &dx_q)?;
                    layer.steps.param_mut(TensorKind::Activations, cache.bit)?.add_scalar_grad(ds_x);
                    dh = dx_raw;
                }
                None => dh = dx_q,
            }
        }

        let drelu = relu_backward(&trace.stem.pre_relu, &dh);
        let dconv = self.stem.bn.backward(&trace.stem.bn_cache, &drelu);
        let (_, dw) = conv2d_backward(&trace.stem.input, &self.stem.weight.value, self.stem.stride, PAD, &dconv)?;
        self.stem.weight.add_grad(dw.data());
        Ok(())
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.stem.weight);
        f(&mut self.stem.bn.gamma);
        f(&mut self.stem.bn.beta);
        for layer in &mut self.qlayers {
            f(&mut layer.weight);
            layer.steps.visit_params(f);
            for bn in layer.bn.values_mut() {
                f(&mut bn.gamma);
                f(&mut bn.beta);
            }
        }
        f(&mut self.head.weight);
        f(&mut self.head.bias);
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }

    /// Re-applies the step-size positivity floor.
    pub fn clamp_step_sizes(&mut self) {
        for layer in &mut self.qlayers {
            layer.steps.clamp_floor();
        }
    }

    /// EMA pull of every parameter AND BN running statistic toward `src`.
    pub fn ema_from(&mut self, src: &SuperNet, tau: f32) {
        self.stem.weight.ema_from(&src.stem.weight, tau);
        self.stem.bn.ema_from(&src.stem.bn, tau);
        for (dst, s) in self.qlayers.iter_mut().zip(&src.qlayers) {
            dst.weight.ema_from(&s.weight, tau);
            dst.steps.ema_from(&s.steps, tau);
            for (b, bn) in dst.bn.iter_mut() {
                bn.ema_from(&s.bn[b], tau);
            }
        }
        self.head.weight.ema_from(&src.head.weight, tau);
        self.head.bias.ema_from(&src.head.bias, tau);
    }

    /// Uniform i.i.d. per-layer sample over the bit set, rejecting any config
    /// in `forbid`.
    pub fn sample_random_config(&self, rng: &mut Rng, forbid: &[BitConfig]) -> Result<BitConfig> {
        sample_random_config(&self.bits, self.l_q(), rng, forbid)
    }

    /// All `n^L_q` configs in lexicographic order (bit-set order per digit),
    /// refused when the count exceeds `cap`.
    pub fn enumerate_configs(&self, cap: u64) -> Result<Vec<BitConfig>> {
        enumerate_configs(&self.bits, self.l_q(), cap)
    }

    pub fn cost_table(&self) -> CostTable {
        let macs: Vec<u64> = self.qlayers.iter().map(|l| macs_of_layer(&l.geometry)).collect();
        let stem_geom = LayerGeometry {
            c_in: self.arch.in_channels,
            c_out: self.arch.stem_channels,
            kernel: KERNEL,
            h_out: self.arch.in_h,
            w_out: self.arch.in_w,
        };
        let head_macs = (self.arch.classes * self.head.weight.value.shape()[1]) as u64;
        CostTable::new(macs, self.bits.clone(), macs_of_layer(&stem_geom) + head_macs)
            .expect("valid geometry")
    }

    /// MACs of one full forward pass (quantizable + full-precision layers).
    pub fn forward_macs(&self) -> u64 {
        let t = self.cost_table();
        (0..self.l_q()).map(|i| t.layer_macs(i).unwrap()).sum::<u64>() + t.fp_macs()
    }
}

pub fn sample_random_config(bits: &BitSet, l_q: usize, rng: &mut Rng, forbid: &[BitConfig]) -> Result<BitConfig> {
    let n = bits.len() as u64;
    for _ in 0..100_000 {
        let cfg = BitConfig::new((0..l_q).map(|_| bits.bits()[rng.below(n) as usize]).collect());
        if !forbid.contains(&cfg) {
            return Ok(cfg);
        }
    }
    Err(Error::Domain("rejection sampling exhausted; forbid set too large".into()))
}

pub fn enumerate_configs(bits: &BitSet, l_q: usize, cap: u64) -> Result<Vec<BitConfig>> {
    let n = bits.len() as u64;
    let count = n
        .checked_pow(l_q as u32)
        .ok_or_else(|| Error::Refused(format!("config space {n}^{l_q} overflows")))?;
    if count > cap {
        return Err(Error::Refused(format!("config space has {count} entries, cap is {cap}")));
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut digits = vec![0usize; l_q];
    loop {
        out.push(BitConfig::new(digits.iter().map(|&d| bits.bits()[d]).collect()));
        let mut pos = l_q;
        loop {
            if pos == 0 {
                return Ok(out);
            }
            pos -= 1;
            digits[pos] += 1;
            if digits[pos] < bits.len() {
                break;
            }
            digits[pos] = 0;
        }
    }
}

pub const DEFAULT_ENUM_CAP: u64 = 100_000;
