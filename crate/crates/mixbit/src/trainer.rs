//! Super-network training: every mini-batch runs four sub-stages in order —
//! uniform max-bit (cross-entropy), uniform mid-bit (distilled), k random
//! mixed configs (distilled), uniform min-bit (distilled from the averaged
//! soft-label buffer) — accumulating one gradient and taking exactly one
//! optimizer step. Soft labels come from a slow EMA clone of the net (the
//! target network), from the net itself, or not at all, per [`DistillMode`].

use crate::error::{Error, Result};
use crate::quant::{BitSet, QuantMode};
use crate::rng::{Rng, Stream};
use crate::supernet::{ArchSpec, BitConfig, SuperNet};
use crate::tensor::{
    cosine_lr, kl_divergence, kl_divergence_backward, sgd_step, softmax_cross_entropy,
    softmax_cross_entropy_backward, softmax_rows, SgdParams, Tensor,
};
use crate::data::Dataset;

/// Which teacher supervises the distilled stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistillMode {
    /// No distillation: every stage trains with cross-entropy (the plain
    /// random-sampling baseline).
    None,
    /// Soft labels from the main net's own (detached) stage outputs.
    MainEnsemble,
    /// Soft labels from the EMA target network.
    TargetEnsemble,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Random-stage sample count.
    pub k: usize,
    /// EMA decay of the target network.
    pub tau: f32,
    /// Soft-label temperature.
    pub temperature: f32,
    pub bits: BitSet,
    pub mode: QuantMode,
    pub seed: u64,
    pub distill: DistillMode,
    /// Full-precision warm-up epochs before quantized training.
    pub fp_pretrain_epochs: usize,
    /// Train only the uniform max-bit stage (joint baseline for ablations).
    pub max_stage_only: bool,
    /// Per-epoch metric evaluation subset size.
    pub eval_subset: usize,
    /// Number of random mixed configs in the per-epoch "mixed" metric row.
    pub mixed_eval_configs: usize,
}

impl TrainConfig {
    pub fn new(bits: BitSet) -> Self {
        TrainConfig {
            epochs: 20,
            batch: 64,
            lr0: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            k: 2,
            tau: 0.995,
            temperature: 1.0,
            bits,
            mode: QuantMode::RoundMaster,
            seed: 1,
            distill: DistillMode::TargetEnsemble,
            fp_pretrain_epochs: 3,
            max_stage_only: false,
            eval_subset: 256,
            mixed_eval_configs: 16,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Domain("k must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&(self.tau as f64)) && self.tau != 1.0 {
            return Err(Error::Domain(format!("tau must be in (0, 1), got {}", self.tau)));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Domain("temperature must be positive".into()));
        }
        if self.bits.len() < 2 && !self.max_stage_only {
            return Err(Error::Domain("super-net training needs at least two bit-widths".into()));
        }
        Ok(())
    }
}

/// Per-mini-batch collection of detached teacher logits from the first three
/// stages, averaged to supervise the min-bit stage.
#[derive(Debug, Default)]
pub struct SoftLabelBuffer {
    logits: Vec<Tensor>,
}

impl SoftLabelBuffer {
    pub fn new() -> Self {
        SoftLabelBuffer { logits: Vec::new() }
    }

    pub fn clear(&mut self) {
        self.logits.clear();
    }

    pub fn push(&mut self, logits: Tensor) {
        self.logits.push(logits);
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    /// Elementwise mean of the buffered logits.
    pub fn mean(&self) -> Result<Tensor> {
        let first = self.logits.first().ok_or_else(|| Error::Domain("soft-label buffer is empty".into()))?;
        let mut acc = Tensor::zeros(first.shape());
        for t in &self.logits {
            for (a, &v) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += v;
            }
        }
        let inv = 1.0 / self.logits.len() as f32;
        for a in acc.data_mut() {
            *a *= inv;
        }
        Ok(acc)
    }
}

/// Losses of the four sub-stages of one step.
#[derive(Debug, Clone)]
pub struct StageLosses {
    pub l_max: f32,
    pub l_mid: Option<f32>,
    pub l_rand: Vec<f32>,
    pub l_min: Option<f32>,
}

impl StageLosses {
    pub fn total(&self) -> f32 {
        let rand_mean = if self.l_rand.is_empty() {
            0.0
        } else {
            self.l_rand.iter().sum::<f32>() / self.l_rand.len() as f32
        };
        self.l_max + self.l_mid.unwrap_or(0.0) + rand_mean + self.l_min.unwrap_or(0.0)
    }
}

/// EMA pull of every target parameter and BN statistic toward the main net.
pub fn ema_update(target: &mut SuperNet, main: &SuperNet, tau: f32) {
    target.ema_from(main, tau);
}

fn teacher_probs(logits: &Tensor, temperature: f32) -> Tensor {
    if temperature == 1.0 {
        softmax_rows(logits)
    } else {
        softmax_rows(&logits.map(|z| z / temperature))
    }
}

/// KL stage: computes the loss against constant teacher probabilities and
/// backpropagates `scale * dKL` through the net.
fn kd_stage(
    net: &mut SuperNet,
    x: &Tensor,
    cfg_bits: &BitConfig,
    teacher: &Tensor,
    temperature: f32,
    scale: f32,
) -> Result<(f32, Tensor)> {
    let (logits, trace) = net.forward_train(x, cfg_bits)?;
    let scaled = if temperature == 1.0 { logits.clone() } else { logits.map(|z| z / temperature) };
    let (loss, student_probs) = kl_divergence(teacher, &scaled)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("distillation loss".into()));
    }
    let mut d = kl_divergence_backward(&student_probs, teacher);
    let factor = scale / temperature;
    if factor != 1.0 {
        for v in d.data_mut() {
            *v *= factor;
        }
    }
    net.backward(&trace, &d)?;
    Ok((loss, logits))
}

/// Cross-entropy stage with gradient scale.
fn ce_stage(net: &mut SuperNet, x: &Tensor, cfg_bits: &BitConfig, y: &[usize], scale: f32) -> Result<(f32, Tensor)> {
    let (logits, trace) = net.forward_train(x, cfg_bits)?;
    let (loss, probs) = softmax_cross_entropy(&logits, y)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross-entropy loss".into()));
    }
    let mut d = softmax_cross_entropy_backward(&probs, y);
    if scale != 1.0 {
        for v in d.data_mut() {
            *v *= scale;
        }
    }
    net.backward(&trace, &d)?;
    Ok((loss, logits))
}

/// One training step: the staged forwards/backwards, one optimizer step,
/// one EMA update. `target` must be `Some` iff the distill mode is
/// `TargetEnsemble`.
pub fn train_step(
    net: &mut SuperNet,
    target: Option<&mut SuperNet>,
    buffer: &mut SoftLabelBuffer,
    x: &Tensor,
    y: &[usize],
    cfg: &TrainConfig,
    lr: f64,
    config_rng: &mut Rng,
) -> Result<StageLosses> {
    match (cfg.distill, target.is_some()) {
        (DistillMode::TargetEnsemble, false) => {
            return Err(Error::Domain("target-ensemble distillation needs a target net".into()))
        }
        (DistillMode::None | DistillMode::MainEnsemble, true) => {
            return Err(Error::Domain("target net provided but distill mode does not use one".into()))
        }
        _ => {}
    }
    buffer.clear();
    net.zero_grads();

    let l_q = net.l_q();
    let bits = &cfg.bits;
    let uniform_max = BitConfig::uniform(bits.max(), l_q);
    let uniform_min = BitConfig::uniform(bits.min(), l_q);

    // Stage I: uniform max-bit, cross-entropy against the labels.
    let (l_max, main_max_logits) = ce_stage(net, x, &uniform_max, y, 1.0)?;
    if cfg.max_stage_only {
        finish_step(net, target, cfg, lr)?;
        return Ok(StageLosses { l_max, l_mid: None, l_rand: Vec::new(), l_min: None });
    }

    // Teacher logits for stages II/III, and the stage-I buffer entry.
    let max_teacher_logits = match cfg.distill {
        DistillMode::TargetEnsemble => target.as_ref().unwrap().forward_frozen(x, &uniform_max)?,
        _ => main_max_logits,
    };
    if cfg.distill != DistillMode::None {
        buffer.push(max_teacher_logits.clone());
    }
    let max_teacher = teacher_probs(&max_teacher_logits, cfg.temperature);

    // Stage II: uniform mid-bit (skipped when the set has no mid entry).
    let l_mid = if bits.len() > 2 {
        let mids = bits.mids();
        let mid = if mids.len() == 1 { mids[0] } else { mids[config_rng.below(mids.len() as u64) as usize] };
        let cfg_mid = BitConfig::uniform(mid, l_q);
        let (loss, main_mid_logits) = match cfg.distill {
            DistillMode::None => ce_stage(net, x, &cfg_mid, y, 1.0)?,
            _ => kd_stage(net, x, &cfg_mid, &max_teacher, cfg.temperature, 1.0)?,
        };
        match cfg.distill {
            DistillMode::TargetEnsemble => buffer.push(target.as_ref().unwrap().forward_frozen(x, &cfg_mid)?),
            DistillMode::MainEnsemble => buffer.push(main_mid_logits),
            DistillMode::None => {}
        }
        Some(loss)
    } else {
        None
    };

    // Stage III: k random nonuniform configs, losses averaged over k.
    let forbid = [uniform_max.clone(), uniform_min.clone()];
    let scale = 1.0 / cfg.k as f32;
    let mut l_rand = Vec::with_capacity(cfg.k);
    for _ in 0..cfg.k {
        let cfg_rand = net.sample_random_config(config_rng, &forbid)?;
        let (loss, main_rand_logits) = match cfg.distill {
            DistillMode::None => ce_stage(net, x, &cfg_rand, y, scale)?,
            _ => kd_stage(net, x, &cfg_rand, &max_teacher, cfg.temperature, scale)?,
        };
        match cfg.distill {
            DistillMode::TargetEnsemble => buffer.push(target.as_ref().unwrap().forward_frozen(x, &cfg_rand)?),
            DistillMode::MainEnsemble => buffer.push(main_rand_logits),
            DistillMode::None => {}
        }
        l_rand.push(loss);
    }

    // Stage IV: uniform min-bit, supervised by the averaged buffer.
    let l_min = match cfg.distill {
        DistillMode::None => ce_stage(net, x, &uniform_min, y, 1.0)?.0,
        _ => {
            debug_assert_eq!(buffer.len(), if bits.len() > 2 { 2 + cfg.k } else { 1 + cfg.k });
            let ensemble = teacher_probs(&buffer.mean()?, cfg.temperature);
            kd_stage(net, x, &uniform_min, &ensemble, cfg.temperature, 1.0)?.0
        }
    };

    finish_step(net, target, cfg, lr)?;
    Ok(StageLosses { l_max, l_mid, l_rand, l_min: Some(l_min) })
}

fn finish_step(net: &mut SuperNet, target: Option<&mut SuperNet>, cfg: &TrainConfig, lr: f64) -> Result<()> {
    let opt = SgdParams { lr, momentum: cfg.momentum, weight_decay: cfg.weight_decay };
    let mut failed = None;
    net.visit_params(&mut |p| {
        if failed.is_none() {
            if let Err(e) = sgd_step(p, &opt) {
                failed = Some(e);
            }
        }
    });
    if let Some(e) = failed {
        return Err(e);
    }
    net.clamp_step_sizes();
    if let Some(t) = target {
        ema_update(t, net, cfg.tau);
    }
    Ok(())
}

/// One metrics row: `epoch, mode, bits, loss, top1`.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub epoch: usize,
    pub mode: String,
    pub bits: String,
    pub loss: f64,
    pub top1: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainMetrics {
    pub rows: Vec<MetricsRow>,
}

/// Mean loss and top-1 accuracy (percent) of `net` under `cfg_bits`.
pub fn evaluate(net: &SuperNet, data: &Dataset, cfg_bits: &BitConfig, batch: usize) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Domain("evaluation dataset is empty".into()));
    }
    let mut correct = 0usize;
    let mut loss_sum = 0.0f64;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch.max(1)) {
        let (x, y) = data.batch(chunk);
        let mut h = net.stem_eval(&x)?;
        for (i, &b) in cfg_bits.bits().iter().enumerate() {
            h = net.qlayer_eval(i, &h, b)?;
        }
        let logits = net.head_eval(&h)?;
        let (loss, probs) = softmax_cross_entropy(&logits, &y)?;
        loss_sum += loss as f64 * chunk.len() as f64;
        let classes = probs.shape()[1];
        for (s, &label) in y.iter().enumerate() {
            let row = &probs.data()[s * classes..(s + 1) * classes];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            if pred == label {
                correct += 1;
            }
        }
    }
    Ok((loss_sum / data.len() as f64, 100.0 * correct as f64 / data.len() as f64))
}

/// Builds and initializes a fresh net (weights + step sizes from one
/// calibration batch of `train`).
pub fn init_net(arch: ArchSpec, cfg: &TrainConfig, train: &Dataset) -> Result<SuperNet> {
    let mut net = SuperNet::new(arch, cfg.bits.clone(), cfg.mode)?;
    let mut rng = Rng::new(cfg.seed, Stream::Init);
    net.init_weights(&mut rng);
    let calib: Vec<usize> = (0..train.len().min(cfg.batch.max(16))).collect();
    let (x, _) = train.batch(&calib);
    net.init_step_sizes(&x)?;
    Ok(net)
}

/// Full training run; returns the trained net and per-epoch metrics
/// (one row per uniform bit-width plus one aggregate mixed row).
pub fn train_supernet(train: &Dataset, test: &Dataset, arch: ArchSpec, cfg: &TrainConfig) -> Result<(SuperNet, TrainMetrics)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Domain("training dataset is empty".into()));
    }
    let mut net = init_net(arch, cfg, train)?;
    train_supernet_from(&mut net, train, test, cfg).map(|metrics| (net, metrics))
}

/// Training loop over an already-initialized net.
pub fn train_supernet_from(net: &mut SuperNet, train: &Dataset, test: &Dataset, cfg: &TrainConfig) -> Result<TrainMetrics> {
    cfg.validate()?;
    let mut target = match cfg.distill {
        DistillMode::TargetEnsemble if !cfg.max_stage_only => Some(net.clone()),
        _ => None,
    };
    let mut shuffle_rng = Rng::new(cfg.seed, Stream::Shuffle);
    let mut config_rng = Rng::new(cfg.seed, Stream::ConfigSample);
    let mut eval_rng = Rng::new(cfg.seed, Stream::Eval);
    let mut buffer = SoftLabelBuffer::new();
    let steps_per_epoch = train.len().div_ceil(cfg.batch);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut metrics = TrainMetrics::default();
    let mut global_step = 0usize;
    let mut indices: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.epochs {
        shuffle_rng.shuffle(&mut indices);
        for chunk in indices.chunks(cfg.batch) {
            let (x, y) = train.batch(chunk);
            let lr = cosine_lr(global_step, total_steps, cfg.lr0);
            let losses = train_step(net, target.as_mut(), &mut buffer, &x, &y, cfg, lr, &mut config_rng)?;
            if !losses.total().is_finite() {
                return Err(Error::NonFinite(format!("training diverged at step {global_step}")));
            }
            global_step += 1;
        }
        record_epoch_metrics(net, test, cfg, epoch, &mut eval_rng, &mut metrics)?;
    }
    Ok(metrics)
}

fn record_epoch_metrics(
    net: &SuperNet,
    test: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
    eval_rng: &mut Rng,
    metrics: &mut TrainMetrics,
) -> Result<()> {
    let subset: Vec<usize> = (0..test.len().min(cfg.eval_subset)).collect();
    let eval_set = test.take(&subset);
    for &b in cfg.bits.bits() {
        let cfg_bits = BitConfig::uniform(b, net.l_q());
        let (loss, top1) = evaluate(net, &eval_set, &cfg_bits, cfg.batch)?;
        metrics.rows.push(MetricsRow { epoch, mode: "uniform".into(), bits: b.to_string(), loss, top1 });
    }
    let mut loss_sum = 0.0;
    let mut top1_sum = 0.0;
    for _ in 0..cfg.mixed_eval_configs {
        let mixed = net.sample_random_config(eval_rng, &[])?;
        let (loss, top1) = evaluate(net, &eval_set, &mixed, cfg.batch)?;
        loss_sum += loss;
        top1_sum += top1;
    }
    let m = cfg.mixed_eval_configs.max(1) as f64;
    metrics.rows.push(MetricsRow {
        epoch,
        mode: "mixed".into(),
        bits: format!("rand{}", cfg.mixed_eval_configs),
        loss: loss_sum / m,
        top1: top1_sum / m,
    });
    Ok(())
}

/// Standard cross-entropy training of one fixed config (independent
/// baselines and post-hoc subnet fine-tuning). Zero epochs returns the net
/// unchanged.
pub fn train_fixed_config(
    net: &mut SuperNet,
    cfg_bits: &BitConfig,
    train: &Dataset,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<()> {
    net.validate_config(cfg_bits)?;
    let mut shuffle_rng = Rng::new(seed, Stream::Shuffle);
    let mut indices: Vec<usize> = (0..train.len()).collect();
    let opt = SgdParams { lr, momentum: 0.9, weight_decay: 0.0 };
    for _ in 0..epochs {
        shuffle_rng.shuffle(&mut indices);
        for chunk in indices.chunks(64) {
            let (x, y) = train.batch(chunk);
            net.zero_grads();
            let (logits, trace) = net.forward_train(&x, cfg_bits)?;
            let (loss, probs) = softmax_cross_entropy(&logits, &y)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("fixed-config training diverged".into()));
            }
            let d = softmax_cross_entropy_backward(&probs, &y);
            net.backward(&trace, &d)?;
            let mut failed = None;
            net.visit_params(&mut |p| {
                if failed.is_none() {
                    if let Err(e) = sgd_step(p, &opt) {
                        failed = Some(e);
                    }
                }
            });
            if let Some(e) = failed {
                return Err(e);
            }
            net.clamp_step_sizes();
        }
    }
    Ok(())
}
