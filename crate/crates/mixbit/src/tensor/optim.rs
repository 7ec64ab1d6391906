//! SGD with momentum, Adam, and the cosine learning-rate schedule.

use super::{Elem, Parameter};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct SgdParams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// One SGD-with-momentum update. Weight decay is skipped for parameters
/// flagged no-decay (step sizes, BN affine).
pub fn sgd_step<E: Elem>(param: &mut Parameter<E>, opt: &SgdParams) -> Result<()> {
    if opt.lr <= 0.0 {
        return Err(Error::Domain(format!("sgd lr must be positive, got {}", opt.lr)));
    }
    if !param.learnable {
        return Ok(());
    }
    let Some(grad) = param.value.grad().map(|g| g.to_vec()) else {
        return Ok(());
    };
    let lr = E::lit(opt.lr);
    let mu = E::lit(opt.momentum);
    let wd = if param.decay { E::lit(opt.weight_decay) } else { E::zero() };
    let n = param.value.numel();
    if param.momentum.is_none() && opt.momentum != 0.0 {
        param.momentum = Some(vec![E::zero(); n]);
    }
    for i in 0..n {
        let mut g = grad[i];
        if wd != E::zero() {
            g = g + wd * param.value.data()[i];
        }
        let step = if let Some(buf) = &mut param.momentum {
            buf[i] = mu * buf[i] + g;
            buf[i]
        } else {
            g
        };
        let v = param.value.data()[i] - lr * step;
        if !v.is_finite() {
            return Err(Error::NonFinite("sgd update".into()));
        }
        param.value.data_mut()[i] = v;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One Adam update with bias correction.
pub fn adam_step<E: Elem>(param: &mut Parameter<E>, opt: &AdamParams) -> Result<()> {
    if opt.lr <= 0.0 {
        return Err(Error::Domain(format!("adam lr must be positive, got {}", opt.lr)));
    }
    if !param.learnable {
        return Ok(());
    }
    let Some(grad) = param.value.grad().map(|g| g.to_vec()) else {
        return Ok(());
    };
    let n = param.value.numel();
    if param.adam_m.is_none() {
        param.adam_m = Some(vec![E::zero(); n]);
        param.adam_v = Some(vec![E::zero(); n]);
        param.adam_t = 0;
    }
    param.adam_t += 1;
    let t = param.adam_t as i32;
    let (b1, b2) = (E::lit(opt.beta1), E::lit(opt.beta2));
    let corr1 = E::one() - b1.powi(t);
    let corr2 = E::one() - b2.powi(t);
    let lr = E::lit(opt.lr);
    let eps = E::lit(opt.eps);
    let m = param.adam_m.as_mut().unwrap();
    let v = param.adam_v.as_mut().unwrap();
    for i in 0..n {
        let g = grad[i];
        m[i] = b1 * m[i] + (E::one() - b1) * g;
        v[i] = b2 * v[i] + (E::one() - b2) * g * g;
        let mhat = m[i] / corr1;
        let vhat = v[i] / corr2;
        let value = param.value.data()[i] - lr * mhat / (vhat.sqrt() + eps);
        if !value.is_finite() {
            return Err(Error::NonFinite("adam update".into()));
        }
        param.value.data_mut()[i] = value;
    }
    Ok(())
}

/// Cosine schedule: `0.5 * lr0 * (1 + cos(pi * t / total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    let total = total_steps.max(1) as f64;
    let t = (step as f64).min(total);
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * t / total).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.02), 0.02);
        assert!(cosine_lr(100, 100, 0.02).abs() < 1e-18);
        let mid = cosine_lr(50, 100, 0.02);
        assert!((mid - 0.01).abs() < 1e-12);
    }

    #[test]
    fn vanilla_sgd_rule() {
        let mut p = Parameter::new(Tensor::new(vec![2], vec![1.0f32, -2.0]).unwrap());
        p.add_grad(&[0.5, 0.25]);
        sgd_step(&mut p, &SgdParams { lr: 0.1, momentum: 0.0, weight_decay: 0.0 }).unwrap();
        assert_eq!(p.value.data(), &[1.0 - 0.1 * 0.5, -2.0 - 0.1 * 0.25]);
    }

    #[test]
    fn no_decay_flag_skips_weight_decay() {
        let mut p = Parameter::no_decay(Tensor::new(vec![1], vec![2.0f32]).unwrap());
        p.add_grad(&[0.0]);
        sgd_step(&mut p, &SgdParams { lr: 0.1, momentum: 0.0, weight_decay: 1.0 }).unwrap();
        assert_eq!(p.value.data()[0], 2.0);

        let mut q = Parameter::new(Tensor::new(vec![1], vec![2.0f32]).unwrap());
        q.add_grad(&[0.0]);
        sgd_step(&mut q, &SgdParams { lr: 0.1, momentum: 0.0, weight_decay: 1.0 }).unwrap();
        assert!((q.value.data()[0] - (2.0 - 0.1 * 2.0)).abs() < 1e-7);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut p = Parameter::new(Tensor::new(vec![1], vec![1.0f32]).unwrap());
        for _ in 0..10 {
            p.zero_grad();
            p.add_grad(&[1.0]);
            adam_step(&mut p, &AdamParams { lr: 0.01, ..Default::default() }).unwrap();
        }
        assert!(p.value.data()[0] < 1.0);
    }

    #[test]
    fn non_positive_lr_rejected() {
        let mut p = Parameter::new(Tensor::new(vec![1], vec![1.0f32]).unwrap());
        p.add_grad(&[1.0]);
        assert!(sgd_step(&mut p, &SgdParams { lr: 0.0, momentum: 0.0, weight_decay: 0.0 }).is_err());
        assert!(adam_step(&mut p, &AdamParams { lr: -1.0, ..Default::default() }).is_err());
    }
}
