//! AdamW with decoupled weight decay, warmup + cosine schedule, layer-wise
//! lr decay and parameter EMA.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.05,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(key, format!("must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("wd", "must be >= 0"));
        }
        Ok(())
    }
}

/// Per-parameter optimizer options.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamHyper {
    pub decay: bool,
    /// Multiplies the scheduled lr (layer-wise decay).
    pub lr_scale: f64,
}

impl Default for ParamHyper {
    fn default() -> Self {
        ParamHyper {
            decay: true,
            lr_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub hyper: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(hyper: AdamWConfig, params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        OptimizerState {
            hyper,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One AdamW update in place.
///
/// For each parameter: `p ← p·(1 − lr·wd)` when it decays, then the
/// bias-corrected Adam step `p ← p − lr·m̂ / (sqrt(v̂) + eps)`, both with the
/// parameter's scaled lr. Non-finite gradients abort before anything changes.
pub fn adamw_step(
    state: &mut OptimizerState,
    params: &mut [Tensor],
    grads: &[Tensor],
    lr: f64,
    hyper: &[ParamHyper],
) -> Result<()> {
    let step = state.step + 1;
    if params.len() != grads.len() || params.len() != hyper.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adamw_step",
            &[params.len(), state.m.len()],
            &[grads.len(), hyper.len()],
        ));
    }
    if !(lr >= 0.0) {
        return Err(Error::config("lr", format!("must be >= 0, got {lr}")));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::shape("adamw_step", p.shape(), g.shape()));
        }
        if !g.all_finite() {
            return Err(Error::Training {
                step,
                msg: format!("non-finite gradient for parameter {i}"),
            });
        }
    }

    let AdamWConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.hyper;
    let bc1 = 1.0 - beta1.powi(step as i32);
    let bc2 = 1.0 - beta2.powi(step as i32);
    for i in 0..params.len() {
        let plr = lr * hyper[i].lr_scale;
        let shrink = if hyper[i].decay {
            1.0 - plr * weight_decay
        } else {
            1.0
        };
        let mut m = state.m[i].data().to_vec();
        let mut v = state.v[i].data().to_vec();
        let mut p = params[i].data().to_vec();
        for (((pj, mj), vj), &g) in p.iter_mut().zip(&mut m).zip(&mut v).zip(grads[i].data()) {
            *mj = beta1 * *mj + (1.0 - beta1) * g;
            *vj = beta2 * *vj + (1.0 - beta2) * g * g;
            let m_hat = *mj / bc1;
            let v_hat = *vj / bc2;
            *pj = *pj * shrink - plr * m_hat / (v_hat.sqrt() + eps);
        }
        let shape = params[i].shape().to_vec();
        params[i] = Tensor::from_parts(shape.clone(), p);
        state.m[i] = Tensor::from_parts(shape.clone(), m);
        state.v[i] = Tensor::from_parts(shape, v);
    }
    state.step = step;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub floor_lr: f64,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::config(
                "warmup_steps",
                format!(
                    "{} exceeds total_steps {}",
                    self.warmup_steps, self.total_steps
                ),
            ));
        }
        if !(self.peak_lr >= 0.0) || !(self.floor_lr >= 0.0) {
            return Err(Error::config("peak_lr", "learning rates must be >= 0"));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak_lr`, then cosine annealing down to
/// `floor_lr` at `total_steps`. Steps past the end stay at the floor.
pub fn cosine_lr(step: u64, s: &LrSchedule) -> f64 {
    if step < s.warmup_steps {
        return s.peak_lr * step as f64 / s.warmup_steps as f64;
    }
    let span = s.total_steps.saturating_sub(s.warmup_steps);
    if span == 0 {
        return s.peak_lr;
    }
    let t = ((step - s.warmup_steps) as f64 / span as f64).min(1.0);
    s.floor_lr + 0.5 * (s.peak_lr - s.floor_lr) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// `base · decay^(num_groups − 1 − group)`: the head group (last) gets
/// `base`, the embedding group (0) the smallest rate.
pub fn layerwise_lr(base: f64, decay: f64, group: usize, num_groups: usize) -> Result<f64> {
    if group >= num_groups {
        return Err(Error::Index(format!("lr group {group} of {num_groups}")));
    }
    if !(decay > 0.0 && decay <= 1.0) {
        return Err(Error::config(
            "layer_decay",
            format!("must lie in (0, 1], got {decay}"),
        ));
    }
    Ok(base * decay.powi((num_groups - 1 - group) as i32))
}

/// `ema ← alpha·ema + (1 − alpha)·params`.
pub fn ema_update(ema: &mut [Tensor], params: &[Tensor], alpha: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::config(
            "ema",
            format!("alpha must lie in [0, 1), got {alpha}"),
        ));
    }
    if ema.len() != params.len() {
        return Err(Error::shape("ema_update", &[ema.len()], &[params.len()]));
    }
    for (e, p) in ema.iter_mut().zip(params) {
        *e = e.zip_map(p, "ema_update", |e, p| alpha * e + (1.0 - alpha) * p)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn zero_grad_only_decays() {
        let hyper = AdamWConfig::default();
        let mut params = vec![t(&[1.0, -2.0, 3.0]), t(&[0.5, 0.25])];
        let orig = params.clone();
        let mut state = OptimizerState::new(hyper, &params);
        let grads = vec![Tensor::zeros(&[3]), Tensor::zeros(&[2])];
        let opts = [
            ParamHyper::default(),
            ParamHyper {
                decay: false,
                lr_scale: 1.0,
            },
        ];
        adamw_step(&mut state, &mut params, &grads, 0.1, &opts).unwrap();
        for (a, b) in params[0].data().iter().zip(orig[0].data()) {
            assert_eq!(*a, b * (1.0 - 0.1 * 0.05));
        }
        assert_eq!(params[1], orig[1]);
        assert!(state
            .m
            .iter()
            .chain(&state.v)
            .all(|m| m.data().iter().all(|&x| x == 0.0)));
        assert_eq!(state.step, 1);
    }

    #[test]
    fn constant_gradient_steps_approach_lr() {
        let hyper = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut params = vec![t(&[0.0, 0.0])];
        let mut state = OptimizerState::new(hyper, &params);
        let grads = vec![t(&[0.3, -7.0])];
        let mut prev = params[0].clone();
        for _ in 0..50 {
            adamw_step(
                &mut state,
                &mut params,
                &grads,
                0.01,
                &[ParamHyper::default()],
            )
            .unwrap();
            let d: Vec<f64> = params[0]
                .data()
                .iter()
                .zip(prev.data())
                .map(|(a, b)| a - b)
                .collect();
            assert!((d[0] + 0.01).abs() < 1e-6 * 0.01 / 0.3 * 10.0);
            assert!((d[1] - 0.01).abs() < 1e-8);
            prev = params[0].clone();
        }
    }

    #[test]
    fn zero_lr_is_noop_and_nan_is_error() {
        let mut params = vec![t(&[1.0, 2.0])];
        let orig = params.clone();
        let mut state = OptimizerState::new(AdamWConfig::default(), &params);
        adamw_step(
            &mut state,
            &mut params,
            &[t(&[5.0, -1.0])],
            0.0,
            &[ParamHyper::default()],
        )
        .unwrap();
        assert_eq!(params, orig);

        let nan = Tensor::from_parts(vec![2], vec![f64::NAN, 0.0]);
        let err = adamw_step(
            &mut state,
            &mut params,
            &[nan],
            0.1,
            &[ParamHyper::default()],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Training { step: 2, .. }), "{err}");
        assert_eq!(params, orig);
    }

    #[test]
    fn schedule_shape() {
        let s = LrSchedule {
            peak_lr: 3e-3,
            warmup_steps: 10,
            total_steps: 110,
            floor_lr: 1e-5,
        };
        assert_eq!(cosine_lr(0, &s), 0.0);
        assert!((cosine_lr(5, &s) - 1.5e-3).abs() < 1e-18);
        assert_eq!(cosine_lr(10, &s), 3e-3);
        assert!((cosine_lr(60, &s) - (3e-3 + 1e-5) / 2.0).abs() < 1e-15);
        assert!((cosine_lr(110, &s) - 1e-5).abs() < 1e-18);
        for step in 10..110 {
            assert!(cosine_lr(step + 1, &s) <= cosine_lr(step, &s));
        }
        let bad = LrSchedule {
            warmup_steps: 200,
            ..s
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn layerwise_rates() {
        let groups = 14;
        assert_eq!(layerwise_lr(1e-4, 0.8, 13, groups).unwrap(), 1e-4);
        assert!((layerwise_lr(1e-4, 0.8, 12, groups).unwrap() - 0.8e-4).abs() < 1e-18);
        for g in 0..groups {
            assert_eq!(layerwise_lr(2.0, 1.0, g, groups).unwrap(), 2.0);
        }
        assert!(layerwise_lr(1.0, 0.8, 14, groups).is_err());
    }

    #[test]
    fn ema_rules() {
        let params = vec![t(&[1.0, -3.0])];
        let mut ema = vec![t(&[0.0, 0.0])];
        ema_update(&mut ema, &params, 0.0).unwrap();
        assert_eq!(ema, params);

        let mut ema = vec![t(&[0.0])];
        ema_update(&mut ema, &[t(&[1.0])], 0.9999).unwrap();
        assert!((ema[0].data()[0] - 1e-4).abs() < 1e-15);

        // geometric convergence: 1 - ema_k = alpha^k
        let mut ema = vec![t(&[0.0])];
        for k in 1..=20 {
            ema_update(&mut ema, &[t(&[1.0])], 0.7).unwrap();
            assert!(((1.0 - ema[0].data()[0]) - 0.7f64.powi(k)).abs() < 1e-12);
        }
        assert!(ema_update(&mut ema, &[t(&[1.0, 2.0])], 0.5).is_err());
        assert!(ema_update(&mut ema, &[t(&[1.0])], 1.0).is_err());
    }
}
