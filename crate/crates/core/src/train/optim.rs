//! Adam with global-norm clipping, and the warmup/decay learning-rate
//! schedule.

use std::collections::HashMap;

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// First and second moments per parameter, keyed by parameter name.
/// Each parameter keeps its own step count, so parameters that receive no
/// gradient for a while (e.g. heads during the LM stage) are left alone.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    moments: HashMap<String, Moments>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of updates applied to the named parameter.
    pub fn steps(&self, name: &str) -> u64 {
        self.moments.get(name).map_or(0, |m| m.t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Factor applied to every gradient (1 when not clipped).
    pub clip_scale: f64,
}

/// One optimizer update from the gradients currently held by `params`.
/// Parameters are replaced by fresh leaves, which also clears their
/// gradients. A non-finite gradient aborts before anything changes.
pub fn adam_step(params: &mut ModelParams, state: &mut AdamState, lr: f64, cfg: &TrainConfig) -> Result<StepStats> {
    let mut slots = params.named_params_mut();
    let grads: Vec<Option<Vec<f64>>> = slots.iter().map(|(_, t)| t.grad()).collect();

    let mut sq = 0.0;
    for ((name, _), g) in slots.iter().zip(&grads) {
        if let Some(g) = g {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    what: "gradient",
                    name: name.clone(),
                });
            }
            sq += g.iter().map(|x| x * x).sum::<f64>();
        }
    }
    let grad_norm = sq.sqrt();
    let clip_scale = if grad_norm > cfg.max_grad_norm {
        cfg.max_grad_norm / grad_norm
    } else {
        1.0
    };

    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    for ((name, slot), g) in slots.iter_mut().zip(grads) {
        let Some(g) = g else { continue };
        let n = g.len();
        let mom = state.moments.entry(name.clone()).or_insert_with(|| Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        });
        mom.t += 1;
        let c1 = 1.0 - b1.powi(mom.t as i32);
        let c2 = 1.0 - b2.powi(mom.t as i32);
        let mut w = slot.data().to_vec();
        for i in 0..n {
            let gi = g[i] * clip_scale;
            mom.m[i] = b1 * mom.m[i] + (1.0 - b1) * gi;
            mom.v[i] = b2 * mom.v[i] + (1.0 - b2) * gi * gi;
            let m_hat = mom.m[i] / c1;
            let v_hat = mom.v[i] / c2;
            w[i] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_epsilon);
        }
        if w.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: "parameter",
                name: name.clone(),
            });
        }
        **slot = Tensor::parameter(w, slot.shape())?;
    }
    Ok(StepStats { grad_norm, clip_scale })
}

/// Number of warmup steps for a run of `total_steps` updates.
pub fn warmup_steps(total_steps: usize, cfg: &TrainConfig) -> usize {
    if cfg.warmup_steps > 0 {
        cfg.warmup_steps
    } else {
        (cfg.warmup_ratio * total_steps as f64).ceil() as usize
    }
}

/// Learning rate at update `step` (0-based): linear warmup from 0 to the
/// peak, then linear decay to 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let w = warmup_steps(total_steps, cfg);
    let peak = cfg.learning_rate;
    if step < w {
        peak * step as f64 / w as f64
    } else if total_steps <= w {
        peak
    } else {
        peak * total_steps.saturating_sub(step) as f64 / (total_steps - w) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderConfig, HeadLayout};
    use crate::task::Task;
    use crate::tensor;

    fn cfg() -> TrainConfig {
        TrainConfig::default()
    }

    #[test]
    fn schedule_examples() {
        let c = cfg();
        assert_eq!(lr_at(0, 100, &c), 0.0);
        assert_eq!(lr_at(10, 100, &c), 1e-5);
        assert!((lr_at(55, 100, &c) - 5e-6).abs() < 1e-18);
        assert_eq!(lr_at(100, 100, &c), 0.0);
        let fixed = TrainConfig {
            warmup_steps: 4,
            ..cfg()
        };
        assert_eq!(warmup_steps(100, &fixed), 4);
        assert_eq!(lr_at(2, 100, &fixed), 5e-6);
    }

    fn quad_param() -> ModelParams {
        let ec = EncoderConfig {
            vocab_size: 6,
            d_model: 2,
            n_layers: 1,
            n_heads: 1,
            d_ff: 2,
            max_seq_len: 3,
            dropout: 0.0,
        };
        ModelParams::init(&ec, HeadLayout::Single(Task::Toxic), false, 0).unwrap()
    }

    #[test]
    fn zero_gradients_leave_parameters() {
        let mut p = quad_param();
        let before: Vec<Vec<f64>> = p.named_params().iter().map(|(_, t)| t.data().to_vec()).collect();
        for (_, t) in p.named_params() {
            t.accumulate_grad(&vec![0.0; t.numel()]);
        }
        adam_step(&mut p, &mut AdamState::new(), 0.1, &cfg()).unwrap();
        let after: Vec<Vec<f64>> = p.named_params().iter().map(|(_, t)| t.data().to_vec()).collect();
        assert_eq!(before, after);
        assert!(p.named_params().iter().all(|(_, t)| t.grad().is_none()));
    }

    #[test]
    fn clipping_scales_to_max_norm() {
        let mut p = quad_param();
        let named = p.named_params();
        let (_, first) = &named[0];
        let mut g = vec![0.0; first.numel()];
        g[0] = 6.0;
        g[1] = 8.0;
        first.accumulate_grad(&g);
        drop(named);
        let stats = adam_step(&mut p, &mut AdamState::new(), 1e-3, &cfg()).unwrap();
        assert!((stats.grad_norm - 10.0).abs() < 1e-12);
        assert!((stats.clip_scale - 0.1).abs() < 1e-15);
    }

    #[test]
    fn nonfinite_gradient_names_parameter() {
        let mut p = quad_param();
        let (name, t) = p.named_params().into_iter().last().unwrap();
        let mut g = vec![0.0; t.numel()];
        g[0] = f64::NAN;
        t.accumulate_grad(&g);
        match adam_step(&mut p, &mut AdamState::new(), 1e-3, &cfg()) {
            Err(Error::NonFinite { name: n, .. }) => assert_eq!(n, name),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn quadratic_converges() {
        // f(w) = w², starting at 1: 500 steps at lr 0.1
        let c = TrainConfig {
            max_grad_norm: 1e9,
            ..cfg()
        };
        let mut p = quad_param();
        for (_, t) in p.named_params_mut() {
            *t = Tensor::parameter(vec![1.0; t.numel()], t.shape()).unwrap();
        }
        let mut state = AdamState::new();
        for _ in 0..500 {
            let named = p.named_params();
            let (_, w) = &named[0];
            let loss = tensor::sum(&tensor::mul(w, w).unwrap());
            loss.backward().unwrap();
            drop(named);
            // only the first parameter takes part
            adam_step(&mut p, &mut state, 0.1, &c).unwrap();
        }
        let named = p.named_params();
        assert!(named[0].1.data().iter().all(|w| w.abs() < 1e-2), "{:?}", named[0].1.data());
        assert_eq!(state.steps(&named[1].0), 0);
    }
}
