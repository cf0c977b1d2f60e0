use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Linear warm-up over the first `ceil(warmup_ratio * steps)` steps, then
/// cosine decay to zero.
pub fn lr_at(step: usize, steps: usize, base: f64, warmup_ratio: f64) -> f64 {
    if steps == 0 {
        return base;
    }
    let warm = (warmup_ratio * steps as f64).ceil() as usize;
    if step < warm {
        return base * (step + 1) as f64 / warm as f64;
    }
    let span = (steps - warm).max(1) as f64;
    let progress = ((step - warm) as f64 / span).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4, clip_norm: 1.0 }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u32,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, shapes: &[usize]) -> Self {
        Self {
            cfg,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// One update; returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<f64> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::dim("adamw", format!("{} params, {} grads, {} slots", params.len(), grads.len(), self.m.len())));
        }
        let norm = grads.iter().flat_map(|g| g.data()).map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm { self.cfg.clip_norm / norm } else { 1.0 };
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::dim("adamw", format!("param {i} has {} values, gradient {}", p.len(), g.len())));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gr), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gr = gr * clip;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gr;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gr * gr;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
                *w -= lr * (update + c.weight_decay * *w);
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays_to_zero() {
        assert!((lr_at(0, 100, 1.0, 0.1) - 0.1).abs() < 1e-12);
        assert!((lr_at(9, 100, 1.0, 0.1) - 1.0).abs() < 1e-12);
        assert!((lr_at(10, 100, 1.0, 0.1) - 1.0).abs() < 1e-12);
        assert!(lr_at(99, 100, 1.0, 0.1) < 1e-3);
        let mut prev = f64::INFINITY;
        for s in 10..100 {
            let lr = lr_at(s, 100, 1.0, 0.1);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn zero_learning_rate_leaves_weights_bitwise_unchanged() {
        let mut w = Tensor::matrix(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let before = w.clone();
        let g = Tensor::matrix(2, 2, vec![0.3, 0.1, -0.2, 0.9]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &[4]);
        opt.step(&mut [&mut w], &[g], 0.0).unwrap();
        assert_eq!(w, before);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut w = Tensor::row_vector(vec![3.0, -4.0]);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &[2]);
        for _ in 0..2000 {
            let g = w.scale(2.0);
            opt.step(&mut [&mut w], &[g], 0.01).unwrap();
        }
        assert!(w.data().iter().all(|v| v.abs() < 1e-2), "{:?}", w.data());
    }
}
