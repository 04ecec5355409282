//! AdamW with decoupled weight decay, global-norm clipping and a linear decay schedule.

use std::collections::HashMap;

use crate::param::Parameters;

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step: u32,
    moments: HashMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamW {
    /// PyTorch defaults: β = (0.9, 0.999), ε = 1e-8.
    pub fn new(weight_decay: f32) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    pub fn step<P: Parameters + ?Sized>(&mut self, model: &mut P, lr: f32) {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let moments = &mut self.moments;
        model.visit_params(&mut |p| {
            if p.frozen {
                return;
            }
            let (m, v) = moments
                .entry(p.name.to_string())
                .or_insert_with(|| (vec![0.0; p.value.len()], vec![0.0; p.value.len()]));
            let decay = if p.decay { 1.0 - lr * wd } else { 1.0 };
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p.value[i] = p.value[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
    }
}

/// Rescales trainable gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<P: Parameters + ?Sized>(model: &mut P, max_norm: f32) -> f32 {
    let mut sq = 0.0f64;
    model.visit_params(&mut |p| {
        if !p.frozen {
            sq += p.grad.iter().map(|g| (*g as f64) * (*g as f64)).sum::<f64>();
        }
    });
    let norm = sq.sqrt() as f32;
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / (norm + 1e-6);
        model.visit_params(&mut |p| {
            if !p.frozen {
                p.grad.iter_mut().for_each(|g| *g *= scale);
            }
        });
    }
    norm
}

/// Linear decay from `base_lr` to zero over `total_steps`, after optional warmup.
#[derive(Debug, Clone, Copy)]
pub struct LinearSchedule {
    pub base_lr: f32,
    pub warmup_steps: u32,
    pub total_steps: u32,
}

impl LinearSchedule {
    pub fn lr_at(&self, step: u32) -> f32 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f32 / self.warmup_steps as f32;
        }
        let remaining = self.total_steps.saturating_sub(step) as f32;
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1) as f32;
        self.base_lr * (remaining / span).clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{Param, ParamMut};
    use ndarray::Array1;

    struct Quadratic {
        x: Param<ndarray::Ix1>,
    }

    impl Parameters for Quadratic {
        fn visit_params(&mut self, f: &mut dyn FnMut(ParamMut<'_>)) {
            self.x.visit("x", f);
        }
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut q = Quadratic {
            x: Param::new(Array1::from(vec![3.0f32, -2.0]), false),
        };
        let mut opt = AdamW::new(0.0);
        for _ in 0..2000 {
            q.zero_grad();
            q.x.grad = q.x.value.mapv(|v| 2.0 * v);
            opt.step(&mut q, 0.01);
        }
        assert!(q.x.value.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn decoupled_decay_shrinks_weights_without_gradient() {
        let mut q = Quadratic {
            x: Param::new(Array1::from(vec![1.0f32]), true),
        };
        let mut opt = AdamW::new(0.1);
        opt.step(&mut q, 0.5);
        assert!((q.x.value[0] - 0.95).abs() < 1e-6);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut q = Quadratic {
            x: Param::new(Array1::zeros(2), true),
        };
        q.x.grad = Array1::from(vec![3.0, 4.0]);
        let before = clip_grad_norm(&mut q, 1.0);
        assert!((before - 5.0).abs() < 1e-6);
        let after = q.x.grad.iter().map(|g| g * g).sum::<f32>().sqrt();
        assert!((after - 1.0).abs() < 1e-4);
    }

    #[test]
    fn schedule_decays_to_zero() {
        let s = LinearSchedule {
            base_lr: 1.0,
            warmup_steps: 0,
            total_steps: 10,
        };
        assert_eq!(s.lr_at(0), 1.0);
        assert!((s.lr_at(5) - 0.5).abs() < 1e-6);
        assert_eq!(s.lr_at(10), 0.0);
    }
}
