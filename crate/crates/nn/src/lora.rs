//! Low-rank adapters on dense projections.
//!
//! An adapted projection computes `x Wᵀ + b + (α/r) · (x Aᵀ) Bᵀ` with `A: [r, in]`
//! and `B: [out, r]`. `B` starts at zero so an untrained adapter is the identity
//! on the base model.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::layers::Linear;
use crate::param::{Param, ParamMut};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f32,
    /// Which attention projections receive adapters: any of `query`, `key`, `value`, `output`.
    #[serde(default = "default_targets")]
    pub targets: Vec<String>,
}

fn default_targets() -> Vec<String> {
    vec!["query".into(), "value".into()]
}

impl LoraSpec {
    pub fn new(rank: usize, alpha: f32) -> Self {
        Self {
            rank,
            alpha,
            targets: default_targets(),
        }
    }

    pub fn scaling(&self) -> f32 {
        self.alpha / self.rank as f32
    }

    pub fn targets(&self, projection: &str) -> bool {
        self.targets.iter().any(|t| t == projection)
    }
}

#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub a: Param<ndarray::Ix2>,
    pub b: Param<ndarray::Ix2>,
    pub scaling: f32,
}

impl LoraAdapter {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, spec: &LoraSpec, rng: &mut R) -> Self {
        // Kaiming-uniform bound for a fan-in of `input`.
        let bound = (1.0 / input as f32).sqrt();
        let dist = Uniform::new(-bound, bound).expect("bound is positive");
        let a = Array2::from_shape_simple_fn((spec.rank, input), || dist.sample(rng));
        Self {
            a: Param::new(a, true),
            b: Param::new(Array2::zeros((output, spec.rank)), true),
            scaling: spec.scaling(),
        }
    }

    pub fn delta_weight(&self) -> Array2<f32> {
        self.b.value.dot(&self.a.value) * self.scaling
    }
}

/// A dense projection that may carry a low-rank adapter.
#[derive(Debug, Clone)]
pub struct Projection {
    pub base: Linear,
    pub adapter: Option<LoraAdapter>,
}

pub struct ProjectionCache {
    down: Option<Array2<f32>>,
}

impl Projection {
    pub fn new(base: Linear) -> Self {
        Self {
            base,
            adapter: None,
        }
    }

    pub fn forward(&self, x: &Array2<f32>) -> (Array2<f32>, ProjectionCache) {
        let mut y = self.base.forward(x);
        let down = self.adapter.as_ref().map(|ad| {
            let down = x.dot(&ad.a.value.t());
            y.scaled_add(ad.scaling, &down.dot(&ad.b.value.t()));
            down
        });
        (y, ProjectionCache { down })
    }

    pub fn backward(&mut self, x: &Array2<f32>, cache: &ProjectionCache, dy: &Array2<f32>) -> Array2<f32> {
        let mut dx = self.base.backward(x, dy);
        if let (Some(ad), Some(down)) = (self.adapter.as_mut(), cache.down.as_ref()) {
            if !ad.b.frozen {
                ad.b.grad.scaled_add(ad.scaling, &dy.t().dot(down));
            }
            let d_down = dy.dot(&ad.b.value) * ad.scaling;
            if !ad.a.frozen {
                ad.a.grad += &d_down.t().dot(x);
            }
            dx += &d_down.dot(&ad.a.value);
        }
        dx
    }

    pub fn attach<R: Rng + ?Sized>(&mut self, spec: &LoraSpec, rng: &mut R) {
        self.adapter = Some(LoraAdapter::new(
            self.base.in_features(),
            self.base.out_features(),
            spec,
            rng,
        ));
    }

    /// Folds the adapter into the base weight and drops it.
    pub fn merge(&mut self) {
        if let Some(ad) = self.adapter.take() {
            self.base.weight.value += &ad.delta_weight();
        }
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_>)) {
        self.base.visit(prefix, f);
        if let Some(ad) = self.adapter.as_mut() {
            ad.a.visit(&format!("{prefix}.lora_A.weight"), f);
            ad.b.visit(&format!("{prefix}.lora_B.weight"), f);
        }
    }
}

/// Analytic count of adapter parameters for one projection.
pub fn adapter_size(input: usize, output: usize, rank: usize) -> usize {
    rank * (input + output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::normal_init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn merged_projection_matches_adapted_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut proj = Projection::new(Linear::new(8, 6, 0.1, &mut rng));
        proj.attach(&LoraSpec::new(4, 8.0), &mut rng);
        // Give B non-zero values so the adapter actually contributes.
        proj.adapter.as_mut().unwrap().b.value = normal_init(6, 4, 0.3, &mut rng);
        let x = normal_init(5, 8, 1.0, &mut rng);
        let (adapted, _) = proj.forward(&x);
        proj.merge();
        let (merged, _) = proj.forward(&x);
        for (a, b) in adapted.iter().zip(merged.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn adapter_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut proj = Projection::new(Linear::new(4, 3, 0.3, &mut rng));
        proj.attach(&LoraSpec::new(2, 4.0), &mut rng);
        proj.adapter.as_mut().unwrap().b.value = normal_init(3, 2, 0.5, &mut rng);
        let x = normal_init(3, 4, 1.0, &mut rng);
        let probe = normal_init(3, 3, 1.0, &mut rng);
        let (_, cache) = proj.forward(&x);
        proj.backward(&x, &cache, &probe);
        let grad_a = proj.adapter.as_ref().unwrap().a.grad.clone();
        let objective = |p: &Projection| -> f64 {
            let (y, _) = p.forward(&x);
            y.iter().zip(probe.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let h = 1e-2;
        for i in 0..2 {
            for j in 0..4 {
                let mut plus = proj.clone();
                plus.adapter.as_mut().unwrap().a.value[[i, j]] += h;
                let mut minus = proj.clone();
                minus.adapter.as_mut().unwrap().a.value[[i, j]] -= h;
                let num = (objective(&plus) - objective(&minus)) / (2.0 * h as f64);
                assert!((num - grad_a[[i, j]] as f64).abs() < 1e-2);
            }
        }
    }
}
