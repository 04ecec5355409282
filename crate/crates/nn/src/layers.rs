//! Dense building blocks operating on packed `[rows, features]` matrices.

use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::param::{Param, ParamMut};

/// Normal(0, std) initialisation, as used by BERT for every weight matrix.
pub fn normal_init<R: Rng + ?Sized>(rows: usize, cols: usize, std: f32, rng: &mut R) -> Array2<f32> {
    let dist = Normal::new(0.0f32, std).expect("std is finite and positive");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

#[derive(Debug, Clone)]
pub struct Linear {
    /// `[out, in]`, the layout used by PyTorch checkpoints.
    pub weight: Param<ndarray::Ix2>,
    pub bias: Param<ndarray::Ix1>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, std: f32, rng: &mut R) -> Self {
        Self {
            weight: Param::new(normal_init(output, input, std, rng), true),
            bias: Param::new(Array1::zeros(output), false),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        let mut y = x.dot(&self.weight.value.t());
        y += &self.bias.value;
        y
    }

    /// Accumulates parameter gradients (unless frozen) and returns `dL/dx`.
    pub fn backward(&mut self, x: &Array2<f32>, dy: &Array2<f32>) -> Array2<f32> {
        self.accumulate(x, dy);
        dy.dot(&self.weight.value)
    }

    pub fn accumulate(&mut self, x: &Array2<f32>, dy: &Array2<f32>) {
        if !self.weight.frozen {
            self.weight.grad += &dy.t().dot(x);
        }
        if !self.bias.frozen {
            self.bias.grad += &dy.sum_axis(Axis(0));
        }
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.weight.frozen = frozen;
        self.bias.frozen = frozen;
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_>)) {
        self.weight.visit(&format!("{prefix}.weight"), f);
        self.bias.visit(&format!("{prefix}.bias"), f);
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: Param<ndarray::Ix1>,
    pub bias: Param<ndarray::Ix1>,
    pub eps: f32,
}

pub struct LayerNormCache {
    normalized: Array2<f32>,
    inv_std: Array1<f32>,
}

impl LayerNorm {
    pub fn new(size: usize, eps: f32) -> Self {
        Self {
            weight: Param::new(Array1::ones(size), false),
            bias: Param::new(Array1::zeros(size), false),
            eps,
        }
    }

    pub fn forward(&self, x: &Array2<f32>) -> (Array2<f32>, LayerNormCache) {
        let width = x.ncols() as f32;
        let mut normalized = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, inv) in normalized.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / width;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f32>() / width;
            let s = 1.0 / (var + self.eps).sqrt();
            row *= s;
            *inv = s;
        }
        let mut y = &normalized * &self.weight.value;
        y += &self.bias.value;
        (
            y,
            LayerNormCache {
                normalized,
                inv_std,
            },
        )
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dy: &Array2<f32>) -> Array2<f32> {
        if !self.weight.frozen {
            self.weight.grad += &(dy * &cache.normalized).sum_axis(Axis(0));
        }
        if !self.bias.frozen {
            self.bias.grad += &dy.sum_axis(Axis(0));
        }
        let width = dy.ncols() as f32;
        let mut dx = dy * &self.weight.value;
        Zip::from(dx.rows_mut())
            .and(cache.normalized.rows())
            .and(&cache.inv_std)
            .for_each(|mut g, xhat, &inv| {
                let mean_g = g.sum() / width;
                let mean_gx = g.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum::<f32>() / width;
                Zip::from(&mut g).and(&xhat).for_each(|gi, &xi| {
                    *gi = inv * (*gi - mean_g - xi * mean_gx);
                });
            });
        dx
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.weight.frozen = frozen;
        self.bias.frozen = frozen;
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_>)) {
        self.weight.visit(&format!("{prefix}.weight"), f);
        self.bias.visit(&format!("{prefix}.bias"), f);
    }
}

const INV_SQRT_2: f32 = std::f32::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f32 = 0.398_942_28;

/// Exact (erf-based) GELU, the `"gelu"` activation of BERT checkpoints.
pub fn gelu(x: &Array2<f32>) -> Array2<f32> {
    x.mapv(|v| 0.5 * v * (1.0 + libm::erff(v * INV_SQRT_2)))
}

pub fn gelu_backward(x: &Array2<f32>, dy: &Array2<f32>) -> Array2<f32> {
    let mut dx = dy.to_owned();
    Zip::from(&mut dx).and(x).for_each(|g, &v| {
        let cdf = 0.5 * (1.0 + libm::erff(v * INV_SQRT_2));
        let pdf = INV_SQRT_2PI * (-0.5 * v * v).exp();
        *g *= cdf + v * pdf;
    });
    dx
}

/// Inverted dropout. Returns the scaled keep-mask so the backward pass can reuse it.
pub fn dropout<R: Rng + ?Sized>(x: &mut Array2<f32>, p: f32, rng: &mut R) -> Option<Array2<f32>> {
    if p <= 0.0 {
        return None;
    }
    let scale = 1.0 / (1.0 - p);
    let mask = Array2::from_shape_simple_fn(x.raw_dim(), || {
        if rng.random::<f32>() < p {
            0.0
        } else {
            scale
        }
    });
    *x *= &mask;
    Some(mask)
}

pub fn apply_mask(dy: &mut Array2<f32>, mask: &Option<Array2<f32>>) {
    if let Some(m) = mask {
        *dy *= m;
    }
}
