use ndarray::{Array, Dimension};
use serde::Serialize;

/// A trainable tensor together with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<D: Dimension> {
    pub value: Array<f32, D>,
    pub grad: Array<f32, D>,
    pub frozen: bool,
    /// Whether decoupled weight decay applies (false for biases and norms).
    pub decay: bool,
}

impl<D: Dimension> Param<D> {
    pub fn new(value: Array<f32, D>, decay: bool) -> Self {
        let grad = Array::zeros(value.raw_dim());
        Self {
            value,
            grad,
            frozen: false,
            decay,
        }
    }

    pub fn visit(&mut self, name: &str, f: &mut dyn FnMut(ParamMut<'_>)) {
        let shape = self.value.shape().to_vec();
        f(ParamMut {
            name,
            shape: &shape,
            value: self.value.as_slice_mut().expect("parameters are contiguous"),
            grad: self.grad.as_slice_mut().expect("gradients are contiguous"),
            frozen: self.frozen,
            decay: self.decay,
        });
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Flat mutable view handed to optimisers and serializers.
pub struct ParamMut<'a> {
    pub name: &'a str,
    pub shape: &'a [usize],
    pub value: &'a mut [f32],
    pub grad: &'a mut [f32],
    pub frozen: bool,
    pub decay: bool,
}

pub trait Parameters {
    /// Calls `f` once per parameter tensor, with fully qualified names.
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamMut<'_>));

    fn zero_grad(&mut self) {
        self.visit_params(&mut |p| p.grad.fill(0.0));
    }

    fn census(&mut self) -> ParamCensus {
        let mut census = ParamCensus::default();
        self.visit_params(&mut |p| {
            census.total += p.value.len();
            if !p.frozen {
                census.trainable += p.value.len();
            }
        });
        census
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ParamCensus {
    pub total: usize,
    pub trainable: usize,
}

impl ParamCensus {
    pub fn trainable_ratio(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.trainable as f64 / self.total as f64
        }
    }
}
