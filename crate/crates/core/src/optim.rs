//! Stochastic gradient descent with heavy-ball momentum.

use crate::error::{Error, Result};
use crate::nn::TensorStore;
use crate::tensor::Tensor;

/// Zero-initialized velocity buffers named and shaped like `params`.
pub fn zero_velocity(params: &TensorStore) -> TensorStore {
    let mut v = TensorStore::new();
    for (name, t) in params.iter() {
        v.insert(name, Tensor::zeros(t.shape()));
    }
    v
}

/// `v <- momentum v + g; p <- p - lr v` for every parameter.
///
/// Nothing is updated when any gradient holds a NaN or infinity; the error names
/// the first offending parameter.
pub fn sgd_step(params: &mut TensorStore, velocity: &mut TensorStore, grads: &[Tensor], lr: f64, momentum: f64) -> Result<()> {
    if grads.len() != params.len() || velocity.len() != params.len() {
        return Err(Error::dim(
            "sgd_step",
            None,
            format!("{} parameters, {} gradients, {} velocities", params.len(), grads.len(), velocity.len()),
        ));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::dim("sgd_step", None, format!("gradient of {name} has shape {:?}", g.shape())));
        }
        if !g.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for parameter {name}")));
        }
    }
    for ((p, v), g) in params.tensors_mut().iter_mut().zip(velocity.tensors_mut()).zip(grads) {
        for ((p, v), g) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *v = momentum * *v + g;
            *p -= lr * *v;
        }
    }
    Ok(())
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before rescaling. A `max_norm` of 0 leaves them unchanged.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let factor = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }
    norm
}
