use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::{Scalar, Tensor};

/// Applies one descent step to `params` given per-slot gradients.
///
/// Slots whose gradient is `None` are left untouched. A non-finite gradient
/// aborts the step before any parameter is modified.
pub trait Optimizer<S: Scalar> {
    fn step(&mut self, params: &mut ParamSet<S>, grads: &[Option<Tensor<S>>]) -> Result<()>;
}

fn check_grads<S: Scalar>(params: &ParamSet<S>, grads: &[Option<Tensor<S>>]) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    for (name, g) in params.names().zip(grads) {
        if let Some(g) = g {
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for parameter {name}")));
            }
        }
    }
    Ok(())
}

/// Plain gradient descent: `p <- p - lr * g`.
#[derive(Clone, Copy, Debug)]
pub struct Sgd {
    pub lr: f64,
}

impl<S: Scalar> Optimizer<S> for Sgd {
    fn step(&mut self, params: &mut ParamSet<S>, grads: &[Option<Tensor<S>>]) -> Result<()> {
        check_grads(params, grads)?;
        let lr = S::lit(self.lr);
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                params.by_index_mut(i).add_scaled(g, -lr);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub config: AdamConfig,
    pub step_count: u64,
    pub first_moment: ParamSet<S>,
    pub second_moment: ParamSet<S>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig, params: &ParamSet<S>) -> Self {
        Self {
            config,
            step_count: 0,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
        }
    }
}

impl<S: Scalar> Optimizer<S> for Adam<S> {
    fn step(&mut self, params: &mut ParamSet<S>, grads: &[Option<Tensor<S>>]) -> Result<()> {
        check_grads(params, grads)?;
        self.step_count += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (S::lit(beta1), S::lit(beta2));
        let (one, eps_s) = (S::one(), S::lit(eps));
        let step = S::lit(lr / c1);
        let c2s = S::lit(c2);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = self.first_moment.by_index_mut(i).data_mut();
            for (mi, &gi) in m.iter_mut().zip(g.data()) {
                *mi = b1 * *mi + (one - b1) * gi;
            }
            let v = self.second_moment.by_index_mut(i).data_mut();
            for (vi, &gi) in v.iter_mut().zip(g.data()) {
                *vi = b2 * *vi + (one - b2) * gi * gi;
            }
            let m = self.first_moment.by_index(i).data();
            let v = self.second_moment.by_index(i).data();
            let p = params.by_index_mut(i).data_mut();
            for ((pi, &mi), &vi) in p.iter_mut().zip(m).zip(v) {
                *pi -= step * mi / ((vi / c2s).sqrt() + eps_s);
            }
        }
        Ok(())
    }
}
