//! RMSProp: `v ← ρ·v + (1−ρ)·g²`, `θ ← θ − lr·g / (√v + ε)`.

use crate::error::{Error, Result};
use crate::model::{Grads, Param};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct RmsProp<T> {
    pub learning_rate: T,
    pub decay: T,
    pub eps: T,
    /// Running mean of squared gradients, one buffer per parameter.
    pub square_avg: Vec<Vec<T>>,
}

impl<T: Real> RmsProp<T> {
    pub fn new(params: &[Param<T>], learning_rate: f64, decay: f64, eps: f64) -> Self {
        Self {
            learning_rate: T::lit(learning_rate),
            decay: T::lit(decay),
            eps: T::lit(eps),
            square_avg: params.iter().map(|p| vec![T::zero(); p.data.len()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Param<T>], grads: &Grads<T>) {
        let keep = T::one() - self.decay;
        for ((p, g), v) in params.iter_mut().zip(&grads.0).zip(&mut self.square_avg) {
            for ((w, &g), v) in p.data.iter_mut().zip(g).zip(v.iter_mut()) {
                *v = self.decay * *v + keep * g * g;
                *w = *w - self.learning_rate * g / (v.sqrt() + self.eps);
            }
        }
    }

    /// Replaces the accumulators; buffer lengths must match the parameters.
    pub fn load_state(&mut self, state: Vec<Vec<T>>) -> Result<()> {
        if state.len() != self.square_avg.len()
            || state.iter().zip(&self.square_avg).any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::Config("optimizer state does not match the network".into()));
        }
        self.square_avg = state;
        Ok(())
    }
}
