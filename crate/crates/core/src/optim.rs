//! Adam with global-norm gradient clipping.

use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// One update. `grads[i]` belongs to parameter `i`; `None` leaves the
    /// parameter untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Vec<T>>]) {
        if self.m.len() < grads.len() {
            self.m.resize(grads.len(), Vec::new());
            self.v.resize(grads.len(), Vec::new());
        }
        self.t += 1;
        let b1 = T::lit(self.beta1);
        let b2 = T::lit(self.beta2);
        let one = T::one();
        let c1 = T::lit(1.0 - self.beta1.powi(self.t));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t));
        let lr = T::lit(self.lr);
        let eps = T::lit(self.eps);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let w = params.data_at_mut(i);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            if m.is_empty() {
                m.resize(g.len(), T::zero());
                v.resize(g.len(), T::zero());
            }
            for k in 0..g.len() {
                m[k] = b1 * m[k] + (one - b1) * g[k];
                v[k] = b2 * v[k] + (one - b2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                w[k] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Option<Vec<T>>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|x| {
            let x = x.to_f64_lossy();
            x * x
        })
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = ParamStore::<f64>::new();
        p.insert("base.w", Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap());
        p.insert("base.frozen", Tensor::from_vec(&[1], vec![3.0]).unwrap());
        let mut adam = Adam::new(0.1);
        adam.step(&mut p, &[Some(vec![0.5, -2.0]), None]);
        let w = p.by_name("base.w").unwrap().data();
        // bias-corrected first step is lr·sign(g) up to eps
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
        assert_eq!(p.by_name("base.frozen").unwrap().data(), &[3.0]);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Some(vec![3.0f64, 0.0]), None, Some(vec![4.0])];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0].as_ref().unwrap()[0] - 0.6).abs() < 1e-12);
        assert!((g[2].as_ref().unwrap()[0] - 0.8).abs() < 1e-12);
    }
}
