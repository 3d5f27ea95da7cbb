//! Adam and the cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::tensor::Tensor;

/// `lr0 · (1 + cos(π·epoch/epochs)) / 2`.
pub fn cosine_lr(lr0: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs == 0 {
        return lr0;
    }
    lr0 * (1.0 + (PI * epoch as f64 / epochs as f64).cos()) / 2.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(shapes: &[Tensor], beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = shapes.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected update of every parameter.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *pi -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(4e-5, 0, 80), 4e-5);
        assert!((cosine_lr(4e-5, 40, 80) - 2e-5).abs() < 1e-18);
        assert!(cosine_lr(4e-5, 80, 80).abs() < 1e-20);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::from_vec(1, 2, vec![0.5, -1.0])];
        let mut adam = Adam::new(&p, 0.9, 0.999, 1e-8);
        let before = p.clone();
        for _ in 0..3 {
            adam.step(&mut p, &[Tensor::zeros(1, 2)], 0.1);
        }
        assert_eq!(p, before);
    }
}
