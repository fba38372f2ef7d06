//! SGD with momentum and L2 weight decay: `v = μv + (g + wd·p); p -= lr·v`.

use std::ops::{Add, Mul, Sub};

pub trait Scalar: Copy + Add<Output = Self> + Mul<Output = Self> + Sub<Output = Self> + Default {
    fn from_f64(v: f64) -> Self;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
}

#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<T>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(len: usize, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: vec![T::default(); len],
        }
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.velocity.len());
        let (lr, mu, wd) = (T::from_f64(self.lr), T::from_f64(self.momentum), T::from_f64(self.weight_decay));
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let d = *g + wd * *p;
            *v = mu * *v + d;
            *p = *p - lr * *v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_hand_computed_steps() {
        let mut opt = Sgd::<f64>::new(1, 0.1, 0.9, 0.01);
        let mut p = [1.0];
        opt.step(&mut p, &[0.5]);
        // v = 0.5 + 0.01 = 0.51; p = 1 - 0.051
        assert!((p[0] - 0.949).abs() < 1e-12);
        opt.step(&mut p, &[0.5]);
        let v2 = 0.9 * 0.51 + 0.5 + 0.01 * 0.949;
        assert!((p[0] - (0.949 - 0.1 * v2)).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut opt = Sgd::<f32>::new(3, 1.0, 0.9, 0.0);
        let mut p = [1.0f32, -2.0, 3.0];
        opt.step(&mut p, &[0.0; 3]);
        assert_eq!(p, [1.0, -2.0, 3.0]);
    }
}
