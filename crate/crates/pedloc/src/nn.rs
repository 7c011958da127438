//! Crate-internal dense-layer plumbing shared by the localization and
//! relation networks: row-major linear layers, activations, and an
//! adaptive-moment optimizer. All math is f64; gradient shapes mirror
//! parameter shapes exactly.

use crate::exec::uniform_open01;
use rand::RngCore;
use serde::{Deserialize, Serialize};

/// Fully connected layer; `w` is row-major with `rows` output units over
/// `cols` inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    /// Uniform fan-in init on [-1/sqrt(cols), 1/sqrt(cols)], zero biases.
    pub fn init<R: RngCore + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (cols as f64).sqrt();
        let w = (0..rows * cols)
            .map(|_| (2.0 * uniform_open01(rng) - 1.0) * bound)
            .collect();
        Dense {
            rows,
            cols,
            w,
            b: vec![0.0; rows],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Dense {
            rows,
            cols,
            w: vec![0.0; rows * cols],
            b: vec![0.0; rows],
        }
    }

    pub fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        debug_assert_eq!(x.len(), self.cols);
        out.clear();
        out.reserve(self.rows);
        for r in 0..self.rows {
            let row = &self.w[r * self.cols..(r + 1) * self.cols];
            let mut acc = self.b[r];
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            out.push(acc);
        }
    }

    /// Accumulates parameter gradients for cotangent `dy` at input `x` and
    /// writes the input cotangent into `dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut DenseGrad, dx: &mut [f64]) {
        debug_assert_eq!(dy.len(), self.rows);
        debug_assert_eq!(dx.len(), self.cols);
        for v in dx.iter_mut() {
            *v = 0.0;
        }
        for r in 0..self.rows {
            let d = dy[r];
            grad.b[r] += d;
            let row = &self.w[r * self.cols..(r + 1) * self.cols];
            let grow = &mut grad.w[r * self.cols..(r + 1) * self.cols];
            for c in 0..self.cols {
                grow[c] += d * x[c];
                dx[c] += d * row[c];
            }
        }
    }
}

/// Gradient accumulator shaped like one [`Dense`] layer.
///
/// Exposed publicly because gradient-returning entry points hand these back
/// to callers (finite-difference harnesses, custom optimizers).
#[derive(Debug, Clone)]
pub struct DenseGrad {
    /// Gradient of the weight matrix, row-major, same layout as the layer.
    pub w: Vec<f64>,
    /// Gradient of the bias vector.
    pub b: Vec<f64>,
}

impl DenseGrad {
    pub(crate) fn zeros_like(layer: &Dense) -> Self {
        DenseGrad {
            w: vec![0.0; layer.w.len()],
            b: vec![0.0; layer.b.len()],
        }
    }

    pub fn add_assign(&mut self, other: &DenseGrad) {
        for (a, b) in self.w.iter_mut().zip(&other.w) {
            *a += b;
        }
        for (a, b) in self.b.iter_mut().zip(&other.b) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.w.iter_mut() {
            *v *= s;
        }
        for v in self.b.iter_mut() {
            *v *= s;
        }
    }
}

pub(crate) fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Numerically stable softplus; the positivity map for scale heads.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Derivative of softplus.
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Adaptive-moment optimizer over indexed parameter blocks. Callers must
/// visit blocks in a fixed order each step; state is keyed by block index.
#[derive(Debug, Clone)]
pub(crate) struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, num_blocks: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![Vec::new(); num_blocks],
            v: vec![Vec::new(); num_blocks],
        }
    }

    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, block: usize, param: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(param.len(), grad.len());
        if self.m[block].is_empty() {
            self.m[block] = vec![0.0; param.len()];
            self.v[block] = vec![0.0; param.len()];
        }
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let m = &mut self.m[block];
        let v = &mut self.v[block];
        for i in 0..param.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            param[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Seeded Fisher-Yates shuffle; the in-crate standard for epoch ordering.
pub(crate) fn shuffle_indices<R: RngCore + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        idx.swap(i, j);
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dense_forward_is_affine() {
        let layer = Dense {
            rows: 2,
            cols: 3,
            w: vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0],
            b: vec![0.1, -0.2],
        };
        let mut out = Vec::new();
        layer.forward(&[1.0, 1.0, 2.0], &mut out);
        assert_eq!(out, vec![1.0 + 2.0 + 6.0 + 0.1, -1.0 + 0.5 - 0.2]);
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = Dense::init(3, 4, &mut rng);
        let x: Vec<f64> = (0..4).map(|i| 0.3 * i as f64 - 0.5).collect();
        let dy = [0.7, -1.1, 0.4];
        let mut grad = DenseGrad::zeros_like(&layer);
        let mut dx = vec![0.0; 4];
        layer.backward(&x, &dy, &mut grad, &mut dx);
        // Loss L = dy . forward(x); check dL/dw and dL/dx numerically.
        let loss = |l: &Dense, x: &[f64]| {
            let mut out = Vec::new();
            l.forward(x, &mut out);
            out.iter().zip(dy.iter()).map(|(o, d)| o * d).sum::<f64>()
        };
        let h = 1e-6;
        for i in 0..layer.w.len() {
            let mut hi = layer.clone();
            let mut lo = layer.clone();
            hi.w[i] += h;
            lo.w[i] -= h;
            let num = (loss(&hi, &x) - loss(&lo, &x)) / (2.0 * h);
            assert!((grad.w[i] - num).abs() < 1e-8);
        }
        for i in 0..x.len() {
            let mut xh = x.clone();
            let mut xl = x.clone();
            xh[i] += h;
            xl[i] -= h;
            let num = (loss(&layer, &xh) - loss(&layer, &xl)) / (2.0 * h);
            assert!((dx[i] - num).abs() < 1e-8);
        }
    }

    #[test]
    fn softplus_is_stable_and_positive() {
        assert_eq!(softplus(100.0), 100.0);
        assert!(softplus(-100.0) > 0.0);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        // Derivative check against sigmoid.
        for &x in &[-5.0, -0.3, 0.0, 2.0, 20.0] {
            let h = 1e-6;
            let num = (softplus(x + h) - softplus(x - h)) / (2.0 * h);
            assert!((num - sigmoid(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut adam = Adam::new(0.05, 1);
        let mut theta = vec![4.0, -3.0];
        for _ in 0..500 {
            adam.begin_step();
            let grad: Vec<f64> = theta.iter().map(|t| 2.0 * t).collect();
            adam.update(0, &mut theta, &grad);
        }
        assert!(theta.iter().all(|t| t.abs() < 1e-2));
    }

    #[test]
    fn shuffle_is_seeded_permutation() {
        let a = shuffle_indices(100, &mut ChaCha8Rng::seed_from_u64(1));
        let b = shuffle_indices(100, &mut ChaCha8Rng::seed_from_u64(1));
        let c = shuffle_indices(100, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(a, b);
        assert_ne!(a, c);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
    }
}
