use crate::par::{accumulate_by_chunks, map_indices, sum_by_chunks, ExecPolicy, DEFAULT_CHUNK};
use crate::problem::{BilevelProblem, UpperSecondOrder};
use crate::vecmat::Vector;

use super::{Dataset, TestbedError};

/// Numerically stable logistic function.
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Data hyper-cleaning: learn one weight `σ(x_i)` per training sample so that
/// a softmax classifier trained on the reweighted data does well on a clean
/// validation set.
///
/// ```text
/// f(x, w) = (1/N) Σ_i σ(x_i)·ℓ(w; a_i, b_i) + (c/2)‖w‖²
/// F(x, w) = (1/N_val) Σ_j ℓ(w; a_j, b_j)
/// ```
///
/// `ℓ` is softmax cross-entropy with an affine model. `w` is stored as a
/// `C × (d + 1)` row-major matrix whose last column is the bias.
#[derive(Clone, Debug)]
pub struct HyperCleaningProblem {
    train: Dataset,
    val: Dataset,
    reg: f64,
    classes: usize,
    policy: ExecPolicy,
}

/// Per-sample softmax quantities.
struct SampleEval {
    probs: Vec<f64>,
    loss: f64,
}

impl HyperCleaningProblem {
    pub const DEFAULT_REG: f64 = 1e-3;

    pub fn new(train: Dataset, val: Dataset, reg: f64) -> Result<Self, TestbedError> {
        if train.dim() != val.dim() {
            return Err(TestbedError::DimensionMismatch { what: "validation features", expected: train.dim(), found: val.dim() });
        }
        if !(reg > 0.0 && reg.is_finite()) {
            return Err(TestbedError::InvalidParameter(format!("ridge coefficient must be positive, got {reg}")));
        }
        let classes = train.num_classes().max(val.num_classes());
        Ok(HyperCleaningProblem { train, val, reg, classes, policy: ExecPolicy::default() })
    }

    pub fn with_policy(mut self, policy: ExecPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn policy(&self) -> ExecPolicy {
        self.policy
    }

    pub fn train(&self) -> &Dataset {
        &self.train
    }

    pub fn val(&self) -> &Dataset {
        &self.val
    }

    pub fn reg(&self) -> f64 {
        self.reg
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    fn stride(&self) -> usize {
        self.train.dim() + 1
    }

    /// Upper bound on the Lipschitz constant of `∇_w f` (all weights one).
    pub fn lipschitz_bound(&self) -> f64 {
        let max_sq = (0..self.train.len())
            .map(|i| self.train.sample(i).iter().map(|v| v * v).sum::<f64>() + 1.0)
            .fold(0.0, f64::max);
        0.5 * max_sq + self.reg
    }

    fn logits(&self, w: &[f64], a: &[f64]) -> Vec<f64> {
        let s = self.stride();
        (0..self.classes)
            .map(|c| {
                let row = &w[c * s..(c + 1) * s];
                row[..s - 1].iter().zip(a).map(|(r, v)| r * v).sum::<f64>() + row[s - 1]
            })
            .collect()
    }

    fn eval(&self, w: &[f64], a: &[f64], label: usize) -> SampleEval {
        let z = self.logits(w, a);
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
        let loss = zmax + total.ln() - z[label];
        SampleEval { probs, loss }
    }

    /// `acc += scale · g ⊗ [a, 1]`.
    fn add_outer(&self, acc: &mut [f64], g: &[f64], a: &[f64], scale: f64) {
        let s = self.stride();
        for (c, gc) in g.iter().enumerate() {
            let coef = scale * gc;
            if coef == 0.0 {
                continue;
            }
            let row = &mut acc[c * s..(c + 1) * s];
            for (r, v) in row[..s - 1].iter_mut().zip(a) {
                *r += coef * v;
            }
            row[s - 1] += coef;
        }
    }

    /// `(diag p − ppᵀ)(U·[a, 1])`.
    fn softmax_hessian_dir(&self, probs: &[f64], u: &[f64], a: &[f64]) -> Vec<f64> {
        let zu = self.logits(u, a);
        let pz: f64 = probs.iter().zip(&zu).map(|(p, z)| p * z).sum();
        probs.iter().zip(&zu).map(|(p, z)| p * (z - pz)).collect()
    }

    fn mean_loss_grad(&self, data: &Dataset, w: &[f64], weights: Option<&[f64]>) -> Vector {
        let n = data.len();
        let acc = accumulate_by_chunks(self.policy, n, DEFAULT_CHUNK, w.len(), |r, acc| {
            for i in r {
                let wi = weights.map_or(1.0, |s| s[i]);
                if wi == 0.0 {
                    continue;
                }
                let a = data.sample(i);
                let mut g = self.eval(w, a, data.labels()[i]).probs;
                g[data.labels()[i]] -= 1.0;
                self.add_outer(acc, &g, a, wi);
            }
        });
        let inv = 1.0 / n as f64;
        Vector::from(acc.into_iter().map(|v| v * inv).collect::<Vec<_>>())
    }

    fn mean_loss_hvp(&self, data: &Dataset, w: &[f64], u: &[f64], weights: Option<&[f64]>) -> Vector {
        let n = data.len();
        let acc = accumulate_by_chunks(self.policy, n, DEFAULT_CHUNK, w.len(), |r, acc| {
            for i in r {
                let wi = weights.map_or(1.0, |s| s[i]);
                if wi == 0.0 {
                    continue;
                }
                let a = data.sample(i);
                let probs = self.eval(w, a, data.labels()[i]).probs;
                let hz = self.softmax_hessian_dir(&probs, u, a);
                self.add_outer(acc, &hz, a, wi);
            }
        });
        let inv = 1.0 / n as f64;
        Vector::from(acc.into_iter().map(|v| v * inv).collect::<Vec<_>>())
    }

    fn sample_weights(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|&t| sigmoid(t)).collect()
    }

    /// `∇_x f`, the direct effect of the sample weights on the lower level.
    pub fn grad_x_ll(&self, x: &[f64], w: &[f64]) -> Vector {
        let inv = 1.0 / self.train.len() as f64;
        let out = map_indices(self.policy, self.train.len(), |i| {
            let s = sigmoid(x[i]);
            let loss = self.eval(w, self.train.sample(i), self.train.labels()[i]).loss;
            inv * s * (1.0 - s) * loss
        });
        Vector::from(out)
    }

    fn accuracy(&self, data: &Dataset, w: &[f64]) -> f64 {
        let hits = sum_by_chunks(self.policy, data.len(), DEFAULT_CHUNK, |r| {
            r.filter(|&i| {
                let z = self.logits(w, data.sample(i));
                let best = z
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (c, &v)| if v > b.1 { (c, v) } else { b });
                best.0 == data.labels()[i]
            })
            .count() as f64
        });
        hits / data.len() as f64
    }

    /// Fraction of validation samples whose arg-max logit matches the label.
    pub fn val_accuracy(&self, w: &[f64]) -> f64 {
        self.accuracy(&self.val, w)
    }

    pub fn train_accuracy(&self, w: &[f64]) -> f64 {
        self.accuracy(&self.train, w)
    }
}

impl BilevelProblem for HyperCleaningProblem {
    fn ul_dim(&self) -> usize {
        self.train.len()
    }

    fn ll_dim(&self) -> usize {
        self.classes * self.stride()
    }

    fn ul_value(&self, _x: &[f64], w: &[f64]) -> f64 {
        let data = &self.val;
        let total = sum_by_chunks(self.policy, data.len(), DEFAULT_CHUNK, |r| {
            r.map(|i| self.eval(w, data.sample(i), data.labels()[i]).loss).sum()
        });
        total / data.len() as f64
    }

    fn ll_value(&self, x: &[f64], w: &[f64]) -> f64 {
        let data = &self.train;
        let total = sum_by_chunks(self.policy, data.len(), DEFAULT_CHUNK, |r| {
            r.map(|i| sigmoid(x[i]) * self.eval(w, data.sample(i), data.labels()[i]).loss).sum()
        });
        total / data.len() as f64 + 0.5 * self.reg * w.iter().map(|v| v * v).sum::<f64>()
    }

    fn grad_x_ul(&self, x: &[f64], _w: &[f64]) -> Vector {
        Vector::zeros(x.len())
    }

    fn grad_y_ul(&self, _x: &[f64], w: &[f64]) -> Vector {
        self.mean_loss_grad(&self.val, w, None)
    }

    fn grad_y_ll(&self, x: &[f64], w: &[f64]) -> Vector {
        let weights = self.sample_weights(x);
        let mut g = self.mean_loss_grad(&self.train, w, Some(&weights));
        g.axpy(self.reg, w);
        g
    }

    fn hvp_yy_ll(&self, x: &[f64], w: &[f64], u: &[f64]) -> Vector {
        let weights = self.sample_weights(x);
        let mut h = self.mean_loss_hvp(&self.train, w, u, Some(&weights));
        h.axpy(self.reg, u);
        h
    }

    fn jvp_xy_ll(&self, x: &[f64], w: &[f64], u: &[f64]) -> Vector {
        let inv = 1.0 / self.train.len() as f64;
        let out = map_indices(self.policy, self.train.len(), |i| {
            let s = sigmoid(x[i]);
            let a = self.train.sample(i);
            let label = self.train.labels()[i];
            let mut g = self.eval(w, a, label).probs;
            g[label] -= 1.0;
            let zu = self.logits(u, a);
            inv * s * (1.0 - s) * g.iter().zip(&zu).map(|(p, z)| p * z).sum::<f64>()
        });
        Vector::from(out)
    }

    fn ul_second_order(&self) -> Option<&dyn UpperSecondOrder> {
        Some(self)
    }
}

impl UpperSecondOrder for HyperCleaningProblem {
    fn hvp_yy_ul(&self, _x: &[f64], w: &[f64], u: &[f64]) -> Vector {
        self.mean_loss_hvp(&self.val, w, u, None)
    }

    fn jvp_xy_ul(&self, x: &[f64], _w: &[f64], _u: &[f64]) -> Vector {
        Vector::zeros(x.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::fd_check_gradients;
    use crate::testbeds::synth_blobs;
    use crate::vecmat::gaussian_vector;

    fn small() -> HyperCleaningProblem {
        let train = synth_blobs(3, 4, 6, 2.0, 3).unwrap();
        let val = synth_blobs(3, 4, 3, 2.0, 4).unwrap();
        HyperCleaningProblem::new(train, val, 0.1).unwrap()
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let p = small();
        let x = gaussian_vector(p.ul_dim(), 1);
        let w = gaussian_vector(p.ll_dim(), 2).scaled(0.3);
        let r = fd_check_gradients(&p, &x, &w, 1e-5, 1e-6, 7);
        assert!(r.all_passed(), "{r:?}");

        let h = 1e-6;
        let g = p.grad_x_ll(&x, &w);
        for i in [0, 5, 17] {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            let fd = (p.ll_value(&xp, &w) - p.ll_value(&xm, &w)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8, "{fd} vs {}", g[i]);
        }
    }

    #[test]
    fn zero_weights_leave_only_ridge() {
        let p = small();
        let x = vec![-1e4; p.ul_dim()];
        let w = gaussian_vector(p.ll_dim(), 9);
        let g = p.grad_y_ll(&x, &w);
        assert!(g.distance(&w.scaled(p.reg())) < 1e-12);
    }

    #[test]
    fn policies_agree_bitwise() {
        let seq = small().with_policy(ExecPolicy::Sequential);
        let par = small().with_policy(ExecPolicy::Parallel);
        let x = gaussian_vector(seq.ul_dim(), 1);
        let w = gaussian_vector(seq.ll_dim(), 2);
        let u = gaussian_vector(seq.ll_dim(), 3);
        assert_eq!(seq.grad_y_ll(&x, &w), par.grad_y_ll(&x, &w));
        assert_eq!(seq.hvp_yy_ll(&x, &w, &u), par.hvp_yy_ll(&x, &w, &u));
        assert_eq!(seq.jvp_xy_ll(&x, &w, &u), par.jvp_xy_ll(&x, &w, &u));
        assert_eq!(seq.ul_value(&x, &w).to_bits(), par.ul_value(&x, &w).to_bits());
    }
}
