//! Optimisation on the Stiefel manifold `{H : H^T H = I}`.
//!
//! The optimiser is the Cayley-Adam scheme of Li, Fuxin and Todorovic (2020):
//! an Adam-style moment is projected onto the tangent space through a skew
//! matrix `W`, and the step is retracted with the Cayley transform. `W` has
//! rank at most `2s` and is never formed; products with it cost `O(n s^2)`.

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{GckmError, Result};
use crate::numerics::dense::solve_dense;

/// `sum_l ||H_l^T H_l - I||_F`.
pub fn orthogonality_loss(hs: &[Array2<f64>]) -> f64 {
    hs.iter().map(|h| orthogonality_defect(h.view())).sum()
}

pub fn orthogonality_defect(h: ArrayView2<'_, f64>) -> f64 {
    let g = h.t().dot(&h);
    g.indexed_iter()
        .map(|((i, j), v)| {
            let d = v - if i == j { 1.0 } else { 0.0 };
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Thin QR orthonormalisation (modified Gram-Schmidt, applied twice). The
/// triangular factor has a non-negative diagonal, so an already orthonormal
/// input is returned unchanged up to rounding.
pub fn orthonormalize(h: &mut Array2<f64>) -> Result<()> {
    let (n, s) = h.dim();
    if s > n {
        return Err(GckmError::Dimension(format!("cannot orthonormalise {s} columns in dimension {n}")));
    }
    for j in 0..s {
        for _ in 0..2 {
            for i in 0..j {
                let d = h.column(i).dot(&h.column(j));
                let qi = h.column(i).to_owned();
                h.column_mut(j).scaled_add(-d, &qi);
            }
        }
        let norm = h.column(j).dot(&h.column(j)).sqrt();
        if !(norm > 1e-300) {
            return Err(GckmError::RankDeficient { requested: s, available: j });
        }
        h.column_mut(j).mapv_inplace(|v| v / norm);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CayleyAdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Caps the step so that `alpha ||W|| <= 2 q`.
    pub q: f64,
    pub inner_iterations: usize,
    /// Solve the Cayley system exactly instead of by fixed-point iteration.
    pub exact_retraction: bool,
    /// Orthonormalise again once `||H^T H - I||_F` exceeds this.
    pub reorthonormalize_above: f64,
}

impl Default for CayleyAdamConfig {
    fn default() -> Self {
        CayleyAdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            q: 0.5,
            inner_iterations: 2,
            exact_retraction: false,
            reorthonormalize_above: 1e-3,
        }
    }
}

impl CayleyAdamConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(GckmError::config(format!("optimizer.{field}"), format!("must be positive, got {v}")))
            }
        };
        positive("learning_rate", self.learning_rate)?;
        positive("epsilon", self.epsilon)?;
        positive("q", self.q)?;
        positive("reorthonormalize_above", self.reorthonormalize_above)?;
        for (field, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(GckmError::config(format!("optimizer.{field}"), format!("must lie in [0, 1), got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CayleyAdamState {
    pub config: CayleyAdamConfig,
    pub step: u64,
    pub momentum: Vec<Array2<f64>>,
    /// One scalar second moment per matrix.
    pub second_moment: Vec<f64>,
    /// Number of hard re-orthonormalisations performed so far.
    pub reorthonormalizations: usize,
}

/// The skew matrix `W = (P X^T - X P^T) / r` in factored form.
struct Skew<'a> {
    p: Array2<f64>,
    x: ArrayView2<'a, f64>,
    inv_r: f64,
}

impl Skew<'_> {
    fn apply(&self, z: ArrayView2<'_, f64>) -> Array2<f64> {
        let xtz = self.x.t().dot(&z);
        let ptz = self.p.t().dot(&z);
        (self.p.dot(&xtz) - self.x.dot(&ptz)) * self.inv_r
    }

    fn frobenius(&self) -> f64 {
        // ||P X^T - X P^T||_F^2 = 2 tr(P^T P X^T X) - 2 tr((X^T P)^2)
        let ptp = self.p.t().dot(&self.p);
        let xtx = self.x.t().dot(&self.x);
        let xtp = self.x.t().dot(&self.p);
        let t1 = (&ptp * &xtx).sum();
        let t2 = (&xtp * &xtp.t()).sum();
        (2.0 * (t1 - t2)).max(0.0).sqrt() * self.inv_r
    }

    /// `(I + a W)^{-1} B` via the Woodbury identity with `W = U V^T`,
    /// `U = [P, X]`, `V = [X, -P] / r`.
    fn solve_shifted(&self, a: f64, b: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let u = concatenate(Axis(1), &[self.p.view(), self.x]).expect("same row count");
        let v = concatenate(Axis(1), &[self.x.to_owned().view(), (-&self.p).view()]).expect("same row count") * self.inv_r;
        let k = u.ncols();
        let small = Array2::<f64>::eye(k) + v.t().dot(&u) * a;
        let rhs = v.t().dot(&b);
        let y = solve_dense(small.view(), rhs.view())?;
        Ok(&b - &(u.dot(&y) * a))
    }
}

impl CayleyAdamState {
    pub fn new(config: CayleyAdamConfig, shapes: &[(usize, usize)]) -> Self {
        CayleyAdamState {
            config,
            step: 0,
            momentum: shapes.iter().map(|&d| Array2::zeros(d)).collect(),
            second_moment: vec![1.0; shapes.len()],
            reorthonormalizations: 0,
        }
    }

    /// One Cayley-Adam update of every matrix in `hs` along `-grads`.
    pub fn step(&mut self, hs: &mut [Array2<f64>], grads: &[Array2<f64>]) -> Result<()> {
        if hs.len() != self.momentum.len() || grads.len() != hs.len() {
            return Err(GckmError::Dimension(format!(
                "optimizer tracks {} matrices, got {} iterates and {} gradients",
                self.momentum.len(),
                hs.len(),
                grads.len()
            )));
        }
        for (i, (h, g)) in hs.iter().zip(grads).enumerate() {
            if h.dim() != self.momentum[i].dim() || g.dim() != h.dim() {
                return Err(GckmError::Dimension(format!("matrix {i}: shape changed during optimisation")));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(GckmError::NonFinite(format!("gradient of matrix {i}")));
            }
        }
        self.step += 1;
        let k = self.step as i32;
        let cfg = self.config.clone();
        for (i, (h, g)) in hs.iter_mut().zip(grads).enumerate() {
            let m = &mut self.momentum[i];
            *m = &*m * cfg.beta1 + g * (1.0 - cfg.beta1);
            let gnorm2: f64 = g.iter().map(|v| v * v).sum();
            self.second_moment[i] = cfg.beta2 * self.second_moment[i] + (1.0 - cfg.beta2) * gnorm2;
            let v_hat = self.second_moment[i] / (1.0 - cfg.beta2.powi(k));
            let r = (1.0 - cfg.beta1.powi(k)) * (v_hat + cfg.epsilon).sqrt();

            let x = h.to_owned();
            // P = M - X (X^T M) / 2, so that W X is the projected moment.
            let p = &*m - &(x.dot(&x.t().dot(&*m)) * 0.5);
            let w = Skew { p, x: x.view(), inv_r: 1.0 / r };
            *m = w.apply(x.view()) * r;
            let alpha = cfg.learning_rate.min(2.0 * cfg.q / (w.frobenius() + cfg.epsilon));

            let y = if cfg.exact_retraction {
                let rhs = &x - &(w.apply(x.view()) * (0.5 * alpha));
                w.solve_shifted(0.5 * alpha, rhs.view())?
            } else {
                let mut y = &x - &(&*m * alpha);
                for _ in 0..cfg.inner_iterations {
                    let sum = &x + &y;
                    y = &x - &(w.apply(sum.view()) * (0.5 * alpha));
                }
                y
            };
            if y.iter().any(|v| !v.is_finite()) {
                return Err(GckmError::NonFinite(format!("Cayley update of matrix {i}")));
            }
            *h = y;
            if orthogonality_defect(h.view()) > cfg.reorthonormalize_above {
                orthonormalize(h)?;
                self.reorthonormalizations += 1;
            }
        }
        Ok(())
    }
}

/// Project a Euclidean gradient onto the tangent space at `h` (canonical
/// metric): `G - H G^T H`.
pub fn riemannian_gradient(h: ArrayView2<'_, f64>, g: ArrayView2<'_, f64>) -> Array2<f64> {
    &g - &h.dot(&g.t().dot(&h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stiefel(n: usize, s: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut h = Array2::from_shape_fn((n, s), |_| rng.gen_range(-1.0..1.0));
        orthonormalize(&mut h).unwrap();
        h
    }

    fn random_psd(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0));
        b.dot(&b.t())
    }

    #[test]
    fn loss_examples() {
        assert!(orthogonality_loss(&[random_stiefel(10, 3, 1), random_stiefel(8, 8, 2)]) <= 1e-12);
        let mut h = Array2::zeros((3, 1));
        h[[0, 0]] = 2.0;
        assert_eq!(orthogonality_loss(&[h]), 3.0);
    }

    #[test]
    fn loss_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hs: Vec<Array2<f64>> = (0..3).map(|_| Array2::from_shape_fn((6, 2), |_| rng.gen_range(-1.0..1.0))).collect();
        let mut expected = 0.0;
        for h in &hs {
            let mut acc = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    let mut d = 0.0;
                    for r in 0..6 {
                        d += h[[r, i]] * h[[r, j]];
                    }
                    if i == j {
                        d -= 1.0;
                    }
                    acc += d * d;
                }
            }
            expected += f64::sqrt(acc);
        }
        assert!((orthogonality_loss(&hs) - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_iterate() {
        let h0 = random_stiefel(12, 3, 4);
        let mut hs = vec![h0.clone()];
        let mut st = CayleyAdamState::new(CayleyAdamConfig::default(), &[(12, 3)]);
        st.step(&mut hs, &[Array2::zeros((12, 3))]).unwrap();
        assert_eq!(hs[0], h0);
        assert_eq!(st.second_moment[0], 0.999);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn exact_retraction_stays_on_manifold() {
        let k = random_psd(20, 5);
        let cfg = CayleyAdamConfig { exact_retraction: true, learning_rate: 0.1, ..Default::default() };
        let mut st = CayleyAdamState::new(cfg, &[(20, 4)]);
        let mut hs = vec![random_stiefel(20, 4, 6)];
        for _ in 0..10 {
            let g = k.dot(&hs[0]) * -2.0;
            st.step(&mut hs, &[g]).unwrap();
            assert!(orthogonality_loss(&hs) <= 1e-10);
        }
        assert_eq!(st.reorthonormalizations, 0);
    }

    #[test]
    fn exact_matches_dense_cayley() {
        let k = random_psd(9, 7);
        let x = random_stiefel(9, 2, 8);
        let g = k.dot(&x) * -2.0;
        let cfg = CayleyAdamConfig { exact_retraction: true, learning_rate: 0.05, ..Default::default() };
        let mut st = CayleyAdamState::new(cfg.clone(), &[(9, 2)]);
        let mut hs = vec![x.clone()];
        st.step(&mut hs, &[g.clone()]).unwrap();

        // dense reference: same moments, explicit W and an explicit solve
        let m = &g * (1.0 - cfg.beta1);
        let v = cfg.beta2 + (1.0 - cfg.beta2) * g.iter().map(|t| t * t).sum::<f64>();
        let r = (1.0 - cfg.beta1) * (v / (1.0 - cfg.beta2) + cfg.epsilon).sqrt();
        let w_hat = m.dot(&x.t()) - x.dot(&x.t().dot(&m).dot(&x.t())) * 0.5;
        let w = (&w_hat - &w_hat.t()) / r;
        let wn = w.iter().map(|t| t * t).sum::<f64>().sqrt();
        let alpha = cfg.learning_rate.min(2.0 * cfg.q / (wn + cfg.epsilon));
        let eye = Array2::<f64>::eye(9);
        let lhs = &eye + &(&w * (alpha / 2.0));
        let rhs = (&eye - &(&w * (alpha / 2.0))).dot(&x);
        let y = solve_dense(lhs.view(), rhs.view()).unwrap();
        let diff = (&y - &hs[0]).iter().fold(0.0f64, |a, b| a.max(b.abs()));
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn descends_on_trace_objective() {
        let k = random_psd(15, 9);
        let f = |h: &Array2<f64>| -(h.t().dot(&k).dot(h)).diag().sum();
        let mut hs = vec![random_stiefel(15, 3, 10)];
        let start = f(&hs[0]);
        let cfg = CayleyAdamConfig { learning_rate: 0.01, ..Default::default() };
        let mut st = CayleyAdamState::new(cfg, &[(15, 3)]);
        for _ in 0..100 {
            let g = k.dot(&hs[0]) * -2.0;
            st.step(&mut hs, &[g]).unwrap();
        }
        assert!(f(&hs[0]) <= start - 1e-6, "{} vs {}", f(&hs[0]), start);
        assert!(orthogonality_loss(&hs) <= 1e-3);
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut st = CayleyAdamState::new(CayleyAdamConfig::default(), &[(3, 1)]);
        let mut hs = vec![random_stiefel(3, 1, 1)];
        let mut g = Array2::zeros((3, 1));
        g[[0, 0]] = f64::NAN;
        assert!(matches!(st.step(&mut hs, &[g]), Err(GckmError::NonFinite(_))));
    }

    #[test]
    fn orthonormalize_is_identity_on_stiefel() {
        let h = random_stiefel(7, 3, 12);
        let mut h2 = h.clone();
        orthonormalize(&mut h2).unwrap();
        assert!((&h - &h2).iter().all(|v| v.abs() < 1e-14));
    }
}
