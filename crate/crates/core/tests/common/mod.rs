//! Shared test helpers: random models and strategies, and a brute-force oracle
//! that computes every filter quantity from explicit Gaussian conditioning on
//! the primitive random vector, without touching any recursion.
#![allow(dead_code)]

use feedcap::model::PoSsRealization;
use feedcap::oracle::CoverPombraStrategy;
use feedcap::SequentialStrategy;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * gauss(rng))
}

/// Random PSD matrix of the given rank.
pub fn random_psd(rng: &mut ChaCha8Rng, dim: usize, rank: usize) -> DMatrix<f64> {
    let g = random_matrix(rng, dim, rank, 1.0);
    let m = &g * g.transpose();
    (&m + m.transpose()) * 0.5
}

/// Scales `a` so its spectral norm is at most `bound`.
fn contract(a: DMatrix<f64>, bound: f64) -> DMatrix<f64> {
    let norm = a.clone().svd(false, false).singular_values.max();
    if norm > bound {
        a * (bound / norm)
    } else {
        a
    }
}

/// Random time-varying PO-SS realization with `R_t > 0`.
///
/// The initial covariance is drawn full rank, rank deficient, or zero. Small
/// `R_t` makes `K_V` nearly singular, which is useful for robustness tests.
pub fn random_model(rng: &mut ChaCha8Rng, n: usize, ns: usize, nw: usize) -> PoSsRealization {
    random_model_with_floor(rng, n, ns, nw, 0.0)
}

/// [`random_model`] with every `R_t` rescaled to at least `min_r`, which keeps
/// `K_V` well enough conditioned for a direct determinant to serve as reference.
pub fn random_model_with_floor(
    rng: &mut ChaCha8Rng,
    n: usize,
    ns: usize,
    nw: usize,
    min_r: f64,
) -> PoSsRealization {
    let steps = n - 1;
    let transition = (0..steps)
        .map(|_| contract(random_matrix(rng, ns, ns, 0.7), 0.95))
        .collect();
    let state_gain = (0..steps)
        .map(|_| random_matrix(rng, ns, nw, 0.8))
        .collect();
    let observation = (0..n).map(|_| random_matrix(rng, 1, ns, 1.0)).collect();
    let mut feedthrough: Vec<DMatrix<f64>> =
        (0..n).map(|_| random_matrix(rng, 1, nw, 1.0)).collect();
    for f in feedthrough.iter_mut() {
        if f.norm() < 0.3 {
            f[(0, 0)] += 0.5;
        }
    }
    let driver_cov = (0..n)
        .map(|_| random_psd(rng, nw, nw) + DMatrix::identity(nw, nw) * 0.1)
        .collect();
    let initial_cov = match rng.random_range(0..3) {
        0 => DMatrix::zeros(ns, ns),
        1 => {
            let rank = rng.random_range(1..=ns);
            random_psd(rng, ns, rank)
        }
        _ => random_psd(rng, ns, ns),
    };
    let mut r = PoSsRealization {
        horizon: n,
        state_dim: ns,
        driver_dim: nw,
        transition,
        state_gain,
        observation,
        feedthrough,
        driver_cov,
        initial_mean: DVector::from_fn(ns, |_, _| gauss(rng)),
        initial_cov,
        unstable_init: false,
    };
    for t in 0..n {
        let rt = r.feedthrough_variance(t);
        if rt < min_r {
            r.feedthrough[t] *= (min_r / rt).sqrt();
        }
    }
    r.ensure_valid().expect("generator produces valid models");
    r
}

/// Random sequential strategy; some dither variances are exactly zero.
pub fn random_strategy(rng: &mut ChaCha8Rng, n: usize, ns: usize) -> SequentialStrategy {
    SequentialStrategy {
        lambda: (0..n)
            .map(|_| (0..ns).map(|_| 1.5 * gauss(rng)).collect())
            .collect(),
        dither_var: (0..n)
            .map(|_| {
                if rng.random_bool(0.2) {
                    0.0
                } else {
                    rng.random_range(0.0..2.0)
                }
            })
            .collect(),
    }
}

/// Random matrix-form strategy; `K_Z̄` is sometimes rank deficient.
pub fn random_cp_strategy(rng: &mut ChaCha8Rng, n: usize) -> CoverPombraStrategy {
    let mut feedback = random_matrix(rng, n, n, 0.8);
    for t in 0..n {
        for j in t..n {
            feedback[(t, j)] = 0.0;
        }
    }
    let rank = if rng.random_bool(0.3) {
        rng.random_range(0..=n)
    } else {
        n
    };
    CoverPombraStrategy {
        feedback,
        dither_cov: random_psd(rng, n, rank),
    }
}

/// Linear functionals of the primitive vector `(S_1 - mu, W_1..W_n, Z_1..Z_n)`.
pub struct BruteForce {
    pub cov: DMatrix<f64>,
    pub state: Vec<DMatrix<f64>>,
    pub noise: Vec<DMatrix<f64>>,
    pub input: Vec<DMatrix<f64>>,
    pub output: Vec<DMatrix<f64>>,
    /// `E[S_t | V^{t-1}]`.
    pub estimate: Vec<DMatrix<f64>>,
    /// Encoder's state reference conditioned on `Y^{t-1}`.
    pub estimate_given_output: Vec<DMatrix<f64>>,
}

pub struct BruteQuantities {
    pub sigma: Vec<DMatrix<f64>>,
    pub noise_innovation_var: Vec<f64>,
    pub k: Vec<DMatrix<f64>>,
    pub output_innovation_var: Vec<f64>,
    pub power: Vec<f64>,
    pub rate: f64,
    pub log_det_noise: f64,
    pub log_det_output: f64,
}

fn stack(rows: &[DMatrix<f64>]) -> DMatrix<f64> {
    let cols = rows.first().map_or(0, |r| r.ncols());
    let total: usize = rows.iter().map(|r| r.nrows()).sum();
    let mut m = DMatrix::zeros(total, cols);
    let mut off = 0;
    for r in rows {
        m.view_mut((off, 0), (r.nrows(), cols)).copy_from(r);
        off += r.nrows();
    }
    m
}

impl BruteForce {
    fn c(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        a * &self.cov * b.transpose()
    }

    /// Coefficients of `E[target | given]` over the primitive vector.
    fn condition(&self, target: &DMatrix<f64>, given: &[DMatrix<f64>]) -> DMatrix<f64> {
        if given.is_empty() {
            return DMatrix::zeros(target.nrows(), target.ncols());
        }
        let g = stack(given);
        let cgg = self.c(&g, &g);
        let ctg = self.c(target, &g);
        let inv = cgg.pseudo_inverse(1e-13).expect("pseudo inverse");
        ctg * inv * g
    }

    fn residual_cov(&self, target: &DMatrix<f64>, given: &[DMatrix<f64>]) -> DMatrix<f64> {
        let e = target - self.condition(target, given);
        self.c(&e, &e)
    }

    /// Closed loop where the encoder feeds back `E[S_t|V^{t-1}]` (or the true `S_t`
    /// when `perfect`) minus its conditional mean given `Y^{t-1}`.
    pub fn sequential(r: &PoSsRealization, s: &SequentialStrategy, perfect: bool) -> Self {
        let (n, ns, nw) = (r.horizon, r.state_dim, r.driver_dim);
        let p = ns + n * nw + n;
        let mut cov = DMatrix::zeros(p, p);
        cov.view_mut((0, 0), (ns, ns)).copy_from(&r.initial_cov);
        for t in 0..n {
            let o = ns + t * nw;
            cov.view_mut((o, o), (nw, nw)).copy_from(&r.driver_cov[t]);
            let z = ns + n * nw + t;
            cov[(z, z)] = s.dither_var[t];
        }
        let mut bf = BruteForce {
            cov,
            state: vec![],
            noise: vec![],
            input: vec![],
            output: vec![],
            estimate: vec![],
            estimate_given_output: vec![],
        };
        let mut state = DMatrix::zeros(ns, p);
        state.view_mut((0, 0), (ns, ns)).fill_with_identity();
        for t in 0..n {
            let mut w = DMatrix::zeros(nw, p);
            w.view_mut((0, ns + t * nw), (nw, nw)).fill_with_identity();
            let v = &r.observation[t] * &state + &r.feedthrough[t] * &w;
            let est = bf.condition(&state, &bf.noise.clone());
            let reference = if perfect { state.clone() } else { est.clone() };
            let est_y = bf.condition(&reference, &bf.output.clone());
            let mut x = s.lambda_row(t) * (&reference - &est_y);
            x[(0, ns + n * nw + t)] += 1.0;
            let y = &x + &v;
            bf.state.push(state.clone());
            bf.noise.push(v);
            bf.estimate.push(est);
            bf.estimate_given_output.push(est_y);
            bf.input.push(x);
            bf.output.push(y);
            if t + 1 < n {
                state = &r.transition[t] * &state + &r.state_gain[t] * &w;
            }
        }
        bf
    }

    pub fn quantities(&self) -> BruteQuantities {
        let n = self.noise.len();
        let mut q = BruteQuantities {
            sigma: vec![],
            noise_innovation_var: vec![],
            k: vec![],
            output_innovation_var: vec![],
            power: vec![],
            rate: 0.0,
            log_det_noise: 0.0,
            log_det_output: 0.0,
        };
        for t in 0..n {
            let e = &self.state[t] - &self.estimate[t];
            q.sigma.push(self.c(&e, &e));
            q.noise_innovation_var
                .push(self.residual_cov(&self.noise[t], &self.noise[..t])[(0, 0)]);
            let d = &self.estimate_given_output[t];
            let diff = &self.estimate[t] - d;
            q.k.push(self.c(&diff, &diff));
            q.output_innovation_var
                .push(self.residual_cov(&self.output[t], &self.output[..t])[(0, 0)]);
            q.power.push(self.c(&self.input[t], &self.input[t])[(0, 0)]);
        }
        q.rate = (0..n)
            .map(|t| 0.5 * (q.output_innovation_var[t] / q.noise_innovation_var[t]).ln())
            .sum();
        let v = stack(&self.noise);
        let y = stack(&self.output);
        q.log_det_noise = self.c(&v, &v).determinant().ln();
        q.log_det_output = self.c(&y, &y).determinant().ln();
        q
    }
}
