//! Multi-start quasi-Newton ascent with central finite-difference gradients.
//!
//! Both capacity engines hand this module a smooth objective over an
//! unconstrained parameter vector whose decoding already satisfies the power
//! constraint, so the local solver never sees a constraint.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Knobs shared by the sequential and matrix-form optimizers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerOptions {
    /// Number of starting points; the first is always the no-feedback strategy.
    pub restarts: usize,
    /// Iteration cap per start.
    pub max_iter: usize,
    /// Stop when the infinity norm of the gradient drops below this.
    pub tol: f64,
    pub seed: u64,
    /// Relative step of the central differences.
    pub fd_step: f64,
    /// Use the closed-form solutions for `kappa = 0` and for noise whose past
    /// carries no information about its future.
    pub fast_paths: bool,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        Self {
            restarts: 16,
            max_iter: 400,
            tol: 1e-9,
            seed: 0x5eed,
            fd_step: 1e-6,
            fast_paths: true,
        }
    }
}

/// Outcome of one local ascent.
#[derive(Debug, Clone)]
pub struct LocalOptimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

fn eval(f: &(dyn Fn(&[f64]) -> f64 + Sync), x: &[f64]) -> f64 {
    let v = f(x);
    if v.is_finite() {
        v
    } else {
        f64::NEG_INFINITY
    }
}

/// Central-difference gradient.
pub fn fd_gradient(f: &(dyn Fn(&[f64]) -> f64 + Sync), x: &[f64], rel_step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = rel_step * x[i].abs().max(1.0);
            probe[i] = x[i] + h;
            let up = eval(f, &probe);
            probe[i] = x[i] - h;
            let down = eval(f, &probe);
            probe[i] = x[i];
            let g = (up - down) / (2.0 * h);
            if g.is_finite() {
                g
            } else {
                0.0
            }
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// BFGS ascent from `x0` with Armijo backtracking.
pub fn bfgs_maximize(
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    x0: Vec<f64>,
    opts: &OptimizerOptions,
) -> LocalOptimum {
    let dim = x0.len();
    let mut x = x0;
    let mut fx = eval(f, &x);
    if dim == 0 {
        return LocalOptimum {
            x,
            value: fx,
            iterations: 0,
            grad_norm: 0.0,
            converged: true,
        };
    }
    let mut g = fd_gradient(f, &x, opts.fd_step);
    // inverse Hessian of -f
    let mut h = identity(dim);
    let mut iterations = 0;
    let mut resets = 0;
    while iterations < opts.max_iter {
        if inf_norm(&g) <= opts.tol {
            break;
        }
        iterations += 1;
        let mut d = mat_vec(&h, &g);
        let mut slope = dot(&g, &d);
        if !(slope > 0.0) {
            h = identity(dim);
            d = g.clone();
            slope = dot(&g, &d);
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha > 1e-14 {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + alpha * di).collect();
            let ft = eval(f, &trial);
            if ft >= fx + 1e-4 * alpha * slope {
                accepted = Some((trial, ft));
                break;
            }
            alpha *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else {
            if resets < 2 {
                resets += 1;
                h = identity(dim);
                continue;
            }
            break;
        };
        let g_new = fd_gradient(f, &x_new, opts.fd_step);
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        // gradient of -f
        let y: Vec<f64> = g.iter().zip(&g_new).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-14 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if iterations == 1 {
                let scale = sy / dot(&y, &y);
                h.iter_mut().flatten().for_each(|v| *v *= scale);
            }
            bfgs_update(&mut h, &s, &y, sy);
        }
        let improvement = f_new - fx;
        x = x_new;
        fx = f_new;
        g = g_new;
        if improvement.abs() <= 1e-16 * fx.abs().max(1.0) && inf_norm(&s) <= 1e-13 {
            break;
        }
    }
    let grad_norm = inf_norm(&g);
    LocalOptimum {
        x,
        value: fx,
        iterations,
        grad_norm,
        converged: grad_norm <= opts.tol.max(1e-7),
    }
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64], sy: f64) {
    let rho = 1.0 / sy;
    let hy = mat_vec(h, y);
    let yhy = dot(y, &hy);
    let n = s.len();
    for i in 0..n {
        for j in 0..n {
            h[i][j] += (1.0 + rho * yhy) * rho * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
        }
    }
}

/// Runs `restarts` local ascents in parallel; start `i` comes from `start(i, rng)`
/// with an RNG keyed on `(seed, i)`. Results are returned in restart order.
pub fn multi_start<S>(
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    opts: &OptimizerOptions,
    start: S,
) -> Vec<LocalOptimum>
where
    S: Fn(usize, &mut ChaCha8Rng) -> Vec<f64> + Sync,
{
    (0..opts.restarts.max(1))
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(i as u64);
            let x0 = start(i, &mut rng);
            bfgs_maximize(f, x0, opts)
        })
        .collect()
}
