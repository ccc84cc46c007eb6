//! n-block feedback capacity through the two coupled Riccati recursions.
//!
//! The objective is `½ sum_t log(K_I_t / K_Î_t)` maximized over `(Lambda_t, K_Z_t)`
//! subject to `(1/n) sum_t (Lambda_t K_t Lambda_tᵀ + K_Z_t) <= kappa`.
//!
//! The optimizer searches an unconstrained parametrization that always spends
//! the full budget: free weights set the per-step power `p_t` (softmax times
//! `n kappa`), and a direction `(u_t, z_t)` chosen after `K_t` is known is scaled
//! so that `Lambda_t K_t Lambda_tᵀ + K_Z_t = p_t`. Spending all the power loses
//! nothing, since unused budget can always be added to `K_Z_n`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::channel_filter::{
    output_riccati_step, run_with_information, OutputRecursion, SequentialStrategy,
    StateInformation,
};
use crate::error::{Error, Result};
use crate::model::{ChannelConfig, PoSsRealization, TimeInvariantModel};
use crate::noise_filter::{noise_riccati_step, run_noise_filter, NoiseFilterTrace};
use crate::optim::{multi_start, LocalOptimum, OptimizerOptions};

/// Restarts whose values are this close to the best are tie-broken by `|Lambda|`.
pub const TIE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerDiagnostics {
    /// How the result was obtained: `"multi-start"`, `"zero-power"` or `"water-filling"`.
    pub method: String,
    /// Iterations of the selected restart.
    pub iterations: usize,
    /// Final gradient infinity norm of the selected restart.
    pub grad_norm: f64,
    pub restarts: usize,
    /// Restarts that reached the gradient tolerance.
    pub restarts_converged: usize,
    pub converged: bool,
}

impl OptimizerDiagnostics {
    pub(crate) fn closed_form(method: &str) -> Self {
        Self {
            method: method.into(),
            iterations: 0,
            grad_norm: 0.0,
            restarts: 0,
            restarts_converged: 0,
            converged: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityResult {
    /// Total rate in nats.
    pub value: f64,
    pub rate_per_step: Vec<f64>,
    pub avg_power: f64,
    pub power_per_step: Vec<f64>,
    pub strategy: SequentialStrategy,
    /// Present for optimizer outputs.
    pub diagnostics: Option<OptimizerDiagnostics>,
}

fn evaluate_with(
    r: &PoSsRealization,
    s: &SequentialStrategy,
    info: StateInformation,
) -> Result<CapacityResult> {
    let noise = run_noise_filter(r)?;
    evaluate_with_noise(r, &noise, s, info)
}

fn evaluate_with_noise(
    r: &PoSsRealization,
    noise: &NoiseFilterTrace,
    s: &SequentialStrategy,
    info: StateInformation,
) -> Result<CapacityResult> {
    let (trace, rates) = run_with_information(r, noise, s, info)?;
    let n = r.horizon as f64;
    Ok(CapacityResult {
        value: rates.iter().sum(),
        rate_per_step: rates,
        avg_power: trace.power.iter().sum::<f64>() / n,
        power_per_step: trace.power,
        strategy: s.clone(),
        diagnostics: None,
    })
}

/// Rate and power of a given strategy; the power budget is not enforced.
pub fn evaluate_rate(r: &PoSsRealization, s: &SequentialStrategy) -> Result<CapacityResult> {
    evaluate_with(r, s, StateInformation::Estimated)
}

/// Rate of a strategy that feeds back the true state, `X_t = Lambda_t (S_t - E[S_t|Y^{t-1}]) + Z_t`,
/// measured against the actual noise entropy.
pub fn evaluate_perfect_state(
    r: &PoSsRealization,
    s: &SequentialStrategy,
) -> Result<CapacityResult> {
    evaluate_with(r, s, StateInformation::Perfect)
}

/// Maps an unconstrained parameter vector to a strategy spending exactly `n * kappa`.
struct Decoder<'a> {
    r: &'a PoSsRealization,
    noise: &'a NoiseFilterTrace,
    info: StateInformation,
    kappa: f64,
}

impl Decoder<'_> {
    fn per_step(&self) -> usize {
        self.r.state_dim + 2
    }

    fn dim(&self) -> usize {
        self.r.horizon * self.per_step()
    }

    /// Returns the strategy, its total rate, and the `K_t` seen at each step.
    fn decode(&self, x: &[f64]) -> Result<(SequentialStrategy, f64, Vec<DMatrix<f64>>)> {
        let (n, ns, stride) = (self.r.horizon, self.r.state_dim, self.per_step());
        let budget = n as f64 * self.kappa;
        let wmax = (0..n)
            .map(|t| x[t * stride + ns + 1])
            .fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = (0..n)
            .map(|t| (x[t * stride + ns + 1] - wmax).exp())
            .collect();
        let wsum: f64 = weights.iter().sum();

        let mut rec = OutputRecursion::new(self.r, self.noise, self.info);
        let mut strategy = SequentialStrategy::zero(n, ns);
        let mut ks = Vec::with_capacity(n);
        let mut value = 0.0;
        for t in 0..n {
            let p = budget * weights[t] / wsum;
            let u = DMatrix::from_row_slice(1, ns, &x[t * stride..t * stride + ns]);
            let z = x[t * stride + ns];
            let k = rec.current_k();
            // u lives in K-whitened coordinates, so Lambda K Lambdaᵀ = |P u|²
            let (inv_sqrt, projector) = whitening(k);
            let lambda_dir = &u * &inv_sqrt;
            let q = (&u * &projector * u.transpose())[(0, 0)] + z * z;
            let (lambda, kz) = if q > 1e-300 {
                let scale = p / q;
                (lambda_dir * scale.sqrt(), z * z * scale)
            } else {
                (DMatrix::zeros(1, ns), p)
            };
            ks.push(k.clone());
            let out = rec.advance(&lambda, kz)?;
            value += out.rate;
            strategy.lambda[t] = lambda.iter().copied().collect();
            strategy.dither_var[t] = kz;
        }
        Ok((strategy, value, ks))
    }

    fn objective(&self, x: &[f64]) -> f64 {
        self.decode(x).map_or(f64::NEG_INFINITY, |(_, v, _)| v)
    }

    fn start(&self, i: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let (ns, stride) = (self.r.state_dim, self.per_step());
        let mut x = vec![0.0; self.dim()];
        for t in 0..self.r.horizon {
            let base = t * stride;
            if i == 0 {
                x[base + ns] = 1.0;
            } else {
                for j in 0..ns {
                    x[base + j] = rng.sample::<f64, _>(StandardNormal);
                }
                x[base + ns] = rng.sample::<f64, _>(StandardNormal);
                x[base + ns + 1] = 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        x
    }
}

/// Relative eigenvalue cutoff below which a direction of `K_t` counts as null.
const RANGE_CUTOFF: f64 = 1e-12;

/// `(K^{+1/2}, P)`: the pseudo-inverse square root of `K` and the projector onto
/// its range. Both are continuous in `K` away from the cutoff and independent of
/// the eigenvector signs.
fn whitening(k: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let ns = k.nrows();
    let eig = k.clone().symmetric_eigen();
    let top = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let mut inv_sqrt = DMatrix::zeros(ns, ns);
    let mut projector = DMatrix::zeros(ns, ns);
    if top > 0.0 {
        for (i, &ev) in eig.eigenvalues.iter().enumerate() {
            if ev > RANGE_CUTOFF * top {
                let v = eig.eigenvectors.column(i);
                let outer = v * v.transpose();
                inv_sqrt += &outer / ev.sqrt();
                projector += outer;
            }
        }
    }
    (inv_sqrt, projector)
}

/// Projects each `Lambda_t` onto the range of `K_t`. Only `K_t Lambda_tᵀ` enters the
/// recursion, so this keeps every rate and power while minimizing `|Lambda|`.
fn canonicalize(strategy: &mut SequentialStrategy, ks: &[DMatrix<f64>]) {
    for (row, k) in strategy.lambda.iter_mut().zip(ks) {
        let eig = k.clone().symmetric_eigen();
        let top = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let cutoff = RANGE_CUTOFF * top.max(1e-300);
        let lam = DMatrix::from_row_slice(1, row.len(), row);
        let mut projected = DMatrix::zeros(1, row.len());
        for (i, &ev) in eig.eigenvalues.iter().enumerate() {
            if ev > cutoff && top > 0.0 {
                let v = eig.eigenvectors.column(i);
                let coef = (&lam * v)[(0, 0)];
                projected += v.transpose() * coef;
            }
        }
        *row = projected.iter().copied().collect();
    }
}

/// Water-filling of `n * kappa` over noise levels `levels`.
pub fn water_filling(levels: &[f64], total: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..levels.len()).collect();
    order.sort_by(|&a, &b| levels[a].total_cmp(&levels[b]));
    let mut water = 0.0;
    let mut acc = 0.0;
    for (k, &i) in order.iter().enumerate() {
        acc += levels[i];
        let candidate = (total + acc) / (k + 1) as f64;
        let next = order.get(k + 1).map(|&j| levels[j]);
        if next.is_none_or(|nx| candidate <= nx) {
            water = candidate;
            break;
        }
    }
    levels.iter().map(|&l| (water - l).max(0.0)).collect()
}

fn check_config(r: &PoSsRealization, cfg: &ChannelConfig) -> Result<()> {
    if cfg.n != r.horizon {
        return Err(Error::InvalidConfig(format!(
            "configured horizon {} differs from the model horizon {}",
            cfg.n, r.horizon
        )));
    }
    ChannelConfig::new(cfg.kappa, cfg.n).map(|_| ())
}

fn optimize_with(
    r: &PoSsRealization,
    cfg: &ChannelConfig,
    opts: &OptimizerOptions,
    info: StateInformation,
) -> Result<CapacityResult> {
    check_config(r, cfg)?;
    let noise = run_noise_filter(r)?;
    let (n, ns) = (r.horizon, r.state_dim);

    if opts.fast_paths && cfg.kappa == 0.0 {
        let mut out = evaluate_with_noise(r, &noise, &SequentialStrategy::zero(n, ns), info)?;
        out.diagnostics = Some(OptimizerDiagnostics::closed_form("zero-power"));
        return Ok(out);
    }
    let memoryless = noise.gain.iter().all(|m| m.iter().all(|&v| v == 0.0));
    if opts.fast_paths && info == StateInformation::Estimated && memoryless {
        // K_t stays zero, so Lambda is irrelevant and the steps decouple.
        let dither = water_filling(&noise.innovation_var, n as f64 * cfg.kappa);
        let s = SequentialStrategy {
            lambda: vec![vec![0.0; ns]; n],
            dither_var: dither,
        };
        let mut out = evaluate_with_noise(r, &noise, &s, info)?;
        out.diagnostics = Some(OptimizerDiagnostics::closed_form("water-filling"));
        return Ok(out);
    }

    let decoder = Decoder {
        r,
        noise: &noise,
        info,
        kappa: cfg.kappa,
    };
    let objective = |x: &[f64]| decoder.objective(x);
    let runs = multi_start(&objective, opts, |i, rng| decoder.start(i, rng));
    select_best(r, &noise, info, &decoder, &runs)
}

fn select_best(
    r: &PoSsRealization,
    noise: &NoiseFilterTrace,
    info: StateInformation,
    decoder: &Decoder<'_>,
    runs: &[LocalOptimum],
) -> Result<CapacityResult> {
    let mut candidates = Vec::with_capacity(runs.len());
    for (i, run) in runs.iter().enumerate() {
        let Ok((mut strategy, _, ks)) = decoder.decode(&run.x) else {
            continue;
        };
        canonicalize(&mut strategy, &ks);
        let eval = evaluate_with_noise(r, noise, &strategy, info)?;
        candidates.push((i, eval));
    }
    let best_value = candidates
        .iter()
        .map(|(_, c)| c.value)
        .fold(f64::NEG_INFINITY, f64::max);
    if !best_value.is_finite() {
        return Err(Error::Numerical("every restart failed to evaluate".into()));
    }
    let (idx, mut best) = candidates
        .into_iter()
        .filter(|(_, c)| c.value >= best_value - TIE_TOL)
        .min_by(|(ia, a), (ib, b)| {
            a.strategy
                .lambda_norm()
                .total_cmp(&b.strategy.lambda_norm())
                .then(ia.cmp(ib))
        })
        .expect("at least one candidate");
    let chosen = &runs[idx];
    best.diagnostics = Some(OptimizerDiagnostics {
        method: "multi-start".into(),
        iterations: chosen.iterations,
        grad_norm: chosen.grad_norm,
        restarts: runs.len(),
        restarts_converged: runs.iter().filter(|r| r.converged).count(),
        converged: chosen.converged,
    });
    Ok(best)
}

/// Best strategy found under the power budget.
pub fn optimize_strategy(
    r: &PoSsRealization,
    cfg: &ChannelConfig,
    opts: &OptimizerOptions,
) -> Result<CapacityResult> {
    optimize_with(r, cfg, opts, StateInformation::Estimated)
}

/// Optimized rate of encoders that observe the true noise state `S_t`.
///
/// The output recursion then tracks `cov(S_t | Y^{t-1})` starting from `K_S1`, with
/// the raw driver terms `B K_W Bᵀ`, `B K_W Nᵀ`, `R_t` in place of the noise-filter
/// coupling. The rate is measured against the true noise entropy, so it agrees
/// with [`optimize_strategy`] exactly when past noise and the initial state pin
/// down the current state.
pub fn perfect_state_rate(
    r: &PoSsRealization,
    cfg: &ChannelConfig,
    opts: &OptimizerOptions,
) -> Result<CapacityResult> {
    optimize_with(r, cfg, opts, StateInformation::Perfect)
}

/// Fixed points of both Riccati recursions for time-invariant inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadyState {
    pub sigma: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
    pub converged: bool,
    pub diverged: bool,
    pub iterations: usize,
}

pub const STEADY_STATE_TOL: f64 = 1e-12;
pub const STEADY_STATE_MAX_ITER: usize = 100_000;

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Iterates `Sigma` and `K` until successive iterates differ by less than
/// [`STEADY_STATE_TOL`] or [`STEADY_STATE_MAX_ITER`] steps elapse.
pub fn steady_state_riccati(
    model: &TimeInvariantModel,
    lambda: &[f64],
    dither_var: f64,
) -> Result<SteadyState> {
    let r = model.realize(2);
    r.ensure_valid()?;
    if lambda.len() != r.state_dim {
        return Err(Error::InvalidStrategy(format!(
            "Lambda has length {}, expected {}",
            lambda.len(),
            r.state_dim
        )));
    }
    if !(dither_var >= 0.0) {
        return Err(Error::InvalidStrategy("K_Z must be >= 0".into()));
    }
    let lam = DMatrix::from_row_slice(1, lambda.len(), lambda);
    let mut sigma = r.initial_cov.clone();
    let mut k = DMatrix::zeros(r.state_dim, r.state_dim);
    let mut out = SteadyState {
        sigma: to_rows(&sigma),
        k: to_rows(&k),
        converged: false,
        diverged: false,
        iterations: 0,
    };
    for it in 1..=STEADY_STATE_MAX_ITER {
        let noise_step = match noise_riccati_step(&r, 0, &sigma) {
            Ok(s) => s,
            Err(_) => {
                out.diverged = true;
                break;
            }
        };
        let out_step = match output_riccati_step(
            &r,
            0,
            &k,
            Some(&noise_step.gain),
            noise_step.innovation_var,
            &lam,
            dither_var,
        ) {
            Ok(s) => s,
            Err(_) => {
                out.diverged = true;
                break;
            }
        };
        let k_next = out_step.k_next.expect("interior step");
        let delta = (&noise_step.sigma_next - &sigma)
            .amax()
            .max((&k_next - &k).amax());
        sigma = noise_step.sigma_next;
        k = k_next;
        out.iterations = it;
        let size = sigma.amax().max(k.amax());
        if !size.is_finite() || size > 1e15 {
            out.diverged = true;
            break;
        }
        if delta < STEADY_STATE_TOL {
            out.converged = true;
            break;
        }
    }
    out.sigma = to_rows(&sigma);
    out.k = to_rows(&k);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticRow {
    pub n: usize,
    pub capacity: f64,
    /// `C_n / n`.
    pub per_step: f64,
    /// Change of `C_n / n` from the previous horizon.
    pub delta: Option<f64>,
    pub avg_power: f64,
}

/// Optimizes at each horizon in `horizons` and reports `C_n / n`.
pub fn asymptotic_rate_estimate(
    model: &TimeInvariantModel,
    kappa: f64,
    horizons: &[usize],
    opts: &OptimizerOptions,
) -> Result<Vec<AsymptoticRow>> {
    if horizons.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidConfig(
            "horizons must be strictly increasing".into(),
        ));
    }
    let mut rows: Vec<AsymptoticRow> = Vec::with_capacity(horizons.len());
    for &n in horizons {
        let cfg = ChannelConfig::new(kappa, n)?;
        let res = optimize_strategy(&model.realize(n), &cfg, opts)?;
        let per_step = res.value / n as f64;
        let delta = rows.last().map(|p| per_step - p.per_step);
        rows.push(AsymptoticRow {
            n,
            capacity: res.value,
            per_step,
            delta,
            avg_power: res.avg_power,
        });
    }
    Ok(rows)
}
