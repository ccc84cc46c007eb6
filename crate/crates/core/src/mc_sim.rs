//! Monte Carlo simulation of the closed loop `Y_t = X_t + V_t`.
//!
//! Randomness is drawn from ChaCha8 with one stream per sample (`set_stream(i)`),
//! and a fixed word offset per process inside that stream:
//!
//! | process | word offset |
//! |---------|-------------|
//! | `S_1`   | `0`         |
//! | `W_t`   | `1 << 40`   |
//! | `Z_t`   | `2 << 40`   |
//!
//! A sample therefore depends only on `(seed, i)`, which makes the output
//! independent of how samples are split across threads, and lets different
//! strategy forms share the same noise path for a given seed.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::channel_filter::{run_output_filter, OutputFilterTrace, SequentialStrategy};
use crate::error::{Error, Result};
use crate::export::fmt_num;
use crate::linalg::{psd_factor, symmetrize};
use crate::model::{assemble_noise_covariance, noise_mean, PoSsRealization};
use crate::noise_filter::{run_noise_filter, NoiseFilterTrace};
use crate::oracle::{CoverPombraStrategy, InnovationsFormStrategy, InputLaw, LinearInput};

const STREAM_S1: u128 = 0;
const STREAM_W: u128 = 1 << 40;
const STREAM_Z: u128 = 2 << 40;

/// Largest trace [`SimulationTrace::write_csv`] will export.
pub const TRACE_EXPORT_LIMIT: usize = 10_000;

/// Strategy in any of the three supported forms.
#[derive(Debug, Clone, Copy)]
pub enum StrategyRef<'a> {
    Sequential(&'a SequentialStrategy),
    CoverPombra(&'a CoverPombraStrategy),
    Innovations(&'a InnovationsFormStrategy),
}

impl<'a> From<&'a SequentialStrategy> for StrategyRef<'a> {
    fn from(s: &'a SequentialStrategy) -> Self {
        StrategyRef::Sequential(s)
    }
}

impl<'a> From<&'a CoverPombraStrategy> for StrategyRef<'a> {
    fn from(s: &'a CoverPombraStrategy) -> Self {
        StrategyRef::CoverPombra(s)
    }
}

impl<'a> From<&'a InnovationsFormStrategy> for StrategyRef<'a> {
    fn from(s: &'a InnovationsFormStrategy) -> Self {
        StrategyRef::Innovations(s)
    }
}

/// Sample paths of one process, laid out as `(sample, t, component)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    pub dim: usize,
    horizon: usize,
    data: Vec<f64>,
}

impl Paths {
    fn new(n_samples: usize, horizon: usize, dim: usize) -> Self {
        Self {
            dim,
            horizon,
            data: vec![0.0; n_samples * horizon * dim],
        }
    }

    pub fn at(&self, sample: usize, t: usize) -> &[f64] {
        let start = (sample * self.horizon + t) * self.dim;
        &self.data[start..start + self.dim]
    }

    /// First component, for scalar processes.
    pub fn value(&self, sample: usize, t: usize) -> f64 {
        self.at(sample, t)[0]
    }

    fn sample_mut(&mut self, sample: usize) -> &mut [f64] {
        let len = self.horizon * self.dim;
        &mut self.data[sample * len..(sample + 1) * len]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTrace {
    pub seed: u64,
    pub n_samples: usize,
    pub horizon: usize,
    pub state: Paths,
    pub driver: Paths,
    pub noise: Paths,
    /// `Ŝ_t = E[S_t | V^{t-1}]`.
    pub state_estimate: Paths,
    /// `Î_t = V_t - C_t Ŝ_t`.
    pub noise_innovation: Paths,
    pub input: Paths,
    /// `Z_t`, or the correlated `Z̄_t` for matrix-form strategies.
    pub dither: Paths,
    pub output: Paths,
    /// `Ŝ̂_t = E[Ŝ_t | Y^{t-1}]`.
    pub estimate_given_output: Paths,
    /// `I_t = Y_t - E[Y_t | Y^{t-1}]`.
    pub output_innovation: Paths,
}

/// One sample of every process, scalar processes as plain vectors.
struct SamplePath {
    state: Vec<f64>,
    driver: Vec<f64>,
    noise: Vec<f64>,
    state_estimate: Vec<f64>,
    noise_innovation: Vec<f64>,
    input: Vec<f64>,
    dither: Vec<f64>,
    output: Vec<f64>,
    estimate_given_output: Vec<f64>,
    output_innovation: Vec<f64>,
}

fn gaussians(rng: &mut ChaCha8Rng, k: usize) -> DVector<f64> {
    DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn sample_rng(seed: u64, sample: usize, offset: u128) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample as u64);
    rng.set_word_pos(offset);
    rng
}

/// Shared pieces for generating the noise and its innovations.
struct NoiseSampler<'a> {
    r: &'a PoSsRealization,
    noise: &'a NoiseFilterTrace,
    init_factor: DMatrix<f64>,
    driver_factors: Vec<DMatrix<f64>>,
}

struct NoisePath {
    state: Vec<DVector<f64>>,
    driver: Vec<DVector<f64>>,
    v: Vec<f64>,
    estimate: Vec<DVector<f64>>,
    innovation: Vec<f64>,
}

impl<'a> NoiseSampler<'a> {
    fn new(r: &'a PoSsRealization, noise: &'a NoiseFilterTrace) -> Self {
        Self {
            r,
            noise,
            init_factor: psd_factor(&r.initial_cov),
            driver_factors: r.driver_cov.iter().map(psd_factor).collect(),
        }
    }

    fn draw(&self, seed: u64, sample: usize) -> NoisePath {
        let r = self.r;
        let (n, ns, nw) = (r.horizon, r.state_dim, r.driver_dim);
        let mut rng_s = sample_rng(seed, sample, STREAM_S1);
        let mut rng_w = sample_rng(seed, sample, STREAM_W);
        let mut s = &r.initial_mean + &self.init_factor * gaussians(&mut rng_s, ns);
        let mut s_hat = r.initial_mean.clone();
        let mut path = NoisePath {
            state: Vec::with_capacity(n),
            driver: Vec::with_capacity(n),
            v: Vec::with_capacity(n),
            estimate: Vec::with_capacity(n),
            innovation: Vec::with_capacity(n),
        };
        for t in 0..n {
            let w = &self.driver_factors[t] * gaussians(&mut rng_w, nw);
            let v = (&r.observation[t] * &s + &r.feedthrough[t] * &w)[0];
            let innov = v - (&r.observation[t] * &s_hat)[0];
            path.state.push(s.clone());
            path.estimate.push(s_hat.clone());
            path.v.push(v);
            path.innovation.push(innov);
            if t + 1 < n {
                s = &r.transition[t] * &s + &r.state_gain[t] * &w;
                s_hat = &r.transition[t] * &s_hat + &self.noise.gain[t] * innov;
            }
            path.driver.push(w);
        }
        path
    }
}

fn dither_draws(seed: u64, sample: usize, n: usize) -> DVector<f64> {
    gaussians(&mut sample_rng(seed, sample, STREAM_Z), n)
}

/// Simulates `n_samples` independent closed-loop paths.
pub fn simulate<'a>(
    r: &PoSsRealization,
    strategy: impl Into<StrategyRef<'a>>,
    n_samples: usize,
    seed: u64,
) -> Result<SimulationTrace> {
    let noise = run_noise_filter(r)?;
    match strategy.into() {
        StrategyRef::Sequential(s) => {
            let out = run_output_filter(r, &noise, s)?;
            simulate_with_filter(r, s, &noise, &out, n_samples, seed)
        }
        StrategyRef::CoverPombra(s) => simulate_linear(r, &noise, s, n_samples, seed, |z, _| {
            psd_factor(&s.dither_cov) * z
        }),
        StrategyRef::Innovations(s) => simulate_linear(r, &noise, s, n_samples, seed, |z, _| {
            DVector::from_fn(z.len(), |t, _| s.dither_var[t].max(0.0).sqrt() * z[t])
        }),
    }
}

/// Sequential closed loop driven by the supplied filter traces.
///
/// Passing traces that do not belong to `r` (for example a perturbed `M_t`) gives
/// a deliberately mis-specified loop, useful as a negative control.
pub fn simulate_with_filter(
    r: &PoSsRealization,
    s: &SequentialStrategy,
    noise: &NoiseFilterTrace,
    out: &OutputFilterTrace,
    n_samples: usize,
    seed: u64,
) -> Result<SimulationTrace> {
    let n = r.horizon;
    s.validate(n, r.state_dim)?;
    check_samples(n_samples)?;
    let sampler = NoiseSampler::new(r, noise);
    let lambdas: Vec<DMatrix<f64>> = (0..n).map(|t| s.lambda_row(t)).collect();
    let paths: Vec<SamplePath> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let np = sampler.draw(seed, i);
            let xi = dither_draws(seed, i, n);
            let mut est_y = r.initial_mean.clone();
            let mut x = vec![0.0; n];
            let mut z = vec![0.0; n];
            let mut y = vec![0.0; n];
            let mut innov = vec![0.0; n];
            let mut est_hist = Vec::with_capacity(n);
            for t in 0..n {
                z[t] = s.dither_var[t].sqrt() * xi[t];
                x[t] = (&lambdas[t] * (&np.estimate[t] - &est_y))[0] + z[t];
                y[t] = x[t] + np.v[t];
                innov[t] = y[t] - (&r.observation[t] * &est_y)[0];
                est_hist.push(est_y.clone());
                if t + 1 < n {
                    est_y = &r.transition[t] * &est_y + &out.gain[t] * innov[t];
                }
            }
            assemble(np, x, z, y, est_hist, innov)
        })
        .collect();
    Ok(pack(r, seed, paths))
}

/// Non-sequential forms: `X` from the form's own recursion, then `Ŝ̂` and `I`
/// by exact Gaussian regression on past outputs.
fn simulate_linear<L, F>(
    r: &PoSsRealization,
    noise: &NoiseFilterTrace,
    law: &L,
    n_samples: usize,
    seed: u64,
    dither: F,
) -> Result<SimulationTrace>
where
    L: InputLaw + InputRecursion + Sync,
    F: Fn(&DVector<f64>, usize) -> DVector<f64> + Sync,
{
    let n = r.horizon;
    check_samples(n_samples)?;
    let lin = law.linear_input()?;
    if lin.on_noise.nrows() != n {
        return Err(Error::Dimension(format!(
            "strategy horizon {} does not match model horizon {n}",
            lin.on_noise.nrows()
        )));
    }
    let k_v = assemble_noise_covariance(r)?;
    let mean_v = noise_mean(r);
    let regression = OutputRegression::new(r, noise, &k_v, &lin)?;
    let sampler = NoiseSampler::new(r, noise);
    let paths: Vec<SamplePath> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let np = sampler.draw(seed, i);
            let zbar = dither(&dither_draws(seed, i, n), i);
            let v_centered: Vec<f64> = (0..n).map(|t| np.v[t] - mean_v[t]).collect();
            let x = law.inputs(&v_centered, zbar.as_slice());
            let y: Vec<f64> = (0..n).map(|t| x[t] + np.v[t]).collect();
            let y_centered: Vec<f64> = (0..n).map(|t| y[t] - mean_v[t]).collect();
            let (est_hist, innov) = regression.apply(&y_centered);
            assemble(np, x, zbar.as_slice().to_vec(), y, est_hist, innov)
        })
        .collect();
    Ok(pack(r, seed, paths))
}

/// Path-wise input rule of a non-sequential form, on centered noise and outputs.
trait InputRecursion {
    fn inputs(&self, v_centered: &[f64], dither: &[f64]) -> Vec<f64>;
}

impl InputRecursion for CoverPombraStrategy {
    fn inputs(&self, v: &[f64], zbar: &[f64]) -> Vec<f64> {
        let n = v.len();
        (0..n)
            .map(|t| (0..t).map(|j| self.feedback[(t, j)] * v[j]).sum::<f64>() + zbar[t])
            .collect()
    }
}

impl InputRecursion for InnovationsFormStrategy {
    fn inputs(&self, v: &[f64], z: &[f64]) -> Vec<f64> {
        let n = v.len();
        let mut x = vec![0.0; n];
        for t in 0..n {
            let mut acc = z[t];
            for j in 0..t {
                acc += self.gamma_noise[t][j] * v[j] + self.gamma_output[t][j] * (x[j] + v[j]);
            }
            x[t] = acc;
        }
        x
    }
}

/// Precomputed regression coefficients of `Ŝ_t` and `Y_t` on `Y^{t-1}`.
struct OutputRegression {
    state_mean: Vec<DVector<f64>>,
    /// `n_s x t` coefficients of `Ŝ_t` on centered `Y^{t-1}`.
    state_coef: Vec<DMatrix<f64>>,
    /// Unit-lower `L⁻¹` with `cov(Y) = L D Lᵀ`, so `I = L⁻¹ (Y - E Y)`.
    whitening: DMatrix<f64>,
}

impl OutputRegression {
    fn new(
        r: &PoSsRealization,
        noise: &NoiseFilterTrace,
        k_v: &DMatrix<f64>,
        lin: &LinearInput,
    ) -> Result<Self> {
        let (n, ns) = (r.horizon, r.state_dim);
        let id = DMatrix::<f64>::identity(n, n);
        let on_v = &lin.on_noise + &id;
        let cov_y = symmetrize(
            &(&on_v * k_v * on_v.transpose()
                + &lin.on_dither * &lin.dither_cov * lin.on_dither.transpose()),
        );
        let chol = cov_y
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Singular("output covariance".into()))?;
        let l = chol.l();
        let diag = l.diagonal();
        let unit = DMatrix::from_fn(n, n, |i, j| l[(i, j)] / diag[j]);
        let whitening = unit
            .solve_lower_triangular(&id)
            .ok_or_else(|| Error::Singular("output covariance factor".into()))?;

        // Ŝ_t = mean_t + G_t (V - E V), with G_t from the noise filter recursion
        let mut g = DMatrix::<f64>::zeros(ns, n);
        let mut mean = r.initial_mean.clone();
        let mut state_mean = Vec::with_capacity(n);
        let mut state_coef = Vec::with_capacity(n);
        let cov_state_y_full = |g: &DMatrix<f64>| g * k_v * on_v.transpose();
        for t in 0..n {
            state_mean.push(mean.clone());
            if t == 0 {
                state_coef.push(DMatrix::zeros(ns, 0));
            } else {
                let cross = cov_state_y_full(&g).columns(0, t).into_owned();
                let block = cov_y.view((0, 0), (t, t)).into_owned();
                let coef = block
                    .cholesky()
                    .ok_or_else(|| Error::Singular("output covariance block".into()))?
                    .solve(&cross.transpose())
                    .transpose();
                state_coef.push(coef);
            }
            if t + 1 < n {
                let c = &r.observation[t];
                let mut innov = -(c * &g);
                innov[(0, t)] += 1.0;
                g = &r.transition[t] * &g + &noise.gain[t] * innov;
                mean = &r.transition[t] * &mean;
            }
        }
        Ok(Self {
            state_mean,
            state_coef,
            whitening,
        })
    }

    fn apply(&self, y_centered: &[f64]) -> (Vec<DVector<f64>>, Vec<f64>) {
        let n = y_centered.len();
        let yc = DVector::from_column_slice(y_centered);
        let est = (0..n)
            .map(|t| &self.state_mean[t] + &self.state_coef[t] * yc.rows(0, t))
            .collect();
        let innov = (&self.whitening * yc).as_slice().to_vec();
        (est, innov)
    }
}

fn check_samples(n_samples: usize) -> Result<()> {
    if n_samples == 0 {
        return Err(Error::InvalidConfig("n_samples must be >= 1".into()));
    }
    Ok(())
}

fn flatten(v: &[DVector<f64>]) -> Vec<f64> {
    v.iter().flat_map(|x| x.iter().copied()).collect()
}

fn assemble(
    np: NoisePath,
    input: Vec<f64>,
    dither: Vec<f64>,
    output: Vec<f64>,
    est_hist: Vec<DVector<f64>>,
    output_innovation: Vec<f64>,
) -> SamplePath {
    SamplePath {
        state: flatten(&np.state),
        driver: flatten(&np.driver),
        noise: np.v,
        state_estimate: flatten(&np.estimate),
        noise_innovation: np.innovation,
        input,
        dither,
        output,
        estimate_given_output: flatten(&est_hist),
        output_innovation,
    }
}

fn pack(r: &PoSsRealization, seed: u64, samples: Vec<SamplePath>) -> SimulationTrace {
    let (n, ns, nw, m) = (r.horizon, r.state_dim, r.driver_dim, samples.len());
    let mut trace = SimulationTrace {
        seed,
        n_samples: m,
        horizon: n,
        state: Paths::new(m, n, ns),
        driver: Paths::new(m, n, nw),
        noise: Paths::new(m, n, 1),
        state_estimate: Paths::new(m, n, ns),
        noise_innovation: Paths::new(m, n, 1),
        input: Paths::new(m, n, 1),
        dither: Paths::new(m, n, 1),
        output: Paths::new(m, n, 1),
        estimate_given_output: Paths::new(m, n, ns),
        output_innovation: Paths::new(m, n, 1),
    };
    for (i, s) in samples.into_iter().enumerate() {
        trace.state.sample_mut(i).copy_from_slice(&s.state);
        trace.driver.sample_mut(i).copy_from_slice(&s.driver);
        trace.noise.sample_mut(i).copy_from_slice(&s.noise);
        trace
            .state_estimate
            .sample_mut(i)
            .copy_from_slice(&s.state_estimate);
        trace
            .noise_innovation
            .sample_mut(i)
            .copy_from_slice(&s.noise_innovation);
        trace.input.sample_mut(i).copy_from_slice(&s.input);
        trace.dither.sample_mut(i).copy_from_slice(&s.dither);
        trace.output.sample_mut(i).copy_from_slice(&s.output);
        trace
            .estimate_given_output
            .sample_mut(i)
            .copy_from_slice(&s.estimate_given_output);
        trace
            .output_innovation
            .sample_mut(i)
            .copy_from_slice(&s.output_innovation);
    }
    trace
}

impl SimulationTrace {
    fn scalar_series(&self, p: &Paths, t: usize) -> Vec<f64> {
        (0..self.n_samples).map(|i| p.value(i, t)).collect()
    }

    /// Sample rows of every process, at most `max_samples` samples.
    pub fn write_csv<W: Write>(&self, out: W, max_samples: usize) -> Result<()> {
        let limit = max_samples.min(TRACE_EXPORT_LIMIT);
        if self.n_samples > limit {
            return Err(Error::InvalidConfig(format!(
                "trace has {} samples, export limit is {limit}",
                self.n_samples
            )));
        }
        let mut w = csv::Writer::from_writer(out);
        let vec_cols = |name: &str, dim: usize| {
            (1..=dim)
                .map(move |k| format!("{name}_{k}"))
                .collect::<Vec<_>>()
        };
        let mut header = vec!["sample".to_string(), "t".to_string()];
        header.extend(vec_cols("S", self.state.dim));
        header.extend(vec_cols("W", self.driver.dim));
        header.push("V".into());
        header.extend(vec_cols("Shat", self.state_estimate.dim));
        header.push("Ihat".into());
        header.push("X".into());
        header.push("Z".into());
        header.push("Y".into());
        header.extend(vec_cols("Shathat", self.estimate_given_output.dim));
        header.push("I".into());
        w.write_record(&header)?;
        for i in 0..self.n_samples {
            for t in 0..self.horizon {
                let mut rec = vec![i.to_string(), (t + 1).to_string()];
                for p in [
                    &self.state,
                    &self.driver,
                    &self.noise,
                    &self.state_estimate,
                    &self.noise_innovation,
                    &self.input,
                    &self.dither,
                    &self.output,
                    &self.estimate_given_output,
                    &self.output_innovation,
                ] {
                    rec.extend(p.at(i, t).iter().map(|&x| fmt_num(x)));
                }
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Largest normalized cross-correlation within one family of pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorrelationCheck {
    pub max_abs_corr: f64,
    /// One-based `(t, s)` of the worst pair, `None` if no pair had variance.
    pub worst_pair: Option<(usize, usize)>,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OrthogonalityReport {
    /// `3 / sqrt(n_samples)`.
    pub threshold: f64,
    /// `corr(Î_t, Î_s)`, `t != s`.
    pub noise_innovations: CorrelationCheck,
    /// `corr(I_t, I_s)`, `t != s`.
    pub output_innovations: CorrelationCheck,
    /// `corr(Î_t, V_j)`, `j < t`.
    pub noise_innovation_vs_past_noise: CorrelationCheck,
    /// `corr(Z_t, Y_j)`, `j < t`.
    pub dither_vs_past_output: CorrelationCheck,
}

impl OrthogonalityReport {
    pub fn passed(&self) -> bool {
        self.noise_innovations.passed
            && self.output_innovations.passed
            && self.noise_innovation_vs_past_noise.passed
            && self.dither_vs_past_output.passed
    }
}

/// Pearson correlation; `None` when either side has no spread.
fn correlation(a: &[f64], b: &[f64]) -> Option<f64> {
    let m = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / m, b.iter().sum::<f64>() / m);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let scale = (saa * sbb).sqrt();
    // spreads at rounding level carry no information
    if !(saa > 1e-24 * m && sbb > 1e-24 * m) {
        return None;
    }
    Some(sab / scale)
}

fn family(
    series_a: &[Vec<f64>],
    series_b: &[Vec<f64>],
    threshold: f64,
    include: impl Fn(usize, usize) -> bool,
) -> CorrelationCheck {
    let mut worst = (0.0, None);
    for (t, a) in series_a.iter().enumerate() {
        for (s, b) in series_b.iter().enumerate() {
            if !include(t, s) {
                continue;
            }
            if let Some(c) = correlation(a, b) {
                if c.abs() > worst.0 {
                    worst = (c.abs(), Some((t + 1, s + 1)));
                }
            }
        }
    }
    CorrelationCheck {
        max_abs_corr: worst.0,
        worst_pair: worst.1,
        passed: worst.0 < threshold,
    }
}

/// Normalized cross-correlations of the innovations, flagged at `3 / sqrt(N)`.
pub fn check_orthogonality(trace: &SimulationTrace) -> OrthogonalityReport {
    let threshold = 3.0 / (trace.n_samples as f64).sqrt();
    let series = |p: &Paths| -> Vec<Vec<f64>> {
        (0..trace.horizon)
            .map(|t| trace.scalar_series(p, t))
            .collect()
    };
    let ihat = series(&trace.noise_innovation);
    let i = series(&trace.output_innovation);
    let v = series(&trace.noise);
    let z = series(&trace.dither);
    let y = series(&trace.output);
    OrthogonalityReport {
        threshold,
        noise_innovations: family(&ihat, &ihat, threshold, |t, s| s < t),
        output_innovations: family(&i, &i, threshold, |t, s| s < t),
        noise_innovation_vs_past_noise: family(&ihat, &v, threshold, |t, j| j < t),
        dither_vs_past_output: family(&z, &y, threshold, |t, j| j < t),
    }
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
    /// Per-step contributions where meaningful, else empty.
    pub per_step: Vec<f64>,
}

impl Estimate {
    /// `|value - reference| <= k * std_error`.
    pub fn within(&self, reference: f64, k: f64) -> bool {
        (self.value - reference).abs() <= k * self.std_error
    }
}

fn mean_and_se(x: &[f64]) -> (f64, f64) {
    let m = x.len() as f64;
    let mean = x.iter().sum::<f64>() / m;
    if x.len() < 2 {
        return (mean, 0.0);
    }
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
    (mean, (var / m).sqrt())
}

/// Plug-in `½ Σ_t log(mean I_t² / mean Î_t²)` in nats.
///
/// Both innovations have zero mean by construction, so raw second moments are
/// used. The standard error is the delta-method one, from the per-sample influence
/// `½ Σ_t (I_t²/mean I_t² - Î_t²/mean Î_t²)`.
pub fn empirical_rate(trace: &SimulationTrace) -> Estimate {
    let (m, n) = (trace.n_samples, trace.horizon);
    let second_moment =
        |p: &Paths, t: usize| (0..m).map(|i| p.value(i, t).powi(2)).sum::<f64>() / m as f64;
    let out: Vec<f64> = (0..n)
        .map(|t| second_moment(&trace.output_innovation, t))
        .collect();
    let noise: Vec<f64> = (0..n)
        .map(|t| second_moment(&trace.noise_innovation, t))
        .collect();
    let per_step: Vec<f64> = (0..n).map(|t| 0.5 * (out[t] / noise[t]).ln()).collect();
    let influence: Vec<f64> = (0..m)
        .map(|i| {
            (0..n)
                .map(|t| {
                    0.5 * (trace.output_innovation.value(i, t).powi(2) / out[t]
                        - trace.noise_innovation.value(i, t).powi(2) / noise[t])
                })
                .sum()
        })
        .collect();
    let (_, se) = mean_and_se(&influence);
    Estimate {
        value: per_step.iter().sum(),
        std_error: se,
        per_step,
    }
}

/// `(1/n) Σ_t X_t²` averaged over samples.
pub fn empirical_power(trace: &SimulationTrace) -> Estimate {
    let n = trace.horizon as f64;
    let per_sample: Vec<f64> = (0..trace.n_samples)
        .map(|i| {
            (0..trace.horizon)
                .map(|t| trace.input.value(i, t).powi(2))
                .sum::<f64>()
                / n
        })
        .collect();
    let (value, std_error) = mean_and_se(&per_sample);
    let per_step = (0..trace.horizon)
        .map(|t| {
            (0..trace.n_samples)
                .map(|i| trace.input.value(i, t).powi(2))
                .sum::<f64>()
                / trace.n_samples as f64
        })
        .collect();
    Estimate {
        value,
        std_error,
        per_step,
    }
}

/// Sample covariance of the noise block `V^n`.
pub fn empirical_noise_covariance(trace: &SimulationTrace) -> DMatrix<f64> {
    let (m, n) = (trace.n_samples, trace.horizon);
    let mut mean = DVector::<f64>::zeros(n);
    for i in 0..m {
        for t in 0..n {
            mean[t] += trace.noise.value(i, t);
        }
    }
    mean /= m as f64;
    let mut cov = DMatrix::<f64>::zeros(n, n);
    for i in 0..m {
        let d = DVector::from_fn(n, |t, _| trace.noise.value(i, t) - mean[t]);
        cov += &d * d.transpose();
    }
    cov / (m as f64 - 1.0).max(1.0)
}
