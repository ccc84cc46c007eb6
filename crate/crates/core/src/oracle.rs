//! Matrix-form characterization: inputs `X^n = B V^n + Z̄^n` with strictly lower
//! triangular `B` and Gaussian `Z̄ ~ N(0, K_Z̄)` independent of the noise, scored by
//! `½ log det((B+I) K_V (B+I)ᵀ + K_Z̄) / det K_V` under `(1/n) tr(B K_V Bᵀ + K_Z̄) <= kappa`.
//!
//! This is the reference the sequential engine is checked against. It shares no
//! code with the Riccati recursions apart from [`unroll_sequential`], which is the
//! bridge between the two parametrizations.
//!
//! All inputs here act on the centered noise `V - E[V]`.

use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::capacity::OptimizerDiagnostics;
use crate::channel_filter::{run_output_filter, SequentialStrategy};
use crate::error::{Error, Result};
use crate::export::fmt_num;
use crate::linalg::{ensure_psd, log_det_spd, solve_spd_ridged, symmetrize};
use crate::model::{ChannelConfig, PoSsRealization, PSD_TOL};
use crate::noise_filter::NoiseFilterTrace;
use crate::optim::{multi_start, OptimizerOptions};

/// Default horizon guard for [`cp_optimize`].
pub const CP_MAX_HORIZON: usize = 8;
/// Ridge added to singular conditioning blocks, relative to the block scale.
pub const CONDITIONING_RIDGE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct CoverPombraStrategy {
    /// Strictly lower-triangular `B`.
    pub feedback: DMatrix<f64>,
    /// `K_Z̄`.
    pub dither_cov: DMatrix<f64>,
}

impl CoverPombraStrategy {
    pub fn zero(n: usize) -> Self {
        Self {
            feedback: DMatrix::zeros(n, n),
            dither_cov: DMatrix::zeros(n, n),
        }
    }

    pub fn horizon(&self) -> usize {
        self.feedback.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.feedback.nrows();
        if self.feedback.shape() != (n, n) || self.dither_cov.shape() != (n, n) {
            return Err(Error::InvalidStrategy(format!(
                "B is {:?} and K_Zbar is {:?}, both must be {n}x{n}",
                self.feedback.shape(),
                self.dither_cov.shape()
            )));
        }
        for t in 0..n {
            for j in t..n {
                if self.feedback[(t, j)] != 0.0 {
                    return Err(Error::InvalidStrategy(format!(
                        "B[{},{}] must be zero (strictly lower triangular)",
                        t + 1,
                        j + 1
                    )));
                }
            }
        }
        if (&self.dither_cov - self.dither_cov.transpose()).amax()
            > PSD_TOL * self.dither_cov.amax().max(1.0)
        {
            return Err(Error::InvalidStrategy("K_Zbar not symmetric".into()));
        }
        ensure_psd(&self.dither_cov, PSD_TOL, "K_Zbar")
    }

    /// CSV with `B` then `K_Zbar`, one row per matrix row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let n = self.horizon();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["matrix".to_string(), "row".to_string()];
        header.extend((1..=n).map(|j| format!("col_{j}")));
        w.write_record(&header)?;
        for (name, m) in [("B", &self.feedback), ("K_Zbar", &self.dither_cov)] {
            for i in 0..n {
                let mut rec = vec![name.to_string(), (i + 1).to_string()];
                rec.extend((0..n).map(|j| fmt_num(m[(i, j)])));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// `X_t = Gamma¹_t V^{t-1} + Gamma²_t Y^{t-1} + Z_t` with independent `Z_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct InnovationsFormStrategy {
    /// `gamma_noise[t]` has length `t` (zero-based), so the first entry is empty.
    pub gamma_noise: Vec<Vec<f64>>,
    /// Same layout as `gamma_noise`, acting on past outputs.
    pub gamma_output: Vec<Vec<f64>>,
    /// `K_Z_t >= 0`.
    pub dither_var: Vec<f64>,
}

impl InnovationsFormStrategy {
    pub fn horizon(&self) -> usize {
        self.dither_var.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.horizon();
        if self.gamma_noise.len() != n || self.gamma_output.len() != n {
            return Err(Error::InvalidStrategy(
                "gamma sequences must have n entries".into(),
            ));
        }
        for t in 0..n {
            if self.gamma_noise[t].len() != t || self.gamma_output[t].len() != t {
                return Err(Error::InvalidStrategy(format!(
                    "gammas at t={} must have length {t}",
                    t + 1
                )));
            }
        }
        if self.dither_var.iter().any(|&k| !(k >= 0.0)) {
            return Err(Error::InvalidStrategy("K_Z must be >= 0".into()));
        }
        Ok(())
    }
}

/// `X = on_noise · (V - E V) + on_dither · xi` with `cov(xi) = dither_cov`, `xi` independent of `V`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearInput {
    pub on_noise: DMatrix<f64>,
    pub on_dither: DMatrix<f64>,
    pub dither_cov: DMatrix<f64>,
}

/// Any input law that is a linear function of noise and independent dither.
pub trait InputLaw {
    fn linear_input(&self) -> Result<LinearInput>;
}

impl InputLaw for CoverPombraStrategy {
    fn linear_input(&self) -> Result<LinearInput> {
        self.validate()?;
        let n = self.horizon();
        Ok(LinearInput {
            on_noise: self.feedback.clone(),
            on_dither: DMatrix::identity(n, n),
            dither_cov: self.dither_cov.clone(),
        })
    }
}

impl InputLaw for InnovationsFormStrategy {
    fn linear_input(&self) -> Result<LinearInput> {
        self.validate()?;
        let n = self.horizon();
        let mut on_noise = DMatrix::<f64>::zeros(n, n);
        let mut on_dither = DMatrix::<f64>::zeros(n, n);
        for t in 0..n {
            let mut xv = DMatrix::<f64>::zeros(1, n);
            let mut xz = DMatrix::<f64>::zeros(1, n);
            xz[(0, t)] = 1.0;
            for j in 0..t {
                xv[(0, j)] += self.gamma_noise[t][j];
                let g = self.gamma_output[t][j];
                if g != 0.0 {
                    // Y_j = X_j + V_j
                    xv += on_noise.rows(j, 1) * g;
                    xv[(0, j)] += g;
                    xz += on_dither.rows(j, 1) * g;
                }
            }
            on_noise.set_row(t, &xv.row(0));
            on_dither.set_row(t, &xz.row(0));
        }
        Ok(LinearInput {
            on_noise,
            on_dither,
            dither_cov: DMatrix::from_diagonal(&nalgebra::DVector::from_vec(
                self.dither_var.clone(),
            )),
        })
    }
}

/// Objective value (nats) and average power.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CpValue {
    pub value: f64,
    pub avg_power: f64,
}

fn check_noise_cov(k_v: &DMatrix<f64>, n: usize) -> Result<()> {
    if k_v.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "K_V is {:?}, strategy horizon is {n}",
            k_v.shape()
        )));
    }
    Ok(())
}

fn output_cov(
    k_v: &DMatrix<f64>,
    feedback: &DMatrix<f64>,
    dither_cov: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = k_v.nrows();
    let bi = feedback + DMatrix::<f64>::identity(n, n);
    symmetrize(&(&bi * k_v * bi.transpose() + dither_cov))
}

fn input_power(k_v: &DMatrix<f64>, feedback: &DMatrix<f64>, dither_cov: &DMatrix<f64>) -> f64 {
    let n = k_v.nrows() as f64;
    ((feedback * k_v * feedback.transpose()).trace() + dither_cov.trace()) / n
}

/// Matrix-form objective `½ log det K_Y / det K_V` and `(1/n) tr(B K_V Bᵀ + K_Z̄)`.
pub fn cp_objective(k_v: &DMatrix<f64>, s: &CoverPombraStrategy) -> Result<CpValue> {
    check_noise_cov(k_v, s.horizon())?;
    let ld_v = log_det_spd(k_v, "K_V")?;
    let ld_y = log_det_spd(&output_cov(k_v, &s.feedback, &s.dither_cov), "K_Y")?;
    Ok(CpValue {
        value: 0.5 * (ld_y - ld_v),
        avg_power: input_power(k_v, &s.feedback, &s.dither_cov),
    })
}

/// Best matrix-form strategy found under the power budget.
#[derive(Debug, Clone, PartialEq)]
pub struct CpOptimum {
    pub strategy: CoverPombraStrategy,
    pub value: f64,
    pub avg_power: f64,
    pub diagnostics: OptimizerDiagnostics,
}

/// Unconstrained parameters `(strict lower B, lower Cholesky factor L)` radially
/// scaled onto the power boundary `tr(B K_V Bᵀ + L Lᵀ) = n kappa`.
struct CpDecoder<'a> {
    k_v: &'a DMatrix<f64>,
    n: usize,
    kappa: f64,
    log_det_v: f64,
}

impl CpDecoder<'_> {
    fn n_feedback(&self) -> usize {
        self.n * (self.n - 1) / 2
    }

    fn dim(&self) -> usize {
        self.n_feedback() + self.n * (self.n + 1) / 2
    }

    fn decode(&self, x: &[f64]) -> Option<CoverPombraStrategy> {
        let n = self.n;
        let mut b = DMatrix::<f64>::zeros(n, n);
        let mut l = DMatrix::<f64>::zeros(n, n);
        let mut it = x.iter();
        for t in 1..n {
            for j in 0..t {
                b[(t, j)] = *it.next()?;
            }
        }
        for t in 0..n {
            for j in 0..=t {
                l[(t, j)] = *it.next()?;
            }
        }
        let raw = (&b * self.k_v * b.transpose()).trace() + l.norm_squared();
        if !(raw > 0.0 && raw.is_finite()) {
            return None;
        }
        let alpha = (n as f64 * self.kappa / raw).sqrt();
        b *= alpha;
        l *= alpha;
        Some(CoverPombraStrategy {
            feedback: b,
            dither_cov: &l * l.transpose(),
        })
    }

    fn objective(&self, x: &[f64]) -> f64 {
        let Some(s) = self.decode(x) else {
            return f64::NEG_INFINITY;
        };
        match log_det_spd(&output_cov(self.k_v, &s.feedback, &s.dither_cov), "K_Y") {
            Ok(ld) => 0.5 * (ld - self.log_det_v),
            Err(_) => f64::NEG_INFINITY,
        }
    }

    fn start(&self, i: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        let nb = self.n_feedback();
        if i == 0 {
            let mut pos = nb;
            for t in 0..self.n {
                pos += t;
                x[pos] = 1.0;
                pos += 1;
            }
        } else {
            for v in x.iter_mut() {
                *v = rng.sample::<f64, _>(StandardNormal);
            }
        }
        x
    }
}

/// [`cp_optimize_guarded`] with the default horizon guard.
pub fn cp_optimize(
    k_v: &DMatrix<f64>,
    cfg: &ChannelConfig,
    opts: &OptimizerOptions,
) -> Result<CpOptimum> {
    cp_optimize_guarded(k_v, cfg, opts, CP_MAX_HORIZON)
}

/// Multi-start maximization of [`cp_objective`] over `(B, K_Z̄)`, refusing horizons
/// above `max_n` (the parameter count grows quadratically).
pub fn cp_optimize_guarded(
    k_v: &DMatrix<f64>,
    cfg: &ChannelConfig,
    opts: &OptimizerOptions,
    max_n: usize,
) -> Result<CpOptimum> {
    let n = cfg.n;
    ChannelConfig::new(cfg.kappa, n)?;
    if n > max_n {
        return Err(Error::HorizonGuard { n, max: max_n });
    }
    check_noise_cov(k_v, n)?;
    let log_det_v = log_det_spd(k_v, "K_V")?;

    if cfg.kappa == 0.0 {
        return Ok(CpOptimum {
            strategy: CoverPombraStrategy::zero(n),
            value: 0.0,
            avg_power: 0.0,
            diagnostics: OptimizerDiagnostics::closed_form("zero-power"),
        });
    }
    if n == 1 {
        let s = CoverPombraStrategy {
            feedback: DMatrix::zeros(1, 1),
            dither_cov: DMatrix::from_element(1, 1, cfg.kappa),
        };
        let v = cp_objective(k_v, &s)?;
        return Ok(CpOptimum {
            strategy: s,
            value: v.value,
            avg_power: v.avg_power,
            diagnostics: OptimizerDiagnostics::closed_form("single-step"),
        });
    }

    let decoder = CpDecoder {
        k_v,
        n,
        kappa: cfg.kappa,
        log_det_v,
    };
    let objective = |x: &[f64]| decoder.objective(x);
    let runs = multi_start(&objective, opts, |i, rng| decoder.start(i, rng));
    let (idx, best) = runs
        .iter()
        .enumerate()
        .filter(|(_, r)| r.value.is_finite())
        .max_by(|(ia, a), (ib, b)| a.value.total_cmp(&b.value).then(ib.cmp(ia)))
        .ok_or_else(|| Error::Numerical("every restart failed".into()))?;
    let strategy = decoder.decode(&best.x).expect("finite objective decodes");
    let v = cp_objective(k_v, &strategy)?;
    Ok(CpOptimum {
        strategy,
        value: v.value,
        avg_power: v.avg_power,
        diagnostics: OptimizerDiagnostics {
            method: "multi-start".into(),
            iterations: runs[idx].iterations,
            grad_norm: runs[idx].grad_norm,
            restarts: runs.len(),
            restarts_converged: runs.iter().filter(|r| r.converged).count(),
            converged: runs[idx].converged,
        },
    })
}

/// Rewrites a sequential strategy as `X = B V + Z̄` by eliminating the outputs.
///
/// Both filters are linear, so `Ŝ_t`, `E[Ŝ_t | Y^{t-1}]`, `X_t` and `Y_t` are tracked
/// as coefficient rows on `(V^n, Z^n)`. The result gives the same joint law of
/// `(X^n, Y^n)`. `B` is strictly lower triangular by construction and
/// `K_Z̄ = D diag(K_Z) Dᵀ` with `D` unit lower triangular.
pub fn unroll_sequential(
    r: &PoSsRealization,
    s: &SequentialStrategy,
    noise: &NoiseFilterTrace,
) -> Result<CoverPombraStrategy> {
    let (n, ns) = (r.horizon, r.state_dim);
    let out = run_output_filter(r, noise, s)?;
    let width = 2 * n;
    // coefficient rows on (V_1..V_n, Z_1..Z_n)
    let mut est = DMatrix::<f64>::zeros(ns, width);
    let mut est_given_y = DMatrix::<f64>::zeros(ns, width);
    let mut x_rows = DMatrix::<f64>::zeros(n, width);
    for t in 0..n {
        let lam = s.lambda_row(t);
        let mut x = &lam * (&est - &est_given_y);
        x[(0, n + t)] += 1.0;
        let mut y = x.clone();
        y[(0, t)] += 1.0;
        x_rows.set_row(t, &x.row(0));
        if t + 1 < n {
            let c = &r.observation[t];
            let a = &r.transition[t];
            let mut noise_innov = -(c * &est);
            noise_innov[(0, t)] += 1.0;
            let out_innov = &y - c * &est_given_y;
            est = a * &est + &noise.gain[t] * noise_innov;
            est_given_y = a * &est_given_y + &out.gain[t] * out_innov;
        }
    }
    let mut feedback = x_rows.columns(0, n).into_owned();
    for t in 0..n {
        for j in t..n {
            feedback[(t, j)] = 0.0;
        }
    }
    let mixing = x_rows.columns(n, n).into_owned();
    let dz = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(s.dither_var.clone()));
    let dither_cov = symmetrize(&(&mixing * dz * mixing.transpose()));
    Ok(CoverPombraStrategy {
        feedback,
        dither_cov,
    })
}

/// Innovations-form strategy plus the steps whose conditioning block needed a ridge.
#[derive(Debug, Clone, PartialEq)]
pub struct InnovationsConversion {
    pub strategy: InnovationsFormStrategy,
    /// One-based steps where [`CONDITIONING_RIDGE`] was applied.
    pub ridged_steps: Vec<usize>,
}

/// Replaces the correlated dither `Z̄_t` by its innovation
/// `Z_t = Z̄_t - E[Z̄_t | V^{t-1}, Y^{t-1}]`, absorbing the conditional mean into
/// feedback gains on past noise and past outputs.
pub fn cp_to_innovations_form(
    k_v: &DMatrix<f64>,
    s: &CoverPombraStrategy,
) -> Result<InnovationsConversion> {
    s.validate()?;
    let n = s.horizon();
    check_noise_cov(k_v, n)?;
    log_det_spd(k_v, "K_V")?;
    let bi = &s.feedback + DMatrix::<f64>::identity(n, n);
    let cov_vy = k_v * bi.transpose();
    let cov_yy = output_cov(k_v, &s.feedback, &s.dither_cov);

    let mut gamma_noise = vec![Vec::new(); n];
    let mut gamma_output = vec![Vec::new(); n];
    let mut dither_var = vec![0.0; n];
    let mut ridged_steps = Vec::new();
    dither_var[0] = s.dither_cov[(0, 0)].max(0.0);
    for t in 1..n {
        let mut block = DMatrix::<f64>::zeros(2 * t, 2 * t);
        block
            .view_mut((0, 0), (t, t))
            .copy_from(&k_v.view((0, 0), (t, t)));
        block
            .view_mut((0, t), (t, t))
            .copy_from(&cov_vy.view((0, 0), (t, t)));
        block
            .view_mut((t, 0), (t, t))
            .copy_from(&cov_vy.view((0, 0), (t, t)).transpose());
        block
            .view_mut((t, t), (t, t))
            .copy_from(&cov_yy.view((0, 0), (t, t)));
        // cov(Z̄_t, V_j) = 0 and cov(Z̄_t, Y_j) = K_Z̄[t, j]
        let mut cross = DMatrix::<f64>::zeros(2 * t, 1);
        for j in 0..t {
            cross[(t + j, 0)] = s.dither_cov[(t, j)];
        }
        let (coef, ridged) = solve_spd_ridged(&block, &cross, CONDITIONING_RIDGE)?;
        if ridged {
            ridged_steps.push(t + 1);
        }
        gamma_noise[t] = (0..t).map(|j| s.feedback[(t, j)] + coef[(j, 0)]).collect();
        gamma_output[t] = (0..t).map(|j| coef[(t + j, 0)]).collect();
        let explained = (cross.transpose() * &coef)[(0, 0)];
        dither_var[t] = (s.dither_cov[(t, t)] - explained).max(0.0);
    }
    Ok(InnovationsConversion {
        strategy: InnovationsFormStrategy {
            gamma_noise,
            gamma_output,
            dither_var,
        },
        ridged_steps,
    })
}

/// Covariance of the stacked `(X^n, Y^n)` (`2n x 2n`).
pub fn joint_covariance(k_v: &DMatrix<f64>, law: &impl InputLaw) -> Result<DMatrix<f64>> {
    let lin = law.linear_input()?;
    let n = lin.on_noise.nrows();
    check_noise_cov(k_v, n)?;
    // (X, Y) = [P; P + I] V + [Q; Q] xi
    let mut on_v = DMatrix::<f64>::zeros(2 * n, n);
    on_v.view_mut((0, 0), (n, n)).copy_from(&lin.on_noise);
    on_v.view_mut((n, 0), (n, n))
        .copy_from(&(&lin.on_noise + DMatrix::<f64>::identity(n, n)));
    let mut on_xi = DMatrix::<f64>::zeros(2 * n, n);
    on_xi.view_mut((0, 0), (n, n)).copy_from(&lin.on_dither);
    on_xi.view_mut((n, 0), (n, n)).copy_from(&lin.on_dither);
    let cov = &on_v * k_v * on_v.transpose() + &on_xi * &lin.dither_cov * on_xi.transpose();
    Ok(symmetrize(&cov))
}
