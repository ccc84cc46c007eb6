//! Generalized Kalman filter of the noise `V^n` given its own past.
//!
//! `Sigma_t = cov(S_t | V^{t-1})` follows a Riccati difference equation with the
//! cross term `B_t K_W_t N_tᵀ`; the innovations `Î_t = V_t - C_t Ŝ_t` have variance
//! `K_Î_t = C_t Sigma_t C_tᵀ + R_t` and factor the noise entropy.

use std::f64::consts::{E, PI};
use std::io::Write;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::export::{fmt_num, matrix_header, push_matrix, vector_header};
use crate::linalg::{ensure_psd, row_quad, symmetrize};
use crate::model::PoSsRealization;

/// Relative tolerance for PSD checks on filter covariances.
pub const FILTER_PSD_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseFilterTrace {
    /// `Sigma_t` for `t = 1..n`, with `Sigma_1 = K_S1`.
    pub sigma: Vec<DMatrix<f64>>,
    /// Gains `M_t(Sigma_t)`, `n_s x 1`, for `t = 1..n-1`.
    pub gain: Vec<DMatrix<f64>>,
    /// `K_Î_t` for `t = 1..n`.
    pub innovation_var: Vec<f64>,
}

/// Result of one Riccati update.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseStep {
    pub sigma_next: DMatrix<f64>,
    pub gain: DMatrix<f64>,
    pub innovation_var: f64,
}

/// `K_Î_t = C_t Sigma_t C_tᵀ + N_t K_W_t N_tᵀ`.
pub fn noise_innovation_variance(r: &PoSsRealization, t: usize, sigma: &DMatrix<f64>) -> f64 {
    row_quad(&r.observation[t], sigma) + r.feedthrough_variance(t)
}

/// One step `Sigma_t -> Sigma_{t+1}` of the noise Riccati equation (zero-based `t < n-1`).
pub fn noise_riccati_step(
    r: &PoSsRealization,
    t: usize,
    sigma: &DMatrix<f64>,
) -> Result<NoiseStep> {
    if t + 1 >= r.horizon {
        return Err(Error::TimeIndex {
            t: t + 1,
            n: r.horizon,
        });
    }
    ensure_psd(sigma, FILTER_PSD_TOL, "Sigma_t")?;
    let a = &r.transition[t];
    let c = &r.observation[t];
    let b = &r.state_gain[t];
    let kw = &r.driver_cov[t];

    let innovation_var = noise_innovation_variance(r, t, sigma);
    if !(innovation_var > 0.0) {
        return Err(Error::Numerical(format!(
            "innovation variance {innovation_var:.3e} not positive at t={}",
            t + 1
        )));
    }
    let cross = a * sigma * c.transpose() + r.cross_term(t);
    let gain = &cross / innovation_var;
    // Joseph form: a sum of PSD terms, so rounding cannot push it indefinite
    let closed = a - &gain * c;
    let leak = b - &gain * &r.feedthrough[t];
    let next = &closed * sigma * closed.transpose() + &leak * kw * leak.transpose();
    Ok(NoiseStep {
        sigma_next: symmetrize(&next),
        gain,
        innovation_var,
    })
}

/// Runs the noise filter from `Sigma_1 = K_S1` over the whole horizon.
pub fn run_noise_filter(r: &PoSsRealization) -> Result<NoiseFilterTrace> {
    r.ensure_valid()?;
    let n = r.horizon;
    let mut sigma = Vec::with_capacity(n);
    let mut gain = Vec::with_capacity(n.saturating_sub(1));
    let mut innovation_var = Vec::with_capacity(n);
    let mut current = symmetrize(&r.initial_cov);
    for t in 0..n {
        if t + 1 < n {
            let step = noise_riccati_step(r, t, &current)?;
            sigma.push(std::mem::replace(&mut current, step.sigma_next));
            gain.push(step.gain);
            innovation_var.push(step.innovation_var);
        } else {
            innovation_var.push(noise_innovation_variance(r, t, &current));
            sigma.push(current.clone());
        }
    }
    Ok(NoiseFilterTrace {
        sigma,
        gain,
        innovation_var,
    })
}

/// `H(V^n)` in nats with its per-step terms `H(Î_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseEntropy {
    pub total: f64,
    pub per_step: Vec<f64>,
}

/// Differential entropy of a scalar Gaussian with variance `var`, in nats.
pub fn gaussian_entropy(var: f64) -> f64 {
    0.5 * (2.0 * PI * E * var).ln()
}

pub fn noise_entropy(trace: &NoiseFilterTrace) -> NoiseEntropy {
    let per_step: Vec<f64> = trace
        .innovation_var
        .iter()
        .map(|&k| gaussian_entropy(k))
        .collect();
    NoiseEntropy {
        total: per_step.iter().sum(),
        per_step,
    }
}

impl NoiseFilterTrace {
    pub fn horizon(&self) -> usize {
        self.innovation_var.len()
    }

    /// `sum_t log K_Î_t`, which equals `log det K_{V^n}`.
    pub fn log_det(&self) -> f64 {
        self.innovation_var.iter().map(|k| k.ln()).sum()
    }

    /// CSV with columns `t, Sigma_i_j..., M_i..., K_Ihat`; `M` is blank at the last step.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let ns = self.sigma.first().map_or(0, |s| s.nrows());
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend(matrix_header("Sigma", ns, ns));
        header.extend(vector_header("M", ns));
        header.push("K_Ihat".into());
        w.write_record(&header)?;
        for t in 0..self.horizon() {
            let mut rec = vec![(t + 1).to_string()];
            push_matrix(&mut rec, &self.sigma[t]);
            match self.gain.get(t) {
                Some(m) => push_matrix(&mut rec, m),
                None => rec.extend(std::iter::repeat_n(String::new(), ns)),
            }
            rec.push(fmt_num(self.innovation_var[t]));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}
