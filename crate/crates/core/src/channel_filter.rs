//! Kalman filter of the sufficient statistic given the channel output.
//!
//! Under the input law `X_t = Lambda_t (Ŝ_t - E[Ŝ_t | Y^{t-1}]) + Z_t`, the error
//! covariance `K_t = cov(Ŝ_t | Y^{t-1})` obeys a second Riccati equation driven by
//! the noise filter through `M_t` and `K_Î_t`. The output innovations
//! `I_t = Y_t - E[Y_t | Y^{t-1}]` have variance
//! `K_I_t = (Lambda_t + C_t) K_t (Lambda_t + C_t)ᵀ + K_Î_t + K_Z_t`.
//!
//! The same recursion, with the noise-filter coupling replaced by the raw driver
//! terms, describes an encoder that observes the true state `S_t`; see
//! [`StateInformation::Perfect`].

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::export::{fmt_num, matrix_header, push_matrix};
use crate::linalg::{ensure_psd, row_quad, symmetrize};
use crate::model::PoSsRealization;
use crate::noise_filter::{NoiseFilterTrace, FILTER_PSD_TOL};

/// Per-step parameters `(Lambda_t, K_Z_t)` of the sufficient-statistic input law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequentialStrategy {
    /// `Lambda_t` as a length-`n_s` row, `t = 1..n`.
    pub lambda: Vec<Vec<f64>>,
    /// `K_Z_t >= 0`, `t = 1..n`.
    pub dither_var: Vec<f64>,
}

impl SequentialStrategy {
    pub fn zero(n: usize, state_dim: usize) -> Self {
        Self {
            lambda: vec![vec![0.0; state_dim]; n],
            dither_var: vec![0.0; n],
        }
    }

    /// `Lambda = 0` with the whole budget spread uniformly over the dither.
    pub fn no_feedback(n: usize, state_dim: usize, kappa: f64) -> Self {
        Self {
            lambda: vec![vec![0.0; state_dim]; n],
            dither_var: vec![kappa; n],
        }
    }

    pub fn constant(n: usize, lambda: &[f64], dither_var: f64) -> Self {
        Self {
            lambda: vec![lambda.to_vec(); n],
            dither_var: vec![dither_var; n],
        }
    }

    pub fn horizon(&self) -> usize {
        self.dither_var.len()
    }

    pub fn lambda_row(&self, t: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(1, self.lambda[t].len(), &self.lambda[t])
    }

    /// Frobenius norm of the stacked `Lambda_t`.
    pub fn lambda_norm(&self) -> f64 {
        self.lambda
            .iter()
            .flat_map(|row| row.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn validate(&self, n: usize, state_dim: usize) -> Result<()> {
        if self.lambda.len() != n || self.dither_var.len() != n {
            return Err(Error::InvalidStrategy(format!(
                "expected {n} steps, got {} gains and {} dither variances",
                self.lambda.len(),
                self.dither_var.len()
            )));
        }
        for (t, row) in self.lambda.iter().enumerate() {
            if row.len() != state_dim {
                return Err(Error::InvalidStrategy(format!(
                    "Lambda at t={} has length {}, expected {state_dim}",
                    t + 1,
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidStrategy(format!(
                    "Lambda at t={} not finite",
                    t + 1
                )));
            }
        }
        for (t, &kz) in self.dither_var.iter().enumerate() {
            if !(kz >= 0.0 && kz.is_finite()) {
                return Err(Error::InvalidStrategy(format!(
                    "K_Z at t={} must be finite and >= 0, got {kz}",
                    t + 1
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputFilterTrace {
    /// `K_t` for `t = 1..n`, `K_1 = 0`.
    pub k: Vec<DMatrix<f64>>,
    /// Gains `F_t(Sigma_t, K_t)`, `n_s x 1`, for `t = 1..n-1`.
    pub gain: Vec<DMatrix<f64>>,
    /// `K_I_t` for `t = 1..n`.
    pub innovation_var: Vec<f64>,
    /// `E[X_t²] = Lambda_t K_t Lambda_tᵀ + K_Z_t`.
    pub power: Vec<f64>,
}

/// Which state the encoder feeds back.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateInformation {
    /// The noise-filter estimate `Ŝ_t = E[S_t | V^{t-1}]`.
    Estimated,
    /// The true noise state `S_t`.
    Perfect,
}

/// Result of one output-filter update.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputStep {
    /// `K_{t+1}`; `None` at the final step.
    pub k_next: Option<DMatrix<f64>>,
    /// `F_t`; `None` at the final step.
    pub gain: Option<DMatrix<f64>>,
    pub innovation_var: f64,
}

/// Coupling terms of the output recursion at one step.
///
/// The noise enters as `injection · w` into the tracked state and `feed · w` into
/// `Y_t`, with `cov(w) = injection_cov`.
struct Coupling<'a> {
    transition: Option<&'a DMatrix<f64>>,
    observation: &'a DMatrix<f64>,
    injection: DMatrix<f64>,
    injection_cov: DMatrix<f64>,
    feed: DMatrix<f64>,
}

fn coupled_update(
    cp: &Coupling<'_>,
    k: &DMatrix<f64>,
    lambda: &DMatrix<f64>,
    dither_var: f64,
) -> Result<OutputStep> {
    let effective = lambda + cp.observation;
    let noise_var = row_quad(&cp.feed, &cp.injection_cov);
    let innovation_var = row_quad(&effective, k) + noise_var + dither_var;
    if !(innovation_var > 0.0 && innovation_var.is_finite()) {
        return Err(Error::Numerical(format!(
            "output innovation variance {innovation_var:.3e} not positive"
        )));
    }
    let Some(a) = cp.transition else {
        return Ok(OutputStep {
            k_next: None,
            gain: None,
            innovation_var,
        });
    };
    let cross =
        a * k * effective.transpose() + &cp.injection * &cp.injection_cov * cp.feed.transpose();
    let gain = &cross / innovation_var;
    // Joseph form, PSD by construction
    let closed = a - &gain * &effective;
    let leak = &cp.injection - &gain * &cp.feed;
    let next = &closed * k * closed.transpose()
        + &leak * &cp.injection_cov * leak.transpose()
        + &gain * gain.transpose() * dither_var;
    Ok(OutputStep {
        k_next: Some(symmetrize(&next)),
        gain: Some(gain),
        innovation_var,
    })
}

fn estimated_coupling<'a>(
    r: &'a PoSsRealization,
    t: usize,
    gain: Option<&DMatrix<f64>>,
    noise_var: f64,
) -> Coupling<'a> {
    Coupling {
        transition: r.transition.get(t),
        observation: &r.observation[t],
        injection: gain
            .cloned()
            .unwrap_or_else(|| DMatrix::zeros(r.state_dim, 1)),
        injection_cov: DMatrix::from_element(1, 1, noise_var),
        feed: DMatrix::from_element(1, 1, 1.0),
    }
}

fn perfect_coupling(r: &PoSsRealization, t: usize) -> Coupling<'_> {
    Coupling {
        transition: r.transition.get(t),
        observation: &r.observation[t],
        injection: r
            .state_gain
            .get(t)
            .cloned()
            .unwrap_or_else(|| DMatrix::zeros(r.state_dim, r.driver_dim)),
        injection_cov: r.driver_cov[t].clone(),
        feed: r.feedthrough[t].clone(),
    }
}

/// One step `K_t -> K_{t+1}` of the output Riccati equation (zero-based `t`).
///
/// `gain` is the noise-filter gain `M_t` (absent at the final step, where only
/// `K_I_t` is produced) and `noise_var` is `K_Î_t`.
#[allow(clippy::too_many_arguments)]
pub fn output_riccati_step(
    r: &PoSsRealization,
    t: usize,
    k: &DMatrix<f64>,
    gain: Option<&DMatrix<f64>>,
    noise_var: f64,
    lambda: &DMatrix<f64>,
    dither_var: f64,
) -> Result<OutputStep> {
    if t >= r.horizon {
        return Err(Error::TimeIndex {
            t: t + 1,
            n: r.horizon,
        });
    }
    ensure_psd(k, FILTER_PSD_TOL, "K_t")?;
    if (t + 1 < r.horizon) != gain.is_some() {
        return Err(Error::InvalidStrategy(
            "noise gain M_t is required exactly for t < n".into(),
        ));
    }
    coupled_update(
        &estimated_coupling(r, t, gain, noise_var),
        k,
        lambda,
        dither_var,
    )
}

/// Output recursion advanced one step at a time, so a caller can pick
/// `(Lambda_t, K_Z_t)` after seeing `K_t`.
pub struct OutputRecursion<'a> {
    r: &'a PoSsRealization,
    noise: &'a NoiseFilterTrace,
    info: StateInformation,
    t: usize,
    k: DMatrix<f64>,
}

/// What one call to [`OutputRecursion::advance`] produced.
#[derive(Debug, Clone)]
pub struct AdvanceOutcome {
    pub k: DMatrix<f64>,
    pub gain: Option<DMatrix<f64>>,
    pub innovation_var: f64,
    pub power: f64,
    /// `½ log(K_I_t / K_Î_t)`.
    pub rate: f64,
}

impl<'a> OutputRecursion<'a> {
    pub fn new(
        r: &'a PoSsRealization,
        noise: &'a NoiseFilterTrace,
        info: StateInformation,
    ) -> Self {
        let k = match info {
            StateInformation::Estimated => DMatrix::zeros(r.state_dim, r.state_dim),
            StateInformation::Perfect => symmetrize(&r.initial_cov),
        };
        Self {
            r,
            noise,
            info,
            t: 0,
            k,
        }
    }

    /// Zero-based index of the next step.
    pub fn t(&self) -> usize {
        self.t
    }

    pub fn current_k(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn advance(&mut self, lambda: &DMatrix<f64>, dither_var: f64) -> Result<AdvanceOutcome> {
        let t = self.t;
        if t >= self.r.horizon {
            return Err(Error::TimeIndex {
                t: t + 1,
                n: self.r.horizon,
            });
        }
        let coupling = match self.info {
            StateInformation::Estimated => estimated_coupling(
                self.r,
                t,
                self.noise.gain.get(t),
                self.noise.innovation_var[t],
            ),
            StateInformation::Perfect => perfect_coupling(self.r, t),
        };
        let step = coupled_update(&coupling, &self.k, lambda, dither_var)?;
        let power = row_quad(lambda, &self.k) + dither_var;
        let k_t = match step.k_next {
            Some(next) => std::mem::replace(&mut self.k, next),
            None => self.k.clone(),
        };
        self.t += 1;
        Ok(AdvanceOutcome {
            k: k_t,
            gain: step.gain,
            innovation_var: step.innovation_var,
            power,
            rate: 0.5 * (step.innovation_var / self.noise.innovation_var[t]).ln(),
        })
    }
}

pub(crate) fn run_with_information(
    r: &PoSsRealization,
    noise: &NoiseFilterTrace,
    s: &SequentialStrategy,
    info: StateInformation,
) -> Result<(OutputFilterTrace, Vec<f64>)> {
    s.validate(r.horizon, r.state_dim)?;
    if noise.horizon() != r.horizon {
        return Err(Error::Dimension(format!(
            "noise trace has {} steps, model has {}",
            noise.horizon(),
            r.horizon
        )));
    }
    let n = r.horizon;
    let mut rec = OutputRecursion::new(r, noise, info);
    let mut trace = OutputFilterTrace {
        k: Vec::with_capacity(n),
        gain: Vec::with_capacity(n.saturating_sub(1)),
        innovation_var: Vec::with_capacity(n),
        power: Vec::with_capacity(n),
    };
    let mut rates = Vec::with_capacity(n);
    for t in 0..n {
        let out = rec.advance(&s.lambda_row(t), s.dither_var[t])?;
        trace.k.push(out.k);
        if let Some(g) = out.gain {
            trace.gain.push(g);
        }
        trace.innovation_var.push(out.innovation_var);
        trace.power.push(out.power);
        rates.push(out.rate);
    }
    Ok((trace, rates))
}

/// Runs the output filter from `K_1 = 0` under strategy `s`.
pub fn run_output_filter(
    r: &PoSsRealization,
    noise: &NoiseFilterTrace,
    s: &SequentialStrategy,
) -> Result<OutputFilterTrace> {
    run_with_information(r, noise, s, StateInformation::Estimated).map(|(trace, _)| trace)
}

impl OutputFilterTrace {
    pub fn horizon(&self) -> usize {
        self.innovation_var.len()
    }

    /// Per-step rates `½ log(K_I_t / K_Î_t)`.
    pub fn rates(&self, noise: &NoiseFilterTrace) -> Vec<f64> {
        self.innovation_var
            .iter()
            .zip(&noise.innovation_var)
            .map(|(ki, kh)| 0.5 * (ki / kh).ln())
            .collect()
    }

    /// CSV with columns `t, K_i_j..., K_I, power`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let ns = self.k.first().map_or(0, |k| k.nrows());
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend(matrix_header("K", ns, ns));
        header.push("K_I".into());
        header.push("power".into());
        w.write_record(&header)?;
        for t in 0..self.horizon() {
            let mut rec = vec![(t + 1).to_string()];
            push_matrix(&mut rec, &self.k[t]);
            rec.push(fmt_num(self.innovation_var[t]));
            rec.push(fmt_num(self.power[t]));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_arma11, white_noise};
    use crate::noise_filter::run_noise_filter;
    use approx::assert_abs_diff_eq;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn zero_input_keeps_k_at_zero() {
        let r = build_arma11(0.5, 0.1, 1.0, 3);
        let noise = run_noise_filter(&r).unwrap();
        let m = &noise.gain[0];
        let step = output_riccati_step(
            &r,
            0,
            &scalar(0.0),
            Some(m),
            noise.innovation_var[0],
            &scalar(0.0),
            0.0,
        )
        .unwrap();
        assert_abs_diff_eq!(step.k_next.unwrap()[(0, 0)], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn pure_dither_step() {
        let r = build_arma11(0.5, 0.1, 1.0, 3);
        let noise = run_noise_filter(&r).unwrap();
        let m = noise.gain[0][(0, 0)];
        let kh = noise.innovation_var[0];
        let kappa = 0.7;
        let step = output_riccati_step(
            &r,
            0,
            &scalar(0.0),
            Some(&noise.gain[0]),
            kh,
            &scalar(0.0),
            kappa,
        )
        .unwrap();
        let expected = m * m * kh * kappa / (kh + kappa);
        assert_abs_diff_eq!(step.k_next.unwrap()[(0, 0)], expected, epsilon = 1e-14);
        assert_abs_diff_eq!(step.innovation_var, kh + kappa, epsilon = 1e-14);
    }

    #[test]
    fn innovation_var_ignores_lambda_when_k_is_zero() {
        let r = build_arma11(0.5, 0.1, 1.0, 3);
        let noise = run_noise_filter(&r).unwrap();
        let kh = noise.innovation_var[1];
        for lam in [-3.0, 0.0, 2.5] {
            let step = output_riccati_step(
                &r,
                1,
                &scalar(0.0),
                Some(&noise.gain[1]),
                kh,
                &scalar(lam),
                0.4,
            )
            .unwrap();
            assert_abs_diff_eq!(step.innovation_var, kh + 0.4, epsilon = 1e-14);
        }
    }

    #[test]
    fn rejects_non_psd_k() {
        let r = build_arma11(0.5, 0.1, 1.0, 3);
        let noise = run_noise_filter(&r).unwrap();
        let res = output_riccati_step(
            &r,
            0,
            &scalar(-0.5),
            Some(&noise.gain[0]),
            1.0,
            &scalar(0.0),
            0.0,
        );
        assert!(matches!(res, Err(Error::NotPsd { .. })));
    }

    #[test]
    fn zero_strategy_trace() {
        let r = build_arma11(0.8, -0.3, 1.0, 6);
        let noise = run_noise_filter(&r).unwrap();
        let trace = run_output_filter(&r, &noise, &SequentialStrategy::zero(6, 1)).unwrap();
        for t in 0..6 {
            assert!(trace.k[t][(0, 0)].abs() < 1e-12);
            assert_abs_diff_eq!(
                trace.innovation_var[t],
                noise.innovation_var[t],
                epsilon = 1e-12
            );
            assert_eq!(trace.power[t], 0.0);
        }
        assert_eq!(trace.k[0][(0, 0)], 0.0);
    }

    #[test]
    fn white_noise_collapses_k() {
        let r = white_noise(1.0, 5);
        let noise = run_noise_filter(&r).unwrap();
        let s = SequentialStrategy {
            lambda: vec![vec![3.0], vec![-1.0], vec![2.0], vec![0.5], vec![9.0]],
            dither_var: vec![0.1, 0.2, 0.3, 0.4, 0.5],
        };
        let trace = run_output_filter(&r, &noise, &s).unwrap();
        for t in 0..5 {
            assert_eq!(trace.k[t][(0, 0)], 0.0);
            assert_abs_diff_eq!(trace.power[t], s.dither_var[t], epsilon = 1e-15);
        }
    }

    #[test]
    fn strategy_validation() {
        let mut s = SequentialStrategy::zero(3, 1);
        s.dither_var[1] = -0.1;
        assert!(s.validate(3, 1).is_err());
        assert!(SequentialStrategy::zero(2, 1).validate(3, 1).is_err());
        assert!(SequentialStrategy::zero(3, 2).validate(3, 1).is_err());
    }

    #[test]
    fn perfect_information_starts_from_initial_covariance() {
        let r = build_arma11(0.5, 0.1, 1.0, 2);
        let noise = run_noise_filter(&r).unwrap();
        let rec = OutputRecursion::new(&r, &noise, StateInformation::Perfect);
        assert_abs_diff_eq!(rec.current_k()[(0, 0)], 1.0 / 0.75, epsilon = 1e-15);
    }

    #[test]
    fn csv_header() {
        let r = build_arma11(0.5, 0.1, 1.0, 2);
        let noise = run_noise_filter(&r).unwrap();
        let trace =
            run_output_filter(&r, &noise, &SequentialStrategy::constant(2, &[1.0], 0.5)).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf)
            .unwrap()
            .starts_with("t,K_1_1,K_I,power\n"));
    }
}
