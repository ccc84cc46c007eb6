//! Partially observable state-space (PO-SS) noise realizations.
//!
//! The noise driving the channel is generated by
//!
//! ```text
//! S_{t+1} = A_t S_t + B_t W_t,      t = 1..n-1
//! V_t     = C_t S_t + N_t W_t,      t = 1..n
//! S_1 ~ N(mu_S1, K_S1),  W_t ~ N(0, K_W_t) independent
//! ```
//!
//! with scalar output `V_t`. Internally time is zero-based: index `t` in code
//! is step `t + 1` of the model, and every message shown to users is one-based.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, symmetrize};

/// Tolerance for PSD and symmetry checks on user-supplied covariances.
pub const PSD_TOL: f64 = 1e-10;

/// Time-varying PO-SS noise realization with scalar output.
#[derive(Debug, Clone, PartialEq)]
pub struct PoSsRealization {
    /// Horizon `n`.
    pub horizon: usize,
    /// State dimension `n_s`.
    pub state_dim: usize,
    /// Driver dimension `n_w`.
    pub driver_dim: usize,
    /// `A_t`, `n_s x n_s`, one per step `1..n-1`.
    pub transition: Vec<DMatrix<f64>>,
    /// `B_t`, `n_s x n_w`, one per step `1..n-1`.
    pub state_gain: Vec<DMatrix<f64>>,
    /// `C_t`, `1 x n_s`, one per step `1..n`.
    pub observation: Vec<DMatrix<f64>>,
    /// `N_t`, `1 x n_w`, one per step `1..n`.
    pub feedthrough: Vec<DMatrix<f64>>,
    /// `K_W_t`, `n_w x n_w`, one per step `1..n`.
    pub driver_cov: Vec<DMatrix<f64>>,
    /// `mu_S1`.
    pub initial_mean: DVector<f64>,
    /// `K_S1`.
    pub initial_cov: DMatrix<f64>,
    /// Set when no stationary initial law exists and `K_S1` was set to zero.
    pub unstable_init: bool,
}

/// A single time-invariant set of PO-SS matrices, realized over any horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeInvariantModel {
    pub transition: DMatrix<f64>,
    pub state_gain: DMatrix<f64>,
    pub observation: DMatrix<f64>,
    pub feedthrough: DMatrix<f64>,
    pub driver_cov: DMatrix<f64>,
    pub initial_mean: DVector<f64>,
    pub initial_cov: DMatrix<f64>,
    pub unstable_init: bool,
}

impl TimeInvariantModel {
    pub fn state_dim(&self) -> usize {
        self.transition.nrows()
    }

    pub fn driver_dim(&self) -> usize {
        self.driver_cov.nrows()
    }

    /// Repeats the matrices over `n` steps.
    pub fn realize(&self, n: usize) -> PoSsRealization {
        let steps = n.saturating_sub(1);
        PoSsRealization {
            horizon: n,
            state_dim: self.state_dim(),
            driver_dim: self.driver_dim(),
            transition: vec![self.transition.clone(); steps],
            state_gain: vec![self.state_gain.clone(); steps],
            observation: vec![self.observation.clone(); n],
            feedthrough: vec![self.feedthrough.clone(); n],
            driver_cov: vec![self.driver_cov.clone(); n],
            initial_mean: self.initial_mean.clone(),
            initial_cov: self.initial_cov.clone(),
            unstable_init: self.unstable_init,
        }
    }
}

impl PoSsRealization {
    pub fn n(&self) -> usize {
        self.horizon
    }

    /// `R_t = N_t K_W_t N_tᵀ`.
    pub fn feedthrough_variance(&self, t: usize) -> f64 {
        let n = &self.feedthrough[t];
        (n * &self.driver_cov[t] * n.transpose())[(0, 0)]
    }

    /// `B_t K_W_t N_tᵀ`, the state/observation noise cross term (`n_s x 1`).
    pub fn cross_term(&self, t: usize) -> DMatrix<f64> {
        &self.state_gain[t] * &self.driver_cov[t] * self.feedthrough[t].transpose()
    }

    /// Returns the time-invariant matrices when every step carries the same values.
    pub fn as_time_invariant(&self) -> Option<TimeInvariantModel> {
        if self.horizon < 2 {
            return None;
        }
        let same = |v: &[DMatrix<f64>]| v.windows(2).all(|w| w[0] == w[1]);
        if !(same(&self.transition)
            && same(&self.state_gain)
            && same(&self.observation)
            && same(&self.feedthrough)
            && same(&self.driver_cov))
        {
            return None;
        }
        Some(TimeInvariantModel {
            transition: self.transition[0].clone(),
            state_gain: self.state_gain[0].clone(),
            observation: self.observation[0].clone(),
            feedthrough: self.feedthrough[0].clone(),
            driver_cov: self.driver_cov[0].clone(),
            initial_mean: self.initial_mean.clone(),
            initial_cov: self.initial_cov.clone(),
            unstable_init: self.unstable_init,
        })
    }

    /// Keeps the first `n` steps.
    pub fn truncate(&self, n: usize) -> Result<PoSsRealization> {
        if n == 0 || n > self.horizon {
            return Err(Error::InvalidConfig(format!(
                "cannot truncate a horizon-{} model to {n} steps",
                self.horizon
            )));
        }
        let mut out = self.clone();
        out.horizon = n;
        out.transition.truncate(n - 1);
        out.state_gain.truncate(n - 1);
        out.observation.truncate(n);
        out.feedthrough.truncate(n);
        out.driver_cov.truncate(n);
        Ok(out)
    }

    /// Errors unless [`validate_realization`] reports no violations.
    pub fn ensure_valid(&self) -> Result<()> {
        let report = validate_realization(self);
        if report.is_ok() {
            Ok(())
        } else {
            Err(Error::InvalidRealization(report.to_string()))
        }
    }
}

/// Average power budget and horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub kappa: f64,
    pub n: usize,
}

impl ChannelConfig {
    pub fn new(kappa: f64, n: usize) -> Result<Self> {
        if !(kappa >= 0.0 && kappa.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "power budget must be finite and >= 0, got {kappa}"
            )));
        }
        if n == 0 {
            return Err(Error::InvalidConfig("horizon must be >= 1".into()));
        }
        Ok(Self { kappa, n })
    }
}

/// One failed invariant. `t` is one-based when present.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub field: &'static str,
    pub t: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.t {
            Some(t) => write!(f, "{} at t={}: {}", self.field, t, self.message),
            None => write!(f, "{}: {}", self.field, self.message),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    /// Violations concerning `field`.
    pub fn for_field<'a>(&'a self, field: &'a str) -> impl Iterator<Item = &'a Violation> + 'a {
        self.violations.iter().filter(move |v| v.field == field)
    }

    fn push(&mut self, field: &'static str, t: Option<usize>, message: impl Into<String>) {
        self.violations.push(Violation {
            field,
            t,
            message: message.into(),
        });
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_ok() {
            return write!(f, "ok");
        }
        let parts: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        write!(f, "{}", parts.join("; "))
    }
}

fn check_shape(
    report: &mut ValidationReport,
    field: &'static str,
    t: Option<usize>,
    m: &DMatrix<f64>,
    rows: usize,
    cols: usize,
) -> bool {
    if m.nrows() != rows || m.ncols() != cols {
        report.push(
            field,
            t,
            format!("expected {rows}x{cols}, got {}x{}", m.nrows(), m.ncols()),
        );
        return false;
    }
    if m.iter().any(|v| !v.is_finite()) {
        report.push(field, t, "non-finite entry");
        return false;
    }
    true
}

fn check_psd(
    report: &mut ValidationReport,
    field: &'static str,
    t: Option<usize>,
    m: &DMatrix<f64>,
) {
    let asym = (m - m.transpose()).amax();
    if asym > PSD_TOL * m.amax().max(1.0) {
        report.push(field, t, format!("not symmetric (asymmetry {asym:.3e})"));
    }
    let min_eig = min_eigenvalue(&symmetrize(m));
    if min_eig < -PSD_TOL {
        report.push(field, t, format!("not PSD (min eigenvalue {min_eig:.6e})"));
    }
}

/// Checks every structural and positivity invariant of `r`.
///
/// Violations are collected, not raised; the report is empty iff `r` is valid.
pub fn validate_realization(r: &PoSsRealization) -> ValidationReport {
    let mut report = ValidationReport::default();
    let (n, ns, nw) = (r.horizon, r.state_dim, r.driver_dim);
    if n == 0 {
        report.push("n", None, "horizon must be positive");
    }
    if ns == 0 {
        report.push("n_s", None, "state dimension must be positive");
    }
    if nw == 0 {
        report.push("n_w", None, "driver dimension must be positive");
    }
    let steps = n.saturating_sub(1);
    let lens: [(&'static str, usize, usize); 5] = [
        ("A", r.transition.len(), steps),
        ("B", r.state_gain.len(), steps),
        ("C", r.observation.len(), n),
        ("N", r.feedthrough.len(), n),
        ("K_W", r.driver_cov.len(), n),
    ];
    let mut lengths_ok = true;
    for (field, got, want) in lens {
        if got != want {
            report.push(field, None, format!("expected {want} matrices, got {got}"));
            lengths_ok = false;
        }
    }
    if r.initial_mean.len() != ns {
        report.push(
            "mu_S1",
            None,
            format!("expected length {ns}, got {}", r.initial_mean.len()),
        );
    }
    if check_shape(&mut report, "K_S1", None, &r.initial_cov, ns, ns) {
        check_psd(&mut report, "K_S1", None, &r.initial_cov);
    }
    if !lengths_ok {
        return report;
    }
    for t in 0..steps {
        check_shape(&mut report, "A", Some(t + 1), &r.transition[t], ns, ns);
        check_shape(&mut report, "B", Some(t + 1), &r.state_gain[t], ns, nw);
    }
    for t in 0..n {
        check_shape(&mut report, "C", Some(t + 1), &r.observation[t], 1, ns);
        let n_ok = check_shape(&mut report, "N", Some(t + 1), &r.feedthrough[t], 1, nw);
        let kw_ok = check_shape(&mut report, "K_W", Some(t + 1), &r.driver_cov[t], nw, nw);
        if kw_ok {
            check_psd(&mut report, "K_W", Some(t + 1), &r.driver_cov[t]);
        }
        if n_ok && kw_ok {
            let rt = r.feedthrough_variance(t);
            if !(rt > 0.0) {
                report.push(
                    "R",
                    Some(t + 1),
                    format!("R_t = N K_W Nᵀ not positive ({rt:.6e})"),
                );
            }
        }
    }
    report
}

/// ARMA(1,1) noise `V_t = c V_{t-1} + W_t - a W_{t-1}` in state-space form
/// `S_{t+1} = c S_t + W_t`, `V_t = (c - a) S_t + W_t`.
///
/// The initial state is stationary when `|c| < 1`; otherwise it is deterministic
/// (`K_S1 = 0`) and `unstable_init` is set.
pub fn arma11_time_invariant(c: f64, a: f64, sigma_w: f64) -> TimeInvariantModel {
    let kw = sigma_w * sigma_w;
    let (k_s1, unstable_init) = if c.abs() < 1.0 {
        (kw / (1.0 - c * c), false)
    } else {
        (0.0, true)
    };
    TimeInvariantModel {
        transition: DMatrix::from_element(1, 1, c),
        state_gain: DMatrix::from_element(1, 1, 1.0),
        observation: DMatrix::from_element(1, 1, c - a),
        feedthrough: DMatrix::from_element(1, 1, 1.0),
        driver_cov: DMatrix::from_element(1, 1, kw),
        initial_mean: DVector::zeros(1),
        initial_cov: DMatrix::from_element(1, 1, k_s1),
        unstable_init,
    }
}

pub fn build_arma11(c: f64, a: f64, sigma_w: f64, n: usize) -> PoSsRealization {
    arma11_time_invariant(c, a, sigma_w).realize(n)
}

/// White noise with variance `sigma2`: a one-dimensional state that never
/// reaches the output.
pub fn white_noise(sigma2: f64, n: usize) -> PoSsRealization {
    TimeInvariantModel {
        transition: DMatrix::zeros(1, 1),
        state_gain: DMatrix::zeros(1, 1),
        observation: DMatrix::zeros(1, 1),
        feedthrough: DMatrix::from_element(1, 1, 1.0),
        driver_cov: DMatrix::from_element(1, 1, sigma2),
        initial_mean: DVector::zeros(1),
        initial_cov: DMatrix::zeros(1, 1),
        unstable_init: false,
    }
    .realize(n)
}

/// Per-step gains of two independent drivers,
/// `B_t W_t = B¹_t W¹_t + B²_t W²_t` and `N_t W_t = N¹_t W¹_t + N²_t W²_t`.
#[derive(Debug, Clone)]
pub struct TwoDriverSplit {
    /// `(B¹_t, B²_t)` for steps `1..n-1`.
    pub state_gains: Vec<(DMatrix<f64>, DMatrix<f64>)>,
    /// `(N¹_t, N²_t)` for steps `1..n`.
    pub feedthroughs: Vec<(DMatrix<f64>, DMatrix<f64>)>,
}

impl TwoDriverSplit {
    pub fn constant(
        b1: DMatrix<f64>,
        b2: DMatrix<f64>,
        n1: DMatrix<f64>,
        n2: DMatrix<f64>,
        n: usize,
    ) -> Self {
        Self {
            state_gains: vec![(b1, b2); n.saturating_sub(1)],
            feedthroughs: vec![(n1, n2); n],
        }
    }
}

fn hstack(left: &DMatrix<f64>, right: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(left.nrows(), left.ncols() + right.ncols());
    out.view_mut((0, 0), left.shape()).copy_from(left);
    out.view_mut((0, left.ncols()), right.shape())
        .copy_from(right);
    out
}

fn block_diag(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols() + b.ncols());
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut(a.shape(), b.shape()).copy_from(b);
    out
}

/// Replaces the driver of `base` by two independent copies of it, mixed through
/// the gains in `split`. Keeps `A`, `C` and the initial state of `base`;
/// the new driver covariance is `blockdiag(K_W, K_W)`.
pub fn build_two_driver(base: &PoSsRealization, split: &TwoDriverSplit) -> Result<PoSsRealization> {
    let (n, ns, nw) = (base.horizon, base.state_dim, base.driver_dim);
    if split.state_gains.len() != n.saturating_sub(1) || split.feedthroughs.len() != n {
        return Err(Error::Dimension(format!(
            "split needs {} state-gain pairs and {n} feedthrough pairs, got {} and {}",
            n.saturating_sub(1),
            split.state_gains.len(),
            split.feedthroughs.len()
        )));
    }
    let mut state_gain = Vec::with_capacity(n.saturating_sub(1));
    for (t, (b1, b2)) in split.state_gains.iter().enumerate() {
        if b1.shape() != (ns, nw) || b2.shape() != (ns, nw) {
            return Err(Error::Dimension(format!(
                "B¹/B² at t={} must be {ns}x{nw}",
                t + 1
            )));
        }
        state_gain.push(hstack(b1, b2));
    }
    let mut feedthrough = Vec::with_capacity(n);
    let mut driver_cov = Vec::with_capacity(n);
    for (t, (n1, n2)) in split.feedthroughs.iter().enumerate() {
        if n1.shape() != (1, nw) || n2.shape() != (1, nw) {
            return Err(Error::Dimension(format!(
                "N¹/N² at t={} must be 1x{nw}",
                t + 1
            )));
        }
        feedthrough.push(hstack(n1, n2));
        driver_cov.push(block_diag(&base.driver_cov[t], &base.driver_cov[t]));
    }
    Ok(PoSsRealization {
        horizon: n,
        state_dim: ns,
        driver_dim: 2 * nw,
        transition: base.transition.clone(),
        state_gain,
        observation: base.observation.clone(),
        feedthrough,
        driver_cov,
        initial_mean: base.initial_mean.clone(),
        initial_cov: base.initial_cov.clone(),
        unstable_init: base.unstable_init,
    })
}

/// Scalar-state model with two independent unit drivers, one entering the state
/// and one entering the output: `S_{t+1} = a S_t + W¹_t`, `V_t = c S_t + W²_t`.
pub fn two_driver_scalar(a: f64, c: f64, n: usize) -> PoSsRealization {
    TimeInvariantModel {
        transition: DMatrix::from_element(1, 1, a),
        state_gain: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        observation: DMatrix::from_element(1, 1, c),
        feedthrough: DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
        driver_cov: DMatrix::identity(2, 2),
        initial_mean: DVector::zeros(1),
        initial_cov: DMatrix::zeros(1, 1),
        unstable_init: false,
    }
    .realize(n)
}

/// Linear map from the primitive randomness `(S_1 - mu_S1, W_1, ..., W_n)` to the
/// centered noise `V^n`, together with the primitive covariance.
#[derive(Debug, Clone)]
pub struct NoiseMap {
    /// `n x p` with `p = n_s + n * n_w`.
    pub output: DMatrix<f64>,
    /// Block-diagonal `blockdiag(K_S1, K_W_1, ..., K_W_n)`.
    pub primitive_cov: DMatrix<f64>,
}

/// Builds [`NoiseMap`] by unrolling the state recursion.
pub fn noise_map(r: &PoSsRealization) -> NoiseMap {
    let (n, ns, nw) = (r.horizon, r.state_dim, r.driver_dim);
    let p = ns + n * nw;
    let mut state = DMatrix::<f64>::zeros(ns, p);
    state.view_mut((0, 0), (ns, ns)).fill_with_identity();
    let mut output = DMatrix::<f64>::zeros(n, p);
    for t in 0..n {
        let w_col = ns + t * nw;
        let mut row = &r.observation[t] * &state;
        {
            let mut block = row.view_mut((0, w_col), (1, nw));
            block += &r.feedthrough[t];
        }
        output.row_mut(t).copy_from(&row.row(0));
        if t + 1 < n {
            let mut next = &r.transition[t] * &state;
            let mut block = next.view_mut((0, w_col), (ns, nw));
            block += &r.state_gain[t];
            state = next;
        }
    }
    let mut primitive_cov = DMatrix::<f64>::zeros(p, p);
    primitive_cov
        .view_mut((0, 0), (ns, ns))
        .copy_from(&r.initial_cov);
    for t in 0..n {
        let off = ns + t * nw;
        primitive_cov
            .view_mut((off, off), (nw, nw))
            .copy_from(&r.driver_cov[t]);
    }
    NoiseMap {
        output,
        primitive_cov,
    }
}

/// Exact covariance `K_{V^n}` of the noise block.
pub fn assemble_noise_covariance(r: &PoSsRealization) -> Result<DMatrix<f64>> {
    r.ensure_valid()?;
    let map = noise_map(r);
    let k = &map.output * &map.primitive_cov * map.output.transpose();
    Ok(symmetrize(&k))
}

/// Mean `E[V_t] = C_t E[S_t]` of the noise.
pub fn noise_mean(r: &PoSsRealization) -> DVector<f64> {
    let mut m = r.initial_mean.clone();
    let mut out = DVector::zeros(r.horizon);
    for t in 0..r.horizon {
        out[t] = (&r.observation[t] * &m)[(0, 0)];
        if t + 1 < r.horizon {
            m = &r.transition[t] * m;
        }
    }
    out
}
