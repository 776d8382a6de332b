//! Iterative multiuser detectors: survey propagation, belief propagation,
//! and the matched-filter baseline.
//!
//! The survey-propagation detector iterates two synchronous sweeps over a
//! detector state. With `beta = K/N` and assumed noise `sigma`:
//!
//! ```text
//! horizontal:  a_mu   <- [sigma^2 (y_mu - N^{-1/2} sum_k s_mu_k m_k) + Xi a_mu] / (sigma^2 + Xi)
//! vertical:    d_k    <- N^{-1/2} sum_mu s_mu_k a_mu + Gamma m_k
//!              (m_k, M_k) <- tilted_moments(d_k, Delta, sigma, x)
//! ```
//!
//! followed by the macroscopic coefficient refresh from `Q0 = K^{-1} sum m_k^2`
//! and `Q1 = K^{-1} sum M_k`:
//!
//! ```text
//! Delta <- beta sigma^2 (Q1 - Q0) / [(sigma^2 + beta(1 - Q1)) (sigma^2 + beta(1 - Q1 + x(Q1 - Q0)))]
//! Gamma <- sigma^2 / (sigma^2 + beta(1 - Q1 + x(Q1 - Q0)))
//! Xi    <- beta (1 - Q1 + x(Q1 - Q0))
//! ```
//!
//! The `Gamma m_k` and `Xi a_mu` terms are Onsager corrections: they cancel
//! the self-feedback of synchronous message passing, and `m_k` there is the
//! pre-sweep mean (the lag-one value). Belief propagation is the collapse
//! of the same recursion with deterministic fields: `Delta` pinned at zero
//! and `M_k = m_k^2`, which the shared code path realizes by forcing the
//! moment tilt to zero. Starting from the unbiased state, survey
//! propagation with `x = 0` keeps `Q1 - Q0` at exactly `0.0` and therefore
//! reproduces belief propagation bit for bit; this identity is structural,
//! not approximate, and is pinned by tests.
//!
//! All reductions run in ascending index order, giving bitwise-reproducible
//! trajectories. Sign symmetry is exact: flipping a bit together with its
//! code column negates that user's field and posterior mean in every
//! iteration without changing any other quantity.

use crate::analysis::{MacroRecord, MacroTrace};
use crate::error::{Error, Result};
use crate::model::{sign_decision, Instance};
use crate::quad::{build_rule, tilted_moments, QuadratureRule, TiltedMomentRequest};

/// Detector family: survey propagation or its belief-propagation collapse.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Sp,
    Bp,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Sp => "sp",
            Mode::Bp => "bp",
        })
    }
}

/// Detector parameters.
#[derive(Debug, Clone, Copy)]
pub struct DetectorConfig {
    /// Noise level the posterior assumes; need not match the channel's.
    pub sigma: f64,
    /// Tilt exponent weighting field configurations by `(2 cosh h)^x`.
    /// Ignored in belief-propagation mode.
    pub x: f64,
    /// Sweep budget before giving up on convergence.
    pub max_iters: usize,
    /// Convergence threshold on `max_k |m_k - m_k_prev|`.
    pub tol: f64,
    /// Mean-update damping in `[0, 1)`; `0` is the plain iteration.
    pub damping: f64,
    /// Gauss-Hermite order for the moment integrals.
    pub quad_order: usize,
    pub mode: Mode,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            x: 0.5,
            max_iters: 100,
            tol: 1e-6,
            damping: 0.0,
            quad_order: 40,
            mode: Mode::Sp,
        }
    }
}

impl DetectorConfig {
    /// Checks the numeric ranges every detector entry point relies on.
    pub fn validate(&self) -> Result<()> {
        if !self.sigma.is_finite() || self.sigma <= 0.0 {
            return Err(Error::Parameter(format!(
                "assumed noise level must be finite and positive, got {}",
                self.sigma
            )));
        }
        if !self.x.is_finite() || !(0.0..=1.0).contains(&self.x) {
            return Err(Error::Parameter(format!(
                "tilt exponent must lie in [0, 1], got {}",
                self.x
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::Parameter("iteration budget must be positive".into()));
        }
        if !self.tol.is_finite() || self.tol <= 0.0 {
            return Err(Error::Parameter(format!(
                "convergence tolerance must be finite and positive, got {}",
                self.tol
            )));
        }
        if !self.damping.is_finite() || !(0.0..1.0).contains(&self.damping) {
            return Err(Error::Parameter(format!(
                "damping must lie in [0, 1), got {}",
                self.damping
            )));
        }
        Ok(())
    }
}

/// Full iteration state of the detector.
///
/// Invariants after every sweep: `|m_k| < 1`, `0 <= M_k <= 1`,
/// `M_k >= m_k^2` up to rounding, `0 <= q0 <= q1 <= 1`, `delta >= 0`,
/// `0 < gamma <= 1`, `xi >= 0`. In belief-propagation mode and for `x = 0`
/// survey propagation, `delta` stays exactly `0.0`.
#[derive(Debug, Clone)]
pub struct DetectorState {
    /// Completed sweeps.
    pub t: usize,
    /// Per-sample messages `a_mu`.
    pub a: Vec<f64>,
    /// Posterior means `m_k`.
    pub m: Vec<f64>,
    /// Means of the previous sweep, kept for the Onsager memory.
    pub m_prev: Vec<f64>,
    /// Posterior second moments `M_k`.
    pub m2: Vec<f64>,
    /// Deterministic part of each user's cavity field.
    pub d: Vec<f64>,
    /// Mean square of the means, `K^{-1} sum m_k^2`.
    pub q0: f64,
    /// Mean second moment, `K^{-1} sum M_k`.
    pub q1: f64,
    /// Field variance fed to the tilted moments.
    pub delta: f64,
    /// Onsager coefficient on the lag-one means.
    pub gamma: f64,
    /// Onsager coefficient on the sample messages.
    pub xi: f64,
    /// Last `max_k |m_k - m_k_prev|`; infinite before the first sweep.
    pub residual: f64,
}

/// Detection output. `decisions` are the signs of the final means with
/// `sgn(0) = +1`.
#[derive(Debug, Clone)]
pub struct DetectionResult {
    pub decisions: Vec<f64>,
    pub soft: Vec<f64>,
    pub iterations_used: usize,
    pub converged: bool,
    pub trace: MacroTrace,
}

/// The tilt actually applied: belief propagation runs the recursion at
/// zero tilt regardless of the configured `x`.
fn effective_x(config: &DetectorConfig) -> f64 {
    match config.mode {
        Mode::Sp => config.x,
        Mode::Bp => 0.0,
    }
}

/// Closed-form macroscopic coefficients from `(q0, q1)`.
///
/// `q1 >= q0` makes the leading factor of `delta` nonnegative; a negative
/// value beyond rounding means the moment invariants were broken upstream.
fn macro_coefficients(q0: f64, q1: f64, sigma: f64, x: f64, beta: f64) -> Result<(f64, f64, f64)> {
    let s2 = sigma * sigma;
    let gap = q1 - q0;
    let load = beta * (1.0 - q1 + x * gap);
    let gamma = s2 / (s2 + load);
    let xi = load;
    let mut delta = beta * s2 * gap / ((s2 + beta * (1.0 - q1)) * (s2 + load));
    if delta < 0.0 {
        if delta < -1e-12 {
            return Err(Error::Internal(format!(
                "field variance went negative ({delta:.3e}) from q0={q0}, q1={q1}"
            )));
        }
        delta = 0.0;
    }
    Ok((delta, gamma, xi))
}

fn check_dims(state: &DetectorState, instance: &Instance) -> Result<()> {
    if state.a.len() != instance.n() || state.m.len() != instance.k() {
        return Err(Error::Dimension(format!(
            "state dims ({}, {}) do not match instance dims ({}, {})",
            state.a.len(),
            state.m.len(),
            instance.n(),
            instance.k()
        )));
    }
    Ok(())
}

/// Unbiased starting state: zero messages and means, coefficients evaluated
/// at `q0 = q1 = 0`, infinite residual.
pub fn init_state(n: usize, k: usize, config: &DetectorConfig) -> Result<DetectorState> {
    config.validate()?;
    if n == 0 || k == 0 {
        return Err(Error::Dimension(format!(
            "detector needs at least one sample and one user, got n={n}, k={k}"
        )));
    }
    let beta = k as f64 / n as f64;
    let (delta, gamma, xi) = macro_coefficients(0.0, 0.0, config.sigma, effective_x(config), beta)?;
    Ok(DetectorState {
        t: 0,
        a: vec![0.0; n],
        m: vec![0.0; k],
        m_prev: vec![0.0; k],
        m2: vec![0.0; k],
        d: vec![0.0; k],
        q0: 0.0,
        q1: 0.0,
        delta,
        gamma,
        xi,
        residual: f64::INFINITY,
    })
}

/// Starting state with prescribed means, for perturbation studies. Second
/// moments are set to `m_k^2` and the coefficients follow from the
/// resulting `(q0, q1)`; messages start at zero.
pub fn init_state_from_means(
    n: usize,
    k: usize,
    config: &DetectorConfig,
    m0: &[f64],
) -> Result<DetectorState> {
    let mut state = init_state(n, k, config)?;
    if m0.len() != k {
        return Err(Error::Dimension(format!(
            "starting means have length {}, expected {}",
            m0.len(),
            k
        )));
    }
    if m0.iter().any(|v| !v.is_finite() || v.abs() >= 1.0) {
        return Err(Error::Parameter(
            "starting means must be finite and strictly inside (-1, 1)".into(),
        ));
    }
    state.m.copy_from_slice(m0);
    state.m_prev.copy_from_slice(m0);
    for (m2, &m) in state.m2.iter_mut().zip(m0) {
        *m2 = m * m;
    }
    let (q0, q1) = state_q(&state.m, &state.m2);
    let beta = k as f64 / n as f64;
    let (delta, gamma, xi) = macro_coefficients(q0, q1, config.sigma, effective_x(config), beta)?;
    state.q0 = q0;
    state.q1 = q1;
    state.delta = delta;
    state.gamma = gamma;
    state.xi = xi;
    Ok(state)
}

/// `(q0, q1)` from the moment vectors. `q1` is floored at `q0` and both are
/// capped at 1 so the macroscopic invariants survive summation rounding;
/// the guards are bitwise no-ops whenever the element-wise bounds hold with
/// any margin.
fn state_q(m: &[f64], m2: &[f64]) -> (f64, f64) {
    let k = m.len() as f64;
    let mut sum_sq = 0.0;
    for &v in m {
        sum_sq += v * v;
    }
    let mut sum_m2 = 0.0;
    for &v in m2 {
        sum_m2 += v;
    }
    let q0 = (sum_sq / k).min(1.0);
    let q1 = (sum_m2 / k).max(q0).min(1.0);
    (q0, q1)
}

/// One synchronous message sweep: every `a_mu` is refreshed from the
/// time-`t` means and its own previous value.
pub fn horizontal_update(
    state: &mut DetectorState,
    instance: &Instance,
    config: &DetectorConfig,
) -> Result<()> {
    check_dims(state, instance)?;
    let codes = instance.codes();
    let y = instance.received();
    let s2 = config.sigma * config.sigma;
    let xi = state.xi;
    let inv_sqrt_n = 1.0 / (instance.n() as f64).sqrt();
    for mu in 0..instance.n() {
        let mut dot = 0.0;
        for (s, m) in codes.row(mu).iter().zip(&state.m) {
            dot += s * m;
        }
        let residual_mu = y[mu] - dot * inv_sqrt_n;
        state.a[mu] = (s2 * residual_mu + xi * state.a[mu]) / (s2 + xi);
    }
    Ok(())
}

/// One synchronous moment sweep: fields from the messages, tilted moments,
/// damping, then the macroscopic refresh. Builds its own quadrature rule;
/// loops should prefer [`vertical_update_with_rule`].
pub fn vertical_update(
    state: &mut DetectorState,
    instance: &Instance,
    config: &DetectorConfig,
) -> Result<()> {
    let rule = build_rule(config.quad_order)?;
    vertical_update_with_rule(state, instance, config, &rule)
}

/// [`vertical_update`] with a caller-supplied quadrature rule.
pub fn vertical_update_with_rule(
    state: &mut DetectorState,
    instance: &Instance,
    config: &DetectorConfig,
    rule: &QuadratureRule,
) -> Result<()> {
    check_dims(state, instance)?;
    let codes = instance.codes();
    let k = instance.k();
    let inv_sqrt_n = 1.0 / (instance.n() as f64).sqrt();
    let gamma = state.gamma;
    let x = effective_x(config);
    let delta = match config.mode {
        Mode::Sp => state.delta,
        Mode::Bp => 0.0,
    };

    let mut m_new = vec![0.0; k];
    let mut m2_new = vec![0.0; k];
    let mut residual = 0.0f64;
    for j in 0..k {
        let mut dot = 0.0;
        for (s, a) in codes.col(j).iter().zip(&state.a) {
            dot += s * a;
        }
        let field = dot * inv_sqrt_n + gamma * state.m[j];
        if !field.is_finite() {
            return Err(Error::Internal(format!(
                "cavity field for user {j} became non-finite at sweep {}",
                state.t + 1
            )));
        }
        state.d[j] = field;
        let request = TiltedMomentRequest::new(field, delta, config.sigma, x)?;
        let (mean, second) = tilted_moments(&request, rule)?;
        let (mean, second) = if config.damping == 0.0 {
            (mean, second)
        } else {
            let lam = config.damping;
            let damped_m = crate::model::clamp_mean((1.0 - lam) * mean + lam * state.m[j]);
            // Belief propagation keeps the deterministic-field identity
            // M_k = m_k^2 through damping; mixing second moments across
            // sweeps would lift Q1 above Q0 (Jensen) and fabricate a
            // positive field variance in a mode defined by Delta = 0. The
            // survey recursion damps M freely, which is precisely how a
            // damped run leaves the Q1 = Q0 manifold.
            let damped_m2 = match config.mode {
                Mode::Bp => damped_m * damped_m,
                Mode::Sp => ((1.0 - lam) * second + lam * state.m2[j]).min(1.0),
            };
            (damped_m, damped_m2)
        };
        residual = residual.max((mean - state.m[j]).abs());
        m_new[j] = mean;
        m2_new[j] = second;
    }

    let old_m = std::mem::replace(&mut state.m, m_new);
    state.m_prev = old_m;
    state.m2 = m2_new;
    let (q0, q1) = state_q(&state.m, &state.m2);
    if !q0.is_finite() || !q1.is_finite() || residual.is_nan() {
        return Err(Error::Internal(format!(
            "detector state became non-finite at sweep {} (q0={q0}, q1={q1})",
            state.t + 1
        )));
    }
    let beta = k as f64 / instance.n() as f64;
    let (delta_next, gamma_next, xi_next) =
        macro_coefficients(q0, q1, config.sigma, x, beta)?;
    state.q0 = q0;
    state.q1 = q1;
    state.delta = delta_next;
    state.gamma = gamma_next;
    state.xi = xi_next;
    state.residual = residual;
    state.t += 1;
    Ok(())
}

/// Runs the configured detector (survey propagation by default) until the
/// mean update falls below `tol` or the sweep budget runs out.
/// Non-convergence is an outcome, not an error; the result still carries
/// the final state and the full macroscopic trace (one record per sweep
/// plus the starting record).
pub fn detect(instance: &Instance, config: &DetectorConfig) -> Result<DetectionResult> {
    config.validate()?;
    let rule = build_rule(config.quad_order)?;
    let mut state = init_state(instance.n(), instance.k(), config)?;
    let mut records = vec![MacroRecord::from_state(&state, instance)?];
    let mut converged = false;
    for _ in 0..config.max_iters {
        horizontal_update(&mut state, instance, config)?;
        vertical_update_with_rule(&mut state, instance, config, &rule)?;
        records.push(MacroRecord::from_state(&state, instance)?);
        if state.residual < config.tol {
            converged = true;
            break;
        }
    }
    let trace = MacroTrace::new(instance.n(), instance.k(), records);
    let decisions: Vec<f64> = state.m.iter().map(|&m| sign_decision(m)).collect();
    Ok(DetectionResult {
        decisions,
        soft: state.m.clone(),
        iterations_used: state.t,
        converged,
        trace,
    })
}

/// Belief-propagation detection: the same loop with the field variance
/// pinned at zero and deterministic moments `M_k = m_k^2`.
pub fn bp_detect(instance: &Instance, config: &DetectorConfig) -> Result<DetectionResult> {
    let mut bp_config = *config;
    bp_config.mode = Mode::Bp;
    detect(instance, &bp_config)
}

/// Matched-filter baseline: correlates the received signal with each
/// user's code, `soft_k = N^{-1/2} sum_mu s_mu_k y_mu`. Always "converges"
/// in one step. The trace holds the starting record and one record of the
/// hard-decision state (`m = decisions`, `M = 1`), whose coefficients
/// follow from the same closed forms at `q0 = q1 = 1`.
pub fn matched_filter(instance: &Instance, config: &DetectorConfig) -> Result<DetectionResult> {
    config.validate()?;
    let codes = instance.codes();
    let y = instance.received();
    let k = instance.k();
    let inv_sqrt_n = 1.0 / (instance.n() as f64).sqrt();
    let mut soft = vec![0.0; k];
    for j in 0..k {
        let mut dot = 0.0;
        for (s, yv) in codes.col(j).iter().zip(y) {
            dot += s * yv;
        }
        soft[j] = dot * inv_sqrt_n;
    }
    let decisions: Vec<f64> = soft.iter().map(|&v| sign_decision(v)).collect();

    let start = init_state(instance.n(), instance.k(), config)?;
    let beta = instance.beta();
    let (delta, gamma, xi) =
        macro_coefficients(1.0, 1.0, config.sigma, effective_x(config), beta)?;
    let decided = DetectorState {
        t: 1,
        a: vec![0.0; instance.n()],
        m: decisions.clone(),
        m_prev: vec![0.0; k],
        m2: vec![1.0; k],
        d: soft.clone(),
        q0: 1.0,
        q1: 1.0,
        delta,
        gamma,
        xi,
        residual: 1.0,
    };
    let records = vec![
        MacroRecord::from_state(&start, instance)?,
        MacroRecord::from_state(&decided, instance)?,
    ];
    Ok(DetectionResult {
        decisions,
        soft,
        iterations_used: 1,
        converged: true,
        trace: MacroTrace::new(instance.n(), instance.k(), records),
    })
}
