//! Gauss-Hermite quadrature and tilted posterior moments.
//!
//! Everything here integrates against the standard Gaussian measure
//! `Dz = exp(-z^2/2) / sqrt(2 pi) dz`. [`build_rule`] constructs a
//! Gauss-Hermite rule in these units (weights sum to one), and
//! [`tilted_moments`] evaluates the reweighted posterior moments
//!
//! ```text
//! m = < tanh(c) * (2 cosh c)^x > / < (2 cosh c)^x >,   c = (d + sqrt(D) z) / sigma^2,
//! M = < tanh^2(c) * (2 cosh c)^x > / < (2 cosh c)^x >,
//! ```
//!
//! where `< . >` averages over `z ~ N(0,1)` and `D` is the field variance.
//!
//! The integrand is analytic in a strip of half-width `(pi/2) sigma^2 /
//! sqrt(D)` around the real axis (poles of `tanh` at the zeros of `cosh`).
//! When the field spread `s = sqrt(D) / sigma^2` is small the strip is wide
//! and the Gauss-Hermite rule converges spectrally; once `s` grows past
//! about one half the poles crowd the axis and polynomial-exactness rules
//! stall at error levels far above the accuracy this crate promises. In
//! that regime we switch to a uniform trapezoid grid in field units, whose
//! error for strip-analytic integrands decays like `exp(-2 pi w / h)` with
//! `h` the spacing, restoring near machine-precision results. Both branches
//! accumulate in log space with max-subtraction so that `x`-tilts never
//! overflow.
//!
//! Sign handling is structural: moments for `d < 0` are computed at `-d`
//! and negated, and `tanh` / `log 2cosh` are evaluated from `exp(-2|c|)`,
//! so oddness of `m` and evenness of `M` in `d` hold bitwise. Flipping the
//! sign of a transmitted bit therefore flips the posterior mean exactly.

use crate::error::{Error, Result};
use crate::model::clamp_mean;

/// Field spread `sqrt(D)/sigma^2` above which the Gauss-Hermite branch is
/// abandoned for the uniform grid. At the threshold the pole strip still
/// spans `pi` node spacings of an order-40 rule, keeping its error below
/// 1e-13 over the supported field range.
const SPREAD_SPLIT: f64 = 0.5;

/// Uniform-grid spacing in field units is `GRID_SPAN / order`, so doubling
/// the order halves the spacing exactly like it doubles Gauss-Hermite nodes.
const GRID_SPAN: f64 = 12.0;

/// Log-weight drop below the peak at which the uniform grid is truncated.
/// exp(-45) ~ 3e-20 leaves truncation error well under the discretization
/// error at any supported order.
const LOG_DROP: f64 = 45.0;

/// Beyond this field magnitude `tanh` is 1 to less than one part in 1e-16,
/// so a window lying entirely above it yields saturated moments directly.
const SATURATED_FIELD: f64 = 19.0;

/// Orders above this overflow the orthonormal Hermite recurrence at the
/// extreme nodes (values grow like `exp(z^2/4)` with `z ~ 2 sqrt(order)`).
const MAX_ORDER: usize = 256;

/// Hard cap on uniform-grid nodes; reaching it means the request sits far
/// outside the field/variance ranges the detector can produce.
const MAX_GRID_NODES: usize = 4_000_000;

/// Gauss-Hermite rule against the standard Gaussian measure.
///
/// Nodes are in `z`-units (standard deviations), ascending, symmetric in
/// exact pairs `(-z, z)` sharing a weight; weights are positive and sum to
/// one. An order-`n` rule integrates polynomials up to degree `2n - 1`.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    ln_weights: Vec<f64>,
    order: usize,
}

impl QuadratureRule {
    /// Nodes in ascending order.
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Weights matching [`nodes`](Self::nodes); positive, sum to one.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Number of nodes.
    pub fn order(&self) -> usize {
        self.order
    }

    /// Average of `f` under the rule: `sum_i w_i f(z_i)`.
    pub fn integrate(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        let mut acc = 0.0;
        for (&z, &w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(z);
        }
        acc
    }
}

/// Evaluates the orthonormal probabilists' Hermite polynomials at `z`,
/// returning `(p_n(z), p_{n-1}(z))`. The recurrence is
/// `p_{j+1} = (z p_j - sqrt(j) p_{j-1}) / sqrt(j+1)` with `p_0 = 1`,
/// orthonormal under the standard Gaussian probability measure.
fn hermite_pair(order: usize, z: f64) -> (f64, f64) {
    let mut prev = 0.0;
    let mut cur = 1.0;
    for j in 0..order {
        let next = (z * cur - (j as f64).sqrt() * prev) / ((j + 1) as f64).sqrt();
        prev = cur;
        cur = next;
    }
    (cur, prev)
}

/// Builds the Gauss-Hermite rule of the given order.
///
/// Roots are found by Newton iteration on the orthonormal recurrence,
/// seeded with the classical asymptotic guesses and refined directly in
/// `z`-units so that small-order roots land exactly (order 2 gives bitwise
/// `-1.0, 1.0`). Only the positive half is solved; the negative half is
/// mirrored so node pairs negate bitwise and share one weight. Weights are
/// Christoffel numbers `1 / (n p_{n-1}(z_i)^2)`, normalized to unit sum.
pub fn build_rule(order: usize) -> Result<QuadratureRule> {
    if order < 2 {
        return Err(Error::Parameter(format!(
            "quadrature order must be at least 2, got {order}"
        )));
    }
    if order > MAX_ORDER {
        return Err(Error::Parameter(format!(
            "quadrature order {order} exceeds supported maximum {MAX_ORDER}"
        )));
    }

    let half = (order + 1) / 2;
    let mut positive = vec![0.0f64; half];
    let nf = order as f64;
    let sqrt2 = std::f64::consts::SQRT_2;
    for i in 0..half {
        // Asymptotic initial guesses for physicists' roots, scaled by
        // sqrt(2) into probabilists' units.
        let guess = match i {
            0 => sqrt2 * ((2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0)),
            1 => positive[0] - sqrt2 * 1.14 * nf.powf(0.426) / (positive[0] / sqrt2),
            2 => 1.86 * positive[1] - 0.86 * positive[0],
            3 => 1.91 * positive[2] - 0.91 * positive[1],
            _ => 2.0 * positive[i - 1] - positive[i - 2],
        };
        if order % 2 == 1 && i == half - 1 {
            // Odd orders have an exact root at the origin.
            positive[i] = 0.0;
            continue;
        }
        let mut z = guess;
        let mut converged = false;
        for _ in 0..200 {
            let (p, p_prev) = hermite_pair(order, z);
            let step = p / (nf.sqrt() * p_prev);
            z -= step;
            if step.abs() <= 1e-15 * (1.0 + z.abs()) {
                converged = true;
                break;
            }
        }
        if !converged || !z.is_finite() {
            return Err(Error::Internal(format!(
                "Hermite root iteration failed to settle for order {order}"
            )));
        }
        positive[i] = z;
    }

    let mut nodes = vec![0.0f64; order];
    let mut weights = vec![0.0f64; order];
    for i in 0..half {
        let z = positive[i];
        let (_, p_prev) = hermite_pair(order, z);
        let w = 1.0 / (nf * p_prev * p_prev);
        if !w.is_finite() || w <= 0.0 {
            return Err(Error::Internal(format!(
                "Hermite weight degenerated at order {order}"
            )));
        }
        // positive[0] is the largest root; mirror it to both ends.
        nodes[order - 1 - i] = z;
        nodes[i] = -z;
        weights[order - 1 - i] = w;
        weights[i] = w;
    }
    if order % 2 == 1 {
        // The origin was mirrored onto itself; make the sign bit positive.
        nodes[half - 1] = 0.0;
    }

    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    let ln_weights = weights.iter().map(|w| w.ln()).collect();
    Ok(QuadratureRule {
        nodes,
        weights,
        ln_weights,
        order,
    })
}

/// `ln(2 cosh c)`, computed from `exp(-2|c|)` so it is exactly even in `c`
/// and never overflows.
pub(crate) fn ln_2cosh(c: f64) -> f64 {
    c.abs() + (-2.0 * c.abs()).exp().ln_1p()
}

/// `tanh` and `ln(2 cosh)` of `c`, sharing a single `exp`. The magnitude is
/// computed from `|c|` with the sign reattached, so `tanh_ln2cosh(-c)` is
/// the bitwise negation/copy of `tanh_ln2cosh(c)`.
fn tanh_ln2cosh(c: f64) -> (f64, f64) {
    let a = c.abs();
    let e = (-2.0 * a).exp();
    let mag = (1.0 - e) / (1.0 + e);
    let t = if c.is_sign_negative() { -mag } else { mag };
    (t, a + e.ln_1p())
}

/// One validated moment evaluation point: received field `d`, field
/// variance `delta`, assumed channel noise `sigma`, and replica-symmetry
/// breaking weight `x`.
#[derive(Debug, Clone, Copy)]
pub struct TiltedMomentRequest {
    d: f64,
    delta: f64,
    sigma: f64,
    x: f64,
}

impl TiltedMomentRequest {
    /// Validates `d` finite, `delta >= 0` finite, `sigma > 0` finite, and
    /// `x` in `[0, 1]`.
    pub fn new(d: f64, delta: f64, sigma: f64, x: f64) -> Result<Self> {
        if !d.is_finite() {
            return Err(Error::Data(format!("tilted moment field must be finite, got {d}")));
        }
        if !delta.is_finite() || delta < 0.0 {
            return Err(Error::Parameter(format!(
                "field variance must be finite and nonnegative, got {delta}"
            )));
        }
        if !sigma.is_finite() || sigma <= 0.0 {
            return Err(Error::Parameter(format!(
                "assumed noise level must be finite and positive, got {sigma}"
            )));
        }
        if !x.is_finite() || !(0.0..=1.0).contains(&x) {
            return Err(Error::Parameter(format!(
                "tilt exponent must lie in [0, 1], got {x}"
            )));
        }
        Ok(Self { d, delta, sigma, x })
    }

    /// Received cavity field.
    pub fn d(&self) -> f64 {
        self.d
    }

    /// Variance of the field fluctuation.
    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Assumed channel noise level.
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Tilt exponent weighting the free-energy reweighting term.
    pub fn x(&self) -> f64 {
        self.x
    }
}

/// Accumulates tilted moments over `(field, base log-weight)` points in log
/// space. Two passes: the first caches `tanh` values and total log-weights
/// while tracking their maximum, the second exponentiates relative to that
/// maximum. Sums run in the iteration order handed in.
fn accumulate_tilted(points: impl Iterator<Item = (f64, f64)>, x: f64) -> (f64, f64) {
    let mut terms: Vec<(f64, f64)> = Vec::new();
    let mut peak = f64::NEG_INFINITY;
    for (c, base) in points {
        let (t, l2c) = tanh_ln2cosh(c);
        let l = base + x * l2c;
        if l > peak {
            peak = l;
        }
        terms.push((t, l));
    }
    let mut den = 0.0;
    let mut num_m = 0.0;
    let mut num_sq = 0.0;
    for (t, l) in terms {
        let u = (l - peak).exp();
        den += u;
        num_m += u * t;
        num_sq += u * t * t;
    }
    let m = clamp_mean(num_m / den);
    let sq = (num_sq / den).min(1.0);
    (m, sq)
}

/// Posterior mean and mean-square of a bit under a Gaussian cavity field.
///
/// Returns `(m, M)` with `|m| < 1` strictly, `0 <= M <= 1`, and
/// `M >= m^2` up to rounding. `delta = 0` collapses to the closed form
/// `m = tanh(d / sigma^2)`, `M = m^2` exactly; this is the path both the
/// belief-propagation mode and the `x = 0` fixed point ride, so their
/// moment calls cost one `exp` each. `d = 0` returns `m = 0` exactly.
///
/// Fails only on requests whose spread would demand an absurd grid (far
/// beyond any field the detector dynamics can generate).
pub fn tilted_moments(req: &TiltedMomentRequest, rule: &QuadratureRule) -> Result<(f64, f64)> {
    if req.d.is_sign_negative() {
        let flipped = TiltedMomentRequest { d: -req.d, ..*req };
        let (m, sq) = tilted_moments(&flipped, rule)?;
        return Ok((-m, sq));
    }
    let s2 = req.sigma * req.sigma;
    if req.delta == 0.0 {
        let (t, _) = tanh_ln2cosh(req.d / s2);
        let m = clamp_mean(t);
        return Ok((m, m * m));
    }

    let sd = req.delta.sqrt();
    let spread = sd / s2;
    if spread <= SPREAD_SPLIT {
        let points = rule
            .nodes
            .iter()
            .zip(&rule.ln_weights)
            .map(|(&z, &lw)| ((req.d + sd * z) / s2, lw));
        let (m, sq) = accumulate_tilted(points, req.x);
        return Ok(finish_moments(req, m, sq));
    }

    // Wide-spread branch: uniform grid in field units. The implicit
    // Gaussian weight in c ~ N(mu, spread^2) contributes base log-weight
    // -((c - mu)/spread)^2 / 2; shared flat factors cancel in the ratios.
    let mu = req.d / s2;
    let h = GRID_SPAN / rule.order as f64;
    let (lo, hi) = grid_window(mu, spread, req.x)?;
    if lo > SATURATED_FIELD {
        // Entire window deep in tanh saturation; moments are pinned.
        return Ok((clamp_mean(1.0), 1.0));
    }
    let span_nodes = (hi - lo) / h;
    if !span_nodes.is_finite() || span_nodes > MAX_GRID_NODES as f64 {
        return Err(Error::Parameter(format!(
            "field spread {spread:.3e} at field {mu:.3e} is outside the supported tilt range"
        )));
    }
    let j_lo = (lo / h).floor() as i64 - 1;
    let j_hi = (hi / h).ceil() as i64 + 1;
    let points = (j_lo..=j_hi).map(|j| {
        let c = j as f64 * h;
        let q = (c - mu) / spread;
        (c, -0.5 * q * q)
    });
    let (m, sq) = accumulate_tilted(points, req.x);
    Ok(finish_moments(req, m, sq))
}

/// Restores the exact symmetry answers that summation order would blur:
/// a zero field has zero mean by oddness.
fn finish_moments(req: &TiltedMomentRequest, m: f64, sq: f64) -> (f64, f64) {
    if req.d == 0.0 {
        (0.0, sq)
    } else {
        (m, sq)
    }
}

/// Window `[lo, hi]` in field units outside which the tilted weight
/// `exp(-((c - mu)/s)^2 / 2 + x ln 2cosh c)` has dropped [`LOG_DROP`] below
/// its peak. On each sign branch `ln 2cosh c ~ +/- c + ln 2`, making the
/// exponent quadratic; the window is the union of the root intervals.
fn grid_window(mu: f64, s: f64, x: f64) -> Result<(f64, f64)> {
    let log_weight = |c: f64| {
        let q = (c - mu) / s;
        -0.5 * q * q + x * ln_2cosh(c)
    };
    let mut peak = f64::NEG_INFINITY;
    for cand in [mu, mu + x * s * s, mu - x * s * s, 0.0] {
        let v = log_weight(cand);
        if v > peak {
            peak = v;
        }
    }
    if !peak.is_finite() {
        return Err(Error::Parameter(format!(
            "tilted weight is degenerate at field {mu:.3e}, spread {s:.3e}"
        )));
    }
    let target = peak - LOG_DROP;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for sign in [1.0f64, -1.0] {
        // Solve -((c - mu)/s)^2/2 + x(sign * c + ln 2) = target.
        let a = -0.5 / (s * s);
        let b = mu / (s * s) + sign * x;
        let c0 = -0.5 * mu * mu / (s * s) + x * std::f64::consts::LN_2 - target;
        let disc = b * b - 4.0 * a * c0;
        if disc <= 0.0 {
            continue;
        }
        let root = disc.sqrt();
        let r1 = (-b + root) / (2.0 * a);
        let r2 = (-b - root) / (2.0 * a);
        lo = lo.min(r1.min(r2));
        hi = hi.max(r1.max(r2));
    }
    if lo > hi {
        return Err(Error::Parameter(format!(
            "tilted weight window collapsed at field {mu:.3e}, spread {s:.3e}"
        )));
    }
    Ok((lo, hi))
}
