//! Shared test oracle: a high-precision adaptive-Simpson evaluation of the
//! tilted moments, written independently of the production quadrature so
//! the two can check each other.

/// `ln(2 cosh c)` in the overflow-safe form `|c| + ln(1 + e^{-2|c|})`.
fn ln_2cosh(c: f64) -> f64 {
    c.abs() + (-2.0 * c.abs()).exp().ln_1p()
}

/// One Simpson panel over `[a, b]`; returns the estimate plus the midpoint
/// and its integrand value so the refinement can reuse them.
fn simpson_panel(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
    let mid = 0.5 * (a + b);
    let fm = f(mid);
    ((b - a) / 6.0 * (fa + 4.0 * fm + fb), mid, fm)
}

#[allow(clippy::too_many_arguments)]
fn refine(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    fa: f64,
    b: f64,
    fb: f64,
    whole: f64,
    mid: f64,
    fm: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let (left, lm, flm) = simpson_panel(f, a, fa, mid, fm);
    let (right, rm, frm) = simpson_panel(f, mid, fm, b, fb);
    let correction = left + right - whole;
    if depth == 0 || correction.abs() <= 15.0 * tol {
        left + right + correction / 15.0
    } else {
        refine(f, a, fa, mid, fm, left, lm, flm, 0.5 * tol, depth - 1)
            + refine(f, mid, fm, b, fb, right, rm, frm, 0.5 * tol, depth - 1)
    }
}

/// Adaptive Simpson quadrature of `f` over `[a, b]` to absolute tolerance
/// `tol`.
fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let fa = f(a);
    let fb = f(b);
    let (whole, mid, fm) = simpson_panel(f, a, fa, b, fb);
    refine(f, a, fa, b, fb, whole, mid, fm, tol, 48)
}

/// Reference tilted moments
/// `m = <tanh(c(z))>`, `M = <tanh^2(c(z))>` under the weight
/// `exp(-z^2/2) * (2 cosh c(z))^x` with `c(z) = (d + sqrt(Delta) z)/sigma^2`.
///
/// The integrand's two features are the Gaussian bulk around `z = 0`
/// (displaced by at most `x sqrt(Delta)/sigma^2` by the tilt) and the tanh
/// transition around `z0 = -d/sqrt(Delta)` of width `sigma^2/sqrt(Delta)`;
/// the domain is split there so the refinement never straddles a kink.
/// The log-weight is max-subtracted on a scan grid before exponentiation.
pub fn oracle_tilted_moments(d: f64, delta: f64, sigma: f64, x: f64) -> (f64, f64) {
    let s2 = sigma * sigma;
    if delta == 0.0 {
        let t = (d / s2).tanh();
        return (t, t * t);
    }
    let sd = delta.sqrt();
    let shift = x * sd / s2;
    let half = 40.0 + shift;
    let z0 = -d / sd;
    let width = s2 / sd;

    let mut cuts = vec![-half, half];
    for z in [
        z0 - 10.0 * width,
        z0 - width,
        z0,
        z0 + width,
        z0 + 10.0 * width,
        -shift,
        0.0,
        shift,
    ] {
        if z > -half && z < half {
            cuts.push(z);
        }
    }
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.dedup();

    let log_weight = move |z: f64| -0.5 * z * z + x * ln_2cosh((d + sd * z) / s2);
    let mut log_max = f64::NEG_INFINITY;
    let scan = 20_000;
    for i in 0..=scan {
        let z = -half + 2.0 * half * i as f64 / scan as f64;
        log_max = log_max.max(log_weight(z));
    }
    for &z in &cuts {
        log_max = log_max.max(log_weight(z));
    }

    let weight = move |z: f64| (log_weight(z) - log_max).exp();
    let mass: &dyn Fn(f64) -> f64 = &weight;
    let first = move |z: f64| weight(z) * ((d + sd * z) / s2).tanh();
    let second = move |z: f64| {
        let t = ((d + sd * z) / s2).tanh();
        weight(z) * t * t
    };

    let tol = 1e-13;
    let mut i0 = 0.0;
    let mut i1 = 0.0;
    let mut i2 = 0.0;
    for pair in cuts.windows(2) {
        i0 += integrate(mass, pair[0], pair[1], tol);
        i1 += integrate(&first, pair[0], pair[1], tol);
        i2 += integrate(&second, pair[0], pair[1], tol);
    }
    (i1 / i0, i2 / i0)
}

/// Self-check against hand-frozen values; run before trusting the oracle.
pub fn oracle_self_check() {
    let (m, second) = oracle_tilted_moments(0.8, 0.5, 0.7, 0.6);
    assert!(
        (m - 0.8403631324862265).abs() < 1e-11,
        "oracle mean drifted: {m}"
    );
    assert!(
        (second - 0.8666094837804971).abs() < 1e-11,
        "oracle second moment drifted: {second}"
    );
    let (m0, s0) = oracle_tilted_moments(-1.3, 0.0, 0.9, 0.4);
    let t = (-1.3f64 / 0.81).tanh();
    assert!((m0 - t).abs() < 1e-15 && (s0 - t * t).abs() < 1e-15);
    // Zero field is symmetric for every tilt: the mean vanishes.
    let (ms, second_s) = oracle_tilted_moments(0.0, 2.0, 0.8, 1.0);
    assert!(ms.abs() < 1e-13, "symmetric mean should vanish: {ms}");
    assert!((0.0..=1.0).contains(&second_s));
}
