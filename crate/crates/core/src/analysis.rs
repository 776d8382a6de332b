//! Macroscopic trajectory records, fixed-point summaries, and the
//! two-replica probe for dynamic instability.
//!
//! A detection run is summarized per sweep by its macroscopic observables
//! `(Q0, Q1, Delta, Gamma, Xi)` together with two ground-truth-aware
//! diagnostics, the overlap `K^{-1} sum_k b0_k m_k` and the bit error rate
//! of the sign decisions. The instability probe reruns one instance from
//! two starting points an `epsilon`-perturbation apart and fits the
//! exponential growth rate of their mean-square separation; a positive
//! rate is the dynamical signature of the iteration losing stability.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detector::{
    horizontal_update, init_state, init_state_from_means, vertical_update_with_rule,
    DetectionResult, DetectorConfig, DetectorState, Mode,
};
use crate::error::{Error, Result};
use crate::model::{sign_decision, Instance};
use crate::quad::build_rule;

/// Decorrelates the perturbation stream from instance generation, which
/// consumes the raw instance seed.
const PERTURBATION_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

/// Macroscopic snapshot of a detector state after sweep `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MacroRecord {
    pub t: usize,
    pub q0: f64,
    pub q1: f64,
    pub delta: f64,
    pub gamma: f64,
    pub xi: f64,
    /// `K^{-1} sum_k b0_k m_k` against the true bits.
    pub overlap: f64,
    /// Fraction of sign decisions (with `sgn(0) = +1`) differing from the
    /// true bits.
    pub ber: f64,
    pub residual: f64,
}

impl MacroRecord {
    /// Snapshot of `state` scored against the instance's true bits.
    pub fn from_state(state: &DetectorState, instance: &Instance) -> Result<Self> {
        if state.m.len() != instance.k() || state.a.len() != instance.n() {
            return Err(Error::Dimension(format!(
                "state dims ({}, {}) do not match instance dims ({}, {})",
                state.a.len(),
                state.m.len(),
                instance.n(),
                instance.k()
            )));
        }
        let k = instance.k() as f64;
        let bits = instance.true_bits();
        let mut overlap = 0.0;
        let mut errors = 0usize;
        for (m, b) in state.m.iter().zip(bits) {
            overlap += b * m;
            if sign_decision(*m) != *b {
                errors += 1;
            }
        }
        Ok(Self {
            t: state.t,
            q0: state.q0,
            q1: state.q1,
            delta: state.delta,
            gamma: state.gamma,
            xi: state.xi,
            overlap: overlap / k,
            ber: errors as f64 / k,
            residual: state.residual,
        })
    }
}

/// Macroscopic trajectory of one detection run; holds one record per sweep
/// plus the starting record, so `records.len() == iterations_used + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroTrace {
    pub n: usize,
    pub k: usize,
    pub records: Vec<MacroRecord>,
}

impl MacroTrace {
    pub fn new(n: usize, k: usize, records: Vec<MacroRecord>) -> Self {
        Self { n, k, records }
    }

    /// The final record of the run.
    pub fn terminal(&self) -> &MacroRecord {
        self.records.last().expect("a trace always has its starting record")
    }
}

/// Builds a trace from an in-order stream of states of one detection run.
pub fn record_trace<'a, I>(states: I, instance: &Instance) -> Result<MacroTrace>
where
    I: IntoIterator<Item = &'a DetectorState>,
{
    let records = states
        .into_iter()
        .map(|s| MacroRecord::from_state(s, instance))
        .collect::<Result<Vec<_>>>()?;
    Ok(MacroTrace::new(instance.n(), instance.k(), records))
}

/// Outcome of the divergence fit for one probe run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Converging,
    Diverging,
    Inconclusive,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Converging => "converging",
            Verdict::Diverging => "diverging",
            Verdict::Inconclusive => "inconclusive",
        })
    }
}

/// Fit protocol for the divergence exponent: discard `burn_in` sweeps, fit
/// over the next `length`, and call the verdict only when the slope clears
/// `slope_threshold` in magnitude.
#[derive(Debug, Clone, Copy)]
pub struct ProbeWindow {
    pub burn_in: usize,
    pub length: usize,
    pub slope_threshold: f64,
}

impl Default for ProbeWindow {
    fn default() -> Self {
        Self {
            burn_in: 5,
            length: 20,
            slope_threshold: 0.05,
        }
    }
}

impl ProbeWindow {
    fn validate(&self) -> Result<()> {
        if self.length < 2 {
            return Err(Error::Parameter(format!(
                "probe window needs at least 2 sweeps to fit a slope, got {}",
                self.length
            )));
        }
        if !self.slope_threshold.is_finite() || self.slope_threshold <= 0.0 {
            return Err(Error::Parameter(format!(
                "slope threshold must be finite and positive, got {}",
                self.slope_threshold
            )));
        }
        Ok(())
    }
}

/// One probe result: the fitted divergence exponent and its verdict at a
/// single `(sigma, mode, x, seed)` operating point. `lambda_hat` is NaN
/// exactly when no slope could be fitted (verdict inconclusive).
#[derive(Debug, Clone)]
pub struct StabilityEntry {
    pub sigma: f64,
    pub mode: Mode,
    pub x: f64,
    pub lambda_hat: f64,
    pub verdict: Verdict,
    pub epsilon: f64,
    pub seed: u64,
    /// Human-readable diagnostic for degenerate probes.
    pub note: Option<String>,
}

/// Probe results over a noise grid.
#[derive(Debug, Clone, Default)]
pub struct StabilityReport {
    pub entries: Vec<StabilityEntry>,
}

/// Majority verdict across repeated probes of one operating point; ties
/// between converging and diverging are inconclusive.
pub fn majority_verdict(verdicts: &[Verdict]) -> Verdict {
    let conv = verdicts.iter().filter(|v| **v == Verdict::Converging).count();
    let div = verdicts.iter().filter(|v| **v == Verdict::Diverging).count();
    if conv > div && conv * 2 > verdicts.len() {
        Verdict::Converging
    } else if div > conv && div * 2 > verdicts.len() {
        Verdict::Diverging
    } else {
        Verdict::Inconclusive
    }
}

/// Mean-square gap `K^{-1} sum_k (a_k - b_k)^2`; symmetric in its
/// arguments bit for bit.
fn mean_square_gap(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let diff = x - y;
        acc += diff * diff;
    }
    acc / a.len() as f64
}

/// Least-squares slope of `ln D` against sweep index over the fit points.
fn fitted_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mean_t = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_l = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var = 0.0;
    for (t, l) in points {
        cov += (t - mean_t) * (l - mean_l);
        var += (t - mean_t) * (t - mean_t);
    }
    cov / var
}

/// Runs two replicas of the detection dynamics on one instance, identical
/// except for an i.i.d. uniform perturbation of magnitude `epsilon` on the
/// starting means of the second replica, and fits the growth exponent of
/// their mean-square separation `D^t = K^{-1} sum_k (m_k^A - m_k^B)^2`.
///
/// The perturbation stream is seeded from the instance seed, so the probe
/// is fully deterministic. Sweeps where `D` is exactly zero carry no slope
/// information and are excluded from the fit; if no two positive points
/// remain (for instance with `epsilon = 0`, where the replicas coincide),
/// the verdict is inconclusive with `lambda_hat = NaN` and a diagnostic.
pub fn two_replica_probe(
    instance: &Instance,
    config: &DetectorConfig,
    epsilon: f64,
    window: &ProbeWindow,
) -> Result<StabilityEntry> {
    config.validate()?;
    window.validate()?;
    if !epsilon.is_finite() || epsilon < 0.0 || epsilon >= 1.0 {
        return Err(Error::Parameter(format!(
            "perturbation scale must lie in [0, 1), got {epsilon}"
        )));
    }
    let (n, k) = (instance.n(), instance.k());
    let rule = build_rule(config.quad_order)?;

    let mut perturbed = vec![0.0; k];
    if epsilon > 0.0 {
        let mut rng =
            ChaCha8Rng::seed_from_u64(instance.seed().wrapping_add(PERTURBATION_SEED_OFFSET));
        for slot in &mut perturbed {
            *slot = rng.gen_range(-epsilon..epsilon);
        }
    }
    let mut replica_a = init_state(n, k, config)?;
    let mut replica_b = init_state_from_means(n, k, config, &perturbed)?;

    let horizon = window.burn_in + window.length;
    let mut gaps = Vec::with_capacity(horizon + 1);
    gaps.push(mean_square_gap(&replica_a.m, &replica_b.m));
    for _ in 0..horizon {
        horizontal_update(&mut replica_a, instance, config)?;
        vertical_update_with_rule(&mut replica_a, instance, config, &rule)?;
        horizontal_update(&mut replica_b, instance, config)?;
        vertical_update_with_rule(&mut replica_b, instance, config, &rule)?;
        gaps.push(mean_square_gap(&replica_a.m, &replica_b.m));
    }

    let fit_points = |from: usize| -> Vec<(f64, f64)> {
        (from..=horizon)
            .filter(|&t| gaps[t] > 0.0)
            .map(|t| (t as f64, gaps[t].ln()))
            .collect()
    };
    let mut points = fit_points(window.burn_in);
    if points.len() < 2 {
        points = fit_points(0);
    }

    let (lambda_hat, verdict, note) = if points.len() < 2 {
        let note = if gaps.iter().all(|&d| d == 0.0) {
            "replica separation stayed exactly zero; the perturbation had no effect".to_string()
        } else {
            "separation vanished too quickly to fit a growth rate".to_string()
        };
        (f64::NAN, Verdict::Inconclusive, Some(note))
    } else {
        let slope = fitted_slope(&points);
        if !slope.is_finite() {
            (
                f64::NAN,
                Verdict::Inconclusive,
                Some("slope fit degenerated".to_string()),
            )
        } else if slope > window.slope_threshold {
            (slope, Verdict::Diverging, None)
        } else if slope < -window.slope_threshold {
            (slope, Verdict::Converging, None)
        } else {
            (slope, Verdict::Inconclusive, None)
        }
    };

    Ok(StabilityEntry {
        sigma: config.sigma,
        mode: config.mode,
        x: config.x,
        lambda_hat,
        verdict,
        epsilon,
        seed: instance.seed(),
        note,
    })
}

/// Mean and standard error of one terminal observable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

pub(crate) fn estimate(values: &[f64]) -> Estimate {
    // Bitwise-identical samples have exactly their common value as mean and
    // exactly zero spread; summation rounding must not blur that.
    if values.windows(2).all(|w| w[0] == w[1]) {
        return Estimate { mean: values[0], se: 0.0 };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let mut ss = 0.0;
    for v in values {
        ss += (v - mean) * (v - mean);
    }
    let se = (ss / (n - 1.0)).sqrt() / n.sqrt();
    Estimate { mean, se }
}

/// A labeled batch of detection runs at one system size.
#[derive(Debug, Clone)]
pub struct SummaryGroup {
    pub label: String,
    pub n: usize,
    pub results: Vec<DetectionResult>,
}

/// Terminal-observable statistics for one group (converged runs only).
#[derive(Debug, Clone)]
pub struct GroupStats {
    pub label: String,
    pub n: usize,
    pub converged_runs: usize,
    pub q0: Estimate,
    pub q1: Estimate,
    pub overlap: Estimate,
    pub ber: Estimate,
}

/// Agreement statistics `|mean_a - mean_b| / sqrt(se_a^2 + se_b^2)` for one
/// group pair; exactly equal means give 0 even when both spreads vanish.
#[derive(Debug, Clone)]
pub struct GroupAgreement {
    pub label_a: String,
    pub label_b: String,
    pub z_q0: f64,
    pub z_q1: f64,
    pub z_overlap: f64,
    pub z_ber: f64,
}

/// Cross-group consistency summary of terminal fixed-point observables.
#[derive(Debug, Clone)]
pub struct FixedPointSummary {
    pub groups: Vec<GroupStats>,
    pub agreements: Vec<GroupAgreement>,
}

fn agreement_z(a: Estimate, b: Estimate) -> f64 {
    let diff = (a.mean - b.mean).abs();
    if diff == 0.0 {
        0.0
    } else {
        diff / (a.se * a.se + b.se * b.se).sqrt()
    }
}

/// Summarizes terminal `(Q0, Q1, overlap, ber)` over converged runs per
/// group and the pairwise agreement between groups.
///
/// Requires at least two groups with at least 20 converged runs each; a
/// group with no converged runs at all is reported as the dedicated
/// empty-summary error.
pub fn fixed_point_summary(groups: &[SummaryGroup]) -> Result<FixedPointSummary> {
    if groups.len() < 2 {
        return Err(Error::Parameter(format!(
            "fixed-point summary needs at least two groups, got {}",
            groups.len()
        )));
    }
    let mut stats = Vec::with_capacity(groups.len());
    for group in groups {
        let terminals: Vec<&MacroRecord> = group
            .results
            .iter()
            .filter(|r| r.converged)
            .map(|r| r.trace.terminal())
            .collect();
        if terminals.is_empty() {
            return Err(Error::EmptySummary);
        }
        if terminals.len() < 20 {
            return Err(Error::Parameter(format!(
                "group '{}' has only {} converged runs; need at least 20",
                group.label,
                terminals.len()
            )));
        }
        let collect = |f: fn(&MacroRecord) -> f64| -> Vec<f64> {
            terminals.iter().map(|r| f(r)).collect()
        };
        stats.push(GroupStats {
            label: group.label.clone(),
            n: group.n,
            converged_runs: terminals.len(),
            q0: estimate(&collect(|r| r.q0)),
            q1: estimate(&collect(|r| r.q1)),
            overlap: estimate(&collect(|r| r.overlap)),
            ber: estimate(&collect(|r| r.ber)),
        });
    }
    let mut agreements = Vec::new();
    for i in 0..stats.len() {
        for j in i + 1..stats.len() {
            agreements.push(GroupAgreement {
                label_a: stats[i].label.clone(),
                label_b: stats[j].label.clone(),
                z_q0: agreement_z(stats[i].q0, stats[j].q0),
                z_q1: agreement_z(stats[i].q1, stats[j].q1),
                z_overlap: agreement_z(stats[i].overlap, stats[j].overlap),
                z_ber: agreement_z(stats[i].ber, stats[j].ber),
            });
        }
    }
    Ok(FixedPointSummary { groups: stats, agreements })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::detect;
    use crate::model::generate_instance;
    use approx::assert_abs_diff_eq;

    fn config(sigma: f64) -> DetectorConfig {
        DetectorConfig {
            sigma,
            x: 0.5,
            ..DetectorConfig::default()
        }
    }

    #[test]
    fn perfect_state_scores_perfectly() {
        let instance = generate_instance(8, 4, 0.5, 1).unwrap();
        let mut state = init_state(8, 4, &config(1.0)).unwrap();
        state.m.copy_from_slice(instance.true_bits());
        let record = MacroRecord::from_state(&state, &instance).unwrap();
        assert_eq!(record.overlap, 1.0);
        assert_eq!(record.ber, 0.0);
    }

    #[test]
    fn zero_state_scores_by_the_tie_rule() {
        let instance = generate_instance(8, 4, 0.5, 2).unwrap();
        let state = init_state(8, 4, &config(1.0)).unwrap();
        let record = MacroRecord::from_state(&state, &instance).unwrap();
        let minus = instance.true_bits().iter().filter(|&&b| b == -1.0).count();
        assert_eq!(record.overlap, 0.0);
        assert_eq!(record.ber, minus as f64 / 4.0);
    }

    #[test]
    fn record_rejects_mismatched_dims() {
        let instance = generate_instance(8, 4, 0.5, 3).unwrap();
        let state = init_state(8, 5, &config(1.0)).unwrap();
        assert!(matches!(
            MacroRecord::from_state(&state, &instance),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn record_trace_matches_detect_trace() {
        let instance = generate_instance(16, 8, 0.8, 4).unwrap();
        let cfg = config(0.8);
        let result = detect(&instance, &cfg).unwrap();
        // Rebuild the trajectory by manual stepping and re-record it.
        let rule = build_rule(cfg.quad_order).unwrap();
        let mut state = init_state(16, 8, &cfg).unwrap();
        let mut states = vec![state.clone()];
        for _ in 0..result.iterations_used {
            horizontal_update(&mut state, &instance, &cfg).unwrap();
            vertical_update_with_rule(&mut state, &instance, &cfg, &rule).unwrap();
            states.push(state.clone());
        }
        let trace = record_trace(states.iter(), &instance).unwrap();
        assert_eq!(trace.records, result.trace.records);
    }

    #[test]
    fn zero_perturbation_is_inconclusive_with_note() {
        let instance = generate_instance(12, 6, 0.7, 5).unwrap();
        let entry =
            two_replica_probe(&instance, &config(0.7), 0.0, &ProbeWindow::default()).unwrap();
        assert_eq!(entry.verdict, Verdict::Inconclusive);
        assert!(entry.lambda_hat.is_nan());
        assert!(entry.note.is_some());
    }

    #[test]
    fn strong_noise_probe_converges() {
        for seed in 10..13 {
            let instance = generate_instance(60, 30, 10.0, seed).unwrap();
            let entry =
                two_replica_probe(&instance, &config(10.0), 1e-8, &ProbeWindow::default())
                    .unwrap();
            assert_eq!(entry.verdict, Verdict::Converging, "seed {seed}: {entry:?}");
            assert!(entry.lambda_hat < -ProbeWindow::default().slope_threshold);
        }
    }

    #[test]
    fn probe_is_deterministic() {
        let instance = generate_instance(24, 12, 0.6, 20).unwrap();
        let a = two_replica_probe(&instance, &config(0.6), 1e-8, &ProbeWindow::default()).unwrap();
        let b = two_replica_probe(&instance, &config(0.6), 1e-8, &ProbeWindow::default()).unwrap();
        assert_eq!(a.lambda_hat.to_bits(), b.lambda_hat.to_bits());
        assert_eq!(a.verdict, b.verdict);
    }

    #[test]
    fn gap_is_swap_invariant() {
        let a = [0.3, -0.8, 0.1];
        let b = [-0.2, 0.5, 0.9];
        assert_eq!(
            mean_square_gap(&a, &b).to_bits(),
            mean_square_gap(&b, &a).to_bits()
        );
    }

    #[test]
    fn probe_validates_inputs() {
        let instance = generate_instance(8, 4, 0.5, 30).unwrap();
        let cfg = config(0.5);
        assert!(two_replica_probe(&instance, &cfg, -0.1, &ProbeWindow::default()).is_err());
        assert!(two_replica_probe(&instance, &cfg, 1.0, &ProbeWindow::default()).is_err());
        let bad_window = ProbeWindow { length: 1, ..ProbeWindow::default() };
        assert!(two_replica_probe(&instance, &cfg, 1e-8, &bad_window).is_err());
    }

    #[test]
    fn majority_verdict_rules() {
        use Verdict::*;
        assert_eq!(majority_verdict(&[Converging, Converging, Diverging]), Converging);
        assert_eq!(majority_verdict(&[Diverging, Diverging, Inconclusive]), Diverging);
        assert_eq!(majority_verdict(&[Converging, Diverging]), Inconclusive);
        assert_eq!(
            majority_verdict(&[Inconclusive, Inconclusive, Converging]),
            Inconclusive
        );
    }

    /// Converged runs at one size, for summary tests.
    fn batch(n: usize, k: usize, seeds: std::ops::Range<u64>) -> Vec<DetectionResult> {
        seeds
            .map(|s| {
                let instance = generate_instance(n, k, 1.0, s).unwrap();
                detect(&instance, &config(1.0)).unwrap()
            })
            .filter(|r| r.converged)
            .collect()
    }

    #[test]
    fn summary_of_identical_results_is_degenerate() {
        let instance = generate_instance(16, 8, 1.0, 40).unwrap();
        let run = detect(&instance, &config(1.0)).unwrap();
        assert!(run.converged);
        let groups = vec![
            SummaryGroup {
                label: "a".into(),
                n: 16,
                results: vec![run.clone(); 20],
            },
            SummaryGroup {
                label: "b".into(),
                n: 16,
                results: vec![run; 20],
            },
        ];
        let summary = fixed_point_summary(&groups).unwrap();
        for g in &summary.groups {
            assert_eq!(g.q1.se, 0.0);
            assert_eq!(g.converged_runs, 20);
        }
        let z = &summary.agreements[0];
        assert_eq!(z.z_q0, 0.0);
        assert_eq!(z.z_q1, 0.0);
        assert_eq!(z.z_overlap, 0.0);
        assert_eq!(z.z_ber, 0.0);
    }

    #[test]
    fn disjoint_seed_batches_agree() {
        let a = batch(24, 12, 1000..1040);
        let b = batch(24, 12, 2000..2040);
        assert!(a.len() >= 20 && b.len() >= 20, "batches lost too many runs");
        let groups = vec![
            SummaryGroup { label: "batch-a".into(), n: 24, results: a },
            SummaryGroup { label: "batch-b".into(), n: 24, results: b },
        ];
        let summary = fixed_point_summary(&groups).unwrap();
        let z = &summary.agreements[0];
        assert!(
            z.z_q0 < 3.0 && z.z_q1 < 3.0 && z.z_overlap < 3.0 && z.z_ber < 3.0,
            "agreement drifted: {z:?}"
        );
    }

    #[test]
    fn summary_means_are_order_invariant() {
        let results = batch(24, 12, 300..330);
        assert!(results.len() >= 20);
        let mut reversed = results.clone();
        reversed.reverse();
        let base = fixed_point_summary(&[
            SummaryGroup { label: "x".into(), n: 24, results: results.clone() },
            SummaryGroup { label: "y".into(), n: 24, results: results.clone() },
        ])
        .unwrap();
        let flipped = fixed_point_summary(&[
            SummaryGroup { label: "x".into(), n: 24, results: reversed.clone() },
            SummaryGroup { label: "y".into(), n: 24, results: reversed },
        ])
        .unwrap();
        assert_abs_diff_eq!(
            base.groups[0].q1.mean,
            flipped.groups[0].q1.mean,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(base.groups[0].ber.se, flipped.groups[0].ber.se, epsilon = 1e-12);
    }

    #[test]
    fn summary_validates_group_structure() {
        let results = batch(16, 8, 400..425);
        assert!(results.len() >= 20);
        let solo = vec![SummaryGroup { label: "only".into(), n: 16, results: results.clone() }];
        assert!(matches!(fixed_point_summary(&solo), Err(Error::Parameter(_))));

        let mut unconverged = results.clone();
        for r in &mut unconverged {
            r.converged = false;
        }
        let with_empty = vec![
            SummaryGroup { label: "good".into(), n: 16, results: results.clone() },
            SummaryGroup { label: "empty".into(), n: 16, results: unconverged },
        ];
        assert!(matches!(
            fixed_point_summary(&with_empty),
            Err(Error::EmptySummary)
        ));

        let thin = vec![
            SummaryGroup { label: "good".into(), n: 16, results: results.clone() },
            SummaryGroup { label: "thin".into(), n: 16, results: results[..5].to_vec() },
        ];
        assert!(matches!(fixed_point_summary(&thin), Err(Error::Parameter(_))));
    }
}
