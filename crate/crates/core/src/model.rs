//! CDMA channel model: randomly spread BPSK transmission over AWGN.
//!
//! An [`Instance`] holds one synthesized transmission
//!
//! ```text
//! y_mu = (1/sqrt(N)) sum_k s_{mu k} b0_k + sigma0 * n_mu
//! ```
//!
//! with i.i.d. unbiased +-1 spreading chips `s`, i.i.d. unbiased BPSK bits
//! `b0`, and standard Gaussian noise draws `n`. The stored received vector
//! is exactly reproducible from the stored parts (same summation order).
//!
//! On top of the generative model this module provides the posterior under
//! an assumed noise level sigma: the log-likelihood, an exhaustive
//! maximizer-of-posterior-marginal (MPM) oracle for small user counts, and
//! the exact cavity-field function used as a small-K reference for the
//! message-passing detectors.

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest user count accepted by the 2^K brute-force operations.
pub const DEFAULT_BRUTE_CAP: usize = 20;

/// Decision rule sgn with the fixed tie-break sgn(0) = +1.
pub fn sign_decision(v: f64) -> f64 {
    if v < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Largest f64 strictly below 1; posterior means are clamped inside
/// (-1, 1) so that downstream atanh and strict-inequality invariants hold
/// even where tanh rounds to exactly 1.
pub(crate) const ONE_INSIDE: f64 = 1.0 - f64::EPSILON / 2.0;

pub(crate) fn clamp_mean(m: f64) -> f64 {
    m.clamp(-ONE_INSIDE, ONE_INSIDE)
}

/// N x K matrix of +-1 spreading chips, row-major by sample index mu.
///
/// A column-major copy is kept so that both the per-sample and the per-user
/// reductions stream contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct SpreadingMatrix {
    n: usize,
    k: usize,
    rows: Vec<f64>,
    cols: Vec<f64>,
}

impl SpreadingMatrix {
    /// Builds from row-major +-1 entries; rejects empty dims and any entry
    /// other than exactly -1.0 or +1.0.
    pub fn from_rows(n: usize, k: usize, rows: Vec<f64>) -> Result<Self> {
        if n == 0 || k == 0 {
            return Err(Error::Dimension(format!("codes must be nonempty, got {n}x{k}")));
        }
        if rows.len() != n * k {
            return Err(Error::Dimension(format!(
                "codes length {} does not match {n}x{k}",
                rows.len()
            )));
        }
        if !rows.iter().all(|&s| s == 1.0 || s == -1.0) {
            return Err(Error::Data("spreading chips must be exactly +-1".into()));
        }
        let mut cols = vec![0.0; n * k];
        for mu in 0..n {
            for j in 0..k {
                cols[j * n + mu] = rows[mu * k + j];
            }
        }
        Ok(Self { n, k, rows, cols })
    }

    /// Chip count (spreading factor).
    pub fn n(&self) -> usize {
        self.n
    }

    /// User count.
    pub fn k(&self) -> usize {
        self.k
    }

    /// Row-major view, sample mu outermost.
    pub fn rows(&self) -> &[f64] {
        &self.rows
    }

    /// Row of chips for sample mu.
    pub fn row(&self, mu: usize) -> &[f64] {
        &self.rows[mu * self.k..(mu + 1) * self.k]
    }

    /// Column of chips for user j.
    pub fn col(&self, j: usize) -> &[f64] {
        &self.cols[j * self.n..(j + 1) * self.n]
    }

    pub fn entry(&self, mu: usize, j: usize) -> f64 {
        self.rows[mu * self.k + j]
    }
}

/// One synthesized transmission; all parts retained for exact replay.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    codes: SpreadingMatrix,
    true_bits: Vec<f64>,
    sigma0: f64,
    noise: Vec<f64>,
    y: Vec<f64>,
    seed: u64,
}

/// Assembles y from parts; the single authoritative summation order, shared
/// by generation, fixtures, and the reload validation.
fn assemble_y(codes: &SpreadingMatrix, bits: &[f64], sigma0: f64, noise: &[f64]) -> Vec<f64> {
    let inv_sqrt_n = 1.0 / (codes.n() as f64).sqrt();
    (0..codes.n())
        .map(|mu| {
            let mut acc = 0.0;
            for (s, b) in codes.row(mu).iter().zip(bits) {
                acc += s * b;
            }
            acc * inv_sqrt_n + sigma0 * noise[mu]
        })
        .collect()
}

impl Instance {
    /// Fixture constructor from explicit parts; y is assembled, not taken.
    pub fn from_parts(
        codes: SpreadingMatrix,
        true_bits: Vec<f64>,
        sigma0: f64,
        noise: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        if true_bits.len() != codes.k() {
            return Err(Error::Dimension(format!(
                "bits length {} does not match K={}",
                true_bits.len(),
                codes.k()
            )));
        }
        if noise.len() != codes.n() {
            return Err(Error::Dimension(format!(
                "noise length {} does not match N={}",
                noise.len(),
                codes.n()
            )));
        }
        if !true_bits.iter().all(|&b| b == 1.0 || b == -1.0) {
            return Err(Error::Data("true bits must be exactly +-1".into()));
        }
        if !(sigma0 >= 0.0 && sigma0.is_finite()) {
            return Err(Error::Parameter(format!("sigma0 must be finite and >= 0, got {sigma0}")));
        }
        if !noise.iter().all(|v| v.is_finite()) {
            return Err(Error::Data("noise draws must be finite".into()));
        }
        let y = assemble_y(&codes, &true_bits, sigma0, &noise);
        Ok(Self { codes, true_bits, sigma0, noise, y, seed })
    }

    pub fn codes(&self) -> &SpreadingMatrix {
        &self.codes
    }

    pub fn true_bits(&self) -> &[f64] {
        &self.true_bits
    }

    pub fn sigma0(&self) -> f64 {
        self.sigma0
    }

    pub fn noise(&self) -> &[f64] {
        &self.noise
    }

    pub fn received(&self) -> &[f64] {
        &self.y
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n(&self) -> usize {
        self.codes.n()
    }

    pub fn k(&self) -> usize {
        self.codes.k()
    }

    /// Load factor beta = K/N.
    pub fn beta(&self) -> f64 {
        self.codes.k() as f64 / self.codes.n() as f64
    }

    /// Fraction of sign decisions differing from the true bits.
    pub fn ber(&self, decisions: &[f64]) -> f64 {
        let wrong = decisions
            .iter()
            .zip(&self.true_bits)
            .filter(|(d, b)| d != b)
            .count();
        wrong as f64 / self.true_bits.len() as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&InstanceDoc::from(self)).expect("instance serialization")
    }

    /// Parses the JSON document form and revalidates every invariant,
    /// including exact reconstruction of y from the stored parts.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: InstanceDoc = serde_json::from_str(text)?;
        let codes = SpreadingMatrix::from_rows(
            doc.n,
            doc.k,
            doc.codes.iter().map(|&c| c as f64).collect(),
        )?;
        let bits: Vec<f64> = doc.bits.iter().map(|&b| b as f64).collect();
        let inst = Instance::from_parts(codes, bits, doc.sigma0, doc.noise, doc.seed)?;
        if inst.y != doc.y {
            return Err(Error::Data(
                "stored y does not reproduce from codes, bits, and noise".into(),
            ));
        }
        Ok(inst)
    }
}

/// Serialized document form: chips and bits as small integers, reals at
/// full round-trip precision.
#[derive(Serialize, Deserialize)]
struct InstanceDoc {
    n: usize,
    k: usize,
    sigma0: f64,
    seed: u64,
    codes: Vec<i8>,
    bits: Vec<i8>,
    noise: Vec<f64>,
    y: Vec<f64>,
}

impl From<&Instance> for InstanceDoc {
    fn from(inst: &Instance) -> Self {
        Self {
            n: inst.n(),
            k: inst.k(),
            sigma0: inst.sigma0,
            seed: inst.seed,
            codes: inst.codes.rows().iter().map(|&s| s as i8).collect(),
            bits: inst.true_bits.iter().map(|&b| b as i8).collect(),
            noise: inst.noise.clone(),
            y: inst.y.clone(),
        }
    }
}

/// Draws a fresh instance. Draw order is fixed forever: chips row-major,
/// then bits, then noise, all from one ChaCha8 stream seeded by `seed`.
/// Chips and bits take the low bit of successive 32-bit words.
pub fn generate_instance(n: usize, k: usize, sigma0: f64, seed: u64) -> Result<Instance> {
    if n == 0 || k == 0 {
        return Err(Error::Dimension(format!("need n >= 1 and k >= 1, got {n}x{k}")));
    }
    if !(sigma0 >= 0.0 && sigma0.is_finite()) {
        return Err(Error::Parameter(format!("sigma0 must be finite and >= 0, got {sigma0}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pm1 = |rng: &mut ChaCha8Rng| if rng.next_u32() & 1 == 1 { 1.0 } else { -1.0 };
    let chips: Vec<f64> = (0..n * k).map(|_| pm1(&mut rng)).collect();
    let codes = SpreadingMatrix::from_rows(n, k, chips)?;
    let bits: Vec<f64> = (0..k).map(|_| pm1(&mut rng)).collect();
    let noise: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Instance::from_parts(codes, bits, sigma0, noise, seed)
}

/// An instance paired with the noise level assumed at the receiver; the
/// posterior P(b|y) is defined with respect to this sigma, which need not
/// equal the true sigma0.
#[derive(Debug, Clone, Copy)]
pub struct PosteriorQuery<'a> {
    instance: &'a Instance,
    sigma: f64,
}

impl<'a> PosteriorQuery<'a> {
    pub fn new(instance: &'a Instance, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Parameter(format!("sigma must be finite and > 0, got {sigma}")));
        }
        Ok(Self { instance, sigma })
    }

    pub fn instance(&self) -> &'a Instance {
        self.instance
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

/// Log-likelihood of a candidate bit vector:
/// sum_mu [ -(y_mu - u_mu)^2 / (2 sigma^2) - log(2 pi sigma^2)/2 ]
/// with u_mu = (1/sqrt(N)) sum_k s_{mu k} b_k.
pub fn log_likelihood(query: &PosteriorQuery, b: &[f64]) -> Result<f64> {
    let inst = query.instance();
    if b.len() != inst.k() {
        return Err(Error::Dimension(format!(
            "candidate bits length {} does not match K={}",
            b.len(),
            inst.k()
        )));
    }
    if !b.iter().all(|&v| v == 1.0 || v == -1.0) {
        return Err(Error::Data("candidate bits must be exactly +-1".into()));
    }
    if !inst.received().iter().all(|v| v.is_finite()) {
        return Err(Error::Data("received vector contains non-finite values".into()));
    }
    let s2 = query.sigma() * query.sigma();
    let inv_sqrt_n = 1.0 / (inst.n() as f64).sqrt();
    let norm = 0.5 * (2.0 * std::f64::consts::PI * s2).ln();
    let mut ll = 0.0;
    for mu in 0..inst.n() {
        let mut u = 0.0;
        for (s, bk) in inst.codes().row(mu).iter().zip(b) {
            u += s * bk;
        }
        let r = inst.received()[mu] - u * inv_sqrt_n;
        ll += -r * r / (2.0 * s2) - norm;
    }
    Ok(ll)
}

/// Compensated accumulator; the brute-force sums run over up to 2^20 terms
/// of wildly varying magnitude.
#[derive(Clone, Copy, Default)]
struct Kahan {
    sum: f64,
    carry: f64,
}

impl Kahan {
    fn add(&mut self, v: f64) {
        let t = v - self.carry;
        let s = self.sum + t;
        self.carry = (s - self.sum) - t;
        self.sum = s;
    }
}

/// Reflected-Gray-code walk over all 2^K sign vectors. Yields the flipped
/// user index before each configuration after the first; `step` must update
/// whatever running quantities depend on the current bits.
fn gray_walk(k: usize, mut step: impl FnMut(Option<usize>, &[f64])) {
    let mut bits = vec![1.0; k];
    step(None, &bits);
    for i in 1u64..(1u64 << k) {
        let j = i.trailing_zeros() as usize;
        bits[j] = -bits[j];
        step(Some(j), &bits);
    }
}

/// Exact posterior marginals by summation over all 2^K configurations,
/// with the default user cap.
pub fn exhaustive_mpm(query: &PosteriorQuery) -> Result<(Vec<f64>, Vec<f64>)> {
    exhaustive_mpm_capped(query, DEFAULT_BRUTE_CAP)
}

/// Exact posterior marginals m*_k = sum_b b_k P(b|y) and sign decisions.
///
/// Enumeration walks a Gray code so each configuration costs O(N); weights
/// are handled in log domain with max-subtraction and compensated sums.
/// Marginals are clamped one ulp inside +-1.
pub fn exhaustive_mpm_capped(query: &PosteriorQuery, cap: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let inst = query.instance();
    let (n, k) = (inst.n(), inst.k());
    if k > cap {
        return Err(Error::Capacity { users: k, cap });
    }
    let s2 = query.sigma() * query.sigma();
    let inv_sqrt_n = 1.0 / (n as f64).sqrt();
    let y = inst.received();
    if !y.iter().all(|v| v.is_finite()) {
        return Err(Error::Data("received vector contains non-finite values".into()));
    }

    // Pass 1: residual energies for every configuration (constant likelihood
    // terms cancel under normalization).
    let mut u: Vec<f64> = (0..n)
        .map(|mu| inst.codes().row(mu).iter().sum::<f64>() * inv_sqrt_n)
        .collect();
    let mut half_e = Vec::with_capacity(1usize << k);
    let log_w = |u: &[f64]| {
        let mut e = 0.0;
        for (ym, um) in y.iter().zip(u) {
            let r = ym - um;
            e += r * r;
        }
        -e / (2.0 * s2)
    };
    {
        let u_ref = &mut u;
        let codes = inst.codes();
        let mut first = true;
        gray_walk(k, |flip, bits| {
            if let Some(j) = flip {
                let two_b = 2.0 * bits[j] * inv_sqrt_n;
                for (um, s) in u_ref.iter_mut().zip(codes.col(j)) {
                    *um += two_b * s;
                }
            } else {
                debug_assert!(first);
                first = false;
            }
            half_e.push(log_w(u_ref));
        });
    }
    let peak = half_e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    // Pass 2: normalized accumulation of the denominator and the K signed
    // numerators, replaying the same walk.
    let mut den = Kahan::default();
    let mut num = vec![Kahan::default(); k];
    let mut idx = 0usize;
    gray_walk(k, |_, bits| {
        let w = (half_e[idx] - peak).exp();
        idx += 1;
        den.add(w);
        for (acc, b) in num.iter_mut().zip(bits) {
            acc.add(w * b);
        }
    });

    let marginals: Vec<f64> = num.iter().map(|acc| clamp_mean(acc.sum / den.sum)).collect();
    let decisions: Vec<f64> = marginals.iter().map(|&m| sign_decision(m)).collect();
    Ok((marginals, decisions))
}

/// Exact cavity field for sample mu and user k with the default cap.
pub fn exact_cavity_field(
    query: &PosteriorQuery,
    mu: usize,
    k: usize,
    h: &[f64],
) -> Result<f64> {
    exact_cavity_field_capped(query, mu, k, h, DEFAULT_BRUTE_CAP)
}

/// Exact cavity field
/// h_hat = atanh( sum_b b_k P(y_mu|b) prod_{j!=k} w_j(b_j)
///              / sum_b     P(y_mu|b) prod_{j!=k} w_j(b_j) )
/// with tilting weights w_j(b_j) = e^{h_j b_j} / (2 cosh h_j).
///
/// Computed as (L+ - L-)/2 where L+- are log-sum-exp over the b_k = +-1
/// halves: atanh((A-B)/(A+B)) = (ln A - ln B)/2 for positive A, B, so no
/// ratio near +-1 is ever formed. Weight normalizers cancel in the
/// difference and are dropped.
pub fn exact_cavity_field_capped(
    query: &PosteriorQuery,
    mu: usize,
    k: usize,
    h: &[f64],
    cap: usize,
) -> Result<f64> {
    let inst = query.instance();
    let users = inst.k();
    if users > cap {
        return Err(Error::Capacity { users, cap });
    }
    if mu >= inst.n() {
        return Err(Error::Dimension(format!("sample index {mu} out of range N={}", inst.n())));
    }
    if k >= users {
        return Err(Error::Dimension(format!("user index {k} out of range K={users}")));
    }
    if h.len() != users - 1 {
        return Err(Error::Dimension(format!(
            "cavity fields length {} does not match K-1={}",
            h.len(),
            users - 1
        )));
    }
    if !h.iter().all(|v| v.is_finite()) {
        return Err(Error::Data("cavity fields must be finite".into()));
    }
    let s2 = query.sigma() * query.sigma();
    let inv_sqrt_n = 1.0 / (inst.n() as f64).sqrt();
    let y_mu = inst.received()[mu];
    if !y_mu.is_finite() {
        return Err(Error::Data("received sample is non-finite".into()));
    }
    // h indexed over j != k in ascending user order.
    let field_of = |j: usize| if j < k { h[j] } else { h[j - 1] };

    let mut exps_plus = Vec::with_capacity(1usize << (users - 1));
    let mut exps_minus = Vec::with_capacity(1usize << (users - 1));
    let mut u = inst.codes().row(mu).iter().sum::<f64>() * inv_sqrt_n;
    let mut tilt: f64 = (0..users).filter(|&j| j != k).map(field_of).sum();
    gray_walk(users, |flip, bits| {
        if let Some(j) = flip {
            u += 2.0 * bits[j] * inst.codes().entry(mu, j) * inv_sqrt_n;
            if j != k {
                tilt += 2.0 * bits[j] * field_of(j);
            }
        }
        let r = y_mu - u;
        let e = -r * r / (2.0 * s2) + tilt;
        if bits[k] == 1.0 {
            exps_plus.push(e);
        } else {
            exps_minus.push(e);
        }
    });

    let lse = |v: &[f64]| {
        let peak = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut acc = Kahan::default();
        for e in v {
            acc.add((e - peak).exp());
        }
        peak + acc.sum.ln()
    };
    Ok(0.5 * (lse(&exps_plus) - lse(&exps_minus)))
}
