//! Lyapunov functions for the chain, their explicit drift constants, and a
//! shell scan that checks each drift inequality on concrete points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::model::ChainSpec;

/// Slack for rounding in global inequalities.
pub const MARGIN_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Error)]
pub enum LyapunovError {
    #[error("a single species has no drift gap (alpha is a minimum over species 2..n)")]
    SingleSpecies,
    #[error("c1 must be positive, got {0}")]
    NonPositiveC1(f64),
    #[error("all noise amplitudes vanish; q0 is unbounded")]
    ZeroNoise,
    #[error("point {0:?} is not interior")]
    NonInteriorPoint(Vec<f64>),
    #[error("weights too large: {family} fails at {point:?}")]
    WeightsTooLarge { family: &'static str, point: Vec<f64> },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// `U(x) = 1 + Σ c_i x_i` with the constants of `LU ≤ −αU + β`, `Γ(U) ≤ γU²`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LyapunovU {
    pub c: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

pub fn build_u(spec: &ChainSpec, c1: f64) -> Result<LyapunovU, LyapunovError> {
    let n = spec.n();
    if n < 2 {
        return Err(LyapunovError::SingleSpecies);
    }
    if !(c1 > 0.0) {
        return Err(LyapunovError::NonPositiveC1(c1));
    }
    let mut c = vec![c1];
    for i in 2..=n {
        let prev = c[i - 2];
        c.push(prev * spec.a(i - 1, i) / spec.a(i, i - 1));
    }
    let alpha = (2..=n).map(|i| spec.a(i, 0)).fold(f64::INFINITY, f64::min);
    let gamma = spec.sigmas().iter().map(|s| s * s).fold(0.0, f64::max);
    let slope = spec.a(1, 0) + alpha;
    let vertex = if slope > 0.0 {
        c1 * slope * slope / (4.0 * spec.a(1, 1))
    } else {
        0.0
    };
    Ok(LyapunovU {
        c,
        alpha,
        beta: alpha + vertex,
        gamma,
    })
}

impl LyapunovU {
    pub fn n(&self) -> usize {
        self.c.len()
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        1.0 + self.c.iter().zip(x).map(|(c, x)| c * x).sum::<f64>()
    }

    pub fn q_zero(&self) -> Result<f64, LyapunovError> {
        q_zero(self)
    }

    /// `k_{2q} = q(α − (q−1)γ/2)`.
    pub fn k2(&self, q: f64) -> f64 {
        q * (self.alpha - 0.5 * (q - 1.0) * self.gamma)
    }

    /// Constant `k_1` such that `qβu^{q−1} − k_{2q}u^q ≤ k_1 − (k_{2q}/2)u^q`
    /// for all `u ≥ 1`; requires `k_{2q} > 0`.
    pub fn k1(&self, q: f64) -> f64 {
        let half = 0.5 * self.k2(q);
        let g = |u: f64| q * self.beta * u.powf(q - 1.0) - half * u.powf(q);
        let ustar = (2.0 * (q - 1.0) * self.beta / self.k2(q)).max(1.0);
        g(ustar).max(g(1.0))
    }
}

/// `q0 = 1 + 2α/γ`, the root of `−α + (q−1)γ/2 = 0`.
pub fn q_zero(u: &LyapunovU) -> Result<f64, LyapunovError> {
    if u.gamma > 0.0 {
        Ok(1.0 + 2.0 * u.alpha / u.gamma)
    } else {
        Err(LyapunovError::ZeroNoise)
    }
}

/// Value, gradient and diagonal of the Hessian at a point; the generator and
/// carré du champ need nothing else.
#[derive(Clone, Debug, PartialEq)]
pub struct Jet {
    pub value: f64,
    pub grad: Vec<f64>,
    pub hess_diag: Vec<f64>,
}

impl Jet {
    /// `φ ∘ self` given `φ, φ', φ''` at `self.value`.
    fn compose(&self, phi: f64, d1: f64, d2: f64) -> Jet {
        Jet {
            value: phi,
            grad: self.grad.iter().map(|g| d1 * g).collect(),
            hess_diag: self
                .grad
                .iter()
                .zip(&self.hess_diag)
                .map(|(g, h)| d2 * g * g + d1 * h)
                .collect(),
        }
    }

    fn add_scaled(&self, other: &Jet, s: f64) -> Jet {
        Jet {
            value: self.value + s * other.value,
            grad: self.grad.iter().zip(&other.grad).map(|(a, b)| a + s * b).collect(),
            hess_diag: self
                .hess_diag
                .iter()
                .zip(&other.hess_diag)
                .map(|(a, b)| a + s * b)
                .collect(),
        }
    }

    fn powf(&self, q: f64) -> Jet {
        let v = self.value;
        self.compose(v.powf(q), q * v.powf(q - 1.0), q * (q - 1.0) * v.powf(q - 2.0))
    }
}

/// The closed-form families the theory works with.
#[derive(Clone, Debug, PartialEq)]
pub enum Family {
    U,
    UPow { q: f64 },
    LnU,
    /// `V = U − Σ p_i ln x_i`.
    V { p: Vec<f64> },
    /// `V^q + C·U^q` for `q ≤ 2`, `V^q + C·U^{2q−2}` otherwise.
    Wq { q: f64, p: Vec<f64>, c: f64 },
    /// `W_q^{1 − b/q}`.
    WBetaQ { q: f64, p: Vec<f64>, c: f64, b: f64 },
    /// `(U / ∏ x_i^{p_i})^ε`.
    WHat { p: Vec<f64>, eps: f64 },
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::U => "U",
            Family::UPow { .. } => "U^q",
            Family::LnU => "lnU",
            Family::V { .. } => "V",
            Family::Wq { .. } => "W_q",
            Family::WBetaQ { .. } => "W_beta_q",
            Family::WHat { .. } => "W_hat",
        }
    }

    fn needs_interior(&self) -> bool {
        matches!(
            self,
            Family::V { .. } | Family::Wq { .. } | Family::WBetaQ { .. } | Family::WHat { .. }
        )
    }
}

fn u_jet(u: &LyapunovU, x: &[f64]) -> Jet {
    Jet {
        value: u.value(x),
        grad: u.c.clone(),
        hess_diag: vec![0.0; u.n()],
    }
}

fn v_jet(u: &LyapunovU, p: &[f64], x: &[f64]) -> Jet {
    let base = u_jet(u, x);
    Jet {
        value: base.value - p.iter().zip(x).map(|(p, x)| p * x.ln()).sum::<f64>(),
        grad: base.grad.iter().zip(p).zip(x).map(|((c, p), x)| c - p / x).collect(),
        hess_diag: p.iter().zip(x).map(|(p, x)| p / (x * x)).collect(),
    }
}

fn wq_jet(u: &LyapunovU, q: f64, p: &[f64], c: f64, x: &[f64]) -> Jet {
    let r = if q <= 2.0 { q } else { 2.0 * q - 2.0 };
    v_jet(u, p, x).powf(q).add_scaled(&u_jet(u, x).powf(r), c)
}

pub fn family_jet(u: &LyapunovU, family: &Family, x: &[f64]) -> Result<Jet, LyapunovError> {
    if x.len() != u.n() {
        return Err(LyapunovError::InvalidParameter(format!(
            "point has {} coordinates, expected {}",
            x.len(),
            u.n()
        )));
    }
    let interior = x.iter().all(|&v| v > 0.0);
    let nonneg = x.iter().all(|&v| v >= 0.0);
    if (family.needs_interior() && !interior) || !nonneg {
        return Err(LyapunovError::NonInteriorPoint(x.to_vec()));
    }
    Ok(match family {
        Family::U => u_jet(u, x),
        Family::UPow { q } => u_jet(u, x).powf(*q),
        Family::LnU => {
            let j = u_jet(u, x);
            let v = j.value;
            j.compose(v.ln(), 1.0 / v, -1.0 / (v * v))
        }
        Family::V { p } => v_jet(u, p, x),
        Family::Wq { q, p, c } => wq_jet(u, *q, p, *c, x),
        Family::WBetaQ { q, p, c, b } => wq_jet(u, *q, p, *c, x).powf(1.0 - b / q),
        Family::WHat { p, eps } => {
            let j = u_jet(u, x);
            let uv = j.value;
            let h = Jet {
                value: uv.ln() - p.iter().zip(x).map(|(p, x)| p * x.ln()).sum::<f64>(),
                grad: j.grad.iter().zip(p).zip(x).map(|((c, p), x)| c / uv - p / x).collect(),
                hess_diag: j
                    .grad
                    .iter()
                    .zip(p)
                    .zip(x)
                    .map(|((c, p), x)| -c * c / (uv * uv) + p / (x * x))
                    .collect(),
            };
            let w = (eps * h.value).exp();
            h.compose(w, eps * w, eps * eps * w)
        }
    })
}

/// `Lg(x) = Σ x_i F_i(x) ∂_i g + ½ Σ σ_i² x_i² ∂_ii g`.
pub fn generator_on_family(spec: &ChainSpec, u: &LyapunovU, family: &Family, x: &[f64]) -> Result<f64, LyapunovError> {
    let jet = family_jet(u, family, x)?;
    Ok(generator_from_jet(spec, &jet, x))
}

fn generator_from_jet(spec: &ChainSpec, jet: &Jet, x: &[f64]) -> f64 {
    let f = spec.per_capita_f(x);
    (0..x.len())
        .map(|i| {
            let s = spec.sigmas()[i];
            x[i] * f[i] * jet.grad[i] + 0.5 * s * s * x[i] * x[i] * jet.hess_diag[i]
        })
        .sum()
}

/// `Γ(g)(x) = Σ σ_i² x_i² (∂_i g)²`.
pub fn carre_du_champ_on_family(
    spec: &ChainSpec,
    u: &LyapunovU,
    family: &Family,
    x: &[f64],
) -> Result<f64, LyapunovError> {
    let jet = family_jet(u, family, x)?;
    Ok(carre_from_jet(spec, &jet, x))
}

fn carre_from_jet(spec: &ChainSpec, jet: &Jet, x: &[f64]) -> f64 {
    (0..x.len())
        .map(|i| {
            let s = spec.sigmas()[i];
            s * s * x[i] * x[i] * jet.grad[i] * jet.grad[i]
        })
        .sum()
}

/// `Σ|F_i(x)| ≤ C_F·U(x)` on the orthant.
pub fn f_growth_constant(spec: &ChainSpec, u: &LyapunovU) -> f64 {
    let n = spec.n();
    let at_zero: f64 = (1..=n).map(|i| spec.a(i, 0).abs()).sum();
    let mut col = 0.0f64;
    for j in 1..=n {
        let mut s = spec.a(j, j).abs();
        if j > 1 {
            s += spec.a(j - 1, j).abs();
        }
        if j < n {
            s += spec.a(j + 1, j).abs();
        }
        col = col.max(s / u.c[j - 1]);
    }
    at_zero.max(col)
}

/// Evaluators for the rate families with validated parameters.
#[derive(Clone, Debug)]
pub struct RateFunctions {
    pub u: LyapunovU,
    pub q: f64,
    pub p: Vec<f64>,
    pub c: f64,
    pub eps: f64,
}

impl RateFunctions {
    fn eval(&self, f: &Family, x: &[f64]) -> f64 {
        family_jet(&self.u, f, x).map(|j| j.value).unwrap_or(f64::NAN)
    }

    pub fn v(&self, x: &[f64]) -> f64 {
        self.eval(&Family::V { p: self.p.clone() }, x)
    }

    pub fn w_q(&self, x: &[f64]) -> f64 {
        self.eval(&Family::Wq { q: self.q, p: self.p.clone(), c: self.c }, x)
    }

    /// `W_{b,q} = W_q^{1 − b/q}`.
    pub fn w_beta_q(&self, b: f64, x: &[f64]) -> f64 {
        self.w_q(x).powf(1.0 - b / self.q)
    }

    pub fn w_hat(&self, x: &[f64]) -> f64 {
        self.eval(&Family::WHat { p: self.p.clone(), eps: self.eps }, x)
    }

    /// `true` when `W_q` takes the `V^q + C·U^q` form.
    pub fn uses_u_power_q(&self) -> bool {
        self.q <= 2.0
    }
}

/// Admissible `q` lies in `(1, min(q0, (q0+2)/2))`; with no noise any `q > 1`.
pub fn build_rate_functions(
    u: &LyapunovU,
    q: f64,
    p: &[f64],
    c: f64,
    eps: f64,
) -> Result<RateFunctions, LyapunovError> {
    let upper = match q_zero(u) {
        Ok(q0) => q0.min(0.5 * (q0 + 2.0)),
        Err(_) => f64::INFINITY,
    };
    if !(q > 1.0 && q < upper) {
        return Err(LyapunovError::InvalidParameter(format!("q = {q} outside (1, {upper})")));
    }
    if p.len() != u.n() || p.iter().any(|&v| !(v >= 0.0)) {
        return Err(LyapunovError::InvalidParameter("weights must be n nonnegative values".into()));
    }
    if !(c > 0.0 && eps > 0.0) {
        return Err(LyapunovError::InvalidParameter("C and eps must be positive".into()));
    }
    let rf = RateFunctions {
        u: u.clone(),
        q,
        p: p.to_vec(),
        c,
        eps,
    };
    let plan = ScanPlan::default();
    for pt in scan_points(u.n(), &plan) {
        let x = &pt.x;
        if !(rf.v(x) > 0.0) {
            return Err(LyapunovError::WeightsTooLarge { family: "V", point: x.clone() });
        }
        if !(rf.w_hat(x) >= 1.0) {
            return Err(LyapunovError::WeightsTooLarge { family: "W_hat", point: x.clone() });
        }
    }
    Ok(rf)
}

/// Default `p_i = 0.01 / n`.
pub fn default_weights(n: usize) -> Vec<f64> {
    vec![0.01 / n as f64; n]
}

pub const DEFAULT_EPS_STAR: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScanPlan {
    /// Shell radii (Euclidean norm), increasing.
    pub radii: Vec<f64>,
    pub samples_per_shell: usize,
    pub seed: u64,
}

impl Default for ScanPlan {
    fn default() -> Self {
        Self::log_shells(1e-3, 1e3, 25, 400, 0)
    }
}

impl ScanPlan {
    /// `count` log-spaced radii in `[r_min, r_max]`.
    pub fn log_shells(r_min: f64, r_max: f64, count: usize, samples_per_shell: usize, seed: u64) -> Self {
        let count = count.max(2);
        let (a, b) = (r_min.ln(), r_max.ln());
        Self {
            radii: (0..count)
                .map(|k| (a + (b - a) * k as f64 / (count - 1) as f64).exp())
                .collect(),
            samples_per_shell,
            seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ScanPoint {
    pub shell: usize,
    pub x: Vec<f64>,
}

fn first_primes(k: usize) -> Vec<u64> {
    let mut out = Vec::with_capacity(k);
    let mut c = 2u64;
    while out.len() < k {
        if out.iter().take_while(|&&p| p * p <= c).all(|&p| !c.is_multiple_of(p)) {
            out.push(c);
        }
        c += 1;
    }
    out
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// Points on each shell: the coordinate axes, the diagonal, and Halton
/// directions (randomly rotated by the seed) in the positive orthant.
pub fn scan_points(n: usize, plan: &ScanPlan) -> Vec<ScanPoint> {
    let primes = first_primes(n);
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let shift: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for i in 0..n {
        // Slightly tilted axis so log families stay finite.
        let mut d = vec![1e-6; n];
        d[i] = 1.0;
        dirs.push(d);
    }
    dirs.push(vec![1.0; n]);
    let halton = plan.samples_per_shell.saturating_sub(dirs.len());
    for k in 0..halton as u64 {
        let d: Vec<f64> = (0..n)
            .map(|j| {
                let u = (radical_inverse(k + 1, primes[j]) + shift[j]).fract();
                // Exponential spacings give a uniform direction on the simplex.
                -(1.0 - u).max(1e-300).ln()
            })
            .collect();
        dirs.push(d);
    }
    for d in &mut dirs {
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in d.iter_mut() {
            *v /= norm;
        }
    }
    let mut out = Vec::with_capacity(plan.radii.len() * dirs.len());
    for (s, &r) in plan.radii.iter().enumerate() {
        for d in &dirs {
            out.push(ScanPoint {
                shell: s,
                x: d.iter().map(|v| (r * v).max(f64::MIN_POSITIVE)).collect(),
            });
        }
    }
    out
}

/// Whether an inequality is claimed everywhere or only far out.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Global,
    Asymptotic,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScanResult {
    pub inequality: &'static str,
    pub passed: bool,
    pub min_margin: f64,
    pub worst_point: Vec<f64>,
    pub activation_radius: Option<f64>,
    #[serde(skip)]
    pub scope: Scope,
    /// `(radius, min margin on that shell)`.
    #[serde(skip)]
    pub shell_margins: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RateCertificate {
    pub u: LyapunovU,
    pub q0: Option<f64>,
    pub q: f64,
    pub k1q: f64,
    pub k2q: f64,
    pub p0: f64,
    pub p0_exp: Option<f64>,
    pub p_weights: Vec<f64>,
    pub c_wq: f64,
    pub eps_star: f64,
    pub f_growth: f64,
    pub scan_results: Vec<ScanResult>,
}

impl RateCertificate {
    pub fn passed(&self) -> bool {
        self.scan_results.iter().all(|r| r.passed)
    }

    pub fn result(&self, id: &str) -> Option<&ScanResult> {
        self.scan_results.iter().find(|r| r.inequality == id)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CertInputs {
    pub c1: f64,
    /// Moment order for the `U^q` drift; defaults to `(1 + q0)/2`, or 2 without noise.
    pub q: Option<f64>,
    /// Weight in the growth-penalized drift; defaults to `α / (2 C_F)`.
    pub p0: Option<f64>,
    /// Weight in the log drift (exponential case); defaults to `1 / (2 C_F Σ c_i/a_ii)`.
    pub p0_exp: Option<f64>,
    pub p_weights: Option<Vec<f64>>,
    pub c_wq: f64,
    pub eps_star: f64,
}

impl Default for CertInputs {
    fn default() -> Self {
        Self {
            c1: 1.0,
            q: None,
            p0: None,
            p0_exp: None,
            p_weights: None,
            c_wq: 1.0,
            eps_star: DEFAULT_EPS_STAR,
        }
    }
}

struct Tracker {
    id: &'static str,
    scope: Scope,
    shells: Vec<(f64, f64, Vec<f64>)>,
}

impl Tracker {
    fn new(id: &'static str, scope: Scope, radii: &[f64]) -> Self {
        Self {
            id,
            scope,
            shells: radii.iter().map(|&r| (r, f64::INFINITY, Vec::new())).collect(),
        }
    }

    fn record(&mut self, shell: usize, margin: f64, x: &[f64]) {
        let m = if margin.is_nan() { f64::NEG_INFINITY } else { margin };
        let slot = &mut self.shells[shell];
        if m < slot.1 || slot.2.is_empty() {
            slot.1 = m;
            slot.2 = x.to_vec();
        }
    }

    fn finish(self) -> ScanResult {
        let (min_margin, worst_point) = self
            .shells
            .iter()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|s| (s.1, s.2.clone()))
            .unwrap_or((f64::INFINITY, Vec::new()));
        let shell_margins: Vec<(f64, f64)> = self.shells.iter().map(|s| (s.0, s.1)).collect();
        let (passed, activation_radius) = match self.scope {
            Scope::Global => (min_margin >= -MARGIN_TOLERANCE, None),
            Scope::Asymptotic => {
                // Smallest shell beyond which every shell passes strictly.
                let mut first = shell_margins.len();
                for k in (0..shell_margins.len()).rev() {
                    if shell_margins[k].1 > 0.0 {
                        first = k;
                    } else {
                        break;
                    }
                }
                if first < shell_margins.len() {
                    (true, Some(shell_margins[first].0))
                } else {
                    (false, None)
                }
            }
        };
        ScanResult {
            inequality: self.id,
            passed,
            min_margin,
            worst_point,
            activation_radius,
            scope: self.scope,
            shell_margins,
        }
    }
}

/// Evaluates every drift inequality on the scan points. Margins are
/// `rhs − lhs`, so a nonnegative margin means the inequality holds there.
pub fn verify_drift_inequalities(
    spec: &ChainSpec,
    inputs: &CertInputs,
    plan: &ScanPlan,
) -> Result<RateCertificate, LyapunovError> {
    let u = build_u(spec, inputs.c1)?;
    let n = spec.n();
    let q0 = q_zero(&u).ok();
    let q = inputs.q.unwrap_or(match q0 {
        Some(q0) => 0.5 * (1.0 + q0),
        None => 2.0,
    });
    if !(q > 1.0) {
        return Err(LyapunovError::InvalidParameter(format!("q = {q} must exceed 1")));
    }
    let k2q = u.k2(q);
    let k1q = if k2q > 0.0 { u.k1(q) } else { f64::INFINITY };
    let cf = f_growth_constant(spec, &u);
    let p0 = inputs.p0.unwrap_or(u.alpha / (2.0 * cf));
    let exp_case = spec.all_intraspecific();
    let p0_exp = if exp_case {
        let s: f64 = (1..=n).map(|i| u.c[i - 1] / spec.a(i, i)).sum();
        Some(inputs.p0_exp.unwrap_or(1.0 / (2.0 * cf * s)))
    } else {
        None
    };
    let p_weights = inputs.p_weights.clone().unwrap_or_else(|| default_weights(n));

    let radii = &plan.radii;
    let mut lu_drift = Tracker::new("lu_linear_drift", Scope::Global, radii);
    let mut gamma_u = Tracker::new("carre_du_champ_u", Scope::Global, radii);
    let mut uq_drift = Tracker::new("u_q_drift", Scope::Global, radii);
    let mut exc0 = Tracker::new("exc0_log_growth", Scope::Asymptotic, radii);
    let mut exc1 = Tracker::new("exc1_penalized_drift", Scope::Asymptotic, radii);
    let mut exc2 = Tracker::new("exc2_rate_growth", Scope::Global, radii);
    let mut exp_log = exp_case.then(|| Tracker::new("exp_log_drift", Scope::Asymptotic, radii));

    let upow = Family::UPow { q };
    for pt in scan_points(n, plan) {
        let x = &pt.x;
        let uv = u.value(x);
        let ujet = u_jet(&u, x);
        let lu = generator_from_jet(spec, &ujet, x);
        let gu = carre_from_jet(spec, &ujet, x);
        let sum_f: f64 = spec.per_capita_f(x).iter().map(|f| f.abs()).sum();
        lu_drift.record(pt.shell, -u.alpha * uv + u.beta - lu, x);
        gamma_u.record(pt.shell, u.gamma * uv * uv - gu, x);
        let luq = generator_on_family(spec, &u, &upow, x)?;
        uq_drift.record(pt.shell, k1q - 0.5 * k2q * uv.powf(q) - luq, x);
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > std::f64::consts::E {
            exc0.record(pt.shell, uv / norm.ln(), x);
        } else {
            exc0.record(pt.shell, f64::NEG_INFINITY, x);
        }
        exc1.record(pt.shell, -(lu + p0 * sum_f), x);
        exc2.record(pt.shell, cf * uv - sum_f, x);
        if let (Some(t), Some(p0e)) = (exp_log.as_mut(), p0_exp) {
            let llog = lu / uv - 0.5 * gu / (uv * uv);
            t.record(pt.shell, -(llog + p0e * sum_f), x);
        }
    }
    let mut scan_results = vec![
        lu_drift.finish(),
        gamma_u.finish(),
        uq_drift.finish(),
        exc0.finish(),
        exc1.finish(),
        exc2.finish(),
    ];
    if let Some(t) = exp_log {
        scan_results.push(t.finish());
    }
    if k2q <= 0.0 {
        if let Some(r) = scan_results.iter_mut().find(|r| r.inequality == "u_q_drift") {
            r.passed = false;
        }
    }
    Ok(RateCertificate {
        u,
        q0,
        q,
        k1q,
        k2q,
        p0,
        p0_exp,
        p_weights,
        c_wq: inputs.c_wq,
        eps_star: inputs.eps_star,
        f_growth: cf,
        scan_results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_chain(sigma: &[f64]) -> ChainSpec {
        ChainSpec::new(3.0, &[1.0], &[1.0, 0.0], &[1.0], &[1.0], sigma).unwrap()
    }

    fn three_chain(sigma: &[f64]) -> ChainSpec {
        ChainSpec::new(4.0, &[0.5, 0.3], &[1.0, 0.2, 0.4], &[0.8, 1.2], &[0.6, 0.9], sigma).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn constants_of_two_chain() {
        let u = build_u(&two_chain(&[0.5, 0.0]), 1.0).unwrap();
        assert_eq!(u.c, vec![1.0, 1.0]);
        assert_eq!(u.alpha, 1.0);
        assert_eq!(u.beta, 5.0);
        assert_eq!(u.gamma, 0.25);
        assert_eq!(u.q_zero().unwrap(), 9.0);
    }

    #[test]
    fn beta_matches_grid_search() {
        let spec = three_chain(&[0.1, 0.2, 0.0]);
        let u = build_u(&spec, 1.0).unwrap();
        let (a10, a11) = (spec.a(1, 0), spec.a(1, 1));
        let best = (0..200_000)
            .map(|k| {
                let x1 = k as f64 * 1e-4;
                x1 * (a10 - a11 * x1) + u.alpha * x1
            })
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((u.beta - (u.alpha + best)).abs() < 1e-6);
    }

    #[test]
    fn single_species_and_zero_noise() {
        let one = ChainSpec::new(1.0, &[], &[1.0], &[], &[], &[0.2]).unwrap();
        assert_eq!(build_u(&one, 1.0), Err(LyapunovError::SingleSpecies));
        let u = build_u(&two_chain(&[0.0, 0.0]), 1.0).unwrap();
        assert_eq!(q_zero(&u), Err(LyapunovError::ZeroNoise));
        let unit = LyapunovU { c: vec![1.0, 1.0], alpha: 1.0, beta: 1.0, gamma: 1.0 };
        assert_eq!(q_zero(&unit).unwrap(), 3.0);
    }

    #[test]
    fn carre_du_champ_hand_value() {
        let spec = two_chain(&[1.0, 0.0]);
        let u = build_u(&spec, 1.0).unwrap();
        assert_eq!(carre_du_champ_on_family(&spec, &u, &Family::U, &[2.0, 5.0]).unwrap(), 4.0);
        let quiet = two_chain(&[0.0, 0.0]);
        let uq = build_u(&quiet, 1.0).unwrap();
        for f in [Family::U, Family::LnU, Family::UPow { q: 1.7 }, Family::V { p: vec![0.1, 0.1] }] {
            assert_eq!(carre_du_champ_on_family(&quiet, &uq, &f, &[0.3, 2.0]).unwrap(), 0.0);
        }
    }

    #[test]
    fn generator_identities() {
        let spec = three_chain(&[0.3, 0.2, 0.4]);
        let u = build_u(&spec, 1.0).unwrap();
        let plan = ScanPlan::log_shells(1e-2, 1e2, 10, 60, 1);
        for pt in scan_points(3, &plan) {
            let x = &pt.x;
            let uv = u.value(x);
            let lu = generator_on_family(&spec, &u, &Family::U, x).unwrap();
            let gu = carre_du_champ_on_family(&spec, &u, &Family::U, x).unwrap();
            // Telescoped form of LU.
            let tele = u.c[0] * x[0] * (spec.a(1, 0) - spec.a(1, 1) * x[0])
                - (2..=3).map(|i| u.c[i - 1] * spec.a(i, 0) * x[i - 1]).sum::<f64>()
                - (2..=3).map(|i| u.c[i - 1] * spec.a(i, i) * x[i - 1] * x[i - 1]).sum::<f64>();
            assert!((lu - tele).abs() <= 1e-10 * lu.abs().max(tele.abs()).max(1.0), "{lu} vs {tele}");
            let lln = generator_on_family(&spec, &u, &Family::LnU, x).unwrap();
            let ident = lu / uv - 0.5 * gu / (uv * uv);
            assert!((lln - ident).abs() <= 1e-12 * lln.abs().max(ident.abs()).max(1e-300));
            let q = 1.8;
            let luq = generator_on_family(&spec, &u, &Family::UPow { q }, x).unwrap();
            let chain = q * uv.powf(q - 1.0) * lu + 0.5 * q * (q - 1.0) * uv.powf(q - 2.0) * gu;
            assert!(rel(luq, chain) < 1e-12);
        }
    }

    #[test]
    fn lu_vanishes_at_noise_free_equilibrium() {
        let spec = two_chain(&[0.0, 0.0]);
        let u = build_u(&spec, 1.0).unwrap();
        assert_eq!(generator_on_family(&spec, &u, &Family::U, &[1.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn jets_match_finite_differences() {
        let spec = three_chain(&[0.3, 0.2, 0.4]);
        let u = build_u(&spec, 1.0).unwrap();
        let p = vec![0.02, 0.01, 0.03];
        let families = [
            Family::UPow { q: 2.5 },
            Family::LnU,
            Family::V { p: p.clone() },
            Family::Wq { q: 1.5, p: p.clone(), c: 2.0 },
            Family::Wq { q: 2.5, p: p.clone(), c: 2.0 },
            Family::WBetaQ { q: 1.5, p: p.clone(), c: 1.0, b: 1.2 },
            Family::WHat { p: p.clone(), eps: 0.05 },
        ];
        let x = [0.7, 1.3, 0.4];
        for f in &families {
            let j = family_jet(&u, f, &x).unwrap();
            for i in 0..3 {
                let h = 1e-4 * x[i];
                let at = |d: f64| {
                    let mut y = x;
                    y[i] += d;
                    family_jet(&u, f, &y).unwrap().value
                };
                let d1 = (at(h) - at(-h)) / (2.0 * h);
                let d2 = (at(h) - 2.0 * j.value + at(-h)) / (h * h);
                assert!((d1 - j.grad[i]).abs() < 1e-6 * j.grad[i].abs().max(1.0), "{} d1", f.name());
                assert!((d2 - j.hess_diag[i]).abs() < 1e-4 * j.hess_diag[i].abs().max(1.0), "{} d2", f.name());
            }
        }
    }

    #[test]
    fn log_families_reject_boundary() {
        let spec = two_chain(&[0.1, 0.0]);
        let u = build_u(&spec, 1.0).unwrap();
        let f = Family::V { p: vec![0.01, 0.01] };
        assert!(matches!(
            generator_on_family(&spec, &u, &f, &[1.0, 0.0]),
            Err(LyapunovError::NonInteriorPoint(_))
        ));
        assert!(generator_on_family(&spec, &u, &Family::U, &[1.0, 0.0]).is_ok());
    }

    #[test]
    fn rate_functions() {
        let spec = two_chain(&[0.5, 0.0]);
        let u = build_u(&spec, 1.0).unwrap();
        let rf = build_rate_functions(&u, 1.5, &[0.01, 0.01], 1.0, 0.05).unwrap();
        assert!(rf.uses_u_power_q());
        let v = rf.v(&[1.0, 2.0]);
        assert!((v - (4.0 - 0.01 * 2f64.ln())).abs() < 1e-12);
        assert!((v - 3.99307).abs() < 1e-5);
        let zero = build_rate_functions(&u, 1.5, &[0.0, 0.0], 1.0, 0.05).unwrap();
        let x = [0.4, 3.0];
        assert_eq!(zero.v(&x), u.value(&x));
        assert!((zero.w_hat(&x) - u.value(&x).powf(0.05)).abs() < 1e-12);
        assert!(matches!(
            build_rate_functions(&u, 1.5, &[5.0, 5.0], 1.0, 0.05),
            Err(LyapunovError::WeightsTooLarge { .. })
        ));
        assert!(build_rate_functions(&u, 9.5, &[0.01, 0.01], 1.0, 0.05).is_err());
    }

    #[test]
    fn k2q_sign_flips_at_q0() {
        let u = build_u(&two_chain(&[0.5, 0.3]), 1.0).unwrap();
        let q0 = u.q_zero().unwrap();
        for q in [1.1, 2.0, 0.5 * (1.0 + q0), q0 - 1e-6] {
            assert!(u.k2(q) > 0.0);
        }
        for q in [q0 + 1e-6, q0 + 1.0] {
            assert!(u.k2(q) < 0.0);
        }
    }

    #[test]
    fn certificate_passes_on_persistent_chain() {
        let spec = three_chain(&[0.4, 0.1, 0.3]);
        let plan = ScanPlan::log_shells(1e-3, 1e3, 25, 400, 7);
        let cert = verify_drift_inequalities(&spec, &CertInputs::default(), &plan).unwrap();
        for r in &cert.scan_results {
            assert!(r.passed, "{}: {} at {:?}", r.inequality, r.min_margin, r.worst_point);
        }
        let exp = cert.result("exp_log_drift").unwrap();
        let far: Vec<f64> = exp.shell_margins.iter().filter(|s| s.0 >= 10.0).map(|s| s.1).collect();
        assert!(far.windows(2).all(|w| w[1] > w[0]), "{far:?}");
    }

    #[test]
    fn exponential_case_only_with_all_diagonals() {
        let spec = two_chain(&[0.4, 0.0]);
        let cert = verify_drift_inequalities(&spec, &CertInputs::default(), &ScanPlan::default()).unwrap();
        assert!(cert.result("exp_log_drift").is_none());
        assert!(cert.passed());
    }
}
