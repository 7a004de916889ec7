//! Chain coefficients, the Itô and Stratonovich per-capita rates, and the
//! drift field `A^0(x) = (x_i F̃_i(x))_i` with its analytic Jacobian.
//!
//! Species are numbered `1..=n` in every public accessor that takes a
//! species index, matching the usual `a_ij` naming. Storage is 0-based.

use std::fmt;
use std::ops::Deref;

use nalgebra::DMatrix;
use num_traits::{Num, ToPrimitive};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Numeric types the combinatorial routines can run on (`f64` and exact
/// rationals).
pub trait Scalar: Clone + Num + PartialOrd + fmt::Debug + ToPrimitive {}

impl<T: Clone + Num + PartialOrd + fmt::Debug + ToPrimitive> Scalar for T {}

/// Tridiagonal coefficient table of a food chain.
///
/// `rate0[0]` is the basal growth rate `a_10`; `rate0[i]` for `i >= 1` is the
/// death rate of species `i + 1`. `lower[i]` is the gain `a_{i+1,i}` and
/// `upper[i]` the loss `a_{i+1,i+2}` (1-based), with `lower[0]` and
/// `upper[n-1]` fixed at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Coefficients<T = f64> {
    pub(crate) rate0: Vec<T>,
    pub(crate) diag: Vec<T>,
    pub(crate) lower: Vec<T>,
    pub(crate) upper: Vec<T>,
}

impl<T: Scalar> Coefficients<T> {
    pub fn n(&self) -> usize {
        self.diag.len()
    }

    /// `a_ij` with 1-based species indices; `j = 0` selects the growth or
    /// death rate. Entries outside the tridiagonal band are zero.
    pub fn a(&self, i: usize, j: usize) -> T {
        assert!(i >= 1 && i <= self.n(), "species index {i} out of range");
        let k = i - 1;
        if j == 0 {
            self.rate0[k].clone()
        } else if j == i {
            self.diag[k].clone()
        } else if j + 1 == i {
            self.lower[k].clone()
        } else if j == i + 1 && j <= self.n() {
            self.upper[k].clone()
        } else {
            T::zero()
        }
    }

    /// Coefficients of the first `k` species only.
    pub fn truncate(&self, k: usize) -> Self {
        assert!(k >= 1 && k <= self.n());
        let mut upper = self.upper[..k].to_vec();
        upper[k - 1] = T::zero();
        Self {
            rate0: self.rate0[..k].to_vec(),
            diag: self.diag[..k].to_vec(),
            lower: self.lower[..k].to_vec(),
            upper,
        }
    }
}

impl Coefficients<f64> {
    /// Per-capita rates written into `out`; allocation-free.
    #[inline]
    pub fn per_capita_into(&self, x: &[f64], out: &mut [f64]) {
        let n = self.n();
        debug_assert_eq!(x.len(), n);
        debug_assert_eq!(out.len(), n);
        for i in 0..n {
            let mut f = if i == 0 { self.rate0[0] } else { -self.rate0[i] };
            f -= self.diag[i] * x[i];
            if i > 0 {
                f += self.lower[i] * x[i - 1];
            }
            if i + 1 < n {
                f -= self.upper[i] * x[i + 1];
            }
            out[i] = f;
        }
    }

    /// Single per-capita rate of 0-based species `i`.
    #[inline]
    pub fn per_capita_at(&self, x: &[f64], i: usize) -> f64 {
        let n = self.n();
        let mut f = if i == 0 { self.rate0[0] } else { -self.rate0[i] };
        f -= self.diag[i] * x[i];
        if i > 0 {
            f += self.lower[i] * x[i - 1];
        }
        if i + 1 < n {
            f -= self.upper[i] * x[i + 1];
        }
        f
    }

    pub fn per_capita(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n()];
        self.per_capita_into(x, &mut out);
        out
    }

    /// Exact rational copy; every finite `f64` converts without rounding.
    pub fn to_exact(&self) -> Coefficients<crate::Rational> {
        let conv = |v: &Vec<f64>| -> Vec<crate::Rational> {
            v.iter()
                .map(|&x| crate::Rational::from_float(x).expect("finite coefficient"))
                .collect()
        };
        Coefficients {
            rate0: conv(&self.rate0),
            diag: conv(&self.diag),
            lower: conv(&self.lower),
            upper: conv(&self.upper),
        }
    }
}

/// A density vector on the closed positive orthant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct State(pub Vec<f64>);

impl State {
    pub fn new(x: Vec<f64>) -> Self {
        Self(x)
    }

    pub fn is_nonnegative(&self) -> bool {
        self.0.iter().all(|&v| v >= 0.0)
    }

    pub fn is_interior(&self) -> bool {
        self.0.iter().all(|&v| v > 0.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for State {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for State {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Validated Itô coefficients and noise amplitudes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec", into = "RawSpec")]
pub struct ChainSpec {
    coeffs: Coefficients<f64>,
    sigma: Vec<f64>,
}

/// Stratonovich-corrected coefficients `ã_ij` together with the (unchanged)
/// noise amplitudes.
#[derive(Clone, Debug, PartialEq)]
pub struct TildeSpec {
    coeffs: Coefficients<f64>,
    sigma: Vec<f64>,
    /// Rounding residual of each noise-corrected rate, so the inverse
    /// correction is exact to within an ulp.
    rate0_residual: Vec<f64>,
}

/// Error-free sum: `a + b == s + e` exactly.
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

macro_rules! shared_accessors {
    ($t:ty) => {
        impl $t {
            pub fn n(&self) -> usize {
                self.coeffs.n()
            }

            /// `a_ij` (1-based species, `j = 0` for the growth/death rate).
            pub fn a(&self, i: usize, j: usize) -> f64 {
                self.coeffs.a(i, j)
            }

            /// Noise amplitude of 1-based species `i`.
            pub fn sigma(&self, i: usize) -> f64 {
                self.sigma[i - 1]
            }

            pub fn sigmas(&self) -> &[f64] {
                &self.sigma
            }

            pub fn coefficients(&self) -> &Coefficients<f64> {
                &self.coeffs
            }

        }
    };
}

shared_accessors!(ChainSpec);
shared_accessors!(TildeSpec);

impl ChainSpec {
    /// The first `k` species as a chain of their own.
    pub fn subchain(&self, k: usize) -> Self {
        Self {
            coeffs: self.coeffs.truncate(k),
            sigma: self.sigma[..k].to_vec(),
        }
    }
}

impl TildeSpec {
    /// The first `k` species as a chain of their own.
    pub fn subchain(&self, k: usize) -> Self {
        Self {
            coeffs: self.coeffs.truncate(k),
            sigma: self.sigma[..k].to_vec(),
            rate0_residual: self.rate0_residual[..k].to_vec(),
        }
    }
}

impl ChainSpec {
    /// Builds and validates a chain from per-role coefficient slices:
    /// `death = [a20..an0]`, `diag = [a11..ann]`,
    /// `lower = [a21, a32, ..]`, `upper = [a12, a23, ..]`.
    pub fn new(
        a10: f64,
        death: &[f64],
        diag: &[f64],
        lower: &[f64],
        upper: &[f64],
        sigma: &[f64],
    ) -> Result<Self, ValidationError> {
        let n = diag.len();
        let shape_ok = n >= 1
            && death.len() + 1 == n
            && lower.len() + 1 == n
            && upper.len() + 1 == n
            && sigma.len() == n;
        if !shape_ok {
            return Err(ValidationError {
                violations: vec![Violation::Shape(format!(
                    "expected n={n} diagonal entries, n-1 death/lower/upper entries and n sigmas"
                ))],
            });
        }
        let a = (0..n)
            .map(|k| RawSpecies {
                i0: (k > 0).then(|| death[k - 1]),
                ii: Some(diag[k]),
                lo: (k > 0).then(|| lower[k - 1]),
                hi: (k + 1 < n).then(|| upper[k]),
            })
            .collect();
        validate(&RawSpec {
            n,
            a10: Some(a10),
            a,
            sigma: sigma.to_vec(),
        })
    }

    /// Per-capita Itô rates `F(x)`.
    pub fn per_capita_f(&self, x: &[f64]) -> Vec<f64> {
        self.coeffs.per_capita(x)
    }

    pub fn tilde(&self) -> TildeSpec {
        tilde_transform(self)
    }

    /// Same coefficients with different noise amplitudes.
    pub fn with_sigma(&self, sigma: &[f64]) -> Result<Self, ValidationError> {
        let mut raw = RawSpec::from(self.clone());
        raw.sigma = sigma.to_vec();
        validate(&raw)
    }

    pub fn all_intraspecific(&self) -> bool {
        self.coeffs.diag.iter().all(|&d| d > 0.0)
    }
}

impl TildeSpec {
    pub fn per_capita(&self, x: &[f64]) -> Vec<f64> {
        self.coeffs.per_capita(x)
    }

    #[inline]
    pub fn per_capita_into(&self, x: &[f64], out: &mut [f64]) {
        self.coeffs.per_capita_into(x, out)
    }

    /// Undoes the Stratonovich correction.
    pub fn to_chain(&self) -> ChainSpec {
        let mut coeffs = self.coeffs.clone();
        for (k, r) in coeffs.rate0.iter_mut().enumerate() {
            let half = 0.5 * self.sigma[k] * self.sigma[k];
            let shift = if k == 0 { half } else { -half };
            let (hi, lo) = two_sum(*r, shift);
            *r = hi + (lo + self.rate0_residual.get(k).copied().unwrap_or(0.0));
        }
        ChainSpec {
            coeffs,
            sigma: self.sigma.clone(),
        }
    }

    /// Builds a tilde table directly from coefficient slices (no sign
    /// validation; the tilde growth rate may legitimately be non-positive).
    pub fn from_parts(
        at10: f64,
        death: &[f64],
        diag: &[f64],
        lower: &[f64],
        upper: &[f64],
        sigma: &[f64],
    ) -> Self {
        let n = diag.len();
        assert!(n >= 1 && death.len() + 1 == n && lower.len() + 1 == n && upper.len() + 1 == n);
        assert_eq!(sigma.len(), n);
        let mut rate0 = vec![at10];
        rate0.extend_from_slice(death);
        let mut lo = vec![0.0];
        lo.extend_from_slice(lower);
        let mut hi = upper.to_vec();
        hi.push(0.0);
        Self {
            coeffs: Coefficients {
                rate0,
                diag: diag.to_vec(),
                lower: lo,
                upper: hi,
            },
            sigma: sigma.to_vec(),
            rate0_residual: vec![0.0; n],
        }
    }
}

/// `ã_10 = a_10 - σ_1²/2`, `ã_i0 = a_i0 + σ_i²/2`, other entries unchanged.
pub fn tilde_transform(spec: &ChainSpec) -> TildeSpec {
    let mut coeffs = spec.coeffs.clone();
    let mut residual = vec![0.0; coeffs.n()];
    for (k, r) in coeffs.rate0.iter_mut().enumerate() {
        let half = 0.5 * spec.sigma[k] * spec.sigma[k];
        let shift = if k == 0 { -half } else { half };
        let (s, e) = two_sum(*r, shift);
        *r = s;
        residual[k] = e;
    }
    TildeSpec {
        coeffs,
        sigma: spec.sigma.clone(),
        rate0_residual: residual,
    }
}

pub fn per_capita_f(spec: &ChainSpec, x: &[f64]) -> Vec<f64> {
    spec.coeffs.per_capita(x)
}

pub fn per_capita_ftilde(tilde: &TildeSpec, x: &[f64]) -> Vec<f64> {
    tilde.coeffs.per_capita(x)
}

/// `A^0(x) = (x_1 F̃_1(x), ..., x_n F̃_n(x))`.
pub fn drift_vector_a0(tilde: &TildeSpec, x: &[f64]) -> Vec<f64> {
    let mut out = tilde.coeffs.per_capita(x);
    for (o, &xi) in out.iter_mut().zip(x) {
        *o *= xi;
    }
    out
}

/// Jacobian of `A^0`; tridiagonal for every `x`.
pub fn drift_jacobian(tilde: &TildeSpec, x: &[f64]) -> DMatrix<f64> {
    let c = &tilde.coeffs;
    let n = c.n();
    let f = c.per_capita(x);
    let mut jac = DMatrix::zeros(n, n);
    for i in 0..n {
        jac[(i, i)] = f[i] - x[i] * c.diag[i];
        if i > 0 {
            jac[(i, i - 1)] = x[i] * c.lower[i];
        }
        if i + 1 < n {
            jac[(i, i + 1)] = -x[i] * c.upper[i];
        }
    }
    jac
}

/// JSON document form of a chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawSpec {
    pub n: usize,
    #[serde(default)]
    pub a10: Option<f64>,
    pub a: Vec<RawSpecies>,
    pub sigma: Vec<f64>,
}

/// One species' row: death rate, intra-specific rate, gain from the prey
/// below (`lo`) and loss to the predator above (`hi`).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RawSpecies {
    #[serde(default)]
    pub i0: Option<f64>,
    #[serde(default)]
    pub ii: Option<f64>,
    #[serde(default)]
    pub lo: Option<f64>,
    #[serde(default)]
    pub hi: Option<f64>,
}

impl From<ChainSpec> for RawSpec {
    fn from(spec: ChainSpec) -> Self {
        let n = spec.n();
        let c = &spec.coeffs;
        let a = (0..n)
            .map(|k| RawSpecies {
                i0: (k > 0).then(|| c.rate0[k]),
                ii: Some(c.diag[k]),
                lo: (k > 0).then(|| c.lower[k]),
                hi: (k + 1 < n).then(|| c.upper[k]),
            })
            .collect();
        RawSpec {
            n,
            a10: Some(c.rate0[0]),
            a,
            sigma: spec.sigma,
        }
    }
}

impl TryFrom<RawSpec> for ChainSpec {
    type Error = ValidationError;
    fn try_from(raw: RawSpec) -> Result<Self, Self::Error> {
        validate(&raw)
    }
}

impl ChainSpec {
    pub fn from_json(text: &str) -> Result<Self, SpecLoadError> {
        let raw: RawSpec = serde_json::from_str(text)?;
        Ok(validate(&raw)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&RawSpec::from(self.clone())).expect("serializable")
    }
}

#[derive(Debug, Error)]
pub enum SpecLoadError {
    #[error("malformed spec document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Invalid(#[from] ValidationError),
}

/// One violated constraint. `path` locates the offending JSON field with
/// 1-based species indices, e.g. `a[2].lo`.
#[derive(Clone, Debug, PartialEq, Error)]
pub enum Violation {
    #[error("{path}: {name} must be > 0")]
    NonPositiveCoefficient { name: String, path: String },
    #[error("{path}: {name} must be >= 0")]
    NegativeDiagonal { name: String, path: String },
    #[error("sigma[{i}]: noise amplitude must be >= 0")]
    NegativeSigma { i: usize },
    #[error("{path}: {name} is not finite")]
    NonFinite { name: String, path: String },
    #[error("{path}: {name} is missing")]
    Missing { name: String, path: String },
    #[error("{path}: {name} must be null for this species")]
    Unexpected { name: String, path: String },
    #[error("{0}")]
    Shape(String),
}

impl Violation {
    /// Coefficient name (`"a21"`) when the violation concerns one.
    pub fn name(&self) -> Option<&str> {
        match self {
            Violation::NonPositiveCoefficient { name, .. }
            | Violation::NegativeDiagonal { name, .. }
            | Violation::NonFinite { name, .. }
            | Violation::Missing { name, .. }
            | Violation::Unexpected { name, .. } => Some(name),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Error)]
pub struct ValidationError {
    pub violations: Vec<Violation>,
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid chain spec: ")?;
        for (k, v) in self.violations.iter().enumerate() {
            if k > 0 {
                write!(f, "; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

fn coef_name(i: usize, j: usize) -> String {
    if i < 10 && j < 10 {
        format!("a{i}{j}")
    } else {
        format!("a{i},{j}")
    }
}

enum Sign {
    Positive,
    NonNegative,
}

/// Checks every sign and shape constraint and collects all violations.
/// A non-positive `a10` is accepted with a logged warning.
pub fn validate(raw: &RawSpec) -> Result<ChainSpec, ValidationError> {
    let mut violations = Vec::new();
    let n = raw.n;
    if n == 0 {
        violations.push(Violation::Shape("n must be >= 1".into()));
        return Err(ValidationError { violations });
    }
    if raw.a.len() != n {
        violations.push(Violation::Shape(format!(
            "a: expected {n} species rows, found {}",
            raw.a.len()
        )));
    }
    if raw.sigma.len() != n {
        violations.push(Violation::Shape(format!(
            "sigma: expected {n} entries, found {}",
            raw.sigma.len()
        )));
    }
    if !violations.is_empty() {
        return Err(ValidationError { violations });
    }

    let mut check = |value: Option<f64>, name: String, path: String, sign: Sign| -> f64 {
        match value {
            None => {
                violations.push(Violation::Missing { name, path });
                0.0
            }
            Some(v) if !v.is_finite() => {
                violations.push(Violation::NonFinite { name, path });
                0.0
            }
            Some(v) => {
                match sign {
                    Sign::Positive if v <= 0.0 => {
                        violations.push(Violation::NonPositiveCoefficient { name, path })
                    }
                    Sign::NonNegative if v < 0.0 => {
                        violations.push(Violation::NegativeDiagonal { name, path })
                    }
                    _ => {}
                }
                v
            }
        }
    };

    let mut rate0 = vec![0.0; n];
    let mut diag = vec![0.0; n];
    let mut lower = vec![0.0; n];
    let mut upper = vec![0.0; n];

    let a10 = match raw.a10 {
        None => check(None, "a10".into(), "a10".into(), Sign::NonNegative),
        Some(v) if !v.is_finite() => check(Some(v), "a10".into(), "a10".into(), Sign::NonNegative),
        Some(v) => {
            if v <= 0.0 {
                log::warn!("a10 = {v} <= 0: the basal species has no intrinsic growth");
            }
            v
        }
    };
    rate0[0] = a10;

    let mut unexpected = Vec::new();
    for (k, row) in raw.a.iter().enumerate() {
        let i = k + 1;
        let p = |field: &str| format!("a[{i}].{field}");
        if k == 0 {
            if let Some(v) = row.i0 {
                if v != a10 {
                    unexpected.push(Violation::Shape(format!(
                        "a[1].i0 = {v} disagrees with a10 = {a10}; leave it null"
                    )));
                }
            }
            diag[0] = check(row.ii, coef_name(1, 1), p("ii"), Sign::Positive);
        } else {
            rate0[k] = check(row.i0, coef_name(i, 0), p("i0"), Sign::Positive);
            diag[k] = check(row.ii, coef_name(i, i), p("ii"), Sign::NonNegative);
            lower[k] = check(row.lo, coef_name(i, i - 1), p("lo"), Sign::Positive);
        }
        if k + 1 < n {
            upper[k] = check(row.hi, coef_name(i, i + 1), p("hi"), Sign::Positive);
        }
        if k == 0 && row.lo.is_some() {
            unexpected.push(Violation::Unexpected {
                name: "lo".into(),
                path: p("lo"),
            });
        }
        if k + 1 == n && row.hi.is_some() {
            unexpected.push(Violation::Unexpected {
                name: "hi".into(),
                path: p("hi"),
            });
        }
    }
    violations.extend(unexpected);
    for (k, &s) in raw.sigma.iter().enumerate() {
        if !s.is_finite() {
            violations.push(Violation::NonFinite {
                name: format!("sigma{}", k + 1),
                path: format!("sigma[{}]", k + 1),
            });
        } else if s < 0.0 {
            violations.push(Violation::NegativeSigma { i: k + 1 });
        }
    }

    if violations.is_empty() {
        Ok(ChainSpec {
            coeffs: Coefficients {
                rate0,
                diag,
                lower,
                upper,
            },
            sigma: raw.sigma.clone(),
        })
    } else {
        Err(ValidationError { violations })
    }
}
