//! Persistence parameter δ̃(k) over adjacent-transposition matchings, the
//! positive equilibrium of F̃, and regime classification.
//!
//! Every matching sum `Σ_{α ∈ A_a^b} Π_j ã_{j,α(j)}` is a continuant: a
//! fixed point `j` contributes `ã_jj`, a transposition `(j j+1)` contributes
//! `ã_{j,j+1} ã_{j+1,j}`. The routines are generic over [`Scalar`] so the
//! same code runs in `f64` and in exact rational arithmetic.

use serde::Serialize;
use thiserror::Error;

use crate::model::{ChainSpec, Coefficients, Scalar, State, TildeSpec};
use crate::Rational;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PersistenceError {
    #[error("empty index range [{a}, {b}]")]
    EmptyRange { a: usize, b: usize },
}

/// A product of disjoint adjacent transpositions `(i i+1)` acting on
/// `{lo, ..., hi}`; all other indices are fixed.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AdjacentMatching {
    lo: usize,
    hi: usize,
    /// Left ends `i` of the transpositions `(i i+1)`, increasing.
    pairs: Vec<usize>,
}

impl AdjacentMatching {
    pub fn identity(lo: usize, hi: usize) -> Self {
        Self {
            lo,
            hi,
            pairs: Vec::new(),
        }
    }

    pub fn pairs(&self) -> &[usize] {
        &self.pairs
    }

    pub fn range(&self) -> (usize, usize) {
        (self.lo, self.hi)
    }

    /// Image of `j` under the permutation.
    pub fn image(&self, j: usize) -> usize {
        debug_assert!(j >= self.lo && j <= self.hi);
        if self.pairs.binary_search(&j).is_ok() {
            j + 1
        } else if j > 0 && self.pairs.binary_search(&(j - 1)).is_ok() {
            j - 1
        } else {
            j
        }
    }

    /// Images of `lo..=hi` in order.
    pub fn as_permutation(&self) -> Vec<usize> {
        (self.lo..=self.hi).map(|j| self.image(j)).collect()
    }

    pub fn is_involution(&self) -> bool {
        (self.lo..=self.hi).all(|j| self.image(self.image(j)) == j)
    }

    /// `Π_{j=lo}^{hi} a_{j,α(j)}`.
    pub fn weight<T: Scalar>(&self, c: &Coefficients<T>) -> T {
        (self.lo..=self.hi).fold(T::one(), |acc, j| acc * c.a(j, self.image(j)))
    }
}

/// All elements of `A_a^b`, identity first, by an explicit-stack walk that
/// either fixes the current index or pairs it with the next one.
pub fn adjacent_matchings(a: usize, b: usize) -> Result<Vec<AdjacentMatching>, PersistenceError> {
    if a > b {
        return Err(PersistenceError::EmptyRange { a, b });
    }
    let mut out = Vec::new();
    let mut stack: Vec<(usize, Vec<usize>)> = vec![(a, Vec::new())];
    while let Some((pos, pairs)) = stack.pop() {
        if pos > b {
            out.push(AdjacentMatching { lo: a, hi: b, pairs });
            continue;
        }
        if pos < b {
            let mut with_pair = pairs.clone();
            with_pair.push(pos);
            stack.push((pos + 2, with_pair));
        }
        stack.push((pos + 1, pairs));
    }
    Ok(out)
}

/// `Σ_{α ∈ A_a^b} Π_{j=a}^b a_{j,α(j)}` via the continuant recurrence
/// (1-based species; an empty range `b = a - 1` gives 1).
pub fn matching_sum<T: Scalar>(c: &Coefficients<T>, a: usize, b: usize) -> T {
    if b + 1 == a {
        return T::one();
    }
    assert!(a >= 1 && a <= b && b <= c.n(), "bad range [{a}, {b}]");
    let mut before = T::one();
    let mut current = c.a(a, a);
    for k in a + 1..=b {
        let next =
            c.a(k, k) * current.clone() + c.a(k - 1, k) * c.a(k, k - 1) * before;
        before = current;
        current = next;
    }
    current
}

/// Same sum by explicit enumeration of `A_a^b`.
pub fn matching_sum_by_enumeration<T: Scalar>(c: &Coefficients<T>, a: usize, b: usize) -> T {
    if b + 1 == a {
        return T::one();
    }
    adjacent_matchings(a, b)
        .expect("non-empty range")
        .iter()
        .fold(T::zero(), |acc, m| acc + m.weight(c))
}

/// Upper-triangular table of matching sums, `get(a, b)` for `1 <= a <= b + 1`.
#[derive(Clone, Debug)]
pub struct MatchingTable<T> {
    n: usize,
    /// rows[a - 1][b - a + 1] = M(a, b), with column 0 the empty product.
    rows: Vec<Vec<T>>,
}

impl<T: Scalar> MatchingTable<T> {
    pub fn new(c: &Coefficients<T>) -> Self {
        let n = c.n();
        let rows = (1..=n)
            .map(|a| {
                let mut row = Vec::with_capacity(n - a + 2);
                row.push(T::one());
                row.push(c.a(a, a));
                for k in a + 1..=n {
                    let m = row.len();
                    let next = c.a(k, k) * row[m - 1].clone()
                        + c.a(k - 1, k) * c.a(k, k - 1) * row[m - 2].clone();
                    row.push(next);
                }
                row
            })
            .collect();
        Self { n, rows }
    }

    pub fn get(&self, a: usize, b: usize) -> T {
        if a == self.n + 1 && b == self.n {
            return T::one();
        }
        self.rows[a - 1][b + 1 - a].clone()
    }
}

fn lower_product<T: Scalar>(c: &Coefficients<T>, from: usize, to: usize) -> T {
    (from..=to).fold(T::one(), |acc, l| acc * c.a(l, l - 1))
}

/// δ̃(k) by the defining double sum restricted to species `1..=k`.
pub fn delta_direct<T: Scalar>(c: &Coefficients<T>, k: usize) -> T {
    assert!(k >= 1 && k <= c.n());
    let head = c.a(1, 0) * lower_product(c, 2, k);
    (2..=k).fold(head, |acc, m| {
        acc - c.a(m, 0) * lower_product(c, m + 1, k) * matching_sum(c, 1, m - 1)
    })
}

/// All of δ̃(1..=n) by `δ̃(k) = ã_{k,k-1} δ̃(k-1) - ã_k0 M(1, k-1)`.
pub fn delta_recurrence<T: Scalar>(c: &Coefficients<T>) -> Vec<T> {
    let n = c.n();
    let mut out = Vec::with_capacity(n);
    out.push(c.a(1, 0));
    // Running continuant M(1, k-1) and M(1, k-2).
    let mut m_prev = T::one();
    let mut m_cur = c.a(1, 1);
    for k in 2..=n {
        let d = c.a(k, k - 1) * out[k - 2].clone() - c.a(k, 0) * m_cur.clone();
        out.push(d);
        let next = c.a(k, k) * m_cur.clone() + c.a(k - 1, k) * c.a(k, k - 1) * m_prev;
        m_prev = m_cur;
        m_cur = next;
    }
    out
}

/// Sum of the absolute values of the terms in the definition of δ̃(k); the
/// magnitude against which cancellation is judged.
pub fn delta_scale(c: &Coefficients<f64>, k: usize) -> f64 {
    let head = (c.a(1, 0) * lower_product(c, 2, k)).abs();
    (2..=k).fold(head, |acc, m| {
        acc + (c.a(m, 0) * lower_product(c, m + 1, k) * matching_sum(c, 1, m - 1)).abs()
    })
}

pub fn delta_tilde(tilde: &TildeSpec, k: usize) -> f64 {
    delta_direct(tilde.coefficients(), k)
}

pub fn delta_tilde_all(tilde: &TildeSpec) -> Vec<f64> {
    delta_recurrence(tilde.coefficients())
}

/// Formal solution of `F̃(x) = 0` from the closed form: `x_n = δ̃(n)/M(1,n)`,
/// then
/// `x_i = [x_n M(i+1,n) + Σ_{k=i+1}^n ã_k0 Π_{l>k} ã_{l,l-1} M(i+1,k-1)]
///        / Π_{j=i+1}^n ã_{j,j-1}`.
pub fn equilibrium_closed_form<T: Scalar>(c: &Coefficients<T>) -> Vec<T> {
    let n = c.n();
    let table = MatchingTable::new(c);
    let delta_n = delta_recurrence(c).pop().expect("n >= 1");
    let xn = delta_n / table.get(1, n);
    let mut x = vec![T::zero(); n];
    for i in 1..n {
        let mut acc = xn.clone() * table.get(i + 1, n);
        for k in i + 1..=n {
            acc = acc + c.a(k, 0) * lower_product(c, k + 1, n) * table.get(i + 1, k - 1);
        }
        x[i - 1] = acc / lower_product(c, i + 1, n);
    }
    x[n - 1] = xn;
    x
}

/// The equilibrium does not lie in the open orthant.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("no positive equilibrium: δ̃(n) = {delta_n} <= 0")]
pub struct Infeasible {
    pub delta_n: f64,
    /// Solution of the linear system, generally with a non-positive entry.
    pub formal: Vec<f64>,
}

/// Unique `p* >> 0` with `F̃(p*) = 0`, when δ̃(n) > 0.
pub fn equilibrium(tilde: &TildeSpec) -> Result<State, Infeasible> {
    let c = tilde.coefficients();
    let formal = equilibrium_closed_form(c);
    let delta_n = *delta_recurrence(c).last().unwrap();
    if delta_n > 0.0 && formal.iter().all(|&v| v > 0.0) {
        Ok(State(formal))
    } else {
        Err(Infeasible { delta_n, formal })
    }
}

/// Exact rational evaluations, used as cancellation-free references.
pub mod exact {
    use super::*;

    pub fn delta_tilde_all(tilde: &TildeSpec) -> Vec<Rational> {
        delta_recurrence(&tilde.coefficients().to_exact())
    }

    pub fn equilibrium(tilde: &TildeSpec) -> Vec<Rational> {
        equilibrium_closed_form(&tilde.coefficients().to_exact())
    }
}

/// Relative tie threshold for δ̃(k) = 0.
pub const DELTA_TIE_RTOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum DeltaSign {
    Positive,
    Zero,
    Negative,
}

pub fn delta_sign(c: &Coefficients<f64>, k: usize, value: f64) -> DeltaSign {
    if value.abs() <= DELTA_TIE_RTOL * delta_scale(c, k) {
        DeltaSign::Zero
    } else if value > 0.0 {
        DeltaSign::Positive
    } else {
        DeltaSign::Negative
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Regime {
    /// δ̃(n) > 0 with σ_1 > 0 or σ_n > 0.
    Persistent,
    /// δ̃(j*) > 0 and δ̃(j*+1) < 0 with σ_1 > 0 or σ_{j*} > 0. `j* = 0`
    /// means the basal species itself cannot grow (ã_10 < 0).
    ExtinctAbove(usize),
    /// First k with δ̃(k) numerically zero.
    Boundary(usize),
    /// The coefficients decide a regime but the noise pattern is not one the
    /// theory covers.
    UnsupportedNoise,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegimeReport {
    pub delta: Vec<f64>,
    pub signs: Vec<DeltaSign>,
    pub equilibrium: Option<State>,
    pub classification: Regime,
    /// Extinction index implied by the coefficients alone, even when the
    /// classification is `UnsupportedNoise`.
    pub j_star: Option<usize>,
    pub noise_note: String,
}

impl RegimeReport {
    pub fn classification_label(&self) -> &'static str {
        match self.classification {
            Regime::Persistent => "persistent",
            Regime::ExtinctAbove(_) => "extinct_above",
            Regime::Boundary(_) => "boundary",
            Regime::UnsupportedNoise => "unsupported_noise",
        }
    }

    /// Document emitted by `analyze`.
    pub fn to_json(&self) -> serde_json::Value {
        let boundary = match self.classification {
            Regime::Boundary(k) => Some(k),
            _ => None,
        };
        serde_json::json!({
            "delta": self.delta,
            "pstar": self.equilibrium.as_ref().map(|p| p.0.clone()),
            "classification": self.classification_label(),
            "j_star": self.j_star,
            "boundary_index": boundary,
            "noise_note": self.noise_note,
        })
    }
}

pub fn classify(spec: &ChainSpec) -> RegimeReport {
    let tilde = spec.tilde();
    let c = tilde.coefficients();
    let n = spec.n();
    let delta = delta_recurrence(c);
    let signs: Vec<DeltaSign> = delta
        .iter()
        .enumerate()
        .map(|(k, &d)| delta_sign(c, k + 1, d))
        .collect();
    let equilibrium = if signs[n - 1] == DeltaSign::Positive {
        equilibrium(&tilde).ok()
    } else {
        None
    };
    let s1 = spec.sigma(1) > 0.0;
    let first_nonpositive = signs.iter().position(|&s| s != DeltaSign::Positive);

    let (classification, j_star, noise_note) = match first_nonpositive {
        None => {
            let sn = spec.sigma(n) > 0.0;
            if s1 || sn {
                let which = match (s1, sn) {
                    (true, true) if n > 1 => "sigma_1 > 0 and sigma_n > 0",
                    (true, _) => "sigma_1 > 0",
                    _ => "sigma_n > 0",
                };
                (
                    Regime::Persistent,
                    None,
                    format!("persistence hypothesis holds: {which}"),
                )
            } else {
                (
                    Regime::UnsupportedNoise,
                    None,
                    "delta(n) > 0 but sigma_1 = sigma_n = 0: persistence results need noise on the bottom or top species".to_string(),
                )
            }
        }
        Some(idx) if signs[idx] == DeltaSign::Zero => (
            Regime::Boundary(idx + 1),
            None,
            format!("delta({}) is zero within tolerance; critical case not decided", idx + 1),
        ),
        Some(0) => (
            Regime::ExtinctAbove(0),
            Some(0),
            "tilde a10 < 0: the basal species (and hence the whole chain) dies out".to_string(),
        ),
        Some(idx) => {
            let js = idx;
            let sj = spec.sigma(js) > 0.0;
            if s1 || sj {
                let which = if s1 { "sigma_1 > 0".to_string() } else { format!("sigma_{js} > 0") };
                (
                    Regime::ExtinctAbove(js),
                    Some(js),
                    format!("extinction hypothesis holds: {which}; species {}..{n} die out", js + 1),
                )
            } else {
                (
                    Regime::UnsupportedNoise,
                    Some(js),
                    format!(
                        "delta({js}) > 0 >= delta({}) but sigma_1 = sigma_{js} = 0: extinction results need noise on species 1 or {js}",
                        js + 1
                    ),
                )
            }
        }
    };

    RegimeReport {
        delta,
        signs,
        equilibrium,
        classification,
        j_star,
        noise_note,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_traits::{One, Zero};

    fn tilde2() -> TildeSpec {
        TildeSpec::from_parts(3.0, &[1.0], &[1.0, 0.0], &[1.0], &[1.0], &[0.0, 0.0])
    }

    #[test]
    fn matchings_of_small_ranges() {
        let a13 = adjacent_matchings(1, 3).unwrap();
        let perms: Vec<Vec<usize>> = a13.iter().map(|m| m.as_permutation()).collect();
        assert_eq!(perms, vec![vec![1, 2, 3], vec![1, 3, 2], vec![2, 1, 3]]);

        let a14 = adjacent_matchings(1, 4).unwrap();
        assert_eq!(a14.len(), 5);
        assert!(a14.iter().any(|m| m.pairs() == [1, 3]));
        assert!(a14.iter().all(|m| m.is_involution()));

        let a11 = adjacent_matchings(1, 1).unwrap();
        assert_eq!(a11, vec![AdjacentMatching::identity(1, 1)]);
        assert_eq!(adjacent_matchings(3, 2), Err(PersistenceError::EmptyRange { a: 3, b: 2 }));
    }

    #[test]
    fn matching_counts_follow_fibonacci() {
        let counts: Vec<usize> = (1..=15).map(|b| adjacent_matchings(1, b).unwrap().len()).collect();
        for b in 3..counts.len() {
            assert_eq!(counts[b], counts[b - 1] + counts[b - 2]);
        }
        assert_eq!(&counts[..5], &[1, 2, 3, 5, 8]);
    }

    #[test]
    fn delta_small_cases_match_displayed_formulas() {
        let t = TildeSpec::from_parts(
            1.7,
            &[0.3, 0.45],
            &[0.9, 0.25, 0.6],
            &[1.3, 0.8],
            &[0.6, 1.1],
            &[0.0; 3],
        );
        let a = |i, j| t.a(i, j);
        let d2 = a(1, 0) * a(2, 1) - a(2, 0) * a(1, 1);
        let d3 = a(1, 0) * a(3, 2) * a(2, 1)
            - a(2, 0) * a(3, 2) * a(1, 1)
            - a(3, 0) * a(2, 2) * a(1, 1)
            - a(3, 0) * a(1, 2) * a(2, 1);
        assert!((delta_tilde(&t, 2) - d2).abs() < 1e-14);
        assert!((delta_tilde(&t, 3) - d3).abs() < 1e-14);
        assert_eq!(delta_tilde(&t, 1), 1.7);
        let all = delta_tilde_all(&t);
        assert!((all[1] - d2).abs() < 1e-14 && (all[2] - d3).abs() < 1e-14);
    }

    #[test]
    fn two_species_example() {
        let t = tilde2();
        assert_eq!(delta_tilde(&t, 2), 2.0);
        assert_eq!(delta_tilde_all(&t), vec![3.0, 2.0]);
        let enumerated = matching_sum_by_enumeration(t.coefficients(), 1, 2);
        assert_eq!(enumerated, matching_sum(t.coefficients(), 1, 2));
        assert_eq!(equilibrium(&t).unwrap().0, vec![1.0, 2.0]);
    }

    #[test]
    fn boundary_equilibrium_is_infeasible_with_zero_top() {
        // ã10 ã21 = ã20 ã11.
        let t = TildeSpec::from_parts(2.0, &[1.0], &[1.0, 0.0], &[0.5], &[1.0], &[0.0; 2]);
        let err = equilibrium(&t).unwrap_err();
        assert_eq!(err.delta_n, 0.0);
        assert_eq!(err.formal[1], 0.0);
    }

    #[test]
    fn exact_mode_agrees() {
        let t = TildeSpec::from_parts(1.5, &[0.25, 0.5], &[1.0, 0.5, 0.0], &[1.0, 2.0], &[0.5, 1.0], &[0.0; 3]);
        let exact = exact::delta_tilde_all(&t);
        let float = delta_tilde_all(&t);
        for (e, f) in exact.iter().zip(&float) {
            assert_eq!(Rational::from_float(*f).unwrap(), *e);
        }
        let p = exact::equilibrium(&t);
        let c = t.coefficients().to_exact();
        // Residual of the system is identically zero in exact arithmetic.
        for i in 1..=3 {
            let mut f = if i == 1 { c.a(1, 0) } else { Rational::zero() - c.a(i, 0) };
            f -= c.a(i, i) * p[i - 1].clone();
            if i > 1 {
                f += c.a(i, i - 1) * p[i - 2].clone();
            }
            if i < 3 {
                f -= c.a(i, i + 1) * p[i].clone();
            }
            assert!(f.is_zero());
        }
        assert!(MatchingTable::new(&c).get(4, 3).is_one());
    }

    fn spec_from(a10: f64, sigma: [f64; 2]) -> ChainSpec {
        ChainSpec::new(a10, &[1.0], &[1.0, 0.0], &[1.0], &[1.0], &sigma).unwrap()
    }

    #[test]
    fn classify_examples() {
        let r = classify(&spec_from(3.0, [0.1, 0.0]));
        assert_eq!(r.classification, Regime::Persistent);
        assert!((r.delta[1] - 1.995).abs() < 1e-12);
        assert!(r.equilibrium.is_some());

        let r = classify(&spec_from(0.5, [0.1, 0.0]));
        assert_eq!(r.classification, Regime::ExtinctAbove(1));
        assert!((r.delta[0] - 0.495).abs() < 1e-15);
        assert!((r.delta[1] - (0.495 - 1.0)).abs() < 1e-12);
        assert_eq!(r.j_star, Some(1));
        assert!(r.equilibrium.is_none());

        let r = classify(&spec_from(3.0, [0.0, 0.0]));
        assert_eq!(r.classification, Regime::UnsupportedNoise);
        assert_eq!(r.delta, vec![3.0, 2.0]);
        assert!(r.equilibrium.is_some());

        // sigma_n only, extinction at j* = 1 < n: the extinction result needs sigma_1 or sigma_{j*}.
        let r = classify(&spec_from(0.5, [0.0, 0.3]));
        assert_eq!(r.classification, Regime::UnsupportedNoise);
        assert_eq!(r.j_star, Some(1));

        let r = classify(&spec_from(1.02, [0.0, 0.2]));
        assert_eq!(r.classification, Regime::Boundary(2));
        let r = classify(&spec_from(0.01, [0.5, 0.0]));
        assert_eq!(r.classification, Regime::ExtinctAbove(0));
    }

    #[test]
    fn report_json_shape() {
        let r = classify(&spec_from(3.0, [0.1, 0.0]));
        let v = r.to_json();
        assert_eq!(v["classification"], "persistent");
        assert!(v["pstar"].is_array());
        assert!(v["j_star"].is_null());
        assert!(v["noise_note"].as_str().unwrap().contains("sigma_1"));
    }
}
