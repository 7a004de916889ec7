//! Exact Lie-bracket chain of the noise and drift fields, numerical rank of
//! the bracket matrix, and the zero-control accessibility probe.

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::model::{Scalar, State, TildeSpec};
use crate::ode::{self, OdeError, OdeOptions};
use crate::persistence;
use crate::poly::{lie_bracket, Poly, PolyVectorField};
use crate::Rational;

pub const DEFAULT_RANK_TOLERANCE: f64 = 1e-10;
/// Points closer than this to the boundary are rejected.
pub const BOUNDARY_MARGIN: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Anchored at the noise field of species 1.
    Bottom,
    /// Anchored at the noise field of species n.
    Top,
}

#[derive(Clone, Debug, PartialEq, Error)]
pub enum HormanderError {
    #[error("no noise on the anchor species {species} for the {direction:?} chain")]
    ZeroNoiseAtAnchor { direction: Direction, species: usize },
    #[error("point is on or too close to the boundary (min coordinate {min})")]
    BoundaryPoint { min: f64 },
    #[error("bracket chain failed its triangular check at b^{k}: {detail}")]
    StructureViolation { k: usize, detail: String },
    #[error("dimension mismatch: point has {got} coordinates, chain has {expected}")]
    Dimension { expected: usize, got: usize },
}

/// Noise field `A^j(x) = σ_j x_j e_j` (1-based `j`).
pub fn noise_field<T: Scalar>(n: usize, j: usize, sigma: T) -> PolyVectorField<T> {
    let mut comps: Vec<Poly<T>> = (0..n).map(|_| Poly::zero(n)).collect();
    comps[j - 1] = Poly::linear(n, j - 1, sigma);
    PolyVectorField::new(comps)
}

/// Drift field `A^0(x) = (x_i F̃_i(x))_i` with coefficients converted by `conv`.
pub fn drift_field<T: Scalar>(tilde: &TildeSpec, conv: impl Fn(f64) -> T) -> PolyVectorField<T> {
    let n = tilde.n();
    let quad = |i: usize, j: usize, c: f64| {
        let mut e = vec![0u16; n];
        e[i] += 1;
        e[j] += 1;
        Poly::monomial(e, conv(c))
    };
    let comps = (0..n)
        .map(|i| {
            let rate = if i == 0 { tilde.a(1, 0) } else { -tilde.a(i + 1, 0) };
            let mut p = Poly::linear(n, i, conv(rate)).add(&quad(i, i, -tilde.a(i + 1, i + 1)));
            if i > 0 {
                p = p.add(&quad(i, i - 1, tilde.a(i + 1, i)));
            }
            if i + 1 < n {
                p = p.add(&quad(i, i + 1, -tilde.a(i + 1, i + 2)));
            }
            p
        })
        .collect();
    PolyVectorField::new(comps)
}

fn exact(v: f64) -> Rational {
    Rational::from_float(v).expect("finite coefficient")
}

/// Coordinate reversal `i ↦ n+1−i` applied to a field.
pub fn reflect<T: Scalar>(v: &PolyVectorField<T>) -> PolyVectorField<T> {
    let n = v.dim();
    let comps = (0..n)
        .rev()
        .map(|i| {
            let mut out = Poly::zero(n);
            for (e, c) in v.component(i).terms() {
                let r: Vec<u16> = e.iter().rev().copied().collect();
                out = out.add(&Poly::monomial(r, c.clone()));
            }
            out
        })
        .collect();
    PolyVectorField::new(comps)
}

/// `b^1 = anchor`, `b^{k+1} = [b^k, drift]`; checked to be lower-triangular
/// with pivot `b^k_k = b^{k-1}_{k-1} · x_k · (coefficient of x_k x_{k-1} in drift_k)`.
fn anchored_chain<T: Scalar>(
    anchor: &PolyVectorField<T>,
    drift: &PolyVectorField<T>,
) -> Result<Vec<PolyVectorField<T>>, HormanderError> {
    let n = anchor.dim();
    let mut chain = vec![anchor.clone()];
    for _ in 1..n {
        let next = lie_bracket(chain.last().unwrap(), drift);
        chain.push(next);
    }
    let mut expected_pivot = anchor.component(0).clone();
    for (k, b) in chain.iter().enumerate() {
        if k > 0 {
            let mut e = vec![0u16; n];
            e[k] = 1;
            e[k - 1] = 1;
            let coupling = drift.component(k).coefficient(&e).cloned().unwrap_or_else(T::zero);
            expected_pivot = expected_pivot.mul(&Poly::linear(n, k, coupling));
        }
        if let Some(j) = (k + 1..n).find(|&j| !b.component(j).is_zero()) {
            return Err(HormanderError::StructureViolation {
                k: k + 1,
                detail: format!("component {} is not identically zero", j + 1),
            });
        }
        if b.component(k) != &expected_pivot {
            return Err(HormanderError::StructureViolation {
                k: k + 1,
                detail: format!("pivot {:?} differs from {:?}", b.component(k), expected_pivot),
            });
        }
    }
    Ok(chain)
}

/// The bracket family `b^1..b^n` in the original coordinates.
#[derive(Clone)]
pub struct BracketChain<T> {
    pub direction: Direction,
    pub brackets: Vec<PolyVectorField<T>>,
}

/// Builds the chain in exact rational arithmetic. For the top direction the
/// bottom construction is run on the reflected system and mapped back, so
/// `b^k` is nonzero only in components `n+1−k..n`.
pub fn bracket_chain(tilde: &TildeSpec, direction: Direction) -> Result<BracketChain<Rational>, HormanderError> {
    bracket_chain_with(tilde, direction, exact)
}

/// Same construction over any scalar type.
pub fn bracket_chain_with<T: Scalar>(
    tilde: &TildeSpec,
    direction: Direction,
    conv: impl Fn(f64) -> T + Copy,
) -> Result<BracketChain<T>, HormanderError> {
    let n = tilde.n();
    let anchor_species = match direction {
        Direction::Bottom => 1,
        Direction::Top => n,
    };
    let sigma = tilde.sigma(anchor_species);
    if sigma <= 0.0 {
        return Err(HormanderError::ZeroNoiseAtAnchor {
            direction,
            species: anchor_species,
        });
    }
    let anchor = noise_field(n, anchor_species, conv(sigma));
    let drift = drift_field(tilde, conv);
    let brackets = match direction {
        Direction::Bottom => anchored_chain(&anchor, &drift)?,
        Direction::Top => anchored_chain(&reflect(&anchor), &reflect(&drift))?
            .iter()
            .map(reflect)
            .collect(),
    };
    Ok(BracketChain { direction, brackets })
}

/// Closed-form pivot coefficient of `b^k` (1-based), on the monomial
/// `x_1···x_k` (bottom) or `x_{n+1-k}···x_n` (top).
pub fn expected_pivot_coefficient(tilde: &TildeSpec, direction: Direction, k: usize) -> Rational {
    let n = tilde.n();
    match direction {
        Direction::Bottom => (2..=k).fold(exact(tilde.sigma(1)), |acc, i| acc * exact(tilde.a(i, i - 1))),
        Direction::Top => {
            let prod = (n + 1 - k..n).fold(exact(tilde.sigma(n)), |acc, i| acc * exact(tilde.a(i, i + 1)));
            if k.is_multiple_of(2) {
                -prod
            } else {
                prod
            }
        }
    }
}

/// Index (0-based) of the pivot component of `b^k`, `k` 1-based.
pub fn pivot_index(n: usize, direction: Direction, k: usize) -> usize {
    match direction {
        Direction::Bottom => k - 1,
        Direction::Top => n - k,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct HormanderReport {
    pub direction: Direction,
    pub point: Vec<f64>,
    /// `b^k(x)` for `k = 1..n`.
    pub brackets: Vec<Vec<f64>>,
    pub rank: usize,
    pub singular_values: Vec<f64>,
    pub smallest_singular_ratio: f64,
    pub tolerance: f64,
    pub satisfied: bool,
    /// Determinant of the bracket matrix, and its closed form: the product
    /// of pivots times the sign of the row permutation that makes the
    /// matrix triangular.
    pub determinant: f64,
    pub pivot_product: f64,
}

impl<T: Scalar> BracketChain<T> {
    pub fn dim(&self) -> usize {
        self.brackets.len()
    }

    /// Matrix whose columns are `b^1(x)..b^n(x)`.
    pub fn matrix_at(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.dim();
        let cols: Vec<Vec<f64>> = self.brackets.iter().map(|b| b.eval(x)).collect();
        DMatrix::from_fn(n, n, |i, k| cols[k][i])
    }

    pub fn rank_at(&self, x: &[f64], tolerance: f64) -> Result<HormanderReport, HormanderError> {
        let n = self.dim();
        if x.len() != n {
            return Err(HormanderError::Dimension { expected: n, got: x.len() });
        }
        let min = x.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(min >= BOUNDARY_MARGIN) {
            return Err(HormanderError::BoundaryPoint { min });
        }
        let m = self.matrix_at(x);
        let mut sv: Vec<f64> = m.clone().singular_values().iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        let smax = sv[0];
        let rank = sv.iter().filter(|&&s| smax > 0.0 && s > tolerance * smax).count();
        let ratio = if smax > 0.0 { sv[n - 1] / smax } else { 0.0 };
        // The top chain is triangular after reversing the rows.
        let sign = match self.direction {
            Direction::Top if (n * (n - 1) / 2) % 2 == 1 => -1.0,
            _ => 1.0,
        };
        let pivot_product = sign
            * (1..=n)
                .map(|k| m[(pivot_index(n, self.direction, k), k - 1)])
                .product::<f64>();
        Ok(HormanderReport {
            direction: self.direction,
            point: x.to_vec(),
            brackets: (0..n).map(|k| m.column(k).iter().copied().collect()).collect(),
            rank,
            singular_values: sv,
            smallest_singular_ratio: ratio,
            tolerance,
            satisfied: rank == n,
            determinant: m.determinant(),
            pivot_product,
        })
    }
}

/// Chain anchored at species 1 when `σ_1 > 0`, otherwise at species n.
pub fn default_chain(tilde: &TildeSpec) -> Result<BracketChain<Rational>, HormanderError> {
    match bracket_chain(tilde, Direction::Bottom) {
        Err(HormanderError::ZeroNoiseAtAnchor { .. }) => bracket_chain(tilde, Direction::Top),
        other => other,
    }
}

pub fn rank_at(tilde: &TildeSpec, x: &State, tolerance: f64) -> Result<HormanderReport, HormanderError> {
    default_chain(tilde)?.rank_at(x, tolerance)
}

#[derive(Clone, Debug, PartialEq, Error)]
pub enum AccessibilityError {
    #[error("no positive equilibrium (δ̃(n) = {delta_n})")]
    EquilibriumAbsent { delta_n: f64 },
    #[error("start point is not interior")]
    BoundaryPoint,
    #[error(transparent)]
    Ode(#[from] OdeError),
}

#[derive(Clone, Debug, Serialize)]
pub struct AccessibilityReport {
    pub pstar: Vec<f64>,
    pub final_state: Vec<f64>,
    pub final_distance_to_pstar: f64,
    /// `(t, ‖y(t) − p*‖)` at evenly spaced checkpoints.
    pub checkpoints: Vec<(f64, f64)>,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

/// Integrates the zero-control system `ẏ_i = y_i F̃_i(y)` in log coordinates.
pub fn accessibility_probe(
    tilde: &TildeSpec,
    x0: &State,
    horizon: f64,
    checkpoints: usize,
) -> Result<AccessibilityReport, AccessibilityError> {
    let pstar = persistence::equilibrium(tilde).map_err(|e| AccessibilityError::EquilibriumAbsent { delta_n: e.delta_n })?;
    if !x0.is_interior() {
        return Err(AccessibilityError::BoundaryPoint);
    }
    let n = tilde.n();
    let mut z: Vec<f64> = x0.iter().map(|v| v.ln()).collect();
    let mut x = vec![0.0; n];
    let rhs = |_: f64, z: &[f64], dz: &mut [f64]| {
        for (xi, zi) in x.iter_mut().zip(z) {
            *xi = zi.exp();
        }
        tilde.per_capita_into(&x, dz);
    };
    let mut rhs = rhs;
    let opts = OdeOptions::default();
    let dist = |z: &[f64]| {
        z.iter()
            .zip(pstar.iter())
            .map(|(zi, p)| (zi.exp() - p).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let segs = checkpoints.max(1);
    let mut out = Vec::with_capacity(segs);
    let mut stats = (0, 0);
    let mut t = 0.0;
    for s in 1..=segs {
        let t1 = horizon * s as f64 / segs as f64;
        let st = ode::integrate(&mut rhs, t, &mut z, t1, &opts)?;
        stats.0 += st.accepted;
        stats.1 += st.rejected;
        t = t1;
        out.push((t, dist(&z)));
    }
    let final_state: Vec<f64> = z.iter().map(|v| v.exp()).collect();
    Ok(AccessibilityReport {
        final_distance_to_pstar: dist(&z),
        pstar: pstar.into_inner(),
        final_state,
        checkpoints: out,
        accepted_steps: stats.0,
        rejected_steps: stats.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ChainSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn example_tilde(sigma: &[f64]) -> TildeSpec {
        TildeSpec::from_parts(3.0, &[1.0], &[1.0, 0.0], &[1.0], &[1.0], sigma)
    }

    fn random_tilde(rng: &mut ChaCha8Rng, n: usize, sigma1: f64, sigman: f64) -> TildeSpec {
        let u = |rng: &mut ChaCha8Rng| rng.random_range(0.1..2.0);
        let death: Vec<f64> = (1..n).map(|_| u(rng)).collect();
        let diag: Vec<f64> = (0..n).map(|_| u(rng)).collect();
        let lower: Vec<f64> = (1..n).map(|_| u(rng)).collect();
        let upper: Vec<f64> = (1..n).map(|_| u(rng)).collect();
        let mut sigma = vec![0.0; n];
        sigma[0] = sigma1;
        sigma[n - 1] = if n == 1 { sigma1 } else { sigman };
        TildeSpec::from_parts(u(rng), &death, &diag, &lower, &upper, &sigma)
    }

    #[test]
    fn first_bracket_of_two_chain() {
        let t = example_tilde(&[0.7, 0.0]);
        let chain = bracket_chain(&t, Direction::Bottom).unwrap();
        assert_eq!(chain.brackets[0], noise_field(2, 1, exact(0.7)));
        // [A^1, A^0]_2 = σ1 x1 x2 ã21 with ã21 = 1.
        let b2 = &chain.brackets[1];
        assert_eq!(b2.component(1), &Poly::monomial(vec![1, 1], exact(0.7)));
        let v = b2.eval(&[1.3, 0.4]);
        assert!((v[1] - 0.7 * 1.3 * 0.4).abs() < 1e-15);
    }

    #[test]
    fn noise_fields_commute() {
        let a1 = noise_field(3, 1, exact(0.5));
        let a2 = noise_field(3, 2, exact(0.25));
        assert!(lie_bracket(&a1, &a2).is_zero());
    }

    #[test]
    fn pivots_match_closed_form_both_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 1..=6 {
            let t = random_tilde(&mut rng, n, 0.3, 0.6);
            for dir in [Direction::Bottom, Direction::Top] {
                let chain = bracket_chain(&t, dir).unwrap();
                for k in 1..=n {
                    let b = &chain.brackets[k - 1];
                    let p = pivot_index(n, dir, k);
                    let mut e = vec![0u16; n];
                    let range = match dir {
                        Direction::Bottom => 0..k,
                        Direction::Top => n - k..n,
                    };
                    for i in range {
                        e[i] = 1;
                    }
                    let pivot = b.component(p);
                    assert_eq!(pivot.len(), 1, "n={n} {dir:?} k={k}: {pivot:?}");
                    assert_eq!(pivot.coefficient(&e), Some(&expected_pivot_coefficient(&t, dir, k)));
                    let zero_side: Vec<usize> = match dir {
                        Direction::Bottom => (k..n).collect(),
                        Direction::Top => (0..n - k).collect(),
                    };
                    assert!(zero_side.iter().all(|&j| b.component(j).is_zero()));
                }
            }
        }
    }

    #[test]
    fn zero_noise_anchor_is_reported() {
        let t = example_tilde(&[0.0, 0.0]);
        assert!(matches!(
            bracket_chain(&t, Direction::Bottom),
            Err(HormanderError::ZeroNoiseAtAnchor { species: 1, .. })
        ));
        assert!(matches!(default_chain(&t), Err(HormanderError::ZeroNoiseAtAnchor { species: 2, .. })));
    }

    #[test]
    fn rank_two_at_unit_point() {
        let t = example_tilde(&[1.0, 0.0]);
        let r = rank_at(&t, &State(vec![1.0, 1.0]), DEFAULT_RANK_TOLERANCE).unwrap();
        assert_eq!(r.rank, 2);
        assert!(r.satisfied);
        assert_eq!(r.brackets[0], vec![1.0, 0.0]);
        assert_eq!(r.brackets[1][1], 1.0);
    }

    #[test]
    fn boundary_point_rejected() {
        let t = example_tilde(&[1.0, 0.0]);
        assert!(matches!(
            rank_at(&t, &State(vec![1.0, 0.0]), DEFAULT_RANK_TOLERANCE),
            Err(HormanderError::BoundaryPoint { .. })
        ));
    }

    #[test]
    fn determinant_equals_pivot_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in 2..=6 {
            let t = random_tilde(&mut rng, n, 0.4, 0.9);
            for dir in [Direction::Bottom, Direction::Top] {
                let chain = bracket_chain(&t, dir).unwrap();
                for _ in 0..20 {
                    let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..3.0)).collect();
                    let r = chain.rank_at(&x, DEFAULT_RANK_TOLERANCE).unwrap();
                    assert!(r.satisfied);
                    let rel = (r.determinant - r.pivot_product).abs() / r.pivot_product.abs();
                    assert!(rel < 1e-12, "n={n} {dir:?}: {rel}");
                }
            }
        }
    }

    #[test]
    fn accessibility_reaches_equilibrium() {
        let t = example_tilde(&[0.0, 0.0]);
        let r = accessibility_probe(&t, &State(vec![0.5, 0.5]), 200.0, 4).unwrap();
        assert!(r.final_distance_to_pstar < 1e-6, "{}", r.final_distance_to_pstar);
        let at_fixed = accessibility_probe(&t, &State(vec![1.0, 2.0]), 50.0, 2).unwrap();
        assert!(at_fixed.final_distance_to_pstar < 1e-12);
    }

    #[test]
    fn accessibility_requires_equilibrium() {
        let spec = ChainSpec::new(0.5, &[1.0], &[1.0, 0.0], &[1.0], &[1.0], &[0.0, 0.0]).unwrap();
        assert!(matches!(
            accessibility_probe(&spec.tilde(), &State(vec![0.5, 0.5]), 10.0, 1),
            Err(AccessibilityError::EquilibriumAbsent { .. })
        ));
    }
}
