//! Sparse multivariate polynomials and polynomial vector fields with exact
//! Lie brackets.

use std::collections::BTreeMap;
use std::fmt;

use crate::model::Scalar;

/// Exponent vector of a monomial.
pub type Exponents = Vec<u16>;

/// Sparse polynomial in `nvars` variables; zero coefficients are never stored.
#[derive(Clone, PartialEq)]
pub struct Poly<T> {
    nvars: usize,
    terms: BTreeMap<Exponents, T>,
}

impl<T: Scalar> Poly<T> {
    pub fn zero(nvars: usize) -> Self {
        Self {
            nvars,
            terms: BTreeMap::new(),
        }
    }

    pub fn monomial(exps: Exponents, coeff: T) -> Self {
        let mut p = Self::zero(exps.len());
        if !coeff.is_zero() {
            p.terms.insert(exps, coeff);
        }
        p
    }

    pub fn constant(nvars: usize, c: T) -> Self {
        Self::monomial(vec![0; nvars], c)
    }

    /// `c · x_i` (0-based variable index).
    pub fn linear(nvars: usize, i: usize, c: T) -> Self {
        let mut e = vec![0; nvars];
        e[i] = 1;
        Self::monomial(e, c)
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Exponents, &T)> {
        self.terms.iter()
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn coefficient(&self, exps: &[u16]) -> Option<&T> {
        self.terms.get(exps)
    }

    pub fn degree(&self) -> Option<u32> {
        self.terms
            .keys()
            .map(|e| e.iter().map(|&d| d as u32).sum())
            .max()
    }

    fn add_term(&mut self, exps: Exponents, coeff: T) {
        if coeff.is_zero() {
            return;
        }
        match self.terms.get_mut(&exps) {
            Some(c) => {
                let sum = c.clone() + coeff;
                if sum.is_zero() {
                    self.terms.remove(&exps);
                } else {
                    *c = sum;
                }
            }
            None => {
                self.terms.insert(exps, coeff);
            }
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.nvars, other.nvars);
        let mut out = self.clone();
        for (e, c) in &other.terms {
            out.add_term(e.clone(), c.clone());
        }
        out
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(&(T::zero() - T::one())))
    }

    pub fn scale(&self, s: &T) -> Self {
        let mut out = Self::zero(self.nvars);
        for (e, c) in &self.terms {
            out.add_term(e.clone(), c.clone() * s.clone());
        }
        out
    }

    pub fn mul(&self, other: &Self) -> Self {
        assert_eq!(self.nvars, other.nvars);
        let mut out = Self::zero(self.nvars);
        for (ea, ca) in &self.terms {
            for (eb, cb) in &other.terms {
                let e: Exponents = ea.iter().zip(eb).map(|(a, b)| a + b).collect();
                out.add_term(e, ca.clone() * cb.clone());
            }
        }
        out
    }

    /// Partial derivative in variable `i`.
    pub fn derivative(&self, i: usize) -> Self {
        let mut out = Self::zero(self.nvars);
        for (e, c) in &self.terms {
            let d = e[i];
            if d == 0 {
                continue;
            }
            let mut f = T::zero();
            for _ in 0..d {
                f = f + T::one();
            }
            let mut e2 = e.clone();
            e2[i] -= 1;
            out.add_term(e2, c.clone() * f);
        }
        out
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.nvars);
        self.terms
            .iter()
            .map(|(e, c)| {
                let m: f64 = e
                    .iter()
                    .zip(x)
                    .map(|(&d, &xi)| xi.powi(d as i32))
                    .product();
                c.to_f64().expect("representable coefficient") * m
            })
            .sum()
    }

    /// Applies `f` to every coefficient (e.g. to change the scalar type).
    pub fn map_coefficients<U: Scalar>(&self, f: impl Fn(&T) -> U) -> Poly<U> {
        let mut out = Poly::zero(self.nvars);
        for (e, c) in &self.terms {
            out.add_term(e.clone(), f(c));
        }
        out
    }
}

impl<T: Scalar> fmt::Debug for Poly<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        for (k, (e, c)) in self.terms.iter().enumerate() {
            if k > 0 {
                write!(f, " + ")?;
            }
            write!(f, "{c:?}")?;
            for (i, &d) in e.iter().enumerate() {
                match d {
                    0 => {}
                    1 => write!(f, "·x{}", i + 1)?,
                    _ => write!(f, "·x{}^{d}", i + 1)?,
                }
            }
        }
        Ok(())
    }
}

/// Vector field on `R^n` with polynomial components.
#[derive(Clone, PartialEq)]
pub struct PolyVectorField<T> {
    comps: Vec<Poly<T>>,
}

impl<T: Scalar> fmt::Debug for PolyVectorField<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(&self.comps).finish()
    }
}

impl<T: Scalar> PolyVectorField<T> {
    pub fn new(comps: Vec<Poly<T>>) -> Self {
        let n = comps.len();
        assert!(comps.iter().all(|p| p.nvars() == n), "field must be square");
        Self { comps }
    }

    pub fn zero(n: usize) -> Self {
        Self::new((0..n).map(|_| Poly::zero(n)).collect())
    }

    pub fn dim(&self) -> usize {
        self.comps.len()
    }

    pub fn component(&self, i: usize) -> &Poly<T> {
        &self.comps[i]
    }

    pub fn components(&self) -> &[Poly<T>] {
        &self.comps
    }

    pub fn is_zero(&self) -> bool {
        self.comps.iter().all(Poly::is_zero)
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.comps.iter().map(|p| p.eval(x)).collect()
    }

    pub fn add(&self, other: &Self) -> Self {
        Self::new(self.comps.iter().zip(&other.comps).map(|(a, b)| a.add(b)).collect())
    }

    pub fn scale(&self, s: &T) -> Self {
        Self::new(self.comps.iter().map(|a| a.scale(s)).collect())
    }

    /// Directional derivative `DV · W` of this field along `w`.
    fn derivative_along(&self, w: &Self) -> Self {
        let n = self.dim();
        Self::new(
            self.comps
                .iter()
                .map(|vi| {
                    (0..n).fold(Poly::zero(n), |acc, j| {
                        if w.comps[j].is_zero() {
                            acc
                        } else {
                            acc.add(&vi.derivative(j).mul(&w.comps[j]))
                        }
                    })
                })
                .collect(),
        )
    }

    pub fn map_coefficients<U: Scalar>(&self, f: impl Fn(&T) -> U + Copy) -> PolyVectorField<U> {
        PolyVectorField::new(self.comps.iter().map(|p| p.map_coefficients(f)).collect())
    }
}

/// `[V, W] = DW·V - DV·W`.
pub fn lie_bracket<T: Scalar>(v: &PolyVectorField<T>, w: &PolyVectorField<T>) -> PolyVectorField<T> {
    assert_eq!(v.dim(), w.dim());
    let dw_v = w.derivative_along(v);
    let dv_w = v.derivative_along(w);
    PolyVectorField::new(
        dw_v.comps
            .iter()
            .zip(&dv_w.comps)
            .map(|(a, b)| a.sub(b))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rational;
    use num_traits::FromPrimitive;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn r(v: i64) -> Rational {
        Rational::from_i64(v).unwrap()
    }

    #[test]
    fn arithmetic_and_derivative() {
        // p = 2 x1^2 x2 - 3 x2 + 1
        let p = Poly::monomial(vec![2, 1], r(2))
            .add(&Poly::linear(2, 1, r(-3)))
            .add(&Poly::constant(2, r(1)));
        assert_eq!(p.degree(), Some(3));
        let dx1 = p.derivative(0);
        assert_eq!(dx1, Poly::monomial(vec![1, 1], r(4)));
        let dx2 = p.derivative(1);
        assert_eq!(dx2, Poly::monomial(vec![2, 0], r(2)).add(&Poly::constant(2, r(-3))));
        assert!(p.sub(&p).is_zero());
        assert_eq!(p.eval(&[2.0, 0.5]), 2.0 * 4.0 * 0.5 - 1.5 + 1.0);
        let sq = p.mul(&p);
        assert_eq!(sq.eval(&[2.0, 0.5]), p.eval(&[2.0, 0.5]).powi(2));
    }

    fn random_field(rng: &mut ChaCha8Rng, n: usize) -> PolyVectorField<f64> {
        PolyVectorField::new(
            (0..n)
                .map(|_| {
                    let mut p = Poly::zero(n);
                    for _ in 0..4 {
                        let mut e = vec![0u16; n];
                        let deg = rng.random_range(0..=3);
                        for _ in 0..deg {
                            e[rng.random_range(0..n)] += 1;
                        }
                        p = p.add(&Poly::monomial(e, rng.random_range(-1.0..1.0)));
                    }
                    p
                })
                .collect(),
        )
    }

    #[test]
    fn bracket_with_itself_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = random_field(&mut rng, 3).map_coefficients(|&c| Rational::from_float(c).unwrap());
        assert!(lie_bracket(&v, &v).is_zero());
    }

    #[test]
    fn scaling_fields_commute() {
        let a1 = PolyVectorField::new(vec![Poly::linear(2, 0, r(3)), Poly::zero(2)]);
        let a2 = PolyVectorField::new(vec![Poly::zero(2), Poly::linear(2, 1, r(5))]);
        assert!(lie_bracket(&a1, &a2).is_zero());
    }

    /// Flow of a polynomial field by classical RK4.
    fn flow(v: &PolyVectorField<f64>, x: &[f64], t: f64) -> Vec<f64> {
        let steps = 8;
        let h = t / steps as f64;
        let mut y = x.to_vec();
        let add = |a: &[f64], b: &[f64], s: f64| -> Vec<f64> {
            a.iter().zip(b).map(|(p, q)| p + s * q).collect()
        };
        for _ in 0..steps {
            let k1 = v.eval(&y);
            let k2 = v.eval(&add(&y, &k1, h / 2.0));
            let k3 = v.eval(&add(&y, &k2, h / 2.0));
            let k4 = v.eval(&add(&y, &k3, h));
            for i in 0..y.len() {
                y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        y
    }

    /// `[V, W](x) ≈ (φ_W^{-s} φ_V^{-s} φ_W^{s} φ_V^{s}(x) - x) / s²`;
    /// the leading error is O(s).
    fn commutator_direction(v: &PolyVectorField<f64>, w: &PolyVectorField<f64>, x: &[f64], s: f64) -> Vec<f64> {
        let y = flow(v, x, s);
        let y = flow(w, &y, s);
        let y = flow(v, &y, -s);
        let y = flow(w, &y, -s);
        y.iter().zip(x).map(|(a, b)| (a - b) / (s * s)).collect()
    }

    #[test]
    fn bracket_matches_flow_commutator() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for n in 2..=4 {
            let v = random_field(&mut rng, n);
            let w = random_field(&mut rng, n);
            let b = lie_bracket(&v, &w);
            for _ in 0..20 {
                let x: Vec<f64> = (0..n).map(|_| rng.random_range(-0.8..0.8)).collect();
                let exact = b.eval(&x);
                // Richardson: the commutator has an O(s) error term.
                let s = 1e-2;
                let c1 = commutator_direction(&v, &w, &x, s);
                let c2 = commutator_direction(&v, &w, &x, s / 2.0);
                for i in 0..n {
                    let est = 2.0 * c2[i] - c1[i];
                    let scale = exact[i].abs().max(1.0);
                    assert!((est - exact[i]).abs() <= 1e-4 * scale * 10.0, "n={n} i={i}: {est} vs {}", exact[i]);
                }
            }
        }
    }

    #[test]
    fn bracket_is_bilinear_and_antisymmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let to_q = |f: PolyVectorField<f64>| f.map_coefficients(|&c| Rational::from_float(c).unwrap());
        for n in 2..=4 {
            let u = to_q(random_field(&mut rng, n));
            let v = to_q(random_field(&mut rng, n));
            let w = to_q(random_field(&mut rng, n));
            let a = r(3);
            let lhs = lie_bracket(&u.scale(&a).add(&v), &w);
            let rhs = lie_bracket(&u, &w).scale(&a).add(&lie_bracket(&v, &w));
            assert_eq!(lhs, rhs);
            let anti = lie_bracket(&u, &w).add(&lie_bracket(&w, &u));
            assert!(anti.is_zero());
        }
    }
}
