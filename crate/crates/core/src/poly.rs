//! Scalar polynomials on simplices in homogeneous barycentric monomial form.
//!
//! A polynomial of degree <= k on an m-simplex is stored by its coefficients
//! over the monomials lambda^alpha with |alpha| = k (homogenizing with
//! lambda_0 + ... + lambda_m = 1 where needed). This representation is a
//! genuine basis, multiplication adds degrees, and physical derivatives are
//! exact linear maps once the constant barycentric gradients of the carrier
//! are known.

use crate::quadrature::{bary_moment_ref, compositions, factorial, QuadratureRule};
use nalgebra::Vector3;
use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

/// Enumeration of the monomials lambda^alpha with |alpha| = degree over
/// `nvars` barycentric variables, with an exponent -> position lookup.
#[derive(Debug, Clone)]
pub struct MonomialTable {
    pub nvars: usize,
    pub degree: usize,
    pub exps: Vec<Vec<usize>>,
    index: HashMap<Vec<usize>, usize>,
}

impl MonomialTable {
    pub fn len(&self) -> usize {
        self.exps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exps.is_empty()
    }

    pub fn position(&self, alpha: &[usize]) -> usize {
        self.index[alpha]
    }
}

static TABLES: OnceLock<Mutex<HashMap<(usize, usize), &'static MonomialTable>>> = OnceLock::new();

/// Shared monomial table for (nvars, degree); tables are small and leaked on
/// first use.
pub fn monomials(nvars: usize, degree: usize) -> &'static MonomialTable {
    let cache = TABLES.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().unwrap();
    guard.entry((nvars, degree)).or_insert_with(|| {
        let exps = compositions(degree, nvars);
        let index = exps
            .iter()
            .enumerate()
            .map(|(i, e)| (e.clone(), i))
            .collect();
        Box::leak(Box::new(MonomialTable {
            nvars,
            degree,
            exps,
            index,
        }))
    })
}

/// A scalar polynomial in homogeneous barycentric form on an m-simplex
/// (nvars = m+1 coordinates).
#[derive(Debug, Clone)]
pub struct Poly {
    pub nvars: usize,
    pub degree: usize,
    pub coeffs: Vec<f64>,
}

impl Poly {
    pub fn zero(nvars: usize, degree: usize) -> Self {
        Poly {
            nvars,
            degree,
            coeffs: vec![0.0; monomials(nvars, degree).len()],
        }
    }

    pub fn constant(nvars: usize, value: f64) -> Self {
        Poly {
            nvars,
            degree: 0,
            coeffs: vec![value],
        }
    }

    /// The barycentric coordinate lambda_i as a degree-1 polynomial.
    pub fn coordinate(nvars: usize, i: usize) -> Self {
        let tab = monomials(nvars, 1);
        let mut coeffs = vec![0.0; tab.len()];
        let mut e = vec![0usize; nvars];
        e[i] = 1;
        coeffs[tab.position(&e)] = 1.0;
        Poly {
            nvars,
            degree: 1,
            coeffs,
        }
    }

    pub fn monomial(nvars: usize, alpha: &[usize]) -> Self {
        let degree = alpha.iter().sum();
        let tab = monomials(nvars, degree);
        let mut coeffs = vec![0.0; tab.len()];
        coeffs[tab.position(alpha)] = 1.0;
        Poly {
            nvars,
            degree,
            coeffs,
        }
    }

    pub fn scale(&mut self, s: f64) {
        for c in &mut self.coeffs {
            *c *= s;
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut p = self.clone();
        p.scale(s);
        p
    }

    /// Add `s * other`; degrees are homogenized to the larger one.
    pub fn axpy(&mut self, s: f64, other: &Poly) {
        assert_eq!(self.nvars, other.nvars);
        if other.degree > self.degree {
            *self = self.raised_to(other.degree);
        }
        let rhs = if other.degree < self.degree {
            other.raised_to(self.degree)
        } else {
            other.clone()
        };
        for (c, o) in self.coeffs.iter_mut().zip(&rhs.coeffs) {
            *c += s * o;
        }
    }

    /// Multiply by (sum of lambda)^(target - degree) to re-homogenize at a
    /// higher degree.
    pub fn raised_to(&self, target: usize) -> Poly {
        assert!(target >= self.degree);
        if target == self.degree {
            return self.clone();
        }
        let mut cur = self.clone();
        for _ in self.degree..target {
            let tab_lo = monomials(cur.nvars, cur.degree);
            let tab_hi = monomials(cur.nvars, cur.degree + 1);
            let mut coeffs = vec![0.0; tab_hi.len()];
            for (pos, alpha) in tab_lo.exps.iter().enumerate() {
                let c = cur.coeffs[pos];
                if c == 0.0 {
                    continue;
                }
                let mut e = alpha.clone();
                for i in 0..cur.nvars {
                    e[i] += 1;
                    coeffs[tab_hi.position(&e)] += c;
                    e[i] -= 1;
                }
            }
            cur = Poly {
                nvars: cur.nvars,
                degree: cur.degree + 1,
                coeffs,
            };
        }
        cur
    }

    pub fn mul(&self, other: &Poly) -> Poly {
        assert_eq!(self.nvars, other.nvars);
        let degree = self.degree + other.degree;
        let ta = monomials(self.nvars, self.degree);
        let tb = monomials(self.nvars, other.degree);
        let tc = monomials(self.nvars, degree);
        let mut coeffs = vec![0.0; tc.len()];
        for (ia, ea) in ta.exps.iter().enumerate() {
            let ca = self.coeffs[ia];
            if ca == 0.0 {
                continue;
            }
            for (ib, eb) in tb.exps.iter().enumerate() {
                let cb = other.coeffs[ib];
                if cb == 0.0 {
                    continue;
                }
                let e: Vec<usize> = ea.iter().zip(eb).map(|(a, b)| a + b).collect();
                coeffs[tc.position(&e)] += ca * cb;
            }
        }
        Poly {
            nvars: self.nvars,
            degree,
            coeffs,
        }
    }

    pub fn eval(&self, lambda: &[f64]) -> f64 {
        let tab = monomials(self.nvars, self.degree);
        let mut acc = 0.0;
        for (i, alpha) in tab.exps.iter().enumerate() {
            let c = self.coeffs[i];
            if c == 0.0 {
                continue;
            }
            let mut m = c;
            for (j, &a) in alpha.iter().enumerate() {
                for _ in 0..a {
                    m *= lambda[j];
                }
            }
            acc += m;
        }
        acc
    }

    /// Partial derivative along physical direction `dir`, given the carrier's
    /// constant barycentric gradients.
    pub fn partial(&self, grad_lambda: &[Vector3<f64>], dir: usize) -> Poly {
        assert_eq!(grad_lambda.len(), self.nvars);
        if self.degree == 0 {
            return Poly::zero(self.nvars, 0);
        }
        let tab = monomials(self.nvars, self.degree);
        let tlo = monomials(self.nvars, self.degree - 1);
        let mut coeffs = vec![0.0; tlo.len()];
        for (pos, alpha) in tab.exps.iter().enumerate() {
            let c = self.coeffs[pos];
            if c == 0.0 {
                continue;
            }
            let mut e = alpha.clone();
            for i in 0..self.nvars {
                if alpha[i] == 0 {
                    continue;
                }
                e[i] -= 1;
                coeffs[tlo.position(&e)] += c * alpha[i] as f64 * grad_lambda[i][dir];
                e[i] += 1;
            }
        }
        Poly {
            nvars: self.nvars,
            degree: self.degree - 1,
            coeffs,
        }
    }

    /// Exact integral over the reference simplex (measure 1/m!).
    pub fn integral_ref(&self) -> f64 {
        let m = self.nvars - 1;
        let tab = monomials(self.nvars, self.degree);
        tab.exps
            .iter()
            .zip(&self.coeffs)
            .map(|(alpha, c)| c * bary_moment_ref(m, alpha))
            .sum()
    }

    pub fn norm_inf(&self) -> f64 {
        self.coeffs.iter().fold(0.0, |a, c| a.max(c.abs()))
    }
}

/// Evaluate every monomial of the table at the rule's points
/// (rows: points, cols: monomials).
pub fn monomial_values(tab: &MonomialTable, rule: &QuadratureRule) -> Vec<Vec<f64>> {
    rule.points
        .iter()
        .map(|p| {
            tab.exps
                .iter()
                .map(|alpha| {
                    let mut m = 1.0;
                    for (j, &a) in alpha.iter().enumerate() {
                        for _ in 0..a {
                            m *= p[j];
                        }
                    }
                    m
                })
                .collect()
        })
        .collect()
}

/// Exact L2 inner product of two scalar polynomials over a carrier of
/// measure `measure` (intrinsic dimension nvars-1).
pub fn l2_inner_ref(a: &Poly, b: &Poly, measure: f64) -> f64 {
    let m = a.nvars - 1;
    a.mul(b).integral_ref() * measure * factorial(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn coordinate_eval() {
        let l0 = Poly::coordinate(3, 0);
        assert_eq!(l0.eval(&[1.0, 0.0, 0.0]), 1.0);
        assert!((l0.eval(&[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn raise_preserves_values() {
        let p = Poly::coordinate(3, 1).mul(&Poly::coordinate(3, 2));
        let q = p.raised_to(5);
        let pts = [[0.2, 0.3, 0.5], [0.0, 1.0, 0.0], [0.4, 0.4, 0.2]];
        for pt in pts {
            assert!((p.eval(&pt) - q.eval(&pt)).abs() < 1e-14);
        }
    }

    #[test]
    fn partial_of_linear() {
        // reference triangle (0,0),(1,0),(0,1): grad lambda1 = (1,0),
        // grad lambda2 = (0,1), grad lambda0 = (-1,-1)
        let g = vec![
            Vector3::new(-1.0, -1.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
        ];
        let p = Poly::coordinate(3, 1); // = x
        let dx = p.partial(&g, 0);
        let dy = p.partial(&g, 1);
        assert!((dx.eval(&[1.0, 0.0, 0.0]) - 1.0).abs() < 1e-15);
        assert!(dy.norm_inf() < 1e-15);
    }

    proptest! {
        // multiplication then integration agrees with quadrature
        #[test]
        fn product_integral_matches_quadrature(
            ca in proptest::collection::vec(-1.0f64..1.0, 6),
            cb in proptest::collection::vec(-1.0f64..1.0, 6),
        ) {
            let a = Poly { nvars: 3, degree: 2, coeffs: ca };
            let b = Poly { nvars: 3, degree: 2, coeffs: cb };
            let exact = a.mul(&b).integral_ref();
            let rule = crate::quadrature::simplex_quadrature(2, 4).unwrap();
            let num = rule.integrate_ref(|l| a.eval(l) * b.eval(l));
            prop_assert!((exact - num).abs() < 1e-12);
        }

        #[test]
        fn homogenization_is_identity(
            c in proptest::collection::vec(-1.0f64..1.0, 10),
            raise in 0usize..3,
        ) {
            let p = Poly { nvars: 3, degree: 3, coeffs: c };
            let q = p.raised_to(3 + raise);
            let pt = [0.25, 0.35, 0.4];
            prop_assert!((p.eval(&pt) - q.eval(&pt)).abs() < 1e-13);
        }
    }
}
