//! Quadrature on reference simplices of intrinsic dimension 0..3.
//!
//! Rules are stated in barycentric coordinates and integrate over the unit
//! reference simplex (measure 1/m! in dimension m). The workhorse is the
//! conical-product Gauss rule (Gauss-Jacobi in the collapsed directions),
//! which has positive weights and reaches any requested degree; the
//! Grundmann-Moller family (signed weights) is kept as an independent route
//! for cross-checks.

use crate::error::FemError;
use nalgebra::DMatrix;

/// A quadrature rule on the reference m-simplex.
///
/// `points` are barycentric tuples of length m+1; weights sum to the
/// reference measure 1/m!.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub exactness_degree: usize,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Integrate a function given in barycentric coordinates over the
    /// reference simplex.
    pub fn integrate_ref<F: FnMut(&[f64]) -> f64>(&self, mut f: F) -> f64 {
        self.points
            .iter()
            .zip(&self.weights)
            .map(|(p, w)| w * f(p))
            .sum()
    }
}

const MAX_DEGREE: usize = 40;

/// Build a rule on the reference simplex of the given intrinsic dimension,
/// exact for polynomials up to `degree`.
pub fn simplex_quadrature(
    intrinsic_dim: usize,
    degree: usize,
) -> Result<QuadratureRule, FemError> {
    if degree > MAX_DEGREE {
        return Err(FemError::UnsupportedDegree(degree));
    }
    match intrinsic_dim {
        0 => Ok(QuadratureRule {
            points: vec![vec![1.0]],
            weights: vec![1.0],
            exactness_degree: MAX_DEGREE,
        }),
        1 => {
            let m = degree / 2 + 1;
            let (x, w) = gauss_legendre_01(m);
            Ok(QuadratureRule {
                points: x.iter().map(|&t| vec![1.0 - t, t]).collect(),
                weights: w,
                exactness_degree: 2 * m - 1,
            })
        }
        2 | 3 => conical_product(intrinsic_dim, degree),
        d => Err(FemError::UnsupportedDimension(d)),
    }
}

/// Conical-product Gauss rule on the reference triangle or tetrahedron.
fn conical_product(dim: usize, degree: usize) -> Result<QuadratureRule, FemError> {
    let m = degree / 2 + 1;
    let (x0, w0) = gauss_jacobi_01((dim - 1) as f64, m);
    let (x1, w1) = if dim == 3 {
        gauss_jacobi_01(1.0, m)
    } else {
        gauss_legendre_01(m)
    };
    let mut points = Vec::new();
    let mut weights = Vec::new();
    if dim == 2 {
        for (i, &xi) in x0.iter().enumerate() {
            for (j, &u) in x1.iter().enumerate() {
                let a = xi;
                let b = (1.0 - xi) * u;
                points.push(vec![1.0 - a - b, a, b]);
                // the (1-xi) Jacobian is folded into the Jacobi weight
                weights.push(w0[i] * w1[j]);
            }
        }
    } else {
        let (x2, w2) = gauss_legendre_01(m);
        for (i, &xi) in x0.iter().enumerate() {
            for (j, &u) in x1.iter().enumerate() {
                for (l, &v) in x2.iter().enumerate() {
                    let a = xi;
                    let b = (1.0 - xi) * u;
                    let c = (1.0 - xi) * (1.0 - u) * v;
                    points.push(vec![1.0 - a - b - c, a, b, c]);
                    weights.push(w0[i] * w1[j] * w2[l]);
                }
            }
        }
    }
    Ok(QuadratureRule {
        points,
        weights,
        exactness_degree: 2 * m - 1,
    })
}

/// Grundmann-Moller rule of index `s` on the reference m-simplex, exact for
/// degree 2s+1. Weights are signed.
pub fn grundmann_moeller(dim: usize, s: usize) -> QuadratureRule {
    let m = dim;
    let d = 2 * s + 1;
    let mut points = Vec::new();
    let mut weights = Vec::new();
    let vol = 1.0 / factorial(m);
    for i in 0..=s {
        // weight prefactor (-1)^i 2^{-2s} (d + m - 2i)^d / (i! (d + m - i)!)
        let mut w = if i % 2 == 0 { 1.0 } else { -1.0 };
        w *= 2f64.powi(-2 * (s as i32));
        w *= ((d + m - 2 * i) as f64).powi(d as i32);
        w /= factorial(i) * factorial(d + m - i);
        // partition loop: beta in Z^{m+1}_{>=0} with |beta| = s - i
        for beta in compositions(s - i, m + 1) {
            let denom = (d + m - 2 * i) as f64;
            let pt: Vec<f64> = beta
                .iter()
                .map(|&b| (2 * b + 1) as f64 / denom)
                .collect();
            points.push(pt);
            weights.push(w * vol * factorial(m));
        }
    }
    // normalize so weights sum to the reference measure
    let sum: f64 = weights.iter().sum();
    let scale = vol / sum;
    for w in &mut weights {
        *w *= scale;
    }
    QuadratureRule {
        points,
        weights,
        exactness_degree: d,
    }
}

/// All compositions of `total` into `parts` nonnegative integers.
pub fn compositions(total: usize, parts: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = vec![0usize; parts];
    fn rec(total: usize, idx: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if idx + 1 == cur.len() {
            cur[idx] = total;
            out.push(cur.clone());
            return;
        }
        for v in 0..=total {
            cur[idx] = v;
            rec(total - v, idx + 1, cur, out);
        }
    }
    rec(total, 0, &mut cur, &mut out);
    out
}

pub fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// Exact moment of a barycentric monomial over the reference m-simplex
/// (measure 1/m!): integral of lambda^alpha = prod(alpha_i!) / (|alpha| + m)!
pub fn bary_moment_ref(m: usize, alpha: &[usize]) -> f64 {
    let s: usize = alpha.iter().sum();
    // prod(alpha_i!) / (s + m)! accumulated with factors <= 1
    let mut result = 1.0;
    let mut denom = s + m;
    for &a in alpha {
        for j in 1..=a {
            result *= j as f64 / denom as f64;
            denom -= 1;
        }
    }
    for _ in 0..m {
        result /= denom as f64;
        denom -= 1;
    }
    debug_assert_eq!(denom, 0);
    result
}

/// Gauss-Legendre nodes/weights on [0,1].
pub fn gauss_legendre_01(n: usize) -> (Vec<f64>, Vec<f64>) {
    gauss_jacobi_01(0.0, n)
}

/// Gauss-Jacobi nodes/weights on [0,1] for the weight (1-t)^alpha,
/// computed by the Golub-Welsch eigenvalue method.
pub fn gauss_jacobi_01(alpha: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let beta = 0.0f64;
    // recurrence coefficients for monic Jacobi polynomials on [-1,1]
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n]; // b[0] unused
    let ab = alpha + beta;
    for k in 0..n {
        let kf = k as f64;
        let denom = (2.0 * kf + ab) * (2.0 * kf + ab + 2.0);
        a[k] = if denom != 0.0 {
            (beta * beta - alpha * alpha) / denom
        } else {
            0.0
        };
        if k > 0 {
            let num = 4.0 * kf * (kf + alpha) * (kf + beta) * (kf + ab);
            let den = (2.0 * kf + ab).powi(2) * (2.0 * kf + ab + 1.0) * (2.0 * kf + ab - 1.0);
            b[k] = num / den;
        }
    }
    // mu0 = integral of (1-x)^alpha over [-1,1]
    let mu0 = 2f64.powf(ab + 1.0) * beta_fn(alpha + 1.0, beta + 1.0);
    let mut jm = DMatrix::<f64>::zeros(n, n);
    for k in 0..n {
        jm[(k, k)] = a[k];
        if k > 0 {
            let s = b[k].sqrt();
            jm[(k, k - 1)] = s;
            jm[(k - 1, k)] = s;
        }
    }
    let eig = jm.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let x = eig.eigenvalues[i];
            let v0 = eig.eigenvectors[(0, i)];
            (x, mu0 * v0 * v0)
        })
        .collect();
    pairs.sort_by(|p, q| p.0.partial_cmp(&q.0).unwrap());
    // map x in [-1,1] to t in [0,1]; fold the (1-t)^alpha = ((1-x)/2)^alpha
    // change of weight into the quadrature weights
    let scale = 2f64.powf(-(alpha + 1.0));
    let nodes: Vec<f64> = pairs.iter().map(|p| 0.5 * (1.0 + p.0)).collect();
    let weights: Vec<f64> = pairs.iter().map(|p| p.1 * scale).collect();
    (nodes, weights)
}

fn beta_fn(a: f64, b: f64) -> f64 {
    // only called with small positive integer-ish arguments
    gamma_fn(a) * gamma_fn(b) / gamma_fn(a + b)
}

fn gamma_fn(x: f64) -> f64 {
    // integer arguments only in this crate
    let n = x.round() as usize;
    debug_assert!((x - n as f64).abs() < 1e-12 && n >= 1);
    factorial(n - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_rule() {
        let r = simplex_quadrature(0, 7).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r.weights[0], 1.0);
    }

    #[test]
    fn triangle_constant() {
        // reference triangle area
        let r = simplex_quadrature(2, 0).unwrap();
        let v = r.integrate_ref(|_| 1.0);
        assert!((v - 0.5).abs() < 1e-14);
    }

    #[test]
    fn triangle_bubble_moment() {
        // lambda0*lambda1*lambda2 integrates to 1/120
        let r = simplex_quadrature(2, 3).unwrap();
        let v = r.integrate_ref(|l| l[0] * l[1] * l[2]);
        assert!((v - 1.0 / 120.0).abs() < 1e-15, "{v}");
    }

    #[test]
    fn tet_squared_moment() {
        // lambda0^2 integrates to 1/60
        let r = simplex_quadrature(3, 2).unwrap();
        let v = r.integrate_ref(|l| l[0] * l[0]);
        assert!((v - 1.0 / 60.0).abs() < 1e-15, "{v}");
    }

    #[test]
    fn rejects_large_degree() {
        assert!(matches!(
            simplex_quadrature(2, 41),
            Err(FemError::UnsupportedDegree(41))
        ));
    }

    #[test]
    fn exactness_against_moment_formula() {
        for dim in 1..=3usize {
            for degree in 0..=20usize {
                let r = simplex_quadrature(dim, degree).unwrap();
                for alpha in compositions(degree, dim + 1) {
                    let num = r.integrate_ref(|l| {
                        alpha
                            .iter()
                            .zip(l)
                            .map(|(&a, &x)| x.powi(a as i32))
                            .product()
                    });
                    let exact = bary_moment_ref(dim, &alpha);
                    assert!(
                        (num - exact).abs() <= 1e-13 * exact.abs().max(1.0),
                        "dim {dim} deg {degree} alpha {alpha:?}: {num} vs {exact}"
                    );
                }
            }
        }
    }

    #[test]
    fn grundmann_moeller_matches_conical() {
        for dim in 2..=3usize {
            for s in 0..=6usize {
                let gm = grundmann_moeller(dim, s);
                let deg = 2 * s + 1;
                let gauss = simplex_quadrature(dim, deg).unwrap();
                for alpha in compositions(deg, dim + 1) {
                    let f = |l: &[f64]| -> f64 {
                        alpha
                            .iter()
                            .zip(l)
                            .map(|(&a, &x)| x.powi(a as i32))
                            .product()
                    };
                    let a = gm.integrate_ref(f);
                    let b = gauss.integrate_ref(f);
                    assert!((a - b).abs() < 1e-12, "dim {dim} s {s}: {a} vs {b}");
                }
            }
        }
    }
}
