//! Polynomial bases on simplex carriers: scalar/vector/symmetric-tensor
//! spaces, homogeneous spaces, first-kind Nedelec spaces, the quadratic div
//! bubbles, the enriched shape spaces, and the kernel spaces realized as
//! numeric nullspaces of exact moment maps.
//!
//! Fields are ambient-valued; two-dimensional carriers are embedded with a
//! zero third coordinate so all geometry runs through `Vector3`/`Matrix3`.

use crate::error::FemError;
use crate::poly::{l2_inner_ref, monomials, Poly};
use crate::quadrature::factorial;
use crate::RANK_TOL;
use nalgebra::{DMatrix, Matrix3, Vector3};

/// Geometric simplex of intrinsic dimension m embedded in R^d, with the
/// constant (tangential) barycentric gradients and measures needed for
/// polynomial calculus.
#[derive(Debug, Clone)]
pub struct Carrier {
    pub dim_ambient: usize,
    pub dim_intrinsic: usize,
    pub vertices: Vec<Vector3<f64>>,
    pub grad_lambda: Vec<Vector3<f64>>,
    pub measure: f64,
    pub diameter: f64,
    pub centroid: Vector3<f64>,
}

impl Carrier {
    pub fn from_vertices(
        dim_ambient: usize,
        vertices: Vec<Vector3<f64>>,
    ) -> Result<Self, FemError> {
        let m = vertices.len() - 1;
        let centroid = vertices.iter().sum::<Vector3<f64>>() / vertices.len() as f64;
        let mut diameter = 0.0f64;
        for i in 0..vertices.len() {
            for j in i + 1..vertices.len() {
                diameter = diameter.max((vertices[i] - vertices[j]).norm());
            }
        }
        if m == 0 {
            return Ok(Carrier {
                dim_ambient,
                dim_intrinsic: 0,
                vertices,
                grad_lambda: vec![],
                measure: 1.0,
                diameter: 0.0,
                centroid,
            });
        }
        // edge matrix and its Gram
        let edges: Vec<Vector3<f64>> = (1..=m).map(|i| vertices[i] - vertices[0]).collect();
        let mut gram = DMatrix::<f64>::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                gram[(i, j)] = edges[i].dot(&edges[j]);
            }
        }
        let det = gram.clone().determinant();
        let measure = det.max(0.0).sqrt() / factorial(m);
        if !(measure > 1e-14 * diameter.powi(m as i32)) {
            return Err(FemError::DegenerateCell { cell: 0, measure });
        }
        let inv = gram
            .try_inverse()
            .ok_or(FemError::DegenerateCell { cell: 0, measure })?;
        let mut grad_lambda = vec![Vector3::zeros(); m + 1];
        for i in 0..m {
            let mut g = Vector3::zeros();
            for j in 0..m {
                g += edges[j] * inv[(j, i)];
            }
            grad_lambda[i + 1] = g;
            grad_lambda[0] -= g;
        }
        Ok(Carrier {
            dim_ambient,
            dim_intrinsic: m,
            vertices,
            grad_lambda,
            measure,
            diameter,
            centroid,
        })
    }

    pub fn nvars(&self) -> usize {
        self.dim_intrinsic + 1
    }

    pub fn physical(&self, lambda: &[f64]) -> Vector3<f64> {
        let mut x = Vector3::zeros();
        for (l, v) in lambda.iter().zip(&self.vertices) {
            x += *v * *l;
        }
        x
    }

    /// Barycentric coordinates of a physical point (affine; for lower
    /// dimensional carriers the point is assumed to lie in the affine hull).
    pub fn barycentric(&self, x: &Vector3<f64>) -> Vec<f64> {
        let mut lambda = vec![0.0; self.nvars()];
        if self.dim_intrinsic == 0 {
            lambda[0] = 1.0;
            return lambda;
        }
        let rel = x - self.vertices[0];
        let mut sum = 0.0;
        for i in 1..self.nvars() {
            let l = self.grad_lambda[i].dot(&rel);
            lambda[i] = l;
            sum += l;
        }
        lambda[0] = 1.0 - sum;
        lambda
    }

    /// The physical coordinate x_j as a degree-1 polynomial in lambda.
    pub fn coordinate_poly(&self, j: usize) -> Poly {
        let mut p = Poly::zero(self.nvars(), 1);
        for (i, v) in self.vertices.iter().enumerate() {
            p.axpy(v[j], &Poly::coordinate(self.nvars(), i));
        }
        p
    }

    /// Centroid-centered, diameter-scaled coordinate (x_j - c_j)/h. The
    /// enriched shape spaces are invariant under this affine change, and the
    /// local frame keeps their bases well conditioned on small cells away
    /// from the origin.
    pub fn local_coordinate_poly(&self, j: usize) -> Poly {
        let h = if self.diameter > 0.0 { self.diameter } else { 1.0 };
        let mut p = Poly::zero(self.nvars(), 1);
        for (i, v) in self.vertices.iter().enumerate() {
            p.axpy((v[j] - self.centroid[j]) / h, &Poly::coordinate(self.nvars(), i));
        }
        p
    }
}

/// Value shape of a polynomial field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueShape {
    Scalar,
    Vector,
    Sym,
}

impl ValueShape {
    pub fn ncomps(&self, d: usize) -> usize {
        match self {
            ValueShape::Scalar => 1,
            ValueShape::Vector => d,
            ValueShape::Sym => d * (d + 1) / 2,
        }
    }
}

/// Ordered index pairs (i <= j) for the symmetric components in dimension d.
pub fn sym_pairs(d: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::new();
    for i in 0..d {
        for j in i..d {
            v.push((i, j));
        }
    }
    v
}

/// A polynomial field on a carrier; components are stored in homogeneous
/// barycentric form at a common degree.
#[derive(Debug, Clone)]
pub struct PolyField {
    pub d: usize,
    pub shape: ValueShape,
    pub comps: Vec<Poly>,
}

impl PolyField {
    pub fn zero(d: usize, shape: ValueShape, nvars: usize, degree: usize) -> Self {
        PolyField {
            d,
            shape,
            comps: (0..shape.ncomps(d))
                .map(|_| Poly::zero(nvars, degree))
                .collect(),
        }
    }

    pub fn scalar(p: Poly) -> Self {
        PolyField {
            d: 0,
            shape: ValueShape::Scalar,
            comps: vec![p],
        }
    }

    pub fn scalar_in(d: usize, p: Poly) -> Self {
        PolyField {
            d,
            shape: ValueShape::Scalar,
            comps: vec![p],
        }
    }

    pub fn degree(&self) -> usize {
        self.comps.iter().map(|p| p.degree).max().unwrap_or(0)
    }

    pub fn homogenized(&self) -> PolyField {
        let deg = self.degree();
        PolyField {
            d: self.d,
            shape: self.shape,
            comps: self.comps.iter().map(|p| p.raised_to(deg)).collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        for c in &mut self.comps {
            c.scale(s);
        }
    }

    pub fn axpy(&mut self, s: f64, other: &PolyField) {
        for (a, b) in self.comps.iter_mut().zip(&other.comps) {
            a.axpy(s, b);
        }
    }

    pub fn value_scalar(&self, lambda: &[f64]) -> f64 {
        self.comps[0].eval(lambda)
    }

    pub fn value_vector(&self, lambda: &[f64]) -> Vector3<f64> {
        let mut v = Vector3::zeros();
        for (j, c) in self.comps.iter().enumerate() {
            v[j] = c.eval(lambda);
        }
        v
    }

    pub fn value_sym(&self, lambda: &[f64]) -> Matrix3<f64> {
        let mut m = Matrix3::zeros();
        for ((i, j), c) in sym_pairs(self.d).iter().zip(&self.comps) {
            let v = c.eval(lambda);
            m[(*i, *j)] = v;
            m[(*j, *i)] = v;
        }
        m
    }

    /// Gradient of a scalar field.
    pub fn grad(&self, carrier: &Carrier) -> PolyField {
        assert_eq!(self.shape, ValueShape::Scalar);
        let d = carrier.dim_ambient;
        let comps = (0..d)
            .map(|j| self.comps[0].partial(&carrier.grad_lambda, j))
            .collect();
        PolyField {
            d,
            shape: ValueShape::Vector,
            comps,
        }
    }

    /// Hessian of a scalar field.
    pub fn hessian(&self, carrier: &Carrier) -> PolyField {
        assert_eq!(self.shape, ValueShape::Scalar);
        let d = carrier.dim_ambient;
        let comps = sym_pairs(d)
            .iter()
            .map(|&(i, j)| {
                self.comps[0]
                    .partial(&carrier.grad_lambda, i)
                    .partial(&carrier.grad_lambda, j)
            })
            .collect();
        PolyField {
            d,
            shape: ValueShape::Sym,
            comps,
        }
    }

    /// Row-wise divergence of a symmetric field.
    pub fn div(&self, carrier: &Carrier) -> PolyField {
        assert_eq!(self.shape, ValueShape::Sym);
        let d = self.d;
        let pairs = sym_pairs(d);
        let comps: Vec<Poly> = (0..d)
            .map(|i| {
                let mut acc = Poly::zero(carrier.nvars(), self.degree().saturating_sub(1));
                for j in 0..d {
                    let (a, b) = if i <= j { (i, j) } else { (j, i) };
                    let pos = pairs.iter().position(|&p| p == (a, b)).unwrap();
                    acc.axpy(1.0, &self.comps[pos].partial(&carrier.grad_lambda, j));
                }
                acc
            })
            .collect();
        PolyField {
            d,
            shape: ValueShape::Vector,
            comps,
        }
    }

    /// div div of a symmetric field.
    pub fn divdiv(&self, carrier: &Carrier) -> PolyField {
        let dv = self.div(carrier);
        let mut acc = Poly::zero(carrier.nvars(), dv.degree().saturating_sub(1));
        for (i, c) in dv.comps.iter().enumerate() {
            acc.axpy(1.0, &c.partial(&carrier.grad_lambda, i));
        }
        PolyField {
            d: self.d,
            shape: ValueShape::Scalar,
            comps: vec![acc],
        }
    }

    /// Symmetric gradient of a vector field.
    pub fn sym_grad(&self, carrier: &Carrier) -> PolyField {
        assert_eq!(self.shape, ValueShape::Vector);
        let d = self.d;
        let comps = sym_pairs(d)
            .iter()
            .map(|&(i, j)| {
                let mut p = self.comps[j].partial(&carrier.grad_lambda, i);
                p.axpy(1.0, &self.comps[i].partial(&carrier.grad_lambda, j));
                p.scale(0.5);
                p
            })
            .collect();
        PolyField {
            d,
            shape: ValueShape::Sym,
            comps,
        }
    }

    /// L2 inner product over the carrier (exact).
    pub fn l2_inner(&self, other: &PolyField, carrier: &Carrier) -> f64 {
        assert_eq!(self.shape, other.shape);
        match self.shape {
            ValueShape::Scalar | ValueShape::Vector => self
                .comps
                .iter()
                .zip(&other.comps)
                .map(|(a, b)| l2_inner_ref(a, b, carrier.measure))
                .sum(),
            ValueShape::Sym => sym_pairs(self.d)
                .iter()
                .zip(self.comps.iter().zip(&other.comps))
                .map(|(&(i, j), (a, b))| {
                    let w = if i == j { 1.0 } else { 2.0 };
                    w * l2_inner_ref(a, b, carrier.measure)
                })
                .sum(),
        }
    }

    pub fn l2_norm(&self, carrier: &Carrier) -> f64 {
        self.l2_inner(self, carrier).max(0.0).sqrt()
    }

    /// Flatten components into one coefficient vector at a common degree
    /// `host_degree` (for rank work on coefficient matrices).
    pub fn coeff_vector(&self, host_degree: usize) -> Vec<f64> {
        let mut out = Vec::new();
        for c in &self.comps {
            let r = c.raised_to(host_degree);
            out.extend_from_slice(&r.coeffs);
        }
        out
    }
}

/// Identifiers for the supported polynomial spaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpaceId {
    /// P_k scalar polynomials on the carrier.
    PkScalar(usize),
    /// P_k ambient-vector polynomials.
    PkVector(usize),
    /// P_k symmetric-tensor polynomials.
    PkSym(usize),
    /// Homogeneous degree-k polynomials in the physical coordinates.
    Homogeneous(usize),
    /// First-kind Nedelec space ND_k on the carrier (cell, face or edge).
    Nedelec(usize),
    /// Quadratic divergence bubbles span{ b_e t_e }.
    DivBubble2,
    /// x x^T H_k enrichment (symmetric, degree k+2).
    XxtH(usize),
    /// sym(x (H_1(R^d))^T) enrichment (symmetric, quadratic).
    SymXH1,
    /// ker(x^T . x) intersected with P_1(T;S).
    KerXtXP1,
    /// ker(. x) intersected with P_k(T;S).
    KerDotXPkSym(usize),
    /// Hessians of P_m scalar polynomials.
    HessImage(usize),
    /// The enriched lowest-order shape space P_1(S) + sym(x H_1) + xx^T H_1.
    Sigma1PP,
    /// P_k(S) + xx^T H_{k-1}.
    SigmaKPlus(usize),
    /// ND_k minus rigid motions (L2-orthogonal complement).
    NedelecComplementRM(usize),
    /// P_k vectors minus rigid motions.
    PkVectorComplementRM(usize),
    /// Mean-zero linear polynomials P_1/R on the carrier.
    P1MeanZero,
}

/// A concrete basis of a polynomial space on a carrier. Members are
/// L2-normalized on the carrier.
#[derive(Debug, Clone)]
pub struct TensorPolyBasis {
    pub space: SpaceId,
    pub carrier: Carrier,
    pub shape: ValueShape,
    pub members: Vec<PolyField>,
}

impl TensorPolyBasis {
    pub fn dim(&self) -> usize {
        self.members.len()
    }

    pub fn gram(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut g = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = self.members[i].l2_inner(&self.members[j], &self.carrier);
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        g
    }

    pub fn gram_condition(&self) -> f64 {
        let svd = self.gram().svd(false, false);
        let sv = &svd.singular_values;
        let max = sv.max();
        let min = sv.min();
        if min <= 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }

    /// Linear combination of members.
    pub fn combine(&self, coeffs: &[f64]) -> PolyField {
        let deg = self.members.iter().map(|m| m.degree()).max().unwrap_or(0);
        let nvars = self.carrier.nvars();
        let mut out = PolyField::zero(self.carrier.dim_ambient, self.shape, nvars, deg);
        out.d = self.members.first().map(|m| m.d).unwrap_or(0);
        for (c, m) in coeffs.iter().zip(&self.members) {
            out.axpy(*c, m);
        }
        out
    }
}

const MAX_SPECIAL_DEGREE: usize = 6;
const MAX_PLAIN_DEGREE: usize = 10;

/// Build a basis for the requested space on the carrier.
pub fn make_basis(space: SpaceId, carrier: &Carrier) -> Result<TensorPolyBasis, FemError> {
    let d = carrier.dim_ambient;
    let nvars = carrier.nvars();
    let check_plain = |k: usize| {
        if k > MAX_PLAIN_DEGREE {
            Err(FemError::UnsupportedSpace(format!(
                "degree {k} beyond supported range"
            )))
        } else {
            Ok(())
        }
    };
    let check_special = |k: usize| {
        if k > MAX_SPECIAL_DEGREE {
            Err(FemError::UnsupportedSpace(format!(
                "degree {k} beyond supported range"
            )))
        } else {
            Ok(())
        }
    };
    let mut members: Vec<PolyField> = Vec::new();
    let shape;
    match space {
        SpaceId::PkScalar(k) => {
            check_plain(k)?;
            shape = ValueShape::Scalar;
            for alpha in &monomials(nvars, k).exps {
                members.push(PolyField::scalar_in(d, Poly::monomial(nvars, alpha)));
            }
        }
        SpaceId::PkVector(k) => {
            check_plain(k)?;
            shape = ValueShape::Vector;
            for alpha in &monomials(nvars, k).exps {
                for j in 0..d {
                    let mut f = PolyField::zero(d, ValueShape::Vector, nvars, k);
                    f.comps[j] = Poly::monomial(nvars, alpha);
                    members.push(f);
                }
            }
        }
        SpaceId::PkSym(k) => {
            check_plain(k)?;
            shape = ValueShape::Sym;
            let pairs = sym_pairs(d);
            for alpha in &monomials(nvars, k).exps {
                for c in 0..pairs.len() {
                    let mut f = PolyField::zero(d, ValueShape::Sym, nvars, k);
                    f.comps[c] = Poly::monomial(nvars, alpha);
                    members.push(f);
                }
            }
        }
        SpaceId::Homogeneous(k) => {
            check_plain(k)?;
            shape = ValueShape::Scalar;
            for p in homogeneous_polys(carrier, k) {
                members.push(PolyField::scalar_in(d, p));
            }
        }
        SpaceId::Nedelec(k) => {
            check_special(k)?;
            shape = ValueShape::Vector;
            members = nedelec_spanning(carrier, k);
            members = l2_reduce(members, carrier);
        }
        SpaceId::DivBubble2 => {
            shape = ValueShape::Vector;
            let m = carrier.dim_intrinsic;
            if m == 0 {
                return Err(FemError::UnsupportedSpace(
                    "div bubbles need an edge or larger".into(),
                ));
            }
            for i in 0..=m {
                for j in i + 1..=m {
                    let b = Poly::coordinate(nvars, i).mul(&Poly::coordinate(nvars, j));
                    let t = (carrier.vertices[j] - carrier.vertices[i]).normalize();
                    let mut f = PolyField::zero(d, ValueShape::Vector, nvars, 2);
                    for c in 0..d {
                        f.comps[c] = b.scaled(t[c]);
                    }
                    members.push(f);
                }
            }
        }
        SpaceId::XxtH(k) => {
            check_special(k)?;
            shape = ValueShape::Sym;
            let xs: Vec<Poly> = (0..d).map(|j| carrier.local_coordinate_poly(j)).collect();
            for q in local_monomials(carrier, k) {
                let pairs = sym_pairs(d);
                let mut f = PolyField::zero(d, ValueShape::Sym, nvars, k + 2);
                for (c, &(i, j)) in pairs.iter().enumerate() {
                    f.comps[c] = xs[i].mul(&xs[j]).mul(&q);
                }
                members.push(f);
            }
        }
        SpaceId::SymXH1 => {
            shape = ValueShape::Sym;
            let xs: Vec<Poly> = (0..d).map(|j| carrier.local_coordinate_poly(j)).collect();
            // q ranges over the canonical basis x_b e_a of H_1(R^d)
            for a in 0..d {
                for b in 0..d {
                    let pairs = sym_pairs(d);
                    let mut f = PolyField::zero(d, ValueShape::Sym, nvars, 2);
                    for (c, &(i, j)) in pairs.iter().enumerate() {
                        // sym(x q^T)_ij = (x_i q_j + x_j q_i)/2 with q = x_b e_a
                        let mut p = Poly::zero(nvars, 2);
                        if j == a {
                            p.axpy(0.5, &xs[i].mul(&xs[b]));
                        }
                        if i == a {
                            p.axpy(0.5, &xs[j].mul(&xs[b]));
                        }
                        f.comps[c] = p;
                    }
                    members.push(f);
                }
            }
        }
        SpaceId::KerXtXP1 => {
            shape = ValueShape::Sym;
            let p1s = make_basis(SpaceId::PkSym(1), carrier)?;
            let xs: Vec<Poly> = (0..d).map(|j| carrier.local_coordinate_poly(j)).collect();
            let map = |f: &PolyField| -> PolyField {
                // x^T tau x as a cubic scalar
                let pairs = sym_pairs(d);
                let mut acc = Poly::zero(nvars, f.degree() + 2);
                for (c, &(i, j)) in pairs.iter().enumerate() {
                    let w = if i == j { 1.0 } else { 2.0 };
                    acc.axpy(w, &xs[i].mul(&xs[j]).mul(&f.comps[c]));
                }
                PolyField::scalar_in(d, acc)
            };
            members = nullspace_members(&p1s, map);
        }
        SpaceId::KerDotXPkSym(k) => {
            check_special(k)?;
            shape = ValueShape::Sym;
            let pks = make_basis(SpaceId::PkSym(k), carrier)?;
            let xs: Vec<Poly> = (0..d).map(|j| carrier.local_coordinate_poly(j)).collect();
            let map = |f: &PolyField| -> PolyField {
                // tau x as a vector field of degree k+1
                let pairs = sym_pairs(d);
                let mut out = PolyField::zero(d, ValueShape::Vector, nvars, f.degree() + 1);
                for i in 0..d {
                    for j in 0..d {
                        let (a, b) = if i <= j { (i, j) } else { (j, i) };
                        let pos = pairs.iter().position(|&p| p == (a, b)).unwrap();
                        out.comps[i].axpy(1.0, &f.comps[pos].mul(&xs[j]));
                    }
                }
                out
            };
            members = nullspace_members(&pks, map);
        }
        SpaceId::HessImage(m) => {
            check_plain(m)?;
            shape = ValueShape::Sym;
            let mut cands = Vec::new();
            for alpha in &monomials(nvars, m).exps {
                let p = PolyField::scalar_in(d, Poly::monomial(nvars, alpha));
                cands.push(p.hessian(carrier));
            }
            members = l2_reduce(cands, carrier);
        }
        SpaceId::Sigma1PP => {
            shape = ValueShape::Sym;
            members.extend(make_basis(SpaceId::PkSym(1), carrier)?.members);
            members.extend(make_basis(SpaceId::SymXH1, carrier)?.members);
            members.extend(make_basis(SpaceId::XxtH(1), carrier)?.members);
        }
        SpaceId::SigmaKPlus(k) => {
            check_special(k)?;
            if k < 1 {
                return Err(FemError::UnsupportedSpace("SigmaKPlus needs k >= 1".into()));
            }
            shape = ValueShape::Sym;
            members.extend(make_basis(SpaceId::PkSym(k), carrier)?.members);
            members.extend(make_basis(SpaceId::XxtH(k - 1), carrier)?.members);
        }
        SpaceId::NedelecComplementRM(k) => {
            check_special(k)?;
            shape = ValueShape::Vector;
            let nd = make_basis(SpaceId::Nedelec(k), carrier)?;
            members = complement_of_rm(nd.members, carrier);
        }
        SpaceId::PkVectorComplementRM(k) => {
            check_special(k)?;
            shape = ValueShape::Vector;
            let pk = make_basis(SpaceId::PkVector(k), carrier)?;
            members = complement_of_rm(pk.members, carrier);
        }
        SpaceId::P1MeanZero => {
            shape = ValueShape::Scalar;
            let m = carrier.dim_intrinsic;
            for i in 1..=m {
                let mut p = Poly::coordinate(nvars, i);
                p.axpy(-1.0 / (m + 1) as f64, &Poly::constant(nvars, 1.0));
                members.push(PolyField::scalar_in(d, p));
            }
        }
    }
    // L2-normalize members
    for f in &mut members {
        let n = f.l2_norm(carrier);
        if n > 0.0 {
            f.scale(1.0 / n);
        }
    }
    Ok(TensorPolyBasis {
        space,
        carrier: carrier.clone(),
        shape,
        members,
    })
}

/// Monomials of the physical coordinates of exact total degree k, as
/// polynomials on the carrier.
fn homogeneous_polys(carrier: &Carrier, k: usize) -> Vec<Poly> {
    let d = carrier.dim_ambient;
    let xs: Vec<Poly> = (0..d).map(|j| carrier.coordinate_poly(j)).collect();
    monomial_products(carrier, k, &xs)
}

/// Same monomials in the centered, scaled cell frame.
fn local_monomials(carrier: &Carrier, k: usize) -> Vec<Poly> {
    let d = carrier.dim_ambient;
    let xs: Vec<Poly> = (0..d).map(|j| carrier.local_coordinate_poly(j)).collect();
    monomial_products(carrier, k, &xs)
}

fn monomial_products(carrier: &Carrier, k: usize, xs: &[Poly]) -> Vec<Poly> {
    crate::quadrature::compositions(k, xs.len())
        .into_iter()
        .map(|beta| {
            let mut p = Poly::constant(carrier.nvars(), 1.0);
            for (j, &b) in beta.iter().enumerate() {
                for _ in 0..b {
                    p = p.mul(&xs[j]);
                }
            }
            p.raised_to(k)
        })
        .collect()
}

/// Spanning set of the first-kind Nedelec space ND_k on a cell, face or edge
/// carrier: P_k vectors tangent to the carrier plus H_k(K) x.
fn nedelec_spanning(carrier: &Carrier, k: usize) -> Vec<PolyField> {
    let d = carrier.dim_ambient;
    let m = carrier.dim_intrinsic;
    let nvars = carrier.nvars();
    let mut out = Vec::new();
    // tangent frame of the carrier
    let tangents: Vec<Vector3<f64>> = carrier_tangents(carrier);
    // P_k(carrier) tensor tangent directions
    for alpha in &monomials(nvars, k).exps {
        for t in &tangents {
            let p = Poly::monomial(nvars, alpha);
            let mut f = PolyField::zero(d, ValueShape::Vector, nvars, k);
            for c in 0..d {
                f.comps[c] = p.scaled(t[c]);
            }
            out.push(f);
        }
    }
    if m >= 2 {
        // H_k(K) x part in intrinsic coordinates centered at the first vertex
        let xi: Vec<Poly> = (0..m)
            .map(|i| {
                let mut p = Poly::zero(nvars, 1);
                for (jv, v) in carrier.vertices.iter().enumerate() {
                    p.axpy(
                        (v - carrier.vertices[0]).dot(&tangents[i]),
                        &Poly::coordinate(nvars, jv),
                    );
                }
                p
            })
            .collect();
        // skew basis W_ab (a<b): (Wx)_a = -xi_b, (Wx)_b = xi_a
        for a in 0..m {
            for b in a + 1..m {
                for beta in crate::quadrature::compositions(k, m) {
                    let mut h = Poly::constant(nvars, 1.0);
                    for (i, &e) in beta.iter().enumerate() {
                        for _ in 0..e {
                            h = h.mul(&xi[i]);
                        }
                    }
                    let pa = h.mul(&xi[b]).scaled(-1.0);
                    let pb = h.mul(&xi[a]);
                    let mut f = PolyField::zero(d, ValueShape::Vector, nvars, k + 1);
                    for c in 0..d {
                        let mut comp = pa.scaled(tangents[a][c]);
                        comp.axpy(tangents[b][c], &pb);
                        f.comps[c] = comp;
                    }
                    out.push(f);
                }
            }
        }
    }
    out
}

/// Orthonormal tangent frame for a carrier (deterministic, from the sorted
/// vertex order).
pub fn carrier_tangents(carrier: &Carrier) -> Vec<Vector3<f64>> {
    let m = carrier.dim_intrinsic;
    let mut ts: Vec<Vector3<f64>> = Vec::new();
    for i in 1..=m {
        let mut v = carrier.vertices[i] - carrier.vertices[0];
        for t in &ts {
            v -= t * v.dot(t);
        }
        ts.push(v.normalize());
    }
    ts
}

/// Rigid motion fields b + W x on the carrier's ambient space.
pub fn rigid_motions(carrier: &Carrier) -> Vec<PolyField> {
    let d = carrier.dim_ambient;
    let nvars = carrier.nvars();
    let xs: Vec<Poly> = (0..d).map(|j| carrier.local_coordinate_poly(j)).collect();
    let mut out = Vec::new();
    for j in 0..d {
        let mut f = PolyField::zero(d, ValueShape::Vector, nvars, 0);
        f.comps[j] = Poly::constant(nvars, 1.0);
        out.push(f);
    }
    for a in 0..d {
        for b in a + 1..d {
            let mut f = PolyField::zero(d, ValueShape::Vector, nvars, 1);
            f.comps[a] = xs[b].scaled(-1.0);
            f.comps[b] = xs[a].clone();
            out.push(f);
        }
    }
    out
}

fn complement_of_rm(fields: Vec<PolyField>, carrier: &Carrier) -> Vec<PolyField> {
    let rm = l2_reduce(rigid_motions(carrier), carrier);
    let mut rest = Vec::new();
    for f in fields {
        let mut g = f.homogenized();
        let orig = g.l2_norm(carrier).max(1e-300);
        for _ in 0..2 {
            for r in &rm {
                let c = g.l2_inner(r, carrier);
                g.axpy(-c, &r.clone().homogenized());
            }
        }
        if g.l2_norm(carrier) > RANK_TOL.sqrt() * orig {
            rest.push(g);
        }
    }
    l2_reduce(rest, carrier)
}

/// Modified Gram-Schmidt with re-orthogonalization under the carrier L2
/// inner product; near-dependent members are dropped.
pub fn l2_reduce(fields: Vec<PolyField>, carrier: &Carrier) -> Vec<PolyField> {
    let mut basis: Vec<PolyField> = Vec::new();
    for f in fields {
        let mut g = f.clone();
        let orig = g.l2_norm(carrier).max(1e-300);
        for _ in 0..2 {
            for b in &basis {
                let c = g.l2_inner(b, carrier);
                g.axpy(-c, b);
            }
        }
        let n = g.l2_norm(carrier);
        if n > RANK_TOL.sqrt() * orig {
            g.scale(1.0 / n);
            basis.push(g);
        }
    }
    basis
}

/// Members of the nullspace of a linear map given by `map` applied to the
/// basis members, via SVD on the image coefficient matrix.
fn nullspace_members<F: Fn(&PolyField) -> PolyField>(
    basis: &TensorPolyBasis,
    map: F,
) -> Vec<PolyField> {
    let images: Vec<PolyField> = basis.members.iter().map(|f| map(f)).collect();
    let host = images.iter().map(|f| f.degree()).max().unwrap_or(0);
    let rows = images
        .first()
        .map(|f| f.coeff_vector(host).len())
        .unwrap_or(0);
    let n = images.len();
    // pad with zero rows so the thin SVD carries the full right factor
    let mut a = DMatrix::<f64>::zeros(rows.max(n), n);
    for (j, f) in images.iter().enumerate() {
        for (i, v) in f.coeff_vector(host).iter().enumerate() {
            a[(i, j)] = *v;
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.unwrap();
    let smax = svd.singular_values.max();
    let mut out = Vec::new();
    for r in 0..n {
        if svd.singular_values[r] <= RANK_TOL * smax {
            let coeffs: Vec<f64> = (0..n).map(|j| vt[(r, j)]).collect();
            out.push(basis.combine(&coeffs));
        }
    }
    out
}

/// Differential operators exposed on bases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffOp {
    Grad,
    Hessian,
    Div,
    DivDiv,
}

/// Apply an exact differential operator to every member and express the
/// images in a canonical polynomial basis of the image space. Returns the
/// image basis and the coefficient map (columns indexed by input members).
pub fn differentiate(
    basis: &TensorPolyBasis,
    op: DiffOp,
) -> Result<(TensorPolyBasis, DMatrix<f64>), FemError> {
    let carrier = &basis.carrier;
    let images: Vec<PolyField> = match (op, basis.shape) {
        (DiffOp::Grad, ValueShape::Scalar) => {
            basis.members.iter().map(|f| f.grad(carrier)).collect()
        }
        (DiffOp::Hessian, ValueShape::Scalar) => {
            basis.members.iter().map(|f| f.hessian(carrier)).collect()
        }
        (DiffOp::Div, ValueShape::Sym) => basis.members.iter().map(|f| f.div(carrier)).collect(),
        (DiffOp::DivDiv, ValueShape::Sym) => {
            basis.members.iter().map(|f| f.divdiv(carrier)).collect()
        }
        (op, shape) => {
            return Err(FemError::ShapeMismatch(format!(
                "{op:?} not applicable to {shape:?} fields"
            )))
        }
    };
    let img_degree = images.iter().map(|f| f.degree()).max().unwrap_or(0);
    let img_space = match op {
        DiffOp::Grad | DiffOp::Div => SpaceId::PkVector(img_degree),
        DiffOp::Hessian => SpaceId::PkSym(img_degree),
        DiffOp::DivDiv => SpaceId::PkScalar(img_degree),
    };
    let image_basis = make_basis(img_space, carrier)?;
    let g = image_basis.gram();
    let lu = g.lu();
    let mut map = DMatrix::zeros(image_basis.dim(), basis.dim());
    for (j, f) in images.iter().enumerate() {
        let mut rhs = nalgebra::DVector::zeros(image_basis.dim());
        for (i, b) in image_basis.members.iter().enumerate() {
            rhs[i] = f.l2_inner(b, carrier);
        }
        let sol = lu.solve(&rhs).ok_or_else(|| {
            FemError::SolverFailure("singular image Gram in differentiate".into())
        })?;
        for i in 0..image_basis.dim() {
            map[(i, j)] = sol[i];
        }
    }
    Ok((image_basis, map))
}

/// Reference simplices for tests and verification sweeps.
pub fn reference_carrier(d: usize) -> Carrier {
    let verts = match d {
        2 => vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
        ],
        3 => vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
        ],
        _ => panic!("reference carrier only for d = 2, 3"),
    };
    Carrier::from_vertices(d, verts).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binom(n: usize, k: usize) -> usize {
        if k > n {
            return 0;
        }
        let mut r = 1usize;
        for i in 0..k {
            r = r * (n - i) / (i + 1);
        }
        r
    }

    #[test]
    fn pk_sym_dimension_3d() {
        let c = reference_carrier(3);
        let b = make_basis(SpaceId::PkSym(3), &c).unwrap();
        assert_eq!(b.dim(), binom(6, 3) * 6); // 120
        assert_eq!(b.dim(), 120);
    }

    #[test]
    fn sigma1pp_dimension() {
        let c3 = reference_carrier(3);
        assert_eq!(make_basis(SpaceId::Sigma1PP, &c3).unwrap().dim(), 36);
        let c2 = reference_carrier(2);
        assert_eq!(make_basis(SpaceId::Sigma1PP, &c2).unwrap().dim(), 15);
    }

    #[test]
    fn ker_xtx_dimension() {
        let c3 = reference_carrier(3);
        let b = make_basis(SpaceId::KerXtXP1, &c3).unwrap();
        assert_eq!(b.dim(), 8); // 2 * C(4,3)
        let c2 = reference_carrier(2);
        assert_eq!(make_basis(SpaceId::KerXtXP1, &c2).unwrap().dim(), 2);
    }

    #[test]
    fn div_bubble_dimension() {
        // triangular face of a tet
        let f = Carrier::from_vertices(
            3,
            vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
            ],
        )
        .unwrap();
        assert_eq!(make_basis(SpaceId::DivBubble2, &f).unwrap().dim(), 3);
    }

    #[test]
    fn nedelec_dimensions() {
        let c3 = reference_carrier(3);
        // dim ND_k = (k+1)(k+3)(k+4)/2 in 3D
        for k in 0..=3usize {
            let b = make_basis(SpaceId::Nedelec(k), &c3).unwrap();
            assert_eq!(b.dim(), (k + 1) * (k + 3) * (k + 4) / 2, "k = {k}");
        }
        let c2 = reference_carrier(2);
        for k in 0..=3usize {
            let b = make_basis(SpaceId::Nedelec(k), &c2).unwrap();
            assert_eq!(b.dim(), (k + 1) * (k + 3), "k = {k}");
        }
    }

    #[test]
    fn gram_well_conditioned() {
        let c = reference_carrier(3);
        for space in [
            SpaceId::PkSym(3),
            SpaceId::Sigma1PP,
            SpaceId::SigmaKPlus(2),
            SpaceId::Nedelec(2),
        ] {
            let b = make_basis(space, &c).unwrap();
            assert!(b.gram_condition() < 1e12, "{space:?}");
        }
    }

    #[test]
    fn divdiv_of_xxt() {
        // div div (x x^T) = d(d+1) for the constant homogeneous weight;
        // in 3D the value is 12 (in the scaled cell frame the derivative
        // picks up 1/h per factor of x)
        let c = reference_carrier(3);
        let b = make_basis(SpaceId::XxtH(0), &c).unwrap();
        assert_eq!(b.dim(), 1);
        // recover the normalization from the (0,0) entry at a point away
        // from the cell center
        let lam = [0.7, 0.1, 0.1, 0.1];
        let x = c.physical(&lam);
        let xhat = (x - c.centroid) / c.diameter;
        let v = b.members[0].value_sym(&lam);
        let scale = v[(0, 0)] / (xhat[0] * xhat[0]);
        let dd = b.members[0].divdiv(&c);
        let val = dd.comps[0].eval(&lam) / scale * c.diameter * c.diameter;
        assert!((val - 12.0).abs() < 1e-9, "{val}");
    }

    #[test]
    fn xt_hess_x_identity_on_homogeneous() {
        // x^T (hess q) x = r(r-1) q for homogeneous q of degree r
        let c = reference_carrier(3);
        for r in 2..=4usize {
            for q in homogeneous_polys(&c, r) {
                let f = PolyField::scalar_in(3, q.clone());
                let h = f.hessian(&c);
                let lam = [0.1, 0.2, 0.3, 0.4];
                let x = c.physical(&lam);
                let hm = h.value_sym(&lam);
                let lhs = (x.transpose() * hm * x)[(0, 0)];
                let rhs = (r * (r - 1)) as f64 * q.eval(&lam);
                assert!((lhs - rhs).abs() < 1e-12 * rhs.abs().max(1.0));
            }
        }
    }

    #[test]
    fn kernel_members_annihilate_quadratic_form() {
        let c = reference_carrier(3);
        let b = make_basis(SpaceId::KerXtXP1, &c).unwrap();
        let rule = crate::quadrature::simplex_quadrature(3, 4).unwrap();
        for m in &b.members {
            let mut worst: f64 = 0.0;
            for p in &rule.points {
                let x = (c.physical(p) - c.centroid) / c.diameter;
                let v = m.value_sym(p);
                worst = worst.max((x.transpose() * v * x)[(0, 0)].abs());
            }
            assert!(worst < 1e-10, "{worst}");
        }
    }

    #[test]
    fn hessian_decomposition_spans_p1_sym() {
        // hess P_3 + ker(x^T . x) spans P_1(T;S)
        for d in [2usize, 3] {
            let c = reference_carrier(d);
            let hess = make_basis(SpaceId::HessImage(3), &c).unwrap();
            let ker = make_basis(SpaceId::KerXtXP1, &c).unwrap();
            let p1s = make_basis(SpaceId::PkSym(1), &c).unwrap();
            assert_eq!(hess.dim() + ker.dim(), p1s.dim());
            let host = 1usize;
            let ncoef = p1s.members[0].coeff_vector(host).len();
            let n = hess.dim() + ker.dim();
            let mut a = DMatrix::<f64>::zeros(ncoef, n);
            for (j, f) in hess.members.iter().chain(ker.members.iter()).enumerate() {
                let cv = f.coeff_vector(host);
                for (i, v) in cv.iter().enumerate() {
                    a[(i, j)] = *v;
                }
            }
            // column-normalize then check the smallest singular value
            for j in 0..n {
                let nrm = a.column(j).norm();
                for i in 0..ncoef {
                    a[(i, j)] /= nrm;
                }
            }
            let sv = a.svd(false, false).singular_values;
            assert!(sv.min() > 1e-8, "d = {d}: {}", sv.min());
        }
    }

    #[test]
    fn grad_then_div_is_laplacian() {
        let c = reference_carrier(2);
        let b = make_basis(SpaceId::PkScalar(3), &c).unwrap();
        for f in &b.members {
            let g = f.grad(&c);
            // divergence of the gradient
            let mut lap = Poly::zero(c.nvars(), 1);
            for (i, comp) in g.comps.iter().enumerate() {
                lap.axpy(1.0, &comp.partial(&c.grad_lambda, i));
            }
            let h = f.hessian(&c);
            let lam = [0.3, 0.3, 0.4];
            let tr = h.value_sym(&lam).trace();
            assert!((lap.eval(&lam) - tr).abs() < 1e-12);
        }
    }

    #[test]
    fn evaluate_examples() {
        let f = PolyField::scalar_in(2, Poly::coordinate(3, 0));
        assert_eq!(f.value_scalar(&[1.0, 0.0, 0.0]), 1.0);
        let at_c = f.value_scalar(&[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);
        assert!((at_c - 1.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn unknown_like_request_rejected() {
        let c = reference_carrier(2);
        assert!(make_basis(SpaceId::PkScalar(11), &c).is_err());
        assert!(make_basis(SpaceId::Nedelec(7), &c).is_err());
    }
}
