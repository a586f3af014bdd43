//! Local elements: shape spaces, the three trace operators tr1/tr2/tr_e,
//! degree-of-freedom tables for each family, DoF matrices and canonical
//! interpolation.
//!
//! Families:
//! * `New(k)`, k >= 3: shape space P_k(T;S) with redistributed ridge/face
//!   trace moments, tangential-normal face moments, interior deformation and
//!   kernel moments.
//! * `RtPlus(k)`, k >= 2: enriched shape space P_k(S) + x x^T H_{k-1}; for
//!   k >= 3 the interior deformation test space grows to P_{k-2} vectors,
//!   for k = 2 the table uses div-bubble sub-simplex moments and the
//!   quadratic-form kernel.
//! * `OnePp`: the 36-DoF (3D) / 15-DoF (2D) lowest-order enriched element
//!   carried entirely by trace moments of degree 1.
//! * `NcK2`: the nonconforming quadratic table used for verification only.

use crate::basis::{make_basis, Carrier, PolyField, SpaceId, TensorPolyBasis, ValueShape};
use crate::error::FemError;
use crate::frames::{cell_carrier, face_carrier, ridge_carrier, EntityFrames};
use crate::mesh::SimplicialMesh;
use crate::quadrature::{factorial, simplex_quadrature, QuadratureRule};
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

/// Element family tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementFamily {
    New(usize),
    RtPlus(usize),
    OnePp,
    NcK2,
}

impl ElementFamily {
    pub fn validate(&self) -> Result<(), FemError> {
        match self {
            ElementFamily::New(k) if !(3..=6).contains(k) => Err(FemError::UnsupportedFamily(
                format!("New requires 3 <= k <= 6, got {k}"),
            )),
            ElementFamily::RtPlus(k) if !(2..=6).contains(k) => Err(FemError::UnsupportedFamily(
                format!("RtPlus requires 2 <= k <= 6, got {k}"),
            )),
            _ => Ok(()),
        }
    }

    /// Trace degree k of the family (ridge and normal-normal moments).
    pub fn trace_degree(&self) -> usize {
        match self {
            ElementFamily::New(k) | ElementFamily::RtPlus(k) => *k,
            ElementFamily::OnePp => 1,
            ElementFamily::NcK2 => 2,
        }
    }

    /// Interior moment degree r of the paired range space.
    pub fn moment_degree(&self) -> i64 {
        match self {
            ElementFamily::New(k) => *k as i64 - 2,
            ElementFamily::RtPlus(k) => *k as i64 - 1,
            ElementFamily::OnePp => 1,
            ElementFamily::NcK2 => 0,
        }
    }

    pub fn shape_space(&self) -> SpaceId {
        match self {
            ElementFamily::New(k) => SpaceId::PkSym(*k),
            ElementFamily::RtPlus(k) => SpaceId::SigmaKPlus(*k),
            ElementFamily::OnePp => SpaceId::Sigma1PP,
            ElementFamily::NcK2 => SpaceId::PkSym(2),
        }
    }

    pub fn name(&self) -> String {
        match self {
            ElementFamily::New(k) => format!("new_k{k}"),
            ElementFamily::RtPlus(k) => format!("rtplus_k{k}"),
            ElementFamily::OnePp => "onepp".into(),
            ElementFamily::NcK2 => "nc_k2".into(),
        }
    }
}

/// Kinds of degree-of-freedom functionals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceKind {
    RidgeTrE,
    FaceNn,
    FaceTr2,
    FaceTangentialNormal,
    InteriorDef,
    InteriorKernel,
    BubbleMoment,
    DivDivMoment,
}

/// Entity a functional lives on.
#[derive(Debug, Clone)]
pub enum EntityRef {
    Cell,
    Face { local: usize, global: usize },
    Ridge { local: usize, global: usize },
    SubSimplex { verts: Vec<usize> },
}

/// A single bounded linear functional evaluable by quadrature on its entity.
#[derive(Debug, Clone)]
pub struct DoFunctional {
    pub kind: TraceKind,
    pub entity: EntityRef,
    pub carrier: Carrier,
    /// Test function on the entity carrier.
    pub test: PolyField,
    pub test_index: usize,
    /// Face pairs (conormal n_{F,e}, outward normal n_{dT}) for ridge
    /// functionals; a single (n, n) entry for the face kinds; (n_{F_r}, -)
    /// for bubble moments.
    pub normals: Vec<(Vector3<f64>, Vector3<f64>)>,
    /// Orthonormal face tangents for tr2.
    pub tangents: Vec<Vector3<f64>>,
}

/// Fields a functional can be applied to: exact polynomial fields implement
/// all methods, user callables supply what they have.
pub trait SymField {
    fn value(&self, x: &Vector3<f64>) -> Matrix3<f64>;
    fn gradient(&self, _x: &Vector3<f64>) -> Option<[Matrix3<f64>; 3]> {
        None
    }
    fn divdiv(&self, _x: &Vector3<f64>) -> Option<f64> {
        None
    }
}

/// Exact polynomial field on a cell with precomputed partial derivatives.
pub struct CellSymPoly {
    pub carrier: Carrier,
    pub field: PolyField,
    partials: Vec<PolyField>,
    divdiv: PolyField,
}

impl CellSymPoly {
    pub fn new(carrier: Carrier, field: PolyField) -> Self {
        assert_eq!(field.shape, ValueShape::Sym);
        let d = carrier.dim_ambient;
        let partials = (0..d)
            .map(|l| {
                let comps = field
                    .comps
                    .iter()
                    .map(|p| p.partial(&carrier.grad_lambda, l))
                    .collect();
                PolyField {
                    d: field.d,
                    shape: ValueShape::Sym,
                    comps,
                }
            })
            .collect();
        let divdiv = field.divdiv(&carrier);
        CellSymPoly {
            carrier,
            field,
            partials,
            divdiv,
        }
    }
}

impl SymField for CellSymPoly {
    fn value(&self, x: &Vector3<f64>) -> Matrix3<f64> {
        let lam = self.carrier.barycentric(x);
        self.field.value_sym(&lam)
    }

    fn gradient(&self, x: &Vector3<f64>) -> Option<[Matrix3<f64>; 3]> {
        let lam = self.carrier.barycentric(x);
        let mut out = [Matrix3::zeros(); 3];
        for (l, p) in self.partials.iter().enumerate() {
            out[l] = p.value_sym(&lam);
        }
        Some(out)
    }

    fn divdiv(&self, x: &Vector3<f64>) -> Option<f64> {
        let lam = self.carrier.barycentric(x);
        Some(self.divdiv.value_scalar(&lam))
    }
}

/// tr2 integrand n . div tau + div_F(tau n) at a point, from the value
/// gradient.
pub fn tr2_pointwise(
    grad: &[Matrix3<f64>; 3],
    n: &Vector3<f64>,
    tangents: &[Vector3<f64>],
) -> f64 {
    // n^T div tau with the row-wise divergence
    let mut acc = 0.0;
    for i in 0..3 {
        let mut div_i = 0.0;
        for j in 0..3 {
            div_i += grad[j][(i, j)];
        }
        acc += n[i] * div_i;
    }
    // surface divergence of tau n
    for t in tangents {
        for b in 0..3 {
            let w = grad[b] * n;
            acc += t[b] * t.dot(&w);
        }
    }
    acc
}

impl DoFunctional {
    /// Evaluate the functional on a field by quadrature of the given degree
    /// on the entity.
    pub fn apply(&self, field: &dyn SymField, degree: usize) -> Result<f64, FemError> {
        let m = self.carrier.dim_intrinsic;
        let rule = simplex_quadrature(m, degree)?;
        self.apply_with_rule(field, &rule)
    }

    pub fn apply_with_rule(
        &self,
        field: &dyn SymField,
        rule: &QuadratureRule,
    ) -> Result<f64, FemError> {
        let m = self.carrier.dim_intrinsic;
        let scale = self.carrier.measure * factorial(m);
        let mut acc = 0.0;
        for (p, w) in rule.points.iter().zip(&rule.weights) {
            let x = self.carrier.physical(p);
            let contrib = match self.kind {
                TraceKind::RidgeTrE => {
                    let tau = field.value(&x);
                    let q = self.test.value_scalar(p);
                    let mut s = 0.0;
                    for (conormal, outward) in &self.normals {
                        s += (conormal.transpose() * tau * outward)[(0, 0)];
                    }
                    s * q
                }
                TraceKind::FaceNn => {
                    let tau = field.value(&x);
                    let n = self.normals[0].0;
                    let q = self.test.value_scalar(p);
                    (n.transpose() * tau * n)[(0, 0)] * q
                }
                TraceKind::FaceTr2 => {
                    let grad = field
                        .gradient(&x)
                        .ok_or(FemError::MissingDerivative("tr2"))?;
                    let n = self.normals[0].0;
                    let q = self.test.value_scalar(p);
                    tr2_pointwise(&grad, &n, &self.tangents) * q
                }
                TraceKind::FaceTangentialNormal | TraceKind::BubbleMoment => {
                    let tau = field.value(&x);
                    let n = self.normals[0].0;
                    let q = self.test.value_vector(p);
                    (tau * n).dot(&q)
                }
                TraceKind::InteriorDef | TraceKind::InteriorKernel => {
                    let tau = field.value(&x);
                    let q = self.test.value_sym(p);
                    (0..3)
                        .flat_map(|i| (0..3).map(move |j| (i, j)))
                        .map(|(i, j)| tau[(i, j)] * q[(i, j)])
                        .sum()
                }
                TraceKind::DivDivMoment => {
                    let dd = field
                        .divdiv(&x)
                        .ok_or(FemError::MissingDerivative("div div moment"))?;
                    dd * self.test.value_scalar(p)
                }
            };
            acc += w * contrib;
        }
        Ok(acc * scale)
    }
}

/// A local element: shape basis plus the functional table on one cell.
pub struct LocalElement {
    pub family: ElementFamily,
    pub cell: usize,
    pub carrier: Carrier,
    pub shape: TensorPolyBasis,
    pub dofs: Vec<DoFunctional>,
}

/// Build the local element for `family` on cell `t`.
pub fn build_local_element(
    family: ElementFamily,
    mesh: &SimplicialMesh,
    frames: &EntityFrames,
    t: usize,
) -> Result<LocalElement, FemError> {
    family.validate()?;
    let d = mesh.dim;
    let carrier = cell_carrier(mesh, t);
    let shape = make_basis(family.shape_space(), &carrier)?;
    let k = family.trace_degree();
    let mut dofs: Vec<DoFunctional> = Vec::new();

    // ridge tr_e moments against P_k(e)
    for (le, &e) in mesh.cell_ridges[t].iter().enumerate() {
        let rc = ridge_carrier(mesh, e);
        let tests = make_basis(SpaceId::PkScalar(k), &rc)?;
        // face pairs of this cell containing the ridge
        let mut pairs = Vec::new();
        for (lf, &f) in mesh.cell_faces[t].iter().enumerate() {
            if let Some(pos) = mesh.face_ridges[f].iter().position(|&r| r == e) {
                let outward = frames.face_normal[f] * frames.cell_face_sign[t][lf];
                pairs.push((frames.face_ridge_conormal[f][pos], outward));
            }
        }
        debug_assert_eq!(pairs.len(), 2);
        for (ti, q) in tests.members.iter().enumerate() {
            dofs.push(DoFunctional {
                kind: TraceKind::RidgeTrE,
                entity: EntityRef::Ridge {
                    local: le,
                    global: e,
                },
                carrier: rc.clone(),
                test: q.clone(),
                test_index: ti,
                normals: pairs.clone(),
                tangents: vec![],
            });
        }
    }

    // face normal-normal moments against P_k(F)
    for (lf, &f) in mesh.cell_faces[t].iter().enumerate() {
        let fc = face_carrier(mesh, f);
        let tests = make_basis(SpaceId::PkScalar(k), &fc)?;
        let outward = frames.face_normal[f] * frames.cell_face_sign[t][lf];
        for (ti, q) in tests.members.iter().enumerate() {
            dofs.push(DoFunctional {
                kind: TraceKind::FaceNn,
                entity: EntityRef::Face {
                    local: lf,
                    global: f,
                },
                carrier: fc.clone(),
                test: q.clone(),
                test_index: ti,
                normals: vec![(outward, outward)],
                tangents: vec![],
            });
        }
    }

    // face tr2 moments
    let tr2_space = match family {
        ElementFamily::NcK2 => SpaceId::P1MeanZero,
        ElementFamily::OnePp => SpaceId::PkScalar(1),
        ElementFamily::RtPlus(2) => SpaceId::PkScalar(1),
        _ => SpaceId::PkScalar(k - 1),
    };
    for (lf, &f) in mesh.cell_faces[t].iter().enumerate() {
        let fc = face_carrier(mesh, f);
        let tests = make_basis(tr2_space, &fc)?;
        let outward = frames.face_normal[f] * frames.cell_face_sign[t][lf];
        let tangents: Vec<Vector3<f64>> = frames.face_tangents[f][..d - 1].to_vec();
        for (ti, q) in tests.members.iter().enumerate() {
            dofs.push(DoFunctional {
                kind: TraceKind::FaceTr2,
                entity: EntityRef::Face {
                    local: lf,
                    global: f,
                },
                carrier: fc.clone(),
                test: q.clone(),
                test_index: ti,
                normals: vec![(outward, outward)],
                tangents: tangents.clone(),
            });
        }
    }

    // face tangential-normal moments against ND_{k-2}(F)
    if matches!(family, ElementFamily::New(_))
        || matches!(family, ElementFamily::RtPlus(kk) if kk >= 3)
    {
        for (lf, &f) in mesh.cell_faces[t].iter().enumerate() {
            let fc = face_carrier(mesh, f);
            let tests = make_basis(SpaceId::Nedelec(k - 2), &fc)?;
            let outward = frames.face_normal[f] * frames.cell_face_sign[t][lf];
            for (ti, q) in tests.members.iter().enumerate() {
                dofs.push(DoFunctional {
                    kind: TraceKind::FaceTangentialNormal,
                    entity: EntityRef::Face {
                        local: lf,
                        global: f,
                    },
                    carrier: fc.clone(),
                    test: q.clone(),
                    test_index: ti,
                    normals: vec![(outward, outward)],
                    tangents: vec![],
                });
            }
        }
    }

    // sub-simplex div-bubble moments (k = 2 tables, 3D only)
    if matches!(family, ElementFamily::RtPlus(2) | ElementFamily::NcK2) {
        for r in (3..=d).rev() {
            // f_{0:r-2} spanned by the first r-1 sorted cell vertices
            let verts: Vec<usize> = mesh.cells[t][..r - 1].to_vec();
            let sub =
                Carrier::from_vertices(d, verts.iter().map(|&v| mesh.vertices[v]).collect())?;
            let tests = make_basis(SpaceId::DivBubble2, &sub)?;
            // n_{F_r}: outward normal of the face opposite local vertex r
            let f = mesh.cell_faces[t][r];
            let lf = r;
            let outward = frames.face_normal[f] * frames.cell_face_sign[t][lf];
            for (ti, q) in tests.members.iter().enumerate() {
                dofs.push(DoFunctional {
                    kind: TraceKind::BubbleMoment,
                    entity: EntityRef::SubSimplex {
                        verts: verts.clone(),
                    },
                    carrier: sub.clone(),
                    test: q.clone(),
                    test_index: ti,
                    normals: vec![(outward, outward)],
                    tangents: vec![],
                });
            }
        }
    }

    // interior deformation moments
    let def_space = match family {
        ElementFamily::New(k) => Some(SpaceId::NedelecComplementRM(k - 3)),
        ElementFamily::RtPlus(k) if k >= 3 => Some(SpaceId::PkVectorComplementRM(k - 2)),
        _ => None,
    };
    if let Some(space) = def_space {
        let tests = make_basis(space, &carrier)?;
        for (ti, q) in tests.members.iter().enumerate() {
            let def_q = q.sym_grad(&carrier);
            dofs.push(DoFunctional {
                kind: TraceKind::InteriorDef,
                entity: EntityRef::Cell,
                carrier: carrier.clone(),
                test: def_q,
                test_index: ti,
                normals: vec![],
                tangents: vec![],
            });
        }
    }

    // interior kernel moments
    let kernel_space = match family {
        ElementFamily::New(k) | ElementFamily::RtPlus(k) if k >= 3 => {
            Some(SpaceId::KerDotXPkSym(k - 2))
        }
        ElementFamily::RtPlus(_) | ElementFamily::NcK2 => Some(SpaceId::KerXtXP1),
        _ => None,
    };
    if let Some(space) = kernel_space {
        let tests = make_basis(space, &carrier)?;
        for (ti, q) in tests.members.iter().enumerate() {
            dofs.push(DoFunctional {
                kind: TraceKind::InteriorKernel,
                entity: EntityRef::Cell,
                carrier: carrier.clone(),
                test: q.clone(),
                test_index: ti,
                normals: vec![],
                tangents: vec![],
            });
        }
    }

    // div div moments (verification table only)
    if matches!(family, ElementFamily::NcK2) {
        let tests = make_basis(SpaceId::PkScalar(0), &carrier)?;
        for (ti, q) in tests.members.iter().enumerate() {
            dofs.push(DoFunctional {
                kind: TraceKind::DivDivMoment,
                entity: EntityRef::Cell,
                carrier: carrier.clone(),
                test: q.clone(),
                test_index: ti,
                normals: vec![],
                tangents: vec![],
            });
        }
    }

    Ok(LocalElement {
        family,
        cell: t,
        carrier,
        shape,
        dofs,
    })
}

impl LocalElement {
    /// Counts of functionals by kind, in table order.
    pub fn kind_counts(&self) -> Vec<(TraceKind, usize)> {
        let kinds = [
            TraceKind::RidgeTrE,
            TraceKind::FaceNn,
            TraceKind::FaceTr2,
            TraceKind::FaceTangentialNormal,
            TraceKind::BubbleMoment,
            TraceKind::InteriorDef,
            TraceKind::InteriorKernel,
            TraceKind::DivDivMoment,
        ];
        kinds
            .iter()
            .map(|&k| (k, self.dofs.iter().filter(|d| d.kind == k).count()))
            .collect()
    }

    /// Quadrature degree that integrates every functional exactly on the
    /// shape space.
    pub fn exact_degree(&self) -> usize {
        2 * self.family.trace_degree() + 6
    }

    /// Dense DoF matrix D[i][j] = functional_i(shape_j).
    pub fn dof_matrix(&self) -> DMatrix<f64> {
        let n = self.shape.dim();
        let m = self.dofs.len();
        let degree = self.exact_degree();
        let fields: Vec<CellSymPoly> = self
            .shape
            .members
            .iter()
            .map(|f| CellSymPoly::new(self.carrier.clone(), f.clone()))
            .collect();
        let mut d = DMatrix::zeros(m, n);
        for (i, dof) in self.dofs.iter().enumerate() {
            let rule = simplex_quadrature(dof.carrier.dim_intrinsic, degree).unwrap();
            for (j, f) in fields.iter().enumerate() {
                d[(i, j)] = dof.apply_with_rule(f, &rule).unwrap();
            }
        }
        d
    }

    /// Smallest singular value of the row- then column-normalized DoF
    /// matrix; unisolvence means this stays well above zero.
    pub fn unisolvence_measure(&self) -> f64 {
        normalized_smin(&self.dof_matrix())
    }

    /// Canonical interpolation: coefficients of the shape-space field whose
    /// functionals match those of the given field.
    pub fn canonical_interpolate(
        &self,
        field: &dyn SymField,
        quad_degree: usize,
    ) -> Result<Vec<f64>, FemError> {
        let d = self.dof_matrix();
        let mut rhs = DVector::zeros(self.dofs.len());
        for (i, dof) in self.dofs.iter().enumerate() {
            rhs[i] = dof.apply(field, quad_degree)?;
        }
        let lu = d.lu();
        let sol = lu
            .solve(&rhs)
            .ok_or_else(|| FemError::SolverFailure("singular DoF matrix".into()))?;
        Ok(sol.as_slice().to_vec())
    }
}

/// Smallest singular value after row and column normalization.
pub fn normalized_smin(m: &DMatrix<f64>) -> f64 {
    let mut a = m.clone();
    for i in 0..a.nrows() {
        let n = a.row(i).norm();
        if n > 0.0 {
            for j in 0..a.ncols() {
                a[(i, j)] /= n;
            }
        }
    }
    for j in 0..a.ncols() {
        let n = a.column(j).norm();
        if n > 0.0 {
            for i in 0..a.nrows() {
                a[(i, j)] /= n;
            }
        }
    }
    a.svd(false, false).singular_values.min()
}

/// Per-cell trace tables sampled at entity quadrature points.
pub struct TraceTables {
    /// tr1 = n^T tau n, per (local face, member, quadrature point).
    pub tr1: Vec<Vec<Vec<f64>>>,
    /// tr2 = n . div tau + div_F(tau n), same layout.
    pub tr2: Vec<Vec<Vec<f64>>>,
    /// Tangential-normal component Pi_F tau n, same layout.
    pub tn: Vec<Vec<Vec<Vector3<f64>>>>,
    /// tr_e, per (local ridge, member, quadrature point).
    pub tre: Vec<Vec<Vec<f64>>>,
}

/// Evaluate the trace tables of a symmetric basis on cell `t` at quadrature
/// points of the given degrees.
pub fn compute_traces(
    basis: &TensorPolyBasis,
    mesh: &SimplicialMesh,
    frames: &EntityFrames,
    t: usize,
    face_degree: usize,
    ridge_degree: usize,
) -> Result<TraceTables, FemError> {
    let d = mesh.dim;
    let fields: Vec<CellSymPoly> = basis
        .members
        .iter()
        .map(|f| CellSymPoly::new(basis.carrier.clone(), f.clone()))
        .collect();
    let face_rule = simplex_quadrature(d - 1, face_degree)?;
    let ridge_rule = simplex_quadrature(d - 2, ridge_degree)?;
    let mut tr1 = Vec::new();
    let mut tr2 = Vec::new();
    let mut tn = Vec::new();
    for (lf, &f) in mesh.cell_faces[t].iter().enumerate() {
        let fc = face_carrier(mesh, f);
        let n = frames.face_normal[f] * frames.cell_face_sign[t][lf];
        let tangents: Vec<Vector3<f64>> = frames.face_tangents[f][..d - 1].to_vec();
        let mut f1 = Vec::new();
        let mut f2 = Vec::new();
        let mut fv = Vec::new();
        for field in &fields {
            let mut r1 = Vec::new();
            let mut r2 = Vec::new();
            let mut rv = Vec::new();
            for p in &face_rule.points {
                let x = fc.physical(p);
                let tau = field.value(&x);
                let grad = field.gradient(&x).unwrap();
                r1.push((n.transpose() * tau * n)[(0, 0)]);
                r2.push(tr2_pointwise(&grad, &n, &tangents));
                let tn_vec = tau * n - n * (n.transpose() * tau * n)[(0, 0)];
                rv.push(tn_vec);
            }
            f1.push(r1);
            f2.push(r2);
            fv.push(rv);
        }
        tr1.push(f1);
        tr2.push(f2);
        tn.push(fv);
    }
    let mut tre = Vec::new();
    for &e in &mesh.cell_ridges[t] {
        let rc = ridge_carrier(mesh, e);
        let mut pairs = Vec::new();
        for (lf, &f) in mesh.cell_faces[t].iter().enumerate() {
            if let Some(pos) = mesh.face_ridges[f].iter().position(|&r| r == e) {
                let outward = frames.face_normal[f] * frames.cell_face_sign[t][lf];
                pairs.push((frames.face_ridge_conormal[f][pos], outward));
            }
        }
        let mut per_member = Vec::new();
        for field in &fields {
            let mut vals = Vec::new();
            for p in &ridge_rule.points {
                let x = rc.physical(p);
                let tau = field.value(&x);
                let mut s = 0.0;
                for (conormal, outward) in &pairs {
                    s += (conormal.transpose() * tau * outward)[(0, 0)];
                }
                vals.push(s);
            }
            per_member.push(vals);
        }
        tre.push(per_member);
    }
    Ok(TraceTables { tr1, tr2, tn, tre })
}

/// Residual of the Green identity on cell `t` for a symmetric polynomial
/// field tau and scalar polynomial v:
/// (divdiv tau, v)_T - (tau, hess v)_T
///   + sum_F [(tr1 tau, dn v)_F - (tr2 tau, v)_F] + sum_e (tr_e tau, v)_e.
pub fn green_identity_residual(
    mesh: &SimplicialMesh,
    frames: &EntityFrames,
    t: usize,
    tau: &PolyField,
    v: &PolyField,
) -> f64 {
    let d = mesh.dim;
    let carrier = cell_carrier(mesh, t);
    let deg = 2 * (tau.degree() + v.degree()) + 2;
    let cell_rule = simplex_quadrature(d, deg.min(40)).unwrap();
    let face_rule = simplex_quadrature(d - 1, deg.min(40)).unwrap();
    let ridge_rule = simplex_quadrature(d - 2, deg.min(40)).unwrap();
    let field = CellSymPoly::new(carrier.clone(), tau.clone());
    let grad_v = v.grad(&carrier);
    let hess_v = v.hessian(&carrier);

    let mut acc = 0.0;
    let scale_t = carrier.measure * factorial(d);
    for (p, w) in cell_rule.points.iter().zip(&cell_rule.weights) {
        let x = carrier.physical(p);
        let dd = field.divdiv(&x).unwrap();
        let tv = field.value(&x);
        let hv = hess_v.value_sym(p);
        let frob: f64 = (0..3)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .map(|(i, j)| tv[(i, j)] * hv[(i, j)])
            .sum();
        acc += w * scale_t * (dd * v.value_scalar(p) - frob);
    }
    for (lf, &f) in mesh.cell_faces[t].iter().enumerate() {
        let fc = face_carrier(mesh, f);
        let n = frames.face_normal[f] * frames.cell_face_sign[t][lf];
        let tangents: Vec<Vector3<f64>> = frames.face_tangents[f][..d - 1].to_vec();
        let scale_f = fc.measure * factorial(d - 1);
        for (p, w) in face_rule.points.iter().zip(&face_rule.weights) {
            let x = fc.physical(p);
            let lam_t = carrier.barycentric(&x);
            let tau_v = field.value(&x);
            let grad = field.gradient(&x).unwrap();
            let t1 = (n.transpose() * tau_v * n)[(0, 0)];
            let t2 = tr2_pointwise(&grad, &n, &tangents);
            let dnv = grad_v.value_vector(&lam_t).dot(&n);
            let vv = v.value_scalar(&lam_t);
            acc += w * scale_f * (t1 * dnv - t2 * vv);
        }
    }
    for &e in &mesh.cell_ridges[t] {
        let rc = ridge_carrier(mesh, e);
        let mut pairs = Vec::new();
        for (lf, &f) in mesh.cell_faces[t].iter().enumerate() {
            if let Some(pos) = mesh.face_ridges[f].iter().position(|&r| r == e) {
                let outward = frames.face_normal[f] * frames.cell_face_sign[t][lf];
                pairs.push((frames.face_ridge_conormal[f][pos], outward));
            }
        }
        let scale_e = rc.measure * factorial(d - 2);
        for (p, w) in ridge_rule.points.iter().zip(&ridge_rule.weights) {
            let x = rc.physical(p);
            let lam_t = carrier.barycentric(&x);
            let tau_v = field.value(&x);
            let mut s = 0.0;
            for (conormal, outward) in &pairs {
                s += (conormal.transpose() * tau_v * outward)[(0, 0)];
            }
            acc += w * scale_e * s * v.value_scalar(&lam_t);
        }
    }
    acc
}

/// Single-cell mesh around an arbitrary simplex, for element-level work
/// outside a box mesh.
pub fn single_cell_mesh(d: usize, verts: Vec<Vector3<f64>>) -> Result<SimplicialMesh, FemError> {
    let ids: Vec<usize> = (0..verts.len()).collect();
    crate::mesh::from_cells(d, verts, vec![ids])
}

/// Expected dimension of the family's shape space.
pub fn shape_dimension(family: ElementFamily, d: usize) -> usize {
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
    let sdim = d * (d + 1) / 2;
    match family {
        ElementFamily::New(k) => binom(k + d, d) * sdim,
        ElementFamily::RtPlus(k) => binom(k + d, d) * sdim + binom(k - 2 + d - 1, d - 1),
        ElementFamily::OnePp => d * (d + 1) * (d + 3) / 2,
        ElementFamily::NcK2 => binom(2 + d, d) * sdim,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames::compute_frames;
    use crate::mesh::build_box_mesh;
    use crate::poly::Poly;
    use nalgebra::Vector3;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn reference_element(d: usize, family: ElementFamily) -> (SimplicialMesh, LocalElement) {
        let verts = if d == 2 {
            vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
            ]
        } else {
            vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
                Vector3::new(0.0, 0.0, 1.0),
            ]
        };
        let mesh = single_cell_mesh(d, verts).unwrap();
        let frames = compute_frames(&mesh).unwrap();
        let el = build_local_element(family, &mesh, &frames, 0).unwrap();
        (mesh, el)
    }

    #[test]
    fn new3_counts_3d() {
        let (_, el) = reference_element(3, ElementFamily::New(3));
        assert_eq!(el.shape.dim(), 120);
        assert_eq!(el.dofs.len(), 120);
        let counts = el.kind_counts();
        let get = |k: TraceKind| counts.iter().find(|(kk, _)| *kk == k).unwrap().1;
        assert_eq!(get(TraceKind::RidgeTrE), 24);
        assert_eq!(get(TraceKind::FaceNn), 40);
        assert_eq!(get(TraceKind::FaceTr2), 24);
        assert_eq!(get(TraceKind::FaceTangentialNormal), 32);
        assert_eq!(get(TraceKind::InteriorDef), 0);
        assert_eq!(get(TraceKind::InteriorKernel), 0);
    }

    #[test]
    fn new3_counts_2d() {
        let (_, el) = reference_element(2, ElementFamily::New(3));
        assert_eq!(el.shape.dim(), 30);
        assert_eq!(el.dofs.len(), 30);
    }

    #[test]
    fn rtplus2_counts() {
        let (_, el) = reference_element(3, ElementFamily::RtPlus(2));
        assert_eq!(el.shape.dim(), 63);
        assert_eq!(el.dofs.len(), 63);
        let (_, el2) = reference_element(2, ElementFamily::RtPlus(2));
        assert_eq!(el2.shape.dim(), 20);
        assert_eq!(el2.dofs.len(), 20);
    }

    #[test]
    fn onepp_counts() {
        let (_, el) = reference_element(3, ElementFamily::OnePp);
        assert_eq!(el.dofs.len(), 36);
        assert_eq!(el.shape.dim(), 36);
        let (_, el2) = reference_element(2, ElementFamily::OnePp);
        assert_eq!(el2.dofs.len(), 15);
        assert_eq!(el2.shape.dim(), 15);
    }

    #[test]
    fn nc_k2_unisolvent() {
        for d in [2usize, 3] {
            let (_, el) = reference_element(d, ElementFamily::NcK2);
            assert_eq!(el.dofs.len(), el.shape.dim());
            assert!(el.unisolvence_measure() > 1e-8, "d = {d}");
        }
    }

    #[test]
    fn families_unisolvent_on_reference() {
        for d in [2usize, 3] {
            for fam in [
                ElementFamily::New(3),
                ElementFamily::RtPlus(2),
                ElementFamily::RtPlus(3),
                ElementFamily::OnePp,
            ] {
                let (_, el) = reference_element(d, fam);
                assert_eq!(
                    el.dofs.len(),
                    el.shape.dim(),
                    "{fam:?} d={d}: {} dofs vs {} shapes",
                    el.dofs.len(),
                    el.shape.dim()
                );
                let s = el.unisolvence_measure();
                assert!(s > 1e-8, "{fam:?} d={d}: smin {s}");
            }
        }
    }

    #[test]
    fn identity_tensor_traces() {
        let mesh = build_box_mesh(2, 1).unwrap();
        let frames = compute_frames(&mesh).unwrap();
        let carrier = cell_carrier(&mesh, 0);
        // constant identity tensor in a one-member basis
        let mut id = PolyField::zero(2, ValueShape::Sym, 3, 0);
        id.comps[0] = Poly::constant(3, 1.0);
        id.comps[2] = Poly::constant(3, 1.0);
        let basis = TensorPolyBasis {
            space: SpaceId::PkSym(0),
            carrier,
            shape: ValueShape::Sym,
            members: vec![id],
        };
        let tables = compute_traces(&basis, &mesh, &frames, 0, 4, 4).unwrap();
        for f in &tables.tr1 {
            for v in &f[0] {
                assert!((v - 1.0).abs() < 1e-13);
            }
        }
        for f in &tables.tr2 {
            for v in &f[0] {
                assert!(v.abs() < 1e-13);
            }
        }
        for e in &tables.tre {
            for v in &e[0] {
                assert!(v.abs() < 1e-13, "tr_e of identity should vanish: {v}");
            }
        }
    }

    #[test]
    fn rank_one_normal_traces() {
        // tau = n_F n_F^T for the first face: tr1 = 1 there, (n'.n_F)^2 on
        // the others
        let (mesh, el) = reference_element(2, ElementFamily::OnePp);
        let frames = compute_frames(&mesh).unwrap();
        let f0 = mesh.cell_faces[0][0];
        let n0 = frames.face_normal[f0];
        let mut tau = PolyField::zero(2, ValueShape::Sym, 3, 0);
        tau.comps[0] = Poly::constant(3, n0[0] * n0[0]);
        tau.comps[1] = Poly::constant(3, n0[0] * n0[1]);
        tau.comps[2] = Poly::constant(3, n0[1] * n0[1]);
        let basis = TensorPolyBasis {
            space: SpaceId::PkSym(0),
            carrier: el.carrier.clone(),
            shape: ValueShape::Sym,
            members: vec![tau],
        };
        let tables = compute_traces(&basis, &mesh, &frames, 0, 4, 4).unwrap();
        for (lf, &f) in mesh.cell_faces[0].iter().enumerate() {
            let expect = frames.face_normal[f].dot(&n0).powi(2);
            for v in &tables.tr1[lf][0] {
                assert!((v - expect).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn green_identity_random_pairs() {
        let mut rng = StdRng::seed_from_u64(7);
        for d in [2usize, 3] {
            let mesh = build_box_mesh(d, 1).unwrap();
            let frames = compute_frames(&mesh).unwrap();
            for t in 0..mesh.n_cells().min(2) {
                let carrier = cell_carrier(&mesh, t);
                let sym = make_basis(SpaceId::PkSym(3), &carrier).unwrap();
                let sca = make_basis(SpaceId::PkScalar(3), &carrier).unwrap();
                for _ in 0..5 {
                    let ct: Vec<f64> = (0..sym.dim())
                        .map(|_| rng.random_range(-1.0..1.0))
                        .collect();
                    let cv: Vec<f64> = (0..sca.dim())
                        .map(|_| rng.random_range(-1.0..1.0))
                        .collect();
                    let tau = sym.combine(&ct);
                    let v = sca.combine(&cv);
                    let res = green_identity_residual(&mesh, &frames, t, &tau, &v);
                    let scale = tau.l2_norm(&carrier) * v.l2_norm(&carrier);
                    assert!(
                        res.abs() < 1e-10 * scale.max(1.0),
                        "d={d} t={t}: residual {res}"
                    );
                }
            }
        }
    }

    #[test]
    fn interpolation_reproduces_shape_functions() {
        let mut rng = StdRng::seed_from_u64(3);
        for d in [2usize, 3] {
            let (_, el) = reference_element(d, ElementFamily::OnePp);
            let coeffs: Vec<f64> = (0..el.shape.dim())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let tau = el.shape.combine(&coeffs);
            let field = CellSymPoly::new(el.carrier.clone(), tau.clone());
            let interp = el.canonical_interpolate(&field, el.exact_degree()).unwrap();
            let tau_i = el.shape.combine(&interp);
            let mut diff = tau_i.clone();
            diff.axpy(-1.0, &tau.homogenized());
            assert!(
                diff.l2_norm(&el.carrier) < 1e-10 * tau.l2_norm(&el.carrier),
                "d = {d}"
            );
        }
    }

    #[test]
    fn identity_interpolates_to_identity() {
        struct Identity;
        impl SymField for Identity {
            fn value(&self, _x: &Vector3<f64>) -> Matrix3<f64> {
                Matrix3::identity()
            }
            fn gradient(&self, _x: &Vector3<f64>) -> Option<[Matrix3<f64>; 3]> {
                Some([Matrix3::zeros(); 3])
            }
            fn divdiv(&self, _x: &Vector3<f64>) -> Option<f64> {
                Some(0.0)
            }
        }
        let (_, el) = reference_element(3, ElementFamily::New(3));
        let interp = el.canonical_interpolate(&Identity, 8).unwrap();
        let tau_i = el.shape.combine(&interp);
        let rule = simplex_quadrature(3, 3).unwrap();
        for p in &rule.points {
            let m = tau_i.value_sym(p);
            for i in 0..3 {
                for j in 0..3 {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((m[(i, j)] - expect).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn missing_gradient_is_reported() {
        struct ValueOnly;
        impl SymField for ValueOnly {
            fn value(&self, _x: &Vector3<f64>) -> Matrix3<f64> {
                Matrix3::identity()
            }
        }
        let (_, el) = reference_element(2, ElementFamily::OnePp);
        let err = el.canonical_interpolate(&ValueOnly, 6).unwrap_err();
        assert!(matches!(err, FemError::MissingDerivative(_)));
    }

    #[test]
    fn onepp_traces_are_linear() {
        // tr_e, n.tau n and tr2 of the enriched lowest-order space stay in
        // degree-1 trace spaces: project onto the orthogonal complement of
        // P_1 within P_3 on each face and check the moments vanish
        for d in [2usize, 3] {
            let (mesh, el) = reference_element(d, ElementFamily::OnePp);
            let frames = compute_frames(&mesh).unwrap();
            let tables = compute_traces(&el.shape, &mesh, &frames, 0, 12, 12).unwrap();
            let face_rule = simplex_quadrature(d - 1, 12).unwrap();
            for (lf, &f) in mesh.cell_faces[0].iter().enumerate() {
                let fc = face_carrier(&mesh, f);
                let p3 = make_basis(SpaceId::PkScalar(3), &fc).unwrap();
                let p1 = make_basis(SpaceId::PkScalar(1), &fc).unwrap();
                let mut all = p1.members.clone();
                let n_low = all.len();
                all.extend(p3.members.iter().cloned());
                let ortho = crate::basis::l2_reduce(all, &fc);
                let hi = &ortho[n_low..];
                for vals in [&tables.tr1[lf], &tables.tr2[lf]] {
                    for member_vals in vals.iter() {
                        for h in hi {
                            let mut moment = 0.0;
                            let scale = fc.measure * factorial(d - 1);
                            for ((p, w), v) in face_rule
                                .points
                                .iter()
                                .zip(&face_rule.weights)
                                .zip(member_vals)
                            {
                                moment += w * scale * h.value_scalar(p) * v;
                            }
                            assert!(moment.abs() < 1e-10, "d={d} f={f}: {moment}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn low_order_trace_table_is_dependent() {
        // the trace-only rows of the degree-2 table on P_2(T;S) are rank
        // deficient: the range of div div must contain piecewise linears
        for d in [2usize, 3] {
            let verts = if d == 2 {
                vec![
                    Vector3::new(0.1, 0.0, 0.0),
                    Vector3::new(1.0, 0.2, 0.0),
                    Vector3::new(0.3, 1.1, 0.0),
                ]
            } else {
                vec![
                    Vector3::new(0.0, 0.0, 0.0),
                    Vector3::new(1.0, 0.1, 0.0),
                    Vector3::new(0.2, 1.0, 0.1),
                    Vector3::new(0.1, 0.2, 1.0),
                ]
            };
            let mesh = single_cell_mesh(d, verts).unwrap();
            let frames = compute_frames(&mesh).unwrap();
            let carrier = cell_carrier(&mesh, 0);
            let shape = make_basis(SpaceId::PkSym(2), &carrier).unwrap();
            let k = 2usize;
            let fields: Vec<CellSymPoly> = shape
                .members
                .iter()
                .map(|f| CellSymPoly::new(carrier.clone(), f.clone()))
                .collect();
            let mut rows: Vec<Vec<f64>> = Vec::new();
            for &e in &mesh.cell_ridges[0] {
                let rc = ridge_carrier(&mesh, e);
                let tests = make_basis(SpaceId::PkScalar(k), &rc).unwrap();
                let mut pairs = Vec::new();
                for (lf, &f) in mesh.cell_faces[0].iter().enumerate() {
                    if let Some(pos) = mesh.face_ridges[f].iter().position(|&r| r == e) {
                        let outward = frames.face_normal[f] * frames.cell_face_sign[0][lf];
                        pairs.push((frames.face_ridge_conormal[f][pos], outward));
                    }
                }
                for q in &tests.members {
                    let dof = DoFunctional {
                        kind: TraceKind::RidgeTrE,
                        entity: EntityRef::Cell,
                        carrier: rc.clone(),
                        test: q.clone(),
                        test_index: 0,
                        normals: pairs.clone(),
                        tangents: vec![],
                    };
                    rows.push(fields.iter().map(|f| dof.apply(f, 12).unwrap()).collect());
                }
            }
            for (lf, &f) in mesh.cell_faces[0].iter().enumerate() {
                let fc = face_carrier(&mesh, f);
                let outward = frames.face_normal[f] * frames.cell_face_sign[0][lf];
                let tangents: Vec<Vector3<f64>> = frames.face_tangents[f][..d - 1].to_vec();
                for (space, kind) in [
                    (SpaceId::PkScalar(k), TraceKind::FaceNn),
                    (SpaceId::PkScalar(k - 1), TraceKind::FaceTr2),
                ] {
                    let tests = make_basis(space, &fc).unwrap();
                    for q in &tests.members {
                        let dof = DoFunctional {
                            kind,
                            entity: EntityRef::Cell,
                            carrier: fc.clone(),
                            test: q.clone(),
                            test_index: 0,
                            normals: vec![(outward, outward)],
                            tangents: tangents.clone(),
                        };
                        rows.push(fields.iter().map(|f| dof.apply(f, 12).unwrap()).collect());
                    }
                }
            }
            let nr = rows.len();
            let nc = rows[0].len();
            let mut m = DMatrix::zeros(nr, nc);
            for (i, r) in rows.iter().enumerate() {
                for (j, v) in r.iter().enumerate() {
                    m[(i, j)] = *v;
                }
            }
            let sv = m.svd(false, false).singular_values;
            let smax = sv.max();
            let rank = sv.iter().filter(|s| **s > 1e-9 * smax).count();
            assert!(
                rank < nr,
                "d={d}: trace rows unexpectedly independent (rank {rank} of {nr})"
            );
        }
    }
}
