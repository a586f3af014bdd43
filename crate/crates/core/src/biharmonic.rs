//! Solvers for the clamped biharmonic problem: the hybridized mixed scheme
//! in its SPD multiplier form for any k >= 0, the C0 discontinuous Galerkin
//! scheme for k >= 2, local postprocessing, and error evaluation.

use crate::basis::{make_basis, PolyField, SpaceId, ValueShape};
use crate::element::SymField;
use crate::error::FemError;
use crate::frames::{cell_carrier, face_carrier, compute_frames, EntityFrames};
use crate::lagrange::{build_lagrange_space, LagrangeSpace};
use crate::mesh::{build_box_mesh, SimplicialMesh};
use crate::par;
use crate::quadrature::{factorial, simplex_quadrature};
use crate::sparse::{solve_spd, SparseOperator, SpdSolver};
use crate::spaces::{
    build_broken_stress, build_multiplier_space, cr_interpolate, mwx_from_multiplier, project_qm,
    project_scalar_on, wg_stiffness, BrokenStressSpace, MultiplierSpace, ScalarField,
};
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use std::time::Instant;

// ---------------------------------------------------------------------------
// manufactured cases

/// Closed-form manufactured solutions with homogeneous clamped boundary
/// conditions on the unit box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseId {
    /// u = prod_i sin^2(pi x_i), smooth and clamped on the unit box.
    SinSq,
    /// f = 0, zero solution.
    Zero,
}

#[derive(Debug, Clone, Copy)]
pub struct ManufacturedCase {
    pub id: CaseId,
    pub dim: usize,
}

impl ManufacturedCase {
    pub fn new(id: CaseId, dim: usize) -> Self {
        ManufacturedCase { id, dim }
    }

    pub fn name(&self) -> &'static str {
        match self.id {
            CaseId::SinSq => "sin2",
            CaseId::Zero => "zero",
        }
    }

    pub fn regularity(&self) -> &'static str {
        "smooth"
    }

    pub fn u(&self, x: &Vector3<f64>) -> f64 {
        match self.id {
            CaseId::Zero => 0.0,
            CaseId::SinSq => (0..self.dim).map(|i| s0(x[i])).product(),
        }
    }

    pub fn grad_u(&self, x: &Vector3<f64>) -> Vector3<f64> {
        let mut g = Vector3::zeros();
        if self.id == CaseId::Zero {
            return g;
        }
        for i in 0..self.dim {
            let mut v = s1(x[i]);
            for j in 0..self.dim {
                if j != i {
                    v *= s0(x[j]);
                }
            }
            g[i] = v;
        }
        g
    }

    pub fn hess_u(&self, x: &Vector3<f64>) -> Matrix3<f64> {
        let mut h = Matrix3::zeros();
        if self.id == CaseId::Zero {
            return h;
        }
        for i in 0..self.dim {
            for j in 0..self.dim {
                let mut v = 1.0;
                for l in 0..self.dim {
                    let ord = (l == i) as usize + (l == j) as usize;
                    v *= match ord {
                        0 => s0(x[l]),
                        1 => s1(x[l]),
                        _ => s2(x[l]),
                    };
                }
                h[(i, j)] = v;
            }
        }
        h
    }

    pub fn sigma(&self, x: &Vector3<f64>) -> Matrix3<f64> {
        -self.hess_u(x)
    }

    /// f = Delta^2 u.
    pub fn f(&self, x: &Vector3<f64>) -> f64 {
        if self.id == CaseId::Zero {
            return 0.0;
        }
        let mut acc = 0.0;
        for i in 0..self.dim {
            for j in 0..self.dim {
                // d^2/dx_i^2 d^2/dx_j^2 of the product
                let mut v = 1.0;
                for l in 0..self.dim {
                    let ord = 2 * ((l == i) as usize + (l == j) as usize);
                    v *= match ord {
                        0 => s0(x[l]),
                        2 => s2(x[l]),
                        _ => s4(x[l]),
                    };
                }
                acc += v;
            }
        }
        acc
    }
}

fn s0(t: f64) -> f64 {
    let s = (std::f64::consts::PI * t).sin();
    s * s
}

fn s1(t: f64) -> f64 {
    let pi = std::f64::consts::PI;
    pi * (2.0 * pi * t).sin()
}

fn s2(t: f64) -> f64 {
    let pi = std::f64::consts::PI;
    2.0 * pi * pi * (2.0 * pi * t).cos()
}

fn s4(t: f64) -> f64 {
    let pi = std::f64::consts::PI;
    -8.0 * pi.powi(4) * (2.0 * pi * t).cos()
}

/// Scalar-field adapter for the exact solution.
pub struct CaseU(pub ManufacturedCase);
impl ScalarField for CaseU {
    fn value(&self, x: &Vector3<f64>) -> f64 {
        self.0.u(x)
    }
    fn gradient(&self, x: &Vector3<f64>) -> Option<Vector3<f64>> {
        Some(self.0.grad_u(x))
    }
}

/// Tensor-field adapter for the exact stress.
pub struct CaseSigma(pub ManufacturedCase);
impl SymField for CaseSigma {
    fn value(&self, x: &Vector3<f64>) -> Matrix3<f64> {
        self.0.sigma(x)
    }
}

// ---------------------------------------------------------------------------
// hybridized / weak Galerkin scheme

/// Default multiplier degree r for a given k: the moment degree of the
/// lowest-order compatible pair. The k = 1 scheme runs on the enriched
/// lowest-order pair whose blocks are all linear.
pub fn default_r(k: usize) -> i64 {
    match k {
        0 => -2,
        1 => 1,
        _ => k as i64 - 2,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemeTag {
    Hybridized,
    Cdg,
}

/// Solution bundle of the hybridized scheme.
pub struct HybridizedSolution {
    pub k: usize,
    pub r: i64,
    pub sigma_space: BrokenStressSpace,
    pub m_space: MultiplierSpace,
    pub assembly: crate::spaces::WgAssembly,
    /// Multiplier coefficients.
    pub u: Vec<f64>,
    /// Stress coefficients sigma_h = -nabla_w^2 u_h.
    pub sigma: Vec<f64>,
    /// Per-cell postprocessed coefficients over the P_{k+2} basis.
    pub u_star: Option<Vec<Vec<f64>>>,
    pub load: Vec<f64>,
    pub assemble_seconds: f64,
    pub solve_seconds: f64,
}

/// Solve the SPD multiplier system (nabla_w^2 u, nabla_w^2 v) = load(v) with
/// the low-order load corrections, then recover the stress cellwise.
pub fn solve_hybridized(
    mesh: &SimplicialMesh,
    frames: &EntityFrames,
    k: usize,
    r: i64,
    case: &ManufacturedCase,
    solver: SpdSolver,
) -> Result<HybridizedSolution, FemError> {
    let t0 = Instant::now();
    let sigma_space = build_broken_stress(mesh, k, r)?;
    let m_space = build_multiplier_space(mesh, k, r, true)?;
    let assembly = wg_stiffness(mesh, frames, &sigma_space, &m_space)?;
    let load = assemble_load(mesh, frames, &m_space, case, 2 * k + 8)?;
    let assemble_seconds = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let u = solve_spd(&assembly.stiffness, &load, solver)?;
    let solve_seconds = t1.elapsed().as_secs_f64();

    let mut sigma = assembly.weak_hessian_apply(&sigma_space, &u);
    for c in &mut sigma {
        *c = -*c;
    }
    Ok(HybridizedSolution {
        k,
        r,
        sigma_space,
        m_space,
        assembly,
        u,
        sigma,
        u_star: None,
        load,
        assemble_seconds,
        solve_seconds,
    })
}

/// Load vector load(v) = (f, v_0 + (I - Q_r) v^CR) with v^CR built from the
/// face means (k >= 1) or the local quadratic reconstruction (k = 0).
pub fn assemble_load(
    mesh: &SimplicialMesh,
    frames: &EntityFrames,
    m_space: &MultiplierSpace,
    case: &ManufacturedCase,
    quad_degree: usize,
) -> Result<Vec<f64>, FemError> {
    let d = mesh.dim;
    let rule = simplex_quadrature(d, quad_degree)?;
    let k = m_space.k;
    let per_cell: Vec<Vec<(usize, f64)>> = par::map_indexed(mesh.n_cells(), |t| {
        let carrier = cell_carrier(mesh, t);
        let scale = carrier.measure * factorial(d);
        let fvals: Vec<f64> = rule
            .points
            .iter()
            .map(|p| case.f(&carrier.physical(p)))
            .collect();
        // residual f - Q_r f at the quadrature points
        let gvals: Vec<f64> = if m_space.r >= 0 {
            let basis = make_basis(SpaceId::PkScalar(m_space.r as usize), &carrier).unwrap();
            let coeffs = project_scalar_on(&basis, |x| case.f(x), quad_degree).unwrap();
            rule.points
                .iter()
                .zip(&fvals)
                .map(|(p, fv)| {
                    let mut q = 0.0;
                    for (i, b) in basis.members.iter().enumerate() {
                        q += coeffs[i] * b.value_scalar(p);
                    }
                    fv - q
                })
                .collect()
        } else {
            fvals.clone()
        };
        let mut contrib: Vec<(usize, f64)> = Vec::new();
        // cell block: (f, v_0)
        if m_space.cell_dim > 0 {
            let basis = &m_space.cell_basis[t];
            for i in 0..basis.dim() {
                let mut acc = 0.0;
                for ((p, w), fv) in rule.points.iter().zip(&rule.weights).zip(&fvals) {
                    acc += w * fv * basis.members[i].value_scalar(p);
                }
                contrib.push((m_space.cell_index(t, i), acc * scale));
            }
        }
        if k >= 1 {
            // face b block: (f - Q_r f, v^CR of the unit basis function)
            for (lf, &f) in mesh.cell_faces[t].iter().enumerate() {
                let Some(slot) = m_space.face_slot[f] else {
                    continue;
                };
                let fb = &m_space.face_b_basis[slot];
                let frule = simplex_quadrature(d - 1, k + 2).unwrap();
                let fscale = fb.carrier.measure * factorial(d - 1);
                for i in 0..m_space.face_b_dim {
                    // mean of the basis function over the face
                    let mut mean = 0.0;
                    for (p, w) in frule.points.iter().zip(&frule.weights) {
                        mean += w * fscale * fb.members[i].value_scalar(p);
                    }
                    mean /= fb.carrier.measure;
                    // v^CR with a single nonzero face mean
                    let coeffs = cr_coeffs_from_means(d, lf, mean);
                    let mut acc = 0.0;
                    for ((p, w), gv) in rule.points.iter().zip(&rule.weights).zip(&gvals) {
                        let mut vcr = 0.0;
                        for (c, l) in coeffs.iter().zip(p) {
                            vcr += c * l;
                        }
                        acc += w * gv * vcr;
                    }
                    contrib.push((m_space.face_b_index(slot, i), acc * scale));
                }
            }
        } else {
            // k = 0: v^CR from the local quadratic reconstruction of the
            // unit (v_n, v_e) degrees of freedom
            let markers = m_space.cell_local_map(mesh, t);
            for mk in markers {
                let mut unit = vec![0.0; m_space.dim];
                unit[mk.global] = 1.0;
                let w = mwx_from_multiplier(m_space, mesh, frames, t, &unit);
                // face means of the reconstruction
                let mut means = vec![0.0; d + 1];
                for (lf2, &f2) in mesh.cell_faces[t].iter().enumerate() {
                    let fc = face_carrier(mesh, f2);
                    let frule = simplex_quadrature(d - 1, 4).unwrap();
                    let fscale = fc.measure * factorial(d - 1);
                    let mut mean = 0.0;
                    for (p, wq) in frule.points.iter().zip(&frule.weights) {
                        let x = fc.physical(p);
                        let lam = carrier.barycentric(&x);
                        mean += wq * fscale * w.value_scalar(&lam);
                    }
                    means[lf2] = mean / fc.measure;
                }
                let total: f64 = means.iter().sum();
                let coeffs: Vec<f64> = means.iter().map(|m| total - d as f64 * m).collect();
                let mut acc = 0.0;
                for ((p, wq), gv) in rule.points.iter().zip(&rule.weights).zip(&gvals) {
                    let mut vcr = 0.0;
                    for (c, l) in coeffs.iter().zip(p) {
                        vcr += c * l;
                    }
                    acc += wq * gv * vcr;
                }
                contrib.push((mk.global, acc * scale));
            }
        }
        contrib
    });
    let mut load = vec![0.0; m_space.dim];
    for contrib in per_cell {
        for (i, v) in contrib {
            load[i] += v;
        }
    }
    Ok(load)
}

/// Coefficients over barycentric coordinates of the P_1 function whose mean
/// over face `lf` is `mean` and whose means vanish on the other faces.
fn cr_coeffs_from_means(d: usize, lf: usize, mean: f64) -> Vec<f64> {
    let mut coeffs = vec![mean; d + 1];
    coeffs[lf] = mean - d as f64 * mean;
    coeffs
}

// ---------------------------------------------------------------------------
// postprocessing

impl HybridizedSolution {
    /// Per-cell improved deflection: u* in P_{k+2}(T) with
    /// (hess u*, hess v)_T = -(sigma_h, hess v)_T and P_1 moments matching
    /// the cell block (or the nonconforming linear interpolant when the cell
    /// block is absent).
    pub fn postprocess(
        &mut self,
        mesh: &SimplicialMesh,
        frames: &EntityFrames,
    ) -> Result<(), FemError> {
        let d = mesh.dim;
        let k = self.k;
        let vcr = if self.r < 1 {
            Some(cr_interpolate(
                &self.m_space,
                mesh,
                frames,
                &self.u,
            ))
        } else {
            None
        };
        let mut out = Vec::with_capacity(mesh.n_cells());
        for t in 0..mesh.n_cells() {
            let carrier = cell_carrier(mesh, t);
            let basis = make_basis(SpaceId::PkScalar(k + 2), &carrier)?;
            let p1 = make_basis(SpaceId::PkScalar(1), &carrier)?;
            let n = basis.dim();
            let m = p1.dim();
            let hessians: Vec<PolyField> =
                basis.members.iter().map(|b| b.hessian(&carrier)).collect();
            let mut a = DMatrix::zeros(n + m, n + m);
            for i in 0..n {
                for j in i..n {
                    let v = hessians[i].l2_inner(&hessians[j], &carrier);
                    a[(i, j)] = v;
                    a[(j, i)] = v;
                }
            }
            for i in 0..n {
                for j in 0..m {
                    let v = basis.members[i].l2_inner(&p1.members[j], &carrier);
                    a[(i, n + j)] = v;
                    a[(n + j, i)] = v;
                }
            }
            // right side: -(sigma_h, hess v)_T and the P_1 moments
            let mut rhs = DVector::zeros(n + m);
            let srange = self.sigma_space.cell_range(t);
            let scoeff = &self.sigma[srange];
            let sbasis = &self.sigma_space.cell_basis[t];
            for i in 0..n {
                let mut acc = 0.0;
                for (j, c) in scoeff.iter().enumerate() {
                    acc += c * sbasis.members[j].l2_inner(&hessians[i], &carrier);
                }
                rhs[i] = -acc;
            }
            if self.r >= 1 {
                let mbasis = &self.m_space.cell_basis[t];
                for j in 0..m {
                    let mut acc = 0.0;
                    for i in 0..mbasis.dim() {
                        acc += self.u[self.m_space.cell_index(t, i)]
                            * mbasis.members[i].l2_inner(&p1.members[j], &carrier);
                    }
                    rhs[n + j] = acc;
                }
            } else {
                let w = &vcr.as_ref().unwrap()[t];
                for j in 0..m {
                    rhs[n + j] = w.l2_inner(&p1.members[j], &carrier);
                }
            }
            let sol = a
                .lu()
                .solve(&rhs)
                .ok_or_else(|| FemError::SolverFailure("postprocess system singular".into()))?;
            out.push(sol.as_slice()[..n].to_vec());
        }
        self.u_star = Some(out);
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// error evaluation

/// One row of an error report.
#[derive(Debug, Clone)]
pub struct ErrorRow {
    pub level: usize,
    pub h: f64,
    pub err_sigma: f64,
    pub err_hess: f64,
    pub err_u0h: f64,
    pub err_pp_h2: f64,
    pub err_pp_l2: f64,
    pub assemble_seconds: f64,
    pub solve_seconds: f64,
}

/// Errors of a hybridized solution against the manufactured case. The five
/// norms are evaluated with quadrature of at least degree 2k+6.
pub fn compute_errors(
    mesh: &SimplicialMesh,
    frames: &EntityFrames,
    sol: &HybridizedSolution,
    case: &ManufacturedCase,
    level: usize,
    n: usize,
    quad_degree: usize,
) -> Result<ErrorRow, FemError> {
    let need = 2 * sol.k + 6;
    if quad_degree < need {
        return Err(FemError::RequiredDegree {
            have: quad_degree,
            need,
        });
    }
    let d = mesh.dim;
    let rule = simplex_quadrature(d, quad_degree)?;

    // || sigma - sigma_h ||_0
    let per_cell: Vec<f64> = par::map_indexed(mesh.n_cells(), |t| {
        let basis = &sol.sigma_space.cell_basis[t];
        let carrier = &basis.carrier;
        let scale = carrier.measure * factorial(d);
        let range = sol.sigma_space.cell_range(t);
        let coeffs = &sol.sigma[range];
        let mut acc = 0.0;
        for (p, w) in rule.points.iter().zip(&rule.weights) {
            let x = carrier.physical(p);
            let exact = case.sigma(&x);
            let mut approx = Matrix3::zeros();
            for (j, c) in coeffs.iter().enumerate() {
                approx += basis.members[j].value_sym(p) * *c;
            }
            let diff = exact - approx;
            let frob: f64 = (0..3)
                .flat_map(|i| (0..3).map(move |j| (i, j)))
                .map(|(i, j)| diff[(i, j)] * diff[(i, j)])
                .sum();
            acc += w * scale * frob;
        }
        acc
    });
    let err_sigma = per_cell.iter().sum::<f64>().max(0.0).sqrt();

    // Q_M u and the weak Hessian of the difference
    let qm = project_qm(&sol.m_space, frames, &CaseU(*case), quad_degree)?;
    let mut delta = qm.clone();
    for (dv, uv) in delta.iter_mut().zip(&sol.u) {
        *dv -= uv;
    }
    let wh = sol.assembly.weak_hessian_apply(&sol.sigma_space, &delta);
    let err_hess = crate::spaces::stress_l2_norm(&sol.sigma_space, &wh);
    let err_u0h = sol
        .m_space
        .weighted_norm_sq(frames, &delta)
        .max(0.0)
        .sqrt();

    // postprocessing norms
    let (err_pp_h2, err_pp_l2) = if let Some(stars) = &sol.u_star {
        let per_cell: Vec<(f64, f64)> = par::map_indexed(mesh.n_cells(), |t| {
            let carrier = cell_carrier(mesh, t);
            let basis = make_basis(SpaceId::PkScalar(sol.k + 2), &carrier).unwrap();
            let scale = carrier.measure * factorial(d);
            let coeffs = &stars[t];
            let hessians: Vec<PolyField> =
                basis.members.iter().map(|b| b.hessian(&carrier)).collect();
            let mut acc_h2 = 0.0;
            let mut acc_l2 = 0.0;
            for (p, w) in rule.points.iter().zip(&rule.weights) {
                let x = carrier.physical(p);
                let mut happrox = Matrix3::zeros();
                let mut uval = 0.0;
                for (j, c) in coeffs.iter().enumerate() {
                    happrox += hessians[j].value_sym(p) * *c;
                    uval += basis.members[j].value_scalar(p) * *c;
                }
                let hdiff = case.hess_u(&x) - happrox;
                let frob: f64 = (0..3)
                    .flat_map(|i| (0..3).map(move |j| (i, j)))
                    .map(|(i, j)| hdiff[(i, j)] * hdiff[(i, j)])
                    .sum();
                acc_h2 += w * scale * frob;
                let udiff = case.u(&x) - uval;
                acc_l2 += w * scale * udiff * udiff;
            }
            (acc_h2, acc_l2)
        });
        (
            per_cell.iter().map(|p| p.0).sum::<f64>().max(0.0).sqrt(),
            per_cell.iter().map(|p| p.1).sum::<f64>().max(0.0).sqrt(),
        )
    } else {
        (f64::NAN, f64::NAN)
    };

    Ok(ErrorRow {
        level,
        h: 1.0 / n as f64,
        err_sigma,
        err_hess,
        err_u0h,
        err_pp_h2,
        err_pp_l2,
        assemble_seconds: sol.assemble_seconds,
        solve_seconds: sol.solve_seconds,
    })
}

// ---------------------------------------------------------------------------
// C0 discontinuous Galerkin scheme

pub struct CdgSolution {
    pub k: usize,
    pub space: LagrangeSpace,
    pub u: Vec<f64>,
    pub assemble_seconds: f64,
    pub solve_seconds: f64,
}

/// Jump/average tables for one face: per incident cell the normal derivative
/// and second normal derivative maps at face quadrature points.
struct FaceJumpData {
    cells: Vec<usize>,
    signs: Vec<f64>,
    /// dn[c][(q, j)]: normal derivative of monomial j at face point q,
    /// referenced to the global face normal.
    dn: Vec<DMatrix<f64>>,
    /// dnn[c][(q, j)]: second normal derivative.
    dnn: Vec<DMatrix<f64>>,
    weights: Vec<f64>,
    boundary: bool,
}

/// Solve the parameter-free C0 DG scheme for k >= 2.
pub fn solve_cdg(
    mesh: &SimplicialMesh,
    frames: &EntityFrames,
    k: usize,
    case: &ManufacturedCase,
    solver: SpdSolver,
) -> Result<CdgSolution, FemError> {
    if k < 2 {
        return Err(FemError::UnsupportedFamily(
            "the C0 DG scheme needs k >= 2".into(),
        ));
    }
    let t0 = Instant::now();
    let d = mesh.dim;
    let space = build_lagrange_space(mesh, k)?;
    let r = k - 2;
    let face_degree = 2 * k + 4;
    let cell_degree = 2 * k + 6;
    let face_rule = simplex_quadrature(d - 1, face_degree)?;
    let cell_rule = simplex_quadrature(d, cell_degree)?;

    // per-cell monomial machinery
    let mono: Vec<crate::basis::TensorPolyBasis> =
        par::map_indexed(mesh.n_cells(), |t| space.monomial_basis(mesh, t));
    let nmono = mono[0].dim();

    // face jump data
    let faces: Vec<FaceJumpData> = par::map_indexed(mesh.n_faces(), |f| {
        let fc = face_carrier(mesh, f);
        let nf = frames.face_normal[f];
        let nq = face_rule.len();
        let mut cells = Vec::new();
        let mut signs = Vec::new();
        let mut dn = Vec::new();
        let mut dnn = Vec::new();
        for &t in &mesh.face_cells[f] {
            let lf = mesh.cell_faces[t].iter().position(|&g| g == f).unwrap();
            let s = frames.cell_face_sign[t][lf];
            let carrier = cell_carrier(mesh, t);
            let mut mdn = DMatrix::zeros(nq, nmono);
            let mut mdnn = DMatrix::zeros(nq, nmono);
            for (j, b) in mono[t].members.iter().enumerate() {
                let grad = b.grad(&carrier);
                let hess = b.hessian(&carrier);
                for (q, p) in face_rule.points.iter().enumerate() {
                    let x = fc.physical(p);
                    let lam = carrier.barycentric(&x);
                    mdn[(q, j)] = grad.value_vector(&lam).dot(&nf);
                    let hm = hess.value_sym(&lam);
                    mdnn[(q, j)] = (nf.transpose() * hm * nf)[(0, 0)];
                }
            }
            cells.push(t);
            signs.push(s);
            dn.push(mdn);
            dnn.push(mdnn);
        }
        let scale = fc.measure * factorial(d - 1);
        FaceJumpData {
            cells,
            signs,
            dn,
            dnn,
            weights: face_rule.weights.iter().map(|w| w * scale).collect(),
            boundary: mesh.face_boundary[f],
        }
    });

    let mut a = SparseOperator::new(space.dim, space.dim);
    a.symmetric = true;
    let mut load = vec![0.0; space.dim];

    // (hess u, hess v)_T
    for t in 0..mesh.n_cells() {
        let carrier = cell_carrier(mesh, t);
        let hessians: Vec<PolyField> = mono[t]
            .members
            .iter()
            .map(|b| b.hessian(&carrier))
            .collect();
        let mut kt = DMatrix::zeros(nmono, nmono);
        for i in 0..nmono {
            for j in i..nmono {
                let v = hessians[i].l2_inner(&hessians[j], &carrier);
                kt[(i, j)] = v;
                kt[(j, i)] = v;
            }
        }
        // node-value form: N^T K N with N the lattice-to-monomial map
        let nmap = &space.nodal;
        let local = nmap.transpose() * kt * nmap;
        scatter_cell(&mut a, &space.cell_nodes[t], &local);

        // load (f, Q_r v)
        let basis_r = make_basis(SpaceId::PkScalar(r), &carrier)?;
        let qrf = project_scalar_on(&basis_r, |x| case.f(x), cell_degree)?;
        let scale = carrier.measure * factorial(d);
        let mut lv = DVector::zeros(nmono);
        for (p, w) in cell_rule.points.iter().zip(&cell_rule.weights) {
            let mut fq = 0.0;
            for (i, b) in basis_r.members.iter().enumerate() {
                fq += qrf[i] * b.value_scalar(p);
            }
            for (j, b) in mono[t].members.iter().enumerate() {
                lv[j] += w * scale * fq * b.value_scalar(p);
            }
        }
        let lnode = nmap.transpose() * lv;
        for (i, id) in space.cell_nodes[t].iter().enumerate() {
            if let Some(g) = id {
                load[*g] += lnode[i];
            }
        }
    }

    // face terms -({dnn u},[dn v]) - ([dn u],{dnn v})
    for fd in &faces {
        let nq = fd.weights.len();
        // stencil: union of node lists of incident cells
        let (stencil, locmaps) = face_stencil(&space, &fd.cells);
        let ns = stencil.len();
        // jump and average maps: rows q, cols stencil
        let mut jump = DMatrix::<f64>::zeros(nq, ns);
        let mut avg = DMatrix::<f64>::zeros(nq, ns);
        for (c, &t) in fd.cells.iter().enumerate() {
            let jfac = if fd.boundary { 2.0 } else { fd.signs[c] };
            let afac = 0.5;
            // node -> monomial -> trace values
            let dn_node = &fd.dn[c] * &space.nodal;
            let dnn_node = &fd.dnn[c] * &space.nodal;
            for (iloc, &is) in locmaps[c].iter().enumerate() {
                if is == usize::MAX {
                    continue;
                }
                for q in 0..nq {
                    jump[(q, is)] += jfac * dn_node[(q, iloc)];
                    avg[(q, is)] += afac * dnn_node[(q, iloc)];
                }
            }
        }
        let mut local = DMatrix::<f64>::zeros(ns, ns);
        for q in 0..nq {
            let w = fd.weights[q];
            for i in 0..ns {
                for j in 0..ns {
                    local[(i, j)] -= w * (avg[(q, i)] * jump[(q, j)] + jump[(q, i)] * avg[(q, j)]);
                }
            }
        }
        scatter_stencil(&mut a, &stencil, &local);
    }

    // lifting term 1/4 (L_u, L_v)_T with
    // (L, tau)_T = sum_F ([dn u], n' tau n)_F
    let sym_space = SpaceId::PkSym(k);
    for t in 0..mesh.n_cells() {
        let carrier = cell_carrier(mesh, t);
        let sym = make_basis(sym_space, &carrier)?;
        let g = sym.gram();
        let ginv = g.try_inverse().expect("stress gram");
        // stencil: this cell plus face neighbors
        let mut cells = vec![t];
        for &f in &mesh.cell_faces[t] {
            for &t2 in &mesh.face_cells[f] {
                if !cells.contains(&t2) {
                    cells.push(t2);
                }
            }
        }
        let (stencil, locmaps) = face_stencil(&space, &cells);
        let ns = stencil.len();
        // moment map: rows sym members, cols stencil
        let mut mm = DMatrix::zeros(sym.dim(), ns);
        for (lf, &f) in mesh.cell_faces[t].iter().enumerate() {
            let fc = face_carrier(mesh, f);
            let nf = frames.face_normal[f];
            let s_tf = frames.cell_face_sign[t][lf];
            let scale = fc.measure * factorial(d - 1);
            // n' tau n values of the sym basis at face points
            let nq = face_rule.len();
            let mut taunn = DMatrix::zeros(nq, sym.dim());
            for (j, b) in sym.members.iter().enumerate() {
                for (q, p) in face_rule.points.iter().enumerate() {
                    let x = fc.physical(p);
                    let lam = carrier.barycentric(&x);
                    let tv = b.value_sym(&lam);
                    taunn[(q, j)] = (nf.transpose() * tv * nf)[(0, 0)];
                }
            }
            // [dn u] at the face points as a map over the stencil
            let mut jump = DMatrix::<f64>::zeros(nq, ns);
            for (c2, &t2) in mesh.face_cells[f].iter().enumerate() {
                let lf2 = mesh.cell_faces[t2].iter().position(|&g2| g2 == f).unwrap();
                let s2 = frames.cell_face_sign[t2][lf2];
                let jfac = if mesh.face_boundary[f] { 2.0 } else { s2 };
                let _ = c2;
                let carrier2 = cell_carrier(mesh, t2);
                let ci = cells.iter().position(|&cc| cc == t2).unwrap();
                let mut dn2 = DMatrix::zeros(nq, nmono);
                for (j, b) in mono[t2].members.iter().enumerate() {
                    let grad = b.grad(&carrier2);
                    for (q, p) in face_rule.points.iter().enumerate() {
                        let x = fc.physical(p);
                        let lam = carrier2.barycentric(&x);
                        dn2[(q, j)] = grad.value_vector(&lam).dot(&nf);
                    }
                }
                let dn_node = dn2 * &space.nodal;
                for (iloc, &is) in locmaps[ci].iter().enumerate() {
                    if is == usize::MAX {
                        continue;
                    }
                    for q in 0..nq {
                        jump[(q, is)] += jfac * dn_node[(q, iloc)];
                    }
                }
            }
            // accumulate moments: ([dn u] s_{T,F}, n' tau n)_F
            for j in 0..sym.dim() {
                for is in 0..ns {
                    let mut acc = 0.0;
                    for q in 0..nq {
                        acc += face_rule.weights[q] * scale * taunn[(q, j)] * jump[(q, is)];
                    }
                    mm[(j, is)] += s_tf * acc;
                }
            }
        }
        let lift = &ginv * &mm;
        let local = 0.25 * mm.transpose() * lift;
        scatter_stencil(&mut a, &stencil, &local);
    }
    let assemble_seconds = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let u = solve_spd(&a, &load, solver)?;
    let solve_seconds = t1.elapsed().as_secs_f64();
    Ok(CdgSolution {
        k,
        space,
        u,
        assemble_seconds,
        solve_seconds,
    })
}

fn scatter_cell(a: &mut SparseOperator, nodes: &[Option<usize>], local: &DMatrix<f64>) {
    for (i, gi) in nodes.iter().enumerate() {
        let Some(gi) = gi else { continue };
        for (j, gj) in nodes.iter().enumerate() {
            let Some(gj) = gj else { continue };
            a.push(*gi, *gj, local[(i, j)]);
        }
    }
}

/// Union of the (active) node lists of the given cells with per-cell local
/// index maps into the union.
fn face_stencil(space: &LagrangeSpace, cells: &[usize]) -> (Vec<usize>, Vec<Vec<usize>>) {
    let mut stencil: Vec<usize> = Vec::new();
    let mut maps = Vec::with_capacity(cells.len());
    for &t in cells {
        let mut map = Vec::with_capacity(space.cell_nodes[t].len());
        for id in &space.cell_nodes[t] {
            match id {
                Some(g) => {
                    let pos = stencil.iter().position(|&s| s == *g).unwrap_or_else(|| {
                        stencil.push(*g);
                        stencil.len() - 1
                    });
                    map.push(pos);
                }
                None => map.push(usize::MAX),
            }
        }
        maps.push(map);
    }
    (stencil, maps)
}

fn scatter_stencil(a: &mut SparseOperator, stencil: &[usize], local: &DMatrix<f64>) {
    for i in 0..stencil.len() {
        for j in 0..stencil.len() {
            a.push(stencil[i], stencil[j], local[(i, j)]);
        }
    }
}

impl CdgSolution {
    /// Energy error || hess u - nabla_w^2 u_h ||_0 with the lifted weak
    /// Hessian.
    pub fn energy_error(
        &self,
        mesh: &SimplicialMesh,
        frames: &EntityFrames,
        case: &ManufacturedCase,
        quad_degree: usize,
    ) -> Result<f64, FemError> {
        let d = mesh.dim;
        let k = self.k;
        let cell_rule = simplex_quadrature(d, quad_degree)?;
        let face_rule = simplex_quadrature(d - 1, 2 * k + 4)?;
        let mut acc_total = 0.0;
        for t in 0..mesh.n_cells() {
            let carrier = cell_carrier(mesh, t);
            let mono = self.space.monomial_basis(mesh, t);
            let coeffs = self.space.local_monomial_coeffs(t, &self.u);
            let sym = make_basis(SpaceId::PkSym(k), &carrier)?;
            let g = sym.gram();
            // lifting moments of this cell
            let mut m = DVector::zeros(sym.dim());
            for (lf, &f) in mesh.cell_faces[t].iter().enumerate() {
                let fc = face_carrier(mesh, f);
                let nf = frames.face_normal[f];
                let s_tf = frames.cell_face_sign[t][lf];
                let scale = fc.measure * factorial(d - 1);
                for (q, p) in face_rule.points.iter().enumerate() {
                    let x = fc.physical(p);
                    // [dn u] at this point
                    let mut jump = 0.0;
                    for &t2 in &mesh.face_cells[f] {
                        let lf2 = mesh.cell_faces[t2].iter().position(|&g2| g2 == f).unwrap();
                        let s2 = frames.cell_face_sign[t2][lf2];
                        let jfac = if mesh.face_boundary[f] { 2.0 } else { s2 };
                        let carrier2 = cell_carrier(mesh, t2);
                        let mono2 = self.space.monomial_basis(mesh, t2);
                        let c2 = self.space.local_monomial_coeffs(t2, &self.u);
                        let lam = carrier2.barycentric(&x);
                        let mut dn = 0.0;
                        for (j, b) in mono2.members.iter().enumerate() {
                            dn += c2[j] * b.grad(&carrier2).value_vector(&lam).dot(&nf);
                        }
                        jump += jfac * dn;
                    }
                    let lam = carrier.barycentric(&x);
                    for (j, b) in sym.members.iter().enumerate() {
                        let tv = b.value_sym(&lam);
                        let taunn = (nf.transpose() * tv * nf)[(0, 0)];
                        m[j] += face_rule.weights[q] * scale * s_tf * jump * taunn;
                    }
                }
            }
            let lcoef = g
                .clone()
                .lu()
                .solve(&m)
                .ok_or_else(|| FemError::SolverFailure("lifting gram".into()))?;
            // hess u_h - 1/2 lift vs exact hessian
            let scale = carrier.measure * factorial(d);
            for (p, w) in cell_rule.points.iter().zip(&cell_rule.weights) {
                let x = carrier.physical(p);
                let mut hval = Matrix3::zeros();
                for (j, b) in mono.members.iter().enumerate() {
                    hval += b.hessian(&carrier).value_sym(p) * coeffs[j];
                }
                let mut lval = Matrix3::zeros();
                for (j, b) in sym.members.iter().enumerate() {
                    lval += b.value_sym(p) * lcoef[j];
                }
                let wh = hval - lval * 0.5;
                let diff = case.hess_u(&x) - wh;
                let frob: f64 = (0..3)
                    .flat_map(|i| (0..3).map(move |j| (i, j)))
                    .map(|(i, j)| diff[(i, j)] * diff[(i, j)])
                    .sum();
                acc_total += w * scale * frob;
            }
        }
        Ok(acc_total.max(0.0).sqrt())
    }

    /// Plain L2 error of the deflection.
    pub fn l2_error(
        &self,
        mesh: &SimplicialMesh,
        case: &ManufacturedCase,
        quad_degree: usize,
    ) -> Result<f64, FemError> {
        let d = mesh.dim;
        let rule = simplex_quadrature(d, quad_degree)?;
        let mut acc = 0.0;
        for t in 0..mesh.n_cells() {
            let carrier = cell_carrier(mesh, t);
            let mono = self.space.monomial_basis(mesh, t);
            let coeffs = self.space.local_monomial_coeffs(t, &self.u);
            let scale = carrier.measure * factorial(d);
            for (p, w) in rule.points.iter().zip(&rule.weights) {
                let x = carrier.physical(p);
                let mut val = 0.0;
                for (j, b) in mono.members.iter().enumerate() {
                    val += coeffs[j] * b.value_scalar(p);
                }
                let diff = case.u(&x) - val;
                acc += w * scale * diff * diff;
            }
        }
        Ok(acc.max(0.0).sqrt())
    }
}

// ---------------------------------------------------------------------------
// convergence driver

/// Run the hybridized scheme over a sequence of refinement levels and report
/// the error rows.
pub fn convergence_study(
    dim: usize,
    k: usize,
    r: i64,
    case: &ManufacturedCase,
    levels: &[usize],
    solver: SpdSolver,
    postprocess: bool,
) -> Result<Vec<ErrorRow>, FemError> {
    let mut rows = Vec::new();
    for (lvl, &n) in levels.iter().enumerate() {
        let mesh = build_box_mesh(dim, n)?;
        let frames = compute_frames(&mesh)?;
        let mut sol = solve_hybridized(&mesh, &frames, k, r, case, solver)?;
        if postprocess {
            sol.postprocess(&mesh, &frames)?;
        }
        let row = compute_errors(&mesh, &frames, &sol, case, lvl, n, 2 * k + 8)?;
        rows.push(row);
    }
    Ok(rows)
}

/// Run the C0 DG scheme over refinement levels; the energy error is reported
/// in the `err_hess` column and the L2 error in `err_pp_l2`.
pub fn convergence_study_cdg(
    dim: usize,
    k: usize,
    case: &ManufacturedCase,
    levels: &[usize],
    solver: SpdSolver,
) -> Result<Vec<ErrorRow>, FemError> {
    let mut rows = Vec::new();
    for (lvl, &n) in levels.iter().enumerate() {
        let mesh = build_box_mesh(dim, n)?;
        let frames = compute_frames(&mesh)?;
        let sol = solve_cdg(&mesh, &frames, k, case, solver)?;
        let energy = sol.energy_error(&mesh, &frames, case, 2 * k + 6)?;
        let l2 = sol.l2_error(&mesh, case, 2 * k + 6)?;
        rows.push(ErrorRow {
            level: lvl,
            h: 1.0 / n as f64,
            err_sigma: f64::NAN,
            err_hess: energy,
            err_u0h: f64::NAN,
            err_pp_h2: f64::NAN,
            err_pp_l2: l2,
            assemble_seconds: sol.assemble_seconds,
            solve_seconds: sol.solve_seconds,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manufactured_case_clamped_and_consistent() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(42);
        for dim in [2usize, 3] {
            let case = ManufacturedCase::new(CaseId::SinSq, dim);
            // clamped boundary values
            for _ in 0..10 {
                let mut x = Vector3::zeros();
                for i in 0..dim {
                    x[i] = rng.random_range(0.0..1.0);
                }
                let axis = rng.random_range(0..dim);
                x[axis] = if rng.random_range(0.0..1.0) < 0.5 { 0.0 } else { 1.0 };
                assert!(case.u(&x).abs() < 1e-12);
                assert!(case.grad_u(&x).norm() < 1e-12);
            }
            // finite-difference check of f = Delta^2 u via the analytic
            // Laplacian
            let h = 0.01;
            for _ in 0..20 {
                let mut x = Vector3::zeros();
                for i in 0..dim {
                    x[i] = rng.random_range(0.05..0.95);
                }
                let lap = |y: &Vector3<f64>| case.hess_u(y).trace();
                let mut fd = 0.0;
                for axis in 0..dim {
                    let mut xs = [x; 5];
                    for (s, dx) in [-2.0, -1.0, 0.0, 1.0, 2.0].iter().enumerate() {
                        xs[s][axis] += dx * h;
                    }
                    fd += (-lap(&xs[0]) + 16.0 * lap(&xs[1]) - 30.0 * lap(&xs[2])
                        + 16.0 * lap(&xs[3])
                        - lap(&xs[4]))
                        / (12.0 * h * h);
                }
                let exact = case.f(&x);
                let scale = exact.abs().max(1.0);
                assert!(
                    (fd - exact).abs() < 1e-6 * scale,
                    "dim {dim}: fd {fd} vs f {exact}"
                );
            }
            // sigma is minus the Hessian and the Hessian is symmetric
            let x = Vector3::new(0.3, 0.4, if dim == 3 { 0.6 } else { 0.0 });
            let h = case.hess_u(&x);
            assert!((h - h.transpose()).norm() < 1e-12);
            assert!((case.sigma(&x) + h).norm() < 1e-14);
        }
    }

    #[test]
    fn zero_load_gives_zero_solution() {
        for (dim, k) in [(2usize, 1usize), (2, 2), (2, 3), (2, 0)] {
            let mesh = build_box_mesh(dim, 2).unwrap();
            let frames = compute_frames(&mesh).unwrap();
            let case = ManufacturedCase::new(CaseId::Zero, dim);
            let sol = solve_hybridized(
                &mesh,
                &frames,
                k,
                default_r(k),
                &case,
                SpdSolver::Cholesky,
            )
            .unwrap();
            let unorm: f64 = sol.u.iter().map(|v| v * v).sum::<f64>().sqrt();
            let snorm: f64 = sol.sigma.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(unorm < 1e-12, "k {k}: |u| = {unorm}");
            assert!(snorm < 1e-12, "k {k}: |sigma| = {snorm}");
        }
    }

    #[test]
    fn cdg_zero_load() {
        let mesh = build_box_mesh(2, 2).unwrap();
        let frames = compute_frames(&mesh).unwrap();
        let case = ManufacturedCase::new(CaseId::Zero, 2);
        let sol = solve_cdg(&mesh, &frames, 2, &case, SpdSolver::Cholesky).unwrap();
        let unorm: f64 = sol.u.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(unorm < 1e-12);
    }

    #[test]
    fn cdg_rejects_low_degree() {
        let mesh = build_box_mesh(2, 1).unwrap();
        let frames = compute_frames(&mesh).unwrap();
        let case = ManufacturedCase::new(CaseId::Zero, 2);
        assert!(solve_cdg(&mesh, &frames, 1, &case, SpdSolver::Cholesky).is_err());
    }

    #[test]
    fn error_quadrature_guard() {
        let mesh = build_box_mesh(2, 1).unwrap();
        let frames = compute_frames(&mesh).unwrap();
        let case = ManufacturedCase::new(CaseId::Zero, 2);
        let sol =
            solve_hybridized(&mesh, &frames, 2, 0, &case, SpdSolver::Cholesky).unwrap();
        let err = compute_errors(&mesh, &frames, &sol, &case, 0, 1, 4).unwrap_err();
        assert!(matches!(err, FemError::RequiredDegree { .. }));
    }

    #[test]
    fn postprocess_reproduces_polynomial() {
        // sigma_h = -hess p and matching moments reproduce p in P_{k+2}
        let mesh = build_box_mesh(2, 1).unwrap();
        let frames = compute_frames(&mesh).unwrap();
        let case = ManufacturedCase::new(CaseId::Zero, 2);
        let k = 3usize;
        let mut sol =
            solve_hybridized(&mesh, &frames, k, 1, &case, SpdSolver::Cholesky).unwrap();
        // overwrite sigma with -hess p and the cell moments with p
        struct P;
        impl ScalarField for P {
            fn value(&self, x: &Vector3<f64>) -> f64 {
                x[0] * x[0] * x[1] + 0.5 * x[1] - 0.25
            }
            fn gradient(&self, x: &Vector3<f64>) -> Option<Vector3<f64>> {
                Some(Vector3::new(2.0 * x[0] * x[1], x[0] * x[0] + 0.5, 0.0))
            }
        }
        struct HessP;
        impl SymField for HessP {
            fn value(&self, x: &Vector3<f64>) -> Matrix3<f64> {
                let mut m = Matrix3::zeros();
                m[(0, 0)] = -2.0 * x[1];
                m[(0, 1)] = -2.0 * x[0];
                m[(1, 0)] = -2.0 * x[0];
                m
            }
        }
        sol.sigma = crate::spaces::project_qsigma(&sol.sigma_space, &HessP, 10).unwrap();
        let qm = project_qm(&sol.m_space, &frames, &P, 10).unwrap();
        sol.u = qm;
        sol.postprocess(&mesh, &frames).unwrap();
        let stars = sol.u_star.as_ref().unwrap();
        for t in 0..mesh.n_cells() {
            let carrier = cell_carrier(&mesh, t);
            let basis = make_basis(SpaceId::PkScalar(k + 2), &carrier).unwrap();
            let lam = [0.25, 0.4, 0.35];
            let x = carrier.physical(&lam);
            let mut val = 0.0;
            for (j, b) in basis.members.iter().enumerate() {
                val += stars[t][j] * b.value_scalar(&lam);
            }
            assert!((val - P.value(&x)).abs() < 1e-9, "cell {t}");
        }
    }
}
