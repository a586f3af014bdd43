//! The weak div-div operator, its adjoint weak Hessian, and the SPD
//! stiffness of the stabilization-free scheme.
//!
//! Per cell the weak Hessian of v = (v_0, v_b, v_n, v_e) against a stress
//! basis field sigma is
//!   (v_0, divdiv sigma)_T - (v_b, tr2 sigma)_dT
//!     + (v_n (n_F . n), n' sigma n)_dT + sum_e (v_e, tr_e sigma)_e,
//! and the weak div-div collects cellwise divdiv with the weighted trace
//! jumps -h_F^{-1}[tr2], h_F^{-3}[n' sigma n], h_e^{-2}[tr_e].

use super::{BrokenStressSpace, LocalKind, MultiplierSpace};
use crate::element::{compute_traces, TraceTables};
use crate::error::FemError;
use crate::frames::EntityFrames;
use crate::mesh::SimplicialMesh;
use crate::par;
use crate::quadrature::{factorial, simplex_quadrature, QuadratureRule};
use crate::sparse::SparseOperator;
use nalgebra::{DMatrix, DVector};

/// Quadrature degrees used by the weak operators.
#[derive(Debug, Clone, Copy)]
pub struct WeakOps {
    pub cell_degree: usize,
    pub face_degree: usize,
    pub ridge_degree: usize,
}

impl WeakOps {
    pub fn for_degree(k: usize) -> Self {
        WeakOps {
            cell_degree: 2 * k + 6,
            face_degree: 2 * k + 4,
            ridge_degree: 2 * k + 4,
        }
    }
}

/// Per-cell stress evaluation tables: divdiv at cell points and the three
/// traces at face/ridge points.
pub struct CellStressTables {
    pub divdiv: Vec<Vec<f64>>,
    pub traces: TraceTables,
}

pub fn cell_stress_tables(
    sigma: &BrokenStressSpace,
    mesh: &SimplicialMesh,
    frames: &EntityFrames,
    t: usize,
    ops: WeakOps,
    cell_rule: &QuadratureRule,
) -> CellStressTables {
    let basis = &sigma.cell_basis[t];
    let divdiv: Vec<Vec<f64>> = basis
        .members
        .iter()
        .map(|f| {
            let dd = f.divdiv(&basis.carrier);
            cell_rule.points.iter().map(|p| dd.value_scalar(p)).collect()
        })
        .collect();
    let traces = compute_traces(basis, mesh, frames, t, ops.face_degree, ops.ridge_degree)
        .expect("trace tables");
    CellStressTables { divdiv, traces }
}

struct EntityRules {
    cell: QuadratureRule,
    face: QuadratureRule,
    ridge: QuadratureRule,
}

fn rules(d: usize, ops: WeakOps) -> EntityRules {
    EntityRules {
        cell: simplex_quadrature(d, ops.cell_degree).unwrap(),
        face: simplex_quadrature(d - 1, ops.face_degree).unwrap(),
        ridge: simplex_quadrature(d - 2, ops.ridge_degree).unwrap(),
    }
}

/// Moments of sampled values against every member of an entity basis.
fn moments(
    basis: &crate::basis::TensorPolyBasis,
    rule: &QuadratureRule,
    vals: &[f64],
) -> DVector<f64> {
    let m = basis.carrier.dim_intrinsic;
    let scale = basis.carrier.measure * factorial(m);
    let mut out = DVector::zeros(basis.dim());
    for (i, b) in basis.members.iter().enumerate() {
        let mut acc = 0.0;
        for ((p, w), v) in rule.points.iter().zip(&rule.weights).zip(vals) {
            acc += w * b.value_scalar(p) * v;
        }
        out[i] = acc * scale;
    }
    out
}

/// Assemble the weak div-div operator B with (B sigma, v)_{0,h} semantics:
/// rows are multiplier coefficients of (div div)_w sigma_j. Boundary rows
/// appear when the multiplier space includes boundary entities.
pub fn assemble_weak_divdiv(
    mesh: &SimplicialMesh,
    frames: &EntityFrames,
    sigma: &BrokenStressSpace,
    m_space: &MultiplierSpace,
) -> Result<SparseOperator, FemError> {
    if sigma.k != m_space.k {
        return Err(FemError::Incompatibility(format!(
            "stress degree {} vs multiplier degree {}",
            sigma.k, m_space.k
        )));
    }
    let d = mesh.dim;
    let ops = WeakOps::for_degree(sigma.k);
    let er = rules(d, ops);
    let cell_triplets: Vec<Vec<(usize, usize, f64)>> = par::map_indexed(mesh.n_cells(), |t| {
        let mut tri = Vec::new();
        let tables = cell_stress_tables(sigma, mesh, frames, t, ops, &er.cell);
        let off = sigma.offsets[t];
        let nshape = sigma.cell_basis[t].dim();
        // cell rows: divdiv sigma expressed in the cell block
        if m_space.cell_dim > 0 {
            let basis = &m_space.cell_basis[t];
            let lu = basis.gram().lu();
            for j in 0..nshape {
                let m = moments(basis, &er.cell, &tables.divdiv[j]);
                let c = lu.solve(&m).expect("cell gram");
                for i in 0..basis.dim() {
                    tri.push((m_space.cell_index(t, i), off + j, c[i]));
                }
            }
        }
        for (lf, &f) in mesh.cell_faces[t].iter().enumerate() {
            let Some(slot) = m_space.face_slot[f] else {
                continue;
            };
            let hf = frames.face_diameter[f];
            let s = frames.cell_face_sign[t][lf];
            if m_space.face_b_dim > 0 {
                let basis = &m_space.face_b_basis[slot];
                let lu = basis.gram().lu();
                for j in 0..nshape {
                    let m = moments(basis, &er.face, &tables.traces.tr2[lf][j]);
                    let c = lu.solve(&m).expect("face gram");
                    for i in 0..basis.dim() {
                        tri.push((m_space.face_b_index(slot, i), off + j, -c[i] / hf));
                    }
                }
            }
            {
                let basis = &m_space.face_n_basis[slot];
                let lu = basis.gram().lu();
                for j in 0..nshape {
                    let m = moments(basis, &er.face, &tables.traces.tr1[lf][j]);
                    let c = lu.solve(&m).expect("face gram");
                    for i in 0..basis.dim() {
                        tri.push((
                            m_space.face_n_index(slot, i),
                            off + j,
                            s * c[i] / hf.powi(3),
                        ));
                    }
                }
            }
        }
        for (le, &e) in mesh.cell_ridges[t].iter().enumerate() {
            let Some(slot) = m_space.ridge_slot[e] else {
                continue;
            };
            let he = frames.ridge_diameter[e];
            let basis = &m_space.ridge_basis[slot];
            let lu = basis.gram().lu();
            for j in 0..nshape {
                let m = moments(basis, &er.ridge, &tables.traces.tre[le][j]);
                let c = lu.solve(&m).expect("ridge gram");
                for i in 0..basis.dim() {
                    tri.push((m_space.ridge_index(slot, i), off + j, c[i] / (he * he)));
                }
            }
        }
        tri
    });
    let mut b = SparseOperator::new(m_space.dim, sigma.dim);
    for tri in cell_triplets {
        b.entries.extend(tri);
    }
    Ok(b)
}

/// Local weak-Hessian block H_T[j][i] = (nabla_w^2 mu_i, sigma_j)_T for the
/// multiplier unknowns touching cell t, plus their global markers.
pub fn local_weak_hessian(
    mesh: &SimplicialMesh,
    frames: &EntityFrames,
    sigma: &BrokenStressSpace,
    m_space: &MultiplierSpace,
    t: usize,
    er: &EntityRulesRef,
    tables: &CellStressTables,
) -> (DMatrix<f64>, Vec<super::LocalMraker>) {
    let markers = m_space.cell_local_map(mesh, t);
    let nshape = sigma.cell_basis[t].dim();
    let mut h = DMatrix::zeros(nshape, markers.len());
    let d = mesh.dim;
    for (col, mk) in markers.iter().enumerate() {
        match mk.kind {
            LocalKind::Cell { test } => {
                let basis = &m_space.cell_basis[t];
                let scale = basis.carrier.measure * factorial(d);
                for j in 0..nshape {
                    let mut acc = 0.0;
                    for ((p, w), v) in er
                        .cell
                        .points
                        .iter()
                        .zip(&er.cell.weights)
                        .zip(&tables.divdiv[j])
                    {
                        acc += w * basis.members[test].value_scalar(p) * v;
                    }
                    h[(j, col)] = acc * scale;
                }
            }
            LocalKind::FaceB {
                local_face, slot, test,
            } => {
                let basis = &m_space.face_b_basis[slot];
                let scale = basis.carrier.measure * factorial(d - 1);
                for j in 0..nshape {
                    let mut acc = 0.0;
                    for ((p, w), v) in er
                        .face
                        .points
                        .iter()
                        .zip(&er.face.weights)
                        .zip(&tables.traces.tr2[local_face][j])
                    {
                        acc += w * basis.members[test].value_scalar(p) * v;
                    }
                    h[(j, col)] = -acc * scale;
                }
            }
            LocalKind::FaceN {
                local_face, slot, test,
            } => {
                let basis = &m_space.face_n_basis[slot];
                let scale = basis.carrier.measure * factorial(d - 1);
                let s = frames.cell_face_sign[t][local_face];
                for j in 0..nshape {
                    let mut acc = 0.0;
                    for ((p, w), v) in er
                        .face
                        .points
                        .iter()
                        .zip(&er.face.weights)
                        .zip(&tables.traces.tr1[local_face][j])
                    {
                        acc += w * basis.members[test].value_scalar(p) * v;
                    }
                    h[(j, col)] = s * acc * scale;
                }
            }
            LocalKind::Ridge {
                local_ridge, slot, test,
            } => {
                let basis = &m_space.ridge_basis[slot];
                let scale = basis.carrier.measure * factorial(d.saturating_sub(2));
                for j in 0..nshape {
                    let mut acc = 0.0;
                    for ((p, w), v) in er
                        .ridge
                        .points
                        .iter()
                        .zip(&er.ridge.weights)
                        .zip(&tables.traces.tre[local_ridge][j])
                    {
                        acc += w * basis.members[test].value_scalar(p) * v;
                    }
                    h[(j, col)] = acc * scale;
                }
            }
        }
    }
    (h, markers)
}

pub struct EntityRulesRef {
    pub cell: QuadratureRule,
    pub face: QuadratureRule,
    pub ridge: QuadratureRule,
}

pub fn entity_rules(d: usize, ops: WeakOps) -> EntityRulesRef {
    EntityRulesRef {
        cell: simplex_quadrature(d, ops.cell_degree).unwrap(),
        face: simplex_quadrature(d - 1, ops.face_degree).unwrap(),
        ridge: simplex_quadrature(d - 2, ops.ridge_degree).unwrap(),
    }
}

/// Assemble the weak Hessian H with H[j][i] = (nabla_w^2 mu_i, sigma_j).
pub fn assemble_weak_hessian(
    mesh: &SimplicialMesh,
    frames: &EntityFrames,
    m_space: &MultiplierSpace,
    sigma: &BrokenStressSpace,
) -> Result<SparseOperator, FemError> {
    let d = mesh.dim;
    let ops = WeakOps::for_degree(sigma.k);
    let er = entity_rules(d, ops);
    let per_cell: Vec<(DMatrix<f64>, Vec<super::LocalMraker>)> =
        par::map_indexed(mesh.n_cells(), |t| {
            let tables = cell_stress_tables(sigma, mesh, frames, t, ops, &er.cell);
            local_weak_hessian(mesh, frames, sigma, m_space, t, &er, &tables)
        });
    let mut h = SparseOperator::new(sigma.dim, m_space.dim);
    for (t, (hloc, markers)) in per_cell.iter().enumerate() {
        let off = sigma.offsets[t];
        for (col, mk) in markers.iter().enumerate() {
            for j in 0..hloc.nrows() {
                h.push(off + j, mk.global, hloc[(j, col)]);
            }
        }
    }
    Ok(h)
}

/// Per-cell data of the assembled scheme: stiffness contribution
/// H^T G^{-1} H and the local maps, kept for solution reconstruction.
pub struct WgAssembly {
    pub stiffness: SparseOperator,
    /// Per cell: (gram LU-factored as dense inverse, local weak hessian,
    /// markers).
    pub cells: Vec<(DMatrix<f64>, DMatrix<f64>, Vec<super::LocalMraker>)>,
}

/// Assemble the SPD stiffness (nabla_w^2 u, nabla_w^2 v) on the multiplier
/// space by cellwise elimination of the stress block.
pub fn wg_stiffness(
    mesh: &SimplicialMesh,
    frames: &EntityFrames,
    sigma: &BrokenStressSpace,
    m_space: &MultiplierSpace,
) -> Result<WgAssembly, FemError> {
    let d = mesh.dim;
    let ops = WeakOps::for_degree(sigma.k);
    let er = entity_rules(d, ops);
    let per_cell: Vec<(DMatrix<f64>, DMatrix<f64>, Vec<super::LocalMraker>)> =
        par::map_indexed(mesh.n_cells(), |t| {
            let tables = cell_stress_tables(sigma, mesh, frames, t, ops, &er.cell);
            let (hloc, markers) = local_weak_hessian(mesh, frames, sigma, m_space, t, &er, &tables);
            let g = sigma.cell_basis[t].gram();
            let ginv = g.try_inverse().expect("stress gram invertible");
            (ginv, hloc, markers)
        });
    let mut a = SparseOperator::new(m_space.dim, m_space.dim);
    a.symmetric = true;
    for (ginv, hloc, markers) in &per_cell {
        let at = hloc.transpose() * ginv * hloc;
        for (i, mi) in markers.iter().enumerate() {
            for (j, mj) in markers.iter().enumerate() {
                a.push(mi.global, mj.global, at[(i, j)]);
            }
        }
    }
    Ok(WgAssembly {
        stiffness: a,
        cells: per_cell,
    })
}

impl WgAssembly {
    /// Apply the weak Hessian to a multiplier vector: stress coefficients of
    /// nabla_w^2 v, cell by cell.
    pub fn weak_hessian_apply(&self, sigma: &BrokenStressSpace, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; sigma.dim];
        for (t, (ginv, hloc, markers)) in self.cells.iter().enumerate() {
            let mut vloc = DVector::zeros(markers.len());
            for (i, mk) in markers.iter().enumerate() {
                vloc[i] = v[mk.global];
            }
            let coeffs = ginv * (hloc * vloc);
            for (j, c) in coeffs.iter().enumerate() {
                out[sigma.offsets[t] + j] = *c;
            }
        }
        out
    }

    /// Energy (nabla_w^2 u, nabla_w^2 v) via the assembled stiffness.
    pub fn energy(&self, u: &[f64], v: &[f64]) -> f64 {
        let mut acc = 0.0;
        for &(i, j, a) in &self.stiffness.entries {
            acc += u[i] * a * v[j];
        }
        acc
    }
}

/// L2 norm of a broken stress coefficient vector.
pub fn stress_l2_norm(sigma: &BrokenStressSpace, c: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (t, basis) in sigma.cell_basis.iter().enumerate() {
        let g = basis.gram();
        let r = sigma.cell_range(t);
        let loc = &c[r];
        for i in 0..basis.dim() {
            for j in 0..basis.dim() {
                acc += loc[i] * g[(i, j)] * loc[j];
            }
        }
    }
    acc.max(0.0).sqrt()
}
