//! The quadratic nonconforming element with face normal-derivative means and
//! ridge means as degrees of freedom, in 2 and 3 dimensions. Used for the
//! k = 0 load reconstruction and the direct stiffness assembled for the
//! equivalence check of the lowest-order scheme.

use crate::basis::{make_basis, PolyField, SpaceId};
use crate::error::FemError;
use crate::frames::{cell_carrier, face_carrier, ridge_carrier, EntityFrames};
use crate::mesh::SimplicialMesh;
use crate::quadrature::{factorial, simplex_quadrature};
use crate::sparse::SparseOperator;
use nalgebra::{DMatrix, DVector};

/// DoF matrix of the local quadratic element on cell `t`: rows are the face
/// normal-derivative means (against the global face normal) followed by the
/// ridge means; columns index the P_2 basis on the cell carrier.
pub fn mwx_cell_matrix(
    mesh: &SimplicialMesh,
    frames: &EntityFrames,
    t: usize,
) -> (DMatrix<f64>, crate::basis::TensorPolyBasis) {
    let d = mesh.dim;
    let carrier = cell_carrier(mesh, t);
    let basis = make_basis(SpaceId::PkScalar(2), &carrier).unwrap();
    let nf = mesh.cell_faces[t].len();
    let ne = mesh.cell_ridges[t].len();
    let mut m = DMatrix::zeros(nf + ne, basis.dim());
    let face_rule = simplex_quadrature(d - 1, 3).unwrap();
    for (lf, &f) in mesh.cell_faces[t].iter().enumerate() {
        let fc = face_carrier(mesh, f);
        let n = frames.face_normal[f];
        let scale = fc.measure * factorial(d - 1) / fc.measure;
        for (j, b) in basis.members.iter().enumerate() {
            let grad = b.grad(&carrier);
            let mut mean = 0.0;
            for (p, w) in face_rule.points.iter().zip(&face_rule.weights) {
                let x = fc.physical(p);
                let lam = carrier.barycentric(&x);
                mean += w * scale * grad.value_vector(&lam).dot(&n);
            }
            m[(lf, j)] = mean;
        }
    }
    let ridge_rule = simplex_quadrature(d - 2, 3).unwrap();
    for (le, &e) in mesh.cell_ridges[t].iter().enumerate() {
        let rc = ridge_carrier(mesh, e);
        let scale = rc.measure * factorial(d - 2) / rc.measure;
        for (j, b) in basis.members.iter().enumerate() {
            let mut mean = 0.0;
            for (p, w) in ridge_rule.points.iter().zip(&ridge_rule.weights) {
                let x = rc.physical(p);
                let lam = carrier.barycentric(&x);
                mean += w * scale * b.value_scalar(&lam);
            }
            m[(nf + le, j)] = mean;
        }
    }
    (m, basis)
}

/// Reconstruct the local quadratic with the given face and ridge DoF values.
pub fn mwx_reconstruct(
    mesh: &SimplicialMesh,
    frames: &EntityFrames,
    t: usize,
    face_vals: &[f64],
    ridge_vals: &[f64],
) -> PolyField {
    let (m, basis) = mwx_cell_matrix(mesh, frames, t);
    let mut rhs = DVector::zeros(m.nrows());
    for (i, v) in face_vals.iter().enumerate() {
        rhs[i] = *v;
    }
    for (i, v) in ridge_vals.iter().enumerate() {
        rhs[face_vals.len() + i] = *v;
    }
    let sol = m.lu().solve(&rhs).expect("quadratic element unisolvent");
    basis.combine(sol.as_slice())
}

/// Global numbering for the nonconforming quadratic space with homogeneous
/// boundary conditions: one unknown per interior face and per interior ridge.
pub struct MwxSpace {
    pub face_slot: Vec<Option<usize>>,
    pub ridge_slot: Vec<Option<usize>>,
    pub n_faces: usize,
    pub dim: usize,
}

pub fn mwx_space(mesh: &SimplicialMesh) -> MwxSpace {
    let mut face_slot = vec![None; mesh.n_faces()];
    let mut n = 0;
    for f in 0..mesh.n_faces() {
        if !mesh.face_boundary[f] {
            face_slot[f] = Some(n);
            n += 1;
        }
    }
    let n_faces = n;
    let mut ridge_slot = vec![None; mesh.n_ridges()];
    for e in 0..mesh.n_ridges() {
        if !mesh.ridge_boundary[e] {
            ridge_slot[e] = Some(n);
            n += 1;
        }
    }
    MwxSpace {
        face_slot,
        ridge_slot,
        n_faces,
        dim: n,
    }
}

/// Directly assembled stiffness (piecewise Hessian inner products on the
/// nodal basis) plus the per-cell nodal maps.
pub struct MwxStiffness {
    pub space: MwxSpace,
    pub matrix: SparseOperator,
    /// Per cell: nodal basis expressed in the local P_2 basis, columns
    /// indexed by the local DoF order (faces then ridges).
    pub nodal: Vec<(DMatrix<f64>, crate::basis::TensorPolyBasis)>,
}

pub fn assemble_mwx_stiffness(
    mesh: &SimplicialMesh,
    frames: &EntityFrames,
) -> Result<MwxStiffness, FemError> {
    let d = mesh.dim;
    let space = mwx_space(mesh);
    let mut a = SparseOperator::new(space.dim, space.dim);
    a.symmetric = true;
    let mut nodal = Vec::with_capacity(mesh.n_cells());
    for t in 0..mesh.n_cells() {
        let (m, basis) = mwx_cell_matrix(mesh, frames, t);
        let inv = m
            .clone()
            .try_inverse()
            .ok_or_else(|| FemError::SolverFailure("quadratic DoF matrix singular".into()))?;
        let carrier = cell_carrier(mesh, t);
        // constant Hessians of the P_2 basis members
        let hessians: Vec<nalgebra::Matrix3<f64>> = basis
            .members
            .iter()
            .map(|b| b.hessian(&carrier).value_sym(&vec![0.0; carrier.nvars()]))
            .collect();
        let nloc = m.nrows();
        // local DoF globals (None for boundary entities)
        let mut globals: Vec<Option<usize>> = Vec::with_capacity(nloc);
        for &f in &mesh.cell_faces[t] {
            globals.push(space.face_slot[f]);
        }
        for &e in &mesh.cell_ridges[t] {
            globals.push(space.ridge_slot[e]);
        }
        let vol = frames.cell_volume[t];
        for a_loc in 0..nloc {
            let Some(gi) = globals[a_loc] else { continue };
            for b_loc in 0..nloc {
                let Some(gj) = globals[b_loc] else { continue };
                // hessian of nodal function a = sum_j inv[j][a] basis_j
                let mut acc = 0.0;
                for (ja, ha) in hessians.iter().enumerate() {
                    for (jb, hb) in hessians.iter().enumerate() {
                        let frob: f64 = (0..d)
                            .flat_map(|p| (0..d).map(move |q| (p, q)))
                            .map(|(p, q)| ha[(p, q)] * hb[(p, q)])
                            .sum();
                        acc += inv[(ja, a_loc)] * inv[(jb, b_loc)] * frob;
                    }
                }
                a.push(gi, gj, vol * acc);
            }
        }
        nodal.push((inv, basis));
    }
    Ok(MwxStiffness {
        space,
        matrix: a,
        nodal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames::compute_frames;
    use crate::mesh::build_box_mesh;

    #[test]
    fn reconstruct_reproduces_quadratic() {
        for d in [2usize, 3] {
            let mesh = build_box_mesh(d, 1).unwrap();
            let frames = compute_frames(&mesh).unwrap();
            let t = 0;
            let carrier = cell_carrier(&mesh, t);
            let basis = make_basis(SpaceId::PkScalar(2), &carrier).unwrap();
            let coeffs: Vec<f64> = (0..basis.dim()).map(|i| (i as f64 - 2.0) * 0.3).collect();
            let q = basis.combine(&coeffs);
            // evaluate the DoFs of q
            let (m, _) = mwx_cell_matrix(&mesh, &frames, t);
            let mut rhs = DVector::zeros(m.nrows());
            let mut coef_vec = DVector::zeros(basis.dim());
            for (i, c) in coeffs.iter().enumerate() {
                coef_vec[i] = *c;
            }
            rhs.gemv(1.0, &m, &coef_vec, 0.0);
            let nf = mesh.cell_faces[t].len();
            let rec = mwx_reconstruct(
                &mesh,
                &frames,
                t,
                rhs.as_slice()[..nf].as_ref(),
                rhs.as_slice()[nf..].as_ref(),
            );
            let lam = vec![1.0 / (d as f64 + 1.0); d + 1];
            assert!((rec.value_scalar(&lam) - q.value_scalar(&lam)).abs() < 1e-10);
        }
    }

    #[test]
    fn stiffness_is_symmetric_spd() {
        let mesh = build_box_mesh(2, 2).unwrap();
        let frames = compute_frames(&mesh).unwrap();
        let st = assemble_mwx_stiffness(&mesh, &frames).unwrap();
        assert!(st.matrix.symmetry_defect() < 1e-12 * st.matrix.max_abs());
        let dense = st.matrix.to_dense();
        let eig = dense.symmetric_eigen();
        assert!(eig.eigenvalues.min() > 0.0);
    }
}
