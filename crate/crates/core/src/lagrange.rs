//! Continuous Lagrange spaces of degree k on simplicial meshes with zero
//! boundary trace, via the barycentric lattice. Nodes on shared entities are
//! matched through the sorted global vertex tuples, so no orientation
//! bookkeeping is needed.

use crate::basis::{make_basis, SpaceId, TensorPolyBasis};
use crate::error::FemError;
use crate::frames::cell_carrier;
use crate::mesh::SimplicialMesh;
use crate::poly::monomials;
use nalgebra::{DMatrix, DVector};
use std::collections::HashMap;

/// Global continuous Lagrange space.
pub struct LagrangeSpace {
    pub k: usize,
    /// Global node count (interior unknowns only when `zero_boundary`).
    pub dim: usize,
    /// Per cell, per lattice node: global unknown or None (constrained).
    pub cell_nodes: Vec<Vec<Option<usize>>>,
    /// Nodal basis polynomials on the reference lattice, one per lattice
    /// multi-index, shared across cells (coefficients over the P_k basis).
    pub nodal: DMatrix<f64>,
    pub lattice: Vec<Vec<usize>>,
}

/// Build the degree-k Lagrange space with homogeneous Dirichlet trace.
pub fn build_lagrange_space(mesh: &SimplicialMesh, k: usize) -> Result<LagrangeSpace, FemError> {
    if k < 1 {
        return Err(FemError::UnsupportedSpace("Lagrange needs k >= 1".into()));
    }
    let d = mesh.dim;
    let lattice: Vec<Vec<usize>> = monomials(d + 1, k).exps.clone();

    // boundary lookup for sub-entities by sorted vertex tuples
    let mut boundary_sets: HashMap<Vec<usize>, bool> = HashMap::new();
    for (f, fb) in mesh.face_boundary.iter().enumerate() {
        boundary_sets.insert(mesh.faces[f].clone(), *fb);
    }
    for (e, eb) in mesh.ridge_boundary.iter().enumerate() {
        boundary_sets.insert(mesh.ridges[e].clone(), *eb);
    }
    for (v, vb) in mesh.vertex_boundary.iter().enumerate() {
        boundary_sets.insert(vec![v], *vb);
    }

    let mut node_ids: HashMap<Vec<(usize, usize)>, Option<usize>> = HashMap::new();
    let mut next = 0usize;
    let mut cell_nodes = Vec::with_capacity(mesh.n_cells());
    for cell in &mesh.cells {
        let mut ids = Vec::with_capacity(lattice.len());
        for alpha in &lattice {
            // support key: (vertex, exponent) for positive exponents
            let key: Vec<(usize, usize)> = cell
                .iter()
                .zip(alpha)
                .filter(|(_, &a)| a > 0)
                .map(|(&v, &a)| (v, a))
                .collect();
            let entry = node_ids.entry(key.clone()).or_insert_with(|| {
                let support: Vec<usize> = key.iter().map(|(v, _)| *v).collect();
                let on_boundary = *boundary_sets.get(&support).unwrap_or(&false);
                if on_boundary {
                    None
                } else {
                    let id = next;
                    next += 1;
                    Some(id)
                }
            });
            ids.push(*entry);
        }
        cell_nodes.push(ids);
    }

    // nodal basis on the reference lattice: invert the Vandermonde of the
    // P_k monomials at the lattice points
    let basis_dim = lattice.len();
    let mut vander = DMatrix::zeros(basis_dim, basis_dim);
    let tab = monomials(d + 1, k);
    for (i, alpha) in lattice.iter().enumerate() {
        let lam: Vec<f64> = alpha.iter().map(|&a| a as f64 / k as f64).collect();
        for (j, beta) in tab.exps.iter().enumerate() {
            let mut m = 1.0;
            for (l, &b) in beta.iter().enumerate() {
                for _ in 0..b {
                    m *= lam[l];
                }
            }
            vander[(i, j)] = m;
        }
    }
    let nodal = vander
        .try_inverse()
        .ok_or_else(|| FemError::SolverFailure("Lagrange lattice Vandermonde singular".into()))?;
    Ok(LagrangeSpace {
        k,
        dim: next,
        cell_nodes,
        nodal,
        lattice,
    })
}

impl LagrangeSpace {
    /// The local polynomial on cell `t` for global coefficients `u` (zero on
    /// constrained nodes), expressed over the cell's P_k monomial basis.
    pub fn local_monomial_coeffs(&self, t: usize, u: &[f64]) -> DVector<f64> {
        let n = self.lattice.len();
        let mut vals = DVector::zeros(n);
        for (i, id) in self.cell_nodes[t].iter().enumerate() {
            if let Some(g) = id {
                vals[i] = u[*g];
            }
        }
        // nodal is the inverse Vandermonde: coeffs = nodal * vals
        &self.nodal * vals
    }

    /// Monomial-basis handle on a cell (unnormalized P_k monomials).
    pub fn monomial_basis(&self, mesh: &SimplicialMesh, t: usize) -> TensorPolyBasis {
        let carrier = cell_carrier(mesh, t);
        // the raw (non-normalized) monomial coefficients matter here, so
        // rebuild without normalization
        let mut b = make_basis(SpaceId::PkScalar(self.k), &carrier).unwrap();
        for f in &mut b.members {
            // undo the L2 normalization applied by make_basis: monomials have
            // a single unit coefficient
            let scale = f.comps[0].coeffs.iter().fold(0.0f64, |a, c| a.max(c.abs()));
            if scale > 0.0 {
                f.scale(1.0 / scale);
            }
        }
        b
    }

    /// Interpolate a smooth function at the lattice nodes.
    pub fn interpolate<F: Fn(&nalgebra::Vector3<f64>) -> f64>(
        &self,
        mesh: &SimplicialMesh,
        f: F,
    ) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (t, nodes) in self.cell_nodes.iter().enumerate() {
            let carrier = cell_carrier(mesh, t);
            for (i, id) in nodes.iter().enumerate() {
                if let Some(g) = id {
                    let lam: Vec<f64> = self.lattice[i]
                        .iter()
                        .map(|&a| a as f64 / self.k as f64)
                        .collect();
                    let x = carrier.physical(&lam);
                    out[*g] = f(&x);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_box_mesh;

    #[test]
    fn p2_dimension_2d() {
        // interior nodes of the degree-2 lattice: interior vertices plus
        // interior edge midpoints
        let mesh = build_box_mesh(2, 2).unwrap();
        let sp = build_lagrange_space(&mesh, 2).unwrap();
        let int_v = mesh.vertex_boundary.iter().filter(|b| !**b).count();
        let int_e = mesh.face_boundary.iter().filter(|b| !**b).count();
        assert_eq!(sp.dim, int_v + int_e);
    }

    #[test]
    fn p3_dimension_3d() {
        let mesh = build_box_mesh(3, 1).unwrap();
        let sp = build_lagrange_space(&mesh, 3).unwrap();
        // all vertices are boundary on the unit cube; interior edge: the
        // body diagonal carries 2 nodes; interior faces carry 1 each; cells 0
        let int_f = mesh.face_boundary.iter().filter(|b| !**b).count();
        assert_eq!(sp.dim, 2 + int_f);
    }

    #[test]
    fn interpolation_reproduces_polynomial() {
        let mesh = build_box_mesh(2, 2).unwrap();
        let sp = build_lagrange_space(&mesh, 3).unwrap();
        // a cubic vanishing on the boundary of the unit square is
        // representable... use interior-node interpolation of a generic
        // cubic and compare values at interior points of each cell
        let f = |x: &nalgebra::Vector3<f64>| x[0] * x[0] * x[1] - 0.3 * x[1] * x[1];
        let u = sp.interpolate(&mesh, f);
        for t in 0..mesh.n_cells() {
            let carrier = cell_carrier(&mesh, t);
            let mono = sp.monomial_basis(&mesh, t);
            let coeffs = sp.local_monomial_coeffs(t, &u);
            let lam = [0.3, 0.45, 0.25];
            let x = carrier.physical(&lam);
            let mut val = 0.0;
            for (j, b) in mono.members.iter().enumerate() {
                val += coeffs[j] * b.value_scalar(&lam);
            }
            // interior cells with no boundary nodes reproduce the cubic
            if sp.cell_nodes[t].iter().all(|n| n.is_some()) {
                assert!((val - f(&x)).abs() < 1e-12);
            }
        }
    }
}
