//! The conforming constrained subspace: global numbering sharing the face
//! normal-normal and tr2 moments (the latter against the global face normal,
//! entering local tables with the orientation sign), plus the linear
//! edge-jump constraints over every interior ridge patch.

use crate::element::{build_local_element, ElementFamily, EntityRef, LocalElement, TraceKind};
use crate::error::FemError;
use crate::frames::EntityFrames;
use crate::mesh::SimplicialMesh;
use crate::RANK_TOL;
use nalgebra::DMatrix;

/// Descriptor of the constrained space: global unknowns, per-cell maps, the
/// edge-jump constraint matrix and its nullspace.
pub struct ConformingSpace {
    pub family: ElementFamily,
    pub n_global: usize,
    /// Numerical rank of the edge-jump constraint matrix.
    pub constraint_rank: usize,
    /// dim = n_global - constraint_rank.
    pub dim: usize,
    /// Per cell: local DoF -> (global unknown, sign).
    pub cell_maps: Vec<Vec<(usize, f64)>>,
    pub elements: Vec<LocalElement>,
    /// Inverse DoF matrices for value -> coefficient maps.
    dof_inverses: Vec<DMatrix<f64>>,
    /// Basis of the constraint nullspace over the tr_e unknowns, paired with
    /// the index list of those unknowns.
    tre_unknowns: Vec<usize>,
    tre_nullspace: DMatrix<f64>,
    free_unknowns: Vec<usize>,
}

/// Build the constrained space for a trace-sharing family.
pub fn build_conforming_space(
    mesh: &SimplicialMesh,
    frames: &EntityFrames,
    family: ElementFamily,
) -> Result<ConformingSpace, FemError> {
    if matches!(family, ElementFamily::NcK2) {
        return Err(FemError::UnsupportedFamily(
            "the verification table does not define a conforming space".into(),
        ));
    }
    let elements: Vec<LocalElement> = (0..mesh.n_cells())
        .map(|t| build_local_element(family, mesh, frames, t))
        .collect::<Result<_, _>>()?;

    // global numbering: shared nn/tr2 per face, everything else per cell
    let nn_dim = elements[0]
        .dofs
        .iter()
        .filter(|d| {
            matches!(d.kind, TraceKind::FaceNn)
                && matches!(d.entity, EntityRef::Face { local: 0, .. })
        })
        .count();
    let tr2_dim = elements[0]
        .dofs
        .iter()
        .filter(|d| {
            matches!(d.kind, TraceKind::FaceTr2)
                && matches!(d.entity, EntityRef::Face { local: 0, .. })
        })
        .count();
    let nn_offset = 0usize;
    let tr2_offset = nn_offset + mesh.n_faces() * nn_dim;
    let mut next = tr2_offset + mesh.n_faces() * tr2_dim;

    let mut cell_maps: Vec<Vec<(usize, f64)>> = Vec::with_capacity(mesh.n_cells());
    let mut tre_unknowns: Vec<usize> = Vec::new();
    // (interior ridge, test index) -> constraint row; unknown list per row
    let mut ridge_rows: std::collections::HashMap<(usize, usize), Vec<usize>> =
        std::collections::HashMap::new();
    for (t, el) in elements.iter().enumerate() {
        let mut map = Vec::with_capacity(el.dofs.len());
        for dof in &el.dofs {
            match (dof.kind, &dof.entity) {
                (TraceKind::FaceNn, EntityRef::Face { global, .. }) => {
                    map.push((nn_offset + global * nn_dim + dof.test_index, 1.0));
                }
                (TraceKind::FaceTr2, EntityRef::Face { local, global }) => {
                    let s = frames.cell_face_sign[t][*local];
                    map.push((tr2_offset + global * tr2_dim + dof.test_index, s));
                }
                (TraceKind::RidgeTrE, EntityRef::Ridge { global, .. }) => {
                    let g = next;
                    next += 1;
                    tre_unknowns.push(g);
                    if !mesh.ridge_boundary[*global] {
                        ridge_rows
                            .entry((*global, dof.test_index))
                            .or_default()
                            .push(g);
                    }
                    map.push((g, 1.0));
                }
                _ => {
                    let g = next;
                    next += 1;
                    map.push((g, 1.0));
                }
            }
        }
        cell_maps.push(map);
    }
    let n_global = next;

    // constraint matrix over the tr_e unknowns: one row per (interior
    // ridge, test index), entries 1 on every patch member
    let mut tre_slot = vec![usize::MAX; n_global];
    for (s, &g) in tre_unknowns.iter().enumerate() {
        tre_slot[g] = s;
    }
    let mut row_keys: Vec<(usize, usize)> = ridge_rows.keys().cloned().collect();
    row_keys.sort_unstable();
    let mut c = DMatrix::<f64>::zeros(row_keys.len().max(1), tre_unknowns.len().max(1));
    for (r, key) in row_keys.iter().enumerate() {
        for &g in &ridge_rows[key] {
            c[(r, tre_slot[g])] = 1.0;
        }
    }
    let (constraint_rank, tre_nullspace) = if row_keys.is_empty() {
        (0, DMatrix::identity(tre_unknowns.len(), tre_unknowns.len()))
    } else {
        nullspace_of(&c)
    };
    let dim = n_global - constraint_rank;

    let dof_inverses: Vec<DMatrix<f64>> = elements
        .iter()
        .map(|el| {
            el.dof_matrix()
                .try_inverse()
                .expect("unisolvent DoF matrix")
        })
        .collect();

    let free_unknowns: Vec<usize> = (0..n_global).filter(|&g| tre_slot[g] == usize::MAX).collect();

    Ok(ConformingSpace {
        family,
        n_global,
        constraint_rank,
        dim,
        cell_maps,
        elements,
        dof_inverses,
        tre_unknowns,
        tre_nullspace,
        free_unknowns,
    })
}

fn nullspace_of(c: &DMatrix<f64>) -> (usize, DMatrix<f64>) {
    let (nr, nc) = c.shape();
    let mut padded = DMatrix::zeros(nr.max(nc), nc);
    padded.view_mut((0, 0), (nr, nc)).copy_from(c);
    let svd = padded.clone().svd(false, true);
    let vt = svd.v_t.unwrap();
    let smax = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|s| **s > RANK_TOL * smax)
        .count();
    let mut null = DMatrix::zeros(nc, nc - rank);
    for (col, r) in (rank..nc).enumerate() {
        for j in 0..nc {
            null[(j, col)] = vt[(r, j)];
        }
    }
    (rank, null)
}

impl ConformingSpace {
    /// Dimension of the nullspace basis over the tr_e unknowns.
    pub fn tre_nullity(&self) -> usize {
        self.tre_nullspace.ncols()
    }

    /// Expand a member given by free-unknown coefficients and tr_e-nullspace
    /// coefficients into the full global unknown vector.
    pub fn member_global(&self, free: &[f64], tre_null: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.n_global];
        for (i, &u) in self.free_unknowns.iter().enumerate() {
            g[u] = free[i];
        }
        for (s, &u) in self.tre_unknowns.iter().enumerate() {
            let mut acc = 0.0;
            for c in 0..self.tre_nullspace.ncols() {
                acc += self.tre_nullspace[(s, c)] * tre_null[c];
            }
            g[u] = acc;
        }
        g
    }

    pub fn n_free(&self) -> usize {
        self.free_unknowns.len()
    }

    /// Per-cell shape coefficients of the member with global unknowns `g`.
    pub fn member_cell_coeffs(&self, g: &[f64]) -> Vec<Vec<f64>> {
        self.cell_maps
            .iter()
            .zip(&self.dof_inverses)
            .map(|(map, inv)| {
                let mut vals = nalgebra::DVector::zeros(map.len());
                for (i, &(u, s)) in map.iter().enumerate() {
                    vals[i] = s * g[u];
                }
                let coeffs = inv * vals;
                coeffs.as_slice().to_vec()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames::compute_frames;
    use crate::mesh::build_box_mesh;

    #[test]
    fn onepp_conforming_dimensions_2d() {
        let mesh = build_box_mesh(2, 1).unwrap();
        let frames = compute_frames(&mesh).unwrap();
        let sp = build_conforming_space(&mesh, &frames, ElementFamily::OnePp).unwrap();
        // 2 cells x 15 DoFs, 5 faces sharing (2 + 2), interior vertices: 0
        assert_eq!(sp.n_global, 5 * 4 + 2 * 3 * 1);
        assert_eq!(sp.constraint_rank, 0);
        assert_eq!(sp.dim, sp.n_global);
    }

    #[test]
    fn new3_dimension_formula_6tet() {
        let mesh = build_box_mesh(3, 1).unwrap();
        let frames = compute_frames(&mesh).unwrap();
        let sp = build_conforming_space(&mesh, &frames, ElementFamily::New(3)).unwrap();
        let k = 3usize;
        let nt = mesh.n_cells();
        let nf = mesh.n_faces();
        let ne_int = mesh
            .ridge_boundary
            .iter()
            .filter(|b| !**b)
            .count();
        let expect =
            (k + 1) * (k * k + k + 2) * nt + (k + 1) * (k + 1) * nf - (k + 1) * ne_int;
        assert_eq!(sp.dim, expect);
    }
}
