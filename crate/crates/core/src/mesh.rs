//! Conforming simplicial triangulations of the unit box in d = 2, 3 with
//! full entity topology: cells, faces (codimension 1), ridges (codimension
//! 2; vertices in 2D), incidences, boundary flags and ridge patches.
//!
//! Entity vertex tuples are stored sorted ascending and globally
//! deduplicated; the cell-local vertex order v0 < ... < vd fixes the ordered
//! faces F_i (opposite v_i) and the sub-simplices used by the degree tables.

use crate::error::FemError;
use nalgebra::Vector3;
use std::collections::HashMap;
use std::io::Write;

#[derive(Debug, Clone)]
pub struct SimplicialMesh {
    pub dim: usize,
    pub vertices: Vec<Vector3<f64>>,
    /// Sorted (d+1)-tuples of vertex ids.
    pub cells: Vec<Vec<usize>>,
    /// Parity bit: true if the sorted tuple needs its last two vertices
    /// swapped for a positive Jacobian.
    pub cell_parity: Vec<bool>,
    /// Sorted d-tuples.
    pub faces: Vec<Vec<usize>>,
    /// Sorted (d-1)-tuples (vertices when d = 2).
    pub ridges: Vec<Vec<usize>>,
    /// Per cell, face ids ordered so entry i is opposite local vertex i.
    pub cell_faces: Vec<Vec<usize>>,
    /// Per cell, ridge ids ordered by the lexicographic local vertex subsets.
    pub cell_ridges: Vec<Vec<usize>>,
    /// Per face, ridge ids ordered so entry i is opposite local vertex i
    /// (single entries in 2D are the endpoints, entry i opposite endpoint i).
    pub face_ridges: Vec<Vec<usize>>,
    /// Incident cells per face (1 or 2, ascending).
    pub face_cells: Vec<Vec<usize>>,
    pub face_boundary: Vec<bool>,
    pub ridge_boundary: Vec<bool>,
    /// Ridge patches: all cells containing the ridge.
    pub ridge_cells: Vec<Vec<usize>>,
    pub vertex_boundary: Vec<bool>,
}

impl SimplicialMesh {
    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn n_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn n_ridges(&self) -> usize {
        self.ridges.len()
    }

    /// Cells containing ridge `e`.
    pub fn ridge_patch(&self, e: usize) -> Result<&[usize], FemError> {
        self.ridge_cells
            .get(e)
            .map(|v| v.as_slice())
            .ok_or(FemError::OutOfRange {
                what: "ridge",
                index: e,
                len: self.ridges.len(),
            })
    }

    /// Number of edges (1-dimensional entities): ridges in 3D, faces in 2D.
    pub fn n_edges(&self) -> usize {
        match self.dim {
            2 => self.faces.len(),
            _ => self.ridges.len(),
        }
    }

    /// Plain-text dump: one `v x y [z]` line per vertex and one
    /// `c i0 i1 ... id` line per cell.
    pub fn dump<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for v in &self.vertices {
            if self.dim == 2 {
                writeln!(w, "v {:.17e} {:.17e}", v[0], v[1])?;
            } else {
                writeln!(w, "v {:.17e} {:.17e} {:.17e}", v[0], v[1], v[2])?;
            }
        }
        for c in &self.cells {
            let ids: Vec<String> = c.iter().map(|i| i.to_string()).collect();
            writeln!(w, "c {}", ids.join(" "))?;
        }
        Ok(())
    }
}

/// Build a conforming triangulation of the unit box with `n` cells per axis:
/// 2n^2 triangles (every square cut along the same diagonal) or 6n^3 Kuhn
/// tetrahedra.
pub fn build_box_mesh(dim: usize, n: usize) -> Result<SimplicialMesh, FemError> {
    if !(dim == 2 || dim == 3) {
        return Err(FemError::UnsupportedDimension(dim));
    }
    assert!(n >= 1, "need at least one cell per axis");
    let h = 1.0 / n as f64;
    let mut vertices = Vec::new();
    let mut cells: Vec<Vec<usize>> = Vec::new();
    if dim == 2 {
        let vid = |i: usize, j: usize| j * (n + 1) + i;
        for j in 0..=n {
            for i in 0..=n {
                vertices.push(Vector3::new(i as f64 * h, j as f64 * h, 0.0));
            }
        }
        for j in 0..n {
            for i in 0..n {
                let (a, b, c, d) = (vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1));
                cells.push(vec![a, b, c]);
                cells.push(vec![a, c, d]);
            }
        }
    } else {
        let vid = |i: usize, j: usize, k: usize| (k * (n + 1) + j) * (n + 1) + i;
        for k in 0..=n {
            for j in 0..=n {
                for i in 0..=n {
                    vertices.push(Vector3::new(i as f64 * h, j as f64 * h, k as f64 * h));
                }
            }
        }
        // Kuhn subdivision: six tetrahedra per cube along vertex-ordered paths
        let perms: [[usize; 3]; 6] = [
            [0, 1, 2],
            [0, 2, 1],
            [1, 0, 2],
            [1, 2, 0],
            [2, 0, 1],
            [2, 1, 0],
        ];
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    let base = [i, j, k];
                    for perm in &perms {
                        let mut p = base;
                        let mut ids = vec![vid(p[0], p[1], p[2])];
                        for &axis in perm {
                            p[axis] += 1;
                            ids.push(vid(p[0], p[1], p[2]));
                        }
                        cells.push(ids);
                    }
                }
            }
        }
    }
    for c in &mut cells {
        c.sort_unstable();
    }
    from_cells(dim, vertices, cells)
}

/// Assemble topology from sorted cell tuples.
pub fn from_cells(
    dim: usize,
    vertices: Vec<Vector3<f64>>,
    cells: Vec<Vec<usize>>,
) -> Result<SimplicialMesh, FemError> {
    let d = dim;
    // orientation parity from the signed volume of the sorted tuple
    let mut cell_parity = Vec::with_capacity(cells.len());
    for (t, c) in cells.iter().enumerate() {
        let vol = signed_volume(d, &vertices, c);
        if vol.abs() < 1e-14 {
            return Err(FemError::DegenerateCell {
                cell: t,
                measure: vol,
            });
        }
        cell_parity.push(vol < 0.0);
    }

    // faces: omit one vertex per cell
    let mut face_index: HashMap<Vec<usize>, usize> = HashMap::new();
    let mut faces: Vec<Vec<usize>> = Vec::new();
    let mut face_cells: Vec<Vec<usize>> = Vec::new();
    let mut cell_faces: Vec<Vec<usize>> = Vec::new();
    for (t, c) in cells.iter().enumerate() {
        let mut ids = Vec::with_capacity(d + 1);
        for skip in 0..=d {
            let f: Vec<usize> = c
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != skip)
                .map(|(_, &v)| v)
                .collect();
            let id = *face_index.entry(f.clone()).or_insert_with(|| {
                faces.push(f);
                face_cells.push(Vec::new());
                faces.len() - 1
            });
            face_cells[id].push(t);
            ids.push(id);
        }
        cell_faces.push(ids);
    }
    for fc in &mut face_cells {
        fc.sort_unstable();
    }
    let face_boundary: Vec<bool> = face_cells.iter().map(|fc| fc.len() == 1).collect();
    for (f, fc) in face_cells.iter().enumerate() {
        if fc.len() > 2 {
            return Err(FemError::Incompatibility(format!(
                "face {f} shared by {} cells",
                fc.len()
            )));
        }
    }

    // ridges: (d-1)-subsets of cells
    let mut ridge_index: HashMap<Vec<usize>, usize> = HashMap::new();
    let mut ridges: Vec<Vec<usize>> = Vec::new();
    let mut ridge_cells: Vec<Vec<usize>> = Vec::new();
    let mut cell_ridges: Vec<Vec<usize>> = Vec::new();
    for (t, c) in cells.iter().enumerate() {
        let mut ids = Vec::new();
        for subset in k_subsets(c, d - 1) {
            let id = *ridge_index.entry(subset.clone()).or_insert_with(|| {
                ridges.push(subset);
                ridge_cells.push(Vec::new());
                ridges.len() - 1
            });
            ridge_cells[id].push(t);
            ids.push(id);
        }
        cell_ridges.push(ids);
    }
    for rc in &mut ridge_cells {
        rc.sort_unstable();
        rc.dedup();
    }

    // face -> ridge incidence, entry i opposite local face vertex i
    let mut face_ridges: Vec<Vec<usize>> = Vec::with_capacity(faces.len());
    for f in &faces {
        let mut ids = Vec::with_capacity(d);
        for skip in 0..d {
            let r: Vec<usize> = f
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != skip)
                .map(|(_, &v)| v)
                .collect();
            ids.push(ridge_index[&r]);
        }
        face_ridges.push(ids);
    }

    // ridge boundary: contained in some boundary face
    let mut ridge_boundary = vec![false; ridges.len()];
    for (f, fr) in face_ridges.iter().enumerate() {
        if face_boundary[f] {
            for &r in fr {
                ridge_boundary[r] = true;
            }
        }
    }
    let mut vertex_boundary = vec![false; vertices.len()];
    for (f, fb) in face_boundary.iter().enumerate() {
        if *fb {
            for &v in &faces[f] {
                vertex_boundary[v] = true;
            }
        }
    }

    Ok(SimplicialMesh {
        dim,
        vertices,
        cells,
        cell_parity,
        faces,
        ridges,
        cell_faces,
        cell_ridges,
        face_ridges,
        face_cells,
        face_boundary,
        ridge_boundary,
        ridge_cells,
        vertex_boundary,
    })
}

fn signed_volume(d: usize, vertices: &[Vector3<f64>], cell: &[usize]) -> f64 {
    let v0 = vertices[cell[0]];
    if d == 2 {
        let a = vertices[cell[1]] - v0;
        let b = vertices[cell[2]] - v0;
        0.5 * (a[0] * b[1] - a[1] * b[0])
    } else {
        let a = vertices[cell[1]] - v0;
        let b = vertices[cell[2]] - v0;
        let c = vertices[cell[3]] - v0;
        a.dot(&b.cross(&c)) / 6.0
    }
}

/// All k-element sorted subsets of a sorted slice, lexicographic.
pub fn k_subsets(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let n = items.len();
    let mut idx: Vec<usize> = (0..k).collect();
    if k == 0 || k > n {
        return out;
    }
    loop {
        out.push(idx.iter().map(|&i| items[i]).collect());
        // advance
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
            if i == 0 {
                return out;
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_square_split() {
        let m = build_box_mesh(2, 1).unwrap();
        assert_eq!(m.n_cells(), 2);
        assert_eq!(m.n_faces(), 5);
        assert_eq!(m.vertices.len(), 4);
        assert_eq!(m.face_boundary.iter().filter(|b| !**b).count(), 1);
        assert_eq!(m.ridge_boundary.iter().filter(|b| !**b).count(), 0);
    }

    #[test]
    fn two_by_two_square() {
        let m = build_box_mesh(2, 2).unwrap();
        assert_eq!(m.n_cells(), 8);
        assert_eq!(m.n_faces(), 16);
        assert_eq!(m.vertices.len(), 9);
        // Euler relation |V| - |E| + |T| = 1
        assert_eq!(
            m.vertices.len() as i64 - m.n_faces() as i64 + m.n_cells() as i64,
            1
        );
        // the center vertex sits in 6 triangles
        let center = m
            .vertices
            .iter()
            .position(|v| (v[0] - 0.5).abs() < 1e-14 && (v[1] - 0.5).abs() < 1e-14)
            .unwrap();
        let ridge = m.ridges.iter().position(|r| r == &vec![center]).unwrap();
        assert_eq!(m.ridge_patch(ridge).unwrap().len(), 6);
        assert!(!m.ridge_boundary[ridge]);
    }

    #[test]
    fn kuhn_cube() {
        let m = build_box_mesh(3, 1).unwrap();
        assert_eq!(m.n_cells(), 6);
        // Euler |V| - |E| + |F| - |T| = 1
        let euler = m.vertices.len() as i64 - m.n_ridges() as i64 + m.n_faces() as i64
            - m.n_cells() as i64;
        assert_eq!(euler, 1);
        assert_eq!(m.vertices.len(), 8);
        assert_eq!(m.n_ridges(), 19);
        assert_eq!(m.n_faces(), 18);
        // only the body diagonal is interior
        assert_eq!(m.ridge_boundary.iter().filter(|b| !**b).count(), 1);
    }

    #[test]
    fn interior_faces_have_two_cells() {
        let m = build_box_mesh(3, 2).unwrap();
        for (f, fc) in m.face_cells.iter().enumerate() {
            if m.face_boundary[f] {
                assert_eq!(fc.len(), 1);
            } else {
                assert_eq!(fc.len(), 2);
            }
        }
    }

    #[test]
    fn boundary_ridge_patch_nonempty() {
        let m = build_box_mesh(2, 2).unwrap();
        for e in 0..m.n_ridges() {
            assert!(!m.ridge_patch(e).unwrap().is_empty());
        }
        assert!(m.ridge_patch(10_000).is_err());
    }

    #[test]
    fn rejects_bad_dimension() {
        assert!(matches!(
            build_box_mesh(4, 1),
            Err(FemError::UnsupportedDimension(4))
        ));
    }

    #[test]
    fn dump_roundtrip_format() {
        let m = build_box_mesh(2, 1).unwrap();
        let mut buf = Vec::new();
        m.dump(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4 + 2);
        assert!(text.lines().next().unwrap().starts_with("v "));
        assert!(text.ends_with('\n'));
    }
}
