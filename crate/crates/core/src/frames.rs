//! Geometric frames for mesh entities: global face normals with a
//! deterministic sign convention, per-cell outward normals and signs,
//! orthonormal face tangents, ridge conormals, diameters and measures.

use crate::basis::Carrier;
use crate::error::FemError;
use crate::mesh::SimplicialMesh;
use nalgebra::Vector3;

#[derive(Debug, Clone)]
pub struct EntityFrames {
    pub cell_volume: Vec<f64>,
    pub cell_diameter: Vec<f64>,
    pub cell_centroid: Vec<Vector3<f64>>,
    /// Global unit normal per face: points from the lower-cell-id side to
    /// the higher; outward on the boundary.
    pub face_normal: Vec<Vector3<f64>>,
    /// Orthonormal tangents per face (one used in 2D, two in 3D).
    pub face_tangents: Vec<[Vector3<f64>; 2]>,
    pub face_diameter: Vec<f64>,
    pub face_measure: Vec<f64>,
    pub face_centroid: Vec<Vector3<f64>>,
    /// s_{T,F} = n_F . n_{dT} per (cell, local face).
    pub cell_face_sign: Vec<Vec<f64>>,
    /// Ridge diameters h_e; in 2D (point ridges) the mean of h_T over the
    /// ridge patch.
    pub ridge_diameter: Vec<f64>,
    pub ridge_measure: Vec<f64>,
    pub ridge_centroid: Vec<Vector3<f64>>,
    /// Outward conormal n_{F,e} of ridge e within face F, per
    /// (face, local ridge); depends only on the face geometry.
    pub face_ridge_conormal: Vec<Vec<Vector3<f64>>>,
}

impl EntityFrames {
    /// Outward normal of face `f` with respect to cell `t`.
    pub fn outward_normal(&self, mesh: &SimplicialMesh, t: usize, local_face: usize) -> Vector3<f64> {
        let f = mesh.cell_faces[t][local_face];
        self.face_normal[f] * self.cell_face_sign[t][local_face]
    }
}

pub fn compute_frames(mesh: &SimplicialMesh) -> Result<EntityFrames, FemError> {
    let d = mesh.dim;
    let nt = mesh.n_cells();
    let mut cell_volume = Vec::with_capacity(nt);
    let mut cell_diameter = Vec::with_capacity(nt);
    let mut cell_centroid = Vec::with_capacity(nt);
    for (t, c) in mesh.cells.iter().enumerate() {
        let verts: Vec<Vector3<f64>> = c.iter().map(|&v| mesh.vertices[v]).collect();
        let carrier = Carrier::from_vertices(d, verts)
            .map_err(|_| FemError::DegenerateCell { cell: t, measure: 0.0 })?;
        cell_volume.push(carrier.measure);
        cell_diameter.push(carrier.diameter);
        cell_centroid.push(carrier.centroid);
    }

    let nf = mesh.n_faces();
    let mut face_normal = Vec::with_capacity(nf);
    let mut face_tangents = Vec::with_capacity(nf);
    let mut face_diameter = Vec::with_capacity(nf);
    let mut face_measure = Vec::with_capacity(nf);
    let mut face_centroid = Vec::with_capacity(nf);
    for (f, fv) in mesh.faces.iter().enumerate() {
        let verts: Vec<Vector3<f64>> = fv.iter().map(|&v| mesh.vertices[v]).collect();
        let centroid = verts.iter().sum::<Vector3<f64>>() / verts.len() as f64;
        let mut t1;
        let mut t2 = Vector3::zeros();
        let normal;
        if d == 2 {
            t1 = (verts[1] - verts[0]).normalize();
            normal = Vector3::new(t1[1], -t1[0], 0.0);
        } else {
            t1 = (verts[1] - verts[0]).normalize();
            let w = verts[2] - verts[0];
            t2 = (w - t1 * w.dot(&t1)).normalize();
            normal = t1.cross(&t2);
        }
        // orient away from the lowest incident cell
        let t_low = mesh.face_cells[f][0];
        let mut n = normal;
        if n.dot(&(centroid - cell_centroid[t_low])) < 0.0 {
            n = -n;
            if d == 2 {
                t1 = -t1;
            } else {
                t2 = -t2;
            }
        }
        let mut diameter = 0.0f64;
        for i in 0..verts.len() {
            for j in i + 1..verts.len() {
                diameter = diameter.max((verts[i] - verts[j]).norm());
            }
        }
        let measure = if d == 2 {
            (verts[1] - verts[0]).norm()
        } else {
            0.5 * (verts[1] - verts[0]).cross(&(verts[2] - verts[0])).norm()
        };
        face_normal.push(n);
        face_tangents.push([t1, t2]);
        face_diameter.push(diameter);
        face_measure.push(measure);
        face_centroid.push(centroid);
    }

    let mut cell_face_sign = Vec::with_capacity(nt);
    for t in 0..nt {
        let signs: Vec<f64> = mesh.cell_faces[t]
            .iter()
            .map(|&f| {
                let outward = face_centroid[f] - cell_centroid[t];
                if face_normal[f].dot(&outward) >= 0.0 {
                    1.0
                } else {
                    -1.0
                }
            })
            .collect();
        cell_face_sign.push(signs);
    }

    let ne = mesh.n_ridges();
    let mut ridge_diameter = vec![0.0; ne];
    let mut ridge_measure = vec![1.0; ne];
    let mut ridge_centroid = Vec::with_capacity(ne);
    for rv in &mesh.ridges {
        let verts: Vec<Vector3<f64>> = rv.iter().map(|&v| mesh.vertices[v]).collect();
        ridge_centroid.push(verts.iter().sum::<Vector3<f64>>() / verts.len() as f64);
    }
    if d == 3 {
        for (e, rv) in mesh.ridges.iter().enumerate() {
            let len = (mesh.vertices[rv[1]] - mesh.vertices[rv[0]]).norm();
            ridge_diameter[e] = len;
            ridge_measure[e] = len;
        }
    } else {
        // point ridges: h_e is the mean cell diameter over the patch
        for e in 0..ne {
            let patch = &mesh.ridge_cells[e];
            let mean = patch.iter().map(|&t| cell_diameter[t]).sum::<f64>() / patch.len() as f64;
            ridge_diameter[e] = mean;
            ridge_measure[e] = 1.0;
        }
    }

    // outward conormals per (face, local ridge)
    let mut face_ridge_conormal = Vec::with_capacity(nf);
    for f in 0..nf {
        let mut row = Vec::new();
        for &e in &mesh.face_ridges[f] {
            let m = face_centroid[f] - ridge_centroid[e];
            let mut w = m - face_normal[f] * m.dot(&face_normal[f]);
            if d == 3 {
                let te = (mesh.vertices[mesh.ridges[e][1]] - mesh.vertices[mesh.ridges[e][0]])
                    .normalize();
                w -= te * w.dot(&te);
            }
            row.push(-w.normalize());
        }
        face_ridge_conormal.push(row);
    }

    Ok(EntityFrames {
        cell_volume,
        cell_diameter,
        cell_centroid,
        face_normal,
        face_tangents,
        face_diameter,
        face_measure,
        face_centroid,
        cell_face_sign,
        ridge_diameter,
        ridge_measure,
        ridge_centroid,
        face_ridge_conormal,
    })
}

/// Carrier for a cell.
pub fn cell_carrier(mesh: &SimplicialMesh, t: usize) -> Carrier {
    let verts: Vec<Vector3<f64>> = mesh.cells[t].iter().map(|&v| mesh.vertices[v]).collect();
    Carrier::from_vertices(mesh.dim, verts).expect("cell carrier")
}

/// Carrier for a face.
pub fn face_carrier(mesh: &SimplicialMesh, f: usize) -> Carrier {
    let verts: Vec<Vector3<f64>> = mesh.faces[f].iter().map(|&v| mesh.vertices[v]).collect();
    Carrier::from_vertices(mesh.dim, verts).expect("face carrier")
}

/// Carrier for a ridge (a point carrier in 2D).
pub fn ridge_carrier(mesh: &SimplicialMesh, e: usize) -> Carrier {
    let verts: Vec<Vector3<f64>> = mesh.ridges[e].iter().map(|&v| mesh.vertices[v]).collect();
    Carrier::from_vertices(mesh.dim, verts).expect("ridge carrier")
}
