//! Global broken stress spaces, facet/ridge multiplier spaces, the weighted
//! inner product, and projections.
//!
//! A multiplier function u = (u_0, u_b, u_n, u_e) collects the cell block
//! (degree r), the face block for tr2 (degree k-1), the face block for the
//! normal derivative (degree k, stored against the global face normal n_F),
//! and the ridge block (degree k). Blocks with a negative degree are absent.

mod conforming;
mod weak;

pub use conforming::{build_conforming_space, ConformingSpace};
pub use weak::{
    assemble_weak_divdiv, assemble_weak_hessian, stress_l2_norm, wg_stiffness, CellStressTables,
    WeakOps, WgAssembly,
};

use crate::basis::{make_basis, Carrier, PolyField, SpaceId, TensorPolyBasis};
use crate::error::FemError;
use crate::frames::{cell_carrier, face_carrier, ridge_carrier, EntityFrames};
use crate::mesh::SimplicialMesh;
use crate::morley::mwx_reconstruct;
use crate::par;
use crate::poly::Poly;
use crate::quadrature::{factorial, simplex_quadrature, QuadratureRule};
use crate::sparse::SparseOperator;
use nalgebra::{DMatrix, DVector, Vector3};

/// Scalar fields with optional gradients, for projections and loads.
pub trait ScalarField: Sync {
    fn value(&self, x: &Vector3<f64>) -> f64;
    fn gradient(&self, _x: &Vector3<f64>) -> Option<Vector3<f64>> {
        None
    }
}

/// The stress shape space paired with (k, r). The lowest-order scheme pair
/// is (k, r) = (1, 1) with the enriched space whose traces are all linear;
/// (1, -1) and (1, 0) select the plain and the single-enrichment spaces used
/// by the rank checks.
pub fn stress_space_id(k: usize, r: i64) -> Result<SpaceId, FemError> {
    if k == 0 {
        return Ok(SpaceId::PkSym(0));
    }
    if k == 1 {
        return match r {
            1 => Ok(SpaceId::Sigma1PP),
            0 => Ok(SpaceId::SigmaKPlus(1)),
            -1 => Ok(SpaceId::PkSym(1)),
            _ => Err(FemError::Incompatibility(format!(
                "no stress space for k = 1, r = {r}"
            ))),
        };
    }
    if r == k as i64 - 2 {
        Ok(SpaceId::PkSym(k))
    } else if r == k as i64 - 1 {
        Ok(SpaceId::SigmaKPlus(k))
    } else {
        Err(FemError::Incompatibility(format!(
            "no stress space for k = {k}, r = {r}"
        )))
    }
}

/// Face u_b block degree for a pair (k, r): k - 1 except for the enriched
/// lowest-order pair whose tr2 trace is linear.
pub fn face_b_degree(k: usize, r: i64) -> i64 {
    if k == 1 && r == 1 {
        1
    } else {
        k as i64 - 1
    }
}

/// Fully discontinuous stress space: one shape basis per cell.
pub struct BrokenStressSpace {
    pub k: usize,
    pub r: i64,
    pub space: SpaceId,
    pub cell_basis: Vec<TensorPolyBasis>,
    pub offsets: Vec<usize>,
    pub dim: usize,
}

pub fn build_broken_stress(
    mesh: &SimplicialMesh,
    k: usize,
    r: i64,
) -> Result<BrokenStressSpace, FemError> {
    let space = stress_space_id(k, r)?;
    let bases = par::map_indexed(mesh.n_cells(), |t| {
        let carrier = cell_carrier(mesh, t);
        make_basis(space, &carrier).expect("cell shape basis")
    });
    let mut offsets = Vec::with_capacity(mesh.n_cells() + 1);
    let mut dim = 0;
    for b in &bases {
        offsets.push(dim);
        dim += b.dim();
    }
    offsets.push(dim);
    Ok(BrokenStressSpace {
        k,
        r,
        space,
        cell_basis: bases,
        offsets,
        dim,
    })
}

impl BrokenStressSpace {
    pub fn cell_range(&self, t: usize) -> std::ops::Range<usize> {
        self.offsets[t]..self.offsets[t + 1]
    }
}

/// Broken multiplier space M (all faces/ridges) or its interior variant.
pub struct MultiplierSpace {
    pub k: usize,
    pub r: i64,
    pub interior_only: bool,
    pub cell_dim: usize,
    pub face_b_dim: usize,
    pub face_n_dim: usize,
    pub ridge_dim: usize,
    pub active_faces: Vec<usize>,
    pub face_slot: Vec<Option<usize>>,
    pub active_ridges: Vec<usize>,
    pub ridge_slot: Vec<Option<usize>>,
    pub face_b_offset: usize,
    pub face_n_offset: usize,
    pub ridge_offset: usize,
    pub dim: usize,
    pub cell_basis: Vec<TensorPolyBasis>,
    pub face_b_basis: Vec<TensorPolyBasis>,
    pub face_n_basis: Vec<TensorPolyBasis>,
    pub ridge_basis: Vec<TensorPolyBasis>,
}

pub fn build_multiplier_space(
    mesh: &SimplicialMesh,
    k: usize,
    r: i64,
    interior_only: bool,
) -> Result<MultiplierSpace, FemError> {
    let active_faces: Vec<usize> = (0..mesh.n_faces())
        .filter(|&f| !interior_only || !mesh.face_boundary[f])
        .collect();
    let mut face_slot = vec![None; mesh.n_faces()];
    for (s, &f) in active_faces.iter().enumerate() {
        face_slot[f] = Some(s);
    }
    let active_ridges: Vec<usize> = (0..mesh.n_ridges())
        .filter(|&e| !interior_only || !mesh.ridge_boundary[e])
        .collect();
    let mut ridge_slot = vec![None; mesh.n_ridges()];
    for (s, &e) in active_ridges.iter().enumerate() {
        ridge_slot[e] = Some(s);
    }

    let cell_basis: Vec<TensorPolyBasis> = if r >= 0 {
        par::map_indexed(mesh.n_cells(), |t| {
            let carrier = cell_carrier(mesh, t);
            make_basis(SpaceId::PkScalar(r as usize), &carrier).expect("cell block basis")
        })
    } else {
        Vec::new()
    };
    let fb_degree = face_b_degree(k, r);
    let face_b_basis: Vec<TensorPolyBasis> = if fb_degree >= 0 {
        active_faces
            .iter()
            .map(|&f| {
                let carrier = face_carrier(mesh, f);
                make_basis(SpaceId::PkScalar(fb_degree as usize), &carrier).expect("face b basis")
            })
            .collect()
    } else {
        Vec::new()
    };
    let face_n_basis: Vec<TensorPolyBasis> = active_faces
        .iter()
        .map(|&f| {
            let carrier = face_carrier(mesh, f);
            make_basis(SpaceId::PkScalar(k), &carrier).expect("face n basis")
        })
        .collect();
    let ridge_basis: Vec<TensorPolyBasis> = active_ridges
        .iter()
        .map(|&e| {
            let carrier = ridge_carrier(mesh, e);
            make_basis(SpaceId::PkScalar(k), &carrier).expect("ridge basis")
        })
        .collect();

    let cell_dim = cell_basis.first().map(|b| b.dim()).unwrap_or(0);
    let face_b_dim = face_b_basis.first().map(|b| b.dim()).unwrap_or(0);
    let face_n_dim = face_n_basis.first().map(|b| b.dim()).unwrap_or(0);
    let ridge_dim = ridge_basis.first().map(|b| b.dim()).unwrap_or(0);

    let face_b_offset = mesh.n_cells() * cell_dim;
    let face_n_offset = face_b_offset + active_faces.len() * face_b_dim;
    let ridge_offset = face_n_offset + active_faces.len() * face_n_dim;
    let dim = ridge_offset + active_ridges.len() * ridge_dim;

    Ok(MultiplierSpace {
        k,
        r,
        interior_only,
        cell_dim,
        face_b_dim,
        face_n_dim,
        ridge_dim,
        active_faces,
        face_slot,
        active_ridges,
        ridge_slot,
        face_b_offset,
        face_n_offset,
        ridge_offset,
        dim,
        cell_basis,
        face_b_basis,
        face_n_basis,
        ridge_basis,
    })
}

impl MultiplierSpace {
    pub fn cell_index(&self, t: usize, i: usize) -> usize {
        t * self.cell_dim + i
    }

    pub fn face_b_index(&self, slot: usize, i: usize) -> usize {
        self.face_b_offset + slot * self.face_b_dim + i
    }

    pub fn face_n_index(&self, slot: usize, i: usize) -> usize {
        self.face_n_offset + slot * self.face_n_dim + i
    }

    pub fn ridge_index(&self, slot: usize, i: usize) -> usize {
        self.ridge_offset + slot * self.ridge_dim + i
    }

    /// Block-diagonal weighted Gram of the mesh-dependent inner product:
    /// cells weight 1, u_b weight h_F, u_n weight h_F^3, u_e weight h_e^2.
    pub fn weighted_inner_product(&self, frames: &EntityFrames) -> SparseOperator {
        let mut w = SparseOperator::new(self.dim, self.dim);
        w.symmetric = true;
        for (t, b) in self.cell_basis.iter().enumerate() {
            let g = b.gram();
            for i in 0..b.dim() {
                for j in 0..b.dim() {
                    w.push(self.cell_index(t, i), self.cell_index(t, j), g[(i, j)]);
                }
            }
        }
        for (slot, &f) in self.active_faces.iter().enumerate() {
            let hf = frames.face_diameter[f];
            if self.face_b_dim > 0 {
                let g = self.face_b_basis[slot].gram();
                for i in 0..self.face_b_dim {
                    for j in 0..self.face_b_dim {
                        w.push(
                            self.face_b_index(slot, i),
                            self.face_b_index(slot, j),
                            hf * g[(i, j)],
                        );
                    }
                }
            }
            let g = self.face_n_basis[slot].gram();
            for i in 0..self.face_n_dim {
                for j in 0..self.face_n_dim {
                    w.push(
                        self.face_n_index(slot, i),
                        self.face_n_index(slot, j),
                        hf.powi(3) * g[(i, j)],
                    );
                }
            }
        }
        for (slot, &e) in self.active_ridges.iter().enumerate() {
            let he = frames.ridge_diameter[e];
            let g = self.ridge_basis[slot].gram();
            for i in 0..self.ridge_dim {
                for j in 0..self.ridge_dim {
                    w.push(
                        self.ridge_index(slot, i),
                        self.ridge_index(slot, j),
                        he * he * g[(i, j)],
                    );
                }
            }
        }
        w
    }

    /// ||v||_{0,h}^2 for a coefficient vector.
    pub fn weighted_norm_sq(&self, frames: &EntityFrames, v: &[f64]) -> f64 {
        let w = self.weighted_inner_product(frames);
        let mut acc = 0.0;
        for &(i, j, a) in &w.entries {
            acc += v[i] * a * v[j];
        }
        acc
    }

    /// Local-to-global map for the multiplier unknowns touching cell `t`:
    /// (global index, kind) in the order cell block, per-face b, per-face n,
    /// per-ridge, skipping inactive entities.
    pub fn cell_local_map(&self, mesh: &SimplicialMesh, t: usize) -> Vec<LocalMraker> {
        let mut out = Vec::new();
        for i in 0..self.cell_dim {
            out.push(LocalMraker {
                global: self.cell_index(t, i),
                kind: LocalKind::Cell { test: i },
            });
        }
        for (lf, &f) in mesh.cell_faces[t].iter().enumerate() {
            if let Some(slot) = self.face_slot[f] {
                for i in 0..self.face_b_dim {
                    out.push(LocalMraker {
                        global: self.face_b_index(slot, i),
                        kind: LocalKind::FaceB {
                            local_face: lf,
                            slot,
                            test: i,
                        },
                    });
                }
            }
        }
        for (lf, &f) in mesh.cell_faces[t].iter().enumerate() {
            if let Some(slot) = self.face_slot[f] {
                for i in 0..self.face_n_dim {
                    out.push(LocalMraker {
                        global: self.face_n_index(slot, i),
                        kind: LocalKind::FaceN {
                            local_face: lf,
                            slot,
                            test: i,
                        },
                    });
                }
            }
        }
        for (le, &e) in mesh.cell_ridges[t].iter().enumerate() {
            if let Some(slot) = self.ridge_slot[e] {
                for i in 0..self.ridge_dim {
                    out.push(LocalMraker {
                        global: self.ridge_index(slot, i),
                        kind: LocalKind::Ridge {
                            local_ridge: le,
                            slot,
                            test: i,
                        },
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub enum LocalKind {
    Cell { test: usize },
    FaceB { local_face: usize, slot: usize, test: usize },
    FaceN { local_face: usize, slot: usize, test: usize },
    Ridge { local_ridge: usize, slot: usize, test: usize },
}

#[derive(Debug, Clone, Copy)]
pub struct LocalMraker {
    pub global: usize,
    pub kind: LocalKind,
}

/// Multiplier coefficient vector.
#[derive(Debug, Clone)]
pub struct MultiplierVector(pub Vec<f64>);

/// Blockwise L2 projection Q_M of a scalar field (the u_n block projects the
/// n_F-referenced normal derivative and requires a gradient).
pub fn project_qm(
    space: &MultiplierSpace,
    frames: &EntityFrames,
    field: &dyn ScalarField,
    quad_degree: usize,
) -> Result<Vec<f64>, FemError> {
    let mut out = vec![0.0; space.dim];
    // cell block
    for (t, basis) in space.cell_basis.iter().enumerate() {
        let coeffs = project_scalar_on(basis, |x| field.value(x), quad_degree)?;
        for (i, c) in coeffs.iter().enumerate() {
            out[space.cell_index(t, i)] = *c;
        }
    }
    for (slot, &f) in space.active_faces.iter().enumerate() {
        if space.face_b_dim > 0 {
            let coeffs =
                project_scalar_on(&space.face_b_basis[slot], |x| field.value(x), quad_degree)?;
            for (i, c) in coeffs.iter().enumerate() {
                out[space.face_b_index(slot, i)] = *c;
            }
        }
        let nf = frames.face_normal[f];
        let coeffs = project_scalar_on(
            &space.face_n_basis[slot],
            |x| {
                field
                    .gradient(x)
                    .map(|g| g.dot(&nf))
                    .unwrap_or(f64::NAN)
            },
            quad_degree,
        )?;
        if coeffs.iter().any(|c| c.is_nan()) {
            return Err(FemError::MissingDerivative("u_n block projection"));
        }
        for (i, c) in coeffs.iter().enumerate() {
            out[space.face_n_index(slot, i)] = *c;
        }
    }
    for (slot, _) in space.active_ridges.iter().enumerate() {
        let coeffs =
            project_scalar_on(&space.ridge_basis[slot], |x| field.value(x), quad_degree)?;
        for (i, c) in coeffs.iter().enumerate() {
            out[space.ridge_index(slot, i)] = *c;
        }
    }
    Ok(out)
}

/// L2 projection of a pointwise function onto a scalar basis on its carrier.
pub fn project_scalar_on<F: Fn(&Vector3<f64>) -> f64>(
    basis: &TensorPolyBasis,
    f: F,
    quad_degree: usize,
) -> Result<Vec<f64>, FemError> {
    let carrier = &basis.carrier;
    let m = carrier.dim_intrinsic;
    let rule = simplex_quadrature(m, quad_degree)?;
    let scale = carrier.measure * factorial(m);
    let mut rhs = DVector::zeros(basis.dim());
    for (p, w) in rule.points.iter().zip(&rule.weights) {
        let x = carrier.physical(p);
        let fv = f(&x);
        for (i, b) in basis.members.iter().enumerate() {
            rhs[i] += w * scale * fv * b.value_scalar(p);
        }
    }
    let g = basis.gram();
    let sol = g
        .lu()
        .solve(&rhs)
        .ok_or_else(|| FemError::SolverFailure("singular block Gram".into()))?;
    Ok(sol.as_slice().to_vec())
}

/// L2 projection of a symmetric tensor field onto the broken stress space.
pub fn project_qsigma(
    space: &BrokenStressSpace,
    field: &(dyn crate::element::SymField + Sync),
    quad_degree: usize,
) -> Result<Vec<f64>, FemError> {
    let mut out = vec![0.0; space.dim];
    for (t, basis) in space.cell_basis.iter().enumerate() {
        let carrier = &basis.carrier;
        let m = carrier.dim_intrinsic;
        let rule = simplex_quadrature(m, quad_degree)?;
        let scale = carrier.measure * factorial(m);
        let mut rhs = DVector::zeros(basis.dim());
        for (p, w) in rule.points.iter().zip(&rule.weights) {
            let x = carrier.physical(p);
            let tau = field.value(&x);
            for (i, b) in basis.members.iter().enumerate() {
                let bv = b.value_sym(p);
                let frob: f64 = (0..3)
                    .flat_map(|a| (0..3).map(move |c| (a, c)))
                    .map(|(a, c)| tau[(a, c)] * bv[(a, c)])
                    .sum();
                rhs[i] += w * scale * frob;
            }
        }
        let g = basis.gram();
        let sol = g
            .lu()
            .solve(&rhs)
            .ok_or_else(|| FemError::SolverFailure("singular stress Gram".into()))?;
        for (i, c) in sol.iter().enumerate() {
            out[space.offsets[t] + i] = *c;
        }
    }
    Ok(out)
}

/// Nonconforming-linear interpolant per cell: v^CR in P_1(T) matching the
/// face averages of the u_b block (k >= 1) or of the local quadratic
/// reconstructed from (u_n, u_e) when k = 0.
pub fn cr_interpolate(
    space: &MultiplierSpace,
    mesh: &SimplicialMesh,
    frames: &EntityFrames,
    v: &[f64],
) -> Vec<PolyField> {
    let d = mesh.dim;
    par::map_indexed(mesh.n_cells(), |t| {
        let mut rhs = vec![0.0f64; d + 1];
        if space.k >= 1 {
            for (lf, &f) in mesh.cell_faces[t].iter().enumerate() {
                if let Some(slot) = space.face_slot[f] {
                    let basis = &space.face_b_basis[slot];
                    let fc = &basis.carrier;
                    let rule = simplex_quadrature(d - 1, space.k + 2).unwrap();
                    let scale = fc.measure * factorial(d - 1);
                    let mut mean = 0.0;
                    for (p, w) in rule.points.iter().zip(&rule.weights) {
                        let mut val = 0.0;
                        for (i, b) in basis.members.iter().enumerate() {
                            val += v[space.face_b_index(slot, i)] * b.value_scalar(p);
                        }
                        mean += w * scale * val;
                    }
                    rhs[lf] = mean / fc.measure;
                }
            }
        } else {
            // reconstruct the local quadratic from (u_n, u_e), then use its
            // face averages
            let w = mwx_from_multiplier(space, mesh, frames, t, v);
            let carrier = cell_carrier(mesh, t);
            for (lf, &f) in mesh.cell_faces[t].iter().enumerate() {
                let fc = face_carrier(mesh, f);
                let rule = simplex_quadrature(d - 1, 4).unwrap();
                let scale = fc.measure * factorial(d - 1);
                let mut mean = 0.0;
                for (p, wq) in rule.points.iter().zip(&rule.weights) {
                    let x = fc.physical(p);
                    let lam = carrier.barycentric(&x);
                    mean += wq * scale * w.value_scalar(&lam);
                }
                rhs[lf] = mean / fc.measure;
            }
        }
        // P_1 with prescribed face means: coefficients over barycentric
        // coordinates are c_i = sum(rhs) - d * rhs_i
        let total: f64 = rhs.iter().sum();
        let mut p = Poly::zero(d + 1, 1);
        for (i, r) in rhs.iter().enumerate() {
            p.axpy(total - d as f64 * r, &Poly::coordinate(d + 1, i));
        }
        PolyField::scalar_in(d, p)
    })
}

/// Local quadratic with prescribed face normal-derivative means (against the
/// global n_F) and ridge means taken from a k = 0 multiplier vector.
pub fn mwx_from_multiplier(
    space: &MultiplierSpace,
    mesh: &SimplicialMesh,
    frames: &EntityFrames,
    t: usize,
    v: &[f64],
) -> PolyField {
    let d = mesh.dim;
    let mut face_vals = vec![0.0; d + 1];
    for (lf, &f) in mesh.cell_faces[t].iter().enumerate() {
        if let Some(slot) = space.face_slot[f] {
            // mean of the u_n block function over the face
            let basis = &space.face_n_basis[slot];
            let fc = &basis.carrier;
            let rule = simplex_quadrature(d - 1, 2).unwrap();
            let scale = fc.measure * factorial(d - 1);
            let mut mean = 0.0;
            for (p, w) in rule.points.iter().zip(&rule.weights) {
                let mut val = 0.0;
                for (i, b) in basis.members.iter().enumerate() {
                    val += v[space.face_n_index(slot, i)] * b.value_scalar(p);
                }
                mean += w * scale * val;
            }
            face_vals[lf] = mean / fc.measure;
        }
    }
    let nridge = mesh.cell_ridges[t].len();
    let mut ridge_vals = vec![0.0; nridge];
    for (le, &e) in mesh.cell_ridges[t].iter().enumerate() {
        if let Some(slot) = space.ridge_slot[e] {
            let basis = &space.ridge_basis[slot];
            let rc = &basis.carrier;
            let m = rc.dim_intrinsic;
            let rule = simplex_quadrature(m, 2).unwrap();
            let scale = rc.measure * factorial(m);
            let mut mean = 0.0;
            for (p, w) in rule.points.iter().zip(&rule.weights) {
                let mut val = 0.0;
                for (i, b) in basis.members.iter().enumerate() {
                    val += v[space.ridge_index(slot, i)] * b.value_scalar(p);
                }
                mean += w * scale * val;
            }
            ridge_vals[le] = mean / rc.measure;
        }
    }
    mwx_reconstruct(mesh, frames, t, &face_vals, &ridge_vals)
}

/// Carrier and rule bundle for repeated integration on one entity.
pub struct EntityQuad {
    pub carrier: Carrier,
    pub rule: QuadratureRule,
    pub scale: f64,
}

impl EntityQuad {
    pub fn new(carrier: Carrier, degree: usize) -> Self {
        let m = carrier.dim_intrinsic;
        let rule = simplex_quadrature(m, degree).expect("entity rule");
        let scale = carrier.measure * factorial(m);
        EntityQuad {
            carrier,
            rule,
            scale,
        }
    }
}

/// Dense matrix of a sparse operator restricted to given rows.
pub fn dense_rows(op: &SparseOperator, rows: &[usize]) -> DMatrix<f64> {
    let mut slot = vec![None; op.nrows];
    for (s, &r) in rows.iter().enumerate() {
        slot[r] = Some(s);
    }
    let mut m = DMatrix::zeros(rows.len(), op.ncols);
    for &(i, j, v) in &op.entries {
        if let Some(s) = slot[i] {
            m[(s, j)] += v;
        }
    }
    m
}
