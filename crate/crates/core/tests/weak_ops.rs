//! Integration tests for the weak div-div / weak Hessian pair: exact
//! adjointness with respect to the weighted inner product, the commuting
//! projection identity, behavior on globally smooth tensors, and the
//! surjectivity rank on tiny meshes.

use divdiv::basis::{make_basis, SpaceId};
use divdiv::element::{CellSymPoly, SymField};
use divdiv::frames::{cell_carrier, compute_frames};
use divdiv::mesh::build_box_mesh;
use divdiv::spaces::{
    assemble_weak_divdiv, assemble_weak_hessian, build_broken_stress, build_multiplier_space,
    cr_interpolate, project_qm, project_qsigma, wg_stiffness, ScalarField,
};
use nalgebra::{DMatrix, Matrix3, Vector3};

/// Pairs (k, r) used by the solver.
fn scheme_r(k: usize) -> i64 {
    match k {
        0 => -2,
        1 => 1,
        _ => k as i64 - 2,
    }
}

#[test]
fn adjointness_wb_equals_h() {
    for (dim, n, ks) in [
        (2usize, 2usize, vec![0usize, 1, 2, 3]),
        (3, 1, vec![0, 1, 2]),
    ] {
        let mesh = build_box_mesh(dim, n).unwrap();
        let frames = compute_frames(&mesh).unwrap();
        for k in ks {
            let r = scheme_r(k);
            let sigma = build_broken_stress(&mesh, k, r).unwrap();
            let m = build_multiplier_space(&mesh, k, r, true).unwrap();
            let b = assemble_weak_divdiv(&mesh, &frames, &sigma, &m).unwrap();
            let h = assemble_weak_hessian(&mesh, &frames, &m, &sigma).unwrap();
            let w = m.weighted_inner_product(&frames);
            let wb = w.to_dense() * b.to_dense();
            let hd = h.to_dense();
            let diff = (wb.transpose() - &hd).abs().max();
            let scale = hd.abs().max().max(1e-30);
            assert!(
                diff < 1e-12 * scale.max(1.0),
                "dim {dim} k {k}: adjointness defect {diff:.3e} (scale {scale:.3e})"
            );
        }
    }
}

/// RT-type pairs r = k-1 share the same adjointness identity.
#[test]
fn adjointness_rt_pairs() {
    let mesh = build_box_mesh(2, 2).unwrap();
    let frames = compute_frames(&mesh).unwrap();
    for k in [2usize, 3] {
        let r = k as i64 - 1;
        let sigma = build_broken_stress(&mesh, k, r).unwrap();
        let m = build_multiplier_space(&mesh, k, r, true).unwrap();
        let b = assemble_weak_divdiv(&mesh, &frames, &sigma, &m).unwrap();
        let h = assemble_weak_hessian(&mesh, &frames, &m, &sigma).unwrap();
        let w = m.weighted_inner_product(&frames);
        let wb = w.to_dense() * b.to_dense();
        let hd = h.to_dense();
        let diff = (wb.transpose() - &hd).abs().max();
        assert!(diff < 1e-12 * hd.abs().max().max(1.0), "k {k}: {diff:.3e}");
    }
}

struct PolyTensor2d;
impl SymField for PolyTensor2d {
    fn value(&self, x: &Vector3<f64>) -> Matrix3<f64> {
        // smooth global polynomial tensor of degree 2
        let (a, b) = (x[0], x[1]);
        let mut m = Matrix3::zeros();
        m[(0, 0)] = a * a + 2.0 * b;
        m[(0, 1)] = a * b;
        m[(1, 0)] = a * b;
        m[(1, 1)] = b * b - a;
        m
    }
    fn gradient(&self, x: &Vector3<f64>) -> Option<[Matrix3<f64>; 3]> {
        let (a, b) = (x[0], x[1]);
        let mut gx = Matrix3::zeros();
        gx[(0, 0)] = 2.0 * a;
        gx[(0, 1)] = b;
        gx[(1, 0)] = b;
        gx[(1, 1)] = -1.0;
        let mut gy = Matrix3::zeros();
        gy[(0, 0)] = 2.0;
        gy[(0, 1)] = a;
        gy[(1, 0)] = a;
        gy[(1, 1)] = 2.0 * b;
        Some([gx, gy, Matrix3::zeros()])
    }
    fn divdiv(&self, _x: &Vector3<f64>) -> Option<f64> {
        // dxx(x^2+2y) + 2 dxy(xy) + dyy(y^2-x) = 2 + 2 + 2
        Some(6.0)
    }
}

#[test]
fn weak_divdiv_of_smooth_tensor_has_no_jumps() {
    // for a globally C^2 tensor the face and ridge rows vanish and the cell
    // rows reproduce divdiv
    let mesh = build_box_mesh(2, 2).unwrap();
    let frames = compute_frames(&mesh).unwrap();
    let k = 2usize;
    let r = 0i64;
    let sigma = build_broken_stress(&mesh, k, r).unwrap();
    let m = build_multiplier_space(&mesh, k, r, true).unwrap();
    let b = assemble_weak_divdiv(&mesh, &frames, &sigma, &m).unwrap();
    let coeffs = project_qsigma(&sigma, &PolyTensor2d, 10).unwrap();
    let bd = b.to_dense();
    let mut v = nalgebra::DVector::zeros(sigma.dim);
    for (i, c) in coeffs.iter().enumerate() {
        v[i] = *c;
    }
    let img = bd * v;
    // cell rows: divdiv = 6 constant; face/ridge rows vanish
    for t in 0..mesh.n_cells() {
        let basis = &m.cell_basis[t];
        // compare function values at the centroid
        let lam = vec![1.0 / 3.0; 3];
        let mut val = 0.0;
        for (i, bb) in basis.members.iter().enumerate() {
            val += img[m.cell_index(t, i)] * bb.value_scalar(&lam);
        }
        assert!((val - 6.0).abs() < 1e-9, "cell {t}: divdiv {val}");
    }
    for i in mesh.n_cells() * m.cell_dim..m.dim {
        assert!(img[i].abs() < 1e-9, "row {i}: jump {:.3e}", img[i]);
    }
}

struct Quadratic2d;
impl ScalarField for Quadratic2d {
    fn value(&self, x: &Vector3<f64>) -> f64 {
        1.5 * x[0] * x[0] - 0.7 * x[0] * x[1] + 0.4 * x[1] * x[1] + 0.3 * x[0] - 1.1
    }
    fn gradient(&self, x: &Vector3<f64>) -> Option<Vector3<f64>> {
        Some(Vector3::new(
            3.0 * x[0] - 0.7 * x[1] + 0.3,
            -0.7 * x[0] + 0.8 * x[1],
            0.0,
        ))
    }
}

struct Smooth2d;
impl ScalarField for Smooth2d {
    fn value(&self, x: &Vector3<f64>) -> f64 {
        (std::f64::consts::PI * x[0]).sin() * (2.0 * x[1]).cos()
    }
    fn gradient(&self, x: &Vector3<f64>) -> Option<Vector3<f64>> {
        let pi = std::f64::consts::PI;
        Some(Vector3::new(
            pi * (pi * x[0]).cos() * (2.0 * x[1]).cos(),
            -2.0 * (pi * x[0]).sin() * (2.0 * x[1]).sin(),
            0.0,
        ))
    }
}

struct SmoothHess2d;
impl SymField for SmoothHess2d {
    fn value(&self, x: &Vector3<f64>) -> Matrix3<f64> {
        let pi = std::f64::consts::PI;
        let (s, c) = ((pi * x[0]).sin(), (pi * x[0]).cos());
        let (s2, c2) = ((2.0 * x[1]).sin(), (2.0 * x[1]).cos());
        let mut m = Matrix3::zeros();
        m[(0, 0)] = -pi * pi * s * c2;
        m[(0, 1)] = -2.0 * pi * c * s2;
        m[(1, 0)] = m[(0, 1)];
        m[(1, 1)] = -4.0 * s * c2;
        m
    }
}

#[test]
fn weak_hessian_commutes_with_projection() {
    // nabla_w^2 (Q_M v) = Q_Sigma (hess v), exactly for quadratics and to
    // projection accuracy for smooth fields
    let mesh = build_box_mesh(2, 2).unwrap();
    let frames = compute_frames(&mesh).unwrap();
    for k in [2usize, 3] {
        let r = k as i64 - 2;
        let sigma = build_broken_stress(&mesh, k, r).unwrap();
        let m = build_multiplier_space(&mesh, k, r, false).unwrap();
        let asm = wg_stiffness(&mesh, &frames, &sigma, &m).unwrap();

        // quadratic: the weak Hessian is the constant Hessian
        let qm = project_qm(&m, &frames, &Quadratic2d, 2 * k as usize + 6).unwrap();
        let wh = asm.weak_hessian_apply(&sigma, &qm);
        for t in 0..mesh.n_cells() {
            let basis = &sigma.cell_basis[t];
            let lam = vec![1.0 / 3.0; 3];
            let mut val = Matrix3::zeros();
            for (i, bb) in basis.members.iter().enumerate() {
                val += bb.value_sym(&lam) * wh[sigma.offsets[t] + i];
            }
            assert!((val[(0, 0)] - 3.0).abs() < 1e-9, "k {k}");
            assert!((val[(0, 1)] + 0.7).abs() < 1e-9);
            assert!((val[(1, 1)] - 0.8).abs() < 1e-9);
        }

        // smooth: compare against the L2 projection of the exact Hessian
        let qm = project_qm(&m, &frames, &Smooth2d, 2 * k as usize + 10).unwrap();
        let wh = asm.weak_hessian_apply(&sigma, &qm);
        let qs = project_qsigma(&sigma, &SmoothHess2d, 2 * k + 10).unwrap();
        let mut diff = 0.0f64;
        let mut scale = 0.0f64;
        for (a, b) in wh.iter().zip(&qs) {
            diff = diff.max((a - b).abs());
            scale = scale.max(b.abs());
        }
        assert!(diff < 1e-10 * scale.max(1.0), "k {k}: {diff:.3e}");
    }
}

#[test]
fn weighted_inner_product_examples() {
    let mesh = build_box_mesh(2, 1).unwrap();
    let frames = compute_frames(&mesh).unwrap();
    let m = build_multiplier_space(&mesh, 2, 0, false).unwrap();
    // v = (1, 0, 0, 0): cell block constant one over the unit square
    struct One;
    impl ScalarField for One {
        fn value(&self, _x: &Vector3<f64>) -> f64 {
            1.0
        }
        fn gradient(&self, _x: &Vector3<f64>) -> Option<Vector3<f64>> {
            Some(Vector3::zeros())
        }
    }
    let qm = project_qm(&m, &frames, &One, 8).unwrap();
    // zero out everything but the cell block
    let mut v = qm.clone();
    for i in mesh.n_cells() * m.cell_dim..m.dim {
        v[i] = 0.0;
    }
    let nrm = m.weighted_norm_sq(&frames, &v);
    assert!((nrm - 1.0).abs() < 1e-12, "{nrm}");

    // u_b = 1 on one face: norm^2 = h_F * |F|
    let mut v = vec![0.0; m.dim];
    let slot = 0usize;
    let f = m.active_faces[slot];
    for i in 0..m.face_b_dim {
        let idx = m.face_b_index(slot, i);
        v[idx] = qm[idx];
    }
    let nrm = m.weighted_norm_sq(&frames, &v);
    let expect = frames.face_diameter[f] * frames.face_measure[f];
    assert!((nrm - expect).abs() < 1e-12, "{nrm} vs {expect}");

    // the weighted norm is additive over blocks
    let full = m.weighted_norm_sq(&frames, &qm);
    let mut sum = 0.0;
    for (start, end) in [
        (0, mesh.n_cells() * m.cell_dim),
        (m.face_b_offset, m.face_n_offset),
        (m.face_n_offset, m.ridge_offset),
        (m.ridge_offset, m.dim),
    ] {
        let mut v = vec![0.0; m.dim];
        v[start..end].copy_from_slice(&qm[start..end]);
        sum += m.weighted_norm_sq(&frames, &v);
    }
    assert!((full - sum).abs() < 1e-12 * full.max(1.0));
}

#[test]
fn cr_interpolation_reproduces_linears() {
    struct Linear;
    impl ScalarField for Linear {
        fn value(&self, x: &Vector3<f64>) -> f64 {
            2.0 * x[0] - 3.0 * x[1] + 0.5
        }
        fn gradient(&self, _x: &Vector3<f64>) -> Option<Vector3<f64>> {
            Some(Vector3::new(2.0, -3.0, 0.0))
        }
    }
    let mesh = build_box_mesh(2, 2).unwrap();
    let frames = compute_frames(&mesh).unwrap();
    let m = build_multiplier_space(&mesh, 2, 0, false).unwrap();
    let qm = project_qm(&m, &frames, &Linear, 8).unwrap();
    let vcr = cr_interpolate(&m, &mesh, &frames, &qm);
    for (t, p) in vcr.iter().enumerate() {
        let carrier = cell_carrier(&mesh, t);
        let lam = vec![1.0 / 3.0; 3];
        let x = carrier.physical(&lam);
        assert!((p.value_scalar(&lam) - Linear.value(&x)).abs() < 1e-11);
    }

    // constant face means reproduce the constant
    struct Const;
    impl ScalarField for Const {
        fn value(&self, _x: &Vector3<f64>) -> f64 {
            3.25
        }
        fn gradient(&self, _x: &Vector3<f64>) -> Option<Vector3<f64>> {
            Some(Vector3::zeros())
        }
    }
    let qc = project_qm(&m, &frames, &Const, 8).unwrap();
    let mut v = vec![0.0; m.dim];
    v[m.face_b_offset..m.face_n_offset].copy_from_slice(&qc[m.face_b_offset..m.face_n_offset]);
    let vcr = cr_interpolate(&m, &mesh, &frames, &v);
    for p in &vcr {
        assert!((p.value_scalar(&[0.4, 0.3, 0.3]) - 3.25).abs() < 1e-11);
    }
}

#[test]
fn surjectivity_rank_tiny_meshes() {
    // rank of W^{1/2} B restricted to the interior multiplier space equals
    // its dimension for the scheme pairs on desk-size meshes
    let mut cases: Vec<(usize, usize, usize)> = Vec::new();
    for k in 0..=3usize {
        cases.push((2, 1, k));
        cases.push((2, 2, k));
    }
    for k in 0..=3usize {
        cases.push((3, 1, k));
    }
    for (dim, n, k) in cases {
        let mesh = build_box_mesh(dim, n).unwrap();
        let frames = compute_frames(&mesh).unwrap();
        let r = scheme_r(k);
        let sigma = build_broken_stress(&mesh, k, r).unwrap();
        let m = build_multiplier_space(&mesh, k, r, true).unwrap();
        if m.dim == 0 {
            continue;
        }
        let b = assemble_weak_divdiv(&mesh, &frames, &sigma, &m).unwrap();
        let w = m.weighted_inner_product(&frames).to_dense();
        let wsqrt = matrix_sqrt(&w);
        let sys = &wsqrt * b.to_dense();
        let sv = sys.svd(false, false).singular_values;
        let smax = sv.max();
        let rank = sv.iter().filter(|s| **s > 1e-9 * smax).count();
        assert_eq!(
            rank, m.dim,
            "dim {dim} n {n} k {k}: rank {rank} of {}",
            m.dim
        );
    }
}

fn matrix_sqrt(w: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = w.clone().symmetric_eigen();
    let mut d = DMatrix::zeros(w.nrows(), w.ncols());
    for i in 0..w.nrows() {
        d[(i, i)] = eig.eigenvalues[i].max(0.0).sqrt();
    }
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

#[test]
fn two_triangle_lowest_order_ranks() {
    let mesh = build_box_mesh(2, 1).unwrap();
    let frames = compute_frames(&mesh).unwrap();

    // enriched lowest-order pair: 30 stress columns, all-linear multiplier
    let sigma = build_broken_stress(&mesh, 1, 1).unwrap();
    assert_eq!(sigma.dim, 30);
    let m = build_multiplier_space(&mesh, 1, 1, true).unwrap();
    assert_eq!(m.dim, 2 * 3 + 2 + 2);
    let b = assemble_weak_divdiv(&mesh, &frames, &sigma, &m).unwrap();
    let sv = b.to_dense().svd(false, false).singular_values;
    let smax = sv.max();
    let rank = sv.iter().filter(|s| **s > 1e-9 * smax).count();
    assert_eq!(rank, m.dim);

    // plain linear stress against the facet jumps only: the 30x3 block of
    // the enriched space still surjects onto the 3 multiplier unknowns
    let sigma = build_broken_stress(&mesh, 1, 1).unwrap();
    let m = build_multiplier_space(&mesh, 1, -1, true).unwrap();
    assert_eq!(m.dim, 3);
    let b = assemble_weak_divdiv(&mesh, &frames, &sigma, &m).unwrap();
    let bd = b.to_dense();
    assert_eq!(bd.shape(), (3, 30));
    let sv = bd.svd(false, false).singular_values;
    let smax = sv.max();
    let rank = sv.iter().filter(|s| **s > 1e-9 * smax).count();
    assert_eq!(rank, 3);
}
