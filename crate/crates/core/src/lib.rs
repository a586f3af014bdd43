//! Simplicial finite elements for H(div div)-conforming symmetric tensors,
//! with hybridized / weak Galerkin and C0 discontinuous Galerkin solvers for
//! the clamped biharmonic equation, local postprocessing, and an executable
//! verification suite (unisolvence, trace identities, inf-sup ranks, complex
//! dimension counts).
//!
//! The building blocks are
//!
//! * [`mesh`]: conforming box triangulations in d = 2, 3 with full entity
//!   topology and geometric frames (normals, conormals, tangents, diameters),
//! * [`poly`] and [`basis`]: polynomial spaces on simplices in barycentric
//!   monomial form with exact differentiation, plus simplex quadrature,
//! * [`element`]: local shape spaces, the three trace operators, degree of
//!   freedom tables and canonical interpolation,
//! * [`spaces`]: broken stress spaces, facet/ridge multiplier spaces, the
//!   weighted inner product, the weak div-div and weak Hessian operators,
//! * [`biharmonic`]: the SPD multiplier solvers, postprocessing and error
//!   reports,
//! * [`verify`]: certificate-style checks mirroring the analytic statements.

pub mod basis;
pub mod biharmonic;
pub mod element;
pub mod error;
pub mod frames;
pub mod lagrange;
pub mod mesh;
pub mod morley;
pub mod par;
pub mod poly;
pub mod quadrature;
pub mod report;
pub mod sparse;
pub mod spaces;
pub mod verify;

pub use error::FemError;

/// Relative singular-value threshold used for all numerical rank decisions.
pub const RANK_TOL: f64 = 1e-9;
