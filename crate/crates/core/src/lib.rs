//! Two-dimensional nonlinear finite elements for quasi-brittle fracture with
//! embedded strong discontinuities and a time-dependent softening-healing
//! cohesive law.
//!
//! The crate is organised bottom-up:
//!
//! * [`material_law`]: the mixed-mode cohesive law, its healing extension and
//!   consistent tangents, all at a single material point.
//! * [`linalg`]: a profile (skyline) LDL^T factorisation with a deterministic
//!   reverse Cuthill-McKee ordering.
//! * [`sda_kernel`]: the element-level embedded-discontinuity machinery:
//!   characteristic length, trial traction balance, condensed tangent.
//! * [`fem_core`]: Q8 elements, meshes, dof numbering, assembly, Newton.
//! * [`crack_engine`]: crack initiation, tracking and embedding.
//! * [`continuation`]: load programs, CMOD control, rest periods.
//! * [`scenarios_io`]: file formats, bundled scenario generators, CLI plumbing.
//! * [`back_analysis`]: calibration of healing parameters from reload curves.

pub mod back_analysis;
pub mod continuation;
pub mod crack_engine;
pub mod error;
pub mod fem_core;
pub mod linalg;
pub mod material_law;
pub mod scenarios_io;
pub mod sda_kernel;

pub use error::SimError;
