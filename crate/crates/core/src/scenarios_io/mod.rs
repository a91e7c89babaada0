//! File formats, bundled scenario definitions, result writers, and the
//! command-line interface.
//!
//! All formats are line-oriented text with `#` comments:
//! - Mesh: optional `THICKNESS t`, then `NODES n` with `id x y` lines
//!   (meters), then `ELEMENTS m` with `id n1..n8` lines (four corners
//!   counter-clockwise, then the four mid-edge nodes).
//! - Scenario: `[section]` headers over `key = value` lines.  Units are
//!   fixed per key: stresses in MPa, fracture energies in N/m, times in
//!   hours, opening/displacement values in mm, coordinates in meters,
//!   forces in newtons.
//! - History CSV: `step,time_h,lambda,reaction_N,cmod_mm,control`.
//! - Crack path CSV: `x_m,y_m` polyline.
//! - Field snapshot: legacy ASCII VTK unstructured grid.

pub mod cli;
pub mod driver;
pub mod meshgen;
pub mod meshio;
pub mod scenario;
pub mod writers;

pub use driver::{run_scenario, RunOutcome};
pub use meshio::{read_mesh, write_mesh};
pub use scenario::{read_scenario, ScenarioFile};
