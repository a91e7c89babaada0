//! Q8 mesh handling, shape functions, quadrature, global assembly with
//! embedded-crack condensation, constrained sparse solves, and the global
//! Newton loop with step cutting.
//!
//! Cracked elements couple to the cohesive balance through the strain at the
//! element centroid, and the enhancement relief enters the internal force by
//! one-point collocation at that same centroid.  That pairing is what makes
//! the assembled tangent exactly symmetric and the residual the gradient of
//! a potential; spreading the relief over the bulk quadrature while driving
//! the balance from a single point would lose both.

use std::fmt;

use nalgebra::{DVector, Matrix2, Point2, SMatrix, SVector, Vector3};
use rayon::prelude::*;

use crate::continuation::{Control, ControlSpec};
use crate::error::SimError;
use crate::linalg::{invert_permutation, reverse_cuthill_mckee, SkylineMatrix};
use crate::material_law::{commit_state, detect_branches, BulkMaterial, CohesiveState, HealingAgent};
use crate::sda_kernel::{elastoplastic_tangent, solve_local, CrackSegment, LocalSolveReport};

/// Relative force tolerance of the global Newton loop.
pub const GLOBAL_TOL_FORCE: f64 = 1e-6;
/// Relative displacement-correction tolerance of the global Newton loop.
pub const GLOBAL_TOL_DISP: f64 = 1e-8;
/// Iteration budget per step attempt.
pub const GLOBAL_MAX_ITER: usize = 30;
/// Step halvings before a hard failure.
pub const GLOBAL_MAX_CUTS: usize = 8;

// --- shape functions and quadrature ----------------------------------------

/// Corner (xi, eta) signs in connectivity order.
const CORNER_XI: [f64; 4] = [-1.0, 1.0, 1.0, -1.0];
const CORNER_ETA: [f64; 4] = [-1.0, -1.0, 1.0, 1.0];

/// Serendipity values and local-coordinate gradients at (xi, eta).
/// Nodes 0-3 are corners (counterclockwise), 4-7 the mid-edge nodes with
/// node 4 between corners 0 and 1.
pub fn shape_functions(xi: f64, eta: f64) -> (SVector<f64, 8>, SMatrix<f64, 8, 2>) {
    let mut n = SVector::<f64, 8>::zeros();
    let mut dn = SMatrix::<f64, 8, 2>::zeros();
    for i in 0..4 {
        let (xs, es) = (CORNER_XI[i], CORNER_ETA[i]);
        let (a, b) = (1.0 + xs * xi, 1.0 + es * eta);
        n[i] = 0.25 * a * b * (xs * xi + es * eta - 1.0);
        dn[(i, 0)] = 0.25 * xs * b * (2.0 * xs * xi + es * eta);
        dn[(i, 1)] = 0.25 * es * a * (xs * xi + 2.0 * es * eta);
    }
    let (x2, e2) = (1.0 - xi * xi, 1.0 - eta * eta);
    // Mid-edge nodes: 4 at eta = -1, 5 at xi = +1, 6 at eta = +1, 7 at xi = -1.
    n[4] = 0.5 * x2 * (1.0 - eta);
    dn[(4, 0)] = -xi * (1.0 - eta);
    dn[(4, 1)] = -0.5 * x2;
    n[5] = 0.5 * (1.0 + xi) * e2;
    dn[(5, 0)] = 0.5 * e2;
    dn[(5, 1)] = -eta * (1.0 + xi);
    n[6] = 0.5 * x2 * (1.0 + eta);
    dn[(6, 0)] = -xi * (1.0 + eta);
    dn[(6, 1)] = 0.5 * x2;
    n[7] = 0.5 * (1.0 - xi) * e2;
    dn[(7, 0)] = -0.5 * e2;
    dn[(7, 1)] = -eta * (1.0 - xi);
    (n, dn)
}

#[derive(Debug, Clone, Copy)]
pub struct GaussPoint {
    pub xi: f64,
    pub eta: f64,
    pub weight: f64,
}

const G1: f64 = 0.577_350_269_189_625_8; // 1/sqrt(3)
const G2: f64 = 0.774_596_669_241_483_4; // sqrt(3/5)
const W1: f64 = 0.555_555_555_555_555_6; // 5/9
const W2: f64 = 0.888_888_888_888_888_8; // 8/9

static GAUSS_2X2: [GaussPoint; 4] = [
    GaussPoint { xi: -G1, eta: -G1, weight: 1.0 },
    GaussPoint { xi: G1, eta: -G1, weight: 1.0 },
    GaussPoint { xi: -G1, eta: G1, weight: 1.0 },
    GaussPoint { xi: G1, eta: G1, weight: 1.0 },
];

static GAUSS_3X3: [GaussPoint; 9] = [
    GaussPoint { xi: -G2, eta: -G2, weight: W1 * W1 },
    GaussPoint { xi: 0.0, eta: -G2, weight: W2 * W1 },
    GaussPoint { xi: G2, eta: -G2, weight: W1 * W1 },
    GaussPoint { xi: -G2, eta: 0.0, weight: W1 * W2 },
    GaussPoint { xi: 0.0, eta: 0.0, weight: W2 * W2 },
    GaussPoint { xi: G2, eta: 0.0, weight: W1 * W2 },
    GaussPoint { xi: -G2, eta: G2, weight: W1 * W1 },
    GaussPoint { xi: 0.0, eta: G2, weight: W2 * W1 },
    GaussPoint { xi: G2, eta: G2, weight: W1 * W1 },
];

/// Tensor-product Gauss rule with `points_per_axis` in {2, 3}.
pub fn gauss_rule(points_per_axis: usize) -> &'static [GaussPoint] {
    match points_per_axis {
        2 => &GAUSS_2X2,
        3 => &GAUSS_3X3,
        other => panic!("unsupported quadrature order {other}"),
    }
}

/// Full 3x3 rule for the elastic bulk, reduced 2x2 once a crack is embedded.
pub fn quadrature_for(cracked: bool) -> &'static [GaussPoint] {
    gauss_rule(if cracked { 2 } else { 3 })
}

/// Strain-displacement operator (engineering shear convention) and Jacobian
/// determinant at one local point.
pub struct GpGeometry {
    pub b: SMatrix<f64, 3, 16>,
    pub det_j: f64,
}

pub fn strain_displacement(
    coords: &[Point2<f64>; 8],
    xi: f64,
    eta: f64,
) -> Result<GpGeometry, SimError> {
    let (_, dn) = shape_functions(xi, eta);
    let mut j = Matrix2::<f64>::zeros();
    for a in 0..8 {
        j[(0, 0)] += dn[(a, 0)] * coords[a].x;
        j[(0, 1)] += dn[(a, 0)] * coords[a].y;
        j[(1, 0)] += dn[(a, 1)] * coords[a].x;
        j[(1, 1)] += dn[(a, 1)] * coords[a].y;
    }
    let det_j = j[(0, 0)] * j[(1, 1)] - j[(0, 1)] * j[(1, 0)];
    if det_j <= 0.0 {
        return Err(SimError::Geometry(format!(
            "non-positive Jacobian {det_j:e} at local point ({xi}, {eta})"
        )));
    }
    let inv = Matrix2::new(j[(1, 1)], -j[(0, 1)], -j[(1, 0)], j[(0, 0)]) / det_j;
    let mut b = SMatrix::<f64, 3, 16>::zeros();
    for a in 0..8 {
        let dx = inv[(0, 0)] * dn[(a, 0)] + inv[(0, 1)] * dn[(a, 1)];
        let dy = inv[(1, 0)] * dn[(a, 0)] + inv[(1, 1)] * dn[(a, 1)];
        b[(0, 2 * a)] = dx;
        b[(1, 2 * a + 1)] = dy;
        b[(2, 2 * a)] = dy;
        b[(2, 2 * a + 1)] = dx;
    }
    Ok(GpGeometry { b, det_j })
}

// --- mesh -------------------------------------------------------------------

/// 8-node serendipity quadrilateral mesh.  Corner nodes come first in each
/// connectivity row (counterclockwise), then the mid-edge nodes.
#[derive(Debug, Clone)]
pub struct Mesh {
    pub nodes: Vec<Point2<f64>>,
    pub elements: Vec<[usize; 8]>,
    pub thickness: f64,
}

impl Mesh {
    /// Connectivity indices in range, positive thickness, and a positive
    /// Jacobian at every quadrature point (both rules) of every element.
    pub fn validate(&self) -> Result<(), SimError> {
        if self.thickness <= 0.0 {
            return Err(SimError::Validation(format!(
                "thickness must be positive (got {})",
                self.thickness
            )));
        }
        for (e, conn) in self.elements.iter().enumerate() {
            for &n in conn {
                if n >= self.nodes.len() {
                    return Err(SimError::Validation(format!(
                        "element {e} references node {n} but the mesh has {} nodes",
                        self.nodes.len()
                    )));
                }
            }
            let coords = self.element_coords(e);
            for gp in GAUSS_3X3.iter().chain(GAUSS_2X2.iter()) {
                strain_displacement(&coords, gp.xi, gp.eta).map_err(|err| {
                    SimError::Validation(format!("element {e}: {err}"))
                })?;
            }
        }
        Ok(())
    }

    pub fn element_coords(&self, e: usize) -> [Point2<f64>; 8] {
        let conn = &self.elements[e];
        std::array::from_fn(|a| self.nodes[conn[a]])
    }

    /// Corner polygon, the geometry the crack kernel works with.
    pub fn corner_polygon(&self, e: usize) -> [Point2<f64>; 4] {
        let conn = &self.elements[e];
        std::array::from_fn(|a| self.nodes[conn[a]])
    }

    /// Area of the corner polygon.
    pub fn element_area(&self, e: usize) -> f64 {
        crate::sda_kernel::polygon_area(&self.corner_polygon(e))
    }

    /// Centroid of the corner polygon.
    pub fn element_centroid(&self, e: usize) -> Point2<f64> {
        crate::sda_kernel::polygon_centroid(&self.corner_polygon(e))
            .expect("validated element")
    }

    /// Median of sqrt(element area): the length scale used for nonlocal
    /// averaging radii.
    pub fn median_element_size(&self) -> f64 {
        let mut sizes: Vec<f64> = (0..self.elements.len())
            .map(|e| self.element_area(e).abs().sqrt())
            .collect();
        sizes.sort_by(|a, b| a.total_cmp(b));
        if sizes.is_empty() {
            0.0
        } else {
            sizes[sizes.len() / 2]
        }
    }

    /// Node-to-node adjacency through shared elements (includes self).
    pub fn node_adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for conn in &self.elements {
            for &a in conn {
                for &b in conn {
                    adj[a].push(b);
                }
            }
        }
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
        }
        adj
    }
}

/// Structured Q8 grid over the unit parameter square, corners mapped through
/// `map` and mid-edge nodes at the segment midpoints of their corners (which
/// keeps element edges straight and the patch test exact for any mapping).
pub fn structured_grid<F>(nx: usize, ny: usize, map: F, thickness: f64) -> Mesh
where
    F: Fn(f64, f64) -> Point2<f64>,
{
    assert!(nx > 0 && ny > 0);
    let n_corner = (nx + 1) * (ny + 1);
    let n_hmid = nx * (ny + 1);
    let corner = |i: usize, j: usize| j * (nx + 1) + i;
    let hmid = |i: usize, j: usize| n_corner + j * nx + i;
    let vmid = |i: usize, j: usize| n_corner + n_hmid + j * (nx + 1) + i;

    let mut nodes = vec![Point2::origin(); n_corner + n_hmid + (nx + 1) * ny];
    for j in 0..=ny {
        for i in 0..=nx {
            nodes[corner(i, j)] = map(i as f64 / nx as f64, j as f64 / ny as f64);
        }
    }
    let mid = |a: Point2<f64>, b: Point2<f64>| Point2::new(0.5 * (a.x + b.x), 0.5 * (a.y + b.y));
    for j in 0..=ny {
        for i in 0..nx {
            nodes[hmid(i, j)] = mid(nodes[corner(i, j)], nodes[corner(i + 1, j)]);
        }
    }
    for j in 0..ny {
        for i in 0..=nx {
            nodes[vmid(i, j)] = mid(nodes[corner(i, j)], nodes[corner(i, j + 1)]);
        }
    }
    let mut elements = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            elements.push([
                corner(i, j),
                corner(i + 1, j),
                corner(i + 1, j + 1),
                corner(i, j + 1),
                hmid(i, j),
                vmid(i + 1, j),
                hmid(i, j + 1),
                vmid(i, j),
            ]);
        }
    }
    Mesh { nodes, elements, thickness }
}

// --- dof bookkeeping ---------------------------------------------------------

/// Global dof index of a node's displacement component (0 = x, 1 = y).
pub fn dof(node: usize, dir: usize) -> usize {
    debug_assert!(dir < 2);
    2 * node + dir
}

/// Dof numbering, constraints, the external load pattern, and the bandwidth
/// ordering used by the profile solver.
#[derive(Debug, Clone)]
pub struct DofSystem {
    ndof: usize,
    constrained: Vec<bool>,
    prescribed: Vec<f64>,
    pattern: DVector<f64>,
    /// Constant external forces, applied in full regardless of the load
    /// factor (dead loads held fixed while the pattern is scaled).
    dead: DVector<f64>,
    /// Permuted dof (new index) for each natural dof.
    to_permuted: Vec<usize>,
    /// Element dof cliques in permuted numbering; the matrix profile.
    cliques: Vec<Vec<usize>>,
}

impl DofSystem {
    pub fn new(mesh: &Mesh) -> Self {
        let ndof = 2 * mesh.nodes.len();
        let node_perm = reverse_cuthill_mckee(&mesh.node_adjacency());
        let node_to_new = invert_permutation(&node_perm);
        let mut to_permuted = vec![0usize; ndof];
        for (old_node, &new_node) in node_to_new.iter().enumerate() {
            to_permuted[dof(old_node, 0)] = 2 * new_node;
            to_permuted[dof(old_node, 1)] = 2 * new_node + 1;
        }
        let cliques = mesh
            .elements
            .iter()
            .map(|conn| {
                let mut c: Vec<usize> = conn
                    .iter()
                    .flat_map(|&n| [to_permuted[dof(n, 0)], to_permuted[dof(n, 1)]])
                    .collect();
                c.sort_unstable();
                c
            })
            .collect();
        DofSystem {
            ndof,
            constrained: vec![false; ndof],
            prescribed: vec![0.0; ndof],
            pattern: DVector::zeros(ndof),
            dead: DVector::zeros(ndof),
            to_permuted,
            cliques,
        }
    }

    pub fn ndof(&self) -> usize {
        self.ndof
    }

    /// Pin a displacement component to a fixed value (usually zero).
    pub fn constrain(&mut self, node: usize, dir: usize, value: f64) {
        let k = dof(node, dir);
        self.constrained[k] = true;
        self.prescribed[k] = value;
    }

    pub fn is_constrained(&self, k: usize) -> bool {
        self.constrained[k]
    }

    pub fn constrained_dofs(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.ndof).filter(|&k| self.constrained[k])
    }

    pub fn prescribed_value(&self, k: usize) -> f64 {
        self.prescribed[k]
    }

    /// Accumulate a nodal force into the load pattern.
    pub fn add_point_load(&mut self, node: usize, dir: usize, value: f64) {
        self.pattern[dof(node, dir)] += value;
    }

    pub fn pattern(&self) -> &DVector<f64> {
        &self.pattern
    }

    /// Accumulate a constant nodal force, outside the scaled pattern.
    pub fn add_dead_load(&mut self, node: usize, dir: usize, value: f64) {
        self.dead[dof(node, dir)] += value;
    }

    pub fn dead(&self) -> &DVector<f64> {
        &self.dead
    }

    pub fn empty_matrix(&self) -> SkylineMatrix {
        SkylineMatrix::from_cliques(self.ndof, &self.cliques)
    }

    fn permuted(&self, k: usize) -> usize {
        self.to_permuted[k]
    }
}

// --- model and state ----------------------------------------------------------

/// Relative opening of a node pair along one direction; the CMOD measure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpeningPair {
    pub node_a: usize,
    pub node_b: usize,
    pub dir: usize,
}

impl OpeningPair {
    pub fn measure(&self, u: &DVector<f64>) -> f64 {
        u[dof(self.node_b, self.dir)] - u[dof(self.node_a, self.dir)]
    }
}

/// Everything that does not change while stepping.
#[derive(Debug, Clone)]
pub struct Model {
    pub mesh: Mesh,
    pub dofs: DofSystem,
    pub material: BulkMaterial,
    pub agent: Option<HealingAgent>,
    pub opening_pair: Option<OpeningPair>,
}

impl Model {
    pub fn new(
        mesh: Mesh,
        material: BulkMaterial,
        agent: Option<HealingAgent>,
    ) -> Result<Self, SimError> {
        mesh.validate()?;
        material.validate()?;
        if let Some(a) = &agent {
            a.validate()?;
        }
        let dofs = DofSystem::new(&mesh);
        Ok(Model {
            mesh,
            dofs,
            material,
            agent,
            opening_pair: None,
        })
    }

    pub fn initial_state(&self) -> GlobalState {
        GlobalState {
            u: DVector::zeros(self.dofs.ndof()),
            cells: vec![None; self.mesh.elements.len()],
            time: 0.0,
            step: 0,
            lambda: 0.0,
            force_reference: 0.0,
        }
    }
}

/// An embedded crack segment and its cohesive history in one element.
#[derive(Debug, Clone)]
pub struct CrackCell {
    pub segment: CrackSegment,
    pub state: CohesiveState,
}

/// The evolving unknowns: nodal displacements, per-element crack state,
/// time, and the load factor.
#[derive(Debug, Clone)]
pub struct GlobalState {
    pub u: DVector<f64>,
    /// One slot per element; `Some` only for cracked elements.
    pub cells: Vec<Option<CrackCell>>,
    /// Wall-clock time (h).
    pub time: f64,
    pub step: usize,
    /// External load factor; patterns have unit resultant so this is newtons.
    pub lambda: f64,
    /// Largest force scale seen so far; the residual tolerance reference.
    pub force_reference: f64,
}

// --- element arrays -----------------------------------------------------------

/// Why a step attempt must be retried at a smaller increment.
#[derive(Debug, Clone)]
pub enum StepTrouble {
    /// The cohesive balance in one element did not converge.
    Element { element: usize, residual_norm: f64 },
    /// The factorisation or the control constraint degenerated.
    Linear(String),
    /// The global loop ran out of iterations.
    NoConvergence { iterations: usize, residual: f64, reference: f64 },
}

impl fmt::Display for StepTrouble {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepTrouble::Element { element, residual_norm } => write!(
                f,
                "local solve failed in element {element} (residual {residual_norm:.3e})"
            ),
            StepTrouble::Linear(msg) => write!(f, "linear solve failed: {msg}"),
            StepTrouble::NoConvergence { iterations, residual, reference } => write!(
                f,
                "no convergence after {iterations} iterations (|r| = {residual:.3e}, reference = {reference:.3e})"
            ),
        }
    }
}

/// Elastic element stiffness under a caller-chosen quadrature rule.
pub fn elastic_element(
    coords: &[Point2<f64>; 8],
    material: &BulkMaterial,
    thickness: f64,
    rule: &[GaussPoint],
) -> Result<SMatrix<f64, 16, 16>, SimError> {
    let de = material.elasticity();
    let mut k = SMatrix::<f64, 16, 16>::zeros();
    for gp in rule {
        let geo = strain_displacement(coords, gp.xi, gp.eta)?;
        k += geo.b.transpose() * de * geo.b * (gp.weight * geo.det_j * thickness);
    }
    Ok(k)
}

type ElementArrays = (SMatrix<f64, 16, 16>, SVector<f64, 16>, Option<LocalSolveReport>);

/// Stiffness, internal force, and (for cracked elements) the local solve
/// report of one element at displacement `u_e`.
///
/// With `secant_predictor` the tangent uses the unloading (secant) branch of
/// the committed state instead of the branch the local solve settled on; the
/// internal force is unaffected.
fn element_arrays(
    model: &Model,
    cell: Option<&CrackCell>,
    e: usize,
    u_e: &SVector<f64, 16>,
    now: f64,
    secant_predictor: bool,
) -> Result<ElementArrays, StepTrouble> {
    let coords = model.mesh.element_coords(e);
    let thickness = model.mesh.thickness;
    let rule = quadrature_for(cell.is_some());
    let k_bulk = elastic_element(&coords, &model.material, thickness, rule)
        .map_err(|err| StepTrouble::Linear(err.to_string()))?;
    let f_bulk = k_bulk * u_e;
    let Some(cell) = cell else {
        return Ok((k_bulk, f_bulk, None));
    };

    // Cohesive balance driven by the centroid strain; relief collocated there.
    let geo_c = strain_displacement(&coords, 0.0, 0.0)
        .map_err(|err| StepTrouble::Linear(err.to_string()))?;
    let eps_c: Vector3<f64> = geo_c.b * u_e;
    let (report, sigma) = solve_local(
        &eps_c,
        &cell.state,
        &cell.segment,
        &model.material,
        model.agent.as_ref(),
        now,
    );
    if !report.converged {
        return Err(StepTrouble::Element {
            element: e,
            residual_norm: report.residual_norm,
        });
    }
    let de = model.material.elasticity();
    let volume = model.mesh.element_area(e) * thickness;
    let relief: Vector3<f64> = de * eps_c - sigma;
    let f_e = f_bulk - geo_c.b.transpose() * relief * volume;

    let opening = report.opening(&cell.state, model.material.mode_mix);
    // For the predictor, detecting branches at zero opening yields the
    // committed secant (envelope only while a spring is still virgin).
    let branches = if secant_predictor {
        detect_branches(0.0, &cell.state)
    } else {
        report.branches
    };
    let (c_ep, _elastic_fallback) = elastoplastic_tangent(
        &opening,
        &cell.state,
        &cell.segment,
        &model.material,
        model.agent.as_ref(),
        now,
        branches,
    );
    let k_e = k_bulk - geo_c.b.transpose() * (de - c_ep) * geo_c.b * volume;
    Ok((k_e, f_e, Some(report)))
}

/// Assembled internal force (natural dof order) and tangent (permuted,
/// constraints not yet applied), plus the per-element local solve reports.
pub struct Assembly {
    pub internal: DVector<f64>,
    pub tangent: SkylineMatrix,
    pub reports: Vec<Option<LocalSolveReport>>,
}

/// Evaluate internal forces and the tangent at displacement `u`, using the
/// committed cohesive states in `state` and evaluation time `now`.  Element
/// computations run in parallel; accumulation is serial in element order, so
/// results are identical for any worker count.
///
/// `secant_predictor` selects the unloading-branch tangent (elastic trial
/// step): used for the first iteration of a step so that load reversals land
/// on the stable secant branch instead of continuing down the softening
/// envelope.
pub fn assemble(
    model: &Model,
    state: &GlobalState,
    u: &DVector<f64>,
    now: f64,
    secant_predictor: bool,
) -> Result<Assembly, StepTrouble> {
    let per_element: Vec<Result<ElementArrays, StepTrouble>> = (0..model.mesh.elements.len())
        .into_par_iter()
        .map(|e| {
            let conn = &model.mesh.elements[e];
            let mut u_e = SVector::<f64, 16>::zeros();
            for (a, &n) in conn.iter().enumerate() {
                u_e[2 * a] = u[dof(n, 0)];
                u_e[2 * a + 1] = u[dof(n, 1)];
            }
            element_arrays(model, state.cells[e].as_ref(), e, &u_e, now, secant_predictor)
        })
        .collect();

    let mut internal = DVector::zeros(model.dofs.ndof());
    let mut tangent = model.dofs.empty_matrix();
    let mut reports = vec![None; model.mesh.elements.len()];
    for (e, out) in per_element.into_iter().enumerate() {
        let (k_e, f_e, report) = out?;
        reports[e] = report;
        let conn = &model.mesh.elements[e];
        let mut gdofs = [0usize; 16];
        for (a, &n) in conn.iter().enumerate() {
            gdofs[2 * a] = dof(n, 0);
            gdofs[2 * a + 1] = dof(n, 1);
        }
        for (i, &gi) in gdofs.iter().enumerate() {
            internal[gi] += f_e[i];
            let pi = model.dofs.permuted(gi);
            // Each unordered pair once; the skyline slot is shared.  The
            // cohesive tangent is non-symmetric only for mode-mix weights
            // other than one, and then this takes its symmetric part (a
            // modified Newton in that regime, exact otherwise).
            for (j, &gj) in gdofs.iter().enumerate().skip(i) {
                tangent.add(pi, model.dofs.permuted(gj), 0.5 * (k_e[(i, j)] + k_e[(j, i)]));
            }
        }
    }
    Ok(Assembly { internal, tangent, reports })
}

// --- constrained solve ----------------------------------------------------------

/// Solve `k x = rhs` with constrained dofs pinned.  `fixed` carries nonzero
/// prescribed increments (dof, value); their stiffness columns are moved to
/// the right-hand side before pinning.  `extra` is a second right-hand side
/// solved against the same factorisation with homogeneous constraints.
pub fn solve_constrained(
    mut k: SkylineMatrix,
    dofs: &DofSystem,
    rhs: &DVector<f64>,
    fixed: &[(usize, f64)],
    extra: Option<&DVector<f64>>,
) -> Result<(DVector<f64>, Option<DVector<f64>>), SimError> {
    let n = dofs.ndof();
    let mut rhs_p = vec![0.0; n];
    for i in 0..n {
        rhs_p[dofs.permuted(i)] = rhs[i];
    }
    for &(fdof, value) in fixed {
        if value == 0.0 {
            continue;
        }
        let col = dofs.permuted(fdof);
        for (i, r) in rhs_p.iter_mut().enumerate() {
            *r -= k.get(i, col) * value;
        }
    }
    let mut fixed_p = vec![0.0; n];
    for &(fdof, value) in fixed {
        fixed_p[dofs.permuted(fdof)] = value;
    }
    for cdof in dofs.constrained_dofs() {
        let p = dofs.permuted(cdof);
        rhs_p[p] = fixed_p[p];
        k.pin_dof(p, 1.0);
    }
    let mut extra_p = extra.map(|v| {
        let mut out = vec![0.0; n];
        for i in 0..n {
            out[dofs.permuted(i)] = v[i];
        }
        for cdof in dofs.constrained_dofs() {
            out[dofs.permuted(cdof)] = 0.0;
        }
        out
    });
    k.factor()?;
    k.solve_in_place(&mut rhs_p);
    if let Some(e) = extra_p.as_mut() {
        k.solve_in_place(e);
    }
    let mut x = DVector::zeros(n);
    for i in 0..n {
        x[i] = rhs_p[dofs.permuted(i)];
    }
    let x2 = extra_p.map(|e| {
        let mut out = DVector::zeros(n);
        for i in 0..n {
            out[i] = e[dofs.permuted(i)];
        }
        out
    });
    Ok((x, x2))
}

// --- global newton loop -----------------------------------------------------------

/// What one (possibly substepped) global step did.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    /// Linear solves summed over substeps.
    pub iterations: usize,
    /// Step halvings that were needed.
    pub cuts: usize,
    /// Force conjugate to the drive: the load factor for force/CMOD control,
    /// the reaction at the driven dof for displacement control.
    pub reaction: f64,
}

struct AttemptOut {
    u: DVector<f64>,
    lambda: f64,
    iterations: usize,
    internal: DVector<f64>,
    reports: Vec<Option<LocalSolveReport>>,
}

/// Advance one step of `control`, halving the increment on trouble (up to
/// [`GLOBAL_MAX_CUTS`] times, substeps re-run the remainder) and committing
/// cohesive history only after each substep has converged.  Rest steps
/// (zero increment) advance time without solving.
pub fn newton_step(
    model: &Model,
    state: &mut GlobalState,
    control: &ControlSpec,
) -> Result<StepRecord, SimError> {
    if control.control.increment() == 0.0 {
        state.time += control.step_time;
        state.step += 1;
        return Ok(StepRecord {
            iterations: 0,
            cuts: 0,
            reaction: state.lambda,
        });
    }
    if let Control::Displacement { node, dir, .. } = control.control {
        // The driven dof must be pinned or the solve leaves it floating.
        if !model.dofs.is_constrained(dof(node, dir)) {
            return Err(SimError::Validation(format!(
                "displacement control drives node {node} dir {dir}, which is not constrained"
            )));
        }
    }

    let mut remaining = 1.0f64;
    let mut frac = 1.0f64;
    let mut cuts = 0usize;
    let mut iterations = 0usize;
    let mut reaction = state.lambda;
    while remaining > 0.0 {
        let t_new = state.time + control.step_time * frac;
        match attempt(model, state, control, frac, t_new) {
            Ok(out) => {
                iterations += out.iterations;
                reaction = commit(model, state, control, out, t_new);
                remaining -= frac;
                frac = frac.min(remaining);
            }
            Err(trouble) => {
                cuts += 1;
                if cuts > GLOBAL_MAX_CUTS {
                    return Err(SimError::Solver(format!(
                        "step {} failed after {GLOBAL_MAX_CUTS} halvings: {trouble}; \
                         lambda = {:.6e}, time = {:.4} h, |u| = {:.6e}",
                        state.step + 1,
                        state.lambda,
                        state.time,
                        state.u.norm(),
                    )));
                }
                frac *= 0.5;
            }
        }
    }
    state.step += 1;
    Ok(StepRecord { iterations, cuts, reaction })
}

/// One Newton solve sequence for `frac` of the step increment.  Does not
/// touch `state`; the caller commits on success.
fn attempt(
    model: &Model,
    state: &GlobalState,
    control: &ControlSpec,
    frac: f64,
    t_new: f64,
) -> Result<AttemptOut, StepTrouble> {
    let mut u = state.u.clone();
    let mut lambda = state.lambda;
    let mut fixed: Vec<(usize, f64)> = Vec::new();
    let mut cmod_target = None;
    match control.control {
        Control::Force { d_lambda } => lambda += d_lambda * frac,
        Control::Displacement { node, dir, d_value } => {
            fixed.push((dof(node, dir), d_value * frac));
        }
        Control::Cmod { pair, d_value } => {
            cmod_target = Some((pair, pair.measure(&state.u) + d_value * frac));
        }
    }

    let mut correction = 0.0f64;
    let mut pending = true;
    let mut last_residual = f64::INFINITY;
    let mut last_reference = 0.0f64;
    for it in 0..GLOBAL_MAX_ITER {
        let asm = assemble(model, state, &u, t_new, pending)?;
        let mut r = model.dofs.pattern() * lambda + model.dofs.dead() - &asm.internal;
        for cdof in model.dofs.constrained_dofs() {
            r[cdof] = 0.0;
        }
        let reference = {
            let ext = (model.dofs.pattern() * lambda + model.dofs.dead()).norm();
            let base = ext.max(state.force_reference);
            if base > 0.0 {
                base
            } else {
                asm.internal.norm()
            }
        };
        last_residual = r.norm();
        last_reference = reference;
        let resid_ok = if reference > 0.0 {
            r.norm() <= GLOBAL_TOL_FORCE * reference
        } else {
            r.norm() == 0.0
        };
        let disp_ok = correction <= GLOBAL_TOL_DISP * u.norm().max(f64::MIN_POSITIVE);
        let cmod_ok = cmod_target.is_none_or(|(pair, target)| {
            (pair.measure(&u) - target).abs() <= 1e-6 * target.abs().max(1e-18)
        });
        if !pending && resid_ok && disp_ok && cmod_ok {
            return Ok(AttemptOut {
                u,
                lambda,
                iterations: it,
                internal: asm.internal,
                reports: asm.reports,
            });
        }

        match cmod_target {
            None => {
                let (du, _) =
                    solve_constrained(asm.tangent, &model.dofs, &r, &fixed, None)
                        .map_err(|err| StepTrouble::Linear(err.to_string()))?;
                // The first solve is the incremental predictor; only later
                // corrections count against the displacement criterion.
                correction = if pending { 0.0 } else { du.norm() };
                u += du;
            }
            Some((pair, target)) => {
                let (du_r, du_p) = solve_constrained(
                    asm.tangent,
                    &model.dofs,
                    &r,
                    &fixed,
                    Some(model.dofs.pattern()),
                )
                .map_err(|err| StepTrouble::Linear(err.to_string()))?;
                let du_p = du_p.expect("pattern solve requested");
                let denom = pair.measure(&du_p);
                if denom.abs() < 1e-30 {
                    return Err(StepTrouble::Linear(
                        "load pattern does not move the controlled opening".into(),
                    ));
                }
                let d_lambda = (target - pair.measure(&u) - pair.measure(&du_r)) / denom;
                let du = du_r + du_p * d_lambda;
                correction = if pending { 0.0 } else { du.norm() };
                u += du;
                lambda += d_lambda;
            }
        }
        fixed.clear();
        pending = false;
    }
    Err(StepTrouble::NoConvergence {
        iterations: GLOBAL_MAX_ITER,
        residual: last_residual,
        reference: last_reference,
    })
}

/// Write a converged attempt into the state: displacements, load factor,
/// time, cohesive history (via `commit_state`), and the force reference.
/// Returns the reaction conjugate to the drive.
fn commit(
    model: &Model,
    state: &mut GlobalState,
    control: &ControlSpec,
    out: AttemptOut,
    t_new: f64,
) -> f64 {
    for (e, slot) in state.cells.iter_mut().enumerate() {
        if let Some(cell) = slot {
            let report = out.reports[e].expect("cracked element has a report");
            let opening = report.opening(&cell.state, model.material.mode_mix);
            cell.state = commit_state(
                &opening,
                &cell.state,
                t_new,
                &model.material,
                model.agent.as_ref(),
            );
        }
    }
    let reactions_norm = {
        let mut s = 0.0;
        for cdof in model.dofs.constrained_dofs() {
            let r = out.internal[cdof]
                - model.dofs.pattern()[cdof] * out.lambda
                - model.dofs.dead()[cdof];
            s += r * r;
        }
        s.sqrt()
    };
    let ext_norm = (model.dofs.pattern() * out.lambda + model.dofs.dead()).norm();
    let reaction = match control.control {
        Control::Displacement { node, dir, .. } => out.internal[dof(node, dir)],
        _ => out.lambda,
    };
    state.u = out.u;
    state.lambda = out.lambda;
    state.time = t_new;
    state.force_reference = state
        .force_reference
        .max(reactions_norm)
        .max(ext_norm);
    reaction
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::continuation::StopWhen;
    use crate::material_law::PlaneMode;
    use crate::sda_kernel::enhanced_strain;
    use approx::assert_relative_eq;
    use nalgebra::Vector2;
    use proptest::prelude::*;

    fn mat() -> BulkMaterial {
        BulkMaterial {
            young_modulus: 30e9,
            poisson_ratio: 0.2,
            tensile_strength: 2.0e6,
            fracture_energy: 100.0,
            mode_mix: 1.0,
            plane: PlaneMode::PlaneStress,
        }
    }

    fn spec(control: Control, step_time: f64) -> ControlSpec {
        ControlSpec {
            control,
            step_time,
            stop: StopWhen::Steps(1),
        }
    }

    /// Local coordinates of the 8 nodes in connectivity order.
    const NODE_LOCAL: [(f64, f64); 8] = [
        (-1.0, -1.0),
        (1.0, -1.0),
        (1.0, 1.0),
        (-1.0, 1.0),
        (0.0, -1.0),
        (1.0, 0.0),
        (0.0, 1.0),
        (-1.0, 0.0),
    ];

    fn find_node(mesh: &Mesh, x: f64, y: f64) -> usize {
        mesh.nodes
            .iter()
            .position(|p| (p.x - x).abs() < 1e-12 && (p.y - y).abs() < 1e-12)
            .expect("node present")
    }

    #[test]
    fn shape_functions_are_kronecker_at_nodes() {
        for (b, &(xi, eta)) in NODE_LOCAL.iter().enumerate() {
            let (n, _) = shape_functions(xi, eta);
            for a in 0..8 {
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((n[a] - want).abs() < 1e-14, "N_{a}({b}) = {}", n[a]);
            }
        }
    }

    proptest! {
        #[test]
        fn shape_functions_reproduce_serendipity_monomials(
            xi in -1.0f64..1.0,
            eta in -1.0f64..1.0,
        ) {
            let (n, dn) = shape_functions(xi, eta);
            let mut sums = [0.0f64; 6]; // 1, xi, eta, xi^2, eta^2, xi*eta
            let mut grad = [0.0f64; 2];
            for a in 0..8 {
                let (xa, ea) = NODE_LOCAL[a];
                sums[0] += n[a];
                sums[1] += n[a] * xa;
                sums[2] += n[a] * ea;
                sums[3] += n[a] * xa * xa;
                sums[4] += n[a] * ea * ea;
                sums[5] += n[a] * xa * ea;
                grad[0] += dn[(a, 0)];
                grad[1] += dn[(a, 1)];
            }
            let want = [1.0, xi, eta, xi * xi, eta * eta, xi * eta];
            for (got, want) in sums.iter().zip(want) {
                prop_assert!((got - want).abs() < 1e-12);
            }
            prop_assert!(grad[0].abs() < 1e-12 && grad[1].abs() < 1e-12);
        }
    }

    #[test]
    fn structured_grid_geometry() {
        let mesh = structured_grid(2, 2, |s, t| Point2::new(2.0 * s, t), 0.1);
        assert_eq!(mesh.nodes.len(), 9 + 6 + 6);
        assert_eq!(mesh.elements.len(), 4);
        mesh.validate().unwrap();
        for e in 0..4 {
            assert_relative_eq!(mesh.element_area(e), 0.5, max_relative = 1e-12);
        }
        assert_relative_eq!(mesh.median_element_size(), 0.5f64.sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn mesh_validation_rejects_bad_input() {
        let good = structured_grid(1, 1, Point2::new, 0.1);

        let mut zero_t = good.clone();
        zero_t.thickness = 0.0;
        assert!(zero_t.validate().is_err());

        let mut bad_index = good.clone();
        bad_index.elements[0][6] = 999;
        assert!(bad_index.validate().is_err());

        let mut flipped = good.clone();
        flipped.elements[0].swap(1, 3);
        assert!(flipped.validate().is_err());
    }

    /// Assemble an elastic stiffness under an explicit quadrature rule.
    fn assemble_elastic(
        mesh: &Mesh,
        dofs: &DofSystem,
        material: &BulkMaterial,
        rule: &[GaussPoint],
    ) -> SkylineMatrix {
        let mut k = dofs.empty_matrix();
        for e in 0..mesh.elements.len() {
            let coords = mesh.element_coords(e);
            let k_e = elastic_element(&coords, material, mesh.thickness, rule).unwrap();
            let conn = &mesh.elements[e];
            let mut gdofs = [0usize; 16];
            for (a, &n) in conn.iter().enumerate() {
                gdofs[2 * a] = dof(n, 0);
                gdofs[2 * a + 1] = dof(n, 1);
            }
            for (i, &gi) in gdofs.iter().enumerate() {
                let pi = dofs.to_permuted[gi];
                for (j, &gj) in gdofs.iter().enumerate().skip(i) {
                    k.add(pi, dofs.to_permuted[gj], k_e[(i, j)]);
                }
            }
        }
        k
    }

    #[test]
    fn patch_test_on_distorted_mesh() {
        // Interior-only distortion: the boundary stays on the bounding box.
        let bump = |s: f64, t: f64| s * (1.0 - s) * t * (1.0 - t);
        let mesh = structured_grid(
            2,
            2,
            |s, t| Point2::new(2.0 * s + 1.2 * bump(s, t), t - 0.7 * bump(s, t)),
            0.1,
        );
        let material = mat();
        let mut model = Model::new(mesh, material, None).unwrap();

        let exact = |p: Point2<f64>| {
            Vector2::new(
                1e-4 + 3e-4 * p.x + 2e-4 * p.y,
                -2e-4 + 2.5e-4 * p.x - 1.5e-4 * p.y,
            )
        };
        let eps_exact = Vector3::new(3e-4, -1.5e-4, 2e-4 + 2.5e-4);

        let mut fixed = Vec::new();
        for (n, p) in model.mesh.nodes.iter().enumerate() {
            let on_edge = p.x.abs() < 1e-12
                || (p.x - 2.0).abs() < 1e-12
                || p.y.abs() < 1e-12
                || (p.y - 1.0).abs() < 1e-12;
            if on_edge {
                let u = exact(*p);
                fixed.push((dof(n, 0), u.x));
                fixed.push((dof(n, 1), u.y));
            }
        }
        let nodes = model.mesh.nodes.clone();
        for &(k, v) in &fixed {
            model.dofs.constrain(k / 2, k % 2, v);
        }

        let state = model.initial_state();
        let asm = assemble(&model, &state, &state.u, 0.0, false).unwrap();
        let rhs = -asm.internal.clone();
        let (u, _) = solve_constrained(asm.tangent, &model.dofs, &rhs, &fixed, None).unwrap();

        let scale = u.amax();
        for (n, p) in nodes.iter().enumerate() {
            let want = exact(*p);
            assert!(
                (u[dof(n, 0)] - want.x).abs() < 1e-10 * scale
                    && (u[dof(n, 1)] - want.y).abs() < 1e-10 * scale,
                "node {n} off: ({}, {}) vs ({}, {})",
                u[dof(n, 0)],
                u[dof(n, 1)],
                want.x,
                want.y
            );
        }

        // Constant stress at every quadrature point.
        let de = model.material.elasticity();
        let sig_exact = de * eps_exact;
        for e in 0..model.mesh.elements.len() {
            let coords = model.mesh.element_coords(e);
            let conn = &model.mesh.elements[e];
            let mut u_e = SVector::<f64, 16>::zeros();
            for (a, &n) in conn.iter().enumerate() {
                u_e[2 * a] = u[dof(n, 0)];
                u_e[2 * a + 1] = u[dof(n, 1)];
            }
            for gp in gauss_rule(3) {
                let geo = strain_displacement(&coords, gp.xi, gp.eta).unwrap();
                let sig = de * (geo.b * u_e);
                for c in 0..3 {
                    assert!(
                        (sig[c] - sig_exact[c]).abs() < 1e-8 * sig_exact.amax(),
                        "element {e} stress component {c}: {} vs {}",
                        sig[c],
                        sig_exact[c]
                    );
                }
            }
        }
    }

    #[test]
    fn quadrature_switch_is_invisible_on_rectangles() {
        // A pure bending field is inside the serendipity space and its
        // internal-force integrand is of low enough degree that both rules
        // integrate it exactly on rectangles; the solved displacements must
        // therefore agree to solver precision.
        let material = mat();
        let nu = material.poisson_ratio;
        let kappa = 1e-4;
        let exact = |p: Point2<f64>| {
            Vector2::new(
                kappa * p.x * p.y,
                -0.5 * kappa * (p.x * p.x + nu * p.y * p.y),
            )
        };

        let mesh = structured_grid(2, 2, |s, t| Point2::new(2.0 * s, t), 0.1);
        let dofs_template = DofSystem::new(&mesh);
        let mut solutions = Vec::new();
        for rule_order in [2usize, 3] {
            let mut dofs = dofs_template.clone();
            let mut fixed = Vec::new();
            for (n, p) in mesh.nodes.iter().enumerate() {
                let on_edge = p.x.abs() < 1e-12
                    || (p.x - 2.0).abs() < 1e-12
                    || p.y.abs() < 1e-12
                    || (p.y - 1.0).abs() < 1e-12;
                if on_edge {
                    let u = exact(*p);
                    dofs.constrain(n, 0, u.x);
                    dofs.constrain(n, 1, u.y);
                    fixed.push((dof(n, 0), u.x));
                    fixed.push((dof(n, 1), u.y));
                }
            }
            let k = assemble_elastic(&mesh, &dofs, &material, gauss_rule(rule_order));
            let rhs = DVector::zeros(dofs.ndof());
            let (u, _) = solve_constrained(k, &dofs, &rhs, &fixed, None).unwrap();
            solutions.push(u);
        }
        let scale = solutions[1].amax();
        for (i, (a, b)) in solutions[0].iter().zip(solutions[1].iter()).enumerate() {
            assert!((a - b).abs() < 1e-10 * scale, "dof {i}: {a} vs {b}");
        }
        // And both match the exact quadratic field.
        for (n, p) in mesh.nodes.iter().enumerate() {
            let want = exact(*p);
            assert!((solutions[1][dof(n, 0)] - want.x).abs() < 1e-9 * scale);
            assert!((solutions[1][dof(n, 1)] - want.y).abs() < 1e-9 * scale);
        }
    }

    /// Single-element model with a vertical crack through the middle.
    fn cracked_single_element(size: f64, thickness: f64) -> (Model, GlobalState) {
        let mesh = structured_grid(1, 1, |s, t| Point2::new(size * s, size * t), thickness);
        let material = mat();
        let model = Model::new(mesh, material, None).unwrap();
        let mut state = model.initial_state();
        let corners = model.mesh.corner_polygon(0);
        let segment = CrackSegment::new(
            0,
            Vector2::new(1.0, 0.0),
            Point2::new(0.5 * size, 0.0),
            Point2::new(0.5 * size, size),
            &corners,
        )
        .unwrap();
        state.cells[0] = Some(CrackCell {
            segment,
            state: CohesiveState::virgin(&model.material),
        });
        (model, state)
    }

    #[test]
    fn zero_displacement_gives_zero_residual() {
        let (model, state) = cracked_single_element(1.0, 0.1);
        let asm = assemble(&model, &state, &state.u, 0.0, false).unwrap();
        assert_eq!(asm.internal.norm(), 0.0);
    }

    /// Nodal displacement vector for an affine field on a mesh.
    fn affine_u(mesh: &Mesh, grad: [[f64; 2]; 2]) -> DVector<f64> {
        let mut u = DVector::zeros(2 * mesh.nodes.len());
        for (n, p) in mesh.nodes.iter().enumerate() {
            u[dof(n, 0)] = grad[0][0] * p.x + grad[0][1] * p.y;
            u[dof(n, 1)] = grad[1][0] * p.x + grad[1][1] * p.y;
        }
        u
    }

    #[test]
    fn cracked_element_tangent_is_symmetric() {
        let (model, mut state) = cracked_single_element(1.0, 0.1);
        // Envelope branch: opening plus shear.
        let u = affine_u(&model.mesh, [[8e-5, 1e-5], [3e-5, 0.0]]);
        let check = |state: &GlobalState, u: &DVector<f64>| {
            let mut u_e = SVector::<f64, 16>::zeros();
            for (a, &n) in model.mesh.elements[0].iter().enumerate() {
                u_e[2 * a] = u[dof(n, 0)];
                u_e[2 * a + 1] = u[dof(n, 1)];
            }
            let (k_e, _, rep) =
                element_arrays(&model, state.cells[0].as_ref(), 0, &u_e, 0.0, false).unwrap();
            assert!(rep.unwrap().converged);
            let asym = (k_e - k_e.transpose()).norm() / k_e.norm();
            assert!(asym <= 1e-10, "relative asymmetry {asym:e}");
        };
        check(&state, &u);

        // Secant branch: commit the envelope state, then evaluate a partial
        // unload.
        let asm = assemble(&model, &state, &u, 0.0, false).unwrap();
        let cell = state.cells[0].as_mut().unwrap();
        let opening = asm.reports[0]
            .unwrap()
            .opening(&cell.state, model.material.mode_mix);
        cell.state = commit_state(&opening, &cell.state, 0.0, &model.material, None);
        let u_less = u * 0.6;
        check(&state, &u_less);
    }

    /// Potential energy of the cracked single element at displacement `u`,
    /// with the crack-surface energy supplied by the caller.
    fn element_potential(
        model: &Model,
        state: &GlobalState,
        u: &DVector<f64>,
        surface: impl Fn(f64) -> f64,
    ) -> f64 {
        let coords = model.mesh.element_coords(0);
        let t = model.mesh.thickness;
        let de = model.material.elasticity();
        let mut u_e = SVector::<f64, 16>::zeros();
        for (a, &n) in model.mesh.elements[0].iter().enumerate() {
            u_e[2 * a] = u[dof(n, 0)];
            u_e[2 * a + 1] = u[dof(n, 1)];
        }
        let mut pi = 0.0;
        for gp in quadrature_for(true) {
            let geo = strain_displacement(&coords, gp.xi, gp.eta).unwrap();
            let eps = geo.b * u_e;
            pi += 0.5 * gp.weight * geo.det_j * t * (eps.dot(&(de * eps)));
        }
        let cell = state.cells[0].as_ref().unwrap();
        let geo_c = strain_displacement(&coords, 0.0, 0.0).unwrap();
        let eps_c = geo_c.b * u_e;
        let (rep, _) = solve_local(
            &eps_c,
            &cell.state,
            &cell.segment,
            &model.material,
            None,
            0.0,
        );
        assert!(rep.converged);
        let op = rep.opening(&cell.state, model.material.mode_mix);
        let eps_s = enhanced_strain(op.normal, op.tangential, &cell.segment);
        let volume = model.mesh.element_area(0) * t;
        pi += volume * (0.5 * eps_s.dot(&(de * eps_s)) - eps_c.dot(&(de * eps_s)));
        pi + volume / cell.segment.l_c * surface(op.effective)
    }

    fn fd_check(
        model: &Model,
        state: &GlobalState,
        u: &DVector<f64>,
        surface: impl Fn(f64) -> f64 + Copy,
    ) {
        let asm = assemble(model, state, u, 0.0, false).unwrap();
        let scale = asm.internal.amax();
        let h = 1e-7;
        for i in 0..u.len() {
            let mut up = u.clone();
            up[i] += h;
            let mut um = u.clone();
            um[i] -= h;
            let fd = (element_potential(model, state, &up, surface)
                - element_potential(model, state, &um, surface))
                / (2.0 * h);
            assert!(
                (fd - asm.internal[i]).abs() <= 1e-5 * scale,
                "dof {i}: fd {fd:.6e} vs residual {:.6e} (scale {scale:.3e})",
                asm.internal[i]
            );
        }
    }

    #[test]
    fn residual_is_gradient_of_potential_on_envelope() {
        let (model, state) = cracked_single_element(1.0, 0.1);
        let u = affine_u(&model.mesh, [[8e-5, 1e-5], [3e-5, 0.0]]);
        let m = model.material;
        let a = m.tensile_strength / m.fracture_energy;
        let c = m.penalty_stiffness() / m.tensile_strength;
        let surface = move |z: f64| {
            m.fracture_energy * (1.0 - (-a * z).exp())
                - m.tensile_strength / (a + c) * (1.0 - (-(a + c) * z).exp())
        };
        fd_check(&model, &state, &u, surface);
    }

    #[test]
    fn residual_is_gradient_of_potential_on_secant() {
        let (model, mut state) = cracked_single_element(1.0, 0.1);
        let u = affine_u(&model.mesh, [[8e-5, 1e-5], [3e-5, 0.0]]);
        let asm = assemble(&model, &state, &u, 0.0, false).unwrap();
        let cell = state.cells[0].as_mut().unwrap();
        let opening = asm.reports[0]
            .unwrap()
            .opening(&cell.state, model.material.mode_mix);
        cell.state = commit_state(&opening, &cell.state, 0.0, &model.material, None);

        let st = state.cells[0].as_ref().unwrap().state;
        let m = model.material;
        let slope = st.envelope_traction
            * (1.0 - (-m.penalty_stiffness() * st.max_opening / m.tensile_strength).exp())
            / st.max_opening;
        let surface = move |z: f64| 0.5 * slope * z * z;
        fd_check(&model, &state, &(u * 0.6), surface);
    }

    /// Clamp the x = 0 edge; y-rollers on the x = `size` edge keep a cracked
    /// single element in pure mode-I (no free rotation of the right face).
    fn mode_one_supports(model: &mut Model, size: f64) {
        for n in 0..model.mesh.nodes.len() {
            let p = model.mesh.nodes[n];
            if p.x.abs() < 1e-12 {
                model.dofs.constrain(n, 0, 0.0);
                model.dofs.constrain(n, 1, 0.0);
            } else if (p.x - size).abs() < 1e-12 {
                model.dofs.constrain(n, 1, 0.0);
            }
        }
    }

    #[test]
    fn elastic_force_step_converges_in_one_iteration() {
        let mesh = structured_grid(1, 1, Point2::new, 0.1);
        let mut model = Model::new(mesh, mat(), None).unwrap();
        mode_one_supports(&mut model, 1.0);
        let tip = find_node(&model.mesh, 1.0, 0.5);
        model.dofs.add_point_load(tip, 0, 1.0);

        let mut state = model.initial_state();
        let rec = newton_step(
            &model,
            &mut state,
            &spec(Control::Force { d_lambda: 1e3 }, 0.0),
        )
        .unwrap();
        assert_eq!(rec.iterations, 1);
        assert_eq!(rec.cuts, 0);
        assert_eq!(state.lambda, 1e3);
        assert!(state.u.amax() > 0.0);

        // Bitwise determinism of a repeated run.
        let mut state2 = model.initial_state();
        newton_step(
            &model,
            &mut state2,
            &spec(Control::Force { d_lambda: 1e3 }, 0.0),
        )
        .unwrap();
        for i in 0..state.u.len() {
            assert_eq!(state.u[i].to_bits(), state2.u[i].to_bits());
        }
    }

    #[test]
    fn dead_loads_superpose_with_the_scaled_pattern() {
        let mesh = structured_grid(1, 1, Point2::new, 0.1);
        let mut model = Model::new(mesh, mat(), None).unwrap();
        mode_one_supports(&mut model, 1.0);
        let tip = find_node(&model.mesh, 1.0, 0.5);
        model.dofs.add_point_load(tip, 0, 1.0);
        model.dofs.add_dead_load(tip, 0, 50.0);

        let mut state = model.initial_state();
        newton_step(
            &model,
            &mut state,
            &spec(Control::Force { d_lambda: 1e3 }, 0.0),
        )
        .unwrap();

        // Elastic response to pattern * 1050 with no dead load must match.
        let mut reference = Model::new(
            structured_grid(1, 1, Point2::new, 0.1),
            mat(),
            None,
        )
        .unwrap();
        mode_one_supports(&mut reference, 1.0);
        reference.dofs.add_point_load(tip, 0, 1.0);
        let mut ref_state = reference.initial_state();
        newton_step(
            &reference,
            &mut ref_state,
            &spec(Control::Force { d_lambda: 1050.0 }, 0.0),
        )
        .unwrap();
        for i in 0..state.u.len() {
            assert_relative_eq!(state.u[i], ref_state.u[i], epsilon = 1e-15);
        }
    }

    #[test]
    fn rest_step_advances_time_only() {
        let (model, mut state) = cracked_single_element(0.2, 0.05);
        let u_before = state.u.clone();
        let rec = newton_step(
            &model,
            &mut state,
            &spec(Control::Force { d_lambda: 0.0 }, 5.0),
        )
        .unwrap();
        assert_eq!(rec.iterations, 0);
        assert_eq!(state.time, 5.0);
        assert_eq!(state.step, 1);
        assert_eq!(state.u, u_before);
    }

    #[test]
    fn displacement_driven_crack_softens() {
        let (mut model, mut state) = cracked_single_element(0.2, 0.05);
        mode_one_supports(&mut model, 0.2);
        let tip = find_node(&model.mesh, 0.2, 0.1);
        model.dofs.constrain(tip, 0, 0.0);

        let drive = spec(
            Control::Displacement {
                node: tip,
                dir: 0,
                d_value: 1e-5,
            },
            0.0,
        );
        let mut peak: f64 = 0.0;
        let mut last = 0.0;
        let mut max_opening_prev = 0.0;
        for _ in 0..40 {
            let rec = newton_step(&model, &mut state, &drive).unwrap();
            peak = peak.max(rec.reaction);
            last = rec.reaction;
            let zmx = state.cells[0].as_ref().unwrap().state.max_opening;
            assert!(zmx >= max_opening_prev);
            max_opening_prev = zmx;
        }
        assert!(peak > 0.0);
        assert!(
            last < 0.5 * peak,
            "no softening: peak {peak:.3e}, last {last:.3e}"
        );
        assert!(max_opening_prev > 1e-4);
    }

    /// Two-element strip (0.4 x 0.2 m) with a vertical crack through the
    /// left element and a consistent uniform-traction load on the right
    /// edge.  The elastic neighbour element keeps the post-peak response on
    /// the stable branch for moderate openings: a lone cracked element has a
    /// quadratic edge mode the centroid-collocated enhancement cannot
    /// resist, and drifts onto a parasitic bulged equilibrium once softening
    /// starts.
    fn cracked_strip() -> (Model, GlobalState, OpeningPair) {
        let size = 0.2;
        let mesh = structured_grid(2, 1, |s, t| Point2::new(2.0 * size * s, size * t), 0.05);
        let mut model = Model::new(mesh, mat(), None).unwrap();
        for n in 0..model.mesh.nodes.len() {
            let p = model.mesh.nodes[n];
            if p.x.abs() < 1e-12 {
                model.dofs.constrain(n, 0, 0.0);
                model.dofs.constrain(n, 1, 0.0);
            } else if (p.x - 2.0 * size).abs() < 1e-12 {
                model.dofs.constrain(n, 1, 0.0);
            }
        }
        let corner_b = find_node(&model.mesh, 2.0 * size, 0.0);
        let corner_t = find_node(&model.mesh, 2.0 * size, size);
        let mid = find_node(&model.mesh, 2.0 * size, 0.5 * size);
        model.dofs.add_point_load(corner_b, 0, 1.0 / 6.0);
        model.dofs.add_point_load(corner_t, 0, 1.0 / 6.0);
        model.dofs.add_point_load(mid, 0, 2.0 / 3.0);
        let pair = OpeningPair {
            node_a: find_node(&model.mesh, 0.0, 0.0),
            node_b: corner_b,
            dir: 0,
        };
        model.opening_pair = Some(pair);
        let mut state = model.initial_state();
        let corners = model.mesh.corner_polygon(0);
        let segment = CrackSegment::new(
            0,
            Vector2::new(1.0, 0.0),
            Point2::new(0.5 * size, 0.0),
            Point2::new(0.5 * size, size),
            &corners,
        )
        .unwrap();
        state.cells[0] = Some(CrackCell {
            segment,
            state: CohesiveState::virgin(&model.material),
        });
        (model, state, pair)
    }

    #[test]
    fn cmod_control_hits_target_and_traverses_peak() {
        let (model, mut state, pair) = cracked_strip();
        let drive = spec(Control::Cmod { pair, d_value: 1e-5 }, 0.0);
        let mut lambdas = Vec::new();
        for k in 1..=5 {
            let target = k as f64 * 1e-5;
            newton_step(&model, &mut state, &drive).unwrap();
            let got = pair.measure(&state.u);
            assert!(
                (got - target).abs() <= 1e-6 * target,
                "step {k}: cmod {got:.9e} vs target {target:.9e}"
            );
            assert!(state.lambda > 0.0, "step {k}: lambda {:.3e}", state.lambda);
            lambdas.push(state.lambda);
        }
        let peak = lambdas.iter().cloned().fold(f64::MIN, f64::max);
        let peak_at = lambdas.iter().position(|&l| l == peak).unwrap();
        assert!(peak > 0.0);
        assert!(peak_at > 0 && peak_at < lambdas.len() - 1, "peak not interior");
        assert!(*lambdas.last().unwrap() < 0.25 * peak);
    }

    #[test]
    fn force_step_past_capacity_fails_after_cuts() {
        let (mut model, mut state) = cracked_single_element(0.2, 0.05);
        mode_one_supports(&mut model, 0.2);
        let tip = find_node(&model.mesh, 0.2, 0.1);
        model.dofs.add_point_load(tip, 0, 1.0);

        // Way past what the cohesive crack can transmit.
        let err = newton_step(
            &model,
            &mut state,
            &spec(Control::Force { d_lambda: 6e4 }, 0.0),
        )
        .unwrap_err();
        assert!(matches!(err, SimError::Solver(_)), "got {err:?}");
        // Substeps commit as they converge, so the state is parked at the
        // last equilibrium below capacity, not rolled back and not at the
        // unreachable target.
        assert!(state.lambda > 0.0 && state.lambda < 3e4, "{}", state.lambda);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn displacement_control_requires_constrained_dof() {
        let (model, mut state) = cracked_single_element(0.2, 0.05);
        let err = newton_step(
            &model,
            &mut state,
            &spec(
                Control::Displacement {
                    node: 0,
                    dir: 0,
                    d_value: 1e-5,
                },
                0.0,
            ),
        )
        .unwrap_err();
        assert!(matches!(err, SimError::Validation(_)));
    }

    #[test]
    fn opening_pair_measures_relative_motion() {
        let mut u = DVector::zeros(8);
        u[dof(1, 0)] = 3e-4;
        u[dof(3, 0)] = 1e-4;
        let pair = OpeningPair {
            node_a: 3,
            node_b: 1,
            dir: 0,
        };
        assert_relative_eq!(pair.measure(&u), 2e-4);
    }
}
