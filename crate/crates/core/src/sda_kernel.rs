//! Element-level embedded-discontinuity mechanics.
//!
//! A cracked element carries one cohesive point at the crack mid-point
//! (constant jump over the element).  The kernel computes the characteristic
//! length, the enhanced strain, the elastic trial stress, the 2x2 traction
//! balance and the condensed tangent.  Everything here is pure: history is
//! only advanced by the caller committing converged openings.
//!
//! Voigt convention throughout: strains `[e11, e22, 2 e12]`, stresses
//! `[s11, s22, s12]`.  With that pairing the same 3-vector `v_a` serves both
//! as the projection of a stress onto the crack frame (`V_a : sigma =
//! v_a . sigma_voigt`) and as the opening-to-strain map of the enhancement.

use nalgebra::{Matrix2, Matrix3, Point2, Vector2, Vector3};

use crate::error::SimError;
use crate::material_law::{
    detect_branches, effective_opening, BranchState, BulkMaterial, CohesiveState, CrackOpening,
    HealingAgent, LawEval,
};

/// Absolute residual tolerance of the local Newton, as a fraction of f_t.
pub const LOCAL_TOL_FACTOR: f64 = 1e-10;
/// Local Newton iteration budget per branch sweep.
pub const LOCAL_MAX_ITER: usize = 50;
/// Backtracking halvings allowed when the residual grows.
pub const LOCAL_MAX_BACKTRACK: usize = 10;
/// Branch (loading vs. secant) re-detection sweeps.
pub const LOCAL_MAX_SWEEPS: usize = 5;

/// An embedded crack segment inside one element.
#[derive(Debug, Clone, Copy)]
pub struct CrackSegment {
    pub element_id: usize,
    /// Unit normal to the crack line.
    pub normal: Vector2<f64>,
    /// Unit tangent, `normal` rotated by +90 degrees.
    pub tangent: Vector2<f64>,
    /// Where the crack enters and leaves the element boundary.
    pub entry_point: Point2<f64>,
    pub exit_point: Point2<f64>,
    /// Characteristic length V/A of the element for this crack direction.
    pub l_c: f64,
}

impl CrackSegment {
    /// Build a segment from the element corner polygon and a crack chord.
    pub fn new(
        element_id: usize,
        normal: Vector2<f64>,
        entry_point: Point2<f64>,
        exit_point: Point2<f64>,
        corners: &[Point2<f64>],
    ) -> Result<Self, SimError> {
        let n = normal.normalize();
        let l_c = characteristic_length(corners, &n)?;
        Ok(CrackSegment {
            element_id,
            normal: n,
            tangent: rotate90(&n),
            entry_point,
            exit_point,
            l_c,
        })
    }

    /// The cohesive sampling point.
    pub fn midpoint(&self) -> Point2<f64> {
        Point2::from((self.entry_point.coords + self.exit_point.coords) * 0.5)
    }

    /// Voigt projection vectors (v1 for n(x)n, v2 for the symmetrised n(x)t).
    pub fn projections(&self) -> (Vector3<f64>, Vector3<f64>) {
        projection_vectors(&self.normal, &self.tangent)
    }
}

pub fn rotate90(v: &Vector2<f64>) -> Vector2<f64> {
    Vector2::new(-v.y, v.x)
}

/// Voigt forms of V1 = n(x)n and V2 = (n(x)t)^S.
pub fn projection_vectors(n: &Vector2<f64>, t: &Vector2<f64>) -> (Vector3<f64>, Vector3<f64>) {
    (
        Vector3::new(n.x * n.x, n.y * n.y, 2.0 * n.x * n.y),
        Vector3::new(n.x * t.x, n.y * t.y, n.x * t.y + n.y * t.x),
    )
}

/// Signed polygon area (shoelace); counter-clockwise is positive.
pub fn polygon_area(corners: &[Point2<f64>]) -> f64 {
    let n = corners.len();
    let mut twice = 0.0;
    for i in 0..n {
        let a = corners[i];
        let b = corners[(i + 1) % n];
        twice += a.x * b.y - b.x * a.y;
    }
    0.5 * twice
}

/// Area centroid of a simple polygon.
pub fn polygon_centroid(corners: &[Point2<f64>]) -> Result<Point2<f64>, SimError> {
    let n = corners.len();
    let area = polygon_area(corners);
    if area.abs() < f64::MIN_POSITIVE {
        return Err(SimError::Geometry("degenerate polygon".into()));
    }
    let mut cx = 0.0;
    let mut cy = 0.0;
    for i in 0..n {
        let a = corners[i];
        let b = corners[(i + 1) % n];
        let w = a.x * b.y - b.x * a.y;
        cx += (a.x + b.x) * w;
        cy += (a.y + b.y) * w;
    }
    Ok(Point2::new(cx / (6.0 * area), cy / (6.0 * area)))
}

/// Characteristic length l_c = V / A: element area over the length of the
/// chord through the centroid running parallel to the crack (perpendicular
/// to `n`).
pub fn characteristic_length(
    corners: &[Point2<f64>],
    normal: &Vector2<f64>,
) -> Result<f64, SimError> {
    let area = polygon_area(corners);
    if area <= 0.0 {
        return Err(SimError::Geometry(format!(
            "element area must be positive (got {area:e}); corner ordering must be counter-clockwise"
        )));
    }
    let centroid = polygon_centroid(corners)?;
    let dir = rotate90(normal);
    let chord = chord_through(corners, &centroid, &dir)?;
    Ok(area / chord)
}

/// Length of the intersection of the line `p(s) = origin + s dir` with the
/// polygon, measured as the span between the extreme boundary crossings.
fn chord_through(
    corners: &[Point2<f64>],
    origin: &Point2<f64>,
    dir: &Vector2<f64>,
) -> Result<f64, SimError> {
    let n = corners.len();
    let mut s_min = f64::INFINITY;
    let mut s_max = f64::NEG_INFINITY;
    let mut hits = 0usize;
    for i in 0..n {
        let a = corners[i];
        let b = corners[(i + 1) % n];
        let e = b - a;
        // Solve origin + s dir = a + u e, u in [0, 1].
        let det = dir.x * (-e.y) - dir.y * (-e.x);
        if det.abs() < 1e-14 * (dir.norm() * e.norm()).max(f64::MIN_POSITIVE) {
            continue; // edge parallel to the chord
        }
        let rhs = a - origin;
        let s = (rhs.x * (-e.y) - rhs.y * (-e.x)) / det;
        let u = (dir.x * rhs.y - dir.y * rhs.x) / det;
        if (-1e-12..=1.0 + 1e-12).contains(&u) {
            hits += 1;
            s_min = s_min.min(s);
            s_max = s_max.max(s);
        }
    }
    if hits < 2 || s_max <= s_min {
        return Err(SimError::Geometry(
            "crack-parallel chord through the centroid misses the element boundary".into(),
        ));
    }
    Ok((s_max - s_min) * dir.norm())
}

/// Enhancement strain `(V1 zn + V2 zt) / l_c` in Voigt form.
pub fn enhanced_strain(zeta_n: f64, zeta_t: f64, seg: &CrackSegment) -> Vector3<f64> {
    let (v1, v2) = seg.projections();
    (v1 * zeta_n + v2 * zeta_t) / seg.l_c
}

/// Elastic trial stress: bulk elasticity applied to the total strain minus
/// the enhancement frozen at the committed openings.
pub fn trial_stress(
    total_strain: &Vector3<f64>,
    state: &CohesiveState,
    seg: &CrackSegment,
    material: &BulkMaterial,
) -> Vector3<f64> {
    let enh = enhanced_strain(state.opening_normal, state.opening_tangential, seg);
    material.elasticity() * (total_strain - enh)
}

/// The 2x2 crack-frame condensation matrix G with entries `v_a . C . v_b`.
pub fn balance_matrix(elasticity: &Matrix3<f64>, v1: &Vector3<f64>, v2: &Vector3<f64>) -> Matrix2<f64> {
    let b1 = elasticity * v1;
    let b2 = elasticity * v2;
    Matrix2::new(v1.dot(&b1), v1.dot(&b2), v2.dot(&b1), v2.dot(&b2))
}

/// What the local traction balance produced.
#[derive(Debug, Clone, Copy)]
pub struct LocalSolveReport {
    pub d_zeta_n: f64,
    pub d_zeta_t: f64,
    pub iterations: usize,
    pub residual_norm: f64,
    pub converged: bool,
    /// Branches the solution settled on; the condensed tangent must be
    /// evaluated on the same branches.
    pub branches: BranchState,
}

impl LocalSolveReport {
    pub fn opening(&self, state: &CohesiveState, mix: f64) -> CrackOpening {
        CrackOpening::new(
            state.opening_normal + self.d_zeta_n,
            state.opening_tangential + self.d_zeta_t,
            mix,
        )
    }
}

/// Solve the cohesive balance at one crack point: find opening increments
/// such that the projected bulk stress equals the (regularised) traction.
/// Returns the report plus the element stress at the solution.
pub fn solve_local(
    total_strain: &Vector3<f64>,
    state: &CohesiveState,
    seg: &CrackSegment,
    material: &BulkMaterial,
    agent: Option<&HealingAgent>,
    now: f64,
) -> (LocalSolveReport, Vector3<f64>) {
    let de = material.elasticity();
    let (v1, v2) = seg.projections();
    let b1 = de * v1;
    let b2 = de * v2;
    let g = Matrix2::new(v1.dot(&b1), v1.dot(&b2), v2.dot(&b1), v2.dot(&b2));
    let sigma_tr = trial_stress(total_strain, state, seg, material);
    let p = Vector2::new(v1.dot(&sigma_tr), v2.dot(&sigma_tr));

    let law = LawEval::regularized(material, agent);
    let tol = LOCAL_TOL_FACTOR * material.tensile_strength;
    let mix = material.mode_mix;
    let zn0 = state.opening_normal;
    let zt0 = state.opening_tangential;

    let residual = |x: &Vector2<f64>, branches: BranchState| -> Vector2<f64> {
        let op = CrackOpening::new(zn0 + x.x, zt0 + x.y, mix);
        let t = law.traction_branched(&op, state, now, branches);
        p - (g * x) / seg.l_c - t
    };
    let detect = |x: &Vector2<f64>| -> BranchState {
        let z = effective_opening((zn0 + x.x).max(0.0), zt0 + x.y, mix);
        detect_branches(z, state)
    };

    let mut x = Vector2::zeros();
    let mut iterations = 0usize;
    let mut branches = detect(&x);
    let mut res = residual(&x, branches);
    let mut converged = res.norm() <= tol;

    // Damped Newton under frozen branches.  Reports whether it hit a
    // non-positive-definite Jacobian or a failed line search, which on
    // coarse elements (l_c > C G_f / f_t^2) signals the material-level
    // snap-through hump that Newton cannot cross from this side.
    let newton = |x: &mut Vector2<f64>,
                      res: &mut Vector2<f64>,
                      branches: BranchState,
                      iterations: &mut usize,
                      budget: usize,
                      bail_on_trouble: bool|
     -> bool {
        let mut res_norm = res.norm();
        for _ in 0..budget {
            if res_norm <= tol {
                return false;
            }
            let op = CrackOpening::new(zn0 + x.x, zt0 + x.y, mix);
            let d = law.tangent_branched(&op, state, now, branches);
            let jac = g / seg.l_c + d;
            let det = jac[(0, 0)] * jac[(1, 1)] - jac[(0, 1)] * jac[(1, 0)];
            if bail_on_trouble && (det <= 0.0 || jac[(0, 0)] <= 0.0) {
                return true;
            }
            let Some(inv) = jac.try_inverse() else {
                return true;
            };
            let step = inv * *res;
            *iterations += 1;
            let mut scale = 1.0;
            let mut best = *x + step;
            let mut best_res = residual(&best, branches);
            let mut improved = best_res.norm() <= res_norm || best_res.norm() <= tol;
            for _ in 0..LOCAL_MAX_BACKTRACK {
                if improved {
                    break;
                }
                scale *= 0.5;
                best = *x + step * scale;
                best_res = residual(&best, branches);
                improved = best_res.norm() <= res_norm || best_res.norm() <= tol;
            }
            if !improved && bail_on_trouble {
                return true;
            }
            *x = best;
            *res = best_res;
            res_norm = res.norm();
        }
        false
    };

    'sweeps: for _ in 0..LOCAL_MAX_SWEEPS {
        if converged {
            break;
        }
        let troubled = newton(
            &mut x,
            &mut res,
            branches,
            &mut iterations,
            LOCAL_MAX_ITER / 2,
            true,
        );
        if troubled && res.norm() > tol {
            // Multi-start rescue: scan candidate rays and restart Newton from
            // the best scanned point, adopting the result only when it beats
            // the stalled iterate (stalls happen in local minima of |r| that
            // no descent path leaves).  Ray (a) heads towards the point where
            // the projected bulk stress is exhausted (x = l_c G^-1 p); the
            // stable descending-branch root lies along it past the hump.
            // Ray (b) covers contact: it relieves the shear projection while
            // slaving the normal opening to the linear contact balance, since
            // ray (a) would drive the normal deep into the penalty regime.
            let mut best = Vector2::zeros();
            let mut best_norm = f64::INFINITY;
            let mut scan_ray = |dir: Vector2<f64>, slaved_n: bool| {
                if dir.norm() == 0.0 {
                    return;
                }
                let point = |t: f64| -> Vector2<f64> {
                    let mut c = dir * t;
                    if slaved_n {
                        c.x = (p.x * seg.l_c - g[(0, 1)] * c.y)
                            / (g[(0, 0)] + material.penalty_stiffness() * seg.l_c);
                    }
                    c
                };
                let scan = 48;
                let mut prev = point(0.0);
                let mut prev_r = residual(&prev, branches);
                let mut brackets = 0;
                for k in 1..=scan {
                    let cand = point(k as f64 / scan as f64);
                    let r = residual(&cand, branches);
                    if r.norm() < best_norm {
                        best_norm = r.norm();
                        best = cand;
                    }
                    // The residual projected on the scan direction changes
                    // sign across a root; bisect it, because Newton started
                    // between the stiffness hump and the root walks back out
                    // of the basin (the Jacobian flips sign there).
                    let u = cand - prev;
                    let (s_prev, s_cur) = (prev_r.dot(&u), r.dot(&u));
                    if s_prev * s_cur < 0.0 && brackets < 4 {
                        brackets += 1;
                        let (mut lo, mut s_lo, mut hi) = (prev, s_prev, cand);
                        for _ in 0..60 {
                            let mid = (lo + hi) * 0.5;
                            let rm = residual(&mid, branches);
                            if rm.norm() < best_norm {
                                best_norm = rm.norm();
                                best = mid;
                            }
                            let sm = rm.dot(&u);
                            if sm * s_lo <= 0.0 {
                                hi = mid;
                            } else {
                                lo = mid;
                                s_lo = sm;
                            }
                        }
                    }
                    prev = cand;
                    prev_r = r;
                }
            };
            if let Some(ginv) = g.try_inverse() {
                scan_ray(ginv * p * seg.l_c, false);
            }
            if g[(1, 1)] > 0.0 {
                scan_ray(Vector2::new(0.0, p.y * seg.l_c / g[(1, 1)]), true);
            }
            if best_norm.is_finite() {
                let mut x2 = best;
                let mut res2 = residual(&x2, branches);
                newton(
                    &mut x2,
                    &mut res2,
                    branches,
                    &mut iterations,
                    LOCAL_MAX_ITER / 2,
                    false,
                );
                if res2.norm() < res.norm() {
                    x = x2;
                }
            }
        }
        // Re-detect: the solution must be consistent with its own branches.
        let fresh = detect(&x);
        res = residual(&x, fresh);
        if res.norm() <= tol {
            branches = fresh;
            converged = true;
            break 'sweeps;
        }
        if fresh == branches {
            break 'sweeps; // consistent but not converged: give up
        }
        branches = fresh;
    }

    let sigma = sigma_tr - (b1 * x.x + b2 * x.y) / seg.l_c;
    (
        LocalSolveReport {
            d_zeta_n: x.x,
            d_zeta_t: x.y,
            iterations,
            residual_norm: res.norm(),
            converged,
            branches,
        },
        sigma,
    )
}

/// Inverse of (G + l_c D) with the spec'd rescue ladder: tiny diagonal shift
/// first, elastic fallback (None) if still singular.
pub fn condensation_matrix(
    g: &Matrix2<f64>,
    d: &Matrix2<f64>,
    l_c: f64,
) -> Option<Matrix2<f64>> {
    let a = g + d * l_c;
    if let Some(inv) = invert_if_well_posed(&a) {
        return Some(inv);
    }
    let shifted = a + Matrix2::identity() * (1e-12 * g.trace());
    invert_if_well_posed(&shifted)
}

fn invert_if_well_posed(a: &Matrix2<f64>) -> Option<Matrix2<f64>> {
    let det = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)];
    let scale = a.amax();
    if det.abs() <= 1e-14 * scale * scale {
        None
    } else {
        Some(Matrix2::new(a[(1, 1)], -a[(0, 1)], -a[(1, 0)], a[(0, 0)]) / det)
    }
}

/// Condensed elastoplastic tangent C - C:[V](G + l_c D)^-1:[V]:C at a
/// converged cohesive point, evaluated on the branches the local solve
/// settled on.  Falls back to the elastic tensor when the crack-frame
/// system is singular; the boolean reports that fallback.
pub fn elastoplastic_tangent(
    opening: &CrackOpening,
    state: &CohesiveState,
    seg: &CrackSegment,
    material: &BulkMaterial,
    agent: Option<&HealingAgent>,
    now: f64,
    branches: BranchState,
) -> (Matrix3<f64>, bool) {
    let de = material.elasticity();
    let (v1, v2) = seg.projections();
    let b1 = de * v1;
    let b2 = de * v2;
    let g = Matrix2::new(v1.dot(&b1), v1.dot(&b2), v2.dot(&b1), v2.dot(&b2));
    let law = LawEval::regularized(material, agent);
    let d = law.tangent_branched(opening, state, now, branches);
    match condensation_matrix(&g, &d, seg.l_c) {
        Some(m) => {
            let mut s = Matrix3::zeros();
            let b = [b1, b2];
            for (i, bi) in b.iter().enumerate() {
                for (j, bj) in b.iter().enumerate() {
                    s += bi * bj.transpose() * m[(i, j)];
                }
            }
            (de - s, false)
        }
        None => (de, true),
    }
}
