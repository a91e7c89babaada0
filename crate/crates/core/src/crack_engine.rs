//! Crack initiation, propagation direction, and path geometry: stress-based
//! tracking plus prescribed straight and curved path families, discretised
//! as one straight chord per element.

use std::collections::HashMap;

use nalgebra::{DVector, Point2, SVector, Vector2, Vector3};

use crate::error::SimError;
use crate::fem_core::{
    dof, gauss_rule, shape_functions, strain_displacement, CrackCell, GlobalState, Mesh, Model,
};
use crate::material_law::CohesiveState;
use crate::sda_kernel::{rotate90, CrackSegment};

/// Tip element must have softened below this fraction of f_t before the
/// crack may extend; keeps one-element-per-step growth without bursts.
const ACTIVATION_SOFTENING: f64 = 0.99;
/// Nonlocal averaging radius for tracked direction, in median element sizes.
const TRACKING_RADIUS_FACTOR: f64 = 1.5;
/// Half-width of the candidate-direction scan around the previous chord.
const TRACKING_SCAN_DEG: i32 = 45;

/// How the path chooses its geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PathMode {
    /// Direction from the nonlocally averaged stress at the tip.
    Tracked,
    /// Fixed line through the seed along the seed normal.
    PrescribedStraight,
    /// Chords of the curve sqrt(y) + a (x - x0) = 0, grown towards +y.
    PrescribedCurve { a: f64, x0: f64 },
}

/// An ordered chain of element chords.  Consecutive segments share the
/// exit/entry point exactly, and an element appears at most once.
#[derive(Debug, Clone)]
pub struct CrackPath {
    pub mode: PathMode,
    pub segments: Vec<CrackSegment>,
    /// Global step index at which each segment was created.
    pub created_step: Vec<usize>,
    pub tip: Point2<f64>,
    /// Set once the tip has reached the domain boundary.
    pub closed: bool,
}

impl CrackPath {
    pub fn contains_element(&self, e: usize) -> bool {
        self.segments.iter().any(|s| s.element_id == e)
    }

    pub fn tip_element(&self) -> Option<usize> {
        self.segments.last().map(|s| s.element_id)
    }

    fn push(&mut self, seg: CrackSegment, step: usize) {
        self.tip = seg.exit_point;
        self.segments.push(seg);
        self.created_step.push(step);
    }
}

/// Where and how a crack nucleates.
#[derive(Debug, Clone, Copy)]
pub struct InitiationSite {
    pub element: usize,
    pub seed: Point2<f64>,
    pub normal: Vector2<f64>,
}

/// Largest principal stress and its (unit) direction.
#[derive(Debug, Clone, Copy)]
pub struct Principal {
    pub value: f64,
    pub direction: Vector2<f64>,
}

/// Closed-form maximum principal value/direction of a plane stress state
/// `[s_xx, s_yy, s_xy]`.  The direction sign is canonical: positive x
/// component (positive y on the x = 0 ray); hydrostatic states report (1, 0).
pub fn max_principal(s: &Vector3<f64>) -> Principal {
    let (sx, sy, txy) = (s[0], s[1], s[2]);
    let mean = 0.5 * (sx + sy);
    let dev = 0.5 * (sx - sy);
    let r = dev.hypot(txy);
    let scale = sx.abs().max(sy.abs()).max(txy.abs()).max(1.0);
    let mut direction = if r <= f64::EPSILON * scale {
        Vector2::new(1.0, 0.0)
    } else {
        let theta = 0.5 * (2.0 * txy).atan2(sx - sy);
        Vector2::new(theta.cos(), theta.sin())
    };
    if direction.x < 0.0 || (direction.x == 0.0 && direction.y < 0.0) {
        direction = -direction;
    }
    Principal {
        value: mean + r,
        direction,
    }
}

fn element_u(mesh: &Mesh, u: &DVector<f64>, e: usize) -> SVector<f64, 16> {
    let mut u_e = SVector::<f64, 16>::zeros();
    for (a, &n) in mesh.elements[e].iter().enumerate() {
        u_e[2 * a] = u[dof(n, 0)];
        u_e[2 * a + 1] = u[dof(n, 1)];
    }
    u_e
}

/// Volume-averaged elastic stress of one element at displacement `u`.
pub fn element_average_stress(model: &Model, u: &DVector<f64>, e: usize) -> Vector3<f64> {
    let coords = model.mesh.element_coords(e);
    let de = model.material.elasticity();
    let u_e = element_u(&model.mesh, u, e);
    let mut acc = Vector3::zeros();
    let mut vol = 0.0;
    for gp in gauss_rule(3) {
        // The mesh was validated with positive Jacobians at these points.
        let geo = strain_displacement(&coords, gp.xi, gp.eta).expect("validated mesh");
        let w = gp.weight * geo.det_j;
        acc += de * (geo.b * u_e) * w;
        vol += w;
    }
    acc / vol
}

/// Rankine screening over elements without an embedded crack: the element
/// whose quadrature-averaged maximum principal stress most exceeds f_t, with
/// the crack normal along that principal direction.  The seed point sits on
/// a boundary edge of the element when it has one, else at the centroid.
pub fn check_initiation(model: &Model, state: &GlobalState) -> Option<InitiationSite> {
    let ft = model.material.tensile_strength;
    let mut best: Option<(usize, Principal)> = None;
    for e in 0..model.mesh.elements.len() {
        if state.cells[e].is_some() {
            continue;
        }
        let p = max_principal(&element_average_stress(model, &state.u, e));
        if p.value > ft && best.as_ref().is_none_or(|(_, b)| p.value > b.value) {
            best = Some((e, p));
        }
    }
    let (element, p) = best?;
    Some(InitiationSite {
        element,
        seed: seed_point(&model.mesh, element),
        normal: p.direction,
    })
}

fn edge_key(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

fn edge_map(mesh: &Mesh) -> HashMap<(usize, usize), Vec<usize>> {
    let mut map: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for (e, conn) in mesh.elements.iter().enumerate() {
        for i in 0..4 {
            map.entry(edge_key(conn[i], conn[(i + 1) % 4]))
                .or_default()
                .push(e);
        }
    }
    map
}

fn seed_point(mesh: &Mesh, e: usize) -> Point2<f64> {
    let edges = edge_map(mesh);
    let conn = &mesh.elements[e];
    let poly = mesh.corner_polygon(e);
    for i in 0..4 {
        if edges[&edge_key(conn[i], conn[(i + 1) % 4])].len() == 1 {
            return Point2::from((poly[i].coords + poly[(i + 1) % 4].coords) * 0.5);
        }
    }
    mesh.element_centroid(e)
}

fn tip_on_boundary(mesh: &Mesh, p: &Point2<f64>) -> bool {
    let edges = edge_map(mesh);
    for (e, conn) in mesh.elements.iter().enumerate() {
        let poly = mesh.corner_polygon(e);
        for i in 0..4 {
            if edges[&edge_key(conn[i], conn[(i + 1) % 4])].len() == 1
                && point_on_segment(&poly[i], &poly[(i + 1) % 4], p)
            {
                return true;
            }
        }
    }
    false
}

fn point_on_segment(a: &Point2<f64>, b: &Point2<f64>, p: &Point2<f64>) -> bool {
    let e = b - a;
    let d = p - a;
    let len = e.norm();
    let tol = 1e-9 * len;
    (e.x * d.y - e.y * d.x).abs() <= tol * len && (-tol..=len + tol).contains(&(e.dot(&d) / len))
}

fn point_in_quad(poly: &[Point2<f64>; 4], p: &Point2<f64>) -> bool {
    // Corners are counter-clockwise (validated positive area).
    for i in 0..4 {
        let e = poly[(i + 1) % 4] - poly[i];
        let d = p - poly[i];
        if e.x * d.y - e.y * d.x < -1e-9 * e.norm_squared() {
            return false;
        }
    }
    true
}

fn quadratic_roots(a: f64, b: f64, c: f64) -> Vec<f64> {
    let scale = a.abs().max(b.abs()).max(c.abs());
    if scale == 0.0 {
        return Vec::new();
    }
    if a.abs() <= 1e-14 * scale {
        if b.abs() <= 1e-14 * scale {
            return Vec::new();
        }
        return vec![-c / b];
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return Vec::new();
    }
    let q = -0.5 * (b + b.signum() * disc.sqrt());
    if q == 0.0 {
        return vec![0.0];
    }
    let mut roots = vec![q / a, c / q];
    roots.sort_by(f64::total_cmp);
    roots.dedup_by(|x, y| (*x - *y).abs() <= 1e-12 * scale.max(1.0));
    roots
}

/// Both intersections of the line `point + t dir` with the quad boundary,
/// ordered along `dir`.
fn line_polygon_chord(
    poly: &[Point2<f64>; 4],
    point: &Point2<f64>,
    dir: &Vector2<f64>,
) -> Result<(Point2<f64>, Point2<f64>), SimError> {
    let diam = (poly[2] - poly[0]).norm().max((poly[3] - poly[1]).norm());
    let mut ts: Vec<f64> = Vec::new();
    for i in 0..4 {
        let p = poly[i];
        let e = poly[(i + 1) % 4] - p;
        let det = e.x * dir.y - e.y * dir.x;
        if det.abs() <= 1e-14 * e.norm() {
            continue;
        }
        let rhs = p - point;
        let t = (e.x * rhs.y - e.y * rhs.x) / det;
        let s = (dir.x * rhs.y - dir.y * rhs.x) / det;
        if (-1e-9..=1.0 + 1e-9).contains(&s) {
            ts.push(t);
        }
    }
    ts.sort_by(f64::total_cmp);
    ts.dedup_by(|x, y| (*x - *y).abs() <= 1e-9 * diam);
    if ts.len() < 2 {
        return Err(SimError::Geometry(
            "crack chord misses the element".into(),
        ));
    }
    let &t0 = ts.first().unwrap();
    let &t1 = ts.last().unwrap();
    Ok((point + dir * t0, point + dir * t1))
}

/// Segment for `element` from the chord of the line through `point` with
/// crack normal `normal`; entry/exit ordered along the crack tangent.
pub fn embed(
    mesh: &Mesh,
    element: usize,
    point: &Point2<f64>,
    normal: &Vector2<f64>,
) -> Result<CrackSegment, SimError> {
    let poly = mesh.corner_polygon(element);
    let n = normal.normalize();
    let (entry, exit) = line_polygon_chord(&poly, point, &rotate90(&n))?;
    CrackSegment::new(element, n, entry, exit, &poly)
}

/// Boundary crossings of sqrt(y) + a (x - x0) = 0 with the quad.
fn curve_crossings(poly: &[Point2<f64>; 4], a: f64, x0: f64) -> Vec<Point2<f64>> {
    let diam = (poly[2] - poly[0]).norm().max((poly[3] - poly[1]).norm());
    let mut out: Vec<Point2<f64>> = Vec::new();
    for i in 0..4 {
        let p = poly[i];
        let e = poly[(i + 1) % 4] - p;
        // Squared form a^2 (x(s) - x0)^2 = y(s) on the edge parameter s.
        let aa = a * a;
        let qa = aa * e.x * e.x;
        let qb = 2.0 * aa * e.x * (p.x - x0) - e.y;
        let qc = aa * (p.x - x0) * (p.x - x0) - p.y;
        for s in quadratic_roots(qa, qb, qc) {
            if !(-1e-9..=1.0 + 1e-9).contains(&s) {
                continue;
            }
            let pt = p + e * s;
            // Keep the sqrt branch: sqrt(y) = -a (x - x0) >= 0.
            if pt.y < -1e-12 * diam || a * (pt.x - x0) > 1e-9 * diam * a.abs().max(1.0) {
                continue;
            }
            if out.iter().all(|q| (q - pt).norm() > 1e-9 * diam) {
                out.push(pt);
            }
        }
    }
    out
}

/// Exit of the prescribed curve from the quad, growing in +y from `from`.
fn curve_exit(
    poly: &[Point2<f64>; 4],
    a: f64,
    x0: f64,
    from: &Point2<f64>,
) -> Result<Point2<f64>, SimError> {
    let diam = (poly[2] - poly[0]).norm().max((poly[3] - poly[1]).norm());
    curve_crossings(poly, a, x0)
        .into_iter()
        .filter(|p| (p - from).norm() > 1e-9 * diam && p.y > from.y)
        .max_by(|p, q| p.y.total_cmp(&q.y))
        .ok_or_else(|| SimError::Geometry("prescribed curve does not leave the element upwards".into()))
}

fn orient_like(v: Vector2<f64>, like: &Vector2<f64>) -> Vector2<f64> {
    if v.dot(like) < 0.0 {
        -v
    } else {
        v
    }
}

/// First segment of a path at an initiation site (notch tip or Rankine
/// screening result).
pub fn start_path(
    mode: PathMode,
    site: &InitiationSite,
    model: &Model,
    step: usize,
) -> Result<CrackPath, SimError> {
    let mesh = &model.mesh;
    let seg = match mode {
        PathMode::Tracked | PathMode::PrescribedStraight => {
            let raw = embed(mesh, site.element, &site.seed, &site.normal)?;
            // Grow away from the seed: entry is the chord end nearest it.
            let poly = mesh.corner_polygon(site.element);
            if (raw.entry_point - site.seed).norm() <= (raw.exit_point - site.seed).norm() {
                raw
            } else {
                CrackSegment::new(
                    site.element,
                    raw.normal,
                    raw.exit_point,
                    raw.entry_point,
                    &poly,
                )?
            }
        }
        PathMode::PrescribedCurve { a, x0 } => {
            let poly = mesh.corner_polygon(site.element);
            let exit = curve_exit(&poly, a, x0, &site.seed)?;
            let g = (exit - site.seed).normalize();
            let n = orient_like(rotate90(&g), &site.normal);
            CrackSegment::new(site.element, n, site.seed, exit, &poly)?
        }
    };
    let mut path = CrackPath {
        mode,
        segments: Vec::new(),
        created_step: Vec::new(),
        tip: site.seed,
        closed: false,
    };
    path.push(seg, step);
    Ok(path)
}

/// Chord of the ray `tip + t g` through the quad when the ray genuinely
/// traverses it from the tip.
fn chord_into(
    poly: &[Point2<f64>; 4],
    tip: &Point2<f64>,
    g: &Vector2<f64>,
) -> Option<(Point2<f64>, Point2<f64>)> {
    let diam = (poly[2] - poly[0]).norm().max((poly[3] - poly[1]).norm());
    let (a, b) = line_polygon_chord(poly, tip, g).ok()?;
    if (a - tip).norm() > 1e-8 * diam {
        return None;
    }
    if (b - tip).dot(g) <= 1e-8 * diam {
        return None;
    }
    let mid = Point2::from((tip.coords + b.coords) * 0.5);
    point_in_quad(poly, &mid).then_some((*tip, b))
}

/// Gaussian-weighted average stress around `at` over elements that are not
/// cracked, radius 1.5 median element sizes, cut off at four radii.
fn nonlocal_stress(model: &Model, state: &GlobalState, at: &Point2<f64>) -> Vector3<f64> {
    let r = TRACKING_RADIUS_FACTOR * model.mesh.median_element_size();
    let cutoff2 = 16.0 * r * r;
    let de = model.material.elasticity();
    let mut acc = Vector3::zeros();
    let mut wsum = 0.0;
    for e in 0..model.mesh.elements.len() {
        if state.cells[e].is_some() {
            continue;
        }
        let coords = model.mesh.element_coords(e);
        let u_e = element_u(&model.mesh, &state.u, e);
        for gp in gauss_rule(3) {
            let (nv, _) = shape_functions(gp.xi, gp.eta);
            let mut x = Vector2::zeros();
            for i in 0..8 {
                x += coords[i].coords * nv[i];
            }
            let d2 = (x - at.coords).norm_squared();
            if d2 > cutoff2 {
                continue;
            }
            let geo = strain_displacement(&coords, gp.xi, gp.eta).expect("validated mesh");
            let w = (-d2 / (2.0 * r * r)).exp() * gp.weight * geo.det_j;
            acc += de * (geo.b * u_e) * w;
            wsum += w;
        }
    }
    if wsum > 0.0 {
        acc / wsum
    } else {
        Vector3::zeros()
    }
}

/// Tracked-mode growth direction: candidate chords within +-45 degrees of
/// the previous one, 1 degree apart, scored by the normal traction of the
/// nonlocally averaged tip stress.  The winner is the principal direction
/// whenever it lies inside the cone, and the cone edge otherwise.
fn tracked_direction(model: &Model, state: &GlobalState, path: &CrackPath) -> Vector2<f64> {
    let last = path.segments.last().expect("seeded path");
    let t_prev = (last.exit_point - last.entry_point).normalize();
    let sbar = nonlocal_stress(model, state, &path.tip);
    let base = t_prev.y.atan2(t_prev.x);
    let mut best = (f64::NEG_INFINITY, t_prev);
    for k in -TRACKING_SCAN_DEG..=TRACKING_SCAN_DEG {
        let th = base + (k as f64).to_radians();
        let t = Vector2::new(th.cos(), th.sin());
        let n = rotate90(&t);
        let tn = sbar[0] * n.x * n.x + sbar[1] * n.y * n.y + 2.0 * sbar[2] * n.x * n.y;
        if tn > best.0 {
            best = (tn, t);
        }
    }
    best.1
}

/// Geometric extension of the path by one chord through the next element,
/// ignoring activation state.  `None` when the tip has no uncracked
/// neighbour the path geometry can enter.
pub fn next_segment(
    path: &CrackPath,
    model: &Model,
    state: &GlobalState,
) -> Result<Option<CrackSegment>, SimError> {
    if path.closed {
        return Ok(None);
    }
    let last = path.segments.last().expect("seeded path");
    let mesh = &model.mesh;

    // Candidate elements: any element whose boundary carries the tip and
    // that the path has not visited, in element order for determinism.
    let mut candidates = Vec::new();
    for e in 0..mesh.elements.len() {
        if path.contains_element(e) {
            continue;
        }
        let poly = mesh.corner_polygon(e);
        if (0..4).any(|i| point_on_segment(&poly[i], &poly[(i + 1) % 4], &path.tip)) {
            candidates.push(e);
        }
    }

    for e in candidates {
        let poly = mesh.corner_polygon(e);
        let seg = match path.mode {
            PathMode::PrescribedStraight => {
                let g = (last.exit_point - last.entry_point).normalize();
                let Some((entry, exit)) = chord_into(&poly, &path.tip, &g) else {
                    continue;
                };
                CrackSegment::new(e, last.normal, entry, exit, &poly)?
            }
            PathMode::PrescribedCurve { a, x0 } => {
                let Ok(exit) = curve_exit(&poly, a, x0, &path.tip) else {
                    continue;
                };
                let mid = Point2::from((path.tip.coords + exit.coords) * 0.5);
                if !point_in_quad(&poly, &mid) {
                    continue;
                }
                let g = (exit - path.tip).normalize();
                let n = orient_like(rotate90(&g), &last.normal);
                CrackSegment::new(e, n, path.tip, exit, &poly)?
            }
            PathMode::Tracked => {
                let g = tracked_direction(model, state, path);
                let Some((entry, exit)) = chord_into(&poly, &path.tip, &g) else {
                    continue;
                };
                let n = orient_like(rotate90(&g), &last.normal);
                CrackSegment::new(e, n, entry, exit, &poly)?
            }
        };
        return Ok(Some(seg));
    }
    Ok(None)
}

/// One propagation attempt, run between global steps.  Appends a segment
/// and registers a virgin cohesive cell for its element when the activation
/// gate passes: the tip element has softened below 0.99 f_t and the next
/// element's average Rankine stress is at or above f_t.  Marks the path
/// closed when the tip sits on the domain boundary.
pub fn propagate(
    path: &mut CrackPath,
    model: &Model,
    state: &mut GlobalState,
) -> Result<bool, SimError> {
    if path.closed {
        return Ok(false);
    }
    let tip_e = path.tip_element().expect("seeded path");
    let Some(cell) = state.cells[tip_e].as_ref() else {
        return Ok(false);
    };
    if cell.state.envelope_traction >= ACTIVATION_SOFTENING * model.material.tensile_strength {
        return Ok(false);
    }
    let Some(seg) = next_segment(path, model, state)? else {
        if tip_on_boundary(&model.mesh, &path.tip) {
            path.closed = true;
        }
        return Ok(false);
    };
    let p = max_principal(&element_average_stress(model, &state.u, seg.element_id));
    if p.value < model.material.tensile_strength {
        return Ok(false);
    }
    state.cells[seg.element_id] = Some(CrackCell {
        segment: seg,
        state: CohesiveState::virgin(&model.material),
    });
    path.push(seg, state.step);
    Ok(true)
}
