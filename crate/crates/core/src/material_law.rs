//! Mixed-mode cohesive traction-separation law with exponential softening,
//! secant unloading/reloading and a time-dependent healing extension.
//!
//! Everything in this module lives at a single material point on a crack.
//! Openings are in meters, tractions in Pa, times in hours.
//!
//! The equivalent traction is carried by up to two springs acting in
//! parallel on the same effective opening: the original (virgin) material
//! and, after a release event, a healing agent whose strength grows with the
//! time elapsed since release.  Each spring is either on its exponential
//! envelope (opening beyond its own history maximum) or on a linear secant
//! through the origin (unloading/reloading inside the envelope).

use nalgebra::{Matrix2, Matrix3, Vector2};

use crate::error::SimError;

/// History maximum below which the healing-agent maturity is treated as
/// negligible: while `R(dt)` is under this value the agent accumulates no
/// opening history of its own.  Without this gate an agent released under
/// load would inherit the full release opening as damage before it has any
/// stiffness to damage.
pub const AGENT_TRACKING_MATURITY: f64 = 0.05;

/// Regularisation scale: a regularised spring rises from zero with initial
/// stiffness `k = PENALTY_OPENING_FACTOR * f^2 / G` via the smooth blend
/// `E(z) (1 - exp(-k z / f))`.  The blend swallows `G / (1 + factor)` of the
/// fracture energy, about 0.5% at 200, well inside the 1% objectivity
/// budget, and keeps the response C1 so the local Newton never sits on a
/// slope jump.
pub const PENALTY_OPENING_FACTOR: f64 = 200.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlaneMode {
    PlaneStress,
    PlaneStrain,
}

/// Bulk elasticity plus the virgin cohesive parameters.
#[derive(Debug, Clone, Copy)]
pub struct BulkMaterial {
    /// Young's modulus E [Pa].
    pub young_modulus: f64,
    /// Poisson ratio.
    pub poisson_ratio: f64,
    /// Tensile strength f_t [Pa].
    pub tensile_strength: f64,
    /// Mode-I fracture energy G_f [N/m].
    pub fracture_energy: f64,
    /// Mode-mixity weight applied to the tangential opening.
    pub mode_mix: f64,
    pub plane: PlaneMode,
}

impl BulkMaterial {
    pub fn validate(&self) -> Result<(), SimError> {
        let checks = [
            (self.young_modulus > 0.0, "Young's modulus must be positive"),
            (
                self.poisson_ratio > -1.0 && self.poisson_ratio < 0.5,
                "Poisson ratio must lie in (-1, 0.5)",
            ),
            (
                self.tensile_strength > 0.0,
                "tensile strength must be positive",
            ),
            (
                self.fracture_energy > 0.0,
                "fracture energy must be positive",
            ),
            (self.mode_mix >= 0.0, "mode-mix weight must be non-negative"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(SimError::Validation(msg.to_string()));
            }
        }
        Ok(())
    }

    /// Plane stress / plane strain elasticity in Voigt form acting on
    /// `[e11, e22, 2 e12]` and returning `[s11, s22, s12]`.
    pub fn elasticity(&self) -> Matrix3<f64> {
        let e = self.young_modulus;
        let nu = self.poisson_ratio;
        match self.plane {
            PlaneMode::PlaneStress => {
                let c = e / (1.0 - nu * nu);
                Matrix3::new(
                    c,
                    c * nu,
                    0.0,
                    c * nu,
                    c,
                    0.0,
                    0.0,
                    0.0,
                    c * (1.0 - nu) / 2.0,
                )
            }
            PlaneMode::PlaneStrain => {
                let c = e / ((1.0 + nu) * (1.0 - 2.0 * nu));
                Matrix3::new(
                    c * (1.0 - nu),
                    c * nu,
                    0.0,
                    c * nu,
                    c * (1.0 - nu),
                    0.0,
                    0.0,
                    0.0,
                    c * (1.0 - 2.0 * nu) / 2.0,
                )
            }
        }
    }

    /// Opening at which the regularising penalty secant meets the envelope.
    pub fn penalty_opening(&self) -> f64 {
        self.fracture_energy / (PENALTY_OPENING_FACTOR * self.tensile_strength)
    }

    /// Initial stiffness of the regularised law [Pa/m].
    pub fn penalty_stiffness(&self) -> f64 {
        self.tensile_strength / self.penalty_opening()
    }
}

/// Parameters of the healing agent.
#[derive(Debug, Clone, Copy)]
pub struct HealingAgent {
    /// Fully cured agent strength f_h [Pa].
    pub cured_strength: f64,
    /// Fully cured agent fracture energy G_h [N/m].
    pub cured_fracture_energy: f64,
    /// Curing rate A_h [1/h].
    pub curing_rate: f64,
    /// Traction threshold T_0 [Pa]: the agent only bonds if the crack faces
    /// carried less than this at release.
    pub contact_threshold: f64,
    /// Exponent shaping the loss of face contact with release traction.
    pub contact_exponent: f64,
}

impl HealingAgent {
    pub fn validate(&self) -> Result<(), SimError> {
        let checks = [
            (self.cured_strength > 0.0, "cured strength must be positive"),
            (
                self.cured_fracture_energy > 0.0,
                "cured fracture energy must be positive",
            ),
            (self.curing_rate >= 0.0, "curing rate must be non-negative"),
            (
                self.contact_threshold >= 0.0,
                "contact threshold must be non-negative",
            ),
            (
                self.contact_exponent > 0.0,
                "contact exponent must be positive",
            ),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(SimError::Validation(msg.to_string()));
            }
        }
        Ok(())
    }

    pub fn penalty_opening(&self) -> f64 {
        self.cured_fracture_energy / (PENALTY_OPENING_FACTOR * self.cured_strength)
    }

    pub fn penalty_stiffness(&self) -> f64 {
        self.cured_strength / self.penalty_opening()
    }
}

/// Crack opening split into its normal/tangential components together with
/// the scalar effective opening that drives the law.
#[derive(Debug, Clone, Copy)]
pub struct CrackOpening {
    pub normal: f64,
    pub tangential: f64,
    pub effective: f64,
}

impl CrackOpening {
    pub fn new(normal: f64, tangential: f64, mode_mix: f64) -> Self {
        CrackOpening {
            normal,
            tangential,
            effective: effective_opening(normal, tangential, mode_mix),
        }
    }
}

/// Committed history of one cohesive point.
#[derive(Debug, Clone, Copy)]
pub struct CohesiveState {
    /// Committed normal opening [m].
    pub opening_normal: f64,
    /// Committed tangential opening [m].
    pub opening_tangential: f64,
    /// Largest effective opening seen so far [m].
    pub max_opening: f64,
    /// Envelope traction at `max_opening` [Pa]; equals f_t while virgin.
    pub envelope_traction: f64,
    /// Whether a healing-agent release event has occurred.
    pub released: bool,
    /// Time of the release event [h]; meaningful only if `released`.
    pub release_time: f64,
    /// Envelope traction at the moment of release [Pa].
    pub traction_at_release: f64,
    /// Contact quality factor frozen at release.
    pub contact_factor: f64,
    /// Largest effective opening seen by the healed material [m].
    pub healed_max_opening: f64,
    /// Time of the last commit [h].
    pub time: f64,
}

impl CohesiveState {
    pub fn virgin(material: &BulkMaterial) -> Self {
        CohesiveState {
            opening_normal: 0.0,
            opening_tangential: 0.0,
            max_opening: 0.0,
            envelope_traction: material.tensile_strength,
            released: false,
            release_time: 0.0,
            traction_at_release: 0.0,
            contact_factor: 0.0,
            healed_max_opening: 0.0,
            time: 0.0,
        }
    }

    /// Time elapsed since the release event, clamped at zero.
    pub fn age(&self, now: f64) -> f64 {
        if self.released {
            (now - self.release_time).max(0.0)
        } else {
            0.0
        }
    }
}

/// Effective scalar opening `sqrt(zn^2 + (mix*zt)^2)`.
pub fn effective_opening(normal: f64, tangential: f64, mode_mix: f64) -> f64 {
    (normal * normal + mode_mix * mode_mix * tangential * tangential).sqrt()
}

/// Virgin softening envelope `f_t exp(-(f_t/G_f) z)`.
pub fn softening_traction(opening: f64, material: &BulkMaterial) -> Result<f64, SimError> {
    if opening < 0.0 {
        return Err(SimError::Domain(format!(
            "effective opening must be non-negative, got {opening:e}"
        )));
    }
    let ft = material.tensile_strength;
    Ok(ft * (-(ft / material.fracture_energy) * opening).exp())
}

/// Original-material traction: envelope beyond the history maximum, secant
/// through the origin inside it.
pub fn original_traction(
    opening: f64,
    state: &CohesiveState,
    material: &BulkMaterial,
) -> Result<f64, SimError> {
    if opening < 0.0 {
        return Err(SimError::Domain(format!(
            "effective opening must be non-negative, got {opening:e}"
        )));
    }
    if opening >= state.max_opening {
        softening_traction(opening, material)
    } else {
        // max_opening > opening >= 0 here, so the secant slope is finite.
        Ok(state.envelope_traction / state.max_opening * opening)
    }
}

/// Curing degree `1 - exp(-A_h dt)`.
pub fn healing_degree(elapsed: f64, agent: &HealingAgent) -> Result<f64, SimError> {
    if elapsed < 0.0 {
        return Err(SimError::Domain(format!(
            "elapsed time must be non-negative, got {elapsed:e}"
        )));
    }
    Ok(1.0 - (-agent.curing_rate * elapsed).exp())
}

/// Fully cured agent envelope `f_h exp(-(f_h/G_h) z)`.
pub fn cured_envelope(opening: f64, agent: &HealingAgent) -> Result<f64, SimError> {
    if opening < 0.0 {
        return Err(SimError::Domain(format!(
            "effective opening must be non-negative, got {opening:e}"
        )));
    }
    let fh = agent.cured_strength;
    Ok(fh * (-(fh / agent.cured_fracture_energy) * opening).exp())
}

/// Healing-agent traction at age `elapsed`: the fully cured
/// envelope/secant pair scaled by the curing degree.
pub fn healed_traction(
    opening: f64,
    elapsed: f64,
    state: &CohesiveState,
    agent: &HealingAgent,
) -> Result<f64, SimError> {
    let maturity = healing_degree(elapsed, agent)?;
    let cured = if opening >= state.healed_max_opening {
        cured_envelope(opening, agent)?
    } else {
        cured_envelope(state.healed_max_opening, agent)? / state.healed_max_opening * opening
    };
    Ok(maturity * cured)
}

/// Contact quality factor `alpha` as a function of the traction the faces
/// carried at release.  Zero above the bonding threshold, and rising towards
/// one as the release traction drops (faces pressed together by the agent).
pub fn contact_factor(
    traction_at_release: f64,
    material: &BulkMaterial,
    agent: &HealingAgent,
) -> f64 {
    if traction_at_release > agent.contact_threshold {
        0.0
    } else {
        let ratio = (traction_at_release / material.tensile_strength).clamp(0.0, 1.0);
        1.0 - ratio.powf(agent.contact_exponent)
    }
}

/// Which branch each spring sits on for a given opening.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Envelope,
    Secant,
}

/// Branch selection for the original and healed springs.  The element-level
/// traction balance freezes branches across its Newton iterations, so branch
/// detection is exposed separately from evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchState {
    pub original: Branch,
    pub healed: Branch,
}

pub fn detect_branches(effective: f64, state: &CohesiveState) -> BranchState {
    BranchState {
        original: if effective >= state.max_opening {
            Branch::Envelope
        } else {
            Branch::Secant
        },
        healed: if effective >= state.healed_max_opening {
            Branch::Envelope
        } else {
            Branch::Secant
        },
    }
}

/// One exponential spring reduced to the data needed for traction and
/// tangent assembly: either on its envelope (with strength/energy) or on a
/// linear radial branch with a fixed slope.
#[derive(Debug, Clone, Copy)]
enum SpringEval {
    /// `weight * f exp(-(f/g) z)`, optionally blended to rise smoothly from
    /// zero with initial stiffness `reg`: `E(z) (1 - exp(-reg z / f))`.
    Envelope {
        weight: f64,
        f: f64,
        g: f64,
        reg: Option<f64>,
    },
    /// `weight * slope * z` (radial: tangent is `weight * slope * I`).
    Linear { weight: f64, slope: f64 },
}

/// Smooth regularised envelope and its derivative.
fn blended_envelope(z: f64, f: f64, g: f64, reg: f64) -> (f64, f64) {
    let k = f / g;
    let env = f * (-k * z).exp();
    let decay = (-reg * z / f).exp();
    let value = env * (1.0 - decay);
    let slope = -k * env * (1.0 - decay) + env * (reg / f) * decay;
    (value, slope)
}

impl SpringEval {
    fn traction(&self, z: f64) -> f64 {
        match *self {
            SpringEval::Envelope { weight, f, g, reg } => {
                let env = f * (-(f / g) * z).exp();
                match reg {
                    Some(k) => weight * env * (1.0 - (-k * z / f).exp()),
                    None => weight * env,
                }
            }
            SpringEval::Linear { weight, slope } => weight * slope * z,
        }
    }

    /// Scalar law value T(z) and its derivative T'(z).
    fn traction_and_slope(&self, z: f64) -> (f64, f64) {
        match *self {
            SpringEval::Envelope { weight, f, g, reg } => match reg {
                Some(k) => {
                    let (v, s) = blended_envelope(z, f, g, k);
                    (weight * v, weight * s)
                }
                None => {
                    let kk = f / g;
                    let env = f * (-kk * z).exp();
                    (weight * env, -weight * kk * env)
                }
            },
            SpringEval::Linear { weight, slope } => (weight * slope * z, weight * slope),
        }
    }

    /// True if the spring is radial-linear at opening `z` (secant branch),
    /// so its Jacobian is `slope * I`.
    fn is_radial_linear(&self, _z: f64) -> bool {
        matches!(*self, SpringEval::Linear { .. })
    }
}

/// Evaluator bundling material, optional agent, and the choice between the
/// exact law (initially rigid) and the penalty-regularised law used inside
/// the element traction balance.
#[derive(Debug, Clone, Copy)]
pub struct LawEval<'a> {
    pub material: &'a BulkMaterial,
    pub agent: Option<&'a HealingAgent>,
    pub regularized: bool,
}

impl<'a> LawEval<'a> {
    pub fn exact(material: &'a BulkMaterial, agent: Option<&'a HealingAgent>) -> Self {
        LawEval {
            material,
            agent,
            regularized: false,
        }
    }

    pub fn regularized(material: &'a BulkMaterial, agent: Option<&'a HealingAgent>) -> Self {
        LawEval {
            material,
            agent,
            regularized: true,
        }
    }

    fn original_spring(&self, state: &CohesiveState, branch: Branch) -> SpringEval {
        let m = self.material;
        let reg = self.regularized.then(|| m.penalty_stiffness());
        match branch {
            Branch::Envelope => SpringEval::Envelope {
                weight: 1.0,
                f: m.tensile_strength,
                g: m.fracture_energy,
                reg,
            },
            Branch::Secant => {
                // Virgin points never report Secant (max_opening = 0 puts
                // every non-negative opening on the envelope).  The secant
                // of the regularised law passes through the regularised
                // envelope at the history maximum, which keeps the traction
                // continuous at the branch junction and bounds the slope by
                // the penalty stiffness.
                let slope = match reg {
                    Some(k) => {
                        state.envelope_traction
                            * (1.0 - (-k * state.max_opening / m.tensile_strength).exp())
                            / state.max_opening
                    }
                    None => state.envelope_traction / state.max_opening,
                };
                SpringEval::Linear { weight: 1.0, slope }
            }
        }
    }

    /// Healed spring, or None when no agent is present / no release has
    /// happened / the contact factor is zero.
    fn healed_spring(
        &self,
        state: &CohesiveState,
        now: f64,
        branch: Branch,
    ) -> Option<SpringEval> {
        let agent = self.agent?;
        if !state.released || state.contact_factor == 0.0 {
            return None;
        }
        let maturity = 1.0 - (-agent.curing_rate * state.age(now)).exp();
        let weight = state.contact_factor * maturity;
        if weight == 0.0 {
            return None;
        }
        let reg = self.regularized.then(|| agent.penalty_stiffness());
        Some(match branch {
            Branch::Envelope => SpringEval::Envelope {
                weight,
                f: agent.cured_strength,
                g: agent.cured_fracture_energy,
                reg,
            },
            Branch::Secant => {
                let cured = agent.cured_strength
                    * (-(agent.cured_strength / agent.cured_fracture_energy)
                        * state.healed_max_opening)
                        .exp();
                let slope = match reg {
                    Some(k) => {
                        cured
                            * (1.0
                                - (-k * state.healed_max_opening / agent.cured_strength).exp())
                            / state.healed_max_opening
                    }
                    None => cured / state.healed_max_opening,
                };
                SpringEval::Linear { weight, slope }
            }
        })
    }

    fn springs(
        &self,
        state: &CohesiveState,
        now: f64,
        branches: BranchState,
    ) -> (SpringEval, Option<SpringEval>) {
        (
            self.original_spring(state, branches.original),
            self.healed_spring(state, now, branches.healed),
        )
    }

    /// Scalar equivalent traction at effective opening `z` on the given
    /// branches.
    pub fn equivalent_scalar(
        &self,
        z: f64,
        state: &CohesiveState,
        now: f64,
        branches: BranchState,
    ) -> f64 {
        let (orig, healed) = self.springs(state, now, branches);
        orig.traction(z) + healed.map_or(0.0, |s| s.traction(z))
    }

    /// Traction vector `(T_n, T_t)` at the given opening with the branches
    /// frozen by the caller.  Negative normal openings are clamped for the
    /// cohesive part and resisted by the bulk penalty stiffness instead.
    pub fn traction_branched(
        &self,
        opening: &CrackOpening,
        state: &CohesiveState,
        now: f64,
        branches: BranchState,
    ) -> Vector2<f64> {
        let mix = self.material.mode_mix;
        let (zn_law, penalty_n) = if opening.normal < 0.0 {
            (0.0, self.material.penalty_stiffness() * opening.normal)
        } else {
            (opening.normal, 0.0)
        };
        let z = effective_opening(zn_law, opening.tangential, mix);
        let mut tn = penalty_n;
        let mut tt = 0.0;
        if z > 0.0 {
            let teq = self.equivalent_scalar(z, state, now, branches);
            tn += teq * zn_law / z;
            tt += teq * opening.tangential / z;
        }
        Vector2::new(tn, tt)
    }

    /// Consistent Jacobian d(T_n, T_t)/d(z_n, z_t) on frozen branches.
    pub fn tangent_branched(
        &self,
        opening: &CrackOpening,
        state: &CohesiveState,
        now: f64,
        branches: BranchState,
    ) -> Matrix2<f64> {
        let mix = self.material.mode_mix;
        let compressed = opening.normal < 0.0;
        let zn_law = if compressed { 0.0 } else { opening.normal };
        let zt = opening.tangential;
        let z = effective_opening(zn_law, zt, mix);
        let (orig, healed) = self.springs(state, now, branches);

        let mut d = Matrix2::zeros();
        if z == 0.0 {
            // Convention at the origin: radial slopes on the diagonal.  The
            // exact law is initially rigid, so report the penalty stiffness
            // for any spring still on a rigid envelope.
            let mut slope = spring_origin_slope(&orig, self.material.penalty_stiffness());
            if let Some(h) = healed {
                slope += spring_origin_slope(&h, h_origin_cap(self.agent));
            }
            d[(0, 0)] = slope;
            d[(1, 1)] = slope;
        } else {
            for spring in std::iter::once(&orig).chain(healed.iter()) {
                let (t, tp) = spring.traction_and_slope(z);
                if spring.is_radial_linear(z) {
                    // Radial branch T = s z gives T_n = s z_n, T_t = s z_t.
                    let s = t / z;
                    d[(0, 0)] += s;
                    d[(1, 1)] += s;
                } else {
                    let g = t / z;
                    let gp = (tp * z - t) / (z * z);
                    d[(0, 0)] += g + zn_law * zn_law * gp / z;
                    d[(0, 1)] += mix * mix * zn_law * zt * gp / z;
                    d[(1, 0)] += zn_law * zt * gp / z;
                    d[(1, 1)] += g + mix * mix * zt * zt * gp / z;
                }
            }
        }
        if compressed {
            // The cohesive part no longer sees z_n: zero its normal row and
            // column and let the contact penalty carry the normal response.
            d[(0, 0)] = self.material.penalty_stiffness();
            d[(0, 1)] = 0.0;
            d[(1, 0)] = 0.0;
        }
        d
    }
}

/// Origin slope of a spring for the zero-opening tangent convention.
fn spring_origin_slope(spring: &SpringEval, rigid_fallback: f64) -> f64 {
    match *spring {
        SpringEval::Envelope { weight, reg, .. } => weight * reg.unwrap_or(rigid_fallback),
        SpringEval::Linear { weight, slope } => weight * slope,
    }
}

fn h_origin_cap(agent: Option<&HealingAgent>) -> f64 {
    agent.map_or(0.0, |a| a.penalty_stiffness())
}

/// Total traction `(T_n, T_t)` plus the scalar equivalent traction, with
/// branches detected from the state (exact, unregularised law).
pub fn equivalent_traction(
    opening: &CrackOpening,
    state: &CohesiveState,
    material: &BulkMaterial,
    agent: Option<&HealingAgent>,
) -> (f64, f64, f64) {
    let eval = LawEval::exact(material, agent);
    let zn_law = opening.normal.max(0.0);
    let z = effective_opening(zn_law, opening.tangential, material.mode_mix);
    let branches = detect_branches(z, state);
    let t = eval.traction_branched(opening, state, state.time, branches);
    let teq = eval.equivalent_scalar(z, state, state.time, branches);
    (t.x, t.y, teq)
}

/// Consistent tangent of [`equivalent_traction`] with branches detected from
/// the state.
pub fn traction_tangent(
    opening: &CrackOpening,
    state: &CohesiveState,
    material: &BulkMaterial,
    agent: Option<&HealingAgent>,
) -> Matrix2<f64> {
    let eval = LawEval::exact(material, agent);
    let zn_law = opening.normal.max(0.0);
    let z = effective_opening(zn_law, opening.tangential, material.mode_mix);
    let branches = detect_branches(z, state);
    eval.tangent_branched(opening, state, state.time, branches)
}

/// Commit a converged opening into the history at time `now`.
///
/// Ordering inside the commit matters:
/// 1. the envelope maximum and its traction are advanced first,
/// 2. a release event is then detected against the updated envelope,
/// 3. the healed history maximum only starts tracking once the agent has a
///    non-negligible maturity, and never at the release commit itself.
pub fn commit_state(
    opening: &CrackOpening,
    state: &CohesiveState,
    now: f64,
    material: &BulkMaterial,
    agent: Option<&HealingAgent>,
) -> CohesiveState {
    let mut next = *state;
    next.opening_normal = opening.normal;
    next.opening_tangential = opening.tangential;
    next.time = now;

    let z = effective_opening(opening.normal.max(0.0), opening.tangential, material.mode_mix);
    if z > next.max_opening {
        next.max_opening = z;
        let ft = material.tensile_strength;
        next.envelope_traction = ft * (-(ft / material.fracture_energy) * z).exp();
    }

    if let Some(agent) = agent {
        if !next.released && next.envelope_traction <= agent.contact_threshold {
            next.released = true;
            next.release_time = now;
            next.traction_at_release = next.envelope_traction;
            next.contact_factor = contact_factor(next.traction_at_release, material, agent);
            next.healed_max_opening = 0.0;
        } else if next.released {
            let maturity = 1.0 - (-agent.curing_rate * next.age(now)).exp();
            if maturity >= AGENT_TRACKING_MATURITY && z > next.healed_max_opening {
                next.healed_max_opening = z;
            }
        }
    }
    next
}
