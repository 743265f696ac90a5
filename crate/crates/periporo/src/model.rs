//! Shared domain types.
//!
//! Units are SI throughout. Solid stress is positive in tension; pore
//! pressure is positive in compression, so a compressed skeleton has a
//! negative effective-stress trace while a saturated pore has `p_w >= 0`.

use serde::Serialize;

use crate::discretization::{CrackPlane, Periodicity};
use crate::error::Violation;

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Three,
    /// In-plane x-y problem; points carry an out-of-plane thickness.
    PlaneStrain { thickness: f64 },
}

impl Dimension {
    pub fn is_plane(&self) -> bool {
        matches!(self, Dimension::PlaneStrain { .. })
    }

    /// Number of displacement components solved for.
    pub fn dofs(&self) -> usize {
        if self.is_plane() {
            2
        } else {
            3
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaterialPoint {
    pub id: usize,
    pub x_ref: Vec3,
    pub x_cur: Vec3,
    pub u: Vec3,
    pub v: Vec3,
    pub a: Vec3,
    pub p_w: f64,
    pub p_w_rate: f64,
    pub p_f: f64,
    pub p_f_rate: f64,
    pub phi: f64,
    pub phi_ref: f64,
    pub s_r: f64,
    /// Effective Cauchy stress in the current frame.
    pub sigma_eff: Mat3,
    /// Effective stress in the unrotated (material) frame.
    pub sigma_rot: Mat3,
    /// Total deformation gradient from the reference configuration.
    pub def_grad: Mat3,
    pub volume: f64,
    pub volume_ref: f64,
    pub damage: f64,
    pub is_interface: bool,
    /// Fracture-point switch: damage has reached the critical value.
    pub is_fracture: bool,
    pub material_id: usize,
}

impl MaterialPoint {
    pub fn new(id: usize, position: Vec3, volume: f64, material_id: usize) -> Self {
        Self {
            id,
            x_ref: position,
            x_cur: position,
            u: Vec3::zeros(),
            v: Vec3::zeros(),
            a: Vec3::zeros(),
            p_w: 0.0,
            p_w_rate: 0.0,
            p_f: 0.0,
            p_f_rate: 0.0,
            phi: 0.3,
            phi_ref: 0.3,
            s_r: 1.0,
            sigma_eff: Mat3::zeros(),
            sigma_rot: Mat3::zeros(),
            def_grad: Mat3::identity(),
            volume,
            volume_ref: volume,
            damage: 0.0,
            is_interface: false,
            is_fracture: false,
            material_id,
        }
    }

    pub fn set_porosity(&mut self, phi: f64) {
        self.phi = phi;
        self.phi_ref = phi;
    }

    pub fn set_stress(&mut self, sigma: Mat3) {
        self.sigma_eff = sigma;
        self.sigma_rot = sigma;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaterialModel {
    pub name: String,
    pub rho_s: f64,
    pub rho_w: f64,
    pub mu_w: f64,
    pub bulk_modulus: f64,
    pub shear_modulus: f64,
    pub water_bulk_modulus: f64,
    /// Intrinsic permeability (m²), isotropic.
    pub permeability: f64,
    pub a1: f64,
    pub a2: f64,
    pub n_vg: f64,
    /// Suction scaling parameter carried by the decks; not used by any law.
    pub s_a: f64,
    pub fracture_energy: f64,
    pub stabilization: f64,
    pub phi_cr: f64,
    pub fracture_permeability: f64,
}

impl MaterialModel {
    pub fn lame(&self) -> f64 {
        self.bulk_modulus - 2.0 * self.shear_modulus / 3.0
    }

    pub fn young(&self) -> f64 {
        9.0 * self.bulk_modulus * self.shear_modulus / (3.0 * self.bulk_modulus + self.shear_modulus)
    }

    /// Constrained (oedometric) modulus.
    pub fn oedometric(&self) -> f64 {
        self.bulk_modulus + 4.0 * self.shear_modulus / 3.0
    }

    pub fn skeleton(&self) -> crate::constitutive::LinearElastic {
        crate::constitutive::LinearElastic { bulk: self.bulk_modulus, shear: self.shear_modulus }
    }
}

/// Bond weighting ω(|ζ|) inside the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Influence {
    #[default]
    Uniform,
    Gaussian,
}

impl Influence {
    pub fn eval(&self, r: f64, delta: f64) -> f64 {
        match self {
            Influence::Uniform => 1.0,
            Influence::Gaussian => (-(r * r) / (delta * delta)).exp(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LinearSolverKind {
    /// Dense below the threshold, Krylov above.
    #[default]
    Auto,
    Dense,
    Krylov,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Preconditioner {
    None,
    #[default]
    Jacobi,
    /// Sparse LU of a colored finite-difference Jacobian, reused across
    /// Newton iterations and steps until Krylov convergence degrades.
    SparseLu,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearSolverConfig {
    pub kind: LinearSolverKind,
    pub preconditioner: Preconditioner,
    pub dense_threshold: usize,
    pub restart: usize,
    pub max_iterations: usize,
    /// Rebuild the sparse preconditioner once a solve needs more iterations.
    pub refresh_iterations: usize,
}

impl Default for LinearSolverConfig {
    fn default() -> Self {
        Self {
            kind: LinearSolverKind::Auto,
            preconditioner: Preconditioner::Jacobi,
            dense_threshold: 200,
            restart: 80,
            max_iterations: 2000,
            refresh_iterations: 25,
        }
    }
}

/// How interface points are treated; `ForceSplit` routes every point through
/// the paired-state path with all bonds in sub-family 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InterfaceMode {
    #[default]
    Classify,
    ForceSplit,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolverConfig {
    pub dt: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub tol_u: f64,
    pub tol_p: f64,
    pub abs_floor: f64,
    pub max_newton: usize,
    pub delta_ratio: f64,
    pub zeta_bar: f64,
    pub gravity: Vec3,
    pub influence: Influence,
    pub linear: LinearSolverConfig,
    /// Skip the deformation stage entirely.
    pub rigid_skeleton: bool,
    /// Leakage coefficient between bulk and fracture pressure (1/(Pa·s)).
    pub exchange_coefficient: f64,
    pub max_bisections: u32,
    pub interface_mode: InterfaceMode,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            beta1: 0.6,
            beta2: 0.6,
            beta3: 0.6,
            tol_u: 1e-8,
            tol_p: 1e-8,
            abs_floor: 1e-12,
            max_newton: 30,
            delta_ratio: 3.05,
            zeta_bar: 0.0,
            gravity: Vec3::zeros(),
            influence: Influence::Uniform,
            linear: LinearSolverConfig::default(),
            rigid_skeleton: false,
            exchange_coefficient: 0.0,
            max_bisections: 5,
            interface_mode: InterfaceMode::Classify,
        }
    }
}

/// Prescribed motion of constrained displacement components.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    Fixed,
    Velocity(Vec3),
    /// Piecewise-linear acceleration history `(t, a)`, integrated in time.
    Acceleration(Vec<(f64, Vec3)>),
}

impl Motion {
    pub fn acceleration_at(&self, t: f64) -> Vec3 {
        match self {
            Motion::Acceleration(table) => interpolate(table, t),
            _ => Vec3::zeros(),
        }
    }
}

fn interpolate(table: &[(f64, Vec3)], t: f64) -> Vec3 {
    match table {
        [] => Vec3::zeros(),
        [(t0, a0), ..] if t <= *t0 => *a0,
        _ => {
            for w in table.windows(2) {
                let (ta, aa) = w[0];
                let (tb, ab) = w[1];
                if t <= tb {
                    let s = if tb > ta { (t - ta) / (tb - ta) } else { 1.0 };
                    return aa + (ab - aa) * s;
                }
            }
            table[table.len() - 1].1
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundaryGroup {
    pub name: String,
    pub points: Vec<usize>,
    pub fixed: [bool; 3],
    pub motion: Motion,
    pub report_reaction: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FluidBc {
    #[default]
    Free,
    /// Pressure held at `value + rate * t`; the point still exchanges flow.
    Prescribed { value: f64, rate: f64 },
    /// Point removed from the flow problem entirely (no flow bonds).
    Impervious,
}

impl FluidBc {
    pub fn takes_part_in_flow(&self) -> bool {
        !matches!(self, FluidBc::Impervious)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BodyLoad {
    pub name: String,
    pub points: Vec<usize>,
    /// Force per unit current volume (N/m³).
    pub density: Vec3,
    /// Linear ramp duration; zero applies the full load at once.
    pub ramp_time: f64,
}

impl BodyLoad {
    pub fn factor(&self, t: f64) -> f64 {
        if self.ramp_time > 0.0 {
            (t / self.ramp_time).clamp(0.0, 1.0)
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutputSchedule {
    /// Write a snapshot every `every` steps (and always the first and last).
    pub every: usize,
    /// Axis used for the layered velocity-profile metric.
    pub profile_axis: usize,
}

impl Default for OutputSchedule {
    fn default() -> Self {
        Self { every: 10, profile_axis: 2 }
    }
}

/// A fully populated, unit-converted simulation problem.
#[derive(Debug, Clone, Serialize)]
pub struct Problem {
    pub title: String,
    pub dimension: Dimension,
    pub spacing: f64,
    pub points: Vec<MaterialPoint>,
    pub materials: Vec<MaterialModel>,
    pub config: SolverConfig,
    pub boundaries: Vec<BoundaryGroup>,
    /// Per point and displacement component: index into `boundaries`.
    pub constraint_of: Vec<[Option<usize>; 3]>,
    pub fluid_bc: Vec<FluidBc>,
    pub loads: Vec<BodyLoad>,
    pub cracks: Vec<CrackPlane>,
    pub periodicity: Periodicity,
    pub steps: usize,
    pub output: OutputSchedule,
}

impl Problem {
    pub fn horizon(&self) -> f64 {
        self.config.delta_ratio * self.spacing
    }

    /// Builds a problem with no constraints, loads or cracks around `points`.
    pub fn bare(
        dimension: Dimension,
        spacing: f64,
        points: Vec<MaterialPoint>,
        materials: Vec<MaterialModel>,
        config: SolverConfig,
    ) -> Self {
        let n = points.len();
        Self {
            title: String::new(),
            dimension,
            spacing,
            points,
            materials,
            config,
            boundaries: Vec::new(),
            constraint_of: vec![[None; 3]; n],
            fluid_bc: vec![FluidBc::Free; n],
            loads: Vec::new(),
            cracks: Vec::new(),
            periodicity: Periodicity::default(),
            steps: 1,
            output: OutputSchedule::default(),
        }
    }

    /// Adds a constraint group and marks its fixed components; a later group
    /// overrides an earlier one on the same component.
    pub fn constrain(&mut self, group: BoundaryGroup) {
        let idx = self.boundaries.len();
        for &p in &group.points {
            for c in 0..3 {
                if group.fixed[c] {
                    self.constraint_of[p][c] = Some(idx);
                }
            }
        }
        self.boundaries.push(group);
    }

    pub fn validate(&self) -> Result<(), Vec<Violation>> {
        let mut v = match validate_problem(&self.points, &self.materials, &self.config) {
            Ok(()) => Vec::new(),
            Err(v) => v,
        };
        if !(self.spacing > 0.0) {
            v.push(Violation::new("geometry.spacing", "spacing must be positive"));
        }
        if let Dimension::PlaneStrain { thickness } = self.dimension {
            if !(thickness > 0.0) {
                v.push(Violation::new("geometry.thickness", "thickness must be positive"));
            }
        }
        let n = self.points.len();
        if self.constraint_of.len() != n || self.fluid_bc.len() != n {
            v.push(Violation::new("boundary", "per-point boundary tables do not match point count"));
        }
        for (gi, g) in self.boundaries.iter().enumerate() {
            if g.points.iter().any(|&p| p >= n) {
                v.push(Violation::new(format!("boundary[{gi}]"), "point index out of range"));
            }
        }
        for (li, l) in self.loads.iter().enumerate() {
            if l.points.iter().any(|&p| p >= n) {
                v.push(Violation::new(format!("load[{li}]"), "point index out of range"));
            }
            if l.ramp_time < 0.0 {
                v.push(Violation::new(format!("load[{li}].ramp_time"), "must be non-negative"));
            }
        }
        for (i, bc) in self.fluid_bc.iter().enumerate() {
            if let FluidBc::Prescribed { value, rate } = bc {
                if !value.is_finite() || !rate.is_finite() {
                    v.push(Violation::new(format!("point[{i}].fluid"), "prescribed pressure must be finite"));
                }
            }
        }
        if self.output.every == 0 {
            v.push(Violation::new("output.every", "must be at least 1"));
        }
        if self.output.profile_axis > 2 {
            v.push(Violation::new("output.profile_axis", "must be 0, 1 or 2"));
        }
        for (ci, c) in self.cracks.iter().enumerate() {
            if !(c.normal.norm() > 0.0) {
                v.push(Violation::new(format!("crack[{ci}].normal"), "normal must be nonzero"));
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(v)
        }
    }
}

/// ρ = ρ_s(1−φ) + S_r ρ_w φ.
pub fn mixture_density(point: &MaterialPoint, mat: &MaterialModel) -> f64 {
    density(point.phi, point.s_r, mat)
}

pub fn density(phi: f64, s_r: f64, mat: &MaterialModel) -> f64 {
    mat.rho_s * (1.0 - phi) + s_r * mat.rho_w * phi
}

/// Checks type invariants, unit sanity and sign conventions.
pub fn validate_problem(
    points: &[MaterialPoint],
    materials: &[MaterialModel],
    config: &SolverConfig,
) -> Result<(), Vec<Violation>> {
    let mut v = Vec::new();
    if materials.is_empty() {
        v.push(Violation::new("material", "at least one material block is required"));
    }
    for (k, m) in materials.iter().enumerate() {
        let f = |name: &str| format!("material[{k}].{name}");
        for (name, val) in [
            ("rho_s", m.rho_s),
            ("rho_w", m.rho_w),
            ("mu_w", m.mu_w),
            ("bulk_modulus", m.bulk_modulus),
            ("shear_modulus", m.shear_modulus),
            ("water_bulk_modulus", m.water_bulk_modulus),
            ("permeability", m.permeability),
        ] {
            if !(val > 0.0) || !val.is_finite() {
                v.push(Violation::new(f(name), format!("must be positive and finite, got {val}")));
            }
        }
        if !(m.n_vg > 1.0) {
            v.push(Violation::new(f("n_vg"), format!("retention exponent must exceed 1, got {}", m.n_vg)));
        }
        if m.a1 < 0.0 || m.a2 < 0.0 {
            v.push(Violation::new(f("a1"), "retention parameters a1, a2 must be non-negative"));
        }
        // infinite disables breakage, zero breaks every strained bond
        if !(m.fracture_energy >= 0.0) {
            v.push(Violation::new(f("fracture_energy"), format!("must be non-negative, got {}", m.fracture_energy)));
        }
        if !(m.stabilization >= 0.0) {
            v.push(Violation::new(f("stabilization"), "G must be non-negative"));
        }
        if !(m.phi_cr > 0.0 && m.phi_cr <= 1.0) {
            v.push(Violation::new(f("phi_cr"), "critical damage must lie in (0, 1]"));
        }
        if m.fracture_permeability < 0.0 {
            v.push(Violation::new(f("fracture_permeability"), "must be non-negative"));
        }
        if m.lame() + 2.0 * m.shear_modulus / 3.0 <= 0.0 {
            v.push(Violation::new(f("bulk_modulus"), "elastic tensor is not positive definite"));
        }
        // Densities outside this band usually mean g/cm³ or t/m³ were entered.
        for (name, val) in [("rho_s", m.rho_s), ("rho_w", m.rho_w)] {
            if val > 0.0 && !(10.0..=1e5).contains(&val) {
                v.push(Violation::new(f(name), format!("{val} kg/m³ is not a plausible SI density")));
            }
        }
        if m.permeability > 1e-3 {
            v.push(Violation::new(
                f("permeability"),
                "intrinsic permeability above 1e-3 m² (hydraulic conductivity entered?)",
            ));
        }
    }
    let nm = materials.len();
    for p in points {
        let f = |name: &str| format!("point[{}].{name}", p.id);
        if p.material_id >= nm {
            v.push(Violation::new(f("material_id"), "refers to a missing material"));
        }
        if !(p.phi > 0.0 && p.phi < 1.0) {
            v.push(Violation::new(f("phi"), format!("porosity {} outside (0, 1)", p.phi)));
        }
        if !(p.phi_ref > 0.0 && p.phi_ref < 1.0) {
            v.push(Violation::new(f("phi_ref"), format!("porosity {} outside (0, 1)", p.phi_ref)));
        }
        if !(0.0..=1.0).contains(&p.s_r) {
            v.push(Violation::new(f("s_r"), "saturation outside [0, 1]"));
        }
        if !(0.0..=1.0).contains(&p.damage) {
            v.push(Violation::new(f("damage"), "damage outside [0, 1]"));
        }
        if !(p.volume > 0.0) {
            v.push(Violation::new(f("volume"), "volume must be positive"));
        }
        let asym = (p.sigma_eff - p.sigma_eff.transpose()).abs().max();
        if asym > 1e-12 * p.sigma_eff.abs().max().max(1.0) {
            v.push(Violation::new(f("sigma_eff"), "effective stress is not symmetric"));
        }
        let gap = (p.x_cur - (p.x_ref + p.u)).abs().max();
        if gap > 1e-12 * p.x_ref.abs().max().max(1.0) {
            v.push(Violation::new(f("x_cur"), "x_cur differs from x_ref + u"));
        }
        if !p.p_w.is_finite() {
            v.push(Violation::new(f("p_w"), "pore pressure must be finite"));
        }
    }
    let c = config;
    if !(c.dt > 0.0) {
        v.push(Violation::new("solver.dt", "time step must be positive"));
    }
    if !(c.beta1 >= c.beta2 && c.beta2 >= 0.5) {
        v.push(Violation::new(
            "solver.beta",
            format!("Newmark stability violated: need beta1 >= beta2 >= 0.5, got {} / {}", c.beta1, c.beta2),
        ));
    }
    if !(c.beta3 > 0.0 && c.beta3 <= 1.0) {
        v.push(Violation::new("solver.beta3", "pressure Newmark parameter must lie in (0, 1]"));
    }
    if !(c.tol_u > 0.0 && c.tol_p > 0.0 && c.abs_floor >= 0.0) {
        v.push(Violation::new("solver.tol", "tolerances must be positive"));
    }
    if c.max_newton == 0 {
        v.push(Violation::new("solver.max_newton", "must be at least 1"));
    }
    if !(c.delta_ratio > 0.0) {
        v.push(Violation::new("solver.delta_ratio", "horizon ratio must be positive"));
    }
    if !(c.zeta_bar >= 0.0 && c.zeta_bar < 1.0) {
        v.push(Violation::new("solver.zeta_bar", "interface threshold must lie in [0, 1)"));
    }
    if !c.gravity.iter().all(|g| g.is_finite()) {
        v.push(Violation::new("solver.gravity", "must be finite"));
    }
    if c.exchange_coefficient < 0.0 {
        v.push(Violation::new("solver.exchange_coefficient", "must be non-negative"));
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}
