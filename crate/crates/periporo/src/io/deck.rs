//! Versioned TOML problem files.
//!
//! A deck describes a box lattice, materials, initial state, boundary
//! groups, loads, pre-cracks and solver settings. Stress-like quantities may
//! be written in kPa (`units = "kPa"`); everything is SI after loading.
//! The field table lives in `docs/problem-file.md`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::discretization::{build_lattice, BoxGeometry, CrackPlane, Periodicity};
use crate::error::{Error, Result};
use crate::model::{
    BodyLoad, BoundaryGroup, Dimension, FluidBc, Influence, InterfaceMode, LinearSolverConfig, LinearSolverKind, Mat3,
    MaterialModel, MaterialPoint, Motion, OutputSchedule, Preconditioner, Problem, SolverConfig, Vec3,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Units {
    #[default]
    Pa,
    #[serde(rename = "kPa")]
    KPa,
}

impl Units {
    /// Multiplier from deck stress units to Pa.
    pub fn stress(self) -> f64 {
        match self {
            Units::Pa => 1.0,
            Units::KPa => 1e3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Deck {
    pub version: u32,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub units: Units,
    pub geometry: GeometrySpec,
    #[serde(default)]
    pub material: Vec<MaterialSpec>,
    #[serde(default)]
    pub material_region: Vec<MaterialRegion>,
    pub initial: InitialSpec,
    #[serde(default)]
    pub boundary: Vec<BoundarySpec>,
    #[serde(default)]
    pub load: Vec<LoadSpec>,
    #[serde(default)]
    pub crack: Vec<CrackSpec>,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimensionSpec {
    #[serde(rename = "3d")]
    Three,
    PlaneStrain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySpec {
    pub dimension: DimensionSpec,
    /// Plane-strain thickness; defaults to the spacing.
    #[serde(default)]
    pub thickness: Option<f64>,
    pub spacing: f64,
    pub min: [f64; 3],
    pub max: [f64; 3],
    #[serde(default)]
    pub periodic: [bool; 3],
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialSpec {
    pub name: String,
    pub rho_s: f64,
    pub rho_w: f64,
    pub mu_w: f64,
    /// stress units
    pub bulk_modulus: f64,
    /// stress units
    pub shear_modulus: f64,
    /// stress units
    pub water_bulk_modulus: f64,
    pub permeability: f64,
    pub n_vg: f64,
    /// 1 / stress units
    #[serde(default)]
    pub a1: f64,
    #[serde(default)]
    pub a2: f64,
    /// stress units
    #[serde(default)]
    pub s_a: f64,
    /// J/m²; absent disables breakage
    #[serde(default)]
    pub fracture_energy: Option<f64>,
    #[serde(default = "one")]
    pub stabilization: f64,
    #[serde(default = "phi_cr")]
    pub phi_cr: f64,
    #[serde(default)]
    pub fracture_permeability: f64,
}

fn phi_cr() -> f64 {
    0.35
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Region {
    fn contains(&self, x: &Vec3, tol: f64) -> bool {
        (0..3).all(|a| x[a] >= self.min[a] - tol && x[a] <= self.max[a] + tol)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialRegion {
    pub material: String,
    pub region: Region,
}

/// Scalar or affine field `value + gradient · (x − origin)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldSpec {
    Uniform(f64),
    Linear {
        value: f64,
        #[serde(default)]
        origin: [f64; 3],
        gradient: [f64; 3],
    },
}

impl FieldSpec {
    fn eval(&self, x: &Vec3) -> f64 {
        match *self {
            FieldSpec::Uniform(v) => v,
            FieldSpec::Linear { value, origin, gradient } => value + (0..3).map(|a| gradient[a] * (x[a] - origin[a])).sum::<f64>(),
        }
    }

    fn scaled(&self, s: f64) -> Self {
        match *self {
            FieldSpec::Uniform(v) => FieldSpec::Uniform(v * s),
            FieldSpec::Linear { value, origin, gradient } => FieldSpec::Linear { value: value * s, origin, gradient: gradient.map(|g| g * s) },
        }
    }
}

/// Isotropic value or `[xx, yy, zz, yz, xz, xy]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StressSpec {
    Isotropic(f64),
    Voigt([f64; 6]),
}

impl StressSpec {
    fn tensor(&self, s: f64) -> Mat3 {
        match *self {
            StressSpec::Isotropic(v) => Mat3::identity() * (v * s),
            StressSpec::Voigt(c) => Mat3::new(c[0], c[5], c[4], c[5], c[1], c[3], c[4], c[3], c[2]) * s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    pub porosity: f64,
    /// stress units
    #[serde(default = "zero_stress")]
    pub stress: StressSpec,
    /// stress units
    pub pressure: FieldSpec,
    #[serde(default)]
    pub region: Vec<InitialRegion>,
}

fn zero_stress() -> StressSpec {
    StressSpec::Isotropic(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialRegion {
    pub region: Region,
    #[serde(default)]
    pub pressure: Option<FieldSpec>,
    #[serde(default)]
    pub porosity: Option<f64>,
    /// stress units
    #[serde(default)]
    pub stress: Option<StressSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MotionSpec {
    Named(String),
    Velocity { velocity: [f64; 3] },
    Acceleration { acceleration: Vec<[f64; 4]> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FluidSpec {
    Named(String),
    Pressure {
        /// stress units
        pressure: f64,
        /// stress units per second
        #[serde(default)]
        rate: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundarySpec {
    pub name: String,
    pub region: Region,
    /// Constrained components, any of "x", "y", "z".
    #[serde(default)]
    pub fixed: Vec<String>,
    #[serde(default)]
    pub motion: Option<MotionSpec>,
    #[serde(default)]
    pub report_reaction: bool,
    #[serde(default)]
    pub fluid: Option<FluidSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadSpec {
    pub name: String,
    pub region: Region,
    pub density: [f64; 3],
    #[serde(default)]
    pub ramp_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrackSpec {
    pub point: [f64; 3],
    pub normal: [f64; 3],
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct LinearSpec {
    pub kind: Option<String>,
    pub preconditioner: Option<String>,
    pub dense_threshold: Option<usize>,
    pub restart: Option<usize>,
    pub max_iterations: Option<usize>,
    pub refresh_iterations: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    pub dt: Option<f64>,
    pub steps: Option<usize>,
    pub duration: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub beta3: Option<f64>,
    pub tol_u: Option<f64>,
    pub tol_p: Option<f64>,
    pub abs_floor: Option<f64>,
    pub max_newton: Option<usize>,
    pub delta_ratio: Option<f64>,
    pub zeta_bar: Option<f64>,
    pub gravity: Option<[f64; 3]>,
    pub influence: Option<String>,
    pub rigid_skeleton: Option<bool>,
    /// 1 / (stress units · s)
    pub exchange_coefficient: Option<f64>,
    pub max_bisections: Option<u32>,
    pub interface_mode: Option<String>,
    #[serde(default)]
    pub linear: LinearSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub every: Option<usize>,
    pub profile_axis: Option<usize>,
}

fn schema(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Schema { path: path.into(), message: message.into() }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|b| *b == b'\n').count() + 1
}

/// Parses deck text; syntax and type errors carry the line number.
pub fn parse_deck(text: &str) -> Result<Deck> {
    let deck: Deck = toml::from_str(text).map_err(|e| {
        let line = e.span().map(|s| line_of(text, s.start));
        let msg = e.message().trim().to_string();
        match line {
            Some(l) => schema(format!("line {l}"), msg),
            None => schema("deck", msg),
        }
    })?;
    if deck.version != SCHEMA_VERSION {
        return Err(schema("version", format!("unsupported schema version {} (expected {SCHEMA_VERSION})", deck.version)));
    }
    if deck.material.is_empty() {
        return Err(schema("material", "missing [[material]] block: at least one material is required"));
    }
    Ok(deck)
}

pub fn load_deck(path: &Path) -> Result<Deck> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_deck(&text).map_err(|e| match e {
        Error::Schema { path: p, message } => Error::Schema { path: format!("{}: {p}", path.display()), message },
        other => other,
    })
}

/// Reads, converts and validates a problem file.
pub fn load_problem(path: &Path) -> Result<Problem> {
    let deck = load_deck(path)?;
    let problem = deck.to_problem()?;
    problem.validate().map_err(Error::Validation)?;
    Ok(problem)
}

fn component(name: &str, path: &str) -> Result<usize> {
    match name {
        "x" => Ok(0),
        "y" => Ok(1),
        "z" => Ok(2),
        other => Err(schema(path, format!("unknown component {other:?} (use x, y or z)"))),
    }
}

impl MaterialSpec {
    /// Material in SI units.
    pub fn to_model(&self, units: Units) -> MaterialModel {
        let s = units.stress();
        MaterialModel {
            name: self.name.clone(),
            rho_s: self.rho_s,
            rho_w: self.rho_w,
            mu_w: self.mu_w,
            bulk_modulus: self.bulk_modulus * s,
            shear_modulus: self.shear_modulus * s,
            water_bulk_modulus: self.water_bulk_modulus * s,
            permeability: self.permeability,
            a1: self.a1 / s,
            a2: self.a2,
            n_vg: self.n_vg,
            s_a: self.s_a * s,
            fracture_energy: self.fracture_energy.unwrap_or(f64::INFINITY),
            stabilization: self.stabilization,
            phi_cr: self.phi_cr,
            fracture_permeability: self.fracture_permeability,
        }
    }

    /// Inverse of [`MaterialSpec::to_model`].
    pub fn from_model(m: &MaterialModel, units: Units) -> Self {
        let s = units.stress();
        MaterialSpec {
            name: m.name.clone(),
            rho_s: m.rho_s,
            rho_w: m.rho_w,
            mu_w: m.mu_w,
            bulk_modulus: m.bulk_modulus / s,
            shear_modulus: m.shear_modulus / s,
            water_bulk_modulus: m.water_bulk_modulus / s,
            permeability: m.permeability,
            n_vg: m.n_vg,
            a1: m.a1 * s,
            a2: m.a2,
            s_a: m.s_a / s,
            fracture_energy: m.fracture_energy.is_finite().then_some(m.fracture_energy),
            stabilization: m.stabilization,
            phi_cr: m.phi_cr,
            fracture_permeability: m.fracture_permeability,
        }
    }
}

impl Deck {
    pub fn dimension(&self) -> Dimension {
        match self.geometry.dimension {
            DimensionSpec::Three => Dimension::Three,
            DimensionSpec::PlaneStrain => Dimension::PlaneStrain { thickness: self.geometry.thickness.unwrap_or(self.geometry.spacing) },
        }
    }

    fn solver_config(&self) -> Result<(SolverConfig, usize)> {
        let sp = &self.solver;
        let d = SolverConfig::default();
        let influence = match sp.influence.as_deref() {
            None | Some("uniform") => Influence::Uniform,
            Some("gaussian") => Influence::Gaussian,
            Some(o) => return Err(schema("solver.influence", format!("unknown influence {o:?}"))),
        };
        let interface_mode = match sp.interface_mode.as_deref() {
            None | Some("classify") => InterfaceMode::Classify,
            Some("force_split") => InterfaceMode::ForceSplit,
            Some(o) => return Err(schema("solver.interface_mode", format!("unknown mode {o:?}"))),
        };
        let ld = LinearSolverConfig::default();
        let kind = match sp.linear.kind.as_deref() {
            None | Some("auto") => LinearSolverKind::Auto,
            Some("dense") => LinearSolverKind::Dense,
            Some("krylov") => LinearSolverKind::Krylov,
            Some(o) => return Err(schema("solver.linear.kind", format!("unknown solver {o:?}"))),
        };
        let preconditioner = match sp.linear.preconditioner.as_deref() {
            None => ld.preconditioner,
            Some("none") => Preconditioner::None,
            Some("jacobi") => Preconditioner::Jacobi,
            Some("sparse_lu") => Preconditioner::SparseLu,
            Some(o) => return Err(schema("solver.linear.preconditioner", format!("unknown preconditioner {o:?}"))),
        };
        let cfg = SolverConfig {
            dt: sp.dt.unwrap_or(d.dt),
            beta1: sp.beta1.unwrap_or(d.beta1),
            beta2: sp.beta2.unwrap_or(d.beta2),
            beta3: sp.beta3.unwrap_or(d.beta3),
            tol_u: sp.tol_u.unwrap_or(d.tol_u),
            tol_p: sp.tol_p.unwrap_or(d.tol_p),
            abs_floor: sp.abs_floor.unwrap_or(d.abs_floor),
            max_newton: sp.max_newton.unwrap_or(d.max_newton),
            delta_ratio: sp.delta_ratio.unwrap_or(d.delta_ratio),
            zeta_bar: sp.zeta_bar.unwrap_or(d.zeta_bar),
            gravity: sp.gravity.map(Vec3::from).unwrap_or(d.gravity),
            influence,
            linear: LinearSolverConfig {
                kind,
                preconditioner,
                dense_threshold: sp.linear.dense_threshold.unwrap_or(ld.dense_threshold),
                restart: sp.linear.restart.unwrap_or(ld.restart),
                max_iterations: sp.linear.max_iterations.unwrap_or(ld.max_iterations),
                refresh_iterations: sp.linear.refresh_iterations.unwrap_or(ld.refresh_iterations),
            },
            rigid_skeleton: sp.rigid_skeleton.unwrap_or(d.rigid_skeleton),
            exchange_coefficient: sp.exchange_coefficient.map(|c| c / self.units.stress()).unwrap_or(d.exchange_coefficient),
            max_bisections: sp.max_bisections.unwrap_or(d.max_bisections),
            interface_mode,
        };
        let steps = match (sp.steps, sp.duration) {
            (Some(s), _) => s,
            (None, Some(t)) => (t / cfg.dt).round() as usize,
            (None, None) => 1,
        };
        Ok((cfg, steps))
    }

    /// Builds the SI problem (not yet validated).
    pub fn to_problem(&self) -> Result<Problem> {
        let g = &self.geometry;
        let dim = self.dimension();
        let geom = BoxGeometry { min: Vec3::from(g.min), max: Vec3::from(g.max), spacing: g.spacing, dimension: dim };
        let sites = build_lattice(&geom).map_err(|e| schema("geometry", e.to_string()))?;
        let s = self.units.stress();
        let tol = 1e-9 * g.spacing.max(1e-300) + 1e-12;
        let materials: Vec<MaterialModel> = self.material.iter().map(|m| m.to_model(self.units)).collect();
        let mat_index = |name: &str, path: &str| -> Result<usize> {
            self.material.iter().position(|m| m.name == name).ok_or_else(|| schema(path, format!("unknown material {name:?}")))
        };
        let regions: Vec<(usize, Region)> = self
            .material_region
            .iter()
            .enumerate()
            .map(|(k, r)| Ok((mat_index(&r.material, &format!("material_region[{k}].material"))?, r.region)))
            .collect::<Result<_>>()?;
        let sigma = self.initial.stress.tensor(s);
        let p0 = self.initial.pressure.scaled(s);
        let points: Vec<MaterialPoint> = sites
            .iter()
            .enumerate()
            .map(|(i, site)| {
                let x = site.position;
                let mat = regions.iter().rev().find(|(_, r)| r.contains(&x, tol)).map(|(m, _)| *m).unwrap_or(0);
                let mut p = MaterialPoint::new(i, x, site.volume, mat);
                p.set_porosity(self.initial.porosity);
                p.set_stress(sigma);
                p.p_w = p0.eval(&x);
                for r in &self.initial.region {
                    if r.region.contains(&x, tol) {
                        if let Some(f) = r.pressure {
                            p.p_w = f.scaled(s).eval(&x);
                        }
                        if let Some(phi) = r.porosity {
                            p.set_porosity(phi);
                        }
                        if let Some(st) = r.stress {
                            p.set_stress(st.tensor(s));
                        }
                    }
                }
                p
            })
            .collect();
        let (config, steps) = self.solver_config()?;
        let mut periodicity = Periodicity::default();
        for a in 0..3 {
            if g.periodic[a] {
                periodicity.period[a] = Some(g.max[a] - g.min[a]);
            }
        }
        let mut problem = Problem::bare(dim, g.spacing, points, materials, config);
        problem.title = self.title.clone();
        problem.steps = steps;
        problem.periodicity = periodicity;
        for (k, b) in self.boundary.iter().enumerate() {
            let path = format!("boundary[{k}]");
            let members: Vec<usize> = problem.points.iter().filter(|p| b.region.contains(&p.x_ref, tol)).map(|p| p.id).collect();
            if members.is_empty() {
                return Err(schema(format!("{path}.region"), format!("boundary {:?} selects no points", b.name)));
            }
            let mut fixed = [false; 3];
            for c in &b.fixed {
                fixed[component(c, &format!("{path}.fixed"))?] = true;
            }
            let motion = match &b.motion {
                None => Motion::Fixed,
                Some(MotionSpec::Named(n)) if n == "fixed" => Motion::Fixed,
                Some(MotionSpec::Named(n)) => return Err(schema(format!("{path}.motion"), format!("unknown motion {n:?}"))),
                Some(MotionSpec::Velocity { velocity }) => Motion::Velocity(Vec3::from(*velocity)),
                Some(MotionSpec::Acceleration { acceleration }) => {
                    Motion::Acceleration(acceleration.iter().map(|r| (r[0], Vec3::new(r[1], r[2], r[3]))).collect())
                }
            };
            if let Some(f) = &b.fluid {
                let bc = match f {
                    FluidSpec::Named(n) if n == "free" => FluidBc::Free,
                    FluidSpec::Named(n) if n == "impervious" => FluidBc::Impervious,
                    FluidSpec::Named(n) => return Err(schema(format!("{path}.fluid"), format!("unknown fluid condition {n:?}"))),
                    FluidSpec::Pressure { pressure, rate } => FluidBc::Prescribed { value: pressure * s, rate: rate * s },
                };
                for &i in &members {
                    problem.fluid_bc[i] = bc;
                    if let FluidBc::Prescribed { value, .. } = bc {
                        problem.points[i].p_w = value;
                    }
                }
            }
            if fixed.iter().any(|f| *f) {
                problem.constrain(BoundaryGroup { name: b.name.clone(), points: members, fixed, motion, report_reaction: b.report_reaction });
            }
        }
        for (k, l) in self.load.iter().enumerate() {
            let members: Vec<usize> = problem.points.iter().filter(|p| l.region.contains(&p.x_ref, tol)).map(|p| p.id).collect();
            if members.is_empty() {
                return Err(schema(format!("load[{k}].region"), format!("load {:?} selects no points", l.name)));
            }
            problem.loads.push(BodyLoad { name: l.name.clone(), points: members, density: Vec3::from(l.density), ramp_time: l.ramp_time });
        }
        problem.cracks = self
            .crack
            .iter()
            .map(|c| CrackPlane {
                point: Vec3::from(c.point),
                normal: Vec3::from(c.normal),
                bounds_min: Vec3::from(c.bounds_min),
                bounds_max: Vec3::from(c.bounds_max),
            })
            .collect();
        problem.output = OutputSchedule {
            every: self.output.every.unwrap_or(OutputSchedule::default().every),
            profile_axis: self.output.profile_axis.unwrap_or(OutputSchedule::default().profile_axis),
        };
        Ok(problem)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| schema("deck", e.to_string()))
    }
}
