//! Bond energy, breakage and damage.
//!
//! Energies are stored per unordered pair (both directed records hold the
//! same value) so that breakage is symmetric.

use crate::discretization::{bond_key, BondHistory, BondRecord, FamilyTable};
use crate::error::{Error, Result};
use crate::model::{Dimension, Vec3};

/// Critical bond work density from the fracture energy: the energy of all
/// pairs crossing a unit area of crack, `G0 = ŵ_cr π δ⁴ / 4` in 3D and
/// `G0 = ŵ_cr (2/3) t δ³` per unit area in plane strain.
pub fn critical_bond_energy(g0: f64, delta: f64, dim: Dimension) -> f64 {
    match dim {
        Dimension::Three => 4.0 * g0 / (std::f64::consts::PI * delta.powi(4)),
        Dimension::PlaneStrain { thickness } => 1.5 * g0 / (thickness * delta.powi(3)),
    }
}

/// Trapezoidal work increment ½(f_n + f_{n+1})·Δη of a pair force over the
/// relative displacement increment.
pub fn bond_energy_increment(force_n: &Vec3, force_n1: &Vec3, deta: &Vec3) -> f64 {
    0.5 * (force_n + force_n1).dot(deta)
}

/// Breaks every intact bond whose energy has reached `w_cr` (the smaller of
/// the two ends' thresholds). Returns the number of newly broken pairs.
pub fn break_bonds(table: &mut FamilyTable, w_cr: &[f64], history: &mut BondHistory) -> usize {
    let owners = table.owners();
    let mut broken = 0;
    for b in 0..table.bonds.len() {
        let i = owners[b];
        let rec = &table.bonds[b];
        if !rec.intact {
            continue;
        }
        let j = rec.neighbor;
        let thr = w_cr[i].min(w_cr[j]);
        if rec.bond_energy > 0.0 && rec.bond_energy >= thr {
            let r = table.reverse[b];
            let key = bond_key(i, j, rec.image);
            table.bonds[b].intact = false;
            table.bonds[r].intact = false;
            if history.broken.insert(key) {
                broken += 1;
            }
        }
    }
    broken
}

/// φ = 1 − Σ ϱω V′ / ω₀, clamped to [0, 1].
pub fn damage(family: &[BondRecord], volumes: &[f64], omega0: f64, point: usize) -> Result<f64> {
    if !(omega0 > 0.0) {
        return Err(Error::DegeneratePoint { point, reason: "zero weighted volume".into() });
    }
    let intact: f64 = family.iter().map(|b| b.weight() * volumes[b.neighbor]).sum();
    Ok((1.0 - intact / omega0).clamp(0.0, 1.0))
}

/// Damage of every point; points with an empty family report zero.
pub fn damage_field(table: &FamilyTable, volumes: &[f64]) -> Vec<f64> {
    (0..table.len())
        .map(|i| if table.family_size(i) == 0 { 0.0 } else { damage(table.family(i), volumes, table.omega0[i], i).unwrap_or(0.0) })
        .collect()
}
