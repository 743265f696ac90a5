//! Point lattices, horizon families and phreatic-interface classification.
//!
//! Families are stored in compressed rows: the bonds of point `i` live in
//! `bonds[offsets[i]..offsets[i + 1]]`, sorted by `(neighbor, image)`. Each
//! bond knows the index of its reverse bond so pairwise differences such as
//! `T_ij − T_ji` cost one lookup.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Dimension, InterfaceMode, Influence, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoxGeometry {
    pub min: Vec3,
    pub max: Vec3,
    pub spacing: f64,
    pub dimension: Dimension,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeSite {
    pub position: Vec3,
    pub volume: f64,
}

/// Number of cells spanned by `len`; extents must be whole multiples of the
/// spacing up to rounding.
fn cell_count(len: f64, h: f64, axis: char) -> Result<usize> {
    let n = (len / h).round();
    if n < 1.0 || (n * h - len).abs() > 1e-6 * h {
        return Err(Error::Geometry(format!(
            "extent {len} along {axis} is not a positive multiple of the spacing {h}"
        )));
    }
    Ok(n as usize)
}

/// Points at cell centers of a uniform grid covering the box.
pub fn build_lattice(geom: &BoxGeometry) -> Result<Vec<LatticeSite>> {
    let h = geom.spacing;
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Geometry(format!("spacing must be positive, got {h}")));
    }
    let ext = geom.max - geom.min;
    let nx = cell_count(ext.x, h, 'x')?;
    let ny = cell_count(ext.y, h, 'y')?;
    let (nz, volume) = match geom.dimension {
        Dimension::Three => (cell_count(ext.z, h, 'z')?, h * h * h),
        Dimension::PlaneStrain { thickness } => (1, h * h * thickness),
    };
    let mut sites = Vec::with_capacity(nx * ny * nz);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let z = match geom.dimension {
                    Dimension::Three => geom.min.z + (k as f64 + 0.5) * h,
                    Dimension::PlaneStrain { .. } => 0.0,
                };
                let position =
                    Vec3::new(geom.min.x + (i as f64 + 0.5) * h, geom.min.y + (j as f64 + 0.5) * h, z);
                sites.push(LatticeSite { position, volume });
            }
        }
    }
    Ok(sites)
}

/// Optional periodic axes, given by their period length.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Periodicity {
    pub period: [Option<f64>; 3],
}

impl Periodicity {
    pub fn is_periodic(&self) -> bool {
        self.period.iter().any(|p| p.is_some())
    }

    /// All image shifts that can bring a point within `delta`.
    fn shifts(&self, delta: f64) -> Vec<([i32; 3], Vec3)> {
        let mut ranges = [0i32; 3];
        for (a, p) in self.period.iter().enumerate() {
            if let Some(p) = p {
                ranges[a] = (delta / p).ceil() as i32 + 1;
            }
        }
        let mut out = Vec::new();
        for i in -ranges[0]..=ranges[0] {
            for j in -ranges[1]..=ranges[1] {
                for k in -ranges[2]..=ranges[2] {
                    let img = [i, j, k];
                    let mut s = Vec3::zeros();
                    for a in 0..3 {
                        if let Some(p) = self.period[a] {
                            s[a] = img[a] as f64 * p;
                        }
                    }
                    out.push((img, s));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BondRecord {
    pub neighbor: usize,
    /// Current bond vector x′ − x (including any periodic image shift).
    pub zeta: Vec3,
    pub omega: f64,
    pub intact: bool,
    /// Opposite-sign (cross-interface) bond.
    pub alpha: bool,
    pub bond_energy: f64,
    pub image: [i32; 3],
}

impl BondRecord {
    /// ϱω: zero for broken bonds.
    #[inline]
    pub fn weight(&self) -> f64 {
        if self.intact {
            self.omega
        } else {
            0.0
        }
    }
}

/// Sub-family volume fractions and weighted volumes of one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Partition {
    pub varphi: [f64; 2],
    pub omega0: [f64; 2],
}

impl Partition {
    pub fn bulk(omega0: f64) -> Self {
        Self { varphi: [1.0, 0.0], omega0: [omega0, 0.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FamilyTable {
    pub horizon: f64,
    pub offsets: Vec<usize>,
    pub bonds: Vec<BondRecord>,
    pub reverse: Vec<usize>,
    /// Σ ω V′ over every bond, broken ones included.
    pub omega0: Vec<f64>,
    pub interface: Vec<bool>,
    pub partition: Vec<Partition>,
}

impl FamilyTable {
    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    #[inline]
    pub fn family(&self, i: usize) -> &[BondRecord] {
        &self.bonds[self.range(i)]
    }

    pub fn family_size(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    /// Owner point of every bond, in storage order.
    pub fn owners(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.bonds.len());
        for i in 0..self.len() {
            out.extend(std::iter::repeat(i).take(self.family_size(i)));
        }
        out
    }

    fn find(&self, i: usize, neighbor: usize, image: [i32; 3]) -> Option<usize> {
        let fam = self.family(i);
        fam.binary_search_by(|b| (b.neighbor, b.image).cmp(&(neighbor, image)))
            .ok()
            .map(|k| self.offsets[i] + k)
    }

    /// Recomputes ω₀ with the given point volumes.
    pub fn refresh_omega0(&mut self, volumes: &[f64]) {
        let omega0: Vec<f64> = (0..self.len())
            .into_par_iter()
            .map(|i| self.family(i).iter().map(|b| b.omega * volumes[b.neighbor]).sum())
            .collect();
        self.omega0 = omega0;
        for (i, p) in self.partition.iter_mut().enumerate() {
            if !self.interface[i] {
                *p = Partition::bulk(self.omega0[i]);
            }
        }
    }
}

fn negate(img: [i32; 3]) -> [i32; 3] {
    [-img[0], -img[1], -img[2]]
}

type CellKey = (i64, i64, i64);

fn cell_of(x: &Vec3, origin: &Vec3, h: f64) -> CellKey {
    (
        ((x.x - origin.x) / h).floor() as i64,
        ((x.y - origin.y) / h).floor() as i64,
        ((x.z - origin.z) / h).floor() as i64,
    )
}

/// Families `{ j ≠ i : |x_j − x_i| ≤ δ }` against the given positions, using
/// spatial bins of edge δ. All bonds come out intact with zero energy.
pub fn neighbor_search(
    positions: &[Vec3],
    volumes: &[f64],
    delta: f64,
    influence: Influence,
    periodicity: &Periodicity,
) -> Result<FamilyTable> {
    if !(delta > 0.0) {
        return Err(Error::Geometry(format!("horizon must be positive, got {delta}")));
    }
    if positions.iter().any(|x| !x.iter().all(|c| c.is_finite())) {
        return Err(Error::Geometry("non-finite point position".into()));
    }
    let n = positions.len();
    let origin = positions.iter().fold(Vec3::repeat(f64::INFINITY), |m, x| m.inf(x));
    let mut keyed: Vec<(CellKey, usize)> =
        positions.par_iter().enumerate().map(|(i, x)| (cell_of(x, &origin, delta), i)).collect();
    keyed.par_sort_unstable();
    let keys: Vec<CellKey> = keyed.iter().map(|k| k.0).collect();
    let shifts = periodicity.shifts(delta);
    let d2 = delta * delta;

    let mut families: Vec<Vec<BondRecord>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = positions[i];
            let mut fam = Vec::new();
            for (img, s) in &shifts {
                let q = xi - s;
                let c = cell_of(&q, &origin, delta);
                for dx in -1..=1 {
                    for dy in -1..=1 {
                        for dz in -1..=1 {
                            let key = (c.0 + dx, c.1 + dy, c.2 + dz);
                            let lo = keys.partition_point(|k| *k < key);
                            let hi = keys.partition_point(|k| *k <= key);
                            for &(_, j) in &keyed[lo..hi] {
                                let zeta = positions[j] + s - xi;
                                let r2 = zeta.norm_squared();
                                if r2 <= d2 && !(j == i && *img == [0, 0, 0]) && r2 > 0.0 {
                                    fam.push(BondRecord {
                                        neighbor: j,
                                        zeta,
                                        omega: influence.eval(r2.sqrt(), delta),
                                        intact: true,
                                        alpha: false,
                                        bond_energy: 0.0,
                                        image: *img,
                                    });
                                }
                            }
                        }
                    }
                }
            }
            fam.sort_unstable_by(|a, b| (a.neighbor, a.image).cmp(&(b.neighbor, b.image)));
            fam.dedup_by(|a, b| a.neighbor == b.neighbor && a.image == b.image);
            fam
        })
        .collect();

    // Rounding can make a pair at distance ~δ one-sided; keep only mutual bonds.
    let membership: Vec<HashSet<(usize, [i32; 3])>> = families
        .par_iter()
        .map(|f| f.iter().map(|b| (b.neighbor, b.image)).collect())
        .collect();
    families.par_iter_mut().enumerate().for_each(|(i, fam)| {
        fam.retain(|b| membership[b.neighbor].contains(&(i, negate(b.image))));
    });

    let mut offsets = Vec::with_capacity(n + 1);
    offsets.push(0);
    for f in &families {
        offsets.push(offsets.last().unwrap() + f.len());
    }
    let bonds: Vec<BondRecord> = families.into_iter().flatten().collect();
    let mut table = FamilyTable {
        horizon: delta,
        offsets,
        bonds,
        reverse: Vec::new(),
        omega0: vec![0.0; n],
        interface: vec![false; n],
        partition: vec![Partition::bulk(0.0); n],
    };
    let reverse: Vec<usize> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let t = &table;
            t.family(i).iter().map(move |b| t.find(b.neighbor, i, negate(b.image)).expect("mutual bond"))
        })
        .collect();
    table.reverse = reverse;
    table.refresh_omega0(volumes);
    Ok(table)
}

/// Canonical key of an unordered bond (with periodic image).
pub type BondKey = (usize, usize, [i32; 3]);

pub fn bond_key(i: usize, j: usize, image: [i32; 3]) -> BondKey {
    use std::cmp::Ordering::*;
    match i.cmp(&j) {
        Less => (i, j, image),
        Greater => (j, i, negate(image)),
        Equal => (i, i, image.max(negate(image))),
    }
}

/// Breakage memory that survives neighbour re-searches.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BondHistory {
    pub broken: HashSet<BondKey>,
}

/// A finite precrack: the plane through `point` with normal `normal`,
/// clipped to the box `[bounds_min, bounds_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CrackPlane {
    pub point: Vec3,
    pub normal: Vec3,
    pub bounds_min: Vec3,
    pub bounds_max: Vec3,
}

impl CrackPlane {
    /// Whether the segment `a → b` crosses the clipped plane.
    pub fn severs(&self, a: &Vec3, b: &Vec3) -> bool {
        let n = self.normal.normalize();
        let da = n.dot(&(a - self.point));
        let db = n.dot(&(b - self.point));
        if (da < 0.0) == (db < 0.0) {
            return false;
        }
        let x = a + (b - a) * (da / (da - db));
        let tol = 1e-12 * (1.0 + self.bounds_max.abs().max());
        (0..3).all(|k| x[k] >= self.bounds_min[k] - tol && x[k] <= self.bounds_max[k] + tol)
    }
}

/// Transfers bond state from the previous table onto a fresh search.
///
/// Pairs already in `history` stay broken. Pairs present in `old` keep their
/// energy. Pairs that are new are admitted intact unless they cross a crack
/// plane or touch a fully damaged point; those are recorded as broken.
pub fn carry_history(
    table: &mut FamilyTable,
    old: Option<&FamilyTable>,
    history: &mut BondHistory,
    cracks: &[CrackPlane],
    positions: &[Vec3],
    damage: &[f64],
) {
    let n = table.len();
    let newly_broken: Vec<Vec<BondKey>> = {
        let offsets = &table.offsets;
        let hist = &*history;
        let mut chunks: Vec<(usize, &mut [BondRecord])> = Vec::with_capacity(n);
        let mut rest: &mut [BondRecord] = &mut table.bonds;
        for i in 0..n {
            let (head, tail) = rest.split_at_mut(offsets[i + 1] - offsets[i]);
            chunks.push((i, head));
            rest = tail;
        }
        chunks
            .into_par_iter()
            .map(|(i, fam)| {
                let mut fresh = Vec::new();
                for b in fam.iter_mut() {
                    let key = bond_key(i, b.neighbor, b.image);
                    if hist.broken.contains(&key) {
                        b.intact = false;
                        if let Some(k) = old.and_then(|o| o.find(i, b.neighbor, b.image)) {
                            b.bond_energy = old.unwrap().bonds[k].bond_energy;
                        }
                        continue;
                    }
                    if let Some(k) = old.and_then(|o| o.find(i, b.neighbor, b.image)) {
                        let ob = &old.unwrap().bonds[k];
                        b.bond_energy = ob.bond_energy;
                        b.intact = ob.intact;
                        continue;
                    }
                    let xa = positions[i];
                    let xb = xa + b.zeta;
                    let severed = cracks.iter().any(|c| c.severs(&xa, &xb))
                        || damage[i] >= 1.0
                        || damage[b.neighbor] >= 1.0;
                    if severed {
                        b.intact = false;
                        fresh.push(key);
                    }
                }
                fresh
            })
            .collect()
    };
    for keys in newly_broken {
        history.broken.extend(keys);
    }
}

/// Sets α on every bond and flags interface points (`Σα / N > ζ̄`), then
/// partitions the family of each interface point. `p_w ≥ 0` counts as the
/// saturated side.
pub fn classify_interface(
    table: &mut FamilyTable,
    pressures: &[f64],
    volumes: &[f64],
    zeta_bar: f64,
    mode: InterfaceMode,
) {
    let n = table.len();
    let owners = table.owners();
    table.bonds.par_iter_mut().zip(owners.par_iter()).for_each(|(b, &i)| {
        b.alpha = match mode {
            InterfaceMode::Classify => (pressures[i] >= 0.0) != (pressures[b.neighbor] >= 0.0),
            InterfaceMode::ForceSplit => false,
        };
    });
    let results: Vec<(bool, Partition)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let fam = table.family(i);
            let bulk = Partition::bulk(table.omega0[i]);
            if fam.is_empty() {
                return (false, bulk);
            }
            let crossing = fam.iter().filter(|b| b.alpha).count();
            let flagged = match mode {
                InterfaceMode::Classify => crossing as f64 / fam.len() as f64 > zeta_bar,
                InterfaceMode::ForceSplit => true,
            };
            if !flagged {
                return (false, bulk);
            }
            match partition_family(fam, volumes) {
                Some(p) => (true, p),
                None => (false, bulk),
            }
        })
        .collect();
    for (i, (flag, part)) in results.into_iter().enumerate() {
        table.interface[i] = flag;
        table.partition[i] = part;
    }
}

/// Splits a family into same-sign (1) and opposite-sign (2) bonds. Returns
/// `None` when the same-sign sub-family is empty, in which case the point is
/// treated as bulk.
pub fn partition_family(family: &[BondRecord], volumes: &[f64]) -> Option<Partition> {
    let mut vol = [0.0; 2];
    let mut w0 = [0.0; 2];
    let mut count = [0usize; 2];
    for b in family {
        let k = b.alpha as usize;
        let v = volumes[b.neighbor];
        vol[k] += v;
        w0[k] += b.omega * v;
        count[k] += 1;
    }
    if count[0] == 0 {
        return None;
    }
    let total = vol[0] + vol[1];
    Some(Partition { varphi: [vol[0] / total, vol[1] / total], omega0: w0 })
}
