//! Per-step family geometry: shape tensors, stabilization coefficients and
//! the fluid sub-network.

use rayon::prelude::*;

use crate::discretization::{neighbor_search, FamilyTable, Partition, Periodicity};
use crate::error::Result;
use crate::kinematics::{invert_shape_tensor, shape_tensor};
use crate::model::{Dimension, FluidBc, Influence, Mat3, Problem, Vec3};
use crate::states::{micro_modulus, stabilization_coefficient};

use super::linear::{greedy_coloring, Coloring};

/// Image shift of a bond.
pub fn image_shift(periodicity: &Periodicity, image: [i32; 3]) -> Vec3 {
    let mut s = Vec3::zeros();
    for a in 0..3 {
        if let Some(p) = periodicity.period[a] {
            s[a] = image[a] as f64 * p;
        }
    }
    s
}

#[derive(Debug, Clone)]
pub struct Geometry {
    pub table: FamilyTable,
    pub positions: Vec<Vec3>,
    pub volumes: Vec<f64>,
    /// Points with an invertible shape tensor; the rest carry no bond forces.
    pub active: Vec<bool>,
    pub k_inv: Vec<Mat3>,
    /// Stabilization spring coefficient per sub-family.
    pub beta: Vec<[f64; 2]>,
    /// Intact bonds whose two ends both take part in flow.
    pub flow_bond: Vec<bool>,
    pub fluid_active: Vec<bool>,
    pub k_inv_f: Vec<Mat3>,
    pub flow_partition: Vec<Partition>,
}

impl Geometry {
    /// Builds the per-point operators for `table` at `positions`.
    pub fn build(problem: &Problem, table: FamilyTable, positions: Vec<Vec3>, volumes: Vec<f64>, damage: &[f64]) -> Result<Self> {
        let n = table.len();
        let dim = problem.dimension;
        let delta = table.horizon;
        let mech: Vec<Result<(bool, Mat3, [f64; 2])>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let fam = table.family(i);
                let k = shape_tensor(fam, &volumes);
                match invert_shape_tensor(&k, dim, i) {
                    Ok(k_inv) => {
                        let mat = &problem.materials[problem.points[i].material_id];
                        let part = &table.partition[i];
                        let mut beta = [0.0; 2];
                        for s in 0..2 {
                            if part.omega0[s] > 0.0 {
                                let c = micro_modulus(mat, delta, part.varphi[s], dim);
                                beta[s] = stabilization_coefficient(mat.stabilization, c, part.omega0[s], part.varphi[s], delta, dim);
                            }
                        }
                        Ok((true, k_inv, beta))
                    }
                    // isolated by fracture: falls out of the bond network
                    Err(_) if damage[i] > 0.0 || fam.iter().all(|b| !b.intact) => Ok((false, Mat3::zeros(), [0.0; 2])),
                    Err(e) => Err(e),
                }
            })
            .collect();
        let mut active = Vec::with_capacity(n);
        let mut k_inv = Vec::with_capacity(n);
        let mut beta = Vec::with_capacity(n);
        for m in mech {
            let (a, k, b) = m?;
            active.push(a);
            k_inv.push(k);
            beta.push(b);
        }
        let mut g = Geometry {
            table,
            positions,
            volumes,
            active,
            k_inv,
            beta,
            flow_bond: Vec::new(),
            fluid_active: Vec::new(),
            k_inv_f: Vec::new(),
            flow_partition: Vec::new(),
        };
        g.build_fluid(&problem.fluid_bc, dim);
        Ok(g)
    }

    fn build_fluid(&mut self, bc: &[FluidBc], dim: Dimension) {
        let n = self.table.len();
        let owners = self.table.owners();
        let takes: Vec<bool> = (0..n).map(|i| bc[i].takes_part_in_flow() && self.active[i]).collect();
        self.flow_bond = self
            .table
            .bonds
            .iter()
            .zip(&owners)
            .map(|(b, &i)| b.intact && takes[i] && takes[b.neighbor])
            .collect();
        let table = &self.table;
        let volumes = &self.volumes;
        let flow_bond = &self.flow_bond;
        let res: Vec<(bool, Mat3, Partition)> = (0..n)
            .into_par_iter()
            .map(|i| {
                if !takes[i] {
                    return (false, Mat3::zeros(), Partition::bulk(0.0));
                }
                let range = table.range(i);
                let mut k = Mat3::zeros();
                let mut vol = [0.0; 2];
                let mut w0 = [0.0; 2];
                for b in range.clone() {
                    let rec = &table.bonds[b];
                    // the partition spans broken bonds too, like the solid one
                    if takes[rec.neighbor] {
                        let s = if table.interface[i] { rec.alpha as usize } else { 0 };
                        let v = volumes[rec.neighbor];
                        vol[s] += v;
                        w0[s] += rec.omega * v;
                    }
                    if flow_bond[b] {
                        k += rec.zeta * rec.zeta.transpose() * (rec.omega * volumes[rec.neighbor]);
                    }
                }
                let total = vol[0] + vol[1];
                let part = if table.interface[i] && total > 0.0 && vol[0] > 0.0 {
                    Partition { varphi: [vol[0] / total, vol[1] / total], omega0: w0 }
                } else {
                    Partition::bulk(w0[0] + w0[1])
                };
                match invert_shape_tensor(&k, dim, i) {
                    Ok(ki) => (true, ki, part),
                    Err(_) => (false, Mat3::zeros(), part),
                }
            })
            .collect();
        self.fluid_active = res.iter().map(|r| r.0).collect();
        self.k_inv_f = res.iter().map(|r| r.1).collect();
        self.flow_partition = res.into_iter().map(|r| r.2).collect();
        // a bond into a point without a fluid gradient carries no flow
        let fa = &self.fluid_active;
        for (b, &i) in owners.iter().enumerate() {
            if self.flow_bond[b] && !(fa[i] && fa[self.table.bonds[b].neighbor]) {
                self.flow_bond[b] = false;
            }
        }
    }

    /// Operators for an existing table whose points moved to `positions`.
    pub fn moved(problem: &Problem, mut table: FamilyTable, positions: Vec<Vec3>, volumes: Vec<f64>, damage: &[f64]) -> Result<Self> {
        let owners = table.owners();
        for (b, &i) in owners.iter().enumerate() {
            let rec = &mut table.bonds[b];
            rec.zeta = positions[rec.neighbor] + image_shift(&problem.periodicity, rec.image) - positions[i];
        }
        table.refresh_omega0(&volumes);
        Geometry::build(problem, table, positions, volumes, damage)
    }

    /// Points within two bond hops of each point, itself included.
    pub fn two_hop(&self) -> Vec<Vec<usize>> {
        let t = &self.table;
        (0..t.len())
            .into_par_iter()
            .map(|i| {
                let mut out = vec![i];
                for b in t.family(i) {
                    out.push(b.neighbor);
                    out.extend(t.family(b.neighbor).iter().map(|c| c.neighbor));
                }
                out.sort_unstable();
                out.dedup();
                out
            })
            .collect()
    }

    /// Column structure for unknowns `dofs = (point, slot)` with `per_point`
    /// slots per point and `dof_of[point][slot]` their indices.
    pub fn coloring(&self, problem: &Problem, dof_of: &[Vec<Option<usize>>], ndof: usize) -> Result<Coloring> {
        let reach = self.two_hop();
        let n = self.table.len();
        let union_cost: usize = reach.iter().map(|r| r.len() * r.len()).sum();
        // columns conflict when their row sets meet; merging reach sets is
        // exact and avoids the image blow-up of a wide periodic search
        let conflicts: Vec<Vec<usize>> = if problem.periodicity.is_periodic() || union_cost < 50_000_000 {
            (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut c: Vec<usize> = reach[i].iter().flat_map(|&q| reach[q].iter().copied()).filter(|&j| j != i).collect();
                    c.sort_unstable();
                    c.dedup();
                    c
                })
                .collect()
        } else {
            let radius = 4.0 * self.table.horizon * 1.05;
            let vol = vec![1.0; n];
            let near = neighbor_search(&self.positions, &vol, radius, Influence::Uniform, &problem.periodicity)?;
            (0..n).map(|i| near.family(i).iter().map(|b| b.neighbor).filter(|&j| j != i).collect()).collect()
        };
        let point_colors = greedy_coloring(&conflicts);
        let slots = dof_of.first().map(|d| d.len()).unwrap_or(0);
        let mut colors = Vec::new();
        for group in &point_colors {
            for s in 0..slots {
                let cols: Vec<usize> = group.iter().filter_map(|&p| dof_of[p][s]).collect();
                if !cols.is_empty() {
                    colors.push(cols);
                }
            }
        }
        let mut rows = vec![Vec::new(); ndof];
        for p in 0..n {
            for s in 0..slots {
                if let Some(c) = dof_of[p][s] {
                    let mut r: Vec<usize> = reach[p].iter().flat_map(|&q| dof_of[q].iter().flatten().copied()).collect();
                    r.sort_unstable();
                    rows[c] = r;
                }
            }
        }
        Ok(Coloring { colors, rows })
    }
}
