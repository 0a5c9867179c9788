//! The pre-limit evolution `∂u/∂t = L_n u`.
//!
//! For a cell `i` in `A` the generator exchanges mass with every cell through
//! `W`; for `i` in `B` only exchanges with `A`-cells survive and the cell also
//! carries `½Δ` restricted to its own component with mirrored ghost cells
//! (zero Neumann flux on the component boundary).

use std::cell::RefCell;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{l2_norm, Field};
use crate::geometry::{Grid, Partition};
use crate::kernel::DiscreteKernel;
use crate::timestep::{self, LinearRhs};

pub const DEFAULT_CFL_FACTOR: f64 = 0.2;

/// Per-snapshot L² growth beyond this is treated as an instability.
pub const L2_GROWTH_TOL: f64 = 1e-12;

/// Assembled generator `L_n` on a grid.
pub struct CoupledOperator<'a> {
    pub partition: &'a Partition,
    pub kernel: &'a DiscreteKernel,
    is_b: Vec<bool>,
    chi_a: Vec<f64>,
    /// `Σ_j W[i][j]`.
    row_sums: Vec<f64>,
    /// `Σ_{j∈A} W[i][j]`.
    row_sums_a: Vec<f64>,
    lap_start: Vec<usize>,
    lap_nbr: Vec<usize>,
    inv_h2: f64,
    scratch: RefCell<[Vec<f64>; 3]>,
}

/// Builds the operator; `partition` and `kernel` must live on `grid`.
pub fn assemble<'a>(
    partition: &'a Partition,
    kernel: &'a DiscreteKernel,
    grid: &Grid,
) -> Result<CoupledOperator<'a>> {
    CoupledOperator::new(partition, kernel, grid)
}

impl<'a> CoupledOperator<'a> {
    pub fn new(partition: &'a Partition, kernel: &'a DiscreteKernel, grid: &Grid) -> Result<Self> {
        if &partition.grid != grid {
            return Err(Error::GridMismatch(
                "partition was built on a different grid".into(),
            ));
        }
        let n = grid.cell_count();
        if kernel.size() != n {
            return Err(Error::GridMismatch(format!(
                "kernel has {} cells, grid has {n}",
                kernel.size()
            )));
        }
        let is_b: Vec<bool> = (0..n).map(|c| partition.is_b(c)).collect();
        let chi_a: Vec<f64> = is_b.iter().map(|&b| if b { 0.0 } else { 1.0 }).collect();
        let mut row_sums_a = vec![0.0; n];
        kernel.apply(&chi_a, &mut row_sums_a);

        let mut lap_start = Vec::with_capacity(n + 1);
        let mut lap_nbr = Vec::new();
        lap_start.push(0);
        for c in 0..n {
            if let Some(comp) = partition.component_of[c] {
                lap_nbr.extend(
                    grid.neighbours(c)
                        .into_iter()
                        .filter(|&j| partition.component_of[j] == Some(comp)),
                );
            }
            lap_start.push(lap_nbr.len());
        }
        let h = grid.h();
        Ok(Self {
            partition,
            kernel,
            is_b,
            chi_a,
            row_sums: kernel.row_sums().to_vec(),
            row_sums_a,
            lap_start,
            lap_nbr,
            inv_h2: 1.0 / (h * h),
            scratch: RefCell::new([vec![0.0; n], vec![0.0; n], vec![0.0; n]]),
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.partition.grid
    }

    fn laplacian_at(&self, u: &[f64], i: usize) -> f64 {
        let ui = u[i];
        let s: f64 = self.lap_nbr[self.lap_start[i]..self.lap_start[i + 1]]
            .iter()
            .map(|&j| u[j] - ui)
            .sum();
        s * self.inv_h2
    }

    /// `(L_n u)` written into `out`.
    pub fn apply_into(&self, u: &[f64], out: &mut [f64]) {
        let n = u.len();
        let mut scratch = self.scratch.borrow_mut();
        let [wu, ua, wua] = &mut *scratch;
        if self.kernel.is_uniform() {
            let w = self.kernel.weight(0, 0);
            let total: f64 = u.iter().sum();
            let on_a: f64 = u.iter().zip(&self.chi_a).map(|(v, c)| v * c).sum();
            wu.fill(w * total);
            wua.fill(w * on_a);
        } else {
            for i in 0..n {
                ua[i] = u[i] * self.chi_a[i];
            }
            self.kernel.apply(u, wu);
            self.kernel.apply(ua, wua);
        }
        for i in 0..n {
            out[i] = if self.is_b[i] {
                wua[i] - self.row_sums_a[i] * u[i] + 0.5 * self.laplacian_at(u, i)
            } else {
                wu[i] - self.row_sums[i] * u[i]
            };
        }
    }
}

impl LinearRhs for CoupledOperator<'_> {
    fn state_len(&self) -> usize {
        self.is_b.len()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.apply_into(x, out)
    }
}

/// `L_n u` as a new field at the same time.
pub fn apply_generator(op: &CoupledOperator<'_>, u: &Field) -> Field {
    let mut out = vec![0.0; u.len()];
    op.apply_into(&u.values, &mut out);
    Field {
        values: out,
        t: u.t,
        cell_volume: u.cell_volume,
    }
}

/// Explicit RK4 integration of `∂u/∂t = L_n u` up to `horizon`, returning the
/// solution at each snapshot time. Refuses to run when `dt > cfl_factor·h²`
/// and aborts if the L² norm grows between snapshots.
pub fn integrate(
    op: &CoupledOperator<'_>,
    u0: &Field,
    horizon: f64,
    dt: f64,
    cfl_factor: f64,
    snapshots: &[f64],
) -> Result<Vec<Field>> {
    let h = op.grid().h();
    let bound = cfl_factor * h * h;
    if !(cfl_factor > 0.0) || dt > bound * (1.0 + 1e-12) {
        return Err(Error::Stability(format!(
            "dt = {dt} exceeds cfl_factor·h² = {bound} (cfl_factor = {cfl_factor}, h = {h})"
        )));
    }
    if u0.len() != op.state_len() {
        return Err(Error::GridMismatch(format!(
            "initial field has {} cells, operator {}",
            u0.len(),
            op.state_len()
        )));
    }
    timestep::validate_snapshots(snapshots, horizon)?;
    let mut out: Vec<Field> = Vec::with_capacity(snapshots.len());
    timestep::integrate(op, &u0.values, dt, snapshots, |t, x| {
        let f = Field {
            values: x.to_vec(),
            t,
            cell_volume: u0.cell_volume,
        };
        if let Some(prev) = out.last() {
            let (a, b) = (l2_norm(prev), l2_norm(&f));
            if b > a + L2_GROWTH_TOL * a.max(1.0) {
                return Err(Error::Stability(format!(
                    "L² norm grew from {a} to {b} between t = {} and t = {t}",
                    prev.t
                )));
            }
        }
        out.push(f);
        Ok(())
    })?;
    Ok(out)
}

/// Largest stable step for a given CFL factor.
pub fn max_dt(grid: &Grid, cfl_factor: f64) -> f64 {
    cfl_factor * grid.h() * grid.h()
}

/// Discrete energy whose L²-gradient flow is `L_n`:
/// `¼ Σ_B |∇u|² h^d + ¼ ΣΣ_{A×A} W (u_j−u_i)² h^d + ½ ΣΣ_{A×B} W (u_j−u_i)² h^d`.
pub fn energy(op: &CoupledOperator<'_>, u: &Field) -> f64 {
    let v = &u.values;
    let n = v.len();
    let vol = u.cell_volume;
    let mut grad = 0.0;
    for i in 0..n {
        for &j in &op.lap_nbr[op.lap_start[i]..op.lap_start[i + 1]] {
            if j > i {
                grad += (v[j] - v[i]).powi(2);
            }
        }
    }
    let grad = 0.25 * grad * op.inv_h2 * vol;
    // Symmetric weight 1 − χ_B(i)χ_B(j) counts A×A once per ordered pair and
    // each A–B pair twice, which gives the ¼ / ½ split.
    let (is_b, kernel) = (&op.is_b, op.kernel);
    let rows: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut s = 0.0;
            for j in 0..n {
                if is_b[i] && is_b[j] {
                    continue;
                }
                s += kernel.weight(i, j) * (v[j] - v[i]).powi(2);
            }
            s
        })
        .collect();
    let nonlocal = 0.25 * rows.iter().sum::<f64>() * vol;
    grad + nonlocal
}
