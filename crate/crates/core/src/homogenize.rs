//! Convergence experiments: weak gaps between the coupled solution and the
//! limit pair, measured against a fixed dictionary of smooth test functions.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::InitialCondition;
use crate::coupled::{self, CoupledOperator};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::geometry::{make_partition, Grid, Partition, PartitionFamily, Point};
use crate::kernel::{DiscreteKernel, KernelSpec};
use crate::limit::{integrate_limit, DensityPair, LimitOperator, StripMode};
use crate::timestep::uniform_snapshots;

/// Gaps at or below this level are treated as exact zeros: the pairing
/// vanishes by symmetry and only round-off remains, so ratios of such gaps
/// carry no information.
pub const GAP_FLOOR: f64 = 1e-9;

/// Time factor `τ(t)` of a separable test function `φ(x, t) = τ(t) ψ(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum TimeProfile {
    Constant,
    /// `1 − t`.
    OneMinusT,
    /// `1 − t/T`, vanishing at the horizon `T`.
    VanishAt(f64),
}

impl TimeProfile {
    fn value(&self, t: f64) -> f64 {
        match *self {
            TimeProfile::Constant => 1.0,
            TimeProfile::OneMinusT => 1.0 - t,
            TimeProfile::VanishAt(h) => 1.0 - t / h,
        }
    }

    fn derivative(&self, _t: f64) -> f64 {
        match *self {
            TimeProfile::Constant => 0.0,
            TimeProfile::OneMinusT => -1.0,
            TimeProfile::VanishAt(h) => -1.0 / h,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TestFunction {
    pub id: String,
    #[serde(skip)]
    pub spatial: fn(Point) -> f64,
    pub profile: TimeProfile,
    /// Spatial Lipschitz constant of `φ(·, t)`, uniform in `t ∈ [0, 1]`.
    pub lipschitz_bound: f64,
}

impl TestFunction {
    fn new(id: &str, spatial: fn(Point) -> f64, profile: TimeProfile, lipschitz_bound: f64) -> Self {
        Self {
            id: id.into(),
            spatial,
            profile,
            lipschitz_bound,
        }
    }

    pub fn eval(&self, p: Point, t: f64) -> f64 {
        self.profile.value(t) * (self.spatial)(p)
    }

    pub fn eval_dt(&self, p: Point, t: f64) -> f64 {
        self.profile.derivative(t) * (self.spatial)(p)
    }

    /// The same spatial shape multiplied by `1 − t/T`.
    pub fn vanishing_at(&self, horizon: f64) -> Self {
        Self {
            id: self.id.clone(),
            spatial: self.spatial,
            profile: TimeProfile::VanishAt(horizon),
            lipschitz_bound: self.lipschitz_bound,
        }
    }
}

/// Built-in dictionary. Functions of `y` only appear in 2-d.
pub fn dictionary(dim: usize) -> Vec<TestFunction> {
    use TimeProfile::*;
    let mut d = vec![
        TestFunction::new("1", |_| 1.0, Constant, 0.0),
        TestFunction::new("x", |p| p[0], Constant, 1.0),
    ];
    if dim == 2 {
        d.push(TestFunction::new("y", |p| p[1], Constant, 1.0));
    }
    d.push(TestFunction::new("x^2", |p| p[0] * p[0], Constant, 2.0));
    if dim == 2 {
        d.push(TestFunction::new("xy", |p| p[0] * p[1], Constant, 2f64.sqrt()));
    }
    d.push(TestFunction::new("cos(pi x)", |p| (PI * p[0]).cos(), Constant, PI));
    if dim == 2 {
        d.push(TestFunction::new(
            "cos(pi x)cos(pi y)",
            |p| (PI * p[0]).cos() * (PI * p[1]).cos(),
            Constant,
            PI,
        ));
        d.push(TestFunction::new("cos(pi y)", |p| (PI * p[1]).cos(), Constant, PI));
    }
    d.push(TestFunction::new("(1-t)cos(pi x)", |p| (PI * p[0]).cos(), OneMinusT, PI));
    d
}

/// `φ` on `A`-cells and the average of `φ` over the cell centers of the
/// containing component on `B`-cells.
pub fn project_piecewise_constant(phi: &TestFunction, partition: &Partition, t: f64) -> Field {
    let grid = &partition.grid;
    let centers = grid.cell_centers();
    let mut values: Vec<f64> = centers.iter().map(|&p| phi.eval(p, t)).collect();
    for comp in &partition.components {
        let mean = comp.cells.iter().map(|&c| values[c]).sum::<f64>() / comp.cells.len() as f64;
        for &c in &comp.cells {
            values[c] = mean;
        }
    }
    Field::new(grid, values, t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeakGap {
    pub gap_u: f64,
    pub gap_a: f64,
    pub gap_b: f64,
}

fn trapezoid(times: &[f64], values: &[f64]) -> f64 {
    times
        .windows(2)
        .zip(values.windows(2))
        .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
        .sum()
}

fn check_times(u: &[Field], s: &[DensityPair]) -> Result<()> {
    if u.len() != s.len() || u.iter().zip(s).any(|(a, b)| (a.t - b.t).abs() > 1e-12) {
        return Err(Error::SnapshotMismatch(
            "coupled and limit trajectories have different snapshot times".into(),
        ));
    }
    Ok(())
}

/// `|∫∫(u_n − a − b)φ|`, `|∫∫(χ_A u_n − a)φ|`, `|∫∫(χ_B u_n − b)φ|` with the
/// trapezoid rule over the snapshots and the midpoint rule in space.
pub fn weak_gap(
    u_traj: &[Field],
    limit_traj: &[DensityPair],
    phi: &TestFunction,
    partition: &Partition,
) -> Result<WeakGap> {
    check_times(u_traj, limit_traj)?;
    let grid = &partition.grid;
    let n = grid.cell_count();
    if u_traj.iter().any(|u| u.len() != n) || limit_traj.iter().any(|s| s.a.len() != n || s.b.len() != n) {
        return Err(Error::GridMismatch("trajectory does not match the partition grid".into()));
    }
    let centers = grid.cell_centers();
    let vol = grid.cell_volume();
    let times: Vec<f64> = u_traj.iter().map(|u| u.t).collect();
    let mut iu = Vec::with_capacity(times.len());
    let mut ia = Vec::with_capacity(times.len());
    let mut ib = Vec::with_capacity(times.len());
    for (u, s) in u_traj.iter().zip(limit_traj) {
        let (mut su, mut sa, mut sb) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let w = phi.eval(centers[i], u.t);
            let (ua, ub) = if partition.is_b(i) {
                (0.0, u.values[i])
            } else {
                (u.values[i], 0.0)
            };
            su += (u.values[i] - s.a.values[i] - s.b.values[i]) * w;
            sa += (ua - s.a.values[i]) * w;
            sb += (ub - s.b.values[i]) * w;
        }
        iu.push(su * vol);
        ia.push(sa * vol);
        ib.push(sb * vol);
    }
    Ok(WeakGap {
        gap_u: trapezoid(&times, &iu).abs(),
        gap_a: trapezoid(&times, &ia).abs(),
        gap_b: trapezoid(&times, &ib).abs(),
    })
}

/// Discrete residual of the integrated-by-parts identity on `A`:
///
/// ```text
/// −∫∫ ∂φ/∂t a_n − ∫ χ_A u₀ φ(·,0) − ∫∫ χ_A (Σ_j W_ij (u_j − u_i)) φ
/// ```
///
/// with `a_n = χ_A u_n`. It vanishes for the exact solution; the trapezoid
/// rule in time leaves an `O(Δt²)` remainder.
pub fn weak_form_residual(
    u_traj: &[Field],
    partition: &Partition,
    kernel: &DiscreteKernel,
    phi: &TestFunction,
) -> Result<f64> {
    let grid = &partition.grid;
    let n = grid.cell_count();
    let first = u_traj
        .first()
        .ok_or_else(|| Error::SnapshotMismatch("empty trajectory".into()))?;
    if first.t != 0.0 {
        return Err(Error::SnapshotMismatch("trajectory must start at t = 0".into()));
    }
    if kernel.size() != n || u_traj.iter().any(|u| u.len() != n) {
        return Err(Error::GridMismatch("trajectory or kernel does not match the grid".into()));
    }
    let horizon = u_traj.last().map(|u| u.t).unwrap_or(0.0);
    let centers = grid.cell_centers();
    let at_end = centers.iter().map(|&p| phi.eval(p, horizon).abs()).fold(0.0, f64::max);
    if at_end > 1e-12 {
        return Err(Error::Precondition(format!(
            "test function must vanish at T = {horizon} (max |φ(·,T)| = {at_end})"
        )));
    }
    let vol = grid.cell_volume();
    let on_a: Vec<usize> = (0..n).filter(|&i| !partition.is_b(i)).collect();
    let rows = kernel.row_sums();
    let mut wu = vec![0.0; n];
    let times: Vec<f64> = u_traj.iter().map(|u| u.t).collect();
    let mut dt_term = Vec::with_capacity(times.len());
    let mut jump_term = Vec::with_capacity(times.len());
    for u in u_traj {
        kernel.apply(&u.values, &mut wu);
        let (mut s1, mut s2) = (0.0, 0.0);
        for &i in &on_a {
            s1 += phi.eval_dt(centers[i], u.t) * u.values[i];
            s2 += (wu[i] - rows[i] * u.values[i]) * phi.eval(centers[i], u.t);
        }
        dt_term.push(s1 * vol);
        jump_term.push(s2 * vol);
    }
    let initial: f64 = on_a.iter().map(|&i| first.values[i] * phi.eval(centers[i], 0.0)).sum::<f64>() * vol;
    Ok(-trapezoid(&times, &dt_term) - initial - trapezoid(&times, &jump_term))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapRow {
    pub family: String,
    pub n: usize,
    pub test_id: String,
    pub gap_u: f64,
    pub gap_a: f64,
    pub gap_b: f64,
    pub weak_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportMeta {
    pub family: PartitionFamily,
    /// `with-y-diffusion` or `diffusion-free` for strips, `jump` otherwise.
    pub limit_model: String,
    pub strip_coefficient: Option<f64>,
    pub kernel: KernelSpec,
    pub initial: InitialCondition,
    pub dim: usize,
    pub resolution_rule: usize,
    pub n_list: Vec<usize>,
    pub m_list: Vec<usize>,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub snapshots: usize,
    pub cfl_factor: f64,
    pub coupled_dt: Vec<f64>,
    pub limit_dt: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub meta: ReportMeta,
    pub rows: Vec<GapRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RatioCheck {
    pub first: f64,
    pub last: f64,
    /// `last / first`; `None` when the last gap is at the floor.
    pub ratio: Option<f64>,
    pub pass: bool,
}

impl ConvergenceReport {
    pub fn test_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = Vec::new();
        for r in &self.rows {
            if !ids.contains(&r.test_id) {
                ids.push(r.test_id.clone());
            }
        }
        ids
    }

    pub fn row(&self, n: usize, test_id: &str) -> Option<&GapRow> {
        self.rows.iter().find(|r| r.n == n && r.test_id == test_id)
    }

    /// `gap_u(n_max) / gap_u(n_min)`, raw.
    pub fn end_to_end_ratio(&self, test_id: &str) -> Option<f64> {
        let (lo, hi) = (self.meta.n_list.first()?, self.meta.n_list.last()?);
        Some(self.row(*hi, test_id)?.gap_u / self.row(*lo, test_id)?.gap_u)
    }

    /// Passes when the last gap is at most `bound` times the first, or when
    /// the last gap is already below [`GAP_FLOOR`].
    pub fn shrink_check(&self, test_id: &str, bound: f64) -> Option<RatioCheck> {
        let (lo, hi) = (self.meta.n_list.first()?, self.meta.n_list.last()?);
        let first = self.row(*lo, test_id)?.gap_u;
        let last = self.row(*hi, test_id)?.gap_u;
        if last <= GAP_FLOOR {
            return Some(RatioCheck {
                first,
                last,
                ratio: None,
                pass: true,
            });
        }
        let ratio = last / first;
        Some(RatioCheck {
            first,
            last,
            ratio: Some(ratio),
            pass: ratio <= bound,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSpec {
    pub family: PartitionFamily,
    pub dim: usize,
    pub n_list: Vec<usize>,
    /// `m = resolution_rule · n`.
    pub resolution_rule: usize,
    pub kernel: KernelSpec,
    pub initial: InitialCondition,
    pub horizon: f64,
    pub snapshots: usize,
    pub cfl_factor: f64,
    /// Step for the pure-jump limit system; capped by the strip CFL bound.
    pub limit_dt: f64,
    /// `y`-diffusion coefficient for strips.
    pub strip_coefficient: f64,
}

impl SweepSpec {
    pub fn new(family: PartitionFamily, dim: usize, n_list: Vec<usize>, resolution_rule: usize) -> Self {
        Self {
            family,
            dim,
            n_list,
            resolution_rule,
            kernel: KernelSpec::constant(),
            initial: InitialCondition::CosineBump {
                alpha: 0.5,
                axes: Default::default(),
            },
            horizon: 1.0,
            snapshots: 11,
            cfl_factor: coupled::DEFAULT_CFL_FACTOR,
            limit_dt: 0.01,
            strip_coefficient: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepOutcome {
    pub primary: ConvergenceReport,
    /// Strips only: gaps against the limit system without `y`-diffusion.
    pub diffusion_free: Option<ConvergenceReport>,
}

struct Entry {
    rows: Vec<GapRow>,
    free_rows: Vec<GapRow>,
    m: usize,
    coupled_dt: f64,
    limit_dt: f64,
}

fn gap_rows(
    family: &str,
    n: usize,
    u_traj: &[Field],
    limit_traj: &[DensityPair],
    partition: &Partition,
    kernel: &DiscreteKernel,
    dictionary: &[TestFunction],
    horizon: f64,
) -> Result<Vec<GapRow>> {
    dictionary
        .iter()
        .map(|phi| {
            let g = weak_gap(u_traj, limit_traj, phi, partition)?;
            let weak_residual = weak_form_residual(u_traj, partition, kernel, &phi.vanishing_at(horizon))?;
            Ok(GapRow {
                family: family.into(),
                n,
                test_id: phi.id.clone(),
                gap_u: g.gap_u,
                gap_a: g.gap_a,
                gap_b: g.gap_b,
                weak_residual,
            })
        })
        .collect()
}

fn sweep_entry(spec: &SweepSpec, n: usize, grid: &Grid, partition: &Partition) -> Result<Entry> {
    let kernel = DiscreteKernel::discretize(&spec.kernel, grid)?;
    let u0 = spec.initial.build(grid)?;
    let snaps = uniform_snapshots(spec.horizon, spec.snapshots);
    let op = CoupledOperator::new(partition, &kernel, grid)?;
    let coupled_dt = coupled::max_dt(grid, spec.cfl_factor);
    let u_traj = coupled::integrate(&op, &u0, spec.horizon, coupled_dt, spec.cfl_factor, &snaps)?;

    let strips = matches!(spec.family, PartitionFamily::Strips);
    let s0 = DensityPair::split(&u0, &partition.theta);
    let solve = |mode: StripMode| -> Result<(Vec<DensityPair>, f64)> {
        let lop = LimitOperator::new(grid, partition.theta.clone(), &kernel, mode)?;
        let dt = spec.limit_dt.min(lop.max_dt());
        Ok((integrate_limit(&lop, &s0, spec.horizon, dt, &snaps)?, dt))
    };
    let mode = if strips {
        StripMode::AxisY {
            coefficient: spec.strip_coefficient,
        }
    } else {
        StripMode::Off
    };
    let (limit_traj, limit_dt) = solve(mode)?;
    let dict = dictionary(spec.dim);
    let name = spec.family.name();
    let rows = gap_rows(name, n, &u_traj, &limit_traj, partition, &kernel, &dict, spec.horizon)?;
    let free_rows = if strips {
        let (free, _) = solve(StripMode::Off)?;
        gap_rows(name, n, &u_traj, &free, partition, &kernel, &dict, spec.horizon)?
    } else {
        Vec::new()
    };
    Ok(Entry {
        rows,
        free_rows,
        m: grid.m(),
        coupled_dt,
        limit_dt,
    })
}

/// Runs the coupled and limit solvers for every `n` and collects weak gaps
/// for the whole dictionary. Every `n` is checked for grid alignment before
/// any solver starts. Entries run in parallel; the report order is fixed by
/// `n_list`.
pub fn run_sweep(spec: &SweepSpec) -> Result<SweepOutcome> {
    if spec.n_list.is_empty() {
        return Err(Error::Config("sweep needs at least one n".into()));
    }
    let mut sorted = spec.n_list.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted != spec.n_list {
        return Err(Error::Config("sweep n_list must be strictly increasing".into()));
    }
    let setups: Vec<(Grid, Partition)> = spec
        .n_list
        .iter()
        .map(|&n| {
            let grid = Grid::new(spec.dim, spec.resolution_rule * n)?;
            let partition = make_partition(spec.family, n, &grid)?;
            Ok((grid, partition))
        })
        .collect::<Result<_>>()?;
    spec.kernel.validate()?;
    spec.initial.validate(spec.dim)?;

    let entries: Vec<Entry> = spec
        .n_list
        .par_iter()
        .zip(setups.par_iter())
        .map(|(&n, (grid, partition))| sweep_entry(spec, n, grid, partition))
        .collect::<Result<_>>()?;

    let strips = matches!(spec.family, PartitionFamily::Strips);
    let meta = |model: &str, coef: Option<f64>| ReportMeta {
        family: spec.family,
        limit_model: model.into(),
        strip_coefficient: coef,
        kernel: spec.kernel.clone(),
        initial: spec.initial.clone(),
        dim: spec.dim,
        resolution_rule: spec.resolution_rule,
        n_list: spec.n_list.clone(),
        m_list: entries.iter().map(|e| e.m).collect(),
        horizon: spec.horizon,
        snapshots: spec.snapshots,
        cfl_factor: spec.cfl_factor,
        coupled_dt: entries.iter().map(|e| e.coupled_dt).collect(),
        limit_dt: entries.iter().map(|e| e.limit_dt).collect(),
    };
    let primary = ConvergenceReport {
        meta: if strips {
            meta("with-y-diffusion", Some(spec.strip_coefficient))
        } else {
            meta("jump", None)
        },
        rows: entries.iter().flat_map(|e| e.rows.clone()).collect(),
    };
    let diffusion_free = strips.then(|| ConvergenceReport {
        meta: meta("diffusion-free", None),
        rows: entries.iter().flat_map(|e| e.free_rows.clone()).collect(),
    });
    Ok(SweepOutcome {
        primary,
        diffusion_free,
    })
}
