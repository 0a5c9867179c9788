//! The homogenized two-density system for `(a, b)`.
//!
//! Per cell `i`, with `W` the discrete kernel and `θ` the volume fraction of
//! the local region:
//!
//! ```text
//! a_i' = Σ_j W_ij (a_j − a_i) − θ_i Σ_j W_ij a_j + (1 − θ_i) Σ_j W_ij b_j
//! b_i' = θ_i Σ_j W_ij a_j − b_i Σ_j W_ij (1 − θ_j)  [+ c ∂²b/∂y² in strip mode]
//! ```

use std::cell::RefCell;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::{total_mass, Field};
use crate::geometry::Grid;
use crate::kernel::DiscreteKernel;
use crate::timestep::{self, LinearRhs};

/// Step bound for the pure-jump system.
pub const MAX_JUMP_DT: f64 = 0.25;
/// `dt ≤ STRIP_CFL_FACTOR · h²` once the y-diffusion is switched on.
pub const STRIP_CFL_FACTOR: f64 = 0.2;

/// Optional diffusion of `b` along `y` that survives for thin vertical strips.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum StripMode {
    Off,
    AxisY { coefficient: f64 },
}

impl StripMode {
    /// Diffusion `¼ ∂²b/∂y²` with zero-flux ends at `y = 0` and `y = 1`.
    pub const QUARTER: StripMode = StripMode::AxisY { coefficient: 0.25 };

    pub fn is_on(&self) -> bool {
        !matches!(self, StripMode::Off)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityPair {
    pub a: Field,
    pub b: Field,
    pub t: f64,
}

impl DensityPair {
    /// `a(·,0) = (1 − θ) u0`, `b(·,0) = θ u0`.
    pub fn split(u0: &Field, theta: &[f64]) -> Self {
        let a = u0.values.iter().zip(theta).map(|(u, th)| (1.0 - th) * u).collect();
        let b = u0.values.iter().zip(theta).map(|(u, th)| th * u).collect();
        Self {
            a: Field {
                values: a,
                t: u0.t,
                cell_volume: u0.cell_volume,
            },
            b: Field {
                values: b,
                t: u0.t,
                cell_volume: u0.cell_volume,
            },
            t: u0.t,
        }
    }

    /// Pointwise `a + b`.
    pub fn total(&self) -> Field {
        Field {
            values: self.a.values.iter().zip(&self.b.values).map(|(x, y)| x + y).collect(),
            t: self.t,
            cell_volume: self.a.cell_volume,
        }
    }
}

/// `(∫a, ∫b)`.
pub fn mass_pair(s: &DensityPair) -> (f64, f64) {
    (total_mass(&s.a), total_mass(&s.b))
}

pub struct LimitOperator<'a> {
    grid: Grid,
    pub theta: Vec<f64>,
    pub kernel: &'a DiscreteKernel,
    pub strip: StripMode,
    row_sums: Vec<f64>,
    /// `Σ_j W_ij (1 − θ_j)`.
    release_rate: Vec<f64>,
    scratch: RefCell<[Vec<f64>; 2]>,
}

impl<'a> LimitOperator<'a> {
    pub fn new(grid: &Grid, theta: Vec<f64>, kernel: &'a DiscreteKernel, strip: StripMode) -> Result<Self> {
        let n = grid.cell_count();
        if theta.len() != n || kernel.size() != n {
            return Err(Error::GridMismatch(format!(
                "theta has {} cells and kernel {}, grid has {n}",
                theta.len(),
                kernel.size()
            )));
        }
        if let Some(t) = theta.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return Err(Error::Config(format!("theta value {t} outside (0, 1)")));
        }
        if strip.is_on() && grid.dim() != 2 {
            return Err(Error::Config("strip mode needs a 2-d grid".into()));
        }
        let complement: Vec<f64> = theta.iter().map(|t| 1.0 - t).collect();
        let mut release_rate = vec![0.0; n];
        kernel.apply(&complement, &mut release_rate);
        Ok(Self {
            grid: grid.clone(),
            theta,
            kernel,
            strip,
            row_sums: kernel.row_sums().to_vec(),
            release_rate,
            scratch: RefCell::new([vec![0.0; n], vec![0.0; n]]),
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    fn cells(&self) -> usize {
        self.theta.len()
    }

    /// Writes the derivative of the stacked state `[a; b]` into `out`.
    pub fn apply_stacked(&self, x: &[f64], out: &mut [f64]) {
        let n = self.cells();
        let (a, b) = x.split_at(n);
        let (da, db) = out.split_at_mut(n);
        let mut scratch = self.scratch.borrow_mut();
        let [wa, wb] = &mut *scratch;
        self.kernel.apply(a, wa);
        self.kernel.apply(b, wb);
        for i in 0..n {
            let th = self.theta[i];
            da[i] = wa[i] - self.row_sums[i] * a[i] - th * wa[i] + (1.0 - th) * wb[i];
            db[i] = th * wa[i] - b[i] * self.release_rate[i];
        }
        if let StripMode::AxisY { coefficient } = self.strip {
            let m = self.grid.m();
            let scale = coefficient / (self.grid.h() * self.grid.h());
            for iy in 0..m {
                for ix in 0..m {
                    let i = iy * m + ix;
                    let mut s = 0.0;
                    if iy > 0 {
                        s += b[i - m] - b[i];
                    }
                    if iy + 1 < m {
                        s += b[i + m] - b[i];
                    }
                    db[i] += scale * s;
                }
            }
        }
    }

    /// Largest admissible step.
    pub fn max_dt(&self) -> f64 {
        if self.strip.is_on() {
            STRIP_CFL_FACTOR * self.grid.h() * self.grid.h()
        } else {
            MAX_JUMP_DT
        }
    }
}

impl LinearRhs for LimitOperator<'_> {
    fn state_len(&self) -> usize {
        2 * self.cells()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.apply_stacked(x, out)
    }
}

fn stack(s: &DensityPair) -> Vec<f64> {
    let mut x = s.a.values.clone();
    x.extend_from_slice(&s.b.values);
    x
}

fn unstack(x: &[f64], t: f64, cell_volume: f64) -> DensityPair {
    let n = x.len() / 2;
    let field = |v: &[f64]| Field {
        values: v.to_vec(),
        t,
        cell_volume,
    };
    DensityPair {
        a: field(&x[..n]),
        b: field(&x[n..]),
        t,
    }
}

/// Time derivative `(a', b')` at state `s`.
pub fn apply_limit_rhs(op: &LimitOperator<'_>, s: &DensityPair) -> Result<DensityPair> {
    if s.a.len() != op.cells() || s.b.len() != op.cells() {
        return Err(Error::GridMismatch("density pair does not match operator grid".into()));
    }
    let x = stack(s);
    let mut out = vec![0.0; x.len()];
    op.apply_stacked(&x, &mut out);
    Ok(unstack(&out, s.t, s.a.cell_volume))
}

/// RK4 integration of the limit system, returning the state at each snapshot.
pub fn integrate_limit(
    op: &LimitOperator<'_>,
    s0: &DensityPair,
    horizon: f64,
    dt: f64,
    snapshots: &[f64],
) -> Result<Vec<DensityPair>> {
    let bound = op.max_dt();
    if dt > bound * (1.0 + 1e-12) {
        return Err(Error::Stability(format!(
            "dt = {dt} exceeds the limit-system bound {bound}"
        )));
    }
    if s0.a.len() != op.cells() || s0.b.len() != op.cells() {
        return Err(Error::GridMismatch("initial pair does not match operator grid".into()));
    }
    timestep::validate_snapshots(snapshots, horizon)?;
    let vol = s0.a.cell_volume;
    let mut out = Vec::with_capacity(snapshots.len());
    timestep::integrate(op, &stack(s0), dt, snapshots, |t, x| {
        out.push(unstack(x, t, vol));
        Ok(())
    })?;
    Ok(out)
}

/// Growth constant `4(1 + ‖J‖∞² |Ω|²)` of the Gronwall stability envelope.
pub fn gronwall_constant(kernel: &DiscreteKernel) -> f64 {
    4.0 * (1.0 + kernel.sup_norm().powi(2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_grid;
    use crate::kernel::{discretize, KernelSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair(g: &Grid, a: Vec<f64>, b: Vec<f64>) -> DensityPair {
        DensityPair {
            a: Field::new(g, a, 0.0),
            b: Field::new(g, b, 0.0),
            t: 0.0,
        }
    }

    #[test]
    fn constant_state_substitution() {
        let g = make_grid(1, 8).unwrap();
        let k = discretize(&KernelSpec::constant(), &g).unwrap();
        let op = LimitOperator::new(&g, vec![0.5; 8], &k, StripMode::Off).unwrap();
        let (a0, b0) = (0.8, 0.3);
        let d = apply_limit_rhs(&op, &pair(&g, vec![a0; 8], vec![b0; 8])).unwrap();
        for i in 0..8 {
            assert!((d.a.values[i] - (b0 - a0) / 2.0).abs() < 1e-15);
            assert!((d.b.values[i] - (a0 - b0) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_state_zero_derivative() {
        let g = make_grid(2, 4).unwrap();
        let k = discretize(&KernelSpec::gaussian(0.3), &g).unwrap();
        let op = LimitOperator::new(&g, vec![0.3; 16], &k, StripMode::QUARTER).unwrap();
        let d = apply_limit_rhs(&op, &pair(&g, vec![0.0; 16], vec![0.0; 16])).unwrap();
        assert!(d.a.values.iter().chain(&d.b.values).all(|&v| v == 0.0));
    }

    #[test]
    fn derivative_conserves_mass_random_theta() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let g = make_grid(2, 6).unwrap();
        let k = discretize(&KernelSpec::gaussian(0.2), &g).unwrap();
        for strip in [StripMode::Off, StripMode::QUARTER] {
            let theta: Vec<f64> = (0..36).map(|_| rng.random_range(0.05..0.95)).collect();
            let op = LimitOperator::new(&g, theta, &k, strip).unwrap();
            let a: Vec<f64> = (0..36).map(|_| rng.random::<f64>()).collect();
            let b: Vec<f64> = (0..36).map(|_| rng.random::<f64>()).collect();
            let d = apply_limit_rhs(&op, &pair(&g, a, b)).unwrap();
            let (da, db) = mass_pair(&d);
            assert!((da + db).abs() < 1e-14);
        }
    }

    #[test]
    fn mass_pair_examples() {
        let g = make_grid(1, 10).unwrap();
        let s = pair(&g, vec![0.5; 10], vec![0.5; 10]);
        let (a, b) = mass_pair(&s);
        assert!((a - 0.5).abs() < 1e-15 && (b - 0.5).abs() < 1e-15);
        let split = DensityPair::split(&Field::constant(&g, 1.0), &[0.3; 10]);
        let (a, b) = mass_pair(&split);
        assert!((a - 0.7).abs() < 1e-15 && (b - 0.3).abs() < 1e-15);
    }

    #[test]
    fn mass_exchange_closed_form() {
        let g = make_grid(1, 16).unwrap();
        let kk = 0.3;
        for spec in [KernelSpec::constant(), KernelSpec::gaussian(0.2)] {
            let k = discretize(&spec, &g).unwrap();
            let op = LimitOperator::new(&g, vec![kk; 16], &k, StripMode::Off).unwrap();
            let s0 = DensityPair::split(&Field::constant(&g, 1.0), &[kk; 16]);
            let a0 = mass_pair(&s0).0;
            let traj = integrate_limit(&op, &s0, 2.0, 0.01, &[0.5, 1.0, 2.0]).unwrap();
            for s in &traj {
                let (a, b) = mass_pair(s);
                let exact = (1.0 - kk) + (a0 - (1.0 - kk)) * (-s.t).exp();
                assert!((a - exact).abs() < 1e-6);
                assert!((a + b - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn half_theta_uniform_is_stationary() {
        let g = make_grid(1, 8).unwrap();
        let k = discretize(&KernelSpec::constant(), &g).unwrap();
        let op = LimitOperator::new(&g, vec![0.5; 8], &k, StripMode::Off).unwrap();
        let s0 = DensityPair::split(&Field::constant(&g, 1.0), &[0.5; 8]);
        let traj = integrate_limit(&op, &s0, 1.0, 0.05, &[0.5, 1.0]).unwrap();
        for s in traj {
            assert!(s.a.values.iter().chain(&s.b.values).all(|v| (v - 0.5).abs() < 1e-15));
        }
    }

    #[test]
    fn zero_data_stays_zero() {
        let g = make_grid(1, 8).unwrap();
        let k = discretize(&KernelSpec::gaussian(0.3), &g).unwrap();
        let op = LimitOperator::new(&g, vec![0.4; 8], &k, StripMode::Off).unwrap();
        let s0 = pair(&g, vec![0.0; 8], vec![0.0; 8]);
        for s in integrate_limit(&op, &s0, 1.0, 0.1, &[1.0]).unwrap() {
            assert!(s.a.values.iter().chain(&s.b.values).all(|&v| v == 0.0));
        }
    }

    #[test]
    fn step_bounds_enforced() {
        let g = make_grid(2, 8).unwrap();
        let k = discretize(&KernelSpec::constant(), &g).unwrap();
        let s0 = DensityPair::split(&Field::constant(&g, 1.0), &[0.5; 64]);
        let plain = LimitOperator::new(&g, vec![0.5; 64], &k, StripMode::Off).unwrap();
        assert!(matches!(
            integrate_limit(&plain, &s0, 1.0, 0.3, &[1.0]),
            Err(Error::Stability(_))
        ));
        let strip = LimitOperator::new(&g, vec![0.5; 64], &k, StripMode::QUARTER).unwrap();
        assert!(matches!(
            integrate_limit(&strip, &s0, 1.0, 0.01, &[1.0]),
            Err(Error::Stability(_))
        ));
        let g1 = make_grid(1, 8).unwrap();
        let k1 = discretize(&KernelSpec::constant(), &g1).unwrap();
        assert!(LimitOperator::new(&g1, vec![0.5; 8], &k1, StripMode::QUARTER).is_err());
        assert!(LimitOperator::new(&g1, vec![1.0; 8], &k1, StripMode::Off).is_err());
    }

    #[test]
    fn strip_mode_conserves_combined_mass() {
        let g = make_grid(2, 8).unwrap();
        let k = discretize(&KernelSpec::constant(), &g).unwrap();
        let op = LimitOperator::new(&g, vec![0.5; 64], &k, StripMode::QUARTER).unwrap();
        let u0 = Field::from_fn(&g, |p| {
            1.0 + 0.5 * (std::f64::consts::PI * p[0]).cos() * (std::f64::consts::PI * p[1]).cos()
        });
        let s0 = DensityPair::split(&u0, &[0.5; 64]);
        let m0 = u0.total_mass();
        let traj = integrate_limit(&op, &s0, 0.5, op.max_dt(), &[0.1, 0.5]).unwrap();
        for s in traj {
            let (a, b) = mass_pair(&s);
            assert!((a + b - m0).abs() < 1e-10);
            assert!(s.a.min() >= -1e-10 && s.b.min() >= -1e-10);
        }
    }

    #[test]
    fn runs_are_reproducible_and_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = make_grid(1, 12).unwrap();
        let k = discretize(&KernelSpec::gaussian(0.25), &g).unwrap();
        let theta: Vec<f64> = (0..12).map(|_| rng.random_range(0.2..0.8)).collect();
        let op = LimitOperator::new(&g, theta, &k, StripMode::Off).unwrap();
        let a: Vec<f64> = (0..12).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..12).map(|_| rng.random::<f64>()).collect();
        let s0 = pair(&g, a.clone(), b.clone());
        let snaps = [0.5, 1.0, 2.0];
        let r1 = integrate_limit(&op, &s0, 2.0, 0.01, &snaps).unwrap();
        let r2 = integrate_limit(&op, &s0, 2.0, 0.01, &snaps).unwrap();
        assert_eq!(r1, r2);

        let delta = 1e-3;
        let pert: Vec<f64> = a.iter().map(|v| v + delta).collect();
        let p0 = pair(&g, pert, b);
        let init = (delta * delta * g.cell_volume() * 12.0).sqrt();
        let r3 = integrate_limit(&op, &p0, 2.0, 0.01, &snaps).unwrap();
        let c = gronwall_constant(&k);
        for (x, y) in r1.iter().zip(&r3) {
            let diff: f64 = x.a.values.iter().zip(&y.a.values)
                .chain(x.b.values.iter().zip(&y.b.values))
                .map(|(p, q)| (p - q).powi(2))
                .sum::<f64>() * g.cell_volume();
            assert!(diff.sqrt() <= init * (c * x.t).exp());
        }
    }
}
