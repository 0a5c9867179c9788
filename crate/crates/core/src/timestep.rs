//! Classical four-stage Runge–Kutta for linear method-of-lines systems.

use crate::error::{Error, Result};

/// Right-hand side `x ↦ G x` of an autonomous linear system.
pub trait LinearRhs {
    fn state_len(&self) -> usize;
    fn apply(&self, x: &[f64], out: &mut [f64]);
}

/// Scratch buffers for one RK4 step.
pub struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    stage: Vec<f64>,
}

impl Rk4 {
    pub fn new(len: usize) -> Self {
        Self {
            k1: vec![0.0; len],
            k2: vec![0.0; len],
            k3: vec![0.0; len],
            k4: vec![0.0; len],
            stage: vec![0.0; len],
        }
    }

    pub fn step<R: LinearRhs + ?Sized>(&mut self, rhs: &R, x: &mut [f64], dt: f64) {
        let half = 0.5 * dt;
        rhs.apply(x, &mut self.k1);
        for ((s, xi), k) in self.stage.iter_mut().zip(x.iter()).zip(&self.k1) {
            *s = xi + half * k;
        }
        rhs.apply(&self.stage, &mut self.k2);
        for ((s, xi), k) in self.stage.iter_mut().zip(x.iter()).zip(&self.k2) {
            *s = xi + half * k;
        }
        rhs.apply(&self.stage, &mut self.k3);
        for ((s, xi), k) in self.stage.iter_mut().zip(x.iter()).zip(&self.k3) {
            *s = xi + dt * k;
        }
        rhs.apply(&self.stage, &mut self.k4);
        let sixth = dt / 6.0;
        for i in 0..x.len() {
            x[i] += sixth * (self.k1[i] + 2.0 * (self.k2[i] + self.k3[i]) + self.k4[i]);
        }
    }
}

/// Checks that snapshot times are finite, sorted, nonnegative and `≤ horizon`.
pub fn validate_snapshots(snapshots: &[f64], horizon: f64) -> Result<()> {
    if !(horizon.is_finite() && horizon >= 0.0) {
        return Err(Error::Config(format!("horizon {horizon} must be finite and ≥ 0")));
    }
    if snapshots.is_empty() {
        return Err(Error::Config("at least one snapshot time is required".into()));
    }
    let mut prev = f64::NEG_INFINITY;
    for &s in snapshots {
        if !(s >= 0.0 && s <= horizon) {
            return Err(Error::Config(format!(
                "snapshot time {s} outside [0, {horizon}]"
            )));
        }
        if s <= prev {
            return Err(Error::Config("snapshot times must be strictly increasing".into()));
        }
        prev = s;
    }
    Ok(())
}

/// `count` uniformly spaced times from 0 to `horizon` inclusive.
pub fn uniform_snapshots(horizon: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![horizon],
        _ => (0..count)
            .map(|i| {
                if i + 1 == count {
                    horizon
                } else {
                    horizon * i as f64 / (count - 1) as f64
                }
            })
            .collect(),
    }
}

/// Integrates from `t = 0` and hands the state to `visit` at each snapshot
/// time. Steps have size `dt` except the last one before each snapshot, which
/// is shortened to land on it exactly.
pub fn integrate<R: LinearRhs + ?Sized>(
    rhs: &R,
    x0: &[f64],
    dt: f64,
    snapshots: &[f64],
    mut visit: impl FnMut(f64, &[f64]) -> Result<()>,
) -> Result<()> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Stability(format!("time step {dt} must be positive")));
    }
    let mut x = x0.to_vec();
    let mut rk = Rk4::new(x.len());
    let mut t = 0.0;
    for &s in snapshots {
        let eps = 1e-12 * s.max(1.0);
        while s - t > eps {
            let step = if s - t < dt * (1.0 + 1e-9) { s - t } else { dt };
            rk.step(rhs, &mut x, step);
            t += step;
        }
        t = s;
        visit(s, &x)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Decay(f64);
    impl LinearRhs for Decay {
        fn state_len(&self) -> usize {
            1
        }
        fn apply(&self, x: &[f64], out: &mut [f64]) {
            out[0] = -self.0 * x[0];
        }
    }

    #[test]
    fn single_step_matches_taylor_polynomial() {
        let mut rk = Rk4::new(1);
        let mut x = [1.0];
        let z: f64 = -0.3;
        rk.step(&Decay(3.0), &mut x, 0.1);
        let expected = 1.0 + z + z * z / 2.0 + z.powi(3) / 6.0 + z.powi(4) / 24.0;
        assert!((x[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn lands_on_snapshots() {
        let mut seen = Vec::new();
        integrate(&Decay(1.0), &[1.0], 0.03, &[0.0, 0.1, 0.25, 1.0], |t, x| {
            seen.push((t, x[0]));
            Ok(())
        })
        .unwrap();
        assert_eq!(seen.len(), 4);
        assert_eq!(seen[0], (0.0, 1.0));
        for (t, x) in seen {
            assert!((x - (-t).exp()).abs() < 1e-8);
        }
    }

    #[test]
    fn snapshot_validation() {
        assert!(validate_snapshots(&[0.0, 0.5, 1.0], 1.0).is_ok());
        assert!(validate_snapshots(&[0.5, 0.2], 1.0).is_err());
        assert!(validate_snapshots(&[1.5], 1.0).is_err());
        assert!(validate_snapshots(&[], 1.0).is_err());
    }

    #[test]
    fn uniform_snapshot_grid() {
        let s = uniform_snapshots(1.0, 11);
        assert_eq!(s.len(), 11);
        assert_eq!(s[0], 0.0);
        assert_eq!(s[10], 1.0);
        assert!((s[3] - 0.3).abs() < 1e-15);
    }
}
