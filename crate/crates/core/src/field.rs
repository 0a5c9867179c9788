//! Grid functions and the quadratures used throughout.

use serde::Serialize;

use crate::geometry::{Grid, Point};

/// Cell-averaged density on a grid at time `t`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Field {
    pub values: Vec<f64>,
    pub t: f64,
    /// Quadrature weight `h^dim` of the grid the values live on.
    pub cell_volume: f64,
}

impl Field {
    pub fn new(grid: &Grid, values: Vec<f64>, t: f64) -> Self {
        debug_assert_eq!(values.len(), grid.cell_count());
        Self {
            values,
            t,
            cell_volume: grid.cell_volume(),
        }
    }

    pub fn constant(grid: &Grid, c: f64) -> Self {
        Self::new(grid, vec![c; grid.cell_count()], 0.0)
    }

    pub fn zeros(grid: &Grid) -> Self {
        Self::constant(grid, 0.0)
    }

    /// Samples `f` at the cell centers.
    pub fn from_fn(grid: &Grid, f: impl Fn(Point) -> f64) -> Self {
        let values = grid.cell_centers().into_iter().map(f).collect();
        Self::new(grid, values, 0.0)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn total_mass(&self) -> f64 {
        total_mass(self)
    }

    pub fn l2_norm(&self) -> f64 {
        l2_norm(self)
    }

    /// Rescales so that the total mass is one. Returns `None` for a field
    /// with nonpositive mass.
    pub fn normalized(mut self) -> Option<Self> {
        let mass = self.total_mass();
        if !(mass > 0.0) {
            return None;
        }
        self.values.iter_mut().for_each(|v| *v /= mass);
        Some(self)
    }
}

/// `Σ u_i h^dim`.
pub fn total_mass(u: &Field) -> f64 {
    u.values.iter().sum::<f64>() * u.cell_volume
}

/// `(Σ u_i² h^dim)^½`.
pub fn l2_norm(u: &Field) -> f64 {
    (u.values.iter().map(|v| v * v).sum::<f64>() * u.cell_volume).sqrt()
}
