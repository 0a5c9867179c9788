//! Grids on the unit interval/square and the partition families `Ω̄ = A_n ∪ B_n`.
//!
//! Cells are indexed row-major with `x` varying fastest: `index = iy * m + ix`.
//! One-dimensional grids use `iy = 0` and report `y = 0` for every point.

use serde::Serialize;

use crate::error::{Error, Result};

/// A point in the closed unit square. The second coordinate is unused in 1-d.
pub type Point = [f64; 2];

/// Uniform Cartesian midpoint grid on `(0,1)^dim`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Grid {
    dim: usize,
    m: usize,
    h: f64,
}

/// Builds a `dim`-dimensional grid with `m` cells per axis.
pub fn make_grid(dim: usize, m: usize) -> Result<Grid> {
    Grid::new(dim, m)
}

impl Grid {
    pub fn new(dim: usize, m: usize) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(Error::InvalidResolution(format!(
                "dimension must be 1 or 2, got {dim}"
            )));
        }
        if m < 2 {
            return Err(Error::InvalidResolution(format!(
                "need at least 2 cells per axis, got {m}"
            )));
        }
        Ok(Self {
            dim,
            m,
            h: 1.0 / m as f64,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Cells per axis.
    pub fn m(&self) -> usize {
        self.m
    }

    /// Cell width.
    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn cell_count(&self) -> usize {
        self.m.pow(self.dim as u32)
    }

    /// Quadrature weight `h^dim` of a single cell.
    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.dim as i32)
    }

    pub fn coords(&self, cell: usize) -> [usize; 2] {
        if self.dim == 1 {
            [cell, 0]
        } else {
            [cell % self.m, cell / self.m]
        }
    }

    pub fn index(&self, ix: usize, iy: usize) -> usize {
        if self.dim == 1 {
            ix
        } else {
            iy * self.m + ix
        }
    }

    pub fn cell_center(&self, cell: usize) -> Point {
        let [ix, iy] = self.coords(cell);
        let x = (ix as f64 + 0.5) * self.h;
        if self.dim == 1 {
            [x, 0.0]
        } else {
            [x, (iy as f64 + 0.5) * self.h]
        }
    }

    pub fn cell_centers(&self) -> Vec<Point> {
        (0..self.cell_count()).map(|c| self.cell_center(c)).collect()
    }

    /// Lower and upper corner of a cell.
    pub fn cell_bounds(&self, cell: usize) -> (Point, Point) {
        let [ix, iy] = self.coords(cell);
        let lo = [ix as f64 * self.h, iy as f64 * self.h];
        let hi = [(ix + 1) as f64 * self.h, (iy + 1) as f64 * self.h];
        if self.dim == 1 {
            ([lo[0], 0.0], [hi[0], 0.0])
        } else {
            (lo, hi)
        }
    }

    /// Axis index of the cell containing coordinate `x`; the closed right edge
    /// belongs to the last cell.
    pub fn axis_index(&self, x: f64) -> usize {
        let i = (x * self.m as f64).floor();
        if i < 0.0 {
            0
        } else {
            (i as usize).min(self.m - 1)
        }
    }

    /// Index of the cell containing `p`.
    pub fn locate(&self, p: Point) -> usize {
        let ix = self.axis_index(p[0]);
        if self.dim == 1 {
            ix
        } else {
            self.index(ix, self.axis_index(p[1]))
        }
    }

    /// Axis neighbours of a cell (2 in 1-d, up to 4 in 2-d).
    pub fn neighbours(&self, cell: usize) -> Vec<usize> {
        let [ix, iy] = self.coords(cell);
        let mut out = Vec::with_capacity(4);
        if ix > 0 {
            out.push(self.index(ix - 1, iy));
        }
        if ix + 1 < self.m {
            out.push(self.index(ix + 1, iy));
        }
        if self.dim == 2 {
            if iy > 0 {
                out.push(self.index(ix, iy - 1));
            }
            if iy + 1 < self.m {
                out.push(self.index(ix, iy + 1));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Label {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum PartitionFamily {
    #[serde(rename = "alternating1d")]
    Alternating1d { k: f64 },
    Chessboard,
    Balls { r: f64 },
    Strips,
}

impl PartitionFamily {
    pub fn name(&self) -> &'static str {
        match self {
            PartitionFamily::Alternating1d { .. } => "alternating1d",
            PartitionFamily::Chessboard => "chessboard",
            PartitionFamily::Balls { .. } => "balls",
            PartitionFamily::Strips => "strips",
        }
    }
}

/// One connected component `B_n^j`, stored as its cells plus the bounding
/// box of cell indices (inclusive).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Component {
    pub cells: Vec<usize>,
    pub lo: [usize; 2],
    pub hi: [usize; 2],
    /// True when the cells fill the bounding box exactly.
    pub rectangular: bool,
    pub diameter: f64,
}

impl Component {
    fn from_cells(grid: &Grid, mut cells: Vec<usize>) -> Self {
        cells.sort_unstable();
        let mut lo = [usize::MAX; 2];
        let mut hi = [0usize; 2];
        for &c in &cells {
            let xy = grid.coords(c);
            for a in 0..2 {
                lo[a] = lo[a].min(xy[a]);
                hi[a] = hi[a].max(xy[a]);
            }
        }
        let box_cells = (hi[0] - lo[0] + 1) * (hi[1] - lo[1] + 1);
        let rectangular = box_cells == cells.len();
        let h = grid.h();
        let diameter = if rectangular {
            let wx = (hi[0] - lo[0] + 1) as f64 * h;
            if grid.dim() == 1 {
                wx
            } else {
                let wy = (hi[1] - lo[1] + 1) as f64 * h;
                wx.hypot(wy)
            }
        } else {
            union_diameter(grid, &cells)
        };
        Self {
            cells,
            lo,
            hi,
            rectangular,
            diameter,
        }
    }

    /// Physical extent `[lo, hi]` of the bounding box along `axis`.
    pub fn extent(&self, h: f64, axis: usize) -> (f64, f64) {
        (self.lo[axis] as f64 * h, (self.hi[axis] + 1) as f64 * h)
    }
}

// Hull vertices of a union of cells are among the per-row extreme corners.
fn union_diameter(grid: &Grid, cells: &[usize]) -> f64 {
    use std::collections::BTreeMap;
    let h = grid.h();
    let mut rows: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for &c in cells {
        let [ix, iy] = grid.coords(c);
        let e = rows.entry(iy).or_insert((ix, ix));
        e.0 = e.0.min(ix);
        e.1 = e.1.max(ix);
    }
    let mut corners = Vec::with_capacity(rows.len() * 4);
    for (&iy, &(x0, x1)) in &rows {
        let (y0, y1) = (iy as f64 * h, (iy + 1) as f64 * h);
        let (xl, xr) = (x0 as f64 * h, (x1 + 1) as f64 * h);
        corners.extend_from_slice(&[[xl, y0], [xl, y1], [xr, y0], [xr, y1]]);
    }
    let mut best: f64 = 0.0;
    for (i, p) in corners.iter().enumerate() {
        for q in &corners[i + 1..] {
            best = best.max((p[0] - q[0]).hypot(p[1] - q[1]));
        }
    }
    best
}

/// Decomposition of the grid cells into the nonlocal region `A` and the
/// local region `B`, with the per-cell volume fraction `θ`.
#[derive(Debug, Clone, Serialize)]
pub struct Partition {
    pub family: PartitionFamily,
    pub n: usize,
    pub grid: Grid,
    pub labels: Vec<Label>,
    /// Component index of every B-cell; `None` on A-cells.
    pub component_of: Vec<Option<usize>>,
    pub components: Vec<Component>,
    pub theta: Vec<f64>,
    pub max_diam: f64,
}

impl Partition {
    fn from_components(
        family: PartitionFamily,
        n: usize,
        grid: &Grid,
        components: Vec<Vec<usize>>,
        theta: f64,
    ) -> Self {
        let cells = grid.cell_count();
        let mut labels = vec![Label::A; cells];
        let mut component_of = vec![None; cells];
        let components: Vec<Component> = components
            .into_iter()
            .enumerate()
            .map(|(j, cs)| {
                for &c in &cs {
                    labels[c] = Label::B;
                    component_of[c] = Some(j);
                }
                Component::from_cells(grid, cs)
            })
            .collect();
        let max_diam = components.iter().map(|c| c.diameter).fold(0.0, f64::max);
        Self {
            family,
            n,
            grid: grid.clone(),
            labels,
            component_of,
            components,
            theta: vec![theta; cells],
            max_diam,
        }
    }

    pub fn is_b(&self, cell: usize) -> bool {
        self.labels[cell] == Label::B
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Indicator of `B` as a vector of 0/1 values.
    pub fn b_indicator(&self) -> Vec<f64> {
        self.labels
            .iter()
            .map(|&l| if l == Label::B { 1.0 } else { 0.0 })
            .collect()
    }

    /// Smallest extent of any B-component along any axis.
    pub fn min_component_width(&self) -> f64 {
        let h = self.grid.h();
        let axes = self.grid.dim();
        self.components
            .iter()
            .flat_map(|c| (0..axes).map(move |a| (c.hi[a] - c.lo[a] + 1) as f64 * h))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn summary(&self) -> PartitionSummary {
        let (k, r) = match self.family {
            PartitionFamily::Alternating1d { k } => (Some(k), None),
            PartitionFamily::Balls { r } => (None, Some(r)),
            _ => (None, None),
        };
        PartitionSummary {
            family: self.family.name().to_string(),
            n: self.n,
            k,
            r,
            dim: self.grid.dim(),
            m: self.grid.m(),
            theta: self.theta[0],
            max_diam: self.max_diam,
            component_count: self.components.len(),
            b_measure: self.count(Label::B) as f64 * self.grid.cell_volume(),
        }
    }
}

/// Flat record describing a partition, written by the `partition` command.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartitionSummary {
    pub family: String,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    pub dim: usize,
    pub m: usize,
    pub theta: f64,
    pub max_diam: f64,
    pub component_count: usize,
    pub b_measure: f64,
}

fn require_dim(grid: &Grid, dim: usize, family: &str) -> Result<()> {
    if grid.dim() != dim {
        return Err(Error::GridMismatch(format!(
            "{family} needs a {dim}-d grid, got {}-d",
            grid.dim()
        )));
    }
    Ok(())
}

fn cells_per_block(grid: &Grid, n: usize) -> Result<usize> {
    if n == 0 {
        return Err(Error::Config("refinement index n must be positive".into()));
    }
    if !grid.m().is_multiple_of(n) {
        return Err(Error::Alignment(format!(
            "m = {} must be divisible by n = {n}",
            grid.m()
        )));
    }
    Ok(grid.m() / n)
}

// With a single block the odd-parity rule leaves B empty.
fn require_two_blocks(n: usize, family: &str) -> Result<()> {
    if n < 2 {
        return Err(Error::Config(format!("{family} needs n ≥ 2 for a nonempty B")));
    }
    Ok(())
}

fn require_open_unit(name: &str, v: f64, upper: f64) -> Result<()> {
    if !(v > 0.0 && v < upper) {
        return Err(Error::Config(format!("{name} = {v} must lie in (0, {upper})")));
    }
    Ok(())
}

/// Splits `[0,1]` into `n` subintervals, each an A-part of length `(1-k)/n`
/// on the left followed by a B-part of length `k/n`.
pub fn make_alternating_1d(n: usize, k: f64, grid: &Grid) -> Result<Partition> {
    require_dim(grid, 1, "alternating1d")?;
    require_open_unit("k", k, 1.0)?;
    let per = cells_per_block(grid, n)?;
    let b_cells_f = k * per as f64;
    let b_cells = b_cells_f.round();
    if (b_cells_f - b_cells).abs() > 1e-9 || b_cells < 1.0 || b_cells as usize >= per {
        return Err(Error::Alignment(format!(
            "k * m / n = {b_cells_f} must be an integer in [1, m/n) (m = {}, n = {n}, k = {k})",
            grid.m()
        )));
    }
    let b_cells = b_cells as usize;
    let components = (0..n)
        .map(|j| ((j + 1) * per - b_cells..(j + 1) * per).collect())
        .collect();
    Ok(Partition::from_components(
        PartitionFamily::Alternating1d { k },
        n,
        grid,
        components,
        k,
    ))
}

/// `n × n` board of squares; a square `(i, j)` belongs to `B` when `i + j` is odd.
pub fn make_chessboard(n: usize, grid: &Grid) -> Result<Partition> {
    require_dim(grid, 2, "chessboard")?;
    require_two_blocks(n, "chessboard")?;
    let per = cells_per_block(grid, n)?;
    let mut components = Vec::new();
    for sj in 0..n {
        for si in 0..n {
            if (si + sj) % 2 == 1 {
                components.push(square_cells(grid, per, si, sj).collect());
            }
        }
    }
    Ok(Partition::from_components(
        PartitionFamily::Chessboard,
        n,
        grid,
        components,
        0.5,
    ))
}

fn square_cells(grid: &Grid, per: usize, si: usize, sj: usize) -> impl Iterator<Item = usize> + '_ {
    (sj * per..(sj + 1) * per)
        .flat_map(move |iy| (si * per..(si + 1) * per).map(move |ix| grid.index(ix, iy)))
}

/// One rasterized disc of radius `r/n` per square of side `1/n`: a cell is in
/// `B` when its center lies strictly inside the disc. `θ` is the exact
/// rasterized fraction of a square.
pub fn make_balls(n: usize, r: f64, grid: &Grid) -> Result<Partition> {
    require_dim(grid, 2, "balls")?;
    require_open_unit("r", r, 0.5)?;
    let per = cells_per_block(grid, n)?;
    let radius = r / n as f64;
    let side = 1.0 / n as f64;
    let mut components = Vec::with_capacity(n * n);
    for sj in 0..n {
        for si in 0..n {
            let cx = (si as f64 + 0.5) * side;
            let cy = (sj as f64 + 0.5) * side;
            let cells: Vec<usize> = square_cells(grid, per, si, sj)
                .filter(|&c| {
                    let p = grid.cell_center(c);
                    (p[0] - cx).hypot(p[1] - cy) < radius
                })
                .collect();
            components.push(cells);
        }
    }
    let inside = components[0].len();
    if inside == 0 || inside == per * per {
        return Err(Error::InvalidResolution(format!(
            "rasterized disc of radius {radius} covers {inside} of {} cells per square; refine m",
            per * per
        )));
    }
    let theta = inside as f64 / (per * per) as f64;
    let mut p = Partition::from_components(PartitionFamily::Balls { r }, n, grid, components, theta);
    // Every cell center of a component lies strictly inside its disc, so the
    // disc diameter bounds all center-to-center distances. The union of the
    // cells overshoots it by up to √2·h and is used only when smaller.
    for c in &mut p.components {
        c.diameter = c.diameter.min(2.0 * radius);
    }
    p.max_diam = p.components.iter().map(|c| c.diameter).fold(0.0, f64::max);
    Ok(p)
}

/// Full-height vertical strips of width `1/n`; odd strips form `B`.
pub fn make_strips(n: usize, grid: &Grid) -> Result<Partition> {
    require_dim(grid, 2, "strips")?;
    require_two_blocks(n, "strips")?;
    let per = cells_per_block(grid, n)?;
    let m = grid.m();
    let components = (0..n)
        .filter(|s| s % 2 == 1)
        .map(|s| {
            (0..m)
                .flat_map(|iy| (s * per..(s + 1) * per).map(move |ix| grid.index(ix, iy)))
                .collect()
        })
        .collect();
    Ok(Partition::from_components(
        PartitionFamily::Strips,
        n,
        grid,
        components,
        0.5,
    ))
}

/// Builds any family from its descriptor.
pub fn make_partition(family: PartitionFamily, n: usize, grid: &Grid) -> Result<Partition> {
    match family {
        PartitionFamily::Alternating1d { k } => make_alternating_1d(n, k, grid),
        PartitionFamily::Chessboard => make_chessboard(n, grid),
        PartitionFamily::Balls { r } => make_balls(n, r, grid),
        PartitionFamily::Strips => make_strips(n, grid),
    }
}

/// `|∫ χ_B φ − ∫ θ φ|` by midpoint quadrature.
pub fn weak_density_gap(partition: &Partition, phi: impl Fn(Point) -> f64) -> f64 {
    let grid = &partition.grid;
    let sum: f64 = (0..grid.cell_count())
        .map(|c| {
            let chi = if partition.is_b(c) { 1.0 } else { 0.0 };
            (chi - partition.theta[c]) * phi(grid.cell_center(c))
        })
        .sum();
    (sum * grid.cell_volume()).abs()
}
