//! Monte Carlo simulation of the labeled jump/diffusion processes and the
//! diagnostics that compare them with the solvers.
//!
//! Every particle owns a ChaCha stream selected by its index, so an ensemble
//! is a pure function of the master seed regardless of how rayon schedules
//! the work.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::Field;
use crate::geometry::{Grid, Partition, Point};
use crate::kernel::{sample_target, uniform_in_cell, DiscreteKernel};
use crate::timestep::validate_snapshots;

/// Label 1: white / in `A`. Label 2: black / in `B`.
pub const WHITE: u8 = 1;
pub const BLACK: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParticleState {
    pub position: Point,
    pub label: u8,
    /// Time of the next exponential clock ring.
    pub clock: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    /// Accepted jump that keeps the label.
    Jump,
    /// Clock rang but the move was rejected.
    Suppressed,
    /// Accepted jump that changes the label.
    LabelSwitch,
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::Jump => "jump",
            EventKind::Suppressed => "suppressed",
            EventKind::LabelSwitch => "label-switch",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
    pub from: Point,
    pub to: Point,
    pub from_label: u8,
    pub to_label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimConfig {
    pub particle_count: usize,
    pub seed: u64,
    /// Brownian substep `δ`; ignored by the pure-jump limit simulator.
    pub brownian_substep: f64,
    pub snapshot_times: Vec<f64>,
    pub horizon: f64,
    pub record_events: bool,
}

impl SimConfig {
    fn validate_common(&self) -> Result<()> {
        if self.particle_count == 0 {
            return Err(Error::Config("particle_count must be positive".into()));
        }
        validate_snapshots(&self.snapshot_times, self.horizon)
    }

    /// Largest admissible `δ` for a partition: `(min width)² / 16`.
    pub fn max_substep(partition: &Partition) -> f64 {
        partition.min_component_width().powi(2) / 16.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleMeta {
    pub process: String,
    pub dim: usize,
    pub particle_count: usize,
    pub seed: u64,
    pub brownian_substep: Option<f64>,
    pub family: Option<String>,
    pub n: Option<usize>,
    pub kernel: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub snapshot_times: Vec<f64>,
    /// `snapshots[k][p]` is particle `p` at `snapshot_times[k]`.
    pub snapshots: Vec<Vec<ParticleState>>,
    pub initial: Vec<ParticleState>,
    /// Per-particle event logs when requested.
    pub events: Option<Vec<Vec<Event>>>,
    pub meta: EnsembleMeta,
}

impl Ensemble {
    pub fn particle_count(&self) -> usize {
        self.initial.len()
    }

    fn snapshot(&self, index: usize) -> Result<&[ParticleState]> {
        self.snapshots.get(index).map(Vec::as_slice).ok_or_else(|| {
            Error::SnapshotMismatch(format!(
                "snapshot {index} requested, ensemble has {}",
                self.snapshots.len()
            ))
        })
    }

    /// Index of the snapshot taken at time `t`.
    pub fn snapshot_index(&self, t: f64) -> Result<usize> {
        self.snapshot_times
            .iter()
            .position(|&s| (s - t).abs() <= 1e-12 * t.abs().max(1.0))
            .ok_or_else(|| Error::SnapshotMismatch(format!("no snapshot at t = {t}")))
    }

    /// Fraction of particles carrying `label` at a snapshot.
    pub fn label_fraction(&self, index: usize, label: u8) -> Result<f64> {
        let snap = self.snapshot(index)?;
        Ok(snap.iter().filter(|p| p.label == label).count() as f64 / snap.len() as f64)
    }
}

/// Folds `pos` into `[lo, hi]` by repeated reflection at the end points.
pub fn reflect(pos: f64, lo: f64, hi: f64) -> f64 {
    debug_assert!(hi > lo);
    if pos >= lo && pos <= hi {
        return pos;
    }
    let width = hi - lo;
    let r = (pos - lo).rem_euclid(2.0 * width);
    let folded = if r <= width { lo + r } else { lo + 2.0 * width - r };
    folded.clamp(lo, hi)
}

/// Checks that `u0` is a nonnegative field of unit mass.
fn check_density(u0: &Field, grid: &Grid) -> Result<()> {
    if u0.len() != grid.cell_count() {
        return Err(Error::GridMismatch(format!(
            "initial density has {} cells, grid has {}",
            u0.len(),
            grid.cell_count()
        )));
    }
    if u0.min() < 0.0 || (u0.total_mass() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(
            "initial density must be nonnegative with unit mass".into(),
        ));
    }
    Ok(())
}

fn particle_rng(seed: u64, particle: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(particle as u64);
    rng
}

fn exp1<R: Rng>(rng: &mut R) -> f64 {
    Exp1.sample(rng)
}

fn sample_initial<R: Rng>(grid: &Grid, cells: &WeightedIndex<f64>, rng: &mut R) -> Point {
    let cell = cells.sample(rng);
    uniform_in_cell(grid, cell, rng)
}

struct Trajectory {
    initial: ParticleState,
    snaps: Vec<ParticleState>,
    events: Vec<Event>,
}

fn assemble(
    trajectories: Vec<Trajectory>,
    config: &SimConfig,
    meta: EnsembleMeta,
) -> Ensemble {
    let snaps_len = config.snapshot_times.len();
    let mut snapshots = vec![Vec::with_capacity(trajectories.len()); snaps_len];
    let mut initial = Vec::with_capacity(trajectories.len());
    let mut events = config.record_events.then(|| Vec::with_capacity(trajectories.len()));
    for tr in trajectories {
        initial.push(tr.initial);
        for (k, s) in tr.snaps.into_iter().enumerate() {
            snapshots[k].push(s);
        }
        if let Some(ev) = events.as_mut() {
            ev.push(tr.events);
        }
    }
    Ensemble {
        snapshot_times: config.snapshot_times.clone(),
        snapshots,
        initial,
        events,
        meta,
    }
}

/// Reflected Brownian motion restricted to one `B`-component.
struct ComponentWalker<'a> {
    partition: &'a Partition,
}

impl ComponentWalker<'_> {
    /// Moves `p` by `dx` inside the component containing `cell`.
    fn displace(&self, p: Point, dx: Point, comp: usize) -> Point {
        let grid = &self.partition.grid;
        let c = &self.partition.components[comp];
        let h = grid.h();
        let mut q = p;
        if c.rectangular {
            for a in 0..grid.dim() {
                let (lo, hi) = c.extent(h, a);
                q[a] = reflect(p[a] + dx[a], lo, hi);
            }
        } else {
            for a in 0..grid.dim() {
                q[a] = self.staircase(q, a, dx[a], comp);
            }
        }
        self.settle(q, comp)
    }

    /// Axis-wise walk that crosses cell faces while the next cell belongs to
    /// the component and reflects at faces that leave it.
    fn staircase(&self, p: Point, axis: usize, d: f64, comp: usize) -> f64 {
        let grid = &self.partition.grid;
        let h = grid.h();
        let m = grid.m();
        let mut idx = [grid.axis_index(p[0]), grid.axis_index(p[1])];
        let mut pos = p[axis];
        let mut rem = d;
        let inside = |idx: [usize; 2]| self.partition.component_of[grid.index(idx[0], idx[1])] == Some(comp);
        while rem != 0.0 {
            let lo = idx[axis] as f64 * h;
            let hi = lo + h;
            if rem > 0.0 {
                if pos + rem <= hi {
                    return pos + rem;
                }
                rem -= hi - pos;
                pos = hi;
                let mut next = idx;
                next[axis] += 1;
                if idx[axis] + 1 < m && inside(next) {
                    idx = next;
                } else {
                    rem = -rem;
                }
            } else {
                if pos + rem >= lo {
                    return pos + rem;
                }
                rem += pos - lo;
                pos = lo;
                let mut next = idx;
                if idx[axis] > 0 {
                    next[axis] -= 1;
                }
                if idx[axis] > 0 && inside(next) {
                    idx = next;
                } else {
                    rem = -rem;
                }
            }
        }
        pos
    }

    /// A point landing exactly on an outer face can be located in the
    /// neighbouring cell; pull it back into the component.
    fn settle(&self, p: Point, comp: usize) -> Point {
        let grid = &self.partition.grid;
        let cell = grid.locate(p);
        if self.partition.component_of[cell] == Some(comp) {
            return p;
        }
        let h = grid.h();
        let eps = 1e-9 * h;
        let mut best = p;
        for a in 0..grid.dim() {
            for s in [-eps, eps] {
                let mut q = p;
                q[a] += s;
                if self.partition.component_of[grid.locate(q)] == Some(comp) {
                    best = q;
                }
            }
        }
        best
    }
}

fn brownian<R: Rng>(
    walker: &ComponentWalker<'_>,
    mut p: Point,
    comp: usize,
    duration: f64,
    delta: f64,
    rng: &mut R,
) -> Point {
    let dim = walker.partition.grid.dim();
    let mut left = duration;
    while left > 0.0 {
        let dt = if left < delta * (1.0 + 1e-9) { left } else { delta };
        let s = dt.sqrt();
        let mut dx = [0.0; 2];
        for d in dx.iter_mut().take(dim) {
            let z: f64 = StandardNormal.sample(rng);
            *d = s * z;
        }
        p = walker.displace(p, dx, comp);
        left -= dt;
    }
    p
}

/// Simulates the pre-limit process: rate-1 jump clocks, `B→B` jumps
/// suppressed, standard reflected Brownian motion inside `B`, rest in `A`.
pub fn simulate_coupled(
    partition: &Partition,
    kernel: &DiscreteKernel,
    u0: &Field,
    config: &SimConfig,
) -> Result<Ensemble> {
    config.validate_common()?;
    let grid = &partition.grid;
    check_density(u0, grid)?;
    if kernel.size() != grid.cell_count() {
        return Err(Error::GridMismatch("kernel does not match the partition grid".into()));
    }
    let delta = config.brownian_substep;
    let bound = SimConfig::max_substep(partition);
    if !(delta > 0.0) || delta > bound * (1.0 + 1e-12) {
        return Err(Error::Config(format!(
            "brownian substep {delta} must lie in (0, {bound}] = (0, (min width)²/16]"
        )));
    }
    let cells = WeightedIndex::new(&u0.values)
        .map_err(|e| Error::Config(format!("initial density: {e}")))?;
    let walker = ComponentWalker { partition };
    let label_of = |p: Point| {
        if partition.is_b(grid.locate(p)) {
            BLACK
        } else {
            WHITE
        }
    };

    let trajectories: Vec<Trajectory> = (0..config.particle_count)
        .into_par_iter()
        .map(|pid| {
            let mut rng = particle_rng(config.seed, pid);
            let mut pos = sample_initial(grid, &cells, &mut rng);
            let mut clock = exp1(&mut rng);
            let initial = ParticleState {
                position: pos,
                label: label_of(pos),
                clock,
            };
            let mut t = 0.0;
            let mut snaps = Vec::with_capacity(config.snapshot_times.len());
            let mut events = Vec::new();
            for &s in &config.snapshot_times {
                while clock <= s {
                    let here = grid.locate(pos);
                    if let Some(comp) = partition.component_of[here] {
                        pos = brownian(&walker, pos, comp, clock - t, delta, &mut rng);
                    }
                    t = clock;
                    let from_cell = grid.locate(pos);
                    let from_label = label_of(pos);
                    let (kind, to) = match sample_target(kernel, grid, from_cell, &mut rng) {
                        None => (EventKind::Suppressed, pos),
                        Some((cell, y)) => {
                            if partition.is_b(from_cell) && partition.is_b(cell) {
                                (EventKind::Suppressed, pos)
                            } else {
                                let kind = if partition.is_b(cell) == partition.is_b(from_cell) {
                                    EventKind::Jump
                                } else {
                                    EventKind::LabelSwitch
                                };
                                (kind, y)
                            }
                        }
                    };
                    if config.record_events {
                        events.push(Event {
                            time: t,
                            kind,
                            from: pos,
                            to,
                            from_label,
                            to_label: label_of(to),
                        });
                    }
                    pos = to;
                    clock += exp1(&mut rng);
                }
                if let Some(comp) = partition.component_of[grid.locate(pos)] {
                    pos = brownian(&walker, pos, comp, s - t, delta, &mut rng);
                }
                t = s;
                snaps.push(ParticleState {
                    position: pos,
                    label: label_of(pos),
                    clock,
                });
            }
            Trajectory {
                initial,
                snaps,
                events,
            }
        })
        .collect();

    Ok(assemble(
        trajectories,
        config,
        EnsembleMeta {
            process: "coupled".into(),
            dim: grid.dim(),
            particle_count: config.particle_count,
            seed: config.seed,
            brownian_substep: Some(delta),
            family: Some(partition.family.name().into()),
            n: Some(partition.n),
            kernel: kernel.spec().family.name().into(),
        },
    ))
}

/// Simulates the limit labeled process. From `(x, 1)` a rate-1 clock moves
/// the particle to `y ~ W(x, ·)` and relabels it 2 with probability `θ(y)`.
/// From `(x, 2)` the proposed move to `(y, 1)` is accepted with
/// probability `1 − θ(y)`.
pub fn simulate_limit(
    theta: &[f64],
    kernel: &DiscreteKernel,
    grid: &Grid,
    u0: &Field,
    config: &SimConfig,
) -> Result<Ensemble> {
    config.validate_common()?;
    check_density(u0, grid)?;
    if theta.len() != grid.cell_count() || kernel.size() != grid.cell_count() {
        return Err(Error::GridMismatch("theta or kernel does not match the grid".into()));
    }
    if let Some(t) = theta.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(Error::Config(format!("theta value {t} outside (0, 1)")));
    }
    let cells = WeightedIndex::new(&u0.values)
        .map_err(|e| Error::Config(format!("initial density: {e}")))?;

    let trajectories: Vec<Trajectory> = (0..config.particle_count)
        .into_par_iter()
        .map(|pid| {
            let mut rng = particle_rng(config.seed, pid);
            let mut pos = sample_initial(grid, &cells, &mut rng);
            let th0 = theta[grid.locate(pos)];
            let mut label = if rng.random::<f64>() < 1.0 - th0 { WHITE } else { BLACK };
            let mut clock = exp1(&mut rng);
            let initial = ParticleState {
                position: pos,
                label,
                clock,
            };
            let mut snaps = Vec::with_capacity(config.snapshot_times.len());
            let mut events = Vec::new();
            for &s in &config.snapshot_times {
                while clock <= s {
                    let from_cell = grid.locate(pos);
                    let (to, to_label) = match sample_target(kernel, grid, from_cell, &mut rng) {
                        None => (pos, label),
                        Some((cell, y)) => {
                            let th = theta[cell];
                            let u: f64 = rng.random();
                            if label == WHITE {
                                (y, if u < th { BLACK } else { WHITE })
                            } else if u < 1.0 - th {
                                (y, WHITE)
                            } else {
                                (pos, BLACK)
                            }
                        }
                    };
                    if config.record_events {
                        let kind = if to == pos && to_label == label {
                            EventKind::Suppressed
                        } else if to_label != label {
                            EventKind::LabelSwitch
                        } else {
                            EventKind::Jump
                        };
                        events.push(Event {
                            time: clock,
                            kind,
                            from: pos,
                            to,
                            from_label: label,
                            to_label,
                        });
                    }
                    pos = to;
                    label = to_label;
                    clock += exp1(&mut rng);
                }
                snaps.push(ParticleState {
                    position: pos,
                    label,
                    clock,
                });
            }
            Trajectory {
                initial,
                snaps,
                events,
            }
        })
        .collect();

    Ok(assemble(
        trajectories,
        config,
        EnsembleMeta {
            process: "limit".into(),
            dim: grid.dim(),
            particle_count: config.particle_count,
            seed: config.seed,
            brownian_substep: None,
            family: None,
            n: None,
            kernel: kernel.spec().family.name().into(),
        },
    ))
}

/// Histogram densities `(total, label 1, label 2)` on `grid`, normalized by
/// `N·h^dim`.
pub fn empirical_density(ensemble: &Ensemble, index: usize, grid: &Grid) -> Result<(Field, Field, Field)> {
    let snap = ensemble.snapshot(index)?;
    let t = ensemble.snapshot_times[index];
    let cells = grid.cell_count();
    let mut c1 = vec![0u64; cells];
    let mut c2 = vec![0u64; cells];
    for p in snap {
        let c = grid.locate(p.position);
        if p.label == WHITE {
            c1[c] += 1;
        } else {
            c2[c] += 1;
        }
    }
    let norm = snap.len() as f64 * grid.cell_volume();
    let to_field = |counts: &[u64]| Field::new(grid, counts.iter().map(|&k| k as f64 / norm).collect(), t);
    let total: Vec<u64> = c1.iter().zip(&c2).map(|(a, b)| a + b).collect();
    Ok((to_field(&total), to_field(&c1), to_field(&c2)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BinScore {
    pub bin: usize,
    pub expected: f64,
    pub observed: f64,
    pub sigma: f64,
    pub z: f64,
}

/// Binomial z-score of an observed fraction against an expected probability.
pub fn binomial_z(observed: f64, expected: f64, samples: usize) -> (f64, f64) {
    let sigma = (expected * (1.0 - expected) / samples as f64).max(0.0).sqrt();
    let diff = observed - expected;
    let z = if sigma > 0.0 {
        diff / sigma
    } else if diff == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    (sigma, z)
}

/// Per-bin z-scores of the particles carrying `label` (all particles when
/// `None`) against the probability mass of `reference` in each bin. Bins are
/// `bins` equal intervals per axis and must be unions of grid cells.
pub fn histogram_z_scores(
    ensemble: &Ensemble,
    index: usize,
    label: Option<u8>,
    reference: &Field,
    grid: &Grid,
    bins: usize,
) -> Result<Vec<BinScore>> {
    let snap = ensemble.snapshot(index)?;
    let m = grid.m();
    if bins == 0 || !m.is_multiple_of(bins) {
        return Err(Error::Alignment(format!("{bins} bins do not tile {m} cells per axis")));
    }
    if reference.len() != grid.cell_count() {
        return Err(Error::GridMismatch("reference field does not match grid".into()));
    }
    let per = m / bins;
    let dim = grid.dim();
    let bin_count = bins.pow(dim as u32);
    let bin_of_cell = |c: usize| {
        let [ix, iy] = grid.coords(c);
        if dim == 1 {
            ix / per
        } else {
            (iy / per) * bins + ix / per
        }
    };
    let mut expected = vec![0.0; bin_count];
    for (c, v) in reference.values.iter().enumerate() {
        expected[bin_of_cell(c)] += v * reference.cell_volume;
    }
    let mut counts = vec![0u64; bin_count];
    for p in snap {
        if label.is_none_or(|l| l == p.label) {
            counts[bin_of_cell(grid.locate(p.position))] += 1;
        }
    }
    let n = snap.len();
    Ok((0..bin_count)
        .map(|b| {
            let observed = counts[b] as f64 / n as f64;
            let (sigma, z) = binomial_z(observed, expected[b], n);
            BinScore {
                bin: b,
                expected: expected[b],
                observed,
                sigma,
                z,
            }
        })
        .collect())
}

/// Observables `f(x, i)` for the martingale check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Observable {
    One,
    Label,
    X,
    XSquared,
}

impl Observable {
    pub const ALL: [Observable; 4] = [Observable::One, Observable::Label, Observable::X, Observable::XSquared];

    pub fn name(&self) -> &'static str {
        match self {
            Observable::One => "1",
            Observable::Label => "i",
            Observable::X => "x",
            Observable::XSquared => "x^2",
        }
    }

    pub fn eval(&self, p: Point, label: u8) -> f64 {
        match self {
            Observable::One => 1.0,
            Observable::Label => label as f64,
            Observable::X => p[0],
            Observable::XSquared => p[0] * p[0],
        }
    }

    /// Exact mean over a uniform point of `cell`.
    fn cell_mean(&self, grid: &Grid, cell: usize, label: u8) -> f64 {
        let c = grid.cell_center(cell)[0];
        let h = grid.h();
        match self {
            Observable::One => 1.0,
            Observable::Label => label as f64,
            Observable::X => c,
            Observable::XSquared => c * c + h * h / 12.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MartingaleResult {
    pub mean: f64,
    pub stderr: f64,
}

/// Sample mean of `f(X_t, I_t) − f(X_0, I_0) − ∫₀ᵗ 𝓛̃f(X_s, I_s) ds` over a
/// limit-process ensemble, with the generator integral evaluated exactly
/// between events.
pub fn martingale_residual(
    ensemble: &Ensemble,
    theta: &[f64],
    kernel: &DiscreteKernel,
    grid: &Grid,
    f: Observable,
    t: f64,
) -> Result<MartingaleResult> {
    let events = ensemble.events.as_ref().ok_or_else(|| {
        Error::DiagnosticUnavailable("martingale residual needs event logs (record_events)".into())
    })?;
    if ensemble.meta.process != "limit" {
        return Err(Error::DiagnosticUnavailable(
            "martingale residual is defined for the limit process".into(),
        ));
    }
    let horizon = ensemble.snapshot_times.last().copied().unwrap_or(0.0);
    if !(t >= 0.0 && t <= horizon) {
        return Err(Error::SnapshotMismatch(format!("t = {t} outside the simulated window")));
    }
    let n = grid.cell_count();
    if theta.len() != n || kernel.size() != n {
        return Err(Error::GridMismatch("theta or kernel does not match the grid".into()));
    }
    // 𝓛̃f(x,1) = Σ_j W_cj (g_j − f(x,1)), g_j = E f(Y,1) + θ_j (E f(Y,2) − E f(Y,1));
    // 𝓛̃f(x,2) = Σ_j W_cj (1 − θ_j)(E f(Y,1) − f(x,2)).
    let f1: Vec<f64> = (0..n).map(|j| f.cell_mean(grid, j, WHITE)).collect();
    let f2: Vec<f64> = (0..n).map(|j| f.cell_mean(grid, j, BLACK)).collect();
    let g: Vec<f64> = (0..n).map(|j| f1[j] + theta[j] * (f2[j] - f1[j])).collect();
    let release: Vec<f64> = theta.iter().map(|th| 1.0 - th).collect();
    let release_f1: Vec<f64> = (0..n).map(|j| release[j] * f1[j]).collect();
    let ones = vec![1.0; n];
    let mut wg = vec![0.0; n];
    let mut rate = vec![0.0; n];
    let mut w_release_f1 = vec![0.0; n];
    let mut w_release = vec![0.0; n];
    kernel.apply(&g, &mut wg);
    kernel.apply(&ones, &mut rate);
    kernel.apply(&release_f1, &mut w_release_f1);
    kernel.apply(&release, &mut w_release);
    let gen = |p: Point, label: u8| {
        let c = grid.locate(p);
        let v = f.eval(p, label);
        if label == WHITE {
            wg[c] - rate[c] * v
        } else {
            w_release_f1[c] - w_release[c] * v
        }
    };

    let samples: Vec<f64> = ensemble
        .initial
        .par_iter()
        .zip(events.par_iter())
        .map(|(init, log)| {
            let (mut p, mut label) = (init.position, init.label);
            let mut s = 0.0;
            let mut integral = 0.0;
            for e in log.iter().take_while(|e| e.time <= t) {
                integral += gen(p, label) * (e.time - s);
                s = e.time;
                p = e.to;
                label = e.to_label;
            }
            integral += gen(p, label) * (t - s);
            f.eval(p, label) - f.eval(init.position, init.label) - integral
        })
        .collect();
    let count = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / count;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (count - 1.0).max(1.0);
    Ok(MartingaleResult {
        mean,
        stderr: (var / count).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_alternating_1d, make_balls, make_grid};
    use crate::kernel::{discretize, KernelSpec};

    fn config(n: usize, snaps: Vec<f64>, delta: f64, events: bool) -> SimConfig {
        SimConfig {
            particle_count: n,
            seed: 11,
            brownian_substep: delta,
            horizon: *snaps.last().unwrap(),
            snapshot_times: snaps,
            record_events: events,
        }
    }

    #[test]
    fn reflect_examples() {
        assert!((reflect(0.65, 0.0, 0.5) - 0.35).abs() < 1e-15);
        assert_eq!(reflect(0.3, 0.0, 0.5), 0.3);
        assert!((reflect(-0.7, 0.0, 0.5) - 0.3).abs() < 1e-15);
        // Fold-sequence oracle on a shifted interval.
        let mut x: f64 = 2.15;
        let (lo, hi) = (0.25, 0.75);
        while !(lo..=hi).contains(&x) {
            x = if x > hi { 2.0 * hi - x } else { 2.0 * lo - x };
        }
        assert!((reflect(2.15, lo, hi) - x).abs() < 1e-12);
    }

    #[test]
    fn staircase_matches_fold_on_rectangles() {
        let g = make_grid(2, 8).unwrap();
        let p = make_balls(1, 0.45, &g).unwrap();
        let walker = ComponentWalker { partition: &p };
        let comp = 0;
        // Center cell of the disc, a short move stays put inside.
        let start = [0.5 + 1e-3, 0.5 + 1e-3];
        let q = walker.displace(start, [0.01, -0.02], comp);
        assert!((q[0] - 0.511).abs() < 1e-12 && (q[1] - 0.481).abs() < 1e-12);
        // Long moves never leave the component.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut x = start;
        for _ in 0..2000 {
            let d = [rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6)];
            x = walker.displace(x, d, comp);
            assert_eq!(p.component_of[g.locate(x)], Some(comp));
        }
    }

    #[test]
    fn rejects_large_substep() {
        let g = make_grid(1, 16).unwrap();
        let p = make_alternating_1d(2, 0.5, &g).unwrap();
        let k = discretize(&KernelSpec::constant(), &g).unwrap();
        let u0 = Field::constant(&g, 1.0);
        let bad = config(10, vec![1.0], 0.01, false);
        assert!(matches!(simulate_coupled(&p, &k, &u0, &bad), Err(Error::Config(_))));
        let ok = config(10, vec![1.0], SimConfig::max_substep(&p), false);
        assert!(simulate_coupled(&p, &k, &u0, &ok).is_ok());
    }

    #[test]
    fn coupled_invariants() {
        let g = make_grid(1, 16).unwrap();
        let p = make_alternating_1d(2, 0.5, &g).unwrap();
        let k = discretize(&KernelSpec::gaussian(0.3), &g).unwrap();
        let u0 = Field::constant(&g, 1.0);
        let cfg = config(2000, vec![0.0, 0.5, 1.0], 1e-3, true);
        let e = simulate_coupled(&p, &k, &u0, &cfg).unwrap();
        for snap in &e.snapshots {
            for s in snap {
                assert!((0.0..=1.0).contains(&s.position[0]));
                let expect = if p.is_b(g.locate(s.position)) { BLACK } else { WHITE };
                assert_eq!(s.label, expect);
            }
        }
        for log in e.events.as_ref().unwrap() {
            for ev in log {
                if ev.kind != EventKind::Suppressed {
                    assert!(!(ev.from_label == BLACK && ev.to_label == BLACK));
                }
            }
        }
        let again = simulate_coupled(&p, &k, &u0, &cfg).unwrap();
        assert_eq!(e, again);
    }

    #[test]
    fn worker_count_does_not_matter() {
        let g = make_grid(1, 16).unwrap();
        let k = discretize(&KernelSpec::constant(), &g).unwrap();
        let u0 = Field::constant(&g, 1.0);
        let cfg = config(500, vec![0.5, 1.0], 0.0, true);
        let theta = vec![0.5; 16];
        let a = simulate_limit(&theta, &k, &g, &u0, &cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| simulate_limit(&theta, &k, &g, &u0, &cfg).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn zero_time_histogram_matches_u0() {
        let g = make_grid(1, 16).unwrap();
        let p = make_alternating_1d(2, 0.5, &g).unwrap();
        let k = discretize(&KernelSpec::constant(), &g).unwrap();
        let u0 = Field::from_fn(&g, |x| 1.0 + 0.5 * (std::f64::consts::PI * x[0]).cos())
            .normalized()
            .unwrap();
        let e = simulate_coupled(&p, &k, &u0, &config(20_000, vec![0.0], 1e-3, false)).unwrap();
        let z = histogram_z_scores(&e, 0, None, &u0, &g, 8).unwrap();
        assert!(z.iter().all(|b| b.z.abs() <= 4.0), "{z:?}");
    }

    #[test]
    fn label_two_does_not_move_between_events() {
        let g = make_grid(1, 8).unwrap();
        let k = discretize(&KernelSpec::constant(), &g).unwrap();
        let u0 = Field::constant(&g, 1.0);
        let e = simulate_limit(&[0.5; 8], &k, &g, &u0, &config(300, vec![1.0, 2.0], 0.0, true)).unwrap();
        for (init, log) in e.initial.iter().zip(e.events.as_ref().unwrap()) {
            let mut pos = init.position;
            let mut label = init.label;
            for ev in log {
                assert_eq!(ev.from, pos);
                assert_eq!(ev.from_label, label);
                if label == BLACK && ev.to_label == BLACK {
                    assert_eq!(ev.to, pos);
                }
                pos = ev.to;
                label = ev.to_label;
            }
        }
    }

    #[test]
    fn empirical_density_normalization() {
        let g = make_grid(1, 4).unwrap();
        let state = |x: f64, label| ParticleState {
            position: [x, 0.0],
            label,
            clock: 1.0,
        };
        let snap = vec![state(0.1, WHITE), state(0.12, BLACK), state(0.2, WHITE)];
        let e = Ensemble {
            snapshot_times: vec![0.0],
            snapshots: vec![snap.clone()],
            initial: snap,
            events: None,
            meta: EnsembleMeta {
                process: "limit".into(),
                dim: 1,
                particle_count: 3,
                seed: 0,
                brownian_substep: None,
                family: None,
                n: None,
                kernel: "constant".into(),
            },
        };
        let (tot, l1, l2) = empirical_density(&e, 0, &g).unwrap();
        assert_eq!(tot.values, vec![4.0, 0.0, 0.0, 0.0]);
        assert!((l1.total_mass() + l2.total_mass() - 1.0).abs() < 1e-15);
        assert!(empirical_density(&e, 1, &g).is_err());
        let k = discretize(&KernelSpec::constant(), &g).unwrap();
        assert!(matches!(
            martingale_residual(&e, &[0.5; 4], &k, &g, Observable::One, 0.0),
            Err(Error::DiagnosticUnavailable(_))
        ));
    }

    #[test]
    fn martingale_one_is_exactly_zero() {
        let g = make_grid(1, 8).unwrap();
        let k = discretize(&KernelSpec::gaussian(0.3), &g).unwrap();
        let theta: Vec<f64> = (0..8).map(|i| 0.2 + 0.05 * i as f64).collect();
        let u0 = Field::constant(&g, 1.0);
        let e = simulate_limit(&theta, &k, &g, &u0, &config(2000, vec![1.0], 0.0, true)).unwrap();
        let r = martingale_residual(&e, &theta, &k, &g, Observable::One, 1.0).unwrap();
        assert_eq!(r.mean, 0.0);
        for f in [Observable::Label, Observable::X, Observable::XSquared] {
            let r = martingale_residual(&e, &theta, &k, &g, f, 1.0).unwrap();
            assert!(r.mean.abs() <= 4.0 * r.stderr, "{f:?} {r:?}");
        }
    }
}
