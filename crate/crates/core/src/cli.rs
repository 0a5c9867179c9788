//! Command-line front end. Each subcommand reads one TOML config, runs one
//! computation and writes its artifacts plus `manifest.json` into the output
//! directory.

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::config::{CompareTarget, ExperimentConfig, FamilyName};
use crate::coupled::{self, CoupledOperator};
use crate::error::{Error, Result};
use crate::export::{ArtifactWriter, ManifestEntry};
use crate::field::{l2_norm, total_mass, Field};
use crate::geometry::{Grid, Partition};
use crate::homogenize::{run_sweep, ConvergenceReport, RatioCheck, SweepSpec};
use crate::kernel::DiscreteKernel;
use crate::limit::{integrate_limit, mass_pair, DensityPair, LimitOperator, StripMode};
use crate::particle::{
    binomial_z, empirical_density, histogram_z_scores, simulate_coupled, simulate_limit, BinScore,
    Ensemble, SimConfig, BLACK, WHITE,
};

#[derive(Debug, Parser)]
#[command(name = "mixdiff", version, about = "Mixed local/nonlocal diffusion and its homogenization limit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `[output].directory`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Master seed (overrides `[particles].seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Suppress the progress summary on stdout.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Build a partition and write its summary and cell labels.
    Partition,
    /// Integrate the pre-limit equation.
    SolveCoupled,
    /// Integrate the limit system for (a, b).
    SolveLimit,
    /// Simulate the pre-limit particle process.
    SimulateN,
    /// Simulate the limit labeled process.
    SimulateLimit,
    /// Run a convergence sweep over n.
    Sweep,
    /// Run a simulator and its solver and write per-bin z-scores.
    Compare,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Partition => "partition",
            Command::SolveCoupled => "solve-coupled",
            Command::SolveLimit => "solve-limit",
            Command::SimulateN => "simulate-n",
            Command::SimulateLimit => "simulate-limit",
            Command::Sweep => "sweep",
            Command::Compare => "compare",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub command: Command,
    pub out_dir: PathBuf,
    pub manifest: Vec<ManifestEntry>,
    pub messages: Vec<String>,
}

/// Everything needed to repeat a run: the command and the effective config.
#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    config: &'a ExperimentConfig,
}

/// Parses the config, applies CLI overrides and runs the command.
pub fn run(cli: &Cli) -> Result<RunSummary> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config <path> is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        match cfg.particles.as_mut() {
            Some(p) => p.seed = seed,
            None => {
                if matches!(cli.command, Command::SimulateN | Command::SimulateLimit | Command::Compare) {
                    return Err(Error::Config("--seed given but config has no [particles] section".into()));
                }
            }
        }
    }
    let out_dir = cli
        .out
        .clone()
        .or_else(|| cfg.output.as_ref().map(|o| o.directory.clone()))
        .unwrap_or_else(|| PathBuf::from("out"));
    run_config(cli.command, &cfg, out_dir)
}

/// Runs a command on an already validated config.
pub fn run_config(command: Command, cfg: &ExperimentConfig, out_dir: PathBuf) -> Result<RunSummary> {
    cfg.validate()?;
    let mut w = ArtifactWriter::new(&out_dir)?;
    w.json(
        "run.json",
        &RunRecord {
            command: command.name(),
            config: cfg,
        },
    )?;
    let messages = match command {
        Command::Partition => cmd_partition(cfg, &mut w)?,
        Command::SolveCoupled => cmd_solve_coupled(cfg, &mut w)?,
        Command::SolveLimit => cmd_solve_limit(cfg, &mut w)?,
        Command::SimulateN => cmd_simulate(cfg, &mut w, false)?,
        Command::SimulateLimit => cmd_simulate(cfg, &mut w, true)?,
        Command::Sweep => cmd_sweep(cfg, &mut w)?,
        Command::Compare => cmd_compare(cfg, &mut w)?,
    };
    let manifest = w.finish()?;
    Ok(RunSummary {
        command,
        out_dir,
        manifest,
        messages,
    })
}

struct Setup {
    grid: Grid,
    partition: Partition,
    kernel: DiscreteKernel,
}

fn setup(cfg: &ExperimentConfig) -> Result<Setup> {
    let grid = cfg.grid()?;
    let partition = cfg.build_partition(&grid)?;
    let kernel = DiscreteKernel::discretize(&cfg.kernel_spec()?, &grid)?;
    Ok(Setup {
        grid,
        partition,
        kernel,
    })
}

fn cmd_partition(cfg: &ExperimentConfig, w: &mut ArtifactWriter) -> Result<Vec<String>> {
    let grid = cfg.grid()?;
    let p = cfg.build_partition(&grid)?;
    let summary = p.summary();
    w.json("partition.json", &summary)?;
    let dim = grid.dim();
    let mut header = vec!["cell_index", "x"];
    if dim == 2 {
        header.push("y");
    }
    header.extend(["label", "component", "theta"]);
    let rows = (0..grid.cell_count()).map(|c| {
        let x = grid.cell_center(c);
        let mut r = vec![c.to_string()];
        r.extend(x[..dim].iter().map(|v| v.to_string()));
        r.push(if p.is_b(c) { "B" } else { "A" }.to_string());
        r.push(p.component_of[c].map(|j| j.to_string()).unwrap_or_default());
        r.push(p.theta[c].to_string());
        r
    });
    w.csv("partition_cells.csv", &header, rows)?;
    Ok(vec![format!(
        "{} n={} components={} theta={} max_diam={}",
        summary.family, summary.n, summary.component_count, summary.theta, summary.max_diam
    )])
}

fn coupled_run(cfg: &ExperimentConfig, s: &Setup, u0: &Field) -> Result<(Vec<Field>, f64)> {
    let time = cfg.time()?;
    let cfl = time.cfl_factor.unwrap_or(coupled::DEFAULT_CFL_FACTOR);
    let dt = time.dt.unwrap_or_else(|| coupled::max_dt(&s.grid, cfl));
    let op = CoupledOperator::new(&s.partition, &s.kernel, &s.grid)?;
    let traj = coupled::integrate(&op, u0, time.horizon, dt, cfl, &time.snapshot_times())?;
    Ok((traj, dt))
}

fn cmd_solve_coupled(cfg: &ExperimentConfig, w: &mut ArtifactWriter) -> Result<Vec<String>> {
    let s = setup(cfg)?;
    let u0 = cfg.initial()?.build(&s.grid)?;
    let (traj, dt) = coupled_run(cfg, &s, &u0)?;
    w.coupled_trajectory("coupled.csv", &s.grid, &traj)?;
    let op = CoupledOperator::new(&s.partition, &s.kernel, &s.grid)?;
    let rows = traj.iter().map(|u| {
        vec![
            u.t.to_string(),
            total_mass(u).to_string(),
            l2_norm(u).to_string(),
            coupled::energy(&op, u).to_string(),
        ]
    });
    w.csv("coupled_diagnostics.csv", &["t", "mass", "l2_norm", "energy"], rows)?;
    let last = traj.last().expect("validated snapshots are nonempty");
    Ok(vec![format!(
        "dt={dt} snapshots={} final mass={} final l2={}",
        traj.len(),
        total_mass(last),
        l2_norm(last)
    )])
}

fn limit_run(cfg: &ExperimentConfig, s: &Setup, u0: &Field) -> Result<(Vec<DensityPair>, f64)> {
    let time = cfg.time()?;
    let mode = match cfg.strip_coefficient()? {
        Some(c) => StripMode::AxisY { coefficient: c },
        None => StripMode::Off,
    };
    let op = LimitOperator::new(&s.grid, s.partition.theta.clone(), &s.kernel, mode)?;
    let dt = time.dt.unwrap_or_else(|| op.max_dt().min(0.01));
    let s0 = DensityPair::split(u0, &s.partition.theta);
    let traj = integrate_limit(&op, &s0, time.horizon, dt, &time.snapshot_times())?;
    Ok((traj, dt))
}

fn cmd_solve_limit(cfg: &ExperimentConfig, w: &mut ArtifactWriter) -> Result<Vec<String>> {
    let s = setup(cfg)?;
    let u0 = cfg.initial()?.build(&s.grid)?;
    let (traj, dt) = limit_run(cfg, &s, &u0)?;
    w.limit_trajectory("limit.csv", &s.grid, &traj)?;
    let rows = traj.iter().map(|p| {
        let (a, b) = mass_pair(p);
        vec![p.t.to_string(), a.to_string(), b.to_string()]
    });
    w.csv("limit_mass.csv", &["t", "A", "B"], rows)?;
    let (a, b) = mass_pair(traj.last().expect("validated snapshots are nonempty"));
    Ok(vec![format!("dt={dt} final A={a} B={b}")])
}

fn sim_config(cfg: &ExperimentConfig, partition: Option<&Partition>) -> Result<SimConfig> {
    let p = cfg.particles()?;
    let time = cfg.time()?;
    let delta = match (p.delta, partition) {
        (Some(d), _) => d,
        (None, Some(part)) => SimConfig::max_substep(part),
        (None, None) => 0.0,
    };
    Ok(SimConfig {
        particle_count: p.count,
        seed: p.seed,
        brownian_substep: delta,
        snapshot_times: time.snapshot_times(),
        horizon: time.horizon,
        record_events: p.record_events,
    })
}

fn probability_density(cfg: &ExperimentConfig, grid: &Grid) -> Result<Field> {
    cfg.initial()?
        .build(grid)?
        .normalized()
        .ok_or_else(|| Error::Config("initial datum has no mass".into()))
}

fn simulate(cfg: &ExperimentConfig, s: &Setup, u0: &Field, limit: bool) -> Result<Ensemble> {
    if limit {
        simulate_limit(&s.partition.theta, &s.kernel, &s.grid, u0, &sim_config(cfg, None)?)
    } else {
        simulate_coupled(&s.partition, &s.kernel, u0, &sim_config(cfg, Some(&s.partition))?)
    }
}

fn cmd_simulate(cfg: &ExperimentConfig, w: &mut ArtifactWriter, limit: bool) -> Result<Vec<String>> {
    let s = setup(cfg)?;
    let u0 = probability_density(cfg, &s.grid)?;
    let ens = simulate(cfg, &s, &u0, limit)?;
    w.ensemble("ensemble.csv", &ens)?;
    w.events("events.csv", &ens)?;
    w.json("ensemble.meta.json", &ens.meta)?;
    let dim = s.grid.dim();
    let centers = s.grid.cell_centers();
    let mut rows = Vec::new();
    let mut messages = Vec::new();
    for k in 0..ens.snapshot_times.len() {
        let (tot, l1, l2) = empirical_density(&ens, k, &s.grid)?;
        for c in 0..s.grid.cell_count() {
            let mut r = vec![tot.t.to_string(), c.to_string()];
            r.extend(centers[c][..dim].iter().map(|v| v.to_string()));
            r.extend([tot.values[c], l1.values[c], l2.values[c]].map(|v| v.to_string()));
            rows.push(r);
        }
        messages.push(format!(
            "t={} P(I=1)={} P(I=2)={}",
            tot.t,
            ens.label_fraction(k, WHITE)?,
            ens.label_fraction(k, BLACK)?
        ));
    }
    let mut header = vec!["t", "cell_index", "x"];
    if dim == 2 {
        header.push("y");
    }
    header.extend(["total", "label1", "label2"]);
    w.csv("empirical_density.csv", &header, rows)?;
    Ok(messages)
}

fn spec_from_config(cfg: &ExperimentConfig) -> Result<SweepSpec> {
    let p = cfg.partition()?;
    let sw = cfg.sweep()?;
    let dim = match (&cfg.domain, p.family) {
        (Some(d), _) => d.dim,
        (None, FamilyName::Alternating1d) => 1,
        (None, _) => 2,
    };
    let mut spec = SweepSpec::new(p.family()?, dim, sw.n_list.clone(), sw.resolution_rule);
    if cfg.kernel.is_some() {
        spec.kernel = cfg.kernel_spec()?;
    }
    if let Some(ic) = &cfg.initial {
        spec.initial = ic.clone();
    }
    if let Some(t) = &cfg.time {
        spec.horizon = t.horizon;
        if let Some(c) = t.cfl_factor {
            spec.cfl_factor = c;
        }
        match &t.snapshots {
            Some(crate::config::Snapshots::Count(c)) => spec.snapshots = *c,
            Some(crate::config::Snapshots::Times(_)) => {
                return Err(Error::Config("sweep needs a snapshot count, not a list".into()))
            }
            None => {}
        }
        if let Some(dt) = t.dt {
            spec.limit_dt = dt;
        }
    }
    if let Some(c) = cfg.limit.as_ref().and_then(|l| l.strip_coefficient) {
        spec.strip_coefficient = c;
    }
    Ok(spec)
}

fn ratio_lines(report: &ConvergenceReport) -> Vec<String> {
    report
        .test_ids()
        .iter()
        .map(|id| {
            let ratio = match report.shrink_check(id, 1.0) {
                Some(RatioCheck { ratio: Some(r), first, last, .. }) => format!("{r:.4} ({first:.3e} -> {last:.3e})"),
                Some(RatioCheck { last, .. }) => format!("at floor ({last:.1e})"),
                None => "n/a".into(),
            };
            format!("[{}] {id}: gap_u(n_max)/gap_u(n_min) = {ratio}", report.meta.limit_model)
        })
        .collect()
}

fn cmd_sweep(cfg: &ExperimentConfig, w: &mut ArtifactWriter) -> Result<Vec<String>> {
    let spec = spec_from_config(cfg)?;
    let outcome = run_sweep(&spec)?;
    w.report("sweep", &outcome.primary)?;
    let mut messages = ratio_lines(&outcome.primary);
    if let Some(free) = &outcome.diffusion_free {
        w.report("sweep_diffusion_free", free)?;
        messages.extend(ratio_lines(free));
    }
    Ok(messages)
}

#[derive(Serialize)]
struct CompareSummary {
    target: CompareTarget,
    bins: usize,
    max_abs_z: f64,
    label_mass: Vec<LabelMass>,
}

#[derive(Serialize)]
struct LabelMass {
    t: f64,
    label: u8,
    observed: f64,
    expected: f64,
    sigma: f64,
    z: f64,
}

fn cmd_compare(cfg: &ExperimentConfig, w: &mut ArtifactWriter) -> Result<Vec<String>> {
    let c = cfg.compare()?;
    let s = setup(cfg)?;
    let u0 = probability_density(cfg, &s.grid)?;
    let limit = c.target == CompareTarget::Limit;
    let ens = simulate(cfg, &s, &u0, limit)?;
    let n = ens.particle_count();
    let vol = s.grid.cell_volume();

    // Reference densities per snapshot: (total or a, b) on the same grid.
    let references: Vec<(f64, Vec<(String, Option<u8>, Field)>)> = if limit {
        let (traj, _) = limit_run(cfg, &s, &u0)?;
        traj.into_iter()
            .map(|p| (p.t, vec![("1".into(), Some(WHITE), p.a), ("2".into(), Some(BLACK), p.b)]))
            .collect()
    } else {
        let (traj, _) = coupled_run(cfg, &s, &u0)?;
        traj.into_iter()
            .map(|u| {
                let chi_b = s.partition.b_indicator();
                let b = Field {
                    values: u.values.iter().zip(&chi_b).map(|(v, c)| v * c).collect(),
                    t: u.t,
                    cell_volume: vol,
                };
                (u.t, vec![("all".into(), None, u), ("2".into(), Some(BLACK), b)])
            })
            .collect()
    };

    let mut scores: Vec<(f64, String, Vec<BinScore>)> = Vec::new();
    let mut label_mass = Vec::new();
    let mut max_abs_z: f64 = 0.0;
    for (k, (t, refs)) in references.iter().enumerate() {
        for (name, label, field) in refs {
            let bins = histogram_z_scores(&ens, k, *label, field, &s.grid, c.bins)?;
            if label.is_none() || limit {
                max_abs_z = bins.iter().fold(max_abs_z, |m, b| m.max(b.z.abs()));
            }
            scores.push((*t, name.clone(), bins));
            if let Some(l) = label {
                let expected = total_mass(field);
                let observed = ens.label_fraction(k, *l)?;
                let (sigma, z) = binomial_z(observed, expected, n);
                label_mass.push(LabelMass {
                    t: *t,
                    label: *l,
                    observed,
                    expected,
                    sigma,
                    z,
                });
            }
        }
    }
    w.z_scores("z_scores.csv", &scores)?;
    let mut messages = vec![format!("max |z| over bins = {max_abs_z}")];
    for lm in &label_mass {
        messages.push(format!(
            "t={} P(I={}) observed={} expected={} z={}",
            lm.t, lm.label, lm.observed, lm.expected, lm.z
        ));
    }
    w.json(
        "compare.json",
        &CompareSummary {
            target: c.target,
            bins: c.bins,
            max_abs_z,
            label_mass,
        },
    )?;
    Ok(messages)
}
