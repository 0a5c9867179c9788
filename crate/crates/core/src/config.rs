//! Experiment configuration read from TOML.
//!
//! Every section is optional at parse time. Each command fetches the
//! sections it needs through accessors that fail with a config error, and
//! [`ExperimentConfig::validate`] checks whatever is present before any
//! computation starts.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::geometry::{make_partition, Grid, Partition, PartitionFamily};
use crate::kernel::{KernelFamily, KernelSpec};
use crate::timestep::uniform_snapshots;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub domain: Option<DomainSection>,
    pub partition: Option<PartitionSection>,
    pub kernel: Option<KernelSection>,
    pub time: Option<TimeSection>,
    pub initial: Option<InitialCondition>,
    pub particles: Option<ParticleSection>,
    pub sweep: Option<SweepSection>,
    pub limit: Option<LimitSection>,
    pub compare: Option<CompareSection>,
    pub output: Option<OutputSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSection {
    pub dim: usize,
    pub m: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyName {
    Alternating1d,
    Chessboard,
    Balls,
    Strips,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSection {
    pub family: FamilyName,
    /// Required by every command except `sweep`, which takes `n` from its list.
    pub n: Option<usize>,
    pub k: Option<f64>,
    pub r: Option<f64>,
}

impl PartitionSection {
    pub fn family(&self) -> Result<PartitionFamily> {
        Ok(match self.family {
            FamilyName::Alternating1d => PartitionFamily::Alternating1d {
                k: self.k.ok_or_else(|| Error::Config("alternating1d needs k".into()))?,
            },
            FamilyName::Chessboard => PartitionFamily::Chessboard,
            FamilyName::Balls => PartitionFamily::Balls {
                r: self.r.ok_or_else(|| Error::Config("balls needs r".into()))?,
            },
            FamilyName::Strips => PartitionFamily::Strips,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.n == Some(0) {
            return Err(Error::Config("partition.n must be positive".into()));
        }
        match self.family {
            FamilyName::Alternating1d => {
                let k = self.k.ok_or_else(|| Error::Config("alternating1d needs k".into()))?;
                if !(k > 0.0 && k < 1.0) {
                    return Err(Error::Config(format!("partition.k = {k} must lie in (0, 1)")));
                }
            }
            FamilyName::Balls => {
                let r = self.r.ok_or_else(|| Error::Config("balls needs r".into()))?;
                if !(r > 0.0 && r < 0.5) {
                    return Err(Error::Config(format!("partition.r = {r} must lie in (0, 1/2)")));
                }
            }
            _ => {}
        }
        let stray = match self.family {
            FamilyName::Alternating1d => self.r.map(|_| "r"),
            FamilyName::Balls => self.k.map(|_| "k"),
            _ => self.k.map(|_| "k").or(self.r.map(|_| "r")),
        };
        if let Some(name) = stray {
            return Err(Error::Config(format!(
                "partition.{name} does not apply to family {:?}",
                self.family
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    pub family: KernelFamily,
    pub width: Option<f64>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
}

impl KernelSection {
    pub fn spec(&self) -> Result<KernelSpec> {
        let mut spec = match self.family {
            KernelFamily::Constant => KernelSpec::constant(),
            KernelFamily::Gaussian | KernelFamily::Bump => {
                let w = self
                    .width
                    .ok_or_else(|| Error::Config(format!("kernel.width is required for {:?}", self.family)))?;
                if self.family == KernelFamily::Gaussian {
                    KernelSpec::gaussian(w)
                } else {
                    KernelSpec::bump(w)
                }
            }
        };
        if let Some(tol) = self.tol {
            spec.sinkhorn_tol = tol;
        }
        if let Some(it) = self.max_iter {
            spec.sinkhorn_max_iter = it;
        }
        spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(spec)
    }
}

/// Either a number of uniformly spaced snapshots (including 0 and T) or an
/// explicit list of times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Snapshots {
    Count(usize),
    Times(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSection {
    #[serde(rename = "T")]
    pub horizon: f64,
    pub dt: Option<f64>,
    pub cfl_factor: Option<f64>,
    pub snapshots: Option<Snapshots>,
}

impl TimeSection {
    pub fn snapshot_times(&self) -> Vec<f64> {
        match &self.snapshots {
            None => uniform_snapshots(self.horizon, 11),
            Some(Snapshots::Count(c)) => uniform_snapshots(self.horizon, *c),
            Some(Snapshots::Times(t)) => t.clone(),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Config(format!("time.T = {} must be positive", self.horizon)));
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0) {
                return Err(Error::Config(format!("time.dt = {dt} must be positive")));
            }
        }
        if let Some(c) = self.cfl_factor {
            if !(c > 0.0) {
                return Err(Error::Config(format!("time.cfl_factor = {c} must be positive")));
            }
        }
        crate::timestep::validate_snapshots(&self.snapshot_times(), self.horizon)
    }
}

/// Which coordinates a cosine bump varies along.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BumpAxes {
    X,
    Y,
    #[default]
    Xy,
}

/// Initial datum `u0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialCondition {
    /// `u0 ≡ 1`.
    Uniform,
    /// `1 + α cos(πx)` in 1-d; in 2-d `1 + α cos(πx) cos(πy)` by default, or
    /// a single factor when `axes` is `x` or `y`.
    CosineBump {
        alpha: f64,
        #[serde(default)]
        axes: BumpAxes,
    },
    /// Normalized indicator of the box `[lo, hi]` (per axis).
    Indicator { lo: Vec<f64>, hi: Vec<f64> },
}

impl InitialCondition {
    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            InitialCondition::Uniform => Ok(()),
            InitialCondition::CosineBump { alpha, axes } => {
                if !(*alpha > -1.0 && *alpha < 1.0) {
                    return Err(Error::Config(format!("cosine-bump alpha = {alpha} must lie in (-1, 1)")));
                }
                if dim == 1 && *axes == BumpAxes::Y {
                    return Err(Error::Config("cosine-bump along y needs a 2-d domain".into()));
                }
                Ok(())
            }
            InitialCondition::Indicator { lo, hi } => {
                if lo.len() != dim || hi.len() != dim {
                    return Err(Error::Config(format!("indicator bounds need {dim} coordinates")));
                }
                for (a, b) in lo.iter().zip(hi) {
                    if !(0.0 <= *a && a < b && *b <= 1.0) {
                        return Err(Error::Config(format!("indicator interval [{a}, {b}] invalid")));
                    }
                }
                Ok(())
            }
        }
    }

    /// Samples the datum at cell centers. The indicator is normalized to
    /// unit mass on the grid and must cover at least one cell center.
    pub fn build(&self, grid: &Grid) -> Result<Field> {
        self.validate(grid.dim())?;
        let dim = grid.dim();
        match self {
            InitialCondition::Uniform => Ok(Field::constant(grid, 1.0)),
            InitialCondition::CosineBump { alpha, axes } => Ok(Field::from_fn(grid, |p| {
                let fx = (PI * p[0]).cos();
                let shape = match (dim, axes) {
                    (1, _) => fx,
                    (_, BumpAxes::X) => fx,
                    (_, BumpAxes::Y) => (PI * p[1]).cos(),
                    (_, BumpAxes::Xy) => fx * (PI * p[1]).cos(),
                };
                1.0 + alpha * shape
            })),
            InitialCondition::Indicator { lo, hi } => {
                let f = Field::from_fn(grid, |p| {
                    let inside = (0..dim).all(|a| p[a] >= lo[a] && p[a] <= hi[a]);
                    if inside {
                        1.0
                    } else {
                        0.0
                    }
                });
                f.normalized().ok_or_else(|| {
                    Error::Config("indicator region contains no cell center".into())
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticleSection {
    #[serde(rename = "N")]
    pub count: usize,
    pub seed: u64,
    pub delta: Option<f64>,
    #[serde(default)]
    pub record_events: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub n_list: Vec<usize>,
    /// Cells per axis per unit of `n`: `m = resolution_rule · n`.
    pub resolution_rule: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitSection {
    /// Adds `c ∂²b/∂y²` to the `b` equation (2-d only). Defaults to on for
    /// strips and off otherwise.
    pub strip_diffusion: Option<bool>,
    pub strip_coefficient: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompareTarget {
    Coupled,
    Limit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    pub target: CompareTarget,
    pub bins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub directory: PathBuf,
}

fn missing(name: &str) -> Error {
    Error::Config(format!("missing [{name}] section"))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Checks every section that is present.
    pub fn validate(&self) -> Result<()> {
        if let Some(d) = &self.domain {
            if !(d.dim == 1 || d.dim == 2) {
                return Err(Error::Config(format!("domain.dim = {} must be 1 or 2", d.dim)));
            }
            if d.m < 2 {
                return Err(Error::Config(format!("domain.m = {} must be at least 2", d.m)));
            }
        }
        if let Some(p) = &self.partition {
            p.validate()?;
        }
        if let Some(k) = &self.kernel {
            k.spec()?;
        }
        if let Some(t) = &self.time {
            t.validate()?;
        }
        if let (Some(i), Some(d)) = (&self.initial, &self.domain) {
            i.validate(d.dim)?;
        }
        if let Some(p) = &self.particles {
            if p.count == 0 {
                return Err(Error::Config("particles.N must be positive".into()));
            }
            if let Some(d) = p.delta {
                if !(d > 0.0) {
                    return Err(Error::Config(format!("particles.delta = {d} must be positive")));
                }
            }
        }
        if let Some(s) = &self.sweep {
            if s.n_list.is_empty() || s.n_list.contains(&0) {
                return Err(Error::Config("sweep.n_list must hold positive integers".into()));
            }
            if s.resolution_rule == 0 {
                return Err(Error::Config("sweep.resolution_rule must be positive".into()));
            }
        }
        if let Some(l) = &self.limit {
            if let Some(c) = l.strip_coefficient {
                if !(c >= 0.0) {
                    return Err(Error::Config(format!("limit.strip_coefficient = {c} must be ≥ 0")));
                }
            }
        }
        if let Some(c) = &self.compare {
            if c.bins == 0 {
                return Err(Error::Config("compare.bins must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn domain(&self) -> Result<&DomainSection> {
        self.domain.as_ref().ok_or_else(|| missing("domain"))
    }

    pub fn partition(&self) -> Result<&PartitionSection> {
        self.partition.as_ref().ok_or_else(|| missing("partition"))
    }

    pub fn kernel_spec(&self) -> Result<KernelSpec> {
        self.kernel.as_ref().ok_or_else(|| missing("kernel"))?.spec()
    }

    pub fn time(&self) -> Result<&TimeSection> {
        self.time.as_ref().ok_or_else(|| missing("time"))
    }

    pub fn initial(&self) -> Result<&InitialCondition> {
        self.initial.as_ref().ok_or_else(|| missing("initial"))
    }

    pub fn particles(&self) -> Result<&ParticleSection> {
        self.particles.as_ref().ok_or_else(|| missing("particles"))
    }

    pub fn sweep(&self) -> Result<&SweepSection> {
        self.sweep.as_ref().ok_or_else(|| missing("sweep"))
    }

    pub fn compare(&self) -> Result<&CompareSection> {
        self.compare.as_ref().ok_or_else(|| missing("compare"))
    }

    pub fn grid(&self) -> Result<Grid> {
        let d = self.domain()?;
        Grid::new(d.dim, d.m)
    }

    pub fn build_partition(&self, grid: &Grid) -> Result<Partition> {
        let p = self.partition()?;
        let n = p.n.ok_or_else(|| Error::Config("partition.n is required".into()))?;
        make_partition(p.family()?, n, grid)
    }

    /// Strip diffusion coefficient for the limit system, if any.
    pub fn strip_coefficient(&self) -> Result<Option<f64>> {
        let strips = self.partition.as_ref().is_some_and(|p| p.family == FamilyName::Strips);
        let section = self.limit.clone().unwrap_or(LimitSection {
            strip_diffusion: None,
            strip_coefficient: None,
        });
        let on = section.strip_diffusion.unwrap_or(strips);
        if !on {
            return Ok(None);
        }
        if self.domain()?.dim != 2 {
            return Err(Error::Config("strip diffusion needs a 2-d domain".into()));
        }
        Ok(Some(section.strip_coefficient.unwrap_or(0.25)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL: &str = r#"
[domain]
dim = 1
m = 64

[partition]
family = "alternating1d"
n = 4
k = 0.5

[kernel]
family = "constant"

[time]
T = 1.0
cfl_factor = 0.2
snapshots = 11

[initial]
name = "cosine-bump"
alpha = 0.5

[particles]
N = 1000
seed = 7
"#;

    #[test]
    fn parses_full_config() {
        let c = ExperimentConfig::from_toml_str(FULL).unwrap();
        assert_eq!(c.domain().unwrap().m, 64);
        assert_eq!(c.time().unwrap().snapshot_times().len(), 11);
        let g = c.grid().unwrap();
        let p = c.build_partition(&g).unwrap();
        assert!((p.max_diam - 0.125).abs() < 1e-15);
        let u0 = c.initial().unwrap().build(&g).unwrap();
        assert!((u0.values[0] - (1.0 + 0.5 * (PI / 128.0).cos())).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_k() {
        let bad = FULL.replace("k = 0.5", "k = 1.5");
        assert!(matches!(ExperimentConfig::from_toml_str(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_unknown_fields() {
        let bad = FULL.replace("m = 64", "m = 64\ncolour = 3");
        assert!(ExperimentConfig::from_toml_str(&bad).is_err());
        let bad = format!("{FULL}\n[extra]\nx = 1\n");
        assert!(ExperimentConfig::from_toml_str(&bad).is_err());
    }

    #[test]
    fn rejects_bad_alpha() {
        let bad = FULL.replace("alpha = 0.5", "alpha = 1.0");
        assert!(ExperimentConfig::from_toml_str(&bad).is_err());
    }

    #[test]
    fn indicator_is_normalized() {
        let g = Grid::new(1, 8).unwrap();
        let ic = InitialCondition::Indicator {
            lo: vec![0.0],
            hi: vec![0.5],
        };
        let f = ic.build(&g).unwrap();
        assert!((f.total_mass() - 1.0).abs() < 1e-15);
        assert_eq!(f.values[7], 0.0);
    }

    #[test]
    fn explicit_snapshot_list() {
        let text = FULL.replace("snapshots = 11", "snapshots = [0.5, 1.0]");
        let c = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(c.time().unwrap().snapshot_times(), vec![0.5, 1.0]);
    }

    #[test]
    fn strip_coefficient_defaults() {
        let c = ExperimentConfig::from_toml_str(FULL).unwrap();
        assert_eq!(c.strip_coefficient().unwrap(), None);
        let text = FULL
            .replace("dim = 1", "dim = 2")
            .replace("family = \"alternating1d\"", "family = \"strips\"")
            .replace("k = 0.5\n", "");
        let c = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(c.strip_coefficient().unwrap(), Some(0.25));
    }
}
