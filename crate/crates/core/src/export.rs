//! CSV/JSON artifacts and the digest manifest.
//!
//! Numbers are written with Rust's shortest round-trip formatting, so every
//! value reads back bit-for-bit. No timestamps or host data enter any file,
//! which keeps digests stable across runs.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::field::Field;
use crate::geometry::Grid;
use crate::homogenize::ConvergenceReport;
use crate::limit::DensityPair;
use crate::particle::{BinScore, Ensemble};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ManifestEntry {
    pub filename: String,
    /// Data rows (CSV, header excluded) or 1 for a JSON record.
    pub rows: usize,
    /// Hex SHA-256 of the file contents.
    pub digest: String,
}

/// Collects artifacts written into one output directory.
pub struct ArtifactWriter {
    dir: PathBuf,
    entries: Vec<ManifestEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn coord_header(dim: usize) -> Vec<&'static str> {
    if dim == 1 {
        vec!["x"]
    } else {
        vec!["x", "y"]
    }
}

fn coords(p: [f64; 2], dim: usize) -> Vec<String> {
    p[..dim].iter().map(|v| v.to_string()).collect()
}

impl ArtifactWriter {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            entries: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    fn register(&mut self, name: &str, rows: usize) -> Result<()> {
        let bytes = fs::read(self.dir.join(name))?;
        self.entries.retain(|e| e.filename != name);
        self.entries.push(ManifestEntry {
            filename: name.into(),
            rows,
            digest: sha256_hex(&bytes),
        });
        Ok(())
    }

    /// Writes a CSV file from a header and string rows.
    pub fn csv<I>(&mut self, name: &str, header: &[&str], rows: I) -> Result<usize>
    where
        I: IntoIterator<Item = Vec<String>>,
    {
        let file = BufWriter::new(File::create(self.dir.join(name))?);
        let mut w = csv::Writer::from_writer(file);
        w.write_record(header)?;
        let mut count = 0;
        for r in rows {
            w.write_record(&r)?;
            count += 1;
        }
        w.flush()?;
        drop(w);
        self.register(name, count)?;
        Ok(count)
    }

    /// Writes a pretty-printed JSON record.
    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut file = BufWriter::new(File::create(self.dir.join(name))?);
        serde_json::to_writer_pretty(&mut file, value)?;
        file.write_all(b"\n")?;
        file.flush()?;
        drop(file);
        self.register(name, 1)
    }

    /// `t, cell_index, x, (y,) u`.
    pub fn coupled_trajectory(&mut self, name: &str, grid: &Grid, traj: &[Field]) -> Result<usize> {
        let dim = grid.dim();
        let mut header = vec!["t", "cell_index"];
        header.extend(coord_header(dim));
        header.push("u");
        let centers = grid.cell_centers();
        let rows = traj.iter().flat_map(|u| {
            let centers = &centers;
            u.values.iter().enumerate().map(move |(i, v)| {
                let mut r = vec![u.t.to_string(), i.to_string()];
                r.extend(coords(centers[i], dim));
                r.push(v.to_string());
                r
            })
        });
        self.csv(name, &header, rows)
    }

    /// `t, cell_index, x, (y,) a, b`.
    pub fn limit_trajectory(&mut self, name: &str, grid: &Grid, traj: &[DensityPair]) -> Result<usize> {
        let dim = grid.dim();
        let mut header = vec!["t", "cell_index"];
        header.extend(coord_header(dim));
        header.extend(["a", "b"]);
        let centers = grid.cell_centers();
        let rows = traj.iter().flat_map(|s| {
            let centers = &centers;
            (0..s.a.len()).map(move |i| {
                let mut r = vec![s.t.to_string(), i.to_string()];
                r.extend(coords(centers[i], dim));
                r.push(s.a.values[i].to_string());
                r.push(s.b.values[i].to_string());
                r
            })
        });
        self.csv(name, &header, rows)
    }

    /// `t, particle_id, x, (y,) label` for every snapshot.
    pub fn ensemble(&mut self, name: &str, ensemble: &Ensemble) -> Result<usize> {
        let dim = ensemble.meta.dim;
        let mut header = vec!["t", "particle_id"];
        header.extend(coord_header(dim));
        header.push("label");
        let rows = ensemble
            .snapshot_times
            .iter()
            .zip(&ensemble.snapshots)
            .flat_map(|(t, snap)| {
                snap.iter().enumerate().map(move |(pid, s)| {
                    let mut r = vec![t.to_string(), pid.to_string()];
                    r.extend(coords(s.position, dim));
                    r.push(s.label.to_string());
                    r
                })
            });
        self.csv(name, &header, rows)
    }

    /// `particle_id, event_time, kind, from_x, (from_y,) to_x, (to_y,) from_label, to_label`.
    /// Returns `None` when the ensemble carries no event logs.
    pub fn events(&mut self, name: &str, ensemble: &Ensemble) -> Result<Option<usize>> {
        let Some(logs) = &ensemble.events else {
            return Ok(None);
        };
        let dim = ensemble.meta.dim;
        let mut header = vec!["particle_id", "event_time", "kind", "from_x"];
        if dim == 2 {
            header.push("from_y");
        }
        header.push("to_x");
        if dim == 2 {
            header.push("to_y");
        }
        header.extend(["from_label", "to_label"]);
        let rows = logs.iter().enumerate().flat_map(|(pid, log)| {
            log.iter().map(move |e| {
                let mut r = vec![pid.to_string(), e.time.to_string(), e.kind.name().to_string()];
                r.extend(coords(e.from, dim));
                r.extend(coords(e.to, dim));
                r.push(e.from_label.to_string());
                r.push(e.to_label.to_string());
                r
            })
        });
        self.csv(name, &header, rows).map(Some)
    }

    /// `family, n, test_id, gap_u, gap_a, gap_b, weak_residual` plus a JSON
    /// sidecar `<stem>.meta.json` with the report metadata.
    pub fn report(&mut self, stem: &str, report: &ConvergenceReport) -> Result<usize> {
        let header = ["family", "n", "test_id", "gap_u", "gap_a", "gap_b", "weak_residual"];
        let rows = report.rows.iter().map(|r| {
            vec![
                r.family.clone(),
                r.n.to_string(),
                r.test_id.clone(),
                r.gap_u.to_string(),
                r.gap_a.to_string(),
                r.gap_b.to_string(),
                r.weak_residual.to_string(),
            ]
        });
        let count = self.csv(&format!("{stem}.csv"), &header, rows)?;
        self.json(&format!("{stem}.meta.json"), &report.meta)?;
        Ok(count)
    }

    /// `t, label, bin, expected, observed, sigma, z`.
    pub fn z_scores(&mut self, name: &str, scores: &[(f64, String, Vec<BinScore>)]) -> Result<usize> {
        let header = ["t", "label", "bin", "expected", "observed", "sigma", "z"];
        let rows = scores.iter().flat_map(|(t, label, bins)| {
            bins.iter().map(move |b| {
                vec![
                    t.to_string(),
                    label.clone(),
                    b.bin.to_string(),
                    b.expected.to_string(),
                    b.observed.to_string(),
                    b.sigma.to_string(),
                    b.z.to_string(),
                ]
            })
        });
        self.csv(name, &header, rows)
    }

    /// Writes `manifest.json` listing every artifact sorted by file name.
    pub fn finish(mut self) -> Result<Vec<ManifestEntry>> {
        self.entries.sort_by(|a, b| a.filename.cmp(&b.filename));
        let mut file = BufWriter::new(File::create(self.dir.join(MANIFEST_NAME))?);
        serde_json::to_writer_pretty(&mut file, &self.entries)?;
        file.write_all(b"\n")?;
        file.flush()?;
        Ok(self.entries)
    }
}
