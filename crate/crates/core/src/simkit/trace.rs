//! Per-window trace series produced by a simulation run, with CSV
//! persistence and a JSON sidecar manifest.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ScenarioConfig;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("trace csv parse error at {path}:{line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },
    #[error("trace header mismatch at {path}: expected {expected:?}")]
    Header { path: PathBuf, expected: String },
    #[error("manifest error at {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
}

/// One sample window. Positions, counts, demands and the NToD distance
/// reciprocal are snapshots at the window start; goodput and SINR aggregate
/// the window that follows.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceWindow {
    pub t_s: f64,
    pub pos_x_m: f64,
    pub pos_y_m: f64,
    pub serving_cell: u32,
    /// Attached vehicles per cell, ToD included.
    pub counts: Vec<u32>,
    /// NToD offered (arrived) traffic per cell over the window, bits/s.
    pub demand_bps: Vec<f64>,
    pub tod_goodput_bps: f64,
    pub tod_sinr_db: f64,
    /// Reciprocal of the summed distances from NToD vehicles outside the
    /// serving cell to the serving site; 0 when that set is empty.
    pub ntod_dist_recip: f64,
}

#[derive(Debug, Clone)]
pub struct TraceLog {
    pub scenario_id: String,
    pub config_sha256: String,
    pub num_cells: usize,
    pub windows: Vec<TraceWindow>,
}

/// Sidecar manifest written next to each trace CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceManifest {
    pub scenario_id: String,
    pub config_sha256: String,
    pub num_cells: usize,
    pub n_windows: usize,
    pub config: ScenarioConfig,
}

impl TraceLog {
    pub fn header(num_cells: usize) -> String {
        let mut cols = vec![
            "t_s".to_string(),
            "pos_x_m".to_string(),
            "pos_y_m".to_string(),
            "serving_cell".to_string(),
        ];
        cols.extend((0..num_cells).map(|c| format!("v_c{c}")));
        cols.extend((0..num_cells).map(|c| format!("d_c{c}")));
        cols.push("tod_goodput_bps".to_string());
        cols.push("tod_sinr_db".to_string());
        cols.push("ntod_dist_recip".to_string());
        cols.join(",")
    }

    pub fn csv_path(dir: &Path, scenario_id: &str) -> PathBuf {
        dir.join(format!("{scenario_id}.csv"))
    }

    pub fn manifest_path(dir: &Path, scenario_id: &str) -> PathBuf {
        dir.join(format!("{scenario_id}.manifest.json"))
    }

    /// Write `<id>.csv` and `<id>.manifest.json` under `dir`.
    pub fn save(&self, dir: &Path, config: &ScenarioConfig) -> Result<PathBuf, TraceError> {
        fs::create_dir_all(dir).map_err(|e| TraceError::Io { path: dir.to_path_buf(), source: e })?;
        let csv_path = Self::csv_path(dir, &self.scenario_id);
        let io_err = |e| TraceError::Io { path: csv_path.clone(), source: e };

        let file = fs::File::create(&csv_path).map_err(io_err)?;
        let mut w = BufWriter::new(file);
        writeln!(w, "{}", Self::header(self.num_cells)).map_err(io_err)?;
        for win in &self.windows {
            write!(w, "{:.3},{:.3},{:.3},{}", win.t_s, win.pos_x_m, win.pos_y_m, win.serving_cell)
                .map_err(io_err)?;
            for c in &win.counts {
                write!(w, ",{c}").map_err(io_err)?;
            }
            for d in &win.demand_bps {
                write!(w, ",{d:.3}").map_err(io_err)?;
            }
            writeln!(
                w,
                ",{:.3},{:.6},{:.9}",
                win.tod_goodput_bps, win.tod_sinr_db, win.ntod_dist_recip
            )
            .map_err(io_err)?;
        }
        w.flush().map_err(io_err)?;

        let manifest = TraceManifest {
            scenario_id: self.scenario_id.clone(),
            config_sha256: self.config_sha256.clone(),
            num_cells: self.num_cells,
            n_windows: self.windows.len(),
            config: config.clone(),
        };
        let mpath = Self::manifest_path(dir, &self.scenario_id);
        let body = serde_json::to_string_pretty(&manifest)
            .map_err(|e| TraceError::Manifest { path: mpath.clone(), reason: e.to_string() })?;
        fs::write(&mpath, body).map_err(|e| TraceError::Io { path: mpath.clone(), source: e })?;
        Ok(csv_path)
    }

    /// Load a trace CSV plus its sidecar manifest.
    pub fn load(csv_path: &Path) -> Result<(TraceLog, TraceManifest), TraceError> {
        let text = fs::read_to_string(csv_path)
            .map_err(|e| TraceError::Io { path: csv_path.to_path_buf(), source: e })?;
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| TraceError::Parse {
            path: csv_path.to_path_buf(),
            line: 1,
            reason: "empty file".into(),
        })?;
        let ncols = header.split(',').count();
        // 4 leading columns, 3 trailing, two per-cell blocks in between.
        if ncols < 9 || (ncols - 7) % 2 != 0 {
            return Err(TraceError::Header {
                path: csv_path.to_path_buf(),
                expected: "t_s,pos_x_m,pos_y_m,serving_cell,v_c*,d_c*,tod_goodput_bps,tod_sinr_db,ntod_dist_recip".into(),
            });
        }
        let num_cells = (ncols - 7) / 2;
        if header != Self::header(num_cells) {
            return Err(TraceError::Header {
                path: csv_path.to_path_buf(),
                expected: Self::header(num_cells),
            });
        }

        let mut windows = Vec::new();
        for (idx, line) in lines {
            if line.is_empty() {
                continue;
            }
            let parse_err = |reason: String| TraceError::Parse {
                path: csv_path.to_path_buf(),
                line: idx + 1,
                reason,
            };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != ncols {
                return Err(parse_err(format!("expected {ncols} fields, got {}", fields.len())));
            }
            let f = |s: &str| s.parse::<f64>().map_err(|e| parse_err(format!("{s:?}: {e}")));
            let u = |s: &str| s.parse::<u32>().map_err(|e| parse_err(format!("{s:?}: {e}")));
            let mut counts = Vec::with_capacity(num_cells);
            let mut demand = Vec::with_capacity(num_cells);
            for c in 0..num_cells {
                counts.push(u(fields[4 + c])?);
                demand.push(f(fields[4 + num_cells + c])?);
            }
            windows.push(TraceWindow {
                t_s: f(fields[0])?,
                pos_x_m: f(fields[1])?,
                pos_y_m: f(fields[2])?,
                serving_cell: u(fields[3])?,
                counts,
                demand_bps: demand,
                tod_goodput_bps: f(fields[ncols - 3])?,
                tod_sinr_db: f(fields[ncols - 2])?,
                ntod_dist_recip: f(fields[ncols - 1])?,
            });
        }

        let mpath = csv_path.with_extension("").with_extension("manifest.json");
        // `<id>.csv` -> `<id>.manifest.json`
        let mpath = if mpath.exists() {
            mpath
        } else {
            let stem = csv_path.file_stem().unwrap_or_default().to_string_lossy().to_string();
            csv_path.with_file_name(format!("{stem}.manifest.json"))
        };
        let mtext = fs::read_to_string(&mpath)
            .map_err(|e| TraceError::Io { path: mpath.clone(), source: e })?;
        let manifest: TraceManifest = serde_json::from_str(&mtext)
            .map_err(|e| TraceError::Manifest { path: mpath.clone(), reason: e.to_string() })?;

        let log = TraceLog {
            scenario_id: manifest.scenario_id.clone(),
            config_sha256: manifest.config_sha256.clone(),
            num_cells,
            windows,
        };
        Ok((log, manifest))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_log() -> (TraceLog, ScenarioConfig) {
        let config = ScenarioConfig { n_ntod: 1, duration: 0.2, ..Default::default() };
        let log = TraceLog {
            scenario_id: "t0".into(),
            config_sha256: config.sha256(),
            num_cells: 2,
            windows: vec![
                TraceWindow {
                    t_s: 0.0,
                    pos_x_m: 1.25,
                    pos_y_m: 0.0,
                    serving_cell: 0,
                    counts: vec![2, 0],
                    demand_bps: vec![1000.0, 0.0],
                    tod_goodput_bps: 2.0e7,
                    tod_sinr_db: 21.5,
                    ntod_dist_recip: 0.01,
                },
                TraceWindow {
                    t_s: 0.1,
                    pos_x_m: 2.5,
                    pos_y_m: 0.0,
                    serving_cell: 1,
                    counts: vec![1, 1],
                    demand_bps: vec![0.0, 500.0],
                    tod_goodput_bps: 1.9e7,
                    tod_sinr_db: 20.0,
                    ntod_dist_recip: 0.0,
                },
            ],
        };
        (log, config)
    }

    #[test]
    fn roundtrip_preserves_windows() {
        let dir = tempfile::tempdir().unwrap();
        let (log, config) = tiny_log();
        let path = log.save(dir.path(), &config).unwrap();
        let (loaded, manifest) = TraceLog::load(&path).unwrap();
        assert_eq!(loaded.scenario_id, "t0");
        assert_eq!(manifest.n_windows, 2);
        assert_eq!(loaded.windows, log.windows);
    }

    #[test]
    fn header_names_per_cell_columns() {
        assert_eq!(
            TraceLog::header(2),
            "t_s,pos_x_m,pos_y_m,serving_cell,v_c0,v_c1,d_c0,d_c1,tod_goodput_bps,tod_sinr_db,ntod_dist_recip"
        );
    }

    #[test]
    fn save_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let (log, config) = tiny_log();
        let p1 = log.save(dir.path(), &config).unwrap();
        let b1 = fs::read(&p1).unwrap();
        let p2 = log.save(dir.path(), &config).unwrap();
        assert_eq!(b1, fs::read(&p2).unwrap());
    }
}
