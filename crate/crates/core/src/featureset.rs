//! Labeled dataset construction from traces: the per-window input feature
//! vector, feature-configuration presets T1..T6, train/test splitting, and
//! the accuracy metrics.
//!
//! With the default 9-cell topology a full feature vector has 22 entries:
//! `pos_x, pos_y, tod_dist, v_c0..v_c8, d_c0..d_c8, ntod_dist_recip`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simkit::{Cell, TraceLog, TraceManifest, TraceWindow};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("dataset is empty")]
    Empty,
    #[error("train fraction must lie strictly between 0 and 1, got {0}")]
    BadFraction(f64),
    #[error("length mismatch: {left} true values vs {right} predictions")]
    LengthMismatch { left: usize, right: usize },
    #[error("metrics need at least one sample")]
    NoSamples,
    #[error("unknown feature preset `{0}` (expected T1..T6)")]
    UnknownPreset(String),
    #[error("feature mask must select at least one feature")]
    EmptyMask,
    #[error("feature mask has {got} flags, layout has {want} features")]
    MaskWidth { got: usize, want: usize },
    #[error("dataset already projected to `{0}`; reload the full dataset to re-project")]
    AlreadyProjected(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset csv parse error at {path}:{line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },
}

/// Index layout of the full feature vector for a given cell count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub num_cells: usize,
}

impl FeatureLayout {
    pub const POS_X: usize = 0;
    pub const POS_Y: usize = 1;
    pub const TOD_DIST: usize = 2;

    pub fn new(num_cells: usize) -> Self {
        Self { num_cells }
    }

    pub fn width(&self) -> usize {
        3 + 2 * self.num_cells + 1
    }

    pub fn v_c(&self, cell: usize) -> usize {
        3 + cell
    }

    pub fn d_c(&self, cell: usize) -> usize {
        3 + self.num_cells + cell
    }

    pub fn ntod_dist_recip(&self) -> usize {
        3 + 2 * self.num_cells
    }

    pub fn names(&self) -> Vec<String> {
        let mut names =
            vec!["pos_x_m".to_string(), "pos_y_m".to_string(), "tod_dist_m".to_string()];
        names.extend((0..self.num_cells).map(|c| format!("v_c{c}")));
        names.extend((0..self.num_cells).map(|c| format!("d_c{c}")));
        names.push("ntod_dist_recip".to_string());
        names
    }
}

/// One projected input column: either a fixed column of the full vector or a
/// serving-cell-relative count/demand resolved per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureSelector {
    Column(usize),
    ServingCount,
    ServingDemand,
}

/// A named feature configuration: the preset id plus the ordered selectors it
/// projects. Serializes as a bare preset name, or an explicit mask object for
/// custom configurations.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub id: String,
    pub selectors: Vec<FeatureSelector>,
    pub layout: FeatureLayout,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum FeatureConfigRepr {
    Preset(String),
    Mask { mask: Vec<bool> },
}

impl Serialize for FeatureConfig {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.id == "custom" {
            FeatureConfigRepr::Mask { mask: self.mask() }.serialize(s)
        } else {
            FeatureConfigRepr::Preset(self.id.clone()).serialize(s)
        }
    }
}

impl FeatureConfig {
    /// The full feature set (preset T1).
    pub fn full(layout: FeatureLayout) -> Self {
        Self {
            id: "T1".to_string(),
            selectors: (0..layout.width()).map(FeatureSelector::Column).collect(),
            layout,
        }
    }

    /// Resolve a preset name T1..T6.
    pub fn preset(name: &str, layout: FeatureLayout) -> Result<Self, DataError> {
        use FeatureSelector::*;
        let selectors: Vec<FeatureSelector> = match name {
            "T1" => return Ok(Self::full(layout)),
            // Serving-cell load plus ToD service features.
            "T2" => vec![
                Column(FeatureLayout::POS_X),
                Column(FeatureLayout::POS_Y),
                Column(FeatureLayout::TOD_DIST),
                ServingCount,
                ServingDemand,
            ],
            // ToD service features only.
            "T3" => vec![
                Column(FeatureLayout::POS_X),
                Column(FeatureLayout::POS_Y),
                Column(FeatureLayout::TOD_DIST),
            ],
            // Network state: all counts, all demands, interferer distance.
            "T4" => (0..layout.num_cells)
                .map(|c| Column(layout.v_c(c)))
                .chain((0..layout.num_cells).map(|c| Column(layout.d_c(c))))
                .chain(std::iter::once(Column(layout.ntod_dist_recip())))
                .collect(),
            "T5" => (0..layout.num_cells)
                .map(|c| Column(layout.v_c(c)))
                .chain((0..layout.num_cells).map(|c| Column(layout.d_c(c))))
                .collect(),
            "T6" => vec![ServingCount, ServingDemand],
            other => return Err(DataError::UnknownPreset(other.to_string())),
        };
        Ok(Self { id: name.to_string(), selectors, layout })
    }

    pub fn all_presets(layout: FeatureLayout) -> Vec<Self> {
        ["T1", "T2", "T3", "T4", "T5", "T6"]
            .iter()
            .map(|n| Self::preset(n, layout).expect("builtin preset"))
            .collect()
    }

    /// Explicit column mask over the full vector.
    pub fn custom(mask: &[bool], layout: FeatureLayout) -> Result<Self, DataError> {
        if mask.len() != layout.width() {
            return Err(DataError::MaskWidth { got: mask.len(), want: layout.width() });
        }
        let selectors: Vec<FeatureSelector> = mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| FeatureSelector::Column(i))
            .collect();
        if selectors.is_empty() {
            return Err(DataError::EmptyMask);
        }
        Ok(Self { id: "custom".to_string(), selectors, layout })
    }

    /// Parse either a preset name or `{"mask": [...]}` from JSON.
    pub fn from_json(json: &str, layout: FeatureLayout) -> Result<Self, DataError> {
        let repr: FeatureConfigRepr =
            serde_json::from_str(json).map_err(|e| DataError::Schema(e.to_string()))?;
        match repr {
            FeatureConfigRepr::Preset(name) => Self::preset(&name, layout),
            FeatureConfigRepr::Mask { mask } => Self::custom(&mask, layout),
        }
    }

    pub fn width(&self) -> usize {
        self.selectors.len()
    }

    /// Boolean flags over the full vector marking every column this
    /// configuration may read; serving-relative selectors mark all candidate
    /// cells since the resolved column varies per sample.
    pub fn mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.layout.width()];
        for sel in &self.selectors {
            match sel {
                FeatureSelector::Column(i) => mask[*i] = true,
                FeatureSelector::ServingCount => {
                    (0..self.layout.num_cells).for_each(|c| mask[self.layout.v_c(c)] = true)
                }
                FeatureSelector::ServingDemand => {
                    (0..self.layout.num_cells).for_each(|c| mask[self.layout.d_c(c)] = true)
                }
            }
        }
        mask
    }

    pub fn feature_names(&self) -> Vec<String> {
        let base = self.layout.names();
        self.selectors
            .iter()
            .map(|sel| match sel {
                FeatureSelector::Column(i) => base[*i].clone(),
                FeatureSelector::ServingCount => "v_serving".to_string(),
                FeatureSelector::ServingDemand => "d_serving".to_string(),
            })
            .collect()
    }

    /// Project a full feature vector, resolving serving-relative selectors.
    pub fn project(&self, features: &[f64], serving_cell: u32) -> Vec<f64> {
        self.selectors
            .iter()
            .map(|sel| match sel {
                FeatureSelector::Column(i) => features[*i],
                FeatureSelector::ServingCount => features[self.layout.v_c(serving_cell as usize)],
                FeatureSelector::ServingDemand => features[self.layout.d_c(serving_cell as usize)],
            })
            .collect()
    }
}

/// Extract the full feature vector for one trace window against a topology.
/// Counts, demands and the NToD distance reciprocal copy through; `tod_dist`
/// is the Euclidean distance from the ToD position to the serving site.
pub fn extract_features(window: &TraceWindow, cells: &[Cell]) -> Result<Vec<f64>, DataError> {
    if window.counts.len() != cells.len() || window.demand_bps.len() != cells.len() {
        return Err(DataError::Schema(format!(
            "window has {} cells, topology has {}",
            window.counts.len(),
            cells.len()
        )));
    }
    let serving = window.serving_cell as usize;
    if serving >= cells.len() {
        return Err(DataError::Schema(format!("serving cell {serving} out of range")));
    }
    let layout = FeatureLayout::new(cells.len());
    let mut f = Vec::with_capacity(layout.width());
    f.push(window.pos_x_m);
    f.push(window.pos_y_m);
    let site = cells[serving].position;
    f.push(((window.pos_x_m - site.x).powi(2) + (window.pos_y_m - site.y).powi(2)).sqrt());
    f.extend(window.counts.iter().map(|&c| c as f64));
    f.extend(window.demand_bps.iter().copied());
    f.push(window.ntod_dist_recip);
    Ok(f)
}

/// Per-row provenance kept alongside the feature matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowMeta {
    pub t_s: f64,
    pub scenario_idx: u32,
    pub serving_cell: u32,
}

/// A labeled dataset: row-major feature matrix plus labels and provenance.
/// Freshly built datasets carry the full feature set; [`apply_config`]
/// produces projected copies.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub layout: FeatureLayout,
    pub config: FeatureConfig,
    pub scenario_ids: Vec<String>,
    pub meta: Vec<RowMeta>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn width(&self) -> usize {
        self.config.width()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.x[i * w..(i + 1) * w]
    }

    pub fn scenario_of(&self, i: usize) -> &str {
        &self.scenario_ids[self.meta[i].scenario_idx as usize]
    }

    pub fn empty(layout: FeatureLayout) -> Self {
        Self {
            layout,
            config: FeatureConfig::full(layout),
            scenario_ids: Vec::new(),
            meta: Vec::new(),
            x: Vec::new(),
            y: Vec::new(),
        }
    }

    fn select(&self, indices: &[usize]) -> Self {
        let w = self.width();
        let mut x = Vec::with_capacity(indices.len() * w);
        let mut y = Vec::with_capacity(indices.len());
        let mut meta = Vec::with_capacity(indices.len());
        for &i in indices {
            x.extend_from_slice(self.row(i));
            y.push(self.y[i]);
            meta.push(self.meta[i]);
        }
        Self {
            layout: self.layout,
            config: self.config.clone(),
            scenario_ids: self.scenario_ids.clone(),
            meta,
            x,
            y,
        }
    }

    /// Rows whose scenario id satisfies the predicate.
    pub fn filter_scenarios<F: Fn(&str) -> bool>(&self, keep: F) -> Self {
        let indices: Vec<usize> = (0..self.len()).filter(|&i| keep(self.scenario_of(i))).collect();
        self.select(&indices)
    }
}

/// Concatenate traces into one labeled dataset, one sample per window. All
/// traces must share the cell topology of the first.
pub fn build_dataset(traces: &[(TraceLog, TraceManifest)]) -> Result<Dataset, DataError> {
    let Some((_, first_manifest)) = traces.first() else {
        return Ok(Dataset::empty(FeatureLayout::new(0)));
    };
    let cells = crate::simkit::layout_cells(&first_manifest.config);
    let layout = FeatureLayout::new(cells.len());
    let mut ds = Dataset::empty(layout);
    for (log, manifest) in traces {
        let these_cells = crate::simkit::layout_cells(&manifest.config);
        if these_cells != cells {
            return Err(DataError::Schema(format!(
                "trace `{}` topology differs from `{}`",
                log.scenario_id, traces[0].0.scenario_id
            )));
        }
        let scenario_idx = ds.scenario_ids.len() as u32;
        ds.scenario_ids.push(log.scenario_id.clone());
        for w in &log.windows {
            let f = extract_features(w, &cells)?;
            ds.x.extend_from_slice(&f);
            ds.y.push(w.tod_goodput_bps);
            ds.meta.push(RowMeta { t_s: w.t_s, scenario_idx, serving_cell: w.serving_cell });
        }
    }
    Ok(ds)
}

/// Seeded uniform shuffle then partition. The split is disjoint, exhaustive,
/// and reproducible per seed; the train side gets `round(n * fraction)` rows,
/// clamped so both sides stay nonempty.
pub fn split(
    dataset: &Dataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), DataError> {
    if dataset.is_empty() {
        return Err(DataError::Empty);
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::BadFraction(train_fraction));
    }
    let n = dataset.len();
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, (n - 1).max(1));
    let (train_idx, test_idx) = indices.split_at(n_train);
    Ok((dataset.select(train_idx), dataset.select(test_idx)))
}

/// Project a full dataset onto a feature configuration; labels unchanged.
/// Re-applying the configuration a projected dataset already carries is the
/// identity.
pub fn apply_config(dataset: &Dataset, config: &FeatureConfig) -> Result<Dataset, DataError> {
    if dataset.config == *config {
        return Ok(dataset.clone());
    }
    if dataset.config.id != "T1" {
        return Err(DataError::AlreadyProjected(dataset.config.id.clone()));
    }
    let w = config.width();
    let mut x = Vec::with_capacity(dataset.len() * w);
    for i in 0..dataset.len() {
        x.extend(config.project(dataset.row(i), dataset.meta[i].serving_cell));
    }
    Ok(Dataset {
        layout: dataset.layout,
        config: config.clone(),
        scenario_ids: dataset.scenario_ids.clone(),
        meta: dataset.meta.clone(),
        x,
        y: dataset.y.clone(),
    })
}

/// Prediction accuracy summary. `std_abs_err` is the sample (n-1) standard
/// deviation of the absolute errors; MAPE terms skip exact-zero true values,
/// counted in `mape_excluded`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub mae: f64,
    pub std_abs_err: f64,
    pub mape: f64,
    pub n: usize,
    pub mape_excluded: usize,
}

pub fn metrics(true_labels: &[f64], predictions: &[f64]) -> Result<AccuracyReport, DataError> {
    if true_labels.len() != predictions.len() {
        return Err(DataError::LengthMismatch {
            left: true_labels.len(),
            right: predictions.len(),
        });
    }
    let n = true_labels.len();
    if n == 0 {
        return Err(DataError::NoSamples);
    }
    let abs_errors: Vec<f64> =
        true_labels.iter().zip(predictions).map(|(t, p)| (t - p).abs()).collect();
    let mae = abs_errors.iter().sum::<f64>() / n as f64;
    let std_abs_err = if n > 1 {
        let var = abs_errors.iter().map(|e| (e - mae).powi(2)).sum::<f64>() / (n - 1) as f64;
        var.sqrt()
    } else {
        0.0
    };
    let mut mape_sum = 0.0;
    let mut mape_n = 0usize;
    for (t, e) in true_labels.iter().zip(&abs_errors) {
        if *t != 0.0 {
            mape_sum += e / t.abs();
            mape_n += 1;
        }
    }
    let mape = if mape_n > 0 { mape_sum / mape_n as f64 } else { 0.0 };
    Ok(AccuracyReport { mae, std_abs_err, mape, n, mape_excluded: n - mape_n })
}

// ---------------------------------------------------------------------------
// CSV persistence (full datasets only)
// ---------------------------------------------------------------------------

impl Dataset {
    pub fn header(layout: FeatureLayout) -> String {
        let mut cols = vec!["t_s".to_string(), "scenario_id".to_string()];
        cols.extend(layout.names());
        cols.push("label_bps".to_string());
        cols.push("serving_cell".to_string());
        cols.join(",")
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), DataError> {
        if self.config.id != "T1" {
            return Err(DataError::AlreadyProjected(self.config.id.clone()));
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)
                .map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })?;
        }
        let io_err = |e| DataError::Io { path: path.to_path_buf(), source: e };
        let file = fs::File::create(path).map_err(io_err)?;
        let mut wtr = BufWriter::new(file);
        writeln!(wtr, "{}", Self::header(self.layout)).map_err(io_err)?;
        let c = self.layout.num_cells;
        for i in 0..self.len() {
            let row = self.row(i);
            write!(
                wtr,
                "{:.3},{},{:.3},{:.3},{:.3}",
                self.meta[i].t_s,
                self.scenario_of(i),
                row[FeatureLayout::POS_X],
                row[FeatureLayout::POS_Y],
                row[FeatureLayout::TOD_DIST]
            )
            .map_err(io_err)?;
            for j in 0..c {
                write!(wtr, ",{:.0}", row[self.layout.v_c(j)]).map_err(io_err)?;
            }
            for j in 0..c {
                write!(wtr, ",{:.3}", row[self.layout.d_c(j)]).map_err(io_err)?;
            }
            writeln!(
                wtr,
                ",{:.9},{:.3},{}",
                row[self.layout.ntod_dist_recip()],
                self.y[i],
                self.meta[i].serving_cell
            )
            .map_err(io_err)?;
        }
        wtr.flush().map_err(io_err)
    }

    pub fn load_csv(path: &Path) -> Result<Dataset, DataError> {
        let text = fs::read_to_string(path)
            .map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })?;
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| DataError::Parse {
            path: path.to_path_buf(),
            line: 1,
            reason: "empty file".into(),
        })?;
        let ncols = header.split(',').count();
        // Fixed columns: t_s, scenario_id, three position features, recip,
        // label, serving_cell; the rest is two per-cell blocks.
        if ncols < 10 || (ncols - 8) % 2 != 0 {
            return Err(DataError::Schema(format!("unexpected column count {ncols}")));
        }
        let num_cells = (ncols - 8) / 2;
        let layout = FeatureLayout::new(num_cells);
        if header != Self::header(layout) {
            return Err(DataError::Schema(format!("header mismatch in {}", path.display())));
        }
        let mut ds = Dataset::empty(layout);
        for (idx, line) in lines {
            if line.is_empty() {
                continue;
            }
            let parse_err = |reason: String| DataError::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                reason,
            };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != ncols {
                return Err(parse_err(format!("expected {ncols} fields, got {}", fields.len())));
            }
            let f = |s: &str| s.parse::<f64>().map_err(|e| parse_err(format!("{s:?}: {e}")));
            let scenario = fields[1].to_string();
            let scenario_idx = match ds.scenario_ids.iter().position(|s| *s == scenario) {
                Some(i) => i as u32,
                None => {
                    ds.scenario_ids.push(scenario);
                    (ds.scenario_ids.len() - 1) as u32
                }
            };
            for field in &fields[2..2 + layout.width()] {
                ds.x.push(f(field)?);
            }
            ds.y.push(f(fields[ncols - 2])?);
            ds.meta.push(RowMeta {
                t_s: f(fields[0])?,
                scenario_idx,
                serving_cell: fields[ncols - 1]
                    .parse::<u32>()
                    .map_err(|e| parse_err(format!("{:?}: {e}", fields[ncols - 1])))?,
            });
        }
        Ok(ds)
    }
}
