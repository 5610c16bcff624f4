//! Online phase: answer a prediction request by estimating future input
//! features over the horizon and evaluating the trained forest on them.
//!
//! Predictions run at sample-window granularity and are aggregated to the
//! request's step size by mean, both for predicted values and for the true
//! labels used in rolling evaluation.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featureset::{metrics, AccuracyReport, DataError, FeatureConfig};
use crate::rforest::{Forest, ModelError};
use crate::simkit::Cell;
use crate::tsforecast::{
    forecast_features, ForecastError, ForecastSettings, InputMode, WindowRecord,
};

#[derive(Debug, Error)]
pub enum InferError {
    #[error("invalid request: {0}")]
    Request(String),
    #[error("feature configuration mismatch: request wants `{requested}`, forest was trained for `{model}`")]
    ConfigMismatch { requested: String, model: String },
    #[error("history too short: have {have} windows, need {need}")]
    TraceTooShort { have: usize, need: usize },
    #[error(transparent)]
    Forecast(#[from] ForecastError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QosParameter {
    UlThroughput,
}

/// A prediction request from the application: which QoS parameter, how far
/// ahead, at what step, and with which input-estimation mode. The planned
/// trajectory supplies one ToD position per future sample window.
#[derive(Debug, Clone)]
pub struct PredictionRequest {
    pub qos_parameter: QosParameter,
    pub horizon_s: f64,
    pub step_s: f64,
    pub location: (f64, f64),
    pub planned_xy: Vec<(f64, f64)>,
    pub input_mode: InputMode,
    pub feature_config: FeatureConfig,
    pub forecast: ForecastSettings,
}

impl PredictionRequest {
    pub fn steps(&self) -> usize {
        (self.horizon_s / self.step_s + 1e-9).floor() as usize
    }

    fn validate(&self) -> Result<(), InferError> {
        if !(self.step_s > 0.0) {
            return Err(InferError::Request("step must be positive".into()));
        }
        if self.horizon_s < self.step_s {
            return Err(InferError::Request("horizon must be at least one step".into()));
        }
        if self.steps() > 60 {
            return Err(InferError::Request(format!(
                "horizon/step = {} exceeds the 60-step cap",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// Per-step predicted QoS values with ensemble spread estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedSeries {
    /// Start of the prediction horizon (end of observed history), seconds.
    pub t0_s: f64,
    pub step_s: f64,
    pub values_bps: Vec<f64>,
    pub spreads_bps: Vec<f64>,
    pub input_mode: InputMode,
    pub model_id: String,
}

impl PredictedSeries {
    pub fn len(&self) -> usize {
        self.values_bps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values_bps.is_empty()
    }

    /// End time of step `i` (0-based).
    pub fn time_at(&self, i: usize) -> f64 {
        self.t0_s + (i as f64 + 1.0) * self.step_s
    }

    pub fn min_value(&self) -> f64 {
        self.values_bps.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

fn window_stride(history: &[WindowRecord]) -> Result<f64, InferError> {
    if history.len() < 2 {
        return Err(InferError::TraceTooShort { have: history.len(), need: 2 });
    }
    Ok(history[1].t_s - history[0].t_s)
}

/// Answer one prediction request: estimate features for every future sample
/// window per the request's input mode, run the forest per window, and
/// aggregate to steps by mean. Perfect mode requires ground-truth windows and
/// introduces zero feature error by construction.
pub fn handle_request(
    req: &PredictionRequest,
    forest: &Forest,
    cells: &[Cell],
    history: &[WindowRecord],
    ground_truth: Option<&[WindowRecord]>,
) -> Result<PredictedSeries, InferError> {
    req.validate()?;
    if forest.feature_config != req.feature_config {
        return Err(InferError::ConfigMismatch {
            requested: req.feature_config.id.clone(),
            model: forest.feature_config.id.clone(),
        });
    }
    let stride = window_stride(history)?;
    let windows_per_step = (req.step_s / stride).round().max(1.0) as usize;
    let steps = req.steps();
    let horizon_windows = steps * windows_per_step;
    if req.planned_xy.len() < horizon_windows {
        return Err(InferError::Request(format!(
            "planned trajectory covers {} windows, horizon needs {horizon_windows}",
            req.planned_xy.len()
        )));
    }

    let layout = crate::featureset::FeatureLayout::new(cells.len());
    let future = forecast_features(
        history,
        layout,
        cells,
        horizon_windows,
        req.input_mode,
        &req.forecast,
        &req.planned_xy,
        ground_truth,
    )?;

    let mut values = Vec::with_capacity(steps);
    let mut spreads = Vec::with_capacity(steps);
    for k in 0..steps {
        let mut v_sum = 0.0;
        let mut s_sum = 0.0;
        for w in &future[k * windows_per_step..(k + 1) * windows_per_step] {
            let projected = forest.feature_config.project(&w.features, w.serving_cell);
            v_sum += forest.predict(&projected)?;
            s_sum += forest.predict_spread(&projected)?;
        }
        values.push((v_sum / windows_per_step as f64).max(0.0));
        spreads.push(s_sum / windows_per_step as f64);
    }

    let t0_s = history.last().map_or(0.0, |w| w.t_s) + stride;
    Ok(PredictedSeries {
        t0_s,
        step_s: req.step_s,
        values_bps: values,
        spreads_bps: spreads,
        input_mode: req.input_mode,
        model_id: forest.model_id(),
    })
}

/// One (origin, step) observation of a rolling evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct RollingRow {
    pub origin_t_s: f64,
    pub step_k: usize,
    pub true_bps: f64,
    pub pred_perfect_bps: f64,
    pub pred_arima_bps: f64,
    /// Ensemble spread under ARIMA (imperfect) inputs.
    pub spread_bps: f64,
}

/// Per-step aggregate accuracy for both input modes.
#[derive(Debug, Clone, Serialize)]
pub struct StepMetrics {
    pub step_k: usize,
    pub n: usize,
    pub perfect: AccuracyReport,
    pub arima: AccuracyReport,
}

#[derive(Debug, Clone)]
pub struct RollingTable {
    pub rows: Vec<RollingRow>,
    pub per_step: Vec<StepMetrics>,
    pub steps: usize,
}

/// Template for a rolling evaluation: request shape minus the per-origin
/// trajectory and mode.
#[derive(Debug, Clone)]
pub struct RollingTemplate {
    pub horizon_s: f64,
    pub step_s: f64,
    pub feature_config: FeatureConfig,
    pub forecast: ForecastSettings,
    /// Origins advance by this many windows (defaults to one step).
    pub origin_stride_windows: usize,
}

impl RollingTemplate {
    pub fn new(feature_config: FeatureConfig) -> Self {
        Self {
            horizon_s: 7.0,
            step_s: 1.0,
            feature_config,
            forecast: ForecastSettings::default(),
            origin_stride_windows: 10,
        }
    }
}

/// Slide a request origin across a trace. At each origin the forest predicts
/// the horizon twice, once with perfect inputs and once with ARIMA-estimated
/// inputs; true per-step labels are window means of the trace's goodput.
/// Origins start once a full fitting window of history has accumulated.
pub fn rolling_evaluate(
    windows: &[WindowRecord],
    forest: &Forest,
    cells: &[Cell],
    template: &RollingTemplate,
) -> Result<RollingTable, InferError> {
    let stride = window_stride(windows)?;
    let windows_per_step = (template.step_s / stride).round().max(1.0) as usize;
    let steps = (template.horizon_s / template.step_s + 1e-9).floor() as usize;
    let horizon_windows = steps * windows_per_step;
    let min_history = template.forecast.history_window.max(2);
    let need = min_history + horizon_windows;
    if windows.len() < need {
        return Err(InferError::TraceTooShort { have: windows.len(), need });
    }

    let mut rows = Vec::new();
    let mut origin = min_history;
    while origin + horizon_windows <= windows.len() {
        let history = &windows[..origin];
        let truth = &windows[origin..origin + horizon_windows];
        let planned: Vec<(f64, f64)> = truth
            .iter()
            .map(|w| {
                (w.features[crate::featureset::FeatureLayout::POS_X],
                 w.features[crate::featureset::FeatureLayout::POS_Y])
            })
            .collect();
        let mut req = PredictionRequest {
            qos_parameter: QosParameter::UlThroughput,
            horizon_s: template.horizon_s,
            step_s: template.step_s,
            location: planned[0],
            planned_xy: planned.clone(),
            input_mode: InputMode::Perfect,
            feature_config: template.feature_config.clone(),
            forecast: template.forecast,
        };
        let perfect = handle_request(&req, forest, cells, history, Some(truth))?;
        req.input_mode = InputMode::Arima;
        let arima = handle_request(&req, forest, cells, history, None)?;

        let origin_t_s = history.last().unwrap().t_s;
        for k in 0..steps {
            let span = &truth[k * windows_per_step..(k + 1) * windows_per_step];
            let true_bps =
                span.iter().map(|w| w.goodput_bps).sum::<f64>() / windows_per_step as f64;
            rows.push(RollingRow {
                origin_t_s,
                step_k: k + 1,
                true_bps,
                pred_perfect_bps: perfect.values_bps[k],
                pred_arima_bps: arima.values_bps[k],
                spread_bps: arima.spreads_bps[k],
            });
        }
        origin += template.origin_stride_windows.max(1);
    }

    let mut per_step = Vec::with_capacity(steps);
    for k in 1..=steps {
        let step_rows: Vec<&RollingRow> = rows.iter().filter(|r| r.step_k == k).collect();
        let truth: Vec<f64> = step_rows.iter().map(|r| r.true_bps).collect();
        let perfect: Vec<f64> = step_rows.iter().map(|r| r.pred_perfect_bps).collect();
        let arima: Vec<f64> = step_rows.iter().map(|r| r.pred_arima_bps).collect();
        per_step.push(StepMetrics {
            step_k: k,
            n: step_rows.len(),
            perfect: metrics(&truth, &perfect)?,
            arima: metrics(&truth, &arima)?,
        });
    }
    Ok(RollingTable { rows, per_step, steps })
}

impl RollingTable {
    pub const CSV_HEADER: &'static str =
        "origin_t_s,step_k,true_bps,pred_perfect_bps,pred_arima_bps,spread_bps";

    pub fn save_csv(&self, path: &Path) -> Result<(), InferError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)
                .map_err(|e| InferError::Io { path: path.to_path_buf(), source: e })?;
        }
        let io_err = |e| InferError::Io { path: path.to_path_buf(), source: e };
        let file = fs::File::create(path).map_err(io_err)?;
        let mut w = BufWriter::new(file);
        writeln!(w, "{}", Self::CSV_HEADER).map_err(io_err)?;
        for r in &self.rows {
            writeln!(
                w,
                "{:.3},{},{:.3},{:.3},{:.3},{:.3}",
                r.origin_t_s, r.step_k, r.true_bps, r.pred_perfect_bps, r.pred_arima_bps,
                r.spread_bps
            )
            .map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }

    /// Mean MAPE over a 1-based inclusive range of steps for one mode.
    pub fn mape_over_steps(&self, from: usize, to: usize, mode: InputMode) -> f64 {
        let sel: Vec<f64> = self
            .per_step
            .iter()
            .filter(|s| s.step_k >= from && s.step_k <= to)
            .map(|s| match mode {
                InputMode::Arima => s.arima.mape,
                _ => s.perfect.mape,
            })
            .collect();
        sel.iter().sum::<f64>() / sel.len().max(1) as f64
    }

    /// Mean MAE over a 1-based inclusive range of steps for one mode.
    pub fn mae_over_steps(&self, from: usize, to: usize, mode: InputMode) -> f64 {
        let sel: Vec<f64> = self
            .per_step
            .iter()
            .filter(|s| s.step_k >= from && s.step_k <= to)
            .map(|s| match mode {
                InputMode::Arima => s.arima.mae,
                _ => s.perfect.mae,
            })
            .collect();
        sel.iter().sum::<f64>() / sel.len().max(1) as f64
    }

    /// Horizon MAPE: all steps pooled for one mode.
    pub fn horizon_mape(&self, mode: InputMode) -> f64 {
        self.mape_over_steps(1, self.steps, mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featureset::{apply_config, build_dataset, split, FeatureLayout};
    use crate::rforest::{fit, ForestHyperparams};
    use crate::simkit::{layout_cells, run, ScenarioConfig, TraceManifest};
    use approx::assert_abs_diff_eq;

    struct Fixture {
        forest: Forest,
        cells: Vec<Cell>,
        windows: Vec<WindowRecord>,
    }

    fn fixture() -> Fixture {
        let cfg = ScenarioConfig {
            n_ntod: 25,
            seed: 3,
            duration: 60.0,
            ntod_load_multiplier: 40.0,
            ..Default::default()
        };
        let log = run(&cfg).unwrap();
        let manifest = TraceManifest {
            scenario_id: log.scenario_id.clone(),
            config_sha256: log.config_sha256.clone(),
            num_cells: log.num_cells,
            n_windows: log.windows.len(),
            config: cfg.clone(),
        };
        let cells = layout_cells(&cfg);
        let windows: Vec<WindowRecord> =
            log.windows.iter().map(|w| WindowRecord::from_trace(w, &cells).unwrap()).collect();
        let ds = build_dataset(&[(log, manifest)]).unwrap();
        let (train, _) = split(&ds, 2.0 / 3.0, 1).unwrap();
        let hp = ForestHyperparams { n_trees: 10, seed: 5, ..Default::default() };
        let forest = fit(&train, &hp).unwrap();
        Fixture { forest, cells, windows }
    }

    fn request(fx: &Fixture, mode: InputMode, horizon_s: f64) -> PredictionRequest {
        let origin = 400usize;
        let horizon_windows = (horizon_s * 10.0).ceil() as usize;
        let planned: Vec<(f64, f64)> = fx.windows[origin..origin + horizon_windows]
            .iter()
            .map(|w| (w.features[0], w.features[1]))
            .collect();
        PredictionRequest {
            qos_parameter: QosParameter::UlThroughput,
            horizon_s,
            step_s: 1.0,
            location: planned[0],
            planned_xy: planned,
            input_mode: mode,
            feature_config: fx.forest.feature_config.clone(),
            forecast: ForecastSettings::default(),
        }
    }

    #[test]
    fn seven_second_horizon_yields_seven_values() {
        let fx = fixture();
        let req = request(&fx, InputMode::Perfect, 7.0);
        let series = handle_request(
            &req,
            &fx.forest,
            &fx.cells,
            &fx.windows[..400],
            Some(&fx.windows[400..]),
        )
        .unwrap();
        assert_eq!(series.len(), 7);
        assert_eq!(series.spreads_bps.len(), 7);
        assert!(series.values_bps.iter().all(|v| *v >= 0.0));
        assert_abs_diff_eq!(series.t0_s, fx.windows[399].t_s + 0.1, epsilon = 1e-9);
    }

    #[test]
    fn output_length_is_floor_of_horizon_over_step() {
        let fx = fixture();
        let req = request(&fx, InputMode::Persistence, 7.9);
        let series =
            handle_request(&req, &fx.forest, &fx.cells, &fx.windows[..400], None).unwrap();
        assert_eq!(series.len(), 7);
    }

    #[test]
    fn perfect_mode_equals_forest_on_true_features() {
        let fx = fixture();
        let req = request(&fx, InputMode::Perfect, 3.0);
        let series = handle_request(
            &req,
            &fx.forest,
            &fx.cells,
            &fx.windows[..400],
            Some(&fx.windows[400..]),
        )
        .unwrap();
        for k in 0..3 {
            let mut expect = 0.0;
            for w in &fx.windows[400 + k * 10..400 + (k + 1) * 10] {
                let proj = fx.forest.feature_config.project(&w.features, w.serving_cell);
                expect += fx.forest.predict(&proj).unwrap();
            }
            expect /= 10.0;
            assert_eq!(series.values_bps[k].to_bits(), expect.max(0.0).to_bits());
        }
    }

    #[test]
    fn request_is_deterministic() {
        let fx = fixture();
        let req = request(&fx, InputMode::Arima, 5.0);
        let a = handle_request(&req, &fx.forest, &fx.cells, &fx.windows[..400], None).unwrap();
        let b = handle_request(&req, &fx.forest, &fx.cells, &fx.windows[..400], None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_mismatch_is_rejected() {
        let fx = fixture();
        let mut req = request(&fx, InputMode::Arima, 3.0);
        let layout = FeatureLayout::new(fx.cells.len());
        req.feature_config = crate::featureset::FeatureConfig::preset("T3", layout).unwrap();
        let err =
            handle_request(&req, &fx.forest, &fx.cells, &fx.windows[..400], None).unwrap_err();
        assert!(matches!(err, InferError::ConfigMismatch { .. }));
    }

    #[test]
    fn perfect_without_ground_truth_is_an_error() {
        let fx = fixture();
        let req = request(&fx, InputMode::Perfect, 3.0);
        let err =
            handle_request(&req, &fx.forest, &fx.cells, &fx.windows[..400], None).unwrap_err();
        assert!(matches!(err, InferError::Forecast(ForecastError::MissingGroundTruth)));
    }

    #[test]
    fn horizon_cap_is_enforced() {
        let fx = fixture();
        let mut req = request(&fx, InputMode::Persistence, 7.0);
        req.horizon_s = 90.0;
        let err =
            handle_request(&req, &fx.forest, &fx.cells, &fx.windows[..400], None).unwrap_err();
        assert!(matches!(err, InferError::Request(_)));
    }

    #[test]
    fn rolling_table_shape_and_projection_dataset_agree() {
        let fx = fixture();
        let template = RollingTemplate::new(fx.forest.feature_config.clone());
        let table = rolling_evaluate(&fx.windows, &fx.forest, &fx.cells, &template).unwrap();
        // 600 windows, history 300, horizon 70, stride 10: origins 300..=530.
        let origins = (530 - 300) / 10 + 1;
        assert_eq!(table.rows.len(), origins * 7);
        assert_eq!(table.per_step.len(), 7);
        for s in &table.per_step {
            assert_eq!(s.n, origins);
        }
        // Perfect-input error at k=1 does not exceed the imperfect-input
        // error at k=1, averaged over origins.
        assert!(table.per_step[0].perfect.mae <= table.per_step[0].arima.mae + 1e-9);
    }

    #[test]
    fn rolling_rejects_short_traces() {
        let fx = fixture();
        let template = RollingTemplate::new(fx.forest.feature_config.clone());
        let err = rolling_evaluate(&fx.windows[..200], &fx.forest, &fx.cells, &template).unwrap_err();
        assert!(matches!(err, InferError::TraceTooShort { .. }));
    }

    #[test]
    fn rolling_csv_roundtrip_format() {
        let fx = fixture();
        let template = RollingTemplate::new(fx.forest.feature_config.clone());
        let table = rolling_evaluate(&fx.windows, &fx.forest, &fx.cells, &template).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rolling.csv");
        table.save_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), RollingTable::CSV_HEADER);
        assert_eq!(lines.count(), table.rows.len());
    }

    /// Dataset-projected prediction and window-record projection agree: the
    /// same features flow through both paths.
    #[test]
    fn projection_paths_are_consistent() {
        let fx = fixture();
        let cfg = ScenarioConfig {
            n_ntod: 25,
            seed: 3,
            duration: 60.0,
            ntod_load_multiplier: 40.0,
            ..Default::default()
        };
        let log = run(&cfg).unwrap();
        let manifest = TraceManifest {
            scenario_id: log.scenario_id.clone(),
            config_sha256: log.config_sha256.clone(),
            num_cells: log.num_cells,
            n_windows: log.windows.len(),
            config: cfg,
        };
        let ds = build_dataset(&[(log, manifest)]).unwrap();
        let t2 = crate::featureset::FeatureConfig::preset("T2", ds.layout).unwrap();
        let projected = apply_config(&ds, &t2).unwrap();
        for i in [0usize, 100, 350] {
            let w = &fx.windows[i];
            let via_record = t2.project(&w.features, w.serving_cell);
            assert_eq!(via_record, projected.row(i));
        }
    }
}
