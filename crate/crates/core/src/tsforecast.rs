//! AR/ARI time-series forecasting for the dynamic input features (per-cell
//! vehicle counts and demands) over a prediction horizon.
//!
//! Only the ARI(p, d) subfamily is supported (q = 0): moving-average terms
//! would need nonlinear estimation that this use does not require. Fitting is
//! ordinary least squares on the lagged design matrix of the differenced
//! series; forecasting is the iterated multi-step recursion followed by
//! re-integration.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featureset::FeatureLayout;
use crate::simkit::{Cell, TraceWindow};

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("series too short: need at least {needed} points for this order, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("invalid order: {0}")]
    BadOrder(String),
    #[error("perfect input mode requires ground-truth future windows")]
    MissingGroundTruth,
}

/// ARI model order: AR lags `p`, differencing `d` (0 or 1), MA order fixed 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArimaOrder {
    pub p: usize,
    pub d: usize,
    pub q: usize,
}

impl Default for ArimaOrder {
    fn default() -> Self {
        Self { p: 2, d: 1, q: 0 }
    }
}

impl ArimaOrder {
    pub fn new(p: usize, d: usize) -> Self {
        Self { p, d, q: 0 }
    }

    fn validate(&self) -> Result<(), ForecastError> {
        if self.q != 0 {
            return Err(ForecastError::BadOrder("q must be 0 (ARI subfamily)".into()));
        }
        if self.d > 1 {
            return Err(ForecastError::BadOrder(format!("d must be 0 or 1, got {}", self.d)));
        }
        Ok(())
    }

    /// Minimum history length accepted by [`fit`].
    pub fn min_len(&self) -> usize {
        self.p + self.d + 5
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArimaModel {
    pub order: ArimaOrder,
    pub ar_coeffs: Vec<f64>,
    pub intercept: f64,
    pub residual_std: f64,
    /// Last `p + d` observations of the original series.
    pub tail: Vec<f64>,
}

fn difference(series: &[f64], d: usize) -> Vec<f64> {
    let mut z = series.to_vec();
    for _ in 0..d {
        z = z.windows(2).map(|w| w[1] - w[0]).collect();
    }
    z
}

/// Solve `a * x = b` for a small symmetric system by Gaussian elimination
/// with partial pivoting. Returns `None` when the system is singular.
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale: f64 =
        a.iter().flat_map(|row| row.iter().map(|v| v.abs())).fold(0.0, f64::max).max(1.0);
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 * scale {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut sum = b[col];
        for k in col + 1..n {
            sum -= a[col][k] * x[k];
        }
        x[col] = sum / a[col][col];
    }
    Some(x)
}

/// Fit an ARI(p, d) model: difference `d` times, then AR(p) plus intercept by
/// ordinary least squares on the lagged design matrix. A constant differenced
/// series short-circuits to an exact constant model; a singular design falls
/// back to intercept-only.
pub fn fit(series: &[f64], order: ArimaOrder) -> Result<ArimaModel, ForecastError> {
    order.validate()?;
    let needed = order.min_len();
    if series.len() < needed {
        return Err(ForecastError::TooShort { needed, got: series.len() });
    }
    let z = difference(series, order.d);
    let p = order.p;
    let tail = series[series.len() - (p + order.d).max(1)..].to_vec();

    let constant = z.iter().all(|&v| v == z[0]);
    if constant || p == 0 {
        let mean = if constant { z[0] } else { z.iter().sum::<f64>() / z.len() as f64 };
        let residual_std = if constant {
            0.0
        } else {
            let sse: f64 = z.iter().map(|v| (v - mean).powi(2)).sum();
            (sse / (z.len().max(2) - 1) as f64).sqrt()
        };
        return Ok(ArimaModel {
            order,
            ar_coeffs: vec![0.0; p],
            intercept: mean,
            residual_std,
            tail,
        });
    }

    // Normal equations for regressors [1, z[t-1], .., z[t-p]].
    let rows = z.len() - p;
    let k = p + 1;
    let mut a = vec![vec![0.0; k]; k];
    let mut b = vec![0.0; k];
    for t in p..z.len() {
        let mut reg = Vec::with_capacity(k);
        reg.push(1.0);
        for lag in 1..=p {
            reg.push(z[t - lag]);
        }
        for i in 0..k {
            b[i] += reg[i] * z[t];
            for j in 0..k {
                a[i][j] += reg[i] * reg[j];
            }
        }
    }

    let (intercept, ar_coeffs) = match solve_linear(a, b) {
        Some(beta) => (beta[0], beta[1..].to_vec()),
        None => (z[p..].iter().sum::<f64>() / rows as f64, vec![0.0; p]),
    };

    let mut sse = 0.0;
    for t in p..z.len() {
        let mut pred = intercept;
        for (lag, coeff) in ar_coeffs.iter().enumerate() {
            pred += coeff * z[t - 1 - lag];
        }
        sse += (z[t] - pred).powi(2);
    }
    let dof = rows.saturating_sub(k).max(1);
    Ok(ArimaModel { order, ar_coeffs, intercept, residual_std: (sse / dof as f64).sqrt(), tail })
}

/// Iterated multi-step forecast: the AR recursion runs on the differenced
/// scale feeding its own forecasts back as lagged inputs, then the result is
/// re-integrated from the stored tail. Deterministic: no residual simulation.
pub fn forecast(model: &ArimaModel, steps: usize) -> Vec<f64> {
    let p = model.order.p;
    let mut hist = difference(&model.tail, model.order.d);
    // hist holds the last p differenced values (possibly fewer for p = 0).
    let mut out_diff = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut next = model.intercept;
        for (lag, coeff) in model.ar_coeffs.iter().enumerate() {
            if lag < hist.len() {
                next += coeff * hist[hist.len() - 1 - lag];
            }
        }
        hist.push(next);
        if hist.len() > p + 1 {
            hist.remove(0);
        }
        out_diff.push(next);
    }

    if model.order.d == 0 {
        out_diff
    } else {
        let mut level = *model.tail.last().expect("tail nonempty");
        out_diff
            .into_iter()
            .map(|dz| {
                level += dz;
                level
            })
            .collect()
    }
}

/// How future input features are obtained during inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    /// Ground-truth future features (idealized upper bound).
    Perfect,
    /// Per-feature ARI forecasts for the dynamic features.
    Arima,
    /// Repeat the last observation.
    Persistence,
}

impl std::fmt::Display for InputMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            InputMode::Perfect => "perfect",
            InputMode::Arima => "arima",
            InputMode::Persistence => "persistence",
        };
        f.write_str(s)
    }
}

/// Settings for feature forecasting.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct ForecastSettings {
    pub order: ArimaOrder,
    /// Number of trailing history windows used for fitting (30 s at the
    /// default 100 ms sample window).
    pub history_window: usize,
}

impl Default for ForecastSettings {
    fn default() -> Self {
        Self { order: ArimaOrder::default(), history_window: 300 }
    }
}

/// One observed window in feature space, as consumed by the online phase.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowRecord {
    pub t_s: f64,
    pub serving_cell: u32,
    pub features: Vec<f64>,
    pub goodput_bps: f64,
}

impl WindowRecord {
    pub fn from_trace(window: &TraceWindow, cells: &[Cell]) -> Result<Self, crate::featureset::DataError> {
        Ok(Self {
            t_s: window.t_s,
            serving_cell: window.serving_cell,
            features: crate::featureset::extract_features(window, cells)?,
            goodput_bps: window.tod_goodput_bps,
        })
    }
}

/// A forecast feature vector for one future window.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastWindow {
    pub serving_cell: u32,
    pub features: Vec<f64>,
}

/// Estimate the input features for the next `horizon_windows` windows.
///
/// ToD position features always come from the application's planned
/// trajectory (`planned_xy`, one point per future window) and are treated as
/// known; `tod_dist` is recomputed against the persisted serving site. The 19
/// dynamic features follow the selected mode: ground-truth copy, independent
/// per-feature ARI forecasts (counts rounded and clamped non-negative,
/// demands clamped non-negative), or persistence. The fallback ladder never
/// fails: too-short history degrades to persistence, and an empty history
/// yields zero dynamic features.
pub fn forecast_features(
    history: &[WindowRecord],
    layout: FeatureLayout,
    cells: &[Cell],
    horizon_windows: usize,
    mode: InputMode,
    settings: &ForecastSettings,
    planned_xy: &[(f64, f64)],
    ground_truth: Option<&[WindowRecord]>,
) -> Result<Vec<ForecastWindow>, ForecastError> {
    assert!(planned_xy.len() >= horizon_windows, "planned trajectory shorter than horizon");

    if mode == InputMode::Perfect {
        let truth = ground_truth.ok_or(ForecastError::MissingGroundTruth)?;
        if truth.len() < horizon_windows {
            return Err(ForecastError::MissingGroundTruth);
        }
        return Ok(truth[..horizon_windows]
            .iter()
            .map(|w| ForecastWindow { serving_cell: w.serving_cell, features: w.features.clone() })
            .collect());
    }

    let width = layout.width();
    let serving = history.last().map_or(0, |w| w.serving_cell);
    let site = cells.get(serving as usize).map(|c| c.position);

    // Column-major view of the dynamic features over the fitting window.
    let fit_start = history.len().saturating_sub(settings.history_window);
    let recent = &history[fit_start..];
    let dynamic_cols: Vec<usize> = (0..layout.num_cells)
        .map(|c| layout.v_c(c))
        .chain((0..layout.num_cells).map(|c| layout.d_c(c)))
        .chain(std::iter::once(layout.ntod_dist_recip()))
        .collect();

    let mut forecasts: Vec<Vec<f64>> = Vec::with_capacity(dynamic_cols.len());
    for &col in &dynamic_cols {
        let series: Vec<f64> = recent.iter().map(|w| w.features[col]).collect();
        let values = match mode {
            InputMode::Arima => match fit(&series, settings.order) {
                Ok(model) => forecast(&model, horizon_windows),
                Err(ForecastError::TooShort { .. }) => persistence(&series, horizon_windows),
                Err(e) => return Err(e),
            },
            InputMode::Persistence => persistence(&series, horizon_windows),
            InputMode::Perfect => unreachable!(),
        };
        let is_count = col >= layout.v_c(0) && col < layout.v_c(layout.num_cells);
        forecasts.push(
            values
                .into_iter()
                .map(|v| if is_count { v.round().max(0.0) } else { v.max(0.0) })
                .collect(),
        );
    }

    let mut out = Vec::with_capacity(horizon_windows);
    for h in 0..horizon_windows {
        let (x, y) = planned_xy[h];
        let mut features = vec![0.0; width];
        features[FeatureLayout::POS_X] = x;
        features[FeatureLayout::POS_Y] = y;
        features[FeatureLayout::TOD_DIST] =
            site.map_or(0.0, |s| ((x - s.x).powi(2) + (y - s.y).powi(2)).sqrt());
        for (k, &col) in dynamic_cols.iter().enumerate() {
            features[col] = forecasts[k][h];
        }
        out.push(ForecastWindow { serving_cell: serving, features });
    }
    Ok(out)
}

fn persistence(series: &[f64], steps: usize) -> Vec<f64> {
    let last = series.last().copied().unwrap_or(0.0);
    vec![last; steps]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn constant_series_forecasts_exactly_for_all_orders() {
        let series = vec![7.25; 40];
        for p in 0..4 {
            for d in 0..2 {
                let model = fit(&series, ArimaOrder::new(p, d)).unwrap();
                for steps in [1usize, 5, 20] {
                    let f = forecast(&model, steps);
                    assert_eq!(f.len(), steps);
                    assert!(f.iter().all(|&v| v == 7.25), "p={p} d={d}: {f:?}");
                }
            }
        }
    }

    #[test]
    fn ar1_coefficient_recovered() {
        // Synthetic AR(1) with phi = 0.8 and seeded noise sigma = 0.1.
        let phi = 0.8;
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let mut series = vec![0.0f64];
        for _ in 1..500 {
            let next = phi * series.last().unwrap() + noise.sample(&mut rng);
            series.push(next);
        }
        let model = fit(&series, ArimaOrder::new(1, 0)).unwrap();
        assert!(
            (model.ar_coeffs[0] - phi).abs() <= 0.1,
            "estimated phi = {}",
            model.ar_coeffs[0]
        );
    }

    #[test]
    fn linear_ramp_continues() {
        // 1..50 differenced once is constant, so the one-step forecast is 51.
        let series: Vec<f64> = (1..=50).map(|i| i as f64).collect();
        let model = fit(&series, ArimaOrder::new(1, 1)).unwrap();
        let f = forecast(&model, 3);
        assert_abs_diff_eq!(f[0], 51.0, epsilon = 0.5);
        assert_abs_diff_eq!(f[1], 52.0, epsilon = 0.5);
        assert_abs_diff_eq!(f[2], 53.0, epsilon = 0.5);
        assert_eq!(model.residual_std, 0.0);
    }

    #[test]
    fn too_short_series_is_an_error() {
        let series = vec![1.0; 6];
        let err = fit(&series, ArimaOrder::new(2, 1)).unwrap_err();
        assert!(matches!(err, ForecastError::TooShort { needed: 8, got: 6 }));
        assert!(matches!(
            fit(&series, ArimaOrder { p: 1, d: 0, q: 1 }),
            Err(ForecastError::BadOrder(_))
        ));
    }

    #[test]
    fn translation_shifts_d1_forecasts_exactly() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut series = vec![10.0f64];
        for i in 1..120 {
            series.push(10.0 + (i as f64 * 0.3).sin() * 4.0 + noise.sample(&mut rng));
        }
        let shifted: Vec<f64> = series.iter().map(|v| v + 1234.5).collect();
        let f1 = forecast(&fit(&series, ArimaOrder::new(2, 1)).unwrap(), 10);
        let f2 = forecast(&fit(&shifted, ArimaOrder::new(2, 1)).unwrap(), 10);
        for (a, b) in f1.iter().zip(&f2) {
            assert_abs_diff_eq!(b - a, 1234.5, epsilon = 1e-6);
        }
    }

    #[test]
    fn forecast_length_matches_steps() {
        let series: Vec<f64> = (0..60).map(|i| (i as f64 * 0.7).cos()).collect();
        let model = fit(&series, ArimaOrder::default()).unwrap();
        for steps in [1usize, 7, 31] {
            assert_eq!(forecast(&model, steps).len(), steps);
        }
    }

    // -- forecast_features ---------------------------------------------------

    fn history_of(counts: impl Fn(usize) -> f64, len: usize) -> (Vec<WindowRecord>, FeatureLayout, Vec<crate::simkit::Cell>) {
        let cfg = crate::simkit::ScenarioConfig::default();
        let cells = crate::simkit::layout_cells(&cfg);
        let layout = FeatureLayout::new(cells.len());
        let mut hist = Vec::with_capacity(len);
        for i in 0..len {
            let mut features = vec![0.0; layout.width()];
            features[FeatureLayout::POS_X] = i as f64;
            features[FeatureLayout::POS_Y] = 250.0;
            features[layout.v_c(0)] = counts(i);
            features[layout.d_c(0)] = counts(i) * 1000.0;
            hist.push(WindowRecord {
                t_s: i as f64 * 0.1,
                serving_cell: 0,
                features,
                goodput_bps: 2e7,
            });
        }
        (hist, layout, cells)
    }

    #[test]
    fn perfect_mode_copies_ground_truth() {
        let (hist, layout, cells) = history_of(|_| 3.0, 50);
        let truth = &hist[40..];
        let planned: Vec<(f64, f64)> = truth.iter().map(|w| (w.features[0], w.features[1])).collect();
        let out = forecast_features(
            &hist[..40],
            layout,
            &cells,
            10,
            InputMode::Perfect,
            &ForecastSettings::default(),
            &planned,
            Some(truth),
        )
        .unwrap();
        for (o, t) in out.iter().zip(truth) {
            assert_eq!(o.features, t.features);
            assert_eq!(o.serving_cell, t.serving_cell);
        }
        // Without ground truth the mode fails.
        assert!(matches!(
            forecast_features(
                &hist[..40],
                layout,
                &cells,
                10,
                InputMode::Perfect,
                &ForecastSettings::default(),
                &planned,
                None
            ),
            Err(ForecastError::MissingGroundTruth)
        ));
    }

    #[test]
    fn persistence_repeats_last_observation() {
        let (hist, layout, cells) = history_of(|i| (i % 7) as f64, 30);
        let planned = vec![(5.0, 250.0); 4];
        let out = forecast_features(
            &hist,
            layout,
            &cells,
            4,
            InputMode::Persistence,
            &ForecastSettings::default(),
            &planned,
            None,
        )
        .unwrap();
        let last = hist.last().unwrap();
        for w in &out {
            assert_eq!(w.features[layout.v_c(0)], last.features[layout.v_c(0)]);
            assert_eq!(w.features[layout.d_c(0)], last.features[layout.d_c(0)]);
        }
    }

    #[test]
    fn arima_counts_are_integral_and_non_negative() {
        // A falling ramp would extrapolate negative without clamping.
        let (hist, layout, cells) = history_of(|i| (40.0 - i as f64).max(0.0), 45);
        let planned = vec![(0.0, 0.0); 12];
        let out = forecast_features(
            &hist,
            layout,
            &cells,
            12,
            InputMode::Arima,
            &ForecastSettings::default(),
            &planned,
            None,
        )
        .unwrap();
        for w in &out {
            for c in 0..layout.num_cells {
                let v = w.features[layout.v_c(c)];
                assert!(v >= 0.0);
                assert_eq!(v, v.round());
                assert!(w.features[layout.d_c(c)] >= 0.0);
            }
        }
    }

    #[test]
    fn arima_on_constant_load_equals_persistence() {
        let (hist, layout, cells) = history_of(|_| 6.0, 60);
        let planned = vec![(1.0, 250.0); 5];
        let a = forecast_features(
            &hist, layout, &cells, 5, InputMode::Arima,
            &ForecastSettings::default(), &planned, None,
        )
        .unwrap();
        let p = forecast_features(
            &hist, layout, &cells, 5, InputMode::Persistence,
            &ForecastSettings::default(), &planned, None,
        )
        .unwrap();
        for (wa, wp) in a.iter().zip(&p) {
            for (x, y) in wa.features.iter().zip(&wp.features) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn empty_history_degrades_to_zeros() {
        let (_, layout, cells) = history_of(|_| 0.0, 1);
        let planned = vec![(100.0, 250.0); 3];
        let out = forecast_features(
            &[],
            layout,
            &cells,
            3,
            InputMode::Arima,
            &ForecastSettings::default(),
            &planned,
            None,
        )
        .unwrap();
        for w in &out {
            assert_eq!(w.features[layout.v_c(0)], 0.0);
            assert_eq!(w.features[FeatureLayout::POS_X], 100.0);
            // tod_dist still computed against the fallback serving site.
            assert!(w.features[FeatureLayout::TOD_DIST] > 0.0);
        }
    }
}
