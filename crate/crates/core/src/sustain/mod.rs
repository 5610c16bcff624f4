//! QoS-sustainability analytics: subscriptions with an area, a time window
//! and thresholds, evaluated against predicted series; notifications fire on
//! predicted threshold crossings.
//!
//! Crossing detection works on predicted values only; the ensemble spread is
//! carried in the notification for client-side use. A subscription's unknown
//! initial side defaults to `Above`, so a series that is already below a
//! threshold at the first evaluated step alerts immediately, while a series
//! entirely above all thresholds stays silent.

mod service;

pub use service::{serve, ServiceHandle, WireMessage};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::PredictedSeries;

#[derive(Debug, Error)]
#[error("invalid subscription field `{field}`: {reason}")]
pub struct SubscribeError {
    pub field: &'static str,
    pub reason: String,
}

fn sub_err(field: &'static str, reason: impl Into<String>) -> SubscribeError {
    SubscribeError { field, reason: reason.into() }
}

/// Geographic scope of a subscription.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Area {
    Circle { center_x_m: f64, center_y_m: f64, radius_m: f64 },
    Cells(Vec<u32>),
}

impl Area {
    pub fn contains(&self, location: &TodLocation) -> bool {
        match self {
            Area::Circle { center_x_m, center_y_m, radius_m } => {
                let dx = location.x_m - center_x_m;
                let dy = location.y_m - center_y_m;
                (dx * dx + dy * dy).sqrt() <= *radius_m
            }
            Area::Cells(cells) => cells.contains(&location.serving_cell),
        }
    }

    fn validate(&self) -> Result<(), SubscribeError> {
        match self {
            Area::Circle { radius_m, .. } if !(*radius_m > 0.0) => {
                Err(sub_err("area", "circle radius must be positive"))
            }
            Area::Cells(cells) if cells.is_empty() => {
                Err(sub_err("area", "cell list must be nonempty"))
            }
            _ => Ok(()),
        }
    }
}

/// Where the tracked flow currently is.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TodLocation {
    pub x_m: f64,
    pub y_m: f64,
    pub serving_cell: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubscriptionMode {
    OneShot,
    Continuous,
}

/// Client-facing subscription request; `client_request_id` makes retries
/// idempotent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubscribeRequest {
    pub client_request_id: Option<String>,
    pub area: Area,
    pub time_window: (f64, f64),
    pub thresholds_bps: Vec<f64>,
    pub mode: SubscriptionMode,
    pub min_renotify_interval_s: Option<f64>,
}

pub const DEFAULT_RENOTIFY_INTERVAL_S: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subscription {
    pub sub_id: String,
    pub area: Area,
    pub time_window: (f64, f64),
    pub thresholds_bps: Vec<f64>,
    pub mode: SubscriptionMode,
    pub min_renotify_interval_s: f64,
}

impl SubscribeRequest {
    pub fn validate(&self) -> Result<(), SubscribeError> {
        self.area.validate()?;
        if !(self.time_window.0 < self.time_window.1) {
            return Err(sub_err("time_window", "start must precede end"));
        }
        if self.thresholds_bps.is_empty() {
            return Err(sub_err("thresholds_bps", "at least one threshold required"));
        }
        if !self.thresholds_bps.windows(2).all(|w| w[0] < w[1]) {
            return Err(sub_err("thresholds_bps", "thresholds must be strictly ascending"));
        }
        if self.thresholds_bps.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(sub_err("thresholds_bps", "thresholds must be finite and non-negative"));
        }
        if let Some(iv) = self.min_renotify_interval_s {
            if !(iv >= 0.0) {
                return Err(sub_err("min_renotify_interval_s", "must be non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Below,
    Above,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QoSNotification {
    pub sub_id: String,
    pub issued_at_s: f64,
    pub predicted_crossing_at_s: f64,
    pub threshold_bps: f64,
    pub predicted_value_bps: f64,
    pub direction: Direction,
    pub spread_bps: f64,
}

/// Mutable evaluation state of one subscription, kept outside the
/// subscription itself so [`evaluate`] stays a pure function.
#[derive(Debug, Clone, PartialEq)]
pub struct SubEvalState {
    per_threshold: Vec<ThresholdEvalState>,
    /// Set once a one-shot subscription has fired.
    pub fired: bool,
}

#[derive(Debug, Clone, PartialEq)]
struct ThresholdEvalState {
    last_side: Direction,
    /// Emission clock shared by both directions: consecutive evaluations of
    /// overlapping horizons re-detect the same predicted transition, and a
    /// per-threshold clock keeps that from flapping into alternating
    /// above/below spam.
    last_notified_s: Option<f64>,
}

impl SubEvalState {
    pub fn new(sub: &Subscription) -> Self {
        Self {
            per_threshold: sub
                .thresholds_bps
                .iter()
                .map(|_| ThresholdEvalState { last_side: Direction::Above, last_notified_s: None })
                .collect(),
            fired: false,
        }
    }
}

fn side_of(value: f64, threshold: f64) -> Direction {
    if value < threshold {
        Direction::Below
    } else {
        Direction::Above
    }
}

/// Evaluate one subscription against a predicted series. Pure: returns the
/// notifications plus the successor state. Only series steps whose times fall
/// inside the subscription's time window participate; per threshold, the
/// earliest predicted crossing (an in-series side change, or a first step
/// already on the far side of the last notified state) yields at most one
/// notification, suppressed within `min_renotify_interval_s` per direction.
pub fn evaluate(
    sub: &Subscription,
    state: &SubEvalState,
    series: &PredictedSeries,
    location: &TodLocation,
    now_s: f64,
) -> (Vec<QoSNotification>, SubEvalState) {
    let mut next = state.clone();
    let mut out = Vec::new();

    if sub.mode == SubscriptionMode::OneShot && state.fired {
        return (out, next);
    }
    if !sub.area.contains(location) {
        return (out, next);
    }

    // Steps inside the subscription's time window, as (step index, value).
    let eligible: Vec<(usize, f64)> = (0..series.len())
        .filter(|&i| {
            let t = series.time_at(i);
            t >= sub.time_window.0 && t <= sub.time_window.1
        })
        .map(|i| (i, series.values_bps[i]))
        .collect();
    if eligible.is_empty() {
        return (out, next);
    }

    for (t_idx, &threshold) in sub.thresholds_bps.iter().enumerate() {
        let th_state = &mut next.per_threshold[t_idx];
        let mut crossing: Option<(usize, f64, Direction)> = None;
        let mut prev_side = th_state.last_side;
        for &(step, value) in &eligible {
            let side = side_of(value, threshold);
            if side != prev_side {
                crossing = Some((step, value, side));
                break;
            }
            prev_side = side;
        }

        let Some((step, value, direction)) = crossing else {
            continue;
        };
        // Suppressed detections still update the side, so a transition seen
        // across several overlapping horizons is reported once.
        th_state.last_side = direction;

        if let Some(prev) = th_state.last_notified_s {
            if now_s - prev < sub.min_renotify_interval_s {
                continue;
            }
        }
        th_state.last_notified_s = Some(now_s);
        out.push(QoSNotification {
            sub_id: sub.sub_id.clone(),
            issued_at_s: now_s,
            predicted_crossing_at_s: series.time_at(step),
            threshold_bps: threshold,
            predicted_value_bps: value,
            direction,
            spread_bps: series.spreads_bps.get(step).copied().unwrap_or(0.0),
        });
        if sub.mode == SubscriptionMode::OneShot {
            next.fired = true;
            break;
        }
    }
    (out, next)
}

/// Subscription registry plus evaluation engine. Client bookkeeping is an
/// opaque tag so transports can route notifications.
#[derive(Debug, Default)]
pub struct Registry {
    entries: Vec<RegistryEntry>,
    next_id: u64,
}

#[derive(Debug)]
pub struct RegistryEntry {
    pub sub: Subscription,
    pub state: SubEvalState,
    pub client: usize,
    pub request_id: Option<String>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Register a subscription; a repeated `client_request_id` returns the
    /// existing sub_id instead of creating a duplicate.
    pub fn subscribe(
        &mut self,
        req: &SubscribeRequest,
        client: usize,
    ) -> Result<String, SubscribeError> {
        req.validate()?;
        if let Some(rid) = &req.client_request_id {
            if let Some(existing) =
                self.entries.iter().find(|e| e.request_id.as_deref() == Some(rid))
            {
                return Ok(existing.sub.sub_id.clone());
            }
        }
        let sub_id = format!("sub-{:04}", self.next_id);
        self.next_id += 1;
        let sub = Subscription {
            sub_id: sub_id.clone(),
            area: req.area.clone(),
            time_window: req.time_window,
            thresholds_bps: req.thresholds_bps.clone(),
            mode: req.mode,
            min_renotify_interval_s: req
                .min_renotify_interval_s
                .unwrap_or(DEFAULT_RENOTIFY_INTERVAL_S),
        };
        let state = SubEvalState::new(&sub);
        self.entries.push(RegistryEntry {
            sub,
            state,
            client,
            request_id: req.client_request_id.clone(),
        });
        Ok(sub_id)
    }

    pub fn unsubscribe(&mut self, sub_id: &str) -> bool {
        let before = self.entries.len();
        self.entries.retain(|e| e.sub.sub_id != sub_id);
        self.entries.len() != before
    }

    /// Evaluate every active subscription in registration order and drop the
    /// ones that expired (one-shot fired, or time window passed).
    pub fn evaluate_all(
        &mut self,
        series: &PredictedSeries,
        location: &TodLocation,
        now_s: f64,
    ) -> Vec<(usize, QoSNotification)> {
        let mut out = Vec::new();
        for entry in &mut self.entries {
            let (notes, state) = evaluate(&entry.sub, &entry.state, series, location, now_s);
            entry.state = state;
            out.extend(notes.into_iter().map(|n| (entry.client, n)));
        }
        self.entries.retain(|e| {
            let expired = (e.sub.mode == SubscriptionMode::OneShot && e.state.fired)
                || now_s > e.sub.time_window.1;
            !expired
        });
        out
    }
}

/// Source of predictions for the service loop: returns the latest predicted
/// series and flow location for an evaluation instant. Only called while
/// subscriptions exist, keeping inference lazy.
pub trait SeriesProvider {
    fn predict(&mut self, now_s: f64) -> Option<(PredictedSeries, TodLocation)>;
}
