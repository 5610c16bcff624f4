//! ToD application model: uplink configuration ladder, safe-stop horizon
//! math, and adaptation decisions driven by predicted QoS.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::PredictedSeries;
use crate::sustain::QoSNotification;

#[derive(Debug, Error)]
pub enum TodAppError {
    #[error("horizon must be positive, got {0}")]
    NonPositiveHorizon(f64),
    #[error("invalid parameter {name}: {reason}")]
    BadParam { name: &'static str, reason: String },
}

/// Uplink perception configurations, ordered by required data rate. The
/// reduced tier is a continuum: `Reduced(r)` requires `r` bps with `r`
/// clamped to the ladder's reduced band; the camera/fps mapping behind it is
/// presentation metadata only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UplinkConfig {
    Full,
    Limited,
    Reduced(f64),
    Slim,
}

impl UplinkConfig {
    pub fn required_bps(&self, ladder: &UplinkConfigLadder) -> f64 {
        match self {
            UplinkConfig::Full => ladder.full_bps,
            UplinkConfig::Limited => ladder.limited_bps,
            UplinkConfig::Reduced(r) => r.clamp(ladder.reduced_min_bps, ladder.reduced_max_bps),
            UplinkConfig::Slim => ladder.slim_bps,
        }
    }

    pub fn label(&self) -> String {
        match self {
            UplinkConfig::Full => "full".into(),
            UplinkConfig::Limited => "limited".into(),
            UplinkConfig::Reduced(r) => format!("reduced({:.1}Mbps)", r / 1e6),
            UplinkConfig::Slim => "slim".into(),
        }
    }
}

/// Required uplink rates per configuration tier; every tier carries the same
/// 40 ms latency budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UplinkConfigLadder {
    pub full_bps: f64,
    pub limited_bps: f64,
    pub reduced_min_bps: f64,
    pub reduced_max_bps: f64,
    pub slim_bps: f64,
    pub latency_budget_ms: f64,
}

impl Default for UplinkConfigLadder {
    fn default() -> Self {
        Self {
            full_bps: 32.0e6,
            limited_bps: 20.0e6,
            reduced_min_bps: 3.0e6,
            reduced_max_bps: 20.0e6,
            slim_bps: 1.0e6,
            latency_budget_ms: 40.0,
        }
    }
}

impl UplinkConfigLadder {
    pub fn validate(&self) -> Result<(), TodAppError> {
        let ok = self.full_bps > self.limited_bps
            && self.limited_bps >= self.reduced_max_bps
            && self.reduced_max_bps >= self.reduced_min_bps
            && self.reduced_min_bps >= self.slim_bps
            && self.slim_bps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(TodAppError::BadParam {
                name: "ladder",
                reason: "required rates must be ordered full > limited >= reduced >= slim > 0"
                    .into(),
            })
        }
    }
}

/// Downlink control path: direct actuator control needs the tight latency
/// bound, indirect (trajectory-level) control tolerates the loose one. Both
/// run at 500 kbps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownlinkMode {
    Direct,
    Indirect,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DownlinkConfig {
    pub mode: DownlinkMode,
}

impl DownlinkConfig {
    pub fn rate_bps(&self) -> f64 {
        0.5e6
    }

    pub fn latency_bound_ms(&self) -> f64 {
        match self.mode {
            DownlinkMode::Direct => 40.0,
            DownlinkMode::Indirect => 80.0,
        }
    }

    /// Pick the control path from a measured DL latency: direct only when
    /// the tight bound holds.
    pub fn for_measured_latency(latency_ms: f64) -> Self {
        let mode = if latency_ms <= 40.0 { DownlinkMode::Direct } else { DownlinkMode::Indirect };
        Self { mode }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SafeStopParams {
    /// Comfortable deceleration ceiling, m/s^2.
    pub a_desired_max: f64,
    /// Emergency deceleration ceiling, m/s^2.
    pub a_emergency: f64,
}

impl Default for SafeStopParams {
    fn default() -> Self {
        Self { a_desired_max: 4.0, a_emergency: 10.0 }
    }
}

impl SafeStopParams {
    pub fn validate(&self) -> Result<(), TodAppError> {
        if self.a_desired_max > 0.0 && self.a_desired_max < self.a_emergency {
            Ok(())
        } else {
            Err(TodAppError::BadParam {
                name: "safe_stop",
                reason: "need 0 < a_desired_max < a_emergency".into(),
            })
        }
    }
}

/// Minimum prediction horizon that still allows a safe stop at the desired
/// deceleration: `v / a_desired_max`. Strictly increasing in speed, strictly
/// decreasing in the deceleration ceiling.
pub fn min_horizon(speed_mps: f64, params: &SafeStopParams) -> f64 {
    speed_mps.max(0.0) / params.a_desired_max
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecelBand {
    Desired,
    Undesired,
    Infeasible,
}

/// Deceleration needed to stop within `horizon_s`, with its comfort band.
pub fn required_decel(
    speed_mps: f64,
    horizon_s: f64,
    params: &SafeStopParams,
) -> Result<(f64, DecelBand), TodAppError> {
    if !(horizon_s > 0.0) {
        return Err(TodAppError::NonPositiveHorizon(horizon_s));
    }
    let decel = speed_mps.max(0.0) / horizon_s;
    let band = if decel <= params.a_desired_max {
        DecelBand::Desired
    } else if decel <= params.a_emergency {
        DecelBand::Undesired
    } else {
        DecelBand::Infeasible
    };
    Ok((decel, band))
}

/// Outcome of configuration selection: a sustainable config, or the signal
/// that even the slim tier cannot be sustained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelectedConfig {
    Config(UplinkConfig),
    SafeStopSignal,
}

/// Highest-requirement configuration whose required rate times the margin
/// fits under the predicted minimum. An empty series is treated as zero
/// predicted capacity.
pub fn select_uplink_config(
    series: &PredictedSeries,
    ladder: &UplinkConfigLadder,
    margin: f64,
) -> SelectedConfig {
    let min = if series.is_empty() { 0.0 } else { series.min_value() };
    select_for_min(min, ladder, margin)
}

fn select_for_min(min_bps: f64, ladder: &UplinkConfigLadder, margin: f64) -> SelectedConfig {
    debug_assert!(margin >= 1.0);
    if ladder.full_bps * margin <= min_bps {
        SelectedConfig::Config(UplinkConfig::Full)
    } else if ladder.limited_bps * margin <= min_bps {
        SelectedConfig::Config(UplinkConfig::Limited)
    } else if ladder.reduced_min_bps * margin <= min_bps {
        let r = (min_bps / margin).clamp(ladder.reduced_min_bps, ladder.reduced_max_bps);
        SelectedConfig::Config(UplinkConfig::Reduced(r))
    } else if ladder.slim_bps * margin <= min_bps {
        SelectedConfig::Config(UplinkConfig::Slim)
    } else {
        SelectedConfig::SafeStopSignal
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "action")]
pub enum AdaptationAction {
    Keep,
    SwitchConfig { target: UplinkConfig },
    ReduceSpeed { v_new_mps: f64 },
    SafeStop { decel_mps2: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationDecision {
    pub action: AdaptationAction,
    pub reason: String,
    pub effective_at_s: f64,
}

/// Application state threaded through successive decisions.
#[derive(Debug, Clone, PartialEq)]
pub struct AppState {
    pub speed_mps: f64,
    pub config: UplinkConfig,
    /// Since when the predictions have continuously supported an upgrade.
    pub headroom_since_s: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptationParams {
    pub ladder: UplinkConfigLadder,
    /// Capacity margin required over a config's rate (>= 1).
    pub margin: f64,
    /// Sustained headroom needed before an upgrade, seconds.
    pub hold_time_s: f64,
    pub safe_stop: SafeStopParams,
    /// Reduced-tier retune deadband, bps: smaller requirement changes keep
    /// the current tier instead of churning.
    pub reduced_deadband_bps: f64,
}

impl Default for AdaptationParams {
    fn default() -> Self {
        Self {
            ladder: UplinkConfigLadder::default(),
            margin: 1.1,
            hold_time_s: 3.0,
            safe_stop: SafeStopParams::default(),
            reduced_deadband_bps: 2.5e5,
        }
    }
}

/// Input driving one decision: a full predicted series, or a single
/// sustainability notification (its predicted value at the crossing and the
/// remaining lead time stand in for the series minimum and coverage).
#[derive(Debug, Clone, Copy)]
pub enum AdaptationInput<'a> {
    Series(&'a PredictedSeries),
    Notification(&'a QoSNotification),
}

/// Decide the next adaptation: downgrade immediately when the predicted
/// minimum no longer sustains the current config, upgrade only after
/// `hold_time_s` of sustained headroom, and when even the slim tier fails
/// either stop within the remaining prediction coverage (if it still allows
/// the desired deceleration) or shed speed until it does.
///
/// Pure: returns the decision plus the successor state.
pub fn decide(
    state: &AppState,
    input: AdaptationInput<'_>,
    params: &AdaptationParams,
    now_s: f64,
) -> (AdaptationDecision, AppState) {
    let (min_bps, coverage_s) = match input {
        AdaptationInput::Series(series) => {
            let cov = series.len() as f64 * series.step_s;
            (if series.is_empty() { 0.0 } else { series.min_value() }, cov)
        }
        AdaptationInput::Notification(n) => {
            (n.predicted_value_bps, (n.predicted_crossing_at_s - now_s).max(0.0))
        }
    };

    let mut next = state.clone();
    let decision = |action: AdaptationAction, reason: String| AdaptationDecision {
        action,
        reason,
        effective_at_s: now_s,
    };

    match select_for_min(min_bps, &params.ladder, params.margin) {
        SelectedConfig::SafeStopSignal => {
            next.headroom_since_s = None;
            let needed = min_horizon(state.speed_mps, &params.safe_stop);
            if needed <= coverage_s && coverage_s > 0.0 {
                let (decel, band) =
                    required_decel(state.speed_mps, coverage_s, &params.safe_stop)
                        .expect("coverage positive");
                debug_assert!(band == DecelBand::Desired);
                (
                    decision(
                        AdaptationAction::SafeStop { decel_mps2: decel },
                        format!(
                            "predicted min {:.2} Mbps below slim tier; stopping within {:.1} s coverage",
                            min_bps / 1e6,
                            coverage_s
                        ),
                    ),
                    next,
                )
            } else {
                // Not enough predicted coverage to stop comfortably from this
                // speed: shed speed to the value whose stop fits coverage.
                let v_new = params.safe_stop.a_desired_max * coverage_s;
                (
                    decision(
                        AdaptationAction::ReduceSpeed { v_new_mps: v_new },
                        format!(
                            "coverage {:.1} s shorter than safe-stop horizon {:.1} s",
                            coverage_s, needed
                        ),
                    ),
                    next,
                )
            }
        }
        SelectedConfig::Config(target) => {
            let cur_req = state.config.required_bps(&params.ladder);
            let tgt_req = target.required_bps(&params.ladder);
            let both_reduced = matches!(
                (state.config, target),
                (UplinkConfig::Reduced(_), UplinkConfig::Reduced(_))
            );
            if tgt_req == cur_req
                || (both_reduced && (tgt_req - cur_req).abs() <= params.reduced_deadband_bps)
            {
                next.headroom_since_s = None;
                (decision(AdaptationAction::Keep, "predicted capacity fits current config".into()), next)
            } else if tgt_req < cur_req {
                // Downgrades take effect immediately.
                next.headroom_since_s = None;
                next.config = target;
                (
                    decision(
                        AdaptationAction::SwitchConfig { target },
                        format!(
                            "predicted min {:.2} Mbps cannot sustain {}",
                            min_bps / 1e6,
                            state.config.label()
                        ),
                    ),
                    next,
                )
            } else {
                // Upgrade only after sustained headroom.
                let since = state.headroom_since_s.unwrap_or(now_s);
                next.headroom_since_s = Some(since);
                if now_s - since >= params.hold_time_s {
                    next.config = target;
                    next.headroom_since_s = None;
                    (
                        decision(
                            AdaptationAction::SwitchConfig { target },
                            format!("headroom sustained {:.1} s", now_s - since),
                        ),
                        next,
                    )
                } else {
                    (
                        decision(
                            AdaptationAction::Keep,
                            format!("upgrade headroom held {:.1} s, waiting", now_s - since),
                        ),
                        next,
                    )
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tsforecast::InputMode;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn series(values_mbps: &[f64]) -> PredictedSeries {
        PredictedSeries {
            t0_s: 0.0,
            step_s: 1.0,
            values_bps: values_mbps.iter().map(|v| v * 1e6).collect(),
            spreads_bps: vec![0.0; values_mbps.len()],
            input_mode: InputMode::Perfect,
            model_id: "t".into(),
        }
    }

    #[test]
    fn min_horizon_values() {
        let p = SafeStopParams::default();
        assert_eq!(min_horizon(0.0, &p), 0.0);
        // 100 km/h at the desired 4 m/s^2 ceiling.
        let v = 100.0 / 3.6;
        assert_abs_diff_eq!(min_horizon(v, &p), v / 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(min_horizon(27.78, &p), 6.945, epsilon = 1e-9);
        // Monotonicity.
        assert!(min_horizon(20.0, &p) < min_horizon(25.0, &p));
        let relaxed = SafeStopParams { a_desired_max: 5.0, ..p };
        assert!(min_horizon(20.0, &relaxed) < min_horizon(20.0, &p));
    }

    #[test]
    fn required_decel_bands() {
        let p = SafeStopParams::default();
        let (d, band) = required_decel(13.89, 7.0, &p).unwrap();
        assert_abs_diff_eq!(d, 1.984285714285714, epsilon = 1e-12);
        assert_eq!(band, DecelBand::Desired);

        let (d, band) = required_decel(27.78, 2.0, &p).unwrap();
        assert_abs_diff_eq!(d, 13.89, epsilon = 1e-12);
        assert_eq!(band, DecelBand::Infeasible);

        let (d, band) = required_decel(27.78, 4.0, &p).unwrap();
        assert_abs_diff_eq!(d, 6.945, epsilon = 1e-12);
        assert_eq!(band, DecelBand::Undesired);

        assert!(required_decel(10.0, 0.0, &p).is_err());
    }

    #[test]
    fn horizon_and_decel_are_inverse() {
        let p = SafeStopParams::default();
        for i in 1..=100 {
            let v = i as f64 * 0.37;
            let h = min_horizon(v, &p);
            let (d, band) = required_decel(v, h, &p).unwrap();
            assert_abs_diff_eq!(d, p.a_desired_max, epsilon = 1e-9);
            assert_eq!(band, DecelBand::Desired);
        }
    }

    #[test]
    fn ladder_selection_examples() {
        let ladder = UplinkConfigLadder::default();
        ladder.validate().unwrap();
        assert_eq!(
            select_uplink_config(&series(&[22.0, 25.0]), &ladder, 1.0),
            SelectedConfig::Config(UplinkConfig::Limited)
        );
        assert_eq!(
            select_uplink_config(&series(&[40.0, 44.0]), &ladder, 1.0),
            SelectedConfig::Config(UplinkConfig::Full)
        );
        assert_eq!(
            select_uplink_config(&series(&[0.8]), &ladder, 1.0),
            SelectedConfig::SafeStopSignal
        );
        match select_uplink_config(&series(&[12.0]), &ladder, 1.0) {
            SelectedConfig::Config(UplinkConfig::Reduced(r)) => {
                assert_abs_diff_eq!(r, 12.0e6, epsilon = 1e-6)
            }
            other => panic!("expected reduced tier, got {other:?}"),
        }
        // Between slim and the reduced floor.
        assert_eq!(
            select_uplink_config(&series(&[2.0]), &ladder, 1.0),
            SelectedConfig::Config(UplinkConfig::Slim)
        );
    }

    #[test]
    fn downgrade_is_immediate_upgrade_waits() {
        let params = AdaptationParams::default();
        let state = AppState {
            speed_mps: 13.89,
            config: UplinkConfig::Limited,
            headroom_since_s: None,
        };

        // Sustained 40 Mbps: upgrade to full only after hold_time.
        let rich = series(&[40.0; 7]);
        let (d0, s0) = decide(&state, AdaptationInput::Series(&rich), &params, 0.0);
        assert_eq!(d0.action, AdaptationAction::Keep);
        assert_eq!(s0.headroom_since_s, Some(0.0));
        let (d1, s1) = decide(&s0, AdaptationInput::Series(&rich), &params, 1.0);
        assert_eq!(d1.action, AdaptationAction::Keep);
        let (d3, s3) = decide(&s1, AdaptationInput::Series(&rich), &params, 3.0);
        assert_eq!(d3.action, AdaptationAction::SwitchConfig { target: UplinkConfig::Full });
        assert_eq!(s3.config, UplinkConfig::Full);

        // 12 Mbps predicted: immediate downgrade to reduced(12/margin).
        let poor = series(&[12.0; 7]);
        let (d, s) = decide(&state, AdaptationInput::Series(&poor), &params, 0.0);
        match d.action {
            AdaptationAction::SwitchConfig { target: UplinkConfig::Reduced(r) } => {
                assert_abs_diff_eq!(r, 12.0e6 / params.margin, epsilon = 1.0);
            }
            other => panic!("expected immediate downgrade, got {other:?}"),
        }
        assert!(matches!(s.config, UplinkConfig::Reduced(_)));
    }

    #[test]
    fn headroom_resets_when_capacity_drops() {
        let params = AdaptationParams::default();
        let state = AppState {
            speed_mps: 10.0,
            config: UplinkConfig::Limited,
            headroom_since_s: Some(0.0),
        };
        let flat = series(&[22.0; 7]); // fits limited, no upgrade headroom
        let (d, s) = decide(&state, AdaptationInput::Series(&flat), &params, 2.0);
        assert_eq!(d.action, AdaptationAction::Keep);
        assert_eq!(s.headroom_since_s, None);
    }

    #[test]
    fn safe_stop_with_enough_coverage() {
        let params = AdaptationParams::default();
        let state =
            AppState { speed_mps: 13.89, config: UplinkConfig::Slim, headroom_since_s: None };
        let dead = series(&[0.5; 7]); // 7 s coverage
        let (d, _) = decide(&state, AdaptationInput::Series(&dead), &params, 0.0);
        match d.action {
            AdaptationAction::SafeStop { decel_mps2 } => {
                assert_abs_diff_eq!(decel_mps2, 13.89 / 7.0, epsilon = 1e-12);
                assert!(decel_mps2 <= params.safe_stop.a_desired_max);
            }
            other => panic!("expected safe stop, got {other:?}"),
        }
    }

    #[test]
    fn short_coverage_sheds_speed_first() {
        let params = AdaptationParams::default();
        let state =
            AppState { speed_mps: 27.78, config: UplinkConfig::Slim, headroom_since_s: None };
        let dead = series(&[0.5; 3]); // 3 s coverage < 6.9 s needed
        let (d, _) = decide(&state, AdaptationInput::Series(&dead), &params, 0.0);
        match d.action {
            AdaptationAction::ReduceSpeed { v_new_mps } => {
                assert_abs_diff_eq!(v_new_mps, 4.0 * 3.0, epsilon = 1e-12);
                assert!(v_new_mps < state.speed_mps);
            }
            other => panic!("expected speed reduction, got {other:?}"),
        }
    }

    #[test]
    fn notification_input_drives_safe_stop() {
        let params = AdaptationParams::default();
        let state =
            AppState { speed_mps: 13.89, config: UplinkConfig::Limited, headroom_since_s: None };
        let note = QoSNotification {
            sub_id: "sub-0000".into(),
            issued_at_s: 10.0,
            predicted_crossing_at_s: 17.0,
            threshold_bps: 1.0e6,
            predicted_value_bps: 0.5e6,
            direction: crate::sustain::Direction::Below,
            spread_bps: 0.1e6,
        };
        let (d, _) = decide(&state, AdaptationInput::Notification(&note), &params, 10.0);
        match d.action {
            AdaptationAction::SafeStop { decel_mps2 } => {
                assert_abs_diff_eq!(decel_mps2, 13.89 / 7.0, epsilon = 1e-9);
            }
            other => panic!("expected safe stop, got {other:?}"),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Selection is monotone: a pointwise-larger series never yields a
        /// lower-requirement config, and the chosen config always satisfies
        /// its margin constraint.
        #[test]
        fn selection_monotone_and_sufficient(
            base in prop::collection::vec(0.0f64..5e7, 1..10),
            bump in 0.0f64..2e7,
            margin in 1.0f64..1.5,
        ) {
            let ladder = UplinkConfigLadder::default();
            let lo = series(&base.iter().map(|v| v / 1e6).collect::<Vec<_>>());
            let hi_vals: Vec<f64> = base.iter().map(|v| (v + bump) / 1e6).collect();
            let hi = series(&hi_vals);
            let req = |sel: &SelectedConfig| match sel {
                SelectedConfig::SafeStopSignal => -1.0,
                SelectedConfig::Config(c) => c.required_bps(&ladder),
            };
            let sel_lo = select_uplink_config(&lo, &ladder, margin);
            let sel_hi = select_uplink_config(&hi, &ladder, margin);
            prop_assert!(req(&sel_hi) >= req(&sel_lo) - 1e-9);
            if let SelectedConfig::Config(c) = sel_lo {
                prop_assert!(c.required_bps(&ladder) * margin <= lo.min_value() + 1e-6);
            }
        }

        /// Safe-stop decisions never exceed the emergency ceiling, and with
        /// coverage at or beyond the minimum horizon they stay in the
        /// desired band.
        #[test]
        fn safe_stop_bands(speed in 0.0f64..40.0, coverage in 0.5f64..10.0) {
            let params = AdaptationParams::default();
            let state = AppState { speed_mps: speed, config: UplinkConfig::Slim, headroom_since_s: None };
            let n = coverage.ceil() as usize;
            let mut vals = vec![0.2; n];
            if let Some(last) = vals.last_mut() { *last = 0.2; }
            let mut s = series(&vals);
            s.step_s = coverage / n as f64;
            let (d, _) = decide(&state, AdaptationInput::Series(&s), &params, 0.0);
            match d.action {
                AdaptationAction::SafeStop { decel_mps2 } => {
                    prop_assert!(decel_mps2 <= params.safe_stop.a_emergency + 1e-9);
                    prop_assert!(decel_mps2 <= params.safe_stop.a_desired_max + 1e-9);
                }
                AdaptationAction::ReduceSpeed { v_new_mps } => {
                    prop_assert!(v_new_mps < speed);
                }
                other => prop_assert!(false, "unexpected action {:?}", other),
            }
        }
    }
}
