//! Link-level radio model: dual-exponent log-distance path loss, parabolic
//! sector antenna pattern, and the spectral-efficiency rate map.

use super::grid::Position;
use super::ScenarioConfig;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Sector antenna: parabolic main lobe, 70 degree half-power beamwidth,
/// 20 dB front-to-back ratio, 14 dBi peak.
pub const ANTENNA_PEAK_GAIN_DBI: f64 = 14.0;
pub const ANTENNA_HPBW_DEG: f64 = 70.0;
pub const ANTENNA_FRONT_TO_BACK_DB: f64 = 20.0;

/// Rate map: spectral efficiency capped at 4.8 bit/s/Hz, 10% overhead.
pub const SE_CAP_BITS_PER_HZ: f64 = 4.8;
pub const OVERHEAD_FACTOR: f64 = 0.9;

/// Strongest-power re-association hysteresis.
pub const HANDOVER_HYSTERESIS_DB: f64 = 3.0;

/// Isolation between jointly received sectors of one site: co-site uplink
/// leakage is attenuated by this amount instead of being cancelled outright.
pub const COSITE_ISOLATION_DB: f64 = 22.0;

/// Macro site antenna height. Base-station links use the 3D distance, so a
/// vehicle driving through a site intersection stays at least this far from
/// the antenna instead of collapsing onto it.
pub const BS_ANTENNA_HEIGHT_M: f64 = 25.0;

/// Free-space path loss at the 1 m reference distance for a carrier in MHz.
pub fn free_space_pl0_db(carrier_freq_mhz: f64) -> f64 {
    let f_hz = carrier_freq_mhz * 1e6;
    20.0 * (4.0 * std::f64::consts::PI * f_hz / SPEED_OF_LIGHT).log10()
}

fn path_loss_at_distance_db(d: f64, los: bool, config: &ScenarioConfig) -> f64 {
    let d = d.max(1.0);
    let n = if los { config.pl_exp_los } else { config.pl_exp_nlos };
    free_space_pl0_db(config.carrier_freq) + 10.0 * n * d.log10()
}

/// Dual-exponent log-distance path loss in dB over ground distance.
/// Distances below 1 m clamp to the reference distance.
pub fn path_loss_db(tx: &Position, rx: &Position, los: bool, config: &ScenarioConfig) -> f64 {
    path_loss_at_distance_db(tx.distance(rx), los, config)
}

/// Path loss of a vehicle-to-base-station link: same model over the 3D
/// distance to the elevated antenna.
pub fn bs_link_path_loss_db(
    vehicle: &Position,
    site: &Position,
    los: bool,
    config: &ScenarioConfig,
) -> f64 {
    let ground = vehicle.distance(site);
    let d3 = (ground * ground + BS_ANTENNA_HEIGHT_M * BS_ANTENNA_HEIGHT_M).sqrt();
    path_loss_at_distance_db(d3, los, config)
}

/// Sector gain toward a bearing, in dBi. `delta` is the angle off boresight.
pub fn sector_gain_db(boresight_deg: f64, bearing_deg: f64) -> f64 {
    let mut delta = (bearing_deg - boresight_deg) % 360.0;
    if delta > 180.0 {
        delta -= 360.0;
    } else if delta < -180.0 {
        delta += 360.0;
    }
    let attenuation = (12.0 * (delta / ANTENNA_HPBW_DEG).powi(2)).min(ANTENNA_FRONT_TO_BACK_DB);
    ANTENNA_PEAK_GAIN_DBI - attenuation
}

/// Spectral efficiency for a linear SINR, before the overhead factor.
pub fn spectral_efficiency(sinr_linear: f64) -> f64 {
    (1.0 + sinr_linear).log2().min(SE_CAP_BITS_PER_HZ)
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(linear: f64) -> f64 {
    10.0 * linear.log10()
}
