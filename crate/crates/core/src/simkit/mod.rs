//! Deterministic discrete-event simulator of a multi-cell uplink scenario:
//! one tele-operated (ToD) vehicle streaming constant-bit-rate video plus a
//! configurable background population of non-ToD (NToD) uplink users on a
//! Manhattan road grid, served by tri-sector macro sites with per-sector
//! round-robin scheduling.
//!
//! A run advances in scheduler ticks grouped into sample windows. The channel
//! (path loss, sector gain, log-normal shadowing) is refreshed once per
//! window from window-start positions; scheduling, interference and backlog
//! draining happen every tick. Each completed window emits one
//! [`TraceWindow`] row.

mod grid;
mod radio;
mod scheduler;
mod trace;

pub use grid::{MotionState, Position, RoadGrid, CORRIDOR_TOL_M};
pub use radio::{
    bs_link_path_loss_db, db_to_linear, free_space_pl0_db, linear_to_db, path_loss_db,
    sector_gain_db, spectral_efficiency, ANTENNA_PEAK_GAIN_DBI, BS_ANTENNA_HEIGHT_M,
    COSITE_ISOLATION_DB, HANDOVER_HYSTERESIS_DB, OVERHEAD_FACTOR, SE_CAP_BITS_PER_HZ,
};
pub use scheduler::{schedule_uplink, PrbAllocation};
pub use trace::{TraceError, TraceLog, TraceManifest, TraceWindow};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
#[error("invalid config field `{field}`: {reason}")]
pub struct ConfigError {
    pub field: &'static str,
    pub reason: String,
}

fn cfg_err(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError { field, reason: reason.into() }
}

/// Scenario description. Deserializes from a JSON object with these exact
/// snake_case field names; omitted fields take the defaults below.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Road grid blocks per side.
    pub grid_blocks: u32,
    /// Block edge length in meters.
    pub block_size: f64,
    pub num_sites: u32,
    pub sectors_per_site: u32,
    /// Nominal inter-site distance in meters; sites are snapped to grid
    /// intersections scattered over distinct rows and columns, so realized
    /// pairwise spacings approximate this value.
    pub isd: f64,
    /// Carrier frequency in MHz.
    pub carrier_freq: f64,
    /// System bandwidth in MHz.
    pub bandwidth: f64,
    pub num_prbs: u32,
    /// UE transmit power in dBm, spread uniformly over the full PRB grid
    /// (constant transmit PSD, no power control).
    pub ue_tx_power: f64,
    /// Receiver noise figure in dB.
    pub noise_figure: f64,
    /// Scheduler tick in seconds.
    pub scheduler_tick: f64,
    /// Trace sample window in seconds; must be an integer multiple of the
    /// scheduler tick.
    pub sample_window: f64,
    /// Run length in seconds; rounds down to whole sample windows.
    pub duration: f64,
    pub seed: u64,
    /// Background (non-ToD) vehicle count.
    pub n_ntod: u32,
    /// ToD constant-bit-rate uplink offer in bits/s.
    pub tod_offered_rate: f64,
    /// Mean NToD packet inter-arrival time in seconds (before the load
    /// multiplier).
    pub ntod_mean_interarrival: f64,
    /// NToD packet size in bytes.
    pub ntod_packet_size: u32,
    /// Scales every NToD arrival rate; the knob that maps vehicle counts to
    /// desk-scale congestion.
    pub ntod_load_multiplier: f64,
    /// Mean vehicle speed in m/s; per-vehicle speeds draw from
    /// N(mean, 10% of mean).
    pub mean_speed: f64,
    /// LOS path-loss exponent.
    pub pl_exp_los: f64,
    /// NLOS path-loss exponent.
    pub pl_exp_nlos: f64,
    /// Log-normal shadowing standard deviation in dB, redrawn per link per
    /// sample window.
    pub shadowing_sigma_db: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            grid_blocks: 2,
            block_size: 250.0,
            num_sites: 3,
            sectors_per_site: 3,
            isd: 500.0,
            carrier_freq: 2160.0,
            bandwidth: 20.0,
            num_prbs: 100,
            ue_tx_power: 23.0,
            noise_figure: 5.0,
            scheduler_tick: 0.01,
            sample_window: 0.1,
            duration: 600.0,
            seed: 1,
            n_ntod: 0,
            tod_offered_rate: 2.0e7,
            ntod_mean_interarrival: 1.0,
            ntod_packet_size: 1012,
            ntod_load_multiplier: 1.0,
            mean_speed: 13.9,
            pl_exp_los: 2.2,
            pl_exp_nlos: 3.8,
            shadowing_sigma_db: 4.0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.grid_blocks < 1 {
            return Err(cfg_err("grid_blocks", "must be at least 1"));
        }
        if !(self.block_size > 0.0) {
            return Err(cfg_err("block_size", "must be strictly positive"));
        }
        if self.num_sites < 1 {
            return Err(cfg_err("num_sites", "must be at least 1"));
        }
        if self.sectors_per_site < 1 {
            return Err(cfg_err("sectors_per_site", "must be at least 1"));
        }
        if !(self.isd > 0.0) {
            return Err(cfg_err("isd", "must be strictly positive"));
        }
        if !(self.carrier_freq > 0.0) {
            return Err(cfg_err("carrier_freq", "must be strictly positive"));
        }
        if !(self.bandwidth > 0.0) {
            return Err(cfg_err("bandwidth", "must be strictly positive"));
        }
        if self.num_prbs < 1 {
            return Err(cfg_err("num_prbs", "must be at least 1"));
        }
        if !self.ue_tx_power.is_finite() {
            return Err(cfg_err("ue_tx_power", "must be finite"));
        }
        if !self.noise_figure.is_finite() || self.noise_figure < 0.0 {
            return Err(cfg_err("noise_figure", "must be finite and non-negative"));
        }
        if !(self.scheduler_tick > 0.0) {
            return Err(cfg_err("scheduler_tick", "must be strictly positive"));
        }
        if !(self.sample_window > 0.0) {
            return Err(cfg_err("sample_window", "must be strictly positive"));
        }
        let ratio = self.sample_window / self.scheduler_tick;
        if (ratio - ratio.round()).abs() > 1e-6 || ratio.round() < 1.0 {
            return Err(cfg_err(
                "sample_window",
                "must be an integer multiple of scheduler_tick",
            ));
        }
        if !(self.duration > 0.0) {
            return Err(cfg_err("duration", "must be strictly positive"));
        }
        if !(self.tod_offered_rate >= 0.0) {
            return Err(cfg_err("tod_offered_rate", "must be non-negative"));
        }
        if !(self.ntod_mean_interarrival > 0.0) {
            return Err(cfg_err("ntod_mean_interarrival", "must be strictly positive"));
        }
        if self.ntod_packet_size < 1 {
            return Err(cfg_err("ntod_packet_size", "must be at least 1 byte"));
        }
        if !(self.ntod_load_multiplier > 0.0) {
            return Err(cfg_err("ntod_load_multiplier", "must be strictly positive"));
        }
        if !(self.mean_speed > 0.0) {
            return Err(cfg_err("mean_speed", "must be strictly positive"));
        }
        if !(self.pl_exp_los > 0.0) {
            return Err(cfg_err("pl_exp_los", "must be strictly positive"));
        }
        if !(self.pl_exp_nlos > 0.0) {
            return Err(cfg_err("pl_exp_nlos", "must be strictly positive"));
        }
        if !(self.shadowing_sigma_db >= 0.0) {
            return Err(cfg_err("shadowing_sigma_db", "must be non-negative"));
        }
        Ok(())
    }

    pub fn num_cells(&self) -> usize {
        (self.num_sites * self.sectors_per_site) as usize
    }

    pub fn bandwidth_hz(&self) -> f64 {
        self.bandwidth * 1e6
    }

    pub fn prb_bandwidth_hz(&self) -> f64 {
        self.bandwidth_hz() / self.num_prbs as f64
    }

    /// Thermal noise over one PRB plus noise figure, dBm.
    pub fn noise_per_prb_dbm(&self) -> f64 {
        -174.0 + 10.0 * self.prb_bandwidth_hz().log10() + self.noise_figure
    }

    /// Thermal noise over the full system bandwidth plus noise figure, dBm.
    pub fn noise_floor_dbm(&self) -> f64 {
        -174.0 + 10.0 * self.bandwidth_hz().log10() + self.noise_figure
    }

    /// Per-PRB transmit power under the constant-PSD assumption, dBm.
    pub fn tx_psd_dbm_per_prb(&self) -> f64 {
        self.ue_tx_power - 10.0 * (self.num_prbs as f64).log10()
    }

    pub fn ticks_per_window(&self) -> u64 {
        (self.sample_window / self.scheduler_tick).round() as u64
    }

    pub fn num_windows(&self) -> u64 {
        (self.duration / self.sample_window + 1e-9).floor() as u64
    }

    /// Hash of the canonical JSON serialization, hex-encoded.
    pub fn sha256(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn default_scenario_id(&self) -> String {
        format!("n{:03}_s{}", self.n_ntod, self.seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VehicleKind {
    Tod,
    Ntod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub cell_id: u32,
    pub site_id: u32,
    pub sector_index: u32,
    pub position: Position,
    pub boresight_azimuth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Vehicle {
    pub vehicle_id: u32,
    pub kind: VehicleKind,
    pub position: Position,
    pub speed: f64,
    pub heading: f64,
    pub serving_cell: u32,
    pub backlog_bits: f64,
}

/// Scripted mid-run load change, applied at the first window boundary at or
/// after `t_s`: spawns extra NToD vehicles and/or rescales the arrival-rate
/// multiplier.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LoadEvent {
    pub t_s: f64,
    pub spawn_ntod: u32,
    pub multiplier_scale: f64,
}

#[derive(Debug, Clone)]
struct WindowSnapshot {
    t_s: f64,
    pos_x_m: f64,
    pos_y_m: f64,
    serving_cell: u32,
    counts: Vec<u32>,
    ntod_dist_recip: f64,
}

/// A built simulation world. Advance it with [`Scenario::step`]; completed
/// sample windows accumulate and are drained by [`Scenario::take_windows`].
/// Cloning forks the world including its RNG state: a clone stepped forward
/// previews exactly the future the original will take.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub grid: RoadGrid,
    pub cells: Vec<Cell>,
    vehicles: Vec<Vehicle>,
    mob: Vec<MotionState>,
    served_bits_total: Vec<f64>,
    offered_bits_total: Vec<f64>,
    rng_mobility: ChaCha12Rng,
    rng_traffic: ChaCha12Rng,
    rng_channel: ChaCha12Rng,
    tick_index: u64,
    rr_cursor: Vec<u64>,
    gain_db: Vec<f64>,
    gain_lin: Vec<f64>,
    gain_geo_db: Vec<f64>,
    attached: Vec<Vec<u32>>,
    load_multiplier: f64,
    schedule: Vec<LoadEvent>,
    next_event: usize,
    win_tod_bits: f64,
    win_ntod_arrived_bits: Vec<f64>,
    win_tod_sinr_lin_sum: f64,
    win_tod_prb_samples: u64,
    snapshot: Option<WindowSnapshot>,
    completed: Vec<TraceWindow>,
    interference: Vec<f64>,
    backlogged_scratch: Vec<u32>,
}

fn sub_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Build the simulation world: sites on scattered grid intersections with
/// three sectors each, `n_ntod + 1` vehicles placed on the roads, every
/// vehicle associated to its strongest-received-power cell.
pub fn build_scenario(config: &ScenarioConfig) -> Result<Scenario, ConfigError> {
    Scenario::build(config, Vec::new())
}

/// Build with scripted mid-run load events.
pub fn build_scenario_with_schedule(
    config: &ScenarioConfig,
    schedule: &[LoadEvent],
) -> Result<Scenario, ConfigError> {
    Scenario::build(config, schedule.to_vec())
}

/// Cell topology for a config without building the full world. Sites sit on
/// intersections spread over distinct rows and columns so that on the
/// default 2x2 grid every street has line of sight to one site; pairwise
/// site spacings approximate the configured ISD.
pub fn layout_cells(config: &ScenarioConfig) -> Vec<Cell> {
    let grid = RoadGrid { blocks: config.grid_blocks, block_size: config.block_size };
    let streets = grid.num_streets();
    let mut cells = Vec::with_capacity(config.num_cells());
    for site in 0..config.num_sites {
        let col = (site * streets) / config.num_sites;
        let row = ((2 * site * streets) / config.num_sites) % streets;
        let pos = Position::new(grid.street_coord(col), grid.street_coord(row));
        for sector in 0..config.sectors_per_site {
            cells.push(Cell {
                cell_id: site * config.sectors_per_site + sector,
                site_id: site,
                sector_index: sector,
                position: pos,
                boresight_azimuth: sector as f64 * 360.0 / config.sectors_per_site as f64,
            });
        }
    }
    cells
}

impl Scenario {
    fn build(config: &ScenarioConfig, mut schedule: Vec<LoadEvent>) -> Result<Self, ConfigError> {
        config.validate()?;
        let grid = RoadGrid { blocks: config.grid_blocks, block_size: config.block_size };
        let cells = layout_cells(config);

        let mut rng_mobility = sub_rng(config.seed, 0);
        let rng_traffic = sub_rng(config.seed, 1);
        let rng_channel = sub_rng(config.seed, 2);

        let n = config.n_ntod as usize + 1;
        let mut vehicles = Vec::with_capacity(n);
        let mut mob = Vec::with_capacity(n);
        let speed_dist = Normal::new(config.mean_speed, 0.1 * config.mean_speed)
            .map_err(|e| cfg_err("mean_speed", e.to_string()))?;
        for id in 0..n as u32 {
            let kind = if id == 0 { VehicleKind::Tod } else { VehicleKind::Ntod };
            let speed = speed_dist
                .sample(&mut rng_mobility)
                .clamp(0.3 * config.mean_speed, 2.0 * config.mean_speed);
            let m = MotionState::random(&grid, speed, &mut rng_mobility);
            vehicles.push(Vehicle {
                vehicle_id: id,
                kind,
                position: m.position(&grid),
                speed,
                heading: m.heading_deg(),
                serving_cell: 0,
                backlog_bits: 0.0,
            });
            mob.push(m);
        }

        schedule.sort_by(|a, b| a.t_s.total_cmp(&b.t_s));
        let num_cells = cells.len();
        let num_prbs = config.num_prbs as usize;
        let mut scenario = Scenario {
            config: config.clone(),
            grid,
            cells,
            vehicles,
            mob,
            served_bits_total: vec![0.0; n],
            offered_bits_total: vec![0.0; n],
            rng_mobility,
            rng_traffic,
            rng_channel,
            tick_index: 0,
            rr_cursor: vec![0; num_cells],
            gain_db: vec![0.0; n * num_cells],
            gain_lin: vec![0.0; n * num_cells],
            gain_geo_db: vec![0.0; n * num_cells],
            attached: vec![Vec::new(); num_cells],
            load_multiplier: config.ntod_load_multiplier,
            schedule,
            next_event: 0,
            win_tod_bits: 0.0,
            win_ntod_arrived_bits: vec![0.0; num_cells],
            win_tod_sinr_lin_sum: 0.0,
            win_tod_prb_samples: 0,
            snapshot: None,
            completed: Vec::new(),
            interference: vec![0.0; num_cells * num_prbs],
            backlogged_scratch: Vec::new(),
        };
        scenario.refresh_channel(true);
        Ok(scenario)
    }

    pub fn vehicles(&self) -> &[Vehicle] {
        &self.vehicles
    }

    pub fn tick_index(&self) -> u64 {
        self.tick_index
    }

    pub fn time_s(&self) -> f64 {
        self.tick_index as f64 * self.config.scheduler_tick
    }

    pub fn take_windows(&mut self) -> Vec<TraceWindow> {
        std::mem::take(&mut self.completed)
    }

    pub fn site_position(&self, cell_id: u32) -> Position {
        self.cells[cell_id as usize].position
    }

    /// Channel gain (negative path loss plus sector gain plus shadowing) of
    /// the current window, dB.
    pub fn channel_gain_db(&self, vehicle_id: u32, cell_id: u32) -> f64 {
        self.gain_db[vehicle_id as usize * self.cells.len() + cell_id as usize]
    }

    /// Per-PRB uplink SINR in dB for a vehicle received at a cell while the
    /// `transmitting` vehicles are co-scheduled on the same PRB in other
    /// cells. An empty set yields the plain SNR.
    pub fn uplink_sinr_db(&self, vehicle_id: u32, cell_id: u32, transmitting: &[u32]) -> f64 {
        let psd_lin = db_to_linear(self.config.tx_psd_dbm_per_prb());
        let noise_lin = db_to_linear(self.config.noise_per_prb_dbm());
        let signal = psd_lin * db_to_linear(self.channel_gain_db(vehicle_id, cell_id));
        let interference: f64 = transmitting
            .iter()
            .map(|&v| psd_lin * db_to_linear(self.channel_gain_db(v, cell_id)))
            .sum();
        linear_to_db(signal / (noise_lin + interference))
    }

    fn refresh_channel(&mut self, initial: bool) {
        let num_cells = self.cells.len();
        let n = self.vehicles.len();
        self.gain_db.resize(n * num_cells, 0.0);
        self.gain_lin.resize(n * num_cells, 0.0);
        self.gain_geo_db.resize(n * num_cells, 0.0);
        let sigma = self.config.shadowing_sigma_db;
        let shadow = Normal::new(0.0, 1.0).expect("unit normal");

        for v in 0..n {
            let vpos = self.vehicles[v].position;
            for (c, cell) in self.cells.iter().enumerate() {
                let los = self.grid.los(&vpos, &cell.position);
                let pl = bs_link_path_loss_db(&vpos, &cell.position, los, &self.config);
                let d = vpos.distance(&cell.position);
                let gain = if d < 1e-9 {
                    ANTENNA_PEAK_GAIN_DBI
                } else {
                    sector_gain_db(cell.boresight_azimuth, cell.position.bearing_deg(&vpos))
                };
                let sh = sigma * shadow.sample(&mut self.rng_channel);
                self.gain_geo_db[v * num_cells + c] = -pl + gain;
                let g = -pl + gain + sh;
                self.gain_db[v * num_cells + c] = g;
                self.gain_lin[v * num_cells + c] = db_to_linear(g);
            }
        }

        // Strongest-power association with hysteresis (none on the initial
        // association). Association follows the measurement-filtered channel,
        // which the per-window shadowing redraws average out of: the
        // geometric gain.
        for list in &mut self.attached {
            list.clear();
        }
        for v in 0..n {
            let row = &self.gain_geo_db[v * num_cells..(v + 1) * num_cells];
            let mut best = 0usize;
            for c in 1..num_cells {
                if row[c] > row[best] {
                    best = c;
                }
            }
            let current = self.vehicles[v].serving_cell as usize;
            let serving = if initial || row[best] > row[current] + HANDOVER_HYSTERESIS_DB {
                best
            } else {
                current
            };
            self.vehicles[v].serving_cell = serving as u32;
            self.attached[serving].push(v as u32);
        }
    }

    fn apply_due_events(&mut self, now: f64) {
        while self.next_event < self.schedule.len() && self.schedule[self.next_event].t_s <= now {
            let ev = self.schedule[self.next_event];
            self.next_event += 1;
            self.load_multiplier *= ev.multiplier_scale;
            if ev.spawn_ntod > 0 {
                let speed_dist =
                    Normal::new(self.config.mean_speed, 0.1 * self.config.mean_speed).unwrap();
                for _ in 0..ev.spawn_ntod {
                    let id = self.vehicles.len() as u32;
                    let speed = speed_dist
                        .sample(&mut self.rng_mobility)
                        .clamp(0.3 * self.config.mean_speed, 2.0 * self.config.mean_speed);
                    let m = MotionState::random(&self.grid, speed, &mut self.rng_mobility);
                    self.vehicles.push(Vehicle {
                        vehicle_id: id,
                        kind: VehicleKind::Ntod,
                        position: m.position(&self.grid),
                        speed,
                        heading: m.heading_deg(),
                        serving_cell: 0,
                        backlog_bits: 0.0,
                    });
                    self.mob.push(m);
                    self.served_bits_total.push(0.0);
                    self.offered_bits_total.push(0.0);
                }
            }
        }
    }

    fn take_window_snapshot(&mut self) {
        let num_cells = self.cells.len();
        let mut counts = vec![0u32; num_cells];
        for (c, list) in self.attached.iter().enumerate() {
            counts[c] = list.len() as u32;
        }
        let tod = &self.vehicles[0];
        let serving_site = self.cells[tod.serving_cell as usize].position;
        let mut dist_sum = 0.0;
        let mut outside = 0u32;
        for v in self.vehicles.iter().skip(1) {
            if v.serving_cell != tod.serving_cell {
                dist_sum += v.position.distance(&serving_site);
                outside += 1;
            }
        }
        let recip = if outside > 0 && dist_sum > 0.0 { 1.0 / dist_sum } else { 0.0 };
        self.snapshot = Some(WindowSnapshot {
            t_s: self.time_s(),
            pos_x_m: tod.position.x,
            pos_y_m: tod.position.y,
            serving_cell: tod.serving_cell,
            counts,
            ntod_dist_recip: recip,
        });
        self.win_tod_bits = 0.0;
        self.win_ntod_arrived_bits.iter_mut().for_each(|b| *b = 0.0);
        self.win_tod_sinr_lin_sum = 0.0;
        self.win_tod_prb_samples = 0;
    }

    fn advance_mobility(&mut self) {
        let dt = self.config.scheduler_tick;
        for (v, m) in self.mob.iter_mut().enumerate() {
            m.advance(&self.grid, dt, &mut self.rng_mobility);
            self.vehicles[v].position = m.position(&self.grid);
            self.vehicles[v].heading = m.heading_deg();
        }
    }

    fn generate_arrivals(&mut self) {
        let dt = self.config.scheduler_tick;
        // ToD: constant-bit-rate live video. Bits accumulate across the
        // ticks of one sample window and expire at its end (stale frames are
        // worthless to the remote driver), so windowed goodput never exceeds
        // the offered rate.
        let tod_bits = self.config.tod_offered_rate * dt;
        self.vehicles[0].backlog_bits += tod_bits;
        self.offered_bits_total[0] += tod_bits;

        let packet_bits = self.config.ntod_packet_size as f64 * 8.0;
        // Poisson packet arrivals observed at tick granularity (packets
        // enter the queue at the tick they arrive in, so only the per-tick
        // count matters).
        let rate_per_tick = self.load_multiplier / self.config.ntod_mean_interarrival * dt;
        let arrivals = Poisson::new(rate_per_tick).unwrap();
        for v in 1..self.vehicles.len() {
            let packets = arrivals.sample(&mut self.rng_traffic);
            if packets > 0.0 {
                let bits = packets * packet_bits;
                self.vehicles[v].backlog_bits += bits;
                self.offered_bits_total[v] += bits;
                let cell = self.vehicles[v].serving_cell as usize;
                self.win_ntod_arrived_bits[cell] += bits;
            }
        }
    }

    fn schedule_and_serve(&mut self) {
        let num_cells = self.cells.len();
        let psd_lin = db_to_linear(self.config.tx_psd_dbm_per_prb());
        let noise_lin = db_to_linear(self.config.noise_per_prb_dbm());
        let bits_per_se =
            OVERHEAD_FACTOR * self.config.prb_bandwidth_hz() * self.config.scheduler_tick;

        let mut allocations: Vec<Vec<PrbAllocation>> = Vec::with_capacity(num_cells);
        for c in 0..num_cells {
            self.backlogged_scratch.clear();
            for &v in &self.attached[c] {
                if self.vehicles[v as usize].backlog_bits > 0.0 {
                    self.backlogged_scratch.push(v);
                }
            }
            let allocs =
                schedule_uplink(&self.backlogged_scratch, self.config.num_prbs, self.rr_cursor[c]);
            self.rr_cursor[c] += 1;
            allocations.push(allocs);
        }

        // Inter-cell interference per receiving cell: every vehicle
        // co-scheduled in another cell this tick leaks its per-PRB PSD
        // through its channel gain, weighted by the fraction of the PRB grid
        // it occupies (the exact per-PRB average of the
        // one-transmitter-per-PRB overlap pattern). Sectors of one site are
        // jointly received, so co-site leakage is further attenuated by the
        // inter-sector isolation.
        let prb_fraction = 1.0 / self.config.num_prbs as f64;
        let cosite_atten = db_to_linear(-COSITE_ISOLATION_DB);
        self.interference.resize(num_cells, 0.0);
        self.interference.iter_mut().for_each(|i| *i = 0.0);
        for (src, allocs) in allocations.iter().enumerate() {
            let src_site = self.cells[src].site_id;
            for a in allocs {
                let row = a.vehicle_id as usize * num_cells;
                let weight = a.prb_count as f64 * prb_fraction;
                for (dst, acc) in self.interference.iter_mut().enumerate() {
                    if dst == src {
                        continue;
                    }
                    let leak = psd_lin * self.gain_lin[row + dst] * weight;
                    *acc += if self.cells[dst].site_id == src_site {
                        leak * cosite_atten
                    } else {
                        leak
                    };
                }
            }
        }

        for (c, allocs) in allocations.iter().enumerate() {
            for a in allocs {
                let v = a.vehicle_id as usize;
                let signal = psd_lin * self.gain_lin[v * num_cells + c];
                let sinr = signal / (noise_lin + self.interference[c]);
                let capacity_bits =
                    spectral_efficiency(sinr) * a.prb_count as f64 * bits_per_se;
                let served = capacity_bits.min(self.vehicles[v].backlog_bits);
                self.vehicles[v].backlog_bits -= served;
                self.served_bits_total[v] += served;
                if v == 0 {
                    self.win_tod_bits += served;
                    self.win_tod_sinr_lin_sum += sinr * a.prb_count as f64;
                    self.win_tod_prb_samples += a.prb_count as u64;
                }
            }
        }

    }

    fn finalize_window(&mut self) {
        let snap = self.snapshot.take().expect("window snapshot present");
        let window_s = self.config.sample_window;
        let sinr_db = if self.win_tod_prb_samples > 0 {
            linear_to_db(self.win_tod_sinr_lin_sum / self.win_tod_prb_samples as f64)
        } else {
            // ToD never scheduled this window: report the interference-free
            // SNR toward the serving cell as the channel indicator.
            self.config.tx_psd_dbm_per_prb() + self.channel_gain_db(0, snap.serving_cell)
                - self.config.noise_per_prb_dbm()
        };
        self.completed.push(TraceWindow {
            t_s: snap.t_s,
            pos_x_m: snap.pos_x_m,
            pos_y_m: snap.pos_y_m,
            serving_cell: snap.serving_cell,
            counts: snap.counts,
            demand_bps: self.win_ntod_arrived_bits.iter().map(|b| b / window_s).collect(),
            tod_goodput_bps: self.win_tod_bits / window_s,
            tod_sinr_db: sinr_db,
            ntod_dist_recip: snap.ntod_dist_recip,
        });
        // Undelivered ToD video expires with the window.
        self.vehicles[0].backlog_bits = 0.0;
    }

    /// Advance the world by one scheduler tick: refresh the channel and
    /// re-associate at window boundaries, advance mobility, generate ToD and
    /// NToD arrivals, schedule every sector, serve backlogs against the
    /// per-PRB rate map, and emit a trace row when a window completes.
    pub fn step(&mut self) {
        let tpw = self.config.ticks_per_window();
        if self.tick_index % tpw == 0 {
            self.apply_due_events(self.time_s());
            if self.tick_index > 0 {
                self.refresh_channel(false);
            }
            self.take_window_snapshot();
        }
        self.advance_mobility();
        self.generate_arrivals();
        self.schedule_and_serve();
        self.tick_index += 1;
        if self.tick_index % tpw == 0 {
            self.finalize_window();
        }
    }

    /// Cumulative (offered, served) bits per vehicle, for conservation checks.
    pub fn flow_totals(&self) -> Vec<(f64, f64)> {
        self.offered_bits_total
            .iter()
            .zip(&self.served_bits_total)
            .map(|(&o, &s)| (o, s))
            .collect()
    }
}

/// Run a full scenario and collect its trace.
pub fn run(config: &ScenarioConfig) -> Result<TraceLog, ConfigError> {
    run_named(config, &config.default_scenario_id(), &[])
}

/// Run with an explicit scenario id and optional scripted load events.
pub fn run_named(
    config: &ScenarioConfig,
    scenario_id: &str,
    schedule: &[LoadEvent],
) -> Result<TraceLog, ConfigError> {
    let mut scenario = Scenario::build(config, schedule.to_vec())?;
    let total_ticks = config.num_windows() * config.ticks_per_window();
    for _ in 0..total_ticks {
        scenario.step();
    }
    Ok(TraceLog {
        scenario_id: scenario_id.to_string(),
        config_sha256: config.sha256(),
        num_cells: config.num_cells(),
        windows: scenario.take_windows(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn short_config(n_ntod: u32, seed: u64) -> ScenarioConfig {
        ScenarioConfig { n_ntod, seed, duration: 2.0, ..Default::default() }
    }

    #[test]
    fn three_sites_three_sectors_make_nine_cells() {
        let s = build_scenario(&short_config(0, 1)).unwrap();
        assert_eq!(s.cells.len(), 9);
        // Boresights within one site differ by 120 degrees.
        for site in 0..3 {
            let az: Vec<f64> =
                s.cells.iter().filter(|c| c.site_id == site).map(|c| c.boresight_azimuth).collect();
            assert_eq!(az, vec![0.0, 120.0, 240.0]);
        }
        // Unique ids.
        let mut ids: Vec<u32> = s.cells.iter().map(|c| c.cell_id).collect();
        ids.dedup();
        assert_eq!(ids.len(), 9);
    }

    #[test]
    fn no_background_population_is_single_vehicle() {
        let s = build_scenario(&short_config(0, 1)).unwrap();
        assert_eq!(s.vehicles().len(), 1);
        assert_eq!(s.vehicles()[0].kind, VehicleKind::Tod);
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_scenario(&short_config(12, 42)).unwrap();
        let b = build_scenario(&short_config(12, 42)).unwrap();
        assert_eq!(a.vehicles(), b.vehicles());
        assert_eq!(a.cells, b.cells);
    }

    #[test]
    fn invalid_config_names_the_field() {
        let cfg = ScenarioConfig { sample_window: 0.015, ..Default::default() };
        let err = build_scenario(&cfg).unwrap_err();
        assert_eq!(err.field, "sample_window");
        let cfg = ScenarioConfig { block_size: -1.0, ..Default::default() };
        assert_eq!(build_scenario(&cfg).unwrap_err().field, "block_size");
    }

    #[test]
    fn sinr_without_interference_is_snr_and_interferers_reduce_it() {
        let s = build_scenario(&short_config(3, 7)).unwrap();
        let tod = &s.vehicles()[0];
        let cell = tod.serving_cell;
        let snr = s.uplink_sinr_db(0, cell, &[]);
        let with_one = s.uplink_sinr_db(0, cell, &[1]);
        let with_two = s.uplink_sinr_db(0, cell, &[1, 2]);
        assert!(with_one < snr);
        assert!(with_two < with_one);
    }

    #[test]
    fn link_budget_at_site_position() {
        // Vehicle parked on a site: the link runs straight up the antenna
        // height at peak sector gain, so
        // SINR = P_tx + G_max - PL(h) - noise_floor.
        let mut cfg = short_config(0, 3);
        cfg.shadowing_sigma_db = 0.0;
        let mut s = build_scenario(&cfg).unwrap();
        let site_pos = s.cells[0].position;
        s.vehicles[0].position = site_pos;
        s.refresh_channel(true);
        let sinr = s.uplink_sinr_db(0, s.vehicles()[0].serving_cell, &[]);
        let pl_h = free_space_pl0_db(cfg.carrier_freq)
            + 10.0 * cfg.pl_exp_los * BS_ANTENNA_HEIGHT_M.log10();
        let expected =
            cfg.ue_tx_power + ANTENNA_PEAK_GAIN_DBI - pl_h - cfg.noise_floor_dbm();
        assert_abs_diff_eq!(sinr, expected, epsilon = 1e-9);
    }

    #[test]
    fn zero_offered_traffic_serves_nothing_but_moves() {
        let mut cfg = short_config(0, 5);
        cfg.tod_offered_rate = 0.0;
        let mut s = build_scenario(&cfg).unwrap();
        let before = s.vehicles()[0].position;
        for _ in 0..20 {
            s.step();
        }
        let after = s.vehicles()[0].position;
        assert!(before.distance(&after) > 0.1);
        let (offered, served) = s.flow_totals()[0];
        assert_eq!(offered, 0.0);
        assert_eq!(served, 0.0);
    }

    #[test]
    fn lone_tod_sustains_offered_rate() {
        let cfg = short_config(0, 11);
        let log = run(&cfg).unwrap();
        assert_eq!(log.windows.len(), 20);
        for w in &log.windows {
            assert_abs_diff_eq!(w.tod_goodput_bps, 2.0e7, epsilon = 1.0);
        }
    }

    #[test]
    fn run_is_deterministic() {
        let cfg = short_config(25, 99);
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        assert_eq!(a.windows, b.windows);
    }

    #[test]
    fn counts_sum_to_population() {
        let cfg = short_config(17, 4);
        let log = run(&cfg).unwrap();
        for w in &log.windows {
            let total: u32 = w.counts.iter().sum();
            assert_eq!(total, 18);
        }
    }

    #[test]
    fn served_never_exceeds_offered() {
        let mut cfg = short_config(30, 8);
        cfg.ntod_load_multiplier = 40.0;
        let mut s = build_scenario(&cfg).unwrap();
        for _ in 0..(cfg.num_windows() * cfg.ticks_per_window()) {
            s.step();
        }
        for (offered, served) in s.flow_totals() {
            assert!(served <= offered + 1e-6);
        }
    }

    #[test]
    fn goodput_capped_by_offered_rate() {
        let mut cfg = short_config(40, 13);
        cfg.ntod_load_multiplier = 40.0;
        let log = run(&cfg).unwrap();
        for w in &log.windows {
            assert!(w.tod_goodput_bps <= cfg.tod_offered_rate + 1e-6);
        }
    }

    #[test]
    fn load_event_spawns_vehicles() {
        let cfg = short_config(2, 21);
        let ev = LoadEvent { t_s: 1.0, spawn_ntod: 5, multiplier_scale: 2.0 };
        let log = run_named(&cfg, "spawn_test", &[ev]).unwrap();
        let early: u32 = log.windows[0].counts.iter().sum();
        let late: u32 = log.windows.last().unwrap().counts.iter().sum();
        assert_eq!(early, 3);
        assert_eq!(late, 8);
    }
}
