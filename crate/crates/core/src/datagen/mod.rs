//! Synthetic KPI generator for a 7-cell hexagonal deployment: per-user radio
//! KPIs under random-waypoint mobility, with seeded injection of two antenna
//! fault types. The radio model is a simplified log-distance + parabolic
//! antenna pattern; it is deliberately not calibrated against any production
//! channel model, it only has to make the injected faults detectable and
//! distinguishable in the aggregated series.

mod episode;
mod io;
pub mod radio;

pub use episode::{label_grid, schedule_faults, simulate_episode};
pub use io::{
    parse_episode_config, read_labels_csv, read_records_csv, write_labels_csv, write_records_csv,
    LABELS_HEADER, RECORDS_HEADER,
};

use crate::error::{Error, Result};

pub const NUM_CELLS: usize = 7;

/// Normal-operation radio parameters shared by every site.
pub const TX_POWER_DBM: f64 = 41.0;
pub const DOWNTILT_DEG: f64 = 90.0;
pub const AZIMUTH_BW_DEG: f64 = 65.0;
pub const ELEVATION_BW_DEG: f64 = 65.0;
pub const ANTENNA_HEIGHT_M: f64 = 25.0;
pub const USER_HEIGHT_M: f64 = 1.5;
pub const CARRIER_GHZ: f64 = 4.0;
pub const BANDWIDTH_MHZ: f64 = 10.0;
pub const NOISE_FIGURE_DB: f64 = 5.0;
pub const MAX_GAIN_DBI: f64 = 8.0;
pub const MAX_ATTENUATION_DB: f64 = 30.0;
pub const INTER_SITE_M: f64 = 200.0;

/// Fault durations are drawn uniformly from this range of whole seconds.
pub const FAULT_MIN_S: u32 = 30;
pub const FAULT_MAX_S: u32 = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FaultKind {
    None,
    Epr,
    Interference,
}

impl FaultKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FaultKind::None => "NONE",
            FaultKind::Epr => "EPR",
            FaultKind::Interference => "INTERF",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "NONE" => Ok(FaultKind::None),
            "EPR" => Ok(FaultKind::Epr),
            "INTERF" => Ok(FaultKind::Interference),
            other => Err(Error::Data(format!("unknown fault label {other:?}"))),
        }
    }

    /// Class index used in persisted datasets: NONE=0, EPR=1, INTERF=2.
    pub fn class_index(self) -> u8 {
        match self {
            FaultKind::None => 0,
            FaultKind::Epr => 1,
            FaultKind::Interference => 2,
        }
    }

    /// Effective (tx_power_dbm, downtilt_deg, azimuth_bw_deg, elevation_bw_deg)
    /// under this fault, given the normal-operation values. EPR crushes the
    /// transmit power; the interference fault overshoots power and tilts a
    /// narrow elevation beam toward the neighbors.
    pub fn radio_params(self, normal: (f64, f64, f64, f64)) -> (f64, f64, f64, f64) {
        match self {
            FaultKind::None => normal,
            FaultKind::Epr => (10.0, normal.1, normal.2, normal.3),
            FaultKind::Interference => (33.0, 15.0, 70.0, 10.0),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Site {
    pub cell_id: usize,
    pub x_m: f64,
    pub y_m: f64,
    pub height_m: f64,
    pub tx_power_dbm: f64,
    pub downtilt_deg: f64,
    pub azimuth_bw_deg: f64,
    pub elevation_bw_deg: f64,
}

#[derive(Debug, Clone)]
pub struct Deployment {
    pub sites: Vec<Site>,
    pub inter_site_m: f64,
    pub carrier_ghz: f64,
    pub bandwidth_mhz: f64,
    pub noise_figure_db: f64,
    /// Users spawn and roam inside this disk around the origin.
    pub coverage_radius_m: f64,
}

/// Center site at the origin, six neighbors on the hexagon vertices at the
/// inter-site distance.
pub fn build_topology(cfg: &EpisodeConfig) -> Deployment {
    let _ = cfg;
    let mut sites = Vec::with_capacity(NUM_CELLS);
    let mut push = |cell_id: usize, x: f64, y: f64| {
        sites.push(Site {
            cell_id,
            x_m: x,
            y_m: y,
            height_m: ANTENNA_HEIGHT_M,
            tx_power_dbm: TX_POWER_DBM,
            downtilt_deg: DOWNTILT_DEG,
            azimuth_bw_deg: AZIMUTH_BW_DEG,
            elevation_bw_deg: ELEVATION_BW_DEG,
        });
    };
    push(0, 0.0, 0.0);
    for i in 0..6 {
        let angle = std::f64::consts::PI / 3.0 * i as f64;
        push(i + 1, INTER_SITE_M * angle.cos(), INTER_SITE_M * angle.sin());
    }
    Deployment {
        sites,
        inter_site_m: INTER_SITE_M,
        carrier_ghz: CARRIER_GHZ,
        bandwidth_mhz: BANDWIDTH_MHZ,
        noise_figure_db: NOISE_FIGURE_DB,
        coverage_radius_m: INTER_SITE_M * 1.5,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FaultEvent {
    pub cell_id: usize,
    pub kind: FaultKind,
    pub start_s: u32,
    pub duration_s: u32,
    pub tx_power_dbm: f64,
    pub downtilt_deg: f64,
    pub azimuth_bw_deg: f64,
    pub elevation_bw_deg: f64,
}

impl FaultEvent {
    pub fn new(cell_id: usize, kind: FaultKind, start_s: u32, duration_s: u32) -> Self {
        let (tx, tilt, az, el) =
            kind.radio_params((TX_POWER_DBM, DOWNTILT_DEG, AZIMUTH_BW_DEG, ELEVATION_BW_DEG));
        FaultEvent {
            cell_id,
            kind,
            start_s,
            duration_s,
            tx_power_dbm: tx,
            downtilt_deg: tilt,
            azimuth_bw_deg: az,
            elevation_bw_deg: el,
        }
    }

    pub fn end_s(&self) -> u32 {
        self.start_s + self.duration_s
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct EpisodeConfig {
    pub users_per_cell: u32,
    pub duration_s: u32,
    pub fault_budget_fraction: f64,
    pub seed: u64,
    pub speed_mps: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            users_per_cell: 30,
            duration_s: 3600,
            fault_budget_fraction: 0.02,
            seed: 0,
            speed_mps: 1.5,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.users_per_cell == 0 {
            return Err(Error::Config("users_per_cell must be at least 1".into()));
        }
        if self.duration_s == 0 {
            return Err(Error::Config("duration_s must be positive".into()));
        }
        if !(0.0..=0.05).contains(&self.fault_budget_fraction) {
            return Err(Error::Config(format!(
                "fault_budget_fraction must lie in [0, 0.05], got {}",
                self.fault_budget_fraction
            )));
        }
        if self.speed_mps <= 0.0 || !self.speed_mps.is_finite() {
            return Err(Error::Config(format!(
                "speed_mps must be positive, got {}",
                self.speed_mps
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KpiRecord {
    pub t_s: u32,
    pub user_id: u32,
    pub serving_cell: usize,
    pub rsrp_dbm: f64,
    pub rsrq_db: f64,
    pub sinr_db: f64,
    pub throughput_bps: f64,
    pub distance_m: f64,
    pub ue_x: f64,
    pub ue_y: f64,
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub config: EpisodeConfig,
    pub deployment: Deployment,
    pub events: Vec<FaultEvent>,
    pub records: Vec<KpiRecord>,
    /// `labels[cell][t]` for every cell-second of the episode.
    pub labels: Vec<Vec<FaultKind>>,
}
