//! Radio propagation and KPI math: log-distance path loss, parabolic antenna
//! pattern, and the per-user KPI assembly from per-cell received powers.

use super::{Deployment, Site, MAX_ATTENUATION_DB, MAX_GAIN_DBI, USER_HEIGHT_M};

/// Log-distance path loss in dB. The 2D distance is clamped to 1 m and the
/// 3D distance folds in the antenna/user height difference.
pub fn path_loss(distance_m: f64, freq_ghz: f64, antenna_height_m: f64) -> f64 {
    let d2d = distance_m.max(1.0);
    let dh = antenna_height_m - USER_HEIGHT_M;
    let d3d = (d2d * d2d + dh * dh).sqrt();
    28.0 + 22.0 * d3d.log10() + 20.0 * freq_ghz.log10()
}

/// Parabolic pattern: peak gain minus a quadratic rolloff in each plane,
/// with the total attenuation capped.
pub fn antenna_gain(az_off_deg: f64, el_off_deg: f64, az_bw_deg: f64, el_bw_deg: f64) -> f64 {
    debug_assert!(az_bw_deg > 0.0 && el_bw_deg > 0.0);
    let az = az_off_deg / az_bw_deg;
    let el = el_off_deg / el_bw_deg;
    let attenuation = (12.0 * az * az + 12.0 * el * el).min(MAX_ATTENUATION_DB);
    MAX_GAIN_DBI - attenuation
}

/// Thermal noise floor over the channel bandwidth plus receiver noise figure.
pub fn noise_floor_dbm(bandwidth_mhz: f64, noise_figure_db: f64) -> f64 {
    -174.0 + 10.0 * (bandwidth_mhz * 1e6).log10() + noise_figure_db
}

pub fn db_to_lin(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn lin_to_db(lin: f64) -> f64 {
    10.0 * lin.log10()
}

/// Effective per-cell radio parameters at one instant (base values with any
/// active fault overrides applied).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellState {
    pub tx_power_dbm: f64,
    pub downtilt_deg: f64,
    pub azimuth_bw_deg: f64,
    pub elevation_bw_deg: f64,
}

impl CellState {
    pub fn nominal(site: &Site) -> Self {
        CellState {
            tx_power_dbm: site.tx_power_dbm,
            downtilt_deg: site.downtilt_deg,
            azimuth_bw_deg: site.azimuth_bw_deg,
            elevation_bw_deg: site.elevation_bw_deg,
        }
    }
}

/// Received power from one cell at a user position. Sites are azimuthally
/// omnidirectional; the elevation offset is the angle between the configured
/// downtilt and the actual depression angle toward the user. Normal operation
/// points straight down (90 degrees) through a wide beam, so nearby users get
/// close to peak gain and the rolloff grows gently with distance. The
/// interference fault's shallow narrow beam instead concentrates emission on
/// the ring where the depression angle matches its tilt, which lands several
/// dB above normal emission across the neighbor sites' coverage.
pub fn rsrp_dbm(site: &Site, state: &CellState, carrier_ghz: f64, ue_x: f64, ue_y: f64) -> f64 {
    let d2d = (ue_x - site.x_m).hypot(ue_y - site.y_m);
    let depression = (site.height_m - USER_HEIGHT_M).atan2(d2d.max(1.0)).to_degrees();
    let el_off = (depression - state.downtilt_deg).abs();
    let gain = antenna_gain(0.0, el_off, state.azimuth_bw_deg, state.elevation_bw_deg);
    state.tx_power_dbm + gain - path_loss(d2d, carrier_ghz, site.height_m)
}

/// Received power from every cell, in cell-id order.
pub fn rsrp_all(dep: &Deployment, states: &[CellState], ue_x: f64, ue_y: f64) -> Vec<f64> {
    dep.sites
        .iter()
        .zip(states)
        .map(|(site, state)| rsrp_dbm(site, state, dep.carrier_ghz, ue_x, ue_y))
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct Kpis {
    pub rsrp_dbm: f64,
    pub rsrq_db: f64,
    pub sinr_db: f64,
    pub throughput_bps: f64,
}

/// KPI assembly for one user given per-cell received powers and the number of
/// users sharing the serving cell's bandwidth. SINR is floored at -10 dB for
/// the rate computation so throughput stays nonnegative and bounded away from
/// log-of-zero, matching a scheduler that drops undecodable allocations.
pub fn compute_kpis(rsrp_per_cell: &[f64], serving: usize, dep: &Deployment, users_on_cell: u32) -> Kpis {
    let rsrp_serv = rsrp_per_cell[serving];
    let noise_lin = db_to_lin(noise_floor_dbm(dep.bandwidth_mhz, dep.noise_figure_db));
    let mut total_lin = 0.0;
    let mut other_lin = 0.0;
    for (cell, &rsrp) in rsrp_per_cell.iter().enumerate() {
        let lin = db_to_lin(rsrp);
        total_lin += lin;
        if cell != serving {
            other_lin += lin;
        }
    }
    let sinr_db = rsrp_serv - lin_to_db(other_lin + noise_lin);
    let rsrq_db = rsrp_serv - lin_to_db(total_lin);
    let share_hz = dep.bandwidth_mhz * 1e6 / users_on_cell.max(1) as f64;
    let sinr_for_rate = db_to_lin(sinr_db.max(-10.0));
    let throughput_bps = share_hz * 0.75 * (1.0 + sinr_for_rate).log2();
    Kpis {
        rsrp_dbm: rsrp_serv,
        rsrq_db,
        sinr_db,
        throughput_bps,
    }
}
