//! Fault scheduling and the per-second episode simulation loop.

use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

use super::radio::{self, CellState};
use super::{
    build_topology, Episode, EpisodeConfig, FaultEvent, FaultKind, KpiRecord, FAULT_MAX_S,
    FAULT_MIN_S, NUM_CELLS,
};
use crate::error::{Error, Result};

/// Draw fault events until every cell's budget of faulty seconds is too small
/// to fit another minimum-length event. Cell and fault type are uniform draws,
/// durations are uniform in [FAULT_MIN_S, FAULT_MAX_S] (clipped to the cell's
/// remaining budget), and starts are rejection-sampled so events on the same
/// cell never overlap. Different cells may fault simultaneously.
pub fn schedule_faults(cfg: &EpisodeConfig, rng: &mut impl Rng) -> Result<Vec<FaultEvent>> {
    if cfg.duration_s < 100 {
        return Err(Error::Contract(format!(
            "fault scheduling needs duration_s >= 100, got {}",
            cfg.duration_s
        )));
    }
    let budget = (cfg.fault_budget_fraction * cfg.duration_s as f64).floor() as u32;
    if budget < FAULT_MIN_S {
        if budget > 0 {
            log::warn!(
                "fault budget of {budget} s per cell cannot fit one {FAULT_MIN_S} s event; \
                 schedule is empty"
            );
        }
        return Ok(Vec::new());
    }

    let mut used = [0u32; NUM_CELLS];
    let mut saturated = [false; NUM_CELLS];
    let mut occupied: Vec<Vec<(u32, u32)>> = vec![Vec::new(); NUM_CELLS];
    let mut events = Vec::new();
    loop {
        let available: Vec<usize> = (0..NUM_CELLS)
            .filter(|&c| !saturated[c] && used[c] + FAULT_MIN_S <= budget)
            .collect();
        if available.is_empty() {
            break;
        }
        let cell = available[rng.random_range(0..available.len())];
        let kind = if rng.random_range(0..2u32) == 0 {
            FaultKind::Epr
        } else {
            FaultKind::Interference
        };
        let remaining = budget - used[cell];
        let duration = rng.random_range(FAULT_MIN_S..=FAULT_MAX_S).min(remaining);
        let mut placed = false;
        for _ in 0..64 {
            let start = rng.random_range(0..=cfg.duration_s - duration);
            let end = start + duration;
            if occupied[cell].iter().all(|&(s, e)| end <= s || e <= start) {
                occupied[cell].push((start, end));
                used[cell] += duration;
                events.push(FaultEvent::new(cell, kind, start, duration));
                placed = true;
                break;
            }
        }
        if !placed {
            saturated[cell] = true;
        }
    }
    events.sort_by_key(|ev| (ev.start_s, ev.cell_id));
    Ok(events)
}

/// Per-cell fault label for every second, derived from the event list.
pub fn label_grid(events: &[FaultEvent], duration_s: u32) -> Vec<Vec<FaultKind>> {
    let mut labels = vec![vec![FaultKind::None; duration_s as usize]; NUM_CELLS];
    for ev in events {
        for t in ev.start_s..ev.end_s().min(duration_s) {
            labels[ev.cell_id][t as usize] = ev.kind;
        }
    }
    labels
}

struct User {
    x: f64,
    y: f64,
    waypoint_x: f64,
    waypoint_y: f64,
    serving: usize,
}

fn draw_in_disk(rng: &mut impl Rng, radius: f64) -> (f64, f64) {
    let r = radius * rng.random::<f64>().sqrt();
    let theta = 2.0 * std::f64::consts::PI * rng.random::<f64>();
    (r * theta.cos(), r * theta.sin())
}

/// Random-waypoint step with zero pause time: walk toward the waypoint at
/// constant speed, drawing a fresh waypoint whenever one is reached, until
/// one second of travel is spent.
fn advance(user: &mut User, speed_mps: f64, radius: f64, rng: &mut impl Rng) {
    let mut remaining = speed_mps;
    while remaining > 1e-12 {
        let dx = user.waypoint_x - user.x;
        let dy = user.waypoint_y - user.y;
        let dist = dx.hypot(dy);
        if dist <= remaining {
            user.x = user.waypoint_x;
            user.y = user.waypoint_y;
            remaining -= dist;
            let (wx, wy) = draw_in_disk(rng, radius);
            user.waypoint_x = wx;
            user.waypoint_y = wy;
        } else {
            user.x += dx / dist * remaining;
            user.y += dy / dist * remaining;
            remaining = 0.0;
        }
    }
}

/// Strongest attachable cell. A cell in the interference fault state emits a
/// spilling beam users cannot sync to, so it is not a re-selection candidate;
/// `fallback` keeps the current attachment in the degenerate case where no
/// cell is attachable.
fn argmax_attachable(values: &[f64], attachable: &[bool], fallback: usize) -> usize {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if attachable[i] && best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best.unwrap_or(fallback)
}

/// Simulate one episode: spawn users uniformly in the coverage disk, walk them
/// with random-waypoint mobility, and log one KPI record per user per second.
///
/// Each second runs in a fixed order: apply that second's fault state, log
/// KPIs against the current attachment, then re-select serving cells (zero
/// hysteresis, so the strongest attachable cell measured this second serves
/// from the next second on), then move. Logging before re-selection means the
/// onset second of a fault is recorded by the users it strands, which is what
/// makes the fault visible in the aggregated series at all. Cells in the
/// interference fault state stay in every SINR/RSRQ denominator but are not
/// attachable: their emission degrades the neighborhood instead of absorbing
/// its users.
pub fn simulate_episode(cfg: &EpisodeConfig) -> Result<Episode> {
    cfg.validate()?;
    let deployment = build_topology(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let events = if cfg.fault_budget_fraction > 0.0 {
        schedule_faults(cfg, &mut rng)?
    } else {
        Vec::new()
    };
    let labels = label_grid(&events, cfg.duration_s);

    let radius = deployment.coverage_radius_m;
    let n_users = cfg.users_per_cell as usize * NUM_CELLS;
    let mut users: Vec<User> = (0..n_users)
        .map(|_| {
            let (x, y) = draw_in_disk(&mut rng, radius);
            let (wx, wy) = draw_in_disk(&mut rng, radius);
            User {
                x,
                y,
                waypoint_x: wx,
                waypoint_y: wy,
                serving: 0,
            }
        })
        .collect();

    let normal: Vec<CellState> = deployment.sites.iter().map(CellState::nominal).collect();
    let mut records = Vec::with_capacity(n_users * cfg.duration_s as usize);
    let mut rsrp = vec![vec![0.0f64; NUM_CELLS]; n_users];

    for t in 0..cfg.duration_s {
        let states: Vec<CellState> = (0..NUM_CELLS)
            .map(|c| match labels[c][t as usize] {
                FaultKind::None => normal[c],
                kind => {
                    let site = &deployment.sites[c];
                    let (tx, tilt, az, el) = kind.radio_params((
                        site.tx_power_dbm,
                        site.downtilt_deg,
                        site.azimuth_bw_deg,
                        site.elevation_bw_deg,
                    ));
                    CellState {
                        tx_power_dbm: tx,
                        downtilt_deg: tilt,
                        azimuth_bw_deg: az,
                        elevation_bw_deg: el,
                    }
                }
            })
            .collect();

        let attachable: Vec<bool> = (0..NUM_CELLS)
            .map(|c| labels[c][t as usize] != FaultKind::Interference)
            .collect();

        for (user, rsrp_row) in users.iter_mut().zip(rsrp.iter_mut()) {
            *rsrp_row = radio::rsrp_all(&deployment, &states, user.x, user.y);
            if t == 0 {
                user.serving = argmax_attachable(rsrp_row, &attachable, 0);
            }
        }

        let mut attached = [0u32; NUM_CELLS];
        for user in &users {
            attached[user.serving] += 1;
        }

        for (uid, (user, rsrp_row)) in users.iter_mut().zip(rsrp.iter()).enumerate() {
            let kpis =
                radio::compute_kpis(rsrp_row, user.serving, &deployment, attached[user.serving]);
            let site = &deployment.sites[user.serving];
            records.push(KpiRecord {
                t_s: t,
                user_id: uid as u32,
                serving_cell: user.serving,
                rsrp_dbm: kpis.rsrp_dbm,
                rsrq_db: kpis.rsrq_db,
                sinr_db: kpis.sinr_db,
                throughput_bps: kpis.throughput_bps,
                distance_m: (user.x - site.x_m).hypot(user.y - site.y_m),
                ue_x: user.x,
                ue_y: user.y,
            });
            user.serving = argmax_attachable(rsrp_row, &attachable, user.serving);
        }

        for user in users.iter_mut() {
            advance(user, cfg.speed_mps, radius, &mut rng);
        }
    }

    Ok(Episode {
        config: *cfg,
        deployment,
        events,
        records,
        labels,
    })
}
