//! CSV persistence for episodes and the flat key-value episode config format.
//!
//! Float columns are written with fixed decimal places so that a rerun with
//! the same seed produces byte-identical files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{EpisodeConfig, FaultKind, KpiRecord, NUM_CELLS};
use crate::error::{Error, Result};

pub const RECORDS_HEADER: &str =
    "t_s,user_id,serving_cell,rsrp_dbm,rsrq_db,sinr_db,throughput_bps,distance_m,ue_x,ue_y";
pub const LABELS_HEADER: &str = "t_s,cell_id,fault";

pub fn write_records_csv(path: &Path, records: &[KpiRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{RECORDS_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{:.3},{:.3},{:.3},{:.1},{:.3},{:.3},{:.3}",
            r.t_s,
            r.user_id,
            r.serving_cell,
            r.rsrp_dbm,
            r.rsrq_db,
            r.sinr_db,
            r.throughput_bps,
            r.distance_m,
            r.ue_x,
            r.ue_y
        )?;
    }
    w.flush()?;
    Ok(())
}

fn parse_field<T: std::str::FromStr>(field: &str, name: &str, line_no: usize) -> Result<T> {
    field.parse().map_err(|_| {
        Error::Data(format!(
            "records.csv line {line_no}: cannot parse {name} from {field:?}"
        ))
    })
}

pub fn read_records_csv(path: &Path) -> Result<Vec<KpiRecord>> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data("records.csv is empty".into()))??;
    if header != RECORDS_HEADER {
        return Err(Error::Data(format!(
            "records.csv header mismatch: expected {RECORDS_HEADER:?}, got {header:?}"
        )));
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let line_no = i + 2;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(Error::Data(format!(
                "records.csv line {line_no}: expected 10 fields, got {}",
                fields.len()
            )));
        }
        records.push(KpiRecord {
            t_s: parse_field(fields[0], "t_s", line_no)?,
            user_id: parse_field(fields[1], "user_id", line_no)?,
            serving_cell: parse_field(fields[2], "serving_cell", line_no)?,
            rsrp_dbm: parse_field(fields[3], "rsrp_dbm", line_no)?,
            rsrq_db: parse_field(fields[4], "rsrq_db", line_no)?,
            sinr_db: parse_field(fields[5], "sinr_db", line_no)?,
            throughput_bps: parse_field(fields[6], "throughput_bps", line_no)?,
            distance_m: parse_field(fields[7], "distance_m", line_no)?,
            ue_x: parse_field(fields[8], "ue_x", line_no)?,
            ue_y: parse_field(fields[9], "ue_y", line_no)?,
        });
    }
    Ok(records)
}

/// Labels are written time-major: all cells for second 0, then second 1, ...
pub fn write_labels_csv(path: &Path, labels: &[Vec<FaultKind>]) -> Result<()> {
    let duration = labels.first().map_or(0, Vec::len);
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{LABELS_HEADER}")?;
    for t in 0..duration {
        for (cell, row) in labels.iter().enumerate() {
            writeln!(w, "{t},{cell},{}", row[t].as_str())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read labels back into a `[cell][second]` grid, checking that every
/// cell-second of the episode appears exactly once.
pub fn read_labels_csv(path: &Path) -> Result<Vec<Vec<FaultKind>>> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data("labels.csv is empty".into()))??;
    if header != LABELS_HEADER {
        return Err(Error::Data(format!(
            "labels.csv header mismatch: expected {LABELS_HEADER:?}, got {header:?}"
        )));
    }
    let mut entries: Vec<(u32, usize, FaultKind)> = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let line_no = i + 2;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Data(format!(
                "labels.csv line {line_no}: expected 3 fields, got {}",
                fields.len()
            )));
        }
        let t: u32 = fields[0].parse().map_err(|_| {
            Error::Data(format!("labels.csv line {line_no}: bad t_s {:?}", fields[0]))
        })?;
        let cell: usize = fields[1].parse().map_err(|_| {
            Error::Data(format!("labels.csv line {line_no}: bad cell_id {:?}", fields[1]))
        })?;
        if cell >= NUM_CELLS {
            return Err(Error::Data(format!(
                "labels.csv line {line_no}: cell_id {cell} out of range (deployment has {NUM_CELLS} cells)"
            )));
        }
        entries.push((t, cell, FaultKind::parse(fields[2])?));
    }
    let duration = entries.iter().map(|&(t, _, _)| t + 1).max().unwrap_or(0) as usize;
    if entries.len() != duration * NUM_CELLS {
        return Err(Error::Data(format!(
            "labels.csv covers {} cell-seconds but duration {duration} needs {}",
            entries.len(),
            duration * NUM_CELLS
        )));
    }
    let mut labels = vec![vec![None; duration]; NUM_CELLS];
    for (t, cell, kind) in entries {
        let slot = &mut labels[cell][t as usize];
        if slot.is_some() {
            return Err(Error::Data(format!(
                "labels.csv repeats cell {cell} at t={t}"
            )));
        }
        *slot = Some(kind);
    }
    Ok(labels
        .into_iter()
        .map(|row| row.into_iter().map(|k| k.expect("grid complete")).collect())
        .collect())
}

/// Parse the flat `key = value` episode config format. Unknown keys are
/// rejected so that typos fail loudly instead of silently using defaults.
/// `#` starts a comment line; blank lines are ignored.
pub fn parse_episode_config(text: &str) -> Result<EpisodeConfig> {
    let mut cfg = EpisodeConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let line_no = i + 1;
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("config line {line_no}: expected key = value, got {raw:?}"))
        })?;
        let key = key.trim();
        let value = value.trim();
        let bad = |what: &str| {
            Error::Config(format!("config line {line_no}: cannot parse {key} as {what} from {value:?}"))
        };
        match key {
            "users_per_cell" => cfg.users_per_cell = value.parse().map_err(|_| bad("integer"))?,
            "duration_s" => cfg.duration_s = value.parse().map_err(|_| bad("integer"))?,
            "fault_budget_fraction" => {
                cfg.fault_budget_fraction = value.parse().map_err(|_| bad("number"))?
            }
            "seed" => cfg.seed = value.parse().map_err(|_| bad("integer"))?,
            "speed_mps" => cfg.speed_mps = value.parse().map_err(|_| bad("number"))?,
            other => {
                return Err(Error::Config(format!(
                    "config line {line_no}: unknown key {other:?} (known keys: users_per_cell, \
                     duration_s, fault_budget_fraction, seed, speed_mps)"
                )))
            }
        }
    }
    Ok(cfg)
}
