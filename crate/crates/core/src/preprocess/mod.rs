//! Station-level preprocessing: aggregate per-user KPI records into
//! per-cell time series, split them chronologically, cut sliding windows,
//! and standardize features with train-split statistics.

mod io;

pub use io::{read_dataset, write_dataset, DATASET_MAGIC};

use crate::datagen::{FaultKind, KpiRecord, NUM_CELLS};
use crate::error::{Error, Result};

/// Station features per second: mean RSRP, mean RSRQ, mean SINR, mean
/// throughput, mean distance, attached-user count.
pub const FEATURES: usize = 6;

/// Window length in seconds; the target is the label one second after the
/// window's last step.
pub const WINDOW: usize = 5;

pub const NUM_CLASSES: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct StationSeries {
    pub cell_id: usize,
    /// `[T][FEATURES]`, one row per second.
    pub features: Vec<[f64; FEATURES]>,
    pub labels: Vec<FaultKind>,
}

/// Average user KPIs per cell per second. Seconds with no attached users
/// carry the previous second's feature means with a user count of zero (all
/// zeros if the cell starts empty). Per-bucket sums run in user-id order, so
/// any permutation of the input records produces bit-identical output.
pub fn aggregate(
    records: &[KpiRecord],
    labels: &[Vec<FaultKind>],
    duration: usize,
) -> Result<Vec<StationSeries>> {
    if labels.len() != NUM_CELLS {
        return Err(Error::Data(format!(
            "label grid has {} cells, deployment has {NUM_CELLS}",
            labels.len()
        )));
    }
    if let Some(row) = labels.iter().find(|row| row.len() != duration) {
        return Err(Error::Data(format!(
            "label stream length {} does not match duration {duration}",
            row.len()
        )));
    }

    let mut buckets: Vec<Vec<(u32, [f64; 5])>> = vec![Vec::new(); NUM_CELLS * duration];
    for r in records {
        if r.serving_cell >= NUM_CELLS {
            return Err(Error::Data(format!(
                "record at t={} references unknown cell {}",
                r.t_s, r.serving_cell
            )));
        }
        if r.t_s as usize >= duration {
            return Err(Error::Data(format!(
                "record at t={} lies outside episode duration {duration}",
                r.t_s
            )));
        }
        buckets[r.serving_cell * duration + r.t_s as usize].push((
            r.user_id,
            [r.rsrp_dbm, r.rsrq_db, r.sinr_db, r.throughput_bps, r.distance_m],
        ));
    }

    let mut series = Vec::with_capacity(NUM_CELLS);
    for cell in 0..NUM_CELLS {
        let mut features = Vec::with_capacity(duration);
        let mut last = [0.0f64; 5];
        for t in 0..duration {
            let bucket = &mut buckets[cell * duration + t];
            if bucket.is_empty() {
                features.push([last[0], last[1], last[2], last[3], last[4], 0.0]);
                continue;
            }
            bucket.sort_by_key(|&(uid, _)| uid);
            let mut sums = [0.0f64; 5];
            for (_, vals) in bucket.iter() {
                for (s, v) in sums.iter_mut().zip(vals) {
                    *s += v;
                }
            }
            let n = bucket.len() as f64;
            for s in sums.iter_mut() {
                *s /= n;
            }
            last = sums;
            features.push([sums[0], sums[1], sums[2], sums[3], sums[4], n]);
        }
        series.push(StationSeries {
            cell_id: cell,
            features,
            labels: labels[cell].clone(),
        });
    }
    Ok(series)
}

/// Contiguous chronological index ranges over `[0, T)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: (usize, usize),
    pub val: (usize, usize),
    pub test: (usize, usize),
}

impl SplitSpec {
    pub fn ranges(&self) -> [(usize, usize); 3] {
        [self.train, self.val, self.test]
    }
}

/// 50/25/25 chronological split with boundaries at floor(T/2), floor(3T/4).
pub fn split(t_len: usize) -> Result<SplitSpec> {
    if t_len < 20 {
        return Err(Error::Data(format!(
            "cannot split {t_len} seconds chronologically; need at least 20"
        )));
    }
    let t1 = t_len / 2;
    let t2 = 3 * t_len / 4;
    Ok(SplitSpec {
        train: (0, t1),
        val: (t1, t2),
        test: (t2, t_len),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowedSample {
    /// Second of the window's last step; the input spans `[t-W+1, t]`.
    pub t: usize,
    /// `[NUM_CELLS][W][FEATURES]` row-major.
    pub input: Vec<f64>,
    /// Per-cell class index at `t + 1`.
    pub target: Vec<u8>,
}

/// Cut sliding windows from one split range `[a, b)`. Every sample's input
/// window and target index stay inside the range, so no information crosses
/// split boundaries; that leaves `(b - a) - W` samples.
pub fn window(series: &[StationSeries], range: (usize, usize), w: usize) -> Result<Vec<WindowedSample>> {
    let (a, b) = range;
    if w == 0 {
        return Err(Error::Contract("window length must be positive".into()));
    }
    let len = b.saturating_sub(a);
    if len < w + 1 {
        return Err(Error::Data(format!(
            "split range [{a}, {b}) has {len} seconds; windowing needs at least {}",
            w + 1
        )));
    }
    for s in series {
        if s.features.len() < b {
            return Err(Error::Data(format!(
                "series for cell {} has {} seconds, split range ends at {b}",
                s.cell_id,
                s.features.len()
            )));
        }
    }
    let mut samples = Vec::with_capacity(len - w);
    for t in (a + w - 1)..=(b - 2) {
        let mut input = Vec::with_capacity(series.len() * w * FEATURES);
        let mut target = Vec::with_capacity(series.len());
        for s in series {
            for step in (t + 1 - w)..=t {
                input.extend_from_slice(&s.features[step]);
            }
            target.push(s.labels[t + 1].class_index());
        }
        samples.push(WindowedSample { t, input, target });
    }
    Ok(samples)
}

/// Windows for all three splits of a SplitSpec.
pub fn window_splits(
    series: &[StationSeries],
    spec: &SplitSpec,
    w: usize,
) -> Result<(Vec<WindowedSample>, Vec<WindowedSample>, Vec<WindowedSample>)> {
    Ok((
        window(series, spec.train, w)?,
        window(series, spec.val, w)?,
        window(series, spec.test, w)?,
    ))
}

/// Inverse-frequency class weights, normalized to mean 1: w_c proportional to
/// n_total / (C * n_c). Classes never seen in the train split make the loss
/// meaningless for them, so that is a configuration error.
pub fn class_weights(targets: impl IntoIterator<Item = u8>, n_classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; n_classes];
    let mut total = 0usize;
    for t in targets {
        let idx = t as usize;
        if idx >= n_classes {
            return Err(Error::Data(format!(
                "target class {idx} out of range for {n_classes} classes"
            )));
        }
        counts[idx] += 1;
        total += 1;
    }
    if let Some(absent) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Config(format!(
            "class {absent} never occurs in the training split; increase the fault budget or \
             episode length, or merge fault classes into a binary task"
        )));
    }
    let mut weights: Vec<f64> = counts
        .iter()
        .map(|&c| total as f64 / (n_classes as f64 * c as f64))
        .collect();
    let mean = weights.iter().sum::<f64>() / n_classes as f64;
    for w in weights.iter_mut() {
        *w /= mean;
    }
    Ok(weights)
}

/// Per-feature standardization statistics, estimated on the train split only.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Z-score every feature in place using train-split statistics. Population
/// standard deviations are floored at 1e-8, which maps constant features to
/// zero instead of dividing by zero.
pub fn normalize(
    train: &mut [WindowedSample],
    val: &mut [WindowedSample],
    test: &mut [WindowedSample],
) -> Result<NormStats> {
    if train.is_empty() {
        return Err(Error::Data("cannot estimate feature statistics from an empty train split".into()));
    }
    let mut mean = vec![0.0f64; FEATURES];
    let mut count = 0usize;
    for s in train.iter() {
        for row in s.input.chunks_exact(FEATURES) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        count += s.input.len() / FEATURES;
    }
    for m in mean.iter_mut() {
        *m /= count as f64;
    }
    let mut var = [0.0f64; FEATURES];
    for s in train.iter() {
        for row in s.input.chunks_exact(FEATURES) {
            for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                let d = x - m;
                *v += d * d;
            }
        }
    }
    let std: Vec<f64> = var
        .iter()
        .map(|v| (v / count as f64).sqrt().max(1e-8))
        .collect();
    for set in [train, val, test] {
        for s in set.iter_mut() {
            for row in s.input.chunks_exact_mut(FEATURES) {
                for ((x, m), sd) in row.iter_mut().zip(&mean).zip(&std) {
                    *x = (*x - m) / sd;
                }
            }
        }
    }
    Ok(NormStats { mean, std })
}

/// A windowed dataset in its persisted form: a flat input tensor
/// `[count][n_nodes][window][n_features]` and per-node class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n_nodes: u32,
    pub window: u32,
    pub n_features: u32,
    pub inputs: Vec<f64>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn from_samples(samples: &[WindowedSample]) -> Self {
        let n_nodes = samples.first().map_or(NUM_CELLS, |s| s.target.len()) as u32;
        let window = samples
            .first()
            .map_or(WINDOW, |s| s.input.len() / (n_nodes as usize * FEATURES))
            as u32;
        Dataset {
            n_nodes,
            window,
            n_features: FEATURES as u32,
            inputs: samples.iter().flat_map(|s| s.input.iter().copied()).collect(),
            labels: samples.iter().flat_map(|s| s.target.iter().copied()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        if self.n_nodes == 0 {
            return 0;
        }
        self.labels.len() / self.n_nodes as usize
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_numel(&self) -> usize {
        (self.n_nodes * self.window * self.n_features) as usize
    }

    /// Input tensor of one sample, shape `[n_nodes, window, n_features]`.
    pub fn input(&self, i: usize) -> &[f64] {
        let n = self.sample_numel();
        &self.inputs[i * n..(i + 1) * n]
    }

    /// Per-node labels of one sample.
    pub fn label(&self, i: usize) -> &[u8] {
        let n = self.n_nodes as usize;
        &self.labels[i * n..(i + 1) * n]
    }
}
