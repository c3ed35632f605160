//! Binary dataset format: magic `SIMBA1`, little-endian u32 header
//! (n_nodes, window, n_features, sample count), the flat f64 input tensor,
//! then all per-node u8 labels.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 6] = b"SIMBA1";

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let count = ds.len();
    if ds.inputs.len() != count * ds.sample_numel() || ds.labels.len() != count * ds.n_nodes as usize {
        return Err(Error::Contract(format!(
            "dataset buffers disagree with header: {} inputs, {} labels, count {count}",
            ds.inputs.len(),
            ds.labels.len()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    for v in [ds.n_nodes, ds.window, ds.n_features, count as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in &ds.inputs {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&ds.labels)?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Data(format!("{} is too short for a dataset header", path.display())))?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Data(format!(
            "{} is not a dataset file (bad magic {magic:?})",
            path.display()
        )));
    }
    let mut word = [0u8; 4];
    let mut header = [0u32; 4];
    for h in header.iter_mut() {
        r.read_exact(&mut word)
            .map_err(|_| Error::Data(format!("{} has a truncated header", path.display())))?;
        *h = u32::from_le_bytes(word);
    }
    let [n_nodes, window, n_features, count] = header;
    let numel = n_nodes as usize * window as usize * n_features as usize;
    let total = count as usize * numel;
    let mut inputs = vec![0.0f64; total];
    let mut buf = [0u8; 8];
    for v in inputs.iter_mut() {
        r.read_exact(&mut buf)
            .map_err(|_| Error::Data(format!("{} is truncated mid-tensor", path.display())))?;
        *v = f64::from_le_bytes(buf);
    }
    let mut labels = vec![0u8; count as usize * n_nodes as usize];
    r.read_exact(&mut labels)
        .map_err(|_| Error::Data(format!("{} is truncated mid-labels", path.display())))?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Data(format!(
            "{} has trailing bytes after the declared sample count",
            path.display()
        )));
    }
    Ok(Dataset {
        n_nodes,
        window,
        n_features,
        inputs,
        labels,
    })
}
