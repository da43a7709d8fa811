//! Channel-wise gate dumps for a probe utterance.
//!
//! `attention_b{I}_dilation{d}.csv` holds `channel,weight` for each stream of
//! the last module of the last block group; `fusion.csv` holds
//! `block,channel,weight` for every block's fusion gate.

use std::path::{Path, PathBuf};

use mqnet_core::{Model, Tensor};

use crate::error::{Result, TrainError};

/// One dumped gate vector.
#[derive(Clone, Debug, PartialEq)]
pub struct GateDump {
    pub file: String,
    /// `(block, values)`; block is 0 for attention dumps.
    pub rows: Vec<(usize, Vec<f64>)>,
}

impl GateDump {
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.rows.iter().flat_map(|(_, v)| v.iter().copied())
    }
}

/// Collects the gates that would be written for `features`.
pub fn collect_gates(model: &Model, features: &Tensor) -> Result<Vec<GateDump>> {
    let (_, captures) = model.probe_gates(features)?;
    let last = model.last_module();
    let block = model.config.block_count();
    let mut dumps = Vec::new();
    for (s, d) in last.dilations().into_iter().enumerate() {
        let key = format!("{}.att{s}", last.name);
        if let Some((_, t)) = captures.iter().find(|(n, _)| *n == key) {
            dumps.push(GateDump {
                file: format!("attention_b{block}_dilation{d}.csv"),
                rows: vec![(0, t.data().to_vec())],
            });
        }
    }
    let fusion: Vec<(usize, Vec<f64>)> = (1..=block)
        .filter_map(|i| {
            let key = format!("fusion.w{i}");
            captures.iter().find(|(n, _)| *n == key).map(|(_, t)| (i, t.data().to_vec()))
        })
        .collect();
    if !fusion.is_empty() {
        dumps.push(GateDump {
            file: "fusion.csv".into(),
            rows: fusion,
        });
    }
    Ok(dumps)
}

fn csv_err(path: &Path, e: csv::Error) -> TrainError {
    let source = match e.into_kind() {
        csv::ErrorKind::Io(e) => e,
        other => std::io::Error::other(format!("{other:?}")),
    };
    TrainError::io(path, source)
}

/// Writes the gate CSVs into `dir` and returns their paths.
pub fn dump_weights(model: &Model, features: &Tensor, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
    let mut paths = Vec::new();
    for dump in collect_gates(model, features)? {
        let path = dir.join(&dump.file);
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
        let fusion = dump.file == "fusion.csv";
        let header: &[&str] = if fusion { &["block", "channel", "weight"] } else { &["channel", "weight"] };
        w.write_record(header).map_err(|e| csv_err(&path, e))?;
        for (block, values) in &dump.rows {
            for (c, v) in values.iter().enumerate() {
                let mut rec = Vec::with_capacity(3);
                if fusion {
                    rec.push(block.to_string());
                }
                rec.push(c.to_string());
                rec.push(format!("{v:e}"));
                w.write_record(&rec).map_err(|e| csv_err(&path, e))?;
            }
        }
        w.flush().map_err(|e| TrainError::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}
