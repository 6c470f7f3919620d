//! Dataset ingestion, image codec, synthetic data, and checkpoint
//! serialization.

pub mod checkpoint;
pub mod market;
pub mod ppm;
pub mod synth;

use std::path::Path;

use thiserror::Error;

use crate::augment::DatasetStats;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot parse `{name}`: bad {segment} segment")]
    FilenameParse { name: String, segment: &'static str },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("missing directory {dir}")]
    MissingDirectory { dir: String },
    #[error("no samples in {dir}")]
    EmptyDataset { dir: String },
    #[error("not a P6 PPM (magic {found:?})")]
    PpmBadMagic { found: String },
    #[error("PPM header: {reason}")]
    PpmBadHeader { reason: &'static str },
    #[error("PPM maxval {maxval} unsupported (need 255)")]
    PpmBadMaxval { maxval: u64 },
    #[error("PPM payload truncated (expected {expected} bytes, got {got})")]
    PpmTruncated { expected: usize, got: usize },
    #[error("checkpoint: bad magic")]
    CheckpointBadMagic,
    #[error("checkpoint version {found} (this build reads {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("checkpoint checksum mismatch (payload corrupted)")]
    CheckpointChecksum,
    #[error("checkpoint header: {reason}")]
    CheckpointHeader { reason: String },
    #[error("checkpoint field `{field}` missing or malformed")]
    CheckpointField { field: String },
    #[error("invalid synthetic dataset spec: {reason}")]
    BadSynthSpec { reason: &'static str },
    #[error("stats file: {reason}")]
    StatsFormat { reason: String },
}

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_triple(v: &[f64; 3]) -> String {
    format!("[{},{},{}]", v[0], v[1], v[2])
}

fn parse_triple(s: &str) -> Option<[f64; 3]> {
    let inner = s.trim().strip_prefix('[')?.strip_suffix(']')?;
    let parts: Vec<&str> = inner.split(',').collect();
    if parts.len() != 3 {
        return None;
    }
    let mut out = [0.0; 3];
    for (i, p) in parts.iter().enumerate() {
        out[i] = p.trim().parse().ok()?;
    }
    Some(out)
}

/// Writes the normalization stats file consumed by training configs:
/// `mean=[r,g,b]` and `std=[r,g,b]`, one per line.
pub fn write_stats_file(path: &Path, stats: &DatasetStats) -> Result<(), DataError> {
    let text = format!(
        "mean={}\nstd={}\n",
        format_triple(&stats.mean),
        format_triple(&stats.std)
    );
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn read_stats_file(path: &Path) -> Result<([f64; 3], [f64; 3]), DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut mean = None;
    let mut std = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(v) = line.strip_prefix("mean=") {
            mean = parse_triple(v);
        } else if let Some(v) = line.strip_prefix("std=") {
            std = parse_triple(v);
        } else {
            return Err(DataError::StatsFormat {
                reason: format!("unexpected line `{line}`"),
            });
        }
    }
    match (mean, std) {
        (Some(m), Some(s)) => Ok((m, s)),
        _ => Err(DataError::StatsFormat {
            reason: "missing mean= or std= line".into(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stats.txt");
        let stats = DatasetStats {
            mean: [0.25, 0.5, 0.125],
            std: [0.1, 0.2, 0.3],
            zero_std: [false; 3],
        };
        write_stats_file(&path, &stats).unwrap();
        let (mean, std) = read_stats_file(&path).unwrap();
        assert_eq!(mean, stats.mean);
        assert_eq!(std, stats.std);
    }
}
