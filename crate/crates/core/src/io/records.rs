use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;

use crate::error::{Error, Result};
use crate::evalkit::{DetectionRecord, GroundTruthRecord};

/// Parses JSON lines, skipping blank ones. Errors carry the 1-based line number.
pub fn parse_records<T: DeserializeOwned>(
    text: &str,
    validate: impl Fn(&T) -> std::result::Result<(), String>,
) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: T = serde_json::from_str(line).map_err(|e| Error::Format(format!("line {}: {}", i + 1, e)))?;
        validate(&rec).map_err(|e| Error::Format(format!("line {}: {}", i + 1, e)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<Vec<DetectionRecord>> {
    parse_records(&std::fs::read_to_string(path)?, DetectionRecord::validate)
}

pub fn read_ground_truth(path: impl AsRef<Path>) -> Result<Vec<GroundTruthRecord>> {
    parse_records(&std::fs::read_to_string(path)?, GroundTruthRecord::validate)
}

pub fn write_detections(path: impl AsRef<Path>, dets: &[DetectionRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for d in dets {
        serde_json::to_writer(&mut f, d)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}
