//! Covisibility CSV: one `(id_a, id_b, overlap)` row per unordered pair
//! with a nonzero fraction of shared 3D points. The reader symmetrizes and
//! rejects out-of-range fractions and conflicting duplicates.

use std::path::Path;

use crate::error::{Error, Result};
use crate::worldgen::CovisibilityMap;

pub fn write_covisibility(path: impl AsRef<Path>, map: &CovisibilityMap) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    writer.write_record(["id_a", "id_b", "overlap"])?;
    let mut pairs: Vec<(u64, u64, f64)> = map.iter().collect();
    pairs.sort_by_key(|&(a, b, _)| (a, b));
    for (a, b, overlap) in pairs {
        writer.write_record([a.to_string(), b.to_string(), overlap.to_string()])?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_covisibility(path: impl AsRef<Path>) -> Result<CovisibilityMap> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;

    let mut map = CovisibilityMap::new();
    let mut issues = Vec::new();
    for entry in reader.records() {
        let row = match entry {
            Ok(r) => r,
            Err(e) => {
                issues.push(format!("unreadable row: {e}"));
                continue;
            }
        };
        let line = row.position().map(|p| p.line()).unwrap_or_default();
        let parse = |idx: usize, name: &str| -> std::result::Result<f64, String> {
            row.get(idx)
                .unwrap_or("")
                .parse::<f64>()
                .map_err(|_| format!("line {line}: bad {name} '{}'", row.get(idx).unwrap_or("")))
        };
        let a = row.get(0).unwrap_or("").parse::<u64>();
        let b = row.get(1).unwrap_or("").parse::<u64>();
        let overlap = parse(2, "overlap");
        match (a, b, overlap) {
            (Ok(a), Ok(b), Ok(overlap)) => {
                if let Err(e) = map.insert(a, b, overlap) {
                    issues.push(format!("line {line}: {e}"));
                }
            }
            (a, b, overlap) => {
                if a.is_err() {
                    issues.push(format!("line {line}: bad id_a"));
                }
                if b.is_err() {
                    issues.push(format!("line {line}: bad id_b"));
                }
                if let Err(e) = overlap {
                    issues.push(e);
                }
            }
        }
    }

    if issues.is_empty() {
        Ok(map)
    } else {
        Err(Error::Ingestion {
            path: path.to_path_buf(),
            issues,
        })
    }
}
