//! Text metadata format: one CSV row per image.
//!
//! Columns: `id,east,north,heading,class_id,scene_id,source`, with empty
//! cells for the optional class and scene. Human-diffable by design;
//! ingestion validates ids, required fields, and the 100 m class-separation
//! rule for street-view-class records.

use std::collections::BTreeMap;
use std::path::Path;

use crate::batch::{DatasetKind, ImageRecord};
use crate::error::{Error, Result};
use crate::geo::{planar_distance, PlanarPose};

/// Minimum centroid distance between distinct street-view classes.
pub const GSV_MIN_CLASS_SEPARATION: f64 = 100.0;

pub fn write_metadata(path: impl AsRef<Path>, records: &[ImageRecord]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    writer.write_record(["id", "east", "north", "heading", "class_id", "scene_id", "source"])?;
    for rec in records {
        writer.write_record([
            rec.id.to_string(),
            rec.pose.east.to_string(),
            rec.pose.north.to_string(),
            rec.pose.heading().to_string(),
            rec.class_id.map(|c| c.to_string()).unwrap_or_default(),
            rec.scene_id.map(|s| s.to_string()).unwrap_or_default(),
            rec.source.as_str().to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Reads and validates image metadata. All problems are collected and
/// reported together, each tagged with its line number.
pub fn read_metadata(path: impl AsRef<Path>) -> Result<Vec<ImageRecord>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;

    let mut issues: Vec<String> = Vec::new();
    let mut records: Vec<ImageRecord> = Vec::new();
    let mut seen_ids = std::collections::HashSet::new();

    for entry in reader.records() {
        let row = match entry {
            Ok(r) => r,
            Err(e) => {
                issues.push(format!("unreadable row: {e}"));
                continue;
            }
        };
        let line = row
            .position()
            .map(|p| p.line())
            .unwrap_or_default();
        let field = |idx: usize| row.get(idx).unwrap_or("");

        let mut row_issues = Vec::new();
        let id = field(0).parse::<u64>().map_err(|_| {
            row_issues.push(format!("line {line}: bad or missing id '{}'", field(0)));
        });
        let east = field(1).parse::<f64>().map_err(|_| {
            row_issues.push(format!("line {line}: bad or missing east '{}'", field(1)));
        });
        let north = field(2).parse::<f64>().map_err(|_| {
            row_issues.push(format!("line {line}: bad or missing north '{}'", field(2)));
        });
        let heading = field(3).parse::<f64>().map_err(|_| {
            row_issues.push(format!("line {line}: bad or missing heading '{}'", field(3)));
        });
        let optional = |idx: usize, name: &str, row_issues: &mut Vec<String>| -> Option<u64> {
            let raw = field(idx);
            if raw.is_empty() {
                None
            } else {
                match raw.parse::<u64>() {
                    Ok(v) => Some(v),
                    Err(_) => {
                        row_issues.push(format!("line {line}: bad {name} '{raw}'"));
                        None
                    }
                }
            }
        };
        let class_id = optional(4, "class_id", &mut row_issues);
        let scene_id = optional(5, "scene_id", &mut row_issues);
        let source = DatasetKind::parse(field(6));
        if source.is_none() {
            row_issues.push(format!("line {line}: unknown source '{}'", field(6)));
        }

        if !row_issues.is_empty() {
            issues.extend(row_issues);
            continue;
        }
        let (id, east, north, heading) =
            (id.unwrap(), east.unwrap(), north.unwrap(), heading.unwrap());
        let pose = match PlanarPose::new(east, north, heading) {
            Ok(p) => p,
            Err(e) => {
                issues.push(format!("line {line}: {e}"));
                continue;
            }
        };
        if !seen_ids.insert(id) {
            issues.push(format!("line {line}: duplicate id {id}"));
            continue;
        }
        let source = source.unwrap();
        if source == DatasetKind::GsvCities && class_id.is_none() {
            issues.push(format!(
                "line {line}: gsv-cities record {id} lacks a class_id"
            ));
            continue;
        }
        records.push(ImageRecord {
            id,
            pose,
            class_id,
            scene_id,
            source,
        });
    }

    // Street-view classes must sit at least 100 m apart (centroid to
    // centroid).
    let mut gsv_classes: BTreeMap<u64, (f64, f64, usize)> = BTreeMap::new();
    for rec in &records {
        if rec.source == DatasetKind::GsvCities {
            if let Some(class) = rec.class_id {
                let entry = gsv_classes.entry(class).or_insert((0.0, 0.0, 0));
                entry.0 += rec.pose.east;
                entry.1 += rec.pose.north;
                entry.2 += 1;
            }
        }
    }
    let centroids: Vec<(u64, PlanarPose)> = gsv_classes
        .iter()
        .map(|(&class, &(e, n, c))| {
            let pose = PlanarPose::new(e / c as f64, n / c as f64, 0.0).expect("finite centroid");
            (class, pose)
        })
        .collect();
    for i in 0..centroids.len() {
        for j in (i + 1)..centroids.len() {
            let d = planar_distance(&centroids[i].1, &centroids[j].1);
            if d < GSV_MIN_CLASS_SEPARATION {
                issues.push(format!(
                    "gsv-cities classes {} and {} are {d:.2} m apart (minimum {GSV_MIN_CLASS_SEPARATION} m)",
                    centroids[i].0, centroids[j].0
                ));
            }
        }
    }

    if issues.is_empty() {
        Ok(records)
    } else {
        Err(Error::Ingestion {
            path: path.to_path_buf(),
            issues,
        })
    }
}
