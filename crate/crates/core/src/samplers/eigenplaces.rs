//! Cell-partition sampler for dense street-level imagery.
//!
//! Images are bucketed into square cells; each cell becomes a class. A
//! cell's principal direction (dominant eigenvector of the 2x2 position
//! covariance) defines a frontal focal point beyond the cell boundary and
//! a lateral focal point along the perpendicular, and quadruplets are drawn
//! from members whose view heading points at the requested focal point.
//! Classes from different cells share no images by construction.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand_chacha::ChaCha8Rng;

use crate::batch::{BatchSource, ImageRecord, Quadruplet, SubBatch, CLASSES_PER_SUB_BATCH};
use crate::error::{Error, Result};
use crate::geo::{angular_difference, bearing_to, PlanarPose};

/// Default cell size in meters.
pub const DEFAULT_CELL_SIZE: f64 = 15.0;
/// Default focal-point distance beyond the cell boundary, meters.
pub const DEFAULT_FOCAL_DISTANCE: f64 = 10.0;
/// Default angular tolerance (degrees) for facing a focal point.
pub const DEFAULT_FACING_TOLERANCE: f64 = 45.0;

/// Which focal point a quadruplet should face.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Facing {
    Frontal,
    Lateral,
}

impl Facing {
    pub fn batch_source(&self) -> BatchSource {
        match self {
            Facing::Frontal => BatchSource::SfXlFrontal,
            Facing::Lateral => BatchSource::SfXlLateral,
        }
    }
}

/// Grid cell coordinates.
pub type CellKey = (i64, i64);

/// One cell of the partition.
#[derive(Debug, Clone)]
pub struct Cell {
    pub class_id: u64,
    pub members: Vec<u64>,
    pub centroid: [f64; 2],
    /// Unit principal direction, canonicalized to the north > 0 half-plane
    /// (east on ties).
    pub principal: [f64; 2],
    pub frontal_focal: [f64; 2],
    pub lateral_focal: [f64; 2],
    /// Set when all member positions coincide and the principal direction
    /// fell back to due east.
    pub degenerate: bool,
}

/// A partition of images into square cells with per-cell focal geometry.
#[derive(Debug, Clone)]
pub struct CellPartition {
    cell_size: f64,
    cells: BTreeMap<CellKey, Cell>,
    poses: BTreeMap<u64, PlanarPose>,
}

impl CellPartition {
    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn cells(&self) -> &BTreeMap<CellKey, Cell> {
        &self.cells
    }

    pub fn cell(&self, key: CellKey) -> Option<&Cell> {
        self.cells.get(&key)
    }

    pub fn pose(&self, id: u64) -> Option<&PlanarPose> {
        self.poses.get(&id)
    }

    fn focal_of(&self, cell: &Cell, facing: Facing) -> [f64; 2] {
        match facing {
            Facing::Frontal => cell.frontal_focal,
            Facing::Lateral => cell.lateral_focal,
        }
    }

    /// Members of `cell` whose heading points at the facing's focal point
    /// within `tolerance_deg`.
    pub fn qualifying_members(
        &self,
        cell: &Cell,
        facing: Facing,
        tolerance_deg: f64,
    ) -> Vec<u64> {
        let focal = self.focal_of(cell, facing);
        cell.members
            .iter()
            .copied()
            .filter(|id| {
                let pose = &self.poses[id];
                let bearing = bearing_to(pose, focal[0], focal[1]);
                angular_difference(pose.heading(), bearing)
                    .map(|d| d <= tolerance_deg)
                    .unwrap_or(false)
            })
            .collect()
    }

    /// Cells with at least four members facing the requested focal point.
    pub fn usable_cells(&self, facing: Facing, tolerance_deg: f64) -> Vec<CellKey> {
        self.cells
            .iter()
            .filter(|(_, cell)| self.qualifying_members(cell, facing, tolerance_deg).len() >= 4)
            .map(|(&key, _)| key)
            .collect()
    }
}

/// Canonicalizes a unit vector to the north > 0 half-plane (east on ties).
fn canonicalize(v: [f64; 2]) -> [f64; 2] {
    if v[1] < -1e-12 || (v[1].abs() <= 1e-12 && v[0] < 0.0) {
        [-v[0], -v[1]]
    } else {
        v
    }
}

/// Distance from `origin` along `dir` to the boundary of the cell box.
fn exit_distance(origin: [f64; 2], dir: [f64; 2], key: CellKey, cell_size: f64) -> f64 {
    let lo = [key.0 as f64 * cell_size, key.1 as f64 * cell_size];
    let hi = [lo[0] + cell_size, lo[1] + cell_size];
    let mut t_exit = f64::INFINITY;
    for axis in 0..2 {
        if dir[axis] > 1e-12 {
            t_exit = t_exit.min((hi[axis] - origin[axis]) / dir[axis]);
        } else if dir[axis] < -1e-12 {
            t_exit = t_exit.min((lo[axis] - origin[axis]) / dir[axis]);
        }
    }
    if t_exit.is_finite() {
        t_exit.max(0.0)
    } else {
        0.0
    }
}

/// Partitions images into square cells with default focal geometry.
pub fn partition_eigenplaces(images: &[ImageRecord], cell_size: f64) -> Result<CellPartition> {
    partition_eigenplaces_with(images, cell_size, DEFAULT_FOCAL_DISTANCE)
}

/// Partitions images into square cells of `cell_size` meters and computes
/// each cell's principal direction and focal points, with the focal points
/// `focal_distance` meters beyond the cell boundary.
pub fn partition_eigenplaces_with(
    images: &[ImageRecord],
    cell_size: f64,
    focal_distance: f64,
) -> Result<CellPartition> {
    if images.is_empty() {
        return Err(Error::InvalidInput("no images to partition".into()));
    }
    if !(cell_size.is_finite() && cell_size > 0.0) {
        return Err(Error::InvalidInput(format!(
            "cell_size must be positive, got {cell_size}"
        )));
    }
    if !(focal_distance.is_finite() && focal_distance > 0.0) {
        return Err(Error::InvalidInput(format!(
            "focal_distance must be positive, got {focal_distance}"
        )));
    }

    let mut buckets: BTreeMap<CellKey, Vec<u64>> = BTreeMap::new();
    let mut poses: BTreeMap<u64, PlanarPose> = BTreeMap::new();
    for rec in images {
        if poses.insert(rec.id, rec.pose).is_some() {
            return Err(Error::InvalidInput(format!("duplicate image id {}", rec.id)));
        }
        let key = (
            (rec.pose.east / cell_size).floor() as i64,
            (rec.pose.north / cell_size).floor() as i64,
        );
        buckets.entry(key).or_default().push(rec.id);
    }

    let mut cells = BTreeMap::new();
    for (class_id, (key, members)) in buckets.into_iter().enumerate() {
        let n = members.len() as f64;
        let mut centroid = [0.0f64; 2];
        for id in &members {
            let p = &poses[id];
            centroid[0] += p.east;
            centroid[1] += p.north;
        }
        centroid[0] /= n;
        centroid[1] /= n;

        // 2x2 position covariance.
        let (mut cov_ee, mut cov_en, mut cov_nn) = (0.0f64, 0.0f64, 0.0f64);
        for id in &members {
            let p = &poses[id];
            let de = p.east - centroid[0];
            let dn = p.north - centroid[1];
            cov_ee += de * de;
            cov_en += de * dn;
            cov_nn += dn * dn;
        }
        cov_ee /= n;
        cov_en /= n;
        cov_nn /= n;

        let degenerate = cov_ee.abs() < 1e-12 && cov_en.abs() < 1e-12 && cov_nn.abs() < 1e-12;
        let principal = if degenerate {
            [1.0, 0.0]
        } else {
            // Dominant eigenvector of [[ee, en], [en, nn]].
            let angle = 0.5 * (2.0 * cov_en).atan2(cov_ee - cov_nn);
            canonicalize([angle.cos(), angle.sin()])
        };
        let lateral = [-principal[1], principal[0]];

        let focal = |dir: [f64; 2]| -> [f64; 2] {
            let t = exit_distance(centroid, dir, key, cell_size) + focal_distance;
            [centroid[0] + t * dir[0], centroid[1] + t * dir[1]]
        };

        cells.insert(
            key,
            Cell {
                class_id: class_id as u64,
                members,
                centroid,
                principal,
                frontal_focal: focal(principal),
                lateral_focal: focal(lateral),
                degenerate,
            },
        );
    }

    Ok(CellPartition {
        cell_size,
        cells,
        poses,
    })
}

/// Draws four distinct members of `cell` facing the requested focal point.
///
/// Fails with an insufficient-members error when fewer than four members
/// qualify; the caller resamples another cell.
pub fn select_facing_quadruplet(
    partition: &CellPartition,
    cell_key: CellKey,
    facing: Facing,
    tolerance_deg: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Quadruplet> {
    let cell = partition
        .cell(cell_key)
        .ok_or_else(|| Error::NotFound(format!("cell {cell_key:?}")))?;
    let qualifying = partition.qualifying_members(cell, facing, tolerance_deg);
    if qualifying.len() < 4 {
        return Err(Error::InsufficientMembers(format!(
            "cell {cell_key:?} has {} members facing {facing:?} (need 4)",
            qualifying.len()
        )));
    }
    let chosen: Vec<u64> = qualifying.choose_multiple(rng, 4).copied().collect();
    Quadruplet::new([chosen[0], chosen[1], chosen[2], chosen[3]], cell.class_id)
}

/// Builds a full frontal- or lateral-facing sub-batch from 32 distinct cells.
pub fn sample_eigenplaces_batch(
    partition: &CellPartition,
    facing: Facing,
    tolerance_deg: f64,
    rng: &mut ChaCha8Rng,
) -> Result<SubBatch> {
    let mut usable = partition.usable_cells(facing, tolerance_deg);
    if usable.len() < CLASSES_PER_SUB_BATCH {
        return Err(Error::InsufficientClasses {
            needed: CLASSES_PER_SUB_BATCH,
            available: usable.len(),
        });
    }
    usable.shuffle(rng);
    let mut quadruplets = Vec::with_capacity(CLASSES_PER_SUB_BATCH);
    for key in usable {
        match select_facing_quadruplet(partition, key, facing, tolerance_deg, rng) {
            Ok(q) => quadruplets.push(q),
            Err(Error::InsufficientMembers(_)) => continue,
            Err(e) => return Err(e),
        }
        if quadruplets.len() == CLASSES_PER_SUB_BATCH {
            break;
        }
    }
    if quadruplets.len() < CLASSES_PER_SUB_BATCH {
        return Err(Error::InsufficientClasses {
            needed: CLASSES_PER_SUB_BATCH,
            available: quadruplets.len(),
        });
    }
    SubBatch::new(quadruplets, facing.batch_source())
}
