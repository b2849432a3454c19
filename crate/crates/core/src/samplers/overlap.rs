//! Overlap-constrained quadruplet sampling for reconstruction and scan
//! data, plus the cross-quadruplet disjointness check.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::batch::{Quadruplet, QUADRUPLET_SIZE};
use crate::error::{Error, Result};
use crate::geo::{angular_difference, planar_distance, PlanarPose};
use crate::worldgen::{CovisibilityMap, COVISIBILITY_OVERLAP_THRESHOLD};

/// Scan pairs are "visually overlapping" strictly below this distance...
pub const SCAN_MAX_DISTANCE: f64 = 10.0;
/// ...and strictly below this heading difference (degrees).
pub const SCAN_MAX_HEADING: f64 = 30.0;

/// Bounded-retry budget for the greedy quadruplet searches.
pub const DEFAULT_QUADRUPLET_RETRIES: usize = 64;

/// Greedily grows a quadruplet from shuffled candidates, restarting up to
/// `retries` times. `compatible(a, b)` must be symmetric.
fn grow_quadruplet(
    ids: &[u64],
    rng: &mut ChaCha8Rng,
    retries: usize,
    compatible: impl Fn(u64, u64) -> bool,
) -> Option<[u64; QUADRUPLET_SIZE]> {
    if ids.len() < QUADRUPLET_SIZE {
        return None;
    }
    let mut pool = ids.to_vec();
    for _ in 0..retries {
        pool.shuffle(rng);
        let mut chosen: Vec<u64> = Vec::with_capacity(QUADRUPLET_SIZE);
        for &candidate in &pool {
            if chosen.iter().all(|&m| compatible(m, candidate)) {
                chosen.push(candidate);
                if chosen.len() == QUADRUPLET_SIZE {
                    return Some([chosen[0], chosen[1], chosen[2], chosen[3]]);
                }
            }
        }
    }
    None
}

/// Four images of one scene with pairwise covisibility of at least 1%.
///
/// The search is randomized with a bounded retry budget; scenes where it
/// fails are reported as infeasible and skipped by callers.
pub fn sample_covis_quadruplet(
    covisibility: &CovisibilityMap,
    scene_id: u64,
    scene_ids: &[u64],
    rng: &mut ChaCha8Rng,
    retries: usize,
) -> Result<Quadruplet> {
    if scene_ids.is_empty() {
        return Err(Error::InvalidInput(format!("scene {scene_id} is empty")));
    }
    grow_quadruplet(scene_ids, rng, retries, |a, b| {
        covisibility.get(a, b) >= COVISIBILITY_OVERLAP_THRESHOLD
    })
    .map(|ids| Quadruplet::new(ids, scene_id))
    .unwrap_or_else(|| {
        Err(Error::InfeasibleScene {
            scene: scene_id,
            reason: format!(
                "no quadruplet with pairwise overlap >= {COVISIBILITY_OVERLAP_THRESHOLD} found \
                 within {retries} attempts"
            ),
        })
    })
}

/// Four images of one scan, every pair strictly less than 10 m and 30 deg
/// apart.
pub fn sample_scan_quadruplet(
    scene_id: u64,
    members: &[(u64, PlanarPose)],
    rng: &mut ChaCha8Rng,
    retries: usize,
) -> Result<Quadruplet> {
    if members.is_empty() {
        return Err(Error::InvalidInput(format!("scene {scene_id} is empty")));
    }
    let poses: HashMap<u64, PlanarPose> = members.iter().copied().collect();
    let ids: Vec<u64> = members.iter().map(|(id, _)| *id).collect();
    grow_quadruplet(&ids, rng, retries, |a, b| {
        let (pa, pb) = (&poses[&a], &poses[&b]);
        planar_distance(pa, pb) < SCAN_MAX_DISTANCE
            && angular_difference(pa.heading(), pb.heading())
                .map(|d| d < SCAN_MAX_HEADING)
                .unwrap_or(false)
    })
    .map(|ids| Quadruplet::new(ids, scene_id))
    .unwrap_or_else(|| {
        Err(Error::InfeasibleScene {
            scene: scene_id,
            reason: format!(
                "no quadruplet with pairwise distance < {SCAN_MAX_DISTANCE} m and heading \
                 difference < {SCAN_MAX_HEADING} deg found within {retries} attempts"
            ),
        })
    })
}

/// How two images from different quadruplets count as visually overlapping.
#[derive(Debug, Clone, Copy)]
pub enum OverlapCriterion<'a> {
    /// Scan-style proximity: strictly closer than both thresholds.
    ScanProximity {
        poses: &'a HashMap<u64, PlanarPose>,
        max_distance: f64,
        max_heading_deg: f64,
    },
    /// Reconstruction-style: recorded covisibility at or above the floor.
    Covisibility {
        map: &'a CovisibilityMap,
        min_overlap: f64,
    },
}

/// A cross-quadruplet pair that violates the no-overlap requirement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DisjointnessViolation {
    pub quadruplet_a: usize,
    pub quadruplet_b: usize,
    pub image_a: u64,
    pub image_b: u64,
}

/// Scans every image pair spanning two quadruplets and reports the pairs
/// that meet the overlap criterion. Empty output means the batch satisfies
/// the cross-quadruplet disjointness requirement.
pub fn check_cross_quadruplet_disjointness(
    quadruplets: &[Quadruplet],
    criterion: OverlapCriterion<'_>,
) -> Result<Vec<DisjointnessViolation>> {
    let overlapping = |a: u64, b: u64| -> Result<bool> {
        match criterion {
            OverlapCriterion::ScanProximity {
                poses,
                max_distance,
                max_heading_deg,
            } => {
                if a == b {
                    return Ok(true);
                }
                let pa = poses
                    .get(&a)
                    .ok_or_else(|| Error::NotFound(format!("pose of image {a}")))?;
                let pb = poses
                    .get(&b)
                    .ok_or_else(|| Error::NotFound(format!("pose of image {b}")))?;
                Ok(planar_distance(pa, pb) < max_distance
                    && angular_difference(pa.heading(), pb.heading())? < max_heading_deg)
            }
            OverlapCriterion::Covisibility { map, min_overlap } => {
                Ok(map.get(a, b) >= min_overlap)
            }
        }
    };

    let mut violations = Vec::new();
    for qa in 0..quadruplets.len() {
        for qb in (qa + 1)..quadruplets.len() {
            for &a in quadruplets[qa].image_ids() {
                for &b in quadruplets[qb].image_ids() {
                    if overlapping(a, b)? {
                        violations.push(DisjointnessViolation {
                            quadruplet_a: qa,
                            quadruplet_b: qb,
                            image_a: a,
                            image_b: b,
                        });
                    }
                }
            }
        }
    }
    Ok(violations)
}
