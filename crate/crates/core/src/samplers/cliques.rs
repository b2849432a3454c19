//! Hard-negative clique mining for batch construction.
//!
//! Builds batches whose classes look alike but sit far apart: the
//! constraint graph connects classes whose descriptor similarity is at
//! least `similarity_floor` AND whose planar distance is at least
//! `geo_floor`, and greedy maximal cliques of that graph are kept together
//! when assembling a sub-batch. Exact maximum clique is NP-hard; greedy
//! maximal extraction is the documented contract and is plenty for batch
//! mining.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand_chacha::ChaCha8Rng;

use crate::batch::{BatchSource, Quadruplet, SubBatch, CLASSES_PER_SUB_BATCH, QUADRUPLET_SIZE};
use crate::descriptor::Descriptor;
use crate::error::{Error, Result};
use crate::geo::{planar_distance, PlanarPose};

/// Disjoint cliques of class ids, each pairwise similar-but-distant.
#[derive(Debug, Clone, PartialEq)]
pub struct CliqueBatchPlan {
    cliques: Vec<Vec<u64>>,
    similarity_floor: f64,
    geo_floor: f64,
}

impl CliqueBatchPlan {
    /// A plan with no mined cliques; batch sampling falls back to random
    /// class selection.
    pub fn empty(similarity_floor: f64, geo_floor: f64) -> Self {
        Self {
            cliques: Vec::new(),
            similarity_floor,
            geo_floor,
        }
    }

    pub fn cliques(&self) -> &[Vec<u64>] {
        &self.cliques
    }

    pub fn similarity_floor(&self) -> f64 {
        self.similarity_floor
    }

    pub fn geo_floor(&self) -> f64 {
        self.geo_floor
    }

    pub fn class_count(&self) -> usize {
        self.cliques.iter().map(Vec::len).sum()
    }
}

/// Greedy disjoint maximal cliques of the similar-but-distant constraint
/// graph over class descriptors and positions.
///
/// Deterministic: nodes are visited in ascending id order. Returns an empty
/// plan when no clique of the requested size exists.
pub fn mine_cliques(
    descriptors: &BTreeMap<u64, Descriptor>,
    positions: &BTreeMap<u64, PlanarPose>,
    similarity_floor: f64,
    geo_floor: f64,
    clique_size: usize,
) -> Result<CliqueBatchPlan> {
    if clique_size < 2 {
        return Err(Error::InvalidInput(format!(
            "clique_size must be >= 2, got {clique_size}"
        )));
    }
    if !(similarity_floor.is_finite() && similarity_floor > -1.0 && similarity_floor <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "similarity_floor must lie in (-1, 1], got {similarity_floor}"
        )));
    }
    if !(geo_floor.is_finite() && geo_floor >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "geo_floor must be non-negative, got {geo_floor}"
        )));
    }
    for id in descriptors.keys() {
        if !positions.contains_key(id) {
            return Err(Error::InvalidInput(format!("class {id} lacks a position")));
        }
    }

    let ids: Vec<u64> = descriptors.keys().copied().collect();
    let adjacent = |a: u64, b: u64| -> bool {
        descriptors[&a].dot(&descriptors[&b]) >= similarity_floor
            && planar_distance(&positions[&a], &positions[&b]) >= geo_floor
    };

    let mut used = std::collections::HashSet::new();
    let mut cliques = Vec::new();
    for &seed in &ids {
        if used.contains(&seed) {
            continue;
        }
        let mut clique = vec![seed];
        for &candidate in &ids {
            if candidate == seed || used.contains(&candidate) {
                continue;
            }
            if clique.iter().all(|&member| adjacent(member, candidate)) {
                clique.push(candidate);
            }
        }
        if clique.len() >= clique_size {
            used.extend(clique.iter().copied());
            cliques.push(clique);
        }
    }

    Ok(CliqueBatchPlan {
        cliques,
        similarity_floor,
        geo_floor,
    })
}

/// Assembles a sub-batch from whole cliques, padding with random classes.
///
/// Cliques are taken in shuffled order and kept intact: a clique whose
/// eligible classes would overflow the 32-class budget is skipped in favor
/// of smaller ones. Classes with fewer than four images are skipped. The
/// remainder is padded with uniformly random eligible classes.
pub fn sample_clique_batch(
    plan: &CliqueBatchPlan,
    classes: &BTreeMap<u64, Vec<u64>>,
    rng: &mut ChaCha8Rng,
) -> Result<SubBatch> {
    let eligible =
        |class: u64| classes.get(&class).map_or(false, |ids| ids.len() >= QUADRUPLET_SIZE);

    let mut selected: Vec<u64> = Vec::with_capacity(CLASSES_PER_SUB_BATCH);
    let mut clique_order: Vec<usize> = (0..plan.cliques.len()).collect();
    clique_order.shuffle(rng);
    for ci in clique_order {
        let members: Vec<u64> = plan.cliques[ci]
            .iter()
            .copied()
            .filter(|&c| eligible(c) && !selected.contains(&c))
            .collect();
        if members.is_empty() || selected.len() + members.len() > CLASSES_PER_SUB_BATCH {
            continue;
        }
        selected.extend(members);
        if selected.len() == CLASSES_PER_SUB_BATCH {
            break;
        }
    }

    if selected.len() < CLASSES_PER_SUB_BATCH {
        let mut pool: Vec<u64> = classes
            .keys()
            .copied()
            .filter(|&c| eligible(c) && !selected.contains(&c))
            .collect();
        pool.shuffle(rng);
        selected.extend(pool.into_iter().take(CLASSES_PER_SUB_BATCH - selected.len()));
    }
    if selected.len() < CLASSES_PER_SUB_BATCH {
        return Err(Error::InsufficientClasses {
            needed: CLASSES_PER_SUB_BATCH,
            available: selected.len(),
        });
    }

    let mut quadruplets = Vec::with_capacity(CLASSES_PER_SUB_BATCH);
    for class in selected {
        let members = &classes[&class];
        let chosen: Vec<u64> = members.choose_multiple(rng, QUADRUPLET_SIZE).copied().collect();
        quadruplets.push(Quadruplet::new(
            [chosen[0], chosen[1], chosen[2], chosen[3]],
            class,
        )?);
    }
    SubBatch::new(quadruplets, BatchSource::Msls)
}
