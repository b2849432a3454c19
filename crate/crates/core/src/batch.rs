//! Uniform image records and the quadruplet / sub-batch / iteration
//! structure that every sampler produces and the trainer consumes.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::PlanarPose;

/// Images per quadruplet (one place seen from four viewpoints).
pub const QUADRUPLET_SIZE: usize = 4;
/// Places per sub-batch.
pub const CLASSES_PER_SUB_BATCH: usize = 32;
/// Images per sub-batch: 32 places x 4 images.
pub const SUB_BATCH_IMAGES: usize = CLASSES_PER_SUB_BATCH * QUADRUPLET_SIZE;
/// Sub-batches per training iteration.
pub const SUB_BATCHES_PER_ITERATION: usize = 6;

/// Which of the five dataset families a record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    SfXl,
    GsvCities,
    Msls,
    MegaScenes,
    ScanNet,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 5] = [
        DatasetKind::SfXl,
        DatasetKind::GsvCities,
        DatasetKind::Msls,
        DatasetKind::MegaScenes,
        DatasetKind::ScanNet,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetKind::SfXl => "sf-xl",
            DatasetKind::GsvCities => "gsv-cities",
            DatasetKind::Msls => "msls",
            DatasetKind::MegaScenes => "megascenes",
            DatasetKind::ScanNet => "scannet",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which sampling procedure produced a sub-batch. The street-level imagery
/// contributes two distinct sub-batches (frontal- and lateral-facing), so
/// this is a six-way tag even though there are five datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchSource {
    SfXlFrontal,
    SfXlLateral,
    GsvCities,
    Msls,
    MegaScenes,
    ScanNet,
}

impl BatchSource {
    pub const ALL: [BatchSource; 6] = [
        BatchSource::SfXlFrontal,
        BatchSource::SfXlLateral,
        BatchSource::GsvCities,
        BatchSource::Msls,
        BatchSource::MegaScenes,
        BatchSource::ScanNet,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            BatchSource::SfXlFrontal => "sf-xl-frontal",
            BatchSource::SfXlLateral => "sf-xl-lateral",
            BatchSource::GsvCities => "gsv-cities",
            BatchSource::Msls => "msls",
            BatchSource::MegaScenes => "megascenes",
            BatchSource::ScanNet => "scannet",
        }
    }
}

impl fmt::Display for BatchSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One image's metadata, uniform across all dataset families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub pose: PlanarPose,
    pub class_id: Option<u64>,
    pub scene_id: Option<u64>,
    pub source: DatasetKind,
}

/// Four distinct images of one place/class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quadruplet {
    image_ids: [u64; QUADRUPLET_SIZE],
    class_id: u64,
}

impl Quadruplet {
    pub fn new(image_ids: [u64; QUADRUPLET_SIZE], class_id: u64) -> Result<Self> {
        let distinct: HashSet<u64> = image_ids.iter().copied().collect();
        if distinct.len() != QUADRUPLET_SIZE {
            return Err(Error::InvalidInput(format!(
                "quadruplet ids must be distinct, got {image_ids:?}"
            )));
        }
        Ok(Self {
            image_ids,
            class_id,
        })
    }

    pub fn image_ids(&self) -> &[u64; QUADRUPLET_SIZE] {
        &self.image_ids
    }

    pub fn class_id(&self) -> u64 {
        self.class_id
    }
}

/// 32 quadruplets (128 images, 32 distinct classes) from one source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubBatch {
    quadruplets: Vec<Quadruplet>,
    source: BatchSource,
}

impl SubBatch {
    pub fn new(quadruplets: Vec<Quadruplet>, source: BatchSource) -> Result<Self> {
        if quadruplets.len() != CLASSES_PER_SUB_BATCH {
            return Err(Error::InvalidInput(format!(
                "sub-batch needs {CLASSES_PER_SUB_BATCH} quadruplets, got {}",
                quadruplets.len()
            )));
        }
        let classes: HashSet<u64> = quadruplets.iter().map(Quadruplet::class_id).collect();
        if classes.len() != CLASSES_PER_SUB_BATCH {
            return Err(Error::InvalidInput(format!(
                "sub-batch needs {CLASSES_PER_SUB_BATCH} distinct classes, got {}",
                classes.len()
            )));
        }
        let ids: HashSet<u64> = quadruplets
            .iter()
            .flat_map(|q| q.image_ids().iter().copied())
            .collect();
        if ids.len() != SUB_BATCH_IMAGES {
            return Err(Error::InvalidInput(format!(
                "sub-batch needs {SUB_BATCH_IMAGES} distinct images, got {}",
                ids.len()
            )));
        }
        Ok(Self {
            quadruplets,
            source,
        })
    }

    pub fn quadruplets(&self) -> &[Quadruplet] {
        &self.quadruplets
    }

    pub fn source(&self) -> BatchSource {
        self.source
    }

    /// Image ids in quadruplet order (fixed iteration order everywhere).
    pub fn image_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.quadruplets
            .iter()
            .flat_map(|q| q.image_ids().iter().copied())
    }

    /// Per-image class labels aligned with [`Self::image_ids`].
    pub fn labels(&self) -> Vec<u64> {
        self.quadruplets
            .iter()
            .flat_map(|q| std::iter::repeat(q.class_id()).take(QUADRUPLET_SIZE))
            .collect()
    }
}

/// Six sub-batches: frontal + lateral street-level, plus one per remaining
/// dataset. The fixed order below is also the loss summation order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingIteration {
    sub_batches: Vec<SubBatch>,
}

impl TrainingIteration {
    /// Expected source tags, in storage order.
    pub const EXPECTED_SOURCES: [BatchSource; SUB_BATCHES_PER_ITERATION] = BatchSource::ALL;

    pub fn new(sub_batches: Vec<SubBatch>) -> Result<Self> {
        if sub_batches.len() != SUB_BATCHES_PER_ITERATION {
            return Err(Error::Composition(format!(
                "iteration needs {SUB_BATCHES_PER_ITERATION} sub-batches, got {}",
                sub_batches.len()
            )));
        }
        let mut sources: Vec<BatchSource> = sub_batches.iter().map(SubBatch::source).collect();
        sources.sort_by_key(|s| s.as_str());
        let mut expected = Self::EXPECTED_SOURCES.to_vec();
        expected.sort_by_key(|s| s.as_str());
        if sources != expected {
            return Err(Error::Composition(format!(
                "iteration sources must be one of each of {:?}, got {:?}",
                Self::EXPECTED_SOURCES,
                sub_batches.iter().map(SubBatch::source).collect::<Vec<_>>()
            )));
        }
        // Canonical order: frontal, lateral, gsv, msls, megascenes, scannet.
        let mut ordered = Vec::with_capacity(SUB_BATCHES_PER_ITERATION);
        for want in Self::EXPECTED_SOURCES {
            let idx = sub_batches
                .iter()
                .position(|sb| sb.source() == want)
                .expect("source multiset verified above");
            ordered.push(sub_batches[idx].clone());
        }
        Ok(Self {
            sub_batches: ordered,
        })
    }

    pub fn sub_batches(&self) -> &[SubBatch] {
        &self.sub_batches
    }

    /// Total images per iteration (128 x 6 = 768, with repeats possible
    /// across sub-batches).
    pub fn image_count(&self) -> usize {
        self.sub_batches.iter().map(|sb| sb.quadruplets().len() * QUADRUPLET_SIZE).sum()
    }
}
