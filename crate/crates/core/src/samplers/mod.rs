//! The five dataset-specific batch construction procedures and iteration
//! assembly.
//!
//! Every sampler is a pure function of its input data and an explicit RNG,
//! so batches replay exactly from a seed. All of them produce the same
//! shape: 32 classes x 4 images, all ids distinct.

mod cliques;
mod eigenplaces;
mod overlap;

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::{
    BatchSource, Quadruplet, SubBatch, TrainingIteration, CLASSES_PER_SUB_BATCH, QUADRUPLET_SIZE,
};
use crate::descriptor::Descriptor;
use crate::error::{Error, Result};
use crate::geo::PlanarPose;
use crate::trainer::EmbeddingTable;
use crate::worldgen::World;

pub use cliques::{mine_cliques, sample_clique_batch, CliqueBatchPlan};
pub use eigenplaces::{
    partition_eigenplaces, partition_eigenplaces_with, sample_eigenplaces_batch,
    select_facing_quadruplet, Cell, CellKey, CellPartition, Facing, DEFAULT_CELL_SIZE,
    DEFAULT_FACING_TOLERANCE, DEFAULT_FOCAL_DISTANCE,
};
pub use overlap::{
    check_cross_quadruplet_disjointness, sample_covis_quadruplet, sample_scan_quadruplet,
    DisjointnessViolation, OverlapCriterion, DEFAULT_QUADRUPLET_RETRIES, SCAN_MAX_DISTANCE,
    SCAN_MAX_HEADING,
};

/// Knobs of the sampling procedures. The defaults are declared here, not
/// inherited from anywhere: 15 m cells, focal points 10 m beyond the cell
/// boundary, a 45-degree facing tolerance, and a clique-graph refresh every
/// 2000 iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerSettings {
    pub cell_size: f64,
    pub focal_distance: f64,
    pub facing_tolerance_deg: f64,
    pub similarity_floor: f64,
    pub geo_floor: f64,
    pub clique_size: usize,
    pub clique_refresh_every: usize,
    pub quadruplet_retries: usize,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            cell_size: DEFAULT_CELL_SIZE,
            focal_distance: DEFAULT_FOCAL_DISTANCE,
            facing_tolerance_deg: DEFAULT_FACING_TOLERANCE,
            similarity_floor: 0.4,
            geo_floor: 100.0,
            clique_size: 4,
            clique_refresh_every: 2000,
            quadruplet_retries: DEFAULT_QUADRUPLET_RETRIES,
        }
    }
}

impl SamplerSettings {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("cell_size", self.cell_size),
            ("focal_distance", self.focal_distance),
            ("facing_tolerance_deg", self.facing_tolerance_deg),
            ("geo_floor", self.geo_floor),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(self.similarity_floor.is_finite()
            && self.similarity_floor > -1.0
            && self.similarity_floor <= 1.0)
        {
            return Err(Error::InvalidInput(format!(
                "similarity_floor must lie in (-1, 1], got {}",
                self.similarity_floor
            )));
        }
        if self.clique_size < 2 {
            return Err(Error::InvalidInput("clique_size must be >= 2".into()));
        }
        if self.clique_refresh_every == 0 {
            return Err(Error::InvalidInput(
                "clique_refresh_every must be >= 1".into(),
            ));
        }
        if self.quadruplet_retries == 0 {
            return Err(Error::InvalidInput(
                "quadruplet_retries must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// 32 uniformly random classes, 4 uniformly random images each, drawn
/// without replacement from classes that are pre-validated (>= 4 images,
/// 100 m separation checked at ingestion).
pub fn sample_gsv_batch(
    classes: &BTreeMap<u64, Vec<u64>>,
    rng: &mut ChaCha8Rng,
) -> Result<SubBatch> {
    let eligible: Vec<u64> = classes
        .iter()
        .filter(|(_, ids)| ids.len() >= QUADRUPLET_SIZE)
        .map(|(&c, _)| c)
        .collect();
    if eligible.len() < CLASSES_PER_SUB_BATCH {
        return Err(Error::InsufficientClasses {
            needed: CLASSES_PER_SUB_BATCH,
            available: eligible.len(),
        });
    }
    let chosen: Vec<u64> = eligible
        .choose_multiple(rng, CLASSES_PER_SUB_BATCH)
        .copied()
        .collect();
    let mut quadruplets = Vec::with_capacity(CLASSES_PER_SUB_BATCH);
    for class in chosen {
        let ids: Vec<u64> = classes[&class]
            .choose_multiple(rng, QUADRUPLET_SIZE)
            .copied()
            .collect();
        quadruplets.push(Quadruplet::new([ids[0], ids[1], ids[2], ids[3]], class)?);
    }
    SubBatch::new(quadruplets, BatchSource::GsvCities)
}

/// Checks the six positional sub-batches carry the expected source tags and
/// assembles the iteration.
pub fn assemble_iteration(
    sfxl_frontal: SubBatch,
    sfxl_lateral: SubBatch,
    gsv: SubBatch,
    msls: SubBatch,
    megascenes: SubBatch,
    scannet: SubBatch,
) -> Result<TrainingIteration> {
    let given = [
        (&sfxl_frontal, BatchSource::SfXlFrontal),
        (&sfxl_lateral, BatchSource::SfXlLateral),
        (&gsv, BatchSource::GsvCities),
        (&msls, BatchSource::Msls),
        (&megascenes, BatchSource::MegaScenes),
        (&scannet, BatchSource::ScanNet),
    ];
    for (sb, expected) in given {
        if sb.source() != expected {
            return Err(Error::Composition(format!(
                "expected a {expected} sub-batch, got {}",
                sb.source()
            )));
        }
    }
    TrainingIteration::new(vec![
        sfxl_frontal,
        sfxl_lateral,
        gsv,
        msls,
        megascenes,
        scannet,
    ])
}

/// Precomputed per-world sampling state: the cell partition, the class map,
/// and per-scene pose lists. Immutable and shareable; the only mutating
/// piece of the pipeline (the clique plan) is rebuilt externally and passed
/// in per call.
#[derive(Debug)]
pub struct SamplingContext<'w> {
    world: &'w World,
    settings: SamplerSettings,
    partition: CellPartition,
    classes: BTreeMap<u64, Vec<u64>>,
    scene_poses: BTreeMap<u64, Vec<(u64, PlanarPose)>>,
}

impl<'w> SamplingContext<'w> {
    pub fn build(world: &'w World, settings: &SamplerSettings) -> Result<Self> {
        settings.validate()?;
        let partition = partition_eigenplaces_with(
            world.images(),
            settings.cell_size,
            settings.focal_distance,
        )?;

        let mut classes: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
        for rec in world.images() {
            if let Some(class) = rec.class_id {
                classes.entry(class).or_default().push(rec.id);
            }
        }

        let mut scene_poses: BTreeMap<u64, Vec<(u64, PlanarPose)>> = BTreeMap::new();
        for (&scene, ids) in world.scenes() {
            let members = ids
                .iter()
                .map(|&id| {
                    world
                        .record(id)
                        .map(|r| (id, r.pose))
                        .ok_or_else(|| Error::NotFound(format!("image {id}")))
                })
                .collect::<Result<Vec<_>>>()?;
            scene_poses.insert(scene, members);
        }

        Ok(Self {
            world,
            settings: settings.clone(),
            partition,
            classes,
            scene_poses,
        })
    }

    pub fn partition(&self) -> &CellPartition {
        &self.partition
    }

    pub fn classes(&self) -> &BTreeMap<u64, Vec<u64>> {
        &self.classes
    }

    pub fn settings(&self) -> &SamplerSettings {
        &self.settings
    }

    /// Mines a fresh clique plan from the current table embeddings: each
    /// class is summarized by its normalized mean embedding and position
    /// centroid, and the similar-but-distant graph is rebuilt from those.
    pub fn build_clique_plan(&self, table: &EmbeddingTable) -> Result<CliqueBatchPlan> {
        let mut descriptors = BTreeMap::new();
        let mut positions = BTreeMap::new();
        for (&class, ids) in &self.classes {
            let dim = table.dim();
            let mut mean = vec![0.0f64; dim];
            let mut east = 0.0;
            let mut north = 0.0;
            for &id in ids {
                let row = table.embedding(id)?;
                for (d, m) in mean.iter_mut().enumerate() {
                    *m += row[d];
                }
                let pose = self
                    .world
                    .record(id)
                    .map(|r| r.pose)
                    .ok_or_else(|| Error::NotFound(format!("image {id}")))?;
                east += pose.east;
                north += pose.north;
            }
            let n = ids.len() as f64;
            let raw: Vec<f32> = mean.iter().map(|&v| (v / n) as f32).collect();
            let descriptor = match Descriptor::from_raw(raw) {
                Ok(d) => d,
                // A class whose mean embedding vanishes cannot be mined.
                Err(Error::DegenerateDescriptor(_)) => continue,
                Err(e) => return Err(e),
            };
            descriptors.insert(class, descriptor);
            positions.insert(class, PlanarPose::new(east / n, north / n, 0.0)?);
        }
        mine_cliques(
            &descriptors,
            &positions,
            self.settings.similarity_floor,
            self.settings.geo_floor,
            self.settings.clique_size,
        )
    }

    /// One quadruplet per scene, for 32 distinct scenes, skipping scenes
    /// the overlap constraint makes infeasible.
    fn sample_scene_batch(
        &self,
        source: BatchSource,
        rng: &mut ChaCha8Rng,
    ) -> Result<SubBatch> {
        let mut scene_ids: Vec<u64> = self.scene_poses.keys().copied().collect();
        scene_ids.shuffle(rng);
        let mut quadruplets = Vec::with_capacity(CLASSES_PER_SUB_BATCH);
        // A handful of attempts per scene; whole scenes are skipped on
        // failure rather than padded.
        let per_scene_retries = 8;
        for scene in scene_ids {
            let members = &self.scene_poses[&scene];
            if members.len() < QUADRUPLET_SIZE {
                continue;
            }
            let attempt = match source {
                BatchSource::MegaScenes => {
                    let ids: Vec<u64> = members.iter().map(|(id, _)| *id).collect();
                    sample_covis_quadruplet(
                        self.world.covisibility(),
                        scene,
                        &ids,
                        rng,
                        per_scene_retries,
                    )
                }
                BatchSource::ScanNet => {
                    sample_scan_quadruplet(scene, members, rng, per_scene_retries)
                }
                other => {
                    return Err(Error::InvalidInput(format!(
                        "{other} is not a scene-quadruplet source"
                    )))
                }
            };
            match attempt {
                Ok(q) => quadruplets.push(q),
                Err(Error::InfeasibleScene { .. }) => continue,
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
        SubBatch::new(quadruplets, source)
    }

    /// Draws one sub-batch from the requested source.
    pub fn sample(
        &self,
        source: BatchSource,
        plan: Option<&CliqueBatchPlan>,
        rng: &mut ChaCha8Rng,
    ) -> Result<SubBatch> {
        match source {
            BatchSource::SfXlFrontal => sample_eigenplaces_batch(
                &self.partition,
                Facing::Frontal,
                self.settings.facing_tolerance_deg,
                rng,
            ),
            BatchSource::SfXlLateral => sample_eigenplaces_batch(
                &self.partition,
                Facing::Lateral,
                self.settings.facing_tolerance_deg,
                rng,
            ),
            BatchSource::GsvCities => sample_gsv_batch(&self.classes, rng),
            BatchSource::Msls => {
                let fallback = CliqueBatchPlan::empty(
                    self.settings.similarity_floor,
                    self.settings.geo_floor,
                );
                sample_clique_batch(plan.unwrap_or(&fallback), &self.classes, rng)
            }
            BatchSource::MegaScenes | BatchSource::ScanNet => {
                self.sample_scene_batch(source, rng)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batch::tests_support::make_sub_batch;
    use crate::rng::rng_for;
    use crate::worldgen::{generate_world, WorldConfig};
    use std::collections::HashMap;

    fn test_world() -> World {
        generate_world(&WorldConfig {
            n_places: 48,
            images_per_place: 10,
            area_side: 1800.0,
            embed_dim: 16,
            seed: 21,
            ..WorldConfig::default()
        })
        .unwrap()
    }

    fn uniform_classes(n: u64, per: usize) -> BTreeMap<u64, Vec<u64>> {
        (0..n)
            .map(|c| (c, (0..per as u64).map(|i| c * 100 + i).collect()))
            .collect()
    }

    #[test]
    fn forced_gsv_batch_is_unique() {
        let classes = uniform_classes(32, 4);
        let mut rng = rng_for(0, 0, 0);
        let sb = sample_gsv_batch(&classes, &mut rng).unwrap();
        let mut got: Vec<u64> = sb.image_ids().collect();
        got.sort_unstable();
        let mut want: Vec<u64> = classes.values().flatten().copied().collect();
        want.sort_unstable();
        assert_eq!(got, want);
    }

    #[test]
    fn thirty_one_classes_is_insufficient() {
        let classes = uniform_classes(31, 4);
        let mut rng = rng_for(0, 0, 0);
        assert!(matches!(
            sample_gsv_batch(&classes, &mut rng),
            Err(Error::InsufficientClasses {
                needed: 32,
                available: 31
            })
        ));
    }

    #[test]
    fn gsv_class_frequencies_are_binomial() {
        // 100 classes, 10k draws: every class frequency within 3 sigma of
        // 32/100 per draw (seeded, so stable forever).
        let classes = uniform_classes(100, 4);
        let mut counts: HashMap<u64, u64> = HashMap::new();
        let draws = 10_000u64;
        for seed in 0..draws {
            let mut rng = rng_for(seed, 77, 0);
            let sb = sample_gsv_batch(&classes, &mut rng).unwrap();
            for q in sb.quadruplets() {
                *counts.entry(q.class_id()).or_default() += 1;
            }
        }
        let p = 32.0 / 100.0;
        let mean = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for class in 0..100u64 {
            let count = *counts.get(&class).unwrap_or(&0) as f64;
            assert!(
                (count - mean).abs() <= 3.0 * sigma,
                "class {class}: count {count}, mean {mean:.1}, sigma {sigma:.1}"
            );
        }
    }

    #[test]
    fn assemble_checks_positional_tags() {
        let batches: Vec<SubBatch> = BatchSource::ALL
            .iter()
            .enumerate()
            .map(|(i, &s)| make_sub_batch(i as u64 * 1000, i as u64 * 100, s))
            .collect();
        let [f, l, g, m, mega, scan]: [SubBatch; 6] = batches.try_into().unwrap();
        let it = assemble_iteration(f.clone(), l.clone(), g.clone(), m.clone(), mega.clone(), scan.clone())
            .unwrap();
        assert_eq!(it.image_count(), 768);

        // Swapped arguments produce a composition error.
        assert!(matches!(
            assemble_iteration(l, f, g, m, mega, scan),
            Err(Error::Composition(_))
        ));
    }

    #[test]
    fn context_samples_every_source_with_valid_structure() {
        let world = test_world();
        let context = SamplingContext::build(&world, &SamplerSettings::default()).unwrap();
        let table = EmbeddingTable::random_unit(
            world.images().iter().map(|r| r.id).collect(),
            16,
            0,
        )
        .unwrap();
        let plan = context.build_clique_plan(&table).unwrap();
        for (i, source) in BatchSource::ALL.iter().enumerate() {
            let mut rng = rng_for(3, 100, i as u64);
            let sb = context.sample(*source, Some(&plan), &mut rng).unwrap();
            assert_eq!(sb.source(), *source);
            assert_eq!(sb.quadruplets().len(), 32);
        }
    }

    #[test]
    fn full_iteration_assembles_from_context() {
        let world = test_world();
        let context = SamplingContext::build(&world, &SamplerSettings::default()).unwrap();
        let mut rng = rng_for(4, 200, 0);
        let f = context.sample(BatchSource::SfXlFrontal, None, &mut rng).unwrap();
        let l = context.sample(BatchSource::SfXlLateral, None, &mut rng).unwrap();
        let g = context.sample(BatchSource::GsvCities, None, &mut rng).unwrap();
        let m = context.sample(BatchSource::Msls, None, &mut rng).unwrap();
        let mega = context.sample(BatchSource::MegaScenes, None, &mut rng).unwrap();
        let scan = context.sample(BatchSource::ScanNet, None, &mut rng).unwrap();
        let it = assemble_iteration(f, l, g, m, mega, scan).unwrap();
        assert_eq!(it.sub_batches().len(), 6);
    }

    #[test]
    fn sampled_batches_satisfy_their_constraints() {
        let world = test_world();
        let context = SamplingContext::build(&world, &SamplerSettings::default()).unwrap();
        let poses: HashMap<u64, PlanarPose> =
            world.images().iter().map(|r| (r.id, r.pose)).collect();

        for seed in 0..20u64 {
            let mut rng = rng_for(seed, 300, 0);

            // Scan constraints: strict thresholds pairwise, plus
            // cross-quadruplet disjointness.
            let scan = context.sample(BatchSource::ScanNet, None, &mut rng).unwrap();
            for q in scan.quadruplets() {
                for (x, &a) in q.image_ids().iter().enumerate() {
                    for &b in q.image_ids().iter().skip(x + 1) {
                        let (pa, pb) = (&poses[&a], &poses[&b]);
                        assert!(crate::geo::planar_distance(pa, pb) < SCAN_MAX_DISTANCE);
                        assert!(
                            crate::geo::angular_difference(pa.heading(), pb.heading()).unwrap()
                                < SCAN_MAX_HEADING
                        );
                    }
                }
            }
            let violations = check_cross_quadruplet_disjointness(
                scan.quadruplets(),
                OverlapCriterion::ScanProximity {
                    poses: &poses,
                    max_distance: SCAN_MAX_DISTANCE,
                    max_heading_deg: SCAN_MAX_HEADING,
                },
            )
            .unwrap();
            assert!(violations.is_empty());

            // Covisibility constraints.
            let covis = context.sample(BatchSource::MegaScenes, None, &mut rng).unwrap();
            for q in covis.quadruplets() {
                for (x, &a) in q.image_ids().iter().enumerate() {
                    for &b in q.image_ids().iter().skip(x + 1) {
                        assert!(world.covisibility().get(a, b) >= 0.01);
                    }
                }
            }
        }
    }
}
