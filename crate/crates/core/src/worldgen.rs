//! Deterministic synthetic worlds.
//!
//! A world is a desk-scale stand-in for the five training datasets: places
//! scattered over a planar area with a guaranteed minimum separation, a few
//! cameras per place (half facing along the local street axis, half facing
//! sideways), a covisibility map derived from a closed-form geometric decay,
//! and a ground-truth descriptor process (random Fourier features of pose
//! plus seeded noise). Every piece is a pure function of the config seed, so
//! regenerating with the same config reproduces the world byte for byte.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::sync::OnceLock;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::{DatasetKind, ImageRecord};
use crate::descriptor::Descriptor;
use crate::error::{Error, Result};
use crate::geo::{angular_difference, normalize_heading, planar_distance, PlanarPose};
use crate::rng::{rng_for, streams};

/// Length scale (meters) of the descriptor process's positional kernel.
const DESCRIPTOR_POS_SCALE: f64 = 25.0;
/// Length scale of the descriptor process's heading kernel, on the unit
/// circle embedding of the heading.
const DESCRIPTOR_HEAD_SCALE: f64 = 0.8;
/// Covisibility at or above this is "visual overlap" for reconstructions.
pub const COVISIBILITY_OVERLAP_THRESHOLD: f64 = 0.01;
/// Same-scene covisibility at or above this marks an easy landmark positive.
pub const LANDMARK_EASY_FLOOR: f64 = 0.05;

/// Sparse symmetric map of pairwise covisibility (fraction of shared 3D
/// points, in `[0, 1]`). The diagonal is implicitly 1; absent pairs are 0.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CovisibilityMap {
    entries: HashMap<(u64, u64), f64>,
}

impl CovisibilityMap {
    pub fn new() -> Self {
        Self::default()
    }

    fn key(a: u64, b: u64) -> (u64, u64) {
        if a <= b {
            (a, b)
        } else {
            (b, a)
        }
    }

    /// Records `overlap(a, b)`; symmetry is inherent in the storage.
    ///
    /// Zero entries are dropped, self-pairs are rejected (the diagonal is
    /// fixed at 1), and re-inserting a pair with a different value is a
    /// conflict.
    pub fn insert(&mut self, a: u64, b: u64, overlap: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&overlap) {
            return Err(Error::InvalidInput(format!(
                "overlap must be in [0,1], got {overlap} for pair ({a},{b})"
            )));
        }
        if a == b {
            if overlap == 1.0 {
                return Ok(());
            }
            return Err(Error::InvalidInput(format!(
                "self overlap of {a} must be 1, got {overlap}"
            )));
        }
        if overlap == 0.0 {
            return Ok(());
        }
        let key = Self::key(a, b);
        if let Some(&existing) = self.entries.get(&key) {
            if existing != overlap {
                return Err(Error::InvalidInput(format!(
                    "conflicting overlap for pair ({a},{b}): {existing} vs {overlap}"
                )));
            }
            return Ok(());
        }
        self.entries.insert(key, overlap);
        Ok(())
    }

    /// Overlap fraction for `(a, b)`; 1 on the diagonal, 0 when unrecorded.
    pub fn get(&self, a: u64, b: u64) -> f64 {
        if a == b {
            return 1.0;
        }
        self.entries.get(&Self::key(a, b)).copied().unwrap_or(0.0)
    }

    /// Recorded (nonzero, off-diagonal) pairs in canonical (low, high) order.
    pub fn iter(&self) -> impl Iterator<Item = (u64, u64, f64)> + '_ {
        self.entries.iter().map(|(&(a, b), &v)| (a, b, v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Parameters of the synthetic world generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    /// Number of places (classes). Must be >= 32 so a sub-batch is samplable.
    pub n_places: usize,
    /// Cameras per place. Must be >= 4 so a quadruplet is samplable.
    pub images_per_place: usize,
    /// Side length (meters) of the square area places are packed into.
    pub area_side: f64,
    /// Std-dev of the per-component noise added to ground-truth descriptors.
    pub noise_sigma: f64,
    /// Dimension of ground-truth descriptors.
    pub embed_dim: usize,
    pub seed: u64,
    /// Minimum planar distance between images of different places.
    pub min_place_separation: f64,
    /// Half-length (meters) of the camera strip at each place.
    pub place_radius: f64,
    /// Distance beyond which covisibility is exactly 0.
    pub covis_max_distance: f64,
    /// Heading difference (degrees) beyond which covisibility is exactly 0.
    pub covis_max_heading: f64,
    /// Max heading jitter (degrees) within a facing group.
    pub heading_jitter: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_places: 64,
            images_per_place: 10,
            area_side: 2000.0,
            noise_sigma: 0.3,
            embed_dim: 64,
            seed: 0,
            min_place_separation: 100.0,
            place_radius: 2.0,
            covis_max_distance: 12.0,
            covis_max_heading: 45.0,
            heading_jitter: 8.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_places < 32 {
            return Err(Error::InvalidInput(format!(
                "n_places must be >= 32, got {}",
                self.n_places
            )));
        }
        if self.images_per_place < 4 {
            return Err(Error::InvalidInput(format!(
                "images_per_place must be >= 4, got {}",
                self.images_per_place
            )));
        }
        if self.embed_dim == 0 {
            return Err(Error::InvalidInput("embed_dim must be positive".into()));
        }
        for (name, v) in [
            ("area_side", self.area_side),
            ("min_place_separation", self.min_place_separation),
            ("place_radius", self.place_radius),
            ("covis_max_distance", self.covis_max_distance),
            ("covis_max_heading", self.covis_max_heading),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "noise_sigma must be non-negative, got {}",
                self.noise_sigma
            )));
        }
        if !(self.heading_jitter.is_finite() && self.heading_jitter >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "heading_jitter must be non-negative, got {}",
                self.heading_jitter
            )));
        }
        Ok(())
    }

    /// Max distance from a place center to any of its cameras.
    pub fn place_extent(&self) -> f64 {
        // Strip of half-length `place_radius` with 15% perpendicular jitter.
        self.place_radius * (1.0f64 + 0.15 * 0.15).sqrt()
    }
}

/// Synthetic ground-truth universe: records, covisibility, scene grouping,
/// and the seeded descriptor process.
#[derive(Debug)]
pub struct World {
    images: Vec<ImageRecord>,
    covisibility: CovisibilityMap,
    scenes: BTreeMap<u64, Vec<u64>>,
    descriptor_seed: u64,
    embed_dim: usize,
    noise_sigma: f64,
    id_index: HashMap<u64, usize>,
    basis: OnceLock<Vec<([f64; 4], f64)>>,
}

impl World {
    pub fn new(
        images: Vec<ImageRecord>,
        covisibility: CovisibilityMap,
        scenes: BTreeMap<u64, Vec<u64>>,
        descriptor_seed: u64,
        embed_dim: usize,
        noise_sigma: f64,
    ) -> Result<Self> {
        let mut id_index = HashMap::with_capacity(images.len());
        for (i, rec) in images.iter().enumerate() {
            if id_index.insert(rec.id, i).is_some() {
                return Err(Error::InvalidInput(format!(
                    "duplicate image id {} in world",
                    rec.id
                )));
            }
        }
        for (a, b, _) in covisibility.iter() {
            if !id_index.contains_key(&a) || !id_index.contains_key(&b) {
                return Err(Error::InvalidInput(format!(
                    "covisibility references unknown pair ({a},{b})"
                )));
            }
        }
        for (scene, ids) in &scenes {
            for id in ids {
                if !id_index.contains_key(id) {
                    return Err(Error::InvalidInput(format!(
                        "scene {scene} references unknown image {id}"
                    )));
                }
            }
        }
        Ok(Self {
            images,
            covisibility,
            scenes,
            descriptor_seed,
            embed_dim,
            noise_sigma,
            id_index,
            basis: OnceLock::new(),
        })
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.images
    }

    pub fn record(&self, id: u64) -> Option<&ImageRecord> {
        self.id_index.get(&id).map(|&i| &self.images[i])
    }

    pub fn covisibility(&self) -> &CovisibilityMap {
        &self.covisibility
    }

    pub fn scenes(&self) -> &BTreeMap<u64, Vec<u64>> {
        &self.scenes
    }

    pub fn descriptor_seed(&self) -> u64 {
        self.descriptor_seed
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    fn basis(&self) -> &[([f64; 4], f64)] {
        self.basis.get_or_init(|| {
            let mut rng = rng_for(self.descriptor_seed, streams::DESCRIPTOR_BASIS, 0);
            (0..self.embed_dim)
                .map(|_| {
                    let w = [
                        standard_normal(&mut rng) / DESCRIPTOR_POS_SCALE,
                        standard_normal(&mut rng) / DESCRIPTOR_POS_SCALE,
                        standard_normal(&mut rng) / DESCRIPTOR_HEAD_SCALE,
                        standard_normal(&mut rng) / DESCRIPTOR_HEAD_SCALE,
                    ];
                    let phase = rng.random::<f64>() * 2.0 * PI;
                    (w, phase)
                })
                .collect()
        })
    }

    /// Ground-truth descriptor for an image: a smooth random-Fourier-feature
    /// map of the pose plus per-image seeded noise, L2-normalized.
    ///
    /// Deterministic given `(descriptor_seed, id)`; with `noise_sigma = 0`
    /// it depends on the pose alone.
    pub fn true_descriptor(&self, id: u64) -> Result<Descriptor> {
        let rec = self
            .record(id)
            .ok_or_else(|| Error::NotFound(format!("image {id}")))?;
        let heading_rad = rec.pose.heading().to_radians();
        let x = [
            rec.pose.east,
            rec.pose.north,
            heading_rad.cos(),
            heading_rad.sin(),
        ];
        let mut noise = rng_for(self.descriptor_seed, streams::DESCRIPTOR_NOISE, id);
        let raw: Vec<f32> = self
            .basis()
            .iter()
            .map(|(w, phase)| {
                let arg = w[0] * x[0] + w[1] * x[1] + w[2] * x[2] + w[3] * x[3] + phase;
                let noisy = arg.cos()
                    + if self.noise_sigma > 0.0 {
                        standard_normal(&mut noise) * self.noise_sigma
                    } else {
                        // Keep the noise stream position fixed so sigma only
                        // scales the perturbation.
                        let _ = standard_normal(&mut noise);
                        0.0
                    };
                noisy as f32
            })
            .collect();
        Descriptor::from_raw(raw)
    }

    /// Ground-truth descriptors for every image, in record order.
    pub fn all_true_descriptors(&self) -> Result<Vec<Descriptor>> {
        self.images
            .iter()
            .map(|rec| self.true_descriptor(rec.id))
            .collect()
    }
}

/// One standard-normal draw via Box-Muller.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Canonical representative of a street axis: the direction with positive
/// north component (east when the axis is exactly east-west). The batch
/// samplers canonicalize principal directions the same way, so generated
/// "frontal" cameras face the direction the sampler will select for.
pub fn canonical_axis_heading(heading_deg: f64) -> f64 {
    let h = normalize_heading(heading_deg);
    let rad = h.to_radians();
    let (sin, cos) = (rad.sin(), rad.cos());
    if sin < -1e-12 || (sin.abs() <= 1e-12 && cos < 0.0) {
        normalize_heading(h + 180.0)
    } else {
        h
    }
}

/// Generates a world from the config. Deterministic; fails with a
/// generation-failure error when the requested place count cannot be packed
/// at the required separation.
pub fn generate_world(config: &WorldConfig) -> Result<World> {
    config.validate()?;

    // Image-level separation must hold, so pack centers with extra margin.
    let center_separation = config.min_place_separation + 2.0 * config.place_extent();
    let mut layout = rng_for(config.seed, streams::LAYOUT, 0);
    let mut centers: Vec<[f64; 2]> = Vec::with_capacity(config.n_places);
    const MAX_ATTEMPTS_PER_PLACE: usize = 8192;
    for place in 0..config.n_places {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS_PER_PLACE {
            let cand = [
                layout.random::<f64>() * config.area_side,
                layout.random::<f64>() * config.area_side,
            ];
            let ok = centers
                .iter()
                .all(|c| (c[0] - cand[0]).hypot(c[1] - cand[1]) >= center_separation);
            if ok {
                centers.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::GenerationFailure(format!(
                "could not place place {place} of {} with center separation >= {center_separation:.2} m \
                 in a {:.0} m square after {MAX_ATTEMPTS_PER_PLACE} attempts",
                config.n_places, config.area_side
            )));
        }
    }

    let mut headings_rng = rng_for(config.seed, streams::HEADINGS, 0);
    let mut images = Vec::with_capacity(config.n_places * config.images_per_place);
    let mut scenes: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
    let frontal_count = config.images_per_place.div_ceil(2);
    for (place, center) in centers.iter().enumerate() {
        let street = headings_rng.random::<f64>() * 360.0;
        let frontal_heading = canonical_axis_heading(street);
        let lateral_heading = normalize_heading(frontal_heading + 90.0);
        let axis = frontal_heading.to_radians();
        let (u, v) = ([axis.cos(), axis.sin()], [-axis.sin(), axis.cos()]);
        let scene_id = place as u64;
        for i in 0..config.images_per_place {
            let t = (headings_rng.random::<f64>() * 2.0 - 1.0) * config.place_radius;
            let n = (headings_rng.random::<f64>() * 2.0 - 1.0) * config.place_radius * 0.15;
            let east = center[0] + t * u[0] + n * v[0];
            let north = center[1] + t * u[1] + n * v[1];
            let base = if i < frontal_count {
                frontal_heading
            } else {
                lateral_heading
            };
            let jitter = (headings_rng.random::<f64>() * 2.0 - 1.0) * config.heading_jitter;
            let id = (place * config.images_per_place + i) as u64;
            images.push(ImageRecord {
                id,
                pose: PlanarPose::new(east, north, base + jitter)?,
                class_id: Some(scene_id),
                scene_id: Some(scene_id),
                source: DatasetKind::ALL[place % DatasetKind::ALL.len()],
            });
            scenes.entry(scene_id).or_default().push(id);
        }
    }

    let mut covisibility = CovisibilityMap::new();
    for i in 0..images.len() {
        for j in (i + 1)..images.len() {
            let a = &images[i];
            let b = &images[j];
            let d = planar_distance(&a.pose, &b.pose);
            if d >= config.covis_max_distance {
                continue;
            }
            let dh = angular_difference(a.pose.heading(), b.pose.heading())?;
            if dh >= config.covis_max_heading {
                continue;
            }
            let overlap = (1.0 - d / config.covis_max_distance)
                * (1.0 - dh / config.covis_max_heading);
            covisibility.insert(a.id, b.id, overlap)?;
        }
    }

    World::new(
        images,
        covisibility,
        scenes,
        config.seed,
        config.embed_dim,
        config.noise_sigma,
    )
}

/// Derives landmark-style ground truth from world covisibility: for each
/// scene's first image (the query), same-scene images split into easy
/// positives (overlap at or above [`LANDMARK_EASY_FLOOR`]), hard positives
/// (positive but smaller overlap), and junk (same scene, no overlap at all,
/// e.g. the opposite facing group).
pub fn derive_landmark_ground_truth(
    world: &World,
) -> Result<(Vec<u64>, crate::metrics::LandmarkGroundTruth)> {
    let mut query_ids = Vec::new();
    let mut entries = Vec::new();
    for ids in world.scenes().values() {
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        let Some((&query, rest)) = sorted.split_first() else {
            continue;
        };
        let mut easy = std::collections::BTreeSet::new();
        let mut hard = std::collections::BTreeSet::new();
        let mut junk = std::collections::BTreeSet::new();
        for &other in rest {
            let overlap = world.covisibility().get(query, other);
            if overlap >= LANDMARK_EASY_FLOOR {
                easy.insert(other);
            } else if overlap > 0.0 {
                hard.insert(other);
            } else {
                junk.insert(other);
            }
        }
        query_ids.push(query);
        entries.push(crate::metrics::LandmarkQueryGt {
            query_id: query,
            easy,
            hard,
            junk,
        });
    }
    Ok((query_ids, crate::metrics::LandmarkGroundTruth::new(entries)?))
}

/// Splits a world into held-out queries (the first `per_scene` images of
/// each scene, by ascending id) and the remaining database images.
pub fn query_database_split(world: &World, per_scene: usize) -> (Vec<u64>, Vec<u64>) {
    let mut queries = Vec::new();
    let mut database = Vec::new();
    for ids in world.scenes().values() {
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        for (i, id) in sorted.into_iter().enumerate() {
            if i < per_scene {
                queries.push(id);
            } else {
                database.push(id);
            }
        }
    }
    (queries, database)
}
