//! Bit-exact file formats: binary descriptors, text metadata and
//! covisibility, trainer checkpoints, and the loss-history CSV. All binary
//! layouts are little-endian so files compare equal byte-for-byte across
//! platforms.

mod checkpoint;
mod covisibility;
mod descriptors;
mod metadata;

use std::path::Path;

use crate::batch::BatchSource;
use crate::error::Result;
use crate::trainer::IterationStats;
use crate::worldgen::World;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use covisibility::{read_covisibility, write_covisibility};
pub use descriptors::{
    write_descriptors, DescriptorFile, DescriptorWriter, DESCRIPTOR_HEADER_LEN, DESCRIPTOR_MAGIC,
    DESCRIPTOR_VERSION,
};
pub use metadata::{read_metadata, write_metadata, GSV_MIN_CLASS_SEPARATION};

/// Standard file names inside a world directory.
pub const METADATA_FILE: &str = "metadata.csv";
pub const COVISIBILITY_FILE: &str = "covisibility.csv";
pub const DESCRIPTORS_FILE: &str = "descriptors.bin";

/// Serializes a world's records and covisibility to a directory.
pub fn write_world_files(dir: impl AsRef<Path>, world: &World) -> Result<()> {
    let dir = dir.as_ref();
    write_metadata(dir.join(METADATA_FILE), world.images())?;
    write_covisibility(dir.join(COVISIBILITY_FILE), world.covisibility())?;
    Ok(())
}

/// Rebuilds a world from its serialized records and covisibility. Scene
/// grouping comes from the records' scene ids; the descriptor-process
/// parameters must be supplied (they live in the world config, not in the
/// data files).
pub fn read_world_files(
    dir: impl AsRef<Path>,
    descriptor_seed: u64,
    embed_dim: usize,
    noise_sigma: f64,
) -> Result<World> {
    let dir = dir.as_ref();
    let records = read_metadata(dir.join(METADATA_FILE))?;
    let covisibility = read_covisibility(dir.join(COVISIBILITY_FILE))?;
    let mut scenes: std::collections::BTreeMap<u64, Vec<u64>> = std::collections::BTreeMap::new();
    for rec in &records {
        if let Some(scene) = rec.scene_id {
            scenes.entry(scene).or_default().push(rec.id);
        }
    }
    World::new(
        records,
        covisibility,
        scenes,
        descriptor_seed,
        embed_dim,
        noise_sigma,
    )
}

/// Writes the loss history CSV: iteration, total, and one column per
/// source (blank when a source was disabled for the run).
pub fn write_history_csv(path: impl AsRef<Path>, history: &[IterationStats]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    let mut header = vec!["iteration".to_string(), "total".to_string()];
    header.extend(BatchSource::ALL.iter().map(|s| s.as_str().to_string()));
    writer.write_record(&header)?;
    for stats in history {
        let mut row = vec![stats.iteration.to_string(), stats.total_loss.to_string()];
        for source in BatchSource::ALL {
            let cell = stats
                .per_source
                .iter()
                .find(|(s, _)| *s == source)
                .map(|(_, loss)| loss.to_string())
                .unwrap_or_default();
            row.push(cell);
        }
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}
