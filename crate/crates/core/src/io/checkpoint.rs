//! Trainer checkpoints: embedding table, optimizer state, and the config
//! hash, in a little-endian binary layout.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "MLOCCKPT"
//! 8       4     version (u32, currently 1)
//! 12      4     reserved (zero)
//! 16      8     count (u64 rows)
//! 24      4     dim (u32)
//! 28      4     reserved (zero)
//! 32      8     optimizer step (u64)
//! 40      8     config hash (u64)
//! 48      -     rows, ascending id: id u64, then dim f64 embedding,
//!               dim f64 first moment, dim f64 second moment
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::trainer::EmbeddingTable;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MLOCCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: u64 = 48;

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    table: &EmbeddingTable,
    config_hash: u64,
) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&0u32.to_le_bytes())?;
    w.write_all(&(table.len() as u64).to_le_bytes())?;
    w.write_all(&(table.dim() as u32).to_le_bytes())?;
    w.write_all(&0u32.to_le_bytes())?;
    w.write_all(&table.step().to_le_bytes())?;
    w.write_all(&config_hash.to_le_bytes())?;

    let (m, v) = table.moments();
    for (row, &id) in table.ids().iter().enumerate() {
        w.write_all(&id.to_le_bytes())?;
        for matrix in [table.embeddings(), m, v] {
            for d in 0..table.dim() {
                w.write_all(&matrix[(row, d)].to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(EmbeddingTable, u64)> {
    let path = path.as_ref();
    let format_error = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let file = File::open(path)?;
    let file_len = file.metadata()?.len();
    let mut r = BufReader::new(file);

    let mut header = [0u8; HEADER_LEN as usize];
    r.read_exact(&mut header)
        .map_err(|_| format_error("file shorter than the 48-byte header".into()))?;
    if &header[0..8] != CHECKPOINT_MAGIC {
        return Err(format_error(format!("bad magic {:?}", &header[0..8])));
    }
    let version = u32::from_le_bytes(header[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(format_error(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let count = u64::from_le_bytes(header[16..24].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(header[24..28].try_into().unwrap()) as usize;
    let step = u64::from_le_bytes(header[32..40].try_into().unwrap());
    let config_hash = u64::from_le_bytes(header[40..48].try_into().unwrap());

    let row_bytes = 8 + 3 * dim as u64 * 8;
    let expected = HEADER_LEN + count as u64 * row_bytes;
    if file_len != expected {
        return Err(Error::Corruption {
            path: path.to_path_buf(),
            expected,
            actual: file_len,
        });
    }

    let mut ids = Vec::with_capacity(count);
    let mut embeddings = Array2::<f64>::zeros((count, dim));
    let mut first = Array2::<f64>::zeros((count, dim));
    let mut second = Array2::<f64>::zeros((count, dim));
    let mut buf8 = [0u8; 8];
    for row in 0..count {
        r.read_exact(&mut buf8)?;
        ids.push(u64::from_le_bytes(buf8));
        for matrix in [&mut embeddings, &mut first, &mut second] {
            for d in 0..dim {
                r.read_exact(&mut buf8)?;
                matrix[(row, d)] = f64::from_le_bytes(buf8);
            }
        }
    }

    let table = EmbeddingTable::from_parts(ids, embeddings, first, second, step)?;
    Ok((table, config_hash))
}
