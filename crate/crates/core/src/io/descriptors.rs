//! Binary descriptor file format.
//!
//! Layout (all little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "MLOCDESC"
//! 8       4     version (u32, currently 1)
//! 12      8     count   (u64 rows)
//! 20      4     dim     (u32 columns)
//! 24      4     scalar  (u32, 0 = f32)
//! 28      4     reserved (zero)
//! 32      -     payload: count * dim f32s, row-major
//! ```
//!
//! Readers support partial-range row reads so the search engine can stream
//! blocks without materializing the full matrix.

use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::descriptor::Descriptor;
use crate::error::{Error, Result};

pub const DESCRIPTOR_MAGIC: &[u8; 8] = b"MLOCDESC";
pub const DESCRIPTOR_VERSION: u32 = 1;
pub const DESCRIPTOR_HEADER_LEN: u64 = 32;
const SCALAR_F32: u32 = 0;

fn format_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Incremental writer; the row count is patched into the header on finish.
pub struct DescriptorWriter {
    writer: BufWriter<File>,
    path: PathBuf,
    dim: u32,
    count: u64,
}

impl DescriptorWriter {
    pub fn create(path: impl AsRef<Path>, dim: usize) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if dim == 0 || dim > u32::MAX as usize {
            return Err(Error::InvalidInput(format!("bad descriptor dim {dim}")));
        }
        let file = File::create(&path)?;
        let mut writer = BufWriter::new(file);
        writer.write_all(DESCRIPTOR_MAGIC)?;
        writer.write_all(&DESCRIPTOR_VERSION.to_le_bytes())?;
        writer.write_all(&0u64.to_le_bytes())?; // count, patched on finish
        writer.write_all(&(dim as u32).to_le_bytes())?;
        writer.write_all(&SCALAR_F32.to_le_bytes())?;
        writer.write_all(&0u32.to_le_bytes())?;
        Ok(Self {
            writer,
            path,
            dim: dim as u32,
            count: 0,
        })
    }

    pub fn write_row(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.dim as usize {
            return Err(Error::InvalidInput(format!(
                "row has dim {}, file has dim {}",
                row.len(),
                self.dim
            )));
        }
        for &v in row {
            self.writer.write_all(&v.to_le_bytes())?;
        }
        self.count += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer.flush()?;
        let mut file = self.writer.into_inner().map_err(|e| {
            format_error(&self.path, format!("flush failed: {}", e.error()))
        })?;
        file.seek(SeekFrom::Start(12))?;
        file.write_all(&self.count.to_le_bytes())?;
        file.sync_all()?;
        Ok(())
    }
}

/// Writes unit-norm descriptors of uniform dimension.
pub fn write_descriptors(path: impl AsRef<Path>, descriptors: &[Descriptor]) -> Result<()> {
    let dim = descriptors
        .first()
        .map(Descriptor::dim)
        .ok_or_else(|| Error::InvalidInput("cannot write an empty descriptor list".into()))?;
    let mut writer = DescriptorWriter::create(path, dim)?;
    for d in descriptors {
        writer.write_row(d.values())?;
    }
    writer.finish()
}

/// Read handle over a descriptor file; validates the header and payload
/// length eagerly, then serves row ranges on demand.
#[derive(Debug)]
pub struct DescriptorFile {
    file: File,
    path: PathBuf,
    count: u64,
    dim: u32,
}

impl DescriptorFile {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut file = File::open(&path)?;
        let mut header = [0u8; DESCRIPTOR_HEADER_LEN as usize];
        file.read_exact(&mut header).map_err(|_| {
            format_error(&path, "file shorter than the 32-byte header")
        })?;
        if &header[0..8] != DESCRIPTOR_MAGIC {
            return Err(format_error(
                &path,
                format!("bad magic {:?}", &header[0..8]),
            ));
        }
        let version = u32::from_le_bytes(header[8..12].try_into().unwrap());
        if version != DESCRIPTOR_VERSION {
            return Err(format_error(
                &path,
                format!("unsupported version {version} (expected {DESCRIPTOR_VERSION})"),
            ));
        }
        let count = u64::from_le_bytes(header[12..20].try_into().unwrap());
        let dim = u32::from_le_bytes(header[20..24].try_into().unwrap());
        let scalar = u32::from_le_bytes(header[24..28].try_into().unwrap());
        if scalar != SCALAR_F32 {
            return Err(format_error(&path, format!("unsupported scalar code {scalar}")));
        }
        if dim == 0 && count > 0 {
            return Err(format_error(&path, "zero dim with nonzero count"));
        }

        let expected = DESCRIPTOR_HEADER_LEN + count * u64::from(dim) * 4;
        let actual = file.metadata()?.len();
        if actual != expected {
            return Err(Error::Corruption {
                path,
                expected,
                actual,
            });
        }
        Ok(Self {
            file,
            path,
            count,
            dim,
        })
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim as usize
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Reads `rows` rows starting at `start_row` into `out` (resized to
    /// fit). Supports concurrent use: each call seeks independently.
    pub fn read_rows_into(&self, start_row: u64, rows: usize, out: &mut Vec<f32>) -> Result<()> {
        if start_row + rows as u64 > self.count {
            return Err(Error::InvalidInput(format!(
                "row range {start_row}..{} exceeds count {}",
                start_row + rows as u64,
                self.count
            )));
        }
        let floats = rows * self.dim as usize;
        let mut bytes = vec![0u8; floats * 4];
        let offset = DESCRIPTOR_HEADER_LEN + start_row * u64::from(self.dim) * 4;
        let mut handle = &self.file;
        handle.seek(SeekFrom::Start(offset))?;
        handle.read_exact(&mut bytes)?;
        out.clear();
        out.reserve(floats);
        for chunk in bytes.chunks_exact(4) {
            out.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        Ok(())
    }

    pub fn read_rows(&self, start_row: u64, rows: usize) -> Result<Vec<f32>> {
        let mut out = Vec::new();
        self.read_rows_into(start_row, rows, &mut out)?;
        Ok(out)
    }

    pub fn read_all(&self) -> Result<Vec<f32>> {
        self.read_rows(0, self.count as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use tempfile::tempdir;

    use crate::rng::rng_for;

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let mut rng = rng_for(0, 0, 0);
        let rows: Vec<Vec<f32>> = (0..3)
            .map(|_| (0..4).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect())
            .collect();
        let mut writer = DescriptorWriter::create(&path, 4).unwrap();
        for row in &rows {
            writer.write_row(row).unwrap();
        }
        writer.finish().unwrap();

        let file = DescriptorFile::open(&path).unwrap();
        assert_eq!(file.count(), 3);
        assert_eq!(file.dim(), 4);
        let back = file.read_all().unwrap();
        let flat: Vec<f32> = rows.into_iter().flatten().collect();
        assert_eq!(back.len(), flat.len());
        for (a, b) in back.iter().zip(flat.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn header_only_file_is_a_valid_empty_store() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.bin");
        DescriptorWriter::create(&path, 8).unwrap().finish().unwrap();
        let file = DescriptorFile::open(&path).unwrap();
        assert_eq!(file.count(), 0);
        assert!(file.read_all().unwrap().is_empty());
    }

    #[test]
    fn truncated_payload_reports_byte_counts() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("trunc.bin");
        let mut writer = DescriptorWriter::create(&path, 4).unwrap();
        writer.write_row(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        writer.write_row(&[5.0, 6.0, 7.0, 8.0]).unwrap();
        writer.finish().unwrap();

        // Truncate mid-row: cut 6 bytes off the end.
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 6]).unwrap();

        match DescriptorFile::open(&path) {
            Err(Error::Corruption {
                expected, actual, ..
            }) => {
                assert_eq!(expected, 32 + 2 * 4 * 4);
                assert_eq!(actual, expected - 6);
            }
            other => panic!("expected corruption error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version_are_format_errors() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        let mut writer = DescriptorWriter::create(&path, 2).unwrap();
        writer.write_row(&[1.0, 0.0]).unwrap();
        writer.finish().unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            DescriptorFile::open(&path),
            Err(Error::Format { .. })
        ));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'M';
        bytes[8] = 9;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            DescriptorFile::open(&path),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn partial_range_reads_match_full_read() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ranges.bin");
        let mut writer = DescriptorWriter::create(&path, 3).unwrap();
        for i in 0..10 {
            writer
                .write_row(&[i as f32, i as f32 + 0.5, -(i as f32)])
                .unwrap();
        }
        writer.finish().unwrap();

        let file = DescriptorFile::open(&path).unwrap();
        let all = file.read_all().unwrap();
        let tail = file.read_rows(7, 3).unwrap();
        assert_eq!(&all[21..30], tail.as_slice());
        assert!(file.read_rows(8, 3).is_err());
    }
}
