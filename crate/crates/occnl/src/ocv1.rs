//! The `OCV1` binary grid format.
//!
//! Layout: 4-byte magic `OCV1`; little-endian u32 `nx`, `ny`, `nz`; u16 label
//! width (always 16); then `nx*ny*nz` little-endian u16 labels in memory
//! order (x fastest). Masks use the same header with labels restricted to
//! {0, 1}. Readers reject wrong magic, truncated payloads, and trailing
//! bytes, and never allocate more than the input could justify.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::voxel::{ClassId, Dims, VoxelGrid, VoxelMask};

pub const MAGIC: [u8; 4] = *b"OCV1";
pub const LABEL_WIDTH_BITS: u16 = 16;

/// Upper bound on the voxel count a header may declare (a 256x256x32 grid is
/// 2.1M voxels; this leaves two orders of magnitude of headroom).
pub const MAX_VOXELS: u64 = 1 << 28;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported label width {0} (only 16 is defined)")]
    UnsupportedLabelWidth(u16),
    #[error("truncated input: {context}")]
    Truncated { context: &'static str },
    #[error("declared dims {0} exceed the {MAX_VOXELS}-voxel limit")]
    Oversized(Dims),
    #[error("trailing bytes after the declared payload")]
    TrailingData,
    #[error("mask label {label} at voxel {index} is not 0 or 1")]
    MaskLabel { index: usize, label: ClassId },
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn checked_len(dims: Dims) -> Result<usize, FormatError> {
    let n = (dims.nx as u64)
        .checked_mul(dims.ny as u64)
        .and_then(|v| v.checked_mul(dims.nz as u64))
        .ok_or(FormatError::Oversized(dims))?;
    if n > MAX_VOXELS {
        return Err(FormatError::Oversized(dims));
    }
    Ok(n as usize)
}

/// Writes a grid in OCV1 layout.
pub fn write_grid<W: Write>(grid: &VoxelGrid, mut w: W) -> io::Result<()> {
    let dims = grid.dims();
    w.write_all(&MAGIC)?;
    w.write_all(&(dims.nx as u32).to_le_bytes())?;
    w.write_all(&(dims.ny as u32).to_le_bytes())?;
    w.write_all(&(dims.nz as u32).to_le_bytes())?;
    w.write_all(&LABEL_WIDTH_BITS.to_le_bytes())?;
    let mut buf = Vec::with_capacity(grid.labels().len() * 2);
    for &label in grid.labels() {
        buf.extend_from_slice(&label.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn write_grid_file<P: AsRef<Path>>(grid: &VoxelGrid, path: P) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_grid(grid, &mut w)?;
    w.flush()
}

fn read_exact_or<R: Read>(
    r: &mut R,
    buf: &mut [u8],
    context: &'static str,
) -> Result<(), FormatError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            FormatError::Truncated { context }
        } else {
            FormatError::Io(e)
        }
    })
}

fn read_header<R: Read>(r: &mut R) -> Result<Dims, FormatError> {
    let mut magic = [0u8; 4];
    read_exact_or(r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(FormatError::BadMagic { expected: MAGIC, found: magic });
    }
    let mut word = [0u8; 4];
    read_exact_or(r, &mut word, "nx")?;
    let nx = u32::from_le_bytes(word) as usize;
    read_exact_or(r, &mut word, "ny")?;
    let ny = u32::from_le_bytes(word) as usize;
    read_exact_or(r, &mut word, "nz")?;
    let nz = u32::from_le_bytes(word) as usize;
    let mut half = [0u8; 2];
    read_exact_or(r, &mut half, "label width")?;
    let width = u16::from_le_bytes(half);
    if width != LABEL_WIDTH_BITS {
        return Err(FormatError::UnsupportedLabelWidth(width));
    }
    Ok(Dims::new(nx, ny, nz))
}

/// Reads a grid, rejecting wrong magic, truncation, and trailing bytes.
pub fn read_grid<R: Read>(mut r: R) -> Result<VoxelGrid, FormatError> {
    let dims = read_header(&mut r)?;
    let count = checked_len(dims)?;
    let mut labels = Vec::new();
    let mut payload = (&mut r).take(count as u64 * 2);
    let mut chunk = [0u8; 8192];
    loop {
        let n = payload.read(&mut chunk)?;
        if n == 0 {
            break;
        }
        // Chunk reads keep allocation bounded by bytes actually present.
        for pair in chunk[..n].chunks(2) {
            if pair.len() < 2 {
                // An odd byte can only occur at end of input.
                return Err(FormatError::Truncated { context: "labels" });
            }
            labels.push(u16::from_le_bytes([pair[0], pair[1]]));
        }
    }
    if labels.len() != count {
        return Err(FormatError::Truncated { context: "labels" });
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(FormatError::TrailingData);
    }
    Ok(VoxelGrid::from_labels(dims, labels).expect("length checked above"))
}

/// Slice-based reader used by tests and fuzzing.
pub fn read_grid_from_slice(bytes: &[u8]) -> Result<VoxelGrid, FormatError> {
    read_grid(bytes)
}

pub fn read_grid_file<P: AsRef<Path>>(path: P) -> Result<VoxelGrid, FormatError> {
    read_grid(BufReader::new(File::open(path)?))
}

/// Writes a mask using the shared header with labels in {0, 1}.
pub fn write_mask<W: Write>(mask: &VoxelMask, w: W) -> io::Result<()> {
    let labels: Vec<ClassId> = mask.bits().iter().map(|&b| b as ClassId).collect();
    let grid = VoxelGrid::from_labels(mask.dims(), labels).expect("mask length matches dims");
    write_grid(&grid, w)
}

pub fn write_mask_file<P: AsRef<Path>>(mask: &VoxelMask, path: P) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_mask(mask, &mut w)?;
    w.flush()
}

/// Reads a mask, additionally rejecting labels outside {0, 1}.
pub fn read_mask<R: Read>(r: R) -> Result<VoxelMask, FormatError> {
    let grid = read_grid(r)?;
    let mut bits = Vec::with_capacity(grid.labels().len());
    for (index, &label) in grid.labels().iter().enumerate() {
        match label {
            0 => bits.push(false),
            1 => bits.push(true),
            _ => return Err(FormatError::MaskLabel { index, label }),
        }
    }
    Ok(VoxelMask::from_bits(grid.dims(), bits).expect("length checked above"))
}

pub fn read_mask_from_slice(bytes: &[u8]) -> Result<VoxelMask, FormatError> {
    read_mask(bytes)
}

pub fn read_mask_file<P: AsRef<Path>>(path: P) -> Result<VoxelMask, FormatError> {
    read_mask(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn encode(grid: &VoxelGrid) -> Vec<u8> {
        let mut buf = Vec::new();
        write_grid(grid, &mut buf).unwrap();
        buf
    }

    #[test]
    fn rejects_bad_magic() {
        let grid = VoxelGrid::filled(Dims::new(2, 2, 1), 3);
        let mut bytes = encode(&grid);
        bytes[0] = b'X';
        assert!(matches!(
            read_grid_from_slice(&bytes),
            Err(FormatError::BadMagic { .. })
        ));
    }

    #[test]
    fn rejects_truncation_everywhere() {
        let grid = VoxelGrid::filled(Dims::new(2, 2, 1), 3);
        let bytes = encode(&grid);
        for cut in 0..bytes.len() {
            assert!(
                read_grid_from_slice(&bytes[..cut]).is_err(),
                "prefix of {cut} bytes should not parse"
            );
        }
        assert!(read_grid_from_slice(&bytes).is_ok());
    }

    #[test]
    fn rejects_trailing_bytes() {
        let grid = VoxelGrid::filled(Dims::new(2, 2, 1), 3);
        let mut bytes = encode(&grid);
        bytes.push(0);
        assert!(matches!(
            read_grid_from_slice(&bytes),
            Err(FormatError::TrailingData)
        ));
    }

    #[test]
    fn rejects_unknown_label_width() {
        let grid = VoxelGrid::filled(Dims::new(1, 1, 1), 0);
        let mut bytes = encode(&grid);
        bytes[16] = 8;
        bytes[17] = 0;
        assert!(matches!(
            read_grid_from_slice(&bytes),
            Err(FormatError::UnsupportedLabelWidth(8))
        ));
    }

    #[test]
    fn rejects_oversized_dims_without_allocating() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&MAGIC);
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&LABEL_WIDTH_BITS.to_le_bytes());
        assert!(matches!(
            read_grid_from_slice(&bytes),
            Err(FormatError::Oversized(_))
        ));
    }

    #[test]
    fn mask_roundtrip_and_validation() {
        let dims = Dims::new(3, 2, 1);
        let mut mask = VoxelMask::empty(dims);
        mask.set(0);
        mask.set(4);
        let mut buf = Vec::new();
        write_mask(&mask, &mut buf).unwrap();
        assert_eq!(read_mask_from_slice(&buf).unwrap(), mask);

        let bad = VoxelGrid::from_labels(dims, vec![0, 1, 2, 0, 1, 0]).unwrap();
        let mut buf = Vec::new();
        write_grid(&bad, &mut buf).unwrap();
        assert!(matches!(
            read_mask_from_slice(&buf),
            Err(FormatError::MaskLabel { index: 2, label: 2 })
        ));
    }

    proptest! {
        #[test]
        fn grid_roundtrip_is_identity(
            nx in 1usize..6,
            ny in 1usize..6,
            nz in 1usize..4,
            seed in any::<u64>(),
        ) {
            use rand::Rng;
            let dims = Dims::new(nx, ny, nz);
            let mut rng = crate::rng::seeded_rng(seed);
            let labels: Vec<ClassId> =
                (0..dims.len()).map(|_| rng.random_range(0..=u16::MAX)).collect();
            let grid = VoxelGrid::from_labels(dims, labels).unwrap();
            let decoded = read_grid_from_slice(&encode(&grid)).unwrap();
            prop_assert_eq!(decoded.dims(), grid.dims());
            prop_assert_eq!(decoded.labels(), grid.labels());
        }

        #[test]
        fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let _ = read_grid_from_slice(&bytes);
            let _ = read_mask_from_slice(&bytes);
        }
    }
}
