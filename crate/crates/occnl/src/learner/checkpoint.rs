//! The `DPRC` checkpoint format.
//!
//! Layout: 4-byte magic `DPRC`; little-endian u32 version; u8 architecture
//! tag; u32 feature dim, hidden width (0 when linear), and category count;
//! f64 EMA momentum, prototype momentum, and fusion weight; then the student
//! tensors, teacher tensors, and prototype arrays in a fixed order, each as
//! `u32 rank, u32 dims.., f64 LE payload`; finally one presence byte per
//! class. Readers reject wrong magic, unknown versions, truncation, trailing
//! bytes, and oversized declarations.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use thiserror::Error;

use super::model::{Architecture, ModelParams, StudentModel, TeacherState};
use super::prototypes::PrototypeBank;
use super::TrainError;

pub const MAGIC: [u8; 4] = *b"DPRC";
pub const VERSION: u32 = 1;

/// Per-tensor element cap; generous next to any desk-scale model.
const MAX_ELEMENTS: u64 = 1 << 22;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown architecture tag {0}")]
    UnknownArchitecture(u8),
    #[error("truncated input: {context}")]
    Truncated { context: &'static str },
    #[error("tensor `{name}` declares {declared} elements, expected {expected}")]
    TensorShape { name: &'static str, declared: u64, expected: u64 },
    #[error("tensor `{name}` exceeds the element limit")]
    Oversized { name: &'static str },
    #[error("invalid value for {field}: {value}")]
    InvalidValue { field: &'static str, value: f64 },
    #[error("trailing bytes after the checkpoint payload")]
    TrailingData,
    #[error("inconsistent model state: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Everything needed to resume or inspect a trained run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub student: StudentModel,
    pub teacher: TeacherState,
    pub prototypes: PrototypeBank,
}

fn write_tensor2<W: Write>(w: &mut W, t: &Array2<f64>) -> io::Result<()> {
    w.write_all(&2u32.to_le_bytes())?;
    w.write_all(&(t.nrows() as u32).to_le_bytes())?;
    w.write_all(&(t.ncols() as u32).to_le_bytes())?;
    for &v in t.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn write_tensor1<W: Write>(w: &mut W, t: &Array1<f64>) -> io::Result<()> {
    w.write_all(&1u32.to_le_bytes())?;
    w.write_all(&(t.len() as u32).to_le_bytes())?;
    for &v in t.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn write_params<W: Write>(w: &mut W, params: &ModelParams) -> io::Result<()> {
    match params {
        ModelParams::Linear { w: wm, b } => {
            write_tensor2(w, wm)?;
            write_tensor1(w, b)
        }
        ModelParams::Mlp { w1, b1, w2, b2 } => {
            write_tensor2(w, w1)?;
            write_tensor1(w, b1)?;
            write_tensor2(w, w2)?;
            write_tensor1(w, b2)
        }
    }
}

pub fn write_checkpoint<W: Write>(
    student: &StudentModel,
    teacher: &TeacherState,
    prototypes: &PrototypeBank,
    mut w: W,
) -> io::Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let (tag, hidden) = match student.architecture() {
        Architecture::Linear => (0u8, 0u32),
        Architecture::Mlp { hidden } => (1u8, hidden as u32),
    };
    w.write_all(&[tag])?;
    w.write_all(&(student.feature_dim() as u32).to_le_bytes())?;
    w.write_all(&hidden.to_le_bytes())?;
    w.write_all(&(student.num_categories() as u32).to_le_bytes())?;
    w.write_all(&teacher.momentum.to_le_bytes())?;
    w.write_all(&prototypes.momentum().to_le_bytes())?;
    w.write_all(&prototypes.fusion_weight().to_le_bytes())?;
    write_params(&mut w, student.params())?;
    write_params(&mut w, teacher.model.params())?;
    write_tensor2(&mut w, prototypes.scene_adaptive())?;
    write_tensor2(&mut w, prototypes.scene_agnostic())?;
    for &s in prototypes.seen() {
        w.write_all(&[s as u8])?;
    }
    Ok(())
}

pub fn write_checkpoint_file<P: AsRef<Path>>(
    student: &StudentModel,
    teacher: &TeacherState,
    prototypes: &PrototypeBank,
    path: P,
) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(student, teacher, prototypes, &mut w)?;
    w.flush()
}

fn read_exact_or<R: Read>(
    r: &mut R,
    buf: &mut [u8],
    context: &'static str,
) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            CheckpointError::Truncated { context }
        } else {
            CheckpointError::Io(e)
        }
    })
}

fn read_u32<R: Read>(r: &mut R, context: &'static str) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    read_exact_or(r, &mut buf, context)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64<R: Read>(r: &mut R, context: &'static str) -> Result<f64, CheckpointError> {
    let mut buf = [0u8; 8];
    read_exact_or(r, &mut buf, context)?;
    Ok(f64::from_le_bytes(buf))
}

/// Reads `count` f64 values in bounded chunks so a lying header cannot force
/// a huge allocation on a short input.
fn read_f64s<R: Read>(
    r: &mut R,
    count: usize,
    name: &'static str,
) -> Result<Vec<f64>, CheckpointError> {
    let mut values = Vec::new();
    let mut remaining = count;
    let mut chunk = [0u8; 4096];
    while remaining > 0 {
        let want = (remaining * 8).min(chunk.len());
        let want = want - want % 8;
        let mut filled = 0usize;
        while filled < want {
            let n = r.read(&mut chunk[filled..want])?;
            if n == 0 {
                return Err(CheckpointError::Truncated { context: name });
            }
            filled += n;
        }
        for bytes in chunk[..want].chunks_exact(8) {
            values.push(f64::from_le_bytes(bytes.try_into().expect("8-byte chunk")));
        }
        remaining -= want / 8;
    }
    Ok(values)
}

fn read_tensor2<R: Read>(
    r: &mut R,
    rows: usize,
    cols: usize,
    name: &'static str,
) -> Result<Array2<f64>, CheckpointError> {
    let rank = read_u32(r, name)?;
    if rank != 2 {
        return Err(CheckpointError::TensorShape { name, declared: rank as u64, expected: 2 });
    }
    let declared_rows = read_u32(r, name)? as u64;
    let declared_cols = read_u32(r, name)? as u64;
    let declared = declared_rows * declared_cols;
    if declared > MAX_ELEMENTS {
        return Err(CheckpointError::Oversized { name });
    }
    let expected = rows as u64 * cols as u64;
    if declared_rows != rows as u64 || declared_cols != cols as u64 {
        return Err(CheckpointError::TensorShape { name, declared, expected });
    }
    let values = read_f64s(r, rows * cols, name)?;
    Ok(Array2::from_shape_vec((rows, cols), values).expect("length checked"))
}

fn read_tensor1<R: Read>(
    r: &mut R,
    len: usize,
    name: &'static str,
) -> Result<Array1<f64>, CheckpointError> {
    let rank = read_u32(r, name)?;
    if rank != 1 {
        return Err(CheckpointError::TensorShape { name, declared: rank as u64, expected: 1 });
    }
    let declared = read_u32(r, name)? as u64;
    if declared > MAX_ELEMENTS {
        return Err(CheckpointError::Oversized { name });
    }
    if declared != len as u64 {
        return Err(CheckpointError::TensorShape { name, declared, expected: len as u64 });
    }
    Ok(Array1::from_vec(read_f64s(r, len, name)?))
}

fn read_params<R: Read>(
    r: &mut R,
    arch: Architecture,
    feature_dim: usize,
    categories: usize,
) -> Result<ModelParams, CheckpointError> {
    match arch {
        Architecture::Linear => Ok(ModelParams::Linear {
            w: read_tensor2(r, feature_dim, categories, "linear.w")?,
            b: read_tensor1(r, categories, "linear.b")?,
        }),
        Architecture::Mlp { hidden } => Ok(ModelParams::Mlp {
            w1: read_tensor2(r, feature_dim, hidden, "mlp.w1")?,
            b1: read_tensor1(r, hidden, "mlp.b1")?,
            w2: read_tensor2(r, hidden, categories, "mlp.w2")?,
            b2: read_tensor1(r, categories, "mlp.b2")?,
        }),
    }
}

fn unit_interval(field: &'static str, value: f64) -> Result<f64, CheckpointError> {
    if !(0.0..=1.0).contains(&value) {
        return Err(CheckpointError::InvalidValue { field, value });
    }
    Ok(value)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint, CheckpointError> {
    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic { expected: MAGIC, found: magic });
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let mut tag = [0u8; 1];
    read_exact_or(&mut r, &mut tag, "architecture")?;
    let feature_dim = read_u32(&mut r, "feature_dim")? as usize;
    let hidden = read_u32(&mut r, "hidden")? as usize;
    let categories = read_u32(&mut r, "num_categories")? as usize;
    let arch = match tag[0] {
        0 => Architecture::Linear,
        1 => Architecture::Mlp { hidden },
        other => return Err(CheckpointError::UnknownArchitecture(other)),
    };
    if feature_dim == 0 || categories == 0 {
        return Err(CheckpointError::Inconsistent("zero feature dim or categories".into()));
    }
    if feature_dim as u64 * categories as u64 > MAX_ELEMENTS
        || hidden as u64 * feature_dim.max(categories) as u64 > MAX_ELEMENTS
    {
        return Err(CheckpointError::Oversized { name: "model" });
    }
    let ema_momentum = unit_interval("ema_momentum", read_f64(&mut r, "ema_momentum")?)?;
    let proto_momentum =
        unit_interval("prototype_momentum", read_f64(&mut r, "prototype_momentum")?)?;
    let fusion_weight =
        unit_interval("prototype_fusion_weight", read_f64(&mut r, "prototype_fusion_weight")?)?;

    let student_params = read_params(&mut r, arch, feature_dim, categories)?;
    let teacher_params = read_params(&mut r, arch, feature_dim, categories)?;
    let scene_adaptive = read_tensor2(&mut r, categories, feature_dim, "prototypes.adaptive")?;
    let scene_agnostic = read_tensor2(&mut r, categories, feature_dim, "prototypes.agnostic")?;
    let mut seen = vec![0u8; categories];
    read_exact_or(&mut r, &mut seen, "prototype presence flags")?;
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(CheckpointError::TrailingData);
    }

    let build = |params: ModelParams| -> Result<StudentModel, CheckpointError> {
        StudentModel::from_params(arch, feature_dim, categories, params)
            .map_err(|e| CheckpointError::Inconsistent(e.to_string()))
    };
    let student = build(student_params)?;
    let teacher = TeacherState { model: build(teacher_params)?, momentum: ema_momentum };
    let prototypes = PrototypeBank::from_parts(
        proto_momentum,
        fusion_weight,
        scene_adaptive,
        scene_agnostic,
        seen.into_iter().map(|b| b != 0).collect(),
    )
    .map_err(|e: TrainError| CheckpointError::Inconsistent(e.to_string()))?;
    Ok(Checkpoint { student, teacher, prototypes })
}

pub fn read_checkpoint_from_slice(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    read_checkpoint(bytes)
}

pub fn read_checkpoint_file<P: AsRef<Path>>(path: P) -> Result<Checkpoint, CheckpointError> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::{update_prototypes, StudentModel};
    use ndarray::array;

    fn sample_checkpoint(arch: Architecture) -> Checkpoint {
        let student = StudentModel::new(arch, 3, 4, 11);
        let mut teacher = TeacherState::from_student(&student, 0.97);
        super::super::ema_update(&StudentModel::new(arch, 3, 4, 12), &mut teacher).unwrap();
        let mut prototypes = PrototypeBank::new(4, 3, 0.99, 0.5).unwrap();
        update_prototypes(
            &array![[1.0, 0.0, 2.0], [0.5, 0.5, 0.5]],
            &[1, 3],
            &mut prototypes,
        )
        .unwrap();
        Checkpoint { student, teacher, prototypes }
    }

    fn encode(cp: &Checkpoint) -> Vec<u8> {
        let mut buf = Vec::new();
        write_checkpoint(&cp.student, &cp.teacher, &cp.prototypes, &mut buf).unwrap();
        buf
    }

    #[test]
    fn roundtrip_both_architectures() {
        for arch in [Architecture::Linear, Architecture::Mlp { hidden: 5 }] {
            let cp = sample_checkpoint(arch);
            let decoded = read_checkpoint_from_slice(&encode(&cp)).unwrap();
            assert_eq!(decoded, cp);
        }
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let cp = sample_checkpoint(Architecture::Linear);
        let mut bytes = encode(&cp);
        bytes[0] = b'X';
        assert!(matches!(
            read_checkpoint_from_slice(&bytes),
            Err(CheckpointError::BadMagic { .. })
        ));
        let mut bytes = encode(&cp);
        bytes[4] = 9;
        assert!(matches!(
            read_checkpoint_from_slice(&bytes),
            Err(CheckpointError::UnsupportedVersion(_))
        ));
    }

    #[test]
    fn rejects_truncation_at_every_prefix() {
        let bytes = encode(&sample_checkpoint(Architecture::Linear));
        for cut in 0..bytes.len() {
            assert!(read_checkpoint_from_slice(&bytes[..cut]).is_err(), "prefix {cut}");
        }
        assert!(read_checkpoint_from_slice(&bytes).is_ok());
    }

    #[test]
    fn rejects_trailing_bytes() {
        let mut bytes = encode(&sample_checkpoint(Architecture::Mlp { hidden: 5 }));
        bytes.push(7);
        assert!(matches!(
            read_checkpoint_from_slice(&bytes),
            Err(CheckpointError::TrailingData)
        ));
    }

    #[test]
    fn rejects_out_of_range_momenta() {
        let cp = sample_checkpoint(Architecture::Linear);
        let mut bytes = encode(&cp);
        // The EMA momentum f64 sits after magic(4) + version(4) + tag(1) +
        // three u32 header fields.
        let offset = 4 + 4 + 1 + 12;
        bytes[offset..offset + 8].copy_from_slice(&2.5f64.to_le_bytes());
        assert!(matches!(
            read_checkpoint_from_slice(&bytes),
            Err(CheckpointError::InvalidValue { field: "ema_momentum", .. })
        ));
    }
}
