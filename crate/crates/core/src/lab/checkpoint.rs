//! Binary parameter snapshots.
//!
//! Layout, all integers little-endian:
//! magic `ESCK` | version u32 = 1 | tensor_count u32, then per tensor
//! name_len u16 | name UTF-8 | kind u8 | layer_index u32 | rank u8 |
//! dims u32 each | data f32 row-major. Values are stored bit-exactly, so
//! save then load is a bitwise identity, and the fixed endianness makes
//! files portable across platforms.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::params::{GroupKind, ParamError, ParamGroup, ParamSet, ParamTensor};

pub const MAGIC: [u8; 4] = *b"ESCK";
pub const VERSION: u32 = 1;

/// Refuse to allocate for implausible tensor sizes in damaged files.
const MAX_ELEMENTS: u64 = 100_000_000;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file: magic {found:02x?}, expected {MAGIC:02x?}")]
    Format { found: [u8; 4] },
    #[error("unsupported checkpoint version {found}, expected {VERSION}")]
    Version { found: u32 },
    #[error("corrupt checkpoint: {detail}")]
    Corrupt { detail: String },
    #[error("tensor not serializable: {detail}")]
    Unsaveable { detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Param(#[from] ParamError),
}

fn corrupt(detail: impl Into<String>) -> CheckpointError {
    CheckpointError::Corrupt { detail: detail.into() }
}

pub fn save_checkpoint(params: &ParamSet, path: &Path) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let count = params.iter().count();
    let count32 = u32::try_from(count)
        .map_err(|_| CheckpointError::Unsaveable { detail: format!("{count} tensors") })?;
    w.write_all(&count32.to_le_bytes())?;
    for tensor in params.iter() {
        let name = tensor.name.as_bytes();
        let name_len = u16::try_from(name.len()).map_err(|_| CheckpointError::Unsaveable {
            detail: format!("name of {} bytes", name.len()),
        })?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[tensor.group.kind.code()])?;
        w.write_all(&tensor.group.layer_index.to_le_bytes())?;
        let rank = u8::try_from(tensor.shape.len()).map_err(|_| CheckpointError::Unsaveable {
            detail: format!("rank {}", tensor.shape.len()),
        })?;
        w.write_all(&[rank])?;
        for dim in &tensor.shape {
            let dim32 = u32::try_from(*dim).map_err(|_| CheckpointError::Unsaveable {
                detail: format!("dimension {dim}"),
            })?;
            w.write_all(&dim32.to_le_bytes())?;
        }
        for v in &tensor.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reader wrapper that turns unexpected end-of-file into a corruption
/// error instead of a bare I/O error.
struct Cursor<R> {
    inner: R,
}

impl<R: Read> Cursor<R> {
    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<(), CheckpointError> {
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == ErrorKind::UnexpectedEof {
                corrupt(format!("file ends inside {what}"))
            } else {
                CheckpointError::Io(e)
            }
        })
    }

    fn u8(&mut self, what: &str) -> Result<u8, CheckpointError> {
        let mut b = [0u8; 1];
        self.fill(&mut b, what)?;
        Ok(b[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, CheckpointError> {
        let mut b = [0u8; 2];
        self.fill(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        let mut b = [0u8; 4];
        self.fill(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<ParamSet, CheckpointError> {
    let mut r = Cursor { inner: BufReader::new(File::open(path)?) };
    let mut magic = [0u8; 4];
    r.fill(&mut magic, "the magic bytes")?;
    if magic != MAGIC {
        return Err(CheckpointError::Format { found: magic });
    }
    let version = r.u32("the version field")?;
    if version != VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let count = r.u32("the tensor count")?;
    let mut set = ParamSet::new();
    for idx in 0..count {
        let name_len = r.u16("a tensor name length")? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.fill(&mut name_bytes, "a tensor name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| corrupt(format!("tensor {idx} name is not UTF-8")))?;
        let kind_code = r.u8("a group kind")?;
        let kind = GroupKind::from_code(kind_code)
            .ok_or_else(|| corrupt(format!("unknown group kind code {kind_code}")))?;
        let layer_index = r.u32("a layer index")?;
        let rank = r.u8("a tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut elements = 1u64;
        for _ in 0..rank {
            let dim = r.u32("a dimension")? as u64;
            elements = elements.saturating_mul(dim);
            shape.push(dim as usize);
        }
        if elements > MAX_ELEMENTS {
            return Err(corrupt(format!("tensor `{name}` claims {elements} elements")));
        }
        let mut data = Vec::with_capacity(elements as usize);
        let mut buf = [0u8; 4];
        for _ in 0..elements {
            r.fill(&mut buf, "tensor data")?;
            data.push(f32::from_le_bytes(buf));
        }
        let tensor = ParamTensor::new(name, ParamGroup { kind, layer_index }, shape, data)?;
        set.insert(tensor)?;
    }
    let mut trailing = [0u8; 1];
    match r.inner.read_exact(&mut trailing) {
        Ok(()) => Err(corrupt("trailing bytes after the final tensor")),
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => Ok(set),
        Err(e) => Err(CheckpointError::Io(e)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{NoiseSeed, NoiseStream};
    use crate::policy::PolicyArch;

    fn toy_params(seed: u64) -> ParamSet {
        let arch = PolicyArch::toy_default();
        arch.init_params(&mut NoiseStream::new(NoiseSeed(seed)))
    }

    fn bits(set: &ParamSet) -> Vec<(String, Vec<usize>, Vec<u32>)> {
        set.iter()
            .map(|t| (t.name.clone(), t.shape.clone(), t.data.iter().map(|v| v.to_bits()).collect()))
            .collect()
    }

    #[test]
    fn round_trip_is_bitwise_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.esck");
        let mut params = toy_params(5);
        // Values that stress bit preservation: negative zero and a
        // subnormal survive only if bytes travel untouched.
        params.iter_mut().next().unwrap().data[0] = -0.0;
        params.iter_mut().next().unwrap().data[1] = f32::from_bits(1);
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(bits(&params), bits(&loaded));
        for (a, b) in params.iter().zip(loaded.iter()) {
            assert_eq!(a.group, b.group);
        }
    }

    #[test]
    fn empty_set_is_twelve_bytes_and_loads_back_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.esck");
        save_checkpoint(&ParamSet::new(), &path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 12);
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.iter().count(), 0);
    }

    #[test]
    fn header_begins_with_the_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.esck");
        save_checkpoint(&ParamSet::new(), &path).unwrap();
        let raw = std::fs::read(&path).unwrap();
        assert_eq!(&raw[0..4], b"ESCK");
        assert_eq!(&raw[4..8], &1u32.to_le_bytes());
        assert_eq!(&raw[8..12], &0u32.to_le_bytes());
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.esck");
        save_checkpoint(&toy_params(1), &path).unwrap();
        let mut raw = std::fs::read(&path).unwrap();
        raw[0..4].copy_from_slice(b"XXXX");
        std::fs::write(&path, &raw).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::Format { found }) if &found == b"XXXX"
        ));
    }

    #[test]
    fn future_version_is_a_version_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.esck");
        save_checkpoint(&toy_params(1), &path).unwrap();
        let mut raw = std::fs::read(&path).unwrap();
        raw[4..8].copy_from_slice(&2u32.to_le_bytes());
        std::fs::write(&path, &raw).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Version { found: 2 })));
    }

    #[test]
    fn truncation_anywhere_is_a_corruption_error() {
        let dir = tempfile::tempdir().unwrap();
        let full = dir.path().join("full.esck");
        save_checkpoint(&toy_params(2), &full).unwrap();
        let raw = std::fs::read(&full).unwrap();
        let cut = dir.path().join("cut.esck");
        for keep in [2usize, 9, 11, 13, 40, raw.len() - 3, raw.len() - 1] {
            std::fs::write(&cut, &raw[..keep]).unwrap();
            let err = load_checkpoint(&cut).unwrap_err();
            assert!(
                matches!(err, CheckpointError::Corrupt { .. }),
                "keep {keep}: unexpected {err:?}"
            );
        }
    }

    #[test]
    fn trailing_bytes_are_a_corruption_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.esck");
        save_checkpoint(&toy_params(3), &path).unwrap();
        let mut raw = std::fs::read(&path).unwrap();
        raw.push(0);
        std::fs::write(&path, &raw).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Corrupt { .. })));
    }

    #[test]
    fn unknown_group_kind_is_a_corruption_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.esck");
        save_checkpoint(&toy_params(4), &path).unwrap();
        let mut raw = std::fs::read(&path).unwrap();
        // First tensor header: magic(4) version(4) count(4) name_len(2) name.
        let name_len = u16::from_le_bytes([raw[12], raw[13]]) as usize;
        let kind_at = 14 + name_len;
        raw[kind_at] = 0xEE;
        std::fs::write(&path, &raw).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Corrupt { .. })));
    }

    #[test]
    fn implausible_dimensions_are_rejected_without_allocating() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.esck");
        let mut raw = Vec::new();
        raw.extend_from_slice(b"ESCK");
        raw.extend_from_slice(&1u32.to_le_bytes());
        raw.extend_from_slice(&1u32.to_le_bytes());
        raw.extend_from_slice(&1u16.to_le_bytes());
        raw.push(b'w');
        raw.push(GroupKind::HiddenWeight.code());
        raw.extend_from_slice(&0u32.to_le_bytes());
        raw.push(2); // rank
        raw.extend_from_slice(&4_000_000_000u32.to_le_bytes());
        raw.extend_from_slice(&4_000_000_000u32.to_le_bytes());
        std::fs::write(&path, &raw).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Corrupt { .. })));
    }
}
