//! `RDR1` tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "RDR1" | version u32 | count u32 |
//!   count × ( name_len u16 | name utf-8 | rank u8 | rank × dim u32 | numel × f64 )
//! ```
//!
//! Model checkpoints store an architecture record first (see
//! [`save_checkpoint`]); adversarial batches reuse the same container.

use std::fs;
use std::path::Path;

use super::{ArchConfig, Model, Role};
use crate::diff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RDR1";
pub const FORMAT_VERSION: u32 = 1;

const ARCH_PREFIX: &str = "meta.arch.";

pub fn encode_tensors(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len())
        .map_err(|_| Error::Checkpoint("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Checkpoint(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.rank())
            .map_err(|_| Error::Checkpoint(format!("rank too large for {name}")))?;
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d)
                .map_err(|_| Error::Checkpoint(format!("dimension too large for {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "needed {n} bytes for {what} at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let what = format!("tensor {i} of {count}");
        let len = u16::from_le_bytes(r.take(2, &what)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len, &what)?)
            .map_err(|_| Error::Checkpoint(format!("{what}: name is not utf-8")))?
            .to_string();
        let rank = r.take(1, &what)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32(&what)? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8, &what)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data)
            .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after {count} tensors",
            bytes.len() - r.pos
        )));
    }
    Ok(tensors)
}

pub fn write_tensors(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let bytes = encode_tensors(tensors)?;
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_tensors(&bytes)
}

fn arch_record(model: &Model) -> (String, Tensor) {
    let a = model.arch();
    let role = match model.role() {
        Role::Classifier => 0.0,
        Role::Detector => 1.0,
    };
    let values = vec![
        role,
        a.channels as f64,
        a.height as f64,
        a.width as f64,
        a.classes as f64,
    ];
    (
        format!("{ARCH_PREFIX}{}", a.name),
        Tensor::new(vec![5], values).expect("fixed shape"),
    )
}

pub fn checkpoint_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut tensors = vec![arch_record(model)];
    tensors.extend(
        model
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.clone())),
    );
    encode_tensors(&tensors)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut tensors = decode_tensors(bytes)?.into_iter();
    let (name, meta) = tensors
        .next()
        .ok_or_else(|| Error::Checkpoint("empty checkpoint".into()))?;
    let arch_name = name
        .strip_prefix(ARCH_PREFIX)
        .ok_or_else(|| Error::Checkpoint(format!("first tensor `{name}` is not an architecture record")))?;
    let m = meta.data();
    if m.len() != 5 {
        return Err(Error::Checkpoint("malformed architecture record".into()));
    }
    let cfg = ArchConfig {
        name: arch_name.to_string(),
        channels: m[1] as usize,
        height: m[2] as usize,
        width: m[3] as usize,
        classes: m[4] as usize,
    };
    let mut model = match m[0] {
        0.0 => Model::build(&cfg, Role::Classifier, 0)?,
        1.0 => Model::build(&cfg, Role::Detector, 0)?,
        _ => return Err(Error::Checkpoint("unknown model role".into())),
    };
    let mut loaded = 0;
    for (name, t) in tensors {
        let slot = model
            .params_mut()
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
        if slot.value.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "`{name}` has shape {:?}, architecture expects {:?}",
                t.shape(),
                slot.value.shape()
            )));
        }
        slot.value = t;
        loaded += 1;
    }
    if loaded != model.params().len() {
        return Err(Error::Checkpoint(format!(
            "{} of {} parameters present",
            loaded,
            model.params().len()
        )));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    model_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{build_classifier, build_detector};

    fn small() -> ArchConfig {
        ArchConfig::new("cnn-small", 3, 8, 8, 4)
    }

    #[test]
    fn header_layout_is_bit_exact() {
        let t = Tensor::new(vec![2], vec![1.0, -0.5]).unwrap();
        let bytes = encode_tensors(&[("ab".into(), t)]).unwrap();
        let mut want = Vec::new();
        want.extend_from_slice(b"RDR1");
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u16.to_le_bytes());
        want.extend_from_slice(b"ab");
        want.push(1);
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f64.to_le_bytes());
        want.extend_from_slice(&(-0.5f64).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        for model in [build_classifier(&small(), 5).unwrap(), build_detector(&small(), 6).unwrap()] {
            let a = dir.path().join("a.ckpt");
            let b = dir.path().join("b.ckpt");
            save_checkpoint(&model, &a).unwrap();
            let loaded = load_checkpoint(&a).unwrap();
            assert_eq!(loaded.params(), model.params());
            assert_eq!(loaded.role(), model.role());
            save_checkpoint(&loaded, &b).unwrap();
            assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        }
    }

    #[test]
    fn corrupted_magic_is_reported() {
        let mut bytes = checkpoint_bytes(&build_classifier(&small(), 1).unwrap()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(model_from_bytes(&bytes), Err(Error::BadMagic)));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = checkpoint_bytes(&build_classifier(&small(), 1).unwrap()).unwrap();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            model_from_bytes(&bytes),
            Err(Error::VersionMismatch { found: 7, expected: 1 })
        ));
    }

    #[test]
    fn missing_tensor_is_truncation() {
        let model = build_classifier(&small(), 1).unwrap();
        let full = checkpoint_bytes(&model).unwrap();
        // Drop the final tensor's record while keeping the declared count.
        let last = model.params().last().unwrap();
        let record = 2 + last.name.len() + 1 + 4 * last.value.rank() + 8 * last.value.numel();
        let cut = &full[..full.len() - record];
        assert!(matches!(model_from_bytes(cut), Err(Error::Truncated(_))));
        // Mid-tensor cut is also truncation.
        assert!(matches!(model_from_bytes(&full[..full.len() - 3]), Err(Error::Truncated(_))));
    }
}
