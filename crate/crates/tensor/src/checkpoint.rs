//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "RSGGCKPT"
//! version    u32
//! meta_len   u32, then meta_len bytes of UTF-8 metadata
//! count      u32
//! manifest   count × { name_len u32, name bytes, rank u32, dims u64 × rank }
//! payload    count × (product(dims) f64 values), manifest order
//! ```

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Result, TensorError};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"RSGGCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Named tensors plus free-form metadata, as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, metadata: impl Into<String>) -> Self {
        Checkpoint {
            metadata: metadata.into(),
            tensors: store
                .iter()
                .map(|(_, p)| {
                    let mut t = p.tensor.clone();
                    t.grad = None;
                    (p.name.clone(), t)
                })
                .collect(),
        }
    }

    /// Copies tensors into `store`, which must have exactly the same names
    /// and shapes.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(TensorError::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for (name, t) in &self.tensors {
            let id = store.by_name(name).ok_or_else(|| TensorError::Format(format!("unknown parameter `{name}`")))?;
            let p = store.get_mut(id);
            if p.tensor.shape() != t.shape() {
                return Err(TensorError::Format(format!(
                    "parameter `{name}`: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor = t.clone();
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        w.write_u32::<LittleEndian>(self.metadata.len() as u32)?;
        w.write_all(self.metadata.as_bytes())?;
        w.write_u32::<LittleEndian>(self.tensors.len() as u32)?;
        for (name, t) in &self.tensors {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u32::<LittleEndian>(t.rank() as u32)?;
            for &d in t.shape() {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
        }
        for (_, t) in &self.tensors {
            for &v in t.data() {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(TensorError::Format("bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(TensorError::Format(format!("unsupported version {version}")));
        }
        let metadata = read_string(&mut r)?;
        let count = r.read_u32::<LittleEndian>()? as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let name = read_string(&mut r)?;
            let rank = r.read_u32::<LittleEndian>()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.read_u64::<LittleEndian>()? as usize);
            }
            manifest.push((name, shape));
        }
        let mut tensors = Vec::with_capacity(count);
        for (name, shape) in manifest {
            let numel: usize = shape.iter().product();
            let mut data = vec![0.0; numel];
            r.read_f64_into::<LittleEndian>(&mut data)?;
            let t = Tensor::new(shape, data).map_err(|e| TensorError::Format(format!("`{name}`: {e}")))?;
            tensors.push((name, t));
        }
        Ok(Checkpoint { metadata, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| TensorError::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_magic() {
        let bytes = b"NOTACKPT\x01\x00\x00\x00".to_vec();
        assert!(matches!(Checkpoint::read_from(&bytes[..]), Err(TensorError::Format(_))));
    }

    #[test]
    fn shape_mismatch_on_load() {
        let mut a = ParamStore::new();
        a.register("w", Tensor::zeros(vec![2, 3])).unwrap();
        let ck = Checkpoint::from_store(&a, "");
        let mut b = ParamStore::new();
        b.register("w", Tensor::zeros(vec![3, 2])).unwrap();
        assert!(ck.load_into(&mut b).is_err());
    }

    #[test]
    fn header_layout() {
        let mut s = ParamStore::new();
        s.register("ab", Tensor::new(vec![1], vec![1.5]).unwrap()).unwrap();
        let mut buf = Vec::new();
        Checkpoint::from_store(&s, "m").write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &1u32.to_le_bytes());
        assert_eq!(buf[16], b'm');
        assert_eq!(&buf[buf.len() - 8..], &1.5f64.to_le_bytes());
    }
}
