//! `.bft` checkpoints: a flat named-FP32-tensor container with the same
//! header discipline as `.bfq` (magic, version, CRC32 trailer).

use std::path::Path;

use crate::error::{Error, Result};
use crate::wire::{self, Reader, Writer};

use super::model::{DenoiserParams, ModelDims, Tensor};

pub const BFT_MAGIC: [u8; 4] = *b"BFT1";
pub const BFT_VERSION: u32 = 1;

pub fn tensors_to_bytes(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    w.put_bytes(&BFT_MAGIC);
    w.put_u32(BFT_VERSION);
    w.put_u32(tensors.len() as u32);
    for (name, t) in tensors {
        w.put_str(name)?;
        w.put_u8(t.dims.len() as u8);
        for &d in &t.dims {
            w.put_u32(d as u32);
        }
        for &v in &t.data {
            w.put_f32(v as f32);
        }
    }
    let crc = wire::crc32(&w.buf);
    w.put_u32(crc);
    Ok(w.buf)
}

pub fn tensors_from_bytes(buf: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    if buf.len() < 4 || buf[..4] != BFT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: BFT_MAGIC,
        });
    }
    let mut head = Reader::new(&buf[4..], path);
    let version = head.take_u32()?;
    if version != BFT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
            supported: BFT_VERSION,
        });
    }
    if buf.len() < 12 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: "no room for checksum".into(),
        });
    }
    let stored = u32::from_le_bytes(buf[buf.len() - 4..].try_into().unwrap());
    let computed = wire::crc32(&buf[..buf.len() - 4]);
    if stored != computed {
        return Err(Error::CrcMismatch {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }
    let mut r = Reader::new(&buf[8..buf.len() - 4], path);
    let count = r.take_u32()?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name = r.take_str()?;
        let rank = r.take_u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.take_u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.take_f32()? as f64);
        }
        out.push((name, Tensor { dims, data }));
    }
    if r.remaining() != 0 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("{} trailing bytes", r.remaining()),
        });
    }
    Ok(out)
}

pub fn write_tensors(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    std::fs::write(path, tensors_to_bytes(tensors)?)?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let buf = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact {
                path: path.to_path_buf(),
                hint: "checkpoint not found".into(),
            }
        } else {
            Error::Io(e)
        }
    })?;
    tensors_from_bytes(&buf, path)
}

impl DenoiserParams {
    /// FP32 checkpoint write. In-memory math is FP64; persisted weights
    /// round to FP32.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_tensors(path, &self.tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensor_list(read_tensors(path)?)
    }

    /// Rebuilds a parameter set from a named tensor list, inferring the
    /// model dims from shapes. Tensor order in the file is irrelevant;
    /// missing or misshapen tensors are rejected.
    pub fn from_tensor_list(tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let find = |name: &str| -> Result<&Tensor> {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::MissingLayer(name.into()))
        };
        let proj_in = find("proj_in.weight")?;
        let class = find("class_embed.weight")?;
        if proj_in.dims.len() != 2 || class.dims.len() != 2 || class.dims[0] < 3 {
            return Err(Error::ShapeMismatch("malformed projection/class tensors".into()));
        }
        let blocks = (0..usize::MAX)
            .take_while(|i| tensors.iter().any(|(n, _)| n == &format!("block{i}.fc1.weight")))
            .count();
        let dims = ModelDims {
            hidden: proj_in.dims[0],
            embed: class.dims[1],
            blocks,
            classes: class.dims[0] - 1,
        };
        dims.validate()?;

        let mut rng = crate::metrics::SplitMix64::new(0);
        let template = DenoiserParams::init(dims, &mut rng)?;
        let mut ordered = Vec::with_capacity(template.tensors.len());
        for (name, t) in &template.tensors {
            let got = find(name)?;
            if got.dims != t.dims {
                return Err(Error::ShapeMismatch(format!(
                    "tensor {name:?}: dims {:?} in file, want {:?}",
                    got.dims, t.dims
                )));
            }
            ordered.push((name.clone(), got.clone()));
        }
        if tensors.len() != ordered.len() {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint has {} tensors, model wants {}",
                tensors.len(),
                ordered.len()
            )));
        }
        Ok(DenoiserParams {
            dims,
            tensors: ordered,
            revision: 0,
        })
    }
}
