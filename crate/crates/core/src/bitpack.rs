//! Sub-byte storage for quantized codes and the `.bfq` packed-model
//! container.
//!
//! Codes are grouped and written as base-L integers: with G the largest
//! group size satisfying L^G <= 2^64, each group occupies exactly
//! bitlen(L^G - 1) bits in an LSB-first bitstream. That keeps the achieved
//! rate within a couple percent of the log2(L) entropy floor without any
//! entropy-coding machinery.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::quantizer::{effective_bits, ChannelAffine, QuantSpec, QuantizedLayer};
use crate::sensitivity::PrecisionRecipe;
use crate::wire::{self, Reader, Writer};

pub const BFQ_MAGIC: [u8; 4] = *b"BFQ1";
pub const BFQ_VERSION: u32 = 1;

/// Group size and stored bits per group for level count L.
///
/// G = max{G : L^G <= 2^64}; a group is stored in bitlen(L^G - 1) bits.
pub fn group_params(levels: u32) -> Result<(u32, u32)> {
    if !(2..=257).contains(&levels) {
        return Err(Error::InvalidArgument(format!(
            "level count {levels} outside [2, 257]"
        )));
    }
    let bound: u128 = 1 << 64;
    let l = levels as u128;
    let mut acc: u128 = 1;
    let mut g = 0u32;
    while acc * l <= bound {
        acc *= l;
        g += 1;
    }
    let max_value = (acc - 1) as u64;
    let bits = 64 - max_value.leading_zeros();
    Ok((g, bits))
}

/// Exact byte length of a packed array of `n` codes at level count L.
pub fn packed_byte_len(n: usize, levels: u32) -> Result<usize> {
    let (g, bpg) = group_params(levels)?;
    let groups = n.div_ceil(g as usize);
    Ok((groups * bpg as usize).div_ceil(8))
}

/// Codes packed as base-L groups in an LSB-first bitstream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBlob {
    pub level_count: u32,
    pub code_count: usize,
    pub group_size: u32,
    pub bits_per_group: u32,
    pub data: Vec<u8>,
}

impl PackedBlob {
    /// Achieved storage rate in bits per code.
    pub fn bits_per_code(&self) -> f64 {
        8.0 * self.data.len() as f64 / self.code_count as f64
    }
}

fn put_bits(data: &mut [u8], bit_off: usize, value: u64, nbits: u32) {
    let shift = bit_off % 8;
    let mut acc = (value as u128) << shift;
    let mut byte = bit_off / 8;
    let mut left = shift + nbits as usize;
    while left > 0 {
        data[byte] |= (acc & 0xFF) as u8;
        acc >>= 8;
        byte += 1;
        left = left.saturating_sub(8);
    }
}

fn get_bits(data: &[u8], bit_off: usize, nbits: u32) -> u64 {
    let first = bit_off / 8;
    let shift = bit_off % 8;
    let nbytes = (shift + nbits as usize).div_ceil(8);
    let mut acc: u128 = 0;
    for (i, &b) in data[first..first + nbytes].iter().enumerate() {
        acc |= (b as u128) << (8 * i);
    }
    let mask: u128 = if nbits == 64 { u64::MAX as u128 } else { (1u128 << nbits) - 1 };
    ((acc >> shift) & mask) as u64
}

/// Packs codes (each in [0, L-1]) into a [`PackedBlob`]. The final partial
/// group is zero-padded.
pub fn pack_codes(codes: &[u32], levels: u32) -> Result<PackedBlob> {
    let (g, bpg) = group_params(levels)?;
    if let Some(idx) = codes.iter().position(|&c| c >= levels) {
        return Err(Error::CodeOutOfRange {
            code: codes[idx] as i64,
            levels,
        });
    }
    let groups = codes.len().div_ceil(g as usize);
    let mut data = vec![0u8; (groups * bpg as usize).div_ceil(8)];
    for (k, chunk) in codes.chunks(g as usize).enumerate() {
        let mut v: u64 = 0;
        for &c in chunk.iter().rev() {
            v = v * levels as u64 + c as u64;
        }
        put_bits(&mut data, k * bpg as usize, v, bpg);
    }
    Ok(PackedBlob {
        level_count: levels,
        code_count: codes.len(),
        group_size: g,
        bits_per_group: bpg,
        data,
    })
}

/// Exact inverse of [`pack_codes`]; stored code_count discards the padding.
pub fn unpack_codes(blob: &PackedBlob) -> Result<Vec<u32>> {
    let (g, bpg) = group_params(blob.level_count)?;
    if g != blob.group_size || bpg != blob.bits_per_group {
        return Err(Error::InvalidArgument(format!(
            "blob group layout ({}, {}) inconsistent with L={}",
            blob.group_size, blob.bits_per_group, blob.level_count
        )));
    }
    let groups = blob.code_count.div_ceil(g as usize);
    let need = (groups * bpg as usize).div_ceil(8);
    if blob.data.len() < need {
        return Err(Error::Truncated {
            path: "<blob>".into(),
            detail: format!("packed data {} bytes, need {need}", blob.data.len()),
        });
    }
    let l = blob.level_count as u64;
    let mut codes = Vec::with_capacity(blob.code_count);
    for k in 0..groups {
        let mut v = get_bits(&blob.data, k * bpg as usize, bpg);
        let take = (blob.code_count - k * g as usize).min(g as usize);
        for _ in 0..take {
            codes.push((v % l) as u32);
            v /= l;
        }
    }
    Ok(codes)
}

/// Average stored bits per weight for a recipe: balanced layers cost
/// log2(2^b + 1) bits each, fixed 8-bit layers cost 8, and each cached
/// FP16 time-feature scalar adds 16 bits to the numerator. The
/// denominator is the total weight count in `layer_sizes`.
pub fn average_bits(
    recipe: &PrecisionRecipe,
    layer_sizes: &BTreeMap<String, usize>,
    n_tf: usize,
) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0usize;
    for (name, &n) in layer_sizes {
        let eff = if recipe.fixed8.contains(name) {
            8.0
        } else {
            let bits = recipe
                .bits
                .get(name)
                .copied()
                .ok_or_else(|| Error::MissingLayer(name.clone()))?;
            effective_bits(bits, recipe.balanced)
        };
        num += eff * n as f64;
        den += n;
    }
    if den == 0 {
        return Err(Error::InvalidArgument("average_bits over zero weights".into()));
    }
    num += 16.0 * n_tf as f64;
    Ok(num / den as f64)
}

/// Storage ratio of a time-projection matrix vs its cached features:
/// (in*out) / (steps*out). A 1280-wide projection cached over 50 steps
/// comes out to 25.6.
pub fn feature_cache_ratio(proj_in: usize, proj_out: usize, steps: usize) -> f64 {
    (proj_in * proj_out) as f64 / (steps * proj_out) as f64
}

/// One quantized layer as stored: FP32 scales, packed codes.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedLayer {
    pub name: String,
    pub dims: Vec<usize>,
    pub spec: QuantSpec,
    pub scales: Vec<f32>,
    pub zero_offsets: Vec<i32>,
    pub blob: PackedBlob,
}

impl PackedLayer {
    pub fn from_quantized(q: &QuantizedLayer) -> Result<Self> {
        Ok(PackedLayer {
            name: q.name.clone(),
            dims: q.dims.clone(),
            spec: q.spec,
            scales: q.affine.scales.iter().map(|&s| s as f32).collect(),
            zero_offsets: q.affine.zero_offsets.clone(),
            blob: pack_codes(&q.codes, q.spec.levels())?,
        })
    }

    pub fn unpack(&self) -> Result<QuantizedLayer> {
        Ok(QuantizedLayer {
            name: self.name.clone(),
            dims: self.dims.clone(),
            spec: self.spec,
            affine: ChannelAffine {
                scales: self.scales.iter().map(|&s| s as f64).collect(),
                zero_offsets: self.zero_offsets.clone(),
            },
            codes: unpack_codes(&self.blob)?,
        })
    }
}

/// Full-precision side tensors (biases and anything else kept FP32).
#[derive(Debug, Clone, PartialEq)]
pub struct ExtraTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// Cached per-block time features for a fixed inference step set, FP16.
/// Data layout is step-major: [step][block][dim].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TimeFeatureSection {
    pub steps: Vec<u32>,
    pub blocks: u32,
    pub dim: u32,
    pub data: Vec<u16>,
}

/// Deployable packed model: quantized layer table, FP32 extras, cached
/// time features. Time-projection weight matrices are deliberately absent.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedModel {
    pub layers: Vec<PackedLayer>,
    pub extras: Vec<ExtraTensor>,
    pub time_features: TimeFeatureSection,
}

impl PackedModel {
    pub fn layer(&self, name: &str) -> Result<&PackedLayer> {
        self.layers
            .iter()
            .find(|l| l.name == name)
            .ok_or_else(|| Error::MissingLayer(name.into()))
    }

    pub fn extra(&self, name: &str) -> Result<&ExtraTensor> {
        self.extras
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::MissingLayer(name.into()))
    }

    /// File size in bytes, composed from per-section arithmetic rather
    /// than by serializing.
    pub fn predicted_size(&self) -> Result<usize> {
        let mut total = 4 + 4 + 4;
        for l in &self.layers {
            total += 2 + l.name.len() + 1 + 4 * l.dims.len() + 3 + 4;
            total += 8 * l.scales.len();
            total += 8 + packed_byte_len(l.dims.iter().product(), l.spec.levels())?;
        }
        total += 4;
        for e in &self.extras {
            total += 2 + e.name.len() + 1 + 4 * e.dims.len() + 4 * e.data.len();
        }
        let tf = &self.time_features;
        total += 12 + 4 * tf.steps.len() + 2 * tf.data.len();
        Ok(total + 4)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        w.put_bytes(&BFQ_MAGIC);
        w.put_u32(BFQ_VERSION);
        w.put_u32(self.layers.len() as u32);
        for layer in &self.layers {
            w.put_str(&layer.name)?;
            w.put_u8(layer.dims.len() as u8);
            for &d in &layer.dims {
                w.put_u32(d as u32);
            }
            w.put_u8(layer.spec.bits);
            w.put_u8(layer.spec.balanced as u8);
            w.put_u8(layer.spec.channel_axis as u8);
            w.put_u32(layer.scales.len() as u32);
            for &s in &layer.scales {
                w.put_f32(s);
            }
            for &z in &layer.zero_offsets {
                w.put_i32(z);
            }
            let n: usize = layer.dims.iter().product();
            if n != layer.blob.code_count {
                return Err(Error::ShapeMismatch(format!(
                    "layer {:?}: dims want {n} codes, blob has {}",
                    layer.name, layer.blob.code_count
                )));
            }
            w.put_u64(layer.blob.data.len() as u64);
            w.put_bytes(&layer.blob.data);
        }
        w.put_u32(self.extras.len() as u32);
        for extra in &self.extras {
            w.put_str(&extra.name)?;
            w.put_u8(extra.dims.len() as u8);
            for &d in &extra.dims {
                w.put_u32(d as u32);
            }
            for &v in &extra.data {
                w.put_f32(v);
            }
        }
        let tf = &self.time_features;
        w.put_u32(tf.steps.len() as u32);
        w.put_u32(tf.blocks);
        w.put_u32(tf.dim);
        for &s in &tf.steps {
            w.put_u32(s);
        }
        if tf.data.len() != tf.steps.len() * tf.blocks as usize * tf.dim as usize {
            return Err(Error::ShapeMismatch(format!(
                "time-feature data {} scalars, want {}",
                tf.data.len(),
                tf.steps.len() * tf.blocks as usize * tf.dim as usize
            )));
        }
        for &h in &tf.data {
            w.put_u16(h);
        }
        let crc = wire::crc32(&w.buf);
        w.put_u32(crc);
        Ok(w.buf)
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        if buf.len() < 4 || buf[..4] != BFQ_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: BFQ_MAGIC,
            });
        }
        let mut r = Reader::new(&buf[4..], path);
        let version = r.take_u32()?;
        if version != BFQ_VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.to_path_buf(),
                found: version,
                supported: BFQ_VERSION,
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
        let layer_count = r.take_u32()?;
        let mut layers = Vec::with_capacity(layer_count as usize);
        for _ in 0..layer_count {
            let name = r.take_str()?;
            let rank = r.take_u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.take_u32()? as usize);
            }
            let bits = r.take_u8()?;
            let balanced = r.take_u8()? != 0;
            let channel_axis = r.take_u8()? as usize;
            let spec = QuantSpec {
                bits,
                balanced,
                channel_axis,
            };
            let channels = r.take_u32()? as usize;
            let mut scales = Vec::with_capacity(channels);
            for _ in 0..channels {
                scales.push(r.take_f32()?);
            }
            let mut zero_offsets = Vec::with_capacity(channels);
            for _ in 0..channels {
                zero_offsets.push(r.take_i32()?);
            }
            let blob_len = r.take_u64()? as usize;
            let data = r.take(blob_len)?.to_vec();
            let code_count: usize = dims.iter().product();
            let (g, bpg) = group_params(spec.levels())?;
            layers.push(PackedLayer {
                name,
                dims,
                spec,
                scales,
                zero_offsets,
                blob: PackedBlob {
                    level_count: spec.levels(),
                    code_count,
                    group_size: g,
                    bits_per_group: bpg,
                    data,
                },
            });
        }
        let extra_count = r.take_u32()?;
        let mut extras = Vec::with_capacity(extra_count as usize);
        for _ in 0..extra_count {
            let name = r.take_str()?;
            let rank = r.take_u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.take_u32()? as usize);
            }
            let n: usize = dims.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(r.take_f32()?);
            }
            extras.push(ExtraTensor { name, dims, data });
        }
        let step_count = r.take_u32()? as usize;
        let blocks = r.take_u32()?;
        let dim = r.take_u32()?;
        let mut steps = Vec::with_capacity(step_count);
        for _ in 0..step_count {
            steps.push(r.take_u32()?);
        }
        let n = step_count * blocks as usize * dim as usize;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.take_u16()?);
        }
        if r.remaining() != 0 {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                detail: format!("{} trailing bytes", r.remaining()),
            });
        }
        Ok(PackedModel {
            layers,
            extras,
            time_features: TimeFeatureSection {
                steps,
                blocks,
                dim,
                data,
            },
        })
    }
}

pub fn write_model(m: &PackedModel, path: &Path) -> Result<()> {
    std::fs::write(path, m.to_bytes()?)?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<PackedModel> {
    let buf = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact {
                path: path.to_path_buf(),
                hint: "packed model not found".into(),
            }
        } else {
            Error::Io(e)
        }
    })?;
    PackedModel::from_bytes(&buf, path)
}
