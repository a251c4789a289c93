//! Per-channel uniform weight quantization.
//!
//! Codes live in [0, L-1] with L = 2^b levels, or 2^b + 1 when the balance
//! level is enabled. Scales come from Min-Max initialization optionally
//! refined by alternating optimization (code assignment / least-squares
//! scale fit), and training flows through a clipped straight-through
//! estimator with LSQ-style scale gradients.

use crate::error::{Error, Result};

/// Scale floor for degenerate (constant) channels.
pub const SCALE_FLOOR: f64 = 1e-8;

/// Dense named weight array. Channel axis is the leading dimension;
/// rows are contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl WeightTensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let want: usize = dims.iter().product();
        if dims.is_empty() || want != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "tensor dims {:?} need {} elements, got {}",
                dims,
                want,
                data.len()
            )));
        }
        Ok(WeightTensor {
            name: name.into(),
            dims,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.dims[0]
    }

    pub fn channel_len(&self) -> usize {
        self.dims[1..].iter().product::<usize>().max(1)
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        let len = self.channel_len();
        &self.data[i * len..(i + 1) * len]
    }
}

/// Bit width, balance flag and channel axis for one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct QuantSpec {
    pub bits: u8,
    pub balanced: bool,
    pub channel_axis: usize,
}

impl QuantSpec {
    pub fn new(bits: u8, balanced: bool) -> Result<Self> {
        if !(1..=8).contains(&bits) {
            return Err(Error::InvalidArgument(format!("bits {bits} outside [1, 8]")));
        }
        Ok(QuantSpec {
            bits,
            balanced,
            channel_axis: 0,
        })
    }

    /// Level count L: 2^b, plus one balance level in balanced mode.
    pub fn levels(&self) -> u32 {
        let base = 1u32 << self.bits;
        if self.balanced {
            base + 1
        } else {
            base
        }
    }

    /// Storage cost in bits per weight: log2(L).
    pub fn effective_bits(&self) -> f64 {
        effective_bits(self.bits, self.balanced)
    }
}

/// log2(2^b + 1) for balanced layers, plain b otherwise.
pub fn effective_bits(bits: u8, balanced: bool) -> f64 {
    if balanced {
        ((1u64 << bits) as f64 + 1.0).log2()
    } else {
        bits as f64
    }
}

/// Per-channel affine parameters: w_hat = s * (code - I_z).
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAffine {
    pub scales: Vec<f64>,
    pub zero_offsets: Vec<i32>,
}

impl ChannelAffine {
    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }

    fn check_against(&self, w: &WeightTensor) -> Result<()> {
        if self.scales.len() != w.channels() || self.zero_offsets.len() != w.channels() {
            return Err(Error::ShapeMismatch(format!(
                "affine has {} channels, tensor {:?} has {}",
                self.scales.len(),
                w.name,
                w.channels()
            )));
        }
        if let Some(s) = self.scales.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "non-positive scale {s} for tensor {:?}",
                w.name
            )));
        }
        Ok(())
    }
}

/// Integer codes plus everything needed to dequantize them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub name: String,
    pub dims: Vec<usize>,
    pub spec: QuantSpec,
    pub affine: ChannelAffine,
    pub codes: Vec<u32>,
}

/// round-half-away-from-zero, the fixed rounding mode for code assignment.
#[inline]
fn round_code(v: f64, levels: u32) -> u32 {
    let r = v.round();
    if r <= 0.0 {
        0
    } else if r >= (levels - 1) as f64 {
        levels - 1
    } else {
        r as u32
    }
}

/// Min-Max scale initialization.
///
/// Balanced: s = max|w| / 2^(b-1) with the zero offset pinned at 2^(b-1).
/// Unbalanced: s = (max - min) / (L - 1), I_z = round(-min / s).
/// Constant channels fall back to the scale floor.
pub fn minmax_init(w: &WeightTensor, spec: &QuantSpec) -> ChannelAffine {
    let levels = spec.levels();
    let half = 1i64 << (spec.bits - 1);
    let mut scales = Vec::with_capacity(w.channels());
    let mut offsets = Vec::with_capacity(w.channels());
    for c in 0..w.channels() {
        let ch = w.channel(c);
        if spec.balanced {
            let amax = ch.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            scales.push((amax / half as f64).max(SCALE_FLOOR));
            offsets.push(half as i32);
        } else {
            let min = ch.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = ch.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s = ((max - min) / (levels - 1) as f64).max(SCALE_FLOOR);
            scales.push(s);
            offsets.push((-min / s).round() as i32);
        }
    }
    ChannelAffine {
        scales,
        zero_offsets: offsets,
    }
}

/// codes = Clip(round(w / s) + I_z, 0, L-1).
pub fn quantize(w: &WeightTensor, spec: &QuantSpec, affine: &ChannelAffine) -> Result<QuantizedLayer> {
    affine.check_against(w)?;
    let levels = spec.levels();
    let clen = w.channel_len();
    let mut codes = Vec::with_capacity(w.data.len());
    for c in 0..w.channels() {
        let s = affine.scales[c];
        let iz = affine.zero_offsets[c] as f64;
        for &v in &w.data[c * clen..(c + 1) * clen] {
            codes.push(round_code(v / s + iz, levels));
        }
    }
    Ok(QuantizedLayer {
        name: w.name.clone(),
        dims: w.dims.clone(),
        spec: *spec,
        affine: affine.clone(),
        codes,
    })
}

/// w_hat = s * (code - I_z).
pub fn dequantize(q: &QuantizedLayer) -> WeightTensor {
    let clen: usize = q.dims[1..].iter().product::<usize>().max(1);
    let mut data = Vec::with_capacity(q.codes.len());
    for c in 0..q.affine.len() {
        let s = q.affine.scales[c];
        let iz = q.affine.zero_offsets[c];
        for &code in &q.codes[c * clen..(c + 1) * clen] {
            data.push(s * (code as i64 - iz as i64) as f64);
        }
    }
    WeightTensor {
        name: q.name.clone(),
        dims: q.dims.clone(),
        data,
    }
}

/// Fused quantize-dequantize for one channel, written into `out`.
/// This is the deployed-weight path used by the training loop.
pub fn fake_quant_channel(w: &[f64], out: &mut [f64], s: f64, iz: i32, levels: u32) {
    debug_assert_eq!(w.len(), out.len());
    for (o, &v) in out.iter_mut().zip(w) {
        let code = round_code(v / s + iz as f64, levels);
        *o = s * (code as i64 - iz as i64) as f64;
    }
}

/// Sum of squared dequantization errors for one channel at a given scale.
pub fn channel_l2_error(w: &[f64], s: f64, iz: i32, levels: u32) -> f64 {
    let mut err = 0.0;
    for &v in w {
        let code = round_code(v / s + iz as f64, levels);
        let d = v - s * (code as i64 - iz as i64) as f64;
        err += d * d;
    }
    err
}

/// Alternating optimization of the per-channel scale: assign nearest codes,
/// then refit s by least squares (s = w.q / q.q with q = code - I_z), for
/// `iters` rounds. The ell-2 error never increases; channels whose codes all
/// collapse onto the zero offset keep their current scale.
pub fn alt_opt_init(
    w: &WeightTensor,
    spec: &QuantSpec,
    init: &ChannelAffine,
    iters: u32,
) -> Result<ChannelAffine> {
    init.check_against(w)?;
    if iters < 1 {
        return Err(Error::InvalidArgument("alt_opt_init needs iters >= 1".into()));
    }
    let levels = spec.levels();
    let mut out = init.clone();
    for c in 0..w.channels() {
        let ch = w.channel(c);
        let iz = out.zero_offsets[c];
        let mut s = out.scales[c];
        for _ in 0..iters {
            let mut num = 0.0;
            let mut den = 0.0;
            for &v in ch {
                let q = (round_code(v / s + iz as f64, levels) as i64 - iz as i64) as f64;
                num += v * q;
                den += q * q;
            }
            if den == 0.0 {
                break;
            }
            let s_new = num / den;
            if !(s_new > 0.0) || !s_new.is_finite() {
                break;
            }
            s = s_new;
        }
        out.scales[c] = s;
    }
    Ok(out)
}

/// Clipped straight-through estimator.
///
/// With v = w/s + I_z, weight gradients pass through only where v lands in
/// [0, L-1]. Scale gradients follow the LSQ derivation: (round(v) - v) in
/// range, (0 - I_z) below, (L-1 - I_z) above, summed per channel. When
/// `lsq_grad_scale` is set the per-channel sum is multiplied by
/// g = 1/sqrt(N_ch * max(L-1-I_z, 1)).
pub fn ste_backward(
    grad_out: &[f64],
    w: &WeightTensor,
    spec: &QuantSpec,
    affine: &ChannelAffine,
    lsq_grad_scale: bool,
) -> Result<(Vec<f64>, Vec<f64>)> {
    affine.check_against(w)?;
    if grad_out.len() != w.data.len() {
        return Err(Error::ShapeMismatch(format!(
            "grad_out has {} elements, tensor {:?} has {}",
            grad_out.len(),
            w.name,
            w.data.len()
        )));
    }
    let levels = spec.levels();
    let top = (levels - 1) as f64;
    let clen = w.channel_len();
    let mut grad_w = vec![0.0; w.data.len()];
    let mut grad_s = vec![0.0; w.channels()];
    for c in 0..w.channels() {
        let s = affine.scales[c];
        let iz = affine.zero_offsets[c] as f64;
        let mut acc = 0.0;
        for k in c * clen..(c + 1) * clen {
            let v = w.data[k] / s + iz;
            let g = grad_out[k];
            if v < 0.0 {
                acc += g * (0.0 - iz);
            } else if v > top {
                acc += g * (top - iz);
            } else {
                grad_w[k] = g;
                acc += g * (v.round() - v);
            }
        }
        if lsq_grad_scale {
            let qp = (top - iz).max(1.0);
            acc /= (clen as f64 * qp).sqrt();
        }
        grad_s[c] = acc;
    }
    Ok((grad_w, grad_s))
}
