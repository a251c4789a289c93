//! Residual-MLP denoiser with handwritten reverse-mode gradients.
//!
//! Architecture: input projection 2 -> hidden, B residual blocks (two
//! hidden linears with a per-block time feature added to the first
//! pre-activation), a class-embedding table with a learned null row, and
//! an output projection hidden -> 2. SiLU activations. The class embedding
//! is zero-padded to the hidden width and added to the input projection
//! output. Per-block time features F_{i,t} = r_i(emb_t) come either from
//! the time-projection layers or from a cached table; a sampler run is
//! bit-identical either way.

use std::collections::BTreeMap;

use crate::bitpack::TimeFeatureSection;
use crate::error::{Error, Result};
use crate::metrics::SplitMix64;
use crate::wire;

use super::schedule::time_embedding;
use super::Point;

pub const IN_DIM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelDims {
    pub hidden: usize,
    pub embed: usize,
    pub blocks: usize,
    pub classes: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.hidden < 2
            || self.embed < 2
            || self.embed % 2 != 0
            || self.embed > self.hidden
            || self.blocks < 1
            || self.classes < 2
        {
            return Err(Error::InvalidArgument(format!("bad model dims {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims,
            data: vec![0.0; n],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// out = W x, with W row-major [rows, cols].
fn matvec(w: &[f64], x: &[f64], out: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        out[r] = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

/// out += W^T g.
fn matvec_t_acc(w: &[f64], g: &[f64], out: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        let gr = g[r];
        if gr == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (o, &a) in out.iter_mut().zip(row) {
            *o += gr * a;
        }
    }
}

/// gw += g (outer) x.
fn outer_acc(g: &[f64], x: &[f64], gw: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        let gr = g[r];
        if gr == 0.0 {
            continue;
        }
        let dst = &mut gw[r * cols..(r + 1) * cols];
        for (o, &v) in dst.iter_mut().zip(x) {
            *o += gr * v;
        }
    }
}

#[inline]
fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Named parameter set of the toy denoiser. Tensor order is fixed by
/// construction; `revision` advances on every mutable access so that
/// forward traces can be checked for staleness.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub dims: ModelDims,
    pub tensors: Vec<(String, Tensor)>,
    pub revision: u64,
}

fn ix_proj_in_w() -> usize {
    0
}
fn ix_proj_in_b() -> usize {
    1
}
fn ix_block(i: usize, slot: usize) -> usize {
    2 + 6 * i + slot
}
fn ix_class(blocks: usize) -> usize {
    2 + 6 * blocks
}
fn ix_proj_out_w(blocks: usize) -> usize {
    3 + 6 * blocks
}
fn ix_proj_out_b(blocks: usize) -> usize {
    4 + 6 * blocks
}

impl DenoiserParams {
    /// Fresh random initialization. He-style scales, with the second
    /// block linear damped so deep residual stacks start near identity.
    pub fn init(dims: ModelDims, rng: &mut SplitMix64) -> Result<Self> {
        dims.validate()?;
        let h = dims.hidden;
        let e = dims.embed;
        let mut tensors: Vec<(String, Tensor)> = Vec::with_capacity(5 + 6 * dims.blocks);
        fn push_w(
            tensors: &mut Vec<(String, Tensor)>,
            name: String,
            dims_t: Vec<usize>,
            std: f64,
            rng: &mut SplitMix64,
        ) {
            let n: usize = dims_t.iter().product();
            let data = (0..n).map(|_| std * rng.normal()).collect();
            tensors.push((name, Tensor { dims: dims_t, data }));
        }
        push_w(&mut tensors, "proj_in.weight".into(), vec![h, IN_DIM], (2.0 / IN_DIM as f64).sqrt(), rng);
        tensors.push(("proj_in.bias".into(), Tensor::zeros(vec![h])));
        for i in 0..dims.blocks {
            push_w(&mut tensors, format!("block{i}.fc1.weight"), vec![h, h], (2.0 / h as f64).sqrt(), rng);
            tensors.push((format!("block{i}.fc1.bias"), Tensor::zeros(vec![h])));
            push_w(&mut tensors, format!("block{i}.fc2.weight"), vec![h, h], 0.2 * (2.0 / h as f64).sqrt(), rng);
            tensors.push((format!("block{i}.fc2.bias"), Tensor::zeros(vec![h])));
            push_w(&mut tensors, format!("block{i}.time.weight"), vec![h, e], (2.0 / e as f64).sqrt(), rng);
            tensors.push((format!("block{i}.time.bias"), Tensor::zeros(vec![h])));
        }
        let n_class = (dims.classes + 1) * e;
        let class = Tensor {
            dims: vec![dims.classes + 1, e],
            data: (0..n_class).map(|_| 0.3 * rng.normal()).collect(),
        };
        tensors.push(("class_embed.weight".into(), class));
        let n_out = IN_DIM * h;
        let out_w = Tensor {
            dims: vec![IN_DIM, h],
            data: (0..n_out).map(|_| (1.0 / h as f64).sqrt() * rng.normal()).collect(),
        };
        tensors.push(("proj_out.weight".into(), out_w));
        tensors.push(("proj_out.bias".into(), Tensor::zeros(vec![IN_DIM])));
        Ok(DenoiserParams {
            dims,
            tensors,
            revision: 0,
        })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::MissingLayer(name.into()))
    }

    /// Mutable access; bumps the revision so stale forward traces are
    /// rejected by [`DenoiserParams::backward`].
    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.revision += 1;
        self.tensors
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::MissingLayer(name.into()))
    }

    /// The 15 quantizable weight matrices, in canonical order. Biases and
    /// the time projections are not in this list.
    pub fn quantizable_layers(&self) -> Vec<String> {
        let mut out = vec!["proj_in.weight".to_string()];
        for i in 0..self.dims.blocks {
            out.push(format!("block{i}.fc1.weight"));
            out.push(format!("block{i}.fc2.weight"));
        }
        out.push("class_embed.weight".into());
        out.push("proj_out.weight".into());
        out
    }

    /// First and last projection, pinned at 8 bits.
    pub fn fixed8_layers(&self) -> Vec<String> {
        vec!["proj_in.weight".into(), "proj_out.weight".into()]
    }

    /// Time-projection weights, replaced by cached features at deploy time.
    pub fn time_layers(&self) -> Vec<String> {
        (0..self.dims.blocks)
            .map(|i| format!("block{i}.time.weight"))
            .collect()
    }

    /// On-the-fly per-block time features F_{i,t} = r_i(emb_t).
    pub fn time_features(&self, t: usize) -> Result<Vec<Vec<f64>>> {
        let emb = time_embedding(t, self.dims.embed)?;
        Ok(self.time_features_from_emb(&emb))
    }

    fn time_features_from_emb(&self, emb: &[f64]) -> Vec<Vec<f64>> {
        let h = self.dims.hidden;
        let e = self.dims.embed;
        (0..self.dims.blocks)
            .map(|i| {
                let w = &self.tensors[ix_block(i, 4)].1.data;
                let b = &self.tensors[ix_block(i, 5)].1.data;
                let mut f = vec![0.0; h];
                matvec(w, emb, &mut f, h, e);
                for (fv, &bv) in f.iter_mut().zip(b) {
                    *fv += bv;
                }
                f
            })
            .collect()
    }

    /// Forward pass. `feats` must hold one hidden-width vector per block;
    /// `c = None` selects the learned null embedding.
    pub fn forward(&self, z: Point, feats: &[&[f64]], c: Option<usize>) -> Result<(Point, Vec<Vec<f64>>)> {
        let trace = self.forward_trace(z, feats, c, None)?;
        let acts = trace.h[1..].to_vec();
        Ok((trace.eps_hat, acts))
    }

    /// Forward pass retaining everything backward needs. Pass the time
    /// embedding in `emb` to make time-projection gradients available.
    pub fn forward_trace(
        &self,
        z: Point,
        feats: &[&[f64]],
        c: Option<usize>,
        emb: Option<Vec<f64>>,
    ) -> Result<ForwardTrace> {
        let d = &self.dims;
        let h = d.hidden;
        if feats.len() != d.blocks {
            return Err(Error::ShapeMismatch(format!(
                "{} time features for {} blocks",
                feats.len(),
                d.blocks
            )));
        }
        for f in feats {
            if f.len() != h {
                return Err(Error::ShapeMismatch(format!(
                    "time feature width {} != hidden {h}",
                    f.len()
                )));
            }
        }
        let row = match c {
            Some(cls) if cls >= d.classes => {
                return Err(Error::InvalidArgument(format!(
                    "class {cls} out of range (K={})",
                    d.classes
                )))
            }
            Some(cls) => cls,
            None => d.classes,
        };
        if let Some(e) = &emb {
            if e.len() != d.embed {
                return Err(Error::ShapeMismatch(format!(
                    "embedding width {} != {}",
                    e.len(),
                    d.embed
                )));
            }
        }

        let mut hs: Vec<Vec<f64>> = Vec::with_capacity(d.blocks + 1);
        let mut us: Vec<Vec<f64>> = Vec::with_capacity(d.blocks);
        let mut activs: Vec<Vec<f64>> = Vec::with_capacity(d.blocks);

        let w_in = &self.tensors[ix_proj_in_w()].1.data;
        let b_in = &self.tensors[ix_proj_in_b()].1.data;
        let class = &self.tensors[ix_class(d.blocks)].1.data;
        let mut h0 = vec![0.0; h];
        matvec(w_in, &z, &mut h0, h, IN_DIM);
        for (v, &b) in h0.iter_mut().zip(b_in) {
            *v += b;
        }
        let e_row = &class[row * d.embed..(row + 1) * d.embed];
        for (v, &e) in h0.iter_mut().zip(e_row) {
            *v += e;
        }
        hs.push(h0);

        for i in 0..d.blocks {
            let w1 = &self.tensors[ix_block(i, 0)].1.data;
            let b1 = &self.tensors[ix_block(i, 1)].1.data;
            let w2 = &self.tensors[ix_block(i, 2)].1.data;
            let b2 = &self.tensors[ix_block(i, 3)].1.data;
            let hin = hs.last().unwrap();
            let mut u = vec![0.0; h];
            matvec(w1, hin, &mut u, h, h);
            for k in 0..h {
                u[k] += b1[k] + feats[i][k];
            }
            let a: Vec<f64> = u.iter().map(|&x| silu(x)).collect();
            let mut v = vec![0.0; h];
            matvec(w2, &a, &mut v, h, h);
            let hout: Vec<f64> = (0..h).map(|k| hin[k] + v[k] + b2[k]).collect();
            us.push(u);
            activs.push(a);
            hs.push(hout);
        }

        let w_out = &self.tensors[ix_proj_out_w(d.blocks)].1.data;
        let b_out = &self.tensors[ix_proj_out_b(d.blocks)].1.data;
        let mut eps = [0.0; IN_DIM];
        matvec(w_out, hs.last().unwrap(), &mut eps, IN_DIM, h);
        eps[0] += b_out[0];
        eps[1] += b_out[1];

        Ok(ForwardTrace {
            z,
            class_row: row,
            emb,
            feats: feats.iter().map(|f| f.to_vec()).collect(),
            h: hs,
            u: us,
            a: activs,
            eps_hat: eps,
            revision: self.revision,
        })
    }

    /// Reverse-mode gradients for one traced sample. `grad_acts`, when
    /// given, supplies dL/d(block output) for every block (feature
    /// distillation); time-projection gradients are produced only when the
    /// trace carried the embedding.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        grad_eps: Point,
        grad_acts: Option<&[Vec<f64>]>,
        grads: &mut DenoiserGrads,
    ) -> Result<()> {
        if trace.revision != self.revision {
            return Err(Error::InvalidArgument(
                "stale forward trace: parameters changed since the forward pass".into(),
            ));
        }
        let d = &self.dims;
        let h = d.hidden;
        if let Some(ga) = grad_acts {
            if ga.len() != d.blocks {
                return Err(Error::ShapeMismatch(format!(
                    "{} activation grads for {} blocks",
                    ga.len(),
                    d.blocks
                )));
            }
        }

        let w_out = &self.tensors[ix_proj_out_w(d.blocks)].1.data;
        {
            let g = &mut grads.tensors[ix_proj_out_w(d.blocks)].1.data;
            outer_acc(&grad_eps, trace.h.last().unwrap(), g, IN_DIM, h);
            let gb = &mut grads.tensors[ix_proj_out_b(d.blocks)].1.data;
            gb[0] += grad_eps[0];
            gb[1] += grad_eps[1];
        }
        let mut gh = vec![0.0; h];
        matvec_t_acc(w_out, &grad_eps, &mut gh, IN_DIM, h);

        for i in (0..d.blocks).rev() {
            if let Some(ga) = grad_acts {
                for (g, &v) in gh.iter_mut().zip(&ga[i]) {
                    *g += v;
                }
            }
            let w1 = &self.tensors[ix_block(i, 0)].1.data;
            let w2 = &self.tensors[ix_block(i, 2)].1.data;
            let hin = &trace.h[i];
            let u = &trace.u[i];
            let a = &trace.a[i];

            outer_acc(&gh, a, &mut grads.tensors[ix_block(i, 2)].1.data, h, h);
            for (g, &v) in grads.tensors[ix_block(i, 3)].1.data.iter_mut().zip(&gh) {
                *g += v;
            }
            let mut ga_vec = vec![0.0; h];
            matvec_t_acc(w2, &gh, &mut ga_vec, h, h);
            let gu: Vec<f64> = ga_vec
                .iter()
                .zip(u)
                .map(|(&g, &x)| g * silu_grad(x))
                .collect();
            outer_acc(&gu, hin, &mut grads.tensors[ix_block(i, 0)].1.data, h, h);
            for (g, &v) in grads.tensors[ix_block(i, 1)].1.data.iter_mut().zip(&gu) {
                *g += v;
            }
            if let Some(emb) = &trace.emb {
                outer_acc(&gu, emb, &mut grads.tensors[ix_block(i, 4)].1.data, h, d.embed);
                for (g, &v) in grads.tensors[ix_block(i, 5)].1.data.iter_mut().zip(&gu) {
                    *g += v;
                }
            }
            matvec_t_acc(w1, &gu, &mut gh, h, h);
        }

        outer_acc(&gh, &trace.z, &mut grads.tensors[ix_proj_in_w()].1.data, h, IN_DIM);
        for (g, &v) in grads.tensors[ix_proj_in_b()].1.data.iter_mut().zip(&gh) {
            *g += v;
        }
        let gc = &mut grads.tensors[ix_class(d.blocks)].1.data;
        let base = trace.class_row * d.embed;
        for k in 0..d.embed {
            gc[base + k] += gh[k];
        }
        Ok(())
    }
}

/// Cached forward state for one sample.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub z: Point,
    pub class_row: usize,
    pub emb: Option<Vec<f64>>,
    pub feats: Vec<Vec<f64>>,
    pub h: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub a: Vec<Vec<f64>>,
    pub eps_hat: Point,
    pub revision: u64,
}

/// Parameter gradients, shaped exactly like the parameter list.
#[derive(Debug, Clone)]
pub struct DenoiserGrads {
    pub tensors: Vec<(String, Tensor)>,
}

impl DenoiserGrads {
    pub fn zeros_like(p: &DenoiserParams) -> Self {
        DenoiserGrads {
            tensors: p
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.dims.clone())))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::MissingLayer(name.into()))
    }

    pub fn scale(&mut self, k: f64) {
        for (_, t) in &mut self.tensors {
            for v in &mut t.data {
                *v *= k;
            }
        }
    }

    pub fn add(&mut self, other: &DenoiserGrads) {
        for ((_, a), (_, b)) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }
}

/// Precomputed F_{i,t} for a fixed step set, kept at full precision in
/// memory. Layout: [step][block][hidden].
#[derive(Debug, Clone, PartialEq)]
pub struct TimeFeatureTable {
    pub steps: Vec<usize>,
    pub blocks: usize,
    pub hidden: usize,
    pub data: Vec<f64>,
    lookup: BTreeMap<usize, usize>,
}

impl TimeFeatureTable {
    pub fn scalar_count(&self) -> usize {
        self.data.len()
    }

    pub fn features_at(&self, t: usize) -> Result<Vec<&[f64]>> {
        let &slot = self
            .lookup
            .get(&t)
            .ok_or_else(|| Error::InvalidArgument(format!("step {t} not cached")))?;
        let stride = self.blocks * self.hidden;
        let base = slot * stride;
        Ok((0..self.blocks)
            .map(|i| &self.data[base + i * self.hidden..base + (i + 1) * self.hidden])
            .collect())
    }

    /// FP16 section for the packed container.
    pub fn to_section(&self) -> TimeFeatureSection {
        TimeFeatureSection {
            steps: self.steps.iter().map(|&s| s as u32).collect(),
            blocks: self.blocks as u32,
            dim: self.hidden as u32,
            data: self
                .data
                .iter()
                .map(|&v| wire::f32_to_f16_bits(v as f32))
                .collect(),
        }
    }

    pub fn from_section(s: &TimeFeatureSection) -> Self {
        let steps: Vec<usize> = s.steps.iter().map(|&v| v as usize).collect();
        let lookup = steps.iter().enumerate().map(|(i, &t)| (t, i)).collect();
        TimeFeatureTable {
            steps,
            blocks: s.blocks as usize,
            hidden: s.dim as usize,
            data: s.data.iter().map(|&h| wire::f16_bits_to_f32(h) as f64).collect(),
            lookup,
        }
    }
}

/// Evaluates F_{i,t} = r_i(emb_t) for every block and listed step.
pub fn cache_time_features(
    p: &DenoiserParams,
    steps: &[usize],
    t_total: usize,
) -> Result<TimeFeatureTable> {
    let mut data = Vec::with_capacity(steps.len() * p.dims.blocks * p.dims.hidden);
    let mut lookup = BTreeMap::new();
    for (slot, &t) in steps.iter().enumerate() {
        if t >= t_total {
            return Err(Error::InvalidArgument(format!(
                "step {t} outside schedule of {t_total}"
            )));
        }
        if lookup.insert(t, slot).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate step {t}")));
        }
        for f in p.time_features(t)? {
            data.extend_from_slice(&f);
        }
    }
    Ok(TimeFeatureTable {
        steps: steps.to_vec(),
        blocks: p.dims.blocks,
        hidden: p.dims.hidden,
        data,
        lookup,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_dims() -> ModelDims {
        ModelDims {
            hidden: 8,
            embed: 4,
            blocks: 2,
            classes: 3,
        }
    }

    fn small_model(seed: u64) -> DenoiserParams {
        let mut rng = SplitMix64::new(seed);
        DenoiserParams::init(small_dims(), &mut rng).unwrap()
    }

    fn feats_views(f: &[Vec<f64>]) -> Vec<&[f64]> {
        f.iter().map(|v| v.as_slice()).collect()
    }

    #[test]
    fn tensor_count_and_quantizable_names() {
        let p = small_model(1);
        assert_eq!(p.tensors.len(), 5 + 6 * 2);
        let q = p.quantizable_layers();
        assert_eq!(q.len(), 2 * 2 + 3);
        assert_eq!(q[0], "proj_in.weight");
        assert_eq!(q[q.len() - 1], "proj_out.weight");
        assert!(q.iter().all(|n| p.get(n).is_ok()));
        // the full-size model exposes 15 quantizable layers
        let mut rng = SplitMix64::new(2);
        let full = DenoiserParams::init(
            ModelDims {
                hidden: 128,
                embed: 64,
                blocks: 6,
                classes: 8,
            },
            &mut rng,
        )
        .unwrap();
        assert_eq!(full.quantizable_layers().len(), 15);
    }

    #[test]
    fn zero_weights_output_equals_output_bias() {
        let mut p = small_model(3);
        for name in p
            .tensors
            .iter()
            .map(|(n, _)| n.clone())
            .collect::<Vec<_>>()
        {
            if name.ends_with(".weight") {
                for v in &mut p.get_mut(&name).unwrap().data {
                    *v = 0.0;
                }
            }
        }
        p.get_mut("proj_out.bias").unwrap().data = vec![0.25, -0.75];
        let feats = p.time_features(7).unwrap();
        let (eps, _) = p.forward([0.4, -0.1], &feats_views(&feats), Some(1)).unwrap();
        assert_eq!(eps, [0.25, -0.75]);
    }

    #[test]
    fn forward_is_deterministic_and_class_sensitive() {
        let p = small_model(4);
        let feats = p.time_features(100).unwrap();
        let fv = feats_views(&feats);
        let (a, acts_a) = p.forward([0.1, 0.2], &fv, Some(0)).unwrap();
        let (b, acts_b) = p.forward([0.1, 0.2], &fv, Some(0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(acts_a, acts_b);
        let (c, _) = p.forward([0.1, 0.2], &fv, Some(1)).unwrap();
        let (n, _) = p.forward([0.1, 0.2], &fv, None).unwrap();
        assert_ne!(a, c);
        assert_ne!(a, n);
        assert_eq!(acts_a.len(), 2);
    }

    #[test]
    fn forward_validates_inputs() {
        let p = small_model(5);
        let feats = p.time_features(0).unwrap();
        let fv = feats_views(&feats);
        assert!(p.forward([0.0, 0.0], &fv[..1], Some(0)).is_err());
        assert!(p.forward([0.0, 0.0], &fv, Some(3)).is_err());
        let bad = vec![vec![0.0; 7], vec![0.0; 7]];
        assert!(p.forward([0.0, 0.0], &feats_views(&bad), Some(0)).is_err());
    }

    #[test]
    fn quantized_weight_substitution_is_exact() {
        use crate::quantizer::{self, QuantSpec};
        let p = small_model(6);
        let name = "block0.fc1.weight";
        let t = p.get(name).unwrap().clone();
        let w = crate::quantizer::WeightTensor::new(name, t.dims.clone(), t.data.clone()).unwrap();
        let spec = QuantSpec::new(2, true).unwrap();
        let affine = quantizer::alt_opt_init(&w, &spec, &quantizer::minmax_init(&w, &spec), 10).unwrap();
        let deq = quantizer::dequantize(&quantizer::quantize(&w, &spec, &affine).unwrap());

        let mut q1 = p.clone();
        q1.get_mut(name).unwrap().data = deq.data.clone();
        let mut q2 = p.clone();
        q2.get_mut(name).unwrap().data = deq.data;

        let feats = p.time_features(400).unwrap();
        let fv = feats_views(&feats);
        let (e1, a1) = q1.forward([0.3, -0.4], &fv, Some(2)).unwrap();
        let (e2, a2) = q2.forward([0.3, -0.4], &fv, Some(2)).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(a1, a2);
    }

    #[test]
    fn backward_zero_upstream_gives_zero_grads() {
        let p = small_model(7);
        let feats = p.time_features(10).unwrap();
        let emb = time_embedding(10, 4).unwrap();
        let tr = p
            .forward_trace([0.5, 0.5], &feats_views(&feats), Some(0), Some(emb))
            .unwrap();
        let mut g = DenoiserGrads::zeros_like(&p);
        p.backward(&tr, [0.0, 0.0], None, &mut g).unwrap();
        for (_, t) in &g.tensors {
            assert!(t.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn backward_rejects_stale_trace() {
        let mut p = small_model(8);
        let feats = p.time_features(10).unwrap();
        let tr = p
            .forward_trace([0.5, 0.5], &feats_views(&feats), Some(0), None)
            .unwrap();
        p.get_mut("proj_in.bias").unwrap().data[0] += 0.1;
        let mut g = DenoiserGrads::zeros_like(&p);
        assert!(p.backward(&tr, [1.0, 0.0], None, &mut g).is_err());
    }

    /// Loss for the finite-difference oracle:
    /// 0.5*||eps||^2 + 0.5*sum_i||act_i||^2.
    fn probe_loss(p: &DenoiserParams, z: Point, t: usize, c: Option<usize>) -> f64 {
        let feats = p.time_features(t).unwrap();
        let fv: Vec<&[f64]> = feats.iter().map(|v| v.as_slice()).collect();
        let (eps, acts) = p.forward(z, &fv, c).unwrap();
        let mut l = 0.5 * (eps[0] * eps[0] + eps[1] * eps[1]);
        for a in &acts {
            l += 0.5 * a.iter().map(|v| v * v).sum::<f64>();
        }
        l
    }

    #[test]
    fn backward_matches_finite_differences_everywhere() {
        let mut p = small_model(9);
        let z = [0.37, -0.81];
        let t = 250;
        let c = Some(1);

        let feats = p.time_features(t).unwrap();
        let emb = time_embedding(t, 4).unwrap();
        let tr = p
            .forward_trace(z, &feats_views(&feats), c, Some(emb))
            .unwrap();
        let grad_acts: Vec<Vec<f64>> = tr.h[1..].to_vec();
        let mut g = DenoiserGrads::zeros_like(&p);
        p.backward(&tr, tr.eps_hat, Some(&grad_acts), &mut g).unwrap();

        let names: Vec<String> = p.tensors.iter().map(|(n, _)| n.clone()).collect();
        let mut rng = SplitMix64::new(99);
        let h_step = 1e-4;
        for name in names {
            let n = p.get(&name).unwrap().numel();
            // a handful of random coordinates per tensor
            for _ in 0..4.min(n) {
                let k = rng.below(n as u64) as usize;
                let orig = p.get(&name).unwrap().data[k];
                p.get_mut(&name).unwrap().data[k] = orig + h_step;
                let lp = probe_loss(&p, z, t, c);
                p.get_mut(&name).unwrap().data[k] = orig - h_step;
                let lm = probe_loss(&p, z, t, c);
                p.get_mut(&name).unwrap().data[k] = orig;
                let fd = (lp - lm) / (2.0 * h_step);
                let an = g.get(&name).unwrap().data[k];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!(
                    (an - fd).abs() / denom <= 1e-3,
                    "{name}[{k}]: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn gradients_are_additive_over_samples() {
        let p = small_model(10);
        let feats = p.time_features(33).unwrap();
        let fv = feats_views(&feats);
        let samples = [([0.1, 0.9], Some(0)), ([-0.4, 0.2], Some(2)), ([0.8, -0.8], None)];

        let mut combined = DenoiserGrads::zeros_like(&p);
        for (z, c) in samples {
            let tr = p.forward_trace(z, &fv, c, None).unwrap();
            p.backward(&tr, [1.0, -0.5], None, &mut combined).unwrap();
        }

        let mut summed = DenoiserGrads::zeros_like(&p);
        for (z, c) in samples {
            let tr = p.forward_trace(z, &fv, c, None).unwrap();
            let mut one = DenoiserGrads::zeros_like(&p);
            p.backward(&tr, [1.0, -0.5], None, &mut one).unwrap();
            summed.add(&one);
        }
        for ((_, a), (_, b)) in combined.tensors.iter().zip(&summed.tensors) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn class_grad_touches_only_used_row() {
        let p = small_model(11);
        let feats = p.time_features(5).unwrap();
        let tr = p
            .forward_trace([0.2, 0.3], &feats_views(&feats), Some(1), None)
            .unwrap();
        let mut g = DenoiserGrads::zeros_like(&p);
        p.backward(&tr, [1.0, 1.0], None, &mut g).unwrap();
        let gc = g.get("class_embed.weight").unwrap();
        for row in 0..4 {
            let slice = &gc.data[row * 4..(row + 1) * 4];
            if row == 1 {
                assert!(slice.iter().any(|&v| v != 0.0));
            } else {
                assert!(slice.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn cached_features_match_on_the_fly() {
        let p = small_model(12);
        let steps: Vec<usize> = vec![0, 123, 500, 999];
        let table = cache_time_features(&p, &steps, 1000).unwrap();
        assert_eq!(table.scalar_count(), 4 * 2 * 8);
        for &t in &steps {
            let direct = p.time_features(t).unwrap();
            let cached = table.features_at(t).unwrap();
            for (d, c) in direct.iter().zip(cached) {
                assert_eq!(d.as_slice(), c);
            }
        }
        assert!(table.features_at(7).is_err());
        assert!(cache_time_features(&p, &[1000], 1000).is_err());
        assert!(cache_time_features(&p, &[1, 1], 1000).is_err());
    }

    #[test]
    fn feature_section_roundtrip_preserves_f16_values() {
        let p = small_model(13);
        let table = cache_time_features(&p, &[0, 600], 1000).unwrap();
        let section = table.to_section();
        let back = TimeFeatureTable::from_section(&section);
        assert_eq!(back.steps, table.steps);
        assert_eq!(back.blocks, table.blocks);
        assert_eq!(back.hidden, table.hidden);
        // second conversion is exact: f16 -> f64 -> f16 is identity
        assert_eq!(back.to_section(), section);
        for (orig, round) in table.data.iter().zip(&back.data) {
            assert!((orig - round).abs() <= orig.abs() * 1e-3 + 1e-4);
        }
    }
}
