//! Two-stage quantization-aware training.
//!
//! Stage I distills the full-precision teacher into the quantized student
//! (noise matching plus feature matching over block outputs, shared
//! condition dropping, Beta-distributed timesteps). Stage II fine-tunes on
//! plain noise prediction with the same sampling tweaks. Updates are
//! AdamW; the student's forward always runs on deployed weights
//! dequantize(quantize(theta_fp)), never on raw latents.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::metrics::{derive_seed, SplitMix64};
use crate::quantizer::{
    self, fake_quant_channel, ChannelAffine, QuantSpec, WeightTensor,
};
use crate::sensitivity::{alignment_score, EvalSet, PrecisionRecipe};
use crate::toydiff::{
    cache_time_features, forward_diffuse, DenoiserGrads, DenoiserParams, NoiseSchedule, Point,
    SampleSpec, TimeFeatureTable, ToyDataset,
};

const TAG_STAGE1: u64 = 1;
const TAG_STAGE2: u64 = 2;
const TAG_EVAL: u64 = 3;
const TAG_PROFILE: u64 = 4;

/// Element norm for the distillation and noise-prediction losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossNorm {
    L2,
    L1,
}

impl fmt::Display for LossNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossNorm::L2 => "l2",
            LossNorm::L1 => "l1",
        })
    }
}

impl FromStr for LossNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(LossNorm::L2),
            "l1" => Ok(LossNorm::L1),
            other => Err(Error::Config(format!("unknown loss norm {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub iters_stage1: u64,
    pub iters_stage2: u64,
    pub lambda: f64,
    pub p_drop: f64,
    pub beta_alpha: f64,
    pub beta_beta: f64,
    pub seed: u64,
    pub loss_norm: LossNorm,
    pub lsq_grad_scale: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-5,
            batch: 32,
            iters_stage1: 2000,
            iters_stage2: 1000,
            lambda: 0.01,
            p_drop: 0.1,
            beta_alpha: 3.0,
            beta_beta: 1.0,
            seed: 1024,
            loss_norm: LossNorm::L2,
            lsq_grad_scale: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_drop) {
            return Err(Error::InvalidArgument(format!("p_drop {} outside [0, 1]", self.p_drop)));
        }
        if !(self.beta_alpha > 0.0 && self.beta_beta > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "beta params ({}, {}) must be positive",
                self.beta_alpha, self.beta_beta
            )));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!("lambda {} negative", self.lambda)));
        }
        if !(self.lr > 0.0) || self.batch == 0 {
            return Err(Error::InvalidArgument("lr must be positive, batch nonzero".into()));
        }
        Ok(())
    }
}

/// Draws t in [0, T-1] with t/T ~ Beta(alpha, beta). beta = 1 uses the
/// closed-form inverse CDF u = U^(1/alpha); the general case falls back to
/// Johnk's algorithm.
pub fn beta_timestep_sample(alpha: f64, beta: f64, t_total: usize, rng: &mut SplitMix64) -> usize {
    let u = if beta == 1.0 {
        rng.uniform().powf(1.0 / alpha)
    } else if alpha == 1.0 {
        1.0 - rng.uniform().powf(1.0 / beta)
    } else {
        loop {
            let x = rng.uniform().powf(1.0 / alpha);
            let y = rng.uniform().powf(1.0 / beta);
            if x + y <= 1.0 && x + y > 0.0 {
                break x / (x + y);
            }
        }
    };
    ((u * t_total as f64) as usize).min(t_total - 1)
}

/// AdamW with FP32 moments, keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// One decoupled-decay update for a named parameter slab. Decay is
    /// applied only when `decay` is set (weight matrices, not biases or
    /// scales).
    pub fn update(&mut self, name: &str, param: &mut [f64], grad: &[f64], decay: bool) {
        debug_assert_eq!(param.len(), grad.len());
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; param.len()], vec![0.0; param.len()]));
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let wd = if decay { self.weight_decay } else { 0.0 };
        for i in 0..param.len() {
            let g = grad[i];
            let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * g;
            let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * g * g;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let mh = mi / bc1;
            let vh = vi / bc2;
            param[i] -= self.lr * (mh / (vh.sqrt() + self.eps) + wd * param[i]);
        }
    }
}

/// Per-layer quantization state carried by the student.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedParam {
    pub spec: QuantSpec,
    pub affine: ChannelAffine,
}

/// QAT student: latent full-precision weights, per-layer quantization
/// parameters, a frozen full-range time-feature table, and optimizer
/// state that persists across the two stages.
#[derive(Debug, Clone)]
pub struct StudentState {
    pub latent: DenoiserParams,
    pub recipe: PrecisionRecipe,
    pub qparams: BTreeMap<String, QuantizedParam>,
    pub table: TimeFeatureTable,
    pub opt: AdamW,
}

impl StudentState {
    /// Clones the teacher, fits quantization parameters (Min-Max then 10
    /// rounds of alternating optimization), and freezes the time-feature
    /// table over the full schedule.
    pub fn init(
        teacher: &DenoiserParams,
        recipe: PrecisionRecipe,
        t_total: usize,
        lr: f64,
    ) -> Result<Self> {
        let mut qparams = BTreeMap::new();
        for (name, &bits) in &recipe.bits {
            if recipe.excluded.contains(name) {
                return Err(Error::InvalidArgument(format!(
                    "layer {name:?} is both assigned bits and excluded"
                )));
            }
            let t = teacher.get(name)?;
            let spec = if recipe.fixed8.contains(name) {
                QuantSpec::new(8, false)?
            } else {
                QuantSpec::new(bits, recipe.balanced)?
            };
            let w = WeightTensor::new(name.clone(), t.dims.clone(), t.data.clone())?;
            let affine = quantizer::alt_opt_init(&w, &spec, &quantizer::minmax_init(&w, &spec), 10)?;
            qparams.insert(name.clone(), QuantizedParam { spec, affine });
        }
        let steps: Vec<usize> = (0..t_total).collect();
        let table = cache_time_features(teacher, &steps, t_total)?;
        Ok(StudentState {
            latent: teacher.clone(),
            recipe,
            qparams,
            table,
            opt: AdamW::new(lr, 0.01),
        })
    }

    /// Deployed parameters: every quantized layer replaced by
    /// dequantize(quantize(theta_fp)).
    pub fn deployed(&self) -> Result<DenoiserParams> {
        let mut out = self.latent.clone();
        for (name, qp) in &self.qparams {
            let src = self.latent.get(name)?.clone();
            let clen: usize = src.dims[1..].iter().product::<usize>().max(1);
            let dst = out.get_mut(name)?;
            for c in 0..src.dims[0] {
                let (lo, hi) = (c * clen, (c + 1) * clen);
                fake_quant_channel(
                    &src.data[lo..hi],
                    &mut dst.data[lo..hi],
                    qp.affine.scales[c],
                    qp.affine.zero_offsets[c],
                    qp.spec.levels(),
                );
            }
        }
        Ok(out)
    }
}

/// Gradients in student space: latent-weight grads (via STE for quantized
/// layers) plus per-layer scale grads.
#[derive(Debug, Clone)]
pub struct StudentGrads {
    pub latent: DenoiserGrads,
    pub scales: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepOutcome {
    pub loss_noise: f64,
    pub loss_feat: f64,
    pub dropped: usize,
}

fn elem_loss(pred: &[f64], target: &[f64], norm: LossNorm, grad: &mut [f64]) -> f64 {
    let n = pred.len() as f64;
    let mut loss = 0.0;
    match norm {
        LossNorm::L2 => {
            for i in 0..pred.len() {
                let d = pred[i] - target[i];
                loss += d * d;
                grad[i] = 2.0 * d / n;
            }
            loss / n
        }
        LossNorm::L1 => {
            for i in 0..pred.len() {
                let d = pred[i] - target[i];
                loss += d.abs();
                grad[i] = if d == 0.0 { 0.0 } else { d.signum() / n };
            }
            loss / n
        }
    }
}

/// Maps deployed-space gradients into student space: STE through every
/// quantized layer, passthrough for biases, zero for the frozen time
/// projections.
fn to_student_grads(
    student: &StudentState,
    mut deployed_grads: DenoiserGrads,
    lsq_grad_scale: bool,
) -> Result<StudentGrads> {
    let mut scales = BTreeMap::new();
    let time_frozen: BTreeSet<String> = student
        .latent
        .time_layers()
        .into_iter()
        .flat_map(|w| {
            let b = w.replace(".weight", ".bias");
            [w, b]
        })
        .collect();
    for (name, g) in deployed_grads.tensors.iter_mut() {
        if time_frozen.contains(name) {
            for v in &mut g.data {
                *v = 0.0;
            }
            continue;
        }
        if let Some(qp) = student.qparams.get(name) {
            let latent = student.latent.get(name)?;
            let w = WeightTensor::new(name.clone(), latent.dims.clone(), latent.data.clone())?;
            let (gw, gs) = quantizer::ste_backward(&g.data, &w, &qp.spec, &qp.affine, lsq_grad_scale)?;
            g.data = gw;
            scales.insert(name.clone(), gs);
        }
    }
    Ok(StudentGrads {
        latent: deployed_grads,
        scales,
    })
}

fn batch_loss(
    teacher: Option<&DenoiserParams>,
    student: &StudentState,
    deployed: &DenoiserParams,
    ds: &ToyDataset,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    lambda: f64,
    rng: &mut SplitMix64,
) -> Result<(StepOutcome, DenoiserGrads)> {
    let hidden = deployed.dims.hidden;
    let mut grads = DenoiserGrads::zeros_like(deployed);
    let mut out = StepOutcome::default();
    for _ in 0..cfg.batch {
        let t = beta_timestep_sample(cfg.beta_alpha, cfg.beta_beta, sched.t_total, rng);
        let (x, cls) = ds.sample(rng);
        let eps = [rng.normal(), rng.normal()];
        let z = forward_diffuse(x, t, eps, sched);
        let cond = if rng.uniform() < cfg.p_drop {
            out.dropped += 1;
            None
        } else {
            Some(cls)
        };

        let feats_q = student.table.features_at(t)?;
        let trace = deployed.forward_trace(z, &feats_q, cond, None)?;

        let mut grad_eps = [0.0; 2];
        let mut grad_acts: Option<Vec<Vec<f64>>> = None;
        match teacher {
            Some(tp) => {
                let feats_fp = tp.time_features(t)?;
                let fv: Vec<&[f64]> = feats_fp.iter().map(|v| v.as_slice()).collect();
                let (eps_fp, acts_fp) = tp.forward(z, &fv, cond)?;
                out.loss_noise += elem_loss(&trace.eps_hat, &eps_fp, cfg.loss_norm, &mut grad_eps);
                if lambda > 0.0 {
                    let mut ga = vec![vec![0.0; hidden]; deployed.dims.blocks];
                    for i in 0..deployed.dims.blocks {
                        let block_loss =
                            elem_loss(&trace.h[i + 1], &acts_fp[i], cfg.loss_norm, &mut ga[i]);
                        out.loss_feat += lambda * block_loss;
                        for v in &mut ga[i] {
                            *v *= lambda;
                        }
                    }
                    grad_acts = Some(ga);
                }
            }
            None => {
                out.loss_noise += elem_loss(&trace.eps_hat, &eps, cfg.loss_norm, &mut grad_eps);
            }
        }
        deployed.backward(&trace, grad_eps, grad_acts.as_deref(), &mut grads)?;
    }
    let inv = 1.0 / cfg.batch as f64;
    grads.scale(inv);
    out.loss_noise *= inv;
    out.loss_feat *= inv;
    if !out.loss_noise.is_finite() || !out.loss_feat.is_finite() {
        return Err(Error::NonFinite(format!(
            "batch loss noise={} feat={}",
            out.loss_noise, out.loss_feat
        )));
    }
    Ok((out, grads))
}

/// Stage-I distillation loss and gradients for one sampled batch:
/// noise matching against the frozen teacher plus lambda-weighted feature
/// matching over block outputs, with shared condition dropping.
pub fn stage1_loss(
    teacher: &DenoiserParams,
    student: &StudentState,
    ds: &ToyDataset,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut SplitMix64,
) -> Result<(StepOutcome, StudentGrads)> {
    let deployed = student.deployed()?;
    let (out, grads) = batch_loss(
        Some(teacher),
        student,
        &deployed,
        ds,
        sched,
        cfg,
        cfg.lambda,
        rng,
    )?;
    Ok((out, to_student_grads(student, grads, cfg.lsq_grad_scale)?))
}

/// Stage-II noise-prediction loss (ground-truth targets, lambda = 0),
/// keeping Beta timestep sampling and condition dropping.
pub fn stage2_loss(
    student: &StudentState,
    ds: &ToyDataset,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut SplitMix64,
) -> Result<(StepOutcome, StudentGrads)> {
    let deployed = student.deployed()?;
    let (out, grads) = batch_loss(None, student, &deployed, ds, sched, cfg, 0.0, rng)?;
    Ok((out, to_student_grads(student, grads, cfg.lsq_grad_scale)?))
}

/// Applies one AdamW step. `allow`, when set, restricts updates to the
/// named tensors (the sensitivity scan trains a single layer this way).
pub fn apply_update(
    student: &mut StudentState,
    grads: &StudentGrads,
    allow: Option<&BTreeSet<String>>,
) -> Result<()> {
    let frozen: BTreeSet<String> = student
        .latent
        .time_layers()
        .into_iter()
        .flat_map(|w| {
            let b = w.replace(".weight", ".bias");
            [w, b]
        })
        .collect();
    student.opt.begin_step();
    let names: Vec<String> = student.latent.tensors.iter().map(|(n, _)| n.clone()).collect();
    for name in &names {
        if frozen.contains(name) {
            continue;
        }
        if let Some(set) = allow {
            if !set.contains(name) {
                continue;
            }
        }
        let g = grads.latent.get(name)?;
        let t = student.latent.get_mut(name)?;
        student.opt.update(name, &mut t.data, &g.data, name.ends_with(".weight"));
    }
    for (name, gs) in &grads.scales {
        if let Some(set) = allow {
            if !set.contains(name) {
                continue;
            }
        }
        let qp = student
            .qparams
            .get_mut(name)
            .ok_or_else(|| Error::MissingLayer(name.clone()))?;
        student
            .opt
            .update(&format!("{name}#scale"), &mut qp.affine.scales, gs, false);
        for (c, s) in qp.affine.scales.iter_mut().enumerate() {
            if !s.is_finite() {
                return Err(Error::NonFinite(format!("scale {name}[{c}]")));
            }
            *s = s.max(quantizer::SCALE_FLOOR);
        }
    }
    Ok(())
}

/// One metrics-log row; eval columns are filled on eval iterations only.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub stage: u8,
    pub iter: u64,
    pub loss_noise: f64,
    pub loss_feat: f64,
    pub eval_mse: Option<f64>,
    pub eval_alignment: Option<f64>,
}

pub fn log_rows_to_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("stage,iter,loss_noise,loss_feat,eval_mse,eval_alignment\n");
    for r in rows {
        let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.stage,
            r.iter,
            r.loss_noise,
            r.loss_feat,
            fmt_opt(r.eval_mse),
            fmt_opt(r.eval_alignment)
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalPlan {
    pub every: u64,
    pub samples: usize,
    pub steps: usize,
    pub guidance: f64,
}

/// Runs one training stage (1 = distillation, 2 = noise prediction) for
/// the iteration count in `cfg`, logging losses and generation metrics
/// every `eval.every` iterations plus the first and last.
pub fn run_stage(
    stage: u8,
    teacher: &DenoiserParams,
    student: &mut StudentState,
    ds: &ToyDataset,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    eval: &EvalPlan,
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    let (tag, iters) = match stage {
        1 => (TAG_STAGE1, cfg.iters_stage1),
        2 => (TAG_STAGE2, cfg.iters_stage2),
        other => return Err(Error::InvalidArgument(format!("stage {other}"))),
    };
    let mut rng = SplitMix64::new(derive_seed(cfg.seed, &[tag]));
    let spec = SampleSpec {
        steps: eval.steps,
        guidance: eval.guidance,
    };
    let eval_set = EvalSet::new(eval.samples, ds.classes, derive_seed(cfg.seed, &[TAG_EVAL]), spec);
    let teacher_gens = eval_set.generate(teacher, sched, None)?;

    let mut rows = Vec::new();
    let run_eval = |student: &StudentState, rows: &mut Vec<LogRow>, iter: u64, out: &StepOutcome| -> Result<()> {
        let deployed = student.deployed()?;
        let gens = eval_set.generate(&deployed, sched, Some(&student.table))?;
        let mse = EvalSet::paired_mse(&gens, &teacher_gens)?;
        let align = alignment_score(&eval_set.tagged(&gens), &ds.modes)?;
        rows.push(LogRow {
            stage,
            iter,
            loss_noise: out.loss_noise,
            loss_feat: out.loss_feat,
            eval_mse: Some(mse),
            eval_alignment: Some(align),
        });
        Ok(())
    };

    for iter in 0..iters {
        let (out, grads) = match stage {
            1 => stage1_loss(teacher, student, ds, sched, cfg, &mut rng)?,
            _ => stage2_loss(student, ds, sched, cfg, &mut rng)?,
        };
        if iter == 0 || (eval.every > 0 && iter % eval.every == 0) {
            run_eval(student, &mut rows, iter, &out)?;
        } else {
            rows.push(LogRow {
                stage,
                iter,
                loss_noise: out.loss_noise,
                loss_feat: out.loss_feat,
                eval_mse: None,
                eval_alignment: None,
            });
        }
        apply_update(student, &grads, None)?;
    }
    // closing eval reflecting the final update
    let out = StepOutcome::default();
    run_eval(student, &mut rows, iters, &out)?;
    Ok(rows)
}

/// Full two-stage pipeline: Stage I then Stage II with shared optimizer
/// moments.
pub fn train(
    teacher: &DenoiserParams,
    student: &mut StudentState,
    ds: &ToyDataset,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    eval: &EvalPlan,
) -> Result<Vec<LogRow>> {
    let mut rows = run_stage(1, teacher, student, ds, sched, cfg, eval)?;
    rows.extend(run_stage(2, teacher, student, ds, sched, cfg, eval)?);
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherConfig {
    pub lr: f64,
    pub batch: usize,
    pub iters: u64,
    pub p_drop: f64,
    pub seed: u64,
}

/// Plain noise-prediction training of the full-precision teacher with
/// uniform timesteps; condition dropping keeps the null embedding alive
/// for guidance.
pub fn train_teacher(
    mut params: DenoiserParams,
    ds: &ToyDataset,
    sched: &NoiseSchedule,
    cfg: &TeacherConfig,
) -> Result<(DenoiserParams, Vec<LogRow>)> {
    if !(0.0..=1.0).contains(&cfg.p_drop) || cfg.batch == 0 || !(cfg.lr > 0.0) {
        return Err(Error::InvalidArgument("bad teacher config".into()));
    }
    let mut rng = SplitMix64::new(derive_seed(cfg.seed, &[0]));
    let mut opt = AdamW::new(cfg.lr, 0.01);
    let mut rows = Vec::new();
    for iter in 0..cfg.iters {
        let mut grads = DenoiserGrads::zeros_like(&params);
        let mut loss_acc = 0.0;
        for _ in 0..cfg.batch {
            let t = rng.below(sched.t_total as u64) as usize;
            let (x, cls) = ds.sample(&mut rng);
            let eps = [rng.normal(), rng.normal()];
            let z = forward_diffuse(x, t, eps, sched);
            let cond = if rng.uniform() < cfg.p_drop { None } else { Some(cls) };
            let emb = crate::toydiff::time_embedding(t, params.dims.embed)?;
            let feats = params.time_features(t)?;
            let fv: Vec<&[f64]> = feats.iter().map(|v| v.as_slice()).collect();
            let trace = params.forward_trace(z, &fv, cond, Some(emb))?;
            let mut grad_eps = [0.0; 2];
            loss_acc += elem_loss(&trace.eps_hat, &eps, LossNorm::L2, &mut grad_eps);
            params.backward(&trace, grad_eps, None, &mut grads)?;
        }
        let inv = 1.0 / cfg.batch as f64;
        grads.scale(inv);
        loss_acc *= inv;
        if !loss_acc.is_finite() {
            return Err(Error::NonFinite(format!("teacher loss at iter {iter}")));
        }
        opt.begin_step();
        let names: Vec<String> = params.tensors.iter().map(|(n, _)| n.clone()).collect();
        for name in &names {
            let g = grads.get(name)?.data.clone();
            let t = params.get_mut(name)?;
            opt.update(name, &mut t.data, &g, name.ends_with(".weight"));
        }
        if iter % 100 == 0 || iter + 1 == cfg.iters {
            rows.push(LogRow {
                stage: 0,
                iter,
                loss_noise: loss_acc,
                loss_feat: 0.0,
                eval_mse: None,
                eval_alignment: None,
            });
        }
    }
    Ok((params, rows))
}

/// Mean weighted noise error ((1 - abar_t)/abar_t * ||eps_fp - eps_q||^2)
/// over a fixed evaluation set, per grid timestep, with z_t shared between
/// teacher and student per pair.
pub fn profile_timestep_error(
    teacher: &DenoiserParams,
    deployed: &DenoiserParams,
    table: &TimeFeatureTable,
    ds: &ToyDataset,
    sched: &NoiseSchedule,
    t_grid: &[usize],
    pairs: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = SplitMix64::new(derive_seed(seed, &[TAG_PROFILE]));
    let set: Vec<(Point, usize, Point)> = (0..pairs)
        .map(|_| {
            let (x, c) = ds.sample(&mut rng);
            (x, c, [rng.normal(), rng.normal()])
        })
        .collect();
    let mut out = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        if t >= sched.t_total {
            return Err(Error::InvalidArgument(format!("grid step {t} out of range")));
        }
        let abar = sched.alpha_bars[t];
        let weight = (1.0 - abar) / abar;
        let feats_fp = teacher.time_features(t)?;
        let fv: Vec<&[f64]> = feats_fp.iter().map(|v| v.as_slice()).collect();
        let feats_q = table.features_at(t)?;
        let mut acc = 0.0;
        for &(x, c, eps) in &set {
            let z = forward_diffuse(x, t, eps, sched);
            let (e_fp, _) = teacher.forward(z, &fv, Some(c))?;
            let (e_q, _) = deployed.forward(z, &feats_q, Some(c))?;
            let d0 = e_fp[0] - e_q[0];
            let d1 = e_fp[1] - e_q[1];
            acc += weight * (d0 * d0 + d1 * d1);
        }
        out.push(acc / pairs as f64);
    }
    Ok(out)
}
