//! Run configuration: flat key=value text grouped by [section] headers.
//!
//! Parsing is strict in both directions: every expected key must be
//! present, unknown or duplicate keys are rejected, and values use Rust's
//! shortest-roundtrip float formatting so write -> parse is lossless.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::qat::{EvalPlan, TeacherConfig, TrainConfig};
use crate::sensitivity::PlannerConfig;
use crate::toydiff::ModelDims;

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub classes: usize,
    pub sigma: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub t_total: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleConfig {
    pub count: usize,
    pub steps: usize,
    pub guidance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub samples: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    pub data: DataConfig,
    pub model: ModelDims,
    pub schedule: ScheduleConfig,
    pub teacher: TeacherConfig,
    pub planner: PlannerConfig,
    pub fixed8: Vec<String>,
    pub train: TrainConfig,
    pub train_eval: EvalPlan,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
}

struct Fields(BTreeMap<String, String>);

impl Fields {
    fn take(&mut self, key: &str) -> Result<String> {
        self.0
            .remove(key)
            .ok_or_else(|| Error::Config(format!("missing key {key}")))
    }

    fn req<T>(&mut self, key: &str) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        let v = self.take(key)?;
        v.parse()
            .map_err(|e| Error::Config(format!("key {key}: cannot parse {v:?} ({e})")))
    }

    fn opt_f64(&mut self, key: &str) -> Result<Option<f64>> {
        let v = self.take(key)?;
        if v.is_empty() {
            return Ok(None);
        }
        v.parse()
            .map(Some)
            .map_err(|e| Error::Config(format!("key {key}: cannot parse {v:?} ({e})")))
    }

    fn list_f64(&mut self, key: &str) -> Result<Vec<f64>> {
        let v = self.take(key)?;
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e| Error::Config(format!("key {key}: cannot parse {s:?} ({e})")))
            })
            .collect()
    }

    fn list_str(&mut self, key: &str) -> Result<Vec<String>> {
        let v = self.take(key)?;
        if v.is_empty() {
            return Ok(Vec::new());
        }
        Ok(v.split(',').map(|s| s.trim().to_string()).collect())
    }

    fn finish(self) -> Result<()> {
        if let Some(key) = self.0.keys().next() {
            return Err(Error::Config(format!("unknown key {key}")));
        }
        Ok(())
    }
}

fn parse_raw(text: &str) -> Result<Fields> {
    let mut map = BTreeMap::new();
    let mut section: Option<String> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            if name.is_empty() {
                return Err(Error::Config(format!("empty section header on line {}", lineno + 1)));
            }
            section = Some(name.to_string());
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {} is neither a section nor key=value: {line:?}",
                lineno + 1
            )));
        };
        let Some(sec) = &section else {
            return Err(Error::Config(format!("key before any section on line {}", lineno + 1)));
        };
        let key = format!("{sec}.{}", k.trim());
        if map.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("duplicate key {key}")));
        }
    }
    Ok(Fields(map))
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut f = parse_raw(text)?;
        let seed = f.req("run.seed")?;
        let out_dir: String = f.take("run.out_dir")?;
        let data = DataConfig {
            classes: f.req("data.classes")?,
            sigma: f.req("data.sigma")?,
            radius: f.req("data.radius")?,
        };
        let model = ModelDims {
            hidden: f.req("model.hidden")?,
            embed: f.req("model.embed")?,
            blocks: f.req("model.blocks")?,
            classes: data.classes,
        };
        let schedule = ScheduleConfig {
            t_total: f.req("schedule.t_total")?,
            beta_start: f.req("schedule.beta_start")?,
            beta_end: f.req("schedule.beta_end")?,
        };
        let teacher = TeacherConfig {
            lr: f.req("teacher.lr")?,
            batch: f.req("teacher.batch")?,
            iters: f.req("teacher.iters")?,
            p_drop: f.req("teacher.p_drop")?,
            seed,
        };
        let planner = PlannerConfig {
            eta: f.req("scan.eta")?,
            s_threshold: f.opt_f64("scan.s_threshold")?,
            target_avg_bits: f.opt_f64("scan.target_avg_bits")?,
            bump_percentiles: f.list_f64("scan.bump_percentiles")?,
            default_bits: f.req("scan.default_bits")?,
            qat_iters: f.req("scan.qat_iters")?,
            qat_lr: f.req("scan.qat_lr")?,
            scan_batch: f.req("scan.scan_batch")?,
            eval_samples: f.req("scan.eval_samples")?,
            eval_steps: f.req("scan.eval_steps")?,
            eval_guidance: f.req("scan.eval_guidance")?,
            full_model_qat: f.req("scan.full_model_qat")?,
        };
        let fixed8 = f.list_str("scan.fixed8")?;
        let train = TrainConfig {
            lr: f.req("train.lr")?,
            batch: f.req("train.batch")?,
            iters_stage1: f.req("train.iters_stage1")?,
            iters_stage2: f.req("train.iters_stage2")?,
            lambda: f.req("train.lambda")?,
            p_drop: f.req("train.p_drop")?,
            beta_alpha: f.req("train.beta_alpha")?,
            beta_beta: f.req("train.beta_beta")?,
            seed,
            loss_norm: f.req("train.loss_norm")?,
            lsq_grad_scale: f.req("train.lsq_grad_scale")?,
        };
        let train_eval = EvalPlan {
            every: f.req("train.eval_every")?,
            samples: f.req("train.eval_samples")?,
            steps: f.req("train.eval_steps")?,
            guidance: f.req("train.eval_guidance")?,
        };
        let sample = SampleConfig {
            count: f.req("sample.count")?,
            steps: f.req("sample.steps")?,
            guidance: f.req("sample.guidance")?,
        };
        let eval = EvalConfig {
            samples: f.req("eval.samples")?,
            steps: f.req("eval.steps")?,
        };
        f.finish()?;
        let cfg = RunConfig {
            seed,
            out_dir,
            data,
            model,
            schedule,
            teacher,
            planner,
            fixed8,
            train,
            train_eval,
            sample,
            eval,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let listf = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "[run]\n\
             seed = {}\n\
             out_dir = {}\n\
             \n[data]\n\
             classes = {}\n\
             sigma = {}\n\
             radius = {}\n\
             \n[model]\n\
             hidden = {}\n\
             embed = {}\n\
             blocks = {}\n\
             \n[schedule]\n\
             t_total = {}\n\
             beta_start = {}\n\
             beta_end = {}\n\
             \n[teacher]\n\
             lr = {}\n\
             batch = {}\n\
             iters = {}\n\
             p_drop = {}\n\
             \n[scan]\n\
             eta = {}\n\
             s_threshold = {}\n\
             target_avg_bits = {}\n\
             bump_percentiles = {}\n\
             default_bits = {}\n\
             qat_iters = {}\n\
             qat_lr = {}\n\
             scan_batch = {}\n\
             eval_samples = {}\n\
             eval_steps = {}\n\
             eval_guidance = {}\n\
             full_model_qat = {}\n\
             fixed8 = {}\n\
             \n[train]\n\
             lr = {}\n\
             batch = {}\n\
             iters_stage1 = {}\n\
             iters_stage2 = {}\n\
             lambda = {}\n\
             p_drop = {}\n\
             beta_alpha = {}\n\
             beta_beta = {}\n\
             loss_norm = {}\n\
             lsq_grad_scale = {}\n\
             eval_every = {}\n\
             eval_samples = {}\n\
             eval_steps = {}\n\
             eval_guidance = {}\n\
             \n[sample]\n\
             count = {}\n\
             steps = {}\n\
             guidance = {}\n\
             \n[eval]\n\
             samples = {}\n\
             steps = {}\n",
            self.seed,
            self.out_dir,
            self.data.classes,
            self.data.sigma,
            self.data.radius,
            self.model.hidden,
            self.model.embed,
            self.model.blocks,
            self.schedule.t_total,
            self.schedule.beta_start,
            self.schedule.beta_end,
            self.teacher.lr,
            self.teacher.batch,
            self.teacher.iters,
            self.teacher.p_drop,
            self.planner.eta,
            opt(self.planner.s_threshold),
            opt(self.planner.target_avg_bits),
            listf(&self.planner.bump_percentiles),
            self.planner.default_bits,
            self.planner.qat_iters,
            self.planner.qat_lr,
            self.planner.scan_batch,
            self.planner.eval_samples,
            self.planner.eval_steps,
            self.planner.eval_guidance,
            self.planner.full_model_qat,
            self.fixed8.join(","),
            self.train.lr,
            self.train.batch,
            self.train.iters_stage1,
            self.train.iters_stage2,
            self.train.lambda,
            self.train.p_drop,
            self.train.beta_alpha,
            self.train.beta_beta,
            self.train.loss_norm,
            self.train.lsq_grad_scale,
            self.train_eval.every,
            self.train_eval.samples,
            self.train_eval.steps,
            self.train_eval.guidance,
            self.sample.count,
            self.sample.steps,
            self.sample.guidance,
            self.eval.samples,
            self.eval.steps,
        )
    }

    /// Propagates a root-seed override into the nested configs.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.teacher.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_dir.is_empty() {
            return Err(Error::Config("out_dir is empty".into()));
        }
        if self.data.classes < 2 {
            return Err(Error::Config(format!("data.classes {} below 2", self.data.classes)));
        }
        if !(self.data.sigma > 0.0) {
            return Err(Error::Config(format!("data.sigma {} not positive", self.data.sigma)));
        }
        if !(self.data.radius > 0.0 && self.data.radius <= 1.0) {
            return Err(Error::Config(format!("data.radius {} outside (0, 1]", self.data.radius)));
        }
        self.model.validate()?;
        if self.schedule.t_total < 2 {
            return Err(Error::Config(format!("schedule.t_total {} below 2", self.schedule.t_total)));
        }
        if !(self.schedule.beta_start > 0.0
            && self.schedule.beta_start <= self.schedule.beta_end
            && self.schedule.beta_end < 1.0)
        {
            return Err(Error::Config(format!(
                "schedule betas ({}, {}) must satisfy 0 < start <= end < 1",
                self.schedule.beta_start, self.schedule.beta_end
            )));
        }
        if !(self.teacher.lr > 0.0) || self.teacher.batch == 0 {
            return Err(Error::Config("teacher.lr must be positive, teacher.batch nonzero".into()));
        }
        if !(0.0..=1.0).contains(&self.teacher.p_drop) {
            return Err(Error::Config(format!("teacher.p_drop {} outside [0, 1]", self.teacher.p_drop)));
        }
        self.planner.validate().map_err(|e| Error::Config(format!("[scan] {e}")))?;
        self.train.validate().map_err(|e| Error::Config(format!("[train] {e}")))?;
        for (what, steps) in [
            ("scan.eval_steps", self.planner.eval_steps),
            ("train.eval_steps", self.train_eval.steps),
            ("sample.steps", self.sample.steps),
            ("eval.steps", self.eval.steps),
        ] {
            if steps < 1 || steps > self.schedule.t_total {
                return Err(Error::Config(format!(
                    "{what} {steps} outside [1, {}]",
                    self.schedule.t_total
                )));
            }
        }
        for (what, g) in [
            ("scan.eval_guidance", self.planner.eval_guidance),
            ("train.eval_guidance", self.train_eval.guidance),
            ("sample.guidance", self.sample.guidance),
        ] {
            if !(g >= 1.0) {
                return Err(Error::Config(format!("{what} {g} below 1")));
            }
        }
        if self.sample.count == 0 || self.eval.samples == 0 || self.train_eval.samples == 0 {
            return Err(Error::Config("sample.count and eval sample counts must be nonzero".into()));
        }
        if self.train_eval.every == 0 {
            return Err(Error::Config("train.eval_every must be nonzero".into()));
        }
        Ok(())
    }
}

/// Shipped defaults: the full-size toy pipeline at a 2-bit storage target.
pub fn default_config() -> RunConfig {
    RunConfig {
        seed: 1024,
        out_dir: "runs/default".into(),
        data: DataConfig {
            classes: 8,
            sigma: 0.05,
            radius: 0.85,
        },
        model: ModelDims {
            hidden: 128,
            embed: 64,
            blocks: 6,
            classes: 8,
        },
        schedule: ScheduleConfig {
            t_total: 1000,
            beta_start: 0.00085,
            beta_end: 0.012,
        },
        teacher: TeacherConfig {
            lr: 0.002,
            batch: 64,
            iters: 4000,
            p_drop: 0.1,
            seed: 1024,
        },
        planner: PlannerConfig {
            eta: 0.3,
            s_threshold: None,
            target_avg_bits: Some(2.0),
            bump_percentiles: vec![90.0, 95.0, 98.0],
            default_bits: 4,
            qat_iters: 30,
            qat_lr: 2e-4,
            scan_batch: 16,
            eval_samples: 96,
            eval_steps: 20,
            eval_guidance: 7.5,
            full_model_qat: false,
        },
        fixed8: vec!["proj_in.weight".into(), "proj_out.weight".into()],
        train: TrainConfig {
            lr: 5e-4,
            batch: 32,
            iters_stage1: 1000,
            iters_stage2: 800,
            lambda: 0.01,
            p_drop: 0.1,
            beta_alpha: 3.0,
            beta_beta: 1.0,
            seed: 1024,
            loss_norm: crate::qat::LossNorm::L2,
            lsq_grad_scale: true,
        },
        // progress eval at guidance 1.0: trajectories stay close to the
        // forward marginals the distillation loss supervises, so the MSE
        // tracks quantization recovery instead of guidance amplification
        train_eval: EvalPlan {
            every: 100,
            samples: 128,
            steps: 25,
            guidance: 1.0,
        },
        sample: SampleConfig {
            count: 512,
            steps: 50,
            guidance: 7.5,
        },
        eval: EvalConfig {
            samples: 256,
            steps: 50,
        },
    }
}
