//! Command pipeline behind the CLI: each function reads its prerequisite
//! artifacts from the run directory, does one stage of work, and writes
//! its outputs. Every random draw is derived from the root seed with a
//! (command, purpose, index) tag, so reruns are byte-identical.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bitpack::{self, ExtraTensor, PackedLayer, PackedModel};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{self, derive_seed, SplitMix64};
use crate::qat::{
    log_rows_to_csv, run_stage, train_teacher, AdamW, QuantizedParam, StudentState, TeacherConfig,
    TrainConfig,
};
use crate::quantizer::{quantize, ChannelAffine, QuantSpec, WeightTensor};
use crate::sensitivity::{
    alignment_score, correlation_report, layer_sizes, plan_precision, run_scan, EvalSet,
    PrecisionRecipe, ScanRecord, PSNR_PEAK,
};
use crate::toydiff::{
    ddim_sample_from, ddim_steps, make_schedule, DenoiserParams, ModelDims, NoiseSchedule,
    SampleSpec, Tensor, TimeFeatureTable, ToyDataset,
};

const TAG_TEACHER: u64 = 1;
const TAG_SCAN: u64 = 2;
const TAG_QAT: u64 = 3;
const TAG_SAMPLE: u64 = 4;
const TAG_EVAL: u64 = 5;

/// Artifact locations under one run directory.
#[derive(Debug, Clone)]
pub struct Paths {
    pub out_dir: PathBuf,
}

impl Paths {
    pub fn new(out_dir: &str) -> Self {
        Paths {
            out_dir: PathBuf::from(out_dir),
        }
    }

    pub fn teacher(&self) -> PathBuf {
        self.out_dir.join("teacher.bft")
    }
    pub fn teacher_metrics(&self) -> PathBuf {
        self.out_dir.join("teacher_metrics.csv")
    }
    pub fn scan(&self) -> PathBuf {
        self.out_dir.join("scan.json")
    }
    pub fn correlation(&self) -> PathBuf {
        self.out_dir.join("correlation.json")
    }
    pub fn recipe(&self) -> PathBuf {
        self.out_dir.join("recipe.json")
    }
    pub fn plan_report(&self) -> PathBuf {
        self.out_dir.join("plan_report.json")
    }
    pub fn student_stage1(&self) -> PathBuf {
        self.out_dir.join("student_stage1.bft")
    }
    pub fn qat_metrics(&self) -> PathBuf {
        self.out_dir.join("qat_metrics.csv")
    }
    pub fn student(&self) -> PathBuf {
        self.out_dir.join("student.bft")
    }
    pub fn finetune_metrics(&self) -> PathBuf {
        self.out_dir.join("finetune_metrics.csv")
    }
    pub fn samples(&self) -> PathBuf {
        self.out_dir.join("samples.csv")
    }
    pub fn eval_sweep(&self) -> PathBuf {
        self.out_dir.join("eval_cfg_sweep.csv")
    }
    pub fn packed(&self) -> PathBuf {
        self.out_dir.join("model.bfq")
    }
    pub fn pack_report(&self) -> PathBuf {
        self.out_dir.join("pack_report.json")
    }
}

fn require(path: &Path, producer: &str) -> Result<()> {
    if path.exists() {
        return Ok(());
    }
    Err(Error::MissingArtifact {
        path: path.to_path_buf(),
        hint: format!("run `lobit {producer}` first"),
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes)
        .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn dataset(cfg: &RunConfig) -> Result<ToyDataset> {
    ToyDataset::new(cfg.data.classes, cfg.data.sigma, cfg.data.radius)
}

fn schedule(cfg: &RunConfig) -> Result<NoiseSchedule> {
    make_schedule(
        cfg.schedule.t_total,
        cfg.schedule.beta_start,
        cfg.schedule.beta_end,
    )
}

pub fn cmd_train_teacher(cfg: &RunConfig) -> Result<()> {
    let paths = Paths::new(&cfg.out_dir);
    let ds = dataset(cfg)?;
    let sched = schedule(cfg)?;
    let mut rng = SplitMix64::new(derive_seed(cfg.seed, &[TAG_TEACHER, 0]));
    let init = DenoiserParams::init(cfg.model, &mut rng)?;
    let tcfg = TeacherConfig {
        seed: derive_seed(cfg.seed, &[TAG_TEACHER, 1]),
        ..cfg.teacher.clone()
    };
    let (teacher, rows) = train_teacher(init, &ds, &sched, &tcfg)?;
    write_file(&paths.teacher(), &crate::toydiff::tensors_to_bytes(&teacher.tensors)?)?;
    write_file(&paths.teacher_metrics(), log_rows_to_csv(&rows).as_bytes())
}

pub fn cmd_scan(cfg: &RunConfig, jobs: usize) -> Result<()> {
    let paths = Paths::new(&cfg.out_dir);
    require(&paths.teacher(), "train-teacher")?;
    let teacher = DenoiserParams::load(&paths.teacher())?;
    let ds = dataset(cfg)?;
    let sched = schedule(cfg)?;
    let records = run_scan(
        &teacher,
        &ds,
        &sched,
        &cfg.planner,
        derive_seed(cfg.seed, &[TAG_SCAN]),
        jobs,
    )?;
    let report = correlation_report(&records)?;
    write_json(&paths.scan(), &records)?;
    write_json(&paths.correlation(), &report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    pub threshold: f64,
    pub achieved_avg_bits: f64,
    pub target_avg_bits: Option<f64>,
    pub s_threshold: Option<f64>,
}

pub fn cmd_plan(cfg: &RunConfig) -> Result<()> {
    let paths = Paths::new(&cfg.out_dir);
    require(&paths.teacher(), "train-teacher")?;
    require(&paths.scan(), "scan")?;
    let teacher = DenoiserParams::load(&paths.teacher())?;
    let records: Vec<ScanRecord> = read_json(&paths.scan())?;
    let quantizable = teacher.quantizable_layers();
    let sizes = layer_sizes(&teacher, &quantizable)?;
    let fixed8: BTreeSet<String> = cfg.fixed8.iter().cloned().collect();
    for name in &fixed8 {
        if !quantizable.contains(name) {
            return Err(Error::UnknownLayer(name.clone()));
        }
    }
    let excluded: BTreeSet<String> = teacher.time_layers().into_iter().collect();
    let outcome = plan_precision(&records, &sizes, &cfg.planner, &fixed8, &excluded)?;
    write_json(&paths.recipe(), &outcome.recipe)?;
    write_json(
        &paths.plan_report(),
        &PlanReport {
            threshold: outcome.threshold,
            achieved_avg_bits: outcome.achieved_avg_bits,
            target_avg_bits: cfg.planner.target_avg_bits,
            s_threshold: cfg.planner.s_threshold,
        },
    )
}

/// Serializes the full QAT state (latents, trained scales, optimizer
/// moments) into one tensor checkpoint. Values pass through FP32, which
/// is the precision the checkpoint format stores anyway.
pub fn save_student(student: &StudentState, path: &Path) -> Result<()> {
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    for (name, t) in &student.latent.tensors {
        tensors.push((
            format!("latent.{name}"),
            Tensor {
                dims: t.dims.clone(),
                data: t.data.iter().map(|&v| v as f32 as f64).collect(),
            },
        ));
    }
    for (name, qp) in &student.qparams {
        tensors.push((
            format!("quant.scale.{name}"),
            Tensor {
                dims: vec![qp.affine.scales.len()],
                data: qp.affine.scales.iter().map(|&v| v as f32 as f64).collect(),
            },
        ));
        tensors.push((
            format!("quant.zero.{name}"),
            Tensor {
                dims: vec![qp.affine.zero_offsets.len()],
                data: qp.affine.zero_offsets.iter().map(|&z| z as f64).collect(),
            },
        ));
    }
    tensors.push((
        "opt.step".into(),
        Tensor {
            dims: vec![1],
            data: vec![student.opt.step as f64],
        },
    ));
    for (name, (m, v)) in &student.opt.moments {
        tensors.push((
            format!("opt.m.{name}"),
            Tensor {
                dims: vec![m.len()],
                data: m.iter().map(|&x| x as f64).collect(),
            },
        ));
        tensors.push((
            format!("opt.v.{name}"),
            Tensor {
                dims: vec![v.len()],
                data: v.iter().map(|&x| x as f64).collect(),
            },
        ));
    }
    write_file(path, &crate::toydiff::tensors_to_bytes(&tensors)?)
}

pub fn load_student(
    path: &Path,
    recipe: &PrecisionRecipe,
    t_total: usize,
    lr: f64,
) -> Result<StudentState> {
    let tensors = crate::toydiff::read_tensors(path)?;
    let mut latent = Vec::new();
    let mut rest: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, t) in tensors {
        if let Some(inner) = name.strip_prefix("latent.") {
            latent.push((inner.to_string(), t));
        } else {
            rest.insert(name, t);
        }
    }
    let latent = DenoiserParams::from_tensor_list(latent)?;
    fn take(rest: &mut BTreeMap<String, Tensor>, path: &Path, key: String) -> Result<Tensor> {
        rest.remove(&key).ok_or(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("missing tensor {key}"),
        })
    }
    let mut qparams = BTreeMap::new();
    for (name, &bits) in &recipe.bits {
        let spec = if recipe.fixed8.contains(name) {
            QuantSpec::new(8, false)?
        } else {
            QuantSpec::new(bits, recipe.balanced)?
        };
        let scales = take(&mut rest, path, format!("quant.scale.{name}"))?;
        let zeros = take(&mut rest, path, format!("quant.zero.{name}"))?;
        let affine = ChannelAffine {
            scales: scales.data,
            zero_offsets: zeros.data.iter().map(|&z| z as i32).collect(),
        };
        let w = latent.get(name)?;
        if affine.len() != w.dims[0] {
            return Err(Error::ShapeMismatch(format!(
                "{name}: {} scales for {} channels",
                affine.len(),
                w.dims[0]
            )));
        }
        qparams.insert(name.clone(), QuantizedParam { spec, affine });
    }
    let mut opt = AdamW::new(lr, 0.01);
    opt.step = take(&mut rest, path, "opt.step".into())?.data[0] as u64;
    let moment_keys: Vec<String> = rest
        .keys()
        .filter_map(|k| k.strip_prefix("opt.m.").map(str::to_string))
        .collect();
    for key in moment_keys {
        let m = take(&mut rest, path, format!("opt.m.{key}"))?;
        let v = take(&mut rest, path, format!("opt.v.{key}"))?;
        if m.data.len() != v.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "moments for {key}: {} vs {}",
                m.data.len(),
                v.data.len()
            )));
        }
        opt.moments.insert(
            key,
            (
                m.data.iter().map(|&x| x as f32).collect(),
                v.data.iter().map(|&x| x as f32).collect(),
            ),
        );
    }
    if let Some(stray) = rest.keys().next() {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("unexpected tensor {stray}"),
        });
    }
    let steps: Vec<usize> = (0..t_total).collect();
    let table = crate::toydiff::cache_time_features(&latent, &steps, t_total)?;
    Ok(StudentState {
        latent,
        recipe: recipe.clone(),
        qparams,
        table,
        opt,
    })
}

fn train_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig {
        seed: derive_seed(cfg.seed, &[TAG_QAT]),
        ..cfg.train.clone()
    }
}

pub fn cmd_qat(cfg: &RunConfig) -> Result<()> {
    let paths = Paths::new(&cfg.out_dir);
    require(&paths.teacher(), "train-teacher")?;
    require(&paths.recipe(), "plan")?;
    let teacher = DenoiserParams::load(&paths.teacher())?;
    let recipe: PrecisionRecipe = read_json(&paths.recipe())?;
    let ds = dataset(cfg)?;
    let sched = schedule(cfg)?;
    let tcfg = train_config(cfg);
    let mut student = StudentState::init(&teacher, recipe, sched.t_total, tcfg.lr)?;
    let rows = run_stage(1, &teacher, &mut student, &ds, &sched, &tcfg, &cfg.train_eval)?;
    save_student(&student, &paths.student_stage1())?;
    write_file(&paths.qat_metrics(), log_rows_to_csv(&rows).as_bytes())
}

pub fn cmd_finetune(cfg: &RunConfig) -> Result<()> {
    let paths = Paths::new(&cfg.out_dir);
    require(&paths.teacher(), "train-teacher")?;
    require(&paths.recipe(), "plan")?;
    require(&paths.student_stage1(), "qat")?;
    let teacher = DenoiserParams::load(&paths.teacher())?;
    let recipe: PrecisionRecipe = read_json(&paths.recipe())?;
    let ds = dataset(cfg)?;
    let sched = schedule(cfg)?;
    let tcfg = train_config(cfg);
    let mut student = load_student(&paths.student_stage1(), &recipe, sched.t_total, tcfg.lr)?;
    let rows = run_stage(2, &teacher, &mut student, &ds, &sched, &tcfg, &cfg.train_eval)?;
    save_student(&student, &paths.student())?;
    write_file(&paths.finetune_metrics(), log_rows_to_csv(&rows).as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackReport {
    pub file_bytes: usize,
    pub predicted_bytes: usize,
    pub avg_bits_weights: f64,
    pub avg_bits_with_features: f64,
    pub feature_scalars: usize,
}

pub fn cmd_pack(cfg: &RunConfig) -> Result<()> {
    let paths = Paths::new(&cfg.out_dir);
    require(&paths.recipe(), "plan")?;
    require(&paths.student(), "finetune")?;
    let recipe: PrecisionRecipe = read_json(&paths.recipe())?;
    let sched = schedule(cfg)?;
    let student = load_student(&paths.student(), &recipe, sched.t_total, cfg.train.lr)?;

    let mut layers = Vec::new();
    for (name, qp) in &student.qparams {
        let t = student.latent.get(name)?;
        let w = WeightTensor::new(name.clone(), t.dims.clone(), t.data.clone())?;
        let q = quantize(&w, &qp.spec, &qp.affine)?;
        layers.push(PackedLayer::from_quantized(&q)?);
    }
    let time_names: BTreeSet<String> = student
        .latent
        .time_layers()
        .into_iter()
        .flat_map(|w| [w.clone(), w.replace(".weight", ".bias")])
        .collect();
    let extras: Vec<ExtraTensor> = student
        .latent
        .tensors
        .iter()
        .filter(|(name, _)| !recipe.bits.contains_key(name) && !time_names.contains(name))
        .map(|(name, t)| ExtraTensor {
            name: name.clone(),
            dims: t.dims.clone(),
            data: t.data.iter().map(|&v| v as f32).collect(),
        })
        .collect();
    let mut steps = ddim_steps(sched.t_total, cfg.sample.steps)?;
    steps.sort_unstable();
    let table = crate::toydiff::cache_time_features(&student.latent, &steps, sched.t_total)?;
    let packed = PackedModel {
        layers,
        extras,
        time_features: table.to_section(),
    };
    let bytes = packed.to_bytes()?;
    write_file(&paths.packed(), &bytes)?;

    let quantizable = student.latent.quantizable_layers();
    let sizes = layer_sizes(&student.latent, &quantizable)?;
    let priced: BTreeMap<String, usize> = recipe
        .bits
        .keys()
        .map(|k| (k.clone(), sizes[k]))
        .collect();
    let n_tf = packed.time_features.data.len();
    write_json(
        &paths.pack_report(),
        &PackReport {
            file_bytes: bytes.len(),
            predicted_bytes: packed.predicted_size()?,
            avg_bits_weights: bitpack::average_bits(&recipe, &priced, 0)?,
            avg_bits_with_features: bitpack::average_bits(&recipe, &priced, n_tf)?,
            feature_scalars: n_tf,
        },
    )
}

/// Rebuilds a runnable parameter set from a packed model. Time projection
/// weights are not stored, so sampling must go through the bundled
/// feature table; the reconstructed time tensors are zero.
pub fn packed_to_params(packed: &PackedModel) -> Result<(DenoiserParams, TimeFeatureTable)> {
    let proj_in = packed.layer("proj_in.weight")?;
    let class = packed.layer("class_embed.weight")?;
    let hidden = proj_in.dims[0];
    let classes = class.dims[0].saturating_sub(1);
    let embed = class.dims[1];
    let blocks = (0..)
        .take_while(|i| {
            packed
                .layers
                .iter()
                .any(|l| l.name == format!("block{i}.fc1.weight"))
        })
        .count();
    let dims = ModelDims {
        hidden,
        embed,
        blocks,
        classes,
    };
    dims.validate()?;
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    for layer in &packed.layers {
        let w = crate::quantizer::dequantize(&layer.unpack()?);
        tensors.push((
            layer.name.clone(),
            Tensor {
                dims: w.dims.clone(),
                data: w.data,
            },
        ));
    }
    for extra in &packed.extras {
        tensors.push((
            extra.name.clone(),
            Tensor {
                dims: extra.dims.clone(),
                data: extra.data.iter().map(|&v| v as f64).collect(),
            },
        ));
    }
    for i in 0..blocks {
        tensors.push((format!("block{i}.time.weight"), Tensor::zeros(vec![hidden, embed])));
        tensors.push((format!("block{i}.time.bias"), Tensor::zeros(vec![hidden])));
    }
    let params = DenoiserParams::from_tensor_list(tensors)?;
    let table = TimeFeatureTable::from_section(&packed.time_features);
    Ok((params, table))
}

pub fn cmd_sample(cfg: &RunConfig) -> Result<()> {
    let paths = Paths::new(&cfg.out_dir);
    require(&paths.packed(), "pack")?;
    let packed = bitpack::read_model(&paths.packed())?;
    let (params, table) = packed_to_params(&packed)?;
    let sched = schedule(cfg)?;
    let spec = SampleSpec {
        steps: cfg.sample.steps,
        guidance: cfg.sample.guidance,
    };
    let mut csv = String::from("index,class,x,y\n");
    for i in 0..cfg.sample.count {
        let class = i % cfg.data.classes;
        let mut rng = SplitMix64::new(derive_seed(cfg.seed, &[TAG_SAMPLE, i as u64]));
        let z0 = [rng.normal(), rng.normal()];
        let p = ddim_sample_from(&params, &sched, Some(&table), class, spec, z0)?;
        csv.push_str(&format!("{i},{class},{},{}\n", p[0], p[1]));
    }
    write_file(&paths.samples(), csv.as_bytes())
}

/// CFG scales for the evaluation sweep.
pub const EVAL_GUIDANCES: [f64; 8] = [2.5, 3.5, 4.5, 5.5, 6.5, 7.5, 8.5, 9.5];

pub fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let paths = Paths::new(&cfg.out_dir);
    require(&paths.teacher(), "train-teacher")?;
    require(&paths.recipe(), "plan")?;
    require(&paths.student(), "finetune")?;
    let teacher = DenoiserParams::load(&paths.teacher())?;
    let recipe: PrecisionRecipe = read_json(&paths.recipe())?;
    let sched = schedule(cfg)?;
    let ds = dataset(cfg)?;
    let student = load_student(&paths.student(), &recipe, sched.t_total, cfg.train.lr)?;
    let deployed = student.deployed()?;
    let eval_seed = derive_seed(cfg.seed, &[TAG_EVAL]);
    let mut csv = String::from("guidance,mse,psnr,alignment,teacher_alignment\n");
    for w in EVAL_GUIDANCES {
        let spec = SampleSpec {
            steps: cfg.eval.steps,
            guidance: w,
        };
        let set = EvalSet::new(cfg.eval.samples, cfg.data.classes, eval_seed, spec);
        let t_gens = set.generate(&teacher, &sched, None)?;
        let s_gens = set.generate(&deployed, &sched, Some(&student.table))?;
        let mse = EvalSet::paired_mse(&s_gens, &t_gens)?;
        let flat_s: Vec<f64> = s_gens.iter().flatten().copied().collect();
        let flat_t: Vec<f64> = t_gens.iter().flatten().copied().collect();
        let psnr = metrics::psnr(&flat_s, &flat_t, PSNR_PEAK)?;
        let align = alignment_score(&set.tagged(&s_gens), &ds.modes)?;
        let t_align = alignment_score(&set.tagged(&t_gens), &ds.modes)?;
        csv.push_str(&format!("{w},{mse},{psnr},{align},{t_align}\n"));
    }
    write_file(&paths.eval_sweep(), csv.as_bytes())
}
