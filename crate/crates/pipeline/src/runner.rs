//! Pipeline stages: teacher training, calibration, bit allocation,
//! fine-tuning, evaluation and reporting, as plain library functions plus
//! run-directory wrappers used by the CLI.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use mpqdm_core::diffusion::{
    collect_calibration, make_schedule, mode_coverage, plant_outliers, sample_trajectory,
    trajectory_mse, trajectory_sqnr_db, two_gaussian_dataset, train_fp, finetune_quantized,
    DenoiserQuantPlan, FinetuneOutcome, LayerScheme, LinearLayer, MlpDenoiser, NoiseSchedule,
    QuantizedDenoiser, TrainConfig,
};
use mpqdm_core::omq::{
    allocate_bits_with_search, apply_smoothing, channel_kurtosis, compute_smooth_factors,
    CalibrationBatch,
};
use mpqdm_core::tensor::Tensor;
use mpqdm_core::trd::DistillConfig;
use mpqdm_core::Tensor64;

use crate::config::RunConfig;
use crate::container::{find, load_container, save_container, Entry, TensorData};
use crate::report::{
    strip_timing, write_csv, EvalReport, LayerReport, RunReport, RunSection, SizeReport,
    TimingReport, TrainingReport, REPORT_VERSION,
};
use crate::size::{model_size_bytes, payload_bytes, LayerAllocation};

pub const FP_MODEL_FILE: &str = "fp_model.mpqt";
pub const CALIB_FILE: &str = "calib.mpqt";
pub const ALLOC_FILE: &str = "alloc.mpqt";
pub const Q_MODEL_FILE: &str = "q_model.mpqt";
pub const REPORT_FILE: &str = "report.toml";

/// How hidden-layer bit-widths are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllocationMode {
    /// Every channel at the target width, no smoothing.
    Uniform,
    /// Outlier-driven mixed allocation with smooth factors.
    Omq,
}

impl AllocationMode {
    pub fn label(&self) -> &'static str {
        match self {
            AllocationMode::Uniform => "uniform",
            AllocationMode::Omq => "omq",
        }
    }
}

pub fn build_schedule(cfg: &RunConfig) -> Result<NoiseSchedule> {
    Ok(make_schedule(
        cfg.schedule.steps,
        cfg.schedule.beta_start,
        cfg.schedule.beta_end,
    )?)
}

fn train_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig {
        steps: cfg.fp_train.steps,
        batch: cfg.fp_train.batch,
        lr: cfg.fp_train.lr,
        seed: cfg.fp_train.seed,
        weight_bits: cfg.quant.weight_bits,
        act_bits: cfg.quant.act_bits,
        distill: DistillConfig {
            smooth_steps: cfg.distill.smooth_steps,
            lambda: cfg.distill.lambda,
            temperature: cfg.distill.temperature,
        },
        lora_rank: cfg.finetune.lora_rank,
        loss_threshold: cfg.fp_train.loss_threshold,
    }
}

fn finetune_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig {
        steps: cfg.finetune.steps,
        batch: cfg.finetune.batch,
        lr: cfg.finetune.lr,
        seed: cfg.finetune.seed,
        ..train_config(cfg)
    }
}

/// Train the FP teacher; optionally plant outlier channels afterwards.
pub fn train_teacher(cfg: &RunConfig) -> Result<(MlpDenoiser, Vec<f64>)> {
    let sched = build_schedule(cfg)?;
    let dataset = two_gaussian_dataset(cfg.dataset.points, cfg.dataset.seed);
    let model = MlpDenoiser::new(
        cfg.model.hidden,
        cfg.model.emb_dim,
        cfg.schedule.steps,
        cfg.model.init_seed,
    );
    let out = train_fp(model, &dataset, &sched, &train_config(cfg))?;
    let mut model = out.model;
    if cfg.quant.plant_outliers {
        plant_outliers(
            &mut model,
            cfg.quant.outlier_fraction,
            cfg.quant.outlier_sigmas,
            cfg.quant.outlier_seed,
        );
    }
    Ok((model, out.loss_curve))
}

/// Collect per-layer calibration inputs from seeded teacher runs.
pub fn calibrate(fp: &MlpDenoiser, cfg: &RunConfig) -> Result<[Tensor64; 3]> {
    let sched = build_schedule(cfg)?;
    Ok(collect_calibration(
        fp,
        &sched,
        cfg.quant.calib_batch,
        cfg.quant.calib_samples,
        cfg.quant.calib_seed,
    )?)
}

/// Build the per-layer quantization plan and its diagnostics.
pub fn plan_quantization(
    fp: &MlpDenoiser,
    calib: &[Tensor64; 3],
    cfg: &RunConfig,
    mode: AllocationMode,
) -> Result<(DenoiserQuantPlan, Vec<LayerReport>)> {
    let mut hidden = Vec::new();
    let mut reports = Vec::new();
    for l in 0..2 {
        let layer = &fp.layers[l];
        let w_t = layer.weight.transposed()?;
        let n = w_t.rows();
        let k = cfg.quant.group_size.resolve(n);
        match mode {
            AllocationMode::Uniform => {
                hidden.push(LayerScheme {
                    delta: vec![1.0; layer.c_in()],
                    bits: vec![cfg.quant.weight_bits; n],
                });
                reports.push(LayerReport {
                    name: format!("layer{l}"),
                    channels: n,
                    group_size: k,
                    chosen_m: 0,
                    plus_extra: 0,
                    promoted: Vec::new(),
                    demoted: Vec::new(),
                    kurtosis: Vec::new(),
                    objectives: Vec::new(),
                });
            }
            AllocationMode::Omq => {
                let x = CalibrationBatch::new(calib[l].clone())?;
                let delta = compute_smooth_factors(&w_t, &x)?;
                let (w_hat, x_hat) = apply_smoothing(&w_t, &x, &delta)?;
                let kurtosis = channel_kurtosis(&w_hat)?;
                let (alloc, search) = allocate_bits_with_search(
                    &w_hat,
                    &x_hat,
                    cfg.quant.weight_bits,
                    k,
                    cfg.quant.plus_fraction,
                    cfg.quant.act_bits,
                )?;
                reports.push(LayerReport {
                    name: format!("layer{l}"),
                    channels: n,
                    group_size: k,
                    chosen_m: search.chosen_m,
                    plus_extra: alloc.plus_extra,
                    promoted: alloc.promoted.clone(),
                    demoted: alloc.demoted.clone(),
                    kurtosis,
                    objectives: search.objectives,
                });
                hidden.push(LayerScheme {
                    delta: delta.values().to_vec(),
                    bits: alloc.bits,
                });
            }
        }
    }
    Ok((
        DenoiserQuantPlan {
            hidden,
            act_bits: cfg.quant.act_bits,
            final_bits: 8,
            final_act_bits: 8,
            lora_rank: cfg.finetune.lora_rank,
        },
        reports,
    ))
}

/// Build the quantized student and fine-tune it.
pub fn finetune(
    fp: &MlpDenoiser,
    calib: &[Tensor64; 3],
    plan: &DenoiserQuantPlan,
    cfg: &RunConfig,
) -> Result<FinetuneOutcome> {
    let sched = build_schedule(cfg)?;
    let q = QuantizedDenoiser::build(fp.clone(), plan, calib, cfg.finetune.seed)?;
    Ok(finetune_quantized(fp, q, &sched, &finetune_config(cfg))?)
}

/// One evaluation row: shared-seed trajectory comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub seed: u64,
    pub trajectory_mse: f64,
    pub sqnr_db: f64,
    pub mode_coverage: f64,
}

/// Compare quantized and FP trajectories over the configured seeds.
pub fn evaluate(fp: &MlpDenoiser, q: &QuantizedDenoiser, cfg: &RunConfig) -> Result<Vec<EvalRow>> {
    let sched = build_schedule(cfg)?;
    let mut rows = Vec::with_capacity(cfg.eval.seeds);
    for i in 0..cfg.eval.seeds {
        let seed = cfg.eval.base_seed + i as u64;
        let tf = sample_trajectory(fp, &sched, cfg.eval.batch, seed)?;
        let tq = sample_trajectory(q, &sched, cfg.eval.batch, seed)?;
        rows.push(EvalRow {
            seed,
            trajectory_mse: trajectory_mse(&tf, &tq)?,
            sqnr_db: trajectory_sqnr_db(&tf, &tq)?,
            mode_coverage: mode_coverage(&tq.samples),
        });
    }
    Ok(rows)
}

/// Size accounting for a quantized model against its uniform counterpart.
pub fn size_report(q: &QuantizedDenoiser, cfg: &RunConfig) -> SizeReport {
    let layers: Vec<LayerAllocation> = q
        .payload_layout()
        .into_iter()
        .map(|(bits, weights)| LayerAllocation {
            bits_per_channel: bits,
            weights_per_channel: weights,
        })
        .collect();
    let uniform: Vec<LayerAllocation> = q
        .payload_layout()
        .into_iter()
        .enumerate()
        .map(|(i, (bits, weights))| {
            let b = if i < 2 { cfg.quant.weight_bits } else { 8 };
            LayerAllocation::uniform(b, bits.len(), weights)
        })
        .collect();
    SizeReport {
        payload_bytes: payload_bytes(&layers),
        total_bytes: model_size_bytes(&layers),
        uniform_total_bytes: model_size_bytes(&uniform),
    }
}

// ---------------------------------------------------------------------------
// Container persistence
// ---------------------------------------------------------------------------

fn tensor_entry(name: &str, t: &Tensor64) -> Result<Entry> {
    Ok(Entry::new(
        name,
        t.shape().iter().map(|&d| d as u64).collect(),
        TensorData::F64(t.data().to_vec()),
    )?)
}

fn entry_tensor(e: &Entry) -> Result<Tensor64> {
    let data = e
        .as_f64()
        .ok_or_else(|| anyhow!("entry {:?} is not f64", e.name))?;
    Ok(Tensor::new(
        e.dims.iter().map(|&d| d as usize).collect(),
        data.to_vec(),
    )?)
}

/// Serialize the FP teacher.
pub fn model_entries(model: &MlpDenoiser) -> Result<Vec<Entry>> {
    let mut entries = vec![Entry::i64_vec(
        "meta",
        vec![
            model.hidden as i64,
            model.emb_dim as i64,
            model.t_max as i64,
        ],
    )];
    for (i, layer) in model.layers.iter().enumerate() {
        entries.push(tensor_entry(&format!("layer{i}/weight"), &layer.weight)?);
        entries.push(Entry::f64_vec(
            format!("layer{i}/bias"),
            layer.bias.clone(),
        ));
    }
    Ok(entries)
}

pub fn model_from_entries(entries: &[Entry]) -> Result<MlpDenoiser> {
    let meta = find(entries, "meta")?
        .as_i64()
        .ok_or_else(|| anyhow!("meta entry has wrong dtype"))?
        .to_vec();
    if meta.len() != 3 {
        bail!("meta entry must hold [hidden, emb_dim, t_max]");
    }
    let mut layers = Vec::with_capacity(3);
    for i in 0..3 {
        let weight = entry_tensor(find(entries, &format!("layer{i}/weight"))?)?;
        let bias = find(entries, &format!("layer{i}/bias"))?
            .as_f64()
            .ok_or_else(|| anyhow!("bias entry has wrong dtype"))?
            .to_vec();
        layers.push(LinearLayer { weight, bias });
    }
    Ok(MlpDenoiser {
        layers,
        hidden: meta[0] as usize,
        emb_dim: meta[1] as usize,
        t_max: meta[2] as usize,
    })
}

/// Serialize the quantized student (base, quantizers, adapters).
pub fn quantized_entries(q: &QuantizedDenoiser) -> Result<Vec<Entry>> {
    let mut entries = model_entries(&q.base)?;
    for i in 0..3 {
        let lq = &q.quant[i];
        entries.push(Entry::f64_vec(format!("layer{i}/delta"), lq.delta.clone()));
        entries.push(Entry::u8_vec(
            format!("layer{i}/wbits"),
            lq.weight_bits.clone(),
        ));
        entries.push(Entry::f64_vec(
            format!("layer{i}/wscale"),
            lq.w_scales.clone(),
        ));
        entries.push(Entry::f64_vec(
            format!("layer{i}/wlower"),
            lq.w_lowers.clone(),
        ));
        entries.push(Entry::u8_vec(format!("layer{i}/abits"), vec![lq.act_bits]));
        entries.push(Entry::f64_vec(
            format!("layer{i}/aparams"),
            vec![lq.a_scale, lq.a_lower],
        ));
        entries.push(tensor_entry(
            &format!("layer{i}/lora_b"),
            &q.adapters[i].b,
        )?);
        entries.push(tensor_entry(
            &format!("layer{i}/lora_a"),
            &q.adapters[i].a,
        )?);
    }
    Ok(entries)
}

pub fn quantized_from_entries(entries: &[Entry]) -> Result<QuantizedDenoiser> {
    use mpqdm_core::diffusion::{LayerQuant, LoraAdapter};
    let base = model_from_entries(entries)?;
    let mut quant = Vec::with_capacity(3);
    let mut adapters = Vec::with_capacity(3);
    for i in 0..3 {
        let f64s = |suffix: &str| -> Result<Vec<f64>> {
            Ok(find(entries, &format!("layer{i}/{suffix}"))?
                .as_f64()
                .ok_or_else(|| anyhow!("layer{i}/{suffix} has wrong dtype"))?
                .to_vec())
        };
        let abits = find(entries, &format!("layer{i}/abits"))?
            .as_u8()
            .ok_or_else(|| anyhow!("layer{i}/abits has wrong dtype"))?[0];
        let aparams = f64s("aparams")?;
        if aparams.len() != 2 {
            bail!("layer{i}/aparams must hold [scale, lower]");
        }
        quant.push(LayerQuant {
            delta: f64s("delta")?,
            weight_bits: find(entries, &format!("layer{i}/wbits"))?
                .as_u8()
                .ok_or_else(|| anyhow!("layer{i}/wbits has wrong dtype"))?
                .to_vec(),
            w_scales: f64s("wscale")?,
            w_lowers: f64s("wlower")?,
            act_bits: abits,
            a_scale: aparams[0],
            a_lower: aparams[1],
        });
        adapters.push(LoraAdapter {
            b: entry_tensor(find(entries, &format!("layer{i}/lora_b"))?)?,
            a: entry_tensor(find(entries, &format!("layer{i}/lora_a"))?)?,
        });
    }
    Ok(QuantizedDenoiser {
        base,
        quant,
        adapters,
    })
}

fn calib_entries(calib: &[Tensor64; 3]) -> Result<Vec<Entry>> {
    calib
        .iter()
        .enumerate()
        .map(|(i, t)| tensor_entry(&format!("layer{i}/calib"), t))
        .collect()
}

fn calib_from_entries(entries: &[Entry]) -> Result<[Tensor64; 3]> {
    let mut out = Vec::with_capacity(3);
    for i in 0..3 {
        out.push(entry_tensor(find(entries, &format!("layer{i}/calib"))?)?);
    }
    Ok([out.remove(0), out.remove(0), out.remove(0)])
}

fn plan_entries(plan: &DenoiserQuantPlan) -> Vec<Entry> {
    let mut entries = vec![Entry::i64_vec(
        "plan/meta",
        vec![
            plan.act_bits as i64,
            plan.final_bits as i64,
            plan.final_act_bits as i64,
            plan.lora_rank as i64,
        ],
    )];
    for (i, scheme) in plan.hidden.iter().enumerate() {
        entries.push(Entry::f64_vec(
            format!("plan/layer{i}/delta"),
            scheme.delta.clone(),
        ));
        entries.push(Entry::u8_vec(
            format!("plan/layer{i}/bits"),
            scheme.bits.clone(),
        ));
    }
    entries
}

fn plan_from_entries(entries: &[Entry]) -> Result<DenoiserQuantPlan> {
    let meta = find(entries, "plan/meta")?
        .as_i64()
        .ok_or_else(|| anyhow!("plan/meta has wrong dtype"))?
        .to_vec();
    if meta.len() != 4 {
        bail!("plan/meta must hold four values");
    }
    let mut hidden = Vec::with_capacity(2);
    for i in 0..2 {
        hidden.push(LayerScheme {
            delta: find(entries, &format!("plan/layer{i}/delta"))?
                .as_f64()
                .ok_or_else(|| anyhow!("plan delta dtype"))?
                .to_vec(),
            bits: find(entries, &format!("plan/layer{i}/bits"))?
                .as_u8()
                .ok_or_else(|| anyhow!("plan bits dtype"))?
                .to_vec(),
        });
    }
    Ok(DenoiserQuantPlan {
        hidden,
        act_bits: meta[0] as u8,
        final_bits: meta[1] as u8,
        final_act_bits: meta[2] as u8,
        lora_rank: meta[3] as usize,
    })
}

// ---------------------------------------------------------------------------
// Run-directory stages
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct FpTrainFragment {
    pub steps: usize,
    pub loss_first: f64,
    pub loss_last: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct CalibrateFragment {
    pub samples: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct AllocateFragment {
    pub allocation: String,
    pub layers: Vec<LayerReport>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct FinetuneFragment {
    pub steps: usize,
    pub loss_first: f64,
    pub loss_last: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct EvalFragment {
    pub median_trajectory_mse: f64,
    pub median_sqnr_db: f64,
    pub median_mode_coverage: f64,
    pub fp_mode_coverage: f64,
    pub seconds: f64,
}

fn write_fragment<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    std::fs::write(dir.join(name), toml::to_string(value)?)?;
    Ok(())
}

fn read_fragment<T: for<'de> Deserialize<'de>>(dir: &Path, name: &str) -> Result<T> {
    let path = dir.join(name);
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("missing stage output {}", path.display()))?;
    Ok(toml::from_str(&text)?)
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite metric"));
    v[v.len() / 2]
}

pub fn stage_train_fp(cfg: &RunConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let start = Instant::now();
    let (model, curve) = train_teacher(cfg)?;
    save_container(dir.join(FP_MODEL_FILE), &model_entries(&model)?)?;
    write_csv(
        dir.join("train_loss.csv"),
        &["step", "loss"],
        curve
            .iter()
            .enumerate()
            .map(|(i, l)| vec![i.to_string(), l.to_string()]),
    )?;
    write_fragment(
        dir,
        "fp_train.toml",
        &FpTrainFragment {
            steps: curve.len(),
            loss_first: curve.first().copied().unwrap_or(0.0),
            loss_last: curve.last().copied().unwrap_or(0.0),
            seconds: start.elapsed().as_secs_f64(),
        },
    )
}

pub fn load_teacher(dir: &Path) -> Result<MlpDenoiser> {
    let path = dir.join(FP_MODEL_FILE);
    let entries = load_container(&path)
        .with_context(|| format!("cannot load teacher from {}", path.display()))?;
    model_from_entries(&entries)
}

pub fn stage_calibrate(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let start = Instant::now();
    let fp = load_teacher(dir)?;
    let calib = calibrate(&fp, cfg)?;
    save_container(dir.join(CALIB_FILE), &calib_entries(&calib)?)?;
    write_fragment(
        dir,
        "calibrate.toml",
        &CalibrateFragment {
            samples: calib[0].rows(),
            seconds: start.elapsed().as_secs_f64(),
        },
    )
}

pub fn stage_allocate(cfg: &RunConfig, dir: &Path, mode: AllocationMode) -> Result<()> {
    let start = Instant::now();
    let fp = load_teacher(dir)?;
    let entries = load_container(dir.join(CALIB_FILE)).context("run `calibrate` first")?;
    let calib = calib_from_entries(&entries)?;
    let (plan, layers) = plan_quantization(&fp, &calib, cfg, mode)?;
    save_container(dir.join(ALLOC_FILE), &plan_entries(&plan))?;
    for report in &layers {
        println!(
            "{}: {} channels, group {}, m={}, promoted {:?}, demoted {:?}, bonus {}",
            report.name,
            report.channels,
            report.group_size,
            report.chosen_m,
            report.promoted,
            report.demoted,
            report.plus_extra
        );
    }
    write_fragment(
        dir,
        "allocate.toml",
        &AllocateFragment {
            allocation: mode.label().to_string(),
            layers,
            seconds: start.elapsed().as_secs_f64(),
        },
    )
}

pub fn stage_finetune(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let start = Instant::now();
    let fp = load_teacher(dir)?;
    let calib = calib_from_entries(
        &load_container(dir.join(CALIB_FILE)).context("run `calibrate` first")?,
    )?;
    let plan = plan_from_entries(
        &load_container(dir.join(ALLOC_FILE)).context("run `allocate` first")?,
    )?;
    let outcome = finetune(&fp, &calib, &plan, cfg)?;
    save_container(dir.join(Q_MODEL_FILE), &quantized_entries(&outcome.model)?)?;
    write_csv(
        dir.join("finetune_loss.csv"),
        &["step", "total", "task", "relation"],
        outcome
            .loss_curve
            .iter()
            .zip(&outcome.task_curve)
            .zip(&outcome.dis_curve)
            .enumerate()
            .map(|(i, ((l, t), d))| {
                vec![i.to_string(), l.to_string(), t.to_string(), d.to_string()]
            }),
    )?;
    write_fragment(
        dir,
        "finetune.toml",
        &FinetuneFragment {
            steps: outcome.loss_curve.len(),
            loss_first: outcome.loss_curve.first().copied().unwrap_or(0.0),
            loss_last: outcome.loss_curve.last().copied().unwrap_or(0.0),
            seconds: start.elapsed().as_secs_f64(),
        },
    )
}

pub fn load_student(dir: &Path) -> Result<QuantizedDenoiser> {
    let entries = load_container(dir.join(Q_MODEL_FILE)).context("run `finetune` first")?;
    quantized_from_entries(&entries)
}

/// Which model a sampling run draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Fp,
    Quantized,
}

pub fn stage_sample(
    cfg: &RunConfig,
    dir: &Path,
    kind: ModelKind,
    seed: u64,
    batch: usize,
    out: &Path,
) -> Result<f64> {
    let sched = build_schedule(cfg)?;
    let samples = match kind {
        ModelKind::Fp => {
            let fp = load_teacher(dir)?;
            sample_trajectory(&fp, &sched, batch, seed)?.samples
        }
        ModelKind::Quantized => {
            let q = load_student(dir)?;
            sample_trajectory(&q, &sched, batch, seed)?.samples
        }
    };
    write_csv(
        out,
        &["x", "y"],
        (0..samples.rows()).map(|i| {
            samples
                .row(i)
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
        }),
    )?;
    Ok(mode_coverage(&samples))
}

pub fn stage_eval(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let start = Instant::now();
    let fp = load_teacher(dir)?;
    let q = load_student(dir)?;
    let rows = evaluate(&fp, &q, cfg)?;
    write_csv(
        dir.join("eval_seeds.csv"),
        &["seed", "trajectory_mse", "sqnr_db", "mode_coverage"],
        rows.iter().map(|r| {
            vec![
                r.seed.to_string(),
                r.trajectory_mse.to_string(),
                r.sqnr_db.to_string(),
                r.mode_coverage.to_string(),
            ]
        }),
    )?;
    let sched = build_schedule(cfg)?;
    let fp_traj = sample_trajectory(&fp, &sched, cfg.eval.batch, cfg.eval.base_seed)?;
    let mses: Vec<f64> = rows.iter().map(|r| r.trajectory_mse).collect();
    let sqnrs: Vec<f64> = rows.iter().map(|r| r.sqnr_db).collect();
    let covs: Vec<f64> = rows.iter().map(|r| r.mode_coverage).collect();
    write_fragment(
        dir,
        "eval.toml",
        &EvalFragment {
            median_trajectory_mse: median(&mses),
            median_sqnr_db: median(&sqnrs),
            median_mode_coverage: median(&covs),
            fp_mode_coverage: mode_coverage(&fp_traj.samples),
            seconds: start.elapsed().as_secs_f64(),
        },
    )
}

/// Merge stage fragments into the final report.
pub fn stage_report(cfg: &RunConfig, dir: &Path) -> Result<RunReport> {
    let fp_train: FpTrainFragment = read_fragment(dir, "fp_train.toml")?;
    let allocate: AllocateFragment = read_fragment(dir, "allocate.toml")?;
    let ft: FinetuneFragment = read_fragment(dir, "finetune.toml")?;
    let eval: EvalFragment = read_fragment(dir, "eval.toml")?;
    let calibrate: CalibrateFragment = read_fragment(dir, "calibrate.toml")?;
    let q = load_student(dir)?;

    let group_label = match cfg.quant.group_size {
        crate::config::GroupSize::Auto => "auto".to_string(),
        crate::config::GroupSize::Fixed(k) => k.to_string(),
    };
    let report = RunReport {
        report_version: REPORT_VERSION,
        run: RunSection {
            wa_label: cfg.wa_label(),
            weight_bits: cfg.quant.weight_bits,
            act_bits: cfg.quant.act_bits,
            group_size: group_label,
            plus_fraction: cfg.quant.plus_fraction,
            allocation: allocate.allocation.clone(),
            smooth_steps: cfg.distill.smooth_steps,
            lambda: cfg.distill.lambda,
            alpha: cfg.distill.lambda,
            temperature: cfg.distill.temperature,
            lora_rank: cfg.finetune.lora_rank,
            fp_seed: cfg.fp_train.seed,
            finetune_seed: cfg.finetune.seed,
            eval_seeds: cfg.eval.seeds,
            planted_outliers: cfg.quant.plant_outliers,
        },
        layers: allocate.layers,
        training: TrainingReport {
            fp_steps: fp_train.steps,
            fp_loss_first: fp_train.loss_first,
            fp_loss_last: fp_train.loss_last,
            fp_curve_csv: "train_loss.csv".into(),
            finetune_steps: ft.steps,
            ft_loss_first: ft.loss_first,
            ft_loss_last: ft.loss_last,
            ft_curve_csv: "finetune_loss.csv".into(),
        },
        evaluation: EvalReport {
            rows_csv: "eval_seeds.csv".into(),
            median_trajectory_mse: eval.median_trajectory_mse,
            median_sqnr_db: eval.median_sqnr_db,
            median_mode_coverage: eval.median_mode_coverage,
            fp_mode_coverage: eval.fp_mode_coverage,
        },
        size: size_report(&q, cfg),
        timing: TimingReport {
            train_fp_seconds: fp_train.seconds,
            calibrate_seconds: calibrate.seconds,
            allocate_seconds: allocate.seconds,
            finetune_seconds: ft.seconds,
            eval_seconds: eval.seconds,
        },
    };
    report.save(dir.join(REPORT_FILE))?;
    Ok(report)
}

/// Run every stage in order: the standard full pipeline.
pub fn run_all(cfg: &RunConfig, dir: &Path, mode: AllocationMode) -> Result<RunReport> {
    stage_train_fp(cfg, dir)?;
    stage_calibrate(cfg, dir)?;
    stage_allocate(cfg, dir, mode)?;
    stage_finetune(cfg, dir)?;
    stage_eval(cfg, dir)?;
    stage_report(cfg, dir)
}

/// Report text with timing removed, for determinism comparisons.
pub fn deterministic_report_text(dir: &Path) -> Result<String> {
    let text = std::fs::read_to_string(dir.join(REPORT_FILE))?;
    Ok(strip_timing(&text).to_string())
}

/// Run directory helper used by the CLI.
pub fn resolve_run_dir(base: &Path) -> PathBuf {
    base.to_path_buf()
}
