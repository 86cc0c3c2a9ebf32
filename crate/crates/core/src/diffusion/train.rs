//! Noise-prediction training for the FP teacher and LoRA/scale fine-tuning
//! for the quantized student.
//!
//! Fine-tuning follows the distillation objective: the student consumes
//! states from teacher-generated trajectories, matches the teacher's output
//! (task term) and the relation structure of time-smoothed features (KL
//! term). Only adapters and quantizer scales receive updates; base weights
//! and biases stay frozen.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;
use crate::trd::{
    relation_kl_grad, relation_kl_loss, similarity_distributions, task_loss, task_loss_grad,
    total_loss, DistillConfig,
};
use crate::Tensor64;

use super::model::{MlpDenoiser, QuantizedDenoiser};
use super::{sample_trajectory, DenoiseModel, NoiseSchedule, DATA_DIM};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Learning-rate multiplier applied to quantizer scales during fine-tuning.
pub const SCALE_LR_MULT: f64 = 0.1;

/// Step counts, batch sizes, learning rate, seeds and bit-widths for one
/// training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub weight_bits: u8,
    pub act_bits: u8,
    pub distill: DistillConfig,
    pub lora_rank: usize,
    /// Sanity bound the FP training loss must end below.
    pub loss_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 64,
            lr: 1e-3,
            seed: 0,
            weight_bits: 2,
            act_bits: 4,
            distill: DistillConfig::default(),
            lora_rank: 4,
            loss_threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(CoreError::InvalidArgument(
                "steps and batch must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(CoreError::InvalidArgument("lr must be positive".into()));
        }
        if self.lora_rank == 0 {
            return Err(CoreError::InvalidArgument("lora rank must be >= 1".into()));
        }
        self.distill.validate()
    }
}

/// Plain Adam over a flat parameter vector, with optional per-parameter
/// learning-rate multipliers.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    lr_scale: Option<Vec<f64>>,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_scale: None,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// Per-parameter learning-rate multipliers (quantizer scales train
    /// slower than adapters).
    pub fn with_lr_scale(len: usize, lr: f64, lr_scale: Vec<f64>) -> Self {
        let mut adam = Self::new(len, lr);
        adam.lr_scale = Some(lr_scale);
        adam
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            let lr = match &self.lr_scale {
                Some(s) => self.lr * s[i],
                None => self.lr,
            };
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Noise-prediction loss and flat parameter gradients at a fixed
/// `(x_t, t, target)` triple.
pub fn fp_loss_and_grads(
    model: &MlpDenoiser,
    x_t: &Tensor64,
    ts: &[usize],
    target: &Tensor64,
) -> Result<(f64, Vec<f64>)> {
    let cache = model.forward_cached(x_t, ts)?;
    let loss = task_loss(target, &cache.out)?;
    let d_out = task_loss_grad(target, &cache.out)?;
    let grads = model.fp_backward(&cache, &d_out)?;
    Ok((loss, grads))
}

/// A trained model plus its loss curve.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpDenoiser,
    pub loss_curve: Vec<f64>,
}

/// Train the FP teacher with standard noise-prediction MSE.
pub fn train_fp(
    mut model: MlpDenoiser,
    dataset: &Tensor64,
    sched: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.rank() != 2 || dataset.cols() != DATA_DIM {
        return Err(CoreError::InvalidArgument(format!(
            "dataset must be (n x {DATA_DIM}), got {:?}",
            dataset.shape()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = dataset.rows();
    let mut params = Vec::new();
    model.write_params(&mut params);
    let mut adam = Adam::new(params.len(), config.lr);
    let mut curve = Vec::with_capacity(config.steps);

    for _ in 0..config.steps {
        let mut x_t = Vec::with_capacity(config.batch * DATA_DIM);
        let mut target = Vec::with_capacity(config.batch * DATA_DIM);
        let mut ts = Vec::with_capacity(config.batch);
        for _ in 0..config.batch {
            let idx = rng.gen_range(0..n);
            let t = rng.gen_range(1..=sched.t_max());
            let ab = sched.alpha_bar(t);
            let (ca, cn) = (ab.sqrt(), (1.0 - ab).sqrt());
            for d in 0..DATA_DIM {
                let eps: f64 = StandardNormal.sample(&mut rng);
                x_t.push(ca * dataset.row(idx)[d] + cn * eps);
                target.push(eps);
            }
            ts.push(t);
        }
        let x_t = Tensor::matrix(config.batch, DATA_DIM, x_t)?;
        let target = Tensor::matrix(config.batch, DATA_DIM, target)?;
        let (loss, grads) = fp_loss_and_grads(&model, &x_t, &ts, &target)?;
        adam.step(&mut params, &grads);
        model.read_params(&params)?;
        curve.push(loss);
    }
    Ok(TrainOutcome {
        model,
        loss_curve: curve,
    })
}

/// A fine-tuned student plus its loss curves.
#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: QuantizedDenoiser,
    pub loss_curve: Vec<f64>,
    pub task_curve: Vec<f64>,
    pub dis_curve: Vec<f64>,
}

/// Fine-tune adapters and quantizer scales on teacher-generated
/// trajectories, minimizing `task + lambda * dis` with straight-through
/// quantizer gradients. Aborts if the loss exceeds ten times its initial
/// value.
pub fn finetune_quantized(
    fp: &MlpDenoiser,
    mut q: QuantizedDenoiser,
    sched: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<FinetuneOutcome> {
    config.validate()?;
    let n_smooth = config.distill.smooth_steps;
    let t_max = sched.t_max();
    if n_smooth + 1 > t_max {
        return Err(CoreError::InvalidArgument(format!(
            "smoothing window {} exceeds schedule length {t_max}",
            n_smooth + 1
        )));
    }
    let lambda = config.distill.lambda;
    let temperature = config.distill.temperature;

    // Teacher trajectory pool; states[T - t] is the state entering step t.
    let pool = sample_trajectory(fp, sched, config.batch, config.seed ^ 0x7261_6a65)?;
    let state_at = |t: usize| &pool.states[t_max - t];

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = Vec::new();
    q.write_params(&mut params);
    let lr_scales = q.param_lr_scales(SCALE_LR_MULT);
    let mut adam = Adam::with_lr_scale(params.len(), config.lr, lr_scales);
    let mut curve = Vec::with_capacity(config.steps);
    let mut task_curve = Vec::with_capacity(config.steps);
    let mut dis_curve = Vec::with_capacity(config.steps);
    let mut initial = None;

    for _ in 0..config.steps {
        let t0 = rng.gen_range(n_smooth + 1..=t_max);
        let window: Vec<usize> = (0..=n_smooth).map(|back| t0 - back).collect();

        let mut grads = vec![0.0f64; params.len()];
        let mut task_acc = 0.0;
        let mut caches = Vec::with_capacity(window.len());
        let mut feat_f_sum: Option<Tensor64> = None;
        let mut feat_q_sum: Option<Tensor64> = None;

        for &t in &window {
            let x = state_at(t);
            let (eps_f, feat_f) = fp.predict(x, t)?;
            let ts = vec![t; x.rows()];
            let qcache = q.forward_quantized(x, &ts)?;
            task_acc += task_loss(&eps_f, &qcache.out)?;
            let scale = 1.0 / window.len() as f64;
            let d_out = task_loss_grad(&eps_f, &qcache.out)?.map(|g| g * scale);
            feat_f_sum = Some(accumulate(feat_f_sum, &feat_f)?);
            feat_q_sum = Some(accumulate(feat_q_sum, &qcache.feature)?);
            caches.push((qcache, d_out));
        }
        let task = task_acc / window.len() as f64;

        let (dis, d_feature) = if lambda > 0.0 {
            let f_f = feat_f_sum.as_ref().unwrap();
            let f_q = feat_q_sum.as_ref().unwrap();
            let dis = relation_kl_loss(
                &similarity_distributions(f_f, temperature)?,
                &similarity_distributions(f_q, temperature)?,
            )?;
            let grad = relation_kl_grad(f_f, f_q, temperature)?.map(|g| g * lambda);
            (dis, Some(grad))
        } else {
            (0.0, None)
        };

        let loss = total_loss(task, dis, lambda);
        let first = *initial.get_or_insert(loss);
        if loss > 10.0 * first && loss > 1e-12 {
            return Err(CoreError::Diverged {
                loss,
                initial: first,
            });
        }

        for (qcache, d_out) in &caches {
            q.backward_quantized(qcache, d_out, d_feature.as_ref(), &mut grads)?;
        }
        adam.step(&mut params, &grads);
        q.read_params(&params)?;

        curve.push(loss);
        task_curve.push(task);
        dis_curve.push(dis);
    }
    Ok(FinetuneOutcome {
        model: q,
        loss_curve: curve,
        task_curve,
        dis_curve,
    })
}

fn accumulate(acc: Option<Tensor64>, add: &Tensor64) -> Result<Tensor64> {
    match acc {
        None => Ok(add.clone()),
        Some(prev) => {
            if prev.shape() != add.shape() {
                return Err(CoreError::ShapeMismatch("feature accumulation".into()));
            }
            let data = prev
                .data()
                .iter()
                .zip(add.data())
                .map(|(a, b)| a + b)
                .collect();
            Tensor::new(prev.shape().to_vec(), data)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, two_gaussian_dataset, MlpDenoiser};

    #[test]
    fn adam_descends_a_quadratic() {
        let mut params = vec![5.0, -3.0];
        let mut adam = Adam::new(2, 0.1);
        for _ in 0..500 {
            let grads: Vec<f64> = params.iter().map(|p| 2.0 * p).collect();
            adam.step(&mut params, &grads);
        }
        assert!(params.iter().all(|p| p.abs() < 1e-2), "{params:?}");
    }

    #[test]
    fn fp_gradients_match_finite_differences() {
        let model = MlpDenoiser::new(8, 4, 10, 31);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let batch = 3;
        let x_t = Tensor::matrix(
            batch,
            DATA_DIM,
            (0..batch * DATA_DIM).map(|_| rng.gen_range(-1.5..1.5)).collect(),
        )
        .unwrap();
        let ts: Vec<usize> = (0..batch).map(|_| rng.gen_range(1..=10)).collect();
        let target = Tensor::matrix(
            batch,
            DATA_DIM,
            (0..batch * DATA_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let (_, grads) = fp_loss_and_grads(&model, &x_t, &ts, &target).unwrap();

        let mut params = Vec::new();
        model.write_params(&mut params);
        let h = 1e-5;
        for idx in 0..params.len() {
            let mut probe = model.clone();
            let mut p = params.clone();
            p[idx] += h;
            probe.read_params(&p).unwrap();
            let (lp, _) = fp_loss_and_grads(&probe, &x_t, &ts, &target).unwrap();
            p[idx] -= 2.0 * h;
            probe.read_params(&p).unwrap();
            let (lm, _) = fp_loss_and_grads(&probe, &x_t, &ts, &target).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let g = grads[idx];
            assert!(
                (g - fd).abs() <= 1e-4 * fd.abs().max(g.abs()).max(1e-6),
                "param {idx}: analytic {g} vs fd {fd}"
            );
        }
    }

    #[test]
    fn train_fp_reduces_loss_and_is_deterministic() {
        let sched = make_schedule(50, 1e-4, 0.02).unwrap();
        let data = two_gaussian_dataset(2000, 41);
        let config = TrainConfig {
            steps: 300,
            batch: 32,
            lr: 2e-3,
            seed: 42,
            ..TrainConfig::default()
        };
        let run = |seed: u64| {
            let model = MlpDenoiser::new(16, 8, 50, seed);
            train_fp(model, &data, &sched, &config).unwrap()
        };
        let a = run(7);
        let head: f64 = a.loss_curve[..30].iter().sum::<f64>() / 30.0;
        let tail: f64 = a.loss_curve[270..].iter().sum::<f64>() / 30.0;
        assert!(tail < head, "loss did not decrease: {head} -> {tail}");

        let b = run(7);
        let mut pa = Vec::new();
        let mut pb = Vec::new();
        a.model.write_params(&mut pa);
        b.model.write_params(&mut pb);
        assert_eq!(pa, pb);
    }
}
