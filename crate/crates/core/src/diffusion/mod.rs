//! Desk-scale DDPM host used to exercise the quantization pipeline.
//!
//! A two-hidden-layer MLP predicts noise on a 2-D two-Gaussian toy dataset
//! (modes at (±1, 0), σ = 0.05). The forward process uses the closed form
//! `x_t = sqrt(ᾱ_t)·x_0 + sqrt(1 - ᾱ_t)·ε`; the reverse process is the
//! standard posterior-mean step with noise suppressed at t = 1. Everything
//! takes explicit seeds and is bit-reproducible.

mod model;
mod train;

pub use model::{
    denoiser_forward, lora_apply, plant_outliers, DenoiserQuantPlan, ForwardMode, LayerQuant,
    LayerScheme, LinearLayer, LoraAdapter, MlpDenoiser, QuantizedDenoiser,
};
pub use train::{
    finetune_quantized, fp_loss_and_grads, train_fp, Adam, FinetuneOutcome, TrainConfig,
    TrainOutcome,
};

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;
use crate::trd::{FeatureTrace, TraceSource};
use crate::Tensor64;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Data dimension of the toy dataset.
pub const DATA_DIM: usize = 2;
/// Mixture modes of the toy dataset.
pub const DATA_MODES: [[f64; 2]; 2] = [[1.0, 0.0], [-1.0, 0.0]];
/// Per-mode standard deviation.
pub const DATA_SIGMA: f64 = 0.05;

/// Linear-β DDPM noise schedule with cached cumulative products.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Number of diffusion steps T.
    pub fn t_max(&self) -> usize {
        self.beta.len()
    }

    /// β_t for 1-based t.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// α_t = 1 - β_t for 1-based t.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// ᾱ_t (cumulative product) for 1-based t.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    /// ᾱ_{t-1} with the convention ᾱ_0 = 1.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t <= 1 {
            1.0
        } else {
            self.alpha_bar[t - 2]
        }
    }

    /// Posterior variance β̂_t = (1 - ᾱ_{t-1}) / (1 - ᾱ_t) · β_t.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar_prev(t)) / (1.0 - self.alpha_bar(t)) * self.beta(t)
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max() {
            return Err(CoreError::TimestepOutOfRange {
                t,
                max: self.t_max(),
            });
        }
        Ok(())
    }
}

/// Build a schedule with β linearly interpolated from `beta_start` to
/// `beta_end` over `t_max` steps.
pub fn make_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_max == 0 {
        return Err(CoreError::InvalidArgument("schedule needs T >= 1".into()));
    }
    for b in [beta_start, beta_end] {
        if !(0.0 < b && b < 1.0) {
            return Err(CoreError::InvalidArgument(format!(
                "beta must lie in (0, 1), got {b}"
            )));
        }
    }
    let mut beta = Vec::with_capacity(t_max);
    for i in 0..t_max {
        let frac = if t_max == 1 {
            0.0
        } else {
            i as f64 / (t_max - 1) as f64
        };
        beta.push(beta_start + (beta_end - beta_start) * frac);
    }
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_max);
    let mut prod = 1.0;
    for a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    // Strict decrease and positivity follow from beta in (0, 1); check anyway.
    for i in 1..t_max {
        if alpha_bar[i] >= alpha_bar[i - 1] {
            return Err(CoreError::InvalidArgument(
                "alpha_bar must strictly decrease".into(),
            ));
        }
    }
    if *alpha_bar.last().unwrap() <= 0.0 {
        return Err(CoreError::InvalidArgument("alpha_bar_T must stay positive".into()));
    }
    Ok(NoiseSchedule {
        beta,
        alpha,
        alpha_bar,
    })
}

/// Closed-form forward noising `x_t = sqrt(ᾱ_t)·x_0 + sqrt(1 - ᾱ_t)·ε`.
pub fn forward_noise(
    x0: &Tensor64,
    t: usize,
    sched: &NoiseSchedule,
    noise: &Tensor64,
) -> Result<Tensor64> {
    sched.check_t(t)?;
    if x0.shape() != noise.shape() {
        return Err(CoreError::ShapeMismatch(format!(
            "x0 {:?} vs noise {:?}",
            x0.shape(),
            noise.shape()
        )));
    }
    let ab = sched.alpha_bar(t);
    let (ca, cn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(noise.data())
        .map(|(x, e)| ca * x + cn * e)
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// One reverse (denoising) step; `noise` is ignored at t = 1.
pub fn reverse_step(
    x_t: &Tensor64,
    eps_hat: &Tensor64,
    t: usize,
    sched: &NoiseSchedule,
    noise: &Tensor64,
) -> Result<Tensor64> {
    sched.check_t(t)?;
    if x_t.shape() != eps_hat.shape() || x_t.shape() != noise.shape() {
        return Err(CoreError::ShapeMismatch(
            "reverse_step operands disagree on shape".into(),
        ));
    }
    let (a, ab, b) = (sched.alpha(t), sched.alpha_bar(t), sched.beta(t));
    let mean_scale = 1.0 / a.sqrt();
    let eps_scale = b / (1.0 - ab).sqrt();
    let noise_scale = if t > 1 {
        sched.posterior_variance(t).sqrt()
    } else {
        0.0
    };
    let data = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .zip(noise.data())
        .map(|((x, e), n)| mean_scale * (x - eps_scale * e) + noise_scale * n)
        .collect();
    Tensor::new(x_t.shape().to_vec(), data)
}

/// Anything that can predict noise and expose its pre-projection feature map.
pub trait DenoiseModel {
    fn trace_source(&self) -> TraceSource;
    /// Returns `(eps_hat, feature)` for a batch at a single timestep.
    fn predict(&self, x_t: &Tensor64, t: usize) -> Result<(Tensor64, Tensor64)>;
}

/// Full reverse trajectory from seeded Gaussian noise.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// Final denoised batch x_0.
    pub samples: Tensor64,
    /// Pre-projection feature maps, one per reverse step (t = T..1).
    pub trace: FeatureTrace<f64>,
    /// States along the way: `states[0]` is x_T, `states[T]` is x_0.
    pub states: Vec<Tensor64>,
}

fn gaussian_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor64 {
    let data = (0..rows * cols)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Tensor::matrix(rows, cols, data).expect("gaussian draws are finite")
}

/// Run all `T` reverse steps from `x_T ~ N(0, I)`, recording per-step
/// features. Identical seeds give bitwise-identical trajectories.
pub fn sample_trajectory<M: DenoiseModel>(
    model: &M,
    sched: &NoiseSchedule,
    batch: usize,
    seed: u64,
) -> Result<Trajectory> {
    if batch == 0 {
        return Err(CoreError::InvalidArgument("batch must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = gaussian_tensor(&mut rng, batch, DATA_DIM);
    let mut trace = FeatureTrace::new(model.trace_source());
    let mut states = Vec::with_capacity(sched.t_max() + 1);
    states.push(x.clone());
    for t in (1..=sched.t_max()).rev() {
        let (eps, feature) = model.predict(&x, t)?;
        trace.push(t, feature)?;
        let noise = gaussian_tensor(&mut rng, batch, DATA_DIM);
        x = reverse_step(&x, &eps, t, sched, &noise)?;
        states.push(x.clone());
    }
    Ok(Trajectory {
        samples: x,
        trace,
        states,
    })
}

/// Draw the toy dataset: an even two-Gaussian mixture at (±1, 0).
pub fn two_gaussian_dataset(n: usize, seed: u64) -> Tensor64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * DATA_DIM);
    for _ in 0..n {
        let mode = DATA_MODES[rng.gen_range(0..2)];
        for m in mode {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(m + DATA_SIGMA * z);
        }
    }
    Tensor::matrix(n, DATA_DIM, data).expect("dataset draws are finite")
}

/// Sinusoidal timestep embedding of width `dim` (half sine, half cosine).
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for j in 0..half {
        let freq = if half > 1 {
            (-(10_000.0f64).ln() * j as f64 / (half - 1) as f64).exp()
        } else {
            1.0
        };
        let angle = t as f64 * freq;
        out[j] = angle.sin();
        out[half + j] = angle.cos();
    }
    out
}

/// Collect per-layer input activations from a seeded FP trajectory run and
/// subsample them to `samples` rows per layer. Returned tensors are the raw
/// inputs of the three layers in order.
pub fn collect_calibration(
    model: &MlpDenoiser,
    sched: &NoiseSchedule,
    batch: usize,
    samples: usize,
    seed: u64,
) -> Result<[Tensor64; 3]> {
    if batch == 0 || samples == 0 {
        return Err(CoreError::InvalidArgument(
            "batch and samples must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = gaussian_tensor(&mut rng, batch, DATA_DIM);
    let mut pools: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let widths = [
        model.layers[0].c_in(),
        model.layers[1].c_in(),
        model.layers[2].c_in(),
    ];
    for t in (1..=sched.t_max()).rev() {
        let ts = vec![t; batch];
        let cache = model.forward_cached(&x, &ts)?;
        pools[0].extend_from_slice(cache.input.data());
        pools[1].extend_from_slice(cache.h1.data());
        pools[2].extend_from_slice(cache.h2.data());
        let noise = gaussian_tensor(&mut rng, batch, DATA_DIM);
        x = reverse_step(&x, &cache.out, t, sched, &noise)?;
    }
    let rows = sched.t_max() * batch;
    let take = samples.min(rows);
    let mut order: Vec<usize> = (0..rows).collect();
    for i in 0..take {
        let j = rng.gen_range(i..rows);
        order.swap(i, j);
    }
    let mut out = Vec::with_capacity(3);
    for (pool, &w) in pools.iter().zip(&widths) {
        let mut data = Vec::with_capacity(take * w);
        for &r in &order[..take] {
            data.extend_from_slice(&pool[r * w..(r + 1) * w]);
        }
        out.push(Tensor::matrix(take, w, data)?);
    }
    Ok([out.remove(0), out.remove(0), out.remove(0)])
}

/// Mean squared deviation between two trajectories over all post-initial
/// states; the desk-scale proxy for generation fidelity.
pub fn trajectory_mse(a: &Trajectory, b: &Trajectory) -> Result<f64> {
    if a.states.len() != b.states.len() {
        return Err(CoreError::ShapeMismatch(
            "trajectories have different lengths".into(),
        ));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (sa, sb) in a.states.iter().zip(&b.states).skip(1) {
        total += sa.dist_sq(sb)?;
        count += sa.len();
    }
    Ok(total / count as f64)
}

/// Signal-to-quantization-noise ratio in dB between a reference trajectory
/// and a degraded one, over all post-initial states.
pub fn trajectory_sqnr_db(reference: &Trajectory, degraded: &Trajectory) -> Result<f64> {
    let mut signal = 0.0;
    let mut noise = 0.0;
    for (sa, sb) in reference.states.iter().zip(&degraded.states).skip(1) {
        signal += sa.frob_sq();
        noise += sa.dist_sq(sb)?;
    }
    Ok(10.0 * (signal / noise.max(1e-300)).log10())
}

/// Fraction of samples within three per-mode standard deviations of a
/// mixture mode.
pub fn mode_coverage(samples: &Tensor64) -> f64 {
    let threshold = 3.0 * DATA_SIGMA;
    let n = samples.rows();
    let mut hits = 0usize;
    for i in 0..n {
        let p = samples.row(i);
        let near = DATA_MODES.iter().any(|m| {
            let dx = p[0] - m[0];
            let dy = p[1] - m[1];
            (dx * dx + dy * dy).sqrt() <= threshold
        });
        if near {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_single_step() {
        let s = make_schedule(1, 0.1, 0.1).unwrap();
        assert_eq!(s.t_max(), 1);
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn schedule_constant_beta_closed_form() {
        let c = 0.02;
        let s = make_schedule(50, c, c).unwrap();
        for t in 1..=50 {
            assert!((s.alpha_bar(t) - (1.0 - c).powi(t as i32)).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_default_is_monotone() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        for t in 2..=100 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!(s.alpha_bar(100) > 0.0);
    }

    #[test]
    fn schedule_rejects_bad_beta() {
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 1e-4, 1.0).is_err());
        assert!(make_schedule(0, 1e-4, 0.02).is_err());
    }

    #[test]
    fn forward_noise_zero_noise_is_pure_scaling() {
        let s = make_schedule(10, 1e-4, 0.02).unwrap();
        let x0 = Tensor::matrix(2, 2, vec![1.0, -1.0, 0.5, 0.25]).unwrap();
        let zero = Tensor64::zeros(vec![2, 2]);
        let xt = forward_noise(&x0, 5, &s, &zero).unwrap();
        let c = s.alpha_bar(5).sqrt();
        for (a, b) in x0.data().iter().zip(xt.data()) {
            assert!((a * c - b).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_noise_near_identity_for_tiny_beta() {
        let s = make_schedule(3, 1e-9, 1e-9).unwrap();
        let x0 = Tensor::matrix(1, 2, vec![0.7, -0.3]).unwrap();
        let noise = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        let xt = forward_noise(&x0, 3, &s, &noise).unwrap();
        for (a, b) in x0.data().iter().zip(xt.data()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn forward_noise_rejects_bad_t() {
        let s = make_schedule(10, 1e-4, 0.02).unwrap();
        let x0 = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let z = Tensor64::zeros(vec![1, 2]);
        assert!(forward_noise(&x0, 0, &s, &z).is_err());
        assert!(forward_noise(&x0, 11, &s, &z).is_err());
    }

    #[test]
    fn forward_noise_variance_law_monte_carlo() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let t = 60;
        let n = 10_000;
        let x0 = two_gaussian_dataset(n, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let noise = gaussian_tensor(&mut rng, n, DATA_DIM);
        let xt = forward_noise(&x0, t, &s, &noise).unwrap();
        let var = |t: &Tensor64, col: usize| {
            let vals: Vec<f64> = (0..t.rows()).map(|r| t.row(r)[col]).collect();
            let mu = vals.iter().sum::<f64>() / vals.len() as f64;
            vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / vals.len() as f64
        };
        let expected = s.alpha_bar(t) * var(&x0, 0) + (1.0 - s.alpha_bar(t));
        let observed = var(&xt, 0);
        assert!(
            (observed - expected).abs() <= 0.05 * expected,
            "observed {observed}, expected {expected}"
        );
    }

    #[test]
    fn reverse_step_no_noise_at_t1() {
        let s = make_schedule(10, 1e-4, 0.02).unwrap();
        let x = Tensor::matrix(1, 2, vec![0.4, -0.6]).unwrap();
        let eps = Tensor::matrix(1, 2, vec![0.1, 0.2]).unwrap();
        let huge = Tensor::matrix(1, 2, vec![1e6, 1e6]).unwrap();
        let zero = Tensor64::zeros(vec![1, 2]);
        let with_noise = reverse_step(&x, &eps, 1, &s, &huge).unwrap();
        let without = reverse_step(&x, &eps, 1, &s, &zero).unwrap();
        assert_eq!(with_noise.data(), without.data());
    }

    #[test]
    fn reverse_step_pure_rescale_with_zero_eps() {
        let s = make_schedule(10, 1e-4, 0.02).unwrap();
        let x = Tensor::matrix(1, 2, vec![0.8, -0.2]).unwrap();
        let zero = Tensor64::zeros(vec![1, 2]);
        let out = reverse_step(&x, &zero, 4, &s, &zero).unwrap();
        let c = 1.0 / s.alpha(4).sqrt();
        for (a, b) in x.data().iter().zip(out.data()) {
            assert!((a * c - b).abs() < 1e-15);
        }
    }

    #[test]
    fn timestep_embedding_shape_and_range() {
        let e = timestep_embedding(37, 16);
        assert_eq!(e.len(), 16);
        assert!(e.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(timestep_embedding(1, 16), timestep_embedding(2, 16));
    }

    #[test]
    fn dataset_is_seed_deterministic_and_centered_on_modes() {
        let a = two_gaussian_dataset(1000, 5);
        let b = two_gaussian_dataset(1000, 5);
        assert_eq!(a.data(), b.data());
        assert!(mode_coverage(&a) > 0.95);
    }
}
