//! The MLP denoiser, its LoRA adapters, and the simulated-quantization
//! forward/backward passes.
//!
//! Layer weights are stored `(c_in x c_out)` with `y = x·W + b`. In quantized
//! mode a layer computes
//!
//! ```text
//! y = FQ_act(x · diag(δ)) · [ FQ_w(Wᵀ/δ per channel) + (B·A)ᵀ/δ ]ᵀ + b
//! ```
//!
//! i.e. activations are smoothed then fake-quantized per tensor, base weights
//! are smoothed then fake-quantized per output channel at their allocated
//! bit-widths, and the LoRA correction rides beside the quantized base so its
//! gradient stays exact. Quantizer scales train with the learned-step rule
//! (the gradient of the rounding residual); the straight-through estimator
//! passes activation gradients inside the representable range and zeroes
//! them outside.

use crate::error::{CoreError, Result};
use crate::quant::{round_half_away, QuantParams, RangeMode};
use crate::tensor::Tensor;
use crate::trd::TraceSource;
use crate::Tensor64;

use super::{timestep_embedding, DenoiseModel, DATA_DIM};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Floor keeping trained scales positive.
pub const SCALE_FLOOR: f64 = 1e-8;

#[inline]
fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[inline]
fn silu_prime(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// One dense layer, stored `(c_in x c_out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub weight: Tensor64,
    pub bias: Vec<f64>,
}

impl LinearLayer {
    pub fn c_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn c_out(&self) -> usize {
        self.weight.cols()
    }

    fn forward(&self, x: &Tensor64) -> Result<Tensor64> {
        let mut y = x.matmul(&self.weight)?;
        add_bias(&mut y, &self.bias);
        Ok(y)
    }
}

fn add_bias(y: &mut Tensor64, bias: &[f64]) {
    for r in 0..y.rows() {
        for (v, b) in y.row_mut(r).iter_mut().zip(bias) {
            *v += *b;
        }
    }
}

/// Low-rank adapter `B·A` with `B (c_in x r)` and `A (r x c_out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub b: Tensor64,
    pub a: Tensor64,
}

impl LoraAdapter {
    /// Zero-initialized `B`, small Gaussian `A`; the adapter starts as an
    /// exact no-op.
    pub fn init(c_in: usize, c_out: usize, rank: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if rank == 0 || rank > c_in.min(c_out) {
            return Err(CoreError::InvalidArgument(format!(
                "rank {rank} invalid for {c_in}x{c_out}"
            )));
        }
        let a_data = (0..rank * c_out)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                0.01 * z
            })
            .collect();
        Ok(Self {
            b: Tensor64::zeros(vec![c_in, rank]),
            a: Tensor::matrix(rank, c_out, a_data)?,
        })
    }

    pub fn rank(&self) -> usize {
        self.b.cols()
    }

    /// The dense update `B·A`, shape `(c_in x c_out)`.
    pub fn product(&self) -> Result<Tensor64> {
        self.b.matmul(&self.a)
    }
}

/// Effective weight `W + B·A`.
pub fn lora_apply(w: &Tensor64, adapter: &LoraAdapter) -> Result<Tensor64> {
    let ba = adapter.product()?;
    if ba.shape() != w.shape() {
        return Err(CoreError::ShapeMismatch(format!(
            "adapter product {:?} vs weight {:?}",
            ba.shape(),
            w.shape()
        )));
    }
    let data = w
        .data()
        .iter()
        .zip(ba.data())
        .map(|(a, b)| a + b)
        .collect();
    Tensor::new(w.shape().to_vec(), data)
}

/// Minimal value-level quantizer derived from a trained scale, a frozen
/// lower bound, and a bit-width. The zero-point is recomputed from the
/// current scale.
#[derive(Debug, Clone, Copy)]
pub struct StepQuant {
    pub bits: u8,
    pub scale: f64,
    pub zero: f64,
}

impl StepQuant {
    pub fn new(bits: u8, scale: f64, lower: f64) -> Self {
        let code_max = ((1u32 << bits) - 1) as f64;
        let zero = round_half_away(-lower / scale).clamp(0.0, code_max);
        Self { bits, scale, zero }
    }

    #[inline]
    fn code_max(&self) -> f64 {
        ((1u32 << self.bits) - 1) as f64
    }

    #[inline]
    pub fn fq(&self, v: f64) -> f64 {
        let code = (round_half_away(v / self.scale) + self.zero).clamp(0.0, self.code_max());
        (code - self.zero) * self.scale
    }

    /// Straight-through mask: 1 inside the representable range, 0 outside.
    #[inline]
    pub fn ste_mask(&self, v: f64) -> f64 {
        let lo = -self.zero * self.scale;
        let hi = (self.code_max() - self.zero) * self.scale;
        if v >= lo && v <= hi {
            1.0
        } else {
            0.0
        }
    }

    /// Learned-step gradient of `fq(v)` with respect to the scale: the
    /// rounding residual inside the range, the clip level outside.
    #[inline]
    pub fn dfq_dscale(&self, v: f64) -> f64 {
        let pre = round_half_away(v / self.scale) + self.zero;
        if pre < 0.0 {
            -self.zero
        } else if pre > self.code_max() {
            self.code_max() - self.zero
        } else {
            (pre - self.zero) - v / self.scale
        }
    }
}

/// Simulated-quantization state for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerQuant {
    /// Per-input-channel smooth factors (all ones for the final projection).
    pub delta: Vec<f64>,
    /// Per-output-channel bit-widths.
    pub weight_bits: Vec<u8>,
    /// Trained per-output-channel scales.
    pub w_scales: Vec<f64>,
    /// Frozen per-output-channel lower range bounds.
    pub w_lowers: Vec<f64>,
    pub act_bits: u8,
    /// Trained activation scale.
    pub a_scale: f64,
    /// Frozen activation lower range bound.
    pub a_lower: f64,
}

impl LayerQuant {
    pub fn weight_quantizer(&self, channel: usize) -> StepQuant {
        StepQuant::new(
            self.weight_bits[channel],
            self.w_scales[channel],
            self.w_lowers[channel],
        )
    }

    pub fn act_quantizer(&self) -> StepQuant {
        StepQuant::new(self.act_bits, self.a_scale, self.a_lower)
    }
}

/// Two hidden layers plus a final projection, with sinusoidal timestep
/// embedding concatenated to the data input.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpDenoiser {
    pub layers: Vec<LinearLayer>,
    pub emb_dim: usize,
    pub hidden: usize,
    pub t_max: usize,
}

/// Cached intermediates of a full-precision forward pass.
#[derive(Debug, Clone)]
pub struct FpCache {
    pub input: Tensor64,
    pub pre1: Tensor64,
    pub h1: Tensor64,
    pub pre2: Tensor64,
    pub h2: Tensor64,
    pub out: Tensor64,
}

impl MlpDenoiser {
    pub fn new(hidden: usize, emb_dim: usize, t_max: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [
            (DATA_DIM + emb_dim, hidden),
            (hidden, hidden),
            (hidden, DATA_DIM),
        ];
        let layers = dims
            .iter()
            .map(|&(c_in, c_out)| {
                let std = (2.0 / c_in as f64).sqrt();
                let data = (0..c_in * c_out)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        std * z
                    })
                    .collect();
                LinearLayer {
                    weight: Tensor::matrix(c_in, c_out, data).expect("finite init"),
                    bias: vec![0.0; c_out],
                }
            })
            .collect();
        Self {
            layers,
            emb_dim,
            hidden,
            t_max,
        }
    }

    fn check_ts(&self, ts: &[usize]) -> Result<()> {
        for &t in ts {
            if t == 0 || t > self.t_max {
                return Err(CoreError::TimestepOutOfRange { t, max: self.t_max });
            }
        }
        Ok(())
    }

    /// Concatenate the data batch with per-sample timestep embeddings.
    pub fn assemble_input(&self, x: &Tensor64, ts: &[usize]) -> Result<Tensor64> {
        if x.rank() != 2 || x.cols() != DATA_DIM {
            return Err(CoreError::InvalidArgument(format!(
                "expected (batch x {DATA_DIM}) input, got {:?}",
                x.shape()
            )));
        }
        if ts.len() != x.rows() {
            return Err(CoreError::ShapeMismatch(format!(
                "{} timesteps for {} samples",
                ts.len(),
                x.rows()
            )));
        }
        self.check_ts(ts)?;
        let c = DATA_DIM + self.emb_dim;
        let mut data = Vec::with_capacity(x.rows() * c);
        for (i, &t) in ts.iter().enumerate() {
            data.extend_from_slice(x.row(i));
            data.extend_from_slice(&timestep_embedding(t, self.emb_dim));
        }
        Tensor::matrix(x.rows(), c, data)
    }

    /// Full-precision forward pass with cached intermediates.
    pub fn forward_cached(&self, x: &Tensor64, ts: &[usize]) -> Result<FpCache> {
        let input = self.assemble_input(x, ts)?;
        let pre1 = self.layers[0].forward(&input)?;
        let h1 = pre1.map(silu);
        let pre2 = self.layers[1].forward(&h1)?;
        let h2 = pre2.map(silu);
        let out = self.layers[2].forward(&h2)?;
        Ok(FpCache {
            input,
            pre1,
            h1,
            pre2,
            h2,
            out,
        })
    }

    /// Number of trainable values (all weights and biases).
    pub fn param_len(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        out.clear();
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
    }

    pub fn read_params(&mut self, src: &[f64]) -> Result<()> {
        if src.len() != self.param_len() {
            return Err(CoreError::ShapeMismatch(format!(
                "{} parameters expected, got {}",
                self.param_len(),
                src.len()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let wn = l.weight.len();
            let shape = l.weight.shape().to_vec();
            l.weight = Tensor::new(shape, src[off..off + wn].to_vec())?;
            off += wn;
            let bn = l.bias.len();
            l.bias.copy_from_slice(&src[off..off + bn]);
            off += bn;
        }
        Ok(())
    }

    /// Backward pass for the full-precision network; returns flat gradients
    /// in [`Self::write_params`] order.
    pub fn fp_backward(&self, cache: &FpCache, d_out: &Tensor64) -> Result<Vec<f64>> {
        let mut grads = vec![0.0f64; self.param_len()];
        let (dw3_off, db3_off) = self.layer_offset(2);
        let d_h2 = self.dense_backward(&cache.h2, d_out, 2, &mut grads, dw3_off, db3_off)?;
        let d_pre2 = elementwise_mul(&d_h2, &cache.pre2.map(silu_prime))?;
        let (dw2_off, db2_off) = self.layer_offset(1);
        let d_h1 = self.dense_backward(&cache.h1, &d_pre2, 1, &mut grads, dw2_off, db2_off)?;
        let d_pre1 = elementwise_mul(&d_h1, &cache.pre1.map(silu_prime))?;
        let (dw1_off, db1_off) = self.layer_offset(0);
        self.dense_backward(&cache.input, &d_pre1, 0, &mut grads, dw1_off, db1_off)?;
        Ok(grads)
    }

    fn layer_offset(&self, idx: usize) -> (usize, usize) {
        let mut off = 0;
        for l in &self.layers[..idx] {
            off += l.weight.len() + l.bias.len();
        }
        (off, off + self.layers[idx].weight.len())
    }

    fn dense_backward(
        &self,
        x: &Tensor64,
        d_y: &Tensor64,
        idx: usize,
        grads: &mut [f64],
        w_off: usize,
        b_off: usize,
    ) -> Result<Tensor64> {
        let layer = &self.layers[idx];
        // dW = xᵀ · dY
        let dw = x.transposed()?.matmul(d_y)?;
        grads[w_off..w_off + dw.len()].copy_from_slice(dw.data());
        for r in 0..d_y.rows() {
            for (b, v) in grads[b_off..b_off + layer.bias.len()]
                .iter_mut()
                .zip(d_y.row(r))
            {
                *b += *v;
            }
        }
        // dX = dY · Wᵀ
        d_y.matmul(&layer.weight.transposed()?)
    }
}

fn elementwise_mul(a: &Tensor64, b: &Tensor64) -> Result<Tensor64> {
    if a.shape() != b.shape() {
        return Err(CoreError::ShapeMismatch("elementwise shapes differ".into()));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

impl DenoiseModel for MlpDenoiser {
    fn trace_source(&self) -> TraceSource {
        TraceSource::Fp
    }

    fn predict(&self, x_t: &Tensor64, t: usize) -> Result<(Tensor64, Tensor64)> {
        let ts = vec![t; x_t.rows()];
        let cache = self.forward_cached(x_t, &ts)?;
        Ok((cache.out, cache.h2))
    }
}

/// Bit-width and smoothing scheme for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerScheme {
    pub delta: Vec<f64>,
    pub bits: Vec<u8>,
}

/// Quantization plan for the whole denoiser. Hidden layers carry the target
/// low bit-width (possibly mixed per channel); the final projection stays at
/// its conventional 8 bits unless a diagnostic plan overrides it.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserQuantPlan {
    pub hidden: Vec<LayerScheme>,
    pub act_bits: u8,
    pub final_bits: u8,
    pub final_act_bits: u8,
    pub lora_rank: usize,
}

impl DenoiserQuantPlan {
    /// Uniform hidden-layer allocation with no smoothing.
    pub fn uniform(model: &MlpDenoiser, weight_bits: u8, act_bits: u8, lora_rank: usize) -> Self {
        let hidden = model.layers[..2]
            .iter()
            .map(|l| LayerScheme {
                delta: vec![1.0; l.c_in()],
                bits: vec![weight_bits; l.c_out()],
            })
            .collect();
        Self {
            hidden,
            act_bits,
            final_bits: 8,
            final_act_bits: 8,
            lora_rank,
        }
    }
}

/// Frozen base model plus per-layer quantizers and trainable adapters.
#[derive(Debug, Clone)]
pub struct QuantizedDenoiser {
    pub base: MlpDenoiser,
    pub quant: Vec<LayerQuant>,
    pub adapters: Vec<LoraAdapter>,
}

/// Cached intermediates of one quantized layer, kept for backward.
#[derive(Debug, Clone)]
struct QLayerCache {
    x_hat: Tensor64,
    x_q: Tensor64,
    w_hat: Tensor64,
    w_eff: Tensor64,
    y: Tensor64,
}

/// Cached intermediates of a quantized forward pass.
#[derive(Debug, Clone)]
pub struct QCache {
    layers: Vec<QLayerCache>,
    pub out: Tensor64,
    pub feature: Tensor64,
}

/// Gradients of the trainable set, flat in parameter order.
pub type FlatGrads = Vec<f64>;

/// Forward-pass flavor of [`denoiser_forward`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Fp,
    Quantized,
}

impl QuantizedDenoiser {
    /// Fit quantizers against per-layer calibration inputs and attach fresh
    /// adapters. `calib[l]` holds raw (unsmoothed) inputs of layer `l`.
    pub fn build(
        base: MlpDenoiser,
        plan: &DenoiserQuantPlan,
        calib: &[Tensor64],
        seed: u64,
    ) -> Result<Self> {
        if plan.hidden.len() != 2 || calib.len() != 3 {
            return Err(CoreError::InvalidArgument(
                "plan covers 2 hidden layers and 3 calibration batches".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut quant = Vec::with_capacity(3);
        let mut adapters = Vec::with_capacity(3);
        for (idx, layer) in base.layers.iter().enumerate() {
            let (delta, bits, act_bits) = if idx < 2 {
                let scheme = &plan.hidden[idx];
                if scheme.delta.len() != layer.c_in() || scheme.bits.len() != layer.c_out() {
                    return Err(CoreError::ShapeMismatch(format!(
                        "scheme for layer {idx} does not match {}x{}",
                        layer.c_in(),
                        layer.c_out()
                    )));
                }
                (scheme.delta.clone(), scheme.bits.clone(), plan.act_bits)
            } else {
                (
                    vec![1.0; layer.c_in()],
                    vec![plan.final_bits; layer.c_out()],
                    plan.final_act_bits,
                )
            };

            // Per-output-channel ranges of the smoothed, transposed base.
            let w_t = layer.weight.transposed()?;
            let mut w_scales = Vec::with_capacity(layer.c_out());
            let mut w_lowers = Vec::with_capacity(layer.c_out());
            for o in 0..layer.c_out() {
                let row: Vec<f64> = w_t
                    .row(o)
                    .iter()
                    .zip(&delta)
                    .map(|(w, d)| w / d)
                    .collect();
                let (lo, hi) = row
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
                        (l.min(v), h.max(v))
                    });
                // Keep zero representable even for one-sided channels.
                let p = QuantParams::from_range(lo.min(0.0), hi.max(0.0), bits[o])?;
                w_scales.push(p.scale);
                w_lowers.push(p.lower);
            }

            // Activation range from the smoothed calibration batch, extended
            // to keep zero representable.
            let x = &calib[idx];
            if x.cols() != layer.c_in() {
                return Err(CoreError::ShapeMismatch(format!(
                    "calibration for layer {idx} has {} channels, expected {}",
                    x.cols(),
                    layer.c_in()
                )));
            }
            let mut smoothed = x.clone();
            for r in 0..smoothed.rows() {
                for (v, d) in smoothed.row_mut(r).iter_mut().zip(&delta) {
                    *v *= *d;
                }
            }
            let p = crate::quant::compute_quant_params(
                &smoothed,
                act_bits,
                RangeMode::Percentile(99.9),
            )?;
            let a = QuantParams::from_range(p.lower.min(0.0), p.upper.max(0.0), act_bits)?;

            quant.push(LayerQuant {
                delta,
                weight_bits: bits,
                w_scales,
                w_lowers,
                act_bits,
                a_scale: a.scale,
                a_lower: a.lower,
            });
            // Narrow layers cap the rank at min(c_in, c_out).
            let rank = plan.lora_rank.min(layer.c_in()).min(layer.c_out()).max(1);
            adapters.push(LoraAdapter::init(layer.c_in(), layer.c_out(), rank, &mut rng)?);
        }
        Ok(Self {
            base,
            quant,
            adapters,
        })
    }

    /// Quantized base weight plus adapter, in output-major `(c_out x c_in)`
    /// orientation, together with the smoothed base for scale gradients.
    fn effective_weight(&self, idx: usize) -> Result<(Tensor64, Tensor64)> {
        let layer = &self.base.layers[idx];
        let lq = &self.quant[idx];
        let w_t = layer.weight.transposed()?;
        let (c_out, c_in) = (w_t.rows(), w_t.cols());
        let mut w_hat = vec![0.0f64; c_out * c_in];
        let mut w_eff = vec![0.0f64; c_out * c_in];
        let lora = self.adapters[idx].product()?; // (c_in x c_out)
        for o in 0..c_out {
            let q = lq.weight_quantizer(o);
            for i in 0..c_in {
                let smoothed = w_t.data()[o * c_in + i] / lq.delta[i];
                w_hat[o * c_in + i] = smoothed;
                let adapter = lora.data()[i * c_out + o] / lq.delta[i];
                w_eff[o * c_in + i] = q.fq(smoothed) + adapter;
            }
        }
        Ok((
            Tensor::matrix(c_out, c_in, w_hat)?,
            Tensor::matrix(c_out, c_in, w_eff)?,
        ))
    }

    fn q_layer_forward(&self, idx: usize, x: &Tensor64) -> Result<QLayerCache> {
        let lq = &self.quant[idx];
        let aq = lq.act_quantizer();
        let mut x_hat = x.clone();
        for r in 0..x_hat.rows() {
            for (v, d) in x_hat.row_mut(r).iter_mut().zip(&lq.delta) {
                *v *= *d;
            }
        }
        let x_q = x_hat.map(|v| aq.fq(v));
        let (w_hat, w_eff) = self.effective_weight(idx)?;
        let mut y = x_q.matmul_nt(&w_eff)?;
        add_bias(&mut y, &self.base.layers[idx].bias);
        Ok(QLayerCache {
            x_hat,
            x_q,
            w_hat,
            w_eff,
            y,
        })
    }

    /// Quantized forward pass with cached intermediates.
    pub fn forward_quantized(&self, x: &Tensor64, ts: &[usize]) -> Result<QCache> {
        let input = self.base.assemble_input(x, ts)?;
        let l0 = self.q_layer_forward(0, &input)?;
        let h1 = l0.y.map(silu);
        let l1 = self.q_layer_forward(1, &h1)?;
        let h2 = l1.y.map(silu);
        let l2 = self.q_layer_forward(2, &h2)?;
        let out = l2.y.clone();
        let layers = vec![l0, l1, l2];
        Ok(QCache {
            layers,
            out,
            feature: h2,
        })
    }

    /// Full-precision forward of the effective weights `W + B·A`.
    pub fn forward_fp_effective(&self, x: &Tensor64, ts: &[usize]) -> Result<(Tensor64, Tensor64)> {
        let mut model = self.base.clone();
        for (idx, layer) in model.layers.iter_mut().enumerate() {
            layer.weight = lora_apply(&layer.weight, &self.adapters[idx])?;
        }
        let cache = model.forward_cached(x, ts)?;
        Ok((cache.out, cache.h2))
    }

    /// Trainable set: per layer `B`, `A`, per-channel weight scales, and the
    /// activation scale.
    pub fn param_len(&self) -> usize {
        (0..3)
            .map(|i| {
                self.adapters[i].b.len()
                    + self.adapters[i].a.len()
                    + self.quant[i].w_scales.len()
                    + 1
            })
            .sum()
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        out.clear();
        for i in 0..3 {
            out.extend_from_slice(self.adapters[i].b.data());
            out.extend_from_slice(self.adapters[i].a.data());
            out.extend_from_slice(&self.quant[i].w_scales);
            out.push(self.quant[i].a_scale);
        }
    }

    /// Per-parameter learning-rate multipliers: 1 for adapters,
    /// `scale_mult` for quantizer scales.
    pub fn param_lr_scales(&self, scale_mult: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_len());
        for i in 0..3 {
            out.extend(std::iter::repeat(1.0).take(self.adapters[i].b.len()));
            out.extend(std::iter::repeat(1.0).take(self.adapters[i].a.len()));
            out.extend(std::iter::repeat(scale_mult).take(self.quant[i].w_scales.len() + 1));
        }
        out
    }

    /// Load trainable parameters; scales are floored at [`SCALE_FLOOR`].
    pub fn read_params(&mut self, src: &[f64]) -> Result<()> {
        if src.len() != self.param_len() {
            return Err(CoreError::ShapeMismatch(format!(
                "{} parameters expected, got {}",
                self.param_len(),
                src.len()
            )));
        }
        let mut off = 0;
        for i in 0..3 {
            let bn = self.adapters[i].b.len();
            let b_shape = self.adapters[i].b.shape().to_vec();
            self.adapters[i].b = Tensor::new(b_shape, src[off..off + bn].to_vec())?;
            off += bn;
            let an = self.adapters[i].a.len();
            let a_shape = self.adapters[i].a.shape().to_vec();
            self.adapters[i].a = Tensor::new(a_shape, src[off..off + an].to_vec())?;
            off += an;
            for s in self.quant[i].w_scales.iter_mut() {
                *s = src[off].max(SCALE_FLOOR);
                off += 1;
            }
            self.quant[i].a_scale = src[off].max(SCALE_FLOOR);
            off += 1;
        }
        Ok(())
    }

    fn q_layer_backward(
        &self,
        idx: usize,
        cache: &QLayerCache,
        d_y: &Tensor64,
        grads: &mut [f64],
        offset: usize,
    ) -> Result<Tensor64> {
        let lq = &self.quant[idx];
        let adapter = &self.adapters[idx];
        let (c_out, c_in) = (cache.w_eff.rows(), cache.w_eff.cols());
        let aq = lq.act_quantizer();

        // dW_total[o, i] = sum_s dY[s, o] * x_q[s, i]
        let dw_total = d_y.transposed()?.matmul(&cache.x_q)?;

        // Adapter gradients through the transpose and smoothing division.
        let mut dl_plain = vec![0.0f64; c_in * c_out];
        for o in 0..c_out {
            for i in 0..c_in {
                dl_plain[i * c_out + o] = dw_total.data()[o * c_in + i] / lq.delta[i];
            }
        }
        let dl_plain = Tensor::matrix(c_in, c_out, dl_plain)?;
        let d_b = dl_plain.matmul(&adapter.a.transposed()?)?;
        let d_a = adapter.b.transposed()?.matmul(&dl_plain)?;

        let bn = adapter.b.len();
        let an = adapter.a.len();
        let mut off = offset;
        for (g, v) in grads[off..off + bn].iter_mut().zip(d_b.data()) {
            *g += *v;
        }
        off += bn;
        for (g, v) in grads[off..off + an].iter_mut().zip(d_a.data()) {
            *g += *v;
        }
        off += an;

        // Weight-scale gradients: learned-step rule on the smoothed base.
        for o in 0..c_out {
            let q = lq.weight_quantizer(o);
            let mut g = 0.0;
            for i in 0..c_in {
                g += dw_total.data()[o * c_in + i] * q.dfq_dscale(cache.w_hat.data()[o * c_in + i]);
            }
            grads[off + o] += g;
        }
        off += c_out;

        // Activation path.
        let d_xq = d_y.matmul(&cache.w_eff)?;
        let mut d_ascale = 0.0;
        let mut d_x = vec![0.0f64; d_xq.len()];
        for r in 0..d_xq.rows() {
            for i in 0..c_in {
                let v = cache.x_hat.data()[r * c_in + i];
                let g = d_xq.data()[r * c_in + i];
                d_ascale += g * aq.dfq_dscale(v);
                d_x[r * c_in + i] = g * aq.ste_mask(v) * lq.delta[i];
            }
        }
        grads[off] += d_ascale;

        Tensor::matrix(d_xq.rows(), c_in, d_x)
    }

    fn layer_param_offset(&self, idx: usize) -> usize {
        (0..idx)
            .map(|i| {
                self.adapters[i].b.len()
                    + self.adapters[i].a.len()
                    + self.quant[i].w_scales.len()
                    + 1
            })
            .sum()
    }

    /// Backward pass through the quantized network. `d_out` is the loss
    /// gradient at the output; `d_feature` is an optional extra gradient
    /// injected at the pre-projection feature map.
    pub fn backward_quantized(
        &self,
        cache: &QCache,
        d_out: &Tensor64,
        d_feature: Option<&Tensor64>,
        grads: &mut FlatGrads,
    ) -> Result<()> {
        if grads.len() != self.param_len() {
            return Err(CoreError::ShapeMismatch("gradient buffer size".into()));
        }
        let off2 = self.layer_param_offset(2);
        let mut d_h2 = self.q_layer_backward(2, &cache.layers[2], d_out, grads, off2)?;
        if let Some(extra) = d_feature {
            if extra.shape() != d_h2.shape() {
                return Err(CoreError::ShapeMismatch(
                    "feature gradient shape".into(),
                ));
            }
            let data: Vec<f64> = d_h2
                .data()
                .iter()
                .zip(extra.data())
                .map(|(a, b)| a + b)
                .collect();
            d_h2 = Tensor::new(d_h2.shape().to_vec(), data)?;
        }
        let d_pre2 = elementwise_mul(&d_h2, &cache.layers[1].y.map(silu_prime))?;
        let off1 = self.layer_param_offset(1);
        let d_h1 = self.q_layer_backward(1, &cache.layers[1], &d_pre2, grads, off1)?;
        let d_pre1 = elementwise_mul(&d_h1, &cache.layers[0].y.map(silu_prime))?;
        let off0 = self.layer_param_offset(0);
        self.q_layer_backward(0, &cache.layers[0], &d_pre1, grads, off0)?;
        Ok(())
    }

    /// Quantized-model payload description used by size accounting: per
    /// layer, the per-channel bit-widths and the channel weight count.
    pub fn payload_layout(&self) -> Vec<(Vec<u8>, usize)> {
        (0..3)
            .map(|i| {
                (
                    self.quant[i].weight_bits.clone(),
                    self.base.layers[i].c_in(),
                )
            })
            .collect()
    }
}

impl DenoiseModel for QuantizedDenoiser {
    fn trace_source(&self) -> TraceSource {
        TraceSource::Quantized
    }

    fn predict(&self, x_t: &Tensor64, t: usize) -> Result<(Tensor64, Tensor64)> {
        let ts = vec![t; x_t.rows()];
        let cache = self.forward_quantized(x_t, &ts)?;
        Ok((cache.out, cache.feature))
    }
}

/// Run one model in the requested mode, returning the predicted noise and
/// the pre-projection feature map.
pub fn denoiser_forward(
    model: &QuantizedDenoiser,
    x_t: &Tensor64,
    t: usize,
    mode: ForwardMode,
) -> Result<(Tensor64, Tensor64)> {
    let ts = vec![t; x_t.rows()];
    match mode {
        ForwardMode::Fp => model.forward_fp_effective(x_t, &ts),
        ForwardMode::Quantized => {
            let cache = model.forward_quantized(x_t, &ts)?;
            Ok((cache.out, cache.feature))
        }
    }
}

/// Plant ±`magnitude_sigmas`·σ outlier pairs into a fraction of each hidden
/// layer's output channels, emulating outlier-salient weight distributions.
pub fn plant_outliers(
    model: &mut MlpDenoiser,
    fraction: f64,
    magnitude_sigmas: f64,
    seed: u64,
) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut planted = Vec::new();
    for layer in model.layers[..2].iter_mut() {
        let (c_in, c_out) = (layer.c_in(), layer.c_out());
        let count = ((fraction * c_out as f64).ceil() as usize).clamp(1, c_out);
        let mut channels: Vec<usize> = (0..c_out).collect();
        for i in 0..count {
            let j = rng.gen_range(i..c_out);
            channels.swap(i, j);
        }
        let chosen: Vec<usize> = channels[..count].to_vec();
        for &col in &chosen {
            let values: Vec<f64> = (0..c_in).map(|r| layer.weight.data()[r * c_out + col]).collect();
            let mean = values.iter().sum::<f64>() / c_in as f64;
            let sigma = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / c_in as f64)
                .sqrt()
                .max(1e-6);
            let hi = rng.gen_range(0..c_in);
            let mut lo = rng.gen_range(0..c_in);
            while lo == hi {
                lo = rng.gen_range(0..c_in);
            }
            let data = layer.weight.data_mut();
            data[hi * c_out + col] = magnitude_sigmas * sigma;
            data[lo * c_out + col] = -magnitude_sigmas * sigma;
        }
        planted.push(chosen);
    }
    planted
}
