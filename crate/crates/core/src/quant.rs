//! Uniform affine quantization.
//!
//! A tensor is mapped to integer codes via `clip(round(x/s) + z, 0, 2^N - 1)`
//! with `s = (u - l) / (2^N - 1)` and `z = -round(l/s)`, and restored with
//! `(code - z) * s`. Rounding is round-half-away-from-zero everywhere; this
//! module is the single source of truth for that rule.
//!
//! Parameters are always carried in `f64`; only bulk tensor storage is
//! generic over [`Scalar`].

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ranges narrower than this are treated as degenerate.
pub const RANGE_EPSILON: f64 = 1e-12;
/// Width assigned to a degenerate range before deriving the scale.
pub const RANGE_WIDENING: f64 = 1e-6;

/// Round half away from zero; the tie rule used for codes and zero-points.
#[inline]
pub fn round_half_away(v: f64) -> f64 {
    v.round()
}

/// How the calibration range is chosen from data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RangeMode {
    /// Exact minimum/maximum. Default for weights.
    MinMax,
    /// Two-sided percentile clipping, e.g. `Percentile(99.9)` keeps the
    /// [0.1%, 99.9%] quantile range. Default for activations.
    Percentile(f64),
}

/// Affine quantizer parameters for one group (a tensor or one channel).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    /// Bit-width N, in [1, 16].
    pub bits: u8,
    /// Positive step size s.
    pub scale: f64,
    /// Zero-point z in [0, 2^N - 1].
    pub zero_point: u32,
    /// Lower range bound l.
    pub lower: f64,
    /// Upper range bound u.
    pub upper: f64,
}

impl QuantParams {
    /// Largest code value `2^N - 1`.
    pub fn code_max(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    /// Derive parameters from an explicit range. The range is widened to
    /// [`RANGE_WIDENING`] if degenerate; the zero-point is clamped into
    /// `[0, 2^N - 1]` when the range does not contain zero.
    pub fn from_range(lower: f64, upper: f64, bits: u8) -> Result<Self> {
        if !(1..=16).contains(&bits) {
            return Err(CoreError::InvalidArgument(format!(
                "bits must be in [1, 16], got {bits}"
            )));
        }
        if !lower.is_finite() || !upper.is_finite() {
            return Err(CoreError::NonFinite);
        }
        if upper < lower {
            return Err(CoreError::InvalidArgument(format!(
                "upper {upper} below lower {lower}"
            )));
        }
        let mut upper = upper;
        if upper - lower < RANGE_EPSILON {
            upper = lower + RANGE_WIDENING;
        }
        let code_max = (1u32 << bits) - 1;
        let scale = (upper - lower) / code_max as f64;
        let zero_point = round_half_away(-lower / scale).clamp(0.0, code_max as f64) as u32;
        Ok(Self {
            bits,
            scale,
            zero_point,
            lower,
            upper,
        })
    }

    /// Check the type invariants.
    pub fn validate(&self) -> Result<()> {
        if !(1..=16).contains(&self.bits) {
            return Err(CoreError::InvalidArgument("bits out of [1, 16]".into()));
        }
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(CoreError::InvalidArgument("scale must be positive".into()));
        }
        if self.zero_point > self.code_max() {
            return Err(CoreError::InvalidArgument("zero-point out of range".into()));
        }
        if !(self.upper > self.lower) {
            return Err(CoreError::InvalidArgument("upper must exceed lower".into()));
        }
        let implied = (self.upper - self.lower) / self.code_max() as f64;
        if (implied - self.scale).abs() > 1e-12 * implied.abs().max(f64::MIN_POSITIVE) {
            return Err(CoreError::InvalidArgument(
                "scale inconsistent with range".into(),
            ));
        }
        Ok(())
    }

    /// Quantize one value to a code.
    #[inline]
    pub fn code_of(&self, v: f64) -> u16 {
        let q = round_half_away(v / self.scale) + self.zero_point as f64;
        q.clamp(0.0, self.code_max() as f64) as u16
    }

    /// Dequantize one code.
    #[inline]
    pub fn value_of(&self, code: u16) -> f64 {
        (code as f64 - self.zero_point as f64) * self.scale
    }

    /// Quantize-dequantize one value.
    #[inline]
    pub fn fake_quant_value(&self, v: f64) -> f64 {
        self.value_of(self.code_of(v))
    }

    /// Smallest and largest representable values under these parameters.
    pub fn representable_range(&self) -> (f64, f64) {
        (
            self.value_of(0),
            (self.code_max() as f64 - self.zero_point as f64) * self.scale,
        )
    }
}

/// Per-tensor or per-channel parameter attachment.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamSet {
    PerTensor(QuantParams),
    PerChannel { axis: usize, params: Vec<QuantParams> },
}

/// Integer codes plus the parameters needed to restore them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    codes: Vec<u16>,
    params: ParamSet,
}

impl QuantizedTensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn codes(&self) -> &[u16] {
        &self.codes
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Restore to floating point: `(code - z) * s` elementwise.
    pub fn dequantize<F: Scalar>(&self) -> Tensor<F> {
        let mut data = vec![F::zero(); self.codes.len()];
        match &self.params {
            ParamSet::PerTensor(p) => {
                for (o, &c) in data.iter_mut().zip(&self.codes) {
                    *o = F::from_f64_lossy(p.value_of(c));
                }
            }
            ParamSet::PerChannel { axis, params } => {
                let holder = Tensor::<F>::zeros(self.shape.clone());
                for (i, p) in params.iter().enumerate() {
                    holder
                        .for_each_channel_offset(*axis, i, |off| {
                            data[off] = F::from_f64_lossy(p.value_of(self.codes[off]));
                        })
                        .expect("channel layout validated at construction");
                }
            }
        }
        Tensor::new(self.shape.clone(), data).expect("codes dequantize to finite values")
    }
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Choose the calibration range of `values` under `mode`.
fn data_range<F: Scalar>(values: &[F], mode: RangeMode) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(CoreError::EmptyInput);
    }
    match mode {
        RangeMode::MinMax => {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for v in values {
                let x = v.to_f64_lossy();
                if !x.is_finite() {
                    return Err(CoreError::NonFinite);
                }
                lo = lo.min(x);
                hi = hi.max(x);
            }
            Ok((lo, hi))
        }
        RangeMode::Percentile(p) => {
            if !(50.0 < p && p <= 100.0) {
                return Err(CoreError::InvalidArgument(format!(
                    "percentile must be in (50, 100], got {p}"
                )));
            }
            let mut sorted: Vec<f64> = values.iter().map(|v| v.to_f64_lossy()).collect();
            if sorted.iter().any(|v| !v.is_finite()) {
                return Err(CoreError::NonFinite);
            }
            sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
            let hi_q = p / 100.0;
            Ok((
                quantile_sorted(&sorted, 1.0 - hi_q),
                quantile_sorted(&sorted, hi_q),
            ))
        }
    }
}

/// Fit quantizer parameters to a tensor.
pub fn compute_quant_params<F: Scalar>(
    x: &Tensor<F>,
    bits: u8,
    mode: RangeMode,
) -> Result<QuantParams> {
    let (lo, hi) = data_range(x.data(), mode)?;
    QuantParams::from_range(lo, hi, bits)
}

/// Fit parameters for a raw slice (used for per-channel fitting).
pub fn compute_quant_params_slice<F: Scalar>(
    values: &[F],
    bits: u8,
    mode: RangeMode,
) -> Result<QuantParams> {
    let (lo, hi) = data_range(values, mode)?;
    QuantParams::from_range(lo, hi, bits)
}

/// Map a tensor to integer codes under fixed parameters.
pub fn quantize<F: Scalar>(x: &Tensor<F>, params: &QuantParams) -> Result<QuantizedTensor> {
    params.validate()?;
    let codes = x
        .data()
        .iter()
        .map(|v| params.code_of(v.to_f64_lossy()))
        .collect();
    Ok(QuantizedTensor {
        shape: x.shape().to_vec(),
        codes,
        params: ParamSet::PerTensor(*params),
    })
}

/// Restore a quantized tensor to floating point.
pub fn dequantize<F: Scalar>(q: &QuantizedTensor) -> Tensor<F> {
    q.dequantize()
}

/// Quantize-then-dequantize, simulating integer inference in floating point.
pub fn fake_quant<F: Scalar>(x: &Tensor<F>, params: &QuantParams) -> Result<Tensor<F>> {
    params.validate()?;
    let data = x
        .data()
        .iter()
        .map(|v| F::from_f64_lossy(params.fake_quant_value(v.to_f64_lossy())))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Per-channel quantization with an independent bit-width per channel slice.
pub fn per_channel_quantize<F: Scalar>(
    w: &Tensor<F>,
    bits_per_channel: &[u8],
    channel_axis: usize,
) -> Result<QuantizedTensor> {
    let n = w.axis_len(channel_axis)?;
    if bits_per_channel.len() != n {
        return Err(CoreError::ShapeMismatch(format!(
            "{} bit-widths for {} channels",
            bits_per_channel.len(),
            n
        )));
    }
    let mut codes = vec![0u16; w.len()];
    let mut params = Vec::with_capacity(n);
    for (i, &bits) in bits_per_channel.iter().enumerate() {
        let slice = w.channel_values(channel_axis, i)?;
        let p = compute_quant_params_slice(&slice, bits, RangeMode::MinMax)?;
        w.for_each_channel_offset(channel_axis, i, |off| {
            codes[off] = p.code_of(w.data()[off].to_f64_lossy());
        })?;
        params.push(p);
    }
    Ok(QuantizedTensor {
        shape: w.shape().to_vec(),
        codes,
        params: ParamSet::PerChannel {
            axis: channel_axis,
            params,
        },
    })
}

/// Per-channel fake quantization: fit each channel at its own bit-width and
/// reconstruct in one pass.
pub fn per_channel_fake_quant<F: Scalar>(
    w: &Tensor<F>,
    bits_per_channel: &[u8],
    channel_axis: usize,
) -> Result<Tensor<F>> {
    Ok(per_channel_quantize(w, bits_per_channel, channel_axis)?.dequantize())
}

/// Mean squared reconstruction error of fake quantization, in `f64`.
pub fn quant_mse<F: Scalar>(x: &Tensor<F>, params: &QuantParams) -> Result<f64> {
    params.validate()?;
    let sum: f64 = x
        .data()
        .iter()
        .map(|v| {
            let xv = v.to_f64_lossy();
            let d = xv - params.fake_quant_value(xv);
            d * d
        })
        .sum();
    Ok(sum / x.len() as f64)
}
