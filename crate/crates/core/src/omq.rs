//! Outlier-driven mixed quantization.
//!
//! Weight matrices are oriented `(out_channels x in_channels)` and layer
//! outputs are `Y = X Wᵀ`. A per-input-channel smooth factor
//! `δ_i = sqrt(max|W_i| / max|X_i|)` migrates weight outlier magnitude into
//! the activations without changing the product; kurtosis then ranks output
//! channels by how heavy-tailed they remain, and a grouped search promotes
//! the most outlier-salient channels to one extra bit while demoting the
//! same number of unsalient channels by one bit, keeping the layer's average
//! bit-width at the target.

use crate::error::{CoreError, Result};
use crate::quant::{compute_quant_params, fake_quant, per_channel_fake_quant, RangeMode};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Clamp bounds keeping smooth factors finite on dead channels.
pub const DELTA_MIN: f64 = 1e-4;
pub const DELTA_MAX: f64 = 1e4;

/// Range rule used for the activation side of the allocation objective.
pub const ACTIVATION_RANGE: RangeMode = RangeMode::Percentile(99.9);

/// Per-input-channel scale vector migrating weight outliers into activations.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothFactors {
    delta: Vec<f64>,
}

impl SmoothFactors {
    pub fn new(delta: Vec<f64>) -> Result<Self> {
        if delta.is_empty() {
            return Err(CoreError::EmptyInput);
        }
        if delta.iter().any(|d| !d.is_finite() || *d <= 0.0) {
            return Err(CoreError::InvalidArgument(
                "smooth factors must be finite and positive".into(),
            ));
        }
        Ok(Self { delta })
    }

    pub fn ones(n: usize) -> Self {
        Self {
            delta: vec![1.0; n],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.delta
    }

    pub fn len(&self) -> usize {
        self.delta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta.is_empty()
    }
}

/// Activation samples collected from full-precision runs, `(samples x channels)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationBatch<F: Scalar> {
    x: Tensor<F>,
}

impl<F: Scalar> CalibrationBatch<F> {
    pub fn new(x: Tensor<F>) -> Result<Self> {
        if x.rank() != 2 {
            return Err(CoreError::InvalidArgument(
                "calibration batch must be 2-D (samples x channels)".into(),
            ));
        }
        Ok(Self { x })
    }

    pub fn tensor(&self) -> &Tensor<F> {
        &self.x
    }

    pub fn samples(&self) -> usize {
        self.x.rows()
    }

    pub fn channels(&self) -> usize {
        self.x.cols()
    }
}

/// Result of the intra-layer bit allocation for one weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelBitAllocation {
    /// Target average bit-width N.
    pub target_bits: u8,
    /// Per-output-channel bit-widths, each in {N-1, N, N+1}.
    pub bits: Vec<u8>,
    /// Search group size k.
    pub group_size: usize,
    /// Channels assigned N+1 bits, ascending.
    pub promoted: Vec<usize>,
    /// Channels assigned N-1 bits, ascending.
    pub demoted: Vec<usize>,
    /// Unpaired bonus promotions (the "+" variant); zero for the base method.
    pub plus_extra: usize,
}

impl ChannelBitAllocation {
    /// Uniform allocation at the target width (the m = 0 candidate).
    pub fn uniform(target_bits: u8, n: usize, group_size: usize) -> Self {
        Self {
            target_bits,
            bits: vec![target_bits; n],
            group_size,
            promoted: Vec::new(),
            demoted: Vec::new(),
            plus_extra: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.bits.len()
    }

    /// Check the type invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.bits.len();
        if n == 0 {
            return Err(CoreError::EmptyInput);
        }
        let target = self.target_bits;
        let mut promoted = Vec::new();
        let mut demoted = Vec::new();
        for (i, &b) in self.bits.iter().enumerate() {
            if b == target + 1 {
                promoted.push(i);
            } else if b + 1 == target {
                demoted.push(i);
            } else if b != target {
                return Err(CoreError::InvalidArgument(format!(
                    "channel {i} has {b} bits, outside {{{}, {}, {}}}",
                    target - 1,
                    target,
                    target + 1
                )));
            }
        }
        if promoted != self.promoted || demoted != self.demoted {
            return Err(CoreError::InvalidArgument(
                "promoted/demoted sets inconsistent with bit vector".into(),
            ));
        }
        if self.promoted.len() != self.demoted.len() + self.plus_extra {
            return Err(CoreError::InvalidArgument(format!(
                "{} promoted vs {} demoted with {} bonus",
                self.promoted.len(),
                self.demoted.len(),
                self.plus_extra
            )));
        }
        Ok(())
    }

    /// Total weight payload in bits for `per_channel` weights per channel.
    pub fn payload_bits(&self, weights_per_channel: usize) -> u64 {
        self.bits
            .iter()
            .map(|&b| b as u64 * weights_per_channel as u64)
            .sum()
    }
}

/// Objective values for each candidate promotion count m.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationSearch {
    /// Squared output distance per candidate, indexed by m.
    pub objectives: Vec<f64>,
    /// The m that won (ties go to the smaller m).
    pub chosen_m: usize,
}

/// Compute `δ_i = sqrt(max|W_i| / max|X_i|)` per input channel.
///
/// `w` is `(out x in)`; `x` has the same input-channel count. Dead channels
/// clamp into `[DELTA_MIN, DELTA_MAX]`.
pub fn compute_smooth_factors<F: Scalar>(
    w: &Tensor<F>,
    x: &CalibrationBatch<F>,
) -> Result<SmoothFactors> {
    if w.rank() != 2 {
        return Err(CoreError::InvalidArgument("weights must be 2-D".into()));
    }
    if w.cols() != x.channels() {
        return Err(CoreError::ShapeMismatch(format!(
            "weight has {} input channels, calibration has {}",
            w.cols(),
            x.channels()
        )));
    }
    let col_abs_max = |t: &Tensor<F>, col: usize| -> f64 {
        let mut m = 0.0f64;
        for r in 0..t.rows() {
            m = m.max(t.data()[r * t.cols() + col].to_f64_lossy().abs());
        }
        m
    };
    let delta = (0..w.cols())
        .map(|i| {
            let wm = col_abs_max(w, i);
            let xm = col_abs_max(x.tensor(), i);
            let d = if xm == 0.0 {
                DELTA_MAX
            } else {
                (wm / xm).sqrt()
            };
            d.clamp(DELTA_MIN, DELTA_MAX)
        })
        .collect();
    SmoothFactors::new(delta)
}

/// Scale activations by `δ` and divide weight columns by `δ`, preserving
/// `X Wᵀ = X̂ Ŵᵀ` exactly in exact arithmetic.
pub fn apply_smoothing<F: Scalar>(
    w: &Tensor<F>,
    x: &CalibrationBatch<F>,
    delta: &SmoothFactors,
) -> Result<(Tensor<F>, CalibrationBatch<F>)> {
    if w.rank() != 2 || w.cols() != delta.len() || x.channels() != delta.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "weights {:?}, calibration {:?}, delta {}",
            w.shape(),
            x.tensor().shape(),
            delta.len()
        )));
    }
    let mut w_hat = w.clone();
    for r in 0..w.rows() {
        let row = w_hat.row_mut(r);
        for (i, v) in row.iter_mut().enumerate() {
            *v = F::from_f64_lossy(v.to_f64_lossy() / delta.values()[i]);
        }
    }
    let mut x_hat = x.tensor().clone();
    for r in 0..x_hat.rows() {
        let row = x_hat.row_mut(r);
        for (i, v) in row.iter_mut().enumerate() {
            *v = F::from_f64_lossy(v.to_f64_lossy() * delta.values()[i]);
        }
    }
    Ok((w_hat, CalibrationBatch::new(x_hat)?))
}

/// Pearson kurtosis `m4 / m2²` with population moments, in `f64`.
pub fn kurtosis<F: Scalar>(v: &[F]) -> Result<f64> {
    if v.len() < 4 {
        return Err(CoreError::InvalidArgument(
            "kurtosis requires at least 4 values".into(),
        ));
    }
    let n = v.len() as f64;
    let mean = v.iter().map(|x| x.to_f64_lossy()).sum::<f64>() / n;
    let mut m2 = 0.0f64;
    let mut m4 = 0.0f64;
    for x in v {
        let d = x.to_f64_lossy() - mean;
        let d2 = d * d;
        m2 += d2;
        m4 += d2 * d2;
    }
    m2 /= n;
    m4 /= n;
    if m2 == 0.0 {
        return Err(CoreError::DegenerateChannel);
    }
    Ok(m4 / (m2 * m2))
}

/// Kurtosis of every output channel (row); degenerate channels are reported
/// as negative infinity so they sort last.
pub fn channel_kurtosis<F: Scalar>(w_hat: &Tensor<F>) -> Result<Vec<f64>> {
    if w_hat.rank() != 2 {
        return Err(CoreError::InvalidArgument("weights must be 2-D".into()));
    }
    (0..w_hat.rows())
        .map(|r| match kurtosis(w_hat.row(r)) {
            Ok(k) => Ok(k),
            Err(CoreError::DegenerateChannel) => Ok(f64::NEG_INFINITY),
            Err(e) => Err(e),
        })
        .collect()
}

/// Output channels sorted by kurtosis, descending; ties break toward the
/// lower channel index.
pub fn rank_channels_by_kurtosis<F: Scalar>(w_hat: &Tensor<F>) -> Result<Vec<usize>> {
    let kappa = channel_kurtosis(w_hat)?;
    let mut order: Vec<usize> = (0..kappa.len()).collect();
    order.sort_by(|&a, &b| {
        kappa[b]
            .partial_cmp(&kappa[a])
            .expect("kurtosis values are never NaN")
            .then(a.cmp(&b))
    });
    Ok(order)
}

fn candidate_bits(
    ranking: &[usize],
    target_bits: u8,
    m: usize,
    k: usize,
    extra: usize,
) -> ChannelBitAllocation {
    let n = ranking.len();
    let mut bits = vec![target_bits; n];
    for &c in &ranking[..m * k + extra] {
        bits[c] = target_bits + 1;
    }
    for &c in &ranking[n - m * k..] {
        bits[c] = target_bits - 1;
    }
    let mut promoted: Vec<usize> = ranking[..m * k + extra].to_vec();
    promoted.sort_unstable();
    let mut demoted: Vec<usize> = ranking[n - m * k..].to_vec();
    demoted.sort_unstable();
    ChannelBitAllocation {
        target_bits,
        bits,
        group_size: k,
        promoted,
        demoted,
        plus_extra: extra,
    }
}

fn objective<F: Scalar>(
    reference: &Tensor<F>,
    x_quant: &Tensor<F>,
    w_hat: &Tensor<F>,
    bits: &[u8],
) -> Result<f64> {
    let w_quant = per_channel_fake_quant(w_hat, bits, 0)?;
    reference.dist_sq(&x_quant.matmul_nt(&w_quant)?)
}

/// Grouped intra-layer bit-allocation search.
///
/// Candidates promote the top `m·k` channels by kurtosis to `N+1` bits and
/// demote the bottom `m·k` to `N-1`, for `m` in `0..=((n-extra)/k)/2`; the
/// candidate minimizing the squared output distance on the calibration batch
/// wins. With `plus_fraction > 0`, `ceil(plus_fraction·n)` further channels
/// after the paired top block are promoted without demoting counterparts.
///
/// `act_bits` sets the activation fake-quantization width used inside the
/// objective.
pub fn allocate_bits<F: Scalar>(
    w_hat: &Tensor<F>,
    x_hat: &CalibrationBatch<F>,
    target_bits: u8,
    group_size: usize,
    plus_fraction: f64,
    act_bits: u8,
) -> Result<ChannelBitAllocation> {
    Ok(allocate_bits_with_search(w_hat, x_hat, target_bits, group_size, plus_fraction, act_bits)?.0)
}

/// [`allocate_bits`] plus the per-candidate objective trace for reporting.
pub fn allocate_bits_with_search<F: Scalar>(
    w_hat: &Tensor<F>,
    x_hat: &CalibrationBatch<F>,
    target_bits: u8,
    group_size: usize,
    plus_fraction: f64,
    act_bits: u8,
) -> Result<(ChannelBitAllocation, AllocationSearch)> {
    if w_hat.rank() != 2 {
        return Err(CoreError::InvalidArgument("weights must be 2-D".into()));
    }
    let n = w_hat.rows();
    if w_hat.cols() != x_hat.channels() {
        return Err(CoreError::ShapeMismatch(format!(
            "weight has {} input channels, calibration has {}",
            w_hat.cols(),
            x_hat.channels()
        )));
    }
    if !(2..=15).contains(&target_bits) {
        return Err(CoreError::InvalidArgument(format!(
            "target bits must be in [2, 15], got {target_bits}"
        )));
    }
    if group_size == 0 {
        return Err(CoreError::InvalidArgument("group size must be positive".into()));
    }
    if group_size >= n {
        return Err(CoreError::GroupTooLarge);
    }
    if !(0.0..=0.5).contains(&plus_fraction) {
        return Err(CoreError::InvalidArgument(format!(
            "plus fraction must be in [0, 0.5], got {plus_fraction}"
        )));
    }

    let extra = if plus_fraction > 0.0 {
        (plus_fraction * n as f64).ceil() as usize
    } else {
        0
    };
    let ranking = rank_channels_by_kurtosis(w_hat)?;
    let m_max = ((n - extra) / group_size) / 2;

    let reference = x_hat.tensor().matmul_nt(w_hat)?;
    let act_params = compute_quant_params(x_hat.tensor(), act_bits, ACTIVATION_RANGE)?;
    let x_quant = fake_quant(x_hat.tensor(), &act_params)?;

    let mut objectives = Vec::with_capacity(m_max + 1);
    let mut best = (0usize, f64::INFINITY);
    for m in 0..=m_max {
        let cand = candidate_bits(&ranking, target_bits, m, group_size, extra);
        let loss = objective(&reference, &x_quant, w_hat, &cand.bits)?;
        if loss < best.1 {
            best = (m, loss);
        }
        objectives.push(loss);
    }
    let chosen = candidate_bits(&ranking, target_bits, best.0, group_size, extra);
    chosen.validate()?;
    Ok((
        chosen,
        AllocationSearch {
            objectives,
            chosen_m: best.0,
        },
    ))
}

/// Squared output distance between the full-precision layer and its
/// mixed-precision fake-quantized counterpart under `allocation` and `delta`.
pub fn omq_proxy_loss<F: Scalar>(
    w: &Tensor<F>,
    x: &CalibrationBatch<F>,
    allocation: &ChannelBitAllocation,
    delta: &SmoothFactors,
    act_bits: u8,
) -> Result<f64> {
    allocation.validate()?;
    if allocation.channels() != w.rows() {
        return Err(CoreError::ShapeMismatch(format!(
            "allocation covers {} channels, weight has {}",
            allocation.channels(),
            w.rows()
        )));
    }
    let reference = x.tensor().matmul_nt(w)?;
    let (w_hat, x_hat) = apply_smoothing(w, x, delta)?;
    let act_params = compute_quant_params(x_hat.tensor(), act_bits, ACTIVATION_RANGE)?;
    let x_quant = fake_quant(x_hat.tensor(), &act_params)?;
    objective(&reference, &x_quant, &w_hat, &allocation.bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, sigma: f64) -> Tensor<f64> {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * sigma
            })
            .collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    /// Gaussian layer with a +-8 sigma outlier pair planted in the given rows.
    fn planted_layer(
        rng: &mut ChaCha8Rng,
        n: usize,
        c_in: usize,
        outlier_rows: &[usize],
    ) -> Tensor<f64> {
        let sigma = 0.1;
        let mut w = gaussian_matrix(rng, n, c_in, sigma);
        for &r in outlier_rows {
            let i = rng.gen_range(0..c_in);
            let mut j = rng.gen_range(0..c_in);
            while j == i {
                j = rng.gen_range(0..c_in);
            }
            w.row_mut(r)[i] = 8.0 * sigma;
            w.row_mut(r)[j] = -8.0 * sigma;
        }
        w
    }

    fn batch(rng: &mut ChaCha8Rng, samples: usize, channels: usize) -> CalibrationBatch<f64> {
        CalibrationBatch::new(gaussian_matrix(rng, samples, channels, 1.0)).unwrap()
    }

    #[test]
    fn smooth_factor_sqrt_ratio() {
        let w = Tensor::matrix(1, 2, vec![4.0, 1.0]).unwrap();
        let x = CalibrationBatch::new(Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap()).unwrap();
        let d = compute_smooth_factors(&w, &x).unwrap();
        assert_eq!(d.values()[0], 2.0);
        assert_eq!(d.values()[1], 1.0);
    }

    #[test]
    fn smooth_factor_unity_when_balanced() {
        let w = Tensor::matrix(2, 2, vec![0.7, -0.2, -0.7, 0.2]).unwrap();
        let x = CalibrationBatch::new(Tensor::matrix(2, 2, vec![0.7, 0.2, -0.1, -0.05]).unwrap())
            .unwrap();
        let d = compute_smooth_factors(&w, &x).unwrap();
        assert!((d.values()[0] - 1.0).abs() < 1e-15);
        assert!((d.values()[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn smooth_factor_dead_weight_channel_clamps() {
        let w = Tensor::matrix(2, 2, vec![0.0, 0.5, 0.0, -0.5]).unwrap();
        let x = CalibrationBatch::new(Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap()).unwrap();
        let d = compute_smooth_factors(&w, &x).unwrap();
        assert_eq!(d.values()[0], DELTA_MIN);
    }

    #[test]
    fn smooth_factor_channel_mismatch_errors() {
        let w = Tensor::matrix(2, 3, vec![0.0; 6].iter().map(|_| 0.1).collect()).unwrap();
        let x = CalibrationBatch::new(Tensor::matrix(2, 2, vec![1.0; 4]).unwrap()).unwrap();
        assert!(matches!(
            compute_smooth_factors(&w, &x),
            Err(CoreError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn smoothing_with_ones_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = gaussian_matrix(&mut rng, 3, 4, 1.0);
        let x = batch(&mut rng, 5, 4);
        let (w_hat, x_hat) = apply_smoothing(&w, &x, &SmoothFactors::ones(4)).unwrap();
        assert_eq!(w_hat, w);
        assert_eq!(x_hat.tensor(), x.tensor());
    }

    #[test]
    fn smoothing_preserves_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let w = gaussian_matrix(&mut rng, 4, 3, 1.0);
            let x = batch(&mut rng, 5, 3);
            let delta =
                SmoothFactors::new((0..3).map(|_| rng.gen_range(0.1..10.0)).collect()).unwrap();
            let (w_hat, x_hat) = apply_smoothing(&w, &x, &delta).unwrap();
            let y = x.tensor().matmul_nt(&w).unwrap();
            let y_hat = x_hat.tensor().matmul_nt(&w_hat).unwrap();
            let rel = (y.dist_sq(&y_hat).unwrap() / y.frob_sq()).sqrt();
            assert!(rel <= 1e-6, "relative deviation {rel}");
        }
    }

    #[test]
    fn smoothing_moves_magnitude_between_sides() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = gaussian_matrix(&mut rng, 4, 3, 1.0);
        let x = batch(&mut rng, 5, 3);
        let delta = SmoothFactors::new(vec![10.0, 1.0, 1.0]).unwrap();
        let (w_hat, x_hat) = apply_smoothing(&w, &x, &delta).unwrap();
        let col_max = |t: &Tensor<f64>, c: usize| {
            (0..t.rows())
                .map(|r| t.data()[r * t.cols() + c].abs())
                .fold(0.0, f64::max)
        };
        assert!((col_max(&w_hat, 0) - col_max(&w, 0) / 10.0).abs() < 1e-12);
        assert!((col_max(x_hat.tensor(), 0) - col_max(x.tensor(), 0) * 10.0).abs() < 1e-12);
    }

    #[test]
    fn kurtosis_two_point_symmetric() {
        let k = kurtosis(&[1.0, -1.0, 1.0, -1.0]).unwrap();
        assert!((k - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kurtosis_single_spike() {
        // mean 2, m2 = 16, m4 = 832 => kappa = 3.25
        let k = kurtosis(&[0.0, 0.0, 0.0, 0.0, 10.0]).unwrap();
        assert!((k - 3.25).abs() < 1e-12);
    }

    #[test]
    fn kurtosis_constant_is_degenerate() {
        assert_eq!(
            kurtosis(&[2.0, 2.0, 2.0, 2.0]).unwrap_err(),
            CoreError::DegenerateChannel
        );
    }

    #[test]
    fn kurtosis_matches_direct_moment_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let v: Vec<f64> = (0..32).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let k = kurtosis(&v).unwrap();
            // Independent brute-force recomputation.
            let n = v.len() as f64;
            let mu = v.iter().sum::<f64>() / n;
            let m2 = v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
            let m4 = v.iter().map(|x| (x - mu).powi(4)).sum::<f64>() / n;
            assert!((k - m4 / (m2 * m2)).abs() < 1e-10);
        }
    }

    #[test]
    fn ranking_finds_planted_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let target = rng.gen_range(0..8);
            let w = planted_layer(&mut rng, 8, 32, &[target]);
            let ranking = rank_channels_by_kurtosis(&w).unwrap();
            assert_eq!(ranking[0], target);
        }
    }

    #[test]
    fn ranking_tie_rule_is_index_order() {
        let row = vec![0.5, -0.5, 0.25, -0.25];
        let mut data = row.clone();
        data.extend_from_slice(&row);
        data.extend_from_slice(&row);
        let w = Tensor::matrix(3, 4, data).unwrap();
        assert_eq!(rank_channels_by_kurtosis(&w).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn ranking_two_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = planted_layer(&mut rng, 2, 32, &[1]);
        assert_eq!(rank_channels_by_kurtosis(&w).unwrap(), vec![1, 0]);
    }

    #[test]
    fn ranking_degenerate_channel_sorts_last() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut w = gaussian_matrix(&mut rng, 3, 8, 1.0);
        for v in w.row_mut(1) {
            *v = 0.0;
        }
        let ranking = rank_channels_by_kurtosis(&w).unwrap();
        assert_eq!(*ranking.last().unwrap(), 1);
    }

    #[test]
    fn allocation_promotes_planted_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let target = rng.gen_range(0..4);
            let w = planted_layer(&mut rng, 4, 16, &[target]);
            let x = batch(&mut rng, 64, 16);
            let delta = compute_smooth_factors(&w, &x).unwrap();
            let (w_hat, x_hat) = apply_smoothing(&w, &x, &delta).unwrap();
            let (alloc, search) =
                allocate_bits_with_search(&w_hat, &x_hat, 3, 1, 0.0, 8).unwrap();
            assert_eq!(search.objectives.len(), 3); // m in {0, 1, 2}
            let best = search
                .objectives
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            assert_eq!(search.objectives[search.chosen_m], best);
            if search.chosen_m > 0 {
                assert!(alloc.promoted.contains(&target));
            }
            alloc.validate().unwrap();
        }
    }

    #[test]
    fn allocation_constraints_hold_without_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = gaussian_matrix(&mut rng, 12, 16, 0.5);
        let x = batch(&mut rng, 32, 16);
        let alloc =
            allocate_bits(&w, &CalibrationBatch::new(x.tensor().clone()).unwrap(), 4, 2, 0.0, 8)
                .unwrap();
        alloc.validate().unwrap();
        assert_eq!(alloc.promoted.len(), alloc.demoted.len());
        let total: u64 = alloc.bits.iter().map(|&b| b as u64).sum();
        assert_eq!(total, 4 * 12); // average bit-width preserved
    }

    #[test]
    fn allocation_plus_fraction_adds_exact_bonus() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let w = gaussian_matrix(&mut rng, 100, 16, 0.5);
        let x = batch(&mut rng, 32, 16);
        let alloc = allocate_bits(&w, &x, 2, 10, 0.1, 8).unwrap();
        alloc.validate().unwrap();
        assert_eq!(alloc.plus_extra, 10);
        assert_eq!(alloc.promoted.len(), alloc.demoted.len() + 10);
    }

    #[test]
    fn allocation_group_too_large_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = gaussian_matrix(&mut rng, 4, 8, 0.5);
        let x = batch(&mut rng, 16, 8);
        assert_eq!(
            allocate_bits(&w, &x, 3, 4, 0.0, 8).unwrap_err(),
            CoreError::GroupTooLarge
        );
    }

    #[test]
    fn allocation_matches_exhaustive_candidate_family() {
        // Oracle: enumerate every m with an independent objective evaluation.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let outliers: Vec<usize> = if rng.gen_bool(0.5) {
                vec![rng.gen_range(0..8)]
            } else {
                Vec::new()
            };
            let w = planted_layer(&mut rng, 8, 16, &outliers);
            let x = batch(&mut rng, 32, 16);
            let (alloc, search) = allocate_bits_with_search(&w, &x, 3, 1, 0.0, 8).unwrap();

            let ranking = rank_channels_by_kurtosis(&w).unwrap();
            let reference = x.tensor().matmul_nt(&w).unwrap();
            let act = compute_quant_params(x.tensor(), 8, ACTIVATION_RANGE).unwrap();
            let xq = fake_quant(x.tensor(), &act).unwrap();
            let mut best = f64::INFINITY;
            for m in 0..=4usize {
                let mut bits = vec![3u8; 8];
                for &c in &ranking[..m] {
                    bits[c] = 4;
                }
                for &c in &ranking[8 - m..] {
                    bits[c] = 2;
                }
                let wq = per_channel_fake_quant(&w, &bits, 0).unwrap();
                let loss = reference.dist_sq(&xq.matmul_nt(&wq).unwrap()).unwrap();
                best = best.min(loss);
            }
            assert!(
                (search.objectives[search.chosen_m] - best).abs() <= 1e-9 * best.max(1.0),
                "search {} vs oracle {}",
                search.objectives[search.chosen_m],
                best
            );
            alloc.validate().unwrap();
        }
    }

    #[test]
    fn proxy_loss_near_lossless_at_high_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let w = gaussian_matrix(&mut rng, 4, 8, 0.5);
        // Grid-like activations keep percentile clipping negligible.
        let data: Vec<f64> = (0..64 * 8)
            .map(|i| (i as f64 / (64.0 * 8.0 - 1.0)) * 2.0 - 1.0)
            .collect();
        let x = CalibrationBatch::new(Tensor::matrix(64, 8, data).unwrap()).unwrap();
        let alloc = ChannelBitAllocation {
            target_bits: 15,
            bits: vec![16; 4],
            group_size: 1,
            promoted: vec![0, 1, 2, 3],
            demoted: vec![],
            plus_extra: 4,
        };
        let delta = SmoothFactors::ones(8);
        let loss = omq_proxy_loss(&w, &x, &alloc, &delta, 16).unwrap();
        let scale = x.tensor().matmul_nt(&w).unwrap().frob_sq();
        assert!(loss <= 1e-6 * scale, "loss {loss} vs scale {scale}");
    }

    #[test]
    fn proxy_loss_zero_for_zero_weights() {
        let w = Tensor::matrix(2, 4, vec![0.0; 8]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = batch(&mut rng, 16, 4);
        let alloc = ChannelBitAllocation::uniform(3, 2, 1);
        let delta = compute_smooth_factors(&w, &x).unwrap();
        assert_eq!(omq_proxy_loss(&w, &x, &alloc, &delta, 4).unwrap(), 0.0);
    }

    #[test]
    fn proxy_loss_trend_improves_with_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut avg = [0.0f64; 3];
        for _ in 0..20 {
            let w = gaussian_matrix(&mut rng, 6, 8, 0.5);
            let x = batch(&mut rng, 32, 8);
            let delta = compute_smooth_factors(&w, &x).unwrap();
            for (slot, bits) in [2u8, 4, 8].iter().enumerate() {
                let alloc = ChannelBitAllocation::uniform(*bits, 6, 1);
                avg[slot] += omq_proxy_loss(&w, &x, &alloc, &delta, *bits).unwrap();
            }
        }
        assert!(avg[1] <= avg[0]);
        assert!(avg[2] <= avg[1]);
    }

    #[test]
    fn planted_outlier_benefit_over_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut improvements = Vec::new();
        for _ in 0..20 {
            let n = 20;
            let outliers: Vec<usize> = (0..n).step_by(10).collect(); // 10% of channels
            let w = planted_layer(&mut rng, n, 32, &outliers);
            let x = batch(&mut rng, 64, 32);
            let delta = compute_smooth_factors(&w, &x).unwrap();
            let (w_hat, x_hat) = apply_smoothing(&w, &x, &delta).unwrap();
            let alloc = allocate_bits(&w_hat, &x_hat, 3, 2, 0.0, 8).unwrap();
            let uniform = ChannelBitAllocation::uniform(3, n, 2);
            let omq = omq_proxy_loss(&w, &x, &alloc, &delta, 8).unwrap();
            let base = omq_proxy_loss(&w, &x, &uniform, &delta, 8).unwrap();
            assert!(omq <= base, "omq {omq} vs uniform {base}");
            improvements.push(base / omq.max(1e-30));
        }
        improvements.sort_by(|a, b| a.partial_cmp(b).unwrap());
        eprintln!(
            "planted-outlier proxy-loss ratio (uniform/omq): median {:.3}",
            improvements[improvements.len() / 2]
        );
    }
}
