//! Time-smoothed relation distillation.
//!
//! Pre-projection feature maps from consecutive denoising steps are summed
//! into a smoothed representation, mapped to per-position cosine-similarity
//! distributions, and the teacher/student distributions are matched with a
//! forward KL divergence. Analytic gradients are provided for the student
//! side so the fine-tuning loop can backpropagate without autodiff.

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Floor applied to the student probabilities before the log.
pub const KL_FLOOR: f64 = 1e-12;
/// Floor applied to feature row norms before unit normalization.
pub const NORM_FLOOR: f64 = 1e-12;

/// Which model produced a feature trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceSource {
    Fp,
    Quantized,
}

/// Per-timestep pre-projection feature maps recorded along a denoising
/// trajectory. Timesteps must be pushed in strictly decreasing order and all
/// maps must share one shape.
#[derive(Debug, Clone)]
pub struct FeatureTrace<F: Scalar> {
    source: TraceSource,
    steps: Vec<(usize, Tensor<F>)>,
}

impl<F: Scalar> FeatureTrace<F> {
    pub fn new(source: TraceSource) -> Self {
        Self {
            source,
            steps: Vec::new(),
        }
    }

    pub fn source(&self) -> TraceSource {
        self.source
    }

    pub fn push(&mut self, t: usize, feature: Tensor<F>) -> Result<()> {
        if let Some((last_t, last_f)) = self.steps.last() {
            if t >= *last_t {
                return Err(CoreError::InvalidArgument(format!(
                    "timesteps must decrease along the trajectory: {t} after {last_t}"
                )));
            }
            if last_f.shape() != feature.shape() {
                return Err(CoreError::ShapeMismatch(format!(
                    "feature shape {:?} differs from trace shape {:?}",
                    feature.shape(),
                    last_f.shape()
                )));
            }
        }
        self.steps.push((t, feature));
        Ok(())
    }

    pub fn get(&self, t: usize) -> Option<&Tensor<F>> {
        self.steps
            .iter()
            .find(|(st, _)| *st == t)
            .map(|(_, f)| f)
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn timesteps(&self) -> impl Iterator<Item = usize> + '_ {
        self.steps.iter().map(|(t, _)| *t)
    }
}

/// Row-stochastic cosine-similarity distributions, one row per position.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap {
    positions: usize,
    probs: Vec<f64>,
    temperature: f64,
}

impl SimilarityMap {
    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.positions..(i + 1) * self.positions]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Check that every row is a probability vector.
    pub fn validate(&self) -> Result<()> {
        for i in 0..self.positions {
            let row = self.row(i);
            if row.iter().any(|&p| p < 0.0) {
                return Err(CoreError::InvalidArgument("negative probability".into()));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(CoreError::InvalidArgument(format!(
                    "row {i} sums to {sum}"
                )));
            }
        }
        Ok(())
    }
}

/// Distillation knobs: smoothing window, loss weight, softmax temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillConfig {
    /// Number of extra consecutive steps summed into the smoothed feature.
    pub smooth_steps: usize,
    /// Weight of the relation loss in the total objective.
    pub lambda: f64,
    /// Softmax temperature for the similarity rows.
    pub temperature: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            smooth_steps: 1,
            lambda: 100.0,
            temperature: 1.0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(CoreError::InvalidArgument("lambda must be >= 0".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(CoreError::InvalidArgument(
                "temperature must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Sum the feature maps at timesteps `end_t, end_t-1, ..., end_t-n`.
pub fn smooth_features<F: Scalar>(
    trace: &FeatureTrace<F>,
    end_t: usize,
    n: usize,
) -> Result<Tensor<F>> {
    if n >= end_t {
        return Err(CoreError::InvalidArgument(format!(
            "window of {} steps does not fit below timestep {end_t}",
            n + 1
        )));
    }
    let first = trace
        .get(end_t)
        .ok_or(CoreError::MissingTimestep(end_t))?;
    let mut acc: Vec<f64> = first.data().iter().map(|v| v.to_f64_lossy()).collect();
    for back in 1..=n {
        let t = end_t - back;
        let f = trace.get(t).ok_or(CoreError::MissingTimestep(t))?;
        if f.shape() != first.shape() {
            return Err(CoreError::ShapeMismatch(
                "trace features disagree on shape".into(),
            ));
        }
        for (a, v) in acc.iter_mut().zip(f.data()) {
            *a += v.to_f64_lossy();
        }
    }
    Tensor::new(
        first.shape().to_vec(),
        acc.into_iter().map(F::from_f64_lossy).collect(),
    )
}

/// Internal: unit-normalized rows (f64) plus the floored norms.
fn normalized_rows<F: Scalar>(f: &Tensor<F>) -> Result<(Vec<f64>, Vec<f64>)> {
    if f.rank() != 2 {
        return Err(CoreError::InvalidArgument(
            "features must be 2-D (positions x channels)".into(),
        ));
    }
    let (s, c) = (f.rows(), f.cols());
    let mut unit = vec![0.0f64; s * c];
    let mut norms = vec![0.0f64; s];
    for i in 0..s {
        let row = f.row(i);
        let norm = row
            .iter()
            .map(|v| {
                let x = v.to_f64_lossy();
                x * x
            })
            .sum::<f64>()
            .sqrt();
        let n = norm.max(NORM_FLOOR);
        norms[i] = n;
        for (j, v) in row.iter().enumerate() {
            unit[i * c + j] = v.to_f64_lossy() / n;
        }
    }
    Ok((unit, norms))
}

/// Row-wise temperature softmax of the cosine matrix of `f_hat`.
///
/// Rows are unit-normalized first, so the map is invariant to positive
/// rescaling of the features.
pub fn similarity_distributions<F: Scalar>(
    f_hat: &Tensor<F>,
    temperature: f64,
) -> Result<SimilarityMap> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(CoreError::InvalidArgument(
            "temperature must be positive".into(),
        ));
    }
    let (unit, _) = normalized_rows(f_hat)?;
    let (s, c) = (f_hat.rows(), f_hat.cols());
    let mut probs = vec![0.0f64; s * s];
    let mut scores = vec![0.0f64; s];
    for i in 0..s {
        for j in 0..s {
            let mut dot = 0.0;
            for p in 0..c {
                dot += unit[i * c + p] * unit[j * c + p];
            }
            scores[j] = dot / temperature;
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..s {
            scores[j] = (scores[j] - max).exp();
            z += scores[j];
        }
        for j in 0..s {
            probs[i * s + j] = scores[j] / z;
        }
    }
    Ok(SimilarityMap {
        positions: s,
        probs,
        temperature,
    })
}

/// `Σ_i KL(teacher_row_i ‖ student_row_i)` with the student floored at
/// [`KL_FLOOR`] before the log.
pub fn relation_kl_loss(teacher: &SimilarityMap, student: &SimilarityMap) -> Result<f64> {
    if teacher.positions != student.positions {
        return Err(CoreError::ShapeMismatch(format!(
            "{} vs {} positions",
            teacher.positions, student.positions
        )));
    }
    let mut total = 0.0f64;
    for (p, q) in teacher.probs.iter().zip(&student.probs) {
        if *p > 0.0 {
            total += p * (p / q.max(KL_FLOOR)).ln();
        }
    }
    Ok(total)
}

/// Mean squared error between two model outputs.
pub fn task_loss<F: Scalar>(out_f: &Tensor<F>, out_q: &Tensor<F>) -> Result<f64> {
    Ok(out_f.dist_sq(out_q)? / out_f.len() as f64)
}

/// Gradient of [`task_loss`] with respect to the student output.
pub fn task_loss_grad<F: Scalar>(out_f: &Tensor<F>, out_q: &Tensor<F>) -> Result<Tensor<f64>> {
    if out_f.shape() != out_q.shape() {
        return Err(CoreError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            out_f.shape(),
            out_q.shape()
        )));
    }
    let m = out_f.len() as f64;
    let data = out_f
        .data()
        .iter()
        .zip(out_q.data())
        .map(|(f, q)| 2.0 * (q.to_f64_lossy() - f.to_f64_lossy()) / m)
        .collect();
    Tensor::new(out_f.shape().to_vec(), data)
}

/// Mean squared elementwise difference between raw feature maps; the plain
/// numerical-alignment baseline.
pub fn l2_feature_loss<F: Scalar>(f_f: &Tensor<F>, f_q: &Tensor<F>) -> Result<f64> {
    Ok(f_f.dist_sq(f_q)? / f_f.len() as f64)
}

/// Combined objective `task + lambda * dis`.
pub fn total_loss(task: f64, dis: f64, lambda: f64) -> f64 {
    task + lambda * dis
}

/// Gradient of the relation KL loss with respect to the student features.
///
/// Differentiates through row normalization, the cosine matrix and the
/// temperature softmax; returned in `f64` regardless of feature storage.
pub fn relation_kl_grad<F: Scalar>(
    f_teacher: &Tensor<F>,
    f_student: &Tensor<F>,
    temperature: f64,
) -> Result<Tensor<f64>> {
    if f_teacher.shape() != f_student.shape() {
        return Err(CoreError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            f_teacher.shape(),
            f_student.shape()
        )));
    }
    let teacher = similarity_distributions(f_teacher, temperature)?;
    let student = similarity_distributions(f_student, temperature)?;
    let (unit, norms) = normalized_rows(f_student)?;
    let (s, c) = (f_student.rows(), f_student.cols());

    // dL/dq with the same floor rule as the forward pass.
    let mut dq = vec![0.0f64; s * s];
    for (o, (p, q)) in dq
        .iter_mut()
        .zip(teacher.probs.iter().zip(&student.probs))
    {
        if *p > 0.0 && *q >= KL_FLOOR {
            *o = -p / q;
        }
    }

    // Softmax backward per row: dC_ij = (1/tau) q_ij (dq_ij - sum_k dq_ik q_ik).
    let mut dc = vec![0.0f64; s * s];
    for i in 0..s {
        let mut inner = 0.0;
        for k in 0..s {
            inner += dq[i * s + k] * student.probs[i * s + k];
        }
        for j in 0..s {
            dc[i * s + j] =
                student.probs[i * s + j] * (dq[i * s + j] - inner) / temperature;
        }
    }

    // C = U Uᵀ: dU = (dC + dCᵀ) U.
    let mut du = vec![0.0f64; s * c];
    for i in 0..s {
        for j in 0..s {
            let w = dc[i * s + j] + dc[j * s + i];
            for p in 0..c {
                du[i * c + p] += w * unit[j * c + p];
            }
        }
    }

    // Unit-normalization backward. Clamped rows scale linearly.
    let mut grad = vec![0.0f64; s * c];
    for i in 0..s {
        let raw_norm_sq: f64 = f_student
            .row(i)
            .iter()
            .map(|v| {
                let x = v.to_f64_lossy();
                x * x
            })
            .sum();
        let clamped = raw_norm_sq.sqrt() < NORM_FLOOR;
        if clamped {
            for p in 0..c {
                grad[i * c + p] = du[i * c + p] / norms[i];
            }
        } else {
            let mut dot = 0.0;
            for p in 0..c {
                dot += unit[i * c + p] * du[i * c + p];
            }
            for p in 0..c {
                grad[i * c + p] = (du[i * c + p] - dot * unit[i * c + p]) / norms[i];
            }
        }
    }
    Tensor::new(vec![s, c], grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor<f64> {
        Tensor::matrix(rows, cols, data).unwrap()
    }

    fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
        mat(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
    }

    #[test]
    fn trace_rejects_non_decreasing_timesteps() {
        let mut trace = FeatureTrace::new(TraceSource::Fp);
        trace.push(10, mat(1, 2, vec![1.0, 2.0])).unwrap();
        assert!(trace.push(10, mat(1, 2, vec![1.0, 2.0])).is_err());
        assert!(trace.push(11, mat(1, 2, vec![1.0, 2.0])).is_err());
        trace.push(9, mat(1, 2, vec![1.0, 2.0])).unwrap();
    }

    #[test]
    fn trace_rejects_shape_changes() {
        let mut trace = FeatureTrace::new(TraceSource::Quantized);
        trace.push(5, mat(1, 2, vec![1.0, 2.0])).unwrap();
        assert!(trace.push(4, mat(2, 1, vec![1.0, 2.0])).is_err());
    }

    #[test]
    fn smooth_features_window_of_one_is_identity() {
        let mut trace = FeatureTrace::new(TraceSource::Fp);
        let f = mat(2, 2, vec![1.0, -2.0, 3.0, 0.5]);
        trace.push(7, f.clone()).unwrap();
        assert_eq!(smooth_features(&trace, 7, 0).unwrap(), f);
    }

    #[test]
    fn smooth_features_cancellation() {
        let mut trace = FeatureTrace::new(TraceSource::Fp);
        let a = mat(2, 2, vec![1.0, -2.0, 3.0, 0.5]);
        trace.push(7, a.clone()).unwrap();
        trace.push(6, a.map(|v| -v)).unwrap();
        let sum = smooth_features(&trace, 7, 1).unwrap();
        assert!(sum.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn smooth_features_missing_timestep_errors() {
        let mut trace = FeatureTrace::new(TraceSource::Fp);
        trace.push(7, mat(1, 2, vec![1.0, 2.0])).unwrap();
        trace.push(5, mat(1, 2, vec![1.0, 2.0])).unwrap();
        assert_eq!(
            smooth_features(&trace, 7, 1).unwrap_err(),
            CoreError::MissingTimestep(6)
        );
    }

    #[test]
    fn smooth_features_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a0 = random_mat(&mut rng, 3, 4);
        let a1 = random_mat(&mut rng, 3, 4);
        let b0 = random_mat(&mut rng, 3, 4);
        let b1 = random_mat(&mut rng, 3, 4);
        let (alpha, beta) = (0.75, -1.5);

        let build = |f0: &Tensor<f64>, f1: &Tensor<f64>| {
            let mut t = FeatureTrace::new(TraceSource::Fp);
            t.push(9, f0.clone()).unwrap();
            t.push(8, f1.clone()).unwrap();
            t
        };
        let combo0 = mat(
            3,
            4,
            a0.data()
                .iter()
                .zip(b0.data())
                .map(|(a, b)| alpha * a + beta * b)
                .collect(),
        );
        let combo1 = mat(
            3,
            4,
            a1.data()
                .iter()
                .zip(b1.data())
                .map(|(a, b)| alpha * a + beta * b)
                .collect(),
        );
        let lhs = smooth_features(&build(&combo0, &combo1), 9, 1).unwrap();
        let sa = smooth_features(&build(&a0, &a1), 9, 1).unwrap();
        let sb = smooth_features(&build(&b0, &b1), 9, 1).unwrap();
        for ((l, a), b) in lhs.data().iter().zip(sa.data()).zip(sb.data()) {
            assert!((l - (alpha * a + beta * b)).abs() < 1e-12);
        }
    }

    #[test]
    fn similarity_singleton_row() {
        let m = similarity_distributions(&mat(1, 3, vec![0.3, -0.2, 0.9]), 1.0).unwrap();
        assert_eq!(m.row(0), &[1.0]);
        m.validate().unwrap();
    }

    #[test]
    fn similarity_orthogonal_rows_hand_softmax() {
        let m = similarity_distributions(&mat(2, 2, vec![1.0, 0.0, 0.0, 1.0]), 1.0).unwrap();
        let e = std::f64::consts::E;
        for i in 0..2 {
            assert!((m.row(i)[i] - e / (e + 1.0)).abs() < 1e-12);
            assert!((m.row(i)[1 - i] - 1.0 / (e + 1.0)).abs() < 1e-12);
        }
        m.validate().unwrap();
    }

    #[test]
    fn similarity_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_mat(&mut rng, 4, 3);
        let base = similarity_distributions(&f, 1.0).unwrap();
        // Power-of-two scaling is exact in floating point.
        for c in [0.5, 2.0, 1024.0] {
            let scaled = similarity_distributions(&f.map(|v| v * c), 1.0).unwrap();
            assert_eq!(base.probs(), scaled.probs());
        }
        // Arbitrary positive scaling agrees to rounding error.
        for c in [3.7, 0.013, 591.2] {
            let scaled = similarity_distributions(&f.map(|v| v * c), 1.0).unwrap();
            for (a, b) in base.probs().iter().zip(scaled.probs()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kl_zero_for_identical_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_mat(&mut rng, 4, 3);
        let m = similarity_distributions(&f, 1.0).unwrap();
        assert_eq!(relation_kl_loss(&m, &m).unwrap(), 0.0);
    }

    #[test]
    fn kl_non_negative_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let a = similarity_distributions(&random_mat(&mut rng, 4, 3), 1.0).unwrap();
            let b = similarity_distributions(&random_mat(&mut rng, 4, 3), 1.0).unwrap();
            let kl = relation_kl_loss(&a, &b).unwrap();
            assert!(kl >= -1e-12);
        }
    }

    #[test]
    fn kl_hand_value_two_point() {
        // Teacher softmax([1, 0]) against a uniform student, per row.
        let teacher = similarity_distributions(&mat(2, 2, vec![1.0, 0.0, 0.0, 1.0]), 1.0).unwrap();
        let student = SimilarityMap {
            positions: 2,
            probs: vec![0.5, 0.5, 0.5, 0.5],
            temperature: 1.0,
        };
        let kl = relation_kl_loss(&teacher, &student).unwrap();
        // Oracle: p = (e/(e+1), 1/(e+1)), per-row KL = sum p ln(p/0.5).
        let e = std::f64::consts::E;
        let (p1, p2) = (e / (e + 1.0), 1.0 / (e + 1.0));
        let per_row = p1 * (p1 / 0.5).ln() + p2 * (p2 / 0.5).ln();
        assert!((per_row - 0.110_944_071_671_727_35).abs() < 1e-15);
        assert!((kl - 2.0 * per_row).abs() < 1e-12);
    }

    #[test]
    fn kl_shape_mismatch_errors() {
        let a = similarity_distributions(&mat(2, 2, vec![1.0, 0.0, 0.0, 1.0]), 1.0).unwrap();
        let b = similarity_distributions(&mat(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]), 1.0)
            .unwrap();
        assert!(relation_kl_loss(&a, &b).is_err());
    }

    #[test]
    fn kl_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_mat(&mut rng, 5, 3);
        let g = random_mat(&mut rng, 5, 3);
        let base = relation_kl_loss(
            &similarity_distributions(&f, 1.0).unwrap(),
            &similarity_distributions(&g, 1.0).unwrap(),
        )
        .unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let permute = |t: &Tensor<f64>| {
            let mut data = Vec::with_capacity(15);
            for &i in &perm {
                data.extend_from_slice(t.row(i));
            }
            mat(5, 3, data)
        };
        let permuted = relation_kl_loss(
            &similarity_distributions(&permute(&f), 1.0).unwrap(),
            &similarity_distributions(&permute(&g), 1.0).unwrap(),
        )
        .unwrap();
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn task_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = random_mat(&mut rng, 3, 2);
        assert_eq!(task_loss(&f, &f).unwrap(), 0.0);
        let shifted = f.map(|v| v + 1.0);
        assert!((task_loss(&f, &shifted).unwrap() - 1.0).abs() < 1e-12);
        let q = random_mat(&mut rng, 3, 2);
        let oracle: f64 = f
            .data()
            .iter()
            .zip(q.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / 6.0;
        assert!((task_loss(&f, &q).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn l2_feature_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = random_mat(&mut rng, 2, 4);
        assert_eq!(l2_feature_loss(&f, &f).unwrap(), 0.0);
        assert!((l2_feature_loss(&f, &f.map(|v| v + 1.0)).unwrap() - 1.0).abs() < 1e-12);
        let q = random_mat(&mut rng, 2, 4);
        let oracle: f64 = f
            .data()
            .iter()
            .zip(q.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / 8.0;
        assert!((l2_feature_loss(&f, &q).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss(0.7, 123.0, 0.0), 0.7);
        assert_eq!(total_loss(1.0, 2.0, 0.5), 2.0);
        assert_eq!(total_loss(1.0, 2.0, 100.0), 201.0);
    }

    #[test]
    fn relation_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = 1e-4;
        for _ in 0..100 {
            let teacher = random_mat(&mut rng, 4, 3);
            let student = random_mat(&mut rng, 4, 3);
            let grad = relation_kl_grad(&teacher, &student, 1.0).unwrap();
            let t_map = similarity_distributions(&teacher, 1.0).unwrap();
            let mut fd = vec![0.0f64; 12];
            for idx in 0..12 {
                let mut plus = student.data().to_vec();
                plus[idx] += h;
                let mut minus = student.data().to_vec();
                minus[idx] -= h;
                let lp = relation_kl_loss(
                    &t_map,
                    &similarity_distributions(&mat(4, 3, plus), 1.0).unwrap(),
                )
                .unwrap();
                let lm = relation_kl_loss(
                    &t_map,
                    &similarity_distributions(&mat(4, 3, minus), 1.0).unwrap(),
                )
                .unwrap();
                fd[idx] = (lp - lm) / (2.0 * h);
            }
            let num: f64 = grad
                .data()
                .iter()
                .zip(&fd)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let den: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(
                num <= 1e-4 * den.max(1e-8),
                "relative gradient error {} vs {}",
                num,
                den
            );
        }
    }

    #[test]
    fn task_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = 1e-4;
        for _ in 0..100 {
            let f = random_mat(&mut rng, 4, 3);
            let q = random_mat(&mut rng, 4, 3);
            let grad = task_loss_grad(&f, &q).unwrap();
            for idx in 0..12 {
                let mut plus = q.data().to_vec();
                plus[idx] += h;
                let mut minus = q.data().to_vec();
                minus[idx] -= h;
                let fd = (task_loss(&f, &mat(4, 3, plus)).unwrap()
                    - task_loss(&f, &mat(4, 3, minus)).unwrap())
                    / (2.0 * h);
                let g = grad.data()[idx];
                assert!(
                    (g - fd).abs() <= 1e-4 * fd.abs().max(1e-8),
                    "{g} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn temperature_changes_sharpness() {
        let f = mat(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let sharp = similarity_distributions(&f, 0.1).unwrap();
        let soft = similarity_distributions(&f, 10.0).unwrap();
        assert!(sharp.row(0)[0] > soft.row(0)[0]);
    }
}
