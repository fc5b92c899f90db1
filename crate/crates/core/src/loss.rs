//! Gaussian class-conditional simplex (GCCS) objective.
//!
//! Each class `i` of a `D`-class problem is pulled toward the target
//! `N(μ_T·e_i, σ_T²·I_D)`: the centroids sit on the vertices of a regular
//! `(D−1)`-simplex. Per batch, the latent rows of each class are summarised
//! by their sample mean and (biased, shrunk) covariance; the loss for a
//! class is the closed-form divergence
//!
//! ```text
//! L_i = log(|Σ_T| / |Σ_Oi|) − D + tr(Σ_T⁻¹ Σ_Oi) + (μ_Ti − μ_Oi)ᵀ Σ_T⁻¹ (μ_Ti − μ_Oi)
//! ```
//!
//! (no ½ factor), plus `λ (K_i − 3)` where `K_i` is the mean fourth
//! standardized moment over the class's coordinates.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_LAMBDA: f64 = 0.2;
pub const DEFAULT_SHRINKAGE: f64 = 1e-3;

/// Minimum `μ_T/σ_T` ratio for the `D` targets to stay separable: `√(2D)`.
pub fn separability_bound(classes: usize) -> f64 {
    (2.0 * classes as f64).sqrt()
}

/// The `D` Gaussian targets centred on the scaled standard basis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetModel {
    pub classes: usize,
    pub mu: f64,
    pub sigma: f64,
}

impl TargetModel {
    pub fn new(classes: usize, mu: f64, sigma: f64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {classes}")));
        }
        if !(mu >= 0.0) || !mu.is_finite() {
            return Err(Error::config(format!("mu_T must be finite and >= 0, got {mu}")));
        }
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::config(format!("sigma_T must be finite and > 0, got {sigma}")));
        }
        let target = Self { classes, mu, sigma };
        if !target.is_separable() {
            log::warn!(
                "mu_T/sigma_T = {:.4} does not exceed sqrt(2D) = {:.4}; target classes will overlap",
                mu / sigma,
                separability_bound(classes)
            );
        }
        Ok(target)
    }

    pub fn is_separable(&self) -> bool {
        self.mu / self.sigma > separability_bound(self.classes)
    }

    /// `μ_T · e_class`.
    pub fn centroid(&self, class: usize) -> Vec<f64> {
        let mut c = vec![0.0; self.classes];
        c[class] = self.mu;
        c
    }

    /// Euclidean distance between two centroids (`μ_T√2` for distinct classes).
    pub fn centroid_distance(&self, a: usize, b: usize) -> f64 {
        let (ca, cb) = (self.centroid(a), self.centroid(b));
        ca.iter()
            .zip(&cb)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    /// Index of the nearest centroid (lowest index on ties).
    pub fn nearest_centroid(&self, z: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for i in 0..self.classes {
            let c = self.centroid(i);
            let d: f64 = z.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        best
    }

    fn variance(&self) -> f64 {
        self.sigma * self.sigma
    }
}

/// Batch statistics of the latent rows belonging to one class. All fields
/// are tape variables and remain differentiable with respect to `Z`.
#[derive(Debug, Clone)]
pub struct ClassStats {
    pub class: usize,
    pub count: usize,
    /// Rows minus the class mean, `n_i × D`.
    pub centered: Var,
    /// `μ_Oi`, length `D`.
    pub mean: Var,
    /// `Σ_Oi = (1/n_i) CᵀC + δI`, `D × D`.
    pub covariance: Var,
    /// `√diag(Σ_Oi)`, length `D`.
    pub std: Var,
}

#[derive(Debug, Clone)]
pub struct ClassBatchStats {
    pub dim: usize,
    pub batch_size: usize,
    pub shrinkage: f64,
    /// Only classes present in the batch, ascending by class index.
    pub classes: Vec<ClassStats>,
}

impl ClassBatchStats {
    pub fn get(&self, class: usize) -> Option<&ClassStats> {
        self.classes.iter().find(|c| c.class == class)
    }
}

fn check_labels(z: &Tensor, labels: &[usize], classes: usize) -> Result<()> {
    if z.rank() != 2 || z.rows() != labels.len() {
        return Err(Error::Dimension {
            op: "latent batch vs labels",
            lhs: z.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

/// Per-class sample mean and biased covariance (plus `δ·I`) of `z`.
///
/// Every class present in the batch must have at least two rows.
pub fn class_stats(
    tape: &mut Tape,
    z: Var,
    labels: &[usize],
    classes: usize,
    shrinkage: f64,
) -> Result<ClassBatchStats> {
    if !(shrinkage >= 0.0) {
        return Err(Error::config(format!("shrinkage must be >= 0, got {shrinkage}")));
    }
    check_labels(tape.value(z), labels, classes)?;
    let dim = tape.value(z).cols();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (row, &y) in labels.iter().enumerate() {
        members[y].push(row);
    }
    let mut out = Vec::new();
    for (class, rows) in members.iter().enumerate() {
        match rows.len() {
            0 => continue,
            1 => return Err(Error::BatchComposition { class, count: 1 }),
            _ => {}
        }
        let n = rows.len() as f64;
        let zi = tape.gather_rows(z, rows)?;
        let mean = tape.mean(zi, 0)?;
        let centered = tape.sub_row(zi, mean)?;
        let ct = tape.transpose(centered)?;
        let scatter = tape.matmul(ct, centered)?;
        let mut covariance = tape.scale(scatter, 1.0 / n);
        if shrinkage > 0.0 {
            let loading = tape.constant(Tensor::identity(dim).map(|v| v * shrinkage));
            covariance = tape.add(covariance, loading)?;
        }
        let var = tape.diag(covariance)?;
        let std = tape.sqrt(var)?;
        out.push(ClassStats {
            class,
            count: rows.len(),
            centered,
            mean,
            covariance,
            std,
        });
    }
    Ok(ClassBatchStats {
        dim,
        batch_size: labels.len(),
        shrinkage,
        classes: out,
    })
}

/// Divergence of one class's batch Gaussian from its target.
pub fn kl_term(tape: &mut Tape, stats: &ClassStats, target: &TargetModel) -> Result<Var> {
    let dim = tape.value(stats.mean).numel();
    if dim != target.classes {
        return Err(Error::Dimension {
            op: "kl_term latent width vs target classes",
            lhs: vec![dim],
            rhs: vec![target.classes],
        });
    }
    let var_t = target.variance();
    let d = dim as f64;
    let logdet_obs = tape.logdet(stats.covariance).map_err(|e| match e {
        Error::Numeric(_) => Error::numeric(format!(
            "class {} covariance is not positive definite; increase the shrinkage delta",
            stats.class
        )),
        other => other,
    })?;
    // log|Σ_T| − log|Σ_Oi| − D
    let neg_logdet = tape.neg(logdet_obs);
    let log_ratio = tape.offset(neg_logdet, d * var_t.ln() - d);
    // tr(Σ_T⁻¹ Σ_Oi)
    let diag = tape.diag(stats.covariance)?;
    let trace = tape.sum_all(diag);
    let trace = tape.scale(trace, 1.0 / var_t);
    // (μ_Ti − μ_Oi)ᵀ Σ_T⁻¹ (μ_Ti − μ_Oi)
    let centroid = tape.constant(Tensor::vector(target.centroid(stats.class)));
    let diff = tape.sub(centroid, stats.mean)?;
    let sq = tape.square(diff);
    let quad = tape.sum_all(sq);
    let quad = tape.scale(quad, 1.0 / var_t);
    let acc = tape.add(log_ratio, trace)?;
    tape.add(acc, quad)
}

/// Mean over coordinates of the per-coordinate fourth standardized moment,
/// using the class's (shrunk) covariance diagonal as the scale.
pub fn kurtosis_term(tape: &mut Tape, stats: &ClassStats) -> Result<Var> {
    if stats.count < 2 {
        return Err(Error::BatchComposition {
            class: stats.class,
            count: stats.count,
        });
    }
    if let Some(j) = tape.value(stats.std).data().iter().position(|&s| !(s > 0.0)) {
        return Err(Error::numeric(format!(
            "class {} coordinate {j} has zero spread; kurtosis needs shrinkage delta > 0",
            stats.class
        )));
    }
    let standardized = tape.div_row(stats.centered, stats.std)?;
    let p4 = tape.pow4(standardized);
    tape.mean_all(p4)
}

/// Loss terms for one class, as plain values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassTerms {
    pub class: usize,
    pub count: usize,
    pub kl: f64,
    pub kurtosis: f64,
}

/// Evaluated GCCS objective. `total` is the differentiable scalar.
#[derive(Debug, Clone)]
pub struct GccsLossValue {
    pub total: Var,
    pub value: f64,
    pub lambda: f64,
    pub terms: Vec<ClassTerms>,
}

impl GccsLossValue {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            lambda: self.lambda,
            total: self.value,
            terms: self.terms.clone(),
        }
    }
}

/// Serializable copy of a GCCS loss evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lambda: f64,
    pub total: f64,
    pub terms: Vec<ClassTerms>,
}

impl LossBreakdown {
    /// `Σ_i [L_i + λ(K_i − 3)]`, summed in class order.
    pub fn resum(&self) -> f64 {
        self.terms
            .iter()
            .fold(0.0, |acc, t| acc + class_objective(t.kl, t.kurtosis, self.lambda))
    }
}

fn class_objective(kl: f64, kurtosis: f64, lambda: f64) -> f64 {
    kl + (kurtosis - 3.0) * lambda
}

/// `Σ_i [L_i + λ(K_i − 3)]` over the classes present in the batch.
pub fn gccs_loss(
    tape: &mut Tape,
    z: Var,
    labels: &[usize],
    target: &TargetModel,
    lambda: f64,
    shrinkage: f64,
) -> Result<GccsLossValue> {
    let stats = class_stats(tape, z, labels, target.classes, shrinkage)?;
    let mut total = tape.constant(Tensor::scalar(0.0));
    let mut terms = Vec::with_capacity(stats.classes.len());
    for cs in &stats.classes {
        let kl = kl_term(tape, cs, target)?;
        let kurt = kurtosis_term(tape, cs)?;
        let excess = tape.offset(kurt, -3.0);
        let weighted = tape.scale(excess, lambda);
        let term = tape.add(kl, weighted)?;
        total = tape.add(total, term)?;
        terms.push(ClassTerms {
            class: cs.class,
            count: cs.count,
            kl: tape.value(kl).item(),
            kurtosis: tape.value(kurt).item(),
        });
    }
    let value = tape.value(total).item();
    if !value.is_finite() {
        return Err(Error::numeric(format!("GCCS loss is not finite ({value})")));
    }
    Ok(GccsLossValue {
        total,
        value,
        lambda,
        terms,
    })
}

/// Mean softmax cross-entropy treating each row of `z` as logits.
pub fn cross_entropy_loss(tape: &mut Tape, z: Var, labels: &[usize]) -> Result<Var> {
    let zt = tape.value(z);
    check_labels(zt, labels, zt.cols())?;
    if labels.is_empty() {
        return Err(Error::Data("cross-entropy of an empty batch".into()));
    }
    let lse = tape.logsumexp_rows(z)?;
    let picked = tape.pick(z, labels)?;
    let nll = tape.sub(lse, picked)?;
    tape.mean(nll, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn kl_of(mean: Vec<f64>, cov: Tensor, target: &TargetModel, class: usize) -> f64 {
        let mut tape = Tape::new();
        let n = mean.len();
        let stats = ClassStats {
            class,
            count: 2,
            centered: tape.constant(Tensor::zeros(&[2, n])),
            mean: tape.constant(Tensor::vector(mean)),
            covariance: tape.constant(cov),
            std: tape.constant(Tensor::full(&[n], 1.0)),
        };
        let v = kl_term(&mut tape, &stats, target).unwrap();
        tape.value(v).item()
    }

    #[test]
    fn separability_bound_values() {
        assert_eq!(separability_bound(2), 2.0);
        assert!((separability_bound(10) - 20f64.sqrt()).abs() < 1e-15);
        assert!((separability_bound(10) - 4.4721).abs() < 1e-4);
        assert!(TargetModel::new(10, 70.0, 1.0).unwrap().is_separable());
        assert!(!TargetModel::new(10, 0.5, 1.0).unwrap().is_separable());
    }

    #[test]
    fn target_model_rejects_bad_parameters() {
        assert!(TargetModel::new(1, 1.0, 1.0).is_err());
        assert!(TargetModel::new(3, -1.0, 1.0).is_err());
        assert!(TargetModel::new(3, 1.0, 0.0).is_err());
    }

    #[test]
    fn centroids_form_a_regular_simplex() {
        for d in [2, 3, 10] {
            let t = TargetModel::new(d, 70.0, 1.0).unwrap();
            for a in 0..d {
                for b in (a + 1)..d {
                    assert!((t.centroid_distance(a, b) - 70.0 * 2f64.sqrt()).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn class_stats_two_point_example() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap());
        let s = class_stats(&mut tape, z, &[0, 0], 2, 0.0).unwrap();
        let c = s.get(0).unwrap();
        assert_eq!(tape.value(c.mean).data(), &[1.0, 0.0]);
        assert_eq!(tape.value(c.covariance).data(), &[1.0, 0.0, 0.0, 0.0]);
        assert!(s.get(1).is_none());
    }

    #[test]
    fn class_stats_identical_rows_give_shrinkage() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::from_rows(&vec![vec![3.0, -1.0, 2.0]; 4]).unwrap());
        let s = class_stats(&mut tape, z, &[1, 1, 1, 1], 3, 1e-3).unwrap();
        let cov = tape.value(s.get(1).unwrap().covariance);
        let expected = Tensor::identity(3).map(|v| v * 1e-3);
        assert_eq!(cov, &expected);
    }

    #[test]
    fn class_stats_rejects_singleton_class() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[3, 2]));
        let err = class_stats(&mut tape, z, &[0, 0, 1], 2, 1e-3).unwrap_err();
        assert!(matches!(err, Error::BatchComposition { class: 1, count: 1 }));
    }

    #[test]
    fn class_stats_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mu = 5.0;
        let n = 10_000;
        let d = 3;
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            for j in 0..d {
                let e: f64 = StandardNormal.sample(&mut rng);
                data.push(e + if j == 1 { mu } else { 0.0 });
            }
        }
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::matrix(n, d, data).unwrap());
        let s = class_stats(&mut tape, z, &vec![1; n], d, 0.0).unwrap();
        let c = s.get(1).unwrap();
        let mean = tape.value(c.mean);
        for (j, &m) in mean.data().iter().enumerate() {
            let expect = if j == 1 { mu } else { 0.0 };
            assert!((m - expect).abs() < 0.1);
        }
        let cov = tape.value(c.covariance);
        let eye = Tensor::identity(d);
        for (a, b) in cov.data().iter().zip(eye.data()) {
            assert!((a - b).abs() < 0.1);
        }
    }

    #[test]
    fn kl_examples() {
        let t = TargetModel::new(2, 70.0, 1.0).unwrap();
        // exact match
        let v = kl_of(t.centroid(0), Tensor::identity(2), &t, 0);
        assert!(v.abs() < 1e-9);
        // Σ_O = 2I: log(1/4) − 2 + 4
        let v = kl_of(t.centroid(0), Tensor::identity(2).map(|x| 2.0 * x), &t, 0);
        assert!((v - 0.6137).abs() < 1e-4, "{v}");
        assert!((v - (0.25f64.ln() + 2.0)).abs() < 1e-12);
        // only the quadratic term survives
        let v = kl_of(vec![70.0 - 3.0, 0.0], Tensor::identity(2), &t, 0);
        assert!((v - 9.0).abs() < 1e-9, "{v}");
    }

    #[test]
    fn kl_rejects_non_positive_definite() {
        let t = TargetModel::new(2, 1.0, 1.0).unwrap();
        let mut tape = Tape::new();
        let stats = ClassStats {
            class: 0,
            count: 2,
            centered: tape.constant(Tensor::zeros(&[2, 2])),
            mean: tape.constant(Tensor::vector(vec![0.0, 0.0])),
            covariance: tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap()),
            std: tape.constant(Tensor::full(&[2], 1.0)),
        };
        let err = kl_term(&mut tape, &stats, &t).unwrap_err();
        assert!(err.to_string().contains("shrinkage"), "{err}");
    }

    #[test]
    fn kl_is_nonnegative_and_grows_with_mean_offset() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = TargetModel::new(3, 4.0, 1.5).unwrap();
        for _ in 0..200 {
            // random SPD covariance A Aᵀ + 0.1 I
            let a: Vec<f64> = (0..9).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let a = Tensor::matrix(3, 3, a).unwrap();
            let mut cov = Tensor::zeros(&[3, 3]);
            for i in 0..3 {
                for j in 0..3 {
                    let s: f64 = (0..3).map(|k| a.at(i, k) * a.at(j, k)).sum();
                    cov.data_mut()[i * 3 + j] = s + if i == j { 0.1 } else { 0.0 };
                }
            }
            let mean: Vec<f64> = (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect();
            assert!(kl_of(mean, cov, &t, 1) >= -1e-9);

            // perturbation raises the loss by exactly Δμᵀ Δμ / σ_T² from the optimum
            let delta: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm2: f64 = delta.iter().map(|v| v * v).sum();
            if norm2.sqrt() < 0.1 {
                continue;
            }
            let base_cov = Tensor::identity(3).map(|v| v * 1.5 * 1.5);
            let moved: Vec<f64> = t.centroid(1).iter().zip(&delta).map(|(c, d)| c + d).collect();
            let v = kl_of(moved, base_cov, &t, 1);
            assert!(v >= norm2 / 2.25 - 1e-9);
        }
    }

    fn kurtosis_of(coord_values: &[f64], dim: usize, delta: f64) -> Result<f64> {
        let n = coord_values.len();
        let mut data = Vec::with_capacity(n * dim);
        for &v in coord_values {
            data.extend(std::iter::repeat(v).take(dim));
        }
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::matrix(n, dim, data)?);
        let s = class_stats(&mut tape, z, &vec![0; n], dim.max(2), delta)?;
        let k = kurtosis_term(&mut tape, s.get(0).unwrap())?;
        Ok(tape.value(k).item())
    }

    #[test]
    fn kurtosis_examples() {
        let k = kurtosis_of(&[-1.0, 1.0], 2, 0.0).unwrap();
        assert!((k - 1.0).abs() < 1e-12, "{k}");
        let k = kurtosis_of(&[-3.0, -1.0, 1.0, 3.0], 2, 0.0).unwrap();
        assert!((k - 1.64).abs() < 1e-12, "{k}");
        assert!(matches!(kurtosis_of(&[2.0, 2.0], 2, 0.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn kurtosis_of_standard_normal_is_three() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 100_000;
        let d = 2;
        let data: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::matrix(n, d, data).unwrap());
        let s = class_stats(&mut tape, z, &vec![0; n], d, 0.0).unwrap();
        let k = kurtosis_term(&mut tape, s.get(0).unwrap()).unwrap();
        assert!((tape.value(k).item() - 3.0).abs() < 0.1);
    }

    #[test]
    fn gccs_total_decomposes_into_class_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let target = TargetModel::new(3, 10.0, 1.0).unwrap();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for class in 0..3 {
            for _ in 0..8 {
                let c = target.centroid(class);
                rows.push(c.iter().map(|v| v + rng_val(&mut rng)).collect::<Vec<_>>());
                labels.push(class);
            }
        }
        let z = Tensor::from_rows(&rows).unwrap();
        for lambda in [0.0, 0.2] {
            let mut tape = Tape::new();
            let zv = tape.constant(z.clone());
            let l = gccs_loss(&mut tape, zv, &labels, &target, lambda, 1e-3).unwrap();
            let sum_kl: f64 = l.terms.iter().map(|t| t.kl).sum();
            let sum_k: f64 = l.terms.iter().map(|t| t.kurtosis - 3.0).sum();
            assert!((l.value - (sum_kl + lambda * sum_k)).abs() < 1e-9);
            assert_eq!(l.breakdown().resum().to_bits(), l.value.to_bits());
            if lambda == 0.0 {
                assert!((l.value - sum_kl).abs() < 1e-12);
            }
        }
    }

    fn rng_val(rng: &mut ChaCha8Rng) -> f64 {
        use rand::Rng;
        rng.gen_range(-1.0..1.0)
    }

    #[test]
    fn gccs_zero_when_statistics_match_target() {
        // {±√3, 0, 0, 0, 0} per coordinate: mean 0, variance 1, fourth
        // moment 3. The two coordinates have disjoint supports, so the
        // cross-covariance is zero and Σ_O = I exactly.
        let a = 3f64.sqrt();
        let pattern0 = [a, -a, 0.0, 0.0, 0.0, 0.0];
        let pattern1 = [0.0, 0.0, a, -a, 0.0, 0.0];
        let target = TargetModel::new(2, 5.0, 1.0).unwrap();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for class in 0..2 {
            let c = target.centroid(class);
            for k in 0..pattern0.len() {
                rows.push(vec![c[0] + pattern0[k], c[1] + pattern1[k]]);
                labels.push(class);
            }
        }
        let mut tape = Tape::new();
        let zv = tape.constant(Tensor::from_rows(&rows).unwrap());
        let l = gccs_loss(&mut tape, zv, &labels, &target, 0.2, 0.0).unwrap();
        assert!(l.value.abs() < 1e-9, "{:?}", l);
    }

    #[test]
    fn absent_classes_contribute_nothing() {
        let target = TargetModel::new(4, 3.0, 1.0).unwrap();
        let z = Tensor::from_rows(&[
            vec![3.1, 0.0, 0.2, -0.1],
            vec![2.9, 0.3, 0.0, 0.1],
            vec![3.0, -0.2, -0.1, 0.0],
        ])
        .unwrap();
        let mut tape = Tape::new();
        let zv = tape.constant(z);
        let l = gccs_loss(&mut tape, zv, &[0, 0, 0], &target, 0.2, 1e-3).unwrap();
        assert_eq!(l.terms.len(), 1);
        assert_eq!(l.terms[0].class, 0);
    }

    fn random_batch(rng: &mut ChaCha8Rng, d: usize, per_class: usize, mu: f64) -> (Tensor, Vec<usize>) {
        use rand::Rng;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for class in 0..d {
            for _ in 0..per_class {
                rows.push(
                    (0..d)
                        .map(|j| if j == class { mu } else { 0.0 } + rng.gen_range(-2.0..2.0))
                        .collect::<Vec<_>>(),
                );
                labels.push(class);
            }
        }
        (Tensor::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn gccs_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for d in [2, 3, 10] {
            let target = TargetModel::new(d, 4.0, 1.0).unwrap();
            let per_class = if d == 10 { 12 } else { 5 };
            let (z, labels) = random_batch(&mut rng, d, per_class, 4.0);
            let f = |t: &mut Tape, x: Var| -> Result<Var> {
                Ok(gccs_loss(t, x, &labels, &target, 0.2, 1e-3)?.total)
            };
            let r = grad_check(f, &z, 1e-5).unwrap();
            assert!(r.max_rel_error < 1e-4, "D={d}: {r:?}");
        }
    }

    #[test]
    fn gccs_is_permutation_equivariant() {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let target = TargetModel::new(3, 6.0, 1.0).unwrap();
        let (z, labels) = random_batch(&mut rng, 3, 6, 6.0);
        let mut perm: Vec<usize> = (0..labels.len()).collect();
        perm.shuffle(&mut rng);
        let zp = z.select_rows(&perm);
        let lp: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let eval = |z: Tensor, l: &[usize]| {
            let mut tape = Tape::new();
            let zv = tape.constant(z);
            gccs_loss(&mut tape, zv, l, &target, 0.2, 1e-3).unwrap().value
        };
        let a = eval(z, &labels);
        let b = eval(zp, &lp);
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[1, 10]));
        let l = cross_entropy_loss(&mut tape, z, &[3]).unwrap();
        assert!((tape.value(l).item() - 10f64.ln()).abs() < 1e-12);

        let z = tape.constant(Tensor::from_rows(&[vec![800.0, 0.0, 0.0]]).unwrap());
        let l = cross_entropy_loss(&mut tape, z, &[0]).unwrap();
        assert!(tape.value(l).item().abs() < 1e-12);

        let rows = [vec![0.3, -1.2, 2.0], vec![1.5, 0.5, -0.5]];
        let labels = [2usize, 1];
        let z = tape.constant(Tensor::from_rows(&rows).unwrap());
        let l = cross_entropy_loss(&mut tape, z, &labels).unwrap();
        let direct: f64 = rows
            .iter()
            .zip(labels)
            .map(|(r, y)| {
                let s: f64 = r.iter().map(|v| v.exp()).sum();
                -(r[y].exp() / s).ln()
            })
            .sum::<f64>()
            / 2.0;
        assert!((tape.value(l).item() - direct).abs() < 1e-12);
    }
}
