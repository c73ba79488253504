//! Infinitesimal-jackknife variance of the ensemble mean and confidence
//! intervals on the mean scale.

mod quantile;

pub use quantile::{normal_cdf, normal_quantile};

use serde::Serialize;

use crate::error::{EsmError, Result};
use crate::esm::{average, EnsembleModel, Membership};
use crate::expfam::FamilySpec;
use crate::matrix::Matrix;

/// Components of the variance estimate at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceEstimate {
    pub uncorrected: f64,
    /// Monte Carlo term subtracted from `uncorrected`; never negative.
    pub correction: f64,
    pub corrected_raw: f64,
    /// `corrected_raw` floored at zero.
    pub corrected: f64,
    pub clamped_negative: bool,
    /// Per-observation covariances `V̂_i`.
    pub v_hat: Vec<f64>,
}

/// Neumaier-compensated running sum.
#[derive(Debug, Default, Clone, Copy)]
struct Sum {
    total: f64,
    carry: f64,
}

impl Sum {
    fn add(&mut self, x: f64) {
        let t = self.total + x;
        if self.total.abs() >= x.abs() {
            self.carry += (self.total - t) + x;
        } else {
            self.carry += (x - t) + self.total;
        }
        self.total = t;
    }

    fn value(self) -> f64 {
        self.total + self.carry
    }
}

/// Membership-dependent quantities shared by every evaluation point of one
/// ensemble.
#[derive(Debug, Clone)]
pub struct VarianceContext {
    b: usize,
    n: usize,
    /// `n(n-1)/(n-r)^2`.
    factor: f64,
    column_means: Vec<f64>,
    /// Membership stored column-major: entry `i * b + j`.
    columns: Vec<u8>,
}

impl VarianceContext {
    pub fn new(membership: &Membership, n: usize, r: usize) -> Result<Self> {
        let b = membership.rows();
        if b < 2 {
            return Err(EsmError::Inference(format!(
                "variance needs at least 2 subsamples, got {b}"
            )));
        }
        if membership.cols() != n {
            return Err(EsmError::Dimension {
                expected: n,
                got: membership.cols(),
            });
        }
        if r == 0 || r >= n {
            return Err(EsmError::Inference(format!("need 1 <= r < n, got r={r}, n={n}")));
        }
        if let Some(j) = membership.row_sums().iter().position(|&s| s != r) {
            return Err(EsmError::Inference(format!(
                "membership row {j} does not sum to r={r}"
            )));
        }
        let mut columns = vec![0u8; b * n];
        for j in 0..b {
            for (i, &v) in membership.row(j).iter().enumerate() {
                columns[i * b + j] = v;
            }
        }
        let (nf, rf) = (n as f64, r as f64);
        Ok(Self {
            b,
            n,
            factor: nf * (nf - 1.0) / ((nf - rf) * (nf - rf)),
            column_means: membership.column_means(),
            columns,
        })
    }

    pub fn estimate(&self, per_model: &[f64]) -> Result<VarianceEstimate> {
        let b = self.b;
        if per_model.len() != b {
            return Err(EsmError::Dimension {
                expected: b,
                got: per_model.len(),
            });
        }
        if per_model.iter().any(|v| !v.is_finite()) {
            return Err(EsmError::Inference("non-finite member prediction".into()));
        }
        // equal predictions must centre to exactly zero
        let mean = if per_model.iter().all(|&f| f == per_model[0]) {
            per_model[0]
        } else {
            average(per_model)
        };
        let centered: Vec<f64> = per_model.iter().map(|f| f - mean).collect();
        let bf = b as f64;
        let mut z = vec![0.0; b];
        let mut v_hat = Vec::with_capacity(self.n);
        let mut sum_v2 = Sum::default();
        let mut sum_dev2 = Sum::default();
        for (column, &jbar) in self.columns.chunks_exact(b).zip(&self.column_means) {
            let mut v = Sum::default();
            for ((zj, &member), d) in z.iter_mut().zip(column).zip(&centered) {
                *zj = (member as f64 - jbar) * d;
                v.add(*zj);
            }
            let vi = v.value() / bf;
            let mut dev = Sum::default();
            for zj in &z {
                dev.add((zj - vi) * (zj - vi));
            }
            sum_v2.add(vi * vi);
            sum_dev2.add(dev.value());
            v_hat.push(vi);
        }
        let uncorrected = self.factor * sum_v2.value();
        let correction = self.factor * sum_dev2.value() / (bf * (bf - 1.0));
        let corrected_raw = uncorrected - correction;
        Ok(VarianceEstimate {
            uncorrected,
            correction,
            corrected_raw,
            corrected: corrected_raw.max(0.0),
            clamped_negative: corrected_raw < 0.0,
            v_hat,
        })
    }
}

/// Bias-corrected infinitesimal-jackknife variance of the ensemble mean
/// from member predictions `per_model` and the B×n membership matrix.
pub fn ij_variance(
    per_model: &[f64],
    membership: &Membership,
    n: usize,
    r: usize,
) -> Result<VarianceEstimate> {
    VarianceContext::new(membership, n, r)?.estimate(per_model)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InferenceResult {
    /// Ensemble mean on the canonical scale.
    pub fhat: f64,
    pub se_uncorrected: f64,
    pub se_corrected: f64,
    pub clamped_negative: bool,
    pub ci_lower_mean: f64,
    pub ci_upper_mean: f64,
    pub alpha: f64,
    pub z_value: f64,
}

impl InferenceResult {
    pub fn mean_estimate(&self, spec: &FamilySpec) -> f64 {
        spec.mean(self.fhat)
    }

    pub fn width(&self) -> f64 {
        self.ci_upper_mean - self.ci_lower_mean
    }

    pub fn contains(&self, mean: f64) -> bool {
        self.ci_lower_mean <= mean && mean <= self.ci_upper_mean
    }
}

/// `z_{1-α/2}`.
pub fn critical_value(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(EsmError::config("alpha", format!("{alpha} is outside (0, 1)")));
    }
    normal_quantile(1.0 - alpha / 2.0)
}

/// Interval `[ψ′(f̂ − zσ̂), ψ′(f̂ + zσ̂)]` from a finished variance estimate.
pub fn interval(
    spec: &FamilySpec,
    fhat: f64,
    variance: &VarianceEstimate,
    alpha: f64,
) -> Result<InferenceResult> {
    let z = critical_value(alpha)?;
    let se_corrected = variance.corrected.sqrt();
    let half = z * se_corrected;
    Ok(InferenceResult {
        fhat,
        se_uncorrected: variance.uncorrected.sqrt(),
        se_corrected,
        clamped_negative: variance.clamped_negative,
        ci_lower_mean: spec.psi_prime(fhat - half)?,
        ci_upper_mean: spec.psi_prime(fhat + half)?,
        alpha,
        z_value: z,
    })
}

pub fn confidence_interval(model: &EnsembleModel, x: &[f64], alpha: f64) -> Result<InferenceResult> {
    critical_value(alpha)?;
    let (fhat, per_model) = model.predict(x)?;
    let variance = ij_variance(&per_model, &model.membership, model.design.n(), model.design.r())?;
    interval(&model.spec, fhat, &variance, alpha)
}

/// One interval per row of `x`.
pub fn confidence_intervals(
    model: &EnsembleModel,
    x: &Matrix,
    alpha: f64,
) -> Result<Vec<InferenceResult>> {
    critical_value(alpha)?;
    let context = VarianceContext::new(&model.membership, model.design.n(), model.design.r())?;
    let predictions = model.predict_all(x)?;
    intervals_from_predictions(&model.spec, &context, &predictions, alpha)
}

/// Intervals from a B×m matrix of member predictions.
pub fn intervals_from_predictions(
    spec: &FamilySpec,
    context: &VarianceContext,
    predictions: &Matrix,
    alpha: f64,
) -> Result<Vec<InferenceResult>> {
    let (b, m) = (predictions.rows(), predictions.cols());
    let mut column = vec![0.0; b];
    (0..m)
        .map(|k| {
            for (j, v) in column.iter_mut().enumerate() {
                *v = predictions.row(j)[k];
            }
            let variance = context.estimate(&column)?;
            interval(spec, average(&column), &variance, alpha)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::esm::{draw_subsamples, SubsampleDesign};
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng;

    /// Direct transcription: explicit Z matrix, plain loops.
    fn oracle(per_model: &[f64], design: &SubsampleDesign) -> (f64, f64) {
        let (n, r, b) = (design.n(), design.r(), design.len());
        let j: Vec<Vec<f64>> = design
            .indices()
            .iter()
            .map(|list| (0..n).map(|i| if list.contains(&i) { 1.0 } else { 0.0 }).collect())
            .collect();
        let fbar = per_model.iter().sum::<f64>() / b as f64;
        let jdot: Vec<f64> = (0..n).map(|i| (0..b).map(|k| j[k][i]).sum::<f64>() / b as f64).collect();
        let z: Vec<Vec<f64>> = (0..b)
            .map(|k| (0..n).map(|i| (j[k][i] - jdot[i]) * (per_model[k] - fbar)).collect())
            .collect();
        let v: Vec<f64> = (0..n).map(|i| (0..b).map(|k| z[k][i]).sum::<f64>() / b as f64).collect();
        let factor = (n * (n - 1)) as f64 / ((n - r) * (n - r)) as f64;
        let unc = factor * v.iter().map(|x| x * x).sum::<f64>();
        let mut dev = 0.0;
        for i in 0..n {
            for zk in &z {
                dev += (zk[i] - v[i]).powi(2);
            }
        }
        (unc, factor * dev / (b * (b - 1)) as f64)
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn hand_computed_complete_design() {
        let design = SubsampleDesign::complete(3, 2).unwrap();
        let est = ij_variance(&[0.5, 1.0, 1.5], &design.membership(), 3, 2).unwrap();
        let expected_v = [-1.0 / 6.0, 0.0, 1.0 / 6.0];
        for (v, e) in est.v_hat.iter().zip(expected_v) {
            assert!((v - e).abs() < 1e-15);
        }
        assert!((est.uncorrected - 1.0 / 3.0).abs() < 1e-12);
        assert!((est.correction - 1.0 / 6.0).abs() < 1e-12);
        assert!((est.corrected - 1.0 / 6.0).abs() < 1e-12);
        assert!(!est.clamped_negative);
    }

    #[test]
    fn equal_predictions_give_zero() {
        let design = SubsampleDesign::complete(5, 2).unwrap();
        let est = ij_variance(&[0.7; 10], &design.membership(), 5, 2).unwrap();
        assert_eq!((est.uncorrected, est.correction, est.corrected), (0.0, 0.0, 0.0));
    }

    #[test]
    fn input_errors() {
        let design = SubsampleDesign::from_indices(4, 2, vec![vec![0, 1]]).unwrap();
        assert!(matches!(
            ij_variance(&[1.0], &design.membership(), 4, 2),
            Err(EsmError::Inference(_))
        ));
        let design = SubsampleDesign::complete(4, 2).unwrap();
        assert!(ij_variance(&[1.0; 5], &design.membership(), 4, 2).is_err());
        assert!(ij_variance(&[1.0; 6], &design.membership(), 4, 3).is_err());
        assert!(critical_value(0.0).is_err());
        assert!(critical_value(1.0).is_err());
    }

    #[test]
    fn matches_oracle_on_complete_designs() {
        let mut rng = stream(404, 0);
        for n in 3..=7 {
            for r in 1..=3.min(n - 1) {
                let design = SubsampleDesign::complete(n, r).unwrap();
                for _ in 0..5 {
                    let per_model: Vec<f64> =
                        (0..design.len()).map(|_| rng.gen_range(-3.0..3.0)).collect();
                    let est = ij_variance(&per_model, &design.membership(), n, r).unwrap();
                    let (unc, corr) = oracle(&per_model, &design);
                    assert!(close(est.uncorrected, unc), "n={n} r={r}");
                    assert!(close(est.correction, corr), "n={n} r={r}");
                    assert_eq!(est.corrected_raw, est.uncorrected - est.correction);
                }
            }
        }
    }

    #[test]
    fn bernoulli_interval_at_zero() {
        let variance = VarianceEstimate {
            uncorrected: 1.0,
            correction: 0.0,
            corrected_raw: 1.0,
            corrected: 1.0,
            clamped_negative: false,
            v_hat: Vec::new(),
        };
        let ci = interval(&FamilySpec::Bernoulli, 0.0, &variance, 0.05).unwrap();
        assert!((ci.ci_lower_mean - 0.12356).abs() < 1e-4);
        assert!((ci.ci_upper_mean - 0.87644).abs() < 1e-4);
        let zero = VarianceEstimate {
            corrected: 0.0,
            corrected_raw: -0.2,
            clamped_negative: true,
            ..variance
        };
        let ci = interval(&FamilySpec::Poisson, 0.4, &zero, 0.05).unwrap();
        assert_eq!(ci.ci_lower_mean, ci.ci_upper_mean);
        assert_eq!(ci.ci_lower_mean, 0.4f64.exp());
        assert!(ci.clamped_negative);
    }

    fn random_case(seed: u64) -> (Vec<f64>, SubsampleDesign) {
        let mut rng = stream(seed, 0);
        let n = rng.gen_range(4..40);
        let r = rng.gen_range(1..n);
        let b = rng.gen_range(2..30);
        let design = draw_subsamples(n, r, b, &mut rng).unwrap();
        let per_model = (0..b).map(|_| rng.gen_range(-3.0..3.0)).collect();
        (per_model, design)
    }

    proptest! {
        #[test]
        fn shift_invariant(seed in any::<u64>(), c in -5.0f64..5.0) {
            let (per_model, design) = random_case(seed);
            let m = design.membership();
            let base = ij_variance(&per_model, &m, design.n(), design.r()).unwrap();
            let shifted: Vec<f64> = per_model.iter().map(|f| f + c).collect();
            let moved = ij_variance(&shifted, &m, design.n(), design.r()).unwrap();
            let tol = 1e-9 * (1.0 + base.uncorrected + base.correction);
            prop_assert!((base.uncorrected - moved.uncorrected).abs() < tol);
            prop_assert!((base.correction - moved.correction).abs() < tol);
            prop_assert!((base.corrected - moved.corrected).abs() < tol);
        }

        #[test]
        fn scale_equivariant(seed in any::<u64>(), s in -4.0f64..4.0) {
            let (per_model, design) = random_case(seed);
            let m = design.membership();
            let base = ij_variance(&per_model, &m, design.n(), design.r()).unwrap();
            let scaled: Vec<f64> = per_model.iter().map(|f| f * s).collect();
            let est = ij_variance(&scaled, &m, design.n(), design.r()).unwrap();
            let s2 = s * s;
            prop_assert!((est.uncorrected - s2 * base.uncorrected).abs() <= 1e-10 * (1.0 + s2 * base.uncorrected));
            prop_assert!((est.correction - s2 * base.correction).abs() <= 1e-10 * (1.0 + s2 * base.correction));
        }

        #[test]
        fn column_permutation_equivariant(seed in any::<u64>()) {
            let (per_model, design) = random_case(seed);
            let m = design.membership();
            let mut rng = stream(seed, 1);
            let mut perm: Vec<usize> = (0..design.n()).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            let permuted = m.permute_columns(&perm).unwrap();
            let base = ij_variance(&per_model, &m, design.n(), design.r()).unwrap();
            let est = ij_variance(&per_model, &permuted, design.n(), design.r()).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                prop_assert!((est.v_hat[k] - base.v_hat[i]).abs() < 1e-14);
            }
            let tol = 1e-12 * (1.0 + base.uncorrected + base.correction);
            prop_assert!((est.uncorrected - base.uncorrected).abs() < tol);
            prop_assert!((est.correction - base.correction).abs() < tol);
        }

        #[test]
        fn correction_never_increases_the_se(seed in any::<u64>()) {
            let (per_model, design) = random_case(seed);
            let est = ij_variance(&per_model, &design.membership(), design.n(), design.r()).unwrap();
            prop_assert!(est.correction >= 0.0);
            prop_assert!(est.corrected <= est.uncorrected);
            prop_assert_eq!(est.clamped_negative, est.corrected_raw < 0.0);
        }
    }
}
