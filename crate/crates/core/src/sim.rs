//! Simulation designs, the repeated-experiment driver and its summary metrics.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{EsmError, Result};
use crate::esm::{fit_ensemble, SubsampleSize};
use crate::expfam::{softplus, FamilySpec};
use crate::infer::{intervals_from_predictions, VarianceContext};
use crate::matrix::Matrix;
use crate::net::NetworkConfig;
use crate::rng::{derive_seed, stream, BoxMuller, DATA_STREAM, TEST_POINTS_STREAM};

/// Regression function `g` driving the canonical parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signal {
    /// `x1 + 0.25 x2² + 0.1 atan(0.5 x3 − 0.3)`.
    Baseline,
    /// `2 tanh((1.5 x1 + 0.6 (x2² − 1) + 0.4 x3 tanh(x4) + 0.15 sin(x5)) / 2.5)`.
    Tanh,
}

impl Signal {
    pub fn min_dim(&self) -> usize {
        match self {
            Signal::Baseline => 3,
            Signal::Tanh => 5,
        }
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        if x.len() < self.min_dim() {
            return Err(EsmError::Dimension {
                expected: self.min_dim(),
                got: x.len(),
            });
        }
        Ok(match self {
            Signal::Baseline => x[0] + 0.25 * x[1] * x[1] + 0.1 * (0.5 * x[2] - 0.3).atan(),
            Signal::Tanh => {
                let inner = 1.5 * x[0]
                    + 0.6 * (x[1] * x[1] - 1.0)
                    + 0.4 * x[2] * x[3].tanh()
                    + 0.15 * x[4].sin();
                2.0 * (inner / 2.5).tanh()
            }
        })
    }
}

impl std::str::FromStr for Signal {
    type Err = EsmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "baseline" | "baseline_g" => Ok(Signal::Baseline),
            "tanh" | "tanh_g" => Ok(Signal::Tanh),
            other => Err(EsmError::config("signal", format!("unknown signal `{other}`"))),
        }
    }
}

/// Canonical parameter `f0` implied by the signal value under each family.
/// Poisson uses `λ = softplus(g)`, so `f0 = log λ`; the others use `f0 = g`.
pub fn canonical_truth(spec: &FamilySpec, g: f64) -> f64 {
    match spec {
        FamilySpec::Poisson => softplus(g).ln(),
        _ => g,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDesign {
    pub family: FamilySpec,
    pub n: usize,
    /// Covariate dimension.
    pub p: usize,
    pub size: SubsampleSize,
    pub b: usize,
    pub reps: usize,
    pub n_test: usize,
    pub alpha: f64,
    pub net: NetworkConfig,
    pub seed: u64,
    pub signal: Signal,
    /// Reuse the first repetition's seed for every repetition.
    #[serde(default)]
    pub fixed_rep_seed: bool,
}

impl SimDesign {
    /// Logistic model with the baseline signal, p = 10, 80 test points,
    /// 300 repetitions and B = 1400.
    pub fn standard(family: FamilySpec, n: usize, gamma: f64) -> Self {
        Self {
            family,
            n,
            p: 10,
            size: SubsampleSize::Exponent(gamma),
            b: 1400,
            reps: 300,
            n_test: 80,
            alpha: 0.05,
            net: NetworkConfig::standard(10),
            seed: 2024,
            signal: Signal::Baseline,
            fixed_rep_seed: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.family.validate()?;
        self.net.validate()?;
        if self.n_test == 0 {
            return Err(EsmError::config("n_test", "must be at least 1"));
        }
        if self.reps < 2 {
            return Err(EsmError::config("reps", "must be at least 2"));
        }
        if self.b < 2 {
            return Err(EsmError::config("b", "must be at least 2"));
        }
        if self.p < self.signal.min_dim() {
            return Err(EsmError::config(
                "p",
                format!("signal needs at least {} covariates", self.signal.min_dim()),
            ));
        }
        if self.net.input_dim() != self.p {
            return Err(EsmError::config(
                "net.widths",
                format!("input width {} differs from p = {}", self.net.input_dim(), self.p),
            ));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(EsmError::config("alpha", "must lie in (0, 1)"));
        }
        self.size.resolve(self.n).map_err(|e| match e {
            EsmError::Design(msg) => EsmError::config("r", msg),
            other => other,
        })?;
        Ok(())
    }

    pub fn r(&self) -> Result<usize> {
        self.size.resolve(self.n)
    }

    /// Seed for repetition `rep`; the data and the fit both derive from it.
    pub fn rep_seed(&self, rep: usize) -> u64 {
        let tag = if self.fixed_rep_seed { 0 } else { rep as u64 };
        derive_seed(self.seed, tag)
    }
}

/// Simulated sample: covariates, responses and the true canonical parameter.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<f64>,
    pub f0: Vec<f64>,
}

/// One response draw with canonical parameter `f0`.
pub fn draw_response<R: Rng + ?Sized>(
    spec: &FamilySpec,
    f0: f64,
    rng: &mut R,
    normal: &mut BoxMuller,
) -> f64 {
    match spec {
        FamilySpec::Gaussian => f0 + normal.sample(rng),
        FamilySpec::Bernoulli => (rng.gen::<f64>() < spec.mean(f0)) as u8 as f64,
        FamilySpec::Binomial { n_trial } => {
            let p = crate::expfam::sigmoid(f0);
            (0..*n_trial).filter(|_| rng.gen::<f64>() < p).count() as f64
        }
        FamilySpec::Poisson => {
            // inversion by sequential search; means here are small
            let lambda = f0.exp();
            let u: f64 = rng.gen();
            let mut k = 0u32;
            let mut mass = (-lambda).exp();
            let mut cdf = mass;
            while u > cdf && k < 10_000 {
                k += 1;
                mass *= lambda / k as f64;
                cdf += mass;
            }
            k as f64
        }
    }
}

/// Rows of `N(0, I_p)` covariates.
pub fn gaussian_design<R: Rng + ?Sized>(rows: usize, p: usize, rng: &mut R) -> Matrix {
    let mut normal = BoxMuller::new();
    let data: Vec<f64> = (0..rows * p).map(|_| normal.sample(rng)).collect();
    Matrix::new(rows, p, data).expect("sized buffer")
}

pub fn generate_dataset<R: Rng + ?Sized>(design: &SimDesign, rng: &mut R) -> Result<Dataset> {
    let x = gaussian_design(design.n, design.p, rng);
    let mut normal = BoxMuller::new();
    let mut y = Vec::with_capacity(design.n);
    let mut f0 = Vec::with_capacity(design.n);
    for row in x.iter_rows() {
        let truth = canonical_truth(&design.family, design.signal.eval(row)?);
        y.push(draw_response(&design.family, truth, rng, &mut normal));
        f0.push(truth);
    }
    Ok(Dataset { x, y, f0 })
}

/// Per-repetition results at every test point.
#[derive(Debug, Clone)]
struct RepOutcome {
    fhat: Vec<f64>,
    se: Vec<f64>,
    se_c: Vec<f64>,
    covered: Vec<bool>,
    width: Vec<f64>,
    clamped: Vec<bool>,
    mean_train_loss: f64,
}

/// Summary at one test point across repetitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    pub true_f0: f64,
    pub true_mean: f64,
    pub mean_fhat: f64,
    /// Mean of `f̂_s − f0`.
    pub bias_f: f64,
    /// Mean of `|f̂_s − f0|`.
    pub mae_f: f64,
    /// `|mean_fhat − f0|`.
    pub abs_mean_bias_f: f64,
    /// Mean of `ψ′(f̂_s) − ψ′(f0)`.
    pub bias_mean: f64,
    /// Mean of `|ψ′(f̂_s) − ψ′(f0)|`.
    pub mae_mean: f64,
    pub empsd: f64,
    pub mean_se: f64,
    pub mean_se_c: f64,
    pub coverage: f64,
    pub mean_ail: f64,
    /// Fraction of repetitions whose corrected variance was floored at zero.
    pub clamped_fraction: f64,
}

/// Mean across test points and the across-point standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metric {
    pub mean: f64,
    pub sd: f64,
}

impl Metric {
    pub fn of(values: &[f64]) -> Self {
        let mean = mean(values);
        Self {
            mean,
            sd: sample_sd(values, mean),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Aggregate {
    pub bias_f: Metric,
    pub mae_f: Metric,
    pub bias_mean: Metric,
    pub mae_mean: Metric,
    pub empsd: Metric,
    pub se: Metric,
    pub se_c: Metric,
    pub cp: Metric,
    pub ail: Metric,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub design: SimDesign,
    pub r: usize,
    pub per_point: Vec<PointSummary>,
    pub aggregate: Aggregate,
    /// Mean final training loss over every trained network.
    pub mean_train_loss: f64,
}

impl ExperimentReport {
    pub fn from_points(design: SimDesign, r: usize, per_point: Vec<PointSummary>, mean_train_loss: f64) -> Self {
        let column = |f: fn(&PointSummary) -> f64| per_point.iter().map(f).collect::<Vec<_>>();
        let aggregate = Aggregate {
            bias_f: Metric::of(&column(|p| p.bias_f)),
            mae_f: Metric::of(&column(|p| p.mae_f)),
            bias_mean: Metric::of(&column(|p| p.bias_mean)),
            mae_mean: Metric::of(&column(|p| p.mae_mean)),
            empsd: Metric::of(&column(|p| p.empsd)),
            se: Metric::of(&column(|p| p.mean_se)),
            se_c: Metric::of(&column(|p| p.mean_se_c)),
            cp: Metric::of(&column(|p| p.coverage)),
            ail: Metric::of(&column(|p| p.mean_ail)),
        };
        Self {
            design,
            r,
            per_point,
            aggregate,
            mean_train_loss,
        }
    }
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

fn sample_sd(values: &[f64], mean: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

pub fn run_experiment(design: &SimDesign) -> Result<ExperimentReport> {
    run_experiment_with_progress(design, |_, _| {})
}

/// As [`run_experiment`], calling `progress(done, total)` after each
/// repetition finishes.
pub fn run_experiment_with_progress<F>(design: &SimDesign, progress: F) -> Result<ExperimentReport>
where
    F: Fn(usize, usize) + Sync,
{
    design.validate()?;
    let r = design.r()?;
    let spec = &design.family;
    let test_x = gaussian_design(design.n_test, design.p, &mut stream(design.seed, TEST_POINTS_STREAM));
    let true_f0 = test_x
        .iter_rows()
        .map(|row| Ok(canonical_truth(spec, design.signal.eval(row)?)))
        .collect::<Result<Vec<f64>>>()?;
    let true_mean: Vec<f64> = true_f0.iter().map(|&f| spec.mean(f)).collect();

    let done = AtomicUsize::new(0);
    let outcomes: Vec<Result<RepOutcome>> = (0..design.reps)
        .into_par_iter()
        .map(|rep| {
            let outcome = run_rep(design, r, rep, &test_x, &true_mean).map_err(|e| EsmError::Experiment {
                rep,
                source: Box::new(e),
            });
            progress(done.fetch_add(1, Ordering::SeqCst) + 1, design.reps);
            outcome
        })
        .collect();
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;

    let reps = outcomes.len() as f64;
    let per_point = (0..design.n_test)
        .map(|k| {
            let f0 = true_f0[k];
            let mu = true_mean[k];
            let fhats: Vec<f64> = outcomes.iter().map(|o| o.fhat[k]).collect();
            let mean_fhat = mean(&fhats);
            let sum_by = |f: &dyn Fn(&RepOutcome) -> f64| outcomes.iter().map(f).sum::<f64>() / reps;
            PointSummary {
                true_f0: f0,
                true_mean: mu,
                mean_fhat,
                bias_f: sum_by(&|o| o.fhat[k] - f0),
                mae_f: sum_by(&|o| (o.fhat[k] - f0).abs()),
                abs_mean_bias_f: (mean_fhat - f0).abs(),
                bias_mean: sum_by(&|o| spec.mean(o.fhat[k]) - mu),
                mae_mean: sum_by(&|o| (spec.mean(o.fhat[k]) - mu).abs()),
                empsd: sample_sd(&fhats, mean_fhat),
                mean_se: sum_by(&|o| o.se[k]),
                mean_se_c: sum_by(&|o| o.se_c[k]),
                coverage: sum_by(&|o| o.covered[k] as u8 as f64),
                mean_ail: sum_by(&|o| o.width[k]),
                clamped_fraction: sum_by(&|o| o.clamped[k] as u8 as f64),
            }
        })
        .collect();
    let mean_train_loss = mean(&outcomes.iter().map(|o| o.mean_train_loss).collect::<Vec<_>>());
    Ok(ExperimentReport::from_points(design.clone(), r, per_point, mean_train_loss))
}

fn run_rep(
    design: &SimDesign,
    r: usize,
    rep: usize,
    test_x: &Matrix,
    true_mean: &[f64],
) -> Result<RepOutcome> {
    let seed = design.rep_seed(rep);
    let data = generate_dataset(design, &mut stream(seed, DATA_STREAM))?;
    let model = fit_ensemble(&data.x, &data.y, &design.family, &design.net, r, design.b, seed)?;
    let context = VarianceContext::new(&model.membership, design.n, r)?;
    let predictions = model.predict_all(test_x)?;
    let results = intervals_from_predictions(&design.family, &context, &predictions, design.alpha)?;
    let losses: Vec<f64> = model.networks.iter().map(|n| n.final_train_loss()).collect();
    Ok(RepOutcome {
        fhat: results.iter().map(|c| c.fhat).collect(),
        se: results.iter().map(|c| c.se_uncorrected).collect(),
        se_c: results.iter().map(|c| c.se_corrected).collect(),
        covered: results.iter().zip(true_mean).map(|(c, &mu)| c.contains(mu)).collect(),
        width: results.iter().map(|c| c.width()).collect(),
        clamped: results.iter().map(|c| c.clamped_negative).collect(),
        mean_train_loss: mean(&losses),
    })
}

/// Header of the aggregate metrics row.
pub const METRIC_HEADER: [&str; 9] = [
    "Bias_f", "MAE_f", "Bias_psi'", "MAE_psi'", "EmpSD", "SE", "SE_c", "CP", "AIL",
];

/// Two-decimal rendering that never prints a negative zero.
fn fixed2(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

/// `0.946` → `"94.6%"`.
pub fn format_percent(v: f64) -> String {
    let s = format!("{:.1}%", 100.0 * v);
    if s == "-0.0%" {
        "0.0%".into()
    } else {
        s
    }
}

fn mean_sd(m: Metric) -> String {
    format!("{}({})", fixed2(m.mean), fixed2(m.sd))
}

/// The nine aggregate metrics, each as `mean(sd)`; coverage in percent.
pub fn metric_row(aggregate: &Aggregate) -> [String; 9] {
    let a = aggregate;
    [
        mean_sd(a.bias_f),
        mean_sd(a.mae_f),
        mean_sd(a.bias_mean),
        mean_sd(a.mae_mean),
        mean_sd(a.empsd),
        mean_sd(a.se),
        mean_sd(a.se_c),
        format!("{}({})", format_percent(a.cp.mean), format_percent(a.cp.sd)),
        mean_sd(a.ail),
    ]
}

pub const PER_POINT_HEADER: [&str; 16] = [
    "point",
    "true_f0",
    "true_mean",
    "mean_fhat",
    "bias_f",
    "mae_f",
    "abs_mean_bias_f",
    "bias_mean",
    "mae_mean",
    "empsd",
    "mean_se",
    "mean_se_c",
    "coverage",
    "mean_ail",
    "clamped_fraction",
    "se_c_over_empsd",
];

fn per_point_record(k: usize, p: &PointSummary) -> Vec<String> {
    let ratio = if p.empsd > 0.0 { p.mean_se_c / p.empsd } else { f64::NAN };
    let mut out = vec![k.to_string()];
    out.extend(
        [
            p.true_f0,
            p.true_mean,
            p.mean_fhat,
            p.bias_f,
            p.mae_f,
            p.abs_mean_bias_f,
            p.bias_mean,
            p.mae_mean,
            p.empsd,
            p.mean_se,
            p.mean_se_c,
            p.coverage,
            p.mean_ail,
            p.clamped_fraction,
            ratio,
        ]
        .iter()
        .map(|v| v.to_string()),
    );
    out
}

/// Writes `metrics.csv` and `per_point.csv` into `dir`.
pub fn write_report(report: &ExperimentReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut metrics = csv::Writer::from_path(dir.join("metrics.csv")).map_err(csv_error)?;
    metrics.write_record(METRIC_HEADER).map_err(csv_error)?;
    metrics.write_record(metric_row(&report.aggregate)).map_err(csv_error)?;
    metrics.flush()?;
    let mut points = csv::Writer::from_path(dir.join("per_point.csv")).map_err(csv_error)?;
    points.write_record(PER_POINT_HEADER).map_err(csv_error)?;
    for (k, p) in report.per_point.iter().enumerate() {
        points.write_record(per_point_record(k, p)).map_err(csv_error)?;
    }
    points.flush()?;
    Ok(())
}

pub(crate) fn csv_error(e: csv::Error) -> EsmError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => EsmError::Io(io),
        other => EsmError::Format(format!("{other:?}")),
    }
}

/// Plain-text table of the aggregate metrics for terminal output.
pub fn summary_text(report: &ExperimentReport) -> String {
    let mut out = String::new();
    let row = metric_row(&report.aggregate);
    let _ = writeln!(
        out,
        "{} n={} r={} B={} reps={} n_test={}",
        report.design.family, report.design.n, report.r, report.design.b, report.design.reps, report.design.n_test
    );
    for (name, value) in METRIC_HEADER.iter().zip(row.iter()) {
        let _ = writeln!(out, "  {name:<9} {value}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_design(family: FamilySpec) -> SimDesign {
        SimDesign {
            family,
            n: 40,
            p: 3,
            size: SubsampleSize::Exact(15),
            b: 6,
            reps: 2,
            n_test: 4,
            alpha: 0.05,
            net: NetworkConfig {
                widths: vec![3, 6, 1],
                epochs: 5,
                ..NetworkConfig::standard(3)
            },
            seed: 17,
            signal: Signal::Baseline,
            fixed_rep_seed: false,
        }
    }

    #[test]
    fn baseline_signal_values() {
        let atan = (-0.3f64).atan();
        assert!((Signal::Baseline.eval(&[0.0; 3]).unwrap() - (-0.029_145_7)).abs() < 1e-7);
        assert!((Signal::Baseline.eval(&[0.0; 3]).unwrap() - 0.1 * atan).abs() < 1e-15);
        assert!((Signal::Baseline.eval(&[1.0, 0.0, 0.0]).unwrap() - 0.970_854_3).abs() < 1e-7);
        let a = Signal::Baseline.eval(&[0.4, 1.3, -0.2, 5.0]).unwrap();
        let b = Signal::Baseline.eval(&[0.4, -1.3, -0.2, 5.0]).unwrap();
        assert_eq!(a, b);
        assert!(Signal::Baseline.eval(&[1.0, 2.0]).is_err());
        assert!(Signal::Tanh.eval(&[0.0; 4]).is_err());
        let t = Signal::Tanh.eval(&[0.0; 5]).unwrap();
        assert!((t - 2.0 * (-0.6f64 / 2.5).tanh()).abs() < 1e-15);
    }

    #[test]
    fn poisson_truth_at_origin() {
        let g = Signal::Baseline.eval(&[0.0; 10]).unwrap();
        let f0 = canonical_truth(&FamilySpec::Poisson, g);
        // reference values from 30-digit evaluation of log(1 + e^g)
        assert!((f0.exp() - 0.678_680_520_906_738_8).abs() < 1e-12);
        assert!((f0 - (-0.387_604_776_278_461_4)).abs() < 1e-12);
    }

    #[test]
    fn response_means_match_the_family() {
        let draws = 100_000;
        for (spec, f0) in [
            (FamilySpec::Gaussian, 0.4),
            (FamilySpec::Bernoulli, 0.0),
            (FamilySpec::Bernoulli, -1.2),
            (FamilySpec::Poisson, -0.38769),
            (FamilySpec::Poisson, 1.1),
            (FamilySpec::Binomial { n_trial: 5 }, 0.7),
        ] {
            let mut rng = stream(88, 0);
            let mut normal = BoxMuller::new();
            let total: f64 = (0..draws).map(|_| draw_response(&spec, f0, &mut rng, &mut normal)).sum();
            let empirical = total / draws as f64;
            let se = (spec.variance(f0) / draws as f64).sqrt();
            assert!((empirical - spec.mean(f0)).abs() < 3.0 * se, "{spec}: {empirical}");
        }
    }

    #[test]
    fn generated_data_is_valid_and_reproducible() {
        for family in [FamilySpec::Bernoulli, FamilySpec::Poisson, FamilySpec::Binomial { n_trial: 5 }] {
            let design = tiny_design(family);
            let a = generate_dataset(&design, &mut stream(1, DATA_STREAM)).unwrap();
            let b = generate_dataset(&design, &mut stream(1, DATA_STREAM)).unwrap();
            assert_eq!(a.y, b.y);
            assert_eq!(a.x, b.x);
            for (i, &y) in a.y.iter().enumerate() {
                family.check_response(y, i + 1).unwrap();
            }
        }
    }

    #[test]
    fn design_validation() {
        let mut d = tiny_design(FamilySpec::Bernoulli);
        d.reps = 1;
        assert!(matches!(d.validate(), Err(EsmError::Config { key, .. }) if key == "reps"));
        let mut d = tiny_design(FamilySpec::Bernoulli);
        d.n_test = 0;
        assert!(d.validate().is_err());
        let mut d = tiny_design(FamilySpec::Bernoulli);
        d.p = 2;
        d.net.widths[0] = 2;
        assert!(matches!(d.validate(), Err(EsmError::Config { key, .. }) if key == "p"));
        let mut d = tiny_design(FamilySpec::Bernoulli);
        d.size = SubsampleSize::Exact(40);
        assert!(matches!(d.validate(), Err(EsmError::Config { key, .. }) if key == "r"));
    }

    #[test]
    fn fixed_seed_reps_have_zero_spread() {
        let mut design = tiny_design(FamilySpec::Bernoulli);
        design.fixed_rep_seed = true;
        let report = run_experiment(&design).unwrap();
        for p in &report.per_point {
            assert_eq!(p.empsd, 0.0);
            assert!((0.0..=1.0).contains(&p.coverage));
            assert!(p.true_mean > 0.0 && p.true_mean < 1.0);
        }
    }

    #[test]
    fn reports_are_deterministic_and_test_points_fixed() {
        let design = tiny_design(FamilySpec::Poisson);
        let a = run_experiment(&design).unwrap();
        let b = run_experiment(&design).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let mut other = design.clone();
        other.reps = 3;
        let c = run_experiment(&other).unwrap();
        let f0 = |r: &ExperimentReport| r.per_point.iter().map(|p| p.true_f0).collect::<Vec<_>>();
        assert_eq!(f0(&a), f0(&c));
        assert_eq!(a.per_point.len(), design.n_test);
    }

    #[test]
    fn metric_formatting() {
        assert_eq!(format_percent(0.946), "94.6%");
        let zero = metric_row(&Aggregate::default());
        assert_eq!(zero[0], "0.00(0.00)");
        assert_eq!(zero[7], "0.0%(0.0%)");
        assert!(zero.iter().all(|f| !f.contains('-')));

        let point = |bias: f64| PointSummary {
            true_f0: 0.0,
            true_mean: 0.5,
            mean_fhat: bias,
            bias_f: bias,
            mae_f: 0.1,
            abs_mean_bias_f: bias.abs(),
            bias_mean: 0.0,
            mae_mean: 0.0,
            empsd: 0.0,
            mean_se: 0.0,
            mean_se_c: 0.0,
            coverage: 1.0,
            mean_ail: 0.0,
            clamped_fraction: 0.0,
        };
        let report = ExperimentReport::from_points(
            tiny_design(FamilySpec::Bernoulli),
            15,
            vec![point(0.1), point(-0.1)],
            0.0,
        );
        let row = metric_row(&report.aggregate);
        assert_eq!(row[0], "0.00(0.14)");
        assert_eq!(row[1], "0.10(0.00)");
        assert_eq!(row[7], "100.0%(0.0%)");
    }
}
