//! Subsample designs, ensemble training and ensemble prediction.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{EsmError, Result};
use crate::expfam::FamilySpec;
use crate::matrix::Matrix;
use crate::net::{train_network, Network, NetworkConfig};
use crate::rng::stream;

/// Complete designs larger than this are refused.
const MAX_COMPLETE_SUBSETS: u128 = 1_000_000;

/// B index lists of r distinct, sorted row indices drawn from `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsampleDesign {
    n: usize,
    r: usize,
    indices: Vec<Vec<usize>>,
    complete: bool,
}

impl SubsampleDesign {
    /// Checks and wraps explicit index lists. Each list is sorted on the way in.
    pub fn from_indices(n: usize, r: usize, mut indices: Vec<Vec<usize>>) -> Result<Self> {
        check_sizes(n, r)?;
        if indices.is_empty() {
            return Err(EsmError::Design("at least one subsample is required".into()));
        }
        for (j, list) in indices.iter_mut().enumerate() {
            list.sort_unstable();
            if list.len() != r {
                return Err(EsmError::Design(format!(
                    "subsample {j} has {} indices, expected {r}",
                    list.len()
                )));
            }
            if list.windows(2).any(|w| w[0] == w[1]) {
                return Err(EsmError::Design(format!("subsample {j} repeats an index")));
            }
            if list.last().is_some_and(|&i| i >= n) {
                return Err(EsmError::Design(format!("subsample {j} has an index >= {n}")));
            }
        }
        let complete = binomial(n, r) == Some(indices.len() as u128) && {
            let mut sorted = indices.clone();
            sorted.sort();
            sorted.windows(2).all(|w| w[0] != w[1])
        };
        Ok(Self {
            n,
            r,
            indices,
            complete,
        })
    }

    /// Every r-subset of `0..n` in lexicographic order.
    pub fn complete(n: usize, r: usize) -> Result<Self> {
        check_sizes(n, r)?;
        match binomial(n, r) {
            Some(count) if count <= MAX_COMPLETE_SUBSETS => {}
            _ => {
                return Err(EsmError::Design(format!(
                    "C({n}, {r}) subsets is too many to enumerate"
                )))
            }
        }
        let mut indices = Vec::new();
        let mut current: Vec<usize> = (0..r).collect();
        loop {
            indices.push(current.clone());
            // advance to the next combination
            let Some(pos) = (0..r).rev().find(|&k| current[k] < n - r + k) else {
                break;
            };
            current[pos] += 1;
            for k in pos + 1..r {
                current[k] = current[k - 1] + 1;
            }
        }
        Ok(Self {
            n,
            r,
            indices,
            complete: true,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn r(&self) -> usize {
        self.r
    }

    /// Number of subsamples B.
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[Vec<usize>] {
        &self.indices
    }

    pub fn is_complete(&self) -> bool {
        self.complete
    }

    pub fn membership(&self) -> Membership {
        let mut data = vec![0u8; self.len() * self.n];
        for (j, list) in self.indices.iter().enumerate() {
            for &i in list {
                data[j * self.n + i] = 1;
            }
        }
        Membership {
            rows: self.len(),
            cols: self.n,
            data,
        }
    }
}

fn check_sizes(n: usize, r: usize) -> Result<()> {
    if r == 0 || r >= n {
        return Err(EsmError::Design(format!(
            "subsample size r={r} must satisfy 1 <= r < n={n}"
        )));
    }
    Ok(())
}

fn binomial(n: usize, r: usize) -> Option<u128> {
    let r = r.min(n - r);
    let mut acc: u128 = 1;
    for k in 0..r {
        acc = acc.checked_mul((n - k) as u128)? / (k as u128 + 1);
    }
    Some(acc)
}

/// B uniform r-subsets of `0..n`, drawn independently (duplicates across draws
/// are possible) by a partial Fisher–Yates shuffle.
pub fn draw_subsamples<R: Rng + ?Sized>(
    n: usize,
    r: usize,
    b: usize,
    rng: &mut R,
) -> Result<SubsampleDesign> {
    check_sizes(n, r)?;
    if b == 0 {
        return Err(EsmError::Design("at least one subsample is required".into()));
    }
    let mut pool: Vec<usize> = (0..n).collect();
    let mut indices = Vec::with_capacity(b);
    for _ in 0..b {
        for k in 0..r {
            let pick = rng.gen_range(k..n);
            pool.swap(k, pick);
        }
        let mut list = pool[..r].to_vec();
        list.sort_unstable();
        indices.push(list);
    }
    let complete = binomial(n, r) == Some(b as u128) && {
        let mut sorted = indices.clone();
        sorted.sort();
        sorted.windows(2).all(|w| w[0] != w[1])
    };
    Ok(SubsampleDesign {
        n,
        r,
        indices,
        complete,
    })
}

/// The B×n inclusion matrix: entry `(j, i)` is 1 iff row i is in subsample j.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Membership {
    rows: usize,
    cols: usize,
    data: Vec<u8>,
}

impl Membership {
    pub fn new(rows: usize, cols: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(EsmError::Dimension {
                expected: rows * cols,
                got: data.len(),
            });
        }
        if data.iter().any(|&v| v > 1) {
            return Err(EsmError::Design("membership entries must be 0 or 1".into()));
        }
        Ok(Self { rows, cols, data })
    }

    /// Number of subsamples B.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Number of observations n.
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, j: usize) -> &[u8] {
        &self.data[j * self.cols..(j + 1) * self.cols]
    }

    pub fn get(&self, j: usize, i: usize) -> u8 {
        self.data[j * self.cols + i]
    }

    pub fn row_sums(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|j| self.row(j).iter().map(|&v| v as usize).sum())
            .collect()
    }

    /// Fraction of subsamples containing each observation.
    pub fn column_means(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.cols];
        for j in 0..self.rows {
            for (c, &v) in counts.iter_mut().zip(self.row(j)) {
                *c += v as usize;
            }
        }
        counts
            .into_iter()
            .map(|c| c as f64 / self.rows as f64)
            .collect()
    }

    /// Same matrix with observation columns reordered: new column `k` is old
    /// column `perm[k]`.
    pub fn permute_columns(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.cols {
            return Err(EsmError::Dimension {
                expected: self.cols,
                got: perm.len(),
            });
        }
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..self.rows {
            let row = self.row(j);
            data.extend(perm.iter().map(|&k| row[k]));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }
}

/// Subsample size, either fixed or as `round(n^gamma)` (at least 2).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsampleSize {
    Exact(usize),
    Exponent(f64),
}

impl SubsampleSize {
    pub fn resolve(&self, n: usize) -> Result<usize> {
        let r = match *self {
            SubsampleSize::Exact(r) => r,
            SubsampleSize::Exponent(gamma) => {
                if !(gamma > 0.0 && gamma < 1.0) {
                    return Err(EsmError::config("gamma", "must lie in (0, 1)"));
                }
                ((n as f64).powf(gamma).round() as usize).max(2)
            }
        };
        check_sizes(n, r)?;
        Ok(r)
    }
}

/// Per-feature affine map `(x - mean) / scale` fixed at fit time.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Standardizer {
    /// Column means and sample SDs; constant columns get scale 1.
    pub fn fit(x: &Matrix) -> Self {
        let (n, p) = (x.rows(), x.cols());
        let mut means = vec![0.0; p];
        for row in x.iter_rows() {
            for (m, v) in means.iter_mut().zip(row) {
                *m += v;
            }
        }
        means.iter_mut().for_each(|m| *m /= n.max(1) as f64);
        let mut scales = vec![0.0; p];
        for row in x.iter_rows() {
            for ((s, v), m) in scales.iter_mut().zip(row).zip(&means) {
                *s += (v - m).powi(2);
            }
        }
        for s in &mut scales {
            let sd = (*s / (n.max(2) - 1) as f64).sqrt();
            *s = if sd > 0.0 && sd.is_finite() { sd } else { 1.0 };
        }
        Self { means, scales }
    }

    pub fn apply_row(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.means)
            .zip(&self.scales)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        let data: Vec<f64> = x.iter_rows().flat_map(|row| self.apply_row(row)).collect();
        Matrix::new(x.rows(), x.cols(), data).expect("shape preserved")
    }
}

/// B trained networks with the design that produced them.
#[derive(Debug, Clone)]
pub struct EnsembleModel {
    pub spec: FamilySpec,
    pub design: SubsampleDesign,
    pub networks: Vec<Network>,
    pub membership: Membership,
    pub master_seed: u64,
    pub config: NetworkConfig,
    /// Applied to raw features before every prediction when present.
    pub standardizer: Option<Standardizer>,
    pub feature_names: Vec<String>,
}

/// Draws B subsamples of size r and trains one network per subsample.
///
/// The design comes from `stream(master_seed, 0)` and network j trains on
/// `stream(master_seed, j + 1)`, so results do not depend on scheduling.
pub fn fit_ensemble(
    x: &Matrix,
    y: &[f64],
    spec: &FamilySpec,
    config: &NetworkConfig,
    r: usize,
    b: usize,
    master_seed: u64,
) -> Result<EnsembleModel> {
    if y.len() != x.rows() {
        return Err(EsmError::Dimension {
            expected: x.rows(),
            got: y.len(),
        });
    }
    let design = draw_subsamples(x.rows(), r, b, &mut stream(master_seed, 0))?;
    fit_with_design(x, y, spec, config, design, master_seed)
}

/// Trains one network per subsample of an explicit design.
pub fn fit_with_design(
    x: &Matrix,
    y: &[f64],
    spec: &FamilySpec,
    config: &NetworkConfig,
    design: SubsampleDesign,
    master_seed: u64,
) -> Result<EnsembleModel> {
    config.validate()?;
    spec.validate()?;
    if design.n() != x.rows() || y.len() != x.rows() {
        return Err(EsmError::Dimension {
            expected: design.n(),
            got: x.rows(),
        });
    }
    if x.cols() != config.input_dim() {
        return Err(EsmError::Dimension {
            expected: config.input_dim(),
            got: x.cols(),
        });
    }
    for (i, &yi) in y.iter().enumerate() {
        spec.check_response(yi, i + 1)?;
    }
    let outcomes: Vec<Result<Network>> = design
        .indices()
        .par_iter()
        .enumerate()
        .map(|(j, rows)| {
            let xs = x.select_rows(rows);
            let ys: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
            train_network(&xs, &ys, spec, config, &mut stream(master_seed, j as u64 + 1))
        })
        .collect();
    let mut networks = Vec::with_capacity(outcomes.len());
    for (index, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(net) => networks.push(net),
            Err(e) => {
                return Err(EsmError::Ensemble {
                    index,
                    source: Box::new(e),
                })
            }
        }
    }
    let membership = design.membership();
    Ok(EnsembleModel {
        spec: *spec,
        design,
        networks,
        membership,
        master_seed,
        config: config.clone(),
        standardizer: None,
        feature_names: Vec::new(),
    })
}

impl EnsembleModel {
    /// Reassembles a model from stored parts, checking that the networks
    /// match the design and the shared configuration.
    pub fn from_parts(
        spec: FamilySpec,
        design: SubsampleDesign,
        networks: Vec<Network>,
        master_seed: u64,
        config: NetworkConfig,
        standardizer: Option<Standardizer>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        spec.validate()?;
        config.validate()?;
        if networks.len() != design.len() {
            return Err(EsmError::Dimension {
                expected: design.len(),
                got: networks.len(),
            });
        }
        if let Some(s) = &standardizer {
            if s.means.len() != config.input_dim() || s.scales.len() != config.input_dim() {
                return Err(EsmError::Dimension {
                    expected: config.input_dim(),
                    got: s.means.len(),
                });
            }
        }
        if !feature_names.is_empty() && feature_names.len() != config.input_dim() {
            return Err(EsmError::Dimension {
                expected: config.input_dim(),
                got: feature_names.len(),
            });
        }
        let membership = design.membership();
        Ok(Self {
            spec,
            design,
            networks,
            membership,
            master_seed,
            config,
            standardizer,
            feature_names,
        })
    }

    pub fn b(&self) -> usize {
        self.networks.len()
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim()
    }

    fn prepare_row(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(EsmError::Dimension {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(match &self.standardizer {
            Some(s) => s.apply_row(x),
            None => x.to_vec(),
        })
    }

    /// Ensemble mean on the canonical scale and the individual predictions.
    pub fn predict(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let x = Matrix::new(1, x.len(), self.prepare_row(x)?)?;
        let per_model = self
            .networks
            .iter()
            .map(|net| net.predict_batch(&x).map(|v| v[0]))
            .collect::<Result<Vec<_>>>()?;
        Ok((average(&per_model), per_model))
    }

    /// `ψ′` of the ensemble mean: the estimated conditional mean of y.
    pub fn mean_estimate(&self, x: &[f64]) -> Result<f64> {
        let (fhat, _) = self.predict(x)?;
        self.spec.psi_prime(fhat)
    }

    /// Predictions of every network at every row of `x`, as a B×m matrix.
    pub fn predict_all(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(EsmError::Dimension {
                expected: self.input_dim(),
                got: x.cols(),
            });
        }
        let prepared = match &self.standardizer {
            Some(s) => s.apply(x),
            None => x.clone(),
        };
        let rows = self
            .networks
            .par_iter()
            .map(|net| net.predict_batch(&prepared))
            .collect::<Result<Vec<_>>>()?;
        let m = x.rows();
        Matrix::new(self.b(), m, rows.concat())
    }
}

/// Arithmetic mean; zero for an empty slice.
pub fn average(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}
