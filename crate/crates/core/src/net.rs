//! Feed-forward ReLU networks trained by mini-batch SGD.
//!
//! Hidden layers apply ReLU followed by inverted dropout during training.
//! The scalar output is clamped to `[-F, F]`. At evaluation time this is a
//! hard clamp. During training a saturated output passes the loss gradient
//! through unchanged when it points back into `[-F, F]` and blocks it
//! otherwise, so misfit outputs can recover while well-fit ones stop growing.

use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{EsmError, Result};
use crate::expfam::FamilySpec;
use crate::kernels::{matmul, transpose, Strided};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Weights uniform on `±sqrt(6 / fan_in)`, biases zero.
    HeUniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Layer widths from the input dimension to the scalar output.
    pub widths: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout_rate: f64,
    pub weight_decay: f64,
    /// Output bound `F`.
    pub clamp: f64,
    pub init: InitScheme,
    pub seed: u64,
}

impl NetworkConfig {
    /// Two hidden layers of 128 and 64 units, learning rate 0.1, 500 epochs,
    /// 10% dropout, weight decay 0.02 and output bound 3.
    pub fn standard(input_dim: usize) -> Self {
        Self {
            widths: vec![input_dim, 128, 64, 1],
            learning_rate: 0.1,
            epochs: 500,
            batch_size: 32,
            dropout_rate: 0.1,
            weight_decay: 0.02,
            clamp: 3.0,
            init: InitScheme::HeUniform,
            seed: 0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 3 {
            return Err(EsmError::config(
                "net.widths",
                "need an input, at least one hidden layer and an output",
            ));
        }
        if self.widths.contains(&0) {
            return Err(EsmError::config("net.widths", "widths must be positive"));
        }
        if *self.widths.last().unwrap() != 1 {
            return Err(EsmError::config("net.widths", "last width must be 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(EsmError::config("net.learning_rate", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(EsmError::config("net.epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(EsmError::config("net.batch_size", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(EsmError::config("net.dropout_rate", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(EsmError::config("net.weight_decay", "must be nonnegative"));
        }
        if self.clamp.is_nan() || self.clamp <= 0.0 {
            return Err(EsmError::config("net.clamp", "must be positive"));
        }
        Ok(())
    }
}

/// Dense layer. `weights` is `inputs × outputs`, row-major: entry
/// `k * outputs + o` connects input `k` to output `o`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }
}

/// Per-hidden-unit multipliers for one sample: `0` for dropped units,
/// `1 / (1 - q)` for kept ones.
pub type DropoutMask = Vec<Vec<f64>>;

pub enum ForwardMode<'a> {
    Eval,
    Train(&'a DropoutMask),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    layers: Vec<Layer>,
    final_train_loss: f64,
}

/// Parameter gradients laid out like [`Network::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    /// Weights then biases, layer by layer; same order as
    /// [`Network::parameters`].
    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }
}

fn flatten_layers(layers: &[Layer]) -> Vec<f64> {
    let mut out = Vec::new();
    for layer in layers {
        out.extend_from_slice(&layer.weights);
        out.extend_from_slice(&layer.biases);
    }
    out
}

pub fn init_network<R: Rng + ?Sized>(config: &NetworkConfig, rng: &mut R) -> Result<Network> {
    config.validate()?;
    let mut layers = Vec::with_capacity(config.widths.len() - 1);
    for pair in config.widths.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let mut layer = Layer::zeros(fan_in, fan_out);
        match config.init {
            InitScheme::HeUniform => {
                let bound = (6.0 / fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound);
                for w in layer.weights.iter_mut() {
                    *w = dist.sample(rng);
                }
            }
        }
        layers.push(layer);
    }
    Ok(Network {
        config: config.clone(),
        layers,
        final_train_loss: f64::NAN,
    })
}

impl Network {
    /// Assembles a network from explicit parameters, checking every shape
    /// against `config.widths`.
    pub fn from_parts(config: NetworkConfig, layers: Vec<Layer>, final_train_loss: f64) -> Result<Self> {
        config.validate()?;
        if layers.len() != config.widths.len() - 1 {
            return Err(EsmError::Dimension {
                expected: config.widths.len() - 1,
                got: layers.len(),
            });
        }
        for (layer, pair) in layers.iter().zip(config.widths.windows(2)) {
            let ok = layer.inputs == pair[0]
                && layer.outputs == pair[1]
                && layer.weights.len() == pair[0] * pair[1]
                && layer.biases.len() == pair[1];
            if !ok {
                return Err(EsmError::Format(format!(
                    "layer shape {}x{} does not match widths {:?}",
                    layer.outputs, layer.inputs, config.widths
                )));
            }
        }
        Ok(Self {
            config,
            layers,
            final_train_loss,
        })
    }

    /// All-zero weights and biases.
    pub fn zeros(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let layers = config
            .widths
            .windows(2)
            .map(|pair| Layer::zeros(pair[0], pair[1]))
            .collect();
        Ok(Self {
            config,
            layers,
            final_train_loss: f64::NAN,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim()
    }

    /// Mean eval-mode loss over the training rows, recorded after training.
    pub fn final_train_loss(&self) -> f64 {
        self.final_train_loss
    }

    pub fn parameters(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        let total: usize = self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum();
        if params.len() != total {
            return Err(EsmError::Dimension {
                expected: total,
                got: params.len(),
            });
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let nw = layer.weights.len();
            layer.weights.copy_from_slice(&params[offset..offset + nw]);
            offset += nw;
            let nb = layer.biases.len();
            layer.biases.copy_from_slice(&params[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|v| v.is_finite()))
    }

    /// Output before the clamp, evaluated one layer at a time.
    fn raw_output(&self, x: &[f64], mask: Option<&DropoutMask>) -> Result<f64> {
        if x.len() != self.input_dim() {
            return Err(EsmError::Dimension {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let hidden = self.layers.len() - 1;
        if let Some(mask) = mask {
            let shape_ok = mask.len() == hidden
                && mask.iter().zip(&self.layers).all(|(m, l)| m.len() == l.outputs);
            if !shape_ok {
                return Err(EsmError::Dimension {
                    expected: hidden,
                    got: mask.len(),
                });
            }
        }
        let mut input = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = layer.biases.clone();
            for (a, row) in input.iter().zip(layer.weights.chunks_exact(layer.outputs)) {
                for (value, w) in out.iter_mut().zip(row) {
                    *value += a * w;
                }
            }
            if l < hidden {
                for (o, value) in out.iter_mut().enumerate() {
                    *value = value.max(0.0);
                    if let Some(mask) = mask {
                        *value *= mask[l][o];
                    }
                }
            }
            input = out;
        }
        Ok(input[0])
    }

    /// Scalar network output for one feature vector. Both modes clamp the
    /// value to `[-F, F]`; `Train` additionally applies a dropout mask.
    pub fn forward(&self, x: &[f64], mode: ForwardMode<'_>) -> Result<f64> {
        let mask = match mode {
            ForwardMode::Eval => None,
            ForwardMode::Train(mask) => Some(mask),
        };
        let raw = self.raw_output(x, mask)?;
        Ok(raw.clamp(-self.config.clamp, self.config.clamp))
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        self.forward(x, ForwardMode::Eval)
    }

    /// Eval-mode outputs for every row of `x`, computed in batches.
    pub fn predict_batch(&self, x: &Matrix) -> Result<Vec<f64>> {
        if x.cols() != self.input_dim() {
            return Err(EsmError::Dimension {
                expected: self.input_dim(),
                got: x.cols(),
            });
        }
        let chunk = 256.min(x.rows().max(1));
        let mut ws = Workspace::new(&self.config.widths, chunk);
        let mut out = Vec::with_capacity(x.rows());
        for start in (0..x.rows()).step_by(chunk) {
            let m = chunk.min(x.rows() - start);
            let rows = &x.as_slice()[start * x.cols()..(start + m) * x.cols()];
            ws.load_inputs(rows, m);
            self.forward_batch(&mut ws, m, false);
            out.extend_from_slice(&ws.output[..m]);
        }
        Ok(out)
    }

    /// Batch-mean loss and its parameter gradient at the clamped output, with
    /// the one-sided clamp gradient described in the module docs. `masks` holds one [`DropoutMask`] per
    /// row when dropout is active.
    pub fn loss_and_gradient(
        &self,
        x: &Matrix,
        y: &[f64],
        spec: &FamilySpec,
        masks: Option<&[DropoutMask]>,
    ) -> Result<(f64, Gradients)> {
        if x.cols() != self.input_dim() {
            return Err(EsmError::Dimension {
                expected: self.input_dim(),
                got: x.cols(),
            });
        }
        if y.len() != x.rows() {
            return Err(EsmError::Dimension {
                expected: x.rows(),
                got: y.len(),
            });
        }
        let m = x.rows();
        let mut ws = Workspace::new(&self.config.widths, m.max(1));
        ws.load_inputs(x.as_slice(), m);
        let train = if let Some(masks) = masks {
            if masks.len() != m {
                return Err(EsmError::Dimension {
                    expected: m,
                    got: masks.len(),
                });
            }
            for (l, scale) in ws.scales.iter_mut().enumerate() {
                let width = self.layers[l].outputs;
                for (i, mask) in masks.iter().enumerate() {
                    scale[i * width..(i + 1) * width].copy_from_slice(&mask[l]);
                }
            }
            true
        } else {
            false
        };
        self.forward_batch(&mut ws, m, train);
        let mut grads = Gradients {
            layers: self.layers.iter().map(|l| Layer::zeros(l.inputs, l.outputs)).collect(),
        };
        let loss = self.backward_batch(&mut ws, m, y, spec, &mut grads);
        Ok((loss, grads))
    }

    /// `θ ← θ − lr·(g + wd·θ)` for weights, `θ ← θ − lr·g` for biases.
    pub fn sgd_step(&mut self, grads: &Gradients, learning_rate: f64, weight_decay: f64) {
        for (layer, grad) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, g) in layer.weights.iter_mut().zip(&grad.weights) {
                *w -= learning_rate * (g + weight_decay * *w);
            }
            for (b, g) in layer.biases.iter_mut().zip(&grad.biases) {
                *b -= learning_rate * g;
            }
        }
    }

    /// Runs the layers over the first `m` rows loaded in `ws`. With `train`
    /// set, hidden activations are multiplied by `ws.scales`.
    fn forward_batch(&self, ws: &mut Workspace, m: usize, train: bool) {
        let hidden = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (fan_in, fan_out) = (layer.inputs, layer.outputs);
            let (before, after) = ws.acts.split_at_mut(l + 1);
            let input = &before[l][..m * fan_in];
            if l == hidden {
                let w = &layer.weights;
                for (o, row) in ws.output[..m].iter_mut().zip(input.chunks_exact(fan_in)) {
                    *o = layer.biases[0] + row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
                }
                break;
            }
            let out = &mut after[0][..m * fan_out];
            matmul(
                m,
                fan_out,
                fan_in,
                Strided { data: input, row: fan_in, col: 1 },
                &layer.weights,
                fan_out,
                out,
                fan_out,
            );
            let gate = &mut ws.gates[l][..m * fan_out];
            let scale = &ws.scales[l][..m * fan_out];
            for ((row, gate_row), scale_row) in out
                .chunks_exact_mut(fan_out)
                .zip(gate.chunks_exact_mut(fan_out))
                .zip(scale.chunks_exact(fan_out))
            {
                for (((v, g), s), b) in row.iter_mut().zip(gate_row).zip(scale_row).zip(&layer.biases) {
                    *v += b;
                    let keep = if train { *s } else { 1.0 };
                    // ReLU sign is unpredictable; select with a mask
                    let active = u64::from(*v > 0.0).wrapping_neg();
                    *g = f64::from_bits(keep.to_bits() & active);
                    *v *= *g;
                }
            }
        }
        let bound = self.config.clamp;
        for v in &mut ws.output[..m] {
            *v = v.clamp(-bound, bound);
        }
    }

    /// Backpropagates the batch-mean loss after [`Network::forward_batch`];
    /// returns the loss.
    fn backward_batch(
        &self,
        ws: &mut Workspace,
        m: usize,
        y: &[f64],
        spec: &FamilySpec,
        grads: &mut Gradients,
    ) -> f64 {
        let inv_m = 1.0 / m as f64;
        let mut loss = 0.0;
        let bound = self.config.clamp;
        for ((&f, &yi), d) in ws.output[..m].iter().zip(y).zip(&mut ws.delta) {
            loss += spec.loss(yi, f);
            let g = spec.loss_grad(yi, f);
            // a saturated output only receives gradient pointing back inside
            let outward = (f >= bound && g < 0.0) || (f <= -bound && g > 0.0);
            *d = if outward { 0.0 } else { g * inv_m };
        }
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let (fan_in, fan_out) = (layer.inputs, layer.outputs);
            let grad = &mut grads.layers[l];
            let delta = &ws.delta[..m * fan_out];
            let acts = &ws.acts[l][..m * fan_in];
            if fan_out == 1 {
                grad.weights.iter_mut().for_each(|g| *g = 0.0);
                for (d, row) in delta.iter().zip(acts.chunks_exact(fan_in)) {
                    for (g, a) in grad.weights.iter_mut().zip(row) {
                        *g += d * a;
                    }
                }
            } else {
                matmul(
                    fan_in,
                    fan_out,
                    m,
                    Strided { data: acts, row: 1, col: fan_in },
                    delta,
                    fan_out,
                    &mut grad.weights,
                    fan_out,
                );
            }
            grad.biases.iter_mut().for_each(|b| *b = 0.0);
            for row in delta.chunks_exact(fan_out) {
                for (b, d) in grad.biases.iter_mut().zip(row) {
                    *b += d;
                }
            }
            if l > 0 {
                let back = &mut ws.delta_back[..m * fan_in];
                if fan_out == 1 {
                    for (row, d) in back.chunks_exact_mut(fan_in).zip(delta) {
                        for (v, w) in row.iter_mut().zip(&layer.weights) {
                            *v = d * w;
                        }
                    }
                } else {
                    let wt = &mut ws.transposed[..fan_in * fan_out];
                    transpose(&layer.weights, fan_in, fan_out, wt);
                    matmul(
                        m,
                        fan_in,
                        fan_out,
                        Strided { data: delta, row: fan_out, col: 1 },
                        wt,
                        fan_in,
                        back,
                        fan_in,
                    );
                }
                for (d, g) in back.iter_mut().zip(&ws.gates[l - 1][..m * fan_in]) {
                    *d *= g;
                }
                std::mem::swap(&mut ws.delta, &mut ws.delta_back);
            }
        }
        loss * inv_m
    }

    /// Mean eval-mode loss over all rows.
    pub fn mean_loss(&self, x: &Matrix, y: &[f64], spec: &FamilySpec) -> Result<f64> {
        let preds = self.predict_batch(x)?;
        if preds.len() != y.len() {
            return Err(EsmError::Dimension {
                expected: preds.len(),
                got: y.len(),
            });
        }
        let total: f64 = preds.iter().zip(y).map(|(f, yi)| spec.loss(*yi, *f)).sum();
        Ok(total / y.len().max(1) as f64)
    }
}

/// Scratch buffers for batched forward and backward passes.
struct Workspace {
    /// `acts[0]` holds inputs; `acts[l]` the output of hidden layer `l - 1`.
    acts: Vec<Vec<f64>>,
    /// `∂ activation / ∂ pre-activation` per hidden layer.
    gates: Vec<Vec<f64>>,
    /// Dropout multipliers per hidden layer.
    scales: Vec<Vec<f64>>,
    output: Vec<f64>,
    delta: Vec<f64>,
    delta_back: Vec<f64>,
    /// Scratch copy of a weight matrix as `outputs × inputs`.
    transposed: Vec<f64>,
    dropout_bits: Vec<u32>,
}

impl Workspace {
    fn new(widths: &[usize], batch: usize) -> Self {
        let hidden = &widths[1..widths.len() - 1];
        let max_width = widths.iter().copied().max().unwrap_or(1);
        let mut acts = vec![vec![0.0; batch * widths[0]]];
        acts.extend(hidden.iter().map(|&w| vec![0.0; batch * w]));
        Self {
            acts,
            gates: hidden.iter().map(|&w| vec![0.0; batch * w]).collect(),
            scales: hidden.iter().map(|&w| vec![1.0; batch * w]).collect(),
            output: vec![0.0; batch],
            delta: vec![0.0; batch * max_width],
            delta_back: vec![0.0; batch * max_width],
            transposed: vec![0.0; widths.windows(2).map(|p| p[0] * p[1]).max().unwrap_or(0)],
            dropout_bits: Vec::new(),
        }
    }

    fn load_inputs(&mut self, rows: &[f64], m: usize) {
        self.acts[0][..rows.len()].copy_from_slice(rows);
        debug_assert_eq!(rows.len() % m.max(1), 0);
    }

    /// Fresh inverted-dropout multipliers for the first `m` rows.
    fn draw_dropout<R: Rng + ?Sized>(&mut self, rng: &mut R, m: usize, rate: f64) {
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        // keep a unit iff a uniform u32 falls below keep·2^32
        let threshold = (keep * 4_294_967_296.0) as u64;
        let scale_bits = scale.to_bits();
        let batch = self.output.len();
        for layer in &mut self.scales {
            let count = m * (layer.len() / batch);
            self.dropout_bits.resize(count, 0);
            rng.fill(&mut self.dropout_bits[..]);
            for (s, &bits) in layer[..count].iter_mut().zip(&self.dropout_bits) {
                // all-ones iff bits < threshold; selects without a branch
                let keep_mask = (u64::from(bits).wrapping_sub(threshold) >> 63).wrapping_neg();
                *s = f64::from_bits(scale_bits & keep_mask);
            }
        }
    }
}

/// Trains a fresh network on `(x, y)`: He-uniform initialization from `rng`,
/// then `config.epochs` passes of shuffled mini-batch SGD.
pub fn train_network<R: Rng + ?Sized>(
    x: &Matrix,
    y: &[f64],
    spec: &FamilySpec,
    config: &NetworkConfig,
    rng: &mut R,
) -> Result<Network> {
    config.validate()?;
    spec.validate()?;
    if x.cols() != config.input_dim() {
        return Err(EsmError::Dimension {
            expected: config.input_dim(),
            got: x.cols(),
        });
    }
    if y.len() != x.rows() {
        return Err(EsmError::Dimension {
            expected: x.rows(),
            got: y.len(),
        });
    }
    if x.rows() == 0 {
        return Err(EsmError::data(0, "no training rows"));
    }
    for (i, &yi) in y.iter().enumerate() {
        spec.check_response(yi, i + 1)?;
    }

    let mut net = init_network(config, rng)?;
    let n = x.rows();
    let p = x.cols();
    let batch = config.batch_size.min(n);
    let mut ws = Workspace::new(&config.widths, batch);
    let mut grads = Gradients {
        layers: net.layers.iter().map(|l| Layer::zeros(l.inputs, l.outputs)).collect(),
    };
    let mut order: Vec<usize> = (0..n).collect();
    let mut y_batch = vec![0.0; batch];
    let dropout = config.dropout_rate > 0.0;
    // masks need many bits per batch; a fast generator seeded from the stream keeps them cheap
    let mut mask_rng = SmallRng::seed_from_u64(rng.gen());

    for epoch in 0..config.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch) {
            let m = chunk.len();
            for (slot, &i) in chunk.iter().enumerate() {
                ws.acts[0][slot * p..(slot + 1) * p].copy_from_slice(x.row(i));
                y_batch[slot] = y[i];
            }
            if dropout {
                ws.draw_dropout(&mut mask_rng, m, config.dropout_rate);
            }
            net.forward_batch(&mut ws, m, dropout);
            let loss = net.backward_batch(&mut ws, m, &y_batch[..m], spec, &mut grads);
            if !loss.is_finite() {
                return Err(EsmError::Training {
                    epoch,
                    message: format!("batch loss {loss}"),
                });
            }
            net.sgd_step(&grads, config.learning_rate, config.weight_decay);
        }
    }
    if !net.all_finite() {
        return Err(EsmError::Training {
            epoch: config.epochs - 1,
            message: "non-finite parameters".into(),
        });
    }
    let final_loss = net.mean_loss(x, y, spec)?;
    if !final_loss.is_finite() {
        return Err(EsmError::Training {
            epoch: config.epochs - 1,
            message: format!("final training loss {final_loss}"),
        });
    }
    net.final_train_loss = final_loss;
    Ok(net)
}
