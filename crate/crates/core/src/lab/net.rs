//! A multi-exit feed-forward network trained by explicit backpropagation.
//!
//! Block k computes `h_k = tanh(W_k h_{k-1} + b_k)` with `h_0 = x`; head k
//! computes logits `V_k h_k + c_k`. With input skips, blocks after the first
//! read `[h_{k-1}, x]` instead of `h_{k-1}`, so a narrow first block does not
//! starve the deeper ones. The training objective is the mean over samples
//! of the unweighted sum of all K per-exit cross-entropies.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::{stream_rng, LabError};
use crate::trace::{log_sum_exp, softmax_unchecked};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct Layer {
    input: usize,
    width: usize,
    w: usize,
    b: usize,
    v: usize,
    c: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiExitNet {
    input_dim: usize,
    classes: usize,
    widths: Vec<usize>,
    input_skip: bool,
    layers: Vec<Layer>,
    params: Vec<f64>,
}

/// Per-sample forward state.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `h_0 = x, h_1, ..., h_K`
    pub activations: Vec<Vec<f64>>,
    /// Logits at exits 1..=K.
    pub logits: Vec<Vec<f64>>,
}

fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    log_sum_exp(logits) - logits[label]
}

impl MultiExitNet {
    /// Weights drawn from N(0, 1/fan_in); biases start at zero.
    pub fn new(input_dim: usize, widths: &[usize], classes: usize, input_skip: bool, seed: u64) -> Result<Self, LabError> {
        if input_dim == 0 || classes < 2 || widths.is_empty() || widths.contains(&0) {
            return Err(LabError::Spec(format!(
                "network needs input_dim >= 1, C >= 2 and K >= 1 nonzero widths (got {input_dim}, {classes}, {widths:?})"
            )));
        }
        let mut layers = Vec::with_capacity(widths.len());
        let mut offset = 0;
        let mut input = input_dim;
        for &width in widths {
            let w = offset;
            let b = w + width * input;
            let v = b + width;
            let c = v + classes * width;
            offset = c + classes;
            layers.push(Layer { input, width, w, b, v, c });
            input = if input_skip { width + input_dim } else { width };
        }
        let mut params = vec![0.0; offset];
        let mut rng = stream_rng(seed, 3);
        for layer in &layers {
            let block = Normal::new(0.0, (1.0 / layer.input as f64).sqrt()).expect("positive scale");
            for p in &mut params[layer.w..layer.b] {
                *p = block.sample(&mut rng);
            }
            let head = Normal::new(0.0, (1.0 / layer.width as f64).sqrt()).expect("positive scale");
            for p in &mut params[layer.v..layer.c] {
                *p = head.sample(&mut rng);
            }
        }
        Ok(Self {
            input_dim,
            classes,
            widths: widths.to_vec(),
            input_skip,
            layers,
            params,
        })
    }

    pub fn exits(&self) -> usize {
        self.layers.len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_skip(&self) -> bool {
        self.input_skip
    }

    /// The vector block `depth` (0-based) reads.
    fn block_input(&self, depth: usize, x: &[f64], prev: &[f64]) -> Vec<f64> {
        if depth > 0 && self.input_skip {
            let mut v = prev.to_vec();
            v.extend_from_slice(x);
            v
        } else {
            prev.to_vec()
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Parameters of block k and head k (1-based).
    pub fn depth_params(&self, depth: usize) -> usize {
        let l = &self.layers[depth - 1];
        l.width * (l.input + 1) + self.classes * (l.width + 1)
    }

    /// Runs blocks 1..=depth and their heads.
    pub fn forward_to(&self, x: &[f64], depth: usize) -> Forward {
        let mut activations = Vec::with_capacity(depth + 1);
        let mut logits = Vec::with_capacity(depth);
        activations.push(x.to_vec());
        for (d, layer) in self.layers[..depth].iter().enumerate() {
            let prev = self.block_input(d, x, activations.last().expect("h_0 present"));
            let w = &self.params[layer.w..layer.b];
            let b = &self.params[layer.b..layer.v];
            let h: Vec<f64> = (0..layer.width)
                .map(|j| {
                    let row = &w[j * layer.input..(j + 1) * layer.input];
                    (b[j] + row.iter().zip(&prev).map(|(a, x)| a * x).sum::<f64>()).tanh()
                })
                .collect();
            let v = &self.params[layer.v..layer.c];
            let c = &self.params[layer.c..layer.c + self.classes];
            let z = (0..self.classes)
                .map(|o| c[o] + v[o * layer.width..(o + 1) * layer.width].iter().zip(&h).map(|(a, x)| a * x).sum::<f64>())
                .collect();
            logits.push(z);
            activations.push(h);
        }
        Forward { activations, logits }
    }

    pub fn forward(&self, x: &[f64]) -> Forward {
        self.forward_to(x, self.exits())
    }

    /// Summed per-exit cross-entropy of one sample; adds `scale` times its
    /// gradient into `grad`.
    fn accumulate(&self, x: &[f64], label: usize, scale: f64, grad: &mut [f64]) -> f64 {
        let fw = self.forward(x);
        let k = self.exits();
        let mut loss = 0.0;
        // gradient w.r.t. h_k flowing down from deeper blocks
        let mut dh_next: Vec<f64> = Vec::new();
        for depth in (0..k).rev() {
            let layer = self.layers[depth];
            let h = &fw.activations[depth + 1];
            let prev = self.block_input(depth, x, &fw.activations[depth]);
            let z = &fw.logits[depth];
            loss += cross_entropy(z, label);
            let mut dz = softmax_unchecked(z);
            dz[label] -= 1.0;
            let mut dh = if dh_next.is_empty() { vec![0.0; layer.width] } else { dh_next };
            for (o, dzo) in dz.iter().enumerate() {
                let g = scale * dzo;
                grad[layer.c + o] += g;
                let v_row = layer.v + o * layer.width;
                for j in 0..layer.width {
                    grad[v_row + j] += g * h[j];
                    dh[j] += dzo * self.params[v_row + j];
                }
            }
            let mut dprev = vec![0.0; layer.input];
            for j in 0..layer.width {
                let da = dh[j] * (1.0 - h[j] * h[j]);
                let g = scale * da;
                grad[layer.b + j] += g;
                let w_row = layer.w + j * layer.input;
                for i in 0..layer.input {
                    grad[w_row + i] += g * prev[i];
                    dprev[i] += da * self.params[w_row + i];
                }
            }
            // the skipped copy of x needs no gradient
            dprev.truncate(fw.activations[depth].len());
            dh_next = dprev;
        }
        loss
    }

    /// Mean objective over `indices` and its gradient.
    pub fn loss_and_grad(&self, data: &Dataset, indices: &[usize]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.params.len()];
        let scale = 1.0 / indices.len() as f64;
        let mut loss = 0.0;
        for &i in indices {
            loss += self.accumulate(data.row(i), data.labels[i], scale, &mut grad);
        }
        (loss * scale, grad)
    }

    /// Mean objective over `indices`.
    pub fn loss(&self, data: &Dataset, indices: &[usize]) -> f64 {
        let total: f64 = indices
            .iter()
            .map(|&i| {
                self.forward(data.row(i))
                    .logits
                    .iter()
                    .map(|z| cross_entropy(z, data.labels[i]))
                    .sum::<f64>()
            })
            .sum();
        total / indices.len() as f64
    }

    /// Mean cross-entropy and accuracy at every exit.
    pub fn evaluate(&self, data: &Dataset) -> Vec<ExitScore> {
        let k = self.exits();
        let mut loss = vec![0.0; k];
        let mut correct = vec![0usize; k];
        for i in 0..data.len() {
            let fw = self.forward(data.row(i));
            for (d, z) in fw.logits.iter().enumerate() {
                loss[d] += cross_entropy(z, data.labels[i]);
                if crate::trace::argmax(z) == data.labels[i] {
                    correct[d] += 1;
                }
            }
        }
        let n = data.len().max(1) as f64;
        loss.iter()
            .zip(&correct)
            .map(|(l, c)| ExitScore {
                loss: l / n,
                accuracy: *c as f64 / n,
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitScore {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// One width per block; its length is K.
    pub widths: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Feed the input to every block after the first.
    pub input_skip: bool,
    /// Warn when the final depth-K training cross-entropy is above this.
    pub loss_target: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            widths: vec![3, 24, 24, 24],
            epochs: 120,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 32,
            input_skip: true,
            loss_target: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LabError> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(LabError::Spec("widths must be nonempty and positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(LabError::Spec("learning rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(LabError::Spec("momentum must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(LabError::Spec("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub net: MultiExitNet,
    /// Mean objective over each epoch's mini-batches.
    pub epoch_losses: Vec<f64>,
    pub final_scores: Vec<ExitScore>,
    pub warning: Option<String>,
}

/// Mini-batch SGD with momentum on the summed per-exit cross-entropy.
/// Batch order comes from a ChaCha8 stream of `seed`.
pub fn train_model(data: &Dataset, config: &TrainConfig, seed: u64) -> Result<TrainReport, LabError> {
    config.validate()?;
    if data.is_empty() {
        return Err(LabError::Spec("training set is empty".into()));
    }
    let mut net = MultiExitNet::new(data.input_dim, &config.widths, data.classes, config.input_skip, seed)?;
    let mut velocity = vec![0.0; net.num_params()];
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = stream_rng(seed, 4);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for batch in order.chunks(config.batch_size) {
            let (loss, grad) = net.loss_and_grad(data, batch);
            if !loss.is_finite() {
                return Err(LabError::Divergence { epoch: epoch + 1, loss });
            }
            for ((p, v), g) in net.params.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *v = config.momentum * *v - config.learning_rate * g;
                *p += *v;
            }
            total += loss;
            batches += 1;
        }
        epoch_losses.push(total / batches as f64);
    }
    let final_scores = net.evaluate(data);
    let last = final_scores.last().expect("K >= 1").loss;
    if !last.is_finite() {
        return Err(LabError::Divergence {
            epoch: config.epochs,
            loss: last,
        });
    }
    let warning = (last > config.loss_target).then(|| {
        format!(
            "depth-{} training cross-entropy {last:.4} is above the target {}",
            net.exits(),
            config.loss_target
        )
    });
    Ok(TrainReport {
        net,
        epoch_losses,
        final_scores,
        warning,
    })
}
