//! Loss, gradients, optimizers and the training loop.

mod checkpoint;
mod gradcheck;
mod synthetic;

use std::borrow::Borrow;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use gradcheck::{
    abfnn_finite_diff_check, compare_with_finite_differences, finite_diff_check, head_finite_diff_check, relative_error, tiny_abfnn_check,
    tiny_head_check, tiny_model_check, GradCheckOptions, GradCheckReport, TensorCheck,
};
pub use synthetic::{generate_synthetic, SyntheticTaskSpec, TaskKind, BAG_TOKEN, FIRST_FILLER, TOKEN_A, TOKEN_B};

use crate::dataset::EncodedExample;
use crate::error::{Error, Result};
use crate::model::{argmax, model_graph, Classifier, ModelConfig, ModelParams};
use crate::numkernel::{Matrix, SeededRng};
use crate::tape::Graph;

/// Probability floor applied before taking the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// `−ln(max(probs[true_class], 1e-12))`.
pub fn cross_entropy_loss(probs: &[f64], true_class: usize) -> Result<f64> {
    let p = probs
        .get(true_class)
        .ok_or_else(|| Error::InvalidArgument(format!("class {true_class} out of range for {} probabilities", probs.len())))?;
    Ok(if p.is_nan() { *p } else { -p.max(PROB_FLOOR).ln() })
}

/// Mean loss over a batch and its gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchGradients {
    pub loss: f64,
    /// Examples whose arg-max prediction matched the label.
    pub correct: usize,
    pub grads: ModelParams,
}

struct ExampleGrad {
    loss: f64,
    correct: bool,
    grads: Vec<Matrix>,
}

fn example_gradients(params: &ModelParams, config: &ModelConfig, ex: &EncodedExample) -> Result<ExampleGrad> {
    let mut g = Graph::new();
    let p = params.map(&mut |_, m| g.param(m.clone()));
    let (ids, mask) = ex.unpadded();
    let fv = model_graph(&mut g, &p, config, ids, mask)?;
    let loss = g.neg_log_pick(fv.probs, ex.label)?;
    let correct = argmax(g.value(fv.probs).data()) == ex.label;
    let value = g.value(loss).get(0, 0);
    let mut back = g.backward(loss);
    let mut grads = Vec::new();
    p.map(&mut |_, &v| {
        let (r, c) = g.shape(v);
        grads.push(back.take(v).unwrap_or_else(|| Matrix::zeros(r, c)));
    });
    Ok(ExampleGrad { loss: value, correct, grads })
}

/// Gradient of the mean cross-entropy over `batch`.
///
/// Examples are differentiated in parallel; their contributions are summed
/// in batch order so the result does not depend on thread scheduling.
pub fn gradients<E: Borrow<EncodedExample> + Sync>(params: &ModelParams, config: &ModelConfig, batch: &[E]) -> Result<BatchGradients> {
    if batch.is_empty() {
        return Err(Error::Empty("gradient batch"));
    }
    let per_example: Vec<ExampleGrad> = batch.par_iter().map(|ex| example_gradients(params, config, ex.borrow())).collect::<Result<_>>()?;

    let n = batch.len() as f64;
    let mut iter = per_example.into_iter();
    let first = iter.next().expect("batch is non-empty");
    let (mut loss, mut correct, mut acc) = (first.loss, first.correct as usize, first.grads);
    for ex in iter {
        loss += ex.loss;
        correct += ex.correct as usize;
        for (a, g) in acc.iter_mut().zip(&ex.grads) {
            a.add_assign(g)?;
        }
    }
    let mut grads = params.clone();
    grads.set_tensors(acc.into_iter().map(|m| m.scale(1.0 / n)).collect())?;
    Ok(BatchGradients { loss: loss / n, correct, grads })
}

/// Mean cross-entropy over `batch` without gradients.
pub fn batch_loss<E: Borrow<EncodedExample> + Sync>(params: &ModelParams, config: &ModelConfig, batch: &[E]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("loss batch"));
    }
    let losses: Vec<f64> = batch
        .par_iter()
        .map(|ex| {
            let ex = ex.borrow();
            let mut g = Graph::new();
            let p = params.map(&mut |_, m| g.constant(m.clone()));
            let (ids, mask) = ex.unpadded();
            let fv = model_graph(&mut g, &p, config, ids, mask)?;
            cross_entropy_loss(g.value(fv.probs).data(), ex.label)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / batch.len() as f64)
}

/// Probability vectors for every example, in input order.
pub fn predict_all<E: Borrow<EncodedExample> + Sync>(model: &Classifier, data: &[E]) -> Result<Vec<Vec<f64>>> {
    data.par_iter()
        .map(|ex| {
            let (ids, mask) = ex.borrow().unpadded();
            model.forward(ids, mask)
        })
        .collect()
}

/// Fraction of examples whose arg-max prediction matches the label.
pub fn accuracy<E: Borrow<EncodedExample> + Sync>(model: &Classifier, data: &[E]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("accuracy data"));
    }
    let probs = predict_all(model, data)?;
    let hits = probs.iter().zip(data).filter(|(p, ex)| argmax(p) == Borrow::<EncodedExample>::borrow(*ex).label).count();
    Ok(hits as f64 / data.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::adam()
    }
}

/// Optimizer state for one parameter set.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    steps: u64,
    first_moment: Vec<Matrix>,
    second_moment: Vec<Matrix>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Optimizer { kind, learning_rate, steps: 0, first_moment: Vec::new(), second_moment: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. SGD computes `θ + (−λ)·g`.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) -> Result<()> {
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd => params.axpy(-self.learning_rate, grads),
            OptimizerKind::Adam { beta1, beta2, epsilon } => {
                let g = grads.tensors();
                if self.first_moment.is_empty() {
                    self.first_moment = g.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
                    self.second_moment = self.first_moment.clone();
                }
                let t = self.steps as i32;
                let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                let lr = self.learning_rate;
                let (m_all, v_all) = (&mut self.first_moment, &mut self.second_moment);
                let mut k = 0;
                let mut mismatch = None;
                params.visit_mut(&mut |name, p| {
                    let (Some(gk), Some(mk), Some(vk)) = (g.get(k), m_all.get_mut(k), v_all.get_mut(k)) else {
                        mismatch.get_or_insert_with(|| name.to_owned());
                        return;
                    };
                    k += 1;
                    if gk.shape() != p.shape() || mk.shape() != p.shape() {
                        mismatch.get_or_insert_with(|| name.to_owned());
                        return;
                    }
                    let it = p.data_mut().iter_mut().zip(gk.data()).zip(mk.data_mut().iter_mut().zip(vk.data_mut().iter_mut()));
                    for ((w, &gi), (mi, vi)) in it {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + epsilon);
                    }
                });
                match mismatch {
                    Some(name) => Err(Error::InvalidArgument(format!("gradient for `{name}` does not match the parameter"))),
                    None if k != g.len() => Err(Error::InvalidArgument("gradient has extra tensors".into())),
                    None => Ok(()),
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 2e-3, epochs: 30, batch_size: 16, seed: 42, optimizer: OptimizerKind::adam() }
    }
}

impl TrainConfig {
    /// A zero learning rate is accepted and leaves parameters untouched.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidArgument(format!("learning_rate must be finite and non-negative, got {}", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Mean training loss and accuracy observed during one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Epoch-at-a-time training with persistent optimizer state.
pub struct Trainer {
    model: Classifier,
    config: TrainConfig,
    optimizer: Optimizer,
    rng: SeededRng,
    log: Vec<EpochLog>,
}

impl Trainer {
    pub fn new(model: Classifier, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            optimizer: Optimizer::new(config.optimizer, config.learning_rate),
            rng: SeededRng::new(config.seed),
            model,
            config,
            log: Vec::new(),
        })
    }

    pub fn model(&self) -> &Classifier {
        &self.model
    }

    pub fn into_model(self) -> Classifier {
        self.model
    }

    pub fn log(&self) -> &[EpochLog] {
        &self.log
    }

    /// One pass over `data` in a seeded shuffled order.
    pub fn run_epoch(&mut self, data: &[EncodedExample]) -> Result<EpochLog> {
        if data.is_empty() {
            return Err(Error::Empty("training data"));
        }
        let epoch = self.log.len() + 1;
        let mut order: Vec<usize> = (0..data.len()).collect();
        self.rng.shuffle(&mut order);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&EncodedExample> = chunk.iter().map(|&i| &data[i]).collect();
            let bg = gradients(&self.model.params, &self.model.config, &batch)?;
            if !bg.loss.is_finite() {
                return Err(Error::Diverged { epoch, loss: bg.loss });
            }
            loss_sum += bg.loss * batch.len() as f64;
            correct += bg.correct;
            self.optimizer.step(&mut self.model.params, &bg.grads)?;
        }
        let n = data.len() as f64;
        let entry = EpochLog { epoch, loss: loss_sum / n, accuracy: correct as f64 / n };
        log::info!("epoch {} loss {:.6} accuracy {:.4}", entry.epoch, entry.loss, entry.accuracy);
        self.log.push(entry);
        Ok(entry)
    }
}

/// Trains for `config.epochs` epochs and returns the model with its log.
pub fn train(model: Classifier, data: &[EncodedExample], config: &TrainConfig) -> Result<(Classifier, Vec<EpochLog>)> {
    let mut trainer = Trainer::new(model, config.clone())?;
    for _ in 0..config.epochs {
        trainer.run_epoch(data)?;
    }
    let log = trainer.log.clone();
    Ok((trainer.into_model(), log))
}

/// Writes the `epoch,loss,accuracy` log.
pub fn write_log_csv(path: impl AsRef<Path>, log: &[EpochLog]) -> Result<()> {
    let path = path.as_ref();
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for entry in log {
        w.serialize(entry).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
