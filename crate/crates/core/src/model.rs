//! Encoder + classifier head as one trainable unit.

use serde::{Deserialize, Serialize};

use crate::abfnn::{abfnn_graph, AbfnnParams};
use crate::attention::AttentionTrace;
use crate::encoder::{encoder_graph, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::numkernel::{Matrix, SeededRng};
use crate::tape::{Graph, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub vocab_size: usize,
    /// Classifier hidden width `H`; defaults to `d_model`.
    pub head_hidden: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig, vocab_size: usize, num_classes: usize) -> Self {
        let head_hidden = encoder.d_model;
        ModelConfig { encoder, vocab_size, head_hidden, num_classes }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.vocab_size == 0 || self.head_hidden == 0 {
            return Err(Error::InvalidArgument("vocab_size and head_hidden must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument(format!("classifier needs at least 2 classes, got {}", self.num_classes)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = Matrix> {
    pub encoder: EncoderParams<T>,
    pub head: AbfnnParams<T>,
}

impl ModelParams<Matrix> {
    pub fn init(config: &ModelConfig, rng: &mut SeededRng) -> Self {
        let encoder = EncoderParams::init(&config.encoder, config.vocab_size, rng);
        let head = AbfnnParams::init(config.encoder.d_model, config.head_hidden, config.num_classes, rng);
        ModelParams { encoder, head }
    }

    /// `(name, tensor)` pairs in a fixed traversal order.
    pub fn named(&self) -> Vec<(String, &Matrix)> {
        let mut tagged = self.map(&mut |name, m| Some((name.to_owned(), m)));
        let mut out = Vec::new();
        tagged.visit_mut(&mut |_, slot| out.extend(slot.take()));
        out
    }

    /// Owned copies of every tensor in traversal order.
    pub fn tensors(&self) -> Vec<Matrix> {
        self.named().into_iter().map(|(_, m)| m.clone()).collect()
    }

    /// Replaces every tensor in traversal order, checking count and shapes.
    pub fn set_tensors(&mut self, tensors: Vec<Matrix>) -> Result<()> {
        let expected = self.named().len();
        if tensors.len() != expected {
            return Err(Error::InvalidArgument(format!("expected {expected} tensors, got {}", tensors.len())));
        }
        let mut incoming = tensors.into_iter();
        let mut first_err = None;
        self.visit_mut(&mut |name, slot| {
            let Some(m) = incoming.next() else { return };
            if first_err.is_some() {
                return;
            }
            if m.shape() != slot.shape() {
                first_err = Some(Error::TensorShape { name: name.to_owned(), found: m.shape(), expected: slot.shape() });
                return;
            }
            *slot = m;
        });
        first_err.map_or(Ok(()), Err)
    }

    /// `self += alpha · other`, tensor by tensor.
    pub fn axpy(&mut self, alpha: f64, other: &ModelParams) -> Result<()> {
        let mut rhs = other.named().into_iter();
        let mut first_err = None;
        self.visit_mut(&mut |name, slot| {
            let Some((_, o)) = rhs.next() else {
                first_err.get_or_insert(Error::InvalidArgument(format!("{name} has no counterpart")));
                return;
            };
            if let Err(e) = slot.add_assign(&o.scale(alpha)) {
                first_err.get_or_insert(e);
            }
        });
        first_err.map_or(Ok(()), Err)
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, m)| m.data().len()).sum()
    }

    /// Zero tensors with the same structure.
    pub fn zeros_like(&self) -> ModelParams<Matrix> {
        self.map(&mut |_, m| Matrix::zeros(m.rows(), m.cols()))
    }
}

impl<T> ModelParams<T> {
    pub fn map<'a, U>(&'a self, f: &mut dyn FnMut(&str, &'a T) -> U) -> ModelParams<U> {
        ModelParams { encoder: self.encoder.map("encoder", f), head: self.head.map("head", f) }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut T)) {
        self.encoder.visit_mut("encoder", f);
        self.head.visit_mut("head", f);
    }
}

/// A configured model with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub config: ModelConfig,
    pub params: ModelParams,
}

/// Graph nodes of one forward pass.
pub(crate) struct ForwardVars {
    pub probs: Var,
    pub traces: Vec<Vec<crate::attention::HeadVars>>,
}

pub(crate) fn model_graph(g: &mut Graph, p: &ModelParams<Var>, config: &ModelConfig, ids: &[usize], mask: &[bool]) -> Result<ForwardVars> {
    let enc = encoder_graph(g, ids, mask, &p.encoder, &config.encoder)?;
    let probs = abfnn_graph(g, enc.output, mask, &p.head)?;
    Ok(ForwardVars { probs, traces: enc.traces })
}

impl Classifier {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, &mut SeededRng::new(seed));
        Ok(Classifier { config, params })
    }

    /// Class probabilities for one sequence.
    pub fn forward(&self, ids: &[usize], mask: &[bool]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.params.map(&mut |_, m| g.constant(m.clone()));
        let fv = model_graph(&mut g, &p, &self.config, ids, mask)?;
        Ok(g.value(fv.probs).data().to_vec())
    }

    /// Probabilities and `traces[layer][head]`.
    pub fn forward_traced(&self, ids: &[usize], mask: &[bool]) -> Result<(Vec<f64>, Vec<Vec<AttentionTrace>>)> {
        let mut g = Graph::new();
        let p = self.params.map(&mut |_, m| g.constant(m.clone()));
        let fv = model_graph(&mut g, &p, &self.config, ids, mask)?;
        let traces = fv.traces.iter().map(|layer| layer.iter().map(|h| h.trace(&g)).collect()).collect();
        Ok((g.value(fv.probs).data().to_vec(), traces))
    }

    pub fn predict(&self, ids: &[usize], mask: &[bool]) -> Result<usize> {
        Ok(argmax(&self.forward(ids, mask)?))
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    values.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best }).0
}
