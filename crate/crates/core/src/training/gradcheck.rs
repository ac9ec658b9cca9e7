//! Central-difference verification of analytic gradients.

use std::fmt;

use rayon::prelude::*;

use super::{batch_loss, gradients};
use crate::abfnn::{abfnn_graph, AbfnnParams};
use crate::attention::{head_graph, AttentionHeadParams, AttentionVariant, HeadOptions};
use crate::dataset::EncodedExample;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{Classifier, ModelConfig, ModelParams};
use crate::numkernel::{Matrix, SeededRng};
use crate::tape::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub threshold: f64,
    /// Coordinates sampled per tensor; smaller tensors are checked in full.
    pub max_coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { epsilon: 1e-5, threshold: 1e-4, max_coords_per_tensor: 500, seed: 0 }
    }
}

/// Worst coordinate of one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub coordinates: usize,
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_relative_error: f64,
    pub worst_parameter: String,
    pub threshold: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.threshold
    }

    pub fn coordinates(&self) -> usize {
        self.tensors.iter().map(|t| t.coordinates).sum()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: max relative error {:.3e} (threshold {:.0e}) over {} coordinates in {} tensors; worst `{}`",
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_relative_error,
            self.threshold,
            self.coordinates(),
            self.tensors.len(),
            self.worst_parameter
        )
    }
}

/// `|a − n| / max(|a|, |n|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

fn sample_coordinates(len: usize, max: usize, rng: &mut SeededRng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    if len > max {
        rng.shuffle(&mut idx);
        idx.truncate(max);
        idx.sort_unstable();
    }
    idx
}

/// Compares `analytic[t]` against central differences of `loss` for every
/// sampled coordinate of every tensor in `named`.
pub fn compare_with_finite_differences(
    named: &[(String, Matrix)],
    analytic: &[Matrix],
    loss: impl Fn(&[Matrix]) -> Result<f64> + Sync,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if named.len() != analytic.len() {
        return Err(Error::InvalidArgument(format!("{} tensors but {} gradients", named.len(), analytic.len())));
    }
    for ((name, m), g) in named.iter().zip(analytic) {
        if m.shape() != g.shape() {
            return Err(Error::TensorShape { name: name.clone(), found: g.shape(), expected: m.shape() });
        }
    }
    let mut rng = SeededRng::new(opts.seed);
    let jobs: Vec<(usize, usize)> = named
        .iter()
        .enumerate()
        .flat_map(|(t, (_, m))| {
            let mut sub = rng.fork();
            sample_coordinates(m.data().len(), opts.max_coords_per_tensor, &mut sub).into_iter().map(move |c| (t, c))
        })
        .collect();
    let base: Vec<Matrix> = named.iter().map(|(_, m)| m.clone()).collect();
    let eps = opts.epsilon;
    let numeric: Vec<f64> = jobs
        .par_iter()
        .map(|&(t, c)| {
            let mut probe = base.clone();
            let x = base[t].data()[c];
            probe[t].data_mut()[c] = x + eps;
            let up = loss(&probe)?;
            probe[t].data_mut()[c] = x - eps;
            let down = loss(&probe)?;
            Ok((up - down) / (2.0 * eps))
        })
        .collect::<Result<_>>()?;

    let mut tensors: Vec<TensorCheck> = named
        .iter()
        .map(|(name, _)| TensorCheck {
            name: name.clone(),
            coordinates: 0,
            max_relative_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        })
        .collect();
    for (&(t, c), &num) in jobs.iter().zip(&numeric) {
        let a = analytic[t].data()[c];
        let err = relative_error(a, num);
        let entry = &mut tensors[t];
        entry.coordinates += 1;
        if err > entry.max_relative_error || entry.coordinates == 1 {
            entry.max_relative_error = err;
            entry.worst_index = c;
            entry.analytic = a;
            entry.numeric = num;
        }
    }
    let worst = tensors
        .iter()
        .max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error))
        .map(|t| (t.max_relative_error, t.name.clone()))
        .unwrap_or((0.0, String::new()));
    Ok(GradCheckReport { tensors, max_relative_error: worst.0, worst_parameter: worst.1, threshold: opts.threshold })
}

fn flatten<T>(visit: impl FnOnce(&mut dyn FnMut(&str, &Matrix)) -> T) -> Vec<(String, Matrix)> {
    let mut out = Vec::new();
    visit(&mut |name, m| out.push((name.to_owned(), m.clone())));
    out
}

fn overwrite(tensors: &[Matrix]) -> impl FnMut(&str, &mut Matrix) + '_ {
    let mut k = 0;
    move |_, m| {
        *m = tensors[k].clone();
        k += 1;
    }
}

fn grads_for(g: &Graph, back: &mut crate::tape::Gradients, vars: &[Var]) -> Vec<Matrix> {
    vars.iter()
        .map(|&v| {
            let (r, c) = g.shape(v);
            back.take(v).unwrap_or_else(|| Matrix::zeros(r, c))
        })
        .collect()
}

/// Full-model check of the mean cross-entropy over `batch`.
pub fn finite_diff_check(
    params: &ModelParams,
    config: &ModelConfig,
    batch: &[EncodedExample],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let analytic = gradients(params, config, batch)?.grads.tensors();
    let named: Vec<(String, Matrix)> = params.named().into_iter().map(|(n, m)| (n, m.clone())).collect();
    compare_with_finite_differences(
        &named,
        &analytic,
        |ts| {
            let mut p = params.clone();
            p.set_tensors(ts.to_vec())?;
            batch_loss(&p, config, batch)
        },
        opts,
    )
}

/// Scalar `Σ weights ⊙ x` on the graph.
fn weighted_sum(g: &mut Graph, x: Var, weights: &Matrix) -> Result<Var> {
    let (r, c) = g.shape(x);
    let w = g.constant(weights.clone());
    let prod = g.mul(x, w)?;
    let left = g.constant(Matrix::filled(1, r, 1.0));
    let right = g.constant(Matrix::filled(c, 1, 1.0));
    let rows = g.matmul(left, prod)?;
    g.matmul(rows, right)
}

/// Single-head check of `Σ R ⊙ output` for a fixed random `R`, covering the
/// head weights and both inputs.
pub fn head_finite_diff_check(
    head: &AttentionHeadParams,
    content: &Matrix,
    relpos: &Matrix,
    variant: AttentionVariant,
    mask: &[bool],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    head.validate(variant)?;
    let readout = SeededRng::new(opts.seed ^ 0x5eed).matrix(content.rows(), content.cols(), -1.0, 1.0);
    let loss_graph = |g: &mut Graph, h: &AttentionHeadParams<Var>, c: Var, r: Var| -> Result<Var> {
        let hv = head_graph(g, c, r, h, variant, HeadOptions::default(), mask)?;
        weighted_sum(g, hv.output, &readout)
    };

    let mut g = Graph::new();
    let h = head.map("head", &mut |_, m| g.param(m.clone()));
    let (c, r) = (g.param(content.clone()), g.param(relpos.clone()));
    let out = loss_graph(&mut g, &h, c, r)?;
    let mut back = g.backward(out);
    let mut vars = Vec::new();
    h.map("head", &mut |_, &v| vars.push(v));
    vars.extend([c, r]);
    let analytic = grads_for(&g, &mut back, &vars);

    let mut named = flatten(|f| head.map("head", &mut |n, m| f(n, m)));
    named.push(("input.content".into(), content.clone()));
    named.push(("input.relpos".into(), relpos.clone()));
    let k = named.len() - 2;
    compare_with_finite_differences(
        &named,
        &analytic,
        |ts| {
            let mut p = head.clone();
            p.visit_mut("head", &mut overwrite(&ts[..k]));
            let mut g = Graph::new();
            let h = p.map("head", &mut |_, m| g.constant(m.clone()));
            let (c, r) = (g.constant(ts[k].clone()), g.constant(ts[k + 1].clone()));
            let out = loss_graph(&mut g, &h, c, r)?;
            Ok(g.value(out).get(0, 0))
        },
        opts,
    )
}

/// Classifier-head check of `−ln p[label]`, covering the head weights and
/// the input sequence.
pub fn abfnn_finite_diff_check(
    params: &AbfnnParams,
    x: &Matrix,
    mask: &[bool],
    label: usize,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    params.validate()?;
    let loss_graph = |g: &mut Graph, p: &AbfnnParams<Var>, x: Var| -> Result<Var> {
        let probs = abfnn_graph(g, x, mask, p)?;
        g.neg_log_pick(probs, label)
    };

    let mut g = Graph::new();
    let p = params.map("head", &mut |_, m| g.param(m.clone()));
    let xv = g.param(x.clone());
    let out = loss_graph(&mut g, &p, xv)?;
    let mut back = g.backward(out);
    let mut vars = Vec::new();
    p.map("head", &mut |_, &v| vars.push(v));
    vars.push(xv);
    let analytic = grads_for(&g, &mut back, &vars);

    let mut named = flatten(|f| params.map("head", &mut |n, m| f(n, m)));
    named.push(("input.x".into(), x.clone()));
    let k = named.len() - 1;
    compare_with_finite_differences(
        &named,
        &analytic,
        |ts| {
            let mut q = params.clone();
            q.visit_mut("head", &mut overwrite(&ts[..k]));
            let mut g = Graph::new();
            let p = q.map("head", &mut |_, m| g.constant(m.clone()));
            let xv = g.constant(ts[k].clone());
            let out = loss_graph(&mut g, &p, xv)?;
            Ok(g.value(out).get(0, 0))
        },
        opts,
    )
}

/// Two-layer, `d_model = 8` model over a padded batch of three sequences.
pub fn tiny_model_check(variant: AttentionVariant, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let enc =
        EncoderConfig { num_layers: 2, d_model: 8, num_heads: 2, ffn_size: 12, k_max: 3, max_len: 6, variant, literal_scaling: false };
    let model = Classifier::new(ModelConfig::new(enc, 11, 3), opts.seed.wrapping_add(7))?;
    let mut rng = SeededRng::new(opts.seed.wrapping_add(11));
    let batch: Vec<EncodedExample> = [(6, 0), (4, 1), (5, 2)]
        .into_iter()
        .map(|(real, label)| {
            let ids = (0..6).map(|i| if i < real { 2 + rng.below(9) } else { 0 }).collect();
            EncodedExample { ids, mask: (0..6).map(|i| i < real).collect(), label }
        })
        .collect();
    finite_diff_check(&model.params, &model.config, &batch, opts)
}

/// One head with `d_head = 4` over three positions.
pub fn tiny_head_check(variant: AttentionVariant, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = SeededRng::new(opts.seed.wrapping_add(13));
    let head = AttentionHeadParams::init(4, 3, variant, &mut rng);
    let content = rng.matrix(3, 4, -1.0, 1.0);
    let relpos = rng.matrix(3, 4, -1.0, 1.0);
    head_finite_diff_check(&head, &content, &relpos, variant, &[true; 3], opts)
}

/// Classifier head with `H = 4` over four positions, one of them padding.
pub fn tiny_abfnn_check(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = SeededRng::new(opts.seed.wrapping_add(17));
    let params = AbfnnParams::init(6, 4, 3, &mut rng);
    let x = rng.matrix(4, 6, -1.0, 1.0);
    abfnn_finite_diff_check(&params, &x, &[true, true, true, false], 1, opts)
}
