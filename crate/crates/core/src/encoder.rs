//! Post-norm transformer encoder built from the attention heads in
//! [`crate::attention`].

use serde::{Deserialize, Serialize};

use crate::attention::{multi_head_graph, AttentionHeadParams, AttentionTrace, AttentionVariant, HeadOptions, HeadVars};
use crate::error::{Error, Result};
use crate::numkernel::{glorot_init, Matrix, SeededRng};
use crate::tape::{Graph, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub k_max: usize,
    pub max_len: usize,
    pub variant: AttentionVariant,
    #[serde(default)]
    pub literal_scaling: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_layers: 2,
            d_model: 32,
            num_heads: 2,
            ffn_size: 64,
            k_max: 8,
            max_len: 64,
            variant: AttentionVariant::DisentangledGated,
            literal_scaling: false,
        }
    }
}

impl EncoderConfig {
    /// 12 layers, hidden 768, 12 heads, feedforward 1024.
    pub fn reference_scale() -> Self {
        EncoderConfig { num_layers: 12, d_model: 768, num_heads: 12, ffn_size: 1024, k_max: 64, max_len: 512, ..Self::default() }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn head_options(&self) -> HeadOptions {
        HeadOptions { literal_scaling: self.literal_scaling, gate_override: None }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("ffn_size", self.ffn_size),
            ("k_max", self.k_max),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidArgument(format!("d_model {} is not divisible by {} heads", self.d_model, self.num_heads)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayerParams<T = Matrix> {
    pub heads: Vec<AttentionHeadParams<T>>,
    pub w_o: T,
    pub ffn_w1: T,
    pub ffn_b1: T,
    pub ffn_w2: T,
    pub ffn_b2: T,
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
}

impl EncoderLayerParams<Matrix> {
    pub fn init(config: &EncoderConfig, rng: &mut SeededRng) -> Self {
        let d = config.d_model;
        let heads =
            (0..config.num_heads).map(|_| AttentionHeadParams::init(config.d_head(), config.max_len, config.variant, rng)).collect();
        EncoderLayerParams {
            heads,
            w_o: glorot_init(d, d, rng),
            ffn_w1: glorot_init(d, config.ffn_size, rng),
            ffn_b1: Matrix::zeros(1, config.ffn_size),
            ffn_w2: glorot_init(config.ffn_size, d, rng),
            ffn_b2: Matrix::zeros(1, d),
            ln1_gain: Matrix::filled(1, d, 1.0),
            ln1_bias: Matrix::zeros(1, d),
            ln2_gain: Matrix::filled(1, d, 1.0),
            ln2_bias: Matrix::zeros(1, d),
        }
    }
}

impl<T> EncoderLayerParams<T> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a T) -> U) -> EncoderLayerParams<U> {
        EncoderLayerParams {
            heads: self.heads.iter().enumerate().map(|(k, h)| h.map(&format!("{prefix}.heads.{k}"), f)).collect(),
            w_o: f(&format!("{prefix}.w_o"), &self.w_o),
            ffn_w1: f(&format!("{prefix}.ffn_w1"), &self.ffn_w1),
            ffn_b1: f(&format!("{prefix}.ffn_b1"), &self.ffn_b1),
            ffn_w2: f(&format!("{prefix}.ffn_w2"), &self.ffn_w2),
            ffn_b2: f(&format!("{prefix}.ffn_b2"), &self.ffn_b2),
            ln1_gain: f(&format!("{prefix}.ln1_gain"), &self.ln1_gain),
            ln1_bias: f(&format!("{prefix}.ln1_bias"), &self.ln1_bias),
            ln2_gain: f(&format!("{prefix}.ln2_gain"), &self.ln2_gain),
            ln2_bias: f(&format!("{prefix}.ln2_bias"), &self.ln2_bias),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        for (k, h) in self.heads.iter_mut().enumerate() {
            h.visit_mut(&format!("{prefix}.heads.{k}"), f);
        }
        f(&format!("{prefix}.w_o"), &mut self.w_o);
        f(&format!("{prefix}.ffn_w1"), &mut self.ffn_w1);
        f(&format!("{prefix}.ffn_b1"), &mut self.ffn_b1);
        f(&format!("{prefix}.ffn_w2"), &mut self.ffn_w2);
        f(&format!("{prefix}.ffn_b2"), &mut self.ffn_b2);
        f(&format!("{prefix}.ln1_gain"), &mut self.ln1_gain);
        f(&format!("{prefix}.ln1_bias"), &mut self.ln1_bias);
        f(&format!("{prefix}.ln2_gain"), &mut self.ln2_gain);
        f(&format!("{prefix}.ln2_bias"), &mut self.ln2_bias);
    }
}

/// Token embeddings, the relative-position table shared by every layer,
/// and the layer stack.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T = Matrix> {
    pub embeddings: T,
    pub relpos: T,
    pub layers: Vec<EncoderLayerParams<T>>,
}

impl EncoderParams<Matrix> {
    pub fn init(config: &EncoderConfig, vocab_size: usize, rng: &mut SeededRng) -> Self {
        let embeddings = glorot_init(vocab_size, config.d_model, rng);
        let relpos = glorot_init(config.k_max + 1, config.d_model, rng);
        let layers = (0..config.num_layers).map(|_| EncoderLayerParams::init(config, rng)).collect();
        EncoderParams { embeddings, relpos, layers }
    }
}

impl<T> EncoderParams<T> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a T) -> U) -> EncoderParams<U> {
        EncoderParams {
            embeddings: f(&format!("{prefix}.embeddings"), &self.embeddings),
            relpos: f(&format!("{prefix}.relpos"), &self.relpos),
            layers: self.layers.iter().enumerate().map(|(k, l)| l.map(&format!("{prefix}.layers.{k}"), f)).collect(),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&format!("{prefix}.embeddings"), &mut self.embeddings);
        f(&format!("{prefix}.relpos"), &mut self.relpos);
        for (k, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.layers.{k}"), f);
        }
    }
}

pub(crate) fn layer_graph(
    g: &mut Graph,
    x: Var,
    relpos: Var,
    p: &EncoderLayerParams<Var>,
    config: &EncoderConfig,
    mask: &[bool],
) -> Result<(Var, Vec<HeadVars>)> {
    let (attn, traces) = multi_head_graph(g, x, relpos, &p.heads, p.w_o, config.variant, config.head_options(), mask)?;
    let res1 = g.add(x, attn)?;
    let y = g.layer_norm(res1, p.ln1_gain, p.ln1_bias)?;
    let h = g.matmul(y, p.ffn_w1)?;
    let h = g.add_row(h, p.ffn_b1)?;
    let h = g.relu(h);
    let f = g.matmul(h, p.ffn_w2)?;
    let f = g.add_row(f, p.ffn_b2)?;
    let res2 = g.add(y, f)?;
    let z = g.layer_norm(res2, p.ln2_gain, p.ln2_bias)?;
    Ok((z, traces))
}

/// Output of the encoder plus the per-layer, per-head attention traces.
pub(crate) struct EncoderVars {
    pub output: Var,
    pub traces: Vec<Vec<HeadVars>>,
}

pub(crate) fn encoder_graph(
    g: &mut Graph,
    ids: &[usize],
    mask: &[bool],
    p: &EncoderParams<Var>,
    config: &EncoderConfig,
) -> Result<EncoderVars> {
    if ids.len() != mask.len() {
        return Err(Error::InvalidArgument(format!("{} token ids but {} mask entries", ids.len(), mask.len())));
    }
    if ids.len() > config.max_len {
        return Err(Error::InvalidArgument(format!("sequence length {} exceeds max_len {}", ids.len(), config.max_len)));
    }
    let mut x = g.gather_rows(p.embeddings, ids)?;
    let mut traces = Vec::with_capacity(p.layers.len());
    for layer in &p.layers {
        let (next, t) = layer_graph(g, x, p.relpos, layer, config, mask)?;
        x = next;
        traces.push(t);
    }
    Ok(EncoderVars { output: x, traces })
}

/// `y = LN(x + MultiHead(x))`, `z = LN(y + relu(y·W₁ + b₁)·W₂ + b₂)`.
pub fn layer_forward(x: &Matrix, relpos: &Matrix, params: &EncoderLayerParams, config: &EncoderConfig, mask: &[bool]) -> Result<Matrix> {
    config.validate()?;
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let r = g.constant(relpos.clone());
    let p = params.map("", &mut |_, m| g.constant(m.clone()));
    let (z, _) = layer_graph(&mut g, xv, r, &p, config, mask)?;
    Ok(g.value(z).clone())
}

/// Embeds `ids` and runs every layer, returning the `n × d_model` output.
pub fn encoder_forward(ids: &[usize], mask: &[bool], params: &EncoderParams, config: &EncoderConfig) -> Result<Matrix> {
    Ok(encoder_forward_traced(ids, mask, params, config)?.0)
}

/// As [`encoder_forward`], also returning `traces[layer][head]`.
pub fn encoder_forward_traced(
    ids: &[usize],
    mask: &[bool],
    params: &EncoderParams,
    config: &EncoderConfig,
) -> Result<(Matrix, Vec<Vec<AttentionTrace>>)> {
    config.validate()?;
    let mut g = Graph::new();
    let p = params.map("", &mut |_, m| g.constant(m.clone()));
    let ev = encoder_graph(&mut g, ids, mask, &p, config)?;
    let traces = ev.traces.iter().map(|layer| layer.iter().map(|h| h.trace(&g)).collect()).collect();
    Ok((g.value(ev.output).clone(), traces))
}
