//! Single attention heads in three flavours and their multi-head assembly.
//!
//! * [`AttentionVariant::Entangled`]: content and absolute position vectors
//!   are summed before a single query/key projection.
//! * [`AttentionVariant::DisentangledStatic`]: the score is the sum of
//!   content→content, content→position and position→content terms, with
//!   positions indexed by clipped distance `min(|i−j|, k_max)`.
//! * [`AttentionVariant::DisentangledGated`]: as above, but the
//!   content→position term is multiplied elementwise by a sigmoid gate
//!   `α[i][j] = σ(Q_C[i] · W_g · K_P[clip(i,j)]ᵀ)`.
//!
//! Component scores are raw dot products; the summed score is divided once
//! by `√(3·d_head)` (`√d_head` for the entangled head). Setting
//! [`HeadOptions::literal_scaling`] additionally divides each component by
//! `√d_head` before the sum.
//!
//! Position projections are taken from the relative table itself:
//! `Q_P = P·W_Q^P`, `K_P = P·W_K^P`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embeddings::{clip_distance, RelativePositionTable};
use crate::error::{Error, Result};
use crate::numkernel::{glorot_init, Matrix, SeededRng};
use crate::tape::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionVariant {
    /// Summed content + absolute position, single score term.
    Entangled,
    /// Three disentangled terms with fixed weights.
    #[serde(rename = "static")]
    DisentangledStatic,
    /// Three disentangled terms, content→position reweighted by a learned gate.
    #[serde(rename = "gated")]
    DisentangledGated,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 3] =
        [AttentionVariant::Entangled, AttentionVariant::DisentangledStatic, AttentionVariant::DisentangledGated];

    pub fn name(self) -> &'static str {
        match self {
            AttentionVariant::Entangled => "entangled",
            AttentionVariant::DisentangledStatic => "static",
            AttentionVariant::DisentangledGated => "gated",
        }
    }

    pub fn is_disentangled(self) -> bool {
        !matches!(self, AttentionVariant::Entangled)
    }
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "entangled" | "bert" => Ok(AttentionVariant::Entangled),
            "static" | "deberta" => Ok(AttentionVariant::DisentangledStatic),
            "gated" | "dcpg" => Ok(AttentionVariant::DisentangledGated),
            other => Err(Error::InvalidArgument(format!("unknown attention variant `{other}` (expected entangled, static or gated)"))),
        }
    }
}

/// Knobs that change how a head combines its scores.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HeadOptions {
    /// Divide each component by `√d_head` as well as the sum by `√(3·d_head)`.
    pub literal_scaling: bool,
    /// Test hook: replace the gate with this constant, bypassing the sigmoid.
    pub gate_override: Option<f64>,
}

/// Weights of one head. Every matrix is `d_head × d_head` except
/// `abs_pos`, which is `max_len × d_head`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHeadParams<T = Matrix> {
    pub w_q_c: T,
    pub w_k_c: T,
    pub w_q_p: T,
    pub w_k_p: T,
    pub w_v: T,
    /// Gate matrix, required by [`AttentionVariant::DisentangledGated`].
    pub w_g: Option<T>,
    /// Absolute position table, required by [`AttentionVariant::Entangled`].
    pub abs_pos: Option<T>,
}

impl AttentionHeadParams<Matrix> {
    /// Glorot-initialized weights carrying exactly the optional tensors the
    /// variant needs.
    pub fn init(d_head: usize, max_len: usize, variant: AttentionVariant, rng: &mut SeededRng) -> Self {
        let mut sq = || glorot_init(d_head, d_head, rng);
        let (w_q_c, w_k_c, w_q_p, w_k_p, w_v) = (sq(), sq(), sq(), sq(), sq());
        let w_g = (variant == AttentionVariant::DisentangledGated).then(|| glorot_init(d_head, d_head, rng));
        let abs_pos = (variant == AttentionVariant::Entangled).then(|| glorot_init(max_len, d_head, rng));
        AttentionHeadParams { w_q_c, w_k_c, w_q_p, w_k_p, w_v, w_g, abs_pos }
    }

    pub fn d_head(&self) -> usize {
        self.w_q_c.rows()
    }

    /// Checks square shapes and the presence of the variant's optional tensors.
    pub fn validate(&self, variant: AttentionVariant) -> Result<()> {
        let d = self.d_head();
        let square = [("w_q_c", &self.w_q_c), ("w_k_c", &self.w_k_c), ("w_q_p", &self.w_q_p), ("w_k_p", &self.w_k_p), ("w_v", &self.w_v)];
        for (name, m) in square.into_iter().chain(self.w_g.as_ref().map(|m| ("w_g", m))) {
            if m.shape() != (d, d) {
                return Err(Error::TensorShape { name: name.into(), found: m.shape(), expected: (d, d) });
            }
        }
        if let Some(p) = &self.abs_pos {
            if p.cols() != d {
                return Err(Error::TensorShape { name: "abs_pos".into(), found: p.shape(), expected: (p.rows(), d) });
            }
        }
        match variant {
            AttentionVariant::DisentangledGated if self.w_g.is_none() => Err(Error::VariantMismatch { variant: "gated", param: "w_g" }),
            AttentionVariant::Entangled if self.abs_pos.is_none() => Err(Error::VariantMismatch { variant: "entangled", param: "abs_pos" }),
            _ => Ok(()),
        }
    }
}

impl<T> AttentionHeadParams<T> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a T) -> U) -> AttentionHeadParams<U> {
        AttentionHeadParams {
            w_q_c: f(&format!("{prefix}.w_q_c"), &self.w_q_c),
            w_k_c: f(&format!("{prefix}.w_k_c"), &self.w_k_c),
            w_q_p: f(&format!("{prefix}.w_q_p"), &self.w_q_p),
            w_k_p: f(&format!("{prefix}.w_k_p"), &self.w_k_p),
            w_v: f(&format!("{prefix}.w_v"), &self.w_v),
            w_g: self.w_g.as_ref().map(|m| f(&format!("{prefix}.w_g"), m)),
            abs_pos: self.abs_pos.as_ref().map(|m| f(&format!("{prefix}.abs_pos"), m)),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&format!("{prefix}.w_q_c"), &mut self.w_q_c);
        f(&format!("{prefix}.w_k_c"), &mut self.w_k_c);
        f(&format!("{prefix}.w_q_p"), &mut self.w_q_p);
        f(&format!("{prefix}.w_k_p"), &mut self.w_k_p);
        f(&format!("{prefix}.w_v"), &mut self.w_v);
        if let Some(m) = &mut self.w_g {
            f(&format!("{prefix}.w_g"), m);
        }
        if let Some(m) = &mut self.abs_pos {
            f(&format!("{prefix}.abs_pos"), m);
        }
    }
}

/// The three raw interaction terms of a disentangled head.
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentScores {
    pub cc: Matrix,
    pub cp: Matrix,
    pub pc: Matrix,
}

/// Everything a head computed on the way to its output.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub scores_cc: Option<Matrix>,
    pub scores_cp: Option<Matrix>,
    pub scores_pc: Option<Matrix>,
    pub gate: Option<Matrix>,
    /// Content→position term after gating (equal to `scores_cp` when ungated).
    pub scores_cp_effective: Option<Matrix>,
    /// Combined, scaled score before masking and softmax.
    pub scores: Matrix,
    pub weights: Matrix,
    pub output: Matrix,
}

/// Graph nodes produced by one head.
#[derive(Clone, Debug)]
pub(crate) struct HeadVars {
    pub cc: Option<Var>,
    pub cp: Option<Var>,
    pub pc: Option<Var>,
    pub gate: Option<Var>,
    pub cp_effective: Option<Var>,
    pub scores: Var,
    pub weights: Var,
    pub output: Var,
}

impl HeadVars {
    pub(crate) fn trace(&self, g: &Graph) -> AttentionTrace {
        let get = |v: Option<Var>| v.map(|v| g.value(v).clone());
        AttentionTrace {
            scores_cc: get(self.cc),
            scores_cp: get(self.cp),
            scores_pc: get(self.pc),
            gate: get(self.gate),
            scores_cp_effective: get(self.cp_effective),
            scores: g.value(self.scores).clone(),
            weights: g.value(self.weights).clone(),
            output: g.value(self.output).clone(),
        }
    }
}

struct ComponentVars {
    q_c: Var,
    k_p: Var,
    cc: Var,
    cp: Var,
    pc: Var,
}

fn check_relpos(content: (usize, usize), relpos: (usize, usize)) -> Result<()> {
    if relpos.1 != content.1 || relpos.0 < 2 {
        return Err(Error::Shape { op: "relative position table", left: content, right: relpos });
    }
    Ok(())
}

fn component_graph(g: &mut Graph, content: Var, relpos: Var, p: &AttentionHeadParams<Var>) -> Result<ComponentVars> {
    check_relpos(g.shape(content), g.shape(relpos))?;
    let n = g.shape(content).0;
    let k_max = g.shape(relpos).0 - 1;
    let q_c = g.matmul(content, p.w_q_c)?;
    let k_c = g.matmul(content, p.w_k_c)?;
    let q_p = g.matmul(relpos, p.w_q_p)?;
    let k_p = g.matmul(relpos, p.w_k_p)?;

    let cc = g.matmul_nt(q_c, k_c)?;
    // cp_full[i][r] = Q_C[i]·K_P[r]
    let cp_full = g.matmul_nt(q_c, k_p)?;
    let cp = g.gather(cp_full, n, n, |i, j| (i, clip_distance(i, j, k_max)))?;
    // pc_full[j][r] = K_C[j]·Q_P[r]
    let pc_full = g.matmul_nt(k_c, q_p)?;
    let pc = g.gather(pc_full, n, n, |i, j| (j, clip_distance(i, j, k_max)))?;
    Ok(ComponentVars { q_c, k_p, cc, cp, pc })
}

fn gate_graph(g: &mut Graph, q_c: Var, k_p: Var, w_g: Var) -> Result<Var> {
    let n = g.shape(q_c).0;
    let k_rows = g.shape(k_p).0;
    if k_rows < 2 {
        return Err(Error::InvalidArgument("projected position table needs k_max >= 1".into()));
    }
    let k_max = k_rows - 1;
    let qg = g.matmul(q_c, w_g)?;
    let full = g.matmul_nt(qg, k_p)?;
    let logits = g.gather(full, n, n, |i, j| (i, clip_distance(i, j, k_max)))?;
    Ok(g.sigmoid(logits))
}

/// Combined score, softmax and value mixing; shared by the plain and
/// graph-level entry points.
fn attend_graph(g: &mut Graph, sum: Var, divisor: f64, values_src: Var, w_v: Var, mask: &[bool]) -> Result<(Var, Var, Var)> {
    let scores = g.div_scalar(sum, divisor);
    let weights = g.masked_softmax_rows(scores, mask)?;
    let v = g.matmul(values_src, w_v)?;
    let output = g.matmul(weights, v)?;
    Ok((scores, weights, output))
}

fn check_mask(n: usize, mask: &[bool]) -> Result<()> {
    if mask.len() != n {
        return Err(Error::Shape { op: "attention mask", left: (n, n), right: (1, mask.len()) });
    }
    Ok(())
}

pub(crate) fn head_graph(
    g: &mut Graph,
    content: Var,
    relpos: Var,
    p: &AttentionHeadParams<Var>,
    variant: AttentionVariant,
    opts: HeadOptions,
    mask: &[bool],
) -> Result<HeadVars> {
    let (n, d) = g.shape(content);
    check_mask(n, mask)?;

    if variant == AttentionVariant::Entangled {
        let abs = p.abs_pos.ok_or(Error::VariantMismatch { variant: "entangled", param: "abs_pos" })?;
        let positions: Vec<usize> = (0..n).collect();
        let pos = g.gather_rows(abs, &positions).map_err(|_| {
            Error::InvalidArgument(format!("sequence of length {n} exceeds the absolute position table ({} rows)", g.shape(abs).0))
        })?;
        let x = g.add(content, pos)?;
        let q = g.matmul(x, p.w_q_c)?;
        let k = g.matmul(x, p.w_k_c)?;
        let raw = g.matmul_nt(q, k)?;
        let (scores, weights, output) = attend_graph(g, raw, (d as f64).sqrt(), x, p.w_v, mask)?;
        return Ok(HeadVars { cc: None, cp: None, pc: None, gate: None, cp_effective: None, scores, weights, output });
    }

    let comp = component_graph(g, content, relpos, p)?;
    let (mut cc, mut cp, mut pc) = (comp.cc, comp.cp, comp.pc);
    if opts.literal_scaling {
        let s = (d as f64).sqrt();
        cc = g.div_scalar(cc, s);
        cp = g.div_scalar(cp, s);
        pc = g.div_scalar(pc, s);
    }

    let gate = match variant {
        AttentionVariant::DisentangledGated => Some(match opts.gate_override {
            Some(c) => g.constant(Matrix::filled(n, n, c)),
            None => {
                let w_g = p.w_g.ok_or(Error::VariantMismatch { variant: "gated", param: "w_g" })?;
                gate_graph(g, comp.q_c, comp.k_p, w_g)?
            }
        }),
        _ => None,
    };
    let cp_effective = match gate {
        Some(a) => g.mul(a, cp)?,
        None => cp,
    };

    let partial = g.add(cc, cp_effective)?;
    let sum = g.add(partial, pc)?;
    let (scores, weights, output) = attend_graph(g, sum, (3.0 * d as f64).sqrt(), content, p.w_v, mask)?;
    Ok(HeadVars { cc: Some(cc), cp: Some(cp), pc: Some(pc), gate, cp_effective: Some(cp_effective), scores, weights, output })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn multi_head_graph(
    g: &mut Graph,
    content: Var,
    relpos: Var,
    heads: &[AttentionHeadParams<Var>],
    w_o: Var,
    variant: AttentionVariant,
    opts: HeadOptions,
    mask: &[bool],
) -> Result<(Var, Vec<HeadVars>)> {
    let d_model = g.shape(content).1;
    let h = heads.len();
    if h == 0 || !d_model.is_multiple_of(h) {
        return Err(Error::InvalidArgument(format!("d_model {d_model} is not divisible by {h} heads")));
    }
    if g.shape(w_o) != (d_model, d_model) {
        return Err(Error::TensorShape { name: "w_o".into(), found: g.shape(w_o), expected: (d_model, d_model) });
    }
    let d_head = d_model / h;
    let disentangled = variant.is_disentangled();
    if disentangled {
        check_relpos(g.shape(content), g.shape(relpos))?;
    }
    let mut outputs = Vec::with_capacity(h);
    let mut traces = Vec::with_capacity(h);
    for (k, head) in heads.iter().enumerate() {
        let c = g.slice_cols(content, k * d_head, d_head)?;
        let r = if disentangled { g.slice_cols(relpos, k * d_head, d_head)? } else { relpos };
        let hv = head_graph(g, c, r, head, variant, opts, mask)?;
        outputs.push(hv.output);
        traces.push(hv);
    }
    let joined = g.concat_cols(&outputs)?;
    Ok((g.matmul(joined, w_o)?, traces))
}

fn bind_head(g: &mut Graph, p: &AttentionHeadParams) -> AttentionHeadParams<Var> {
    p.map("", &mut |_, m| g.constant(m.clone()))
}

/// The raw (unscaled) content→content, content→position and
/// position→content score matrices.
pub fn component_scores(content: &Matrix, relpos: &RelativePositionTable, params: &AttentionHeadParams) -> Result<ComponentScores> {
    let mut g = Graph::new();
    let c = g.constant(content.clone());
    let r = g.constant(relpos.table.clone());
    let p = bind_head(&mut g, params);
    let comp = component_graph(&mut g, c, r, &p)?;
    Ok(ComponentScores { cc: g.value(comp.cc).clone(), cp: g.value(comp.cp).clone(), pc: g.value(comp.pc).clone() })
}

/// `α[i][j] = σ(content_q[i] · w_g · relpos_k[clip(i,j)]ᵀ)` where
/// `content_q` is `Q_C` (`n × d`) and `relpos_k` is `K_P` (`(k_max+1) × d`).
pub fn gate_matrix(content_q: &Matrix, relpos_k: &Matrix, w_g: &Matrix) -> Result<Matrix> {
    let mut g = Graph::new();
    let q = g.constant(content_q.clone());
    let k = g.constant(relpos_k.clone());
    let w = g.constant(w_g.clone());
    let a = gate_graph(&mut g, q, k, w)?;
    Ok(g.value(a).clone())
}

/// Elementwise `gate ⊙ scores_cp`.
pub fn apply_gate(scores_cp: &Matrix, gate: &Matrix) -> Result<Matrix> {
    gate.hadamard(scores_cp)
}

/// Combines the three terms, normalizes over unmasked keys and mixes the
/// value projections of `content`.
pub fn attend(
    scores_cc: &Matrix,
    scores_cp_effective: &Matrix,
    scores_pc: &Matrix,
    content: &Matrix,
    w_v: &Matrix,
    mask: &[bool],
) -> Result<AttentionTrace> {
    let n = content.rows();
    check_mask(n, mask)?;
    let mut g = Graph::new();
    let cc = g.constant(scores_cc.clone());
    let cp = g.constant(scores_cp_effective.clone());
    let pc = g.constant(scores_pc.clone());
    let c = g.constant(content.clone());
    let w = g.constant(w_v.clone());
    let partial = g.add(cc, cp)?;
    let sum = g.add(partial, pc)?;
    if g.shape(sum) != (n, n) {
        return Err(Error::Shape { op: "attend", left: g.shape(sum), right: (n, n) });
    }
    let (scores, weights, output) = attend_graph(&mut g, sum, (3.0 * content.cols() as f64).sqrt(), c, w, mask)?;
    Ok(AttentionTrace {
        scores_cc: Some(scores_cc.clone()),
        scores_cp: None,
        scores_pc: Some(scores_pc.clone()),
        gate: None,
        scores_cp_effective: Some(scores_cp_effective.clone()),
        scores: g.value(scores).clone(),
        weights: g.value(weights).clone(),
        output: g.value(output).clone(),
    })
}

/// One head end to end, with default options.
pub fn head_forward(
    content: &Matrix,
    relpos: &RelativePositionTable,
    params: &AttentionHeadParams,
    variant: AttentionVariant,
    mask: &[bool],
) -> Result<AttentionTrace> {
    head_forward_with(content, relpos, params, variant, mask, HeadOptions::default())
}

pub fn head_forward_with(
    content: &Matrix,
    relpos: &RelativePositionTable,
    params: &AttentionHeadParams,
    variant: AttentionVariant,
    mask: &[bool],
    opts: HeadOptions,
) -> Result<AttentionTrace> {
    params.validate(variant)?;
    let mut g = Graph::new();
    let c = g.constant(content.clone());
    let r = g.constant(relpos.table.clone());
    let p = bind_head(&mut g, params);
    let hv = head_graph(&mut g, c, r, &p, variant, opts, mask)?;
    Ok(hv.trace(&g))
}

/// Splits `content` (and the relative table) into per-head column blocks,
/// runs every head, concatenates the outputs and projects with `w_o`.
pub fn multi_head_forward(
    content: &Matrix,
    heads: &[AttentionHeadParams],
    w_o: &Matrix,
    relpos: &RelativePositionTable,
    variant: AttentionVariant,
    mask: &[bool],
) -> Result<Matrix> {
    multi_head_forward_with(content, heads, w_o, relpos, variant, mask, HeadOptions::default())
}

pub fn multi_head_forward_with(
    content: &Matrix,
    heads: &[AttentionHeadParams],
    w_o: &Matrix,
    relpos: &RelativePositionTable,
    variant: AttentionVariant,
    mask: &[bool],
    opts: HeadOptions,
) -> Result<Matrix> {
    for h in heads {
        h.validate(variant)?;
    }
    let mut g = Graph::new();
    let c = g.constant(content.clone());
    let r = g.constant(relpos.table.clone());
    let bound: Vec<_> = heads.iter().map(|h| bind_head(&mut g, h)).collect();
    let w = g.constant(w_o.clone());
    let (out, _) = multi_head_graph(&mut g, c, r, &bound, w, variant, opts, mask)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(rows: &[[f64; 2]]) -> RelativePositionTable {
        RelativePositionTable::new(Matrix::from_rows(rows)).unwrap()
    }

    fn params(seed: u64, d: usize, variant: AttentionVariant) -> AttentionHeadParams {
        AttentionHeadParams::init(d, 16, variant, &mut SeededRng::new(seed))
    }

    #[test]
    fn single_token_uses_distance_zero() {
        let c = Matrix::from_rows(&[[1.0, 2.0]]);
        let r = rel(&[[0.5, -1.0], [7.0, 7.0]]);
        let p = params(1, 2, AttentionVariant::DisentangledStatic);
        let s = component_scores(&c, &r, &p).unwrap();
        assert_eq!(s.cc.shape(), (1, 1));
        let q_c = crate::numkernel::matmul(&c, &p.w_q_c).unwrap();
        let k_p0 = crate::numkernel::matmul(&Matrix::from_rows(&[[0.5, -1.0]]), &p.w_k_p).unwrap();
        let expect = crate::numkernel::dot(q_c.row(0), k_p0.row(0));
        assert!((s.cp.get(0, 0) - expect).abs() < 1e-15);
    }

    #[test]
    fn zero_content_zero_scores() {
        let c = Matrix::zeros(3, 2);
        let r = rel(&[[0.5, -1.0], [1.0, 2.0]]);
        let s = component_scores(&c, &r, &params(2, 2, AttentionVariant::DisentangledStatic)).unwrap();
        assert_eq!(s.cc.max_abs(), 0.0);
        assert_eq!(s.cp.max_abs(), 0.0);
        assert_eq!(s.pc.max_abs(), 0.0);
    }

    #[test]
    fn relpos_dimension_mismatch_is_an_error() {
        let c = Matrix::zeros(3, 2);
        let r = RelativePositionTable::new(Matrix::zeros(3, 3)).unwrap();
        assert!(component_scores(&c, &r, &params(2, 2, AttentionVariant::DisentangledStatic)).is_err());
    }

    #[test]
    fn zero_gate_matrix_gives_one_half() {
        let q = SeededRng::new(3).matrix(4, 3, -1.0, 1.0);
        let k = SeededRng::new(4).matrix(3, 3, -1.0, 1.0);
        let a = gate_matrix(&q, &k, &Matrix::zeros(3, 3)).unwrap();
        assert!(a.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn gate_depends_on_key_only_through_clipped_distance() {
        let q = SeededRng::new(5).matrix(6, 3, -1.0, 1.0);
        let k = SeededRng::new(6).matrix(3, 3, -1.0, 1.0); // k_max = 2
        let w = SeededRng::new(7).matrix(3, 3, -1.0, 1.0);
        let a = gate_matrix(&q, &k, &w).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                for l in 0..6 {
                    if clip_distance(i, j, 2) == clip_distance(i, l, 2) {
                        assert_eq!(a.get(i, j), a.get(i, l));
                    }
                }
            }
        }
        assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn apply_gate_cases() {
        let s = Matrix::from_rows(&[[1.0, -2.0], [3.5, 4.0]]);
        assert_eq!(apply_gate(&s, &Matrix::filled(2, 2, 1.0)).unwrap(), s);
        assert_eq!(apply_gate(&s, &Matrix::zeros(2, 2)).unwrap(), Matrix::zeros(2, 2));
        assert_eq!(apply_gate(&s, &Matrix::filled(2, 2, 0.5)).unwrap(), s.scale(0.5));
        assert!(apply_gate(&s, &Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn attend_single_and_uniform() {
        let c = Matrix::from_rows(&[[1.0, -1.0]]);
        let w_v = Matrix::from_rows(&[[2.0, 0.0], [1.0, 3.0]]);
        let z = Matrix::zeros(1, 1);
        let t = attend(&z, &z, &z, &c, &w_v, &[true]).unwrap();
        assert_eq!(t.weights, Matrix::filled(1, 1, 1.0));
        assert_eq!(t.output, crate::numkernel::matmul(&c, &w_v).unwrap());

        let c3 = SeededRng::new(8).matrix(3, 2, -1.0, 1.0);
        let eq = Matrix::filled(3, 3, 0.7);
        let t = attend(&eq, &eq, &eq, &c3, &w_v, &[true; 3]).unwrap();
        for &v in t.weights.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn attend_rejects_fully_masked_rows() {
        let c = Matrix::zeros(2, 2);
        let z = Matrix::zeros(2, 2);
        assert!(matches!(attend(&z, &z, &z, &c, &Matrix::identity(2), &[false, false]), Err(Error::FullyMasked { .. })));
    }

    #[test]
    fn masked_columns_get_zero_weight() {
        let c = SeededRng::new(9).matrix(4, 2, -1.0, 1.0);
        let r = rel(&[[0.1, 0.2], [0.3, 0.4], [0.5, 0.6]]);
        let p = params(10, 2, AttentionVariant::DisentangledGated);
        let t = head_forward(&c, &r, &p, AttentionVariant::DisentangledGated, &[true, true, false, true]).unwrap();
        for i in 0..4 {
            assert_eq!(t.weights.get(i, 2), 0.0);
            assert!((t.weights.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn variant_mismatch_is_reported() {
        let c = Matrix::zeros(2, 2);
        let r = rel(&[[0.1, 0.2], [0.3, 0.4]]);
        let p = params(11, 2, AttentionVariant::DisentangledStatic);
        assert!(matches!(
            head_forward(&c, &r, &p, AttentionVariant::DisentangledGated, &[true, true]),
            Err(Error::VariantMismatch { param: "w_g", .. })
        ));
        assert!(matches!(
            head_forward(&c, &r, &p, AttentionVariant::Entangled, &[true, true]),
            Err(Error::VariantMismatch { param: "abs_pos", .. })
        ));
    }

    #[test]
    fn zero_gate_weights_halve_the_cp_term() {
        let c = SeededRng::new(12).matrix(5, 3, -1.0, 1.0);
        let r = RelativePositionTable::init(3, 3, &mut SeededRng::new(13));
        let mut p = params(14, 3, AttentionVariant::DisentangledGated);
        p.w_g = Some(Matrix::zeros(3, 3));
        let t = head_forward(&c, &r, &p, AttentionVariant::DisentangledGated, &[true; 5]).unwrap();
        let cc = t.scores_cc.unwrap();
        let cp = t.scores_cp.unwrap();
        let pc = t.scores_pc.unwrap();
        let expect = cc.add(&cp.scale(0.5)).unwrap().add(&pc).unwrap().map(|v| v / 9f64.sqrt());
        assert_eq!(t.scores, expect);
    }

    #[test]
    fn forced_unit_gate_matches_static() {
        let c = SeededRng::new(15).matrix(4, 3, -1.0, 1.0);
        let r = RelativePositionTable::init(2, 3, &mut SeededRng::new(16));
        let p = params(17, 3, AttentionVariant::DisentangledGated);
        let opts = HeadOptions { gate_override: Some(1.0), ..Default::default() };
        let gated = head_forward_with(&c, &r, &p, AttentionVariant::DisentangledGated, &[true; 4], opts).unwrap();
        let fixed = head_forward(&c, &r, &p, AttentionVariant::DisentangledStatic, &[true; 4]).unwrap();
        assert!(gated.output.max_abs_diff(&fixed.output) <= 1e-12);
    }

    #[test]
    fn literal_scaling_divides_components() {
        let c = SeededRng::new(18).matrix(3, 4, -1.0, 1.0);
        let r = RelativePositionTable::init(2, 4, &mut SeededRng::new(19));
        let p = params(20, 4, AttentionVariant::DisentangledStatic);
        let plain = head_forward(&c, &r, &p, AttentionVariant::DisentangledStatic, &[true; 3]).unwrap();
        let lit = head_forward_with(
            &c,
            &r,
            &p,
            AttentionVariant::DisentangledStatic,
            &[true; 3],
            HeadOptions { literal_scaling: true, ..Default::default() },
        )
        .unwrap();
        assert!(lit.scores.max_abs_diff(&plain.scores.scale(0.5)) < 1e-14);
    }

    #[test]
    fn entangled_with_zero_positions_is_content_attention() {
        let c = SeededRng::new(21).matrix(3, 2, -1.0, 1.0);
        let r = rel(&[[0.0, 0.0], [0.0, 0.0]]);
        let mut p = params(22, 2, AttentionVariant::Entangled);
        p.abs_pos = Some(Matrix::zeros(16, 2));
        let t = head_forward(&c, &r, &p, AttentionVariant::Entangled, &[true; 3]).unwrap();
        let q = crate::numkernel::matmul(&c, &p.w_q_c).unwrap();
        let k = crate::numkernel::matmul(&c, &p.w_k_c).unwrap();
        let s = crate::numkernel::matmul_nt(&q, &k).unwrap().map(|v| v / 2f64.sqrt());
        assert!(t.scores.max_abs_diff(&s) < 1e-15);
        let w = crate::numkernel::softmax_rows(&s);
        let v = crate::numkernel::matmul(&c, &p.w_v).unwrap();
        let out = crate::numkernel::matmul(&w, &v).unwrap();
        assert!(t.output.max_abs_diff(&out) < 1e-15);
    }

    #[test]
    fn single_head_with_identity_projection_matches_head_forward() {
        let c = SeededRng::new(23).matrix(3, 4, -1.0, 1.0);
        let r = RelativePositionTable::init(2, 4, &mut SeededRng::new(24));
        let p = params(25, 4, AttentionVariant::DisentangledGated);
        let single = head_forward(&c, &r, &p, AttentionVariant::DisentangledGated, &[true; 3]).unwrap();
        let multi = multi_head_forward(&c, &[p], &Matrix::identity(4), &r, AttentionVariant::DisentangledGated, &[true; 3]).unwrap();
        assert!(single.output.max_abs_diff(&multi) < 1e-15);
    }

    #[test]
    fn multi_head_shape_and_divisibility() {
        let c = SeededRng::new(26).matrix(5, 6, -1.0, 1.0);
        let r = RelativePositionTable::init(3, 6, &mut SeededRng::new(27));
        let heads: Vec<_> = (0..3).map(|k| params(30 + k, 2, AttentionVariant::DisentangledStatic)).collect();
        let out = multi_head_forward(&c, &heads, &Matrix::identity(6), &r, AttentionVariant::DisentangledStatic, &[true; 5]).unwrap();
        assert_eq!(out.shape(), (5, 6));
        let four: Vec<_> = (0..4).map(|k| params(40 + k, 2, AttentionVariant::DisentangledStatic)).collect();
        assert!(multi_head_forward(&c, &four, &Matrix::identity(6), &r, AttentionVariant::DisentangledStatic, &[true; 5]).is_err());
    }

    #[test]
    fn variant_parsing() {
        for v in AttentionVariant::ALL {
            assert_eq!(v.name().parse::<AttentionVariant>().unwrap(), v);
        }
        assert!("sparse".parse::<AttentionVariant>().is_err());
    }
}
