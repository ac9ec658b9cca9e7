//! Attention-based feedforward classifier head.
//!
//! Consumes the encoder's `n × d_model` sequence:
//!
//! ```text
//! h_combined = relu(x·W₂ + b₂) + relu(x·W₁ + b₁)            position-wise
//! attn       = softmax(Q·Kᵀ / √H) · V,  Q,K,V = h_combined·W_{Q,K,V}
//! h_residual = relu(attn·W_r + b_r) + attn
//! h_multi    = relu([h_residual ∥ h_combined]·W_m + b_m)
//! y          = softmax(mean_unmasked(h_multi)·W_out + b_out)
//! ```

use crate::error::{Error, Result};
use crate::numkernel::{glorot_init, Matrix, SeededRng};
use crate::tape::{Graph, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct AbfnnParams<T = Matrix> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub w_r: T,
    pub b_r: T,
    pub w_m: T,
    pub b_m: T,
    pub w_out: T,
    pub b_out: T,
}

impl AbfnnParams<Matrix> {
    pub fn init(d_model: usize, hidden: usize, num_classes: usize, rng: &mut SeededRng) -> Self {
        AbfnnParams {
            w1: glorot_init(d_model, hidden, rng),
            b1: Matrix::zeros(1, hidden),
            w2: glorot_init(d_model, hidden, rng),
            b2: Matrix::zeros(1, hidden),
            w_q: glorot_init(hidden, hidden, rng),
            w_k: glorot_init(hidden, hidden, rng),
            w_v: glorot_init(hidden, hidden, rng),
            w_r: glorot_init(hidden, hidden, rng),
            b_r: Matrix::zeros(1, hidden),
            w_m: glorot_init(2 * hidden, hidden, rng),
            b_m: Matrix::zeros(1, hidden),
            w_out: glorot_init(hidden, num_classes, rng),
            b_out: Matrix::zeros(1, num_classes),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.w_out.cols()
    }

    /// Checks every tensor against the shapes implied by `w1` and `w_out`.
    pub fn validate(&self) -> Result<()> {
        let d = self.w1.rows();
        let h = self.hidden();
        let c = self.num_classes();
        if c < 2 {
            return Err(Error::InvalidArgument(format!("classifier needs at least 2 classes, got {c}")));
        }
        let expected = [
            ("w2", &self.w2, (d, h)),
            ("b1", &self.b1, (1, h)),
            ("b2", &self.b2, (1, h)),
            ("w_q", &self.w_q, (h, h)),
            ("w_k", &self.w_k, (h, h)),
            ("w_v", &self.w_v, (h, h)),
            ("w_r", &self.w_r, (h, h)),
            ("b_r", &self.b_r, (1, h)),
            ("w_m", &self.w_m, (2 * h, h)),
            ("b_m", &self.b_m, (1, h)),
            ("b_out", &self.b_out, (1, c)),
        ];
        for (name, m, shape) in expected {
            if m.shape() != shape {
                return Err(Error::TensorShape { name: name.into(), found: m.shape(), expected: shape });
            }
        }
        Ok(())
    }
}

impl<T> AbfnnParams<T> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a T) -> U) -> AbfnnParams<U> {
        let mut m = |name: &str, v: &'a T| f(&format!("{prefix}.{name}"), v);
        AbfnnParams {
            w1: m("w1", &self.w1),
            b1: m("b1", &self.b1),
            w2: m("w2", &self.w2),
            b2: m("b2", &self.b2),
            w_q: m("w_q", &self.w_q),
            w_k: m("w_k", &self.w_k),
            w_v: m("w_v", &self.w_v),
            w_r: m("w_r", &self.w_r),
            b_r: m("b_r", &self.b_r),
            w_m: m("w_m", &self.w_m),
            b_m: m("b_m", &self.b_m),
            w_out: m("w_out", &self.w_out),
            b_out: m("b_out", &self.b_out),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        let fields: [(&str, &mut T); 13] = [
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
            ("w_q", &mut self.w_q),
            ("w_k", &mut self.w_k),
            ("w_v", &mut self.w_v),
            ("w_r", &mut self.w_r),
            ("b_r", &mut self.b_r),
            ("w_m", &mut self.w_m),
            ("b_m", &mut self.b_m),
            ("w_out", &mut self.w_out),
            ("b_out", &mut self.b_out),
        ];
        for (name, v) in fields {
            f(&format!("{prefix}.{name}"), v);
        }
    }
}

pub(crate) fn branch_graph(g: &mut Graph, x: Var, p: &AbfnnParams<Var>) -> Result<Var> {
    let a = g.matmul(x, p.w1)?;
    let a = g.add_row(a, p.b1)?;
    let a = g.relu(a);
    let b = g.matmul(x, p.w2)?;
    let b = g.add_row(b, p.b2)?;
    let b = g.relu(b);
    g.add(b, a)
}

pub(crate) fn feature_attention_graph(g: &mut Graph, h: Var, p: &AbfnnParams<Var>, mask: &[bool]) -> Result<Var> {
    let d_k = g.shape(h).1 as f64;
    let q = g.matmul(h, p.w_q)?;
    let k = g.matmul(h, p.w_k)?;
    let v = g.matmul(h, p.w_v)?;
    let s = g.matmul_nt(q, k)?;
    let s = g.div_scalar(s, d_k.sqrt());
    let w = g.masked_softmax_rows(s, mask)?;
    g.matmul(w, v)
}

pub(crate) fn residual_multiscale_graph(g: &mut Graph, attn: Var, h_combined: Var, p: &AbfnnParams<Var>) -> Result<Var> {
    let r = g.matmul(attn, p.w_r)?;
    let r = g.add_row(r, p.b_r)?;
    let r = g.relu(r);
    let h_residual = g.add(r, attn)?;
    let joined = g.concat_cols(&[h_residual, h_combined])?;
    let m = g.matmul(joined, p.w_m)?;
    let m = g.add_row(m, p.b_m)?;
    Ok(g.relu(m))
}

pub(crate) fn classify_graph(g: &mut Graph, h_multi: Var, p: &AbfnnParams<Var>, mask: &[bool]) -> Result<Var> {
    let pooled = g.masked_mean_rows(h_multi, mask)?;
    let logits = g.matmul(pooled, p.w_out)?;
    let logits = g.add_row(logits, p.b_out)?;
    Ok(g.softmax_rows(logits))
}

pub(crate) fn abfnn_graph(g: &mut Graph, x: Var, mask: &[bool], p: &AbfnnParams<Var>) -> Result<Var> {
    let n = g.shape(x).0;
    if mask.len() != n {
        return Err(Error::Shape { op: "abfnn mask", left: g.shape(x), right: (1, mask.len()) });
    }
    let h = branch_graph(g, x, p)?;
    let a = feature_attention_graph(g, h, p, mask)?;
    let m = residual_multiscale_graph(g, a, h, p)?;
    classify_graph(g, m, p, mask)
}

fn with_graph<R>(params: &AbfnnParams, f: impl FnOnce(&mut Graph, &AbfnnParams<Var>) -> Result<R>) -> Result<R> {
    params.validate()?;
    let mut g = Graph::new();
    let p = params.map("", &mut |_, m| g.constant(m.clone()));
    f(&mut g, &p)
}

/// Sum of the two position-wise ReLU branches.
pub fn branch_combine(x: &Matrix, params: &AbfnnParams) -> Result<Matrix> {
    with_graph(params, |g, p| {
        let xv = g.constant(x.clone());
        let out = branch_graph(g, xv, p)?;
        Ok(g.value(out).clone())
    })
}

/// Single-head scaled dot-product attention across the `n` positions.
pub fn feature_attention(h_combined: &Matrix, params: &AbfnnParams) -> Result<Matrix> {
    feature_attention_masked(h_combined, params, &vec![true; h_combined.rows()])
}

/// [`feature_attention`] restricted to keys whose mask entry is `true`.
pub fn feature_attention_masked(h_combined: &Matrix, params: &AbfnnParams, mask: &[bool]) -> Result<Matrix> {
    with_graph(params, |g, p| {
        let h = g.constant(h_combined.clone());
        let out = feature_attention_graph(g, h, p, mask)?;
        Ok(g.value(out).clone())
    })
}

pub fn residual_multiscale(attn: &Matrix, h_combined: &Matrix, params: &AbfnnParams) -> Result<Matrix> {
    with_graph(params, |g, p| {
        let a = g.constant(attn.clone());
        let h = g.constant(h_combined.clone());
        let out = residual_multiscale_graph(g, a, h, p)?;
        Ok(g.value(out).clone())
    })
}

/// Mean-pools the unmasked rows and returns class probabilities.
pub fn classify(h_multi: &Matrix, mask: &[bool], params: &AbfnnParams) -> Result<Vec<f64>> {
    with_graph(params, |g, p| {
        let h = g.constant(h_multi.clone());
        let out = classify_graph(g, h, p, mask)?;
        Ok(g.value(out).data().to_vec())
    })
}

pub fn abfnn_forward(x: &Matrix, mask: &[bool], params: &AbfnnParams) -> Result<Vec<f64>> {
    with_graph(params, |g, p| {
        let xv = g.constant(x.clone());
        let out = abfnn_graph(g, xv, mask, p)?;
        Ok(g.value(out).data().to_vec())
    })
}
