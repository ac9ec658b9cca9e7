//! Scalar reference implementations built from nested loops over
//! `Vec<Vec<f64>>`. Nothing here calls the library's matrix kernels.

#![allow(dead_code, clippy::needless_range_loop)]

use gated_disentangle::abfnn::AbfnnParams;
use gated_disentangle::attention::{AttentionHeadParams, AttentionVariant};
use gated_disentangle::encoder::{EncoderConfig, EncoderLayerParams, EncoderParams};
use gated_disentangle::model::{ModelConfig, ModelParams};
use gated_disentangle::Matrix;

pub type M = Vec<Vec<f64>>;

pub const LN_EPS: f64 = 1e-5;

pub fn m(x: &Matrix) -> M {
    (0..x.rows()).map(|r| (0..x.cols()).map(|c| x.get(r, c)).collect()).collect()
}

pub fn to_matrix(x: &M) -> Matrix {
    Matrix::from_rows(x)
}

pub fn mm(a: &M, b: &M) -> M {
    let (n, k, p) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; p]; n];
    for i in 0..n {
        assert_eq!(a[i].len(), k);
        for j in 0..p {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect()).collect()
}

pub fn add_bias(a: &M, bias: &M) -> M {
    a.iter().map(|row| row.iter().zip(&bias[0]).map(|(u, v)| u + v).collect()).collect()
}

pub fn relu(a: &M) -> M {
    a.iter().map(|row| row.iter().map(|v| v.max(0.0)).collect()).collect()
}

pub fn cols(a: &M, start: usize, len: usize) -> M {
    a.iter().map(|row| row[start..start + len].to_vec()).collect()
}

pub fn concat(parts: &[M]) -> M {
    (0..parts[0].len()).map(|i| parts.iter().flat_map(|p| p[i].iter().copied()).collect()).collect()
}

pub fn clip(i: usize, j: usize, k_max: usize) -> usize {
    let d = i.abs_diff(j);
    if d > k_max {
        k_max
    } else {
        d
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax_masked(row: &[f64], mask: &[bool]) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for j in 0..row.len() {
        if mask[j] && row[j] > max {
            max = row[j];
        }
    }
    let mut e = vec![0.0; row.len()];
    let mut total = 0.0;
    for j in 0..row.len() {
        if mask[j] {
            e[j] = (row[j] - max).exp();
            total += e[j];
        }
    }
    e.iter().map(|v| v / total).collect()
}

pub struct HeadOracle {
    pub cc: M,
    pub cp: M,
    pub pc: M,
    pub gate: Option<M>,
    pub scores: M,
    pub weights: M,
    pub output: M,
}

/// One head, scalar by scalar. `relpos` is the head's `(k_max+1) × d` slice.
pub fn head(
    content: &M,
    relpos: &M,
    p: &AttentionHeadParams,
    variant: AttentionVariant,
    mask: &[bool],
    gate_override: Option<f64>,
    literal_scaling: bool,
) -> HeadOracle {
    let n = content.len();
    let d = content[0].len();
    let (w_q_c, w_k_c, w_q_p, w_k_p, w_v) = (m(&p.w_q_c), m(&p.w_k_c), m(&p.w_q_p), m(&p.w_k_p), m(&p.w_v));

    if variant == AttentionVariant::Entangled {
        let abs = m(p.abs_pos.as_ref().unwrap());
        let x: M = (0..n).map(|i| (0..d).map(|c| content[i][c] + abs[i][c]).collect()).collect();
        let (q, k, v) = (mm(&x, &w_q_c), mm(&x, &w_k_c), mm(&x, &w_v));
        let mut scores = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                scores[i][j] = dot(&q[i], &k[j]) / (d as f64).sqrt();
            }
        }
        let weights: M = scores.iter().map(|r| softmax_masked(r, mask)).collect();
        let output = mix(&weights, &v);
        let zero = vec![vec![0.0; n]; n];
        return HeadOracle { cc: zero.clone(), cp: zero.clone(), pc: zero, gate: None, scores, weights, output };
    }

    let k_max = relpos.len() - 1;
    let q_c = mm(content, &w_q_c);
    let k_c = mm(content, &w_k_c);
    let q_p = mm(relpos, &w_q_p);
    let k_p = mm(relpos, &w_k_p);
    let v = mm(content, &w_v);
    let scale = if literal_scaling { (d as f64).sqrt() } else { 1.0 };

    let mut cc = vec![vec![0.0; n]; n];
    let mut cp = vec![vec![0.0; n]; n];
    let mut pc = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let r = clip(i, j, k_max);
            cc[i][j] = dot(&q_c[i], &k_c[j]) / scale;
            cp[i][j] = dot(&q_c[i], &k_p[r]) / scale;
            pc[i][j] = dot(&q_p[r], &k_c[j]) / scale;
        }
    }

    let gate = (variant == AttentionVariant::DisentangledGated).then(|| {
        let mut a = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                a[i][j] = match gate_override {
                    Some(c) => c,
                    None => {
                        let w_g = m(p.w_g.as_ref().unwrap());
                        let r = clip(i, j, k_max);
                        let mut s = 0.0;
                        for a_ in 0..d {
                            for b in 0..d {
                                s += q_c[i][a_] * w_g[a_][b] * k_p[r][b];
                            }
                        }
                        sigmoid(s)
                    }
                };
            }
        }
        a
    });

    let mut scores = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let cp_eff = gate.as_ref().map_or(cp[i][j], |g| g[i][j] * cp[i][j]);
            scores[i][j] = (cc[i][j] + cp_eff + pc[i][j]) / (3.0 * d as f64).sqrt();
        }
    }
    let weights: M = scores.iter().map(|r| softmax_masked(r, mask)).collect();
    let output = mix(&weights, &v);
    HeadOracle { cc, cp, pc, gate, scores, weights, output }
}

fn mix(weights: &M, v: &M) -> M {
    let n = weights.len();
    let d = v[0].len();
    let mut out = vec![vec![0.0; d]; n];
    for i in 0..n {
        for j in 0..n {
            for c in 0..d {
                out[i][c] += weights[i][j] * v[j][c];
            }
        }
    }
    out
}

pub fn multi_head(
    content: &M,
    heads: &[AttentionHeadParams],
    w_o: &Matrix,
    relpos: &M,
    variant: AttentionVariant,
    mask: &[bool],
    literal: bool,
) -> (M, Vec<HeadOracle>) {
    let d_head = content[0].len() / heads.len();
    let mut outs = Vec::new();
    let mut traces = Vec::new();
    for (h, p) in heads.iter().enumerate() {
        let c = cols(content, h * d_head, d_head);
        let r = if variant.is_disentangled() { cols(relpos, h * d_head, d_head) } else { relpos.clone() };
        let t = head(&c, &r, p, variant, mask, None, literal);
        outs.push(t.output.clone());
        traces.push(t);
    }
    (mm(&concat(&outs), &m(w_o)), traces)
}

pub fn layer_norm(x: &M, gain: &Matrix, bias: &Matrix) -> M {
    let d = x[0].len();
    x.iter()
        .map(|row| {
            let mut mean = 0.0;
            for v in row {
                mean += v;
            }
            mean /= d as f64;
            let mut var = 0.0;
            for v in row {
                var += (v - mean) * (v - mean);
            }
            var /= d as f64;
            let s = (var + LN_EPS).sqrt();
            (0..d).map(|c| (row[c] - mean) / s * gain.get(0, c) + bias.get(0, c)).collect()
        })
        .collect()
}

pub fn layer(x: &M, relpos: &M, p: &EncoderLayerParams, config: &EncoderConfig, mask: &[bool]) -> (M, Vec<HeadOracle>) {
    let (attn, traces) = multi_head(x, &p.heads, &p.w_o, relpos, config.variant, mask, config.literal_scaling);
    let y = layer_norm(&add(x, &attn), &p.ln1_gain, &p.ln1_bias);
    let h = relu(&add_bias(&mm(&y, &m(&p.ffn_w1)), &m(&p.ffn_b1)));
    let f = add_bias(&mm(&h, &m(&p.ffn_w2)), &m(&p.ffn_b2));
    (layer_norm(&add(&y, &f), &p.ln2_gain, &p.ln2_bias), traces)
}

pub fn encoder(ids: &[usize], mask: &[bool], p: &EncoderParams, config: &EncoderConfig) -> (M, Vec<Vec<HeadOracle>>) {
    let table = m(&p.embeddings);
    let relpos = m(&p.relpos);
    let mut x: M = ids.iter().map(|&id| table[id].clone()).collect();
    let mut all = Vec::new();
    for l in &p.layers {
        let (next, traces) = layer(&x, &relpos, l, config, mask);
        x = next;
        all.push(traces);
    }
    (x, all)
}

pub fn branch_combine(x: &M, p: &AbfnnParams) -> M {
    let a = relu(&add_bias(&mm(x, &m(&p.w1)), &m(&p.b1)));
    let b = relu(&add_bias(&mm(x, &m(&p.w2)), &m(&p.b2)));
    add(&b, &a)
}

pub fn feature_attention(h: &M, p: &AbfnnParams, mask: &[bool]) -> M {
    let (q, k, v) = (mm(h, &m(&p.w_q)), mm(h, &m(&p.w_k)), mm(h, &m(&p.w_v)));
    let n = h.len();
    let d_k = h[0].len() as f64;
    let mut weights = Vec::new();
    for i in 0..n {
        let row: Vec<f64> = (0..n).map(|j| dot(&q[i], &k[j]) / d_k.sqrt()).collect();
        weights.push(softmax_masked(&row, mask));
    }
    mix(&weights, &v)
}

pub fn residual_multiscale(attn: &M, h: &M, p: &AbfnnParams) -> M {
    let r = relu(&add_bias(&mm(attn, &m(&p.w_r)), &m(&p.b_r)));
    let h_res = add(&r, attn);
    relu(&add_bias(&mm(&concat(&[h_res, h.clone()]), &m(&p.w_m)), &m(&p.b_m)))
}

pub fn classify(h_multi: &M, mask: &[bool], p: &AbfnnParams) -> Vec<f64> {
    let width = h_multi[0].len();
    let mut pooled = vec![0.0; width];
    let mut count = 0.0;
    for (row, &keep) in h_multi.iter().zip(mask) {
        if keep {
            for c in 0..width {
                pooled[c] += row[c];
            }
            count += 1.0;
        }
    }
    for v in pooled.iter_mut() {
        *v /= count;
    }
    let logits = add_bias(&mm(&vec![pooled], &m(&p.w_out)), &m(&p.b_out));
    softmax_masked(&logits[0], &vec![true; logits[0].len()])
}

pub fn abfnn(x: &M, mask: &[bool], p: &AbfnnParams) -> Vec<f64> {
    let h = branch_combine(x, p);
    let a = feature_attention(&h, p, mask);
    let multi = residual_multiscale(&a, &h, p);
    classify(&multi, mask, p)
}

pub fn model(ids: &[usize], mask: &[bool], p: &ModelParams, config: &ModelConfig) -> Vec<f64> {
    let (x, _) = encoder(ids, mask, &p.encoder, &config.encoder);
    abfnn(&x, mask, &p.head)
}

pub fn max_diff(a: &M, b: &Matrix) -> f64 {
    assert_eq!((a.len(), a[0].len()), b.shape());
    let mut worst = 0.0f64;
    for i in 0..a.len() {
        for j in 0..a[0].len() {
            worst = worst.max((a[i][j] - b.get(i, j)).abs());
        }
    }
    worst
}

pub fn max_diff_vec(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Hand-set two-token, two-dimensional gated head used by several tests.
pub fn hand_gated_case() -> (Matrix, Matrix, AttentionHeadParams) {
    let content = Matrix::from_rows(&[[0.5, -1.0], [1.5, 0.25]]);
    let relpos = Matrix::from_rows(&[[0.1, 0.2], [-0.3, 0.4]]);
    let params = AttentionHeadParams {
        w_q_c: Matrix::from_rows(&[[1.0, 0.5], [-0.5, 2.0]]),
        w_k_c: Matrix::from_rows(&[[0.3, -1.2], [0.7, 0.1]]),
        w_q_p: Matrix::from_rows(&[[2.0, 0.0], [1.0, -1.0]]),
        w_k_p: Matrix::from_rows(&[[-0.4, 0.9], [1.1, 0.6]]),
        w_v: Matrix::from_rows(&[[1.0, -2.0], [0.5, 0.75]]),
        w_g: Some(Matrix::from_rows(&[[0.8, -0.6], [0.2, 1.4]])),
        abs_pos: None,
    };
    (content, relpos, params)
}
