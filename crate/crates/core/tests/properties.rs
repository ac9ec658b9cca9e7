mod common;

use gated_disentangle::abfnn::{abfnn_forward, AbfnnParams};
use gated_disentangle::attention::{head_forward, multi_head_forward, AttentionHeadParams, AttentionVariant};
use gated_disentangle::embeddings::RelativePositionTable;
use gated_disentangle::encoder::{encoder_forward, EncoderConfig, EncoderParams};
use gated_disentangle::model::{Classifier, ModelConfig};
use gated_disentangle::{Matrix, SeededRng};
use proptest::prelude::*;

fn variant() -> impl Strategy<Value = AttentionVariant> {
    prop_oneof![Just(AttentionVariant::Entangled), Just(AttentionVariant::DisentangledStatic), Just(AttentionVariant::DisentangledGated),]
}

fn disentangled() -> impl Strategy<Value = AttentionVariant> {
    prop_oneof![Just(AttentionVariant::DisentangledStatic), Just(AttentionVariant::DisentangledGated)]
}

fn mask_with_one_true(n: usize, seed: u64) -> Vec<bool> {
    let mut rng = SeededRng::new(seed);
    let mut mask: Vec<bool> = (0..n).map(|_| rng.chance(0.7)).collect();
    mask[rng.below(n)] = true;
    mask
}

/// Content placed after `shift` masked filler rows.
fn shifted(content: &Matrix, shift: usize, filler: f64) -> (Matrix, Vec<bool>) {
    let (n, d) = content.shape();
    let mut rows = vec![vec![filler; d]; shift];
    rows.extend((0..n).map(|i| content.row(i).to_vec()));
    let mask = (0..shift + n).map(|i| i >= shift).collect();
    (Matrix::from_rows(&rows), mask)
}

fn block(m: &Matrix, start: usize, len: usize) -> Matrix {
    m.slice_rows(start, len).unwrap().slice_cols(start, len).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gate_entries_lie_strictly_inside_unit_interval(
        seed in any::<u64>(), n in 1usize..7, scale in prop_oneof![Just(1.0), Just(50.0), Just(1e4)],
    ) {
        let mut rng = SeededRng::new(seed);
        let content = rng.matrix(n, 3, -scale, scale);
        let relpos = RelativePositionTable::new(rng.matrix(4, 3, -scale, scale)).unwrap();
        let p = AttentionHeadParams::init(3, 8, AttentionVariant::DisentangledGated, &mut rng);
        let t = head_forward(&content, &relpos, &p, AttentionVariant::DisentangledGated, &vec![true; n]).unwrap();
        for &a in t.gate.unwrap().data() {
            prop_assert!(a > 0.0 && a < 1.0, "{a}");
        }
    }

    #[test]
    fn attention_rows_are_distributions_over_unmasked_keys(seed in any::<u64>(), n in 1usize..8, v in variant()) {
        let mut rng = SeededRng::new(seed);
        let content = rng.matrix(n, 4, -2.0, 2.0);
        let relpos = RelativePositionTable::new(rng.matrix(3, 4, -1.0, 1.0)).unwrap();
        let p = AttentionHeadParams::init(4, 8, v, &mut rng);
        let mask = mask_with_one_true(n, seed ^ 1);
        let t = head_forward(&content, &relpos, &p, v, &mask).unwrap();
        for i in 0..n {
            let row = t.weights.row(i);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (j, &w) in row.iter().enumerate() {
                prop_assert!(w >= 0.0);
                if !mask[j] {
                    prop_assert_eq!(w, 0.0);
                }
            }
        }
    }

    #[test]
    fn relabeling_heads_with_matching_blocks_is_invariant(seed in any::<u64>(), v in variant()) {
        // Heads see column blocks, so a relabeling permutes the parameter
        // sets, the content and relative-position column blocks, and the
        // row blocks of w_o together.
        let (n, h, dh) = (4, 3, 2);
        let d = h * dh;
        let mut rng = SeededRng::new(seed);
        let content = rng.matrix(n, d, -1.0, 1.0);
        let relpos = rng.matrix(3, d, -1.0, 1.0);
        let heads: Vec<_> = (0..h).map(|_| AttentionHeadParams::init(dh, 8, v, &mut rng)).collect();
        let w_o = rng.matrix(d, d, -1.0, 1.0);
        let perm = [2usize, 0, 1];

        let permute_cols = |m: &Matrix| {
            let parts: Vec<Matrix> = perm.iter().map(|&k| m.slice_cols(k * dh, dh).unwrap()).collect();
            Matrix::concat_cols(&parts.iter().collect::<Vec<_>>()).unwrap()
        };
        let w_o_rows: Vec<Vec<f64>> = perm
            .iter()
            .flat_map(|&k| (k * dh..(k + 1) * dh).map(|r| w_o.row(r).to_vec()))
            .collect();
        let heads_p: Vec<_> = perm.iter().map(|&k| heads[k].clone()).collect();
        let mask = vec![true; n];

        let a = multi_head_forward(&content, &heads, &w_o, &RelativePositionTable::new(relpos.clone()).unwrap(), v, &mask).unwrap();
        let b = multi_head_forward(
            &permute_cols(&content),
            &heads_p,
            &Matrix::from_rows(&w_o_rows),
            &RelativePositionTable::new(permute_cols(&relpos)).unwrap(),
            v,
            &mask,
        )
        .unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn disentangled_scores_ignore_a_common_index_shift(
        seed in any::<u64>(), n in 1usize..6, shift in 1usize..6, v in disentangled(),
    ) {
        let mut rng = SeededRng::new(seed);
        let content = rng.matrix(n, 3, -1.0, 1.0);
        let relpos = RelativePositionTable::new(rng.matrix(4, 3, -1.0, 1.0)).unwrap();
        let p = AttentionHeadParams::init(3, 16, v, &mut rng);
        let base = head_forward(&content, &relpos, &p, v, &vec![true; n]).unwrap();
        let (moved, mask) = shifted(&content, shift, 0.3);
        let t = head_forward(&moved, &relpos, &p, v, &mask).unwrap();
        prop_assert!(block(&t.scores, shift, n).max_abs_diff(&base.scores) < 1e-12);
        prop_assert!(block(&t.weights, shift, n).max_abs_diff(&base.weights) < 1e-12);
        prop_assert!(t.output.slice_rows(shift, n).unwrap().max_abs_diff(&base.output) < 1e-12);
    }

    #[test]
    fn disentangled_models_cannot_tell_a_sequence_from_its_reverse(seed in any::<u64>(), n in 1usize..7, v in disentangled()) {
        // Distances are unsigned and there is no absolute position signal.
        let enc = EncoderConfig { num_layers: 2, d_model: 8, num_heads: 2, ffn_size: 8, k_max: 3, max_len: 8, variant: v, literal_scaling: false };
        let model = Classifier::new(ModelConfig::new(enc, 12, 2), seed).unwrap();
        let mut rng = SeededRng::new(seed ^ 7);
        let ids: Vec<usize> = (0..n).map(|_| 2 + rng.below(10)).collect();
        let rev: Vec<usize> = ids.iter().rev().copied().collect();
        let mask = vec![true; n];
        let a = model.forward(&ids, &mask).unwrap();
        let b = model.forward(&rev, &mask).unwrap();
        prop_assert!(common::max_diff_vec(&a, &b) < 1e-12);
    }

    #[test]
    fn swapping_branch_parameters_leaves_the_head_unchanged(seed in any::<u64>(), n in 1usize..6) {
        let mut rng = SeededRng::new(seed);
        let mut p = AbfnnParams::init(4, 5, 3, &mut rng);
        p.b1 = rng.matrix(1, 5, -0.5, 0.5);
        p.b2 = rng.matrix(1, 5, -0.5, 0.5);
        let x = rng.matrix(n, 4, -2.0, 2.0);
        let mask = mask_with_one_true(n, seed ^ 3);
        let a = abfnn_forward(&x, &mask, &p).unwrap();
        let mut q = p.clone();
        std::mem::swap(&mut q.w1, &mut q.w2);
        std::mem::swap(&mut q.b1, &mut q.b2);
        let b = abfnn_forward(&x, &mask, &q).unwrap();
        prop_assert!(common::max_diff_vec(&a, &b) < 1e-12);
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(a.iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn entangled_scores_change_under_an_index_shift() {
    let mut rng = SeededRng::new(11);
    let content = rng.matrix(3, 3, -1.0, 1.0);
    let relpos = RelativePositionTable::new(rng.matrix(4, 3, -1.0, 1.0)).unwrap();
    let v = AttentionVariant::Entangled;
    let p = AttentionHeadParams::init(3, 16, v, &mut rng);
    let base = head_forward(&content, &relpos, &p, v, &[true; 3]).unwrap();
    let (moved, mask) = shifted(&content, 2, 0.3);
    let t = head_forward(&moved, &relpos, &p, v, &mask).unwrap();
    assert!(block(&t.scores, 2, 3).max_abs_diff(&base.scores) > 1e-3);
}

#[test]
fn entangled_models_distinguish_a_sequence_from_its_reverse() {
    let enc = EncoderConfig {
        num_layers: 1,
        d_model: 8,
        num_heads: 2,
        ffn_size: 8,
        k_max: 3,
        max_len: 8,
        variant: AttentionVariant::Entangled,
        literal_scaling: false,
    };
    let model = Classifier::new(ModelConfig::new(enc, 12, 2), 3).unwrap();
    let mask = [true; 4];
    let a = model.forward(&[2, 3, 4, 5], &mask).unwrap();
    let b = model.forward(&[5, 4, 3, 2], &mask).unwrap();
    assert!(common::max_diff_vec(&a, &b) > 1e-6);
}

#[test]
fn encoder_outputs_stay_finite_over_many_seeds() {
    for seed in 0..1000u64 {
        let mut rng = SeededRng::new(seed);
        let variant = AttentionVariant::ALL[rng.below(3)];
        let heads = 1 + rng.below(2);
        let cfg = EncoderConfig {
            num_layers: 1 + rng.below(2),
            d_model: 4 * heads,
            num_heads: heads,
            ffn_size: 1 + rng.below(8),
            k_max: 1 + rng.below(4),
            max_len: 8,
            variant,
            literal_scaling: rng.chance(0.5),
        };
        let p = EncoderParams::init(&cfg, 10, &mut rng);
        let n = 1 + rng.below(8);
        let ids: Vec<usize> = (0..n).map(|_| rng.below(10)).collect();
        let mask = mask_with_one_true(n, seed);
        let out = encoder_forward(&ids, &mask, &p, &cfg).unwrap();
        assert!(out.is_finite(), "seed {seed}");
    }
}
