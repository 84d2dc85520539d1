use camseg_core::diffusion::{cosine_schedule, diffusion_loss, Denoiser, DenoiserConfig, Parameterization};
use camseg_core::seed::rng_from;
use camseg_core::transformer::{
    build_inference_sequence, build_sequence_with_ratio, build_training_sequence, sample_mask_ratio, MaskPlan,
    MaskedTransformer, Segment, SequenceBatch, TransformerConfig,
};
use camseg_tensor::{gradcheck_params, Graph, Tensor};

fn tiny(drop_masked: bool) -> TransformerConfig {
    TransformerConfig {
        width: 16,
        heads: 2,
        encoder_depth: 2,
        decoder_depth: 1,
        mlp_ratio: 2,
        drop_masked,
        ..TransformerConfig::default()
    }
}

fn latents(l: usize, z: usize, seed: u64) -> Tensor<f64> {
    Tensor::from_fn([l, z], |i| ((i as f64 + 1.0) * (seed as f64 + 0.37)).sin())
}

fn z_of(tf: &MaskedTransformer<f64>, seq: &SequenceBatch<f64>) -> Tensor<f64> {
    tf.conditions(seq).unwrap()
}

#[test]
fn mask_ratio_draws_are_truncated_with_mode_at_one() {
    let mut rng = rng_from(1);
    let draws: Vec<f64> = (0..100_000).map(|_| sample_mask_ratio(&mut rng)).collect();
    assert!(draws.iter().all(|&r| (0.70..=1.0).contains(&r)));
    let high = draws.iter().filter(|&&r| r > 0.95).count();
    let low = draws.iter().filter(|&&r| r <= 0.75).count();
    assert!(high > low, "{high} vs {low}");
    assert_eq!(sample_mask_ratio(&mut rng_from(9)), sample_mask_ratio(&mut rng_from(9)));
}

#[test]
fn training_sequences_mask_only_semantic_slots() {
    let (x, y) = (latents(100, 3, 1), latents(100, 3, 2));
    let (seq, plan) = build_sequence_with_ratio(&x, &y, 1.0, &mut rng_from(0)).unwrap();
    assert_eq!(plan.count(), 100);
    assert!(seq.masked[..100].iter().all(|&m| !m));
    assert!(seq.masked[100..].iter().all(|&m| m));
    assert_eq!(&seq.tokens.data()[..300], x.data());
    assert!(seq.tokens.data()[300..].iter().all(|&v| v == 0.0));

    let (_, plan) = build_sequence_with_ratio(&x, &y, 0.70, &mut rng_from(0)).unwrap();
    assert_eq!(plan.count(), 70);
    assert!((plan.ratio() - 0.70).abs() < 1e-12);

    let a = build_training_sequence(&x, &y, &mut rng_from(5)).unwrap();
    let b = build_training_sequence(&x, &y, &mut rng_from(5)).unwrap();
    assert_eq!(a, b);

    let (seq, plan) = build_sequence_with_ratio(&x, &y, 0.8, &mut rng_from(3)).unwrap();
    for i in 0..100 {
        let row = &seq.tokens.data()[(100 + i) * 3..(101 + i) * 3];
        if plan.masked[i] {
            assert!(row.iter().all(|&v| v == 0.0));
        } else {
            assert_eq!(row, y.row(i));
        }
    }
    assert!(build_sequence_with_ratio(&x, &latents(99, 3, 2), 0.8, &mut rng_from(3)).is_err());
    assert!(MaskPlan::random(10, 1.5, &mut rng_from(0)).is_err());
}

#[test]
fn inference_sequence_layout() {
    let x = latents(6, 2, 4);
    let seq = build_inference_sequence(&x).unwrap();
    assert_eq!(seq.tokens.shape(), [12, 2]);
    assert_eq!(seq.masked, [vec![false; 6], vec![true; 6]].concat());
    assert_eq!(seq.segments, [vec![Segment::Rgb; 6], vec![Segment::Semantic; 6]].concat());
    assert_eq!(seq.positions, (0..12).collect::<Vec<_>>());
    let (train, _) = build_sequence_with_ratio(&x, &Tensor::zeros([6, 2]), 1.0, &mut rng_from(0)).unwrap();
    assert_eq!(train, seq);
}

#[test]
fn attention_is_full_and_rows_sum_to_one() {
    let tf = MaskedTransformer::<f64>::new(tiny(false), 3, 16, 2).unwrap();
    let (seq, _) = build_sequence_with_ratio(&latents(8, 3, 1), &latents(8, 3, 2), 0.75, &mut rng_from(1)).unwrap();
    let mut g = Graph::new();
    let b = tf.params.bind(&mut g, false);
    let tokens = g.constant(seq.tokens.clone());
    let out = tf.forward_graph(&mut g, &b, &seq, tokens).unwrap();
    assert_eq!(out.attention.len(), 3);
    assert_eq!(g.shape(out.z), [8, 16]);
    for &a in &out.attention {
        let p = g.value(a);
        assert_eq!(p.shape(), [2, 16, 16]);
        // No pair is excluded: every probability is strictly positive.
        assert!(p.data().iter().all(|&v| v > 0.0));
        for r in 0..p.rows() {
            let s: f64 = p.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn rgb_tokens_reach_every_semantic_position() {
    let tf = MaskedTransformer::<f64>::new(tiny(false), 3, 16, 3).unwrap();
    let seq = build_inference_sequence(&latents(8, 3, 1)).unwrap();
    let base = z_of(&tf, &seq);
    let mut probe = seq.clone();
    probe.tokens.data_mut()[0] += 0.5;
    let moved = z_of(&tf, &probe);
    let diff: f64 = base.row(7).iter().zip(moved.row(7)).map(|(a, b)| (a - b).abs()).sum();
    assert!(diff > 0.0);
}

#[test]
fn masked_slots_never_read_their_targets() {
    for drop in [false, true] {
        let tf = MaskedTransformer::<f64>::new(tiny(drop), 3, 16, 4).unwrap();
        let (seq, plan) = build_sequence_with_ratio(&latents(8, 3, 1), &latents(8, 3, 2), 0.75, &mut rng_from(2)).unwrap();
        let base = z_of(&tf, &seq);
        // Write arbitrary values straight into the masked rows.
        let mut g = Graph::new();
        let b = tf.params.bind(&mut g, false);
        let mut tokens = seq.tokens.clone();
        for i in plan.indices() {
            for c in 0..3 {
                tokens.data_mut()[(8 + i) * 3 + c] = 100.0 + (i * 3 + c) as f64;
            }
        }
        let tv = g.constant(tokens);
        let out = tf.forward_graph(&mut g, &b, &seq, tv).unwrap();
        assert_eq!(g.value(out.z), &base, "drop_masked={drop}");
    }
}

#[test]
fn swapping_masked_positions_swaps_conditions() {
    let tf = MaskedTransformer::<f64>::new(tiny(false), 3, 16, 5).unwrap();
    let seq = build_inference_sequence(&latents(8, 3, 6)).unwrap();
    let base = z_of(&tf, &seq);
    let mut swapped = seq.clone();
    swapped.positions.swap(8 + 2, 8 + 5);
    let z = z_of(&tf, &swapped);
    for c in 0..16 {
        assert!((z.row(2)[c] - base.row(5)[c]).abs() < 1e-12);
        assert!((z.row(5)[c] - base.row(2)[c]).abs() < 1e-12);
    }
}

#[test]
fn joint_permutation_is_equivariant() {
    let tf = MaskedTransformer::<f64>::new(tiny(false), 2, 12, 6).unwrap();
    let (seq, _) = build_sequence_with_ratio(&latents(6, 2, 1), &latents(6, 2, 2), 0.7, &mut rng_from(4)).unwrap();
    let base = z_of(&tf, &seq);
    let perm = [4usize, 1, 5, 0, 3, 2, 9, 11, 6, 8, 10, 7];
    let mut p = seq.clone();
    for (new, &old) in perm.iter().enumerate() {
        p.positions[new] = seq.positions[old];
        p.segments[new] = seq.segments[old];
        p.masked[new] = seq.masked[old];
        for c in 0..2 {
            p.tokens.data_mut()[new * 2 + c] = seq.tokens.data()[old * 2 + c];
        }
    }
    let z = z_of(&tf, &p);
    for (k, &old) in perm[6..].iter().enumerate() {
        for c in 0..16 {
            assert!((z.row(k)[c] - base.row(old - 6)[c]).abs() < 1e-10);
        }
    }
}

#[test]
fn dropping_masked_tokens_changes_only_the_encoder_input() {
    let full = MaskedTransformer::<f64>::new(tiny(false), 3, 16, 8).unwrap();
    let dropped = MaskedTransformer::<f64>::from_params(tiny(true), 3, 16, full.params.clone()).unwrap();
    let (seq, _) = build_sequence_with_ratio(&latents(8, 3, 1), &latents(8, 3, 2), 0.75, &mut rng_from(2)).unwrap();
    let a = z_of(&full, &seq);
    let b = z_of(&dropped, &seq);
    assert_eq!(a.shape(), b.shape());
    assert!(a.data().iter().zip(b.data()).any(|(x, y)| x != y));
}

#[test]
fn reload_reproduces_outputs_bitwise() {
    let tf = MaskedTransformer::<f64>::new(tiny(false), 3, 16, 10).unwrap();
    let again = MaskedTransformer::<f64>::from_params(tiny(false), 3, 16, tf.params.clone()).unwrap();
    let seq = build_inference_sequence(&latents(8, 3, 1)).unwrap();
    assert_eq!(z_of(&tf, &seq), z_of(&again, &seq));
    let mut wrong = tf.params.clone();
    let id = wrong.find("tf.pos").unwrap();
    *wrong.get_mut(id) = Tensor::zeros([4, 16]);
    assert!(MaskedTransformer::<f64>::from_params(tiny(false), 3, 16, wrong).is_err());
}

#[test]
fn sequences_longer_than_capacity_are_rejected() {
    let tf = MaskedTransformer::<f64>::new(tiny(false), 3, 8, 1).unwrap();
    let seq = build_inference_sequence(&latents(8, 3, 1)).unwrap();
    assert!(tf.conditions(&seq).is_err());
    assert!(MaskedTransformer::<f64>::new(tiny(false), 3, 7, 1).is_err());
}

#[test]
fn diffusion_loss_gradient_reaches_transformer_weights() {
    // L=4, Z=2, d=16.
    let cfg = TransformerConfig {
        width: 16,
        heads: 2,
        encoder_depth: 1,
        decoder_depth: 1,
        mlp_ratio: 2,
        drop_masked: false,
        ..TransformerConfig::default()
    };
    let tf = MaskedTransformer::<f64>::new(cfg, 2, 8, 12).unwrap();
    let den = Denoiser::<f64>::new(DenoiserConfig { width: 8, blocks: 1, time_dim: 4 }, 2, 16, 13, false).unwrap();
    let sched = cosine_schedule(1000, 0.008).unwrap();
    let x = latents(4, 2, 1);
    let y = latents(4, 2, 2);
    let (seq, plan) = build_sequence_with_ratio(&x, &y, 0.75, &mut rng_from(0)).unwrap();
    let idx = plan.indices();
    let targets = Tensor::new([idx.len(), 2], idx.iter().flat_map(|&i| y.row(i).to_vec()).collect()).unwrap();
    let report = gradcheck_params(
        |g, b| {
            let tokens = g.constant(seq.tokens.clone());
            let out = tf.forward_graph(g, b, &seq, tokens).unwrap();
            let cond = g.gather_rows(out.z, &idx).unwrap();
            let bd = den.params.bind(g, false);
            let mut rng = rng_from(99);
            Ok(diffusion_loss(g, &den, &bd, cond, &targets, &sched, Parameterization::Standard, &mut rng).unwrap())
        },
        &tf.params,
        1e-5,
        1e-4,
        1,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}
