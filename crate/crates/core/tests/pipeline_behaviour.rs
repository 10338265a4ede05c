mod common;

use clr_core::data::{sample_episode, EpisodeSpec, OracleAccess};
use clr_core::model::{Head, HeadKind};
use clr_core::numerics::Tensor;
use clr_core::pipeline::{
    embed_episode, evaluate_episode, evaluate_features, finetune, pseudo_label, synthesize_support,
    FinetuneConfig, TraceOptions, Variant,
};
use clr_core::replacement::ReplacementMethod;
use clr_core::Error;
use common::fixtures::{small_model, small_test_set};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn episode(seed: u64, u: usize) -> clr_core::data::Episode {
    let ds = small_test_set(30, 3);
    sample_episode(&ds, EpisodeSpec { n: 5, k: 1, t: 5, u }, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn config(variant: Variant, epochs: usize) -> FinetuneConfig {
    FinetuneConfig {
        variant,
        epochs,
        ..FinetuneConfig::default()
    }
}

#[test]
fn every_variant_leaves_the_backbone_untouched() {
    let model = small_model(1);
    let ep = episode(0, 4);
    let feats = embed_episode(&model, &ep).unwrap();
    let before = model.backbone_checksum();
    for v in Variant::ALL {
        let out = finetune(&model, &ep, &feats, &config(v, 6), &mut ChaCha8Rng::seed_from_u64(9), TraceOptions::default()).unwrap();
        assert_eq!(out.epoch_losses.len(), 6);
        assert_eq!(model.backbone_checksum(), before, "{v}");
    }
}

#[test]
fn unfrozen_backbone_is_rejected() {
    let mut model = small_model(1);
    model = clr_core::model::ModelState::new(model.backbone().clone(), None);
    let ep = episode(0, 2);
    let feats = embed_episode(&model, &ep).unwrap();
    let r = finetune(&model, &ep, &feats, &config(Variant::Clr, 2), &mut ChaCha8Rng::seed_from_u64(0), TraceOptions::default());
    assert!(matches!(r, Err(Error::Usage(_))));
}

#[test]
fn only_the_oracle_variant_reads_hidden_labels() {
    let model = small_model(2);
    let ep = episode(1, 4);
    let feats = embed_episode(&model, &ep).unwrap();
    for v in Variant::ALL {
        ep.unlabeled.reset_oracle_reads();
        finetune(&model, &ep, &feats, &config(v, 4), &mut ChaCha8Rng::seed_from_u64(3), TraceOptions::default()).unwrap();
        let reads = ep.unlabeled.oracle_reads();
        if v == Variant::ClrGt {
            assert_eq!(reads, 3, "one read per replacement epoch");
        } else {
            assert_eq!(reads, 0, "{v} read hidden labels");
        }
    }
}

#[test]
fn first_epoch_is_the_same_for_every_variant() {
    let model = small_model(3);
    let ep = episode(2, 3);
    let feats = embed_episode(&model, &ep).unwrap();
    let losses: Vec<Vec<f32>> = Variant::ALL
        .iter()
        .map(|&v| finetune(&model, &ep, &feats, &config(v, 5), &mut ChaCha8Rng::seed_from_u64(5), TraceOptions::default()).unwrap().epoch_losses)
        .collect();
    for l in &losses[1..] {
        assert_eq!(l[0].to_bits(), losses[0][0].to_bits());
    }
}

#[test]
fn single_epoch_heads_are_identical_across_variants() {
    let model = small_model(4);
    let ep = episode(3, 3);
    let feats = embed_episode(&model, &ep).unwrap();
    let heads: Vec<Head> = Variant::ALL
        .iter()
        .map(|&v| finetune(&model, &ep, &feats, &config(v, 1), &mut ChaCha8Rng::seed_from_u64(5), TraceOptions::default()).unwrap().head)
        .collect();
    for h in &heads[1..] {
        assert_eq!(h.params().checksum(), heads[0].params().checksum());
    }
}

#[test]
fn without_unlabeled_images_replacement_variants_are_vanilla() {
    let model = small_model(5);
    let ep = episode(4, 0);
    let feats = embed_episode(&model, &ep).unwrap();
    let run = |v| finetune(&model, &ep, &feats, &config(v, 8), &mut ChaCha8Rng::seed_from_u64(1), TraceOptions::default()).unwrap();
    let vanilla = run(Variant::Vanilla);
    for v in [Variant::Clr, Variant::Otlr, Variant::ClrNoPl, Variant::ClrGt, Variant::Car] {
        let out = run(v);
        assert_eq!(out.head.params().checksum(), vanilla.head.params().checksum(), "{v}");
    }
}

#[test]
fn zero_cap_clr_is_vanilla() {
    let model = small_model(6);
    let ep = episode(5, 4);
    let feats = embed_episode(&model, &ep).unwrap();
    let mut cfg = config(Variant::Clr, 8);
    cfg.method = ReplacementMethod::block_aug(0);
    let clr = finetune(&model, &ep, &feats, &cfg, &mut ChaCha8Rng::seed_from_u64(2), TraceOptions::default()).unwrap();
    cfg.variant = Variant::Vanilla;
    let van = finetune(&model, &ep, &feats, &cfg, &mut ChaCha8Rng::seed_from_u64(2), TraceOptions::default()).unwrap();
    assert_eq!(clr.head.params().checksum(), van.head.params().checksum());
}

#[test]
fn trace_reports_replacements_and_agreement() {
    let model = small_model(7);
    let ep = episode(6, 4);
    let feats = embed_episode(&model, &ep).unwrap();
    let access = OracleAccess::acquire();
    let out = finetune(
        &model,
        &ep,
        &feats,
        &config(Variant::Clr, 5),
        &mut ChaCha8Rng::seed_from_u64(2),
        TraceOptions { enabled: true, oracle: Some(&access) },
    )
    .unwrap();
    assert_eq!(out.trace.len(), 5);
    assert_eq!(out.trace[0].replaced, 0);
    assert!(out.trace[0].pseudo_label_accuracy.is_none());
    for t in &out.trace[1..] {
        let acc = t.pseudo_label_accuracy.expect("pseudo labels from epoch 2");
        assert!((0.0..=1.0).contains(&acc));
        assert!(t.replaced <= 5);
    }
    assert_eq!(out.trace.last().unwrap().loss, *out.epoch_losses.last().unwrap());
}

#[test]
fn synthesized_support_keeps_most_of_the_original() {
    let ep = episode(7, 4);
    let donors: Vec<Option<usize>> = (0..5).map(|i| if i == 2 { None } else { Some(i * 3) }).collect();
    let method = ReplacementMethod::block_aug(6);
    let out = synthesize_support(&ep.support, &ep.unlabeled, &donors, &method, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(out[2].is_none());
    for (s, o) in ep.support.iter().zip(&out) {
        let Some(o) = o else { continue };
        let (c, h, w) = (3, 8, 8);
        let kept = (0..h * w)
            .filter(|&p| (0..c).all(|ch| o.image.data()[ch * h * w + p] == s.pixels.data()[ch * h * w + p]))
            .count();
        let bound = 1.0 - method.max_masked_pixels(h, w) as f64 / (h * w) as f64;
        assert!(kept as f64 / (h * w) as f64 >= bound);
    }
    let oracle_donors = {
        let access = OracleAccess::acquire();
        let truth = ep.unlabeled.true_labels(&access);
        ep.support.iter().map(|s| truth.iter().position(|&t| t == s.label)).collect::<Vec<_>>()
    };
    let access = OracleAccess::acquire();
    for (s, d) in ep.support.iter().zip(&oracle_donors) {
        assert_eq!(ep.unlabeled.true_labels(&access)[d.unwrap()], s.label);
    }
}

#[test]
fn pseudo_labels_are_argmax_and_in_range() {
    let model = small_model(8);
    let ep = episode(8, 4);
    let feats = embed_episode(&model, &ep).unwrap();
    let head = Head::new(HeadKind::Linear, 5, feats.support.row_len(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let unl = feats.unlabeled.as_ref().unwrap();
    let pool = pseudo_label(&head, unl).unwrap();
    assert_eq!(pool.labels, head.predict(unl).unwrap());
    assert!(pool.labels.iter().all(|&l| l < 5));
    let dup = unl.select_rows(&[3, 3]);
    let dup_pool = pseudo_label(&head, &dup).unwrap();
    assert_eq!(dup_pool.labels[0], dup_pool.labels[1]);
    assert_eq!(dup_pool.labels[0], pool.labels[3]);
}

#[test]
fn evaluation_matches_manual_recount() {
    let model = small_model(9);
    for seed in 0..5 {
        let ep = episode(seed, 0);
        let feats = embed_episode(&model, &ep).unwrap();
        let head = Head::new(HeadKind::Linear, 5, feats.query.row_len(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let acc = evaluate_episode(&model, &head, &ep).unwrap();
        let logits = head.logits(&feats.query).unwrap();
        let mut correct = 0;
        for (i, &y) in ep.query_labels().iter().enumerate() {
            let row = logits.row(i);
            let best = (0..5).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            correct += (best == y) as usize;
        }
        assert_eq!(acc, correct as f64 / 25.0);
        assert!((0.0..=1.0).contains(&acc));
    }
}

#[test]
fn constant_predictor_scores_one_fifth() {
    let d = 4;
    let weight = Tensor::zeros(&[5, d]);
    let bias = Tensor::new(vec![5], vec![1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    let head = Head::from_weights(HeadKind::Linear, weight, Some(bias)).unwrap();
    let feats = Tensor::from_fn(&[25, d], |i| i as f32 * 0.1);
    let labels: Vec<usize> = (0..25).map(|i| i % 5).collect();
    assert_eq!(evaluate_features(&head, &feats, &labels).unwrap(), 0.2);
}

#[test]
fn imprinting_is_exact_on_backbone_features() {
    let model = small_model(10);
    let ds = small_test_set(30, 4);
    let ep = sample_episode(&ds, EpisodeSpec { n: 5, k: 3, t: 2, u: 0 }, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let feats = embed_episode(&model, &ep).unwrap();
    let (err, _, _) = common::imprint::check(&feats.support, &ep.support_labels(), 5);
    assert!(err <= 1e-6, "row error {err}");

    let one_shot = sample_episode(&ds, EpisodeSpec { n: 5, k: 1, t: 2, u: 0 }, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let feats = embed_episode(&model, &one_shot).unwrap();
    let (err, acc, distinct) = common::imprint::check(&feats.support, &one_shot.support_labels(), 5);
    assert!(err <= 1e-6);
    assert!(distinct);
    assert_eq!(acc, 1.0);
}

#[test]
fn imprinted_head_self_classifies_separable_features() {
    let labels: Vec<usize> = (0..15).map(|i| i % 5).collect();
    let feats = Tensor::from_fn(&[15, 5], |i| {
        let (r, c) = (i / 5, i % 5);
        if c == labels[r] { 1.0 + r as f32 * 0.01 } else { 0.05 * ((r + c) % 3) as f32 }
    });
    let (err, acc, distinct) = common::imprint::check(&feats, &labels, 5);
    assert!(distinct);
    assert!(err <= 1e-6);
    assert_eq!(acc, 1.0);
}
