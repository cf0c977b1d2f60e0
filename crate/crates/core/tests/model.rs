mod common;

use common::*;
use srki::model::{
    adapter_grads, lm_loss, tape_forward, Knowledge, TapeAdapters, TapeBackbone, TapePass, TrainSelect,
};
use srki::numeric::{GradTape, ParamId};
use srki::retrieval::{CompressionMode, CompressionPlan, CompressionPolicy};

#[test]
fn tape_forward_matches_engine() {
    let model = tiny_model(2, 8, 2, 6, 3);
    let ad = random_adapters(&model, 4, 0.5);
    let kb = small_kb(&model, 5);
    let toks = tokens(&model, "what is the color of apple ? red");
    let (plain, trace) = model.forward(&toks, Some(Knowledge { kb: &kb, adapters: &ad }), None).unwrap();

    let mut tape = GradTape::new();
    let bb = TapeBackbone::constant(&mut tape, &model.backbone);
    let ta = TapeAdapters::constant(&mut tape, &ad);
    let pass = TapePass { tokens: &toks, prompt_len: toks.len(), kb: Some(&kb), select: TrainSelect::All, abar_layer: Some(1) };
    let out = tape_forward(&mut tape, &model.config, &bb, Some(&ta), &pass).unwrap();
    assert!(tape.value(out.logits).max_abs_diff(&plain) < 1e-10);
    let abar = tape.value(out.abar.unwrap()).data().to_vec();
    for (a, b) in abar.iter().zip(&trace.layers[1].abar) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn incremental_decoding_matches_full_pass() {
    let model = tiny_model(2, 8, 2, 6, 7);
    let ad = random_adapters(&model, 8, 0.5);
    let kb = small_kb(&model, 6);
    let kn = Some(Knowledge { kb: &kb, adapters: &ad });
    let toks = tokens(&model, "what is the size of sky ? blue red");
    let (full, _) = model.forward(&toks, kn, None).unwrap();
    for prefill in [1, 4, toks.len()] {
        let inc = model.forward_incremental(&toks, kn, prefill).unwrap();
        assert!(inc.max_abs_diff(&full) < 1e-10, "prefill {prefill}");
    }
}

#[test]
fn full_plan_equals_no_plan() {
    let model = tiny_model(2, 8, 2, 6, 1);
    let ad = random_adapters(&model, 2, 0.5);
    let kb = small_kb(&model, 5);
    let kn = Some(Knowledge { kb: &kb, adapters: &ad });
    let toks = tokens(&model, "what is the color of sky ?");
    let (a, _) = model.forward(&toks, kn, None).unwrap();
    let (b, _) = model.forward(&toks, kn, Some(&CompressionPlan::all(2, 5))).unwrap();
    assert_eq!(a, b);
    let bad = CompressionPlan { layers: vec![vec![0, 9], vec![1]] };
    assert!(model.forward(&toks, kn, Some(&bad)).is_err());
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let model = tiny_model(2, 8, 2, 6, 11);
        let ad = random_adapters(&model, 12, 0.5);
        let kb = small_kb(&model, 4);
        let toks = tokens(&model, "what is the color of apple ?");
        model.forward(&toks, Some(Knowledge { kb: &kb, adapters: &ad }), None).unwrap().0
    };
    assert_eq!(run(), run());
}

#[test]
fn zero_key_adapter_gives_uniform_kb_attention() {
    let model = tiny_model(2, 8, 2, 6, 5);
    let mut ad = random_adapters(&model, 6, 0.5);
    for l in ad.layers_mut() {
        l.key = srki::numeric::Tensor::zeros(&[6, 8]);
    }
    let kb = small_kb(&model, 5);
    let toks = tokens(&model, "what is the color of apple ?");
    let (_, trace) = model.forward(&toks, Some(Knowledge { kb: &kb, adapters: &ad }), None).unwrap();
    for lt in &trace.layers {
        assert!(lt.kb_logits.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn causal_outputs_ignore_future_tokens() {
    let model = tiny_model(2, 8, 2, 6, 9);
    let ad = random_adapters(&model, 10, 0.5);
    let kb = small_kb(&model, 5);
    let kn = Some(Knowledge { kb: &kb, adapters: &ad });
    let a = tokens(&model, "what is the color of apple ? red");
    let b = tokens(&model, "what is the color of apple ? blue");
    let (la, _) = model.forward(&a, kn, None).unwrap();
    let (lb, _) = model.forward(&b, kn, None).unwrap();
    for r in 0..a.len() - 1 {
        assert_eq!(la.row(r), lb.row(r));
    }
    assert_ne!(la.row(a.len() - 1), lb.row(a.len() - 1));
}

#[test]
fn permuting_the_kb_permutes_abar() {
    let model = tiny_model(2, 8, 2, 6, 13);
    let ad = random_adapters(&model, 14, 0.5);
    let kb = small_kb(&model, 5);
    let perm = [3, 0, 4, 1, 2];
    let shuffled = kb.select(&perm).unwrap();
    let toks = tokens(&model, "what is the size of sky ?");
    let (la, ta) = model.forward(&toks, Some(Knowledge { kb: &kb, adapters: &ad }), None).unwrap();
    let (lb, tb) = model.forward(&toks, Some(Knowledge { kb: &shuffled, adapters: &ad }), None).unwrap();
    assert!(la.max_abs_diff(&lb) < 1e-12);
    for (j, &p) in perm.iter().enumerate() {
        assert!((tb.layers[0].abar[j] - ta.layers[0].abar[p]).abs() < 1e-12);
    }
}

#[test]
fn backbone_gets_no_gradient_through_adapter_training() {
    let model = tiny_model(2, 8, 2, 6, 15);
    let ad = random_adapters(&model, 16, 0.5);
    let kb = small_kb(&model, 5);
    let toks = tokens(&model, "what is the color of apple ? red");
    let mut tape = GradTape::new();
    let bb = TapeBackbone::constant(&mut tape, &model.backbone);
    let ta = TapeAdapters::register(&mut tape, &ad);
    let pass = TapePass { tokens: &toks, prompt_len: 7, kb: Some(&kb), select: TrainSelect::All, abar_layer: None };
    let out = tape_forward(&mut tape, &model.config, &bb, Some(&ta), &pass).unwrap();
    let targets: Vec<usize> = toks[1..].iter().copied().chain([0]).collect();
    let mask: Vec<bool> = (0..toks.len()).map(|i| i == 6).collect();
    let loss = tape.cross_entropy(out.logits, &targets, &mask).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.len(), 6);
    assert!(grads.keys().all(|k| k.0 < 6));
    assert!(adapter_grads(&grads, 2).unwrap().iter().any(|g| g.data().iter().any(|&v| v != 0.0)));
    assert!(grads.get(&ParamId(1000)).is_none());
    let plain = lm_loss(tape.value(out.logits), &targets, &mask).unwrap();
    assert!((plain - tape.scalar(loss)).abs() < 1e-12);
    assert!(lm_loss(tape.value(out.logits), &targets, &vec![false; toks.len()]).is_err());
}

#[test]
fn decode_with_reuse_and_large_k_matches_none() {
    let model = tiny_model(3, 8, 2, 6, 17);
    let ad = random_adapters(&model, 18, 0.5);
    let kb = small_kb(&model, 6);
    let kn = Some(Knowledge { kb: &kb, adapters: &ad });
    let prompt = tokens(&model, "what is the color of apple ?");
    let none = model.decode(&prompt, kn, 5, &CompressionPolicy::none(), 0).unwrap();
    assert!(none.plan.layers.iter().all(|l| *l == (0..6).collect::<Vec<_>>()));
    let reuse = model.decode(&prompt, kn, 5, &CompressionPolicy::new(CompressionMode::Reuse, 6, 1), 0).unwrap();
    assert_eq!(none.tokens, reuse.tokens);
    let small = model.decode(&prompt, kn, 5, &CompressionPolicy::new(CompressionMode::Reuse, 2, 1), 0).unwrap();
    assert_eq!(small.plan.layers[1], small.plan.layers[2]);
    assert_eq!(small.plan.layers[0].len(), 2);
    assert!(model.decode(&prompt, kn, 0, &CompressionPolicy::none(), 0).is_err());
}
