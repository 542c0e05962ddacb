use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::GenOptions;
use crate::numeric::OpKind;
use crate::testutil::{mini_bundle, mini_registry, random_tokens};
use crate::tokenizers::TokenInput;

const IMG: usize = 0;
const TXT: usize = 1;
const PTS: usize = 2;
const D_TOK: usize = 8;
const D_RED: usize = 4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn mini_suite(seed: u64) -> Suite {
    let opts = GenOptions { samples: 24, ..GenOptions::default() };
    Suite::generate(&mini_registry(), &[], &opts, seed).unwrap()
}

#[test]
fn mask_counts_follow_the_rounding_rule() {
    assert_eq!(mask_count(100, 0.95).unwrap(), 95);
    assert_eq!(mask_count(20, 0.90).unwrap(), 18);
    assert_eq!(mask_count(10, 0.0).unwrap(), 0);
    assert_eq!(mask_count(4, 0.90).unwrap(), 3);
    assert_eq!(mask_count(2, 0.05).unwrap(), 1);
    assert_eq!(mask_count(1, 0.5).unwrap(), 0);
    assert!(mask_count(10, 1.0).is_err());
}

#[test]
fn corruption_split_is_eight_one_one() {
    assert_eq!(corruption_counts(100), (80, 10, 10));
    assert_eq!(corruption_counts(mask_count(200, 0.05).unwrap()), (8, 1, 1));
    assert_eq!(corruption_counts(1), (1, 0, 0));
    assert_eq!(corruption_counts(0), (0, 0, 0));
    let plan = plan_mask(200, 0.05, MaskStyle::Corrupt, &mut rng(1)).unwrap();
    let count = |c| plan.corruption.iter().filter(|&&x| x == c).count();
    assert_eq!((count(Corruption::Mask), count(Corruption::Random), count(Corruption::Keep)), (8, 1, 1));
}

#[test]
fn plan_partitions_positions() {
    let plan = plan_mask(37, 0.9, MaskStyle::Reconstruct, &mut rng(2)).unwrap();
    assert_eq!(plan.masked.len(), 33);
    let mut all: Vec<usize> = plan.masked.iter().chain(&plan.visible).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..37).collect::<Vec<_>>());
    assert!(plan.corruption.is_empty());
}

#[test]
fn corruption_rewrites_symbols_and_keeps_clean_targets() {
    let b = mini_bundle::<f64>(1);
    let seq = random_tokens(&b, TXT, 4);
    let TokenInput::Symbols(clean) = seq.input.clone() else { panic!() };
    let plan = MaskPlan {
        masked: vec![0, 2, 4],
        visible: vec![1, 3, 5],
        corruption: vec![Corruption::Mask, Corruption::Random, Corruption::Keep],
    };
    let out = apply_plan(&seq, &plan, Some(5), &mut rng(3)).unwrap();
    let TokenInput::Symbols(ids) = &out.input else { panic!() };
    assert_eq!(ids[0], 5);
    assert!(ids[2] < 5);
    assert_eq!(ids[4], clean[4]);
    for i in [1, 3, 5] {
        assert_eq!(ids[i], clean[i]);
    }
    match out.targets.as_ref().unwrap() {
        crate::tokenizers::Targets::Symbols(t) => assert_eq!(t, &vec![clean[0], clean[2], clean[4]]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn reconstruction_ignores_masked_inputs() {
    let mut b = mini_bundle::<f64>(2);
    let dec = Decoder::build(&mut b, 1, IMG, D_TOK, 9).unwrap();
    let seq = random_tokens(&b, IMG, 5);
    let s = prepare(&b, &seq, &MaskRatios { grid: 0.5, ..MaskRatios::default() }, &mut rng(4)).unwrap();
    let mut moved = s.clone();
    let TokenInput::Dense(x) = &mut moved.seq.input else { panic!() };
    let cols = x.cols();
    for &i in &s.plan.masked {
        for v in &mut x.data_mut()[i * cols..(i + 1) * cols] {
            *v += 3.0;
        }
    }
    let preds = |s: &MaskedSample<f64>| {
        let mut tape = Tape::new();
        let (input, pos) = encoder_input(&b, &mut tape, s).unwrap();
        let enc = b.f_encode(&mut tape, input).unwrap();
        let p = dec.forward(&mut tape, &b.store, enc, pos, &s.plan).unwrap();
        tape.value(p).clone()
    };
    assert_eq!(preds(&s), preds(&moved));
}

#[test]
fn stage2_total_is_the_sum_of_both_streams() {
    let mut b = mini_bundle::<f64>(3);
    let d_i = Decoder::build(&mut b, 2, IMG, D_RED, 1).unwrap();
    let d_j = Decoder::build(&mut b, 2, TXT, D_RED, 1).unwrap();
    let mut r = rng(5);
    let bi: Vec<_> = (0..2).map(|k| prepare(&b, &random_tokens(&b, IMG, k), &MaskRatios::default(), &mut r).unwrap()).collect();
    let bj: Vec<_> = (0..2).map(|k| prepare(&b, &random_tokens(&b, TXT, 10 + k), &MaskRatios::default(), &mut r).unwrap()).collect();
    let mut tape = Tape::new();
    let (total, li, lj) = stage2_batch_loss(&b, &d_i, &d_j, &mut tape, &bi, &bj).unwrap();
    let (t, a, c) = (tape.value(total).item(), tape.value(li).item(), tape.value(lj).item());
    assert_eq!(t, a + c);
    assert!(a > 0.0 && c > 0.0);
    assert!(Decoder::build(&mut b, 2, IMG, D_RED, 2).is_err());
    assert!(stage2_batch_loss(&b, &d_i, &d_i, &mut tape, &bi, &bi).is_err());
}

#[test]
fn stage1_touches_only_f_stack_tokenizer_and_decoder() {
    let mut b = mini_bundle::<f64>(4);
    let dec = Decoder::build(&mut b, 1, IMG, D_TOK, 1).unwrap();
    let ratios = MaskRatios { grid: 0.5, ..MaskRatios::default() };
    let s = prepare(&b, &random_tokens(&b, IMG, 6), &ratios, &mut rng(6)).unwrap();
    let before = b.store.clone();
    let mut opt = Optimizer::adam(1e-2).unwrap();
    stage1_step(&mut b, &dec, &[s], &mut opt).unwrap();
    let trained = stage1_params(&b, &dec);
    for (id, name, t) in b.store.iter() {
        let changed = t.data() != before.get(id).data();
        if trained.contains(&id) {
            assert!(changed || name.ends_with(".b") || name.contains("norm"), "{name} did not move");
        } else {
            assert!(!changed, "{name} moved in stage 1");
        }
    }
}

#[test]
fn stage1_rejects_a_foreign_sample() {
    let mut b = mini_bundle::<f64>(5);
    let dec = Decoder::build(&mut b, 1, IMG, D_TOK, 1).unwrap();
    let s = prepare(&b, &random_tokens(&b, PTS, 6), &MaskRatios::default(), &mut rng(7)).unwrap();
    let mut opt = Optimizer::adam(1e-2).unwrap();
    assert!(matches!(stage1_step(&mut b, &dec, &[s], &mut opt), Err(Error::ModalityMismatch { .. })));
}

#[test]
fn stage1_overfits_a_fixed_batch() {
    let mut b = mini_bundle::<f32>(6);
    let dec = Decoder::build(&mut b, 1, IMG, D_TOK, 1).unwrap();
    let ratios = MaskRatios { grid: 0.5, ..MaskRatios::default() };
    let s = prepare(&b, &random_tokens(&b, IMG, 8), &ratios, &mut rng(8)).unwrap();
    let mut opt = Optimizer::adam(1e-2).unwrap();
    let first = stage1_step(&mut b, &dec, std::slice::from_ref(&s), &mut opt).unwrap();
    let mut last = first;
    for _ in 0..300 {
        last = stage1_step(&mut b, &dec, std::slice::from_ref(&s), &mut opt).unwrap();
    }
    assert!(last < first / 10.0, "{first} -> {last}");
}

#[test]
fn two_modalities_always_pair_with_each_other() {
    let mut r = rng(9);
    for _ in 0..200 {
        let (a, b) = sample_two(&[0, 1], &mut r).unwrap();
        assert_ne!(a, b);
        assert!(a < 2 && b < 2);
    }
    assert!(sample_two(&[3], &mut r).is_err());
}

#[test]
fn stage1_visits_modalities_round_robin_and_drops_decoders() {
    let suite = mini_suite(1);
    let mut b = mini_bundle::<f32>(7);
    let base = b.base_len();
    let cache = TokenCache::build(&mut b, &suite).unwrap();
    let cfg = Stage1Config { epochs: 2, batch: 2, lr: 1e-3 };
    let mut p = Pretrainer::stage1(b, &suite, &cache, &cfg, &MaskRatios::default(), &OptimizerConfig::default(), 1).unwrap();
    assert!(p.bundle.has_aux());
    let mut sink = MetricsSink::memory();
    let losses = p.run(&mut sink, None).unwrap();
    assert_eq!(losses.len(), 6);
    let order: Vec<&str> = sink.records.iter().map(|r| r["modality"].as_str().unwrap()).collect();
    assert_eq!(order, ["img", "txt", "pts", "img", "txt", "pts"]);
    let steps: Vec<u64> = sink.records.iter().map(|r| r["step"].as_u64().unwrap()).collect();
    assert_eq!(steps, (0..6).collect::<Vec<_>>());
    let b = p.finish();
    assert!(!b.has_aux());
    assert_eq!(b.store.len(), base);
}

#[test]
fn stage2_updates_the_trunk_but_not_heads() {
    let suite = mini_suite(2);
    let mut b = mini_bundle::<f32>(8);
    let cache = TokenCache::build(&mut b, &suite).unwrap();
    let before = b.clone();
    let cfg = Stage2Config { steps: 4, batch: 2, lr: 1e-3 };
    let mut p = Pretrainer::stage2(b, &suite, &cache, &cfg, &MaskRatios::default(), &OptimizerConfig::default(), 2).unwrap();
    let mut sink = MetricsSink::memory();
    p.run(&mut sink, None).unwrap();
    for r in &sink.records {
        let pair = r["pair"].as_array().unwrap();
        assert_ne!(pair[0], pair[1]);
        let (t, a, c) = (r["loss"].as_f64().unwrap(), r["loss_i"].as_f64().unwrap(), r["loss_j"].as_f64().unwrap());
        assert!((t - (a + c)).abs() <= 1e-6 * t.abs());
    }
    let b = p.finish();
    for t in 0..b.registry.tasks.len() {
        for id in b.head_params(t) {
            assert_eq!(b.store.get(id).data(), before.store.get(id).data());
        }
    }
    assert!(b.g.params().iter().any(|&id| b.store.get(id).data() != before.store.get(id).data()));
}

#[test]
fn resumed_stage2_repeats_the_same_losses() {
    let suite = mini_suite(3);
    let mut b = mini_bundle::<f32>(9);
    let cache = TokenCache::build(&mut b, &suite).unwrap();
    let cfg = Stage2Config { steps: 10, batch: 2, lr: 1e-3 };
    let make = |b: ModelBundle<f32>| Pretrainer::stage2(b, &suite, &cache, &cfg, &MaskRatios::default(), &OptimizerConfig::default(), 3).unwrap();
    let mut full = make(b.clone());
    let reference = full.run(&mut MetricsSink::memory(), None).unwrap();

    let mut first = make(b.clone());
    first.run(&mut MetricsSink::memory(), Some(4)).unwrap();
    let bytes = {
        let mut v = Vec::new();
        first.checkpoint("cfg").unwrap().write(&mut v).unwrap();
        v
    };
    let ck = Checkpoint::read(&mut bytes.as_slice()).unwrap();
    let mut second = make(mini_bundle::<f32>(1234));
    second.restore(&ck).unwrap();
    let rest = second.run(&mut MetricsSink::memory(), None).unwrap();
    assert_eq!(rest, reference[4..]);
}

#[test]
fn broken_backward_rule_changes_the_update() {
    let mut b = mini_bundle::<f64>(10);
    let dec = Decoder::build(&mut b, 1, TXT, D_TOK, 1).unwrap();
    let s = prepare(&b, &random_tokens(&b, TXT, 6), &MaskRatios { fraction: 0.5, ..MaskRatios::default() }, &mut rng(10)).unwrap();
    let grads = |fault: Option<OpKind>| {
        let mut bb = b.clone();
        let mut tape = Tape::new();
        if let Some(k) = fault {
            tape.inject_fault(k);
        }
        let l = stage1_batch_loss(&bb, &dec, &mut tape, std::slice::from_ref(&s)).unwrap();
        tape.backward(l, &mut bb.store).unwrap();
        bb.store.get(dec.out.w).grad.clone().unwrap()
    };
    assert_ne!(grads(None), grads(Some(OpKind::CrossEntropy)));
}

#[test]
fn divergence_is_a_numeric_error() {
    assert!(matches!(finite(f64::NAN, "x"), Err(Error::Numeric(_))));
    assert!(matches!(finite(f64::INFINITY, "x"), Err(Error::Numeric(_))));
    assert_eq!(finite(1.5, "x").unwrap(), 1.5);
}
