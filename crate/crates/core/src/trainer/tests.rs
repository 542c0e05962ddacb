use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{GenOptions, TaskLabels};
use crate::model::{Label, TaskKind, TaskSpec};
use crate::numeric::Tensor;
use crate::testutil::{mini_bundle, mini_registry};

const IMG_CLS: usize = 0;
const IMG_SEG: usize = 1;
const TXT_CLS: usize = 2;
const PTS_CLS: usize = 3;

fn rule_task() -> TaskSpec {
    let reg = mini_registry();
    Registry::new(reg.modalities, vec![TaskSpec::new("rule", "tab", TaskKind::Classification, 2)]).unwrap().tasks.remove(0)
}

fn mini_suite(samples: usize, seed: u64) -> Suite {
    let opts = GenOptions { samples, ..GenOptions::default() };
    Suite::generate(&mini_registry(), &[rule_task()], &opts, seed).unwrap()
}

fn cfg(steps: usize) -> Stage3Config {
    Stage3Config { steps, batch: 4, lr: 1e-3, balance_every: 5, ..Stage3Config::default() }
}

#[test]
fn weights_from_direct_evaluation() {
    let c = BalancerConfig::default();
    assert_eq!(balance_weights(&c, 1.0, 1.0).unwrap(), (1.0, 1.0));
    assert_eq!(balance_weights(&c, 0.7, 0.7).unwrap(), (1.0, 1.0));
    let (a, b) = balance_weights(&c, 1.0, 0.5).unwrap();
    assert!((a - 4.0 / 3.0).abs() < 1e-12 && (b - 2.0 / 3.0).abs() < 1e-12);
    let flat = BalancerConfig { gamma: 0.0, ..c.clone() };
    assert_eq!(balance_weights(&flat, 3.0, 0.1).unwrap(), (1.0, 1.0));
    // ratios beyond the cap clip to it
    assert_eq!(balance_weights(&c, 50.0, 1.0).unwrap(), balance_weights(&c, 5.0, 1.0).unwrap());
    assert!(balance_weights(&c, 0.0, 1.0).is_err());
}

proptest! {
    #[test]
    fn weights_sum_to_two(a in 0.01f64..20.0, b in 0.01f64..20.0, gamma in 0.0f64..3.0) {
        let c = BalancerConfig { gamma, ..BalancerConfig::default() };
        let (x, y) = balance_weights(&c, a, b).unwrap();
        prop_assert!((x + y - 2.0).abs() < 1e-12);
        prop_assert!(x > 0.0 && y > 0.0);
    }

    #[test]
    fn slower_task_gains_weight(fixed in 0.3f64..3.0, lo in 0.3f64..3.0, step in 0.01f64..1.0) {
        let c = BalancerConfig::default();
        let (w_lo, _) = balance_weights(&c, lo, fixed).unwrap();
        let (w_hi, _) = balance_weights(&c, lo + step, fixed).unwrap();
        prop_assert!(w_hi > w_lo);
    }
}

#[test]
fn history_keeps_the_last_two_epoch_means() {
    let mut s = BalancerState::new(BalancerConfig::default(), 2).unwrap();
    assert_eq!(s.weights(0, 1).unwrap(), (1.0, 1.0));
    for (epoch, losses) in [[4.0, 2.0], [2.0, 2.0], [1.0, 2.0]].iter().enumerate() {
        s.record(0, losses[0]);
        s.record(0, losses[0] * 3.0);
        s.record(1, losses[1]);
        s.end_epoch();
        assert!(s.history[0].len() == (epoch + 1).min(2));
    }
    assert_eq!(s.history[0], vec![4.0, 2.0]);
    assert_eq!(s.ratio(0).unwrap(), 0.5);
    assert_eq!(s.ratio(1).unwrap(), 1.0);
    let (w0, w1) = s.weights(0, 1).unwrap();
    assert!(w0 < w1);
    s.history[1] = vec![1.0, -1.0];
    assert!(s.weights(0, 1).is_err());
    assert!(BalancerState::new(BalancerConfig { floor: 0.0, ..BalancerConfig::default() }, 1).is_err());
}

#[test]
fn pair_sampler_is_uniform_within_a_modality() {
    let reg = mini_registry();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut img, mut seg) = (0u32, 0u32);
    for _ in 0..20_000 {
        let (q, r) = sample_pair(&mut rng, &reg).unwrap();
        assert_ne!(reg.tasks[q].modality_index, reg.tasks[r].modality_index);
        for t in [q, r] {
            if reg.tasks[t].modality_index == 0 {
                img += 1;
                seg += u32::from(t == IMG_SEG);
            }
        }
    }
    let p = seg as f64 / img as f64;
    let sigma = (0.25 / img as f64).sqrt();
    assert!((p - 0.5).abs() < 4.0 * sigma, "P(seg | img) = {p}");
}

#[test]
fn long_runs_visit_every_task() {
    let mut reg = mini_registry();
    reg = Registry::new(
        reg.modalities,
        reg.tasks.into_iter().chain([TaskSpec::new("b", "txt", TaskKind::Classification, 2), TaskSpec::new("b", "pts", TaskKind::Classification, 2)]).collect(),
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut visits = vec![0; reg.tasks.len()];
    for _ in 0..1000 {
        let (q, r) = sample_pair(&mut rng, &reg).unwrap();
        visits[q] += 1;
        visits[r] += 1;
    }
    assert!(visits.iter().all(|&v| v > 0), "{visits:?}");
}

#[test]
fn single_modality_cannot_pair() {
    let reg = Registry::new(mini_registry().modalities, vec![TaskSpec::new("cls", "img", TaskKind::Classification, 3)]).unwrap();
    assert!(sample_pair(&mut ChaCha8Rng::seed_from_u64(0), &reg).is_err());
}

#[test]
fn batches_split_in_half() {
    let suite = mini_suite(16, 1);
    let mut cursors = task_cursors(&suite, 1, 1.0).unwrap();
    let b = compose_batch(IMG_CLS, TXT_CLS, &mut cursors, 8).unwrap();
    assert_eq!((b.half_q.len(), b.half_r.len()), (4, 4));
    assert!(matches!(compose_batch(IMG_CLS, TXT_CLS, &mut cursors, 7), Err(Error::Config { .. })));
    assert!(matches!(compose_batch(IMG_CLS, TXT_CLS, &mut cursors, 0), Err(Error::Config { .. })));
}

#[test]
fn small_split_wraps_without_early_repeats() {
    let mut cursors = vec![Cursor::new(3, 0, 0..3).unwrap(), Cursor::new(3, 1, 0..10).unwrap()];
    let b = compose_batch(0, 1, &mut cursors, 8).unwrap();
    let mut first: Vec<usize> = b.half_q[..3].to_vec();
    first.sort_unstable();
    assert_eq!(first, vec![0, 1, 2]);
    assert!(b.half_q[3] < 3);
}

#[test]
fn label_fraction_limits_the_cursor() {
    let suite = mini_suite(40, 2);
    let cursors = task_cursors(&suite, 1, 0.1).unwrap();
    assert_eq!(cursors[0].len, 3);
}

fn grads_for(weights: Option<(f64, f64)>) -> (f64, BTreeMap<String, Vec<f64>>) {
    let suite = mini_suite(16, 3);
    let mut b = mini_bundle::<f64>(3);
    let cache = TokenCache::build(&mut b, &suite).unwrap();
    let batch = PairBatch { q: IMG_SEG, r: PTS_CLS, half_q: vec![0, 1], half_r: vec![2, 3], single_stream: false };
    let mut tape = Tape::new();
    let (total, _, _) = stage3_loss(&b, &mut tape, &cache, &suite, &batch, weights).unwrap();
    tape.backward(total, &mut b.store).unwrap();
    let grads = b.store.iter().filter_map(|(_, n, t)| t.grad.clone().map(|g| (n.to_string(), g))).collect();
    (tape.value(total).item(), grads)
}

#[test]
fn unit_weights_equal_the_plain_sum() {
    let (a, ga) = grads_for(Some((1.0, 1.0)));
    let (b, gb) = grads_for(None);
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(ga, gb);
}

#[test]
fn doubling_a_weight_doubles_its_gradient() {
    let (_, one) = grads_for(Some((1.0, 1.0)));
    let (_, two) = grads_for(Some((2.0, 1.0)));
    let head = |g: &BTreeMap<String, Vec<f64>>, pfx: &str| -> Vec<f64> {
        g.iter().filter(|(n, _)| n.starts_with(pfx)).flat_map(|(_, v)| v.clone()).collect()
    };
    let (a, b) = (head(&one, "head.img.seg"), head(&two, "head.img.seg"));
    assert!(!a.is_empty());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(2.0 * x, *y);
    }
    assert_eq!(head(&one, "head.pts.cls"), head(&two, "head.pts.cls"));
}

#[test]
fn toy_run_stays_finite_and_is_deterministic() {
    let suite = mini_suite(24, 4);
    let mut b = mini_bundle::<f32>(4);
    let cache = TokenCache::build(&mut b, &suite).unwrap();
    let run = || {
        let mut t = Trainer::new(b.clone(), &suite, &cache, &cfg(100), &BalancerConfig::default(), &OptimizerConfig::default(), 5).unwrap();
        let mut sink = MetricsSink::memory();
        let out = t.run(&mut sink, None).unwrap();
        (out, sink.records)
    };
    let (losses, records) = run();
    assert_eq!(losses.len(), 100);
    assert!(losses.iter().all(|l| l.total.is_finite() && l.loss_q.is_finite() && l.loss_r.is_finite()));
    for (l, r) in losses.iter().zip(&records) {
        assert!((l.w_q + l.w_r - 2.0).abs() < 1e-12);
        assert_eq!(r["stage"], 3);
        for key in ["mod_i", "task_q", "mod_j", "task_r", "loss_q", "loss_r", "w_q", "w_r", "total"] {
            assert!(!r[key].is_null(), "{key}");
        }
    }
    assert!(losses.iter().any(|l| l.w_q != 1.0), "balancer never engaged");
    let (again, records_again) = run();
    assert_eq!(losses, again);
    assert_eq!(records, records_again);
}

#[test]
fn zero_gamma_matches_the_unweighted_sum() {
    let suite = mini_suite(24, 5);
    let mut b = mini_bundle::<f32>(5);
    let cache = TokenCache::build(&mut b, &suite).unwrap();
    let run = |balanced: bool| {
        let c = Stage3Config { balanced, ..cfg(30) };
        let bal = BalancerConfig { gamma: 0.0, ..BalancerConfig::default() };
        let mut t = Trainer::new(b.clone(), &suite, &cache, &c, &bal, &OptimizerConfig::default(), 6).unwrap();
        let out: Vec<u64> = t.run(&mut MetricsSink::memory(), None).unwrap().iter().map(|l| l.total.to_bits()).collect();
        (out, t.bundle.store.checksum())
    };
    assert_eq!(run(true), run(false));
}

#[test]
fn resumed_training_repeats_the_same_losses() {
    let suite = mini_suite(24, 6);
    let mut b = mini_bundle::<f32>(6);
    let cache = TokenCache::build(&mut b, &suite).unwrap();
    let make = |b: ModelBundle<f32>| Trainer::new(b, &suite, &cache, &cfg(16), &BalancerConfig::default(), &OptimizerConfig::default(), 7).unwrap();
    let mut full = make(b.clone());
    let reference = full.run(&mut MetricsSink::memory(), None).unwrap();
    let mut first = make(b.clone());
    first.run(&mut MetricsSink::memory(), Some(7)).unwrap();
    let mut bytes = Vec::new();
    first.checkpoint("cfg").unwrap().write(&mut bytes).unwrap();
    let ck = Checkpoint::read(&mut bytes.as_slice()).unwrap();
    let mut second = make(mini_bundle::<f32>(99));
    second.restore(&ck).unwrap();
    let rest = second.run(&mut MetricsSink::memory(), None).unwrap();
    assert_eq!(rest, reference[7..]);
}

#[test]
fn accuracy_and_iou_oracles() {
    let onehot = |k: usize| Tensor::new(vec![3], (0..3).map(|i| if i == k { 1.0 } else { 0.0 }).collect()).unwrap();
    let labels = [0, 2, 1, 1];
    let perfect: Vec<_> = labels.iter().map(|&y| onehot(y)).collect();
    assert_eq!(accuracy(&perfect, &labels).unwrap(), 1.0);
    assert!(accuracy(&[], &[]).is_err());
    assert_eq!(mean_iou(&[0, 1, 1, 0], &[0, 1, 1, 0], 2).unwrap(), 1.0);
    let m = mean_iou(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
    assert!((m - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
}

#[test]
fn random_predictor_scores_one_over_k() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (n, k) = (4000usize, 4usize);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let preds: Vec<_> = (0..n).map(|_| Tensor::new(vec![k], (0..k).map(|_| rng.random::<f64>()).collect()).unwrap()).collect();
    let acc = accuracy(&preds, &labels).unwrap();
    let p = 1.0 / k as f64;
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    assert!((acc - p).abs() < 3.0 * sigma, "{acc}");
}

#[test]
fn evaluation_reports_each_metric() {
    let suite = mini_suite(16, 7);
    let mut b = mini_bundle::<f32>(7);
    let cache = TokenCache::build(&mut b, &suite).unwrap();
    let cls = evaluate_split(&b, &cache, &suite, IMG_CLS, Split::Test).unwrap();
    assert_eq!(cls.len(), 1);
    assert_eq!((cls[0].task.as_str(), cls[0].metric.as_str(), cls[0].n), ("img/cls", "accuracy", 4));
    let seg = evaluate_split(&b, &cache, &suite, IMG_SEG, Split::Train).unwrap();
    let metrics: Vec<&str> = seg.iter().map(|r| r.metric.as_str()).collect();
    assert_eq!(metrics, ["l2", "miou"]);
    assert!(seg[0].value > 0.0 && (0.0..=1.0).contains(&seg[1].value));
    let m = IMG_CLS;
    assert!(evaluate(&b, m, &cache.seqs[0], suite.labels(m).unwrap(), 0..0).is_err());
}

#[test]
fn adaptation_samples_a_fraction_and_leaves_the_bundle_alone() {
    let suite = mini_suite(200, 8);
    let b = mini_bundle::<f32>(8);
    let before = b.store.checksum();
    let ds = suite.dataset(3);
    let task = rule_task();
    let c = AdaptConfig { fraction: 0.1, steps: 20, ..AdaptConfig::default() };
    let (_, report) = adapt_unseen(&b, ds, &task, &c, 1).unwrap();
    assert_eq!(report.sampled, (ds.indices(Split::Train).len() as f64 * 0.1).round() as usize);
    assert_eq!(b.store.checksum(), before);
    assert_eq!(report.n_test, ds.indices(Split::Test).len());
    for fraction in [0.0, 1.5] {
        let bad = AdaptConfig { fraction, ..c.clone() };
        assert!(matches!(adapt_unseen(&b, ds, &task, &bad, 1), Err(Error::Config { .. })));
    }
}

#[test]
fn ten_percent_of_two_hundred_is_twenty() {
    let opts = GenOptions { samples: 250, train_fraction: 0.8, ..GenOptions::default() };
    let suite = Suite::generate(&mini_registry(), &[rule_task()], &opts, 9).unwrap();
    let b = mini_bundle::<f32>(9);
    let c = AdaptConfig { steps: 1, ..AdaptConfig::default() };
    let (_, report) = adapt_unseen(&b, suite.dataset(3), &rule_task(), &c, 2).unwrap();
    assert_eq!(report.sampled, 20);
}

#[test]
fn adapter_separates_a_linear_embedding_rule() {
    let suite = mini_suite(60, 10);
    let b = mini_bundle::<f64>(10);
    let mut ds = suite.dataset(3).clone();
    let all: Vec<usize> = (0..ds.len()).collect();
    let emb = frozen_embeddings(&b, &ds, &all).unwrap();
    let score: Vec<f64> = (0..ds.len()).map(|i| emb.at(i, 0) - emb.at(i, 1)).collect();
    let mut sorted = score.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let labels = score.iter().map(|&s| Label::Class(usize::from(s > median))).collect();
    ds.tasks = vec![TaskLabels { spec: rule_task(), labels }];
    let c = AdaptConfig { fraction: 1.0, steps: 1500, lr: 1e-2, ..AdaptConfig::default() };
    let (_, report) = adapt_unseen(&b, &ds, &rule_task(), &c, 3).unwrap();
    assert_eq!(report.train_accuracy, 1.0, "{report:?}");
}
