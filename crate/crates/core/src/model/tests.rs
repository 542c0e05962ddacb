use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numeric::{finite_diff_grad, max_rel_err, Optimizer};
use crate::testutil::{mini_bundle, mini_dims, mini_registry, modality, random_label, random_tokens};
use crate::tokenizers::TokenizerConfig;

const IMG: usize = 0;
const TXT: usize = 1;
const PTS: usize = 2;
const IMG_CLS: usize = 0;
const IMG_SEG: usize = 1;
const TXT_CLS: usize = 2;
const PTS_CLS: usize = 3;

fn grid_only(height: usize, d_tok: usize, d_red: usize) -> ModelBundle<f64> {
    let dims = ModelDims { d_tok, d_red, heads: 4, ..ModelDims::default() };
    let reg = Registry::new(
        vec![
            modality("a", TokenizerConfig::Grid { height, width: height, channels: 1, patch: 4 }),
            modality("b", TokenizerConfig::Grid { height: 8, width: 8, channels: 1, patch: 4 }),
        ],
        vec![
            TaskSpec::new("cls", "a", TaskKind::Classification, 4),
            TaskSpec::new("cls", "b", TaskKind::Classification, 4),
        ],
    )
    .unwrap();
    ModelBundle::new(dims, reg, 1).unwrap()
}

#[test]
fn f_output_shape() {
    let b = grid_only(16, 64, 32);
    let x = random_tokens(&b, 0, 1);
    assert_eq!(x.len(), 16);
    let mut tape = Tape::new();
    let u = b.f_transform(&mut tape, &x).unwrap();
    assert_eq!(tape.shape(u), &[16, 32]);
}

#[test]
fn f_is_deterministic() {
    let b = mini_bundle::<f32>(2);
    let x = random_tokens(&b, PTS, 3);
    let run = || {
        let mut tape = Tape::new();
        let u = b.f_transform(&mut tape, &x).unwrap();
        tape.value(u).clone()
    };
    assert_eq!(run().data(), run().data());
}

#[test]
fn f_rejects_wrong_width() {
    let b = mini_bundle::<f64>(2);
    let mut tape = Tape::new();
    let bad = tape.constant(Tensor::zeros(&[3, 5]));
    assert!(b.f.stack.forward(&mut tape, &b.store, bad).is_err());
}

#[test]
fn single_key_attention_is_query_plus_value() {
    let b = mini_bundle::<f64>(4);
    let d = b.dims.d_red;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let q = crate::testutil::random_sample(&TokenizerConfig::Sequence { length: 3 * d, vocab: None, window: 1 }, &mut rng);
    let crate::tokenizers::Sample::Series(qv) = q else { unreachable!() };
    let query = Tensor::matrix(3, d, qv.iter().map(|&v| v as f64).collect()).unwrap();
    let kv_row = Tensor::matrix(1, d, vec![0.3, -0.7, 1.1, 0.2]).unwrap();

    let mut tape = Tape::new();
    let qv = tape.constant(query.clone());
    let kv = tape.constant(kv_row.clone());
    let (out, weights) = b.a_mid.forward_with_weights(&mut tape, &b.store, qv, kv).unwrap();
    for w in &weights {
        assert!(tape.value(*w).data().iter().all(|&a| a == 1.0));
    }

    // oracle: query + o(v(kv)) broadcast to every query row
    let v = &b.a_mid.attn.v;
    let o = &b.a_mid.attn.o;
    let lin = |x: &[f64], l: &Linear| -> Vec<f64> {
        let w = b.store.get(l.w);
        let bias = b.store.get(l.b);
        (0..l.fan_out).map(|c| bias.data()[c] + (0..l.fan_in).map(|r| x[r] * w.at(r, c)).sum::<f64>()).collect()
    };
    let projected = lin(&lin(kv_row.data(), v), o);
    let got = tape.value(out);
    for r in 0..3 {
        for c in 0..d {
            assert!((got.at(r, c) - query.at(r, c) - projected[c]).abs() < 1e-12);
        }
    }

    // key content is irrelevant with a single key
    let mut b2 = b.clone();
    let kw = b2.a_mid.attn.k.w;
    let scrambled = b2.store.get(kw).map(|x| -3.0 * x + 0.5);
    b2.store.set_values(kw, scrambled).unwrap();
    let mut tape2 = Tape::new();
    let qv = tape2.constant(query);
    let kv = tape2.constant(kv_row);
    let out2 = b2.a_mid.forward(&mut tape2, &b2.store, qv, kv).unwrap();
    assert_eq!(tape.value(out).data(), tape2.value(out2).data());
}

#[test]
fn attention_rows_sum_to_one_for_any_key_count() {
    let b = mini_bundle::<f64>(5);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for n_k in [1, 2, 7] {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::matrix(5, 4, (0..20).map(|_| rand::Rng::random_range(&mut rng, -2.0..2.0)).collect()).unwrap());
        let kv = tape.constant(Tensor::matrix(n_k, 8, (0..n_k * 8).map(|_| rand::Rng::random_range(&mut rng, -2.0..2.0)).collect()).unwrap());
        let (out, weights) = b.a_out.forward_with_weights(&mut tape, &b.store, q, kv).unwrap();
        assert_eq!(tape.shape(out), &[5, 4]);
        for w in weights {
            let w = tape.value(w);
            for r in 0..w.rows() {
                assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn cross_attention_width_checked() {
    let b = mini_bundle::<f64>(5);
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::zeros(&[2, 4]));
    let kv = tape.constant(Tensor::zeros(&[3, 4]));
    assert!(b.a_out.forward(&mut tape, &b.store, q, kv).is_err());
}

#[test]
fn pair_token_bookkeeping() {
    let b = grid_only(16, 16, 8);
    let x_i = random_tokens(&b, 0, 1);
    let x_j = random_tokens(&b, 1, 2);
    assert_eq!((x_i.len(), x_j.len()), (16, 4));
    let mut tape = Tape::new();
    let p = b.forward_pair(&mut tape, &x_i, &x_j, 0, 1).unwrap();
    assert_eq!(tape.shape(p.fused), &[20, 8]);
    assert_eq!(tape.shape(p.head_in_i), &[16, 8]);
    assert_eq!(tape.shape(p.head_in_j), &[4, 8]);
    assert_eq!(tape.shape(p.pred_i), &[4]);
}

#[test]
fn head_output_arity() {
    let b = mini_bundle::<f64>(6);
    let img = random_tokens(&b, IMG, 1);
    assert_eq!(b.predict(&img, IMG_CLS).unwrap().shape(), &[3]);
    assert_eq!(b.predict(&img, IMG_SEG).unwrap().shape(), &[4, 2]);
    let txt = random_tokens(&b, TXT, 1);
    assert_eq!(b.predict(&txt, TXT_CLS).unwrap().shape(), &[2]);
}

#[test]
fn inference_is_bit_identical_across_calls() {
    let b = mini_bundle::<f32>(7);
    let x = random_tokens(&b, TXT, 4);
    assert_eq!(b.predict(&x, TXT_CLS).unwrap().data(), b.predict(&x, TXT_CLS).unwrap().data());
}

#[test]
fn task_modality_mismatch_is_an_error() {
    let b = mini_bundle::<f64>(7);
    let img = random_tokens(&b, IMG, 1);
    let txt = random_tokens(&b, TXT, 1);
    assert!(matches!(b.predict(&img, TXT_CLS), Err(Error::ModalityMismatch { .. })));
    let mut tape = Tape::new();
    assert!(b.forward_pair(&mut tape, &img, &txt, IMG_CLS, PTS_CLS).is_err());
    assert!(matches!(b.predict(&img, 99), Err(Error::Unregistered { .. })));
}

#[test]
fn classification_head_is_permutation_invariant() {
    let b = mini_bundle::<f64>(8);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows: Vec<f64> = (0..5 * 4).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
    let feats = Tensor::matrix(5, 4, rows).unwrap();
    let perm = [3, 0, 4, 1, 2];
    let logits = |x: Tensor<f64>| {
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let out = b.head_forward(&mut tape, v, IMG_CLS).unwrap();
        tape.value(out).clone()
    };
    let a = logits(feats.clone());
    let p = logits(feats.gather_rows(&perm));
    for (x, y) in a.data().iter().zip(p.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn zeroed_output_fusion_passes_backbone_through() {
    let mut b = mini_bundle::<f64>(9);
    let a = b.a_out.attn.clone();
    for id in [a.v.w, a.v.b, a.o.b] {
        let z = Tensor::zeros(b.store.get(id).shape());
        b.store.set_values(id, z).unwrap();
    }
    let x_i = random_tokens(&b, IMG, 1);
    let x_j = random_tokens(&b, PTS, 2);
    let mut tape = Tape::new();
    let p = b.forward_pair(&mut tape, &x_i, &x_j, IMG_CLS, PTS_CLS).unwrap();
    assert_eq!(tape.value(p.head_in_i).data(), tape.value(p.backbone_i).data());
    assert_eq!(tape.value(p.head_in_j).data(), tape.value(p.backbone_j).data());
}

#[test]
fn argmax_survives_positive_scaling() {
    let b = mini_bundle::<f64>(10);
    let x = random_tokens(&b, PTS, 5);
    let logits = b.predict(&x, PTS_CLS).unwrap();
    for s in [0.01, 1.0, 3.5, 1e4] {
        assert_eq!(logits.map(|v| v * s).argmax(), logits.argmax());
    }
}

fn pair_loss(b: &ModelBundle<f64>, tape: &mut Tape<f64>, q: usize, r: usize, seed: u64) -> Var {
    let mi = b.registry.tasks[q].modality_index;
    let mj = b.registry.tasks[r].modality_index;
    let x_i = random_tokens(b, mi, seed);
    let x_j = random_tokens(b, mj, seed + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y_i = random_label(&b.registry.tasks[q], x_i.len(), &mut rng);
    let y_j = random_label(&b.registry.tasks[r], x_j.len(), &mut rng);
    let p = b.forward_pair(tape, &x_i, &x_j, q, r).unwrap();
    let l_i = b.task_loss(tape, q, &[p.pred_i], &[&y_i]).unwrap();
    let l_j = b.task_loss(tape, r, &[p.pred_j], &[&y_j]).unwrap();
    tape.add(l_i, l_j).unwrap()
}

#[test]
fn pair_loss_reaches_every_involved_parameter() {
    let mut b = mini_bundle::<f64>(11);
    let mut tape = Tape::new();
    let loss = pair_loss(&b, &mut tape, IMG_SEG, TXT_CLS, 3);
    tape.backward(loss, &mut b.store).unwrap();
    let mut ids = b.trunk_params();
    ids.extend(b.tokenizer_params(IMG));
    ids.extend(b.tokenizer_params(TXT));
    ids.extend(b.head_params(IMG_SEG));
    ids.extend(b.head_params(TXT_CLS));
    for id in ids {
        let g = b.store.get(id).grad.as_ref().unwrap_or_else(|| panic!("{} has no grad", b.store.name(id)));
        assert!(g.iter().all(|v| v.is_finite()), "{}", b.store.name(id));
    }
    for id in b.head_params(PTS_CLS) {
        assert!(b.store.get(id).grad.as_ref().is_none_or(|g| g.iter().all(|&v| v == 0.0)));
    }
}

#[test]
fn pair_loss_gradients_match_finite_differences() {
    let mut b = mini_bundle::<f64>(12);
    let (q, r) = (IMG_SEG, PTS_CLS);
    let mut tape = Tape::new();
    let loss = pair_loss(&b, &mut tape, q, r, 5);
    tape.backward(loss, &mut b.store).unwrap();
    let mut ids = b.trunk_params();
    ids.extend(b.tokenizer_params(IMG));
    ids.extend(b.tokenizer_params(PTS));
    ids.extend(b.head_params(q));
    ids.extend(b.head_params(r));
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| b.store.get(id).grad.clone().unwrap()).collect();
    let probe = b.clone();
    let est = finite_diff_grad(
        |store| {
            let mut bb = probe.clone();
            bb.store = store.clone();
            let mut tape = Tape::new();
            let l = pair_loss(&bb, &mut tape, q, r, 5);
            Ok(tape.value(l).item())
        },
        &mut b.store,
        &ids,
        1e-6,
        Some(6),
    )
    .unwrap();
    for ((id, a), (idx, n)) in ids.iter().zip(&analytic).zip(&est) {
        let a: Vec<f64> = idx.iter().map(|&i| a[i]).collect();
        let err = max_rel_err(&a, n, 1e-6);
        assert!(err < 1e-3, "{}: {err}", b.store.name(*id));
    }
}

#[test]
fn overfits_one_labelled_sample() {
    let mut b = mini_bundle::<f32>(13);
    let x = random_tokens(&b, PTS, 8);
    let label = 2;
    let mut ids = b.f.params();
    ids.extend(b.g.params());
    ids.extend(b.tokenizer_params(PTS));
    ids.extend(b.head_params(PTS_CLS));
    let mut opt = Optimizer::adam(1e-2).unwrap();
    for _ in 0..60 {
        let mut tape = Tape::new();
        let p = b.forward_inference(&mut tape, &x, PTS_CLS).unwrap();
        let loss = b.task_loss(&mut tape, PTS_CLS, &[p], &[&Label::Class(label)]).unwrap();
        tape.backward(loss, &mut b.store).unwrap();
        opt.apply(&mut b.store, &ids).unwrap();
    }
    assert_eq!(b.predict(&x, PTS_CLS).unwrap().argmax(), label);
}

#[test]
fn dense_loss_is_mean_square_against_one_hot() {
    let b = mini_bundle::<f64>(14);
    let mut tape = Tape::new();
    let pred = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.5, 0.5]).unwrap());
    let l = b.task_loss(&mut tape, IMG_SEG, &[pred], &[&Label::Dense(vec![0, 1])]).unwrap();
    assert!((tape.value(l).item() - 0.125).abs() < 1e-15);
    assert!(one_hot::<f64>(&[2], 2).is_err());
}

#[test]
fn registry_validation() {
    let dims = mini_dims();
    let mut reg = mini_registry();
    reg.tasks[0].outputs = 1;
    assert!(ModelBundle::<f32>::new(dims.clone(), reg, 0).is_err());
    let err = Registry::new(mini_registry().modalities, vec![TaskSpec::new("x", "nope", TaskKind::Classification, 2)]);
    assert!(matches!(err, Err(Error::Config { .. })));
    let mut reg = mini_registry();
    reg.tasks.push(TaskSpec { modality_index: 3, ..TaskSpec::new("y", "tab", TaskKind::Classification, 2) });
    assert!(reg.validate(8).is_err());
    assert_eq!(mini_registry().trained_modalities(), vec![IMG, TXT, PTS]);
    assert_eq!(mini_registry().pretrain_modalities(), vec![IMG, TXT, PTS]);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let b = mini_bundle::<f32>(15);
    let mut ck = Checkpoint { stage: 2, config: "seed = 1\n".into(), state: "{}".into(), records: vec![] };
    b.write_records(&mut ck);
    let mut buf = Vec::new();
    ck.write(&mut buf).unwrap();
    let back = Checkpoint::read(&mut buf.as_slice()).unwrap();
    assert_eq!(back, ck);
    let mut fresh = mini_bundle::<f32>(99);
    assert_ne!(fresh.store.checksum(), b.store.checksum());
    fresh.read_records(&back).unwrap();
    assert_eq!(fresh.store.checksum(), b.store.checksum());
}

#[test]
fn checkpoint_header_is_enforced() {
    let ck = Checkpoint { stage: 1, config: String::new(), state: String::new(), records: vec![] };
    let mut buf = Vec::new();
    ck.write(&mut buf).unwrap();
    let mut bad_magic = buf.clone();
    bad_magic[1] = b'X';
    let e = Checkpoint::read(&mut bad_magic.as_slice()).unwrap_err();
    assert!(matches!(e, Error::Checkpoint(_)));
    assert_eq!(e.exit_code(), 3);
    let mut bad_version = buf.clone();
    bad_version[4] = 7;
    assert!(matches!(Checkpoint::read(&mut bad_version.as_slice()), Err(Error::Checkpoint(_))));
    assert!(matches!(Checkpoint::read(&mut &buf[..10]), Err(Error::Checkpoint(_))));
}

#[test]
fn checkpoint_shape_conflict_is_loud() {
    let b = mini_bundle::<f32>(16);
    let mut ck = Checkpoint { stage: 1, config: String::new(), state: String::new(), records: vec![] };
    b.write_records(&mut ck);
    let dims = ModelDims { d_red: 6, ..mini_dims() };
    let mut other = ModelBundle::<f32>::new(dims, mini_registry(), 0).unwrap();
    assert!(matches!(other.read_records(&ck), Err(Error::Checkpoint(_))));
}
