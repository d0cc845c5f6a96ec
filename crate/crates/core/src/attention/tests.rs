use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{plan_batches, Document, Vocab};

fn rt(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, rng)
}

fn mha_weights(
    tape: &mut Tape<f64>,
    e: usize,
    rng: &mut ChaCha8Rng,
) -> (MhaWeights, Vec<Tensor<f64>>) {
    let ts: Vec<Tensor<f64>> = mha_param_shapes("a", e)
        .iter()
        .map(|(_, s)| rt(s, rng))
        .collect();
    let v: Vec<Var> = ts.iter().map(|t| tape.param(t.clone())).collect();
    (
        MhaWeights {
            w_q: v[0],
            b_q: v[1],
            w_k: v[2],
            b_k: v[3],
            w_v: v[4],
            b_v: v[5],
            w_o: v[6],
            b_o: v[7],
        },
        ts,
    )
}

/// Softmax-weighted sum with explicit loops. `q: [a, e]`, `k, v: [b, e]`.
#[allow(clippy::too_many_arguments)]
fn loop_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    a: usize,
    b: usize,
    e: usize,
    scale: f64,
    allowed: impl Fn(usize, usize) -> bool,
) -> Vec<f64> {
    let mut out = vec![0.0; a * e];
    for i in 0..a {
        let scores: Vec<f64> = (0..b)
            .map(|j| (0..e).map(|c| q[i * e + c] * k[j * e + c]).sum::<f64>() * scale)
            .collect();
        let exps: Vec<f64> = (0..b)
            .map(|j| if allowed(i, j) { scores[j].exp() } else { 0.0 })
            .collect();
        let z: f64 = exps.iter().sum();
        for j in 0..b {
            for c in 0..e {
                out[i * e + c] += exps[j] / z * v[j * e + c];
            }
        }
    }
    out
}

#[test]
fn single_key_returns_its_value() {
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::new(&[1, 2], vec![0.3, -0.7]).unwrap());
    let k = tape.constant(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
    let v = tape.constant(Tensor::new(&[1, 2], vec![4.0, 5.0]).unwrap());
    let (o, w) = scaled_dot_product_attention(&mut tape, q, k, v, None, 0.5).unwrap();
    assert_eq!(tape.value(o).data(), &[4.0, 5.0]);
    assert_eq!(tape.value(w).data(), &[1.0]);
}

#[test]
fn identical_keys_average_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let q = tape.constant(rt(&[2, 3], &mut rng));
    let k = tape.constant(Tensor::from_fn(&[4, 3], |i| (i % 3) as f64));
    let vt = rt(&[4, 3], &mut rng);
    let v = tape.constant(vt.clone());
    let (o, _) = scaled_dot_product_attention(&mut tape, q, k, v, None, 1.0).unwrap();
    for c in 0..3 {
        let mean = (0..4).map(|j| vt.data()[j * 3 + c]).sum::<f64>() / 4.0;
        assert!((tape.value(o).data()[c] - mean).abs() < 1e-12);
        assert!((tape.value(o).data()[3 + c] - mean).abs() < 1e-12);
    }
}

#[test]
fn two_by_three_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (qt, kt, vt) = (
        rt(&[2, 4], &mut rng),
        rt(&[3, 4], &mut rng),
        rt(&[3, 4], &mut rng),
    );
    let mut tape = Tape::new();
    let (q, k, v) = (
        tape.constant(qt.clone()),
        tape.constant(kt.clone()),
        tape.constant(vt.clone()),
    );
    let (o, _) = scaled_dot_product_attention(&mut tape, q, k, v, None, 0.5).unwrap();
    let expect = loop_attention(qt.data(), kt.data(), vt.data(), 2, 3, 4, 0.5, |_, _| true);
    for (a, b) in tape.value(o).data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-12);
    }
    let bad = tape.constant(rt(&[3, 5], &mut rng));
    assert!(scaled_dot_product_attention(&mut tape, q, bad, v, None, 0.5).is_err());
}

#[test]
fn one_head_is_projected_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let (w, _) = mha_weights(&mut tape, 4, &mut rng);
    let h = tape.constant(rt(&[1, 3, 4], &mut rng));
    let (out, _) =
        multi_head_self_attention(&mut tape, h, None, &w, 1, AttentionScale::PerHead).unwrap();
    let q = linear(&mut tape, h, w.w_q, w.b_q).unwrap();
    let k = linear(&mut tape, h, w.w_k, w.b_k).unwrap();
    let v = linear(&mut tape, h, w.w_v, w.b_v).unwrap();
    let (ctx, _) = scaled_dot_product_attention(&mut tape, q, k, v, None, 0.5).unwrap();
    let direct = linear(&mut tape, ctx, w.w_o, w.b_o).unwrap();
    assert_eq!(tape.value(out), tape.value(direct));
}

#[test]
fn heads_must_divide_hidden_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut tape = Tape::new();
    let (w, _) = mha_weights(&mut tape, 4, &mut rng);
    let h = tape.constant(rt(&[1, 3, 4], &mut rng));
    assert!(multi_head_self_attention(&mut tape, h, None, &w, 3, AttentionScale::PerHead).is_err());
}

#[test]
fn two_heads_match_per_head_oracle() {
    let (n, e, k) = (3, 4, 2);
    let eh = e / k;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tape = Tape::new();
    let (w, ts) = mha_weights(&mut tape, e, &mut rng);
    let ht = rt(&[1, n, e], &mut rng);
    let h = tape.constant(ht.clone());
    let (out, _) =
        multi_head_self_attention(&mut tape, h, None, &w, k, AttentionScale::PerHead).unwrap();

    let proj =
        |wm: &Tensor<f64>, b: &Tensor<f64>, x: &[f64], cols: std::ops::Range<usize>| -> Vec<f64> {
            let mut o = Vec::new();
            for r in 0..n {
                for c in cols.clone() {
                    o.push(
                        b.data()[c]
                            + (0..e)
                                .map(|i| x[r * e + i] * wm.data()[i * e + c])
                                .sum::<f64>(),
                    );
                }
            }
            o
        };
    let mut concat = vec![0.0; n * e];
    for head in 0..k {
        let cols = head * eh..(head + 1) * eh;
        let q = proj(&ts[0], &ts[1], ht.data(), cols.clone());
        let kk = proj(&ts[2], &ts[3], ht.data(), cols.clone());
        let v = proj(&ts[4], &ts[5], ht.data(), cols.clone());
        let o = loop_attention(&q, &kk, &v, n, n, eh, 1.0 / (eh as f64).sqrt(), |_, _| true);
        for r in 0..n {
            for c in 0..eh {
                concat[r * e + head * eh + c] = o[r * eh + c];
            }
        }
    }
    let expect = proj(&ts[6], &ts[7], &concat, 0..e);
    for (a, b) in tape.value(out).data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn permuting_heads_with_output_rows_is_invariant() {
    let (e, k) = (6, 3);
    let eh = e / k;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ts: Vec<Tensor<f64>> = mha_param_shapes("a", e)
        .iter()
        .map(|(_, s)| rt(s, &mut rng))
        .collect();
    let ht = rt(&[2, 4, e], &mut rng);
    let perm = [2, 0, 1];
    let col = |c: usize| perm[c / eh] * eh + c % eh;
    let mut pt = ts.clone();
    for (i, t) in ts.iter().enumerate() {
        match i {
            0 | 2 | 4 => pt[i] = Tensor::from_fn(&[e, e], |x| t.data()[(x / e) * e + col(x % e)]),
            1 | 3 | 5 => pt[i] = Tensor::from_fn(&[e], |x| t.data()[col(x)]),
            6 => pt[i] = Tensor::from_fn(&[e, e], |x| t.data()[col(x / e) * e + x % e]),
            _ => {}
        }
    }
    let run = |params: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let v: Vec<Var> = params.iter().map(|t| tape.constant(t.clone())).collect();
        let w = MhaWeights {
            w_q: v[0],
            b_q: v[1],
            w_k: v[2],
            b_k: v[3],
            w_v: v[4],
            b_v: v[5],
            w_o: v[6],
            b_o: v[7],
        };
        let h = tape.constant(ht.clone());
        let (o, _) =
            multi_head_self_attention(&mut tape, h, None, &w, k, AttentionScale::PerHead).unwrap();
        tape.value(o).clone()
    };
    assert!(run(&ts).max_abs_diff(&run(&pt)) < 1e-12);
}

#[test]
fn causal_and_padding_masks() {
    let c = build_causal_mask::<f64>(3).unwrap();
    assert!(c.allowed(&[0, 0]) && !c.allowed(&[0, 1]) && !c.allowed(&[0, 2]));
    assert!((0..3).all(|j| c.allowed(&[2, j])));
    assert!(build_causal_mask::<f64>(0).is_err());

    let p = build_padding_mask::<f64>(&[2], 4).unwrap();
    let full = p.values.broadcast_to(&[1, 4, 4]).unwrap();
    for i in 0..4 {
        assert_eq!(full.at(&[0, i, 0]), 0.0);
        assert_eq!(full.at(&[0, i, 1]), 0.0);
        assert_eq!(full.at(&[0, i, 2]), MASK_VALUE);
        assert_eq!(full.at(&[0, i, 3]), MASK_VALUE);
    }

    let both = c.combine(&build_padding_mask(&[2, 3], 3).unwrap()).unwrap();
    assert_eq!(both.values.shape(), &[2, 3, 3]);
    let cb = c.values.broadcast_to(&[2, 3, 3]).unwrap();
    let pb = build_padding_mask::<f64>(&[2, 3], 3)
        .unwrap()
        .values
        .broadcast_to(&[2, 3, 3])
        .unwrap();
    for i in 0..18 {
        assert_eq!(both.values.data()[i], cb.data()[i].min(pb.data()[i]));
    }
}

fn toy_corpus(lens: &[usize], seed: u64) -> (Vec<Document>, Vocab) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = crate::data::RawDocument {
        doc_id: 0,
        source: vec![vec!["w".into()]],
        target: vec![vec!["w".into()]],
    };
    let v = Vocab::build(&[raw], 1, 64).unwrap();
    let base = v.id("w");
    let docs = lens
        .iter()
        .enumerate()
        .map(|(d, &m)| {
            let mut sent = || (0..rng.gen_range(1..5)).map(|_| base).collect::<Vec<_>>();
            let src = (0..m).map(|_| sent()).collect();
            let tgt = (0..m).map(|_| sent()).collect();
            Document::new(d, src, tgt).unwrap()
        })
        .collect();
    (docs, v)
}

#[test]
fn fig2_batch_sixth_sentence_sees_all_earlier() {
    let (docs, v) = toy_corpus(&[6], 7);
    let plan = plan_batches(&docs, &v, 3, 6, None).unwrap().remove(0);
    let m = build_flat_causal_mask::<f64>(&plan.target);
    let map = &plan.target.flatten;
    let d = map.d;
    for t in 0..plan.target.current[5].1 {
        let p = 5 * d + t;
        for q in 0..map.len() {
            let expect = map.is_real(q) && (q / d < 5 || q % d <= t);
            assert_eq!(m.allowed(&[p, q]), expect, "p={p} q={q}");
        }
    }
}

#[test]
fn batch_of_one_is_ordinary_causal() {
    let (docs, v) = toy_corpus(&[3], 8);
    for plan in plan_batches(&docs, &v, 2, 1, None).unwrap() {
        let m = build_flat_causal_mask::<f64>(&plan.target);
        let c = build_causal_mask::<f64>(plan.target.current_len()).unwrap();
        assert_eq!(m.values, c.values);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flat_mask_matches_enumeration(seed in 0u64..100_000, b in 1usize..7, docs in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lens: Vec<usize> = (0..docs).map(|_| rng.gen_range(1..6)).collect();
        let (corpus, v) = toy_corpus(&lens, seed);
        for plan in plan_batches(&corpus, &v, 2, b, None).unwrap() {
            let side = &plan.target;
            // Enumerate (instance, token) pairs in flattened order.
            let mut order = Vec::new();
            for (i, &(_, len)) in side.current.iter().enumerate() {
                for t in 0..side.current_len() {
                    order.push((i, t, t < len));
                }
            }
            let dec = build_flat_causal_mask::<f64>(side);
            let enc = build_flat_mask::<f64>(&side.flatten, Side::Encoder, None);
            for (p, &(pi, pt, _)) in order.iter().enumerate() {
                for (q, &(qi, qt, real)) in order.iter().enumerate() {
                    let earlier = qi < pi || (qi == pi && qt <= pt);
                    prop_assert_eq!(dec.allowed(&[p, q]), real && earlier);
                    prop_assert_eq!(enc.allowed(&[p, q]), real);
                }
            }
        }
    }

    #[test]
    fn flat_attention_is_future_and_padding_blind(seed in 0u64..100_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lens: Vec<usize> = (0..2).map(|_| rng.gen_range(1..5)).collect();
        let (corpus, v) = toy_corpus(&lens, seed);
        let plan = plan_batches(&corpus, &v, 1, 4, None).unwrap().remove(0);
        let map = plan.target.flatten.clone();
        let n = map.len();
        let e = 4;
        let mask = build_flat_causal_mask::<f64>(&plan.target).values;
        let base = rt(&[1, n, e], &mut rng);
        let params: Vec<Tensor<f64>> = mha_param_shapes("a", e).iter().map(|(_, s)| rt(s, &mut rng)).collect();
        let run = |x: &Tensor<f64>| {
            let mut tape = Tape::new();
            let v: Vec<Var> = params.iter().map(|t| tape.constant(t.clone())).collect();
            let w = MhaWeights { w_q: v[0], b_q: v[1], w_k: v[2], b_k: v[3], w_v: v[4], b_v: v[5], w_o: v[6], b_o: v[7] };
            let h = tape.constant(x.clone());
            let (o, _) = multi_head_self_attention(&mut tape, h, Some(&mask), &w, 2, AttentionScale::PerHead).unwrap();
            tape.value(o).clone()
        };
        let out = run(&base);
        let q = rng.gen_range(0..n);
        let mut pert = base.clone();
        for c in 0..e {
            pert.data_mut()[q * e + c] += rng.gen_range(-3.0..3.0);
        }
        let out2 = run(&pert);
        for p in 0..n {
            let changed = (0..e).any(|c| out.data()[p * e + c] != out2.data()[p * e + c]);
            if p < q || (!map.is_real(q) && p != q) {
                prop_assert!(!changed, "p={} q={}", p, q);
            }
        }
    }
}
