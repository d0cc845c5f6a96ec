use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::attention::mha_param_shapes;
use crate::data::{plan_batches, BatchPlan};
use crate::gradcheck::{finite_difference, relative_error};
use crate::tensor::{Tape, Tensor};

use crate::test_util::{micro_config, micro_vocab, random_corpus};

#[test]
fn config_text_round_trip() {
    for v in Variant::ALL {
        let mut cfg = micro_config(v);
        cfg.psi_bias_init = 0.25;
        cfg.attention_scale = crate::attention::AttentionScale::Model;
        let back = ModelConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
    }
    assert!("docflat".parse::<Variant>().is_err());
    assert!(ModelConfig::from_text("layers = 2\n").is_err());
    assert!(ModelConfig::from_text("variant = doc2doc\nbogus = 1\n").is_err());
}

#[test]
fn config_validation() {
    let mut c = micro_config(Variant::Sent2Sent);
    c.c_minus = 2;
    assert!(c.validate().is_err());
    let mut c = micro_config(Variant::DocFlatD);
    c.heads = 3;
    assert!(c.validate().is_err());
    let mut c = micro_config(Variant::DocFlatD);
    c.gamma = 1.0;
    assert!(c.validate().is_err());
    assert_eq!(ModelConfig::new(Variant::DocFlatD, 10).gamma, 0.5);
    assert_eq!(
        ModelConfig::new(Variant::Doc2Doc, 10).loss_scope,
        LossScope::FullPseudoDoc
    );
    assert_eq!(
        ModelConfig::new(Variant::DocFlatC, 10).loss_scope,
        LossScope::CurrentOnly
    );
    assert_eq!(ModelConfig::new(Variant::DocFlatC, 10).c_minus, 3);
}

#[test]
fn parameter_count_parity() {
    for e in [8usize, 16, 32] {
        let base = ModelConfig {
            d_model: e,
            ..ModelConfig::new(Variant::Doc2Doc, 50)
        };
        let doc = ModelParams::<f64>::init(&base, 1).unwrap().count();
        let block = 4 * e * e + 4 * e + (e + 1) + 2 * e;
        for v in [Variant::DocFlatC, Variant::DocFlatD, Variant::DocFlatI] {
            let n = ModelParams::<f64>::init(&base.with_variant(v), 1)
                .unwrap()
                .count();
            assert_eq!(n, doc + 2 * block, "{v} at e={e}");
        }
        let abd = ModelParams::<f64>::init(&base.with_variant(Variant::Abd), 1)
            .unwrap()
            .count();
        assert_eq!(abd, doc + 4 * e * e + 4 * e + 2 * e);
        let sent = ModelParams::<f64>::init(&base.with_variant(Variant::Sent2Sent), 1)
            .unwrap()
            .count();
        assert_eq!(sent, doc);
    }
    assert_eq!(mha_param_shapes("x", 4).len(), 8);
}

#[test]
fn init_is_deterministic_and_gate_biased() {
    let cfg = micro_config(Variant::DocFlatC);
    let a = ModelParams::<f64>::init(&cfg, 5).unwrap();
    let b = ModelParams::<f64>::init(&cfg, 5).unwrap();
    let c = ModelParams::<f64>::init(&cfg, 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.get("enc.fba.psi.b").unwrap().data(), &[cfg.psi_bias_init]);
    let e = cfg.d_model;
    let w_v = a.get("dec.fba.attn.w_v").unwrap().data();
    assert!((0..e * e).all(|i| w_v[i] == if i % (e + 1) == 0 { 1.0 } else { 0.0 }));
    assert!(a
        .get("dec.0.ln1.g")
        .unwrap()
        .data()
        .iter()
        .all(|&x| x == 1.0));
    // Shared tensors do not depend on which other tensors exist.
    let d = ModelParams::<f64>::init(&cfg.with_variant(Variant::Doc2Doc), 5).unwrap();
    assert_eq!(
        a.get("enc.0.self.w_q").unwrap(),
        d.get("enc.0.self.w_q").unwrap()
    );
}

#[test]
fn checkpoint_round_trip_reproduces_logits() {
    let v = micro_vocab();
    let corpus = random_corpus(&v, &[3], 1);
    let plan = &plan_batches(&corpus, &v, 1, 3, None).unwrap()[0];
    for variant in Variant::ALL {
        let cfg = micro_config(variant);
        let params = ModelParams::<f64>::init(&cfg, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        params.save(&cfg, &path).unwrap();
        let (cfg2, loaded) = ModelParams::<f64>::load(&path).unwrap();
        assert_eq!(cfg2, cfg);
        let a = eval_logits(&cfg, &params, plan, &mut RunOptions::eval()).unwrap();
        let b = eval_logits(&cfg2, &loaded, plan, &mut RunOptions::eval()).unwrap();
        let scale = a.data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(a.max_abs_diff(&b) <= 1e-5 * scale.max(1.0), "{variant}");
        assert_eq!(loaded.to_bytes(&cfg), params.to_bytes(&cfg));
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let cfg = micro_config(Variant::Doc2Doc);
    let bytes = ModelParams::<f64>::init(&cfg, 1).unwrap().to_bytes(&cfg);
    assert!(ModelParams::<f64>::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(ModelParams::<f64>::from_bytes(&bad).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(ModelParams::<f64>::from_bytes(&extra).is_err());
    assert!(ModelParams::<f32>::from_bytes(&bytes).is_ok());
}

#[test]
fn stage_two_loads_by_name() {
    let s1 = micro_config(Variant::Sent2Sent);
    let p1 = ModelParams::<f64>::init(&s1, 3).unwrap();
    let cfg = micro_config(Variant::DocFlatD);
    let p2 = ModelParams::from_stage1(&p1, &cfg, 4).unwrap();
    for (name, t) in &p2.tensors {
        if CONTEXT_BLOCKS.iter().any(|p| name.starts_with(p)) {
            assert!(!p1.tensors.contains_key(name));
            assert_eq!(t, &init_tensor::<f64>(name, t.shape(), &cfg, 4));
        } else {
            assert_eq!(t, &p1.tensors[name]);
        }
    }
    let mut missing = p1.clone();
    missing.tensors.remove("dec.0.ffn.w1");
    assert!(ModelParams::from_stage1(&missing, &cfg, 4).is_err());
}

#[test]
fn shapes_and_variant_structure() {
    let v = micro_vocab();
    let corpus = random_corpus(&v, &[4], 2);
    let plan = &plan_batches(&corpus, &v, 1, 4, None).unwrap()[0];
    for variant in Variant::ALL {
        let cfg = micro_config(variant);
        let params = ModelParams::<f64>::init(&cfg, 1).unwrap();
        let mut tape = Tape::inference();
        let b = Bound::new(&mut tape, &params, false);
        let mut run = RunOptions::eval();
        let enc = encode(&mut tape, &cfg, &b, plan, &mut run).unwrap();
        assert_eq!(tape.shape(enc.states), &[4, plan.source.width, 8]);
        assert_eq!(enc.fba.is_some(), variant.has_fba());
        let logits = eval_logits(&cfg, &params, plan, &mut run).unwrap();
        assert_eq!(logits.shape(), &[4, plan.target.width, 16]);
    }
}

#[test]
fn batch_context_changes_docflat_encodings() {
    let v = micro_vocab();
    let corpus = random_corpus(&v, &[4], 3);
    let all = &plan_batches(&corpus, &v, 1, 4, None).unwrap()[0];
    let pairs = plan_batches(&corpus, &v, 1, 2, None).unwrap();
    let enc_last = |cfg: &ModelConfig, params: &ModelParams<f64>, plan: &BatchPlan| {
        let mut tape = Tape::inference();
        let b = Bound::new(&mut tape, params, false);
        let e = encode(&mut tape, cfg, &b, plan, &mut RunOptions::eval()).unwrap();
        let t = tape.value(e.states);
        let (n, w) = (t.shape()[0], t.shape()[1]);
        let len = plan.source.lengths[n - 1];
        t.data()[(n - 1) * w * 8..((n - 1) * w + len) * 8].to_vec()
    };
    for variant in Variant::ALL {
        let cfg = micro_config(variant);
        let mut params = ModelParams::<f64>::init(&cfg, 2).unwrap();
        // Gates open, so discrete gates pass the batch signal too.
        if let Some(b) = params.tensors.get_mut("enc.fba.psi.b") {
            b.data_mut()[0] = 3.0;
        }
        let a = enc_last(&cfg, &params, all);
        let b = enc_last(&cfg, &params, &pairs[1]);
        if variant.uses_batch_context() {
            assert_ne!(a, b, "{variant}");
        } else {
            assert_eq!(a, b, "{variant}");
        }
    }
}

#[test]
fn doc2doc_without_context_is_sent2sent() {
    let v = micro_vocab();
    let corpus = random_corpus(&v, &[3], 4);
    let s = micro_config(Variant::Sent2Sent);
    let d = ModelConfig {
        c_minus: 0,
        ..micro_config(Variant::Doc2Doc)
    };
    let params = ModelParams::<f64>::init(&s, 1).unwrap();
    for plan in plan_batches(&corpus, &v, 0, 1, None).unwrap() {
        let a = eval_logits(&s, &params, &plan, &mut RunOptions::eval()).unwrap();
        let b = eval_logits(&d, &params, &plan, &mut RunOptions::eval()).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn future_targets_do_not_leak() {
    let v = micro_vocab();
    let corpus = random_corpus(&v, &[4], 5);
    let plan = &plan_batches(&corpus, &v, 1, 4, None).unwrap()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for variant in Variant::ALL {
        let cfg = micro_config(variant);
        let mut params = ModelParams::<f64>::init(&cfg, 3).unwrap();
        if let Some(b) = params.tensors.get_mut("dec.fba.psi.b") {
            b.data_mut()[0] = 0.0;
        }
        let base = eval_logits(&cfg, &params, plan, &mut RunOptions::eval()).unwrap();
        let map = &plan.target.flatten;
        let w = plan.target.width;
        for q in (0..map.len()).filter(|&q| map.is_real(q)) {
            let row = map.gather[q].unwrap();
            let mut pert = plan.clone();
            pert.target.tokens[row] = v.id("w0") + rng.gen_range(0..9);
            let after = eval_logits(&cfg, &params, &pert, &mut RunOptions::eval()).unwrap();
            for p in (0..q).filter(|&p| map.is_real(p)) {
                let r = map.gather[p].unwrap();
                assert_eq!(
                    &base.data()[r * 16..(r + 1) * 16],
                    &after.data()[r * 16..(r + 1) * 16],
                    "{variant}"
                );
            }
            // Earlier positions inside the same pseudo-document as well.
            for t in 0..row % w {
                let r = (row / w) * w + t;
                assert_eq!(
                    &base.data()[r * 16..(r + 1) * 16],
                    &after.data()[r * 16..(r + 1) * 16],
                    "{variant}"
                );
            }
        }
    }
}

#[test]
fn loss_examples() {
    let v = micro_vocab();
    let corpus = random_corpus(&v, &[6], 6);
    let plan = &plan_batches(&corpus, &v, 3, 6, None).unwrap()[0];
    let cfg = ModelConfig {
        label_smoothing: 0.0,
        ..micro_config(Variant::DocFlatC)
    };
    let targets = loss_targets(plan, LossScope::CurrentOnly);
    let counted = targets.iter().flatten().count();
    let expected: usize = corpus[0].target.iter().map(|s| s.len() + 1).sum();
    assert_eq!(counted, expected);

    let rows = plan.len() * plan.target.width;
    let one_hot = Tensor::from_fn(&[plan.len(), plan.target.width, 16], |k| {
        if targets[k / 16] == Some(k % 16) {
            1e4
        } else {
            0.0
        }
    });
    let mut tape = Tape::<f64>::new();
    let l = tape.constant(one_hot);
    let out = loss(&mut tape, l, plan, &cfg).unwrap();
    assert!(tape.value(out).item().abs() < 1e-12);
    let uniform = tape.constant(Tensor::zeros(&[plan.len(), plan.target.width, 16]));
    let out = loss(&mut tape, uniform, plan, &cfg).unwrap();
    assert!((tape.value(out).item() - 16f64.ln()).abs() < 1e-12);
    assert_eq!(loss_targets(plan, LossScope::FullPseudoDoc).len(), rows);
    let none = vec![None; rows];
    let h = tape.constant(Tensor::zeros(&[rows, 8]));
    let params = ModelParams::<f64>::init(&cfg, 1).unwrap();
    let b = Bound::new(&mut tape, &params, false);
    assert!(loss_from_hidden(&mut tape, &b, h, &none, 0.0).is_err());
}

#[test]
fn out_of_vocabulary_ids_are_errors() {
    let v = micro_vocab();
    let corpus = random_corpus(&v, &[2], 7);
    let mut plan = plan_batches(&corpus, &v, 1, 2, None).unwrap().remove(0);
    plan.source.tokens[0] = 99;
    let cfg = micro_config(Variant::Doc2Doc);
    let params = ModelParams::<f64>::init(&cfg, 1).unwrap();
    assert!(eval_loss(&cfg, &params, &plan).is_err());
}

#[test]
fn end_to_end_gradients_docflat_c() {
    let v = micro_vocab();
    let corpus = random_corpus(&v, &[2], 8);
    let plan = &plan_batches(&corpus, &v, 1, 2, None).unwrap()[0];
    let cfg = ModelConfig {
        label_smoothing: 0.1,
        ..micro_config(Variant::DocFlatC)
    };
    let mut params = ModelParams::<f64>::init(&cfg, 4).unwrap();
    params.tensors.get_mut("dec.fba.psi.b").unwrap().data_mut()[0] = 0.3;
    let (_, analytic) = loss_and_grads(&cfg, &params, plan, &mut RunOptions::eval()).unwrap();
    let numeric = finite_difference(&params.tensors, 1e-5, |p| {
        eval_loss(&cfg, &ModelParams { tensors: p.clone() }, plan).unwrap()
    });
    for (k, a) in &analytic {
        let err = relative_error(a, &numeric[k]);
        assert!(err < 1e-4, "{k}: {err}");
    }
}
