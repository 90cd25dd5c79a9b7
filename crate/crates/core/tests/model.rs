use std::f64::consts::LN_2;

use avparse::attention::{gcaa_attend, multi_head, sdpa, GcaaWeights, MultiHeadWeights};
use avparse::losses::{adversarial_loss, guided_loss, modality_targets, smooth_labels, wsl_loss};
use avparse::metrics::{extract_events, Modality};
use avparse::parser::{decode, discriminate, mmil_pool, ModelVariant, Parser, ParserConfig, SnippetBatch};
use avparse::tensorgrad::{rng, Optimizer, OptimizerState, ParamSet, Tape, Tensor, UpdateRule, PROB_EPS};
use rand::RngExt;

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn t2(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

/// Row-major `a (n×k) · b (k×m)` in plain loops.
fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|l| a[i * k + l] * b[l * m + j]).sum();
        }
    }
    out
}

fn affine(x: &[f64], w: &Tensor, b: &Tensor, n: usize) -> Vec<f64> {
    let (k, m) = (w.shape()[0], w.shape()[1]);
    let mut out = matmul(x, w.data(), n, k, m);
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] += b.data()[j];
        }
    }
    out
}

fn bce_oracle(p: &[f64], t: &[f64]) -> f64 {
    let total: f64 = p
        .iter()
        .zip(t)
        .map(|(&p, &t)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    total / p.len() as f64
}

#[test]
fn matmul_and_softmax_hand_cases() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::from_fn(&[3, 3], |i| i as f64 - 4.0));
    let i3 = tape.constant(Tensor::eye(3));
    assert_eq!(i3.matmul(a).unwrap().value().data(), a.value().data());
    let x = tape.constant(t2(&[&[2.0]]));
    let y = tape.constant(t2(&[&[3.0]]));
    assert_eq!(x.matmul(y).unwrap().item(), 6.0);

    let flat = tape.constant(Tensor::full(&[1, 4], 3.7)).softmax(1).unwrap();
    assert_eq!(flat.value().data(), &[0.25; 4]);
    let s = tape.constant(t2(&[&[0.0, LN_2]])).softmax(1).unwrap();
    assert!(close(s.value().data(), &[1.0 / 3.0, 2.0 / 3.0], 1e-15));
    let mut r = rng::seeded(1);
    let big = tape.constant(Tensor::randn(&[5, 7], 10.0, &mut r)).softmax(1).unwrap();
    for i in 0..5 {
        assert!((big.value().row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn closed_form_gradients() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64 * 0.5 - 1.0));
    let g = tape.backward(x.sum()).unwrap();
    assert_eq!(g.get_or_zeros(x).data(), &[1.0; 6]);
    let g = tape.backward(x.mul(x).unwrap().sum()).unwrap();
    let want: Vec<f64> = x.value().data().iter().map(|v| 2.0 * v).collect();
    assert_eq!(g.get_or_zeros(x).data(), want.as_slice());
    let rev = x.grad_reverse(0.0).unwrap();
    let g = tape.backward(rev.mul(rev).unwrap().sum()).unwrap();
    assert!(g.get_or_zeros(x).data().iter().all(|&v| v == 0.0));
}

#[test]
fn sdpa_degenerate_and_hand_cases() {
    let tape = Tape::new();
    let mut r = rng::seeded(2);
    let q = tape.constant(Tensor::randn(&[4, 3], 1.0, &mut r));
    let k1 = tape.constant(Tensor::randn(&[1, 3], 1.0, &mut r));
    let v1 = tape.constant(Tensor::randn(&[1, 5], 1.0, &mut r));
    let out = sdpa(q, k1, v1).unwrap();
    for i in 0..4 {
        assert_eq!(out.value().row(i), v1.value().row(0));
    }
    let k_same = tape.constant(Tensor::from_fn(&[3, 3], |i| (i % 3) as f64));
    let v = tape.constant(Tensor::randn(&[3, 5], 1.0, &mut r));
    let out = sdpa(q, k_same, v).unwrap();
    let mean: Vec<f64> = (0..5).map(|j| (0..3).map(|i| v.value().get(&[i, j])).sum::<f64>() / 3.0).collect();
    for i in 0..4 {
        assert!(close(out.value().row(i), &mean, 1e-14));
    }
    // d = 1, so Q·Kᵀ/√d = [0, ln 2].
    let q = tape.constant(t2(&[&[1.0]]));
    let k = tape.constant(t2(&[&[0.0], &[LN_2]]));
    let v = tape.constant(t2(&[&[3.0, 0.0], &[0.0, 3.0]]));
    assert!(close(sdpa(q, k, v).unwrap().value().data(), &[1.0, 2.0], 1e-14));
}

fn random_heads<'t>(tape: &'t Tape, d: usize, r: &mut impl rand::Rng) -> MultiHeadWeights<'t> {
    let mut w = || tape.constant(Tensor::randn(&[d, d], 0.5, r));
    let (wq, wk, wv, wo) = (w(), w(), w(), w());
    let mut b = || tape.constant(Tensor::randn(&[d], 0.1, r));
    MultiHeadWeights {
        wq,
        bq: b(),
        wk,
        bk: b(),
        wv,
        bv: b(),
        wo,
        bo: b(),
    }
}

/// Straight-line GCAA over plain slices.
fn gcaa_oracle(x: &Tensor, kv: &Tensor, w: &GcaaWeights<'_>, heads: usize) -> Vec<f64> {
    let (tq, d) = (x.shape()[0], x.shape()[1]);
    let tk = kv.shape()[0];
    let g: Vec<f64> = (0..d).map(|j| (0..tq).map(|i| x.get(&[i, j])).sum::<f64>() / tq as f64).collect();
    let gw = matmul(&g, w.w_global.value().data(), 1, d, d);
    let local = matmul(x.data(), w.w_local.value().data(), tq, d, d);
    let h: Vec<f64> = (0..tq * d)
        .map(|i| (local[i] + gw[i % d] + w.bias.value().data()[i % d]).tanh())
        .collect();
    let hw = &w.heads;
    let q = affine(&h, &hw.wq.value(), &hw.bq.value(), tq);
    let k = affine(kv.data(), &hw.wk.value(), &hw.bk.value(), tk);
    let v = affine(kv.data(), &hw.wv.value(), &hw.bv.value(), tk);
    let hd = d / heads;
    let mut joined = vec![0.0; tq * d];
    for head in 0..heads {
        let off = head * hd;
        for i in 0..tq {
            let scores: Vec<f64> = (0..tk)
                .map(|j| (0..hd).map(|l| q[i * d + off + l] * k[j * d + off + l]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for l in 0..hd {
                joined[i * d + off + l] = (0..tk).map(|j| e[j] / z * v[j * d + off + l]).sum();
            }
        }
    }
    affine(&joined, &hw.wo.value(), &hw.bo.value(), tq)
}

#[test]
fn gcaa_matches_straight_line_oracle() {
    let mut r = rng::seeded(3);
    let tape = Tape::new();
    let x = Tensor::randn(&[6, 8], 1.0, &mut r);
    let kv = Tensor::randn(&[6, 8], 1.0, &mut r);
    let heads = random_heads(&tape, 8, &mut r);
    let w = GcaaWeights {
        w_local: tape.constant(Tensor::randn(&[8, 8], 0.5, &mut r)),
        w_global: tape.constant(Tensor::randn(&[8, 8], 0.5, &mut r)),
        bias: tape.constant(Tensor::randn(&[8], 0.1, &mut r)),
        heads,
    };
    for n_heads in [1, 2, 4] {
        let out = gcaa_attend(tape.constant(x.clone()), tape.constant(kv.clone()), &w, n_heads, true).unwrap();
        assert_eq!(out.output.shape(), vec![6, 8]);
        assert!(close(out.output.value().data(), &gcaa_oracle(&x, &kv, &w, n_heads), 1e-10));
    }
}

#[test]
fn zero_queries_attend_uniformly() {
    let mut r = rng::seeded(4);
    let tape = Tape::new();
    let mut heads = random_heads(&tape, 4, &mut r);
    heads.bq = tape.constant(Tensor::zeros(&[4]));
    let w = GcaaWeights {
        w_local: tape.constant(Tensor::eye(4)),
        w_global: tape.constant(Tensor::zeros(&[4, 4])),
        bias: tape.constant(Tensor::zeros(&[4])),
        heads,
    };
    let kv = Tensor::randn(&[5, 4], 1.0, &mut r);
    let out = gcaa_attend(tape.constant(Tensor::zeros(&[3, 4])), tape.constant(kv.clone()), &w, 2, true).unwrap();
    let v = affine(kv.data(), &heads.wv.value(), &heads.bv.value(), 5);
    let mean: Vec<f64> = (0..4).map(|j| (0..5).map(|i| v[i * 4 + j]).sum::<f64>() / 5.0).collect();
    let want = affine(&mean, &heads.wo.value(), &heads.bo.value(), 1);
    for i in 0..3 {
        assert!(close(out.output.value().row(i), &want, 1e-12));
    }
}

#[test]
fn permuting_keys_with_values_leaves_output_unchanged() {
    let mut r = rng::seeded(5);
    let tape = Tape::new();
    let heads = random_heads(&tape, 8, &mut r);
    let q = tape.constant(Tensor::randn(&[4, 8], 1.0, &mut r));
    let kv = Tensor::randn(&[6, 8], 1.0, &mut r);
    let perm = [3, 0, 5, 1, 4, 2];
    let rows: Vec<Vec<f64>> = perm.iter().map(|&i| kv.row(i).to_vec()).collect();
    let a = multi_head(q, tape.constant(kv.clone()), &heads, 2).unwrap();
    let b = multi_head(q, tape.constant(Tensor::from_rows(&rows).unwrap()), &heads, 2).unwrap();
    assert!(close(a.output.value().data(), b.output.value().data(), 1e-12));
}

fn parser_cfg(s: usize, d: usize) -> ParserConfig {
    ParserConfig {
        num_categories: s,
        snippets_per_video: 10,
        model_dim: d,
        num_heads: 2,
        ..Default::default()
    }
}

fn random_batch(b: usize, s: usize, d: usize, seed: u64) -> SnippetBatch {
    let mut r = rng::seeded(seed);
    let labels = Tensor::from_fn(&[b, s], |_| if r.random_bool(0.4) { 1.0 } else { 0.0 });
    SnippetBatch::new(Tensor::randn(&[b, 10, d], 1.0, &mut r), Tensor::randn(&[b, 10, d], 1.0, &mut r), labels).unwrap()
}

#[test]
fn parser_output_shapes() {
    let p = Parser::new(parser_cfg(25, 8), 1).unwrap();
    let out = p.predict(&random_batch(2, 25, 8, 1)).unwrap();
    assert_eq!(out.snippet_probs.shape(), &[2, 10, 2, 25]);
    assert_eq!(out.video_probs.shape(), &[2, 25]);
    assert_eq!(out.fused.shape(), &[2, 10, 2, 8]);
}

#[test]
fn zeroed_cross_values_leave_the_self_attended_stream() {
    let mut p = Parser::new(parser_cfg(4, 8), 2).unwrap();
    for name in ["cross.wv", "cross.bv", "cross.bo"] {
        p.params.get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let batch = random_batch(1, 4, 8, 2);
    let tape = Tape::new();
    let (bound, graph) = p.forward(&tape, &batch).unwrap();
    let audio = tape.constant(batch.audio.reshape(&[10, 8]).unwrap());
    let sa = p.self_attend(&bound, audio, 0).unwrap();
    let fused = graph.fused.narrow(2, 0, 1).unwrap().reshape(&[10, 8]).unwrap();
    assert_eq!(fused.value().data(), sa.value().data());
}

#[test]
fn mmil_pooling_degenerate_cases_and_loop_oracle() {
    let mut r = rng::seeded(6);
    let tape = Tape::new();
    let (t, s) = (5, 3);
    let logits = || Tensor::randn(&[t, 2, s], 1.0, &mut rng::seeded(9));
    let constant = tape.constant(Tensor::full(&[t, 2, s], 0.3));
    let pooled = mmil_pool(constant, tape.constant(logits()), tape.constant(logits())).unwrap();
    assert!(close(pooled.audio.value().data(), &[0.3; 3], 1e-15));

    let p1 = Tensor::from_fn(&[1, 2, s], |i| 0.1 + 0.2 * i as f64);
    let one_hot = Tensor::from_fn(&[1, 2, s], |i| if i < s { 60.0 } else { -60.0 });
    let pooled = mmil_pool(tape.constant(p1.clone()), tape.constant(Tensor::zeros(&[1, 2, s])), tape.constant(one_hot)).unwrap();
    assert!(close(pooled.video.value().data(), &p1.data()[..s], 1e-12));

    let p = Tensor::uniform(&[t, 2, s], 0.5, &mut r).map(|x| x + 0.5);
    let lt = Tensor::randn(&[t, 2, s], 1.0, &mut r);
    let lm = Tensor::randn(&[t, 2, s], 1.0, &mut r);
    let pooled = mmil_pool(tape.constant(p.clone()), tape.constant(lt.clone()), tape.constant(lm.clone())).unwrap();
    for c in 0..s {
        let mut video = 0.0;
        let mut per_mod = [0.0; 2];
        for m in 0..2 {
            let zt: f64 = (0..t).map(|i| lt.get(&[i, m, c]).exp()).sum();
            for i in 0..t {
                let at = lt.get(&[i, m, c]).exp() / zt;
                let zm = lm.get(&[i, 0, c]).exp() + lm.get(&[i, 1, c]).exp();
                let am = lm.get(&[i, m, c]).exp() / zm;
                video += at * am * p.get(&[i, m, c]);
                per_mod[m] += at * p.get(&[i, m, c]);
            }
        }
        assert!((pooled.video.value().data()[c] - video).abs() <= 1e-12);
        assert!((pooled.audio.value().data()[c] - per_mod[0]).abs() <= 1e-12);
        assert!((pooled.visual.value().data()[c] - per_mod[1]).abs() <= 1e-12);
    }
}

#[test]
fn reversal_weight_changes_gradients_not_values() {
    let batch = random_batch(2, 4, 8, 3);
    let a = Parser::new(parser_cfg(4, 8), 3).unwrap();
    let b = Parser::from_params(ParserConfig { lambda_ad: 0.0, ..*a.config() }, a.params.clone()).unwrap();
    let oa = a.predict(&batch).unwrap();
    let ob = b.predict(&batch).unwrap();
    assert_eq!(oa.snippet_probs, ob.snippet_probs);
    assert_eq!(oa.fused, ob.fused);
}

fn gradients(p: &Parser, batch: &SnippetBatch) -> ParamSet {
    let tape = Tape::new();
    let (bound, graph) = p.forward(&tape, batch).unwrap();
    let (loss, _) = p.loss(&graph, batch).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut params = p.params.clone();
    params.store_grads(&bound, &grads);
    params
}

#[test]
fn zero_reversal_weight_matches_discriminator_free_gradients() {
    let batch = random_batch(3, 4, 8, 4);
    let cfg = ParserConfig {
        lambda_ad: 0.0,
        ..parser_cfg(4, 8)
    };
    let with = Parser::new(cfg, 4).unwrap();
    let mut shared = ParamSet::new();
    for (name, p) in with.params.iter() {
        if !name.starts_with("disc.") {
            shared.insert(name, p.value.clone());
        }
    }
    let without = Parser::from_params(ParserConfig { use_adv: false, ..cfg }, shared).unwrap();
    let gw = gradients(&with, &batch);
    let go = gradients(&without, &batch);
    for (name, p) in go.iter() {
        assert_eq!(gw.grad(name), p.grad.as_ref(), "{name}");
    }
}

#[test]
fn discriminator_alone_learns_separable_features() {
    let d = 8;
    let p = Parser::new(parser_cfg(2, d), 5).unwrap();
    let mut disc = ParamSet::new();
    for (name, v) in p.params.iter() {
        if name.starts_with("disc.") {
            disc.insert(name, v.value.clone());
        }
    }
    let mut r = rng::seeded(5);
    let n = 200;
    let direction = Tensor::randn(&[d], 1.0, &mut r);
    let targets = Tensor::from_fn(&[n], |i| (i % 2 == 0) as u8 as f64);
    let feats = Tensor::from_fn(&[n, d], |i| {
        let (row, k) = (i / d, i % d);
        let sign = if row % 2 == 0 { 1.0 } else { -1.0 };
        sign * direction.data()[k] + 0.3 * ((i * 7919 % 13) as f64 / 13.0 - 0.5)
    });
    let schedule = OptimizerState {
        base_lr: 1e-2,
        decay_factor: 1.0,
        decay_every_epochs: 1,
        current_epoch: 0,
    };
    let mut opt = Optimizer::new(UpdateRule::Adam, schedule);
    for _ in 0..100 {
        let tape = Tape::new();
        let bound = disc.bind(&tape);
        let probs = discriminate(&bound, tape.constant(feats.clone()), 0.4).unwrap();
        let loss = adversarial_loss(probs, &targets).unwrap();
        let grads = tape.backward(loss).unwrap();
        disc.store_grads(&bound, &grads);
        opt.step(&mut disc).unwrap();
    }
    let tape = Tape::new();
    let probs = discriminate(&disc.bind(&tape), tape.constant(feats), 0.4).unwrap();
    let correct = probs
        .value()
        .data()
        .iter()
        .zip(targets.data())
        .filter(|(p, t)| (**p >= 0.5) == (**t == 1.0))
        .count();
    assert!(correct as f64 / n as f64 >= 0.95, "accuracy {correct}/{n}");
}

#[test]
fn classification_losses_match_scalar_oracles() {
    let mut r = rng::seeded(7);
    let tape = Tape::new();
    let probs = Tensor::uniform(&[4, 6], 0.5, &mut r).map(|x| x + 0.5);
    let labels = Tensor::from_fn(&[4, 6], |_| if r.random_bool(0.5) { 1.0 } else { 0.0 });
    let p = tape.constant(probs.clone());
    assert!((wsl_loss(p, &labels).unwrap().item() - bce_oracle(probs.data(), labels.data())).abs() <= 1e-12);
    assert!(wsl_loss(tape.constant(labels.clone()), &labels).unwrap().item() < 1e-5);
    assert!((wsl_loss(tape.constant(Tensor::full(&[4, 6], 0.5)), &labels).unwrap().item() - LN_2).abs() <= 1e-12);

    let disc = Tensor::uniform(&[3, 10, 2], 0.5, &mut r).map(|x| x + 0.5);
    let targets = modality_targets(3, 10);
    let l = adversarial_loss(tape.constant(disc.clone()), &targets).unwrap().item();
    assert!((l - bce_oracle(disc.data(), targets.data())).abs() <= 1e-12);
    assert!(adversarial_loss(tape.constant(targets.clone()), &targets).unwrap().item() < 1e-5);
    let chance = adversarial_loss(tape.constant(Tensor::full(&[3, 10, 2], 0.5)), &targets).unwrap().item();
    assert!((chance - LN_2).abs() <= 1e-9);
}

#[test]
fn guided_loss_smoothing() {
    let mut r = rng::seeded(8);
    let tape = Tape::new();
    let labels = Tensor::from_fn(&[2, 5], |i| (i % 2) as f64);
    let a = tape.constant(Tensor::uniform(&[2, 5], 0.4, &mut r).map(|x| x + 0.5));
    let v = tape.constant(Tensor::uniform(&[2, 5], 0.4, &mut r).map(|x| x + 0.5));
    let plain = a.bce(&labels).unwrap().item() + v.bce(&labels).unwrap().item();
    assert_eq!(guided_loss(a, v, &labels, 0.0).unwrap().item(), plain);
    assert!(guided_loss(a, v, &labels, 0.5).is_err());
    let target = smooth_labels(&labels, 0.1);
    assert!(close(&target.data()[..2], &[0.1, 0.9], 1e-15));

    // One shared probability, descended on the smoothed loss, settles at the target.
    let one = Tensor::full(&[1, 1], 1.0);
    let mut logit = 0.0f64;
    for _ in 0..4000 {
        let tape = Tape::new();
        let z = tape.leaf(Tensor::full(&[1, 1], logit));
        let p = z.sigmoid();
        let l = guided_loss(p, p, &one, 0.1).unwrap();
        let g = tape.backward(l).unwrap().get_or_zeros(z).item();
        logit -= 0.5 * g;
    }
    let p = 1.0 / (1.0 + (-logit).exp());
    assert!((p - 0.9).abs() < 1e-6, "settled at {p}");
}

#[test]
fn decoded_av_events_lie_inside_audio_and_visual_events() {
    let p = Parser::new(parser_cfg(5, 8), 9).unwrap();
    let mut out = p.predict(&random_batch(6, 5, 8, 9)).unwrap();
    let mut r = rng::seeded(9);
    out.snippet_probs = Tensor::uniform(&[6, 10, 2, 5], 0.5, &mut r).map(|x| x + 0.5);
    out.video_probs = Tensor::uniform(&[6, 5], 0.5, &mut r).map(|x| x + 0.5);
    let dec = decode(&out, 0.5).unwrap();
    for b in 0..6 {
        let audio = extract_events(&dec.audio[b], Modality::Audio);
        let visual = extract_events(&dec.visual[b], Modality::Visual);
        for e in extract_events(&dec.audio_visual[b], Modality::AudioVisual) {
            assert!(audio.iter().any(|a| a.contains(&e)));
            assert!(visual.iter().any(|v| v.contains(&e)));
        }
        for t in 0..10 {
            for c in 0..5 {
                assert_eq!(dec.audio_visual[b][t][c], dec.audio[b][t][c] && dec.visual[b][t][c]);
            }
        }
    }
}

#[test]
fn ablation_variants_build_and_run() {
    let batch = random_batch(2, 3, 8, 10);
    for v in ModelVariant::ALL {
        let p = Parser::new(parser_cfg(3, 8).with_variant(v), 10).unwrap();
        let tape = Tape::new();
        let (_, graph) = p.forward(&tape, &batch).unwrap();
        let (loss, report) = p.loss(&graph, &batch).unwrap();
        assert!(report.is_finite() && loss.item() == report.l_total, "{}", v.label());
        assert_eq!(graph.disc_probs.is_some(), p.config().use_adv);
    }
}
