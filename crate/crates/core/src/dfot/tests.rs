use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dataset::{generate_interaction, permute_agents, preprocess, GeneratorParams, InteractionMode};
use crate::geometry::{axis_angle, propagate_partner_transform, RigidTransform};
use crate::nn::grad_check;

const OMEGA: usize = 2;

fn raw_layout(p_max: usize) -> TokenLayout {
    TokenLayout { d_z: raw_latent_width(OMEGA), p_max, omega: OMEGA, use_partner: true }
}

fn tiny_config(layout: TokenLayout) -> DfotConfig {
    DfotConfig { d: 8, layers: 1, heads: 2, d_emb: 4, layout, ..DfotConfig::desk() }
}

fn seq(mode: InteractionMode, p: usize, t: usize, seed: u64) -> MotionSequence {
    preprocess(&generate_interaction(mode, p, t, seed, &GeneratorParams::default()).unwrap()).unwrap()
}

fn raw_tokens(s: &MotionSequence, layout: TokenLayout) -> TokenSeq {
    assemble_tokens(s, &agent_latents::<f64>(s, None, layout.omega).unwrap(), layout).unwrap()
}

fn batch_of(ex: &TokenSeq, seed: u64) -> DenoiseBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (noisy, tau) = noise_example(ex, &mut rng, None).unwrap();
    let mut b = DenoiseBatch::new(ex.layout, ex.steps, ex.agents);
    b.push(ex, &noisy, &tau).unwrap();
    b
}

fn loss_of_prediction(b: &DenoiseBatch, pred: Vec<f64>, stats: &TokenStats, cfg: &DfotConfig) -> DfotLossParts {
    let tape = Tape::<f64>::new();
    let p = tape.constant(Tensor::matrix(b.rows(), b.layout.width(), pred).unwrap());
    dfot_loss(&tape, p, b, stats, cfg).parts
}

#[test]
fn token_width_and_layout() {
    let l = DfotConfig::desk().layout;
    assert_eq!(l.width(), 179);
    assert_eq!(l.width(), 32 + 3 * 36 + 36 + 3);
    let no_partner = TokenLayout { use_partner: false, ..l };
    assert_eq!(no_partner.width(), 32 + 36);

    let s = seq(InteractionMode::Orbit, 2, 64, 1);
    let layout = TokenLayout { omega: 4, d_z: raw_latent_width(4), ..raw_layout(4) };
    let t = raw_tokens(&s, layout);
    assert_eq!((t.steps, t.agents, t.active_len()), (16, 2, 32));
    for a in 0..2 {
        let tok = t.token(5, a);
        assert_eq!(tok[layout.bits_start()], 1.0);
        for sl in 1..3 {
            assert_eq!(tok[layout.bits_start() + sl], 0.0);
            assert!(tok[layout.slot_start(sl)..layout.slot_start(sl) + layout.block()].iter().all(|v| *v == 0.0));
        }
    }
    // a partner slot carries that frame's self-to-partner transform
    let code = s.self_to_partner(9, 0, 1).unwrap().to_9d();
    assert_eq!(&t.token(2, 0)[layout.slot_start(0) + 9..layout.slot_start(0) + 18], &code);
}

#[test]
fn alpha_bar_examples() {
    assert_eq!(alpha_bar(1.0).unwrap(), 0.0);
    let oracle = (0.008f64 / 1.008 * std::f64::consts::PI / 2.0).cos().powi(2);
    assert!((alpha_bar(0.0).unwrap() - oracle).abs() < 1e-15);
    assert!((alpha_bar(0.0).unwrap() - 0.9998446).abs() < 1e-6);
    let grid: Vec<f64> = (0..1000).map(|i| alpha_bar(i as f64 / 999.0).unwrap()).collect();
    assert!(grid.windows(2).all(|w| w[1] < w[0]));
    assert!(matches!(alpha_bar(1.5), Err(DfotError::OutOfRange(_))));
    assert!(alpha_bar(-0.1).is_err());
}

#[test]
fn perturb_examples() {
    let m = [0.5, -1.0, 2.0];
    let e = [0.3, 0.1, -0.7];
    let on = [true; 3];
    assert_eq!(perturb(&m, &e, 1.0, &on).unwrap(), e.to_vec());
    let a = alpha_bar(0.0).unwrap();
    let out = perturb(&m, &e, 0.0, &on).unwrap();
    for i in 0..3 {
        assert!((out[i] - (a.sqrt() * m[i] + (1.0 - a).sqrt() * e[i])).abs() < 1e-15);
    }
    let out = perturb(&m, &[0.0; 3], 0.4, &on).unwrap();
    let s = alpha_bar(0.4).unwrap().sqrt();
    assert_eq!(out, m.iter().map(|v| s * v).collect::<Vec<_>>());
    let partial = perturb(&m, &e, 1.0, &[true, false, true]).unwrap();
    assert_eq!(partial[1], m[1]);
    assert!(perturb(&m, &e[..2], 0.5, &on).is_err());
}

proptest! {
    #[test]
    fn signal_and_noise_weights_sum_to_one(tau in 0.0f64..=1.0) {
        let a = alpha_bar(tau).unwrap();
        prop_assert!((a.sqrt().powi(2) + (1.0 - a).sqrt().powi(2) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_components_sum_to_total(seed in 0u64..500, scale in 0.01f64..2.0) {
        let s = seq(InteractionMode::Ring, 3, 64, seed);
        let layout = raw_layout(3);
        let raw = raw_tokens(&s, layout).window(0, 4);
        let stats = TokenStats::from_tokens(std::slice::from_ref(&raw)).unwrap();
        let ex = stats.normalize(&raw);
        let b = batch_of(&ex, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred: Vec<f64> = b.clean.iter().map(|v| v + scale * rng.random_range(-1.0..1.0)).collect();
        let parts = loss_of_prediction(&b, pred, &stats, &DfotConfig { layout, ..DfotConfig::desk() });
        prop_assert!((parts.components.iter().sum::<f64>() - parts.total).abs() < 1e-9);
    }
}

#[test]
fn ground_truth_loss_is_zero_and_decomposes() {
    for mode in [InteractionMode::Orbit, InteractionMode::Ring, InteractionMode::ApproachRetreat] {
        let s = seq(mode, 3, 64, 11);
        let layout = raw_layout(3);
        let raw = raw_tokens(&s, layout);
        let stats = TokenStats::from_tokens(std::slice::from_ref(&raw)).unwrap();
        let ex = stats.normalize(&raw).window(0, 8);
        let b = batch_of(&ex, 3);
        let cfg = DfotConfig { layout, ..DfotConfig::desk() };
        let parts = loss_of_prediction(&b, b.clean.clone(), &stats, &cfg);
        assert!(parts.total.abs() < 1e-9, "{mode:?} {parts:?}");

        // latent-only perturbation touches only the first term
        let mut pred = b.clean.clone();
        for r in 0..b.rows() {
            pred[r * layout.width()] += 0.3;
        }
        let parts = loss_of_prediction(&b, pred, &stats, &cfg);
        assert!(parts.components[0] > 0.0);
        assert!(parts.components[1..].iter().all(|c| c.abs() < 1e-9), "{parts:?}");
    }
}

#[test]
fn consistency_vanishes_on_propagated_predictions() {
    let layout = raw_layout(2);
    let steps = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut rand_tf = |scale: f64| {
        let axis = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let t = [rng.random_range(-scale..scale), rng.random_range(-scale..scale), rng.random_range(-scale..scale)];
        RigidTransform::new(axis_angle(&axis, rng.random_range(-1.0..1.0)), t)
    };
    let frames = steps * OMEGA;
    let d0: Vec<_> = (0..frames).map(|_| rand_tf(0.1)).collect();
    let d1: Vec<_> = (0..frames).map(|_| rand_tf(0.1)).collect();
    let mut t01 = vec![rand_tf(2.0)];
    for f in 1..frames {
        t01.push(propagate_partner_transform(&t01[f - 1], &d0[f], &d1[f]));
    }
    let mut raw = TokenSeq::zeros(layout, steps, 2);
    for i in 0..steps {
        for k in 0..OMEGA {
            let f = i * OMEGA + k;
            for (a, d, tp) in [(0, &d0[f], t01[f]), (1, &d1[f], t01[f].invert())] {
                let tok = raw.token_mut(i, a);
                let ds = layout.delta_start() + k * 9;
                tok[ds..ds + 9].copy_from_slice(&d.to_9d());
                let so = layout.slot_start(0) + k * 9;
                tok[so..so + 9].copy_from_slice(&tp.to_9d());
                tok[layout.bits_start()] = 1.0;
            }
        }
    }
    let stats = TokenStats {
        z: crate::dataset::NormStats::identity(layout.d_z),
        partner: crate::dataset::NormStats { mean: vec![0.1; 9], std: vec![1.7; 9] },
        delta: crate::dataset::NormStats { mean: vec![-0.2; 9], std: vec![0.4; 9] },
    };
    let ex = stats.normalize(&raw);
    let mut b = batch_of(&ex, 1);
    // targets elsewhere so only the prediction's own consistency is measured
    b.clean.iter_mut().for_each(|v| *v += 1.0);
    let cfg = DfotConfig { layout, ..DfotConfig::desk() };
    let parts = loss_of_prediction(&b, ex.data.clone(), &stats, &cfg);
    assert!(parts.components[3].abs() < 1e-9, "{parts:?}");
    assert!(parts.components[1] > 0.1);
}

#[test]
fn permuting_tokens_matches_permuting_the_sequence() {
    let s = seq(InteractionMode::Ring, 3, 64, 2);
    let layout = raw_layout(4);
    let perm = [2, 0, 1];
    let a = raw_tokens(&s, layout).permuted(&perm);
    let b = raw_tokens(&permute_agents(&s, &perm), layout);
    assert_eq!(a.present, b.present);
    let max = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(max < 1e-12, "{max}");
}

#[test]
fn masked_ghosts_equal_dyadic_only_build() {
    let s = seq(InteractionMode::Ring, 3, 64, 4);
    let layout = raw_layout(3);
    let raw = raw_tokens(&s, layout);
    let stats = TokenStats::from_tokens(std::slice::from_ref(&raw)).unwrap();
    let masked = stats.normalize(&raw).window(0, 4).masked(&[0, 1]).unwrap();
    let mut dyadic = TokenSeq::zeros(layout, 4, 2);
    for i in 0..4 {
        for a in 0..2 {
            dyadic.token_mut(i, a).copy_from_slice(masked.token(i, a));
        }
    }
    assert_eq!(masked.token(1, 0)[layout.bits_start() + 1], 0.0);
    let model = Dfot::<f64>::new(tiny_config(layout)).unwrap();
    let (bm, bd) = (batch_of(&masked, 8), batch_of(&dyadic, 8));
    let loss = |b: &DenoiseBatch| {
        let tape = Tape::new();
        let p = model.store.bind(&tape);
        model.loss(&tape, &p, b, &stats).unwrap().parts
    };
    let (pm, pd) = (loss(&bm), loss(&bd));
    assert!((pm.total - pd.total).abs() < 1e-6, "{pm:?} {pd:?}");
    // valid predictions agree as well
    let (ym, yd) = (model.predict(&bm).unwrap(), model.predict(&bd).unwrap());
    let w = layout.width();
    for i in 0..4 {
        for a in 0..2 {
            let (rm, rd) = (bm.row(0, i, a), bd.row(0, i, a));
            for c in 0..w {
                assert!((ym[rm * w + c] - yd[rd * w + c]).abs() < 1e-6);
            }
        }
        assert!(ym[bm.row(0, i, 2) * w..(bm.row(0, i, 2) + 1) * w].iter().all(|v| *v == 0.0));
    }
}

#[test]
fn embedding_properties() {
    let layout = raw_layout(2);
    let model = Dfot::<f64>::new(tiny_config(layout)).unwrap();
    let mut ex = TokenSeq::zeros(layout, 2, 2);
    for i in 0..2 {
        for a in 0..2 {
            ex.token_mut(i, a).iter_mut().enumerate().for_each(|(c, v)| *v = (c as f64 * 0.37).sin());
        }
    }
    let mut b = DenoiseBatch::new(layout, 2, 2);
    b.push(&ex, &ex.data, &[0.3, 0.3, 0.3, 0.8]).unwrap();
    assert_eq!(b.positions(), vec![0, 0, 1, 1]);
    let tape = Tape::new();
    let p = model.store.bind(&tape);
    let e = model.embed_var(&p, &tape, &b).unwrap().to_tensor();
    let psi = model.store.get(model.agent_table);
    for c in 0..model.config.d {
        let diff = e.row(1)[c] - e.row(0)[c];
        assert!((diff - (psi.row(1)[c] - psi.row(0)[c])).abs() < 1e-12);
    }
    // same content and agent, different level
    assert!((0..model.config.d).any(|c| (e.row(3)[c] - e.row(1)[c]).abs() > 1e-6));
}

#[test]
fn forward_shape_and_determinism() {
    let s = seq(InteractionMode::Orbit, 2, 64, 6);
    let layout = raw_layout(3);
    let raw = raw_tokens(&s, layout);
    let stats = TokenStats::from_tokens(std::slice::from_ref(&raw)).unwrap();
    let b = batch_of(&stats.normalize(&raw).window(2, 5), 2);
    let model = Dfot::<f32>::new(tiny_config(layout)).unwrap();
    let y1 = model.predict(&b).unwrap();
    assert_eq!(y1.len(), b.rows() * layout.width());
    assert_eq!(y1, model.predict(&b).unwrap());
}

#[test]
fn grad_check_full_loss_on_two_tokens() {
    let s = seq(InteractionMode::Orbit, 2, 64, 9);
    let layout = raw_layout(2);
    let raw = raw_tokens(&s, layout);
    let stats = TokenStats::from_tokens(std::slice::from_ref(&raw)).unwrap();
    let b = batch_of(&stats.normalize(&raw).window(3, 1), 4);
    assert_eq!(b.rows(), 2);
    let model = Dfot::<f64>::new(tiny_config(layout)).unwrap();
    let parts = {
        let tape = Tape::new();
        let p = model.store.bind(&tape);
        model.loss(&tape, &p, &b, &stats).unwrap().parts
    };
    assert!(parts.components[3] > 0.0, "consistency term must be active: {parts:?}");
    let rep = grad_check(&model.store, 5, |tape, p| model.loss(tape, p, &b, &stats).unwrap().total);
    assert!(rep.max_rel_err < 1e-4, "{rep:?}");
}

#[test]
fn config_stats_and_checkpoint_roundtrip() {
    let layout = raw_layout(3);
    let cfg = tiny_config(layout);
    assert_eq!(DfotConfig::from_pairs(&cfg.to_pairs()).unwrap(), cfg);
    let s = seq(InteractionMode::Orbit, 2, 64, 3);
    let stats = TokenStats::from_tokens(&[raw_tokens(&s, layout)]).unwrap();
    let model = Dfot::<f32>::new(cfg).unwrap();
    let text = model.to_checkpoint(&stats, None).to_text();
    let (back, st) = Dfot::<f32>::from_checkpoint(&Checkpoint::parse(&text).unwrap()).unwrap();
    assert_eq!(st, stats);
    for (a, b) in model.store.tensors().iter().zip(back.store.tensors()) {
        assert_eq!(a.data(), b.data());
    }
    assert!(DfotConfig { d_emb: 3, ..DfotConfig::desk() }.validate().is_err());
}

#[test]
fn short_training_is_deterministic_and_learns() {
    let layout = raw_layout(2);
    let seqs: Vec<_> = (0..2).map(|i| seq(InteractionMode::Orbit, 2, 64, 20 + i)).collect();
    let data = TokenDataset::build::<f32>(&seqs, &[], None, layout).unwrap();
    let tc = DfotTrainConfig {
        steps: 40,
        batch_size: 2,
        window: 8,
        eval_every: 20,
        optimizer: AdamWConfig { base_lr: 3e-3, ..DfotTrainConfig::desk().optimizer },
        ..DfotTrainConfig::desk()
    };
    let cfg = DfotConfig { d: 16, ..tiny_config(layout) };
    let (m1, l1) = train_dfot(&data, &cfg, &tc).unwrap();
    let (m2, l2) = train_dfot(&data, &cfg, &tc).unwrap();
    assert_eq!(l1.step_losses, l2.step_losses);
    assert_eq!(m1.store.tensors()[0].data(), m2.store.tensors()[0].data());
    assert!(l1.final_eval() < l1.initial_eval(), "{:?}", l1.train_eval);
    assert!(train_dfot(&data, &cfg, &DfotTrainConfig { window: 64, ..tc }).is_err());
}
