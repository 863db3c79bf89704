//! Criteria that need no training: geometry, schedule, gradients, losses.

use std::f64::consts::{FRAC_PI_2, PI};

use magnet_core::dataset::{InteractionMode, MotionSequence, NormStats};
use magnet_core::dfot::{
    alpha_bar, assemble_tokens, agent_latents, dfot_loss, noise_example, raw_latent_width, DenoiseBatch, Dfot,
    DfotConfig, DfotLossParts, TokenLayout, TokenSeq, TokenStats,
};
use magnet_core::geometry::{
    canonicalize, geodesic_distance, heading_of, matrix_to_rot6d, norm, propagate_partner_transform, rot6d_to_matrix,
    sub3, Mat3, RigidTransform, Rotation6D,
};
use magnet_core::nn::se3::{transform_distance, TfVar};
use magnet_core::nn::{
    grad_check, upsample_repeat, AttnLayout, Bound, Conv1d, LayerNorm, Linear, Mlp, ParamStore, ResBlock1d, Tape,
    Tensor, TransformerBlock, Var,
};
use magnet_core::vqvae::{VqBatch, Vqvae, VqvaeConfig, VqvaeInput};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::fixtures::{rng, seq};
use crate::Verdict;

const TOL: f64 = 1e-9;

/// Rotation matrix of a unit quaternion (w, x, y, z), built independently of
/// the library's constructors.
fn quat_matrix(q: [f64; 4]) -> Mat3<f64> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn random_rotation(r: &mut ChaCha8Rng) -> Mat3<f64> {
    quat_matrix([0; 4].map(|_| r.sample(StandardNormal)))
}

/// Rotation by exactly `angle` about a random axis.
fn rotation_by(r: &mut ChaCha8Rng, angle: f64) -> Mat3<f64> {
    let axis: [f64; 3] = [0; 3].map(|_| r.sample(StandardNormal));
    let n = norm(&axis);
    let s = (angle / 2.0).sin() / n;
    quat_matrix([(angle / 2.0).cos(), axis[0] * s, axis[1] * s, axis[2] * s])
}

fn mat_mul(a: &Mat3<f64>, b: &Mat3<f64>) -> Mat3<f64> {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

fn max_diff(a: &Mat3<f64>, b: &Mat3<f64>) -> f64 {
    (0..9).map(|k| (a[k / 3][k % 3] - b[k / 3][k % 3]).abs()).fold(0.0, f64::max)
}

fn propagation_residual(s: &MotionSequence) -> f64 {
    let mut worst: f64 = 0.0;
    let agents = s.active_agents();
    for t in 1..s.num_frames {
        for &p in &agents {
            for &q in agents.iter().filter(|q| **q != p) {
                let pred = propagate_partner_transform(
                    s.self_to_partner(t - 1, p, q).unwrap(),
                    s.delta_can(t, p).unwrap(),
                    s.delta_can(t, q).unwrap(),
                );
                let truth = s.self_to_partner(t, p, q).unwrap();
                worst = worst.max(geodesic_distance(&pred.r, &truth.r) + norm(&sub3(&pred.t, &truth.t)));
            }
        }
    }
    worst
}

pub fn geometry(v: &mut Verdict) {
    let mut r = rng(1);
    let mut worst_rot = 0.0f64;
    let mut worst_6d = 0.0f64;
    for _ in 0..1000 {
        let m = random_rotation(&mut r);
        let back = rot6d_to_matrix(&matrix_to_rot6d(&m).unwrap()).unwrap();
        worst_rot = worst_rot.max(max_diff(&m, &back));
        // arbitrary 6D input: decoding is idempotent after one roundtrip
        let raw = Rotation6D([0; 6].map(|_| r.sample(StandardNormal)));
        let m1 = rot6d_to_matrix(&raw).unwrap();
        let m2 = rot6d_to_matrix(&matrix_to_rot6d(&m1).unwrap()).unwrap();
        worst_6d = worst_6d.max(max_diff(&m1, &m2));
    }
    v.check(worst_rot < TOL, format!("matrix->6D->matrix error {worst_rot:e}"));
    v.check(worst_6d < TOL, format!("6D->matrix roundtrip error {worst_6d:e}"));

    let (mut sym, mut tri, mut zero, mut oracle) = (true, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let (a, b, c) = (random_rotation(&mut r), random_rotation(&mut r), random_rotation(&mut r));
        let (ab, bc, ac) = (geodesic_distance(&a, &b), geodesic_distance(&b, &c), geodesic_distance(&a, &c));
        sym &= ab == geodesic_distance(&b, &a) && ab >= 0.0;
        tri = tri.max(ac - ab - bc);
        zero = zero.max(geodesic_distance(&a, &a));
        let angle = r.random_range(0.0..PI);
        let rel = mat_mul(&a, &rotation_by(&mut r, angle));
        oracle = oracle.max((geodesic_distance(&a, &rel) - angle).abs());
    }
    v.check(sym, "geodesic not exactly symmetric");
    v.check(tri <= TOL, format!("triangle inequality violated by {tri:e}"));
    v.check(zero <= TOL, format!("d(R, R) = {zero:e}"));
    v.check(oracle <= TOL, format!("geodesic vs known angle error {oracle:e}"));

    let mut recon = 0.0f64;
    let mut checked = 0;
    while checked < 1000 {
        let root = RigidTransform::new(random_rotation(&mut r), [0; 3].map(|_| r.random_range(-5.0..5.0)));
        if heading_of(&root.r).is_none() {
            continue;
        }
        checked += 1;
        let d = canonicalize(&root, None).unwrap();
        recon = recon.max(d.canonical.compose(&d.can_to_root).distance(&root));
        let c = &d.canonical;
        let yaw_only = c.t[1] == 0.0 && (c.r[1][1] - 1.0).abs() < TOL && c.r[0][1].abs() < TOL && c.r[1][0].abs() < TOL;
        v.check(yaw_only, "canonical frame is not a floor-level yaw");
    }
    v.check(recon < TOL, format!("canonical reconstruction error {recon:e}"));

    let mut prop = 0.0f64;
    let mut count = 0;
    for mode in InteractionMode::ALL {
        let counts: Vec<usize> = if mode == InteractionMode::Mirror { vec![2] } else { (1..=4).collect() };
        for p in counts {
            for s in 0..3 {
                prop = prop.max(propagation_residual(&seq(mode, p, 64, 100 + s)));
                count += 1;
            }
        }
    }
    v.check(prop < TOL, format!("propagation residual {prop:e}"));
    v.note(format!("{count} generator sequences, propagation residual {prop:.1e}"));
}

pub fn schedule(v: &mut Verdict) {
    v.check(alpha_bar(1.0).unwrap() == 0.0, "alpha_bar(1) is not exactly 0");
    let s = 0.008;
    let oracle = ((s / (1.0 + s)) * FRAC_PI_2).cos().powi(2);
    let a0 = alpha_bar(0.0).unwrap();
    v.check((a0 - oracle).abs() < 1e-6 && (a0 - 0.9998446).abs() < 1e-6, format!("alpha_bar(0) = {a0}"));
    let grid: Vec<f64> = (0..1000).map(|k| alpha_bar(k as f64 / 999.0).unwrap()).collect();
    v.check(grid.windows(2).all(|w| w[1] < w[0]), "alpha_bar not strictly decreasing on the grid");
    v.note(format!("alpha_bar(0) = {a0:.7}"));
}

/// A fixed random projection turning any tensor into a non-trivial scalar.
fn project<'t>(tape: &'t Tape<f64>, y: Var<'t, f64>) -> Var<'t, f64> {
    let shape = y.shape();
    let w = Tensor::from_fn(&shape, |i| ((i * 7919 % 97) as f64 / 97.0) - 0.4);
    y.mul(tape.constant(w)).sum()
}

fn grad_case<F>(v: &mut Verdict, worst: &mut f64, name: &str, store: &ParamStore<f64>, per_param: usize, f: F)
where
    F: for<'t> Fn(&'t Tape<f64>, &Bound<'t, f64>) -> Var<'t, f64>,
{
    let rep = grad_check(store, per_param, f);
    *worst = worst.max(rep.max_rel_err);
    v.check(rep.max_rel_err < 1e-4 && rep.checked > 0, format!("{name}: rel err {:e}", rep.max_rel_err));
}

fn raw_layout(p_max: usize) -> TokenLayout {
    TokenLayout { d_z: raw_latent_width(2), p_max, omega: 2, use_partner: true }
}

fn raw_tokens(s: &MotionSequence, layout: TokenLayout) -> TokenSeq {
    assemble_tokens(s, &agent_latents::<f64>(s, None, layout.omega).unwrap(), layout).unwrap()
}

fn noisy_batch(ex: &TokenSeq, seed: u64) -> DenoiseBatch {
    let (noisy, tau) = noise_example(ex, &mut rng(seed), None).unwrap();
    let mut b = DenoiseBatch::new(ex.layout, ex.steps, ex.agents);
    b.push(ex, &noisy, &tau).unwrap();
    b
}

pub fn gradients(v: &mut Verdict) {
    let mut worst = 0.0;
    let mut r = rng(2);
    let mut s = ParamStore::<f64>::new();
    let lin = Linear::new(&mut s, "lin", 5, 6, &mut r);
    let x = s.add_normal("x", &[4, 5], 1.0, &mut r);
    grad_case(v, &mut worst, "linear", &s, 64, |t, p| project(t, lin.forward(p, p.var(x))));

    let mut s = ParamStore::<f64>::new();
    let ln = LayerNorm::new(&mut s, "ln", 6);
    let x = s.add_normal("x", &[4, 6], 1.0, &mut r);
    for t in s.tensors_mut() {
        for (i, val) in t.data_mut().iter_mut().enumerate() {
            *val += 0.05 * ((i % 5) as f64 - 2.0);
        }
    }
    grad_case(v, &mut worst, "layernorm", &s, 64, |t, p| project(t, ln.forward(p, p.var(x))));

    let mut s = ParamStore::<f64>::new();
    let mlp = Mlp::new(&mut s, "mlp", &[6, 8, 8, 6], true, &mut r);
    let x = s.add_normal("x", &[4, 6], 1.0, &mut r);
    grad_case(v, &mut worst, "mlp", &s, 64, |t, p| project(t, mlp.forward(p, p.var(x))));

    let mut s = ParamStore::<f64>::new();
    let conv = Conv1d::same(&mut s, "conv", 3, 4, 3, &mut r);
    let down = Conv1d::strided(&mut s, "down", 4, 4, 4, &mut r);
    let res = ResBlock1d::new(&mut s, "res", 4, &mut r);
    let x = s.add_normal("x", &[16, 3], 1.0, &mut r);
    grad_case(v, &mut worst, "conv/resblock/upsample", &s, 64, |t, p| {
        let h = down.forward(p, conv.forward(p, p.var(x), 2), 2);
        project(t, upsample_repeat(res.forward(p, h, 2), 4))
    });

    let mut s = ParamStore::<f64>::new();
    let blk = TransformerBlock::new(&mut s, "blk", 8, 2, &mut r).unwrap();
    let x = s.add_normal("x", &[6, 8], 1.0, &mut r);
    grad_case(v, &mut worst, "transformer block", &s, 64, |t, p| {
        let layout = AttnLayout { batch: 1, seq: 6, heads: 2, key_valid: vec![true, true, true, false, true, true] };
        let valid = t.constant(Tensor::from_fn(&[6, 1], |i| if i == 3 { 0.0 } else { 1.0 }));
        project(t, blk.forward(p, p.var(x), &[0, 0, 1, 1, 2, 2], &layout, valid))
    });

    let mut s = ParamStore::<f64>::new();
    let a = s.add_normal("a", &[2, 9], 1.0, &mut r);
    let b = s.add_normal("b", &[2, 9], 1.0, &mut r);
    grad_case(v, &mut worst, "se3 transform distance", &s, 64, |_t, p| {
        let (ta, tb) = (TfVar::from_9d(p.var(a)), TfVar::from_9d(p.var(b)));
        transform_distance(ta.invert().compose(tb).compose(ta), tb, 1.0).sum()
    });

    let vq = Vqvae::<f64>::new(VqvaeConfig { d_vq: 4, codebook_size: 8, stride: 2, hidden: 6, ..VqvaeConfig::desk() }).unwrap();
    let sq = seq(InteractionMode::Orbit, 2, 64, 4);
    let ia = VqvaeInput::from_sequence(&sq, 0, 2).unwrap().window(4, 8);
    let ib = VqvaeInput::from_sequence(&sq, 1, 2).unwrap().window(20, 8);
    let vb = VqBatch::new(&[&ia, &ib]).unwrap();
    // nearest-code assignment is piecewise constant; freeze it at the base point
    let frozen = {
        let tape = Tape::new();
        let p = vq.store.bind(&tape);
        vq.loss(&tape, &p, &vb, None).quant
    };
    grad_case(v, &mut worst, "vqvae loss", &vq.store, 6, |tape, p| vq.loss(tape, p, &vb, Some(&frozen)).total);

    let layout = raw_layout(2);
    let raw = raw_tokens(&seq(InteractionMode::Orbit, 2, 64, 9), layout);
    let stats = TokenStats::from_tokens(std::slice::from_ref(&raw)).unwrap();
    let db = noisy_batch(&stats.normalize(&raw).window(3, 1), 4);
    v.check(db.rows() == 2, "dfot grad batch is not two tokens");
    let model = Dfot::<f64>::new(DfotConfig { d: 8, layers: 1, heads: 2, d_emb: 4, layout, ..DfotConfig::desk() }).unwrap();
    let parts = {
        let tape = Tape::new();
        let p = model.store.bind(&tape);
        model.loss(&tape, &p, &db, &stats).unwrap().parts
    };
    v.check(parts.components[3] > 0.0, "consistency term inactive in the dfot grad check");
    grad_case(v, &mut worst, "dfot loss", &model.store, 5, |tape, p| model.loss(tape, p, &db, &stats).unwrap().total);
    v.note(format!("worst relative error {worst:.1e}"));
}

fn loss_of(b: &DenoiseBatch, pred: Vec<f64>, stats: &TokenStats, cfg: &DfotConfig) -> DfotLossParts {
    let tape = Tape::<f64>::new();
    let p = tape.constant(Tensor::matrix(b.rows(), b.layout.width(), pred).unwrap());
    dfot_loss(&tape, p, b, stats, cfg).parts
}

pub fn loss_decomposition(v: &mut Verdict) {
    let layout = raw_layout(3);
    let cfg = DfotConfig { layout, ..DfotConfig::desk() };
    let mut worst_sum = 0.0f64;
    for seed in 0..40u64 {
        let raw = raw_tokens(&seq(InteractionMode::Ring, 3, 64, seed), layout).window(0, 4);
        let stats = TokenStats::from_tokens(std::slice::from_ref(&raw)).unwrap();
        let b = noisy_batch(&stats.normalize(&raw), seed);
        let mut r = rng(seed);
        let scale = 0.01 + 0.05 * seed as f64;
        let pred: Vec<f64> = b.clean.iter().map(|x| x + scale * r.random_range(-1.0..1.0)).collect();
        let parts = loss_of(&b, pred, &stats, &cfg);
        worst_sum = worst_sum.max((parts.components.iter().sum::<f64>() - parts.total).abs());
    }
    v.check(worst_sum < TOL, format!("components differ from total by {worst_sum:e}"));

    let mut worst_gt = 0.0f64;
    for mode in [InteractionMode::Orbit, InteractionMode::Ring, InteractionMode::ApproachRetreat] {
        let raw = raw_tokens(&seq(mode, 3, 64, 11), layout);
        let stats = TokenStats::from_tokens(std::slice::from_ref(&raw)).unwrap();
        let b = noisy_batch(&stats.normalize(&raw).window(0, 8), 3);
        let parts = loss_of(&b, b.clean.clone(), &stats, &cfg);
        worst_gt = parts.components.iter().chain([&parts.total]).fold(worst_gt, |m, c| m.max(c.abs()));
    }
    v.check(worst_gt < TOL, format!("ground-truth loss component {worst_gt:e}"));

    // partner transforms built by propagation from random per-frame deltas
    let layout = raw_layout(2);
    let (steps, omega) = (3, layout.omega);
    let mut r = rng(5);
    let mut rand_tf = |scale: f64| {
        let rot = rotation_by(&mut r, 0.8);
        RigidTransform::new(rot, [0; 3].map(|_| scale * r.random_range(-1.0..1.0)))
    };
    let frames = steps * omega;
    let d0: Vec<_> = (0..frames).map(|_| rand_tf(0.1)).collect();
    let d1: Vec<_> = (0..frames).map(|_| rand_tf(0.1)).collect();
    let mut t01 = vec![rand_tf(2.0)];
    for f in 1..frames {
        t01.push(propagate_partner_transform(&t01[f - 1], &d0[f], &d1[f]));
    }
    let mut raw = TokenSeq::zeros(layout, steps, 2);
    for i in 0..steps {
        for k in 0..omega {
            let f = i * omega + k;
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
        z: NormStats::identity(layout.d_z),
        partner: NormStats { mean: vec![0.1; 9], std: vec![1.7; 9] },
        delta: NormStats { mean: vec![-0.2; 9], std: vec![0.4; 9] },
    };
    let ex = stats.normalize(&raw);
    let b = noisy_batch(&ex, 1);
    let parts = loss_of(&b, ex.data.clone(), &stats, &DfotConfig { layout, ..DfotConfig::desk() });
    v.check(parts.components[3].abs() < TOL, format!("consistency on propagated predictions {:e}", parts.components[3]));
    v.note(format!("sum residual {worst_sum:.1e}, consistency {:.1e}", parts.components[3].abs()));
}
