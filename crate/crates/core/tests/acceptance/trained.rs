//! Criteria on models overfit to small desk datasets.

use magnet_core::config::StrategyKind;
use magnet_core::dfot::TokenSeq;
use magnet_core::metrics::{mpjpe, JointTrack};
use magnet_core::pipeline::{generate, train_models};
use magnet_core::sampler::{
    make_plan, rollout_ultralong, sample, Guidance, GuidanceMode, Role, RolloutConfig, Strategy,
};

use crate::fixtures::{mirror, orbit, DFOT_STEPS, VQ_STEPS};
use crate::Verdict;

pub fn overfit_training(v: &mut Verdict) {
    let t = orbit();
    let vq = t.logs.vqvae.as_ref().expect("vqvae log");
    let vq_ratio = vq.final_eval() / vq.initial_eval();
    let df_ratio = t.logs.dfot.final_eval() / t.logs.dfot.initial_eval();
    v.check(VQ_STEPS <= 5000 && DFOT_STEPS <= 10_000, "step budgets exceeded");
    v.check(vq_ratio < 0.1, format!("vqvae loss ratio {vq_ratio:.4}"));
    v.check(df_ratio < 0.1, format!("dfot loss ratio {df_ratio:.4}"));

    let (again, logs) = train_models(&t.cfg, &t.splits).unwrap();
    let vq_text = |m: &magnet_core::pipeline::Models| m.vqvae.as_ref().unwrap().to_checkpoint(None).to_text();
    let df_text = |m: &magnet_core::pipeline::Models| m.dfot.to_checkpoint(&m.stats, None).to_text();
    v.check(vq_text(&t.models) == vq_text(&again), "vqvae parameters differ between identical runs");
    v.check(df_text(&t.models) == df_text(&again), "dfot parameters differ between identical runs");
    v.check(logs.vqvae.as_ref().unwrap().step_losses == vq.step_losses, "vqvae loss curves differ");
    v.check(logs.dfot.step_losses == t.logs.dfot.step_losses, "dfot loss curves differ");
    v.note(format!(
        "vqvae {:.3} -> {:.4} in {VQ_STEPS} steps, dfot {:.3} -> {:.4} in {DFOT_STEPS} steps, reruns bitwise equal",
        vq.initial_eval(),
        vq.final_eval(),
        t.logs.dfot.initial_eval(),
        t.logs.dfot.final_eval()
    ));
}

fn row(seq: &TokenSeq, r: usize) -> &[f64] {
    let w = seq.layout.width();
    &seq.data[r * w..(r + 1) * w]
}

pub fn sampling_contracts(v: &mut Verdict) {
    let t = orbit();
    let m = &t.models;
    let template = m.tokens(&t.splits.train[0]).unwrap().window(0, t.cfg.sample.window);
    let steps = template.steps;
    let w = template.layout.width();
    let mut runs = 0;
    for kind in StrategyKind::ALL.into_iter().filter(|k| *k != StrategyKind::Ultralong) {
        let mut cfg = t.cfg.clone();
        cfg.sample.strategy = kind;
        let plan = make_plan(&cfg.strategy(steps), &template.present, steps, cfg.sample.denoise_steps).unwrap();
        let base = sample(&m.dfot, &plan, &template, &Guidance::default(), 11).unwrap();
        runs += 1;
        let name = kind.name();
        for (r, role) in plan.roles.iter().enumerate() {
            let (got, cond) = (row(&base.tokens, r), row(&template, r));
            match role {
                Role::Clamped | Role::Revealed { .. } => {
                    v.check(got == cond, format!("{name}: conditioning row {r} changed"));
                }
                Role::Generated { .. } => {
                    v.check(plan.tau(plan.iterations, r) == 0.0, format!("{name}: row {r} not clean at the end"));
                    let mask = template.noise_mask(r % template.agents);
                    let pred = &base.final_predictions[r * w..(r + 1) * w];
                    let ok = (0..w).all(|c| if mask[c] { got[c] == pred[c] } else { got[c] == cond[c] });
                    v.check(ok, format!("{name}: row {r} differs from its final prediction"));
                }
                Role::Absent | Role::Marginal => {}
            }
        }
        for mode in [GuidanceMode::History, GuidanceMode::SelfHistory, GuidanceMode::PartnerHistory] {
            let g = sample(&m.dfot, &plan, &template, &Guidance::new(mode, 0.0), 11).unwrap();
            runs += 1;
            v.check(g.tokens == base.tokens, format!("{name}: {} with w=0 differs from unguided", mode.name()));
        }
    }

    for history in [0, 4, 8] {
        let sync = make_plan(&Strategy::AgenticSync { history }, &template.present, steps, 30).unwrap();
        let tt = make_plan(&Strategy::AgenticAsync { history, offset: 0.0 }, &template.present, steps, 30).unwrap();
        v.check(sync.schedule() == tt.schedule(), format!("offset 0 schedule differs from sync at history {history}"));
    }

    let rc = RolloutConfig { denoise_steps: t.cfg.sample.denoise_steps, ..RolloutConfig::new(16, 4) };
    let seed = template.window(0, 4);
    let out = rollout_ultralong(&m.dfot, &seed, 24, &rc, 3).unwrap();
    v.check(out.window(0, 4) == seed, "ultralong rollout altered its seed tokens");
    v.note(format!("{runs} sampling runs over 8 strategies"));
}

pub fn inpainting_fidelity(v: &mut Verdict) {
    let t = mirror();
    let mut cfg = t.cfg.clone();
    cfg.sample.strategy = StrategyKind::Inpaint;
    cfg.sample.agent = 1;
    cfg.sample.samples = 10;
    let best_of = |cond: &magnet_core::dataset::MotionSequence, salt: usize| {
        let gt = JointTrack::from_sequence(cond, 1).unwrap();
        let tracks: Vec<JointTrack> = (0..cfg.sample.samples)
            .map(|k| JointTrack::from_sequence(&generate(&cfg, &t.models, cond, salt + k, 0).unwrap().motion, 1).unwrap())
            .collect();
        mpjpe(&tracks.iter().collect::<Vec<_>>(), &gt).unwrap()
    };
    let train: Vec<f64> = t.splits.train.iter().enumerate().map(|(c, s)| best_of(s, 100 * c)).collect();
    let held: Vec<f64> = t.splits.test.iter().enumerate().map(|(c, s)| best_of(s, 1000 + 100 * c)).collect();
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let (tr, ho) = (mean(&train), mean(&held));
    v.check(tr < 0.15, format!("inpainting MPJPE {tr:.4} m"));
    v.note(format!("MPJPE {tr:.4} m on training sequences, {ho:.4} m held out"));
}

/// Mean joint displacement between consecutive frames, per frame (index 0 unused).
fn displacements(track: &JointTrack) -> Vec<f64> {
    let mut out = vec![0.0];
    for f in 1..track.frames {
        let d: f64 = (0..magnet_core::body::NUM_JOINTS)
            .map(|j| {
                let (a, b) = (track.at(f, j), track.at(f - 1, j));
                ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
            })
            .sum();
        out.push(d / magnet_core::body::NUM_JOINTS as f64);
    }
    out
}

/// Largest translation norm among delta and partner blocks of denormalized tokens.
fn translation_extent(tokens: &TokenSeq) -> (f64, f64) {
    let l = tokens.layout;
    let (mut delta, mut partner) = (0.0f64, 0.0f64);
    let tnorm = |b: &[f64]| (b[6] * b[6] + b[7] * b[7] + b[8] * b[8]).sqrt();
    for i in 0..tokens.steps {
        for a in (0..tokens.agents).filter(|a| tokens.present[*a]) {
            let tok = tokens.token(i, a);
            for k in 0..l.omega {
                delta = delta.max(tnorm(&tok[l.delta_start() + 9 * k..]));
                for sl in (0..l.slots()).filter(|sl| tokens.slot_present(a, *sl)) {
                    partner = partner.max(tnorm(&tok[l.slot_start(sl) + 9 * k..]));
                }
            }
        }
    }
    (delta, partner)
}

pub fn ultralong_rollout(v: &mut Verdict) {
    let t = orbit();
    let m = &t.models;
    let cond = &t.splits.train[0];
    let rc = RolloutConfig { denoise_steps: t.cfg.sample.denoise_steps, ..RolloutConfig::new(16, 4) };
    let windows = 10;
    let out = rollout_ultralong(&m.dfot, &m.tokens(cond).unwrap().window(0, rc.overlap), windows * rc.stride(), &rc, 21).unwrap();
    v.check(out.steps == rc.overlap + windows * rc.stride(), format!("rollout has {} steps", out.steps));
    let motion = m.decode(&out, cond, 0, true).unwrap();
    let omega = out.layout.omega;
    let seams: Vec<usize> = (0..windows).map(|j| (rc.overlap + j * rc.stride()) * omega).collect();
    let (mut seam_max, mut within) = (0.0f64, Vec::new());
    for a in motion.active_agents() {
        let d = displacements(&JointTrack::from_sequence(&motion, a).unwrap());
        for (f, x) in d.iter().enumerate().skip(1) {
            if seams.contains(&f) {
                seam_max = seam_max.max(*x);
            } else {
                within.push(*x);
            }
        }
    }
    within.sort_by(f64::total_cmp);
    let p95 = within[(0.95 * (within.len() - 1) as f64).round() as usize];
    v.check(seam_max <= 3.0 * p95, format!("seam jump {seam_max:.4} m vs p95 {p95:.4} m"));

    let (mut td, mut tp) = (0.0f64, 0.0f64);
    for s in &t.splits.train {
        let (d, p) = translation_extent(&m.stats.denormalize(&m.tokens(s).unwrap()));
        td = td.max(d);
        tp = tp.max(p);
    }
    let (rd, rp) = translation_extent(&m.stats.denormalize(&out));
    v.check(rd <= 2.0 * td, format!("delta translation {rd:.3} vs training {td:.3}"));
    v.check(rp <= 2.0 * tp, format!("partner translation {rp:.3} vs training {tp:.3}"));
    v.note(format!(
        "{} frames, seam/p95 {:.2}, delta {:.2}x and partner {:.2}x of training range",
        motion.num_frames,
        seam_max / p95,
        rd / td,
        rp / tp
    ));
}
