use magnet_core::body::{Capsule, L_FOOT, NUM_JOINTS, R_FOOT};
use magnet_core::dataset::InteractionMode;
use magnet_core::geometry::Vec3;
use magnet_core::metrics::{
    agent_capsules, foot_skating, frechet_distance, interpenetration, motion_interaction, mpjpe, mpjve, FeatureSet,
    JointTrack, CONTACT_HEIGHT,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::fixtures::{rng, seq};
use crate::Verdict;

fn normal_set(n: usize, dim: usize, mean: f64, seed: u64) -> FeatureSet {
    let mut r = rng(seed);
    FeatureSet::new(dim, (0..n * dim).map(|_| mean + r.sample::<f64, _>(StandardNormal)).collect()).unwrap()
}

fn track(frames: usize, mut f: impl FnMut(usize, usize) -> Vec3<f64>) -> JointTrack {
    let pos = (0..frames).flat_map(|t| (0..NUM_JOINTS).map(move |j| (t, j))).map(|(t, j)| f(t, j)).collect();
    JointTrack { frames, pos }
}

/// Deepest overlap of two capsules found by sampling spheres along both axes.
fn sphere_oracle(a: &Capsule, b: &Capsule, r: &mut ChaCha8Rng) -> f64 {
    let pts = |c: &Capsule, r: &mut ChaCha8Rng| {
        let mut v = vec![c.endpoint_a, c.endpoint_b];
        for _ in 0..600 {
            let s: f64 = r.random();
            v.push([0, 1, 2].map(|k| c.endpoint_a[k] + s * (c.endpoint_b[k] - c.endpoint_a[k])));
        }
        v
    };
    let (pa, pb) = (pts(a, r), pts(b, r));
    let mut best = 0.0f64;
    for x in &pa {
        for y in &pb {
            let d = ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2) + (x[2] - y[2]).powi(2)).sqrt();
            best = best.max(a.radius + b.radius - d);
        }
    }
    best
}

pub fn oracles(v: &mut Verdict) {
    let a = normal_set(200, 3, 0.0, 1);
    let same = frechet_distance(&a, &a).unwrap();
    v.check(same.abs() <= 1e-6, format!("FD on identical sets {same:e}"));
    let (g, r) = (normal_set(10_000, 1, 0.0, 2), normal_set(10_000, 1, 1.0, 3));
    let fd = frechet_distance(&g, &r).unwrap();
    v.check((fd - 1.0).abs() < 0.05, format!("1-D Gaussian FD {fd}"));
    v.check(fd == frechet_distance(&r, &g).unwrap(), "FD not symmetric");

    let frames = 10_000;
    let mut nr = rng(5);
    let shared: Vec<Vec3<f64>> = (0..frames * NUM_JOINTS).map(|_| [0; 3].map(|_| nr.sample(StandardNormal))).collect();
    let real = track(frames, |t, j| shared[t * NUM_JOINTS + j]);
    let noise = |seed| {
        let mut nr = rng(seed);
        track(frames, |_, _| [0; 3].map(|_| nr.sample(StandardNormal)))
    };
    let (ga, gb) = (noise(6), noise(7));
    let mi = motion_interaction((&ga, &gb), (&real, &real)).unwrap().value;
    v.check((mi - 1.0).abs() < 0.05, format!("MI of independent samples vs identical reals {mi}"));
    let trivial = motion_interaction((&ga, &gb), (&ga, &gb)).unwrap().value;
    v.check(trivial == 0.0, format!("MI on identical inputs {trivial}"));

    let base: Vec<Vec<Capsule>> = (0..5).map(|_| vec![Capsule { endpoint_a: [0.0; 3], endpoint_b: [0.0, 1.0, 0.0], radius: 0.1 }]).collect();
    let near: Vec<Vec<Capsule>> =
        (0..5).map(|_| vec![Capsule { endpoint_a: [0.16, 0.0, 0.0], endpoint_b: [0.16, 1.0, 0.0], radius: 0.1 }]).collect();
    let ip = interpenetration(&base, &near).unwrap();
    v.check((ip - 0.04).abs() < 1e-12, format!("IP of 0.04 m overlap {ip}"));

    let mut s = seq(InteractionMode::ApproachRetreat, 2, 64, 3);
    for t in 0..s.num_frames {
        let target = s.root(t, 0).t;
        s.root_world[t * 2 + 1].t = [target[0] + 0.15, target[1], target[2] + 0.05];
    }
    let (ca, cb) = (agent_capsules(&s, 0).unwrap(), agent_capsules(&s, 1).unwrap());
    let mut or = rng(8);
    let mut worst = 0.0f64;
    for t in (0..s.num_frames).step_by(8) {
        let exact = interpenetration(&ca[t..t + 1], &cb[t..t + 1]).unwrap();
        let oracle: f64 = ca[t].iter().map(|x| cb[t].iter().map(|y| sphere_oracle(x, y, &mut or)).sum::<f64>()).sum();
        worst = worst.max((exact - oracle).abs());
    }
    v.check(worst < 1e-3, format!("IP vs sphere oracle {worst:e} m"));

    let gt = track(8, |t, j| [0.1 * t as f64, j as f64, (t * j) as f64 * 0.01]);
    let off = 0.1 / 3f64.sqrt();
    let shifted = track(8, |t, j| gt.at(t, j).map(|x| x + off));
    let (pe, ve) = (mpjpe(&[&shifted], &gt).unwrap(), mpjve(&[&shifted], &gt).unwrap());
    v.check((pe - 0.1).abs() < 1e-12 && ve.abs() < 1e-12, format!("constant offset MPJPE {pe} MPJVE {ve}"));

    let sliding = track(30, |t, j| if j == L_FOOT || j == R_FOOT { [0.01 * t as f64, 0.0, 0.0] } else { [0.0, 1.0, 0.0] });
    let fs = foot_skating(&sliding, CONTACT_HEIGHT);
    v.check((fs - 0.01).abs() < 1e-12, format!("foot skating {fs}"));
    v.note(format!("FD {fd:.4}, MI {mi:.4}, IP oracle gap {worst:.1e}"));
}
