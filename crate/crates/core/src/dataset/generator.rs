//! Synthetic interactions with closed-form ground truth.

use std::f64::consts::{PI, TAU};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{DatasetError, MotionSequence, Transform, MAX_AGENTS};
use crate::body::{NUM_JOINTS, SHAPE_DIM};
use crate::geometry::{mat_mul, mirror_rotation, rot_x, rot_y, rot_z, Mat3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InteractionMode {
    /// Agents share a circle with fixed angular offsets, facing its centre.
    Orbit,
    /// Agent 1 repeats agent 0 mirrored, `lag` frames later.
    Mirror,
    /// Agents advance and retreat along their radial line, each lagging the previous.
    ApproachRetreat,
    /// Agents stand evenly spaced on a ring with coupled lateral sway.
    Ring,
}

impl InteractionMode {
    pub const ALL: [InteractionMode; 4] = [Self::Orbit, Self::Mirror, Self::ApproachRetreat, Self::Ring];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Orbit => "orbit",
            Self::Mirror => "mirror",
            Self::ApproachRetreat => "approach_retreat",
            Self::Ring => "ring",
        }
    }
}

impl FromStr for InteractionMode {
    type Err = DatasetError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| DatasetError::InvalidConfig(format!("unknown mode '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorParams {
    pub fps: u32,
    /// Circle radius in meters; drawn from the seed when `None`.
    pub radius: Option<f64>,
    /// Lag in frames for mirror and approach/retreat modes.
    pub lag: usize,
    /// Standard deviation of the drawn shape coefficients.
    pub beta_scale: f64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self { fps: 30, radius: None, lag: 8, beta_scale: 0.5 }
    }
}

pub const ROOT_HEIGHT: f64 = 0.9;

/// Per-agent motion parameters.
#[derive(Debug, Clone, Copy)]
struct Style {
    arm_amp: f64,
    leg_amp: f64,
    sway_amp: f64,
    bob_amp: f64,
    tilt_amp: f64,
}

/// Shared rhythm of an interaction.
#[derive(Debug, Clone, Copy)]
struct Rhythm {
    /// Limb phase advance per frame.
    limb_w: f64,
    phase: f64,
}

fn draw_style(rng: &mut ChaCha8Rng) -> Style {
    Style {
        arm_amp: rng.random_range(0.3..0.7),
        leg_amp: rng.random_range(0.15..0.35),
        sway_amp: rng.random_range(0.05..0.15),
        bob_amp: rng.random_range(0.01..0.03),
        tilt_amp: rng.random_range(0.03..0.08),
    }
}

fn rot6d(r: &Mat3<f64>) -> [f64; 6] {
    [r[0][0], r[1][0], r[2][0], r[0][1], r[1][1], r[2][1]]
}

/// Local joint rotations for limb phase `s` (radians).
fn limb_pose(style: &Style, s: f64) -> [Mat3<f64>; NUM_JOINTS] {
    let a = style.arm_amp * s.sin();
    let l = style.leg_amp * s.sin();
    [
        rot_x(0.0),
        rot_x(0.1 * (2.0 * s).sin()),
        rot_y(0.25 * (0.5 * s).sin()),
        mat_mul(&rot_z(-0.2 - 0.1 * s.cos()), &rot_x(a)),
        mat_mul(&rot_z(0.2 + 0.1 * s.cos()), &rot_x(-a)),
        rot_x(0.3 * (s + 0.5).sin()),
        rot_x(-0.3 * (s + 0.5).sin()),
        rot_x(-l),
        rot_x(l),
    ]
}

/// Root orientation with heading `yaw` and a small pitch/roll wobble.
fn root_rotation(style: &Style, yaw: f64, s: f64) -> Mat3<f64> {
    mat_mul(&rot_y(yaw), &mat_mul(&rot_x(style.tilt_amp * (2.0 * s).sin()), &rot_z(0.5 * style.tilt_amp * s.cos())))
}

/// Generates a deterministic interaction. Requires `1 ≤ P ≤ 4` (exactly 2 for
/// mirror mode) and `T ≥ 64`.
pub fn generate_interaction(
    mode: InteractionMode,
    num_agents: usize,
    num_frames: usize,
    seed: u64,
    params: &GeneratorParams,
) -> Result<MotionSequence, DatasetError> {
    if !(1..=MAX_AGENTS).contains(&num_agents) {
        return Err(DatasetError::InvalidConfig(format!("agent count {num_agents} outside 1..=4")));
    }
    if num_frames < 64 {
        return Err(DatasetError::InvalidConfig(format!("frame count {num_frames} below 64")));
    }
    if mode == InteractionMode::Mirror && num_agents != 2 {
        return Err(DatasetError::InvalidConfig("mirror mode needs exactly 2 agents".into()));
    }
    if params.fps == 0 || !params.fps.is_multiple_of(30) {
        return Err(DatasetError::InvalidConfig(format!("fps {} is not a multiple of 30", params.fps)));
    }
    if let Some(r) = params.radius {
        if !(r.is_finite() && r > 0.0) {
            return Err(DatasetError::InvalidConfig(format!("radius {r} must be positive")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = params.radius.unwrap_or_else(|| rng.random_range(0.8..1.4));
    // frequencies are specified per second so fps only changes sampling density
    let dt = 1.0 / params.fps as f64;
    let rhythm = Rhythm { limb_w: rng.random_range(3.0..6.0) * dt, phase: rng.random_range(0.0..TAU) };
    let orbit_w = rng.random_range(0.3..0.6) * rng_sign(&mut rng) * dt;
    let styles: Vec<Style> = (0..num_agents).map(|_| draw_style(&mut rng)).collect();
    let beta: Vec<[f64; SHAPE_DIM]> = (0..num_agents)
        .map(|_| {
            let mut b = [0.0; SHAPE_DIM];
            for v in b.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = z * params.beta_scale;
            }
            b
        })
        .collect();

    let per = NUM_JOINTS * 6;
    let mut theta = vec![0.0; num_frames * num_agents * per];
    let mut root_world = Vec::with_capacity(num_frames * num_agents);
    let lag = params.lag as f64;

    for t in 0..num_frames {
        let tf = t as f64;
        for p in 0..num_agents {
            let pf = p as f64;
            let (root, joints) = match mode {
                InteractionMode::Orbit => {
                    let s = rhythm.limb_w * tf + rhythm.phase + pf * PI;
                    let ang = orbit_w * tf + TAU * pf / num_agents as f64;
                    // agents share bob and wobble phase so heights stay equal
                    let bob = styles[0].bob_amp * (2.0 * (rhythm.limb_w * tf + rhythm.phase)).sin();
                    let pos = [radius * ang.cos(), ROOT_HEIGHT + bob, radius * ang.sin()];
                    let yaw = (-pos[0]).atan2(-pos[2]);
                    (Transform::new(root_rotation(&styles[p], yaw, s), pos), limb_pose(&styles[p], s))
                }
                InteractionMode::Mirror => {
                    let (r0, j0) = mirror_leader(&styles[0], &rhythm, radius, tf - lag * pf);
                    if p == 0 {
                        (r0, j0)
                    } else {
                        mirror_follower(&r0, &j0)
                    }
                }
                InteractionMode::ApproachRetreat => {
                    let s = rhythm.limb_w * tf + rhythm.phase - pf * lag * rhythm.limb_w;
                    let ang = TAU * pf / num_agents.max(2) as f64;
                    let d = radius * (1.0 + 0.4 * (0.5 * s).sin());
                    let pos = [d * ang.cos(), ROOT_HEIGHT + styles[p].bob_amp * (2.0 * s).sin(), d * ang.sin()];
                    let yaw = (-ang.cos()).atan2(-ang.sin());
                    (Transform::new(root_rotation(&styles[p], yaw, s), pos), limb_pose(&styles[p], s))
                }
                InteractionMode::Ring => {
                    let s = rhythm.limb_w * tf + rhythm.phase;
                    let ang = TAU * pf / num_agents as f64;
                    let own = s + TAU * pf / num_agents as f64;
                    let sway = styles[p].sway_amp * (s.sin() + 0.5 * own.sin());
                    let yaw = (-ang.cos()).atan2(-ang.sin());
                    let r_yaw = rot_y(yaw);
                    // lateral sway along the agent's local x axis
                    let pos = [
                        radius * ang.cos() + sway * r_yaw[0][0],
                        ROOT_HEIGHT + styles[p].bob_amp * (2.0 * s).sin(),
                        radius * ang.sin() + sway * r_yaw[2][0],
                    ];
                    (Transform::new(root_rotation(&styles[p], yaw, own), pos), limb_pose(&styles[p], own))
                }
            };
            root_world.push(root);
            for (j, m) in joints.iter().enumerate() {
                let i = ((t * num_agents + p) * NUM_JOINTS + j) * 6;
                theta[i..i + 6].copy_from_slice(&rot6d(m));
            }
        }
    }

    Ok(MotionSequence {
        fps: params.fps,
        num_agents,
        num_frames,
        presence: vec![true; num_agents],
        beta,
        theta,
        root_world,
        derived: None,
    })
}

fn rng_sign(rng: &mut ChaCha8Rng) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

/// Leader pose at (possibly fractional or negative) frame `tf`: side-steps
/// along x in front of the origin, facing +z.
fn mirror_leader(style: &Style, rhythm: &Rhythm, radius: f64, tf: f64) -> (Transform, [Mat3<f64>; NUM_JOINTS]) {
    let s = rhythm.limb_w * tf + rhythm.phase;
    let pos = [0.6 * (0.5 * s).sin(), ROOT_HEIGHT + style.bob_amp * (2.0 * s).sin(), -radius];
    let yaw = 0.3 * (0.25 * s).sin();
    (Transform::new(root_rotation(style, yaw, s), pos), limb_pose(style, s))
}

/// Follower pose: the leader reflected through `x = 0`, then turned half a
/// revolution about the vertical axis so the two face each other.
/// Joint channels are swapped left/right.
fn mirror_follower(root: &Transform, joints: &[Mat3<f64>; NUM_JOINTS]) -> (Transform, [Mat3<f64>; NUM_JOINTS]) {
    let m = super::mirror_x(root);
    let turn = Transform::from_rotation(rot_y(PI));
    let r = turn.compose(&m);
    let mut out = [[[0.0; 3]; 3]; NUM_JOINTS];
    for j in 0..NUM_JOINTS {
        out[j] = mirror_rotation(&joints[crate::body::MIRROR_JOINT[j]]);
    }
    (r, out)
}

/// Mirrored joint rotations: `out[j] = M θ[mirror(j)] M` in 6D form.
pub fn mirror_joint_channels(theta_frame: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; NUM_JOINTS * 6];
    for j in 0..NUM_JOINTS {
        let s = crate::body::MIRROR_JOINT[j] * 6;
        let v = &theta_frame[s..s + 6];
        out[j * 6..j * 6 + 6].copy_from_slice(&[v[0], -v[1], -v[2], -v[3], v[4], v[5]]);
    }
    out
}
