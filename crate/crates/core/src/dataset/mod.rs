//! Multi-agent motion sequences: synthetic generation, preprocessing into
//! canonical/relative transforms, augmentation, normalization and text I/O.

mod generator;
mod io;

use thiserror::Error;

pub use generator::{generate_interaction, mirror_joint_channels, GeneratorParams, InteractionMode, ROOT_HEIGHT};
pub use io::{load, parse, save, to_text, MOTION_SCHEMA};

use crate::body::{forward_kinematics_mats, skeleton_from_shape, BodyShape, MIRROR_JOINT, NUM_JOINTS, SHAPE_DIM};
use crate::geometry::{
    canonicalize, heading_of, mirror_x, relative_transform, rot6d_to_matrix, GeometryError, RigidTransform,
    Rotation6D, Vec3,
};

pub type Transform = RigidTransform<f64>;

pub const TARGET_FPS: u32 = 30;
pub const MAX_AGENTS: usize = 4;
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("unsupported fps {0}: must be a positive multiple of 30")]
    UnsupportedFps(u32),
    #[error("sequence has no derived transforms; run preprocess first")]
    MissingDerived,
    #[error("keep set is empty")]
    EmptyKeepSet,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line} ({field}): {msg}")]
    Parse { line: usize, field: String, msg: String },
    #[error("unsupported schema_version {found} (expected {expected})")]
    SchemaVersionMismatch { found: u32, expected: u32 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Per-frame transforms computed by [`preprocess`].
#[derive(Debug, Clone, PartialEq)]
pub struct Derived {
    /// `T×P`, root pose in the canonical frame.
    pub can_to_root: Vec<Transform>,
    /// `T×P`, canonical frame at `t` expressed in the frame at `t−1`; identity at `t = 0`.
    pub delta_can: Vec<Transform>,
    /// `T×P×(P−1)`, partner canonical frame in the self canonical frame,
    /// partners in ascending index order. Zeroed when either side is absent.
    pub self_to_partner: Vec<Transform>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub fps: u32,
    pub num_agents: usize,
    pub num_frames: usize,
    pub presence: Vec<bool>,
    /// `P×10`
    pub beta: Vec<[f64; SHAPE_DIM]>,
    /// `T×P×J×6`, flattened.
    pub theta: Vec<f64>,
    /// `T×P`
    pub root_world: Vec<Transform>,
    pub derived: Option<Derived>,
}

/// Partner slot of agent `q` as seen from agent `p` (ascending, self skipped).
pub fn partner_slot(p: usize, q: usize) -> usize {
    debug_assert_ne!(p, q);
    if q < p {
        q
    } else {
        q - 1
    }
}

/// Agent index held in slot `s` of agent `p`.
pub fn slot_partner(p: usize, s: usize) -> usize {
    if s < p {
        s
    } else {
        s + 1
    }
}

impl MotionSequence {
    pub fn theta_index(&self, t: usize, p: usize, j: usize) -> usize {
        ((t * self.num_agents + p) * NUM_JOINTS + j) * 6
    }

    pub fn theta_6d(&self, t: usize, p: usize, j: usize) -> Rotation6D<f64> {
        let i = self.theta_index(t, p, j);
        Rotation6D::from_slice(&self.theta[i..i + 6])
    }

    /// The `J·6` joint rotations of one agent at one frame.
    pub fn theta_frame(&self, t: usize, p: usize) -> &[f64] {
        let i = self.theta_index(t, p, 0);
        &self.theta[i..i + NUM_JOINTS * 6]
    }

    pub fn root(&self, t: usize, p: usize) -> &Transform {
        &self.root_world[t * self.num_agents + p]
    }

    pub fn derived(&self) -> Result<&Derived, DatasetError> {
        self.derived.as_ref().ok_or(DatasetError::MissingDerived)
    }

    pub fn can_to_root(&self, t: usize, p: usize) -> Result<&Transform, DatasetError> {
        Ok(&self.derived()?.can_to_root[t * self.num_agents + p])
    }

    pub fn delta_can(&self, t: usize, p: usize) -> Result<&Transform, DatasetError> {
        Ok(&self.derived()?.delta_can[t * self.num_agents + p])
    }

    pub fn partner_slots(&self) -> usize {
        self.num_agents.saturating_sub(1)
    }

    pub fn self_to_partner(&self, t: usize, p: usize, q: usize) -> Result<&Transform, DatasetError> {
        let s = self.partner_slots();
        Ok(&self.derived()?.self_to_partner[(t * self.num_agents + p) * s + partner_slot(p, q)])
    }

    /// Canonical frames `T×P` of every agent in world coordinates.
    pub fn canonical_frames(&self) -> Result<Vec<Transform>, DatasetError> {
        canonical_frames(self)
    }

    /// World joint positions of agent `p` at frame `t`.
    pub fn joint_positions(&self, t: usize, p: usize) -> Result<[Vec3<f64>; NUM_JOINTS], DatasetError> {
        let skel = skeleton_from_shape(&BodyShape(self.beta[p]));
        let mut rots = [[[0.0; 3]; 3]; NUM_JOINTS];
        for (j, r) in rots.iter_mut().enumerate() {
            *r = rot6d_to_matrix(&self.theta_6d(t, p, j))?;
        }
        let pos = forward_kinematics_mats(&skel, &rots, self.root(t, p));
        let mut out = [[0.0; 3]; NUM_JOINTS];
        out.copy_from_slice(&pos);
        Ok(out)
    }

    pub fn active_agents(&self) -> Vec<usize> {
        (0..self.num_agents).filter(|&p| self.presence[p]).collect()
    }
}

fn canonical_frames(seq: &MotionSequence) -> Result<Vec<Transform>, DatasetError> {
    let (tn, pn) = (seq.num_frames, seq.num_agents);
    let mut out = Vec::with_capacity(tn * pn);
    let mut last_heading = vec![0.0; pn];
    for t in 0..tn {
        for p in 0..pn {
            let root = seq.root(t, p);
            let dec = canonicalize(root, Some(last_heading[p]))?;
            if let Some(h) = heading_of(&root.r) {
                last_heading[p] = h;
            }
            out.push(dec.canonical);
        }
    }
    Ok(out)
}

/// Decimates to 30 fps and fills the derived transform blocks.
pub fn preprocess(seq: &MotionSequence) -> Result<MotionSequence, DatasetError> {
    if seq.fps == 0 || !seq.fps.is_multiple_of(TARGET_FPS) {
        return Err(DatasetError::UnsupportedFps(seq.fps));
    }
    let step = (seq.fps / TARGET_FPS) as usize;
    let mut out = if step == 1 { seq.clone() } else { decimate(seq, step) };
    out.derived = None;
    let (tn, pn) = (out.num_frames, out.num_agents);
    let canon = canonical_frames(&out)?;
    let slots = pn.saturating_sub(1);
    let mut can_to_root = Vec::with_capacity(tn * pn);
    let mut delta_can = Vec::with_capacity(tn * pn);
    let mut self_to_partner = Vec::with_capacity(tn * pn * slots);
    for t in 0..tn {
        for p in 0..pn {
            let c = &canon[t * pn + p];
            let mut ctr = c.invert().compose(out.root(t, p));
            // canonical origin is the floor projection of the root
            ctr.t[0] = 0.0;
            ctr.t[2] = 0.0;
            can_to_root.push(ctr);
            delta_can.push(if t == 0 { Transform::identity() } else { relative_transform(&canon[(t - 1) * pn + p], c) });
            for s in 0..slots {
                let q = slot_partner(p, s);
                if out.presence[p] && out.presence[q] {
                    self_to_partner.push(relative_transform(c, &canon[t * pn + q]));
                } else {
                    self_to_partner.push(Transform::zeroed());
                }
            }
        }
    }
    out.fps = TARGET_FPS;
    out.derived = Some(Derived { can_to_root, delta_can, self_to_partner });
    Ok(out)
}

fn decimate(seq: &MotionSequence, step: usize) -> MotionSequence {
    let frames: Vec<usize> = (0..seq.num_frames).step_by(step).collect();
    let pn = seq.num_agents;
    let stride = pn * NUM_JOINTS * 6;
    let mut theta = Vec::with_capacity(frames.len() * stride);
    let mut root_world = Vec::with_capacity(frames.len() * pn);
    for &t in &frames {
        theta.extend_from_slice(&seq.theta[t * stride..(t + 1) * stride]);
        root_world.extend_from_slice(&seq.root_world[t * pn..(t + 1) * pn]);
    }
    MotionSequence {
        fps: seq.fps,
        num_agents: pn,
        num_frames: frames.len(),
        presence: seq.presence.clone(),
        beta: seq.beta.clone(),
        theta,
        root_world,
        derived: None,
    }
}

/// Reflection across the `x = 0` plane with left/right joint channels swapped.
/// Derived blocks are recomputed when present.
pub fn mirror_augment(seq: &MotionSequence) -> Result<MotionSequence, DatasetError> {
    let mut out = seq.clone();
    for t in 0..seq.num_frames {
        for p in 0..seq.num_agents {
            for j in 0..NUM_JOINTS {
                let src = seq.theta_index(t, p, MIRROR_JOINT[j]);
                let dst = seq.theta_index(t, p, j);
                let v = &seq.theta[src..src + 6];
                // columns of M R M with M = diag(−1, 1, 1): c0 → −M c0, c1 → M c1
                out.theta[dst..dst + 6].copy_from_slice(&[v[0], -v[1], -v[2], -v[3], v[4], v[5]]);
            }
        }
    }
    for (o, r) in out.root_world.iter_mut().zip(&seq.root_world) {
        *o = mirror_x(r);
    }
    if seq.derived.is_some() {
        out.derived = None;
        out = preprocess(&out)?;
    }
    Ok(out)
}

/// Clears presence for agents outside `keep` and zero-fills slots that refer to them.
pub fn mask_agents(seq: &MotionSequence, keep: &[usize]) -> Result<MotionSequence, DatasetError> {
    if keep.is_empty() {
        return Err(DatasetError::EmptyKeepSet);
    }
    let mut out = seq.clone();
    for p in 0..seq.num_agents {
        out.presence[p] = seq.presence[p] && keep.contains(&p);
    }
    if let Some(d) = out.derived.as_mut() {
        let pn = seq.num_agents;
        let slots = pn.saturating_sub(1);
        for t in 0..seq.num_frames {
            for p in 0..pn {
                for s in 0..slots {
                    let q = slot_partner(p, s);
                    if !out.presence[p] || !out.presence[q] {
                        d.self_to_partner[(t * pn + p) * slots + s] = Transform::zeroed();
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Reorders agents: new agent `i` is old agent `perm[i]`. Partner slots are
/// rebuilt so each still refers to the same physical partner.
pub fn permute_agents(seq: &MotionSequence, perm: &[usize]) -> MotionSequence {
    let pn = seq.num_agents;
    assert_eq!(perm.len(), pn, "permutation length");
    let per = NUM_JOINTS * 6;
    let mut out = seq.clone();
    for (i, &src) in perm.iter().enumerate() {
        out.presence[i] = seq.presence[src];
        out.beta[i] = seq.beta[src];
        for t in 0..seq.num_frames {
            let a = seq.theta_index(t, src, 0);
            let b = seq.theta_index(t, i, 0);
            out.theta[b..b + per].copy_from_slice(&seq.theta[a..a + per]);
            out.root_world[t * pn + i] = seq.root_world[t * pn + src];
        }
    }
    if let (Some(d), Some(od)) = (seq.derived.as_ref(), out.derived.as_mut()) {
        let slots = pn.saturating_sub(1);
        for t in 0..seq.num_frames {
            for (i, &src) in perm.iter().enumerate() {
                od.can_to_root[t * pn + i] = d.can_to_root[t * pn + src];
                od.delta_can[t * pn + i] = d.delta_can[t * pn + src];
                for s in 0..slots {
                    let qi = slot_partner(i, s);
                    let qsrc = perm[qi];
                    od.self_to_partner[(t * pn + i) * slots + s] =
                        d.self_to_partner[(t * pn + src) * slots + partner_slot(src, qsrc)];
                }
            }
        }
    }
    out
}

/// Frames `start..start+len` of a sequence (derived blocks included).
pub fn crop(seq: &MotionSequence, start: usize, len: usize) -> MotionSequence {
    let pn = seq.num_agents;
    let per = pn * NUM_JOINTS * 6;
    let slots = pn.saturating_sub(1);
    let end = start + len;
    assert!(end <= seq.num_frames, "crop out of range");
    MotionSequence {
        fps: seq.fps,
        num_agents: pn,
        num_frames: len,
        presence: seq.presence.clone(),
        beta: seq.beta.clone(),
        theta: seq.theta[start * per..end * per].to_vec(),
        root_world: seq.root_world[start * pn..end * pn].to_vec(),
        derived: seq.derived.as_ref().map(|d| {
            let mut delta_can = d.delta_can[start * pn..end * pn].to_vec();
            for v in delta_can.iter_mut().take(pn) {
                *v = Transform::identity();
            }
            Derived {
                can_to_root: d.can_to_root[start * pn..end * pn].to_vec(),
                delta_can,
                self_to_partner: d.self_to_partner[start * pn * slots..end * pn * slots].to_vec(),
            }
        }),
    }
}

/// Z-score statistics per feature channel.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(width: usize) -> Self {
        Self { mean: vec![0.0; width], std: vec![1.0; width] }
    }

    /// Statistics over rows of width `mean.len()`; std floored at 1e-6.
    pub fn from_rows<'a>(width: usize, rows: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; width];
        let mut sq = vec![0.0; width];
        let rows: Vec<&[f64]> = rows.into_iter().collect();
        for r in &rows {
            n += 1;
            for (s, v) in sum.iter_mut().zip(r.iter()) {
                *s += v;
            }
        }
        let nf = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        for r in &rows {
            for c in 0..width {
                let d = r[c] - mean[c];
                sq[c] += d * d;
            }
        }
        let std = sq.iter().map(|s| (s / nf).sqrt().max(STD_FLOOR)).collect();
        Self { mean, std }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(self.mean.iter().cycle()).zip(self.std.iter().cycle()).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn denormalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(self.mean.iter().cycle()).zip(self.std.iter().cycle()).map(|((v, m), s)| v * s + m).collect()
    }
}
