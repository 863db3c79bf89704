//! Nine-joint parametric skeleton, forward kinematics and capsule proxies.

use crate::geometry::{
    add3, dot, mat_identity, mat_mul, mat_vec, norm, rot6d_to_matrix, scale3, sub3, GeometryError, Mat3,
    RigidTransform, Rotation6D, Vec3,
};
use crate::scalar::Real;

pub const NUM_JOINTS: usize = 9;
pub const SHAPE_DIM: usize = 10;

pub const PELVIS: usize = 0;
pub const SPINE: usize = 1;
pub const HEAD: usize = 2;
pub const L_SHOULDER: usize = 3;
pub const R_SHOULDER: usize = 4;
pub const L_HAND: usize = 5;
pub const R_HAND: usize = 6;
pub const L_FOOT: usize = 7;
pub const R_FOOT: usize = 8;

pub const JOINT_NAMES: [&str; NUM_JOINTS] =
    ["pelvis", "spine", "head", "l_shoulder", "r_shoulder", "l_hand", "r_hand", "l_foot", "r_foot"];

pub const PARENTS: [i32; NUM_JOINTS] = [-1, 0, 1, 1, 1, 3, 4, 0, 0];

pub const FEET: [usize; 2] = [L_FOOT, R_FOOT];

/// Joint index under a left/right reflection.
pub const MIRROR_JOINT: [usize; NUM_JOINTS] = [0, 1, 2, 4, 3, 6, 5, 8, 7];

/// Rest offsets from the parent joint in the parent frame (meters).
/// `+x` is the body's left, `+y` up, `+z` forward.
pub const BASE_OFFSETS: [[f64; 3]; NUM_JOINTS] = [
    [0.0, 0.0, 0.0],
    [0.0, 0.25, 0.0],
    [0.0, 0.30, 0.05],
    [0.18, 0.22, 0.0],
    [-0.18, 0.22, 0.0],
    [0.05, -0.55, 0.05],
    [-0.05, -0.55, 0.05],
    [0.10, -0.88, 0.05],
    [-0.10, -0.88, 0.05],
];

/// Capsule radius of the bone ending at each joint (root entry unused).
pub const BONE_RADII: [f64; NUM_JOINTS] = [0.0, 0.12, 0.10, 0.06, 0.06, 0.05, 0.05, 0.07, 0.07];

/// Shape mixing matrix: bone `j` is scaled by `1 + Σ_k W[j][k] β_k`.
/// Left/right rows are equal so the body stays mirror-symmetric.
pub const SHAPE_MIXING: [[f64; SHAPE_DIM]; NUM_JOINTS] = [
    [0.0; SHAPE_DIM],
    [0.05, 0.02, 0.0, -0.01, 0.0, 0.0, 0.01, 0.0, 0.0, 0.0],
    [0.03, 0.0, 0.02, 0.0, 0.0, 0.0, 0.0, 0.01, 0.0, 0.0],
    [0.04, -0.02, 0.0, 0.03, 0.0, 0.0, 0.0, 0.0, 0.01, 0.0],
    [0.04, -0.02, 0.0, 0.03, 0.0, 0.0, 0.0, 0.0, 0.01, 0.0],
    [0.05, 0.01, -0.02, 0.0, 0.02, 0.0, 0.0, 0.0, 0.0, 0.01],
    [0.05, 0.01, -0.02, 0.0, 0.02, 0.0, 0.0, 0.0, 0.0, 0.01],
    [0.05, 0.03, 0.0, 0.0, 0.0, -0.02, 0.0, 0.0, 0.0, 0.0],
    [0.05, 0.03, 0.0, 0.0, 0.0, -0.02, 0.0, 0.0, 0.0, 0.0],
];

const MIN_SCALE: f64 = 0.5;
const MAX_SCALE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BodyShape(pub [f64; SHAPE_DIM]);

#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    pub parent: [i32; NUM_JOINTS],
    pub rest_offsets: [Vec3<f64>; NUM_JOINTS],
    pub bone_radii: [f64; NUM_JOINTS],
}

impl Default for Skeleton {
    fn default() -> Self {
        skeleton_from_shape(&BodyShape::default())
    }
}

/// Per-bone scale factors `1 + Wβ`, clamped to `[0.5, 2]`.
pub fn bone_scales(beta: &BodyShape) -> [f64; NUM_JOINTS] {
    let mut s = [1.0; NUM_JOINTS];
    for (j, row) in SHAPE_MIXING.iter().enumerate() {
        let mix: f64 = row.iter().zip(beta.0.iter()).map(|(w, b)| w * b).sum();
        s[j] = (1.0 + mix).clamp(MIN_SCALE, MAX_SCALE);
    }
    s
}

pub fn skeleton_from_shape(beta: &BodyShape) -> Skeleton {
    let scales = bone_scales(beta);
    let mut rest_offsets = [[0.0; 3]; NUM_JOINTS];
    for j in 0..NUM_JOINTS {
        rest_offsets[j] = scale3(&BASE_OFFSETS[j], scales[j]);
    }
    Skeleton { parent: PARENTS, rest_offsets, bone_radii: BONE_RADII }
}

/// World joint positions from local joint rotations and the root pose.
pub fn forward_kinematics<T: Real>(
    skel: &Skeleton,
    theta: &[Rotation6D<T>],
    root: &RigidTransform<T>,
) -> Result<Vec<Vec3<T>>, GeometryError> {
    let mats = theta.iter().map(rot6d_to_matrix).collect::<Result<Vec<_>, _>>()?;
    Ok(forward_kinematics_mats(skel, &mats, root))
}

pub fn forward_kinematics_mats<T: Real>(skel: &Skeleton, rots: &[Mat3<T>], root: &RigidTransform<T>) -> Vec<Vec3<T>> {
    let n = skel.parent.len();
    let mut pos = vec![[T::zero(); 3]; n];
    let mut acc: Vec<Mat3<T>> = vec![mat_identity(); n];
    for j in 0..n {
        let local = rots.get(j).copied().unwrap_or_else(mat_identity);
        match skel.parent[j] {
            p if p < 0 => {
                pos[j] = root.t;
                acc[j] = mat_mul(&root.r, &local);
            }
            p => {
                let p = p as usize;
                let off = skel.rest_offsets[j].map(T::lit);
                pos[j] = add3(&pos[p], &mat_vec(&acc[p], &off));
                acc[j] = mat_mul(&acc[p], &local);
            }
        }
    }
    pos
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Capsule {
    pub endpoint_a: Vec3<f64>,
    pub endpoint_b: Vec3<f64>,
    pub radius: f64,
}

/// One capsule per bone (parent → child) for a posed body.
pub fn body_capsules(skel: &Skeleton, joints: &[Vec3<f64>]) -> Vec<Capsule> {
    (0..skel.parent.len())
        .filter(|&j| skel.parent[j] >= 0)
        .map(|j| Capsule {
            endpoint_a: joints[skel.parent[j] as usize],
            endpoint_b: joints[j],
            radius: skel.bone_radii[j],
        })
        .collect()
}

/// Closest points between segments `p1q1` and `p2q2`; returns the distance.
pub fn segment_distance(p1: &Vec3<f64>, q1: &Vec3<f64>, p2: &Vec3<f64>, q2: &Vec3<f64>) -> f64 {
    const EPS: f64 = 1e-12;
    let d1 = sub3(q1, p1);
    let d2 = sub3(q2, p2);
    let r = sub3(p1, p2);
    let a = dot(&d1, &d1);
    let e = dot(&d2, &d2);
    let f = dot(&d2, &r);
    let (s, t);
    if a <= EPS && e <= EPS {
        return norm(&r);
    }
    if a <= EPS {
        s = 0.0;
        t = (f / e).clamp(0.0, 1.0);
    } else {
        let c = dot(&d1, &r);
        if e <= EPS {
            t = 0.0;
            s = (-c / a).clamp(0.0, 1.0);
        } else {
            let b = dot(&d1, &d2);
            let denom = a * e - b * b;
            let s0 = if denom > EPS { ((b * f - c * e) / denom).clamp(0.0, 1.0) } else { 0.0 };
            // second pass: project s0 onto the other segment, then re-clamp s
            let t0 = (b * s0 + f) / e;
            if t0 < 0.0 {
                t = 0.0;
                s = (-c / a).clamp(0.0, 1.0);
            } else if t0 > 1.0 {
                t = 1.0;
                s = ((b - c) / a).clamp(0.0, 1.0);
            } else {
                t = t0;
                s = s0;
            }
        }
    }
    let c1 = add3(p1, &scale3(&d1, s));
    let c2 = add3(p2, &scale3(&d2, t));
    norm(&sub3(&c1, &c2))
}

/// Penetration depth `max(0, r_a + r_b − segdist)`; exactly symmetric in its arguments.
pub fn capsule_penetration(a: &Capsule, b: &Capsule) -> f64 {
    let key = |c: &Capsule| [c.endpoint_a, c.endpoint_b, [c.radius; 3]];
    let (a, b) = if key(a).partial_cmp(&key(b)) == Some(std::cmp::Ordering::Greater) { (b, a) } else { (a, b) };
    let d = segment_distance(&a.endpoint_a, &a.endpoint_b, &b.endpoint_a, &b.endpoint_b);
    (a.radius + b.radius - d).max(0.0)
}

#[cfg(test)]
mod tests {
    use std::f64::consts::FRAC_PI_2;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::geometry::{axis_angle, matrix_to_rot6d, rot_y};

    fn identity_pose() -> Vec<Rotation6D<f64>> {
        vec![Rotation6D::identity(); NUM_JOINTS]
    }

    #[test]
    fn shape_mapping() {
        assert_eq!(skeleton_from_shape(&BodyShape::default()).rest_offsets, BASE_OFFSETS);
        let mut e1 = BodyShape::default();
        e1.0[0] = 1.0;
        let sk = skeleton_from_shape(&e1);
        for j in 0..NUM_JOINTS {
            for k in 0..3 {
                let expect = BASE_OFFSETS[j][k] * (1.0 + SHAPE_MIXING[j][0]);
                assert!((sk.rest_offsets[j][k] - expect).abs() < 1e-15);
            }
        }
        let mut neg = BodyShape::default();
        neg.0[0] = -1.0;
        let (sp, sn) = (bone_scales(&e1), bone_scales(&neg));
        for j in 0..NUM_JOINTS {
            assert!(((sp[j] - 1.0) + (sn[j] - 1.0)).abs() < 1e-15);
        }
        assert!(SHAPE_MIXING.iter().flatten().all(|w| w.abs() <= 0.05));
        let mut extreme = BodyShape::default();
        extreme.0 = [1e6; SHAPE_DIM];
        assert!(bone_scales(&extreme).iter().all(|s| *s <= MAX_SCALE));
    }

    #[test]
    fn fk_rest_pose_and_translation() {
        let sk = Skeleton::default();
        let pos = forward_kinematics(&sk, &identity_pose(), &RigidTransform::identity()).unwrap();
        // head = spine offset + head offset
        let head = add3(&BASE_OFFSETS[SPINE], &BASE_OFFSETS[HEAD]);
        assert!(norm(&sub3(&pos[HEAD], &head)) < 1e-15);
        for j in 1..NUM_JOINTS {
            let p = PARENTS[j] as usize;
            let bone = norm(&sub3(&pos[j], &pos[p]));
            assert!((bone - norm(&sk.rest_offsets[j])).abs() < 1e-12);
        }
        let moved = forward_kinematics(&sk, &identity_pose(), &RigidTransform::from_translation([1.0, 0.0, 0.0]))
            .unwrap();
        for j in 0..NUM_JOINTS {
            assert!(norm(&sub3(&moved[j], &add3(&pos[j], &[1.0, 0.0, 0.0]))) < 1e-15);
        }
    }

    #[test]
    fn fk_spine_yaw_rotates_head() {
        let sk = Skeleton::default();
        let mut pose = identity_pose();
        pose[SPINE] = matrix_to_rot6d(&rot_y(FRAC_PI_2)).unwrap();
        let pos = forward_kinematics(&sk, &pose, &RigidTransform::identity()).unwrap();
        // hand-computed chain: head = spine + R_y(90°)·(0, 0.30, 0.05) = spine + (0.05, 0.30, 0)
        let expect = [0.05, 0.25 + 0.30, 0.0];
        assert!(norm(&sub3(&pos[HEAD], &expect)) < 1e-12);
    }

    #[test]
    fn fk_equivariance() {
        let sk = skeleton_from_shape(&BodyShape([0.5, -0.3, 0.2, 0.0, 0.1, 0.0, 0.0, 0.3, 0.0, -0.2]));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pose: Vec<_> = (0..NUM_JOINTS)
            .map(|_| {
                let ax = [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5];
                matrix_to_rot6d(&axis_angle(&ax, rng.random::<f64>() * 2.0)).unwrap()
            })
            .collect();
        let root = RigidTransform::new(axis_angle(&[0.2, 1.0, -0.1], 1.1), [0.3, 0.9, -2.0]);
        let a = forward_kinematics(&sk, &pose, &root).unwrap();
        let b = forward_kinematics(&sk, &pose, &RigidTransform::identity()).unwrap();
        for j in 0..NUM_JOINTS {
            assert!(norm(&sub3(&a[j], &root.apply(&b[j]))) < 1e-9);
        }
    }

    fn cap(a: [f64; 3], b: [f64; 3], r: f64) -> Capsule {
        Capsule { endpoint_a: a, endpoint_b: b, radius: r }
    }

    #[test]
    fn capsule_examples() {
        let a = cap([0.0, 0.0, 0.0], [0.0, 1.0, 0.0], 0.05);
        let far = cap([1.0, 0.0, 0.0], [1.0, 1.0, 0.0], 0.05);
        assert_eq!(capsule_penetration(&a, &far), 0.0);
        let near = cap([0.06, 0.0, 0.0], [0.06, 1.0, 0.0], 0.05);
        assert!((capsule_penetration(&a, &near) - 0.04).abs() < 1e-12);
        assert!((capsule_penetration(&a, &a) - 0.1).abs() < 1e-15);
    }

    /// Swept-sphere sampling: endpoints plus uniform random centres on both axes.
    fn sphere_oracle(a: &Capsule, b: &Capsule, rng: &mut ChaCha8Rng) -> f64 {
        let n = 1500;
        let sample = |c: &Capsule, rng: &mut ChaCha8Rng| -> Vec<Vec3<f64>> {
            let mut pts = vec![c.endpoint_a, c.endpoint_b];
            let d = sub3(&c.endpoint_b, &c.endpoint_a);
            for _ in 0..n {
                pts.push(add3(&c.endpoint_a, &scale3(&d, rng.random::<f64>())));
            }
            pts
        };
        let pa = sample(a, rng);
        let pb = sample(b, rng);
        let mut best = 0.0f64;
        for x in &pa {
            for y in &pb {
                best = best.max(a.radius + b.radius - norm(&sub3(x, y)));
            }
        }
        best
    }

    #[test]
    fn capsule_matches_sphere_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rp = |rng: &mut ChaCha8Rng| [rng.random::<f64>() * 0.5, rng.random::<f64>() * 0.5, rng.random::<f64>() * 0.5];
        for _ in 0..100 {
            let a = cap(rp(&mut rng), rp(&mut rng), 0.02 + rng.random::<f64>() * 0.1);
            let b = cap(rp(&mut rng), rp(&mut rng), 0.02 + rng.random::<f64>() * 0.1);
            let exact = capsule_penetration(&a, &b);
            assert_eq!(exact, capsule_penetration(&b, &a));
            let mc = sphere_oracle(&a, &b, &mut rng);
            assert!((exact - mc).abs() < 1e-3, "exact {exact} oracle {mc}");
        }
    }
}
