//! Evaluation metrics: Fréchet distance, diversity, interaction correlation,
//! foot skating, interpenetration and best-of-N joint errors.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::body::{body_capsules, capsule_penetration, skeleton_from_shape, BodyShape, Capsule, FEET, NUM_JOINTS};
use crate::dataset::{DatasetError, MotionSequence};
use crate::geometry::Vec3;

pub const CONTACT_HEIGHT: f64 = 0.05;
pub const FEATURE_WINDOW: usize = 16;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("feature dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("sequence lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Row-major `samples × dim` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureSet {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self, MetricsError> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(MetricsError::ShapeMismatch(format!("{} values do not split into rows of {dim}", data.len())));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MetricsError> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().find(|r| r.len() != dim) {
            return Err(MetricsError::DimensionMismatch(dim, r.len()));
        }
        Self::new(dim, rows.concat())
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn mean_cov(&self) -> (DVector<f64>, DMatrix<f64>) {
        let (n, d) = (self.len(), self.dim);
        let x = DMatrix::from_row_slice(n, d, &self.data);
        let mean = x.row_mean().transpose();
        let mut centered = x;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        (mean, cov)
    }
}

fn psd_sqrt(m: DMatrix<f64>) -> DMatrix<f64> {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `‖μ_g − μ_r‖² + tr(Σ_g + Σ_r − 2(Σ_g Σ_r)^{1/2})`, with the trace of the
/// cross term taken as `tr((Σ_g^{1/2} Σ_r Σ_g^{1/2})^{1/2})`.
pub fn frechet_distance(gen: &FeatureSet, real: &FeatureSet) -> Result<f64, MetricsError> {
    if gen.dim != real.dim {
        return Err(MetricsError::DimensionMismatch(gen.dim, real.dim));
    }
    for s in [gen, real] {
        if s.len() < 2 {
            return Err(MetricsError::TooFewSamples { needed: 2, got: s.len() });
        }
    }
    let (mg, cg) = gen.mean_cov();
    let (mr, cr) = real.mean_cov();
    let mean_term = (&mg - &mr).norm_squared();
    let (a, b) = order_for_symmetry(cg, cr);
    let sa = psd_sqrt(a.clone());
    let inner = &sa * &b * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    Ok((mean_term + a.trace() + b.trace() - 2.0 * cross).max(0.0))
}

/// Orders the two covariances canonically so that swapping the arguments
/// evaluates the identical floating point expression.
fn order_for_symmetry(a: DMatrix<f64>, b: DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let key = |m: &DMatrix<f64>| m.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    if key(&a) <= key(&b) {
        (a, b)
    } else {
        (b, a)
    }
}

/// Mean across-sample variance (`n − 1`) over feature channels, averaged over
/// conditions. Each set holds the samples drawn for one condition.
pub fn diversity(conditions: &[FeatureSet]) -> Result<f64, MetricsError> {
    if conditions.is_empty() {
        return Err(MetricsError::TooFewSamples { needed: 1, got: 0 });
    }
    let mut total = 0.0;
    for set in conditions {
        let n = set.len();
        if n < 2 {
            return Err(MetricsError::TooFewSamples { needed: 2, got: n });
        }
        let mut acc = 0.0;
        for c in 0..set.dim {
            let mean = (0..n).map(|i| set.row(i)[c]).sum::<f64>() / n as f64;
            acc += (0..n).map(|i| (set.row(i)[c] - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        }
        total += acc / set.dim as f64;
    }
    Ok(total / conditions.len() as f64)
}

/// Joint positions of one agent, `frames × NUM_JOINTS`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTrack {
    pub frames: usize,
    pub pos: Vec<Vec3<f64>>,
}

impl JointTrack {
    pub fn from_sequence(seq: &MotionSequence, agent: usize) -> Result<Self, MetricsError> {
        let mut pos = Vec::with_capacity(seq.num_frames * NUM_JOINTS);
        for t in 0..seq.num_frames {
            pos.extend_from_slice(&seq.joint_positions(t, agent)?);
        }
        Ok(Self { frames: seq.num_frames, pos })
    }

    pub fn at(&self, t: usize, j: usize) -> &Vec3<f64> {
        &self.pos[t * NUM_JOINTS + j]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InteractionScore {
    pub value: f64,
    /// Joint/axis channels left out because one trajectory was constant.
    pub skipped: usize,
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx <= f64::EPSILON * n || syy <= f64::EPSILON * n {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Mean `|ρ_real − ρ_gen|` over joints and axes, where `ρ` is the temporal
/// correlation between the two agents' trajectories of that channel.
pub fn motion_interaction(
    gen: (&JointTrack, &JointTrack),
    real: (&JointTrack, &JointTrack),
) -> Result<InteractionScore, MetricsError> {
    let frames = real.0.frames;
    for t in [gen.0, gen.1, real.1] {
        if t.frames != frames {
            return Err(MetricsError::LengthMismatch(frames, t.frames));
        }
    }
    let channel = |tr: &JointTrack, j: usize, k: usize| (0..frames).map(|t| tr.at(t, j)[k]).collect::<Vec<_>>();
    let (mut sum, mut used, mut skipped) = (0.0, 0usize, 0usize);
    for j in 0..NUM_JOINTS {
        for k in 0..3 {
            let rg = pearson(&channel(gen.0, j, k), &channel(gen.1, j, k));
            let rr = pearson(&channel(real.0, j, k), &channel(real.1, j, k));
            match (rg, rr) {
                (Some(g), Some(r)) => {
                    sum += (r - g).abs();
                    used += 1;
                }
                _ => skipped += 1,
            }
        }
    }
    Ok(InteractionScore { value: if used == 0 { 0.0 } else { sum / used as f64 }, skipped })
}

/// Mean horizontal displacement per frame of feet in contact (height below
/// `contact_height` at the later frame); 0 without contact frames.
pub fn foot_skating(track: &JointTrack, contact_height: f64) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for &f in &FEET {
        for t in 1..track.frames {
            let (p, q) = (track.at(t - 1, f), track.at(t, f));
            if q[1] < contact_height {
                sum += ((q[0] - p[0]).powi(2) + (q[2] - p[2]).powi(2)).sqrt();
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Per-frame sum of penetration depths over all capsule pairs of two bodies,
/// averaged over frames.
pub fn interpenetration(a: &[Vec<Capsule>], b: &[Vec<Capsule>]) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(ca, cb)| ca.iter().map(|x| cb.iter().map(|y| capsule_penetration(x, y)).sum::<f64>()).sum::<f64>())
        .sum();
    Ok(total / a.len() as f64)
}

/// Capsules of one agent for every frame.
pub fn agent_capsules(seq: &MotionSequence, agent: usize) -> Result<Vec<Vec<Capsule>>, MetricsError> {
    let skel = skeleton_from_shape(&BodyShape(seq.beta[agent]));
    (0..seq.num_frames).map(|t| Ok(body_capsules(&skel, &seq.joint_positions(t, agent)?))).collect()
}

/// Interpenetration summed over all pairs of present agents.
pub fn sequence_interpenetration(seq: &MotionSequence) -> Result<f64, MetricsError> {
    let agents = seq.active_agents();
    let caps: Vec<_> = agents.iter().map(|&a| agent_capsules(seq, a)).collect::<Result<_, _>>()?;
    let mut total = 0.0;
    for i in 0..caps.len() {
        for j in i + 1..caps.len() {
            total += interpenetration(&caps[i], &caps[j])?;
        }
    }
    Ok(total)
}

fn check_tracks(samples: &[&JointTrack], gt: &JointTrack) -> Result<(), MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::TooFewSamples { needed: 1, got: 0 });
    }
    if let Some(s) = samples.iter().find(|s| s.pos.len() != gt.pos.len()) {
        return Err(MetricsError::ShapeMismatch(format!("sample has {} joints, truth {}", s.pos.len(), gt.pos.len())));
    }
    Ok(())
}

fn dist(a: &Vec3<f64>, b: &Vec3<f64>) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Minimum over samples of the mean joint position error.
pub fn mpjpe(samples: &[&JointTrack], gt: &JointTrack) -> Result<f64, MetricsError> {
    check_tracks(samples, gt)?;
    let err = |s: &JointTrack| s.pos.iter().zip(&gt.pos).map(|(a, b)| dist(a, b)).sum::<f64>() / gt.pos.len() as f64;
    Ok(samples.iter().map(|s| err(s)).fold(f64::INFINITY, f64::min))
}

/// Minimum over samples of the mean forward-difference velocity error.
pub fn mpjve(samples: &[&JointTrack], gt: &JointTrack) -> Result<f64, MetricsError> {
    check_tracks(samples, gt)?;
    if gt.frames < 2 {
        return Ok(0.0);
    }
    let vel = |tr: &JointTrack, t: usize, j: usize| {
        let (p, q) = (tr.at(t, j), tr.at(t + 1, j));
        [q[0] - p[0], q[1] - p[1], q[2] - p[2]]
    };
    let err = |s: &JointTrack| {
        let mut sum = 0.0;
        for t in 0..gt.frames - 1 {
            for j in 0..NUM_JOINTS {
                sum += dist(&vel(s, t, j), &vel(gt, t, j));
            }
        }
        sum / ((gt.frames - 1) * NUM_JOINTS) as f64
    };
    Ok(samples.iter().map(|s| err(s)).fold(f64::INFINITY, f64::min))
}

/// Features of one sequence: for each non-overlapping window, the joint
/// positions of every present agent expressed in the first present agent's
/// canonical frame at the window start, flattened.
pub fn window_features(seq: &MotionSequence, window: usize) -> Result<Vec<Vec<f64>>, MetricsError> {
    let agents = seq.active_agents();
    let Some(&anchor) = agents.first() else {
        return Ok(Vec::new());
    };
    let canon = seq.canonical_frames()?;
    let pn = seq.num_agents;
    let mut out = Vec::new();
    for start in (0..seq.num_frames.saturating_sub(window - 1)).step_by(window) {
        let inv = canon[start * pn + anchor].invert();
        let mut row = Vec::with_capacity(window * agents.len() * NUM_JOINTS * 3);
        for t in start..start + window {
            for &a in &agents {
                for p in seq.joint_positions(t, a)? {
                    row.extend_from_slice(&inv.apply(&p));
                }
            }
        }
        out.push(row);
    }
    Ok(out)
}

/// Generated samples for one condition alongside its ground truth.
#[derive(Debug, Clone)]
pub struct Condition {
    pub real: MotionSequence,
    pub samples: Vec<MotionSequence>,
    /// Agents scored by MPJPE/MPJVE.
    pub targets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub name: String,
    pub value: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub label: String,
    pub rows: Vec<MetricRow>,
    pub config_hash: String,
}

impl MetricReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.name == name).map(|r| r.value)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# {}", self.label);
        let _ = writeln!(out, "{:<8} {:>14} {:>9}  config", "metric", "value", "samples");
        for r in &self.rows {
            let _ = writeln!(out, "{:<8} {:>14.6} {:>9}  {}", r.name, r.value, r.samples, self.config_hash);
        }
        out.push('\n');
        let _ = writeln!(out, "label={}", self.label);
        let _ = writeln!(out, "config_hash={}", self.config_hash);
        for r in &self.rows {
            let _ = writeln!(out, "{}={:e}", r.name.to_ascii_lowercase(), r.value);
        }
        out
    }
}

/// Short SHA-256 digest of a resolved configuration text.
pub fn config_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// All seven metrics over a set of conditions.
pub fn evaluate(conditions: &[Condition], label: &str, config_hash: &str) -> Result<MetricReport, MetricsError> {
    let mut gen_rows = Vec::new();
    let mut real_rows = Vec::new();
    let mut div_sets = Vec::new();
    let (mut mi, mut mi_n) = (0.0, 0usize);
    let (mut fs, mut fs_n) = (0.0, 0usize);
    let (mut ip, mut ip_n) = (0.0, 0usize);
    let (mut pe, mut ve, mut pe_n) = (0.0, 0.0, 0usize);
    let mut n_samples = 0;
    for cond in conditions {
        real_rows.extend(window_features(&cond.real, FEATURE_WINDOW)?);
        let real_tracks: Vec<JointTrack> =
            (0..cond.real.num_agents).map(|a| JointTrack::from_sequence(&cond.real, a)).collect::<Result<_, _>>()?;
        let mut per_sample = Vec::new();
        let mut sample_tracks = Vec::new();
        for s in &cond.samples {
            if s.num_frames != cond.real.num_frames || s.num_agents != cond.real.num_agents {
                return Err(MetricsError::LengthMismatch(cond.real.num_frames, s.num_frames));
            }
            let feats = window_features(s, FEATURE_WINDOW)?;
            per_sample.push(feats.concat());
            gen_rows.extend(feats);
            let tracks: Vec<JointTrack> =
                (0..s.num_agents).map(|a| JointTrack::from_sequence(s, a)).collect::<Result<_, _>>()?;
            let active = s.active_agents();
            if active.len() >= 2 {
                let (a, b) = (active[0], active[1]);
                mi += motion_interaction((&tracks[a], &tracks[b]), (&real_tracks[a], &real_tracks[b]))?.value;
                mi_n += 1;
            }
            for &a in &active {
                fs += foot_skating(&tracks[a], CONTACT_HEIGHT);
                fs_n += 1;
            }
            ip += sequence_interpenetration(s)?;
            ip_n += 1;
            sample_tracks.push(tracks);
            n_samples += 1;
        }
        if per_sample.len() >= 2 && !per_sample[0].is_empty() {
            div_sets.push(FeatureSet::from_rows(&per_sample)?);
        }
        for &a in &cond.targets {
            let refs: Vec<&JointTrack> = sample_tracks.iter().map(|t| &t[a]).collect();
            pe += mpjpe(&refs, &real_tracks[a])?;
            ve += mpjve(&refs, &real_tracks[a])?;
            pe_n += 1;
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { f64::NAN } else { s / n as f64 };
    let fd = if gen_rows.len() >= 2 && real_rows.len() >= 2 {
        frechet_distance(&FeatureSet::from_rows(&gen_rows)?, &FeatureSet::from_rows(&real_rows)?)?
    } else {
        f64::NAN
    };
    let div = if div_sets.is_empty() { f64::NAN } else { diversity(&div_sets)? };
    let row = |name: &str, value: f64| MetricRow { name: name.into(), value, samples: n_samples };
    Ok(MetricReport {
        label: label.into(),
        rows: vec![
            row("FD", fd),
            row("DIV", div),
            row("MI", mean(mi, mi_n)),
            row("FS", mean(fs, fs_n)),
            row("IP", mean(ip, ip_n)),
            row("MPJPE", mean(pe, pe_n)),
            row("MPJVE", mean(ve, pe_n)),
        ],
        config_hash: config_hash.into(),
    })
}
