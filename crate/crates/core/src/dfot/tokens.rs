//! Motion tokens: per (time step, agent) concatenation of the latent, the
//! per-frame partner transforms and the per-frame canonical deltas.

use crate::dataset::{partner_slot, slot_partner, MotionSequence, NormStats};
use crate::scalar::Real;
use crate::vqvae::{Vqvae, VqvaeInput, X_WIDTH};

use super::DfotError;

/// Widths of one token: `[z; slot_0 … slot_{S−1}; delta; bits]` where each
/// slot and the delta hold `ω` frames of 9D transforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLayout {
    pub d_z: usize,
    pub p_max: usize,
    pub omega: usize,
    /// When false the partner slots and presence bits are left out.
    pub use_partner: bool,
}

impl TokenLayout {
    pub fn slots(&self) -> usize {
        if self.use_partner {
            self.p_max - 1
        } else {
            0
        }
    }

    pub fn block(&self) -> usize {
        self.omega * 9
    }

    pub fn width(&self) -> usize {
        self.d_z + self.slots() * self.block() + self.block() + self.slots()
    }

    pub fn slot_start(&self, s: usize) -> usize {
        self.d_z + s * self.block()
    }

    pub fn delta_start(&self) -> usize {
        self.d_z + self.slots() * self.block()
    }

    pub fn bits_start(&self) -> usize {
        self.delta_start() + self.block()
    }
}

/// Tokens of one example. Token `(i, a)` sits at row `i·agents + a`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSeq {
    pub layout: TokenLayout,
    pub steps: usize,
    pub agents: usize,
    pub present: Vec<bool>,
    pub data: Vec<f64>,
}

impl TokenSeq {
    pub fn zeros(layout: TokenLayout, steps: usize, agents: usize) -> Self {
        Self { layout, steps, agents, present: vec![true; agents], data: vec![0.0; steps * agents * layout.width()] }
    }

    pub fn row(&self, i: usize, a: usize) -> usize {
        i * self.agents + a
    }

    pub fn token(&self, i: usize, a: usize) -> &[f64] {
        let w = self.layout.width();
        let r = self.row(i, a);
        &self.data[r * w..(r + 1) * w]
    }

    pub fn token_mut(&mut self, i: usize, a: usize) -> &mut [f64] {
        let w = self.layout.width();
        let r = self.row(i, a);
        &mut self.data[r * w..(r + 1) * w]
    }

    /// Number of tokens belonging to present agents.
    pub fn active_len(&self) -> usize {
        self.present.iter().filter(|p| **p).count() * self.steps
    }

    /// Whether slot `s` of agent `a` refers to a present partner.
    pub fn slot_present(&self, a: usize, s: usize) -> bool {
        let q = slot_partner(a, s);
        self.layout.use_partner && q < self.agents && self.present[a] && self.present[q]
    }

    /// Channels that carry signal for token `(·, a)`: the latent, the delta
    /// and every present partner slot. Absent slots and presence bits are
    /// fixed and never noised.
    pub fn noise_mask(&self, a: usize) -> Vec<bool> {
        let l = self.layout;
        let mut m = vec![false; l.width()];
        m[..l.d_z].fill(true);
        m[l.delta_start()..l.bits_start()].fill(true);
        for s in 0..l.slots() {
            if self.slot_present(a, s) {
                m[l.slot_start(s)..l.slot_start(s) + l.block()].fill(true);
            }
        }
        m
    }

    /// Token steps `start..start+len`.
    pub fn window(&self, start: usize, len: usize) -> Self {
        let w = self.layout.width() * self.agents;
        Self {
            layout: self.layout,
            steps: len,
            agents: self.agents,
            present: self.present.clone(),
            data: self.data[start * w..(start + len) * w].to_vec(),
        }
    }

    /// Appends the token steps of `other` (same agents and layout).
    pub fn extend(&mut self, other: &TokenSeq) {
        assert_eq!((self.agents, self.layout), (other.agents, other.layout), "token layouts differ");
        self.data.extend_from_slice(&other.data);
        self.steps += other.steps;
    }

    /// New agent `i` is old agent `perm[i]`; partner slots keep pointing at
    /// the same physical partner.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.agents, "permutation length");
        let l = self.layout;
        let mut out = self.clone();
        for (i, &src) in perm.iter().enumerate() {
            out.present[i] = self.present[src];
        }
        for t in 0..self.steps {
            for (i, &src) in perm.iter().enumerate() {
                let from = self.token(t, src).to_vec();
                let to = out.token_mut(t, i);
                to[..l.d_z].copy_from_slice(&from[..l.d_z]);
                to[l.delta_start()..l.bits_start()].copy_from_slice(&from[l.delta_start()..l.bits_start()]);
                for s in 0..l.slots() {
                    let qi = slot_partner(i, s);
                    let (dst, bit) = (l.slot_start(s), l.bits_start() + s);
                    if qi < self.agents {
                        let ss = partner_slot(src, perm[qi]);
                        let so = l.slot_start(ss);
                        to[dst..dst + l.block()].copy_from_slice(&from[so..so + l.block()]);
                        to[bit] = from[l.bits_start() + ss];
                    }
                }
            }
        }
        out
    }

    /// Clears presence outside `keep` and zero-fills slots that refer to
    /// absent agents.
    pub fn masked(&self, keep: &[usize]) -> Result<Self, DfotError> {
        if keep.is_empty() {
            return Err(DfotError::ShapeMismatch("empty keep set".into()));
        }
        let mut out = self.clone();
        for a in 0..self.agents {
            out.present[a] = self.present[a] && keep.contains(&a);
        }
        out.clear_absent_slots();
        Ok(out)
    }

    fn clear_absent_slots(&mut self) {
        let l = self.layout;
        for t in 0..self.steps {
            for a in 0..self.agents {
                let flags: Vec<bool> = (0..l.slots()).map(|s| self.slot_present(a, s)).collect();
                let tok = self.token_mut(t, a);
                for (s, on) in flags.into_iter().enumerate() {
                    if !on {
                        tok[l.slot_start(s)..l.slot_start(s) + l.block()].fill(0.0);
                    }
                    tok[l.bits_start() + s] = if on { 1.0 } else { 0.0 };
                }
            }
        }
    }
}

/// Per-agent latent rows `[T′ × d_z]` for a sequence cropped to a multiple of ω.
/// With a VQ-VAE these are the selected codebook rows; without one they are
/// the raw per-frame features of each token's ω frames.
pub fn agent_latents<T: Real>(
    seq: &MotionSequence,
    vqvae: Option<&Vqvae<T>>,
    omega: usize,
) -> Result<Vec<Vec<f64>>, DfotError> {
    let steps = seq.num_frames / omega;
    if steps == 0 {
        return Err(DfotError::ShapeMismatch(format!("{} frames is shorter than one token", seq.num_frames)));
    }
    let mut out = Vec::with_capacity(seq.num_agents);
    for p in 0..seq.num_agents {
        let input = VqvaeInput::from_sequence(seq, p, omega)?.window(0, steps * omega);
        out.push(match vqvae {
            Some(vq) => {
                if vq.config.stride != omega {
                    return Err(DfotError::ShapeMismatch(format!(
                        "tokenizer stride {} differs from ω = {omega}",
                        vq.config.stride
                    )));
                }
                vq.codebook_rows(&vq.encode(&input)?.0)
            }
            None => input.x,
        });
    }
    Ok(out)
}

/// Raw (unnormalized) tokens of a preprocessed sequence.
pub fn assemble_tokens(
    seq: &MotionSequence,
    latents: &[Vec<f64>],
    layout: TokenLayout,
) -> Result<TokenSeq, DfotError> {
    let d = seq.derived()?;
    let (pn, om) = (seq.num_agents, layout.omega);
    if pn > layout.p_max {
        return Err(DfotError::ShapeMismatch(format!("{pn} agents exceed P_max = {}", layout.p_max)));
    }
    let steps = seq.num_frames / om;
    if latents.len() != pn || latents.iter().any(|z| z.len() != steps * layout.d_z) {
        return Err(DfotError::ShapeMismatch(format!(
            "expected {pn} latent streams of {} values",
            steps * layout.d_z
        )));
    }
    let slots_seq = pn.saturating_sub(1);
    let mut out = TokenSeq::zeros(layout, steps, pn);
    out.present = seq.presence.clone();
    for i in 0..steps {
        for p in 0..pn {
            let tok = out.token_mut(i, p);
            tok[..layout.d_z].copy_from_slice(&latents[p][i * layout.d_z..(i + 1) * layout.d_z]);
            for k in 0..om {
                let t = i * om + k;
                let ds = layout.delta_start() + k * 9;
                tok[ds..ds + 9].copy_from_slice(&d.delta_can[t * pn + p].to_9d());
                for s in 0..layout.slots().min(slots_seq) {
                    let so = layout.slot_start(s) + k * 9;
                    tok[so..so + 9].copy_from_slice(&d.self_to_partner[(t * pn + p) * slots_seq + s].to_9d());
                }
            }
        }
    }
    out.clear_absent_slots();
    Ok(out)
}

/// Z-score statistics of the three token components. Transform statistics
/// are shared across frames, partner slots and agents.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenStats {
    pub z: NormStats,
    pub partner: NormStats,
    pub delta: NormStats,
}

impl TokenStats {
    pub fn identity(layout: TokenLayout) -> Self {
        Self { z: NormStats::identity(layout.d_z), partner: NormStats::identity(9), delta: NormStats::identity(9) }
    }

    /// Statistics over present agents and present slots of raw tokens.
    pub fn from_tokens(seqs: &[TokenSeq]) -> Result<Self, DfotError> {
        let l = seqs.first().ok_or_else(|| DfotError::Config("no token sequences".into()))?.layout;
        let (mut z, mut partner, mut delta) = (Vec::new(), Vec::new(), Vec::new());
        for s in seqs {
            for i in 0..s.steps {
                for a in (0..s.agents).filter(|a| s.present[*a]) {
                    let tok = s.token(i, a);
                    z.push(&tok[..l.d_z]);
                    delta.extend(tok[l.delta_start()..l.bits_start()].chunks(9));
                    for sl in (0..l.slots()).filter(|sl| s.slot_present(a, *sl)) {
                        partner.extend(tok[l.slot_start(sl)..l.slot_start(sl) + l.block()].chunks(9));
                    }
                }
            }
        }
        let partner = if partner.is_empty() { NormStats::identity(9) } else { NormStats::from_rows(9, partner) };
        Ok(Self { z: NormStats::from_rows(l.d_z, z), partner, delta: NormStats::from_rows(9, delta) })
    }

    fn map(&self, seq: &TokenSeq, forward: bool) -> TokenSeq {
        let l = seq.layout;
        let mut out = seq.clone();
        let apply = |st: &NormStats, x: &[f64]| if forward { st.normalize(x) } else { st.denormalize(x) };
        for i in 0..seq.steps {
            for a in 0..seq.agents {
                let flags: Vec<bool> = (0..l.slots()).map(|s| seq.slot_present(a, s)).collect();
                let src = seq.token(i, a);
                let z = apply(&self.z, &src[..l.d_z]);
                let dl = apply(&self.delta, &src[l.delta_start()..l.bits_start()]);
                let slots: Vec<Option<Vec<f64>>> = (0..l.slots())
                    .map(|s| flags[s].then(|| apply(&self.partner, &src[l.slot_start(s)..l.slot_start(s) + l.block()])))
                    .collect();
                let tok = out.token_mut(i, a);
                tok[..l.d_z].copy_from_slice(&z);
                tok[l.delta_start()..l.bits_start()].copy_from_slice(&dl);
                for (s, v) in slots.into_iter().enumerate() {
                    let r = l.slot_start(s)..l.slot_start(s) + l.block();
                    match v {
                        Some(v) => tok[r].copy_from_slice(&v),
                        None => tok[r].fill(0.0),
                    }
                }
            }
        }
        out
    }

    pub fn normalize(&self, seq: &TokenSeq) -> TokenSeq {
        self.map(seq, true)
    }

    pub fn denormalize(&self, seq: &TokenSeq) -> TokenSeq {
        self.map(seq, false)
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:.16e}")).collect::<Vec<_>>().join(",");
        vec![
            ("stats.z.mean".into(), join(&self.z.mean)),
            ("stats.z.std".into(), join(&self.z.std)),
            ("stats.partner.mean".into(), join(&self.partner.mean)),
            ("stats.partner.std".into(), join(&self.partner.std)),
            ("stats.delta.mean".into(), join(&self.delta.mean)),
            ("stats.delta.std".into(), join(&self.delta.std)),
        ]
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self, DfotError> {
        let get = |k: &str| -> Result<Vec<f64>, DfotError> {
            let v = pairs
                .iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v)
                .ok_or_else(|| DfotError::Config(format!("missing {k}")))?;
            v.split(',').map(|x| x.parse().map_err(|_| DfotError::Config(format!("bad number in {k}")))).collect()
        };
        let stats = |m: &str, s: &str| -> Result<NormStats, DfotError> { Ok(NormStats { mean: get(m)?, std: get(s)? }) };
        Ok(Self {
            z: stats("stats.z.mean", "stats.z.std")?,
            partner: stats("stats.partner.mean", "stats.partner.std")?,
            delta: stats("stats.delta.mean", "stats.delta.std")?,
        })
    }
}

/// Width of the raw per-token latent used when no tokenizer is present.
pub fn raw_latent_width(omega: usize) -> usize {
    omega * X_WIDTH
}
