use rand::Rng;

use crate::nn::params::{Bound, ParamId, ParamStore};
use crate::nn::tape::{AttnLayout, Var, ZERO_INDEX};
use crate::nn::NnError;
use crate::scalar::Real;

pub const LN_EPS: f64 = 1e-5;

/// `y = x W + b`, `W` stored as `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let std = 1.0 / (d_in as f64).sqrt();
        let w = store.add_normal(format!("{name}.w"), &[d_in, d_out], std, rng);
        let b = store.add_zeros(format!("{name}.b"), &[d_out]);
        Self { w, b, d_in, d_out }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.matmul(p.var(self.w)).add_row(p.var(self.b))
    }
}

/// Last-axis normalization with learned scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        let gamma = store.add_ones(format!("{name}.gamma"), &[d]);
        let beta = store.add_zeros(format!("{name}.beta"), &[d]);
        Self { gamma, beta }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.layer_norm_plain(T::lit(LN_EPS)).mul_row(p.var(self.gamma)).add_row(p.var(self.beta))
    }
}

/// Stack of linear layers. Hidden layers apply GELU, optionally preceded by
/// a LayerNorm; the last layer is linear.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub norms: Vec<LayerNorm>,
}

impl Mlp {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: &[usize],
        layer_norm: bool,
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least input and output widths");
        let mut layers = Vec::new();
        let mut norms = Vec::new();
        for i in 0..dims.len() - 1 {
            layers.push(Linear::new(store, &format!("{name}.{i}"), dims[i], dims[i + 1], rng));
            if layer_norm && i + 2 < dims.len() {
                norms.push(LayerNorm::new(store, &format!("{name}.ln{i}"), dims[i + 1]));
            }
        }
        Self { layers, norms }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(p, h);
            if i < last {
                if let Some(n) = self.norms.get(i) {
                    h = n.forward(p, h);
                }
                h = h.gelu();
            }
        }
        h
    }
}

/// 1D convolution over `[batch, time, channels]` rows, implemented as
/// an im2col gather followed by a matmul. Weights are `[k·c_in, c_out]`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    /// Same-padded convolution (odd kernel, stride 1).
    pub fn same<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1, "same padding needs an odd kernel");
        Self::with(store, name, c_in, c_out, kernel, 1, (kernel - 1) / 2, rng)
    }

    /// Unpadded convolution with `kernel == stride`, compressing time by `stride`.
    pub fn strided<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        Self::with(store, name, c_in, c_out, stride, stride, 0, rng)
    }

    #[allow(clippy::too_many_arguments)]
    fn with<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / ((kernel * c_in) as f64).sqrt();
        let w = store.add_normal(format!("{name}.w"), &[kernel * c_in, c_out], std, rng);
        let b = store.add_zeros(format!("{name}.b"), &[c_out]);
        Self { w, b, c_in, c_out, kernel, stride, pad }
    }

    pub fn out_len(&self, t_in: usize) -> usize {
        (t_in + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>, batch: usize) -> Var<'t, T> {
        let rows = x.rows();
        assert_eq!(x.cols(), self.c_in, "conv1d: channel mismatch");
        assert_eq!(rows % batch, 0, "conv1d: rows not divisible by batch");
        let t_in = rows / batch;
        let t_out = self.out_len(t_in);
        let k = self.kernel;
        let mut index = Vec::with_capacity(batch * t_out * k * self.c_in);
        for b in 0..batch {
            for to in 0..t_out {
                for kk in 0..k {
                    let ti = (to * self.stride + kk) as isize - self.pad as isize;
                    for c in 0..self.c_in {
                        if ti < 0 || ti as usize >= t_in {
                            index.push(ZERO_INDEX);
                        } else {
                            index.push((b * t_in + ti as usize) * self.c_in + c);
                        }
                    }
                }
            }
        }
        let cols = x.gather(index, vec![batch * t_out, k * self.c_in]);
        cols.matmul(p.var(self.w)).add_row(p.var(self.b))
    }
}

/// `x + conv1(gelu(ln(conv3(x))))`
#[derive(Debug, Clone)]
pub struct ResBlock1d {
    pub conv_a: Conv1d,
    pub norm: LayerNorm,
    pub conv_b: Conv1d,
}

impl ResBlock1d {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut R) -> Self {
        let conv_a = Conv1d::same(store, &format!("{name}.conv_a"), channels, channels, 3, rng);
        let norm = LayerNorm::new(store, &format!("{name}.ln"), channels);
        let conv_b = Conv1d::same(store, &format!("{name}.conv_b"), channels, channels, 1, rng);
        Self { conv_a, norm, conv_b }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>, batch: usize) -> Var<'t, T> {
        let h = self.conv_a.forward(p, x, batch);
        let h = self.norm.forward(p, h).gelu();
        x.add(self.conv_b.forward(p, h, batch))
    }
}

/// Nearest-neighbour upsampling along time: each row repeated `factor` times.
pub fn upsample_repeat<'t, T: Real>(x: Var<'t, T>, factor: usize) -> Var<'t, T> {
    let rows: Vec<usize> = (0..x.rows()).flat_map(|r| std::iter::repeat_n(r, factor)).collect();
    x.select_rows(&rows)
}

/// Post-norm encoder block with rotary multi-head self-attention.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln1: LayerNorm,
    pub mlp: Mlp,
    pub ln2: LayerNorm,
    pub heads: usize,
}

impl TransformerBlock {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        if !d.is_multiple_of(heads) {
            return Err(NnError::ShapeMismatch(format!("width {d} not divisible by {heads} heads")));
        }
        if !(d / heads).is_multiple_of(2) {
            return Err(NnError::OddHeadDim(d / heads));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            mlp: Mlp::new(store, &format!("{name}.mlp"), &[d, 4 * d, d], false, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            heads,
        })
    }

    /// `x` holds `layout.batch · layout.seq` rows. `positions` gives the
    /// rotary index per row and `valid` (0/1 column) zeroes masked rows.
    pub fn forward<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        x: Var<'t, T>,
        positions: &[usize],
        layout: &AttnLayout,
        valid: Var<'t, T>,
    ) -> Var<'t, T> {
        let q = self.q.forward(p, x).rope(positions, self.heads, ROPE_BASE);
        let k = self.k.forward(p, x).rope(positions, self.heads, ROPE_BASE);
        let v = self.v.forward(p, x);
        let a = Var::attention(q, k, v, layout.clone());
        let h = self.ln1.forward(p, x.add(self.o.forward(p, a)));
        let y = self.ln2.forward(p, h.add(self.mlp.forward(p, h)));
        y.mul_col(valid)
    }
}

pub const ROPE_BASE: f64 = 10_000.0;
