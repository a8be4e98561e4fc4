//! Neural building blocks over [`Graph`] with parameters held in a [`ParamStore`].

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::{Result, Tensor, TensorError};

/// Group-norm epsilon.
pub const GN_EPS: f32 = 1e-5;

fn uniform_init<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
    Tensor::rand_uniform(shape.to_vec(), -bound, bound, rng)
}

/// Fully connected layer over the last axis: `y = x·W + b`, `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), uniform_init(&[d_in, d_out], d_in, rng));
        let bias = store.add(format!("{name}.bias"), uniform_init(&[d_out], d_in, rng));
        Self { weight, bias, d_in, d_out }
    }

    /// Linear layer whose weight is zero and bias is constant.
    pub fn constant(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: f32) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros([d_in, d_out]));
        let bias = store.add(format!("{name}.bias"), Tensor::full([d_out], bias));
        Self { weight, bias, d_in, d_out }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub c_out: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            uniform_init(&[c_out, c_in, kernel, kernel], fan_in, rng),
        );
        let bias = store.add(format!("{name}.bias"), uniform_init(&[c_out], fan_in, rng));
        Self { weight, bias, stride, pad, c_out }
    }

    /// "Same" 3×3 convolution.
    pub fn same3<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Self {
        Self::new(store, name, c_in, c_out, 3, 1, 1, rng)
    }

    /// Scales the initial weights, e.g. by 0 for output layers that should start silent.
    pub fn scale_init(self, store: &mut ParamStore, factor: f32) -> Self {
        for id in [self.weight, self.bias] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= factor);
        }
        self
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Normalizes `[N, C, ...]` per sample over groups of channels (ε = [`GN_EPS`]),
/// then applies `scale`/`shift`, each of shape `[C]` or `[N, C]`.
pub fn group_norm(g: &mut Graph, x: Var, n_groups: usize, scale: Var, shift: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() < 2 {
        return Err(TensorError::InvalidArgument(format!("group_norm on {shape:?}")));
    }
    let (n, c) = (shape[0], shape[1]);
    if n_groups == 0 || c % n_groups != 0 {
        return Err(TensorError::InvalidArgument(format!(
            "{c} channels not divisible into {n_groups} groups"
        )));
    }
    let per_group = x_len(&shape) / (n * n_groups);
    let xr = g.reshape(x, &[n, n_groups, per_group])?;
    let mu = g.mean_axis(xr, 2)?;
    let centered = g.sub(xr, mu)?;
    let sq = g.square(centered);
    let var = g.mean_axis(sq, 2)?;
    let var_eps = g.add_scalar(var, GN_EPS);
    let std = g.sqrt(var_eps);
    let normed = g.div(centered, std)?;
    let normed = g.reshape(normed, &shape)?;
    let mut affine_shape = vec![1usize; shape.len()];
    affine_shape[1] = c;
    let reshape_affine = |g: &mut Graph, v: Var| -> Result<Var> {
        let s = g.shape(v).to_vec();
        let mut target = affine_shape.clone();
        match s.as_slice() {
            [cc] if *cc == c => {}
            [nn, cc] if *nn == n && *cc == c => target[0] = n,
            _ => return Err(TensorError::ShapeMismatch { op: "group_norm affine", lhs: s, rhs: vec![n, c] }),
        }
        g.reshape(v, &target)
    };
    let scale = reshape_affine(g, scale)?;
    let shift = reshape_affine(g, shift)?;
    let y = g.mul(normed, scale)?;
    g.add(y, shift)
}

fn x_len(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Group normalization with either learned affine parameters or, when built
/// with a condition width, scale/shift predicted from a condition vector.
/// The conditional projections start at scale 1 / shift 0.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub groups: usize,
    pub channels: usize,
    affine: Affine,
}

#[derive(Clone, Debug)]
enum Affine {
    Plain { scale: ParamId, shift: ParamId },
    Cond { scale: Linear, shift: Linear },
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, groups: usize, channels: usize) -> Self {
        let scale = store.add(format!("{name}.scale"), Tensor::ones([channels]));
        let shift = store.add(format!("{name}.shift"), Tensor::zeros([channels]));
        Self { groups, channels, affine: Affine::Plain { scale, shift } }
    }

    pub fn conditional(
        store: &mut ParamStore,
        name: &str,
        groups: usize,
        channels: usize,
        cond_dim: usize,
    ) -> Self {
        let scale = Linear::constant(store, &format!("{name}.cond_scale"), cond_dim, channels, 1.0);
        let shift = Linear::constant(store, &format!("{name}.cond_shift"), cond_dim, channels, 0.0);
        Self { groups, channels, affine: Affine::Cond { scale, shift } }
    }

    pub fn is_conditional(&self) -> bool {
        matches!(self.affine, Affine::Cond { .. })
    }

    /// `cond` is `[N, cond_dim]` and required for conditional norms.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, cond: Option<Var>) -> Result<Var> {
        let (scale, shift) = match (&self.affine, cond) {
            (Affine::Plain { scale, shift }, _) => (g.param(store, *scale), g.param(store, *shift)),
            (Affine::Cond { scale, shift }, Some(c)) => {
                (scale.forward(g, store, c)?, shift.forward(g, store, c)?)
            }
            (Affine::Cond { .. }, None) => {
                return Err(TensorError::InvalidArgument(
                    "conditional group norm needs a condition".into(),
                ))
            }
        };
        group_norm(g, x, self.groups, scale, shift)
    }
}

/// Sinusoidal timestep embedding with interleaved `(sin, cos)` pairs at
/// frequencies `10000^(-i/(dim/2))`, `i = 0..dim/2`.
pub fn timestep_embedding(t: usize, dim: usize) -> Result<Vec<f32>> {
    if dim % 2 != 0 || dim == 0 {
        return Err(TensorError::InvalidArgument(format!("embedding dim {dim} must be even")));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out.push(arg.sin() as f32);
        out.push(arg.cos() as f32);
    }
    Ok(out)
}

/// `[N, dim]` embedding tensor for a batch of timesteps.
pub fn timestep_embedding_batch(ts: &[usize], dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend(timestep_embedding(t, dim)?);
    }
    Tensor::new([ts.len(), dim], data)
}

/// Pre-activation residual block: GN → SiLU → conv, twice, with an optional
/// additive timestep projection and conditional norms.
#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ResBlockOpts {
    pub groups: usize,
    pub temb_dim: Option<usize>,
    pub cond_dim: Option<usize>,
}

impl ResBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        opts: ResBlockOpts,
        rng: &mut R,
    ) -> Self {
        let norm = |store: &mut ParamStore, n: &str, c: usize| match opts.cond_dim {
            Some(d) => GroupNorm::conditional(store, n, opts.groups, c, d),
            None => GroupNorm::new(store, n, opts.groups, c),
        };
        let norm1 = norm(store, &format!("{name}.norm1"), c_in);
        let conv1 = Conv2d::same3(store, &format!("{name}.conv1"), c_in, c_out, rng);
        let temb = opts.temb_dim.map(|d| Linear::new(store, &format!("{name}.temb"), d, c_out, rng));
        let norm2 = norm(store, &format!("{name}.norm2"), c_out);
        let conv2 = Conv2d::same3(store, &format!("{name}.conv2"), c_out, c_out, rng);
        let skip = (c_in != c_out)
            .then(|| Conv2d::new(store, &format!("{name}.skip"), c_in, c_out, 1, 1, 0, rng));
        Self { norm1, conv1, temb, norm2, conv2, skip }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        temb: Option<Var>,
        cond: Option<Var>,
    ) -> Result<Var> {
        let h = self.norm1.forward(g, store, x, cond)?;
        let h = g.silu(h);
        let mut h = self.conv1.forward(g, store, h)?;
        if let (Some(proj), Some(t)) = (&self.temb, temb) {
            let e = g.silu(t);
            let e = proj.forward(g, store, e)?;
            let n = g.shape(e)[0];
            let e = g.reshape(e, &[n, self.conv1.c_out, 1, 1])?;
            h = g.add(h, e)?;
        }
        let h = self.norm2.forward(g, store, h, cond)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, store, h)?;
        let skip = match &self.skip {
            Some(s) => s.forward(g, store, x)?,
            None => x,
        };
        g.add(skip, h)
    }
}

/// Single-head scaled dot-product attention over flattened spatial positions.
/// Without a context it is self-attention; with a `[N, L, ctx_dim]` context it
/// attends to the context tokens.
#[derive(Clone, Debug)]
pub struct AttnBlock {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    channels: usize,
}

impl AttnBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        groups: usize,
        ctx_dim: Option<usize>,
        rng: &mut R,
    ) -> Self {
        let kv_in = ctx_dim.unwrap_or(channels);
        Self {
            norm: GroupNorm::new(store, &format!("{name}.norm"), groups, channels),
            q: Linear::new(store, &format!("{name}.q"), channels, channels, rng),
            k: Linear::new(store, &format!("{name}.k"), kv_in, channels, rng),
            v: Linear::new(store, &format!("{name}.v"), kv_in, channels, rng),
            out: Linear::new(store, &format!("{name}.out"), channels, channels, rng),
            channels,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, context: Option<Var>) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let [n, c, h, w] = shape[..] else {
            return Err(TensorError::InvalidArgument(format!("attention expects NCHW, got {shape:?}")));
        };
        debug_assert_eq!(c, self.channels);
        let hn = self.norm.forward(g, store, x, None)?;
        let tokens = g.reshape(hn, &[n, c, h * w])?;
        let tokens = g.permute(tokens, &[0, 2, 1])?;
        let ctx = context.unwrap_or(tokens);
        let q = self.q.forward(g, store, tokens)?;
        let k = self.k.forward(g, store, ctx)?;
        let v = self.v.forward(g, store, ctx)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.mul_scalar(scores, 1.0 / (c as f32).sqrt());
        let attn = g.softmax(scores)?;
        let o = g.matmul(attn, v)?;
        let o = self.out.forward(g, store, o)?;
        let o = g.permute(o, &[0, 2, 1])?;
        let o = g.reshape(o, &[n, c, h, w])?;
        g.add(x, o)
    }
}
