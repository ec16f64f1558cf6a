use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::rng::Rng;
use crate::tape::{Graph, Mat, ParamSet, Var};

/// Registers parameters under a common name prefix.
pub(crate) struct Builder<'a> {
    pub params: &'a mut ParamSet,
    pub rng: &'a mut Rng,
}

impl Builder<'_> {
    pub fn xavier(&mut self, name: &str, fan_in: usize, fan_out: usize) -> usize {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let rng = &mut *self.rng;
        let m = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-bound..bound));
        self.params.add(name, m)
    }

    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> usize {
        let dist = Normal::new(0.0, std).expect("valid std");
        let rng = &mut *self.rng;
        let m = Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng));
        self.params.add(name, m)
    }

    /// Learned position table starting from sinusoids, so equal positions in
    /// different streams begin with equal codes.
    pub fn sinusoidal(&mut self, name: &str, rows: usize, cols: usize) -> usize {
        let mut m = Array2::zeros((rows, cols));
        for p in 0..rows {
            m.row_mut(p).assign(&timestep_embedding(p, cols).row(0));
        }
        self.params.add(name, m)
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> usize {
        self.params.add(name, Array2::zeros((rows, cols)))
    }

    pub fn ones(&mut self, name: &str, rows: usize, cols: usize) -> usize {
        self.params.add(name, Array2::ones((rows, cols)))
    }
}

/// Dropout state for one forward pass; inactive when `rng` is `None`.
pub(crate) struct Dropout<'r> {
    pub p: f64,
    pub rng: Option<&'r mut Rng>,
}

impl Dropout<'_> {
    pub fn off() -> Dropout<'static> {
        Dropout { p: 0.0, rng: None }
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) if self.p > 0.0 => {
                let keep = 1.0 / (1.0 - self.p);
                let p = self.p;
                let mask = Array2::from_shape_simple_fn(g.shape(x), || if rng.random::<f64>() < p { 0.0 } else { keep });
                g.mul_const(x, mask)
            }
            _ => x,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: b.xavier(&format!("{name}.weight"), fan_in, fan_out),
            b: b.zeros(&format!("{name}.bias"), 1, fan_out),
        }
    }

    /// Weight and bias start at exactly zero.
    pub fn zeroed(b: &mut Builder, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: b.zeros(&format!("{name}.weight"), fan_in, fan_out),
            b: b.zeros(&format!("{name}.bias"), 1, fan_out),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let y = g.matmul(x, w);
        let b = g.param(self.b);
        g.add_row(y, b)
    }
}

/// Layer norm with learned scale and shift.
#[derive(Debug, Clone)]
pub(crate) struct Norm {
    gamma: usize,
    beta: usize,
}

impl Norm {
    pub fn new(b: &mut Builder, name: &str, dim: usize) -> Self {
        Norm {
            gamma: b.ones(&format!("{name}.gamma"), 1, dim),
            beta: b.zeros(&format!("{name}.beta"), 1, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.layer_norm(x);
        let gamma = g.param(self.gamma);
        let n = g.mul_row(n, gamma);
        let beta = g.param(self.beta);
        g.add_row(n, beta)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Attention {
    qkv: Linear,
    out: Linear,
    heads: usize,
    dim: usize,
}

impl Attention {
    pub fn new(b: &mut Builder, name: &str, dim: usize, heads: usize) -> Self {
        Attention {
            qkv: Linear::new(b, &format!("{name}.qkv"), dim, 3 * dim),
            out: Linear::new(b, &format!("{name}.out"), dim, dim),
            heads,
            dim,
        }
    }

    /// Full self-attention; keys flagged in `key_mask` are ignored.
    pub fn forward(&self, g: &mut Graph, x: Var, key_mask: Option<&[bool]>) -> Var {
        let qkv = self.qkv.forward(g, x);
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = g.slice_cols(qkv, h * head_dim, head_dim);
            let k = g.slice_cols(qkv, self.dim + h * head_dim, head_dim);
            let v = g.slice_cols(qkv, 2 * self.dim + h * head_dim, head_dim);
            let scores = g.matmul_t(q, k);
            let scores = g.scale(scores, scale);
            let probs = g.softmax(scores, key_mask);
            outputs.push(g.matmul(probs, v));
        }
        let merged = if outputs.len() == 1 { outputs[0] } else { g.concat_cols(&outputs) };
        self.out.forward(g, merged)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct FeedForward {
    fc1: Linear,
    fc2: Linear,
}

impl FeedForward {
    pub fn new(b: &mut Builder, name: &str, dim: usize, hidden: usize) -> Self {
        FeedForward {
            fc1: Linear::new(b, &format!("{name}.fc1"), dim, hidden),
            fc2: Linear::new(b, &format!("{name}.fc2"), hidden, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Pre-norm transformer encoder layer.
#[derive(Debug, Clone)]
pub(crate) struct EncoderLayer {
    norm1: Norm,
    attn: Attention,
    norm2: Norm,
    ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new(b: &mut Builder, name: &str, dim: usize, heads: usize, hidden: usize) -> Self {
        EncoderLayer {
            norm1: Norm::new(b, &format!("{name}.norm1"), dim),
            attn: Attention::new(b, &format!("{name}.attn"), dim, heads),
            norm2: Norm::new(b, &format!("{name}.norm2"), dim),
            ffn: FeedForward::new(b, &format!("{name}.ffn"), dim, hidden),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, key_mask: Option<&[bool]>, drop: &mut Dropout) -> Var {
        let h = self.norm1.forward(g, x);
        let h = self.attn.forward(g, h, key_mask);
        let h = drop.apply(g, h);
        let x = g.add(x, h);
        let h = self.norm2.forward(g, x);
        let h = self.ffn.forward(g, h);
        let h = drop.apply(g, h);
        g.add(x, h)
    }
}

/// `LN(x) * (1 + scale) + shift` with `shift`, `scale` as `1 x dim` rows.
pub(crate) fn modulate(g: &mut Graph, x: Var, shift: Var, scale: Var) -> Var {
    let n = g.layer_norm(x);
    let s = g.add_scalar(scale, 1.0);
    let n = g.mul_row(n, s);
    g.add_row(n, shift)
}

/// Transformer block whose norms are modulated by a conditioning vector,
/// with zero-initialized residual gates.
#[derive(Debug, Clone)]
pub(crate) struct AdaLnZeroBlock {
    pub modulation: Linear,
    attn: Attention,
    ffn: FeedForward,
    dim: usize,
}

impl AdaLnZeroBlock {
    pub fn new(b: &mut Builder, name: &str, dim: usize, heads: usize, hidden: usize) -> Self {
        AdaLnZeroBlock {
            modulation: Linear::zeroed(b, &format!("{name}.adaln"), dim, 6 * dim),
            attn: Attention::new(b, &format!("{name}.attn"), dim, heads),
            ffn: FeedForward::new(b, &format!("{name}.ffn"), dim, hidden),
            dim,
        }
    }

    /// `cond_act` is the already SiLU-activated conditioning row.
    pub fn forward(&self, g: &mut Graph, x: Var, cond_act: Var, drop: &mut Dropout) -> Var {
        let d = self.dim;
        let m = self.modulation.forward(g, cond_act);
        let chunk = |g: &mut Graph, i: usize| g.slice_cols(m, i * d, d);
        let (shift1, scale1, gate1) = (chunk(g, 0), chunk(g, 1), chunk(g, 2));
        let (shift2, scale2, gate2) = (chunk(g, 3), chunk(g, 4), chunk(g, 5));

        let h = modulate(g, x, shift1, scale1);
        let h = self.attn.forward(g, h, None);
        let h = drop.apply(g, h);
        let h = g.mul_row(h, gate1);
        let x = g.add(x, h);

        let h = modulate(g, x, shift2, scale2);
        let h = self.ffn.forward(g, h);
        let h = drop.apply(g, h);
        let h = g.mul_row(h, gate2);
        g.add(x, h)
    }
}

/// Sinusoidal embedding of a diffusion timestep as a `1 x dim` row.
pub(crate) fn timestep_embedding(t: usize, dim: usize) -> Mat {
    let half = dim / 2;
    let mut row = Array2::zeros((1, dim));
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        row[[0, i]] = arg.sin();
        row[[0, half + i]] = arg.cos();
    }
    row
}
