//! The patch transformer `F_theta` with adaLN-Zero conditioning.
//!
//! Parameters live in one flat array; [`Layout`] names every segment. The
//! forward pass can record a [`Cache`] from which [`Network::backward`]
//! computes the exact reverse-mode gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::embed::{
    patchify_into, pos_embed, timestep_embedding, unpatchify_into, TIME_EMBED_SCALE,
};
use crate::network::linalg::{
    add_col_sums, gelu, gelu_grad, gemm, silu, silu_grad, Mat, MatMut, Real,
};

pub const AUX_DIM: usize = 26;
const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    #[default]
    Concat,
    Add,
    Multiply,
}

impl Fusion {
    pub fn code(self) -> u8 {
        match self {
            Fusion::Concat => 0,
            Fusion::Add => 1,
            Fusion::Multiply => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Fusion::Concat),
            1 => Some(Fusion::Add),
            2 => Some(Fusion::Multiply),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase", default)]
pub struct NetConfig {
    pub volume_side: usize,
    pub patch_side: usize,
    pub embed_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub aux_dim: usize,
    pub mlp_ratio: usize,
    /// Feed the source volume `y` as a second input channel.
    pub y_channel: bool,
    pub fusion: Fusion,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            volume_side: 16,
            patch_side: 2,
            embed_dim: 64,
            n_blocks: 4,
            n_heads: 2,
            aux_dim: AUX_DIM,
            mlp_ratio: 4,
            y_channel: true,
            fusion: Fusion::Concat,
        }
    }
}

impl NetConfig {
    /// 4^3 volume, used for full finite-difference gradient checks.
    pub fn micro() -> Self {
        NetConfig {
            volume_side: 4,
            patch_side: 2,
            embed_dim: 12,
            n_blocks: 2,
            n_heads: 2,
            ..Default::default()
        }
    }

    /// Full-size backbone dimensions (80^3, patch 4, 28 blocks, width 1152, 16 heads).
    pub fn full_scale() -> Self {
        NetConfig {
            volume_side: 80,
            patch_side: 4,
            embed_dim: 1152,
            n_blocks: 28,
            n_heads: 16,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.patch_side == 0 || self.volume_side == 0 || self.volume_side % self.patch_side != 0
        {
            return err(format!(
                "volumeSide {} not divisible by patchSide {}",
                self.volume_side, self.patch_side
            ));
        }
        if self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return err(format!(
                "embedDim {} not divisible by nHeads {}",
                self.embed_dim, self.n_heads
            ));
        }
        if self.embed_dim < 6 {
            return err(format!("embedDim {} < 6", self.embed_dim));
        }
        if self.aux_dim == 0 || self.mlp_ratio == 0 {
            return err("auxDim and mlpRatio must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.volume_side / self.patch_side
    }

    pub fn n_tokens(&self) -> usize {
        self.grid().pow(3)
    }

    pub fn patch_len(&self) -> usize {
        self.patch_side.pow(3)
    }

    pub fn in_channels(&self) -> usize {
        if self.y_channel {
            2
        } else {
            1
        }
    }

    pub fn cond_dim(&self) -> usize {
        match self.fusion {
            Fusion::Concat => 2 * self.embed_dim,
            Fusion::Add | Fusion::Multiply => self.embed_dim,
        }
    }

    pub fn n_voxels(&self) -> usize {
        self.volume_side.pow(3)
    }
}

/// A named contiguous range of the flat parameter array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy)]
struct Lin {
    w: usize,
    b: usize,
    n_in: usize,
    n_out: usize,
}

#[derive(Debug, Clone)]
struct BlockLayout {
    ada: Lin,
    qkv: Lin,
    proj: Lin,
    fc1: Lin,
    fc2: Lin,
}

#[derive(Debug, Clone)]
pub struct Layout {
    segments: Vec<Segment>,
    zero_init: Vec<bool>,
    total: usize,
    patch_embed: Lin,
    t1: Lin,
    t2: Lin,
    a1: Lin,
    a2: Lin,
    a3: Lin,
    blocks: Vec<BlockLayout>,
    final_ada: Lin,
    head: Lin,
}

struct LayoutBuilder {
    segments: Vec<Segment>,
    zero_init: Vec<bool>,
    total: usize,
}

impl LayoutBuilder {
    fn lin(&mut self, name: &str, n_in: usize, n_out: usize, zero: bool) -> Lin {
        let w = self.total;
        self.segments.push(Segment {
            name: format!("{name}.weight"),
            offset: w,
            len: n_in * n_out,
        });
        self.zero_init.push(zero);
        self.total += n_in * n_out;
        let b = self.total;
        self.segments.push(Segment {
            name: format!("{name}.bias"),
            offset: b,
            len: n_out,
        });
        self.zero_init.push(true);
        self.total += n_out;
        Lin { w, b, n_in, n_out }
    }
}

impl Layout {
    pub fn new(cfg: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        let e = cfg.embed_dim;
        let ec = cfg.cond_dim();
        let mut lb = LayoutBuilder {
            segments: Vec::new(),
            zero_init: Vec::new(),
            total: 0,
        };
        let patch_embed = lb.lin("patch_embed", cfg.in_channels() * cfg.patch_len(), e, false);
        let t1 = lb.lin("t_embed.0", e, e, false);
        let t2 = lb.lin("t_embed.2", e, e, false);
        let a1 = lb.lin("aux_embed.0", cfg.aux_dim, e, false);
        let a2 = lb.lin("aux_embed.2", e, e, false);
        let a3 = lb.lin("aux_embed.4", e, e, false);
        let blocks = (0..cfg.n_blocks)
            .map(|i| BlockLayout {
                ada: lb.lin(&format!("blocks.{i}.adaln_modulation"), ec, 6 * e, true),
                qkv: lb.lin(&format!("blocks.{i}.attn.qkv"), e, 3 * e, false),
                proj: lb.lin(&format!("blocks.{i}.attn.proj"), e, e, false),
                fc1: lb.lin(&format!("blocks.{i}.mlp.fc1"), e, cfg.mlp_ratio * e, false),
                fc2: lb.lin(&format!("blocks.{i}.mlp.fc2"), cfg.mlp_ratio * e, e, false),
            })
            .collect();
        let final_ada = lb.lin("final.adaln_modulation", ec, 2 * e, true);
        let head = lb.lin("final.linear", e, cfg.patch_len(), true);
        Ok(Layout {
            segments: lb.segments,
            zero_init: lb.zero_init,
            total: lb.total,
            patch_embed,
            t1,
            t2,
            a1,
            a2,
            a3,
            blocks,
            final_ada,
            head,
        })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    /// Offsets of every adaLN-Zero gate (`alpha`) output: rows of the
    /// modulation heads' bias vectors and weight columns producing the gates.
    pub fn gate_bias_ranges(&self, cfg: &NetConfig) -> Vec<std::ops::Range<usize>> {
        let e = cfg.embed_dim;
        self.blocks
            .iter()
            .flat_map(|b| {
                [
                    b.ada.b + 2 * e..b.ada.b + 3 * e,
                    b.ada.b + 5 * e..b.ada.b + 6 * e,
                ]
            })
            .collect()
    }
}

/// Number of learnable parameters implied by a configuration.
pub fn param_count(cfg: &NetConfig) -> Result<usize> {
    Ok(Layout::new(cfg)?.total())
}

/// Per-block activations kept for the backward pass.
#[derive(Debug, Clone, Default)]
struct BlockCache<T> {
    mods: Vec<T>,
    ln1: Vec<T>,
    rstd1: Vec<T>,
    m1: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    attn_o: Vec<T>,
    att: Vec<T>,
    ln2: Vec<T>,
    rstd2: Vec<T>,
    m2: Vec<T>,
    f1: Vec<T>,
    g: Vec<T>,
    f2: Vec<T>,
}

/// Activations recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct Cache<T> {
    x_in: Vec<T>,
    t_in: Vec<T>,
    t1: Vec<T>,
    t1s: Vec<T>,
    temb: Vec<T>,
    aux: Vec<T>,
    a1: Vec<T>,
    a1s: Vec<T>,
    a2: Vec<T>,
    a2s: Vec<T>,
    aemb: Vec<T>,
    cond: Vec<T>,
    cs: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    modf: Vec<T>,
    lnf: Vec<T>,
    rstdf: Vec<T>,
    mf: Vec<T>,
}

/// Inputs of `F_theta`: the scaled bridge state, the source volume, the
/// noise level and the auxiliary vector.
#[derive(Debug, Clone, Copy)]
pub struct NetInput<'a, T> {
    pub x_scaled: &'a [T],
    pub y: &'a [T],
    pub c_noise: f64,
    pub aux: &'a [T],
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    cfg: NetConfig,
    layout: Layout,
    params: Vec<T>,
    pos: Vec<T>,
}

/// `y = x W + b` for row-major `x` (`rows x n_in`), `W` (`n_in x n_out`).
fn linear<T: Real>(p: &[T], l: Lin, x: &[T], rows: usize, out: &mut Vec<T>) {
    out.clear();
    out.reserve(rows * l.n_out);
    let bias = &p[l.b..l.b + l.n_out];
    for _ in 0..rows {
        out.extend_from_slice(bias);
    }
    gemm(
        T::one(),
        Mat::rm(x, rows, l.n_in),
        Mat::rm(&p[l.w..l.w + l.n_in * l.n_out], l.n_in, l.n_out),
        T::one(),
        MatMut::rm(out, rows, l.n_out),
    );
}

/// Accumulates parameter gradients of [`linear`] and, if requested, returns `dx`.
fn linear_backward<T: Real>(
    p: &[T],
    grad: &mut [T],
    l: Lin,
    x: &[T],
    dy: &[T],
    rows: usize,
    dx: Option<&mut Vec<T>>,
) {
    gemm(
        T::one(),
        Mat::rm(x, rows, l.n_in).t(),
        Mat::rm(dy, rows, l.n_out),
        T::one(),
        MatMut::rm(&mut grad[l.w..l.w + l.n_in * l.n_out], l.n_in, l.n_out),
    );
    add_col_sums(dy, rows, l.n_out, &mut grad[l.b..l.b + l.n_out]);
    if let Some(dx) = dx {
        dx.clear();
        dx.resize(rows * l.n_in, T::zero());
        gemm(
            T::one(),
            Mat::rm(dy, rows, l.n_out),
            Mat::rm(&p[l.w..l.w + l.n_in * l.n_out], l.n_in, l.n_out).t(),
            T::zero(),
            MatMut::rm(dx, rows, l.n_in),
        );
    }
}

/// Row-wise layer norm without affine parameters; returns normalized rows and `1/std`.
fn layer_norm<T: Real>(x: &[T], rows: usize, cols: usize, out: &mut Vec<T>, rstd: &mut Vec<T>) {
    out.clear();
    out.resize(rows * cols, T::zero());
    rstd.clear();
    let inv = T::one() / T::of(cols as f64);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().copied().sum::<T>() * inv;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv;
        let rs = T::one() / (var + T::of(LN_EPS)).sqrt();
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
        rstd.push(rs);
    }
}

/// Adds the input gradient of [`layer_norm`] into `dx`.
fn layer_norm_backward<T: Real>(xhat: &[T], rstd: &[T], dxhat: &[T], cols: usize, dx: &mut [T]) {
    let inv = T::one() / T::of(cols as f64);
    for (r, &rs) in rstd.iter().enumerate() {
        let xh = &xhat[r * cols..(r + 1) * cols];
        let dxh = &dxhat[r * cols..(r + 1) * cols];
        let m1 = dxh.iter().copied().sum::<T>() * inv;
        let m2 = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() * inv;
        for ((d, &g), &h) in dx[r * cols..(r + 1) * cols].iter_mut().zip(dxh).zip(xh) {
            *d += rs * (g - m1 - h * m2);
        }
    }
}

/// `out = xhat * (1 + scale) + shift`, broadcasting the modulation over rows.
fn modulate<T: Real>(xhat: &[T], shift: &[T], scale: &[T], cols: usize, out: &mut Vec<T>) {
    out.clear();
    out.reserve(xhat.len());
    for row in xhat.chunks(cols) {
        for ((&v, &sh), &sc) in row.iter().zip(shift).zip(scale) {
            out.push(v * (T::one() + sc) + sh);
        }
    }
}

/// Backward of [`modulate`]: accumulates `dshift`, `dscale` and returns `dxhat`.
fn modulate_backward<T: Real>(
    xhat: &[T],
    scale: &[T],
    dout: &[T],
    cols: usize,
    dshift: &mut [T],
    dscale: &mut [T],
    dxhat: &mut Vec<T>,
) {
    dxhat.clear();
    dxhat.reserve(dout.len());
    for (row, drow) in xhat.chunks(cols).zip(dout.chunks(cols)) {
        for j in 0..cols {
            dshift[j] += drow[j];
            dscale[j] += drow[j] * row[j];
            dxhat.push(drow[j] * (T::one() + scale[j]));
        }
    }
}

impl<T: Real> Network<T> {
    /// Freshly initialized network: truncated-normal (std 0.02) weights, zero
    /// biases, zero modulation heads and zero output projection.
    pub fn init(cfg: NetConfig, seed: u64) -> Result<Self> {
        let layout = Layout::new(&cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![T::zero(); layout.total];
        for (seg, &zero) in layout.segments.iter().zip(&layout.zero_init) {
            if zero {
                continue;
            }
            for p in &mut params[seg.offset..seg.offset + seg.len] {
                *p = T::of(truncated_normal(&mut rng) * INIT_STD);
            }
        }
        Self::from_params(cfg, params)
    }

    pub fn from_params(cfg: NetConfig, params: Vec<T>) -> Result<Self> {
        let layout = Layout::new(&cfg)?;
        if params.len() != layout.total {
            return Err(Error::Shape(format!(
                "{} parameters, configuration needs {}",
                params.len(),
                layout.total
            )));
        }
        let pos = pos_embed(cfg.n_tokens(), cfg.grid(), cfg.embed_dim)?
            .into_iter()
            .map(T::of)
            .collect();
        Ok(Network {
            cfg,
            layout,
            params,
            pos,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            cfg: self.cfg,
            layout: self.layout.clone(),
            params: self.params.iter().map(|p| U::of(p.f64())).collect(),
            pos: self.pos.iter().map(|p| U::of(p.f64())).collect(),
        }
    }

    fn check_input(&self, input: &NetInput<T>) -> Result<()> {
        let nv = self.cfg.n_voxels();
        if input.x_scaled.len() != nv || (self.cfg.y_channel && input.y.len() != nv) {
            return Err(Error::Shape(format!(
                "network expects {} voxels, got x: {}, y: {}",
                nv,
                input.x_scaled.len(),
                input.y.len()
            )));
        }
        if input.aux.len() != self.cfg.aux_dim {
            return Err(Error::Shape(format!(
                "aux vector of length {}, expected {}",
                input.aux.len(),
                self.cfg.aux_dim
            )));
        }
        Ok(())
    }

    /// Evaluates `F_theta`. The output is a flat z-fastest volume.
    pub fn forward(&self, input: &NetInput<T>) -> Result<Vec<T>> {
        Ok(self.run(input, false)?.0)
    }

    /// Forward pass that also records activations for [`Network::backward`].
    pub fn forward_recorded(&self, input: &NetInput<T>) -> Result<(Vec<T>, Cache<T>)> {
        let (out, cache) = self.run(input, true)?;
        Ok((out, cache.expect("recorded forward keeps its cache")))
    }

    fn run(&self, input: &NetInput<T>, record: bool) -> Result<(Vec<T>, Option<Cache<T>>)> {
        self.check_input(input)?;
        let cfg = &self.cfg;
        let p = &self.params;
        let lay = &self.layout;
        let n = cfg.n_tokens();
        let e = cfg.embed_dim;
        let pl = cfg.patch_len();
        let side = cfg.volume_side;
        let cin = cfg.in_channels() * pl;

        let mut x_in = vec![T::zero(); n * cin];
        patchify_into(
            input.x_scaled,
            side,
            cfg.patch_side,
            &mut x_in,
            cin,
            0,
            |v| v,
        );
        if cfg.y_channel {
            patchify_into(input.y, side, cfg.patch_side, &mut x_in, cin, pl, |v| v);
        }
        let mut h = Vec::new();
        linear(p, lay.patch_embed, &x_in, n, &mut h);
        for (v, &q) in h.iter_mut().zip(&self.pos) {
            *v += q;
        }

        // Conditioning: timestep MLP, aux MLP, fusion.
        let t_in: Vec<T> = timestep_embedding(TIME_EMBED_SCALE * input.c_noise, e)
            .into_iter()
            .map(T::of)
            .collect();
        let (mut t1, mut temb) = (Vec::new(), Vec::new());
        linear(p, lay.t1, &t_in, 1, &mut t1);
        let t1s: Vec<T> = t1.iter().map(|&v| silu(v)).collect();
        linear(p, lay.t2, &t1s, 1, &mut temb);
        let (mut a1, mut a2, mut aemb) = (Vec::new(), Vec::new(), Vec::new());
        linear(p, lay.a1, input.aux, 1, &mut a1);
        let a1s: Vec<T> = a1.iter().map(|&v| silu(v)).collect();
        linear(p, lay.a2, &a1s, 1, &mut a2);
        let a2s: Vec<T> = a2.iter().map(|&v| silu(v)).collect();
        linear(p, lay.a3, &a2s, 1, &mut aemb);
        let cond: Vec<T> = match cfg.fusion {
            Fusion::Concat => temb.iter().chain(&aemb).copied().collect(),
            Fusion::Add => temb.iter().zip(&aemb).map(|(&a, &b)| a + b).collect(),
            Fusion::Multiply => temb.iter().zip(&aemb).map(|(&a, &b)| a * b).collect(),
        };
        let cs: Vec<T> = cond.iter().map(|&v| silu(v)).collect();

        let mut caches: Vec<BlockCache<T>> = Vec::new();
        let mut scratch = BlockCache::default();
        for bl in &lay.blocks {
            let bc = if record {
                caches.push(BlockCache::default());
                caches.last_mut().unwrap()
            } else {
                &mut scratch
            };
            self.block_forward(bl, &cs, &mut h, bc);
        }

        let mut modf = Vec::new();
        linear(p, lay.final_ada, &cs, 1, &mut modf);
        let (mut lnf, mut rstdf, mut mf) = (Vec::new(), Vec::new(), Vec::new());
        layer_norm(&h, n, e, &mut lnf, &mut rstdf);
        modulate(&lnf, &modf[..e], &modf[e..], e, &mut mf);
        let mut tok_out = Vec::new();
        linear(p, lay.head, &mf, n, &mut tok_out);
        let mut out = vec![T::zero(); cfg.n_voxels()];
        unpatchify_into(&tok_out, side, cfg.patch_side, &mut out, |v| v);

        let cache = record.then(|| Cache {
            x_in,
            t_in,
            t1,
            t1s,
            temb,
            aux: input.aux.to_vec(),
            a1,
            a1s,
            a2,
            a2s,
            aemb,
            cond,
            cs,
            blocks: caches,
            modf,
            lnf,
            rstdf,
            mf,
        });
        Ok((out, cache))
    }

    fn block_forward(&self, bl: &BlockLayout, cs: &[T], h: &mut [T], c: &mut BlockCache<T>) {
        let p = &self.params;
        let n = self.cfg.n_tokens();
        let e = self.cfg.embed_dim;
        let nh = self.cfg.n_heads;
        let d = e / nh;
        linear(p, bl.ada, cs, 1, &mut c.mods);
        let m = &c.mods;
        let (shift1, scale1, gate1) = (&m[..e], &m[e..2 * e], &m[2 * e..3 * e]);
        let (shift2, scale2, gate2) = (&m[3 * e..4 * e], &m[4 * e..5 * e], &m[5 * e..]);

        layer_norm(h, n, e, &mut c.ln1, &mut c.rstd1);
        modulate(&c.ln1, shift1, scale1, e, &mut c.m1);
        linear(p, bl.qkv, &c.m1, n, &mut c.qkv);
        c.probs.clear();
        c.probs.resize(nh * n * n, T::zero());
        c.attn_o.clear();
        c.attn_o.resize(n * e, T::zero());
        let scale = T::one() / T::of(d as f64).sqrt();
        for hd in 0..nh {
            let probs = &mut c.probs[hd * n * n..(hd + 1) * n * n];
            gemm(
                scale,
                Mat::cols_of(&c.qkv, n, 3 * e, hd * d, d),
                Mat::cols_of(&c.qkv, n, 3 * e, e + hd * d, d).t(),
                T::zero(),
                MatMut::rm(probs, n, n),
            );
            for row in probs.chunks_mut(n) {
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    s += *v;
                }
                let inv = T::one() / s;
                for v in row.iter_mut() {
                    *v *= inv;
                }
            }
            gemm(
                T::one(),
                Mat::rm(probs, n, n),
                Mat::cols_of(&c.qkv, n, 3 * e, 2 * e + hd * d, d),
                T::zero(),
                MatMut::cols_of(&mut c.attn_o, n, e, hd * d, d),
            );
        }
        linear(p, bl.proj, &c.attn_o, n, &mut c.att);
        for (row, arow) in h.chunks_mut(e).zip(c.att.chunks(e)) {
            for j in 0..e {
                row[j] += gate1[j] * arow[j];
            }
        }

        layer_norm(h, n, e, &mut c.ln2, &mut c.rstd2);
        modulate(&c.ln2, shift2, scale2, e, &mut c.m2);
        linear(p, bl.fc1, &c.m2, n, &mut c.f1);
        c.g.clear();
        c.g.extend(c.f1.iter().map(|&v| gelu(v)));
        linear(p, bl.fc2, &c.g, n, &mut c.f2);
        for (row, frow) in h.chunks_mut(e).zip(c.f2.chunks(e)) {
            for j in 0..e {
                row[j] += gate2[j] * frow[j];
            }
        }
    }

    /// Exact gradient of a scalar loss with respect to every parameter, given
    /// the loss gradient `d_out` with respect to the network output volume.
    pub fn backward(&self, cache: &Cache<T>, d_out: &[T]) -> Result<Vec<T>> {
        let cfg = &self.cfg;
        if d_out.len() != cfg.n_voxels() {
            return Err(Error::Shape(format!(
                "output gradient of length {}, expected {}",
                d_out.len(),
                cfg.n_voxels()
            )));
        }
        let p = &self.params;
        let lay = &self.layout;
        let n = cfg.n_tokens();
        let e = cfg.embed_dim;
        let pl = cfg.patch_len();
        let mut grad = vec![T::zero(); lay.total];

        let mut d_tok = vec![T::zero(); n * pl];
        patchify_into(
            d_out,
            cfg.volume_side,
            cfg.patch_side,
            &mut d_tok,
            pl,
            0,
            |v| v,
        );

        let mut dmf = Vec::new();
        linear_backward(p, &mut grad, lay.head, &cache.mf, &d_tok, n, Some(&mut dmf));
        let mut dmodf = vec![T::zero(); 2 * e];
        let mut dlnf = Vec::new();
        {
            let (dshift, dscale) = dmodf.split_at_mut(e);
            modulate_backward(
                &cache.lnf,
                &cache.modf[e..],
                &dmf,
                e,
                dshift,
                dscale,
                &mut dlnf,
            );
        }
        let mut dh = vec![T::zero(); n * e];
        layer_norm_backward(&cache.lnf, &cache.rstdf, &dlnf, e, &mut dh);
        let mut dcs = vec![T::zero(); cfg.cond_dim()];
        let mut tmp = Vec::new();
        linear_backward(
            p,
            &mut grad,
            lay.final_ada,
            &cache.cs,
            &dmodf,
            1,
            Some(&mut tmp),
        );
        add_into(&mut dcs, &tmp);

        for (bl, bc) in lay.blocks.iter().zip(&cache.blocks).rev() {
            self.block_backward(bl, bc, &cache.cs, &mut dh, &mut dcs, &mut grad);
        }

        // Patch embedding (positions are fixed).
        linear_backward(p, &mut grad, lay.patch_embed, &cache.x_in, &dh, n, None);

        // Conditioning path.
        let dcond: Vec<T> = dcs
            .iter()
            .zip(&cache.cond)
            .map(|(&g, &c)| g * silu_grad(c))
            .collect();
        let (dtemb, daemb): (Vec<T>, Vec<T>) = match cfg.fusion {
            Fusion::Concat => (dcond[..e].to_vec(), dcond[e..].to_vec()),
            Fusion::Add => (dcond.clone(), dcond),
            Fusion::Multiply => (
                dcond
                    .iter()
                    .zip(&cache.aemb)
                    .map(|(&g, &a)| g * a)
                    .collect(),
                dcond
                    .iter()
                    .zip(&cache.temb)
                    .map(|(&g, &t)| g * t)
                    .collect(),
            ),
        };
        linear_backward(p, &mut grad, lay.t2, &cache.t1s, &dtemb, 1, Some(&mut tmp));
        let dt1: Vec<T> = tmp
            .iter()
            .zip(&cache.t1)
            .map(|(&g, &x)| g * silu_grad(x))
            .collect();
        linear_backward(p, &mut grad, lay.t1, &cache.t_in, &dt1, 1, None);

        linear_backward(p, &mut grad, lay.a3, &cache.a2s, &daemb, 1, Some(&mut tmp));
        let da2: Vec<T> = tmp
            .iter()
            .zip(&cache.a2)
            .map(|(&g, &x)| g * silu_grad(x))
            .collect();
        linear_backward(p, &mut grad, lay.a2, &cache.a1s, &da2, 1, Some(&mut tmp));
        let da1: Vec<T> = tmp
            .iter()
            .zip(&cache.a1)
            .map(|(&g, &x)| g * silu_grad(x))
            .collect();
        linear_backward(p, &mut grad, lay.a1, &cache.aux, &da1, 1, None);
        Ok(grad)
    }

    fn block_backward(
        &self,
        bl: &BlockLayout,
        c: &BlockCache<T>,
        cs: &[T],
        dh: &mut [T],
        dcs: &mut [T],
        grad: &mut [T],
    ) {
        let p = &self.params;
        let n = self.cfg.n_tokens();
        let e = self.cfg.embed_dim;
        let nh = self.cfg.n_heads;
        let d = e / nh;
        let m = &c.mods;
        let (scale1, gate1) = (&m[e..2 * e], &m[2 * e..3 * e]);
        let (scale2, gate2) = (&m[4 * e..5 * e], &m[5 * e..]);
        let mut dmods = vec![T::zero(); 6 * e];

        // MLP branch: h3 = h2 + gate2 * f2.
        let mut df2 = Vec::with_capacity(n * e);
        for (drow, frow) in dh.chunks(e).zip(c.f2.chunks(e)) {
            for j in 0..e {
                dmods[5 * e + j] += drow[j] * frow[j];
                df2.push(drow[j] * gate2[j]);
            }
        }
        let mut dg = Vec::new();
        linear_backward(p, grad, bl.fc2, &c.g, &df2, n, Some(&mut dg));
        for (v, &x) in dg.iter_mut().zip(&c.f1) {
            *v *= gelu_grad(x);
        }
        let mut dm2 = Vec::new();
        linear_backward(p, grad, bl.fc1, &c.m2, &dg, n, Some(&mut dm2));
        let mut dln2 = Vec::new();
        {
            let (lo, hi) = dmods.split_at_mut(4 * e);
            modulate_backward(
                &c.ln2,
                scale2,
                &dm2,
                e,
                &mut lo[3 * e..],
                &mut hi[..e],
                &mut dln2,
            );
        }
        layer_norm_backward(&c.ln2, &c.rstd2, &dln2, e, dh);

        // Attention branch: h2 = h + gate1 * att.
        let mut datt = Vec::with_capacity(n * e);
        for (drow, arow) in dh.chunks(e).zip(c.att.chunks(e)) {
            for j in 0..e {
                dmods[2 * e + j] += drow[j] * arow[j];
                datt.push(drow[j] * gate1[j]);
            }
        }
        let mut d_o = Vec::new();
        linear_backward(p, grad, bl.proj, &c.attn_o, &datt, n, Some(&mut d_o));
        let mut dqkv = vec![T::zero(); n * 3 * e];
        let mut dp = vec![T::zero(); n * n];
        let scale = T::one() / T::of(d as f64).sqrt();
        for hd in 0..nh {
            let probs = &c.probs[hd * n * n..(hd + 1) * n * n];
            let d_oh = Mat::cols_of(&d_o, n, e, hd * d, d);
            // dV = P^T dO
            gemm(
                T::one(),
                Mat::rm(probs, n, n).t(),
                d_oh,
                T::zero(),
                MatMut::cols_of(&mut dqkv, n, 3 * e, 2 * e + hd * d, d),
            );
            // dP = dO V^T
            gemm(
                T::one(),
                d_oh,
                Mat::cols_of(&c.qkv, n, 3 * e, 2 * e + hd * d, d).t(),
                T::zero(),
                MatMut::rm(&mut dp, n, n),
            );
            for (drow, prow) in dp.chunks_mut(n).zip(probs.chunks(n)) {
                let dot = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum::<T>();
                for (dv, &pv) in drow.iter_mut().zip(prow) {
                    *dv = pv * (*dv - dot);
                }
            }
            // dQ = scale dS K ; dK = scale dS^T Q
            gemm(
                scale,
                Mat::rm(&dp, n, n),
                Mat::cols_of(&c.qkv, n, 3 * e, e + hd * d, d),
                T::zero(),
                MatMut::cols_of(&mut dqkv, n, 3 * e, hd * d, d),
            );
            gemm(
                scale,
                Mat::rm(&dp, n, n).t(),
                Mat::cols_of(&c.qkv, n, 3 * e, hd * d, d),
                T::zero(),
                MatMut::cols_of(&mut dqkv, n, 3 * e, e + hd * d, d),
            );
        }
        let mut dm1 = Vec::new();
        linear_backward(p, grad, bl.qkv, &c.m1, &dqkv, n, Some(&mut dm1));
        let mut dln1 = Vec::new();
        {
            let (lo, hi) = dmods.split_at_mut(e);
            modulate_backward(&c.ln1, scale1, &dm1, e, lo, &mut hi[..e], &mut dln1);
        }
        layer_norm_backward(&c.ln1, &c.rstd1, &dln1, e, dh);

        let mut tmp = Vec::new();
        linear_backward(p, grad, bl.ada, cs, &dmods, 1, Some(&mut tmp));
        add_into(dcs, &tmp);
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn truncated_normal(rng: &mut impl Rng) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}
