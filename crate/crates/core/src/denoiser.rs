//! Conditional noise-prediction U-Net.
//!
//! Layout for `depth = D`, widths `ch(i) = base_width * 2^i`:
//!
//! ```text
//! x_t ++ position planes ─ stem conv3x3 ─┬ down[0] (ch0) ─ pool ─ ... ─ down[D-1] ─ pool ─ mid ─┐
//!                                        │      │ skip                     │ skip               │
//! ε̂ ─ conv3x3 ─ SiLU ─ GN ─ up[0] ─ ... ─ up[D-1] ◄─ concat ◄─ upsample ◄──────────────────────┘
//! ```
//!
//! Every residual block is `GN → SiLU → conv → (+ time bias) → GN → [cond scale/shift] → SiLU → conv`
//! plus a (1x1-projected when widths differ) skip. Under [`Injection::AddAfterNorm`] the
//! condition vector is mapped by one affine layer per block to a channel-wise
//! `(scale, shift)` applied after the second norm; under [`Injection::ConcatToTime`] a single
//! affine layer maps it into the timestep embedding instead. With `spatial_condition` set, one
//! more affine layer maps `C` to a full feature map added to the bottleneck input. Conditioning
//! layers start at zero, so an untrained network (or one trained with the condition always
//! dropped) ignores `C`.
//!
//! The output adds `g(t) * x_t` with a per-channel gate `g` read off the timestep embedding
//! (also zero at init).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::RepresentationVector;
use crate::error::{Error, Result};
use crate::nn::layers::{
    add_channel_bias, add_into, avg_pool2, avg_pool2_backward, channel_bias_grad, group_count,
    modulate, modulate_backward, silu, silu_backward, silu_vec, silu_vec_backward, upsample2,
    upsample2_backward, Conv2d, GroupNorm, Linear, NormCache,
};
use crate::nn::{Act, ParamStore, Scalar};
use crate::tensor::Tensor3;

/// Number of fixed coordinate planes appended to the image before the stem.
pub const POSITION_PLANES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Injection {
    AddAfterNorm,
    ConcatToTime,
}

fn default_num_timesteps() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub image_channels: usize,
    pub image_size: usize,
    pub base_width: usize,
    pub depth: usize,
    pub cond_dim: usize,
    pub time_embed_dim: usize,
    pub injection: Injection,
    /// Largest timestep the network accepts.
    #[serde(default = "default_num_timesteps")]
    pub num_timesteps: usize,
    /// Also map `C` to a full feature map added at the bottleneck input, so the
    /// condition can carry spatial layout rather than channel-wise statistics only.
    #[serde(default)]
    pub spatial_condition: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            image_size: 32,
            base_width: 64,
            depth: 2,
            cond_dim: 192,
            time_embed_dim: 128,
            injection: Injection::AddAfterNorm,
            num_timesteps: 1000,
            spatial_condition: false,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_channels == 0 || self.image_size == 0 || self.base_width == 0 {
            return bad("image_channels, image_size and base_width must be at least 1".into());
        }
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if self.depth >= usize::BITS as usize || !self.image_size.is_multiple_of(1usize << self.depth) {
            return bad(format!(
                "image_size {} is not divisible by 2^depth = 2^{}",
                self.image_size, self.depth
            ));
        }
        if self.cond_dim == 0 {
            return bad("cond_dim must be at least 1".into());
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            return bad(format!("time_embed_dim must be even and >= 2, got {}", self.time_embed_dim));
        }
        if self.num_timesteps == 0 {
            return bad("num_timesteps must be at least 1".into());
        }
        Ok(())
    }

    /// Channel width at resolution level `level`.
    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Side of the lowest-resolution feature map.
    pub fn bottleneck_size(&self) -> usize {
        self.image_size >> self.depth
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        [self.image_channels, self.image_size, self.image_size]
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    cond: Option<Linear>,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    x: Act<T>,
    n1: NormCache<T>,
    a1: Act<T>,
    n2: NormCache<T>,
    a2: Act<T>,
    mods: Option<Vec<T>>,
    modulated: Option<Act<T>>,
    /// SiLU outputs feeding `conv1` and `conv2`.
    s1: Act<T>,
    s2: Act<T>,
}

impl ResBlock {
    fn forward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        x: Act<T>,
        tact: &[T],
        cond: Option<&[T]>,
    ) -> (Act<T>, BlockCache<T>) {
        let b = x.b;
        let (a1, n1) = self.norm1.forward(p, &x);
        let s1 = silu(&a1);
        let mut h1 = self.conv1.forward(p, &s1);
        add_channel_bias(&mut h1, &self.time.forward(p, tact, b));
        let (a2, n2) = self.norm2.forward(p, &h1);
        drop(h1);
        let (mods, modulated) = match (&self.cond, cond) {
            (Some(layer), Some(c)) => {
                let mods = layer.forward(p, c, b);
                let m = modulate(&a2, &mods);
                (Some(mods), Some(m))
            }
            _ => (None, None),
        };
        let s2 = silu(modulated.as_ref().unwrap_or(&a2));
        let mut out = self.conv2.forward(p, &s2);
        match &self.skip {
            Some(proj) => out.add_assign(&proj.forward(p, &x)),
            None => out.add_assign(&x),
        }
        (out, BlockCache { x, n1, a1, n2, a2, mods, modulated, s1, s2 })
    }

    #[allow(clippy::too_many_arguments)]
    fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        cache: &BlockCache<T>,
        dout: &Act<T>,
        tact: &[T],
        cond: Option<&[T]>,
        g: &mut ParamStore<T>,
        dtact: &mut [T],
        dcond: &mut [T],
    ) -> Act<T> {
        let b = dout.b;
        let pre2 = cache.modulated.as_ref().unwrap_or(&cache.a2);
        let ds2 = self.conv2.backward(p, &cache.s2, dout, g, true).expect("dx requested");
        let dpre2 = silu_backward(pre2, &ds2);
        let da2 = match (&cache.mods, &self.cond, cond) {
            (Some(mods), Some(layer), Some(c)) => {
                let (da2, dm) = modulate_backward(&cache.a2, mods, &dpre2);
                add_into(dcond, &layer.backward(p, c, &dm, b, g));
                da2
            }
            _ => dpre2,
        };
        let dh1 = self.norm2.backward(p, &cache.n2, &da2, g);
        add_into(dtact, &self.time.backward(p, tact, &channel_bias_grad(&dh1), b, g));
        let ds1 = self.conv1.backward(p, &cache.s1, &dh1, g, true).expect("dx requested");
        let mut dx = self.norm1.backward(p, &cache.n1, &silu_backward(&cache.a1, &ds1), g);
        match &self.skip {
            Some(proj) => dx.add_assign(&proj.backward(p, &cache.x, dout, g, true).expect("dx requested")),
            None => dx.add_assign(dout),
        }
        dx
    }
}

/// Parameter layout; independent of the element type.
#[derive(Debug, Clone)]
struct Network {
    time1: Linear,
    time2: Linear,
    cond_time: Option<Linear>,
    cond_map: Option<Linear>,
    stem: Conv2d,
    down: Vec<ResBlock>,
    mid: ResBlock,
    up: Vec<ResBlock>,
    head_norm: GroupNorm,
    head_conv: Conv2d,
    input_gate: Linear,
}

struct Builder {
    store: ParamStore<f64>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn uniform(&mut self, n: usize, bound: f64) -> Vec<f64> {
        (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect()
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel: usize) -> Conv2d {
        let fan_in = cin * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = self.uniform(cout * fan_in, bound);
        let b = self.uniform(cout, bound);
        Conv2d {
            weight: self.store.push(format!("{name}.weight"), vec![cout, cin, kernel, kernel], w),
            bias: self.store.push(format!("{name}.bias"), vec![cout], b),
            cin,
            cout,
            kernel,
        }
    }

    /// `zero` gives an all-zero layer, used for the conditioning projections so that a
    /// freshly built network ignores `C`.
    fn linear(&mut self, name: &str, din: usize, dout: usize, zero: bool) -> Linear {
        let bound = 1.0 / (din as f64).sqrt();
        let (w, b) = if zero {
            (vec![0.0; dout * din], vec![0.0; dout])
        } else {
            (self.uniform(dout * din, bound), self.uniform(dout, bound))
        };
        Linear {
            weight: self.store.push(format!("{name}.weight"), vec![dout, din], w),
            bias: self.store.push(format!("{name}.bias"), vec![dout], b),
            din,
            dout,
        }
    }

    fn norm(&mut self, name: &str, channels: usize) -> GroupNorm {
        GroupNorm {
            gamma: self.store.push(format!("{name}.gamma"), vec![channels], vec![1.0; channels]),
            beta: self.store.push(format!("{name}.beta"), vec![channels], vec![0.0; channels]),
            channels,
            groups: group_count(channels),
        }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize, cfg: &DenoiserConfig) -> ResBlock {
        let norm1 = self.norm(&format!("{name}.norm1"), cin);
        let conv1 = self.conv(&format!("{name}.conv1"), cin, cout, 3);
        let time = self.linear(&format!("{name}.time"), cfg.time_embed_dim, cout, false);
        let norm2 = self.norm(&format!("{name}.norm2"), cout);
        let cond = (cfg.injection == Injection::AddAfterNorm)
            .then(|| self.linear(&format!("{name}.cond"), cfg.cond_dim, 2 * cout, true));
        let conv2 = self.conv(&format!("{name}.conv2"), cout, cout, 3);
        let skip = (cin != cout).then(|| self.conv(&format!("{name}.skip"), cin, cout, 1));
        ResBlock { norm1, conv1, time, norm2, cond, conv2, skip }
    }
}

fn build_network(cfg: &DenoiserConfig, seed: u64) -> (Network, ParamStore<f64>) {
    let mut b = Builder { store: ParamStore::new(), rng: ChaCha8Rng::seed_from_u64(seed) };
    let e = cfg.time_embed_dim;
    let time1 = b.linear("time.fc1", e, e, false);
    let time2 = b.linear("time.fc2", e, e, false);
    let cond_time = (cfg.injection == Injection::ConcatToTime)
        .then(|| b.linear("cond_time", cfg.cond_dim, e, true));
    let s = cfg.bottleneck_size();
    let cond_map = cfg
        .spatial_condition
        .then(|| b.linear("cond_map", cfg.cond_dim, cfg.width(cfg.depth - 1) * s * s, true));
    let stem = b.conv("stem", cfg.image_channels + POSITION_PLANES, cfg.width(0), 3);
    let down = (0..cfg.depth)
        .map(|i| {
            let cin = if i == 0 { cfg.width(0) } else { cfg.width(i - 1) };
            b.block(&format!("down{i}"), cin, cfg.width(i), cfg)
        })
        .collect();
    let mid = b.block("mid", cfg.width(cfg.depth - 1), cfg.width(cfg.depth), cfg);
    let up = (0..cfg.depth)
        .rev()
        .map(|i| b.block(&format!("up{i}"), cfg.width(i + 1) + cfg.width(i), cfg.width(i), cfg))
        .collect();
    let head_norm = b.norm("head.norm", cfg.width(0));
    let head_conv = b.conv("head.conv", cfg.width(0), cfg.image_channels, 3);
    let input_gate = b.linear("head.input_gate", e, cfg.image_channels, true);
    let net = Network { time1, time2, cond_time, cond_map, stem, down, mid, up, head_norm, head_conv, input_gate };
    (net, b.store)
}

/// Sinusoidal timestep features: `[sin(t f_k) .., cos(t f_k) ..]`.
pub fn timestep_features(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    out
}

/// Adds `m[b][c][pixel]` (one flat row per batch item) to `h`.
fn add_feature_map<T: Scalar>(h: &mut Act<T>, m: &[T]) {
    let (b, hw) = (h.b, h.hw());
    let row = h.c * hw;
    for ci in 0..h.c {
        for bi in 0..b {
            let dst = &mut h.data[(ci * b + bi) * hw..][..hw];
            add_into(dst, &m[bi * row + ci * hw..][..hw]);
        }
    }
}

fn feature_map_grad<T: Scalar>(dh: &Act<T>) -> Vec<T> {
    let (b, hw) = (dh.b, dh.hw());
    let mut out = Vec::with_capacity(dh.data.len());
    for bi in 0..b {
        for ci in 0..dh.c {
            out.extend_from_slice(&dh.data[(ci * b + bi) * hw..][..hw]);
        }
    }
    out
}

/// `y[c] += gate[b][c] * x[c]`: a per-timestep, per-channel skip from `x_t` to the output.
/// At high noise levels ε is almost `x_t` itself, which the gate provides directly.
fn add_gated_input<T: Scalar>(y: &mut Act<T>, x: &Act<T>, gate: &[T]) {
    let (b, hw) = (y.b, y.hw());
    for ci in 0..y.c {
        for bi in 0..b {
            let g = gate[bi * y.c + ci];
            let off = (ci * b + bi) * hw;
            for (o, &v) in y.data[off..off + hw].iter_mut().zip(&x.data[off..off + hw]) {
                *o = *o + g * v;
            }
        }
    }
}

/// Gradient of [`add_gated_input`] w.r.t. the gate; `xin` may carry extra trailing channels.
fn gated_input_grad<T: Scalar>(dy: &Act<T>, xin: &Act<T>) -> Vec<T> {
    let (b, hw) = (dy.b, dy.hw());
    let mut out = vec![T::zero(); b * dy.c];
    for ci in 0..dy.c {
        for bi in 0..b {
            let off = (ci * b + bi) * hw;
            out[bi * dy.c + ci] =
                dy.data[off..off + hw].iter().zip(&xin.data[off..off + hw]).fold(T::zero(), |acc, (&d, &v)| acc + d * v);
        }
    }
    out
}

/// Intermediate values kept for the backward pass.
pub struct ForwardCache<T> {
    batch: usize,
    temb0: Vec<T>,
    time_hidden: Vec<T>,
    temb: Vec<T>,
    tact: Vec<T>,
    cond: Option<Vec<T>>,
    xin: Act<T>,
    down: Vec<BlockCache<T>>,
    mid: BlockCache<T>,
    up: Vec<(BlockCache<T>, usize)>,
    head_n: NormCache<T>,
    head_a: Act<T>,
}

/// Parameter and (optionally) condition gradients of a scalar objective.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub params: ParamStore<T>,
    /// `[batch][cond_dim]`; `None` when the forward pass ran without a condition.
    pub condition: Option<Vec<T>>,
}

/// A built denoiser: configuration plus parameters.
#[derive(Debug, Clone)]
pub struct Denoiser<T: Scalar = f32> {
    config: DenoiserConfig,
    net: Network,
    params: ParamStore<T>,
}

/// The denoiser used for training and sampling.
pub type DenoiserHandle = Denoiser<f32>;

/// Builds a denoiser with deterministic initialization for `(config, seed)`.
pub fn build_denoiser(config: &DenoiserConfig, seed: u64) -> Result<Denoiser> {
    Denoiser::build(config, seed)
}

impl<T: Scalar> Denoiser<T> {
    pub fn build(config: &DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (net, store) = build_network(config, seed);
        Ok(Self { config: config.clone(), net, params: store.cast() })
    }

    /// Rebuilds a denoiser around previously exported parameters.
    pub fn from_params(config: &DenoiserConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let (net, layout) = build_network(config, 0);
        if !layout.same_layout(&params) {
            return Err(Error::Config("parameter names or shapes do not match the configuration".into()));
        }
        if !params.all_finite() {
            return Err(Error::Config("parameters contain non-finite values".into()));
        }
        Ok(Self { config: config.clone(), net, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.numel()
    }

    /// Same network in another element type.
    pub fn cast<U: Scalar>(&self) -> Denoiser<U> {
        Denoiser { config: self.config.clone(), net: self.net.clone(), params: self.params.cast() }
    }

    /// Number of network sites where the condition enters. The spatial map shares the
    /// bottleneck site with the mid block.
    pub fn count_receptive_conditioning(&self) -> usize {
        match self.config.injection {
            Injection::ConcatToTime => 1 + usize::from(self.net.cond_map.is_some()),
            Injection::AddAfterNorm => {
                self.net.down.iter().chain([&self.net.mid]).chain(&self.net.up).filter(|b| b.cond.is_some()).count()
            }
        }
    }

    fn check_inputs(&self, x: &Act<T>, t: &[usize], cond: Option<&[T]>) -> Result<()> {
        let cfg = &self.config;
        let expected = [cfg.image_channels, cfg.image_size, cfg.image_size];
        if [x.c, x.h, x.w] != expected {
            return Err(Error::Shape { expected: expected.to_vec(), got: vec![x.c, x.h, x.w] });
        }
        if t.len() != x.b {
            return Err(Error::InvalidArgument(format!("{} timesteps for batch of {}", t.len(), x.b)));
        }
        if let Some(&bad) = t.iter().find(|&&v| v < 1 || v > cfg.num_timesteps) {
            return Err(Error::Timestep { t: bad, min: 1, max: cfg.num_timesteps });
        }
        if let Some(c) = cond {
            if c.len() != x.b * cfg.cond_dim {
                return Err(Error::Dimension { expected: cfg.cond_dim, got: c.len() / x.b.max(1) });
            }
        }
        Ok(())
    }

    fn with_position_planes(&self, x: &Act<T>) -> Act<T> {
        let (h, w) = (x.h, x.w);
        let mut planes = Act::zeros(POSITION_PLANES, x.b, h, w);
        let hw = h * w;
        for bi in 0..x.b {
            for i in 0..h {
                for j in 0..w {
                    planes.data[bi * hw + i * w + j] = T::of(2.0 * (j as f64 + 0.5) / w as f64 - 1.0);
                    planes.data[(x.b + bi) * hw + i * w + j] =
                        T::of(2.0 * (i as f64 + 0.5) / h as f64 - 1.0);
                }
            }
        }
        x.clone().concat(&planes)
    }

    /// Batched forward pass. `x` holds `x_t` for each item; `cond` is `[batch][cond_dim]`
    /// or `None` to bypass the conditioning path entirely.
    pub fn forward(&self, x: &Act<T>, t: &[usize], cond: Option<&[T]>) -> Result<(Act<T>, ForwardCache<T>)> {
        self.check_inputs(x, t, cond)?;
        let p = &self.params;
        let net = &self.net;
        let b = x.b;
        let e = self.config.time_embed_dim;
        let temb0: Vec<T> = t.iter().flat_map(|&ti| timestep_features(ti, e)).map(T::of).collect();
        let time_hidden = net.time1.forward(p, &temb0, b);
        let mut temb = net.time2.forward(p, &silu_vec(&time_hidden), b);
        if let (Some(layer), Some(c)) = (&net.cond_time, cond) {
            add_into(&mut temb, &layer.forward(p, c, b));
        }
        let tact = silu_vec(&temb);

        let xin = self.with_position_planes(x);
        let mut h = net.stem.forward(p, &xin);
        let mut down = Vec::with_capacity(net.down.len());
        let mut skips = Vec::with_capacity(net.down.len());
        for block in &net.down {
            let (out, cache) = block.forward(p, h, &tact, cond);
            down.push(cache);
            h = avg_pool2(&out);
            skips.push(out);
        }
        if let (Some(layer), Some(c)) = (&net.cond_map, cond) {
            add_feature_map(&mut h, &layer.forward(p, c, b));
        }
        let (mut h, mid) = net.mid.forward(p, h, &tact, cond);
        let mut up = Vec::with_capacity(net.up.len());
        for block in &net.up {
            let skip = skips.pop().expect("one skip per level");
            let lifted = upsample2(&h);
            let lifted_c = lifted.c;
            let (out, cache) = block.forward(p, lifted.concat(&skip), &tact, cond);
            up.push((cache, lifted_c));
            h = out;
        }
        let (head_a, head_n) = net.head_norm.forward(p, &h);
        let mut y = net.head_conv.forward(p, &silu(&head_a));
        add_gated_input(&mut y, x, &net.input_gate.forward(p, &tact, b));
        let cache = ForwardCache {
            batch: b,
            temb0,
            time_hidden,
            temb,
            tact,
            cond: cond.map(<[T]>::to_vec),
            xin,
            down,
            mid,
            up,
            head_n,
            head_a,
        };
        Ok((y, cache))
    }

    /// Backpropagates `dout` (gradient of a scalar objective w.r.t. the output).
    pub fn backward(&self, cache: &ForwardCache<T>, dout: &Act<T>) -> Gradients<T> {
        let p = &self.params;
        let net = &self.net;
        let b = cache.batch;
        let mut g = p.zeros_like();
        let mut dtact = vec![T::zero(); cache.tact.len()];
        let mut dcond = vec![T::zero(); cache.cond.as_ref().map_or(0, Vec::len)];
        let cond = cache.cond.as_deref();

        let dgate = gated_input_grad(dout, &cache.xin);
        add_into(&mut dtact, &net.input_gate.backward(p, &cache.tact, &dgate, b, &mut g));
        let ds = net.head_conv.backward(p, &silu(&cache.head_a), dout, &mut g, true).expect("dx");
        let mut dh = net.head_norm.backward(p, &cache.head_n, &silu_backward(&cache.head_a, &ds), &mut g);

        let mut dskips = Vec::with_capacity(net.up.len());
        for (block, (bc, lifted_c)) in net.up.iter().zip(&cache.up).rev() {
            let dcat = block.backward(p, bc, &dh, &cache.tact, cond, &mut g, &mut dtact, &mut dcond);
            let (dlifted, dskip) = dcat.split(*lifted_c);
            dskips.push(dskip);
            dh = upsample2_backward(&dlifted);
        }
        dh = net.mid.backward(p, &cache.mid, &dh, &cache.tact, cond, &mut g, &mut dtact, &mut dcond);
        if let (Some(layer), Some(c)) = (&net.cond_map, cond) {
            add_into(&mut dcond, &layer.backward(p, c, &feature_map_grad(&dh), b, &mut g));
        }
        // dskips[k] belongs to down level k (up ran from the deepest level outward).
        for (level, (block, bc)) in net.down.iter().zip(&cache.down).enumerate().rev() {
            let mut dout_level = avg_pool2_backward(&dh);
            dout_level.add_assign(&dskips[level]);
            dh = block.backward(p, bc, &dout_level, &cache.tact, cond, &mut g, &mut dtact, &mut dcond);
        }
        net.stem.backward(p, &cache.xin, &dh, &mut g, false);

        let dtemb = silu_vec_backward(&cache.temb, &dtact);
        if let (Some(layer), Some(c)) = (&net.cond_time, cond) {
            add_into(&mut dcond, &layer.backward(p, c, &dtemb, b, &mut g));
        }
        let dhidden = net.time2.backward(p, &silu_vec(&cache.time_hidden), &dtemb, b, &mut g);
        net.time1.backward(p, &cache.temb0, &silu_vec_backward(&cache.time_hidden, &dhidden), b, &mut g);

        Gradients { params: g, condition: cond.map(|_| dcond) }
    }

    /// Packs `(C, H, W)` tensors into a batch activation.
    pub fn pack(&self, xs: &[&Tensor3]) -> Result<Act<T>> {
        let [c, h, w] = self.config.sample_shape();
        let mut act = Act::zeros(c, xs.len(), h, w);
        let hw = h * w;
        for (bi, x) in xs.iter().enumerate() {
            if x.shape() != [c, h, w] {
                return Err(Error::Shape { expected: vec![c, h, w], got: x.shape().to_vec() });
            }
            for ci in 0..c {
                let dst = &mut act.data[(ci * xs.len() + bi) * hw..][..hw];
                for (d, s) in dst.iter_mut().zip(&x.data()[ci * hw..(ci + 1) * hw]) {
                    *d = T::of(*s);
                }
            }
        }
        Ok(act)
    }

    /// Splits a batch activation back into `(C, H, W)` tensors.
    pub fn unpack(act: &Act<T>) -> Vec<Tensor3> {
        let hw = act.hw();
        (0..act.b)
            .map(|bi| {
                let mut data = Vec::with_capacity(act.c * hw);
                for ci in 0..act.c {
                    data.extend(act.data[(ci * act.b + bi) * hw..][..hw].iter().map(|v| v.f64()));
                }
                Tensor3::new([act.c, act.h, act.w], data).expect("shape")
            })
            .collect()
    }

    fn pack_conditions(&self, conds: &[&RepresentationVector]) -> Result<Vec<T>> {
        let d = self.config.cond_dim;
        let mut out = Vec::with_capacity(conds.len() * d);
        for c in conds {
            if c.dim() != d {
                return Err(Error::Dimension { expected: d, got: c.dim() });
            }
            out.extend(c.values().iter().map(|&v| T::of(v)));
        }
        Ok(out)
    }

    /// Predicts ε for a batch; `conds` of `None` bypasses the conditioning path.
    pub fn predict_batch(
        &self,
        xs: &[&Tensor3],
        ts: &[usize],
        conds: Option<&[&RepresentationVector]>,
    ) -> Result<Vec<Tensor3>> {
        let x = self.pack(xs)?;
        let cond = conds.map(|c| self.pack_conditions(c)).transpose()?;
        if let Some(c) = conds {
            if c.len() != xs.len() {
                return Err(Error::InvalidArgument(format!("{} conditions for batch of {}", c.len(), xs.len())));
            }
        }
        let (y, _) = self.forward(&x, ts, cond.as_deref())?;
        Ok(Self::unpack(&y))
    }

    /// Predicts ε for a single `x_t`.
    pub fn predict_noise(&self, x_t: &Tensor3, t: usize, condition: &RepresentationVector) -> Result<Tensor3> {
        Ok(self.predict_batch(&[x_t], &[t], Some(&[condition]))?.remove(0))
    }

    /// Prediction with the conditioning path removed.
    pub fn predict_noise_unconditioned(&self, x_t: &Tensor3, t: usize) -> Result<Tensor3> {
        Ok(self.predict_batch(&[x_t], &[t], None)?.remove(0))
    }

    /// Mean-squared ε loss over a batch and its gradients.
    pub fn loss_and_grad(
        &self,
        x_t: &Act<T>,
        t: &[usize],
        cond: Option<&[T]>,
        eps: &Act<T>,
    ) -> Result<(f64, Gradients<T>)> {
        let (y, cache) = self.forward(x_t, t, cond)?;
        let n = y.data.len() as f64;
        let mut dy = y.clone();
        let mut loss = 0.0;
        let scale = T::of(2.0 / n);
        for (d, (p, e)) in dy.data.iter_mut().zip(y.data.iter().zip(&eps.data)) {
            let diff = *p - *e;
            loss += diff.f64() * diff.f64();
            *d = diff * scale;
        }
        Ok((loss / n, self.backward(&cache, &dy)))
    }
}
