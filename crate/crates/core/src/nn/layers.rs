//! Layer primitives with hand-written backward passes.
//!
//! Activations are stored channel-major, `[channels][batch][height][width]`,
//! so a convolution over the whole batch is a single matrix product and
//! channel concatenation is a plain append.

use super::params::{ParamId, ParamStore};
use super::scalar::{gemm, gemm_strided, Mat, Scalar};

/// Batch of feature maps in `[c][b][h][w]` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Act<T> {
    pub c: usize,
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Act<T> {
    pub fn zeros(c: usize, b: usize, h: usize, w: usize) -> Self {
        Self { c, b, h, w, data: vec![T::zero(); c * b * h * w] }
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    /// Elements per channel (batch times spatial).
    pub fn plane(&self) -> usize {
        self.b * self.h * self.w
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        (self.c, self.b, self.h, self.w) == (other.c, other.b, other.h, other.w)
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a = *a + *b);
    }

    /// Appends `other`'s channels after this one's.
    pub fn concat(mut self, other: &Self) -> Self {
        debug_assert_eq!((self.b, self.h, self.w), (other.b, other.h, other.w));
        self.data.extend_from_slice(&other.data);
        self.c += other.c;
        self
    }

    /// Splits channels at `first` into two activations.
    pub fn split(&self, first: usize) -> (Self, Self) {
        let cut = first * self.plane();
        (
            Self { c: first, b: self.b, h: self.h, w: self.w, data: self.data[..cut].to_vec() },
            Self {
                c: self.c - first,
                b: self.b,
                h: self.h,
                w: self.w,
                data: self.data[cut..].to_vec(),
            },
        )
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    x.sigmoid()
}

pub fn silu<T: Scalar>(x: &Act<T>) -> Act<T> {
    Act { c: x.c, b: x.b, h: x.h, w: x.w, data: silu_vec(&x.data) }
}

/// Gradient of SiLU given its input `x`.
pub fn silu_backward<T: Scalar>(x: &Act<T>, dy: &Act<T>) -> Act<T> {
    Act { c: x.c, b: x.b, h: x.h, w: x.w, data: silu_vec_backward(&x.data, &dy.data) }
}

pub fn silu_vec<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

pub fn silu_vec_backward<T: Scalar>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (T::one() + v * (T::one() - s))
        })
        .collect()
}

/// Columns per im2col chunk; keeps the patch buffer near cache size.
const CHUNK_COLUMNS: usize = 1024;

/// Batch items `b0..b0 + nb` as a `[cin * 9][nb * hw]` patch matrix, overwriting `cols`.
fn im2col3<T: Scalar>(x: &Act<T>, b0: usize, nb: usize, cols: &mut [T]) {
    let (h, w, hw) = (x.h, x.w, x.hw());
    let n = nb * hw;
    for ci in 0..x.c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * n..][..n];
                for bi in 0..nb {
                    let src = &x.data[(ci * x.b + b0 + bi) * hw..][..hw];
                    let dst = &mut row[bi * hw..][..hw];
                    for i in 0..h {
                        let si = i as isize + ky as isize - 1;
                        let drow = &mut dst[i * w..][..w];
                        if si < 0 || si >= h as isize {
                            drow.fill(T::zero());
                            continue;
                        }
                        let srow = &src[si as usize * w..][..w];
                        match kx {
                            0 => {
                                drow[0] = T::zero();
                                drow[1..].copy_from_slice(&srow[..w - 1]);
                            }
                            1 => drow.copy_from_slice(srow),
                            _ => {
                                drow[..w - 1].copy_from_slice(&srow[1..]);
                                drow[w - 1] = T::zero();
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]: accumulates `cols` into batch items `b0..b0 + nb` of `x`.
fn col2im3<T: Scalar>(cols: &[T], x: &mut Act<T>, b0: usize, nb: usize) {
    let (h, w, hw, b) = (x.h, x.w, x.hw(), x.b);
    let n = nb * hw;
    for ci in 0..x.c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * n..][..n];
                for bi in 0..nb {
                    let src = &row[bi * hw..][..hw];
                    let dst = &mut x.data[(ci * b + b0 + bi) * hw..][..hw];
                    for i in 0..h {
                        let di = i as isize + ky as isize - 1;
                        if di < 0 || di >= h as isize {
                            continue;
                        }
                        let srow = &src[i * w..][..w];
                        let drow = &mut dst[di as usize * w..][..w];
                        let (d, s) = match kx {
                            0 => (&mut drow[..w - 1], &srow[1..]),
                            1 => (&mut drow[..], srow),
                            _ => (&mut drow[1..], &srow[..w - 1]),
                        };
                        d.iter_mut().zip(s).for_each(|(a, v)| *a = *a + *v);
                    }
                }
            }
        }
    }
}

/// Square convolution with stride 1 and "same" zero padding; kernel 1 or 3.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn patch(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Act<T>) -> Act<T> {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (n, hw) = (x.plane(), x.hw());
        let mut y = Act::zeros(self.cout, x.b, x.h, x.w);
        let bias = p.get(self.bias);
        for (co, row) in y.data.chunks_mut(n).enumerate() {
            row.iter_mut().for_each(|v| *v = bias[co]);
        }
        let wmat = Mat::new(p.get(self.weight), self.cout, self.patch());
        if self.kernel == 1 {
            gemm(wmat, Mat::new(&x.data, self.cin, n), T::one(), &mut y.data);
            return y;
        }
        let step = chunk_size(x);
        let mut cols = vec![T::zero(); self.patch() * step * hw];
        for b0 in (0..x.b).step_by(step) {
            let nb = step.min(x.b - b0);
            let cols = &mut cols[..self.patch() * nb * hw];
            im2col3(x, b0, nb, cols);
            let out = &mut y.data[b0 * hw..];
            gemm_strided(wmat, Mat::new(cols, self.patch(), nb * hw), T::one(), out, n);
        }
        y
    }

    /// Accumulates weight/bias gradients into `g`; returns the input gradient when asked.
    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        x: &Act<T>,
        dy: &Act<T>,
        g: &mut ParamStore<T>,
        need_dx: bool,
    ) -> Option<Act<T>> {
        let (n, hw) = (x.plane(), x.hw());
        {
            let db = g.get_mut(self.bias);
            for (co, row) in dy.data.chunks(n).enumerate() {
                db[co] = row.iter().fold(db[co], |a, &v| a + v);
            }
        }
        let wmat = Mat::new(p.get(self.weight), self.cout, self.patch());
        if self.kernel == 1 {
            let dyt = Mat::new(&dy.data, self.cout, n);
            gemm(dyt, Mat::new(&x.data, self.cin, n).t(), T::one(), g.get_mut(self.weight));
            return need_dx.then(|| {
                let mut dx = Act::zeros(x.c, x.b, x.h, x.w);
                gemm(wmat.t(), dyt, T::zero(), &mut dx.data);
                dx
            });
        }
        let step = chunk_size(x);
        let mut cols = vec![T::zero(); self.patch() * step * hw];
        let mut dx = need_dx.then(|| Act::zeros(x.c, x.b, x.h, x.w));
        for b0 in (0..x.b).step_by(step) {
            let nb = step.min(x.b - b0);
            let cols = &mut cols[..self.patch() * nb * hw];
            let dyc = Mat::strided(&dy.data[b0 * hw..], self.cout, nb * hw, n);
            im2col3(x, b0, nb, cols);
            gemm(dyc, Mat::new(cols, self.patch(), nb * hw).t(), T::one(), g.get_mut(self.weight));
            if let Some(dx) = dx.as_mut() {
                gemm(wmat.t(), dyc, T::zero(), cols);
                col2im3(cols, dx, b0, nb);
            }
        }
        dx
    }
}

fn chunk_size<T: Scalar>(x: &Act<T>) -> usize {
    (CHUNK_COLUMNS / x.hw().max(1)).clamp(1, x.b.max(1))
}

/// Group normalization with per-channel affine parameters.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub groups: usize,
}

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct NormCache<T> {
    xhat: Act<T>,
    /// Reciprocal std per (batch, group).
    rstd: Vec<T>,
}

impl GroupNorm {
    fn group_channels(&self) -> usize {
        self.channels / self.groups
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Act<T>) -> (Act<T>, NormCache<T>) {
        assert_eq!(x.c, self.channels, "norm channels");
        let (hw, b, cg) = (x.hw(), x.b, self.group_channels());
        let count = T::of((cg * hw) as f64);
        let eps = T::of(NORM_EPS);
        let mut xhat = Act::zeros(x.c, b, x.h, x.w);
        let mut rstd = vec![T::zero(); b * self.groups];
        for g in 0..self.groups {
            for bi in 0..b {
                let planes = (g * cg..(g + 1) * cg).map(|c| (c * b + bi) * hw);
                let mut mean = T::zero();
                for off in planes.clone() {
                    mean = x.data[off..off + hw].iter().fold(mean, |a, &v| a + v);
                }
                mean = mean / count;
                let mut var = T::zero();
                for off in planes.clone() {
                    var = x.data[off..off + hw].iter().fold(var, |a, &v| {
                        let d = v - mean;
                        a + d * d
                    });
                }
                var = var / count;
                let r = T::one() / (var + eps).sqrt();
                rstd[bi * self.groups + g] = r;
                for off in planes {
                    for k in off..off + hw {
                        xhat.data[k] = (x.data[k] - mean) * r;
                    }
                }
            }
        }
        let (gamma, beta) = (p.get(self.gamma), p.get(self.beta));
        let mut y = xhat.clone();
        let plane = x.plane();
        for (c, row) in y.data.chunks_mut(plane).enumerate() {
            row.iter_mut().for_each(|v| *v = *v * gamma[c] + beta[c]);
        }
        (y, NormCache { xhat, rstd })
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        cache: &NormCache<T>,
        dy: &Act<T>,
        g: &mut ParamStore<T>,
    ) -> Act<T> {
        let xhat = &cache.xhat;
        let (hw, b, cg, plane) = (xhat.hw(), xhat.b, self.group_channels(), xhat.plane());
        let gamma = p.get(self.gamma);
        {
            let mut dgamma = vec![T::zero(); self.channels];
            let mut dbeta = vec![T::zero(); self.channels];
            for c in 0..self.channels {
                let (dyc, xc) = (&dy.data[c * plane..][..plane], &xhat.data[c * plane..][..plane]);
                for (a, v) in dyc.iter().zip(xc) {
                    dgamma[c] = dgamma[c] + *a * *v;
                    dbeta[c] = dbeta[c] + *a;
                }
            }
            add_into(g.get_mut(self.gamma), &dgamma);
            add_into(g.get_mut(self.beta), &dbeta);
        }
        let count = T::of((cg * hw) as f64);
        let mut dx = Act::zeros(xhat.c, b, xhat.h, xhat.w);
        for grp in 0..self.groups {
            for bi in 0..b {
                let r = cache.rstd[bi * self.groups + grp];
                let chans = grp * cg..(grp + 1) * cg;
                let (mut s1, mut s2) = (T::zero(), T::zero());
                for c in chans.clone() {
                    let off = (c * b + bi) * hw;
                    for k in off..off + hw {
                        let d = dy.data[k] * gamma[c];
                        s1 = s1 + d;
                        s2 = s2 + d * xhat.data[k];
                    }
                }
                let (m1, m2) = (s1 / count, s2 / count);
                for c in chans {
                    let off = (c * b + bi) * hw;
                    for k in off..off + hw {
                        let d = dy.data[k] * gamma[c];
                        dx.data[k] = r * (d - m1 - xhat.data[k] * m2);
                    }
                }
            }
        }
        dx
    }
}

/// Largest group count not above 8 that divides `channels`.
pub fn group_count(channels: usize) -> usize {
    (1..=8.min(channels)).rev().find(|&g| channels.is_multiple_of(g)).unwrap_or(1)
}

/// Dense layer on row-major `[batch][in]` inputs.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &[T], batch: usize) -> Vec<T> {
        assert_eq!(x.len(), batch * self.din, "linear input size");
        let bias = p.get(self.bias);
        let mut y: Vec<T> = (0..batch).flat_map(|_| bias.iter().copied()).collect();
        gemm(
            Mat::new(x, batch, self.din),
            Mat::new(p.get(self.weight), self.dout, self.din).t(),
            T::one(),
            &mut y,
        );
        y
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        x: &[T],
        dy: &[T],
        batch: usize,
        g: &mut ParamStore<T>,
    ) -> Vec<T> {
        {
            let db = g.get_mut(self.bias);
            for row in dy.chunks(self.dout) {
                add_into(db, row);
            }
        }
        let dyt = Mat::new(dy, batch, self.dout);
        gemm(dyt.t(), Mat::new(x, batch, self.din), T::one(), g.get_mut(self.weight));
        let mut dx = vec![T::zero(); batch * self.din];
        gemm(dyt, Mat::new(p.get(self.weight), self.dout, self.din), T::zero(), &mut dx);
        dx
    }
}

pub fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a = *a + *b);
}

/// Adds `bias[b][c]` to every pixel of channel `c` in batch item `b`.
pub fn add_channel_bias<T: Scalar>(x: &mut Act<T>, bias: &[T]) {
    let (b, hw, c) = (x.b, x.hw(), x.c);
    debug_assert_eq!(bias.len(), b * c);
    for ci in 0..c {
        for bi in 0..b {
            let v = bias[bi * c + ci];
            x.data[(ci * b + bi) * hw..][..hw].iter_mut().for_each(|e| *e = *e + v);
        }
    }
}

/// Gradient of [`add_channel_bias`] with respect to the bias, `[b][c]`.
pub fn channel_bias_grad<T: Scalar>(dy: &Act<T>) -> Vec<T> {
    let (b, hw, c) = (dy.b, dy.hw(), dy.c);
    let mut out = vec![T::zero(); b * c];
    for ci in 0..c {
        for bi in 0..b {
            out[bi * c + ci] =
                dy.data[(ci * b + bi) * hw..][..hw].iter().fold(T::zero(), |a, &v| a + v);
        }
    }
    out
}

/// `y = x * (1 + scale) + shift`, with `mods[b] = [scale(c) .., shift(c) ..]`.
pub fn modulate<T: Scalar>(x: &Act<T>, mods: &[T]) -> Act<T> {
    let (b, hw, c) = (x.b, x.hw(), x.c);
    debug_assert_eq!(mods.len(), b * 2 * c);
    let mut y = x.clone();
    for ci in 0..c {
        for bi in 0..b {
            let m = &mods[bi * 2 * c..];
            let (s, t) = (T::one() + m[ci], m[c + ci]);
            y.data[(ci * b + bi) * hw..][..hw].iter_mut().for_each(|e| *e = *e * s + t);
        }
    }
    y
}

/// Returns `(dx, dmods)` for [`modulate`].
pub fn modulate_backward<T: Scalar>(x: &Act<T>, mods: &[T], dy: &Act<T>) -> (Act<T>, Vec<T>) {
    let (b, hw, c) = (x.b, x.hw(), x.c);
    let mut dx = dy.clone();
    let mut dm = vec![T::zero(); mods.len()];
    for ci in 0..c {
        for bi in 0..b {
            let off = (ci * b + bi) * hw;
            let s = T::one() + mods[bi * 2 * c + ci];
            let (mut ds, mut dt) = (T::zero(), T::zero());
            for k in off..off + hw {
                ds = ds + dy.data[k] * x.data[k];
                dt = dt + dy.data[k];
                dx.data[k] = dy.data[k] * s;
            }
            dm[bi * 2 * c + ci] = ds;
            dm[bi * 2 * c + c + ci] = dt;
        }
    }
    (dx, dm)
}

pub fn avg_pool2<T: Scalar>(x: &Act<T>) -> Act<T> {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut y = Act::zeros(x.c, x.b, h2, w2);
    let q = T::of(0.25);
    for (src, dst) in x.data.chunks(x.hw()).zip(y.data.chunks_mut(h2 * w2)) {
        for i in 0..h2 {
            for j in 0..w2 {
                let a = 2 * i * x.w + 2 * j;
                dst[i * w2 + j] = (src[a] + src[a + 1] + src[a + x.w] + src[a + x.w + 1]) * q;
            }
        }
    }
    y
}

pub fn avg_pool2_backward<T: Scalar>(dy: &Act<T>) -> Act<T> {
    let (h, w) = (dy.h * 2, dy.w * 2);
    let mut dx = Act::zeros(dy.c, dy.b, h, w);
    let q = T::of(0.25);
    for (src, dst) in dy.data.chunks(dy.hw()).zip(dx.data.chunks_mut(h * w)) {
        for i in 0..h {
            for j in 0..w {
                dst[i * w + j] = src[(i / 2) * dy.w + j / 2] * q;
            }
        }
    }
    dx
}

pub fn upsample2<T: Scalar>(x: &Act<T>) -> Act<T> {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut y = Act::zeros(x.c, x.b, h, w);
    for (src, dst) in x.data.chunks(x.hw()).zip(y.data.chunks_mut(h * w)) {
        for i in 0..h {
            for j in 0..w {
                dst[i * w + j] = src[(i / 2) * x.w + j / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Scalar>(dy: &Act<T>) -> Act<T> {
    let (h2, w2) = (dy.h / 2, dy.w / 2);
    let mut dx = Act::zeros(dy.c, dy.b, h2, w2);
    for (src, dst) in dy.data.chunks(dy.hw()).zip(dx.data.chunks_mut(h2 * w2)) {
        for i in 0..h2 {
            for j in 0..w2 {
                let a = 2 * i * dy.w + 2 * j;
                dst[i * w2 + j] = src[a] + src[a + 1] + src[a + dy.w] + src[a + dy.w + 1];
            }
        }
    }
    dx
}
