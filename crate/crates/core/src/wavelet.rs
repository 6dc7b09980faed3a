//! Orthonormal 2-D Haar transform.
//!
//! With `L = [1, 1]/√2` and `H = [-1, 1]/√2`, the four stride-2 kernels are
//! the outer products `K_xy[r][c] = X[r]·Y[c]` (rows filtered by `X`, columns
//! by `Y`). For a 2×2 block `[a b; c d]`:
//!
//! ```text
//! ll = ( a + b + c + d) / 2      lh = (-a + b - c + d) / 2
//! hl = (-a - b + c + d) / 2      hh = ( a - b - c + d) / 2
//! ```
//!
//! The map is orthonormal, so the inverse is its transpose. Packed tensors
//! stack the subbands along channels in the fixed order `[ll, lh, hl, hh]`,
//! each block holding `C` channels.

use crate::autograd::{Graph, Var};
use crate::error::{bail_shape, Result};
use crate::kernels::ConvGeom;
use crate::nn::{Conv2d, Init, ParamStore, Params};
use crate::rng::RngStream;
use crate::tensor::Tensor;

const HALF: f64 = 0.5;

/// The two 1-D Haar filters and the four 2×2 kernels built from them.
pub struct HaarFilters;

impl HaarFilters {
    pub fn low() -> [f64; 2] {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        [s, s]
    }

    pub fn high() -> [f64; 2] {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        [-s, s]
    }

    /// Kernels in subband order `[ll, lh, hl, hh]`, each row-major 2×2.
    pub fn kernels() -> [[f64; 4]; 4] {
        let (l, h) = (Self::low(), Self::high());
        let outer = |x: [f64; 2], y: [f64; 2]| [x[0] * y[0], x[0] * y[1], x[1] * y[0], x[1] * y[1]];
        [outer(l, l), outer(l, h), outer(h, l), outer(h, h)]
    }
}

/// The four subbands of one decomposition level.
#[derive(Clone, Debug, PartialEq)]
pub struct SubbandSet {
    pub ll: Tensor,
    pub lh: Tensor,
    pub hl: Tensor,
    pub hh: Tensor,
    pub level: usize,
}

impl SubbandSet {
    pub fn bands(&self) -> [&Tensor; 4] {
        [&self.ll, &self.lh, &self.hl, &self.hh]
    }

    pub fn energy(&self) -> f64 {
        self.bands().iter().map(|b| b.sq_norm()).sum()
    }

    fn check(&self) -> Result<(usize, usize, usize, usize)> {
        let dims = self.ll.dims4()?;
        for b in &self.bands()[1..] {
            if b.shape() != self.ll.shape() {
                bail_shape!("subband shapes disagree: {:?} vs {:?}", self.ll.shape(), b.shape());
            }
        }
        Ok(dims)
    }
}

fn even_dims(x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (b, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        bail_shape!("Haar DWT needs even spatial extents, got {}x{}", h, w);
    }
    Ok((b, c, h, w))
}

/// Writes the four subbands of plane `src` (h×w) into `dst[k]` ((h/2)×(w/2)).
fn forward_plane(src: &[f64], w: usize, dst: [&mut [f64]; 4]) {
    let w2 = w / 2;
    let [ll, lh, hl, hh] = dst;
    for i in 0..ll.len() / w2.max(1) {
        for j in 0..w2 {
            let r0 = 2 * i * w + 2 * j;
            let (a, b, c, d) = (src[r0], src[r0 + 1], src[r0 + w], src[r0 + w + 1]);
            let o = i * w2 + j;
            ll[o] = HALF * (a + b + c + d);
            lh[o] = HALF * (-a + b - c + d);
            hl[o] = HALF * (-a - b + c + d);
            hh[o] = HALF * (a - b - c + d);
        }
    }
}

fn inverse_plane(src: [&[f64]; 4], w2: usize, dst: &mut [f64]) {
    let w = 2 * w2;
    let [ll, lh, hl, hh] = src;
    for i in 0..ll.len() / w2.max(1) {
        for j in 0..w2 {
            let o = i * w2 + j;
            let (s, x, y, z) = (ll[o], lh[o], hl[o], hh[o]);
            let r0 = 2 * i * w + 2 * j;
            dst[r0] = HALF * (s - x - y + z);
            dst[r0 + 1] = HALF * (s + x - y - z);
            dst[r0 + w] = HALF * (s - x + y - z);
            dst[r0 + w + 1] = HALF * (s + x + y + z);
        }
    }
}

/// Single-level Haar DWT of `x [B,C,H,W]`.
pub fn dwt(x: &Tensor) -> Result<SubbandSet> {
    let packed = dwt_packed(x)?;
    let mut s = unpack(&packed)?;
    s.level = 1;
    Ok(s)
}

/// Exact inverse of [`dwt`].
pub fn idwt(s: &SubbandSet) -> Result<Tensor> {
    s.check()?;
    idwt_packed(&pack(s)?)
}

/// Concatenates the subbands along channels as `[ll, lh, hl, hh]`.
pub fn pack(s: &SubbandSet) -> Result<Tensor> {
    s.check()?;
    Tensor::cat_channels(&s.bands())
}

/// Splits a packed `[B,4C,H,W]` tensor back into its subbands.
pub fn unpack(y: &Tensor) -> Result<SubbandSet> {
    let (_, c4, _, _) = y.dims4()?;
    if c4 % 4 != 0 {
        bail_shape!("packed subband tensor needs channels divisible by 4, got {}", c4);
    }
    let c = c4 / 4;
    Ok(SubbandSet {
        ll: y.narrow_channels(0, c)?,
        lh: y.narrow_channels(c, c)?,
        hl: y.narrow_channels(2 * c, c)?,
        hh: y.narrow_channels(3 * c, c)?,
        level: 1,
    })
}

/// `pack(dwt(x))` computed in one pass.
pub fn dwt_packed(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = even_dims(x)?;
    let (h2, w2) = (h / 2, w / 2);
    let plane = h2 * w2;
    let mut out = vec![0.0; b * 4 * c * plane];
    for bi in 0..b {
        let ob = &mut out[bi * 4 * c * plane..(bi + 1) * 4 * c * plane];
        let (ll, rest) = ob.split_at_mut(c * plane);
        let (lh, rest) = rest.split_at_mut(c * plane);
        let (hl, hh) = rest.split_at_mut(c * plane);
        for ch in 0..c {
            let src = &x.data()[(bi * c + ch) * h * w..(bi * c + ch + 1) * h * w];
            let r = ch * plane..(ch + 1) * plane;
            forward_plane(
                src,
                w,
                [&mut ll[r.clone()], &mut lh[r.clone()], &mut hl[r.clone()], &mut hh[r]],
            );
        }
    }
    Tensor::new(&[b, 4 * c, h2, w2], out)
}

/// Inverse of [`dwt_packed`]: `[B,4C,H,W] -> [B,C,2H,2W]`.
pub fn idwt_packed(y: &Tensor) -> Result<Tensor> {
    let (b, c4, h2, w2) = y.dims4()?;
    if c4 % 4 != 0 {
        bail_shape!("packed subband tensor needs channels divisible by 4, got {}", c4);
    }
    let c = c4 / 4;
    let plane = h2 * w2;
    let (h, w) = (2 * h2, 2 * w2);
    let mut out = vec![0.0; b * c * h * w];
    for bi in 0..b {
        let yb = &y.data()[bi * c4 * plane..(bi + 1) * c4 * plane];
        for ch in 0..c {
            let band = |k: usize| &yb[(k * c + ch) * plane..(k * c + ch + 1) * plane];
            inverse_plane(
                [band(0), band(1), band(2), band(3)],
                w2,
                &mut out[(bi * c + ch) * h * w..(bi * c + ch + 1) * h * w],
            );
        }
    }
    Tensor::new(&[b, c, h, w], out)
}

/// Full packet decomposition: `levels` rounds of `dwt_packed` applied to
/// every channel, giving `[B, 4^k·C, H/2^k, W/2^k]`.
pub fn multilevel_dwt(x: &Tensor, levels: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let f = 1usize << levels;
    if h % f != 0 || w % f != 0 {
        bail_shape!("{} DWT levels need extents divisible by {}, got {}x{}", levels, f, h, w);
    }
    let mut cur = x.clone();
    for _ in 0..levels {
        cur = dwt_packed(&cur)?;
    }
    Ok(cur)
}

/// DWT, pack, then a learned 1×1 projection to `out_channels`.
///
/// Maps residual shortcuts of the network input onto a coarser feature level.
pub struct WaveletDownsample {
    pub proj: Conv2d,
}

impl WaveletDownsample {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut RngStream,
    ) -> Self {
        WaveletDownsample {
            proj: Conv2d::new(
                store,
                name,
                4 * in_channels,
                out_channels,
                1,
                ConvGeom::new(1, 0),
                Init::FanIn,
                rng,
            ),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Params, x: Var) -> Result<Var> {
        let y = g.dwt(x)?;
        self.proj.forward(g, p, y)
    }
}
