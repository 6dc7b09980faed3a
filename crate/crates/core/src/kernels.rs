//! Raw numeric kernels on [`Tensor`] values: convolution via im2col + GEMM,
//! matrix products, normalization, attention and pooling, each with the
//! hand-written adjoints the autodiff graph dispatches to.
//!
//! Every reduction runs in a fixed order so results are bitwise reproducible.

use crate::error::{bail_shape, Error, Result};
use crate::tensor::Tensor;

/// `C = A·B + beta·C` on row-major storage described by explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(m * n <= c.len());
    // SAFETY: the index bounds of all three operands were checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row/column strides of a stored `[rows, cols]` matrix viewed optionally transposed.
fn view(cols: usize, trans: bool) -> (usize, usize) {
    if trans {
        (1, cols)
    } else {
        (cols, 1)
    }
}

/// `op(A)·op(B)` for rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
    let (ar, ac) = a.dims2()?;
    let (br, bc) = b.dims2()?;
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        bail_shape!(
            "matmul inner dims disagree: {:?}{} x {:?}{}",
            a.shape(),
            if ta { "ᵀ" } else { "" },
            b.shape(),
            if tb { "ᵀ" } else { "" }
        );
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), view(ac, ta), b.data(), view(bc, tb), 0.0, &mut out);
    Tensor::new(&[m, n], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PadMode {
    #[default]
    Zero,
    Reflect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
    pub mode: PadMode,
}

impl ConvGeom {
    pub fn new(stride: usize, pad: usize) -> Self {
        ConvGeom {
            stride,
            pad,
            mode: PadMode::Zero,
        }
    }

    pub fn out_extent(&self, n: usize, k: usize) -> Result<usize> {
        if self.stride == 0 {
            return Err(Error::InvalidArgument("conv stride must be positive".into()));
        }
        if n + 2 * self.pad < k {
            bail_shape!("kernel {} larger than padded extent {}", k, n + 2 * self.pad);
        }
        if self.mode == PadMode::Reflect && self.pad >= n {
            bail_shape!("reflect padding {} needs extent > pad, got {}", self.pad, n);
        }
        Ok((n + 2 * self.pad - k) / self.stride + 1)
    }

    #[inline]
    fn src(&self, o: usize, kk: usize, n: usize) -> Option<usize> {
        let i = (o * self.stride + kk) as isize - self.pad as isize;
        if i >= 0 && (i as usize) < n {
            return Some(i as usize);
        }
        match self.mode {
            PadMode::Zero => None,
            PadMode::Reflect => {
                let r = if i < 0 { -i } else { 2 * (n as isize - 1) - i };
                Some(r as usize)
            }
        }
    }

    fn is_pointwise(&self, kh: usize, kw: usize) -> bool {
        kh == 1 && kw == 1 && self.stride == 1 && self.pad == 0
    }
}

struct Patch {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

impl Patch {
    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(x: &[f64], p: &Patch, g: &ConvGeom, col: &mut [f64]) {
    let cols = p.cols();
    for c in 0..p.cin {
        let plane = &x[c * p.h * p.w..(c + 1) * p.h * p.w];
        for ky in 0..p.kh {
            for kx in 0..p.kw {
                let row = (c * p.kh + ky) * p.kw + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..p.ho {
                    let sy = g.src(oy, ky, p.h);
                    for ox in 0..p.wo {
                        dst[oy * p.wo + ox] = match (sy, g.src(ox, kx, p.w)) {
                            (Some(y), Some(x)) => plane[y * p.w + x],
                            _ => 0.0,
                        };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], p: &Patch, g: &ConvGeom, x: &mut [f64]) {
    let cols = p.cols();
    for c in 0..p.cin {
        let plane = &mut x[c * p.h * p.w..(c + 1) * p.h * p.w];
        for ky in 0..p.kh {
            for kx in 0..p.kw {
                let row = (c * p.kh + ky) * p.kw + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..p.ho {
                    let Some(sy) = g.src(oy, ky, p.h) else { continue };
                    for ox in 0..p.wo {
                        if let Some(sx) = g.src(ox, kx, p.w) {
                            plane[sy * p.w + sx] += src[oy * p.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_dims(x: &[usize], w: &[usize], g: &ConvGeom) -> Result<(usize, Patch)> {
    let [b, cin, h, wd] = x[..] else {
        bail_shape!("conv2d input must be [B,C,H,W], got {:?}", x);
    };
    let [_, wcin, kh, kw] = w[..] else {
        bail_shape!("conv2d weight must be [Cout,Cin,kh,kw], got {:?}", w);
    };
    if wcin != cin {
        bail_shape!("conv2d channel mismatch: input has {}, weight expects {}", cin, wcin);
    }
    let ho = g.out_extent(h, kh)?;
    let wo = g.out_extent(wd, kw)?;
    Ok((
        b,
        Patch {
            cin,
            h,
            w: wd,
            kh,
            kw,
            ho,
            wo,
        },
    ))
}

/// Cross-correlation of `x [B,Cin,H,W]` with `w [Cout,Cin,kh,kw]`.
pub fn conv2d(x: &Tensor, w: &Tensor, g: &ConvGeom) -> Result<Tensor> {
    let (b, p) = conv_dims(x.shape(), w.shape(), g)?;
    let cout = w.shape()[0];
    let (k, n) = (p.rows(), p.cols());
    let in_sz = p.cin * p.h * p.w;
    let mut out = vec![0.0; b * cout * n];
    let pointwise = g.is_pointwise(p.kh, p.kw);
    let mut col = if pointwise { Vec::new() } else { vec![0.0; k * n] };
    for bi in 0..b {
        let xb = &x.data()[bi * in_sz..(bi + 1) * in_sz];
        let src: &[f64] = if pointwise {
            xb
        } else {
            im2col(xb, &p, g, &mut col);
            &col
        };
        gemm(
            cout,
            k,
            n,
            w.data(),
            (k, 1),
            src,
            (n, 1),
            0.0,
            &mut out[bi * cout * n..(bi + 1) * cout * n],
        );
    }
    Tensor::new(&[b, cout, p.ho, p.wo], out)
}

/// Adjoint of [`conv2d`] with respect to its input: maps `dy [B,Cout,Ho,Wo]`
/// back to `[B,Cin,H,W]`.
pub fn conv2d_input_grad(dy: &Tensor, w: &Tensor, in_hw: (usize, usize), g: &ConvGeom) -> Result<Tensor> {
    let (b, cout, ho, wo) = dy.dims4()?;
    let [wcout, cin, _, _] = w.shape()[..] else {
        bail_shape!("conv2d weight must be rank 4, got {:?}", w.shape());
    };
    if wcout != cout {
        bail_shape!("conv2d grad channel mismatch: dy has {}, weight has {}", cout, wcout);
    }
    let (_, p) = conv_dims(&[b, cin, in_hw.0, in_hw.1], w.shape(), g)?;
    if (p.ho, p.wo) != (ho, wo) {
        bail_shape!(
            "conv2d grad spatial mismatch: {:?} vs expected {:?}",
            (ho, wo),
            (p.ho, p.wo)
        );
    }
    let (k, n) = (p.rows(), p.cols());
    let in_sz = cin * p.h * p.w;
    let mut dx = vec![0.0; b * in_sz];
    let pointwise = g.is_pointwise(p.kh, p.kw);
    let mut col = vec![0.0; k * n];
    for bi in 0..b {
        let dyb = &dy.data()[bi * cout * n..(bi + 1) * cout * n];
        let dxb = &mut dx[bi * in_sz..(bi + 1) * in_sz];
        if pointwise {
            gemm(k, cout, n, w.data(), (1, k), dyb, (n, 1), 0.0, dxb);
        } else {
            gemm(k, cout, n, w.data(), (1, k), dyb, (n, 1), 0.0, &mut col);
            col2im(&col, &p, g, dxb);
        }
    }
    Tensor::new(&[b, cin, p.h, p.w], dx)
}

/// Adjoint of [`conv2d`] with respect to its weight, summed over the batch in order.
pub fn conv2d_weight_grad(x: &Tensor, dy: &Tensor, kh: usize, kw: usize, g: &ConvGeom) -> Result<Tensor> {
    let (b, cin, _, _) = x.dims4()?;
    let (db, cout, ho, wo) = dy.dims4()?;
    if db != b {
        bail_shape!("conv2d weight grad batch mismatch {} vs {}", b, db);
    }
    let (_, p) = conv_dims(x.shape(), &[cout, cin, kh, kw], g)?;
    if (p.ho, p.wo) != (ho, wo) {
        bail_shape!(
            "conv2d weight grad spatial mismatch {:?} vs {:?}",
            (ho, wo),
            (p.ho, p.wo)
        );
    }
    let (k, n) = (p.rows(), p.cols());
    let in_sz = cin * p.h * p.w;
    let mut dw = vec![0.0; cout * k];
    let pointwise = g.is_pointwise(kh, kw);
    let mut col = if pointwise { Vec::new() } else { vec![0.0; k * n] };
    for bi in 0..b {
        let xb = &x.data()[bi * in_sz..(bi + 1) * in_sz];
        let src: &[f64] = if pointwise {
            xb
        } else {
            im2col(xb, &p, g, &mut col);
            &col
        };
        let dyb = &dy.data()[bi * cout * n..(bi + 1) * cout * n];
        gemm(cout, n, k, dyb, (n, 1), src, (1, n), 1.0, &mut dw);
    }
    Tensor::new(&[cout, cin, kh, kw], dw)
}

/// Splits `shape` as `[lead, c, spatial...]` against a per-channel operand of
/// shape `[c]` or `[lead, c]`. Returns `(lead, c, spatial, per_sample)`.
pub fn channel_layout(x: &[usize], s: &[usize]) -> Result<(usize, usize, usize, bool)> {
    if x.len() < 2 {
        bail_shape!("channel broadcast needs rank >= 2, got {:?}", x);
    }
    let (lead, c) = (x[0], x[1]);
    let spatial: usize = x[2..].iter().product();
    match s {
        [sc] if *sc == c => Ok((lead, c, spatial, false)),
        [sb, sc] if *sb == lead && *sc == c => Ok((lead, c, spatial, true)),
        _ => bail_shape!("cannot broadcast {:?} over channels of {:?}", s, x),
    }
}

/// `x[b,c,..] op s[c]` or `x[b,c,..] op s[b,c]`.
pub fn channel_apply(x: &Tensor, s: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let (lead, c, sp, per_sample) = channel_layout(x.shape(), s.shape())?;
    let mut out = x.data().to_vec();
    for b in 0..lead {
        for ch in 0..c {
            let v = s.data()[if per_sample { b * c + ch } else { ch }];
            for o in &mut out[(b * c + ch) * sp..(b * c + ch + 1) * sp] {
                *o = f(*o, v);
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Sums `x` down to the per-channel shape `target` (`[c]` or `[lead, c]`).
pub fn channel_reduce(x: &Tensor, target: &[usize]) -> Result<Tensor> {
    let (lead, c, sp, per_sample) = channel_layout(x.shape(), target)?;
    let mut out = vec![0.0; target.iter().product()];
    for b in 0..lead {
        for ch in 0..c {
            let s: f64 = x.data()[(b * c + ch) * sp..(b * c + ch + 1) * sp].iter().sum();
            out[if per_sample { b * c + ch } else { ch }] += s;
        }
    }
    Tensor::new(target, out)
}

/// Expands a per-channel tensor to `shape` by repetition.
pub fn channel_broadcast(s: &Tensor, shape: &[usize]) -> Result<Tensor> {
    channel_apply(&Tensor::zeros(shape), s, |_, v| v)
}

pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        bail_shape!("avg_pool2 needs even spatial dims, got {}x{}", h, w);
    }
    let (h2, w2) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = vec![0.0; b * c * h2 * w2];
    for p in 0..b * c {
        let src = &xd[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for i in 0..h2 {
            for j in 0..w2 {
                let r0 = 2 * i * w + 2 * j;
                dst[i * w2 + j] = 0.25 * (src[r0] + src[r0 + 1] + src[r0 + w] + src[r0 + w + 1]);
            }
        }
    }
    Tensor::new(&[b, c, h2, w2], out)
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (h2, w2) = (2 * h, 2 * w);
    let xd = x.data();
    let mut out = vec![0.0; b * c * h2 * w2];
    for p in 0..b * c {
        let src = &xd[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for i in 0..h2 {
            for j in 0..w2 {
                dst[i * w2 + j] = src[(i / 2) * w + j / 2];
            }
        }
    }
    Tensor::new(&[b, c, h2, w2], out)
}

/// Normalized activations and per-group reciprocal std saved by group norm.
pub struct GroupNormSaved {
    pub xhat: Tensor,
    pub rstd: Vec<f64>,
}

pub fn group_norm(x: &Tensor, groups: usize, eps: f64) -> Result<GroupNormSaved> {
    let (b, c, h, w) = x.dims4()?;
    if groups == 0 || c % groups != 0 {
        bail_shape!("group_norm: {} channels not divisible into {} groups", c, groups);
    }
    let n = (c / groups) * h * w;
    let mut out = vec![0.0; x.numel()];
    let mut rstd = Vec::with_capacity(b * groups);
    for (gi, chunk) in x.data().chunks(n).enumerate() {
        let mean = chunk.iter().sum::<f64>() / n as f64;
        let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let r = 1.0 / (var + eps).sqrt();
        for (o, v) in out[gi * n..(gi + 1) * n].iter_mut().zip(chunk) {
            *o = (v - mean) * r;
        }
        rstd.push(r);
    }
    Ok(GroupNormSaved {
        xhat: Tensor::new(x.shape(), out)?,
        rstd,
    })
}

pub fn group_norm_backward(dy: &Tensor, saved: &GroupNormSaved) -> Result<Tensor> {
    let groups_total = saved.rstd.len();
    let n = dy.numel() / groups_total;
    let mut dx = vec![0.0; dy.numel()];
    for gi in 0..groups_total {
        let g = &dy.data()[gi * n..(gi + 1) * n];
        let xh = &saved.xhat.data()[gi * n..(gi + 1) * n];
        let sum_g: f64 = g.iter().sum();
        let sum_gx: f64 = g.iter().zip(xh).map(|(a, b)| a * b).sum();
        let r = saved.rstd[gi];
        let nf = n as f64;
        for i in 0..n {
            dx[gi * n + i] = r / nf * (nf * g[i] - sum_g - xh[i] * sum_gx);
        }
    }
    Tensor::new(dy.shape(), dx)
}

/// Scaled dot-product attention over the token axis for `q, k, v: [B, C, N]`.
/// Returns the output and the row-stochastic attention weights `[B, N, N]`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let s = q.shape();
    if s.len() != 3 || k.shape() != s || v.shape() != s {
        bail_shape!(
            "attention needs equal [B,C,N] operands, got {:?} {:?} {:?}",
            s,
            k.shape(),
            v.shape()
        );
    }
    let (b, c, n) = (s[0], s[1], s[2]);
    let scale = 1.0 / (c as f64).sqrt();
    let mut out = vec![0.0; b * c * n];
    let mut attn = vec![0.0; b * n * n];
    for bi in 0..b {
        let qb = &q.data()[bi * c * n..(bi + 1) * c * n];
        let kb = &k.data()[bi * c * n..(bi + 1) * c * n];
        let vb = &v.data()[bi * c * n..(bi + 1) * c * n];
        let ab = &mut attn[bi * n * n..(bi + 1) * n * n];
        // logits[i, j] = sum_c q[c, i] k[c, j]
        gemm(n, c, n, qb, (1, n), kb, (n, 1), 0.0, ab);
        for row in ab.chunks_mut(n) {
            let mut mx = f64::NEG_INFINITY;
            for v in row.iter_mut() {
                *v *= scale;
                if !v.is_finite() {
                    return Err(Error::NonFinite("attention softmax input".into()));
                }
                mx = mx.max(*v);
            }
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        // out[c, i] = sum_j v[c, j] attn[i, j]
        gemm(
            c,
            n,
            n,
            vb,
            (n, 1),
            ab,
            (1, n),
            0.0,
            &mut out[bi * c * n..(bi + 1) * c * n],
        );
    }
    Ok((Tensor::new(s, out)?, Tensor::new(&[b, n, n], attn)?))
}

pub fn attention_backward(
    dout: &Tensor,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    attn: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let s = q.shape();
    let (b, c, n) = (s[0], s[1], s[2]);
    let scale = 1.0 / (c as f64).sqrt();
    let mut dq = vec![0.0; b * c * n];
    let mut dk = vec![0.0; b * c * n];
    let mut dv = vec![0.0; b * c * n];
    let mut da = vec![0.0; n * n];
    for bi in 0..b {
        let r = bi * c * n..(bi + 1) * c * n;
        let (qb, kb, vb, gb) = (
            &q.data()[r.clone()],
            &k.data()[r.clone()],
            &v.data()[r.clone()],
            &dout.data()[r.clone()],
        );
        let ab = &attn.data()[bi * n * n..(bi + 1) * n * n];
        // dv = dout · attn
        gemm(c, n, n, gb, (n, 1), ab, (n, 1), 0.0, &mut dv[r.clone()]);
        // da[i, j] = sum_c dout[c, i] v[c, j]
        gemm(n, c, n, gb, (1, n), vb, (n, 1), 0.0, &mut da);
        for i in 0..n {
            let row_a = &ab[i * n..(i + 1) * n];
            let row_d = &mut da[i * n..(i + 1) * n];
            let dot: f64 = row_a.iter().zip(row_d.iter()).map(|(a, d)| a * d).sum();
            for (d, a) in row_d.iter_mut().zip(row_a) {
                *d = a * (*d - dot) * scale;
            }
        }
        // dq[c, i] = sum_j ds[i, j] k[c, j];  dk[c, j] = sum_i ds[i, j] q[c, i]
        gemm(c, n, n, kb, (n, 1), &da, (1, n), 0.0, &mut dq[r.clone()]);
        gemm(c, n, n, qb, (n, 1), &da, (n, 1), 0.0, &mut dk[r.clone()]);
    }
    Ok((Tensor::new(s, dq)?, Tensor::new(s, dk)?, Tensor::new(s, dv)?))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
