use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::kernels::ConvGeom;
use crate::nn::{Conv2d, Dense, Init, ParamId, ParamStore, Params};
use crate::rng::RngStream;
use crate::tensor::Tensor;

use super::norm_groups;

const GN_EPS: f64 = 1e-6;

/// Per-sample conditioning shared by every block of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Conditioning {
    /// Time embedding `[B, time_embed_dim]`.
    pub temb: Var,
    /// Latent embedding `[B, latent_embed_dim]`.
    pub zemb: Var,
}

/// Group norm without affine parameters followed by a per-sample scale and
/// shift predicted from the latent embedding. The scale bias starts at 1.
struct AdaGroupNorm {
    gamma: Dense,
    beta: Dense,
    groups: usize,
}

impl AdaGroupNorm {
    fn new(store: &mut ParamStore, name: &str, channels: usize, zdim: usize, rng: &mut RngStream) -> Self {
        let gamma = Dense::new(store, &format!("{name}.gamma"), zdim, channels, Init::FanIn, rng);
        store
            .set(&format!("{name}.gamma.bias"), Tensor::ones(&[channels]))
            .expect("fresh parameter");
        AdaGroupNorm {
            gamma,
            beta: Dense::new(store, &format!("{name}.beta"), zdim, channels, Init::FanIn, rng),
            groups: norm_groups(channels),
        }
    }

    fn forward(&self, g: &mut Graph, p: &Params, x: Var, zemb: Var) -> Result<Var> {
        let h = g.group_norm(x, self.groups, GN_EPS)?;
        let s = self.gamma.forward(g, p, zemb)?;
        let b = self.beta.forward(g, p, zemb)?;
        let h = g.mul_bc(h, s)?;
        g.add_bc(h, b)
    }
}

/// `AdaGN → SiLU → conv3×3 → +dense(SiLU(temb)) → AdaGN → SiLU → conv3×3`, plus
/// a skip path (1×1 conv when the width changes).
pub struct ResBlock {
    norm1: AdaGroupNorm,
    conv1: Conv2d,
    temb: Dense,
    norm2: AdaGroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        tdim: usize,
        zdim: usize,
        rng: &mut RngStream,
    ) -> Self {
        ResBlock {
            norm1: AdaGroupNorm::new(store, &format!("{name}.norm1"), cin, zdim, rng),
            conv1: Conv2d::same3(store, &format!("{name}.conv1"), cin, cout, Init::FanIn, rng),
            temb: Dense::new(store, &format!("{name}.temb"), tdim, cout, Init::FanIn, rng),
            norm2: AdaGroupNorm::new(store, &format!("{name}.norm2"), cout, zdim, rng),
            conv2: Conv2d::same3(store, &format!("{name}.conv2"), cout, cout, Init::FanIn, rng),
            skip: (cin != cout).then(|| Conv2d::pointwise(store, &format!("{name}.skip"), cin, cout, Init::FanIn, rng)),
            in_channels: cin,
            out_channels: cout,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Params, x: Var, c: Conditioning) -> Result<Var> {
        let h = self.norm1.forward(g, p, x, c.zemb)?;
        let h = g.silu(h);
        let h = self.conv1.forward(g, p, h)?;
        let t = g.silu(c.temb);
        let t = self.temb.forward(g, p, t)?;
        let h = g.add_bc(h, t)?;
        let h = self.norm2.forward(g, p, h, c.zemb)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, p, h)?;
        let s = match &self.skip {
            Some(conv) => conv.forward(g, p, x)?,
            None => x,
        };
        g.add(h, s)
    }

    /// Zeroes the residual branch and makes the skip path select the first
    /// `out_channels` input channels, so the block computes that selection.
    pub fn make_identity(&self, store: &mut ParamStore) {
        *store.get_mut(self.conv2.weight) = Tensor::zeros(store.get(self.conv2.weight).shape());
        *store.get_mut(self.conv2.bias) = Tensor::zeros(&[self.out_channels]);
        if let Some(conv) = &self.skip {
            let (cout, cin) = (self.out_channels, self.in_channels);
            *store.get_mut(conv.weight) =
                Tensor::from_fn(&[cout, cin, 1, 1], |i| if i / cin == i % cin { 1.0 } else { 0.0 });
            *store.get_mut(conv.bias) = Tensor::zeros(&[cout]);
        }
    }
}

/// Single-head self-attention over spatial tokens with a residual add.
/// Self-attention over spatial positions. The key projection has no bias:
/// a key offset shifts every logit of a query equally and cancels in the
/// softmax.
pub struct AttnBlock {
    q: Conv2d,
    k: ParamId,
    v: Conv2d,
    out: Conv2d,
    groups: usize,
}

impl AttnBlock {
    pub fn new(store: &mut ParamStore, name: &str, ch: usize, rng: &mut RngStream) -> Self {
        AttnBlock {
            q: Conv2d::pointwise(store, &format!("{name}.q"), ch, ch, Init::FanIn, rng),
            k: store.add(
                &format!("{name}.k.weight"),
                Init::FanIn.tensor(&[ch, ch, 1, 1], ch, rng),
            ),
            v: Conv2d::pointwise(store, &format!("{name}.v"), ch, ch, Init::FanIn, rng),
            out: Conv2d::pointwise(store, &format!("{name}.out"), ch, ch, Init::FanIn, rng),
            groups: norm_groups(ch),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Params, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (b, c, n) = (shape[0], shape[1], shape[2] * shape[3]);
        let h = g.group_norm(x, self.groups, GN_EPS)?;
        let q = self.q.forward(g, p, h)?;
        let k = g.conv2d(h, p.var(self.k), ConvGeom::new(1, 0))?;
        let v = self.v.forward(g, p, h)?;
        let q = g.reshape(q, &[b, c, n])?;
        let k = g.reshape(k, &[b, c, n])?;
        let v = g.reshape(v, &[b, c, n])?;
        let a = g.attention(q, k, v)?;
        let a = g.reshape(a, &shape)?;
        let a = self.out.forward(g, p, a)?;
        g.add(x, a)
    }
}

/// ResNet block followed by a DWT: the ll band continues down the encoder
/// and the three high bands are handed back for the matching up block.
pub struct FreqDown {
    pub res: ResBlock,
}

impl FreqDown {
    pub fn new(store: &mut ParamStore, name: &str, ch: usize, tdim: usize, zdim: usize, rng: &mut RngStream) -> Self {
        FreqDown {
            res: ResBlock::new(store, &format!("{name}.res"), ch, ch, tdim, zdim, rng),
        }
    }

    /// Returns `(ll, highs)` with `highs = [lh, hl, hh]` stacked on channels.
    pub fn forward(&self, g: &mut Graph, p: &Params, x: Var, c: Conditioning) -> Result<(Var, Var)> {
        let ch = self.res.out_channels;
        let h = self.res.forward(g, p, x, c)?;
        let y = g.dwt(h)?;
        let ll = g.narrow_channels(y, 0, ch)?;
        let highs = g.narrow_channels(y, ch, 3 * ch)?;
        Ok((ll, highs))
    }
}

/// 1×1 fusion of `[features, stored highs]` into a full packed subband set,
/// IDWT to double resolution, skip concatenation and a ResNet block.
pub struct FreqUp {
    pub fuse: Conv2d,
    pub res: ResBlock,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl FreqUp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        skip_ch: usize,
        tdim: usize,
        zdim: usize,
        rng: &mut RngStream,
    ) -> Self {
        FreqUp {
            fuse: Conv2d::pointwise(
                store,
                &format!("{name}.fuse"),
                cin + 3 * cout,
                4 * cout,
                Init::FanIn,
                rng,
            ),
            res: ResBlock::new(store, &format!("{name}.res"), cout + skip_ch, cout, tdim, zdim, rng),
            in_channels: cin,
            out_channels: cout,
        }
    }

    /// Fused subbands at the input resolution, before the IDWT.
    pub fn fused(&self, g: &mut Graph, p: &Params, x: Var, highs: Var) -> Result<Var> {
        let hs = g.shape(highs).to_vec();
        let xs = g.shape(x).to_vec();
        if hs.len() != 4 || hs[1] != 3 * self.out_channels || hs[2..] != xs[2..] {
            crate::error::bail_shape!("high subbands {:?} do not match features {:?}", hs, xs);
        }
        let cat = g.cat_channels(&[x, highs])?;
        self.fuse.forward(g, p, cat)
    }

    pub fn forward(&self, g: &mut Graph, p: &Params, x: Var, highs: Var, skip: Var, c: Conditioning) -> Result<Var> {
        let f = self.fused(g, p, x, highs)?;
        let up = g.idwt(f)?;
        let cat = g.cat_channels(&[up, skip])?;
        self.res.forward(g, p, cat, c)
    }

    /// Makes the fusion pass `[x, highs]` straight through (requires
    /// `in_channels == out_channels`).
    pub fn make_identity_fusion(&self, store: &mut ParamStore) {
        assert_eq!(
            self.in_channels, self.out_channels,
            "identity fusion needs equal widths"
        );
        let n = 4 * self.out_channels;
        *store.get_mut(self.fuse.weight) = Tensor::from_fn(&[n, n, 1, 1], |i| if i / n == i % n { 1.0 } else { 0.0 });
        *store.get_mut(self.fuse.bias) = Tensor::zeros(&[n]);
    }
}

/// DWT, ResNet block on the ll band only, IDWT. High bands pass untouched.
pub struct FreqBottleneck {
    pub res: ResBlock,
}

impl FreqBottleneck {
    pub fn new(store: &mut ParamStore, name: &str, ch: usize, tdim: usize, zdim: usize, rng: &mut RngStream) -> Self {
        FreqBottleneck {
            res: ResBlock::new(store, &format!("{name}.res"), ch, ch, tdim, zdim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Params, x: Var, c: Conditioning) -> Result<Var> {
        let ch = self.res.out_channels;
        let y = g.dwt(x)?;
        let ll = g.narrow_channels(y, 0, ch)?;
        let highs = g.narrow_channels(y, ch, 3 * ch)?;
        let ll = self.res.forward(g, p, ll, c)?;
        let cat = g.cat_channels(&[ll, highs])?;
        g.idwt(cat)
    }
}
