use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::ConvGeom;
use crate::nn::{Conv2d, Dense, Init, ParamStore, Params};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::wavelet::WaveletDownsample;

use super::blocks::{AttnBlock, Conditioning, FreqBottleneck, FreqDown, FreqUp, ResBlock};
use super::{norm_groups, pixel_norm, timestep_embedding, GeneratorSpec};

/// Push/pop counts of one forward pass; a clean pass consumes every skip
/// and every stashed high-subband tensor exactly once.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardTrace {
    pub skips_pushed: usize,
    pub skips_popped: usize,
    pub highs_pushed: usize,
    pub highs_popped: usize,
}

#[derive(Default)]
struct BlockState {
    skips: Vec<Var>,
    highs: Vec<Var>,
    trace: ForwardTrace,
}

impl BlockState {
    fn push_skip(&mut self, v: Var) {
        self.skips.push(v);
        self.trace.skips_pushed += 1;
    }

    fn pop_skip(&mut self) -> Result<Var> {
        self.trace.skips_popped += 1;
        self.skips
            .pop()
            .ok_or_else(|| Error::InvalidArgument("skip stack exhausted".into()))
    }

    fn push_highs(&mut self, v: Var) {
        self.highs.push(v);
        self.trace.highs_pushed += 1;
    }

    fn pop_highs(&mut self) -> Result<Var> {
        self.trace.highs_popped += 1;
        self.highs
            .pop()
            .ok_or_else(|| Error::InvalidArgument("missing high-subband stash entry".into()))
    }
}

struct Stage {
    res: ResBlock,
    attn: Option<AttnBlock>,
}

impl Stage {
    fn forward(&self, g: &mut Graph, p: &Params, x: Var, c: Conditioning) -> Result<Var> {
        let h = self.res.forward(g, p, x, c)?;
        match &self.attn {
            Some(a) => a.forward(g, p, h),
            None => Ok(h),
        }
    }
}

struct EncoderLevel {
    stages: Vec<Stage>,
    /// Down block and the frequency residual projection of the input pyramid.
    down: Option<(FreqDown, WaveletDownsample)>,
}

struct DecoderLevel {
    /// Up block arriving from the next-coarser level.
    up: Option<(FreqUp, Option<AttnBlock>)>,
    stages: Vec<Stage>,
}

/// Wavelet-space UNet denoiser `y0' = G(y_t, z, t)`.
pub struct Generator {
    pub spec: GeneratorSpec,
    mapping: Vec<Dense>,
    temb1: Dense,
    temb2: Dense,
    conv_in: Conv2d,
    encoder: Vec<EncoderLevel>,
    mid1: FreqBottleneck,
    mid_attn: AttnBlock,
    mid2: FreqBottleneck,
    decoder: Vec<DecoderLevel>,
    out_groups: usize,
    conv_out: Conv2d,
}

/// Scale of the output layer's initial weights relative to fan-in init.
pub const OUTPUT_INIT_SCALE: f64 = 0.1;

impl Generator {
    /// Registers every parameter in `store` (prefix `g.`) in a fixed order.
    pub fn new(spec: &GeneratorSpec, store: &mut ParamStore, rng: &mut RngStream) -> Result<Self> {
        spec.validate()?;
        let s = spec;
        let (tdim, zdim) = (s.time_embed_dim(), s.latent_embed_dim);
        let m = s.levels();
        let attn_at = |res: usize| s.attention_resolutions.contains(&res);

        let mut mapping = Vec::with_capacity(s.mapping_layers);
        for i in 0..s.mapping_layers {
            let n_in = if i == 0 { s.latent_dim } else { zdim };
            mapping.push(Dense::new(store, &format!("g.map{i}"), n_in, zdim, Init::FanIn, rng));
        }
        let temb1 = Dense::new(store, "g.temb1", s.base_channels, tdim, Init::FanIn, rng);
        let temb2 = Dense::new(store, "g.temb2", tdim, tdim, Init::FanIn, rng);
        let conv_in = Conv2d::same3(store, "g.conv_in", s.in_channels(), s.base_channels, Init::FanIn, rng);

        // Channel widths of the skip stack, mirrored from the forward pass.
        let mut skip_ch = vec![s.base_channels];
        let mut cur = s.base_channels;
        let mut encoder = Vec::with_capacity(m);
        for i in 0..m {
            let ch = s.channels(i);
            let res = s.resolution() >> i;
            let mut stages = Vec::new();
            for r in 0..s.resblocks {
                let name = format!("g.enc{i}.res{r}");
                stages.push(Stage {
                    res: ResBlock::new(store, &name, cur, ch, tdim, zdim, rng),
                    attn: attn_at(res).then(|| AttnBlock::new(store, &format!("{name}.attn"), ch, rng)),
                });
                cur = ch;
                skip_ch.push(cur);
            }
            let down = (i + 1 < m).then(|| {
                let fd = FreqDown::new(store, &format!("g.enc{i}.down"), cur, tdim, zdim, rng);
                let pyr_ch = s.in_channels() << (2 * i);
                let wd = WaveletDownsample::new(store, &format!("g.enc{i}.residual"), pyr_ch, cur, rng);
                (fd, wd)
            });
            if down.is_some() {
                skip_ch.push(cur);
            }
            encoder.push(EncoderLevel { stages, down });
        }

        let mid1 = FreqBottleneck::new(store, "g.mid.freq1", cur, tdim, zdim, rng);
        let mid_attn = AttnBlock::new(store, "g.mid.attn", cur, rng);
        let mid2 = FreqBottleneck::new(store, "g.mid.freq2", cur, tdim, zdim, rng);

        let mut decoder = Vec::with_capacity(m);
        for i in (0..m).rev() {
            let ch = s.channels(i);
            let res = s.resolution() >> i;
            let mut plain = s.resblocks + 1;
            let up = if i + 1 < m {
                plain -= 1;
                let sc = skip_ch.pop().expect("skip bookkeeping");
                let name = format!("g.dec{i}.up");
                let fu = FreqUp::new(store, &name, cur, ch, sc, tdim, zdim, rng);
                let attn = attn_at(res).then(|| AttnBlock::new(store, &format!("{name}.attn"), ch, rng));
                cur = ch;
                Some((fu, attn))
            } else {
                None
            };
            let mut stages = Vec::new();
            for r in 0..plain {
                let sc = skip_ch.pop().expect("skip bookkeeping");
                let name = format!("g.dec{i}.res{r}");
                stages.push(Stage {
                    res: ResBlock::new(store, &name, cur + sc, ch, tdim, zdim, rng),
                    attn: attn_at(res).then(|| AttnBlock::new(store, &format!("{name}.attn"), ch, rng)),
                });
                cur = ch;
            }
            decoder.push(DecoderLevel { up, stages });
        }
        debug_assert!(skip_ch.is_empty());

        let conv_out = Conv2d::new(
            store,
            "g.conv_out",
            cur,
            s.in_channels(),
            3,
            ConvGeom::new(1, 1),
            Init::Scaled(OUTPUT_INIT_SCALE),
            rng,
        );
        Ok(Generator {
            spec: s.clone(),
            mapping,
            temb1,
            temb2,
            conv_in,
            encoder,
            mid1,
            mid_attn,
            mid2,
            decoder,
            out_groups: norm_groups(cur),
            conv_out,
        })
    }

    /// Time and latent embeddings for a batch.
    pub fn conditioning(&self, g: &mut Graph, p: &Params, z: &Tensor, t: &[usize]) -> Result<Conditioning> {
        let (b, d) = z.dims2()?;
        if d != self.spec.latent_dim || b != t.len() {
            return Err(Error::Shape(format!(
                "latent {:?} vs latent_dim {} and {} step indices",
                z.shape(),
                self.spec.latent_dim,
                t.len()
            )));
        }
        let mut zemb = g.constant(pixel_norm(z)?);
        for layer in &self.mapping {
            let h = layer.forward(g, p, zemb)?;
            zemb = g.silu(h);
        }
        let e = g.constant(timestep_embedding(t, self.spec.base_channels));
        let h = self.temb1.forward(g, p, e)?;
        let h = g.silu(h);
        let temb = self.temb2.forward(g, p, h)?;
        Ok(Conditioning { temb, zemb })
    }

    pub fn forward(&self, g: &mut Graph, p: &Params, y: Var, z: &Tensor, t: &[usize]) -> Result<Var> {
        Ok(self.forward_traced(g, p, y, z, t)?.0)
    }

    pub fn forward_traced(
        &self,
        g: &mut Graph,
        p: &Params,
        y: Var,
        z: &Tensor,
        t: &[usize],
    ) -> Result<(Var, ForwardTrace)> {
        let s = &self.spec;
        let ys = g.shape(y).to_vec();
        let r = s.resolution();
        if ys.len() != 4 || ys[1] != s.in_channels() || ys[2] != r || ys[3] != r {
            return Err(Error::Shape(format!(
                "generator expects [B,{},{r},{r}], got {:?}",
                s.in_channels(),
                ys
            )));
        }
        let c = self.conditioning(g, p, z, t)?;
        let mut st = BlockState::default();

        let mut h = self.conv_in.forward(g, p, y)?;
        st.push_skip(h);
        let mut pyramid = y;
        for level in &self.encoder {
            for stage in &level.stages {
                h = stage.forward(g, p, h, c)?;
                st.push_skip(h);
            }
            if let Some((down, residual)) = &level.down {
                let (ll, highs) = down.forward(g, p, h, c)?;
                st.push_highs(highs);
                pyramid = g.dwt(pyramid)?;
                let res = residual.proj.forward(g, p, pyramid)?;
                h = g.add(ll, res)?;
                st.push_skip(h);
            }
        }

        h = self.mid1.forward(g, p, h, c)?;
        h = self.mid_attn.forward(g, p, h)?;
        h = self.mid2.forward(g, p, h, c)?;

        for level in &self.decoder {
            if let Some((up, attn)) = &level.up {
                let highs = st.pop_highs()?;
                let skip = st.pop_skip()?;
                h = up.forward(g, p, h, highs, skip, c)?;
                if let Some(a) = attn {
                    h = a.forward(g, p, h)?;
                }
            }
            for stage in &level.stages {
                let skip = st.pop_skip()?;
                let cat = g.cat_channels(&[h, skip])?;
                h = stage.forward(g, p, cat, c)?;
            }
        }
        if !st.skips.is_empty() || !st.highs.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} skips and {} high-subband tensors left unconsumed",
                st.skips.len(),
                st.highs.len()
            )));
        }

        let h = g.group_norm(h, self.out_groups, 1e-6)?;
        let h = g.silu(h);
        let out = self.conv_out.forward(g, p, h)?;
        Ok((out, st.trace))
    }

    /// Inference-only evaluation on plain tensors.
    pub fn denoise(&self, store: &ParamStore, y: &Tensor, z: &Tensor, t: &[usize]) -> Result<Tensor> {
        let mut g = Graph::inference();
        let p = store.bind(&mut g, false);
        let yv = g.constant(y.clone());
        let out = self.forward(&mut g, &p, yv, z, t)?;
        Ok(g.value(out).clone())
    }
}
