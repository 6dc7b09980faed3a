//! Analytic parameter, FLOP and memory accounting.
//!
//! The walkers here re-derive every layer from the spec without touching the
//! network code, so their parameter totals cross-check the live models.
//!
//! Conventions (batch 1):
//! - FLOPs are 2 × multiply-accumulates of convolutions, dense layers and the
//!   two attention matmuls; normalization, activations and additions are
//!   not counted.
//! - A Haar DWT or IDWT of `C×H×W` is four depthwise stride-2 2×2
//!   convolutions: `8·C·H·W` FLOPs.
//! - Memory is f32 bytes of the parameters plus the peak of live
//!   activations (stashed skips and subbands, plus the current layer's input
//!   and output).

use std::fmt::Write as _;

use crate::networks::GeneratorSpec;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCost {
    pub name: String,
    pub kind: &'static str,
    /// Output spatial extent.
    pub resolution: usize,
    pub params: usize,
    pub flops: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub params: usize,
    pub flops: u64,
    pub peak_activations: u64,
}

impl CostReport {
    /// f32 bytes of parameters plus peak live activations.
    pub fn memory_bytes(&self) -> u64 {
        4 * (self.params as u64 + self.peak_activations)
    }

    /// Aligned per-layer table with a totals row.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<32} {:<10} {:>5} {:>12} {:>16}\n",
            "layer", "kind", "res", "params", "flops"
        );
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{:<32} {:<10} {:>5} {:>12} {:>16}",
                l.name, l.kind, l.resolution, l.params, l.flops
            );
        }
        let _ = writeln!(
            s,
            "{:<32} {:<10} {:>5} {:>12} {:>16}",
            "total", "", "", self.params, self.flops
        );
        s
    }
}

/// Image-space UNet of the NCSN++/DDGAN family with the same conditioning
/// (latent mapping, adaptive group norm, time embedding) as the wavelet
/// generator. Down and up blocks are residual blocks whose convolutions run
/// at the target resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelUNetSpec {
    pub image_channels: usize,
    pub resolution: usize,
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub resblocks: usize,
    pub attention_resolutions: Vec<usize>,
    pub latent_dim: usize,
    pub mapping_layers: usize,
    pub latent_embed_dim: usize,
}

impl PixelUNetSpec {
    /// Same widths, depth and attention levels as `g`, operating on pixels.
    pub fn matching(g: &GeneratorSpec) -> Self {
        let scale = g.image_resolution / g.resolution();
        PixelUNetSpec {
            image_channels: g.image_channels,
            resolution: g.image_resolution,
            base_channels: g.base_channels,
            channel_mult: g.channel_mult.clone(),
            resblocks: g.resblocks,
            attention_resolutions: g.attention_resolutions.iter().map(|r| r * scale).collect(),
            latent_dim: g.latent_dim,
            mapping_layers: g.mapping_layers,
            latent_embed_dim: g.latent_embed_dim,
        }
    }

    /// The pixel-space diffusion GAN baseline used for 32×32 RGB.
    pub fn ddgan_cifar10() -> Self {
        PixelUNetSpec {
            image_channels: 3,
            resolution: 32,
            base_channels: 128,
            channel_mult: vec![1, 2, 2, 2],
            resblocks: 2,
            attention_resolutions: vec![16],
            latent_dim: 100,
            mapping_layers: 4,
            latent_embed_dim: 256,
        }
    }
}

struct Walker {
    report: CostReport,
    prefix: String,
    tdim: usize,
    zdim: usize,
    /// Elements of stashed skip/subband tensors.
    stash: Vec<u64>,
}

impl Walker {
    fn new(tdim: usize, zdim: usize) -> Self {
        Walker {
            report: CostReport::default(),
            prefix: String::new(),
            tdim,
            zdim,
            stash: Vec::new(),
        }
    }

    fn push(&mut self, name: &str, kind: &'static str, resolution: usize, params: usize, flops: u64) {
        self.report.params += params;
        self.report.flops += flops;
        self.report.layers.push(LayerCost {
            name: format!("{}{name}", self.prefix),
            kind,
            resolution,
            params,
            flops,
        });
    }

    fn live(&mut self, in_elems: u64, out_elems: u64) {
        let total = self.stash.iter().sum::<u64>() + in_elems + out_elems;
        self.report.peak_activations = self.report.peak_activations.max(total);
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, res_in: usize, res_out: usize) {
        let flops = 2 * (cin * cout * k * k * res_out * res_out) as u64;
        self.push(name, "conv", res_out, cout * cin * k * k + cout, flops);
        self.live((cin * res_in * res_in) as u64, (cout * res_out * res_out) as u64);
    }

    fn dense(&mut self, name: &str, n_in: usize, n_out: usize) {
        self.push(name, "dense", 1, n_in * n_out + n_out, 2 * (n_in * n_out) as u64);
    }

    fn haar(&mut self, name: &str, kind: &'static str, ch: usize, res_in: usize, res_out: usize) {
        let hw = res_in.max(res_out);
        self.push(name, kind, res_out, 0, 8 * (ch * hw * hw) as u64);
        self.live((ch * res_in * res_in) as u64, (ch * res_in * res_in) as u64);
    }

    fn ada_norm(&mut self, name: &str, ch: usize) {
        self.dense(&format!("{name}.gamma"), self.zdim, ch);
        self.dense(&format!("{name}.beta"), self.zdim, ch);
    }

    fn resblock(&mut self, name: &str, cin: usize, cout: usize, res_in: usize, res_out: usize) {
        self.ada_norm(&format!("{name}.norm1"), cin);
        self.conv(&format!("{name}.conv1"), cin, cout, 3, res_in, res_out);
        self.dense(&format!("{name}.temb"), self.tdim, cout);
        self.ada_norm(&format!("{name}.norm2"), cout);
        self.conv(&format!("{name}.conv2"), cout, cout, 3, res_out, res_out);
        if cin != cout {
            self.conv(&format!("{name}.skip"), cin, cout, 1, res_out, res_out);
        }
    }

    fn attention(&mut self, name: &str, ch: usize, res: usize) {
        self.conv(&format!("{name}.q"), ch, ch, 1, res, res);
        // The key projection carries no bias.
        self.push(
            &format!("{name}.k"),
            "conv",
            res,
            ch * ch,
            2 * (ch * ch * res * res) as u64,
        );
        self.conv(&format!("{name}.v"), ch, ch, 1, res, res);
        let n = (res * res) as u64;
        self.push(
            &format!("{name}.softmax_qk_v"),
            "attention",
            res,
            0,
            4 * n * n * ch as u64,
        );
        self.live(3 * n * ch as u64, n * n);
        self.conv(&format!("{name}.out"), ch, ch, 1, res, res);
    }

    fn conditioning(&mut self, latent_dim: usize, mapping_layers: usize, base: usize) {
        for i in 0..mapping_layers {
            let n_in = if i == 0 { latent_dim } else { self.zdim };
            self.dense(&format!("map{i}"), n_in, self.zdim);
        }
        self.dense("temb1", base, self.tdim);
        self.dense("temb2", self.tdim, self.tdim);
    }
}

/// Costs of the wavelet-space generator for `spec` at batch 1.
pub fn generator_costs(spec: &GeneratorSpec) -> CostReport {
    let s = spec;
    let m = s.levels();
    let r0 = s.resolution();
    let mut w = Walker::new(s.time_embed_dim(), s.latent_embed_dim);
    w.prefix = "g.".into();
    w.conditioning(s.latent_dim, s.mapping_layers, s.base_channels);
    let attn_at = |res: usize| s.attention_resolutions.contains(&res);

    w.conv("conv_in", s.in_channels(), s.base_channels, 3, r0, r0);
    let mut skips = vec![(s.base_channels, r0)];
    w.stash.push((s.base_channels * r0 * r0) as u64);
    let mut cur = s.base_channels;
    let mut highs = Vec::new();
    for i in 0..m {
        let (ch, res) = (s.channels(i), r0 >> i);
        for r in 0..s.resblocks {
            let name = format!("enc{i}.res{r}");
            w.resblock(&name, cur, ch, res, res);
            if attn_at(res) {
                w.attention(&format!("{name}.attn"), ch, res);
            }
            cur = ch;
            skips.push((cur, res));
            w.stash.push((cur * res * res) as u64);
        }
        if i + 1 < m {
            let name = format!("enc{i}.down");
            w.resblock(&format!("{name}.res"), cur, cur, res, res);
            w.haar(&format!("{name}.dwt"), "dwt", cur, res, res / 2);
            highs.push(cur);
            w.stash.push((3 * cur * (res / 2) * (res / 2)) as u64);
            let pyr_ch = s.in_channels() << (2 * i);
            w.haar(&format!("enc{i}.residual.dwt"), "dwt", pyr_ch, res, res / 2);
            w.conv(&format!("enc{i}.residual"), 4 * pyr_ch, cur, 1, res / 2, res / 2);
            skips.push((cur, res / 2));
            w.stash.push((cur * (res / 2) * (res / 2)) as u64);
        }
    }
    let rm = r0 >> (m - 1);
    for (k, name) in ["mid.freq1", "mid.freq2"].into_iter().enumerate() {
        w.haar(&format!("{name}.dwt"), "dwt", cur, rm, rm / 2);
        w.resblock(&format!("{name}.res"), cur, cur, rm / 2, rm / 2);
        w.haar(&format!("{name}.idwt"), "idwt", 4 * cur, rm / 2, rm);
        if k == 0 {
            w.attention("mid.attn", cur, rm);
        }
    }
    for i in (0..m).rev() {
        let (ch, res) = (s.channels(i), r0 >> i);
        let mut plain = s.resblocks + 1;
        if i + 1 < m {
            plain -= 1;
            let (sc, _) = skips.pop().expect("skip bookkeeping");
            w.stash.pop();
            highs.pop();
            w.stash.pop();
            let name = format!("dec{i}.up");
            w.conv(&format!("{name}.fuse"), cur + 3 * ch, 4 * ch, 1, res / 2, res / 2);
            w.haar(&format!("{name}.idwt"), "idwt", 4 * ch, res / 2, res);
            w.resblock(&format!("{name}.res"), ch + sc, ch, res, res);
            if attn_at(res) {
                w.attention(&format!("{name}.attn"), ch, res);
            }
            cur = ch;
        }
        for r in 0..plain {
            let (sc, _) = skips.pop().expect("skip bookkeeping");
            w.stash.pop();
            let name = format!("dec{i}.res{r}");
            w.resblock(&name, cur + sc, ch, res, res);
            if attn_at(res) {
                w.attention(&format!("{name}.attn"), ch, res);
            }
            cur = ch;
        }
    }
    w.conv("conv_out", cur, s.in_channels(), 3, r0, r0);
    w.report
}

/// Costs of an image-space UNet at batch 1.
pub fn pixel_unet_costs(spec: &PixelUNetSpec) -> CostReport {
    let s = spec;
    let m = s.channel_mult.len();
    let r0 = s.resolution;
    let ch_at = |i: usize| s.base_channels * s.channel_mult[i];
    let attn_at = |res: usize| s.attention_resolutions.contains(&res);
    let mut w = Walker::new(4 * s.base_channels, s.latent_embed_dim);
    w.prefix = "pixel.".into();
    w.conditioning(s.latent_dim, s.mapping_layers, s.base_channels);

    w.conv("conv_in", s.image_channels, s.base_channels, 3, r0, r0);
    let mut skips = vec![s.base_channels];
    w.stash.push((s.base_channels * r0 * r0) as u64);
    let mut cur = s.base_channels;
    for i in 0..m {
        let (ch, res) = (ch_at(i), r0 >> i);
        for r in 0..s.resblocks {
            let name = format!("enc{i}.res{r}");
            w.resblock(&name, cur, ch, res, res);
            if attn_at(res) {
                w.attention(&format!("{name}.attn"), ch, res);
            }
            cur = ch;
            skips.push(cur);
            w.stash.push((cur * res * res) as u64);
        }
        if i + 1 < m {
            w.resblock(&format!("enc{i}.down"), cur, cur, res, res / 2);
            // Input pyramid shortcut: average-pooled image, 1×1 projection.
            w.conv(&format!("enc{i}.residual"), s.image_channels, cur, 1, res / 2, res / 2);
            skips.push(cur);
            w.stash.push((cur * (res / 2) * (res / 2)) as u64);
        }
    }
    let rm = r0 >> (m - 1);
    w.resblock("mid.res0", cur, cur, rm, rm);
    w.attention("mid.attn", cur, rm);
    w.resblock("mid.res1", cur, cur, rm, rm);
    for i in (0..m).rev() {
        let (ch, res) = (ch_at(i), r0 >> i);
        for r in 0..=s.resblocks {
            let sc = skips.pop().expect("skip bookkeeping");
            w.stash.pop();
            let name = format!("dec{i}.res{r}");
            w.resblock(&name, cur + sc, ch, res, res);
            cur = ch;
        }
        if attn_at(res) {
            w.attention(&format!("dec{i}.attn"), ch, res);
        }
        if i > 0 {
            w.resblock(&format!("dec{i}.up"), cur, cur, res, res * 2);
        }
    }
    w.conv("conv_out", cur, s.image_channels, 3, r0, r0);
    w.report
}

/// Wavelet generator vs its equal-width pixel-space counterpart.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub wavelet: CostReport,
    pub pixel: CostReport,
}

impl Comparison {
    pub fn for_spec(spec: &GeneratorSpec) -> Self {
        Comparison {
            wavelet: generator_costs(spec),
            pixel: pixel_unet_costs(&PixelUNetSpec::matching(spec)),
        }
    }

    /// Pixel FLOPs divided by wavelet FLOPs.
    pub fn flops_ratio(&self) -> f64 {
        self.pixel.flops as f64 / self.wavelet.flops as f64
    }

    pub fn memory_ratio(&self) -> f64 {
        self.pixel.memory_bytes() as f64 / self.wavelet.memory_bytes() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_convention() {
        let mut w = Walker::new(4, 4);
        w.conv("c", 3, 8, 3, 16, 16);
        assert_eq!(w.report.flops, 2 * 3 * 8 * 9 * 256);
        assert_eq!(w.report.params, 8 * 27 + 8);
    }

    #[test]
    fn haar_is_four_depthwise_convs() {
        let mut w = Walker::new(4, 4);
        w.haar("d", "dwt", 5, 8, 4);
        // 4 kernels × 5 channels × 16 outputs × 4 taps × 2
        assert_eq!(w.report.flops, 4 * 5 * 16 * 4 * 2);
    }

    #[test]
    fn attention_matmuls() {
        let mut w = Walker::new(4, 4);
        w.attention("a", 2, 2);
        let convs = 4 * 2 * (2 * 2 * 4) as u64;
        assert_eq!(w.report.flops, convs + 4 * 16 * 2);
    }

    #[test]
    fn table_has_totals() {
        let r = generator_costs(&GeneratorSpec::desk());
        let t = r.table();
        assert!(t.lines().last().unwrap().contains(&r.params.to_string()));
        assert_eq!(t.lines().count(), r.layers.len() + 2);
    }
}
