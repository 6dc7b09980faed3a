//! Wavelet-embedded generator, conditional discriminator and their
//! declarative specs.

mod blocks;
mod discriminator;
mod generator;

pub use blocks::{AttnBlock, Conditioning, FreqBottleneck, FreqDown, FreqUp, ResBlock};
pub use discriminator::Discriminator;
pub use generator::{ForwardTrace, Generator};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Group count used by every normalization layer for `channels` channels.
pub fn norm_groups(channels: usize) -> usize {
    (channels / 4).clamp(1, 32)
}

/// Sinusoidal embedding of integer step indices: `[sin(t·f_k), cos(t·f_k)]`
/// with `f_k = 10000^(-k/(half-1))`.
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let denom = (half.max(2) - 1) as f64;
    let mut out = Tensor::zeros(&[ts.len(), dim]);
    let d = out.data_mut();
    for (b, &t) in ts.iter().enumerate() {
        for k in 0..half {
            let f = (-(10000f64).ln() * k as f64 / denom).exp();
            d[b * dim + k] = (t as f64 * f).sin();
            d[b * dim + half + k] = (t as f64 * f).cos();
        }
    }
    out
}

/// Scales each latent row to unit root-mean-square.
pub fn pixel_norm(z: &Tensor) -> Result<Tensor> {
    let (b, n) = z.dims2()?;
    let mut out = z.clone();
    for row in out.data_mut().chunks_mut(n.max(1)).take(b) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let s = 1.0 / (ms + 1e-8).sqrt();
        row.iter_mut().for_each(|v| *v *= s);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorSpec {
    /// Pixel-space channels (3 RGB, 1 grayscale); the network sees `4×` this.
    pub image_channels: usize,
    /// Pixel-space resolution; the network runs at half of it.
    pub image_resolution: usize,
    pub base_channels: usize,
    /// One entry per level `M`.
    pub channel_mult: Vec<usize>,
    pub resblocks: usize,
    /// Feature resolutions (network space) that get self-attention.
    pub attention_resolutions: Vec<usize>,
    pub latent_dim: usize,
    pub mapping_layers: usize,
    pub latent_embed_dim: usize,
}

impl GeneratorSpec {
    /// 32×32 RGB → 12×16×16, three levels.
    pub fn desk() -> Self {
        GeneratorSpec {
            image_channels: 3,
            image_resolution: 32,
            base_channels: 32,
            channel_mult: vec![1, 2, 2],
            resblocks: 2,
            attention_resolutions: vec![8],
            latent_dim: 100,
            mapping_layers: 4,
            latent_embed_dim: 256,
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_mult.len()
    }

    pub fn in_channels(&self) -> usize {
        4 * self.image_channels
    }

    /// Spatial extent of the wavelet input.
    pub fn resolution(&self) -> usize {
        self.image_resolution / 2
    }

    pub fn time_embed_dim(&self) -> usize {
        4 * self.base_channels
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mult[level]
    }

    /// Same topology with a different base width (used to exercise full-scale
    /// topologies cheaply).
    pub fn with_base_channels(&self, base: usize) -> Self {
        GeneratorSpec {
            base_channels: base,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_channels == 0 || self.base_channels == 0 || self.latent_dim == 0 {
            return bad("channel counts and latent_dim must be positive".into());
        }
        if self.channel_mult.is_empty() || self.channel_mult.contains(&0) {
            return bad(format!("invalid channel multipliers {:?}", self.channel_mult));
        }
        if self.mapping_layers == 0 || self.latent_embed_dim == 0 {
            return bad("latent mapping needs at least one layer of positive width".into());
        }
        let m = self.levels();
        // One DWT per down block plus one inside the bottleneck.
        let div = 1usize << m;
        if !self.image_resolution.is_multiple_of(2) || !self.resolution().is_multiple_of(div) {
            return bad(format!(
                "image resolution {} incompatible with {} levels (network input must be divisible by {})",
                self.image_resolution, m, div
            ));
        }
        for i in 0..m {
            let c = self.channels(i);
            if !c.is_multiple_of(norm_groups(c)) {
                return bad(format!("level {i}: {c} channels not divisible into norm groups"));
            }
        }
        if self.time_embed_dim() < 2 {
            return bad("time embedding too small".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorSpec {
    /// Channels of one member of the pair.
    pub in_channels: usize,
    pub resolution: usize,
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub time_embed_dim: usize,
}

impl DiscriminatorSpec {
    /// Same depth and widths as the generator.
    pub fn matching(g: &GeneratorSpec) -> Self {
        DiscriminatorSpec {
            in_channels: g.in_channels(),
            resolution: g.resolution(),
            base_channels: g.base_channels,
            channel_mult: g.channel_mult.clone(),
            time_embed_dim: g.time_embed_dim(),
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_mult.len()
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mult[level]
    }

    pub fn validate(&self) -> Result<()> {
        let div = 1usize << self.levels();
        if !self.resolution.is_multiple_of(div) {
            return Err(Error::Config(format!(
                "discriminator resolution {} not divisible by {}",
                self.resolution, div
            )));
        }
        Ok(())
    }
}

/// Named full-scale and desk presets with their default step counts.
#[derive(Clone, Debug)]
pub struct Preset {
    pub name: &'static str,
    pub spec: GeneratorSpec,
    pub steps: usize,
}

fn full_scale(res: usize, base: usize, mult: &[usize], attn: &[usize]) -> GeneratorSpec {
    GeneratorSpec {
        image_channels: 3,
        image_resolution: res,
        base_channels: base,
        channel_mult: mult.to_vec(),
        resblocks: 2,
        attention_resolutions: attn.to_vec(),
        latent_dim: 100,
        mapping_layers: 4,
        latent_embed_dim: 256,
    }
}

pub fn presets() -> Vec<Preset> {
    vec![
        Preset {
            name: "desk",
            spec: GeneratorSpec::desk(),
            steps: 4,
        },
        Preset {
            name: "cifar10",
            spec: full_scale(32, 128, &[1, 2, 2], &[]),
            steps: 4,
        },
        Preset {
            name: "stl10",
            spec: full_scale(64, 128, &[1, 2, 2, 2], &[16]),
            steps: 4,
        },
        Preset {
            name: "celeba256",
            spec: full_scale(256, 64, &[1, 2, 2, 2, 4], &[16]),
            steps: 2,
        },
        Preset {
            name: "celeba512",
            spec: full_scale(512, 64, &[1, 1, 2, 2, 4, 4], &[16]),
            steps: 2,
        },
        Preset {
            name: "lsun-church",
            spec: full_scale(256, 64, &[1, 2, 2, 2, 4], &[16]),
            steps: 4,
        },
    ]
}

pub fn preset(name: &str) -> Result<Preset> {
    presets()
        .into_iter()
        .find(|p| p.name == name)
        .ok_or_else(|| Error::Config(format!("unknown preset {name}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in presets() {
            p.spec.validate().unwrap_or_else(|e| panic!("{}: {e}", p.name));
            DiscriminatorSpec::matching(&p.spec).validate().unwrap();
        }
    }

    #[test]
    fn desk_shapes() {
        let s = GeneratorSpec::desk();
        assert_eq!(s.in_channels(), 12);
        assert_eq!(s.resolution(), 16);
        assert_eq!(s.time_embed_dim(), 128);
    }

    #[test]
    fn embedding_values() {
        let e = timestep_embedding(&[0, 3], 8);
        assert_eq!(&e.data()[..8], &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert!((e.data()[8] - 3f64.sin()).abs() < 1e-15);
        assert!((e.data()[12] - 3f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn pixel_norm_unit_rms() {
        let z = Tensor::from_fn(&[2, 5], |i| i as f64 - 3.0);
        let n = pixel_norm(&z).unwrap();
        for row in n.data().chunks(5) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / 5.0;
            assert!((ms - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_indivisible_resolution() {
        let mut s = GeneratorSpec::desk();
        s.image_resolution = 24;
        assert!(s.validate().is_err());
    }
}
