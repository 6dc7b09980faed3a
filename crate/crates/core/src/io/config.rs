//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Unknown and repeated keys are errors. [`KEYS`] lists every key with its
//! default. The original text is kept verbatim in [`RunConfig::text`] and is
//! what checkpoints store.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use crate::diffusion::{make_schedule, DiffusionSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::io::dataset::{Dataset, DatasetKind, SyntheticDatasetSpec};
use crate::networks::{preset, GeneratorSpec};
use crate::training::TrainConfig;

/// Environment variable consulted when no seed is given explicitly.
pub const SEED_ENV: &str = "WAVEDIFF_SEED";

/// Every accepted key with its default and meaning.
pub const KEYS: &[(&str, &str, &str)] = &[
    (
        "model.preset",
        "desk",
        "architecture preset the other model.* keys modify",
    ),
    ("model.base_channels", "preset", "width of the first level"),
    (
        "model.channel_mult",
        "preset",
        "comma-separated per-level width multipliers",
    ),
    ("model.resblocks", "preset", "residual blocks per level"),
    (
        "model.attention_resolutions",
        "preset",
        "comma-separated resolutions with self-attention, or none",
    ),
    ("model.latent_dim", "preset", "dimension of the latent z"),
    ("model.mapping_layers", "preset", "depth of the latent mapping network"),
    ("model.latent_embed_dim", "preset", "width of the latent embedding"),
    ("diffusion.steps", "preset (4 for desk)", "number of denoising steps T"),
    (
        "diffusion.schedule",
        "geometric-alpha-bar",
        "geometric-alpha-bar, linear-beta or vp",
    ),
    ("diffusion.beta_min", "0.1", "geometric: 1 - alpha_bar_1; vp: beta(0)"),
    ("diffusion.alpha_bar_final", "0.001", "geometric: alpha_bar_T"),
    ("diffusion.beta_start", "0.1", "linear-beta: beta_1"),
    ("diffusion.beta_end", "0.9", "linear-beta: beta_T"),
    ("diffusion.beta_max", "20", "vp: beta(1)"),
    ("train.lr_g", "1.6e-4", "generator learning rate"),
    ("train.lr_d", "1.25e-4", "discriminator learning rate"),
    ("train.batch", "16", "batch size"),
    ("train.epochs", "200", "passes over the dataset"),
    ("train.lambda_rec", "1", "weight of the reconstruction term"),
    ("train.ema_decay", "0.999", "EMA decay of the generator weights"),
    ("train.r1_gamma", "0.05", "R1 penalty weight (0 disables)"),
    ("train.r1_every", "4", "apply R1 every this many steps"),
    ("train.seed", "$WAVEDIFF_SEED or 0", "master seed"),
    (
        "train.reuse_draws",
        "true",
        "reuse the discriminator step's draws for the generator step",
    ),
    ("train.eval_every", "100", "steps between metric rows (0 = final only)"),
    ("train.eval_samples", "64", "samples drawn per evaluation"),
    ("train.ckpt_every", "1000", "steps between checkpoints (0 = final only)"),
    ("train.sample_with_ema", "true", "evaluate and sample with EMA weights"),
    (
        "data.source",
        "two-mode-gaussian-images",
        "synthetic kind, or dir to load data.dir",
    ),
    ("data.dir", "", "directory of PGM/PPM images when data.source = dir"),
    ("data.resolution", "32", "image side length"),
    ("data.channels", "3", "1 (grey) or 3 (RGB)"),
    ("data.count", "1024", "synthetic corpus size"),
    ("data.seed", "train.seed", "synthetic corpus seed"),
];

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticDatasetSpec),
    Dir(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// The input text, byte for byte.
    pub text: String,
    pub model: GeneratorSpec,
    pub steps: usize,
    pub schedule: ScheduleKind,
    pub train: TrainConfig,
    pub data: DataSource,
}

struct Entries {
    map: BTreeMap<String, (String, usize)>,
}

impl Entries {
    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.map.remove(key) {
            None => Ok(None),
            Some((v, line)) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("line {line}: invalid value {v:?} for {key}"))),
        }
    }

    fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    fn list(&mut self, key: &str) -> Result<Option<Vec<usize>>> {
        match self.map.remove(key) {
            None => Ok(None),
            Some((v, _)) if v == "none" || v.is_empty() => Ok(Some(Vec::new())),
            Some((v, line)) => v
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Some)
                .map_err(|_| Error::Config(format!("line {line}: invalid list {v:?} for {key}"))),
        }
    }
}

impl RunConfig {
    /// Parses `text`, taking the seed fallback from [`SEED_ENV`].
    pub fn parse(text: &str) -> Result<RunConfig> {
        let env_seed = match std::env::var(SEED_ENV) {
            Ok(s) => Some(
                s.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?,
            ),
            Err(_) => None,
        };
        Self::parse_with_seed_fallback(text, env_seed)
    }

    /// Parses `text`; `fallback_seed` applies when `train.seed` is absent.
    pub fn parse_with_seed_fallback(text: &str, fallback_seed: Option<u64>) -> Result<RunConfig> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.iter().any(|(key, _, _)| *key == k) {
                return Err(Error::Config(format!("line {}: unknown key {k:?}", i + 1)));
            }
            if map.insert(k.to_string(), (v.to_string(), i + 1)).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", i + 1)));
            }
        }
        let mut e = Entries { map };

        let preset_name: String = e.take("model.preset")?.unwrap_or_else(|| "desk".into());
        let p = preset(&preset_name)?;
        let mut model = p.spec;
        e.set("model.base_channels", &mut model.base_channels)?;
        if let Some(m) = e.list("model.channel_mult")? {
            model.channel_mult = m;
        }
        e.set("model.resblocks", &mut model.resblocks)?;
        if let Some(a) = e.list("model.attention_resolutions")? {
            model.attention_resolutions = a;
        }
        e.set("model.latent_dim", &mut model.latent_dim)?;
        e.set("model.mapping_layers", &mut model.mapping_layers)?;
        e.set("model.latent_embed_dim", &mut model.latent_embed_dim)?;
        model.image_resolution = e.take("data.resolution")?.unwrap_or(32);
        model.image_channels = e.take("data.channels")?.unwrap_or(3);
        model.validate()?;

        let steps = e.take("diffusion.steps")?.unwrap_or(p.steps);
        let kind: String = e
            .take("diffusion.schedule")?
            .unwrap_or_else(|| "geometric-alpha-bar".into());
        let schedule = match kind.as_str() {
            "geometric-alpha-bar" => ScheduleKind::GeometricAlphaBar {
                beta_min: e.take("diffusion.beta_min")?.unwrap_or(0.1),
                alpha_bar_final: e.take("diffusion.alpha_bar_final")?.unwrap_or(1e-3),
            },
            "linear-beta" => ScheduleKind::LinearBeta {
                beta_start: e.take("diffusion.beta_start")?.unwrap_or(0.1),
                beta_end: e.take("diffusion.beta_end")?.unwrap_or(0.9),
            },
            "vp" => ScheduleKind::Vp {
                beta_min: e.take("diffusion.beta_min")?.unwrap_or(0.1),
                beta_max: e.take("diffusion.beta_max")?.unwrap_or(20.0),
            },
            other => return Err(Error::Config(format!("unknown diffusion.schedule {other:?}"))),
        };
        make_schedule(steps, schedule)?;

        let mut train = TrainConfig::default();
        e.set("train.lr_g", &mut train.lr_g)?;
        e.set("train.lr_d", &mut train.lr_d)?;
        e.set("train.batch", &mut train.batch)?;
        e.set("train.epochs", &mut train.epochs)?;
        e.set("train.lambda_rec", &mut train.lambda_rec)?;
        e.set("train.ema_decay", &mut train.ema_decay)?;
        e.set("train.r1_gamma", &mut train.r1_gamma)?;
        e.set("train.r1_every", &mut train.r1_every)?;
        train.seed = e.take("train.seed")?.or(fallback_seed).unwrap_or(0);
        e.set("train.reuse_draws", &mut train.reuse_draws)?;
        e.set("train.eval_every", &mut train.eval_every)?;
        e.set("train.eval_samples", &mut train.eval_samples)?;
        e.set("train.ckpt_every", &mut train.ckpt_every)?;
        e.set("train.sample_with_ema", &mut train.sample_with_ema)?;
        train.validate()?;

        let source: String = e
            .take("data.source")?
            .unwrap_or_else(|| "two-mode-gaussian-images".into());
        let dir: Option<String> = e.take("data.dir")?;
        let count = e.take("data.count")?.unwrap_or(1024);
        let data_seed = e.take("data.seed")?.unwrap_or(train.seed);
        let data = if source == "dir" {
            match dir {
                Some(d) if !d.is_empty() => DataSource::Dir(PathBuf::from(d)),
                _ => return Err(Error::Config("data.source = dir requires data.dir".into())),
            }
        } else {
            DataSource::Synthetic(SyntheticDatasetSpec {
                kind: source.parse::<DatasetKind>()?,
                resolution: model.image_resolution,
                channels: model.image_channels,
                count,
                seed: data_seed,
            })
        };

        // Keys that exist but do not apply to the chosen schedule.
        if let Some((k, (_, line))) = e.map.iter().next() {
            return Err(Error::Config(format!(
                "line {line}: {k} does not apply to diffusion.schedule = {kind}"
            )));
        }
        Ok(RunConfig {
            text: text.to_string(),
            model,
            steps,
            schedule,
            train,
            data,
        })
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.steps, self.schedule)
    }

    /// Generates or loads the training images and checks their size.
    pub fn dataset(&self) -> Result<Dataset> {
        let ds = match &self.data {
            DataSource::Synthetic(spec) => Dataset::generate(spec)?,
            DataSource::Dir(dir) => Dataset::load(dir)?,
        };
        let (_, c, h, w) = ds.images.dims4()?;
        let r = self.model.image_resolution;
        if (c, h, w) != (self.model.image_channels, r, r) {
            return Err(Error::Config(format!(
                "dataset images are {c}x{h}x{w}, config expects {}x{r}x{r}",
                self.model.image_channels
            )));
        }
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::parse_with_seed_fallback("", None).unwrap();
        assert_eq!(c.model, GeneratorSpec::desk());
        assert_eq!(c.steps, 4);
        assert_eq!(c.schedule, ScheduleKind::default_geometric());
        assert_eq!(c.train, TrainConfig::default());
        match c.data {
            DataSource::Synthetic(s) => assert_eq!((s.count, s.resolution, s.channels), (1024, 32, 3)),
            _ => panic!(),
        }
    }

    #[test]
    fn overrides_comments_and_echo() {
        let text = "# smoke\nmodel.channel_mult = 1,2\nmodel.attention_resolutions = none\n\
                    data.resolution = 8  # tiny\ntrain.seed=9\ndiffusion.schedule = vp\ndiffusion.beta_max = 10\n";
        let c = RunConfig::parse_with_seed_fallback(text, Some(3)).unwrap();
        assert_eq!(c.text, text);
        assert_eq!(c.model.channel_mult, vec![1, 2]);
        assert!(c.model.attention_resolutions.is_empty());
        assert_eq!(c.model.image_resolution, 8);
        assert_eq!(c.train.seed, 9);
        assert_eq!(
            c.schedule,
            ScheduleKind::Vp {
                beta_min: 0.1,
                beta_max: 10.0
            }
        );
    }

    #[test]
    fn seed_fallback() {
        let c = RunConfig::parse_with_seed_fallback("", Some(3)).unwrap();
        assert_eq!(c.train.seed, 3);
        match c.data {
            DataSource::Synthetic(s) => assert_eq!(s.seed, 3),
            _ => panic!(),
        }
    }

    #[test]
    fn rejects_bad_input() {
        for (text, needle) in [
            ("train.lr = 1", "unknown key"),
            ("train.batch = 2\ntrain.batch = 3", "duplicate"),
            ("train.batch = many", "invalid value"),
            ("justtext", "expected key"),
            ("diffusion.beta_max = 3", "does not apply"),
            ("data.source = dir", "data.dir"),
            ("data.resolution = 12", "incompatible"),
            ("model.preset = imagenet", "unknown preset"),
        ] {
            let e = RunConfig::parse_with_seed_fallback(text, None).unwrap_err().to_string();
            assert!(e.contains(needle), "{text:?}: {e}");
        }
    }
}
