//! Reproducible synthetic image corpora.
//!
//! Every image is drawn from its own substream of `(seed, kind)`, so a corpus
//! is a pure function of its spec and individual files do not depend on the
//! order they are generated in.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::io::pnm::{self, Image};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    /// Two smooth templates with amplitude jitter and pixel noise; label `i % 2`.
    TwoModeGaussian,
    /// A filled circle or square on a flat background; label 0 = circle, 1 = square.
    Shapes,
    /// Checkerboards with random cell size, phase and contrast.
    Checkerboard,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::TwoModeGaussian => "two-mode-gaussian-images",
            DatasetKind::Shapes => "shapes",
            DatasetKind::Checkerboard => "checkerboard",
        }
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-mode-gaussian-images" | "two-mode" => Ok(DatasetKind::TwoModeGaussian),
            "shapes" => Ok(DatasetKind::Shapes),
            "checkerboard" => Ok(DatasetKind::Checkerboard),
            _ => Err(Error::Config(format!(
                "unknown dataset kind {s:?} (expected two-mode-gaussian-images, shapes or checkerboard)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDatasetSpec {
    pub kind: DatasetKind,
    pub resolution: usize,
    pub channels: usize,
    pub count: usize,
    pub seed: u64,
}

/// Images in `[-1, 1]` with optional class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]`.
    pub images: Tensor,
    pub labels: Option<Vec<usize>>,
}

/// Pixel noise standard deviation of the two-mode corpus.
pub const TWO_MODE_NOISE: f64 = 0.05;

/// Per-channel tints of the two modes (cycled for more than three channels).
const TINTS: [[f64; 3]; 2] = [[1.0, 0.7, 0.4], [0.4, 0.7, 1.0]];

fn two_mode_pixel(mode: usize, c: usize, u: f64, v: f64, amp: f64) -> f64 {
    let (cx, cy) = if mode == 0 { (0.3, 0.3) } else { (0.7, 0.7) };
    let r2 = (u - cx).powi(2) + (v - cy).powi(2);
    let bump = (-r2 / (2.0 * 0.2 * 0.2)).exp();
    -0.6 + 1.2 * amp * TINTS[mode][c % 3] * bump
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Noise-free class templates of the two-mode corpus, `[2, C, R, R]`.
    pub fn two_mode_templates(resolution: usize, channels: usize) -> Tensor {
        let r = resolution;
        Tensor::from_fn(&[2, channels, r, r], |i| {
            let (m, rest) = (i / (channels * r * r), i % (channels * r * r));
            let (c, p) = (rest / (r * r), rest % (r * r));
            let (y, x) = (p / r, p % r);
            two_mode_pixel(m, c, (x as f64 + 0.5) / r as f64, (y as f64 + 0.5) / r as f64, 1.0)
        })
    }

    pub fn generate(spec: &SyntheticDatasetSpec) -> Result<Dataset> {
        if spec.count == 0 || spec.resolution == 0 || spec.channels == 0 {
            return Err(Error::InvalidArgument(
                "dataset count, resolution and channels must be positive".into(),
            ));
        }
        let (r, c) = (spec.resolution, spec.channels);
        let base = RngStream::new(spec.seed, &format!("data/{}", spec.kind.name()));
        let mut data = Vec::with_capacity(spec.count * c * r * r);
        let mut labels = Vec::with_capacity(spec.count);
        for i in 0..spec.count {
            let mut rng = base.substream(&i.to_string());
            let (img, label) = render(spec.kind, i, r, c, &mut rng);
            // Stored images are 8-bit, so the in-memory corpus is too.
            data.extend(img.into_iter().map(|v| pnm::dequantize(pnm::quantize(v))));
            labels.push(label);
        }
        Ok(Dataset {
            images: Tensor::new(&[spec.count, c, r, r], data)?,
            labels: Some(labels),
        })
    }

    /// Writes `img_{i:05}.pgm|ppm` plus `labels.txt` (one label per line).
    pub fn write(&self, dir: &Path) -> Result<()> {
        let (n, c, _, _) = self.images.dims4()?;
        if c != 1 && c != 3 {
            return Err(Error::InvalidArgument(format!(
                "{c}-channel images cannot be stored as PGM/PPM"
            )));
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ext = if c == 1 { "pgm" } else { "ppm" };
        for i in 0..n {
            let img = Image::from_tensor(&self.images.narrow_batch(i, 1)?)?;
            pnm::write_image(&dir.join(format!("img_{i:05}.{ext}")), &img)?;
        }
        if let Some(labels) = &self.labels {
            let text: String = labels.iter().map(|l| format!("{l}\n")).collect();
            let path = dir.join("labels.txt");
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Loads a directory of images and, if present, its `labels.txt`.
    pub fn load(dir: &Path) -> Result<Dataset> {
        let images = pnm::load_images(dir)?;
        let path = dir.join("labels.txt");
        let labels = match fs::read_to_string(&path) {
            Ok(text) => {
                let mut offset = 0;
                let mut labels = Vec::new();
                for (i, raw) in text.split_inclusive('\n').enumerate() {
                    let l = raw.trim();
                    if !l.is_empty() || i == 0 {
                        labels.push(l.parse::<usize>().map_err(|_| Error::Format {
                            path: path.clone(),
                            offset,
                            msg: format!("line {}: invalid label {l:?}", i + 1),
                        })?);
                    }
                    offset += raw.len();
                }
                if labels.len() != images.shape()[0] {
                    return Err(Error::InvalidArgument(format!(
                        "{} has {} labels for {} images",
                        path.display(),
                        labels.len(),
                        images.shape()[0]
                    )));
                }
                Some(labels)
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(Error::io(&path, e)),
        };
        Ok(Dataset { images, labels })
    }

    /// Mean image of each label, `[K, C, H, W]` for labels `0..K`.
    pub fn class_means(&self) -> Result<Tensor> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("dataset has no labels".into()))?;
        let (n, c, h, w) = self.images.dims4()?;
        let k = labels.iter().max().map_or(0, |m| m + 1);
        let per = c * h * w;
        let mut sums = vec![0.0; k * per];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate().take(n) {
            counts[l] += 1;
            let src = &self.images.data()[i * per..(i + 1) * per];
            for (s, v) in sums[l * per..(l + 1) * per].iter_mut().zip(src) {
                *s += v;
            }
        }
        for (l, &cnt) in counts.iter().enumerate() {
            if cnt == 0 {
                return Err(Error::InvalidArgument(format!("label {l} has no images")));
            }
            sums[l * per..(l + 1) * per].iter_mut().for_each(|s| *s /= cnt as f64);
        }
        Tensor::new(&[k, c, h, w], sums)
    }
}

fn render(kind: DatasetKind, i: usize, r: usize, c: usize, rng: &mut RngStream) -> (Vec<f64>, usize) {
    let coords = |p: usize| ((p % r) as f64 + 0.5, (p / r) as f64 + 0.5);
    match kind {
        DatasetKind::TwoModeGaussian => {
            let mode = i % 2;
            let amp = 0.8 + 0.4 * rng.uniform();
            let mut out = Vec::with_capacity(c * r * r);
            for ch in 0..c {
                for p in 0..r * r {
                    let (x, y) = coords(p);
                    let v = two_mode_pixel(mode, ch, x / r as f64, y / r as f64, amp);
                    out.push(v + TWO_MODE_NOISE * rng.normal());
                }
            }
            (out, mode)
        }
        DatasetKind::Shapes => {
            let square = rng.uniform() < 0.5;
            let rf = r as f64;
            let size = rf * (0.15 + 0.15 * rng.uniform());
            let cx = size + (rf - 2.0 * size) * rng.uniform();
            let cy = size + (rf - 2.0 * size) * rng.uniform();
            let bg: Vec<f64> = (0..c).map(|_| -0.9 + 0.5 * rng.uniform()).collect();
            let fg: Vec<f64> = (0..c).map(|_| 0.2 + 0.7 * rng.uniform()).collect();
            let mut out = Vec::with_capacity(c * r * r);
            for ch in 0..c {
                for p in 0..r * r {
                    let (x, y) = coords(p);
                    let (dx, dy) = (x - cx, y - cy);
                    let inside = if square {
                        dx.abs() <= size && dy.abs() <= size
                    } else {
                        dx * dx + dy * dy <= size * size
                    };
                    out.push(if inside { fg[ch] } else { bg[ch] });
                }
            }
            (out, square as usize)
        }
        DatasetKind::Checkerboard => {
            let sizes: Vec<usize> = [2, 4, 8].into_iter().filter(|&s| s < r).collect();
            let cell = if sizes.is_empty() {
                1
            } else {
                sizes[rng.below(sizes.len() as u64) as usize]
            };
            let (ox, oy) = (rng.below(cell as u64) as usize, rng.below(cell as u64) as usize);
            let lo: Vec<f64> = (0..c).map(|_| -1.0 + 0.6 * rng.uniform()).collect();
            let hi: Vec<f64> = (0..c).map(|_| 0.4 + 0.6 * rng.uniform()).collect();
            let mut out = Vec::with_capacity(c * r * r);
            for ch in 0..c {
                for p in 0..r * r {
                    let (x, y) = (p % r + ox, p / r + oy);
                    let odd = (x / cell + y / cell) % 2 == 1;
                    out.push(if odd { hi[ch] } else { lo[ch] });
                }
            }
            (out, cell.trailing_zeros() as usize)
        }
    }
}

/// Index of the nearest (squared Euclidean) row of `means` for every image.
pub fn nearest_mode(images: &Tensor, means: &Tensor) -> Result<Vec<usize>> {
    let (n, c, h, w) = images.dims4()?;
    let (k, mc, mh, mw) = means.dims4()?;
    if (c, h, w) != (mc, mh, mw) || k == 0 {
        return Err(Error::Shape(format!(
            "images {:?} incompatible with mode means {:?}",
            images.shape(),
            means.shape()
        )));
    }
    let per = c * h * w;
    Ok((0..n)
        .map(|i| {
            let x = &images.data()[i * per..(i + 1) * per];
            (0..k)
                .map(|j| {
                    let m = &means.data()[j * per..(j + 1) * per];
                    x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                })
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(j, _)| j)
                .expect("k > 0")
        })
        .collect())
}

/// Smallest fraction of `images` assigned to any one mode.
pub fn mode_coverage(images: &Tensor, means: &Tensor) -> Result<f64> {
    let assign = nearest_mode(images, means)?;
    let k = means.shape()[0];
    let mut counts = vec![0usize; k];
    assign.iter().for_each(|&j| counts[j] += 1);
    let n = assign.len().max(1) as f64;
    Ok(counts.iter().map(|&c| c as f64 / n).fold(f64::INFINITY, f64::min))
}

/// Per-channel mean and (population) variance of `[N, C, H, W]`.
pub fn channel_moments(images: &Tensor) -> Result<Vec<(f64, f64)>> {
    let (n, c, h, w) = images.dims4()?;
    let hw = h * w;
    Ok((0..c)
        .map(|ch| {
            let vals = (0..n).flat_map(|i| {
                let off = (i * c + ch) * hw;
                images.data()[off..off + hw].iter().copied()
            });
            let cnt = (n * hw) as f64;
            let mean = vals.clone().sum::<f64>() / cnt;
            let var = vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / cnt;
            (mean, var)
        })
        .collect())
}

/// Largest absolute per-channel difference of means or variances.
pub fn moment_error(samples: &Tensor, reference: &Tensor) -> Result<f64> {
    let a = channel_moments(samples)?;
    let b = channel_moments(reference)?;
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} channels", a.len(), b.len())));
    }
    Ok(a.iter()
        .zip(&b)
        .map(|(x, y)| (x.0 - y.0).abs().max((x.1 - y.1).abs()))
        .fold(0.0, f64::max))
}
