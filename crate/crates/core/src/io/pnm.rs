//! Binary PGM (P5) / PPM (P6) images with 8-bit samples.
//!
//! Pixels map to `[-1, 1]` as `v/127.5 − 1`; the inverse clamps to `[-1, 1]`
//! and rounds `127.5·(v+1)` half-up.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    /// 1 (PGM) or 3 (PPM).
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    /// Interleaved row-major samples.
    pub data: Vec<u8>,
}

fn format_err(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        msg: msg.into(),
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(format_err(self.path, start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err(self.path, start, format!("{what} out of range")))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Image> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(format_err(path, 0, "not a binary PGM/PPM (expected P5 or P6)")),
    };
    let mut h = Header { bytes, pos: 2, path };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval_at = h.pos;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(format_err(
            path,
            maxval_at,
            format!("unsupported maxval {maxval} (only 255)"),
        ));
    }
    if width == 0 || height == 0 {
        return Err(format_err(path, 2, "zero image extent"));
    }
    match bytes.get(h.pos) {
        Some(c) if c.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(format_err(path, h.pos, "missing whitespace after maxval")),
    }
    let n = width * height * channels;
    let data = bytes.get(h.pos..h.pos + n).ok_or_else(|| {
        format_err(
            path,
            bytes.len(),
            format!("truncated pixel data: need {n} bytes from offset {}", h.pos),
        )
    })?;
    Ok(Image {
        channels,
        width,
        height,
        data: data.to_vec(),
    })
}

pub fn encode(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    if img.channels != 1 && img.channels != 3 {
        return Err(Error::InvalidArgument(format!(
            "{} channels cannot be stored as PGM/PPM",
            img.channels
        )));
    }
    fs::write(path, encode(img)).map_err(|e| Error::io(path, e))
}

/// `round(127.5·(clamp(v)+1))` with ties rounded up.
pub fn quantize(v: f64) -> u8 {
    let v = if v.is_nan() { -1.0 } else { v.clamp(-1.0, 1.0) };
    (127.5 * (v + 1.0) + 0.5).floor() as u8
}

pub fn dequantize(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

impl Image {
    /// `[C, H, W]` tensor in `[-1, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let (c, h, w) = (self.channels, self.height, self.width);
        Tensor::from_fn(&[c, h, w], |i| {
            let (ch, p) = (i / (h * w), i % (h * w));
            dequantize(self.data[p * c + ch])
        })
    }

    /// From a `[C, H, W]` (or `[1, C, H, W]`) tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Image> {
        let s = t.shape();
        let (c, h, w) = match s {
            [c, h, w] | [1, c, h, w] => (*c, *h, *w),
            _ => return Err(Error::Shape(format!("image tensor must be [C,H,W], got {s:?}"))),
        };
        if c != 1 && c != 3 {
            return Err(Error::Shape(format!("image tensor needs 1 or 3 channels, got {c}")));
        }
        let mut data = vec![0u8; c * h * w];
        for (i, &v) in t.data().iter().enumerate() {
            let (ch, p) = (i / (h * w), i % (h * w));
            data[p * c + ch] = quantize(v);
        }
        Ok(Image {
            channels: c,
            width: w,
            height: h,
            data,
        })
    }
}

fn is_pnm(p: &Path) -> bool {
    matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm"))
}

/// Image files of a directory in lexicographic order.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_pnm(p))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads every PGM/PPM of `dir` into a `[N, C, H, W]` batch.
pub fn load_images(dir: &Path) -> Result<Tensor> {
    let files = list_images(dir)?;
    if files.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no .pgm/.ppm files in {}",
            dir.display()
        )));
    }
    let mut parts = Vec::with_capacity(files.len());
    let mut dims = None;
    for f in &files {
        let img = read_image(f)?;
        let d = (img.channels, img.height, img.width);
        match dims {
            None => dims = Some(d),
            Some(prev) if prev != d => {
                return Err(Error::InvalidArgument(format!(
                    "{}: size {:?} differs from {:?} of earlier images",
                    f.display(),
                    d,
                    prev
                )))
            }
            _ => {}
        }
        parts.push(img.to_tensor());
    }
    let (c, h, w) = dims.expect("nonempty");
    let mut data = Vec::with_capacity(parts.len() * c * h * w);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(&[files.len(), c, h, w], data)
}

/// Writes `sample_{i}.pgm|ppm` for each image of `[N, C, H, W]` plus a
/// `manifest.txt` listing them. Returns the image paths.
pub fn save_images(batch: &Tensor, dir: &Path) -> Result<Vec<PathBuf>> {
    let (n, c, _, _) = batch.dims4()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ext = if c == 1 { "pgm" } else { "ppm" };
    let mut paths = Vec::with_capacity(n);
    let mut manifest = String::new();
    for i in 0..n {
        let img = Image::from_tensor(&batch.narrow_batch(i, 1)?)?;
        let name = format!("sample_{i}.{ext}");
        let path = dir.join(&name);
        write_image(&path, &img)?;
        manifest.push_str(&name);
        manifest.push('\n');
        paths.push(path);
    }
    let mpath = dir.join("manifest.txt");
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_conventions() {
        assert_eq!(quantize(0.0), 128);
        assert_eq!(quantize(3.7), 255);
        assert_eq!(quantize(-1.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(dequantize(0), -1.0);
        assert_eq!(dequantize(255), 1.0);
        for b in 0..=255u8 {
            assert_eq!(quantize(dequantize(b)), b);
        }
    }

    #[test]
    fn header_with_comments() {
        let bytes = b"P5\n# comment\n2 1\n# another\n255\n\x00\xff";
        let img = decode(bytes, Path::new("x.pgm")).unwrap();
        assert_eq!((img.width, img.height, img.channels), (2, 1, 1));
        assert_eq!(img.data, vec![0, 255]);
    }

    #[test]
    fn malformed_headers_report_offsets() {
        let e = decode(b"P3\n1 1\n255\n0", Path::new("a.ppm")).unwrap_err();
        assert!(matches!(e, Error::Format { offset: 0, .. }));
        let e = decode(b"P5\n1 x\n255\n0", Path::new("a.pgm")).unwrap_err();
        assert!(matches!(e, Error::Format { offset: 5, .. }), "{e}");
        let e = decode(b"P5\n2 2\n255\n\x00", Path::new("a.pgm")).unwrap_err();
        assert!(e.to_string().contains("truncated"));
        let e = decode(b"P5\n1 1\n65535\n\x00\x00", Path::new("a.pgm")).unwrap_err();
        assert!(e.to_string().contains("maxval"));
    }

    #[test]
    fn encode_decode_roundtrip() {
        let img = Image {
            channels: 3,
            width: 3,
            height: 2,
            data: (0..18).map(|i| (i * 13) as u8).collect(),
        };
        assert_eq!(decode(&encode(&img), Path::new("m.ppm")).unwrap(), img);
        let t = img.to_tensor();
        assert_eq!(t.shape(), &[3, 2, 3]);
        assert_eq!(Image::from_tensor(&t).unwrap(), img);
    }
}
