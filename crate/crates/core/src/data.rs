//! MNIST ingestion and preprocessing.
//!
//! Images are read from IDX files (optionally gzip-compressed), pooled 2×2,
//! flattened in boustrophedon order and embedded pixel by pixel into
//! two-component feature vectors.

use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;

/// Grayscale images with intensities in `[0, 1]` and their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    pub height: usize,
    pub width: usize,
    /// Row-major pixels, image after image.
    pub pixels: Vec<f64>,
    pub labels: Vec<u8>,
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

/// Decodes an IDX image file: `(count, rows, cols, bytes)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format(format!("image file magic {magic}, expected {IMAGE_MAGIC}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let body = &bytes[16..];
    if body.len() < n * rows * cols {
        return Err(Error::Format(format!(
            "image file truncated: {} bytes for {n} images of {rows}x{cols}",
            body.len()
        )));
    }
    Ok((n, rows, cols, &body[..n * rows * cols]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABEL_MAGIC {
        return Err(Error::Format(format!("label file magic {magic}, expected {LABEL_MAGIC}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Format(format!("label file truncated: {} of {n} labels", body.len())));
    }
    Ok(&body[..n])
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<ImageDataset> {
    let img = read_maybe_gz(images_path.as_ref())?;
    let lab = read_maybe_gz(labels_path.as_ref())?;
    let (n, rows, cols, body) = parse_idx_images(&img)?;
    let labels = parse_idx_labels(&lab)?;
    if labels.len() != n {
        return Err(Error::Format(format!("{n} images but {} labels", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 9) {
        return Err(Error::Format(format!("label {bad} out of range")));
    }
    Ok(ImageDataset {
        height: rows,
        width: cols,
        pixels: body.iter().map(|&b| b as f64 / 255.0).collect(),
        labels: labels.to_vec(),
    })
}

/// Encodes a dataset as uncompressed IDX image and label files.
pub fn write_idx(ds: &ImageDataset, mut images: impl Write, mut labels: impl Write) -> Result<()> {
    images.write_all(&IMAGE_MAGIC.to_be_bytes())?;
    for v in [ds.len(), ds.height, ds.width] {
        images.write_all(&(v as u32).to_be_bytes())?;
    }
    let bytes: Vec<u8> = ds.pixels.iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    images.write_all(&bytes)?;
    labels.write_all(&LABEL_MAGIC.to_be_bytes())?;
    labels.write_all(&(ds.len() as u32).to_be_bytes())?;
    labels.write_all(&ds.labels)?;
    Ok(())
}

/// Mean of each 2×2 block.
pub fn avg_pool_2x2(image: &[f64], height: usize, width: usize) -> Result<Vec<f64>> {
    if !height.is_multiple_of(2) || !width.is_multiple_of(2) {
        return Err(Error::Dimension(format!("cannot pool a {height}x{width} image 2x2")));
    }
    if image.len() != height * width {
        return Err(Error::Dimension(format!("{} pixels for {height}x{width}", image.len())));
    }
    let (h, w) = (height / 2, width / 2);
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let at = |dr: usize, dc: usize| image[(2 * r + dr) * width + 2 * c + dc];
            out.push((at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0);
        }
    }
    Ok(out)
}

/// Boustrophedon scan: even rows left to right, odd rows right to left.
pub fn zigzag_flatten(image: &[f64], height: usize, width: usize) -> Vec<f64> {
    assert_eq!(image.len(), height * width, "image is not {height}x{width}");
    let mut out = Vec::with_capacity(image.len());
    for (r, row) in image.chunks(width).enumerate() {
        if r % 2 == 0 {
            out.extend_from_slice(row);
        } else {
            out.extend(row.iter().rev());
        }
    }
    out
}

/// Local embedding of one pixel intensity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FeatureMap {
    /// `(cos(πx/2), sin(πx/2))`
    #[default]
    Trig,
    /// `(1, x)`
    Linear,
}

impl std::str::FromStr for FeatureMap {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trig" | "cos_sin" => Ok(Self::Trig),
            "linear" => Ok(Self::Linear),
            _ => Err(Error::Config(format!("unknown feature map {s:?}"))),
        }
    }
}

impl FeatureMap {
    pub fn apply(self, x: f64) -> [f64; 2] {
        let x = if (0.0..=1.0).contains(&x) {
            x
        } else {
            log::warn!("pixel value {x} outside [0, 1], clamping");
            if x.is_nan() {
                0.0
            } else {
                x.clamp(0.0, 1.0)
            }
        };
        match self {
            Self::Trig => {
                let t = std::f64::consts::FRAC_PI_2 * x;
                [t.cos(), t.sin()]
            }
            Self::Linear => [1.0, x],
        }
    }
}

/// Embedded samples: `n_features` two-component vectors per sample, flat.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub n_features: usize,
    pub data: Vec<f64>,
    pub labels: Vec<usize>,
}

pub const FEATURE_DIM: usize = 2;

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let w = self.n_features * FEATURE_DIM;
        &self.data[i * w..][..w]
    }

    pub fn select(&self, idx: &[usize]) -> FeatureSet {
        FeatureSet {
            n_features: self.n_features,
            data: idx.iter().flat_map(|&i| self.sample(i).iter().copied()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// `sample,label,f0_0,f0_1,...` rows.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        write!(out, "sample,label")?;
        for f in 0..self.n_features {
            for c in 0..FEATURE_DIM {
                write!(out, ",f{f}_{c}")?;
            }
        }
        writeln!(out)?;
        for i in 0..self.len() {
            write!(out, "{i},{}", self.labels[i])?;
            for v in self.sample(i) {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

impl ImageDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.pixels[i * n..][..n]
    }

    pub fn select(&self, idx: &[usize]) -> ImageDataset {
        ImageDataset {
            height: self.height,
            width: self.width,
            pixels: idx.iter().flat_map(|&i| self.image(i).iter().copied()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// First `n` images (all if fewer).
    pub fn take(&self, n: usize) -> ImageDataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    pub fn concat(&self, other: &ImageDataset) -> Result<ImageDataset> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Dimension("image sizes differ".into()));
        }
        let mut out = self.clone();
        out.pixels.extend_from_slice(&other.pixels);
        out.labels.extend_from_slice(&other.labels);
        Ok(out)
    }

    pub fn pooled(&self) -> Result<ImageDataset> {
        let mut pixels = Vec::with_capacity(self.pixels.len() / 4);
        for i in 0..self.len() {
            pixels.extend(avg_pool_2x2(self.image(i), self.height, self.width)?);
        }
        Ok(ImageDataset {
            height: self.height / 2,
            width: self.width / 2,
            pixels,
            labels: self.labels.clone(),
        })
    }

    /// Zig-zag flatten and embed every image.
    pub fn features(&self, map: FeatureMap) -> FeatureSet {
        let n = self.height * self.width;
        let mut data = Vec::with_capacity(self.len() * n * FEATURE_DIM);
        for i in 0..self.len() {
            for x in zigzag_flatten(self.image(i), self.height, self.width) {
                data.extend(map.apply(x));
            }
        }
        FeatureSet {
            n_features: n,
            data,
            labels: self.labels.iter().map(|&l| l as usize).collect(),
        }
    }

    /// Seeded shuffle split; the first part holds `round(train_fraction·n)`
    /// images.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(ImageDataset, ImageDataset)> {
        let (a, b) = split_indices(self.len(), train_fraction, seed)?;
        Ok((self.select(&a), self.select(&b)))
    }
}

pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Range(format!("split fraction {train_fraction} not in (0, 1)")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = (train_fraction * n as f64).round() as usize;
    let rest = idx.split_off(cut);
    Ok((idx, rest))
}

/// The full preprocessing pipeline: pool, flatten, embed.
pub fn preprocess(ds: &ImageDataset, map: FeatureMap) -> Result<FeatureSet> {
    Ok(ds.pooled()?.features(map))
}
