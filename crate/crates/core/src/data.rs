//! Image-classification datasets: a seeded synthetic generator, a raw
//! little-endian file format, stratified splits and batching.

use std::f32::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{config, Error, Result};
use crate::tensor::{Shape, Tensor};

pub const IMAGES_MAGIC: &[u8; 4] = b"ACAI";
pub const LABELS_MAGIC: &[u8; 4] = b"ACAL";

/// Images stored as 8-bit pixels in (sample, channel, row, column) order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pixels: Vec<u8>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        classes: usize,
        pixels: Vec<u8>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        let per = channels * height * width;
        if per == 0 {
            return config("images must have positive channels, height and width");
        }
        if pixels.len() != per * labels.len() {
            return config(format!(
                "{} pixels do not hold {} images of {per} values",
                pixels.len(),
                labels.len()
            ));
        }
        if !(2..=256).contains(&classes) {
            return config(format!("class count {classes} must be in 2..=256"));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return config(format!("label {bad} out of range for {classes} classes"));
        }
        Ok(Dataset {
            channels,
            height,
            width,
            classes,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    /// Pixel values of sample `i` scaled to [0, 1].
    pub fn image(&self, i: usize) -> Vec<f32> {
        let n = self.sample_len();
        self.pixels[i * n..(i + 1) * n]
            .iter()
            .map(|&p| p as f32 / 255.0)
            .collect()
    }

    /// Number of samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// The samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let n = self.sample_len();
        let mut pixels = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            pixels.extend_from_slice(&self.pixels[i * n..(i + 1) * n]);
            labels.push(self.labels[i]);
        }
        Dataset {
            pixels,
            labels,
            ..*self
        }
    }
}

/// Parameters of the oriented-stripe generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub num_samples: usize,
    pub classes: usize,
    pub size: usize,
    pub channels: usize,
    /// Scales both the random stripe phase and the additive pixel noise;
    /// 0 makes every image of a class identical.
    pub noise: f32,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 0,
            num_samples: 600,
            classes: 3,
            size: 16,
            channels: 3,
            noise: 1.0,
        }
    }
}

/// Class-conditional stripe textures: class `c` has orientation `c·π/classes`
/// and its own spatial frequency. Each sample draws a phase from
/// `U(0, 2π·noise)` and adds pixel noise `N(0, (0.25·noise)²)`. Labels cycle
/// through the classes, so counts are balanced within one.
pub fn generate(cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.classes < 2 || cfg.classes > 256 {
        return config(format!("classes must be in 2..=256, got {}", cfg.classes));
    }
    if cfg.size < 8 || !cfg.size.is_multiple_of(4) {
        return config(format!(
            "image size must be at least 8 and divisible by 4, got {}",
            cfg.size
        ));
    }
    if cfg.channels == 0 {
        return config("images need at least one channel");
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return config(format!("noise must be a finite non-negative number, got {}", cfg.noise));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pixel_noise = Normal::new(0.0f32, 0.25 * cfg.noise).expect("non-negative std");
    let size = cfg.size as f32;
    let mut pixels = Vec::with_capacity(cfg.num_samples * cfg.channels * cfg.size * cfg.size);
    let mut labels = Vec::with_capacity(cfg.num_samples);
    for i in 0..cfg.num_samples {
        let class = i % cfg.classes;
        let angle = class as f32 * PI / cfg.classes as f32;
        let freq = 2.0 + class as f32 * 4.0 / cfg.classes as f32;
        let (dx, dy) = (angle.cos(), angle.sin());
        let phase = if cfg.noise > 0.0 {
            rng.random_range(0.0..2.0 * PI * cfg.noise)
        } else {
            0.0
        };
        for ch in 0..cfg.channels {
            let channel_phase = ch as f32 * PI / 3.0;
            for y in 0..cfg.size {
                for x in 0..cfg.size {
                    let t = 2.0 * PI * freq * (x as f32 * dx + y as f32 * dy) / size;
                    let mut v = 0.5 + 0.5 * (t + phase + channel_phase).sin();
                    if cfg.noise > 0.0 {
                        v += pixel_noise.sample(&mut rng);
                    }
                    pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        labels.push(class as u8);
    }
    Dataset::new(cfg.channels, cfg.size, cfg.size, cfg.classes, pixels, labels)
}

/// [`generate`] with three channels and unit noise.
pub fn generate_synthetic(seed: u64, num_samples: usize, classes: usize, size: usize) -> Result<Dataset> {
    generate(&SyntheticConfig {
        seed,
        num_samples,
        classes,
        size,
        ..SyntheticConfig::default()
    })
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Config(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_images(d: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(20 + d.pixels.len());
    out.extend_from_slice(IMAGES_MAGIC);
    for v in [d.len(), d.channels, d.height, d.width] {
        put_u32(&mut out, v)?;
    }
    out.extend_from_slice(&d.pixels);
    Ok(out)
}

pub fn encode_labels(d: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + d.len());
    out.extend_from_slice(LABELS_MAGIC);
    put_u32(&mut out, d.len())?;
    out.extend_from_slice(&d.labels);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::Load {
                offset: self.bytes.len(),
                msg: format!("truncated {what}: need {n} bytes at offset {}", self.at),
            });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let at = self.at;
        let got = self.take(4, "magic")?;
        if got != want {
            return Err(Error::Load {
                offset: at,
                msg: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(want)
                ),
            });
        }
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn finish(&self) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(Error::Load {
                offset: self.at,
                msg: format!("{} trailing bytes", self.bytes.len() - self.at),
            });
        }
        Ok(())
    }
}

/// Parses an images file into (count, channels, height, width, pixels).
pub fn decode_images(bytes: &[u8]) -> Result<(usize, usize, usize, usize, Vec<u8>)> {
    let mut r = Reader { bytes, at: 0 };
    r.magic(IMAGES_MAGIC)?;
    let count = r.u32("image count")?;
    let channels = r.u32("channel count")?;
    let height = r.u32("height")?;
    let width = r.u32("width")?;
    let n = count
        .checked_mul(channels * height * width)
        .ok_or_else(|| Error::Load {
            offset: 4,
            msg: "image dimensions overflow".into(),
        })?;
    let pixels = r.take(n, "pixel data")?.to_vec();
    r.finish()?;
    Ok((count, channels, height, width, pixels))
}

pub fn decode_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut r = Reader { bytes, at: 0 };
    r.magic(LABELS_MAGIC)?;
    let count = r.u32("label count")?;
    let labels = r.take(count, "label data")?.to_vec();
    r.finish()?;
    Ok(labels)
}

pub fn write_raw(d: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    fs::write(images_path, encode_images(d)?)?;
    fs::write(labels_path, encode_labels(d)?)?;
    Ok(())
}

/// Loads a dataset; the class count is one more than the largest label
/// (at least 2) unless `classes` is given.
pub fn load_raw(images_path: &Path, labels_path: &Path, classes: Option<usize>) -> Result<Dataset> {
    let (count, channels, height, width, pixels) = decode_images(&fs::read(images_path)?)?;
    let labels = decode_labels(&fs::read(labels_path)?)?;
    if labels.len() != count {
        return Err(Error::Load {
            offset: 4,
            msg: format!("labels file holds {} labels, images file {count} images", labels.len()),
        });
    }
    let classes = classes.unwrap_or_else(|| labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0).max(2));
    Dataset::new(channels, height, width, classes, pixels, labels)
}

/// Stratified seeded split: each class is shuffled and its first
/// `round(fraction · n_class)` samples go to the first part. Both parts keep
/// the original sample order.
pub fn split(d: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return config(format!("split fraction must lie in (0, 1), got {fraction}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_first = vec![false; d.len()];
    for class in 0..d.classes {
        let mut idx: Vec<usize> = (0..d.len()).filter(|&i| d.label(i) == class).collect();
        idx.shuffle(&mut rng);
        let take = (fraction * idx.len() as f64).round() as usize;
        for &i in &idx[..take] {
            in_first[i] = true;
        }
    }
    let first: Vec<usize> = (0..d.len()).filter(|&i| in_first[i]).collect();
    let second: Vec<usize> = (0..d.len()).filter(|&i| !in_first[i]).collect();
    if first.is_empty() || second.is_empty() {
        return config(format!(
            "split fraction {fraction} of {} samples leaves a part empty",
            d.len()
        ));
    }
    Ok((d.subset(&first), d.subset(&second)))
}

/// Per-channel standardization statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalizer {
    /// Mean and standard deviation of every channel over all pixels of `d`.
    pub fn fit(d: &Dataset) -> Result<Self> {
        if d.is_empty() {
            return config("cannot compute statistics of an empty dataset");
        }
        let plane = d.height * d.width;
        let mut sum = vec![0.0f64; d.channels];
        let mut sq = vec![0.0f64; d.channels];
        for (i, &p) in d.pixels.iter().enumerate() {
            let c = (i / plane) % d.channels;
            let v = p as f64 / 255.0;
            sum[c] += v;
            sq[c] += v * v;
        }
        let n = (d.len() * plane) as f64;
        let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
        let std = sum
            .iter()
            .zip(&sq)
            .map(|(s, q)| {
                let m = s / n;
                ((q / n - m * m).max(0.0).sqrt().max(1e-3)) as f32
            })
            .collect();
        Ok(Normalizer { mean, std })
    }

    /// Standardized images at `indices` as a (batch, C, H, W) tensor, with
    /// their labels.
    pub fn batch(&self, d: &Dataset, indices: &[usize]) -> Result<Batch> {
        if self.mean.len() != d.channels {
            return config(format!(
                "normalizer has {} channels, dataset {}",
                self.mean.len(),
                d.channels
            ));
        }
        let n = d.sample_len();
        let plane = d.height * d.width;
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let px = &d.pixels[i * n..(i + 1) * n];
            for (c, chunk) in px.chunks(plane).enumerate() {
                let (m, s) = (self.mean[c], self.std[c]);
                data.extend(chunk.iter().map(|&p| (p as f32 / 255.0 - m) / s));
            }
            labels.push(d.label(i));
        }
        let images = Tensor::new(Shape::new(indices.len(), d.channels, d.height, d.width), data)?;
        Ok(Batch { images, labels })
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

/// Consecutive batches of `batch_size` over `order`; the last may be short.
pub fn batches(order: &[usize], batch_size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(batch_size.max(1))
}

/// A seeded permutation of `0..n`.
pub fn permutation(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Samples whose largest logit is at their label; logits are (B, K, 1, 1).
/// Ties go to the lower class index.
pub fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape().channels;
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &label)| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best == label
        })
        .count()
}
