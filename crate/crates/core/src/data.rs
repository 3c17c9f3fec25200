//! Labelled image sets: IDX file I/O and a seeded synthetic generator.

use std::f64::consts::TAU;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images `[N, C, H, W]` with one label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::dim("rank", format!("images must be [N,C,H,W], got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Config(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Config(format!("label {bad} outside 0..{num_classes}")));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn sample(&self, i: usize) -> Result<Tensor> {
        self.images.batch_item(i)
    }

    /// Gather the listed samples into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let per: usize = self.sample_shape().iter().product();
        let mut data = Vec::with_capacity(per * indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index { index: i, len: self.len() });
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let [c, h, w] = self.sample_shape();
        Ok((Tensor::new(&[indices.len(), c, h, w], data)?, labels))
    }

    /// The first `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::Config("dataset is empty".into()));
        }
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.batch(&idx)?;
        Dataset::new(images, labels, self.num_classes)
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

/// Parse an IDX image file into `[N, 1, rows, cols]`, scaling bytes to `[-1, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = be_u32(bytes, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "images: magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"
        )));
    }
    let n = be_u32(bytes, 4, "images")? as usize;
    let rows = be_u32(bytes, 8, "images")? as usize;
    let cols = be_u32(bytes, 12, "images")? as usize;
    let body = &bytes[16..];
    let want = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::Format("images: size overflow".into()))?;
    if body.len() != want {
        return Err(Error::Format(format!(
            "images: header promises {want} pixel bytes, file has {}",
            body.len()
        )));
    }
    let data = body.iter().map(|&b| b as f32 / 127.5 - 1.0).collect();
    Tensor::new(&[n, 1, rows, cols], data).map_err(|e| Error::Format(format!("images: {e}")))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "labels: magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"
        )));
    }
    let n = be_u32(bytes, 4, "labels")? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Format(format!(
            "labels: header promises {n} labels, file has {}",
            body.len()
        )));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let x = parse_idx_images(&std::fs::read(images)?)?;
    let y = parse_idx_labels(&std::fs::read(labels)?)?;
    if x.shape()[0] != y.len() {
        return Err(Error::Format(format!(
            "{} images but {} labels",
            x.shape()[0],
            y.len()
        )));
    }
    let classes = y.iter().max().map_or(2, |&m| (m + 1).max(2));
    Dataset::new(x, y, classes)
}

/// Encode single-channel images (values in `[-1, 1]`) and labels as IDX bytes.
pub fn encode_idx(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let [c, h, w] = ds.sample_shape();
    if c != 1 {
        return Err(Error::dim("channels", format!("IDX stores one channel, dataset has {c}")));
    }
    if ds.num_classes > 256 {
        return Err(Error::Config(format!("{} classes do not fit in a byte", ds.num_classes)));
    }
    let mut img = Vec::with_capacity(16 + ds.images.numel());
    for v in [IDX_IMAGES_MAGIC, ds.len() as u32, h as u32, w as u32] {
        img.extend(v.to_be_bytes());
    }
    img.extend(
        ds.images
            .data()
            .iter()
            .map(|&v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8),
    );
    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend(IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend((ds.len() as u32).to_be_bytes());
    lab.extend(ds.labels.iter().map(|&l| l as u8));
    Ok((img, lab))
}

pub fn write_idx(ds: &Dataset, images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
    let (img, lab) = encode_idx(ds)?;
    std::fs::write(images, img)?;
    std::fs::write(labels, lab)?;
    Ok(())
}

/// Parameters of the synthetic texture task.
///
/// Each class owns a smooth template built from a few random plane waves.
/// A sample is its class template, circularly shifted by up to `max_shift` pixels per axis,
/// plus white noise whose standard deviation is drawn uniformly from
/// `noise_min..=noise_max` per sample, so every set mixes easy and hard
/// inputs. Templates depend only on `seed`; the `stream` argument of
/// [`generate_synthetic`] selects disjoint sample draws (train vs test).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub channels: usize,
    pub size: usize,
    pub waves: usize,
    /// Largest translation along each axis, in pixels, applied with wrap-around.
    pub max_shift: usize,
    pub noise_min: f32,
    pub noise_max: f32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            channels: 1,
            size: 28,
            waves: 3,
            max_shift: 2,
            noise_min: 0.1,
            noise_max: 1.5,
            seed: 7,
        }
    }
}

fn templates(spec: &SyntheticSpec) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s = spec.size;
    (0..spec.classes)
        .map(|_| {
            let mut t = vec![0f64; spec.channels * s * s];
            for c in 0..spec.channels {
                for _ in 0..spec.waves.max(1) {
                    // integer cycle counts keep the pattern periodic, so shifts stay seamless
                    let fx = rng.gen_range(-3i32..=3) as f64;
                    let fy = rng.gen_range(1i32..=3) as f64;
                    let (fx, fy) = if rng.gen_bool(0.5) { (fx, fy) } else { (fy, fx) };
                    let phase = rng.gen_range(0.0..TAU);
                    let amp = rng.gen_range(0.5..1.0);
                    for y in 0..s {
                        for x in 0..s {
                            let arg = TAU * (fx * x as f64 + fy * y as f64) / s as f64 + phase;
                            t[(c * s + y) * s + x] += amp * arg.sin();
                        }
                    }
                }
            }
            let mean = t.iter().sum::<f64>() / t.len() as f64;
            let std = (t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t.len() as f64).sqrt();
            t.iter().map(|v| ((v - mean) / std.max(1e-12)) as f32).collect()
        })
        .collect()
}

/// `per_class` samples of every class, in a seeded shuffled order.
pub fn generate_synthetic(spec: &SyntheticSpec, per_class: usize, stream: u64) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {}", spec.classes)));
    }
    if spec.size == 0 || spec.channels == 0 || per_class == 0 {
        return Err(Error::Config("size, channels and per_class must be positive".into()));
    }
    if !(spec.noise_min >= 0.0 && spec.noise_max >= spec.noise_min) {
        return Err(Error::Config(format!(
            "noise range {}..{} is invalid",
            spec.noise_min, spec.noise_max
        )));
    }
    let tpl = templates(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5a17_0000_0000_0000 ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut labels: Vec<usize> = (0..spec.classes).flat_map(|c| std::iter::repeat_n(c, per_class)).collect();
    labels.shuffle(&mut rng);
    let (s, ch) = (spec.size, spec.channels);
    // keep samples roughly inside [-1, 1]
    let gain = 0.5f32;
    let mut data = Vec::with_capacity(labels.len() * ch * s * s);
    for &label in &labels {
        let reach = spec.max_shift.min(s / 2) as isize;
        let mut shift = || (rng.gen_range(-reach..=reach)).rem_euclid(s as isize) as usize;
        let (dx, dy) = (shift(), shift());
        let sigma = rng.gen_range(spec.noise_min..=spec.noise_max);
        let t = &tpl[label];
        for c in 0..ch {
            for y in 0..s {
                for x in 0..s {
                    let v = t[(c * s + (y + dy) % s) * s + (x + dx) % s];
                    let n: f32 = StandardNormal.sample(&mut rng);
                    data.push(gain * (v + sigma * n));
                }
            }
        }
    }
    let images = Tensor::new(&[labels.len(), ch, s, s], data)?;
    Dataset::new(images, labels, spec.classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SyntheticSpec {
        SyntheticSpec {
            size: 8,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = generate_synthetic(&tiny(), 5, 0).unwrap();
        let b = generate_synthetic(&tiny(), 5, 0).unwrap();
        assert_eq!(a, b);
        for c in 0..10 {
            assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 5);
        }
        let test = generate_synthetic(&tiny(), 5, 1).unwrap();
        assert_ne!(a.images, test.images);
    }

    #[test]
    fn idx_round_trip_and_errors() {
        let ds = generate_synthetic(&tiny(), 2, 0).unwrap();
        let (img, lab) = encode_idx(&ds).unwrap();
        assert_eq!(&img[..4], &[0, 0, 8, 3]);
        assert_eq!(&lab[..4], &[0, 0, 8, 1]);
        let x = parse_idx_images(&img).unwrap();
        assert_eq!(x.shape(), &[20, 1, 8, 8]);
        assert_eq!(parse_idx_labels(&lab).unwrap(), ds.labels);
        assert!(x.data().iter().all(|v| (-1.0..=1.0).contains(v)));

        let err = parse_idx_images(&lab).unwrap_err();
        assert!(err.to_string().contains("0x00000801"), "{err}");
        assert!(matches!(parse_idx_images(&img[..img.len() - 1]), Err(Error::Format(_))));
        assert!(matches!(parse_idx_labels(&lab[..6]), Err(Error::Format(_))));
    }

    #[test]
    fn pixel_scaling_endpoints() {
        let mut img = Vec::new();
        for v in [IDX_IMAGES_MAGIC, 1, 1, 3] {
            img.extend(v.to_be_bytes());
        }
        img.extend([0u8, 255, 128]);
        let x = parse_idx_images(&img).unwrap();
        assert_eq!(x.data()[0], -1.0);
        assert_eq!(x.data()[1], 1.0);
        assert!((x.data()[2] - (128.0 / 127.5 - 1.0)).abs() < 1e-7);
    }
}
