//! Synthetic landmark masks: thin labeled curves over a structured background.

use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 4;
pub const DATASET_MAGIC: &[u8; 8] = b"LGRDDATA";
pub const DATASET_VERSION: u32 = 1;

// stroke intensity per landmark class, added on top of the background
const CLASS_INTENSITY: [f64; NUM_CLASSES] = [0.0, 1.0, -1.0, 0.6];

/// One image and its per-pixel class labels (0 = background).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticLandmarkSample {
    pub height: usize,
    pub width: usize,
    /// Row-major `H×W`.
    pub image: Vec<f64>,
    /// Row-major `H×W`, values in `0..4`.
    pub labels: Vec<u8>,
}

impl SyntheticLandmarkSample {
    /// Channel-major one-hot target, `4×H×W`.
    pub fn one_hot(&self) -> Vec<f64> {
        let px = self.height * self.width;
        let mut out = vec![0.0; NUM_CLASSES * px];
        for (i, &c) in self.labels.iter().enumerate() {
            out[c as usize * px + i] = 1.0;
        }
        out
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.labels.iter().filter(|&&c| c != 0).count() as f64 / self.labels.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub samples: Vec<SyntheticLandmarkSample>,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn mean_foreground_fraction(&self) -> f64 {
        self.samples
            .iter()
            .map(|s| s.foreground_fraction())
            .sum::<f64>()
            / self.len().max(1) as f64
    }
}

fn background<R: Rng>(h: usize, w: usize, rng: &mut R) -> Vec<f64> {
    let noise = Normal::new(0.0, 0.05).expect("positive std");
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.5..3.0) * 2.0 * PI / h as f64,
                rng.gen_range(0.5..3.0) * 2.0 * PI / w as f64,
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(0.05..0.15),
            )
        })
        .collect();
    let mut img = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let s: f64 = waves
                .iter()
                .map(|&(fy, fx, ph, amp)| amp * (fy * i as f64 + fx * j as f64 + ph).sin())
                .sum();
            img[i * w + j] = s + noise.sample(rng);
        }
    }
    img
}

/// Rasterize a quadratic Bézier curve, one pixel thick.
fn stroke<R: Rng>(labels: &mut [u8], h: usize, w: usize, class: u8, rng: &mut R) {
    let margin = 1.0;
    let mut pt = || {
        (
            rng.gen_range(margin..(h as f64 - 1.0 - margin).max(margin + 1e-9)),
            rng.gen_range(margin..(w as f64 - 1.0 - margin).max(margin + 1e-9)),
        )
    };
    let (p0, p1, p2) = (pt(), pt(), pt());
    let samples = 4 * (h + w);
    for s in 0..=samples {
        let t = s as f64 / samples as f64;
        let u = 1.0 - t;
        let y = u * u * p0.0 + 2.0 * u * t * p1.0 + t * t * p2.0;
        let x = u * u * p0.1 + 2.0 * u * t * p1.1 + t * t * p2.1;
        let (i, j) = (y.round() as usize, x.round() as usize);
        if i < h && j < w {
            labels[i * w + j] = class;
        }
    }
}

/// `count` samples of 1–3 class-labeled curves over structured noise.
/// Deterministic in `seed`.
pub fn generate_synthetic_dataset(
    count: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<SyntheticDataset> {
    if count == 0 || height < 4 || width < 4 {
        return Err(Error::InvalidArgument(format!(
            "dataset needs count >= 1 and H, W >= 4, got {count} of {height}x{width}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..count)
        .map(|_| {
            let mut image = background(height, width, &mut rng);
            let mut labels = vec![0u8; height * width];
            for _ in 0..rng.gen_range(1..=3) {
                let class = rng.gen_range(1..=3u8);
                stroke(&mut labels, height, width, class, &mut rng);
            }
            for (v, &c) in image.iter_mut().zip(&labels) {
                *v += CLASS_INTENSITY[c as usize];
            }
            SyntheticLandmarkSample {
                height,
                width,
                image,
                labels,
            }
        })
        .collect();
    Ok(SyntheticDataset {
        height,
        width,
        seed,
        samples,
    })
}

/// Binary container: magic, version u32, then u64 count, H, W, seed; per
/// sample `H·W` little-endian f64 image values followed by `H·W` label bytes.
pub fn write_dataset<W: Write>(ds: &SyntheticDataset, mut w: W) -> Result<()> {
    let mut buf = Vec::with_capacity(48 + ds.len() * ds.height * ds.width * 9);
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    for v in [ds.len() as u64, ds.height as u64, ds.width as u64, ds.seed] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for s in &ds.samples {
        for x in &s.image {
            buf.extend_from_slice(&x.to_bits().to_le_bytes());
        }
        buf.extend_from_slice(&s.labels);
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<SyntheticDataset> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let header = 8 + 4 + 32;
    if buf.len() < header || &buf[..8] != DATASET_MAGIC {
        return Err(Error::Format("not a dataset container".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
    let version = u32_at(8);
    if version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {version}"
        )));
    }
    let (count, height, width, seed) = (u64_at(12), u64_at(20), u64_at(28), u64_at(36));
    let px = height.checked_mul(width);
    let need = px
        .and_then(|p| p.checked_mul(9))
        .and_then(|b| b.checked_mul(count))
        .and_then(|b| b.checked_add(header as u64));
    if need != Some(buf.len() as u64) {
        return Err(Error::Format(format!(
            "dataset size mismatch: header says {count} samples of {height}x{width}, file has {} bytes",
            buf.len()
        )));
    }
    let (count, height, width) = (count as usize, height as usize, width as usize);
    let px = height * width;
    let mut off = header;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let image: Vec<f64> = (0..px)
            .map(|k| f64::from_bits(u64_at(off + 8 * k)))
            .collect();
        off += 8 * px;
        let labels = buf[off..off + px].to_vec();
        off += px;
        if let Some(bad) = labels.iter().find(|&&c| c as usize >= NUM_CLASSES) {
            return Err(Error::Format(format!("label {bad} out of range")));
        }
        samples.push(SyntheticLandmarkSample {
            height,
            width,
            image,
            labels,
        });
    }
    Ok(SyntheticDataset {
        height,
        width,
        seed,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic_dataset(5, 32, 32, 7).unwrap();
        let b = generate_synthetic_dataset(5, 32, 32, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_synthetic_dataset(5, 32, 32, 8).unwrap());
    }

    #[test]
    fn every_sample_has_foreground() {
        let ds = generate_synthetic_dataset(200, 32, 32, 1).unwrap();
        for s in &ds.samples {
            assert!(s.labels.iter().any(|&c| c != 0));
            assert!(s.labels.iter().all(|&c| (c as usize) < NUM_CLASSES));
            let oh = s.one_hot();
            for i in 0..32 * 32 {
                let total: f64 = (0..NUM_CLASSES).map(|c| oh[c * 1024 + i]).sum();
                assert_eq!(total, 1.0);
            }
        }
    }

    #[test]
    fn foreground_fraction_band() {
        let ds = generate_synthetic_dataset(100, 32, 32, 0).unwrap();
        let f = ds.mean_foreground_fraction();
        assert!((0.01..=0.25).contains(&f), "{f}");
    }

    #[test]
    fn container_round_trip() {
        let ds = generate_synthetic_dataset(3, 8, 12, 5).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        assert_eq!(read_dataset(buf.as_slice()).unwrap(), ds);
        assert!(read_dataset(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = 0;
        assert!(read_dataset(bad.as_slice()).is_err());
    }

    #[test]
    fn rejects_empty() {
        assert!(generate_synthetic_dataset(0, 32, 32, 0).is_err());
    }
}
