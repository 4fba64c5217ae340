//! Seeded synthetic images with segmentation labels or keypoint pairs.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::evaluation::KeypointPair;
use crate::extraction::Image;
use crate::probing::{LabeledSample, ProbeDataset};

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationImage {
    pub key: String,
    pub image: Image,
    pub labels: Array2<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationSet {
    pub name: String,
    pub classes: usize,
    pub samples: Vec<SegmentationImage>,
}

impl SegmentationSet {
    pub fn images(&self) -> Vec<(String, Image)> {
        self.samples.iter().map(|s| (s.key.clone(), s.image.clone())).collect()
    }

    pub fn labeled(&self) -> Vec<LabeledSample> {
        self.samples
            .iter()
            .map(|s| LabeledSample {
                key: s.key.clone(),
                labels: s.labels.clone(),
            })
            .collect()
    }

    /// The first `train` samples for training, the rest for testing.
    pub fn probe_dataset(&self, train: usize) -> Result<ProbeDataset> {
        if train == 0 || train >= self.samples.len() {
            return Err(Error::invalid(format!(
                "cannot split {} samples into {train} training samples and a test set",
                self.samples.len()
            )));
        }
        let mut all = self.labeled();
        let test = all.split_off(train);
        Ok(ProbeDataset {
            name: self.name.clone(),
            classes: self.classes,
            ignore_label: None,
            train: all,
            test,
        })
    }
}

const PALETTE: [[f32; 3]; 6] = [
    [0.45, 0.45, 0.45],
    [0.9, 0.2, 0.2],
    [0.2, 0.8, 0.3],
    [0.2, 0.3, 0.9],
    [0.9, 0.8, 0.2],
    [0.7, 0.3, 0.8],
];

struct Shape {
    class: u32,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    round: bool,
}

impl Shape {
    fn random<R: Rng>(rng: &mut R, class: u32, w: usize, h: usize) -> Self {
        let s = w.min(h) as f64;
        Self {
            class,
            cx: rng.random_range(0.2..0.8) * w as f64,
            cy: rng.random_range(0.2..0.8) * h as f64,
            rx: rng.random_range(0.12..0.3) * s,
            ry: rng.random_range(0.12..0.3) * s,
            round: rng.random_bool(0.5),
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (u, v) = ((x - self.cx) / self.rx, (y - self.cy) / self.ry);
        if self.round {
            u * u + v * v <= 1.0
        } else {
            u.abs() <= 1.0 && v.abs() <= 1.0
        }
    }
}

/// `simple` scenes hold one flat-coloured object over three classes;
/// `complex` scenes hold up to three textured, overlapping objects over
/// five classes with stronger noise.
pub fn synthetic_segmentation(name: &str, count: usize, size: (usize, usize), seed: u64) -> Result<SegmentationSet> {
    let (classes, objects, noise, textured) = match name {
        "simple" => (3, 1..=1, 0.03, false),
        "complex" => (5, 1..=3, 0.08, true),
        _ => return Err(Error::config(format!("unknown synthetic dataset `{name}` (simple, complex)"))),
    };
    let (w, h) = size;
    if w < 8 || h < 8 {
        return Err(Error::invalid("synthetic images need at least 8x8 pixels"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ if textured { 0x9e37_79b9 } else { 0 });
    let samples = (0..count)
        .map(|i| {
            let n = rng.random_range(objects.clone());
            let shapes: Vec<Shape> = (0..n)
                .map(|_| {
                    let class = rng.random_range(1..classes as u32);
                    Shape::random(&mut rng, class, w, h)
                })
                .collect();
            let period = rng.random_range(3.0..6.0);
            let labels = Array2::from_shape_fn((h, w), |(y, x)| {
                shapes
                    .iter()
                    .rev()
                    .find(|s| s.contains(x as f64 + 0.5, y as f64 + 0.5))
                    .map_or(0, |s| s.class)
            });
            let mut image = Array3::from_shape_fn((3, h, w), |(c, y, x)| {
                let k = labels[[y, x]] as usize;
                let mut v = PALETTE[k][c];
                if textured && k % 2 == 0 {
                    v *= 0.75 + 0.25 * ((x + y) as f32 / period as f32).sin();
                }
                v
            });
            image.mapv_inplace(|v| (v + rng.sample::<f32, _>(StandardNormal) * noise).clamp(0.0, 1.0));
            SegmentationImage {
                key: format!("{name}-{i:04}"),
                image,
                labels,
            }
        })
        .collect();
    Ok(SegmentationSet {
        name: name.to_string(),
        classes,
        samples,
    })
}

/// A source image, its shifted copy and the mapped keypoints.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondencePair {
    pub pair: KeypointPair,
    pub source: Image,
    pub target: Image,
}

impl CorrespondencePair {
    pub fn source_key(&self) -> String {
        format!("{}-src", self.pair.key)
    }

    pub fn target_key(&self) -> String {
        format!("{}-trg", self.pair.key)
    }
}

/// Pairs whose target is the source translated by a random offset, so
/// the true correspondence of every source pixel is known.
pub fn synthetic_correspondence(count: usize, size: (usize, usize), keypoints: usize, seed: u64) -> Result<Vec<CorrespondencePair>> {
    let (w, h) = size;
    if w < 16 || h < 16 {
        return Err(Error::invalid("synthetic pairs need at least 16x16 pixels"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let blobs: Vec<(f64, f64, f64, [f32; 3])> = (0..6)
                .map(|_| {
                    (
                        rng.random_range(0.0..w as f64),
                        rng.random_range(0.0..h as f64),
                        rng.random_range(2.0..0.25 * w.min(h) as f64),
                        [rng.random(), rng.random(), rng.random()],
                    )
                })
                .collect();
            let paint = |x: f64, y: f64, c: usize| {
                let mut v = 0.2f32;
                for (bx, by, r, col) in &blobs {
                    let d2 = ((x - bx).powi(2) + (y - by).powi(2)) / (r * r);
                    v += col[c] * (-d2).exp() as f32;
                }
                v.min(1.0)
            };
            let max_shift = (w.min(h) / 4) as i64;
            let dx = rng.random_range(-max_shift..=max_shift);
            let dy = rng.random_range(-max_shift..=max_shift);
            let source = Array3::from_shape_fn((3, h, w), |(c, y, x)| paint(x as f64 + 0.5, y as f64 + 0.5, c));
            let target = Array3::from_shape_fn((3, h, w), |(c, y, x)| {
                paint(x as f64 + 0.5 - dx as f64, y as f64 + 0.5 - dy as f64, c)
            });
            let (x_lo, x_hi) = (0.max(-dx), (w as i64).min(w as i64 - dx));
            let (y_lo, y_hi) = (0.max(-dy), (h as i64).min(h as i64 - dy));
            let (src_kps, trg_kps): (Vec<_>, Vec<_>) = (0..keypoints)
                .map(|_| {
                    let x = rng.random_range(x_lo..x_hi) as f64 + 0.5;
                    let y = rng.random_range(y_lo..y_hi) as f64 + 0.5;
                    ((x, y), (x + dx as f64, y + dy as f64))
                })
                .unzip();
            let pair = KeypointPair {
                key: format!("pair-{i:04}"),
                source_size: (w as u32, h as u32),
                target_size: (w as u32, h as u32),
                target_bbox: (
                    (x_lo + dx) as f64,
                    (y_lo + dy) as f64,
                    (x_hi - x_lo) as f64,
                    (y_hi - y_lo) as f64,
                ),
                source_keypoints: src_kps,
                target_keypoints: trg_kps,
            };
            pair.validate()?;
            Ok(CorrespondencePair { pair, source, target })
        })
        .collect()
}
