//! Nearest-neighbour keypoint transfer and the optional learned projection.

use ndarray::{Array1, Array2, Array3, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::metrics::{KeypointPair, Point};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::resize::sample_bilinear;

/// Image pixel coordinate to feature-grid coordinate, pixel centres aligned.
pub fn image_to_grid(v: f64, image: u32, grid: usize) -> f64 {
    (v + 0.5) * grid as f64 / image as f64 - 0.5
}

pub fn grid_to_image(u: f64, image: u32, grid: usize) -> f64 {
    (u + 0.5) * image as f64 / grid as f64 - 0.5
}

fn unit_rows(x: ArrayView3<f32>) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut rows = Array2::from_shape_fn((h * w, c), |(p, k)| x[[k, p / w, p % w]] as f64);
    for mut r in rows.rows_mut() {
        let n = r.dot(&r).sqrt();
        if n > 0.0 {
            r /= n;
        }
    }
    rows
}

fn unit(v: Vec<f32>) -> Array1<f64> {
    let v = Array1::from_iter(v.into_iter().map(f64::from));
    let n = v.dot(&v).sqrt();
    if n > 0.0 {
        v / n
    } else {
        v
    }
}

/// Predicts a target location for each source keypoint by cosine
/// nearest neighbour over the target feature grid.
pub fn nn_correspond(
    source: ArrayView3<f32>,
    source_size: (u32, u32),
    target: ArrayView3<f32>,
    target_size: (u32, u32),
    keypoints: &[Point],
) -> Result<Vec<Point>> {
    let (c, sh, sw) = source.dim();
    let (tc, th, tw) = target.dim();
    if c != tc {
        return Err(Error::shape(format!("source has {c} channels, target {tc}")));
    }
    if keypoints.is_empty() {
        return Ok(Vec::new());
    }
    if sh * sw == 0 || th * tw == 0 {
        return Err(Error::shape("empty feature map"));
    }
    let (w, h) = source_size;
    if let Some(p) = keypoints
        .iter()
        .find(|(x, y)| !(x.is_finite() && y.is_finite() && (0.0..=w as f64).contains(x) && (0.0..=h as f64).contains(y)))
    {
        return Err(Error::invalid(format!("keypoint {p:?} outside the {w}x{h} source image")));
    }
    let cells = unit_rows(target);
    Ok(keypoints
        .iter()
        .map(|&(x, y)| {
            let v = unit(sample_bilinear(source, image_to_grid(y, h, sh), image_to_grid(x, w, sw)));
            let sims = cells.dot(&v);
            let mut best = 0;
            for (i, s) in sims.iter().enumerate() {
                if *s > sims[best] {
                    best = i;
                }
            }
            (
                grid_to_image((best % tw) as f64, target_size.0, tw),
                grid_to_image((best / tw) as f64, target_size.1, th),
            )
        })
        .collect())
}

/// One pair of images with dense features and keypoint annotations.
#[derive(Clone, Debug)]
pub struct CorrespondenceSample {
    pub pair: KeypointPair,
    pub source: Array3<f32>,
    pub target: Array3<f32>,
}

pub fn predict(samples: &[CorrespondenceSample], refiner: Option<&Refiner>) -> Result<Vec<Vec<Point>>> {
    samples
        .iter()
        .map(|s| {
            let (src, trg) = match refiner {
                Some(r) => (r.apply(s.source.view())?, r.apply(s.target.view())?),
                None => (s.source.clone(), s.target.clone()),
            };
            nn_correspond(src.view(), s.pair.source_size, trg.view(), s.pair.target_size, &s.pair.source_keypoints)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinerConfig {
    pub epochs: usize,
    pub pairs_per_epoch: usize,
    pub learning_rate: f64,
    /// Softmax temperature on cosine similarities.
    pub temperature: f64,
    /// Output width; `None` keeps the input width.
    pub out_channels: Option<usize>,
    pub seed: u64,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            pairs_per_epoch: 5000,
            learning_rate: 1e-2,
            temperature: 0.1,
            out_channels: None,
            seed: 0,
        }
    }
}

/// A 1×1 convolution applied to features before matching.
#[derive(Clone, Debug, PartialEq)]
pub struct Refiner {
    /// `(out, in)`.
    pub weight: Array2<f64>,
}

impl Refiner {
    pub fn identity(channels: usize) -> Self {
        Self {
            weight: Array2::eye(channels),
        }
    }

    pub fn random(input: usize, output: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (input as f64).sqrt();
        Self {
            weight: Array2::from_shape_simple_fn((output, input), || rng.sample::<f64, _>(StandardNormal) * scale),
        }
    }

    pub fn apply(&self, x: ArrayView3<f32>) -> Result<Array3<f32>> {
        let (c, h, w) = x.dim();
        if c != self.weight.ncols() {
            return Err(Error::shape(format!("refiner expects {} channels, got {c}", self.weight.ncols())));
        }
        let flat = x.to_shape((c, h * w)).map_err(|e| Error::shape(e.to_string()))?.mapv(f64::from);
        let out = self.weight.dot(&flat).mapv(|v| v as f32);
        Ok(out.into_shape_with_order((self.weight.nrows(), h, w)).expect("refiner output shape"))
    }

    /// Contrastive loss of one annotated pair and its gradient w.r.t. `weight`.
    pub fn loss_and_gradient(&self, sample: &CorrespondenceSample, temperature: f64) -> Result<(f64, Array2<f64>)> {
        let (c, sh, sw) = sample.source.dim();
        let (tc, th, tw) = sample.target.dim();
        if c != tc || c != self.weight.ncols() {
            return Err(Error::shape(format!(
                "refiner expects {} channels, got {c} and {tc}",
                self.weight.ncols()
            )));
        }
        let pair = &sample.pair;
        let wt = &self.weight;
        let targets = Array2::from_shape_fn((th * tw, c), |(p, k)| sample.target[[k, p / tw, p % tw]] as f64);
        let g = targets.dot(&wt.t());
        let g_norm: Array1<f64> = g.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(1e-12));
        let gn = &g / &g_norm.view().insert_axis(Axis(1));
        let mut grad = Array2::zeros(wt.dim());
        let mut grad_g = Array2::<f64>::zeros(g.dim());
        let mut loss = 0.0;
        let n = pair.source_keypoints.len();
        for (&(sx, sy), &(tx, ty)) in pair.source_keypoints.iter().zip(&pair.target_keypoints) {
            let s = Array1::from_iter(
                sample_bilinear(
                    sample.source.view(),
                    image_to_grid(sy, pair.source_size.1, sh),
                    image_to_grid(sx, pair.source_size.0, sw),
                )
                .into_iter()
                .map(f64::from),
            );
            let f = wt.dot(&s);
            let f_norm = f.dot(&f).sqrt().max(1e-12);
            let fnv = &f / f_norm;
            let logits = gn.dot(&fnv) / temperature;
            let max = logits.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
            let exp = logits.mapv(|v| (v - max).exp());
            let total = exp.sum();
            let gx = image_to_grid(tx, pair.target_size.0, tw).round().clamp(0.0, (tw - 1) as f64) as usize;
            let gy = image_to_grid(ty, pair.target_size.1, th).round().clamp(0.0, (th - 1) as f64) as usize;
            let truth = gy * tw + gx;
            loss += -(logits[truth] - max - total.ln()) / n as f64;
            let mut dz = exp / total;
            dz[truth] -= 1.0;
            dz /= n as f64 * temperature;
            let d_fn = gn.t().dot(&dz);
            let d_f = (&d_fn - &(&fnv * fnv.dot(&d_fn))) / f_norm;
            grad += &d_f
                .view()
                .insert_axis(Axis(1))
                .dot(&s.view().insert_axis(Axis(0)));
            for (j, mut row) in grad_g.rows_mut().into_iter().enumerate() {
                row.scaled_add(dz[j], &fnv);
            }
        }
        for (j, mut row) in grad_g.rows_mut().into_iter().enumerate() {
            let gnj = gn.row(j);
            let proj = gnj.dot(&row);
            row.scaled_add(-proj, &gnj);
            row /= g_norm[j];
        }
        grad += &grad_g.t().dot(&targets);
        Ok((loss, grad))
    }
}

/// Trains a refiner from identity by Adam over randomly drawn pairs.
pub fn train_refiner(samples: &[CorrespondenceSample], config: &RefinerConfig) -> Result<Refiner> {
    let Some(first) = samples.iter().find(|s| !s.pair.source_keypoints.is_empty()) else {
        return Err(Error::invalid("refiner training needs pairs with keypoints"));
    };
    if !(config.temperature > 0.0 && config.learning_rate > 0.0) {
        return Err(Error::config("refiner temperature and learning rate must be positive"));
    }
    let c = first.source.dim().0;
    for s in samples {
        s.pair.validate()?;
        if s.source.dim().0 != c || s.target.dim().0 != c {
            return Err(Error::shape(format!("pair {}: expected {c} channels", s.pair.key)));
        }
    }
    let out = config.out_channels.unwrap_or(c);
    let mut refiner = if out == c {
        Refiner::identity(c)
    } else {
        let mut w = Array2::zeros((out, c));
        for i in 0..out.min(c) {
            w[[i, i]] = 1.0;
        }
        Refiner { weight: w }
    };
    let usable: Vec<&CorrespondenceSample> = samples.iter().filter(|s| !s.pair.source_keypoints.is_empty()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.learning_rate, &[vec![out, c]]);
    for _ in 0..config.epochs * config.pairs_per_epoch {
        let sample = usable[rng.random_range(0..usable.len())];
        let (_, grad) = refiner.loss_and_gradient(sample, config.temperature)?;
        let grad = grad.into_dyn();
        adam.update([(refiner.weight.view_mut().into_dyn(), grad.view())]);
    }
    Ok(refiner)
}
