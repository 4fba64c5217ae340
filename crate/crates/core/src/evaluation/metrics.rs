//! Keypoint transfer accuracy and segmentation overlap.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(x, y)` in pixels.
pub type Point = (f64, f64);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointPair {
    pub key: String,
    /// `(width, height)` in pixels.
    pub source_size: (u32, u32),
    pub target_size: (u32, u32),
    /// `(x, y, width, height)` of the target object.
    pub target_bbox: (f64, f64, f64, f64),
    pub source_keypoints: Vec<Point>,
    /// Ground truth, aligned with `source_keypoints`.
    pub target_keypoints: Vec<Point>,
}

fn inside((x, y): Point, (w, h): (u32, u32)) -> bool {
    x.is_finite() && y.is_finite() && (0.0..=w as f64).contains(&x) && (0.0..=h as f64).contains(&y)
}

impl KeypointPair {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("pair {}: {m}", self.key)));
        if self.source_keypoints.len() != self.target_keypoints.len() {
            return bad(format!(
                "{} source keypoints but {} target keypoints",
                self.source_keypoints.len(),
                self.target_keypoints.len()
            ));
        }
        let (_, _, bw, bh) = self.target_bbox;
        if self.source_size.0 == 0 || self.source_size.1 == 0 || self.target_size.0 == 0 || self.target_size.1 == 0 {
            return bad("empty image".into());
        }
        if !(bw > 0.0 && bh > 0.0) {
            return bad("bounding box must have positive size".into());
        }
        if let Some(p) = self.source_keypoints.iter().find(|p| !inside(**p, self.source_size)) {
            return bad(format!("source keypoint {p:?} outside the image"));
        }
        if let Some(p) = self.target_keypoints.iter().find(|p| !inside(**p, self.target_size)) {
            return bad(format!("target keypoint {p:?} outside the image"));
        }
        Ok(())
    }

    /// `max(h, w)` of the reference extent for a variant.
    pub fn extent(&self, variant: PckVariant) -> f64 {
        match variant {
            PckVariant::Img => self.target_size.0.max(self.target_size.1) as f64,
            PckVariant::Bbox => self.target_bbox.2.max(self.target_bbox.3),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PckVariant {
    Img,
    Bbox,
}

/// Relative slack on the squared threshold so that a distance equal to
/// the radius in exact arithmetic is not lost to rounding of `alpha`.
const BOUNDARY_SLACK: f64 = 1e-12;

/// Correct iff the Euclidean distance is at most `alpha * extent`.
pub fn within_threshold(pred: Point, truth: Point, extent: f64, alpha: f64) -> bool {
    let (dx, dy) = (pred.0 - truth.0, pred.1 - truth.1);
    let r = alpha * extent;
    dx * dx + dy * dy <= r * r * (1.0 + BOUNDARY_SLACK)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PckResult {
    pub variant: PckVariant,
    pub alpha: f64,
    pub correct: usize,
    pub total: usize,
    /// Pooled over every keypoint.
    pub pck: f64,
    /// Mean of per-pair ratios over pairs with keypoints.
    pub per_image_mean: f64,
    /// `(correct, total)` per pair.
    pub per_pair: Vec<(usize, usize)>,
}

/// PCK of `predicted` (aligned with each pair's keypoints).
pub fn pck(predicted: &[Vec<Point>], pairs: &[KeypointPair], variant: PckVariant, alpha: f64) -> Result<PckResult> {
    if predicted.len() != pairs.len() {
        return Err(Error::invalid(format!("{} predictions for {} pairs", predicted.len(), pairs.len())));
    }
    if !(alpha > 0.0) {
        return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
    }
    let mut per_pair = Vec::with_capacity(pairs.len());
    for (pred, pair) in predicted.iter().zip(pairs) {
        pair.validate()?;
        if pred.len() != pair.target_keypoints.len() {
            return Err(Error::invalid(format!(
                "pair {}: {} predictions for {} keypoints",
                pair.key,
                pred.len(),
                pair.target_keypoints.len()
            )));
        }
        let extent = pair.extent(variant);
        let correct = pred
            .iter()
            .zip(&pair.target_keypoints)
            .filter(|(p, t)| within_threshold(**p, **t, extent, alpha))
            .count();
        per_pair.push((correct, pred.len()));
    }
    let correct: usize = per_pair.iter().map(|p| p.0).sum();
    let total: usize = per_pair.iter().map(|p| p.1).sum();
    if total == 0 {
        return Err(Error::invalid("PCK over zero keypoints is undefined"));
    }
    let ratios: Vec<f64> = per_pair
        .iter()
        .filter(|(_, t)| *t > 0)
        .map(|(c, t)| *c as f64 / *t as f64)
        .collect();
    Ok(PckResult {
        variant,
        alpha,
        correct,
        total,
        pck: correct as f64 / total as f64,
        per_image_mean: ratios.iter().sum::<f64>() / ratios.len() as f64,
        per_pair,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PckReport {
    pub img: PckResult,
    pub bbox: PckResult,
}

pub fn pck_report(predicted: &[Vec<Point>], pairs: &[KeypointPair], alpha: f64) -> Result<PckReport> {
    Ok(PckReport {
        img: pck(predicted, pairs, PckVariant::Img, alpha)?,
        bbox: pck(predicted, pairs, PckVariant::Bbox, alpha)?,
    })
}

/// Accumulates predicted/true class counts across any number of maps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    ignore: Option<u32>,
    /// `counts[truth * classes + pred]`.
    counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouResult {
    /// Mean IoU over classes with a non-empty union.
    pub score: f64,
    /// `None` for classes absent from both prediction and truth.
    pub per_class: Vec<Option<f64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize, ignore: Option<u32>) -> Self {
        Self {
            classes,
            ignore,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, pred: &[u32], truth: &[u32]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::shape(format!("{} predictions for {} labels", pred.len(), truth.len())));
        }
        let k = self.classes as u32;
        for (&p, &t) in pred.iter().zip(truth) {
            if Some(t) == self.ignore {
                continue;
            }
            if t >= k || p >= k {
                return Err(Error::invalid(format!("class {} outside 0..{k}", t.max(p))));
            }
            self.counts[(t * k + p) as usize] += 1;
        }
        Ok(())
    }

    pub fn evaluated_pixels(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn result(&self) -> Result<MiouResult> {
        let k = self.classes;
        let per_class: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let tp = self.counts[c * k + c];
                let truth: u64 = self.counts[c * k..(c + 1) * k].iter().sum();
                let pred: u64 = (0..k).map(|t| self.counts[t * k + c]).sum();
                let union = truth + pred - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(Error::invalid("mIoU over zero evaluated pixels is undefined"));
        }
        Ok(MiouResult {
            score: present.iter().sum::<f64>() / present.len() as f64,
            per_class,
        })
    }
}

/// Mean intersection-over-union of two equally sized label maps.
pub fn miou(pred: &[u32], truth: &[u32], classes: usize, ignore: Option<u32>) -> Result<MiouResult> {
    let mut cm = ConfusionMatrix::new(classes, ignore);
    cm.add(pred, truth)?;
    cm.result()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(w: u32, h: u32, gt: Vec<Point>) -> KeypointPair {
        KeypointPair {
            key: "p".into(),
            source_size: (w, h),
            target_size: (w, h),
            target_bbox: (0.0, 0.0, w as f64 / 2.0, h as f64 / 2.0),
            source_keypoints: gt.clone(),
            target_keypoints: gt,
        }
    }

    #[test]
    fn boundary_is_inclusive() {
        let p = pair(200, 100, vec![(50.0, 50.0), (50.0, 50.0)]);
        let r = pck(&[vec![(66.0, 62.0), (67.0, 62.0)]], &[p], PckVariant::Img, 0.1).unwrap();
        assert_eq!((r.correct, r.total), (1, 2));
    }

    #[test]
    fn perfect_predictions_score_one() {
        let p = pair(64, 48, vec![(1.0, 2.0), (30.0, 40.0)]);
        let r = pck_report(&[p.target_keypoints.clone()], &[p], 0.1).unwrap();
        assert_eq!((r.img.pck, r.bbox.pck), (1.0, 1.0));
    }

    #[test]
    fn zero_keypoints_is_an_error() {
        let p = pair(10, 10, vec![]);
        assert!(pck(&[vec![]], &[p], PckVariant::Img, 0.1).is_err());
    }

    #[test]
    fn per_image_mean_differs_from_pooling() {
        let a = pair(100, 100, vec![(10.0, 10.0)]);
        let b = pair(100, 100, vec![(10.0, 10.0), (20.0, 20.0), (30.0, 30.0)]);
        let preds = vec![vec![(10.0, 10.0)], vec![(90.0, 90.0), (90.0, 90.0), (90.0, 90.0)]];
        let r = pck(&preds, &[a, b], PckVariant::Img, 0.1).unwrap();
        assert_eq!(r.pck, 0.25);
        assert_eq!(r.per_image_mean, 0.5);
    }

    #[test]
    fn strip_example() {
        let r = miou(&[0, 1, 1, 1], &[0, 0, 1, 1], 2, None).unwrap();
        assert!((r.score - 7.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn absent_classes_are_excluded_and_ignore_is_honoured() {
        let r = miou(&[0, 0, 2, 1], &[0, 0, 255, 1], 3, Some(255)).unwrap();
        assert_eq!(r.per_class, vec![Some(1.0), Some(1.0), None]);
        assert_eq!(r.score, 1.0);
        assert!(miou(&[0, 3], &[0, 1], 3, None).is_err());
        assert!(miou(&[0], &[0, 1], 3, None).is_err());
    }

    #[test]
    fn disjoint_predictions_score_zero() {
        let r = miou(&[1, 1, 0, 0], &[0, 0, 1, 1], 2, None).unwrap();
        assert_eq!(r.score, 0.0);
    }
}
