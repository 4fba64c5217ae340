//! Three principal components of a feature map rendered as RGB.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array3, ArrayView3};

/// Relative eigenvalue below which a component counts as constant.
const FLAT: f64 = 1e-10;

/// `(H, W, 3)` bytes. Each component is min-max normalized on its own;
/// components without variance render as mid gray.
pub fn pca_rgb(features: ArrayView3<f32>) -> Array3<u8> {
    let (c, h, w) = features.dim();
    let n = h * w;
    let mut out = Array3::from_elem((h, w, 3), 128u8);
    if n == 0 || c == 0 {
        return out;
    }
    let mut x = DMatrix::from_fn(n, c, |p, k| f64::from(features[[k, p / w, p % w]]));
    for mut col in x.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    let scores: Vec<(f64, Vec<f64>)> = if n <= c {
        let gram = &x * x.transpose();
        let eig = SymmetricEigen::new(gram);
        ranked(&eig.eigenvalues)
            .into_iter()
            .map(|i| (eig.eigenvalues[i], eig.eigenvectors.column(i).iter().map(|u| u * eig.eigenvalues[i].max(0.0).sqrt()).collect()))
            .collect()
    } else {
        let cov = x.transpose() * &x;
        let eig = SymmetricEigen::new(cov);
        ranked(&eig.eigenvalues)
            .into_iter()
            .map(|i| (eig.eigenvalues[i], (&x * eig.eigenvectors.column(i)).iter().copied().collect()))
            .collect()
    };
    let total_scale = x.iter().map(|v| v * v).sum::<f64>();
    for (channel, (lambda, mut s)) in scores.into_iter().take(3).enumerate() {
        if total_scale == 0.0 || lambda <= FLAT * total_scale {
            continue;
        }
        let peak = s.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if peak < 0.0 {
            s.iter_mut().for_each(|v| *v = -*v);
        }
        let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo <= 0.0 {
            continue;
        }
        for (p, v) in s.iter().enumerate() {
            out[[p / w, p % w, channel]] = ((v - lo) / (hi - lo) * 255.0).round() as u8;
        }
    }
    out
}

fn ranked(values: &nalgebra::DVector<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|a, b| values[*b].total_cmp(&values[*a]).then(a.cmp(b)));
    idx
}
