//! Spatial resizing of channel-first maps.

use ndarray::{Array3, ArrayView3};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMode {
    #[default]
    Bilinear,
    Nearest,
}

impl std::str::FromStr for ResizeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "bilinear" => Ok(ResizeMode::Bilinear),
            "nearest" => Ok(ResizeMode::Nearest),
            _ => Err(format!("unknown resize mode `{s}`")),
        }
    }
}

/// Source coordinate of destination pixel `i` under half-pixel alignment.
#[inline]
fn source_coord(i: usize, dst: usize, src: usize) -> f64 {
    ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64)
}

fn axis_taps(dst: usize, src: usize) -> Vec<(usize, usize, f32)> {
    (0..dst)
        .map(|i| {
            let x = source_coord(i, dst, src);
            let lo = x.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, (x - lo as f64) as f32)
        })
        .collect()
}

/// Resizes `(C, H, W)` to `(C, height, width)`. Equal sizes copy the input
/// unchanged.
pub fn resize(src: ArrayView3<f32>, height: usize, width: usize, mode: ResizeMode) -> Array3<f32> {
    let (c, h, w) = src.dim();
    if (h, w) == (height, width) {
        return src.to_owned();
    }
    assert!(h > 0 && w > 0 && height > 0 && width > 0, "resize of an empty map");
    match mode {
        ResizeMode::Nearest => Array3::from_shape_fn((c, height, width), |(k, i, j)| {
            let y = ((i as f64 + 0.5) * h as f64 / height as f64).floor() as usize;
            let x = ((j as f64 + 0.5) * w as f64 / width as f64).floor() as usize;
            src[[k, y.min(h - 1), x.min(w - 1)]]
        }),
        ResizeMode::Bilinear => {
            let ys = axis_taps(height, h);
            let xs = axis_taps(width, w);
            Array3::from_shape_fn((c, height, width), |(k, i, j)| {
                let (y0, y1, fy) = ys[i];
                let (x0, x1, fx) = xs[j];
                let top = src[[k, y0, x0]] * (1.0 - fx) + src[[k, y0, x1]] * fx;
                let bottom = src[[k, y1, x0]] * (1.0 - fx) + src[[k, y1, x1]] * fx;
                top * (1.0 - fy) + bottom * fy
            })
        }
    }
}

/// Bilinear sample of every channel at continuous map coordinates
/// `(y, x)`, pixel centers at integers; coordinates are clamped.
pub fn sample_bilinear(src: ArrayView3<f32>, y: f64, x: f64) -> Vec<f32> {
    let (c, h, w) = src.dim();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    (0..c)
        .map(|k| {
            let top = src[[k, y0, x0]] * (1.0 - fx) + src[[k, y0, x1]] * fx;
            let bottom = src[[k, y1, x0]] * (1.0 - fx) + src[[k, y1, x1]] * fx;
            top * (1.0 - fy) + bottom * fy
        })
        .collect()
}
