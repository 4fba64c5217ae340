//! Small dense tensor kernels for the toy U-Net.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

fn gaussian<R: Rng>(rng: &mut R, shape: (usize, usize), std: f32) -> Array2<f32> {
    Array2::from_shape_simple_fn(shape, || rng.sample::<f32, _>(StandardNormal) * std)
}

/// Dense layer on row vectors: `x (N, in) -> (N, out)`.
#[derive(Clone, Debug)]
pub struct Linear {
    w: Array2<f32>,
    b: Array1<f32>,
}

impl Linear {
    pub fn new<R: Rng>(rng: &mut R, input: usize, output: usize, gain: f32) -> Self {
        Self {
            w: gaussian(rng, (input, output), gain / (input as f32).sqrt()),
            b: Array1::zeros(output),
        }
    }

    pub fn forward(&self, x: ArrayView2<f32>) -> Array2<f32> {
        x.dot(&self.w) + &self.b
    }
}

/// 2-D convolution with `k / 2` zero padding.
#[derive(Clone, Debug)]
pub struct Conv {
    /// `(out, in * k * k)`.
    w: Array2<f32>,
    b: Array1<f32>,
    input: usize,
    k: usize,
    stride: usize,
}

impl Conv {
    pub fn new<R: Rng>(rng: &mut R, input: usize, output: usize, k: usize, stride: usize, gain: f32) -> Self {
        let fan_in = input * k * k;
        Self {
            w: gaussian(rng, (output, fan_in), gain / (fan_in as f32).sqrt()),
            b: Array1::zeros(output),
            input,
            k,
            stride,
        }
    }

    pub fn forward(&self, x: ArrayView3<f32>) -> Array3<f32> {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.input, "conv input channels");
        let (k, st) = (self.k, self.stride);
        let pad = k / 2;
        let oh = (h + 2 * pad - k) / st + 1;
        let ow = (w + 2 * pad - k) / st + 1;
        let mut cols = Array2::<f32>::zeros((c * k * k, oh * ow));
        for ci in 0..c {
            for dy in 0..k {
                for dx in 0..k {
                    let row = (ci * k + dy) * k + dx;
                    let mut dst = cols.row_mut(row);
                    for oy in 0..oh {
                        let iy = (oy * st + dy) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * st + dx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * ow + ox] = x[[ci, iy as usize, ix as usize]];
                            }
                        }
                    }
                }
            }
        }
        let out = self.w.dot(&cols) + &self.b.view().insert_axis(Axis(1));
        out.into_shape_with_order((self.w.nrows(), oh, ow)).expect("conv output shape")
    }
}

pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (0.797_884_6 * (x + 0.044_715 * x * x * x)).tanh())
}

/// Group normalization without affine parameters.
pub fn group_norm(x: ArrayView3<f32>, groups: usize) -> Array3<f32> {
    let (c, _, _) = x.dim();
    let groups = gcd(groups, c).max(1);
    let per = c / groups;
    let mut out = x.to_owned();
    for g in 0..groups {
        let mut part = out.slice_mut(s![g * per..(g + 1) * per, .., ..]);
        let n = part.len() as f32;
        let mean = part.sum() / n;
        let var = part.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
        let inv = 1.0 / (var + 1e-5).sqrt();
        part.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

/// Row-wise layer normalization without affine parameters.
pub fn layer_norm(x: ArrayView2<f32>) -> Array2<f32> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let n = row.len() as f32;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
        let inv = 1.0 / (var + 1e-5).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

pub fn softmax_rows(x: &mut Array2<f32>) {
    for mut row in x.rows_mut() {
        let max = row.fold(f32::NEG_INFINITY, |m, v| m.max(*v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row /= total;
    }
}

/// `(C, H, W) -> (H * W, C)`.
pub fn to_tokens(x: ArrayView3<f32>) -> Array2<f32> {
    let (c, h, w) = x.dim();
    x.to_shape((c, h * w)).expect("token reshape").t().to_owned()
}

/// `(H * W, C) -> (C, H, W)`.
pub fn from_tokens(t: ArrayView2<f32>, h: usize, w: usize) -> Array3<f32> {
    let c = t.ncols();
    t.t()
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, h, w))
        .expect("map reshape")
}

pub fn upsample_nearest2(x: ArrayView3<f32>) -> Array3<f32> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(k, i, j)| x[[k, i / 2, j / 2]])
}

pub fn avg_pool(x: ArrayView3<f32>, f: usize) -> Array3<f32> {
    let (c, h, w) = x.dim();
    let scale = 1.0 / (f * f) as f32;
    Array3::from_shape_fn((c, h / f, w / f), |(k, i, j)| {
        x.slice(s![k, i * f..(i + 1) * f, j * f..(j + 1) * f]).sum() * scale
    })
}

pub fn concat_channels(a: ArrayView3<f32>, b: ArrayView3<f32>) -> Array3<f32> {
    ndarray::concatenate(Axis(0), &[a, b]).expect("matching spatial dims")
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn direct_conv(conv: &Conv, x: &Array3<f32>) -> Array3<f32> {
        let (c, h, w) = x.dim();
        let (k, st, pad) = (conv.k, conv.stride, conv.k / 2);
        let oh = (h + 2 * pad - k) / st + 1;
        let ow = (w + 2 * pad - k) / st + 1;
        Array3::from_shape_fn((conv.w.nrows(), oh, ow), |(o, y, xo)| {
            let mut acc = conv.b[o];
            for ci in 0..c {
                for dy in 0..k {
                    for dx in 0..k {
                        let iy = (y * st + dy) as isize - pad as isize;
                        let ix = (xo * st + dx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += conv.w[[o, (ci * k + dy) * k + dx]] * x[[ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn im2col_conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array::from_shape_fn((3, 6, 5), |(c, i, j)| ((c * 31 + i * 7 + j) % 11) as f32 - 5.0);
        for (k, stride) in [(3, 1), (3, 2), (1, 1)] {
            let conv = Conv::new(&mut rng, 3, 4, k, stride, 1.0);
            let fast = conv.forward(x.view());
            let slow = direct_conv(&conv, &x);
            assert_eq!(fast.dim(), slow.dim());
            assert!(fast.iter().zip(&slow).all(|(a, b)| (a - b).abs() < 1e-4));
        }
    }

    #[test]
    fn token_reshapes_invert() {
        let x = Array::from_shape_fn((3, 2, 4), |(c, i, j)| (c * 8 + i * 4 + j) as f32);
        let t = to_tokens(x.view());
        assert_eq!(t.dim(), (8, 3));
        assert_eq!(t[[5, 2]], x[[2, 1, 1]]);
        assert_eq!(from_tokens(t.view(), 2, 4), x);
    }

    #[test]
    fn normalizations_center_and_scale() {
        let x = Array::from_shape_fn((4, 3, 3), |(c, i, j)| (c * 9 + i * 3 + j) as f32);
        let g = group_norm(x.view(), 2);
        let first = g.slice(s![0..2, .., ..]);
        assert!(first.sum().abs() < 1e-4);
        let mut rows = Array2::from_shape_fn((2, 5), |(i, j)| (i * 5 + j) as f32);
        let ln = layer_norm(rows.view());
        assert!(ln.row(1).sum().abs() < 1e-5);
        softmax_rows(&mut rows);
        assert!(rows.rows().into_iter().all(|r| (r.sum() - 1.0).abs() < 1e-6));
    }
}
