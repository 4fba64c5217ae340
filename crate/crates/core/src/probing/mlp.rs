//! Pixel classifier: Linear → ReLU → BatchNorm hidden layers and a linear head.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::optim::Adam;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
struct Dense {
    w: Array2<f64>,
    b: Array1<f64>,
}

impl Dense {
    fn new<R: Rng>(rng: &mut R, input: usize, output: usize) -> Self {
        let std = (2.0 / input as f64).sqrt();
        Self {
            w: Array2::from_shape_simple_fn((input, output), || rng.sample::<f64, _>(StandardNormal) * std),
            b: Array1::zeros(output),
        }
    }

    fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: Array1<f64>,
    beta: Array1<f64>,
    running_mean: Array1<f64>,
    running_var: Array1<f64>,
}

impl Norm {
    fn new(width: usize) -> Self {
        Self {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
        }
    }
}

struct HiddenCache {
    input: Array2<f64>,
    pre: Array2<f64>,
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

#[derive(Clone, Debug)]
pub struct Mlp {
    hidden: Vec<(Dense, Norm)>,
    head: Dense,
}

/// Gradients, laid out like the parameters.
pub struct Gradients {
    hidden: Vec<[Array1<f64>; 3]>,
    hidden_w: Vec<Array2<f64>>,
    head_w: Array2<f64>,
    head_b: Array1<f64>,
}

impl Mlp {
    pub fn new<R: Rng>(rng: &mut R, input: usize, hidden: &[usize], classes: usize) -> Self {
        let mut layers = Vec::new();
        let mut width = input;
        for &h in hidden {
            layers.push((Dense::new(rng, width, h), Norm::new(h)));
            width = h;
        }
        Self {
            hidden: layers,
            head: Dense::new(rng, width, classes),
        }
    }

    fn shapes(&self) -> Vec<Vec<usize>> {
        let mut s = Vec::new();
        for (d, _) in &self.hidden {
            let (i, o) = d.w.dim();
            s.extend([vec![i, o], vec![o], vec![o], vec![o]]);
        }
        let (i, o) = self.head.w.dim();
        s.extend([vec![i, o], vec![o]]);
        s
    }

    pub fn optimizer(&self, learning_rate: f64) -> Adam {
        Adam::new(learning_rate, &self.shapes())
    }

    /// Logits in inference mode, using running statistics.
    pub fn logits(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut h = x.to_owned();
        for (d, n) in &self.hidden {
            let a = d.forward(h.view()).mapv(|v| v.max(0.0));
            let inv = n.running_var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
            h = (a - &n.running_mean) * &inv * &n.gamma + &n.beta;
        }
        self.head.forward(h.view())
    }

    /// Mean cross-entropy on a batch in training mode, its gradients, and
    /// the batch statistics to fold into the running estimates.
    #[allow(clippy::type_complexity)]
    pub fn loss_and_gradients(
        &self,
        x: ArrayView2<f64>,
        labels: &[u32],
    ) -> (f64, Gradients, Vec<(Array1<f64>, Array1<f64>)>) {
        let n = x.nrows() as f64;
        let mut caches = Vec::with_capacity(self.hidden.len());
        let mut stats = Vec::with_capacity(self.hidden.len());
        let mut h = x.to_owned();
        for (d, norm) in &self.hidden {
            let pre = d.forward(h.view());
            let a = pre.mapv(|v| v.max(0.0));
            let mean = a.mean_axis(Axis(0)).expect("non-empty batch");
            let centered = &a - &mean;
            let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).expect("non-empty batch");
            let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
            let xhat = centered * &inv_std;
            let out = &xhat * &norm.gamma + &norm.beta;
            stats.push((mean, var));
            caches.push(HiddenCache {
                input: std::mem::replace(&mut h, out),
                pre,
                xhat,
                inv_std,
            });
        }
        let logits = self.head.forward(h.view());
        let mut loss = 0.0;
        let mut dlogits = logits.clone();
        for (mut row, &y) in dlogits.rows_mut().into_iter().zip(labels) {
            let max = row.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
            row.mapv_inplace(|v| (v - max).exp());
            let total = row.sum();
            row /= total;
            loss -= row[y as usize].ln();
            row[y as usize] -= 1.0;
        }
        loss /= n;
        dlogits /= n;
        let head_w = h.t().dot(&dlogits);
        let head_b = dlogits.sum_axis(Axis(0));
        let mut up = dlogits.dot(&self.head.w.t());
        let mut hidden = Vec::with_capacity(self.hidden.len());
        let mut hidden_w = Vec::with_capacity(self.hidden.len());
        for ((d, norm), cache) in self.hidden.iter().zip(caches).rev() {
            let dgamma = (&up * &cache.xhat).sum_axis(Axis(0));
            let dbeta = up.sum_axis(Axis(0));
            let dxhat = &up * &norm.gamma;
            let sum = dxhat.sum_axis(Axis(0));
            let dot = (&dxhat * &cache.xhat).sum_axis(Axis(0));
            let da = (dxhat * n - &sum - &cache.xhat * &dot) * &(&cache.inv_std / n);
            let dpre = da * &cache.pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
            hidden_w.push(cache.input.t().dot(&dpre));
            hidden.push([dpre.sum_axis(Axis(0)), dgamma, dbeta]);
            up = dpre.dot(&d.w.t());
        }
        hidden.reverse();
        hidden_w.reverse();
        (
            loss,
            Gradients {
                hidden,
                hidden_w,
                head_w,
                head_b,
            },
            stats,
        )
    }

    /// One optimizer step on a batch; returns the batch loss.
    pub fn train_step(&mut self, adam: &mut Adam, x: ArrayView2<f64>, labels: &[u32]) -> f64 {
        let (loss, g, stats) = self.loss_and_gradients(x, labels);
        let n = x.nrows() as f64;
        for ((_, norm), (mean, var)) in self.hidden.iter_mut().zip(stats) {
            let unbiased = if n > 1.0 { var * (n / (n - 1.0)) } else { var };
            norm.running_mean = &norm.running_mean * (1.0 - BN_MOMENTUM) + mean * BN_MOMENTUM;
            norm.running_var = &norm.running_var * (1.0 - BN_MOMENTUM) + unbiased * BN_MOMENTUM;
        }
        let mut pairs = Vec::new();
        for ((d, norm), (gw, [gb, gg, gbeta])) in self
            .hidden
            .iter_mut()
            .zip(g.hidden_w.iter().zip(g.hidden.iter()))
        {
            pairs.push((d.w.view_mut().into_dyn(), gw.view().into_dyn()));
            pairs.push((d.b.view_mut().into_dyn(), gb.view().into_dyn()));
            pairs.push((norm.gamma.view_mut().into_dyn(), gg.view().into_dyn()));
            pairs.push((norm.beta.view_mut().into_dyn(), gbeta.view().into_dyn()));
        }
        pairs.push((self.head.w.view_mut().into_dyn(), g.head_w.view().into_dyn()));
        pairs.push((self.head.b.view_mut().into_dyn(), g.head_b.view().into_dyn()));
        adam.update(pairs);
        loss
    }
}
