//! Adam over a list of parameter tensors.

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD, IxDyn};

#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    /// `shapes` lists each parameter tensor's shape, in the order later
    /// passed to [`Adam::update`].
    pub fn new(learning_rate: f64, shapes: &[Vec<usize>]) -> Self {
        let zeros = || shapes.iter().map(|s| ArrayD::zeros(IxDyn(s))).collect::<Vec<_>>();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update<'a>(&mut self, params: impl IntoIterator<Item = (ArrayViewMutD<'a, f64>, ArrayViewD<'a, f64>)>) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.eps);
        for (i, (mut p, g)) in params.into_iter().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut p)
                .and(&g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    #[test]
    fn minimizes_a_quadratic() {
        let mut x = Array1::from(vec![3.0, -2.0]).into_dyn();
        let mut adam = Adam::new(0.1, &[vec![2]]);
        for _ in 0..500 {
            let g = x.mapv(|v| 2.0 * (v - 1.0));
            adam.update([(x.view_mut(), g.view())]);
        }
        assert!(x.iter().all(|v| (v - 1.0).abs() < 1e-3));
    }
}
