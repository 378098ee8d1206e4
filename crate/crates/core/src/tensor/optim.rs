//! First-order optimizers.
//!
//! A step replaces each parameter with a fresh leaf holding the updated
//! values, which also clears its gradient. Parameters that received no
//! gradient since the last step are left untouched.

use super::Tensor;
use crate::scalar::Scalar;

/// Clear the gradient of every parameter.
pub fn zero_grad<'a, T: Scalar + 'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) {
    for p in params {
        p.zero_grad();
    }
}

fn replace<T: Scalar>(p: &mut Tensor<T>, values: Vec<T>) {
    *p = Tensor::param(p.shape(), values).expect("shape preserved by optimizer step");
}

/// Plain stochastic gradient descent.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub learning_rate: f64,
}

impl Sgd {
    pub fn new(learning_rate: f64) -> Self {
        Self { learning_rate }
    }

    pub fn step<'a, T: Scalar>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor<T>>) {
        let lr = T::lit(self.learning_rate);
        for p in params {
            let Some(g) = p.grad() else { continue };
            let values = p.data().iter().zip(&g).map(|(&x, &g)| x - lr * g).collect();
            replace(p, values);
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: i32,
    moments: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            moments: Vec::new(),
        }
    }

    /// Parameters must be supplied in the same order on every call.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor<T>>) {
        self.steps += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::one() - b1.powi(self.steps);
        let c2 = T::one() - b2.powi(self.steps);
        let lr = T::lit(self.learning_rate);
        let eps = T::lit(self.eps);
        for (i, p) in params.into_iter().enumerate() {
            if self.moments.len() <= i {
                self.moments.resize(i + 1, None);
            }
            let Some(g) = p.grad() else { continue };
            let (m, v) = self.moments[i]
                .get_or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
            let mut values = p.to_vec();
            for j in 0..g.len() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                values[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
            replace(p, values);
        }
    }
}
