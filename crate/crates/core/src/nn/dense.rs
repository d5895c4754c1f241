use rand::Rng;

use super::init::init_params;
use super::params::{ParamSet, ParamVisitor, ParamVisitorMut};
use super::real::{gemm, MatRef};
use super::{Real, Tensor4};
use crate::error::{Error, Result};

/// Fully-connected layer `y = W x + b`; inputs are `(batch, in, 1, 1)` tensors
/// (any trailing shape is flattened per sample).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `(out_dim, in_dim)`.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> DenseLayer<T> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        DenseLayer {
            in_dim,
            out_dim,
            weight: vec![T::zero(); in_dim * out_dim],
            bias: vec![T::zero(); out_dim],
        }
    }

    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        DenseLayer {
            in_dim,
            out_dim,
            weight: init_params(in_dim * out_dim, in_dim, rng),
            bias: vec![T::zero(); out_dim],
        }
    }
}

impl<T: Real> ParamSet<T> for DenseLayer<T> {
    fn visit_params(&self, f: &mut ParamVisitor<'_, T>) {
        f("weight", &[self.out_dim, self.in_dim], &self.weight);
        f("bias", &[self.out_dim], &self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut ParamVisitorMut<'_, T>) {
        f("weight", &[self.out_dim, self.in_dim], &mut self.weight);
        f("bias", &[self.out_dim], &mut self.bias);
    }
}

fn check<T: Real>(x: &Tensor4<T>, layer: &DenseLayer<T>) -> Result<()> {
    if x.sample_len() != layer.in_dim {
        return Err(Error::shape(format!(
            "dense layer expects {} inputs, got {}",
            layer.in_dim,
            x.sample_len()
        )));
    }
    Ok(())
}

pub fn dense_forward<T: Real>(x: &Tensor4<T>, layer: &DenseLayer<T>) -> Result<Tensor4<T>> {
    check(x, layer)?;
    let n = x.batch();
    let mut y = Tensor4::zeros([n, layer.out_dim, 1, 1]);
    for s in 0..n {
        y.sample_mut(s).copy_from_slice(&layer.bias);
    }
    gemm(
        MatRef::row_major(x.data(), n, layer.in_dim),
        MatRef::row_major(&layer.weight, layer.out_dim, layer.in_dim).t(),
        T::one(),
        y.data_mut(),
    );
    Ok(y)
}

#[derive(Debug, Clone)]
pub struct DenseGrads<T> {
    pub input: Tensor4<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn dense_backward<T: Real>(grad: &Tensor4<T>, x: &Tensor4<T>, layer: &DenseLayer<T>) -> Result<DenseGrads<T>> {
    check(x, layer)?;
    let n = x.batch();
    grad.expect_shape([n, layer.out_dim, 1, 1], "dense backward upstream gradient")?;
    let g = MatRef::row_major(grad.data(), n, layer.out_dim);
    let mut weight = vec![T::zero(); layer.weight.len()];
    gemm(
        g.t(),
        MatRef::row_major(x.data(), n, layer.in_dim),
        T::zero(),
        &mut weight,
    );
    let mut bias = vec![T::zero(); layer.out_dim];
    for s in 0..n {
        bias.iter_mut().zip(grad.sample(s)).for_each(|(b, &v)| *b += v);
    }
    let mut input = Tensor4::zeros(x.shape());
    gemm(
        g,
        MatRef::row_major(&layer.weight, layer.out_dim, layer.in_dim),
        T::zero(),
        input.data_mut(),
    );
    Ok(DenseGrads { input, weight, bias })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_rng;
    use rand::Rng;

    fn col(v: Vec<f64>, n: usize) -> Tensor4<f64> {
        let d = v.len() / n;
        Tensor4::from_vec([n, d, 1, 1], v).unwrap()
    }

    #[test]
    fn identity_and_zero_input() {
        let mut l = DenseLayer::<f64>::zeros(3, 3);
        for i in 0..3 {
            l.weight[i * 3 + i] = 1.0;
        }
        let x = col(vec![1.0, -2.0, 3.5, 0.5, 0.0, 9.0], 2);
        assert_eq!(dense_forward(&x, &l).unwrap(), x);
        l.bias = vec![0.1, 0.2, 0.3];
        let y = dense_forward(&col(vec![0.0; 3], 1), &l).unwrap();
        assert_eq!(y.data(), &[0.1, 0.2, 0.3]);
    }

    #[test]
    fn length_mismatch() {
        let l = DenseLayer::<f64>::zeros(3, 2);
        assert!(dense_forward(&col(vec![0.0; 4], 1), &l).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = seeded_rng(4);
        let mut l = DenseLayer::<f64>::init(5, 3, &mut rng);
        l.bias = vec![0.3, -0.2, 0.9];
        let x = col((0..10).map(|_| rng.random_range(-1.0..1.0)).collect(), 2);
        let up = col((0..6).map(|_| rng.random_range(-1.0..1.0)).collect(), 2);
        let loss = |x: &Tensor4<f64>, l: &DenseLayer<f64>| -> f64 {
            dense_forward(x, l)
                .unwrap()
                .data()
                .iter()
                .zip(up.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let g = dense_backward(&up, &x, &l).unwrap();
        let h = 1e-5;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        for k in 0..l.weight.len() {
            let mut p = l.clone();
            p.weight[k] += h;
            let mut m = l.clone();
            m.weight[k] -= h;
            assert!(rel(g.weight[k], (loss(&x, &p) - loss(&x, &m)) / (2.0 * h)) <= 1e-6);
        }
        for k in 0..3 {
            let mut p = l.clone();
            p.bias[k] += h;
            let mut m = l.clone();
            m.bias[k] -= h;
            assert!(rel(g.bias[k], (loss(&x, &p) - loss(&x, &m)) / (2.0 * h)) <= 1e-6);
        }
        for k in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[k] += h;
            let mut m = x.clone();
            m.data_mut()[k] -= h;
            assert!(rel(g.input.data()[k], (loss(&p, &l) - loss(&m, &l)) / (2.0 * h)) <= 1e-6);
        }
    }
}
