//! 3×3 convolution with zero padding of width 1, so `H×W` is preserved.
//!
//! Implemented as im2col followed by a GEMM per sample.

use rand::Rng;

use super::init::init_params;
use super::params::{ParamSet, ParamVisitor, ParamVisitorMut};
use super::real::{gemm, MatRef};
use super::{Real, Tensor4};
use crate::error::{Error, Result};

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    /// `(out_ch, in_ch, 3, 3)`.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvLayer<T> {
    pub fn zeros(in_ch: usize, out_ch: usize) -> Self {
        ConvLayer {
            in_ch,
            out_ch,
            weight: vec![T::zero(); out_ch * in_ch * TAPS],
            bias: vec![T::zero(); out_ch],
        }
    }

    /// Uniform fan-in initialization, zero bias.
    pub fn init<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        ConvLayer {
            in_ch,
            out_ch,
            weight: init_params(out_ch * in_ch * TAPS, in_ch * TAPS, rng),
            bias: vec![T::zero(); out_ch],
        }
    }

    #[inline]
    pub fn w_index(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_ch + i) * KERNEL + ky) * KERNEL + kx
    }
}

impl<T: Real> ParamSet<T> for ConvLayer<T> {
    fn visit_params(&self, f: &mut ParamVisitor<'_, T>) {
        f("weight", &[self.out_ch, self.in_ch, KERNEL, KERNEL], &self.weight);
        f("bias", &[self.out_ch], &self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut ParamVisitorMut<'_, T>) {
        f("weight", &[self.out_ch, self.in_ch, KERNEL, KERNEL], &mut self.weight);
        f("bias", &[self.out_ch], &mut self.bias);
    }
}

/// Column matrix `(in_ch * 9) × (h * w)` of one sample.
fn im2col<T: Real>(x: &[T], ch: usize, h: usize, w: usize, col: &mut [T]) {
    let hw = h * w;
    for c in 0..ch {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &mut col[((c * KERNEL + ky) * KERNEL + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (xx, d) in dst.iter_mut().enumerate() {
                        let sx = xx as isize + kx as isize - 1;
                        *d = if sx < 0 || sx >= w as isize {
                            T::zero()
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add of a column matrix back onto the image.
fn col2im<T: Real>(col: &[T], ch: usize, h: usize, w: usize, x: &mut [T]) {
    let hw = h * w;
    for c in 0..ch {
        let plane = &mut x[c * hw..(c + 1) * hw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &col[((c * KERNEL + ky) * KERNEL + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += row[y * w + xx];
                        }
                    }
                }
            }
        }
    }
}

fn check_input<T: Real>(input: &Tensor4<T>, layer: &ConvLayer<T>) -> Result<()> {
    if input.channels() != layer.in_ch {
        return Err(Error::shape(format!(
            "conv expects {} input channels, got {}",
            layer.in_ch,
            input.channels()
        )));
    }
    Ok(())
}

pub fn conv2d_same<T: Real>(input: &Tensor4<T>, layer: &ConvLayer<T>) -> Result<Tensor4<T>> {
    check_input(input, layer)?;
    let [n, c, h, w] = input.shape();
    let hw = h * w;
    let mut out = Tensor4::zeros([n, layer.out_ch, h, w]);
    let mut col = vec![T::zero(); c * TAPS * hw];
    let wmat = MatRef::row_major(&layer.weight, layer.out_ch, c * TAPS);
    for s in 0..n {
        im2col(input.sample(s), c, h, w, &mut col);
        let o = out.sample_mut(s);
        for (oc, &b) in layer.bias.iter().enumerate() {
            o[oc * hw..(oc + 1) * hw].iter_mut().for_each(|v| *v = b);
        }
        gemm(wmat, MatRef::row_major(&col, c * TAPS, hw), T::one(), o);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor4<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Real>(
    grad_out: &Tensor4<T>,
    input: &Tensor4<T>,
    layer: &ConvLayer<T>,
) -> Result<ConvGrads<T>> {
    check_input(input, layer)?;
    let [n, c, h, w] = input.shape();
    grad_out.expect_shape([n, layer.out_ch, h, w], "conv backward upstream gradient")?;
    let hw = h * w;
    let mut grad_input = Tensor4::zeros(input.shape());
    let mut grad_weight = vec![T::zero(); layer.weight.len()];
    let mut grad_bias = vec![T::zero(); layer.out_ch];
    let mut col = vec![T::zero(); c * TAPS * hw];
    let mut grad_col = vec![T::zero(); c * TAPS * hw];
    let wmat = MatRef::row_major(&layer.weight, layer.out_ch, c * TAPS);
    for s in 0..n {
        let g = grad_out.sample(s);
        for (oc, gb) in grad_bias.iter_mut().enumerate() {
            *gb += g[oc * hw..(oc + 1) * hw].iter().copied().sum::<T>();
        }
        let gmat = MatRef::row_major(g, layer.out_ch, hw);
        im2col(input.sample(s), c, h, w, &mut col);
        gemm(
            gmat,
            MatRef::row_major(&col, c * TAPS, hw).t(),
            T::one(),
            &mut grad_weight,
        );
        gemm(wmat.t(), gmat, T::zero(), &mut grad_col);
        col2im(&grad_col, c, h, w, grad_input.sample_mut(s));
    }
    Ok(ConvGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_rng;
    use rand::Rng;

    fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor4<f64> {
        let mut rng = seeded_rng(seed);
        let n = shape.iter().product();
        Tensor4::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_layer(in_ch: usize, out_ch: usize, seed: u64) -> ConvLayer<f64> {
        let mut rng = seeded_rng(seed);
        let mut l = ConvLayer::init(in_ch, out_ch, &mut rng);
        l.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        l
    }

    /// Direct six-loop zero-padded convolution.
    fn naive(x: &Tensor4<f64>, l: &ConvLayer<f64>) -> Tensor4<f64> {
        let [n, c, h, w] = x.shape();
        let mut out = Tensor4::zeros([n, l.out_ch, h, w]);
        for s in 0..n {
            for o in 0..l.out_ch {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = l.bias[o];
                        for i in 0..c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let sy = y as i64 + ky as i64 - 1;
                                    let sx = xx as i64 + kx as i64 - 1;
                                    if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                                        acc += l.weight[l.w_index(o, i, ky, kx)] * x.at(s, i, sy as usize, sx as usize);
                                    }
                                }
                            }
                        }
                        let off = out.offset(s, o, y, xx);
                        out.data_mut()[off] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn zero_kernel_gives_bias() {
        let mut l = ConvLayer::<f64>::zeros(2, 3);
        l.bias = vec![1.5, -2.0, 0.25];
        let y = conv2d_same(&random_tensor([2, 2, 4, 5], 1), &l).unwrap();
        for s in 0..2 {
            for o in 0..3 {
                for p in 0..20 {
                    assert_eq!(y.sample(s)[o * 20 + p], l.bias[o]);
                }
            }
        }
    }

    #[test]
    fn identity_kernel_copies_input() {
        let mut l = ConvLayer::<f64>::zeros(1, 1);
        l.weight[4] = 1.0;
        let x = random_tensor([3, 1, 5, 4], 2);
        assert_eq!(conv2d_same(&x, &l).unwrap(), x);
    }

    #[test]
    fn matches_naive_convolution() {
        for (shape, out_ch, seed) in [
            ([1, 2, 4, 4], 3, 3u64),
            ([2, 3, 5, 7], 2, 4),
            ([1, 1, 1, 1], 2, 5),
            ([2, 4, 1, 6], 3, 6),
        ] {
            let x = random_tensor(shape, seed);
            let l = random_layer(shape[1], out_ch, seed + 100);
            let fast = conv2d_same(&x, &l).unwrap();
            let slow = naive(&x, &l);
            assert_eq!(fast.shape(), [shape[0], out_ch, shape[2], shape[3]]);
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let l = ConvLayer::<f64>::zeros(3, 2);
        assert!(conv2d_same(&random_tensor([1, 2, 3, 3], 1), &l).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let x = random_tensor([2, 2, 3, 3], 7);
        let l = random_layer(2, 3, 8);
        let g = conv2d_backward(&Tensor4::zeros([2, 3, 3, 3]), &x, &l).unwrap();
        assert!(g.input.data().iter().chain(&g.weight).chain(&g.bias).all(|&v| v == 0.0));
    }

    #[test]
    fn bias_gradient_is_channel_sum() {
        let x = random_tensor([2, 2, 3, 4], 9);
        let l = random_layer(2, 3, 10);
        let up = random_tensor([2, 3, 3, 4], 11);
        let g = conv2d_backward(&up, &x, &l).unwrap();
        for o in 0..3 {
            let mut s = 0.0;
            for n in 0..2 {
                s += up.sample(n)[o * 12..(o + 1) * 12].iter().sum::<f64>();
            }
            assert!((g.bias[o] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let x = random_tensor([2, 2, 4, 3], 12);
        let l = random_layer(2, 3, 13);
        let up = random_tensor([2, 3, 4, 3], 14);
        // loss = <up, conv(x)>
        let loss = |x: &Tensor4<f64>, l: &ConvLayer<f64>| -> f64 {
            conv2d_same(x, l)
                .unwrap()
                .data()
                .iter()
                .zip(up.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let g = conv2d_backward(&up, &x, &l).unwrap();
        let h = 1e-5;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        for k in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[k] += h;
            let mut xm = x.clone();
            xm.data_mut()[k] -= h;
            let num = (loss(&xp, &l) - loss(&xm, &l)) / (2.0 * h);
            assert!(rel(g.input.data()[k], num) <= 1e-6, "input {k}");
        }
        for k in 0..l.weight.len() {
            let mut lp = l.clone();
            lp.weight[k] += h;
            let mut lm = l.clone();
            lm.weight[k] -= h;
            let num = (loss(&x, &lp) - loss(&x, &lm)) / (2.0 * h);
            assert!(rel(g.weight[k], num) <= 1e-6, "weight {k}");
        }
    }
}
