use super::params::{join, Module, Param};
use super::tensor::sgemm;
use super::{Activation, FeatureMap, NetError};

/// Upper bound on im2col scratch, in floats.
const COL_BUDGET: usize = 1 << 22;

/// 2D cross-correlation with zero padding `k / 2`, bias, then activation.
#[derive(Debug, Clone)]
pub struct Conv {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub act: Activation,
    /// `[c_out, c_in, k, k]`
    pub weight: Param,
    pub bias: Param,
}

impl Conv {
    pub fn new(c_in: usize, c_out: usize, k: usize, stride: usize, act: Activation) -> Self {
        Conv {
            c_in,
            c_out,
            k,
            stride,
            act,
            weight: Param::zeros(&[c_out, c_in, k, k]),
            bias: Param::zeros(&[c_out]),
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.k / 2;
        ((h + 2 * p - self.k) / self.stride + 1, (w + 2 * p - self.k) / self.stride + 1)
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap, NetError> {
        self.forward_with_budget(x, COL_BUDGET)
    }

    fn forward_with_budget(&self, x: &FeatureMap, budget: usize) -> Result<FeatureMap, NetError> {
        if x.c != self.c_in {
            return Err(NetError::ShapeMismatch(format!("conv expects {} channels, got {}", self.c_in, x.c)));
        }
        let (oh, ow) = self.output_size(x.h, x.w);
        let n = oh * ow;
        let kk = self.c_in * self.k * self.k;
        let mut out = FeatureMap::zeros(self.c_out, oh, ow, x.stride * self.stride);
        for (co, b) in self.bias.data.iter().enumerate() {
            out.data[co * n..(co + 1) * n].fill(*b);
        }

        if self.k == 1 && self.stride == 1 {
            gemm_acc(&self.weight.data, &x.data, &mut out.data, self.c_out, kk, n, n, n);
        } else {
            let rows_per_chunk = (budget / (kk * ow).max(1)).clamp(1, oh);
            let mut col = Vec::new();
            let mut y0 = 0;
            while y0 < oh {
                let y1 = (y0 + rows_per_chunk).min(oh);
                let cols = (y1 - y0) * ow;
                col.clear();
                col.resize(kk * cols, 0.0);
                self.im2col(x, y0, y1, ow, &mut col);
                gemm_acc(&self.weight.data, &col, &mut out.data[y0 * ow..], self.c_out, kk, cols, cols, n);
                y0 = y1;
            }
        }

        if self.act != Activation::Identity {
            out.data.iter_mut().for_each(|v| *v = self.act.apply(*v));
        }
        Ok(out)
    }

    /// Fills `col` (`[c_in*k*k, (y1-y0)*ow]`) for output rows `y0..y1`.
    fn im2col(&self, x: &FeatureMap, y0: usize, y1: usize, ow: usize, col: &mut [f32]) {
        let p = self.k as isize / 2;
        let cols = (y1 - y0) * ow;
        let (h, w) = (x.h as isize, x.w as isize);
        for ci in 0..self.c_in {
            let plane = x.channel(ci);
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for oy in y0..y1 {
                        let iy = (oy * self.stride) as isize + ky as isize - p;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let src = &plane[iy as usize * x.w..(iy as usize + 1) * x.w];
                        let base = (oy - y0) * ow;
                        for ox in 0..ow {
                            let ix = (ox * self.stride) as isize + kx as isize - p;
                            if ix >= 0 && ix < w {
                                dst[base + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c[m x n] += a[m x k] * b[k x n]`, with row strides `ldb` for `b` and
/// `ldc` for `c`.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize, ldb: usize, ldc: usize) {
    sgemm((m, k, n), a, (k, 1), b, (ldb, 1), 1.0, c, (ldc, 1));
}

impl Module for Conv {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Direct six-loop convolution without activation.
pub fn conv2d_reference(x: &FeatureMap, conv: &Conv) -> FeatureMap {
    let (oh, ow) = conv.output_size(x.h, x.w);
    let p = conv.k as isize / 2;
    let mut out = FeatureMap::zeros(conv.c_out, oh, ow, x.stride * conv.stride);
    for co in 0..conv.c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = conv.bias.data[co] as f64;
                for ci in 0..conv.c_in {
                    for ky in 0..conv.k {
                        for kx in 0..conv.k {
                            let iy = (oy * conv.stride) as isize + ky as isize - p;
                            let ix = (ox * conv.stride) as isize + kx as isize - p;
                            if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                continue;
                            }
                            let wgt = conv.weight.data[((co * conv.c_in + ci) * conv.k + ky) * conv.k + kx];
                            acc += wgt as f64 * x.at(ci, iy as usize, ix as usize) as f64;
                        }
                    }
                }
                out.data[(co * oh + oy) * ow + ox] = acc as f32;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::params::init_parameters;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::from_vec(c, h, w, 1, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_1x1() {
        let mut conv = Conv::new(3, 3, 1, 1, Activation::Identity);
        for i in 0..3 {
            conv.weight.data[i * 3 + i] = 1.0;
        }
        let x = random_map(3, 5, 7, 1);
        assert_eq!(conv.forward(&x).unwrap(), x);
    }

    #[test]
    fn stride_two_shape() {
        let conv = Conv::new(2, 4, 3, 2, Activation::Silu);
        let y = conv.forward(&random_map(2, 8, 8, 2)).unwrap();
        assert_eq!(y.shape(), (4, 4, 4));
        assert_eq!(y.stride, 2);
        let y = conv.forward(&random_map(2, 7, 9, 2)).unwrap();
        assert_eq!((y.h, y.w), (4, 5));
    }

    #[test]
    fn matches_six_loop_reference() {
        for (i, &(ci, co, k, s, h, w)) in
            [(3, 5, 3, 1, 9, 11), (4, 6, 3, 2, 10, 7), (2, 3, 1, 1, 6, 6), (5, 2, 1, 2, 7, 8), (3, 4, 5, 1, 6, 9)]
                .iter()
                .enumerate()
        {
            let mut conv = Conv::new(ci, co, k, s, Activation::Identity);
            init_parameters(&mut conv, i as u64, 1.0);
            conv.bias.data.iter_mut().enumerate().for_each(|(j, b)| *b = 0.1 * j as f32);
            let x = random_map(ci, h, w, 100 + i as u64);
            let fast = conv.forward(&x).unwrap();
            let slow = conv2d_reference(&x, &conv);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-5, "case {i}: {}", fast.max_abs_diff(&slow));
        }
    }

    #[test]
    fn chunked_im2col_matches_reference() {
        let mut conv = Conv::new(16, 8, 3, 1, Activation::Identity);
        init_parameters(&mut conv, 5, 1.0);
        let x = random_map(16, 13, 11, 9);
        let fast = conv.forward_with_budget(&x, 16 * 9 * 11 * 3).unwrap();
        assert!(fast.max_abs_diff(&conv2d_reference(&x, &conv)) < 1e-4);
    }

    #[test]
    fn rejects_wrong_channels() {
        let conv = Conv::new(3, 3, 3, 1, Activation::Silu);
        assert!(matches!(conv.forward(&random_map(2, 4, 4, 0)), Err(NetError::ShapeMismatch(_))));
    }
}
