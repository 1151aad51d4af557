use super::NetError;

/// Channel-first `C x H x W` feature map of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    /// Downsampling factor relative to the network input.
    pub stride: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(c: usize, h: usize, w: usize, stride: usize) -> Self {
        FeatureMap { c, h, w, stride, data: vec![0.0; c * h * w] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, stride: usize, data: Vec<f32>) -> Result<Self, NetError> {
        if data.len() != c * h * w {
            return Err(NetError::ShapeMismatch(format!("{} values for a {c}x{h}x{w} map", data.len())));
        }
        Ok(FeatureMap { c, h, w, stride, data })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    /// Channels `[from, to)`.
    pub fn slice_channels(&self, from: usize, to: usize) -> FeatureMap {
        let p = self.plane();
        FeatureMap { c: to - from, h: self.h, w: self.w, stride: self.stride, data: self.data[from * p..to * p].to_vec() }
    }

    /// Splits into `parts` equal channel groups.
    pub fn split(&self, parts: usize) -> Result<Vec<FeatureMap>, NetError> {
        if parts == 0 || self.c % parts != 0 {
            return Err(NetError::ShapeMismatch(format!("cannot split {} channels into {parts}", self.c)));
        }
        let n = self.c / parts;
        Ok((0..parts).map(|i| self.slice_channels(i * n, (i + 1) * n)).collect())
    }

    pub fn max_abs_diff(&self, other: &FeatureMap) -> f32 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
    }

    pub fn add(&self, other: &FeatureMap) -> Result<FeatureMap, NetError> {
        if self.shape() != other.shape() {
            return Err(NetError::ShapeMismatch(format!("add {:?} + {:?}", self.shape(), other.shape())));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(FeatureMap { data, ..*self })
    }

    /// 2x nearest-neighbour upsampling.
    pub fn upsample2(&self) -> FeatureMap {
        let (h2, w2) = (self.h * 2, self.w * 2);
        let mut out = FeatureMap::zeros(self.c, h2, w2, (self.stride / 2).max(1));
        for c in 0..self.c {
            for y in 0..h2 {
                for x in 0..w2 {
                    out.data[(c * h2 + y) * w2 + x] = self.at(c, y / 2, x / 2);
                }
            }
        }
        out
    }

    /// Zero-pads bottom/right so both spatial dims are multiples of `m`.
    pub fn pad_to_multiple(&self, m: usize) -> FeatureMap {
        let h = self.h.div_ceil(m) * m;
        let w = self.w.div_ceil(m) * m;
        if (h, w) == (self.h, self.w) {
            return self.clone();
        }
        let mut out = FeatureMap::zeros(self.c, h, w, self.stride);
        for c in 0..self.c {
            for y in 0..self.h {
                let src = (c * self.h + y) * self.w;
                let dst = (c * h + y) * w;
                out.data[dst..dst + self.w].copy_from_slice(&self.data[src..src + self.w]);
            }
        }
        out
    }
}

/// Concatenates along channels; all inputs must share spatial dims.
pub fn concat(maps: &[&FeatureMap]) -> Result<FeatureMap, NetError> {
    let first = maps.first().ok_or_else(|| NetError::ShapeMismatch("concat of nothing".into()))?;
    let (h, w) = (first.h, first.w);
    if maps.iter().any(|m| m.h != h || m.w != w) {
        let shapes: Vec<_> = maps.iter().map(|m| m.shape()).collect();
        return Err(NetError::ShapeMismatch(format!("concat spatial mismatch {shapes:?}")));
    }
    let c = maps.iter().map(|m| m.c).sum();
    let mut data = Vec::with_capacity(c * h * w);
    for m in maps {
        data.extend_from_slice(&m.data);
    }
    Ok(FeatureMap { c, h, w, stride: first.stride, data })
}

#[inline]
pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Strided `c = a * b + beta * c` for `a: m x k`, `b: k x n`. Strides are
/// `(row, column)` element steps; every reachable index is bounds-checked.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sgemm(
    (m, k, n): (usize, usize, usize),
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * rsc + j * csc] *= beta;
            }
        }
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len());
    assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// In-place numerically stable softmax.
pub fn softmax_in_place(v: &mut [f32]) {
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Softmax in f64, returned as a new vector.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_and_concat_are_inverse() {
        let m = FeatureMap::from_vec(4, 2, 3, 1, (0..24).map(|v| v as f32).collect()).unwrap();
        let parts = m.split(2).unwrap();
        assert_eq!(parts[1].at(0, 0, 0), 12.0);
        let refs: Vec<&FeatureMap> = parts.iter().collect();
        assert_eq!(concat(&refs).unwrap(), m);
        assert!(m.split(3).is_err());
    }

    #[test]
    fn upsample_and_pad() {
        let m = FeatureMap::from_vec(1, 2, 2, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let u = m.upsample2();
        assert_eq!((u.h, u.w, u.stride), (4, 4, 2));
        assert_eq!(u.channel(0), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]);
        let p = FeatureMap::from_vec(1, 2, 3, 1, vec![1.0; 6]).unwrap().pad_to_multiple(4);
        assert_eq!((p.h, p.w), (4, 4));
        assert_eq!(p.data.iter().sum::<f32>(), 6.0);
        assert_eq!(p.at(0, 1, 2), 1.0);
        assert_eq!(p.at(0, 1, 3), 0.0);
    }

    #[test]
    fn softmax_normalizes() {
        let mut v = vec![1.0f32, 2.0, 3.0, 1000.0];
        softmax_in_place(&mut v);
        assert!((v.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        let s = softmax(&[0.0, 0.0]);
        assert_eq!(s, vec![0.5, 0.5]);
        assert_eq!(silu(0.0), 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn strided_gemm_transposes() {
        // a^T * a for a = [[1, 2], [3, 4]] stored row-major
        let a = [1.0f32, 2.0, 3.0, 4.0];
        let mut c = [0.0f32; 4];
        sgemm((2, 2, 2), &a, (1, 2), &a, (2, 1), 0.0, &mut c, (2, 1));
        assert_eq!(c, [10.0, 14.0, 14.0, 20.0]);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = FeatureMap::zeros(1, 2, 2, 1);
        let b = FeatureMap::zeros(1, 2, 3, 1);
        assert!(concat(&[&a, &b]).is_err());
        assert!(a.add(&b).is_err());
    }
}
