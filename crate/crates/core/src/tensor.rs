//! Dense channel-major `[C, H, W]` arrays of `f64`.
//!
//! Everything in the network is expressed in this one layout: images are
//! `[3, H, W]`, feature maps `[D, h, w]`, similarity maps `[1, h, w]`,
//! prototypes `[D, 1, 1]` and scalars `[1, 1, 1]`.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn full(c: usize, h: usize, w: usize, value: f64) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![value; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            c * h * w,
            "tensor data length does not match shape [{c}, {h}, {w}]"
        );
        Self { c, h, w, data }
    }

    /// A `[len, 1, 1]` vector.
    pub fn vector(data: Vec<f64>) -> Self {
        let len = data.len();
        Self::from_vec(len, 1, 1, data)
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(1, 1, 1, vec![value])
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.c
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.h
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.w
    }

    /// Number of spatial positions `H * W`.
    #[inline]
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) {
        self.data[(c * self.h + y) * self.w + x] = value;
    }

    /// Slice of one channel plane.
    #[inline]
    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    #[inline]
    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    /// The `D` values at pixel index `i` (row-major `y * w + x`).
    pub fn pixel(&self, i: usize) -> Vec<f64> {
        let p = self.plane();
        (0..self.c).map(|c| self.data[c * p + i]).collect()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &Tensor) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Reinterpret with a different shape of equal size.
    pub fn reshape(mut self, c: usize, h: usize, w: usize) -> Tensor {
        assert_eq!(c * h * w, self.data.len());
        self.c = c;
        self.h = h;
        self.w = w;
        self
    }
}

/// Per-pixel softmax over channels.
pub fn softmax_channels(logits: &Tensor) -> Tensor {
    let (c, h, w) = logits.shape();
    let p = h * w;
    let mut out = Tensor::zeros(c, h, w);
    let src = logits.data();
    let dst = out.data_mut();
    for i in 0..p {
        let mut m = f64::NEG_INFINITY;
        for k in 0..c {
            m = m.max(src[k * p + i]);
        }
        let mut z = 0.0;
        for k in 0..c {
            let e = (src[k * p + i] - m).exp();
            dst[k * p + i] = e;
            z += e;
        }
        for k in 0..c {
            dst[k * p + i] /= z;
        }
    }
    out
}

/// Bilinear resize of every channel (align-corners = false, half-pixel centres).
pub fn resize_bilinear(t: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (c, h, w) = t.shape();
    let mut out = Tensor::zeros(c, out_h, out_w);
    if h == out_h && w == out_w {
        return t.clone();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let coords = |o: usize, scale: f64, n: usize| {
        let f = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (f.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, f - i0 as f64)
    };
    let xs: Vec<_> = (0..out_w).map(|x| coords(x, sx, w)).collect();
    for y in 0..out_h {
        let (y0, y1, fy) = coords(y, sy, h);
        for ch in 0..c {
            for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = t.at(ch, y0, x0) * (1.0 - fx) + t.at(ch, y0, x1) * fx;
                let bot = t.at(ch, y1, x0) * (1.0 - fx) + t.at(ch, y1, x1) * fx;
                out.set(ch, y, x, top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

/// Per-pixel argmax over channels; ties go to the lowest channel.
pub fn argmax_channels(t: &Tensor) -> Vec<usize> {
    let (c, h, w) = t.shape();
    let p = h * w;
    let d = t.data();
    (0..p)
        .map(|i| {
            let mut best = 0;
            for k in 1..c {
                if d[k * p + i] > d[best * p + i] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tensor::from_vec(3, 1, 2, vec![1.0, -2.0, 0.5, 3.0, 800.0, 0.0]);
        let s = softmax_channels(&t);
        for i in 0..2 {
            let sum: f64 = (0..3).map(|k| s.data()[k * 2 + i]).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let t = Tensor::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(resize_bilinear(&t, 2, 2), t);
        let c = Tensor::full(2, 3, 3, 0.25);
        let up = resize_bilinear(&c, 12, 12);
        assert!(up.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        let t = Tensor::from_vec(2, 1, 2, vec![0.5, 0.1, 0.5, 0.9]);
        assert_eq!(argmax_channels(&t), vec![0, 1]);
    }
}
