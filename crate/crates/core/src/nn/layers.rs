//! Forward and backward kernels for the layer types used by the backbone and
//! the flow. Every batch is a row-major matrix with one sample per row.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::par;

/// Uniform fan-in initialisation, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn uniform_fan_in<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

pub fn uniform_fan_in_vec<R: Rng + ?Sized>(rng: &mut R, len: usize, fan_in: usize) -> Array1<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array1::from_shape_fn(len, |_| rng.random_range(-bound..bound))
}

/// `y = x Wᵀ + b`.
pub fn linear_forward(x: ArrayView2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let mut y = x.dot(&w.t());
    y += &b;
    y
}

pub struct LinearGrads {
    pub dw: Array2<f64>,
    pub db: Array1<f64>,
    pub dx: Array2<f64>,
}

pub fn linear_backward(x: ArrayView2<f64>, w: ArrayView2<f64>, dy: ArrayView2<f64>) -> LinearGrads {
    LinearGrads {
        dw: dy.t().dot(&x),
        db: dy.sum_axis(Axis(0)),
        dx: dy.dot(&w),
    }
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient through a ReLU given its pre-activation.
pub fn relu_backward(pre: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(pre).for_each(|d, &p| {
        if p <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

/// Valid (no padding), stride-1 convolution over `channels × height × width` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvShape {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvShape {
    pub fn out_height(&self) -> usize {
        self.height + 1 - self.kernel
    }
    pub fn out_width(&self) -> usize {
        self.width + 1 - self.kernel
    }
    pub fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
    pub fn in_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }
    pub fn out_len(&self) -> usize {
        self.out_channels * self.positions()
    }
}

fn im2col(shape: &ConvShape, x: &[f64]) -> Array2<f64> {
    let (k, oh, ow) = (shape.kernel, shape.out_height(), shape.out_width());
    let mut cols = Array2::zeros((shape.patch_len(), oh * ow));
    for c in 0..shape.in_channels {
        let plane = &x[c * shape.height * shape.width..(c + 1) * shape.height * shape.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let mut dst = cols.row_mut(row);
                let dst = dst.as_slice_mut().expect("contiguous row");
                for oy in 0..oh {
                    let src = &plane[(oy + ki) * shape.width + kj..][..ow];
                    dst[oy * ow..(oy + 1) * ow].copy_from_slice(src);
                }
            }
        }
    }
    cols
}

fn col2im(shape: &ConvShape, cols: &Array2<f64>, dx: &mut [f64]) {
    let (k, oh, ow) = (shape.kernel, shape.out_height(), shape.out_width());
    for c in 0..shape.in_channels {
        let plane = &mut dx[c * shape.height * shape.width..(c + 1) * shape.height * shape.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = cols.row(row);
                let src = src.as_slice().expect("contiguous row");
                for oy in 0..oh {
                    let dst = &mut plane[(oy + ki) * shape.width + kj..][..ow];
                    for (d, s) in dst.iter_mut().zip(&src[oy * ow..(oy + 1) * ow]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Per-sample im2col buffers kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ConvCache {
    pub out: Array2<f64>,
    cols: Vec<Array2<f64>>,
}

pub fn conv2d_forward(shape: &ConvShape, x: ArrayView2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> ConvCache {
    let n = x.nrows();
    let positions = shape.positions();
    let parts = par::map_chunks(n, par::CHUNK, |range| {
        let mut out = Array2::zeros((range.len(), shape.out_len()));
        let mut cols = Vec::with_capacity(range.len());
        for (row, i) in range.enumerate() {
            let sample = x.row(i);
            let c = match sample.as_slice() {
                Some(sl) => im2col(shape, sl),
                None => im2col(shape, &sample.to_vec()),
            };
            let y = w.dot(&c);
            let mut dst = out.row_mut(row);
            for o in 0..shape.out_channels {
                let bias = b[o];
                for p in 0..positions {
                    dst[o * positions + p] = y[[o, p]] + bias;
                }
            }
            cols.push(c);
        }
        (out, cols)
    });
    let mut out = Array2::zeros((n, shape.out_len()));
    let mut cols = Vec::with_capacity(n);
    let mut offset = 0;
    for (part, c) in parts {
        let rows = part.nrows();
        out.slice_mut(s![offset..offset + rows, ..]).assign(&part);
        cols.extend(c);
        offset += rows;
    }
    ConvCache { out, cols }
}

pub struct ConvGrads {
    pub dw: Array2<f64>,
    pub db: Array1<f64>,
    pub dx: Option<Array2<f64>>,
}

pub fn conv2d_backward(
    shape: &ConvShape,
    cache: &ConvCache,
    w: ArrayView2<f64>,
    dy: ArrayView2<f64>,
    need_dx: bool,
) -> ConvGrads {
    let n = dy.nrows();
    let positions = shape.positions();
    let parts = par::map_chunks(n, par::CHUNK, |range| {
        let mut dw = Array2::zeros((shape.out_channels, shape.patch_len()));
        let mut db = Array1::zeros(shape.out_channels);
        let mut dx = need_dx.then(|| Array2::zeros((range.len(), shape.in_len())));
        for (row, i) in range.enumerate() {
            let g = dy
                .row(i)
                .to_owned()
                .into_shape_with_order((shape.out_channels, positions))
                .expect("gradient row shape");
            dw += &g.dot(&cache.cols[i].t());
            db += &g.sum_axis(Axis(1));
            if let Some(dx) = dx.as_mut() {
                let dcols = w.t().dot(&g);
                let mut r = dx.row_mut(row);
                col2im(shape, &dcols, r.as_slice_mut().expect("contiguous row"));
            }
        }
        (dw, db, dx)
    });
    let mut dw = Array2::zeros((shape.out_channels, shape.patch_len()));
    let mut db = Array1::zeros(shape.out_channels);
    let mut dx = need_dx.then(|| Array2::zeros((n, shape.in_len())));
    let mut offset = 0;
    for (pdw, pdb, pdx) in parts {
        dw += &pdw;
        db += &pdb;
        if let (Some(dx), Some(pdx)) = (dx.as_mut(), pdx) {
            let rows = pdx.nrows();
            dx.slice_mut(s![offset..offset + rows, ..]).assign(&pdx);
            offset += rows;
        }
    }
    ConvGrads { dw, db, dx }
}

/// 2×2, stride-2 max pooling (odd trailing rows/columns are dropped).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl PoolShape {
    pub fn out_height(&self) -> usize {
        self.height / 2
    }
    pub fn out_width(&self) -> usize {
        self.width / 2
    }
    pub fn in_len(&self) -> usize {
        self.channels * self.height * self.width
    }
    pub fn out_len(&self) -> usize {
        self.channels * self.out_height() * self.out_width()
    }
}

#[derive(Clone, Debug)]
pub struct PoolCache {
    pub out: Array2<f64>,
    argmax: Vec<u32>,
}

pub fn maxpool2_forward(shape: &PoolShape, x: ArrayView2<f64>) -> PoolCache {
    let n = x.nrows();
    let (oh, ow) = (shape.out_height(), shape.out_width());
    let out_len = shape.out_len();
    let mut out = Array2::zeros((n, out_len));
    let mut argmax = vec![0u32; n * out_len];
    for (i, (mut dst, idx)) in out.rows_mut().into_iter().zip(argmax.chunks_mut(out_len)).enumerate() {
        let src = x.row(i);
        for c in 0..shape.channels {
            let base = c * shape.height * shape.width;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + (2 * oy) * shape.width + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let j = base + (2 * oy + dy) * shape.width + 2 * ox + dx;
                        if src[j] > src[best] {
                            best = j;
                        }
                    }
                    let o = (c * oh + oy) * ow + ox;
                    dst[o] = src[best];
                    idx[o] = best as u32;
                }
            }
        }
    }
    PoolCache { out, argmax }
}

pub fn maxpool2_backward(shape: &PoolShape, cache: &PoolCache, dy: ArrayView2<f64>) -> Array2<f64> {
    let n = dy.nrows();
    let out_len = shape.out_len();
    let mut dx = Array2::zeros((n, shape.in_len()));
    for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
        let idx = &cache.argmax[i * out_len..(i + 1) * out_len];
        for (o, &j) in idx.iter().enumerate() {
            row[j as usize] += dy[[i, o]];
        }
    }
    dx
}
