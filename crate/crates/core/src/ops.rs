//! Dense CPU kernels with hand-written backward passes.
//!
//! Feature maps are `[channels, height, width]` arrays in standard layout.
//! Convolutions lower to a single GEMM through im2col.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView3, ArrayView4, Axis};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Gradient of the loss w.r.t. softmax inputs given the softmax output and
/// the gradient w.r.t. that output.
pub fn softmax_backward(probs: &[f64], d_probs: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(d_probs).map(|(p, d)| p * d).sum();
    probs
        .iter()
        .zip(d_probs)
        .map(|(p, d)| p * (d - dot))
        .collect()
}

/// Static shape information for one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(in_channels: usize, in_h: usize, in_w: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        let out_h = (in_h + 2 * pad - kernel) / stride + 1;
        let out_w = (in_w + 2 * pad - kernel) / stride + 1;
        Self {
            in_channels,
            in_h,
            in_w,
            kernel,
            stride,
            pad,
            out_h,
            out_w,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: ArrayView3<f64>, g: &ConvGeometry) -> Array2<f64> {
    let rows = g.in_channels * g.kernel * g.kernel;
    let cols = g.out_h * g.out_w;
    if g.is_pointwise() {
        return x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((rows, cols))
            .expect("pointwise reshape");
    }
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let mut col = vec![0.0; rows * cols];
    let plane = g.in_h * g.in_w;
    for c in 0..g.in_channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let base = ((c * g.kernel + ki) * g.kernel + kj) * cols;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src_row = c * plane + iy as usize * g.in_w;
                    let dst_row = base + oy * g.out_w;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            col[dst_row + ox] = xs[src_row + ix as usize];
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((rows, cols), col).expect("im2col shape")
}

fn col2im(col: ArrayView2<f64>, g: &ConvGeometry) -> Array3<f64> {
    if g.is_pointwise() {
        return col
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((g.in_channels, g.in_h, g.in_w))
            .expect("pointwise reshape");
    }
    let cols = g.out_h * g.out_w;
    let cs = col.as_standard_layout();
    let cs = cs.as_slice().expect("standard layout");
    let plane = g.in_h * g.in_w;
    let mut out = vec![0.0; g.in_channels * plane];
    for c in 0..g.in_channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let base = ((c * g.kernel + ki) * g.kernel + kj) * cols;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst_row = c * plane + iy as usize * g.in_w;
                    let src_row = base + oy * g.out_w;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            out[dst_row + ix as usize] += cs[src_row + ox];
                        }
                    }
                }
            }
        }
    }
    Array3::from_shape_vec((g.in_channels, g.in_h, g.in_w), out).expect("col2im shape")
}

/// Saved state needed by [`conv2d_backward`].
#[derive(Clone, Debug)]
pub struct ConvCache {
    pub geometry: ConvGeometry,
    col: Array2<f64>,
}

fn weight_matrix(weight: ArrayView4<f64>) -> ArrayView2<f64> {
    let (oc, ic, kh, kw) = weight.dim();
    weight
        .into_shape_with_order((oc, ic * kh * kw))
        .expect("weight must be in standard layout")
}

/// 2-D convolution of one `[c, h, w]` map with a `[out, in, k, k]` kernel.
pub fn conv2d(
    x: ArrayView3<f64>,
    weight: ArrayView4<f64>,
    bias: Option<ArrayView1<f64>>,
    stride: usize,
    pad: usize,
) -> (Array3<f64>, ConvCache) {
    let (c, h, w) = x.dim();
    let (oc, ic, k, k2) = weight.dim();
    assert_eq!(ic, c, "conv2d input channels {c} != kernel channels {ic}");
    assert_eq!(k, k2, "only square kernels are supported");
    let geometry = ConvGeometry::new(c, h, w, k, stride, pad);
    let col = im2col(x, &geometry);
    let mut y = weight_matrix(weight).dot(&col);
    if let Some(b) = bias {
        y += &b.insert_axis(Axis(1));
    }
    let y = y
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((oc, geometry.out_h, geometry.out_w))
        .expect("conv output shape");
    (y, ConvCache { geometry, col })
}

/// Returns `(dx, dweight, dbias)`.
pub fn conv2d_backward(
    dy: ArrayView3<f64>,
    cache: &ConvCache,
    weight: ArrayView4<f64>,
) -> (Array3<f64>, Array4<f64>, Array1<f64>) {
    let (oc, ic, k, _) = weight.dim();
    let g = &cache.geometry;
    let dy = dy.as_standard_layout();
    let dy2 = dy
        .view()
        .into_shape_with_order((oc, g.out_h * g.out_w))
        .expect("dy shape");
    let dw = dy2
        .dot(&cache.col.t())
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((oc, ic, k, k))
        .expect("dw shape");
    let db = dy2.sum_axis(Axis(1));
    let dcol = weight_matrix(weight).t().dot(&dy2);
    let dx = col2im(dcol.view(), g);
    (dx, dw, db)
}

/// 2x2 average pooling with stride 2 (odd trailing rows/cols are dropped).
pub fn avg_pool2(x: ArrayView3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    Array3::from_shape_fn((c, oh, ow), |(ch, i, j)| {
        0.25 * (x[[ch, 2 * i, 2 * j]]
            + x[[ch, 2 * i + 1, 2 * j]]
            + x[[ch, 2 * i, 2 * j + 1]]
            + x[[ch, 2 * i + 1, 2 * j + 1]])
    })
}

pub fn avg_pool2_backward(dy: ArrayView3<f64>, in_h: usize, in_w: usize) -> Array3<f64> {
    let (c, oh, ow) = dy.dim();
    let mut dx = Array3::zeros((c, in_h, in_w));
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let g = 0.25 * dy[[ch, i, j]];
                dx[[ch, 2 * i, 2 * j]] += g;
                dx[[ch, 2 * i + 1, 2 * j]] += g;
                dx[[ch, 2 * i, 2 * j + 1]] += g;
                dx[[ch, 2 * i + 1, 2 * j + 1]] += g;
            }
        }
    }
    dx
}

/// Max pooling (kernel `k`, stride `s`, zero-free padding `p`) returning the
/// flat argmax index of every output cell.
pub fn max_pool(x: ArrayView3<f64>, k: usize, s: usize, p: usize) -> (Array3<f64>, Vec<usize>) {
    let (c, h, w) = x.dim();
    let oh = (h + 2 * p - k) / s + 1;
    let ow = (w + 2 * p - k) / s + 1;
    let mut y = Array3::zeros((c, oh, ow));
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for di in 0..k {
                    let iy = (i * s + di) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for dj in 0..k {
                        let ix = (j * s + dj) as isize - p as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let v = x[[ch, iy as usize, ix as usize]];
                        if v > best {
                            best = v;
                            best_idx = (ch * h + iy as usize) * w + ix as usize;
                        }
                    }
                }
                y[[ch, i, j]] = best;
                arg.push(best_idx);
            }
        }
    }
    (y, arg)
}

pub fn max_pool_backward(dy: ArrayView3<f64>, argmax: &[usize], in_shape: (usize, usize, usize)) -> Array3<f64> {
    let mut dx = Array3::<f64>::zeros(in_shape);
    let flat = dx.as_slice_mut().expect("fresh array is contiguous");
    for (g, &idx) in dy.iter().zip(argmax) {
        flat[idx] += g;
    }
    dx
}

pub fn global_avg_pool(x: ArrayView3<f64>) -> Array1<f64> {
    let (c, h, w) = x.dim();
    let area = (h * w) as f64;
    Array1::from_shape_fn(c, |ch| x.index_axis(Axis(0), ch).sum() / area)
}

pub fn global_avg_pool_backward(dy: ArrayView1<f64>, h: usize, w: usize) -> Array3<f64> {
    let area = (h * w) as f64;
    Array3::from_shape_fn((dy.len(), h, w), |(ch, _, _)| dy[ch] / area)
}

#[cfg(test)]
mod tests {
    use ndarray::{array, Array};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Direct nested-loop convolution used as an oracle for the im2col path.
    fn naive_conv(x: &Array3<f64>, w: &Array4<f64>, b: &Array1<f64>, s: usize, p: usize) -> Array3<f64> {
        let (c, h, wd) = x.dim();
        let (oc, _, k, _) = w.dim();
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (wd + 2 * p - k) / s + 1;
        Array3::from_shape_fn((oc, oh, ow), |(o, i, j)| {
            let mut acc = b[o];
            for ci in 0..c {
                for di in 0..k {
                    for dj in 0..k {
                        let y = (i * s + di) as isize - p as isize;
                        let xx = (j * s + dj) as isize - p as isize;
                        if y >= 0 && y < h as isize && xx >= 0 && xx < wd as isize {
                            acc += w[[o, ci, di, dj]] * x[[ci, y as usize, xx as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> ndarray::ArrayD<f64> {
        Array::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0), (7, 2, 3)] {
            let x = random(&[3, 9, 9], &mut rng).into_dimensionality().unwrap();
            let w = random(&[4, 3, k, k], &mut rng).into_dimensionality().unwrap();
            let b = random(&[4], &mut rng).into_dimensionality().unwrap();
            let (y, _) = conv2d(x.view(), w.view(), Some(b.view()), s, p);
            let expected = naive_conv(&x, &w, &b, s, p);
            assert_eq!(y.dim(), expected.dim());
            for (a, e) in y.iter().zip(expected.iter()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Array3<f64> = random(&[2, 5, 5], &mut rng).into_dimensionality().unwrap();
        let w: Array4<f64> = random(&[3, 2, 3, 3], &mut rng).into_dimensionality().unwrap();
        let probe: Array3<f64> = random(&[3, 3, 3], &mut rng).into_dimensionality().unwrap();
        let f = |x: &Array3<f64>, w: &Array4<f64>| {
            let (y, _) = conv2d(x.view(), w.view(), None, 2, 1);
            (&y * &probe).sum()
        };
        let (_, cache) = conv2d(x.view(), w.view(), None, 2, 1);
        let (dx, dw, _) = conv2d_backward(probe.view(), &cache, w.view());
        let eps = 1e-6;
        for idx in [(0, 0, 0), (1, 2, 3), (0, 4, 4)] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let num = (f(&xp, &w) - f(&xm, &w)) / (2.0 * eps);
            assert!((num - dx[idx]).abs() < 1e-8);
        }
        for idx in [(0, 0, 0, 0), (2, 1, 2, 1)] {
            let mut wp = w.clone();
            wp[idx] += eps;
            let mut wm = w.clone();
            wm[idx] -= eps;
            let num = (f(&x, &wp) - f(&x, &wm)) / (2.0 * eps);
            assert!((num - dw[idx]).abs() < 1e-8);
        }
    }

    #[test]
    fn pooling_shapes_and_values() {
        let x = Array3::from_shape_vec((1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(avg_pool2(x.view())[[0, 0, 0]], 2.5);
        assert_eq!(global_avg_pool(x.view()), array![2.5]);
        let (m, arg) = max_pool(x.view(), 3, 2, 1);
        assert_eq!(m[[0, 0, 0]], 4.0);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn softmax_is_normalized_and_stable() {
        let p = softmax(&[1000.0, 1000.0, 0.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((p[0] - 0.5).abs() < 1e-12);
        assert_eq!(softplus(-800.0), 0.0);
        assert_eq!(softplus(800.0), 800.0);
    }
}
