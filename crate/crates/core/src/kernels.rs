//! Numeric kernels shared by the autodiff tape: matrix products and
//! convolution lowering. Batch dimensions are split across the rayon pool
//! via [`crate::par`].

use crate::par;

/// `c = op(a) * op(b) + beta * c` for row-major operands.
///
/// `op(a)` is `m x k`, stored as `[m, k]` or, when `ta`, as `[k, m]`.
/// `op(b)` is `k x n`, stored as `[k, n]` or, when `tb`, as `[n, k]`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if ta { (1isize, m as isize) } else { (k as isize, 1isize) };
    let (rsb, csb) = if tb { (1isize, k as isize) } else { (n as isize, 1isize) };
    let rows_per_chunk = (m / 8).max(16).min(m);
    par::for_each_chunk_mut(c, rows_per_chunk * n, m * k * n, |ci, chunk| {
        let row0 = ci * rows_per_chunk;
        let rows = chunk.len() / n;
        // SAFETY: strides describe in-bounds views of `a`, `b`, and `chunk`
        // (rows row0..row0+rows of op(a)); asserted lengths above.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a.as_ptr().offset(row0 as isize * rsa),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                chunk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

/// Batched product over `g` independent matrices laid out contiguously.
#[allow(clippy::too_many_arguments)]
pub fn batched_gemm(g: usize, m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    assert_eq!(a.len(), g * m * k);
    assert_eq!(b.len(), g * k * n);
    assert_eq!(c.len(), g * m * n);
    if g == 0 || m * n == 0 {
        return;
    }
    par::for_each_chunk_mut(c, m * n, g * m * k * n, |i, chunk| {
        let (rsa, csa) = if ta { (1isize, m as isize) } else { (k as isize, 1isize) };
        let (rsb, csb) = if tb { (1isize, k as isize) } else { (n as isize, 1isize) };
        let ab = &a[i * m * k..(i + 1) * m * k];
        let bb = &b[i * k * n..(i + 1) * k * n];
        if k == 0 {
            chunk.iter_mut().for_each(|v| *v *= beta);
            return;
        }
        // SAFETY: per-batch slices have exactly the sizes the strides address.
        unsafe {
            matrixmultiply::dgemm(m, k, n, 1.0, ab.as_ptr(), rsa, csa, bb.as_ptr(), rsb, csb, beta, chunk.as_mut_ptr(), n as isize, 1);
        }
    });
}

/// Geometry of a square-kernel 2D convolution over NHWC images.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Lowers NHWC `x` to `[batch * oh * ow, k * k * c]` patch rows (order ky, kx, c).
pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    assert_eq!(x.len(), g.batch * g.image_len());
    let (oh, ow, pl) = (g.out_height(), g.out_width(), g.patch_len());
    let per_image = oh * ow * pl;
    let mut cols = vec![0.0; g.batch * per_image];
    par::for_each_chunk_mut(&mut cols, per_image, g.batch * per_image, |n, out| {
        let img = &x[n * g.image_len()..(n + 1) * g.image_len()];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &mut out[(oy * ow + ox) * pl..(oy * ow + ox + 1) * pl];
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let src = (iy as usize * g.width + ix as usize) * g.channels;
                        let dst = (ky * g.kernel + kx) * g.channels;
                        row[dst..dst + g.channels].copy_from_slice(&img[src..src + g.channels]);
                    }
                }
            }
        }
    });
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch rows back into an NHWC image batch.
pub fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow, pl) = (g.out_height(), g.out_width(), g.patch_len());
    assert_eq!(cols.len(), g.batch * oh * ow * pl);
    let mut x = vec![0.0; g.batch * g.image_len()];
    par::for_each_chunk_mut(&mut x, g.image_len(), g.batch * oh * ow * pl, |n, img| {
        let src_img = &cols[n * oh * ow * pl..(n + 1) * oh * ow * pl];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &src_img[(oy * ow + ox) * pl..(oy * ow + ox + 1) * pl];
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let dst = (iy as usize * g.width + ix as usize) * g.channels;
                        let src = (ky * g.kernel + kx) * g.channels;
                        for c in 0..g.channels {
                            img[dst + c] += row[src + c];
                        }
                    }
                }
            }
        }
    });
    x
}

/// Row-wise numerically stable log-softmax.
pub fn log_softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    par::for_each_chunk_mut(&mut out, cols, x.len() * 4, |r, o| {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (o, v) in o.iter_mut().zip(row) {
            *o = v - lse;
        }
    });
    out
}

/// Row-wise softmax; when `causal`, rows are the query positions of
/// `[.., t, t]` blocks and keys after the query are excluded.
pub fn softmax_rows(x: &[f64], cols: usize, causal: bool) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    par::for_each_chunk_mut(&mut out, cols, x.len() * 4, |r, o| {
        let row = &x[r * cols..(r + 1) * cols];
        let visible = if causal { r % cols + 1 } else { cols };
        let max = row[..visible].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..visible {
            let e = (row[j] - max).exp();
            o[j] = e;
            sum += e;
        }
        for v in &mut o[..visible] {
            *v /= sum;
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(r: usize, c: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_for_all_transpose_flags() {
        let (m, k, n) = (37, 5, 11);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, if ta { &at } else { &a }, ta, if tb { &bt } else { &b }, tb, &mut c, 0.0);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom { batch: 2, height: 6, width: 6, channels: 3, kernel: 4, stride: 2, pad: 1 };
        let x: Vec<f64> = (0..g.batch * g.image_len()).map(|i| (i as f64 * 0.13).sin()).collect();
        let cols = im2col(&x, &g);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.71).cos()).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im(&y, &g);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn causal_softmax_rows_sum_to_one_over_visible_keys() {
        let t = 5;
        let x: Vec<f64> = (0..t * t).map(|i| i as f64 * 0.1).collect();
        let p = softmax_rows(&x, t, true);
        for q in 0..t {
            let row = &p[q * t..(q + 1) * t];
            assert!((row[..=q].iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row[q + 1..].iter().all(|&v| v == 0.0));
        }
    }
}
