//! Dense linear-algebra kernels. Products accumulate in f64 and round once
//! on store.

use crate::tensor::Real;

/// Matrix view descriptor: `rows x cols`, optionally stored transposed.
#[derive(Debug, Clone, Copy)]
pub struct Mat<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    /// Storage is `cols x rows` row-major and the view is its transpose.
    pub transposed: bool,
}

impl<'a, T: Real> Mat<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Mat { data, rows, cols, transposed: false }
    }

    /// Views `data` (stored `cols x rows`) as its `rows x cols` transpose.
    pub fn t(data: &'a [T], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Mat { data, rows, cols, transposed: true }
    }

    #[inline]
    fn at(&self, r: usize, c: usize) -> T {
        if self.transposed {
            self.data[c * self.rows + r]
        } else {
            self.data[r * self.cols + c]
        }
    }

    fn row_major(&self) -> std::borrow::Cow<'a, [T]> {
        if !self.transposed {
            return std::borrow::Cow::Borrowed(self.data);
        }
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.push(self.data[c * self.rows + r]);
            }
        }
        std::borrow::Cow::Owned(out)
    }
}

/// `out (+)= a * b` where `out` is `a.rows x b.cols` row-major.
pub fn gemm<T: Real>(a: Mat<'_, T>, b: Mat<'_, T>, out: &mut [T], accumulate: bool) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(out.len(), m * n, "gemm output size");
    let b_rows = b.row_major();
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for p in 0..k {
            let aip = a.at(i, p).f64();
            if aip == 0.0 {
                continue;
            }
            let brow = &b_rows[p * n..(p + 1) * n];
            for (s, &bv) in acc.iter_mut().zip(brow) {
                *s += aip * bv.f64();
            }
        }
        let orow = &mut out[i * n..(i + 1) * n];
        if accumulate {
            for (o, s) in orow.iter_mut().zip(&acc) {
                *o = T::of(o.f64() + s);
            }
        } else {
            for (o, s) in orow.iter_mut().zip(&acc) {
                *o = T::of(*s);
            }
        }
    }
}

/// Patch geometry shared by convolution and transposed convolution.
#[derive(Debug, Clone, Copy)]
pub struct Patches {
    pub channels: usize,
    /// Spatial size of the "image" side.
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Spatial size of the "grid" side (one column per grid cell).
    pub grid_h: usize,
    pub grid_w: usize,
}

impl Patches {
    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn cols(&self) -> usize {
        self.grid_h * self.grid_w
    }

    #[inline]
    fn source(&self, gy: usize, gx: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (gy * self.stride + ky) as isize - self.padding as isize;
        let x = (gx * self.stride + kx) as isize - self.padding as isize;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            None
        } else {
            Some(y as usize * self.width + x as usize)
        }
    }

    /// Unfolds `image` (`C x H x W`) into `cols` (`C*k*k x grid`).
    pub fn im2col<T: Real>(&self, image: &[T], cols: &mut [T]) {
        let (k, ncols, plane) = (self.kernel, self.cols(), self.height * self.width);
        for c in 0..self.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for gy in 0..self.grid_h {
                        for gx in 0..self.grid_w {
                            dst[gy * self.grid_w + gx] = match self.source(gy, gx, ky, kx) {
                                Some(idx) => image[c * plane + idx],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Patches::im2col`]: scatters-and-adds `cols` into `image`.
    pub fn col2im<T: Real>(&self, cols: &[T], image: &mut [T]) {
        let (k, ncols, plane) = (self.kernel, self.cols(), self.height * self.width);
        let mut acc = vec![0.0f64; image.len()];
        for c in 0..self.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for gy in 0..self.grid_h {
                        for gx in 0..self.grid_w {
                            if let Some(idx) = self.source(gy, gx, ky, kx) {
                                acc[c * plane + idx] += src[gy * self.grid_w + gx].f64();
                            }
                        }
                    }
                }
            }
        }
        for (o, a) in image.iter_mut().zip(acc) {
            *o = T::of(a);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(&a, &b, m, k, n);
        let mut out = vec![0.0; m * n];
        gemm(Mat::new(&a, m, k), Mat::new(&b, k, n), &mut out, false);
        assert_eq!(out, want);

        // transposed storage for both operands
        let mut at = vec![0.0; m * k];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut bt = vec![0.0; k * n];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut out2 = vec![1.0; m * n];
        gemm(Mat::t(&at, m, k), Mat::t(&bt, k, n), &mut out2, true);
        for (o, w) in out2.iter().zip(&want) {
            assert!((o - (w + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let p = Patches { channels: 2, height: 5, width: 4, kernel: 3, stride: 2, padding: 1, grid_h: 3, grid_w: 2 };
        let img: Vec<f64> = (0..40).map(|i| (i as f64 * 0.3).sin()).collect();
        let cols_in: Vec<f64> = (0..p.rows() * p.cols()).map(|i| (i as f64 * 0.7).cos()).collect();
        let mut cols = vec![0.0; p.rows() * p.cols()];
        p.im2col(&img, &mut cols);
        let mut back = vec![0.0; 40];
        p.col2im(&cols_in, &mut back);
        let lhs: f64 = cols.iter().zip(&cols_in).map(|(a, b)| a * b).sum();
        let rhs: f64 = img.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
