// Raw slice kernels shared by the tape ops. No shape checking here; callers
// validate before dispatching.

use super::Scalar;

/// c[m×n] += a[m×k] · b[k×n]
pub fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// c[m×n] += aᵀ · b  with a stored as k×m
pub fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// c[m×n] += a · bᵀ  with b stored as n×k
pub fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            c[i * n + j] = c[i * n + j] + acc;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Unrolls one sample's input into a (Cin·K·K) × (H'·W') column matrix.
    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T]) {
        let (ho, wo, k) = (self.out_height(), self.out_width(), self.kernel);
        for c in 0..self.in_channels {
            let plane = &x[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            dst[oy * wo + ox] = if iy >= 0
                                && ix >= 0
                                && (iy as usize) < self.height
                                && (ix as usize) < self.width
                            {
                                plane[iy as usize * self.width + ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, col: &[T], dx: &mut [T]) {
        let (ho, wo, k) = (self.out_height(), self.out_width(), self.kernel);
        for c in 0..self.in_channels {
            let plane = &mut dx[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &col[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy as usize >= self.height {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix as usize >= self.width {
                                continue;
                            }
                            let d = &mut plane[iy as usize * self.width + ix as usize];
                            *d = *d + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }

    pub fn conv_forward<T: Scalar>(&self, x: &[T], w: &[T]) -> Vec<T> {
        let (rows, cols) = (self.col_rows(), self.col_cols());
        let in_sz = self.in_channels * self.height * self.width;
        let out_sz = self.out_channels * cols;
        let mut out = vec![T::zero(); self.batch * out_sz];
        let mut col = vec![T::zero(); rows * cols];
        for n in 0..self.batch {
            self.im2col(&x[n * in_sz..(n + 1) * in_sz], &mut col);
            gemm_nn(
                w,
                &col,
                &mut out[n * out_sz..(n + 1) * out_sz],
                self.out_channels,
                rows,
                cols,
            );
        }
        out
    }

    /// Returns (dx, dw) for upstream gradient `dy`.
    pub fn conv_backward<T: Scalar>(&self, x: &[T], w: &[T], dy: &[T]) -> (Vec<T>, Vec<T>) {
        let (rows, cols) = (self.col_rows(), self.col_cols());
        let in_sz = self.in_channels * self.height * self.width;
        let out_sz = self.out_channels * cols;
        let mut dx = vec![T::zero(); x.len()];
        let mut dw = vec![T::zero(); w.len()];
        let mut col = vec![T::zero(); rows * cols];
        let mut dcol = vec![T::zero(); rows * cols];
        for n in 0..self.batch {
            let dyn_ = &dy[n * out_sz..(n + 1) * out_sz];
            self.im2col(&x[n * in_sz..(n + 1) * in_sz], &mut col);
            gemm_nt(dyn_, &col, &mut dw, self.out_channels, cols, rows);
            dcol.iter_mut().for_each(|v| *v = T::zero());
            gemm_tn(w, dyn_, &mut dcol, rows, self.out_channels, cols);
            self.col2im(&dcol, &mut dx[n * in_sz..(n + 1) * in_sz]);
        }
        (dx, dw)
    }

    pub fn depthwise_forward<T: Scalar>(&self, x: &[T], w: &[T]) -> Vec<T> {
        let (ho, wo, k) = (self.out_height(), self.out_width(), self.kernel);
        let c = self.in_channels;
        let mut out = vec![T::zero(); self.batch * c * ho * wo];
        for n in 0..self.batch {
            for ch in 0..c {
                let plane = &x[(n * c + ch) * self.height * self.width..][..self.height * self.width];
                let kern = &w[ch * k * k..(ch + 1) * k * k];
                let dst = &mut out[(n * c + ch) * ho * wo..][..ho * wo];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = T::zero();
                        for ky in 0..k {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy as usize >= self.height {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix < 0 || ix as usize >= self.width {
                                    continue;
                                }
                                acc = acc
                                    + kern[ky * k + kx]
                                        * plane[iy as usize * self.width + ix as usize];
                            }
                        }
                        dst[oy * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    pub fn depthwise_backward<T: Scalar>(&self, x: &[T], w: &[T], dy: &[T]) -> (Vec<T>, Vec<T>) {
        let (ho, wo, k) = (self.out_height(), self.out_width(), self.kernel);
        let c = self.in_channels;
        let hw = self.height * self.width;
        let mut dx = vec![T::zero(); x.len()];
        let mut dw = vec![T::zero(); w.len()];
        for n in 0..self.batch {
            for ch in 0..c {
                let base = (n * c + ch) * hw;
                let g = &dy[(n * c + ch) * ho * wo..][..ho * wo];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let gv = g[oy * wo + ox];
                        for ky in 0..k {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy as usize >= self.height {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix < 0 || ix as usize >= self.width {
                                    continue;
                                }
                                let xi = base + iy as usize * self.width + ix as usize;
                                let wi = ch * k * k + ky * k + kx;
                                dw[wi] = dw[wi] + gv * x[xi];
                                dx[xi] = dx[xi] + gv * w[wi];
                            }
                        }
                    }
                }
            }
        }
        (dx, dw)
    }
}
