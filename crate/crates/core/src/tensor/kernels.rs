//! Row-major dense kernels shared by the graph ops.

/// `c[m,n] += a[m,k] · b[k,n]`
pub fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(a, (k, 1), b, (n, 1), c, m, k, n);
}

/// `c[m,k] += g[m,n] · b[k,n]ᵀ`
pub fn gemm_nt(g: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    gemm(g, (n, 1), b, (1, n), c, m, n, k);
}

/// `c[k,n] += a[m,k]ᵀ · g[m,n]`
pub fn gemm_tn(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(a, (1, k), g, (n, 1), c, k, m, n);
}

/// `c[m,n] += a[m,k] · b[k,n]` with explicit (row, column) strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(a: &[f64], (rsa, csa): (usize, usize), b: &[f64], (rsb, csb): (usize, usize), c: &mut [f64], m: usize, k: usize, n: usize) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too short");
    // SAFETY: the assertion above bounds every index the strides can reach, and
    // `c` does not alias `a` or `b` because it is borrowed mutably.
    unsafe {
        matrixmultiply::dgemm(
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
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Transpose the last two axes of a batch of `[rows, cols]` matrices.
pub fn transpose_batched(x: &[f64], batch: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for bi in 0..batch {
        let src = &x[bi * rows * cols..(bi + 1) * rows * cols];
        let dst = &mut out[bi * rows * cols..(bi + 1) * rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Move axes so that output axis `i` is input axis `axes[i]`.
pub fn permute(x: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..x.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(x[off]);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

/// Geometry of a square-kernel 2D patch extraction over an `[H, W, C]` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PatchSpec {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    /// Calls `f(out_index, in_index)` for every non-padding tap.
    pub fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (ho, wo, k, c) = (self.out_height(), self.out_width(), self.kernel, self.channels);
        for oy in 0..ho {
            for ox in 0..wo {
                let base = (oy * wo + ox) * self.patch_len();
                for ky in 0..k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.height as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.width as isize {
                            continue;
                        }
                        let src = (iy as usize * self.width + ix as usize) * c;
                        let dst = base + (ky * k + kx) * c;
                        for ch in 0..c {
                            f(dst + ch, src + ch);
                        }
                    }
                }
            }
        }
    }
}

/// Bilinear resampling taps for one axis: source index `i` maps to `i · in/out`,
/// so sample 0 of both grids coincide.
pub fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let s = (o as f64 * scale).min((input - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree_with_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut c = vec![0.0; m * n];
        gemm_nn(&a, &b, &mut c, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
        // a = c · bᵀ shape check through gemm_nt
        let mut d = vec![0.0; m * k];
        gemm_nt(&c, &b, &mut d, m, n, k);
        for i in 0..m {
            for p in 0..k {
                let want: f64 = (0..n).map(|j| c[i * n + j] * b[p * n + j]).sum();
                assert!((d[i * k + p] - want).abs() < 1e-12);
            }
        }
        let mut e = vec![0.0; k * n];
        gemm_tn(&a, &c, &mut e, m, k, n);
        for p in 0..k {
            for j in 0..n {
                let want: f64 = (0..m).map(|i| a[i * k + p] * c[i * n + j]).sum();
                assert!((e[p * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permute_swaps_axes() {
        let x: Vec<f64> = (0..6).map(f64::from).collect();
        let y = permute(&x, &[2, 3], &[1, 0]);
        assert_eq!(y, vec![0., 3., 1., 4., 2., 5.]);
        assert_eq!(transpose_batched(&x, 1, 2, 3), y);
    }

    #[test]
    fn patch_geometry() {
        let p = PatchSpec { height: 8, width: 6, channels: 2, kernel: 3, stride: 2, pad: 1 };
        assert_eq!((p.out_height(), p.out_width()), (4, 3));
        assert_eq!(p.patch_len(), 18);
    }
}
