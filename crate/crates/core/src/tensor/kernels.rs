//! Dense loop kernels shared by the tape operators.
//!
//! Every kernel accumulates each output element over its reduction index in
//! increasing order, so results are independent of blocking and match a naive
//! triple loop bit for bit.

use super::Scalar;

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F], out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    // Four output rows share each loaded row of `b`.
    let blocked = m / 4 * 4;
    for i in (0..blocked).step_by(4) {
        let (r0, rest) = out[i * n..(i + 4) * n].split_at_mut(n);
        let (r1, rest) = rest.split_at_mut(n);
        let (r2, r3) = rest.split_at_mut(n);
        for p in 0..k {
            let (a0, a1, a2, a3) = (
                a[i * k + p],
                a[(i + 1) * k + p],
                a[(i + 2) * k + p],
                a[(i + 3) * k + p],
            );
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                let bv = b_row[j];
                r0[j] += a0 * bv;
                r1[j] += a1 * bv;
                r2[j] += a2 * bv;
                r3[j] += a3 * bv;
            }
        }
    }
    for i in blocked..m {
        let row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += aᵀ · b` with `a` stored as `k×m`.
pub fn gemm_tn<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F], out: &mut [F]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a · bᵀ` with `b` stored as `n×k`.
pub fn gemm_nt<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F], out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = out[i * n + j];
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
}

/// Geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Column-matrix width `C·k·k`.
    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    /// Column-matrix height `B·H'·W'`.
    pub fn patches(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

/// Expands `x[B×C×H×W]` into a `(B·H'·W') × (C·k·k)` patch matrix; padded taps are zero.
pub fn im2col<F: Scalar>(x: &[F], g: &ConvGeom) -> Vec<F> {
    let k = g.kernel;
    let plen = g.patch_len();
    let mut cols = vec![F::zero(); g.patches() * plen];
    let hw = g.height * g.width;
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = (b * g.out_h + oy) * g.out_w + ox;
                let dst = &mut cols[row * plen..(row + 1) * plen];
                for c in 0..g.in_ch {
                    let plane = &x[(b * g.in_ch + c) * hw..(b * g.in_ch + c + 1) * hw];
                    for ky in 0..k {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.width as isize {
                                continue;
                            }
                            dst[(c * k + ky) * k + kx] = plane[iy as usize * g.width + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a patch matrix gradient back onto `dx[B×C×H×W]`.
pub fn col2im<F: Scalar>(dcols: &[F], g: &ConvGeom, dx: &mut [F]) {
    let k = g.kernel;
    let plen = g.patch_len();
    let hw = g.height * g.width;
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = (b * g.out_h + oy) * g.out_w + ox;
                let src = &dcols[row * plen..(row + 1) * plen];
                for c in 0..g.in_ch {
                    let base = (b * g.in_ch + c) * hw;
                    for ky in 0..k {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.width as isize {
                                continue;
                            }
                            dx[base + iy as usize * g.width + ix as usize] +=
                                src[(c * k + ky) * k + kx];
                        }
                    }
                }
            }
        }
    }
}

/// Transposes a row-major `rows×cols` matrix.
pub fn transpose<F: Scalar>(rows: usize, cols: usize, a: &[F]) -> Vec<F> {
    let mut out = vec![F::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}
