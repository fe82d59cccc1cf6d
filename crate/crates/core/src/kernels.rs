//! Raw numeric kernels on flat f64 slices.
//!
//! Everything here is deterministic: fixed loop order, fixed reduction
//! order, no threading. The tape builds its forward and backward rules
//! out of these.

/// C[m,n] = A[m,k] * B[k,n]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] += aip * b_row[j];
            }
        }
    }
    c
}

/// C[m,n] = A[m,k] * B[n,k]^T  (rows of both operands are contiguous)
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += a_row[p] * b_row[p];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// C[m,n] = A[k,m]^T * B[k,n]
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a_row[i];
            if api == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                c_row[j] += api * b_row[j];
            }
        }
    }
    c
}

/// Spatial geometry of a conv layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        batch: usize,
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        let hp = h + 2 * pad;
        let wp = w + 2 * pad;
        if hp < k || wp < k {
            return None;
        }
        let out_h = (hp - k) / stride + 1;
        let out_w = (wp - k) / stride + 1;
        if out_h == 0 || out_w == 0 {
            return None;
        }
        Some(ConvGeom {
            batch,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            out_h,
            out_w,
        })
    }

    /// MACs for a dense forward pass of one sample.
    pub fn macs_per_sample(&self) -> u64 {
        (self.c_out * self.c_in * self.k * self.k * self.out_h * self.out_w) as u64
    }

    /// Number of output windows covering input position (y, x); used for
    /// exact per-spike synaptic fan-out counting.
    pub fn windows_covering(&self, y: usize, x: usize) -> u64 {
        let mut count = 0u64;
        for ky in 0..self.k {
            let oy = y as isize + self.pad as isize - ky as isize;
            if oy < 0 || oy % self.stride as isize != 0 {
                continue;
            }
            let oy = oy as usize / self.stride;
            if oy >= self.out_h {
                continue;
            }
            for kx in 0..self.k {
                let ox = x as isize + self.pad as isize - kx as isize;
                if ox < 0 || ox % self.stride as isize != 0 {
                    continue;
                }
                let ox = ox as usize / self.stride;
                if ox < self.out_w {
                    count += 1;
                }
            }
        }
        count
    }
}

/// input [N,C,H,W] -> col [N*OH*OW, C*K*K], zero padding outside.
pub fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let kk = g.k * g.k;
    let row_len = g.c_in * kk;
    let mut col = vec![0.0; g.batch * g.out_h * g.out_w * row_len];
    let plane = g.h * g.w;
    for n in 0..g.batch {
        let in_base = n * g.c_in * plane;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = ((n * g.out_h + oy) * g.out_w + ox) * row_len;
                for c in 0..g.c_in {
                    let cplane = in_base + c * plane;
                    for ky in 0..g.k {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        for kx in 0..g.k {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            col[row + (c * g.k + ky) * g.k + kx] =
                                input[cplane + iy * g.w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add of col gradients back to input layout; inverse of `im2col`.
pub fn col2im(col: &[f64], g: &ConvGeom) -> Vec<f64> {
    let kk = g.k * g.k;
    let row_len = g.c_in * kk;
    let plane = g.h * g.w;
    let mut input = vec![0.0; g.batch * g.c_in * plane];
    for n in 0..g.batch {
        let in_base = n * g.c_in * plane;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = ((n * g.out_h + oy) * g.out_w + ox) * row_len;
                for c in 0..g.c_in {
                    let cplane = in_base + c * plane;
                    for ky in 0..g.k {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        for kx in 0..g.k {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            input[cplane + iy * g.w + ix as usize] +=
                                col[row + (c * g.k + ky) * g.k + kx];
                        }
                    }
                }
            }
        }
    }
    input
}

/// Cross-correlation conv forward. kernel is [CO, CI, K, K] flattened.
pub fn conv2d_forward(input: &[f64], kernel: &[f64], g: &ConvGeom) -> Vec<f64> {
    let col = im2col(input, g);
    let rows = g.batch * g.out_h * g.out_w;
    let row_len = g.c_in * g.k * g.k;
    // out_mat [rows, CO] = col [rows, row_len] * kernel [CO, row_len]^T
    let out_mat = matmul_nt(&col, kernel, rows, row_len, g.c_out);
    // rearrange to [N, CO, OH, OW]
    let ohw = g.out_h * g.out_w;
    let mut out = vec![0.0; g.batch * g.c_out * ohw];
    for n in 0..g.batch {
        for i in 0..ohw {
            let src = (n * ohw + i) * g.c_out;
            for co in 0..g.c_out {
                out[(n * g.c_out + co) * ohw + i] = out_mat[src + co];
            }
        }
    }
    out
}

/// Gradients (d_input, d_kernel) of `conv2d_forward`. `im2col` is
/// recomputed here rather than saved on the tape.
pub fn conv2d_backward(
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>) {
    let rows = g.batch * g.out_h * g.out_w;
    let row_len = g.c_in * g.k * g.k;
    let ohw = g.out_h * g.out_w;
    // grad_out [N, CO, OH, OW] -> g_mat [rows, CO]
    let mut g_mat = vec![0.0; rows * g.c_out];
    for n in 0..g.batch {
        for co in 0..g.c_out {
            let src = (n * g.c_out + co) * ohw;
            for i in 0..ohw {
                g_mat[(n * ohw + i) * g.c_out + co] = grad_out[src + i];
            }
        }
    }
    let col = im2col(input, g);
    // d_kernel [CO, row_len] = g_mat^T [CO, rows] * col [rows, row_len]
    let d_kernel = matmul_tn(&g_mat, &col, g.c_out, rows, row_len);
    // d_col [rows, row_len] = g_mat [rows, CO] * kernel [CO, row_len]
    let d_col = matmul(&g_mat, kernel, rows, g.c_out, row_len);
    let d_input = col2im(&d_col, g);
    (d_input, d_kernel)
}
