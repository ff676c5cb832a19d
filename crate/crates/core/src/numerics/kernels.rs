//! Slice-level compute kernels shared by the forward and backward passes.
//!
//! Every accumulation runs in a fixed order so results are bit-reproducible,
//! and `conv2d_forward` sums each output in exactly the order of a direct
//! nested-loop cross-correlation: bias first, then input channel, kernel row,
//! kernel column.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.channels * self.kh * self.kw
    }
}

#[inline]
fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

const MR: usize = 4;
const NR: usize = 8;

/// `c += a @ b` for row-major `a: [m, k]`, `b: [k, n]`, `c: [m, n]`.
///
/// Each output accumulates its `k` products strictly in index order onto the
/// value already in `c`, whatever the tiling.
pub fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let m_full = m - m % MR;
    let n_full = n - n % NR;
    for i0 in (0..m_full).step_by(MR) {
        for j0 in (0..n_full).step_by(NR) {
            let mut acc = [[0.0f64; NR]; MR];
            for (ii, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&c[(i0 + ii) * n + j0..(i0 + ii) * n + j0 + NR]);
            }
            for kk in 0..k {
                let bv: &[f64; NR] = b[kk * n + j0..kk * n + j0 + NR].try_into().unwrap();
                for (ii, row) in acc.iter_mut().enumerate() {
                    let av = a[(i0 + ii) * k + kk];
                    for jj in 0..NR {
                        row[jj] += av * bv[jj];
                    }
                }
            }
            for (ii, row) in acc.iter().enumerate() {
                c[(i0 + ii) * n + j0..(i0 + ii) * n + j0 + NR].copy_from_slice(row);
            }
        }
        if n_full < n {
            for ii in i0..i0 + MR {
                gemm_row_tail(a, b, c, ii, k, n, n_full);
            }
        }
    }
    for ii in m_full..m {
        gemm_row_tail(a, b, c, ii, k, n, 0);
    }
}

fn gemm_row_tail(a: &[f64], b: &[f64], c: &mut [f64], i: usize, k: usize, n: usize, from: usize) {
    let row = &mut c[i * n + from..(i + 1) * n];
    for kk in 0..k {
        axpy(row, a[i * k + kk], &b[kk * n + from..(kk + 1) * n]);
    }
}

/// `cols[q][p]` with `q = (c, di, dj)` and `p = (oi, oj)`; out-of-bounds taps are zero.
fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p_len = oh * ow;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for di in 0..g.kh {
            for dj in 0..g.kw {
                let q = (c * g.kh + di) * g.kw + dj;
                let row = &mut cols[q * p_len..(q + 1) * p_len];
                for oi in 0..oh {
                    let ii = (oi * g.stride + di) as isize - g.pad as isize;
                    let dst = &mut row[oi * ow..(oi + 1) * ow];
                    if ii < 0 || ii >= g.height as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[ii as usize * g.width..(ii as usize + 1) * g.width];
                    for (oj, d) in dst.iter_mut().enumerate() {
                        let jj = (oj * g.stride + dj) as isize - g.pad as isize;
                        *d = if jj < 0 || jj >= g.width as isize {
                            0.0
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p_len = oh * ow;
    for c in 0..g.channels {
        for di in 0..g.kh {
            for dj in 0..g.kw {
                let q = (c * g.kh + di) * g.kw + dj;
                let row = &cols[q * p_len..(q + 1) * p_len];
                for oi in 0..oh {
                    let ii = (oi * g.stride + di) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.height as isize {
                        continue;
                    }
                    let base = (c * g.height + ii as usize) * g.width;
                    for oj in 0..ow {
                        let jj = (oj * g.stride + dj) as isize - g.pad as isize;
                        if jj >= 0 && (jj as usize) < g.width {
                            x[base + jj as usize] += row[oi * ow + oj];
                        }
                    }
                }
            }
        }
    }
}

fn transpose(src: &[f64], rows: usize, cols: usize, dst: &mut [f64]) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

/// Batched cross-correlation. `x` is `[N, C, H, W]`, `w` is `[K, C, kh, kw]`.
pub fn conv2d_forward(x: &[f64], n: usize, g: &ConvGeom, w: &[f64], b: &[f64]) -> Vec<f64> {
    let k_out = b.len();
    let q_len = g.patch();
    let p_len = g.out_h() * g.out_w();
    let in_len = g.channels * g.height * g.width;
    let mut out = vec![0.0; n * k_out * p_len];
    let mut cols = vec![0.0; q_len * p_len];
    let direct = g.is_pointwise();
    for i in 0..n {
        let xi = &x[i * in_len..(i + 1) * in_len];
        if !direct {
            im2col(xi, g, &mut cols);
        }
        let out_n = &mut out[i * k_out * p_len..(i + 1) * k_out * p_len];
        for (row, &bv) in out_n.chunks_mut(p_len).zip(b) {
            row.fill(bv);
        }
        gemm_acc(w, if direct { xi } else { &cols }, out_n, k_out, q_len, p_len);
    }
    out
}

pub struct ConvGrads {
    pub x: Option<Vec<f64>>,
    pub w: Option<Vec<f64>>,
    pub b: Option<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    n: usize,
    g: &ConvGeom,
    w: &[f64],
    k_out: usize,
    gout: &[f64],
    need: (bool, bool, bool),
) -> ConvGrads {
    let q_len = g.patch();
    let p_len = g.out_h() * g.out_w();
    let in_len = g.channels * g.height * g.width;
    let mut gx = need.0.then(|| vec![0.0; x.len()]);
    let mut gw = need.1.then(|| vec![0.0; w.len()]);
    let mut gb = need.2.then(|| vec![0.0; k_out]);
    let direct = g.is_pointwise();
    let mut cols = vec![0.0; q_len * p_len];
    let mut cols_t = vec![0.0; q_len * p_len];
    let mut gcols = vec![0.0; q_len * p_len];
    let mut w_t = vec![0.0; w.len()];
    transpose(w, k_out, q_len, &mut w_t);
    for i in 0..n {
        let go = &gout[i * k_out * p_len..(i + 1) * k_out * p_len];
        if let Some(gb) = gb.as_mut() {
            for k in 0..k_out {
                gb[k] += go[k * p_len..(k + 1) * p_len].iter().sum::<f64>();
            }
        }
        if let Some(gw) = gw.as_mut() {
            let xi = &x[i * in_len..(i + 1) * in_len];
            if direct {
                transpose(xi, q_len, p_len, &mut cols_t);
            } else {
                im2col(xi, g, &mut cols);
                transpose(&cols, q_len, p_len, &mut cols_t);
            }
            gemm_acc(go, &cols_t, gw, k_out, p_len, q_len);
        }
        if let Some(gx) = gx.as_mut() {
            let gxi = &mut gx[i * in_len..(i + 1) * in_len];
            if direct {
                gemm_acc(&w_t, go, gxi, q_len, k_out, p_len);
            } else {
                gcols.fill(0.0);
                gemm_acc(&w_t, go, &mut gcols, q_len, k_out, p_len);
                col2im_add(&gcols, g, gxi);
            }
        }
    }
    ConvGrads { x: gx, w: gw, b: gb }
}

/// `y[b] = a[b] @ c[b]` for `a: [B, M, K]`, `c: [B, K, P]`.
pub fn bmm(a: &[f64], c: &[f64], batch: usize, m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut y = vec![0.0; batch * m * p];
    for bi in 0..batch {
        gemm_acc(
            &a[bi * m * k..(bi + 1) * m * k],
            &c[bi * k * p..(bi + 1) * k * p],
            &mut y[bi * m * p..(bi + 1) * m * p],
            m,
            k,
            p,
        );
    }
    y
}

/// Swap the last two axes of a `[B, R, C]` buffer.
pub fn transpose_last2(x: &[f64], batch: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for bi in 0..batch {
        let s = bi * rows * cols;
        transpose(&x[s..s + rows * cols], rows, cols, &mut y[s..s + rows * cols]);
    }
    y
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_by_one_conv_is_channel_mix() {
        let g = ConvGeom { channels: 2, height: 1, width: 2, kh: 1, kw: 1, stride: 1, pad: 0 };
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = conv2d_forward(&x, 1, &g, &[1.0, 10.0], &[0.5]);
        assert_eq!(y, vec![31.5, 42.5]);
    }

    #[test]
    fn gemm_matches_naive_on_ragged_shapes() {
        let (m, k, n) = (7, 5, 13);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut c = vec![0.5; m * n];
        gemm_acc(&a, &b, &mut c, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.5;
                for kk in 0..k {
                    s += a[i * k + kk] * b[kk * n + j];
                }
                assert_eq!(c[i * n + j], s);
            }
        }
    }

    #[test]
    fn bmm_small() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let c = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(bmm(&a, &c, 1, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }
}
