//! Raw slice kernels behind the differentiable ops.
//!
//! Every reduction runs in a fixed sequential order so results do not depend
//! on how callers schedule work.

/// `c[m×n] += A·B` where A and B are addressed through row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa, "gemm: lhs too short");
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    // SAFETY: the asserts above bound every element addressed through the
    // given strides, and `c` does not alias `a` or `b` (distinct borrows).
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

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_acc(m, k, n, a, (k, 1), b, (n, 1), out);
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`
pub(crate) fn matmul_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_acc(m, n, k, g, (n, 1), b, (1, n), out);
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
pub(crate) fn matmul_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_acc(k, m, n, a, (1, k), g, (n, 1), out);
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    /// Output indices `o` with `o*stride + tap - pad` inside `[0, extent)`.
    fn valid_range(&self, tap: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = tap as isize - self.pad as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest o with o*s + off <= extent-1
        let hi_num = extent as isize - 1 - off;
        if hi_num < 0 {
            return (0, 0);
        }
        let hi = (hi_num / s + 1).min(out_extent as isize);
        if lo >= hi {
            (0, 0)
        } else {
            (lo as usize, hi as usize)
        }
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn plane_out(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unfolds one image `[C_in×H×W]` into `[C_in·k·k × H_out·W_out]`; taps that
/// fall into the padding are zero.
fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let po = g.plane_out();
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (oy0, oy1) = g.valid_range(ky, g.h, g.h_out);
            for kx in 0..g.k {
                let (ox0, ox1) = g.valid_range(kx, g.w, g.w_out);
                let row = &mut col[((ci * g.k + ky) * g.k + kx) * po..][..po];
                row[..oy0 * g.w_out].fill(0.0);
                row[oy1 * g.w_out..].fill(0.0);
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let dst = &mut row[oy * g.w_out..(oy + 1) * g.w_out];
                    dst[..ox0].fill(0.0);
                    dst[ox1..].fill(0.0);
                    if g.stride == 1 {
                        let ix0 = ox0 + kx - g.pad;
                        dst[ox0..ox1].copy_from_slice(&src[ix0..ix0 + (ox1 - ox0)]);
                    } else {
                        for ox in ox0..ox1 {
                            dst[ox] = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto `dx`.
fn col2im_acc(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let po = g.plane_out();
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (oy0, oy1) = g.valid_range(ky, g.h, g.h_out);
            for kx in 0..g.k {
                let (ox0, ox1) = g.valid_range(kx, g.w, g.w_out);
                let row = &col[((ci * g.k + ky) * g.k + kx) * po..][..po];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &row[oy * g.w_out..(oy + 1) * g.w_out];
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for ox in ox0..ox1 {
                        dst[ox * g.stride + kx - g.pad] += src[ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let plane_in = g.c_in * g.h * g.w;
    let po = g.plane_out();
    let rows = g.col_rows();
    let mut out = vec![0.0; g.n * g.c_out * po];
    let mut col = vec![0.0; rows * po];
    for n in 0..g.n {
        let o = &mut out[n * g.c_out * po..(n + 1) * g.c_out * po];
        if let Some(b) = bias {
            for (co, chunk) in o.chunks_mut(po).enumerate() {
                chunk.fill(b[co]);
            }
        }
        im2col(&x[n * plane_in..(n + 1) * plane_in], g, &mut col);
        matmul_acc(w, &col, o, g.c_out, rows, po);
    }
    out
}

/// Accumulates input, weight, and bias gradients of `conv2d_forward`.
pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    g: &ConvGeom,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let plane_in = g.c_in * g.h * g.w;
    let po = g.plane_out();
    let rows = g.col_rows();
    if let Some(db) = db {
        for n in 0..g.n {
            for co in 0..g.c_out {
                let gp = &grad_out[(n * g.c_out + co) * po..][..po];
                db[co] += gp.iter().sum::<f64>();
            }
        }
    }
    let mut col = vec![0.0; rows * po];
    let mut dcol = vec![0.0; rows * po];
    for n in 0..g.n {
        let gn = &grad_out[n * g.c_out * po..(n + 1) * g.c_out * po];
        if let Some(dw) = dw.as_deref_mut() {
            im2col(&x[n * plane_in..(n + 1) * plane_in], g, &mut col);
            matmul_nt_acc(gn, &col, dw, g.c_out, rows, po);
        }
        if let Some(dx) = dx.as_deref_mut() {
            dcol.fill(0.0);
            matmul_tn_acc(w, gn, &mut dcol, g.c_out, rows, po);
            col2im_acc(&dcol, g, &mut dx[n * plane_in..(n + 1) * plane_in]);
        }
    }
}

/// Source taps `(i0, i1, frac)` for each output coordinate of a 1-D
/// bilinear resize with half-pixel centers (align_corners = false).
pub(crate) fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

pub(crate) fn upsample_forward(x: &[f64], planes: usize, (h, w): (usize, usize), (ho, wo): (usize, usize)) -> Vec<f64> {
    let ty = bilinear_taps(h, ho);
    let tx = bilinear_taps(w, wo);
    let mut out = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = (1.0 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1];
                let bot = (1.0 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1];
                dst[oy * wo + ox] = (1.0 - fy) * top + fy * bot;
            }
        }
    }
    out
}

pub(crate) fn upsample_backward(
    grad_out: &[f64],
    dx: &mut [f64],
    planes: usize,
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
) {
    let ty = bilinear_taps(h, ho);
    let tx = bilinear_taps(w, wo);
    for p in 0..planes {
        let gsrc = &grad_out[p * ho * wo..(p + 1) * ho * wo];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let gv = gsrc[oy * wo + ox];
                d[y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * gv;
                d[y0 * w + x1] += (1.0 - fy) * fx * gv;
                d[y1 * w + x0] += fy * (1.0 - fx) * gv;
                d[y1 * w + x1] += fy * fx * gv;
            }
        }
    }
}

/// `(outer, len, inner)` split of `shape` around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_forward(x: &[f64], (outer, len, inner): (usize, usize, usize)) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                let e = (x[idx(j)] - max).exp();
                out[idx(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[idx(j)] /= total;
            }
        }
    }
    out
}

pub(crate) fn log_softmax_forward(x: &[f64], (outer, len, inner): (usize, usize, usize)) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let (arg, max) =
                (0..len).map(|j| (j, x[idx(j)])).fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (j, v)| if v > acc.1 { (j, v) } else { acc },
                );
            // The maximal term contributes exactly 1, so the log-sum-exp is
            // ln(1 + rest) and ln_1p keeps full precision when rest is tiny.
            let rest: f64 = (0..len).filter(|&j| j != arg).map(|j| (x[idx(j)] - max).exp()).sum();
            let tail = rest.ln_1p();
            for j in 0..len {
                out[idx(j)] = (x[idx(j)] - max) - tail;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_identity_when_same_size() {
        for (o, &(i0, _, f)) in bilinear_taps(5, 5).iter().enumerate() {
            assert_eq!(i0, o);
            assert_eq!(f, 0.0);
        }
    }

    #[test]
    fn taps_clamp_at_borders() {
        let t = bilinear_taps(2, 4);
        assert_eq!(t[0], (0, 1, 0.0));
        assert_eq!(t[3], (1, 1, 0.0));
        assert_eq!(t[1], (0, 1, 0.25));
        assert_eq!(t[2], (0, 1, 0.75));
    }

    #[test]
    fn valid_range_stride_two() {
        let g = ConvGeom {
            n: 1,
            c_in: 1,
            h: 8,
            w: 8,
            c_out: 1,
            k: 3,
            stride: 2,
            pad: 1,
            h_out: 4,
            w_out: 4,
        };
        assert_eq!(g.valid_range(0, 8, 4), (1, 4));
        assert_eq!(g.valid_range(1, 8, 4), (0, 4));
        assert_eq!(g.valid_range(2, 8, 4), (0, 4));
    }
}
