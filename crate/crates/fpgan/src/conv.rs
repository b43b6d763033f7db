//! CPU convolution kernels: standard (im2col + GEMM), depthwise, pointwise.
//!
//! All kernels are cross-correlations (no kernel flip), operate on row-major
//! `[N, C, H, W]` buffers, and use fixed loop orders so results are bitwise
//! deterministic. Weight layouts follow the parameter container:
//! standard `[C_out, C_in, K, K]`, depthwise `[C, 1, K, K]`,
//! pointwise `[C_out, C_in, 1, 1]`.

use crate::element::Element;
use crate::error::{Error, Result};

/// Output extent for one spatial axis; stride must divide exactly.
pub fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::shape("stride must be >= 1"));
    }
    let padded = input + 2 * pad;
    if padded < k {
        return Err(Error::shape(format!(
            "kernel {k} larger than padded input {padded}"
        )));
    }
    let span = padded - k;
    if span % stride != 0 {
        return Err(Error::shape(format!(
            "(H + 2*pad - K) = {span} not divisible by stride {stride}"
        )));
    }
    Ok(span / stride + 1)
}

/// Resolved geometry of one conv application.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
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
    pub fn new(
        x_dims: &[usize],
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if x_dims.len() != 4 {
            return Err(Error::shape(format!(
                "conv input must be 4-D [N,C,H,W], got {x_dims:?}"
            )));
        }
        let (n, c_in, h, w) = (x_dims[0], x_dims[1], x_dims[2], x_dims[3]);
        let h_out = conv_out_extent(h, k, stride, pad)?;
        let w_out = conv_out_extent(w, k, stride, pad)?;
        Ok(ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            h_out,
            w_out,
        })
    }

    pub fn out_dims(&self) -> Vec<usize> {
        vec![self.n, self.c_out, self.h_out, self.w_out]
    }

    fn in_plane(&self) -> usize {
        self.h * self.w
    }

    fn out_plane(&self) -> usize {
        self.h_out * self.w_out
    }
}

// ---------------------------------------------------------------------------
// GEMM primitives
// ---------------------------------------------------------------------------

/// C += A * B with A: [m,k], B: [k,n], C: [m,n], all row-major.
pub fn gemm_nn<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + a_ip * bv;
            }
        }
    }
}

/// C += A * B^T with A: [m,k], B: [n,k], C: [m,n], all row-major.
pub fn gemm_nt<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c_row[j] = c_row[j] + dot(a_row, b_row);
        }
    }
}

/// Four-lane unrolled dot product; the lane split is fixed, so the summation
/// order (and therefore the float result) is identical on every run.
fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let chunks = a.len() / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (T::zero(), T::zero(), T::zero(), T::zero());
    for i in 0..chunks {
        let o = i * 4;
        s0 = s0 + a[o] * b[o];
        s1 = s1 + a[o + 1] * b[o + 1];
        s2 = s2 + a[o + 2] * b[o + 2];
        s3 = s3 + a[o + 3] * b[o + 3];
    }
    let mut tail = T::zero();
    for i in chunks * 4..a.len() {
        tail = tail + a[i] * b[i];
    }
    ((s0 + s1) + (s2 + s3)) + tail
}

pub fn transpose<T: Element>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// im2col / col2im
// ---------------------------------------------------------------------------

/// Valid output-x range for a given kernel-x offset, i.e. the `ox` where
/// `ox*stride + kx - pad` lands inside `[0, w)`.
fn valid_ox_range(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = if kx >= g.pad {
        0
    } else {
        (g.pad - kx).div_ceil(g.stride)
    };
    let max_ix = g.w + g.pad; // exclusive bound on ix + 1
    let hi = if kx >= max_ix {
        0
    } else {
        ((max_ix - 1 - kx) / g.stride + 1).min(g.w_out)
    };
    (lo.min(g.w_out), hi)
}

/// Unfolds one image `[C,H,W]` into `cols: [C*K*K, H_out*W_out]`.
/// Row index is `(c*K + ky)*K + kx`; out-of-bounds taps are zero.
pub fn im2col<T: Element>(x_img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ohw = g.out_plane();
    debug_assert_eq!(cols.len(), g.c_in * g.k * g.k * ohw);
    cols.fill(T::zero());
    for c in 0..g.c_in {
        let plane = &x_img[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((c * g.k + ky) * g.k + kx) * ohw;
                let (ox_lo, ox_hi) = valid_ox_range(g, kx);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst = &mut cols[row + oy * g.w_out..row + (oy + 1) * g.w_out];
                    if g.stride == 1 {
                        let ix0 = ox_lo + kx - g.pad;
                        dst[ox_lo..ox_hi].copy_from_slice(&src_row[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            dst[ox] = src_row[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `cols` (same layout as [`im2col`]) back into an image buffer.
pub fn col2im_add<T: Element>(cols: &[T], g: &ConvGeom, x_img: &mut [T]) {
    let ohw = g.out_plane();
    for c in 0..g.c_in {
        let plane = &mut x_img[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((c * g.k + ky) * g.k + kx) * ohw;
                let (ox_lo, ox_hi) = valid_ox_range(g, kx);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src = &cols[row + oy * g.w_out..row + (oy + 1) * g.w_out];
                    for ox in ox_lo..ox_hi {
                        let ix = ox * g.stride + kx - g.pad;
                        dst_row[ix] = dst_row[ix] + src[ox];
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Standard convolution
// ---------------------------------------------------------------------------

pub fn conv2d_fwd<T: Element>(x: &[T], g: &ConvGeom, w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let patch = g.c_in * g.k * g.k;
    let ohw = g.out_plane();
    let mut y = vec![T::zero(); g.n * g.c_out * ohw];
    let mut cols = vec![T::zero(); patch * ohw];
    for n in 0..g.n {
        let x_img = &x[n * g.c_in * g.in_plane()..(n + 1) * g.c_in * g.in_plane()];
        im2col(x_img, g, &mut cols);
        let y_img = &mut y[n * g.c_out * ohw..(n + 1) * g.c_out * ohw];
        gemm_nn(w, &cols, y_img, g.c_out, patch, ohw);
        if let Some(b) = bias {
            for c in 0..g.c_out {
                let bv = b[c];
                for v in &mut y_img[c * ohw..(c + 1) * ohw] {
                    *v = *v + bv;
                }
            }
        }
    }
    y
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

/// Backward pass of [`conv2d_fwd`]. The im2col patches are recomputed here
/// rather than saved from the forward, trading FLOPs for activation memory.
pub fn conv2d_bwd<T: Element>(
    x: &[T],
    g: &ConvGeom,
    w: &[T],
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let patch = g.c_in * g.k * g.k;
    let ohw = g.out_plane();
    let mut dx = need_dx.then(|| vec![T::zero(); g.n * g.c_in * g.in_plane()]);
    let mut dw = need_dw.then(|| vec![T::zero(); g.c_out * patch]);
    let mut db = need_db.then(|| vec![T::zero(); g.c_out]);
    let w_t = need_dx.then(|| transpose(w, g.c_out, patch));
    let mut cols = vec![T::zero(); patch * ohw];
    for n in 0..g.n {
        let dy_img = &dy[n * g.c_out * ohw..(n + 1) * g.c_out * ohw];
        if need_dw {
            let x_img = &x[n * g.c_in * g.in_plane()..(n + 1) * g.c_in * g.in_plane()];
            im2col(x_img, g, &mut cols);
            gemm_nt(dy_img, &cols, dw.as_mut().unwrap(), g.c_out, ohw, patch);
        }
        if let Some(dx_buf) = dx.as_mut() {
            cols.fill(T::zero());
            gemm_nn(w_t.as_ref().unwrap(), dy_img, &mut cols, patch, g.c_out, ohw);
            let dx_img = &mut dx_buf[n * g.c_in * g.in_plane()..(n + 1) * g.c_in * g.in_plane()];
            col2im_add(&cols, g, dx_img);
        }
        if let Some(db_buf) = db.as_mut() {
            for c in 0..g.c_out {
                let mut s = T::zero();
                for &v in &dy_img[c * ohw..(c + 1) * ohw] {
                    s = s + v;
                }
                db_buf[c] = db_buf[c] + s;
            }
        }
    }
    ConvGrads { dx, dw, db }
}

// ---------------------------------------------------------------------------
// Depthwise convolution (channel multiplier 1)
// ---------------------------------------------------------------------------

pub fn depthwise_fwd<T: Element>(x: &[T], g: &ConvGeom, w: &[T], bias: Option<&[T]>) -> Vec<T> {
    debug_assert_eq!(g.c_in, g.c_out);
    let ohw = g.out_plane();
    let mut y = vec![T::zero(); g.n * g.c_in * ohw];
    for n in 0..g.n {
        for c in 0..g.c_in {
            let plane = &x[(n * g.c_in + c) * g.in_plane()..(n * g.c_in + c + 1) * g.in_plane()];
            let out = &mut y[(n * g.c_in + c) * ohw..(n * g.c_in + c + 1) * ohw];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let wv = w[(c * g.k + ky) * g.k + kx];
                    let (ox_lo, ox_hi) = valid_ox_range(g, kx);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in 0..g.h_out {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let dst = &mut out[oy * g.w_out..(oy + 1) * g.w_out];
                        if g.stride == 1 {
                            let ix0 = ox_lo + kx - g.pad;
                            for (d, &s) in dst[ox_lo..ox_hi]
                                .iter_mut()
                                .zip(&src[ix0..ix0 + (ox_hi - ox_lo)])
                            {
                                *d = *d + wv * s;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                dst[ox] = dst[ox] + wv * src[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
            if let Some(b) = bias {
                let bv = b[c];
                for v in out.iter_mut() {
                    *v = *v + bv;
                }
            }
        }
    }
    y
}

pub fn depthwise_bwd<T: Element>(
    x: &[T],
    g: &ConvGeom,
    w: &[T],
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let ohw = g.out_plane();
    let mut dx = need_dx.then(|| vec![T::zero(); g.n * g.c_in * g.in_plane()]);
    let mut dw = need_dw.then(|| vec![T::zero(); g.c_in * g.k * g.k]);
    let mut db = need_db.then(|| vec![T::zero(); g.c_in]);
    for n in 0..g.n {
        for c in 0..g.c_in {
            let plane_off = (n * g.c_in + c) * g.in_plane();
            let dy_plane = &dy[(n * g.c_in + c) * ohw..(n * g.c_in + c + 1) * ohw];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let widx = (c * g.k + ky) * g.k + kx;
                    let wv = w[widx];
                    let (ox_lo, ox_hi) = valid_ox_range(g, kx);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let mut w_acc = T::zero();
                    for oy in 0..g.h_out {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let row = iy as usize * g.w;
                        let dy_row = &dy_plane[oy * g.w_out..(oy + 1) * g.w_out];
                        for ox in ox_lo..ox_hi {
                            let ix = ox * g.stride + kx - g.pad;
                            if need_dw {
                                w_acc = w_acc + x[plane_off + row + ix] * dy_row[ox];
                            }
                            if let Some(dx_buf) = dx.as_mut() {
                                dx_buf[plane_off + row + ix] =
                                    dx_buf[plane_off + row + ix] + wv * dy_row[ox];
                            }
                        }
                    }
                    if let Some(dw_buf) = dw.as_mut() {
                        dw_buf[widx] = dw_buf[widx] + w_acc;
                    }
                }
            }
            if let Some(db_buf) = db.as_mut() {
                let mut s = T::zero();
                for &v in dy_plane {
                    s = s + v;
                }
                db_buf[c] = db_buf[c] + s;
            }
        }
    }
    ConvGrads { dx, dw, db }
}

// ---------------------------------------------------------------------------
// Pointwise (1x1) convolution: a per-pixel channel GEMM
// ---------------------------------------------------------------------------

pub fn pointwise_fwd<T: Element>(x: &[T], g: &ConvGeom, w: &[T], bias: Option<&[T]>) -> Vec<T> {
    debug_assert_eq!(g.k, 1);
    debug_assert_eq!(g.h, g.h_out);
    debug_assert_eq!(g.w, g.w_out);
    let hw = g.in_plane();
    let mut y = vec![T::zero(); g.n * g.c_out * hw];
    for n in 0..g.n {
        let x_img = &x[n * g.c_in * hw..(n + 1) * g.c_in * hw];
        let y_img = &mut y[n * g.c_out * hw..(n + 1) * g.c_out * hw];
        gemm_nn(w, x_img, y_img, g.c_out, g.c_in, hw);
        if let Some(b) = bias {
            for c in 0..g.c_out {
                let bv = b[c];
                for v in &mut y_img[c * hw..(c + 1) * hw] {
                    *v = *v + bv;
                }
            }
        }
    }
    y
}

pub fn pointwise_bwd<T: Element>(
    x: &[T],
    g: &ConvGeom,
    w: &[T],
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let hw = g.in_plane();
    let mut dx = need_dx.then(|| vec![T::zero(); g.n * g.c_in * hw]);
    let mut dw = need_dw.then(|| vec![T::zero(); g.c_out * g.c_in]);
    let mut db = need_db.then(|| vec![T::zero(); g.c_out]);
    let w_t = need_dx.then(|| transpose(w, g.c_out, g.c_in));
    for n in 0..g.n {
        let dy_img = &dy[n * g.c_out * hw..(n + 1) * g.c_out * hw];
        if let Some(dw_buf) = dw.as_mut() {
            let x_img = &x[n * g.c_in * hw..(n + 1) * g.c_in * hw];
            gemm_nt(dy_img, x_img, dw_buf, g.c_out, hw, g.c_in);
        }
        if let Some(dx_buf) = dx.as_mut() {
            let dx_img = &mut dx_buf[n * g.c_in * hw..(n + 1) * g.c_in * hw];
            gemm_nn(w_t.as_ref().unwrap(), dy_img, dx_img, g.c_in, g.c_out, hw);
        }
        if let Some(db_buf) = db.as_mut() {
            for c in 0..g.c_out {
                let mut s = T::zero();
                for &v in &dy_img[c * hw..(c + 1) * hw] {
                    s = s + v;
                }
                db_buf[c] = db_buf[c] + s;
            }
        }
    }
    ConvGrads { dx, dw, db }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    /// Nested-loop reference convolution, deliberately independent of the
    /// im2col path above.
    fn conv_reference(x: &[f32], g: &ConvGeom, w: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
        let mut y = vec![0.0f32; g.n * g.c_out * g.h_out * g.w_out];
        for n in 0..g.n {
            for co in 0..g.c_out {
                for oy in 0..g.h_out {
                    for ox in 0..g.w_out {
                        let mut acc = 0.0f32;
                        for ci in 0..g.c_in {
                            for ky in 0..g.k {
                                for kx in 0..g.k {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0
                                        || ix < 0
                                        || iy >= g.h as isize
                                        || ix >= g.w as isize
                                    {
                                        continue;
                                    }
                                    let xi = ((n * g.c_in + ci) * g.h + iy as usize) * g.w
                                        + ix as usize;
                                    let wi = ((co * g.c_in + ci) * g.k + ky) * g.k + kx;
                                    acc += x[xi] * w[wi];
                                }
                            }
                        }
                        if let Some(b) = bias {
                            acc += b[co];
                        }
                        y[((n * g.c_out + co) * g.h_out + oy) * g.w_out + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn rel_close(a: &[f32], b: &[f32], tol: f32) -> bool {
        a.len() == b.len()
            && a.iter()
                .zip(b)
                .all(|(x, y)| (x - y).abs() <= tol * (1.0f32).max(x.abs()).max(y.abs()))
    }

    #[test]
    fn ones_kernel_sums_window() {
        let g = ConvGeom::new(&[1, 1, 3, 3], 1, 3, 1, 0).unwrap();
        let y = conv2d_fwd(&[1.0f32; 9], &g, &[1.0f32; 9], None);
        assert_eq!(y, vec![9.0]);
    }

    #[test]
    fn unit_1x1_kernel_is_identity() {
        let mut rng = Rng::from_seed(1);
        let x: Tensor<f32> = Tensor::randn(&[1, 1, 4, 4], &mut rng).unwrap();
        let g = ConvGeom::new(x.dims(), 1, 1, 1, 0).unwrap();
        let y = conv2d_fwd(x.data(), &g, &[1.0f32], None);
        assert_eq!(y, x.data());
    }

    #[test]
    fn matches_reference_with_padding() {
        let mut rng = Rng::from_seed(2);
        let x: Tensor<f32> = Tensor::randn(&[2, 3, 8, 8], &mut rng).unwrap();
        let w: Tensor<f32> = Tensor::randn(&[4, 3, 3, 3], &mut rng).unwrap();
        let b: Tensor<f32> = Tensor::randn(&[4], &mut rng).unwrap();
        let g = ConvGeom::new(x.dims(), 4, 3, 1, 1).unwrap();
        let fast = conv2d_fwd(x.data(), &g, w.data(), Some(b.data()));
        let slow = conv_reference(x.data(), &g, w.data(), Some(b.data()));
        assert!(rel_close(&fast, &slow, 1e-5));
    }

    #[test]
    fn strided_matches_reference() {
        let mut rng = Rng::from_seed(3);
        let x: Tensor<f32> = Tensor::randn(&[1, 2, 9, 9], &mut rng).unwrap();
        let w: Tensor<f32> = Tensor::randn(&[3, 2, 3, 3], &mut rng).unwrap();
        let g = ConvGeom::new(x.dims(), 3, 3, 2, 1).unwrap();
        let fast = conv2d_fwd(x.data(), &g, w.data(), None);
        let slow = conv_reference(x.data(), &g, w.data(), None);
        assert!(rel_close(&fast, &slow, 1e-5));
    }

    #[test]
    fn indivisible_stride_rejected() {
        assert!(ConvGeom::new(&[1, 1, 8, 8], 1, 3, 2, 0).is_err());
    }

    #[test]
    fn depthwise_scales_channels() {
        // K=1 weights [2, 3] double channel 0 and triple channel 1.
        let x = [1.0f32, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0];
        let g = ConvGeom::new(&[1, 2, 2, 2], 2, 1, 1, 0).unwrap();
        let y = depthwise_fwd(&x, &g, &[2.0, 3.0], None);
        assert_eq!(y, vec![2.0, 4.0, 6.0, 8.0, 30.0, 60.0, 90.0, 120.0]);
    }

    #[test]
    fn depthwise_equals_blockdiag_standard() {
        let mut rng = Rng::from_seed(4);
        let c = 3;
        let x: Tensor<f32> = Tensor::randn(&[2, c, 6, 6], &mut rng).unwrap();
        let wd: Tensor<f32> = Tensor::randn(&[c, 1, 3, 3], &mut rng).unwrap();
        let g = ConvGeom::new(x.dims(), c, 3, 1, 1).unwrap();
        let dw_out = depthwise_fwd(x.data(), &g, wd.data(), None);

        // Embed each per-channel kernel on the diagonal of a standard kernel.
        let mut w_std = vec![0.0f32; c * c * 9];
        for ch in 0..c {
            for t in 0..9 {
                w_std[(ch * c + ch) * 9 + t] = wd.data()[ch * 9 + t];
            }
        }
        let std_out = conv2d_fwd(x.data(), &g, &w_std, None);
        for (a, b) in dw_out.iter().zip(&std_out) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn pointwise_equals_conv2d() {
        let mut rng = Rng::from_seed(5);
        let x: Tensor<f32> = Tensor::randn(&[2, 3, 5, 5], &mut rng).unwrap();
        let w: Tensor<f32> = Tensor::randn(&[4, 3, 1, 1], &mut rng).unwrap();
        let g = ConvGeom::new(x.dims(), 4, 1, 1, 0).unwrap();
        let a = pointwise_fwd(x.data(), &g, w.data(), None);
        let b = conv2d_fwd(x.data(), &g, w.data(), None);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn pointwise_sums_channels() {
        // x[1,2,1,1] = [a, b], single output channel with weights [1, 1].
        let g = ConvGeom::new(&[1, 2, 1, 1], 1, 1, 1, 0).unwrap();
        let y = pointwise_fwd(&[5.0f32, 7.0], &g, &[1.0, 1.0], None);
        assert_eq!(y, vec![12.0]);
    }

    #[test]
    fn gemm_small_known_product() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let mut c = vec![0.0f32; 4];
        gemm_nn(&[1., 2., 3., 4.], &[5., 6., 7., 8.], &mut c, 2, 2, 2);
        assert_eq!(c, vec![19., 22., 43., 50.]);
        let mut ct = vec![0.0f32; 4];
        // B^T variant: B rows are columns of the effective right operand.
        gemm_nt(&[1., 2., 3., 4.], &[5., 7., 6., 8.], &mut ct, 2, 2, 2);
        assert_eq!(ct, vec![19., 22., 43., 50.]);
    }
}
