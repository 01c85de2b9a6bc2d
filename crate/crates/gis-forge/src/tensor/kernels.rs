//! Dense array kernels behind the tape operations.
//!
//! Convolutions run as im2col + one GEMM per call, with the batch folded
//! into the GEMM columns. Parallel work is split into fixed disjoint
//! regions (never a floating-point reduction), so results are
//! bit-deterministic regardless of thread count.

use ndarray::{ArrayD, IxDyn};

use super::ConvMeta;

/// Spatial padding (top, bottom, left, right).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pad4 {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Pad4 {
    pub const ZERO: Pad4 = Pad4 { top: 0, bottom: 0, left: 0, right: 0 };

    pub fn same(p: usize) -> Pad4 {
        Pad4 { top: p, bottom: p, left: p, right: p }
    }
}

fn conv_out_dim(input: usize, k: usize, pad0: usize, pad1: usize, stride: usize) -> usize {
    (input + pad0 + pad1 - k) / stride + 1
}

fn dims4(a: &ArrayD<f64>) -> (usize, usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 4, "expected 4-d tensor, got {:?}", s);
    (s[0], s[1], s[2], s[3])
}

#[derive(Clone, Copy)]
struct SendPtr(*mut f64);
unsafe impl Send for SendPtr {}
unsafe impl Sync for SendPtr {}

impl SendPtr {
    /// Method (not field) access so closures capture the whole wrapper.
    unsafe fn add(self, offset: usize) -> *mut f64 {
        self.0.add(offset)
    }
}

/// Fill rows of the `[K, B*P]` column matrix for one sample. Row layout:
/// `r = (ci*kh + u)*kw + v`; this sample's columns start at `col0`.
#[allow(clippy::too_many_arguments)]
fn im2col_sample(
    x: &[f64],
    ci_n: usize,
    h: usize,
    w: usize,
    meta: &ConvMeta,
    ho: usize,
    wo: usize,
    cols: &mut [f64],
    col_stride: usize,
    col0: usize,
) {
    let (kh, kw) = meta.k;
    let s = meta.stride;
    let (pt, pl) = (meta.pad.top as isize, meta.pad.left as isize);
    for ci in 0..ci_n {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for u in 0..kh {
            for v in 0..kw {
                let r = (ci * kh + u) * kw + v;
                let base = r * col_stride + col0;
                for ho_i in 0..ho {
                    let dst = &mut cols[base + ho_i * wo..base + (ho_i + 1) * wo];
                    let ih = (ho_i * s) as isize + u as isize - pt;
                    if ih < 0 || ih >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let row = &plane[ih as usize * w..(ih as usize + 1) * w];
                    // Valid output columns: 0 <= wo*s + v - pl < w.
                    let off = v as isize - pl;
                    let wo_lo = if off >= 0 { 0 } else { ((-off) as usize).div_ceil(s) };
                    let wo_hi_excl = {
                        // Largest wo with wo*s + off <= w-1.
                        let top = w as isize - 1 - off;
                        if top < 0 {
                            0
                        } else {
                            ((top as usize) / s + 1).min(wo)
                        }
                    };
                    let wo_lo = wo_lo.min(wo);
                    dst[..wo_lo].fill(0.0);
                    dst[wo_hi_excl..].fill(0.0);
                    if wo_lo >= wo_hi_excl {
                        continue;
                    }
                    if s == 1 {
                        let src0 = (wo_lo as isize + off) as usize;
                        dst[wo_lo..wo_hi_excl]
                            .copy_from_slice(&row[src0..src0 + (wo_hi_excl - wo_lo)]);
                    } else {
                        let mut src = (wo_lo as isize * s as isize + off) as usize;
                        for d in dst[wo_lo..wo_hi_excl].iter_mut() {
                            *d = row[src];
                            src += s;
                        }
                    }
                }
            }
        }
    }
}

/// Fill the full `[K, B*P]` column matrix, one sample per thread task.
fn im2col_batch(
    x: &[f64],
    b_n: usize,
    ci_n: usize,
    h: usize,
    w: usize,
    meta: &ConvMeta,
    ho: usize,
    wo: usize,
    cols: &mut [f64],
) {
    let p = ho * wo;
    let bp = b_n * p;
    let cols_ptr = SendPtr(cols.as_mut_ptr());
    let k_dim = ci_n * meta.k.0 * meta.k.1;
    rayon::scope(|sc| {
        for b in 0..b_n {
            let xb = &x[b * ci_n * h * w..(b + 1) * ci_n * h * w];
            let meta = *meta;
            sc.spawn(move |_| unsafe {
                let cols_slice = std::slice::from_raw_parts_mut(cols_ptr.add(0), k_dim * bp);
                im2col_sample(xb, ci_n, h, w, &meta, ho, wo, cols_slice, bp, b * p);
            });
        }
    });
}

/// One GEMM `C[M, N] = alpha * A[M, K] * B[K, N] (+ C)` with the N dimension
/// split into two fixed chunks. Splitting a non-reduction dimension keeps
/// every output element a single full-length dot product, so the split
/// cannot change results.
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_nsplit(
    m: usize,
    k: usize,
    n: usize,
    a: *const f64,
    rsa: isize,
    csa: isize,
    b: *const f64,
    rsb: isize,
    csb: isize,
    c: *mut f64,
    rsc: isize,
    csc: isize,
    beta: f64,
) {
    let half = n / 2;
    if half == 0 || n < 64 {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
        return;
    }
    let a_addr = a as usize;
    let b_addr = b as usize;
    let c_addr = c as usize;
    let parts = [(0usize, half), (half, n - half)];
    rayon::scope(|sc| {
        for &(start, len) in &parts {
            sc.spawn(move |_| {
                let a_ptr = a_addr as *const f64;
                let b_off = (b_addr as *const f64).offset(csb * start as isize);
                let c_off = (c_addr as *mut f64).offset(csc * start as isize);
                matrixmultiply::dgemm(m, k, len, 1.0, a_ptr, rsa, csa, b_off, rsb, csb, beta, c_off, rsc, csc);
            });
        }
    });
}

thread_local! {
    static COLS_BUF: std::cell::RefCell<Vec<f64>> = const { std::cell::RefCell::new(Vec::new()) };
    static TMP_BUF: std::cell::RefCell<Vec<f64>> = const { std::cell::RefCell::new(Vec::new()) };
}

fn with_scratch<R>(
    buf: &'static std::thread::LocalKey<std::cell::RefCell<Vec<f64>>>,
    len: usize,
    f: impl FnOnce(&mut [f64]) -> R,
) -> R {
    buf.with(|cell| {
        let mut guard = cell.borrow_mut();
        if guard.len() < len {
            guard.resize(len, 0.0);
        }
        f(&mut guard[..len])
    })
}

/// `x [B,Ci,H,W] * w [Co,Ci,kh,kw] -> [B,Co,Ho,Wo]`, zero padding.
pub fn conv2d(x: &ArrayD<f64>, w: &ArrayD<f64>, stride: usize, pad: Pad4) -> ArrayD<f64> {
    let (b_n, ci_n, h, wi) = dims4(x);
    let (co_n, ci_w, kh, kw) = dims4(w);
    assert_eq!(ci_n, ci_w, "conv2d channel mismatch: input {ci_n} vs weight {ci_w}");
    let meta = ConvMeta { stride, pad, in_hw: (h, wi), k: (kh, kw) };
    let ho = conv_out_dim(h, kh, pad.top, pad.bottom, stride);
    let wo = conv_out_dim(wi, kw, pad.left, pad.right, stride);
    let p = ho * wo;
    let bp = b_n * p;
    let k_dim = ci_n * kh * kw;

    let x_sl = x.as_slice().expect("conv2d: input not contiguous");
    let w_sl = w.as_slice().expect("conv2d: weight not contiguous");
    let mut out = ArrayD::zeros(IxDyn(&[b_n, co_n, ho, wo]));
    let out_sl = out.as_slice_mut().expect("conv2d: output not contiguous");

    with_scratch(&COLS_BUF, k_dim * bp, |cols| {
        im2col_batch(x_sl, b_n, ci_n, h, wi, &meta, ho, wo, cols);
        if b_n == 1 {
            // [Co, K] x [K, P] straight into the output.
            unsafe {
                gemm_nsplit(
                    co_n, k_dim, p,
                    w_sl.as_ptr(), k_dim as isize, 1,
                    cols.as_ptr(), p as isize, 1,
                    out_sl.as_mut_ptr(), p as isize, 1,
                    0.0,
                );
            }
        } else {
            with_scratch(&TMP_BUF, co_n * bp, |tmp| {
                unsafe {
                    gemm_nsplit(
                        co_n, k_dim, bp,
                        w_sl.as_ptr(), k_dim as isize, 1,
                        cols.as_ptr(), bp as isize, 1,
                        tmp.as_mut_ptr(), bp as isize, 1,
                        0.0,
                    );
                }
                // tmp[co, b*P + p] -> out[b, co, p]
                let out_ptr = SendPtr(out_sl.as_mut_ptr());
                let tmp_ref = &tmp[..];
                rayon::scope(|sc| {
                    for b in 0..b_n {
                        sc.spawn(move |_| unsafe {
                            for co in 0..co_n {
                                let src = &tmp_ref[co * bp + b * p..co * bp + (b + 1) * p];
                                let dst = out_ptr.add((b * co_n + co) * p);
                                std::ptr::copy_nonoverlapping(src.as_ptr(), dst, p);
                            }
                        });
                    }
                });
            });
        }
    });
    out
}

/// Permute `g [B, Co, P]` (contiguous) into `[Co, B*P]`.
fn batch_to_cols(g: &[f64], b_n: usize, co_n: usize, p: usize, out: &mut [f64]) {
    let bp = b_n * p;
    let out_ptr = SendPtr(out.as_mut_ptr());
    rayon::scope(|sc| {
        for b in 0..b_n {
            sc.spawn(move |_| unsafe {
                for co in 0..co_n {
                    let src = &g[(b * co_n + co) * p..(b * co_n + co + 1) * p];
                    let dst = out_ptr.add(co * bp + b * p);
                    std::ptr::copy_nonoverlapping(src.as_ptr(), dst, p);
                }
            });
        }
    });
}

/// Adjoint of [`conv2d`] w.r.t. its input: `g [B,Co,Ho,Wo] -> dx [B,Ci,H,W]`.
pub fn conv2d_input_grad(g: &ArrayD<f64>, w: &ArrayD<f64>, meta: ConvMeta) -> ArrayD<f64> {
    let (b_n, co_n, ho, wo) = dims4(g);
    let (co_w, ci_n, kh, kw) = dims4(w);
    assert_eq!(co_n, co_w, "conv2d_input_grad channel mismatch");
    assert_eq!((kh, kw), meta.k);
    let (h, wi) = meta.in_hw;
    let p = ho * wo;
    let bp = b_n * p;
    let k_dim = ci_n * kh * kw;
    let s = meta.stride;
    let (pt, pl) = (meta.pad.top as isize, meta.pad.left as isize);

    let g_sl = g.as_slice().expect("conv2d_input_grad: grad not contiguous");
    let w_sl = w.as_slice().expect("conv2d_input_grad: weight not contiguous");
    let mut dx = ArrayD::zeros(IxDyn(&[b_n, ci_n, h, wi]));
    let dx_sl = dx.as_slice_mut().expect("dx not contiguous");

    with_scratch(&COLS_BUF, k_dim * bp, |cols| {
        // cols [K, B*P] = W^T [K, Co] * G [Co, B*P]
        if b_n == 1 {
            unsafe {
                gemm_nsplit(
                    k_dim, co_n, p,
                    w_sl.as_ptr(), 1, k_dim as isize,
                    g_sl.as_ptr(), p as isize, 1,
                    cols.as_mut_ptr(), p as isize, 1,
                    0.0,
                );
            }
        } else {
            with_scratch(&TMP_BUF, co_n * bp, |g2| {
                batch_to_cols(g_sl, b_n, co_n, p, g2);
                unsafe {
                    gemm_nsplit(
                        k_dim, co_n, bp,
                        w_sl.as_ptr(), 1, k_dim as isize,
                        g2.as_ptr(), bp as isize, 1,
                        cols.as_mut_ptr(), bp as isize, 1,
                        0.0,
                    );
                }
            });
        }

        // col2im accumulate, parallel over samples (disjoint dx regions).
        let dx_ptr = SendPtr(dx_sl.as_mut_ptr());
        let cols_ref = &cols[..];
        rayon::scope(|sc| {
            for b in 0..b_n {
                sc.spawn(move |_| unsafe {
                    let dxb = std::slice::from_raw_parts_mut(dx_ptr.add(b * ci_n * h * wi), ci_n * h * wi);
                    for ci in 0..ci_n {
                        let plane = &mut dxb[ci * h * wi..(ci + 1) * h * wi];
                        for u in 0..kh {
                            for v in 0..kw {
                                let r = (ci * kh + u) * kw + v;
                                let row = &cols_ref[r * bp + b * p..r * bp + (b + 1) * p];
                                let off = v as isize - pl;
                                for ho_i in 0..ho {
                                    let ih = (ho_i * s) as isize + u as isize - pt;
                                    if ih < 0 || ih >= h as isize {
                                        continue;
                                    }
                                    let dst_row = &mut plane[ih as usize * wi..(ih as usize + 1) * wi];
                                    let src = &row[ho_i * wo..(ho_i + 1) * wo];
                                    let wo_lo = if off >= 0 { 0 } else { ((-off) as usize).div_ceil(s) };
                                    let top = wi as isize - 1 - off;
                                    let wo_hi = if top < 0 { 0 } else { ((top as usize) / s + 1).min(wo) };
                                    let wo_lo = wo_lo.min(wo);
                                    if wo_lo >= wo_hi {
                                        continue;
                                    }
                                    if s == 1 {
                                        let d0 = (wo_lo as isize + off) as usize;
                                        for (d, v2) in dst_row[d0..]
                                            .iter_mut()
                                            .zip(&src[wo_lo..wo_hi])
                                        {
                                            *d += *v2;
                                        }
                                    } else {
                                        let mut di = (wo_lo as isize * s as isize + off) as usize;
                                        for v2 in &src[wo_lo..wo_hi] {
                                            dst_row[di] += *v2;
                                            di += s;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
        });
    });
    dx
}

/// Adjoint of [`conv2d`] w.r.t. its weights: `(x, g) -> dw [Co,Ci,kh,kw]`.
pub fn conv2d_weight_grad(x: &ArrayD<f64>, g: &ArrayD<f64>, meta: ConvMeta) -> ArrayD<f64> {
    let (b_n, ci_n, h, wi) = dims4(x);
    let (b_g, co_n, ho, wo) = dims4(g);
    assert_eq!(b_n, b_g, "conv2d_weight_grad batch mismatch");
    let (kh, kw) = meta.k;
    let p = ho * wo;
    let bp = b_n * p;
    let k_dim = ci_n * kh * kw;

    let x_sl = x.as_slice().expect("x not contiguous");
    let g_sl = g.as_slice().expect("g not contiguous");
    let mut dw = ArrayD::zeros(IxDyn(&[co_n, ci_n, kh, kw]));
    let dw_sl = dw.as_slice_mut().expect("dw not contiguous");

    with_scratch(&COLS_BUF, k_dim * bp, |cols| {
        im2col_batch(x_sl, b_n, ci_n, h, wi, &meta, ho, wo, cols);
        let run = |g2: &[f64], dw_sl: &mut [f64], cols: &[f64]| {
            // dw [Co, K] = G [Co, B*P] * cols^T [B*P, K]. The reduction over
            // B*P stays inside single GEMM calls; the split is over K.
            unsafe {
                gemm_nsplit(
                    co_n, bp, k_dim,
                    g2.as_ptr(), bp as isize, 1,
                    cols.as_ptr(), 1, bp as isize,
                    dw_sl.as_mut_ptr(), k_dim as isize, 1,
                    0.0,
                );
            }
        };
        if b_n == 1 {
            run(g_sl, dw_sl, cols);
        } else {
            with_scratch(&TMP_BUF, co_n * bp, |g2| {
                batch_to_cols(g_sl, b_n, co_n, p, g2);
                run(g2, dw_sl, cols);
            });
        }
    });
    dw
}

pub fn sum_axes_keep(a: &ArrayD<f64>, axes: &[usize]) -> ArrayD<f64> {
    let mut out = a.to_owned();
    for &ax in axes {
        let collapsed = out.sum_axis(ndarray::Axis(ax));
        out = collapsed.insert_axis(ndarray::Axis(ax));
    }
    out
}

pub fn slice_axis(a: &ArrayD<f64>, axis: usize, start: usize, len: usize) -> ArrayD<f64> {
    a.slice_axis(ndarray::Axis(axis), ndarray::Slice::from(start..start + len)).to_owned()
}

pub fn embed_axis(a: &ArrayD<f64>, axis: usize, start: usize, full: usize) -> ArrayD<f64> {
    let mut shape = a.shape().to_vec();
    let len = shape[axis];
    assert!(start + len <= full, "embed_axis out of range");
    shape[axis] = full;
    let mut out = ArrayD::zeros(IxDyn(&shape));
    out.slice_axis_mut(ndarray::Axis(axis), ndarray::Slice::from(start..start + len))
        .assign(a);
    out
}

pub fn pad_circular(a: &ArrayD<f64>, pad: Pad4) -> ArrayD<f64> {
    let (b_n, c_n, h, w) = dims4(a);
    let (ho, wo) = (h + pad.top + pad.bottom, w + pad.left + pad.right);
    let mut out = ArrayD::zeros(IxDyn(&[b_n, c_n, ho, wo]));
    let src = a.as_slice().expect("contiguous");
    let dst = out.as_slice_mut().expect("contiguous");
    for bc in 0..b_n * c_n {
        let sp = &src[bc * h * w..(bc + 1) * h * w];
        let dp = &mut dst[bc * ho * wo..(bc + 1) * ho * wo];
        for i in 0..ho {
            let ih = ((i as isize - pad.top as isize).rem_euclid(h as isize)) as usize;
            for j in 0..wo {
                let iw = ((j as isize - pad.left as isize).rem_euclid(w as isize)) as usize;
                dp[i * wo + j] = sp[ih * w + iw];
            }
        }
    }
    out
}

pub fn pad_circular_adjoint(g: &ArrayD<f64>, pad: Pad4) -> ArrayD<f64> {
    let (b_n, c_n, ho, wo) = dims4(g);
    let h = ho - pad.top - pad.bottom;
    let w = wo - pad.left - pad.right;
    let mut out = ArrayD::zeros(IxDyn(&[b_n, c_n, h, w]));
    let src = g.as_slice().expect("contiguous");
    let dst = out.as_slice_mut().expect("contiguous");
    for bc in 0..b_n * c_n {
        let sp = &src[bc * ho * wo..(bc + 1) * ho * wo];
        let dp = &mut dst[bc * h * w..(bc + 1) * h * w];
        for i in 0..ho {
            let ih = ((i as isize - pad.top as isize).rem_euclid(h as isize)) as usize;
            for j in 0..wo {
                let iw = ((j as isize - pad.left as isize).rem_euclid(w as isize)) as usize;
                dp[ih * w + iw] += sp[i * wo + j];
            }
        }
    }
    out
}

pub fn avg_pool2(a: &ArrayD<f64>, f: usize) -> ArrayD<f64> {
    let (b_n, c_n, h, w) = dims4(a);
    assert!(h % f == 0 && w % f == 0, "avg_pool2: {h}x{w} not divisible by {f}");
    let (ho, wo) = (h / f, w / f);
    let inv = 1.0 / (f * f) as f64;
    let mut out = ArrayD::zeros(IxDyn(&[b_n, c_n, ho, wo]));
    let src = a.as_slice().expect("contiguous");
    let dst = out.as_slice_mut().expect("contiguous");
    for bc in 0..b_n * c_n {
        let sp = &src[bc * h * w..(bc + 1) * h * w];
        let dp = &mut dst[bc * ho * wo..(bc + 1) * ho * wo];
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = 0.0;
                for u in 0..f {
                    let row = &sp[(i * f + u) * w + j * f..(i * f + u) * w + j * f + f];
                    for &v in row {
                        acc += v;
                    }
                }
                dp[i * wo + j] = acc * inv;
            }
        }
    }
    out
}

pub fn avg_pool2_adjoint(g: &ArrayD<f64>, f: usize) -> ArrayD<f64> {
    let (b_n, c_n, ho, wo) = dims4(g);
    let (h, w) = (ho * f, wo * f);
    let inv = 1.0 / (f * f) as f64;
    let mut out = ArrayD::zeros(IxDyn(&[b_n, c_n, h, w]));
    let src = g.as_slice().expect("contiguous");
    let dst = out.as_slice_mut().expect("contiguous");
    for bc in 0..b_n * c_n {
        let sp = &src[bc * ho * wo..(bc + 1) * ho * wo];
        let dp = &mut dst[bc * h * w..(bc + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                dp[i * w + j] = sp[(i / f) * wo + j / f] * inv;
            }
        }
    }
    out
}

/// Taps for 2x bilinear upsampling (half-pixel centers, edges clamped):
/// output index `2j` mixes `0.25*x[j-1] + 0.75*x[j]`, `2j+1` mixes
/// `0.75*x[j] + 0.25*x[j+1]`.
fn up2_taps(o: usize, n_in: usize) -> ((usize, f64), (usize, f64)) {
    let j = o / 2;
    if o % 2 == 0 {
        let left = j.saturating_sub(1);
        if j == 0 {
            ((0, 1.0), (0, 0.0))
        } else {
            ((left, 0.25), (j, 0.75))
        }
    } else {
        let right = (j + 1).min(n_in - 1);
        if right == j {
            ((j, 1.0), (j, 0.0))
        } else {
            ((j, 0.75), (right, 0.25))
        }
    }
}

pub fn upsample_bilinear2(a: &ArrayD<f64>) -> ArrayD<f64> {
    let (b_n, c_n, h, w) = dims4(a);
    let (ho, wo) = (h * 2, w * 2);
    let mut out = ArrayD::zeros(IxDyn(&[b_n, c_n, ho, wo]));
    let src = a.as_slice().expect("contiguous");
    let dst = out.as_slice_mut().expect("contiguous");
    for bc in 0..b_n * c_n {
        let sp = &src[bc * h * w..(bc + 1) * h * w];
        let dp = &mut dst[bc * ho * wo..(bc + 1) * ho * wo];
        for oi in 0..ho {
            let ((i0, wi0), (i1, wi1)) = up2_taps(oi, h);
            for oj in 0..wo {
                let ((j0, wj0), (j1, wj1)) = up2_taps(oj, w);
                dp[oi * wo + oj] = wi0 * (wj0 * sp[i0 * w + j0] + wj1 * sp[i0 * w + j1])
                    + wi1 * (wj0 * sp[i1 * w + j0] + wj1 * sp[i1 * w + j1]);
            }
        }
    }
    out
}

pub fn upsample_bilinear2_adjoint(g: &ArrayD<f64>) -> ArrayD<f64> {
    let (b_n, c_n, ho, wo) = dims4(g);
    let (h, w) = (ho / 2, wo / 2);
    let mut out = ArrayD::zeros(IxDyn(&[b_n, c_n, h, w]));
    let src = g.as_slice().expect("contiguous");
    let dst = out.as_slice_mut().expect("contiguous");
    for bc in 0..b_n * c_n {
        let sp = &src[bc * ho * wo..(bc + 1) * ho * wo];
        let dp = &mut dst[bc * h * w..(bc + 1) * h * w];
        for oi in 0..ho {
            let ((i0, wi0), (i1, wi1)) = up2_taps(oi, h);
            for oj in 0..wo {
                let ((j0, wj0), (j1, wj1)) = up2_taps(oj, w);
                let v = sp[oi * wo + oj];
                dp[i0 * w + j0] += wi0 * wj0 * v;
                dp[i0 * w + j1] += wi0 * wj1 * v;
                dp[i1 * w + j0] += wi1 * wj0 * v;
                dp[i1 * w + j1] += wi1 * wj1 * v;
            }
        }
    }
    out
}
