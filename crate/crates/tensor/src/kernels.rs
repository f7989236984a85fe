//! Raw f64 kernels shared by the graph ops: GEMM wrappers, im2col convolution,
//! and the pooling/upsampling loops. Everything is single-threaded and
//! deterministic.

/// c = alpha * a(m,k) * b(k,n) + beta * c, all row-major.
pub fn gemm_nn(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, alpha,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// c = alpha * a(m,k) * b(n,k)^T + beta * c.
pub fn gemm_nt(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, alpha,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// c = alpha * a(k,m)^T * b(k,n) + beta * c.
pub fn gemm_tn(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, alpha,
            a.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub c_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn new(c_in: usize, c_out: usize, kh: usize, kw: usize, h: usize, w: usize, stride: usize, pad: usize) -> Self {
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "kernel larger than padded input");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        ConvDims { c_in, c_out, kh, kw, h, w, oh, ow, stride, pad }
    }
}

/// Unfold one image [C,H,W] into cols [C*kh*kw, OH*OW].
pub fn im2col(x: &[f64], d: &ConvDims, cols: &mut [f64]) {
    let ckk = d.c_in * d.kh * d.kw;
    let spatial = d.oh * d.ow;
    debug_assert_eq!(cols.len(), ckk * spatial);
    debug_assert_eq!(x.len(), d.c_in * d.h * d.w);
    for c in 0..d.c_in {
        let xc = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let out = &mut cols[row * spatial..(row + 1) * spatial];
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ki) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        for ox in 0..d.ow {
                            out[oy * d.ow + ox] = 0.0;
                        }
                        continue;
                    }
                    let xrow = &xc[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for ox in 0..d.ow {
                        let ix = (ox * d.stride + kj) as isize - d.pad as isize;
                        out[oy * d.ow + ox] = if ix < 0 || ix >= d.w as isize {
                            0.0
                        } else {
                            xrow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Fold cols [C*kh*kw, OH*OW] back into an image gradient, accumulating.
pub fn col2im_acc(cols: &[f64], d: &ConvDims, dx: &mut [f64]) {
    let spatial = d.oh * d.ow;
    debug_assert_eq!(dx.len(), d.c_in * d.h * d.w);
    for c in 0..d.c_in {
        let dxc = &mut dx[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let src = &cols[row * spatial..(row + 1) * spatial];
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ki) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let base = iy as usize * d.w;
                    for ox in 0..d.ow {
                        let ix = (ox * d.stride + kj) as isize - d.pad as isize;
                        if ix >= 0 && ix < d.w as isize {
                            dxc[base + ix as usize] += src[oy * d.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched conv forward. x [B,C,H,W], w [O,C,kh,kw], b optional [O], y [B,O,OH,OW].
pub fn conv2d_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, d: &ConvDims, batch: usize, y: &mut [f64], cols: &mut [f64]) {
    let ckk = d.c_in * d.kh * d.kw;
    let spatial = d.oh * d.ow;
    let in_stride = d.c_in * d.h * d.w;
    let out_stride = d.c_out * spatial;
    for bi in 0..batch {
        im2col(&x[bi * in_stride..(bi + 1) * in_stride], d, cols);
        let yb = &mut y[bi * out_stride..(bi + 1) * out_stride];
        gemm_nn(d.c_out, ckk, spatial, 1.0, w, cols, 0.0, yb);
        if let Some(bias) = b {
            for o in 0..d.c_out {
                let v = bias[o];
                for s in &mut yb[o * spatial..(o + 1) * spatial] {
                    *s += v;
                }
            }
        }
    }
}

/// Batched conv backward. Accumulates into dx, dw and db.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    d: &ConvDims,
    batch: usize,
    mut dx: Option<&mut [f64]>,
    dw: &mut [f64],
    mut db: Option<&mut [f64]>,
    cols: &mut [f64],
    dcols: &mut [f64],
) {
    let ckk = d.c_in * d.kh * d.kw;
    let spatial = d.oh * d.ow;
    let in_stride = d.c_in * d.h * d.w;
    let out_stride = d.c_out * spatial;
    for bi in 0..batch {
        let dyb = &dy[bi * out_stride..(bi + 1) * out_stride];
        im2col(&x[bi * in_stride..(bi + 1) * in_stride], d, cols);
        // dw += dy_b * cols^T
        gemm_nt(d.c_out, spatial, ckk, 1.0, dyb, cols, 1.0, dw);
        if let Some(ref mut db) = db {
            for o in 0..d.c_out {
                db[o] += dyb[o * spatial..(o + 1) * spatial].iter().sum::<f64>();
            }
        }
        if let Some(ref mut dx) = dx {
            // dcols = w^T * dy_b, then fold back
            gemm_tn(ckk, d.c_out, spatial, 1.0, w, dyb, 0.0, dcols);
            col2im_acc(dcols, d, &mut dx[bi * in_stride..(bi + 1) * in_stride]);
        }
    }
}

/// y[b,c,2i+di,2j+dj] = x[b,c,i,j]
pub fn upsample_nearest2x(x: &[f64], b: usize, c: usize, h: usize, w: usize, y: &mut [f64]) {
    let (oh, ow) = (2 * h, 2 * w);
    for bc in 0..b * c {
        let xs = &x[bc * h * w..(bc + 1) * h * w];
        let ys = &mut y[bc * oh * ow..(bc + 1) * oh * ow];
        for i in 0..h {
            for j in 0..w {
                let v = xs[i * w + j];
                let r0 = 2 * i * ow + 2 * j;
                ys[r0] = v;
                ys[r0 + 1] = v;
                ys[r0 + ow] = v;
                ys[r0 + ow + 1] = v;
            }
        }
    }
}

pub fn upsample_nearest2x_backward(dy: &[f64], b: usize, c: usize, h: usize, w: usize, dx: &mut [f64]) {
    let ow = 2 * w;
    for bc in 0..b * c {
        let dys = &dy[bc * 4 * h * w..(bc + 1) * 4 * h * w];
        let dxs = &mut dx[bc * h * w..(bc + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let r0 = 2 * i * ow + 2 * j;
                dxs[i * w + j] += dys[r0] + dys[r0 + 1] + dys[r0 + ow] + dys[r0 + ow + 1];
            }
        }
    }
}

pub fn avg_pool2d(x: &[f64], b: usize, c: usize, h: usize, w: usize, k: usize, y: &mut [f64]) {
    assert!(h % k == 0 && w % k == 0, "pool size {} must divide {}x{}", k, h, w);
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    for bc in 0..b * c {
        let xs = &x[bc * h * w..(bc + 1) * h * w];
        let ys = &mut y[bc * oh * ow..(bc + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let mut s = 0.0;
                for di in 0..k {
                    for dj in 0..k {
                        s += xs[(i * k + di) * w + (j * k + dj)];
                    }
                }
                ys[i * ow + j] = s * inv;
            }
        }
    }
}

pub fn avg_pool2d_backward(dy: &[f64], b: usize, c: usize, h: usize, w: usize, k: usize, dx: &mut [f64]) {
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    for bc in 0..b * c {
        let dys = &dy[bc * oh * ow..(bc + 1) * oh * ow];
        let dxs = &mut dx[bc * h * w..(bc + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let g = dys[i * ow + j] * inv;
                for di in 0..k {
                    for dj in 0..k {
                        dxs[(i * k + di) * w + (j * k + dj)] += g;
                    }
                }
            }
        }
    }
}

/// Softmax over contiguous rows of length `d`.
pub fn softmax_rows(x: &[f64], d: usize, y: &mut [f64]) {
    debug_assert_eq!(x.len() % d, 0);
    for (xr, yr) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)) {
        let m = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (xi, yi) in xr.iter().zip(yr.iter_mut()) {
            let e = (xi - m).exp();
            *yi = e;
            z += e;
        }
        let inv = 1.0 / z;
        for yi in yr.iter_mut() {
            *yi *= inv;
        }
    }
}
