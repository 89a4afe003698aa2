//! Raw array kernels used by the graph ops. All buffers are NCHW, row-major.

use crate::tensor::{gemm, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        let eh = self.dilation * (self.kh - 1) + 1;
        let ew = self.dilation * (self.kw - 1) + 1;
        ((self.h - eh) / self.stride + 1, (self.w - ew) / self.stride + 1)
    }

    fn is_direct(&self) -> bool {
        self.stride == 1 && !self.is_pointwise()
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let (s, d) = (g.stride, g.dilation);
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = oy * s + ky * d;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let out = &mut dst[oy * wo..(oy + 1) * wo];
                    if s == 1 {
                        out.copy_from_slice(&src[kx * d..kx * d + wo]);
                    } else {
                        for (ox, o) in out.iter_mut().enumerate() {
                            *o = src[ox * s + kx * d];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let (s, d) = (g.stride, g.dilation);
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = oy * s + ky * d;
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let inp = &src[oy * wo..(oy + 1) * wo];
                    for (ox, &v) in inp.iter().enumerate() {
                        let ix = ox * s + kx * d;
                        dst[ix] = dst[ix] + v;
                    }
                }
            }
        }
    }
}

#[inline(always)]
fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

#[inline(always)]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] = acc[i] + x[i] * y[i];
        }
    }
    let mut s = ra.iter().zip(rb).fold(T::zero(), |s, (&x, &y)| s + x * y);
    for v in acc {
        s = s + v;
    }
    s
}

/// Stride-1 spatial convolution as row-wise multiply-adds. Cheaper than
/// im2col + gemm at the small channel counts used here.
fn direct_forward<T: Real>(xb: &[T], g: &ConvGeom, weight: &[T], cout: usize, ob: &mut [T]) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime
        return unsafe { direct_forward_avx2(xb, g, weight, cout, ob) };
    }
    direct_forward_impl(xb, g, weight, cout, ob)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn direct_forward_avx2<T: Real>(xb: &[T], g: &ConvGeom, weight: &[T], cout: usize, ob: &mut [T]) {
    direct_forward_impl(xb, g, weight, cout, ob)
}

#[inline(always)]
fn direct_forward_impl<T: Real>(xb: &[T], g: &ConvGeom, weight: &[T], cout: usize, ob: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let d = g.dilation;
    for co in 0..cout {
        let oplane = &mut ob[co * ho * wo..(co + 1) * ho * wo];
        for ci in 0..g.cin {
            let plane = &xb[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = weight[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                    for oy in 0..ho {
                        let src = &plane[(oy + ky * d) * g.w + kx * d..][..wo];
                        axpy(&mut oplane[oy * wo..(oy + 1) * wo], wv, src);
                    }
                }
            }
        }
    }
}

fn direct_backward<T: Real>(
    xb: &[T],
    g: &ConvGeom,
    weight: &[T],
    cout: usize,
    dyb: &[T],
    dxb: Option<&mut [T]>,
    dw: Option<&mut [T]>,
) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime
        return unsafe { direct_backward_avx2(xb, g, weight, cout, dyb, dxb, dw) };
    }
    direct_backward_impl(xb, g, weight, cout, dyb, dxb, dw)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn direct_backward_avx2<T: Real>(
    xb: &[T],
    g: &ConvGeom,
    weight: &[T],
    cout: usize,
    dyb: &[T],
    dxb: Option<&mut [T]>,
    dw: Option<&mut [T]>,
) {
    direct_backward_impl(xb, g, weight, cout, dyb, dxb, dw)
}

#[inline(always)]
fn direct_backward_impl<T: Real>(
    xb: &[T],
    g: &ConvGeom,
    weight: &[T],
    cout: usize,
    dyb: &[T],
    mut dxb: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let (ho, wo) = g.out_hw();
    let d = g.dilation;
    for co in 0..cout {
        let dplane = &dyb[co * ho * wo..(co + 1) * ho * wo];
        for ci in 0..g.cin {
            let off = ci * g.h * g.w;
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wi = ((co * g.cin + ci) * g.kh + ky) * g.kw + kx;
                    if let Some(dw) = dw.as_deref_mut() {
                        let plane = &xb[off..off + g.h * g.w];
                        let mut acc = T::zero();
                        for oy in 0..ho {
                            acc = acc + dot(&dplane[oy * wo..(oy + 1) * wo], &plane[(oy + ky * d) * g.w + kx * d..][..wo]);
                        }
                        dw[wi] = dw[wi] + acc;
                    }
                    if let Some(dx) = dxb.as_deref_mut() {
                        let plane = &mut dx[off..off + g.h * g.w];
                        let wv = weight[wi];
                        for oy in 0..ho {
                            axpy(&mut plane[(oy + ky * d) * g.w + kx * d..][..wo], wv, &dplane[oy * wo..(oy + 1) * wo]);
                        }
                    }
                }
            }
        }
    }
}

/// Valid (unpadded) strided, dilated convolution.
pub fn conv2d_forward<T: Real>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    weight: &[T],
    cout: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let k = g.patch_len();
    let in_len = g.cin * g.h * g.w;
    let mut out = vec![T::zero(); n * cout * p];
    let mut cols = if g.is_pointwise() || g.is_direct() { Vec::new() } else { vec![T::zero(); k * p] };
    for b in 0..n {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let ob = &mut out[b * cout * p..(b + 1) * cout * p];
        if let Some(bias) = bias {
            for (co, chunk) in ob.chunks_mut(p).enumerate() {
                chunk.fill(bias[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        if g.is_direct() {
            direct_forward(xb, g, weight, cout, ob);
        } else if g.is_pointwise() {
            gemm(false, false, cout, p, k, weight, xb, beta, ob);
        } else {
            im2col(xb, g, &mut cols);
            gemm(false, false, cout, p, k, weight, &cols, beta, ob);
        }
    }
    out
}

/// Gradients of [`conv2d_forward`]. Each output buffer is only filled when requested.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    weight: &[T],
    cout: usize,
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let k = g.patch_len();
    let in_len = g.cin * g.h * g.w;
    let pointwise = g.is_pointwise();
    let direct = g.is_direct();
    let mut cols = if pointwise || direct { Vec::new() } else { vec![T::zero(); k * p] };
    let mut dcols = if pointwise || direct { Vec::new() } else { vec![T::zero(); k * p] };
    for b in 0..n {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let dyb = &dy[b * cout * p..(b + 1) * cout * p];
        if let Some(db) = db.as_deref_mut() {
            for (co, chunk) in dyb.chunks(p).enumerate() {
                db[co] = db[co] + chunk.iter().copied().sum::<T>();
            }
        }
        if direct {
            let dxb = dx.as_deref_mut().map(|dx| &mut dx[b * in_len..(b + 1) * in_len]);
            direct_backward(xb, g, weight, cout, dyb, dxb, dw.as_deref_mut());
            continue;
        }
        if let Some(dw) = dw.as_deref_mut() {
            if pointwise {
                gemm(false, true, cout, k, p, dyb, xb, T::one(), dw);
            } else {
                im2col(xb, g, &mut cols);
                gemm(false, true, cout, k, p, dyb, &cols, T::one(), dw);
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            if pointwise {
                gemm(true, false, k, p, cout, weight, dyb, T::one(), dxb);
            } else {
                gemm(true, false, k, p, cout, weight, dyb, T::zero(), &mut dcols);
                col2im(&dcols, g, dxb);
            }
        }
    }
}

/// Pads width by wrapping columns and height by replicating edge rows.
pub fn circular_pad_forward<T: Copy>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    ph: usize,
    pw: usize,
) -> Vec<T> {
    let (oh, ow) = (h + 2 * ph, w + 2 * pw);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for pl in 0..planes {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        for oy in 0..oh {
            let iy = oy.saturating_sub(ph).min(h - 1);
            let row = &src[iy * w..(iy + 1) * w];
            // columns [-pw, w + pw) taken modulo w
            for ox in 0..ow {
                out.push(row[(ox + w * (pw / w + 1) - pw) % w]);
            }
        }
    }
    out
}

pub fn circular_pad_backward<T: Real>(
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    ph: usize,
    pw: usize,
    dx: &mut [T],
) {
    let (oh, ow) = (h + 2 * ph, w + 2 * pw);
    for pl in 0..planes {
        let src = &dy[pl * oh * ow..(pl + 1) * oh * ow];
        let dst = &mut dx[pl * h * w..(pl + 1) * h * w];
        for oy in 0..oh {
            let iy = oy.saturating_sub(ph).min(h - 1);
            for ox in 0..ow {
                let ix = (ox + w * (pw / w + 1) - pw) % w;
                dst[iy * w + ix] = dst[iy * w + ix] + src[oy * ow + ox];
            }
        }
    }
}

/// Per-plane normalization; returns `(xhat, inv_std)`.
pub fn instance_norm_forward<T: Real>(x: &[T], planes: usize, hw: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let mut out = vec![T::zero(); x.len()];
    let mut inv = Vec::with_capacity(planes);
    let count = T::lit(hw as f64);
    for pl in 0..planes {
        let src = &x[pl * hw..(pl + 1) * hw];
        let mean = src.iter().copied().sum::<T>() / count;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
        let istd = T::one() / (var + eps).sqrt();
        for (o, &v) in out[pl * hw..(pl + 1) * hw].iter_mut().zip(src) {
            *o = (v - mean) * istd;
        }
        inv.push(istd);
    }
    (out, inv)
}

pub fn instance_norm_backward<T: Real>(
    xhat: &[T],
    inv_std: &[T],
    dy: &[T],
    hw: usize,
    dx: &mut [T],
) {
    let count = T::lit(hw as f64);
    for (pl, &istd) in inv_std.iter().enumerate() {
        let r = pl * hw..(pl + 1) * hw;
        let (xh, g) = (&xhat[r.clone()], &dy[r.clone()]);
        let sum_g: T = g.iter().copied().sum();
        let sum_gx: T = g.iter().zip(xh).map(|(&a, &b)| a * b).sum();
        for ((d, &gi), &xi) in dx[r].iter_mut().zip(g).zip(xh) {
            *d = *d + istd / count * (count * gi - sum_g - xi * sum_gx);
        }
    }
}
