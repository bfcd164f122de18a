//! Slice-level numeric kernels shared by the tape's forward and backward
//! passes. Feature maps are row-major `H x W x C`; convolution kernels are
//! `KH x KW x C_in x C_out`.

use crate::tensor::Scalar;

/// Dot product with eight independent accumulators so the reduction
/// vectorizes. Summation order is fixed, so results are reproducible.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub ci: usize,
    pub kh: usize,
    pub kw: usize,
    pub co: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w - self.kw) / self.stride + 1
    }
}

pub fn conv2d_forward<T: Scalar>(
    g: ConvGeom,
    input: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let (ho, wo) = (g.out_h(), g.out_w());
    debug_assert_eq!(out.len(), ho * wo * g.co);
    for oy in 0..ho {
        for ox in 0..wo {
            let o = &mut out[(oy * wo + ox) * g.co..][..g.co];
            match bias {
                Some(b) => o.copy_from_slice(b),
                None => o.fill(T::zero()),
            }
            for ky in 0..g.kh {
                let iy = oy * g.stride + ky;
                for kx in 0..g.kw {
                    let ix = ox * g.stride + kx;
                    let pix = &input[(iy * g.w + ix) * g.ci..][..g.ci];
                    let kbase = &kernel[(ky * g.kw + kx) * g.ci * g.co..][..g.ci * g.co];
                    for (c, &v) in pix.iter().enumerate() {
                        axpy(v, &kbase[c * g.co..][..g.co], o);
                    }
                }
            }
        }
    }
}

/// Accumulates input, kernel and bias gradients of a valid strided
/// convolution given the output gradient.
pub fn conv2d_backward<T: Scalar>(
    g: ConvGeom,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    mut grad_input: Option<&mut [T]>,
    mut grad_kernel: Option<&mut [T]>,
    mut grad_bias: Option<&mut [T]>,
) {
    let (ho, wo) = (g.out_h(), g.out_w());
    for oy in 0..ho {
        for ox in 0..wo {
            let go = &grad_out[(oy * wo + ox) * g.co..][..g.co];
            if let Some(gb) = grad_bias.as_deref_mut() {
                axpy(T::one(), go, gb);
            }
            for ky in 0..g.kh {
                let iy = oy * g.stride + ky;
                for kx in 0..g.kw {
                    let ix = ox * g.stride + kx;
                    let pbase = (iy * g.w + ix) * g.ci;
                    let kbase = (ky * g.kw + kx) * g.ci * g.co;
                    for c in 0..g.ci {
                        let krange = kbase + c * g.co..kbase + (c + 1) * g.co;
                        if let Some(gi) = grad_input.as_deref_mut() {
                            gi[pbase + c] += dot(&kernel[krange.clone()], go);
                        }
                        if let Some(gk) = grad_kernel.as_deref_mut() {
                            axpy(input[pbase + c], go, &mut gk[krange]);
                        }
                    }
                }
            }
        }
    }
}

/// Sliding full dot product of an `n x n x C` template over an
/// `H x W x C` map. Output is `(H-n+1) x (W-n+1)`.
pub fn xcorr_forward<T: Scalar>(
    h: usize,
    w: usize,
    c: usize,
    n: usize,
    search: &[T],
    template: &[T],
    out: &mut [T],
) {
    let (ho, wo) = (h - n + 1, w - n + 1);
    let row = n * c;
    for oy in 0..ho {
        for ox in 0..wo {
            let mut acc = T::zero();
            for ky in 0..n {
                let s = &search[((oy + ky) * w + ox) * c..][..row];
                acc += dot(s, &template[ky * row..][..row]);
            }
            out[oy * wo + ox] = acc;
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn xcorr_backward<T: Scalar>(
    h: usize,
    w: usize,
    c: usize,
    n: usize,
    search: &[T],
    template: &[T],
    grad_out: &[T],
    mut grad_search: Option<&mut [T]>,
    mut grad_template: Option<&mut [T]>,
) {
    let (ho, wo) = (h - n + 1, w - n + 1);
    let row = n * c;
    for oy in 0..ho {
        for ox in 0..wo {
            let go = grad_out[oy * wo + ox];
            if go == T::zero() {
                continue;
            }
            for ky in 0..n {
                let base = ((oy + ky) * w + ox) * c;
                if let Some(gs) = grad_search.as_deref_mut() {
                    axpy(go, &template[ky * row..][..row], &mut gs[base..base + row]);
                }
                if let Some(gt) = grad_template.as_deref_mut() {
                    axpy(go, &search[base..base + row], &mut gt[ky * row..][..row]);
                }
            }
        }
    }
}

/// Windowed pooling geometry over an `H x W x C` map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub size: usize,
    pub stride: usize,
}

impl PoolGeom {
    pub fn out_h(&self) -> usize {
        (self.h - self.size) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w - self.size) / self.stride + 1
    }
}

pub fn avg_pool_forward<T: Scalar>(g: PoolGeom, input: &[T], out: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let inv = T::one() / T::from_f64((g.size * g.size) as f64);
    for oy in 0..ho {
        for ox in 0..wo {
            let o = &mut out[(oy * wo + ox) * g.c..][..g.c];
            o.fill(T::zero());
            for ky in 0..g.size {
                for kx in 0..g.size {
                    let p = ((oy * g.stride + ky) * g.w + ox * g.stride + kx) * g.c;
                    axpy(T::one(), &input[p..p + g.c], o);
                }
            }
            o.iter_mut().for_each(|v| *v *= inv);
        }
    }
}

pub fn avg_pool_backward<T: Scalar>(g: PoolGeom, grad_out: &[T], grad_input: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let inv = T::one() / T::from_f64((g.size * g.size) as f64);
    for oy in 0..ho {
        for ox in 0..wo {
            let go = &grad_out[(oy * wo + ox) * g.c..][..g.c];
            for ky in 0..g.size {
                for kx in 0..g.size {
                    let p = ((oy * g.stride + ky) * g.w + ox * g.stride + kx) * g.c;
                    axpy(inv, go, &mut grad_input[p..p + g.c]);
                }
            }
        }
    }
}

/// Max pooling; returns for every output element the flat input index of
/// the winning element (first one on ties).
pub fn max_pool_forward<T: Scalar>(g: PoolGeom, input: &[T], out: &mut [T]) -> Vec<usize> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut arg = vec![0usize; ho * wo * g.c];
    for oy in 0..ho {
        for ox in 0..wo {
            for ch in 0..g.c {
                let mut best = T::neg_infinity();
                let mut best_i = 0;
                for ky in 0..g.size {
                    for kx in 0..g.size {
                        let p = ((oy * g.stride + ky) * g.w + ox * g.stride + kx) * g.c + ch;
                        if input[p] > best {
                            best = input[p];
                            best_i = p;
                        }
                    }
                }
                let o = (oy * wo + ox) * g.c + ch;
                out[o] = best;
                arg[o] = best_i;
            }
        }
    }
    arg
}
