//! Raw numeric kernels shared by forward ops and their backward passes.
//!
//! All kernels are deterministic: every output element is produced by
//! exactly one task with a fixed inner summation order, so rayon
//! parallelism never changes results bit-for-bit.

use rayon::prelude::*;

/// C[m,n] = A[m,k] @ B[k,n]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// C[m,n] = A[k,m]^T @ B[k,n]
pub fn matmul_at(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// C[m,n] = A[m,k] @ B[n,k]^T
pub fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

pub fn conv2d_out_size(h: usize, kh: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - kh) / stride + 1
}

pub fn convt2d_out_size(h: usize, kh: usize, stride: usize, pad: usize) -> usize {
    (h - 1) * stride + kh - 2 * pad
}

/// y[b,co,ho,wo] = sum_{ci,ki,kj} x[b,ci,ho*s-p+ki,wo*s-p+kj] * w[co,ci,ki,kj]
/// Out-of-frame taps read as zero padding.
pub fn conv2d_fwd(
    x: &[f64],
    w: &[f64],
    bsz: usize,
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let ho = conv2d_out_size(h, kh, stride, pad);
    let wo = conv2d_out_size(wd, kw, stride, pad);
    let mut y = vec![0.0; bsz * co * ho * wo];
    let in_stride = ci * h * wd;
    let out_stride = co * ho * wo;
    y.par_chunks_mut(out_stride)
        .enumerate()
        .for_each(|(b, yb)| {
            let xb = &x[b * in_stride..(b + 1) * in_stride];
            for c_out in 0..co {
                let yc = &mut yb[c_out * ho * wo..(c_out + 1) * ho * wo];
                for c_in in 0..ci {
                    let xc = &xb[c_in * h * wd..(c_in + 1) * h * wd];
                    let wc = &w[(c_out * ci + c_in) * kh * kw..(c_out * ci + c_in + 1) * kh * kw];
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let wv = wc[ki * kw + kj];
                            if wv == 0.0 {
                                continue;
                            }
                            for oi in 0..ho {
                                let ii = (oi * stride + ki) as isize - pad as isize;
                                if ii < 0 || ii >= h as isize {
                                    continue;
                                }
                                let xrow = &xc[ii as usize * wd..(ii as usize + 1) * wd];
                                let yrow = &mut yc[oi * wo..(oi + 1) * wo];
                                for oj in 0..wo {
                                    let jj = (oj * stride + kj) as isize - pad as isize;
                                    if jj < 0 || jj >= wd as isize {
                                        continue;
                                    }
                                    yrow[oj] += wv * xrow[jj as usize];
                                }
                            }
                        }
                    }
                }
            }
        });
    y
}

/// Scatter adjoint of `conv2d_fwd` with respect to its input:
/// dx[b,ci,ho*s-p+ki,wo*s-p+kj] += dy[b,co,ho,wo] * w[co,ci,ki,kj]
pub fn conv2d_bwd_x(
    dy: &[f64],
    w: &[f64],
    bsz: usize,
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let ho = conv2d_out_size(h, kh, stride, pad);
    let wo = conv2d_out_size(wd, kw, stride, pad);
    let mut dx = vec![0.0; bsz * ci * h * wd];
    let in_stride = ci * h * wd;
    let out_stride = co * ho * wo;
    dx.par_chunks_mut(in_stride).enumerate().for_each(|(b, dxb)| {
        let dyb = &dy[b * out_stride..(b + 1) * out_stride];
        for c_out in 0..co {
            let dyc = &dyb[c_out * ho * wo..(c_out + 1) * ho * wo];
            for c_in in 0..ci {
                let dxc = &mut dxb[c_in * h * wd..(c_in + 1) * h * wd];
                let wc = &w[(c_out * ci + c_in) * kh * kw..(c_out * ci + c_in + 1) * kh * kw];
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wv = wc[ki * kw + kj];
                        if wv == 0.0 {
                            continue;
                        }
                        for oi in 0..ho {
                            let ii = (oi * stride + ki) as isize - pad as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            let dyrow = &dyc[oi * wo..(oi + 1) * wo];
                            let dxrow = &mut dxc[ii as usize * wd..(ii as usize + 1) * wd];
                            for oj in 0..wo {
                                let jj = (oj * stride + kj) as isize - pad as isize;
                                if jj < 0 || jj >= wd as isize {
                                    continue;
                                }
                                dxrow[jj as usize] += wv * dyrow[oj];
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

/// dw[co,ci,ki,kj] = sum_{b,ho,wo} x[b,ci,ho*s-p+ki,wo*s-p+kj] * dy[b,co,ho,wo]
pub fn conv2d_bwd_w(
    x: &[f64],
    dy: &[f64],
    bsz: usize,
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let ho = conv2d_out_size(h, kh, stride, pad);
    let wo = conv2d_out_size(wd, kw, stride, pad);
    let mut dw = vec![0.0; co * ci * kh * kw];
    let in_stride = ci * h * wd;
    let out_stride = co * ho * wo;
    dw.par_chunks_mut(ci * kh * kw)
        .enumerate()
        .for_each(|(c_out, dwc_out)| {
            for b in 0..bsz {
                let xb = &x[b * in_stride..(b + 1) * in_stride];
                let dyc = &dy[b * out_stride + c_out * ho * wo..b * out_stride + (c_out + 1) * ho * wo];
                for c_in in 0..ci {
                    let xc = &xb[c_in * h * wd..(c_in + 1) * h * wd];
                    let dwc = &mut dwc_out[c_in * kh * kw..(c_in + 1) * kh * kw];
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let mut acc = 0.0;
                            for oi in 0..ho {
                                let ii = (oi * stride + ki) as isize - pad as isize;
                                if ii < 0 || ii >= h as isize {
                                    continue;
                                }
                                let xrow = &xc[ii as usize * wd..(ii as usize + 1) * wd];
                                let dyrow = &dyc[oi * wo..(oi + 1) * wo];
                                for oj in 0..wo {
                                    let jj = (oj * stride + kj) as isize - pad as isize;
                                    if jj < 0 || jj >= wd as isize {
                                        continue;
                                    }
                                    acc += xrow[jj as usize] * dyrow[oj];
                                }
                            }
                            dwc[ki * kw + kj] += acc;
                        }
                    }
                }
            }
        });
    dw
}

/// Transposed convolution (scatter). Weight layout is (ci, co, kh, kw) with
/// ci the channels of `x`:
/// y[b,co,i*s-p+ki,j*s-p+kj] += x[b,ci,i,j] * w[ci,co,ki,kj]
pub fn convt2d_fwd(
    x: &[f64],
    w: &[f64],
    bsz: usize,
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let ho = convt2d_out_size(h, kh, stride, pad);
    let wo = convt2d_out_size(wd, kw, stride, pad);
    let mut y = vec![0.0; bsz * co * ho * wo];
    let in_stride = ci * h * wd;
    let out_stride = co * ho * wo;
    y.par_chunks_mut(out_stride)
        .enumerate()
        .for_each(|(b, yb)| {
            let xb = &x[b * in_stride..(b + 1) * in_stride];
            for c_in in 0..ci {
                let xc = &xb[c_in * h * wd..(c_in + 1) * h * wd];
                for c_out in 0..co {
                    let yc = &mut yb[c_out * ho * wo..(c_out + 1) * ho * wo];
                    let wc = &w[(c_in * co + c_out) * kh * kw..(c_in * co + c_out + 1) * kh * kw];
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let wv = wc[ki * kw + kj];
                            if wv == 0.0 {
                                continue;
                            }
                            for i in 0..h {
                                let oi = (i * stride + ki) as isize - pad as isize;
                                if oi < 0 || oi >= ho as isize {
                                    continue;
                                }
                                let xrow = &xc[i * wd..(i + 1) * wd];
                                let yrow = &mut yc[oi as usize * wo..(oi as usize + 1) * wo];
                                for j in 0..wd {
                                    let oj = (j * stride + kj) as isize - pad as isize;
                                    if oj < 0 || oj >= wo as isize {
                                        continue;
                                    }
                                    yrow[oj as usize] += wv * xrow[j];
                                }
                            }
                        }
                    }
                }
            }
        });
    y
}

/// Gather adjoint of `convt2d_fwd` with respect to its input:
/// dx[b,ci,i,j] = sum_{co,ki,kj} dy[b,co,i*s-p+ki,j*s-p+kj] * w[ci,co,ki,kj]
pub fn convt2d_bwd_x(
    dy: &[f64],
    w: &[f64],
    bsz: usize,
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let ho = convt2d_out_size(h, kh, stride, pad);
    let wo = convt2d_out_size(wd, kw, stride, pad);
    let mut dx = vec![0.0; bsz * ci * h * wd];
    let in_stride = ci * h * wd;
    let out_stride = co * ho * wo;
    dx.par_chunks_mut(in_stride).enumerate().for_each(|(b, dxb)| {
        let dyb = &dy[b * out_stride..(b + 1) * out_stride];
        for c_in in 0..ci {
            let dxc = &mut dxb[c_in * h * wd..(c_in + 1) * h * wd];
            for c_out in 0..co {
                let dyc = &dyb[c_out * ho * wo..(c_out + 1) * ho * wo];
                let wc = &w[(c_in * co + c_out) * kh * kw..(c_in * co + c_out + 1) * kh * kw];
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wv = wc[ki * kw + kj];
                        if wv == 0.0 {
                            continue;
                        }
                        for i in 0..h {
                            let oi = (i * stride + ki) as isize - pad as isize;
                            if oi < 0 || oi >= ho as isize {
                                continue;
                            }
                            let dyrow = &dyc[oi as usize * wo..(oi as usize + 1) * wo];
                            let dxrow = &mut dxc[i * wd..(i + 1) * wd];
                            for j in 0..wd {
                                let oj = (j * stride + kj) as isize - pad as isize;
                                if oj < 0 || oj >= wo as isize {
                                    continue;
                                }
                                dxrow[j] += wv * dyrow[oj as usize];
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

/// dw[ci,co,ki,kj] = sum_{b,i,j} x[b,ci,i,j] * dy[b,co,i*s-p+ki,j*s-p+kj]
pub fn convt2d_bwd_w(
    x: &[f64],
    dy: &[f64],
    bsz: usize,
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let ho = convt2d_out_size(h, kh, stride, pad);
    let wo = convt2d_out_size(wd, kw, stride, pad);
    let mut dw = vec![0.0; ci * co * kh * kw];
    let in_stride = ci * h * wd;
    let out_stride = co * ho * wo;
    dw.par_chunks_mut(co * kh * kw)
        .enumerate()
        .for_each(|(c_in, dwc_in)| {
            for b in 0..bsz {
                let xc = &x[b * in_stride + c_in * h * wd..b * in_stride + (c_in + 1) * h * wd];
                let dyb = &dy[b * out_stride..(b + 1) * out_stride];
                for c_out in 0..co {
                    let dyc = &dyb[c_out * ho * wo..(c_out + 1) * ho * wo];
                    let dwc = &mut dwc_in[c_out * kh * kw..(c_out + 1) * kh * kw];
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let mut acc = 0.0;
                            for i in 0..h {
                                let oi = (i * stride + ki) as isize - pad as isize;
                                if oi < 0 || oi >= ho as isize {
                                    continue;
                                }
                                let xrow = &xc[i * wd..(i + 1) * wd];
                                let dyrow = &dyc[oi as usize * wo..(oi as usize + 1) * wo];
                                for j in 0..wd {
                                    let oj = (j * stride + kj) as isize - pad as isize;
                                    if oj < 0 || oj >= wo as isize {
                                        continue;
                                    }
                                    acc += xrow[j] * dyrow[oj as usize];
                                }
                            }
                            dwc[ki * kw + kj] += acc;
                        }
                    }
                }
            }
        });
    dw
}
