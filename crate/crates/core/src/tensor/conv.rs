//! Convolution kernels: im2col/col2im plus the matmul variants the tape
//! dispatches to. Everything here is deterministic; parallel paths assign
//! each output element to exactly one task so accumulation order is fixed.

use rayon::prelude::*;

use super::Scalar;

/// Standard convolution output size: floor((h + 2p - k) / s) + 1.
pub fn conv_out_dim(h: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = h + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Transposed convolution output size: (h - 1)s - 2p + k + out_pad.
pub fn conv_transposed_out_dim(
    h: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Option<usize> {
    let grown = (h - 1) * stride + k + out_pad;
    if grown < 2 * pad {
        return None;
    }
    Some(grown - 2 * pad)
}

const PAR_FLOP_THRESHOLD: usize = 1 << 20;

/// C(m,n) = A(m,k) · B(k,n), row-major.
pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::ZERO; m * n];
    let body = |i: usize, row: &mut [S]| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    if 2 * m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in c.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
    c
}

/// C(m,n) = A(m,k) · B(n,k)ᵀ.
pub fn matmul_nt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::ZERO; m * n];
    let body = |i: usize, row: &mut [S]| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cv) in row.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::ZERO;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *cv = acc;
        }
    };
    if 2 * m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in c.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
    c
}

/// C(m,n) = A(k,m)ᵀ · B(k,n).
pub fn matmul_tn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::ZERO; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// Unfold one image (c, h, w) into a (c·k·k, oh·ow) patch matrix with zero
/// padding outside the image.
fn im2col<S: Scalar>(
    src: &[S],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let mut cols = vec![S::ZERO; c * k * k * oh * ow];
    for ci in 0..c {
        let img = &src[ci * h * w..(ci + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let row = &mut cols[((ci * k + kh) * k + kw) * oh * ow..][..oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + kh) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &img[iy as usize * w..(iy as usize + 1) * w];
                    let dst_row = &mut row[oy * ow..(oy + 1) * ow];
                    for (ox, dst) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kw) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *dst = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold a (c·k·k, oh·ow) patch matrix back into a (c, h, w) image,
/// accumulating overlaps and dropping out-of-range positions.
fn col2im_add<S: Scalar>(
    cols: &[S],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dst: &mut [S],
) {
    for ci in 0..c {
        let img = &mut dst[ci * h * w..(ci + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let row = &cols[((ci * k + kh) * k + kw) * oh * ow..][..oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + kh) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut img[iy as usize * w..(iy as usize + 1) * w];
                    let src_row = &row[oy * ow..(oy + 1) * ow];
                    for (ox, &v) in src_row.iter().enumerate() {
                        let ix = (ox * stride + kw) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Forward convolution: x (b, c_in, h, w) with weight (c_out, c_in, k, k).
pub fn conv2d_fwd<S: Scalar>(x: &[S], wgt: &[S], g: &ConvGeom) -> Vec<S> {
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * g.oh * g.ow;
    let mut out = vec![S::ZERO; g.batch * out_sz];
    out.par_chunks_mut(out_sz).enumerate().for_each(|(b, dst)| {
        let cols = im2col(&x[b * in_sz..], g.c_in, g.h, g.w, g.k, g.stride, g.pad, g.oh, g.ow);
        let res = matmul(wgt, &cols, g.c_out, g.c_in * g.k * g.k, g.oh * g.ow);
        dst.copy_from_slice(&res);
    });
    out
}

/// Gradient of conv2d w.r.t. its input.
pub fn conv2d_bwd_input<S: Scalar>(grad_out: &[S], wgt: &[S], g: &ConvGeom) -> Vec<S> {
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * g.oh * g.ow;
    let mut dx = vec![S::ZERO; g.batch * in_sz];
    dx.par_chunks_mut(in_sz).enumerate().for_each(|(b, dst)| {
        let gcols = matmul_tn(
            wgt,
            &grad_out[b * out_sz..(b + 1) * out_sz],
            g.c_in * g.k * g.k,
            g.c_out,
            g.oh * g.ow,
        );
        col2im_add(&gcols, g.c_in, g.h, g.w, g.k, g.stride, g.pad, g.oh, g.ow, dst);
    });
    dx
}

/// Gradient of conv2d w.r.t. its weight, summed over the batch in index order.
pub fn conv2d_bwd_weight<S: Scalar>(x: &[S], grad_out: &[S], g: &ConvGeom) -> Vec<S> {
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * g.oh * g.ow;
    let kk = g.c_in * g.k * g.k;
    let per_image: Vec<Vec<S>> = (0..g.batch)
        .into_par_iter()
        .map(|b| {
            let cols = im2col(&x[b * in_sz..], g.c_in, g.h, g.w, g.k, g.stride, g.pad, g.oh, g.ow);
            matmul_nt(&grad_out[b * out_sz..(b + 1) * out_sz], &cols, g.c_out, g.oh * g.ow, kk)
        })
        .collect();
    let mut dw = vec![S::ZERO; g.c_out * kk];
    for part in &per_image {
        for (d, &v) in dw.iter_mut().zip(part) {
            *d += v;
        }
    }
    dw
}

pub struct ConvTGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Forward transposed convolution (fractionally strided convolution):
/// x (b, c_in, h, w) with weight (c_in, c_out, k, k); scatter-add of
/// strided patches, contributions outside the declared output are dropped.
pub fn conv_transposed2d_fwd<S: Scalar>(x: &[S], wgt: &[S], g: &ConvTGeom) -> Vec<S> {
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * g.oh * g.ow;
    let kk = g.c_out * g.k * g.k;
    let mut out = vec![S::ZERO; g.batch * out_sz];
    out.par_chunks_mut(out_sz).enumerate().for_each(|(b, dst)| {
        // wgtᵀ (c_out·k·k, c_in) · x (c_in, h·w)
        let cols = matmul_tn(wgt, &x[b * in_sz..(b + 1) * in_sz], kk, g.c_in, g.h * g.w);
        col2im_add(&cols, g.c_out, g.oh, g.ow, g.k, g.stride, g.pad, g.h, g.w, dst);
    });
    out
}

/// Gradient of transposed convolution w.r.t. its input: a plain convolution
/// of the output gradient with the same weight.
pub fn conv_transposed2d_bwd_input<S: Scalar>(grad_out: &[S], wgt: &[S], g: &ConvTGeom) -> Vec<S> {
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * g.oh * g.ow;
    let kk = g.c_out * g.k * g.k;
    let mut dx = vec![S::ZERO; g.batch * in_sz];
    dx.par_chunks_mut(in_sz).enumerate().for_each(|(b, dst)| {
        let gcols =
            im2col(&grad_out[b * out_sz..], g.c_out, g.oh, g.ow, g.k, g.stride, g.pad, g.h, g.w);
        let res = matmul(wgt, &gcols, g.c_in, kk, g.h * g.w);
        dst.copy_from_slice(&res);
    });
    dx
}

/// Gradient of transposed convolution w.r.t. its weight.
pub fn conv_transposed2d_bwd_weight<S: Scalar>(x: &[S], grad_out: &[S], g: &ConvTGeom) -> Vec<S> {
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * g.oh * g.ow;
    let kk = g.c_out * g.k * g.k;
    let per_image: Vec<Vec<S>> = (0..g.batch)
        .into_par_iter()
        .map(|b| {
            let gcols = im2col(
                &grad_out[b * out_sz..],
                g.c_out,
                g.oh,
                g.ow,
                g.k,
                g.stride,
                g.pad,
                g.h,
                g.w,
            );
            matmul_nt(&x[b * in_sz..(b + 1) * in_sz], &gcols, g.c_in, g.h * g.w, kk)
        })
        .collect();
    let mut dw = vec![S::ZERO; g.c_in * kk];
    for part in &per_image {
        for (d, &v) in dw.iter_mut().zip(part) {
            *d += v;
        }
    }
    dw
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_naive() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let c = matmul(&a, &b, 2, 3, 2);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);
        let cnt = matmul_nt(&a, &[7.0, 9.0, 11.0, 8.0, 10.0, 12.0], 2, 3, 2);
        assert_eq!(cnt, c);
        let ctn = matmul_tn(&[1.0, 4.0, 2.0, 5.0, 3.0, 6.0], &b, 2, 3, 2);
        assert_eq!(ctn, c);
    }

    #[test]
    fn conv_shapes_follow_standard_arithmetic() {
        assert_eq!(conv_out_dim(32, 5, 2, 2), Some(16));
        assert_eq!(conv_out_dim(8, 5, 2, 2), Some(4));
        assert_eq!(conv_transposed_out_dim(4, 5, 2, 2, 1), Some(8));
        assert_eq!(conv_transposed_out_dim(16, 5, 2, 2, 1), Some(32));
    }

    #[test]
    fn conv2d_matches_direct_loop() {
        // 1 image, 2 in channels, 4x4, 3x3 kernel, stride 1, pad 1 -> 4x4.
        let x: Vec<f64> = (0..32).map(|v| v as f64 * 0.1).collect();
        let w: Vec<f64> = (0..2 * 2 * 9).map(|v| (v as f64).sin()).collect();
        let g = ConvGeom {
            batch: 1,
            c_in: 2,
            h: 4,
            w: 4,
            c_out: 2,
            k: 3,
            stride: 1,
            pad: 1,
            oh: 4,
            ow: 4,
        };
        let got = conv2d_fwd(&x, &w, &g);
        let mut want = vec![0.0f64; 2 * 16];
        for co in 0..2 {
            for oy in 0..4i64 {
                for ox in 0..4i64 {
                    let mut acc = 0.0;
                    for ci in 0..2 {
                        for kh in 0..3i64 {
                            for kw in 0..3i64 {
                                let iy = oy + kh - 1;
                                let ix = ox + kw - 1;
                                if (0..4).contains(&iy) && (0..4).contains(&ix) {
                                    acc += x[ci * 16 + (iy * 4 + ix) as usize]
                                        * w[((co * 2 + ci) * 3 + kh as usize) * 3 + kw as usize];
                                }
                            }
                        }
                    }
                    want[co * 16 + (oy * 4 + ox) as usize] = acc;
                }
            }
        }
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_transposed_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convT(y)> for matching geometry.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(3);
        let (ci, co, h, w, k, s, p, op) = (3usize, 2usize, 8usize, 8usize, 5usize, 2usize, 2usize, 1usize);
        let oh = conv_out_dim(h, k, s, p).unwrap();
        let x: Vec<f64> = (0..ci * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wgt_conv: Vec<f64> = (0..co * ci * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..co * oh * oh).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cg = ConvGeom { batch: 1, c_in: ci, h, w, c_out: co, k, stride: s, pad: p, oh, ow: oh };
        let cx = conv2d_fwd(&x, &wgt_conv, &cg);
        let lhs: f64 = cx.iter().zip(&y).map(|(a, b)| a * b).sum();
        // convT with weight laid out (c_in=co, c_out=ci) must transpose the map.
        let mut wgt_t = vec![0.0f64; co * ci * k * k];
        for a in 0..co {
            for b in 0..ci {
                for e in 0..k * k {
                    wgt_t[((a * ci) + b) * k * k + e] = wgt_conv[((a * ci) + b) * k * k + e];
                }
            }
        }
        let tg = ConvTGeom {
            batch: 1,
            c_in: co,
            h: oh,
            w: oh,
            c_out: ci,
            k,
            stride: s,
            pad: p,
            oh: conv_transposed_out_dim(oh, k, s, p, op).unwrap(),
            ow: conv_transposed_out_dim(oh, k, s, p, op).unwrap(),
        };
        assert_eq!(tg.oh, h);
        let ty = conv_transposed2d_fwd(&y, &wgt_t, &tg);
        let rhs: f64 = ty.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "adjoint mismatch: {lhs} vs {rhs}");
    }
}
