//! Raw numeric kernels behind the tape ops.
//!
//! All kernels write disjoint output regions per parallel task and keep every
//! accumulation loop in a fixed order, so results are bit-identical for any
//! thread count.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// Work threshold below which kernels stay serial (parallel dispatch overhead
/// dominates on tiny planes).
const PAR_MIN_FLOPS: usize = 1 << 17;

/// Direct convolution.
///
/// input  (b, ci, h, w), kernel (co, ci, k, k), bias (co),
/// output (b, co, oh, ow) with oh = (h + 2p - k)/stride + 1.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_fwd<S: Scalar>(
    input: &[S],
    kernel: &[S],
    bias: &[S],
    out: &mut [S],
    b: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let in_plane = h * w;
    let out_plane = oh * ow;
    let flops = b * co * ci * out_plane * k * k;

    let run_plane = |bi: usize, coi: usize, out_p: &mut [S]| {
        out_p.fill(bias[coi]);
        for cii in 0..ci {
            let in_p = &input[(bi * ci + cii) * in_plane..(bi * ci + cii + 1) * in_plane];
            for ki in 0..k {
                for kj in 0..k {
                    let wgt = kernel[((coi * ci + cii) * k + ki) * k + kj];
                    if wgt == S::zero() {
                        continue;
                    }
                    for oi in 0..oh {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let in_row = &in_p[ii as usize * w..(ii as usize + 1) * w];
                        let out_row = &mut out_p[oi * ow..(oi + 1) * ow];
                        for oj in 0..ow {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj >= 0 && jj < w as isize {
                                out_row[oj] += wgt * in_row[jj as usize];
                            }
                        }
                    }
                }
            }
        }
    };

    if flops >= PAR_MIN_FLOPS {
        out.par_chunks_mut(out_plane).enumerate().for_each(|(idx, out_p)| {
            run_plane(idx / co, idx % co, out_p);
        });
    } else {
        for (idx, out_p) in out.chunks_mut(out_plane).enumerate() {
            run_plane(idx / co, idx % co, out_p);
        }
    }
}

/// Gradient of `conv2d_fwd` w.r.t. its input.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd_input<S: Scalar>(
    d_out: &[S],
    kernel: &[S],
    d_in: &mut [S],
    b: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let in_plane = h * w;
    let out_plane = oh * ow;
    let flops = b * co * ci * out_plane * k * k;

    let run_batch = |bi: usize, d_in_b: &mut [S]| {
        d_in_b.fill(S::zero());
        for coi in 0..co {
            let d_out_p = &d_out[(bi * co + coi) * out_plane..(bi * co + coi + 1) * out_plane];
            for cii in 0..ci {
                let d_in_p = &mut d_in_b[cii * in_plane..(cii + 1) * in_plane];
                for ki in 0..k {
                    for kj in 0..k {
                        let wgt = kernel[((coi * ci + cii) * k + ki) * k + kj];
                        if wgt == S::zero() {
                            continue;
                        }
                        for oi in 0..oh {
                            let ii = (oi * stride + ki) as isize - pad as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            let d_out_row = &d_out_p[oi * ow..(oi + 1) * ow];
                            let d_in_row = &mut d_in_p[ii as usize * w..(ii as usize + 1) * w];
                            for oj in 0..ow {
                                let jj = (oj * stride + kj) as isize - pad as isize;
                                if jj >= 0 && jj < w as isize {
                                    d_in_row[jj as usize] += wgt * d_out_row[oj];
                                }
                            }
                        }
                    }
                }
            }
        }
    };

    if flops >= PAR_MIN_FLOPS {
        d_in.par_chunks_mut(ci * in_plane)
            .enumerate()
            .for_each(|(bi, d_in_b)| run_batch(bi, d_in_b));
    } else {
        for (bi, d_in_b) in d_in.chunks_mut(ci * in_plane).enumerate() {
            run_batch(bi, d_in_b);
        }
    }
}

/// Gradients of `conv2d_fwd` w.r.t. kernel and bias.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd_params<S: Scalar>(
    d_out: &[S],
    input: &[S],
    d_kernel: &mut [S],
    d_bias: &mut [S],
    b: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let in_plane = h * w;
    let out_plane = oh * ow;
    let flops = b * co * ci * out_plane * k * k;
    let kern_per_co = ci * k * k;

    let run_co = |coi: usize, d_k_co: &mut [S], d_b_co: &mut S| {
        d_k_co.fill(S::zero());
        let mut db = S::zero();
        for bi in 0..b {
            let d_out_p = &d_out[(bi * co + coi) * out_plane..(bi * co + coi + 1) * out_plane];
            for v in d_out_p {
                db += *v;
            }
            for cii in 0..ci {
                let in_p = &input[(bi * ci + cii) * in_plane..(bi * ci + cii + 1) * in_plane];
                for ki in 0..k {
                    for kj in 0..k {
                        let mut acc = S::zero();
                        for oi in 0..oh {
                            let ii = (oi * stride + ki) as isize - pad as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            let in_row = &in_p[ii as usize * w..(ii as usize + 1) * w];
                            let d_out_row = &d_out_p[oi * ow..(oi + 1) * ow];
                            for oj in 0..ow {
                                let jj = (oj * stride + kj) as isize - pad as isize;
                                if jj >= 0 && jj < w as isize {
                                    acc += d_out_row[oj] * in_row[jj as usize];
                                }
                            }
                        }
                        d_k_co[(cii * k + ki) * k + kj] += acc;
                    }
                }
            }
        }
        *d_b_co = db;
    };

    if flops >= PAR_MIN_FLOPS && co > 1 {
        d_kernel
            .par_chunks_mut(kern_per_co)
            .zip(d_bias.par_iter_mut())
            .enumerate()
            .for_each(|(coi, (d_k_co, d_b_co))| run_co(coi, d_k_co, d_b_co));
    } else {
        for (coi, (d_k_co, d_b_co)) in d_kernel.chunks_mut(kern_per_co).zip(d_bias.iter_mut()).enumerate() {
            run_co(coi, d_k_co, d_b_co);
        }
    }
}

/// Transposed convolution (stride-2 upsampling connector).
///
/// input (b, ci, h, w); kernel (co, ci, k, k); output (b, co, oh, ow) with
/// oh = stride*h for the sizes used here. Scatter form:
/// out[y, x] += in[i, j] * k[ki, kj] at y = i*stride - pad + ki.
#[allow(clippy::too_many_arguments)]
pub fn convt2d_fwd<S: Scalar>(
    input: &[S],
    kernel: &[S],
    bias: &[S],
    out: &mut [S],
    b: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let in_plane = h * w;
    let out_plane = oh * ow;
    let flops = b * co * ci * in_plane * k * k;

    let run_plane = |bi: usize, coi: usize, out_p: &mut [S]| {
        out_p.fill(bias[coi]);
        for cii in 0..ci {
            let in_p = &input[(bi * ci + cii) * in_plane..(bi * ci + cii + 1) * in_plane];
            for ki in 0..k {
                for kj in 0..k {
                    let wgt = kernel[((coi * ci + cii) * k + ki) * k + kj];
                    if wgt == S::zero() {
                        continue;
                    }
                    for i in 0..h {
                        let y = (i * stride + ki) as isize - pad as isize;
                        if y < 0 || y >= oh as isize {
                            continue;
                        }
                        let in_row = &in_p[i * w..(i + 1) * w];
                        let out_row = &mut out_p[y as usize * ow..(y as usize + 1) * ow];
                        for j in 0..w {
                            let x = (j * stride + kj) as isize - pad as isize;
                            if x >= 0 && x < ow as isize {
                                out_row[x as usize] += wgt * in_row[j];
                            }
                        }
                    }
                }
            }
        }
    };

    if flops >= PAR_MIN_FLOPS {
        out.par_chunks_mut(out_plane).enumerate().for_each(|(idx, out_p)| {
            run_plane(idx / co, idx % co, out_p);
        });
    } else {
        for (idx, out_p) in out.chunks_mut(out_plane).enumerate() {
            run_plane(idx / co, idx % co, out_p);
        }
    }
}

/// Gradient of `convt2d_fwd` w.r.t. its input (a gather, mirror of the scatter).
#[allow(clippy::too_many_arguments)]
pub fn convt2d_bwd_input<S: Scalar>(
    d_out: &[S],
    kernel: &[S],
    d_in: &mut [S],
    b: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let in_plane = h * w;
    let out_plane = oh * ow;
    let flops = b * co * ci * in_plane * k * k;

    let run_batch = |bi: usize, d_in_b: &mut [S]| {
        d_in_b.fill(S::zero());
        for coi in 0..co {
            let d_out_p = &d_out[(bi * co + coi) * out_plane..(bi * co + coi + 1) * out_plane];
            for cii in 0..ci {
                let d_in_p = &mut d_in_b[cii * in_plane..(cii + 1) * in_plane];
                for ki in 0..k {
                    for kj in 0..k {
                        let wgt = kernel[((coi * ci + cii) * k + ki) * k + kj];
                        if wgt == S::zero() {
                            continue;
                        }
                        for i in 0..h {
                            let y = (i * stride + ki) as isize - pad as isize;
                            if y < 0 || y >= oh as isize {
                                continue;
                            }
                            let d_out_row = &d_out_p[y as usize * ow..(y as usize + 1) * ow];
                            let d_in_row = &mut d_in_p[i * w..(i + 1) * w];
                            for j in 0..w {
                                let x = (j * stride + kj) as isize - pad as isize;
                                if x >= 0 && x < ow as isize {
                                    d_in_row[j] += wgt * d_out_row[x as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    };

    if flops >= PAR_MIN_FLOPS {
        d_in.par_chunks_mut(ci * in_plane)
            .enumerate()
            .for_each(|(bi, d_in_b)| run_batch(bi, d_in_b));
    } else {
        for (bi, d_in_b) in d_in.chunks_mut(ci * in_plane).enumerate() {
            run_batch(bi, d_in_b);
        }
    }
}

/// Gradients of `convt2d_fwd` w.r.t. kernel and bias.
#[allow(clippy::too_many_arguments)]
pub fn convt2d_bwd_params<S: Scalar>(
    d_out: &[S],
    input: &[S],
    d_kernel: &mut [S],
    d_bias: &mut [S],
    b: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let in_plane = h * w;
    let out_plane = oh * ow;
    let kern_per_co = ci * k * k;

    let run_co = |coi: usize, d_k_co: &mut [S], d_b_co: &mut S| {
        d_k_co.fill(S::zero());
        let mut db = S::zero();
        for bi in 0..b {
            let d_out_p = &d_out[(bi * co + coi) * out_plane..(bi * co + coi + 1) * out_plane];
            for v in d_out_p {
                db += *v;
            }
            for cii in 0..ci {
                let in_p = &input[(bi * ci + cii) * in_plane..(bi * ci + cii + 1) * in_plane];
                for ki in 0..k {
                    for kj in 0..k {
                        let mut acc = S::zero();
                        for i in 0..h {
                            let y = (i * stride + ki) as isize - pad as isize;
                            if y < 0 || y >= oh as isize {
                                continue;
                            }
                            let d_out_row = &d_out_p[y as usize * ow..(y as usize + 1) * ow];
                            let in_row = &in_p[i * w..(i + 1) * w];
                            for j in 0..w {
                                let x = (j * stride + kj) as isize - pad as isize;
                                if x >= 0 && x < ow as isize {
                                    acc += d_out_row[x as usize] * in_row[j];
                                }
                            }
                        }
                        d_k_co[(cii * k + ki) * k + kj] += acc;
                    }
                }
            }
        }
        *d_b_co = db;
    };

    let flops = b * co * ci * in_plane * k * k;
    if flops >= PAR_MIN_FLOPS && co > 1 {
        d_kernel
            .par_chunks_mut(kern_per_co)
            .zip(d_bias.par_iter_mut())
            .enumerate()
            .for_each(|(coi, (d_k_co, d_b_co))| run_co(coi, d_k_co, d_b_co));
    } else {
        for (coi, (d_k_co, d_b_co)) in d_kernel.chunks_mut(kern_per_co).zip(d_bias.iter_mut()).enumerate() {
            run_co(coi, d_k_co, d_b_co);
        }
    }
}

/// Affine map: x (b, n), weight (m, n), bias (m) -> out (b, m).
pub fn linear_fwd<S: Scalar>(x: &[S], weight: &[S], bias: &[S], out: &mut [S], b: usize, n: usize, m: usize) {
    let run_row = |bi: usize, out_row: &mut [S]| {
        let x_row = &x[bi * n..(bi + 1) * n];
        for (mi, o) in out_row.iter_mut().enumerate() {
            let w_row = &weight[mi * n..(mi + 1) * n];
            let mut acc = bias[mi];
            for i in 0..n {
                acc += w_row[i] * x_row[i];
            }
            *o = acc;
        }
    };
    if b * m * n >= PAR_MIN_FLOPS && b > 1 {
        out.par_chunks_mut(m).enumerate().for_each(|(bi, row)| run_row(bi, row));
    } else {
        for (bi, row) in out.chunks_mut(m).enumerate() {
            run_row(bi, row);
        }
    }
}

/// Gradients of `linear_fwd`.
#[allow(clippy::too_many_arguments)]
pub fn linear_bwd<S: Scalar>(
    d_out: &[S],
    x: &[S],
    weight: &[S],
    d_x: &mut [S],
    d_weight: &mut [S],
    d_bias: &mut [S],
    b: usize,
    n: usize,
    m: usize,
) {
    // d_x[bi] = d_out[bi] @ weight
    for bi in 0..b {
        let d_out_row = &d_out[bi * m..(bi + 1) * m];
        let d_x_row = &mut d_x[bi * n..(bi + 1) * n];
        d_x_row.fill(S::zero());
        for mi in 0..m {
            let g = d_out_row[mi];
            if g == S::zero() {
                continue;
            }
            let w_row = &weight[mi * n..(mi + 1) * n];
            for i in 0..n {
                d_x_row[i] += g * w_row[i];
            }
        }
    }
    // d_weight[mi] = sum_b d_out[bi, mi] * x[bi]; d_bias[mi] = sum_b d_out[bi, mi]
    d_weight.fill(S::zero());
    for (mi, db) in d_bias.iter_mut().enumerate() {
        let mut acc = S::zero();
        for bi in 0..b {
            acc += d_out[bi * m + mi];
        }
        *db = acc;
    }
    for bi in 0..b {
        let d_out_row = &d_out[bi * m..(bi + 1) * m];
        let x_row = &x[bi * n..(bi + 1) * n];
        for mi in 0..m {
            let g = d_out_row[mi];
            if g == S::zero() {
                continue;
            }
            let d_w_row = &mut d_weight[mi * n..(mi + 1) * n];
            for i in 0..n {
                d_w_row[i] += g * x_row[i];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel() {
        // 3x3 kernel with centre 1 reproduces the input under same-padding.
        let input: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let mut kernel = vec![0.0; 9];
        kernel[4] = 1.0;
        let mut out = vec![0.0; 9];
        conv2d_fwd(&input, &kernel, &[0.0], &mut out, 1, 1, 3, 3, 1, 3, 1, 1);
        assert_eq!(out, input);
    }

    #[test]
    fn conv_strided_shapes() {
        // 8x8 -> 4x4 with k=3, s=2, p=1
        let input = vec![1.0f64; 64];
        let kernel = vec![1.0; 9];
        let mut out = vec![0.0; 16];
        conv2d_fwd(&input, &kernel, &[0.0], &mut out, 1, 1, 8, 8, 1, 3, 2, 1);
        // interior taps see all 9 inputs
        assert_eq!(out[5], 9.0);
    }

    #[test]
    fn convt_doubles_spatial() {
        let input = vec![1.0f64; 16];
        let kernel = vec![1.0; 9];
        let mut out = vec![0.0; 64];
        convt2d_fwd(&input, &kernel, &[0.0], &mut out, 1, 1, 4, 4, 1, 3, 2, 1, 8, 8);
        let total_out: f64 = out.iter().sum();
        // every input scattered through up to 9 taps, clipped at borders
        assert!(total_out > 0.0 && total_out <= 16.0 * 9.0);
    }

    #[test]
    fn linear_identity() {
        let x = vec![1.0f64, 2.0, 3.0, 4.0];
        let mut weight = vec![0.0; 4];
        weight[0] = 1.0;
        weight[3] = 1.0; // 2x2 identity
        let mut out = vec![0.0; 4];
        linear_fwd(&x, &weight, &[0.0, 0.0], &mut out, 2, 2, 2);
        assert_eq!(out, x);
    }
}
