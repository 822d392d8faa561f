//! Low-level f64 kernels: matmul variants and 3x3 same-padding convolution.
//!
//! Loop orders are chosen so the inner loop is an axpy over contiguous
//! output rows, which the compiler vectorizes without reassociating
//! floating-point sums. Accumulation order is fixed, so results are
//! bit-reproducible run to run.

/// c[m,n] += a[m,k] @ b[k,n]
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m,n] += a^T @ b where a is stored [k,m]: c[i,j] += sum_l a[l,i]*b[l,j]
pub fn matmul_ta_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for l in 0..k {
        let arow = &a[l * m..(l + 1) * m];
        let brow = &b[l * n..(l + 1) * n];
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
}

/// c[m,n] += a @ b^T where b is stored [n,k]: c[i,j] += dot(a[i,:], b[j,:])
pub fn matmul_tb_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            *cv += dot(arow, brow);
        }
    }
}

/// Dot product with four independent accumulators for instruction-level
/// parallelism; summation order is fixed.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..chunks {
        let i = c * 4;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for i in chunks * 4..n {
        s += a[i] * b[i];
    }
    s
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Patch matrix for a 3x3 same-padding convolution, stored transposed:
/// row j = (ci*9 + kh*3 + kw), column p = y*w + x, value = zero-padded
/// input[ci, y+kh-1, x+kw-1]. Each row is a shifted copy of one channel
/// plane, filled with strip copies.
pub fn im2col_t(input: &[f64], channels: usize, h: usize, w: usize, colt: &mut [f64]) {
    let hw = h * w;
    debug_assert_eq!(input.len(), channels * hw);
    debug_assert_eq!(colt.len(), channels * 9 * hw);
    colt.fill(0.0);
    for ci in 0..channels {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for kh in 0..3usize {
            let dy = kh as isize - 1;
            for kw in 0..3usize {
                let dx = kw as isize - 1;
                let row = &mut colt[(ci * 9 + kh * 3 + kw) * hw..(ci * 9 + kh * 3 + kw + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst = &mut row[y * w..(y + 1) * w];
                    if dx < 0 {
                        // source shifted left: dst[1..] = src[..w-1]
                        dst[1..].copy_from_slice(&src[..w - 1]);
                    } else if dx > 0 {
                        dst[..w - 1].copy_from_slice(&src[1..]);
                    } else {
                        dst.copy_from_slice(src);
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col_t`: scatter-add patch-matrix gradients back to the
/// input layout.
pub fn col2im_t(dcolt: &[f64], channels: usize, h: usize, w: usize, dinput: &mut [f64]) {
    let hw = h * w;
    debug_assert_eq!(dinput.len(), channels * hw);
    debug_assert_eq!(dcolt.len(), channels * 9 * hw);
    for ci in 0..channels {
        let dplane = &mut dinput[ci * hw..(ci + 1) * hw];
        for kh in 0..3usize {
            let dy = kh as isize - 1;
            for kw in 0..3usize {
                let dx = kw as isize - 1;
                let row = &dcolt[(ci * 9 + kh * 3 + kw) * hw..(ci * 9 + kh * 3 + kw + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut dplane[sy as usize * w..(sy as usize + 1) * w];
                    let src = &row[y * w..(y + 1) * w];
                    if dx < 0 {
                        for (d, s) in dst[..w - 1].iter_mut().zip(&src[1..]) {
                            *d += s;
                        }
                    } else if dx > 0 {
                        for (d, s) in dst[1..].iter_mut().zip(&src[..w - 1]) {
                            *d += s;
                        }
                    } else {
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// Forward 3x3 conv, same padding, stride 1. `kernel` is [out_c, in_c, 3, 3]
/// viewed as [out_c, in_c*9]; output is [out_c, h, w].
pub fn conv2d_forward(
    input: &[f64],
    kernel: &[f64],
    in_c: usize,
    out_c: usize,
    h: usize,
    w: usize,
    output: &mut [f64],
) {
    let hw = h * w;
    let mut colt = vec![0.0; in_c * 9 * hw];
    im2col_t(input, in_c, h, w, &mut colt);
    output.fill(0.0);
    matmul_acc(kernel, &colt, output, out_c, in_c * 9, hw);
}

/// Backward of the 3x3 conv: gradients w.r.t. input and kernel.
pub fn conv2d_backward(
    input: &[f64],
    kernel: &[f64],
    dout: &[f64],
    in_c: usize,
    out_c: usize,
    h: usize,
    w: usize,
    dinput: &mut [f64],
    dkernel: &mut [f64],
) {
    let hw = h * w;
    let ik = in_c * 9;
    // d_colt = kernel^T @ dout
    let mut dcolt = vec![0.0; ik * hw];
    matmul_ta_acc(kernel, dout, &mut dcolt, ik, out_c, hw);
    col2im_t(&dcolt, in_c, h, w, dinput);
    // d_kernel = dout @ colt^T
    let mut colt = vec![0.0; ik * hw];
    im2col_t(input, in_c, h, w, &mut colt);
    matmul_tb_acc(dout, &colt, dkernel, out_c, hw, ik);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [1,2;3,4] @ [5,6;7,8] = [19,22;43,50]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        matmul_acc(&a, &b, &mut c, 2, 2, 2);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_transpose_variants_agree() {
        let a = [1.0, -2.0, 0.5, 3.0, 4.0, -1.0]; // [2,3]
        let b = [2.0, 1.0, 0.0, -1.0, 1.5, 2.5]; // [3,2]
        let mut c = [0.0; 4];
        matmul_acc(&a, &b, &mut c, 2, 3, 2);

        let at = transpose(&a, 2, 3); // [3,2]
        let mut c_ta = [0.0; 4];
        matmul_ta_acc(&at, &b, &mut c_ta, 2, 3, 2);
        for (x, y) in c.iter().zip(&c_ta) {
            assert!((x - y).abs() < 1e-12);
        }

        let bt = transpose(&b, 3, 2); // [2,3]
        let mut c_tb = [0.0; 4];
        matmul_tb_acc(&a, &bt, &mut c_tb, 2, 3, 2);
        for (x, y) in c.iter().zip(&c_tb) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    /// Direct nested-loop convolution used as the oracle for the fast path.
    fn conv_naive(input: &[f64], kernel: &[f64], in_c: usize, out_c: usize, h: usize, w: usize) -> Vec<f64> {
        let mut out = vec![0.0; out_c * h * w];
        for o in 0..out_c {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut s = 0.0;
                    for ci in 0..in_c {
                        for kh in -1..=1isize {
                            for kw in -1..=1isize {
                                let (sy, sx) = (y + kh, x + kw);
                                if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                let iv = input[(ci * h + sy as usize) * w + sx as usize];
                                let kv = kernel[((o * in_c + ci) * 3 + (kh + 1) as usize) * 3
                                    + (kw + 1) as usize];
                                s += iv * kv;
                            }
                        }
                    }
                    out[(o * h + y as usize) * w + x as usize] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (in_c, out_c, h, w) = (3, 4, 5, 6);
        let input: Vec<f64> = (0..in_c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let kernel: Vec<f64> = (0..out_c * in_c * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut fast = vec![0.0; out_c * h * w];
        conv2d_forward(&input, &kernel, in_c, out_c, h, w, &mut fast);
        let slow = conv_naive(&input, &kernel, in_c, out_c, h, w);
        for (f, s) in fast.iter().zip(&slow) {
            assert!((f - s).abs() < 1e-12, "fast {f} vs naive {s}");
        }
    }

    #[test]
    fn conv_all_ones_border_counts() {
        // 1-channel 3x3 all-ones input, single all-ones 3x3 kernel, same
        // padding: center sees all 9 taps, corners see 4.
        let input = vec![1.0; 9];
        let kernel = vec![1.0; 9];
        let mut out = vec![0.0; 9];
        conv2d_forward(&input, &kernel, 1, 1, 3, 3, &mut out);
        assert_eq!(out[4], 9.0);
        for corner in [0, 2, 6, 8] {
            assert_eq!(out[corner], 4.0);
        }
        for edge in [1, 3, 5, 7] {
            assert_eq!(out[edge], 6.0);
        }
    }
}
