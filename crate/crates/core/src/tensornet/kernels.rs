//! Raw compute loops shared by the graph ops.
//!
//! Summation order inside each output element is fixed, so results are
//! independent of how callers partition work.

use crate::scalar::Scalar;

/// out = a[m,k] · b[k,n], overwriting `out`.
#[cfg(test)]
pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for row in out.iter_mut() {
        *row = S::zero();
    }
    matmul_acc(a, b, m, k, n, out);
}

/// out += a[m,k] · b[k,n].
pub fn matmul_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + aip * bv;
            }
        }
    }
}

/// out += a[m,k] · b[n,k]ᵀ  (rows of `b` dotted with rows of `a`).
pub fn matmul_bt_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc = acc + av * bv;
            }
            *o = *o + acc;
        }
    }
}

/// out += a[k,m]ᵀ · b[k,n]  (columns of `a` against rows of `b`).
pub fn matmul_at_acc<S: Scalar>(a: &[S], b: &[S], k: usize, m: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

/// Softmax over the last axis, numerically stabilized by row-max subtraction.
pub fn softmax_rows<S: Scalar>(x: &[S], row_len: usize, out: &mut [S]) {
    debug_assert_eq!(x.len(), out.len());
    debug_assert_eq!(x.len() % row_len, 0);
    for (xr, or) in x.chunks_exact(row_len).zip(out.chunks_exact_mut(row_len)) {
        let max = xr.iter().copied().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for (o, &v) in or.iter_mut().zip(xr) {
            let e = (v - max).exp();
            *o = e;
            sum = sum + e;
        }
        for o in or.iter_mut() {
            *o = *o / sum;
        }
    }
}

/// Spatial size of a convolution output axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfold one image `[c,h,w]` into patch rows `[oh*ow, c*kh*kw]`.
#[allow(clippy::too_many_arguments)]
pub fn im2col<S: Scalar>(
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    cols: &mut [S],
) {
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let patch = c * kh * kw;
    debug_assert_eq!(cols.len(), oh * ow * patch);
    for col in cols.iter_mut() {
        *col = S::zero();
    }
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut cols[(oy * ow + ox) * patch..(oy * ow + ox + 1) * patch];
            for ch in 0..c {
                let plane = &x[ch * h * w..(ch + 1) * h * w];
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        row[ch * kh * kw + ky * kw + kx] = plane[iy * w + ix as usize];
                    }
                }
            }
        }
    }
}

/// Scatter-add patch-row gradients back onto the image: inverse of [`im2col`].
#[allow(clippy::too_many_arguments)]
pub fn col2im_acc<S: Scalar>(
    cols: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    x: &mut [S],
) {
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let patch = c * kh * kw;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &cols[(oy * ow + ox) * patch..(oy * ow + ox + 1) * patch];
            for ch in 0..c {
                let plane = &mut x[ch * h * w..(ch + 1) * h * w];
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        plane[iy * w + ix as usize] =
                            plane[iy * w + ix as usize] + row[ch * kh * kw + ky * kw + kx];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small_known() {
        // [1 2; 3 4] · [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut out = [0.0; 4];
        matmul(&a, &b, 2, 2, 2, &mut out);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transposed_variants_agree_with_plain() {
        let m = 3;
        let k = 4;
        let n = 2;
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64) * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64) * 0.7 - 2.0).collect();
        let mut expect = vec![0.0; m * n];
        matmul(&a, &b, m, k, n, &mut expect);

        // a · (bᵀ)ᵀ via matmul_bt_acc with b stored transposed
        let mut bt = vec![0.0; n * k];
        for i in 0..k {
            for j in 0..n {
                bt[j * k + i] = b[i * n + j];
            }
        }
        let mut got = vec![0.0; m * n];
        matmul_bt_acc(&a, &bt, m, k, n, &mut got);
        assert_eq!(got, expect);

        // (aᵀ)ᵀ · b via matmul_at_acc with a stored transposed
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for j in 0..k {
                at[j * m + i] = a[i * k + j];
            }
        }
        let mut got2 = vec![0.0; m * n];
        matmul_at_acc(&at, &b, k, m, n, &mut got2);
        assert_eq!(got2, expect);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = [0.0f64, 1.0, -2.0, 30.0, -30.0, 0.5];
        let mut out = [0.0; 6];
        softmax_rows(&x, 3, &mut out);
        for row in out.chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y
        let (c, h, w, kh, kw, stride, pad) = (2, 5, 4, 3, 3, 2, 1);
        let oh = conv_out_len(h, kh, stride, pad);
        let ow = conv_out_len(w, kw, stride, pad);
        let mut rng = crate::rng::stream(99, &[1]);
        use rand::Rng;
        let x: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..oh * ow * c * kh * kw)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, c, h, w, kh, kw, stride, pad, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im_acc(&y, c, h, w, kh, kw, stride, pad, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}
