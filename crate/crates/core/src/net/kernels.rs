//! Dense CPU kernels for 3x3/1x1 convolutions and 2x2 max-pooling on
//! channel-major (`[C, H, W]`) planes. Convolutions lower to matrix
//! products (im2col for 3x3).

use super::Real;

/// `c = a·b + beta·c` for logical `a: m×k`, `b: k×n`, row-major `c: m×n`.
/// A transposed flag means the operand is stored as the transpose in
/// row-major order.
#[allow(clippy::too_many_arguments)]
fn matmul<T: Real>(m: usize, k: usize, n: usize, a: &[T], a_t: bool, b: &[T], b_t: bool, beta: T, c: &mut [T]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides address only elements inside the checked lengths.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
        )
    }
}

/// Output rows that read a valid input row for kernel row `ky`.
fn row_range(ky: usize, h: usize) -> std::ops::Range<usize> {
    match ky {
        0 => 1..h,
        2 => 0..h.saturating_sub(1),
        _ => 0..h,
    }
}

fn col_range(kx: usize, w: usize) -> (usize, usize) {
    match kx {
        0 => (1, w),
        2 => (0, w.saturating_sub(1)),
        _ => (0, w),
    }
}

/// Unfolds a padded 3x3 neighbourhood into rows of `[c_in * 9, h * w]`.
fn im2col<T: Real>(input: &[T], c_in: usize, h: usize, w: usize) -> Vec<T> {
    let plane = h * w;
    let mut cols = vec![T::zero(); c_in * 9 * plane];
    for i in 0..c_in {
        let src = &input[i * plane..(i + 1) * plane];
        for ky in 0..3 {
            for kx in 0..3 {
                let dst = &mut cols[(i * 9 + ky * 3 + kx) * plane..][..plane];
                let (x0, x1) = col_range(kx, w);
                for y in row_range(ky, h) {
                    // x0 >= 1 whenever kx == 0, so this never underflows
                    let s = (y + ky - 1) * w + x0 + kx - 1;
                    dst[y * w + x0..y * w + x1].copy_from_slice(&src[s..s + x1 - x0]);
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Real>(cols: &[T], c_in: usize, h: usize, w: usize, out: &mut [T]) {
    let plane = h * w;
    for i in 0..c_in {
        let dst = &mut out[i * plane..(i + 1) * plane];
        for ky in 0..3 {
            for kx in 0..3 {
                let src = &cols[(i * 9 + ky * 3 + kx) * plane..][..plane];
                let (x0, x1) = col_range(kx, w);
                for y in row_range(ky, h) {
                    let s = (y + ky - 1) * w + x0 + kx - 1;
                    for (d, &v) in dst[s..s + x1 - x0].iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

fn fill_bias<T: Real>(out: &mut [T], bias: &[T], plane: usize) {
    for (o, &b) in bias.iter().enumerate() {
        out[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v = b);
    }
}

fn add_row_sums<T: Real>(dout: &[T], plane: usize, dbias: &mut [T]) {
    for (o, db) in dbias.iter_mut().enumerate() {
        *db = *db + dout[o * plane..(o + 1) * plane].iter().fold(T::zero(), |a, &b| a + b);
    }
}

/// 3x3 convolution, stride 1, zero padding 1. `weight` is `[c_out, c_in, 3, 3]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3x3_forward<T: Real>(
    input: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[T],
    bias: &[T],
    c_out: usize,
    out: &mut [T],
) {
    let plane = h * w;
    let cols = im2col(input, c_in, h, w);
    fill_bias(out, bias, plane);
    matmul(c_out, c_in * 9, plane, weight, false, &cols, false, T::one(), out);
}

/// Accumulates weight/bias gradients and (optionally) the input gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3x3_backward<T: Real>(
    input: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[T],
    c_out: usize,
    dout: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
    dinput: Option<&mut [T]>,
) {
    let plane = h * w;
    let cols = im2col(input, c_in, h, w);
    add_row_sums(dout, plane, dbias);
    matmul(c_out, plane, c_in * 9, dout, false, &cols, true, T::one(), dweight);
    if let Some(din) = dinput {
        let mut dcols = vec![T::zero(); cols.len()];
        matmul(c_in * 9, c_out, plane, weight, true, dout, false, T::zero(), &mut dcols);
        col2im_add(&dcols, c_in, h, w, din);
    }
}

/// 1x1 convolution. `weight` is `[c_out, c_in]`.
pub(crate) fn conv1x1_forward<T: Real>(
    input: &[T],
    c_in: usize,
    plane: usize,
    weight: &[T],
    bias: &[T],
    c_out: usize,
    out: &mut [T],
) {
    fill_bias(out, bias, plane);
    matmul(c_out, c_in, plane, weight, false, input, false, T::one(), out);
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1x1_backward<T: Real>(
    input: &[T],
    c_in: usize,
    plane: usize,
    weight: &[T],
    c_out: usize,
    dout: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
    dinput: &mut [T],
) {
    add_row_sums(dout, plane, dbias);
    matmul(c_out, plane, c_in, dout, false, input, true, T::one(), dweight);
    matmul(c_in, c_out, plane, weight, true, dout, false, T::one(), dinput);
}

/// 2x2 stride-2 max pool. Returns the flat argmax (within the channel
/// plane) for every output element; ties pick the first in raster order.
pub(crate) fn maxpool2_forward<T: Real>(
    input: &[T],
    c: usize,
    h: usize,
    w: usize,
    out: &mut [T],
    argmax: &mut [u32],
) {
    let (oh, ow) = (h / 2, w / 2);
    for ch in 0..c {
        let src = &input[ch * h * w..(ch + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let mut best = (2 * y) * w + 2 * x;
                for cand in [(2 * y) * w + 2 * x + 1, (2 * y + 1) * w + 2 * x, (2 * y + 1) * w + 2 * x + 1] {
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                let o = ch * oh * ow + y * ow + x;
                out[o] = src[best];
                argmax[o] = best as u32;
            }
        }
    }
}

pub(crate) fn maxpool2_backward<T: Real>(
    c: usize,
    h: usize,
    w: usize,
    argmax: &[u32],
    dout: &[T],
    dinput: &mut [T],
) {
    let plane_out = (h / 2) * (w / 2);
    for ch in 0..c {
        for k in 0..plane_out {
            let o = ch * plane_out + k;
            let idx = ch * h * w + argmax[o] as usize;
            dinput[idx] = dinput[idx] + dout[o];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv3x3(input: &[f64], c_in: usize, h: usize, w: usize, weight: &[f64], bias: &[f64], c_out: usize) -> Vec<f64> {
        let mut out = vec![0.0; c_out * h * w];
        for o in 0..c_out {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut acc = bias[o];
                    for i in 0..c_in {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (sy, sx) = (y + ky - 1, x + kx - 1);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += weight[((o * c_in + i) * 3 + ky as usize) * 3 + kx as usize]
                                    * input[i * h * w + sy as usize * w + sx as usize];
                            }
                        }
                    }
                    out[o * h * w + y as usize * w + x as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv3x3_matches_naive() {
        let (c_in, c_out, h, w) = (2, 3, 5, 4);
        let input: Vec<f64> = (0..c_in * h * w).map(|k| ((k * 37) % 11) as f64 - 5.0).collect();
        let weight: Vec<f64> = (0..c_out * c_in * 9).map(|k| ((k * 13) % 7) as f64 / 3.0 - 1.0).collect();
        let bias = vec![0.5, -1.0, 2.0];
        let mut out = vec![0.0; c_out * h * w];
        conv3x3_forward(&input, c_in, h, w, &weight, &bias, c_out, &mut out);
        for (a, b) in out.iter().zip(naive_conv3x3(&input, c_in, h, w, &weight, &bias, c_out)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn conv3x3_backward_is_adjoint() {
        // <dout, conv(x)> is linear in x and w; its gradients must match the
        // naive forward perturbed along each coordinate.
        let (c_in, c_out, h, w) = (2, 2, 4, 3);
        let input: Vec<f64> = (0..c_in * h * w).map(|k| ((k * 17) % 9) as f64 / 4.0 - 1.0).collect();
        let weight: Vec<f64> = (0..c_out * c_in * 9).map(|k| ((k * 5) % 7) as f64 / 3.0 - 1.0).collect();
        let bias = vec![0.1, -0.2];
        let dout: Vec<f64> = (0..c_out * h * w).map(|k| ((k * 7) % 5) as f64 - 2.0).collect();
        let f = |x: &[f64], wt: &[f64]| -> f64 {
            naive_conv3x3(x, c_in, h, w, wt, &bias, c_out).iter().zip(&dout).map(|(a, b)| a * b).sum()
        };
        let mut dw = vec![0.0; weight.len()];
        let mut db = vec![0.0; 2];
        let mut dx = vec![0.0; input.len()];
        conv3x3_backward(&input, c_in, h, w, &weight, c_out, &dout, &mut dw, &mut db, Some(&mut dx));
        for k in 0..input.len() {
            let mut x2 = input.clone();
            x2[k] += 1.0;
            assert!((f(&x2, &weight) - f(&input, &weight) - dx[k]).abs() < 1e-9);
        }
        for k in 0..weight.len() {
            let mut w2 = weight.clone();
            w2[k] += 1.0;
            assert!((f(&input, &w2) - f(&input, &weight) - dw[k]).abs() < 1e-9);
        }
        assert_eq!(db[0], dout[..h * w].iter().sum::<f64>());
    }

    #[test]
    fn maxpool_picks_max_and_routes_gradient() {
        let input = vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 7.0, 1.0];
        // one channel, 2x4
        let mut out = vec![0.0; 2];
        let mut arg = vec![0u32; 2];
        maxpool2_forward(&input, 1, 2, 4, &mut out, &mut arg);
        assert_eq!(out, vec![5.0, 7.0]);
        let mut din = vec![0.0; 8];
        maxpool2_backward(1, 2, 4, &arg, &[1.0, 2.0], &mut din);
        assert_eq!(din, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
    }
}
