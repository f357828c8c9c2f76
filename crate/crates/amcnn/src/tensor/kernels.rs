//! Raw numeric kernels behind the tensor ops.
//!
//! All kernels work on flat row-major buffers. Convolutions use "same"
//! zero padding; the shift-and-accumulate layout keeps the inner loops
//! over contiguous row slices so they vectorize.

use crate::scalar::{compensated_sum, Scalar};

/// Valid output range along one axis for a kernel offset `d`:
/// positions `i` with `i + d` in `[0, n)`.
#[inline]
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).clamp(0, n as isize) as usize;
    (lo, hi)
}

/// Same-padded 2-D convolution. `input` is `[c_in, h, w]`, `weight` is
/// `[c_out, c_in, k, k]` with `k` odd, `bias` is `[c_out]`, `out` is
/// `[c_out, h, w]`.
pub fn conv2d_forward<T: Scalar>(
    input: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[T],
    c_out: usize,
    k: usize,
    bias: &[T],
    out: &mut [T],
) {
    let p = (k / 2) as isize;
    let plane = h * w;
    for oc in 0..c_out {
        let out_c = &mut out[oc * plane..(oc + 1) * plane];
        out_c.fill(bias[oc]);
        for ic in 0..c_in {
            let in_c = &input[ic * plane..(ic + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - p;
                let (y_lo, y_hi) = valid_range(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - p;
                    let (x_lo, x_hi) = valid_range(w, dx);
                    if x_lo >= x_hi {
                        continue;
                    }
                    let len = x_hi - x_lo;
                    let wv = weight[((oc * c_in + ic) * k + ky) * k + kx];
                    for y in y_lo..y_hi {
                        let src_off = (y as isize + dy) as usize * w + (x_lo as isize + dx) as usize;
                        let src = &in_c[src_off..src_off + len];
                        let dst = &mut out_c[y * w + x_lo..y * w + x_lo + len];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * *s;
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of the same-padded convolution w.r.t. its input.
pub fn conv2d_backward_input<T: Scalar>(
    weight: &[T],
    grad_out: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    grad_input: &mut [T],
) {
    let p = (k / 2) as isize;
    let plane = h * w;
    for oc in 0..c_out {
        let g_c = &grad_out[oc * plane..(oc + 1) * plane];
        for ic in 0..c_in {
            let gin_c = &mut grad_input[ic * plane..(ic + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - p;
                let (y_lo, y_hi) = valid_range(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - p;
                    let (x_lo, x_hi) = valid_range(w, dx);
                    if x_lo >= x_hi {
                        continue;
                    }
                    let len = x_hi - x_lo;
                    let wv = weight[((oc * c_in + ic) * k + ky) * k + kx];
                    for y in y_lo..y_hi {
                        let dst_off = (y as isize + dy) as usize * w + (x_lo as isize + dx) as usize;
                        let src = &g_c[y * w + x_lo..y * w + x_lo + len];
                        let dst = &mut gin_c[dst_off..dst_off + len];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * *s;
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of the same-padded convolution w.r.t. its weight.
pub fn conv2d_backward_weight<T: Scalar>(
    input: &[T],
    grad_out: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    grad_weight: &mut [T],
) {
    let p = (k / 2) as isize;
    let plane = h * w;
    for oc in 0..c_out {
        let g_c = &grad_out[oc * plane..(oc + 1) * plane];
        for ic in 0..c_in {
            let in_c = &input[ic * plane..(ic + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - p;
                let (y_lo, y_hi) = valid_range(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - p;
                    let (x_lo, x_hi) = valid_range(w, dx);
                    if x_lo >= x_hi {
                        continue;
                    }
                    let len = x_hi - x_lo;
                    let mut acc = T::zero();
                    for y in y_lo..y_hi {
                        let in_off = (y as isize + dy) as usize * w + (x_lo as isize + dx) as usize;
                        let g_row = &g_c[y * w + x_lo..y * w + x_lo + len];
                        let in_row = &in_c[in_off..in_off + len];
                        for (g, s) in g_row.iter().zip(in_row) {
                            acc += *g * *s;
                        }
                    }
                    grad_weight[((oc * c_in + ic) * k + ky) * k + kx] += acc;
                }
            }
        }
    }
}

/// Gradient of the same-padded convolution w.r.t. its bias.
pub fn conv2d_backward_bias<T: Scalar>(grad_out: &[T], c_out: usize, plane: usize, grad_bias: &mut [T]) {
    for oc in 0..c_out {
        let mut acc = T::zero();
        for g in &grad_out[oc * plane..(oc + 1) * plane] {
            acc += *g;
        }
        grad_bias[oc] += acc;
    }
}

/// Non-overlapping 2x2 max pooling. `argmax` receives, per output cell,
/// the flat index into `input` of the selected cell; ties go to the
/// first cell in row-major order.
pub fn maxpool2x2_forward<T: Scalar>(
    input: &[T],
    c: usize,
    h: usize,
    w: usize,
    out: &mut [T],
    argmax: &mut [usize],
) {
    let (oh, ow) = (h / 2, w / 2);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = base + (2 * oy) * w + 2 * ox;
                let candidates = [i0, i0 + 1, i0 + w, i0 + w + 1];
                let mut best = candidates[0];
                for &i in &candidates[1..] {
                    if input[i] > input[best] {
                        best = i;
                    }
                }
                let o = ch * oh * ow + oy * ow + ox;
                out[o] = input[best];
                argmax[o] = best;
            }
        }
    }
}

/// Spatial softmax over a single-channel map, with max subtraction for
/// overflow safety. The normalizer is summed with compensation so the
/// output mass stays within ~1 ulp of 1 even for 512x512 maps.
pub fn spatial_softmax_forward<T: Scalar>(input: &[T], out: &mut [T]) {
    let max = input.iter().copied().fold(T::neg_infinity(), T::max);
    for (o, x) in out.iter_mut().zip(input) {
        *o = (*x - max).exp();
    }
    let total = compensated_sum(out.iter().copied());
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Reference convolution: direct per-output-pixel quadruple loop,
    /// structured differently from the production kernel.
    fn conv2d_naive(
        input: &[f64],
        c_in: usize,
        h: usize,
        w: usize,
        weight: &[f64],
        c_out: usize,
        k: usize,
        bias: &[f64],
    ) -> Vec<f64> {
        let p = (k / 2) as isize;
        let mut out = vec![0.0; c_out * h * w];
        for oc in 0..c_out {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut acc = bias[oc];
                    for ic in 0..c_in {
                        for ky in 0..k as isize {
                            for kx in 0..k as isize {
                                let (sy, sx) = (y + ky - p, x + kx - p);
                                if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                    acc += input[ic * h * w + sy as usize * w + sx as usize]
                                        * weight[((oc * c_in + ic) * k as usize + ky as usize) * k as usize
                                            + kx as usize];
                                }
                            }
                        }
                    }
                    out[oc * h * w + y as usize * w + x as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_is_identity() {
        let input = [1.0, -2.0, 3.0, 4.0, 0.5, -0.25, 7.0, 8.0, 9.0];
        let mut out = [0.0; 9];
        conv2d_forward(&input, 1, 3, 3, &[1.0], 1, 1, &[0.0], &mut out);
        assert_eq!(out, input);
    }

    #[test]
    fn single_pixel_all_ones_kernel_sees_only_center() {
        // 1x1x1 input [5], 3x3 ones weight, bias [1]: padding contributes zeros.
        let mut out = [0.0];
        conv2d_forward(&[5.0], 1, 1, 1, &[1.0; 9], 1, 3, &[1.0], &mut out);
        assert_eq!(out, [6.0]);
    }

    #[test]
    fn matches_naive_reference() {
        let (c_in, h, w, c_out, k) = (2, 5, 4, 3, 3);
        let input: Vec<f64> = (0..c_in * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let weight: Vec<f64> = (0..c_out * c_in * k * k).map(|i| (i as f64 * 0.13).cos()).collect();
        let bias = vec![0.1, -0.2, 0.3];
        let mut out = vec![0.0; c_out * h * w];
        conv2d_forward(&input, c_in, h, w, &weight, c_out, k, &bias, &mut out);
        let want = conv2d_naive(&input, c_in, h, w, &weight, c_out, k, &bias);
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn maxpool_single_window() {
        let mut out = [0.0];
        let mut arg = [0usize];
        maxpool2x2_forward(&[1.0, 2.0, 3.0, 4.0], 1, 2, 2, &mut out, &mut arg);
        assert_eq!(out, [4.0]);
        assert_eq!(arg, [3]);
    }

    #[test]
    fn maxpool_tie_picks_first_in_row_major_order() {
        let mut out = [0.0];
        let mut arg = [9usize];
        maxpool2x2_forward(&[7.0; 4], 1, 2, 2, &mut out, &mut arg);
        assert_eq!(out, [7.0]);
        assert_eq!(arg, [0]);
    }

    #[test]
    fn maxpool_constant_map_quarter_area() {
        let input = vec![2.5; 2 * 4 * 6];
        let mut out = vec![0.0; 2 * 2 * 3];
        let mut arg = vec![0usize; 2 * 2 * 3];
        maxpool2x2_forward(&input, 2, 4, 6, &mut out, &mut arg);
        assert!(out.iter().all(|&v| v == 2.5));
    }

    #[test]
    fn softmax_uniform_input() {
        let mut out = [0.0f64; 6];
        spatial_softmax_forward(&[3.25; 6], &mut out);
        for v in out {
            assert!((v - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_hand_example() {
        // exp of [ln1, ln2, ln3, ln4] normalizes to [0.1, 0.2, 0.3, 0.4].
        let input = [1.0f64.ln(), 2.0f64.ln(), 3.0f64.ln(), 4.0f64.ln()];
        let mut out = [0.0; 4];
        spatial_softmax_forward(&input, &mut out);
        let want = [0.1, 0.2, 0.3, 0.4];
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_survives_large_scores() {
        let mut out = [0.0; 2];
        spatial_softmax_forward(&[800.0, 800.0], &mut out);
        assert_eq!(out, [0.5, 0.5]);
    }
}
