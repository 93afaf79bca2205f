//! Dense kernels shared by the forward and backward passes. Tensors are
//! row-major slices; the hot loops are written as contiguous axpy / dot
//! products so they vectorize.

use super::{lit, Scalar};
use crate::codec::Layout;

#[inline]
pub(crate) fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

pub(crate) fn pad_left(kernel: usize) -> usize {
    (kernel - 1) / 2
}

/// Copies `channels x len` rows into rows of `len + kernel - 1` with zeros on
/// both sides ("same" padding; the extra sample goes right for even kernels).
pub(crate) fn pad_rows<T: Scalar>(x: &[T], channels: usize, len: usize, kernel: usize) -> Vec<T> {
    let plen = len + kernel - 1;
    let left = pad_left(kernel);
    let mut out = vec![T::zero(); channels * plen];
    for c in 0..channels {
        out[c * plen + left..c * plen + left + len].copy_from_slice(&x[c * len..(c + 1) * len]);
    }
    out
}

/// Stride-1 convolution over padded input rows; output is `c_out x len`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_forward<T: Scalar>(
    xpad: &[T],
    c_in: usize,
    len: usize,
    weight: &[T],
    bias: &[T],
    c_out: usize,
    kernel: usize,
    out: &mut [T],
) {
    let plen = len + kernel - 1;
    for o in 0..c_out {
        let row = &mut out[o * len..(o + 1) * len];
        row.fill(bias[o]);
        for c in 0..c_in {
            let xrow = &xpad[c * plen..(c + 1) * plen];
            let wrow = &weight[(o * c_in + c) * kernel..(o * c_in + c + 1) * kernel];
            for (k, &w) in wrow.iter().enumerate() {
                axpy(w, &xrow[k..k + len], row);
            }
        }
    }
}

/// Accumulates weight/bias gradients and, when requested, the gradient with
/// respect to the padded input.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Scalar>(
    xpad: &[T],
    c_in: usize,
    len: usize,
    weight: &[T],
    c_out: usize,
    kernel: usize,
    dout: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
    mut dxpad: Option<&mut [T]>,
) {
    let plen = len + kernel - 1;
    for o in 0..c_out {
        let drow = &dout[o * len..(o + 1) * len];
        dbias[o] += drow.iter().copied().sum::<T>();
        for c in 0..c_in {
            let xrow = &xpad[c * plen..(c + 1) * plen];
            let base = (o * c_in + c) * kernel;
            for k in 0..kernel {
                dweight[base + k] += dot(drow, &xrow[k..k + len]);
            }
            if let Some(dx) = dxpad.as_deref_mut() {
                let dxrow = &mut dx[c * plen..(c + 1) * plen];
                for k in 0..kernel {
                    axpy(weight[base + k], drow, &mut dxrow[k..k + len]);
                }
            }
        }
    }
}

/// ReLU followed by non-overlapping average pooling (trailing remainder
/// dropped).
pub(crate) fn relu_pool_forward<T: Scalar>(pre: &[T], channels: usize, len: usize, width: usize) -> Vec<T> {
    let out_len = len / width;
    let scale = T::one() / lit::<T>(width as f64);
    let mut out = vec![T::zero(); channels * out_len];
    for c in 0..channels {
        let row = &pre[c * len..(c + 1) * len];
        for j in 0..out_len {
            let s: T = row[j * width..(j + 1) * width]
                .iter()
                .map(|&v| v.max(T::zero()))
                .sum();
            out[c * out_len + j] = s * scale;
        }
    }
    out
}

pub(crate) fn relu_pool_backward<T: Scalar>(
    pre: &[T],
    channels: usize,
    len: usize,
    width: usize,
    dpooled: &[T],
) -> Vec<T> {
    let out_len = len / width;
    let scale = T::one() / lit::<T>(width as f64);
    let mut dpre = vec![T::zero(); channels * len];
    for c in 0..channels {
        for j in 0..out_len {
            let g = dpooled[c * out_len + j] * scale;
            for t in j * width..(j + 1) * width {
                if pre[c * len + t] > T::zero() {
                    dpre[c * len + t] = g;
                }
            }
        }
    }
    dpre
}

/// `out = W x + b` with `W` of shape `rows x x.len()`.
pub(crate) fn dense_forward<T: Scalar>(weight: &[T], bias: &[T], x: &[T]) -> Vec<T> {
    let cols = x.len();
    bias.iter()
        .enumerate()
        .map(|(r, &b)| b + dot(&weight[r * cols..(r + 1) * cols], x))
        .collect()
}

/// Accumulates `dW += dout x^T`, `db += dout`, and returns `W^T dout`.
pub(crate) fn dense_backward<T: Scalar>(
    weight: &[T],
    x: &[T],
    dout: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
) -> Vec<T> {
    let cols = x.len();
    let mut dx = vec![T::zero(); cols];
    for (r, &g) in dout.iter().enumerate() {
        dbias[r] += g;
        if g == T::zero() {
            continue;
        }
        axpy(g, x, &mut dweight[r * cols..(r + 1) * cols]);
        axpy(g, &weight[r * cols..(r + 1) * cols], &mut dx);
    }
    dx
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softmax_in_place<T: Scalar>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x = *x / sum;
    }
}

/// Head output activations: softmax over each categorical block, sigmoid
/// over presence units, identity over coordinates.
pub fn head_activations<T: Scalar>(logits: &[T], layout: &Layout) -> Vec<T> {
    let mut out = logits.to_vec();
    for g in layout.softmax_groups() {
        softmax_in_place(&mut out[g]);
    }
    for i in layout.presence_slots() {
        out[i] = sigmoid(logits[i]);
    }
    out
}

/// Maps a gradient with respect to the activated outputs back onto the
/// head logits.
pub fn head_backward<T: Scalar>(outputs: &[T], doutputs: &[T], layout: &Layout) -> Vec<T> {
    let mut dlogits = doutputs.to_vec();
    for g in layout.softmax_groups() {
        let inner: T = g.clone().map(|i| doutputs[i] * outputs[i]).sum();
        for i in g {
            dlogits[i] = outputs[i] * (doutputs[i] - inner);
        }
    }
    for i in layout.presence_slots() {
        dlogits[i] = doutputs[i] * outputs[i] * (T::one() - outputs[i]);
    }
    dlogits
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Assembly;

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..37).map(|i| (i as f64 * 0.7).sin()).collect();
        let b: Vec<f64> = (0..37).map(|i| (i as f64 * 1.3).cos()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn conv_same_padding_matches_direct_sum() {
        let (c_in, c_out, len, k) = (2, 3, 11, 4);
        let x: Vec<f64> = (0..c_in * len).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..c_out * c_in * k).map(|i| (i as f64 * 0.11).cos()).collect();
        let b = vec![0.1, -0.2, 0.3];
        let xpad = pad_rows(&x, c_in, len, k);
        let mut out = vec![0.0; c_out * len];
        conv_forward(&xpad, c_in, len, &w, &b, c_out, k, &mut out);
        let left = pad_left(k) as i64;
        for o in 0..c_out {
            for t in 0..len {
                let mut s = b[o];
                for c in 0..c_in {
                    for kk in 0..k {
                        let src = t as i64 + kk as i64 - left;
                        if (0..len as i64).contains(&src) {
                            s += w[(o * c_in + c) * k + kk] * x[c * len + src as usize];
                        }
                    }
                }
                assert!((out[o * len + t] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pool_drops_remainder() {
        let pre = vec![1.0, -2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        let out = relu_pool_forward(&pre, 1, 7, 3);
        assert_eq!(out, vec![4.0 / 3.0, 5.0]);
        let d = relu_pool_backward(&pre, 1, 7, 3, &[3.0, 6.0]);
        assert_eq!(d, vec![1.0, 0.0, 1.0, 2.0, 2.0, 2.0, 0.0]);
    }

    #[test]
    fn zero_logits_activation() {
        let layout = Assembly::SAR.layout();
        let out = head_activations(&[0.0f64; 13], &layout);
        for v in &out[..5] {
            assert!((v - 0.2).abs() < 1e-15);
        }
        assert_eq!(out[5], 0.5);
        assert_eq!(out[8], 0.5);
        assert_eq!((out[9], out[10]), (0.5, 0.5));
        assert_eq!((out[6], out[7], out[11], out[12]), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn head_backward_finite_difference() {
        let layout = Assembly::SAR.layout();
        let logits: Vec<f64> = (0..13).map(|i| (i as f64 * 0.9).sin()).collect();
        let dy: Vec<f64> = (0..13).map(|i| (i as f64 * 0.4).cos()).collect();
        let f = |z: &[f64]| -> f64 {
            head_activations(z, &layout).iter().zip(&dy).map(|(a, b)| a * b).sum()
        };
        let analytic = head_backward(&head_activations(&logits, &layout), &dy, &layout);
        for i in 0..13 {
            let mut p = logits.clone();
            let mut m = logits.clone();
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let fd = (f(&p) - f(&m)) / 2e-6;
            assert!((fd - analytic[i]).abs() < 1e-8, "{i}: {fd} vs {}", analytic[i]);
        }
    }
}
