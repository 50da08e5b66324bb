// Forward/backward kernels shared by the reconstructor and the autoencoder
// baseline. All tensors are channels-last; convolutions use "same" zero
// padding and run as one GEMM per kernel tap.

use alloc::vec;
use alloc::vec::Vec;

use crate::math::sigmoid;
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub(crate) const LEAKY_SLOPE: f64 = 0.01;

/// `c = a * b` (or `c += a * b` when `accumulate`), with explicit strides so
/// transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the debug assertions above describe the extent touched by the
    // kernel; every caller passes buffers sized from the same dimensions.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Shape of one convolution: `kernel x kernel x in_ch x out_ch` weights plus
/// `out_ch` biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvShape {
    pub kernel: usize,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl ConvShape {
    #[cfg(test)]
    pub fn weight_len(&self) -> usize {
        self.kernel * self.kernel * self.in_ch * self.out_ch
    }

    pub fn fan_in(&self) -> usize {
        self.kernel * self.kernel * self.in_ch
    }
}

/// What a convolution needs to keep for its backward pass.
pub(crate) struct ConvCache {
    /// Zero-padded input, row pitch `width + kernel - 1`, with `kernel - 1`
    /// trailing pixels of slack so every shifted view stays in bounds.
    padded: Vec<f64>,
    height: usize,
    width: usize,
}

/// Row pitch and total pixel count of the padded buffer.
fn padded_dims(h: usize, w: usize, kernel: usize) -> (usize, usize) {
    let wp = w + kernel - 1;
    (wp, (h + kernel - 1) * wp + kernel - 1)
}

fn pad_input(x: &Tensor, kernel: usize) -> Vec<f64> {
    let (h, w, c) = x.shape();
    let pad = kernel / 2;
    let (wp, len) = padded_dims(h, w, kernel);
    let mut buf = vec![0.0; len * c];
    for y in 0..h {
        let dst = ((y + pad) * wp + pad) * c;
        buf[dst..dst + w * c].copy_from_slice(&x.data()[y * w * c..(y + 1) * w * c]);
    }
    buf
}

// Output pixel (y, x) lives at row y * wp + x of a `h * wp` matrix; the
// columns x >= w are scratch. Kernel tap (ky, kx) then reads the padded input
// at the constant flat shift ky * wp + kx, so each tap is one GEMM.

pub(crate) fn conv_forward(
    x: &Tensor,
    shape: ConvShape,
    weight: &[f64],
    bias: &[f64],
) -> (Tensor, ConvCache) {
    debug_assert_eq!(x.channels(), shape.in_ch);
    let (h, w, _) = x.shape();
    let (k, cin, cout) = (shape.kernel, shape.in_ch, shape.out_ch);
    let padded = pad_input(x, k);
    let (wp, _) = padded_dims(h, w, k);
    let m = h * wp;
    let mut wide = vec![0.0; m * cout];
    for ky in 0..k {
        for kx in 0..k {
            let a = &padded[(ky * wp + kx) * cin..];
            let b = &weight[(ky * k + kx) * cin * cout..];
            gemm(m, cin, cout, a, cin, 1, b, cout, 1, &mut wide, true);
        }
    }
    let mut out = Tensor::zeros(h, w, cout);
    let o = out.data_mut();
    for y in 0..h {
        for xx in 0..w {
            let src = &wide[(y * wp + xx) * cout..(y * wp + xx + 1) * cout];
            let dst = &mut o[(y * w + xx) * cout..(y * w + xx + 1) * cout];
            for ((d, s), b) in dst.iter_mut().zip(src).zip(bias) {
                *d = s + b;
            }
        }
    }
    (
        out,
        ConvCache {
            padded,
            height: h,
            width: w,
        },
    )
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `need_input_grad`.
pub(crate) fn conv_backward(
    cache: &ConvCache,
    grad_out: &Tensor,
    shape: ConvShape,
    weight: &[f64],
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    need_input_grad: bool,
) -> Option<Tensor> {
    let (h, w) = (cache.height, cache.width);
    let (k, cin, cout) = (shape.kernel, shape.in_ch, shape.out_ch);
    let (wp, len) = padded_dims(h, w, k);
    let m = h * wp;
    let go = grad_out.data();
    for px in go.chunks_exact(cout) {
        for (b, g) in grad_bias.iter_mut().zip(px) {
            *b += g;
        }
    }
    // Scratch columns stay zero so they contribute nothing below.
    let mut wide = vec![0.0; m * cout];
    for y in 0..h {
        wide[y * wp * cout..(y * wp + w) * cout].copy_from_slice(&go[y * w * cout..(y + 1) * w * cout]);
    }
    for ky in 0..k {
        for kx in 0..k {
            let a = &cache.padded[(ky * wp + kx) * cin..];
            let gw = &mut grad_weight[(ky * k + kx) * cin * cout..(ky * k + kx + 1) * cin * cout];
            gemm(cin, m, cout, a, 1, cin, &wide, cout, 1, gw, true);
        }
    }
    if !need_input_grad {
        return None;
    }
    let mut dpad = vec![0.0; len * cin];
    for ky in 0..k {
        for kx in 0..k {
            let b = &weight[(ky * k + kx) * cin * cout..];
            let c = &mut dpad[(ky * wp + kx) * cin..];
            gemm(m, cout, cin, &wide, cout, 1, b, 1, cout, c, true);
        }
    }
    let pad = k / 2;
    let mut dx = Tensor::zeros(h, w, cin);
    let d = dx.data_mut();
    for y in 0..h {
        let src = ((y + pad) * wp + pad) * cin;
        d[y * w * cin..(y + 1) * w * cin].copy_from_slice(&dpad[src..src + w * cin]);
    }
    Some(dx)
}

pub(crate) fn leaky_relu(pre: &Tensor) -> Tensor {
    pre.map(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
}

pub(crate) fn leaky_relu_backward(pre: &Tensor, grad: &mut Tensor) {
    for (g, &p) in grad.data_mut().iter_mut().zip(pre.data()) {
        if p <= 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
}

pub(crate) fn sigmoid_forward(pre: &Tensor) -> Tensor {
    pre.map(sigmoid)
}

pub(crate) fn sigmoid_backward(out: &Tensor, grad: &mut Tensor) {
    for (g, &y) in grad.data_mut().iter_mut().zip(out.data()) {
        *g *= y * (1.0 - y);
    }
}

/// 2x2 average pooling; `H` and `W` must be even.
pub(crate) fn avg_pool2(x: &Tensor) -> Tensor {
    let (h, w, c) = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(oh, ow, c);
    let src = x.data();
    let dst = out.data_mut();
    for y in 0..oh {
        for xx in 0..ow {
            let o = (y * ow + xx) * c;
            let a = ((2 * y) * w + 2 * xx) * c;
            let b = a + c;
            let d = ((2 * y + 1) * w + 2 * xx) * c;
            let e = d + c;
            for ch in 0..c {
                dst[o + ch] = 0.25 * (src[a + ch] + src[b + ch] + src[d + ch] + src[e + ch]);
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward(grad: &Tensor) -> Tensor {
    let (oh, ow, c) = grad.shape();
    let (h, w) = (oh * 2, ow * 2);
    Tensor::from_fn(h, w, c, |y, x, ch| 0.25 * grad.get(y / 2, x / 2, ch))
}

/// Nearest-neighbor 2x upsampling.
pub(crate) fn upsample2(x: &Tensor) -> Tensor {
    let (h, w, c) = x.shape();
    Tensor::from_fn(h * 2, w * 2, c, |y, xx, ch| x.get(y / 2, xx / 2, ch))
}

pub(crate) fn upsample2_backward(grad: &Tensor) -> Tensor {
    // Summing each 2x2 block is 4x the average pool.
    let mut pooled = avg_pool2(grad);
    pooled.data_mut().iter_mut().for_each(|v| *v *= 4.0);
    pooled
}

/// Concatenate along channels: `[a | b]`.
pub(crate) fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    let (h, w, ca) = a.shape();
    let cb = b.channels();
    let mut data = Vec::with_capacity(h * w * (ca + cb));
    for (pa, pb) in a.data().chunks_exact(ca).zip(b.data().chunks_exact(cb)) {
        data.extend_from_slice(pa);
        data.extend_from_slice(pb);
    }
    Tensor::from_vec(h, w, ca + cb, data).expect("concat shape")
}

pub(crate) fn split_channels(x: &Tensor, first: usize) -> (Tensor, Tensor) {
    let (h, w, c) = x.shape();
    let second = c - first;
    let mut a = Vec::with_capacity(h * w * first);
    let mut b = Vec::with_capacity(h * w * second);
    for px in x.data().chunks_exact(c) {
        a.extend_from_slice(&px[..first]);
        b.extend_from_slice(&px[first..]);
    }
    (
        Tensor::from_vec(h, w, first, a).expect("split shape"),
        Tensor::from_vec(h, w, second, b).expect("split shape"),
    )
}

pub(crate) fn add_assign(dst: &mut Tensor, src: &Tensor) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

/// Fully connected layer on a flat vector; weights are `in x out`.
pub(crate) fn dense_forward(x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = bias.len();
    let mut out = bias.to_vec();
    gemm(1, x.len(), n, x, x.len(), 1, weight, n, 1, &mut out, true);
    out
}

pub(crate) fn dense_backward(
    x: &[f64],
    grad_out: &[f64],
    weight: &[f64],
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    need_input_grad: bool,
) -> Option<Vec<f64>> {
    let n = grad_out.len();
    let m = x.len();
    gemm(m, 1, n, x, 1, 1, grad_out, n, 1, grad_weight, true);
    for (b, g) in grad_bias.iter_mut().zip(grad_out) {
        *b += g;
    }
    if !need_input_grad {
        return None;
    }
    let mut gx = vec![0.0; m];
    gemm(1, n, m, grad_out, n, 1, weight, 1, n, &mut gx, false);
    Some(gx)
}

/// Cache of a two-convolution block (`conv -> leaky -> conv -> leaky`).
pub(crate) struct BlockCache {
    conv0: ConvCache,
    pre0: Tensor,
    conv1: ConvCache,
    pre1: Tensor,
}

/// Run the block whose convolutions sit at parameter pairs `first` and
/// `first + 1`.
pub(crate) fn block_forward(
    params: &ParamSet,
    shapes: &[ConvShape],
    first: usize,
    x: &Tensor,
) -> (Tensor, BlockCache) {
    let (w0, b0) = params.conv(first);
    let (pre0, conv0) = conv_forward(x, shapes[first], w0, b0);
    let a0 = leaky_relu(&pre0);
    let (w1, b1) = params.conv(first + 1);
    let (pre1, conv1) = conv_forward(&a0, shapes[first + 1], w1, b1);
    let a1 = leaky_relu(&pre1);
    (
        a1,
        BlockCache {
            conv0,
            pre0,
            conv1,
            pre1,
        },
    )
}

pub(crate) fn block_backward(
    params: &ParamSet,
    shapes: &[ConvShape],
    first: usize,
    cache: &BlockCache,
    mut grad: Tensor,
    grads: &mut ParamSet,
    need_input_grad: bool,
) -> Option<Tensor> {
    leaky_relu_backward(&cache.pre1, &mut grad);
    let (w1, _) = params.conv(first + 1);
    let (gw, gb) = grads.conv_mut(first + 1);
    let mut g0 = conv_backward(&cache.conv1, &grad, shapes[first + 1], w1, gw, gb, true)
        .expect("input grad requested");
    leaky_relu_backward(&cache.pre0, &mut g0);
    let (w0, _) = params.conv(first);
    let (gw, gb) = grads.conv_mut(first);
    conv_backward(&cache.conv0, &g0, shapes[first], w0, gw, gb, need_input_grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, s: ConvShape, w: &[f64], b: &[f64]) -> Tensor {
        let (h, wd, _) = x.shape();
        let p = (s.kernel / 2) as isize;
        Tensor::from_fn(h, wd, s.out_ch, |y, xx, o| {
            let mut acc = b[o];
            for ky in 0..s.kernel {
                for kx in 0..s.kernel {
                    let sy = y as isize + ky as isize - p;
                    let sx = xx as isize + kx as isize - p;
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                        continue;
                    }
                    for i in 0..s.in_ch {
                        let wi = ((ky * s.kernel + kx) * s.in_ch + i) * s.out_ch + o;
                        acc += w[wi] * x.get(sy as usize, sx as usize, i);
                    }
                }
            }
            acc
        })
    }

    fn pseudo(n: usize, salt: usize) -> Vec<f64> {
        (0..n).map(|i| (((i * 7919 + salt * 104729) % 1000) as f64) / 500.0 - 1.0).collect()
    }

    #[test]
    fn conv_matches_naive_loops() {
        for kernel in [1, 3, 5] {
            let s = ConvShape {
                kernel,
                in_ch: 3,
                out_ch: 4,
            };
            let x = Tensor::from_vec(6, 5, 3, pseudo(90, 1)).unwrap();
            let w = pseudo(s.weight_len(), 2);
            let b = pseudo(4, 3);
            let (got, _) = conv_forward(&x, s, &w, &b);
            let want = naive_conv(&x, s, &w, &b);
            for (a, e) in got.data().iter().zip(want.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x) - b, g> == <x, dx(g)> and == <w, dw(g)>
        let s = ConvShape {
            kernel: 3,
            in_ch: 2,
            out_ch: 3,
        };
        let x = Tensor::from_vec(5, 4, 2, pseudo(40, 4)).unwrap();
        let w = pseudo(s.weight_len(), 5);
        let zero_b = vec![0.0; 3];
        let (y, cache) = conv_forward(&x, s, &w, &zero_b);
        let g = Tensor::from_vec(5, 4, 3, pseudo(60, 6)).unwrap();
        let mut gw = vec![0.0; s.weight_len()];
        let mut gb = vec![0.0; 3];
        let gx = conv_backward(&cache, &g, s, &w, &mut gw, &mut gb, true).unwrap();
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rx: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        let rw: f64 = w.iter().zip(&gw).map(|(a, b)| a * b).sum();
        assert!((lhs - rx).abs() < 1e-10);
        assert!((lhs - rw).abs() < 1e-10);
        assert!((gb.iter().sum::<f64>() - g.sum()).abs() < 1e-12);
    }

    #[test]
    fn pool_and_upsample_are_adjoint_up_to_scale() {
        let x = Tensor::from_vec(4, 6, 2, pseudo(48, 7)).unwrap();
        let g = Tensor::from_vec(2, 3, 2, pseudo(12, 8)).unwrap();
        let lhs: f64 = avg_pool2(&x).data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x
            .data()
            .iter()
            .zip(avg_pool2_backward(&g).data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
        let up = upsample2(&g);
        let lhs: f64 = up.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = g
            .data()
            .iter()
            .zip(upsample2_backward(&x).data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn concat_split_roundtrip() {
        let a = Tensor::from_vec(2, 2, 1, pseudo(4, 9)).unwrap();
        let b = Tensor::from_vec(2, 2, 3, pseudo(12, 10)).unwrap();
        let (a2, b2) = split_channels(&concat(&a, &b), 1);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }

    #[test]
    fn dense_backward_is_adjoint() {
        let x = pseudo(5, 11);
        let w = pseudo(15, 12);
        let zero_b = vec![0.0; 3];
        let y = dense_forward(&x, &w, &zero_b);
        let g = pseudo(3, 13);
        let mut gw = vec![0.0; 15];
        let mut gb = vec![0.0; 3];
        let gx = dense_backward(&x, &g, &w, &mut gw, &mut gb, true).unwrap();
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rx: f64 = x.iter().zip(&gx).map(|(a, b)| a * b).sum();
        let rw: f64 = w.iter().zip(&gw).map(|(a, b)| a * b).sum();
        assert!((lhs - rx).abs() < 1e-12);
        assert!((lhs - rw).abs() < 1e-12);
    }
}
