//! Forward and backward passes for the non-kernel layer primitives.
//!
//! All image tensors are laid out `[N, C, H, W]`. Convolution is a valid
//! (unpadded) cross-correlation; pooling uses non-overlapping square windows.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradients of an affine layer (convolution or linear) with respect to its three inputs.
#[derive(Debug, Clone)]
pub struct AffineGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
}

fn conv_geometry(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize) -> Result<ConvGeometry> {
    input.expect_rank(4, "conv2d input")?;
    weight.expect_rank(4, "conv2d weight")?;
    if stride == 0 {
        return Err(Error::Parameter("conv2d stride must be positive".into()));
    }
    let (n, c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
    let (f, wc, kh, kw) = (weight.shape()[0], weight.shape()[1], weight.shape()[2], weight.shape()[3]);
    if wc != c {
        return Err(Error::Dimension(format!(
            "conv2d axis 1 (channels): input has {c}, weight expects {wc}"
        )));
    }
    if bias.shape() != [f] {
        return Err(Error::Dimension(format!(
            "conv2d bias: expected [{f}], got {:?}",
            bias.shape()
        )));
    }
    if h < kh {
        return Err(Error::Dimension(format!("conv2d axis 2 (height): input {h} < kernel {kh}")));
    }
    if w < kw {
        return Err(Error::Dimension(format!("conv2d axis 3 (width): input {w} < kernel {kw}")));
    }
    Ok(ConvGeometry {
        n,
        c,
        h,
        w,
        f,
        kh,
        kw,
        oh: (h - kh) / stride + 1,
        ow: (w - kw) / stride + 1,
        stride,
    })
}

/// Row-major `c += a · b` for `a: [m, k]`, `b: [k, n]`, with `a` optionally
/// read transposed (stored `[k, m]`) and `b` optionally read transposed
/// (stored `[n, k]`).
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m·k, k·n and m·n
    // elements whose presence the slice lengths guarantee.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unrolls the receptive fields of image `n` into `cols: [C·kh·kw, oh·ow]`.
fn im2col(x: &[f64], g: &ConvGeometry, n: usize, cols: &mut [f64]) {
    let plane = g.oh * g.ow;
    for c in 0..g.c {
        let src = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * plane;
                for oy in 0..g.oh {
                    let dst = &mut cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    let base = (oy * g.stride + ky) * g.w + kx;
                    if g.stride == 1 {
                        dst.copy_from_slice(&src[base..base + g.ow]);
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            *d = src[base + ox * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `cols` back onto image `n` of `gx`.
fn col2im(cols: &[f64], g: &ConvGeometry, n: usize, gx: &mut [f64]) {
    let plane = g.oh * g.ow;
    for c in 0..g.c {
        let dst = &mut gx[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * plane;
                for oy in 0..g.oh {
                    let src = &cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    let base = (oy * g.stride + ky) * g.w + kx;
                    for (ox, s) in src.iter().enumerate() {
                        dst[base + ox * g.stride] += s;
                    }
                }
            }
        }
    }
}

/// Valid cross-correlation: `[N,C,H,W] * [F,C,kh,kw] + [F] -> [N,F,H',W']`.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let g = conv_geometry(input, weight, bias, stride)?;
    let plane = g.oh * g.ow;
    let taps = g.c * g.kh * g.kw;
    let mut cols = vec![0.0; taps * plane];
    let mut out = vec![0.0; g.n * g.f * plane];
    for n in 0..g.n {
        let dst = &mut out[n * g.f * plane..(n + 1) * g.f * plane];
        for (f, chunk) in dst.chunks_mut(plane).enumerate() {
            chunk.fill(bias.data()[f]);
        }
        im2col(input.data(), &g, n, &mut cols);
        gemm(g.f, taps, plane, weight.data(), false, &cols, false, dst);
    }
    Tensor::new(vec![g.n, g.f, g.oh, g.ow], out)
}

/// Exact gradients of [`conv2d`] given the upstream gradient of its output.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    upstream: &Tensor,
) -> Result<AffineGrads> {
    let g = conv_geometry(input, weight, bias, stride)?;
    upstream.expect_shape(&[g.n, g.f, g.oh, g.ow], "conv2d upstream")?;
    let plane = g.oh * g.ow;
    let taps = g.c * g.kh * g.kw;
    let up = upstream.data();
    let mut cols = vec![0.0; taps * plane];
    let mut gcols = vec![0.0; taps * plane];
    let mut gx = vec![0.0; input.len()];
    let mut gw = vec![0.0; weight.len()];
    let mut gb = vec![0.0; g.f];
    for n in 0..g.n {
        let u = &up[n * g.f * plane..(n + 1) * g.f * plane];
        for (b, row) in gb.iter_mut().zip(u.chunks(plane)) {
            *b += row.iter().sum::<f64>();
        }
        im2col(input.data(), &g, n, &mut cols);
        // gW += U · colsᵀ
        gemm(g.f, plane, taps, u, false, &cols, true, &mut gw);
        // gcols = Wᵀ · U
        gcols.fill(0.0);
        gemm(taps, g.f, plane, weight.data(), true, u, false, &mut gcols);
        col2im(&gcols, &g, n, &mut gx);
    }
    Ok(AffineGrads {
        input: Tensor::new(input.shape().to_vec(), gx)?,
        weight: Tensor::new(weight.shape().to_vec(), gw)?,
        bias: Tensor::new(vec![g.f], gb)?,
    })
}

/// Output of [`maxpool2d`]: pooled values plus the flat input index each came from.
#[derive(Debug, Clone)]
pub struct Pooled {
    pub output: Tensor,
    pub argmax: Vec<usize>,
}

/// Non-overlapping `window × window` max pooling. Ties go to the first
/// position in row-major order.
pub fn maxpool2d(input: &Tensor, window: usize) -> Result<Pooled> {
    input.expect_rank(4, "maxpool2d input")?;
    if window == 0 {
        return Err(Error::Parameter("maxpool2d window must be positive".into()));
    }
    let (n, c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
    if h % window != 0 {
        return Err(Error::Dimension(format!(
            "maxpool2d axis 2 (height): {h} not divisible by window {window}"
        )));
    }
    if w % window != 0 {
        return Err(Error::Dimension(format!(
            "maxpool2d axis 3 (width): {w} not divisible by window {window}"
        )));
    }
    let (oh, ow) = (h / window, w / window);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * window * w + ox * window;
                for dy in 0..window {
                    for dx in 0..window {
                        let i = base + (oy * window + dy) * w + ox * window + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok(Pooled {
        output: Tensor::new(vec![n, c, oh, ow], out)?,
        argmax,
    })
}

/// Routes each upstream element to the input position recorded in `argmax`.
pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[usize], upstream: &Tensor) -> Result<Tensor> {
    if upstream.len() != argmax.len() {
        return Err(Error::Dimension(format!(
            "maxpool2d upstream has {} elements, cache has {}",
            upstream.len(),
            argmax.len()
        )));
    }
    let mut grad = Tensor::zeros(input_shape);
    let g = grad.data_mut();
    for (&i, &u) in argmax.iter().zip(upstream.data()) {
        g[i] += u;
    }
    Ok(grad)
}

fn linear_dims(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize)> {
    input.expect_rank(2, "linear input")?;
    weight.expect_rank(2, "linear weight")?;
    let (n, i) = (input.shape()[0], input.shape()[1]);
    let (wi, o) = (weight.shape()[0], weight.shape()[1]);
    if wi != i {
        return Err(Error::Dimension(format!(
            "linear axis 1 (features): input has {i}, weight expects {wi}"
        )));
    }
    if bias.shape() != [o] {
        return Err(Error::Dimension(format!(
            "linear bias: expected [{o}], got {:?}",
            bias.shape()
        )));
    }
    Ok((n, i, o))
}

/// Affine map `input · weight + bias` with `weight` laid out `[in, out]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, i, o) = linear_dims(input, weight, bias)?;
    let mut out = Vec::with_capacity(n * o);
    for _ in 0..n {
        out.extend_from_slice(bias.data());
    }
    gemm(n, i, o, input.data(), false, weight.data(), false, &mut out);
    Tensor::new(vec![n, o], out)
}

pub fn linear_backward(input: &Tensor, weight: &Tensor, bias: &Tensor, upstream: &Tensor) -> Result<AffineGrads> {
    let (n, i, o) = linear_dims(input, weight, bias)?;
    upstream.expect_shape(&[n, o], "linear upstream")?;
    let up = upstream.data();
    let mut gx = vec![0.0; n * i];
    let mut gw = vec![0.0; i * o];
    let mut gb = vec![0.0; o];
    for u in up.chunks(o) {
        for (b, uv) in gb.iter_mut().zip(u) {
            *b += uv;
        }
    }
    // gx = U · Wᵀ, gW = Xᵀ · U
    gemm(n, o, i, up, false, weight.data(), true, &mut gx);
    gemm(i, n, o, input.data(), true, up, false, &mut gw);
    Ok(AffineGrads {
        input: Tensor::new(vec![n, i], gx)?,
        weight: Tensor::new(vec![i, o], gw)?,
        bias: Tensor::new(vec![o], gb)?,
    })
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Passes `upstream` through where the input was strictly positive.
pub fn relu_backward(input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    upstream.expect_shape(input.shape(), "relu upstream")?;
    let data = input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &u)| if x > 0.0 { u } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference_grad, max_relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Direct quadruple-loop definition of valid cross-correlation.
    fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Vec<f64> {
        let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let [f, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
        let oh = (h - kh) / stride + 1;
        let ow = (wd - kw) / stride + 1;
        let mut out = Vec::new();
        for ni in 0..n {
            for fi in 0..f {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = b.data()[fi];
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let xi = ((ni * c + ci) * h + oy * stride + ky) * wd + ox * stride + kx;
                                    let wi = ((fi * c + ci) * kh + ky) * kw + kx;
                                    s += x.data()[xi] * w.data()[wi];
                                }
                            }
                        }
                        out.push(s);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_of_ones_sums_nine() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &w, &b, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn zero_kernel_outputs_bias() {
        let mut r = rng(1);
        let x = Tensor::randn(&[2, 3, 6, 5], 0.0, 1.0, &mut r);
        let w = Tensor::zeros(&[4, 3, 2, 2]);
        let b = Tensor::vector(vec![0.5, -1.0, 2.0, 0.0]);
        let y = conv2d(&x, &w, &b, 1).unwrap();
        for n in 0..2 {
            for f in 0..4 {
                let plane = &y.data()[(n * 4 + f) * 20..(n * 4 + f + 1) * 20];
                assert!(plane.iter().all(|&v| v == b.data()[f]));
            }
        }
    }

    #[test]
    fn conv_matches_direct_summation() {
        for seed in 0..10 {
            let mut r = rng(seed);
            let x = Tensor::randn(&[1, 2, 5, 5], 0.0, 1.0, &mut r);
            let w = Tensor::randn(&[3, 2, 3, 3], 0.0, 1.0, &mut r);
            let b = Tensor::randn(&[3], 0.0, 1.0, &mut r);
            for stride in [1, 2] {
                let y = conv2d(&x, &w, &b, stride).unwrap();
                let oracle = conv_oracle(&x, &w, &b, stride);
                for (a, e) in y.data().iter().zip(&oracle) {
                    assert!((a - e).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn conv_shape_errors_name_axis() {
        let x = Tensor::zeros(&[1, 2, 5, 5]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        let err = conv2d(&x, &w, &Tensor::zeros(&[1]), 1).unwrap_err().to_string();
        assert!(err.contains("axis 1"), "{err}");
        let w = Tensor::zeros(&[1, 2, 6, 3]);
        let err = conv2d(&x, &w, &Tensor::zeros(&[1]), 1).unwrap_err().to_string();
        assert!(err.contains("axis 2"), "{err}");
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut r = rng(7);
        let x = Tensor::randn(&[2, 2, 6, 5], 0.0, 1.0, &mut r);
        let w = Tensor::randn(&[3, 2, 3, 2], 0.0, 1.0, &mut r);
        let b = Tensor::randn(&[3], 0.0, 1.0, &mut r);
        for stride in [1, 2] {
            let probe = Tensor::randn(conv2d(&x, &w, &b, stride).unwrap().shape(), 0.0, 1.0, &mut r);
            let loss = |x: &Tensor, w: &Tensor, b: &Tensor| -> f64 {
                let y = conv2d(x, w, b, stride).unwrap();
                y.data().iter().zip(probe.data()).map(|(a, p)| a * p).sum()
            };
            let grads = conv2d_backward(&x, &w, &b, stride, &probe).unwrap();
            let fx = finite_difference_grad(|t| Ok(loss(t, &w, &b)), &x, 1e-5).unwrap();
            let fw = finite_difference_grad(|t| Ok(loss(&x, t, &b)), &w, 1e-5).unwrap();
            let fb = finite_difference_grad(|t| Ok(loss(&x, &w, t)), &b, 1e-5).unwrap();
            assert!(max_relative_error(&grads.input, &fx) < 1e-4);
            assert!(max_relative_error(&grads.weight, &fw) < 1e-4);
            assert!(max_relative_error(&grads.bias, &fb) < 1e-4);
        }
    }

    #[test]
    fn maxpool_of_two_by_two() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = maxpool2d(&x, 2).unwrap();
        assert_eq!(p.output.data(), &[4.0]);
        assert_eq!(p.argmax, vec![3]);
    }

    #[test]
    fn maxpool_ties_route_to_first_position() {
        let x = Tensor::full(&[1, 1, 4, 4], 0.25);
        let p = maxpool2d(&x, 2).unwrap();
        assert!(p.output.data().iter().all(|&v| v == 0.25));
        let g = maxpool2d_backward(x.shape(), &p.argmax, &Tensor::full(&[1, 1, 2, 2], 1.0)).unwrap();
        #[rustfmt::skip]
        let expected = [
            1.0, 0.0, 1.0, 0.0,
            0.0, 0.0, 0.0, 0.0,
            1.0, 0.0, 1.0, 0.0,
            0.0, 0.0, 0.0, 0.0,
        ];
        assert_eq!(g.data(), &expected);
    }

    #[test]
    fn maxpool_matches_window_scan() {
        for seed in 0..20 {
            let x = Tensor::randn(&[1, 1, 4, 4], 0.0, 1.0, &mut rng(seed));
            let p = maxpool2d(&x, 2).unwrap();
            for oy in 0..2 {
                for ox in 0..2 {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            m = m.max(x.data()[(oy * 2 + dy) * 4 + ox * 2 + dx]);
                        }
                    }
                    assert_eq!(p.output.data()[oy * 2 + ox], m);
                }
            }
        }
    }

    #[test]
    fn maxpool_rejects_non_divisible_extent() {
        let x = Tensor::zeros(&[1, 1, 5, 4]);
        assert!(matches!(maxpool2d(&x, 2), Err(Error::Dimension(_))));
    }

    #[test]
    fn linear_identity_and_bias() {
        let mut r = rng(3);
        let x = Tensor::randn(&[2, 3], 0.0, 1.0, &mut r);
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let y = linear(&x, &eye, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y, x);

        let b = Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]);
        let w = Tensor::randn(&[3, 4], 0.0, 1.0, &mut r);
        let y = linear(&Tensor::zeros(&[2, 3]), &w, &b).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn linear_matches_double_loop() {
        let mut r = rng(11);
        let x = Tensor::randn(&[2, 3], 0.0, 1.0, &mut r);
        let w = Tensor::randn(&[3, 4], 0.0, 1.0, &mut r);
        let b = Tensor::randn(&[4], 0.0, 1.0, &mut r);
        let y = linear(&x, &w, &b).unwrap();
        for n in 0..2 {
            for o in 0..4 {
                let mut s = b.data()[o];
                for i in 0..3 {
                    s += x.data()[n * 3 + i] * w.data()[i * 4 + o];
                }
                assert!((y.data()[n * 4 + o] - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn linear_rejects_inner_mismatch() {
        let err = linear(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[4, 2]), &Tensor::zeros(&[2]));
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn relu_examples() {
        let x = Tensor::vector(vec![-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor::vector(vec![-3.0, -0.5]);
        assert_eq!(relu(&neg).data(), &[0.0, 0.0]);
        let g = relu_backward(&neg, &Tensor::vector(vec![1.0, 1.0])).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0]);
    }

    #[test]
    fn relu_gradient_at_positive_points_is_upstream() {
        let mut r = rng(5);
        let x = Tensor::randn(&[10], 0.0, 1.0, &mut r).map(|v| v.abs() + 0.1);
        let up = Tensor::randn(&[10], 0.0, 1.0, &mut r);
        let g = relu_backward(&x, &up).unwrap();
        assert_eq!(g, up);
        let fd = finite_difference_grad(
            |t| Ok(relu(t).data().iter().zip(up.data()).map(|(a, b)| a * b).sum()),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(max_relative_error(&g, &fd) < 1e-6);
    }
}
