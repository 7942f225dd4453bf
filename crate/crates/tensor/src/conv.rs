//! 2-D convolution kernels (im2col + SGEMM) and their adjoints.
//!
//! Weights are `[c_out, c_in, k, k]`, biases `[1, c_out, 1, 1]`; padding is
//! zero padding on all four sides.

use crate::tensor::{Shape, Tensor};

/// Upper bound on the im2col buffer, in elements. Batches are processed in
/// chunks so that `k·k·c_in × chunk·h_out·w_out` stays below it.
const MAX_COLS: usize = 1 << 24;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new(x: Shape, w: Shape, stride: usize, pad: usize) -> Self {
        assert_eq!(w.h, w.w, "only square kernels are supported");
        assert_eq!(
            x.c, w.c,
            "conv input has {} channels, weight expects {}",
            x.c, w.c
        );
        assert!(stride >= 1);
        let k = w.h;
        assert!(
            x.h + 2 * pad >= k && x.w + 2 * pad >= k,
            "conv input {:?} smaller than kernel {}",
            x,
            k
        );
        Self {
            cin: x.c,
            cout: w.n,
            k,
            stride,
            pad,
            h: x.h,
            w: x.w,
            oh: (x.h + 2 * pad - k) / stride + 1,
            ow: (x.w + 2 * pad - k) / stride + 1,
        }
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    fn chunk(&self, batch: usize) -> usize {
        (MAX_COLS / (self.rows() * self.out_plane()).max(1)).clamp(1, batch)
    }
}

/// Output spatial size of a convolution along one axis.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

fn im2col(x: &Tensor, g: &Geometry, n0: usize, count: usize, cols: &mut [f32]) {
    let ncol = count * g.out_plane();
    let op = g.out_plane();
    for i in 0..count {
        for ci in 0..g.cin {
            let src = x.plane(n0 + i, ci);
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let r = (ci * g.k + ky) * g.k + kx;
                    let row = &mut cols[r * ncol + i * op..r * ncol + (i + 1) * op];
                    for oy in 0..g.oh {
                        let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        if g.stride == 1 {
                            // valid ox satisfy 0 <= ox + kx - pad < w
                            let lo = g.pad.saturating_sub(kx).min(g.ow);
                            let hi = (g.w + g.pad).saturating_sub(kx).min(g.ow).max(lo);
                            dst[..lo].fill(0.0);
                            dst[hi..].fill(0.0);
                            let s0 = lo + kx - g.pad;
                            dst[lo..hi].copy_from_slice(&srow[s0..s0 + (hi - lo)]);
                        } else {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                *d = if ix >= 0 && ix < g.w as isize { srow[ix as usize] } else { 0.0 };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: &Geometry, n0: usize, count: usize, dx: &mut Tensor) {
    let ncol = count * g.out_plane();
    let op = g.out_plane();
    for i in 0..count {
        for ci in 0..g.cin {
            let dst = dx.plane_mut(n0 + i, ci);
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let r = (ci * g.k + ky) * g.k + kx;
                    let row = &cols[r * ncol + i * op..r * ncol + (i + 1) * op];
                    for oy in 0..g.oh {
                        let src = &row[oy * g.ow..(oy + 1) * g.ow];
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                drow[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c[m×n] = alpha·a[m×k]·b[k×n] + beta·c`, with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: every stride/extent combination used below addresses only
    // elements inside the provided slices (checked by the callers' shapes).
    unsafe {
        matrixmultiply::sgemm(
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Forward convolution.
///
/// # Panics
/// On channel mismatch or when the (padded) input is smaller than the kernel.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let xs = x.shape();
    let g = Geometry::new(xs, weight.shape(), stride, pad);
    if let Some(b) = bias {
        assert_eq!(b.len(), g.cout, "bias length does not match output channels");
    }
    let op = g.out_plane();
    let rows = g.rows();
    let mut out = Tensor::zeros(Shape::new(xs.n, g.cout, g.oh, g.ow));
    let chunk = g.chunk(xs.n);
    let mut cols = vec![0.0f32; rows * chunk * op];
    let mut omat = vec![0.0f32; g.cout * chunk * op];
    let mut n0 = 0;
    while n0 < xs.n {
        let count = chunk.min(xs.n - n0);
        let ncol = count * op;
        im2col(x, &g, n0, count, &mut cols[..rows * ncol]);
        sgemm(
            g.cout,
            rows,
            ncol,
            weight.data(),
            (rows as isize, 1),
            &cols[..rows * ncol],
            (ncol as isize, 1),
            0.0,
            &mut omat[..g.cout * ncol],
        );
        for i in 0..count {
            for co in 0..g.cout {
                let b = bias.map_or(0.0, |b| b.data()[co]);
                let src = &omat[co * ncol + i * op..co * ncol + (i + 1) * op];
                for (d, &s) in out.plane_mut(n0 + i, co).iter_mut().zip(src) {
                    *d = s + b;
                }
            }
        }
        n0 += count;
    }
    out
}

/// Gradients of a convolution with respect to input, weight and bias.
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Adjoint of [`conv2d`]. The input gradient is only formed when `need_input`.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
    need_input: bool,
) -> ConvGrads {
    let xs = x.shape();
    let g = Geometry::new(xs, weight.shape(), stride, pad);
    assert_eq!(dy.shape(), Shape::new(xs.n, g.cout, g.oh, g.ow), "conv output gradient shape");
    let op = g.out_plane();
    let rows = g.rows();
    let chunk = g.chunk(xs.n);
    let mut cols = vec![0.0f32; rows * chunk * op];
    let mut dymat = vec![0.0f32; g.cout * chunk * op];
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros(Shape::new(1, g.cout, 1, 1));
    let mut dx = need_input.then(|| Tensor::zeros(xs));
    let mut n0 = 0;
    while n0 < xs.n {
        let count = chunk.min(xs.n - n0);
        let ncol = count * op;
        for i in 0..count {
            for co in 0..g.cout {
                dymat[co * ncol + i * op..co * ncol + (i + 1) * op]
                    .copy_from_slice(dy.plane(n0 + i, co));
            }
        }
        let dymat = &dymat[..g.cout * ncol];
        for (co, d) in db.data_mut().iter_mut().enumerate() {
            *d += dymat[co * ncol..(co + 1) * ncol].iter().sum::<f32>();
        }
        im2col(x, &g, n0, count, &mut cols[..rows * ncol]);
        // dW += dY · colsᵀ
        sgemm(
            g.cout,
            ncol,
            rows,
            dymat,
            (ncol as isize, 1),
            &cols[..rows * ncol],
            (1, ncol as isize),
            1.0,
            dw.data_mut(),
        );
        if let Some(dx) = dx.as_mut() {
            // dcols = Wᵀ · dY
            sgemm(
                rows,
                g.cout,
                ncol,
                weight.data(),
                (1, rows as isize),
                dymat,
                (ncol as isize, 1),
                0.0,
                &mut cols[..rows * ncol],
            );
            col2im(&cols[..rows * ncol], &g, n0, count, dx);
        }
        n0 += count;
    }
    ConvGrads { input: dx, weight: dw, bias: db }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as an oracle.
    fn naive(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (xs, ws) = (x.shape(), w.shape());
        let k = ws.h;
        let oh = conv_out_size(xs.h, k, stride, pad);
        let ow = conv_out_size(xs.w, k, stride, pad);
        let mut out = Tensor::zeros(Shape::new(xs.n, ws.n, oh, ow));
        for n in 0..xs.n {
            for co in 0..ws.n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = f64::from(b.data()[co]);
                        for ci in 0..xs.c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                                        continue;
                                    }
                                    let xv = x.plane(n, ci)[iy as usize * xs.w + ix as usize];
                                    let wv = w.data()[((co * xs.c + ci) * k + ky) * k + kx];
                                    acc += f64::from(xv) * f64::from(wv);
                                }
                            }
                        }
                        out.plane_mut(n, co)[oy * ow + ox] = acc as f32;
                    }
                }
            }
        }
        out
    }

    fn pseudo(shape: impl Into<Shape>, seed: u32) -> Tensor {
        let shape = shape.into();
        let mut s = seed.wrapping_mul(2654435761).wrapping_add(12345);
        let data = (0..shape.numel())
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 17;
                s ^= s << 5;
                (s as f32 / u32::MAX as f32) * 2.0 - 1.0
            })
            .collect();
        Tensor::from_vec(shape, data)
    }

    #[test]
    fn matches_naive_convolution() {
        for &(stride, pad, k, h, w) in &[(1, 1, 3, 5, 7), (2, 1, 3, 8, 6), (2, 1, 3, 7, 5), (1, 0, 1, 4, 4), (1, 1, 3, 1, 1)] {
            let x = pseudo([3, 2, h, w], 1);
            let wt = pseudo([4, 2, k, k], 2);
            let b = pseudo([1, 4, 1, 1], 3);
            let got = conv2d(&x, &wt, Some(&b), stride, pad);
            let want = naive(&x, &wt, &b, stride, pad);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b} (stride {stride}, pad {pad}, k {k})");
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn matches_naive_on_random_shapes(
            n in 1usize..3, c_in in 1usize..4, c_out in 1usize..4,
            h in 1usize..9, w in 1usize..9, stride in 1usize..3, seed in 0u32..1000,
        ) {
            let x = pseudo([n, c_in, h, w], seed);
            let wt = pseudo([c_out, c_in, 3, 3], seed + 1);
            let b = pseudo([1, c_out, 1, 1], seed + 2);
            let got = conv2d(&x, &wt, Some(&b), stride, 1);
            let want = naive(&x, &wt, &b, stride, 1);
            proptest::prop_assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                proptest::prop_assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <dy, conv(x)> must equal <dx, x> + <dw, w> + <db, b> by linearity.
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1)] {
            let x = pseudo([2, 3, 6, 5], 4);
            let wt = pseudo([2, 3, k, k], 5);
            let b = pseudo([1, 2, 1, 1], 6);
            let y = conv2d(&x, &wt, Some(&b), stride, pad);
            let dy = pseudo(y.shape(), 7);
            let gr = conv2d_backward(&x, &wt, &dy, stride, pad, true);
            let dot = |a: &Tensor, b: &Tensor| -> f64 {
                a.data().iter().zip(b.data()).map(|(&p, &q)| f64::from(p) * f64::from(q)).sum()
            };
            // conv is linear in (x, w) jointly only per argument; check each separately.
            let y_x = conv2d(&x, &wt, None, stride, pad);
            assert!((dot(&dy, &y_x) - dot(gr.input.as_ref().unwrap(), &x)).abs() < 1e-3);
            assert!((dot(&dy, &y_x) - dot(&gr.weight, &wt)).abs() < 1e-3);
            let ones = Tensor::full(b.shape(), 1.0);
            let bias_only = dot(&dy, &conv2d(&Tensor::zeros(x.shape()), &wt, Some(&ones), stride, pad));
            assert!((bias_only - gr.bias.data().iter().map(|&v| f64::from(v)).sum::<f64>()).abs() < 1e-3);
        }
    }
}
