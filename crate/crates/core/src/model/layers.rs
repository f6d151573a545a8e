//! Layer primitives with hand-written backward passes.
//!
//! Activations are single-sample `C x H x W` tensors. Every layer's backward
//! takes the same input it saw in forward, accumulates parameter gradients
//! and returns the gradient with respect to that input.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Stacks `self` channels before `other` channels.
    pub fn concat(&self, other: &Tensor) -> Tensor {
        debug_assert_eq!((self.h, self.w), (other.h, other.w));
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Tensor {
            c: self.c + other.c,
            h: self.h,
            w: self.w,
            data,
        }
    }

    /// Inverse of [`Tensor::concat`] for gradients.
    pub fn split_channels(self, first: usize) -> (Tensor, Tensor) {
        let cut = first * self.plane();
        let mut head = self.data;
        let tail = head.split_off(cut);
        (
            Tensor {
                c: first,
                h: self.h,
                w: self.w,
                data: head,
            },
            Tensor {
                c: self.c - first,
                h: self.h,
                w: self.w,
                data: tail,
            },
        )
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    fn new(value: Vec<f64>) -> Self {
        let grad = vec![0.0; value.len()];
        Self { value, grad }
    }

    /// Glorot-normal initialisation.
    fn glorot<R: Rng + ?Sized>(len: usize, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (2.0 / (fan_in + fan_out) as f64).sqrt()).unwrap();
        Self::new((0..len).map(|_| normal.sample(rng)).collect())
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// `c = alpha * a * b + beta * c` on row-major slices; `a` is `m x k`
/// (or `k x m` when `ta`), `b` is `k x n` (or `n x k` when `tb`).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    let a = if ta {
        ArrayView2::from_shape((k, m), a).unwrap().reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), a).unwrap()
    };
    let b = if tb {
        ArrayView2::from_shape((n, k), b).unwrap().reversed_axes()
    } else {
        ArrayView2::from_shape((k, n), b).unwrap()
    };
    let mut c = ArrayViewMut2::from_shape((m, n), c).unwrap();
    general_mat_mul(1.0, &a, &b, beta, &mut c);
}

/// 3x3 patches with zero padding: row `(ci*3 + ky)*3 + kx`, column `y*w + x`.
fn im2col3(x: &Tensor) -> Vec<f64> {
    let (h, w) = (x.h, x.w);
    let plane = h * w;
    let mut cols = vec![0.0; x.c * 9 * plane];
    for ci in 0..x.c {
        let src = &x.data[ci * plane..(ci + 1) * plane];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 3 + ky) * 3 + kx) * plane..][..plane];
                let (x_lo, x_hi) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                for y in 0..h {
                    let sy = y + ky;
                    if sy < 1 || sy > h {
                        continue;
                    }
                    let sy = sy - 1;
                    let dst = &mut row[y * w + x_lo..y * w + x_hi];
                    let s0 = sy * w + x_lo + kx - 1;
                    dst.copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
    cols
}

fn col2im3(cols: &[f64], c: usize, h: usize, w: usize) -> Tensor {
    let plane = h * w;
    let mut out = Tensor::zeros(c, h, w);
    for ci in 0..c {
        let dst = &mut out.data[ci * plane..(ci + 1) * plane];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 3 + ky) * 3 + kx) * plane..][..plane];
                let (x_lo, x_hi) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                for y in 0..h {
                    let sy = y + ky;
                    if sy < 1 || sy > h {
                        continue;
                    }
                    let sy = sy - 1;
                    let s0 = sy * w + x_lo + kx - 1;
                    for (d, s) in dst[s0..s0 + (x_hi - x_lo)]
                        .iter_mut()
                        .zip(&row[y * w + x_lo..y * w + x_hi])
                    {
                        *d += s;
                    }
                }
            }
        }
    }
    out
}

/// Same-padded convolution with a 1x1 or 3x3 kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub weight: Param,
    pub bias: Param,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, kernel: usize, rng: &mut R) -> Self {
        assert!(kernel == 1 || kernel == 3, "only 1x1 and 3x3 kernels");
        let fan_in = cin * kernel * kernel;
        Self {
            cin,
            cout,
            kernel,
            weight: Param::glorot(cout * fan_in, fan_in, cout * kernel * kernel, rng),
            bias: Param::new(vec![0.0; cout]),
        }
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        debug_assert_eq!(x.c, self.cin);
        let plane = x.plane();
        let mut out = Tensor::zeros(self.cout, x.h, x.w);
        for (o, chunk) in out.data.chunks_exact_mut(plane).enumerate() {
            chunk.fill(self.bias.value[o]);
        }
        let k = self.patch_len();
        if self.kernel == 1 {
            gemm(self.cout, k, plane, &self.weight.value, false, &x.data, false, 1.0, &mut out.data);
        } else {
            let cols = im2col3(x);
            gemm(self.cout, k, plane, &self.weight.value, false, &cols, false, 1.0, &mut out.data);
        }
        out
    }

    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        let plane = x.plane();
        for (o, chunk) in dy.data.chunks_exact(plane).enumerate() {
            self.bias.grad[o] += chunk.iter().sum::<f64>();
        }
        let k = self.patch_len();
        if self.kernel == 1 {
            gemm(self.cout, plane, k, &dy.data, false, &x.data, true, 1.0, &mut self.weight.grad);
            let mut dx = Tensor::zeros(self.cin, x.h, x.w);
            gemm(k, self.cout, plane, &self.weight.value, true, &dy.data, false, 0.0, &mut dx.data);
            dx
        } else {
            let cols = im2col3(x);
            gemm(self.cout, plane, k, &dy.data, false, &cols, true, 1.0, &mut self.weight.grad);
            let mut dcols = vec![0.0; k * plane];
            gemm(k, self.cout, plane, &self.weight.value, true, &dy.data, false, 0.0, &mut dcols);
            col2im3(&dcols, self.cin, x.h, x.w)
        }
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// 2x2 stride-2 transposed convolution (doubles spatial size).
/// Weight row `(o*2 + dy)*2 + dx`, column `ci`.
#[derive(Debug, Clone, PartialEq)]
pub struct UpConv {
    pub cin: usize,
    pub cout: usize,
    pub weight: Param,
    pub bias: Param,
}

impl UpConv {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, rng: &mut R) -> Self {
        Self {
            cin,
            cout,
            weight: Param::glorot(cout * 4 * cin, cin * 4, cout * 4, rng),
            bias: Param::new(vec![0.0; cout]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let plane = x.plane();
        let mut taps = vec![0.0; self.cout * 4 * plane];
        gemm(self.cout * 4, self.cin, plane, &self.weight.value, false, &x.data, false, 0.0, &mut taps);
        let (h2, w2) = (x.h * 2, x.w * 2);
        let mut out = Tensor::zeros(self.cout, h2, w2);
        for o in 0..self.cout {
            let b = self.bias.value[o];
            let dst = &mut out.data[o * h2 * w2..(o + 1) * h2 * w2];
            for dy in 0..2 {
                for dx in 0..2 {
                    let tap = &taps[((o * 2 + dy) * 2 + dx) * plane..][..plane];
                    for y in 0..x.h {
                        let row = &mut dst[(2 * y + dy) * w2..][..w2];
                        for xx in 0..x.w {
                            row[2 * xx + dx] = tap[y * x.w + xx] + b;
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward(&mut self, x: &Tensor, dout: &Tensor) -> Tensor {
        let plane = x.plane();
        let (h2, w2) = (x.h * 2, x.w * 2);
        let mut dtaps = vec![0.0; self.cout * 4 * plane];
        for o in 0..self.cout {
            let src = &dout.data[o * h2 * w2..(o + 1) * h2 * w2];
            self.bias.grad[o] += src.iter().sum::<f64>();
            for dy in 0..2 {
                for dx in 0..2 {
                    let tap = &mut dtaps[((o * 2 + dy) * 2 + dx) * plane..][..plane];
                    for y in 0..x.h {
                        let row = &src[(2 * y + dy) * w2..][..w2];
                        for xx in 0..x.w {
                            tap[y * x.w + xx] = row[2 * xx + dx];
                        }
                    }
                }
            }
        }
        gemm(self.cout * 4, plane, self.cin, &dtaps, false, &x.data, true, 1.0, &mut self.weight.grad);
        let mut dx = Tensor::zeros(self.cin, x.h, x.w);
        gemm(self.cin, self.cout * 4, plane, &self.weight.value, true, &dtaps, false, 0.0, &mut dx.data);
        dx
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// 2x2 max-pooling; returns the pooled tensor and the argmax offsets.
pub fn max_pool2(x: &Tensor) -> (Tensor, Vec<u32>) {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.c, h2, w2);
    let mut arg = vec![0u32; x.c * h2 * w2];
    for c in 0..x.c {
        let src = &x.data[c * x.plane()..(c + 1) * x.plane()];
        for y in 0..h2 {
            for xx in 0..w2 {
                let mut best = (2 * y) * x.w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (2 * y + dy) * x.w + 2 * xx + dx;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                let o = (c * h2 + y) * w2 + xx;
                out.data[o] = src[best];
                arg[o] = best as u32;
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward(dout: &Tensor, arg: &[u32], h: usize, w: usize) -> Tensor {
    let mut dx = Tensor::zeros(dout.c, h, w);
    let plane_out = dout.plane();
    for c in 0..dout.c {
        let dst = &mut dx.data[c * h * w..(c + 1) * h * w];
        for i in 0..plane_out {
            let o = c * plane_out + i;
            dst[arg[o] as usize] += dout.data[o];
        }
    }
    dx
}

fn relu_in_place(t: &mut Tensor) {
    for v in &mut t.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes `d` wherever the activation it flows back through was clipped.
fn relu_backward_in_place(d: &mut Tensor, activated: &Tensor) {
    for (g, &a) in d.data.iter_mut().zip(&activated.data) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Two 3x3 conv + ReLU layers with a shortcut around them:
/// `out = relu(conv2(relu(conv1(x))) + shortcut(x))`, where the shortcut
/// is identity or a 1x1 projection when channel counts differ.
#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub projection: Option<Conv2d>,
}

#[derive(Debug, Clone)]
pub struct BlockTrace {
    input: Tensor,
    hidden: Tensor,
    output: Tensor,
    dropout: Option<Vec<f64>>,
}

impl ResBlock {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv2d::new(cin, cout, 3, rng),
            conv2: Conv2d::new(cout, cout, 3, rng),
            projection: (cin != cout).then(|| Conv2d::new(cin, cout, 1, rng)),
        }
    }

    /// With `dropout = Some((rate, rng))` an inverted-dropout mask is applied
    /// to the block output.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        input: Tensor,
        dropout: Option<(f64, &mut R)>,
    ) -> (Tensor, BlockTrace) {
        let mut hidden = self.conv1.forward(&input);
        relu_in_place(&mut hidden);
        let mut output = self.conv2.forward(&hidden);
        match &self.projection {
            Some(p) => output.add_assign(&p.forward(&input)),
            None => output.add_assign(&input),
        }
        relu_in_place(&mut output);

        let mut result = output.clone();
        let mask = match dropout {
            Some((rate, rng)) if rate > 0.0 => {
                let keep = 1.0 / (1.0 - rate);
                let mask: Vec<f64> = (0..result.data.len())
                    .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
                    .collect();
                for (v, m) in result.data.iter_mut().zip(&mask) {
                    *v *= m;
                }
                Some(mask)
            }
            _ => None,
        };
        (
            result,
            BlockTrace {
                input,
                hidden,
                output,
                dropout: mask,
            },
        )
    }

    pub fn backward(&mut self, trace: &BlockTrace, mut d: Tensor) -> Tensor {
        if let Some(mask) = &trace.dropout {
            for (g, m) in d.data.iter_mut().zip(mask) {
                *g *= m;
            }
        }
        relu_backward_in_place(&mut d, &trace.output);
        let mut dhidden = self.conv2.backward(&trace.hidden, &d);
        relu_backward_in_place(&mut dhidden, &trace.hidden);
        let mut dx = self.conv1.backward(&trace.input, &dhidden);
        match &mut self.projection {
            Some(p) => dx.add_assign(&p.backward(&trace.input, &d)),
            None => dx.add_assign(&d),
        }
        dx
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = self.conv1.params().into_iter().chain(self.conv2.params()).collect();
        if let Some(p) = &self.projection {
            v.extend(p.params());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = self
            .conv1
            .params_mut()
            .into_iter()
            .chain(self.conv2.params_mut())
            .collect();
        if let Some(p) = &mut self.projection {
            v.extend(p.params_mut());
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::seeded_rng;

    /// Direct 3x3 same-padded convolution, loop by loop.
    fn naive_conv3(conv: &Conv2d, x: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(conv.cout, x.h, x.w);
        for o in 0..conv.cout {
            for y in 0..x.h as isize {
                for xx in 0..x.w as isize {
                    let mut acc = conv.bias.value[o];
                    for ci in 0..conv.cin {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (sy, sx) = (y + ky - 1, xx + kx - 1);
                                if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                    continue;
                                }
                                let wv = conv.weight.value[((o * conv.cin + ci) * 3 + ky as usize) * 3 + kx as usize];
                                acc += wv * x.data[(ci * x.h + sy as usize) * x.w + sx as usize];
                            }
                        }
                    }
                    out.data[(o * x.h + y as usize) * x.w + xx as usize] = acc;
                }
            }
        }
        out
    }

    fn random_tensor(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = seeded_rng(seed);
        Tensor {
            c,
            h,
            w,
            data: (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn conv3_matches_direct_loops() {
        let mut rng = seeded_rng(1);
        let mut conv = Conv2d::new(3, 4, 3, &mut rng);
        conv.bias.value = vec![0.1, -0.2, 0.3, 0.0];
        let x = random_tensor(3, 5, 7, 2);
        let fast = conv.forward(&x);
        let slow = naive_conv3(&conv, &x);
        for (a, b) in fast.data.iter().zip(&slow.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let x = random_tensor(2, 4, 3, 3);
        let cols = im2col3(&x);
        let mut rng = seeded_rng(4);
        let c: Vec<f64> = (0..cols.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let back = col2im3(&c, 2, 4, 3);
        let rhs: f64 = x.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn upconv_places_taps() {
        let mut rng = seeded_rng(0);
        let mut up = UpConv::new(1, 1, &mut rng);
        up.weight.value = vec![1.0, 2.0, 3.0, 4.0];
        up.bias.value = vec![0.5];
        let x = Tensor {
            c: 1,
            h: 1,
            w: 2,
            data: vec![1.0, 10.0],
        };
        let y = up.forward(&x);
        assert_eq!((y.h, y.w), (2, 4));
        assert_eq!(y.data, vec![1.5, 2.5, 10.5, 20.5, 3.5, 4.5, 30.5, 40.5]);
    }

    #[test]
    fn upconv_matches_direct_loops() {
        let mut rng = seeded_rng(8);
        let mut up = UpConv::new(2, 3, &mut rng);
        up.bias.value = vec![0.1, 0.2, 0.3];
        let x = random_tensor(2, 3, 2, 9);
        let y = up.forward(&x);
        for o in 0..3 {
            for yy in 0..6 {
                for xx in 0..4 {
                    let (sy, dy, sx, dx) = (yy / 2, yy % 2, xx / 2, xx % 2);
                    let mut acc = up.bias.value[o];
                    for ci in 0..2 {
                        acc += up.weight.value[((o * 2 + dy) * 2 + dx) * 2 + ci] * x.data[(ci * 3 + sy) * 2 + sx];
                    }
                    assert!((y.data[(o * 6 + yy) * 4 + xx] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = Tensor {
            c: 1,
            h: 2,
            w: 4,
            data: vec![1.0, 5.0, 0.0, -1.0, 2.0, 3.0, -2.0, -0.5],
        };
        let (y, arg) = max_pool2(&x);
        assert_eq!(y.data, vec![5.0, 0.0]);
        let dx = max_pool2_backward(
            &Tensor {
                c: 1,
                h: 1,
                w: 2,
                data: vec![1.0, 2.0],
            },
            &arg,
            2,
            4,
        );
        assert_eq!(dx.data, vec![0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_split_round_trip() {
        let a = random_tensor(2, 3, 3, 5);
        let b = random_tensor(3, 3, 3, 6);
        let (a2, b2) = a.concat(&b).split_channels(2);
        assert_eq!((a2, b2), (a, b));
    }
}
