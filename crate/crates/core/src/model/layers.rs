//! Layers with explicit forward/backward passes.
//!
//! Each layer caches what its backward pass needs during a training-mode
//! forward; evaluation-mode forwards leave the caches empty.

use crate::tensor::{col2im, gemm, im2col, Op, Scalar, Tensor, Window};

/// Visitor over `(parameter, gradient)` pairs in a fixed order.
pub(crate) type ParamVisitor<'a, T> = dyn FnMut(&mut Vec<T>, &mut Vec<T>) + 'a;

#[derive(Debug, Clone)]
pub(crate) struct Conv2d<T> {
    pub cin: usize,
    pub cout: usize,
    pub win: Window,
    /// Transposed (fractionally strided) convolution.
    pub transposed: bool,
    /// `[cout, cin, k, k]`, or `[cin, cout, k, k]` when transposed.
    pub weight: Vec<T>,
    pub bias: Option<Vec<T>>,
    pub grad_weight: Vec<T>,
    pub grad_bias: Option<Vec<T>>,
    /// Skip computing the input gradient (first layer of the network).
    pub need_input_grad: bool,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(cin: usize, cout: usize, win: Window, transposed: bool, bias: bool) -> Self {
        let n = cin * cout * win.kernel * win.kernel;
        Self {
            cin,
            cout,
            win,
            transposed,
            weight: vec![T::ZERO; n],
            bias: bias.then(|| vec![T::ZERO; cout]),
            grad_weight: vec![T::ZERO; n],
            grad_bias: bias.then(|| vec![T::ZERO; cout]),
            need_input_grad: true,
            input: None,
        }
    }

    fn kk(&self) -> usize {
        self.win.kernel * self.win.kernel
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        if self.transposed {
            let up = |n: usize| (n - 1) * self.win.stride + self.win.kernel - 2 * self.win.pad;
            (up(h), up(w))
        } else {
            (self.win.output_len(h), self.win.output_len(w))
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let out = self.apply(x);
        if train {
            self.input = Some(x.clone());
        }
        out
    }

    /// Stateless forward pass.
    pub fn apply(&self, x: &Tensor<T>) -> Tensor<T> {
        let (n, c, h, w) = x.dims();
        assert_eq!(c, self.cin, "conv: expected {} input channels, got {c}", self.cin);
        let (oh, ow) = self.output_hw(h, w);
        let mut out = Tensor::zeros(n, self.cout, oh, ow);
        let kk = self.kk();
        if self.transposed {
            let mut col = vec![T::ZERO; self.cout * kk * h * w];
            for i in 0..n {
                // col = Wm^T · x, Wm is cin × (cout·k·k)
                gemm(Op::T, Op::N, self.cout * kk, self.cin, h * w, &self.weight, x.example(i), T::ZERO, &mut col);
                col2im(&col, self.cout, oh, ow, self.win, out.example_mut(i));
            }
        } else {
            let mut col = vec![T::ZERO; self.cin * kk * oh * ow];
            for i in 0..n {
                im2col(x.example(i), c, h, w, self.win, &mut col);
                gemm(Op::N, Op::N, self.cout, self.cin * kk, oh * ow, &self.weight, &col, T::ZERO, out.example_mut(i));
            }
        }
        if let Some(bias) = &self.bias {
            let plane = oh * ow;
            for i in 0..n {
                let ex = out.example_mut(i);
                for (co, &b) in bias.iter().enumerate() {
                    ex[co * plane..(co + 1) * plane].iter_mut().for_each(|v| *v += b);
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients; returns the input gradient (empty
    /// tensor when `need_input_grad` is unset).
    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.input.take().expect("conv backward without cached forward");
        let (n, _, h, w) = x.dims();
        let (_, _, oh, ow) = dy.dims();
        let kk = self.kk();
        if let Some(gb) = &mut self.grad_bias {
            let plane = oh * ow;
            for i in 0..n {
                let ex = dy.example(i);
                for (co, g) in gb.iter_mut().enumerate() {
                    *g += ex[co * plane..(co + 1) * plane].iter().copied().sum::<T>();
                }
            }
        }
        let mut dx = if self.need_input_grad {
            Tensor::zeros(n, self.cin, h, w)
        } else {
            Tensor::zeros(0, self.cin, h, w)
        };
        if self.transposed {
            let mut dcol = vec![T::ZERO; self.cout * kk * h * w];
            for i in 0..n {
                im2col(dy.example(i), self.cout, oh, ow, self.win, &mut dcol);
                gemm(Op::N, Op::T, self.cin, h * w, self.cout * kk, x.example(i), &dcol, T::ONE, &mut self.grad_weight);
                if self.need_input_grad {
                    gemm(Op::N, Op::N, self.cin, self.cout * kk, h * w, &self.weight, &dcol, T::ZERO, dx.example_mut(i));
                }
            }
        } else {
            let k_rows = self.cin * kk;
            let mut col = vec![T::ZERO; k_rows * oh * ow];
            let mut dcol = if self.need_input_grad { vec![T::ZERO; k_rows * oh * ow] } else { Vec::new() };
            for i in 0..n {
                im2col(x.example(i), self.cin, h, w, self.win, &mut col);
                gemm(Op::N, Op::T, self.cout, oh * ow, k_rows, dy.example(i), &col, T::ONE, &mut self.grad_weight);
                if self.need_input_grad {
                    gemm(Op::T, Op::N, k_rows, self.cout, oh * ow, &self.weight, dy.example(i), T::ZERO, &mut dcol);
                    col2im(&dcol, self.cin, h, w, self.win, dx.example_mut(i));
                }
            }
        }
        dx
    }

    pub fn visit_params(&mut self, f: &mut ParamVisitor<'_, T>) {
        f(&mut self.weight, &mut self.grad_weight);
        if let (Some(b), Some(g)) = (&mut self.bias, &mut self.grad_bias) {
            f(b, g);
        }
    }
}

/// Batch normalization over `N·H·W` per channel.
#[derive(Debug, Clone)]
pub(crate) struct BatchNorm2d<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub grad_gamma: Vec<T>,
    pub grad_beta: Vec<T>,
    pub eps: f64,
    pub momentum: f64,
    cache: Option<(Tensor<T>, Vec<T>)>,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::ONE; channels],
            beta: vec![T::ZERO; channels],
            running_mean: vec![T::ZERO; channels],
            running_var: vec![T::ONE; channels],
            grad_gamma: vec![T::ZERO; channels],
            grad_beta: vec![T::ZERO; channels],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            cache: None,
        }
    }

    /// Evaluation-mode normalization with the running statistics.
    pub fn apply(&self, x: &Tensor<T>) -> Tensor<T> {
        let (n, c, h, w) = x.dims();
        let plane = h * w;
        let mut y = Tensor::zeros(n, c, h, w);
        for ch in 0..c {
            let inv_std = T::from_f64(1.0 / (self.running_var[ch].to_f64() + self.eps).sqrt());
            let scale = inv_std * self.gamma[ch];
            let shift = self.beta[ch] - self.running_mean[ch] * scale;
            for i in 0..n {
                let range = ch * plane..(ch + 1) * plane;
                let src = &x.example(i)[range.clone()];
                for (d, &s) in y.example_mut(i)[range].iter_mut().zip(src) {
                    *d = s * scale + shift;
                }
            }
        }
        y
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        if !train {
            return self.apply(x);
        }
        let (n, c, h, w) = x.dims();
        let plane = h * w;
        let m = (n * plane) as f64;
        let mut y = Tensor::zeros(n, c, h, w);
        let mut xhat = if train { Tensor::zeros(n, c, h, w) } else { Tensor::zeros(0, 0, 0, 0) };
        let mut inv_stds = vec![T::ZERO; c];
        for ch in 0..c {
            let (mean, inv_std) = if train {
                let mut sum = 0.0f64;
                for i in 0..n {
                    sum += x.example(i)[ch * plane..(ch + 1) * plane].iter().map(|v| v.to_f64()).sum::<f64>();
                }
                let mean = sum / m;
                let mut sq = 0.0f64;
                for i in 0..n {
                    sq += x.example(i)[ch * plane..(ch + 1) * plane]
                        .iter()
                        .map(|v| (v.to_f64() - mean).powi(2))
                        .sum::<f64>();
                }
                let var = sq / m;
                let unbiased = if m > 1.0 { sq / (m - 1.0) } else { var };
                let mo = self.momentum;
                self.running_mean[ch] = T::from_f64((1.0 - mo) * self.running_mean[ch].to_f64() + mo * mean);
                self.running_var[ch] = T::from_f64((1.0 - mo) * self.running_var[ch].to_f64() + mo * unbiased);
                (mean, 1.0 / (var + self.eps).sqrt())
            } else {
                let var = self.running_var[ch].to_f64();
                (self.running_mean[ch].to_f64(), 1.0 / (var + self.eps).sqrt())
            };
            let (mean, inv_std) = (T::from_f64(mean), T::from_f64(inv_std));
            inv_stds[ch] = inv_std;
            let (g, b) = (self.gamma[ch], self.beta[ch]);
            for i in 0..n {
                let range = ch * plane..(ch + 1) * plane;
                let src = &x.example(i)[range.clone()];
                if train {
                    let xh = &mut xhat.example_mut(i)[range.clone()];
                    for (d, &s) in xh.iter_mut().zip(src) {
                        *d = (s - mean) * inv_std;
                    }
                }
                let dst = &mut y.example_mut(i)[range];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = (s - mean) * inv_std * g + b;
                }
            }
        }
        if train {
            self.cache = Some((xhat, inv_stds));
        }
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let (xhat, inv_stds) = self.cache.take().expect("batch norm backward without cached forward");
        let (n, c, h, w) = dy.dims();
        let plane = h * w;
        let m = T::from_f64((n * plane) as f64);
        let mut dx = Tensor::zeros(n, c, h, w);
        for ch in 0..c {
            let range = ch * plane..(ch + 1) * plane;
            let mut sum_dy = T::ZERO;
            let mut sum_dy_xhat = T::ZERO;
            for i in 0..n {
                for (&g, &xh) in dy.example(i)[range.clone()].iter().zip(&xhat.example(i)[range.clone()]) {
                    sum_dy += g;
                    sum_dy_xhat += g * xh;
                }
            }
            self.grad_gamma[ch] += sum_dy_xhat;
            self.grad_beta[ch] += sum_dy;
            let gamma = self.gamma[ch];
            let scale = gamma * inv_stds[ch] / m;
            for i in 0..n {
                let g = &dy.example(i)[range.clone()];
                let xh = &xhat.example(i)[range.clone()];
                let d = &mut dx.example_mut(i)[range.clone()];
                for j in 0..plane {
                    d[j] = scale * (m * g[j] - sum_dy - xh[j] * sum_dy_xhat);
                }
            }
        }
        dx
    }

    pub fn visit_params(&mut self, f: &mut ParamVisitor<'_, T>) {
        f(&mut self.gamma, &mut self.grad_gamma);
        f(&mut self.beta, &mut self.grad_beta);
    }

    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Vec<T>)) {
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

pub(crate) fn relu_inplace<T: Scalar>(x: &mut Tensor<T>) {
    for v in x.data_mut() {
        if *v < T::ZERO {
            *v = T::ZERO;
        }
    }
}

/// Gradient through a ReLU given its output.
pub(crate) fn relu_backward<T: Scalar>(dy: &Tensor<T>, y: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &o) in dx.data_mut().iter_mut().zip(y.data()) {
        if o <= T::ZERO {
            *d = T::ZERO;
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_conv(x: &Tensor<f64>, conv: &Conv2d<f64>) -> Tensor<f64> {
        let (n, cin, h, w) = x.dims();
        let k = conv.win.kernel;
        let (oh, ow) = conv.output_hw(h, w);
        let mut out = Tensor::zeros(n, conv.cout, oh, ow);
        for i in 0..n {
            for co in 0..conv.cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |b| b[co]);
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * conv.win.stride + ky) as isize - conv.win.pad as isize;
                                    let ix = (ox * conv.win.stride + kx) as isize - conv.win.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += conv.weight[((co * cin + ci) * k + ky) * k + kx]
                                            * x.example(i)[(ci * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                        }
                        out.example_mut(i)[(co * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    /// Scatter definition of a transposed convolution.
    fn direct_transposed(x: &Tensor<f64>, conv: &Conv2d<f64>) -> Tensor<f64> {
        let (n, cin, h, w) = x.dims();
        let k = conv.win.kernel;
        let (oh, ow) = conv.output_hw(h, w);
        let mut out = Tensor::zeros(n, conv.cout, oh, ow);
        for i in 0..n {
            for ci in 0..cin {
                for y in 0..h {
                    for xx in 0..w {
                        let v = x.example(i)[(ci * h + y) * w + xx];
                        for co in 0..conv.cout {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let oy = (y * conv.win.stride + ky) as isize - conv.win.pad as isize;
                                    let ox = (xx * conv.win.stride + kx) as isize - conv.win.pad as isize;
                                    if oy >= 0 && ox >= 0 && (oy as usize) < oh && (ox as usize) < ow {
                                        out.example_mut(i)[(co * oh + oy as usize) * ow + ox as usize] +=
                                            conv.weight[((ci * conv.cout + co) * k + ky) * k + kx] * v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn filled(n: usize, c: usize, h: usize, w: usize, seed: usize) -> Tensor<f64> {
        let data = (0..n * c * h * w)
            .map(|i| (((i + seed) * 7919) % 101) as f64 / 50.0 - 1.0)
            .collect();
        Tensor::from_vec(n, c, h, w, data).unwrap()
    }

    #[test]
    fn conv_forward_matches_direct_sum() {
        for &(k, s, p) in &[(3, 1, 1), (5, 1, 2), (3, 2, 1)] {
            let mut conv = Conv2d::<f64>::new(3, 4, Window { kernel: k, stride: s, pad: p }, false, true);
            conv.weight = (0..conv.weight.len()).map(|i| ((i * 31) % 17) as f64 / 17.0 - 0.5).collect();
            conv.bias = Some(vec![0.1, -0.2, 0.3, 0.0]);
            let x = filled(2, 3, 8, 8, 3);
            let got = conv.forward(&x, false);
            let want = direct_conv(&x, &conv);
            let err = got.data().iter().zip(want.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12, "k={k} s={s}: {err}");
        }
    }

    #[test]
    fn transposed_conv_matches_scatter_and_doubles_size() {
        let mut conv = Conv2d::<f64>::new(3, 2, Window { kernel: 4, stride: 2, pad: 1 }, true, false);
        conv.weight = (0..conv.weight.len()).map(|i| ((i * 13) % 11) as f64 / 11.0 - 0.5).collect();
        let x = filled(2, 3, 4, 5, 1);
        let got = conv.forward(&x, false);
        assert_eq!(got.dims(), (2, 2, 8, 10));
        let want = direct_transposed(&x, &conv);
        let err = got.data().iter().zip(want.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12);
    }

    /// Finite-difference check of `L = <dy_probe, layer(x)>`.
    fn check_conv_grads(transposed: bool, win: Window) {
        let mut conv = Conv2d::<f64>::new(2, 3, win, transposed, true);
        conv.weight = (0..conv.weight.len()).map(|i| ((i * 29) % 23) as f64 / 23.0 - 0.5).collect();
        let x = filled(2, 2, 6, 6, 5);
        let out = conv.forward(&x, true);
        let (n, c, h, w) = out.dims();
        let probe = filled(n, c, h, w, 11);
        let dx = conv.backward(&probe);
        let loss = |conv: &mut Conv2d<f64>, x: &Tensor<f64>| -> f64 {
            conv.forward(x, false).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let eps = 1e-6;
        for idx in [0usize, 5, conv.weight.len() - 1] {
            let orig = conv.weight[idx];
            conv.weight[idx] = orig + eps;
            let lp = loss(&mut conv, &x);
            conv.weight[idx] = orig - eps;
            let lm = loss(&mut conv, &x);
            conv.weight[idx] = orig;
            let num = (lp - lm) / (2.0 * eps);
            assert!((num - conv.grad_weight[idx]).abs() < 1e-6, "weight {idx}: {num} vs {}", conv.grad_weight[idx]);
        }
        let gb = conv.grad_bias.clone().unwrap();
        for (co, g) in gb.iter().enumerate() {
            let want: f64 = (0..n).map(|i| probe.example(i)[co * h * w..(co + 1) * h * w].iter().sum::<f64>()).sum();
            assert!((want - g).abs() < 1e-9);
        }
        for idx in [0usize, 17, x.len() - 1] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += eps;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= eps;
            let num = (loss(&mut conv, &xp) - loss(&mut conv, &xm)) / (2.0 * eps);
            assert!((num - dx.data()[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        check_conv_grads(false, Window { kernel: 3, stride: 1, pad: 1 });
        check_conv_grads(false, Window { kernel: 3, stride: 2, pad: 1 });
        check_conv_grads(true, Window { kernel: 4, stride: 2, pad: 1 });
    }

    #[test]
    fn batch_norm_normalizes_and_backprops() {
        let mut bn = BatchNorm2d::<f64>::new(2);
        bn.gamma = vec![1.5, 0.5];
        bn.beta = vec![0.1, -0.3];
        let x = filled(3, 2, 4, 4, 2);
        let y = bn.forward(&x, true);
        let plane = 16;
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|i| y.example(i)[ch * plane..(ch + 1) * plane].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!((mean - bn.beta[ch]).abs() < 1e-12);
        }
        let probe = filled(3, 2, 4, 4, 9);
        let dx = bn.backward(&probe);
        let eps = 1e-6;
        let loss = |x: &Tensor<f64>| -> f64 {
            let mut b = bn.clone();
            b.forward(x, true).data().iter().zip(probe.data()).map(|(a, p)| a * p).sum()
        };
        for idx in [0usize, 7, 40, 95] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += eps;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= eps;
            let num = (loss(&xp) - loss(&xm)) / (2.0 * eps);
            assert!((num - dx.data()[idx]).abs() < 1e-6, "{idx}: {num} vs {}", dx.data()[idx]);
        }
    }
}
