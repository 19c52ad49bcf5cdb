use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{relu_backward, relu_inplace, BatchNorm2d, Conv2d, ParamVisitor};
use super::{apply_head, msra_init, sigmoid, HeadKind, LayerShape, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, Window};

const EDGE_KERNEL: usize = 5;
const INNER_KERNEL: usize = 3;
const UP_KERNEL: usize = 4;

/// conv → batch norm → ReLU
#[derive(Debug, Clone)]
struct ConvBlock<T> {
    conv: Conv2d<T>,
    bn: BatchNorm2d<T>,
    out: Option<Tensor<T>>,
}

impl<T: Scalar> ConvBlock<T> {
    fn new(cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        let win = Window {
            kernel,
            stride,
            pad: kernel / 2,
        };
        Self {
            conv: Conv2d::new(cin, cout, win, false, false),
            bn: BatchNorm2d::new(cout),
            out: None,
        }
    }

    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let z = self.conv.forward(x, train);
        let mut y = self.bn.forward(&z, train);
        relu_inplace(&mut y);
        if train {
            self.out = Some(y.clone());
        }
        y
    }

    fn apply(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = self.bn.apply(&self.conv.apply(x));
        relu_inplace(&mut y);
        y
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let y = self.out.take().expect("block backward without cached forward");
        let dz = relu_backward(dy, &y);
        self.conv.backward(&self.bn.backward(&dz))
    }

    fn visit_params(&mut self, f: &mut ParamVisitor<'_, T>) {
        self.conv.visit_params(f);
        self.bn.visit_params(f);
    }
}

/// Upsampling stage: transposed conv → batch norm, additive skip, ReLU,
/// then a regular [`ConvBlock`].
#[derive(Debug, Clone)]
struct UpBlock<T> {
    up: Conv2d<T>,
    bn: BatchNorm2d<T>,
    merged: Option<Tensor<T>>,
    refine: ConvBlock<T>,
}

impl<T: Scalar> UpBlock<T> {
    fn new(cin: usize, cout: usize) -> Self {
        let win = Window {
            kernel: UP_KERNEL,
            stride: 2,
            pad: 1,
        };
        Self {
            up: Conv2d::new(cin, cout, win, true, false),
            bn: BatchNorm2d::new(cout),
            merged: None,
            refine: ConvBlock::new(cout, cout, INNER_KERNEL, 1),
        }
    }

    fn forward(&mut self, x: &Tensor<T>, skip: &Tensor<T>, train: bool) -> Tensor<T> {
        let mut s = self.bn.forward(&self.up.forward(x, train), train);
        s.add_assign(skip);
        relu_inplace(&mut s);
        let y = self.refine.forward(&s, train);
        if train {
            self.merged = Some(s);
        }
        y
    }

    fn apply(&self, x: &Tensor<T>, skip: &Tensor<T>) -> Tensor<T> {
        let mut s = self.bn.apply(&self.up.apply(x));
        s.add_assign(skip);
        relu_inplace(&mut s);
        self.refine.apply(&s)
    }

    /// Returns the gradients w.r.t. the upsampled input and the skip input.
    fn backward(&mut self, dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let s = self.merged.take().expect("up block backward without cached forward");
        let ds = relu_backward(&self.refine.backward(dy), &s);
        let dx = self.up.backward(&self.bn.backward(&ds));
        (dx, ds)
    }

    fn visit_params(&mut self, f: &mut ParamVisitor<'_, T>) {
        self.up.visit_params(f);
        self.bn.visit_params(f);
        self.refine.visit_params(f);
    }
}

/// Encoder-decoder with additive skip connections between stages of equal
/// resolution.
///
/// Layout for depth `d` and base width `w`:
/// * stem: 5×5 conv `in → w`, 3×3 conv `w → w`
/// * encoder stage `k = 1..=d`: 3×3 stride-2 conv `w·2^(k-1) → w·2^k`, 3×3 conv
/// * decoder stage `k = d..=1`: 4×4 stride-2 transposed conv `w·2^k → w·2^(k-1)`,
///   plus encoder output of level `k-1`, then a 3×3 conv
/// * output: 5×5 conv `w → out` with bias, followed by the head
///
/// Every convolution except the output is followed by batch norm and ReLU.
#[derive(Debug, Clone)]
pub struct Backbone<T = f32> {
    config: ModelConfig,
    stem: [ConvBlock<T>; 2],
    down: Vec<[ConvBlock<T>; 2]>,
    /// Indexed by level: `up[k-1]` maps level `k` to `k-1`.
    up: Vec<UpBlock<T>>,
    out: Conv2d<T>,
    /// Head output cached for the backward pass (sigmoid only).
    head_out: Option<Tensor<T>>,
}

impl<T: Scalar> Backbone<T> {
    /// Builds the network and draws all weights from a generator seeded with
    /// `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let w = |l| config.width_at(l);
        let mut stem = [
            ConvBlock::new(config.in_channels, w(0), EDGE_KERNEL, 1),
            ConvBlock::new(w(0), w(0), INNER_KERNEL, 1),
        ];
        stem[0].conv.need_input_grad = false;
        let down = (1..=config.depth)
            .map(|k| {
                [
                    ConvBlock::new(w(k - 1), w(k), INNER_KERNEL, 2),
                    ConvBlock::new(w(k), w(k), INNER_KERNEL, 1),
                ]
            })
            .collect();
        let up = (1..=config.depth).map(|k| UpBlock::new(w(k), w(k - 1))).collect();
        let out = Conv2d::new(
            w(0),
            config.out_channels,
            Window {
                kernel: EDGE_KERNEL,
                stride: 1,
                pad: EDGE_KERNEL / 2,
            },
            false,
            true,
        );
        let mut model = Self {
            config,
            stem,
            down,
            up,
            out,
            head_out: None,
        };
        model.initialize(seed)?;
        Ok(model)
    }

    /// Redraws every convolution weight with MSRA init under the configured
    /// fan mode; biases and batch-norm shifts are zeroed, batch-norm scales
    /// set to one.
    pub fn initialize(&mut self, seed: u64) -> Result<()> {
        let mode = self.config.fan_mode;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut result = Ok(());
        self.visit_convs(&mut |conv| {
            let k = conv.win.kernel;
            match LayerShape::square(k, conv.cin, conv.cout) {
                Ok(shape) => conv.weight = msra_init(shape, mode, &mut rng),
                Err(e) => result = Err(e),
            }
            if let Some(b) = &mut conv.bias {
                b.fill(T::ZERO);
            }
        });
        self.visit_bns(&mut |bn| {
            bn.gamma.fill(T::ONE);
            bn.beta.fill(T::ZERO);
            bn.running_mean.fill(T::ZERO);
            bn.running_var.fill(T::ONE);
        });
        result
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Shapes of all convolutions in visiting order, in data-flow direction.
    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        let mut shapes = Vec::new();
        let mut push = |c: &Conv2d<T>| {
            shapes.push(LayerShape {
                kernel_h: c.win.kernel,
                kernel_w: c.win.kernel,
                channels_in: c.cin,
                channels_out: c.cout,
            })
        };
        self.stem.iter().for_each(|b| push(&b.conv));
        self.down.iter().flatten().for_each(|b| push(&b.conv));
        for u in &self.up {
            push(&u.up);
            push(&u.refine.conv);
        }
        push(&self.out);
        shapes
    }

    /// Weights of every convolution in the same order as [`Self::layer_shapes`].
    pub fn conv_weights(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        self.stem.iter().for_each(|b| out.push(&b.conv.weight));
        self.down.iter().flatten().for_each(|b| out.push(&b.conv.weight));
        for u in &self.up {
            out.push(&u.up.weight);
            out.push(&u.refine.conv.weight);
        }
        out.push(&self.out.weight);
        out
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.dims();
        let m = self.config.size_multiple();
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "model expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} is not divisible by {m} (depth {})",
                self.config.depth
            )));
        }
        Ok(())
    }

    /// Training-mode forward pass returning the pre-activation output.
    /// Batch-norm running statistics are updated and caches filled for
    /// [`Self::backward`].
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut h = self.stem[0].forward(x, true);
        h = self.stem[1].forward(&h, true);
        for stage in &mut self.down {
            let [first, second] = stage;
            let next = second.forward(&first.forward(&h, true), true);
            skips.push(h);
            h = next;
        }
        for (level, block) in self.up.iter_mut().enumerate().rev() {
            h = block.forward(&h, &skips[level], true);
        }
        let mut z = self.out.forward(&h, true);
        self.add_input_skip(x, &mut z);
        Ok(z)
    }

    fn add_input_skip(&self, x: &Tensor<T>, z: &mut Tensor<T>) {
        let Some(offset) = self.config.input_skip else {
            return;
        };
        let plane = x.height() * x.width();
        let span = self.config.out_channels * plane;
        for n in 0..x.batch() {
            let src = &x.example(n)[offset * plane..offset * plane + span];
            for (d, &s) in z.example_mut(n).iter_mut().zip(src) {
                *d = *d + s;
            }
        }
    }

    /// Training-mode forward followed by the head (identity for linear).
    pub fn forward_train_head(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let z = self.forward_train(x)?;
        let y = apply_head(&z, self.config.head, false);
        if self.config.head == HeadKind::Sigmoid {
            self.head_out = Some(y.clone());
        }
        Ok(y)
    }

    /// Backpropagates the gradient of the loss w.r.t. the head output through
    /// the last [`Self::forward_train_head`] call, accumulating parameter
    /// gradients.
    pub fn backward_head(&mut self, d_out: &Tensor<T>) {
        match self.head_out.take() {
            Some(y) => {
                let mut dz = d_out.clone();
                for (d, &s) in dz.data_mut().iter_mut().zip(y.data()) {
                    *d = *d * s * (T::ONE - s);
                }
                self.backward(&dz)
            }
            None => self.backward(d_out),
        }
    }

    /// Backpropagates the gradient w.r.t. the pre-activation output.
    pub fn backward(&mut self, d_pre: &Tensor<T>) {
        let mut g = self.out.backward(d_pre);
        let mut skip_grads = vec![None; self.config.depth];
        for (level, block) in self.up.iter_mut().enumerate() {
            let (dx, ds) = block.backward(&g);
            skip_grads[level] = Some(ds);
            g = dx;
        }
        for (level, stage) in self.down.iter_mut().enumerate().rev() {
            let [first, second] = stage;
            g = first.backward(&second.backward(&g));
            if let Some(ds) = skip_grads[level].take() {
                g.add_assign(&ds);
            }
        }
        let g = self.stem[1].backward(&g);
        self.stem[0].backward(&g);
    }

    /// Evaluation-mode forward pass (running batch-norm statistics) returning
    /// the raw pre-activation output.
    pub fn infer_raw(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut h = self.stem[1].apply(&self.stem[0].apply(x));
        for stage in &self.down {
            let next = stage[1].apply(&stage[0].apply(&h));
            skips.push(h);
            h = next;
        }
        for (level, block) in self.up.iter().enumerate().rev() {
            h = block.apply(&h, &skips[level]);
        }
        let mut z = self.out.apply(&h);
        self.add_input_skip(x, &mut z);
        Ok(z)
    }

    /// Evaluation-mode output with the head applied in training form (no
    /// clamp). For a linear head this is the raw output.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let z = self.infer_raw(x)?;
        Ok(match self.config.head {
            HeadKind::Sigmoid => z.map(sigmoid),
            HeadKind::Linear => z,
        })
    }

    /// Test-time prediction: evaluation mode, linear outputs clamped to `[0, 1]`.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(apply_head(&self.infer_raw(x)?, self.config.head, true))
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |_, g| g.fill(T::ZERO));
    }

    /// Visits `(parameter, gradient)` pairs in a fixed order.
    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Vec<T>, &mut Vec<T>)) {
        self.stem.iter_mut().for_each(|b| b.visit_params(f));
        self.down.iter_mut().flatten().for_each(|b| b.visit_params(f));
        self.up.iter_mut().for_each(|b| b.visit_params(f));
        self.out.visit_params(f);
    }

    /// Visits the non-trainable state (batch-norm running statistics).
    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Vec<T>)) {
        self.visit_bns(&mut |bn| bn.visit_buffers(f));
    }

    pub fn parameter_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p, _| n += p.len());
        n
    }

    /// Copies all parameters and buffers into a flat list of vectors, in
    /// visiting order (parameters first).
    pub fn export_state(&mut self) -> Vec<Vec<T>> {
        let mut out = Vec::new();
        self.visit_params(&mut |p, _| out.push(p.clone()));
        self.visit_buffers(&mut |b| out.push(b.clone()));
        out
    }

    /// Inverse of [`Self::export_state`].
    pub fn import_state(&mut self, state: &[Vec<T>]) -> Result<()> {
        let mut it = state.iter();
        let mut err = None;
        let mut take = |dst: &mut Vec<T>| match it.next() {
            Some(src) if src.len() == dst.len() => dst.copy_from_slice(src),
            Some(src) => {
                err.get_or_insert(format!("tensor of {} values where {} expected", src.len(), dst.len()));
            }
            None => {
                err.get_or_insert("state ended early".to_string());
            }
        };
        self.visit_params(&mut |p, _| take(p));
        self.visit_buffers(&mut |b| take(b));
        if let Some(e) = err {
            return Err(Error::Checkpoint(e));
        }
        if it.next().is_some() {
            return Err(Error::Checkpoint("state has extra tensors".into()));
        }
        Ok(())
    }

    /// Same network with a different scalar type.
    pub fn cast<U: Scalar>(&mut self) -> Result<Backbone<U>> {
        let mut other = Backbone::<U>::new(self.config.clone(), 0)?;
        let state: Vec<Vec<U>> = self
            .export_state()
            .into_iter()
            .map(|v| v.into_iter().map(|x| U::from_f64(x.to_f64())).collect())
            .collect();
        other.import_state(&state)?;
        Ok(other)
    }

    fn visit_convs(&mut self, f: &mut dyn FnMut(&mut Conv2d<T>)) {
        self.stem.iter_mut().for_each(|b| f(&mut b.conv));
        self.down.iter_mut().flatten().for_each(|b| f(&mut b.conv));
        for u in &mut self.up {
            f(&mut u.up);
            f(&mut u.refine.conv);
        }
        f(&mut self.out);
    }

    fn visit_bns(&mut self, f: &mut dyn FnMut(&mut BatchNorm2d<T>)) {
        self.stem.iter_mut().for_each(|b| f(&mut b.bn));
        self.down.iter_mut().flatten().for_each(|b| f(&mut b.bn));
        for u in &mut self.up {
            f(&mut u.bn);
            f(&mut u.refine.bn);
        }
    }
}
