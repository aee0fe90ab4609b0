//! The prior network: three valid convolutions and two dense layers mapping a
//! 4x80x80 frame stack to one Dirichlet concentration per action.
//!
//! Activations are kept channel-major across the batch, `(C, B, H, W)`, so that
//! every convolution over a minibatch is a single im2col GEMM.

use rand::{Rng, SeedableRng};

use crate::env::{FrameStack, SimRng, STACK_DEPTH, STACK_SIDE};
use crate::error::{Error, Result};
use crate::planner::DirichletParams;
use crate::prior::scalar::{gemm, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub in_side: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvSpec {
    /// No padding; a partial last window is dropped.
    pub const fn out_side(&self) -> usize {
        (self.in_side - self.kernel) / self.stride + 1
    }

    pub const fn patch(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub const fn out_len(&self) -> usize {
        self.out_channels * self.out_side() * self.out_side()
    }
}

pub const CONV1: ConvSpec = ConvSpec {
    in_channels: STACK_DEPTH,
    in_side: STACK_SIDE,
    out_channels: 32,
    kernel: 8,
    stride: 4,
};
pub const CONV2: ConvSpec = ConvSpec {
    in_channels: 32,
    in_side: CONV1.out_side(),
    out_channels: 64,
    kernel: 4,
    stride: 2,
};
pub const CONV3: ConvSpec = ConvSpec {
    in_channels: 64,
    in_side: CONV2.out_side(),
    out_channels: 64,
    kernel: 2,
    stride: 1,
};
pub const FLAT: usize = CONV3.out_len();
pub const HIDDEN: usize = 512;
pub const INPUT_LEN: usize = STACK_DEPTH * STACK_SIDE * STACK_SIDE;

const _: () = {
    assert!(CONV1.out_side() == 19);
    assert!(CONV2.out_side() == 8);
    assert!(CONV3.out_side() == 7);
    assert!(FLAT == 3136);
};

pub const DEFAULT_ALPHA_FLOOR: f64 = 1e-2;

/// The floor is saved as f32; round it now so a save/load cycle is exact.
fn storable_floor(floor: f64) -> f64 {
    floor as f32 as f64
}

/// Weights `[out][fan_in]` row-major plus one bias per output unit.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<F> {
    pub weight: Vec<F>,
    pub bias: Vec<F>,
}

impl<F: Scalar> Dense<F> {
    fn zeros(outputs: usize, fan_in: usize) -> Self {
        Dense {
            weight: vec![F::zero(); outputs * fan_in],
            bias: vec![F::zero(); outputs],
        }
    }

    fn uniform(outputs: usize, fan_in: usize, rng: &mut SimRng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Dense {
            weight: (0..outputs * fan_in)
                .map(|_| F::of(rng.gen_range(-bound..bound)))
                .collect(),
            bias: vec![F::zero(); outputs],
        }
    }
}

/// All trainable parameters. Also used as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct CnnParams<F> {
    pub conv1: Dense<F>,
    pub conv2: Dense<F>,
    pub conv3: Dense<F>,
    pub fc1: Dense<F>,
    pub out: Dense<F>,
    pub n_actions: usize,
    /// Added after the softplus so every concentration stays strictly positive.
    pub alpha_floor: f64,
}

/// Name, dimensions and values of one stored tensor.
pub struct TensorView<'a, F> {
    pub name: &'static str,
    pub dims: Vec<usize>,
    pub values: &'a [F],
}

impl<F: Scalar> CnnParams<F> {
    pub fn zeros(n_actions: usize, alpha_floor: f64) -> Self {
        CnnParams {
            conv1: Dense::zeros(CONV1.out_channels, CONV1.patch()),
            conv2: Dense::zeros(CONV2.out_channels, CONV2.patch()),
            conv3: Dense::zeros(CONV3.out_channels, CONV3.patch()),
            fc1: Dense::zeros(HIDDEN, FLAT),
            out: Dense::zeros(n_actions, HIDDEN),
            n_actions,
            alpha_floor: storable_floor(alpha_floor),
        }
    }

    /// Weights uniform in ±1/sqrt(fan_in), biases zero.
    pub fn init(n_actions: usize, alpha_floor: f64, seed: u64) -> Self {
        let mut rng = SimRng::seed_from_u64(seed);
        CnnParams {
            conv1: Dense::uniform(CONV1.out_channels, CONV1.patch(), &mut rng),
            conv2: Dense::uniform(CONV2.out_channels, CONV2.patch(), &mut rng),
            conv3: Dense::uniform(CONV3.out_channels, CONV3.patch(), &mut rng),
            fc1: Dense::uniform(HIDDEN, FLAT, &mut rng),
            out: Dense::uniform(n_actions, HIDDEN, &mut rng),
            n_actions,
            alpha_floor: storable_floor(alpha_floor),
        }
    }

    fn layers(&self) -> [&Dense<F>; 5] {
        [&self.conv1, &self.conv2, &self.conv3, &self.fc1, &self.out]
    }

    fn layers_mut(&mut self) -> [&mut Dense<F>; 5] {
        [
            &mut self.conv1,
            &mut self.conv2,
            &mut self.conv3,
            &mut self.fc1,
            &mut self.out,
        ]
    }

    /// Trainable tensors in canonical order.
    pub fn tensors(&self) -> Vec<TensorView<'_, F>> {
        let n = self.n_actions;
        let conv = |s: ConvSpec| vec![s.out_channels, s.in_channels, s.kernel, s.kernel];
        vec![
            TensorView { name: "conv1.w", dims: conv(CONV1), values: &self.conv1.weight },
            TensorView { name: "conv1.b", dims: vec![CONV1.out_channels], values: &self.conv1.bias },
            TensorView { name: "conv2.w", dims: conv(CONV2), values: &self.conv2.weight },
            TensorView { name: "conv2.b", dims: vec![CONV2.out_channels], values: &self.conv2.bias },
            TensorView { name: "conv3.w", dims: conv(CONV3), values: &self.conv3.weight },
            TensorView { name: "conv3.b", dims: vec![CONV3.out_channels], values: &self.conv3.bias },
            TensorView { name: "fc1.w", dims: vec![HIDDEN, FLAT], values: &self.fc1.weight },
            TensorView { name: "fc1.b", dims: vec![HIDDEN], values: &self.fc1.bias },
            TensorView { name: "out.w", dims: vec![n, HIDDEN], values: &self.out.weight },
            TensorView { name: "out.b", dims: vec![n], values: &self.out.bias },
        ]
    }

    /// Mutable flat views in the same order as [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<F>> {
        self.layers_mut()
            .into_iter()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers()
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub fn cast<G: Scalar>(&self) -> CnnParams<G> {
        let conv = |d: &Dense<F>| Dense {
            weight: d.weight.iter().map(|v| G::of(v.f64())).collect(),
            bias: d.bias.iter().map(|v| G::of(v.f64())).collect(),
        };
        CnnParams {
            conv1: conv(&self.conv1),
            conv2: conv(&self.conv2),
            conv3: conv(&self.conv3),
            fc1: conv(&self.fc1),
            out: conv(&self.out),
            n_actions: self.n_actions,
            alpha_floor: self.alpha_floor,
        }
    }

    /// `self -= lr * grad`.
    pub fn sgd_step(&mut self, grad: &CnnParams<F>, lr: F) {
        for (p, g) in self.layers_mut().into_iter().zip(grad.layers()) {
            for (w, d) in p.weight.iter_mut().zip(&g.weight) {
                *w = *w - lr * *d;
            }
            for (w, d) in p.bias.iter_mut().zip(&g.bias) {
                *w = *w - lr * *d;
            }
        }
    }

    /// α for one frame stack.
    pub fn forward(&self, x: &FrameStack) -> Result<DirichletParams> {
        let mut input = vec![F::zero(); INPUT_LEN];
        x.write_into_scalar(&mut input);
        let alpha = self.forward_batch(&input, 1)?;
        DirichletParams::new(alpha.iter().map(|a| a.f64()).collect())
    }

    /// α for `batch` stacked inputs, example-major `[B][4][80][80]`.
    /// Returns `[B][n_actions]`.
    pub fn forward_batch(&self, inputs: &[F], batch: usize) -> Result<Vec<F>> {
        Ok(self.run_forward(inputs, batch)?.alpha)
    }

    fn run_forward(&self, inputs: &[F], batch: usize) -> Result<Activations<F>> {
        if batch == 0 || inputs.len() != batch * INPUT_LEN {
            return Err(Error::Shape(format!(
                "expected {batch} x {INPUT_LEN} input values, got {}",
                inputs.len()
            )));
        }
        // example-major -> channel-major
        let plane = STACK_SIDE * STACK_SIDE;
        let mut x = vec![F::zero(); inputs.len()];
        for b in 0..batch {
            for c in 0..STACK_DEPTH {
                let src = &inputs[(b * STACK_DEPTH + c) * plane..][..plane];
                x[(c * batch + b) * plane..][..plane].copy_from_slice(src);
            }
        }
        let cols1 = im2col(&x, CONV1, batch);
        let act1 = conv_forward(&cols1, &self.conv1, CONV1, batch);
        let cols2 = im2col(&act1, CONV2, batch);
        let act2 = conv_forward(&cols2, &self.conv2, CONV2, batch);
        let cols3 = im2col(&act2, CONV3, batch);
        let act3 = conv_forward(&cols3, &self.conv3, CONV3, batch);

        let p3 = CONV3.out_side() * CONV3.out_side();
        let mut flat = vec![F::zero(); batch * FLAT];
        for c in 0..CONV3.out_channels {
            for b in 0..batch {
                flat[b * FLAT + c * p3..][..p3].copy_from_slice(&act3[(c * batch + b) * p3..][..p3]);
            }
        }
        let hidden = dense_forward(&flat, &self.fc1, batch, FLAT, HIDDEN, true);
        let logits = dense_forward(&hidden, &self.out, batch, HIDDEN, self.n_actions, false);
        let floor = F::of(self.alpha_floor);
        let alpha = logits.iter().map(|&z| softplus(z) + floor).collect();
        Ok(Activations {
            batch,
            cols1,
            act1,
            cols2,
            act2,
            cols3,
            act3,
            flat,
            hidden,
            logits,
            alpha,
        })
    }

    /// Mean over the batch of the squared Euclidean error between predicted
    /// and target concentrations. `targets` is `[B][n_actions]`.
    pub fn loss(&self, inputs: &[F], targets: &[F], batch: usize) -> Result<F> {
        self.check_targets(targets, batch)?;
        let alpha = self.forward_batch(inputs, batch)?;
        Ok(squared_error(&alpha, targets, batch))
    }

    /// Loss and its exact gradient with respect to every parameter.
    pub fn loss_and_grad(&self, inputs: &[F], targets: &[F], batch: usize) -> Result<(F, CnnParams<F>)> {
        self.check_targets(targets, batch)?;
        let acts = self.run_forward(inputs, batch)?;
        let loss = squared_error(&acts.alpha, targets, batch);
        let n = self.n_actions;
        let mut grad = CnnParams::zeros(n, self.alpha_floor);

        // d/dz of mean_b sum_i (softplus(z) + floor - t)^2
        let scale = F::of(2.0 / batch as f64);
        let dz: Vec<F> = acts
            .alpha
            .iter()
            .zip(targets)
            .zip(&acts.logits)
            .map(|((&a, &t), &z)| scale * (a - t) * sigmoid(z))
            .collect();

        let mut dhidden = dense_backward(&dz, &acts.hidden, &self.out, &mut grad.out, batch, HIDDEN, n);
        relu_mask(&mut dhidden, &acts.hidden);
        let dflat = dense_backward(&dhidden, &acts.flat, &self.fc1, &mut grad.fc1, batch, FLAT, HIDDEN);

        let p3 = CONV3.out_side() * CONV3.out_side();
        let mut dact3 = vec![F::zero(); acts.act3.len()];
        for c in 0..CONV3.out_channels {
            for b in 0..batch {
                dact3[(c * batch + b) * p3..][..p3].copy_from_slice(&dflat[b * FLAT + c * p3..][..p3]);
            }
        }
        relu_mask(&mut dact3, &acts.act3);
        let mut dact2 = conv_backward(&dact3, &acts.cols3, &self.conv3, &mut grad.conv3, CONV3, batch, true)
            .expect("input gradient requested");
        relu_mask(&mut dact2, &acts.act2);
        let mut dact1 = conv_backward(&dact2, &acts.cols2, &self.conv2, &mut grad.conv2, CONV2, batch, true)
            .expect("input gradient requested");
        relu_mask(&mut dact1, &acts.act1);
        conv_backward(&dact1, &acts.cols1, &self.conv1, &mut grad.conv1, CONV1, batch, false);

        Ok((loss, grad))
    }

    fn check_targets(&self, targets: &[F], batch: usize) -> Result<()> {
        if batch == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        if targets.len() != batch * self.n_actions {
            return Err(Error::Shape(format!(
                "expected {batch} x {} targets, got {}",
                self.n_actions,
                targets.len()
            )));
        }
        Ok(())
    }
}

struct Activations<F> {
    batch: usize,
    cols1: Vec<F>,
    act1: Vec<F>,
    cols2: Vec<F>,
    act2: Vec<F>,
    cols3: Vec<F>,
    act3: Vec<F>,
    flat: Vec<F>,
    hidden: Vec<F>,
    logits: Vec<F>,
    alpha: Vec<F>,
}

impl<F> std::fmt::Debug for Activations<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Activations(batch = {})", self.batch)
    }
}

impl FrameStack {
    pub(crate) fn write_into_scalar<F: Scalar>(&self, out: &mut [F]) {
        let plane = STACK_SIDE * STACK_SIDE;
        assert_eq!(out.len(), STACK_DEPTH * plane);
        for (c, f) in self.frames().iter().enumerate() {
            for (o, &p) in out[c * plane..(c + 1) * plane].iter_mut().zip(&f.pixels) {
                *o = F::of(p as f64);
            }
        }
    }
}

fn squared_error<F: Scalar>(alpha: &[F], targets: &[F], batch: usize) -> F {
    let total: F = alpha
        .iter()
        .zip(targets)
        .map(|(&a, &t)| (a - t) * (a - t))
        .sum();
    total / F::of(batch as f64)
}

#[inline]
fn softplus<F: Scalar>(z: F) -> F {
    z.max(F::zero()) + (-z.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid<F: Scalar>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

fn relu_mask<F: Scalar>(grad: &mut [F], act: &[F]) {
    for (g, &a) in grad.iter_mut().zip(act) {
        if a <= F::zero() {
            *g = F::zero();
        }
    }
}

/// `(C, B, S, S)` activations -> `[C*k*k][B*out*out]` patch matrix.
fn im2col<F: Scalar>(act: &[F], spec: ConvSpec, batch: usize) -> Vec<F> {
    let (s, k, st, os) = (spec.in_side, spec.kernel, spec.stride, spec.out_side());
    let p = os * os;
    let width = batch * p;
    let mut cols = vec![F::zero(); spec.patch() * width];
    for ic in 0..spec.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ic * k + ky) * k + kx) * width..][..width];
                for b in 0..batch {
                    let img = &act[(ic * batch + b) * s * s..][..s * s];
                    for oy in 0..os {
                        let src = &img[(oy * st + ky) * s + kx..];
                        let dst = &mut row[b * p + oy * os..][..os];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            *d = src[ox * st];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Inverse scatter of [`im2col`]: accumulate patch gradients into `(C, B, S, S)`.
fn col2im<F: Scalar>(dcols: &[F], spec: ConvSpec, batch: usize) -> Vec<F> {
    let (s, k, st, os) = (spec.in_side, spec.kernel, spec.stride, spec.out_side());
    let p = os * os;
    let width = batch * p;
    let mut act = vec![F::zero(); spec.in_channels * batch * s * s];
    for ic in 0..spec.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = &dcols[((ic * k + ky) * k + kx) * width..][..width];
                for b in 0..batch {
                    let img = &mut act[(ic * batch + b) * s * s..][..s * s];
                    for oy in 0..os {
                        let base = (oy * st + ky) * s + kx;
                        for ox in 0..os {
                            img[base + ox * st] = img[base + ox * st] + row[b * p + oy * os + ox];
                        }
                    }
                }
            }
        }
    }
    act
}

/// Convolution + bias + ReLU; output `(C_out, B, out, out)`.
fn conv_forward<F: Scalar>(cols: &[F], layer: &Dense<F>, spec: ConvSpec, batch: usize) -> Vec<F> {
    let width = batch * spec.out_side() * spec.out_side();
    let mut out = vec![F::zero(); spec.out_channels * width];
    gemm(false, false, spec.out_channels, spec.patch(), width, &layer.weight, cols, F::zero(), &mut out);
    for (row, &b) in out.chunks_mut(width).zip(&layer.bias) {
        for v in row {
            *v = (*v + b).max(F::zero());
        }
    }
    out
}

/// Accumulates weight and bias gradients from the (already ReLU-masked)
/// output gradient; returns the input gradient when asked for it.
fn conv_backward<F: Scalar>(
    dout: &[F],
    cols: &[F],
    layer: &Dense<F>,
    grad: &mut Dense<F>,
    spec: ConvSpec,
    batch: usize,
    want_input: bool,
) -> Option<Vec<F>> {
    let width = batch * spec.out_side() * spec.out_side();
    let (oc, kk) = (spec.out_channels, spec.patch());
    gemm(false, true, oc, width, kk, dout, cols, F::one(), &mut grad.weight);
    for (gb, row) in grad.bias.iter_mut().zip(dout.chunks(width)) {
        *gb = *gb + row.iter().copied().sum();
    }
    want_input.then(|| {
        let mut dcols = vec![F::zero(); kk * width];
        gemm(true, false, kk, oc, width, &layer.weight, dout, F::zero(), &mut dcols);
        col2im(&dcols, spec, batch)
    })
}

/// `[B][fan_in] -> [B][outputs]`, optional ReLU.
fn dense_forward<F: Scalar>(
    x: &[F],
    layer: &Dense<F>,
    batch: usize,
    fan_in: usize,
    outputs: usize,
    relu: bool,
) -> Vec<F> {
    let mut y = vec![F::zero(); batch * outputs];
    gemm(false, true, batch, fan_in, outputs, x, &layer.weight, F::zero(), &mut y);
    for row in y.chunks_mut(outputs) {
        for (v, &b) in row.iter_mut().zip(&layer.bias) {
            *v = *v + b;
            if relu {
                *v = v.max(F::zero());
            }
        }
    }
    y
}

/// Gradient through a dense layer; returns `d input`.
fn dense_backward<F: Scalar>(
    dy: &[F],
    x: &[F],
    layer: &Dense<F>,
    grad: &mut Dense<F>,
    batch: usize,
    fan_in: usize,
    outputs: usize,
) -> Vec<F> {
    gemm(true, false, outputs, batch, fan_in, dy, x, F::one(), &mut grad.weight);
    for row in dy.chunks(outputs) {
        for (gb, &d) in grad.bias.iter_mut().zip(row) {
            *gb = *gb + d;
        }
    }
    let mut dx = vec![F::zero(); batch * fan_in];
    gemm(false, false, batch, outputs, fan_in, dy, &layer.weight, F::zero(), &mut dx);
    dx
}
