//! A small feed-forward network with hand-written backpropagation.
//!
//! Only the layers the encoders need are provided: 3x3 same-padded
//! convolution, ReLU, 2x2 average pooling, global average pooling and fully
//! connected layers. All parameters of a network live in one flat buffer so
//! optimizers and checkpoints treat them uniformly.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn flat(n: usize) -> Self {
        Self { c: n, h: 1, w: 1 }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Conv3x3 { cin: usize, cout: usize },
    Relu,
    AvgPool2,
    GlobalAvgPool,
    Linear { inp: usize, out: usize },
}

impl Layer {
    fn param_count(&self) -> usize {
        match *self {
            Layer::Conv3x3 { cin, cout } => cout * cin * 9 + cout,
            Layer::Linear { inp, out } => out * inp + out,
            _ => 0,
        }
    }

    fn output_shape(&self, s: Shape) -> Result<Shape> {
        match *self {
            Layer::Conv3x3 { cin, cout } => {
                check_dim(cin, s.c)?;
                Ok(Shape::new(cout, s.h, s.w))
            }
            Layer::Relu => Ok(s),
            Layer::AvgPool2 => {
                if s.h % 2 != 0 || s.w % 2 != 0 {
                    return Err(Error::invalid(format!("avg-pool needs even spatial size, got {}x{}", s.h, s.w)));
                }
                Ok(Shape::new(s.c, s.h / 2, s.w / 2))
            }
            Layer::GlobalAvgPool => Ok(Shape::flat(s.c)),
            Layer::Linear { inp, out } => {
                check_dim(inp, s.len())?;
                Ok(Shape::flat(out))
            }
        }
    }
}

/// Serializable architecture description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: Shape,
    pub layers: Vec<Layer>,
}

impl NetworkSpec {
    /// Convolutional feature extractor: one conv+ReLU+pool block per entry of
    /// `channels` (the last block pools globally) followed by a linear layer
    /// to `out_dim`.
    pub fn conv_extractor(input_size: usize, channels: &[usize], out_dim: usize) -> Self {
        let mut layers = Vec::new();
        let mut cin = 3;
        for (i, &c) in channels.iter().enumerate() {
            layers.push(Layer::Conv3x3 { cin, cout: c });
            layers.push(Layer::Relu);
            if i + 1 < channels.len() {
                layers.push(Layer::AvgPool2);
            } else {
                layers.push(Layer::GlobalAvgPool);
            }
            cin = c;
        }
        layers.push(Layer::Linear { inp: cin, out: out_dim });
        Self {
            input: Shape::new(3, input_size, input_size),
            layers,
        }
    }

    /// Fully connected stack with ReLU between consecutive layers (none after
    /// the last).
    pub fn mlp(dims: &[usize]) -> Self {
        let mut layers = Vec::new();
        for (i, pair) in dims.windows(2).enumerate() {
            if i > 0 {
                layers.push(Layer::Relu);
            }
            layers.push(Layer::Linear { inp: pair[0], out: pair[1] });
        }
        Self {
            input: Shape::flat(dims[0]),
            layers,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    shapes: Vec<Shape>,
    offsets: Vec<usize>,
    params: Vec<f32>,
}

/// Activations recorded by a forward pass; `acts[0]` is the input.
#[derive(Debug, Clone)]
pub struct Trace {
    acts: Vec<Vec<f32>>,
}

impl Trace {
    pub fn output(&self) -> &[f32] {
        self.acts.last().expect("trace is never empty")
    }
}

impl Network {
    /// Builds the network with He/LeCun-uniform weights and zero biases.
    pub fn new(spec: NetworkSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut net = Self::zeroed(spec)?;
        for (i, layer) in net.spec.layers.clone().iter().enumerate() {
            let followed_by_relu = matches!(net.spec.layers.get(i + 1), Some(Layer::Relu));
            let (fan_in, n_weights) = match *layer {
                Layer::Conv3x3 { cin, cout } => (cin * 9, cout * cin * 9),
                Layer::Linear { inp, out } => (inp, out * inp),
                _ => continue,
            };
            let gain = if followed_by_relu { 6.0 } else { 3.0 };
            let bound = (gain / fan_in as f64).sqrt() as f32;
            let off = net.offsets[i];
            for w in &mut net.params[off..off + n_weights] {
                *w = rng.gen_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn zeroed(spec: NetworkSpec) -> Result<Self> {
        let mut shapes = vec![spec.input];
        let mut offsets = Vec::with_capacity(spec.layers.len());
        let mut total = 0;
        for layer in &spec.layers {
            let next = layer.output_shape(*shapes.last().expect("non-empty"))?;
            shapes.push(next);
            offsets.push(total);
            total += layer.param_count();
        }
        Ok(Self {
            spec,
            shapes,
            offsets,
            params: vec![0.0; total],
        })
    }

    pub fn from_params(spec: NetworkSpec, params: Vec<f32>) -> Result<Self> {
        let mut net = Self::zeroed(spec)?;
        check_dim(net.params.len(), params.len())?;
        net.params = params;
        Ok(net)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn input_shape(&self) -> Shape {
        self.spec.input
    }

    pub fn output_dim(&self) -> usize {
        self.shapes.last().expect("non-empty").len()
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn forward(&self, input: &[f32]) -> Result<Trace> {
        check_dim(self.spec.input.len(), input.len())?;
        let mut acts = Vec::with_capacity(self.spec.layers.len() + 1);
        acts.push(input.to_vec());
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let x = acts.last().expect("non-empty");
            let s_in = self.shapes[i];
            let s_out = self.shapes[i + 1];
            let p = &self.params[self.offsets[i]..self.offsets[i] + layer.param_count()];
            let y = match *layer {
                Layer::Conv3x3 { cin, cout } => conv_forward(x, p, cin, cout, s_in.h, s_in.w),
                Layer::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
                Layer::AvgPool2 => pool_forward(x, s_in),
                Layer::GlobalAvgPool => {
                    let plane = s_in.h * s_in.w;
                    x.chunks_exact(plane)
                        .map(|ch| ch.iter().sum::<f32>() / plane as f32)
                        .collect()
                }
                Layer::Linear { inp, out } => linear_forward(x, p, inp, out),
            };
            debug_assert_eq!(y.len(), s_out.len());
            acts.push(y);
        }
        Ok(Trace { acts })
    }

    /// Convenience forward returning only the output.
    pub fn infer(&self, input: &[f32]) -> Result<Vec<f32>> {
        let mut t = self.forward(input)?;
        Ok(t.acts.pop().expect("non-empty"))
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the input (empty when `need_input_grad` is false).
    pub fn backward(&self, trace: &Trace, grad_out: &[f32], grads: &mut [f32], need_input_grad: bool) -> Result<Vec<f32>> {
        check_dim(self.params.len(), grads.len())?;
        check_dim(self.output_dim(), grad_out.len())?;
        let mut g = grad_out.to_vec();
        for i in (0..self.spec.layers.len()).rev() {
            let layer = self.spec.layers[i];
            let x = &trace.acts[i];
            let s_in = self.shapes[i];
            let off = self.offsets[i];
            let n = layer.param_count();
            let want_dx = i > 0 || need_input_grad;
            g = match layer {
                Layer::Conv3x3 { cin, cout } => {
                    let p = &self.params[off..off + n];
                    conv_backward(x, p, &g, &mut grads[off..off + n], cin, cout, s_in.h, s_in.w, want_dx)
                }
                Layer::Relu => x.iter().zip(&g).map(|(&v, &d)| if v > 0.0 { d } else { 0.0 }).collect(),
                Layer::AvgPool2 => pool_backward(&g, s_in),
                Layer::GlobalAvgPool => {
                    let plane = s_in.h * s_in.w;
                    let mut dx = vec![0.0; s_in.len()];
                    for (c, &d) in g.iter().enumerate() {
                        let v = d / plane as f32;
                        dx[c * plane..(c + 1) * plane].iter_mut().for_each(|e| *e = v);
                    }
                    dx
                }
                Layer::Linear { inp, out } => {
                    let p = &self.params[off..off + n];
                    linear_backward(x, p, &g, &mut grads[off..off + n], inp, out, want_dx)
                }
            };
            if !want_dx {
                return Ok(Vec::new());
            }
        }
        Ok(g)
    }
}

fn linear_forward(x: &[f32], p: &[f32], inp: usize, out: usize) -> Vec<f32> {
    let (w, b) = p.split_at(out * inp);
    (0..out)
        .map(|o| {
            let row = &w[o * inp..(o + 1) * inp];
            row.iter().zip(x).map(|(a, b)| a * b).sum::<f32>() + b[o]
        })
        .collect()
}

fn linear_backward(x: &[f32], p: &[f32], g: &[f32], gp: &mut [f32], inp: usize, out: usize, want_dx: bool) -> Vec<f32> {
    let (gw, gb) = gp.split_at_mut(out * inp);
    for o in 0..out {
        let d = g[o];
        if d == 0.0 {
            continue;
        }
        gb[o] += d;
        for (gwi, &xi) in gw[o * inp..(o + 1) * inp].iter_mut().zip(x) {
            *gwi += d * xi;
        }
    }
    if !want_dx {
        return Vec::new();
    }
    let w = &p[..out * inp];
    let mut dx = vec![0.0f32; inp];
    for o in 0..out {
        let d = g[o];
        if d == 0.0 {
            continue;
        }
        for (dxi, &wi) in dx.iter_mut().zip(&w[o * inp..(o + 1) * inp]) {
            *dxi += d * wi;
        }
    }
    dx
}

/// Unfolds 3x3 same-padded patches: result is (cin*9) x (h*w), row-major.
fn im2col(x: &[f32], cin: usize, h: usize, w: usize) -> Vec<f32> {
    let hw = h * w;
    let mut cols = vec![0.0f32; cin * 9 * hw];
    for c in 0..cin {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c * 9 + ky * 3 + kx) * hw;
                let dst = &mut cols[row..row + hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst_row = &mut dst[y * w..(y + 1) * w];
                    let (x_lo, x_hi) = match kx {
                        0 => (1, w),
                        1 => (0, w),
                        _ => (0, w - 1),
                    };
                    for xx in x_lo..x_hi {
                        dst_row[xx] = src_row[xx + kx - 1];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f32], cin: usize, h: usize, w: usize) -> Vec<f32> {
    let hw = h * w;
    let mut x = vec![0.0f32; cin * hw];
    for c in 0..cin {
        let plane = &mut x[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c * 9 + ky * 3 + kx) * hw;
                let src = &cols[row..row + hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let src_row = &src[y * w..(y + 1) * w];
                    let (x_lo, x_hi) = match kx {
                        0 => (1, w),
                        1 => (0, w),
                        _ => (0, w - 1),
                    };
                    for xx in x_lo..x_hi {
                        dst_row[xx + kx - 1] += src_row[xx];
                    }
                }
            }
        }
    }
    x
}

/// `c (m x n) = a (m x k) * b (k x n)` with optional transposes expressed via
/// strides; accumulates when `beta == 1`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool, c: &mut [f32], beta: f32) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths were checked above against the strides used.
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

fn conv_forward(x: &[f32], p: &[f32], cin: usize, cout: usize, h: usize, w: usize) -> Vec<f32> {
    let hw = h * w;
    let k = cin * 9;
    let (wt, b) = p.split_at(cout * k);
    let cols = im2col(x, cin, h, w);
    let mut y = vec![0.0f32; cout * hw];
    for o in 0..cout {
        y[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v = b[o]);
    }
    gemm(cout, k, hw, wt, false, &cols, false, &mut y, 1.0);
    y
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f32],
    p: &[f32],
    g: &[f32],
    gp: &mut [f32],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    want_dx: bool,
) -> Vec<f32> {
    let hw = h * w;
    let k = cin * 9;
    let cols = im2col(x, cin, h, w);
    let (gw, gb) = gp.split_at_mut(cout * k);
    // dW += dY (cout x hw) * cols^T (hw x k)
    gemm(cout, hw, k, g, false, &cols, true, gw, 1.0);
    for o in 0..cout {
        gb[o] += g[o * hw..(o + 1) * hw].iter().sum::<f32>();
    }
    if !want_dx {
        return Vec::new();
    }
    let wt = &p[..cout * k];
    let mut dcols = vec![0.0f32; k * hw];
    // dcols = W^T (k x cout) * dY (cout x hw)
    gemm(k, cout, hw, wt, true, g, false, &mut dcols, 0.0);
    col2im(&dcols, cin, h, w)
}

fn pool_forward(x: &[f32], s: Shape) -> Vec<f32> {
    let (oh, ow) = (s.h / 2, s.w / 2);
    let mut y = vec![0.0f32; s.c * oh * ow];
    for c in 0..s.c {
        let plane = &x[c * s.h * s.w..(c + 1) * s.h * s.w];
        for yy in 0..oh {
            for xx in 0..ow {
                let i = 2 * yy * s.w + 2 * xx;
                y[c * oh * ow + yy * ow + xx] = 0.25 * (plane[i] + plane[i + 1] + plane[i + s.w] + plane[i + s.w + 1]);
            }
        }
    }
    y
}

fn pool_backward(g: &[f32], s: Shape) -> Vec<f32> {
    let (oh, ow) = (s.h / 2, s.w / 2);
    let mut dx = vec![0.0f32; s.len()];
    for c in 0..s.c {
        let plane = &mut dx[c * s.h * s.w..(c + 1) * s.h * s.w];
        for yy in 0..oh {
            for xx in 0..ow {
                let d = 0.25 * g[c * oh * ow + yy * ow + xx];
                let i = 2 * yy * s.w + 2 * xx;
                plane[i] = d;
                plane[i + 1] = d;
                plane[i + s.w] = d;
                plane[i + s.w + 1] = d;
            }
        }
    }
    dx
}

/// Stochastic gradient descent with momentum and L2 weight decay
/// (`v = mu * v + (g + wd * p); p -= lr * v`).
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<f32>,
}

impl Sgd {
    pub fn new(n: usize, lr: f32, momentum: f32, weight_decay: f32) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) {
        for ((p, &g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let g = g + self.weight_decay * *p;
            *v = self.momentum * *v + g;
            *p -= self.lr * *v;
        }
    }
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f32, beta1: f32, beta2: f32, eps: f32) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}
