//! Feed-forward encoder networks: forward pass with an activation cache,
//! exact reverse-mode gradients, global-norm gradient clipping, and Adam.
//!
//! Only the fixed MLP topology is supported; the networks are small enough
//! that dense BLAS matmuls per layer are the whole story.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 4] = b"MMCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Sigmoid,
    Linear,
}

impl Activation {
    fn code(self) -> (u8, f64) {
        match self {
            Activation::Linear => (0, 0.0),
            Activation::LeakyRelu(a) => (1, a),
            Activation::Sigmoid => (2, 0.0),
        }
    }

    fn from_code(code: u8, alpha: f64) -> Result<Activation> {
        match code {
            0 => Ok(Activation::Linear),
            1 => Ok(Activation::LeakyRelu(alpha)),
            2 => Ok(Activation::Sigmoid),
            other => Err(Error::ConfigParse(format!("unknown activation code {other}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    /// Weight matrix, `out_dim x in_dim`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub act: Activation,
}

/// A trainable MLP encoder. `forward` caches activations for `backward`;
/// `encode` is the pure read-only pass used after training.
#[derive(Debug, Clone)]
pub struct EncoderNet {
    layers: Vec<Layer>,
    cache: Option<Vec<Array2<f64>>>,
}

/// Parameter gradients plus the gradient with respect to the input batch.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub w: Vec<Array2<f64>>,
    pub b: Vec<Array1<f64>>,
    pub input: Array2<f64>,
}

impl EncoderNet {
    pub fn from_layers(layers: Vec<Layer>) -> Result<EncoderNet> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("encoder needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].w.nrows() != pair[1].w.ncols() {
                return Err(Error::InvalidConfig(format!(
                    "layer dimensions do not chain: {} -> {}",
                    pair[0].w.nrows(),
                    pair[1].w.ncols()
                )));
            }
        }
        for l in &layers {
            if l.b.len() != l.w.nrows() {
                return Err(Error::InvalidConfig("bias length must match layer output".into()));
            }
        }
        Ok(EncoderNet { layers, cache: None })
    }

    /// An MLP with `n_layers` weight layers: all hidden layers share
    /// `hidden_width` and LeakyReLU(`alpha`); the final layer is linear, or
    /// sigmoid when `sigmoid_output` is set. Kaiming-style fan-in
    /// initialization, biases zero.
    pub fn mlp(
        in_dim: usize,
        hidden_width: usize,
        n_layers: usize,
        out_dim: usize,
        alpha: f64,
        sigmoid_output: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<EncoderNet> {
        if in_dim == 0 || out_dim == 0 || n_layers == 0 {
            return Err(Error::InvalidConfig(
                "encoder dimensions and layer count must be positive".into(),
            ));
        }
        if n_layers > 1 && hidden_width == 0 {
            return Err(Error::InvalidConfig("hidden width must be positive".into()));
        }
        let mut sizes = Vec::with_capacity(n_layers + 1);
        sizes.push(in_dim);
        for _ in 0..n_layers - 1 {
            sizes.push(hidden_width);
        }
        sizes.push(out_dim);

        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let last = l == n_layers - 1;
            let gain = if last {
                1.0
            } else {
                (2.0 / (1.0 + alpha * alpha)).sqrt()
            };
            let std = gain / (fan_in as f64).sqrt();
            let data: Vec<f64> = (0..fan_out * fan_in)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
                .collect();
            let act = if last {
                if sigmoid_output {
                    Activation::Sigmoid
                } else {
                    Activation::Linear
                }
            } else {
                Activation::LeakyRelu(alpha)
            };
            layers.push(Layer {
                w: Array2::from_shape_vec((fan_out, fan_in), data).expect("shape"),
                b: Array1::zeros(fan_out),
                act,
            });
        }
        EncoderNet::from_layers(layers)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].w.nrows()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn params_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().all(|v| v.is_finite()) && l.b.iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.in_dim() {
            return Err(Error::InvalidArgument(format!(
                "encoder expects {} input columns, got {}",
                self.in_dim(),
                x.ncols()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite encoder input".into()));
        }
        Ok(())
    }

    /// Encoding pass that caches intermediates for [`backward`](Self::backward).
    pub fn forward(&mut self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let mut acts: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for layer in &self.layers {
            let mut h = acts.last().unwrap().dot(&layer.w.t());
            h += &layer.b;
            apply_activation(&mut h, layer.act);
            acts.push(h);
        }
        let out = acts.last().unwrap().clone();
        self.cache = Some(acts);
        Ok(out)
    }

    /// Pure encoding pass without touching the cache.
    pub fn encode(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let mut h = x.dot(&self.layers[0].w.t());
        h += &self.layers[0].b;
        apply_activation(&mut h, self.layers[0].act);
        for layer in &self.layers[1..] {
            let mut next = h.dot(&layer.w.t());
            next += &layer.b;
            apply_activation(&mut next, layer.act);
            h = next;
        }
        Ok(h)
    }

    /// Exact reverse-mode gradients of the cached forward pass with respect
    /// to all parameters and the input.
    pub fn backward(&mut self, output_grad: &Array2<f64>) -> Result<Gradients> {
        let acts = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("backward without a cached forward pass".into()))?;
        let batch = acts[0].nrows();
        if output_grad.dim() != (batch, self.out_dim()) {
            return Err(Error::InvalidArgument(format!(
                "output gradient shape {:?} does not match cached batch ({}, {})",
                output_grad.dim(),
                batch,
                self.out_dim()
            )));
        }

        let n = self.layers.len();
        let mut grad_w: Vec<Array2<f64>> = Vec::with_capacity(n);
        let mut grad_b: Vec<Array1<f64>> = Vec::with_capacity(n);
        let mut delta = output_grad.clone();
        for l in (0..n).rev() {
            // activation derivative from the layer output (sign-preserving
            // for LeakyReLU, value-based for sigmoid)
            multiply_activation_grad(&mut delta, &acts[l + 1], self.layers[l].act);
            grad_w.push(delta.t().dot(&acts[l]));
            grad_b.push(delta.sum_axis(Axis(0)));
            delta = delta.dot(&self.layers[l].w);
        }
        grad_w.reverse();
        grad_b.reverse();
        Ok(Gradients {
            w: grad_w,
            b: grad_b,
            input: delta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(std::fs::File::create(path)?);
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        out.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for l in &self.layers {
            let (code, alpha) = l.act.code();
            out.write_all(&(l.w.nrows() as u32).to_le_bytes())?;
            out.write_all(&(l.w.ncols() as u32).to_le_bytes())?;
            out.write_all(&[code])?;
            out.write_all(&alpha.to_le_bytes())?;
        }
        for l in &self.layers {
            for v in l.w.iter() {
                out.write_all(&v.to_le_bytes())?;
            }
            for v in l.b.iter() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<EncoderNet> {
        let mut input = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::ConfigParse("not an encoder checkpoint".into()));
        }
        let version = read_u32(&mut input)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::ConfigParse(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let n_layers = read_u32(&mut input)? as usize;
        let mut shapes = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let rows = read_u32(&mut input)? as usize;
            let cols = read_u32(&mut input)? as usize;
            let mut code = [0u8; 1];
            input.read_exact(&mut code)?;
            let alpha = read_f64(&mut input)?;
            shapes.push((rows, cols, Activation::from_code(code[0], alpha)?));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for (rows, cols, act) in shapes {
            let mut w = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                w.push(read_f64(&mut input)?);
            }
            let mut b = Vec::with_capacity(rows);
            for _ in 0..rows {
                b.push(read_f64(&mut input)?);
            }
            layers.push(Layer {
                w: Array2::from_shape_vec((rows, cols), w).expect("shape"),
                b: Array1::from_vec(b),
                act,
            });
        }
        EncoderNet::from_layers(layers)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn apply_activation(h: &mut Array2<f64>, act: Activation) {
    match act {
        Activation::Linear => {}
        Activation::LeakyRelu(a) => h.mapv_inplace(|v| if v >= 0.0 { v } else { a * v }),
        Activation::Sigmoid => h.mapv_inplace(|v| 1.0 / (1.0 + (-v).exp())),
    }
}

fn multiply_activation_grad(delta: &mut Array2<f64>, output: &Array2<f64>, act: Activation) {
    match act {
        Activation::Linear => {}
        Activation::LeakyRelu(a) => {
            delta.zip_mut_with(output, |d, &y| {
                if y <= 0.0 {
                    *d *= a;
                }
            });
        }
        Activation::Sigmoid => {
            delta.zip_mut_with(output, |d, &y| *d *= y * (1.0 - y));
        }
    }
}

impl Gradients {
    /// Elementwise accumulation, for nets that see more than one batch per
    /// step (e.g. a shared encoder applied to both sides of a pair).
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        if self.w.len() != other.w.len() {
            return Err(Error::InvalidArgument("gradient sets differ in layer count".into()));
        }
        for (a, b) in self.w.iter_mut().zip(other.w.iter()) {
            if a.dim() != b.dim() {
                return Err(Error::InvalidArgument("gradient shapes differ".into()));
            }
            *a += b;
        }
        for (a, b) in self.b.iter_mut().zip(other.b.iter()) {
            *a += b;
        }
        Ok(())
    }

    fn param_sq_norm(&self) -> f64 {
        let mut acc = 0.0;
        for g in &self.w {
            for v in g.iter() {
                acc += v * v;
            }
        }
        for g in &self.b {
            for v in g.iter() {
                acc += v * v;
            }
        }
        acc
    }

    fn scale_params(&mut self, factor: f64) {
        for g in &mut self.w {
            g.mapv_inplace(|v| v * factor);
        }
        for g in &mut self.b {
            g.mapv_inplace(|v| v * factor);
        }
    }
}

/// Scales every parameter gradient by `max_norm / g` when the concatenated
/// 2-norm `g` across all passed gradient sets exceeds `max_norm`; otherwise
/// leaves them bitwise unchanged. Returns the pre-clip norm. Input gradients
/// are not part of the clipped set.
pub fn clip_global_norm(grads: &mut [&mut Gradients], max_norm: f64) -> Result<f64> {
    if max_norm <= 0.0 {
        return Err(Error::InvalidArgument("max_norm must be positive".into()));
    }
    let mut sq = 0.0;
    for g in grads.iter() {
        sq += g.param_sq_norm();
    }
    if !sq.is_finite() {
        return Err(Error::Numerical("non-finite gradients in clip_global_norm".into()));
    }
    let norm = sq.sqrt();
    // the relative slack keeps clipping exactly idempotent: a clipped set
    // whose recomputed norm lands an ulp above max_norm is left alone
    if norm > max_norm * (1.0 + 1e-12) {
        let factor = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_params(factor);
        }
    }
    Ok(norm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moment buffers and step counter for one [`EncoderNet`].
#[derive(Debug, Clone)]
pub struct AdamState {
    hyper: AdamHyper,
    m_w: Vec<Array2<f64>>,
    v_w: Vec<Array2<f64>>,
    m_b: Vec<Array1<f64>>,
    v_b: Vec<Array1<f64>>,
    step: u64,
}

impl AdamState {
    /// A state without moment buffers; stepping it is a state error until
    /// the buffers exist. Prefer [`AdamState::for_net`].
    pub fn uninitialized(hyper: AdamHyper) -> AdamState {
        AdamState {
            hyper,
            m_w: Vec::new(),
            v_w: Vec::new(),
            m_b: Vec::new(),
            v_b: Vec::new(),
            step: 0,
        }
    }

    /// Zeroed moment buffers shaped like the net's parameters.
    pub fn for_net(net: &EncoderNet, hyper: AdamHyper) -> AdamState {
        AdamState {
            hyper,
            m_w: net.layers.iter().map(|l| Array2::zeros(l.w.dim())).collect(),
            v_w: net.layers.iter().map(|l| Array2::zeros(l.w.dim())).collect(),
            m_b: net.layers.iter().map(|l| Array1::zeros(l.b.len())).collect(),
            v_b: net.layers.iter().map(|l| Array1::zeros(l.b.len())).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update with bias correction.
    pub fn step(&mut self, net: &mut EncoderNet, grads: &Gradients) -> Result<()> {
        if self.m_w.len() != net.layers.len() {
            return Err(Error::State(
                "adam state not initialized for this network".into(),
            ));
        }
        if grads.w.len() != net.layers.len() {
            return Err(Error::InvalidArgument("gradient set does not match network".into()));
        }
        for (l, layer) in net.layers.iter().enumerate() {
            if grads.w[l].dim() != layer.w.dim() || grads.b[l].len() != layer.b.len() {
                return Err(Error::InvalidArgument(format!(
                    "gradient shape mismatch at layer {l}"
                )));
            }
            if self.m_w[l].dim() != layer.w.dim() {
                return Err(Error::State(format!(
                    "adam buffers shaped for a different network at layer {l}"
                )));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let AdamHyper {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.hyper;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        for l in 0..net.layers.len() {
            update_inplace(
                self.m_w[l].as_slice_mut().unwrap(),
                self.v_w[l].as_slice_mut().unwrap(),
                net.layers[l].w.as_slice_mut().unwrap(),
                grads.w[l].as_slice().unwrap(),
                learning_rate,
                beta1,
                beta2,
                epsilon,
                bc1,
                bc2,
            );
            update_inplace(
                self.m_b[l].as_slice_mut().unwrap(),
                self.v_b[l].as_slice_mut().unwrap(),
                net.layers[l].b.as_slice_mut().unwrap(),
                grads.b[l].as_slice().unwrap(),
                learning_rate,
                beta1,
                beta2,
                epsilon,
                bc1,
                bc2,
            );
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn update_inplace(
    m: &mut [f64],
    v: &mut [f64],
    p: &mut [f64],
    g: &[f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
) {
    for i in 0..p.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}
