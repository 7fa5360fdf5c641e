//! Small feed-forward networks with hand-written backward passes.
//!
//! Every parameterized layer keeps its weights in GEMM form: a fully
//! connected layer is `outputs × inputs`, a convolution is
//! `out_channels × (in_channels·kh·kw)`. Activations travel as `batch × features`
//! matrices; convolutions view each row as a `C×H×W` image.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{apply_mask_in_place, SparseMask};
use crate::data::{shuffled_indices, Dataset};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{col2im, gemm, gemm_nt, gemm_tn, im2col, ConvSpec, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    FullyConnected {
        inputs: usize,
        outputs: usize,
        bias: bool,
    },
    Conv2d {
        conv: ConvSpec,
        height: usize,
        width: usize,
        bias: bool,
    },
    Relu,
    SoftmaxXent,
}

impl LayerSpec {
    pub fn is_parameterized(&self) -> bool {
        matches!(
            self,
            LayerSpec::FullyConnected { .. } | LayerSpec::Conv2d { .. }
        )
    }

    pub fn has_bias(&self) -> bool {
        match *self {
            LayerSpec::FullyConnected { bias, .. } | LayerSpec::Conv2d { bias, .. } => bias,
            _ => false,
        }
    }

    /// `(rows, cols)` of the GEMM-form weight matrix.
    pub fn gemm_dims(&self) -> Option<(usize, usize)> {
        match *self {
            LayerSpec::FullyConnected {
                inputs, outputs, ..
            } => Some((outputs, inputs)),
            LayerSpec::Conv2d { conv, .. } => Some((conv.out_channels, conv.patch_len())),
            _ => None,
        }
    }

    fn input_len(&self) -> Option<usize> {
        match *self {
            LayerSpec::FullyConnected { inputs, .. } => Some(inputs),
            LayerSpec::Conv2d {
                conv,
                height,
                width,
                ..
            } => Some(conv.in_channels * height * width),
            _ => None,
        }
    }

    fn output_len(&self, input: usize) -> Result<usize> {
        match *self {
            LayerSpec::FullyConnected { outputs, .. } => Ok(outputs),
            LayerSpec::Conv2d {
                conv,
                height,
                width,
                ..
            } => {
                let (oh, ow) = conv.output_dims(height, width)?;
                Ok(conv.out_channels * oh * ow)
            }
            LayerSpec::Relu | LayerSpec::SoftmaxXent => Ok(input),
        }
    }
}

/// `[in, hidden.., out]` multilayer perceptron with ReLU between layers.
pub fn mlp(sizes: &[usize], bias: bool) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    for (i, pair) in sizes.windows(2).enumerate() {
        if i > 0 {
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::FullyConnected {
            inputs: pair[0],
            outputs: pair[1],
            bias,
        });
    }
    layers.push(LayerSpec::SoftmaxXent);
    layers
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    layers: Vec<LayerSpec>,
    weights: Vec<Tensor>,
    biases: Vec<Vec<f64>>,
    input_len: usize,
    output_len: usize,
}

impl Network {
    /// Validate the layer chain and allocate zero parameters.
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        let first = layers
            .first()
            .and_then(LayerSpec::input_len)
            .ok_or_else(|| Error::Config("first layer must be fully_connected or conv2d".into()))?;
        let mut width = first;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (i, layer) in layers.iter().enumerate() {
            if let Some(expected) = layer.input_len() {
                if expected != width {
                    return Err(Error::Config(format!(
                        "layer {} expects {} inputs but receives {}",
                        i, expected, width
                    )));
                }
            }
            if let LayerSpec::Conv2d { conv, .. } = layer {
                conv.validate()?;
            }
            if matches!(layer, LayerSpec::SoftmaxXent) && i + 1 != layers.len() {
                return Err(Error::Config("softmax_xent must be the last layer".into()));
            }
            width = layer.output_len(width)?;
            if let Some((r, c)) = layer.gemm_dims() {
                if r == 0 || c == 0 {
                    return Err(Error::Config(format!(
                        "layer {} has an empty weight matrix",
                        i
                    )));
                }
                weights.push(Tensor::zeros(vec![r, c]));
                biases.push(vec![0.0; if layer.has_bias() { r } else { 0 }]);
            }
        }
        if !matches!(layers.last(), Some(LayerSpec::SoftmaxXent)) {
            return Err(Error::Config("last layer must be softmax_xent".into()));
        }
        Ok(Self {
            layers,
            weights,
            biases,
            input_len: first,
            output_len: width,
        })
    }

    /// Uniform ±sqrt(6/(fan_in+fan_out)) weights over the GEMM form, zero biases.
    pub fn init(layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let mut net = Self::new(layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in &mut net.weights {
            let (r, c) = w.dims2()?;
            let bound = (6.0 / (r + c) as f64).sqrt();
            for v in w.data_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    /// Rebuild from stored parts, checking every shape.
    pub fn from_parts(
        layers: Vec<LayerSpec>,
        weights: Vec<Tensor>,
        biases: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let mut net = Self::new(layers)?;
        if weights.len() != net.weights.len() || biases.len() != net.biases.len() {
            return shape_err(format!(
                "{} weight tensors for {} parameterized layers",
                weights.len(),
                net.weights.len()
            ));
        }
        for (i, (w, b)) in weights.into_iter().zip(biases).enumerate() {
            if w.shape() != net.weights[i].shape() || b.len() != net.biases[i].len() {
                return shape_err(format!("parameter shapes of layer {} do not match", i));
            }
            net.weights[i] = w;
            net.biases[i] = b;
        }
        Ok(net)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Tensor] {
        &mut self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn biases_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.biases
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn classes(&self) -> usize {
        self.output_len
    }

    /// Specs of the parameterized layers, in weight order.
    pub fn param_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| l.is_parameterized())
    }

    pub fn weight_count(&self) -> usize {
        self.weights.iter().map(Tensor::len).sum()
    }
}

/// Activations entering each layer, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    pub inputs: Vec<Tensor>,
}

/// Per-layer gradients, same shapes as the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            weights: net
                .weights
                .iter()
                .map(|w| Tensor::zeros(w.shape().to_vec()))
                .collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }
}

fn check_batch(net: &Network, batch: &Tensor) -> Result<usize> {
    let (n, d) = batch.dims2()?;
    if d != net.input_len {
        return shape_err(format!(
            "batch has {} features, network expects {}",
            d, net.input_len
        ));
    }
    Ok(n)
}

fn add_bias_rows(z: &mut Tensor, bias: &[f64]) {
    if bias.is_empty() {
        return;
    }
    for r in 0..z.rows() {
        for (v, b) in z.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn conv_forward(
    x: &Tensor,
    w: &Tensor,
    bias: &[f64],
    conv: &ConvSpec,
    height: usize,
    width: usize,
) -> Result<Tensor> {
    let n = x.rows();
    let (oh, ow) = conv.output_dims(height, width)?;
    let plane = oh * ow;
    let out_len = conv.out_channels * plane;
    let mut out = Vec::with_capacity(n * out_len);
    for s in 0..n {
        let img = Tensor::new(vec![conv.in_channels, height, width], x.row(s).to_vec())?;
        let y = gemm(w, &im2col(&img, conv)?)?;
        let mut y = y.into_data();
        if !bias.is_empty() {
            for (o, b) in bias.iter().enumerate() {
                for v in &mut y[o * plane..(o + 1) * plane] {
                    *v += b;
                }
            }
        }
        out.extend_from_slice(&y);
    }
    Tensor::matrix(n, out_len, out)
}

/// Run the network up to (not including) the softmax; returns logits.
pub fn forward(net: &Network, batch: &Tensor) -> Result<(Tensor, Cache)> {
    check_batch(net, batch)?;
    let mut inputs = Vec::with_capacity(net.layers.len());
    let mut x = batch.clone();
    let mut p = 0;
    for layer in &net.layers {
        let y = match *layer {
            LayerSpec::FullyConnected { .. } => {
                let mut z = gemm_nt(&x, &net.weights[p])?;
                add_bias_rows(&mut z, &net.biases[p]);
                p += 1;
                z
            }
            LayerSpec::Conv2d {
                conv,
                height,
                width,
                ..
            } => {
                let z = conv_forward(&x, &net.weights[p], &net.biases[p], &conv, height, width)?;
                p += 1;
                z
            }
            LayerSpec::Relu => {
                let mut z = x.clone();
                for v in z.data_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                z
            }
            LayerSpec::SoftmaxXent => x.clone(),
        };
        inputs.push(std::mem::replace(&mut x, y));
    }
    Ok((x, Cache { inputs }))
}

/// Row-wise softmax cross-entropy: mean loss and gradient w.r.t. logits.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, c) = logits.dims2()?;
    if n == 0 {
        return shape_err("empty batch");
    }
    if labels.len() != n {
        return shape_err(format!("{} labels for a batch of {}", labels.len(), n));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Dataset(format!(
            "label {} out of range for {} classes",
            bad, c
        )));
    }
    let mut grad = Tensor::zeros(vec![n, c]);
    let mut total = 0.0;
    let inv_n = 1.0 / n as f64;
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in row {
            sum += (v - max).exp();
        }
        let log_z = max + sum.ln();
        total += log_z - row[label];
        let g = grad.row_mut(r);
        for (k, &v) in row.iter().enumerate() {
            g[k] = (v - log_z).exp() * inv_n;
        }
        g[label] -= inv_n;
    }
    Ok((total * inv_n, grad))
}

/// Mean softmax cross-entropy and its gradient for every parameter.
pub fn loss_and_grad(net: &Network, batch: &Tensor, labels: &[usize]) -> Result<(f64, Gradients)> {
    let (logits, cache) = forward(net, batch)?;
    let (loss, mut d) = softmax_xent(&logits, labels)?;
    let mut grads = Gradients::zeros_like(net);
    let mut p = net.weights.len();
    for (i, layer) in net.layers.iter().enumerate().rev() {
        let x = &cache.inputs[i];
        match *layer {
            LayerSpec::SoftmaxXent => {}
            LayerSpec::Relu => {
                for (g, &v) in d.data_mut().iter_mut().zip(x.data()) {
                    if v <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            LayerSpec::FullyConnected { bias, .. } => {
                p -= 1;
                grads.weights[p] = gemm_tn(&d, x)?;
                if bias {
                    let gb = &mut grads.biases[p];
                    for r in 0..d.rows() {
                        for (b, v) in gb.iter_mut().zip(d.row(r)) {
                            *b += v;
                        }
                    }
                }
                if i > 0 {
                    d = gemm(&d, &net.weights[p])?;
                }
            }
            LayerSpec::Conv2d {
                conv,
                height,
                width,
                bias,
            } => {
                p -= 1;
                let w = &net.weights[p];
                let (oh, ow) = conv.output_dims(height, width)?;
                let plane = oh * ow;
                let mut dx = Vec::with_capacity(x.len());
                let mut gw = Tensor::zeros(w.shape().to_vec());
                for s in 0..x.rows() {
                    let img =
                        Tensor::new(vec![conv.in_channels, height, width], x.row(s).to_vec())?;
                    let cols = im2col(&img, &conv)?;
                    let dy = Tensor::matrix(conv.out_channels, plane, d.row(s).to_vec())?;
                    gw = gw.axpby(1.0, &gemm_nt(&dy, &cols)?, 1.0)?;
                    if bias {
                        for (o, b) in grads.biases[p].iter_mut().enumerate() {
                            for v in &dy.data()[o * plane..(o + 1) * plane] {
                                *b += v;
                            }
                        }
                    }
                    if i > 0 {
                        let dcols = gemm_tn(w, &dy)?;
                        dx.extend_from_slice(col2im(&dcols, &conv, height, width)?.data());
                    }
                }
                grads.weights[p] = gw;
                if i > 0 {
                    d = Tensor::matrix(x.rows(), x.cols(), dx)?;
                }
            }
        }
    }
    Ok((loss, grads))
}

/// Mean loss only.
pub fn loss(net: &Network, batch: &Tensor, labels: &[usize]) -> Result<f64> {
    let (logits, _) = forward(net, batch)?;
    Ok(softmax_xent(&logits, labels)?.0)
}

/// SGD with optional heavy-ball momentum.
///
/// With `momentum == 0` a step is exactly `W ← W − lr·(grads + reg_grads)`.
/// When a mask is given, masked weights are forced back to `0.0` after the
/// update and their velocity is cleared.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Option<Gradients>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: None,
        }
    }

    pub fn step(
        &mut self,
        net: &mut Network,
        grads: &Gradients,
        reg_grads: Option<&[Tensor]>,
        lr: f64,
        mask: Option<&SparseMask>,
    ) -> Result<()> {
        if grads.weights.len() != net.weights.len() || grads.biases.len() != net.biases.len() {
            return shape_err("gradient layer count does not match network");
        }
        if let Some(reg) = reg_grads {
            if reg.len() != net.weights.len() {
                return shape_err("regularizer gradient layer count does not match network");
            }
        }
        if let Some(mask) = mask {
            if mask.layers.len() != net.weights.len() {
                return shape_err("mask layer count does not match network");
            }
        }
        let momentum = self.momentum;
        if momentum != 0.0 && self.velocity.is_none() {
            self.velocity = Some(Gradients::zeros_like(net));
        }
        for p in 0..net.weights.len() {
            let w = &mut net.weights[p];
            let g = &grads.weights[p];
            if g.shape() != w.shape() {
                return shape_err(format!("gradient shape mismatch in layer {}", p));
            }
            let r = reg_grads.map(|r| &r[p]);
            if let Some(r) = r {
                if r.shape() != w.shape() {
                    return shape_err(format!(
                        "regularizer gradient shape mismatch in layer {}",
                        p
                    ));
                }
            }
            match self.velocity.as_mut() {
                Some(vel) if momentum != 0.0 => {
                    let v = vel.weights[p].data_mut();
                    for (k, (wv, vv)) in w.data_mut().iter_mut().zip(v.iter_mut()).enumerate() {
                        let total = g.data()[k] + r.map_or(0.0, |r| r.data()[k]);
                        *vv = momentum * *vv + total;
                        *wv -= lr * *vv;
                    }
                    let vb = &mut vel.biases[p];
                    for (k, b) in net.biases[p].iter_mut().enumerate() {
                        vb[k] = momentum * vb[k] + grads.biases[p][k];
                        *b -= lr * vb[k];
                    }
                }
                _ => {
                    match r {
                        Some(r) => {
                            for ((wv, gv), rv) in
                                w.data_mut().iter_mut().zip(g.data()).zip(r.data())
                            {
                                *wv -= lr * (gv + rv);
                            }
                        }
                        None => {
                            for (wv, gv) in w.data_mut().iter_mut().zip(g.data()) {
                                *wv -= lr * gv;
                            }
                        }
                    }
                    for (b, gb) in net.biases[p].iter_mut().zip(&grads.biases[p]) {
                        *b -= lr * gb;
                    }
                }
            }
            if let Some(mask) = mask {
                apply_mask_in_place(w, &mask.layers[p])?;
                if let Some(vel) = self.velocity.as_mut() {
                    apply_mask_in_place(&mut vel.weights[p], &mask.layers[p])?;
                }
            }
        }
        Ok(())
    }
}

/// One plain SGD update (no momentum).
pub fn sgd_step(
    net: &mut Network,
    grads: &Gradients,
    reg_grads: Option<&[Tensor]>,
    lr: f64,
    mask: Option<&SparseMask>,
) -> Result<()> {
    Sgd::new(0.0).step(net, grads, reg_grads, lr, mask)
}

/// Argmax per row; the lowest class index wins ties.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

pub fn predict(net: &Network, batch: &Tensor) -> Result<Vec<usize>> {
    Ok(argmax_rows(&forward(net, batch)?.0))
}

const EVAL_CHUNK: usize = 512;

/// Fraction of samples whose argmax prediction equals the label.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = data.batch(chunk);
        correct += predict(net, &x)?
            .iter()
            .zip(&y)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Optimizer hyperparameters shared by every training phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Mutable training progress: epoch counter and the shuffling stream.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub epoch: usize,
    pub lr: f64,
    pub seed: u64,
    rng: ChaCha8Rng,
    opt: Sgd,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            epoch: 0,
            lr: cfg.lr,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed_5eed_5eed),
            opt: Sgd::new(cfg.momentum),
        })
    }
}

/// Per-step extra gradient (e.g. a regularizer) computed from current weights.
pub type ExtraGrad<'a> = dyn FnMut(&Network) -> Result<Vec<Tensor>> + 'a;

/// One pass over `data` in shuffled minibatches. Returns the mean data loss.
pub fn train_epoch(
    net: &mut Network,
    data: &Dataset,
    state: &mut TrainState,
    batch_size: usize,
    mut extra: Option<&mut ExtraGrad<'_>>,
    mask: Option<&SparseMask>,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Dataset("cannot train on an empty dataset".into()));
    }
    let order = shuffled_indices(data.len(), &mut state.rng);
    let mut total = 0.0;
    for chunk in order.chunks(batch_size) {
        let (x, y) = data.batch(chunk);
        let (loss, grads) = loss_and_grad(net, &x, &y)?;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!(
                "loss became {} in epoch {}",
                loss, state.epoch
            )));
        }
        let reg = match extra.as_mut() {
            Some(f) => Some(f(net)?),
            None => None,
        };
        state
            .opt
            .step(net, &grads, reg.as_deref(), state.lr, mask)?;
        total += loss * chunk.len() as f64;
    }
    if net.weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::Divergence(format!(
            "non-finite weights after epoch {}",
            state.epoch
        )));
    }
    state.epoch += 1;
    Ok(total / data.len() as f64)
}
