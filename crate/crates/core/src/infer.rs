//! Inference straight from a model file, using each layer's stored
//! representation: dense GEMM for dense and masked layers, the reordered
//! sparse kernel for reordered ones.

use crate::data::Dataset;
use crate::error::{shape_err, Error, Result};
use crate::model_file::{LayerWeights, ModelFile};
use crate::nn::{argmax_rows, LayerSpec};
use crate::reorder::{sparse_exec, ExecutionPlan};
use crate::tensor::{gemm, gemm_nt, im2col, Tensor};

const CHUNK: usize = 512;

/// A model file with execution plans prepared for a fixed worker count.
pub struct Executor<'a> {
    model: &'a ModelFile,
    plans: Vec<Option<ExecutionPlan>>,
    input_len: usize,
}

impl<'a> Executor<'a> {
    pub fn new(model: &'a ModelFile, workers: usize) -> Result<Self> {
        let net = model.to_network()?;
        let plans = model
            .params
            .iter()
            .map(|p| match &p.weights {
                LayerWeights::Reordered { model, .. } => {
                    Some(ExecutionPlan::balanced(model, workers))
                }
                _ => None,
            })
            .collect();
        Ok(Self {
            model,
            plans,
            input_len: net.input_len(),
        })
    }

    /// `W · cols` for parameter layer `p`, where `cols` is `inputs × batch`.
    fn apply(&self, p: usize, cols: &Tensor) -> Result<Tensor> {
        match (&self.model.params[p].weights, &self.plans[p]) {
            (LayerWeights::Reordered { model, .. }, Some(plan)) => sparse_exec(model, cols, plan),
            (LayerWeights::Dense(w), _) | (LayerWeights::Masked { weights: w, .. }, _) => {
                gemm(w, cols)
            }
            _ => Err(Error::Format(format!("layer {} has no execution plan", p))),
        }
    }

    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let (n, d) = batch.dims2()?;
        if d != self.input_len {
            return shape_err(format!(
                "batch has {} features, model expects {}",
                d, self.input_len
            ));
        }
        let mut x = batch.clone();
        let mut p = 0;
        for layer in &self.model.layers {
            x = match *layer {
                LayerSpec::FullyConnected { .. } => {
                    let mut z = match &self.model.params[p].weights {
                        // Same summation order as training-time forward.
                        LayerWeights::Dense(w) | LayerWeights::Masked { weights: w, .. } => {
                            gemm_nt(&x, w)?
                        }
                        LayerWeights::Reordered { .. } => {
                            self.apply(p, &x.transpose()?)?.transpose()?
                        }
                    };
                    let bias = &self.model.params[p].bias;
                    if !bias.is_empty() {
                        for r in 0..n {
                            for (v, b) in z.row_mut(r).iter_mut().zip(bias) {
                                *v += b;
                            }
                        }
                    }
                    p += 1;
                    z
                }
                LayerSpec::Conv2d {
                    conv,
                    height,
                    width,
                    ..
                } => {
                    let (oh, ow) = conv.output_dims(height, width)?;
                    let plane = oh * ow;
                    let bias = &self.model.params[p].bias;
                    let mut out = Vec::with_capacity(n * conv.out_channels * plane);
                    for s in 0..n {
                        let img =
                            Tensor::new(vec![conv.in_channels, height, width], x.row(s).to_vec())?;
                        let mut y = self.apply(p, &im2col(&img, &conv)?)?.into_data();
                        for (o, b) in bias.iter().enumerate() {
                            for v in &mut y[o * plane..(o + 1) * plane] {
                                *v += b;
                            }
                        }
                        out.extend_from_slice(&y);
                    }
                    p += 1;
                    Tensor::matrix(n, conv.out_channels * plane, out)?
                }
                LayerSpec::Relu => {
                    for v in x.data_mut() {
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                    x
                }
                LayerSpec::SoftmaxXent => x,
            };
        }
        Ok(x)
    }

    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(batch)?))
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Dataset("cannot evaluate on an empty dataset".into()));
        }
        let idx: Vec<usize> = (0..data.len()).collect();
        let mut correct = 0;
        for chunk in idx.chunks(CHUNK) {
            let (x, y) = data.batch(chunk);
            correct += self
                .predict(&x)?
                .iter()
                .zip(&y)
                .filter(|(a, b)| a == b)
                .count();
        }
        Ok(correct as f64 / data.len() as f64)
    }
}
