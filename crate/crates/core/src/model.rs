//! Small differentiable classifiers (multinomial logistic regression and a
//! ReLU MLP) with analytic softmax cross-entropy gradients.
//!
//! Parameters are stored layer by layer: the `out x in` weight matrix in
//! row-major order followed by the `out` biases.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClientPartition, Sample};
use crate::error::{Error, Result};
use crate::rng;
use crate::vector::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Logistic,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn logistic(input_dim: usize, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::Logistic,
            input_dim,
            hidden_dims: Vec::new(),
            num_classes,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::Mlp,
            input_dim,
            hidden_dims,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 {
            return Err(Error::param("model dimensions must be >= 1"));
        }
        match self.kind {
            ModelKind::Logistic if !self.hidden_dims.is_empty() => {
                Err(Error::param("logistic model takes no hidden layers"))
            }
            ModelKind::Mlp if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) => {
                Err(Error::param("mlp needs one or more hidden layers of width >= 1"))
            }
            _ => Ok(()),
        }
    }

    /// Layer widths from input to output.
    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_dims.len() + 2);
        w.push(self.input_dim);
        w.extend(&self.hidden_dims);
        w.push(self.num_classes);
        w
    }

    pub fn param_count(&self) -> usize {
        self.widths().windows(2).map(|p| p[1] * p[0] + p[1]).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub spec: ModelSpec,
    pub params: ParamVector,
}

impl ModelState {
    pub fn new(spec: ModelSpec, params: ParamVector) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(Error::Dimension {
                expected: spec.param_count(),
                found: params.len(),
            });
        }
        Ok(Self { spec, params })
    }

    /// All-zero parameters.
    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        let n = spec.param_count();
        Self::new(spec, ParamVector::zeros(n))
    }

    pub fn with_params(&self, params: ParamVector) -> Result<Self> {
        Self::new(self.spec.clone(), params)
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ModelState> {
    spec.validate()?;
    let mut rng = rng::seeded(seed);
    let mut params = Vec::with_capacity(spec.param_count());
    for pair in spec.widths().windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        params.extend((0..fan_in * fan_out).map(|_| rng.random_range(-a..a)));
        params.extend(std::iter::repeat_n(0.0, fan_out));
    }
    ModelState::new(spec.clone(), ParamVector::new(params)?)
}

struct Layer {
    w: usize,
    b: usize,
    fan_in: usize,
    fan_out: usize,
}

fn layers(spec: &ModelSpec) -> Vec<Layer> {
    let mut offset = 0;
    spec.widths()
        .windows(2)
        .map(|p| {
            let l = Layer {
                w: offset,
                b: offset + p[0] * p[1],
                fan_in: p[0],
                fan_out: p[1],
            };
            offset = l.b + p[1];
            l
        })
        .collect()
}

fn affine(params: &[f64], layer: &Layer, input: &[f64], out: &mut Vec<f64>) {
    out.clear();
    for o in 0..layer.fan_out {
        let row = &params[layer.w + o * layer.fan_in..layer.w + (o + 1) * layer.fan_in];
        let z: f64 = row.iter().zip(input).map(|(w, x)| w * x).sum();
        out.push(z + params[layer.b + o]);
    }
}

/// Per-layer activations (post-ReLU for hidden layers, raw logits last).
fn forward_trace(params: &[f64], layers: &[Layer], features: &[f64]) -> Vec<Vec<f64>> {
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(layers.len() + 1);
    acts.push(features.to_vec());
    for (i, layer) in layers.iter().enumerate() {
        let mut out = Vec::with_capacity(layer.fan_out);
        affine(params, layer, acts.last().expect("input"), &mut out);
        if i + 1 < layers.len() {
            out.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        acts.push(out);
    }
    acts
}

fn check_features(spec: &ModelSpec, features: &[f64]) -> Result<()> {
    if features.len() != spec.input_dim {
        return Err(Error::Dimension {
            expected: spec.input_dim,
            found: features.len(),
        });
    }
    Ok(())
}

pub fn forward_logits(model: &ModelState, features: &[f64]) -> Result<Vec<f64>> {
    check_features(&model.spec, features)?;
    let mut acts = forward_trace(model.params.as_slice(), &layers(&model.spec), features);
    Ok(acts.pop().expect("output layer"))
}

/// Index of the largest logit, smallest index on ties.
pub fn predict(model: &ModelState, features: &[f64]) -> Result<usize> {
    let logits = forward_logits(model, features)?;
    Ok(argmax(&logits))
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable log-softmax.
fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

fn batch_loss_grad(params: &[f64], spec: &ModelSpec, batch: &[&Sample]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::param("loss over an empty batch"));
    }
    let layers = layers(spec);
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    for sample in batch {
        check_features(spec, &sample.features)?;
        if sample.label >= spec.num_classes {
            return Err(Error::param(format!(
                "label {} out of range for {} classes",
                sample.label, spec.num_classes
            )));
        }
        let acts = forward_trace(params, &layers, &sample.features);
        let logp = log_softmax(acts.last().expect("logits"));
        loss -= logp[sample.label];

        // dL/dz at the output: softmax - onehot
        let mut delta: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        delta[sample.label] -= 1.0;

        for (li, layer) in layers.iter().enumerate().rev() {
            let input = &acts[li];
            for o in 0..layer.fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[layer.w + o * layer.fan_in..layer.w + (o + 1) * layer.fan_in];
                row.iter_mut().zip(input).for_each(|(g, x)| *g += d * x);
                grad[layer.b + o] += d;
            }
            if li > 0 {
                let mut prev = vec![0.0; layer.fan_in];
                for (o, d) in delta.iter().enumerate() {
                    let row = &params[layer.w + o * layer.fan_in..layer.w + (o + 1) * layer.fan_in];
                    prev.iter_mut().zip(row).for_each(|(p, w)| *p += d * w);
                }
                // ReLU derivative, taken as 0 at the kink
                prev.iter_mut()
                    .zip(input)
                    .for_each(|(p, a)| if *a <= 0.0 { *p = 0.0 });
                delta = prev;
            }
        }
    }
    let n = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}

/// Mean softmax cross-entropy over `batch` and its analytic gradient.
pub fn loss_and_gradient(model: &ModelState, batch: &[Sample]) -> Result<(f64, ParamVector)> {
    let refs: Vec<&Sample> = batch.iter().collect();
    let (loss, grad) = batch_loss_grad(model.params.as_slice(), &model.spec, &refs)?;
    Ok((loss, ParamVector::new(grad)?))
}

/// Mean loss only.
pub fn loss(model: &ModelState, batch: &[Sample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::param("loss over an empty batch"));
    }
    let layers = layers(&model.spec);
    let mut total = 0.0;
    for sample in batch {
        check_features(&model.spec, &sample.features)?;
        let acts = forward_trace(model.params.as_slice(), &layers, &sample.features);
        total -= log_softmax(acts.last().expect("logits"))[sample.label];
    }
    Ok(total / batch.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

/// Output of local training: the effective gradient and the end-of-training loss.
#[derive(Debug, Clone)]
pub struct LocalResult {
    /// `(initial_params - final_params) / lr`, so the server applies `M - lr * update`.
    pub update: ParamVector,
    /// Loss of the locally trained parameters over the whole partition.
    pub final_loss: f64,
}

/// Mini-batch SGD on one client's data, starting from `model`.
pub fn sgd_local_train<R: Rng>(
    model: &ModelState,
    partition: &ClientPartition,
    opts: LocalTraining,
    rng: &mut R,
) -> Result<LocalResult> {
    if opts.epochs < 1 || opts.batch_size < 1 {
        return Err(Error::param("epochs and batch_size must be >= 1"));
    }
    if !(opts.lr.is_finite() && opts.lr >= 0.0) {
        return Err(Error::param(format!("learning rate {} must be finite and >= 0", opts.lr)));
    }
    if partition.is_empty() {
        return Err(Error::param(format!("client {} has no data", partition.client_id)));
    }

    let mut params = model.params.as_slice().to_vec();
    let mut order: Vec<usize> = (0..partition.len()).collect();
    for _ in 0..opts.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(opts.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &partition.samples[i]).collect();
            let (_, grad) = batch_loss_grad(&params, &model.spec, &batch)?;
            params.iter_mut().zip(&grad).for_each(|(p, g)| *p -= opts.lr * g);
        }
    }

    let trained = model.with_params(ParamVector::new(params)?)?;
    let final_loss = loss(&trained, &partition.samples)?;
    let update = if opts.lr == 0.0 {
        ParamVector::zeros(model.params.len())
    } else {
        model.params.sub(&trained.params)?.scaled(1.0 / opts.lr)?
    };
    Ok(LocalResult { update, final_loss })
}
