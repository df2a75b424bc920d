use std::borrow::Cow;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::codec::Branch;
use crate::error::{Error, Result};
use crate::supernet::{BlockMode, ConvSpec, ParamMap, ParamPath, SubModel};

/// Forward-pass mode. Normalization always uses the current batch's
/// statistics, so both modes compute the same function.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `(N, C, H, W)`
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.shape().len() != 4 || inputs.shape()[0] != labels.len() {
            return Err(Error::Structural(format!(
                "batch of {} labels with input shape {:?}",
                labels.len(),
                inputs.shape()
            )));
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

struct Builder<'a> {
    tape: Tape<'a>,
    model: &'a SubModel,
    params: Vec<(&'a ParamPath, Var)>,
}

impl<'a> Builder<'a> {
    fn param(&mut self, path: &ParamPath) -> Result<Var> {
        let (path, t) = self
            .model
            .params
            .get_key_value(path)
            .ok_or_else(|| Error::Structural(format!("sub-model is missing {path}")))?;
        let v = self.tape.param(t);
        self.params.push((path, v));
        Ok(v)
    }

    fn conv(&mut self, path: ParamPath, layer: &ConvSpec, x: Var) -> Result<Var> {
        let w = self.param(&path)?;
        Ok(self.tape.conv2d(x, w, layer.geom))
    }

    fn bn_relu(&mut self, x: Var) -> Var {
        let y = self.tape.batch_norm(x);
        self.tape.relu(y)
    }

    fn block(&mut self, block: usize, branch: Branch, x: Var) -> Result<Var> {
        let model = self.model;
        let spec = &model.spec;
        let layers = spec.branch_layers(block, branch);
        let mode = spec.block_mode(block);
        let path = |i: usize| ParamPath::choice(block, branch, layers[i].name);
        let t = match branch {
            Branch::Identity => match mode {
                BlockMode::Normal => x,
                BlockMode::Reduction => {
                    let a = self.conv(path(0), &layers[0], x)?;
                    let b = self.conv(path(1), &layers[1], x)?;
                    let cat = self.tape.concat_channels(a, b);
                    self.tape.batch_norm(cat)
                }
            },
            Branch::Residual => {
                let h = self.conv(path(0), &layers[0], x)?;
                let h = self.bn_relu(h);
                let h = self.conv(path(1), &layers[1], h)?;
                let h = self.tape.batch_norm(h);
                let h = match mode {
                    BlockMode::Normal => self.tape.add(h, x),
                    BlockMode::Reduction => h,
                };
                self.tape.relu(h)
            }
            Branch::InvertedResidual => {
                let h = self.conv(path(0), &layers[0], x)?;
                let h = self.bn_relu(h);
                let h = self.conv(path(1), &layers[1], h)?;
                let h = self.bn_relu(h);
                let h = self.conv(path(2), &layers[2], h)?;
                let h = self.tape.batch_norm(h);
                match mode {
                    BlockMode::Normal => self.tape.add(h, x),
                    BlockMode::Reduction => h,
                }
            }
            Branch::DepthwiseSeparable => {
                let h = self.conv(path(0), &layers[0], x)?;
                let h = self.conv(path(1), &layers[1], h)?;
                let h = self.bn_relu(h);
                let h = self.conv(path(2), &layers[2], h)?;
                let h = self.conv(path(3), &layers[3], h)?;
                let h = self.tape.batch_norm(h);
                let h = match mode {
                    BlockMode::Normal => self.tape.add(h, x),
                    BlockMode::Reduction => h,
                };
                self.tape.relu(h)
            }
        };
        Ok(t)
    }
}

fn check_inputs(model: &SubModel, inputs: &Tensor) -> Result<()> {
    let spec = &model.spec;
    spec.check_key(&model.key)?;
    let ok = match inputs.shape() {
        [n, c, h, w] => *n > 0 && [*c, *h, *w] == spec.input_shape,
        _ => false,
    };
    if !ok {
        return Err(Error::Structural(format!(
            "input shape {:?} does not match (N, {}, {}, {})",
            inputs.shape(),
            spec.input_shape[0],
            spec.input_shape[1],
            spec.input_shape[2]
        )));
    }
    Ok(())
}

fn build<'a>(model: &'a SubModel, inputs: &'a Tensor) -> Result<(Builder<'a>, Var)> {
    check_inputs(model, inputs)?;
    let mut b = Builder {
        tape: Tape::new(),
        model,
        params: Vec::with_capacity(model.params.len()),
    };
    let x = b.tape.input(Cow::Borrowed(inputs));
    let stem = model.spec.stem_layer();
    let h = b.conv(ParamPath::stem(stem.name), &stem, x)?;
    let mut h = b.bn_relu(h);
    for (block, &branch) in model.key.branches().iter().enumerate() {
        h = b.block(block, branch, h)?;
    }
    let pooled = b.tape.global_avg_pool(h);
    let w = b.param(&ParamPath::classifier("weight"))?;
    let bias = b.param(&ParamPath::classifier("bias"))?;
    let logits = b.tape.linear(pooled, w, bias);
    if !b.tape.value(logits).is_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    Ok((b, logits))
}

/// Logits `(N, class_count)`.
pub fn forward(model: &SubModel, inputs: &Tensor, _mode: Mode) -> Result<Tensor> {
    let (b, logits) = build(model, inputs)?;
    Ok(b.tape.value(logits).clone())
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = logits.dims2();
    if n != labels.len() {
        return Err(Error::Structural(format!(
            "{n} logit rows for {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Data(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let mut grad = vec![0.0; n * k];
    let mut total = 0.0;
    for (s, &label) in labels.iter().enumerate() {
        let row = &logits.data()[s * k..(s + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[label];
        for (j, &v) in row.iter().enumerate() {
            let p = (v - log_z).exp();
            grad[s * k + j] = (p - if j == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((total / n as f64, Tensor::new(vec![n, k], grad)?))
}

pub fn loss(model: &SubModel, batch: &Batch) -> Result<f64> {
    let logits = forward(model, &batch.inputs, Mode::Train)?;
    Ok(softmax_cross_entropy(&logits, &batch.labels)?.0)
}

/// Mean cross-entropy and its gradient for every sub-model parameter.
pub fn loss_and_grads(model: &SubModel, batch: &Batch) -> Result<(f64, ParamMap)> {
    let (b, logits) = build(model, &batch.inputs)?;
    let (loss, seed) = softmax_cross_entropy(b.tape.value(logits), &batch.labels)?;
    let mut grads = b.tape.backward(logits, seed);
    let mut out = ParamMap::new();
    for (path, var) in &b.params {
        let g = grads
            .take(*var)
            .unwrap_or_else(|| Tensor::zeros(model.params[*path].shape()));
        out.insert((*path).clone(), g);
    }
    Ok((loss, out))
}

/// Misclassified samples in `batch`. Ties in the logits go to the lowest class index.
pub fn error_count(model: &SubModel, batch: &Batch) -> Result<usize> {
    let logits = forward(model, &batch.inputs, Mode::Eval)?;
    let (n, k) = logits.dims2();
    let mut wrong = 0;
    for s in 0..n {
        let row = &logits.data()[s * k..(s + 1) * k];
        let mut best = 0;
        for j in 1..k {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best != batch.labels[s] {
            wrong += 1;
        }
    }
    Ok(wrong)
}
