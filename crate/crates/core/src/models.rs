//! Desk-scale classifiers `f(w; x)`: a ReLU MLP and a small CNN
//! (conv-relu-pool blocks followed by a dense head).

use serde::{Deserialize, Serialize};

use crate::autodiff::{validate_one_hot, Reduction, Tape, Var};
use crate::error::{AtentError, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Architecture descriptor. Parameter names, shapes and count follow from it
/// alone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    /// Dense layers `widths[0] -> widths[1] -> ... -> classes`, ReLU between.
    Mlp { widths: Vec<usize> },
    /// 3×3 same-padded conv + ReLU + 2×2 max-pool per entry of `channels`,
    /// then a dense head through `fc_widths` (last entry = classes).
    SmallCnn {
        input: [usize; 3],
        channels: Vec<usize>,
        fc_widths: Vec<usize>,
    },
}

const CNN_KERNEL: usize = 3;
const CNN_POOL: usize = 2;

impl Architecture {
    pub fn classes(&self) -> usize {
        match self {
            Architecture::Mlp { widths } => *widths.last().unwrap_or(&0),
            Architecture::SmallCnn { fc_widths, .. } => *fc_widths.last().unwrap_or(&0),
        }
    }

    /// Values per input sample.
    pub fn input_len(&self) -> usize {
        match self {
            Architecture::Mlp { widths } => widths.first().copied().unwrap_or(0),
            Architecture::SmallCnn { input, .. } => input.iter().product(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Architecture::Mlp { widths } => {
                if widths.len() < 2 {
                    return Err(AtentError::Config("an MLP needs at least two widths".into()));
                }
                if widths.contains(&0) {
                    return Err(AtentError::Config(format!("zero width in {widths:?}")));
                }
            }
            Architecture::SmallCnn {
                input,
                channels,
                fc_widths,
            } => {
                if input.contains(&0) || channels.contains(&0) || fc_widths.contains(&0) {
                    return Err(AtentError::Config("zero extent in CNN descriptor".into()));
                }
                if fc_widths.is_empty() {
                    return Err(AtentError::Config("CNN needs at least one dense layer".into()));
                }
                let (mut h, mut w) = (input[1], input[2]);
                for _ in channels {
                    h /= CNN_POOL;
                    w /= CNN_POOL;
                    if h == 0 || w == 0 {
                        return Err(AtentError::Config(format!(
                            "input {input:?} too small for {} pooling stages",
                            channels.len()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// `(name, shape)` of every weight tensor, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        match self {
            Architecture::Mlp { widths } => {
                for (i, pair) in widths.windows(2).enumerate() {
                    out.push((format!("fc{i}.weight"), vec![pair[0], pair[1]]));
                    out.push((format!("fc{i}.bias"), vec![pair[1]]));
                }
            }
            Architecture::SmallCnn {
                input,
                channels,
                fc_widths,
            } => {
                let (mut c, mut h, mut w) = (input[0], input[1], input[2]);
                for (i, &co) in channels.iter().enumerate() {
                    out.push((format!("conv{i}.weight"), vec![co, c, CNN_KERNEL, CNN_KERNEL]));
                    out.push((format!("conv{i}.bias"), vec![co]));
                    c = co;
                    h /= CNN_POOL;
                    w /= CNN_POOL;
                }
                let mut fan_in = c * h * w;
                for (i, &width) in fc_widths.iter().enumerate() {
                    out.push((format!("fc{i}.weight"), vec![fan_in, width]));
                    out.push((format!("fc{i}.bias"), vec![width]));
                    fan_in = width;
                }
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Named weights of a classifier plus the descriptor that shapes them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    arch: Architecture,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Assembles params from tensors in [`Architecture::param_shapes`] order.
    pub fn from_tensors(arch: Architecture, tensors: Vec<Tensor>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.param_shapes();
        if shapes.len() != tensors.len() {
            return Err(AtentError::shape(
                "model params",
                format!("expected {} tensors, got {}", shapes.len(), tensors.len()),
            ));
        }
        for ((name, shape), t) in shapes.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(AtentError::shape(
                    "model params",
                    format!("{name}: expected {shape:?}, got {:?}", t.shape()),
                ));
            }
        }
        Ok(ModelParams {
            arch,
            names: shapes.into_iter().map(|(n, _)| n).collect(),
            tensors,
        })
    }

    /// He-scaled normal weights, zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut r = rng::derive(seed, &[rng::TAG_INIT]);
        let tensors = arch
            .param_shapes()
            .iter()
            .map(|(name, shape)| {
                if name.ends_with(".bias") {
                    Tensor::zeros(shape)
                } else {
                    let fan_in: usize = if shape.len() == 4 {
                        shape[1..].iter().product()
                    } else {
                        shape[0]
                    };
                    let std = (2.0 / fan_in as f64).sqrt();
                    let n = shape.iter().product();
                    let data = rng::normals(&mut r, n).into_iter().map(|z| z * std).collect();
                    Tensor::from_parts_unchecked(shape.clone(), data)
                }
            })
            .collect();
        ModelParams::from_tensors(arch, tensors)
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<Self> {
        ModelParams::from_tensors(self.arch.clone(), tensors)
    }

    /// `w += k * delta`, tensor by tensor.
    pub fn axpy(&mut self, k: f64, delta: &[Tensor]) -> Result<()> {
        if delta.len() != self.tensors.len() {
            return Err(AtentError::shape("params axpy", "tensor count"));
        }
        for (w, d) in self.tensors.iter_mut().zip(delta) {
            w.axpy(k, d)?;
        }
        Ok(())
    }

    pub fn bit_eq(&self, other: &ModelParams) -> bool {
        self.arch == other.arch
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.bit_eq(b))
    }

    /// Euclidean distance between two parameter sets of the same shape.
    pub fn distance(&self, other: &ModelParams) -> Result<f64> {
        let mut acc = 0.0;
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            a.expect_same_shape(b, "params distance")?;
            acc += a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>();
        }
        Ok(acc.sqrt())
    }

    /// Records the forward pass on `tape` and returns the logits node.
    pub fn forward_on_tape(&self, tape: &mut Tape, input: Var, weights: &[Var]) -> Result<Var> {
        let n = tape.value(input).rows();
        let per_sample = tape.value(input).row_len();
        if per_sample != self.arch.input_len() {
            return Err(AtentError::shape(
                "forward",
                format!(
                    "input {:?} has {per_sample} values per sample, model expects {}",
                    tape.value(input).shape(),
                    self.arch.input_len()
                ),
            ));
        }
        match &self.arch {
            Architecture::Mlp { widths } => {
                let mut h = if tape.value(input).rank() == 2 {
                    input
                } else {
                    tape.reshape(input, &[n, per_sample])?
                };
                let layers = widths.len() - 1;
                for l in 0..layers {
                    h = tape.matmul(h, weights[2 * l])?;
                    h = tape.add_bias(h, weights[2 * l + 1])?;
                    if l + 1 < layers {
                        h = tape.relu(h)?;
                    }
                }
                Ok(h)
            }
            Architecture::SmallCnn {
                input: shape,
                channels,
                fc_widths,
            } => {
                let mut h = if tape.value(input).shape() == [n, shape[0], shape[1], shape[2]] {
                    input
                } else {
                    tape.reshape(input, &[n, shape[0], shape[1], shape[2]])?
                };
                let mut wi = 0;
                for _ in channels {
                    h = tape.conv2d(h, weights[wi], 1, CNN_KERNEL / 2)?;
                    h = tape.add_channel_bias(h, weights[wi + 1])?;
                    h = tape.relu(h)?;
                    h = tape.max_pool2d(h, CNN_POOL)?;
                    wi += 2;
                }
                let flat = tape.value(h).row_len();
                h = tape.reshape(h, &[n, flat])?;
                for l in 0..fc_widths.len() {
                    h = tape.matmul(h, weights[wi])?;
                    h = tape.add_bias(h, weights[wi + 1])?;
                    if l + 1 < fc_widths.len() {
                        h = tape.relu(h)?;
                    }
                    wi += 2;
                }
                Ok(h)
            }
        }
    }
}

pub fn build_mlp(widths: &[usize], seed: u64) -> Result<ModelParams> {
    ModelParams::init(
        Architecture::Mlp {
            widths: widths.to_vec(),
        },
        seed,
    )
}

pub fn build_small_cnn(
    input: [usize; 3],
    channels: &[usize],
    fc_widths: &[usize],
    seed: u64,
) -> Result<ModelParams> {
    ModelParams::init(
        Architecture::SmallCnn {
            input,
            channels: channels.to_vec(),
            fc_widths: fc_widths.to_vec(),
        },
        seed,
    )
}

/// Inputs with one-hot labels sharing the leading extent.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Tensor,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Tensor) -> Result<Self> {
        if inputs.rows() != labels.rows() {
            return Err(AtentError::shape(
                "batch",
                format!("{} inputs vs {} labels", inputs.rows(), labels.rows()),
            ));
        }
        validate_one_hot(&labels)?;
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_inputs(&self, inputs: Tensor) -> Result<Batch> {
        self.inputs.expect_same_shape(&inputs, "batch inputs")?;
        Ok(Batch {
            inputs,
            labels: self.labels.clone(),
        })
    }

    pub fn class_indices(&self) -> Vec<usize> {
        self.labels.argmax_rows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradTarget {
    Weights,
    Inputs,
    Both,
}

impl GradTarget {
    fn weights(self) -> bool {
        matches!(self, GradTarget::Weights | GradTarget::Both)
    }

    fn inputs(self) -> bool {
        matches!(self, GradTarget::Inputs | GradTarget::Both)
    }
}

#[derive(Debug, Clone)]
pub struct LossAndGrads {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    /// Gradient of the mean loss, one tensor per parameter.
    pub weights: Option<Vec<Tensor>>,
    /// Per-sample input gradients: row `i` is the gradient of sample `i`'s
    /// own loss with respect to its input.
    pub inputs: Option<Tensor>,
}

pub fn forward_logits(params: &ModelParams, inputs: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(inputs.clone());
    let ws: Vec<Var> = params.tensors.iter().map(|t| tape.constant(t.clone())).collect();
    let out = params.forward_on_tape(&mut tape, x, &ws)?;
    Ok(tape.value(out).clone())
}

pub fn loss_and_grads(params: &ModelParams, batch: &Batch, wrt: GradTarget) -> Result<LossAndGrads> {
    let mut tape = Tape::new();
    let x = tape.leaf(batch.inputs.clone(), wrt.inputs());
    let ws: Vec<Var> = params
        .tensors
        .iter()
        .map(|t| tape.leaf(t.clone(), wrt.weights()))
        .collect();
    let logits = params.forward_on_tape(&mut tape, x, &ws)?;
    let loss_var = tape.softmax_cross_entropy(logits, &batch.labels, Reduction::Mean)?;
    let loss = tape.value(loss_var).item();
    let mut grads = tape.backward(loss_var)?;
    let weights = if wrt.weights() {
        Some(
            ws.iter()
                .map(|&w| grads.take(w).expect("trainable leaf has a gradient"))
                .collect(),
        )
    } else {
        None
    };
    let inputs = if wrt.inputs() {
        // d(mean)/dx_i = (1/n) d(loss_i)/dx_i
        let n = batch.len() as f64;
        Some(grads.take(x).expect("input leaf has a gradient").scale(n))
    } else {
        None
    };
    Ok(LossAndGrads {
        loss,
        weights,
        inputs,
    })
}

/// Mean cross-entropy without gradients.
pub fn loss(params: &ModelParams, batch: &Batch) -> Result<f64> {
    let logits = forward_logits(params, &batch.inputs)?;
    let mut tape = Tape::new();
    let l = tape.constant(logits);
    let v = tape.softmax_cross_entropy(l, &batch.labels, Reduction::Mean)?;
    Ok(tape.value(v).item())
}

/// Per-sample cross-entropy losses.
pub fn per_sample_losses(params: &ModelParams, batch: &Batch) -> Result<Vec<f64>> {
    let logits = forward_logits(params, &batch.inputs)?;
    let m = logits.shape()[1];
    Ok((0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let shift = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let log_z = row.iter().map(|v| (v - shift).exp()).sum::<f64>().ln();
            let y = batch.labels.row(i);
            -(0..m).map(|j| y[j] * (row[j] - shift - log_z)).sum::<f64>()
        })
        .collect())
}

const EVAL_CHUNK: usize = 512;

/// Argmax class per sample, ties to the lowest index.
pub fn predict(params: &ModelParams, inputs: &Tensor) -> Result<Vec<usize>> {
    let n = inputs.rows();
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let chunk = if start == 0 && end == n {
            inputs.clone()
        } else {
            inputs.select_rows(&idx)
        };
        out.extend(forward_logits(params, &chunk)?.argmax_rows());
        start = end;
    }
    Ok(out)
}

/// Fraction of samples whose argmax prediction matches the one-hot label.
pub fn accuracy(params: &ModelParams, inputs: &Tensor, labels: &Tensor) -> Result<f64> {
    let preds = predict(params, inputs)?;
    let truth = labels.argmax_rows();
    let correct = preds.iter().zip(&truth).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / preds.len() as f64)
}


#[cfg(test)]
mod proptests {
    use super::*;
    use crate::data::one_hot;
    use proptest::prelude::*;

    fn batch(n: usize, seed: u64) -> Batch {
        use rand::Rng as _;
        let mut r = crate::rng::derive(seed, &[]);
        let x: Vec<f64> = (0..2 * n).map(|_| r.random::<f64>()).collect();
        let y: Vec<usize> = (0..n).map(|_| r.random_range(0..2)).collect();
        Batch::new(Tensor::new(vec![n, 2], x).unwrap(), one_hot(&y, 2).unwrap()).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn flipped_binary_labels_complement_accuracy(n in 1usize..40, seed in any::<u64>()) {
            let p = build_mlp(&[2, 5, 2], seed).unwrap();
            let b = batch(n, seed);
            let flipped = b.labels.map(|v| 1.0 - v);
            let a = accuracy(&p, &b.inputs, &b.labels).unwrap();
            let f = accuracy(&p, &b.inputs, &flipped).unwrap();
            prop_assert!((a + f - 1.0).abs() < 1e-12);
        }

        #[test]
        fn gradient_targets_agree(n in 1usize..20, seed in any::<u64>()) {
            let p = build_mlp(&[2, 4, 2], seed).unwrap();
            let b = batch(n, seed ^ 1);
            let w = loss_and_grads(&p, &b, GradTarget::Weights).unwrap();
            let i = loss_and_grads(&p, &b, GradTarget::Inputs).unwrap();
            let both = loss_and_grads(&p, &b, GradTarget::Both).unwrap();
            prop_assert_eq!(w.loss.to_bits(), both.loss.to_bits());
            prop_assert!((loss(&p, &b).unwrap() - w.loss).abs() < 1e-12);
            for (a, c) in w.weights.unwrap().iter().zip(both.weights.as_ref().unwrap()) {
                prop_assert!(a.bit_eq(c));
            }
            prop_assert!(i.inputs.unwrap().bit_eq(both.inputs.as_ref().unwrap()));
            let mean: f64 = per_sample_losses(&p, &b).unwrap().iter().sum::<f64>() / n as f64;
            prop_assert!((mean - w.loss).abs() < 1e-12);
        }
    }
}
