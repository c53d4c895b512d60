use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::checkpoint::Checkpoint;
use super::tape::{fwd_add_row_bias, fwd_matmul, fwd_tanh, Tape, Var};
use super::tensor::Tensor;
use crate::error::{bail, Result};
use crate::math;
use crate::noise::NoiseStream;

/// How the output layer is initialised.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HeadInit {
    Random,
    /// Zero weights and bias: the network outputs exactly zero.
    Zero,
    /// Zero weights, bias set to the constant: the network outputs the constant.
    Constant(f64),
}

/// Affine layer `x·W + b` with `W` stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Sinusoidal features of diffusion time, one row per entry of `times`
/// (or `rows` copies of a single time).
pub fn time_embedding(times: &[f64], rows: usize, dim: usize) -> Tensor {
    let mut out = Tensor::zeros(rows, dim);
    let half = dim / 2;
    for r in 0..rows {
        let t = if times.len() == 1 { times[0] } else { times[r] };
        let row = out.row_mut(r);
        for j in 0..half {
            // Frequencies spread geometrically over [1, 64].
            let freq = if half > 1 { math::exp(math::ln(64.0) * j as f64 / (half - 1) as f64) } else { 1.0 };
            let arg = core::f64::consts::PI * freq * t;
            row[2 * j] = math::sin(arg);
            row[2 * j + 1] = math::cos(arg);
        }
        if dim % 2 == 1 {
            row[dim - 1] = t;
        }
    }
    out
}

/// Multilayer perceptron with tanh hidden activations and an optional
/// sinusoidal time embedding appended to its input.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Linear>,
    input_dim: usize,
    time_dim: usize,
}

/// Tape handles of an [`Mlp`]'s weights for one forward pass.
#[derive(Debug, Clone)]
pub struct MlpVars {
    layers: Vec<(Var, Var)>,
}

impl MlpVars {
    /// All weight and bias handles, in [`Mlp::tensors`] order.
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

impl Mlp {
    /// `input_dim` excludes the time features; `time_dim = 0` disables them.
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        time_dim: usize,
        head: HeadInit,
        rng: &mut NoiseStream,
    ) -> Result<Self> {
        if input_dim + time_dim == 0 || output_dim == 0 || hidden.contains(&0) {
            bail!(Config, "network layer widths must be positive");
        }
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input_dim + time_dim);
        widths.extend_from_slice(hidden);
        widths.push(output_dim);
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let mut weight = Tensor::zeros(fan_in, fan_out);
                let mut bias = Tensor::zeros(1, fan_out);
                let random = i < last || head == HeadInit::Random;
                if random {
                    let sd = math::sqrt(1.0 / fan_in as f64);
                    for v in weight.data_mut() {
                        *v = sd * rng.normal();
                    }
                } else if let HeadInit::Constant(c) = head {
                    bias.data_mut().fill(c);
                }
                Linear { weight, bias }
            })
            .collect();
        Ok(Self { layers, input_dim, time_dim })
    }

    pub fn from_layers(layers: Vec<Linear>, input_dim: usize, time_dim: usize) -> Result<Self> {
        let mut prev = input_dim + time_dim;
        for (i, l) in layers.iter().enumerate() {
            if l.weight.rows() != prev || l.bias.shape() != (1, l.weight.cols()) {
                bail!(Shape, "layer {i} does not chain: expected {prev} inputs");
            }
            prev = l.weight.cols();
        }
        if layers.is_empty() {
            bail!(Config, "a network needs at least one layer");
        }
        Ok(Self { layers, input_dim, time_dim })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn time_dim(&self) -> usize {
        self.time_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.cols())
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(|l| l.weight.cols()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Named parameter tensors (`<prefix>.<layer>.weight` / `.bias`).
    pub fn tensors(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.{i}.weight"), &l.weight));
            out.push((format!("{prefix}.{i}.bias"), &l.bias));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    /// Put the weights on the tape, as leaves when `trainable`, otherwise as
    /// constants (adjoints still flow through the inputs).
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> MlpVars {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                if trainable {
                    (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone()))
                } else {
                    (tape.constant(l.weight.clone()), tape.constant(l.bias.clone()))
                }
            })
            .collect();
        MlpVars { layers }
    }

    fn check_inputs(&self, shapes: &[(usize, usize)], times: Option<&[f64]>) -> Result<usize> {
        let rows = match (shapes.first(), times) {
            (Some(s), _) => s.0,
            (None, Some(t)) => t.len(),
            (None, None) => 1,
        };
        let width: usize = shapes.iter().map(|s| s.1).sum();
        if shapes.iter().any(|s| s.0 != rows) {
            bail!(Shape, "network inputs have differing batch sizes");
        }
        if width != self.input_dim {
            bail!(Shape, "network expects {} input features, got {width}", self.input_dim);
        }
        match (self.time_dim > 0, times) {
            (true, None) => bail!(Usage, "time-conditioned network called without times"),
            (true, Some(t)) if t.len() != 1 && t.len() != rows => {
                bail!(Shape, "{} times for a batch of {rows}", t.len())
            }
            _ => {}
        }
        Ok(rows)
    }

    /// Taped forward pass. `inputs` are concatenated column-wise; `times`
    /// holds one time per row or a single shared time. With no `inputs` the
    /// batch size is the number of times.
    pub fn forward(&self, tape: &mut Tape, vars: &MlpVars, inputs: &[Var], times: Option<&[f64]>) -> Result<Var> {
        let shapes: Vec<_> = inputs.iter().map(|&v| tape.value(v).shape()).collect();
        let rows = self.check_inputs(&shapes, times)?;
        let mut parts: Vec<Var> = inputs.to_vec();
        if self.time_dim > 0 {
            let emb = time_embedding(times.unwrap_or(&[0.0]), rows, self.time_dim);
            parts.push(tape.constant(emb));
        }
        let mut h = if parts.len() == 1 { parts[0] } else { tape.concat_cols(&parts)? };
        let last = vars.layers.len() - 1;
        for (i, &(w, b)) in vars.layers.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            let z = tape.add_row_bias(z, b)?;
            h = if i < last { tape.tanh(z) } else { z };
        }
        Ok(h)
    }

    /// Untaped forward pass; bit-identical to [`Mlp::forward`].
    pub fn eval(&self, inputs: &[&Tensor], times: Option<&[f64]>) -> Result<Tensor> {
        let shapes: Vec<_> = inputs.iter().map(|v| v.shape()).collect();
        let rows = self.check_inputs(&shapes, times)?;
        let emb;
        let mut parts: Vec<&Tensor> = inputs.to_vec();
        if self.time_dim > 0 {
            emb = time_embedding(times.unwrap_or(&[0.0]), rows, self.time_dim);
            parts.push(&emb);
        }
        let mut h = if parts.len() == 1 { parts[0].clone() } else { Tensor::concat_cols(&parts)? };
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let z = fwd_add_row_bias(&fwd_matmul(&h, &l.weight), &l.bias);
            h = if i < last { fwd_tanh(&z) } else { z };
        }
        Ok(h)
    }
}

impl Mlp {
    /// Append this network's tensors and shape metadata under `prefix`.
    pub fn write_to(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.meta.push((format!("{prefix}.input_dim"), format!("{}", self.input_dim)));
        ck.meta.push((format!("{prefix}.time_dim"), format!("{}", self.time_dim)));
        ck.meta.push((format!("{prefix}.layers"), format!("{}", self.layers.len())));
        for (name, t) in self.tensors(prefix) {
            ck.push(name, t);
        }
    }

    pub fn read_from(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let input_dim = ck.meta_parse(&format!("{prefix}.input_dim"))?;
        let time_dim = ck.meta_parse(&format!("{prefix}.time_dim"))?;
        let n: usize = ck.meta_parse(&format!("{prefix}.layers"))?;
        let layers = (0..n)
            .map(|i| {
                Ok(Linear {
                    weight: ck.tensor(&format!("{prefix}.{i}.weight"))?.clone(),
                    bias: ck.tensor(&format!("{prefix}.{i}.bias"))?.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers, input_dim, time_dim)
    }
}
