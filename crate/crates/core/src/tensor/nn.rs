//! Declarative layer stacks evaluated on a [`Tape`].

use serde::{Deserialize, Serialize};

use super::array::{ConvGeom, Tensor};
use super::params::ParamSet;
use super::{Tape, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    /// `x[n, inputs] · W[inputs, outputs] + b`.
    Dense { name: String, inputs: usize, outputs: usize },
    /// Weight layout `[out_ch, in_ch, k, k]`.
    Conv2d { name: String, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize },
    /// Weight layout `[in_ch, out_ch, k, k]`.
    ConvTranspose2d { name: String, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize },
    /// Per-sample reshape; the batch axis is kept.
    Reshape { shape: Vec<usize> },
    Flatten,
    LeakyRelu { slope: f64 },
    Tanh,
    Sigmoid,
    MaxPool2d { size: usize },
}

impl Layer {
    pub fn dense(name: &str, inputs: usize, outputs: usize) -> Self {
        Layer::Dense { name: name.into(), inputs, outputs }
    }

    pub fn conv(name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Layer::Conv2d { name: name.into(), in_ch, out_ch, kernel, stride, pad }
    }

    pub fn conv_t(name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Layer::ConvTranspose2d { name: name.into(), in_ch, out_ch, kernel, stride, pad }
    }

    fn params(&self) -> Option<(&str, Vec<usize>, Vec<usize>)> {
        match self {
            Layer::Dense { name, inputs, outputs } => Some((name, vec![*inputs, *outputs], vec![*outputs])),
            Layer::Conv2d { name, in_ch, out_ch, kernel, .. } => {
                Some((name, vec![*out_ch, *in_ch, *kernel, *kernel], vec![*out_ch]))
            }
            Layer::ConvTranspose2d { name, in_ch, out_ch, kernel, .. } => {
                Some((name, vec![*in_ch, *out_ch, *kernel, *kernel], vec![*out_ch]))
            }
            _ => None,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    fn infer(&self, input: &[usize]) -> Result<Vec<usize>, TensorError> {
        let bad = |detail: String| TensorError::ShapeMismatch { op: "layer", detail };
        match self {
            Layer::Dense { inputs, outputs, name } => {
                if input != [*inputs] {
                    return Err(bad(format!("{name}: expects [{inputs}], got {input:?}")));
                }
                Ok(vec![*outputs])
            }
            Layer::Conv2d { name, in_ch, out_ch, kernel, stride, pad } => match input {
                [c, h, w] if c == in_ch => {
                    let oh = ConvGeom::conv_out(*h, *kernel, *stride, *pad);
                    let ow = ConvGeom::conv_out(*w, *kernel, *stride, *pad);
                    match (oh, ow) {
                        (Some(oh), Some(ow)) => Ok(vec![*out_ch, oh, ow]),
                        _ => Err(bad(format!("{name}: kernel does not fit {input:?}"))),
                    }
                }
                _ => Err(bad(format!("{name}: expects [{in_ch}, h, w], got {input:?}"))),
            },
            Layer::ConvTranspose2d { name, in_ch, out_ch, kernel, stride, pad } => match input {
                [c, h, w] if c == in_ch => {
                    let oh = ConvGeom::transpose_out(*h, *kernel, *stride, *pad);
                    let ow = ConvGeom::transpose_out(*w, *kernel, *stride, *pad);
                    match (oh, ow) {
                        (Some(oh), Some(ow)) => Ok(vec![*out_ch, oh, ow]),
                        _ => Err(bad(format!("{name}: degenerate output for {input:?}"))),
                    }
                }
                _ => Err(bad(format!("{name}: expects [{in_ch}, h, w], got {input:?}"))),
            },
            Layer::Reshape { shape } => {
                if shape.iter().product::<usize>() != input.iter().product::<usize>() {
                    return Err(bad(format!("reshape {input:?} → {shape:?}")));
                }
                Ok(shape.clone())
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::LeakyRelu { .. } | Layer::Tanh | Layer::Sigmoid => Ok(input.to_vec()),
            Layer::MaxPool2d { size } => match input {
                [c, h, w] if *size > 0 && h % size == 0 && w % size == 0 => Ok(vec![*c, h / size, w / size]),
                _ => Err(bad(format!("max pool {size} over {input:?}"))),
            },
        }
    }
}

/// Per-sample input shape plus a layer list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input: Vec<usize>,
    pub layers: Vec<Layer>,
}

impl NetSpec {
    pub fn new(input: Vec<usize>, layers: Vec<Layer>) -> Self {
        Self { input, layers }
    }

    /// `(name, shape, is_bias)` for every parameter, after validating the stack.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>, bool)>, TensorError> {
        self.output_shape()?;
        let mut out = Vec::new();
        for layer in &self.layers {
            if let Some((name, w, b)) = layer.params() {
                out.push((format!("{name}.weight"), w, false));
                out.push((format!("{name}.bias"), b, true));
            }
        }
        Ok(out)
    }

    /// Per-sample output shape after the first `n` layers.
    pub fn shape_after(&self, n: usize) -> Result<Vec<usize>, TensorError> {
        let mut shape = self.input.clone();
        for layer in &self.layers[..n.min(self.layers.len())] {
            shape = layer.infer(&shape)?;
        }
        Ok(shape)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>, TensorError> {
        self.shape_after(self.layers.len())
    }
}

/// A [`NetSpec`] together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: NetSpec,
    pub params: ParamSet,
}

impl Network {
    pub fn new(spec: NetSpec, params: ParamSet) -> Result<Self, TensorError> {
        let shapes = spec.param_shapes()?;
        if shapes.len() != params.len() {
            return Err(TensorError::ShapeMismatch {
                op: "network",
                detail: format!("spec has {} parameters, set has {}", shapes.len(), params.len()),
            });
        }
        for ((name, shape, _), (pname, t)) in shapes.iter().zip(params.iter()) {
            if name != pname || shape.as_slice() != t.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "network",
                    detail: format!("{name} {shape:?} vs {pname} {:?}", t.shape()),
                });
            }
        }
        Ok(Self { spec, params })
    }

    /// Runs the whole stack on batch `x` using parameter handles from [`ParamSet::to_tape`].
    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var, TensorError> {
        self.forward_layers(tape, params, x, self.spec.layers.len())
    }

    /// Runs only the first `n` layers.
    pub fn forward_layers(&self, tape: &mut Tape, params: &[Var], x: Var, n: usize) -> Result<Var, TensorError> {
        let batch = tape.shape(x)[0];
        let mut expected = vec![batch];
        expected.extend_from_slice(&self.spec.input);
        let mut h = if tape.shape(x) == expected.as_slice() { x } else { tape.reshape(x, &expected)? };
        let mut p = params.iter().copied();
        let mut next = || {
            p.next().ok_or(TensorError::ShapeMismatch { op: "network", detail: "missing parameters".into() })
        };
        for layer in &self.spec.layers[..n.min(self.spec.layers.len())] {
            h = match layer {
                Layer::Dense { .. } => {
                    let (w, b) = (next()?, next()?);
                    let xw = tape.matmul(h, w)?;
                    tape.add_bias(xw, b)?
                }
                Layer::Conv2d { stride, pad, .. } => {
                    let (w, b) = (next()?, next()?);
                    let y = tape.conv2d(h, w, *stride, *pad)?;
                    tape.add_bias(y, b)?
                }
                Layer::ConvTranspose2d { stride, pad, .. } => {
                    let (w, b) = (next()?, next()?);
                    let y = tape.conv2d_transpose(h, w, *stride, *pad)?;
                    tape.add_bias(y, b)?
                }
                Layer::Reshape { shape } => {
                    let mut s = vec![batch];
                    s.extend_from_slice(shape);
                    tape.reshape(h, &s)?
                }
                Layer::Flatten => {
                    let cols = tape.value(h).len() / batch;
                    tape.reshape(h, &[batch, cols])?
                }
                Layer::LeakyRelu { slope } => tape.leaky_relu(h, *slope)?,
                Layer::Tanh => tape.tanh(h)?,
                Layer::Sigmoid => tape.sigmoid(h)?,
                Layer::MaxPool2d { size } => tape.max_pool2d(h, *size)?,
            };
        }
        Ok(h)
    }

    /// Inference without gradient tracking, evaluated in chunks of `chunk` samples.
    pub fn predict(&self, x: &Tensor, layers: Option<usize>, chunk: usize) -> Result<Tensor, TensorError> {
        let n_layers = layers.unwrap_or(self.spec.layers.len());
        let (rows, _) = x.rows_cols();
        let mut parts = Vec::new();
        let mut start = 0;
        while start < rows {
            let end = (start + chunk.max(1)).min(rows);
            let idx: Vec<usize> = (start..end).collect();
            let mut tape = Tape::new();
            let pv = self.params.to_tape(&mut tape, false)?;
            let xv = tape.constant(x.select_rows(&idx))?;
            let y = self.forward_layers(&mut tape, &pv, xv, n_layers)?;
            parts.push(tape.value(y).clone());
            start = end;
        }
        if parts.is_empty() {
            let mut shape = vec![0];
            shape.extend(self.spec.shape_after(n_layers)?);
            return Ok(Tensor::zeros(&shape));
        }
        Tensor::stack_rows(&parts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::init_params;

    #[test]
    fn shape_inference_through_generator_stack() {
        let spec = NetSpec::new(
            vec![100],
            vec![
                Layer::dense("fc", 100, 16 * 8 * 8),
                Layer::Reshape { shape: vec![16, 8, 8] },
                Layer::conv_t("up1", 16, 8, 4, 2, 1),
                Layer::conv_t("up2", 8, 1, 4, 2, 1),
                Layer::Tanh,
            ],
        );
        assert_eq!(spec.output_shape().unwrap(), vec![1, 32, 32]);
        assert_eq!(spec.param_shapes().unwrap().len(), 6);
    }

    #[test]
    fn mismatched_stack_is_rejected() {
        let spec = NetSpec::new(vec![3], vec![Layer::dense("a", 4, 2)]);
        assert!(spec.output_shape().is_err());
    }

    #[test]
    fn predict_matches_single_batch_forward() {
        let spec = NetSpec::new(
            vec![1, 8, 8],
            vec![
                Layer::conv("c", 1, 2, 3, 1, 1),
                Layer::LeakyRelu { slope: 0.2 },
                Layer::MaxPool2d { size: 2 },
                Layer::Flatten,
                Layer::dense("d", 32, 1),
            ],
        );
        let net = Network::new(spec.clone(), init_params(&spec, 4).unwrap()).unwrap();
        let x = Tensor::new(vec![5, 1, 8, 8], (0..320).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let a = net.predict(&x, None, 2).unwrap();
        let b = net.predict(&x, None, 100).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[5, 1]);
    }
}
