//! Layers of the feed-forward engine.
//!
//! A prunable *unit* is a neuron: the weight column of a dense layer or one
//! output-channel filter bank of a convolution, together with its bias entry.
//! Unit weight iteration deliberately excludes the bias; importance norms are
//! taken over the weight column only, while masking and scaling always treat
//! the bias as part of the unit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    /// Marks the output layer. The forward pass still emits raw logits; the
    /// softmax is folded into the cross-entropy loss and is irrelevant to
    /// argmax evaluation.
    Softmax,
}

impl Activation {
    pub fn apply(&self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Identity | Activation::Softmax => z,
        }
    }

    /// Derivative with respect to the pre-activation. ReLU uses 0 at exactly 0.
    pub fn derivative(&self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity | Activation::Softmax => 1.0,
        }
    }
}

/// Dense layer: weights have shape `[in, out]`; unit `n` is column `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

/// Stride-1, valid-padding 2-d convolution over NHWC inputs.
/// Kernel shape is `[k, k, c_in, c_out]`; unit `n` is the output-channel
/// slice `[.., .., .., n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(DenseLayer),
    Conv2d(ConvLayer),
}

impl Layer {
    pub fn dense(weights: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if weights.shape().len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "dense weights must be 2-d, got shape {:?}",
                weights.shape()
            )));
        }
        if bias.len() != weights.shape()[1] {
            return Err(Error::InvalidArgument(format!(
                "dense bias length {} does not match {} output units",
                bias.len(),
                weights.shape()[1]
            )));
        }
        Ok(Layer::Dense(DenseLayer {
            weights,
            bias,
            activation,
        }))
    }

    pub fn conv2d(kernel: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if kernel.shape().len() != 4 || kernel.shape()[0] != kernel.shape()[1] {
            return Err(Error::InvalidArgument(format!(
                "conv kernel must have shape [k, k, c_in, c_out], got {:?}",
                kernel.shape()
            )));
        }
        if bias.len() != kernel.shape()[3] {
            return Err(Error::InvalidArgument(format!(
                "conv bias length {} does not match {} output channels",
                bias.len(),
                kernel.shape()[3]
            )));
        }
        Ok(Layer::Conv2d(ConvLayer {
            kernel,
            bias,
            activation,
        }))
    }

    pub fn activation(&self) -> Activation {
        match self {
            Layer::Dense(d) => d.activation,
            Layer::Conv2d(c) => c.activation,
        }
    }

    pub fn weights(&self) -> &Tensor {
        match self {
            Layer::Dense(d) => &d.weights,
            Layer::Conv2d(c) => &c.kernel,
        }
    }

    pub fn weights_mut(&mut self) -> &mut Tensor {
        match self {
            Layer::Dense(d) => &mut d.weights,
            Layer::Conv2d(c) => &mut c.kernel,
        }
    }

    pub fn bias(&self) -> &Tensor {
        match self {
            Layer::Dense(d) => &d.bias,
            Layer::Conv2d(c) => &c.bias,
        }
    }

    pub fn bias_mut(&mut self) -> &mut Tensor {
        match self {
            Layer::Dense(d) => &mut d.bias,
            Layer::Conv2d(c) => &mut c.bias,
        }
    }

    /// Number of prunable units (dense outputs or conv output channels).
    pub fn unit_count(&self) -> usize {
        self.bias().len()
    }

    pub fn weight_count(&self) -> usize {
        self.weights().len()
    }

    /// Own parameter count: weights plus biases.
    pub fn param_count(&self) -> usize {
        self.weight_count() + self.unit_count()
    }

    /// Parameters owned by one unit: its weight column/filter plus its bias.
    pub fn unit_param_count(&self) -> usize {
        self.weight_count() / self.unit_count() + 1
    }

    /// Flat indices (into the weight tensor) of unit `n`'s weights.
    ///
    /// Both layouts put the unit axis last, so the column is a strided slice.
    pub fn unit_weight_indices(&self, unit: usize) -> impl Iterator<Item = usize> {
        let stride = self.unit_count();
        let rows = self.weight_count() / stride;
        (0..rows).map(move |r| r * stride + unit)
    }

    pub fn unit_weights(&self, unit: usize) -> impl Iterator<Item = f64> + '_ {
        let w = self.weights();
        self.unit_weight_indices(unit).map(move |i| w.data()[i])
    }

    /// Output shape given the incoming activation shape (no batch dimension).
    /// Dense layers flatten whatever arrives.
    pub fn output_shape(&self, layer_index: usize, input_shape: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Dense(d) => {
                let flat: usize = input_shape.iter().product();
                if flat != d.weights.shape()[0] {
                    return Err(Error::ShapeMismatch {
                        layer: layer_index,
                        expected: vec![d.weights.shape()[0]],
                        got: input_shape.to_vec(),
                    });
                }
                Ok(vec![d.weights.shape()[1]])
            }
            Layer::Conv2d(c) => {
                let k = c.kernel.shape()[0];
                let (c_in, c_out) = (c.kernel.shape()[2], c.kernel.shape()[3]);
                match input_shape {
                    [h, w, ch] if *ch == c_in && *h >= k && *w >= k => {
                        Ok(vec![h - k + 1, w - k + 1, c_out])
                    }
                    _ => Err(Error::ShapeMismatch {
                        layer: layer_index,
                        expected: vec![k, k, c_in],
                        got: input_shape.to_vec(),
                    }),
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_3x4() -> Layer {
        Layer::dense(
            Tensor::new(vec![3, 4], (0..12).map(|v| v as f64).collect()).unwrap(),
            Tensor::zeros(vec![4]),
            Activation::Relu,
        )
        .unwrap()
    }

    #[test]
    fn unit_column_extraction() {
        let l = dense_3x4();
        // Row-major [3,4]: column 1 is entries 1, 5, 9.
        let col: Vec<f64> = l.unit_weights(1).collect();
        assert_eq!(col, vec![1.0, 5.0, 9.0]);
        assert_eq!(l.unit_param_count(), 4);
        assert_eq!(l.param_count(), 16);
    }

    #[test]
    fn conv_unit_is_output_channel_slice() {
        let kernel = Tensor::new(vec![2, 2, 1, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        let l = Layer::conv2d(kernel, Tensor::zeros(vec![2]), Activation::Relu).unwrap();
        let filter: Vec<f64> = l.unit_weights(0).collect();
        assert_eq!(filter, vec![0.0, 2.0, 4.0, 6.0]);
        assert_eq!(l.unit_count(), 2);
    }

    #[test]
    fn shape_chain() {
        let l = dense_3x4();
        assert_eq!(l.output_shape(0, &[3]).unwrap(), vec![4]);
        assert!(l.output_shape(0, &[5]).is_err());

        let kernel = Tensor::zeros(vec![3, 3, 2, 5]);
        let conv = Layer::conv2d(kernel, Tensor::zeros(vec![5]), Activation::Relu).unwrap();
        assert_eq!(conv.output_shape(1, &[8, 8, 2]).unwrap(), vec![6, 6, 5]);
        assert!(conv.output_shape(1, &[8, 8, 3]).is_err());
        assert!(conv.output_shape(1, &[2, 2, 2]).is_err());
    }
}
