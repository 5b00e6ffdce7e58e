//! Feed-forward network: forward evaluation, exact backpropagation, loss,
//! neuron scaling, and parameter/FLOP accounting.
//!
//! Gradients are taken of the mean cross-entropy training loss (softmax over
//! classes), averaged over the batch. This matches the fine-tuning objective;
//! the raw predictive function is never differentiated directly.

use crate::error::{Error, Result};
use crate::layer::{Activation, Layer};
use crate::pruner::{LayerMask, PruneMask};
use crate::tensor::Tensor;

/// A labelled mini-batch. Inputs are `[B, features]` or `[B, H, W, C]`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.shape()[0] != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "batch has {} inputs but {} labels",
                inputs.shape()[0],
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Per-layer gradients, congruent in shape to the corresponding weights/biases.
#[derive(Debug, Clone)]
pub struct LayerGradient {
    pub weights: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct GradientSet {
    pub layers: Vec<LayerGradient>,
}

impl GradientSet {
    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|g| g.weights.all_finite() && g.bias.all_finite())
    }
}

/// Restores a scaled unit to its exact original values.
#[derive(Debug, Clone)]
pub struct ScaleToken {
    layer: usize,
    unit: usize,
    weights: Vec<f64>,
    bias: f64,
}

impl ScaleToken {
    pub fn restore(&self, net: &mut Network) {
        net.set_unit_exact(self.layer, self.unit, &self.weights, self.bias);
    }

    pub fn original_weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn original_bias(&self) -> f64 {
        self.bias
    }
}

/// Restores a scaled single weight to its exact original value.
#[derive(Debug, Clone, Copy)]
pub struct WeightToken {
    layer: usize,
    index: usize,
    value: f64,
}

impl WeightToken {
    pub fn restore(&self, net: &mut Network) {
        net.layers[self.layer].weights_mut().data_mut()[self.index] = self.value;
    }

    pub fn original_value(&self) -> f64 {
        self.value
    }
}

/// Forward activations recorded from some starting layer onward.
/// `acts[0]` is the input to layer `start`; `acts[i + 1]` / `pres[i]` belong
/// to layer `start + i`.
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    pub start: usize,
    pub acts: Vec<Tensor>,
    pub pres: Vec<Tensor>,
}

impl Trace {
    pub fn logits(&self) -> &Tensor {
        self.acts.last().unwrap()
    }

    /// Input activation of absolute layer `l` (requires `l >= start`).
    pub fn input_of(&self, l: usize) -> &Tensor {
        &self.acts[l - self.start]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    /// Activation shape after each layer; `[0]` is the input shape.
    shapes: Vec<Vec<usize>>,
}

impl Network {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        let mut shapes = vec![input_shape.clone()];
        for (i, layer) in layers.iter().enumerate() {
            let next = layer.output_shape(i, shapes.last().unwrap())?;
            shapes.push(next);
        }
        Ok(Self {
            layers,
            input_shape,
            shapes,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &Layer {
        &self.layers[l]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut Layer {
        &mut self.layers[l]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn output_dim(&self) -> usize {
        self.shapes.last().unwrap().iter().product()
    }

    /// Activation shape entering layer `l`.
    pub fn shape_into(&self, l: usize) -> &[usize] {
        &self.shapes[l]
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let got = &batch.inputs.shape()[1..];
        if got != self.input_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                layer: 0,
                expected: self.input_shape.clone(),
                got: got.to_vec(),
            });
        }
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        Ok(())
    }

    /// Forward pass; returns logits `[B, n_o]`. The terminal softmax, when
    /// declared, is folded into the loss and never applied here.
    pub fn forward(&self, batch: &Batch) -> Result<Tensor> {
        self.check_batch(batch)?;
        let trace = self.trace_from(0, batch.inputs.clone())?;
        Ok(trace.acts.into_iter().last().unwrap())
    }

    /// Record activations from layer `start` onward, given that layer's input
    /// activation (batched). `start = 0` with the raw inputs is a full pass.
    pub(crate) fn trace_from(&self, start: usize, input_act: Tensor) -> Result<Trace> {
        let batch = input_act.shape()[0];
        let mut acts = Vec::with_capacity(self.layers.len() - start + 1);
        let mut pres = Vec::with_capacity(self.layers.len() - start);
        acts.push(input_act);
        for (off, layer) in self.layers[start..].iter().enumerate() {
            let l = start + off;
            let prev = acts.last().unwrap();
            let pre = self.layer_pre(l, layer, prev, batch)?;
            let act = apply_activation(layer.activation(), &pre);
            pres.push(pre);
            acts.push(act);
        }
        Ok(Trace { start, acts, pres })
    }

    /// Pre-activation of one layer.
    fn layer_pre(&self, l: usize, layer: &Layer, input: &Tensor, batch: usize) -> Result<Tensor> {
        match layer {
            Layer::Dense(d) => {
                let n_in = d.weights.shape()[0];
                let n_out = d.weights.shape()[1];
                if input.row_len() != n_in {
                    return Err(Error::ShapeMismatch {
                        layer: l,
                        expected: vec![n_in],
                        got: input.shape()[1..].to_vec(),
                    });
                }
                let mut out = vec![0.0; batch * n_out];
                let w = d.weights.data();
                let x = input.data();
                for b in 0..batch {
                    let out_row = &mut out[b * n_out..(b + 1) * n_out];
                    out_row.copy_from_slice(d.bias.data());
                    let x_row = &x[b * n_in..(b + 1) * n_in];
                    for (i, &xv) in x_row.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let w_row = &w[i * n_out..(i + 1) * n_out];
                        for (o, wv) in out_row.iter_mut().zip(w_row) {
                            *o += xv * wv;
                        }
                    }
                }
                Tensor::new(vec![batch, n_out], out)
            }
            Layer::Conv2d(c) => {
                let in_shape = self.shape_into(l);
                let (h, w, c_in) = (in_shape[0], in_shape[1], in_shape[2]);
                if input.shape()[1..] != [h, w, c_in] {
                    return Err(Error::ShapeMismatch {
                        layer: l,
                        expected: in_shape.to_vec(),
                        got: input.shape()[1..].to_vec(),
                    });
                }
                let k = c.kernel.shape()[0];
                let c_out = c.kernel.shape()[3];
                let (ho, wo) = (h - k + 1, w - k + 1);
                let kd = c.kernel.data();
                let x = input.data();
                let mut out = vec![0.0; batch * ho * wo * c_out];
                for b in 0..batch {
                    for y in 0..ho {
                        for xo in 0..wo {
                            let o_base = ((b * ho + y) * wo + xo) * c_out;
                            let out_px = &mut out[o_base..o_base + c_out];
                            out_px.copy_from_slice(c.bias.data());
                            for dy in 0..k {
                                for dx in 0..k {
                                    let i_base = ((b * h + y + dy) * w + xo + dx) * c_in;
                                    let k_base = (dy * k + dx) * c_in * c_out;
                                    for ci in 0..c_in {
                                        let xv = x[i_base + ci];
                                        if xv == 0.0 {
                                            continue;
                                        }
                                        let k_row = &kd[k_base + ci * c_out..k_base + (ci + 1) * c_out];
                                        for (o, kv) in out_px.iter_mut().zip(k_row) {
                                            *o += xv * kv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Tensor::new(vec![batch, ho, wo, c_out], out)
            }
        }
    }

    /// Exact gradients of the mean cross-entropy loss with respect to every
    /// weight and bias.
    pub fn backward(&self, batch: &Batch) -> Result<GradientSet> {
        self.check_batch(batch)?;
        let trace = self.trace_from(0, batch.inputs.clone())?;
        let mut grads: Vec<Option<LayerGradient>> = (0..self.layers.len()).map(|_| None).collect();
        let mut delta = output_delta(trace.logits(), &batch.labels)?;
        apply_activation_derivative(
            self.layers.last().unwrap().activation(),
            trace.pres.last().unwrap(),
            &mut delta,
        );
        for l in (0..self.layers.len()).rev() {
            let input = trace.input_of(l);
            grads[l] = Some(self.layer_gradient(l, input, &delta));
            if l > 0 {
                let mut upstream = self.propagate_delta(l, input, &delta);
                apply_activation_derivative(
                    self.layers[l - 1].activation(),
                    &trace.pres[l - 1],
                    &mut upstream,
                );
                delta = upstream;
            }
        }
        Ok(GradientSet {
            layers: grads.into_iter().map(Option::unwrap).collect(),
        })
    }

    /// Delta at the pre-activation of layer `start` (the first traced layer),
    /// without materializing weight gradients along the way.
    pub(crate) fn delta_at(&self, trace: &Trace, labels: &[usize]) -> Result<Tensor> {
        let mut delta = output_delta(trace.logits(), labels)?;
        apply_activation_derivative(
            self.layers.last().unwrap().activation(),
            trace.pres.last().unwrap(),
            &mut delta,
        );
        for l in (trace.start + 1..self.layers.len()).rev() {
            let mut upstream = self.propagate_delta(l, trace.input_of(l), &delta);
            apply_activation_derivative(
                self.layers[l - 1].activation(),
                &trace.pres[l - 1 - trace.start],
                &mut upstream,
            );
            delta = upstream;
        }
        Ok(delta)
    }

    /// dL/d(input activation of layer l), given dL/d(pre-activation of l).
    fn propagate_delta(&self, l: usize, input: &Tensor, delta: &Tensor) -> Tensor {
        let batch = delta.shape()[0];
        match &self.layers[l] {
            Layer::Dense(d) => {
                let n_in = d.weights.shape()[0];
                let n_out = d.weights.shape()[1];
                let w = d.weights.data();
                let dz = delta.data();
                let mut out = vec![0.0; batch * n_in];
                for b in 0..batch {
                    let dz_row = &dz[b * n_out..(b + 1) * n_out];
                    let o_row = &mut out[b * n_in..(b + 1) * n_in];
                    for i in 0..n_in {
                        let w_row = &w[i * n_out..(i + 1) * n_out];
                        let mut s = 0.0;
                        for (dv, wv) in dz_row.iter().zip(w_row) {
                            s += dv * wv;
                        }
                        o_row[i] = s;
                    }
                }
                // Mirror the incoming activation's shape (undo flattening).
                Tensor::new(input.shape().to_vec(), out).unwrap()
            }
            Layer::Conv2d(c) => {
                let in_shape = self.shape_into(l);
                let (h, w, c_in) = (in_shape[0], in_shape[1], in_shape[2]);
                let k = c.kernel.shape()[0];
                let c_out = c.kernel.shape()[3];
                let (ho, wo) = (h - k + 1, w - k + 1);
                let kd = c.kernel.data();
                let dz = delta.data();
                let mut din = vec![0.0; batch * h * w * c_in];
                for b in 0..batch {
                    for y in 0..ho {
                        for xo in 0..wo {
                            let dz_px = &dz[((b * ho + y) * wo + xo) * c_out..][..c_out];
                            for dy in 0..k {
                                for dx in 0..k {
                                    let i_base = ((b * h + y + dy) * w + xo + dx) * c_in;
                                    let k_base = (dy * k + dx) * c_in * c_out;
                                    for ci in 0..c_in {
                                        let k_row = &kd[k_base + ci * c_out..k_base + (ci + 1) * c_out];
                                        let mut s = 0.0;
                                        for (dv, kv) in dz_px.iter().zip(k_row) {
                                            s += dv * kv;
                                        }
                                        din[i_base + ci] += s;
                                    }
                                }
                            }
                        }
                    }
                }
                Tensor::new(vec![batch, h, w, c_in], din).unwrap()
            }
        }
    }

    /// Full weight/bias gradient of one layer from its input activation and
    /// pre-activation delta.
    fn layer_gradient(&self, l: usize, input: &Tensor, delta: &Tensor) -> LayerGradient {
        let batch = delta.shape()[0];
        match &self.layers[l] {
            Layer::Dense(d) => {
                let n_in = d.weights.shape()[0];
                let n_out = d.weights.shape()[1];
                let x = input.data();
                let dz = delta.data();
                let mut dw = vec![0.0; n_in * n_out];
                let mut db = vec![0.0; n_out];
                for b in 0..batch {
                    let x_row = &x[b * n_in..(b + 1) * n_in];
                    let dz_row = &dz[b * n_out..(b + 1) * n_out];
                    for (i, &xv) in x_row.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let dw_row = &mut dw[i * n_out..(i + 1) * n_out];
                        for (g, dv) in dw_row.iter_mut().zip(dz_row) {
                            *g += xv * dv;
                        }
                    }
                    for (g, dv) in db.iter_mut().zip(dz_row) {
                        *g += dv;
                    }
                }
                LayerGradient {
                    weights: Tensor::new(vec![n_in, n_out], dw).unwrap(),
                    bias: Tensor::new(vec![n_out], db).unwrap(),
                }
            }
            Layer::Conv2d(c) => {
                let in_shape = self.shape_into(l);
                let (h, w, c_in) = (in_shape[0], in_shape[1], in_shape[2]);
                let k = c.kernel.shape()[0];
                let c_out = c.kernel.shape()[3];
                let (ho, wo) = (h - k + 1, w - k + 1);
                let x = input.data();
                let dz = delta.data();
                let mut dk = vec![0.0; k * k * c_in * c_out];
                let mut db = vec![0.0; c_out];
                for b in 0..batch {
                    for y in 0..ho {
                        for xo in 0..wo {
                            let dz_px = &dz[((b * ho + y) * wo + xo) * c_out..][..c_out];
                            for dy in 0..k {
                                for dx in 0..k {
                                    let i_base = ((b * h + y + dy) * w + xo + dx) * c_in;
                                    let k_base = (dy * k + dx) * c_in * c_out;
                                    for ci in 0..c_in {
                                        let xv = x[i_base + ci];
                                        if xv == 0.0 {
                                            continue;
                                        }
                                        let dk_row =
                                            &mut dk[k_base + ci * c_out..k_base + (ci + 1) * c_out];
                                        for (g, dv) in dk_row.iter_mut().zip(dz_px) {
                                            *g += xv * dv;
                                        }
                                    }
                                }
                            }
                            for (g, dv) in db.iter_mut().zip(dz_px) {
                                *g += dv;
                            }
                        }
                    }
                }
                LayerGradient {
                    weights: Tensor::new(vec![k, k, c_in, c_out], dk).unwrap(),
                    bias: Tensor::new(vec![c_out], db).unwrap(),
                }
            }
        }
    }

    /// Gradient of the loss with respect to unit `unit`'s weight column only,
    /// given layer `l`'s input activation and pre-activation delta.
    pub(crate) fn unit_grad(&self, l: usize, unit: usize, input: &Tensor, delta: &Tensor) -> Vec<f64> {
        let batch = delta.shape()[0];
        match &self.layers[l] {
            Layer::Dense(d) => {
                let n_in = d.weights.shape()[0];
                let n_out = d.weights.shape()[1];
                let x = input.data();
                let dz = delta.data();
                let mut col = vec![0.0; n_in];
                for b in 0..batch {
                    let dv = dz[b * n_out + unit];
                    if dv == 0.0 {
                        continue;
                    }
                    let x_row = &x[b * n_in..(b + 1) * n_in];
                    for (g, &xv) in col.iter_mut().zip(x_row) {
                        *g += xv * dv;
                    }
                }
                col
            }
            Layer::Conv2d(c) => {
                let in_shape = self.shape_into(l);
                let (h, w, c_in) = (in_shape[0], in_shape[1], in_shape[2]);
                let k = c.kernel.shape()[0];
                let c_out = c.kernel.shape()[3];
                let (ho, wo) = (h - k + 1, w - k + 1);
                let x = input.data();
                let dz = delta.data();
                let mut filt = vec![0.0; k * k * c_in];
                for b in 0..batch {
                    for y in 0..ho {
                        for xo in 0..wo {
                            let dv = dz[((b * ho + y) * wo + xo) * c_out + unit];
                            if dv == 0.0 {
                                continue;
                            }
                            for dy in 0..k {
                                for dx in 0..k {
                                    let i_base = ((b * h + y + dy) * w + xo + dx) * c_in;
                                    let f_base = (dy * k + dx) * c_in;
                                    for ci in 0..c_in {
                                        filt[f_base + ci] += x[i_base + ci] * dv;
                                    }
                                }
                            }
                        }
                    }
                }
                filt
            }
        }
    }

    /// Gradient of the loss with respect to a single flat weight index.
    pub(crate) fn weight_grad(&self, l: usize, index: usize, input: &Tensor, delta: &Tensor) -> f64 {
        let batch = delta.shape()[0];
        match &self.layers[l] {
            Layer::Dense(d) => {
                let n_in = d.weights.shape()[0];
                let n_out = d.weights.shape()[1];
                let (i, j) = (index / n_out, index % n_out);
                let x = input.data();
                let dz = delta.data();
                let mut g = 0.0;
                for b in 0..batch {
                    g += x[b * n_in + i] * dz[b * n_out + j];
                }
                g
            }
            Layer::Conv2d(c) => {
                let in_shape = self.shape_into(l);
                let (h, w, c_in) = (in_shape[0], in_shape[1], in_shape[2]);
                let k = c.kernel.shape()[0];
                let c_out = c.kernel.shape()[3];
                let (ho, wo) = (h - k + 1, w - k + 1);
                let rem = index;
                let o = rem % c_out;
                let rem = rem / c_out;
                let ci = rem % c_in;
                let rem = rem / c_in;
                let dx = rem % k;
                let dy = rem / k;
                let x = input.data();
                let dz = delta.data();
                let mut g = 0.0;
                for b in 0..batch {
                    for y in 0..ho {
                        for xo in 0..wo {
                            let dv = dz[((b * ho + y) * wo + xo) * c_out + o];
                            if dv == 0.0 {
                                continue;
                            }
                            g += x[((b * h + y + dy) * w + xo + dx) * c_in + ci] * dv;
                        }
                    }
                }
                g
            }
        }
    }

    /// Central finite difference of the loss with respect to one flat weight
    /// index; the network is restored bit-exactly afterwards.
    pub fn finite_diff_grad(
        &mut self,
        batch: &Batch,
        layer_index: usize,
        flat_weight_index: usize,
        h: f64,
    ) -> Result<f64> {
        if h <= 0.0 {
            return Err(Error::InvalidArgument("finite-difference step must be > 0".into()));
        }
        if layer_index >= self.layers.len() {
            return Err(Error::IndexOutOfRange {
                what: "layer",
                index: layer_index,
                len: self.layers.len(),
            });
        }
        let len = self.layers[layer_index].weight_count();
        if flat_weight_index >= len {
            return Err(Error::IndexOutOfRange {
                what: "weight",
                index: flat_weight_index,
                len,
            });
        }
        let original = self.layers[layer_index].weights().data()[flat_weight_index];
        let mut eval = |v: f64, net: &mut Self| -> Result<f64> {
            net.layers[layer_index].weights_mut().data_mut()[flat_weight_index] = v;
            let logits = net.forward(batch)?;
            loss(&logits, &batch.labels)
        };
        let plus = eval(original + h, self);
        let minus = eval(original - h, self);
        self.layers[layer_index].weights_mut().data_mut()[flat_weight_index] = original;
        Ok((plus? - minus?) / (2.0 * h))
    }

    /// Scale unit `unit`'s weight column and bias entry in place by `factor`.
    /// The returned token restores the original values bit-exactly.
    pub fn scale_unit(&mut self, layer: usize, unit: usize, factor: f64) -> Result<ScaleToken> {
        if !(0.0..=1.0).contains(&factor) {
            return Err(Error::InvalidArgument(format!(
                "scale factor {factor} outside [0, 1]"
            )));
        }
        self.check_unit(layer, unit)?;
        let original: Vec<f64> = self.layers[layer].unit_weights(unit).collect();
        let bias = self.layers[layer].bias().data()[unit];
        self.set_unit_scaled(layer, unit, &original, bias, factor);
        Ok(ScaleToken {
            layer,
            unit,
            weights: original,
            bias,
        })
    }

    /// Scale a single flat weight index in place by `factor`.
    pub fn scale_weight(&mut self, layer: usize, index: usize, factor: f64) -> Result<WeightToken> {
        if !(0.0..=1.0).contains(&factor) {
            return Err(Error::InvalidArgument(format!(
                "scale factor {factor} outside [0, 1]"
            )));
        }
        if layer >= self.layers.len() {
            return Err(Error::IndexOutOfRange {
                what: "layer",
                index: layer,
                len: self.layers.len(),
            });
        }
        let len = self.layers[layer].weight_count();
        if index >= len {
            return Err(Error::IndexOutOfRange {
                what: "weight",
                index,
                len,
            });
        }
        let value = self.layers[layer].weights().data()[index];
        self.layers[layer].weights_mut().data_mut()[index] = value * factor;
        Ok(WeightToken { layer, index, value })
    }

    fn check_unit(&self, layer: usize, unit: usize) -> Result<()> {
        if layer >= self.layers.len() {
            return Err(Error::IndexOutOfRange {
                what: "layer",
                index: layer,
                len: self.layers.len(),
            });
        }
        let n = self.layers[layer].unit_count();
        if unit >= n {
            return Err(Error::IndexOutOfRange {
                what: "unit",
                index: unit,
                len: n,
            });
        }
        Ok(())
    }

    /// Write `original * factor` into the unit's column and bias. Scaling is
    /// always applied to stored originals so repeated calls cannot drift.
    pub(crate) fn set_unit_scaled(
        &mut self,
        layer: usize,
        unit: usize,
        original: &[f64],
        original_bias: f64,
        factor: f64,
    ) {
        let indices: Vec<usize> = self.layers[layer].unit_weight_indices(unit).collect();
        let w = self.layers[layer].weights_mut().data_mut();
        for (&i, &v) in indices.iter().zip(original) {
            w[i] = v * factor;
        }
        self.layers[layer].bias_mut().data_mut()[unit] = original_bias * factor;
    }

    fn set_unit_exact(&mut self, layer: usize, unit: usize, values: &[f64], bias: f64) {
        let indices: Vec<usize> = self.layers[layer].unit_weight_indices(unit).collect();
        let w = self.layers[layer].weights_mut().data_mut();
        for (&i, &v) in indices.iter().zip(values) {
            w[i] = v;
        }
        self.layers[layer].bias_mut().data_mut()[unit] = bias;
    }

    /// Remaining (unmasked) parameter count under `mask`.
    ///
    /// A masked unit removes its own weight column/filter and bias, and —
    /// because the unit's activation is permanently zero — the next layer's
    /// corresponding input row/slice. This equals the parameter count of the
    /// physically compacted network. Weight-granularity masks remove single
    /// scalars and never cascade.
    pub fn count_params(&self, mask: &PruneMask) -> Result<usize> {
        mask.check(self)?;
        let mut total = 0usize;
        for (l, layer) in self.layers.iter().enumerate() {
            let in_alive = self.alive_inputs(l, mask);
            match (layer, mask.layer(l)) {
                (Layer::Dense(d), LayerMask::Units(m)) => {
                    let out_alive = m.iter().filter(|&&x| !x).count();
                    let n_out = d.weights.shape()[1];
                    let rows = in_alive;
                    total += rows * out_alive + out_alive;
                    debug_assert_eq!(m.len(), n_out);
                }
                (Layer::Dense(d), LayerMask::Weights(m)) => {
                    let n_out = d.weights.shape()[1];
                    let row_alive = self.alive_input_rows(l, mask);
                    let mut kept = 0usize;
                    for (idx, &masked) in m.iter().enumerate() {
                        if !masked && row_alive[idx / n_out] {
                            kept += 1;
                        }
                    }
                    total += kept + d.bias.len();
                }
                (Layer::Conv2d(c), LayerMask::Units(m)) => {
                    let k = c.kernel.shape()[0];
                    let out_alive = m.iter().filter(|&&x| !x).count();
                    total += k * k * in_alive * out_alive + out_alive;
                }
                (Layer::Conv2d(c), LayerMask::Weights(m)) => {
                    let c_out = c.kernel.shape()[3];
                    let c_in = c.kernel.shape()[2];
                    let chan_alive = self.alive_input_channels(l, mask);
                    let mut kept = 0usize;
                    for (idx, &masked) in m.iter().enumerate() {
                        let ci = (idx / c_out) % c_in;
                        if !masked && chan_alive[ci] {
                            kept += 1;
                        }
                    }
                    total += kept + c.bias.len();
                }
            }
        }
        Ok(total)
    }

    /// Multiply–accumulate count of one forward pass under `mask`, for a
    /// single input of the given shape. Masking a hidden unit removes both
    /// its incoming and its outgoing multiply–accumulates.
    pub fn count_flops(&self, mask: &PruneMask, input_shape: &[usize]) -> Result<usize> {
        mask.check(self)?;
        let mut shape = input_shape.to_vec();
        let mut total = 0usize;
        for (l, layer) in self.layers.iter().enumerate() {
            let out_shape = layer.output_shape(l, &shape)?;
            match (layer, mask.layer(l)) {
                (Layer::Dense(d), LayerMask::Units(m)) => {
                    let in_alive = self.alive_inputs(l, mask);
                    let out_alive = m.iter().filter(|&&x| !x).count();
                    total += in_alive * out_alive;
                    debug_assert_eq!(m.len(), d.weights.shape()[1]);
                }
                (Layer::Dense(d), LayerMask::Weights(m)) => {
                    let n_out = d.weights.shape()[1];
                    let row_alive = self.alive_input_rows(l, mask);
                    for (idx, &masked) in m.iter().enumerate() {
                        if !masked && row_alive[idx / n_out] {
                            total += 1;
                        }
                    }
                }
                (Layer::Conv2d(c), LayerMask::Units(m)) => {
                    let k = c.kernel.shape()[0];
                    let in_alive = self.alive_inputs(l, mask);
                    let out_alive = m.iter().filter(|&&x| !x).count();
                    let positions = out_shape[0] * out_shape[1];
                    total += k * k * in_alive * out_alive * positions;
                }
                (Layer::Conv2d(c), LayerMask::Weights(m)) => {
                    let c_out = c.kernel.shape()[3];
                    let c_in = c.kernel.shape()[2];
                    let chan_alive = self.alive_input_channels(l, mask);
                    let positions = out_shape[0] * out_shape[1];
                    for (idx, &masked) in m.iter().enumerate() {
                        let ci = (idx / c_out) % c_in;
                        if !masked && chan_alive[ci] {
                            total += positions;
                        }
                    }
                }
            }
            shape = out_shape;
        }
        Ok(total)
    }

    /// Number of alive scalar inputs feeding layer `l` (cascade-aware for
    /// unit masks on the preceding layer).
    fn alive_inputs(&self, l: usize, mask: &PruneMask) -> usize {
        if l == 0 {
            return match &self.layers[0] {
                Layer::Dense(_) => self.input_dim(),
                Layer::Conv2d(c) => c.kernel.shape()[2],
            };
        }
        let prev_units = self.layers[l - 1].unit_count();
        let prev_alive = match mask.layer(l - 1) {
            LayerMask::Units(m) => m.iter().filter(|&&x| !x).count(),
            LayerMask::Weights(_) => prev_units,
        };
        match (&self.layers[l], &self.layers[l - 1]) {
            // Dense after conv: rows are H*W*C positions; alive channels scale them.
            (Layer::Dense(_), Layer::Conv2d(_)) => {
                let spatial: usize = self.shapes[l][..2].iter().product();
                spatial * prev_alive
            }
            (Layer::Conv2d(_), _) => prev_alive,
            (Layer::Dense(_), Layer::Dense(_)) => prev_alive,
        }
    }

    /// Per-row liveness of a dense layer's input (cascade from the previous
    /// layer's unit mask).
    fn alive_input_rows(&self, l: usize, mask: &PruneMask) -> Vec<bool> {
        let n_in = match &self.layers[l] {
            Layer::Dense(d) => d.weights.shape()[0],
            Layer::Conv2d(_) => unreachable!("rows only meaningful for dense layers"),
        };
        if l == 0 {
            return vec![true; n_in];
        }
        match (mask.layer(l - 1), &self.layers[l - 1]) {
            (LayerMask::Units(m), Layer::Dense(_)) => m.iter().map(|&x| !x).collect(),
            (LayerMask::Units(m), Layer::Conv2d(_)) => {
                // Flatten order is (h, w, channel); channel is the fastest axis.
                let c = m.len();
                (0..n_in).map(|i| !m[i % c]).collect()
            }
            (LayerMask::Weights(_), _) => vec![true; n_in],
        }
    }

    /// Per-channel liveness of a conv layer's input.
    fn alive_input_channels(&self, l: usize, mask: &PruneMask) -> Vec<bool> {
        let c_in = match &self.layers[l] {
            Layer::Conv2d(c) => c.kernel.shape()[2],
            Layer::Dense(_) => unreachable!("channels only meaningful for conv layers"),
        };
        if l == 0 {
            return vec![true; c_in];
        }
        match mask.layer(l - 1) {
            LayerMask::Units(m) => m.iter().map(|&x| !x).collect(),
            LayerMask::Weights(_) => vec![true; c_in],
        }
    }
}

/// Mean softmax cross-entropy over the batch. Zero only in the limit of
/// perfect confidence.
pub fn loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let b = logits.shape()[0];
    let classes = logits.row_len();
    if b != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} logit rows vs {} labels",
            b,
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (row, &label) in (0..b).map(|r| logits.row(r)).zip(labels) {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        total += log_sum_exp(row) - row[label];
    }
    Ok(total / b as f64)
}

/// dL/d(logits) of the mean cross-entropy: (softmax - onehot) / B.
pub(crate) fn output_delta(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let b = logits.shape()[0];
    let classes = logits.row_len();
    if b != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} logit rows vs {} labels",
            b,
            labels.len()
        )));
    }
    let inv_b = 1.0 / b as f64;
    let mut out = vec![0.0; b * classes];
    for (r, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let row = logits.row(r);
        let lse = log_sum_exp(row);
        let o = &mut out[r * classes..(r + 1) * classes];
        for (j, (&z, slot)) in row.iter().zip(o.iter_mut()).enumerate() {
            let p = (z - lse).exp();
            *slot = (p - if j == label { 1.0 } else { 0.0 }) * inv_b;
        }
    }
    Tensor::new(vec![b, classes], out)
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln()
}

fn apply_activation(act: Activation, pre: &Tensor) -> Tensor {
    match act {
        Activation::Identity | Activation::Softmax => pre.clone(),
        Activation::Relu => {
            let data = pre.data().iter().map(|&z| if z > 0.0 { z } else { 0.0 }).collect();
            Tensor::new(pre.shape().to_vec(), data).unwrap()
        }
    }
}

fn apply_activation_derivative(act: Activation, pre: &Tensor, delta: &mut Tensor) {
    if let Activation::Relu = act {
        for (d, &z) in delta.data_mut().iter_mut().zip(pre.data()) {
            if z <= 0.0 {
                *d = 0.0;
            }
        }
    }
}
