//! Dense feedforward networks over a flat parameter vector.
//!
//! Parameters are laid out layer by layer; each layer stores its weight
//! matrix row-major as `fan_in x fan_out` followed by its `fan_out` biases.
//! A batch of inputs is a row-per-example matrix, so a layer computes
//! `act(x . W + b)`.

use std::ops::Range;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub(crate) fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Tanh => z.mapv_inplace(f64::tanh),
            Activation::Identity => {}
        }
    }

    /// Multiply `grad` by the derivative, expressed through the activation output.
    fn backprop(self, out: &Array2<f64>, grad: &mut Array2<f64>) {
        match self {
            Activation::Relu => Zip::from(grad).and(out).for_each(|g, &a| {
                if a <= 0.0 {
                    *g = 0.0;
                }
            }),
            Activation::Tanh => Zip::from(grad).and(out).for_each(|g, &a| *g *= 1.0 - a * a),
            Activation::Identity => {}
        }
    }

    fn init_gain(self) -> f64 {
        match self {
            Activation::Relu => 2.0,
            Activation::Tanh | Activation::Identity => 1.0,
        }
    }
}

/// Architecture of a dense network: layer widths from input to output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub widths: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

/// One affine layer's slice of the flat parameter vector.
#[derive(Clone, Debug)]
pub struct Layer {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Range<usize>,
    pub biases: Range<usize>,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(widths: Vec<usize>, hidden_activation: Activation) -> Result<Self> {
        let spec = LayerSpec { widths, hidden_activation, output_activation: Activation::Identity };
        spec.validate()?;
        Ok(spec)
    }

    /// A single affine map with no hidden layer.
    pub fn linear(input: usize, output: usize) -> Result<Self> {
        Self::new(vec![input, output], Activation::Identity)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Spec(format!("need at least an input and an output width, got {:?}", self.widths)));
        }
        if let Some(i) = self.widths.iter().position(|&w| w == 0) {
            return Err(Error::Spec(format!("width {i} is zero in {:?}", self.widths)));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("validated spec has widths")
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// The layers after the first one, as a network of their own; `None`
    /// for a single affine layer.
    pub fn tail(&self) -> Option<LayerSpec> {
        (self.widths.len() > 2).then(|| LayerSpec {
            widths: self.widths[1..].to_vec(),
            hidden_activation: self.hidden_activation,
            output_activation: self.output_activation,
        })
    }

    pub fn layers(&self) -> Vec<Layer> {
        let n = self.widths.len() - 1;
        let mut offset = 0;
        self.widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let weights = offset..offset + fan_in * fan_out;
                let biases = weights.end..weights.end + fan_out;
                offset = biases.end;
                let activation = if i + 1 == n { self.output_activation } else { self.hidden_activation };
                Layer { fan_in, fan_out, weights, biases, activation }
            })
            .collect()
    }
}

fn check_params(spec: &LayerSpec, params: &[f64]) -> Result<()> {
    if params.len() != spec.param_count() {
        return Err(Error::Shape(format!(
            "parameter vector has {} entries, architecture {:?} needs {}",
            params.len(),
            spec.widths,
            spec.param_count()
        )));
    }
    Ok(())
}

fn check_input(spec: &LayerSpec, x: &ArrayView2<f64>) -> Result<()> {
    if x.ncols() != spec.input_width() {
        return Err(Error::Shape(format!("input has {} columns, network expects {}", x.ncols(), spec.input_width())));
    }
    Ok(())
}

pub(crate) fn weight_view<'a>(layer: &Layer, params: &'a [f64]) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((layer.fan_in, layer.fan_out), &params[layer.weights.clone()]).expect("layer ranges match the layout")
}

pub(crate) fn bias_view<'a>(layer: &Layer, params: &'a [f64]) -> ArrayView1<'a, f64> {
    ArrayView1::from(&params[layer.biases.clone()])
}

fn affine(layer: &Layer, params: &[f64], x: ArrayView2<f64>) -> Array2<f64> {
    let mut z = x.dot(&weight_view(layer, params));
    z += &bias_view(layer, params);
    layer.activation.apply(&mut z);
    z
}

/// Forward pass of the architecture `spec` with an explicit parameter vector.
///
/// This is the hot path of candidate evaluation: no network object is built.
pub fn forward_params(spec: &LayerSpec, params: &[f64], x: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_params(spec, params)?;
    check_input(spec, &x)?;
    let layers = spec.layers();
    let mut out = affine(&layers[0], params, x);
    for layer in &layers[1..] {
        out = affine(layer, params, out.view());
    }
    Ok(out)
}

/// Reverse-mode pass given the gradient of the loss with respect to the
/// network output. Returns the parameter gradient and, when requested, the
/// gradient with respect to the input rows.
pub fn backprop(
    spec: &LayerSpec,
    params: &[f64],
    x: ArrayView2<f64>,
    output_grad: Array2<f64>,
    want_input_grad: bool,
) -> Result<(Vec<f64>, Option<Array2<f64>>)> {
    check_params(spec, params)?;
    check_input(spec, &x)?;
    let layers = spec.layers();
    let mut outs: Vec<Array2<f64>> = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let input = if i == 0 { x } else { outs[i - 1].view() };
        outs.push(affine(layer, params, input));
    }
    let last = outs.last().expect("at least one layer");
    if output_grad.dim() != last.dim() {
        return Err(Error::Shape(format!("output gradient is {:?}, network output is {:?}", output_grad.dim(), last.dim())));
    }

    let mut grad = vec![0.0; params.len()];
    let mut upstream = output_grad;
    for i in (0..layers.len()).rev() {
        let layer = &layers[i];
        layer.activation.backprop(&outs[i], &mut upstream);
        let input = if i == 0 { x } else { outs[i - 1].view() };
        let dw = input.t().dot(&upstream);
        let db = upstream.sum_axis(Axis(0));
        for (g, v) in grad[layer.weights.clone()].iter_mut().zip(dw.iter()) {
            *g = *v;
        }
        for (g, v) in grad[layer.biases.clone()].iter_mut().zip(db.iter()) {
            *g = *v;
        }
        if i > 0 || want_input_grad {
            upstream = upstream.dot(&weight_view(layer, params).t());
        }
    }
    Ok((grad, want_input_grad.then_some(upstream)))
}

/// A dense network: architecture plus its flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    spec: LayerSpec,
    params: Vec<f64>,
}

impl DenseNet {
    /// Fan-in scaled Gaussian weights and zero biases, deterministic in `seed`.
    pub fn init(spec: LayerSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::stream(seed, &[]);
        let mut params = vec![0.0; spec.param_count()];
        for layer in spec.layers() {
            let scale = (layer.activation.init_gain() / layer.fan_in as f64).sqrt();
            for w in &mut params[layer.weights.clone()] {
                let z: f64 = StandardNormal.sample(&mut rng);
                *w = scale * z;
            }
        }
        Ok(DenseNet { spec, params })
    }

    pub fn zeros(spec: LayerSpec) -> Result<Self> {
        spec.validate()?;
        let params = vec![0.0; spec.param_count()];
        Ok(DenseNet { spec, params })
    }

    pub fn from_params(spec: LayerSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        check_params(&spec, &params)?;
        Ok(DenseNet { spec, params })
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn flatten_params(&self) -> Vec<f64> {
        self.params.clone()
    }

    pub fn set_params(&mut self, v: &[f64]) -> Result<()> {
        check_params(&self.spec, v)?;
        self.params.copy_from_slice(v);
        Ok(())
    }

    pub fn weights(&self, layer: usize) -> ArrayView2<'_, f64> {
        weight_view(&self.spec.layers()[layer], &self.params)
    }

    pub fn biases(&self, layer: usize) -> ArrayView1<'_, f64> {
        bias_view(&self.spec.layers()[layer], &self.params)
    }

    /// Mutable access to one layer's weights (`fan_in x fan_out`) and biases.
    pub fn layer_mut(&mut self, layer: usize) -> (ndarray::ArrayViewMut2<'_, f64>, ndarray::ArrayViewMut1<'_, f64>) {
        let l = &self.spec.layers()[layer];
        let (head, tail) = self.params.split_at_mut(l.biases.start);
        let w =
            ndarray::ArrayViewMut2::from_shape((l.fan_in, l.fan_out), &mut head[l.weights.clone()]).expect("layer ranges match the layout");
        let b = ndarray::ArrayViewMut1::from(&mut tail[..l.fan_out]);
        (w, b)
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        forward_params(&self.spec, &self.params, x)
    }

    pub fn forward_batch(&self, batch: &Batch) -> Result<Array2<f64>> {
        self.forward(batch.inputs.view())
    }

    /// Mean loss and its exact gradient with respect to the parameters.
    pub fn loss_and_gradient(&self, x: ArrayView2<f64>, loss: Loss<'_>) -> Result<(f64, Vec<f64>)> {
        let out = self.forward(x)?;
        let (value, dout) = loss.value_and_grad(out.view())?;
        let (grad, _) = backprop(&self.spec, &self.params, x, dout, false)?;
        Ok((value, grad))
    }

    pub fn backward(&self, x: ArrayView2<f64>, loss: Loss<'_>) -> Result<Vec<f64>> {
        self.loss_and_gradient(x, loss).map(|(_, g)| g)
    }

    pub fn sgd_step(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != self.params.len() {
            return Err(Error::Shape(format!("gradient has {} entries, network has {}", grad.len(), self.params.len())));
        }
        for (p, g) in self.params.iter_mut().zip(grad) {
            *p -= lr * g;
        }
        Ok(())
    }
}

/// Rows of inputs with optional global class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub labels: Option<Vec<usize>>,
}

impl Batch {
    pub fn unlabeled(inputs: Array2<f64>) -> Self {
        Batch { inputs, labels: None }
    }

    pub fn labeled(inputs: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::Shape(format!("{} input rows but {} labels", inputs.nrows(), labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Label { label, classes: num_classes });
        }
        Ok(Batch { inputs, labels: Some(labels) })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }
}

/// Training objectives with a closed-form output gradient.
#[derive(Clone, Copy, Debug)]
pub enum Loss<'a> {
    /// Labels index logit columns.
    CrossEntropy(&'a [usize]),
    Mse(ArrayView2<'a, f64>),
}

impl Loss<'_> {
    pub fn value(&self, out: ArrayView2<f64>) -> Result<f64> {
        match *self {
            Loss::CrossEntropy(labels) => softmax_cross_entropy(out, labels),
            Loss::Mse(target) => mse(out, target),
        }
    }

    pub fn value_and_grad(&self, out: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
        match *self {
            Loss::CrossEntropy(labels) => {
                let value = softmax_cross_entropy(out, labels)?;
                let mut grad = softmax(out);
                let n = out.nrows() as f64;
                for (mut row, &label) in grad.rows_mut().into_iter().zip(labels) {
                    row[label] -= 1.0;
                    row.mapv_inplace(|v| v / n);
                }
                Ok((value, grad))
            }
            Loss::Mse(target) => {
                let value = mse(out, target)?;
                let scale = 2.0 / out.len() as f64;
                let grad = Zip::from(&out).and(&target).map_collect(|&p, &t| scale * (p - t));
                Ok((value, grad))
            }
        }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn check_labels(logits: &ArrayView2<f64>, labels: &[usize]) -> Result<()> {
    if logits.nrows() == 0 {
        return Err(Error::Empty("cross-entropy over an empty batch".into()));
    }
    if logits.nrows() != labels.len() {
        return Err(Error::Shape(format!("{} logit rows but {} labels", logits.nrows(), labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= logits.ncols()) {
        return Err(Error::Label { label, classes: logits.ncols() });
    }
    Ok(())
}

/// Mean negative log-likelihood of `labels` under the row softmax of `logits`.
pub fn softmax_cross_entropy(logits: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    check_labels(&logits, labels)?;
    let total: f64 = logits
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &label)| {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.fold(0.0, |s, &v| s + (v - max).exp()).ln();
            lse - row[label]
        })
        .sum();
    Ok(total / labels.len() as f64)
}

/// Mean over all entries of the squared difference.
pub fn mse(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", pred.dim(), target.dim())));
    }
    if pred.is_empty() {
        return Err(Error::Empty("mean squared error over an empty matrix".into()));
    }
    let sum = Zip::from(&pred).and(&target).fold(0.0, |acc, &p, &t| acc + (p - t) * (p - t));
    Ok(sum / pred.len() as f64)
}
