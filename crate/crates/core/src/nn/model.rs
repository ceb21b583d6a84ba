use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor2;
use crate::error::{Error, Result};

/// One dense layer: `y = x · weight + bias`, with `weight` of shape
/// `(inputs, outputs)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Tensor2,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Layer {
            weight: Tensor2::zeros(inputs, outputs),
            bias: vec![0.0; outputs],
        }
    }

    /// He-uniform weights, zero bias.
    pub fn he_uniform<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = (6.0 / inputs.max(1) as f64).sqrt();
        let data = (0..inputs * outputs)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Layer {
            weight: Tensor2::from_vec(inputs, outputs, data).expect("sized by construction"),
            bias: vec![0.0; outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }

    fn apply(&self, x: &Tensor2, index: usize) -> Result<Tensor2> {
        if x.cols() != self.inputs() {
            return Err(Error::shape(Some(index), format!("input width {}", self.inputs()), x.cols()));
        }
        let mut out = x.matmul(&self.weight)?;
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(&self.bias) {
                *o += b;
            }
        }
        Ok(out)
    }
}

/// A feed-forward model split into an extractor (`layers[..split_index]`) and
/// a classifier (`layers[split_index..]`). Hidden layers use ReLU; the last
/// layer is linear. The extractor's output is therefore the post-ReLU
/// activation feeding the first classifier layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    layers: Vec<Layer>,
    split_index: usize,
}

/// A gradient with the same shape as the [`ModelParams`] it belongs to.
pub type Gradients = ModelParams;

/// Activations recorded by [`ModelParams::forward_trace`]; `inputs[i]` is what
/// layer `start + i` received.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    start: usize,
    inputs: Vec<Tensor2>,
    pre_activations: Vec<Tensor2>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Tensor2 {
        self.pre_activations.last().expect("trace has at least one layer")
    }

    /// Pre-activation outputs of each evaluated layer, in order.
    pub fn pre_activations(&self) -> &[Tensor2] {
        &self.pre_activations
    }
}

/// Result of a backward pass.
#[derive(Debug, Clone)]
pub struct Backprop {
    pub grads: Gradients,
    /// Gradient with respect to the tensor fed into the first evaluated layer.
    pub grad_input: Tensor2,
}

impl ModelParams {
    pub fn new(layers: Vec<Layer>, split_index: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Parameter("model needs at least one layer".into()));
        }
        if split_index > layers.len() {
            return Err(Error::Parameter(format!(
                "split index {split_index} exceeds layer count {}",
                layers.len()
            )));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::shape(
                    Some(i + 1),
                    format!("input width {}", pair[0].outputs()),
                    pair[1].inputs(),
                ));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.outputs() {
                return Err(Error::shape(Some(i), format!("bias length {}", l.outputs()), l.bias.len()));
            }
        }
        Ok(ModelParams { layers, split_index })
    }

    /// He-initialized MLP with the widths `[input, hidden..., output]`.
    pub fn mlp<R: Rng + ?Sized>(widths: &[usize], split_index: usize, rng: &mut R) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Parameter("an MLP needs at least input and output widths".into()));
        }
        let layers = widths
            .windows(2)
            .map(|w| Layer::he_uniform(w[0], w[1], rng))
            .collect();
        ModelParams::new(layers, split_index)
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            layers: self.layers.iter().map(|l| Layer::zeros(l.inputs(), l.outputs())).collect(),
            split_index: self.split_index,
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn split_index(&self) -> usize {
        self.split_index
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs()
    }

    /// Width of the features entering the classifier part.
    pub fn classifier_input_width(&self) -> usize {
        match self.layers.get(self.split_index) {
            Some(l) => l.inputs(),
            None => self.output_width(),
        }
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, Layer::outputs)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.data().len() + l.bias.len()).sum()
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.split_index == other.split_index
            && self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.shape() == b.weight.shape())
    }

    pub(crate) fn check_same_shape(&self, other: &ModelParams) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::shape(None, format!("{} layers", self.layers.len()), other.layers.len()));
        }
        for (i, (a, b)) in self.layers.iter().zip(&other.layers).enumerate() {
            if a.weight.shape() != b.weight.shape() {
                return Err(Error::shape(
                    Some(i),
                    format!("{:?}", a.weight.shape()),
                    format!("{:?}", b.weight.shape()),
                ));
            }
        }
        if self.split_index != other.split_index {
            return Err(Error::shape(None, format!("split {}", self.split_index), other.split_index));
        }
        Ok(())
    }

    /// Parameter tensors in a fixed order: layer 0 weight, layer 0 bias,
    /// layer 1 weight, ...
    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.data(), l.bias.as_slice()])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.data_mut(), l.bias.as_mut_slice()])
    }

    /// All parameters flattened in [`tensors`](Self::tensors) order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().flatten().copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().flatten().all(|v| v.is_finite())
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, s: f64, other: &ModelParams) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += s * y;
            }
        }
        Ok(())
    }

    fn first_layer(&self, from_classifier_only: bool) -> usize {
        if from_classifier_only {
            self.split_index
        } else {
            0
        }
    }

    fn check_input(&self, batch: &Tensor2, start: usize) -> Result<()> {
        if start >= self.layers.len() {
            return Err(Error::Parameter("model has an empty classifier part".into()));
        }
        let want = self.layers[start].inputs();
        if batch.cols() != want {
            return Err(Error::shape(Some(start), format!("input width {want}"), batch.cols()));
        }
        Ok(())
    }

    /// Logits for `batch`. With `from_classifier_only`, `batch` holds
    /// extractor-space features and only the classifier layers run.
    pub fn forward(&self, batch: &Tensor2, from_classifier_only: bool) -> Result<Tensor2> {
        let start = self.first_layer(from_classifier_only);
        self.check_input(batch, start)?;
        let last = self.layers.len() - 1;
        let mut x = self.layers[start].apply(batch, start)?;
        for i in start + 1..=last {
            relu_in_place(&mut x);
            x = self.layers[i].apply(&x, i)?;
        }
        Ok(x)
    }

    /// Extractor output (the classifier's input) for `batch`.
    pub fn extract_features(&self, batch: &Tensor2) -> Result<Tensor2> {
        self.check_input(batch, 0)?;
        let mut x = batch.clone();
        for i in 0..self.split_index {
            x = self.layers[i].apply(&x, i)?;
            relu_in_place(&mut x);
        }
        Ok(x)
    }

    pub fn forward_trace(&self, batch: &Tensor2, from_classifier_only: bool) -> Result<ForwardTrace> {
        let start = self.first_layer(from_classifier_only);
        self.check_input(batch, start)?;
        let mut inputs = Vec::with_capacity(self.layers.len() - start);
        let mut pre = Vec::with_capacity(self.layers.len() - start);
        let mut x = batch.clone();
        for i in start..self.layers.len() {
            let z = self.layers[i].apply(&x, i)?;
            inputs.push(x);
            x = z.clone();
            if i + 1 < self.layers.len() {
                relu_in_place(&mut x);
            }
            pre.push(z);
        }
        Ok(ForwardTrace {
            start,
            inputs,
            pre_activations: pre,
        })
    }

    /// Backpropagate `grad_logits` through a recorded forward pass. Layers not
    /// evaluated by the trace receive zero gradients.
    pub fn backward_trace(&self, trace: &ForwardTrace, grad_logits: &Tensor2) -> Result<Backprop> {
        let logits = trace.logits();
        if logits.shape() != grad_logits.shape() {
            return Err(Error::shape(
                Some(self.layers.len() - 1),
                format!("{:?}", logits.shape()),
                format!("{:?}", grad_logits.shape()),
            ));
        }
        let mut grads = self.zeros_like();
        let mut delta = grad_logits.clone();
        for (offset, i) in (trace.start..self.layers.len()).enumerate().rev() {
            if i + 1 < self.layers.len() {
                // delta currently holds dL/d(relu output)
                let z = &trace.pre_activations[offset];
                for (d, &zv) in delta.data_mut().iter_mut().zip(z.data()) {
                    if zv <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let input = &trace.inputs[offset];
            let layer = &self.layers[i];
            grads.layers[i].weight = input.t_matmul(&delta)?;
            grads.layers[i].bias = delta.column_sums();
            delta = delta.matmul_t(&layer.weight)?;
        }
        Ok(Backprop {
            grads,
            grad_input: delta,
        })
    }

    /// Recompute the forward pass and backpropagate `grad_logits`.
    pub fn backward(&self, batch: &Tensor2, grad_logits: &Tensor2, from_classifier_only: bool) -> Result<Backprop> {
        let trace = self.forward_trace(batch, from_classifier_only)?;
        self.backward_trace(&trace, grad_logits)
    }
}

fn relu_in_place(x: &mut Tensor2) {
    for v in x.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn hand_net() -> ModelParams {
        // 2 -> 2 (ReLU) -> 2
        let l0 = Layer {
            weight: Tensor2::from_rows(&[vec![1.0, -2.0], vec![0.5, 1.0]]).unwrap(),
            bias: vec![0.1, -0.3],
        };
        let l1 = Layer {
            weight: Tensor2::from_rows(&[vec![2.0, -1.0], vec![1.5, 0.25]]).unwrap(),
            bias: vec![0.0, 0.5],
        };
        ModelParams::new(vec![l0, l1], 1).unwrap()
    }

    /// Scalar walk over the same weights, written without any tensor helpers.
    fn scalar_forward(m: &ModelParams, x: &[f64]) -> Vec<f64> {
        let mut act = x.to_vec();
        let n = m.layers().len();
        for (li, l) in m.layers().iter().enumerate() {
            let mut next = vec![0.0; l.outputs()];
            for j in 0..l.outputs() {
                let mut s = l.bias[j];
                for i in 0..l.inputs() {
                    s += act[i] * l.weight.get(i, j);
                }
                next[j] = if li + 1 < n { s.max(0.0) } else { s };
            }
            act = next;
        }
        act
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let m = ModelParams::new(vec![Layer::zeros(3, 4), Layer::zeros(4, 2)], 1).unwrap();
        let x = Tensor2::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.5, 0.5]]).unwrap();
        let y = m.forward(&x, false).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert_eq!(y.shape(), (2, 2));
    }

    #[test]
    fn identity_layer_is_identity() {
        let m = ModelParams::new(
            vec![Layer {
                weight: Tensor2::identity(3),
                bias: vec![0.0; 3],
            }],
            0,
        )
        .unwrap();
        let x = Tensor2::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.25, 7.0, -0.5]]).unwrap();
        assert_eq!(m.forward(&x, false).unwrap(), x);
    }

    #[test]
    fn hand_unrolled_forward() {
        let m = hand_net();
        let x = Tensor2::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        let y = m.forward(&x, false).unwrap();
        for r in 0..2 {
            let want = scalar_forward(&m, x.row(r));
            for (a, b) in y.row(r).iter().zip(&want) {
                assert!((a - b).abs() < 1e-15, "{a} vs {b}");
            }
        }
        // Row 0: hidden = relu([1+1+0.1, -2+2-0.3]) = [2.1, 0]
        assert!((y.get(0, 0) - 4.2).abs() < 1e-12);
        assert!((y.get(0, 1) - (-2.1 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn classifier_only_path() {
        let m = hand_net();
        let feats = Tensor2::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let y = m.forward(&feats, true).unwrap();
        assert_eq!(y.row(0), &[3.5, -0.25]);
        // Full path equals classifier applied to extracted features.
        let x = Tensor2::from_rows(&[vec![0.3, -0.7], vec![2.0, 1.0]]).unwrap();
        let via_features = m.forward(&m.extract_features(&x).unwrap(), true).unwrap();
        assert_eq!(via_features, m.forward(&x, false).unwrap());
    }

    #[test]
    fn shape_error_names_layer() {
        let m = hand_net();
        let err = m.forward(&Tensor2::zeros(1, 3), false).unwrap_err();
        assert!(matches!(err, Error::Shape { layer: Some(0), .. }), "{err}");
        let err = m.forward(&Tensor2::zeros(1, 3), true).unwrap_err();
        assert!(matches!(err, Error::Shape { layer: Some(1), .. }), "{err}");
        let bad = ModelParams::new(vec![Layer::zeros(2, 3), Layer::zeros(4, 1)], 1).unwrap_err();
        assert!(matches!(bad, Error::Shape { layer: Some(1), .. }));
        assert!(ModelParams::new(vec![Layer::zeros(2, 3)], 2).is_err());
    }

    #[test]
    fn forward_is_pure() {
        let mut rng = seed::rng(3);
        let m = ModelParams::mlp(&[5, 7, 4, 3], 2, &mut rng).unwrap();
        let x = Tensor2::from_vec(4, 5, (0..20).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let a = m.forward(&x, false).unwrap();
        let b = m.forward(&x, false).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(m.forward_trace(&x, false).unwrap().logits(), &a);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let mut rng = seed::rng(5);
        let m = ModelParams::mlp(&[3, 4, 2], 1, &mut rng).unwrap();
        let x = Tensor2::from_vec(2, 3, vec![0.1, 0.2, 0.3, -0.4, 0.5, -0.6]).unwrap();
        let bp = m.backward(&x, &Tensor2::zeros(2, 2), false).unwrap();
        assert!(bp.grads.flatten().iter().all(|&g| g == 0.0));
        assert!(bp.grad_input.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn linear_sum_of_logits_closed_form() {
        let mut rng = seed::rng(11);
        let m = ModelParams::mlp(&[3, 2], 0, &mut rng).unwrap();
        let x = Tensor2::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 4.0]]).unwrap();
        let ones = Tensor2::from_vec(2, 2, vec![1.0; 4]).unwrap();
        let bp = m.backward(&x, &ones, false).unwrap();
        let want_w = x.t_matmul(&ones).unwrap();
        assert_eq!(bp.grads.layers()[0].weight, want_w);
        assert_eq!(bp.grads.layers()[0].bias, vec![2.0, 2.0]);
    }

    #[test]
    fn classifier_only_backward_leaves_extractor_zero() {
        let mut rng = seed::rng(13);
        let m = ModelParams::mlp(&[3, 4, 2], 1, &mut rng).unwrap();
        let feats = Tensor2::from_rows(&[vec![0.5, 1.0, 0.0, 2.0]]).unwrap();
        let g = Tensor2::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let bp = m.backward(&feats, &g, true).unwrap();
        assert!(bp.grads.layers()[0].weight.data().iter().all(|&v| v == 0.0));
        assert!(bp.grads.layers()[1].weight.data().iter().any(|&v| v != 0.0));
        assert_eq!(bp.grad_input.shape(), (1, 4));
    }

    #[test]
    fn backward_rejects_wrong_grad_shape() {
        let m = hand_net();
        let x = Tensor2::zeros(2, 2);
        assert!(m.backward(&x, &Tensor2::zeros(3, 2), false).is_err());
    }
}
