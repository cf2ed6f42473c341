//! Dense layers with hand-derived batched gradients, the losses used by the
//! pipeline, and Adam.
//!
//! Batches are row-major: one item per row.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Probabilities below this are clamped before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Relu,
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `out x in`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>, activation: Activation) -> Result<Self> {
        check_dim("layer bias", weights.nrows(), bias.len())?;
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("layer parameters must be finite".into()));
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    /// Fan-in scaled uniform init, `U(-1/sqrt(in), 1/sqrt(in))` for weights and bias.
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, activation: Activation, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weights = Array2::from_shape_fn((outputs, inputs), |_| rng.random_range(-bound..=bound));
        let bias = Array1::from_shape_fn(outputs, |_| rng.random_range(-bound..=bound));
        Self {
            weights,
            bias,
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerGrad {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Feed-forward stack of dense layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

/// Activations recorded by [`Mlp::forward`]: `values[0]` is the input and
/// `values[i + 1]` the output of layer `i`.
#[derive(Debug, Clone)]
pub struct MlpTape {
    pub values: Vec<Array2<f64>>,
}

impl MlpTape {
    pub fn output(&self) -> &Array2<f64> {
        self.values.last().expect("tape holds the input")
    }
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidParameter("network needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            check_dim("layer chain", w[0].outputs(), w[1].inputs())?;
        }
        if layers[..layers.len() - 1]
            .iter()
            .any(|l| l.activation == Activation::Softmax)
        {
            return Err(Error::InvalidParameter(
                "softmax is only allowed on the last layer".into(),
            ));
        }
        Ok(Self { layers })
    }

    /// Hidden layers use ReLU; the last layer uses `output`.
    pub fn init<R: Rng + ?Sized>(
        inputs: usize,
        hidden: &[usize],
        outputs: usize,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut width = inputs;
        for &h in hidden {
            layers.push(DenseLayer::init(width, h, Activation::Relu, rng));
            width = h;
        }
        layers.push(DenseLayer::init(width, outputs, output, rng));
        Self { layers }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::outputs)
    }

    pub fn forward(&self, input: ArrayView2<f64>) -> Result<MlpTape> {
        check_dim("network input width", self.inputs(), input.ncols())?;
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(input.to_owned());
        for layer in &self.layers {
            let prev = values.last().expect("nonempty");
            let mut out = prev.dot(&layer.weights.t()) + &layer.bias;
            match layer.activation {
                Activation::Linear => {}
                Activation::Relu => out.mapv_inplace(|v| v.max(0.0)),
                Activation::Softmax => softmax_rows(&mut out),
            }
            values.push(out);
        }
        Ok(MlpTape { values })
    }

    /// Backpropagates a gradient given with respect to the last layer's
    /// pre-activation (logits). Returns layer gradients and the input gradient.
    pub fn backward_from_logits(&self, tape: &MlpTape, dlogits: Array2<f64>) -> (Vec<LayerGrad>, Array2<f64>) {
        let mut grads: Vec<LayerGrad> = Vec::with_capacity(self.layers.len());
        let mut delta = dlogits;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if i + 1 < self.layers.len() && layer.activation == Activation::Relu {
                // ReLU mask from the stored output.
                delta.zip_mut_with(&tape.values[i + 1], |d, &y| {
                    if y <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            let input = &tape.values[i];
            grads.push(LayerGrad {
                weights: delta.t().dot(input).as_standard_layout().into_owned(),
                bias: delta.sum_axis(Axis(0)),
            });
            delta = delta.dot(&layer.weights);
        }
        grads.reverse();
        (grads, delta)
    }

    /// Backpropagates a gradient with respect to the network output.
    pub fn backward(&self, tape: &MlpTape, doutput: ArrayView2<f64>) -> (Vec<LayerGrad>, Array2<f64>) {
        let last = self.layers.last().expect("nonempty");
        let out = tape.output();
        let dlogits = match last.activation {
            Activation::Linear => doutput.to_owned(),
            Activation::Relu => {
                let mut d = doutput.to_owned();
                d.zip_mut_with(out, |d, &y| {
                    if y <= 0.0 {
                        *d = 0.0;
                    }
                });
                d
            }
            Activation::Softmax => {
                let mut d = Array2::zeros(out.raw_dim());
                for ((mut drow, prow), grow) in d.rows_mut().into_iter().zip(out.rows()).zip(doutput.rows()) {
                    let inner: f64 = prow.iter().zip(grow.iter()).map(|(p, g)| p * g).sum();
                    for ((dv, p), g) in drow.iter_mut().zip(prow.iter()).zip(grow.iter()) {
                        *dv = p * (g - inner);
                    }
                }
                d
            }
        };
        self.backward_from_logits(tape, dlogits)
    }

    pub fn zero_grads(&self) -> Vec<LayerGrad> {
        self.layers
            .iter()
            .map(|l| LayerGrad {
                weights: Array2::zeros(l.weights.raw_dim()),
                bias: Array1::zeros(l.bias.len()),
            })
            .collect()
    }
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - top).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
}

/// Batch mean of `-log p[label]`, with probabilities clamped at [`PROB_FLOOR`].
pub fn cross_entropy_loss(probs: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    check_dim("label count", probs.nrows(), labels.len())?;
    let mut total = 0.0;
    let mut clamped = 0usize;
    for (row, &label) in probs.rows().into_iter().zip(labels) {
        if label >= row.len() {
            return Err(Error::InvalidParameter(format!(
                "label {label} out of {} classes",
                row.len()
            )));
        }
        let p = row[label];
        if p < PROB_FLOOR {
            clamped += 1;
        }
        total -= p.max(PROB_FLOOR).ln();
    }
    if clamped > 0 {
        log::debug!("{clamped} label probabilities clamped at {PROB_FLOOR:e}");
    }
    Ok(total / labels.len() as f64)
}

/// Gradient of [`cross_entropy_loss`] with respect to the probabilities.
pub fn cross_entropy_grad(probs: ArrayView2<f64>, labels: &[usize]) -> Array2<f64> {
    let n = labels.len() as f64;
    let mut g = Array2::zeros(probs.raw_dim());
    for (i, &label) in labels.iter().enumerate() {
        g[[i, label]] = -1.0 / (probs[[i, label]].max(PROB_FLOOR) * n);
    }
    g
}

/// Gradient of softmax followed by cross-entropy with respect to the logits.
pub fn softmax_cross_entropy_logit_grad(probs: ArrayView2<f64>, labels: &[usize]) -> Array2<f64> {
    let n = labels.len() as f64;
    let mut g = probs.mapv(|p| p / n);
    for (i, &label) in labels.iter().enumerate() {
        g[[i, label]] -= 1.0 / n;
    }
    g
}

/// Batch mean of squared Euclidean distances.
pub fn mse_loss(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<f64> {
    check_dim("prediction rows", target.nrows(), pred.nrows())?;
    check_dim("prediction width", target.ncols(), pred.ncols())?;
    let sq: f64 = pred.iter().zip(target.iter()).map(|(p, t)| (p - t).powi(2)).sum();
    Ok(sq / pred.nrows() as f64)
}

pub fn mse_grad(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Array2<f64> {
    (&pred - &target) * (2.0 / pred.nrows() as f64)
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Batch mean over items of summed binary cross-entropy on logits; targets in {0, 1}.
pub fn bce_logits_loss(logits: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<f64> {
    check_dim("target rows", logits.nrows(), targets.nrows())?;
    check_dim("target width", logits.ncols(), targets.ncols())?;
    let total: f64 = logits
        .iter()
        .zip(targets.iter())
        .map(|(&z, &y)| softplus(z) - y * z)
        .sum();
    Ok(total / logits.nrows() as f64)
}

pub fn bce_logits_grad(logits: ArrayView2<f64>, targets: ArrayView2<f64>) -> Array2<f64> {
    let n = logits.nrows() as f64;
    let mut g = logits.mapv(sigmoid);
    g -= &targets;
    g / n
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }
}

/// One bias-corrected Adam step.
pub fn adam_update(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    check_dim("gradient length", params.len(), grads.len())?;
    check_dim("optimizer state length", params.len(), state.m.len())?;
    state.step += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.step);
    let c2 = 1.0 - cfg.beta2.powi(state.step);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        params[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn forward_examples() {
        let id = DenseLayer::new(Array2::eye(3), Array1::zeros(3), Activation::Linear).unwrap();
        let net = Mlp::new(vec![id]).unwrap();
        let x = array![[1.5, -2.0, 0.25]];
        assert_eq!(net.forward(x.view()).unwrap().output(), &x);

        let relu = DenseLayer::new(Array2::eye(2), Array1::zeros(2), Activation::Relu).unwrap();
        let net = Mlp::new(vec![relu]).unwrap();
        assert_eq!(
            net.forward(array![[-1.0, 2.0]].view()).unwrap().output(),
            &array![[0.0, 2.0]]
        );

        let sm = DenseLayer::new(Array2::eye(4), Array1::zeros(4), Activation::Softmax).unwrap();
        let net = Mlp::new(vec![sm]).unwrap();
        let out = net.forward(Array2::zeros((1, 4)).view()).unwrap();
        assert!(out.output().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn shape_errors() {
        let mut rng = seeded(0);
        let net = Mlp::init(3, &[4], 2, Activation::Softmax, &mut rng);
        assert!(net.forward(Array2::zeros((2, 5)).view()).is_err());
        let a = DenseLayer::init(3, 4, Activation::Relu, &mut rng);
        let b = DenseLayer::init(5, 2, Activation::Linear, &mut rng);
        assert!(matches!(Mlp::new(vec![a, b]), Err(Error::DimensionMismatch { .. })));
        let a = DenseLayer::init(3, 4, Activation::Softmax, &mut rng);
        let b = DenseLayer::init(4, 2, Activation::Linear, &mut rng);
        assert!(Mlp::new(vec![a, b]).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let p = array![[0.0, 1.0, 0.0]];
        assert_eq!(cross_entropy_loss(p.view(), &[1]).unwrap(), 0.0);
        let u = Array2::from_elem((3, 16), 1.0 / 16.0);
        let l = cross_entropy_loss(u.view(), &[0, 5, 15]).unwrap();
        assert!((l - 16f64.ln()).abs() < 1e-12);
        assert!((l - 2.7726).abs() < 1e-4);
        // Zero probability is clamped, not infinite.
        let l = cross_entropy_loss(p.view(), &[0]).unwrap();
        assert!((l + PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_gradients_match_central_differences() {
        let mut rng = seeded(4);
        let logits = Array2::from_shape_fn((3, 5), |_| rng.random_range(-2.0..2.0));
        let labels = [1, 4, 0];
        let loss_of = |z: &Array2<f64>| {
            let mut p = z.clone();
            softmax_rows(&mut p);
            cross_entropy_loss(p.view(), &labels).unwrap()
        };
        let mut p = logits.clone();
        softmax_rows(&mut p);
        let g = softmax_cross_entropy_logit_grad(p.view(), &labels);
        let gp = cross_entropy_grad(p.view(), &labels);
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..5 {
                let mut a = logits.clone();
                a[[i, j]] += h;
                let mut b = logits.clone();
                b[[i, j]] -= h;
                let fd = (loss_of(&a) - loss_of(&b)) / (2.0 * h);
                assert!((fd - g[[i, j]]).abs() / fd.abs().max(1e-8) < 1e-6);
                // Probability-space gradient.
                let mut pa = p.clone();
                pa[[i, j]] += h;
                let mut pb = p.clone();
                pb[[i, j]] -= h;
                let fd = (cross_entropy_loss(pa.view(), &labels).unwrap()
                    - cross_entropy_loss(pb.view(), &labels).unwrap())
                    / (2.0 * h);
                assert!((fd - gp[[i, j]]).abs() <= 1e-6 * fd.abs().max(1e-8));
            }
        }
    }

    #[test]
    fn mse_examples_and_gradient() {
        let a = array![[0.0, 0.0]];
        assert_eq!(mse_loss(a.view(), a.view()).unwrap(), 0.0);
        assert_eq!(mse_loss(a.view(), array![[3.0, 4.0]].view()).unwrap(), 25.0);
        assert!(mse_loss(a.view(), array![[3.0, 4.0, 5.0]].view()).is_err());
        let mut rng = seeded(5);
        let pred = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let target = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let g = mse_grad(pred.view(), target.view());
        let h = 1e-6;
        for i in 0..4 {
            for j in 0..3 {
                let mut a = pred.clone();
                a[[i, j]] += h;
                let mut b = pred.clone();
                b[[i, j]] -= h;
                let fd = (mse_loss(a.view(), target.view()).unwrap() - mse_loss(b.view(), target.view()).unwrap())
                    / (2.0 * h);
                assert!((fd - g[[i, j]]).abs() / fd.abs().max(1e-8) < 1e-6);
                assert!((g[[i, j]] - 2.0 * (pred[[i, j]] - target[[i, j]]) / 4.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn bce_gradient_matches_central_differences() {
        let mut rng = seeded(6);
        let z = Array2::from_shape_fn((3, 4), |_| rng.random_range(-3.0..3.0));
        let y = Array2::from_shape_fn((3, 4), |_| f64::from(rng.random_range(0..2u8)));
        let g = bce_logits_grad(z.view(), y.view());
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..4 {
                let mut a = z.clone();
                a[[i, j]] += h;
                let mut b = z.clone();
                b[[i, j]] -= h;
                let fd = (bce_logits_loss(a.view(), y.view()).unwrap() - bce_logits_loss(b.view(), y.view()).unwrap())
                    / (2.0 * h);
                assert!((fd - g[[i, j]]).abs() / fd.abs().max(1e-8) < 1e-6);
            }
        }
    }

    fn objective(net: &Mlp, x: &Array2<f64>, labels: &[usize]) -> f64 {
        let t = net.forward(x.view()).unwrap();
        cross_entropy_loss(t.output().view(), labels).unwrap()
    }

    #[test]
    fn network_gradients_match_central_differences() {
        let mut rng = seeded(9);
        let net = Mlp::init(5, &[7, 6], 4, Activation::Softmax, &mut rng);
        let x = Array2::from_shape_fn((6, 5), |_| rng.random_range(-1.0..1.0));
        let labels = [0, 3, 2, 1, 1, 3];
        let tape = net.forward(x.view()).unwrap();
        let dl = softmax_cross_entropy_logit_grad(tape.output().view(), &labels);
        let (grads, dx) = net.backward_from_logits(&tape, dl);
        // Same gradients through the generic softmax Jacobian path.
        let dp = cross_entropy_grad(tape.output().view(), &labels);
        let (grads2, _) = net.backward(&tape, dp.view());
        let h = 1e-6;
        let rel = |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(1e-7);
        for (li, layer) in net.layers.iter().enumerate() {
            for idx in [(0usize, 0usize), (layer.outputs() - 1, layer.inputs() - 1), (1, 2)] {
                let mut a = net.clone();
                a.layers[li].weights[idx] += h;
                let mut b = net.clone();
                b.layers[li].weights[idx] -= h;
                let fd = (objective(&a, &x, &labels) - objective(&b, &x, &labels)) / (2.0 * h);
                assert!(rel(fd, grads[li].weights[idx]) < 1e-5, "layer {li} {idx:?}");
                assert!(rel(grads2[li].weights[idx], grads[li].weights[idx]) < 1e-9);
            }
            let mut a = net.clone();
            a.layers[li].bias[1] += h;
            let mut b = net.clone();
            b.layers[li].bias[1] -= h;
            let fd = (objective(&a, &x, &labels) - objective(&b, &x, &labels)) / (2.0 * h);
            assert!(rel(fd, grads[li].bias[1]) < 1e-5);
        }
        let mut a = x.clone();
        a[[2, 3]] += h;
        let mut b = x.clone();
        b[[2, 3]] -= h;
        let fd = (objective(&net, &a, &labels) - objective(&net, &b, &labels)) / (2.0 * h);
        assert!(rel(fd, dx[[2, 3]]) < 1e-5);
    }

    #[test]
    fn adam_examples() {
        let cfg = AdamConfig::default();
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::new(2);
        adam_update(&mut p, &[0.0, 0.0], &mut st, &cfg).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);

        let mut st = AdamState::new(2);
        adam_update(&mut p, &[0.3, -5.0], &mut st, &cfg).unwrap();
        assert!((p[0] - (1.0 - 0.01)).abs() < 1e-8);
        assert!((p[1] - (-2.0 + 0.01)).abs() < 1e-8);

        // Scripted descent on x^2.
        let mut x = vec![1.0];
        let mut st = AdamState::new(1);
        for _ in 0..200 {
            let g = [2.0 * x[0]];
            adam_update(&mut x, &g, &mut st, &cfg).unwrap();
        }
        assert!(x[0].abs() < 0.5, "x = {}", x[0]);
        assert!(adam_update(&mut x, &[1.0, 2.0], &mut st, &cfg).is_err());
    }

    proptest! {
        #[test]
        fn softmax_is_a_probability_vector(v in proptest::collection::vec(-50.0f64..50.0, 1..20)) {
            let mut m = Array2::from_shape_vec((1, v.len()), v).unwrap();
            softmax_rows(&mut m);
            prop_assert!(m.iter().all(|&p| p >= 0.0));
            prop_assert!((m.sum() - 1.0).abs() < 1e-12);
        }
    }
}
