//! The trainable acquisition system: analog combiner, ADC, digital network.
//!
//! Layout conventions for a batch of `B` windows:
//! - input `X`: `B x (n L)`, time-major (`l * n + i`), as produced by
//!   [`DenseSignal::write_time_major`];
//! - analog output `Y = X H^T`: `B x (p L)`, channel-major (`c * L + l`);
//! - ADC output `Z`, `Q`: `B x (p L~)`, channel-major (`c * L~ + j`).

use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adc::{
    anneal_step, assign_grid_points, harden_quantizer, harden_sampler, AnnealSchedule, HardAdc, HardQuantizer,
    QuantizerGrad, SoftQuantizer, SoftSampler,
};
use crate::error::{check_dim, Error, Result};
use crate::net::{
    bce_logits_grad, bce_logits_loss, cross_entropy_loss, mse_grad, mse_loss, softmax_cross_entropy_logit_grad,
    Activation, AdamConfig, AdamState, DenseLayer, LayerGrad, Mlp, MlpTape,
};
use crate::rng::{derive_seed, seeded};
use crate::signal::{Alphabet, Dataset, DenseSignal, SignalModel, TaskVector};

/// ADC hyperparameters `theta = (p, L~, M~)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AdcHyperparams {
    /// Number of ADCs.
    pub p: usize,
    /// Samples per window per ADC.
    pub samples: usize,
    /// Quantization levels.
    pub levels: usize,
}

impl AdcHyperparams {
    pub fn new(p: usize, samples: usize, levels: usize) -> Result<Self> {
        if p == 0 || samples == 0 {
            return Err(Error::InvalidParameter(format!(
                "need p >= 1 and L~ >= 1, got p = {p}, L~ = {samples}"
            )));
        }
        if levels < 2 {
            return Err(Error::InvalidParameter(format!("need M~ >= 2, got {levels}")));
        }
        Ok(Self { p, samples, levels })
    }

    /// `ceil(log2 M~)`.
    pub fn bits_per_sample(&self) -> usize {
        (usize::BITS - (self.levels - 1).leading_zeros()) as usize
    }

    pub fn bit_cost(&self) -> usize {
        self.p * self.samples * self.bits_per_sample()
    }

    pub fn check_grid(&self, grid_len: usize) -> Result<()> {
        if self.samples > grid_len {
            return Err(Error::InvalidParameter(format!(
                "L~ = {} exceeds the grid size L = {grid_len}",
                self.samples
            )));
        }
        Ok(())
    }
}

impl std::fmt::Display for AdcHyperparams {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {})", self.p, self.samples, self.levels)
    }
}

/// Free-function form of [`AdcHyperparams::bit_cost`].
pub fn bit_cost(theta: &AdcHyperparams) -> usize {
    theta.bit_cost()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Classification,
    Regression,
}

/// Output head for classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Head {
    /// One softmax output per symbol vector, `|S|^k` classes.
    #[default]
    Joint,
    /// One logistic output per entry.
    Factorized,
}

/// Class index of a binary symbol vector: base-2 digits with the first
/// entry most significant, `-1 -> 0`, `+1 -> 1`.
pub fn encode_class(s: &[f64]) -> usize {
    s.iter().fold(0, |acc, &v| 2 * acc + usize::from(v > 0.0))
}

pub fn decode_class(class: usize, k: usize) -> Vec<f64> {
    (0..k)
        .map(|i| if (class >> (k - 1 - i)) & 1 == 1 { 1.0 } else { -1.0 })
        .collect()
}

/// Linear analog combiner and digital network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkWeights {
    /// `(p L) x (n L)`.
    pub analog: Array2<f64>,
    pub digital: Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapeMode {
    Soft,
    Hard,
}

/// Intermediate tensors of one batched forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    pub mode: TapeMode,
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    kernel: Option<Array2<f64>>,
    pub z: Array2<f64>,
    pub net: MlpTape,
}

impl Tape {
    /// Network output: probabilities, logits or regression values.
    pub fn output(&self) -> &Array2<f64> {
        self.net.output()
    }

    /// Digital network input (the quantized samples).
    pub fn digital_input(&self) -> &Array2<f64> {
        &self.net.values[0]
    }
}

/// Training targets for a batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Bits(Array2<f64>),
    Values(Array2<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Bits(m) | Targets::Values(m) => m.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Targets {
        match self {
            Targets::Classes(c) => Targets::Classes(rows.iter().map(|&r| c[r]).collect()),
            Targets::Bits(m) => Targets::Bits(m.select(ndarray::Axis(0), rows)),
            Targets::Values(m) => Targets::Values(m.select(ndarray::Axis(0), rows)),
        }
    }
}

/// Gradients for every trainable scalar of a [`TaskSystem`].
#[derive(Debug, Clone, PartialEq)]
pub struct SystemGrad {
    pub analog: Array2<f64>,
    /// With respect to sample positions in grid units.
    pub positions: Vec<f64>,
    pub quantizer: QuantizerGrad,
    pub layers: Vec<LayerGrad>,
}

impl SystemGrad {
    /// Flat views in the order of [`TaskSystem::trainable_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![
            self.analog.as_slice().expect("standard layout"),
            &self.positions,
            std::slice::from_ref(&self.quantizer.offset),
            &self.quantizer.amplitudes,
            &self.quantizer.shifts,
        ];
        for l in &self.layers {
            out.push(l.weights.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
        }
        out
    }
}

/// The end-to-end acquisition system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSystem {
    pub weights: NetworkWeights,
    pub sampler: SoftSampler,
    pub quantizer: SoftQuantizer,
    /// Set by [`TaskSystem::harden`].
    pub hard: Option<HardAdc>,
    pub hyper: AdcHyperparams,
    pub task: Task,
    pub head: Head,
    pub n: usize,
    pub k: usize,
    pub grid_len: usize,
}

/// Digital network and relaxation settings for a fresh system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    pub head: Head,
    /// Initial kernel width in grid units squared.
    pub initial_width: f64,
    pub normalized_kernel: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden: vec![32, 16],
            head: Head::Joint,
            initial_width: 1.0,
            normalized_kernel: true,
        }
    }
}

impl TaskSystem {
    /// Random initialization. The quantizer is spread uniformly over the mean
    /// +- 3 sd of the pre-quantizer activations of `calibration`.
    pub fn init<R: Rng + ?Sized>(
        model: &SignalModel,
        hyper: AdcHyperparams,
        task: Task,
        arch: &Architecture,
        calibration: &[&DenseSignal],
        rng: &mut R,
    ) -> Result<Self> {
        hyper.check_grid(model.grid_len)?;
        let (n, l) = (model.n, model.grid_len);
        let bound = 1.0 / ((n * l) as f64).sqrt();
        let analog = Array2::from_shape_fn((hyper.p * l, n * l), |_| rng.random_range(-bound..=bound));
        let positions = (0..hyper.samples)
            .map(|_| rng.random_range(0.0..=(l - 1) as f64))
            .collect();
        let mut sampler = SoftSampler::new(
            positions,
            arch.initial_width,
            l,
            model.grid_spacing(),
            arch.normalized_kernel,
        )?;
        sampler.enforce_separation();
        let classes = match (task, arch.head) {
            (Task::Classification, Head::Joint) => {
                if model.k >= usize::BITS as usize - 1 {
                    return Err(Error::InvalidParameter(format!(
                        "k = {} too large for a joint head",
                        model.k
                    )));
                }
                1 << model.k
            }
            _ => model.k,
        };
        let output = match (task, arch.head) {
            (Task::Classification, Head::Joint) => Activation::Softmax,
            _ => Activation::Linear,
        };
        let digital = Mlp::init(hyper.p * hyper.samples, &arch.hidden, classes, output, rng);
        let mut sys = Self {
            weights: NetworkWeights { analog, digital },
            sampler,
            quantizer: SoftQuantizer::uniform(hyper.levels, 0.0, 1.0)?,
            hard: None,
            hyper,
            task,
            head: arch.head,
            n,
            k: model.k,
            grid_len: l,
        };
        if !calibration.is_empty() {
            let x = batch_matrix(calibration.iter().copied(), n, l)?;
            let z = sys.pre_quantizer(x.view())?;
            let count = z.len() as f64;
            let mean = z.sum() / count;
            let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
            let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
            sys.quantizer = SoftQuantizer::uniform(hyper.levels, mean, 3.0 * sd)?;
        }
        Ok(sys)
    }

    fn check_input(&self, x: ArrayView2<f64>) -> Result<()> {
        check_dim("input width n*L", self.n * self.grid_len, x.ncols())
    }

    fn analog(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weights.analog.t())
    }

    fn pre_quantizer(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let y = self.analog(x);
        let b = x.nrows();
        let z2 = reshape(y, (b * self.hyper.p, self.grid_len)).dot(&self.sampler.kernel());
        Ok(reshape(z2, (b, self.hyper.p * self.hyper.samples)))
    }

    /// Differentiable forward pass with the relaxed ADC.
    pub fn forward_soft(&self, x: ArrayView2<f64>) -> Result<Tape> {
        self.check_input(x)?;
        let b = x.nrows();
        let (p, l, lt) = (self.hyper.p, self.grid_len, self.hyper.samples);
        let y = self.analog(x);
        let kernel = self.sampler.kernel();
        let z = reshape(reshape(y.clone(), (b * p, l)).dot(&kernel), (b, p * lt));
        let q = z.mapv(|v| self.quantizer.eval(v));
        let net = self.weights.digital.forward(q.view())?;
        Ok(Tape {
            mode: TapeMode::Soft,
            x: x.to_owned(),
            y,
            kernel: Some(kernel),
            z,
            net,
        })
    }

    /// Inference pass with the hard ADC.
    pub fn forward_hard(&self, x: ArrayView2<f64>) -> Result<Tape> {
        self.check_input(x)?;
        let adc = self
            .hard
            .as_ref()
            .ok_or_else(|| Error::Unsupported("hard ADC not projected yet; call harden()".into()))?;
        let b = x.nrows();
        let (p, l, lt) = (self.hyper.p, self.grid_len, adc.sample_indices.len());
        let y = self.analog(x);
        let mut z = Array2::zeros((b, p * lt));
        let mut q = Array2::zeros((b, p * lt));
        for r in 0..b {
            for c in 0..p {
                for (j, &idx) in adc.sample_indices.iter().enumerate() {
                    let v = y[[r, c * l + idx]];
                    z[[r, c * lt + j]] = v;
                    q[[r, c * lt + j]] = adc.quantizer.quantize(v);
                }
            }
        }
        let net = self.weights.digital.forward(q.view())?;
        Ok(Tape {
            mode: TapeMode::Hard,
            x: x.to_owned(),
            y,
            kernel: None,
            z,
            net,
        })
    }

    /// Loss of a recorded pass and its gradient with respect to the logits.
    pub fn loss(&self, tape: &Tape, targets: &Targets) -> Result<(f64, Array2<f64>)> {
        let out = tape.output().view();
        match targets {
            Targets::Classes(c) => Ok((cross_entropy_loss(out, c)?, softmax_cross_entropy_logit_grad(out, c))),
            Targets::Bits(t) => Ok((bce_logits_loss(out, t.view())?, bce_logits_grad(out, t.view()))),
            Targets::Values(t) => Ok((mse_loss(out, t.view())?, mse_grad(out, t.view()))),
        }
    }

    /// Reverse pass through the soft pipeline.
    pub fn backward(&self, tape: &Tape, dlogits: Array2<f64>) -> Result<SystemGrad> {
        if tape.mode == TapeMode::Hard {
            return Err(Error::Unsupported(
                "gradients through the hard ADC are zero almost everywhere; use a soft tape".into(),
            ));
        }
        let kernel = tape.kernel.as_ref().expect("soft tape stores the kernel");
        let b = tape.x.nrows();
        let (p, l, lt) = (self.hyper.p, self.grid_len, self.hyper.samples);
        let (layers, dq) = self.weights.digital.backward_from_logits(&tape.net, dlogits);
        let mut qgrad = self.quantizer.zero_grad();
        let mut dz = Array2::zeros(tape.z.raw_dim());
        for (d, (&z, &g)) in dz.iter_mut().zip(tape.z.iter().zip(dq.iter())) {
            *d = self.quantizer.accumulate(z, g, &mut qgrad);
        }
        let dz2 = reshape(dz, (b * p, lt));
        let y2 = reshape(tape.y.clone(), (b * p, l));
        let dkernel = y2.t().dot(&dz2);
        let (positions, _) = self.sampler.kernel_backward(kernel, &dkernel);
        let dy = reshape(dz2.dot(&kernel.t()), (b, p * l));
        let analog = dy.t().dot(&tape.x).as_standard_layout().into_owned();
        Ok(SystemGrad {
            analog,
            positions,
            quantizer: qgrad,
            layers,
        })
    }

    /// Soft-mode loss for a batch.
    pub fn batch_loss(&self, x: ArrayView2<f64>, targets: &Targets) -> Result<f64> {
        let tape = self.forward_soft(x)?;
        Ok(self.loss(&tape, targets)?.0)
    }

    /// Mutable views of the trainable parameters: analog matrix, sample
    /// positions, quantizer offset, amplitudes and shifts, then each layer's
    /// weights and bias. Quantizer slopes and the kernel width follow the
    /// annealing schedule instead.
    pub fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.weights.analog.as_slice_mut().expect("standard layout"),
            self.sampler.positions_mut(),
            std::slice::from_mut(&mut self.quantizer.offset),
            &mut self.quantizer.amplitudes,
            &mut self.quantizer.shifts,
        ];
        for layer in &mut self.weights.digital.layers {
            out.push(layer.weights.as_slice_mut().expect("standard layout"));
            out.push(layer.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    /// Projects the relaxed ADC onto the hard one.
    ///
    /// Samples are first reordered by their assigned grid point, permuting the
    /// first digital layer's input columns to match, so the soft map is
    /// unchanged and sample `j` of the hard ADC feeds the same network inputs
    /// as position `j`.
    pub fn harden(&mut self) -> Result<()> {
        let assigned = assign_grid_points(&self.sampler);
        let mut order: Vec<usize> = (0..assigned.len()).collect();
        order.sort_by_key(|&j| assigned[j]);
        if order.iter().enumerate().any(|(i, &j)| i != j) {
            let lt = self.hyper.samples;
            let positions: Vec<f64> = order.iter().map(|&j| self.sampler.positions()[j]).collect();
            self.sampler.positions_mut().copy_from_slice(&positions);
            let first = &mut self.weights.digital.layers[0];
            let columns: Vec<usize> = (0..self.hyper.p)
                .flat_map(|c| order.iter().map(move |&j| c * lt + j))
                .collect();
            first.weights = first
                .weights
                .select(ndarray::Axis(1), &columns)
                .as_standard_layout()
                .into_owned();
        }
        let indices = harden_sampler(&self.sampler);
        let quantizer = harden_quantizer(&self.quantizer);
        self.hard = Some(HardAdc::new(indices, quantizer)?);
        Ok(())
    }

    pub fn is_hardened(&self) -> bool {
        self.hard.is_some()
    }

    /// Output width of the digital network for this task and head.
    pub fn output_width(&self) -> usize {
        match (self.task, self.head) {
            (Task::Classification, Head::Joint) => 1usize.checked_shl(self.k as u32).unwrap_or(0),
            _ => self.k,
        }
    }

    /// Checks that every stored shape agrees with the hyperparameters and that
    /// all parameters are finite. Deserialized systems bypass the
    /// constructors, so loaders call this.
    pub fn validate(&self) -> Result<()> {
        let (p, lt, l, n) = (self.hyper.p, self.hyper.samples, self.grid_len, self.n);
        if n == 0 || self.k == 0 {
            return Err(Error::InvalidParameter("n and k must be positive".into()));
        }
        AdcHyperparams::new(p, lt, self.hyper.levels)?;
        self.hyper.check_grid(l)?;
        let a = &self.weights.analog;
        check_dim("analog rows p*L", p * l, a.nrows())?;
        check_dim("analog columns n*L", n * l, a.ncols())?;
        check_dim("sample positions", lt, self.sampler.num_samples())?;
        check_dim("sampler grid", l, self.sampler.grid_len())?;
        if !(self.sampler.width() > 0.0 && self.sampler.width().is_finite()) {
            return Err(Error::InvalidParameter("kernel width must be positive".into()));
        }
        let q = &self.quantizer;
        SoftQuantizer::new(q.offset, q.amplitudes.clone(), q.shifts.clone(), q.slopes.clone())?;
        check_dim("quantizer terms", self.hyper.levels - 1, q.amplitudes.len())?;
        let net = Mlp::new(self.weights.digital.layers.clone())?;
        for layer in &net.layers {
            DenseLayer::new(layer.weights.clone(), layer.bias.clone(), layer.activation)?;
        }
        check_dim("network inputs p*L~", p * lt, net.inputs())?;
        check_dim("network outputs", self.output_width(), net.outputs())?;
        let finite = a.iter().chain(self.sampler.positions()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidParameter("parameters must be finite".into()));
        }
        if let Some(h) = &self.hard {
            HardAdc::new(h.sample_indices.clone(), h.quantizer.clone())?;
            check_dim("hard sample indices", lt, h.sample_indices.len())?;
            if h.sample_indices.iter().any(|&i| i >= l) {
                return Err(Error::InvalidParameter("hard sample index outside the grid".into()));
            }
            let borders = h.quantizer.borders().to_vec();
            HardQuantizer::new(borders, h.quantizer.levels().to_vec())?;
            if h.quantizer.levels().len() > self.hyper.levels {
                return Err(Error::InvalidParameter(
                    "hard quantizer has more cells than levels".into(),
                ));
            }
        }
        Ok(())
    }

    /// Errors unless the system was built for `model`'s dimensions.
    pub fn check_model(&self, model: &SignalModel) -> Result<()> {
        check_dim("channel count n", model.n, self.n)?;
        check_dim("task length k", model.k, self.k)?;
        check_dim("grid length L", model.grid_len, self.grid_len)
    }

    /// Training targets for `tasks` under this system's head.
    pub fn targets<'a>(&self, tasks: impl ExactSizeIterator<Item = &'a TaskVector>) -> Targets {
        let rows = tasks.len();
        match (self.task, self.head) {
            (Task::Classification, Head::Joint) => Targets::Classes(tasks.map(|s| encode_class(s.entries())).collect()),
            (Task::Classification, Head::Factorized) => {
                let mut m = Array2::zeros((rows, self.k));
                for (r, s) in tasks.enumerate() {
                    for (c, &v) in s.entries().iter().enumerate() {
                        m[[r, c]] = if v > 0.0 { 1.0 } else { 0.0 };
                    }
                }
                Targets::Bits(m)
            }
            (Task::Regression, _) => {
                let mut m = Array2::zeros((rows, self.k));
                for (r, s) in tasks.enumerate() {
                    m.row_mut(r).assign(&ndarray::ArrayView1::from(s.entries()));
                }
                Targets::Values(m)
            }
        }
    }

    /// Decodes network outputs into task vectors.
    pub fn decode(&self, output: ArrayView2<f64>) -> Vec<TaskVector> {
        output
            .rows()
            .into_iter()
            .map(|row| match (self.task, self.head) {
                (Task::Classification, Head::Joint) => {
                    TaskVector::binary(decode_class(argmax(row.iter().copied()), self.k)).expect("binary")
                }
                (Task::Classification, Head::Factorized) => {
                    TaskVector::binary(row.iter().map(|&z| if z >= 0.0 { 1.0 } else { -1.0 }).collect())
                        .expect("binary")
                }
                (Task::Regression, _) => TaskVector::new(row.to_vec(), Alphabet::Real).expect("finite outputs"),
            })
            .collect()
    }

    /// Hard-mode decisions for a batch of windows.
    pub fn predict_hard(&self, signals: &[&DenseSignal]) -> Result<Vec<TaskVector>> {
        let x = batch_matrix(signals.iter().copied(), self.n, self.grid_len)?;
        let tape = self.forward_hard(x.view())?;
        Ok(self.decode(tape.output().view()))
    }

    /// Soft-mode decisions for a batch of windows.
    pub fn predict_soft(&self, signals: &[&DenseSignal]) -> Result<Vec<TaskVector>> {
        let x = batch_matrix(signals.iter().copied(), self.n, self.grid_len)?;
        let tape = self.forward_soft(x.view())?;
        Ok(self.decode(tape.output().view()))
    }

    /// Single-window hard inference.
    pub fn detect(&self, x: &DenseSignal) -> Result<TaskVector> {
        Ok(self.predict_hard(&[x])?.remove(0))
    }
}

/// Row-major reshape; `dot` may hand back column-major results.
fn reshape(a: Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let a = if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    };
    a.into_shape_with_order(shape).expect("element count matches")
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Stacks windows into a `B x (n L)` time-major batch.
pub fn batch_matrix<'a>(
    signals: impl ExactSizeIterator<Item = &'a DenseSignal>,
    n: usize,
    grid_len: usize,
) -> Result<Array2<f64>> {
    let rows = signals.len();
    let mut x = Array2::zeros((rows, n * grid_len));
    for (r, sig) in signals.enumerate() {
        check_dim("signal channels", n, sig.channels())?;
        check_dim("signal grid length", grid_len, sig.grid_len())?;
        sig.write_time_major(x.row_mut(r).as_slice_mut().expect("standard layout"));
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub anneal: AnnealSchedule,
    pub architecture: Architecture,
    /// Windows used to initialize the quantizer range.
    pub calibration: usize,
    /// Epochs run after the main ones with the sample times fixed on their
    /// projected grid points.
    pub refine_epochs: usize,
    /// Score the hardened system on the training set after every epoch and
    /// keep the best iterate; otherwise the last one is returned. The refine
    /// phase then starts from the best main-phase iterate.
    pub select_best: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            adam: AdamConfig::default(),
            anneal: AnnealSchedule::default(),
            architecture: Architecture::default(),
            calibration: 1000,
            refine_epochs: 10,
            select_best: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidParameter("epochs and batch size must be >= 1".into()));
        }
        if !(self.adam.lr >= 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "learning rate {} must be >= 0",
                self.adam.lr
            )));
        }
        self.anneal.validate()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub system: TaskSystem,
    /// Mean training loss of each epoch.
    pub loss_history: Vec<f64>,
}

/// Trains a system on `dataset` with Adam over the soft pipeline, anneals
/// after every epoch and projects to the hard ADC at the end.
///
/// With `refine_epochs > 0` the sample times are then moved onto their
/// projected grid points and frozen while the remaining parameters keep
/// training, so the digital network sees the samples it will get after
/// projection. A relaxed sampler can sit between two grid points and feed a
/// blend of both to the network, which projection would silently remove.
pub fn train(dataset: &Dataset, model: &SignalModel, theta: AdcHyperparams, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidParameter("empty training set".into()));
    }
    let (n, l) = dataset.shape();
    check_dim("dataset channels", model.n, n)?;
    check_dim("dataset grid length", model.grid_len, l)?;
    check_dim("dataset task dimension", model.k, dataset.task_dim())?;
    let task = match dataset.alphabet() {
        Alphabet::Binary => Task::Classification,
        Alphabet::Real => Task::Regression,
    };
    let mut rng = seeded(derive_seed(cfg.seed, "train", &[]));
    let calibration: Vec<&DenseSignal> = dataset.pairs.iter().take(cfg.calibration).map(|(_, x)| x).collect();
    let mut sys = TaskSystem::init(model, theta, task, &cfg.architecture, &calibration, &mut rng)?;
    let x_all = batch_matrix(dataset.pairs.iter().map(|(_, x)| x), n, l)?;
    let t_all = sys.targets(dataset.pairs.iter().map(|(s, _)| s));
    let mut states: Vec<AdamState> = sys.trainable_mut().iter().map(|p| AdamState::new(p.len())).collect();
    // Best hardened iterate overall, and the relaxed state it came from
    // while still in the main phase.
    let mut best: Option<(f64, TaskSystem)> = None;
    let mut restart: Option<TaskSystem> = None;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs + cfg.refine_epochs);
    for epoch in 0..cfg.epochs + cfg.refine_epochs {
        let refining = epoch >= cfg.epochs;
        if epoch == cfg.epochs && cfg.refine_epochs > 0 {
            if let Some(r) = restart.take() {
                sys = r;
                states = sys.trainable_mut().iter().map(|p| AdamState::new(p.len())).collect();
            }
            sys.harden()?;
            let indices = sys.hard.take().expect("just hardened").sample_indices;
            for (t, i) in sys.sampler.positions_mut().iter_mut().zip(indices) {
                *t = i as f64;
            }
        }
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for rows in order.chunks(cfg.batch_size) {
            let x = x_all.select(ndarray::Axis(0), rows);
            let targets = t_all.select(rows);
            let tape = sys.forward_soft(x.view())?;
            let (loss, dlogits) = sys.loss(&tape, &targets)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("batch loss {loss}"),
                });
            }
            total += loss * rows.len() as f64;
            let grad = sys.backward(&tape, dlogits)?;
            if grad.slices().iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::Divergence {
                    epoch,
                    detail: "non-finite gradient".into(),
                });
            }
            let fixed = refining.then(|| sys.sampler.positions().to_vec());
            for ((param, g), state) in sys.trainable_mut().into_iter().zip(grad.slices()).zip(&mut states) {
                crate::net::adam_update(param, g, state, &cfg.adam)?;
            }
            match fixed {
                Some(t) => sys.sampler.positions_mut().copy_from_slice(&t),
                None => sys.sampler.enforce_separation(),
            }
        }
        let mean = total / dataset.len() as f64;
        log::debug!("epoch {epoch}: loss {mean:.6}");
        history.push(mean);
        anneal_step(&mut sys.sampler, &mut sys.quantizer, epoch, &cfg.anneal)?;
        if cfg.select_best {
            let mut candidate = sys.clone();
            candidate.harden()?;
            let tape = candidate.forward_hard(x_all.view())?;
            let score = candidate.loss(&tape, &t_all)?.0;
            log::debug!("epoch {epoch}: hardened loss {score:.6}");
            if best.as_ref().is_none_or(|(b, _)| score < *b) {
                best = Some((score, candidate));
                if !refining {
                    restart = Some(sys.clone());
                }
            }
        }
    }
    let sys = match best {
        Some((_, chosen)) => chosen,
        None => {
            sys.harden()?;
            sys
        }
    };
    if let Some(h) = &sys.hard {
        if h.quantizer.collapsed > 0 {
            log::warn!("hard quantizer lost {} coinciding borders", h.quantizer.collapsed);
        }
    }
    Ok(TrainOutcome {
        system: sys,
        loss_history: history,
    })
}

/// Per-entry and per-vector error counts of `predicted` against `truth`.
pub fn count_errors(predicted: &[TaskVector], truth: &[&TaskVector]) -> (usize, usize) {
    let mut entries = 0;
    let mut vectors = 0;
    for (p, t) in predicted.iter().zip(truth) {
        let e = p.entry_errors(t);
        entries += e;
        vectors += usize::from(e > 0);
    }
    (entries, vectors)
}

/// Row slice helper used by tests and the harness.
pub fn rows(x: &Array2<f64>, start: usize, end: usize) -> Array2<f64> {
    x.slice(s![start..end, ..]).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::generate_dataset;
    use proptest::prelude::*;
    use rand::Rng;

    fn small_model(snr_db: f64) -> SignalModel {
        SignalModel::synthetic(6, 4, snr_db).unwrap()
    }

    fn paper_system(seed: u64, model: &SignalModel, data: &Dataset) -> TaskSystem {
        let theta = AdcHyperparams::new(4, 4, 8).unwrap();
        let calib: Vec<&DenseSignal> = data.pairs.iter().map(|(_, x)| x).collect();
        let mut rng = seeded(seed);
        TaskSystem::init(
            model,
            theta,
            Task::Classification,
            &Architecture::default(),
            &calib,
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn bit_cost_examples() {
        assert_eq!(AdcHyperparams::new(4, 4, 8).unwrap().bit_cost(), 48);
        assert_eq!(bit_cost(&AdcHyperparams::new(1, 1, 2).unwrap()), 1);
        assert_eq!(AdcHyperparams::new(2, 5, 3).unwrap().bit_cost(), 20);
        assert_eq!(AdcHyperparams::new(1, 1, 256).unwrap().bits_per_sample(), 8);
        assert_eq!(AdcHyperparams::new(1, 1, 257).unwrap().bits_per_sample(), 9);
        assert!(AdcHyperparams::new(0, 1, 2).is_err());
        assert!(AdcHyperparams::new(1, 1, 1).is_err());
    }

    #[test]
    fn class_codec_examples() {
        assert_eq!(encode_class(&[-1.0, -1.0, 1.0]), 1);
        assert_eq!(encode_class(&[1.0, -1.0, -1.0]), 4);
        assert_eq!(decode_class(6, 3), vec![1.0, 1.0, -1.0]);
    }

    proptest! {
        #[test]
        fn class_codec_is_a_bijection(k in 1usize..12, raw in any::<u64>()) {
            let class = (raw as usize) % (1 << k);
            prop_assert_eq!(encode_class(&decode_class(class, k)), class);
        }
    }

    fn random_batch(model: &SignalModel, count: usize, seed: u64) -> (Dataset, Array2<f64>) {
        let data = generate_dataset(model, count, Alphabet::Binary, seed).unwrap();
        let x = batch_matrix(data.pairs.iter().map(|(_, x)| x), model.n, model.grid_len).unwrap();
        (data, x)
    }

    #[test]
    fn soft_forward_matches_stage_by_stage_composition() {
        let model = small_model(4.0);
        let (data, x) = random_batch(&model, 3, 2);
        let sys = paper_system(1, &model, &data);
        let tape = sys.forward_soft(x.view()).unwrap();
        let k = sys.sampler.kernel();
        for (r, (_, sig)) in data.pairs.iter().enumerate() {
            // Stage 1: flatten, time-major.
            let flat = sig.time_major();
            // Stage 2: analog combiner.
            let y = sys.weights.analog.dot(&flat);
            // Stage 3-4: per-channel kernel sum and quantization.
            let mut q = vec![0.0; sys.hyper.p * sys.hyper.samples];
            for c in 0..sys.hyper.p {
                for j in 0..sys.hyper.samples {
                    let z: f64 = (0..sys.grid_len).map(|l| y[c * sys.grid_len + l] * k[[l, j]]).sum();
                    q[c * sys.hyper.samples + j] = sys.quantizer.eval(z);
                }
            }
            // Stage 5: digital network.
            let input = Array2::from_shape_vec((1, q.len()), q).unwrap();
            let out = sys.weights.digital.forward(input.view()).unwrap();
            for (a, b) in out.output().iter().zip(tape.output().row(r)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_input_with_symmetric_quantizer_gives_zero_input_response() {
        let model = small_model(4.0);
        let (data, _) = random_batch(&model, 2, 3);
        let mut sys = paper_system(2, &model, &data);
        sys.quantizer = SoftQuantizer::uniform(8, 0.0, 1.0).unwrap();
        let x = Array2::zeros((1, model.n * model.grid_len));
        let tape = sys.forward_soft(x.view()).unwrap();
        let reference = sys.weights.digital.forward(Array2::zeros((1, 16)).view()).unwrap();
        for (a, b) in tape.output().iter().zip(reference.output().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fine_quantizer_and_full_sampling_approach_linear_pipeline() {
        let mut model = small_model(4.0);
        model.grid_len = 6;
        let (data, x) = random_batch(&model, 2, 4);
        let theta = AdcHyperparams::new(2, 6, 2).unwrap();
        let mut rng = seeded(3);
        let calib: Vec<&DenseSignal> = data.pairs.iter().map(|(_, x)| x).collect();
        let mut sys = TaskSystem::init(
            &model,
            theta,
            Task::Classification,
            &Architecture::default(),
            &calib,
            &mut rng,
        )
        .unwrap();
        sys.sampler = SoftSampler::new((0..6).map(f64::from).collect(), 1e-6, 6, 1.0, true).unwrap();
        // Staircase with step 1e-4 and very steep edges: q(z) ~ z on [-5, 5].
        let m = 100_000;
        let w = 10.0 / m as f64;
        let slopes = vec![50.0 / w; m - 1];
        let shifts = (1..m).map(|i| (-5.0 + i as f64 * w) * 50.0 / w).collect();
        sys.quantizer = SoftQuantizer::new(0.0, vec![w / 2.0; m - 1], shifts, slopes).unwrap();
        let tape = sys.forward_soft(x.view()).unwrap();
        let y = x.dot(&sys.weights.analog.t());
        for r in 0..2 {
            for c in 0..2 {
                for j in 0..6 {
                    let v = y[[r, c * 6 + j]];
                    assert!((tape.digital_input()[[r, c * 6 + j]] - v).abs() <= w, "{v}");
                }
            }
        }
    }

    fn flat_params(sys: &mut TaskSystem) -> Vec<(usize, usize)> {
        sys.trainable_mut()
            .iter()
            .enumerate()
            .flat_map(|(t, s)| (0..s.len()).map(move |i| (t, i)))
            .collect()
    }

    fn set_param(sys: &mut TaskSystem, at: (usize, usize), value: f64) {
        sys.trainable_mut()[at.0][at.1] = value;
    }

    #[test]
    fn pipeline_gradients_match_central_differences() {
        for seed in 0..3u64 {
            let model = small_model(6.0);
            let (data, x) = random_batch(&model, 16, 10 + seed);
            let mut sys = paper_system(seed, &model, &data);
            // Moderate relaxation so every parameter has a visible effect.
            sys.sampler.set_width(2.0).unwrap();
            let targets = sys.targets(data.pairs.iter().map(|(s, _)| s));
            let tape = sys.forward_soft(x.view()).unwrap();
            let (_, dl) = sys.loss(&tape, &targets).unwrap();
            let grad = sys.backward(&tape, dl).unwrap();
            let flat_grad: Vec<Vec<f64>> = grad.slices().iter().map(|s| s.to_vec()).collect();
            let all = flat_params(&mut sys);
            let mut rng = seeded(100 + seed);
            // Every tensor at least once, then random picks.
            let mut picks: Vec<(usize, usize)> = (0..flat_grad.len())
                .map(|t| (t, rng.random_range(0..flat_grad[t].len())))
                .collect();
            while picks.len() < 20 + flat_grad.len() {
                picks.push(all[rng.random_range(0..all.len())]);
            }
            let h = 1e-5;
            for at in picks {
                let orig = sys.trainable_mut()[at.0][at.1];
                set_param(&mut sys, at, orig + h);
                let up = sys.batch_loss(x.view(), &targets).unwrap();
                set_param(&mut sys, at, orig - h);
                let down = sys.batch_loss(x.view(), &targets).unwrap();
                set_param(&mut sys, at, orig);
                let fd = (up - down) / (2.0 * h);
                let an = flat_grad[at.0][at.1];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-7);
                assert!(rel < 1e-4, "seed {seed} param {at:?}: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn unsampled_columns_get_no_gradient() {
        let model = small_model(6.0);
        let (data, x) = random_batch(&model, 8, 5);
        let mut sys = paper_system(4, &model, &data);
        sys.sampler = SoftSampler::new(vec![2.0, 5.0, 9.0, 12.0], 1e-3, 20, 1.0, false).unwrap();
        let targets = sys.targets(data.pairs.iter().map(|(s, _)| s));
        let tape = sys.forward_soft(x.view()).unwrap();
        let (_, dl) = sys.loss(&tape, &targets).unwrap();
        let g = sys.backward(&tape, dl.clone()).unwrap();
        // Analog rows feeding grid time 17 of every ADC.
        for c in 0..4 {
            assert!(g.analog.row(c * 20 + 17).iter().all(|v| v.abs() < 1e-12));
        }
        assert!(g.analog.row(5).iter().any(|v| v.abs() > 1e-6));
        // Determinism of the reverse pass.
        assert_eq!(g, sys.backward(&tape, dl).unwrap());
    }

    #[test]
    fn hard_tape_refuses_gradients() {
        let model = small_model(6.0);
        let (data, x) = random_batch(&model, 4, 6);
        let mut sys = paper_system(5, &model, &data);
        assert!(matches!(sys.forward_hard(x.view()), Err(Error::Unsupported(_))));
        sys.harden().unwrap();
        let tape = sys.forward_hard(x.view()).unwrap();
        let dl = Array2::zeros(tape.output().raw_dim());
        assert!(matches!(sys.backward(&tape, dl), Err(Error::Unsupported(_))));
    }

    #[test]
    fn hardening_keeps_the_soft_map() {
        let model = small_model(6.0);
        let (data, x) = random_batch(&model, 4, 7);
        let mut sys = paper_system(6, &model, &data);
        sys.sampler.positions_mut().copy_from_slice(&[15.2, 3.1, 9.7, 0.4]);
        let before = sys.forward_soft(x.view()).unwrap();
        sys.harden().unwrap();
        assert_eq!(sys.sampler.positions(), &[0.4, 3.1, 9.7, 15.2]);
        assert_eq!(sys.hard.as_ref().unwrap().sample_indices, vec![0, 3, 10, 15]);
        let after = sys.forward_soft(x.view()).unwrap();
        for (a, b) in before.output().iter().zip(after.output().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn hardening_is_idempotent() {
        let model = small_model(6.0);
        let (data, _) = random_batch(&model, 4, 7);
        let mut sys = paper_system(6, &model, &data);
        sys.harden().unwrap();
        let once = sys.hard.clone();
        sys.harden().unwrap();
        assert_eq!(once, sys.hard);
    }

    #[test]
    fn identical_quantized_inputs_give_identical_decisions() {
        let model = small_model(6.0);
        let (data, _) = random_batch(&model, 2, 8);
        let mut sys = paper_system(7, &model, &data);
        sys.harden().unwrap();
        let a = data.pairs[0].1.clone();
        let b = DenseSignal::new(a.values().mapv(|v| v + 1e-14)).unwrap();
        let ta = sys
            .forward_hard(batch_matrix([&a].into_iter(), 6, 20).unwrap().view())
            .unwrap();
        let tb = sys
            .forward_hard(batch_matrix([&b].into_iter(), 6, 20).unwrap().view())
            .unwrap();
        assert_eq!(ta.digital_input(), tb.digital_input());
        assert_eq!(sys.decode(ta.output().view()), sys.decode(tb.output().view()));
    }

    #[test]
    fn forced_class_is_decoded() {
        let model = small_model(6.0);
        let (data, x) = random_batch(&model, 3, 9);
        let mut sys = paper_system(8, &model, &data);
        sys.hard = Some(
            HardAdc::new(
                vec![0, 1, 2, 3],
                HardQuantizer::new(vec![0.0], vec![-1.0, 1.0]).unwrap(),
            )
            .unwrap(),
        );
        let last = sys.weights.digital.layers.last_mut().unwrap();
        last.weights.fill(0.0);
        last.bias.fill(0.0);
        last.bias[11] = 50.0;
        let tape = sys.forward_hard(x.view()).unwrap();
        for s in sys.decode(tape.output().view()) {
            assert_eq!(s.entries(), decode_class(11, 4).as_slice());
        }
    }

    #[test]
    fn zero_learning_rate_leaves_weights_unchanged() {
        let model = small_model(6.0);
        let data = generate_dataset(&model, 64, Alphabet::Binary, 3).unwrap();
        let theta = AdcHyperparams::new(2, 3, 4).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 16,
            adam: AdamConfig {
                lr: 0.0,
                ..AdamConfig::default()
            },
            anneal: AnnealSchedule::NONE,
            refine_epochs: 0,
            select_best: false,
            seed: 4,
            ..TrainConfig::default()
        };
        let out = train(&data, &model, theta, &cfg).unwrap();
        let calib: Vec<&DenseSignal> = data.pairs.iter().take(cfg.calibration).map(|(_, x)| x).collect();
        let mut rng = seeded(derive_seed(cfg.seed, "train", &[]));
        let mut fresh =
            TaskSystem::init(&model, theta, Task::Classification, &cfg.architecture, &calib, &mut rng).unwrap();
        fresh.harden().unwrap();
        assert_eq!(out.system.weights, fresh.weights);
        assert_eq!(out.system.quantizer, fresh.quantizer);
        assert_eq!(out.system.sampler, fresh.sampler);
        let h = &out.loss_history;
        assert!(h.iter().all(|&v| (v - h[0]).abs() < 1e-12));
    }

    #[test]
    fn separable_instance_is_learned_exactly() {
        let model = SignalModel::new(2, 2, 1e-6, 20, 100.0, 1e3, 1e-12).unwrap();
        let data = generate_dataset(&model, 512, Alphabet::Binary, 11).unwrap();
        let theta = AdcHyperparams::new(2, 2, 4).unwrap();
        let cfg = TrainConfig {
            epochs: 40,
            batch_size: 64,
            seed: 12,
            ..TrainConfig::default()
        };
        let out = train(&data, &model, theta, &cfg).unwrap();
        let signals: Vec<&DenseSignal> = data.pairs.iter().map(|(_, x)| x).collect();
        let truth: Vec<&TaskVector> = data.pairs.iter().map(|(s, _)| s).collect();
        let pred = out.system.predict_hard(&signals).unwrap();
        assert_eq!(count_errors(&pred, &truth), (0, 0));
    }

    #[test]
    fn refine_phase_trains_on_projected_sample_times() {
        let model = small_model(4.0);
        let data = generate_dataset(&model, 300, Alphabet::Binary, 6).unwrap();
        let cfg = TrainConfig {
            epochs: 4,
            refine_epochs: 3,
            batch_size: 50,
            seed: 2,
            ..TrainConfig::default()
        };
        let out = train(&data, &model, AdcHyperparams::new(2, 3, 4).unwrap(), &cfg).unwrap();
        assert_eq!(out.loss_history.len(), 7);
        let hard = out.system.hard.as_ref().unwrap();
        let snapped: Vec<f64> = hard.sample_indices.iter().map(|&i| i as f64).collect();
        assert_eq!(out.system.sampler.positions(), &snapped[..]);
    }

    #[test]
    fn selected_iterate_fits_no_worse_than_the_last() {
        let model = small_model(3.0);
        let data = generate_dataset(&model, 400, Alphabet::Binary, 8).unwrap();
        let theta = AdcHyperparams::new(2, 2, 2).unwrap();
        let base = TrainConfig {
            epochs: 12,
            refine_epochs: 0,
            batch_size: 40,
            seed: 3,
            ..TrainConfig::default()
        };
        let hard_loss = |select_best: bool| {
            let sys = train(
                &data,
                &model,
                theta,
                &TrainConfig {
                    select_best,
                    ..base.clone()
                },
            )
            .unwrap()
            .system;
            let x = batch_matrix(data.pairs.iter().map(|(_, x)| x), model.n, model.grid_len).unwrap();
            let t = sys.targets(data.pairs.iter().map(|(s, _)| s));
            let tape = sys.forward_hard(x.view()).unwrap();
            sys.loss(&tape, &t).unwrap().0
        };
        assert!(hard_loss(true) <= hard_loss(false));
    }

    #[test]
    fn loss_is_nonincreasing_on_noiseless_toy() {
        let model = SignalModel::new(2, 2, 1e-6, 10, 4.0, 1e3, 1e-12).unwrap();
        let data = generate_dataset(&model, 256, Alphabet::Binary, 21).unwrap();
        let theta = AdcHyperparams::new(1, 2, 4).unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 256,
            adam: AdamConfig {
                lr: 0.002,
                ..AdamConfig::default()
            },
            anneal: AnnealSchedule::NONE,
            refine_epochs: 0,
            select_best: false,
            seed: 5,
            ..TrainConfig::default()
        };
        let h = train(&data, &model, theta, &cfg).unwrap().loss_history;
        for w in h.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{h:?}");
        }
    }

    #[test]
    fn training_is_bit_reproducible() {
        let model = small_model(4.0);
        let data = generate_dataset(&model, 200, Alphabet::Binary, 1).unwrap();
        let theta = AdcHyperparams::new(2, 3, 4).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 32,
            seed: 2,
            ..TrainConfig::default()
        };
        let a = train(&data, &model, theta, &cfg).unwrap();
        let b = train(&data, &model, theta, &cfg).unwrap();
        assert_eq!(a.system, b.system);
        assert_eq!(a.loss_history, b.loss_history);
    }

    #[test]
    fn degenerate_shapes_train() {
        let model = small_model(4.0);
        let data = generate_dataset(&model, 64, Alphabet::Binary, 3).unwrap();
        for (p, lt, m) in [(1, 1, 2), (1, 5, 2), (6, 1, 2), (2, 1, 4)] {
            let theta = AdcHyperparams::new(p, lt, m).unwrap();
            let cfg = TrainConfig {
                epochs: 2,
                batch_size: 1,
                ..TrainConfig::default()
            };
            let out = train(&data, &model, theta, &cfg).unwrap();
            assert!(out.system.is_hardened());
        }
    }

    #[test]
    fn factorized_and_regression_heads_train() {
        let model = small_model(10.0);
        let data = generate_dataset(&model, 256, Alphabet::Binary, 5).unwrap();
        let theta = AdcHyperparams::new(2, 4, 8).unwrap();
        let mut cfg = TrainConfig {
            epochs: 5,
            batch_size: 64,
            seed: 3,
            ..TrainConfig::default()
        };
        cfg.architecture.head = Head::Factorized;
        let out = train(&data, &model, theta, &cfg).unwrap();
        assert!(out.loss_history.last() < out.loss_history.first());
        assert_eq!(out.system.weights.digital.outputs(), 4);

        let real = generate_dataset(&model, 256, Alphabet::Real, 6).unwrap();
        let out = train(
            &real,
            &model,
            theta,
            &TrainConfig {
                epochs: 5,
                batch_size: 64,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        assert_eq!(out.system.task, Task::Regression);
        assert!(out.loss_history.last() < out.loss_history.first());
        let pred = out.system.detect(&real.pairs[0].1).unwrap();
        assert_eq!(pred.alphabet(), Alphabet::Real);
    }

    #[test]
    fn divergence_is_reported() {
        let model = small_model(4.0);
        let data = generate_dataset(&model, 64, Alphabet::Binary, 1).unwrap();
        let theta = AdcHyperparams::new(2, 3, 4).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 32,
            adam: AdamConfig {
                lr: f64::MAX,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let err = train(&data, &model, theta, &cfg);
        assert!(matches!(err, Err(Error::Divergence { .. })), "{err:?}");
    }
}
