//! Synthetic multichannel signal model on the dense time grid.
//!
//! The observed signal is `x(t) = G(t) s + w(t)` where the measurement matrix
//! has entries `sqrt(rho) (1 + 0.5 cos(2 pi f0 t)) exp(-|i - j|)` and `w` is
//! white Gaussian noise. Signals are represented by their `n x L` dense-grid
//! samples `x(j T / L)`.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::stream_rng;

/// Symbol alphabet of the task vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alphabet {
    /// `{-1, +1}`: the detection (classification) task.
    Binary,
    /// The real line: the regression demo.
    Real,
}

impl Alphabet {
    pub fn contains(self, v: f64) -> bool {
        match self {
            Alphabet::Binary => v == -1.0 || v == 1.0,
            Alphabet::Real => v.is_finite(),
        }
    }

    /// Number of symbols for finite alphabets.
    pub fn size(self) -> Option<usize> {
        match self {
            Alphabet::Binary => Some(2),
            Alphabet::Real => None,
        }
    }
}

/// The unknown vector `s` the acquisition system has to recover.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskVector {
    entries: Vec<f64>,
    alphabet: Alphabet,
}

impl TaskVector {
    pub fn new(entries: Vec<f64>, alphabet: Alphabet) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidParameter("task vector must have k >= 1".into()));
        }
        if let Some(bad) = entries.iter().find(|&&v| !alphabet.contains(v)) {
            return Err(Error::InvalidParameter(format!(
                "entry {bad} is outside the {alphabet:?} alphabet"
            )));
        }
        Ok(Self { entries, alphabet })
    }

    pub fn binary(entries: Vec<f64>) -> Result<Self> {
        Self::new(entries, Alphabet::Binary)
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn alphabet(&self) -> Alphabet {
        self.alphabet
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Draws a vector uniformly over `{-1,+1}^k` or from `N(0, I_k)`.
    pub fn random<R: Rng + ?Sized>(k: usize, alphabet: Alphabet, rng: &mut R) -> Self {
        let entries = (0..k)
            .map(|_| match alphabet {
                Alphabet::Binary => {
                    if rng.random::<bool>() {
                        1.0
                    } else {
                        -1.0
                    }
                }
                Alphabet::Real => rng.sample(StandardNormal),
            })
            .collect();
        Self { entries, alphabet }
    }

    /// Number of entries that differ from `other`.
    pub fn entry_errors(&self, other: &TaskVector) -> usize {
        self.entries.iter().zip(&other.entries).filter(|(a, b)| a != b).count()
    }
}

/// How a model perturbation scales with the SNR gain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationScale {
    /// Noise variance `fraction * |exp(-|i-j|)|` on the SNR-free spatial
    /// factor; the relative mismatch is the same at every SNR.
    #[default]
    SnrFree,
    /// Noise variance `fraction * |sqrt(rho) exp(-|i-j|)|` on the scaled
    /// entries; the relative mismatch shrinks as `rho` grows.
    SnrScaled,
}

/// Additive i.i.d. Gaussian corruption of the spatial measurement matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub fraction: f64,
    #[serde(default)]
    pub scale: PerturbationScale,
}

impl Perturbation {
    pub fn new(fraction: f64) -> Self {
        Self {
            fraction,
            scale: PerturbationScale::default(),
        }
    }
}

/// Generative description of the analog scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalModel {
    /// Number of analog channels.
    pub n: usize,
    /// Task dimension.
    pub k: usize,
    /// Observation window `T` in seconds.
    pub duration: f64,
    /// Dense grid size `L`.
    pub grid_len: usize,
    /// Linear SNR scale `rho`.
    pub rho: f64,
    /// Temporal modulation frequency in Hz.
    pub f0: f64,
    /// Noise variance per grid sample.
    pub noise_variance: f64,
    /// SNR-free spatial factor, `exp(-|i-j|)` unless perturbed.
    spatial: Array2<f64>,
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

impl SignalModel {
    pub fn new(
        n: usize,
        k: usize,
        duration: f64,
        grid_len: usize,
        rho: f64,
        f0: f64,
        noise_variance: f64,
    ) -> Result<Self> {
        if n == 0 || k == 0 {
            return Err(Error::InvalidParameter("n and k must be positive".into()));
        }
        if grid_len == 0 {
            return Err(Error::InvalidParameter("grid size L must be >= 1".into()));
        }
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(Error::InvalidParameter(format!("duration T = {duration} must be > 0")));
        }
        if !(rho >= 0.0 && rho.is_finite()) {
            return Err(Error::InvalidParameter(format!("rho = {rho} must be >= 0")));
        }
        if !(noise_variance > 0.0 && noise_variance.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "noise variance {noise_variance} must be > 0"
            )));
        }
        let spatial = Array2::from_shape_fn((n, k), |(i, j)| (-(i.abs_diff(j) as f64)).exp());
        Ok(Self {
            n,
            k,
            duration,
            grid_len,
            rho,
            f0,
            noise_variance,
            spatial,
        })
    }

    /// The synthetic case study: `T = 1 us`, `L = 20`, `f0 = 1 kHz`, unit noise.
    pub fn synthetic(n: usize, k: usize, snr_db: f64) -> Result<Self> {
        Self::new(n, k, 1e-6, 20, db_to_linear(snr_db), 1e3, 1.0)
    }

    pub fn with_rho(&self, rho: f64) -> Result<Self> {
        if !(rho >= 0.0 && rho.is_finite()) {
            return Err(Error::InvalidParameter(format!("rho = {rho} must be >= 0")));
        }
        Ok(Self { rho, ..self.clone() })
    }

    pub fn with_snr_db(&self, snr_db: f64) -> Result<Self> {
        self.with_rho(db_to_linear(snr_db))
    }

    /// Grid spacing `T_L = T / L`.
    pub fn grid_spacing(&self) -> f64 {
        self.duration / self.grid_len as f64
    }

    pub fn spatial(&self) -> &Array2<f64> {
        &self.spatial
    }

    fn temporal(&self, t: f64) -> f64 {
        1.0 + 0.5 * (2.0 * PI * self.f0 * t).cos()
    }

    /// `G(t)` for `t` in `[0, T)`.
    pub fn measurement_matrix(&self, t: f64) -> Result<Array2<f64>> {
        if !(0.0..self.duration).contains(&t) {
            return Err(Error::Domain(format!(
                "t = {t} outside the observation window [0, {})",
                self.duration
            )));
        }
        Ok(self.matrix_at(t))
    }

    fn matrix_at(&self, t: f64) -> Array2<f64> {
        &self.spatial * (self.rho.sqrt() * self.temporal(t))
    }

    /// `G(j T_L)` at grid index `j`.
    pub fn grid_matrix(&self, j: usize) -> Array2<f64> {
        self.matrix_at(j as f64 * self.grid_spacing())
    }

    /// Noiseless dense signal `G(j T_L) s` for every grid column.
    pub fn mean_signal(&self, s: &[f64]) -> Result<Array2<f64>> {
        check_dim("task vector", self.k, s.len()).map(|_| {
            let gs = self.spatial.dot(&ArrayView1::from(s)) * self.rho.sqrt();
            let mut out = Array2::zeros((self.n, self.grid_len));
            for j in 0..self.grid_len {
                let m = self.temporal(j as f64 * self.grid_spacing());
                out.column_mut(j).assign(&(&gs * m));
            }
            out
        })
    }

    /// Draws `x(j T_L) = G(j T_L) s + w_j` on the dense grid.
    pub fn sample_dense_signal<R: Rng + ?Sized>(&self, s: &TaskVector, rng: &mut R) -> Result<DenseSignal> {
        let mut values = self.mean_signal(s.entries())?;
        let sd = self.noise_variance.sqrt();
        // Column-by-column draw order: j outer, channel inner.
        for j in 0..self.grid_len {
            for i in 0..self.n {
                let w: f64 = rng.sample(StandardNormal);
                values[[i, j]] += sd * w;
            }
        }
        Ok(DenseSignal { values })
    }

    /// Returns a copy whose spatial matrix carries one frozen draw of additive
    /// Gaussian noise. The temporal modulation is left intact.
    pub fn perturb<R: Rng + ?Sized>(&self, p: &Perturbation, rng: &mut R) -> Result<Self> {
        if !(p.fraction >= 0.0 && p.fraction.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "perturbation fraction {} must be >= 0",
                p.fraction
            )));
        }
        let mut out = self.clone();
        if p.fraction == 0.0 {
            return Ok(out);
        }
        let gain = self.rho.sqrt();
        for v in out.spatial.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            match p.scale {
                PerturbationScale::SnrFree => *v += z * (p.fraction * v.abs()).sqrt(),
                PerturbationScale::SnrScaled => {
                    if gain > 0.0 {
                        let entry = gain * *v;
                        *v = (entry + z * (p.fraction * entry.abs()).sqrt()) / gain;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Free-function form of [`SignalModel::measurement_matrix`].
pub fn measurement_matrix(t: f64, model: &SignalModel) -> Result<Array2<f64>> {
    model.measurement_matrix(t)
}

pub fn sample_dense_signal<R: Rng + ?Sized>(model: &SignalModel, s: &TaskVector, rng: &mut R) -> Result<DenseSignal> {
    model.sample_dense_signal(s, rng)
}

pub fn perturb_model<R: Rng + ?Sized>(
    model: &SignalModel,
    perturbation: &Perturbation,
    rng: &mut R,
) -> Result<SignalModel> {
    model.perturb(perturbation, rng)
}

/// Dense-grid samples of one observation window, `n x L`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseSignal {
    values: Array2<f64>,
}

impl DenseSignal {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("dense signal has non-finite entries".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn channels(&self) -> usize {
        self.values.nrows()
    }

    pub fn grid_len(&self) -> usize {
        self.values.ncols()
    }

    /// Time-major flattening `[x(0); x(T_L); ...]`, index `l * n + i`.
    pub fn write_time_major(&self, out: &mut [f64]) {
        let n = self.channels();
        for ((i, l), v) in self.values.indexed_iter() {
            out[l * n + i] = *v;
        }
    }

    pub fn time_major(&self) -> Array1<f64> {
        let mut out = Array1::zeros(self.values.len());
        self.write_time_major(out.as_slice_mut().expect("contiguous"));
        out
    }
}

/// Where training pairs come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum DataSource {
    /// Every pair is drawn from the given model.
    #[default]
    Exact,
    /// Every pair is drawn from its own independently perturbed copy of the
    /// model, i.e. from the model-uncertainty ensemble.
    PerturbedEnsemble(Perturbation),
}

/// Labelled training or test pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub pairs: Vec<(TaskVector, DenseSignal)>,
    pub rho: f64,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn alphabet(&self) -> Alphabet {
        self.pairs[0].0.alphabet()
    }

    pub fn task_dim(&self) -> usize {
        self.pairs[0].0.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        let x = &self.pairs[0].1;
        (x.channels(), x.grid_len())
    }
}

/// Draws `count` pairs. Item `i` uses stream `i` of `seed`, so the result does
/// not depend on how the work is scheduled.
pub fn generate_dataset(model: &SignalModel, count: usize, alphabet: Alphabet, seed: u64) -> Result<Dataset> {
    generate_dataset_from(model, DataSource::Exact, count, alphabet, seed)
}

pub fn generate_dataset_from(
    model: &SignalModel,
    source: DataSource,
    count: usize,
    alphabet: Alphabet,
    seed: u64,
) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::InvalidParameter("dataset size N must be >= 1".into()));
    }
    let pairs = (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i);
            let s = TaskVector::random(model.k, alphabet, &mut rng);
            let x = match source {
                DataSource::Exact => model.sample_dense_signal(&s, &mut rng)?,
                DataSource::PerturbedEnsemble(p) => {
                    let m = model.perturb(&p, &mut rng)?;
                    m.sample_dense_signal(&s, &mut rng)?
                }
            };
            Ok((s, x))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        pairs,
        rho: model.rho,
        seed,
    })
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

pub const DATASET_FORMAT: &str = "taskadc-dataset";
pub const DATASET_VERSION: u32 = 1;

/// On-disk layout: shape metadata plus two row-major matrices, `tasks`
/// (`count x k`) and `signals` (`count x (n * L)`, channel-major within an
/// item so entry `(i, l)` of item `m` is at `m * n * L + i * L + l`).
#[derive(Serialize, Deserialize)]
struct DatasetFile {
    format: String,
    version: u32,
    seed: u64,
    rho: f64,
    alphabet: Alphabet,
    count: usize,
    k: usize,
    n: usize,
    grid_len: usize,
    tasks: Vec<f64>,
    signals: Vec<f64>,
}

impl Dataset {
    pub fn to_json(&self) -> Result<String> {
        let (n, grid_len) = self.shape();
        let k = self.task_dim();
        let mut tasks = Vec::with_capacity(self.len() * k);
        let mut signals = Vec::with_capacity(self.len() * n * grid_len);
        for (s, x) in &self.pairs {
            tasks.extend_from_slice(s.entries());
            signals.extend(x.values().iter().copied());
        }
        let file = DatasetFile {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            seed: self.seed,
            rho: self.rho,
            alphabet: self.alphabet(),
            count: self.len(),
            k,
            n,
            grid_len,
            tasks,
            signals,
        };
        serde_json::to_string(&file).map_err(|e| Error::Corrupt(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: DatasetFile = serde_json::from_str(text).map_err(|e| Error::Corrupt(format!("dataset: {e}")))?;
        if f.format != DATASET_FORMAT {
            return Err(Error::Corrupt(format!("unexpected format tag '{}'", f.format)));
        }
        if f.version != DATASET_VERSION {
            return Err(Error::VersionMismatch {
                found: f.version,
                expected: DATASET_VERSION,
            });
        }
        if f.count == 0 || f.tasks.len() != f.count * f.k || f.signals.len() != f.count * f.n * f.grid_len {
            return Err(Error::Corrupt("dataset matrix sizes disagree with header".into()));
        }
        let block = f.n * f.grid_len;
        let pairs = f
            .tasks
            .chunks(f.k)
            .zip(f.signals.chunks(block))
            .map(|(s, x)| {
                let s = TaskVector::new(s.to_vec(), f.alphabet)?;
                let values =
                    Array2::from_shape_vec((f.n, f.grid_len), x.to_vec()).map_err(|e| Error::Corrupt(e.to_string()))?;
                Ok((s, DenseSignal::new(values)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            pairs,
            rho: f.rho,
            seed: f.seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
