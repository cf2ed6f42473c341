//! Model-based MAP detectors used as references for the learned system.
//!
//! With uniform symbol priors and white Gaussian noise the MAP rule over the
//! unquantized samples is the nearest noiseless signal. Every detector
//! precomputes the `|S|^k` noiseless signals of the model it is given.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{check_dim, Error, Result};
use crate::pipeline::{decode_class, encode_class};
use crate::signal::{DenseSignal, SignalModel, TaskVector};

/// Largest hypothesis count an exhaustive detector accepts.
pub const MAX_HYPOTHESES: usize = 1 << 20;

/// Quantizer with `M~` equal cells over `[-r, r]`; the outer cells extend
/// to infinity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformQuantizer {
    levels: usize,
    range: f64,
    borders: Vec<f64>,
}

impl UniformQuantizer {
    pub fn new(levels: usize, range: f64) -> Result<Self> {
        if levels < 2 {
            return Err(Error::InvalidParameter(format!("need M~ >= 2, got {levels}")));
        }
        if !(range > 0.0 && range.is_finite()) {
            return Err(Error::InvalidParameter(format!("range {range} must be > 0")));
        }
        let width = 2.0 * range / levels as f64;
        let borders = (1..levels).map(|i| -range + i as f64 * width).collect();
        Ok(Self { levels, range, borders })
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn range(&self) -> f64 {
        self.range
    }

    pub fn cell_width(&self) -> f64 {
        2.0 * self.range / self.levels as f64
    }

    pub fn borders(&self) -> &[f64] {
        &self.borders
    }

    /// Cell index; a value on a border belongs to the upper cell.
    pub fn cell(&self, v: f64) -> usize {
        self.borders.partition_point(|&b| b <= v)
    }

    /// Edges `(lower, upper)` of a cell, infinite for the outer cells.
    pub fn edges(&self, cell: usize) -> (f64, f64) {
        let lower = if cell == 0 {
            f64::NEG_INFINITY
        } else {
            self.borders[cell - 1]
        };
        let upper = if cell + 1 == self.levels {
            f64::INFINITY
        } else {
            self.borders[cell]
        };
        (lower, upper)
    }
}

/// Grid indices nearest to the uniform times `(m + 1/2) T / L~`; ties go to
/// the lower index.
pub fn uniform_sample_indices(grid_len: usize, samples: usize) -> Result<Vec<usize>> {
    if samples == 0 || samples > grid_len {
        return Err(Error::InvalidParameter(format!(
            "need 1 <= L~ <= L, got L~ = {samples}, L = {grid_len}"
        )));
    }
    // ceil(((2m + 1) L - L~) / (2 L~)) in integers.
    Ok((0..samples)
        .map(|m| {
            let num = (2 * m + 1) * grid_len - samples;
            num.div_ceil(2 * samples).min(grid_len - 1)
        })
        .collect())
}

fn hypothesis_count(k: usize) -> Result<usize> {
    match 1usize.checked_shl(k as u32) {
        Some(c) if c <= MAX_HYPOTHESES => Ok(c),
        other => Err(Error::SearchTooLarge {
            classes: other.unwrap_or(usize::MAX),
            limit: MAX_HYPOTHESES,
        }),
    }
}

/// Noiseless samples of every hypothesis at `columns`, flattened `n x |cols|`.
fn class_means(model: &SignalModel, columns: &[usize]) -> Result<Array2<f64>> {
    let classes = hypothesis_count(model.k)?;
    let width = model.n * columns.len();
    let mut out = Array2::zeros((classes, width));
    for c in 0..classes {
        let mean = model.mean_signal(&decode_class(c, model.k))?;
        let mut row = out.row_mut(c);
        for i in 0..model.n {
            for (j, &col) in columns.iter().enumerate() {
                row[i * columns.len() + j] = mean[[i, col]];
            }
        }
    }
    Ok(out)
}

fn gather(x: &DenseSignal, columns: &[usize]) -> Vec<f64> {
    let v = x.values();
    let mut out = Vec::with_capacity(v.nrows() * columns.len());
    for i in 0..v.nrows() {
        out.extend(columns.iter().map(|&c| v[[i, c]]));
    }
    out
}

fn nearest_class(obs: &[f64], means: &Array2<f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (c, row) in means.rows().into_iter().enumerate() {
        let d: f64 = row.iter().zip(obs).map(|(m, o)| (o - m) * (o - m)).sum();
        if d < best.1 {
            best = (c, d);
        }
    }
    best.0
}

fn check_signal(x: &DenseSignal, model: &SignalModel) -> Result<()> {
    check_dim("signal channels", model.n, x.channels())?;
    check_dim("signal grid length", model.grid_len, x.grid_len())
}

/// Nearest noiseless signal over the full dense grid.
#[derive(Debug, Clone)]
pub struct MapFull {
    model: SignalModel,
    columns: Vec<usize>,
    means: Array2<f64>,
}

impl MapFull {
    pub fn new(model: &SignalModel) -> Result<Self> {
        let columns: Vec<usize> = (0..model.grid_len).collect();
        Ok(Self {
            model: model.clone(),
            means: class_means(model, &columns)?,
            columns,
        })
    }

    pub fn detect(&self, x: &DenseSignal) -> Result<TaskVector> {
        check_signal(x, &self.model)?;
        let class = nearest_class(&gather(x, &self.columns), &self.means);
        TaskVector::binary(decode_class(class, self.model.k))
    }
}

/// Nearest noiseless signal restricted to `L~` uniformly spaced samples.
#[derive(Debug, Clone)]
pub struct MapSampled {
    model: SignalModel,
    columns: Vec<usize>,
    means: Array2<f64>,
}

impl MapSampled {
    pub fn new(model: &SignalModel, samples: usize) -> Result<Self> {
        let columns = uniform_sample_indices(model.grid_len, samples)?;
        Ok(Self {
            model: model.clone(),
            means: class_means(model, &columns)?,
            columns,
        })
    }

    pub fn sample_indices(&self) -> &[usize] {
        &self.columns
    }

    pub fn detect(&self, x: &DenseSignal) -> Result<TaskVector> {
        check_signal(x, &self.model)?;
        let class = nearest_class(&gather(x, &self.columns), &self.means);
        TaskVector::binary(decode_class(class, self.model.k))
    }
}

/// Bits per sample for the sampled-quantized detector: `floor(B / (n L~))`.
pub fn bits_per_sample(budget: usize, n: usize, samples: usize) -> Result<usize> {
    let bits = budget / (n * samples);
    if bits == 0 {
        return Err(Error::InvalidParameter(format!(
            "budget {budget} leaves zero bits for {n} x {samples} samples"
        )));
    }
    if bits > 30 {
        return Err(Error::InvalidParameter(format!(
            "{bits} bits per sample is beyond the supported 30"
        )));
    }
    Ok(bits)
}

/// `log Q(x)`, the log upper tail of the standard normal.
pub fn log_upper_tail(x: f64) -> f64 {
    if x < 30.0 {
        (0.5 * erfc(x / std::f64::consts::SQRT_2)).ln()
    } else {
        // Asymptotic series once erfc underflows.
        let x2 = x * x;
        -0.5 * x2 - (x * (2.0 * std::f64::consts::PI).sqrt()).ln() + (1.0 - 1.0 / x2 + 3.0 / (x2 * x2)).ln()
    }
}

/// `log P(a <= Z < b)` for standard normal `Z`.
pub fn log_interval_prob(a: f64, b: f64) -> f64 {
    if a >= b {
        return f64::NEG_INFINITY;
    }
    if a >= 0.0 {
        upper_difference(a, b)
    } else if b <= 0.0 {
        upper_difference(-b, -a)
    } else {
        // Central interval: 1 - Q(-a) - Q(b).
        let lower = 0.5 * erfc(-a / std::f64::consts::SQRT_2);
        let upper = 0.5 * erfc(b / std::f64::consts::SQRT_2);
        ((1.0 - lower) - upper).ln()
    }
}

/// `log(Q(a) - Q(b))` for `0 <= a < b`.
fn upper_difference(a: f64, b: f64) -> f64 {
    let la = log_upper_tail(a);
    if b == f64::INFINITY {
        return la;
    }
    let lb = log_upper_tail(b);
    la + (-(lb - la).exp()).ln_1p()
}

/// Maximum-likelihood detection from uniformly sampled, uniformly quantized
/// channels (no analog combining).
#[derive(Debug, Clone)]
pub struct MapSampledQuantized {
    model: SignalModel,
    columns: Vec<usize>,
    means: Array2<f64>,
    quantizer: UniformQuantizer,
    bits: usize,
}

impl MapSampledQuantized {
    pub fn new(model: &SignalModel, samples: usize, budget: usize) -> Result<Self> {
        let bits = bits_per_sample(budget, model.n, samples)?;
        let columns = uniform_sample_indices(model.grid_len, samples)?;
        let means = class_means(model, &columns)?;
        let rms = (means.iter().map(|v| v * v).sum::<f64>() / means.len() as f64).sqrt();
        let range = 3.0 * rms + 3.0 * model.noise_variance.sqrt();
        let quantizer = UniformQuantizer::new(1 << bits, range)?;
        Ok(Self {
            model: model.clone(),
            columns,
            means,
            quantizer,
            bits,
        })
    }

    pub fn bits_per_sample(&self) -> usize {
        self.bits
    }

    pub fn model_channels(&self) -> usize {
        self.model.n
    }

    pub fn quantizer(&self) -> &UniformQuantizer {
        &self.quantizer
    }

    pub fn sample_indices(&self) -> &[usize] {
        &self.columns
    }

    /// Quantized cell of each sampled entry.
    pub fn cells(&self, x: &DenseSignal) -> Vec<usize> {
        gather(x, &self.columns)
            .into_iter()
            .map(|v| self.quantizer.cell(v))
            .collect()
    }

    /// Log-likelihood of each hypothesis given observed cells.
    pub fn log_likelihoods(&self, cells: &[usize]) -> Vec<f64> {
        let sd = self.model.noise_variance.sqrt();
        let edges: Vec<(f64, f64)> = cells.iter().map(|&c| self.quantizer.edges(c)).collect();
        self.means
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .zip(&edges)
                    .map(|(mu, (lo, hi))| {
                        if sd == 0.0 {
                            if *lo <= *mu && *mu < *hi {
                                0.0
                            } else {
                                f64::NEG_INFINITY
                            }
                        } else {
                            log_interval_prob((lo - mu) / sd, (hi - mu) / sd)
                        }
                    })
                    .sum()
            })
            .collect()
    }

    pub fn detect(&self, x: &DenseSignal) -> Result<TaskVector> {
        check_signal(x, &self.model)?;
        let ll = self.log_likelihoods(&self.cells(x));
        let mut best = (0, f64::NEG_INFINITY);
        for (c, &v) in ll.iter().enumerate() {
            if v > best.1 {
                best = (c, v);
            }
        }
        TaskVector::binary(decode_class(best.0, self.model.k))
    }
}

/// One-shot form of [`MapFull`].
pub fn map_full(x: &DenseSignal, model: &SignalModel) -> Result<TaskVector> {
    MapFull::new(model)?.detect(x)
}

/// One-shot form of [`MapSampled`].
pub fn map_sampled(x: &DenseSignal, model: &SignalModel, samples: usize) -> Result<TaskVector> {
    MapSampled::new(model, samples)?.detect(x)
}

/// One-shot form of [`MapSampledQuantized`].
pub fn map_sampled_quantized(
    x: &DenseSignal,
    model: &SignalModel,
    samples: usize,
    budget: usize,
) -> Result<TaskVector> {
    MapSampledQuantized::new(model, samples, budget)?.detect(x)
}

/// Class index of a decision, for tie-break checks.
pub fn class_of(s: &TaskVector) -> usize {
    encode_class(s.entries())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::signal::{Alphabet, TaskVector};
    use rand::Rng;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn model(k: usize, snr_db: f64) -> SignalModel {
        SignalModel::synthetic(6, k, snr_db).unwrap()
    }

    /// Gaussian log-density of `x` under hypothesis `s`, up to a constant.
    fn log_density(x: &DenseSignal, m: &SignalModel, s: &[f64], columns: &[usize]) -> f64 {
        let mut total = 0.0;
        for &j in columns {
            let g = m.grid_matrix(j);
            for i in 0..m.n {
                let mu: f64 = (0..m.k).map(|c| g[[i, c]] * s[c]).sum();
                total -= (x.values()[[i, j]] - mu).powi(2) / (2.0 * m.noise_variance);
            }
        }
        total
    }

    fn brute_force(x: &DenseSignal, m: &SignalModel, columns: &[usize]) -> Vec<f64> {
        let mut best = (vec![], f64::NEG_INFINITY);
        for c in 0..(1 << m.k) {
            let s = decode_class(c, m.k);
            let ll = log_density(x, m, &s, columns);
            if ll > best.1 {
                best = (s, ll);
            }
        }
        best.0
    }

    /// Direct product of normal cell probabilities (no logs).
    fn brute_force_quantized(x: &DenseSignal, m: &SignalModel, det: &MapSampledQuantized) -> Vec<f64> {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let sd = m.noise_variance.sqrt();
        let cols = det.sample_indices();
        let q = det.quantizer();
        let mut best = (vec![], -1.0);
        for c in 0..(1 << m.k) {
            let s = decode_class(c, m.k);
            let mut prob = 1.0;
            for &j in cols {
                let g = m.grid_matrix(j);
                for i in 0..m.n {
                    let mu: f64 = (0..m.k).map(|t| g[[i, t]] * s[t]).sum();
                    let v = x.values()[[i, j]];
                    let mut cell = 0;
                    for b in q.borders() {
                        if v >= *b {
                            cell += 1;
                        }
                    }
                    let lo = if cell == 0 {
                        f64::NEG_INFINITY
                    } else {
                        q.borders()[cell - 1]
                    };
                    let hi = if cell == q.levels() - 1 {
                        f64::INFINITY
                    } else {
                        q.borders()[cell]
                    };
                    prob *= normal.cdf((hi - mu) / sd) - normal.cdf((lo - mu) / sd);
                }
            }
            if prob > best.1 {
                best = (s, prob);
            }
        }
        best.0
    }

    #[test]
    fn uniform_quantizer_layout() {
        let q = UniformQuantizer::new(4, 2.0).unwrap();
        assert_eq!(q.borders(), &[-1.0, 0.0, 1.0]);
        assert_eq!(q.cell(0.0), 2);
        assert_eq!(q.cell(-5.0), 0);
        assert_eq!(q.edges(0), (f64::NEG_INFINITY, -1.0));
        assert_eq!(q.edges(3), (1.0, f64::INFINITY));
        assert!(UniformQuantizer::new(1, 1.0).is_err());
        assert!(UniformQuantizer::new(2, 0.0).is_err());
    }

    #[test]
    fn uniform_indices() {
        // Midpoints 2.5, 7.5, 12.5, 17.5 round down on ties.
        assert_eq!(uniform_sample_indices(20, 4).unwrap(), vec![2, 7, 12, 17]);
        assert_eq!(uniform_sample_indices(20, 20).unwrap(), (0..20).collect::<Vec<_>>());
        assert_eq!(uniform_sample_indices(20, 1).unwrap(), vec![10]);
        assert_eq!(uniform_sample_indices(20, 3).unwrap(), vec![3, 10, 17]);
        for lt in 1..=20 {
            let idx = uniform_sample_indices(20, lt).unwrap();
            for (m, &i) in idx.iter().enumerate() {
                let u = (m as f64 + 0.5) * 20.0 / lt as f64;
                let d = (i as f64 - u).abs();
                assert!(d <= 0.5 + 1e-12);
                assert!(i == 0 || (i as f64 - 1.0 - u).abs() >= d - 1e-12);
            }
            assert!(idx.windows(2).all(|w| w[0] < w[1]));
        }
        assert!(uniform_sample_indices(20, 21).is_err());
    }

    #[test]
    fn noiseless_signals_are_recovered() {
        let m = model(4, 0.0).with_rho(1.0).unwrap();
        let mut quiet = m.clone();
        quiet.noise_variance = 1e-12;
        let mut rng = seeded(1);
        let full = MapFull::new(&quiet).unwrap();
        let sampled = MapSampled::new(&quiet, 4).unwrap();
        for _ in 0..16 {
            let s = TaskVector::random(4, Alphabet::Binary, &mut rng);
            let x = quiet.sample_dense_signal(&s, &mut rng).unwrap();
            assert_eq!(full.detect(&x).unwrap(), s);
            assert_eq!(sampled.detect(&x).unwrap(), s);
        }
    }

    #[test]
    fn full_grid_sampled_map_equals_full_map() {
        let m = model(3, 0.0);
        let full = MapFull::new(&m).unwrap();
        let sampled = MapSampled::new(&m, 20).unwrap();
        let mut rng = seeded(2);
        for _ in 0..200 {
            let s = TaskVector::random(3, Alphabet::Binary, &mut rng);
            let x = m.sample_dense_signal(&s, &mut rng).unwrap();
            assert_eq!(full.detect(&x).unwrap(), sampled.detect(&x).unwrap());
        }
    }

    #[test]
    fn zero_snr_decisions_ignore_the_symbols() {
        let m = model(2, 0.0).with_rho(0.0).unwrap();
        let full = MapFull::new(&m).unwrap();
        let mut rng = seeded(3);
        let mut errors = 0;
        let trials = 4000;
        for _ in 0..trials {
            let s = TaskVector::random(2, Alphabet::Binary, &mut rng);
            let x = m.sample_dense_signal(&s, &mut rng).unwrap();
            let d = full.detect(&x).unwrap();
            // All means coincide, so the first class always wins.
            assert_eq!(class_of(&d), 0);
            errors += d.entry_errors(&s);
        }
        let rate = errors as f64 / (2 * trials) as f64;
        assert!((rate - 0.5).abs() < 0.03);
    }

    #[test]
    fn detectors_match_brute_force_enumeration() {
        for k in [2usize, 4] {
            let m = model(k, 1.0);
            let full = MapFull::new(&m).unwrap();
            let sampled = MapSampled::new(&m, 4).unwrap();
            let quant = MapSampledQuantized::new(&m, 4, 48).unwrap();
            let mut rng = seeded(40 + k as u64);
            for _ in 0..300 {
                let s = TaskVector::random(k, Alphabet::Binary, &mut rng);
                let x = m.sample_dense_signal(&s, &mut rng).unwrap();
                let all: Vec<usize> = (0..20).collect();
                assert_eq!(full.detect(&x).unwrap().entries(), brute_force(&x, &m, &all).as_slice());
                assert_eq!(
                    sampled.detect(&x).unwrap().entries(),
                    brute_force(&x, &m, sampled.sample_indices()).as_slice()
                );
                assert_eq!(
                    quant.detect(&x).unwrap().entries(),
                    brute_force_quantized(&x, &m, &quant).as_slice()
                );
            }
        }
    }

    #[test]
    fn two_bits_per_sample_at_paper_budget() {
        assert_eq!(bits_per_sample(48, 6, 4).unwrap(), 2);
        assert!(bits_per_sample(20, 6, 4).is_err());
        let q = MapSampledQuantized::new(&model(4, 2.0), 4, 48).unwrap();
        assert_eq!(q.quantizer().levels(), 4);
    }

    #[test]
    fn fine_quantization_converges_to_sampled_map() {
        let m = model(4, 0.0);
        let sampled = MapSampled::new(&m, 4).unwrap();
        let fine = MapSampledQuantized::new(&m, 4, 6 * 4 * 16).unwrap();
        assert_eq!(fine.bits_per_sample(), 16);
        let mut rng = seeded(5);
        for _ in 0..500 {
            let s = TaskVector::random(4, Alphabet::Binary, &mut rng);
            let x = m.sample_dense_signal(&s, &mut rng).unwrap();
            assert_eq!(sampled.detect(&x).unwrap(), fine.detect(&x).unwrap());
        }
    }

    #[test]
    fn one_bit_scalar_detector_is_a_majority_vote() {
        let m = SignalModel::synthetic(1, 1, 0.0).unwrap();
        let det = MapSampledQuantized::new(&m, 5, 5).unwrap();
        assert_eq!(det.bits_per_sample(), 1);
        assert_eq!(det.quantizer().borders(), &[0.0]);
        let mut rng = seeded(6);
        for _ in 0..500 {
            let s = TaskVector::random(1, Alphabet::Binary, &mut rng);
            let x = m.sample_dense_signal(&s, &mut rng).unwrap();
            let positive = det
                .sample_indices()
                .iter()
                .filter(|&&j| x.values()[[0, j]] >= 0.0)
                .count();
            let vote = if positive >= 3 { 1.0 } else { -1.0 };
            assert_eq!(det.detect(&x).unwrap().entries(), &[vote]);
        }
    }

    #[test]
    fn decisions_are_scale_consistent() {
        let m = model(3, 2.0);
        let c: f64 = 3.7;
        let mut scaled = m.with_rho(m.rho * c * c).unwrap();
        scaled.noise_variance = m.noise_variance * c * c;
        let pairs = [(MapFull::new(&m).unwrap(), MapFull::new(&scaled).unwrap())];
        let sampled = (MapSampled::new(&m, 5).unwrap(), MapSampled::new(&scaled, 5).unwrap());
        let quant = (
            MapSampledQuantized::new(&m, 5, 60).unwrap(),
            MapSampledQuantized::new(&scaled, 5, 60).unwrap(),
        );
        let mut rng = seeded(7);
        for _ in 0..300 {
            let s = TaskVector::random(3, Alphabet::Binary, &mut rng);
            let x = m.sample_dense_signal(&s, &mut rng).unwrap();
            let xs = DenseSignal::new(x.values() * c).unwrap();
            assert_eq!(pairs[0].0.detect(&x).unwrap(), pairs[0].1.detect(&xs).unwrap());
            assert_eq!(sampled.0.detect(&x).unwrap(), sampled.1.detect(&xs).unwrap());
            assert_eq!(quant.0.detect(&x).unwrap(), quant.1.detect(&xs).unwrap());
        }
    }

    #[test]
    fn exhaustive_search_is_bounded() {
        let m = SignalModel::synthetic(2, 21, 0.0).unwrap();
        assert!(matches!(MapFull::new(&m), Err(Error::SearchTooLarge { .. })));
    }

    #[test]
    fn interval_log_probabilities_are_stable() {
        let normal = Normal::new(0.0, 1.0).unwrap();
        for (a, b) in [
            (-1.0, 0.5),
            (0.3, 2.0),
            (-3.0, -0.2),
            (f64::NEG_INFINITY, 0.0),
            (1.0, f64::INFINITY),
        ] {
            let want = (normal.cdf(b) - normal.cdf(a)).ln();
            assert!((log_interval_prob(a, b) - want).abs() < 1e-10, "({a}, {b})");
        }
        // Far tails stay finite and ordered.
        let far = log_interval_prob(40.0, f64::INFINITY);
        let farther = log_interval_prob(45.0, f64::INFINITY);
        assert!(far.is_finite() && farther < far);
        // Asymptotic branch agrees with erfc where both are representable.
        let direct = (0.5 * erfc(30.0 / std::f64::consts::SQRT_2)).ln();
        assert!((log_upper_tail(30.0) - direct).abs() < 1e-6);
        assert!(log_interval_prob(-50.0, -45.0).is_finite());
        let mut rng = seeded(8);
        for _ in 0..100 {
            let a: f64 = rng.random_range(-5.0..5.0);
            let b = a + rng.random_range(0.01..3.0);
            let want = (normal.cdf(b) - normal.cdf(a)).ln();
            assert!((log_interval_prob(a, b) - want).abs() < 1e-8 * want.abs().max(1.0));
        }
    }
}
