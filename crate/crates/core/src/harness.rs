//! Monte Carlo error-rate estimation, SNR sweeps, grid scans and CSV export.
//!
//! Trials are drawn in fixed chunks of [`CHUNK`]; chunk `c` uses stream `c`
//! of the evaluation seed and chunk results are reduced in index order, so
//! counts do not depend on the size of the worker pool.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{Detector, DetectorContext, DetectorRegistry, Learned};
use crate::error::{Error, Result};
use crate::meta::{meta_objective, MetaObjectiveConfig};
use crate::pipeline::{count_errors, train, AdcHyperparams, TaskSystem, TrainConfig};
use crate::rng::{derive_seed, stream_rng};
use crate::signal::{generate_dataset_from, Alphabet, DataSource, DenseSignal, Perturbation, SignalModel, TaskVector};

/// Trials per random stream.
pub const CHUNK: usize = 1000;

/// Normal quantile for 95% intervals.
pub const Z95: f64 = 1.96;

/// Wilson score interval for `errors` out of `n`.
pub fn wilson_interval(errors: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let nf = n as f64;
    let p = errors as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z / denom * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    let low = if errors == 0 { 0.0 } else { (center - half).max(0.0) };
    let high = if errors == n { 1.0 } else { (center + half).min(1.0) };
    (low, high)
}

/// Per-entry and per-vector error counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub trials: usize,
    /// Entries per task vector.
    pub k: usize,
    pub entry_errors: usize,
    pub vector_errors: usize,
}

impl ErrorCounts {
    pub fn merge(self, other: ErrorCounts) -> ErrorCounts {
        ErrorCounts {
            trials: self.trials + other.trials,
            k: self.k.max(other.k),
            entry_errors: self.entry_errors + other.entry_errors,
            vector_errors: self.vector_errors + other.vector_errors,
        }
    }

    pub fn entries(&self) -> usize {
        self.trials * self.k
    }

    pub fn symbol_rate(&self) -> f64 {
        self.entry_errors as f64 / self.entries().max(1) as f64
    }

    pub fn vector_rate(&self) -> f64 {
        self.vector_errors as f64 / self.trials.max(1) as f64
    }

    pub fn symbol_ci(&self) -> (f64, f64) {
        wilson_interval(self.entry_errors, self.entries(), Z95)
    }

    pub fn vector_ci(&self) -> (f64, f64) {
        wilson_interval(self.vector_errors, self.trials, Z95)
    }
}

/// Draws trial chunk `chunk` of a stream: `(s, x)` pairs from `model`.
pub fn draw_chunk(model: &SignalModel, seed: u64, chunk: usize, size: usize) -> Result<Vec<(TaskVector, DenseSignal)>> {
    let mut rng = stream_rng(seed, chunk as u64);
    (0..size)
        .map(|_| {
            let s = TaskVector::random(model.k, Alphabet::Binary, &mut rng);
            let x = model.sample_dense_signal(&s, &mut rng)?;
            Ok((s, x))
        })
        .collect()
}

/// Error counts of `detector` over `trials` fresh draws from `model`.
pub fn monte_carlo_error_rate(
    detector: &dyn Detector,
    model: &SignalModel,
    trials: usize,
    seed: u64,
) -> Result<ErrorCounts> {
    monte_carlo_pooled(&[detector], model, trials, seed)
}

/// Like [`monte_carlo_error_rate`], with chunk `c` handled by
/// `detectors[c % len]`; used to pool an oracle over several model draws.
pub fn monte_carlo_pooled(
    detectors: &[&dyn Detector],
    model: &SignalModel,
    trials: usize,
    seed: u64,
) -> Result<ErrorCounts> {
    if trials == 0 {
        return Err(Error::InvalidParameter("need at least one trial".into()));
    }
    if detectors.is_empty() {
        return Err(Error::InvalidParameter("no detector given".into()));
    }
    let chunks = trials.div_ceil(CHUNK);
    let parts = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let size = CHUNK.min(trials - c * CHUNK);
            let pairs = draw_chunk(model, seed, c, size)?;
            let signals: Vec<&DenseSignal> = pairs.iter().map(|(_, x)| x).collect();
            let truth: Vec<&TaskVector> = pairs.iter().map(|(s, _)| s).collect();
            let det = detectors[c % detectors.len()];
            let decisions = det.detect_batch(&signals)?;
            let (entry_errors, vector_errors) = count_errors(&decisions, &truth);
            Ok(ErrorCounts {
                trials: size,
                k: model.k,
                entry_errors,
                vector_errors,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().fold(ErrorCounts::default(), ErrorCounts::merge))
}

/// One evaluated (detector, SNR) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub detector: String,
    pub snr_db: f64,
    pub bit_cost: Option<usize>,
    pub counts: ErrorCounts,
    pub seed: u64,
    /// Seconds spent; kept out of CSV output.
    #[serde(skip)]
    pub wall_time: Option<f64>,
}

pub const EVAL_SCHEMA: &str = "taskadc-eval/1";

pub const EVAL_HEADER: &str = "detector,snr_db,bit_cost,trials,symbol_errors,symbol_error_rate,symbol_ci_low,\
symbol_ci_high,vector_errors,vector_error_rate,vector_ci_low,vector_ci_high,seed";

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else if v.is_nan() {
        "NA".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

impl EvalReport {
    pub fn csv_row(&self) -> String {
        let c = &self.counts;
        let (sl, sh) = c.symbol_ci();
        let (vl, vh) = c.vector_ci();
        [
            self.detector.clone(),
            num(self.snr_db),
            opt(self.bit_cost),
            c.trials.to_string(),
            c.entry_errors.to_string(),
            num(c.symbol_rate()),
            num(sl),
            num(sh),
            c.vector_errors.to_string(),
            num(c.vector_rate()),
            num(vl),
            num(vh),
            self.seed.to_string(),
        ]
        .join(",")
    }
}

/// CSV text for evaluation rows, led by a schema comment.
pub fn eval_csv(reports: &[EvalReport]) -> String {
    let mut out = format!("# schema: {EVAL_SCHEMA}\n{EVAL_HEADER}\n");
    for r in reports {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

/// Model mismatch applied to training data and MAP oracles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Uncertainty {
    pub perturbation: Perturbation,
    /// Frozen perturbed models each MAP oracle is pooled over.
    pub oracle_draws: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Model whose SNR is replaced at each point.
    pub model: SignalModel,
    pub snrs_db: Vec<f64>,
    pub detectors: Vec<String>,
    /// Learned system hyperparameters.
    pub theta: AdcHyperparams,
    /// `L~` of the sampled baselines.
    pub baseline_samples: usize,
    /// Bit budget of the sampled-quantized baseline.
    pub baseline_budget: usize,
    pub train: TrainConfig,
    pub train_size: usize,
    pub trials: usize,
    pub uncertainty: Option<Uncertainty>,
    pub seed: u64,
}

impl SweepConfig {
    /// Paper dimensions with the given detectors and SNR grid.
    pub fn paper(snrs_db: Vec<f64>, detectors: &[&str]) -> Self {
        let theta = AdcHyperparams::new(4, 4, 8).expect("valid");
        Self {
            model: SignalModel::synthetic(6, 4, 0.0).expect("valid"),
            snrs_db,
            detectors: detectors.iter().map(|s| s.to_string()).collect(),
            theta,
            baseline_samples: theta.samples,
            baseline_budget: theta.bit_cost(),
            train: TrainConfig::default(),
            train_size: 10_000,
            trials: 100_000,
            uncertainty: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub reports: Vec<EvalReport>,
    /// Learned system per SNR point, when one was trained.
    pub systems: Vec<Option<TaskSystem>>,
    pub loss_histories: Vec<Vec<f64>>,
}

impl SweepOutcome {
    pub fn find(&self, detector: &str, snr_db: f64) -> Option<&EvalReport> {
        self.reports
            .iter()
            .find(|r| r.detector == detector && r.snr_db == snr_db)
    }
}

/// Trains the learned system for one SNR point.
pub fn train_for_snr(cfg: &SweepConfig, model: &SignalModel, point: usize) -> Result<crate::pipeline::TrainOutcome> {
    let source = match cfg.uncertainty {
        Some(u) => DataSource::PerturbedEnsemble(u.perturbation),
        None => DataSource::Exact,
    };
    let data_seed = derive_seed(cfg.seed, "sweep-train-data", &[point as u64]);
    let data = generate_dataset_from(model, source, cfg.train_size, Alphabet::Binary, data_seed)?;
    let mut tc = cfg.train.clone();
    tc.seed = derive_seed(cfg.seed, "sweep-train", &[point as u64]);
    train(&data, model, cfg.theta, &tc)
}

/// Evaluates every detector at every SNR on a shared test stream per point,
/// training a fresh learned system per point when requested.
pub fn sweep_snr(cfg: &SweepConfig, registry: &DetectorRegistry) -> Result<SweepOutcome> {
    sweep_with(cfg, registry, |point, model| {
        let db = cfg.snrs_db[point];
        let t0 = std::time::Instant::now();
        let out = train_for_snr(cfg, model, point)?;
        log::info!("trained at {db} dB in {:.1}s", t0.elapsed().as_secs_f64());
        Ok((out.system, out.loss_history))
    })
}

/// Like [`sweep_snr`], with the learned detector using `system` at every
/// point instead of a freshly trained one.
pub fn sweep_snr_with_system(
    cfg: &SweepConfig,
    registry: &DetectorRegistry,
    system: &TaskSystem,
) -> Result<SweepOutcome> {
    system.check_model(&cfg.model)?;
    sweep_with(cfg, registry, |_, _| Ok((system.clone(), Vec::new())))
}

fn sweep_with(
    cfg: &SweepConfig,
    registry: &DetectorRegistry,
    mut learned: impl FnMut(usize, &SignalModel) -> Result<(TaskSystem, Vec<f64>)>,
) -> Result<SweepOutcome> {
    if cfg.snrs_db.is_empty() {
        return Err(Error::InvalidParameter("empty SNR grid".into()));
    }
    for d in &cfg.detectors {
        if !registry.contains(d) {
            return Err(Error::UnknownName {
                kind: "detector",
                name: d.clone(),
                known: registry.names().join(", "),
            });
        }
    }
    let mut reports = Vec::new();
    let mut systems = Vec::new();
    let mut histories = Vec::new();
    for (point, &db) in cfg.snrs_db.iter().enumerate() {
        let model = cfg.model.with_snr_db(db)?;
        let system = if cfg.detectors.iter().any(|d| d == "learned") {
            let (system, history) = learned(point, &model)?;
            histories.push(history);
            Some(system)
        } else {
            histories.push(Vec::new());
            None
        };
        // Same test stream for every detector at this point.
        let test_seed = derive_seed(cfg.seed, "sweep-test", &[point as u64]);
        for name in &cfg.detectors {
            let t0 = std::time::Instant::now();
            let oracle_models: Vec<SignalModel> = match (cfg.uncertainty, name.as_str()) {
                (Some(u), n) if n != "learned" => (0..u.oracle_draws.max(1))
                    .map(|r| {
                        let mut rng = crate::rng::seeded(derive_seed(cfg.seed, "oracle-perturbation", &[r as u64]));
                        model.perturb(&u.perturbation, &mut rng)
                    })
                    .collect::<Result<_>>()?,
                _ => vec![model.clone()],
            };
            let built: Vec<Box<dyn Detector>> = oracle_models
                .iter()
                .map(|m| {
                    registry.build(
                        name,
                        &DetectorContext {
                            model: m,
                            system: system.as_ref(),
                            samples: cfg.baseline_samples,
                            budget: cfg.baseline_budget,
                        },
                    )
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&dyn Detector> = built.iter().map(|b| b.as_ref()).collect();
            let counts = monte_carlo_pooled(&refs, &model, cfg.trials, test_seed)?;
            let wall = t0.elapsed().as_secs_f64();
            log::info!(
                "{name} at {db} dB: symbol error {:.3e} over {} trials",
                counts.symbol_rate(),
                counts.trials
            );
            reports.push(EvalReport {
                detector: name.clone(),
                snr_db: db,
                bit_cost: refs[0].bit_cost(),
                counts,
                seed: test_seed,
                wall_time: Some(wall),
            });
        }
        systems.push(system);
    }
    Ok(SweepOutcome {
        reports,
        systems,
        loss_histories: histories,
    })
}

/// Evaluates a trained system at one SNR.
pub fn evaluate_system(system: &TaskSystem, model: &SignalModel, trials: usize, seed: u64) -> Result<ErrorCounts> {
    system.check_model(model)?;
    monte_carlo_error_rate(&Learned(system.clone()), model, trials, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridScanConfig {
    pub p_values: Vec<usize>,
    pub sample_values: Vec<usize>,
    pub levels: usize,
    pub repeats: usize,
    pub budget: usize,
    pub model: SignalModel,
    pub objective: MetaObjectiveConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub p: usize,
    pub samples: usize,
    pub levels: usize,
    pub bit_cost: usize,
    pub repeats: usize,
    /// `None` for cells over budget or with diverged training.
    pub mean: Option<f64>,
    pub stdev: Option<f64>,
}

pub const GRID_SCHEMA: &str = "taskadc-grid/1";
pub const GRID_HEADER: &str = "p,samples,levels,bit_cost,repeats,mean_f,stdev_f";

/// Mean and spread of the meta objective over `(p, L~)` at fixed `M~`.
pub fn grid_scan(cfg: &GridScanConfig) -> Result<Vec<GridCell>> {
    if cfg.p_values.is_empty() || cfg.sample_values.is_empty() || cfg.repeats == 0 {
        return Err(Error::InvalidParameter(
            "grid ranges and repeats must be nonempty".into(),
        ));
    }
    let mut cells = Vec::new();
    for &p in &cfg.p_values {
        for &lt in &cfg.sample_values {
            cells.push(AdcHyperparams::new(p, lt, cfg.levels)?);
        }
    }
    cells
        .par_iter()
        .map(|theta| {
            let bits = theta.bit_cost();
            let mut cell = GridCell {
                p: theta.p,
                samples: theta.samples,
                levels: theta.levels,
                bit_cost: bits,
                repeats: cfg.repeats,
                mean: None,
                stdev: None,
            };
            if bits > cfg.budget || theta.samples > cfg.model.grid_len {
                return Ok(cell);
            }
            let values = (0..cfg.repeats)
                .map(|r| {
                    let mut oc = cfg.objective.clone();
                    oc.seed = derive_seed(cfg.seed, "grid-repeat", &[r as u64]);
                    meta_objective(theta, &cfg.model, &oc).map(|e| e.value)
                })
                .collect::<Result<Vec<f64>>>()?;
            if values.iter().all(|v| v.is_finite()) {
                let (mean, stdev) = mean_stdev(&values);
                cell.mean = Some(mean);
                cell.stdev = Some(stdev);
            }
            Ok(cell)
        })
        .collect()
}

/// Mean and sample standard deviation; the spread of a single value is 0.
pub fn mean_stdev(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn grid_csv(cells: &[GridCell]) -> String {
    let mut out = format!("# schema: {GRID_SCHEMA}\n{GRID_HEADER}\n");
    for c in cells {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            c.p,
            c.samples,
            c.levels,
            c.bit_cost,
            c.repeats,
            c.mean.map_or("NA".into(), num),
            c.stdev.map_or("NA".into(), num)
        );
    }
    out
}

pub const LOSS_SCHEMA: &str = "taskadc-loss/1";

pub fn loss_csv(history: &[f64]) -> String {
    let mut out = format!("# schema: {LOSS_SCHEMA}\nepoch,loss\n");
    for (e, l) in history.iter().enumerate() {
        let _ = writeln!(out, "{e},{}", num(*l));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::MapFull;
    use rand::Rng;

    struct Guess;

    impl Detector for Guess {
        fn name(&self) -> &str {
            "guess"
        }

        fn detect_batch(&self, signals: &[&DenseSignal]) -> Result<Vec<TaskVector>> {
            // Deterministic pseudo-guess from the first sample's bits.
            Ok(signals
                .iter()
                .map(|x| {
                    let mut rng = crate::rng::seeded(x.values()[[0, 0]].to_bits());
                    TaskVector::random(4, Alphabet::Binary, &mut rng)
                })
                .collect())
        }
    }

    #[test]
    fn wilson_interval_properties() {
        let (lo, hi) = wilson_interval(100, 100_000, Z95);
        assert!(lo < 1e-3 && 1e-3 < hi);
        assert!((hi - lo) / 2.0 < 4e-4);
        let (lo, hi) = wilson_interval(0, 1000, Z95);
        assert_eq!(lo, 0.0);
        assert!(hi > 0.0 && hi < 0.005);
        assert_eq!(wilson_interval(0, 400_000, Z95).0, 0.0);
        assert_eq!(wilson_interval(400_000, 400_000, Z95).1, 1.0);
        // Reference values for 10 of 100.
        let (lo, hi) = wilson_interval(10, 100, Z95);
        assert!((lo - 0.05523).abs() < 1e-4 && (hi - 0.17437).abs() < 1e-4);
    }

    #[test]
    fn random_guess_is_at_chance() {
        let model = SignalModel::synthetic(6, 4, 0.0).unwrap();
        let c = monte_carlo_error_rate(&Guess, &model, 4000, 1).unwrap();
        let (lo, hi) = c.symbol_ci();
        assert!(lo < 0.5 && 0.5 < hi, "{:?}", c.symbol_ci());
        assert_eq!(c.trials, 4000);
    }

    #[test]
    fn noiseless_full_map_makes_no_errors() {
        let mut model = SignalModel::synthetic(6, 4, 0.0).unwrap();
        model.noise_variance = 1e-12;
        let det = MapFull::new(&model).unwrap();
        let c = monte_carlo_error_rate(&det, &model, 1500, 2).unwrap();
        assert_eq!((c.entry_errors, c.vector_errors), (0, 0));
    }

    #[test]
    fn counts_do_not_depend_on_pool_size() {
        let model = SignalModel::synthetic(6, 4, -2.0).unwrap();
        let det = MapFull::new(&model).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| monte_carlo_error_rate(&det, &model, 3500, 9).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn sweep_rows_and_csv_shape() {
        let mut cfg = SweepConfig::paper(vec![0.0, 6.0], &["map-full", "map-sampled"]);
        cfg.trials = 1200;
        let out = sweep_snr(&cfg, &DetectorRegistry::default()).unwrap();
        assert_eq!(out.reports.len(), 4);
        let csv = eval_csv(&out.reports);
        assert_eq!(csv.lines().count(), 2 + 4);
        let header_cols = EVAL_HEADER.split(',').count();
        assert!(csv.lines().skip(1).all(|l| l.split(',').count() == header_cols));
        // Same seed, same bytes.
        let again = sweep_snr(&cfg, &DetectorRegistry::default()).unwrap();
        assert_eq!(csv, eval_csv(&again.reports));
        // A one-point grid equals a single Monte Carlo call.
        let mut one = cfg.clone();
        one.snrs_db = vec![6.0];
        one.detectors = vec!["map-full".into()];
        let single = sweep_snr(&one, &DetectorRegistry::default()).unwrap();
        let model = cfg.model.with_snr_db(6.0).unwrap();
        let direct = monte_carlo_error_rate(
            &MapFull::new(&model).unwrap(),
            &model,
            1200,
            derive_seed(cfg.seed, "sweep-test", &[0]),
        )
        .unwrap();
        assert_eq!(single.reports[0].counts, direct);
    }

    #[test]
    fn sweep_rates_are_monotone_in_snr() {
        let mut cfg = SweepConfig::paper(
            vec![-6.0, -3.0, 0.0],
            &["map-full", "map-sampled", "map-sampled-quantized"],
        );
        cfg.trials = 5000;
        let out = sweep_snr(&cfg, &DetectorRegistry::default()).unwrap();
        for d in &cfg.detectors {
            let rows: Vec<&EvalReport> = out.reports.iter().filter(|r| &r.detector == d).collect();
            for w in rows.windows(2) {
                let (lo_prev, _) = w[0].counts.symbol_ci();
                let (_, hi_next) = w[1].counts.symbol_ci();
                // Later (higher SNR) rate must not exceed the earlier one beyond CI overlap.
                assert!(w[1].counts.symbol_rate() <= w[0].counts.symbol_rate() || hi_next >= lo_prev);
            }
        }
    }

    #[test]
    fn mean_stdev_of_one_value_has_no_spread() {
        assert_eq!(mean_stdev(&[3.5]), (3.5, 0.0));
        let mut rng = crate::rng::seeded(1);
        let v: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..1.0)).collect();
        let (m, s) = mean_stdev(&v);
        assert!((m - v.iter().sum::<f64>() / 5.0).abs() < 1e-15);
        assert!(s > 0.0);
    }
}
