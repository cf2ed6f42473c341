//! Search over the ADC hyperparameters under a bit budget: the feasible set,
//! a Gaussian-process surrogate with expected improvement, the search
//! strategies, and the objective that trains and scores one configuration.
//!
//! The objective is maximized throughout: `f(theta) = -(alpha * bits +
//! sum of error rates)`.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::harness::evaluate_system;
use crate::pipeline::{train, AdcHyperparams, TaskSystem, TrainConfig};
use crate::rng::{derive_seed, seeded};
use crate::signal::{generate_dataset_from, Alphabet, DataSource, SignalModel};

/// GP input coordinates `(log2 p, log2 L~, log2 ceil(log2 M~))`.
pub fn encode(theta: &AdcHyperparams) -> [f64; 3] {
    [
        (theta.p as f64).log2(),
        (theta.samples as f64).log2(),
        (theta.bits_per_sample() as f64).log2(),
    ]
}

/// Discrete search space `p in 1..=p_max`, `L~ in 1..=L`,
/// bits per sample in `1..=max_bits` with `M~ = 2^bits`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub budget: usize,
    pub p_max: usize,
    pub grid_len: usize,
    pub max_bits: usize,
}

impl SearchSpace {
    pub fn new(budget: usize, p_max: usize, grid_len: usize) -> Self {
        Self {
            budget,
            p_max,
            grid_len,
            max_bits: 8,
        }
    }

    /// Every configuration within budget, sorted by `(p, L~, M~)`.
    pub fn feasible(&self) -> Vec<AdcHyperparams> {
        let mut out = Vec::new();
        for p in 1..=self.p_max {
            for lt in 1..=self.grid_len {
                for bits in 1..=self.max_bits {
                    if p * lt * bits <= self.budget {
                        out.push(AdcHyperparams {
                            p,
                            samples: lt,
                            levels: 1 << bits,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn contains(&self, theta: &AdcHyperparams) -> bool {
        theta.p <= self.p_max
            && theta.samples <= self.grid_len
            && theta.levels.is_power_of_two()
            && theta.bits_per_sample() <= self.max_bits
            && theta.bit_cost() <= self.budget
    }
}

/// Noise-free GP with a squared-exponential kernel and constant prior mean.
#[derive(Debug, Clone)]
pub struct GpState {
    points: Vec<[f64; 3]>,
    values: Vec<f64>,
    pub length_scales: [f64; 3],
    pub signal_variance: f64,
    pub prior_mean: f64,
    pub jitter: f64,
    chol: Cholesky<f64, nalgebra::Dyn>,
    alpha: DVector<f64>,
}

/// Relative jitter levels tried in turn.
const JITTERS: [f64; 4] = [0.0, 1e-12, 1e-10, 1e-8];

impl GpState {
    /// Fits the surrogate. The signal variance is the spread of the observed
    /// values (1 when there is none) and the prior mean their average.
    pub fn fit(points: &[[f64; 3]], values: &[f64], length_scales: [f64; 3]) -> Result<Self> {
        if points.is_empty() || points.len() != values.len() {
            return Err(Error::InvalidParameter(
                "GP needs matching, nonempty observations".into(),
            ));
        }
        let n = values.len() as f64;
        let prior_mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - prior_mean).powi(2)).sum::<f64>() / n;
        let signal_variance = if var > 0.0 && var.is_finite() { var } else { 1.0 };
        let mut state_jitter = None;
        let k = Self::gram(points, length_scales, signal_variance);
        for j in JITTERS {
            let jitter = j * signal_variance;
            let mut kj = k.clone();
            for i in 0..points.len() {
                kj[(i, i)] += jitter;
            }
            if let Some(chol) = Cholesky::new(kj) {
                state_jitter = Some((chol, jitter));
                break;
            }
        }
        let (chol, jitter) = state_jitter.ok_or(Error::Singular {
            jitter: JITTERS[JITTERS.len() - 1] * signal_variance,
        })?;
        let resid = DVector::from_iterator(values.len(), values.iter().map(|v| v - prior_mean));
        let alpha = chol.solve(&resid);
        Ok(Self {
            points: points.to_vec(),
            values: values.to_vec(),
            length_scales,
            signal_variance,
            prior_mean,
            jitter,
            chol,
            alpha,
        })
    }

    fn kernel(a: &[f64; 3], b: &[f64; 3], ls: [f64; 3], var: f64) -> f64 {
        let d2: f64 = (0..3).map(|i| ((a[i] - b[i]) / ls[i]).powi(2)).sum();
        var * (-0.5 * d2).exp()
    }

    fn gram(points: &[[f64; 3]], ls: [f64; 3], var: f64) -> DMatrix<f64> {
        DMatrix::from_fn(points.len(), points.len(), |i, j| {
            Self::kernel(&points[i], &points[j], ls, var)
        })
    }

    pub fn observations(&self) -> (&[[f64; 3]], &[f64]) {
        (&self.points, &self.values)
    }

    /// Posterior mean and standard deviation at `x`.
    pub fn posterior(&self, x: &[f64; 3]) -> (f64, f64) {
        let kx = DVector::from_iterator(
            self.points.len(),
            self.points
                .iter()
                .map(|p| Self::kernel(x, p, self.length_scales, self.signal_variance)),
        );
        let mean = self.prior_mean + kx.dot(&self.alpha);
        let v = self.chol.solve(&kx);
        let var = (self.signal_variance - kx.dot(&v)).max(0.0);
        (mean, var.sqrt())
    }

    /// Largest observed value.
    pub fn incumbent(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Free-function form of [`GpState::posterior`] on a configuration.
pub fn gp_posterior(state: &GpState, theta: &AdcHyperparams) -> (f64, f64) {
    state.posterior(&encode(theta))
}

/// Expected improvement over `best + zeta` for a normal posterior.
pub fn expected_improvement_from(mean: f64, sd: f64, best: f64, zeta: f64) -> f64 {
    if sd <= 0.0 {
        return 0.0;
    }
    let normal = Normal::standard();
    let gap = mean - best - zeta;
    let z = gap / sd;
    (gap * normal.cdf(z) + sd * normal.pdf(z)).max(0.0)
}

pub fn expected_improvement(state: &GpState, theta: &AdcHyperparams, zeta: f64) -> f64 {
    let (mean, sd) = gp_posterior(state, theta);
    expected_improvement_from(mean, sd, state.incumbent(), zeta)
}

/// Default exploration margin: one percent of the incumbent's magnitude.
pub fn default_zeta(best: f64) -> f64 {
    0.01 * best.abs()
}

/// Result of one expensive evaluation.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    /// Symbol error rate per SNR, when measured.
    pub error_rates: Vec<f64>,
    /// Trained systems, one per SNR, when produced.
    pub systems: Vec<TaskSystem>,
}

impl Evaluation {
    pub fn value(value: f64) -> Self {
        Self {
            value,
            error_rates: Vec::new(),
            systems: Vec::new(),
        }
    }
}

/// The expensive objective `f_A`.
pub trait Objective {
    fn evaluate(&mut self, theta: &AdcHyperparams) -> Result<Evaluation>;
}

impl<F: FnMut(&AdcHyperparams) -> Result<Evaluation>> Objective for F {
    fn evaluate(&mut self, theta: &AdcHyperparams) -> Result<Evaluation> {
        self(theta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub theta: AdcHyperparams,
    pub bit_cost: usize,
    pub value: f64,
    pub incumbent: AdcHyperparams,
    pub incumbent_value: f64,
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub best: AdcHyperparams,
    pub best_value: f64,
    pub best_evaluation: Evaluation,
    pub trace: Vec<TraceEntry>,
    /// Every feasible point was evaluated before the iteration limit.
    pub exhausted: bool,
}

pub const TRACE_SCHEMA: &str = "taskadc-trace/1";

pub fn trace_csv(trace: &[TraceEntry]) -> String {
    let mut out = format!(
        "# schema: {TRACE_SCHEMA}\niteration,p,samples,levels,bit_cost,f,incumbent_p,incumbent_samples,incumbent_levels,incumbent_f\n"
    );
    for t in trace {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            t.iteration,
            t.theta.p,
            t.theta.samples,
            t.theta.levels,
            t.bit_cost,
            t.value,
            t.incumbent.p,
            t.incumbent.samples,
            t.incumbent.levels,
            t.incumbent_value
        ));
    }
    out
}

/// A way of choosing which configurations to evaluate.
pub trait SearchStrategy {
    fn name(&self) -> &str;

    fn search(
        &self,
        space: &SearchSpace,
        objective: &mut dyn Objective,
        max_evaluations: usize,
        seed: u64,
    ) -> Result<SearchResult>;
}

/// Shared bookkeeping: evaluate, record, update the incumbent.
struct Recorder {
    trace: Vec<TraceEntry>,
    best: Option<(AdcHyperparams, Evaluation)>,
    observed: Vec<(AdcHyperparams, f64)>,
}

impl Recorder {
    fn new() -> Self {
        Self {
            trace: Vec::new(),
            best: None,
            observed: Vec::new(),
        }
    }

    fn evaluate(&mut self, theta: AdcHyperparams, objective: &mut dyn Objective) -> Result<()> {
        let eval = objective.evaluate(&theta)?;
        let value = eval.value;
        log::info!("evaluated {theta} ({} bits): f = {value}", theta.bit_cost());
        self.observed.push((theta, value));
        let replace = match &self.best {
            None => true,
            // Incumbent changes only on strict improvement.
            Some((_, b)) => b.value < value,
        };
        if replace {
            self.best = Some((theta, eval));
        }
        let (inc, inc_eval) = self.best.as_ref().expect("set above");
        self.trace.push(TraceEntry {
            iteration: self.trace.len() + 1,
            theta,
            bit_cost: theta.bit_cost(),
            value,
            incumbent: *inc,
            incumbent_value: inc_eval.value,
        });
        Ok(())
    }

    fn is_observed(&self, theta: &AdcHyperparams) -> bool {
        self.observed.iter().any(|(t, _)| t == theta)
    }

    fn finish(self, exhausted: bool) -> Result<SearchResult> {
        let (best, eval) = self
            .best
            .ok_or_else(|| Error::InvalidParameter("no evaluation was made".into()))?;
        Ok(SearchResult {
            best,
            best_value: eval.value,
            best_evaluation: eval,
            trace: self.trace,
            exhausted,
        })
    }
}

fn check_search(space: &SearchSpace, max_evaluations: usize) -> Result<Vec<AdcHyperparams>> {
    if max_evaluations == 0 {
        return Err(Error::InvalidParameter("need at least one evaluation".into()));
    }
    let feasible = space.feasible();
    if feasible.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "no configuration fits a budget of {} bits",
            space.budget
        )));
    }
    Ok(feasible)
}

/// GP surrogate with expected improvement, maximized by exhaustive scan over
/// the unobserved feasible set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesOpt {
    /// Fixed exploration margin; `None` uses [`default_zeta`].
    pub zeta: Option<f64>,
    pub length_scales: [f64; 3],
}

impl Default for BayesOpt {
    fn default() -> Self {
        Self {
            zeta: None,
            length_scales: [1.0; 3],
        }
    }
}

impl BayesOpt {
    /// Next configuration: highest EI, ties to fewer bits then smaller `theta`.
    fn propose(&self, rec: &Recorder, feasible: &[AdcHyperparams], seed: u64) -> Result<Option<AdcHyperparams>> {
        let mut candidates: Vec<&AdcHyperparams> = feasible.iter().filter(|t| !rec.is_observed(t)).collect();
        if candidates.is_empty() {
            return Ok(None);
        }
        candidates.sort_by_key(|t| (t.bit_cost(), **t));
        let finite: Vec<&(AdcHyperparams, f64)> = rec.observed.iter().filter(|(_, v)| v.is_finite()).collect();
        if finite.is_empty() {
            // Nothing to model yet: draw at random.
            let mut rng = seeded(derive_seed(seed, "bo-fallback", &[rec.observed.len() as u64]));
            return Ok(candidates.choose(&mut rng).map(|t| **t));
        }
        let points: Vec<[f64; 3]> = finite.iter().map(|(t, _)| encode(t)).collect();
        let values: Vec<f64> = finite.iter().map(|(_, v)| *v).collect();
        let gp = GpState::fit(&points, &values, self.length_scales)?;
        let best = gp.incumbent();
        let zeta = self.zeta.unwrap_or_else(|| default_zeta(best));
        let mut pick = (candidates[0], f64::NEG_INFINITY);
        for t in candidates {
            let ei = expected_improvement(&gp, t, zeta);
            if ei > pick.1 {
                pick = (t, ei);
            }
        }
        log::debug!("next {} with EI {:.3e}", pick.0, pick.1);
        Ok(Some(*pick.0))
    }
}

impl SearchStrategy for BayesOpt {
    fn name(&self) -> &str {
        "bayes-ei"
    }

    fn search(
        &self,
        space: &SearchSpace,
        objective: &mut dyn Objective,
        max_evaluations: usize,
        seed: u64,
    ) -> Result<SearchResult> {
        let feasible = check_search(space, max_evaluations)?;
        let mut rec = Recorder::new();
        let mut rng = seeded(derive_seed(seed, "bo-init", &[]));
        let first = *feasible.choose(&mut rng).expect("nonempty");
        rec.evaluate(first, objective)?;
        while rec.trace.len() < max_evaluations {
            match self.propose(&rec, &feasible, seed)? {
                Some(t) => rec.evaluate(t, objective)?,
                None => {
                    log::info!("all {} feasible configurations evaluated", feasible.len());
                    return rec.finish(true);
                }
            }
        }
        let exhausted = rec.observed.len() == feasible.len();
        rec.finish(exhausted)
    }
}

/// Uniform sampling without replacement from the feasible set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomSearch;

impl SearchStrategy for RandomSearch {
    fn name(&self) -> &str {
        "random"
    }

    fn search(
        &self,
        space: &SearchSpace,
        objective: &mut dyn Objective,
        max_evaluations: usize,
        seed: u64,
    ) -> Result<SearchResult> {
        let feasible = check_search(space, max_evaluations)?;
        let mut rng = seeded(derive_seed(seed, "random-search", &[]));
        let picks: Vec<AdcHyperparams> = feasible
            .choose_multiple(&mut rng, max_evaluations.min(feasible.len()))
            .copied()
            .collect();
        let mut rec = Recorder::new();
        for t in picks {
            rec.evaluate(t, objective)?;
        }
        let exhausted = rec.observed.len() == feasible.len();
        rec.finish(exhausted)
    }
}

pub type StrategyBuilder = fn() -> Box<dyn SearchStrategy>;

/// Name-indexed search strategies.
pub struct StrategyRegistry {
    entries: Vec<(&'static str, StrategyBuilder)>,
}

impl Default for StrategyRegistry {
    fn default() -> Self {
        let mut r = Self { entries: Vec::new() };
        r.register("bayes-ei", || Box::new(BayesOpt::default()));
        r.register("random", || Box::new(RandomSearch));
        r
    }
}

impl StrategyRegistry {
    pub fn register(&mut self, name: &'static str, builder: StrategyBuilder) {
        self.entries.retain(|(n, _)| *n != name);
        self.entries.push((name, builder));
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    pub fn build(&self, name: &str) -> Result<Box<dyn SearchStrategy>> {
        self.entries
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, b)| b())
            .ok_or_else(|| Error::UnknownName {
                kind: "search strategy",
                name: name.to_string(),
                known: self.names().join(", "),
            })
    }
}

/// Runs Bayesian optimization with the default settings.
pub fn bayes_opt(
    space: &SearchSpace,
    objective: &mut dyn Objective,
    max_evaluations: usize,
    zeta: Option<f64>,
    seed: u64,
) -> Result<SearchResult> {
    BayesOpt {
        zeta,
        ..BayesOpt::default()
    }
    .search(space, objective, max_evaluations, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaObjectiveConfig {
    /// Penalty per acquisition bit. The default keeps a full 20-bit budget
    /// below one error event of the default evaluation, so bits only break
    /// ties between configurations of equal measured error.
    pub alpha: f64,
    pub snrs_db: Vec<f64>,
    pub train: TrainConfig,
    pub train_size: usize,
    pub eval_trials: usize,
    pub data_source: DataSource,
    pub seed: u64,
}

impl Default for MetaObjectiveConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-6,
            snrs_db: vec![0.0, 5.0, 10.0],
            train: TrainConfig::default(),
            train_size: 10_000,
            eval_trials: 10_000,
            data_source: DataSource::Exact,
            seed: 0,
        }
    }
}

impl MetaObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidParameter(format!("alpha {} must be >= 0", self.alpha)));
        }
        if self.snrs_db.is_empty() {
            return Err(Error::InvalidParameter("the SNR set must be nonempty".into()));
        }
        self.train.validate()
    }
}

/// Trains one system per SNR and returns `-(alpha bits + sum of symbol error
/// rates)`. Training data and test streams depend on the seed and the SNR
/// index only, so every configuration sees the same draws. A diverged
/// training scores `-inf`.
pub fn meta_objective(theta: &AdcHyperparams, model: &SignalModel, cfg: &MetaObjectiveConfig) -> Result<Evaluation> {
    cfg.validate()?;
    theta.check_grid(model.grid_len)?;
    let mut rates = Vec::with_capacity(cfg.snrs_db.len());
    let mut systems = Vec::with_capacity(cfg.snrs_db.len());
    for (i, &db) in cfg.snrs_db.iter().enumerate() {
        let m = model.with_snr_db(db)?;
        let data = generate_dataset_from(
            &m,
            cfg.data_source,
            cfg.train_size,
            Alphabet::Binary,
            derive_seed(cfg.seed, "meta-train-data", &[i as u64]),
        )?;
        let mut tc = cfg.train.clone();
        tc.seed = derive_seed(cfg.seed, "meta-train", &[i as u64]);
        let out = match train(&data, &m, *theta, &tc) {
            Ok(o) => o,
            Err(Error::Divergence { epoch, detail }) => {
                log::warn!("{theta} diverged at {db} dB (epoch {epoch}: {detail})");
                return Ok(Evaluation {
                    value: f64::NEG_INFINITY,
                    error_rates: rates,
                    systems,
                });
            }
            Err(e) => return Err(e),
        };
        let counts = evaluate_system(
            &out.system,
            &m,
            cfg.eval_trials,
            derive_seed(cfg.seed, "meta-eval", &[i as u64]),
        )?;
        rates.push(counts.symbol_rate());
        systems.push(out.system);
    }
    let value = -(cfg.alpha * theta.bit_cost() as f64 + rates.iter().sum::<f64>());
    Ok(Evaluation {
        value,
        error_rates: rates,
        systems,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnConfig {
    pub budget: usize,
    /// Largest `p`; defaults to the channel count.
    pub p_max: Option<usize>,
    pub max_evaluations: usize,
    pub strategy: String,
    pub objective: MetaObjectiveConfig,
    /// Retrain the selected configuration with this setup instead of reusing
    /// the search's weights.
    pub retrain: Option<RetrainConfig>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainConfig {
    pub train: TrainConfig,
    pub train_size: usize,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            budget: 20,
            p_max: None,
            max_evaluations: 30,
            strategy: "bayes-ei".into(),
            objective: MetaObjectiveConfig::default(),
            retrain: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LearnOutcome {
    pub theta: AdcHyperparams,
    /// One system per SNR of the objective.
    pub systems: Vec<TaskSystem>,
    pub search: SearchResult,
}

/// Searches the budgeted space, then returns the selected configuration's
/// systems, reused from the search or retrained.
pub fn learn_system(model: &SignalModel, cfg: &LearnConfig, strategies: &StrategyRegistry) -> Result<LearnOutcome> {
    let space = SearchSpace::new(cfg.budget, cfg.p_max.unwrap_or(model.n), model.grid_len);
    let strategy = strategies.build(&cfg.strategy)?;
    let mut oc = cfg.objective.clone();
    oc.seed = derive_seed(cfg.seed, "meta-objective", &[]);
    let mut objective = |t: &AdcHyperparams| meta_objective(t, model, &oc);
    let search = strategy.search(&space, &mut objective, cfg.max_evaluations, cfg.seed)?;
    let theta = search.best;
    let systems = match &cfg.retrain {
        None => search.best_evaluation.systems.clone(),
        Some(rc) => {
            let mut out = Vec::with_capacity(oc.snrs_db.len());
            for (i, &db) in oc.snrs_db.iter().enumerate() {
                let m = model.with_snr_db(db)?;
                let data = generate_dataset_from(
                    &m,
                    oc.data_source,
                    rc.train_size,
                    Alphabet::Binary,
                    derive_seed(cfg.seed, "retrain-data", &[i as u64]),
                )?;
                let mut tc = rc.train.clone();
                tc.seed = derive_seed(cfg.seed, "retrain", &[i as u64]);
                out.push(train(&data, &m, theta, &tc)?.system);
            }
            out
        }
    };
    Ok(LearnOutcome { theta, systems, search })
}
