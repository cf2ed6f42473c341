use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{ArgAction, Args, Parser, Subcommand};

use taskadc::checkpoint::{load_system_for, save_checkpoint, Checkpoint, TrainingMetadata};
use taskadc::config::{RunConfig, RunManifest, TaskKind};
use taskadc::detector::DetectorRegistry;
use taskadc::harness::{eval_csv, grid_csv, grid_scan, loss_csv, sweep_snr, sweep_snr_with_system, write_text};
use taskadc::meta::{learn_system, trace_csv, StrategyRegistry};
use taskadc::pipeline::{train, Head, Task};
use taskadc::rng::derive_seed;
use taskadc::signal::{generate_dataset_from, Dataset};

#[derive(Parser, Debug)]
#[command(name = "taskadc", version, about = "Learned task-based acquisition simulator")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for Monte Carlo and data generation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory receiving all outputs.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct ModelArgs {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    grid_len: Option<usize>,
    /// Window length in seconds.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    f0: Option<f64>,
    #[arg(long)]
    noise_variance: Option<f64>,
    #[arg(long)]
    snr_db: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct AdcArgs {
    /// Number of ADCs.
    #[arg(long)]
    p: Option<usize>,
    /// Samples per ADC per window.
    #[arg(long)]
    samples: Option<usize>,
    /// Quantization levels.
    #[arg(long)]
    levels: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct TrainArgs {
    #[arg(long, value_parser = parse_task)]
    task: Option<TaskKind>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Per-epoch kernel width factor.
    #[arg(long)]
    width_factor: Option<f64>,
    /// Per-epoch quantizer slope factor.
    #[arg(long)]
    slope_factor: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    /// Classification loss: joint softmax or per-symbol logistic.
    #[arg(long, value_parser = parse_head)]
    head: Option<Head>,
    #[arg(long)]
    initial_width: Option<f64>,
    #[arg(long)]
    normalized_kernel: Option<bool>,
    #[arg(long)]
    calibration: Option<usize>,
    /// Epochs with the sample times frozen on their grid points.
    #[arg(long)]
    refine_epochs: Option<usize>,
    /// Keep the iterate whose hardened system fits the training set best.
    #[arg(long)]
    select_best: Option<bool>,
    /// Train on the perturbed-model ensemble with this fraction.
    #[arg(long)]
    perturbation: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labelled dataset.
    GenData {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_parser = parse_task)]
        task: Option<TaskKind>,
        #[arg(long)]
        perturbation: Option<f64>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, default_value = "dataset.json")]
        out: String,
    },
    /// Train one system and write its checkpoint and loss history.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        adc: AdcArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Train on this dataset instead of generating one.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Monte Carlo error rates of detectors at one SNR.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        adc: AdcArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Detector name; repeat for several.
        #[arg(long = "detector", required = true)]
        detectors: Vec<String>,
        /// Use this trained system for the learned detector.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        baseline_samples: Option<usize>,
        #[arg(long)]
        baseline_budget: Option<usize>,
    },
    /// Error rate against SNR for several detectors.
    Sweep {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        adc: AdcArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, value_delimiter = ',')]
        snrs: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        detectors: Option<Vec<String>>,
        #[arg(long)]
        trials: Option<usize>,
        /// Perturbation fraction for training data and MAP oracles.
        #[arg(long)]
        uncertainty: Option<f64>,
        #[arg(long)]
        oracle_draws: Option<usize>,
        #[arg(long)]
        baseline_samples: Option<usize>,
        #[arg(long)]
        baseline_budget: Option<usize>,
    },
    /// Mean objective over a (p, L~) grid at fixed levels.
    GridScan {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        meta: MetaArgs,
        #[arg(long, value_delimiter = ',')]
        p_values: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        sample_values: Option<Vec<usize>>,
        #[arg(long)]
        levels: Option<usize>,
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Search the ADC configuration under a bit budget.
    Meta {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        meta: MetaArgs,
        #[arg(long)]
        max_evals: Option<usize>,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        p_max: Option<usize>,
        /// Retrain the selected configuration with the training settings.
        #[arg(long)]
        retrain: bool,
    },
}

#[derive(Args, Debug, Default)]
struct MetaArgs {
    #[arg(long)]
    budget: Option<usize>,
    /// Bits penalty weight.
    #[arg(long)]
    alpha: Option<f64>,
    /// SNRs the objective sums over.
    #[arg(long, value_delimiter = ',')]
    meta_snrs: Option<Vec<f64>>,
    #[arg(long)]
    eval_trials: Option<usize>,
}

fn parse_task(s: &str) -> std::result::Result<TaskKind, String> {
    match s {
        "classification" => Ok(TaskKind::Classification),
        "regression" => Ok(TaskKind::Regression),
        _ => Err(format!("unknown task '{s}' (classification, regression)")),
    }
}

fn parse_head(s: &str) -> std::result::Result<Head, String> {
    match s {
        "joint" => Ok(Head::Joint),
        "factorized" => Ok(Head::Factorized),
        _ => Err(format!("unknown head '{s}' (joint, factorized)")),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl ModelArgs {
    fn apply(self, cfg: &mut RunConfig) {
        let m = &mut cfg.model;
        set(&mut m.n, self.n);
        set(&mut m.k, self.k);
        set(&mut m.grid_len, self.grid_len);
        set(&mut m.duration, self.duration);
        set(&mut m.f0, self.f0);
        set(&mut m.noise_variance, self.noise_variance);
        set(&mut m.snr_db, self.snr_db);
    }
}

impl AdcArgs {
    fn apply(self, cfg: &mut RunConfig) {
        set(&mut cfg.adc.p, self.p);
        set(&mut cfg.adc.samples, self.samples);
        set(&mut cfg.adc.levels, self.levels);
    }
}

impl TrainArgs {
    fn apply(self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        set(&mut t.task, self.task);
        set(&mut t.train_size, self.train_size);
        set(&mut t.epochs, self.epochs);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.lr, self.lr);
        set(&mut t.width_factor, self.width_factor);
        set(&mut t.slope_factor, self.slope_factor);
        set(&mut t.hidden, self.hidden);
        set(&mut t.head, self.head);
        set(&mut t.initial_width, self.initial_width);
        set(&mut t.normalized_kernel, self.normalized_kernel);
        set(&mut t.calibration, self.calibration);
        set(&mut t.refine_epochs, self.refine_epochs);
        set(&mut t.select_best, self.select_best);
        if self.perturbation.is_some() {
            t.perturbation = self.perturbation;
        }
    }
}

impl MetaArgs {
    fn apply(self, cfg: &mut RunConfig) {
        set(&mut cfg.meta.budget, self.budget);
        set(&mut cfg.meta.alpha, self.alpha);
        set(&mut cfg.meta.snrs_db, self.meta_snrs);
        set(&mut cfg.meta.eval_trials, self.eval_trials);
    }
}

/// Collects output paths and writes them under the output directory.
struct Outputs {
    dir: PathBuf,
    manifest: RunManifest,
}

impl Outputs {
    fn new(dir: &Path, command: &str, cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: RunManifest::new(command, cfg),
        })
    }

    fn seed(&mut self, label: &str, value: u64) {
        self.manifest.derived_seeds.push((label.to_string(), value));
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.manifest.outputs.push(name.to_string());
        self.dir.join(name)
    }

    fn text(&mut self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        write_text(&p, text).with_context(|| format!("writing {}", p.display()))
    }

    fn checkpoint(&mut self, name: &str, ck: &Checkpoint) -> Result<()> {
        let p = self.path(name);
        save_checkpoint(&p, ck).with_context(|| format!("writing {}", p.display()))
    }

    fn finish(mut self) -> Result<()> {
        let p = self.dir.join("manifest.toml");
        self.manifest.outputs.sort();
        self.manifest
            .save(&p)
            .with_context(|| format!("writing {}", p.display()))?;
        Ok(())
    }
}

fn base_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    set(&mut cfg.seed, cli.seed);
    Ok(cfg)
}

fn snr_tag(db: f64) -> String {
    format!("{db}").replace('-', "m").replace('.', "p")
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = base_config(&cli)?;
    let out_dir = cli.out_dir.clone();
    match cli.command {
        Command::GenData {
            model,
            task,
            perturbation,
            count,
            out,
        } => {
            model.apply(&mut cfg);
            set(&mut cfg.train.task, task);
            if perturbation.is_some() {
                cfg.train.perturbation = perturbation;
            }
            set(&mut cfg.train.train_size, count);
            let mut o = Outputs::new(&out_dir, "gen-data", &cfg)?;
            let seed = derive_seed(cfg.seed, "cli-data", &[]);
            o.seed("data", seed);
            let data = generate_dataset_from(
                &cfg.signal_model()?,
                cfg.data_source(),
                cfg.train.train_size,
                cfg.alphabet(),
                seed,
            )?;
            o.text(&out, &data.to_json()?)?;
            println!("wrote {} pairs to {}", data.pairs.len(), out_dir.join(&out).display());
            o.finish()
        }
        Command::Train {
            model,
            adc,
            train: t,
            data,
        } => {
            model.apply(&mut cfg);
            adc.apply(&mut cfg);
            t.apply(&mut cfg);
            let mut o = Outputs::new(&out_dir, "train", &cfg)?;
            let mut signal = cfg.signal_model()?;
            let data_seed = derive_seed(cfg.seed, "cli-data", &[]);
            let dataset = match &data {
                Some(p) => {
                    let d = Dataset::load(p).with_context(|| format!("reading dataset {}", p.display()))?;
                    let (n, l) = d.shape();
                    if (n, l, d.task_dim()) != (signal.n, signal.grid_len, signal.k) {
                        bail!(
                            "dataset has n = {n}, L = {l}, k = {}, the model has n = {}, L = {}, k = {}",
                            d.task_dim(),
                            signal.n,
                            signal.grid_len,
                            signal.k
                        );
                    }
                    signal = signal.with_rho(d.rho)?;
                    d
                }
                None => {
                    o.seed("data", data_seed);
                    generate_dataset_from(
                        &signal,
                        cfg.data_source(),
                        cfg.train.train_size,
                        cfg.alphabet(),
                        data_seed,
                    )?
                }
            };
            let train_seed = derive_seed(cfg.seed, "cli-train", &[]);
            o.seed("train", train_seed);
            let tc = cfg.train_config(train_seed)?;
            let out = train(&dataset, &signal, cfg.theta()?, &tc)?;
            let final_loss = out.loss_history.last().copied();
            let meta = TrainingMetadata {
                model: signal,
                train: tc,
                train_size: dataset.pairs.len(),
                data_seed: if data.is_some() { dataset.seed } else { data_seed },
                final_loss,
            };
            o.checkpoint("checkpoint.json", &Checkpoint::new(out.system, Some(meta)))?;
            o.text("loss.csv", &loss_csv(&out.loss_history))?;
            println!(
                "trained {} for {} epochs, final loss {}",
                cfg.theta()?,
                out.loss_history.len(),
                final_loss.map_or("NA".into(), |l| format!("{l:.6}"))
            );
            o.finish()
        }
        Command::Eval {
            model,
            adc,
            train: t,
            detectors,
            checkpoint,
            trials,
            baseline_samples,
            baseline_budget,
        } => {
            model.apply(&mut cfg);
            adc.apply(&mut cfg);
            t.apply(&mut cfg);
            set(&mut cfg.eval.trials, trials);
            if baseline_samples.is_some() {
                cfg.eval.baseline_samples = baseline_samples;
            }
            if baseline_budget.is_some() {
                cfg.eval.baseline_budget = baseline_budget;
            }
            cfg.sweep.snrs_db = vec![cfg.model.snr_db];
            cfg.sweep.detectors = detectors;
            let registry = DetectorRegistry::default();
            let mut o = Outputs::new(&out_dir, "eval", &cfg)?;
            let mut sweep = cfg.sweep_config()?;
            let outcome = match &checkpoint {
                Some(p) => {
                    let system = load_system_for(p, &sweep.model)
                        .with_context(|| format!("loading checkpoint {}", p.display()))?;
                    if system.task != Task::Classification {
                        bail!("detection error rates need a classification system");
                    }
                    sweep.theta = system.hyper;
                    sweep.baseline_samples = cfg.eval.baseline_samples.unwrap_or(system.hyper.samples);
                    sweep.baseline_budget = cfg.eval.baseline_budget.unwrap_or(system.hyper.bit_cost());
                    sweep_snr_with_system(&sweep, &registry, &system)?
                }
                None => {
                    if cfg.train.task != TaskKind::Classification {
                        bail!("detection error rates need a classification system");
                    }
                    sweep_snr(&sweep, &registry)?
                }
            };
            for r in &outcome.reports {
                o.seed(&format!("test/{}", r.detector), r.seed);
            }
            o.text("eval.csv", &eval_csv(&outcome.reports))?;
            for r in &outcome.reports {
                let (lo, hi) = r.counts.symbol_ci();
                println!(
                    "{:<22} {:>6} dB  symbol error {:.4e}  [{:.4e}, {:.4e}]  ({} trials)",
                    r.detector,
                    r.snr_db,
                    r.counts.symbol_rate(),
                    lo,
                    hi,
                    r.counts.trials
                );
            }
            o.finish()
        }
        Command::Sweep {
            model,
            adc,
            train: t,
            snrs,
            detectors,
            trials,
            uncertainty,
            oracle_draws,
            baseline_samples,
            baseline_budget,
        } => {
            model.apply(&mut cfg);
            adc.apply(&mut cfg);
            t.apply(&mut cfg);
            set(&mut cfg.sweep.snrs_db, snrs);
            set(&mut cfg.sweep.detectors, detectors);
            set(&mut cfg.eval.trials, trials);
            set(&mut cfg.sweep.oracle_draws, oracle_draws);
            if uncertainty.is_some() {
                cfg.sweep.uncertainty = uncertainty;
            }
            if baseline_samples.is_some() {
                cfg.eval.baseline_samples = baseline_samples;
            }
            if baseline_budget.is_some() {
                cfg.eval.baseline_budget = baseline_budget;
            }
            if cfg.train.task != TaskKind::Classification {
                bail!("detection error rates need a classification system");
            }
            let mut o = Outputs::new(&out_dir, "sweep", &cfg)?;
            let sweep = cfg.sweep_config()?;
            let outcome = sweep_snr(&sweep, &DetectorRegistry::default())?;
            o.text("sweep.csv", &eval_csv(&outcome.reports))?;
            for (i, (system, history)) in outcome.systems.iter().zip(&outcome.loss_histories).enumerate() {
                let db = sweep.snrs_db[i];
                if let Some(system) = system {
                    let tag = snr_tag(db);
                    o.seed(
                        &format!("train-data/{tag}"),
                        derive_seed(sweep.seed, "sweep-train-data", &[i as u64]),
                    );
                    o.seed(
                        &format!("train/{tag}"),
                        derive_seed(sweep.seed, "sweep-train", &[i as u64]),
                    );
                    let meta = TrainingMetadata {
                        model: sweep.model.with_snr_db(db)?,
                        train: sweep.train.clone(),
                        train_size: sweep.train_size,
                        data_seed: derive_seed(sweep.seed, "sweep-train-data", &[i as u64]),
                        final_loss: history.last().copied(),
                    };
                    o.checkpoint(
                        &format!("checkpoint-{tag}dB.json"),
                        &Checkpoint::new(system.clone(), Some(meta)),
                    )?;
                    o.text(&format!("loss-{tag}dB.csv"), &loss_csv(history))?;
                }
            }
            for r in &outcome.reports {
                println!(
                    "{:<22} {:>6} dB  symbol error {:.4e}",
                    r.detector,
                    r.snr_db,
                    r.counts.symbol_rate()
                );
            }
            o.finish()
        }
        Command::GridScan {
            model,
            train: t,
            meta,
            p_values,
            sample_values,
            levels,
            repeats,
        } => {
            model.apply(&mut cfg);
            t.apply(&mut cfg);
            meta.apply(&mut cfg);
            set(&mut cfg.grid.p_values, p_values);
            set(&mut cfg.grid.sample_values, sample_values);
            set(&mut cfg.grid.levels, levels);
            set(&mut cfg.grid.repeats, repeats);
            let mut o = Outputs::new(&out_dir, "grid-scan", &cfg)?;
            let cells = grid_scan(&cfg.grid_config()?)?;
            o.text("grid.csv", &grid_csv(&cells))?;
            println!("scanned {} cells", cells.len());
            o.finish()
        }
        Command::Meta {
            model,
            train: t,
            meta,
            max_evals,
            strategy,
            p_max,
            retrain,
        } => {
            model.apply(&mut cfg);
            t.apply(&mut cfg);
            meta.apply(&mut cfg);
            set(&mut cfg.meta.max_evaluations, max_evals);
            set(&mut cfg.meta.strategy, strategy);
            if p_max.is_some() {
                cfg.meta.p_max = p_max;
            }
            cfg.meta.retrain |= retrain;
            let mut o = Outputs::new(&out_dir, "meta", &cfg)?;
            let learn = cfg.learn_config()?;
            o.seed("objective", derive_seed(learn.seed, "meta-objective", &[]));
            let signal = cfg.signal_model()?;
            let out = learn_system(&signal, &learn, &StrategyRegistry::default())?;
            o.text("trace.csv", &trace_csv(&out.search.trace))?;
            for (db, system) in learn.objective.snrs_db.iter().zip(&out.systems) {
                let tag = snr_tag(*db);
                o.checkpoint(
                    &format!("checkpoint-{tag}dB.json"),
                    &Checkpoint::new(system.clone(), None),
                )?;
            }
            println!(
                "selected {} using {} bits, f = {}{}",
                out.theta,
                out.theta.bit_cost(),
                out.search.best_value,
                if out.search.exhausted {
                    " (feasible set exhausted)"
                } else {
                    ""
                }
            );
            o.finish()
        }
    }
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: cannot size the worker pool: {e}");
            std::process::exit(2);
        }
    }
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
