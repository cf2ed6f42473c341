//! Common interface over the learned system and the MAP baselines, with a
//! registry that builds detectors by name.

use std::fmt;

use crate::baselines::{MapFull, MapSampled, MapSampledQuantized};
use crate::error::{Error, Result};
use crate::pipeline::TaskSystem;
use crate::signal::{DenseSignal, SignalModel, TaskVector};

/// Recovers task vectors from dense windows.
pub trait Detector: Send + Sync {
    fn name(&self) -> &str;

    /// Acquisition bits per window, when the detector is budgeted.
    fn bit_cost(&self) -> Option<usize> {
        None
    }

    fn detect_batch(&self, signals: &[&DenseSignal]) -> Result<Vec<TaskVector>>;

    fn detect(&self, x: &DenseSignal) -> Result<TaskVector> {
        Ok(self.detect_batch(&[x])?.remove(0))
    }
}

impl fmt::Debug for dyn Detector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Detector({})", self.name())
    }
}

/// A trained system used through its hard ADC.
#[derive(Debug, Clone)]
pub struct Learned(pub TaskSystem);

impl Detector for Learned {
    fn name(&self) -> &str {
        "learned"
    }

    fn bit_cost(&self) -> Option<usize> {
        Some(self.0.hyper.bit_cost())
    }

    fn detect_batch(&self, signals: &[&DenseSignal]) -> Result<Vec<TaskVector>> {
        self.0.predict_hard(signals)
    }
}

macro_rules! per_item_detector {
    ($ty:ty, $name:literal, $cost:expr) => {
        impl Detector for $ty {
            fn name(&self) -> &str {
                $name
            }

            fn bit_cost(&self) -> Option<usize> {
                ($cost)(self)
            }

            fn detect_batch(&self, signals: &[&DenseSignal]) -> Result<Vec<TaskVector>> {
                signals.iter().map(|x| <$ty>::detect(self, x)).collect()
            }
        }
    };
}

per_item_detector!(MapFull, "map-full", |_: &MapFull| None);
per_item_detector!(MapSampled, "map-sampled", |_: &MapSampled| None);
per_item_detector!(
    MapSampledQuantized,
    "map-sampled-quantized",
    |d: &MapSampledQuantized| Some(d.bits_per_sample() * d.sample_indices().len() * d.model_channels())
);

/// Inputs a detector may need at construction.
#[derive(Debug, Clone, Copy)]
pub struct DetectorContext<'a> {
    /// Model the MAP rules assume (true or perturbed).
    pub model: &'a SignalModel,
    pub system: Option<&'a TaskSystem>,
    /// `L~` for the sampled baselines.
    pub samples: usize,
    /// Bit budget for the sampled-quantized baseline.
    pub budget: usize,
}

pub type DetectorBuilder = fn(&DetectorContext<'_>) -> Result<Box<dyn Detector>>;

/// Name-indexed detector constructors.
pub struct DetectorRegistry {
    entries: Vec<(&'static str, DetectorBuilder)>,
}

impl Default for DetectorRegistry {
    fn default() -> Self {
        let mut r = Self { entries: Vec::new() };
        r.register("learned", |ctx| {
            let sys = ctx
                .system
                .ok_or_else(|| Error::InvalidParameter("the learned detector needs a trained system".into()))?;
            if !sys.is_hardened() {
                return Err(Error::Unsupported("learned detector needs a hardened system".into()));
            }
            sys.check_model(ctx.model)?;
            Ok(Box::new(Learned(sys.clone())))
        });
        r.register("map-full", |ctx| Ok(Box::new(MapFull::new(ctx.model)?)));
        r.register("map-sampled", |ctx| {
            Ok(Box::new(MapSampled::new(ctx.model, ctx.samples)?))
        });
        r.register("map-sampled-quantized", |ctx| {
            Ok(Box::new(MapSampledQuantized::new(ctx.model, ctx.samples, ctx.budget)?))
        });
        r
    }
}

impl DetectorRegistry {
    /// Adds or replaces a constructor.
    pub fn register(&mut self, name: &'static str, builder: DetectorBuilder) {
        self.entries.retain(|(n, _)| *n != name);
        self.entries.push((name, builder));
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| *n == name)
    }

    pub fn build(&self, name: &str, ctx: &DetectorContext<'_>) -> Result<Box<dyn Detector>> {
        let (_, builder) = self
            .entries
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::UnknownName {
                kind: "detector",
                name: name.to_string(),
                known: self.names().join(", "),
            })?;
        builder(ctx)
    }
}
