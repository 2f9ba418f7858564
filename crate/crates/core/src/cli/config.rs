//! Experiment configuration: JSON schema, flag overrides and the
//! cross-field checks run before any work starts.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::gauss_expect::ExpectSpec;
use crate::model::{InputSet, NetworkConfig};
use crate::simulator::{Scaling, WidthSchedule};

pub const SCHEMA_VERSION: u32 = 1;

pub type Matrix = Vec<Vec<f64>>;

/// Point evaluations requested by the `kappa`, `rate` and `shallow`
/// commands. Each list produces one CSV row per entry.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Query {
    /// Covariance for `kappa` and `rate kappa-star`; defaults to `g^(0)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Matrix>,
    #[serde(default)]
    pub eta: Vec<Matrix>,
    #[serde(default)]
    pub y: Vec<Matrix>,
    #[serde(default)]
    pub g: Vec<Matrix>,
    /// `|A| x n_out` output matrices.
    #[serde(default)]
    pub z: Vec<Matrix>,
}

fn default_target_prob() -> f64 {
    1e-2
}

/// Half-space tail event. Without thresholds, one is tuned so the event has
/// probability about `target_prob` at the smallest schedule width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventSpec {
    #[serde(default)]
    pub alpha: usize,
    #[serde(default)]
    pub output: usize,
    #[serde(default)]
    pub thresholds: Vec<f64>,
    #[serde(default = "default_target_prob")]
    pub target_prob: f64,
}

impl Default for EventSpec {
    fn default() -> Self {
        EventSpec {
            alpha: 0,
            output: 0,
            thresholds: Vec::new(),
            target_prob: default_target_prob(),
        }
    }
}

fn default_samples() -> usize {
    100_000
}

fn default_schedule() -> WidthSchedule {
    WidthSchedule::powers_of_two(6, 10)
}

fn default_scaling() -> Scaling {
    Scaling::Md { rho: 0.5 }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    pub model: NetworkConfig,
    pub inputs: InputSet,
    #[serde(default = "default_schedule")]
    pub schedule: WidthSchedule,
    #[serde(default = "default_scaling")]
    pub scaling: Scaling,
    #[serde(default)]
    pub event: EventSpec,
    #[serde(default)]
    pub expect: ExpectSpec,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
    /// Derivative orders for the `shallow` commands; all zero when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<Vec<u8>>,
    #[serde(default)]
    pub query: Query,
    /// Report directory. Not part of the configuration hash.
    #[serde(default, skip_serializing)]
    pub output: Option<String>,
}

/// Command-line values that replace configuration fields.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub quad_order: Option<usize>,
    pub mc_samples: Option<usize>,
    pub activation: Option<String>,
    pub rho: Option<f64>,
    pub depth: Option<usize>,
    pub ld: bool,
    pub pattern: Option<Vec<u8>>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidConfig(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(order) = o.quad_order {
            self.expect.quad.order = Some(order);
        }
        if let Some(samples) = o.mc_samples {
            self.expect.mc.samples = samples;
        }
        if let Some(name) = &o.activation {
            self.model.activation = name.parse::<Activation>()?;
        }
        if let Some(depth) = o.depth {
            let last = self.model.ratios.gammas.last().copied().unwrap_or(1.0);
            self.model.ratios.gammas.resize(depth, last);
            self.model.depth = depth;
        }
        if o.ld {
            self.scaling = Scaling::Ld;
        }
        if let Some(rho) = o.rho {
            self.scaling = Scaling::Md { rho };
        }
        if let Some(p) = &o.pattern {
            self.pattern = Some(p.clone());
        }
        Ok(())
    }

    /// Cross-field checks. Deep networks need a bounded activation unless a
    /// single input is studied under ReLU.
    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported schema {} (expected {SCHEMA_VERSION})",
                self.schema
            )));
        }
        self.model.validate()?;
        self.inputs.validate(self.model.n0)?;
        self.schedule.validate()?;
        self.scaling.validate()?;
        if self.model.depth >= 2 && !self.model.activation.is_bounded() && self.inputs.len() >= 2 {
            return Err(Error::InvalidConfig(format!(
                "depth {} with unbounded activation {} and {} inputs: the deep-network \
                 results need a bounded continuous activation",
                self.model.depth,
                self.model.activation,
                self.inputs.len()
            )));
        }
        if self.samples == 0 {
            return Err(Error::InvalidConfig("samples must be positive".into()));
        }
        if self.expect.mc.samples < 1000 {
            return Err(Error::InvalidConfig(
                "Monte Carlo backend needs at least 1000 samples".into(),
            ));
        }
        if self.event.alpha >= self.inputs.len() || self.event.output >= self.model.n_out {
            return Err(Error::InvalidConfig("event coordinate out of range".into()));
        }
        if !(self.event.target_prob > 0.0 && self.event.target_prob < 1.0) {
            return Err(Error::InvalidConfig(
                "event target_prob must lie in (0, 1)".into(),
            ));
        }
        if let Some(p) = &self.pattern {
            if p.len() != self.model.n_out || p.iter().any(|&s| s > 1) {
                return Err(Error::InvalidConfig(format!(
                    "pattern must have {} entries in {{0, 1}}",
                    self.model.n_out
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON of every semantic field.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn pattern_or_zeros(&self) -> Vec<u8> {
        self.pattern
            .clone()
            .unwrap_or_else(|| vec![0; self.model.n_out])
    }
}
