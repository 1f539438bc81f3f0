//! JSON run configuration.
//!
//! ```json
//! {
//!   "model": { "name": "bouncing-ball", "u0": 1.0, "v0": 0.0, "g": 10.0 },
//!   "scheme": { "h": 1e-4, "e": 0.5, "t_end": 1.5 },
//!   "outputs": { "trajectory": "trajectory.csv", "impacts": "impacts.csv" },
//!   "oracle": true,
//!   "seed": 7,
//!   "convergence": { "h_values": [4e-4, 2e-4, 1e-4], "horizon": 1.2 }
//! }
//! ```
//!
//! Every section except `model` may be omitted; unknown keys are rejected.

use std::path::{Path, PathBuf};

use impactsim::analysis::ReferenceKind;
use impactsim::models::{ModelDescriptor, ModelSpec};
use impactsim::scheme::SchemeConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    #[serde(default)]
    pub scheme: SchemeConfig,
    #[serde(default)]
    pub outputs: OutputPaths,
    /// Also integrate with the event-driven oracle and write its trajectory.
    #[serde(default)]
    pub oracle: bool,
    /// Seed for `lemma-check` when no `--seed` is given.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub convergence: ConvergenceConfig,
}

/// Output file names, relative to `--out-dir` unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputPaths {
    pub trajectory: PathBuf,
    pub impacts: PathBuf,
    pub oracle: PathBuf,
    pub convergence: PathBuf,
    pub summary: PathBuf,
}

impl Default for OutputPaths {
    fn default() -> Self {
        Self {
            trajectory: "trajectory.csv".into(),
            impacts: "impacts.csv".into(),
            oracle: "oracle.csv".into(),
            convergence: "convergence.csv".into(),
            summary: "convergence_summary.txt".into(),
        }
    }
}

/// Which reference a sweep measures against. `auto` uses the closed form when the model has one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceChoice {
    #[default]
    Auto,
    FinestGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceConfig {
    /// At least three step sizes, each half the previous one.
    pub h_values: Vec<f64>,
    /// End of the error window; defaults to `scheme.t_end`.
    pub horizon: Option<f64>,
    pub reference: ReferenceChoice,
    /// Finest-grid reference step is `min(h_values) / refinement`.
    pub refinement: usize,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self {
            h_values: vec![4e-4, 2e-4, 1e-4],
            horizon: None,
            reference: ReferenceChoice::Auto,
            refinement: 4,
        }
    }
}

impl ConvergenceConfig {
    pub fn reference_kind(&self, model: &ModelDescriptor) -> ReferenceKind {
        match self.reference {
            ReferenceChoice::Auto if model.has_closed_form() => ReferenceKind::Oracle,
            _ => ReferenceKind::FinestGrid,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|err| CliError::Config(format!("cannot read {}: {err}", path.display())))?;
        Self::parse(&text).map_err(|err| match err {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|err| CliError::Config(err.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Check the scheme section and build the model it names.
    pub fn build_model(&self) -> Result<ModelDescriptor, CliError> {
        self.scheme
            .validate()
            .map_err(|err| CliError::Config(format!("scheme: {err}")))?;
        if self.scheme.t0 != 0.0 {
            return Err(CliError::Config(format!(
                "scheme.t0: models start at t = 0, got {}",
                self.scheme.t0
            )));
        }
        self.model
            .build(self.scheme.e)
            .map_err(|err| CliError::Config(format!("model ({}): {err}", self.model.name())))
    }

    pub fn horizon(&self) -> f64 {
        self.convergence.horizon.unwrap_or(self.scheme.t_end)
    }

    pub fn check_convergence(&self) -> Result<(), CliError> {
        let hs = &self.convergence.h_values;
        if hs.len() < 3 {
            return Err(CliError::Config(format!(
                "convergence.h_values: need at least 3 step sizes, got {}",
                hs.len()
            )));
        }
        if hs.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
            return Err(CliError::Config(
                "convergence.h_values: step sizes must be positive".into(),
            ));
        }
        if self.convergence.refinement == 0 {
            return Err(CliError::Config(
                "convergence.refinement must be at least 1".into(),
            ));
        }
        let horizon = self.horizon();
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(CliError::Config(format!(
                "convergence.horizon = {horizon} must be positive"
            )));
        }
        Ok(())
    }
}
