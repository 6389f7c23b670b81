//! Experiment configuration: a flat TOML file describing game source,
//! communication graph, algorithm, step sizes (with "auto" resolution),
//! seeds, stopping rule and output, plus the resolution step that turns it
//! into validated operators and a run description.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game::{
    estimate_monotonicity, estimate_pdi_cocoercivity, generate_task_game, GameError, GameSpec,
    Monotonicity, TaskAllocationParams, TaskTopology, WORKER_COUNT,
};
use crate::graph::{CommGraph, GraphError};
use crate::operators::{Certificate, SplitOperators, StepError, StepSizes};
use crate::solvers::{Algorithm, RunSpec};

/// Env var naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "GNES_OUT_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("TOML parse error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("instance parse error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("step field {0} must be a number or \"auto\"")]
    BadAuto(String),
    #[error("exactly one of game.seed and game.instance must be given")]
    GameSource,
    #[error("random graph requires graph.p and graph.seed")]
    RandomGraph,
    #[error("unknown graph kind {0:?}")]
    GraphKind(String),
    #[error("estimated monotonicity constant not positive: {0}")]
    BadConstants(f64),
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Steps(#[from] StepError),
}

/// A number, or the literal string "auto".
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AutoOr {
    Auto,
    Value(f64),
}

impl AutoOr {
    pub fn value(self) -> Option<f64> {
        match self {
            AutoOr::Auto => None,
            AutoOr::Value(v) => Some(v),
        }
    }
}

impl Serialize for AutoOr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            AutoOr::Auto => s.serialize_str("auto"),
            AutoOr::Value(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for AutoOr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(AutoOr::Value(v)),
            Raw::Text(t) if t == "auto" => Ok(AutoOr::Auto),
            Raw::Text(t) => Err(serde::de::Error::custom(format!(
                "expected a number or \"auto\", got {t:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GameSection {
    /// Generator seed; mutually exclusive with `instance`.
    pub seed: Option<u64>,
    /// Path to a generated instance file.
    pub instance: Option<PathBuf>,
    /// "figure-one" (default) or "random".
    #[serde(default)]
    pub topology: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphSection {
    /// "ring" | "path" | "star" | "random".
    pub kind: String,
    pub p: Option<f64>,
    pub seed: Option<u64>,
}

impl Default for GraphSection {
    fn default() -> Self {
        GraphSection {
            kind: "ring".into(),
            p: None,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExecMode {
    Deterministic,
    Threaded,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlgorithmSection {
    pub name: Algorithm,
    #[serde(default = "default_exec")]
    pub execution: ExecMode,
}

fn default_exec() -> ExecMode {
    ExecMode::Deterministic
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepsSection {
    pub sigma: f64,
    pub gamma: f64,
    pub tau: f64,
    pub eta: AutoOr,
    pub delta: AutoOr,
    #[serde(default = "default_c")]
    pub c: f64,
    #[serde(default)]
    pub psi: usize,
}

fn default_c() -> f64 {
    0.9
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct ActivationSection {
    /// Per-agent activation rates; uniform when omitted.
    pub rates: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedsSection {
    #[serde(default = "one")]
    pub activation: u64,
    #[serde(default = "two")]
    pub delay: u64,
    #[serde(default = "three")]
    pub init: u64,
}

fn one() -> u64 {
    1
}
fn two() -> u64 {
    2
}
fn three() -> u64 {
    3
}

impl Default for SeedsSection {
    fn default() -> Self {
        SeedsSection {
            activation: 1,
            delay: 2,
            init: 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoppingSection {
    pub max_steps: usize,
    pub tol: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputSection {
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    /// Output directory; falls back to $GNES_OUT_DIR, then ".".
    pub dir: Option<PathBuf>,
    #[serde(default = "default_prefix")]
    pub prefix: String,
}

fn default_record_every() -> usize {
    100
}

fn default_prefix() -> String {
    "run".into()
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            record_every: default_record_every(),
            dir: None,
            prefix: default_prefix(),
        }
    }
}

/// Optional overrides for the monotonicity constants; anything omitted is
/// estimated by sampling.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct ConstantsSection {
    pub upsilon: Option<f64>,
    pub chi: Option<f64>,
    pub chi_bar: Option<f64>,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

fn default_samples() -> usize {
    200
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub game: GameSection,
    #[serde(default)]
    pub graph: GraphSection,
    pub algorithm: AlgorithmSection,
    pub steps: StepsSection,
    #[serde(default)]
    pub activation: ActivationSection,
    #[serde(default)]
    pub seeds: SeedsSection,
    pub stopping: StoppingSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub constants: Option<ConstantsSection>,
}

/// Everything needed to execute a run.
pub struct Resolved {
    pub params: TaskAllocationParams,
    pub ops: SplitOperators,
    pub steps: StepSizes,
    pub certificate: Certificate,
    pub constants: Monotonicity,
    pub run: RunSpec,
    pub algorithm: Algorithm,
    pub execution: ExecMode,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(s)?)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn load_params(&self) -> Result<TaskAllocationParams, ConfigError> {
        match (&self.game.seed, &self.game.instance) {
            (Some(seed), None) => {
                let topo = match self.game.topology.as_deref() {
                    None | Some("figure-one") => TaskTopology::FigureOne,
                    Some("random") => TaskTopology::Random,
                    Some(other) => return Err(ConfigError::GraphKind(other.to_string())),
                };
                let params = TaskAllocationParams::sample(*seed, topo);
                params.validate()?;
                Ok(params)
            }
            (None, Some(path)) => {
                let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                    path: path.clone(),
                    source,
                })?;
                let params: TaskAllocationParams = serde_json::from_str(&text)?;
                params.validate()?;
                Ok(params)
            }
            _ => Err(ConfigError::GameSource),
        }
    }

    pub fn build_graph(&self) -> Result<CommGraph, ConfigError> {
        let n = WORKER_COUNT;
        let g = match self.graph.kind.as_str() {
            "ring" => CommGraph::ring(n)?,
            "path" => CommGraph::path(n)?,
            "star" => CommGraph::star(n)?,
            "random" => {
                let (Some(p), Some(seed)) = (self.graph.p, self.graph.seed) else {
                    return Err(ConfigError::RandomGraph);
                };
                CommGraph::random_connected(n, p, seed)?
            }
            other => return Err(ConfigError::GraphKind(other.to_string())),
        };
        Ok(g)
    }

    /// Resolve the configuration: build game, graph and operators, estimate
    /// (or take) the monotonicity constants, resolve "auto" steps through
    /// the validation certificate, and assemble the run description.
    pub fn resolve(&self) -> Result<Resolved, ConfigError> {
        let params = self.load_params()?;
        let game = generate_task_game(&params)?;
        let graph = self.build_graph()?;
        let algorithm = self.algorithm.name;
        let pdi = algorithm == Algorithm::AdagnesPdi;

        let constants = self.resolve_constants(&game, &graph, pdi)?;

        let ops = if pdi {
            SplitOperators::new_pdi(game, graph)
        } else {
            SplitOperators::new_full(game, graph)
        };

        let n = ops.player_count();
        let p_min = match &self.activation.rates {
            Some(rates) => {
                let total: f64 = rates.iter().sum();
                rates.iter().copied().fold(f64::INFINITY, f64::min) / total
            }
            None => 1.0 / n as f64,
        };

        let (steps, certificate) = ops.auto_tune(
            self.steps.sigma,
            self.steps.gamma,
            self.steps.tau,
            self.steps.eta.value(),
            self.steps.delta.value(),
            self.steps.c,
            self.steps.psi,
            &constants,
            p_min,
        )?;

        let run = RunSpec {
            algorithm,
            max_steps: self.stopping.max_steps,
            tol: self.stopping.tol,
            record_every: self.output.record_every,
            rates: self.activation.rates.clone(),
            seed_activation: self.seeds.activation,
            seed_delay: self.seeds.delay,
            seed_init: self.seeds.init,
            reference: None,
            certificate: Some(certificate),
        };

        Ok(Resolved {
            params,
            ops,
            steps,
            certificate,
            constants,
            run,
            algorithm,
            execution: self.algorithm.execution,
        })
    }

    fn resolve_constants(
        &self,
        game: &GameSpec,
        graph: &CommGraph,
        pdi: bool,
    ) -> Result<Monotonicity, ConfigError> {
        let section = self.constants.clone().unwrap_or_default();
        let samples = section.samples.max(2);
        let est_seed = self.game.seed.unwrap_or(0) ^ 0x9e37_79b9;
        if pdi {
            let chi_bar = match section.chi_bar {
                Some(v) => v,
                None => estimate_pdi_cocoercivity(game, samples, est_seed),
            };
            if !(chi_bar > 0.0) {
                return Err(ConfigError::BadConstants(chi_bar));
            }
            Ok(Monotonicity::Pdi {
                chi_bar,
                d_star: graph.max_degree(),
            })
        } else {
            let est = estimate_monotonicity(game, samples, est_seed);
            let upsilon = section.upsilon.unwrap_or(est.upsilon);
            let chi = section.chi.unwrap_or(est.chi);
            if !(upsilon > 0.0) {
                return Err(ConfigError::BadConstants(upsilon));
            }
            Ok(Monotonicity::FullInfo { upsilon, chi })
        }
    }

    /// Output directory: config value, else $GNES_OUT_DIR, else ".".
    pub fn output_dir(&self) -> PathBuf {
        if let Some(d) = &self.output.dir {
            return d.clone();
        }
        if let Ok(d) = std::env::var(OUTPUT_DIR_ENV) {
            if !d.is_empty() {
                return PathBuf::from(d);
            }
        }
        PathBuf::from(".")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[game]
seed = 42

[algorithm]
name = "sydney"

[steps]
sigma = 0.05
gamma = 0.05
tau = 0.05
eta = "auto"
delta = "auto"

[stopping]
max_steps = 1000
tol = 1e-6
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.steps.eta, AutoOr::Auto);
        assert_eq!(cfg.steps.c, 0.9);
        assert_eq!(cfg.graph.kind, "ring");
        assert_eq!(cfg.seeds.activation, 1);
        assert_eq!(cfg.output.record_every, 100);
        assert_eq!(cfg.algorithm.execution, ExecMode::Deterministic);
    }

    #[test]
    fn explicit_eta_value_parses() {
        let text = MINIMAL.replace("eta = \"auto\"", "eta = 0.25");
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg.steps.eta, AutoOr::Value(0.25));
    }

    #[test]
    fn bad_auto_string_rejected() {
        let text = MINIMAL.replace("eta = \"auto\"", "eta = \"automatic\"");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn both_game_sources_rejected() {
        let text = MINIMAL.replace("seed = 42", "seed = 42\ninstance = \"x.json\"");
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        assert!(matches!(cfg.load_params(), Err(ConfigError::GameSource)));
    }

    #[test]
    fn output_dir_precedence() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        // no dir configured and env untouched here: just check it resolves
        let d = cfg.output_dir();
        assert!(!d.as_os_str().is_empty());
    }
}
