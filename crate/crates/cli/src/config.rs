//! TOML run configuration.

use std::path::{Path, PathBuf};

use flowguide::flow::FlowTrainConfig;
use flowguide::predictor::{load_external_predictor, PredictorConfig};
use flowguide::sampler::SamplerConfig;
use flowguide::seq::{load_csv, RangeSource, Vocabulary};
use flowguide::task::{PipelineConfig, SyntheticTaskConfig, Task, TaskKind};
use flowguide::vae::VaeConfig;
use flowguide::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskKind,
    /// Training seed and the seed of single sampling runs.
    #[serde(default)]
    pub seed: u64,
    /// Seeds of multi-seed evaluations.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub parallelism: Option<usize>,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub synthetic: SyntheticTaskConfig,
    #[serde(default)]
    pub csv: Option<CsvSection>,
    #[serde(default)]
    pub vae: VaeConfig,
    #[serde(default)]
    pub flow: FlowSection,
    #[serde(default)]
    pub predictor: PredictorSection,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub extrapolation: ExtrapolationSection,
    #[serde(default)]
    pub ode: OdeSection,
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}

/// Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub checkpoints: PathBuf,
    pub results: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { checkpoints: "checkpoints".into(), results: "results".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSection {
    /// Reference set `S*`; its extremes define the normalization range
    /// unless a sidecar is given.
    pub full: PathBuf,
    pub train: PathBuf,
    /// Oracle checkpoint trained on the full set.
    pub oracle: PathBuf,
    #[serde(default)]
    pub range_sidecar: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub hidden: usize,
    pub depth: usize,
    /// Also train the fitness-conditioned flow.
    pub conditional: bool,
    /// Optional cross-check against the VAE latent size.
    pub latent_dim: Option<usize>,
}

impl Default for FlowSection {
    fn default() -> Self {
        let t = FlowTrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            hidden: 128,
            depth: 3,
            conditional: false,
            latent_dim: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorSection {
    pub channels: usize,
    pub kernel: usize,
    pub hidden: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Train on k-NN smoothed labels.
    pub smoothing_k: Option<usize>,
}

impl Default for PredictorSection {
    fn default() -> Self {
        let p = PredictorConfig::default();
        Self {
            channels: p.channels,
            kernel: p.kernel,
            hidden: p.hidden,
            learning_rate: p.learning_rate,
            epochs: p.epochs,
            batch_size: p.batch_size,
            smoothing_k: None,
        }
    }
}

impl PredictorSection {
    pub fn net(&self) -> PredictorConfig {
        PredictorConfig {
            channels: self.channels,
            kernel: self.kernel,
            hidden: self.hidden,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub alphas: Vec<f64>,
    pub inner_steps: Vec<usize>,
    /// Seeds per cell; one by default.
    pub seeds_per_cell: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { alphas: vec![0.0, 0.25, 0.5, 1.0], inner_steps: vec![0, 2, 5, 10], seeds_per_cell: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtrapolationSection {
    pub targets: Vec<f64>,
}

impl Default for ExtrapolationSection {
    fn default() -> Self {
        Self { targets: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OdeSection {
    pub steps: Vec<usize>,
}

impl Default for OdeSection {
    fn default() -> Self {
        Self { steps: vec![1, 2, 4, 8, 16, 24, 32, 64] }
    }
}

impl RunConfig {
    /// Parses the file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.paths.checkpoints);
        resolve(&mut cfg.paths.results);
        if let Some(csv) = cfg.csv.as_mut() {
            resolve(&mut csv.full);
            resolve(&mut csv.train);
            resolve(&mut csv.oracle);
            if let Some(s) = csv.range_sidecar.as_mut() {
                resolve(s);
            }
        }
        Ok(cfg)
    }

    /// Every problem at once, before any compute starts.
    pub fn validate(&self) -> Result<()> {
        let mut problems: Vec<String> = Vec::new();
        let mut check = |section: &str, r: Result<()>| match r {
            Ok(()) => {}
            Err(Error::Config(m)) => problems.push(format!("[{section}] {m}")),
            Err(e) => problems.push(format!("[{section}] {e}")),
        };
        check("vae", self.vae.validate());
        check("flow", self.flow_train().validate());
        check("predictor", self.predictor.net().validate());
        check("sampler", self.sampler.validate());
        if let Some(l) = self.flow.latent_dim {
            if l != self.vae.latent_dim {
                problems.push(format!("[flow] latent_dim {l} differs from [vae] latent_dim {}", self.vae.latent_dim));
            }
        }
        if self.flow.hidden == 0 || self.flow.depth == 0 {
            problems.push("[flow] hidden and depth must be >= 1".into());
        }
        if self.predictor.smoothing_k == Some(0) {
            problems.push("[predictor] smoothing_k must be >= 1".into());
        }
        if self.seeds.is_empty() {
            problems.push("seeds must not be empty".into());
        }
        if self.parallelism == Some(0) {
            problems.push("parallelism must be >= 1".into());
        }
        match (self.task, &self.csv) {
            (TaskKind::Csv, None) => problems.push("task \"csv\" needs a [csv] section".into()),
            (TaskKind::Csv, Some(csv)) => {
                for (key, p) in [("full", &csv.full), ("train", &csv.train), ("oracle", &csv.oracle)] {
                    if !p.is_file() {
                        problems.push(format!("[csv] {key} = {} does not exist", p.display()));
                    }
                }
                if let Some(s) = &csv.range_sidecar {
                    if !s.is_file() {
                        problems.push(format!("[csv] range_sidecar = {} does not exist", s.display()));
                    }
                }
            }
            (_, _) => {
                let s = &self.synthetic;
                if s.full_size == 0 || s.max_mutations == 0 || s.max_mutations > s.length {
                    problems.push(format!("[synthetic] full_size must be >= 1 and max_mutations in 1..={}", s.length));
                }
            }
        }
        if self.grid.alphas.is_empty() || self.grid.inner_steps.is_empty() || self.grid.seeds_per_cell == 0 {
            problems.push("[grid] alphas, inner_steps and seeds_per_cell must be nonempty".into());
        }
        if self.grid.alphas.iter().any(|a| !(*a >= 0.0)) {
            problems.push("[grid] alphas must be >= 0".into());
        }
        if self.extrapolation.targets.is_empty() || self.extrapolation.targets.iter().any(|y| !y.is_finite()) {
            problems.push("[extrapolation] targets must be nonempty and finite".into());
        }
        if self.ode.steps.is_empty() || self.ode.steps.contains(&0) {
            problems.push("[ode] steps must be nonempty and >= 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("{} problem(s):\n  - {}", problems.len(), problems.join("\n  - "))))
        }
    }

    pub fn flow_train(&self) -> FlowTrainConfig {
        FlowTrainConfig {
            learning_rate: self.flow.learning_rate,
            batch_size: self.flow.batch_size,
            epochs: self.flow.epochs,
            seed: self.seed,
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            vae: self.vae.clone(),
            flow: self.flow_train(),
            flow_hidden: self.flow.hidden,
            flow_depth: self.flow.depth,
            predictor: self.predictor.net(),
            conditional_flow: self.flow.conditional,
            smoothing_k: self.predictor.smoothing_k,
            seed: self.seed,
            ..PipelineConfig::default()
        }
    }

    pub fn load_task(&self) -> Result<Task> {
        match self.task {
            TaskKind::Csv => {
                let csv = self.csv.as_ref().ok_or_else(|| Error::Config("missing [csv] section".into()))?;
                let vocab = Vocabulary::amino_acids();
                let full_range = match &csv.range_sidecar {
                    Some(p) => RangeSource::Sidecar(p),
                    None => RangeSource::FromFile,
                };
                let full = load_csv(&csv.full, &vocab, full_range)?;
                let declared = RangeSource::Declared { y_min: full.y_min, y_max: full.y_max };
                let train = load_csv(&csv.train, &vocab, declared)?;
                let oracle = load_external_predictor(&csv.oracle)?;
                Task::from_parts(full, train, oracle, vocab)
            }
            kind => Task::synthetic(&SyntheticTaskConfig { kind, ..self.synthetic.clone() }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg: RunConfig = toml::from_str("task = \"synthetic-hard\"").unwrap();
        assert_eq!(cfg.seeds, vec![1, 2, 3, 4, 5]);
        assert_eq!((cfg.sampler.batch, cfg.sampler.top_k), (512, 128));
        cfg.validate().unwrap();
    }

    #[test]
    fn all_problems_are_listed() {
        let text = r#"
            task = "csv"
            seeds = []
            [vae]
            latent_dim = 8
            [flow]
            latent_dim = 16
            [sampler]
            top_k = 1000
        "#;
        let cfg: RunConfig = toml::from_str(text).unwrap();
        let msg = cfg.validate().unwrap_err().to_string();
        for needle in ["latent_dim 16 differs", "seeds must not be empty", "[csv] section", "top_k"] {
            assert!(msg.contains(needle), "{needle} missing from {msg}");
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("task = \"synthetic-hard\"\n[vae]\nlatnet_dim = 3").is_err());
    }
}
