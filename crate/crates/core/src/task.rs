//! Benchmark tasks and the training pipeline shared by every experiment.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{train_flow, FlowArch, FlowModel, FlowTrainConfig, FlowTrainReport};
use crate::landscape::{LandscapeConfig, SyntheticLandscape};
use crate::predictor::{
    knn_smooth_labels, train_predictor, train_regressor, PredictorConfig, PredictorModel, PredictorTrainReport, Role,
};
use crate::seq::{difficulty_filter, Dataset, PercentileRange, Vocabulary};
use crate::vae::{reconstruction_accuracy, sample_latents, train_vae, VaeConfig, VaeModel, VaeTrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    SyntheticMedium,
    SyntheticHard,
    Csv,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::SyntheticMedium => "synthetic-medium",
            TaskKind::SyntheticHard => "synthetic-hard",
            TaskKind::Csv => "csv",
        }
    }

    /// Percentile window and mutation gap defining the difficulty.
    pub fn difficulty(&self) -> Option<(PercentileRange, usize)> {
        match self {
            TaskKind::SyntheticMedium => Some((PercentileRange::medium(), 6)),
            TaskKind::SyntheticHard => Some((PercentileRange::hard(), 7)),
            TaskKind::Csv => None,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic-medium" => Ok(TaskKind::SyntheticMedium),
            "synthetic-hard" => Ok(TaskKind::SyntheticHard),
            "csv" => Ok(TaskKind::Csv),
            _ => Err(Error::InvalidArgument(format!(
                "unknown task {s:?}; expected synthetic-medium, synthetic-hard or csv"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskConfig {
    pub kind: TaskKind,
    pub length: usize,
    pub vocab_size: usize,
    pub full_size: usize,
    pub max_mutations: usize,
    pub alternatives_per_position: usize,
    /// Seeded subsample cap applied after the difficulty filter.
    pub train_size: Option<usize>,
    pub landscape_seed: u64,
    pub sample_seed: u64,
}

impl SyntheticTaskConfig {
    pub fn new(kind: TaskKind) -> Self {
        Self {
            kind,
            length: 20,
            vocab_size: 20,
            full_size: 20_000,
            max_mutations: 9,
            alternatives_per_position: 4,
            train_size: Some(2500),
            landscape_seed: 11,
            sample_seed: 12,
        }
    }
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        Self::new(TaskKind::SyntheticHard)
    }
}

/// A limited training set carved out of a larger reference set, plus the
/// oracle used to score designs.
#[derive(Debug, Clone)]
pub struct Task {
    pub kind: TaskKind,
    pub vocab: Vocabulary,
    pub full: Dataset,
    pub train: Dataset,
    pub oracle: PredictorModel,
}

impl Task {
    pub fn synthetic(cfg: &SyntheticTaskConfig) -> Result<Self> {
        let (range, gap) = cfg.kind.difficulty().ok_or_else(|| Error::config("synthetic task kind required"))?;
        if cfg.vocab_size != 20 {
            return Err(Error::config("synthetic tasks use the 20-letter amino-acid alphabet"));
        }
        let landscape = SyntheticLandscape::generate(&LandscapeConfig {
            alternatives_per_position: cfg.alternatives_per_position,
            ..LandscapeConfig::new(cfg.length, cfg.vocab_size, cfg.landscape_seed)
        })?;
        let full = landscape.sample_full_set(cfg.full_size, cfg.max_mutations, cfg.sample_seed)?;
        let mut train = difficulty_filter(&full, range, gap)?;
        if let Some(cap) = cfg.train_size.filter(|&c| c < train.n()) {
            let mut keep: Vec<usize> = (0..train.n()).collect();
            keep.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.sample_seed ^ 0x7a1e));
            keep.truncate(cap);
            keep.sort_unstable();
            train = train.subset(keep)?;
        }
        Ok(Self {
            kind: cfg.kind,
            vocab: Vocabulary::amino_acids(),
            full,
            train,
            oracle: PredictorModel::from_landscape(landscape),
        })
    }

    /// Task from a reference set, a training subset and an oracle checkpoint.
    pub fn from_parts(full: Dataset, train: Dataset, oracle: PredictorModel, vocab: Vocabulary) -> Result<Self> {
        if train.seq_len() != full.seq_len() || oracle.length != full.seq_len() {
            return Err(Error::LengthMismatch { expected: full.seq_len(), got: train.seq_len() });
        }
        Ok(Self { kind: TaskKind::Csv, vocab, full, train, oracle })
    }

    pub fn length(&self) -> usize {
        self.full.seq_len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub vae: VaeConfig,
    pub flow: FlowTrainConfig,
    pub flow_hidden: usize,
    pub flow_depth: usize,
    pub predictor: PredictorConfig,
    /// Train the fitness-conditioned flow as well.
    pub conditional_flow: bool,
    /// Train the predictor on k-NN smoothed labels when set.
    pub smoothing_k: Option<usize>,
    /// Fraction of the training set held out from VAE training.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            vae: VaeConfig::default(),
            flow: FlowTrainConfig::default(),
            flow_hidden: 128,
            flow_depth: 3,
            predictor: PredictorConfig::default(),
            conditional_flow: true,
            smoothing_k: None,
            holdout_fraction: 0.1,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn flow_arch(&self, conditional: bool) -> FlowArch {
        FlowArch { hidden: self.flow_hidden, depth: self.flow_depth, ..FlowArch::new(self.vae.latent_dim, conditional) }
    }
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    pub vae: VaeModel,
    pub flow: FlowModel,
    pub conditional_flow: Option<FlowModel>,
    pub predictor: PredictorModel,
    pub vae_report: VaeTrainReport,
    pub holdout_accuracy: f64,
    pub flow_report: FlowTrainReport,
    pub predictor_report: PredictorTrainReport,
}

/// Splits indices `0..n` into (train, held-out) with a seeded shuffle.
pub fn holdout_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held = ((n as f64 * fraction).round() as usize).min(n.saturating_sub(1));
    let rest = idx.split_off(held);
    (rest, idx)
}

pub fn train_vae_stage(
    data: &Dataset,
    vocab_size: usize,
    cfg: &PipelineConfig,
) -> Result<(VaeModel, VaeTrainReport, f64)> {
    let seqs = data.sequences();
    let (fit, held) = holdout_split(seqs.len(), cfg.holdout_fraction, cfg.seed ^ 0x401d);
    let fit_seqs: Vec<_> = fit.iter().map(|&i| seqs[i].clone()).collect();
    let (vae, report) = train_vae(&fit_seqs, data.seq_len(), vocab_size, &cfg.vae, cfg.seed)?;
    let accuracy = if held.is_empty() {
        report.final_accuracy
    } else {
        let held_seqs: Vec<_> = held.iter().map(|&i| seqs[i].clone()).collect();
        reconstruction_accuracy(&vae, &held_seqs)?
    };
    Ok((vae, report, accuracy))
}

/// Fits a flow to sampled latents of the training set. Conditional flows see
/// the normalized fitness labels.
pub fn train_flow_stage(
    data: &Dataset,
    vae: &VaeModel,
    cfg: &PipelineConfig,
    conditional: bool,
) -> Result<(FlowModel, FlowTrainReport)> {
    let latents = sample_latents(vae, &data.sequences(), cfg.seed ^ 0x1a7e)?;
    let labels = conditional.then(|| data.normalized_fitness());
    let flow_cfg = FlowTrainConfig { seed: cfg.flow.seed ^ u64::from(conditional), ..cfg.flow.clone() };
    train_flow(latents.view(), labels.as_deref(), &flow_cfg, cfg.flow_arch(conditional))
}

pub fn train_predictor_stage(
    data: &Dataset,
    vocab_size: usize,
    cfg: &PipelineConfig,
) -> Result<(PredictorModel, PredictorTrainReport)> {
    let seed = cfg.seed ^ 0x9d1c;
    match cfg.smoothing_k {
        None => train_predictor(data, vocab_size, &cfg.predictor, seed),
        Some(k) => {
            let labels = knn_smooth_labels(data, k)?;
            train_regressor(&data.sequences(), &labels, vocab_size, &cfg.predictor, Role::Smoothed, seed)
        }
    }
}

/// VAE, then latents, then the flow prior(s); the predictor is independent.
pub fn train_pipeline(task: &Task, cfg: &PipelineConfig) -> Result<Pipeline> {
    let v = task.vocab.size();
    let (vae, vae_report, holdout_accuracy) = train_vae_stage(&task.train, v, cfg)?;
    let (flow, flow_report) = train_flow_stage(&task.train, &vae, cfg, false)?;
    let conditional_flow =
        if cfg.conditional_flow { Some(train_flow_stage(&task.train, &vae, cfg, true)?.0) } else { None };
    let (predictor, predictor_report) = train_predictor_stage(&task.train, v, cfg)?;
    Ok(Pipeline { vae, flow, conditional_flow, predictor, vae_report, holdout_accuracy, flow_report, predictor_report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_kind_round_trip() {
        for k in [TaskKind::SyntheticMedium, TaskKind::SyntheticHard, TaskKind::Csv] {
            assert_eq!(k.as_str().parse::<TaskKind>().unwrap(), k);
        }
        assert!("easy".parse::<TaskKind>().is_err());
    }

    #[test]
    fn holdout_split_partitions() {
        let (a, b) = holdout_split(50, 0.1, 3);
        assert_eq!((a.len(), b.len()), (45, 5));
        let mut all: Vec<_> = a.into_iter().chain(b).collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn small_synthetic_task_keeps_parent_range() {
        let cfg = SyntheticTaskConfig { full_size: 2000, ..SyntheticTaskConfig::new(TaskKind::SyntheticMedium) };
        let task = Task::synthetic(&cfg).unwrap();
        assert_eq!((task.train.y_min, task.train.y_max), (task.full.y_min, task.full.y_max));
        assert!(task.train.n() < task.full.n());
    }
}
