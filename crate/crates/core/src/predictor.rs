//! Scalar fitness models over relaxed one-hot inputs.
//!
//! The same forward path serves hard one-hot scoring and softmax-relaxed
//! guidance. An oracle is either a network trained on the full reference
//! set or, for synthetic tasks, the landscape itself.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{meta_entry, Checkpoint, NamedNet};
use crate::error::{Error, Result};
use crate::landscape::{synthetic_oracle, SyntheticLandscape};
use crate::net::{Adam, AdamConfig, Layer, Net, Tape};
use crate::seq::{levenshtein, one_hot_batch, Dataset, Sequence};
use crate::vae::divergence;

const ROW_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Predictor,
    Smoothed,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub channels: usize,
    pub kernel: usize,
    pub hidden: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self { channels: 16, kernel: 5, hidden: 64, learning_rate: 1e-3, epochs: 60, batch_size: 64 }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.channels == 0 || self.hidden == 0 {
            problems.push("predictor channels and hidden must be >= 1".to_string());
        }
        if self.kernel.is_multiple_of(2) {
            problems.push(format!("predictor kernel must be odd, got {}", self.kernel));
        }
        if !(self.learning_rate > 0.0) {
            problems.push("predictor learning_rate must be > 0".into());
        }
        if self.batch_size == 0 {
            problems.push("predictor batch_size must be >= 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
pub enum Backend {
    Network { net: Net },
    Landscape { landscape: SyntheticLandscape },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorModel {
    pub backend: Backend,
    pub role: Role,
    pub length: usize,
    pub vocab_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorTrainReport {
    pub epoch_mse: Vec<f64>,
    /// Mean squared error on the training records after the last epoch.
    pub final_mse: f64,
}

fn architecture(length: usize, vocab_size: usize, cfg: &PredictorConfig) -> Vec<Layer> {
    let (c, k, h) = (cfg.channels, cfg.kernel, cfg.hidden);
    vec![
        Layer::Conv1d { length, in_channels: vocab_size, out_channels: c, kernel: k },
        Layer::Silu,
        Layer::Conv1d { length, in_channels: c, out_channels: c, kernel: k },
        Layer::Silu,
        Layer::Dense { input: length * c, output: h },
        Layer::Silu,
        Layer::Dense { input: h, output: 1 },
    ]
}

impl PredictorModel {
    pub fn new(length: usize, vocab_size: usize, cfg: &PredictorConfig, role: Role, seed: u64) -> Result<Self> {
        let net = Net::new(length * vocab_size, architecture(length, vocab_size, cfg), seed)?;
        Ok(Self { backend: Backend::Network { net }, role, length, vocab_size })
    }

    /// Wraps a synthetic landscape as an exact oracle.
    pub fn from_landscape(landscape: SyntheticLandscape) -> Self {
        Self {
            length: landscape.length,
            vocab_size: landscape.vocab_size,
            backend: Backend::Landscape { landscape },
            role: Role::Oracle,
        }
    }

    fn check_relaxed(&self, x: ArrayView2<'_, f64>) -> Result<()> {
        let width = self.length * self.vocab_size;
        if x.ncols() != width {
            return Err(Error::shape(format!(
                "predictor expects {width} features (d={} x |V|={}), got {}",
                self.length,
                self.vocab_size,
                x.ncols()
            )));
        }
        for row in x.rows() {
            for group in row.exact_chunks(self.vocab_size) {
                let sum: f64 = group.sum();
                if (sum - 1.0).abs() > ROW_SUM_TOL
                    || group.iter().any(|&v| !(-ROW_SUM_TOL..=1.0 + ROW_SUM_TOL).contains(&v))
                {
                    return Err(Error::shape(format!("relaxed one-hot rows must lie on the simplex (row sum {sum})")));
                }
            }
        }
        Ok(())
    }

    /// Fitness of one relaxed one-hot matrix (`d x |V|`).
    pub fn predict_fitness(&self, relaxed: ArrayView2<'_, f64>) -> Result<f64> {
        if relaxed.dim() != (self.length, self.vocab_size) {
            return Err(Error::shape(format!(
                "expected ({}, {}) input, got {:?}",
                self.length,
                self.vocab_size,
                relaxed.dim()
            )));
        }
        let flat = relaxed.to_owned().into_shape_with_order((1, self.length * self.vocab_size)).expect("contiguous");
        Ok(self.predict_batch(flat.view())?[0])
    }

    /// Predictions for flattened rows (`n x d*|V|`).
    pub fn predict_batch(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        self.check_relaxed(x)?;
        match &self.backend {
            Backend::Network { net } => Ok(net.forward(x)?.column(0).to_vec()),
            Backend::Landscape { landscape } => x
                .rows()
                .into_iter()
                .map(|r| {
                    let m = r.to_owned().into_shape_with_order((self.length, self.vocab_size)).expect("contiguous");
                    landscape.relaxed_value_and_grad(m.view()).map(|(v, _)| v)
                })
                .collect(),
        }
    }

    /// Forward pass that keeps what is needed for input gradients.
    pub fn forward_tape(&self, x: ArrayView2<'_, f64>) -> Result<PredictionTape<'_>> {
        self.check_relaxed(x)?;
        let inner = match &self.backend {
            Backend::Network { net } => TapeInner::Network(net.forward_tape(x)?),
            Backend::Landscape { landscape } => {
                let mut values = Vec::with_capacity(x.nrows());
                let mut grads = Array2::zeros(x.dim());
                for (i, r) in x.rows().into_iter().enumerate() {
                    let m = r.to_owned().into_shape_with_order((self.length, self.vocab_size)).expect("contiguous");
                    let (v, g) = landscape.relaxed_value_and_grad(m.view())?;
                    values.push(v);
                    grads.row_mut(i).iter_mut().zip(g).for_each(|(d, gj)| *d = gj);
                }
                TapeInner::Landscape { values, grads }
            }
        };
        Ok(PredictionTape { model: self, inner })
    }

    /// Predictions and the vector-Jacobian product `adjoint^T dF/dx` per row.
    pub fn value_and_input_grad(&self, x: ArrayView2<'_, f64>, adjoint: &[f64]) -> Result<(Vec<f64>, Array2<f64>)> {
        let tape = self.forward_tape(x)?;
        let dx = tape.input_grad(adjoint)?;
        Ok((tape.values(), dx))
    }

    /// Scores of hard sequences. Landscape oracles use the exact evaluator.
    pub fn score_sequences(&self, seqs: &[Sequence]) -> Result<Vec<f64>> {
        if seqs.is_empty() {
            return Ok(Vec::new());
        }
        for s in seqs {
            if s.len() != self.length {
                return Err(Error::LengthMismatch { expected: self.length, got: s.len() });
            }
        }
        match &self.backend {
            Backend::Landscape { landscape } => seqs.iter().map(|s| synthetic_oracle(s, landscape)).collect(),
            Backend::Network { .. } => {
                let mut out = Vec::with_capacity(seqs.len());
                for chunk in seqs.chunks(512) {
                    out.extend(self.predict_batch(one_hot_batch(chunk, self.vocab_size).view())?);
                }
                Ok(out)
            }
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut meta = BTreeMap::from([
            meta_entry("role", self.role),
            meta_entry("length", self.length),
            meta_entry("vocab_size", self.vocab_size),
        ]);
        let networks = match &self.backend {
            Backend::Network { net } => vec![NamedNet::new("predictor", net)],
            Backend::Landscape { landscape } => {
                meta.extend([meta_entry("landscape", landscape)]);
                vec![]
            }
        };
        Checkpoint::new("predictor", meta, networks)
    }

    pub fn checksum(&self) -> String {
        self.checkpoint().checksum
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("predictor")?;
        let length: usize = ck.meta("length")?;
        let vocab_size: usize = ck.meta("vocab_size")?;
        let role: Role = ck.meta("role")?;
        let backend = if ck.body.metadata.contains_key("landscape") {
            Backend::Landscape { landscape: ck.meta("landscape")? }
        } else {
            let net = ck.network("predictor")?;
            if net.input_dim != length * vocab_size || net.output_dim() != 1 {
                return Err(Error::shape(format!(
                    "predictor network maps {} -> {}, expected {} -> 1",
                    net.input_dim,
                    net.output_dim(),
                    length * vocab_size
                )));
            }
            Backend::Network { net }
        };
        Ok(Self { backend, role, length, vocab_size })
    }
}

enum TapeInner {
    Network(Tape),
    Landscape { values: Vec<f64>, grads: Array2<f64> },
}

/// Recorded predictor evaluation; see [`PredictorModel::forward_tape`].
pub struct PredictionTape<'a> {
    model: &'a PredictorModel,
    inner: TapeInner,
}

impl PredictionTape<'_> {
    pub fn values(&self) -> Vec<f64> {
        match &self.inner {
            TapeInner::Network(t) => t.output().column(0).to_vec(),
            TapeInner::Landscape { values, .. } => values.clone(),
        }
    }

    pub fn input_grad(&self, adjoint: &[f64]) -> Result<Array2<f64>> {
        match &self.inner {
            TapeInner::Network(t) => {
                if adjoint.len() != t.output().nrows() {
                    return Err(Error::shape("one adjoint per row required"));
                }
                let Backend::Network { net } = &self.model.backend else { unreachable!() };
                let dout = Array2::from_shape_vec((adjoint.len(), 1), adjoint.to_vec()).expect("n x 1");
                net.input_grad(t, dout.view())
            }
            TapeInner::Landscape { values, grads } => {
                if adjoint.len() != values.len() {
                    return Err(Error::shape("one adjoint per row required"));
                }
                let mut dx = grads.clone();
                for (mut r, a) in dx.rows_mut().into_iter().zip(adjoint) {
                    r *= *a;
                }
                Ok(dx)
            }
        }
    }
}

/// Loads a frozen predictor (any role) from a checkpoint file.
pub fn load_external_predictor(path: &Path) -> Result<PredictorModel> {
    PredictorModel::from_checkpoint(&Checkpoint::load(path)?)
}

/// Least-squares regression of `labels` on hard one-hot sequences.
pub fn train_regressor(
    seqs: &[Sequence],
    labels: &[f64],
    vocab_size: usize,
    cfg: &PredictorConfig,
    role: Role,
    seed: u64,
) -> Result<(PredictorModel, PredictorTrainReport)> {
    if seqs.is_empty() || seqs.len() != labels.len() {
        return Err(Error::EmptyDataset("regressor needs one label per sequence".into()));
    }
    cfg.validate()?;
    let length = seqs[0].len();
    let mut model = PredictorModel::new(length, vocab_size, cfg, role, seed)?;
    let x_all = one_hot_batch(seqs, vocab_size);
    let Backend::Network { net } = &mut model.backend else { unreachable!() };
    let mut opt = Adam::new(AdamConfig::new(cfg.learning_rate), &net.params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut epoch_mse = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sse = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let x = x_all.select(ndarray::Axis(0), chunk);
            let tape = net.forward_tape(x.view()).map_err(|e| divergence(e, epoch))?;
            let pred = tape.output();
            let mut dout = Array2::zeros((chunk.len(), 1));
            for (k, &i) in chunk.iter().enumerate() {
                let r = pred[[k, 0]] - labels[i];
                sse += r * r;
                dout[[k, 0]] = 2.0 * r / chunk.len() as f64;
            }
            let (grads, _) = net.backward(&tape, dout.view()).map_err(|e| divergence(e, epoch))?;
            opt.step(&mut net.params, &grads)?;
        }
        let mse = sse / seqs.len() as f64;
        if !mse.is_finite() {
            return Err(Error::Divergence { epoch, loss: mse });
        }
        epoch_mse.push(mse);
    }
    let preds = net.forward(x_all.view())?;
    let final_mse = preds.column(0).iter().zip(labels).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / labels.len() as f64;
    Ok((model, PredictorTrainReport { epoch_mse, final_mse }))
}

/// Trains `g_phi` on the limited dataset's normalized fitness.
pub fn train_predictor(
    data: &Dataset,
    vocab_size: usize,
    cfg: &PredictorConfig,
    seed: u64,
) -> Result<(PredictorModel, PredictorTrainReport)> {
    train_regressor(&data.sequences(), &data.normalized_fitness(), vocab_size, cfg, Role::Predictor, seed)
}

/// Trains an evaluation oracle on the full reference set.
pub fn train_oracle(
    full: &Dataset,
    vocab_size: usize,
    cfg: &PredictorConfig,
    seed: u64,
) -> Result<(PredictorModel, PredictorTrainReport)> {
    train_regressor(&full.sequences(), &full.normalized_fitness(), vocab_size, cfg, Role::Oracle, seed)
}

/// Replaces each label by the mean label of its `k` nearest Levenshtein
/// neighbours (itself included). A simple stand-in for graph-smoothed
/// labels; not the graph-based smoothing procedure.
pub fn knn_smooth_labels(data: &Dataset, k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let seqs = data.sequences();
    let labels = data.normalized_fitness();
    let mut out = Vec::with_capacity(seqs.len());
    for s in &seqs {
        let mut dists: Vec<(usize, usize)> =
            seqs.iter().enumerate().map(|(j, t)| (levenshtein(s.tokens(), t.tokens()), j)).collect();
        dists.sort_unstable();
        let take = k.min(dists.len());
        out.push(dists[..take].iter().map(|&(_, j)| labels[j]).sum::<f64>() / take as f64);
    }
    Ok(out)
}
