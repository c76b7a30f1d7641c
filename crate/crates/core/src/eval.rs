//! Metrics, multi-seed benchmarks, sweeps and the results directory layout.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::predictor::PredictorModel;
use crate::sampler::{guided_sample, GuidanceMode, ModelChecksums, SampleResult, SamplerConfig};
use crate::seq::{levenshtein, Dataset, FitnessNormalizer, Sequence, Vocabulary};
use crate::vae::VaeModel;

/// Median with the mean of the two central values for even counts.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyDataset("median of an empty set".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Median oracle fitness, mapped through the reference range without clipping.
pub fn median_normalized_fitness(
    seqs: &[Sequence],
    oracle: &PredictorModel,
    normalizer: &FitnessNormalizer,
) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::EmptyDataset("fitness of an empty sequence set".into()));
    }
    let scores = oracle.score_sequences(seqs)?;
    let normalized: Vec<f64> = scores.iter().map(|&y| normalizer.normalize(y)).collect();
    median(&normalized)
}

/// Median Levenshtein distance over all unordered pairs.
pub fn diversity(seqs: &[Sequence]) -> Result<f64> {
    if seqs.len() < 2 {
        return Err(Error::InvalidArgument(format!("diversity needs at least 2 sequences, got {}", seqs.len())));
    }
    let mut d = Vec::with_capacity(seqs.len() * (seqs.len() - 1) / 2);
    for (i, a) in seqs.iter().enumerate() {
        for b in &seqs[i + 1..] {
            d.push(levenshtein(a.tokens(), b.tokens()) as f64);
        }
    }
    median(&d)
}

/// Median over `seqs` of the distance to the closest training sequence. A
/// design that already occurs in the training set contributes 0.
pub fn novelty(seqs: &[Sequence], train: &[Sequence]) -> Result<f64> {
    if seqs.is_empty() || train.is_empty() {
        return Err(Error::EmptyDataset("novelty needs designs and training sequences".into()));
    }
    let mins: Vec<f64> = seqs
        .iter()
        .map(|s| train.iter().map(|t| levenshtein(s.tokens(), t.tokens())).min().expect("nonempty") as f64)
        .collect();
    median(&mins)
}

/// Designs that occur verbatim in the training set.
pub fn exact_matches(seqs: &[Sequence], train: &[Sequence]) -> usize {
    let train: HashSet<&Sequence> = train.iter().collect();
    seqs.iter().filter(|s| train.contains(s)).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub median_fitness: f64,
    /// Zero when fewer than two sequences survive selection.
    pub diversity: f64,
    pub novelty: f64,
    pub n_sequences: usize,
    pub seed: u64,
    pub exact_matches: usize,
    pub shortfall: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub config: SamplerConfig,
    pub checksums: ModelChecksums,
    pub per_seed: Vec<MetricReport>,
    pub fitness: MeanStd,
    pub diversity: MeanStd,
    pub novelty: MeanStd,
}

impl BenchmarkSummary {
    pub fn from_reports(config: SamplerConfig, checksums: ModelChecksums, per_seed: Vec<MetricReport>) -> Self {
        let col = |f: fn(&MetricReport) -> f64| MeanStd::of(&per_seed.iter().map(f).collect::<Vec<_>>());
        Self {
            fitness: col(|r| r.median_fitness),
            diversity: col(|r| r.diversity),
            novelty: col(|r| r.novelty),
            config,
            checksums,
            per_seed,
        }
    }

    /// One table row: `fitness  diversity  novelty` as `mean ± std`.
    pub fn table_row(&self, label: &str) -> String {
        format!(
            "{label:<20} {:.2} ± {:.1}  {:.1} ± {:.1}  {:.1} ± {:.1}",
            self.fitness.mean,
            self.fitness.std,
            self.diversity.mean,
            self.diversity.std,
            self.novelty.mean,
            self.novelty.std
        )
    }
}

/// Frozen models and evaluation data shared by every job.
#[derive(Clone, Copy)]
pub struct EvalContext<'a> {
    pub vae: &'a VaeModel,
    pub flow: &'a FlowModel,
    pub conditional_flow: Option<&'a FlowModel>,
    pub predictor: &'a PredictorModel,
    pub oracle: &'a PredictorModel,
    pub train: &'a Dataset,
    pub parallelism: usize,
}

impl EvalContext<'_> {
    pub fn normalizer(&self) -> FitnessNormalizer {
        self.train.normalizer()
    }

    fn flow_for(&self, mode: GuidanceMode) -> Result<&FlowModel> {
        match mode {
            GuidanceMode::LearnedPosterior => self
                .conditional_flow
                .ok_or_else(|| Error::config("learned_posterior mode needs a conditional flow checkpoint")),
            _ => Ok(self.flow),
        }
    }

    pub fn sample(&self, cfg: &SamplerConfig) -> Result<SampleResult> {
        guided_sample(cfg, self.flow_for(cfg.mode)?, self.vae, self.predictor)
    }

    /// Metrics on a set of designs.
    pub fn report(&self, seqs: &[Sequence], seed: u64, shortfall: bool) -> Result<MetricReport> {
        let train = self.train.sequences();
        Ok(MetricReport {
            median_fitness: median_normalized_fitness(seqs, self.oracle, &self.normalizer())?,
            diversity: if seqs.len() < 2 { 0.0 } else { diversity(seqs)? },
            novelty: novelty(seqs, &train)?,
            n_sequences: seqs.len(),
            seed,
            exact_matches: exact_matches(seqs, &train),
            shortfall,
        })
    }

    /// Samples once and scores the top-k selection. Unguided runs have no
    /// predictor in the loop and are scored on the raw decoded batch.
    pub fn run_once(&self, cfg: &SamplerConfig) -> Result<(MetricReport, SampleResult)> {
        let result = self.sample(cfg)?;
        let report = if cfg.is_unguided() {
            self.report(&result.raw_sequences, cfg.seed, false)?
        } else {
            self.report(&result.sequences, cfg.seed, result.shortfall)?
        };
        Ok((report, result))
    }
}

/// Runs `f` over `jobs` on up to `parallelism` threads. Results come back in
/// job order whatever the scheduling.
pub fn run_jobs<T, R, F>(jobs: &[T], parallelism: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = parallelism.clamp(1, jobs.len().max(1));
    if workers == 1 {
        return jobs.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("worker panicked").into_iter().map(|r| r.expect("every job ran")).collect()
}

pub struct BenchmarkRun {
    pub summary: BenchmarkSummary,
    pub samples: Vec<SampleResult>,
}

/// Samples once per seed and aggregates. Trains nothing.
pub fn run_benchmark(ctx: &EvalContext<'_>, base: &SamplerConfig, seeds: &[u64]) -> Result<BenchmarkRun> {
    base.validate()?;
    let cfgs: Vec<SamplerConfig> = seeds.iter().map(|&seed| SamplerConfig { seed, ..base.clone() }).collect();
    let runs = run_jobs(&cfgs, ctx.parallelism, |c| ctx.run_once(c));
    let mut reports = Vec::with_capacity(runs.len());
    let mut samples = Vec::with_capacity(runs.len());
    for r in runs {
        let (rep, s) = r?;
        reports.push(rep);
        samples.push(s);
    }
    let checksums = samples
        .first()
        .map(|s| s.checksums.clone())
        .ok_or_else(|| Error::InvalidArgument("run_benchmark needs at least one seed".into()))?;
    Ok(BenchmarkRun { summary: BenchmarkSummary::from_reports(base.clone(), checksums, reports), samples })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub alpha: f64,
    pub inner_steps: usize,
    pub seed: u64,
    pub median_fitness: Option<f64>,
    pub diversity: Option<f64>,
    pub novelty: Option<f64>,
    pub n_sequences: Option<usize>,
    /// Failure message; the sweep carries on past failed cells.
    pub error: Option<String>,
}

/// One sampling run per (alpha, J, seed) cell, row-major over `alphas`.
pub fn grid_search(
    ctx: &EvalContext<'_>,
    base: &SamplerConfig,
    alphas: &[f64],
    inner_steps: &[usize],
    seeds: &[u64],
) -> Result<Vec<GridCell>> {
    if alphas.is_empty() || inner_steps.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("grid search needs nonempty grids and seeds".into()));
    }
    let mut cfgs = Vec::new();
    for &alpha in alphas {
        for &j in inner_steps {
            for &seed in seeds {
                cfgs.push(SamplerConfig { alpha, inner_steps: j, seed, alpha_schedule: None, ..base.clone() });
            }
        }
    }
    Ok(run_jobs(&cfgs, ctx.parallelism, |c| {
        let mut cell = GridCell {
            alpha: c.alpha,
            inner_steps: c.inner_steps,
            seed: c.seed,
            median_fitness: None,
            diversity: None,
            novelty: None,
            n_sequences: None,
            error: None,
        };
        match ctx.run_once(c) {
            Ok((r, _)) => {
                cell.median_fitness = Some(r.median_fitness);
                cell.diversity = Some(r.diversity);
                cell.novelty = Some(r.novelty);
                cell.n_sequences = Some(r.n_sequences);
            }
            Err(e) => cell.error = Some(e.to_string()),
        }
        cell
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolationRow {
    pub target_y: f64,
    pub mode: GuidanceMode,
    pub seed: u64,
    /// Median normalized oracle fitness of the raw decoded batch.
    pub achieved_y: f64,
}

/// For each target and mode, the oracle median of the raw decoded batch
/// (no deduplication, no top-k).
pub fn extrapolation_experiment(
    ctx: &EvalContext<'_>,
    base: &SamplerConfig,
    targets: &[f64],
    modes: &[GuidanceMode],
    seed: u64,
) -> Result<Vec<ExtrapolationRow>> {
    if modes.contains(&GuidanceMode::LearnedPosterior) {
        ctx.flow_for(GuidanceMode::LearnedPosterior)?;
    }
    let mut cfgs = Vec::new();
    for &target_y in targets {
        for &mode in modes {
            let mut c = SamplerConfig { target_y, seed, ..base.clone() };
            if mode == GuidanceMode::LearnedPosterior || mode == GuidanceMode::Unconditional {
                c = c.with_mode(GuidanceMode::Unconditional);
            }
            c.mode = mode;
            cfgs.push(c);
        }
    }
    let norm = ctx.normalizer();
    run_jobs(&cfgs, ctx.parallelism, |c| {
        let r = ctx.sample(c)?;
        Ok(ExtrapolationRow {
            target_y: c.target_y,
            mode: c.mode,
            seed,
            achieved_y: median_normalized_fitness(&r.raw_sequences, ctx.oracle, &norm)?,
        })
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdeStepsRow {
    pub steps: usize,
    pub median_fitness: f64,
    pub diversity: f64,
}

pub fn ode_steps_sweep(ctx: &EvalContext<'_>, base: &SamplerConfig, steps: &[usize]) -> Result<Vec<OdeStepsRow>> {
    if steps.contains(&0) {
        return Err(Error::InvalidArgument("ODE step counts must be >= 1".into()));
    }
    let cfgs: Vec<SamplerConfig> =
        steps.iter().map(|&k| SamplerConfig { steps: k, alpha_schedule: None, ..base.clone() }).collect();
    run_jobs(&cfgs, ctx.parallelism, |c| {
        let (r, _) = ctx.run_once(c)?;
        Ok(OdeStepsRow { steps: c.steps, median_fitness: r.median_fitness, diversity: r.diversity })
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: GuidanceMode,
    pub summary: BenchmarkSummary,
}

pub const ABLATION_MODES: [GuidanceMode; 3] =
    [GuidanceMode::Manifold, GuidanceMode::Naive, GuidanceMode::LearnedPosterior];

/// Seed-matched benchmark for manifold guidance, naive guidance and the
/// learned posterior.
pub fn ablation(ctx: &EvalContext<'_>, base: &SamplerConfig, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    ABLATION_MODES
        .iter()
        .map(|&mode| {
            let mut cfg = base.clone();
            if mode == GuidanceMode::LearnedPosterior {
                cfg = cfg.with_mode(GuidanceMode::Unconditional);
            }
            cfg.mode = mode;
            Ok(AblationRow { mode, summary: run_benchmark(ctx, &cfg, seeds)?.summary })
        })
        .collect()
}

/// Stable digest of any serializable value.
pub fn digest<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable");
    hex::encode(Sha256::digest(&bytes))
}

/// `root/<task>/<experiment>/<timestamp>/` with a `samples/` subdirectory.
pub struct ResultsDir {
    pub path: PathBuf,
}

impl ResultsDir {
    pub fn create(root: &Path, task: &str, experiment: &str, timestamp: &str) -> Result<Self> {
        let path = root.join(task).join(experiment).join(timestamp);
        fs::create_dir_all(path.join("samples"))?;
        Ok(Self { path })
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let p = self.path.join(name);
        fs::write(&p, serde_json::to_vec_pretty(value)?)?;
        Ok(p)
    }

    pub fn write_sample(&self, name: &str, result: &SampleResult, vocab: &Vocabulary) -> Result<PathBuf> {
        self.write_json(&format!("samples/{name}.json"), &result.to_json(vocab))
    }

    /// Writes rows as CSV. Each row is prefixed with digests of the config
    /// echo and the three model checksums.
    pub fn write_csv<T: Serialize>(
        &self,
        name: &str,
        rows: &[T],
        config_digest: &str,
        checksums: &ModelChecksums,
    ) -> Result<PathBuf> {
        #[derive(Serialize)]
        struct Row<'a, T> {
            #[serde(flatten)]
            row: &'a T,
            config_sha256: &'a str,
            vae_sha256: &'a str,
            flow_sha256: &'a str,
            predictor_sha256: &'a str,
        }
        let p = self.path.join(name);
        let csv_err = |e: csv::Error| Error::Csv { path: p.clone(), line: 0, message: e.to_string() };
        let mut w = csv::Writer::from_path(&p).map_err(csv_err)?;
        // Flattened structs cannot go through csv's serializer, so rows pass
        // through an ordered JSON map.
        for (i, row) in rows.iter().enumerate() {
            let value = serde_json::to_value(Row {
                row,
                config_sha256: config_digest,
                vae_sha256: &checksums.vae,
                flow_sha256: &checksums.flow,
                predictor_sha256: &checksums.predictor,
            })?;
            let serde_json::Value::Object(map) = value else {
                return Err(Error::InvalidArgument("CSV rows must serialize to maps".into()));
            };
            if i == 0 {
                w.write_record(map.keys()).map_err(csv_err)?;
            }
            w.write_record(map.values().map(|v| match v {
                serde_json::Value::Null => String::new(),
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            }))
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(p)
    }
}
