mod common;

use common::{chain_models, ChainModels};
use flowguide::eval::{
    ablation, digest, extrapolation_experiment, grid_search, ode_steps_sweep, run_benchmark, run_jobs, EvalContext,
    ResultsDir,
};
use flowguide::flow::{FlowArch, FlowModel};
use flowguide::landscape::{LandscapeConfig, SyntheticLandscape};
use flowguide::predictor::PredictorModel;
use flowguide::sampler::{GuidanceMode, SamplerConfig};
use flowguide::seq::Dataset;

struct Fixture {
    models: ChainModels,
    cond: FlowModel,
    oracle: PredictorModel,
    train: Dataset,
}

fn fixture() -> Fixture {
    let land = SyntheticLandscape::generate(&LandscapeConfig::new(6, 5, 2)).unwrap();
    let train = land.sample_full_set(60, 4, 3).unwrap();
    Fixture {
        models: chain_models(11),
        cond: FlowModel::new(FlowArch { hidden: 10, depth: 2, embedding_dim: 4, ..FlowArch::new(4, true) }, 5).unwrap(),
        oracle: PredictorModel::from_landscape(land),
        train,
    }
}

fn ctx(f: &Fixture, parallelism: usize) -> EvalContext<'_> {
    EvalContext {
        vae: &f.models.vae,
        flow: &f.models.flow,
        conditional_flow: Some(&f.cond),
        predictor: &f.models.predictor,
        oracle: &f.oracle,
        train: &f.train,
        parallelism,
    }
}

fn base() -> SamplerConfig {
    SamplerConfig { steps: 6, inner_steps: 2, alpha: 0.3, batch: 24, top_k: 8, ..SamplerConfig::default() }
}

#[test]
fn work_queue_preserves_job_order() {
    let jobs: Vec<u64> = (0..37).collect();
    let serial = run_jobs(&jobs, 1, |&j| j * j);
    let parallel = run_jobs(&jobs, 4, |&j| j * j);
    assert_eq!(serial, parallel);
    assert!(run_jobs::<u64, u64, _>(&[], 3, |&j| j).is_empty());
}

#[test]
fn benchmark_is_deterministic_and_aggregates_exactly() {
    let f = fixture();
    let seeds = [1, 2, 3, 4, 5];
    let a = run_benchmark(&ctx(&f, 1), &base(), &seeds).unwrap().summary;
    let b = run_benchmark(&ctx(&f, 3), &base(), &seeds).unwrap().summary;
    assert_eq!(a, b);
    assert_eq!(a.per_seed.len(), 5);
    let mean = a.per_seed.iter().map(|r| r.median_fitness).sum::<f64>() / 5.0;
    assert!((a.fitness.mean - mean).abs() <= 1e-12);
    assert!(a.per_seed.iter().all(|r| r.diversity >= 0.0 && r.novelty >= 0.0));
    assert!(a.table_row("manifold").contains('±'));
}

#[test]
fn grid_origin_matches_unconditional_run() {
    let f = fixture();
    let c = ctx(&f, 2);
    let cells = grid_search(&c, &base(), &[0.0, 0.5], &[0, 1, 2], &[7]).unwrap();
    assert_eq!(cells.len(), 6);
    let origin = &cells[0];
    assert_eq!((origin.alpha, origin.inner_steps), (0.0, 0));
    let plain = c.run_once(&SamplerConfig { seed: 7, ..base() }.with_mode(GuidanceMode::Unconditional)).unwrap().0;
    assert_eq!(origin.median_fitness, Some(plain.median_fitness));
    assert_eq!(origin.diversity, Some(plain.diversity));
    assert!(cells.iter().all(|c| c.error.is_none()));
}

#[test]
fn grid_records_failed_cells_and_continues() {
    let f = fixture();
    let cells = grid_search(&ctx(&f, 1), &base(), &[f64::NAN, 0.1], &[1], &[1]).unwrap();
    assert!(cells[0].error.is_some());
    assert!(cells[1].median_fitness.is_some());
}

#[test]
fn extrapolation_table_has_one_row_per_target_and_mode() {
    let f = fixture();
    let modes = [GuidanceMode::Manifold, GuidanceMode::LearnedPosterior];
    let rows = extrapolation_experiment(&ctx(&f, 1), &base(), &[0.0, 0.5, 1.0], &modes, 1).unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[1].mode, GuidanceMode::LearnedPosterior);
    assert_eq!(rows[4].target_y, 1.0);

    let no_cond = EvalContext { conditional_flow: None, ..ctx(&f, 1) };
    assert!(extrapolation_experiment(&no_cond, &base(), &[1.0], &modes, 1).is_err());
}

#[test]
fn ode_sweep_and_ablation_shapes() {
    let f = fixture();
    let c = ctx(&f, 1);
    let rows = ode_steps_sweep(&c, &base(), &[2, 6]).unwrap();
    assert_eq!(rows.len(), 2);
    let direct = c.run_once(&base()).unwrap().0;
    assert_eq!(rows[1].median_fitness, direct.median_fitness);
    assert!(ode_steps_sweep(&c, &base(), &[0]).is_err());

    let table = ablation(&c, &base(), &[1, 2]).unwrap();
    let modes: Vec<_> = table.iter().map(|r| r.mode).collect();
    assert_eq!(modes, [GuidanceMode::Manifold, GuidanceMode::Naive, GuidanceMode::LearnedPosterior]);
}

#[test]
fn results_directory_layout() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = ResultsDir::create(dir.path(), "synthetic-hard", "gridsearch", "20260101T000000").unwrap();
    assert!(out.path.ends_with("synthetic-hard/gridsearch/20260101T000000"));
    let c = ctx(&f, 1);
    let cells = grid_search(&c, &base(), &[0.1, 0.2], &[1, 2], &[1]).unwrap();
    let run = run_benchmark(&c, &base(), &[1]).unwrap();
    let checksums = &run.summary.checksums;
    let csv = out.write_csv("cells.csv", &cells, &digest(&base()), checksums).unwrap();
    let text = std::fs::read_to_string(csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("alpha,inner_steps,seed,median_fitness"));
    assert!(lines[0].ends_with("predictor_sha256"));
    assert!(lines[1].contains(&checksums.vae));
    let vocab = flowguide::seq::Vocabulary::new("ACDEF").unwrap();
    let sample = out.write_sample("seed_1", &run.samples[0], &vocab).unwrap();
    assert!(sample.ends_with("samples/seed_1.json"));
    out.write_json("summary.json", &run.summary).unwrap();
    let back: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.path.join("summary.json")).unwrap()).unwrap();
    assert_eq!(back["config"]["top_k"], 8);
}
