//! `flowguide` command-line entry point.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flowguide::eval::{
    ablation, digest, extrapolation_experiment, grid_search, ode_steps_sweep, run_benchmark, EvalContext, ResultsDir,
};
use flowguide::flow::FlowModel;
use flowguide::predictor::{load_external_predictor, PredictorModel};
use flowguide::sampler::{GuidanceMode, ModelChecksums, SamplerConfig};
use flowguide::task::{train_flow_stage, train_predictor_stage, train_vae_stage, Task, TaskKind};
use flowguide::vae::VaeModel;
use flowguide::{Error, ErrorKind, Result};
use serde::Serialize;

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "flowguide",
    version,
    about = "Latent flow matching with predictor-guided sampling for sequence design"
)]
struct Cli {
    /// Overrides the training seed, and the sampling seed of `sample`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root of the results tree.
    #[arg(long, global = true, env = "FLOWGUIDE_RESULTS_DIR")]
    results_dir: Option<PathBuf>,
    /// Worker threads for independent seeds and grid cells.
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the sequence VAE.
    TrainVae(ConfigArg),
    /// Train the latent flow prior; needs the VAE checkpoint.
    TrainPrior {
        #[command(flatten)]
        config: ConfigArg,
        /// Also train the fitness-conditioned flow.
        #[arg(long)]
        conditional: bool,
    },
    /// Train the guidance predictor.
    TrainPredictor(ConfigArg),
    /// Draw one batch of designs.
    Sample(SampleArgs),
    /// Multi-seed benchmark with the configured sampler.
    Evaluate(ConfigArg),
    /// Sweep guidance strength against inner step count.
    Gridsearch(ConfigArg),
    /// Achieved fitness against the requested target.
    Extrapolate(ConfigArg),
    /// Sweep the number of ODE steps.
    OdeSweep(ConfigArg),
    /// Manifold guidance, naive guidance and the learned posterior, seed-matched.
    Ablate(ConfigArg),
}

#[derive(Args)]
struct ConfigArg {
    /// TOML run configuration.
    config: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<GuidanceMode>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    inner_steps: Option<usize>,
    #[arg(long)]
    target_y: Option<f64>,
}

fn parse_mode(s: &str) -> std::result::Result<GuidanceMode, String> {
    s.parse::<GuidanceMode>().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Validation => 1,
                ErrorKind::Divergence => 2,
                ErrorKind::Io => 3,
            })
        }
    }
}

struct Env {
    cfg: RunConfig,
    config_path: PathBuf,
    parallelism: usize,
    sample_seed: Option<u64>,
}

impl Env {
    fn new(cli: &Cli, path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::load(path)?;
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
        }
        if let Some(dir) = &cli.results_dir {
            cfg.paths.results = dir.clone();
        }
        if let Some(p) = cli.parallelism {
            cfg.parallelism = Some(p);
        }
        cfg.validate()?;
        let parallelism =
            cfg.parallelism.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        Ok(Self { cfg, config_path: path.to_path_buf(), parallelism, sample_seed: cli.seed })
    }

    fn checkpoint(&self, name: &str) -> PathBuf {
        self.cfg.paths.checkpoints.join(name)
    }

    fn require(&self, name: &str, what: &str, producer: &str) -> Result<PathBuf> {
        let p = self.checkpoint(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::Config(format!("missing {what} checkpoint at {}; run `{producer}` first", p.display())))
        }
    }

    fn vae(&self) -> Result<VaeModel> {
        VaeModel::load(&self.require("vae.json", "VAE", "train-vae")?)
    }

    fn flow(&self) -> Result<FlowModel> {
        FlowModel::load(&self.require("flow.json", "flow prior", "train-prior")?)
    }

    fn conditional_flow(&self) -> Result<Option<FlowModel>> {
        let p = self.checkpoint("flow_conditional.json");
        p.is_file().then(|| FlowModel::load(&p)).transpose()
    }

    fn predictor(&self) -> Result<PredictorModel> {
        load_external_predictor(&self.require("predictor.json", "predictor", "train-predictor")?)
    }

    fn write_checkpoint_report<T: Serialize>(&self, name: &str, report: &T) -> Result<()> {
        fs::write(self.checkpoint(name), serde_json::to_vec_pretty(report)?)?;
        Ok(())
    }
}

/// Models and data loaded once per evaluation command.
struct Loaded {
    task: Task,
    vae: VaeModel,
    flow: FlowModel,
    conditional_flow: Option<FlowModel>,
    predictor: PredictorModel,
}

impl Loaded {
    fn new(env: &Env) -> Result<Self> {
        let vae = env.vae()?;
        let flow = env.flow()?;
        let conditional_flow = env.conditional_flow()?;
        let predictor = env.predictor()?;
        let task = env.cfg.load_task()?;
        if vae.length != task.length() || predictor.length != task.length() {
            return Err(Error::LengthMismatch { expected: task.length(), got: vae.length });
        }
        Ok(Self { task, vae, flow, conditional_flow, predictor })
    }

    fn ctx(&self, parallelism: usize) -> EvalContext<'_> {
        EvalContext {
            vae: &self.vae,
            flow: &self.flow,
            conditional_flow: self.conditional_flow.as_ref(),
            predictor: &self.predictor,
            oracle: &self.task.oracle,
            train: &self.task.train,
            parallelism,
        }
    }

    fn checksums(&self) -> ModelChecksums {
        ModelChecksums { flow: self.flow.checksum(), vae: self.vae.checksum(), predictor: self.predictor.checksum() }
    }
}

#[derive(Serialize)]
struct Summary<'a, T> {
    experiment: &'a str,
    task: TaskKind,
    config: &'a RunConfig,
    checksums: &'a ModelChecksums,
    results: T,
}

/// Fresh results directory with the config copied in for provenance.
fn results_dir(env: &Env, experiment: &str) -> Result<ResultsDir> {
    let root = &env.cfg.paths.results;
    let task = env.cfg.task.as_str();
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ").to_string();
    let mut name = stamp.clone();
    let mut n = 1;
    while root.join(task).join(experiment).join(&name).exists() {
        name = format!("{stamp}-{n}");
        n += 1;
    }
    let dir = ResultsDir::create(root, task, experiment, &name)?;
    fs::copy(&env.config_path, dir.path.join("config.toml"))?;
    Ok(dir)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::TrainVae(a) => train_vae(&Env::new(&cli, &a.config)?),
        Command::TrainPrior { config, conditional } => {
            let env = Env::new(&cli, &config.config)?;
            train_prior(&env, *conditional || env.cfg.flow.conditional)
        }
        Command::TrainPredictor(a) => train_predictor(&Env::new(&cli, &a.config)?),
        Command::Sample(a) => sample(&Env::new(&cli, &a.config.config)?, a),
        Command::Evaluate(a) => evaluate(&Env::new(&cli, &a.config)?),
        Command::Gridsearch(a) => gridsearch(&Env::new(&cli, &a.config)?),
        Command::Extrapolate(a) => extrapolate(&Env::new(&cli, &a.config)?),
        Command::OdeSweep(a) => ode_sweep(&Env::new(&cli, &a.config)?),
        Command::Ablate(a) => ablate(&Env::new(&cli, &a.config)?),
    }
}

fn train_vae(env: &Env) -> Result<()> {
    let task = env.cfg.load_task()?;
    let (vae, report, holdout_accuracy) = train_vae_stage(&task.train, task.vocab.size(), &env.cfg.pipeline())?;
    fs::create_dir_all(&env.cfg.paths.checkpoints)?;
    vae.save(&env.checkpoint("vae.json"))?;
    env.write_checkpoint_report(
        "vae_report.json",
        &serde_json::json!({
            "config": env.cfg,
            "checksum": vae.checksum(),
            "holdout_accuracy": holdout_accuracy,
            "report": report,
        }),
    )?;
    println!("vae.json {} held-out accuracy {holdout_accuracy:.4}", vae.checksum());
    Ok(())
}

fn train_prior(env: &Env, conditional: bool) -> Result<()> {
    let vae = env.vae()?;
    let task = env.cfg.load_task()?;
    let pipeline = env.cfg.pipeline();
    let mut variants = vec![(false, "flow")];
    if conditional {
        variants.push((true, "flow_conditional"));
    }
    for (cond, name) in variants {
        let (flow, report) = train_flow_stage(&task.train, &vae, &pipeline, cond)?;
        flow.save(&env.checkpoint(&format!("{name}.json")))?;
        env.write_checkpoint_report(
            &format!("{name}_report.json"),
            &serde_json::json!({
                "config": env.cfg,
                "conditional": cond,
                "vae_checksum": vae.checksum(),
                "checksum": flow.checksum(),
                "report": report,
            }),
        )?;
        println!("{name}.json {}", flow.checksum());
    }
    Ok(())
}

fn train_predictor(env: &Env) -> Result<()> {
    let task = env.cfg.load_task()?;
    let (predictor, report) = train_predictor_stage(&task.train, task.vocab.size(), &env.cfg.pipeline())?;
    fs::create_dir_all(&env.cfg.paths.checkpoints)?;
    predictor.save(&env.checkpoint("predictor.json"))?;
    env.write_checkpoint_report(
        "predictor_report.json",
        &serde_json::json!({ "config": env.cfg, "checksum": predictor.checksum(), "report": report }),
    )?;
    println!("predictor.json {} final mse {:.5}", predictor.checksum(), report.final_mse);
    if env.cfg.task != TaskKind::Csv {
        task.oracle.save(&env.checkpoint("oracle.json"))?;
        println!("oracle.json {}", task.oracle.checksum());
    }
    Ok(())
}

fn sample(env: &Env, a: &SampleArgs) -> Result<()> {
    let mut cfg: SamplerConfig = env.cfg.sampler.clone();
    if let Some(seed) = env.sample_seed {
        cfg.seed = seed;
    }
    cfg.top_k = a.top_k.unwrap_or(cfg.top_k);
    cfg.batch = a.batch.unwrap_or(cfg.batch);
    cfg.alpha = a.alpha.unwrap_or(cfg.alpha);
    cfg.inner_steps = a.inner_steps.unwrap_or(cfg.inner_steps);
    cfg.target_y = a.target_y.unwrap_or(cfg.target_y);
    let mode = a.mode.unwrap_or(cfg.mode);
    cfg = cfg.with_mode(mode);
    cfg.validate()?;
    let loaded = Loaded::new(env)?;
    let ctx = loaded.ctx(env.parallelism);
    let (report, result) = ctx.run_once(&cfg)?;
    let dir = results_dir(env, "sample")?;
    let name = format!("{}-seed{}", cfg.mode, cfg.seed);
    let sample_path = dir.write_sample(&name, &result, &loaded.task.vocab)?;
    let mut echoed = env.cfg.clone();
    echoed.sampler = cfg;
    dir.write_json(
        "summary.json",
        &Summary {
            experiment: "sample",
            task: env.cfg.task,
            config: &echoed,
            checksums: &result.checksums,
            results: &report,
        },
    )?;
    println!(
        "median fitness {:.4} diversity {:.3} novelty {:.3} n {}",
        report.median_fitness, report.diversity, report.novelty, report.n_sequences
    );
    println!("{}", sample_path.display());
    println!("{}", dir.path.display());
    Ok(())
}

fn evaluate(env: &Env) -> Result<()> {
    let loaded = Loaded::new(env)?;
    let ctx = loaded.ctx(env.parallelism);
    let run = run_benchmark(&ctx, &env.cfg.sampler, &env.cfg.seeds)?;
    let dir = results_dir(env, "evaluate")?;
    for s in &run.samples {
        dir.write_sample(&format!("{}-seed{}", s.config.mode, s.config.seed), s, &loaded.task.vocab)?;
    }
    let checksums = &run.summary.checksums;
    dir.write_csv("cells.csv", &run.summary.per_seed, &digest(&env.cfg), checksums)?;
    dir.write_json(
        "summary.json",
        &Summary { experiment: "evaluate", task: env.cfg.task, config: &env.cfg, checksums, results: &run.summary },
    )?;
    println!("{}", run.summary.table_row(env.cfg.sampler.mode.as_str()));
    println!("{}", dir.path.display());
    Ok(())
}

fn gridsearch(env: &Env) -> Result<()> {
    let loaded = Loaded::new(env)?;
    let ctx = loaded.ctx(env.parallelism);
    let grid = &env.cfg.grid;
    let seeds: Vec<u64> = env.cfg.seeds.iter().copied().take(grid.seeds_per_cell).collect();
    let cells = grid_search(&ctx, &env.cfg.sampler, &grid.alphas, &grid.inner_steps, &seeds)?;
    let failed = cells.iter().filter(|c| c.error.is_some()).count();
    finish_table(env, &loaded, "gridsearch", &cells)?;
    if failed > 0 {
        eprintln!("{failed} of {} cells failed; see the error column", cells.len());
    }
    Ok(())
}

fn extrapolate(env: &Env) -> Result<()> {
    let loaded = Loaded::new(env)?;
    let ctx = loaded.ctx(env.parallelism);
    let mut modes = vec![GuidanceMode::Manifold, GuidanceMode::Naive, GuidanceMode::Unconditional];
    if loaded.conditional_flow.is_some() {
        modes.push(GuidanceMode::LearnedPosterior);
    }
    let seed = env.sample_seed.unwrap_or(env.cfg.sampler.seed);
    let rows = extrapolation_experiment(&ctx, &env.cfg.sampler, &env.cfg.extrapolation.targets, &modes, seed)?;
    finish_table(env, &loaded, "extrapolate", &rows)
}

fn ode_sweep(env: &Env) -> Result<()> {
    let loaded = Loaded::new(env)?;
    let ctx = loaded.ctx(env.parallelism);
    let rows = ode_steps_sweep(&ctx, &env.cfg.sampler, &env.cfg.ode.steps)?;
    finish_table(env, &loaded, "ode-sweep", &rows)
}

fn ablate(env: &Env) -> Result<()> {
    #[derive(Serialize)]
    struct Row<'a> {
        mode: GuidanceMode,
        median_fitness: &'a str,
        diversity: &'a str,
        novelty: &'a str,
    }
    let loaded = Loaded::new(env)?;
    let ctx = loaded.ctx(env.parallelism);
    let rows = ablation(&ctx, &env.cfg.sampler, &env.cfg.seeds)?;
    let dir = results_dir(env, "ablate")?;
    let checksums = loaded.checksums();
    let cells: Vec<[String; 3]> = rows
        .iter()
        .map(|r| [r.summary.fitness.to_string(), r.summary.diversity.to_string(), r.summary.novelty.to_string()])
        .collect();
    let table: Vec<Row<'_>> = rows
        .iter()
        .zip(&cells)
        .map(|(r, [f, d, n])| Row { mode: r.mode, median_fitness: f, diversity: d, novelty: n })
        .collect();
    dir.write_csv("cells.csv", &table, &digest(&env.cfg), &checksums)?;
    dir.write_json(
        "summary.json",
        &Summary { experiment: "ablate", task: env.cfg.task, config: &env.cfg, checksums: &checksums, results: &rows },
    )?;
    println!("{:<18} {:>16} {:>16} {:>16}", "mode", "fitness", "diversity", "novelty");
    for r in &table {
        println!("{:<18} {:>16} {:>16} {:>16}", r.mode.as_str(), r.median_fitness, r.diversity, r.novelty);
    }
    println!("{}", dir.path.display());
    Ok(())
}

fn finish_table<T: Serialize>(env: &Env, loaded: &Loaded, experiment: &str, rows: &[T]) -> Result<()> {
    let dir = results_dir(env, experiment)?;
    let checksums = loaded.checksums();
    dir.write_csv("cells.csv", rows, &digest(&env.cfg), &checksums)?;
    dir.write_json(
        "summary.json",
        &Summary { experiment, task: env.cfg.task, config: &env.cfg, checksums: &checksums, results: rows },
    )?;
    println!("{} rows", rows.len());
    println!("{}", dir.path.display());
    Ok(())
}
