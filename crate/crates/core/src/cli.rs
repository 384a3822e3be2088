//! Command-line entry points.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::ablation::{self, Axis};
use crate::checkpoint;
use crate::config::ModelConfig;
use crate::data::{self, SyntheticSpec};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::model::{BatchObjective, Model};
use crate::parallel::Execution;
use crate::params::ParamId;
use crate::train::train;

#[derive(Debug, Parser)]
#[command(name = "latent-vqa", version, about = "Latent-prompt medical VQA on synthetic data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset, vocabulary and knowledge graph.
    GenData(GenDataArgs),
    /// Train a model and write `checkpoint.json` and `report.json`.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Finite-difference check of the full loss on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Run ablation grids, one CSV per axis.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub organs: usize,
    #[arg(long, default_value_t = 8)]
    pub diseases: usize,
    #[arg(long, default_value_t = 512)]
    pub train: usize,
    #[arg(long, default_value_t = 128)]
    pub val: usize,
    #[arg(long, default_value_t = 128)]
    pub test: usize,
    #[arg(long, default_value_t = 32)]
    pub image_size: usize,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML config; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Disable data-parallel execution.
    #[arg(long)]
    pub sequential: bool,
}

impl RunArgs {
    fn config(&self) -> Result<ModelConfig> {
        let mut cfg = match &self.config {
            Some(p) => ModelConfig::load(p)?,
            None => ModelConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn exec(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint file, or a directory containing `checkpoint.json`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "val")]
    pub split: String,
    /// When given, its hash must match the checkpoint's.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Axis to sweep (repeatable); `all` runs every axis.
    #[arg(long, required = true)]
    pub axis: Vec<String>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// 1 for invalid input, 2 for a failed numeric check.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite(_) | Error::NonDeterministic(_) => 2,
        _ => 1,
    }
}

pub fn main_with(cli: Cli) -> ExitCode {
    let r = match cli.command {
        Command::GenData(a) => gen_data(&a).map(|_| 0),
        Command::Train(a) => cmd_train(&a).map(|_| 0),
        Command::Eval(a) => cmd_eval(&a).map(|_| 0),
        Command::Gradcheck(a) => cmd_gradcheck(&a).map(|r| if r.passed { 0 } else { 2 }),
        Command::Ablate(a) => cmd_ablate(&a).map(|_| 0),
    };
    match r {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let spec = SyntheticSpec {
        n_train: a.train,
        n_val: a.val,
        n_test: a.test,
        organs: a.organs,
        diseases: a.diseases,
        seed: a.seed,
        image_size: a.image_size,
        noise: a.noise,
    };
    let g = data::generate(&spec)?;
    data::write(&a.out, &g.dataset)?;
    println!(
        "wrote {} / {} / {} samples, {} answers, {} graph nodes to {}",
        g.dataset.train.len(),
        g.dataset.val.len(),
        g.dataset.test.len(),
        g.dataset.vocab.len(),
        g.dataset.graph.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = a.run.config()?;
    let ds = data::load_dir(&a.data)?;
    let mut model = Model::for_dataset(cfg, &ds)?;
    println!("parameters: {}", model.param_count());
    let report = train(&mut model, &ds, a.run.exec(), |e| {
        println!(
            "epoch {:4}  loss {:.6}  bce {:.6}  cs {:.6}  val {:.2}%",
            e.epoch, e.loss, e.bce, e.cs, e.val.overall_acc
        );
    })?;
    std::fs::create_dir_all(&a.out)?;
    checkpoint::save(&model, &a.out.join("checkpoint.json"))?;
    data::write_json(&a.out.join("report.json"), &report)?;
    println!(
        "train {:.2}%  val {:.2}%  test {:.2}%  in {:.1}s",
        report.train.overall_acc, report.val.overall_acc, report.test.overall_acc, report.wall_time_s
    );
    Ok(())
}

fn checkpoint_file(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("checkpoint.json")
    } else {
        p.to_path_buf()
    }
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let model = checkpoint::load(&checkpoint_file(&a.checkpoint))?;
    if let Some(p) = &a.config {
        let cfg = ModelConfig::load(p)?;
        if cfg.hash() != model.config.hash() {
            return Err(Error::Checkpoint(format!(
                "config {} does not match the checkpoint's configuration",
                p.display()
            )));
        }
    }
    let ds = data::load_dir(&a.data)?;
    let samples = model.prepare(ds.split(&a.split)?)?;
    let exec = if a.sequential { Execution::Sequential } else { Execution::Parallel };
    let report = model.evaluate(&samples, exec)?;
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(out) = &a.out {
        data::write_json(out, &report)?;
    }
    Ok(())
}

/// Dataset sized for finite-difference checks: 2 organs, 2 diseases.
pub fn gradcheck_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n_train: 4,
        n_val: 2,
        n_test: 2,
        organs: 2,
        diseases: 2,
        seed,
        image_size: 8,
        noise: 0.0,
    }
}

/// Rejects configs too large for an exhaustive finite-difference pass.
pub fn check_tiny(cfg: &ModelConfig) -> Result<()> {
    if cfg.d > 16 || cfg.prompt_size > 4 || cfg.n_blocks != 1 || cfg.batch_size > 2 {
        return Err(Error::config(format!(
            "gradcheck needs d <= 16, prompt_size <= 4, n_blocks = 1, batch_size <= 2 (got {}, {}, {}, {})",
            cfg.d, cfg.prompt_size, cfg.n_blocks, cfg.batch_size
        )));
    }
    Ok(())
}

/// Builds the tiny model and its batch for a gradient check.
pub fn gradcheck_setup(cfg: &ModelConfig) -> Result<(Model, Vec<crate::model::Prepared>)> {
    check_tiny(cfg)?;
    let ds = data::generate(&gradcheck_spec(cfg.seed))?.dataset;
    let model = Model::for_dataset(cfg.clone(), &ds)?;
    let batch = model.prepare(&ds.train[..cfg.batch_size])?;
    Ok((model, batch))
}

pub fn run_gradcheck(cfg: &ModelConfig, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let (model, batch) = gradcheck_setup(cfg)?;
    let obj = BatchObjective {
        model: &model,
        batch: batch.iter().collect(),
        exec: opts.exec,
    };
    let ids: Vec<ParamId> = model.store.ids().collect();
    grad_check(&obj, &model.store, &ids, opts)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<GradCheckReport> {
    let cfg = match &a.run.config {
        Some(_) => a.run.config()?,
        None => {
            let mut c = ModelConfig::tiny();
            if let Some(s) = a.run.seed {
                c.seed = s;
            }
            c
        }
    };
    if !a.tol.is_finite() || a.tol < 0.0 || !(a.step > 0.0) {
        return Err(Error::config(format!("invalid tolerance {} or step {}", a.tol, a.step)));
    }
    let opts = GradCheckOptions {
        step: a.step,
        tol: a.tol,
        exec: a.run.exec(),
        ..Default::default()
    };
    let report = run_gradcheck(&cfg, opts)?;
    println!("{:<18} {:>12}  status", "group", "max_rel_err");
    for (group, err, ok) in report.grouped(Model::group_of) {
        println!("{group:<18} {err:>12.3e}  {}", if ok { "PASS" } else { "FAIL" });
    }
    println!("overall max relative error {:.3e} (tol {:e})", report.max_rel_err, report.tol);
    if let Some(out) = &a.out {
        data::write_json(out, &report)?;
    }
    Ok(report)
}

pub fn parse_axes(names: &[String]) -> Result<Vec<Axis>> {
    let mut out = Vec::new();
    for n in names {
        if n == "all" {
            out.extend(Axis::ALL);
        } else {
            out.push(n.parse()?);
        }
    }
    out.dedup();
    Ok(out)
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let axes = parse_axes(&a.axis)?;
    let cfg = a.run.config()?;
    let ds = data::load_dir(&a.data)?;
    std::fs::create_dir_all(&a.out)?;
    for axis in axes {
        let rows = ablation::run_axis(axis, &cfg, &ds, a.run.exec())?;
        let path = ablation::csv_path(&a.out, axis);
        ablation::write_csv(&path, axis, &rows)?;
        println!("{axis}: {} cells -> {}", rows.len(), path.display());
    }
    Ok(())
}
