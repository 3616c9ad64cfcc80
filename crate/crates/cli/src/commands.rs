//! Subcommand definitions and their implementations.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use mbct_core::controlnet::{load_checkpoint, write_atomic, ControlMode};
use mbct_core::synthdata::{build_dataset, read_dataset, write_dataset, write_image, Dataset};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::eval::{
    eigenvalue_csv, evaluate, graph_csv, inspect_graphs, mean_image, preview_pgm, residual, Predictor,
};
use crate::train::{split_examples, train};

#[derive(Debug, Parser)]
#[command(name = "mbct", version, about = "Graph-controlled Mamba diffusion for longitudinal image prediction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic longitudinal cohort with train/val/test splits.
    GenData(GenDataArgs),
    /// Train the denoiser on consecutive-visit pairs of the train split.
    Train(TrainArgs),
    /// Sample the next visit of one subject.
    Predict(PredictArgs),
    /// Predict and score every consecutive-visit pair of a split.
    Evaluate(EvaluateArgs),
    /// Dump the control-pathway graphs built for one denoiser call.
    InspectGraph(InspectArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Number of subjects.
    #[arg(long)]
    pub subjects: Option<usize>,
    /// Visits per subject.
    #[arg(long)]
    pub visits: Option<usize>,
    /// Image height and width in pixels.
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Generator and split seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (must not exist; its parent must).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for checkpoints, loss.csv and config.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Optimizer steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Examples per step.
    #[arg(long)]
    pub batch: Option<usize>,
    /// AdamW learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// AdamW decoupled weight decay.
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Global gradient-norm clip.
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Initialization and batch-sampling seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint every N steps (0 = final only).
    #[arg(long)]
    pub checkpoint_interval: Option<usize>,
    /// Control pathway: none, spatial or fourier.
    #[arg(long)]
    pub control: Option<ControlMode>,
    /// Token width at full resolution.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Print the loss every N steps (0 = silent).
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Trained checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Subject id, e.g. sub-0003.
    #[arg(long)]
    pub subject: String,
    /// Visit to predict (>= 1; the previous visit is the prior).
    #[arg(long)]
    pub visit: usize,
    /// Sampling seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output image (MBIM format).
    #[arg(long)]
    pub out: PathBuf,
    /// Optional PGM preview: prior | predicted | truth | residual.
    #[arg(long)]
    pub preview: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    /// Pixel-wise mean of all training-split images.
    Mean,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Trained checkpoint (not needed with --oracle or --baseline).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Split to score: train, val or test.
    #[arg(long)]
    pub split: Option<String>,
    /// Base sampling seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Metrics CSV path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Score the ground truth against itself.
    #[arg(long, conflicts_with = "baseline")]
    pub oracle: bool,
    /// Score a non-learned baseline instead of a checkpoint.
    #[arg(long)]
    pub baseline: Option<Baseline>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Trained checkpoint with a control pathway.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Subject id.
    #[arg(long)]
    pub subject: String,
    /// Target visit (>= 1).
    #[arg(long, default_value_t = 1)]
    pub visit: usize,
    /// Diffusion step at which the target is noised [default: half the schedule].
    #[arg(long)]
    pub t: Option<usize>,
    /// Noise seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for the CSV files.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Predict(a) => predict(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::InspectGraph(a) => inspect_graph(&a),
    }
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    let d = &mut cfg.data;
    if let Some(v) = a.subjects {
        d.subjects = v;
    }
    if let Some(v) = a.visits {
        d.visits = v;
    }
    if let Some(v) = a.image_size {
        d.image_size = v;
    }
    if let Some(v) = a.seed {
        d.seed = v;
    }
    if let Some(v) = &a.out {
        d.path = v.clone();
    }
    let ds = build_dataset(cfg.data.seed, cfg.data.subjects, &cfg.cohort())?;
    write_dataset(&ds, &cfg.data.path)?;
    let s = &ds.manifest.splits;
    println!(
        "wrote {} subjects x {} visits ({}x{}) to {}; splits train {} / val {} / test {}",
        cfg.data.subjects,
        cfg.data.visits,
        cfg.data.image_size,
        cfg.data.image_size,
        cfg.data.path.display(),
        s.train.len(),
        s.val.len(),
        s.test.len()
    );
    Ok(())
}

fn load_data(path: &Path) -> Result<Dataset> {
    Ok(read_dataset(path)?)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(v) = &a.data {
        cfg.data.path = v.clone();
    }
    if let Some(v) = &a.out {
        cfg.train.out_dir = v.clone();
    }
    let t = &mut cfg.train;
    if let Some(v) = a.steps {
        t.steps = v;
    }
    if let Some(v) = a.batch {
        t.batch = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.weight_decay {
        t.weight_decay = v;
    }
    if let Some(v) = a.clip_norm {
        t.clip_norm = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.checkpoint_interval {
        t.checkpoint_interval = v;
    }
    if let Some(v) = a.control {
        cfg.control.mode = v;
    }
    if let Some(v) = a.dim {
        cfg.model.dim = v;
    }
    let ds = load_data(&cfg.data.path)?;
    cfg.data.image_size = ds.manifest.params.image_size;
    cfg.validate()?;
    let examples = split_examples(&ds, "train")?;
    let out = cfg.train.out_dir.clone();
    let every = a.log_every;
    let outcome = train(&cfg, &examples, Some(&out), |step, loss| {
        if every > 0 && step % every == 0 {
            eprintln!("step {step} loss {loss:.5}");
        }
    })?;
    println!(
        "trained {} steps ({} arm), final loss {:.5}; wrote {}",
        cfg.train.steps,
        cfg.control.mode,
        outcome.losses.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn predict(a: &PredictArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let ds = load_data(&a.data)?;
    let subject = ds
        .subject(&a.subject)
        .ok_or_else(|| CliError::invalid(format!("no subject {} in {}", a.subject, a.data.display())))?;
    let pred = Predictor::Model(&model).predict(subject, a.visit, a.seed)?;
    write_image(&a.out, &pred)?;
    if let Some(p) = &a.preview {
        let gt = &subject.visits[a.visit].image;
        let res = residual(&pred, gt)?;
        let pgm = preview_pgm(&[&subject.visits[a.visit - 1].image, &pred, gt, &res])?;
        write_atomic(p, &pgm)?;
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(v) = &a.data {
        cfg.data.path = v.clone();
    }
    if let Some(v) = &a.split {
        cfg.eval.split = v.clone();
    }
    if let Some(v) = a.seed {
        cfg.eval.seed = v;
    }
    if let Some(v) = &a.out {
        cfg.eval.output_csv = v.clone();
    }
    let ds = load_data(&cfg.data.path)?;
    let model;
    let predictor = if a.oracle {
        Predictor::Oracle
    } else if let Some(Baseline::Mean) = a.baseline {
        Predictor::Constant(mean_image(&ds, "train")?)
    } else {
        let path = a
            .checkpoint
            .as_ref()
            .ok_or_else(|| CliError::invalid("--checkpoint is required unless --oracle or --baseline is given"))?;
        model = load_checkpoint(path)?;
        Predictor::Model(&model)
    };
    let report = evaluate(&ds, &cfg.eval.split, &predictor, cfg.eval.seed)?;
    write_atomic(&cfg.eval.output_csv, report.to_csv()?.as_bytes())?;
    print!("{}", report.summary_text()?);
    println!("wrote {}", cfg.eval.output_csv.display());
    Ok(())
}

fn inspect_graph(a: &InspectArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let ds = load_data(&a.data)?;
    let subject = ds
        .subject(&a.subject)
        .ok_or_else(|| CliError::invalid(format!("no subject {} in {}", a.subject, a.data.display())))?;
    let t = a.t.unwrap_or(model.config().steps.div_ceil(2));
    let graphs = inspect_graphs(&model, subject, a.visit, t, a.seed)?;
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    for (l, g) in graphs.iter().enumerate() {
        write_atomic(&a.out.join(format!("graph_level{l}.csv")), graph_csv(g).as_bytes())?;
    }
    write_atomic(&a.out.join("eigenvalues.csv"), eigenvalue_csv(&graphs)?.as_bytes())?;
    for (l, g) in graphs.iter().enumerate() {
        println!("level {l}: {} nodes, lambda_max {:.6}", g.nodes(), g.lambda_max);
    }
    Ok(())
}
