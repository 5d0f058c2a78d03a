mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::RunConfig;
use fsdet::dataset::{AnnotationFormat, MaskingPolicy, Phase};
use fsdet::detector::DetectorSize;
use fsdet::evaluation::Method;
use fsdet::saan::Fusion;
use fsdet::Error;

#[derive(Parser, Debug)]
#[command(
    name = "fsdet",
    version,
    about = "Few-shot object detection with relation-GRU support attention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse a dataset, split it and sample the fine-tuning sets.
    Prepare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Train one phase and write a checkpoint plus a loss log.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "base")]
        phase: Phase,
        /// Training steps of the selected phase.
        #[arg(long)]
        steps: Option<usize>,
        /// Learning rate of the selected phase.
        #[arg(long)]
        lr: Option<f64>,
        /// Base checkpoint to fine-tune; defaults to the one in the output root.
        #[arg(long)]
        base_checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint, or train and evaluate a whole grid.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, conflicts_with = "grid")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        grid: Option<GridKind>,
        /// Shot values of the grid.
        #[arg(long, value_delimiter = ',')]
        shots: Vec<usize>,
        /// Methods of the grid: saan, xcorr, frcn-ft, frcn-joint.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<Method>,
        /// Write histogram and overlay figures.
        #[arg(long)]
        render: bool,
    },
    /// Generate a synthetic shapes dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 120)]
        images: usize,
        #[arg(long, default_value_t = 96)]
        image_size: usize,
        #[arg(long, default_value_t = 4)]
        max_objects: usize,
        /// Dataset directory; defaults to `synth` under the output root.
        #[arg(long)]
        dest: Option<PathBuf>,
    },
    /// Dump the support crops of a prepared fine-tuning set.
    CropSupports {
        #[command(flatten)]
        common: Common,
        /// Pool to draw from: base (phase-1 pool) or finetune.
        #[arg(long, default_value = "finetune")]
        phase: Phase,
        /// Crops per class; defaults to k.
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        side: Option<usize>,
    },
    /// Re-render figures from saved reports.
    Report {
        #[command(flatten)]
        common: Common,
        /// A `reports.json` written by `eval`.
        #[arg(long)]
        reports: PathBuf,
        /// Saved detections to draw as overlays.
        #[arg(long)]
        detections: Option<PathBuf>,
        /// Figure directory; defaults to `figures` next to the reports.
        #[arg(long)]
        figures: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GridKind {
    /// One novel class at a time, every method and shot, 1:1 proportion.
    Rsod,
    /// Proportion sweep of the GRU model for the configured novel classes.
    Proportion,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// TOML run configuration; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root (default: $FSDET_OUT, then `fsdet-out`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
struct DataArgs {
    /// Dataset root (or canonical index file).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Annotation format: voc, nwpu or canonical.
    #[arg(long)]
    format: Option<AnnotationFormat>,
    /// Novel classes by name or id.
    #[arg(long, value_delimiter = ',')]
    novel: Vec<String>,
    #[arg(long)]
    k: Option<usize>,
    /// Base annotations per novel shot: an integer or `inf`.
    #[arg(long)]
    rho: Option<String>,
    #[arg(long)]
    train_fraction: Option<f64>,
    /// Refuse images whose surplus objects would need masking.
    #[arg(long)]
    no_masking: bool,
}

#[derive(Args, Debug, Default)]
struct ModelArgs {
    #[arg(long)]
    detector: Option<DetectorSize>,
    #[arg(long)]
    fusion: Option<Fusion>,
}

impl Common {
    fn load(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.out_dir = Some(out.clone());
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

impl DataArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = &self.data {
            cfg.data.root = Some(v.clone());
        }
        if let Some(v) = self.format {
            cfg.data.format = v;
        }
        if !self.novel.is_empty() {
            cfg.data.novel = self.novel.clone();
        }
        if let Some(v) = self.k {
            cfg.budget.k = v;
        }
        if let Some(v) = &self.rho {
            cfg.budget.rho = v.clone();
        }
        if let Some(v) = self.train_fraction {
            cfg.data.train_fraction = v;
        }
        if self.no_masking {
            cfg.data.masking = MaskingPolicy::Forbid;
        }
    }
}

impl ModelArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.detector {
            cfg.model.detector = v;
        }
        if let Some(v) = self.fusion {
            cfg.model.fusion = v;
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Prepare { common, data } => {
            let mut cfg = common.load()?;
            data.apply(&mut cfg);
            cfg.validate()?;
            commands::prepare(&cfg)
        }
        Command::Train {
            common,
            model,
            phase,
            steps,
            lr,
            base_checkpoint,
        } => {
            let mut cfg = common.load()?;
            model.apply(&mut cfg);
            let section = if phase == Phase::Finetune {
                &mut cfg.finetune
            } else {
                &mut cfg.base
            };
            if steps.is_some() {
                section.steps = steps;
            }
            if lr.is_some() {
                section.lr = lr;
            }
            cfg.validate()?;
            commands::train(&cfg, phase, base_checkpoint)
        }
        Command::Eval {
            common,
            data,
            model,
            checkpoint,
            grid,
            shots,
            methods,
            render,
        } => {
            let mut cfg = common.load()?;
            data.apply(&mut cfg);
            model.apply(&mut cfg);
            cfg.validate()?;
            match grid {
                Some(kind) => commands::eval_grid(&cfg, kind, &shots, &methods, render),
                None => commands::eval_checkpoint(&cfg, checkpoint, render),
            }
        }
        Command::Synth {
            common,
            classes,
            images,
            image_size,
            max_objects,
            dest,
        } => {
            let cfg = common.load()?;
            cfg.validate()?;
            let synth = fsdet::dataset::SyntheticConfig {
                classes,
                images,
                image_size,
                max_objects,
                seed: cfg.seed,
                ..Default::default()
            };
            let dest = dest.unwrap_or_else(|| cfg.out_root().join("synth"));
            commands::synth(&synth, &dest)
        }
        Command::CropSupports {
            common,
            phase,
            per_class,
            side,
        } => {
            let cfg = common.load()?;
            cfg.validate()?;
            commands::crop_supports(&cfg, phase, per_class, side)
        }
        Command::Report {
            common,
            reports,
            detections,
            figures,
        } => {
            let cfg = common.load()?;
            commands::report(&cfg, &reports, detections.as_deref(), figures)
        }
    }
}

/// 1: usage or config, 2: data, 3: runtime.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::Split(_) => 1,
                Error::InvalidBox(_)
                | Error::WindowOutOfBounds { .. }
                | Error::Record { .. }
                | Error::NoValidRecords { .. }
                | Error::Dataset(_)
                | Error::Infeasible { .. }
                | Error::EmptySupportPool(_)
                | Error::MissingSupport(_)
                | Error::Checkpoint(_)
                | Error::Image { .. }
                | Error::Io { .. }
                | Error::Json(_) => 2,
                Error::Shape(_) | Error::NonFiniteLoss { .. } | Error::Evaluation(_) => 3,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 2;
        }
    }
    3
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.ends_with(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}
