use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use tubemil::cues::{CueId, DEFAULT_OBJECT_TOP_K};
use tubemil::datagen::{self, ScenarioConfig};
use tubemil::eval::{Interpolation, DEFAULT_THRESHOLDS};
use tubemil::fusion::ThresholdRule;
use tubemil::io;
use tubemil::mil::{NegativeMode, SolverConfig, TrainConfig};
use tubemil::pipeline::{self, EvalPaths};

#[derive(Parser)]
#[command(
    name = "tubemil",
    version,
    about = "Action localization from pseudo-annotated proposals"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark from a TOML scenario.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate an external dataset and rewrite it in the internal layout.
    Ingest {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute pseudo-annotations for video directories.
    Cues(CuesArgs),
    /// Score each cue by its agreement with the person cue.
    Correlate(CorrelateArgs),
    /// Write the fused overlap vector of every video.
    Fuse {
        #[arg(long)]
        cues: PathBuf,
        #[arg(long)]
        proposals: PathBuf,
        #[arg(long)]
        correlations: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one multiple-instance classifier per class.
    Train(TrainArgs),
    /// Evaluate trained models over a range of overlap thresholds.
    Eval(EvalArgs),
}

#[derive(Args)]
struct CuesArgs {
    /// A video directory; repeat for several.
    #[arg(long, required_unless_present = "data")]
    video: Vec<PathBuf>,
    /// A dataset directory; every video in its videos.jsonl is processed.
    #[arg(long, conflicts_with = "video")]
    data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "person,im,ap,fc,oa")]
    cues: Vec<CueId>,
    /// Object boxes kept per frame by the object-count cue.
    #[arg(long, default_value_t = DEFAULT_OBJECT_TOP_K)]
    object_top_k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CorrelateArgs {
    #[arg(long)]
    cues: PathBuf,
    #[arg(long)]
    proposals: PathBuf,
    /// Restrict to the videos listed in this file (normally train.jsonl).
    #[arg(long)]
    videos: Option<PathBuf>,
    /// Keep the k best-correlated cues.
    #[arg(long, conflicts_with = "threshold")]
    top_k: Option<usize>,
    /// Keep every cue whose score reaches this value.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Negatives {
    All,
    Max,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Fused overlaps; without them training uses the video labels only.
    #[arg(long)]
    fused: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    iterations: usize,
    #[arg(long, default_value_t = 3)]
    folds: usize,
    #[arg(long, default_value_t = 10.0)]
    lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 17)]
    seed: u64,
    #[arg(long, default_value_t = SolverConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = SolverConfig::default().step_scale)]
    step_scale: f64,
    #[arg(long, value_enum, default_value = "all")]
    negatives: Negatives,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    models: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    proposals: PathBuf,
    #[arg(long)]
    fused: Option<PathBuf>,
    /// Combine classifier score and fused overlap when picking the test tube.
    #[arg(long)]
    pp: bool,
    /// Defaults to the training alpha recorded in the model directory.
    #[arg(long)]
    alpha_test: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    /// 11-point interpolated AP instead of the all-point area.
    #[arg(long)]
    eleven_point: bool,
    #[arg(long)]
    out: PathBuf,
    /// Also write a flat CSV table here.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Also write an SVG plot of mAP against the threshold here.
    #[arg(long)]
    plot: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, out } => {
            let text = fs::read_to_string(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            let scenario = ScenarioConfig::from_toml(&text)
                .with_context(|| format!("in {}", config.display()))?;
            let dataset = datagen::generate_to_dir(&scenario, &out)?;
            eprintln!(
                "generated {} videos into {}",
                dataset.videos.len(),
                out.display()
            );
        }
        Command::Ingest { input, out } => {
            let dataset = datagen::ingest(&input, &out)?;
            eprintln!(
                "ingested {} videos into {}",
                dataset.videos.len(),
                out.display()
            );
        }
        Command::Cues(a) => {
            let dirs = match &a.data {
                Some(data) => pipeline::dataset_video_dirs(data)?,
                None => a.video.clone(),
            };
            let n = pipeline::cues_stage(&dirs, &a.cues, a.object_top_k, &a.out)?;
            eprintln!("wrote {n} cue tracks for {} videos", dirs.len());
        }
        Command::Correlate(a) => {
            let rule = match (a.top_k, a.threshold) {
                (_, Some(t)) => ThresholdRule::Absolute(t),
                (Some(k), None) => ThresholdRule::TopK(k),
                (None, None) => ThresholdRule::default(),
            };
            let report = pipeline::correlate_stage(
                &a.cues,
                &a.proposals,
                a.videos.as_deref(),
                rule,
                &a.out,
            )?;
            for c in &report.correlations {
                eprintln!(
                    "{:<6} eta {:.4}  used {}  skipped {}",
                    c.cue.short_name(),
                    c.eta,
                    c.videos_used,
                    c.videos_skipped
                );
            }
        }
        Command::Fuse {
            cues,
            proposals,
            correlations,
            out,
        } => {
            let n = pipeline::fuse_stage(&cues, &proposals, &correlations, &out)?;
            eprintln!("fused overlaps for {n} videos");
        }
        Command::Train(a) => {
            let config = TrainConfig {
                mil_iterations: a.iterations,
                num_folds: a.folds,
                lambda: a.lambda,
                alpha: a.alpha,
                negatives: match a.negatives {
                    Negatives::All => NegativeMode::AllInstances,
                    Negatives::Max => NegativeMode::MaxInstance,
                },
                solver: SolverConfig {
                    epochs: a.epochs,
                    step_scale: a.step_scale,
                    seed: a.seed,
                },
            };
            let summary =
                pipeline::train_stage(&a.features, &a.labels, a.fused.as_deref(), &config, &a.out)?;
            eprintln!(
                "trained {} class models into {}",
                summary.classes.len(),
                a.out.display()
            );
        }
        Command::Eval(a) => {
            let alpha_test = match a.alpha_test {
                Some(v) => v,
                None => pipeline::training_alpha(&a.models)?,
            };
            if alpha_test.is_nan() || alpha_test < 0.0 {
                bail!("--alpha-test must be >= 0");
            }
            let thresholds = a.thresholds.unwrap_or_else(|| DEFAULT_THRESHOLDS.to_vec());
            let interpolation = if a.eleven_point {
                Interpolation::ElevenPoint
            } else {
                Interpolation::AllPoint
            };
            let paths = EvalPaths {
                models: &a.models,
                test: &a.test,
                gt: &a.gt,
                features: &a.features,
                proposals: &a.proposals,
                fused: a.fused.as_deref(),
            };
            let report =
                pipeline::eval_stage(&paths, a.pp, alpha_test, &thresholds, interpolation)?;
            io::write_json(&a.out, &report)?;
            if let Some(path) = &a.csv {
                io::write_text(path, &report.to_csv())?;
            }
            if let Some(path) = &a.plot {
                io::write_text(path, &report.to_svg())?;
            }
            for (t, m) in report.thresholds.iter().zip(&report.map) {
                eprintln!("mAP@{t}: {m:.4}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
