use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pillardet::fixtures::synth_frame;
use pillardet::kitti::KittiLayout;
use pillardet::rng::Rng;
use pillardet_cli::commands::{self, load_frame};
use pillardet_cli::{bench, selfcheck, CliError, ClassSet, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "pillardet", version, about = "Pillar-based lidar 3D object detection")]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Frames processed in parallel.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// KITTI-style root holding velodyne/, label_2/ and calib/.
    #[arg(long, global = true)]
    data_root: Option<PathBuf>,
    #[arg(long, global = true)]
    weights: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Pillar edge length in meters.
    #[arg(long, global = true)]
    resolution: Option<f64>,
    #[arg(long, global = true, value_enum)]
    class: Option<ClassSet>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic lidar frames with labels and calibration.
    Synth {
        #[arg(long, default_value_t = 4)]
        frames: usize,
    },
    /// Write freshly initialized network weights.
    InitWeights {
        /// Zero every weight, leaving biases and normalization statistics.
        #[arg(long)]
        zero: bool,
    },
    /// Pillarize one frame, print pillar statistics and dump the tensors.
    Pillarize {
        #[arg(long)]
        frame: Option<String>,
        /// A scan file to use instead of a frame under the data root.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Detect objects and write one result file per frame.
    Infer {
        #[arg(long)]
        frame: Option<String>,
    },
    /// Loss and gradient check on one labeled frame.
    Loss {
        #[arg(long)]
        frame: Option<String>,
        /// Use predictions equal to the encoded targets.
        #[arg(long)]
        perfect: bool,
        #[arg(long, default_value_t = 1000)]
        coords: usize,
    },
    /// Average precision of result files against the labels.
    Eval {
        #[arg(long)]
        results: PathBuf,
    },
    /// Augment one frame and dump the result.
    Augment {
        #[arg(long)]
        frame: Option<String>,
        /// Ground-truth database file; built from the data root if missing.
        #[arg(long)]
        db: Option<PathBuf>,
    },
    /// Time the encoder across grid resolutions.
    Bench {
        #[arg(long)]
        frame: Option<String>,
        /// Also time the backbone, heads and suppression.
        #[arg(long)]
        full: bool,
    },
    /// Run the invariant suite on synthetic fixtures.
    Selfcheck,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: cli.seed,
        jobs: cli.jobs,
        data_root: cli.data_root,
        weights: cli.weights,
        out: cli.out,
        resolution: cli.resolution,
        class: cli.class,
    });
    cfg.validate()?;
    match cli.command {
        Command::Synth { frames } => commands::cmd_synth(&cfg, frames).map(drop),
        Command::InitWeights { zero } => commands::cmd_init_weights(&cfg, zero).map(drop),
        Command::Pillarize { frame, input } => commands::cmd_pillarize(&cfg, frame.as_deref(), input.as_deref()).map(drop),
        Command::Infer { frame } => commands::cmd_infer(&cfg, frame.as_deref()).map(drop),
        Command::Loss { frame, perfect, coords } => commands::cmd_loss(&cfg, frame.as_deref(), perfect, coords).map(drop),
        Command::Eval { results } => commands::cmd_eval(&cfg, &results).map(drop),
        Command::Augment { frame, db } => commands::cmd_augment(&cfg, frame.as_deref(), db.as_deref()).map(drop),
        Command::Bench { frame, full } => {
            let points = match (&cfg.paths.data_root, frame) {
                (Some(root), frame) => {
                    let layout = KittiLayout::new(root);
                    let id = match frame {
                        Some(id) => id,
                        None => layout.frame_ids()?.into_iter().next().ok_or_else(|| CliError::Data("no scans under the data root".into()))?,
                    };
                    load_frame(&cfg, &layout, &id, false)?.points
                }
                (None, _) => synth_frame(&cfg.synth, &mut Rng::new(cfg.seed)).points,
            };
            let report = bench::run(&cfg, &points, full)?;
            bench::print(&report);
            Ok(())
        }
        Command::Selfcheck => selfcheck::run(cfg.seed).map(drop),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
