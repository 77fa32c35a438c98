use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use scaae_cli::commands::MANIFEST_FILE;
use scaae_cli::{cmd_analyze, cmd_extract, cmd_generate, cmd_train, RunConfig, SeriesInput, TemplateSource};

/// Per-time-step functional network extraction with an attention autoencoder.
#[derive(Parser)]
#[command(name = "scaae", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, written atomically
    #[arg(long)]
    out: PathBuf,
    /// Replace an existing output directory
    #[arg(long)]
    force: bool,
}

/// Either a `generate` output directory or explicit series and mask files.
#[derive(Args)]
struct DataArgs {
    /// Directory written by `generate`
    #[arg(long, conflicts_with_all = ["series", "mask"])]
    data: Option<PathBuf>,
    /// Series file (SCV1, f32)
    #[arg(long, requires = "mask")]
    series: Option<PathBuf>,
    /// Brain mask (SCV1, u8, T = 1)
    #[arg(long, requires = "series")]
    mask: Option<PathBuf>,
}

impl DataArgs {
    fn input(&self) -> Result<SeriesInput> {
        match (&self.data, &self.series, &self.mask) {
            (Some(dir), _, _) => SeriesInput::from_data_dir(dir),
            (None, Some(series), Some(mask)) => Ok(SeriesInput { series: series.clone(), mask: mask.clone() }),
            _ => bail!("pass --data DIR or both --series and --mask"),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic series with planted networks
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the autoencoder, writing a checkpoint per epoch
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides train.epochs
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Extract one functional network map per time step
    Extract {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides analysis.threshold_quantile
        #[arg(long)]
        threshold_quantile: Option<f64>,
    },
    /// Compare extracted maps with templates and build the transition graph
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Directory written by `extract`
        #[arg(long)]
        fbn: PathBuf,
        /// Directory written by `generate` (uses its manifest)
        #[arg(long, conflicts_with_all = ["manifest", "mask", "template"])]
        data: Option<PathBuf>,
        /// Ground-truth manifest written by `generate`
        #[arg(long, conflicts_with_all = ["mask", "template"])]
        manifest: Option<PathBuf>,
        /// Brain mask for explicit templates
        #[arg(long, requires = "template")]
        mask: Option<PathBuf>,
        /// Template mask file; repeat for each template
        #[arg(long, requires = "mask")]
        template: Vec<PathBuf>,
        /// Overrides analysis.filter_iou (default 0.3)
        #[arg(long)]
        filter_iou: Option<f64>,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    RunConfig::load_or_default(path)
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("SCAAE_THREADS") else {
        return Ok(());
    };
    let n: usize = value.parse().with_context(|| format!("SCAAE_THREADS={value:?} is not a thread count"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn main() -> Result<()> {
    configure_threads()?;
    match Cli::parse().command {
        Command::Generate { common, seed } => {
            let cfg = load_config(common.config.as_deref())?.with_seed(seed)?;
            let m = cmd_generate(&cfg, &common.out, common.force)?;
            println!("wrote {} steps and {} templates to {}", m.state_sequence.len(), m.template_files.len(), common.out.display());
        }
        Command::Train { common, data, seed, epochs } => {
            let mut cfg = load_config(common.config.as_deref())?.with_seed(seed)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let report = cmd_train(&cfg, &[data.input()?], &common.out, common.force, |epoch, secs| {
                eprintln!("epoch {epoch} done in {secs:.1}s");
            })?;
            println!(
                "loss {:.6} -> {:.6}; checkpoints in {}",
                report.initial_loss().unwrap_or(f64::NAN),
                report.final_loss().unwrap_or(f64::NAN),
                common.out.display()
            );
        }
        Command::Extract { common, data, checkpoint, threshold_quantile } => {
            let mut cfg = load_config(common.config.as_deref())?;
            if let Some(q) = threshold_quantile {
                cfg.analysis.threshold_quantile = q;
            }
            let maps = cmd_extract(&checkpoint, &data.input()?, &cfg, &common.out, common.force)?;
            println!("extracted {} maps to {}", maps.len(), common.out.display());
        }
        Command::Analyze { common, fbn, data, manifest, mask, template, filter_iou } => {
            let mut cfg = load_config(common.config.as_deref())?;
            if let Some(f) = filter_iou {
                cfg.analysis.filter_iou = f;
            }
            let source = match (data, manifest, mask) {
                (Some(dir), _, _) => TemplateSource::Manifest(dir.join(MANIFEST_FILE)),
                (None, Some(m), _) => TemplateSource::Manifest(m),
                (None, None, Some(mask)) => TemplateSource::Files { mask, templates: template },
                _ => bail!("pass --data DIR, --manifest FILE, or --mask with one or more --template"),
            };
            let s = cmd_analyze(&fbn, &source, &cfg, &common.out, common.force)?;
            let assigned = s.assignments.iter().filter(|a| a.is_some()).count();
            println!(
                "average consecutive IoU {:.4}; {assigned}/{} steps assigned; report in {}",
                s.average_gradualness,
                s.assignments.len(),
                common.out.display()
            );
        }
    }
    Ok(())
}
