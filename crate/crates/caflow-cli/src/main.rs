use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use caflow_cli::commands;
use caflow_cli::config::{ExitPolicyConfig, RunConfig};

/// Adaptive-depth single-step flow matching for x4 image super-resolution.
#[derive(Parser)]
#[command(name = "caflow", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a directory of HR PNGs.
    Train {
        /// Flat key=value config file.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's data_dir.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Override the config's out_dir.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Super-resolve a PNG or a directory of PNGs.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// auto | 0 | 1 | 2 | 3
        #[arg(long, default_value = "auto")]
        exit: String,
        /// Euler integration steps (1 = single-step inference).
        #[arg(long, default_value_t = 1)]
        steps: usize,
    },
    /// Evaluate a checkpoint: PSNR/SSIM per exit, routing stats, Pareto CSV.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// HR ground-truth directory.
        #[arg(long)]
        hr_dir: PathBuf,
        /// Optional paired LR directory (matched by filename); otherwise LR
        /// is generated by bicubic degradation.
        #[arg(long)]
        lr_dir: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Print the analytic per-exit FLOPs table.
    Flops {
        #[arg(long, default_value_t = 16)]
        n_blocks: usize,
        #[arg(long, default_value_t = 4)]
        scale: usize,
        /// Rearranged input side length (LR resolution).
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Optional JSON output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Route the tiles of a slide and render the exit map.
    RouteSlide {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory of r{row}_c{col}.png tiles.
        #[arg(long)]
        tiles: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Minimum dark-pixel fraction for a tile to count as tissue.
        #[arg(long, default_value_t = 0.1)]
        tissue_frac: f64,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { config, data_dir, out_dir } => {
            let mut cfg = RunConfig::from_file(&config)?;
            if let Some(d) = data_dir {
                cfg.data_dir = Some(d);
            }
            if let Some(o) = out_dir {
                cfg.out_dir = o;
            }
            let summary = commands::cmd_train(&cfg)?;
            println!("trained {} epochs; checkpoint: {}", summary.epochs, summary.checkpoint.display());
        }
        Command::Infer { ckpt, input, out_dir, exit, steps } => {
            let policy = ExitPolicyConfig::parse(&exit)?;
            let summary = commands::cmd_infer(&ckpt, &input, &out_dir, policy, steps)?;
            println!("super-resolved {} image(s) into {}", summary.images.len(), out_dir.display());
        }
        Command::Eval { ckpt, hr_dir, lr_dir, out_dir } => {
            let out = commands::cmd_eval(&ckpt, &hr_dir, lr_dir.as_deref(), &out_dir)?;
            let s = &out.summary;
            println!(
                "adaptive PSNR: {} dB | expected {:.2} GFLOPs ({:.0}% of full depth) | within-one-exit {:.1}%",
                s.mean_psnr_adaptive.map_or("inf".into(), |v| format!("{v:.2}")),
                s.expected_flops / 1e9,
                100.0 * s.expected_flops / s.full_depth_flops,
                100.0 * s.within_one_exit_rate,
            );
        }
        Command::Flops { n_blocks, scale, size, out } => {
            commands::cmd_flops(n_blocks, scale, size, out.as_deref())?;
        }
        Command::RouteSlide { ckpt, tiles, out_dir, tissue_frac } => {
            let map = commands::cmd_route_slide(&ckpt, &tiles, tissue_frac, &out_dir)?;
            match map.mean_flops {
                Some(mean) => println!(
                    "{} tissue tiles of {}; mean {:.2} GFLOPs ({:.0}% savings)",
                    map.tissue_tiles,
                    map.tile_count,
                    mean / 1e9,
                    100.0 * map.savings_vs_full_depth.unwrap_or(0.0),
                ),
                None => println!("no tissue tiles found among {}", map.tile_count),
            }
        }
    }
    Ok(())
}
