use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use movnect::bench::bench;
use movnect::distill::{run_experiment, ExperimentConfig};
use movnect::network::{Network, Variant};
use movnect::pipeline::{infer_files, input_frames};
use movnect::postprocess::Skeleton;
use movnect::stream::{export, read_stream, write_stream, ExportFormat};
use movnect::Error;

#[derive(Parser)]
#[command(name = "movnect", version, about = "Lightweight monocular 3D pose estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter, MAC and latency table for the network variants.
    Bench {
        /// a, b or c; repeatable. Defaults to all three.
        #[arg(long = "variant", value_parser = parse_variant)]
        variants: Vec<Variant>,
        #[arg(long, default_value_t = 50)]
        runs: usize,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        #[arg(long, default_value_t = 256)]
        input_size: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Pose stream (JSONL) from an image or a directory of frames.
    Infer {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Focal length in frame pixels.
        #[arg(long)]
        focal: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30.0)]
        fps: f64,
    },
    /// Teacher-student experiment on the synthetic dataset.
    Distill {
        /// TOML experiment config; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a pose stream.
    Export {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        format: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse::<Variant>().map_err(|e| e.to_string())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Bench {
            variants,
            runs,
            warmup,
            input_size,
            csv,
        } => {
            let variants = if variants.is_empty() { Variant::PRESETS.to_vec() } else { variants };
            let report = bench(&variants, input_size, runs, warmup)?;
            print!("{}", report.table());
            if let Some(path) = csv {
                std::fs::write(&path, report.csv()).map_err(|e| Error::io(&path, e))?;
            }
        }
        Command::Infer {
            weights,
            input,
            focal,
            out,
            fps,
        } => {
            let net = Network::load(&weights).with_context(|| format!("loading {}", weights.display()))?;
            let frames = input_frames(&input)?;
            let (records, times) = infer_files(net, &frames, focal, fps)?;
            write_stream(&out, &records)?;
            let lost = records.iter().filter(|r| r.lost).count();
            eprintln!("{}", times.summary());
            eprintln!("wrote {} records ({lost} lost) to {}", records.len(), out.display());
        }
        Command::Distill { config, out } => {
            let cfg = match config {
                Some(p) => ExperimentConfig::load(&p)?,
                None => ExperimentConfig::default(),
            };
            let report = run_experiment(&cfg, Some(&out), |line| eprintln!("{line}"))?;
            println!("seed  alpha=1 MPJPE  alpha={} MPJPE  improvement", cfg.alpha);
            for s in &report.seeds {
                println!(
                    "{:<5} {:>13.2} {:>15.2} {:>12.2}",
                    s.seed,
                    s.gt_only_mpjpe,
                    s.distilled_mpjpe,
                    s.improvement()
                );
            }
            println!(
                "teacher {:.2} mm; distilled no worse in {}/{} seeds; mean improvement {:.2} mm",
                report.teacher_mpjpe,
                report.wins(),
                report.seeds.len(),
                report.mean_improvement()
            );
        }
        Command::Export { input, format, out } => {
            let format: ExportFormat = format.parse()?;
            let records = read_stream(&input)?;
            let text = export(&records, format, &Skeleton::standard())?;
            std::fs::write(&out, text).map_err(|e| Error::io(&out, e))?;
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::NonFiniteLoss { .. } | Error::Degenerate(_)) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
