use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use macmd_core::model::{profile, MacmdConfig};
use macmd_core::objective::LossWeights;
use macmd_pipeline::dataset::{generate, Dataset, SyntheticSpec};
use macmd_pipeline::eval::{evaluate, predict};
use macmd_pipeline::gradsuite::{run_case, CASES};
use macmd_pipeline::train::{train, TrainConfig};
use macmd_pipeline::{PipelineError, Result};

#[derive(Parser)]
#[command(name = "macmd", version, about = "MACMD segmentation decoder toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic shape dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Pixel noise standard deviation in grey levels.
        #[arg(long, default_value_t = 8.0)]
        noise: f64,
    },
    /// Train a model and save the best checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, requires = "beta")]
        alpha: Option<f64>,
        #[arg(long, requires = "alpha")]
        beta: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        size: Option<usize>,
        /// Stage widths as a,b,c,d.
        #[arg(long, value_delimiter = ',', default_values_t = [32, 64, 128, 256])]
        channels: Vec<usize>,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-4)]
        weight_decay: f64,
        #[arg(long, default_value_t = 0.0)]
        val_fraction: f64,
        #[arg(long)]
        hflip: bool,
    },
    /// Evaluate a checkpoint on a dataset and write a report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Predict the label map of one greymap image.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// Run a single case instead of the whole suite.
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the analytic parameter and MAC profile.
    Params {
        #[arg(long)]
        paper_scale: bool,
        #[arg(long, default_value_t = 224)]
        input_size: usize,
        #[arg(long, default_value_t = 9)]
        classes: usize,
        /// Aligned table instead of tab-separated rows.
        #[arg(long)]
        table: bool,
    },
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { out, count, size, classes, seed, noise } => {
            let spec = SyntheticSpec { noise, ..SyntheticSpec::new(count, size, classes, seed) };
            let manifest = generate(&spec, &out)?;
            println!("wrote {count} samples, manifest {}", manifest.display());
        }
        Command::Train {
            data,
            out,
            epochs,
            lr,
            alpha,
            beta,
            seed,
            size,
            channels,
            batch_size,
            weight_decay,
            val_fraction,
            hflip,
        } => {
            let channels: [usize; 4] = channels
                .try_into()
                .map_err(|c: Vec<usize>| PipelineError::Usage(format!("--channels takes 4 widths, got {}", c.len())))?;
            let weights = match (alpha, beta) {
                (Some(a), Some(b)) => Some(LossWeights::new(a, b)?),
                _ => None,
            };
            let cfg = TrainConfig {
                seed,
                epochs,
                batch_size,
                lr,
                weight_decay,
                weights,
                channels,
                image_size: size,
                val_fraction,
                hflip,
                checkpoint: Some(out.clone()),
                ..TrainConfig::default()
            };
            let dataset = Dataset::load(&data)?;
            let report = train(&cfg, &dataset, &mut std::io::stdout())?;
            println!(
                "best mean DSC {:.4} at epoch {}; final loss {:.6}; checkpoint {}",
                report.best_dsc,
                report.best_epoch,
                report.final_loss,
                out.display()
            );
        }
        Command::Eval { ckpt, data, report } => {
            let r = evaluate(&ckpt, &data, Some(&report))?;
            print!("{}", r.aggregate.to_tsv());
        }
        Command::Predict { ckpt, image, out } => {
            let mask = predict(&ckpt, &image, &out)?;
            println!("wrote {}x{} mask to {}", mask.width, mask.height, out.display());
        }
        Command::Gradcheck { module, seed } => {
            let names: Vec<&str> = match &module {
                Some(m) => vec![m.as_str()],
                None => CASES.to_vec(),
            };
            let mut failed = 0;
            println!("case\tmax_rel_error\ttolerance\tcoordinates\tworst\tanalytic\tnumeric\tstep\trefined\tstraddling\tseconds\tstatus");
            for name in names {
                let r = run_case(name, seed).map_err(|e| match e {
                    macmd_core::Error::Config(m) => PipelineError::Usage(m),
                    other => other.into(),
                })?;
                failed += usize::from(!r.passed());
                println!(
                    "{}\t{:.3e}\t{:.0e}\t{}\t{}\t{:.6e}\t{:.6e}\t{:.0e}\t{}\t{}\t{:.2}\t{}",
                    r.name,
                    r.report.max_rel_error,
                    r.tolerance,
                    r.report.coordinates,
                    r.report.worst,
                    r.report.worst_values.0,
                    r.report.worst_values.1,
                    r.report.worst_step,
                    r.report.refined,
                    r.report.straddling,
                    r.elapsed.as_secs_f64(),
                    if r.passed() { "pass" } else { "FAIL" }
                );
            }
            if failed > 0 {
                return Err(PipelineError::Data(format!("{failed} gradient case(s) failed")));
            }
        }
        Command::Params { paper_scale, input_size, classes, table } => {
            let cfg = if paper_scale { MacmdConfig::paper_scale(classes) } else { MacmdConfig::toy(classes) };
            let p = profile(&cfg, input_size, input_size).map_err(|e| PipelineError::Usage(e.to_string()))?;
            print!("{}", if table { p.to_table() } else { p.to_tsv() });
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
