use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vip::network::{CostReport, VariantSpec};
use vip::tensor::kernels;
use vip::train::checkpoint::Checkpoint;
use vip::train::{evaluate_checkpoint, load_dataset, DataFormat, DataSource, TrainConfig, Trainer};
use vip::viz::export_affinity;
use vip::Model;

/// Environment variable capping kernel parallelism.
const THREADS_ENV: &str = "VIP_THREADS";

#[derive(Parser)]
#[command(name = "vip", version, about = "Train, evaluate, cost and visualize Visual Parser models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON configuration, or resume from a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue the run stored in this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Top-1 accuracy of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset path; for `synthetic`, `samples,classes[,size[,seed]]`.
        #[arg(long)]
        data: String,
        #[arg(long, value_parser = parse_format)]
        format: DataFormat,
    },
    /// Analytic parameter and multiply-accumulate counts.
    Count {
        #[arg(long)]
        variant: String,
        /// Input size as HxW.
        #[arg(long, default_value = "224x224", value_parser = parse_hw)]
        input: (usize, usize),
        /// Print the per-module breakdown as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Export per-part encoder attention maps for one image.
    Viz {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// 0-based encoder block; the parts-head encoder is the last index.
        #[arg(long)]
        block: usize,
        /// Comma-separated part indices.
        #[arg(long, value_delimiter = ',')]
        parts: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Resize the image to this square side first (defaults to the
        /// checkpoint's training size).
        #[arg(long)]
        size: Option<usize>,
    },
}

fn parse_format(s: &str) -> Result<DataFormat, String> {
    s.parse().map_err(|e: vip::Error| e.to_string())
}

fn parse_hw(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or("expected HxW, e.g. 224x224")?;
    let h = h.trim().parse().map_err(|e| format!("height: {e}"))?;
    let w = w.trim().parse().map_err(|e| format!("width: {e}"))?;
    Ok((h, w))
}

fn run(cli: Cli) -> vip::Result<()> {
    match cli.command {
        Command::Train { config, resume } => {
            let mut trainer = match (config, resume) {
                (_, Some(path)) => Trainer::<f32>::resume(&Checkpoint::load(&path)?)?,
                (Some(path), None) => Trainer::<f32>::new(TrainConfig::from_file(&path)?)?,
                (None, None) => {
                    return Err(vip::Error::Config("give --config or --resume".into()));
                }
            };
            let spe = trainer.steps_per_epoch() as u64;
            let report = trainer.run(|s| {
                if (s.step + 1) % spe == 0 {
                    eprintln!(
                        "epoch {:>4} step {:>6} lr {:.3e} loss {:.4} acc {:.3} grad {:.3e}",
                        s.epoch, s.step, s.lr, s.loss, s.accuracy, s.grad_norm
                    );
                }
            })?;
            for (epoch, acc) in &report.evaluations {
                eprintln!("eval epoch {epoch}: top-1 {:.2}%", acc * 100.0);
            }
            for path in &report.checkpoints {
                eprintln!("wrote {}", path.display());
            }
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Eval { ckpt, data, format } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let data = load_dataset(&DataSource::from_cli(format, &data)?)?;
            let acc = evaluate_checkpoint(&ckpt, &data)?;
            println!("top-1 {:.4} ({} samples)", acc, data.len());
        }
        Command::Count { variant, input, json } => {
            let spec = VariantSpec::from_name(&variant)?;
            let report = CostReport::new(&spec, input.0, input.1);
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                println!(
                    "{variant} @ {}x{}: {:.3} M params, {:.3} G FLOPs (MACs)",
                    input.0,
                    input.1,
                    report.params as f64 / 1e6,
                    report.macs as f64 / 1e9
                );
                for (stage, h, w, k) in spec.padded_stages(input.0, input.1) {
                    println!("  stage {} map {h}x{w} is zero-padded to tile {k}x{k} windows", stage + 1);
                }
            }
        }
        Command::Viz {
            ckpt,
            image,
            block,
            parts,
            out,
            size,
        } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let model = Model::<f32>::from_checkpoint(&ckpt)?;
            let size = match size {
                Some(s) => Some(s),
                None => ckpt.integers("meta.input_hw")?.first().map(|&s| s as usize),
            };
            for (map, path) in export_affinity(&model, &image, size, block, &parts, &out)? {
                println!("{} ({}x{})", path.display(), map.height, map.width);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => {
                kernels::set_threads(n);
            }
            _ => {
                eprintln!("error: {THREADS_ENV}=`{v}` is not a positive integer");
                return ExitCode::FAILURE;
            }
        }
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
