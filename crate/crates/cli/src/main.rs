use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lcaunet::data::{self, SynthConfig};
use lcaunet::train::{self, PredictOptions, TrainConfig};
use lcaunet::ModelError;

#[derive(Parser)]
#[command(name = "lcaunet", version, about = "Skin lesion segmentation with edge and body encoders")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; missing keys take desk defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Field override such as `model.fusion="concat"` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig, ModelError> {
        let mut ov = self.overrides.clone();
        if let Some(s) = self.seed {
            ov.push(format!("seed={s}"));
        }
        train::parse_config(self.config.as_deref(), &ov)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write logs and checkpoints.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "runs/latest")]
        out_dir: PathBuf,
    },
    /// Evaluate a checkpoint on the test split of its configured dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate this directory of image/mask pairs instead (all pairs).
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long, default_value = "eval")]
        out_dir: PathBuf,
    },
    /// Write binary masks for the given images.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "pred")]
        out_dir: PathBuf,
        #[arg(long)]
        edges: bool,
        #[arg(long)]
        overlay: bool,
        /// Directory with `<stem>_segmentation.png` files drawn in overlays.
        #[arg(long)]
        gt_dir: Option<PathBuf>,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Compare global and windowed cross-attention cost.
    BenchAttn {
        #[arg(long, value_delimiter = ',', default_value = "14,28,56,112")]
        grids: Vec<usize>,
        #[arg(long, default_value_t = 96)]
        channels: usize,
        #[arg(long, default_value_t = 7)]
        window: usize,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "bench_attention.csv")]
        out: PathBuf,
    },
    /// Write synthetic image/mask pairs.
    MakeSynth {
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 224)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "synth")]
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, ModelError::Config(_)) { 1 } else { 2 })
        }
    }
}

fn run(cmd: Cmd) -> Result<(), ModelError> {
    match cmd {
        Cmd::Train { cfg, out_dir } => {
            let cfg = cfg.resolve()?;
            std::fs::create_dir_all(&out_dir)?;
            let echo = toml::to_string(&cfg).map_err(|e| ModelError::Config(e.to_string()))?;
            std::fs::write(out_dir.join("config.toml"), &echo)?;
            eprintln!("{echo}");
            let ds = train::load_dataset(&cfg)?;
            for path in &ds.skipped {
                eprintln!("skipped {} (no matching mask)", path.display());
            }
            eprintln!("train {} / val {} / test {}", ds.train.len(), ds.val.len(), ds.test.len());
            let out = train::train(cfg, &ds, Some(&out_dir), |e| {
                eprintln!(
                    "epoch {:>3}  lr {:.2e}  loss {:.4}  train dice {:.4}  val dice {:.4}",
                    e.epoch, e.lr, e.train_loss, e.train_dice, e.val.dice
                )
            })?;
            eprintln!("best val dice {:.4}; checkpoints in {}", out.best_val_dice, out_dir.display());
        }
        Cmd::Eval { checkpoint, data_dir, out_dir } => {
            let trainer = train::load_checkpoint(&checkpoint)?;
            let samples = match data_dir {
                Some(d) => {
                    let all = lcaunet::data::SplitSpec { train: 0.0, val: 0.0, test: 1.0, seed: 0 };
                    let ds = data::load_isic_dir(&d, &all, trainer.cfg.model.image_size)?;
                    ds.test
                }
                None => train::load_dataset(&trainer.cfg)?.test,
            };
            let report = trainer.evaluate(&samples)?;
            std::fs::create_dir_all(&out_dir)?;
            report.write_csv(&out_dir.join("metrics.csv"))?;
            report.write_json_lines(&out_dir.join("metrics.jsonl"))?;
            let m = report.aggregate.metrics();
            println!(
                "images {}  acc {:.4}  dice {:.4}  iou {:.4}  se {:.4}  sp {:.4}",
                report.rows.len(),
                m.acc,
                m.dice,
                m.iou,
                m.se,
                m.sp
            );
        }
        Cmd::Predict { checkpoint, out_dir, edges, overlay, gt_dir, images } => {
            let trainer = train::load_checkpoint(&checkpoint)?;
            let opts = PredictOptions { edge_maps: edges, overlay, gt_dir };
            let mut failed = 0;
            for (path, r) in train::predict(&trainer, &images, &out_dir, &opts)? {
                match r {
                    Ok(p) => println!("{} -> {}", path.display(), p.display()),
                    Err(e) => {
                        failed += 1;
                        eprintln!("{}: {e}", path.display());
                    }
                }
            }
            if failed == images.len() {
                return Err(ModelError::Data("no image could be processed".into()));
            }
        }
        Cmd::BenchAttn { grids, channels, window, reps, seed, out } => {
            let rows = train::bench_attention(&grids, channels, window, reps, seed)?;
            write_parent(&out)?;
            train::write_bench_csv(&rows, &out)?;
            for r in &rows {
                println!(
                    "{:>4}x{:<4} global {:>14} ops {:>10.2} ms   local {:>12} ops {:>9.2} ms",
                    r.h, r.w, r.global_ops, r.global_ms, r.local_ops, r.local_ms
                );
            }
            if rows.len() >= 2 {
                let n: Vec<f64> = rows.iter().map(|r| (r.h * r.w) as f64).collect();
                let g: Vec<f64> = rows.iter().map(|r| r.global_ms).collect();
                let l: Vec<f64> = rows.iter().map(|r| r.local_ms).collect();
                println!(
                    "time growth exponent vs tokens: global {:.3}, local {:.3}",
                    train::loglog_slope(&n, &g),
                    train::loglog_slope(&n, &l)
                );
            }
        }
        Cmd::MakeSynth { count, size, seed, out_dir } => {
            std::fs::create_dir_all(&out_dir)?;
            let cfg = SynthConfig::default();
            for i in 0..count {
                let s = data::synth_lesion_sample(data::synth_seed(seed, i), size, size, &cfg)?;
                data::write_sample(&out_dir, &s)?;
            }
            println!("wrote {count} pairs to {}", out_dir.display());
        }
    }
    Ok(())
}

fn write_parent(path: &Path) -> std::io::Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p),
        _ => Ok(()),
    }
}
