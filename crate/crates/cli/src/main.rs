use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use matteformer::eval::{self, metrics_csv, EvalCase, MetricReport};
use matteformer::prior_attention::Probe;
use matteformer::training::{self, synthetic_pool, RunOutput};
use matteformer::trimap::{RgbImage, Trimap};
use matteformer::{selfcheck, Config, MatteFormer, PriorMode};

#[derive(Parser)]
#[command(name = "matteformer", version, about = "Trimap-guided matting with prior-token attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ModelArgs {
    /// TOML config; omitted keys take the full-size defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the encoder's prior mode (NONE, GAP, UK, UK_FG_BG, UK_FG_BG_MEMORY).
    #[arg(long)]
    prior_mode: Option<PriorMode>,
}

impl ModelArgs {
    fn load(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => Config::default(),
        };
        if let Some(m) = self.prior_mode {
            cfg.encoder.prior_mode = m;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train on synthetic composites; writes train_log.csv and checkpoints.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint and write a metric CSV.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory with image/, trimap/ and alpha/ PNGs of matching names.
        #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
        data: Option<PathBuf>,
        /// Use the held-out synthetic set from the config instead.
        #[arg(long)]
        synthetic: bool,
        #[arg(long, default_value = "metrics.csv")]
        out: PathBuf,
    },
    /// Predict an alpha matte PNG for one image and trimap.
    Infer {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        trimap: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-block attention maps and mass splits as CSV.
    DumpAttn {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Image and trimap PNGs; without them the first synthetic case is used.
        #[arg(long, requires = "trimap")]
        image: Option<PathBuf>,
        #[arg(long)]
        trimap: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the number of learnable scalars.
    CountParams {
        #[command(flatten)]
        model: ModelArgs,
        /// Also print the per-module breakdown.
        #[arg(long)]
        by_module: bool,
    },
    /// Run the built-in oracle checks; exits nonzero on any failure.
    Selfcheck,
}

fn build(cfg: &Config, checkpoint: Option<&Path>) -> Result<MatteFormer> {
    let model = MatteFormer::new(&cfg.encoder, &cfg.decoder, cfg.train.seed)?;
    if let Some(p) = checkpoint {
        model.load(p).with_context(|| format!("loading checkpoint {}", p.display()))?;
    }
    Ok(model)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { model, seed, steps, out } => {
            let mut cfg = model.load()?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            cfg.validate()?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("config.toml"), cfg.to_toml())?;
            let net = build(&cfg, None)?;
            let pool = synthetic_pool(cfg.train.seed, cfg.train.pool_size, cfg.train.synth_size);
            let rows = training::train(&net, &cfg.train, &pool, Some(RunOutput { dir: &out }), |r| {
                eprintln!(
                    "step {:>6}  loss {:.5}  l1 {:.5}  comp {:.5}  lap {:.5}",
                    r.step, r.parts.total, r.parts.l1, r.parts.comp, r.parts.lap
                )
            })?;
            println!(
                "trained {} steps; final loss {:.6}; outputs in {}",
                rows.len(),
                rows.last().map_or(f64::NAN, |r| r.parts.total),
                out.display()
            );
        }
        Command::Eval { model, checkpoint, data, synthetic, out } => {
            let cfg = model.load()?;
            let net = build(&cfg, Some(&checkpoint))?;
            let cases: Vec<EvalCase> = match (&data, synthetic) {
                (Some(dir), _) => eval::load_cases(dir)?,
                (None, true) => eval::synthetic_cases(&cfg)?,
                (None, false) => bail!("pass --data DIR or --synthetic"),
            };
            if cases.is_empty() {
                bail!("no evaluation cases found");
            }
            let reports = eval::evaluate(&net, &cases, &cfg.eval, eval::worker_threads())?;
            fs::write(&out, metrics_csv(&cases, &reports))?;
            let m = MetricReport::mean(&reports);
            println!(
                "{} cases  SAD {:.4}  MSE {:.4}  Grad {:.4}  Conn {:.4}  -> {}",
                cases.len(),
                m.sad,
                m.mse,
                m.grad,
                m.conn,
                out.display()
            );
        }
        Command::Infer { model, checkpoint, image, trimap, out } => {
            let cfg = model.load()?;
            let net = build(&cfg, checkpoint.as_deref())?;
            let img = RgbImage::load_png(&image)?;
            let tri = Trimap::load_png(&trimap)?;
            net.predict(&img, &tri, None)?.save_png(&out)?;
            println!("wrote {}", out.display());
        }
        Command::DumpAttn { model, checkpoint, image, trimap, out } => {
            let cfg = model.load()?;
            let net = build(&cfg, checkpoint.as_deref())?;
            let (img, tri) = match (image, trimap) {
                (Some(i), Some(t)) => (RgbImage::load_png(&i)?, Trimap::load_png(&t)?),
                _ => {
                    let c = eval::synthetic_cases(&Config {
                        eval: matteformer::config::EvalConfig { samples: 1, ..cfg.eval.clone() },
                        ..cfg.clone()
                    })?
                    .remove(0);
                    (c.image, c.trimap)
                }
            };
            let (report, _) = eval::dump_attention(&net, &img, &tri, Probe::capturing(), Some(&out))?;
            println!("{} blocks -> {}", report.blocks.len(), out.display());
            print!("{}", report.mass_csv());
        }
        Command::CountParams { model, by_module } => {
            let cfg = model.load()?;
            let counts = build(&cfg, None)?.count_params();
            if by_module {
                for (name, n) in &counts.by_module {
                    println!("{name}\t{n}");
                }
                println!("bias_slots\t{}", counts.bias_slots);
                println!("total\t{}", counts.total);
            } else {
                println!("{}", counts.total);
            }
        }
        Command::Selfcheck => {
            let results = selfcheck::run_all();
            for r in &results {
                println!("{} {:<28} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            return Ok(results.iter().all(|r| r.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
