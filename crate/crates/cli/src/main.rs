use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use genegan::eval::{
    append_drift_csv, append_probe_csv, disentanglement_probe, drift_metric, gradcheck_config, gradcheck_model,
    GradTarget,
};
use genegan::synth::{ingest_root, make_dataset};
use genegan::train::{train_from, TrainConfig, TrainError, Trainer};
use transfig::{montage, montage_row, output_in, write_image, CliError, Model, Result};

/// Object transfiguration with a learned split of images into background and
/// object codes.
#[derive(Parser, Debug)]
#[command(name = "transfig", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write metrics.csv and checkpoints to --out.
    Train {
        /// `key = value` config file; defaults apply to absent keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Folder holding `with/` and `without/` PPM or PGM images.
        #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
        data: Option<PathBuf>,
        /// Generate N with-object and N object-free synthetic images.
        #[arg(long, value_name = "N")]
        synthetic: Option<usize>,
        /// Seed of the synthetic dataset.
        #[arg(long, default_value_t = 7)]
        data_seed: u64,
        /// Overrides `steps` from the config.
        #[arg(long)]
        steps: Option<u64>,
        /// Overrides `seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Erase the object: decode the image's background with a zero object code.
    Remove {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Put the donor's object on the recipient.
    Transplant {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        donor: PathBuf,
        #[arg(long)]
        recipient: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exchange objects between two images and write a six-panel row to
    /// OUTDIR/swap.ppm: A, B, A with B's object, B with A's object, and both
    /// reconstructions.
    Swap {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        outdir: PathBuf,
    },
    /// Decode the recipient with object codes mixed from 1 to 4 donors.
    Interpolate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, num_args = 1..=4, required = true)]
        donors: Vec<PathBuf>,
        #[arg(long)]
        recipient: PathBuf,
        /// Frames along a path, or grid side for 3 or 4 donors.
        #[arg(long, default_value_t = 5)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode the image with its object code multiplied by each factor.
    Scale {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, required = true)]
        factors: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Linear probes of the object parameters from both codes, on fresh
    /// synthetic samples.
    EvalProbe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 2500)]
        samples: usize,
        #[arg(long, default_value_t = 1007)]
        seed: u64,
        /// Append a row to probe.csv here.
        #[arg(long)]
        log_dir: Option<PathBuf>,
    },
    /// Fraction of synthetic transplants whose object survives intact.
    EvalDrift {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 500)]
        pairs: usize,
        #[arg(long, default_value_t = 2007)]
        seed: u64,
        /// Append a row to drift.csv here.
        #[arg(long)]
        log_dir: Option<PathBuf>,
    },
    /// Compare backpropagated gradients with finite differences on a small model.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = Target::Generator)]
        target: Target,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Target {
    Generator,
    Stacked,
    Discriminator,
    All,
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => TrainConfig::load(p).map_err(|e| match e {
            TrainError::Io { .. } => CliError::Usage(format!("cannot read config: {e}")),
            other => other.into(),
        }),
    }
}

fn validated(cfg: TrainConfig) -> Result<TrainConfig> {
    cfg.validate().map_err(CliError::from)?;
    Ok(cfg)
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config: Option<&Path>,
    data: Option<&Path>,
    synthetic: Option<usize>,
    data_seed: u64,
    steps: Option<u64>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = steps {
        cfg.steps = s;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let cfg = validated(cfg)?;
    let (with, without) = match (data, synthetic) {
        (Some(dir), _) => ingest_root(dir, cfg.image_size)?,
        (None, Some(n)) => make_dataset(n, n, cfg.image_size, data_seed)?,
        (None, None) => return Err(CliError::Usage("one of --data or --synthetic is required".into())),
    };
    let cfg_path = output_in(out, "config.txt")?;
    std::fs::write(&cfg_path, cfg.to_text()).map_err(|e| CliError::Failed(format!("{}: {e}", cfg_path.display())))?;
    let total = cfg.steps;
    let report = (total / 20).max(1);
    let trainer = Trainer::new(cfg)?;
    let outcome = train_from(trainer, &with, &without, Some(out), |m| {
        if m.step % report == 0 || m.step == total {
            eprintln!(
                "step {}/{total}  G {:.4}  rec {:.4}  D {:.4}",
                m.step,
                m.gen.total,
                m.gen.rec_au + m.gen.rec_b0,
                m.d_with + m.d_without
            );
        }
    })?;
    println!("{} (step {})", out.join("final.ggck").display(), outcome.checkpoint.step);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            data,
            synthetic,
            data_seed,
            steps,
            seed,
            out,
        } => cmd_train(config.as_deref(), data.as_deref(), synthetic, data_seed, steps, seed, &out),
        Command::Remove { ckpt, input, out } => {
            let m = Model::load(ckpt)?;
            let img = m.read_image(input)?;
            write_image(&out, &m.remove(&img)?)
        }
        Command::Transplant {
            ckpt,
            donor,
            recipient,
            out,
        } => {
            let m = Model::load(ckpt)?;
            let d = m.read_image(donor)?;
            let r = m.read_image(recipient)?;
            write_image(&out, &m.transplant(&d, &r)?)
        }
        Command::Swap { ckpt, a, b, outdir } => {
            let m = Model::load(ckpt)?;
            let a = m.read_image(a)?;
            let b = m.read_image(b)?;
            let grid = montage_row(m.swap(&a, &b)?)?;
            write_image(&output_in(&outdir, "swap.ppm")?, &grid)
        }
        Command::Interpolate {
            ckpt,
            donors,
            recipient,
            steps,
            out,
        } => {
            let m = Model::load(ckpt)?;
            let donors = donors.iter().map(|p| m.read_image(p)).collect::<Result<Vec<_>>>()?;
            let r = m.read_image(recipient)?;
            write_image(&out, &montage(&m.interpolate(&donors, &r, steps)?)?)
        }
        Command::Scale {
            ckpt,
            input,
            factors,
            out,
        } => {
            let m = Model::load(ckpt)?;
            let img = m.read_image(input)?;
            write_image(&out, &montage_row(m.scale(&img, &factors)?)?)
        }
        Command::EvalProbe {
            ckpt,
            samples,
            seed,
            log_dir,
        } => {
            let m = Model::load(ckpt)?;
            let (with, _) = make_dataset(samples, 0, m.image_size(), seed)?;
            let r = disentanglement_probe(&m.checkpoint.params, m.config, &with)?;
            println!("r2_object_from_u {:.4}", r.r2_object_from_u);
            println!("r2_object_from_a {:.4}", r.r2_object_from_a);
            for (name, b) in [("u", r.from_u), ("a", r.from_a)] {
                println!(
                    "{name}: darkness {:.4} width {:.4} tint {:.4} style_accuracy {:.4}{}",
                    b.r2_darkness,
                    b.r2_width,
                    b.r2_tint,
                    b.style_accuracy,
                    if b.degenerate { " (degenerate)" } else { "" }
                );
            }
            if let Some(dir) = log_dir {
                output_in(&dir, "probe.csv")?;
                append_probe_csv(&dir, &format!("step{}", m.checkpoint.step), &r)?;
            }
            Ok(())
        }
        Command::EvalDrift {
            ckpt,
            pairs,
            seed,
            log_dir,
        } => {
            let m = Model::load(ckpt)?;
            let (with, without) = make_dataset(pairs, pairs, m.image_size(), seed)?;
            let r = drift_metric(&m.checkpoint.params, m.config, &with, &without, pairs)?;
            println!("match_rate {:.4}", r.match_rate);
            println!("style_match_rate {:.4}", r.style_match_rate);
            println!(
                "mean error: darkness {:.4} width {:.4} tint {:.4}",
                r.darkness_error, r.width_error, r.tint_error
            );
            if let Some(dir) = log_dir {
                output_in(&dir, "drift.csv")?;
                append_drift_csv(&dir, &format!("step{}", m.checkpoint.step), &r)?;
            }
            Ok(())
        }
        Command::Gradcheck { target, seed } => {
            let targets: &[GradTarget] = match target {
                Target::Generator => &[GradTarget::Generator],
                Target::Stacked => &[GradTarget::StackedGenerator],
                Target::Discriminator => &[GradTarget::Discriminator],
                Target::All => &GradTarget::ALL,
            };
            let mut failed = Vec::new();
            for &t in targets {
                let r = gradcheck_model(gradcheck_config(), t, seed)?;
                println!(
                    "{}: {} params, {} checked, {} near kinks, {} over tolerance, max rel err {:.3e} -> {}",
                    t.name(),
                    r.params,
                    r.checked,
                    r.kink_skipped,
                    r.failures.len(),
                    r.max_rel_err,
                    if r.passed() { "ok" } else { "FAIL" }
                );
                if !r.passed() {
                    failed.push(t.name());
                }
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(CliError::Failed(format!("gradient check failed for {}", failed.join(", "))))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("transfig: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
