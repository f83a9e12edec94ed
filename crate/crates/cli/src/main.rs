use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use nfseg::data::{self, Split};
use nfseg::harness::{self, Checkpoint, ExperimentConfig};
use nfseg::metrics::MetricsReport;

#[derive(Parser)]
#[command(name = "nfseg", version, about = "Conditional neural fields for 2D semantic segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic scenes as PNG image/label tiles.
    GenerateData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model; writes the best checkpoint and a CSV training log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Training log (default: the checkpoint path with a .csv extension).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Configuration overrides: `--key value` pairs.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        overrides: Vec<String>,
    },
    /// Metrics of a checkpoint on one split of its dataset, as CSV.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        overrides: Vec<String>,
    },
    /// Dense prediction for one image, written as a color-coded PNG mask.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and test the selected strategies at every size and seed.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated training seeds (default: compare.seeds).
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Per-run CSV (default: print the table only).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        overrides: Vec<String>,
    },
    /// Finite-difference check of every kernel and decoder.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

/// `--key value --other value` into pairs.
fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(k) = it.next() {
        let Some(key) = k.strip_prefix("--") else {
            bail!("expected --key before '{k}'");
        };
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().with_context(|| format!("--{key} needs a value"))?;
                (key.to_string(), v.clone())
            }
        };
        out.push((key, value));
    }
    Ok(out)
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let overrides = parse_overrides(overrides)?;
    let config = match path {
        Some(p) => ExperimentConfig::load(p, &overrides)?,
        None => ExperimentConfig::from_toml("", &overrides)?,
    };
    Ok(config)
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData { seed, count, size, out } => {
            for i in 0..count {
                let s = data::generate_synthetic(data::synthetic_seed(seed, i), size, size)?;
                data::save_tile(&out, &format!("scene_{i:04}"), &s)?;
            }
            info!("wrote {count} tiles to {}", out.display());
        }
        Command::Train { config, out, log, overrides } => {
            let config = load_config(config.as_deref(), &overrides)?;
            let data = config.dataset()?;
            info!(
                "training {} at {} px, seed {}",
                config.model.label(),
                config.data.image_size,
                config.training.seed
            );
            let outcome = harness::train_on(&config, &data, |r| {
                if let Some(v) = r.val_iou {
                    info!("epoch {} step {} loss {:.4} val IoU {:.4}", r.epoch, r.step, r.loss, v);
                }
            })?;
            outcome.best.save(&out)?;
            let log_path = log.unwrap_or_else(|| out.with_extension("csv"));
            fs::write(&log_path, harness::log_csv(&outcome.log))?;
            info!(
                "stopped ({:?}) after {} steps in {:.1}s; best val IoU {:.4} at epoch {}",
                outcome.stop,
                outcome.steps,
                outcome.runtime_s,
                outcome.best.best_val_iou,
                outcome.best.epoch
            );
        }
        Command::Evaluate { ckpt, split, out, overrides } => {
            let mut checkpoint = Checkpoint::load(&ckpt)?;
            checkpoint.config = checkpoint.config.with_overrides(&parse_overrides(&overrides)?)?;
            let data = checkpoint.config.dataset()?;
            let refs = data.get(split.into());
            let report = harness::evaluate(&checkpoint, refs)?;
            let classes = checkpoint.config.model.classes;
            eprint!("{}", report.table());
            let csv = format!("{}\n{}\n", MetricsReport::csv_header(classes), report.csv_row());
            write_or_print(out.as_deref(), &csv)?;
        }
        Command::Predict { ckpt, image, out } => {
            let checkpoint = Checkpoint::load(&ckpt)?;
            let img = data::read_image(&image)?;
            let (h, w) = (img.shape()[1], img.shape()[2]);
            let mask = checkpoint.model.predict_mask(&img, checkpoint.config.training.eval_chunk)?;
            data::write_mask(&out, &mask, h, w)?;
            info!("wrote {}x{} mask to {}", w, h, out.display());
        }
        Command::Compare { config, seeds, out, overrides } => {
            let config = load_config(config.as_deref(), &overrides)?;
            let seeds = if seeds.is_empty() { config.compare.seeds.clone() } else { seeds };
            let cmp = harness::compare(&config, &seeds, |r| {
                info!(
                    "{} px {} seed {}: test IoU {:.4} after {} steps",
                    r.size,
                    harness::strategy_spec(r.strategy, r.code_source),
                    r.seed,
                    r.test.iou.aggregate,
                    r.steps
                );
            })?;
            if let Some(p) = out.as_deref() {
                write_or_print(Some(p), &cmp.csv())?;
            }
            print!("{}", cmp.table());
        }
        Command::Gradcheck { cases, seed } => {
            let results = harness::gradient_suite(cases, seed)?;
            let mut failed = 0;
            for r in &results {
                let status = if r.passed() { "ok" } else { "FAIL" };
                println!(
                    "{status:4} {:<36} cases {:3}  max error {:.3e}  (tolerance {:.0e})",
                    r.name, r.cases, r.max_error, r.tolerance
                );
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                bail!("{failed} gradient checks failed");
            }
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    run(Cli::parse())
}
