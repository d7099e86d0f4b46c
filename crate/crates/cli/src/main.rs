use std::io;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use twoway_core::flops::{self, DimProfile};
use twoway_core::harness::experiment::{self, ExperimentConfig};
use twoway_core::harness::BlerReport;

#[derive(Parser)]
#[command(name = "twoway", version, about = "Train and evaluate learned two-way feedback codes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides both training and evaluation seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for checkpoints, curves and reports.
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Evaluation worker threads.
    #[arg(long)]
    workers: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed);
        }
        if let Some(w) = self.workers {
            cfg.eval.config.workers = w;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long, default_value_t = 6)]
    k: usize,
    #[arg(long, default_value_t = 3)]
    m: usize,
    #[arg(long, default_value_t = 18)]
    t: usize,
    #[arg(long, default_value_t = 32)]
    h_c: usize,
    #[arg(long, default_value_t = 32)]
    h_b: usize,
    #[arg(long, default_value_t = 50)]
    h_r: usize,
    #[arg(long, default_value_t = 2)]
    enc_layers: usize,
    #[arg(long, default_value_t = 3)]
    dec_layers: usize,
    /// Write the table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the config's model(s) and save checkpoints and curves.
    Train(Common),
    /// Evaluate saved checkpoints over the config's SNR grid.
    Eval(Common),
    /// Evaluate a fixed checkpoint across the config's SNR_2 sweep.
    OodSweep(Common),
    /// Train (if enabled) and evaluate in one go.
    Run(Common),
    /// Print the FLOPS table for one dimension profile.
    Flops(FlopsArgs),
    /// Open-loop polar baseline over the config's grid.
    PolarBaseline(Common),
}

fn summarize(report: &BlerReport) {
    for p in &report.points {
        println!(
            "{} snr=({:+.1},{:+.1}) dB  bler=({:.3e}, {:.3e})  sum={:.3e} ±{:.1e}  trials={}",
            report.model,
            p.snr1_db,
            p.snr2_db,
            p.bler[0],
            p.bler[1],
            p.sum_bler(),
            p.sum_ci(),
            p.trials
        );
    }
}

fn list(files: &[PathBuf]) {
    for f in files {
        eprintln!("wrote {}", f.display());
    }
}

fn load_coder(cfg: &ExperimentConfig, out: &Path) -> Result<Box<dyn twoway_core::harness::SubBlockCoder>> {
    let mut cfg = cfg.clone();
    cfg.train = false;
    let (systems, _) = experiment::prepare(&cfg, out, &mut Vec::new())?;
    Ok(experiment::coder_for(&cfg, systems)?)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train(c) => {
            let mut cfg = c.load()?;
            cfg.train = true;
            let mut files = Vec::new();
            let (_, trained) = experiment::prepare(&cfg, &c.out, &mut files)?;
            for t in &trained {
                println!(
                    "{} best val sum BLER {:.3e} at step {} ({} restarts, {:.0}s)",
                    t.config.kind,
                    t.best_validation.sum_bler(),
                    t.best_step,
                    t.restarts,
                    t.seconds
                );
            }
            list(&files);
        }
        Command::Eval(c) => {
            let cfg = c.load()?;
            let coder = load_coder(&cfg, &c.out)?;
            let mut files = Vec::new();
            summarize(&experiment::run_eval(&cfg, coder.as_ref(), &c.out, &mut files)?);
            list(&files);
        }
        Command::OodSweep(c) => {
            let cfg = c.load()?;
            if cfg.ood.is_none() {
                bail!("{} has no [ood] section", c.config.display());
            }
            let coder = load_coder(&cfg, &c.out)?;
            let mut files = Vec::new();
            if let Some(r) = experiment::run_ood(&cfg, coder.as_ref(), &c.out, &mut files)? {
                summarize(&r);
            }
            list(&files);
        }
        Command::Run(c) => {
            let cfg = c.load()?;
            let out = experiment::run_experiment(&cfg, &c.out)?;
            summarize(&out.report);
            if let Some(r) = &out.ood {
                summarize(r);
            }
            list(&out.files);
        }
        Command::Flops(a) => {
            let profile = DimProfile {
                k: a.k,
                m: a.m,
                t: a.t,
                h_c: a.h_c,
                h_b: a.h_b,
                h_r: a.h_r,
                enc_layers: a.enc_layers,
                dec_layers: a.dec_layers,
            };
            let rows = flops::report(&[profile])?;
            match &a.out {
                Some(path) => {
                    let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
                    flops::write_csv(&rows, f)?;
                    eprintln!("wrote {}", path.display());
                }
                None => flops::write_csv(&rows, io::stdout().lock())?,
            }
        }
        Command::PolarBaseline(c) => {
            let cfg = c.load()?;
            std::fs::create_dir_all(&c.out)?;
            let mut files = Vec::new();
            summarize(&experiment::run_polar(&cfg, &c.out, &mut files)?);
            list(&files);
        }
    }
    Ok(())
}
