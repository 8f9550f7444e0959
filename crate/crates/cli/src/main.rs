use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use ccsbesr::commands;
use ccsbesr::config::RunConfig;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "ccsbesr", version, about = "Stereo endoscopic image super-resolution")]
struct Cli {
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_parser = parse_scale)]
    scale: Option<usize>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Use generated stereo pairs instead of a dataset directory.
    #[arg(long, global = true)]
    synthetic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train, resuming from --checkpoint when given.
    Train,
    /// PSNR/SSIM of a checkpoint against the bicubic baseline.
    Eval,
    /// Super-resolve one stereo pair.
    Infer { left: PathBuf, right: PathBuf },
    /// Finite-difference check of every block.
    Gradcheck {
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Write generated stereo pairs and a manifest.
    MakeSynthetic {
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
}

fn parse_scale(s: &str) -> Result<usize, String> {
    match s {
        "2" => Ok(2),
        "4" => Ok(4),
        _ => Err(format!("scale must be 2 or 4, got {s:?}")),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("{}: cannot read", p.display()))?;
            RunConfig::from_text(&text).with_context(|| format!("{}", p.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.model.seed = seed;
    }
    if let Some(s) = cli.scale {
        cfg.model.scale = s;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn leak(s: String) -> &'static str {
    Box::leak(s.into_boxed_str())
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Train => {
            let o = commands::train(&cfg, cli.synthetic, cli.checkpoint.as_deref())?;
            println!(
                "trained {} steps over {} epochs; l_sr {} -> {}; best val psnr {:.3} dB",
                o.steps, o.epochs, o.first.l_sr, o.last.l_sr, o.best_val_psnr
            );
            println!("log {}", o.log_path.display());
            println!("checkpoint {}", o.last_checkpoint.display());
            println!("best {}", o.best_checkpoint.display());
        }
        Command::Eval => {
            let ck = cli.checkpoint.as_deref().context("eval needs --checkpoint")?;
            let r = commands::eval(&cfg, ck, cli.scale, cli.synthetic)?;
            for row in r.rows.iter().chain(std::iter::once(&r.mean)) {
                println!(
                    "{}\tpsnr {:.3}\tssim {:.4}\tbicubic psnr {:.3}\tbicubic ssim {:.4}",
                    row.id, row.model.psnr, row.model.ssim, row.bicubic.psnr, row.bicubic.ssim
                );
            }
            println!("report {}", r.csv_path.display());
        }
        Command::Infer { left, right } => {
            let ck = cli.checkpoint.as_deref().context("infer needs --checkpoint")?;
            let (l, r) = commands::infer(ck, left, right, &cfg.out_dir)?;
            println!("{}\n{}", l.display(), r.display());
        }
        Command::Gradcheck { inject_fault } => {
            let reports = commands::gradcheck(cfg.model.seed, inject_fault.clone().map(leak))?;
            let mut ok = true;
            for r in &reports {
                let pass = r.passed();
                ok &= pass;
                println!(
                    "{:<18} {} worst {:.3e} checked {} skipped {}",
                    r.name,
                    if pass { "PASS" } else { "FAIL" },
                    r.worst_rel_err,
                    r.checked,
                    r.skipped
                );
            }
            return Ok(ok);
        }
        Command::MakeSynthetic { count } => {
            if *count == 0 {
                bail!("--count must be positive");
            }
            let m = commands::make_synthetic(&cfg, cfg.model.seed, *count, &cfg.out_dir)?;
            println!("wrote {} pairs to {}", m.entries.len(), m.root.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("ccsbesr: error: gradient check failed");
            ExitCode::from(2)
        }
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("ccsbesr: error: {msg}");
            ExitCode::FAILURE
        }
    }
}
