use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mfcl::config::RunConfig;
use mfcl::error::{CliError, Result};
use mfcl::{golden, run};
use mfcl_core::gradcheck::{run_suite, CheckOptions};

#[derive(Parser)]
#[command(name = "mfcl", version, about = "Multi-format contrastive audio representation learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (`section.key = value` lines); defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `train.seed` (`synth.seed` for `synth`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (run directory for pretrain/probe/eval).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Reject unknown configuration keys.
    #[arg(long, global = true)]
    strict: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its manifests.
    Synth,
    /// Contrastive pretraining.
    Pretrain {
        /// Continue from `ckpt.last` in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Train a probe on the frozen encoders of a run.
    Probe,
    /// Score a run's probe on the eval split.
    Eval,
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long, hide = true)]
        fault: Option<String>,
    },
    /// Pretrain + probe + eval over one axis of values and several seeds.
    Ablate,
    /// Emit or verify DSP golden vectors.
    Golden {
        #[arg(value_enum)]
        mode: GoldenMode,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum GoldenMode {
    Emit,
    Verify,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let (mut cfg, warnings) = match &cli.config {
        Some(p) => RunConfig::load(p, cli.strict)?,
        None => (RunConfig::default(), Vec::new()),
    };
    for w in warnings {
        eprintln!("warning: {w}");
    }
    if let Some(seed) = cli.seed {
        let key = if matches!(cli.command, Command::Synth) { "synth.seed" } else { "train.seed" };
        cfg = cfg.with(key, &seed.to_string())?;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, default: &Path) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| default.to_path_buf())
}

fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gradcheck { fault } => {
            let opts = CheckOptions {
                fault: fault.clone().map(|f| &*Box::leak(f.into_boxed_str())),
                ..CheckOptions::default()
            };
            let reports = run_suite(&opts)?;
            let mut failed = 0;
            for r in &reports {
                let status = if r.passed() { "ok" } else { "FAIL" };
                println!("{:<24} {:.3e} {status}", r.op, r.max_rel_err);
                if !r.passed() {
                    failed += 1;
                }
            }
            if failed > 0 {
                return Err(CliError::Numeric(format!("{failed} op(s) exceed the gradient tolerance")));
            }
            Ok(())
        }
        Command::Golden { mode } => {
            let dir = out_dir(cli, Path::new("golden"));
            match mode {
                GoldenMode::Emit => {
                    golden::emit(&dir)?;
                    println!("wrote golden vectors to {}", dir.display());
                    Ok(())
                }
                GoldenMode::Verify => {
                    let mut bad = Vec::new();
                    for (name, err) in golden::verify(&dir)? {
                        println!("{name:<12} max abs err {err:.3e}");
                        if !(err <= golden::TOLERANCE) {
                            bad.push(name);
                        }
                    }
                    if bad.is_empty() {
                        Ok(())
                    } else {
                        Err(CliError::Numeric(format!("golden mismatch: {}", bad.join(", "))))
                    }
                }
            }
        }
        Command::Synth => {
            let cfg = load_config(cli)?;
            let dir = out_dir(cli, &cfg.data_dir);
            let s = run::cmd_synth(&cfg, &dir)?;
            println!("train {} val {} eval {} clips in {}", s.train, s.val, s.eval, dir.display());
            Ok(())
        }
        Command::Pretrain { resume } => {
            let cfg = load_config(cli)?;
            let dir = out_dir(cli, Path::new("runs/default"));
            run::cmd_pretrain(&cfg, &dir, *resume)
        }
        Command::Probe => {
            let cfg = load_config(cli)?;
            run::cmd_probe(&cfg, &out_dir(cli, Path::new("runs/default")))
        }
        Command::Eval => {
            let cfg = load_config(cli)?;
            let r = run::cmd_eval(&cfg, &out_dir(cli, Path::new("runs/default")))?;
            match r.accuracy {
                Some(a) => println!("map {:.4} accuracy {a:.4}", r.report.map),
                None => println!("map {:.4}", r.report.map),
            }
            Ok(())
        }
        Command::Ablate => {
            let cfg = load_config(cli)?;
            let rows = run::cmd_ablate(&cfg, &out_dir(cli, Path::new("runs/ablate")))?;
            for (v, m, n) in run::ablation_summary(&rows) {
                println!("{v:<24} {m:.4} ({n} runs)");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
