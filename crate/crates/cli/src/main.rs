use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, ValueEnum};
use holo_crlb_core::bench::Method;
use holo_crlb_core::harness::{run_experiment, Command, RunRequest};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Cmd {
    Optimize,
    Benchmark,
    Evaluate,
    Gradcheck,
    SampleSignals,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Alt,
    Gd,
    Ga,
    Directional,
    Random,
}

/// Positioning CRLB evaluation and beamforming optimization.
#[derive(Debug, Parser)]
#[command(name = "holo-crlb", version)]
struct Args {
    #[arg(value_enum)]
    command: Cmd,
    /// TOML configuration file
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// output directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "alt")]
    method: MethodArg,
    /// zero-based band for the capacity-loss study
    #[arg(long, default_value_t = 0)]
    band: usize,
    #[arg(long, default_value_t = 200)]
    eval_samples: usize,
}

fn thread_pool_size() -> anyhow::Result<Option<usize>> {
    match std::env::var("HOLO_CRLB_THREADS") {
        Ok(v) => {
            let n: usize = v.trim().parse().with_context(|| format!("HOLO_CRLB_THREADS={v:?} is not a count"))?;
            anyhow::ensure!(n > 0, "HOLO_CRLB_THREADS must be positive");
            Ok(Some(n))
        }
        Err(_) => Ok(None),
    }
}

fn run(args: Args) -> anyhow::Result<bool> {
    if let Some(n) = thread_pool_size()? {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring thread pool")?;
    }
    let command = match args.command {
        Cmd::Optimize => Command::Optimize,
        Cmd::Benchmark => Command::Benchmark,
        Cmd::Evaluate => Command::Evaluate,
        Cmd::Gradcheck => Command::Gradcheck,
        Cmd::SampleSignals => Command::SampleSignals,
    };
    let method = match args.method {
        MethodArg::Alt => Method::Alt,
        MethodArg::Gd => Method::Gd,
        MethodArg::Ga => Method::Ga,
        MethodArg::Directional => Method::Directional,
        MethodArg::Random => Method::Random,
    };
    let req = RunRequest {
        command,
        config: args.config.clone(),
        seed: args.seed,
        out: args.out.clone(),
        method,
        band: args.band,
        eval_samples: args.eval_samples,
    };
    let report = run_experiment(&req).with_context(|| format!("running with config {}", args.config.display()))?;

    for m in &report.methods {
        println!(
            "{:<12} train {:.6e}  eval {:.6e}  {:.0} ms",
            m.method.tag(),
            m.avg_crlb_train,
            m.avg_crlb_eval,
            m.wall_ms
        );
        if let Some(q) = &m.capacity_loss {
            println!("{:<12} capacity loss median {:.6e} b/s (q1 {:.6e}, q3 {:.6e})", "", q.median, q.q1, q.q3);
        }
    }
    if let Some(g) = &report.gradcheck {
        println!(
            "gradcheck: C {:.3e}, S {:.3e} (tolerance {:.0e}) {}",
            g.rel_error_c,
            g.rel_error_s,
            g.tolerance,
            if g.pass { "PASS" } else { "FAIL" }
        );
        return Ok(g.pass);
    }
    println!("wrote {} to {}", report.files.join(", "), args.out.display());
    Ok(true)
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
