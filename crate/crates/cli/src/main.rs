use std::process::ExitCode;

use clap::Parser;
use tranad_cli::Cli;

/// `TRANAD_THREADS` caps the worker pool; results do not depend on it.
fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("TRANAD_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| anyhow::anyhow!("TRANAD_THREADS must be a positive integer, got {v:?}"))?;
        if n == 0 {
            anyhow::bail!("TRANAD_THREADS must be a positive integer, got 0");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|()| tranad_cli::run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
