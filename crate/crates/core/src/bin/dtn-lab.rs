use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use dtn_lab::experiments::{output_dir, run_to_dir, ExperimentConfig, ExperimentKind};

/// Runs one experiment and writes summary.json plus CSV tables.
#[derive(Debug, Parser)]
#[command(name = "dtn-lab", version)]
struct Cli {
    /// Experiment kind; overrides the kind in the config file.
    kind: ExperimentKind,
    /// JSON config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (default: the config's `output`, else `out/<kind>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for the parallel loops.
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let text = match std::fs::read_to_string(&cli.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", cli.config.display());
            return ExitCode::from(1);
        }
    };
    // the CLI kind wins, so patch it in before validation
    let mut raw: serde_json::Value = match serde_json::from_str(&text) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    if let Some(obj) = raw.as_object_mut() {
        obj.insert("kind".into(), serde_json::Value::String(cli.kind.name().into()));
        if let Some(s) = cli.seed {
            obj.insert("seed".into(), s.into());
        }
    }
    let cfg = match ExperimentConfig::from_json(&raw.to_string()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let dir = cli.out.unwrap_or_else(|| output_dir(&cfg));
    match run_to_dir(&cfg, &dir) {
        Ok(summary) => {
            for c in &summary.checks {
                let tag = if c.passed { "PASS" } else if c.informational { "INFO" } else { "FAIL" };
                println!("{tag} {} = {:.6e} ({})", c.name, c.value, c.condition);
            }
            if let Some(e) = &summary.error {
                eprintln!("error: {}", e.message);
            }
            println!("summary: {}", dir.join("summary.json").display());
            ExitCode::from(summary.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
