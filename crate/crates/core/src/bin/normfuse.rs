use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use normfuse::cli::{self, Forms, RunConfig, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE};

#[derive(Parser)]
#[command(
    name = "normfuse",
    version,
    about = "Deferred-normalization fusion: verify, simulate, fold"
)]
struct Cli {
    /// Override the seed from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Print only JSON on stdout; no progress lines on stderr.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare fused and conventional paths on random instances.
    Verify { config: PathBuf },
    /// Schedule the block on the two-engine cost model.
    Simulate {
        config: PathBuf,
        #[command(flatten)]
        forms: FormArgs,
        /// Write the timeline as CSV (one file per form with --both).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Fold normalization parameters into the following weights.
    Fold {
        config: PathBuf,
        weights_in: PathBuf,
        weights_out: PathBuf,
    },
    /// Write random block weights drawn from the config's seed.
    InitWeights {
        config: PathBuf,
        weights_out: PathBuf,
    },
}

#[derive(Args)]
#[group(multiple = false)]
struct FormArgs {
    #[arg(long)]
    fused: bool,
    #[arg(long)]
    conventional: bool,
    #[arg(long)]
    both: bool,
}

impl FormArgs {
    fn forms(&self) -> Forms {
        match (self.fused, self.conventional) {
            (true, _) => Forms::Fused,
            (_, true) => Forms::Conventional,
            _ => Forms::Both,
        }
    }
}

fn load(path: &Path, seed: Option<u64>) -> anyhow::Result<RunConfig> {
    let mut cfg =
        RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn csv_path(base: &Path, form: &str, both: bool) -> PathBuf {
    if !both {
        return base.to_path_buf();
    }
    let stem = base
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("timeline");
    let ext = base.extension().and_then(|s| s.to_str()).unwrap_or("csv");
    base.with_file_name(format!("{stem}.{form}.{ext}"))
}

fn run(cli: Cli) -> anyhow::Result<i32> {
    let note = |msg: String| {
        if !cli.quiet {
            eprintln!("{msg}");
        }
    };
    match &cli.command {
        Command::Verify { config } => {
            let cfg = load(config, cli.seed)?;
            let report = cli::verify(&cfg)?;
            print!("{}", report.to_json());
            if report.passed() {
                Ok(EXIT_OK)
            } else {
                for s in &report.equivalence.as_ref().unwrap().sites {
                    if !s.pass {
                        eprintln!("site {} failed: max_rel_err {:?}", s.site, s.max_rel_err);
                    }
                }
                Ok(EXIT_NUMERICAL)
            }
        }
        Command::Simulate { config, forms, csv } => {
            let cfg = load(config, cli.seed)?;
            let forms = forms.forms();
            let report = cli::simulate(&cfg, forms)?;
            if let (Some(base), Some(t)) = (csv, &report.timelines) {
                let both = forms == Forms::Both;
                for (name, tl) in [("conventional", &t.conventional), ("fused", &t.fused)] {
                    if let Some(tl) = tl {
                        let path = csv_path(base, name, both);
                        std::fs::write(&path, tl.to_csv())
                            .with_context(|| format!("writing {}", path.display()))?;
                        note(format!("wrote {}", path.display()));
                    }
                }
            }
            print!("{}", report.to_json());
            Ok(EXIT_OK)
        }
        Command::Fold {
            config,
            weights_in,
            weights_out,
        } => {
            let cfg = load(config, cli.seed)?;
            let weights = cli::load_weights(weights_in)
                .with_context(|| format!("reading weights {}", weights_in.display()))?;
            let folded = cli::fold(&cfg, &weights)?;
            std::fs::write(weights_out, folded.to_json())
                .with_context(|| format!("writing {}", weights_out.display()))?;
            note(format!("wrote {}", weights_out.display()));
            Ok(EXIT_OK)
        }
        Command::InitWeights {
            config,
            weights_out,
        } => {
            let cfg = load(config, cli.seed)?;
            let weights = cli::random_weights(&cfg)?;
            std::fs::write(weights_out, cli::weights_to_json(&weights))
                .with_context(|| format!("writing {}", weights_out.display()))?;
            note(format!("wrote {}", weights_out.display()));
            Ok(EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USAGE as u8)
        }
    }
}
