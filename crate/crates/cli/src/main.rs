use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lupts::dataio::TrajectorySchema;
use lupts::harness::{
    output_path, preset, run_experiment, run_ingest, write_results, ExperimentConfig,
    IngestConfig, PRESET_NAMES,
};
use lupts::{Error, Result};

#[derive(Parser)]
#[command(name = "lupts", version, about = "Privileged time-series estimators: sweeps and CSV evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a synthetic sweep from a JSON config or a named preset.
    Run {
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output prefix; files are `<out>.rows.csv`, `<out>.agg.csv`, `<out>.config.json`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        replicates: Option<usize>,
        /// Run cells one at a time (output is identical either way).
        #[arg(long)]
        serial: bool,
    },
    /// Evaluate estimators on a wide trajectory CSV.
    Ingest {
        #[arg(long)]
        csv: PathBuf,
        /// JSON schema: {"T": .., "d": .., "outcome_column": .., "missing_marker": ..}
        #[arg(long)]
        schema: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "baseline,lupts")]
        estimators: Vec<String>,
        #[arg(long, value_delimiter = ',', required = true)]
        train_sizes: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        replicates: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
        /// Fit without intercepts.
        #[arg(long)]
        no_intercept: bool,
        #[arg(long, default_value = "ingest")]
        out: PathBuf,
    },
    /// Print the available preset names.
    ListPresets,
}

fn report(prefix: &Path, rows: usize, failures: usize) {
    let files: Vec<String> = ["rows.csv", "agg.csv", "config.json"]
        .iter()
        .map(|s| output_path(prefix, s).display().to_string())
        .collect();
    let summary = serde_json::json!({ "rows": rows, "failures": failures, "files": files });
    println!("{summary}");
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Run {
            config,
            preset: preset_name,
            seed,
            out,
            replicates,
            serial,
        } => {
            let (mut cfg, default_out) = match (&config, &preset_name) {
                (Some(path), _) => (ExperimentConfig::from_file(path)?, PathBuf::from("run")),
                (None, Some(name)) => (preset(name)?, PathBuf::from(name)),
                (None, None) => return Err(Error::Config("pass --config or --preset".into())),
            };
            if let Some(s) = seed {
                cfg.master_seed = s;
            }
            if let Some(r) = replicates {
                cfg.replicates = r;
            }
            if serial {
                cfg.parallel = false;
            }
            if let Some(o) = out {
                cfg.output = Some(o);
            }
            let prefix = cfg.output.clone().unwrap_or(default_out);
            cfg.output = Some(prefix.clone());
            let table = run_experiment(&cfg)?;
            write_results(&table, &prefix)?;
            report(&prefix, table.records.len(), table.failures());
        }
        Command::Ingest {
            csv,
            schema,
            estimators,
            train_sizes,
            replicates,
            seed,
            test_fraction,
            no_intercept,
            out,
        } => {
            let text = std::fs::read_to_string(&schema).map_err(|e| Error::Io {
                path: schema.clone(),
                source: e,
            })?;
            let schema: TrajectorySchema =
                serde_json::from_str(&text).map_err(|e| Error::Schema(e.to_string()))?;
            let cfg = IngestConfig {
                csv,
                schema,
                estimators,
                train_sizes,
                replicates,
                master_seed: seed,
                test_fraction,
                intercept: !no_intercept,
                ..IngestConfig::default()
            };
            let table = run_ingest(&cfg)?;
            write_results(&table, &out)?;
            let schema_path = output_path(&out, "schema.json");
            let echo = serde_json::to_string_pretty(&cfg.schema)? + "\n";
            std::fs::write(&schema_path, echo).map_err(|e| Error::Io {
                path: schema_path,
                source: e,
            })?;
            report(&out, table.records.len(), table.failures());
        }
        Command::ListPresets => {
            for name in PRESET_NAMES {
                println!("{name}");
            }
        }
    }
    Ok(())
}

fn fail(kind: &str, message: String) -> ExitCode {
    let body = serde_json::json!({ "error": { "kind": kind, "message": message } });
    eprintln!("{body}");
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.render().to_string()),
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), e.to_string()),
    }
}
