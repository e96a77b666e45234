use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use water4mu::evalx::reports_to_csv;
use water4mu::harness::config::{load_config, set_key};
use water4mu::harness::scenario::{run_scenario_in, ScenarioSpec};
use water4mu::harness::stages;
use water4mu::harness::sweep::sweep_lambda;
use water4mu::{Error, Result};

#[derive(Parser)]
#[command(name = "water4mu", version, about = "Watermark-assisted machine unlearning lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// INI config; missing keys take their defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides `[run] seed`.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, value_name = "DIR", default_value = "runs/default")]
    out: PathBuf,
    /// Only report errors.
    #[arg(long)]
    quiet: bool,
    /// Extra `section.key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset (with its forget split) as CSV.
    GenData(Common),
    /// Train the original classifier.
    Train(Common),
    /// Pre-train the watermark encoder/decoder.
    TrainWm(Common),
    /// Update the codec by bi-level optimization.
    Water4mu(Common),
    /// Choose the watermark message by bi-level optimization.
    SelectMessage(Common),
    /// Run the configured unlearning method.
    Unlearn(Common),
    /// Score the unlearned model and write the metrics CSV.
    Eval(Common),
    /// Run a whole scenario end to end.
    Scenario(Common),
    /// λ ablation of S2 + Water4MU.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated λ values.
        #[arg(long, value_delimiter = ',', default_values_t = [1e-4, 1e-3, 1e-2, 1e-1, 1.0])]
        lambdas: Vec<f64>,
        /// Worker threads (0 = all cores).
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
}

fn resolve(c: &Common) -> Result<ScenarioSpec> {
    let mut spec = match &c.config {
        Some(p) if !p.exists() => {
            return Err(Error::MissingArtifact {
                path: p.display().to_string(),
                hint: "pass an existing INI file to --config".into(),
            })
        }
        Some(p) => load_config(p)?,
        None => ScenarioSpec::default(),
    };
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Validation(format!("--set expects section.key=value, got {kv:?}")))?;
        set_key(&mut spec, k.trim(), v)?;
    }
    if let Some(seed) = c.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    Ok(spec)
}

fn say(c: &Common, msg: impl AsRef<str>) {
    if !c.quiet {
        println!("{}", msg.as_ref());
    }
}

fn wrote(c: &Common, p: &Path) {
    say(c, format!("wrote {}", p.display()));
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => wrote(&c, &stages::gen_data(&resolve(&c)?, &c.out)?),
        Command::Train(c) => wrote(&c, &stages::train(&resolve(&c)?, &c.out)?),
        Command::TrainWm(c) => wrote(&c, &stages::train_wm(&resolve(&c)?, &c.out)?),
        Command::Water4mu(c) => wrote(&c, &stages::water4mu(&resolve(&c)?, &c.out)?),
        Command::SelectMessage(c) => wrote(&c, &stages::select_message(&resolve(&c)?, &c.out)?),
        Command::Unlearn(c) => wrote(&c, &stages::unlearn(&resolve(&c)?, &c.out)?),
        Command::Eval(c) => {
            let r = stages::eval(&resolve(&c)?, &c.out)?;
            say(&c, reports_to_csv(&[r]).trim_end());
        }
        Command::Scenario(c) => {
            let rec = run_scenario_in(&resolve(&c)?, &c.out)?;
            say(&c, format!("config {}", rec.config_hash));
            say(&c, reports_to_csv(&[rec.report]).trim_end());
        }
        Command::Sweep {
            common: c,
            lambdas,
            threads,
        } => {
            let spec = resolve(&c)?;
            let reports = sweep_lambda(&lambdas, &spec, threads)?;
            fs::create_dir_all(&c.out)?;
            fs::write(
                c.out.join(water4mu::harness::scenario::RESOLVED_CONFIG),
                water4mu::harness::config::emit_config(&spec),
            )?;
            let csv = reports_to_csv(&reports);
            let p = c.out.join("sweep.csv");
            fs::write(&p, &csv)?;
            say(&c, csv.trim_end());
            wrote(&c, &p);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
