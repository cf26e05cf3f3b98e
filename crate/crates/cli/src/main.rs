use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use swqkd::runner::calibrate::{calibrate, CalibrationTarget};
use swqkd::runner::presets::PRESET_NAMES;
use swqkd::runner::sweep::write_csv;
use swqkd::runner::{
    preset, preset_by_name, run_sweep, ModelParams, RunManifest, Scenario, SweepKind, SweepSpec,
    DEFAULT_SYMBOLS,
};

#[derive(Parser)]
#[command(name = "swqkd", version, about = "Shortwave BB84 over few-mode access networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a parameter sweep and write one CSV row per point.
    Simulate(SimulateArgs),
    /// Fit free model parameters against a named target.
    Calibrate {
        #[arg(long)]
        target: CalibrationTarget,
        /// Starting parameter set; defaults to the shipped one.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Where to write the fitted parameters as TOML; stdout if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inspect the built-in scenarios.
    Presets {
        #[command(subcommand)]
        action: PresetAction,
    },
}

#[derive(Subcommand)]
enum PresetAction {
    List,
    /// Print a preset as a scenario TOML file.
    Show { scenario: String },
}

#[derive(Args)]
struct SimulateArgs {
    /// Preset number (1-5), preset name or scenario TOML file.
    #[arg(long, required_unless_present = "manifest")]
    scenario: Option<String>,
    /// Replay a manifest written by an earlier run.
    #[arg(long, conflicts_with_all = ["scenario", "sweep"])]
    manifest: Option<PathBuf>,
    #[arg(long, required_unless_present = "manifest")]
    sweep: Option<SweepKind>,
    #[arg(long, default_value_t = 0.0)]
    from: f64,
    #[arg(long, default_value_t = 0.0)]
    to: f64,
    #[arg(long, default_value_t = 1.0)]
    step: f64,
    #[arg(long, default_value_t = 1)]
    trials: u32,
    #[arg(long, default_value_t = DEFAULT_SYMBOLS)]
    symbols: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Force the classical overlay on.
    #[arg(long)]
    coexist: bool,
    /// Base OB in dB for sweeps over another variable.
    #[arg(long)]
    ob: Option<f64>,
    /// Base wavelength in nm.
    #[arg(long)]
    lambda: Option<f64>,
    /// Model parameter TOML used to build presets.
    #[arg(long)]
    params: Option<PathBuf>,
    /// CSV destination; stdout if absent. A manifest is written alongside.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_params(path: Option<&Path>) -> Result<ModelParams> {
    match path {
        None => Ok(ModelParams::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            ModelParams::from_toml(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn load_scenario(arg: &str, params: &ModelParams) -> Result<Scenario> {
    if let Some(s) = preset_by_name(arg, params) {
        return Ok(s);
    }
    let path = Path::new(arg);
    if !path.exists() {
        bail!("'{arg}' is neither a preset nor a scenario file");
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {arg}"))?;
    Scenario::from_toml(&text).with_context(|| format!("parsing {arg}"))
}

fn manifest_path(csv: &Path) -> PathBuf {
    csv.with_extension("manifest.toml")
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let manifest = if let Some(path) = &a.manifest {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        RunManifest::from_toml(&text)?
    } else {
        let params = load_params(a.params.as_deref())?;
        let scenario = load_scenario(a.scenario.as_deref().expect("clap"), &params)?;
        let coexist = a.coexist || scenario.coexist;
        let mut m = RunManifest::new(
            scenario,
            coexist,
            SweepSpec {
                kind: a.sweep.expect("clap"),
                from: a.from,
                to: a.to,
                step: a.step,
                trials: a.trials,
                symbols: a.symbols,
                seed: a.seed,
            },
        );
        if let Some(ob) = a.ob {
            m.base.ob_db = ob;
        }
        if let Some(l) = a.lambda {
            m.base.lambda_nm = l;
        }
        m
    };
    let rows = run_sweep(&manifest)?;
    let failed = rows.iter().filter(|r| r.report.error.is_some()).count();
    match &a.out {
        Some(path) => {
            let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
            write_csv(&rows, &manifest, std::io::BufWriter::new(f))?;
            fs::write(manifest_path(path), manifest.to_toml())?;
            eprintln!(
                "wrote {} rows to {} ({failed} failed)",
                rows.len(),
                path.display()
            );
        }
        None => write_csv(&rows, &manifest, std::io::stdout().lock())?,
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Calibrate { target, params, out } => {
            let start = load_params(params.as_deref())?;
            let c = calibrate(target, &start)?;
            for (name, got, want) in &c.achieved {
                eprintln!("{target}: {name} = {got:.4} (target {want})");
            }
            let text = c.params.to_toml();
            match out {
                Some(p) => fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
                None => std::io::stdout().write_all(text.as_bytes())?,
            }
            Ok(())
        }
        Command::Presets { action: PresetAction::List } => {
            let p = ModelParams::default();
            for (i, name) in PRESET_NAMES.iter().enumerate() {
                let s = preset(i + 1, &p).expect("preset");
                println!(
                    "{} {:<24} {:>5.2} km, nominal loss {:>5.1} dB{}",
                    i + 1,
                    name,
                    s.topology.total_span_km(),
                    s.topology.nominal_loss_db(),
                    if s.coexist { ", classical overlay" } else { "" }
                );
            }
            Ok(())
        }
        Command::Presets { action: PresetAction::Show { scenario } } => {
            let s = load_scenario(&scenario, &ModelParams::default())?;
            print!("{}", s.to_toml());
            Ok(())
        }
    }
}
