use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use bh_depletion::experiments::{parse_assignment, run, validate_config, ExperimentSpec, Preset};

/// Runs a named preset of the dissipative Bose-Hubbard simulator and writes
/// a manifest, CSV tables and a JSON summary.
#[derive(Debug, Parser)]
#[command(name = "bh-depletion", version)]
struct Cli {
    /// Preset name; may be omitted when the config file names one.
    #[arg(long, value_parser = |s: &str| s.parse::<Preset>())]
    preset: Option<Preset>,
    /// Flat TOML config file (schema_version, preset, parameters).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Parameter override `key=value`; repeatable, wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses all cores. Outputs do not depend on it.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Multiplier on ensemble sizes.
    #[arg(long = "traj-scale")]
    traj_scale: Option<f64>,
    /// List presets and exit.
    #[arg(long)]
    list: bool,
}

fn build_spec(cli: &Cli) -> Result<ExperimentSpec, Vec<String>> {
    let mut spec = match &cli.config {
        Some(path) => {
            let raw = std::fs::read_to_string(path).map_err(|e| vec![format!("{}: {e}", path.display())])?;
            let spec = validate_config(&raw).map_err(|errs| errs.iter().map(|e| e.to_string()).collect::<Vec<_>>())?;
            if cli.preset.is_some_and(|p| p != spec.preset) {
                return Err(vec![format!(
                    "--preset {} conflicts with preset {} in {}",
                    cli.preset.expect("checked"),
                    spec.preset,
                    path.display()
                )]);
            }
            spec
        }
        None => match cli.preset {
            Some(p) => ExperimentSpec::new(p),
            None => return Err(vec!["either --preset or --config is required".into()]),
        },
    };
    let mut errors = Vec::new();
    for assignment in &cli.set {
        match parse_assignment(assignment) {
            Ok((k, v)) => {
                spec.overrides.insert(k, v);
            }
            Err(e) => errors.push(e),
        }
    }
    if let Some(seed) = cli.seed {
        spec.root_seed = seed;
    }
    if let Some(out) = &cli.out {
        spec.output_dir = out.clone();
    }
    if let Some(scale) = cli.traj_scale {
        spec.traj_scale = scale;
    }
    if let Err(errs) = spec.resolve() {
        errors.extend(errs.iter().map(|e| e.to_string()));
    }
    if errors.is_empty() {
        Ok(spec)
    } else {
        Err(errors)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if cli.list {
        for p in Preset::ALL {
            println!("{p}");
        }
        return ExitCode::SUCCESS;
    }
    let spec = match build_spec(&cli) {
        Ok(s) => s,
        Err(errors) => {
            for e in errors {
                eprintln!("error: {e}");
            }
            return ExitCode::from(2);
        }
    };
    match run(&spec, cli.workers) {
        Ok(report) => {
            for f in &report.files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
