use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use deconfound::eval::{format_pct, read_grid_csv};
use deconfound::factor::{infer_z_sequence, FactorModelParams};
use deconfound::pipeline::{
    alignment_stage, forecast_stage, load_source, read_z_csv, run_pipeline, seed_dir, train_stage, write_json,
    write_report, write_z_csv, RunConfig, Source,
};
use deconfound::scm::{simulate_detailed, SimulationConfig};
use deconfound::{Error, Result};

/// Deconfounded time-series forecasting toolkit.
#[derive(Parser)]
#[command(name = "deconfound", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a panel. Accepts a run configuration or a bare simulation config.
    Simulate(Common),
    /// Train the factor model for every seed.
    TrainFactor(Common),
    /// Infer Ẑ from trained parameters; reports alignment on synthetic data.
    InferZ(Common),
    /// Run the forecast grid on previously inferred Ẑ; writes metrics.csv.
    Forecast(Common),
    /// Summarize an existing metrics.csv into the improvement report.
    Report {
        /// Run directory holding metrics.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Every stage end to end.
    Pipeline(Common),
}

fn read_config(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::InvalidConfig {
        field: "config".into(),
        reason: format!("cannot read {}: {e}", path.display()),
    })
}

fn load_run(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_json(&read_config(&c.config)?)?;
    if let Some(out) = &c.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = c.seed {
        cfg.seeds = vec![seed];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn simulate_cmd(c: &Common) -> Result<()> {
    let text = read_config(&c.config)?;
    let (sim, default_out, seeds) = match serde_json::from_str::<SimulationConfig>(&text) {
        Ok(sim) => {
            let seed = sim.seed;
            (sim, None, vec![seed])
        }
        Err(_) => {
            let cfg = RunConfig::from_json(&text)?;
            match cfg.source {
                Source::Simulation(sim) => (sim, Some(cfg.output_dir), cfg.seeds),
                Source::Manifest(_) => {
                    return Err(Error::InvalidConfig {
                        field: "source".into(),
                        reason: "simulate needs a simulation source".into(),
                    })
                }
            }
        }
    };
    let out = c
        .out
        .clone()
        .or(default_out)
        .ok_or_else(|| Error::InvalidConfig {
            field: "out".into(),
            reason: "pass --out for a bare simulation config".into(),
        })?;
    let seeds = c.seed.map_or(seeds, |s| vec![s]);
    for seed in seeds {
        let sim = SimulationConfig { seed, ..sim.clone() };
        sim.validate()?;
        let run = simulate_detailed(&sim)?;
        let dir = seed_dir(&out, seed);
        fs::create_dir_all(&dir)?;
        run.panel.write_csv(&dir.join("panel.csv"))?;
        write_json(&run.coefficients, &dir.join("coefficients.json"))?;
        write_json(&sim, &dir.join("simulation.json"))?;
        println!("seed {seed}: {} rows -> {}", run.panel.len(), dir.display());
    }
    Ok(())
}

fn train_cmd(c: &Common) -> Result<()> {
    let cfg = load_run(c)?;
    for &seed in &cfg.seeds {
        let (panel, _) = load_source(&cfg, seed)?;
        let (params, log) = train_stage(&cfg, &panel, seed)?;
        let dir = seed_dir(&cfg.output_dir, seed);
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("factor_params.json"), params.to_json()? + "\n")?;
        log.write_csv(&dir.join("training_log.csv"))?;
        write_json(&log, &dir.join("training_log.json"))?;
        let r2 = log.best().and_then(|e| e.mean_val_r2());
        println!(
            "seed {seed}: best epoch {} of {}, validation R² {}",
            log.best_epoch,
            log.epochs.len(),
            r2.map_or("undefined".to_string(), |v| format!("{v:.4}"))
        );
    }
    Ok(())
}

fn read_params(dir: &Path) -> Result<FactorModelParams> {
    FactorModelParams::from_json(&fs::read_to_string(dir.join("factor_params.json"))?)
}

fn infer_cmd(c: &Common) -> Result<()> {
    let cfg = load_run(c)?;
    for &seed in &cfg.seeds {
        let dir = seed_dir(&cfg.output_dir, seed);
        let (panel, _) = load_source(&cfg, seed)?;
        let params = read_params(&dir)?;
        let z = infer_z_sequence(&params, &panel)?;
        write_z_csv(&z, &dir.join("z_hat.csv"))?;
        match alignment_stage(&cfg, &panel, &z)? {
            Some((report, start)) => {
                write_json(&report, &dir.join("alignment.json"))?;
                let zh: Vec<f64> = (start..panel.len()).map(|t| z.get(t, 0)).collect();
                let zt = &panel.z_true().expect("alignment implies ground truth")[start..];
                deconfound::eval::write_alignment_csv(&report, zt, &zh, start, &dir.join("alignment.csv"))?;
                println!("seed {seed}: |r| = {:.4} on the test split", report.abs_r());
            }
            None => println!("seed {seed}: no ground truth; alignment skipped"),
        }
    }
    Ok(())
}

fn forecast_cmd(c: &Common) -> Result<()> {
    let cfg = load_run(c)?;
    let mut grid = Vec::new();
    for &seed in &cfg.seeds {
        let (panel, _) = load_source(&cfg, seed)?;
        let z = read_z_csv(&seed_dir(&cfg.output_dir, seed).join("z_hat.csv"))?;
        grid.extend(forecast_stage(&cfg, &panel, &z, seed)?);
    }
    fs::create_dir_all(&cfg.output_dir)?;
    let summary = write_report(&mut grid, &cfg.output_dir)?;
    print_summary(&summary);
    Ok(())
}

fn report_cmd(out: &Path) -> Result<()> {
    let mut grid = read_grid_csv(&out.join("metrics.csv"))?;
    let summary = write_report(&mut grid, out)?;
    print_summary(&summary);
    Ok(())
}

fn print_summary(rows: &[deconfound::eval::ImprovementRow]) {
    println!("pred_len  forecaster  mse_without  mse_with  improvement");
    for r in rows {
        println!(
            "{:>8}  {:<10}  {:>11.4}  {:>8.4}  {:>11}",
            r.pred_len,
            r.forecaster,
            r.mse_without.mean,
            r.mse_with.mean,
            format_pct(r.rel_mse_pct.mean)
        );
    }
}

fn pipeline_cmd(c: &Common) -> Result<()> {
    let cfg = load_run(c)?;
    let outcome = run_pipeline(&cfg)?;
    for run in &outcome.seeds {
        if let Some((report, _)) = &run.alignment {
            println!("seed {}: confounder |r| = {:.4}", run.seed, report.abs_r());
        }
    }
    print_summary(&outcome.improvement);
    println!("outputs in {}", cfg.output_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Simulate(c) => simulate_cmd(c),
        Command::TrainFactor(c) => train_cmd(c),
        Command::InferZ(c) => infer_cmd(c),
        Command::Forecast(c) => forecast_cmd(c),
        Command::Report { out } => report_cmd(out),
        Command::Pipeline(c) => pipeline_cmd(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
