//! End-to-end runs: data → split → factor model → Ẑ → forecast grid →
//! reports.
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! config.json            resolved run configuration
//! metrics.csv            pred_len,setting,forecaster,seed,mse,mae
//! improvement.json/.csv  with-vs-without summary over seeds
//! seed_<s>/panel.csv, factor_params.json, training_log.{csv,json},
//!          z_hat.csv, overlap.json,
//!          alignment.{json,csv}, coefficients.json   (synthetic only)
//! ```
//!
//! An `INCOMPLETE` file is present while a run is in flight and is left
//! behind, with the error, if it fails.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{
    affine_align, improvement_summary, write_alignment_csv, write_grid_csv, write_summary_csv, AlignmentReport,
    GridRow, ImprovementRow, Setting,
};
use crate::factor::{
    augment_panel, augment_with_truth, infer_z_sequence, train_factor_model, AugmentedPanel, FactorModelConfig,
    FactorModelParams, TrainingLog,
};
use crate::forecast::{
    build_windows, evaluate_forecaster, fit_forecaster, ForecasterSpec, PanelScaler, RecurrentSpec, RidgeSpec,
    WindowSpec,
};
use crate::ingest::{load_csv, DatasetManifest};
use crate::numerics::Tensor;
use crate::scm::{
    fmt_f64, overlap_diagnostic, simulate_detailed, split, LagCoefficients, OverlapReport, Panel, SimulationConfig,
    SplitSpec,
};

pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";
const OVERLAP_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Source {
    Simulation(SimulationConfig),
    Manifest(DatasetManifest),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowsConfig {
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    #[serde(default = "default_pred_lens")]
    pub pred_lens: Vec<usize>,
    /// Stride between training windows.
    #[serde(default = "one")]
    pub train_stride: usize,
    /// Stride between validation and test windows.
    #[serde(default = "one")]
    pub eval_stride: usize,
}

fn default_seq_len() -> usize {
    96
}

fn default_pred_lens() -> Vec<usize> {
    vec![12, 24, 36, 48]
}

fn one() -> usize {
    1
}

impl Default for WindowsConfig {
    fn default() -> Self {
        WindowsConfig {
            seq_len: default_seq_len(),
            pred_lens: default_pred_lens(),
            train_stride: 1,
            eval_stride: 1,
        }
    }
}

fn default_forecasters() -> Vec<ForecasterSpec> {
    vec![
        ForecasterSpec::Ridge(RidgeSpec::default()),
        ForecasterSpec::Recurrent(RecurrentSpec::default()),
    ]
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_true() -> bool {
    true
}

/// One JSON document describing a full run. Each seed drives the
/// simulation (synthetic sources), the factor model and the recurrent
/// forecaster; the `seed` fields inside the nested configs are overridden.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub source: Source,
    #[serde(default)]
    pub factor_model: FactorModelConfig,
    #[serde(default)]
    pub windows: WindowsConfig,
    #[serde(default = "default_forecasters")]
    pub forecasters: Vec<ForecasterSpec>,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Adds a grid row per cell using the simulator's true confounder.
    /// Ignored for observed data.
    #[serde(default = "default_true")]
    pub oracle: bool,
}

impl RunConfig {
    /// The default synthetic run.
    pub fn synthetic(output_dir: impl Into<PathBuf>) -> RunConfig {
        RunConfig {
            source: Source::Simulation(SimulationConfig::default()),
            factor_model: FactorModelConfig::default(),
            windows: WindowsConfig::default(),
            forecasters: default_forecasters(),
            split: SplitSpec::default(),
            seeds: default_seeds(),
            output_dir: output_dir.into(),
            oracle: true,
        }
    }

    pub fn from_json(s: &str) -> Result<RunConfig> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn from_json_file(path: &Path) -> Result<RunConfig> {
        RunConfig::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn is_synthetic(&self) -> bool {
        matches!(self.source, Source::Simulation(_))
    }

    pub fn with_seeds(&self, seeds: Vec<u64>) -> RunConfig {
        RunConfig {
            seeds,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(Error::config("seeds", "seeds must be distinct"));
        }
        if self.windows.pred_lens.is_empty() {
            return Err(Error::config("windows.pred_lens", "at least one pred_len is required"));
        }
        for &h in &self.windows.pred_lens {
            WindowSpec::new(self.windows.seq_len, h).validate()?;
        }
        if self.windows.train_stride == 0 || self.windows.eval_stride == 0 {
            return Err(Error::config("windows", "strides must be at least 1"));
        }
        if self.forecasters.is_empty() {
            return Err(Error::config("forecasters", "at least one forecaster is required"));
        }
        let mut names: Vec<&str> = self.forecasters.iter().map(ForecasterSpec::name).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.forecasters.len() {
            return Err(Error::config("forecasters", "each forecaster kind may appear once"));
        }
        for f in &self.forecasters {
            f.validate()?;
        }
        self.factor_model.validate()?;
        self.split.validate()?;
        match &self.source {
            Source::Simulation(sim) => sim.validate(),
            Source::Manifest(m) => m.validate(),
        }
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name,
        source: Box::new(e),
    })
}

/// The panel for `seed`, plus the generator coefficients when simulated.
pub fn load_source(cfg: &RunConfig, seed: u64) -> Result<(Panel, Option<LagCoefficients>)> {
    match &cfg.source {
        Source::Simulation(sim) => {
            let sim = SimulationConfig { seed, ..sim.clone() };
            let out = stage("simulate", simulate_detailed(&sim))?;
            Ok((out.panel, Some(out.coefficients)))
        }
        Source::Manifest(m) => Ok((stage("load", load_csv(m))?, None)),
    }
}

pub fn train_stage(cfg: &RunConfig, panel: &Panel, seed: u64) -> Result<(FactorModelParams, TrainingLog)> {
    let (train, val, _) = stage("split", split(panel, &cfg.split))?;
    let fm = FactorModelConfig {
        seed,
        ..cfg.factor_model.clone()
    };
    stage("train_factor", train_factor_model(&train, &val, &fm))
}

/// Affine alignment of the first Ẑ column against `z_true` on the test
/// segment.
pub fn alignment_stage(cfg: &RunConfig, panel: &Panel, z_hat: &Tensor) -> Result<Option<(AlignmentReport, usize)>> {
    let Some(z_true) = panel.z_true() else {
        return Ok(None);
    };
    let (n_tr, n_va, _) = stage("split", cfg.split.lengths(panel.len()))?;
    let start = n_tr + n_va;
    let zh: Vec<f64> = (start..panel.len()).map(|t| z_hat.get(t, 0)).collect();
    let report = stage("align", affine_align(&zh, &z_true[start..]))?;
    Ok(Some((report, start)))
}

/// Fits and scores every (pred_len, setting, forecaster) cell for one seed.
pub fn forecast_stage(cfg: &RunConfig, panel: &Panel, z_hat: &Tensor, seed: u64) -> Result<Vec<GridRow>> {
    let (n_tr, n_va, _) = stage("split", cfg.split.lengths(panel.len()))?;
    let learned = stage("augment", augment_panel(panel, z_hat))?;
    let mut variants: Vec<(AugmentedPanel, &[Setting])> = vec![(learned, &[Setting::Without, Setting::With])];
    if cfg.oracle && panel.is_synthetic() {
        variants.push((stage("augment", augment_with_truth(panel))?, &[Setting::Oracle]));
    }

    let mut rows = Vec::new();
    for (aug, settings) in variants {
        let scaled = stage("forecast", PanelScaler::fit(&aug.slice(0, n_tr)).apply(&aug))?;
        let segments = [
            scaled.slice(0, n_tr),
            scaled.slice(n_tr, n_tr + n_va),
            scaled.slice(n_tr + n_va, scaled.len()),
        ];
        for &pred_len in &cfg.windows.pred_lens {
            let spec = WindowSpec::new(cfg.windows.seq_len, pred_len);
            let train_spec = spec.with_stride(cfg.windows.train_stride);
            let eval_spec = spec.with_stride(cfg.windows.eval_stride);
            for &setting in settings {
                let with = setting != Setting::Without;
                let windows = (|| -> Result<_> {
                    Ok((
                        build_windows(&segments[0], &train_spec, with, "train")?,
                        build_windows(&segments[1], &eval_spec, with, "val")?,
                        build_windows(&segments[2], &eval_spec, with, "test")?,
                    ))
                })();
                let (train, val, test) = stage("windows", windows)?;
                for spec in &cfg.forecasters {
                    let spec = spec.with_seed(seed);
                    let model = stage("forecast", fit_forecaster(&spec, &train, &val))?;
                    let m = stage("forecast", evaluate_forecaster(&model, &test))?;
                    rows.push(GridRow {
                        pred_len,
                        setting,
                        forecaster: spec.name().to_string(),
                        seed,
                        mse: m.mse,
                        mae: m.mae,
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// Everything one seed produces.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub panel: Panel,
    pub coefficients: Option<LagCoefficients>,
    pub params: FactorModelParams,
    pub log: TrainingLog,
    pub z_hat: Tensor,
    pub alignment: Option<(AlignmentReport, usize)>,
    pub overlap: OverlapReport,
    pub grid: Vec<GridRow>,
}

pub fn run_seed(cfg: &RunConfig, seed: u64) -> Result<SeedRun> {
    let (panel, coefficients) = load_source(cfg, seed)?;
    let overlap = overlap_diagnostic(&panel, OVERLAP_BINS);
    let (params, log) = train_stage(cfg, &panel, seed)?;
    let z_hat = stage("infer_z", infer_z_sequence(&params, &panel))?;
    let alignment = alignment_stage(cfg, &panel, &z_hat)?;
    let grid = forecast_stage(cfg, &panel, &z_hat, seed)?;
    Ok(SeedRun {
        seed,
        panel,
        coefficients,
        params,
        log,
        z_hat,
        alignment,
        overlap,
        grid,
    })
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// `t,z_hat_1..z_hat_d`
pub fn write_z_csv(z: &Tensor, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header: Vec<String> = (1..=z.cols()).map(|j| format!("z_hat_{j}")).collect();
    writeln!(w, "t,{}", header.join(","))?;
    for t in 0..z.rows() {
        let cells: Vec<String> = z.row(t).iter().map(|v| fmt_f64(*v)).collect();
        writeln!(w, "{t},{}", cells.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_z_csv`].
pub fn read_z_csv(path: &Path) -> Result<Tensor> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let d = headers.len().saturating_sub(1);
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = (1..=d)
            .map(|c| {
                let cell = rec.get(c).unwrap_or("");
                cell.parse::<f64>().map_err(|_| Error::NonNumeric {
                    row: i + 1,
                    column: headers[c].clone(),
                    value: cell.to_string(),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    Tensor::from_rows(&rows)
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

pub fn write_seed_run(run: &SeedRun, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    run.panel.write_csv(&dir.join("panel.csv"))?;
    if let Some(c) = &run.coefficients {
        write_json(c, &dir.join("coefficients.json"))?;
    }
    fs::write(dir.join("factor_params.json"), run.params.to_json()? + "\n")?;
    run.log.write_csv(&dir.join("training_log.csv"))?;
    write_json(&run.log, &dir.join("training_log.json"))?;
    write_z_csv(&run.z_hat, &dir.join("z_hat.csv"))?;
    write_json(&run.overlap, &dir.join("overlap.json"))?;
    if let (Some((report, start)), Some(z_true)) = (&run.alignment, run.panel.z_true()) {
        write_json(report, &dir.join("alignment.json"))?;
        let zh: Vec<f64> = (*start..run.panel.len()).map(|t| run.z_hat.get(t, 0)).collect();
        write_alignment_csv(report, &z_true[*start..], &zh, *start, &dir.join("alignment.csv"))?;
    }
    Ok(())
}

/// Sorts the grid, writes `metrics.csv` and the improvement summary.
pub fn write_report(grid: &mut [GridRow], out: &Path) -> Result<Vec<ImprovementRow>> {
    grid.sort_by(|a, b| {
        (a.pred_len, a.setting, &a.forecaster, a.seed).cmp(&(b.pred_len, b.setting, &b.forecaster, b.seed))
    });
    write_grid_csv(grid, &out.join("metrics.csv"))?;
    let summary = improvement_summary(grid)?;
    write_json(&summary, &out.join("improvement.json"))?;
    write_summary_csv(&summary, &out.join("improvement.csv"))?;
    Ok(summary)
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub grid: Vec<GridRow>,
    pub improvement: Vec<ImprovementRow>,
    pub seeds: Vec<SeedRun>,
}

/// Runs every seed and writes all reports. Deterministic in `cfg`.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineOutcome> {
    stage("config", cfg.validate())?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    let marker = out.join(INCOMPLETE_MARKER);
    fs::write(&marker, "run in progress\n")?;

    let result = (|| -> Result<PipelineOutcome> {
        write_json(cfg, &out.join("config.json"))?;
        let mut seeds = Vec::new();
        let mut grid = Vec::new();
        for &seed in &cfg.seeds {
            let run = run_seed(cfg, seed)?;
            stage("write", write_seed_run(&run, &seed_dir(out, seed)))?;
            grid.extend(run.grid.iter().cloned());
            seeds.push(run);
        }
        let improvement = stage("report", write_report(&mut grid, out))?;
        Ok(PipelineOutcome {
            grid,
            improvement,
            seeds,
        })
    })();

    match result {
        Ok(outcome) => {
            fs::remove_file(&marker)?;
            Ok(outcome)
        }
        Err(e) => {
            // Best effort: the original error matters more than this write.
            let _ = fs::write(&marker, format!("run failed: {e}\n"));
            Err(e)
        }
    }
}
