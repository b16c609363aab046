//! Command implementations behind the `uop` binary.

use std::fs::{self, File};
use std::io::{self, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;
use uop::scaling::{
    builtin_model, fit_polynomial, read_samples_csv, render_builtin_table, DelaySample, Direction,
    Mode, ModelError, PolyModel, ResourceKind, ScalingScenario,
};
use uop::scenario::{run_scenario, ScenarioConfig, ScenarioError};
use uop::sim::{CloudConfig, CloudSim, SimError, VmSpec};
use uop::{predict_delay, squared_error};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  scenario invariant violated, or another runtime failure
  2  malformed input: CSV, config file or flags
  3  model fit underdetermined or degenerate
  4  unsupported operation (disk downscaling)";

#[derive(Debug, Parser)]
#[command(name = "uop", version, about = "Offloading protocol scenarios and resize-delay models", after_help = EXIT_CODES)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a polynomial delay model to an `x,t_seconds` CSV.
    Fit {
        csv: PathBuf,
        #[arg(long, default_value_t = 2)]
        order: usize,
        /// Where to write the model; defaults to the CSV path with a `.model`
        /// extension.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Print the predicted delay in seconds for one scenario.
    Predict {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long)]
        x: f64,
        /// Use a fitted model file instead of the built-in table.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Simulate repeated resizes per x and report mean delay as CSV.
    Sweep {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value_t = 1)]
        from: u32,
        #[arg(long, default_value_t = 20)]
        to: u32,
        #[arg(long, default_value_t = 60)]
        reps: usize,
        /// Gaussian noise standard deviation, seconds.
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Append a trailing moving average (window 3) of the mean.
        #[arg(long)]
        ma3: bool,
    },
    /// Run an end-to-end offload scenario from a config file.
    Scenario { config: PathBuf },
    /// Print the built-in coefficient table as CSV.
    Table,
}

#[derive(Debug, Clone, Copy, Args)]
pub struct ScenarioArgs {
    #[arg(long)]
    pub kind: ResourceKind,
    #[arg(long = "dir")]
    pub direction: Direction,
    #[arg(long)]
    pub mode: Mode,
}

impl ScenarioArgs {
    fn scenario(&self) -> ScalingScenario {
        ScalingScenario::new(self.kind, self.direction, self.mode)
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Model(ModelError),
    #[error("{0}")]
    Sim(SimError),
    #[error("scenario failed")]
    ScenarioFailed,
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Model(ModelError::Underdetermined { .. } | ModelError::Degenerate { .. }) => 3,
            CliError::Model(ModelError::UnsupportedScenario(_)) => 4,
            CliError::Model(_) => 2,
            CliError::Sim(SimError::UnsupportedOperation(_)) => 4,
            CliError::Sim(_) | CliError::ScenarioFailed | CliError::Io(_) => 1,
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Model(e)
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Model(m) => CliError::Model(m),
            other => CliError::Sim(other),
        }
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Config { .. } | ScenarioError::Invalid(_) => CliError::Input(e.to_string()),
            ScenarioError::Io(e) => CliError::Io(e),
            ScenarioError::Sim(e) => e.into(),
            ScenarioError::Transport(e) => CliError::Input(format!("scenario transport: {e}")),
        }
    }
}

/// Formats a coefficient rounded to 10 decimals, without trailing zeros.
pub fn format_coefficient(v: f64) -> String {
    let s = format!("{v:.10}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    match s {
        "-0" | "" => "0".to_string(),
        s => s.to_string(),
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Fit { csv, order, model } => cmd_fit(csv, order, model, out),
        Command::Predict { scenario, x, model } => cmd_predict(scenario.scenario(), x, model, out),
        Command::Sweep {
            scenario,
            from,
            to,
            reps,
            sigma,
            seed,
            ma3,
        } => {
            let sweep = Sweep {
                scenario: scenario.scenario(),
                from,
                to,
                reps,
                sigma,
                seed,
                ma3,
            };
            out.write_all(sweep.run()?.as_bytes())?;
            Ok(())
        }
        Command::Scenario { config } => {
            let cfg = ScenarioConfig::load(&config)?;
            let report = run_scenario(&cfg)?;
            writeln!(out, "{report}")?;
            if report.passed() {
                Ok(())
            } else {
                Err(CliError::ScenarioFailed)
            }
        }
        Command::Table => {
            out.write_all(render_builtin_table().as_bytes())?;
            Ok(())
        }
    }
}

fn cmd_fit(
    csv: PathBuf,
    order: usize,
    model_path: Option<PathBuf>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let file = File::open(&csv)
        .map_err(|e| CliError::Input(format!("cannot open {}: {e}", csv.display())))?;
    let samples = read_samples_csv(file)?;
    let model = fit_polynomial(&samples, order)?;
    let error = squared_error(&model, &samples);
    let mut line: Vec<String> = model
        .coefficients()
        .iter()
        .enumerate()
        .map(|(j, w)| format!("w{j}={}", format_coefficient(*w)))
        .collect();
    line.push(format!("E={}", format_coefficient(error)));
    writeln!(out, "{}", line.join(" "))?;
    let path = model_path.unwrap_or_else(|| csv.with_extension("model"));
    fs::write(&path, model.to_text())?;
    Ok(())
}

fn cmd_predict(
    scenario: ScalingScenario,
    x: f64,
    model_path: Option<PathBuf>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let model = match model_path {
        Some(path) => PolyModel::from_text(&fs::read_to_string(&path)?)?,
        None => builtin_model(scenario)?,
    };
    writeln!(out, "{:.4}", predict_delay(&model, x))?;
    Ok(())
}

/// A resize-delay sweep over `from..=to`.
#[derive(Debug, Clone, Copy)]
pub struct Sweep {
    pub scenario: ScalingScenario,
    pub from: u32,
    pub to: u32,
    pub reps: usize,
    pub sigma: f64,
    pub seed: u64,
    pub ma3: bool,
}

/// Per-x statistics of one sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub x: u32,
    pub mean: f64,
    pub stderr: f64,
}

impl Sweep {
    /// The VM spec before and after one resize at `x`.
    fn specs(&self, x: u32) -> Result<(VmSpec, VmSpec), CliError> {
        let (before, after) = match (self.scenario.direction, self.scenario.mode) {
            (Direction::Up, Mode::Continuous) => (x, x + 1),
            (Direction::Down, Mode::Continuous) => (x, x.checked_sub(1).unwrap_or(0)),
            (Direction::Up, Mode::NonContinuous) => (1, 1 + x),
            (Direction::Down, Mode::NonContinuous) => (1 + x, 1),
        };
        if before == 0 || after == 0 {
            return Err(CliError::Input(format!(
                "x = {x} would size the VM to zero in {}",
                self.scenario
            )));
        }
        let mut from = VmSpec::new(1, 1, 1);
        let mut to = from;
        match self.scenario.kind {
            ResourceKind::Cpu => (from.vcpus, to.vcpus) = (before, after),
            ResourceKind::Ram => (from.ram_gb, to.ram_gb) = (before, after),
            ResourceKind::Disk => (from.disk_gb, to.disk_gb) = (before, after),
        }
        Ok((from, to))
    }

    /// Simulates every resize, returning per-x rows and all raw samples.
    pub fn simulate(&self) -> Result<(Vec<SweepRow>, Vec<DelaySample>), CliError> {
        if !self.scenario.is_supported() {
            return Err(ModelError::UnsupportedScenario(self.scenario).into());
        }
        if self.reps == 0 {
            return Err(CliError::Input("reps must be >= 1".into()));
        }
        if self.from > self.to {
            return Err(CliError::Input("from must not exceed to".into()));
        }
        let mut sim = CloudSim::new(CloudConfig {
            noise_sigma: self.sigma,
            rng_seed: self.seed,
            ..CloudConfig::default()
        })?;
        let mut rows = Vec::new();
        let mut samples = Vec::new();
        for x in self.from..=self.to {
            let (from, to) = self.specs(x)?;
            let mut delays = Vec::with_capacity(self.reps);
            for _ in 0..self.reps {
                let (vm, _) = sim.create_vm(from)?;
                sim.run_until_idle();
                let delay = sim.resize_vm(vm, to, self.scenario.mode)?;
                sim.run_until_idle();
                sim.terminate_vm(vm)?;
                delays.push(delay);
                samples.push(DelaySample::new(x as f64, delay)?);
            }
            let (mean, stderr) = mean_and_stderr(&delays);
            rows.push(SweepRow { x, mean, stderr });
        }
        Ok((rows, samples))
    }

    /// Renders the sweep CSV with its refit footer.
    pub fn run(&self) -> Result<String, CliError> {
        let (rows, samples) = self.simulate()?;
        let mut s = String::from("x,mean_s,stderr_s");
        if self.ma3 {
            s.push_str(",ma3_s");
        }
        s.push('\n');
        for (i, row) in rows.iter().enumerate() {
            s.push_str(&format!("{},{:.4},{:.4}", row.x, row.mean, row.stderr));
            if self.ma3 {
                let window = &rows[i.saturating_sub(2)..=i];
                let ma = window.iter().map(|r| r.mean).sum::<f64>() / window.len() as f64;
                s.push_str(&format!(",{ma:.4}"));
            }
            s.push('\n');
        }
        match fit_polynomial(&samples, 2) {
            Ok(m) => s.push_str(&format!(
                "# refit w2={} w1={} w0={}\n",
                format_coefficient(m.coefficient(2)),
                format_coefficient(m.coefficient(1)),
                format_coefficient(m.coefficient(0))
            )),
            Err(e) => s.push_str(&format!("# refit skipped: {e}\n")),
        }
        Ok(s)
    }
}

/// Mean as `first + Σ(v − first)/n` so identical values reproduce exactly;
/// standard error of the mean from the sample standard deviation.
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let first = values[0];
    let mean = first + values.iter().map(|v| v - first).sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
