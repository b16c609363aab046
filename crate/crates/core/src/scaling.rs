//! Polynomial delay models for vertical scaling.
//!
//! A model of order `M` predicts the resize delay in seconds for a resource
//! amount `x` as `y(x) = w0 + w1 x + ... + wM x^M`. Models are fitted by
//! linear least squares, minimising `E(W) = sum_n (y(x_n, W) - t_n)^2`.
//!
//! The fit uses a Householder QR factorisation of the Vandermonde design
//! matrix. The columns are scaled by powers of `max |x|` first, which keeps
//! the factorisation well conditioned for the small orders used here.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use thiserror::Error;

/// Order used everywhere unless a caller asks for something else.
pub const DEFAULT_ORDER: usize = 2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("need at least {needed} samples for order {order}, got {got}")]
    Underdetermined {
        order: usize,
        needed: usize,
        got: usize,
    },
    #[error("design matrix is rank deficient ({distinct} distinct x values for order {order})")]
    Degenerate { order: usize, distinct: usize },
    #[error("unsupported scaling scenario {0}: disk downscaling is not supported")]
    UnsupportedScenario(ScalingScenario),
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid scenario component {0:?}")]
    InvalidScenario(String),
    #[error("malformed csv: {0}")]
    Csv(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<csv::Error> for ModelError {
    fn from(e: csv::Error) -> Self {
        ModelError::Csv(e.to_string())
    }
}

/// One observation: `t` seconds of delay at resource amount `x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelaySample {
    pub x: f64,
    pub t: f64,
}

impl DelaySample {
    pub fn new(x: f64, t: f64) -> Result<Self, ModelError> {
        if !(x.is_finite() && t.is_finite() && x >= 0.0 && t >= 0.0) {
            return Err(ModelError::InvalidSample(format!("x={x} t={t}")));
        }
        Ok(DelaySample { x, t })
    }
}

/// Polynomial with coefficients `w0..wM` in ascending powers of `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyModel {
    coefficients: Vec<f64>,
}

impl PolyModel {
    pub fn new(coefficients: Vec<f64>) -> Result<Self, ModelError> {
        if coefficients.is_empty() {
            return Err(ModelError::InvalidModel("no coefficients".into()));
        }
        if let Some(w) = coefficients.iter().find(|w| !w.is_finite()) {
            return Err(ModelError::InvalidModel(format!("non-finite coefficient {w}")));
        }
        Ok(PolyModel { coefficients })
    }

    /// Builds a second-order model from `(w2, w1, w0)`, the order in which
    /// the published coefficient table lists them.
    pub fn quadratic(w2: f64, w1: f64, w0: f64) -> Result<Self, ModelError> {
        PolyModel::new(vec![w0, w1, w2])
    }

    pub fn order(&self) -> usize {
        self.coefficients.len() - 1
    }

    /// `w0..wM`.
    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn coefficient(&self, power: usize) -> f64 {
        self.coefficients.get(power).copied().unwrap_or(0.0)
    }

    /// Evaluates the polynomial at `x` by Horner's rule.
    pub fn eval(&self, x: f64) -> f64 {
        self.coefficients
            .iter()
            .rev()
            .fold(0.0, |acc, &w| acc * x + w)
    }

    /// Writes the plain-text model format: `order=M` followed by `wj=` lines.
    pub fn to_text(&self) -> String {
        let mut out = format!("order={}\n", self.order());
        for (j, w) in self.coefficients.iter().enumerate() {
            out.push_str(&format!("w{j}={w:?}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, ModelError> {
        let bad = |msg: String| ModelError::InvalidModel(msg);
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let order: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("order="))
            .ok_or_else(|| bad("missing order= line".into()))?
            .trim()
            .parse()
            .map_err(|e| bad(format!("order: {e}")))?;
        let mut coefficients = Vec::with_capacity(order + 1);
        for (j, line) in lines.enumerate() {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected wj=value, got {line:?}")))?;
            if key.trim() != format!("w{j}") {
                return Err(bad(format!("expected w{j}, got {key:?}")));
            }
            coefficients.push(
                value
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| bad(format!("{key}: {e}")))?,
            );
        }
        if coefficients.len() != order + 1 {
            return Err(bad(format!(
                "order {order} needs {} coefficients, found {}",
                order + 1,
                coefficients.len()
            )));
        }
        PolyModel::new(coefficients)
    }
}

/// `sum_j w_j x^j`.
pub fn predict_delay(model: &PolyModel, x: f64) -> f64 {
    model.eval(x)
}

/// Sum of squared residuals of `model` over `samples`.
pub fn squared_error(model: &PolyModel, samples: &[DelaySample]) -> f64 {
    samples
        .iter()
        .map(|s| {
            let r = model.eval(s.x) - s.t;
            r * r
        })
        .sum()
}

/// Least-squares polynomial fit of the given order.
pub fn fit_polynomial(samples: &[DelaySample], order: usize) -> Result<PolyModel, ModelError> {
    let cols = order + 1;
    let rows = samples.len();
    if rows < cols {
        return Err(ModelError::Underdetermined {
            order,
            needed: cols,
            got: rows,
        });
    }
    let distinct = count_distinct(samples.iter().map(|s| s.x));
    if distinct < cols {
        return Err(ModelError::Degenerate { order, distinct });
    }

    let scale = samples
        .iter()
        .map(|s| s.x.abs())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);

    // Column-major design matrix in the scaled variable u = x / scale.
    let mut a: Vec<Vec<f64>> = (0..cols)
        .map(|j| {
            samples
                .iter()
                .map(|s| (s.x / scale).powi(j as i32))
                .collect()
        })
        .collect();
    let mut b: Vec<f64> = samples.iter().map(|s| s.t).collect();

    let mut diag = vec![0.0; cols];
    for k in 0..cols {
        let norm = a[k][k..].iter().map(|v| v * v).sum::<f64>().sqrt();
        let col_scale = a[k].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= col_scale * 1e-13 {
            return Err(ModelError::Degenerate { order, distinct });
        }
        let alpha = if a[k][k] > 0.0 { -norm } else { norm };
        // Householder vector v = a_k[k..] - alpha e_1, kept in place.
        a[k][k] -= alpha;
        let vnorm2: f64 = a[k][k..].iter().map(|v| v * v).sum();
        let (head, tail) = a.split_at_mut(k + 1);
        let v = &head[k][k..];
        for col in tail.iter_mut() {
            let dot: f64 = v.iter().zip(&col[k..]).map(|(p, q)| p * q).sum();
            let f = 2.0 * dot / vnorm2;
            for (c, p) in col[k..].iter_mut().zip(v) {
                *c -= f * p;
            }
        }
        let dot: f64 = v.iter().zip(&b[k..]).map(|(p, q)| p * q).sum();
        let f = 2.0 * dot / vnorm2;
        for (c, p) in b[k..].iter_mut().zip(v) {
            *c -= f * p;
        }
        diag[k] = alpha;
    }

    // Back substitution on R u = Q^T b; R's diagonal lives in `diag`, the
    // strict upper triangle in a[j][i] for i < j.
    let mut scaled = vec![0.0; cols];
    for i in (0..cols).rev() {
        let mut acc = b[i];
        for j in i + 1..cols {
            acc -= a[j][i] * scaled[j];
        }
        scaled[i] = acc / diag[i];
    }

    let coefficients = scaled
        .iter()
        .enumerate()
        .map(|(j, w)| w / scale.powi(j as i32))
        .collect();
    PolyModel::new(coefficients)
}

fn count_distinct(xs: impl Iterator<Item = f64>) -> usize {
    let mut v: Vec<f64> = xs.collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v.len()
}

// ---------------------------------------------------------------------------
// Scenarios and the built-in coefficient table

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ResourceKind {
    Cpu,
    Ram,
    Disk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Up,
    Down,
}

/// Continuous scaling changes a resource by exactly one unit per step;
/// non-continuous scaling applies a larger delta in one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    Continuous,
    NonContinuous,
}

impl ResourceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ResourceKind::Cpu => "cpu",
            ResourceKind::Ram => "ram",
            ResourceKind::Disk => "disk",
        }
    }
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Up => "up",
            Direction::Down => "down",
        }
    }
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Continuous => "continuous",
            Mode::NonContinuous => "non-continuous",
        }
    }
}

impl FromStr for ResourceKind {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cpu" | "vcpu" => Ok(ResourceKind::Cpu),
            "ram" | "mem" | "memory" => Ok(ResourceKind::Ram),
            "disk" | "storage" => Ok(ResourceKind::Disk),
            _ => Err(ModelError::InvalidScenario(s.to_string())),
        }
    }
}

impl FromStr for Direction {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "up" => Ok(Direction::Up),
            "down" => Ok(Direction::Down),
            _ => Err(ModelError::InvalidScenario(s.to_string())),
        }
    }
}

impl FromStr for Mode {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "continuous" | "cont" => Ok(Mode::Continuous),
            "non-continuous" | "noncontinuous" | "noncont" => Ok(Mode::NonContinuous),
            _ => Err(ModelError::InvalidScenario(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ScalingScenario {
    pub kind: ResourceKind,
    pub direction: Direction,
    pub mode: Mode,
}

impl ScalingScenario {
    pub const fn new(kind: ResourceKind, direction: Direction, mode: Mode) -> Self {
        ScalingScenario {
            kind,
            direction,
            mode,
        }
    }

    pub fn is_supported(&self) -> bool {
        !(self.kind == ResourceKind::Disk && self.direction == Direction::Down)
    }
}

impl fmt::Display for ScalingScenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{}",
            self.kind.as_str(),
            self.direction.as_str(),
            self.mode.as_str()
        )
    }
}

/// One row of the built-in table, coefficients kept as published text.
#[derive(Debug, Clone, Copy)]
pub struct TableRow {
    pub scenario: ScalingScenario,
    pub w2: &'static str,
    pub w1: &'static str,
    pub w0: &'static str,
}

impl TableRow {
    pub fn model(&self) -> PolyModel {
        let parse = |s: &str| s.parse::<f64>().expect("table literal");
        PolyModel::quadratic(parse(self.w2), parse(self.w1), parse(self.w0))
            .expect("finite table literal")
    }
}

const fn row(
    kind: ResourceKind,
    direction: Direction,
    mode: Mode,
    w2: &'static str,
    w1: &'static str,
    w0: &'static str,
) -> TableRow {
    TableRow {
        scenario: ScalingScenario::new(kind, direction, mode),
        w2,
        w1,
        w0,
    }
}

use Direction::{Down, Up};
use Mode::{Continuous, NonContinuous};
use ResourceKind::{Cpu, Disk, Ram};

/// Measured second-order coefficients for the ten supported scenarios.
pub const BUILTIN_TABLE: [TableRow; 10] = [
    row(Cpu, Up, Continuous, "0.0109", "0.2013", "50.2"),
    row(Cpu, Up, NonContinuous, "-0.0002161", "0.05584", "49.32"),
    row(Cpu, Down, Continuous, "0.01358", "0.3637", "51.61"),
    row(Cpu, Down, NonContinuous, "0.0003889", "0.04552", "66.85"),
    row(Disk, Up, Continuous, "-1.159e-05", "0.1038", "46.92"),
    row(Disk, Up, NonContinuous, "2.837e-05", "0.008834", "47.05"),
    row(Ram, Up, Continuous, "-0.002184", "0.04266", "49.07"),
    row(Ram, Up, NonContinuous, "0.007889", "0.1701", "50.31"),
    row(Ram, Down, Continuous, "0.1402", "2.375", "56.91"),
    row(Ram, Down, NonContinuous, "0.03394", "0.6107", "53.26"),
];

pub fn builtin_model(scenario: ScalingScenario) -> Result<PolyModel, ModelError> {
    BUILTIN_TABLE
        .iter()
        .find(|r| r.scenario == scenario)
        .map(TableRow::model)
        .ok_or(ModelError::UnsupportedScenario(scenario))
}

/// The coefficient table as CSV with a `kind,direction,mode,w2,w1,w0` header.
pub fn render_builtin_table() -> String {
    let mut out = String::from("kind,direction,mode,w2,w1,w0\n");
    for r in &BUILTIN_TABLE {
        out.push_str(&format!("{},{},{},{}\n", r.scenario, r.w2, r.w1, r.w0));
    }
    out
}

// ---------------------------------------------------------------------------
// Sample CSV (`x,t_seconds`)

pub const SAMPLE_CSV_HEADER: [&str; 2] = ["x", "t_seconds"];

pub fn read_samples_csv(reader: impl Read) -> Result<Vec<DelaySample>, ModelError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != SAMPLE_CSV_HEADER {
        return Err(ModelError::Csv(format!(
            "expected header x,t_seconds, got {}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut samples = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        if record.len() != 2 {
            return Err(ModelError::Csv(format!("row {}: expected 2 fields", i + 1)));
        }
        let field = |k: usize| {
            record[k]
                .parse::<f64>()
                .map_err(|e| ModelError::Csv(format!("row {}: {}: {e}", i + 1, &record[k])))
        };
        samples.push(
            DelaySample::new(field(0)?, field(1)?)
                .map_err(|e| ModelError::Csv(format!("row {}: {e}", i + 1)))?,
        );
    }
    Ok(samples)
}

pub fn write_samples_csv(writer: impl Write, samples: &[DelaySample]) -> Result<(), ModelError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SAMPLE_CSV_HEADER)?;
    for s in samples {
        w.write_record([format!("{:?}", s.x), format!("{:?}", s.t)])?;
    }
    w.flush().map_err(|e| ModelError::Io(e.to_string()))
}
