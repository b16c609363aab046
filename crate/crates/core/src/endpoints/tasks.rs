//! Built-in task registry executed by clones.
//!
//! | task          | input               | output                    |
//! |---------------|---------------------|---------------------------|
//! | `fib`         | `n` (0..=93)        | n-th Fibonacci number     |
//! | `matmul_n`    | `n=<1..=512> seed=<u64>` | checksum of A·B      |
//! | `sleep_ms`    | milliseconds (≤ 60000) | `slept <ms>`           |
//! | `fail_always` | anything            | error 101                 |
//!
//! Inputs and outputs are ASCII decimal text.

use std::fmt;
use std::panic::{self, AssertUnwindSafe};
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::pdu::codes::APP_ERROR_BASE;

pub const BUILTIN_TASKS: [&str; 4] = ["fib", "matmul_n", "sleep_ms", "fail_always"];

pub const UNKNOWN_TASK: u32 = APP_ERROR_BASE;
pub const TASK_FAILED: u32 = APP_ERROR_BASE + 1;
pub const TASK_PANICKED: u32 = APP_ERROR_BASE + 2;
pub const BAD_INPUT: u32 = APP_ERROR_BASE + 3;

const MAX_FIB: u64 = 93;
const MAX_MATMUL: usize = 512;
const MAX_SLEEP_MS: u64 = 60_000;

/// Application-level failure; `code` ≥ 100.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("application error {code}: {message}")]
pub struct AppError {
    pub code: u32,
    pub message: String,
}

impl AppError {
    pub fn new(code: u32, message: impl Into<String>) -> Self {
        AppError {
            code,
            message: message.into(),
        }
    }
}

/// One unit of offloaded work.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskDescriptor {
    pub task_id: String,
    pub input: Vec<u8>,
}

impl TaskDescriptor {
    pub fn new(task_id: impl Into<String>, input: impl Into<Vec<u8>>) -> Self {
        TaskDescriptor {
            task_id: task_id.into(),
            input: input.into(),
        }
    }
}

impl fmt::Display for TaskDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.task_id, String::from_utf8_lossy(&self.input))
    }
}

pub fn is_builtin(task_id: &str) -> bool {
    BUILTIN_TASKS.contains(&task_id)
}

/// Runs a built-in task. A panic inside the task is reported as
/// [`TASK_PANICKED`] rather than unwinding into the caller.
pub fn clone_execute(task: &TaskDescriptor) -> Result<Vec<u8>, AppError> {
    let run = || -> Result<String, AppError> {
        let input = std::str::from_utf8(&task.input)
            .map_err(|_| AppError::new(BAD_INPUT, "input is not UTF-8"))?
            .trim();
        match task.task_id.as_str() {
            "fib" => {
                let n = parse_u64(input)?;
                if n > MAX_FIB {
                    return Err(AppError::new(BAD_INPUT, format!("fib({n}) overflows u64")));
                }
                Ok(fib(n).to_string())
            }
            "matmul_n" => {
                let (n, seed) = parse_matmul(input)?;
                Ok(matmul_checksum(n, seed).to_string())
            }
            "sleep_ms" => {
                let ms = parse_u64(input)?;
                if ms > MAX_SLEEP_MS {
                    return Err(AppError::new(BAD_INPUT, format!("sleep of {ms} ms too long")));
                }
                thread::sleep(Duration::from_millis(ms));
                Ok(format!("slept {ms}"))
            }
            "fail_always" => Err(AppError::new(TASK_FAILED, "task failed")),
            _ => Err(AppError::new(UNKNOWN_TASK, "unknown task")),
        }
    };
    match panic::catch_unwind(AssertUnwindSafe(run)) {
        Ok(result) => result.map(String::into_bytes),
        Err(_) => Err(AppError::new(TASK_PANICKED, "task panicked")),
    }
}

fn parse_u64(s: &str) -> Result<u64, AppError> {
    s.parse()
        .map_err(|_| AppError::new(BAD_INPUT, format!("expected a decimal count, got {s:?}")))
}

fn parse_matmul(s: &str) -> Result<(usize, u64), AppError> {
    let mut n = None;
    let mut seed = 0;
    for field in s.split_whitespace() {
        let bad = || AppError::new(BAD_INPUT, format!("bad matmul field {field:?}"));
        let (k, v) = field.split_once('=').ok_or_else(bad)?;
        match k {
            "n" => n = Some(v.parse::<usize>().map_err(|_| bad())?),
            "seed" => seed = v.parse::<u64>().map_err(|_| bad())?,
            _ => return Err(bad()),
        }
    }
    let n = n.ok_or_else(|| AppError::new(BAD_INPUT, "matmul needs n=<size>"))?;
    if n == 0 || n > MAX_MATMUL {
        return Err(AppError::new(BAD_INPUT, format!("matrix size {n} out of range")));
    }
    Ok((n, seed))
}

fn fib(n: u64) -> u64 {
    let (mut a, mut b) = (0u64, 1u64);
    // `b` runs one term ahead and wraps at n = 93; only `a` is returned.
    for _ in 0..n {
        let next = a.wrapping_add(b);
        a = b;
        b = next;
    }
    a
}

/// The two row-major `n × n` operands of `matmul_n`: A then B, entries in
/// `0..1000` drawn from a ChaCha8 stream seeded with `seed`.
pub fn matmul_inputs(n: usize, seed: u64) -> (Vec<u64>, Vec<u64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = (0..n * n).map(|_| rng.random_range(0..1000)).collect();
    let b = (0..n * n).map(|_| rng.random_range(0..1000)).collect();
    (a, b)
}

/// Position-weighted checksum `Σ C[i][j]·(i·n + j + 1)` of `C = A·B`, in
/// wrapping u64 arithmetic.
fn matmul_checksum(n: usize, seed: u64) -> u64 {
    let (a, b) = matmul_inputs(n, seed);
    let mut c = vec![0u64; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            let row = &b[k * n..(k + 1) * n];
            for (cij, bkj) in c[i * n..(i + 1) * n].iter_mut().zip(row) {
                *cij = cij.wrapping_add(aik.wrapping_mul(*bkj));
            }
        }
    }
    c.iter()
        .enumerate()
        .fold(0u64, |acc, (idx, v)| acc.wrapping_add(v.wrapping_mul(idx as u64 + 1)))
}
