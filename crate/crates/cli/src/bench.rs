//! Wall-clock and memory scaling of the attention kernels.

use std::time::Instant;

use daefusion_core::attention::{efficient_attention, scca_attend, standard_attention, transpose_attention, SccaOrder};
use daefusion_core::numerics::rng::{normal, rng};
use daefusion_core::{Result, Scalar, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::Precision;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    Standard,
    Efficient,
    Transpose,
    Scca,
}

impl Kernel {
    pub fn name(self) -> &'static str {
        match self {
            Kernel::Standard => "standard",
            Kernel::Efficient => "efficient",
            Kernel::Transpose => "transpose",
            Kernel::Scca => "scca",
        }
    }
}

pub const BENCH_HEADER: [&str; 5] = ["kernel", "n", "d", "median_seconds", "peak_bytes"];
pub const SLOPE_HEADER: [&str; 2] = ["kernel", "slope"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub kernel: &'static str,
    pub n: usize,
    pub d: usize,
    pub median_seconds: f64,
    pub peak_bytes: usize,
}

/// One forward evaluation on a fresh tape; returns seconds and tape bytes.
fn run_once<T: Scalar>(kernel: Kernel, q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<(f64, usize)> {
    let start = Instant::now();
    let tape = Tape::new();
    let (q, k, v) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    match kernel {
        Kernel::Standard => standard_attention(q, k, v)?,
        Kernel::Efficient => efficient_attention(q, k, v)?,
        Kernel::Transpose => transpose_attention(q, k, v, tape.constant(Tensor::ones(vec![1])))?,
        Kernel::Scca => scca_attend(q, k, v, SccaOrder::AsPrinted)?,
    };
    let elapsed = start.elapsed().as_secs_f64();
    Ok((elapsed, tape.alloc_log().peak_bytes()))
}

/// Median over `reps` timed runs after one discarded warm-up run.
pub fn bench_kernel(kernel: Kernel, n: usize, d: usize, reps: usize, seed: u64, precision: Precision) -> Result<BenchRow> {
    match precision {
        Precision::F32 => timed::<f32>(kernel, n, d, reps, seed),
        Precision::F64 => timed::<f64>(kernel, n, d, reps, seed),
    }
}

fn timed<T: Scalar>(kernel: Kernel, n: usize, d: usize, reps: usize, seed: u64) -> Result<BenchRow> {
    let mut r = rng(seed ^ n as u64);
    let (q, k, v): (Tensor<T>, Tensor<T>, Tensor<T>) =
        (normal(&mut r, &[n, d], 1.0), normal(&mut r, &[n, d], 1.0), normal(&mut r, &[n, d], 1.0));
    run_once(kernel, &q, &k, &v)?;
    let mut times = Vec::with_capacity(reps);
    let mut peak = 0;
    for _ in 0..reps {
        let (t, bytes) = run_once(kernel, &q, &k, &v)?;
        times.push(t);
        peak = peak.max(bytes);
    }
    times.sort_by(f64::total_cmp);
    let median = if reps % 2 == 1 { times[reps / 2] } else { 0.5 * (times[reps / 2 - 1] + times[reps / 2]) };
    Ok(BenchRow { kernel: kernel.name(), n, d, median_seconds: median, peak_bytes: peak })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = logs.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = logs.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    sxy / sxx
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub slopes: Vec<(Kernel, f64)>,
}

impl BenchReport {
    pub fn slope(&self, kernel: Kernel) -> Option<f64> {
        self.slopes.iter().find(|(k, _)| *k == kernel).map(|&(_, s)| s)
    }

    pub fn peak_bytes(&self, kernel: Kernel, n: usize) -> Option<usize> {
        self.rows.iter().find(|r| r.kernel == kernel.name() && r.n == n).map(|r| r.peak_bytes)
    }
}

pub fn run_bench(kernels: &[Kernel], n_sweep: &[usize], d: usize, reps: usize, seed: u64, precision: Precision) -> Result<BenchReport> {
    let mut rows = Vec::new();
    let mut slopes = Vec::new();
    for &kernel in kernels {
        let start = rows.len();
        for &n in n_sweep {
            rows.push(bench_kernel(kernel, n, d, reps, seed, precision)?);
        }
        if n_sweep.len() >= 2 {
            let points: Vec<(f64, f64)> = rows[start..].iter().map(|r| (r.n as f64, r.median_seconds)).collect();
            slopes.push((kernel, log_log_slope(&points)));
        }
    }
    Ok(BenchReport { rows, slopes })
}
