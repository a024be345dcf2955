//! Wall-clock comparison of the sequential and parallel scans.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::ssm::{max_relative_deviation, scan_parallel, scan_sequential, Discretization, ScanParams, SelectiveScanInput};

/// Parallel output must match the sequential oracle this closely before any
/// timing is reported.
pub const AGREEMENT_TOL: f64 = 1e-10;

/// Smallest length at which the parallel scan is expected to win.
pub const SOFT_MIN_LEN: usize = 16384;
pub const SOFT_STATE: usize = 16;
pub const SOFT_MIN_THREADS: usize = 4;

/// A random stable scan problem.
pub fn random_scan_case(seed: u64, len: usize, channels: usize, state: usize) -> Result<(SelectiveScanInput, ScanParams)> {
    let mut r = rng::stream(seed, &format!("bench/scan/{len}/{channels}/{state}"));
    let mut u = |lo: f64, hi: f64, n: usize| -> Vec<f64> { (0..n).map(|_| r.gen_range(lo..hi)).collect() };
    let x = u(-1.0, 1.0, len * channels);
    let delta = u(0.001, 0.2, len * channels);
    let b = u(-1.0, 1.0, len * state);
    let c = u(-1.0, 1.0, len * state);
    let a = u(-4.0, -0.05, channels * state);
    let d = u(-1.0, 1.0, channels);
    Ok((SelectiveScanInput::new(len, channels, state, x, delta, b, c)?, ScanParams { a, d }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub state_sizes: Vec<usize>,
    pub channels: usize,
    pub repetitions: usize,
    pub chunk: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lengths: vec![1024, 4096, 16384],
            state_sizes: vec![16],
            channels: 16,
            repetitions: 5,
            chunk: crate::ssm::DEFAULT_CHUNK,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub length: usize,
    pub state_size: usize,
    pub channels: usize,
    pub sequential_median_s: f64,
    pub parallel_median_s: f64,
    pub max_rel_dev: f64,
}

impl BenchRow {
    pub fn speedup(&self) -> f64 {
        self.sequential_median_s / self.parallel_median_s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum SoftVerdict {
    Pass,
    Fail,
    NotApplicable { reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub threads: usize,
    pub rows: Vec<BenchRow>,
    /// Parallel median ≤ sequential median for every row with
    /// `L ≥ SOFT_MIN_LEN` and `N = SOFT_STATE`, given enough threads.
    pub soft_criterion: SoftVerdict,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn time<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let out = f();
    (out, t.elapsed().as_secs_f64())
}

/// Times both scans on every `(length, state size)` pair, in the current
/// rayon pool.
pub fn bench_scan(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.repetitions == 0 || cfg.channels == 0 || cfg.lengths.is_empty() || cfg.state_sizes.is_empty() {
        return Err(Error::InvalidArgument(
            "bench needs lengths, state sizes, channels and repetitions".into(),
        ));
    }
    let mut rows = Vec::new();
    for &len in &cfg.lengths {
        for &st in &cfg.state_sizes {
            let (inp, params) = random_scan_case(cfg.seed, len, cfg.channels, st)?;
            let reference = scan_sequential(&inp, &params, Discretization::Taylor)?;
            let candidate = scan_parallel(&inp, &params, Discretization::Taylor, cfg.chunk)?;
            let dev = max_relative_deviation(&candidate, &reference);
            if !(dev < AGREEMENT_TOL) {
                return Err(Error::InvalidArgument(format!(
                    "parallel scan deviates by {dev:e} at L={len}, N={st}; refusing to time"
                )));
            }
            let mut seq = Vec::with_capacity(cfg.repetitions);
            let mut par = Vec::with_capacity(cfg.repetitions);
            for _ in 0..cfg.repetitions {
                let (r, t) = time(|| scan_sequential(&inp, &params, Discretization::Taylor));
                r?;
                seq.push(t);
                let (r, t) = time(|| scan_parallel(&inp, &params, Discretization::Taylor, cfg.chunk));
                r?;
                par.push(t);
            }
            rows.push(BenchRow {
                length: len,
                state_size: st,
                channels: cfg.channels,
                sequential_median_s: median(seq),
                parallel_median_s: median(par),
                max_rel_dev: dev,
            });
        }
    }
    let threads = rayon::current_num_threads();
    let soft_criterion = soft_verdict(threads, &rows);
    Ok(BenchReport {
        threads,
        rows,
        soft_criterion,
    })
}

pub fn soft_verdict(threads: usize, rows: &[BenchRow]) -> SoftVerdict {
    let relevant: Vec<&BenchRow> = rows
        .iter()
        .filter(|r| r.length >= SOFT_MIN_LEN && r.state_size == SOFT_STATE)
        .collect();
    if threads < SOFT_MIN_THREADS {
        SoftVerdict::NotApplicable {
            reason: format!("{threads} worker thread(s); needs at least {SOFT_MIN_THREADS}"),
        }
    } else if relevant.is_empty() {
        SoftVerdict::NotApplicable {
            reason: format!("no row with L >= {SOFT_MIN_LEN} and N = {SOFT_STATE}"),
        }
    } else if relevant.iter().all(|r| r.parallel_median_s <= r.sequential_median_s) {
        SoftVerdict::Pass
    } else {
        SoftVerdict::Fail
    }
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("length,state_size,channels,sequential_median_s,parallel_median_s,speedup,max_rel_dev\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{:.6e},{:.6e},{:.3},{:.3e}\n",
                r.length,
                r.state_size,
                r.channels,
                r.sequential_median_s,
                r.parallel_median_s,
                r.speedup(),
                r.max_rel_dev
            ));
        }
        s
    }

    /// Human-readable table followed by the soft-criterion verdict.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "threads: {}\n{:>8} {:>4} {:>4} {:>14} {:>14} {:>8} {:>10}\n",
            self.threads, "L", "N", "E", "seq median ms", "par median ms", "speedup", "max dev"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:>8} {:>4} {:>4} {:>14.3} {:>14.3} {:>8.2} {:>10.1e}\n",
                r.length,
                r.state_size,
                r.channels,
                r.sequential_median_s * 1e3,
                r.parallel_median_s * 1e3,
                r.speedup(),
                r.max_rel_dev
            ));
        }
        let verdict = match &self.soft_criterion {
            SoftVerdict::Pass => "pass".to_string(),
            SoftVerdict::Fail => "fail".to_string(),
            SoftVerdict::NotApplicable { reason } => format!("not applicable ({reason})"),
        };
        s.push_str(&format!("parallel <= sequential at L >= {SOFT_MIN_LEN}, N = {SOFT_STATE}: {verdict}\n"));
        s
    }
}
