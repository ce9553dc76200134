//! Order parameter, susceptibility, Gini coefficient and ensemble intervals.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocation::Algorithm;
use crate::simulate::{SeriesPoint, VehicleRecord};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("need at least {needed} windows after the trim, have {have}")]
    TooFewWindows { needed: usize, have: usize },
    #[error("window {window} is not a positive multiple of the sampling step {step}")]
    BadWindow { window: f64, step: f64 },
    #[error("arrival rate must be positive, got {0}")]
    BadRate(f64),
    #[error("series must be sampled at a constant positive step")]
    IrregularSeries,
    #[error("empty sample")]
    Empty,
    #[error("sample has zero mean")]
    ZeroMean,
    #[error("sample values must be finite and non-negative")]
    BadSample,
}

/// Window length and transient cut for the η and χ estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Windowing {
    pub window: f64,
    /// Samples before this time are discarded.
    pub trim: f64,
}

impl Default for Windowing {
    fn default() -> Self {
        Self { window: 100.0, trim: 1000.0 }
    }
}

/// Per-window growth rates `(N(t + Δt) - N(t)) / Δt` over consecutive
/// windows starting at the first sample at or after the trim.
pub fn window_rates(series: &[SeriesPoint], w: Windowing) -> Result<Vec<f64>, StatsError> {
    if series.len() < 2 {
        return Err(StatsError::TooFewWindows { needed: 1, have: 0 });
    }
    let step = series[1].time - series[0].time;
    if !(step > 0.0) {
        return Err(StatsError::IrregularSeries);
    }
    let stride = (w.window / step).round();
    if !(stride >= 1.0) || ((stride * step - w.window).abs() > 1e-9 * w.window.max(1.0)) {
        return Err(StatsError::BadWindow { window: w.window, step });
    }
    let stride = stride as usize;
    let start = series.partition_point(|p| p.time < w.trim - 1e-9 * step);
    let mut rates = Vec::new();
    let mut i = start;
    while i + stride < series.len() {
        let (a, b) = (&series[i], &series[i + stride]);
        if ((b.time - a.time) - w.window).abs() > 1e-6 * step {
            return Err(StatsError::IrregularSeries);
        }
        rates.push((b.vehicles as f64 - a.vehicles as f64) / w.window);
        i += stride;
    }
    Ok(rates)
}

/// `η = (1/λ) <ΔN> / Δt`. Negative values are returned as computed.
pub fn order_parameter(series: &[SeriesPoint], w: Windowing, lambda: f64) -> Result<f64, StatsError> {
    if !(lambda > 0.0) {
        return Err(StatsError::BadRate(lambda));
    }
    let rates = window_rates(series, w)?;
    if rates.is_empty() {
        return Err(StatsError::TooFewWindows { needed: 1, have: 0 });
    }
    Ok(mean(&rates) / lambda)
}

/// Minimum number of windows for [`susceptibility`].
pub const MIN_WINDOWS: usize = 10;

/// `χ = Δt σ_η(Δt)` with the sample standard deviation of per-window η.
pub fn susceptibility(series: &[SeriesPoint], w: Windowing, lambda: f64) -> Result<f64, StatsError> {
    if !(lambda > 0.0) {
        return Err(StatsError::BadRate(lambda));
    }
    let etas: Vec<f64> = window_rates(series, w)?.into_iter().map(|r| r / lambda).collect();
    if etas.len() < MIN_WINDOWS {
        return Err(StatsError::TooFewWindows { needed: MIN_WINDOWS, have: etas.len() });
    }
    Ok(w.window * sample_sd(&etas))
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Standard deviation with `n - 1` denominator; zero for fewer than two values.
pub fn sample_sd(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GiniEstimate {
    pub n: usize,
    pub mean: f64,
    pub value: f64,
}

fn check_sample(x: &[f64]) -> Result<f64, StatsError> {
    if x.is_empty() {
        return Err(StatsError::Empty);
    }
    if x.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(StatsError::BadSample);
    }
    let mu = mean(x);
    if mu <= 0.0 {
        return Err(StatsError::ZeroMean);
    }
    Ok(mu)
}

/// Sample Gini coefficient `sum_ij |x_i - x_j| / (2 n^2 μ)`, evaluated in
/// sorted order as `sum_i (2i - n - 1) x_(i) / (n^2 μ)`.
pub fn gini(samples: &[f64]) -> Result<GiniEstimate, StatsError> {
    let mu = check_sample(samples)?;
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len();
    let nf = n as f64;
    let acc: f64 = x.iter().enumerate().map(|(i, v)| (2.0 * (i + 1) as f64 - nf - 1.0) * v).sum();
    let value = (acc / (nf * nf * mu)).max(0.0);
    Ok(GiniEstimate { n, mean: mu, value })
}

/// The double sum, for checking [`gini`].
pub fn gini_brute_force(samples: &[f64]) -> Result<f64, StatsError> {
    let mu = check_sample(samples)?;
    let n = samples.len() as f64;
    let total: f64 = samples.iter().map(|a| samples.iter().map(|b| (a - b).abs()).sum::<f64>()).sum();
    Ok(total / (2.0 * n * n * mu))
}

/// Gini of charging times of vehicles that finished after `trim`.
pub fn charging_time_gini(vehicles: &[VehicleRecord], trim: f64) -> Result<GiniEstimate, StatsError> {
    let times: Vec<f64> = vehicles
        .iter()
        .filter(|v| v.departure.is_some_and(|d| d > trim))
        .filter_map(VehicleRecord::charging_time)
        .collect();
    gini(&times)
}

/// Mean with a 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Estimate {
    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn overlaps(&self, other: &Estimate) -> bool {
        self.lo <= other.hi && other.lo <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

const Z95: f64 = 1.96;

/// Normal-approximation interval `mean ± 1.96 σ / √n`. A single value gives
/// a zero-width interval.
pub fn normal_ci(values: &[f64]) -> Option<Estimate> {
    if values.is_empty() {
        return None;
    }
    let m = mean(values);
    let half = Z95 * sample_sd(values) / (values.len() as f64).sqrt();
    Some(Estimate { mean: m, lo: m - half, hi: m + half, n: values.len() })
}

/// Percentile bootstrap interval for the mean.
pub fn bootstrap_ci(values: &[f64], resamples: usize, seed: u64) -> Option<Estimate> {
    if values.is_empty() || resamples == 0 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let pick = |q: f64| means[((q * resamples as f64).floor() as usize).min(resamples - 1)];
    Some(Estimate { mean: mean(values), lo: pick(0.025), hi: pick(0.975), n })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum CiMethod {
    #[default]
    Normal,
    Bootstrap { resamples: usize, seed: u64 },
}

impl CiMethod {
    pub fn interval(&self, values: &[f64]) -> Option<Estimate> {
        match *self {
            CiMethod::Normal => normal_ci(values),
            CiMethod::Bootstrap { resamples, seed } => bootstrap_ci(values, resamples, seed),
        }
    }
}

/// Observables of a single run; `None` where the estimator had too little
/// data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunObservables {
    pub eta: Option<f64>,
    pub chi: Option<f64>,
    pub gini: Option<f64>,
}

impl RunObservables {
    pub fn compute(series: &[SeriesPoint], vehicles: &[VehicleRecord], lambda: f64, w: Windowing) -> Self {
        Self {
            eta: order_parameter(series, w, lambda).ok(),
            chi: susceptibility(series, w, lambda).ok(),
            gini: charging_time_gini(vehicles, w.trim).ok().map(|g| g.value),
        }
    }
}

/// Ensemble summary for one `(λ, algorithm)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatRecord {
    pub lambda: f64,
    pub algorithm: Algorithm,
    pub eta: Option<Estimate>,
    pub chi: Option<Estimate>,
    pub gini: Option<Estimate>,
    pub runs: usize,
    pub window: f64,
}

/// Aggregates per-run observables; each interval uses the runs where that
/// observable is defined.
pub fn ensemble(lambda: f64, algorithm: Algorithm, window: f64, runs: &[RunObservables], method: CiMethod) -> StatRecord {
    let collect = |f: fn(&RunObservables) -> Option<f64>| -> Vec<f64> { runs.iter().filter_map(f).collect() };
    StatRecord {
        lambda,
        algorithm,
        eta: method.interval(&collect(|r| r.eta)),
        chi: method.interval(&collect(|r| r.chi)),
        gini: method.interval(&collect(|r| r.gini)),
        runs: runs.len(),
        window,
    }
}

pub const SUMMARY_HEADER: &str =
    "lambda,algorithm,eta_mean,eta_lo,eta_hi,chi_mean,chi_lo,chi_hi,gini_mean,gini_lo,gini_hi,runs,window";

impl StatRecord {
    /// One summary row. Floats use the shortest representation that reads
    /// back to the same value; undefined estimates are left empty.
    pub fn csv_row(&self) -> String {
        let mut out = format!("{},{}", self.lambda, self.algorithm);
        for e in [&self.eta, &self.chi, &self.gini] {
            match e {
                Some(e) => {
                    let _ = write!(out, ",{},{},{}", e.mean, e.lo, e.hi);
                }
                None => out.push_str(",,,"),
            }
        }
        let _ = write!(out, ",{},{}", self.runs, self.window);
        out
    }
}

pub fn summary_csv(records: &[StatRecord]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Least-squares slope of `N(t)` on `t` with its standard error.
pub fn trend(series: &[SeriesPoint]) -> Option<(f64, f64)> {
    let n = series.len();
    if n < 3 {
        return None;
    }
    let nf = n as f64;
    let tm = series.iter().map(|p| p.time).sum::<f64>() / nf;
    let ym = series.iter().map(|p| p.vehicles as f64).sum::<f64>() / nf;
    let sxx: f64 = series.iter().map(|p| (p.time - tm).powi(2)).sum();
    let sxy: f64 = series.iter().map(|p| (p.time - tm) * (p.vehicles as f64 - ym)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let rss: f64 = series
        .iter()
        .map(|p| {
            let fit = ym + slope * (p.time - tm);
            (p.vehicles as f64 - fit).powi(2)
        })
        .sum();
    let se = (rss / (nf - 2.0) / sxx).sqrt();
    Some((slope, se))
}
