//! Non-stationarity profiles of a series: ADF unit-root p-value, spectral
//! entropy, volatility-of-volatility, and the rank-based composite score
//! used to order datasets.

use nalgebra::{DMatrix, DVector};
use rustfft::{num_complex::Complex, FftPlanner};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::SeriesFrame;
use crate::error::{Error, Result};
use crate::par::Execution;

/// At most this many channels are profiled per dataset.
pub const MAX_CHANNELS: usize = 16;
pub const MAX_VOV_WINDOW: usize = 256;
/// Rolling window used when the sampling rate is unknown.
pub const DEFAULT_VOV_WINDOW: usize = 24;

fn undefined(msg: impl Into<String>) -> Error {
    Error::UndefinedDiagnostic(msg.into())
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Normalised Shannon entropy of the DC-free power spectrum, in `[0, 1]`.
///
/// The channel is z-normalised and truncated to the largest power of two
/// `N`; bins `1..=N/2` are used, so `N_f = N/2`.
pub fn spectral_entropy(x: &[f64]) -> Result<f64> {
    if x.len() < 4 {
        return Err(undefined(format!("spectral entropy needs T >= 4, got {}", x.len())));
    }
    let n = 1usize << (usize::BITS - 1 - x.len().leading_zeros());
    let (mean, std) = mean_std(x);
    if std < 1e-12 {
        return Err(undefined("spectral entropy of a constant series"));
    }
    let mut buf: Vec<Complex<f64>> = x[..n].iter().map(|v| Complex::new((v - mean) / std, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let power: Vec<f64> = buf[1..=n / 2].iter().map(|c| c.norm_sqr()).collect();
    let total: f64 = power.iter().sum();
    if !(total > 0.0) {
        return Err(undefined("all-zero power spectrum"));
    }
    let h: f64 = power
        .iter()
        .map(|p| p / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    Ok((h / (power.len() as f64).ln()).clamp(0.0, 1.0))
}

/// Rolling window of about one day, capped.
pub fn vov_window(points_per_day: Option<f64>) -> usize {
    match points_per_day {
        Some(p) if p.is_finite() && p > 0.0 => (p.round() as usize).clamp(2, MAX_VOV_WINDOW),
        _ => DEFAULT_VOV_WINDOW,
    }
}

/// Coefficient of variation of the rolling (population) standard deviation
/// over all full windows of length `w`.
pub fn vov(x: &[f64], w: usize) -> Result<f64> {
    if w < 2 {
        return Err(Error::config(format!("VoV window must be >= 2, got {w}")));
    }
    if x.len() < 2 * w {
        return Err(undefined(format!("VoV needs T >= 2w = {}, got {}", 2 * w, x.len())));
    }
    let sigmas: Vec<f64> = x.windows(w).map(|win| mean_std(win).1).collect();
    let (mean, std) = mean_std(&sigmas);
    if mean < 1e-12 {
        return Err(undefined("VoV of a constant series"));
    }
    Ok(std / mean)
}

/// Outcome of an augmented Dickey-Fuller regression.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdfResult {
    pub statistic: f64,
    pub p_value: f64,
    pub lags: usize,
    pub nobs: usize,
}

/// Percentiles of the tabulated distribution.
const ADF_PERCENTILES: [f64; 8] = [0.01, 0.025, 0.05, 0.10, 0.90, 0.95, 0.975, 0.99];

/// Critical values of the unit-root t-statistic with constant and linear
/// trend, by sample size (`usize::MAX` for the asymptotic row).
const ADF_TREND_TABLE: [(usize, [f64; 8]); 6] = [
    (25, [-4.38, -3.95, -3.60, -3.24, -1.14, -0.80, -0.50, -0.15]),
    (50, [-4.15, -3.80, -3.50, -3.18, -1.19, -0.87, -0.58, -0.24]),
    (100, [-4.04, -3.73, -3.45, -3.15, -1.22, -0.90, -0.62, -0.28]),
    (250, [-3.99, -3.69, -3.43, -3.13, -1.23, -0.92, -0.64, -0.31]),
    (500, [-3.98, -3.68, -3.42, -3.13, -1.24, -0.93, -0.65, -0.32]),
    (usize::MAX, [-3.96, -3.66, -3.41, -3.12, -1.25, -0.94, -0.66, -0.33]),
];

/// Critical values for sample size `n`, linear in `1/n` between rows.
fn critical_values(n: usize) -> [f64; 8] {
    let inv = |m: usize| if m == usize::MAX { 0.0 } else { 1.0 / m as f64 };
    let x = inv(n.max(1));
    if n <= ADF_TREND_TABLE[0].0 {
        return ADF_TREND_TABLE[0].1;
    }
    for pair in ADF_TREND_TABLE.windows(2) {
        let ((n0, c0), (n1, c1)) = (pair[0], pair[1]);
        if n <= n1 || n1 == usize::MAX {
            let (x0, x1) = (inv(n0), inv(n1));
            let f = (x0 - x) / (x0 - x1);
            let mut out = [0.0; 8];
            for i in 0..8 {
                out[i] = c0[i] + f * (c1[i] - c0[i]);
            }
            return out;
        }
    }
    ADF_TREND_TABLE[5].1
}

/// p-value of a trend-case unit-root statistic: piecewise-linear in probit
/// space through the tabulated points, extended with the end slopes, then
/// clamped to `[0.001, 0.999]`.
pub fn adf_p_value(statistic: f64, n: usize) -> f64 {
    let normal = Normal::standard();
    let crit = critical_values(n);
    let z: Vec<f64> = ADF_PERCENTILES.iter().map(|&p| normal.inverse_cdf(p)).collect();
    let last = crit.len() - 1;
    let seg = if statistic <= crit[0] {
        0
    } else if statistic >= crit[last] {
        last - 1
    } else {
        (0..last).find(|&i| statistic <= crit[i + 1]).unwrap_or(last - 1)
    };
    let slope = (z[seg + 1] - z[seg]) / (crit[seg + 1] - crit[seg]);
    let zs = z[seg] + slope * (statistic - crit[seg]);
    normal.cdf(zs).clamp(0.001, 0.999)
}

/// Schwert lag order `floor(12 · (T/100)^{1/4})`.
pub fn schwert_lags(len: usize) -> usize {
    (12.0 * (len as f64 / 100.0).powf(0.25)).floor() as usize
}

/// Augmented Dickey-Fuller test with constant and linear trend.
pub fn adf_test(x: &[f64]) -> Result<AdfResult> {
    let len = x.len();
    if len < 50 {
        return Err(undefined(format!("ADF needs T >= 50, got {len}")));
    }
    let lags = schwert_lags(len);
    let dy: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    // Row for dy[i] (i >= lags): 1, trend, level y[i], lagged differences.
    let rows: Vec<usize> = (lags..dy.len()).collect();
    let k = 3 + lags;
    let nobs = rows.len();
    if nobs <= k + 1 {
        return Err(undefined(format!("ADF has {nobs} observations for {k} regressors")));
    }
    let design = DMatrix::from_fn(nobs, k, |r, c| {
        let i = rows[r];
        match c {
            0 => 1.0,
            1 => (i + 1) as f64 / len as f64,
            2 => x[i],
            _ => dy[i - (c - 2)],
        }
    });
    let target = DVector::from_iterator(nobs, rows.iter().map(|&i| dy[i]));
    let qr = design.clone().qr();
    let r = qr.r();
    let max_diag = r.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if r.diagonal().iter().any(|v| v.abs() <= 1e-10 * max_diag) || max_diag == 0.0 {
        return Err(Error::numeric("singular ADF regression matrix"));
    }
    let qty = qr.q().transpose() * &target;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::numeric("singular ADF regression matrix"))?;
    let resid = &target - &design * &beta;
    let sigma2 = resid.norm_squared() / (nobs - k) as f64;
    // (XᵀX)⁻¹ = R⁻¹R⁻ᵀ; only entry (2, 2) is needed.
    let mut e = DVector::zeros(k);
    e[2] = 1.0;
    let w = r
        .transpose()
        .solve_lower_triangular(&e)
        .ok_or_else(|| Error::numeric("singular ADF regression matrix"))?;
    let se = (sigma2 * w.norm_squared()).sqrt();
    if !(se > 0.0) || !se.is_finite() {
        return Err(Error::numeric("degenerate ADF standard error"));
    }
    let statistic = beta[2] / se;
    Ok(AdfResult {
        statistic,
        p_value: adf_p_value(statistic, nobs),
        lags,
        nobs,
    })
}

/// Profile of one channel; each entry is an error message when undefined.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelDiagnostics {
    pub name: String,
    pub adf_p: std::result::Result<f64, String>,
    pub spectral_entropy: std::result::Result<f64, String>,
    pub vov: std::result::Result<f64, String>,
}

/// Channel-level and averaged diagnostics of one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticsReport {
    pub dataset: String,
    pub window: usize,
    pub channels: Vec<ChannelDiagnostics>,
    pub adf_p: Option<f64>,
    pub spectral_entropy: Option<f64>,
    pub vov: Option<f64>,
    /// Channel metrics left out of the averages because they were undefined.
    pub undefined: usize,
}

/// Evenly spread channel indices, at most [`MAX_CHANNELS`].
pub fn sample_channels(c: usize) -> Vec<usize> {
    if c <= MAX_CHANNELS {
        return (0..c).collect();
    }
    (0..MAX_CHANNELS).map(|i| i * c / MAX_CHANNELS).collect()
}

fn average(values: impl Iterator<Item = Option<f64>>, undefined: &mut usize) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0;
    for v in values {
        match v {
            Some(v) => {
                sum += v;
                n += 1;
            }
            None => *undefined += 1,
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Profiles up to [`MAX_CHANNELS`] channels of `frame`.
pub fn diagnose(dataset: &str, frame: &SeriesFrame, exec: Execution) -> DiagnosticsReport {
    let window = vov_window(frame.points_per_day);
    let picked = sample_channels(frame.n_channels());
    let channels = exec.map(picked.len(), |i| {
        let c = picked[i];
        let x = frame.column(c);
        ChannelDiagnostics {
            name: frame.channel_names()[c].clone(),
            adf_p: adf_test(&x).map(|r| r.p_value).map_err(|e| e.to_string()),
            spectral_entropy: spectral_entropy(&x).map_err(|e| e.to_string()),
            vov: vov(&x, window).map_err(|e| e.to_string()),
        }
    });
    let mut undefined = 0;
    let adf_p = average(channels.iter().map(|c| c.adf_p.clone().ok()), &mut undefined);
    let spectral_entropy = average(channels.iter().map(|c| c.spectral_entropy.clone().ok()), &mut undefined);
    let vov = average(channels.iter().map(|c| c.vov.clone().ok()), &mut undefined);
    DiagnosticsReport {
        dataset: dataset.to_string(),
        window,
        channels,
        adf_p,
        spectral_entropy,
        vov,
        undefined,
    }
}

/// Competition ranks in ascending order: 1 for the smallest value, ties
/// share the lower rank and the next rank skips.
pub fn competition_ranks(values: &[f64]) -> Vec<usize> {
    values
        .iter()
        .map(|v| 1 + values.iter().filter(|o| *o < v).count())
        .collect()
}

/// One dataset's row of the composite ranking.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub dataset: String,
    pub spectral_entropy: f64,
    pub vov: f64,
    pub entropy_rank: usize,
    pub vov_rank: usize,
    pub score: usize,
}

/// `rank(H_s) + rank(VoV)` for each `(name, H_s, VoV)`, sorted by score
/// descending (most non-stationary first), ties kept in input order.
pub fn composite_score(items: &[(String, f64, f64)]) -> Result<Vec<ScoreRow>> {
    if items.len() < 2 {
        return Err(Error::config("composite score needs at least two datasets"));
    }
    let hs: Vec<f64> = items.iter().map(|i| i.1).collect();
    let vv: Vec<f64> = items.iter().map(|i| i.2).collect();
    let hr = competition_ranks(&hs);
    let vr = competition_ranks(&vv);
    let mut rows: Vec<ScoreRow> = items
        .iter()
        .enumerate()
        .map(|(i, (name, h, v))| ScoreRow {
            dataset: name.clone(),
            spectral_entropy: *h,
            vov: *v,
            entropy_rank: hr[i],
            vov_rank: vr[i],
            score: hr[i] + vr[i],
        })
        .collect();
    rows.sort_by_key(|r| std::cmp::Reverse(r.score));
    Ok(rows)
}
