//! Forecast evaluation: latitude-weighted deterministic scores, zonal power
//! spectra, lagged-ensemble probabilistic scores, and tabular/plot reports.
//!
//! Conventions (each asserted by tests):
//! - Scores average over initial conditions as the arithmetic mean of
//!   per-init scores, not a pooled recomputation.
//! - Latitude weights have mean 1; weighted spatial means divide by the
//!   weight sum, so a uniform error of size `d` scores exactly `d`.
//! - `ps1d` is one-sided over zonal wavenumber with the convention that the
//!   sum over `k > 0` equals the (population) row variance; rows are averaged
//!   with latitude weights.
//! - Ensemble spread uses the sample standard deviation (divisor `M - 1`)
//!   with no inflation factor; spread skill is plain spread / RMSE.
//! - Lagged-ensemble members come only from older init times (no future
//!   information).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use chrono::{DateTime, Duration, Utc};
use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::grid::{latitude_weights, GridSpec};
use crate::rollout::Forecast;
use crate::{Error, Result};

/// One metric as a function of lead time, for one channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub metric: String,
    pub channel: String,
    pub lead_hours: Vec<i64>,
    pub values: Vec<f64>,
    /// How many initial conditions went into each value.
    pub n_inits: usize,
}

impl MetricSeries {
    pub fn validate(&self) -> Result<()> {
        if self.lead_hours.len() != self.values.len() {
            return Err(Error::invalid(format!(
                "metric series {} has {} leads but {} values",
                self.metric,
                self.lead_hours.len(),
                self.values.len()
            )));
        }
        if !self.values.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericFailure {
                context: format!("metric series {}", self.metric),
            });
        }
        Ok(())
    }
}

/// Index of `time` on the dataset's time axis, or an alignment error.
fn truth_index(ds: &Dataset, time: DateTime<Utc>) -> Result<usize> {
    let offset = time - ds.meta.start_time;
    let hours = offset.num_hours();
    if offset != Duration::hours(hours) || hours < 0 || hours % ds.meta.dt_hours != 0 {
        return Err(Error::invalid(format!(
            "time {time} does not fall on the dataset's {}h grid",
            ds.meta.dt_hours
        )));
    }
    let idx = (hours / ds.meta.dt_hours) as usize;
    if idx >= ds.meta.n_times {
        return Err(Error::OutOfRange(format!(
            "time {time} lies beyond the dataset (index {idx} of {})",
            ds.meta.n_times
        )));
    }
    Ok(idx)
}

fn prognostic_index(ds: &Dataset, channel: &str) -> Result<usize> {
    let c = ds
        .meta
        .schema
        .index_of(channel)
        .ok_or_else(|| Error::invalid(format!("unknown channel {channel:?}")))?;
    if c >= ds.meta.schema.n_prognostic() {
        return Err(Error::invalid(format!("{channel:?} is not prognostic")));
    }
    Ok(c)
}

fn check_same_lead_axis(forecasts: &[Forecast]) -> Result<()> {
    let first = forecasts
        .first()
        .ok_or_else(|| Error::invalid("no forecasts to evaluate"))?;
    for f in forecasts {
        if f.dt_hours != first.dt_hours || f.n_steps() != first.n_steps() {
            return Err(Error::invalid("forecasts disagree on the lead axis"));
        }
    }
    Ok(())
}

/// Latitude-weighted spatial mean of `f(i, j)` over an `(h, w)` field.
fn weighted_mean(w_lat: &Array1<f64>, h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..h {
        let wi = w_lat[i];
        for j in 0..w {
            num += wi * f(i, j);
            den += wi;
        }
    }
    num / den
}

/// Latitude-weighted RMSE of one field pair, accumulated in `f64`.
pub fn lat_rmse_field(
    pred: ArrayView2<'_, f32>,
    truth: ArrayView2<'_, f32>,
    w_lat: &Array1<f64>,
) -> f64 {
    let (h, w) = pred.dim();
    weighted_mean(w_lat, h, w, |i, j| {
        let d = pred[[i, j]] as f64 - truth[[i, j]] as f64;
        d * d
    })
    .sqrt()
}

/// Per-lead latitude-weighted RMSE, averaged over init times as the mean of
/// per-init RMSE values.
pub fn lat_rmse(forecasts: &[Forecast], truth: &Dataset, channel: &str) -> Result<MetricSeries> {
    check_same_lead_axis(forecasts)?;
    let c = prognostic_index(truth, channel)?;
    let w_lat = latitude_weights::<f64>(&truth.meta.grid);
    let n_steps = forecasts[0].n_steps();
    let mut lead_hours = Vec::with_capacity(n_steps);
    let mut values = Vec::with_capacity(n_steps);
    for k in 0..n_steps {
        lead_hours.push(forecasts[0].dt_hours * (k as i64 + 1));
        let mut acc = 0.0;
        for f in forecasts {
            let t = truth_index(truth, f.lead_time(k))?;
            acc += lat_rmse_field(
                f.states[k].index_axis(Axis(0), c),
                truth.channel_field(t, c),
                &w_lat,
            );
        }
        values.push(acc / forecasts.len() as f64);
    }
    Ok(MetricSeries {
        metric: "rmse".into(),
        channel: channel.into(),
        lead_hours,
        values,
        n_inits: forecasts.len(),
    })
}

/// Latitude-weighted anomaly correlation of one field pair. A forecast or
/// truth anomaly with zero norm yields 0 by convention.
pub fn acc_field(
    pred: ArrayView2<'_, f32>,
    truth: ArrayView2<'_, f32>,
    clim: ArrayView2<'_, f64>,
    w_lat: &Array1<f64>,
) -> f64 {
    let (h, w) = pred.dim();
    let mut num = 0.0;
    let mut fsq = 0.0;
    let mut osq = 0.0;
    for i in 0..h {
        let wi = w_lat[i];
        for j in 0..w {
            let af = pred[[i, j]] as f64 - clim[[i, j]];
            let ao = truth[[i, j]] as f64 - clim[[i, j]];
            num += wi * af * ao;
            fsq += wi * af * af;
            osq += wi * ao * ao;
        }
    }
    if fsq <= 0.0 || osq <= 0.0 {
        return 0.0;
    }
    num / (fsq * osq).sqrt()
}

/// Per-lead anomaly correlation against the training climatology, averaged
/// over init times.
pub fn acc(
    forecasts: &[Forecast],
    truth: &Dataset,
    climatology: &Array3<f64>,
    channel: &str,
) -> Result<MetricSeries> {
    check_same_lead_axis(forecasts)?;
    let c = prognostic_index(truth, channel)?;
    let w_lat = latitude_weights::<f64>(&truth.meta.grid);
    let clim = climatology.index_axis(Axis(0), c);
    let n_steps = forecasts[0].n_steps();
    let mut lead_hours = Vec::with_capacity(n_steps);
    let mut values = Vec::with_capacity(n_steps);
    for k in 0..n_steps {
        lead_hours.push(forecasts[0].dt_hours * (k as i64 + 1));
        let mut sum = 0.0;
        for f in forecasts {
            let t = truth_index(truth, f.lead_time(k))?;
            sum += acc_field(
                f.states[k].index_axis(Axis(0), c),
                truth.channel_field(t, c),
                clim,
                &w_lat,
            );
        }
        values.push(sum / forecasts.len() as f64);
    }
    Ok(MetricSeries {
        metric: "acc".into(),
        channel: channel.into(),
        lead_hours,
        values,
        n_inits: forecasts.len(),
    })
}

/// One-sided zonal power spectrum of a field: `n_lon / 2 + 1` bins, rows
/// combined with latitude weights. Normalized so the sum over `k > 0` equals
/// the latitude-weighted mean of the (population) row variances; bin 0 holds
/// the squared row mean.
pub fn ps1d(field: ArrayView2<'_, f32>, grid: &GridSpec) -> Vec<f64> {
    let (h, n) = field.dim();
    let w_lat = latitude_weights::<f64>(grid);
    let half = n / 2;
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let mut spectrum = vec![0.0; half + 1];
    let mut w_sum = 0.0;
    let norm = (n as f64) * (n as f64);
    for i in 0..h {
        let mut buf: Vec<Complex64> = field
            .index_axis(Axis(0), i)
            .iter()
            .map(|&v| Complex64::new(v as f64, 0.0))
            .collect();
        fft.process(&mut buf);
        let wi = w_lat[i];
        w_sum += wi;
        spectrum[0] += wi * buf[0].norm_sqr() / norm;
        for k in 1..half {
            // fold the conjugate-symmetric half in
            spectrum[k] += wi * (buf[k].norm_sqr() + buf[n - k].norm_sqr()) / norm;
        }
        if n % 2 == 0 {
            spectrum[half] += wi * buf[half].norm_sqr() / norm;
        } else {
            spectrum[half] += wi * (buf[half].norm_sqr() + buf[n - half].norm_sqr()) / norm;
        }
    }
    for v in &mut spectrum {
        *v /= w_sum;
    }
    spectrum
}

/// Mean `ps1d` of one channel over all leads of all forecasts — the
/// spectrum-averaging convention for model evaluation.
pub fn ps1d_forecast_mean(forecasts: &[Forecast], channel_idx: usize, grid: &GridSpec) -> Vec<f64> {
    let mut acc: Option<Vec<f64>> = None;
    let mut count = 0usize;
    for f in forecasts {
        for s in &f.states {
            let sp = ps1d(s.index_axis(Axis(0), channel_idx), grid);
            match &mut acc {
                None => acc = Some(sp),
                Some(a) => a.iter_mut().zip(&sp).for_each(|(x, y)| *x += y),
            }
            count += 1;
        }
    }
    let mut out = acc.unwrap_or_default();
    out.iter_mut().for_each(|v| *v /= count as f64);
    out
}

/// Mean `ps1d` of the truth fields at the valid times covered by `forecasts`.
pub fn ps1d_truth_mean(
    forecasts: &[Forecast],
    truth: &Dataset,
    channel_idx: usize,
) -> Result<Vec<f64>> {
    let grid = &truth.meta.grid;
    let mut acc: Option<Vec<f64>> = None;
    let mut count = 0usize;
    for f in forecasts {
        for k in 0..f.n_steps() {
            let t = truth_index(truth, f.lead_time(k))?;
            let sp = ps1d(truth.channel_field(t, channel_idx), grid);
            match &mut acc {
                None => acc = Some(sp),
                Some(a) => a.iter_mut().zip(&sp).for_each(|(x, y)| *x += y),
            }
            count += 1;
        }
    }
    let mut out = acc.unwrap_or_default();
    out.iter_mut().for_each(|v| *v /= count as f64);
    Ok(out)
}

/// Elementwise predicted / actual spectral power. Truth power below `1e-30`
/// is reported as missing at that wavenumber.
pub fn psd_ratio(pred: &[f64], truth: &[f64]) -> Result<Vec<Option<f64>>> {
    if pred.len() != truth.len() {
        return Err(Error::invalid(format!(
            "spectra have {} and {} wavenumbers",
            pred.len(),
            truth.len()
        )));
    }
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(&p, &t)| (t >= 1e-30).then(|| p / t))
        .collect())
}

/// Mean of the present ratio values over the top quartile of wavenumbers
/// (`k >= ceil(3/4 * k_max)`), the band where blurring shows first.
pub fn top_quartile_mean(ratio: &[Option<f64>]) -> Option<f64> {
    let k_max = ratio.len().checked_sub(1)?;
    let start = (3 * k_max).div_ceil(4);
    let vals: Vec<f64> = ratio[start..].iter().filter_map(|v| *v).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// M forecasts of one valid time from successively older init times.
#[derive(Debug, Clone, PartialEq)]
pub struct LaggedEnsemble {
    pub valid_time: DateTime<Utc>,
    /// `[C_p, H, W]` member states at `valid_time`, newest init first.
    pub members: Vec<Array3<f32>>,
    /// Reporting convention: lead of the newest member plus `(M-1)/2` lags.
    pub center_lead_hours: f64,
}

/// Collects the `m` members initialized at `t0 - k*dt` for `k = 0..m`, where
/// `t0` is the newest init time in the store from which `valid_time` is
/// reachable. Only older init times are used — no future information.
pub fn build_lagged_ensemble(
    forecasts: &[Forecast],
    valid_time: DateTime<Utc>,
    m: usize,
    dt_hours: i64,
) -> Result<LaggedEnsemble> {
    if m == 0 {
        return Err(Error::invalid("ensemble size must be at least 1"));
    }
    let reaches = |f: &Forecast| -> Option<i64> {
        let lead = valid_time - f.init_time;
        let hours = lead.num_hours();
        if lead == Duration::hours(hours)
            && hours > 0
            && hours % f.dt_hours == 0
            && (hours / f.dt_hours) as usize <= f.n_steps()
        {
            Some(hours)
        } else {
            None
        }
    };
    let t0 = forecasts
        .iter()
        .filter(|f| reaches(f).is_some())
        .map(|f| f.init_time)
        .max()
        .ok_or_else(|| {
            Error::invalid(format!("no forecast in the store reaches {valid_time}"))
        })?;
    let mut members = Vec::with_capacity(m);
    let mut missing = Vec::new();
    for k in 0..m {
        let init = t0 - Duration::hours(dt_hours * k as i64);
        match forecasts
            .iter()
            .find(|f| f.init_time == init && reaches(f).is_some())
        {
            Some(f) => {
                let lead_idx = (reaches(f).unwrap() / f.dt_hours) as usize - 1;
                members.push(f.states[lead_idx].clone());
            }
            None => missing.push(init.to_rfc3339()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::invalid(format!(
            "lagged ensemble at {valid_time} is missing init times: {}",
            missing.join(", ")
        )));
    }
    let newest_lead = (valid_time - t0).num_hours() as f64;
    Ok(LaggedEnsemble {
        valid_time,
        members,
        center_lead_hours: newest_lead + dt_hours as f64 * (m as f64 - 1.0) / 2.0,
    })
}

/// Lagged-ensemble scores for one channel at one valid time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleScores {
    /// Latitude-weighted RMSE of the member mean.
    pub ens_mean_rmse: f64,
    /// sqrt of the lat-weighted mean of per-cell sample variances (divisor
    /// `M - 1`); missing for `M < 2`.
    pub spread: Option<f64>,
    /// spread / ens_mean_rmse, with no inflation factor; missing when either
    /// ingredient is missing or the RMSE is zero.
    pub spread_skill: Option<f64>,
    /// Lat-weighted mean of per-cell ensemble CRPS.
    pub crps: f64,
}

/// Per-cell ensemble CRPS averaged with latitude weights. The default
/// estimator is `(1/M) sum |x_i - y| - (1/(2M^2)) sum_ij |x_i - x_j|`;
/// `fair` switches the second divisor to `2M(M-1)`.
pub fn crps_field(
    members: &[ArrayView2<'_, f32>],
    truth: ArrayView2<'_, f32>,
    w_lat: &Array1<f64>,
    fair: bool,
) -> Result<f64> {
    let m = members.len();
    if m == 0 {
        return Err(Error::invalid("CRPS needs at least one member"));
    }
    if fair && m < 2 {
        return Err(Error::invalid("fair CRPS needs at least two members"));
    }
    let pair_div = if fair {
        2.0 * (m * (m - 1)) as f64
    } else {
        2.0 * (m * m) as f64
    };
    let (h, w) = truth.dim();
    Ok(weighted_mean(w_lat, h, w, |i, j| {
        let y = truth[[i, j]] as f64;
        let mut term1 = 0.0;
        let mut term2 = 0.0;
        for a in 0..m {
            let xa = members[a][[i, j]] as f64;
            term1 += (xa - y).abs();
            for mb in members {
                term2 += (xa - mb[[i, j]] as f64).abs();
            }
        }
        term1 / m as f64 - term2 / pair_div
    }))
}

/// Ensemble spread: sqrt of the lat-weighted spatial mean of per-cell sample
/// variances across members. Errors for `M < 2`.
pub fn ensemble_spread(members: &[ArrayView2<'_, f32>], w_lat: &Array1<f64>) -> Result<f64> {
    let m = members.len();
    if m < 2 {
        return Err(Error::invalid("spread needs at least two members"));
    }
    let (h, w) = members[0].dim();
    Ok(weighted_mean(w_lat, h, w, |i, j| {
        let mut mean = 0.0;
        for mem in members {
            mean += mem[[i, j]] as f64;
        }
        mean /= m as f64;
        let mut var = 0.0;
        for mem in members {
            let d = mem[[i, j]] as f64 - mean;
            var += d * d;
        }
        var / (m - 1) as f64
    })
    .sqrt())
}

/// All lagged-ensemble scores for one channel. `truth` is the full state at
/// the ensemble's valid time.
pub fn ensemble_scores(
    ensemble: &LaggedEnsemble,
    truth: ArrayView2<'_, f32>,
    grid: &GridSpec,
    channel_idx: usize,
    fair: bool,
) -> Result<EnsembleScores> {
    let m = ensemble.members.len();
    if m == 0 {
        return Err(Error::invalid("empty ensemble"));
    }
    let w_lat = latitude_weights::<f64>(grid);
    let fields: Vec<ArrayView2<'_, f32>> = ensemble
        .members
        .iter()
        .map(|s| s.index_axis(Axis(0), channel_idx))
        .collect();
    let (h, w) = truth.dim();
    let mut mean = Array2::<f32>::zeros((h, w));
    for f in &fields {
        mean += f;
    }
    mean /= m as f32;
    let ens_mean_rmse = lat_rmse_field(mean.view(), truth, &w_lat);
    let spread = if m >= 2 {
        Some(ensemble_spread(&fields, &w_lat)?)
    } else {
        None
    };
    let spread_skill = spread.and_then(|s| (ens_mean_rmse > 0.0).then(|| s / ens_mean_rmse));
    let crps = crps_field(&fields, truth, &w_lat, fair)?;
    Ok(EnsembleScores {
        ens_mean_rmse,
        spread,
        spread_skill,
        crps,
    })
}

/// One ablation cell in a score table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub name: String,
    pub channel_weighting: bool,
    pub n_steps: usize,
    pub lat_weighting: bool,
    /// RMSE series for the reported channel; `None` marks a run that never
    /// produced scores.
    pub series: Option<MetricSeries>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub channel_weighting: bool,
    pub n_steps: usize,
    pub lat_weighting: bool,
    /// One value per requested lead.
    pub values: Vec<f64>,
    /// Per lead: true when this row attains the column minimum.
    pub best: Vec<bool>,
}

/// Ablation score table: rows are runs, columns are lead times, column
/// minima flagged. Missing runs are listed in the footer rather than
/// failing the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub channel: String,
    pub lead_hours: Vec<i64>,
    pub rows: Vec<ReportRow>,
    pub missing_runs: Vec<String>,
}

pub fn score_report(runs: &[RunEntry], channel: &str, lead_hours: &[i64]) -> Result<ScoreReport> {
    let mut rows = Vec::new();
    let mut missing_runs = Vec::new();
    for run in runs {
        let Some(series) = &run.series else {
            missing_runs.push(run.name.clone());
            continue;
        };
        series.validate()?;
        let values = lead_hours
            .iter()
            .map(|lh| {
                series
                    .lead_hours
                    .iter()
                    .position(|x| x == lh)
                    .map(|i| series.values[i])
                    .ok_or_else(|| {
                        Error::invalid(format!("run {} lacks lead {lh}h", run.name))
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(ReportRow {
            name: run.name.clone(),
            channel_weighting: run.channel_weighting,
            n_steps: run.n_steps,
            lat_weighting: run.lat_weighting,
            values,
            best: vec![false; lead_hours.len()],
        });
    }
    for col in 0..lead_hours.len() {
        if let Some(min) = rows
            .iter()
            .map(|r| r.values[col])
            .min_by(|a, b| a.total_cmp(b))
        {
            for r in &mut rows {
                r.best[col] = r.values[col] == min;
            }
        }
    }
    Ok(ScoreReport {
        channel: channel.into(),
        lead_hours: lead_hours.to_vec(),
        rows,
        missing_runs,
    })
}

impl ScoreReport {
    /// CSV with one row per run. Columns: `run`, the three ablation axes,
    /// then `rmse_<lead>h` and `best_<lead>h` per lead. Missing runs appear
    /// as trailing `# missing:` comment lines.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("run,channel_weighting,n_steps,lat_weighting");
        for lh in &self.lead_hours {
            write!(out, ",rmse_{lh}h,best_{lh}h").unwrap();
        }
        out.push('\n');
        for r in &self.rows {
            write!(
                out,
                "{},{},{},{}",
                r.name, r.channel_weighting, r.n_steps, r.lat_weighting
            )
            .unwrap();
            for (v, b) in r.values.iter().zip(&r.best) {
                write!(out, ",{v:.17e},{b}").unwrap();
            }
            out.push('\n');
        }
        for name in &self.missing_runs {
            writeln!(out, "# missing: {name}").unwrap();
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("report.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("report.json");
        std::fs::write(&json, serde_json::to_string_pretty(self).expect("serializes"))
            .map_err(|e| Error::io(&json, e))?;
        Ok(())
    }
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 480.0;
const MARGIN: f64 = 60.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

/// Minimal line plot: one polyline per named series, linear axes with tick
/// labels, legend down the right edge. `log_y` plots log10 of the values.
pub fn svg_line_plot(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(String, Vec<(f64, f64)>)],
    log_y: bool,
) -> String {
    let points: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|(_, pts)| pts.iter())
        .map(|&(x, y)| (x, if log_y { y.max(1e-300).log10() } else { y }))
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (SVG_W - 2.0 * MARGIN);
    let sy = |y: f64| SVG_H - MARGIN - (y - y0) / (y1 - y0) * (SVG_H - 2.0 * MARGIN);

    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" \
         viewBox=\"0 0 {SVG_W} {SVG_H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{SVG_W}\" height=\"{SVG_H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{title}</text>\n",
        SVG_W / 2.0
    );
    // axes
    write!(
        s,
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{lb}\" text-anchor=\"middle\">{x_label}</text>\n\
         <text x=\"16\" y=\"{cy}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {cy})\">{yl}</text>\n",
        m = MARGIN,
        b = SVG_H - MARGIN,
        r = SVG_W - MARGIN,
        t = MARGIN,
        cx = SVG_W / 2.0,
        lb = SVG_H - 16.0,
        cy = SVG_H / 2.0,
        yl = if log_y {
            format!("log10 {y_label}")
        } else {
            y_label.to_string()
        },
    )
    .unwrap();
    for frac in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let xv = x0 + frac * (x1 - x0);
        let yv = y0 + frac * (y1 - y0);
        write!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{xv:.3}</text>\n\
             <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{yv:.3}</text>\n",
            sx(xv),
            SVG_H - MARGIN + 18.0,
            MARGIN - 6.0,
            sy(yv) + 4.0,
        )
        .unwrap();
    }
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|&(x, y)| (x, if log_y { y.max(1e-300).log10() } else { y }))
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        write!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n\
             <text x=\"{}\" y=\"{}\" fill=\"{color}\">{name}</text>\n",
            path.join(" "),
            SVG_W - MARGIN + 6.0,
            MARGIN + 16.0 * i as f64,
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Arranges pre-rendered SVG documents in a grid of nested `<svg>` cells
/// (for multi-panel figures).
pub fn svg_panel_grid(panels: &[String], cols: usize) -> String {
    let cols = cols.max(1);
    let rows = panels.len().div_ceil(cols);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\">\n",
        SVG_W * cols as f64,
        SVG_H * rows as f64
    );
    for (i, p) in panels.iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        write!(
            s,
            "<svg x=\"{}\" y=\"{}\" width=\"{SVG_W}\" height=\"{SVG_H}\">\n{}</svg>\n",
            c as f64 * SVG_W,
            r as f64 * SVG_H,
            p.trim_start_matches("<svg xmlns=\"http://www.w3.org/2000/svg\" ")
                .trim_start()
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Bundles named metric series for JSON emission.
pub fn metric_bundle(series: &[MetricSeries]) -> BTreeMap<String, MetricSeries> {
    series
        .iter()
        .map(|s| (format!("{}/{}", s.metric, s.channel), s.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{
        compute_norm_stats, generate_toy_dataset, Splits, StateTensor, ToyConfig,
    };
    use crate::grid::make_grid;
    use crate::rollout::{climatology_forecast, persistence_forecast};
    use chrono::TimeZone;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn start_time() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2002, 3, 1, 0, 0, 0).unwrap()
    }

    fn toy_dataset(seed: u64, n_times: usize) -> Dataset {
        let grid = make_grid(8, 16).unwrap();
        let cfg = ToyConfig::with_default_omegas(2, seed, n_times);
        let splits = Splits::contiguous(n_times - 6, 3, 3);
        let mut ds = generate_toy_dataset(&cfg, &grid, splits, start_time()).unwrap();
        ds.meta.stats = Some(compute_norm_stats(&ds).unwrap());
        ds
    }

    fn truth_forecast(ds: &Dataset, t: usize, n_steps: usize) -> Forecast {
        // a "perfect" forecast copied straight from the dataset
        let n_prog = ds.meta.schema.n_prognostic();
        Forecast {
            init_time: ds.meta.time(t),
            dt_hours: ds.meta.dt_hours,
            states: (1..=n_steps)
                .map(|k| {
                    ds.state(t + k)
                        .slice(ndarray::s![..n_prog, .., ..])
                        .to_owned()
                })
                .collect(),
            source: "truth-copy".into(),
        }
    }

    fn gauss(rng: &mut ChaCha8Rng) -> f64 {
        // Box-Muller from two uniforms
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    #[test]
    fn perfect_forecast_scores_zero_rmse_and_unit_acc() {
        let ds = toy_dataset(90, 16);
        let fcs = vec![truth_forecast(&ds, 0, 3), truth_forecast(&ds, 2, 3)];
        let rmse = lat_rmse(&fcs, &ds, "t2m").unwrap();
        assert_eq!(rmse.lead_hours, vec![6, 12, 18]);
        assert_eq!(rmse.n_inits, 2);
        assert!(rmse.values.iter().all(|&v| v == 0.0));
        let clim = ds.climatology();
        let a = acc(&fcs, &ds, &clim, "t2m").unwrap();
        assert!(a.values.iter().all(|&v| (v - 1.0).abs() < 1e-12), "{:?}", a.values);
    }

    #[test]
    fn uniform_error_scores_exactly_delta() {
        let ds = toy_dataset(91, 16);
        let mut fc = truth_forecast(&ds, 0, 2);
        for s in &mut fc.states {
            s.mapv_inplace(|v| v + 0.25);
        }
        let rmse = lat_rmse(&[fc], &ds, "t2m").unwrap();
        for v in rmse.values {
            assert!((v - 0.25).abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn negated_anomaly_gives_minus_one_and_climatology_zero() {
        let ds = toy_dataset(92, 16);
        // round to f32 so the climatology forecast's anomaly is exactly zero
        let clim = ds.climatology().mapv(|v| v as f32 as f64);
        let mut fc = truth_forecast(&ds, 1, 2);
        for (k, s) in fc.states.iter_mut().enumerate() {
            let t = 2 + k;
            for c in 0..2 {
                for i in 0..8 {
                    for j in 0..16 {
                        let truth = ds.channel_field(t, c)[[i, j]] as f64;
                        s[[c, i, j]] = (2.0 * clim[[c, i, j]] - truth) as f32;
                    }
                }
            }
        }
        let a = acc(&[fc], &ds, &clim, "t2m").unwrap();
        for v in a.values {
            assert!((v + 1.0).abs() < 1e-5, "{v}");
        }
        let cf = climatology_forecast(&clim, ds.meta.time(1), 6, 2);
        let az = acc(std::slice::from_ref(&cf), &ds, &clim, "t2m").unwrap();
        assert!(az.values.iter().all(|&v| v == 0.0));
        // climatology RMSE = weighted anomaly magnitude, by direct computation
        let r = lat_rmse(&[cf], &ds, "t2m").unwrap();
        let w_lat = latitude_weights::<f64>(&ds.meta.grid);
        for (k, &v) in r.values.iter().enumerate() {
            let t = 2 + k;
            let expect = weighted_mean(&w_lat, 8, 16, |i, j| {
                let d = ds.channel_field(t, 0)[[i, j]] as f64 - clim[[0, i, j]];
                d * d
            })
            .sqrt();
            assert!((v - expect).abs() < 1e-7, "{v} vs {expect}");
        }
    }

    #[test]
    fn misaligned_forecast_is_an_alignment_error() {
        let ds = toy_dataset(93, 16);
        let mut fc = truth_forecast(&ds, 0, 2);
        fc.init_time += Duration::hours(1);
        assert!(lat_rmse(&[fc.clone()], &ds, "t2m").is_err());
        fc.init_time = ds.meta.time(ds.meta.n_times - 1);
        assert!(matches!(
            lat_rmse(&[fc], &ds, "t2m"),
            Err(Error::OutOfRange(_))
        ));
    }

    #[test]
    fn deterministic_metrics_match_double_loop_references() {
        // >= 100 random cases on grids up to 64x128, 1e-6 relative
        let mut rng = ChaCha8Rng::seed_from_u64(94);
        for case in 0..120 {
            let h = rng.gen_range(2..=64);
            let w = rng.gen_range(2..=128);
            let grid = make_grid(h, w).unwrap();
            let w_lat = latitude_weights::<f64>(&grid);
            let pred = Array2::<f32>::from_shape_fn((h, w), |_| rng.gen::<f32>() * 4.0 - 2.0);
            let truth = Array2::<f32>::from_shape_fn((h, w), |_| rng.gen::<f32>() * 4.0 - 2.0);
            let clim = Array2::<f64>::from_shape_fn((h, w), |_| rng.gen::<f64>() - 0.5);

            // brute-force f64 references
            let (mut num, mut den) = (0.0f64, 0.0f64);
            let (mut cn, mut cf, mut co) = (0.0f64, 0.0f64, 0.0f64);
            for i in 0..h {
                for j in 0..w {
                    let d = pred[[i, j]] as f64 - truth[[i, j]] as f64;
                    num += w_lat[i] * d * d;
                    den += w_lat[i];
                    let af = pred[[i, j]] as f64 - clim[[i, j]];
                    let ao = truth[[i, j]] as f64 - clim[[i, j]];
                    cn += w_lat[i] * af * ao;
                    cf += w_lat[i] * af * af;
                    co += w_lat[i] * ao * ao;
                }
            }
            let rmse_ref = (num / den).sqrt();
            let acc_ref = cn / (cf * co).sqrt();

            let rmse = lat_rmse_field(pred.view(), truth.view(), &w_lat);
            assert!(
                (rmse - rmse_ref).abs() / rmse_ref.abs().max(1e-12) < 1e-6,
                "case {case}: rmse {rmse} vs {rmse_ref}"
            );
            let a = acc_field(pred.view(), truth.view(), clim.view(), &w_lat);
            assert!(
                (a - acc_ref).abs() / acc_ref.abs().max(1e-9) < 1e-6,
                "case {case}: acc {a} vs {acc_ref}"
            );
        }
    }

    #[test]
    fn ps1d_localizes_a_pure_zonal_mode() {
        let grid = make_grid(6, 32).unwrap();
        let field = Array2::<f32>::from_shape_fn((6, 32), |(_, j)| {
            let lam = std::f64::consts::TAU * j as f64 / 32.0;
            (3.0 * lam).cos() as f32
        });
        let sp = ps1d(field.view(), &grid);
        assert_eq!(sp.len(), 17);
        for (k, &p) in sp.iter().enumerate() {
            if k == 3 {
                // cos with amplitude 1 has variance 1/2; f32 inputs round
                assert!((p - 0.5).abs() < 1e-6, "power at k=3: {p}");
            } else {
                assert!(p < 1e-12, "leak at k={k}: {p}");
            }
        }
        let flat = Array2::<f32>::from_elem((6, 32), 2.5);
        let sp = ps1d(flat.view(), &grid);
        assert!(sp[1..].iter().all(|&p| p < 1e-12));
        assert!((sp[0] - 6.25).abs() < 1e-9);
    }

    #[test]
    fn ps1d_preserves_variance_parseval() {
        let mut rng = ChaCha8Rng::seed_from_u64(95);
        for &(h, w) in &[(4usize, 16usize), (8, 31), (16, 64)] {
            let grid = make_grid(h, w).unwrap();
            let w_lat = latitude_weights::<f64>(&grid);
            let field = Array2::<f32>::from_shape_fn((h, w), |_| rng.gen::<f32>() * 2.0 - 1.0);
            let sp = ps1d(field.view(), &grid);
            assert!(sp.iter().all(|&p| p >= 0.0));
            let total: f64 = sp[1..].iter().sum();
            let var_ref = weighted_mean(&w_lat, h, 1, |i, _| {
                let row = field.index_axis(Axis(0), i);
                let mean = row.iter().map(|&v| v as f64).sum::<f64>() / w as f64;
                row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / w as f64
            });
            assert!(
                (total - var_ref).abs() / var_ref < 1e-6,
                "{h}x{w}: {total} vs {var_ref}"
            );
        }
    }

    #[test]
    fn psd_ratio_behaves_and_flags_missing_truth() {
        let truth = vec![1.0, 2.0, 4.0, 1e-31];
        let r = psd_ratio(&truth, &truth).unwrap();
        assert_eq!(&r[..3], &[Some(1.0), Some(1.0), Some(1.0)]);
        assert_eq!(r[3], None);
        let pred: Vec<f64> = truth.iter().map(|v| 2.0 * v).collect();
        let r = psd_ratio(&pred, &truth).unwrap();
        assert_eq!(&r[..3], &[Some(2.0), Some(2.0), Some(2.0)]);
        assert!(psd_ratio(&truth[..2], &truth).is_err());
    }

    #[test]
    fn low_pass_prediction_shows_ratio_below_one_at_high_wavenumbers() {
        let ds = toy_dataset(96, 16);
        let grid = &ds.meta.grid;
        let truth_sp = ps1d(ds.channel_field(0, 0), grid);
        // blur zonally with a centered 5-point moving average
        let f = ds.channel_field(0, 0);
        let (h, w) = f.dim();
        let blurred = Array2::<f32>::from_shape_fn((h, w), |(i, j)| {
            (-2i64..=2).map(|o| f[[i, (j as i64 + o).rem_euclid(w as i64) as usize]]).sum::<f32>()
                / 5.0
        });
        let pred_sp = ps1d(blurred.view(), grid);
        let ratio = psd_ratio(&pred_sp, &truth_sp).unwrap();
        let tq = top_quartile_mean(&ratio).unwrap();
        assert!(tq < 1.0, "top-quartile ratio {tq}");
    }

    fn static_store(n: usize, value: f32, n_steps: usize) -> Vec<Forecast> {
        (0..n)
            .map(|i| {
                let init_time = start_time() + Duration::hours(6 * i as i64);
                Forecast {
                    init_time,
                    dt_hours: 6,
                    states: vec![Array3::from_elem((1, 2, 4), value); n_steps],
                    source: "static".into(),
                }
            })
            .collect()
    }

    #[test]
    fn lagged_ensemble_spans_the_documented_lag_window() {
        let store = static_store(12, 1.0, 10);
        let valid = start_time() + Duration::hours(6 * 11);
        let ens = build_lagged_ensemble(&store, valid, 9, 6).unwrap();
        assert_eq!(ens.members.len(), 9);
        // newest member has lead 6h; oldest init is 48h before the newest
        assert_eq!(ens.center_lead_hours, 6.0 + 24.0);
        assert!(ens.members.windows(2).all(|p| p[0] == p[1]));
        let one = build_lagged_ensemble(&store, valid, 1, 6).unwrap();
        assert_eq!(one.members.len(), 1);
    }

    #[test]
    fn missing_members_are_listed_by_init_time() {
        let mut store = static_store(6, 1.0, 10);
        let gone = store.remove(2).init_time;
        let valid = start_time() + Duration::hours(6 * 6);
        let err = build_lagged_ensemble(&store, valid, 5, 6).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(&gone.to_rfc3339()), "{msg}");
    }

    #[test]
    fn perfect_ensemble_scores_are_degenerate() {
        let grid = make_grid(2, 4).unwrap();
        let truth = Array2::<f32>::from_elem((2, 4), 1.5);
        let ens = LaggedEnsemble {
            valid_time: start_time(),
            members: vec![Array3::from_elem((1, 2, 4), 1.5); 3],
            center_lead_hours: 12.0,
        };
        let s = ensemble_scores(&ens, truth.view(), &grid, 0, false).unwrap();
        assert_eq!(s.ens_mean_rmse, 0.0);
        assert_eq!(s.spread, Some(0.0));
        assert_eq!(s.spread_skill, None); // zero RMSE -> undefined, missing
        assert_eq!(s.crps, 0.0);
    }

    #[test]
    fn two_member_single_cell_crps_is_one_half() {
        let w_lat = Array1::<f64>::ones(1);
        let m0 = Array2::<f32>::from_elem((1, 1), 0.0);
        let m1 = Array2::<f32>::from_elem((1, 1), 2.0);
        let truth = Array2::<f32>::from_elem((1, 1), 1.0);
        let c = crps_field(&[m0.view(), m1.view()], truth.view(), &w_lat, false).unwrap();
        assert!((c - 0.5).abs() < 1e-12, "{c}");
    }

    #[test]
    fn single_member_crps_is_the_weighted_absolute_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(97);
        let grid = make_grid(5, 9).unwrap();
        let w_lat = latitude_weights::<f64>(&grid);
        let m = Array2::<f32>::from_shape_fn((5, 9), |_| rng.gen::<f32>());
        let y = Array2::<f32>::from_shape_fn((5, 9), |_| rng.gen::<f32>());
        let c = crps_field(&[m.view()], y.view(), &w_lat, false).unwrap();
        let mae = weighted_mean(&w_lat, 5, 9, |i, j| (m[[i, j]] as f64 - y[[i, j]] as f64).abs());
        assert_eq!(c, mae);
        assert!(crps_field(&[m.view()], y.view(), &w_lat, true).is_err());
        assert!(ensemble_spread(&[m.view()], &w_lat).is_err());
    }

    #[test]
    fn crps_estimator_matches_the_brier_integral() {
        // numerically integrate (F(t) - 1{t >= y})^2 over the step CDF
        let mut rng = ChaCha8Rng::seed_from_u64(98);
        for case in 0..60 {
            let m = rng.gen_range(1..=8);
            let xs: Vec<f64> = (0..m).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let y = rng.gen::<f64>() * 4.0 - 2.0;
            let w_lat = Array1::<f64>::ones(1);
            let members: Vec<Array2<f32>> = xs
                .iter()
                .map(|&x| Array2::from_elem((1, 1), x as f32))
                .collect();
            let views: Vec<ArrayView2<'_, f32>> = members.iter().map(|a| a.view()).collect();
            let truth = Array2::<f32>::from_elem((1, 1), y as f32);
            let est = crps_field(&views, truth.view(), &w_lat, false).unwrap();

            let lo = xs.iter().cloned().fold(y, f64::min) - 1.0;
            let hi = xs.iter().cloned().fold(y, f64::max) + 1.0;
            let n = 400_000;
            let dt = (hi - lo) / n as f64;
            let yf = truth[[0, 0]] as f64; // integrate against the f32-rounded values
            let xf: Vec<f64> = members.iter().map(|a| a[[0, 0]] as f64).collect();
            let mut integral = 0.0;
            for s in 0..n {
                let t = lo + (s as f64 + 0.5) * dt;
                let f = xf.iter().filter(|&&x| x <= t).count() as f64 / m as f64;
                let h = f64::from(t >= yf);
                integral += (f - h) * (f - h) * dt;
            }
            assert!(
                (est - integral).abs() < 1e-3,
                "case {case} (m={m}): {est} vs {integral}"
            );
        }
    }

    #[test]
    fn ensemble_mean_rmse_never_exceeds_mean_member_rmse() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let grid = make_grid(6, 12).unwrap();
        let w_lat = latitude_weights::<f64>(&grid);
        for _ in 0..20 {
            let m = rng.gen_range(2..=6);
            let members: Vec<Array3<f32>> = (0..m)
                .map(|_| Array3::from_shape_fn((1, 6, 12), |_| rng.gen::<f32>() * 2.0 - 1.0))
                .collect();
            let truth = Array2::<f32>::from_shape_fn((6, 12), |_| rng.gen::<f32>() * 2.0 - 1.0);
            let ens = LaggedEnsemble {
                valid_time: start_time(),
                members: members.clone(),
                center_lead_hours: 6.0,
            };
            let s = ensemble_scores(&ens, truth.view(), &grid, 0, false).unwrap();
            let mean_rmse = members
                .iter()
                .map(|mem| lat_rmse_field(mem.index_axis(Axis(0), 0), truth.view(), &w_lat))
                .sum::<f64>()
                / m as f64;
            assert!(s.ens_mean_rmse <= mean_rmse + 1e-12);
        }
    }

    #[test]
    fn spread_skill_of_iid_gaussians_matches_theory() {
        // M = 9 members and truth all i.i.d. N(0,1) over >= 1e6 cells:
        // E[mean-error variance] = 1 + 1/M, E[sample variance] = 1, so
        // spread/skill -> sqrt(M/(M+1)) = sqrt(9/10)
        let m = 9;
        let (h, w) = (1000, 1024);
        let grid = make_grid(h, w).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let members: Vec<Array3<f32>> = (0..m)
            .map(|_| Array3::from_shape_fn((1, h, w), |_| gauss(&mut rng) as f32))
            .collect();
        let truth = Array2::<f32>::from_shape_fn((h, w), |_| gauss(&mut rng) as f32);
        let ens = LaggedEnsemble {
            valid_time: start_time(),
            members,
            center_lead_hours: 6.0,
        };
        let s = ensemble_scores(&ens, truth.view(), &grid, 0, false).unwrap();
        let target = (9.0f64 / 10.0).sqrt();
        let got = s.spread_skill.unwrap();
        assert!(
            (got - target).abs() < 0.03,
            "spread/skill {got} vs {target}"
        );
    }

    fn fake_series(vals: &[f64]) -> MetricSeries {
        MetricSeries {
            metric: "rmse".into(),
            channel: "t2m".into(),
            lead_hours: vec![24, 48],
            values: vals.to_vec(),
            n_inits: 3,
        }
    }

    #[test]
    fn score_report_flags_column_minima_and_missing_runs() {
        let mut runs = Vec::new();
        let mut idx = 0;
        for cw in [false, true] {
            for ns in [1usize, 8] {
                for lw in [false, true] {
                    idx += 1;
                    let series = (idx != 5).then(|| {
                        fake_series(&[1.0 + idx as f64 * 0.1, 2.0 - idx as f64 * 0.05])
                    });
                    runs.push(RunEntry {
                        name: format!("cw{cw}-n{ns}-lw{lw}"),
                        channel_weighting: cw,
                        n_steps: ns,
                        lat_weighting: lw,
                        series,
                    });
                }
            }
        }
        let report = score_report(&runs, "t2m", &[24, 48]).unwrap();
        assert_eq!(report.rows.len(), 7);
        assert_eq!(report.missing_runs, vec!["cw1-n1-lwfalse".replace("1-n", "true-n")]);
        // brute-force scan: the flagged row per column is the true minimum
        for col in 0..2 {
            let min = report
                .rows
                .iter()
                .map(|r| r.values[col])
                .fold(f64::INFINITY, f64::min);
            for r in &report.rows {
                assert_eq!(r.best[col], r.values[col] == min, "{} col {col}", r.name);
            }
            assert_eq!(report.rows.iter().filter(|r| r.best[col]).count(), 1);
        }
        let csv = report.to_csv();
        assert!(csv.starts_with("run,channel_weighting,n_steps,lat_weighting,rmse_24h,best_24h,rmse_48h,best_48h\n"));
        assert!(csv.contains("# missing: cwtrue-n1-lwfalse"));

        let dir = tempfile::tempdir().unwrap();
        report.write(dir.path()).unwrap();
        let back: ScoreReport = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("report.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn persistence_rmse_grows_with_lead_on_toy_dynamics() {
        let ds = toy_dataset(101, 24);
        let init = StateTensor::new(ds.state(0).to_owned(), ds.meta.time(0)).unwrap();
        let fc = persistence_forecast(&init, 2, 6, 4);
        let r = lat_rmse(&[fc], &ds, "t2m").unwrap();
        assert!(
            r.values.windows(2).all(|p| p[1] > p[0]),
            "not increasing: {:?}",
            r.values
        );
    }

    #[test]
    fn svg_plots_render() {
        let series = vec![
            ("a".to_string(), vec![(0.0, 1.0), (1.0, 0.5), (2.0, 0.25)]),
            ("b".to_string(), vec![(0.0, 2.0), (1.0, 1.0), (2.0, 0.5)]),
        ];
        let svg = svg_line_plot("demo", "lead (h)", "rmse", &series, false);
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("demo") && svg.contains("rmse"));
        let grid_svg = svg_panel_grid(&[svg.clone(), svg.clone(), svg], 2);
        assert_eq!(grid_svg.matches("<polyline").count(), 6);
    }
}
