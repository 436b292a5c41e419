//! Synthetic atmosphere with exactly computable dynamics: Gaussian random
//! fields advected by differential rotation with zonal spectral diffusion.

use ndarray::{Array2, Array4, ArrayView2, Axis};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;

use super::{toy_schema, Dataset, DatasetMeta, Splits, ToyConfig, DATASET_FORMAT_VERSION};
use crate::grid::{cos_zenith, GridSpec};
use crate::{Result, Scalar};

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; u1 in (0, 1]
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// One row of a random field with zonal power proportional to `k^-slope`.
fn grf_row(n_lon: usize, slope: f64, rng: &mut ChaCha8Rng, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let n = n_lon;
    let mut coeffs = vec![Complex64::new(0.0, 0.0); n];
    let half = n / 2;
    for k in 1..half {
        let amp = (k as f64).powf(-slope / 2.0);
        let re = normal(rng) * amp / 2f64.sqrt();
        let im = normal(rng) * amp / 2f64.sqrt();
        coeffs[k] = Complex64::new(re, im);
        coeffs[n - k] = coeffs[k].conj();
    }
    // Nyquist stays zero: a fractional Fourier shift cannot move Nyquist
    // energy unitarily, so toy fields are band-limited below it.
    let ifft = planner.plan_fft_inverse(n);
    ifft.process(&mut coeffs);
    // unnormalized inverse; scale keeps coefficient amplitudes O(1)
    coeffs.iter().map(|c| c.re / (n as f64).sqrt()).collect()
}

/// Random field with the requested zonal spectral slope, lightly smoothed
/// across latitude, standardized to zero mean and unit variance.
fn grf_field(grid: &GridSpec, slope: f64, seed: u64) -> Array2<f64> {
    let (n_lat, n_lon) = grid.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut planner = FftPlanner::new();
    let mut field = Array2::<f64>::zeros((n_lat, n_lon));
    for i in 0..n_lat {
        let row = grf_row(n_lon, slope, &mut rng, &mut planner);
        for (j, v) in row.into_iter().enumerate() {
            field[[i, j]] = v;
        }
    }
    // meridional Gaussian smoothing; preserves the expected zonal slope
    // because rows are independent and identically distributed
    let sigma = 1.5f64;
    let radius = 3i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|j| (-(j as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let mut smoothed = Array2::<f64>::zeros((n_lat, n_lon));
    for i in 0..n_lat {
        let mut wsum = 0.0;
        for (o, kj) in (-radius..=radius).zip(&kernel) {
            let ii = i as i64 + o;
            if ii < 0 || ii >= n_lat as i64 {
                continue;
            }
            wsum += kj;
            for j in 0..n_lon {
                smoothed[[i, j]] += kj * field[[ii as usize, j]];
            }
        }
        for j in 0..n_lon {
            smoothed[[i, j]] /= wsum;
        }
    }
    // enforce the target mean zonal spectrum exactly: rescale each wavenumber
    // so the row-averaged power is k^-slope (fit noise would otherwise make
    // the realized slope wander by a few tenths)
    let fft = planner.plan_fft_forward(n_lon);
    let ifft = planner.plan_fft_inverse(n_lon);
    let half = n_lon / 2;
    let mut rows_fft: Vec<Vec<Complex64>> = Vec::with_capacity(n_lat);
    for i in 0..n_lat {
        let mut buf: Vec<Complex64> = (0..n_lon)
            .map(|j| Complex64::new(smoothed[[i, j]], 0.0))
            .collect();
        fft.process(&mut buf);
        rows_fft.push(buf);
    }
    let mut mean_power = vec![0.0f64; half];
    for buf in &rows_fft {
        for k in 1..half {
            mean_power[k] += buf[k].norm_sqr() / n_lat as f64;
        }
    }
    for buf in rows_fft.iter_mut() {
        for k in 1..half {
            if mean_power[k] > 0.0 {
                let scale = ((k as f64).powf(-slope) / mean_power[k]).sqrt();
                buf[k] *= scale;
                buf[n_lon - k] = buf[k].conj();
            }
        }
        buf[0] = Complex64::new(0.0, 0.0);
        buf[half] = Complex64::new(0.0, 0.0);
        ifft.process(buf);
    }
    let mut shaped = Array2::<f64>::zeros((n_lat, n_lon));
    for (i, buf) in rows_fft.iter().enumerate() {
        for j in 0..n_lon {
            shaped[[i, j]] = buf[j].re / n_lon as f64;
        }
    }
    let std = shaped.mapv(|v| v * v).mean().unwrap().sqrt();
    shaped.mapv(|v| v / std)
}

/// One toy-dynamics step: circular zonal shift by `omega0 + omega1 cos(lat)`
/// degrees per latitude row (Fourier phase shift, exact for fractional
/// shifts), then zonal diffusion `exp(-nu k^2 / k_max^2)`.
pub fn advect_step<T: Scalar>(
    field: ArrayView2<'_, T>,
    grid: &GridSpec,
    omega0: f64,
    omega1: f64,
    nu: f64,
) -> Array2<T> {
    let (n_lat, n_lon) = grid.shape();
    assert_eq!(field.dim(), (n_lat, n_lon), "field/grid shape mismatch");
    let dlam = 360.0 / n_lon as f64;
    let k_max = (n_lon / 2) as f64;
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n_lon);
    let ifft = planner.plan_fft_inverse(n_lon);
    let mut out = Array2::<T>::zeros((n_lat, n_lon));
    let mut buf = vec![Complex64::new(0.0, 0.0); n_lon];
    for i in 0..n_lat {
        let phi = grid.lat_centers()[i].to_radians();
        let shift_cols = (omega0 + omega1 * phi.cos()) / dlam;
        for j in 0..n_lon {
            buf[j] = Complex64::new(field[[i, j]].as_f64(), 0.0);
        }
        fft.process(&mut buf);
        for (m, c) in buf.iter_mut().enumerate() {
            let k_signed = if m <= n_lon / 2 {
                m as f64
            } else {
                m as f64 - n_lon as f64
            };
            let k_abs = k_signed.abs();
            let phase = -std::f64::consts::TAU * k_signed * shift_cols / n_lon as f64;
            let damp = (-nu * k_abs * k_abs / (k_max * k_max)).exp();
            *c *= Complex64::from_polar(damp, phase);
        }
        ifft.process(&mut buf);
        for j in 0..n_lon {
            out[[i, j]] = T::real(buf[j].re / n_lon as f64);
        }
    }
    out
}

/// Generate the full toy dataset in memory. Deterministic in `(cfg, grid)`.
pub fn generate_toy_dataset(
    cfg: &ToyConfig,
    grid: &GridSpec,
    splits: Splits,
    start_time: chrono::DateTime<chrono::Utc>,
) -> Result<Dataset> {
    cfg.validate()?;
    splits.validate(cfg.n_times)?;
    let schema = toy_schema(cfg.n_prog_channels)?;
    let (n_lat, n_lon) = grid.shape();
    let n_prog = cfg.n_prog_channels;
    let n_chan = schema.len();
    let meta = DatasetMeta {
        version: DATASET_FORMAT_VERSION,
        schema: schema.clone(),
        grid: grid.clone(),
        dt_hours: cfg.dt_hours,
        start_time,
        n_times: cfg.n_times,
        splits,
        stats: None,
        shards: Vec::new(),
        toy: Some(cfg.clone()),
    };

    let mut data = Array4::<f32>::zeros((cfg.n_times, n_chan, n_lat, n_lon));

    // static stand-ins: smooth seeded fields for land-sea mask and orography
    let lsm = grf_field(grid, 4.0, cfg.seed.wrapping_add(0x15a5_0001)).mapv(|v| v.tanh());
    let orog = grf_field(grid, 4.0, cfg.seed.wrapping_add(0x0406_0002));

    // initial prognostic fields, per-channel offset/scale so normalization
    // statistics are non-trivial
    let mut current: Vec<Array2<f32>> = (0..n_prog)
        .map(|c| {
            let base = grf_field(grid, cfg.spectral_slope, cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(c as u64));
            let offset = 0.5 * c as f64;
            let scale = 1.0 + 0.1 * c as f64;
            base.mapv(|v| (offset + scale * v) as f32)
        })
        .collect();

    for t in 0..cfg.n_times {
        if t > 0 {
            for (c, field) in current.iter_mut().enumerate() {
                *field = advect_step(field.view(), grid, cfg.omega0[c], cfg.omega1[c], cfg.nu);
            }
        }
        for (c, field) in current.iter().enumerate() {
            data.index_axis_mut(Axis(0), t)
                .index_axis_move(Axis(0), c)
                .assign(field);
        }
        let mut statics = data.index_axis_mut(Axis(0), t);
        statics
            .index_axis_mut(Axis(0), n_prog)
            .assign(&lsm.mapv(|v| v as f32));
        statics
            .index_axis_mut(Axis(0), n_prog + 1)
            .assign(&orog.mapv(|v| v as f32));
        statics
            .index_axis_mut(Axis(0), n_prog + 2)
            .assign(&cos_zenith::<f32>(meta.time(t), grid));
    }

    Ok(Dataset { meta, data })
}

/// One-sided zonal power spectrum of a single field, averaged over rows
/// (plain mean). Returns power at wavenumbers `0..=n_lon/2`.
pub fn zonal_power<T: Scalar>(field: ArrayView2<'_, T>) -> Vec<f64> {
    let (n_lat, n_lon) = field.dim();
    let half = n_lon / 2;
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n_lon);
    let mut power = vec![0.0f64; half + 1];
    let mut buf = vec![Complex64::new(0.0, 0.0); n_lon];
    for i in 0..n_lat {
        for j in 0..n_lon {
            buf[j] = Complex64::new(field[[i, j]].as_f64(), 0.0);
        }
        fft.process(&mut buf);
        let norm = (n_lon * n_lon) as f64;
        power[0] += buf[0].norm_sqr() / norm;
        for k in 1..half {
            power[k] += (buf[k].norm_sqr() + buf[n_lon - k].norm_sqr()) / norm;
        }
        power[half] += buf[half].norm_sqr() / norm;
    }
    for p in power.iter_mut() {
        *p /= n_lat as f64;
    }
    power
}

/// Least-squares slope of `log power` vs `log k` over `k` in `[k_lo, k_hi]`.
pub fn zonal_power_slope<T: Scalar>(field: ArrayView2<'_, T>, k_lo: usize, k_hi: usize) -> f64 {
    let power = zonal_power(field);
    let pts: Vec<(f64, f64)> = (k_lo..=k_hi.min(power.len() - 1))
        .filter(|&k| power[k] > 0.0)
        .map(|k| ((k as f64).ln(), power[k].ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}
