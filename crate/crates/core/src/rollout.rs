//! Autoregressive inference and reference baseline forecasts.
//!
//! A trained model advances the atmosphere one interval at a time; longer
//! lead times come from feeding each prediction back in as the next input.
//! States are carried in raw (de-normalized) units: in residual mode the raw
//! update is exactly `X + sigma_dX * output` per channel, so an identity
//! model (zero output) reproduces its input bit for bit. Static channels are
//! held fixed across leads except the solar-zenith channel, which is
//! recomputed from the valid time of every step's input.

use std::path::Path;

use chrono::{DateTime, Duration, Utc};
use ndarray::{Array3, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::data::{
    normalize_state, ChannelSchema, NormStats, StateTensor,
};
use crate::graph::Graph;
use crate::grid::{cos_zenith, GridSpec};
use crate::model::{model_forward, ModelConfig, ParamVars, ParameterSet, PredictionMode};
use crate::util::{f32_from_le_bytes, f32_to_le_bytes, read_checksummed, write_checksummed};
use crate::{Error, Result, Scalar};

pub const FORECAST_FORMAT_VERSION: u32 = 1;

/// One forecast trajectory: prognostic states at lead times `dt, 2*dt, ...`,
/// in raw field units.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    pub init_time: DateTime<Utc>,
    pub dt_hours: i64,
    /// `states[k]` is the `[C_p, H, W]` state at lead `(k+1) * dt_hours`.
    pub states: Vec<Array3<f32>>,
    /// Provenance tag: which model or baseline produced this trajectory.
    pub source: String,
}

impl Forecast {
    pub fn n_steps(&self) -> usize {
        self.states.len()
    }

    /// Valid time of the state at 0-based lead index `k`.
    pub fn lead_time(&self, k: usize) -> DateTime<Utc> {
        self.init_time + Duration::hours(self.dt_hours * (k as i64 + 1))
    }

    /// Checks the type invariants: at least one lead, constant shapes, all
    /// values finite.
    pub fn validate(&self) -> Result<()> {
        let first = self
            .states
            .first()
            .ok_or_else(|| Error::invalid("forecast holds no states"))?;
        for (k, s) in self.states.iter().enumerate() {
            if s.dim() != first.dim() {
                return Err(Error::invalid(format!(
                    "forecast state shapes differ: lead {} is {:?}, lead 1 is {:?}",
                    k + 1,
                    s.dim(),
                    first.dim()
                )));
            }
            if !s.iter().all(|v| v.is_finite()) {
                return Err(Error::NumericFailure {
                    context: format!("forecast state at lead index {k}"),
                });
            }
        }
        Ok(())
    }
}

/// Static input channels valid at `time`: mask/orography rows copied from
/// `init`, the solar-zenith channel recomputed from the timestamp.
fn statics_for(
    init: &StateTensor,
    schema: &ChannelSchema,
    grid: &GridSpec,
    time: DateTime<Utc>,
) -> Array3<f32> {
    let n_prog = schema.n_prognostic();
    let (h, w) = grid.shape();
    let mut out = Array3::<f32>::zeros((schema.n_static(), h, w));
    for (s, def) in schema.channels()[n_prog..].iter().enumerate() {
        if def.name == "coszen" {
            out.index_axis_mut(Axis(0), s)
                .assign(&cos_zenith::<f32>(time, grid));
        } else {
            out.index_axis_mut(Axis(0), s)
                .assign(&init.values.index_axis(Axis(0), n_prog + s));
        }
    }
    out
}

/// Rolls the model forward `n_steps` intervals from `init` (a full raw
/// state: prognostics plus statics). Stochastic depth is disabled; repeated
/// calls are bitwise identical, and a longer rollout's leading states equal
/// a shorter one's.
#[allow(clippy::too_many_arguments)]
pub fn rollout<T: Scalar>(
    params: &ParameterSet<T>,
    mcfg: &ModelConfig,
    schema: &ChannelSchema,
    grid: &GridSpec,
    stats: &NormStats,
    init: &StateTensor,
    dt_hours: i64,
    n_steps: usize,
) -> Result<Forecast> {
    let n_prog = schema.n_prognostic();
    if mcfg.in_channels != schema.len() || mcfg.out_channels != n_prog {
        return Err(Error::invalid(format!(
            "model expects {} in / {} out channels, schema has {} / {}",
            mcfg.in_channels,
            mcfg.out_channels,
            schema.len(),
            n_prog
        )));
    }
    if init.values.shape() != [schema.len(), grid.shape().0, grid.shape().1] {
        return Err(Error::invalid(format!(
            "init state shape {:?} does not match schema/grid",
            init.values.shape()
        )));
    }
    if n_steps == 0 {
        return Err(Error::invalid("n_steps must be at least 1"));
    }
    mcfg.validate(grid)?;

    let (h, w) = grid.shape();
    // raw prognostic state carried across steps
    let mut raw = init
        .values
        .slice(ndarray::s![..n_prog, .., ..])
        .to_owned();
    let mut states = Vec::with_capacity(n_steps);
    for k in 0..n_steps {
        let time_k = init.valid_time + Duration::hours(dt_hours * k as i64);
        // assemble the full raw input and normalize its prognostic rows
        let mut full = Array3::<f32>::zeros((schema.len(), h, w));
        full.slice_mut(ndarray::s![..n_prog, .., ..]).assign(&raw);
        full.slice_mut(ndarray::s![n_prog.., .., ..])
            .assign(&statics_for(init, schema, grid, time_k));
        let input = normalize_state(full.view(), schema, stats);

        let out = {
            let mut g = Graph::<T>::no_grad();
            let pv = ParamVars::register(&mut g, params);
            let arr = ArrayD::from_shape_vec(
                IxDyn(&[schema.len(), h, w]),
                input.iter().map(|&v| T::real(v as f64)).collect(),
            )
            .expect("input shape");
            let input_var = g.constant(arr);
            let out_var =
                model_forward(&mut g, input_var, &pv, mcfg, grid, None).map_err(|e| match e {
                    Error::NumericFailure { context } => Error::NumericFailure {
                        context: format!("rollout step {k}: {context}"),
                    },
                    other => other,
                })?;
            g.value(out_var).clone()
        };

        // compose the next raw state
        match mcfg.prediction_mode {
            PredictionMode::Residual => {
                for c in 0..n_prog {
                    let sd = stats.diff_std[c] as f32;
                    let mut row = raw.index_axis_mut(Axis(0), c);
                    for i in 0..h {
                        for j in 0..w {
                            row[[i, j]] += sd * out[IxDyn(&[c, i, j])].as_f64() as f32;
                        }
                    }
                }
            }
            PredictionMode::Direct => {
                for c in 0..n_prog {
                    let (mu, sd) = (stats.mean[c] as f32, stats.std[c] as f32);
                    let mut row = raw.index_axis_mut(Axis(0), c);
                    for i in 0..h {
                        for j in 0..w {
                            row[[i, j]] = mu + sd * out[IxDyn(&[c, i, j])].as_f64() as f32;
                        }
                    }
                }
            }
        }
        if !raw.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericFailure {
                context: format!("rollout step {k}: non-finite state after update"),
            });
        }
        states.push(raw.clone());
    }
    Ok(Forecast {
        init_time: init.valid_time,
        dt_hours,
        states,
        source: "model".into(),
    })
}

/// Baseline: every lead repeats the initial prognostic state.
pub fn persistence_forecast(
    init: &StateTensor,
    n_prog: usize,
    dt_hours: i64,
    n_steps: usize,
) -> Forecast {
    let state = init
        .values
        .slice(ndarray::s![..n_prog, .., ..])
        .to_owned();
    Forecast {
        init_time: init.valid_time,
        dt_hours,
        states: vec![state; n_steps],
        source: "persistence".into(),
    }
}

/// Baseline: every lead is the per-cell training-split time mean.
pub fn climatology_forecast(
    climatology: &Array3<f64>,
    init_time: DateTime<Utc>,
    dt_hours: i64,
    n_steps: usize,
) -> Forecast {
    let state = climatology.mapv(|v| v as f32);
    Forecast {
        init_time,
        dt_hours,
        states: vec![state; n_steps],
        source: "climatology".into(),
    }
}

/// Sidecar for a directory of forecasts sharing schema, grid, and lead axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastSetMeta {
    pub version: u32,
    pub schema: ChannelSchema,
    pub grid: GridSpec,
    pub dt_hours: i64,
    pub n_steps: usize,
    pub init_times: Vec<DateTime<Utc>>,
    pub source: String,
}

/// Writes forecasts to `dir`: `meta.json` plus one `init_NNNN.bin` per
/// init time, each the little-endian `f32` payload of `[L, C, H, W]`
/// (lead-major) followed by an 8-byte checksum, mirroring the dataset
/// shard layout.
pub fn save_forecasts(
    forecasts: &[Forecast],
    schema: &ChannelSchema,
    grid: &GridSpec,
    dir: &Path,
) -> Result<()> {
    let first = forecasts
        .first()
        .ok_or_else(|| Error::invalid("no forecasts to save"))?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in forecasts.iter().enumerate() {
        f.validate()?;
        if f.dt_hours != first.dt_hours
            || f.n_steps() != first.n_steps()
            || f.source != first.source
        {
            return Err(Error::invalid(format!(
                "forecast {i} disagrees with the first on dt/leads/source"
            )));
        }
        let mut payload = Vec::new();
        for s in &f.states {
            let std = s.as_standard_layout();
            payload.extend_from_slice(std.as_slice().unwrap());
        }
        write_checksummed(&dir.join(format!("init_{i:04}.bin")), &f32_to_le_bytes(&payload))?;
    }
    let meta = ForecastSetMeta {
        version: FORECAST_FORMAT_VERSION,
        schema: schema.clone(),
        grid: grid.clone(),
        dt_hours: first.dt_hours,
        n_steps: first.n_steps(),
        init_times: forecasts.iter().map(|f| f.init_time).collect(),
        source: first.source.clone(),
    };
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    std::fs::write(dir.join("meta.json"), json).map_err(|e| Error::io(dir.join("meta.json"), e))?;
    Ok(())
}

/// Inverse of [`save_forecasts`].
pub fn load_forecasts(dir: &Path) -> Result<(ForecastSetMeta, Vec<Forecast>)> {
    let meta_path = dir.join("meta.json");
    let text = std::fs::read_to_string(&meta_path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound {
                path: meta_path.clone(),
            }
        } else {
            Error::io(&meta_path, e)
        }
    })?;
    let meta: ForecastSetMeta = serde_json::from_str(&text).map_err(|e| Error::Malformed {
        path: meta_path.clone(),
        reason: e.to_string(),
    })?;
    if meta.version != FORECAST_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: meta_path,
            found: meta.version,
            expected: FORECAST_FORMAT_VERSION,
        });
    }
    let n_prog = meta.schema.n_prognostic();
    let (h, w) = meta.grid.shape();
    let per_lead = n_prog * h * w;
    let mut forecasts = Vec::with_capacity(meta.init_times.len());
    for (i, &init_time) in meta.init_times.iter().enumerate() {
        let path = dir.join(format!("init_{i:04}.bin"));
        let payload = read_checksummed(&path)?;
        let values = f32_from_le_bytes(&payload, &path)?;
        if values.len() != meta.n_steps * per_lead {
            return Err(Error::Malformed {
                path,
                reason: format!(
                    "expected {} values, found {}",
                    meta.n_steps * per_lead,
                    values.len()
                ),
            });
        }
        let states = values
            .chunks_exact(per_lead)
            .map(|chunk| {
                Array3::from_shape_vec((n_prog, h, w), chunk.to_vec()).expect("lead shape")
            })
            .collect();
        forecasts.push(Forecast {
            init_time,
            dt_hours: meta.dt_hours,
            states,
            source: meta.source.clone(),
        });
    }
    Ok((meta, forecasts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{
        compute_norm_stats, denormalize_prognostic, generate_toy_dataset, Dataset, Splits,
        ToyConfig,
    };
    use crate::grid::make_grid;
    use crate::model;
    use chrono::TimeZone;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_dataset(seed: u64) -> Dataset {
        let grid = make_grid(8, 16).unwrap();
        let cfg = ToyConfig::with_default_omegas(2, seed, 16);
        let start = Utc.with_ymd_and_hms(2001, 6, 1, 0, 0, 0).unwrap();
        let mut ds =
            generate_toy_dataset(&cfg, &grid, Splits::contiguous(10, 3, 3), start).unwrap();
        ds.meta.stats = Some(compute_norm_stats(&ds).unwrap());
        ds
    }

    fn tiny_model(mode: PredictionMode) -> ModelConfig {
        ModelConfig {
            embed_dim: 16,
            depth: 2,
            patch_size: 2,
            n_heads: 4,
            window: (2, 4),
            drop_path_rate: 0.0,
            prediction_mode: mode,
            in_channels: 5,
            out_channels: 2,
        }
    }

    fn init_state(ds: &Dataset, t: usize) -> StateTensor {
        StateTensor::new(ds.state(t).to_owned(), ds.meta.time(t)).unwrap()
    }

    #[test]
    fn identity_model_rollout_equals_persistence_bitwise() {
        let ds = toy_dataset(70);
        let mcfg = tiny_model(PredictionMode::Residual);
        // freshly initialized parameters have a zero head: residual output 0
        let params = model::init_parameters::<f32>(&mcfg, &ds.meta.grid, 71).unwrap();
        let init = init_state(&ds, 0);
        let fc = rollout(
            &params, &mcfg, &ds.meta.schema, &ds.meta.grid, ds.stats().unwrap(), &init, 6, 4,
        )
        .unwrap();
        let pers = persistence_forecast(&init, 2, 6, 4);
        assert_eq!(fc.states, pers.states);
        assert_eq!(fc.lead_time(3), pers.lead_time(3));
    }

    fn perturbed_params(mcfg: &ModelConfig, grid: &GridSpec, seed: u64) -> ParameterSet<f32> {
        let mut params = model::init_parameters::<f32>(mcfg, grid, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        for t in params.tensors.values_mut() {
            t.mapv_inplace(|v| v + 0.02 * (rng.gen::<f32>() - 0.5));
        }
        params
    }

    #[test]
    fn longer_rollout_extends_a_shorter_one_bitwise() {
        let ds = toy_dataset(72);
        let mcfg = tiny_model(PredictionMode::Residual);
        let params = perturbed_params(&mcfg, &ds.meta.grid, 73);
        let init = init_state(&ds, 1);
        let stats = ds.stats().unwrap();
        let short = rollout(
            &params, &mcfg, &ds.meta.schema, &ds.meta.grid, stats, &init, 6, 2,
        )
        .unwrap();
        let long = rollout(
            &params, &mcfg, &ds.meta.schema, &ds.meta.grid, stats, &init, 6, 5,
        )
        .unwrap();
        assert_eq!(&long.states[..2], &short.states[..]);
        // and a nonzero model actually moves the state
        assert_ne!(long.states[0], long.states[4]);
        long.validate().unwrap();
    }

    #[test]
    fn rollout_is_deterministic_in_both_modes() {
        let ds = toy_dataset(74);
        for mode in [PredictionMode::Residual, PredictionMode::Direct] {
            let mcfg = tiny_model(mode);
            let params = perturbed_params(&mcfg, &ds.meta.grid, 75);
            let init = init_state(&ds, 2);
            let stats = ds.stats().unwrap();
            let a = rollout(
                &params, &mcfg, &ds.meta.schema, &ds.meta.grid, stats, &init, 6, 3,
            )
            .unwrap();
            let b = rollout(
                &params, &mcfg, &ds.meta.schema, &ds.meta.grid, stats, &init, 6, 3,
            )
            .unwrap();
            assert_eq!(a.states, b.states);
        }
    }

    #[test]
    fn normalization_roundtrip_is_tight() {
        let ds = toy_dataset(76);
        let stats = ds.stats().unwrap();
        let norm = normalize_state(ds.state(3), &ds.meta.schema, stats);
        let back = denormalize_prognostic(
            norm.slice(ndarray::s![..2, .., ..]),
            stats,
        );
        for c in 0..2 {
            let scale = stats.std[c] as f32;
            for (a, b) in back
                .index_axis(Axis(0), c)
                .iter()
                .zip(ds.channel_field(3, c).iter())
            {
                let rel = (a - b).abs() / b.abs().max(scale);
                assert!(rel < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn solar_zenith_channel_advances_with_lead_time() {
        let ds = toy_dataset(77);
        let init = init_state(&ds, 0);
        let t6 = init.valid_time + Duration::hours(6);
        let s0 = statics_for(&init, &ds.meta.schema, &ds.meta.grid, init.valid_time);
        let s6 = statics_for(&init, &ds.meta.schema, &ds.meta.grid, t6);
        let cz = ds.meta.schema.index_of("coszen").unwrap() - 2;
        assert_ne!(
            s0.index_axis(Axis(0), cz).to_owned(),
            s6.index_axis(Axis(0), cz).to_owned()
        );
        assert_eq!(
            s0.index_axis(Axis(0), cz).to_owned(),
            cos_zenith::<f32>(init.valid_time, &ds.meta.grid)
        );
        // non-solar statics are held fixed
        assert_eq!(
            s0.index_axis(Axis(0), 0).to_owned(),
            s6.index_axis(Axis(0), 0).to_owned()
        );
    }

    #[test]
    fn non_finite_parameters_report_the_step() {
        let ds = toy_dataset(78);
        let mcfg = tiny_model(PredictionMode::Residual);
        let mut params = model::init_parameters::<f32>(&mcfg, &ds.meta.grid, 79).unwrap();
        params.tensors["patch_embed.weight"][[0, 0]] = f32::NAN;
        let init = init_state(&ds, 0);
        let err = rollout(
            &params, &mcfg, &ds.meta.schema, &ds.meta.grid, ds.stats().unwrap(), &init, 6, 2,
        )
        .unwrap_err();
        match err {
            Error::NumericFailure { context } => {
                assert!(context.contains("step 0"), "{context}")
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn climatology_forecast_ignores_init_time() {
        let ds = toy_dataset(80);
        let clim = ds.climatology();
        let a = climatology_forecast(&clim, ds.meta.time(0), 6, 3);
        let b = climatology_forecast(&clim, ds.meta.time(5), 6, 3);
        assert_eq!(a.states, b.states);
        assert_eq!(a.states[0], a.states[2]);
        assert_eq!(a.source, "climatology");
    }

    #[test]
    fn forecast_directory_roundtrips_bitwise() {
        let ds = toy_dataset(81);
        let mcfg = tiny_model(PredictionMode::Residual);
        let params = perturbed_params(&mcfg, &ds.meta.grid, 82);
        let stats = ds.stats().unwrap();
        let fcs: Vec<Forecast> = (0..3)
            .map(|t| {
                let init = init_state(&ds, t);
                rollout(
                    &params, &mcfg, &ds.meta.schema, &ds.meta.grid, stats, &init, 6, 2,
                )
                .unwrap()
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        save_forecasts(&fcs, &ds.meta.schema, &ds.meta.grid, dir.path()).unwrap();
        let (meta, back) = load_forecasts(dir.path()).unwrap();
        assert_eq!(meta.n_steps, 2);
        assert_eq!(back, fcs);

        let bin = dir.path().join("init_0001.bin");
        let mut bytes = std::fs::read(&bin).unwrap();
        bytes[4] ^= 0x10;
        std::fs::write(&bin, bytes).unwrap();
        assert!(matches!(
            load_forecasts(dir.path()),
            Err(Error::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn invalid_forecasts_are_rejected() {
        let ds = toy_dataset(83);
        let init = init_state(&ds, 0);
        let mut fc = persistence_forecast(&init, 2, 6, 2);
        fc.validate().unwrap();
        fc.states[1][[0, 0, 0]] = f32::INFINITY;
        assert!(fc.validate().is_err());
        fc.states.clear();
        assert!(fc.validate().is_err());
    }
}
