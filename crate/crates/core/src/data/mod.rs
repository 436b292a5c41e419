//! Channel schema, normalization statistics, toy-atmosphere datasets, and
//! their on-disk format.

mod store;
mod toy;

pub use store::{load_dataset, save_dataset, DATASET_FORMAT_VERSION};
pub use toy::{advect_step, generate_toy_dataset, zonal_power_slope};

use chrono::{DateTime, Duration, Utc};
use ndarray::{Array3, Array4, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::grid::{cos_zenith, GridSpec};
use crate::{Error, Result};

/// Canonical pressure-level vocabulary (hPa).
pub const CANONICAL_LEVELS: [f64; 13] = [
    50.0, 100.0, 150.0, 200.0, 250.0, 300.0, 400.0, 500.0, 600.0, 700.0, 850.0, 925.0, 1000.0,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    Prognostic,
    Static,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelDef {
    pub name: String,
    pub level_hpa: Option<f64>,
    pub kind: ChannelKind,
}

impl ChannelDef {
    pub fn prognostic(name: &str, level_hpa: Option<f64>) -> Self {
        ChannelDef {
            name: name.to_string(),
            level_hpa,
            kind: ChannelKind::Prognostic,
        }
    }

    pub fn statik(name: &str) -> Self {
        ChannelDef {
            name: name.to_string(),
            level_hpa: None,
            kind: ChannelKind::Static,
        }
    }

    pub fn label(&self) -> String {
        match self.level_hpa {
            Some(l) => format!("{}{}", self.name, l as i64),
            None => self.name.clone(),
        }
    }
}

/// Ordered channel list; prognostic channels precede static ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ChannelDef>", into = "Vec<ChannelDef>")]
pub struct ChannelSchema {
    channels: Vec<ChannelDef>,
}

impl TryFrom<Vec<ChannelDef>> for ChannelSchema {
    type Error = Error;
    fn try_from(channels: Vec<ChannelDef>) -> Result<Self> {
        ChannelSchema::new(channels)
    }
}

impl From<ChannelSchema> for Vec<ChannelDef> {
    fn from(s: ChannelSchema) -> Self {
        s.channels
    }
}

impl ChannelSchema {
    pub fn new(channels: Vec<ChannelDef>) -> Result<Self> {
        let n_prog = channels
            .iter()
            .filter(|c| c.kind == ChannelKind::Prognostic)
            .count();
        if n_prog == 0 {
            return Err(Error::invalid("schema needs at least one prognostic channel"));
        }
        for c in &channels {
            if c.kind == ChannelKind::Static && c.level_hpa.is_some() {
                return Err(Error::invalid(format!(
                    "static channel '{}' must not carry a pressure level",
                    c.name
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for c in &channels {
            let key = (c.name.clone(), c.level_hpa.map(|l| l.to_bits()));
            if !seen.insert(key) {
                return Err(Error::invalid(format!(
                    "duplicate channel ({}, {:?})",
                    c.name, c.level_hpa
                )));
            }
        }
        // prognostics-first keeps dataset layout and model channel maps simple
        if let Some(first_static) = channels.iter().position(|c| c.kind == ChannelKind::Static) {
            if channels[first_static..]
                .iter()
                .any(|c| c.kind == ChannelKind::Prognostic)
            {
                return Err(Error::invalid(
                    "prognostic channels must precede static channels",
                ));
            }
        }
        Ok(ChannelSchema { channels })
    }

    pub fn channels(&self) -> &[ChannelDef] {
        &self.channels
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn n_prognostic(&self) -> usize {
        self.channels
            .iter()
            .filter(|c| c.kind == ChannelKind::Prognostic)
            .count()
    }

    pub fn n_static(&self) -> usize {
        self.len() - self.n_prognostic()
    }

    pub fn prognostic(&self) -> &[ChannelDef] {
        &self.channels[..self.n_prognostic()]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.channels.iter().position(|c| c.label() == label)
    }
}

/// Per-prognostic-channel normalization statistics, in field units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Std of one-step temporal differences over the training split.
    pub diff_std: Vec<f64>,
}

/// One atmospheric snapshot: all schema channels on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTensor {
    pub values: Array3<f32>,
    pub valid_time: DateTime<Utc>,
}

impl StateTensor {
    pub fn new(values: Array3<f32>, valid_time: DateTime<Utc>) -> Result<Self> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericFailure {
                context: format!("state tensor valid at {valid_time}"),
            });
        }
        Ok(StateTensor { values, valid_time })
    }
}

/// Synthetic-atmosphere generation settings. All fields deterministic
/// functions of `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    pub n_prog_channels: usize,
    #[serde(default = "default_slope")]
    pub spectral_slope: f64,
    /// Solid-body rotation, degrees longitude per step, one per channel.
    pub omega0: Vec<f64>,
    /// Differential-rotation amplitude (times cos lat), degrees per step.
    pub omega1: Vec<f64>,
    /// Zonal spectral diffusion per step; 0 disables.
    #[serde(default)]
    pub nu: f64,
    #[serde(default = "default_dt")]
    pub dt_hours: i64,
    pub seed: u64,
    pub n_times: usize,
}

fn default_slope() -> f64 {
    3.0
}

fn default_dt() -> i64 {
    6
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_prog_channels == 0 {
            return Err(Error::invalid("n_prog_channels must be positive"));
        }
        if self.spectral_slope <= 0.0 {
            return Err(Error::invalid("spectral_slope must be positive"));
        }
        if !(0.0..1.0).contains(&self.nu) {
            return Err(Error::invalid("nu must lie in [0, 1)"));
        }
        if self.omega0.len() != self.n_prog_channels || self.omega1.len() != self.n_prog_channels {
            return Err(Error::invalid(
                "omega0/omega1 must have one entry per prognostic channel",
            ));
        }
        if self.n_times < 2 {
            return Err(Error::invalid("n_times must be at least 2"));
        }
        if self.dt_hours <= 0 {
            return Err(Error::invalid("dt_hours must be positive"));
        }
        Ok(())
    }

    /// Per-channel defaults: distinct rotation rates standing in for
    /// level-dependent dynamics.
    pub fn with_default_omegas(n_prog_channels: usize, seed: u64, n_times: usize) -> Self {
        let omega0 = (0..n_prog_channels)
            .map(|c| 2.0 + 1.25 * c as f64)
            .collect();
        let omega1 = (0..n_prog_channels).map(|c| 1.0 + 0.5 * c as f64).collect();
        ToyConfig {
            n_prog_channels,
            spectral_slope: 3.0,
            omega0,
            omega1,
            nu: 0.0,
            dt_hours: 6,
            seed,
            n_times,
        }
    }
}

/// Half-open index ranges into the time axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: (usize, usize),
    pub val: (usize, usize),
    pub test: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Splits {
    pub fn contiguous(n_train: usize, n_val: usize, n_test: usize) -> Self {
        Splits {
            train: (0, n_train),
            val: (n_train, n_train + n_val),
            test: (n_train + n_val, n_train + n_val + n_test),
        }
    }

    pub fn range(&self, split: Split) -> (usize, usize) {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn validate(&self, n_times: usize) -> Result<()> {
        let ranges = [self.train, self.val, self.test];
        for (a, b) in ranges {
            if a > b || b > n_times {
                return Err(Error::invalid(format!(
                    "split range ({a}, {b}) out of bounds for {n_times} times"
                )));
            }
        }
        for i in 0..3 {
            for j in (i + 1)..3 {
                let (a0, a1) = ranges[i];
                let (b0, b1) = ranges[j];
                if a0 < b1 && b0 < a1 {
                    return Err(Error::invalid("splits overlap"));
                }
            }
        }
        if self.train.1 == self.train.0 {
            return Err(Error::invalid("train split is empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardInfo {
    pub file: String,
    pub t_start: usize,
    pub n_times: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub version: u32,
    pub schema: ChannelSchema,
    pub grid: GridSpec,
    pub dt_hours: i64,
    pub start_time: DateTime<Utc>,
    pub n_times: usize,
    pub splits: Splits,
    pub stats: Option<NormStats>,
    pub shards: Vec<ShardInfo>,
    pub toy: Option<ToyConfig>,
}

impl DatasetMeta {
    pub fn time(&self, index: usize) -> DateTime<Utc> {
        self.start_time + Duration::hours(self.dt_hours * index as i64)
    }

    pub fn times(&self) -> Vec<DateTime<Utc>> {
        (0..self.n_times).map(|i| self.time(i)).collect()
    }
}

/// In-memory dataset: meta plus the full `[T, C, H, W]` tensor.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub data: Array4<f32>,
}

impl Dataset {
    pub fn state(&self, t: usize) -> ArrayView3<'_, f32> {
        self.data.index_axis(Axis(0), t)
    }

    pub fn channel_field(&self, t: usize, c: usize) -> ArrayView2<'_, f32> {
        self.data.index_axis(Axis(0), t).index_axis_move(Axis(0), c)
    }

    pub fn stats(&self) -> Result<&NormStats> {
        self.meta
            .stats
            .as_ref()
            .ok_or_else(|| Error::invalid("dataset has no normalization statistics"))
    }

    /// Time-mean of each prognostic channel over the training split (per cell).
    pub fn climatology(&self) -> Array3<f64> {
        let (t0, t1) = self.meta.splits.train;
        let n_prog = self.meta.schema.n_prognostic();
        let (h, w) = self.meta.grid.shape();
        let mut clim = Array3::<f64>::zeros((n_prog, h, w));
        for t in t0..t1 {
            for c in 0..n_prog {
                let f = self.channel_field(t, c);
                for i in 0..h {
                    for j in 0..w {
                        clim[[c, i, j]] += f[[i, j]] as f64;
                    }
                }
            }
        }
        clim /= (t1 - t0) as f64;
        clim
    }
}

/// One training sample: a normalized model input plus `n_steps` normalized
/// prognostic targets and the static inputs valid at each target time.
#[derive(Debug, Clone)]
pub struct Sequence {
    /// `[C_in, H, W]`: normalized prognostics followed by raw static channels.
    pub input: Array3<f32>,
    /// Per step, `[C_p, H, W]` normalized next states.
    pub targets: Vec<Array3<f32>>,
    /// Per step, `[C_s, H, W]` static channels at the target's valid time
    /// (cos-zenith recomputed, mask/orography held fixed).
    pub statics: Vec<Array3<f32>>,
    pub init_time: DateTime<Utc>,
}

/// Normalize the prognostic channels of a raw full state and append statics.
pub fn normalize_state(
    raw: ArrayView3<'_, f32>,
    schema: &ChannelSchema,
    stats: &NormStats,
) -> Array3<f32> {
    let n_prog = schema.n_prognostic();
    let mut out = raw.to_owned();
    for c in 0..n_prog {
        let mu = stats.mean[c] as f32;
        let sd = stats.std[c] as f32;
        out.index_axis_mut(Axis(0), c).mapv_inplace(|v| (v - mu) / sd);
    }
    out
}

/// Invert [`normalize_state`] on prognostic channels only.
pub fn denormalize_prognostic(
    norm: ArrayView3<'_, f32>,
    stats: &NormStats,
) -> Array3<f32> {
    let mut out = norm.to_owned();
    for c in 0..out.shape()[0] {
        let mu = stats.mean[c] as f32;
        let sd = stats.std[c] as f32;
        out.index_axis_mut(Axis(0), c).mapv_inplace(|v| v * sd + mu);
    }
    out
}

/// Training/validation/test sample extraction.
///
/// `index` counts from the start of `split`; the returned sequence starts at
/// that time and holds `n_steps` targets.
pub fn sample_sequence(
    ds: &Dataset,
    split: Split,
    index: usize,
    n_steps: usize,
) -> Result<Sequence> {
    let (s0, s1) = ds.meta.splits.range(split);
    let t = s0 + index;
    if n_steps == 0 {
        return Err(Error::invalid("n_steps must be at least 1"));
    }
    if t + n_steps >= s1 {
        return Err(Error::OutOfRange(format!(
            "sample index {index} with {n_steps} steps exceeds split [{s0}, {s1})"
        )));
    }
    let stats = ds.stats()?;
    let schema = &ds.meta.schema;
    let n_prog = schema.n_prognostic();
    let input = normalize_state(ds.state(t), schema, stats);
    let mut targets = Vec::with_capacity(n_steps);
    let mut statics = Vec::with_capacity(n_steps);
    for k in 1..=n_steps {
        let full = ds.state(t + k);
        let norm = normalize_state(full, schema, stats);
        targets.push(norm.slice(ndarray::s![..n_prog, .., ..]).to_owned());
        statics.push(statics_at(ds, t + k));
    }
    Ok(Sequence {
        input,
        targets,
        statics,
        init_time: ds.meta.time(t),
    })
}

/// Static channels valid at time index `t`: stored mask/orography stand-ins
/// with cos-zenith recomputed from the timestamp.
pub fn statics_at(ds: &Dataset, t: usize) -> Array3<f32> {
    let schema = &ds.meta.schema;
    let n_prog = schema.n_prognostic();
    let n_static = schema.n_static();
    let (h, w) = ds.meta.grid.shape();
    let mut out = Array3::<f32>::zeros((n_static, h, w));
    for (s, def) in schema.channels()[n_prog..].iter().enumerate() {
        if def.name == "coszen" {
            out.index_axis_mut(Axis(0), s)
                .assign(&cos_zenith::<f32>(ds.meta.time(t), &ds.meta.grid));
        } else {
            out.index_axis_mut(Axis(0), s)
                .assign(&ds.channel_field(t, n_prog + s));
        }
    }
    out
}

/// Global mean/std per prognostic channel over the training split, plus the
/// std of one-step temporal differences. Streaming Welford accumulation in
/// `f64`.
pub fn compute_norm_stats(ds: &Dataset) -> Result<NormStats> {
    let (t0, t1) = ds.meta.splits.train;
    if t1 - t0 < 2 {
        return Err(Error::invalid(
            "training split needs at least 2 consecutive times",
        ));
    }
    let n_prog = ds.meta.schema.n_prognostic();
    let mut mean = Vec::with_capacity(n_prog);
    let mut std = Vec::with_capacity(n_prog);
    let mut diff_std = Vec::with_capacity(n_prog);
    for c in 0..n_prog {
        let label = ds.meta.schema.channels()[c].label();
        let mut w = Welford::new();
        for t in t0..t1 {
            for &v in ds.channel_field(t, c).iter() {
                w.push(v as f64);
            }
        }
        let (mu, sd) = w.finish();
        if sd < 1e-12 {
            return Err(Error::DegenerateChannel {
                channel: label,
                reason: "zero variance over the training split".into(),
            });
        }
        let mut wd = Welford::new();
        for t in t0..(t1 - 1) {
            let a = ds.channel_field(t, c);
            let b = ds.channel_field(t + 1, c);
            for (x, y) in a.iter().zip(b.iter()) {
                wd.push((*y - *x) as f64);
            }
        }
        let (_, sdd) = wd.finish();
        if sdd < 1e-12 {
            return Err(Error::DegenerateChannel {
                channel: label,
                reason: "zero temporal-difference variance (static data)".into(),
            });
        }
        mean.push(mu);
        std.push(sd);
        diff_std.push(sdd);
    }
    Ok(NormStats {
        mean,
        std,
        diff_std,
    })
}

struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn new() -> Self {
        Welford {
            n: 0,
            mean: 0.0,
            m2: 0.0,
        }
    }

    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    /// Population mean and std.
    fn finish(&self) -> (f64, f64) {
        (self.mean, (self.m2 / self.n as f64).sqrt())
    }
}

/// Toy schema: a t2m-like surface channel plus pressure-level channels of one
/// variable, with the standard static inputs appended.
pub fn toy_schema(n_prog: usize) -> Result<ChannelSchema> {
    let mut channels = Vec::new();
    channels.push(ChannelDef::prognostic("t2m", None));
    for i in 0..n_prog.saturating_sub(1) {
        let level = CANONICAL_LEVELS[CANONICAL_LEVELS.len() - 1 - i % CANONICAL_LEVELS.len()];
        channels.push(ChannelDef::prognostic("z", Some(level)));
    }
    channels.push(ChannelDef::statik("lsm"));
    channels.push(ChannelDef::statik("orog"));
    channels.push(ChannelDef::statik("coszen"));
    ChannelSchema::new(channels)
}
