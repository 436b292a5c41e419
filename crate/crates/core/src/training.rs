//! Optimization: Adam with cosine decay and linear warmup, single-step
//! pre-training, multi-step fine-tuning with full backpropagation through the
//! unrolled chain, checkpointing, and finite-difference gradient
//! verification.
//!
//! Determinism: every random decision (epoch shuffles, per-sample stochastic
//! depth) comes from a counter-derived RNG seeded by
//! `(seed, epoch, batch, sample)`, and per-sample gradients are reduced in a
//! fixed order regardless of how many threads computed them. The training
//! trajectory is therefore a pure function of the seed, which also makes
//! checkpoint resume trivially exact: no RNG state needs to be carried, only
//! the epoch counter.

use std::collections::BTreeMap;
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{sample_sequence, Dataset, NormStats, Sequence, Split};
use crate::graph::Graph;
use crate::grid::GridSpec;
use crate::loss::{multi_step_loss, LossWeights};
use crate::model::{
    self, model_forward, sample_drop_path, ModelConfig, ParamVars, ParameterSet, PredictionMode,
};
use crate::{util, Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// Cosine decay to zero with linear warmup over the first 5% of steps.
    Cosine,
    /// Constant learning rate (no warmup).
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Autoregressive steps per sample: 1 for pre-training, 4 or 8 for
    /// fine-tuning.
    pub n_steps: usize,
    pub seed: u64,
    pub lat_weighting: bool,
    pub channel_weighting: bool,
    #[serde(default)]
    pub surface_emphasis: BTreeMap<String, f64>,
    /// Global gradient-norm clip; `None` disables (the toy-scale default).
    #[serde(default)]
    pub grad_clip_norm: Option<f64>,
    pub schedule: ScheduleKind,
    /// Detach states between unrolled steps (off by default; full
    /// backpropagation matches the multi-step objective literally).
    #[serde(default)]
    pub detach_steps: bool,
    /// Recompute per-step activations during backward instead of holding the
    /// whole unrolled tape; peak activation memory becomes independent of
    /// `n_steps` at the cost of a second forward pass.
    #[serde(default)]
    pub recompute_activations: bool,
}

impl TrainConfig {
    pub fn pretrain_default(seed: u64) -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 70,
            n_steps: 1,
            seed,
            lat_weighting: true,
            channel_weighting: true,
            surface_emphasis: BTreeMap::new(),
            grad_clip_norm: None,
            schedule: ScheduleKind::Cosine,
            detach_steps: false,
            recompute_activations: false,
        }
    }

    pub fn finetune_default(seed: u64, n_steps: usize) -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            epochs: 15,
            n_steps,
            ..Self::pretrain_default(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.n_steps < 1 {
            return Err(Error::invalid("n_steps must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if let Some(c) = self.grad_clip_norm {
            if c <= 0.0 || !c.is_finite() {
                return Err(Error::invalid("grad_clip_norm must be positive"));
            }
        }
        Ok(())
    }
}

/// Adam moments, mirroring the parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Scalar> {
    pub m: IndexMap<String, ArrayD<T>>,
    pub v: IndexMap<String, ArrayD<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParameterSet<T>) -> Self {
        let zeros = |p: &ParameterSet<T>| -> IndexMap<String, ArrayD<T>> {
            p.tensors
                .iter()
                .map(|(k, t)| (k.clone(), ArrayD::zeros(t.raw_dim())))
                .collect()
        };
        OptimizerState {
            m: zeros(params),
            v: zeros(params),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam update with optional global-norm gradient clipping.
pub fn adam_step<T: Scalar>(
    params: &mut ParameterSet<T>,
    grads: &IndexMap<String, ArrayD<T>>,
    state: &mut OptimizerState<T>,
    lr: f64,
    clip_norm: Option<f64>,
) -> Result<()> {
    for (name, g) in grads {
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericFailure {
                context: format!("non-finite gradient for {name}"),
            });
        }
    }
    let scale = match clip_norm {
        Some(clip) => {
            let norm: f64 = grads
                .values()
                .map(|g| g.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                clip / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::real(state.beta1), T::real(state.beta2));
    let bc1 = T::real(1.0 - state.beta1.powi(t));
    let bc2 = T::real(1.0 - state.beta2.powi(t));
    let eps = T::real(state.eps);
    let lr = T::real(lr);
    let gscale = T::real(scale);
    for (name, p) in params.tensors.iter_mut() {
        let g = match grads.get(name) {
            Some(g) => g,
            None => continue,
        };
        let m = &mut state.m[name];
        let v = &mut state.v[name];
        ndarray::Zip::from(p)
            .and(m)
            .and(v)
            .and(g)
            .for_each(|p, m, v, &graw| {
                let g = graw * gscale;
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= lr * mh / (vh.sqrt() + eps);
            });
    }
    Ok(())
}

/// Learning rate at optimizer step `step` of `total` (0-based): linear
/// warmup over the first 5% of steps, then cosine decay to zero.
pub fn learning_rate_at(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    match cfg.schedule {
        ScheduleKind::Constant => cfg.learning_rate,
        ScheduleKind::Cosine => {
            let warmup = ((total as f64) * 0.05).ceil().max(1.0) as usize;
            if step < warmup {
                cfg.learning_rate * (step + 1) as f64 / warmup as f64
            } else {
                let progress = (step - warmup) as f64 / (total - warmup).max(1) as f64;
                cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

/// Counter-derived RNG: a splitmix64 hash of the seed and stream indices.
pub fn derive_rng(seed: u64, a: u64, b: u64, c: u64) -> ChaCha8Rng {
    let mut x = seed;
    for w in [a, b, c, 0x9e3779b97f4a7c15] {
        x = x.wrapping_add(w).wrapping_mul(0xbf58476d1ce4e5b9);
        x ^= x >> 27;
        x = x.wrapping_mul(0x94d049bb133111eb);
        x ^= x >> 31;
    }
    ChaCha8Rng::seed_from_u64(x)
}

/// Per-sample gradient result: loss, parameter gradients, and the tape's
/// peak activation bytes.
pub type SampleGrads<T> = (T, IndexMap<String, ArrayD<T>>, usize);

/// Loss and parameter gradients for one sequence, plus the tape's peak
/// activation bytes. With `recompute` the unrolled chain is re-run one step
/// at a time during backward, so peak memory does not grow with `n_steps`.
#[allow(clippy::too_many_arguments)]
pub fn sample_grads<T: Scalar>(
    params: &ParameterSet<T>,
    mcfg: &ModelConfig,
    grid: &GridSpec,
    stats: &NormStats,
    seq: &Sequence,
    weights: &LossWeights<T>,
    drop_rng: Option<&mut ChaCha8Rng>,
    detach_steps: bool,
    recompute: bool,
) -> Result<SampleGrads<T>> {
    if recompute || detach_steps {
        return sample_grads_stepwise(
            params, mcfg, grid, stats, seq, weights, drop_rng, detach_steps,
        );
    }
    let mut g = Graph::<T>::new();
    let pv = ParamVars::register(&mut g, params);
    let loss = multi_step_loss(&mut g, &pv, mcfg, grid, stats, seq, weights, drop_rng)?;
    let mut store = g.backward(loss);
    let grads = pv
        .iter()
        .map(|(name, &var)| {
            let grad = store
                .take(var)
                .unwrap_or_else(|| ArrayD::zeros(params.get(name).raw_dim()));
            (name.clone(), grad)
        })
        .collect();
    Ok((g.scalar(loss), grads, g.memory_bytes()))
}

/// Stepwise gradient computation: a no-grad pass records the unrolled
/// states, then per-step tapes are replayed in reverse, seeding each with the
/// accumulated loss gradient of its output state. `detach_steps` drops the
/// state-to-state gradient chain instead of propagating it.
#[allow(clippy::too_many_arguments)]
fn sample_grads_stepwise<T: Scalar>(
    params: &ParameterSet<T>,
    mcfg: &ModelConfig,
    grid: &GridSpec,
    stats: &NormStats,
    seq: &Sequence,
    weights: &LossWeights<T>,
    mut drop_rng: Option<&mut ChaCha8Rng>,
    detach_steps: bool,
) -> Result<SampleGrads<T>> {
    let n_steps = seq.targets.len();
    if n_steps == 0 {
        return Err(Error::invalid("sequence has no targets"));
    }
    let n_prog = mcfg.out_channels;
    let ratio: Vec<f64> = (0..n_prog)
        .map(|c| stats.diff_std[c] / stats.std[c])
        .collect();
    let to_arr = |a: &ndarray::Array3<f32>| -> ArrayD<T> {
        a.mapv(|v| T::real(v as f64)).into_dyn()
    };
    // stochastic-depth decisions drawn up front so the recording pass and the
    // replayed tapes see identical branches
    let keeps: Vec<Option<Vec<T>>> = (0..n_steps)
        .map(|_| {
            drop_rng
                .as_deref_mut()
                .filter(|_| mcfg.drop_path_rate > 0.0)
                .map(|rng| sample_drop_path::<T>(rng, mcfg.depth, mcfg.drop_path_rate))
        })
        .collect();

    // forward pass without gradients, keeping each step's input state
    let input0 = to_arr(&seq.input);
    let mut states: Vec<ArrayD<T>> = Vec::with_capacity(n_steps + 1);
    states.push(
        input0
            .slice_axis(ndarray::Axis(0), ndarray::Slice::from(..n_prog as isize))
            .to_owned(),
    );
    let mut loss_total = T::zero();
    for k in 0..n_steps {
        let (next, step_loss) = {
            let mut g = Graph::<T>::no_grad();
            let pv = ParamVars::register(&mut g, params);
            let model_in = if k == 0 {
                g.constant(input0.clone())
            } else {
                let s = g.constant(states[k].clone());
                let st = g.constant(to_arr(&seq.statics[k - 1]));
                g.concat(&[s, st], 0)
            };
            let (next, step_loss, _) = unroll_one_step(
                &mut g,
                &pv,
                mcfg,
                grid,
                model_in,
                &ratio,
                seq,
                weights,
                k,
                keeps[k].as_deref(),
            )?;
            (g.value(next).clone(), g.scalar(step_loss))
        };
        loss_total += step_loss;
        states.push(next);
    }
    let n_t = T::real(n_steps as f64);
    let loss = loss_total / n_t;

    // reverse pass: one tape per step, seeded with the accumulated gradient
    // of the step's output state
    let mut grads: IndexMap<String, ArrayD<T>> = params
        .tensors
        .iter()
        .map(|(k, t)| (k.clone(), ArrayD::zeros(t.raw_dim())))
        .collect();
    let mut d_next: Option<ArrayD<T>> = None;
    let mut peak = 0usize;
    let seed_scale = T::one() / n_t;
    for k in (0..n_steps).rev() {
        let mut g = Graph::<T>::new();
        let pv = ParamVars::register(&mut g, params);
        let (model_in, state_leaf) = if k == 0 {
            let leaf = g.leaf(input0.clone());
            (leaf, None)
        } else {
            let s = g.leaf(states[k].clone());
            let st = g.constant(to_arr(&seq.statics[k - 1]));
            (g.concat(&[s, st], 0), Some(s))
        };
        let (next, step_loss, _) = unroll_one_step(
            &mut g,
            &pv,
            mcfg,
            grid,
            model_in,
            &ratio,
            seq,
            weights,
            k,
            keeps[k].as_deref(),
        )?;
        let mut seeds = vec![(step_loss, ndarray::arr0(seed_scale).into_dyn())];
        if let Some(d) = d_next.take() {
            seeds.push((next, d));
        }
        let mut store = g.backward_seeded(seeds);
        for (name, &var) in pv.iter() {
            if let Some(grad) = store.take(var) {
                grads[name] += &grad;
            }
        }
        if k > 0 && !detach_steps {
            d_next = state_leaf.and_then(|s| store.take(s));
        }
        peak = peak.max(g.memory_bytes());
    }
    Ok((loss, grads, peak))
}

/// One unrolled step on an existing tape: forward the model, reconstruct the
/// next normalized state, and compute the (per-step) weighted mean-square
/// error in the mode's native units. Returns `(next_state, step_loss, out)`.
#[allow(clippy::too_many_arguments)]
fn unroll_one_step<T: Scalar>(
    g: &mut Graph<T>,
    pv: &ParamVars,
    mcfg: &ModelConfig,
    grid: &GridSpec,
    model_in: crate::graph::Var,
    ratio: &[f64],
    seq: &Sequence,
    weights: &LossWeights<T>,
    k: usize,
    keep: Option<&[T]>,
) -> Result<(crate::graph::Var, crate::graph::Var, crate::graph::Var)> {
    let n_prog = mcfg.out_channels;
    let state = g.narrow(model_in, 0, 0, n_prog);
    let out = model_forward(g, model_in, pv, mcfg, grid, keep).map_err(|e| match e {
        Error::NumericFailure { context } => Error::NumericFailure {
            context: format!("step {k}: {context}"),
        },
        other => other,
    })?;
    let to_const = |g: &mut Graph<T>, v: Vec<f64>| {
        let c = v.len();
        let arr =
            ArrayD::from_shape_vec(IxDyn(&[c, 1, 1]), v.into_iter().map(T::real).collect())
                .unwrap();
        g.constant(arr)
    };
    let next = match mcfg.prediction_mode {
        PredictionMode::Direct => out,
        PredictionMode::Residual => {
            let r = to_const(g, ratio.to_vec());
            let inc = g.mul(out, r);
            g.add(state, inc)
        }
    };
    let target = g.constant(seq.targets[k].mapv(|v| T::real(v as f64)).into_dyn());
    let diff = g.sub(next, target);
    let err = match mcfg.prediction_mode {
        PredictionMode::Direct => diff,
        PredictionMode::Residual => {
            let ir = to_const(g, ratio.iter().map(|r| 1.0 / r).collect());
            g.mul(diff, ir)
        }
    };
    let sq = g.mul(err, err);
    let w = {
        let (c, h) = (weights.w_c.len(), weights.w_lat.len());
        let arr = ndarray::Array3::from_shape_fn((c, h, 1), |(ci, hi, _)| {
            weights.w_c[ci] * weights.w_lat[hi]
        });
        g.constant(arr.into_dyn())
    };
    let weighted = g.mul(sq, w);
    let step_loss = g.mean_all(weighted);
    Ok((next, step_loss, out))
}

/// Per-epoch record written to the JSON-lines metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr_last: f64,
    /// Peak per-sample activation bytes seen this epoch.
    pub peak_tape_bytes: usize,
}

/// Everything needed to continue or evaluate a training run.
#[derive(Debug, Clone)]
pub struct TrainState<T: Scalar> {
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub params: ParameterSet<T>,
    pub opt: OptimizerState<T>,
    /// Epochs completed so far.
    pub epoch: usize,
    pub best_val: f64,
    pub best_params: ParameterSet<T>,
    pub log: Vec<EpochRecord>,
}

/// Fresh training state, optionally warm-started from existing parameters
/// (fine-tuning); optimizer moments always start at zero.
pub fn new_state<T: Scalar>(
    mcfg: &ModelConfig,
    grid: &GridSpec,
    tcfg: &TrainConfig,
    init: Option<ParameterSet<T>>,
) -> Result<TrainState<T>> {
    tcfg.validate()?;
    mcfg.validate(grid)?;
    let params = match init {
        Some(p) => p,
        None => model::init_parameters(mcfg, grid, tcfg.seed)?,
    };
    let opt = OptimizerState::new(&params);
    Ok(TrainState {
        model_cfg: mcfg.clone(),
        train_cfg: tcfg.clone(),
        best_params: params.clone(),
        params,
        opt,
        epoch: 0,
        best_val: f64::INFINITY,
        log: Vec::new(),
    })
}

fn n_samples(ds: &Dataset, split: Split, n_steps: usize) -> usize {
    let (s0, s1) = ds.meta.splits.range(split);
    (s1 - s0).saturating_sub(n_steps)
}

/// Mean multi-step validation loss over the whole validation split
/// (deterministic: no stochastic depth, f64 accumulation).
pub fn validation_loss<T: Scalar>(
    state: &TrainState<T>,
    ds: &Dataset,
    weights: &LossWeights<T>,
) -> Result<f64> {
    let grid = &ds.meta.grid;
    let stats = ds.stats()?;
    let n = n_samples(ds, Split::Val, state.train_cfg.n_steps);
    if n == 0 {
        return Err(Error::invalid("validation split too short"));
    }
    let losses: Vec<Result<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let seq = sample_sequence(ds, Split::Val, i, state.train_cfg.n_steps)?;
            let mut g = Graph::<T>::new();
            let pv = ParamVars::register(&mut g, &state.params);
            let l = multi_step_loss(
                &mut g,
                &pv,
                &state.model_cfg,
                grid,
                stats,
                &seq,
                weights,
                None,
            )?;
            Ok(g.scalar(l).as_f64())
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / n as f64)
}

/// Run the remaining epochs of `state` on `ds`. One optimizer step per
/// batch; per-sample gradients are computed in parallel and reduced in
/// sample order, so the result does not depend on the thread count.
pub fn run_epochs<T: Scalar>(state: &mut TrainState<T>, ds: &Dataset) -> Result<()> {
    let end = state.train_cfg.epochs;
    run_epochs_until(state, ds, end)
}

/// Runs epochs up to `end_epoch` (exclusive), keeping the learning-rate
/// schedule anchored to the configured total epoch count. Stopping early and
/// resuming from a checkpoint reproduces the uninterrupted run bit for bit.
pub fn run_epochs_until<T: Scalar>(
    state: &mut TrainState<T>,
    ds: &Dataset,
    end_epoch: usize,
) -> Result<()> {
    let grid = ds.meta.grid.clone();
    let stats = ds.stats()?.clone();
    let tcfg = state.train_cfg.clone();
    let weights = LossWeights::<T>::new(
        &ds.meta.schema,
        &grid,
        tcfg.lat_weighting,
        tcfg.channel_weighting,
        &tcfg.surface_emphasis,
    )?;
    let n_train = n_samples(ds, Split::Train, tcfg.n_steps);
    if n_train == 0 {
        return Err(Error::invalid("training split too short for n_steps"));
    }
    let steps_per_epoch = n_train.div_ceil(tcfg.batch_size);
    let total_steps = steps_per_epoch * tcfg.epochs;

    for epoch in state.epoch..end_epoch.min(tcfg.epochs) {
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut derive_rng(tcfg.seed, epoch as u64, u64::MAX, 0));

        let mut epoch_loss = 0.0f64;
        let mut peak_bytes = 0usize;
        for (batch_idx, batch) in order.chunks(tcfg.batch_size).enumerate() {
            let step = epoch * steps_per_epoch + batch_idx;
            let lr = learning_rate_at(&tcfg, step, total_steps);
            let results: Vec<Result<SampleGrads<T>>> = batch
                .par_iter()
                .enumerate()
                .map(|(pos, &sample)| {
                    let seq = sample_sequence(ds, Split::Train, sample, tcfg.n_steps)?;
                    let mut drop_rng = derive_rng(
                        tcfg.seed,
                        epoch as u64,
                        batch_idx as u64,
                        pos as u64,
                    );
                    sample_grads(
                        &state.params,
                        &state.model_cfg,
                        &grid,
                        &stats,
                        &seq,
                        &weights,
                        Some(&mut drop_rng),
                        tcfg.detach_steps,
                        tcfg.recompute_activations,
                    )
                })
                .collect();
            // fixed-order reduction, independent of thread scheduling
            let mut batch_grads: Option<IndexMap<String, ArrayD<T>>> = None;
            let mut batch_loss = 0.0f64;
            let inv = T::real(1.0 / batch.len() as f64);
            for r in results {
                let (l, grads, bytes) = r.map_err(|e| match e {
                    Error::NumericFailure { context } => Error::NumericFailure {
                        context: format!("epoch {epoch} batch {batch_idx}: {context}"),
                    },
                    other => other,
                })?;
                batch_loss += l.as_f64();
                peak_bytes = peak_bytes.max(bytes);
                match &mut batch_grads {
                    None => batch_grads = Some(grads),
                    Some(acc) => {
                        for (name, g) in grads {
                            *acc.get_mut(&name).expect("grad name") += &g;
                        }
                    }
                }
            }
            let mut grads = batch_grads.expect("non-empty batch");
            for g in grads.values_mut() {
                g.mapv_inplace(|v| v * inv);
            }
            adam_step(&mut state.params, &grads, &mut state.opt, lr, tcfg.grad_clip_norm)
                .map_err(|e| match e {
                    Error::NumericFailure { context } => Error::NumericFailure {
                        context: format!("epoch {epoch} batch {batch_idx}: {context}"),
                    },
                    other => other,
                })?;
            epoch_loss += batch_loss / batch.len() as f64;
        }

        let val_loss = validation_loss(state, ds, &weights)?;
        if val_loss < state.best_val {
            state.best_val = val_loss;
            state.best_params = state.params.clone();
        }
        state.log.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / steps_per_epoch as f64,
            val_loss,
            lr_last: learning_rate_at(&tcfg, (epoch + 1) * steps_per_epoch - 1, total_steps),
            peak_tape_bytes: peak_bytes,
        });
        state.epoch = epoch + 1;
    }
    Ok(())
}

/// Single-step pre-training from random initialization.
pub fn train<T: Scalar>(
    mcfg: &ModelConfig,
    ds: &Dataset,
    tcfg: &TrainConfig,
) -> Result<TrainState<T>> {
    let mut state = new_state(mcfg, &ds.meta.grid, tcfg, None)?;
    run_epochs(&mut state, ds)?;
    Ok(state)
}

/// Multi-step fine-tuning from existing parameters with fresh optimizer
/// moments.
pub fn fine_tune<T: Scalar>(
    params: ParameterSet<T>,
    mcfg: &ModelConfig,
    ds: &Dataset,
    tcfg: &TrainConfig,
) -> Result<TrainState<T>> {
    let mut state = new_state(mcfg, &ds.meta.grid, tcfg, Some(params))?;
    run_epochs(&mut state, ds)?;
    Ok(state)
}

#[derive(Serialize, Deserialize)]
struct TrainMeta {
    version: u32,
    train_cfg: TrainConfig,
    epoch: usize,
    best_val: Option<f64>,
    opt_step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    log: Vec<EpochRecord>,
}

const TRAIN_FORMAT_VERSION: u32 = 1;

/// Save the full training state: the model-checkpoint files plus `best/`,
/// `train.json`, and the optimizer moments in `opt.bin`. Round-trips
/// bit-exactly in storage precision; stochastic state is counter-derived, so
/// no RNG bytes need saving.
pub fn save_train_checkpoint<T: Scalar>(dir: &Path, state: &TrainState<T>) -> Result<()> {
    model::save_checkpoint(dir, &state.model_cfg, &state.params)?;
    model::save_checkpoint(&dir.join("best"), &state.model_cfg, &state.best_params)?;
    let meta = TrainMeta {
        version: TRAIN_FORMAT_VERSION,
        train_cfg: state.train_cfg.clone(),
        epoch: state.epoch,
        best_val: state.best_val.is_finite().then_some(state.best_val),
        opt_step: state.opt.step,
        beta1: state.opt.beta1,
        beta2: state.opt.beta2,
        eps: state.opt.eps,
        log: state.log.clone(),
    };
    let path = dir.join("train.json");
    let json = serde_json::to_vec_pretty(&meta)
        .map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    let mut moments: Vec<f32> = Vec::new();
    for map in [&state.opt.m, &state.opt.v] {
        for t in map.values() {
            moments.extend(t.iter().map(|v| v.as_f64() as f32));
        }
    }
    util::write_checksummed(&dir.join("opt.bin"), &util::f32_to_le_bytes(&moments))
}

/// Load a training state saved by [`save_train_checkpoint`].
pub fn load_train_checkpoint<T: Scalar>(dir: &Path) -> Result<TrainState<T>> {
    let (model_cfg, params) = model::load_checkpoint::<T>(dir)?;
    let (_, best_params) = model::load_checkpoint::<T>(&dir.join("best"))?;
    let path = dir.join("train.json");
    let raw = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let meta: TrainMeta = serde_json::from_slice(&raw).map_err(|e| Error::Malformed {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    if meta.version != TRAIN_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path,
            found: meta.version,
            expected: TRAIN_FORMAT_VERSION,
        });
    }
    let bin_path = dir.join("opt.bin");
    let bytes = util::read_checksummed(&bin_path)?;
    let values = util::f32_from_le_bytes(&bytes, &bin_path)?;
    let total: usize = params.tensors.values().map(|t| t.len()).sum();
    if values.len() != 2 * total {
        return Err(Error::Malformed {
            path: bin_path,
            reason: format!("expected {} moment values, found {}", 2 * total, values.len()),
        });
    }
    let mut opt = OptimizerState::new(&params);
    opt.step = meta.opt_step;
    opt.beta1 = meta.beta1;
    opt.beta2 = meta.beta2;
    opt.eps = meta.eps;
    let mut offset = 0usize;
    for map in [&mut opt.m, &mut opt.v] {
        for t in map.values_mut() {
            for v in t.iter_mut() {
                *v = T::real(values[offset] as f64);
                offset += 1;
            }
        }
    }
    Ok(TrainState {
        model_cfg,
        train_cfg: meta.train_cfg,
        params,
        opt,
        epoch: meta.epoch,
        best_val: meta.best_val.unwrap_or(f64::INFINITY),
        best_params,
        log: meta.log,
    })
}

/// Maximum relative error between analytic and central finite-difference
/// gradients, per tensor.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub per_tensor: Vec<(String, f64)>,
    pub max_rel_error: f64,
    pub n_steps: usize,
}

/// Compare analytic gradients of the multi-step loss against central finite
/// differences (`h = 1e-4`) on up to `coords_per_tensor` randomly chosen
/// coordinates of every parameter tensor, in f64.
pub fn gradient_check(
    mcfg: &ModelConfig,
    ds: &Dataset,
    n_steps: usize,
    coords_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let grid = ds.meta.grid.clone();
    let stats = ds.stats()?.clone();
    let mut params = model::init_parameters::<f64>(mcfg, &grid, seed)?;
    // perturb all parameters so zero-initialized tensors (head, biases,
    // position embedding) sit at a generic point
    let mut rng = derive_rng(seed, 0x6ead, 0, 0);
    for t in params.tensors.values_mut() {
        t.mapv_inplace(|v| v + 0.05 * (rng.gen::<f64>() - 0.5));
    }
    let seq = sample_sequence(ds, Split::Train, 0, n_steps)?;
    let weights = LossWeights::<f64>::new(
        &ds.meta.schema,
        &grid,
        true,
        true,
        &BTreeMap::new(),
    )?;

    let loss_at = |p: &ParameterSet<f64>| -> Result<f64> {
        let mut g = Graph::<f64>::no_grad();
        let pv = ParamVars::register(&mut g, p);
        let l = multi_step_loss(&mut g, &pv, mcfg, &grid, &stats, &seq, &weights, None)?;
        Ok(g.scalar(l))
    };
    let (_, analytic, _) = sample_grads(
        &params, mcfg, &grid, &stats, &seq, &weights, None, false, false,
    )?;

    let h = 1e-4;
    let mut per_tensor = Vec::new();
    let mut max_rel = 0.0f64;
    let names: Vec<String> = params.tensors.keys().cloned().collect();
    for name in names {
        let len = params.get(&name).len();
        let mut idxs: Vec<usize> = (0..len).collect();
        if len > coords_per_tensor {
            idxs.shuffle(&mut rng);
            idxs.truncate(coords_per_tensor);
        }
        let mut tensor_max = 0.0f64;
        for flat in idxs {
            let orig = params.tensors[&name].as_slice().unwrap()[flat];
            params.tensors.get_mut(&name).unwrap().as_slice_mut().unwrap()[flat] = orig + h;
            let fp = loss_at(&params)?;
            params.tensors.get_mut(&name).unwrap().as_slice_mut().unwrap()[flat] = orig - h;
            let fm = loss_at(&params)?;
            params.tensors.get_mut(&name).unwrap().as_slice_mut().unwrap()[flat] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[&name].as_slice().unwrap()[flat];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            tensor_max = tensor_max.max((a - numeric).abs() / denom);
        }
        max_rel = max_rel.max(tensor_max);
        per_tensor.push((name, tensor_max));
    }
    Ok(GradCheckReport {
        per_tensor,
        max_rel_error: max_rel,
        n_steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{compute_norm_stats, generate_toy_dataset, Splits, ToyConfig};
    use crate::grid::make_grid;
    use chrono::{TimeZone, Utc};
    use ndarray::arr1;

    fn single_param(v: &[f64]) -> ParameterSet<f64> {
        let mut tensors = IndexMap::new();
        tensors.insert("x".to_string(), arr1(v).into_dyn());
        ParameterSet { tensors }
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = single_param(&[1.0, -2.0, 3.0]);
        let mut s = OptimizerState::new(&p);
        let mut grads = IndexMap::new();
        grads.insert("x".to_string(), arr1(&[0.0, 0.0, 0.0]).into_dyn());
        adam_step(&mut p, &grads, &mut s, 0.1, None).unwrap();
        assert_eq!(p.get("x"), &arr1(&[1.0, -2.0, 3.0]).into_dyn());
        assert_eq!(s.step, 1);
    }

    #[test]
    fn adam_first_step_moves_against_gradient_sign() {
        let mut p = single_param(&[1.0, 1.0, 1.0]);
        let mut s = OptimizerState::new(&p);
        let mut grads = IndexMap::new();
        grads.insert("x".to_string(), arr1(&[0.5, -2.0, 1e-3]).into_dyn());
        let lr = 0.01;
        adam_step(&mut p, &grads, &mut s, lr, None).unwrap();
        // bias-corrected first step: update = -lr * g / (|g| + eps*corr)
        let x = p.get("x");
        for (i, &g) in [0.5f64, -2.0, 1e-3].iter().enumerate() {
            let expect = 1.0 - lr * g.signum();
            assert!(
                (x[[i]] - expect).abs() < 1e-6,
                "coord {i}: {} vs {expect}",
                x[[i]]
            );
        }
    }

    #[test]
    fn adam_descends_a_quadratic() {
        // f(x) = x^2 from x0 = 1 at lr 0.1. Adam overshoots once it crosses
        // zero (momentum), so monotonicity is only checked up to the first
        // crossing; overall f must still collapse by orders of magnitude.
        let mut p = single_param(&[1.0]);
        let mut s = OptimizerState::new(&p);
        let mut prev = 1.0f64;
        let mut monotone_until_crossing = true;
        let mut crossed = false;
        for _ in 0..100 {
            let x = p.get("x")[[0]];
            let mut grads = IndexMap::new();
            grads.insert("x".to_string(), arr1(&[2.0 * x]).into_dyn());
            adam_step(&mut p, &grads, &mut s, 0.1, None).unwrap();
            let xn = p.get("x")[[0]];
            if xn < 0.0 {
                crossed = true;
            }
            if !crossed && xn * xn > prev + 1e-15 {
                monotone_until_crossing = false;
            }
            prev = xn * xn;
        }
        assert!(monotone_until_crossing);
        assert!(prev < 1e-4, "f after 100 steps: {prev}");
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut p = single_param(&[1.0]);
        let mut s = OptimizerState::new(&p);
        let mut grads = IndexMap::new();
        grads.insert("x".to_string(), arr1(&[f64::NAN]).into_dyn());
        let err = adam_step(&mut p, &grads, &mut s, 0.1, None).unwrap_err();
        match err {
            Error::NumericFailure { context } => assert!(context.contains("x"), "{context}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn gradient_clipping_caps_the_global_norm() {
        let mut p = single_param(&[0.0, 0.0]);
        let mut s = OptimizerState::new(&p);
        let mut grads = IndexMap::new();
        grads.insert("x".to_string(), arr1(&[30.0, 40.0]).into_dyn()); // norm 50
        adam_step(&mut p, &grads, &mut s, 1.0, Some(5.0)).unwrap();
        // clipped gradient keeps direction; first-step update is -lr*sign
        let x = p.get("x");
        assert!(x[[0]] < 0.0 && x[[1]] < 0.0);
        // m holds the clipped gradient: scaled by 5/50
        let m = &s.m["x"];
        assert!((m[[0]] - 0.1 * 3.0).abs() < 1e-12);
        assert!((m[[1]] - 0.1 * 4.0).abs() < 1e-12);
    }

    #[test]
    fn schedule_warms_up_then_decays_to_zero() {
        let cfg = TrainConfig::pretrain_default(0);
        let total = 200;
        let warmup = 10; // 5% of 200
        assert!(learning_rate_at(&cfg, 0, total) < cfg.learning_rate * 0.2);
        assert!((learning_rate_at(&cfg, warmup - 1, total) - cfg.learning_rate).abs() < 1e-12);
        let late = learning_rate_at(&cfg, total - 1, total);
        assert!(late < 0.01 * cfg.learning_rate * 10.0);
        let mid = learning_rate_at(&cfg, total / 2, total);
        assert!(mid < cfg.learning_rate && mid > late);
    }

    fn toy_dataset(n_prog: usize, n_times: usize, seed: u64) -> Dataset {
        let grid = make_grid(8, 16).unwrap();
        let cfg = ToyConfig::with_default_omegas(n_prog, seed, n_times);
        let splits = Splits::contiguous(n_times - 6, 3, 3);
        let start = Utc.with_ymd_and_hms(2000, 1, 1, 0, 0, 0).unwrap();
        let mut ds = generate_toy_dataset(&cfg, &grid, splits, start).unwrap();
        ds.meta.stats = Some(compute_norm_stats(&ds).unwrap());
        ds
    }

    fn tiny_model(n_prog: usize) -> ModelConfig {
        ModelConfig {
            embed_dim: 16,
            depth: 2,
            patch_size: 2,
            n_heads: 4,
            window: (2, 4),
            drop_path_rate: 0.0,
            prediction_mode: PredictionMode::Residual,
            in_channels: n_prog + 3,
            out_channels: n_prog,
        }
    }

    fn fast_cfg(seed: u64, epochs: usize, n_steps: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: 2e-3,
            batch_size: 4,
            epochs,
            n_steps,
            seed,
            lat_weighting: true,
            channel_weighting: false,
            surface_emphasis: BTreeMap::new(),
            grad_clip_norm: None,
            schedule: ScheduleKind::Cosine,
            detach_steps: false,
            recompute_activations: false,
        }
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let ds = toy_dataset(2, 20, 50);
        let mcfg = tiny_model(2);
        let tcfg = fast_cfg(7, 2, 1);
        let a = train::<f32>(&mcfg, &ds, &tcfg).unwrap();
        let b = train::<f32>(&mcfg, &ds, &tcfg).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.params.tensors, b.params.tensors);
        let c = train::<f32>(&mcfg, &ds, &fast_cfg(8, 2, 1)).unwrap();
        assert_ne!(a.log, c.log);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let ds = toy_dataset(2, 16, 51);
        let mcfg = tiny_model(2);
        let mut tcfg = fast_cfg(9, 1, 1);
        tcfg.learning_rate = 1e-30; // validate() rejects exactly 0
        let init = model::init_parameters::<f32>(&mcfg, &ds.meta.grid, tcfg.seed).unwrap();
        let out = train::<f32>(&mcfg, &ds, &tcfg).unwrap();
        for (name, t) in &out.params.tensors {
            let max_change = t
                .iter()
                .zip(init.get(name).iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(max_change < 1e-6, "{name} moved by {max_change}");
        }
    }

    #[test]
    fn training_reduces_the_loss() {
        let ds = toy_dataset(2, 24, 52);
        let mcfg = tiny_model(2);
        let tcfg = fast_cfg(10, 8, 1);
        let out = train::<f32>(&mcfg, &ds, &tcfg).unwrap();
        let first = out.log.first().unwrap().train_loss;
        let last = out.log.last().unwrap().train_loss;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
        assert!(out.best_val <= out.log[0].val_loss);
    }

    #[test]
    fn stepwise_gradients_match_full_tape() {
        let ds = toy_dataset(2, 20, 53);
        let grid = ds.meta.grid.clone();
        let stats = ds.stats().unwrap().clone();
        let mcfg = tiny_model(2);
        let mut params = model::init_parameters::<f64>(&mcfg, &grid, 54).unwrap();
        let mut rng = derive_rng(55, 0, 0, 0);
        for t in params.tensors.values_mut() {
            t.mapv_inplace(|v| v + 0.05 * (rng.gen::<f64>() - 0.5));
        }
        let seq = sample_sequence(&ds, Split::Train, 2, 3).unwrap();
        let w = LossWeights::<f64>::uniform(2, 8);
        let (l_full, g_full, bytes_full) = sample_grads(
            &params, &mcfg, &grid, &stats, &seq, &w, None, false, false,
        )
        .unwrap();
        let (l_step, g_step, bytes_step) = sample_grads(
            &params, &mcfg, &grid, &stats, &seq, &w, None, false, true,
        )
        .unwrap();
        assert!((l_full - l_step).abs() < 1e-12, "{l_full} vs {l_step}");
        for (name, gf) in &g_full {
            let gs = &g_step[name];
            let dev = gf
                .iter()
                .zip(gs.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(dev < 1e-10, "{name}: max grad deviation {dev}");
        }
        assert!(
            bytes_step < bytes_full,
            "recompute did not reduce peak tape bytes"
        );
    }

    #[test]
    fn peak_tape_memory_is_linear_in_steps_without_recompute() {
        let ds = toy_dataset(2, 24, 56);
        let grid = ds.meta.grid.clone();
        let stats = ds.stats().unwrap().clone();
        let mcfg = tiny_model(2);
        let params = model::init_parameters::<f64>(&mcfg, &grid, 57).unwrap();
        let w = LossWeights::<f64>::uniform(2, 8);
        let bytes_at = |n_steps: usize, recompute: bool| -> usize {
            let seq = sample_sequence(&ds, Split::Train, 0, n_steps).unwrap();
            let (_, _, bytes) = sample_grads(
                &params, &mcfg, &grid, &stats, &seq, &w, None, false, recompute,
            )
            .unwrap();
            bytes
        };
        let (b1, b2, b4) = (bytes_at(1, false), bytes_at(2, false), bytes_at(4, false));
        // full-tape memory grows linearly with the number of unrolled steps
        let r21 = b2 as f64 / b1 as f64;
        let r42 = b4 as f64 / b2 as f64;
        assert!((r21 - 2.0).abs() < 0.2, "2-step/1-step ratio {r21}");
        assert!((r42 - 2.0).abs() < 0.2, "4-step/2-step ratio {r42}");
        // with recomputation the peak is a single step's tape
        let (c1, c4) = (bytes_at(1, true), bytes_at(4, true));
        assert!(
            (c4 as f64) < 1.3 * c1 as f64,
            "recompute peak grew with steps: {c1} -> {c4}"
        );
    }

    #[test]
    fn detached_steps_change_the_gradients() {
        let ds = toy_dataset(2, 20, 58);
        let grid = ds.meta.grid.clone();
        let stats = ds.stats().unwrap().clone();
        let mcfg = tiny_model(2);
        let mut params = model::init_parameters::<f64>(&mcfg, &grid, 59).unwrap();
        let mut rng = derive_rng(60, 0, 0, 0);
        for t in params.tensors.values_mut() {
            t.mapv_inplace(|v| v + 0.05 * (rng.gen::<f64>() - 0.5));
        }
        let seq = sample_sequence(&ds, Split::Train, 0, 3).unwrap();
        let w = LossWeights::<f64>::uniform(2, 8);
        let (_, g_full, _) =
            sample_grads(&params, &mcfg, &grid, &stats, &seq, &w, None, false, false).unwrap();
        let (_, g_detached, _) =
            sample_grads(&params, &mcfg, &grid, &stats, &seq, &w, None, true, false).unwrap();
        let dev = g_full["patch_embed.weight"]
            .iter()
            .zip(g_detached["patch_embed.weight"].iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(dev > 1e-12, "detaching had no effect on gradients");
    }

    #[test]
    fn checkpoint_roundtrip_and_resume_equivalence() {
        let ds = toy_dataset(2, 20, 61);
        let mcfg = tiny_model(2);
        let tcfg = fast_cfg(11, 4, 1);

        // uninterrupted run
        let full = train::<f32>(&mcfg, &ds, &tcfg).unwrap();

        // run 2 epochs of the 4-epoch schedule, checkpoint, reload, finish
        let mut state = new_state::<f32>(&mcfg, &ds.meta.grid, &tcfg, None).unwrap();
        run_epochs_until(&mut state, &ds, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_train_checkpoint(dir.path(), &state).unwrap();
        let mut resumed = load_train_checkpoint::<f32>(dir.path()).unwrap();
        assert_eq!(resumed.epoch, 2);
        assert_eq!(resumed.params.tensors, state.params.tensors);
        assert_eq!(resumed.opt.m, state.opt.m);
        run_epochs(&mut resumed, &ds).unwrap();

        assert_eq!(full.log, resumed.log, "resume diverged from full run");
        assert_eq!(full.params.tensors, resumed.params.tensors);
    }

    #[test]
    fn truncated_checkpoint_fails_the_checksum() {
        let ds = toy_dataset(2, 16, 62);
        let mcfg = tiny_model(2);
        let state = new_state::<f32>(&mcfg, &ds.meta.grid, &fast_cfg(12, 1, 1), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_train_checkpoint(dir.path(), &state).unwrap();
        let path = dir.path().join("opt.bin");
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let res = load_train_checkpoint::<f32>(dir.path());
        assert!(
            matches!(res, Err(Error::ChecksumMismatch { .. })),
            "got {:?}",
            res.as_ref().err()
        );
    }

    #[test]
    fn linear_model_gradient_check_is_exact() {
        // quadratic loss in the parameters: analytic and central differences
        // agree to round-off
        let mut g = Graph::<f64>::new();
        let w = g.leaf(arr1(&[0.3, -0.7, 0.2]).into_dyn());
        let x = g.constant(arr1(&[1.0, 2.0, 3.0]).into_dyn());
        let pred = g.mul(w, x);
        let target = g.constant(arr1(&[0.5, 0.5, 0.5]).into_dyn());
        let diff = g.sub(pred, target);
        let sq = g.mul(diff, diff);
        let loss = g.mean_all(sq);
        let store = g.backward(loss);
        let analytic = store.get(w).unwrap().clone();
        let h = 1e-4;
        let vals = [0.3, -0.7, 0.2];
        let f = |wv: &[f64]| -> f64 {
            let xs = [1.0, 2.0, 3.0];
            let t = [0.5, 0.5, 0.5];
            (0..3).map(|i| (wv[i] * xs[i] - t[i]).powi(2)).sum::<f64>() / 3.0
        };
        for i in 0..3 {
            let mut wp = vals;
            wp[i] += h;
            let fp = f(&wp);
            wp[i] -= 2.0 * h;
            let fm = f(&wp);
            let numeric = (fp - fm) / (2.0 * h);
            let rel = (analytic[[i]] - numeric).abs() / numeric.abs().max(1e-12);
            assert!(rel < 1e-8, "coord {i}: rel err {rel}");
        }
    }

    #[test]
    fn transformer_gradient_check_one_and_two_steps() {
        let grid = make_grid(8, 16).unwrap();
        let toy = ToyConfig::with_default_omegas(2, 63, 16);
        let start = Utc.with_ymd_and_hms(2000, 1, 1, 0, 0, 0).unwrap();
        let mut ds =
            generate_toy_dataset(&toy, &grid, Splits::contiguous(10, 3, 3), start).unwrap();
        ds.meta.stats = Some(compute_norm_stats(&ds).unwrap());
        let mcfg = tiny_model(2);
        assert!(
            model::init_parameters::<f64>(&mcfg, &grid, 1)
                .unwrap()
                .n_params()
                < 100_000
        );
        let r1 = gradient_check(&mcfg, &ds, 1, 12, 64).unwrap();
        assert!(
            r1.max_rel_error < 2e-3,
            "1-step gradcheck: {}",
            r1.max_rel_error
        );
        let r2 = gradient_check(&mcfg, &ds, 2, 8, 65).unwrap();
        assert!(
            r2.max_rel_error < 5e-3,
            "2-step gradcheck: {}",
            r2.max_rel_error
        );
    }
}
