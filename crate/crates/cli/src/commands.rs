//! Pipeline steps behind the CLI subcommands.
//!
//! Every step runs under `output_dir/run-<hash>/` and is idempotent: a
//! `<step>.done` marker holding the config hash makes reruns cache hits, and
//! a failed step always leaves a `<step>.failed` marker next to its partial
//! outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use aeriscast_core::data::{
    compute_norm_stats, generate_toy_dataset, load_dataset, save_dataset, Dataset, Split,
    StateTensor,
};
use aeriscast_core::model::{load_checkpoint, ModelConfig, ParameterSet};
use aeriscast_core::rollout::{
    climatology_forecast, load_forecasts, persistence_forecast, rollout, save_forecasts, Forecast,
};
use aeriscast_core::training::{self, GradCheckReport, TrainConfig};
use aeriscast_core::verify::{
    self, acc, lat_rmse, psd_ratio, score_report, svg_line_plot, svg_panel_grid,
    top_quartile_mean, EnsembleScores, MetricSeries, RunEntry,
};
use aeriscast_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::{LoadedConfig, RunConfig};

/// A run directory plus the config that owns it.
pub struct Pipeline {
    pub cfg: RunConfig,
    pub hash: String,
    pub run_dir: PathBuf,
}

impl Pipeline {
    pub fn new(loaded: &LoadedConfig) -> Result<Self> {
        let run_dir = loaded.run_dir();
        std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
        let cfg_path = run_dir.join("config.json");
        std::fs::write(&cfg_path, &loaded.canonical).map_err(|e| Error::io(&cfg_path, e))?;
        Ok(Pipeline {
            cfg: loaded.config.clone(),
            hash: loaded.hash.clone(),
            run_dir,
        })
    }

    /// Runs `body` once per config hash: skips when the step's done marker
    /// matches, and leaves a failure marker beside any partial output.
    fn step(&self, name: &str, body: impl FnOnce() -> Result<()>) -> Result<()> {
        let done = self.run_dir.join(format!("{name}.done"));
        let failed = self.run_dir.join(format!("{name}.failed"));
        if std::fs::read_to_string(&done).is_ok_and(|h| h == self.hash) {
            println!("[{name}] cached ({})", self.hash);
            return Ok(());
        }
        let _ = std::fs::remove_file(&failed);
        match body() {
            Ok(()) => {
                std::fs::write(&done, &self.hash).map_err(|e| Error::io(&done, e))?;
                println!("[{name}] done");
                Ok(())
            }
            Err(e) => {
                let _ = std::fs::write(&failed, e.to_string());
                Err(e)
            }
        }
    }

    fn data_dir(&self) -> PathBuf {
        self.run_dir.join("data")
    }

    /// Loads the run's dataset: the materialized copy under the run directory
    /// if present, else the configured external path.
    pub fn dataset(&self) -> Result<Dataset> {
        let local = self.data_dir();
        if local.join("meta.json").exists() {
            return load_dataset(&local);
        }
        match &self.cfg.data.path {
            Some(p) => load_dataset(p),
            None => Err(Error::invalid(
                "no dataset yet: run generate-data (toy) or set data.path",
            )),
        }
    }

    pub fn generate_data(&self) -> Result<()> {
        self.step("generate-data", || {
            let toy = self.cfg.data.toy.as_ref().ok_or_else(|| {
                Error::invalid("generate-data needs a data.toy block (data.path is external)")
            })?;
            let grid = aeriscast_core::grid::make_grid(toy.n_lat, toy.n_lon)?;
            let ds = generate_toy_dataset(&toy.config, &grid, toy.splits(), toy.start_time)?;
            save_dataset(&ds, &self.data_dir())
        })
    }

    pub fn compute_stats(&self) -> Result<()> {
        self.step("compute-stats", || {
            let mut ds = self.dataset()?;
            ds.meta.stats = Some(compute_norm_stats(&ds)?);
            save_dataset(&ds, &self.data_dir())
        })
    }

    fn model_dir(&self, model: &str) -> PathBuf {
        self.run_dir.join(model)
    }

    /// Trains (or resumes) the 1-step pre-trained model.
    pub fn train(&self) -> Result<()> {
        self.step("train", || {
            let ds = self.dataset()?;
            let dir = self.model_dir("pretrain");
            train_or_resume(&dir, &self.cfg.model, &ds, &self.cfg.train, None)
        })
    }

    /// Fine-tunes with a 4- or 8-step unroll. The 4-step model starts from
    /// the pre-trained weights; the 8-step model starts from the 4-step
    /// weights when available, matching the progressive schedule.
    pub fn finetune(&self, steps: usize) -> Result<()> {
        if steps != 4 && steps != 8 {
            return Err(Error::invalid(format!(
                "finetune supports 4 or 8 steps, got {steps}"
            )));
        }
        let name = format!("finetune{steps}");
        self.step(&name, || {
            let ds = self.dataset()?;
            let parent = if steps == 8 && self.is_done("finetune4") {
                self.model_dir("finetune4")
            } else {
                self.model_dir("pretrain")
            };
            let (_, params) = load_checkpoint::<f32>(&parent.join("best"))?;
            let tcfg = self.cfg.finetune_cfg(steps);
            train_or_resume(
                &self.model_dir(&name),
                &self.cfg.model,
                &ds,
                &tcfg,
                Some(params),
            )
        })
    }

    fn is_done(&self, name: &str) -> bool {
        std::fs::read_to_string(self.run_dir.join(format!("{name}.done")))
            .is_ok_and(|h| h == self.hash)
    }

    /// Trained models in preference order (longest fine-tune first).
    pub fn available_models(&self) -> Vec<String> {
        ["finetune8", "finetune4", "pretrain"]
            .iter()
            .filter(|m| self.model_dir(m).join("best").join("model.json").exists())
            .map(|m| m.to_string())
            .collect()
    }

    fn resolve_model(&self, requested: Option<&str>) -> Result<String> {
        match requested {
            Some(m) => {
                if !["pretrain", "finetune4", "finetune8"].contains(&m) {
                    return Err(Error::invalid(format!(
                        "unknown model {m:?}: expected pretrain, finetune4, or finetune8"
                    )));
                }
                Ok(m.to_string())
            }
            None => self
                .available_models()
                .into_iter()
                .next()
                .ok_or_else(|| Error::invalid("no trained model found: run train first")),
        }
    }

    /// Forecast lead count implied by the lead horizon.
    fn lead_steps(&self, ds: &Dataset, lead_days: usize) -> Result<usize> {
        let hours = 24 * lead_days as i64;
        if hours % ds.meta.dt_hours != 0 {
            return Err(Error::invalid(format!(
                "lead of {lead_days} days is not a multiple of dt = {}h",
                ds.meta.dt_hours
            )));
        }
        Ok((hours / ds.meta.dt_hours) as usize)
    }

    /// Evenly spaced init indices in the test split that can reach `n_steps`.
    fn det_init_indices(&self, ds: &Dataset, n_inits: usize, n_steps: usize) -> Result<Vec<usize>> {
        let (s0, s1) = ds.meta.splits.range(Split::Test);
        let max_t = (s1 - 1).min(ds.meta.n_times.saturating_sub(n_steps + 1));
        if max_t < s0 {
            return Err(Error::invalid(format!(
                "test split [{s0}, {s1}) cannot host a {n_steps}-step forecast"
            )));
        }
        let mut out: Vec<usize> = if n_inits == 1 {
            vec![s0]
        } else {
            (0..n_inits)
                .map(|i| {
                    s0 + ((i as f64) * (max_t - s0) as f64 / (n_inits as f64 - 1.0)).round()
                        as usize
                })
                .collect()
        };
        out.dedup();
        Ok(out)
    }

    /// Rolls out `n_inits` evenly spaced deterministic forecasts plus (when
    /// ensemble scoring is enabled) a consecutive block for lagged ensembles.
    pub fn rollout_cmd(
        &self,
        model: Option<&str>,
        n_inits: usize,
        lead_days: usize,
    ) -> Result<()> {
        let model = self.resolve_model(model)?;
        let name = format!("rollout-{model}");
        self.step(&name, || {
            let ds = self.dataset()?;
            let n_steps = self.lead_steps(&ds, lead_days)?;
            let (_, params) = load_checkpoint::<f32>(&self.model_dir(&model).join("best"))?;
            let det_dir = self.run_dir.join("forecasts").join(&model).join("det");
            let indices = self.det_init_indices(&ds, n_inits, n_steps)?;
            let det = self.roll_indices(&ds, &params, &indices, n_steps, &model)?;
            save_forecasts(&det, &ds.meta.schema, &ds.meta.grid, &det_dir)?;
            println!(
                "[{name}] {} forecasts x {} leads",
                det.len(),
                n_steps
            );

            let m = self.cfg.evaluation.ensemble_size;
            if m >= 2 {
                let (s0, s1) = ds.meta.splits.range(Split::Test);
                let newest = (s1 - 1).min(ds.meta.n_times.saturating_sub(n_steps + 1));
                if newest < s0 + m - 1 {
                    return Err(Error::invalid(format!(
                        "test split too short for a {m}-member lagged ensemble"
                    )));
                }
                let block: Vec<usize> = (newest + 1 - m..=newest).collect();
                let ens = self.roll_indices(&ds, &params, &block, n_steps, &model)?;
                let ens_dir = self.run_dir.join("forecasts").join(&model).join("ens");
                save_forecasts(&ens, &ds.meta.schema, &ds.meta.grid, &ens_dir)?;
            }
            Ok(())
        })
    }

    fn roll_indices(
        &self,
        ds: &Dataset,
        params: &ParameterSet<f32>,
        indices: &[usize],
        n_steps: usize,
        source: &str,
    ) -> Result<Vec<Forecast>> {
        let stats = ds.stats()?;
        indices
            .iter()
            .map(|&t| {
                let init = StateTensor::new(ds.state(t).to_owned(), ds.meta.time(t))?;
                let mut f = rollout(
                    params,
                    &self.cfg.model,
                    &ds.meta.schema,
                    &ds.meta.grid,
                    stats,
                    &init,
                    ds.meta.dt_hours,
                    n_steps,
                )?;
                f.source = source.to_string();
                Ok(f)
            })
            .collect()
    }

    /// Scores one model's forecasts and writes `eval/<model>.json`.
    pub fn evaluate(&self, model: Option<&str>) -> Result<()> {
        let model = self.resolve_model(model)?;
        let name = format!("evaluate-{model}");
        self.step(&name, || {
            let ds = self.dataset()?;
            let bundle = evaluate_model(&self.cfg, &self.hash, &self.run_dir, &ds, &model)?;
            let dir = self.run_dir.join("eval");
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let path = dir.join(format!("{model}.json"));
            std::fs::write(&path, serde_json::to_string_pretty(&bundle).expect("serializes"))
                .map_err(|e| Error::io(&path, e))
        })
    }

    /// Emits the score table and SVG figures from all evaluated models.
    pub fn report(&self) -> Result<()> {
        self.step("report", || {
            let eval_dir = self.run_dir.join("eval");
            let mut bundles = Vec::new();
            for model in ["pretrain", "finetune4", "finetune8"] {
                let path = eval_dir.join(format!("{model}.json"));
                if let Ok(text) = std::fs::read_to_string(&path) {
                    let b: EvalBundle =
                        serde_json::from_str(&text).map_err(|e| Error::Malformed {
                            path: path.clone(),
                            reason: e.to_string(),
                        })?;
                    bundles.push(b);
                }
            }
            if bundles.is_empty() {
                return Err(Error::invalid("nothing evaluated yet: run evaluate first"));
            }
            write_report(&self.cfg, &self.run_dir.join("report"), &bundles)
        })
    }

    /// Runs the 2x2x2 ablation grid — channel weighting x {1,8}-step x
    /// latitude weighting — end to end at the configured scale, then writes
    /// the comparison table with per-lead minima flagged.
    pub fn ablate(&self) -> Result<()> {
        let ds = self.dataset()?;
        let channel = self.cfg.evaluation.channels[0].clone();
        let mut entries = Vec::new();
        for channel_weighting in [false, true] {
            for n_steps in [1usize, 8] {
                for lat_weighting in [false, true] {
                    let cell = format!(
                        "cw{}_ns{}_lw{}",
                        u8::from(channel_weighting),
                        n_steps,
                        u8::from(lat_weighting)
                    );
                    let series = self.run_ablation_cell(
                        &ds,
                        &cell,
                        channel_weighting,
                        n_steps,
                        lat_weighting,
                        &channel,
                    );
                    entries.push(RunEntry {
                        name: cell.clone(),
                        channel_weighting,
                        n_steps,
                        lat_weighting,
                        series: match series {
                            Ok(s) => Some(s),
                            Err(e) => {
                                eprintln!("[ablate] cell {cell} failed: {e}");
                                None
                            }
                        },
                    });
                }
            }
        }
        self.step("ablate-report", || {
            let report = score_report(&entries, &channel, &self.cfg.evaluation.report_lead_hours)?;
            report.write(&self.run_dir.join("ablate"))
        })
    }

    fn run_ablation_cell(
        &self,
        ds: &Dataset,
        cell: &str,
        channel_weighting: bool,
        n_steps: usize,
        lat_weighting: bool,
        channel: &str,
    ) -> Result<MetricSeries> {
        let cell_dir = self.run_dir.join("ablate").join(cell);
        let series_path = cell_dir.join("rmse.json");
        let name = format!("ablate-{cell}");
        self.step(&name, || {
            // 1-step pre-training with the cell's weighting choices
            let mut pre = self.cfg.train.clone();
            pre.channel_weighting = channel_weighting;
            pre.lat_weighting = lat_weighting;
            pre.n_steps = 1;
            let pre_dir = cell_dir.join("pretrain");
            train_or_resume(&pre_dir, &self.cfg.model, ds, &pre, None)?;

            // optional 8-step fine-tune on top
            let final_dir = if n_steps == 8 {
                let (_, params) = load_checkpoint::<f32>(&pre_dir.join("best"))?;
                let mut ft = self.cfg.finetune_cfg(8);
                ft.channel_weighting = channel_weighting;
                ft.lat_weighting = lat_weighting;
                let ft_dir = cell_dir.join("finetune8");
                train_or_resume(&ft_dir, &self.cfg.model, ds, &ft, Some(params))?;
                ft_dir
            } else {
                pre_dir
            };

            // rollout + deterministic score for the report channel
            let lead_steps = self.lead_steps(ds, self.cfg.evaluation.lead_days)?;
            let indices = self.det_init_indices(ds, self.cfg.evaluation.n_inits, lead_steps)?;
            let (_, params) = load_checkpoint::<f32>(&final_dir.join("best"))?;
            let fcs = self.roll_indices(ds, &params, &indices, lead_steps, cell)?;
            let series = lat_rmse(&fcs, ds, channel)?;
            std::fs::create_dir_all(&cell_dir).map_err(|e| Error::io(&cell_dir, e))?;
            std::fs::write(
                &series_path,
                serde_json::to_string_pretty(&series).expect("serializes"),
            )
            .map_err(|e| Error::io(&series_path, e))
        })?;
        let text =
            std::fs::read_to_string(&series_path).map_err(|e| Error::io(&series_path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path: series_path.clone(),
            reason: e.to_string(),
        })
    }

    /// Finite-difference gradient verification on the configured model.
    pub fn gradcheck(
        &self,
        n_steps: usize,
        coords_per_tensor: usize,
        tolerance: Option<f64>,
    ) -> Result<GradCheckReport> {
        let mut ds = self.dataset()?;
        if ds.meta.stats.is_none() {
            ds.meta.stats = Some(compute_norm_stats(&ds)?);
        }
        let report =
            training::gradient_check(&self.cfg.model, &ds, n_steps, coords_per_tensor, self.cfg.seed)?;
        for (name, err) in &report.per_tensor {
            println!("{name}: max rel error {err:.3e}");
        }
        println!(
            "gradcheck ({n_steps}-step): max rel error {:.3e}",
            report.max_rel_error
        );
        let path = self.run_dir.join(format!("gradcheck-{n_steps}.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&report).expect("serializes"))
            .map_err(|e| Error::io(&path, e))?;
        if let Some(tol) = tolerance {
            if report.max_rel_error > tol {
                return Err(Error::NumericFailure {
                    context: format!(
                        "gradient check: max rel error {:.3e} exceeds {tol:.3e}",
                        report.max_rel_error
                    ),
                });
            }
        }
        Ok(report)
    }
}

/// Trains to completion, resuming from an existing checkpoint in `dir` if one
/// is present (resumed runs match uninterrupted ones bit for bit).
fn train_or_resume(
    dir: &Path,
    mcfg: &ModelConfig,
    ds: &Dataset,
    tcfg: &TrainConfig,
    init: Option<ParameterSet<f32>>,
) -> Result<()> {
    let mut state = if dir.join("train.json").exists() {
        let state = training::load_train_checkpoint::<f32>(dir)?;
        if state.train_cfg != *tcfg {
            return Err(Error::invalid(format!(
                "checkpoint in {} was trained with different settings; remove it or change the config",
                dir.display()
            )));
        }
        state
    } else {
        training::new_state(mcfg, &ds.meta.grid, tcfg, init)?
    };
    training::run_epochs(&mut state, ds)?;
    if let Some(rec) = state.log.last() {
        println!(
            "  epoch {}: train {:.6} val {:.6}",
            rec.epoch, rec.train_loss, rec.val_loss
        );
    }
    training::save_train_checkpoint(dir, &state)
}

/// Per-channel power spectra of a model against truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub pred: Vec<f64>,
    pub truth: Vec<f64>,
    pub ratio: Vec<Option<f64>>,
    /// Mean predicted/actual power over the top quartile of wavenumbers.
    pub top_quartile_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsemblePoint {
    pub center_lead_hours: f64,
    pub scores: EnsembleScores,
}

/// Everything `evaluate` computes for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalBundle {
    pub model: String,
    pub config_hash: String,
    pub n_steps_trained: usize,
    pub rmse: BTreeMap<String, MetricSeries>,
    pub acc: BTreeMap<String, MetricSeries>,
    pub persistence_rmse: BTreeMap<String, MetricSeries>,
    pub climatology_rmse: BTreeMap<String, MetricSeries>,
    pub spectra: BTreeMap<String, SpectrumReport>,
    pub ensemble: BTreeMap<String, Vec<EnsemblePoint>>,
}

fn evaluate_model(
    cfg: &RunConfig,
    hash: &str,
    run_dir: &Path,
    ds: &Dataset,
    model: &str,
) -> Result<EvalBundle> {
    let det_dir = run_dir.join("forecasts").join(model).join("det");
    let (_, det) = load_forecasts(&det_dir)?;
    let clim = ds.climatology();
    let n_prog = ds.meta.schema.n_prognostic();

    // matching baselines from the same init times
    let n_steps = det.first().map(|f| f.n_steps()).unwrap_or(0);
    let persistence: Vec<Forecast> = det
        .iter()
        .map(|f| {
            let t = ((f.init_time - ds.meta.start_time).num_hours() / ds.meta.dt_hours) as usize;
            let init = StateTensor::new(ds.state(t).to_owned(), f.init_time)?;
            Ok(persistence_forecast(&init, n_prog, ds.meta.dt_hours, n_steps))
        })
        .collect::<Result<_>>()?;
    let climatology: Vec<Forecast> = det
        .iter()
        .map(|f| climatology_forecast(&clim, f.init_time, ds.meta.dt_hours, n_steps))
        .collect();

    let mut bundle = EvalBundle {
        model: model.to_string(),
        config_hash: hash.to_string(),
        n_steps_trained: match model {
            "finetune8" => 8,
            "finetune4" => 4,
            _ => 1,
        },
        rmse: BTreeMap::new(),
        acc: BTreeMap::new(),
        persistence_rmse: BTreeMap::new(),
        climatology_rmse: BTreeMap::new(),
        spectra: BTreeMap::new(),
        ensemble: BTreeMap::new(),
    };

    for channel in &cfg.evaluation.channels {
        let c = ds
            .meta
            .schema
            .index_of(channel)
            .ok_or_else(|| Error::invalid(format!("unknown channel {channel:?}")))?;
        bundle
            .rmse
            .insert(channel.clone(), lat_rmse(&det, ds, channel)?);
        bundle
            .acc
            .insert(channel.clone(), acc(&det, ds, &clim, channel)?);
        bundle
            .persistence_rmse
            .insert(channel.clone(), lat_rmse(&persistence, ds, channel)?);
        bundle
            .climatology_rmse
            .insert(channel.clone(), lat_rmse(&climatology, ds, channel)?);

        let pred_sp = verify::ps1d_forecast_mean(&det, c, &ds.meta.grid);
        let truth_sp = verify::ps1d_truth_mean(&det, ds, c)?;
        let ratio = psd_ratio(&pred_sp, &truth_sp)?;
        bundle.spectra.insert(
            channel.clone(),
            SpectrumReport {
                top_quartile_ratio: top_quartile_mean(&ratio),
                pred: pred_sp,
                truth: truth_sp,
                ratio,
            },
        );
    }

    let m = cfg.evaluation.ensemble_size;
    let ens_dir = run_dir.join("forecasts").join(model).join("ens");
    if m >= 2 && ens_dir.join("meta.json").exists() {
        let (_, ens_fcs) = load_forecasts(&ens_dir)?;
        let newest = ens_fcs
            .iter()
            .map(|f| f.init_time)
            .max()
            .ok_or_else(|| Error::invalid("empty ensemble forecast store"))?;
        let leads = ens_fcs[0].n_steps();
        for channel in &cfg.evaluation.channels {
            let c = ds.meta.schema.index_of(channel).expect("checked above");
            let mut points = Vec::new();
            for j in 1..=leads.saturating_sub(m - 1) {
                let valid = newest + chrono::Duration::hours(ds.meta.dt_hours * j as i64);
                let ens = verify::build_lagged_ensemble(&ens_fcs, valid, m, ds.meta.dt_hours)?;
                let t = ((valid - ds.meta.start_time).num_hours() / ds.meta.dt_hours) as usize;
                let scores = verify::ensemble_scores(
                    &ens,
                    ds.channel_field(t, c),
                    &ds.meta.grid,
                    c,
                    cfg.evaluation.fair_crps,
                )?;
                points.push(EnsemblePoint {
                    center_lead_hours: ens.center_lead_hours,
                    scores,
                });
            }
            bundle.ensemble.insert(channel.clone(), points);
        }
    }
    Ok(bundle)
}

fn write_report(cfg: &RunConfig, dir: &Path, bundles: &[EvalBundle]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    // score table: one row per model, column minima flagged
    let channel = &cfg.evaluation.channels[0];
    let entries: Vec<RunEntry> = bundles
        .iter()
        .map(|b| RunEntry {
            name: b.model.clone(),
            channel_weighting: cfg.train.channel_weighting,
            n_steps: b.n_steps_trained,
            lat_weighting: cfg.train.lat_weighting,
            series: b.rmse.get(channel).cloned(),
        })
        .collect();
    let leads: Vec<i64> = {
        // keep only report leads the forecasts actually reach
        let available = bundles[0]
            .rmse
            .get(channel)
            .map(|s| s.lead_hours.clone())
            .unwrap_or_default();
        cfg.evaluation
            .report_lead_hours
            .iter()
            .copied()
            .filter(|lh| available.contains(lh))
            .collect()
    };
    score_report(&entries, channel, &leads)?.write(dir)?;

    for channel in &cfg.evaluation.channels {
        // RMSE vs lead with baselines
        let mut series = Vec::new();
        for b in bundles {
            if let Some(s) = b.rmse.get(channel) {
                series.push((b.model.clone(), pair(s)));
            }
        }
        if let Some(s) = bundles[0].persistence_rmse.get(channel) {
            series.push(("persistence".into(), pair(s)));
        }
        if let Some(s) = bundles[0].climatology_rmse.get(channel) {
            series.push(("climatology".into(), pair(s)));
        }
        let rmse_svg = svg_line_plot(
            &format!("RMSE vs lead — {channel}"),
            "lead (h)",
            "rmse",
            &series,
            false,
        );
        write_text(&dir.join(format!("rmse_{channel}.svg")), &rmse_svg)?;

        // spectra + ratio panels
        let mut panels = Vec::new();
        for b in bundles {
            if let Some(sp) = b.spectra.get(channel) {
                let psd = svg_line_plot(
                    &format!("PS1D — {channel} ({})", b.model),
                    "zonal wavenumber",
                    "power",
                    &[
                        ("truth".into(), indexed(&sp.truth)),
                        (b.model.clone(), indexed(&sp.pred)),
                    ],
                    true,
                );
                let ratio_pts: Vec<(f64, f64)> = sp
                    .ratio
                    .iter()
                    .enumerate()
                    .filter_map(|(k, r)| r.map(|v| (k as f64, v)))
                    .collect();
                let ratio = svg_line_plot(
                    &format!("PS1D ratio — {channel} ({})", b.model),
                    "zonal wavenumber",
                    "pred / truth",
                    &[("ratio".into(), ratio_pts)],
                    false,
                );
                panels.push(psd);
                panels.push(ratio);
            }
        }
        if !panels.is_empty() {
            write_text(
                &dir.join(format!("psd_{channel}.svg")),
                &svg_panel_grid(&panels, 2),
            )?;
        }

        // ensemble panel: rmse/spread and spread-skill and crps vs center lead
        let mut panels = Vec::new();
        for b in bundles {
            let Some(points) = b.ensemble.get(channel) else {
                continue;
            };
            if points.is_empty() {
                continue;
            }
            let take = |f: &dyn Fn(&EnsembleScores) -> Option<f64>| -> Vec<(f64, f64)> {
                points
                    .iter()
                    .filter_map(|p| f(&p.scores).map(|v| (p.center_lead_hours, v)))
                    .collect()
            };
            panels.push(svg_line_plot(
                &format!("ensemble mean RMSE and spread — {channel} ({})", b.model),
                "center lead (h)",
                "value",
                &[
                    ("rmse".into(), take(&|s| Some(s.ens_mean_rmse))),
                    ("spread".into(), take(&|s| s.spread)),
                ],
                false,
            ));
            panels.push(svg_line_plot(
                &format!("spread/skill — {channel} ({})", b.model),
                "center lead (h)",
                "spread / rmse",
                &[("spread_skill".into(), take(&|s| s.spread_skill))],
                false,
            ));
            panels.push(svg_line_plot(
                &format!("CRPS — {channel} ({})", b.model),
                "center lead (h)",
                "crps",
                &[("crps".into(), take(&|s| Some(s.crps)))],
                false,
            ));
        }
        if !panels.is_empty() {
            write_text(
                &dir.join(format!("ensemble_{channel}.svg")),
                &svg_panel_grid(&panels, 3),
            )?;
        }
    }
    Ok(())
}

fn pair(s: &MetricSeries) -> Vec<(f64, f64)> {
    s.lead_hours
        .iter()
        .zip(&s.values)
        .map(|(&l, &v)| (l as f64, v))
        .collect()
}

fn indexed(v: &[f64]) -> Vec<(f64, f64)> {
    v.iter().enumerate().map(|(i, &x)| (i as f64, x)).collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
