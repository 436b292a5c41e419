//! Shifted-window attention transformer over the lat-lon token grid:
//! zonal-periodic shifting with meridional-only masking, absolute position
//! embedding, constant feature resolution through all blocks.

use indexmap::IndexMap;
use ndarray::{Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::grid::GridSpec;
use crate::{util, Error, Result, Scalar};

/// Additive logit applied to cross-seam token pairs.
const MASK_LOGIT: f64 = -1.0e4;
/// Upper clamp for the pre-exponential logit-scale parameter.
const LOGIT_SCALE_MAX_LN: f64 = 4.605170185988092; // ln(100)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionMode {
    /// The network output is the normalized next state.
    Direct,
    /// The network output is `(X_{t+dt} - X_t) / sigma_dX` per channel.
    Residual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub patch_size: usize,
    pub n_heads: usize,
    /// `(w_h, w_w)` in token units.
    pub window: (usize, usize),
    pub drop_path_rate: f64,
    pub prediction_mode: PredictionMode,
    /// Prognostic plus static channels fed to the network.
    pub in_channels: usize,
    /// Prognostic channels predicted by the network.
    pub out_channels: usize,
}

impl ModelConfig {
    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        let (n_lat, n_lon) = grid.shape();
        let p = self.patch_size;
        if p == 0 || n_lat % p != 0 || n_lon % p != 0 {
            return Err(Error::invalid(format!(
                "grid {n_lat}x{n_lon} not divisible by patch size {p}"
            )));
        }
        let (t_h, t_w) = (n_lat / p, n_lon / p);
        let (w_h, w_w) = self.window;
        if w_h == 0 || w_w == 0 || t_h % w_h != 0 || t_w % w_w != 0 {
            return Err(Error::invalid(format!(
                "token grid {t_h}x{t_w} not divisible by window {w_h}x{w_w}"
            )));
        }
        if self.n_heads == 0 || !self.embed_dim.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.n_heads
            )));
        }
        if self.depth == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("depth and channel counts must be positive"));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(Error::invalid(format!(
                "drop_path_rate {} outside [0, 1)",
                self.drop_path_rate
            )));
        }
        Ok(())
    }

    /// Token-grid shape `(T_h, T_w)`.
    pub fn token_grid(&self, grid: &GridSpec) -> (usize, usize) {
        let (n_lat, n_lon) = grid.shape();
        (n_lat / self.patch_size, n_lon / self.patch_size)
    }

    /// Window shift for block `i`: zero on even blocks, `floor(window/2)` on
    /// odd blocks.
    pub fn shift(&self, block: usize) -> (usize, usize) {
        if block % 2 == 1 {
            (self.window.0 / 2, self.window.1 / 2)
        } else {
            (0, 0)
        }
    }
}

/// Named parameter tensors in a fixed iteration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<T: Scalar> {
    pub tensors: IndexMap<String, ArrayD<T>>,
}

/// Canonical tensor names and shapes, derived solely from config and grid.
pub fn parameter_shapes(cfg: &ModelConfig, grid: &GridSpec) -> Vec<(String, Vec<usize>)> {
    let d = cfg.embed_dim;
    let p = cfg.patch_size;
    let (t_h, t_w) = cfg.token_grid(grid);
    let n_tok = t_h * t_w;
    let hidden = 4 * d;
    let mut out = vec![
        ("patch_embed.weight".into(), vec![p * p * cfg.in_channels, d]),
        ("patch_embed.bias".into(), vec![d]),
        ("pos_embed".into(), vec![n_tok, d]),
    ];
    for i in 0..cfg.depth {
        let b = format!("blocks.{i}");
        out.push((format!("{b}.attn.qkv.weight"), vec![d, 3 * d]));
        out.push((format!("{b}.attn.qkv.bias"), vec![3 * d]));
        out.push((format!("{b}.attn.logit_scale"), vec![cfg.n_heads]));
        out.push((format!("{b}.attn.proj.weight"), vec![d, d]));
        out.push((format!("{b}.attn.proj.bias"), vec![d]));
        out.push((format!("{b}.norm1.gain"), vec![d]));
        out.push((format!("{b}.norm1.bias"), vec![d]));
        out.push((format!("{b}.mlp.fc1.weight"), vec![d, hidden]));
        out.push((format!("{b}.mlp.fc1.bias"), vec![hidden]));
        out.push((format!("{b}.mlp.fc2.weight"), vec![hidden, d]));
        out.push((format!("{b}.mlp.fc2.bias"), vec![d]));
        out.push((format!("{b}.norm2.gain"), vec![d]));
        out.push((format!("{b}.norm2.bias"), vec![d]));
    }
    out.push(("head.weight".into(), vec![d, p * p * cfg.out_channels]));
    out.push(("head.bias".into(), vec![p * p * cfg.out_channels]));
    out
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Normal(0, std) truncated at two standard deviations.
fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let v = normal(rng);
        if v.abs() <= 2.0 {
            return v * std;
        }
    }
}

impl<T: Scalar> ParameterSet<T> {
    pub fn get(&self, name: &str) -> &ArrayD<T> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn n_params(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .values()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Convert element type (e.g. stored f32 to f64 for gradient checks).
    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.mapv(|x| U::real(x.as_f64()))))
                .collect(),
        }
    }
}

/// Truncated-normal (std 0.02) linear weights, unit normalization gains,
/// zero biases, zero position embedding, zero logit-scale parameters, and a
/// zero decoder head so residual mode starts at the identity forecast.
/// Deterministic per seed.
pub fn init_parameters<T: Scalar>(
    cfg: &ModelConfig,
    grid: &GridSpec,
    seed: u64,
) -> Result<ParameterSet<T>> {
    cfg.validate(grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = IndexMap::new();
    for (name, shape) in parameter_shapes(cfg, grid) {
        let tensor = if name.ends_with(".gain") {
            ArrayD::from_elem(IxDyn(&shape), T::one())
        } else if name.ends_with("weight") && !name.starts_with("head.") {
            ArrayD::from_shape_simple_fn(IxDyn(&shape), || T::real(trunc_normal(&mut rng, 0.02)))
        } else {
            ArrayD::zeros(IxDyn(&shape))
        };
        tensors.insert(name, tensor);
    }
    Ok(ParameterSet { tensors })
}

/// Graph handles for every parameter tensor, registered as leaves.
pub struct ParamVars {
    vars: IndexMap<String, Var>,
}

impl ParamVars {
    pub fn register<T: Scalar>(g: &mut Graph<T>, params: &ParameterSet<T>) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), g.leaf(v.clone())))
            .collect();
        ParamVars { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Non-overlapping `p x p` patches linearly projected to the embedding
/// dimension, then the absolute position embedding is added.
/// Input `[C_in, H, W]`, output token grid `[T_h, T_w, D]`.
pub fn patch_embed<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    pv: &ParamVars,
    cfg: &ModelConfig,
    grid: &GridSpec,
) -> Result<Var> {
    let (n_lat, n_lon) = grid.shape();
    let p = cfg.patch_size;
    let shape = g.value(x).shape().to_vec();
    if shape != [cfg.in_channels, n_lat, n_lon] {
        return Err(Error::invalid(format!(
            "patch_embed input shape {shape:?}, expected [{}, {n_lat}, {n_lon}]",
            cfg.in_channels
        )));
    }
    let (t_h, t_w) = cfg.token_grid(grid);
    let c = cfg.in_channels;
    let split = g.reshape(x, &[c, t_h, p, t_w, p]);
    let patches = g.permute(split, &[1, 3, 2, 4, 0]); // [T_h, T_w, p, p, C]
    let flat = g.reshape(patches, &[t_h * t_w, p * p * c]);
    let proj = g.linear(flat, pv.var("patch_embed.weight"), pv.var("patch_embed.bias"));
    let with_pos = g.add(proj, pv.var("pos_embed"));
    Ok(g.reshape(with_pos, &[t_h, t_w, cfg.embed_dim]))
}

/// Tokens circularly rolled by `(-s_h, -s_w)` and partitioned into
/// non-overlapping windows: `[T_h, T_w, D]` to `[n_win, w_h*w_w, D]`.
pub fn window_partition<T: Scalar>(
    g: &mut Graph<T>,
    tokens: Var,
    window: (usize, usize),
    shift: (usize, usize),
) -> Result<Var> {
    let shape = g.value(tokens).shape().to_vec();
    let (t_h, t_w, d) = (shape[0], shape[1], shape[2]);
    let (w_h, w_w) = window;
    if t_h % w_h != 0 || t_w % w_w != 0 {
        return Err(Error::invalid(format!(
            "token grid {t_h}x{t_w} not divisible by window {w_h}x{w_w}"
        )));
    }
    let mut x = tokens;
    if shift.0 > 0 {
        x = g.roll(x, 0, -(shift.0 as isize));
    }
    if shift.1 > 0 {
        x = g.roll(x, 1, -(shift.1 as isize));
    }
    let (n_h, n_w) = (t_h / w_h, t_w / w_w);
    let split = g.reshape(x, &[n_h, w_h, n_w, w_w, d]);
    let grouped = g.permute(split, &[0, 2, 1, 3, 4]);
    Ok(g.reshape(grouped, &[n_h * n_w, w_h * w_w, d]))
}

/// Exact inverse of [`window_partition`].
pub fn window_inverse<T: Scalar>(
    g: &mut Graph<T>,
    windows: Var,
    token_grid: (usize, usize),
    window: (usize, usize),
    shift: (usize, usize),
) -> Var {
    let (t_h, t_w) = token_grid;
    let (w_h, w_w) = window;
    let d = g.value(windows).shape()[2];
    let (n_h, n_w) = (t_h / w_h, t_w / w_w);
    let split = g.reshape(windows, &[n_h, n_w, w_h, w_w, d]);
    let regrouped = g.permute(split, &[0, 2, 1, 3, 4]);
    let mut x = g.reshape(regrouped, &[t_h, t_w, d]);
    if shift.1 > 0 {
        x = g.roll(x, 1, shift.1 as isize);
    }
    if shift.0 > 0 {
        x = g.roll(x, 0, shift.0 as isize);
    }
    x
}

/// Per-window additive attention mask `[n_win, L, L]` (`L = w_h*w_w`) for a
/// meridional shift of `s_h`. Token pairs whose pre-roll latitude rows lie on
/// opposite sides of the top/bottom wrap seam get a large negative logit;
/// zonal pairs are never masked because longitude is physically periodic.
pub fn meridional_mask<T: Scalar>(
    t_h: usize,
    t_w: usize,
    window: (usize, usize),
    s_h: usize,
) -> Array3<T> {
    let (w_h, w_w) = window;
    let (n_h, n_w) = (t_h / w_h, t_w / w_w);
    let len = w_h * w_w;
    let mut mask = Array3::<T>::zeros((n_h * n_w, len, len));
    if s_h == 0 {
        return mask;
    }
    // after rolling rows by -s_h, only the last window row straddles the
    // seam: rolled rows >= t_h - s_h came from the top of the grid
    let seam_row = n_h - 1;
    let group = |local_row: usize| -> u8 {
        let rolled = seam_row * w_h + local_row;
        u8::from(rolled >= t_h - s_h)
    };
    for wc in 0..n_w {
        let w = seam_row * n_w + wc;
        for a in 0..len {
            for b in 0..len {
                if group(a / w_w) != group(b / w_w) {
                    mask[[w, a, b]] = T::real(MASK_LOGIT);
                }
            }
        }
    }
    mask
}

/// Scaled-cosine attention over each window: logits are the cosine of
/// normalized queries and keys times a learnable per-head scale
/// `exp(min(theta_h, ln 100))`, plus the additive mask; no relative position
/// bias. Input and output `[n_win, L, D]`.
pub fn window_attention<T: Scalar>(
    g: &mut Graph<T>,
    windows: Var,
    pv: &ParamVars,
    block: usize,
    n_heads: usize,
    mask: &Array3<T>,
) -> Var {
    let shape = g.value(windows).shape().to_vec();
    let (n_win, len, d) = (shape[0], shape[1], shape[2]);
    let dh = d / n_heads;
    let b = format!("blocks.{block}");

    let flat = g.reshape(windows, &[n_win * len, d]);
    let qkv = {
        let w = pv.var(format!("{b}.attn.qkv.weight").as_str());
        let bias = pv.var(format!("{b}.attn.qkv.bias").as_str());
        g.linear(flat, w, bias)
    };
    let mut heads = |start: usize| -> Var {
        let part = g.narrow(qkv, 1, start * d, d);
        let split = g.reshape(part, &[n_win, len, n_heads, dh]);
        let ordered = g.permute(split, &[0, 2, 1, 3]);
        g.reshape(ordered, &[n_win * n_heads, len, dh])
    };
    let (q, k, v) = (heads(0), heads(1), heads(2));

    let eps = T::real(1e-12);
    let qn = g.l2_normalize_last(q, eps);
    let kn = g.l2_normalize_last(k, eps);
    let kt = g.permute(kn, &[0, 2, 1]);
    let cos = g.bmm(qn, kt);

    let theta = pv.var(format!("{b}.attn.logit_scale").as_str());
    let clamped = g.clamp_max(theta, T::real(LOGIT_SCALE_MAX_LN));
    let tau = g.exp(clamped);
    let tau4 = g.reshape(tau, &[1, n_heads, 1, 1]);
    let cos4 = g.reshape(cos, &[n_win, n_heads, len, len]);
    let scaled = g.mul(cos4, tau4);

    let mask_var = g.constant(
        mask.clone()
            .into_shape_with_order((n_win, 1, len, len))
            .unwrap()
            .into_dyn(),
    );
    let masked = g.add(scaled, mask_var);
    let logits = g.reshape(masked, &[n_win * n_heads, len, len]);
    let attn = g.softmax_last(logits);

    let mixed = g.bmm(attn, v);
    let split = g.reshape(mixed, &[n_win, n_heads, len, dh]);
    let ordered = g.permute(split, &[0, 2, 1, 3]);
    let merged = g.reshape(ordered, &[n_win * len, d]);
    let proj = {
        let w = pv.var(format!("{b}.attn.proj.weight").as_str());
        let bias = pv.var(format!("{b}.attn.proj.bias").as_str());
        g.linear(merged, w, bias)
    };
    g.reshape(proj, &[n_win, len, d])
}

/// Per-branch stochastic-depth multipliers for one forward pass:
/// `2*depth` entries, each `0` (branch dropped) or `1/(1-rate)`.
pub fn sample_drop_path<T: Scalar>(rng: &mut ChaCha8Rng, depth: usize, rate: f64) -> Vec<T> {
    (0..2 * depth)
        .map(|_| {
            if rng.gen::<f64>() < rate {
                T::zero()
            } else {
                T::real(1.0 / (1.0 - rate))
            }
        })
        .collect()
}

/// Full forward pass: patch embedding, `depth` alternating-shift window
/// attention blocks with res-post-norm, decoder head, un-patchify.
/// `drop_keep` carries the per-branch stochastic-depth multipliers from
/// [`sample_drop_path`]; `None` disables stochastic depth (inference).
/// Returns `[C_out, H, W]`; NaN activations surface as a numeric failure
/// naming the block.
pub fn model_forward<T: Scalar>(
    g: &mut Graph<T>,
    input: Var,
    pv: &ParamVars,
    cfg: &ModelConfig,
    grid: &GridSpec,
    drop_keep: Option<&[T]>,
) -> Result<Var> {
    if let Some(keep) = drop_keep {
        if keep.len() != 2 * cfg.depth {
            return Err(Error::invalid(format!(
                "drop_keep length {}, expected {}",
                keep.len(),
                2 * cfg.depth
            )));
        }
    }
    let (t_h, t_w) = cfg.token_grid(grid);
    let d = cfg.embed_dim;
    let n_tok = t_h * t_w;
    let eps = T::real(1e-5);

    let mut x = patch_embed(g, input, pv, cfg, grid)?;
    for i in 0..cfg.depth {
        let b = format!("blocks.{i}");
        let shift = cfg.shift(i);
        let mask = meridional_mask::<T>(t_h, t_w, cfg.window, shift.0);

        let windows = window_partition(g, x, cfg.window, shift)?;
        let attended = window_attention(g, windows, pv, i, cfg.n_heads, &mask);
        let restored = window_inverse(g, attended, (t_h, t_w), cfg.window, shift);
        let normed = {
            let gain = pv.var(format!("{b}.norm1.gain").as_str());
            let bias = pv.var(format!("{b}.norm1.bias").as_str());
            g.layer_norm_last(restored, gain, bias, eps)
        };
        let branch = match drop_keep {
            Some(keep) => g.scale(normed, keep[2 * i]),
            None => normed,
        };
        x = g.add(x, branch);

        let flat = g.reshape(x, &[n_tok, d]);
        let h1 = {
            let w = pv.var(format!("{b}.mlp.fc1.weight").as_str());
            let bias = pv.var(format!("{b}.mlp.fc1.bias").as_str());
            g.linear(flat, w, bias)
        };
        let act = g.gelu(h1);
        let h2 = {
            let w = pv.var(format!("{b}.mlp.fc2.weight").as_str());
            let bias = pv.var(format!("{b}.mlp.fc2.bias").as_str());
            g.linear(act, w, bias)
        };
        let normed = {
            let gain = pv.var(format!("{b}.norm2.gain").as_str());
            let bias = pv.var(format!("{b}.norm2.bias").as_str());
            g.layer_norm_last(h2, gain, bias, eps)
        };
        let mlp_out = g.reshape(normed, &[t_h, t_w, d]);
        let branch = match drop_keep {
            Some(keep) => g.scale(mlp_out, keep[2 * i + 1]),
            None => mlp_out,
        };
        x = g.add(x, branch);
        g.check_finite(x, &format!("block {i}"))?;
    }

    let p = cfg.patch_size;
    let c_out = cfg.out_channels;
    let flat = g.reshape(x, &[n_tok, d]);
    let logits = g.linear(flat, pv.var("head.weight"), pv.var("head.bias"));
    let patches = g.reshape(logits, &[t_h, t_w, p, p, c_out]);
    let ordered = g.permute(patches, &[4, 0, 2, 1, 3]);
    let out = g.reshape(ordered, &[c_out, t_h * p, t_w * p]);
    g.check_finite(out, "head")?;
    Ok(out)
}

const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorIndex {
    name: String,
    shape: Vec<usize>,
    /// Offset into weights.bin, in elements.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    version: u32,
    config: ModelConfig,
    tensors: Vec<TensorIndex>,
}

/// Write `model.json` plus `weights.bin` (little-endian f32, concatenated in
/// index order, trailing checksum) into `dir`.
pub fn save_checkpoint<T: Scalar>(
    dir: &std::path::Path,
    cfg: &ModelConfig,
    params: &ParameterSet<T>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = Vec::new();
    let mut values = Vec::new();
    let mut offset = 0usize;
    for (name, tensor) in &params.tensors {
        index.push(TensorIndex {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            offset,
        });
        offset += tensor.len();
        values.extend(tensor.iter().map(|v| v.as_f64() as f32));
    }
    let meta = CheckpointMeta {
        version: CHECKPOINT_FORMAT_VERSION,
        config: cfg.clone(),
        tensors: index,
    };
    let json_path = dir.join("model.json");
    let json = serde_json::to_vec_pretty(&meta)
        .map_err(|e| Error::io(&json_path, std::io::Error::other(e)))?;
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    util::write_checksummed(&dir.join("weights.bin"), &util::f32_to_le_bytes(&values))
}

/// Load a checkpoint written by [`save_checkpoint`], verifying version,
/// checksum, and tensor shapes against the stored config.
pub fn load_checkpoint<T: Scalar>(
    dir: &std::path::Path,
) -> Result<(ModelConfig, ParameterSet<T>)> {
    let json_path = dir.join("model.json");
    let raw = std::fs::read(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let meta: CheckpointMeta = serde_json::from_slice(&raw).map_err(|e| Error::Malformed {
        path: json_path.clone(),
        reason: e.to_string(),
    })?;
    if meta.version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: json_path.clone(),
            found: meta.version,
            expected: CHECKPOINT_FORMAT_VERSION,
        });
    }
    let bin_path = dir.join("weights.bin");
    let bytes = util::read_checksummed(&bin_path)?;
    let values = util::f32_from_le_bytes(&bytes, &bin_path)?;
    let mut tensors = IndexMap::new();
    for t in &meta.tensors {
        let len: usize = t.shape.iter().product();
        let end = t.offset + len;
        if end > values.len() {
            return Err(Error::Malformed {
                path: bin_path.clone(),
                reason: format!("tensor {} overruns weight data", t.name),
            });
        }
        let data: Vec<T> = values[t.offset..end]
            .iter()
            .map(|&v| T::real(v as f64))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&t.shape), data).map_err(|e| Error::Malformed {
            path: bin_path.clone(),
            reason: e.to_string(),
        })?;
        tensors.insert(t.name.clone(), arr);
    }
    Ok((meta.config, ParameterSet { tensors }))
}
