//! Denoiser architecture and parameter lifecycle.
//!
//! The denoiser is a 1-D temporal-convolution U-net over action windows,
//! conditioned per block by feature-wise scale-and-shift driven by a fused
//! embedding of (diffusion step, observation, task). The transition branch
//! is a trainable replica of the encoder and middle blocks, fed the previous
//! action window through a small convolutional stem, and wired back into the
//! base decoder through 1x1 connector layers initialized to exactly zero.

pub mod layers;
mod unet;

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::ActionWindow;
use crate::{Error, Result};

pub use unet::{
    backward_base, backward_controlled, forward_base, forward_controlled, BaseCache, CtrlCache,
    Grads,
};

/// Real-valued tensor with explicit shape, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Named map from layer identifier to tensor, plus a freeze flag.
/// Iteration order is the lexicographic name order (BTreeMap), which keeps
/// serialization and digests deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
    pub frozen: bool,
}

impl ParamSet {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new(), frozen: false }
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.tensors.insert(name.to_string(), t);
    }

    /// Fetch a tensor; layer names are generated, so absence is a bug.
    pub fn t(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("parameter {} missing", name))
    }

    pub fn t_mut(&mut self, name: &str) -> &mut Tensor {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("parameter {} missing", name))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Denoiser architecture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Window length (prediction horizon).
    pub w: usize,
    /// Action dimensionality.
    pub d: usize,
    pub obs_dim: usize,
    /// Width of the fused (step, observation, task) embedding.
    pub cond_dim: usize,
    /// Number of U-net resolution levels.
    pub levels: usize,
    /// Channel count per level, strictly increasing.
    pub channels: Vec<usize>,
    pub n_tasks: usize,
    /// Convolution kernel size (odd).
    pub kernel: usize,
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::InvalidArgument("config: levels must be >= 2".into()));
        }
        if self.channels.len() != self.levels {
            return Err(Error::InvalidArgument(format!(
                "config: {} channel counts for {} levels",
                self.channels.len(),
                self.levels
            )));
        }
        if !self.channels.windows(2).all(|p| p[0] < p[1]) {
            return Err(Error::InvalidArgument(
                "config: channels must be strictly increasing".into(),
            ));
        }
        let div = 1usize << (self.levels - 1);
        if self.w == 0 || self.w % div != 0 {
            return Err(Error::InvalidArgument(format!(
                "config: window {} not divisible by 2^(levels-1)={}",
                self.w, div
            )));
        }
        if self.kernel % 2 != 1 {
            return Err(Error::InvalidArgument("config: kernel must be odd".into()));
        }
        if self.cond_dim % 4 != 0 || self.cond_dim == 0 {
            return Err(Error::InvalidArgument(
                "config: cond_dim must be a positive multiple of 4".into(),
            ));
        }
        if self.d == 0 || self.obs_dim == 0 || self.n_tasks == 0 {
            return Err(Error::InvalidArgument(
                "config: d, obs_dim, n_tasks must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Temporal length at resolution level `i`.
    pub fn level_len(&self, i: usize) -> usize {
        self.w >> i
    }

    /// Sinusoidal step-encoding width (half the fused embedding).
    pub fn sin_dim(&self) -> usize {
        self.cond_dim / 2
    }

    /// Width of the learned observation part of the embedding.
    pub fn obs_part(&self) -> usize {
        self.cond_dim / 4
    }

    /// Width of the task-table part of the embedding.
    pub fn task_part(&self) -> usize {
        self.cond_dim - self.sin_dim() - self.obs_part()
    }
}

/// Dimensions of one conditioned convolution block.
#[derive(Debug, Clone)]
pub(crate) struct BlockDims {
    pub prefix: String,
    pub cin: usize,
    pub cout: usize,
    pub len: usize,
}

impl DenoiserConfig {
    pub(crate) fn enc_blocks(&self) -> Vec<BlockDims> {
        (0..self.levels)
            .map(|i| BlockDims {
                prefix: format!("enc{}", i),
                cin: if i == 0 { self.channels[0] } else { self.channels[i - 1] },
                cout: self.channels[i],
                len: self.level_len(i),
            })
            .collect()
    }

    pub(crate) fn mid_block(&self) -> BlockDims {
        let top = self.levels - 1;
        BlockDims {
            prefix: "mid".into(),
            cin: self.channels[top],
            cout: self.channels[top],
            len: self.level_len(top),
        }
    }

    pub(crate) fn dec_blocks(&self) -> Vec<BlockDims> {
        (0..self.levels)
            .map(|i| BlockDims {
                prefix: format!("dec{}", i),
                cin: 2 * self.channels[i],
                cout: self.channels[i],
                len: self.level_len(i),
            })
            .collect()
    }
}

fn block_param_shapes(cfg: &DenoiserConfig, b: &BlockDims) -> Vec<(String, Vec<usize>)> {
    let mut v = vec![
        (format!("{}.conv1.w", b.prefix), vec![b.cout, b.cin, cfg.kernel]),
        (format!("{}.conv1.b", b.prefix), vec![b.cout]),
        (format!("{}.film.w", b.prefix), vec![2 * b.cout, cfg.cond_dim]),
        (format!("{}.film.b", b.prefix), vec![2 * b.cout]),
        (format!("{}.conv2.w", b.prefix), vec![b.cout, b.cout, cfg.kernel]),
        (format!("{}.conv2.b", b.prefix), vec![b.cout]),
    ];
    if b.cin != b.cout {
        v.push((format!("{}.res.w", b.prefix), vec![b.cout, b.cin, 1]));
        v.push((format!("{}.res.b", b.prefix), vec![b.cout]));
    }
    v
}

/// Shapes of every base-policy parameter, in construction order.
pub fn base_param_shapes(cfg: &DenoiserConfig) -> Vec<(String, Vec<usize>)> {
    let mut v = vec![
        ("stem.w".to_string(), vec![cfg.channels[0], cfg.d, cfg.kernel]),
        ("stem.b".to_string(), vec![cfg.channels[0]]),
        ("cond.obs.w".to_string(), vec![cfg.obs_part(), cfg.obs_dim]),
        ("cond.obs.b".to_string(), vec![cfg.obs_part()]),
        ("cond.task".to_string(), vec![cfg.n_tasks, cfg.task_part()]),
    ];
    for b in cfg.enc_blocks() {
        v.extend(block_param_shapes(cfg, &b));
    }
    for i in 0..cfg.levels - 1 {
        v.push((format!("down{}.w", i), vec![cfg.channels[i], cfg.channels[i], cfg.kernel]));
        v.push((format!("down{}.b", i), vec![cfg.channels[i]]));
    }
    v.extend(block_param_shapes(cfg, &cfg.mid_block()));
    for b in cfg.dec_blocks() {
        v.extend(block_param_shapes(cfg, &b));
    }
    for i in 0..cfg.levels - 1 {
        v.push((format!("up{}.w", i), vec![cfg.channels[i], cfg.channels[i + 1], cfg.kernel]));
        v.push((format!("up{}.b", i), vec![cfg.channels[i]]));
    }
    v.push(("head.w".to_string(), vec![cfg.d, cfg.channels[0], 1]));
    v.push(("head.b".to_string(), vec![cfg.d]));
    v
}

/// Names of the encoder and middle-block parameters — the subset the
/// transition branch replicates.
pub fn encoder_middle_names(cfg: &DenoiserConfig) -> Vec<String> {
    base_param_shapes(cfg)
        .into_iter()
        .map(|(n, _)| n)
        .filter(|n| {
            n.starts_with("stem.")
                || n.starts_with("enc")
                || n.starts_with("down")
                || n.starts_with("mid.")
        })
        .collect()
}

fn fan_in_init(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    // Uniform(-s, s) with s = sqrt(1 / fan_in); 1-D tensors (biases) zero.
    if shape.len() == 1 {
        return Tensor::zeros(shape);
    }
    let fan_in: usize = shape[1..].iter().product();
    let s = (1.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-s..s)).collect();
    Tensor { shape: shape.to_vec(), data }
}

/// Initialize an unfrozen base-policy parameter set. Deterministic per seed:
/// tensors are drawn in construction order.
pub fn init_base(cfg: &DenoiserConfig, rng: &mut ChaCha8Rng) -> Result<ParamSet> {
    cfg.validate()?;
    let mut ps = ParamSet::new();
    for (name, shape) in base_param_shapes(cfg) {
        let t = if name == "cond.task" {
            let n: usize = shape.iter().product();
            Tensor { shape, data: (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect() }
        } else {
            fan_in_init(&shape, rng)
        };
        ps.insert(&name, t);
    }
    Ok(ps)
}

/// The transition branch: a replica of the base encoder and middle blocks,
/// zero-initialized connectors, and a small stem encoding the prior window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionParams {
    /// Copies of the base encoder/middle tensors, same layer names.
    pub replica: ParamSet,
    /// 1x1 connectors: `conn.skip{i}.{w,b}` per skip path plus `conn.mid.{w,b}`.
    pub connectors: ParamSet,
    /// Prior-window stem: `prior.conv1.{w,b}`, `prior.conv2.{w,b}`.
    pub prior_encoder: ParamSet,
}

/// Shapes of the connector tensors, in construction order.
pub fn connector_shapes(cfg: &DenoiserConfig) -> Vec<(String, Vec<usize>)> {
    let mut v = Vec::new();
    for i in 0..cfg.levels {
        let c = cfg.channels[i];
        v.push((format!("conn.skip{}.w", i), vec![c, c, 1]));
        v.push((format!("conn.skip{}.b", i), vec![c]));
    }
    let top = cfg.channels[cfg.levels - 1];
    v.push(("conn.mid.w".to_string(), vec![top, top, 1]));
    v.push(("conn.mid.b".to_string(), vec![top]));
    v
}

/// Shapes of the prior-encoder tensors, in construction order.
pub fn prior_encoder_shapes(cfg: &DenoiserConfig) -> Vec<(String, Vec<usize>)> {
    let c0 = cfg.channels[0];
    vec![
        ("prior.conv1.w".to_string(), vec![c0, cfg.d, cfg.kernel]),
        ("prior.conv1.b".to_string(), vec![c0]),
        ("prior.conv2.w".to_string(), vec![c0, c0, cfg.kernel]),
        ("prior.conv2.b".to_string(), vec![c0]),
    ]
}

/// Build the transition branch from a fully initialized base: replica
/// tensors are exact copies of the encoder/middle tensors, every connector
/// is exactly zero, and the base is frozen.
pub fn init_transition(
    base: &mut ParamSet,
    cfg: &DenoiserConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TransitionParams> {
    cfg.validate()?;
    let mut replica = ParamSet::new();
    for name in encoder_middle_names(cfg) {
        if !base.contains(&name) {
            return Err(Error::InvalidArgument(format!(
                "base parameter set lacks {} — config mismatch",
                name
            )));
        }
        replica.insert(&name, base.t(&name).clone());
    }
    let mut connectors = ParamSet::new();
    for (name, shape) in connector_shapes(cfg) {
        connectors.insert(&name, Tensor::zeros(&shape));
    }
    let mut prior_encoder = ParamSet::new();
    for (name, shape) in prior_encoder_shapes(cfg) {
        prior_encoder.insert(&name, fan_in_init(&shape, rng));
    }
    base.frozen = true;
    Ok(TransitionParams { replica, connectors, prior_encoder })
}

impl TransitionParams {
    pub fn param_count(&self) -> usize {
        self.replica.param_count()
            + self.connectors.param_count()
            + self.prior_encoder.param_count()
    }

    pub fn max_abs_connector(&self) -> f64 {
        self.connectors
            .iter()
            .flat_map(|(_, t)| t.data.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Look up a tensor by its prefixed name (`replica.`, `conn.`, `prior.`).
    pub fn t_prefixed(&self, name: &str) -> &Tensor {
        if let Some(rest) = name.strip_prefix("replica.") {
            self.replica.t(rest)
        } else if name.starts_with("conn.") {
            self.connectors.t(name)
        } else {
            self.prior_encoder.t(name)
        }
    }

    pub fn t_prefixed_mut(&mut self, name: &str) -> &mut Tensor {
        if let Some(rest) = name.strip_prefix("replica.") {
            self.replica.t_mut(rest)
        } else if name.starts_with("conn.") {
            self.connectors.t_mut(name)
        } else {
            self.prior_encoder.t_mut(name)
        }
    }

    /// All trainable names with prefixes, in deterministic order.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut v: Vec<String> =
            self.replica.names().map(|n| format!("replica.{}", n)).collect();
        v.extend(self.connectors.names().cloned());
        v.extend(self.prior_encoder.names().cloned());
        v
    }
}

/// Fused conditioning embedding: sinusoidal encoding of the diffusion step,
/// a learned linear map of the observation, and a learned task-table row,
/// concatenated to `cond_dim`.
pub fn embed_condition(
    params: &ParamSet,
    cfg: &DenoiserConfig,
    tau: f64,
    obs: &[f64],
    task_id: usize,
) -> Result<Vec<f64>> {
    if obs.len() != cfg.obs_dim {
        return Err(Error::ShapeMismatch(format!(
            "observation has {} entries, config expects {}",
            obs.len(),
            cfg.obs_dim
        )));
    }
    if task_id >= cfg.n_tasks {
        return Err(Error::InvalidArgument(format!(
            "unknown task id {} (table has {})",
            task_id, cfg.n_tasks
        )));
    }
    let mut e = Vec::with_capacity(cfg.cond_dim);
    e.extend(sinusoid(tau, cfg.sin_dim()));
    let ow = params.t("cond.obs.w");
    let ob = params.t("cond.obs.b");
    e.extend(layers::linear_forward(obs, &ow.data, &ob.data, cfg.obs_part(), cfg.obs_dim));
    let table = params.t("cond.task");
    let tp = cfg.task_part();
    e.extend_from_slice(&table.data[task_id * tp..(task_id + 1) * tp]);
    Ok(e)
}

/// Interleaved sin/cos position encoding; position 0 gives (0, 1, 0, 1, ...).
pub fn sinusoid(pos: f64, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    let half = dim / 2;
    for i in 0..half {
        let freq = (10_000f64).powf(-(2.0 * i as f64) / dim as f64);
        out.push((pos * freq).sin());
        out.push((pos * freq).cos());
    }
    out
}

/// Base noise prediction for one window. Validates shapes and returns the
/// W x D prediction.
pub fn denoise_base(
    params: &ParamSet,
    cfg: &DenoiserConfig,
    a_tau: &ActionWindow,
    tau: usize,
    obs: &[f64],
    task_id: usize,
) -> Result<ActionWindow> {
    check_window(cfg, a_tau, "input window")?;
    let x = window_to_cm(a_tau);
    let (out, _) = forward_base(params, cfg, &x, tau as f64, obs, task_id)?;
    cm_to_window(cfg, &out)
}

/// Noise prediction with the transition branch: the base forward pass plus
/// the replica encoder fed `prior`, injected additively through the
/// connectors into the base skip and middle paths.
#[allow(clippy::too_many_arguments)]
pub fn denoise_controlled(
    base: &ParamSet,
    trans: &TransitionParams,
    cfg: &DenoiserConfig,
    a_tau: &ActionWindow,
    tau: usize,
    obs: &[f64],
    task_id: usize,
    prior: &ActionWindow,
) -> Result<ActionWindow> {
    check_window(cfg, a_tau, "input window")?;
    check_window(cfg, prior, "prior window")?;
    let x = window_to_cm(a_tau);
    let p = window_to_cm(prior);
    let (out, _) = forward_controlled(base, trans, cfg, &x, tau as f64, obs, task_id, &p)?;
    cm_to_window(cfg, &out)
}

pub(crate) fn check_window(cfg: &DenoiserConfig, w: &ActionWindow, what: &str) -> Result<()> {
    if w.w() != cfg.w || w.d() != cfg.d {
        return Err(Error::ShapeMismatch(format!(
            "{} is {}x{}, config expects {}x{}",
            what,
            w.w(),
            w.d(),
            cfg.w,
            cfg.d
        )));
    }
    Ok(())
}

/// W x D row-major window -> channel-major D x W map.
pub(crate) fn window_to_cm(win: &ActionWindow) -> Vec<f64> {
    let (w, d) = (win.w(), win.d());
    let mut out = vec![0.0; w * d];
    for t in 0..w {
        for c in 0..d {
            out[c * w + t] = win.get(t, c);
        }
    }
    out
}

pub(crate) fn cm_to_window(cfg: &DenoiserConfig, x: &[f64]) -> Result<ActionWindow> {
    let (w, d) = (cfg.w, cfg.d);
    let mut out = ActionWindow::zeros(w, d);
    for t in 0..w {
        for c in 0..d {
            out.set(t, c, x[c * w + t]);
        }
    }
    if !out.is_finite() {
        return Err(Error::Divergence("denoiser produced non-finite output".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
