//! Window slicing, action normalization, the two diffusion training stages
//! (base policy, then transition branch against a frozen base), and
//! checkpoint persistence.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

use crate::baselines::BcConfig;
use crate::diffusion::{make_schedule, ActionWindow, NoiseSchedule};
use crate::nets::{
    self, backward_base, backward_controlled, forward_base, forward_controlled, DenoiserConfig,
    Grads, ParamSet, Tensor, TransitionParams,
};
use crate::tasks::{Demonstration, Task};
use crate::{Error, Result};

/// Batch slice computed per worker before the ordered merge; fixed so that
/// gradient summation order never depends on thread count.
const GRAD_CHUNK: usize = 8;

/// Per-dimension affine map taking raw actions into [-1, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalizer {
    /// Fit min/max statistics over every action row of the demonstrations.
    pub fn fit(demos: &[Demonstration]) -> Result<Self> {
        if demos.is_empty() {
            return Err(Error::InvalidArgument("cannot fit normalizer on no data".into()));
        }
        let d = demos[0].action_dim;
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for demo in demos {
            for t in 0..demo.len {
                for (i, &v) in demo.action_row(t).iter().enumerate() {
                    lo[i] = lo[i].min(v);
                    hi[i] = hi[i].max(v);
                }
            }
        }
        let center: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| 0.5 * (l + h)).collect();
        let scale: Vec<f64> =
            lo.iter().zip(&hi).map(|(l, h)| (0.5 * (h - l)).max(1e-6)).collect();
        Ok(Self { center, scale })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn normalize_window(&self, w: &ActionWindow) -> ActionWindow {
        let mut out = w.clone();
        for t in 0..w.w() {
            for c in 0..w.d() {
                out.set(t, c, (w.get(t, c) - self.center[c]) / self.scale[c]);
            }
        }
        out
    }

    pub fn denormalize_window(&self, w: &ActionWindow) -> ActionWindow {
        let mut out = w.clone();
        for t in 0..w.w() {
            for c in 0..w.d() {
                out.set(t, c, w.get(t, c) * self.scale[c] + self.center[c]);
            }
        }
        out
    }

    pub fn denormalize_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(0..).map(|(&v, c)| v * self.scale[c] + self.center[c]).collect()
    }
}

/// Training pair: the window to generate plus the window generated one
/// execution horizon earlier, overlapping it by `W - h` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowPair {
    pub prior: ActionWindow,
    pub target: ActionWindow,
    /// Observation at the target window's first step.
    pub obs: Vec<f64>,
    pub task_id: usize,
}

/// Slice a demonstration into all (prior, target, obs) pairs for window
/// length `w` and execution horizon `h`. Yields `len - w - h + 1` pairs.
pub fn slice_windows(demo: &Demonstration, w: usize, h: usize) -> Result<Vec<WindowPair>> {
    if h < 1 || h > w {
        return Err(Error::InvalidArgument(format!("need 1 <= h <= w, got h={} w={}", h, w)));
    }
    if demo.len < w + h {
        return Err(Error::InvalidArgument(format!(
            "demo too short: {} steps, need at least w + h = {}",
            demo.len,
            w + h
        )));
    }
    let d = demo.action_dim;
    let grab = |start: usize| -> ActionWindow {
        ActionWindow::from_values(w, d, demo.actions[start * d..(start + w) * d].to_vec())
            .expect("demo slice is finite")
    };
    let mut out = Vec::with_capacity(demo.len - w - h + 1);
    for t in h..=demo.len - w {
        out.push(WindowPair {
            prior: grab(t - h),
            target: grab(t),
            obs: demo.obs_row(t).to_vec(),
            task_id: demo.task_id,
        });
    }
    Ok(out)
}

/// Training hyperparameters (Adam + batching + augmentation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Keep every n-th window pair (1 = all).
    pub pair_stride: usize,
    /// Probability of zeroing the observation of a training example, so the
    /// occluded-sensor regime seen at evaluation time is in-distribution.
    pub obs_dropout: f64,
    /// Ablation switch: also update the base (and conditioning) parameters
    /// during transition training instead of freezing them.
    pub unfreeze_base: bool,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            batch: 16,
            epochs: 8,
            pair_stride: 4,
            obs_dropout: 0.1,
            unfreeze_base: false,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

/// Adam state over named parameters. Call [`Adam::begin_step`] once per
/// optimizer step, then [`Adam::update`] for each (gradient, parameter) pair.
pub struct Adam {
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    t: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(hyper: &TrainHyper) -> Self {
        Self {
            lr: hyper.lr,
            b1: hyper.adam_beta1,
            b2: hyper.adam_beta2,
            eps: hyper.adam_eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, name: &str, g: &[f64], p: &mut [f64]) {
        debug_assert!(self.t >= 1, "begin_step before update");
        let bc1 = 1.0 - self.b1.powi(self.t);
        let bc2 = 1.0 - self.b2.powi(self.t);
        let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
        let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
        for i in 0..g.len() {
            m[i] = self.b1 * m[i] + (1.0 - self.b1) * g[i];
            v[i] = self.b2 * v[i] + (1.0 - self.b2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// One pre-drawn training example: all randomness is sampled sequentially
/// before any parallel work, so results do not depend on thread count.
struct Draw {
    pair_idx: usize,
    tau: usize,
    z: Vec<f64>,
    drop_obs: bool,
}

fn draw_batch(
    order: &[usize],
    start: usize,
    batch: usize,
    n_elems: usize,
    sched: &NoiseSchedule,
    hyper: &TrainHyper,
    rng: &mut ChaCha8Rng,
) -> Vec<Draw> {
    let end = (start + batch).min(order.len());
    (start..end)
        .map(|i| Draw {
            pair_idx: order[i],
            tau: rng.gen_range(1..=sched.steps()),
            z: (0..n_elems).map(|_| rng.sample(StandardNormal)).collect(),
            drop_obs: hyper.obs_dropout > 0.0 && rng.gen_bool(hyper.obs_dropout),
        })
        .collect()
}

/// Corrupt a clean channel-major window to step tau (the same algebra as
/// `diffusion::forward_diffuse`, kept in the network layout).
fn corrupt(a0: &[f64], z: &[f64], tau: usize, sched: &NoiseSchedule) -> Vec<f64> {
    let ab = sched.alpha_bar(tau);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    a0.iter().zip(z).map(|(&a, &n)| sa * a + sb * n).collect()
}

/// Normalized, channel-major view of the training pairs.
struct PreparedPairs {
    targets: Vec<Vec<f64>>,
    priors: Vec<Vec<f64>>,
    obs: Vec<Vec<f64>>,
    task_ids: Vec<usize>,
}

fn prepare_pairs(pairs: &[WindowPair], norm: &Normalizer, stride: usize) -> PreparedPairs {
    let idx: Vec<usize> = (0..pairs.len()).step_by(stride.max(1)).collect();
    PreparedPairs {
        targets: idx
            .iter()
            .map(|&i| nets::window_to_cm(&norm.normalize_window(&pairs[i].target)))
            .collect(),
        priors: idx
            .iter()
            .map(|&i| nets::window_to_cm(&norm.normalize_window(&pairs[i].prior)))
            .collect(),
        obs: idx.iter().map(|&i| pairs[i].obs.clone()).collect(),
        task_ids: idx.iter().map(|&i| pairs[i].task_id).collect(),
    }
}

/// Checkpoint kinds; the behavior-cloning baselines reuse the container.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Base,
    Transition,
    Bc,
    BcRecurrent,
}

impl std::fmt::Display for CheckpointKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CheckpointKind::Base => "base",
            CheckpointKind::Transition => "transition",
            CheckpointKind::Bc => "bc",
            CheckpointKind::BcRecurrent => "bc_recurrent",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "net", rename_all = "snake_case")]
pub enum NetConfig {
    Denoiser(DenoiserConfig),
    Bc(BcConfig),
}

impl NetConfig {
    pub fn denoiser(&self) -> Result<&DenoiserConfig> {
        match self {
            NetConfig::Denoiser(c) => Ok(c),
            NetConfig::Bc(_) => Err(Error::CheckpointFormat("expected a denoiser config".into())),
        }
    }

    pub fn bc(&self) -> Result<&BcConfig> {
        match self {
            NetConfig::Bc(c) => Ok(c),
            NetConfig::Denoiser(_) => {
                Err(Error::CheckpointFormat("expected a regression-net config".into()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CheckpointParams {
    Base(ParamSet),
    Transition(TransitionParams),
    Bc(ParamSet),
}

impl CheckpointParams {
    pub fn base(&self) -> Result<&ParamSet> {
        match self {
            CheckpointParams::Base(p) => Ok(p),
            _ => Err(Error::CheckpointFormat("checkpoint does not hold base parameters".into())),
        }
    }

    pub fn transition(&self) -> Result<&TransitionParams> {
        match self {
            CheckpointParams::Transition(p) => Ok(p),
            _ => Err(Error::CheckpointFormat(
                "checkpoint does not hold transition parameters".into(),
            )),
        }
    }

    pub fn bc(&self) -> Result<&ParamSet> {
        match self {
            CheckpointParams::Bc(p) => Ok(p),
            _ => Err(Error::CheckpointFormat(
                "checkpoint does not hold regression parameters".into(),
            )),
        }
    }
}

/// Identifies the diffusion schedule a checkpoint was trained under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleFingerprint {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleFingerprint {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

/// Versioned persisted parameter set plus everything needed to run it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub task: Task,
    pub config: NetConfig,
    pub params: CheckpointParams,
    pub normalization: Normalizer,
    pub schedule: ScheduleFingerprint,
    pub epoch: usize,
    /// For transition checkpoints: digest of the base they were trained on.
    pub base_digest: Option<String>,
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DPOLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaBlock {
    kind: CheckpointKind,
    task: Task,
    config: NetConfig,
    normalization: Normalizer,
    schedule: ScheduleFingerprint,
    epoch: usize,
    base_digest: Option<String>,
    frozen: bool,
    tensors: Vec<TensorMeta>,
}

fn named_tensors(params: &CheckpointParams) -> Vec<(String, &Tensor)> {
    match params {
        CheckpointParams::Base(ps) | CheckpointParams::Bc(ps) => {
            ps.iter().map(|(n, t)| (n.clone(), t)).collect()
        }
        CheckpointParams::Transition(tp) => {
            let mut v: Vec<(String, &Tensor)> =
                tp.replica.iter().map(|(n, t)| (format!("replica.{}", n), t)).collect();
            v.extend(tp.connectors.iter().map(|(n, t)| (n.clone(), t)));
            v.extend(tp.prior_encoder.iter().map(|(n, t)| (n.clone(), t)));
            v
        }
    }
}

fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let tensors = named_tensors(&ckpt.params);
    let frozen = match &ckpt.params {
        CheckpointParams::Base(ps) | CheckpointParams::Bc(ps) => ps.frozen,
        CheckpointParams::Transition(_) => false,
    };
    let meta = MetaBlock {
        kind: ckpt.kind,
        task: ckpt.task,
        config: ckpt.config.clone(),
        normalization: ckpt.normalization.clone(),
        schedule: ckpt.schedule.clone(),
        epoch: ckpt.epoch,
        base_digest: ckpt.base_digest.clone(),
        frozen,
        tensors: tensors
            .iter()
            .map(|(n, t)| TensorMeta { name: n.clone(), shape: t.shape.clone() })
            .collect(),
    };
    let mjson = serde_json::to_vec(&meta)?;
    let payload: usize = tensors.iter().map(|(_, t)| t.len() * 8).sum();
    let mut buf = Vec::with_capacity(8 + 4 + 8 + mjson.len() + payload + 32);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(mjson.len() as u64).to_le_bytes());
    buf.extend_from_slice(&mjson);
    for (_, t) in &tensors {
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}

/// Content digest of a checkpoint (hex sha256 of its serialized form).
pub fn checkpoint_digest(ckpt: &Checkpoint) -> Result<String> {
    let bytes = encode_checkpoint(ckpt)?;
    Ok(hex(&bytes[bytes.len() - 32..]))
}

/// Write a checkpoint; returns its content digest.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<String> {
    let bytes = encode_checkpoint(ckpt)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, &bytes)?;
    Ok(hex(&bytes[bytes.len() - 32..]))
}

/// Read and validate a checkpoint (magic, version, digest, payload size).
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingInput(format!("no checkpoint at {}", path.display())));
    }
    let bytes = std::fs::read(path)?;
    if bytes.len() < 8 + 4 + 8 + 32 {
        return Err(Error::CheckpointFormat("truncated checkpoint file".into()));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointFormat("bad magic string".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointFormat(format!(
            "version {} unsupported (expected {})",
            version, CHECKPOINT_VERSION
        )));
    }
    let (body, stored_digest) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored_digest {
        return Err(Error::CheckpointFormat("digest mismatch: file corrupted".into()));
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if 20 + mlen > body.len() {
        return Err(Error::CheckpointFormat("truncated metadata block".into()));
    }
    let meta: MetaBlock = serde_json::from_slice(&bytes[20..20 + mlen])?;
    let expected_payload: usize =
        meta.tensors.iter().map(|t| t.shape.iter().product::<usize>() * 8).sum();
    if 20 + mlen + expected_payload != body.len() {
        return Err(Error::CheckpointFormat("payload size disagrees with manifest".into()));
    }
    let mut offset = 20 + mlen;
    let mut tensors: Vec<(String, Tensor)> = Vec::with_capacity(meta.tensors.len());
    for tm in &meta.tensors {
        let n: usize = tm.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(bytes[offset..offset + 8].try_into().unwrap()));
            offset += 8;
        }
        tensors.push((tm.name.clone(), Tensor { shape: tm.shape.clone(), data }));
    }
    let params = match meta.kind {
        CheckpointKind::Base | CheckpointKind::Bc | CheckpointKind::BcRecurrent => {
            let mut ps = ParamSet::new();
            for (n, t) in tensors {
                ps.insert(&n, t);
            }
            ps.frozen = meta.frozen;
            if meta.kind == CheckpointKind::Base {
                CheckpointParams::Base(ps)
            } else {
                CheckpointParams::Bc(ps)
            }
        }
        CheckpointKind::Transition => {
            let mut replica = ParamSet::new();
            let mut connectors = ParamSet::new();
            let mut prior = ParamSet::new();
            for (n, t) in tensors {
                if let Some(rest) = n.strip_prefix("replica.") {
                    replica.insert(rest, t);
                } else if n.starts_with("conn.") {
                    connectors.insert(&n, t);
                } else {
                    prior.insert(&n, t);
                }
            }
            CheckpointParams::Transition(TransitionParams {
                replica,
                connectors,
                prior_encoder: prior,
            })
        }
    };
    Ok(Checkpoint {
        kind: meta.kind,
        task: meta.task,
        config: meta.config,
        params,
        normalization: meta.normalization,
        schedule: meta.schedule,
        epoch: meta.epoch,
        base_digest: meta.base_digest,
    })
}

/// Load a checkpoint and require a specific kind.
pub fn load_checkpoint_expect(path: &Path, kind: CheckpointKind) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.kind != kind {
        return Err(Error::CheckpointFormat(format!(
            "kind mismatch: {} holds a {} checkpoint, {} required",
            path.display(),
            ckpt.kind,
            kind
        )));
    }
    Ok(ckpt)
}

/// Result of a training stage.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// (epoch, mean loss) per epoch.
    pub loss_trace: Vec<(usize, f64)>,
    pub digest: String,
}

struct BatchResult {
    grads: Grads,
    loss_sum: f64,
}

/// Run one minibatch in fixed-size chunks in parallel, merging gradients in
/// chunk order. `run` maps one draw to (per-example grads contribution,
/// per-example loss) accumulated into the chunk buffers.
fn batch_grads<F>(draws: &[Draw], run: F) -> BatchResult
where
    F: Fn(&Draw, &mut Grads) -> f64 + Sync,
{
    let chunks: Vec<BatchResult> = draws
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut grads = Grads::new();
            let mut loss_sum = 0.0;
            for d in chunk {
                loss_sum += run(d, &mut grads);
            }
            BatchResult { grads, loss_sum }
        })
        .collect();
    let mut grads = Grads::new();
    let mut loss_sum = 0.0;
    for c in &chunks {
        grads.merge(&c.grads);
        loss_sum += c.loss_sum;
    }
    BatchResult { grads, loss_sum }
}

/// Train the base denoiser on demonstration windows: minimize the
/// mean-squared error between predicted and injected noise over random
/// (window, diffusion step) pairs. Actions are normalized to [-1, 1] with
/// statistics stored in the returned checkpoint.
pub fn train_base(
    demos: &[Demonstration],
    cfg: &DenoiserConfig,
    sched: &NoiseSchedule,
    h: usize,
    hyper: &TrainHyper,
    rng: &mut ChaCha8Rng,
) -> Result<TrainOutcome> {
    if demos.is_empty() {
        return Err(Error::InvalidArgument("no demonstrations to train on".into()));
    }
    let task = demos[0].task;
    if demos[0].action_dim != cfg.d || demos[0].obs_dim != cfg.obs_dim {
        return Err(Error::ShapeMismatch(format!(
            "demo dims ({}, {}) do not match config ({}, {})",
            demos[0].action_dim, demos[0].obs_dim, cfg.d, cfg.obs_dim
        )));
    }
    let norm = Normalizer::fit(demos)?;
    let mut pairs = Vec::new();
    for demo in demos {
        pairs.extend(slice_windows(demo, cfg.w, h)?);
    }
    let prep = prepare_pairs(&pairs, &norm, hyper.pair_stride);
    let mut params = nets::init_base(cfg, rng)?;
    let mut adam = Adam::new(hyper);
    let n_elems = cfg.d * cfg.w;
    let n = prep.targets.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut loss_trace = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        let mut start = 0;
        while start < n {
            let draws = draw_batch(&order, start, hyper.batch, n_elems, sched, hyper, rng);
            start += hyper.batch;
            let b = draws.len() as f64;
            let result = batch_grads(&draws, |d, grads| {
                let a_tau = corrupt(&prep.targets[d.pair_idx], &d.z, d.tau, sched);
                let zero_obs;
                let obs = if d.drop_obs {
                    zero_obs = vec![0.0; cfg.obs_dim];
                    &zero_obs
                } else {
                    &prep.obs[d.pair_idx]
                };
                let (out, cache) =
                    forward_base(&params, cfg, &a_tau, d.tau as f64, obs, prep.task_ids[d.pair_idx])
                        .expect("training shapes are pre-validated");
                let inv = 1.0 / n_elems as f64;
                let loss: f64 =
                    out.iter().zip(&d.z).map(|(o, z)| (o - z) * (o - z)).sum::<f64>() * inv;
                let d_out: Vec<f64> =
                    out.iter().zip(&d.z).map(|(o, z)| 2.0 * (o - z) * inv / b).collect();
                backward_base(&params, cfg, &cache, &d_out, grads);
                loss
            });
            let batch_loss = result.loss_sum / b;
            if !batch_loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss at epoch {}, batch starting at {}",
                    epoch,
                    start - hyper.batch
                )));
            }
            adam.begin_step();
            for (name, g) in result.grads.iter() {
                adam.update(name, g, &mut params.t_mut(name).data);
            }
            epoch_loss += result.loss_sum;
            seen += draws.len();
        }
        loss_trace.push((epoch, epoch_loss / seen.max(1) as f64));
    }
    let checkpoint = Checkpoint {
        kind: CheckpointKind::Base,
        task,
        config: NetConfig::Denoiser(cfg.clone()),
        params: CheckpointParams::Base(params),
        normalization: norm,
        schedule: ScheduleFingerprint {
            steps: sched.steps(),
            beta_start: sched.betas()[0],
            beta_end: *sched.betas().last().unwrap(),
        },
        epoch: hyper.epochs,
        base_digest: None,
    };
    let digest = checkpoint_digest(&checkpoint)?;
    Ok(TrainOutcome { checkpoint, loss_trace, digest })
}

/// Train the transition branch on window pairs against a frozen base.
/// Only replica, connector, and prior-encoder parameters move (unless the
/// unfreeze ablation is requested).
pub fn train_transition(
    pairs: &[WindowPair],
    base_ckpt: &Checkpoint,
    hyper: &TrainHyper,
    rng: &mut ChaCha8Rng,
) -> Result<TrainOutcome> {
    if base_ckpt.kind != CheckpointKind::Base {
        return Err(Error::CheckpointFormat(format!(
            "transition training requires a base checkpoint, got {}",
            base_ckpt.kind
        )));
    }
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no window pairs to train on".into()));
    }
    let cfg = base_ckpt.config.denoiser()?.clone();
    let sched = base_ckpt.schedule.build()?;
    let norm = base_ckpt.normalization.clone();
    let base_digest = checkpoint_digest(base_ckpt)?;
    let mut base = base_ckpt.params.base()?.clone();
    let mut trans = nets::init_transition(&mut base, &cfg, rng)?;
    let include_base = hyper.unfreeze_base;
    let prep = prepare_pairs(pairs, &norm, hyper.pair_stride);
    let mut adam = Adam::new(hyper);
    let n_elems = cfg.d * cfg.w;
    let n = prep.targets.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut loss_trace = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        let mut start = 0;
        while start < n {
            let draws = draw_batch(&order, start, hyper.batch, n_elems, &sched, hyper, rng);
            start += hyper.batch;
            let b = draws.len() as f64;
            let result = batch_grads(&draws, |d, grads| {
                let a_tau = corrupt(&prep.targets[d.pair_idx], &d.z, d.tau, &sched);
                let zero_obs;
                let obs = if d.drop_obs {
                    zero_obs = vec![0.0; cfg.obs_dim];
                    &zero_obs
                } else {
                    &prep.obs[d.pair_idx]
                };
                let (out, cache) = forward_controlled(
                    &base,
                    &trans,
                    &cfg,
                    &a_tau,
                    d.tau as f64,
                    obs,
                    prep.task_ids[d.pair_idx],
                    &prep.priors[d.pair_idx],
                )
                .expect("training shapes are pre-validated");
                let inv = 1.0 / n_elems as f64;
                let loss: f64 =
                    out.iter().zip(&d.z).map(|(o, z)| (o - z) * (o - z)).sum::<f64>() * inv;
                let d_out: Vec<f64> =
                    out.iter().zip(&d.z).map(|(o, z)| 2.0 * (o - z) * inv / b).collect();
                backward_controlled(&base, &trans, &cfg, &cache, &d_out, grads, include_base);
                loss
            });
            let batch_loss = result.loss_sum / b;
            if !batch_loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss at epoch {}, batch starting at {}",
                    epoch,
                    start - hyper.batch
                )));
            }
            adam.begin_step();
            for (name, g) in result.grads.iter() {
                if name.starts_with("replica.")
                    || name.starts_with("conn.")
                    || name.starts_with("prior.")
                {
                    adam.update(name, g, &mut trans.t_prefixed_mut(name).data);
                } else if include_base {
                    adam.update(name, g, &mut base.t_mut(name).data);
                }
            }
            epoch_loss += result.loss_sum;
            seen += draws.len();
        }
        loss_trace.push((epoch, epoch_loss / seen.max(1) as f64));
    }
    let checkpoint = Checkpoint {
        kind: CheckpointKind::Transition,
        task: base_ckpt.task,
        config: NetConfig::Denoiser(cfg),
        params: CheckpointParams::Transition(trans),
        normalization: norm,
        schedule: base_ckpt.schedule.clone(),
        epoch: hyper.epochs,
        base_digest: Some(base_digest),
    };
    let digest = checkpoint_digest(&checkpoint)?;
    Ok(TrainOutcome { checkpoint, loss_trace, digest })
}

#[cfg(test)]
mod tests;
