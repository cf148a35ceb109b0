//! Behavior-cloning baselines: a stateless MLP regressor from observation to
//! action window, and a recurrent (GRU) variant that consumes the
//! observation sequence at replan cadence and carries hidden state across
//! replans.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::ActionWindow;
use crate::nets::layers::{linear_backward, linear_forward, sigmoid, silu_backward, silu_forward};
use crate::nets::{layers::add_into, Grads, ParamSet, Tensor};
use crate::tasks::{Demonstration, Task};
use crate::training::{
    checkpoint_digest, slice_windows, Adam, Checkpoint, CheckpointKind, CheckpointParams,
    NetConfig, Normalizer, ScheduleFingerprint, TrainHyper, TrainOutcome,
};
use crate::{Error, Result};

/// Regression-network description shared by both variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcConfig {
    pub w: usize,
    pub d: usize,
    pub obs_dim: usize,
    pub n_tasks: usize,
    /// Width of the perceptron layers (stateless variant).
    pub hidden: usize,
    /// Hidden-state width of the recurrent variant.
    pub rnn_width: usize,
    pub recurrent: bool,
}

impl BcConfig {
    pub fn input_dim(&self) -> usize {
        self.obs_dim + self.n_tasks
    }

    pub fn output_dim(&self) -> usize {
        self.w * self.d
    }

    fn validate(&self) -> Result<()> {
        if self.w == 0 || self.d == 0 || self.obs_dim == 0 || self.n_tasks == 0 {
            return Err(Error::InvalidArgument("bc config: zero dimension".into()));
        }
        if self.hidden == 0 || self.rnn_width == 0 {
            return Err(Error::InvalidArgument("bc config: zero width".into()));
        }
        Ok(())
    }
}

fn uniform_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    if shape.len() == 1 {
        return Tensor::zeros(shape);
    }
    let fan_in: usize = shape[1..].iter().product();
    let s = (1.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor { shape: shape.to_vec(), data: (0..n).map(|_| rng.gen_range(-s..s)).collect() }
}

/// Parameter shapes of the stateless regressor, in construction order.
fn mlp_shapes(cfg: &BcConfig) -> Vec<(String, Vec<usize>)> {
    vec![
        ("l1.w".into(), vec![cfg.hidden, cfg.input_dim()]),
        ("l1.b".into(), vec![cfg.hidden]),
        ("l2.w".into(), vec![cfg.hidden, cfg.hidden]),
        ("l2.b".into(), vec![cfg.hidden]),
        ("l3.w".into(), vec![cfg.output_dim(), cfg.hidden]),
        ("l3.b".into(), vec![cfg.output_dim()]),
    ]
}

/// Parameter shapes of the recurrent variant.
fn gru_shapes(cfg: &BcConfig) -> Vec<(String, Vec<usize>)> {
    let r = cfg.rnn_width;
    let i = cfg.input_dim();
    let mut v = Vec::new();
    for gate in ["z", "r", "n"] {
        v.push((format!("gru.w{}", gate), vec![r, i]));
        v.push((format!("gru.u{}", gate), vec![r, r]));
        v.push((format!("gru.b{}", gate), vec![r]));
    }
    v.push(("out.w".into(), vec![cfg.output_dim(), r]));
    v.push(("out.b".into(), vec![cfg.output_dim()]));
    v
}

pub fn init_bc(cfg: &BcConfig, rng: &mut ChaCha8Rng) -> Result<ParamSet> {
    cfg.validate()?;
    let shapes = if cfg.recurrent { gru_shapes(cfg) } else { mlp_shapes(cfg) };
    let mut ps = ParamSet::new();
    for (name, shape) in shapes {
        ps.insert(&name, uniform_tensor(&shape, rng));
    }
    Ok(ps)
}

fn one_hot_input(cfg: &BcConfig, obs: &[f64], task_id: usize) -> Vec<f64> {
    let mut x = Vec::with_capacity(cfg.input_dim());
    x.extend_from_slice(obs);
    for i in 0..cfg.n_tasks {
        x.push(if i == task_id { 1.0 } else { 0.0 });
    }
    x
}

struct MlpCache {
    x: Vec<f64>,
    a1: Vec<f64>,
    h1: Vec<f64>,
    a2: Vec<f64>,
    h2: Vec<f64>,
}

fn mlp_forward(ps: &ParamSet, cfg: &BcConfig, x: &[f64]) -> (Vec<f64>, MlpCache) {
    let a1 = linear_forward(x, &ps.t("l1.w").data, &ps.t("l1.b").data, cfg.hidden, cfg.input_dim());
    let h1 = silu_forward(&a1);
    let a2 = linear_forward(&h1, &ps.t("l2.w").data, &ps.t("l2.b").data, cfg.hidden, cfg.hidden);
    let h2 = silu_forward(&a2);
    let y = linear_forward(&h2, &ps.t("l3.w").data, &ps.t("l3.b").data, cfg.output_dim(), cfg.hidden);
    (y, MlpCache { x: x.to_vec(), a1, h1, a2, h2 })
}

fn mlp_backward(ps: &ParamSet, cfg: &BcConfig, cache: &MlpCache, d_y: &[f64], grads: &mut Grads) {
    let mut dw3 = vec![0.0; ps.t("l3.w").len()];
    let mut db3 = vec![0.0; cfg.output_dim()];
    let dh2 = linear_backward(d_y, &cache.h2, &ps.t("l3.w").data, cfg.output_dim(), cfg.hidden, &mut dw3, &mut db3);
    add_into(grads.acc("l3.w", dw3.len()), &dw3);
    add_into(grads.acc("l3.b", db3.len()), &db3);
    let da2 = silu_backward(&dh2, &cache.a2);
    let mut dw2 = vec![0.0; ps.t("l2.w").len()];
    let mut db2 = vec![0.0; cfg.hidden];
    let dh1 = linear_backward(&da2, &cache.h1, &ps.t("l2.w").data, cfg.hidden, cfg.hidden, &mut dw2, &mut db2);
    add_into(grads.acc("l2.w", dw2.len()), &dw2);
    add_into(grads.acc("l2.b", db2.len()), &db2);
    let da1 = silu_backward(&dh1, &cache.a1);
    let mut dw1 = vec![0.0; ps.t("l1.w").len()];
    let mut db1 = vec![0.0; cfg.hidden];
    let _ = linear_backward(&da1, &cache.x, &ps.t("l1.w").data, cfg.hidden, cfg.input_dim(), &mut dw1, &mut db1);
    add_into(grads.acc("l1.w", dw1.len()), &dw1);
    add_into(grads.acc("l1.b", db1.len()), &db1);
}

struct GruCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    un_h: Vec<f64>,
    n: Vec<f64>,
    h_new: Vec<f64>,
}

fn gru_step(ps: &ParamSet, cfg: &BcConfig, x: &[f64], h: &[f64]) -> GruCache {
    let (rw, i) = (cfg.rnn_width, cfg.input_dim());
    let lin = |w: &str, u: &str, b: &str, gate_in: &[f64]| -> Vec<f64> {
        let mut a = linear_forward(x, &ps.t(w).data, &ps.t(b).data, rw, i);
        let hu = linear_forward(gate_in, &ps.t(u).data, &vec![0.0; rw], rw, rw);
        add_into(&mut a, &hu);
        a
    };
    let z: Vec<f64> = lin("gru.wz", "gru.uz", "gru.bz", h).iter().map(|&v| sigmoid(v)).collect();
    let r: Vec<f64> = lin("gru.wr", "gru.ur", "gru.br", h).iter().map(|&v| sigmoid(v)).collect();
    let un_h = linear_forward(h, &ps.t("gru.un").data, &vec![0.0; rw], rw, rw);
    let mut n_pre = linear_forward(x, &ps.t("gru.wn").data, &ps.t("gru.bn").data, rw, i);
    for j in 0..rw {
        n_pre[j] += r[j] * un_h[j];
    }
    let n: Vec<f64> = n_pre.iter().map(|&v| v.tanh()).collect();
    let h_new: Vec<f64> = (0..rw).map(|j| (1.0 - z[j]) * n[j] + z[j] * h[j]).collect();
    GruCache { x: x.to_vec(), h_prev: h.to_vec(), z, r, un_h, n, h_new }
}

/// Backward through one GRU step. Returns the gradient w.r.t. the previous
/// hidden state.
fn gru_step_backward(
    ps: &ParamSet,
    cfg: &BcConfig,
    cache: &GruCache,
    d_h_new: &[f64],
    grads: &mut Grads,
) -> Vec<f64> {
    let (rw, i) = (cfg.rnn_width, cfg.input_dim());
    let mut d_h_prev = vec![0.0; rw];
    let mut d_z = vec![0.0; rw];
    let mut d_n = vec![0.0; rw];
    for j in 0..rw {
        d_z[j] = d_h_new[j] * (cache.h_prev[j] - cache.n[j]);
        d_n[j] = d_h_new[j] * (1.0 - cache.z[j]);
        d_h_prev[j] += d_h_new[j] * cache.z[j];
    }
    // Candidate gate: n = tanh(Wn x + r * (Un h) + bn).
    let d_n_pre: Vec<f64> = (0..rw).map(|j| d_n[j] * (1.0 - cache.n[j] * cache.n[j])).collect();
    let d_r: Vec<f64> = (0..rw).map(|j| d_n_pre[j] * cache.un_h[j]).collect();
    let d_un_h: Vec<f64> = (0..rw).map(|j| d_n_pre[j] * cache.r[j]).collect();
    {
        let mut dw = vec![0.0; rw * i];
        let mut db = vec![0.0; rw];
        let _ = linear_backward(&d_n_pre, &cache.x, &ps.t("gru.wn").data, rw, i, &mut dw, &mut db);
        add_into(grads.acc("gru.wn", dw.len()), &dw);
        add_into(grads.acc("gru.bn", db.len()), &db);
        let mut du = vec![0.0; rw * rw];
        let mut dbu = vec![0.0; rw];
        let dh = linear_backward(&d_un_h, &cache.h_prev, &ps.t("gru.un").data, rw, rw, &mut du, &mut dbu);
        add_into(grads.acc("gru.un", du.len()), &du);
        add_into(&mut d_h_prev, &dh);
    }
    // Update and reset gates (sigmoid).
    for (gate, d_gate, act) in [("z", &d_z, &cache.z), ("r", &d_r, &cache.r)] {
        let d_pre: Vec<f64> = (0..rw).map(|j| d_gate[j] * act[j] * (1.0 - act[j])).collect();
        let wname = format!("gru.w{}", gate);
        let uname = format!("gru.u{}", gate);
        let bname = format!("gru.b{}", gate);
        let mut dw = vec![0.0; rw * i];
        let mut db = vec![0.0; rw];
        let _ = linear_backward(&d_pre, &cache.x, &ps.t(&wname).data, rw, i, &mut dw, &mut db);
        add_into(grads.acc(&wname, dw.len()), &dw);
        add_into(grads.acc(&bname, db.len()), &db);
        let mut du = vec![0.0; rw * rw];
        let mut dbu = vec![0.0; rw];
        let dh = linear_backward(&d_pre, &cache.h_prev, &ps.t(&uname).data, rw, rw, &mut du, &mut dbu);
        add_into(grads.acc(&uname, du.len()), &du);
        add_into(&mut d_h_prev, &dh);
    }
    d_h_prev
}

/// Single deterministic forward pass. For the recurrent variant, pass the
/// carried hidden state (or `None` at episode start) and keep the returned
/// one. The stateless variant ignores and returns no hidden state.
pub fn plan_bc(
    ps: &ParamSet,
    cfg: &BcConfig,
    obs: &[f64],
    task_id: usize,
    hidden: Option<&[f64]>,
) -> Result<(ActionWindow, Option<Vec<f64>>)> {
    if obs.len() != cfg.obs_dim {
        return Err(Error::ShapeMismatch(format!(
            "observation has {} entries, config expects {}",
            obs.len(),
            cfg.obs_dim
        )));
    }
    if task_id >= cfg.n_tasks {
        return Err(Error::InvalidArgument(format!("unknown task id {}", task_id)));
    }
    let x = one_hot_input(cfg, obs, task_id);
    if cfg.recurrent {
        let zero;
        let h = match hidden {
            Some(h) => h,
            None => {
                zero = vec![0.0; cfg.rnn_width];
                &zero
            }
        };
        if h.len() != cfg.rnn_width {
            return Err(Error::ShapeMismatch("hidden state width mismatch".into()));
        }
        let cache = gru_step(ps, cfg, &x, h);
        let y = linear_forward(
            &cache.h_new,
            &ps.t("out.w").data,
            &ps.t("out.b").data,
            cfg.output_dim(),
            cfg.rnn_width,
        );
        let win = ActionWindow::from_values(cfg.w, cfg.d, y)?;
        Ok((win, Some(cache.h_new)))
    } else {
        let (y, _) = mlp_forward(ps, cfg, &x);
        let win = ActionWindow::from_values(cfg.w, cfg.d, y)?;
        Ok((win, None))
    }
}

/// Train a behavior-cloning baseline. The stateless variant regresses
/// (observation, task) onto the normalized target window over all window
/// pairs; the recurrent variant unrolls over each demonstration's
/// replan-cadence observation sequence and backpropagates through time.
pub fn train_bc(
    demos: &[Demonstration],
    cfg: &BcConfig,
    h: usize,
    hyper: &TrainHyper,
    rng: &mut ChaCha8Rng,
) -> Result<TrainOutcome> {
    if demos.is_empty() {
        return Err(Error::InvalidArgument("no demonstrations to train on".into()));
    }
    let task = demos[0].task;
    if demos[0].action_dim != cfg.d || demos[0].obs_dim != cfg.obs_dim {
        return Err(Error::ShapeMismatch("demo dims do not match bc config".into()));
    }
    let norm = Normalizer::fit(demos)?;
    let mut ps = init_bc(cfg, rng)?;
    let mut adam = Adam::new(hyper);
    let mut loss_trace = Vec::with_capacity(hyper.epochs);
    if cfg.recurrent {
        // Sequences of (input, flattened target window) at replan cadence.
        let mut seqs: Vec<Vec<(Vec<f64>, Vec<f64>)>> = Vec::new();
        for demo in demos {
            let mut seq = Vec::new();
            let mut t = 0;
            while t + cfg.w <= demo.len {
                let win = ActionWindow::from_values(
                    cfg.w,
                    cfg.d,
                    demo.actions[t * cfg.d..(t + cfg.w) * cfg.d].to_vec(),
                )?;
                let target = norm.normalize_window(&win);
                seq.push((
                    one_hot_input(cfg, demo.obs_row(t), demo.task_id),
                    target.as_slice().to_vec(),
                ));
                t += h;
            }
            if !seq.is_empty() {
                seqs.push(seq);
            }
        }
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        for epoch in 0..hyper.epochs {
            order.shuffle(rng);
            let mut epoch_loss = 0.0;
            let mut seen = 0usize;
            for chunk in order.chunks(hyper.batch.max(1)) {
                let mut grads = Grads::new();
                let mut batch_loss = 0.0;
                for &si in chunk {
                    let seq = &seqs[si];
                    // Forward, hidden state reset at the sequence start.
                    let mut hcur = vec![0.0; cfg.rnn_width];
                    let mut caches = Vec::with_capacity(seq.len());
                    let mut d_hs: Vec<Vec<f64>> = Vec::with_capacity(seq.len());
                    let scale = 1.0 / (seq.len() * cfg.output_dim()) as f64;
                    for (x, target) in seq {
                        let cache = gru_step(&ps, cfg, x, &hcur);
                        hcur = cache.h_new.clone();
                        let y = linear_forward(
                            &cache.h_new,
                            &ps.t("out.w").data,
                            &ps.t("out.b").data,
                            cfg.output_dim(),
                            cfg.rnn_width,
                        );
                        let d_y: Vec<f64> = y
                            .iter()
                            .zip(target)
                            .map(|(a, b)| 2.0 * (a - b) * scale)
                            .collect();
                        batch_loss += y
                            .iter()
                            .zip(target)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            * scale;
                        let mut dw = vec![0.0; ps.t("out.w").len()];
                        let mut db = vec![0.0; cfg.output_dim()];
                        let d_h = linear_backward(
                            &d_y,
                            &cache.h_new,
                            &ps.t("out.w").data,
                            cfg.output_dim(),
                            cfg.rnn_width,
                            &mut dw,
                            &mut db,
                        );
                        add_into(grads.acc("out.w", dw.len()), &dw);
                        add_into(grads.acc("out.b", db.len()), &db);
                        caches.push(cache);
                        d_hs.push(d_h);
                    }
                    // Backward through time.
                    let mut d_carry = vec![0.0; cfg.rnn_width];
                    for s in (0..caches.len()).rev() {
                        let mut d_h = d_hs[s].clone();
                        add_into(&mut d_h, &d_carry);
                        d_carry = gru_step_backward(&ps, cfg, &caches[s], &d_h, &mut grads);
                    }
                }
                grads.scale(1.0 / chunk.len() as f64);
                adam.begin_step();
                for (name, g) in grads.iter() {
                    adam.update(name, g, &mut ps.t_mut(name).data);
                }
                epoch_loss += batch_loss;
                seen += chunk.len();
            }
            let mean = epoch_loss / seen.max(1) as f64;
            if !mean.is_finite() {
                return Err(Error::Divergence(format!("non-finite loss at epoch {}", epoch)));
            }
            loss_trace.push((epoch, mean));
        }
    } else {
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for demo in demos {
            for pair in slice_windows(demo, cfg.w, h)? {
                inputs.push(one_hot_input(cfg, &pair.obs, pair.task_id));
                targets.push(norm.normalize_window(&pair.target).as_slice().to_vec());
            }
        }
        let idx: Vec<usize> = (0..inputs.len()).step_by(hyper.pair_stride.max(1)).collect();
        let mut order = idx;
        for epoch in 0..hyper.epochs {
            order.shuffle(rng);
            let mut epoch_loss = 0.0;
            let mut seen = 0usize;
            for chunk in order.chunks(hyper.batch.max(1)) {
                let mut grads = Grads::new();
                let mut batch_loss = 0.0;
                let scale = 1.0 / cfg.output_dim() as f64;
                for &i in chunk {
                    let (y, cache) = mlp_forward(&ps, cfg, &inputs[i]);
                    let d_y: Vec<f64> = y
                        .iter()
                        .zip(&targets[i])
                        .map(|(a, b)| 2.0 * (a - b) * scale / chunk.len() as f64)
                        .collect();
                    batch_loss +=
                        y.iter().zip(&targets[i]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                            * scale;
                    mlp_backward(&ps, cfg, &cache, &d_y, &mut grads);
                }
                adam.begin_step();
                for (name, g) in grads.iter() {
                    adam.update(name, g, &mut ps.t_mut(name).data);
                }
                epoch_loss += batch_loss;
                seen += chunk.len();
            }
            let mean = epoch_loss / seen.max(1) as f64;
            if !mean.is_finite() {
                return Err(Error::Divergence(format!("non-finite loss at epoch {}", epoch)));
            }
            loss_trace.push((epoch, mean));
        }
    }
    let checkpoint = Checkpoint {
        kind: if cfg.recurrent { CheckpointKind::BcRecurrent } else { CheckpointKind::Bc },
        task,
        config: NetConfig::Bc(cfg.clone()),
        params: CheckpointParams::Bc(ps),
        normalization: norm,
        schedule: ScheduleFingerprint { steps: 1, beta_start: 0.5, beta_end: 0.5 },
        epoch: hyper.epochs,
        base_digest: None,
    };
    let digest = checkpoint_digest(&checkpoint)?;
    Ok(TrainOutcome { checkpoint, loss_trace, digest })
}

/// Default baseline configuration for a task.
pub fn bc_config_for(task: Task, w: usize, recurrent: bool) -> BcConfig {
    BcConfig {
        w,
        d: task.action_dim(),
        obs_dim: task.obs_dim(),
        n_tasks: 3,
        hidden: 256,
        rnn_width: 128,
        recurrent,
    }
}

#[cfg(test)]
mod tests;
