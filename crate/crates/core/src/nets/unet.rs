//! U-net composition: forward passes with caches, and the mirrored backward
//! passes producing named parameter gradients.
//!
//! Activations are channel-major (`[channels][len]` flattened), produced and
//! consumed by the primitives in [`super::layers`]. Parameter gradients are
//! keyed by layer name; transition-branch gradients carry the `replica.` /
//! `conn.` / `prior.` prefixes used by [`TransitionParams`].

use std::collections::BTreeMap;

use super::layers::{
    add_into, concat_channels, conv1d_backward, conv1d_forward, film_backward, film_forward,
    linear_backward, linear_forward, silu_backward, silu_forward, upsample2_backward,
    upsample2_forward,
};
use super::{embed_condition, BlockDims, DenoiserConfig, ParamSet, TransitionParams};
use crate::Result;

/// Named gradient accumulator.
#[derive(Debug, Clone, Default)]
pub struct Grads(BTreeMap<String, Vec<f64>>);

impl Grads {
    pub fn new() -> Self {
        Self(BTreeMap::new())
    }

    /// Gradient buffer for `name`, created zeroed on first touch.
    pub fn acc(&mut self, name: &str, size: usize) -> &mut [f64] {
        self.0.entry(name.to_string()).or_insert_with(|| vec![0.0; size])
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.0.get(name).map(|v| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.0.iter()
    }

    /// Elementwise add another accumulator (merges batch chunks in a fixed
    /// order).
    pub fn merge(&mut self, other: &Grads) {
        for (name, g) in &other.0 {
            add_into(self.acc(name, g.len()), g);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.0.values_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Cached intermediates of one conditioned convolution block.
#[derive(Debug, Clone)]
struct BlockCache {
    x: Vec<f64>,
    h1: Vec<f64>,    // conv1 out, film input
    h2: Vec<f64>,    // film out, first silu input
    h3: Vec<f64>,    // first silu out, conv2 input
    h4: Vec<f64>,    // conv2 out, second silu input
    scale: Vec<f64>, // film scale, needed for dx
}

fn block_forward(
    ps: &ParamSet,
    cfg: &DenoiserConfig,
    b: &BlockDims,
    x: &[f64],
    e: &[f64],
) -> (Vec<f64>, BlockCache) {
    let k = cfg.kernel;
    let w1 = ps.t(&format!("{}.conv1.w", b.prefix));
    let b1 = ps.t(&format!("{}.conv1.b", b.prefix));
    let h1 = conv1d_forward(x, b.cin, b.len, &w1.data, &b1.data, b.cout, k, 1);
    let fw = ps.t(&format!("{}.film.w", b.prefix));
    let fb = ps.t(&format!("{}.film.b", b.prefix));
    let sb = linear_forward(e, &fw.data, &fb.data, 2 * b.cout, cfg.cond_dim);
    let (scale, shift) = sb.split_at(b.cout);
    let h2 = film_forward(&h1, scale, shift, b.cout, b.len);
    let h3 = silu_forward(&h2);
    let w2 = ps.t(&format!("{}.conv2.w", b.prefix));
    let b2 = ps.t(&format!("{}.conv2.b", b.prefix));
    let h4 = conv1d_forward(&h3, b.cout, b.len, &w2.data, &b2.data, b.cout, k, 1);
    let mut out = silu_forward(&h4);
    if b.cin == b.cout {
        add_into(&mut out, x);
    } else {
        let rw = ps.t(&format!("{}.res.w", b.prefix));
        let rb = ps.t(&format!("{}.res.b", b.prefix));
        let r = conv1d_forward(x, b.cin, b.len, &rw.data, &rb.data, b.cout, 1, 1);
        add_into(&mut out, &r);
    }
    let cache =
        BlockCache { x: x.to_vec(), h1, h2, h3, h4, scale: scale.to_vec() };
    (out, cache)
}

/// Convolution backward that skips weight gradients (frozen layers).
fn conv1d_backward_input_only(
    d_out: &[f64],
    cin: usize,
    len: usize,
    w: &[f64],
    cout: usize,
    k: usize,
    stride: usize,
) -> Vec<f64> {
    let pad = (k - 1) / 2;
    let plen = len + 2 * pad;
    let out_len = len / stride;
    let mut dxp = vec![0.0; cin * plen];
    for co in 0..cout {
        let dyrow = &d_out[co * out_len..(co + 1) * out_len];
        for ci in 0..cin {
            let dxrow = &mut dxp[ci * plen..(ci + 1) * plen];
            for kk in 0..k {
                let wv = w[co * cin * k + ci * k + kk];
                if stride == 1 {
                    let dst = &mut dxrow[kk..kk + out_len];
                    for t in 0..out_len {
                        dst[t] += wv * dyrow[t];
                    }
                } else {
                    for t in 0..out_len {
                        dxrow[t * stride + kk] += wv * dyrow[t];
                    }
                }
            }
        }
    }
    let mut dx = vec![0.0; cin * len];
    for ci in 0..cin {
        dx[ci * len..(ci + 1) * len]
            .copy_from_slice(&dxp[ci * plen + pad..ci * plen + pad + len]);
    }
    dx
}

/// Backward through a named convolution. With `want_params`, weight/bias
/// gradients are accumulated under `grad_prefix + name + {.w,.b}`.
#[allow(clippy::too_many_arguments)]
fn conv_bwd_named(
    ps: &ParamSet,
    name: &str,
    grad_prefix: &str,
    d_out: &[f64],
    x: &[f64],
    cin: usize,
    len: usize,
    cout: usize,
    k: usize,
    stride: usize,
    grads: &mut Grads,
    want_params: bool,
) -> Vec<f64> {
    let w = ps.t(&format!("{}.w", name));
    if want_params {
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; cout];
        let dx = conv1d_backward(d_out, x, cin, len, &w.data, cout, k, stride, &mut dw, &mut db);
        add_into(grads.acc(&format!("{}{}.w", grad_prefix, name), dw.len()), &dw);
        add_into(grads.acc(&format!("{}{}.b", grad_prefix, name), db.len()), &db);
        dx
    } else {
        conv1d_backward_input_only(d_out, cin, len, &w.data, cout, k, stride)
    }
}

/// Backward through one block. Returns the input gradient. With
/// `want_params`, parameter gradients land in `grads` and the shared
/// embedding gradient accumulates into `d_e`.
#[allow(clippy::too_many_arguments)]
fn block_backward(
    ps: &ParamSet,
    cfg: &DenoiserConfig,
    b: &BlockDims,
    cache: &BlockCache,
    e: &[f64],
    d_out: &[f64],
    grads: &mut Grads,
    grad_prefix: &str,
    want_params: bool,
    d_e: &mut [f64],
) -> Vec<f64> {
    let k = cfg.kernel;
    // Residual branch.
    let mut dx = if b.cin == b.cout {
        d_out.to_vec()
    } else {
        conv_bwd_named(
            ps,
            &format!("{}.res", b.prefix),
            grad_prefix,
            d_out,
            &cache.x,
            b.cin,
            b.len,
            b.cout,
            1,
            1,
            grads,
            want_params,
        )
    };
    // Main branch: silu2 <- conv2 <- silu1 <- film <- conv1.
    let dh4 = silu_backward(d_out, &cache.h4);
    let dh3 = conv_bwd_named(
        ps,
        &format!("{}.conv2", b.prefix),
        grad_prefix,
        &dh4,
        &cache.h3,
        b.cout,
        b.len,
        b.cout,
        k,
        1,
        grads,
        want_params,
    );
    let dh2 = silu_backward(&dh3, &cache.h2);
    let mut d_scale = vec![0.0; b.cout];
    let mut d_shift = vec![0.0; b.cout];
    let dh1 =
        film_backward(&dh2, &cache.h1, &cache.scale, b.cout, b.len, &mut d_scale, &mut d_shift);
    if want_params {
        // The film (scale ++ shift) vector is a linear map of the embedding.
        let d_sb = [d_scale, d_shift].concat();
        let fw = ps.t(&format!("{}.film.w", b.prefix));
        let mut dw = vec![0.0; fw.len()];
        let mut db = vec![0.0; 2 * b.cout];
        let de = linear_backward(&d_sb, e, &fw.data, 2 * b.cout, cfg.cond_dim, &mut dw, &mut db);
        add_into(grads.acc(&format!("{}{}.film.w", grad_prefix, b.prefix), dw.len()), &dw);
        add_into(grads.acc(&format!("{}{}.film.b", grad_prefix, b.prefix), db.len()), &db);
        add_into(d_e, &de);
    }
    let d_conv1_in = conv_bwd_named(
        ps,
        &format!("{}.conv1", b.prefix),
        grad_prefix,
        &dh1,
        &cache.x,
        b.cin,
        b.len,
        b.cout,
        k,
        1,
        grads,
        want_params,
    );
    add_into(&mut dx, &d_conv1_in);
    dx
}

/// Activations of one encoder stack (stem through middle block).
#[derive(Debug, Clone)]
struct EncoderAct {
    enc: Vec<BlockCache>,
    /// Outputs of the encoder blocks (skip sources; also down-conv inputs).
    skips: Vec<Vec<f64>>,
    mid: BlockCache,
    mid_out: Vec<f64>,
}

/// Stem conv, encoder blocks with downsampling, middle block.
/// `stem_add` is added to the stem output before the first block (the
/// transition branch injects the encoded prior window there).
fn encoder_forward(
    ps: &ParamSet,
    cfg: &DenoiserConfig,
    x: &[f64],
    e: &[f64],
    stem_add: Option<&[f64]>,
) -> EncoderAct {
    let k = cfg.kernel;
    let sw = ps.t("stem.w");
    let sb = ps.t("stem.b");
    let mut h = conv1d_forward(x, cfg.d, cfg.w, &sw.data, &sb.data, cfg.channels[0], k, 1);
    if let Some(add) = stem_add {
        add_into(&mut h, add);
    }
    let mut enc = Vec::with_capacity(cfg.levels);
    let mut skips = Vec::with_capacity(cfg.levels);
    for (i, b) in cfg.enc_blocks().iter().enumerate() {
        let (out, cache) = block_forward(ps, cfg, b, &h, e);
        enc.push(cache);
        skips.push(out.clone());
        h = out;
        if i < cfg.levels - 1 {
            let dw = ps.t(&format!("down{}.w", i));
            let db = ps.t(&format!("down{}.b", i));
            h = conv1d_forward(&h, cfg.channels[i], b.len, &dw.data, &db.data, cfg.channels[i], k, 2);
        }
    }
    let (mid_out, mid) = block_forward(ps, cfg, &cfg.mid_block(), &h, e);
    EncoderAct { enc, skips, mid, mid_out }
}

/// Backward through an encoder stack. `d_mid_out` is the gradient at the
/// middle-block output; `d_skips[i]` carries gradients arriving at each skip
/// from outside (decoder concats or connectors). Returns the gradient at the
/// first block's input (the stem output, after any injection).
#[allow(clippy::too_many_arguments)]
fn encoder_backward(
    ps: &ParamSet,
    cfg: &DenoiserConfig,
    act: &EncoderAct,
    d_mid_out: &[f64],
    mut d_skips: Vec<Vec<f64>>,
    e: &[f64],
    grads: &mut Grads,
    grad_prefix: &str,
    want_params: bool,
    d_e: &mut [f64],
) -> Vec<f64> {
    let k = cfg.kernel;
    let top = cfg.levels - 1;
    let d_mid_in = block_backward(
        ps,
        cfg,
        &cfg.mid_block(),
        &act.mid,
        e,
        d_mid_out,
        grads,
        grad_prefix,
        want_params,
        d_e,
    );
    add_into(&mut d_skips[top], &d_mid_in);
    let enc_dims = cfg.enc_blocks();
    let mut d_from_above: Option<Vec<f64>> = None;
    for i in (0..cfg.levels).rev() {
        let mut d_out = std::mem::take(&mut d_skips[i]);
        if let Some(d_above) = d_from_above.take() {
            // Gradient through down{i}, whose input was skips[i].
            let dx = conv_bwd_named(
                ps,
                &format!("down{}", i),
                grad_prefix,
                &d_above,
                &act.skips[i],
                cfg.channels[i],
                enc_dims[i].len,
                cfg.channels[i],
                k,
                2,
                grads,
                want_params,
            );
            add_into(&mut d_out, &dx);
        }
        let d_in = block_backward(
            ps,
            cfg,
            &enc_dims[i],
            &act.enc[i],
            e,
            &d_out,
            grads,
            grad_prefix,
            want_params,
            d_e,
        );
        d_from_above = Some(d_in);
    }
    d_from_above.expect("levels >= 2")
}

/// Full forward cache of the base U-net (the decoder caches reflect any
/// connector injections applied to the skips and middle output).
#[derive(Debug, Clone)]
pub struct BaseCache {
    e: Vec<f64>,
    obs: Vec<f64>,
    task_id: usize,
    x: Vec<f64>,
    enc_act: EncoderAct,
    dec: Vec<BlockCache>,
    up_in: Vec<Vec<f64>>,
    head_in: Vec<f64>,
}

struct Injections<'a> {
    skip_add: &'a [Vec<f64>],
    mid_add: &'a [f64],
}

fn forward_core(
    ps: &ParamSet,
    cfg: &DenoiserConfig,
    x: &[f64],
    e: Vec<f64>,
    obs: &[f64],
    task_id: usize,
    inject: Option<Injections<'_>>,
) -> (Vec<f64>, BaseCache) {
    let k = cfg.kernel;
    let enc_act = encoder_forward(ps, cfg, x, &e, None);
    let mut h = enc_act.mid_out.clone();
    if let Some(inj) = &inject {
        add_into(&mut h, inj.mid_add);
    }
    let dec_dims = cfg.dec_blocks();
    let mut dec: Vec<Option<BlockCache>> = vec![None; cfg.levels];
    let mut up_in: Vec<Vec<f64>> = vec![Vec::new(); cfg.levels.saturating_sub(1)];
    for i in (0..cfg.levels).rev() {
        if i < cfg.levels - 1 {
            let upsampled = upsample2_forward(&h, cfg.channels[i + 1], cfg.level_len(i + 1));
            let uw = ps.t(&format!("up{}.w", i));
            let ub = ps.t(&format!("up{}.b", i));
            h = conv1d_forward(
                &upsampled,
                cfg.channels[i + 1],
                cfg.level_len(i),
                &uw.data,
                &ub.data,
                cfg.channels[i],
                k,
                1,
            );
            up_in[i] = upsampled;
        }
        let skip = match &inject {
            Some(inj) => {
                let mut s = enc_act.skips[i].clone();
                add_into(&mut s, &inj.skip_add[i]);
                s
            }
            None => enc_act.skips[i].clone(),
        };
        let cat = concat_channels(&h, &skip);
        let (out, cache) = block_forward(ps, cfg, &dec_dims[i], &cat, &e);
        dec[i] = Some(cache);
        h = out;
    }
    let hw = ps.t("head.w");
    let hb = ps.t("head.b");
    let out = conv1d_forward(&h, cfg.channels[0], cfg.w, &hw.data, &hb.data, cfg.d, 1, 1);
    let cache = BaseCache {
        e,
        obs: obs.to_vec(),
        task_id,
        x: x.to_vec(),
        enc_act,
        dec: dec.into_iter().map(Option::unwrap).collect(),
        up_in,
        head_in: h,
    };
    (out, cache)
}

/// Base U-net forward on a channel-major `D x W` input. Returns the noise
/// prediction and the cache for [`backward_base`].
pub fn forward_base(
    ps: &ParamSet,
    cfg: &DenoiserConfig,
    x: &[f64],
    tau: f64,
    obs: &[f64],
    task_id: usize,
) -> Result<(Vec<f64>, BaseCache)> {
    let e = embed_condition(ps, cfg, tau, obs, task_id)?;
    Ok(forward_core(ps, cfg, x, e, obs, task_id, None))
}

/// Backward through the decoder (head back to the middle). Returns the
/// gradient at the middle-output position and per-skip gradients.
#[allow(clippy::too_many_arguments)]
fn decoder_backward(
    ps: &ParamSet,
    cfg: &DenoiserConfig,
    cache: &BaseCache,
    d_out: &[f64],
    grads: &mut Grads,
    want_params: bool,
    d_e: &mut [f64],
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let k = cfg.kernel;
    let dec_dims = cfg.dec_blocks();
    let mut d_h = conv_bwd_named(
        ps,
        "head",
        "",
        d_out,
        &cache.head_in,
        cfg.channels[0],
        cfg.w,
        cfg.d,
        1,
        1,
        grads,
        want_params,
    );
    let mut d_skips: Vec<Vec<f64>> = (0..cfg.levels).map(|_| Vec::new()).collect();
    for i in 0..cfg.levels {
        let d_cat = block_backward(
            ps,
            cfg,
            &dec_dims[i],
            &cache.dec[i],
            &cache.e,
            &d_h,
            grads,
            "",
            want_params,
            d_e,
        );
        let split = cfg.channels[i] * cfg.level_len(i);
        let (d_top, d_skip) = d_cat.split_at(split);
        d_skips[i] = d_skip.to_vec();
        if i < cfg.levels - 1 {
            let d_up_in = conv_bwd_named(
                ps,
                &format!("up{}", i),
                "",
                d_top,
                &cache.up_in[i],
                cfg.channels[i + 1],
                cfg.level_len(i),
                cfg.channels[i],
                k,
                1,
                grads,
                want_params,
            );
            d_h = upsample2_backward(&d_up_in, cfg.channels[i + 1], cfg.level_len(i + 1));
        } else {
            return (d_top.to_vec(), d_skips);
        }
    }
    unreachable!("levels >= 2")
}

/// Gradient of the fused embedding back into the conditioning parameters.
fn embed_backward(
    cfg: &DenoiserConfig,
    obs: &[f64],
    task_id: usize,
    d_e: &[f64],
    ps: &ParamSet,
    grads: &mut Grads,
) {
    let sin = cfg.sin_dim();
    let op = cfg.obs_part();
    let tp = cfg.task_part();
    let d_obs_part = &d_e[sin..sin + op];
    let ow = ps.t("cond.obs.w");
    let mut dw = vec![0.0; ow.len()];
    let mut db = vec![0.0; op];
    let _ = linear_backward(d_obs_part, obs, &ow.data, op, cfg.obs_dim, &mut dw, &mut db);
    add_into(grads.acc("cond.obs.w", dw.len()), &dw);
    add_into(grads.acc("cond.obs.b", db.len()), &db);
    let d_task = &d_e[sin + op..sin + op + tp];
    let table = ps.t("cond.task");
    let g = grads.acc("cond.task", table.len());
    add_into(&mut g[task_id * tp..(task_id + 1) * tp], d_task);
}

/// Backward pass of the base U-net, accumulating gradients for every base
/// parameter. Returns the gradient with respect to the input window.
pub fn backward_base(
    ps: &ParamSet,
    cfg: &DenoiserConfig,
    cache: &BaseCache,
    d_out: &[f64],
    grads: &mut Grads,
) -> Vec<f64> {
    let mut d_e = vec![0.0; cfg.cond_dim];
    let (d_mid, d_skips) = decoder_backward(ps, cfg, cache, d_out, grads, true, &mut d_e);
    let d_stem_out =
        encoder_backward(ps, cfg, &cache.enc_act, &d_mid, d_skips, &cache.e, grads, "", true, &mut d_e);
    let d_x = conv_bwd_named(
        ps,
        "stem",
        "",
        &d_stem_out,
        &cache.x,
        cfg.d,
        cfg.w,
        cfg.channels[0],
        cfg.kernel,
        1,
        grads,
        true,
    );
    embed_backward(cfg, &cache.obs, cache.task_id, &d_e, ps, grads);
    d_x
}

/// Forward cache of the controlled (transition-conditioned) pass.
#[derive(Debug, Clone)]
pub struct CtrlCache {
    base: BaseCache,
    replica_act: EncoderAct,
    prior_in: Vec<f64>,
    p1: Vec<f64>,
    p1s: Vec<f64>,
}

/// Controlled forward: base U-net plus the replica encoder fed the prior
/// window, injected through the 1x1 connectors into the skip and middle
/// paths. With all connectors at zero this reproduces `forward_base`.
pub fn forward_controlled(
    base: &ParamSet,
    trans: &TransitionParams,
    cfg: &DenoiserConfig,
    x: &[f64],
    tau: f64,
    obs: &[f64],
    task_id: usize,
    prior: &[f64],
) -> Result<(Vec<f64>, CtrlCache)> {
    let k = cfg.kernel;
    let c0 = cfg.channels[0];
    let e = embed_condition(base, cfg, tau, obs, task_id)?;
    // Prior stem.
    let w1 = trans.prior_encoder.t("prior.conv1.w");
    let b1 = trans.prior_encoder.t("prior.conv1.b");
    let p1 = conv1d_forward(prior, cfg.d, cfg.w, &w1.data, &b1.data, c0, k, 1);
    let p1s = silu_forward(&p1);
    let w2 = trans.prior_encoder.t("prior.conv2.w");
    let b2 = trans.prior_encoder.t("prior.conv2.b");
    let pfeat = conv1d_forward(&p1s, c0, cfg.w, &w2.data, &b2.data, c0, k, 1);
    // Replica encoder over the same noisy window, prior features added at
    // the stem.
    let replica_act = encoder_forward(&trans.replica, cfg, x, &e, Some(&pfeat));
    // Connector outputs.
    let mut skip_add = Vec::with_capacity(cfg.levels);
    for i in 0..cfg.levels {
        let cw = trans.connectors.t(&format!("conn.skip{}.w", i));
        let cb = trans.connectors.t(&format!("conn.skip{}.b", i));
        let ch = cfg.channels[i];
        skip_add.push(conv1d_forward(
            &replica_act.skips[i],
            ch,
            cfg.level_len(i),
            &cw.data,
            &cb.data,
            ch,
            1,
            1,
        ));
    }
    let top = cfg.levels - 1;
    let mw = trans.connectors.t("conn.mid.w");
    let mb = trans.connectors.t("conn.mid.b");
    let mid_add = conv1d_forward(
        &replica_act.mid_out,
        cfg.channels[top],
        cfg.level_len(top),
        &mw.data,
        &mb.data,
        cfg.channels[top],
        1,
        1,
    );
    let (out, base_cache) = forward_core(
        base,
        cfg,
        x,
        e,
        obs,
        task_id,
        Some(Injections { skip_add: &skip_add, mid_add: &mid_add }),
    );
    Ok((out, CtrlCache { base: base_cache, replica_act, prior_in: prior.to_vec(), p1, p1s }))
}

/// Backward of the controlled pass. Always accumulates transition-branch
/// gradients (`replica.*`, `conn.*`, `prior.*`); base gradients (including
/// the conditioning stack) only when `include_base` is set.
pub fn backward_controlled(
    base: &ParamSet,
    trans: &TransitionParams,
    cfg: &DenoiserConfig,
    cache: &CtrlCache,
    d_out: &[f64],
    grads: &mut Grads,
    include_base: bool,
) {
    let k = cfg.kernel;
    let c0 = cfg.channels[0];
    let top = cfg.levels - 1;
    let mut d_e = vec![0.0; cfg.cond_dim];
    let (d_mid_inj, d_skips_inj) =
        decoder_backward(base, cfg, &cache.base, d_out, grads, include_base, &mut d_e);
    // Connector backward; inputs are the replica skips / middle output.
    let mut d_rskips = Vec::with_capacity(cfg.levels);
    for i in 0..cfg.levels {
        let ch = cfg.channels[i];
        let d = conv_bwd_named(
            &trans.connectors,
            &format!("conn.skip{}", i),
            "",
            &d_skips_inj[i],
            &cache.replica_act.skips[i],
            ch,
            cfg.level_len(i),
            ch,
            1,
            1,
            grads,
            true,
        );
        d_rskips.push(d);
    }
    let d_rmid = conv_bwd_named(
        &trans.connectors,
        "conn.mid",
        "",
        &d_mid_inj,
        &cache.replica_act.mid_out,
        cfg.channels[top],
        cfg.level_len(top),
        cfg.channels[top],
        1,
        1,
        grads,
        true,
    );
    // Replica encoder backward.
    let d_rh = encoder_backward(
        &trans.replica,
        cfg,
        &cache.replica_act,
        &d_rmid,
        d_rskips,
        &cache.base.e,
        grads,
        "replica.",
        true,
        &mut d_e,
    );
    // The replica stem consumed the noisy window; the prior stem's features
    // were added on top, so both receive the same gradient.
    let _ = conv_bwd_named(
        &trans.replica,
        "stem",
        "replica.",
        &d_rh,
        &cache.base.x,
        cfg.d,
        cfg.w,
        c0,
        k,
        1,
        grads,
        true,
    );
    let d_p1s = conv_bwd_named(
        &trans.prior_encoder,
        "prior.conv2",
        "",
        &d_rh,
        &cache.p1s,
        c0,
        cfg.w,
        c0,
        k,
        1,
        grads,
        true,
    );
    let d_p1 = silu_backward(&d_p1s, &cache.p1);
    let _ = conv_bwd_named(
        &trans.prior_encoder,
        "prior.conv1",
        "",
        &d_p1,
        &cache.prior_in,
        cfg.d,
        cfg.w,
        c0,
        k,
        1,
        grads,
        true,
    );
    if include_base {
        // The injected skips were base skips plus connector outputs, so the
        // base encoder sees the same incoming gradients.
        let d_stem_out = encoder_backward(
            base,
            cfg,
            &cache.base.enc_act,
            &d_mid_inj,
            d_skips_inj,
            &cache.base.e,
            grads,
            "",
            true,
            &mut d_e,
        );
        let _ = conv_bwd_named(
            base,
            "stem",
            "",
            &d_stem_out,
            &cache.base.x,
            cfg.d,
            cfg.w,
            c0,
            k,
            1,
            grads,
            true,
        );
        embed_backward(cfg, &cache.base.obs, cache.base.task_id, &d_e, base, grads);
    }
}
