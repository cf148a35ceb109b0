use super::*;
use crate::seeds::rng_from;
use rand::Rng;
use rand_distr::StandardNormal;

fn small_cfg() -> DenoiserConfig {
    DenoiserConfig {
        w: 8,
        d: 2,
        obs_dim: 3,
        cond_dim: 8,
        levels: 2,
        channels: vec![6, 10],
        n_tasks: 2,
        kernel: 3,
    }
}

fn rand_window(w: usize, d: usize, seed: u64) -> ActionWindow {
    let mut rng = rng_from(seed);
    ActionWindow::standard_normal(w, d, &mut rng)
}

#[test]
fn init_is_deterministic_per_seed() {
    let cfg = small_cfg();
    let a = init_base(&cfg, &mut rng_from(5)).unwrap();
    let b = init_base(&cfg, &mut rng_from(5)).unwrap();
    assert_eq!(a, b);
    let c = init_base(&cfg, &mut rng_from(6)).unwrap();
    assert_ne!(a, c);
}

#[test]
fn param_count_matches_architecture_tally() {
    // Independent tally: walk the declared architecture by hand.
    let cfg = DenoiserConfig {
        w: 48,
        d: 2,
        obs_dim: 3,
        cond_dim: 64,
        levels: 3,
        channels: vec![64, 128, 256],
        n_tasks: 3,
        kernel: 3,
    };
    let block = |cin: usize, cout: usize, cond: usize, with_res: bool| {
        let conv1 = cout * cin * 3 + cout;
        let film = 2 * cout * cond + 2 * cout;
        let conv2 = cout * cout * 3 + cout;
        let res = if with_res { cout * cin + cout } else { 0 };
        conv1 + film + conv2 + res
    };
    let cond = 64;
    let mut expect = 0usize;
    expect += 64 * 2 * 3 + 64; // stem
    expect += 16 * 3 + 16; // cond.obs (obs part = cond/4 = 16)
    expect += 3 * 16; // cond.task
    expect += block(64, 64, cond, false); // enc0
    expect += block(64, 128, cond, true); // enc1
    expect += block(128, 256, cond, true); // enc2
    expect += 64 * 64 * 3 + 64; // down0
    expect += 128 * 128 * 3 + 128; // down1
    expect += block(256, 256, cond, false); // mid
    expect += block(2 * 64, 64, cond, true); // dec0
    expect += block(2 * 128, 128, cond, true); // dec1
    expect += block(2 * 256, 256, cond, true); // dec2
    expect += 64 * 128 * 3 + 64; // up0
    expect += 128 * 256 * 3 + 128; // up1
    expect += 2 * 64 + 2; // head

    let ps = init_base(&cfg, &mut rng_from(1)).unwrap();
    assert_eq!(ps.param_count(), expect);
}

#[test]
fn invalid_window_divisibility_is_rejected() {
    let mut cfg = small_cfg();
    cfg.w = 50;
    cfg.levels = 3;
    cfg.channels = vec![6, 10, 14];
    assert!(matches!(init_base(&cfg, &mut rng_from(0)), Err(Error::InvalidArgument(_))));
}

#[test]
fn invalid_channel_order_is_rejected() {
    let mut cfg = small_cfg();
    cfg.channels = vec![10, 10];
    assert!(cfg.validate().is_err());
    cfg.channels = vec![12, 10];
    assert!(cfg.validate().is_err());
}

#[test]
fn embed_is_deterministic_and_task_distinct() {
    let cfg = small_cfg();
    let ps = init_base(&cfg, &mut rng_from(2)).unwrap();
    let obs = vec![0.1, -0.2, 0.3];
    let a = embed_condition(&ps, &cfg, 3.0, &obs, 0).unwrap();
    let b = embed_condition(&ps, &cfg, 3.0, &obs, 0).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), cfg.cond_dim);
    let c = embed_condition(&ps, &cfg, 3.0, &obs, 1).unwrap();
    // Sinusoid and observation blocks agree; the task block differs.
    let tp_start = cfg.sin_dim() + cfg.obs_part();
    assert_eq!(a[..tp_start], c[..tp_start]);
    assert_ne!(a[tp_start..], c[tp_start..]);
    assert!(matches!(
        embed_condition(&ps, &cfg, 3.0, &obs, 7),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn sinusoid_at_zero_alternates_zero_one() {
    let e = sinusoid(0.0, 8);
    assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
}

#[test]
fn denoise_base_shape_contract() {
    for (w, d) in [(16usize, 1usize), (48, 2)] {
        let cfg = DenoiserConfig { w, d, ..small_cfg() };
        let ps = init_base(&cfg, &mut rng_from(3)).unwrap();
        let a = rand_window(w, d, 9);
        let obs = vec![0.5, 0.1, -0.4];
        let out = denoise_base(&ps, &cfg, &a, 1, &obs, 0).unwrap();
        assert_eq!((out.w(), out.d()), (w, d));
        assert!(out.is_finite());
        let again = denoise_base(&ps, &cfg, &a, 1, &obs, 0).unwrap();
        assert_eq!(out, again);
    }
}

#[test]
fn denoise_base_rejects_wrong_shape() {
    let cfg = small_cfg();
    let ps = init_base(&cfg, &mut rng_from(3)).unwrap();
    let a = rand_window(4, 2, 1);
    assert!(matches!(
        denoise_base(&ps, &cfg, &a, 1, &[0.0, 0.0, 0.0], 0),
        Err(Error::ShapeMismatch(_))
    ));
}

#[test]
fn transition_init_copies_and_freezes() {
    let cfg = small_cfg();
    let mut base = init_base(&cfg, &mut rng_from(4)).unwrap();
    assert!(!base.frozen);
    let trans = init_transition(&mut base, &cfg, &mut rng_from(5)).unwrap();
    assert!(base.frozen);
    // Replica tensors are bit-identical copies of the encoder/middle set.
    for name in encoder_middle_names(&cfg) {
        assert_eq!(trans.replica.t(&name), base.t(&name), "{}", name);
    }
    // Layer-name bijection with the encoder/middle subset.
    let replica_names: Vec<_> = trans.replica.names().cloned().collect();
    let mut expect = encoder_middle_names(&cfg);
    expect.sort();
    assert_eq!(replica_names, expect);
    // Every connector tensor is exactly zero.
    assert_eq!(trans.max_abs_connector(), 0.0);
}

#[test]
fn zero_init_controlled_equals_base_exactly() {
    let cfg = small_cfg();
    let mut base = init_base(&cfg, &mut rng_from(10)).unwrap();
    let trans = init_transition(&mut base, &cfg, &mut rng_from(11)).unwrap();
    let mut rng = rng_from(12);
    for i in 0..100 {
        let a = ActionWindow::standard_normal(cfg.w, cfg.d, &mut rng);
        let prior = ActionWindow::standard_normal(cfg.w, cfg.d, &mut rng);
        let obs: Vec<f64> = (0..cfg.obs_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let tau = rng.gen_range(1..=20);
        let task = rng.gen_range(0..cfg.n_tasks);
        let b = denoise_base(&base, &cfg, &a, tau, &obs, task).unwrap();
        let c = denoise_controlled(&base, &trans, &cfg, &a, tau, &obs, task, &prior).unwrap();
        assert_eq!(b.as_slice(), c.as_slice(), "tuple {}", i);
    }
}

#[test]
fn nonzero_connectors_change_output_with_prior() {
    let cfg = small_cfg();
    let mut base = init_base(&cfg, &mut rng_from(13)).unwrap();
    let mut trans = init_transition(&mut base, &cfg, &mut rng_from(14)).unwrap();
    let mut rng = rng_from(15);
    for (_, t) in trans.connectors.iter_mut() {
        for v in t.data.iter_mut() {
            *v = rng.sample::<f64, _>(StandardNormal) * 0.1;
        }
    }
    let a = rand_window(cfg.w, cfg.d, 16);
    let p1 = rand_window(cfg.w, cfg.d, 17);
    let p2 = rand_window(cfg.w, cfg.d, 18);
    let obs = vec![0.0, 0.2, -0.1];
    let b = denoise_base(&base, &cfg, &a, 2, &obs, 0).unwrap();
    let c1 = denoise_controlled(&base, &trans, &cfg, &a, 2, &obs, 0, &p1).unwrap();
    let c2 = denoise_controlled(&base, &trans, &cfg, &a, 2, &obs, 0, &p2).unwrap();
    assert!(c1.max_abs_diff(&b) > 0.0);
    assert!(c1.max_abs_diff(&c2) > 0.0, "different priors must matter");
}

/// Mean-squared loss of the base prediction against a fixed target.
fn base_loss(ps: &ParamSet, cfg: &DenoiserConfig, x: &[f64], target: &[f64]) -> f64 {
    let (out, _) = forward_base(ps, cfg, x, 3.0, &[0.4, -0.1, 0.2], 1).unwrap();
    out.iter().zip(target).map(|(o, t)| (o - t) * (o - t)).sum::<f64>() / out.len() as f64
}

#[test]
fn base_gradients_match_finite_differences() {
    let cfg = small_cfg();
    let ps = init_base(&cfg, &mut rng_from(20)).unwrap();
    let mut rng = rng_from(21);
    let x: Vec<f64> = (0..cfg.d * cfg.w).map(|_| rng.sample(StandardNormal)).collect();
    let target: Vec<f64> = (0..cfg.d * cfg.w).map(|_| rng.sample(StandardNormal)).collect();

    let (out, cache) = forward_base(&ps, &cfg, &x, 3.0, &[0.4, -0.1, 0.2], 1).unwrap();
    let n = out.len() as f64;
    let d_out: Vec<f64> = out.iter().zip(&target).map(|(o, t)| 2.0 * (o - t) / n).collect();
    let mut grads = Grads::new();
    backward_base(&ps, &cfg, &cache, &d_out, &mut grads);

    let names: Vec<String> = ps.names().cloned().collect();
    let mut checked = 0;
    let mut attempts = 0;
    while checked < 12 && attempts < 60 {
        attempts += 1;
        let name = &names[rng.gen_range(0..names.len())];
        let len = ps.t(name).len();
        let idx = rng.gen_range(0..len);
        let analytic = grads.get(name).map(|g| g[idx]).unwrap_or(0.0);
        let h = 1e-4;
        let mut psp = ps.clone();
        psp.t_mut(name).data[idx] += h;
        let lp = base_loss(&psp, &cfg, &x, &target);
        psp.t_mut(name).data[idx] -= 2.0 * h;
        let lm = base_loss(&psp, &cfg, &x, &target);
        let numeric = (lp - lm) / (2.0 * h);
        if analytic.abs() < 1e-7 && numeric.abs() < 1e-7 {
            continue; // parameter not exercised by this input (e.g. unused task row)
        }
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        assert!(
            rel < 1e-3,
            "{}[{}]: analytic {} vs numeric {} (rel {})",
            name,
            idx,
            analytic,
            numeric,
            rel
        );
        checked += 1;
    }
    assert!(checked >= 10, "only {} informative parameters checked", checked);
}

fn ctrl_loss(
    base: &ParamSet,
    trans: &TransitionParams,
    cfg: &DenoiserConfig,
    x: &[f64],
    prior: &[f64],
    target: &[f64],
) -> f64 {
    let (out, _) =
        forward_controlled(base, trans, cfg, x, 2.0, &[0.1, 0.3, -0.2], 0, prior).unwrap();
    out.iter().zip(target).map(|(o, t)| (o - t) * (o - t)).sum::<f64>() / out.len() as f64
}

#[test]
fn controlled_gradients_match_finite_differences() {
    let cfg = small_cfg();
    let mut base = init_base(&cfg, &mut rng_from(30)).unwrap();
    let mut trans = init_transition(&mut base, &cfg, &mut rng_from(31)).unwrap();
    let mut rng = rng_from(32);
    // Move the connectors off zero so gradients reach the replica and the
    // prior stem (at exact zero those gradients vanish identically).
    for (_, t) in trans.connectors.iter_mut() {
        for v in t.data.iter_mut() {
            *v = rng.sample::<f64, _>(StandardNormal) * 0.05;
        }
    }
    let x: Vec<f64> = (0..cfg.d * cfg.w).map(|_| rng.sample(StandardNormal)).collect();
    let prior: Vec<f64> = (0..cfg.d * cfg.w).map(|_| rng.sample(StandardNormal)).collect();
    let target: Vec<f64> = (0..cfg.d * cfg.w).map(|_| rng.sample(StandardNormal)).collect();

    let (out, cache) =
        forward_controlled(&base, &trans, &cfg, &x, 2.0, &[0.1, 0.3, -0.2], 0, &prior).unwrap();
    let n = out.len() as f64;
    let d_out: Vec<f64> = out.iter().zip(&target).map(|(o, t)| 2.0 * (o - t) / n).collect();
    let mut grads = Grads::new();
    backward_controlled(&base, &trans, &cfg, &cache, &d_out, &mut grads, false);

    // Frozen base: no base-parameter gradients may appear.
    for name in base.names() {
        assert!(grads.get(name).is_none(), "unexpected base gradient {}", name);
    }

    let names = trans.trainable_names();
    let mut checked = 0;
    let mut attempts = 0;
    while checked < 12 && attempts < 80 {
        attempts += 1;
        let name = &names[rng.gen_range(0..names.len())];
        let len = trans.t_prefixed(name).len();
        let idx = rng.gen_range(0..len);
        let analytic = grads.get(name).map(|g| g[idx]).unwrap_or(0.0);
        let h = 1e-4;
        let mut tp = trans.clone();
        tp.t_prefixed_mut(name).data[idx] += h;
        let lp = ctrl_loss(&base, &tp, &cfg, &x, &prior, &target);
        tp.t_prefixed_mut(name).data[idx] -= 2.0 * h;
        let lm = ctrl_loss(&base, &tp, &cfg, &x, &prior, &target);
        let numeric = (lp - lm) / (2.0 * h);
        if analytic.abs() < 1e-7 && numeric.abs() < 1e-7 {
            continue;
        }
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        assert!(
            rel < 1e-3,
            "{}[{}]: analytic {} vs numeric {} (rel {})",
            name,
            idx,
            analytic,
            numeric,
            rel
        );
        checked += 1;
    }
    assert!(checked >= 10, "only {} informative parameters checked", checked);
}

#[test]
fn unfrozen_backward_also_fills_base_gradients() {
    let cfg = small_cfg();
    let mut base = init_base(&cfg, &mut rng_from(40)).unwrap();
    let trans = init_transition(&mut base, &cfg, &mut rng_from(41)).unwrap();
    let mut rng = rng_from(42);
    let x: Vec<f64> = (0..cfg.d * cfg.w).map(|_| rng.sample(StandardNormal)).collect();
    let prior: Vec<f64> = (0..cfg.d * cfg.w).map(|_| rng.sample(StandardNormal)).collect();
    let (out, cache) =
        forward_controlled(&base, &trans, &cfg, &x, 2.0, &[0.1, 0.3, -0.2], 0, &prior).unwrap();
    let d_out = vec![1.0 / out.len() as f64; out.len()];
    let mut grads = Grads::new();
    backward_controlled(&base, &trans, &cfg, &cache, &d_out, &mut grads, true);
    assert!(grads.get("head.w").is_some());
    assert!(grads.get("enc0.conv1.w").is_some());
    assert!(grads.get("cond.obs.w").is_some());
}
