//! DDPM mathematics: noise schedules, forward corruption, and ancestral
//! reverse sampling. Nothing in here knows about networks or tasks; the
//! denoiser enters `sample_loop` as a plain closure.
//!
//! Step indices `tau` are 1-based throughout: `1 <= tau <= T`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A W×D matrix of consecutive actions, row-major (one row per timestep).
/// The unit of generation, conditioning, and execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionWindow {
    w: usize,
    d: usize,
    values: Vec<f64>,
}

impl ActionWindow {
    pub fn zeros(w: usize, d: usize) -> Self {
        Self { w, d, values: vec![0.0; w * d] }
    }

    pub fn from_values(w: usize, d: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != w * d {
            return Err(Error::ShapeMismatch(format!(
                "window expects {}x{}={} values, got {}",
                w,
                d,
                w * d,
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("window contains non-finite entries".into()));
        }
        Ok(Self { w, d, values })
    }

    /// Fill with unit-normal draws.
    pub fn standard_normal(w: usize, d: usize, rng: &mut ChaCha8Rng) -> Self {
        let values = (0..w * d).map(|_| rng.sample(StandardNormal)).collect();
        Self { w, d, values }
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn get(&self, t: usize, dim: usize) -> f64 {
        self.values[t * self.d + dim]
    }

    pub fn set(&mut self, t: usize, dim: usize, v: f64) {
        self.values[t * self.d + dim] = v;
    }

    /// Row `t`: the D-dimensional action at window step `t`.
    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.d..(t + 1) * self.d]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.w == other.w && self.d == other.d
    }

    /// Elementwise map into a new window.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { w: self.w, d: self.d, values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Linear-beta diffusion schedule with cached cumulative products.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    steps: usize,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Number of diffusion steps T.
    pub fn steps(&self) -> usize {
        self.steps
    }

    fn check_tau(&self, tau: usize) -> Result<()> {
        if tau < 1 || tau > self.steps {
            return Err(Error::IndexOutOfRange(format!(
                "tau={} outside 1..={}",
                tau, self.steps
            )));
        }
        Ok(())
    }

    /// beta at 1-based step `tau`.
    pub fn beta(&self, tau: usize) -> f64 {
        self.beta[tau - 1]
    }

    /// Cumulative product of (1 - beta) through 1-based step `tau`.
    pub fn alpha_bar(&self, tau: usize) -> f64 {
        self.alpha_bar[tau - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// Build a linear schedule: beta spaced evenly from `beta_start` to
/// `beta_end` over `steps` steps, with running alpha_bar products.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "betas must satisfy 0 < start <= end < 1, got start={} end={}",
            beta_start, beta_end
        )));
    }
    let mut beta = Vec::with_capacity(steps);
    for i in 0..steps {
        let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
        beta.push(beta_start + (beta_end - beta_start) * frac);
    }
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut prod = 1.0;
    for &b in &beta {
        prod *= 1.0 - b;
        alpha_bar.push(prod);
    }
    Ok(NoiseSchedule { steps, beta, alpha_bar })
}

/// Corrupt a clean window to diffusion step `tau`:
/// `sqrt(alpha_bar) * a0 + sqrt(1 - alpha_bar) * z`.
pub fn forward_diffuse(
    a0: &ActionWindow,
    tau: usize,
    z: &ActionWindow,
    sched: &NoiseSchedule,
) -> Result<ActionWindow> {
    sched.check_tau(tau)?;
    if !a0.same_shape(z) {
        return Err(Error::ShapeMismatch(format!(
            "noise is {}x{} but window is {}x{}",
            z.w(),
            z.d(),
            a0.w(),
            a0.d()
        )));
    }
    let ab = sched.alpha_bar(tau);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let values = a0
        .as_slice()
        .iter()
        .zip(z.as_slice())
        .map(|(&a, &n)| sa * a + sb * n)
        .collect();
    Ok(ActionWindow { w: a0.w(), d: a0.d(), values })
}

/// One ancestral sampling step from `tau` to `tau - 1` given the predicted
/// noise: posterior mean `(a - beta/sqrt(1-alpha_bar) * eps) / sqrt(alpha)`
/// plus `sqrt(beta) * z`. The final step (`tau == 1`) must be noiseless.
pub fn reverse_step(
    a_tau: &ActionWindow,
    tau: usize,
    eps_pred: &ActionWindow,
    z: &ActionWindow,
    sched: &NoiseSchedule,
) -> Result<ActionWindow> {
    sched.check_tau(tau)?;
    if !a_tau.same_shape(eps_pred) || !a_tau.same_shape(z) {
        return Err(Error::ShapeMismatch("reverse_step inputs disagree on W x D".into()));
    }
    if tau == 1 && z.as_slice().iter().any(|&v| v != 0.0) {
        return Err(Error::InvalidArgument(
            "the final reverse step (tau=1) must receive all-zero noise".into(),
        ));
    }
    let beta = sched.beta(tau);
    let alpha = 1.0 - beta;
    let ab = sched.alpha_bar(tau);
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let eps_coef = beta / (1.0 - ab).sqrt();
    let sigma = beta.sqrt();
    let values = a_tau
        .as_slice()
        .iter()
        .zip(eps_pred.as_slice())
        .zip(z.as_slice())
        .map(|((&a, &e), &n)| inv_sqrt_alpha * (a - eps_coef * e) + sigma * n)
        .collect();
    Ok(ActionWindow { w: a_tau.w(), d: a_tau.d(), values })
}

/// Full reverse process: start from unit-normal noise and apply
/// `reverse_step` for `tau = T..1`. Deterministic given the rng seed.
///
/// The rng draw order is fixed: the initial noise first, then (after each
/// denoiser call) the per-step noise for `tau > 1`.
pub fn sample_loop<F>(
    mut denoiser: F,
    w: usize,
    d: usize,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<ActionWindow>
where
    F: FnMut(&ActionWindow, usize) -> Result<ActionWindow>,
{
    let mut a = ActionWindow::standard_normal(w, d, rng);
    for tau in (1..=sched.steps()).rev() {
        let eps = denoiser(&a, tau)?;
        if !eps.same_shape(&a) {
            return Err(Error::ShapeMismatch(format!(
                "denoiser returned {}x{} at tau={}, expected {}x{}",
                eps.w(),
                eps.d(),
                tau,
                w,
                d
            )));
        }
        let z = if tau > 1 {
            ActionWindow::standard_normal(w, d, rng)
        } else {
            ActionWindow::zeros(w, d)
        };
        a = reverse_step(&a, tau, &eps, &z, sched)?;
        if !a.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite sample after reverse step tau={}",
                tau
            )));
        }
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::rng_from;

    #[test]
    fn schedule_single_step() {
        let s = make_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.betas(), &[0.5]);
        assert_eq!(s.alpha_bars(), &[0.5]);
    }

    #[test]
    fn schedule_three_steps_hand_product() {
        // beta = [0.1, 0.2, 0.3]; alpha_bar by hand: 0.9, 0.9*0.8, 0.9*0.8*0.7.
        let s = make_schedule(3, 0.1, 0.3).unwrap();
        let expect = [0.9, 0.72, 0.504];
        for (got, want) in s.alpha_bars().iter().zip(expect) {
            assert!((got - want).abs() < 1e-12, "{} vs {}", got, want);
        }
    }

    /// Independent product oracle: log-sum route plus a pairwise product
    /// tree, both distinct from the sequential running product.
    fn oracle_alpha_bar(beta: &[f64], upto: usize) -> (f64, f64) {
        let log_route = beta[..upto].iter().map(|b| (1.0 - b).ln()).sum::<f64>().exp();
        fn tree(v: &[f64]) -> f64 {
            match v.len() {
                0 => 1.0,
                1 => v[0],
                n => tree(&v[..n / 2]) * tree(&v[n / 2..]),
            }
        }
        let factors: Vec<f64> = beta[..upto].iter().map(|b| 1.0 - b).collect();
        (log_route, tree(&factors))
    }

    #[test]
    fn schedule_default_matches_product_oracle() {
        let s = make_schedule(100, 1e-4, 2e-2).unwrap();
        for tau in [1, 17, 50, 100] {
            let (log_route, tree_route) = oracle_alpha_bar(s.betas(), tau);
            assert!((s.alpha_bar(tau) - tree_route).abs() <= 1e-12);
            assert!((s.alpha_bar(tau) - log_route).abs() <= 1e-12);
        }
    }

    #[test]
    fn schedule_monotonicity() {
        let s = make_schedule(100, 1e-4, 2e-2).unwrap();
        for i in 1..100 {
            assert!(s.betas()[i] >= s.betas()[i - 1]);
            assert!(s.alpha_bars()[i] < s.alpha_bars()[i - 1]);
        }
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(make_schedule(0, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.0, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 1.0).is_err());
    }

    #[test]
    fn forward_zero_noise_scales_exactly() {
        let s = make_schedule(10, 0.05, 0.2).unwrap();
        let a0 = ActionWindow::from_values(2, 2, vec![1.0, -0.5, 0.25, 2.0]).unwrap();
        let z = ActionWindow::zeros(2, 2);
        for tau in 1..=10 {
            let out = forward_diffuse(&a0, tau, &z, &s).unwrap();
            let scale = s.alpha_bar(tau).sqrt();
            for (o, a) in out.as_slice().iter().zip(a0.as_slice()) {
                assert_eq!(*o, scale * a);
            }
        }
    }

    #[test]
    fn forward_pure_noise_hand_value() {
        // Schedule engineered so alpha_bar(2) = 0.64: beta = [0.2, 0.2].
        let s = make_schedule(2, 0.2, 0.2).unwrap();
        assert!((s.alpha_bar(2) - 0.64).abs() < 1e-15);
        let a0 = ActionWindow::zeros(3, 1);
        let z = ActionWindow::from_values(3, 1, vec![1.0; 3]).unwrap();
        let out = forward_diffuse(&a0, 2, &z, &s).unwrap();
        for v in out.as_slice() {
            assert!((v - 0.6).abs() < 1e-12, "sqrt(1-0.64) = 0.6, got {}", v);
        }
    }

    #[test]
    fn forward_monte_carlo_mean() {
        // Sample mean over 1e5 unit-normal draws approaches sqrt(ab)*a0
        // within 3 standard errors of the known per-entry std sqrt(1-ab).
        let s = make_schedule(20, 1e-3, 0.1).unwrap();
        let tau = 12;
        let a0 = ActionWindow::from_values(2, 1, vec![0.8, -0.3]).unwrap();
        let n = 100_000;
        let mut rng = rng_from(42);
        let mut sums = [0.0f64; 2];
        for _ in 0..n {
            let z = ActionWindow::standard_normal(2, 1, &mut rng);
            let out = forward_diffuse(&a0, tau, &z, &s).unwrap();
            sums[0] += out.get(0, 0);
            sums[1] += out.get(1, 0);
        }
        let se = (1.0 - s.alpha_bar(tau)).sqrt() / (n as f64).sqrt();
        let scale = s.alpha_bar(tau).sqrt();
        for (i, sum) in sums.iter().enumerate() {
            let mean = sum / n as f64;
            let expect = scale * a0.get(i, 0);
            assert!(
                (mean - expect).abs() < 3.0 * se,
                "entry {}: mean {} expect {} (3se={})",
                i,
                mean,
                expect,
                3.0 * se
            );
        }
    }

    #[test]
    fn forward_monte_carlo_variance() {
        // Empirical per-entry variance within 2% of (1 - alpha_bar).
        let s = make_schedule(20, 1e-3, 0.1).unwrap();
        let tau = 9;
        let a0 = ActionWindow::from_values(1, 1, vec![0.4]).unwrap();
        let n = 100_000;
        let mut rng = rng_from(7);
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let z = ActionWindow::standard_normal(1, 1, &mut rng);
            let v = forward_diffuse(&a0, tau, &z, &s).unwrap().get(0, 0);
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let expect = 1.0 - s.alpha_bar(tau);
        assert!(
            (var - expect).abs() / expect < 0.02,
            "var {} vs expected {}",
            var,
            expect
        );
    }

    #[test]
    fn forward_shape_and_range_errors() {
        let s = make_schedule(4, 0.1, 0.2).unwrap();
        let a0 = ActionWindow::zeros(3, 2);
        let z_bad = ActionWindow::zeros(3, 1);
        assert!(matches!(
            forward_diffuse(&a0, 1, &z_bad, &s),
            Err(Error::ShapeMismatch(_))
        ));
        let z = ActionWindow::zeros(3, 2);
        assert!(matches!(
            forward_diffuse(&a0, 0, &z, &s),
            Err(Error::IndexOutOfRange(_))
        ));
        assert!(matches!(
            forward_diffuse(&a0, 5, &z, &s),
            Err(Error::IndexOutOfRange(_))
        ));
    }

    #[test]
    fn reverse_final_step_zero_inputs() {
        let s = make_schedule(3, 0.1, 0.3).unwrap();
        let a = ActionWindow::from_values(2, 1, vec![0.9, -0.4]).unwrap();
        let eps = ActionWindow::zeros(2, 1);
        let z = ActionWindow::zeros(2, 1);
        let out = reverse_step(&a, 1, &eps, &z, &s).unwrap();
        let scale = 1.0 / (1.0 - s.beta(1)).sqrt();
        for (o, v) in out.as_slice().iter().zip(a.as_slice()) {
            assert!((o - scale * v).abs() < 1e-15);
        }
    }

    #[test]
    fn reverse_rejects_noise_at_final_step() {
        let s = make_schedule(3, 0.1, 0.3).unwrap();
        let a = ActionWindow::zeros(2, 1);
        let eps = ActionWindow::zeros(2, 1);
        let z = ActionWindow::from_values(2, 1, vec![0.1, 0.0]).unwrap();
        assert!(matches!(
            reverse_step(&a, 1, &eps, &z, &s),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn reverse_scalar_closed_form() {
        // All entries of a_tau equal m and eps_pred equal c: the output is
        // (m - beta/sqrt(1-alpha_bar)*c)/sqrt(1-beta), evaluated by hand here.
        let s = make_schedule(5, 0.1, 0.3).unwrap();
        let tau = 4;
        let (m, c) = (0.7, -0.2);
        let a = ActionWindow::from_values(2, 2, vec![m; 4]).unwrap();
        let eps = ActionWindow::from_values(2, 2, vec![c; 4]).unwrap();
        let z = ActionWindow::zeros(2, 2);
        let out = reverse_step(&a, tau, &eps, &z, &s).unwrap();
        let beta = s.beta(tau);
        let expect = (m - beta / (1.0 - s.alpha_bar(tau)).sqrt() * c) / (1.0 - beta).sqrt();
        for v in out.as_slice() {
            assert!((v - expect).abs() < 1e-15, "{} vs {}", v, expect);
        }
    }

    #[test]
    fn single_step_roundtrip_is_exact() {
        // T=1: forward then reverse with the oracle eps recovers a0 to 1e-9.
        let s = make_schedule(1, 0.02, 0.02).unwrap();
        let mut rng = rng_from(3);
        let a0 = ActionWindow::standard_normal(4, 2, &mut rng).map(|v| v.tanh());
        let z = ActionWindow::standard_normal(4, 2, &mut rng);
        let a1 = forward_diffuse(&a0, 1, &z, &s).unwrap();
        let rec = reverse_step(&a1, 1, &z, &ActionWindow::zeros(4, 2), &s).unwrap();
        assert!(rec.max_abs_diff(&a0) <= 1e-9);
    }

    #[test]
    fn oracle_roundtrip_error_shrinks_toward_final_step() {
        let s = make_schedule(50, 1e-4, 0.05).unwrap();
        let mut rng = rng_from(11);
        let a0 = ActionWindow::standard_normal(6, 1, &mut rng).map(|v| v.tanh());
        let z = ActionWindow::standard_normal(6, 1, &mut rng);
        let zero = ActionWindow::zeros(6, 1);
        let mut last = f64::INFINITY;
        for tau in [40, 20, 8, 2, 1] {
            let a_tau = forward_diffuse(&a0, tau, &z, &s).unwrap();
            let rec = reverse_step(&a_tau, tau, &z, &zero, &s).unwrap();
            let err = rec.max_abs_diff(&a0);
            assert!(err <= last + 1e-12, "error should shrink: {} then {}", last, err);
            last = err;
        }
        assert!(last <= 1e-9);
    }

    #[test]
    fn sample_loop_deterministic_per_seed() {
        let s = make_schedule(25, 1e-3, 0.05).unwrap();
        let den = |a: &ActionWindow, _tau: usize| Ok(ActionWindow::zeros(a.w(), a.d()));
        let one = sample_loop(den, 5, 2, &s, &mut rng_from(9)).unwrap();
        let two = sample_loop(den, 5, 2, &s, &mut rng_from(9)).unwrap();
        assert_eq!(one.as_slice(), two.as_slice());
        let three = sample_loop(den, 5, 2, &s, &mut rng_from(10)).unwrap();
        assert_ne!(one.as_slice(), three.as_slice());
    }

    #[test]
    fn sample_loop_single_step_zero_denoiser() {
        // With T=1 and a zero denoiser the output is the initial noise
        // rescaled by 1/sqrt(1-beta).
        let s = make_schedule(1, 0.5, 0.5).unwrap();
        let mut rng = rng_from(21);
        let out = sample_loop(
            |a, _| Ok(ActionWindow::zeros(a.w(), a.d())),
            3,
            1,
            &s,
            &mut rng,
        )
        .unwrap();
        let noise = ActionWindow::standard_normal(3, 1, &mut rng_from(21));
        let scale = 1.0 / (0.5f64).sqrt();
        for (o, n) in out.as_slice().iter().zip(noise.as_slice()) {
            assert!((o - scale * n).abs() < 1e-15);
        }
    }

    #[test]
    fn sample_loop_shape_contract() {
        let s = make_schedule(10, 1e-3, 0.02).unwrap();
        let out = sample_loop(
            |a, _| Ok(ActionWindow::zeros(a.w(), a.d())),
            48,
            2,
            &s,
            &mut rng_from(1),
        )
        .unwrap();
        assert_eq!((out.w(), out.d()), (48, 2));
        assert!(out.is_finite());
    }

    #[test]
    fn sample_loop_reports_divergence_step() {
        let s = make_schedule(10, 1e-3, 0.02).unwrap();
        let den = |a: &ActionWindow, tau: usize| {
            if tau == 6 {
                Ok(ActionWindow { w: a.w(), d: a.d(), values: vec![f64::NAN; a.w() * a.d()] })
            } else {
                Ok(ActionWindow::zeros(a.w(), a.d()))
            }
        };
        match sample_loop(den, 2, 1, &s, &mut rng_from(5)) {
            Err(Error::Divergence(msg)) => assert!(msg.contains("tau=6"), "{}", msg),
            other => panic!("expected divergence error, got {:?}", other.map(|_| ())),
        }
    }
}
