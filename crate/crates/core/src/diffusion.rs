//! Noise schedules, forward noising, the Gaussian posterior and the
//! few-step wavelet-space sampler.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::networks::Generator;
use crate::nn::ParamStore;
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::wavelet;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScheduleKind {
    /// `ᾱ_1 = 1 − β_min`, `ᾱ_T` given, log-spaced in between.
    GeometricAlphaBar { beta_min: f64, alpha_bar_final: f64 },
    /// `β_t` linear from `beta_start` (t=1) to `beta_end` (t=T).
    LinearBeta { beta_start: f64, beta_end: f64 },
    /// Discretized variance-preserving SDE with linear `β(s)` on
    /// `s_k = k/T·(1−10⁻³) + 10⁻³`, renormalized so `ᾱ_0 = 1`.
    Vp { beta_min: f64, beta_max: f64 },
}

impl ScheduleKind {
    pub fn default_geometric() -> Self {
        ScheduleKind::GeometricAlphaBar {
            beta_min: 0.1,
            alpha_bar_final: 1e-3,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScheduleKind::GeometricAlphaBar { .. } => "geometric-alpha-bar",
            ScheduleKind::LinearBeta { .. } => "linear-beta",
            ScheduleKind::Vp { .. } => "vp",
        }
    }
}

/// Per-step coefficients, indexed `0..=T` with `ᾱ_0 = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub steps: usize,
    pub kind: ScheduleKind,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    coef0: Vec<f64>,
    coeft: Vec<f64>,
    var: Vec<f64>,
}

pub fn make_schedule(steps: usize, kind: ScheduleKind) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    let t_n = steps as f64;
    let mut alpha_bar = vec![1.0; steps + 1];
    match kind {
        ScheduleKind::GeometricAlphaBar {
            beta_min,
            alpha_bar_final,
        } => {
            if !(alpha_bar_final > 0.0 && alpha_bar_final < 1.0 && beta_min > 0.0 && beta_min < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "geometric schedule needs 0 < beta_min, alpha_bar_T < 1 (got {beta_min}, {alpha_bar_final})"
                )));
            }
            let (l1, lt) = ((1.0 - beta_min).ln(), alpha_bar_final.ln());
            for t in 1..steps {
                alpha_bar[t] = (l1 + (t - 1) as f64 / (t_n - 1.0) * (lt - l1)).exp();
            }
            alpha_bar[steps] = alpha_bar_final;
        }
        ScheduleKind::LinearBeta { beta_start, beta_end } => {
            for t in 1..=steps {
                let b = if steps == 1 {
                    beta_end
                } else {
                    beta_start + (beta_end - beta_start) * (t - 1) as f64 / (t_n - 1.0)
                };
                alpha_bar[t] = alpha_bar[t - 1] * (1.0 - b);
            }
        }
        ScheduleKind::Vp { beta_min, beta_max } => {
            let eps = 1e-3;
            let log_ab = |k: usize| {
                let s = k as f64 / t_n * (1.0 - eps) + eps;
                -(beta_min * s + 0.5 * (beta_max - beta_min) * s * s)
            };
            let l0 = log_ab(0);
            for (t, ab) in alpha_bar.iter_mut().enumerate().skip(1) {
                *ab = (log_ab(t) - l0).exp();
            }
        }
    }
    let mut beta = vec![0.0; steps + 1];
    for t in 1..=steps {
        beta[t] = 1.0 - alpha_bar[t] / alpha_bar[t - 1];
        if !(beta[t] > 0.0 && beta[t] < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "{} schedule gives beta[{t}] = {} outside (0, 1)",
                kind.name(),
                beta[t]
            )));
        }
    }
    let (mut coef0, mut coeft, mut var) = (vec![0.0; steps + 1], vec![0.0; steps + 1], vec![0.0; steps + 1]);
    for t in 1..=steps {
        let (ab, ab_prev, b) = (alpha_bar[t], alpha_bar[t - 1], beta[t]);
        coef0[t] = ab_prev.sqrt() * b / (1.0 - ab);
        coeft[t] = (1.0 - b).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        var[t] = b * (1.0 - ab_prev) / (1.0 - ab);
    }
    Ok(DiffusionSchedule {
        steps,
        kind,
        beta,
        alpha_bar,
        coef0,
        coeft,
        var,
    })
}

impl DiffusionSchedule {
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Posterior mean coefficient on `y0`.
    pub fn posterior_coef0(&self, t: usize) -> f64 {
        self.coef0[t]
    }

    /// Posterior mean coefficient on `y_t`.
    pub fn posterior_coeft(&self, t: usize) -> f64 {
        self.coeft[t]
    }

    pub fn posterior_var(&self, t: usize) -> f64 {
        self.var[t]
    }

    fn check_t(&self, t: &[usize], allow_zero: bool) -> Result<()> {
        for &ti in t {
            if ti > self.steps || (ti == 0 && !allow_zero) {
                return Err(Error::InvalidArgument(format!(
                    "step {ti} outside {}..={}",
                    if allow_zero { 0 } else { 1 },
                    self.steps
                )));
            }
        }
        Ok(())
    }

    /// `y_t = √ᾱ_t·y0 + √(1−ᾱ_t)·eps`, one step index per batch row.
    pub fn q_sample(&self, y0: &Tensor, t: &[usize], eps: &Tensor) -> Result<Tensor> {
        self.check_t(t, true)?;
        let a: Vec<f64> = t.iter().map(|&ti| self.alpha_bar[ti].sqrt()).collect();
        let s: Vec<f64> = t.iter().map(|&ti| (1.0 - self.alpha_bar[ti]).sqrt()).collect();
        combine_rows(y0, &a, eps, &s)
    }

    /// Posterior mean `c0·y0 + ct·y_t`.
    pub fn q_posterior_mean(&self, y0: &Tensor, y_t: &Tensor, t: &[usize]) -> Result<Tensor> {
        self.check_t(t, false)?;
        let c0: Vec<f64> = t.iter().map(|&ti| self.coef0[ti]).collect();
        let ct: Vec<f64> = t.iter().map(|&ti| self.coeft[ti]).collect();
        combine_rows(y0, &c0, y_t, &ct)
    }

    /// Draws `y_{t-1} ~ q(y_{t-1} | y_t, y0)` from standard-normal `noise`.
    pub fn q_posterior_sample(&self, y0: &Tensor, y_t: &Tensor, t: &[usize], noise: &Tensor) -> Result<Tensor> {
        let mean = self.q_posterior_mean(y0, y_t, t)?;
        let sd: Vec<f64> = t.iter().map(|&ti| self.var[ti].sqrt()).collect();
        let ones = vec![1.0; t.len()];
        combine_rows(&mean, &ones, noise, &sd)
    }
}

/// Row-wise `a[b]·x[b] + c[b]·y[b]` over the leading axis.
fn combine_rows(x: &Tensor, a: &[f64], y: &Tensor, c: &[f64]) -> Result<Tensor> {
    if x.shape() != y.shape() || x.shape().first() != Some(&a.len()) {
        return Err(Error::Shape(format!(
            "row combination of {:?} and {:?} with {} coefficients",
            x.shape(),
            y.shape(),
            a.len()
        )));
    }
    let n = x.numel() / a.len().max(1);
    let mut out = Tensor::zeros(x.shape());
    for (b, ((o, xs), ys)) in out
        .data_mut()
        .chunks_mut(n)
        .zip(x.data().chunks(n))
        .zip(y.data().chunks(n))
        .enumerate()
    {
        for ((o, &xv), &yv) in o.iter_mut().zip(xs).zip(ys) {
            *o = a[b] * xv + c[b] * yv;
        }
    }
    Ok(out)
}

/// Anything that predicts a clean sample from `(y_t, z, t)`.
pub trait Denoiser {
    fn latent_dim(&self) -> usize;
    fn denoise(&self, y_t: &Tensor, z: &Tensor, t: &[usize]) -> Result<Tensor>;
}

pub struct GeneratorDenoiser<'a> {
    pub generator: &'a Generator,
    pub params: &'a ParamStore,
}

impl Denoiser for GeneratorDenoiser<'_> {
    fn latent_dim(&self) -> usize {
        self.generator.spec.latent_dim
    }

    fn denoise(&self, y_t: &Tensor, z: &Tensor, t: &[usize]) -> Result<Tensor> {
        self.generator.denoise(self.params, y_t, z, t)
    }
}

/// Counts `denoise` calls of the wrapped denoiser.
pub struct CountingDenoiser<'a> {
    inner: &'a dyn Denoiser,
    calls: Cell<usize>,
}

impl<'a> CountingDenoiser<'a> {
    pub fn new(inner: &'a dyn Denoiser) -> Self {
        CountingDenoiser {
            inner,
            calls: Cell::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl Denoiser for CountingDenoiser<'_> {
    fn latent_dim(&self) -> usize {
        self.inner.latent_dim()
    }

    fn denoise(&self, y_t: &Tensor, z: &Tensor, t: &[usize]) -> Result<Tensor> {
        self.calls.set(self.calls.get() + 1);
        self.inner.denoise(y_t, z, t)
    }
}

/// Reverse chain in wavelet space; returns `y_0` of shape `[B, 4C, h, w]`.
///
/// Draws `y_T` and posterior noise from the seed's "noise" stream and the
/// latents from its "latent" stream. The final step is deterministic.
pub fn sample_wavelet(den: &dyn Denoiser, sched: &DiffusionSchedule, shape: &[usize], seed: u64) -> Result<Tensor> {
    if shape.len() != 4 || !shape[1].is_multiple_of(4) {
        return Err(Error::Shape(format!(
            "sample shape {shape:?} is not a packed subband batch"
        )));
    }
    let b = shape[0];
    let mut noise = RngStream::new(seed, "noise");
    let mut latent = RngStream::new(seed, "latent");
    let mut y = noise.normal_tensor(shape);
    for t in (1..=sched.steps).rev() {
        let ts = vec![t; b];
        let z = latent.normal_tensor(&[b, den.latent_dim()]);
        let y0 = den.denoise(&y, &z, &ts)?;
        if y0.shape() != shape {
            return Err(Error::Shape(format!(
                "denoiser returned {:?} for {:?}",
                y0.shape(),
                shape
            )));
        }
        if !y0.all_finite() {
            return Err(Error::NonFinite(format!(
                "denoiser output at step {t} of {}",
                sched.steps
            )));
        }
        y = if t > 1 {
            let eps = noise.normal_tensor(shape);
            sched.q_posterior_sample(&y0, &y, &ts, &eps)?
        } else {
            sched.q_posterior_mean(&y0, &y, &ts)?
        };
        if !y.all_finite() {
            return Err(Error::NonFinite(format!(
                "posterior sample at step {t} of {}",
                sched.steps
            )));
        }
    }
    Ok(y)
}

/// [`sample_wavelet`] followed by the inverse transform to pixel space.
pub fn sample(den: &dyn Denoiser, sched: &DiffusionSchedule, shape: &[usize], seed: u64) -> Result<Tensor> {
    let y = sample_wavelet(den, sched, shape, seed)?;
    wavelet::idwt_packed(&y)
}

/// Draws `n` pixel-space samples in batches of at most `chunk`.
///
/// `wavelet_shape` is the `[4C, h, w]` shape of one sample; batch `k` uses
/// its own seed derived from `(seed, k)`, so results do not depend on how
/// many batches run.
pub fn sample_many(
    den: &dyn Denoiser,
    sched: &DiffusionSchedule,
    n: usize,
    chunk: usize,
    wavelet_shape: &[usize],
    seed: u64,
) -> Result<Tensor> {
    if chunk == 0 || wavelet_shape.len() != 3 {
        return Err(Error::InvalidArgument(format!(
            "sample_many needs chunk > 0 and a [4C, h, w] shape (got {chunk}, {wavelet_shape:?})"
        )));
    }
    let base = RngStream::new(seed, "chunks");
    let mut parts = Vec::new();
    let mut done = 0;
    while done < n {
        let b = chunk.min(n - done);
        let k = done / chunk;
        let s = base.substream(&k.to_string()).next_u64();
        let mut shape = vec![b];
        shape.extend_from_slice(wavelet_shape);
        parts.push(sample(den, sched, &shape, s)?);
        done += b;
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Tensor::cat_batch(&refs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_telescopes() {
        let s = make_schedule(1, ScheduleKind::default_geometric()).unwrap();
        assert!((s.beta(1) - (1.0 - 1e-3)).abs() < 1e-15);
    }

    #[test]
    fn four_step_defaults() {
        let s = make_schedule(4, ScheduleKind::default_geometric()).unwrap();
        assert_eq!(s.alpha_bar(4), 1e-3);
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        // log-spaced: constant ratio between consecutive ᾱ
        let r1 = s.alpha_bar(2) / s.alpha_bar(1);
        let r2 = s.alpha_bar(3) / s.alpha_bar(2);
        assert!((r1 - r2).abs() < 1e-12);
    }

    #[test]
    fn all_kinds_monotone_and_in_range() {
        let kinds = [
            ScheduleKind::default_geometric(),
            ScheduleKind::LinearBeta {
                beta_start: 0.1,
                beta_end: 0.9,
            },
            ScheduleKind::Vp {
                beta_min: 0.1,
                beta_max: 20.0,
            },
        ];
        for kind in kinds {
            for steps in [1, 2, 4, 8, 16] {
                let s = make_schedule(steps, kind).unwrap();
                assert_eq!(s.alpha_bar(0), 1.0);
                for t in 1..=steps {
                    assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
                    assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                }
            }
        }
    }

    #[test]
    fn rejects_bad_params() {
        assert!(make_schedule(0, ScheduleKind::default_geometric()).is_err());
        let bad = ScheduleKind::GeometricAlphaBar {
            beta_min: 0.1,
            alpha_bar_final: 0.95,
        };
        assert!(make_schedule(4, bad).is_err());
        let bad = ScheduleKind::LinearBeta {
            beta_start: 0.1,
            beta_end: 1.0,
        };
        assert!(make_schedule(3, bad).is_err());
    }

    #[test]
    fn q_sample_limits() {
        let s = make_schedule(4, ScheduleKind::default_geometric()).unwrap();
        let y0 = Tensor::from_fn(&[2, 4, 2, 2], |i| i as f64 * 0.1);
        let eps = RngStream::new(0, "e").normal_tensor(&[2, 4, 2, 2]);
        assert_eq!(s.q_sample(&y0, &[0, 0], &eps).unwrap(), y0);
        let z = s.q_sample(&Tensor::zeros(&[2, 4, 2, 2]), &[3, 3], &eps).unwrap();
        assert!(z.max_abs_diff(&eps.scale((1.0 - s.alpha_bar(3)).sqrt())).unwrap() < 1e-15);
        assert!(s.q_sample(&y0, &[5, 1], &eps).is_err());
    }

    #[test]
    fn posterior_first_step_is_deterministic() {
        let s = make_schedule(4, ScheduleKind::default_geometric()).unwrap();
        assert_eq!(s.posterior_var(1), 0.0);
        let y0 = Tensor::from_fn(&[1, 4, 2, 2], |i| i as f64);
        let yt = RngStream::new(1, "y").normal_tensor(&[1, 4, 2, 2]);
        let noise = RngStream::new(2, "n").normal_tensor(&[1, 4, 2, 2]);
        let out = s.q_posterior_sample(&y0, &yt, &[1], &noise).unwrap();
        assert!(out.max_abs_diff(&y0).unwrap() < 1e-12);
        assert!(s.q_posterior_sample(&y0, &yt, &[0], &noise).is_err());
    }

    #[test]
    fn posterior_mean_on_noiseless_path() {
        let s = make_schedule(8, ScheduleKind::default_geometric()).unwrap();
        let y0 = Tensor::from_fn(&[1, 4, 1, 1], |i| 1.0 + i as f64);
        for t in 1..=8 {
            let yt = y0.scale(s.alpha_bar(t).sqrt());
            let m = s.q_posterior_mean(&y0, &yt, &[t]).unwrap();
            let expect = y0.scale(s.alpha_bar(t - 1).sqrt());
            assert!(m.max_abs_diff(&expect).unwrap() < 1e-12, "t={t}");
        }
    }

    struct Constant(Tensor);

    impl Denoiser for Constant {
        fn latent_dim(&self) -> usize {
            3
        }
        fn denoise(&self, _: &Tensor, _: &Tensor, _: &[usize]) -> Result<Tensor> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn single_step_sampler_returns_idwt_of_prediction() {
        let y = RngStream::new(3, "y").normal_tensor(&[2, 4, 3, 3]);
        let s = make_schedule(1, ScheduleKind::default_geometric()).unwrap();
        let den = Constant(y.clone());
        let x = sample(&den, &s, &[2, 4, 3, 3], 9).unwrap();
        let expect = wavelet::idwt_packed(&y).unwrap();
        assert!(x.max_abs_diff(&expect).unwrap() < 1e-12);
        assert_eq!(x.shape(), &[2, 1, 6, 6]);
    }

    #[test]
    fn sampler_call_count_and_determinism() {
        let y = RngStream::new(3, "y").normal_tensor(&[2, 8, 2, 2]);
        let den = Constant(y);
        for steps in [1, 2, 4] {
            let s = make_schedule(steps, ScheduleKind::default_geometric()).unwrap();
            let c = CountingDenoiser::new(&den);
            let a = sample(&c, &s, &[2, 8, 2, 2], 5).unwrap();
            assert_eq!(c.calls(), steps);
            let b = sample(&den, &s, &[2, 8, 2, 2], 5).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn sampler_rejects_nonfinite() {
        let den = Constant(Tensor::full(&[1, 4, 2, 2], f64::NAN));
        let s = make_schedule(2, ScheduleKind::default_geometric()).unwrap();
        assert!(matches!(sample(&den, &s, &[1, 4, 2, 2], 0), Err(Error::NonFinite(_))));
    }
}
