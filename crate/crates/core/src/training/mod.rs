//! Adversarial training in wavelet space: losses, lazy R1, Adam, EMA and
//! the per-iteration step.

mod fit;

pub use fit::{evaluate, fit, steps_per_epoch, EvalRecord, FitOptions, FitSummary, METRICS_HEADER};

use crate::autograd::{Graph, Var};
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::io::checkpoint::Checkpoint;
use crate::networks::{Discriminator, DiscriminatorSpec, Generator, GeneratorSpec};
use crate::nn::ParamStore;
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::wavelet;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_g: f64,
    pub lr_d: f64,
    pub batch: usize,
    pub epochs: usize,
    pub lambda_rec: f64,
    pub ema_decay: f64,
    pub r1_gamma: f64,
    /// R1 is applied on steps where `step % r1_every == 0`.
    pub r1_every: usize,
    pub seed: u64,
    /// Reuse the discriminator step's `(t, y_t, z)` draw for the generator step.
    pub reuse_draws: bool,
    /// Evaluate (and write a metrics row) every this many steps; 0 disables.
    pub eval_every: usize,
    pub eval_samples: usize,
    /// Checkpoint every this many steps; 0 writes only the final checkpoint.
    pub ckpt_every: usize,
    pub sample_with_ema: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_g: 1.6e-4,
            lr_d: 1.25e-4,
            batch: 16,
            epochs: 200,
            lambda_rec: 1.0,
            ema_decay: 0.999,
            r1_gamma: 0.05,
            r1_every: 4,
            seed: 0,
            reuse_draws: true,
            eval_every: 100,
            eval_samples: 64,
            ckpt_every: 1000,
            sample_with_ema: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch == 0 || self.epochs == 0 || self.r1_every == 0 {
            return bad("train.batch, train.epochs and train.r1_every must be positive");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("train.ema_decay must lie in [0, 1)");
        }
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.lambda_rec < 0.0 || self.r1_gamma < 0.0 {
            return bad("train.lambda_rec and train.r1_gamma must be nonnegative");
        }
        Ok(())
    }
}

/// Bias-corrected Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, params: &[Tensor]) -> Self {
        Adam {
            lr,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam: {} moments, {} params, {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::Shape(format!(
                    "adam: param {:?} grad {:?} moment {:?}",
                    p.shape(),
                    g.shape(),
                    m.shape()
                )));
            }
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let mh = *mv / c1;
                let vh = *vv / c2;
                *pv -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// `shadow ← decay·shadow + (1 − decay)·params`.
pub fn ema_update(shadow: &mut ParamStore, params: &ParamStore, decay: f64) -> Result<()> {
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::InvalidArgument(format!("EMA decay {decay} outside [0, 1)")));
    }
    if shadow.len() != params.len() {
        return Err(Error::Shape("EMA shadow and parameters differ in length".into()));
    }
    for (s, p) in shadow.tensors_mut().iter_mut().zip(params.tensors()) {
        if s.shape() != p.shape() {
            return Err(Error::Shape(format!("EMA shape {:?} vs {:?}", s.shape(), p.shape())));
        }
        for (a, &b) in s.data_mut().iter_mut().zip(p.data()) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
    Ok(())
}

/// `(γ/2)·E_b‖∇_{y_prev} D‖²` built on the graph so it can be
/// differentiated with respect to the discriminator parameters.
///
/// `logits` must be `[B, 1]` (or any shape with leading batch axis) computed
/// from the leaf `y_prev`.
pub fn r1_penalty(g: &mut Graph, logits: Var, y_prev: Var, gamma: f64) -> Result<Var> {
    let b = g.shape(y_prev)[0] as f64;
    let total = g.sum(logits);
    let grad = g.grad_graph(total, &[y_prev])?[0];
    let sq = g.mul(grad, grad)?;
    let s = g.sum(sq);
    Ok(g.scale(s, 0.5 * gamma / b))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub epoch: u64,
    pub l_adv_d: f64,
    pub l_adv_g: f64,
    pub l_rec: f64,
    pub l_g_total: f64,
    /// Zero on steps without the lazy penalty.
    pub r1: f64,
}

/// Network structure (parameters live in [`TrainState`]).
pub struct Models {
    pub generator: Generator,
    pub discriminator: Discriminator,
}

/// Everything needed to continue training bit-exactly.
///
/// Per-step randomness is drawn from substreams keyed by `(seed, step)`, so
/// the step counter and seed fully determine the RNG state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub g: ParamStore,
    pub d: ParamStore,
    pub ema: ParamStore,
    pub adam_g: Adam,
    pub adam_d: Adam,
    pub step: u64,
    pub seed: u64,
    /// Value of the most recent lazy R1 penalty.
    pub last_r1: f64,
}

impl TrainState {
    /// Builds fresh networks from the seed's "init" stream.
    pub fn init(spec: &GeneratorSpec, cfg: &TrainConfig) -> Result<(Models, TrainState)> {
        cfg.validate()?;
        let mut rng = RngStream::new(cfg.seed, "init");
        let mut g = ParamStore::new();
        let generator = Generator::new(spec, &mut g, &mut rng)?;
        let mut d = ParamStore::new();
        let discriminator = Discriminator::new(&DiscriminatorSpec::matching(spec), &mut d, &mut rng)?;
        let state = TrainState {
            ema: g.clone(),
            adam_g: Adam::new(cfg.lr_g, g.tensors()),
            adam_d: Adam::new(cfg.lr_d, d.tensors()),
            g,
            d,
            step: 0,
            seed: cfg.seed,
            last_r1: 0.0,
        };
        Ok((
            Models {
                generator,
                discriminator,
            },
            state,
        ))
    }

    /// Parameters used for sampling.
    pub fn sampling_params(&self, use_ema: bool) -> &ParamStore {
        if use_ema {
            &self.ema
        } else {
            &self.g
        }
    }
}

fn split_u64(v: u64) -> Tensor {
    Tensor::new(&[2], vec![(v >> 32) as f64, (v & 0xffff_ffff) as f64]).expect("two halves")
}

fn join_u64(ck: &Checkpoint, name: &str) -> Result<u64> {
    let t = ck.require(name)?;
    match t.data() {
        [hi, lo] if *hi >= 0.0 && *lo >= 0.0 && *hi < 4294967296.0 && *lo < 4294967296.0 => {
            Ok(((*hi as u64) << 32) | *lo as u64)
        }
        _ => Err(Error::InvalidArgument(format!("checkpoint tensor {name} is not a u64"))),
    }
}

/// The run seed stored in a training checkpoint.
pub fn checkpoint_seed(ck: &Checkpoint) -> Result<u64> {
    join_u64(ck, "meta/seed")
}

fn restore_store(store: &mut ParamStore, ck: &Checkpoint, prefix: &str) -> Result<()> {
    for name in store.names().to_vec() {
        store.set(&name, ck.require(&format!("{prefix}{name}"))?.clone())?;
    }
    Ok(())
}

fn restore_moments(dst: &mut [Tensor], names: &[String], ck: &Checkpoint, prefix: &str) -> Result<()> {
    for (t, name) in dst.iter_mut().zip(names) {
        let src = ck.require(&format!("{prefix}{name}"))?;
        if src.shape() != t.shape() {
            return Err(Error::Shape(format!(
                "{prefix}{name}: {:?} vs {:?}",
                src.shape(),
                t.shape()
            )));
        }
        *t = src.clone();
    }
    Ok(())
}

impl TrainState {
    /// Every tensor of the state under `g/`, `d/`, `ema/`, `adam_g/{m,v}/`,
    /// `adam_d/{m,v}/` and `meta/` names.
    pub fn to_checkpoint(&self, config: &str) -> Checkpoint {
        let mut tensors = Vec::new();
        for (prefix, store) in [("g/", &self.g), ("d/", &self.d), ("ema/", &self.ema)] {
            tensors.extend(store.iter().map(|(n, t)| (format!("{prefix}{n}"), t.clone())));
        }
        for (prefix, adam, store) in [("adam_g", &self.adam_g, &self.g), ("adam_d", &self.adam_d, &self.d)] {
            for (kind, moments) in [("m", &adam.m), ("v", &adam.v)] {
                for (name, t) in store.names().iter().zip(moments) {
                    tensors.push((format!("{prefix}/{kind}/{name}"), t.clone()));
                }
            }
            tensors.push((format!("meta/{prefix}_t"), split_u64(adam.t)));
        }
        tensors.push(("meta/step".into(), split_u64(self.step)));
        tensors.push(("meta/seed".into(), split_u64(self.seed)));
        tensors.push(("meta/last_r1".into(), Tensor::scalar(self.last_r1)));
        Checkpoint {
            config: config.to_string(),
            tensors,
        }
    }

    /// Rebuilds networks for `spec` and loads every state tensor from `ck`.
    ///
    /// Learning rates come from `cfg`; tensors the networks do not declare
    /// are rejected.
    pub fn from_checkpoint(spec: &GeneratorSpec, cfg: &TrainConfig, ck: &Checkpoint) -> Result<(Models, TrainState)> {
        let (models, mut st) = TrainState::init(spec, cfg)?;
        restore_store(&mut st.g, ck, "g/")?;
        restore_store(&mut st.d, ck, "d/")?;
        restore_store(&mut st.ema, ck, "ema/")?;
        let g_names = st.g.names().to_vec();
        let d_names = st.d.names().to_vec();
        restore_moments(&mut st.adam_g.m, &g_names, ck, "adam_g/m/")?;
        restore_moments(&mut st.adam_g.v, &g_names, ck, "adam_g/v/")?;
        restore_moments(&mut st.adam_d.m, &d_names, ck, "adam_d/m/")?;
        restore_moments(&mut st.adam_d.v, &d_names, ck, "adam_d/v/")?;
        st.adam_g.t = join_u64(ck, "meta/adam_g_t")?;
        st.adam_d.t = join_u64(ck, "meta/adam_d_t")?;
        st.step = join_u64(ck, "meta/step")?;
        st.seed = join_u64(ck, "meta/seed")?;
        st.last_r1 = ck.require("meta/last_r1")?.item()?;
        let expected = 4 * g_names.len() + 3 * d_names.len() + 5;
        if ck.tensors.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "checkpoint has {} tensors, this model expects {expected}",
                ck.tensors.len()
            )));
        }
        Ok((models, st))
    }
}

struct Draw {
    t: Vec<usize>,
    y_t: Tensor,
    z: Tensor,
    /// Standard-normal noise for the fake posterior sample.
    fake_noise: Tensor,
}

fn draw(rng: &mut RngStream, y0: &Tensor, sched: &DiffusionSchedule, latent_dim: usize) -> Result<Draw> {
    let b = y0.shape()[0];
    let t: Vec<usize> = (0..b).map(|_| 1 + rng.below(sched.steps as u64) as usize).collect();
    let eps = rng.normal_tensor(y0.shape());
    let y_t = sched.q_sample(y0, &t, &eps)?;
    let z = rng.normal_tensor(&[b, latent_dim]);
    let fake_noise = rng.normal_tensor(y0.shape());
    Ok(Draw { t, y_t, z, fake_noise })
}

/// `c0·y0' + ct·y_t + σ·noise` on the graph, differentiable in `y0'`.
fn posterior_on_graph(g: &mut Graph, sched: &DiffusionSchedule, y0p: Var, d: &Draw) -> Result<Var> {
    let c0: Vec<f64> = d.t.iter().map(|&t| sched.posterior_coef0(t)).collect();
    let zeros = Tensor::zeros(d.y_t.shape());
    let rest = sched.q_posterior_sample(&zeros, &d.y_t, &d.t, &d.fake_noise)?;
    let scaled = g.scale_rows(y0p, &c0)?;
    let rest = g.constant(rest);
    g.add(scaled, rest)
}

fn check_finite(step: u64, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("step {step}: {what} = {v}")))
    }
}

/// One discriminator update followed by one generator update on pixel batch
/// `x0` (`[B, C, H, W]`, values in [-1, 1]).
pub fn train_step(
    models: &Models,
    state: &mut TrainState,
    x0: &Tensor,
    sched: &DiffusionSchedule,
    cfg: &TrainConfig,
) -> Result<LossReport> {
    let step = state.step;
    let gen = &models.generator;
    let disc = &models.discriminator;
    let mut rng = RngStream::new(state.seed, "train").substream(&step.to_string());
    let y0 = wavelet::dwt_packed(x0)?;
    let dr = draw(&mut rng, &y0, sched, gen.spec.latent_dim)?;
    let real_noise = rng.normal_tensor(y0.shape());
    let y_prev_real = sched.q_posterior_sample(&y0, &dr.y_t, &dr.t, &real_noise)?;

    // Generator forward, kept for the generator step when draws are reused.
    let mut gg = Graph::new();
    let pg = state.g.bind(&mut gg, true);
    let ytv = gg.constant(dr.y_t.clone());
    let y0p = gen.forward(&mut gg, &pg, ytv, &dr.z, &dr.t)?;
    let y_prev_fake = sched.q_posterior_sample(gg.value(y0p), &dr.y_t, &dr.t, &dr.fake_noise)?;

    // Discriminator step.
    let mut gd = Graph::new();
    let pd = state.d.bind(&mut gd, true);
    let real = gd.leaf(y_prev_real);
    let ytd = gd.constant(dr.y_t.clone());
    let real_logits = disc.forward(&mut gd, &pd, real, ytd, &dr.t)?;
    let neg = gd.scale(real_logits, -1.0);
    let sp = gd.softplus(neg);
    let l_real = gd.mean(sp);
    let fake = gd.constant(y_prev_fake);
    let fake_logits = disc.forward(&mut gd, &pd, fake, ytd, &dr.t)?;
    let sp = gd.softplus(fake_logits);
    let l_fake = gd.mean(sp);
    let l_adv_d = gd.add(l_real, l_fake)?;
    let lazy = cfg.r1_gamma > 0.0 && step.is_multiple_of(cfg.r1_every as u64);
    let (d_total, r1) = if lazy {
        let r1 = r1_penalty(&mut gd, real_logits, real, cfg.r1_gamma)?;
        (gd.add(l_adv_d, r1)?, gd.value(r1).item()?)
    } else {
        (l_adv_d, 0.0)
    };
    let l_adv_d_val = gd.value(l_adv_d).item()?;
    check_finite(step, "L_adv_D", l_adv_d_val)?;
    check_finite(step, "R1", r1)?;
    let mut grads = gd.backward(d_total)?;
    let d_grads = pd.collect_grads(&gd, &mut grads);
    drop(gd);
    state.adam_d.step(state.d.tensors_mut(), &d_grads)?;
    if lazy {
        state.last_r1 = r1;
    }

    // Generator step against the updated discriminator.
    let (mut gg, pg, y0p, dr) = if cfg.reuse_draws {
        (gg, pg, y0p, dr)
    } else {
        drop(gg);
        let dr = draw(&mut rng, &y0, sched, gen.spec.latent_dim)?;
        let mut gg = Graph::new();
        let pg = state.g.bind(&mut gg, true);
        let ytv = gg.constant(dr.y_t.clone());
        let y0p = gen.forward(&mut gg, &pg, ytv, &dr.z, &dr.t)?;
        (gg, pg, y0p, dr)
    };
    let pdc = state.d.bind(&mut gg, false);
    let fake = posterior_on_graph(&mut gg, sched, y0p, &dr)?;
    let ytv = gg.constant(dr.y_t.clone());
    let logits = disc.forward(&mut gg, &pdc, fake, ytv, &dr.t)?;
    let neg = gg.scale(logits, -1.0);
    let sp = gg.softplus(neg);
    let l_adv_g = gg.mean(sp);
    let y0c = gg.constant(y0);
    let diff = gg.sub(y0p, y0c)?;
    let ad = gg.abs(diff);
    let l_rec = gg.mean(ad);
    let weighted = gg.scale(l_rec, cfg.lambda_rec);
    let l_g = gg.add(l_adv_g, weighted)?;
    let report = LossReport {
        step,
        epoch: 0,
        l_adv_d: l_adv_d_val,
        l_adv_g: gg.value(l_adv_g).item()?,
        l_rec: gg.value(l_rec).item()?,
        l_g_total: gg.value(l_g).item()?,
        r1,
    };
    check_finite(step, "L_G", report.l_g_total)?;
    let mut grads = gg.backward(l_g)?;
    let g_grads = pg.collect_grads(&gg, &mut grads);
    drop(gg);
    state.adam_g.step(state.g.tensors_mut(), &g_grads)?;
    ema_update(&mut state.ema, &state.g, cfg.ema_decay)?;
    state.step += 1;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_grad_is_noop() {
        let mut p = vec![Tensor::from_fn(&[3], |i| i as f64)];
        let before = p.clone();
        let mut a = Adam::new(0.1, &p);
        a.step(&mut p, &[Tensor::zeros(&[3])]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_is_sign_step() {
        let mut p = vec![Tensor::zeros(&[3])];
        let mut a = Adam::new(0.01, &p);
        a.step(&mut p, &[Tensor::new(&[3], vec![2.0, -0.5, 1e-3]).unwrap()])
            .unwrap();
        for (v, s) in p[0].data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((v - s * 0.01).abs() < 1e-7, "{v}");
        }
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut p = vec![Tensor::zeros(&[3])];
        let mut a = Adam::new(0.01, &p);
        assert!(a.step(&mut p, &[Tensor::zeros(&[2])]).is_err());
    }

    #[test]
    fn ema_decay_zero_copies() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::zeros(&[2]));
        let mut p = ParamStore::new();
        p.add("a", Tensor::ones(&[2]));
        ema_update(&mut s, &p, 0.0).unwrap();
        assert_eq!(s.tensors(), p.tensors());
        assert!(ema_update(&mut s, &p, 1.0).is_err());
    }

    #[test]
    fn ema_converges_geometrically() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::zeros(&[1]));
        let mut p = ParamStore::new();
        p.add("a", Tensor::ones(&[1]));
        let decay: f64 = 0.9;
        for n in 1..=20 {
            ema_update(&mut s, &p, decay).unwrap();
            let err = 1.0 - s.tensors()[0].data()[0];
            assert!((err - decay.powi(n)).abs() < 1e-12);
        }
    }

    #[test]
    fn r1_of_linear_and_constant_critics() {
        let gamma = 0.3;
        let y = RngStream::new(0, "y").normal_tensor(&[2, 3, 2, 2]);
        let w = RngStream::new(1, "w").normal_tensor(&[1, 3, 2, 2]);
        // linear: D(y) = <w, y> per sample
        let mut g = Graph::new();
        let yv = g.leaf(y.clone());
        let wv = g.constant(w.clone());
        let conv = g.conv2d(yv, wv, crate::kernels::ConvGeom::new(1, 0)).unwrap();
        let logits = g.reshape(conv, &[2, 1]).unwrap();
        let r1 = r1_penalty(&mut g, logits, yv, gamma).unwrap();
        let expect = 0.5 * gamma * w.sq_norm();
        assert!((g.value(r1).item().unwrap() - expect).abs() < 1e-12);
        // constant
        let mut g = Graph::new();
        let yv = g.leaf(y);
        let c = g.constant(Tensor::ones(&[2, 1]));
        let r1 = r1_penalty(&mut g, c, yv, gamma).unwrap();
        assert_eq!(g.value(r1).item().unwrap(), 0.0);
    }
}
