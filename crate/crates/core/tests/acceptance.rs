//! End-to-end acceptance checks; prints one PASS/FAIL line per criterion.

use std::collections::BTreeSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use wavediff::accounting::{generator_costs, pixel_unet_costs, Comparison, PixelUNetSpec};
use wavediff::autograd::{Graph, OP_NAMES};
use wavediff::diffusion::{make_schedule, sample, sample_many, CountingDenoiser, GeneratorDenoiser, ScheduleKind};
use wavediff::gradcheck::{model_cases, op_cases, run_case, GradcheckOptions};
use wavediff::io::{read_checkpoint, save_images, RunConfig};
use wavediff::networks::{preset, presets, Conditioning, FreqBottleneck, Generator, GeneratorSpec};
use wavediff::nn::ParamStore;
use wavediff::rng::RngStream;
use wavediff::training::{fit, FitOptions, FitSummary, TrainState};
use wavediff::{wavelet, Tensor};

type Outcome = Result<String, String>;
type Criterion = (usize, &'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn wavelet_exactness() -> Outcome {
    let t0 = Instant::now();
    let mut rng = RngStream::new(1, "acceptance/wavelet");
    let (mut worst_rec, mut worst_parseval) = (0f64, 0f64);
    for _ in 0..1000 {
        let b = 1 + rng.below(4) as usize;
        let c = 1 + rng.below(3) as usize;
        let h = 2 * (1 + rng.below(32) as usize);
        let w = 2 * (1 + rng.below(32) as usize);
        let scale = (rng.uniform() * 8.0 - 4.0).exp();
        let x = rng.normal_tensor(&[b, c, h, w]).scale(scale);
        let y = wavelet::dwt_packed(&x).map_err(e2s)?;
        let back = wavelet::idwt_packed(&y).map_err(e2s)?;
        worst_rec = worst_rec.max(back.max_abs_diff(&x).map_err(e2s)?);
        worst_parseval = worst_parseval.max((y.sq_norm() - x.sq_norm()).abs() / x.sq_norm());
    }
    let secs = t0.elapsed().as_secs_f64();
    let msg = format!("max recon err {worst_rec:.2e}, max Parseval rel err {worst_parseval:.2e}, {secs:.2}s");
    ensure(worst_rec < 1e-10 && worst_parseval < 1e-9 && secs < 10.0, msg.clone())?;
    Ok(msg)
}

fn gradient_correctness() -> Outcome {
    let t0 = Instant::now();
    let cases = op_cases(0);
    let mut seen = BTreeSet::new();
    for c in &cases {
        seen.extend(c.ops().map_err(e2s)?);
    }
    let missing: Vec<_> = OP_NAMES.iter().filter(|n| !seen.contains(*n)).collect();
    ensure(missing.is_empty(), format!("ops without a case: {missing:?}"))?;
    let mut worst = 0f64;
    let mut failed = Vec::new();
    let op_opts = GradcheckOptions::default();
    let model_opts = GradcheckOptions {
        coords_per_tensor: 6,
        ..GradcheckOptions::default()
    };
    let models = model_cases(0).map_err(e2s)?;
    let all = cases
        .iter()
        .map(|c| (c, &op_opts))
        .chain(models.iter().map(|c| (c, &model_opts)));
    for (case, opts) in all {
        let rep = run_case(case, opts).map_err(e2s)?;
        worst = worst.max(rep.max_rel_err());
        if !rep.passed() {
            failed.push(case.name.clone());
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let msg = format!(
        "{} op cases + {} network cases, max rel err {worst:.2e}, {secs:.1}s",
        cases.len(),
        models.len()
    );
    ensure(failed.is_empty() && secs < 300.0, format!("{msg}; failed {failed:?}"))?;
    Ok(msg)
}

fn posterior_consistency() -> Outcome {
    let t0 = Instant::now();
    const N: usize = 100_000;
    let y0_vals = [-1.5, -0.3, 0.4, 2.0];
    let d = y0_vals.len();
    let y0 = Tensor::from_fn(&[N, d], |i| y0_vals[i % d]);
    let mut worst_z = 0f64;
    let mut checks = 0;
    for steps in [2, 4, 8] {
        let sched = make_schedule(steps, ScheduleKind::default_geometric()).map_err(e2s)?;
        for t in 1..=steps {
            let mut rng = RngStream::new(7, &format!("acceptance/posterior/{steps}/{t}"));
            let ts = vec![t; N];
            let yt = sched.q_sample(&y0, &ts, &rng.normal_tensor(&[N, d])).map_err(e2s)?;
            let prev = sched
                .q_posterior_sample(&y0, &yt, &ts, &rng.normal_tensor(&[N, d]))
                .map_err(e2s)?;
            let ab = sched.alpha_bar(t - 1);
            let var = 1.0 - ab;
            for (j, &v0) in y0_vals.iter().enumerate() {
                let col: Vec<f64> = prev.data().iter().skip(j).step_by(d).copied().collect();
                let mean = col.iter().sum::<f64>() / N as f64;
                let s2 = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (N - 1) as f64;
                let mu = ab.sqrt() * v0;
                checks += 2;
                if var == 0.0 {
                    ensure(
                        (mean - mu).abs() < 1e-12 && s2 < 1e-24,
                        format!("T={steps} t={t}: expected a point mass at {mu}, got mean {mean} var {s2}"),
                    )?;
                    continue;
                }
                let z_mean = (mean - mu).abs() / (var / N as f64).sqrt();
                let z_var = (s2 - var).abs() / (var * (2.0 / (N - 1) as f64).sqrt());
                worst_z = worst_z.max(z_mean).max(z_var);
                ensure(
                    z_mean <= 4.0 && z_var <= 4.0,
                    format!("T={steps} t={t} dim {j}: mean z {z_mean:.2}, var z {z_var:.2}"),
                )?;
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let msg = format!("{checks} moment checks, worst deviation {worst_z:.2} standard errors, {secs:.1}s");
    ensure(secs < 120.0, msg.clone())?;
    Ok(msg)
}

fn architectural_contract() -> Outcome {
    let mut rng = RngStream::new(3, "acceptance/arch");
    let mut store = ParamStore::new();
    let fb = FreqBottleneck::new(&mut store, "fb", 16, 32, 24, &mut rng);
    let mut g = Graph::inference();
    let p = store.bind(&mut g, false);
    let c = Conditioning {
        temb: g.constant(rng.normal_tensor(&[2, 32])),
        zemb: g.constant(rng.normal_tensor(&[2, 24])),
    };
    let x = rng.normal_tensor(&[2, 16, 8, 8]);
    let xv = g.constant(x.clone());
    let yv = fb.forward(&mut g, &p, xv, c).map_err(e2s)?;
    let before = wavelet::dwt(&x).map_err(e2s)?;
    let after = wavelet::dwt(g.value(yv)).map_err(e2s)?;
    let mut high_err = 0f64;
    for (a, b) in [
        (&before.lh, &after.lh),
        (&before.hl, &after.hl),
        (&before.hh, &after.hh),
    ] {
        high_err = high_err.max(a.max_abs_diff(b).map_err(e2s)?);
    }
    ensure(
        high_err <= 1e-10,
        format!("bottleneck changed high subbands by {high_err:e}"),
    )?;

    let mut shapes = 0;
    for pr in presets() {
        let spec = pr.spec.with_base_channels(8);
        let mut store = ParamStore::new();
        let gen = Generator::new(&spec, &mut store, &mut RngStream::new(0, "init")).map_err(e2s)?;
        let r = spec.resolution();
        let y = rng.normal_tensor(&[1, spec.in_channels(), r, r]);
        let z = rng.normal_tensor(&[1, spec.latent_dim]);
        let mut g = Graph::inference();
        let p = store.bind(&mut g, false);
        let yv = g.constant(y.clone());
        let (out, trace) = gen.forward_traced(&mut g, &p, yv, &z, &[pr.steps]).map_err(e2s)?;
        ensure(
            trace.highs_pushed == spec.levels() - 1
                && trace.highs_popped == trace.highs_pushed
                && trace.skips_popped == trace.skips_pushed,
            format!("{}: unbalanced stash {trace:?}", pr.name),
        )?;
        ensure(
            g.shape(out) == y.shape(),
            format!("{}: output {:?} for input {:?}", pr.name, g.shape(out), y.shape()),
        )?;
        shapes += 1;
    }
    Ok(format!(
        "high-band error {high_err:.1e}, stash balanced and output shape preserved for {shapes} presets"
    ))
}

fn compute_reduction() -> Outcome {
    let desk = Comparison::for_spec(&GeneratorSpec::desk());
    let ratio = desk.flops_ratio();
    ensure(ratio >= 3.0, format!("desk pixel/wavelet FLOPs ratio {ratio:.2} < 3"))?;
    let ours = generator_costs(&preset("cifar10").map_err(e2s)?.spec);
    let base = pixel_unet_costs(&PixelUNetSpec::ddgan_cifar10());
    let cifar = base.flops as f64 / ours.flops as f64;
    let reference = 7.05 / 1.67;
    let dev = cifar / reference - 1.0;
    let msg = format!(
        "desk ratio {ratio:.2}; CIFAR-10 baseline/ours {cifar:.2} vs {reference:.2} ({:+.1}%)",
        100.0 * dev
    );
    ensure(dev.abs() <= 0.25, msg.clone())?;
    Ok(msg)
}

fn few_step_contract() -> Outcome {
    let mut parts = Vec::new();
    for (name, steps) in [("cifar10", 4), ("celeba256", 2)] {
        let pr = preset(name).map_err(e2s)?;
        ensure(pr.steps == steps, format!("{name} preset uses T={}", pr.steps))?;
        let spec = pr.spec.with_base_channels(8);
        let mut store = ParamStore::new();
        let gen = Generator::new(&spec, &mut store, &mut RngStream::new(0, "init")).map_err(e2s)?;
        let inner = GeneratorDenoiser {
            generator: &gen,
            params: &store,
        };
        let den = CountingDenoiser::new(&inner);
        let sched = make_schedule(pr.steps, ScheduleKind::default_geometric()).map_err(e2s)?;
        let r = spec.resolution();
        sample(&den, &sched, &[2, spec.in_channels(), r, r], 5).map_err(e2s)?;
        ensure(
            den.calls() == steps,
            format!("{name}: {} calls for T={steps}", den.calls()),
        )?;
        parts.push(format!("{name} T={steps}: {} calls", den.calls()));
    }
    Ok(parts.join(", "))
}

/// Reference desk run on the two-mode dataset.
const REFERENCE: &str = "\
model.base_channels = 16
diffusion.steps = 4
data.source = two-mode-gaussian-images
data.resolution = 32
data.count = 1024
train.batch = 16
train.epochs = 30
train.lambda_rec = 1
train.ema_decay = 0.99
train.eval_every = 640
train.eval_samples = 256
train.ckpt_every = 0
train.seed = 0
";

/// Half-width of the centered moving average applied to per-step `L_rec`.
const SMOOTH: usize = 25;

fn smoothed_at(values: &[f64], center: usize) -> f64 {
    let lo = center.saturating_sub(SMOOTH);
    let hi = (center + SMOOTH).min(values.len());
    values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
}

fn end_to_end(run: &Result<(FitSummary, f64), String>) -> Outcome {
    let (summary, secs) = run.as_ref().map_err(Clone::clone)?;
    let rec: Vec<f64> = summary.history.iter().map(|r| r.l_rec).collect();
    ensure(rec.len() > 200, format!("only {} steps", rec.len()))?;
    let early = smoothed_at(&rec, 100);
    let late = rec[rec.len() - 2 * SMOOTH..].iter().sum::<f64>() / (2 * SMOOTH) as f64;
    let drop = 1.0 - late / early;
    let last = summary.evals.last().ok_or("no evaluation")?;
    let msg = format!(
        "{} steps in {:.0}s; smoothed L_rec {early:.4} -> {late:.4} ({:.0}% lower); \
         min mode share {:.3}; moment err {:.4}",
        rec.len(),
        secs,
        100.0 * drop,
        last.mode_coverage,
        last.moment_err
    );
    ensure(
        *secs < 1800.0 && drop >= 0.5 && last.mode_coverage >= 0.25 && last.moment_err <= 0.1,
        msg.clone(),
    )?;
    Ok(msg)
}

const SMOKE: &str = "\
model.base_channels = 8
model.channel_mult = 1,2
model.attention_resolutions = none
data.resolution = 8
data.count = 32
train.batch = 8
train.epochs = 2
train.eval_every = 4
train.eval_samples = 8
train.ckpt_every = 4
train.seed = 3
";

fn train_and_sample(cfg: &RunConfig, dir: &Path, stop_at: Option<u64>, resume: Option<&Path>) -> Result<(), String> {
    let data = cfg.dataset().map_err(e2s)?;
    let sched = cfg.schedule().map_err(e2s)?;
    let (models, mut state) = match resume {
        Some(p) => TrainState::from_checkpoint(&cfg.model, &cfg.train, &read_checkpoint(p).map_err(e2s)?),
        None => TrainState::init(&cfg.model, &cfg.train),
    }
    .map_err(e2s)?;
    let opts = FitOptions {
        out_dir: dir.to_path_buf(),
        config_text: cfg.text.clone(),
        stop_at,
    };
    fit(&models, &mut state, &data, &sched, &cfg.train, &opts).map_err(e2s)?;
    let den = GeneratorDenoiser {
        generator: &models.generator,
        params: state.sampling_params(true),
    };
    let spec = &models.generator.spec;
    let r = spec.resolution();
    let x = sample_many(&den, &sched, 6, 4, &[spec.in_channels(), r, r], 17).map_err(e2s)?;
    save_images(&x, &dir.join("samples")).map_err(e2s)?;
    Ok(())
}

fn tree_bytes(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).map_err(e2s)? {
            let p = e.map_err(e2s)?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).map_err(e2s)?.display().to_string();
                out.push((rel, fs::read(&p).map_err(e2s)?));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn determinism() -> Outcome {
    let cfg = RunConfig::parse_with_seed_fallback(SMOKE, None).map_err(e2s)?;
    let tmp = tempfile::tempdir().map_err(e2s)?;
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    train_and_sample(&cfg, &a, None, None)?;
    train_and_sample(&cfg, &b, None, None)?;
    let ta = tree_bytes(&a)?;
    ensure(ta == tree_bytes(&b)?, "identical seeds produced different files")?;

    train_and_sample(&cfg, &c, Some(4), None)?;
    train_and_sample(&cfg, &c, None, Some(&c.join("ckpt_4.wdif")))?;
    let tc = tree_bytes(&c)?;
    ensure(ta == tc, "resumed run differs from the uninterrupted run")?;
    Ok(format!(
        "{} files bitwise identical across reruns and a resume at step 4",
        ta.len()
    ))
}

fn loss_identity(run: &Result<(FitSummary, f64), String>, lambda: f64) -> Outcome {
    let (summary, _) = run.as_ref().map_err(Clone::clone)?;
    ensure(lambda == 1.0, format!("default lambda_rec is {lambda}"))?;
    let worst = summary
        .history
        .iter()
        .map(|r| (r.l_g_total - (r.l_adv_g + lambda * r.l_rec)).abs())
        .fold(0f64, f64::max);
    let msg = format!(
        "{} steps, max |L_G - (L_adv + λ·L_rec)| = {worst:.1e}, λ = {lambda}",
        summary.history.len()
    );
    ensure(worst <= 1e-12, msg.clone())?;
    Ok(msg)
}

fn reference_run() -> Result<(FitSummary, f64), String> {
    let cfg = RunConfig::parse_with_seed_fallback(REFERENCE, None).map_err(e2s)?;
    let data = cfg.dataset().map_err(e2s)?;
    let sched = cfg.schedule().map_err(e2s)?;
    let tmp = tempfile::tempdir().map_err(e2s)?;
    let t0 = Instant::now();
    let (models, mut state) = TrainState::init(&cfg.model, &cfg.train).map_err(e2s)?;
    let opts = FitOptions {
        out_dir: tmp.path().to_path_buf(),
        config_text: cfg.text.clone(),
        stop_at: None,
    };
    let summary = fit(&models, &mut state, &data, &sched, &cfg.train, &opts).map_err(e2s)?;
    Ok((summary, t0.elapsed().as_secs_f64()))
}

fn guarded<T>(f: impl FnOnce() -> Result<T, String>) -> Result<T, String> {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into())),
    }
}

fn report(id: usize, name: &str, outcome: Outcome) -> bool {
    match outcome {
        Ok(msg) => {
            println!("PASS {id} {name}: {msg}");
            true
        }
        Err(msg) => {
            println!("FAIL {id} {name}: {msg}");
            false
        }
    }
}

fn main() -> ExitCode {
    // `cargo test` passes harness flags such as `--list` or a name filter.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let filter = args.iter().find(|a| !a.starts_with('-')).cloned();
    let selected = |id: usize| filter.as_deref().is_none_or(|f| f == id.to_string());

    let quick: [Criterion; 7] = [
        (1, "wavelet exactness", wavelet_exactness),
        (2, "gradient correctness", gradient_correctness),
        (3, "posterior consistency", posterior_consistency),
        (4, "architectural contract", architectural_contract),
        (5, "compute reduction", compute_reduction),
        (6, "few-step contract", few_step_contract),
        (8, "determinism", determinism),
    ];
    let mut all_ok = true;
    for (id, name, f) in quick {
        if selected(id) {
            all_ok &= report(id, name, guarded(f));
        }
    }
    if selected(7) || selected(9) {
        let run = guarded(reference_run);
        let lambda = wavediff::training::TrainConfig::default().lambda_rec;
        if selected(7) {
            all_ok &= report(7, "end-to-end learning", guarded(|| end_to_end(&run)));
        }
        if selected(9) {
            all_ok &= report(9, "loss identities", guarded(|| loss_identity(&run, lambda)));
        }
    }
    if all_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
