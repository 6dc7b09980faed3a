//! Epoch loop with periodic evaluation, metrics CSV and checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{train_step, LossReport, Models, TrainConfig, TrainState};
use crate::diffusion::{sample_many, DiffusionSchedule, GeneratorDenoiser};
use crate::error::{Error, Result};
use crate::io::checkpoint::{write_checkpoint, DType};
use crate::io::dataset::{mode_coverage, moment_error, Dataset};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "step,epoch,L_adv_D,L_adv_G,L_rec,r1,mode_coverage,moment_err";

/// Largest batch pushed through the sampler at once during evaluation.
const EVAL_CHUNK: usize = 32;

#[derive(Clone, Debug)]
pub struct FitOptions {
    /// Receives `metrics.csv` and `ckpt_{step}.wdif`.
    pub out_dir: PathBuf,
    /// Stored verbatim in every checkpoint.
    pub config_text: String,
    /// Stop (and checkpoint) once this many steps are complete, as if
    /// interrupted.
    pub stop_at: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub step: u64,
    pub epoch: u64,
    pub losses: LossReport,
    /// Last lazy R1 value at evaluation time.
    pub r1: f64,
    /// NaN when the dataset has no labels.
    pub mode_coverage: f64,
    pub moment_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct FitSummary {
    /// Losses of every step run by this call.
    pub history: Vec<LossReport>,
    pub evals: Vec<EvalRecord>,
    pub checkpoints: Vec<PathBuf>,
}

/// Batches per epoch; a trailing partial batch is dropped.
pub fn steps_per_epoch(n: usize, batch: usize) -> usize {
    (n / batch.min(n)).max(1)
}

fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    RngStream::new(seed, "data")
        .substream(&format!("epoch{epoch}"))
        .shuffle(&mut order);
    order
}

fn gather(images: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let parts = idx
        .iter()
        .map(|&i| images.narrow_batch(i, 1))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = parts.iter().collect();
    Tensor::cat_batch(&refs)
}

fn csv_row(e: &EvalRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        e.step, e.epoch, e.losses.l_adv_d, e.losses.l_adv_g, e.losses.l_rec, e.r1, e.mode_coverage, e.moment_err
    )
}

/// Prepares `metrics.csv`: fresh runs start from the header, resumed runs
/// keep only rows up to the resumed step.
fn open_metrics(path: &Path, resumed_at: u64) -> Result<String> {
    let mut out = format!("{METRICS_HEADER}\n");
    if resumed_at == 0 {
        return Ok(out);
    }
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: "metrics header differs from the expected schema".into(),
        });
    }
    for line in lines {
        let step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
        match step {
            Some(s) if s <= resumed_at => {
                out.push_str(line);
                out.push('\n');
            }
            Some(_) => {}
            None => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    offset: 0,
                    msg: format!("malformed metrics row {line:?}"),
                })
            }
        }
    }
    Ok(out)
}

/// Evaluates the sampling weights against `data`.
pub fn evaluate(
    models: &Models,
    state: &TrainState,
    data: &Dataset,
    sched: &DiffusionSchedule,
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    let spec = &models.generator.spec;
    let den = GeneratorDenoiser {
        generator: &models.generator,
        params: state.sampling_params(cfg.sample_with_ema),
    };
    let r = spec.resolution();
    let seed = RngStream::new(state.seed, "eval")
        .substream(&state.step.to_string())
        .next_u64();
    let samples = sample_many(
        &den,
        sched,
        cfg.eval_samples.max(1),
        EVAL_CHUNK,
        &[spec.in_channels(), r, r],
        seed,
    )?;
    let coverage = match &data.labels {
        Some(_) => mode_coverage(&samples, &data.class_means()?)?,
        None => f64::NAN,
    };
    Ok((coverage, moment_error(&samples, &data.images)?))
}

/// Trains from `state.step` to the end of `cfg.epochs`, evaluating every
/// `cfg.eval_every` steps (and at the end) and checkpointing every
/// `cfg.ckpt_every` steps (and at the end or at `stop_at`).
///
/// The minibatch order, draws and evaluation samples are all functions of
/// `(seed, step)`, so resuming from a checkpoint continues bit-exactly.
pub fn fit(
    models: &Models,
    state: &mut TrainState,
    data: &Dataset,
    sched: &DiffusionSchedule,
    cfg: &TrainConfig,
    opts: &FitOptions,
) -> Result<FitSummary> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let n = data.len();
    let batch = cfg.batch.min(n);
    let spe = steps_per_epoch(n, cfg.batch) as u64;
    let total = spe * cfg.epochs as u64;
    let stop = opts.stop_at.map_or(total, |s| s.min(total));
    fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))?;
    let metrics_path = opts.out_dir.join("metrics.csv");
    let mut csv = open_metrics(&metrics_path, state.step)?;
    fs::write(&metrics_path, &csv).map_err(|e| Error::io(&metrics_path, e))?;

    let mut summary = FitSummary::default();
    let mut order: Option<(u64, Vec<usize>)> = None;
    while state.step < stop {
        let epoch = state.step / spe;
        let pos = (state.step % spe) as usize;
        if order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            order = Some((epoch, epoch_order(state.seed, epoch, n)));
        }
        let idx = &order.as_ref().expect("set above").1[pos * batch..(pos + 1) * batch];
        let x0 = gather(&data.images, idx)?;
        let mut report = train_step(models, state, &x0, sched, cfg)?;
        report.epoch = epoch;
        summary.history.push(report);

        let done = state.step;
        let eval_due = (cfg.eval_every > 0 && done.is_multiple_of(cfg.eval_every as u64)) || done == total;
        if eval_due {
            let (coverage, moment_err) = evaluate(models, state, data, sched, cfg)?;
            let rec = EvalRecord {
                step: done,
                epoch,
                losses: report,
                r1: state.last_r1,
                mode_coverage: coverage,
                moment_err,
            };
            let _ = writeln!(csv, "{}", csv_row(&rec));
            fs::write(&metrics_path, &csv).map_err(|e| Error::io(&metrics_path, e))?;
            summary.evals.push(rec);
        }
        let ckpt_due = (cfg.ckpt_every > 0 && done.is_multiple_of(cfg.ckpt_every as u64)) || done == stop;
        if ckpt_due {
            let path = opts.out_dir.join(format!("ckpt_{done}.wdif"));
            write_checkpoint(&path, &state.to_checkpoint(&opts.config_text), DType::F64)?;
            summary.checkpoints.push(path);
        }
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_geometry() {
        assert_eq!(steps_per_epoch(1024, 16), 64);
        assert_eq!(steps_per_epoch(20, 16), 1);
        assert_eq!(steps_per_epoch(8, 16), 1);
        let o = epoch_order(1, 0, 10);
        let mut s = o.clone();
        s.sort();
        assert_eq!(s, (0..10).collect::<Vec<_>>());
        assert_ne!(o, epoch_order(1, 1, 10));
    }

    #[test]
    fn metrics_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("metrics.csv");
        fs::write(
            &p,
            format!("{METRICS_HEADER}\n2,0,1,1,1,0,0,0\n4,0,1,1,1,0,0,0\n6,1,1,1,1,0,0,0\n"),
        )
        .unwrap();
        let kept = open_metrics(&p, 4).unwrap();
        assert_eq!(kept.lines().count(), 3);
        assert_eq!(open_metrics(&p, 0).unwrap(), format!("{METRICS_HEADER}\n"));
        fs::write(&p, "bad header\n").unwrap();
        assert!(open_metrics(&p, 4).is_err());
    }
}
