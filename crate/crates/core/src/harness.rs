//! Training, evaluation and ablation runs.
//!
//! Training is single-threaded SGD with momentum and a cosine learning-rate
//! decay. After every epoch the model is scored on the validation part (best
//! FROC TPR within the FPPI budget) and the best epoch's parameters are kept.

use std::fs;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;

use crate::backbone::resize_input;
use crate::boxes::{BBox, Detection};
use crate::config::RunConfig;
use crate::data::{five_fold_split, generate_dataset, load_annotations, AnnotatedImage, Split, NUM_PARTS};
use crate::error::{Error, Result};
use crate::metrics::{fmt_opt, froc, GroundTruth, MetricsReport, SizeThresholds, REPORT_COLUMNS};
use crate::model::Detector;
use crate::neck::NeckVariant;
use crate::param::ParamStore;
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Loads `data.dir` when set, otherwise generates the synthetic pool. Images
/// whose size differs from `data.image_side` are resized to it, boxes scaled
/// alongside.
pub fn prepare_data(cfg: &RunConfig) -> Result<Vec<AnnotatedImage>> {
    let side = cfg.data.scene.image_side;
    let images = match &cfg.data.dir {
        Some(dir) => load_annotations(dir)?,
        None => generate_dataset(&cfg.data.scene, cfg.data.n_images + cfg.data.extra_train)?,
    };
    let thresholds = SizeThresholds::for_image_side(side);
    images
        .into_iter()
        .map(|img| {
            if img.height() == side && img.width() == side {
                return Ok(img);
            }
            let (sx, sy) = (side as f64 / img.width() as f64, side as f64 / img.height() as f64);
            let pixels = resize_input(&img.pixels, side, side)?;
            let gts = img
                .gts
                .iter()
                .map(|g| GroundTruth::new(img.image_id, g.bbox.scaled(sx, sy), &thresholds))
                .collect();
            Ok(AnnotatedImage {
                image_id: img.image_id,
                pixels,
                gts,
            })
        })
        .collect()
}

/// Replicate `r` of the five-part split. The last `data.extra_train`
/// images stay out of the rotation and are appended to the training ids.
pub fn split_for(cfg: &RunConfig, images: &[AnnotatedImage], replicate: usize) -> Result<Split> {
    let pool = images.len().saturating_sub(cfg.data.extra_train);
    let ids: Vec<usize> = images[..pool].iter().map(|i| i.image_id).collect();
    let mut split = five_fold_split(&ids, cfg.data.scene.seed)?.replicate(replicate);
    split.train.extend(images[pool..].iter().map(|i| i.image_id));
    Ok(split)
}

fn select<'a>(images: &'a [AnnotatedImage], ids: &[usize]) -> Result<Vec<&'a AnnotatedImage>> {
    ids.iter()
        .map(|id| {
            images
                .iter()
                .find(|i| i.image_id == *id)
                .ok_or_else(|| Error::Validation(format!("image id {id} not in dataset")))
        })
        .collect()
}

fn batch_tensor<T: Scalar>(images: &[&AnnotatedImage]) -> Result<Tensor<T>> {
    let parts: Vec<Tensor<T>> = images.iter().map(|i| i.pixels.cast()).collect();
    Tensor::stack_batch(&parts)
}

/// Per-image detections and ground truths for a set of images.
pub fn detect_all<T: Scalar>(
    model: &Detector<T>,
    images: &[&AnnotatedImage],
    batch_size: usize,
) -> Result<(Vec<Vec<Detection>>, Vec<Vec<GroundTruth>>)> {
    let mut dets = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        dets.extend(model.detect(&batch_tensor(chunk)?)?);
    }
    let gts = images.iter().map(|i| i.gts.clone()).collect();
    Ok((dets, gts))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub val_tpr: f64,
}

pub fn train_log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,loss,val_tpr\n");
    for e in log {
        s.push_str(&format!("{},{},{}\n", e.epoch, e.loss, e.val_tpr));
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Model holding the best validation epoch's parameters.
    pub model: Detector<T>,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos())
}

fn sgd_step<T: Scalar>(store: &mut ParamStore<T>, velocity: &mut [Vec<T>], lr: f64, momentum: f64, clip: Option<f64>) {
    let scale = match clip {
        Some(c) => {
            let norm = store.grad_squared_norm().as_f64().sqrt();
            if norm > c {
                c / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    let (lr, mu, scale) = (T::lit(lr), T::lit(momentum), T::lit(scale));
    for (p, v) in store.iter_mut().zip(velocity.iter_mut()) {
        let grad = p.grad.data();
        for ((w, vi), &g) in p.value.data_mut().iter_mut().zip(v.iter_mut()).zip(grad) {
            *vi = mu * *vi + g * scale;
            *w -= lr * *vi;
        }
    }
}

/// Validation score: best TPR on the FROC at FPPI within budget.
pub fn validation_score<T: Scalar>(model: &Detector<T>, val: &[&AnnotatedImage], cfg: &RunConfig) -> Result<f64> {
    let (dets, gts) = detect_all(model, val, cfg.train.batch_size)?;
    let curve = froc(&dets, &gts, cfg.eval.froc_iou, &cfg.eval.score_thresholds);
    Ok(curve.tpr_at_fppi(cfg.train.val_max_fppi))
}

/// Trains a fresh model of `cfg.model` on `train`, selecting the epoch with
/// the best score on `val` (the first epoch wins ties).
pub fn train<T: Scalar>(cfg: &RunConfig, train: &[&AnnotatedImage], val: &[&AnnotatedImage]) -> Result<TrainOutcome<T>> {
    if train.is_empty() {
        return Err(Error::Validation("empty training set".into()));
    }
    let tc = &cfg.train;
    let mut model: Detector<T> = Detector::new(&cfg.model)?;
    let mut velocity: Vec<Vec<T>> = model.store.iter().map(|p| vec![T::zero(); p.value.numel()]).collect();
    let steps_per_epoch = train.len().div_ceil(tc.batch_size);
    let total_steps = steps_per_epoch * tc.epochs;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, usize, ParamStore<T>)> = None;
    let mut log = Vec::with_capacity(tc.epochs);
    let mut step = 0;
    for epoch in 1..=tc.epochs {
        order.shuffle(&mut SplitMix64::derive(tc.seed, epoch as u64));
        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(tc.batch_size).enumerate() {
            let imgs: Vec<&AnnotatedImage> = chunk.iter().map(|&i| train[i]).collect();
            let x = batch_tensor::<T>(&imgs)?;
            let gts: Vec<Vec<BBox>> = imgs.iter().map(|i| i.boxes()).collect();
            let mut tape = Tape::new();
            let loss = model.loss(&mut tape, &x, &gts)?;
            let value = tape.value(loss).item()?.as_f64();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: bi,
                    detail: format!("loss is {value}; lower train.lr or set train.grad_clip"),
                });
            }
            tape.backward(loss)?;
            model.store.zero_grad();
            model.store.accumulate_grads(&tape)?;
            let lr = cosine_lr(tc.lr, step, total_steps);
            sgd_step(&mut model.store, &mut velocity, lr, tc.momentum, tc.grad_clip);
            if model.store.iter().any(|p| !p.value.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    step: bi,
                    detail: "non-finite parameter after update".into(),
                });
            }
            loss_sum += value * imgs.len() as f64;
            step += 1;
        }
        let loss = loss_sum / train.len() as f64;
        let val_tpr = if val.is_empty() {
            0.0
        } else {
            validation_score(&model, val, cfg)?
        };
        debug!("epoch {epoch}: loss {loss:.5} val_tpr {val_tpr:.4}");
        log.push(EpochLog { epoch, loss, val_tpr });
        if best.as_ref().is_none_or(|(s, _, _)| val_tpr > *s) {
            best = Some((val_tpr, epoch, model.store.clone()));
        }
    }
    let (_, best_epoch, store) = best.expect("at least one epoch");
    model.store = store;
    Ok(TrainOutcome { model, log, best_epoch })
}

/// Full metrics of `model` on `images`.
pub fn evaluate<T: Scalar>(model: &Detector<T>, images: &[&AnnotatedImage], cfg: &RunConfig) -> Result<MetricsReport> {
    let (dets, gts) = detect_all(model, images, cfg.train.batch_size)?;
    let side = cfg.data.scene.image_side;
    Ok(MetricsReport::compute(
        &model.config.neck.variant.to_string(),
        &dets,
        &gts,
        &SizeThresholds::for_image_side(side),
        &cfg.eval,
        model.param_count(),
        model.flops(side, side)?,
    ))
}

/// `train` command: trains on the configured replicate and writes
/// `checkpoint.bin`, `train_log.csv` and `config.resolved.txt`.
pub fn run_train(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome<f64>> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.resolved.txt"), cfg.resolved())?;
    let images = prepare_data(cfg)?;
    let split = split_for(cfg, &images, cfg.data.replicate)?;
    let outcome = train::<f64>(cfg, &select(&images, &split.train)?, &select(&images, &split.val)?)?;
    outcome.model.save_checkpoint(&out.join("checkpoint.bin"))?;
    fs::write(out.join("train_log.csv"), train_log_csv(&outcome.log))?;
    info!(
        "trained {} for {} epochs, best epoch {}",
        cfg.model.neck.variant, cfg.train.epochs, outcome.best_epoch
    );
    Ok(outcome)
}

/// `eval` command: loads `checkpoint` into the configured model and writes
/// `metrics.csv` and `froc.csv` for the replicate's test part.
pub fn run_eval(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<MetricsReport> {
    fs::create_dir_all(out)?;
    let mut model: Detector<f64> = Detector::new(&cfg.model)?;
    model.load_checkpoint(checkpoint)?;
    let images = prepare_data(cfg)?;
    let split = split_for(cfg, &images, cfg.data.replicate)?;
    let report = evaluate(&model, &select(&images, &split.test)?, cfg)?;
    fs::write(out.join("metrics.csv"), crate::metrics::reports_to_csv(std::slice::from_ref(&report)))?;
    fs::write(out.join("froc.csv"), report.froc.to_csv())?;
    Ok(report)
}

/// Reports of every variant over every replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub variants: Vec<NeckVariant>,
    /// `reports[v][r]`
    pub reports: Vec<Vec<MetricsReport>>,
}

/// Sample mean and standard deviation (n − 1) of the defined values; `None`
/// when no replicate is defined.
pub fn mean_std(values: &[Option<f64>]) -> Option<(f64, f64)> {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Some((mean, var.sqrt()))
}

pub fn median(values: &[Option<f64>]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().flatten().copied().collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

impl AblationResult {
    /// Column `c` (index into the metric columns after `variant`) of every
    /// replicate of variant `v`.
    pub fn column(&self, v: usize, c: usize) -> Vec<Option<f64>> {
        self.reports[v].iter().map(|r| r.row_values()[c]).collect()
    }

    /// One row per variant, each metric cell `mean (std)`.
    pub fn summary_csv(&self) -> String {
        self.aggregate_csv(|vals| {
            mean_std(vals).map_or_else(|| "-".to_string(), |(m, s)| format!("{m:.4} ({s:.4})"))
        })
    }

    /// One row per variant, each metric cell the replicate maximum.
    pub fn max_csv(&self) -> String {
        self.aggregate_csv(|vals| fmt_opt(vals.iter().flatten().copied().reduce(f64::max)))
    }

    fn aggregate_csv(&self, cell: impl Fn(&[Option<f64>]) -> String) -> String {
        let mut s = REPORT_COLUMNS.join(",");
        s.push('\n');
        for (vi, variant) in self.variants.iter().enumerate() {
            let mut cells = vec![variant.to_string()];
            for c in 0..REPORT_COLUMNS.len() - 3 {
                cells.push(cell(&self.column(vi, c)));
            }
            // Cost columns are identical across replicates.
            let r = &self.reports[vi][0];
            cells.push(r.params.to_string());
            cells.push(r.flops.to_string());
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }

    /// Every replicate's row, prefixed by the replicate index.
    pub fn raw_csv(&self) -> String {
        let mut s = format!("replicate,{}\n", REPORT_COLUMNS.join(","));
        for per_variant in &self.reports {
            for (r, report) in per_variant.iter().enumerate() {
                s.push_str(&format!("{r},{}\n", report.csv_row()));
            }
        }
        s
    }
}

/// Trains and evaluates each configured variant on each replicate of the
/// five-part rotation. Data, splits, seeds and schedule are shared; only
/// the neck differs.
pub fn ablate<T: Scalar>(cfg: &RunConfig) -> Result<AblationResult> {
    let images = prepare_data(cfg)?;
    let replicates = cfg.ablate.replicates.min(NUM_PARTS);
    let mut reports = Vec::with_capacity(cfg.ablate.variants.len());
    for &variant in &cfg.ablate.variants {
        let mut run = cfg.clone();
        run.model.neck.variant = variant;
        let mut per = Vec::with_capacity(replicates);
        for r in 0..replicates {
            let fail = |e: Error| Error::Validation(format!("{variant} replicate {r}: {e}"));
            let split = split_for(&run, &images, r).map_err(fail)?;
            let outcome = train::<T>(
                &run,
                &select(&images, &split.train).map_err(fail)?,
                &select(&images, &split.val).map_err(fail)?,
            )
            .map_err(fail)?;
            let report = evaluate(&outcome.model, &select(&images, &split.test)?, &run).map_err(fail)?;
            info!(
                "{variant} replicate {r}: AP@50 {} AP@50S {} (best epoch {})",
                fmt_opt(report.ap_at(0.5)),
                fmt_opt(report.ap_small_at(0.5)),
                outcome.best_epoch
            );
            per.push(report);
        }
        reports.push(per);
    }
    Ok(AblationResult {
        variants: cfg.ablate.variants.clone(),
        reports,
    })
}

/// `ablate` command: writes `ablation.csv` (mean (std)), `ablation_max.csv`
/// and `ablation_raw.csv`.
pub fn run_ablate(cfg: &RunConfig, out: &Path) -> Result<AblationResult> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.resolved.txt"), cfg.resolved())?;
    let result = ablate::<f64>(cfg)?;
    fs::write(out.join("ablation.csv"), result.summary_csv())?;
    fs::write(out.join("ablation_max.csv"), result.max_csv())?;
    fs::write(out.join("ablation_raw.csv"), result.raw_csv())?;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_ends() {
        assert_eq!(cosine_lr(0.1, 0, 10), 0.1);
        assert!(cosine_lr(0.1, 10, 10).abs() < 1e-15);
        assert!((cosine_lr(0.1, 5, 10) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn aggregates() {
        let (m, s) = mean_std(&[Some(1.0), Some(2.0), Some(3.0), None]).unwrap();
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert_eq!(mean_std(&[None, None]), None);
        assert_eq!(median(&[Some(3.0), Some(1.0), Some(2.0)]), Some(2.0));
        assert_eq!(median(&[Some(4.0), Some(1.0)]), Some(2.5));
    }
}
