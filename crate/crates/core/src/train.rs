//! Training loop, evaluation and the prediction/query exports built on a
//! trained checkpoint.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::Graph;
use crate::checkpoint::{save_flat, Checkpoint};
use crate::config::TrainConfig;
use crate::data::{
    load_entry_cloud, load_image, normalize_cloud, DatasetManifest, ManifestEntry, PointCloudSample,
    RgbImage, NUM_AFFORDANCES,
};
use crate::error::{Error, Result};
use crate::export::{heatmap_ply, push_query_rows, query_csv_header, scores_csv};
use crate::losses::{attach, FocalParams, LossBreakdown, LossWeights};
use crate::metrics::{MetricsReport, SampleMetrics};
use crate::model::MifagModel;
use crate::nn::{Bound, ParamStore};
use crate::optim::{cosine_lr, Adam};
use crate::tensor::Tensor;

pub const DETERMINISTIC_ENV: &str = "MIFAG_DETERMINISTIC";

pub fn deterministic_from_env() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v.trim() == "1")
}

/// One manifest entry with its normalised cloud and every reference image loaded.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub cloud: PointCloudSample,
    pub images: Vec<RgbImage>,
}

pub fn load_samples(manifest: &DatasetManifest, config: &TrainConfig) -> Result<Vec<LoadedSample>> {
    manifest
        .entries
        .iter()
        .map(|e| load_sample(manifest, e, config))
        .collect()
}

fn load_sample(manifest: &DatasetManifest, entry: &ManifestEntry, config: &TrainConfig) -> Result<LoadedSample> {
    let cloud = normalize_cloud(&load_entry_cloud(manifest, entry)?)?;
    if cloud.len() != config.num_points {
        return Err(Error::Validation(format!(
            "entry {}: {} points, config expects {}",
            entry.sample_id,
            cloud.len(),
            config.num_points
        )));
    }
    if entry.image_files.is_empty() {
        return Err(Error::Validation(format!("entry {}: no reference images", entry.sample_id)));
    }
    let images = entry
        .image_files
        .iter()
        .map(|f| load_image(&manifest.resolve(f), config.image_side))
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedSample { cloud, images })
}

/// `n` distinct images when available, otherwise `n` draws with replacement.
pub fn sample_image_indices(available: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if available >= n {
        rand::seq::index::sample(rng, available, n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..available)).collect()
    }
}

/// First `n` images in manifest order, cycling when fewer exist.
pub fn eval_image_indices(available: usize, n: usize) -> Vec<usize> {
    (0..n).map(|i| i % available).collect()
}

fn pick(images: &[RgbImage], idx: &[usize]) -> Vec<RgbImage> {
    idx.iter().map(|&i| images[i].clone()).collect()
}

/// Loss and parameter gradients of one sample.
pub fn sample_gradients(
    model: &MifagModel,
    store: &ParamStore,
    cloud: &PointCloudSample,
    images: &[RgbImage],
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let c = &model.config;
    let mut g = Graph::new();
    let p = Bound::new(&mut g, store);
    let out = model.forward(&mut g, &p, cloud, images)?;
    let weights = LossWeights {
        lambda1: c.lambda1,
        lambda2: c.lambda2,
        lambda3: c.lambda3,
    };
    let focal = FocalParams {
        alpha: c.focal_alpha,
        gamma: c.focal_gamma,
    };
    let (loss, breakdown) = attach(
        &mut g,
        out.logits,
        cloud.affordance,
        &out.snapshots,
        out.pred,
        &cloud.labels,
        weights,
        focal,
    );
    let grads = g.backward(loss);
    Ok((breakdown, p.gradients(&grads, store)))
}

/// Mean loss and mean gradient over a batch, reduced in index order.
pub fn batch_gradients(
    model: &MifagModel,
    store: &ParamStore,
    batch: &[(&PointCloudSample, Vec<RgbImage>)],
    deterministic: bool,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let run = |(cloud, images): &(&PointCloudSample, Vec<RgbImage>)| sample_gradients(model, store, cloud, images);
    let results: Vec<Result<(LossBreakdown, Vec<Tensor>)>> = if deterministic {
        batch.iter().map(run).collect()
    } else {
        batch.par_iter().map(run).collect()
    };
    let mut losses = Vec::with_capacity(batch.len());
    let mut sum: Option<Vec<Tensor>> = None;
    for r in results {
        let (b, gr) = r?;
        losses.push(b);
        match &mut sum {
            None => sum = Some(gr),
            Some(s) => s.iter_mut().zip(&gr).for_each(|(a, b)| a.add_assign(b)),
        }
    }
    let scale = 1.0 / batch.len().max(1) as f64;
    let mean = sum
        .unwrap_or_default()
        .into_iter()
        .map(|t| t.map(|v| v * scale))
        .collect();
    Ok((LossBreakdown::mean(&losses), mean))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
}

pub fn log_header() -> &'static str {
    "step,ce,sim,focal,dice,hm,total,lr\n"
}

pub fn format_log_row(r: &LogRow) -> String {
    let l = &r.loss;
    format!(
        "{},{},{},{},{},{},{},{}\n",
        r.step, l.ce, l.sim, l.focal, l.dice, l.hm, l.total, r.lr
    )
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
    pub report: Option<MetricsReport>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> Option<f64> {
        self.log.last().map(|r| r.loss.total)
    }
}

/// Trains on every manifest entry. Writes `train_log.csv`, periodic
/// `checkpoint_epoch{e}.ckpt`, the final `checkpoint.ckpt`, its flat export
/// `weights.f32` and, if enabled, `train_eval.json`.
pub fn train(config: &TrainConfig, manifest: &DatasetManifest, out_dir: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    if manifest.is_empty() {
        return Err(Error::Validation("training manifest has no entries".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let deterministic = config.deterministic || deterministic_from_env();
    let samples = load_samples(manifest, config)?;
    let (model, mut store) = MifagModel::new(config)?;
    let mut adam = Adam::new(store.tensors(), config.adam_beta1, config.adam_beta2, config.adam_eps);
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed_sampler);
    let mut image_rng = ChaCha8Rng::seed_from_u64(config.seed_data);
    let mut log = Vec::new();
    let mut log_text = String::from(log_header());
    let log_path = out_dir.join("train_log.csv");
    let write_log = |text: &str| fs::write(&log_path, text).map_err(|e| Error::io(&log_path, e));
    let mut step = 0usize;
    let mut epoch = 0usize;
    let limit = config.max_steps.unwrap_or(usize::MAX);
    'epochs: while epoch < config.epochs {
        let lr = cosine_lr(config.learning_rate, epoch, config.epochs);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(config.batch_size) {
            if step >= limit {
                break 'epochs;
            }
            let batch: Vec<(&PointCloudSample, Vec<RgbImage>)> = chunk
                .iter()
                .map(|&i| {
                    let s = &samples[i];
                    let idx = sample_image_indices(s.images.len(), config.n_images, &mut image_rng);
                    (&s.cloud, pick(&s.images, &idx))
                })
                .collect();
            let (loss, grads) = batch_gradients(&model, &store, &batch, deterministic)?;
            step += 1;
            let row = LogRow { step, loss, lr };
            log_text.push_str(&format_log_row(&row));
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                write_log(&log_text)?;
                return Err(Error::Numerical {
                    step,
                    message: format!("non-finite loss or gradient (total {})", loss.total),
                });
            }
            log::debug!("step {step} epoch {epoch} total {:.6} lr {lr:.3e}", loss.total);
            log.push(row);
            adam.step(store.tensors_mut(), &grads, lr);
        }
        epoch += 1;
        if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 && epoch < config.epochs {
            let ck = Checkpoint {
                config: config.clone(),
                step: step as u64,
                epoch: epoch as u64,
                params: store.clone(),
                adam: adam.clone(),
            };
            ck.save(&out_dir.join(format!("checkpoint_epoch{epoch}.ckpt")))?;
        }
        log::info!(
            "epoch {epoch}/{} step {step} total {:.6}",
            config.epochs,
            log.last().map_or(f64::NAN, |r: &LogRow| r.loss.total)
        );
    }
    write_log(&log_text)?;
    let checkpoint = Checkpoint {
        config: config.clone(),
        step: step as u64,
        epoch: epoch as u64,
        params: store,
        adam,
    };
    checkpoint.save(&out_dir.join("checkpoint.ckpt"))?;
    save_flat(&checkpoint.params, &out_dir.join("weights.f32"))?;
    let report = if config.eval_after_train {
        let r = evaluate(&model, &checkpoint.params, &samples, manifest, "train", deterministic)?;
        let path = out_dir.join("train_eval.json");
        fs::write(&path, r.to_json()).map_err(|e| Error::io(&path, e))?;
        Some(r)
    } else {
        None
    };
    Ok(TrainOutcome {
        checkpoint,
        log,
        report,
    })
}

/// One forward pass per sample with the first `n_images` images.
pub fn evaluate(
    model: &MifagModel,
    store: &ParamStore,
    samples: &[LoadedSample],
    manifest: &DatasetManifest,
    label: &str,
    deterministic: bool,
) -> Result<MetricsReport> {
    let n = model.config.n_images;
    let run = |(s, e): (&LoadedSample, &ManifestEntry)| -> Result<SampleMetrics> {
        let images = pick(&s.images, &eval_image_indices(s.images.len(), n));
        let mut g = Graph::new();
        let p = Bound::new(&mut g, store);
        let out = model.forward(&mut g, &p, &s.cloud, &images)?;
        let pred = g.value(out.pred).data().to_vec();
        Ok(SampleMetrics::compute(
            &e.sample_id,
            e.affordance,
            &pred,
            &s.cloud.labels,
            model.config.sim_max_normalized,
        ))
    };
    let pairs: Vec<(&LoadedSample, &ManifestEntry)> = samples.iter().zip(&manifest.entries).collect();
    let rows: Vec<Result<SampleMetrics>> = if deterministic {
        pairs.into_iter().map(run).collect()
    } else {
        pairs.into_par_iter().map(run).collect()
    };
    Ok(MetricsReport::from_samples(label, rows.into_iter().collect::<Result<_>>()?))
}

fn check_manifest(manifest: &DatasetManifest) -> Result<()> {
    if manifest.affordance_names.len() != NUM_AFFORDANCES {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} affordances, model predicts {NUM_AFFORDANCES}",
            manifest.affordance_names.len()
        )));
    }
    Ok(())
}

/// Rebuilds the model described by a checkpoint and verifies its layout.
pub fn restore(checkpoint: &Checkpoint) -> Result<MifagModel> {
    let (model, _) = MifagModel::new(&checkpoint.config)?;
    model.check_store(&checkpoint.params)?;
    Ok(model)
}

pub fn evaluate_checkpoint(checkpoint: &Checkpoint, manifest: &DatasetManifest) -> Result<MetricsReport> {
    check_manifest(manifest)?;
    let model = restore(checkpoint)?;
    let samples = load_samples(manifest, &model.config)?;
    let label = format!("{:?}/{:?}", manifest.setting, manifest.split).to_lowercase();
    let deterministic = model.config.deterministic || deterministic_from_env();
    evaluate(&model, &checkpoint.params, &samples, manifest, &label, deterministic)
}

/// Writes `<sample_id>.ply` and `<sample_id>.csv` and returns their paths.
pub fn predict(
    checkpoint: &Checkpoint,
    manifest: &DatasetManifest,
    sample_id: &str,
    out_dir: &Path,
) -> Result<(PathBuf, PathBuf)> {
    check_manifest(manifest)?;
    let model = restore(checkpoint)?;
    let entry = manifest
        .entry(sample_id)
        .ok_or_else(|| Error::Validation(format!("sample {sample_id} not in manifest")))?;
    let s = load_sample(manifest, entry, &model.config)?;
    let images = pick(&s.images, &eval_image_indices(s.images.len(), model.config.n_images));
    let mut g = Graph::new();
    let p = Bound::new(&mut g, &checkpoint.params);
    let out = model.forward(&mut g, &p, &s.cloud, &images)?;
    let scores = g.value(out.pred).data().to_vec();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ply = out_dir.join(format!("{sample_id}.ply"));
    let csv = out_dir.join(format!("{sample_id}.csv"));
    fs::write(&ply, heatmap_ply(&s.cloud.coords, &scores)).map_err(|e| Error::io(&ply, e))?;
    fs::write(&csv, scores_csv(&scores)).map_err(|e| Error::io(&csv, e))?;
    Ok((ply, csv))
}

/// Query tokens of every layer and image for every manifest entry. Layers
/// are numbered from 1.
pub fn export_queries(checkpoint: &Checkpoint, manifest: &DatasetManifest, out_file: &Path) -> Result<usize> {
    check_manifest(manifest)?;
    let model = restore(checkpoint)?;
    let samples = load_samples(manifest, &model.config)?;
    let mut text = query_csv_header(model.config.channels);
    let mut rows = 0;
    for (s, e) in samples.iter().zip(&manifest.entries) {
        let images = pick(&s.images, &eval_image_indices(s.images.len(), model.config.n_images));
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &checkpoint.params);
        let out = model.forward(&mut g, &p, &s.cloud, &images)?;
        for (l, layer) in out.queries.iter().enumerate() {
            for (i, &q) in layer.iter().enumerate() {
                let t = g.value(q);
                push_query_rows(&mut text, l + 1, i, e.affordance, t);
                rows += t.rows();
            }
        }
    }
    if let Some(dir) = out_file.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(out_file, &text).map_err(|e| Error::io(out_file, e))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a = sample_image_indices(5, 3, &mut rng);
        a.sort_unstable();
        a.dedup();
        assert_eq!(a.len(), 3);
        assert!(sample_image_indices(2, 5, &mut rng).iter().all(|&i| i < 2));
        assert_eq!(eval_image_indices(2, 5), vec![0, 1, 0, 1, 0]);
    }
}
