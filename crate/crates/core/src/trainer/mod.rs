//! The training loop: adaptive image selection, augmentation, the two-branch
//! loss, SGD with momentum, confidence tracking, metrics logging, resumable
//! checkpoints, and evaluation.

mod config;
mod log;
mod optimizer;

pub use config::{LrSchedule, TrainConfig};
pub use log::{CONF_SNAPSHOT_EVERY, MetricsLog, StepRecord, read_log};
pub use optimizer::Optimizer;

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::sample_aug;
use crate::datamodel::{Dataset, compute_dist, concat_nir};
use crate::error::{Error, Result};
use crate::losses::{AiOptions, total_loss};
use crate::metrics::{MetricsAccumulator, argmax_predictions};
use crate::model::checkpoint::{self, Dtype};
use crate::model::{ArchDescriptor, Params, SegModel};
use crate::sampler::{BatchConfidence, SamplerState};

/// Crop of `side`×`side` read from `x` as if it had first been upscaled by
/// the integer factor `f` with nearest-neighbor interpolation.
fn crop_scaled3(x: &Array3<f64>, f: usize, top: usize, left: usize, side: usize) -> Array3<f64> {
    Array3::from_shape_fn((x.dim().0, side, side), |(c, i, j)| {
        x[[c, (top + i) / f, (left + j) / f]]
    })
}

fn crop_scaled2<T: Copy>(x: &Array2<T>, f: usize, top: usize, left: usize, side: usize) -> Array2<T> {
    Array2::from_shape_fn((side, side), |(i, j)| x[[(top + i) / f, (left + j) / f]])
}

/// Everything that changes during a run, bundled for serialization so an
/// interrupted run can resume mid-trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub best_miou: Option<f64>,
    pub cfg: TrainConfig,
    pub optimizer: Optimizer,
    pub sampler: SamplerState,
    pub rng: ChaCha8Rng,
}

/// Per-class IoU summary of one dataset pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub num_images: usize,
}

/// Run the model over every image of `data` and score predictions against
/// ground truth.
pub fn evaluate(model: &SegModel, data: &Dataset, strict_mean: bool) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Dataset("evaluation dataset is empty".into()));
    }
    let mut acc = MetricsAccumulator::new(data.taxonomy.num_classes());
    for sample in &data.samples {
        let trace = if model.arch().in_channels == 4 {
            model.forward(&concat_nir(sample)?)?
        } else {
            model.forward(&sample.rgb)?
        };
        let pred = argmax_predictions(&trace.logits);
        acc.accumulate(&pred, &sample.labels, sample.valid.as_ref())?;
    }
    let miou = acc.miou(strict_mean)?;
    Ok(EvalReport {
        miou,
        per_class_iou: acc.iou_per_class(),
        num_images: data.len(),
    })
}

/// Owns the model, the optimizer, the sampler, and the data RNG, and advances
/// them one batch at a time.
pub struct Trainer {
    cfg: TrainConfig,
    model: SegModel,
    optimizer: Optimizer,
    sampler: SamplerState,
    rng: ChaCha8Rng,
    dataset: Dataset,
    /// Classes present in each image, for uniform-mode selection logging.
    classes_per_image: Vec<Vec<u32>>,
    step: u64,
}

impl Trainer {
    /// Fresh state for `cfg`: seeded model, full-confidence tracker, zero
    /// momentum buffers. Model, data pipeline, and sampler draw from three
    /// independent streams derived from `cfg.seed`.
    pub fn new(cfg: TrainConfig, dataset: Dataset) -> Result<Trainer> {
        let arch = Trainer::arch_for(&cfg, &dataset);
        let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model_seed = master.next_u64();
        let data_seed = master.next_u64();
        let sampler_seed = master.next_u64();
        let model = SegModel::init(arch, model_seed)?;
        let dist = compute_dist(&dataset.index.pixel_counts);
        let sampler = SamplerState::new(
            dist,
            dataset.index.per_class_members.clone(),
            cfg.gamma,
            cfg.alpha,
            cfg.eps_floor,
            cfg.include_background,
            sampler_seed,
        )?;
        let optimizer = Optimizer::new(model.params.param_count(), cfg.momentum);
        Trainer::assemble(
            cfg,
            dataset,
            model,
            optimizer,
            sampler,
            ChaCha8Rng::seed_from_u64(data_seed),
            0,
        )
    }

    /// Rebuild a trainer mid-trajectory from persisted state.
    pub fn from_state(cfg: TrainConfig, dataset: Dataset, model: SegModel, state: TrainState) -> Result<Trainer> {
        if state.sampler.per_class_members() != dataset.index.per_class_members {
            return Err(Error::Config(
                "dataset membership changed since the run being resumed started".into(),
            ));
        }
        if state.optimizer.velocity().len() != model.params.param_count() {
            return Err(Error::Config(format!(
                "stored momentum buffer covers {} parameters, model has {}",
                state.optimizer.velocity().len(),
                model.params.param_count()
            )));
        }
        Trainer::assemble(
            cfg,
            dataset,
            model,
            state.optimizer,
            state.sampler,
            state.rng,
            state.step,
        )
    }

    fn arch_for(cfg: &TrainConfig, dataset: &Dataset) -> ArchDescriptor {
        let in_channels = if cfg.use_nir { 4 } else { 3 };
        ArchDescriptor::reference(in_channels, dataset.taxonomy.num_classes())
    }

    fn assemble(
        cfg: TrainConfig,
        dataset: Dataset,
        model: SegModel,
        optimizer: Optimizer,
        sampler: SamplerState,
        rng: ChaCha8Rng,
        step: u64,
    ) -> Result<Trainer> {
        cfg.validate(model.arch().stride())?;
        if dataset.is_empty() {
            return Err(Error::Dataset("training dataset is empty".into()));
        }
        for sample in &dataset.samples {
            let (h, w) = sample.labels.dim();
            if h < cfg.crop || w < cfg.crop {
                return Err(Error::Config(format!(
                    "crop {} exceeds image '{}' ({h}x{w})",
                    cfg.crop, sample.id
                )));
            }
            if cfg.use_nir && sample.nir.is_none() {
                return Err(Error::Dataset(format!(
                    "use_nir is set but image '{}' has no near-infrared band",
                    sample.id
                )));
            }
        }
        let mut classes_per_image = vec![Vec::new(); dataset.len()];
        for (c, members) in dataset.index.per_class_members.iter().enumerate() {
            for &i in members {
                classes_per_image[i].push(c as u32);
            }
        }
        Ok(Trainer {
            cfg,
            model,
            optimizer,
            sampler,
            rng,
            dataset,
            classes_per_image,
            step,
        })
    }

    pub fn cfg(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &SegModel {
        &self.model
    }

    pub fn sampler(&self) -> &SamplerState {
        &self.sampler
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn state(&self, best_miou: Option<f64>) -> TrainState {
        TrainState {
            step: self.step,
            best_miou,
            cfg: self.cfg.clone(),
            optimizer: self.optimizer.clone(),
            sampler: self.sampler.clone(),
            rng: self.rng.clone(),
        }
    }

    /// One optimization step over a freshly drawn batch.
    ///
    /// Per batch slot the data RNG is consumed in a fixed order — image
    /// selection (uniform mode only), resize factor, crop row, crop column,
    /// augmentation seed — which is what makes runs resumable mid-stream.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let t = self.step;
        let cfg = &self.cfg;
        let nc = self.dataset.taxonomy.num_classes();
        let lr_t = cfg.lr_schedule.lr_at(cfg.lr, t, cfg.iterations);
        let lambda = if cfg.use_ai { cfg.lambda } else { 0.0 };
        let opts = AiOptions {
            stop_gradient: cfg.ai_stop_gradient,
            reduction: cfg.ai_reduction,
        };

        let mut grads = Params::zeros(self.model.arch());
        let mut conf_acc = BatchConfidence::new(nc);
        let mut sampled_classes = Vec::with_capacity(cfg.batch_size);
        let mut batch_ids = Vec::with_capacity(cfg.batch_size);
        let (mut sum_orig, mut sum_aug, mut sum_ai) = (0.0, 0.0, 0.0);
        let mut valid_pixels = 0usize;

        for _ in 0..cfg.batch_size {
            let (idx, classes) = if cfg.use_as {
                let (class, idx) = self.sampler.sample()?;
                (idx, vec![class as u32])
            } else {
                let idx = self.rng.random_range(0..self.dataset.len());
                (idx, self.classes_per_image[idx].clone())
            };
            let sample = self.dataset.get(idx);
            batch_ids.push(sample.id.clone());
            sampled_classes.push(classes);

            let factor = self.rng.random_range(1..=2usize);
            let (h, w) = sample.labels.dim();
            let top = self.rng.random_range(0..=h * factor - cfg.crop);
            let left = self.rng.random_range(0..=w * factor - cfg.crop);
            let rec = sample_aug(&mut self.rng, cfg.p_apply, cfg.sigma_p)?;

            let x_hat = if cfg.use_nir {
                crop_scaled3(&concat_nir(sample)?, factor, top, left, cfg.crop)
            } else {
                crop_scaled3(&sample.rgb, factor, top, left, cfg.crop)
            };
            let y = crop_scaled2(&sample.labels, factor, top, left, cfg.crop);
            let valid = sample
                .valid
                .as_ref()
                .map(|v| crop_scaled2(v, factor, top, left, cfg.crop));

            let out = total_loss(&self.model, &x_hat, &y, valid.as_ref(), &rec, lambda, &opts)?;
            grads.add_scaled(&out.grads, 1.0);
            sum_orig += out.report.l_seg_orig;
            sum_aug += out.report.l_seg_aug;
            if cfg.use_ai {
                sum_ai += out.report.l_ai;
            }
            valid_pixels += out.report.valid_pixel_count;
            conf_acc.add(&out.logits_orig, &y, valid.as_ref())?;
        }

        let inv_b = 1.0 / cfg.batch_size as f64;
        grads.scale_in_place(inv_b);
        let l_seg_orig = sum_orig * inv_b;
        let l_seg_aug = sum_aug * inv_b;
        let l_ai = sum_ai * inv_b;
        let l_tot = l_seg_orig + l_seg_aug + lambda * l_ai;
        if !l_tot.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss {l_tot} at step {t}; batch ids: {batch_ids:?}"
            )));
        }

        self.optimizer.step(&mut self.model.params, &grads, lr_t);

        let m_c = conf_acc.class_means();
        self.sampler.tracker_mut().update(&m_c)?;
        let conf = ((t + 1) % CONF_SNAPSHOT_EVERY == 0)
            .then(|| self.sampler.tracker().conf().to_vec());

        self.step += 1;
        Ok(StepRecord {
            t,
            l_seg_orig,
            l_seg_aug,
            l_ai,
            l_tot,
            lr_t,
            valid_pixel_count: valid_pixels,
            sampled_classes,
            m_c,
            conf,
        })
    }
}

/// What [`fit`] leaves behind.
#[derive(Debug, Clone)]
pub struct FitSummary {
    pub steps_run: u64,
    pub final_miou: Option<f64>,
    pub best_miou: Option<f64>,
    pub out_dir: PathBuf,
}

const STATE_FILE: &str = "train_state.json";
const STATE_CHECKPOINT: &str = "state.agsp";
const FINAL_CHECKPOINT: &str = "final.agsp";
const BEST_CHECKPOINT: &str = "best.agsp";
const METRICS_FILE: &str = "metrics.jsonl";

fn save_state(out_dir: &Path, trainer: &Trainer, best_miou: Option<f64>) -> Result<()> {
    checkpoint::save(trainer.model(), &out_dir.join(STATE_CHECKPOINT), Dtype::F64)?;
    let state = trainer.state(best_miou);
    let text = serde_json::to_string_pretty(&state)
        .map_err(|e| Error::Training(format!("cannot serialize train state: {e}")))?;
    let path = out_dir.join(STATE_FILE);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn write_eval_snapshot(out_dir: &Path, t: u64, report: &EvalReport) -> Result<()> {
    let path = out_dir.join(format!("eval_{t}.json"));
    let body = serde_json::json!({
        "t": t,
        "miou": report.miou,
        "per_class_iou": report.per_class_iou,
        "num_images": report.num_images,
    });
    std::fs::write(&path, serde_json::to_string_pretty(&body).expect("plain json"))
        .map_err(|e| Error::io(&path, e))
}

/// Train for `cfg.iterations` steps on the dataset under `data_root`, leaving
/// checkpoints, the metrics log, and eval snapshots in `out_dir`.
///
/// With `resume` the directory must hold the state of an earlier run with an
/// identical config (except `iterations`, which may grow); training continues
/// exactly where that run stopped. Without it, `out_dir` must not already
/// contain a run.
pub fn fit(
    cfg: &TrainConfig,
    data_root: &Path,
    out_dir: &Path,
    eval_root: Option<&Path>,
    resume: bool,
) -> Result<FitSummary> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let in_channels = if cfg.use_nir { 4 } else { 3 };
    let stride = ArchDescriptor::reference(in_channels, 2).stride();
    let dataset = Dataset::load(data_root, stride)?;
    let num_classes = dataset.taxonomy.num_classes();
    let arch = ArchDescriptor::reference(in_channels, num_classes);

    let (mut trainer, mut best_miou) = if resume {
        let state_path = out_dir.join(STATE_FILE);
        let text = std::fs::read_to_string(&state_path).map_err(|e| Error::io(&state_path, e))?;
        let state: TrainState = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("bad train state: {e}")))?;
        let mut stored = state.cfg.clone();
        stored.iterations = cfg.iterations;
        if stored != *cfg {
            return Err(Error::Config(
                "resume config differs from the stored run (only `iterations` may change)".into(),
            ));
        }
        if cfg.iterations < state.step {
            return Err(Error::Config(format!(
                "resume target of {} iterations is below the {} already completed",
                cfg.iterations, state.step
            )));
        }
        let model = checkpoint::load_expecting(&out_dir.join(STATE_CHECKPOINT), &arch)?;
        let best = state.best_miou;
        (Trainer::from_state(cfg.clone(), dataset, model, state)?, best)
    } else {
        if out_dir.join(STATE_FILE).exists() || out_dir.join(METRICS_FILE).exists() {
            return Err(Error::Config(format!(
                "{} already contains a run; resume it or pick a fresh directory",
                out_dir.display()
            )));
        }
        (Trainer::new(cfg.clone(), dataset)?, None)
    };

    let eval_data = match eval_root {
        Some(root) => {
            let data = Dataset::load(root, stride)?;
            if data.taxonomy.num_classes() != num_classes {
                return Err(Error::Dataset(format!(
                    "evaluation set has {} classes, training set has {num_classes}",
                    data.taxonomy.num_classes()
                )));
            }
            Some(data)
        }
        None => None,
    };

    let mut log = MetricsLog::append_to(&out_dir.join(METRICS_FILE))?;
    let start = trainer.step();
    let mut last_eval_at = None;

    for t in start..cfg.iterations {
        let record = trainer.train_step()?;
        log.push(&record)?;
        let done = t + 1;
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 {
            if let Some(data) = &eval_data {
                let report = evaluate(trainer.model(), data, false)?;
                write_eval_snapshot(out_dir, done, &report)?;
                last_eval_at = Some(done);
                if best_miou.is_none_or(|b| report.miou > b) {
                    best_miou = Some(report.miou);
                    checkpoint::save(trainer.model(), &out_dir.join(BEST_CHECKPOINT), Dtype::F64)?;
                }
            }
        }
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            save_state(out_dir, &trainer, best_miou)?;
        }
    }

    let final_miou = match &eval_data {
        Some(data) => {
            let report = evaluate(trainer.model(), data, false)?;
            if last_eval_at != Some(cfg.iterations) {
                write_eval_snapshot(out_dir, cfg.iterations, &report)?;
            }
            if best_miou.is_none_or(|b| report.miou > b) {
                best_miou = Some(report.miou);
                checkpoint::save(trainer.model(), &out_dir.join(BEST_CHECKPOINT), Dtype::F64)?;
            }
            Some(report.miou)
        }
        None => None,
    };

    checkpoint::save(trainer.model(), &out_dir.join(FINAL_CHECKPOINT), Dtype::F64)?;
    save_state(out_dir, &trainer, best_miou)?;

    Ok(FitSummary {
        steps_run: cfg.iterations - start,
        final_miou,
        best_miou,
        out_dir: out_dir.to_path_buf(),
    })
}
