//! Patch sampling, augmentation, Adam and the epoch loop.

use std::sync::Once;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curriculum::{sample_task, CurriculumSchedule, RefDraw, Stage, StageParams, TaskDraw};
use crate::dataset::{mix, DatasetManifest};
use crate::error::{Error, Result};
use crate::geometry::{effective_scale, RefMode, ScaleTask};
use crate::kspace::{degrade_to, lowpass_mask, FrequencyMask};
use crate::losses::{full_loss_with_grad, LossOptions, LossReport, LAMBDA_K};
use crate::metrics::psnr;
use crate::model::{DualArbNet, ModelConfig, ParameterSet};
use crate::tensor::Plane;

fn default_batch() -> usize {
    6
}

fn default_patch() -> usize {
    32
}

fn default_lambda() -> f64 {
    LAMBDA_K
}

fn yes() -> bool {
    true
}

fn default_valid_scales() -> Vec<f64> {
    vec![2.0, 4.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub schedule: CurriculumSchedule,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Side of the square LR training patch.
    #[serde(default = "default_patch")]
    pub lr_patch: usize,
    /// Defaults to one pass over the training pairs.
    #[serde(default)]
    pub steps_per_epoch: Option<usize>,
    #[serde(default = "default_lambda")]
    pub lambda_k: f64,
    #[serde(default = "yes")]
    pub k_loss: bool,
    #[serde(default)]
    pub squared_k_loss: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_valid_scales")]
    pub valid_scales: Vec<f64>,
    /// Cap on validation pairs per epoch; all when unset.
    #[serde(default)]
    pub valid_pairs: Option<usize>,
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            model: ModelConfig::desk(),
            schedule: CurriculumSchedule::desk(),
            batch_size: default_batch(),
            lr_patch: default_patch(),
            steps_per_epoch: Some(40),
            lambda_k: LAMBDA_K,
            k_loss: true,
            squared_k_loss: false,
            seed: 0,
            valid_scales: default_valid_scales(),
            valid_pairs: Some(4),
        }
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            lambda_k: self.lambda_k,
            k_loss_on: self.k_loss,
            squared: self.squared_k_loss,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        if self.batch_size == 0 || self.lr_patch < 3 || self.steps_per_epoch == Some(0) {
            return Err(Error::InvalidArgument(
                "batch size, patch size and steps per epoch must be positive".into(),
            ));
        }
        if !(self.lambda_k >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "lambda_k must be >= 0, got {}",
                self.lambda_k
            )));
        }
        Ok(())
    }
}

/// Target/reference pixel pairs held in memory.
#[derive(Clone, Debug, Default)]
pub struct PairSet {
    pub ids: Vec<String>,
    pub pairs: Vec<(Plane<f32>, Plane<f32>)>,
}

impl PairSet {
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        let mut out = PairSet::default();
        for (i, e) in manifest.entries.iter().enumerate() {
            let (t, r) = manifest.load_pair(i)?;
            out.ids.push(format!("{}/{}", e.subject_id, e.slice_id));
            out.pairs.push((t.pixels, r.pixels));
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn min_side(&self) -> usize {
        self.pairs.iter().map(|(t, _)| t.h.min(t.w)).min().unwrap_or(0)
    }
}

/// One training example.
#[derive(Clone, Debug)]
pub struct Sample {
    pub task: ScaleTask,
    pub tar_lr: Plane<f32>,
    pub reference: Plane<f32>,
    pub hr: Plane<f32>,
    pub mask: FrequencyMask,
    pub pair: usize,
    pub transform: u8,
}

/// One of the eight symmetries of the square: `t % 4` quarter turns
/// counter-clockwise, then a horizontal flip when `t >= 4`.
pub fn dihedral<T: Copy>(p: &Plane<T>, t: u8) -> Result<Plane<T>> {
    if t % 2 == 1 && p.h != p.w {
        return Err(Error::Dims(format!("cannot rotate a non-square {}x{} patch", p.h, p.w)));
    }
    let mut out = p.clone();
    for _ in 0..t % 4 {
        let n = out.w;
        let src = out.clone();
        out = Plane {
            h: src.w,
            w: src.h,
            data: (0..src.w * src.h)
                .map(|k| src.data[(k % src.h) * n + (n - 1 - k / src.h)])
                .collect(),
        };
    }
    if t >= 4 {
        let w = out.w;
        for row in out.data.chunks_mut(w) {
            row.reverse();
        }
    }
    Ok(out)
}

/// Reference side for a draw: LR size, HR size, or in between.
fn ref_side(reference: RefDraw, lr: usize, hr: usize) -> usize {
    match reference.mode {
        RefMode::Lr => lr,
        RefMode::Hr => hr,
        RefMode::Custom => (lr as f64 + reference.t * (hr - lr) as f64).round() as usize,
    }
}

/// Builds one sample from an HR window of the chosen pair.
pub fn make_sample(
    data: &PairSet,
    draw: &TaskDraw,
    lr_patch: usize,
    pair: usize,
    origin: (usize, usize),
    transform: u8,
) -> Result<Sample> {
    let (h, _) = effective_scale(lr_patch, draw.s_nominal)?;
    let (tar, reference) = &data.pairs[pair];
    let tar_win = dihedral(&tar.crop(origin.0, origin.1, h, h)?.cast::<f64>(), transform)?;
    let ref_win = dihedral(&reference.crop(origin.0, origin.1, h, h)?.cast::<f64>(), transform)?;
    let tar_lr = degrade_to(&tar_win, (lr_patch, lr_patch))?;
    let m = ref_side(draw.reference, lr_patch, h);
    let ref_img = if m == h { ref_win } else { degrade_to(&ref_win, (m, m))? };
    let task = ScaleTask::new((lr_patch, lr_patch), (m, m), (h, h), draw.reference.mode)?;
    Ok(Sample {
        task,
        tar_lr: tar_lr.cast(),
        reference: ref_img.cast(),
        hr: tar_win.cast(),
        mask: lowpass_mask((h, h), (lr_patch, lr_patch))?,
        pair,
        transform,
    })
}

static OVERSIZE_WARNING: Once = Once::new();

/// Draws the step's task (redrawing scales whose HR window would not fit
/// the slices) and `batch` samples, each from its own seeded generator.
pub fn sample_batch(
    data: &PairSet,
    stage: &StageParams,
    seed: u64,
    epoch: usize,
    step: usize,
    batch: usize,
    lr_patch: usize,
) -> Result<(TaskDraw, Vec<Sample>)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("no training pairs".into()));
    }
    let side = data.min_side();
    let step_seed = mix(mix(seed, epoch as u64), step as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
    let mut draw = sample_task(stage, &mut rng);
    let mut tries = 0;
    while effective_scale(lr_patch, draw.s_nominal)?.0 > side {
        OVERSIZE_WARNING.call_once(|| {
            log::warn!("scales needing HR windows above {side} px are redrawn (LR patch {lr_patch})");
        });
        tries += 1;
        if tries > 1000 {
            return Err(Error::InvalidArgument(format!(
                "no trainable scale: LR patch {lr_patch} does not fit {side}px slices"
            )));
        }
        draw = sample_task(stage, &mut rng);
    }
    let h = effective_scale(lr_patch, draw.s_nominal)?.0;
    let samples = (0..batch)
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(mix(step_seed, i as u64 + 1));
            let pair = r.random_range(0..data.len());
            let (t, _) = &data.pairs[pair];
            let origin = (r.random_range(0..=t.h - h), r.random_range(0..=t.w - h));
            let transform = r.random_range(0..8u8);
            make_sample(data, &draw, lr_patch, pair, origin, transform)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((draw, samples))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: ParameterSet<f32>,
    pub v: ParameterSet<f32>,
    pub t: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl Adam {
    pub fn new(cfg: &ModelConfig) -> Self {
        Adam {
            m: ParameterSet::zeros(cfg),
            v: ParameterSet::zeros(cfg),
            t: 0,
        }
    }

    pub fn update(&mut self, params: &mut ParameterSet<f32>, grad: &ParameterSet<f32>, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let groups = params
            .arrays_mut()
            .into_iter()
            .zip(grad.arrays())
            .zip(self.m.arrays_mut())
            .zip(self.v.arrays_mut());
        for ((((_, p), (_, g)), (_, m)), (_, v)) in groups {
            for i in 0..p.len() {
                let gi = g[i] as f64;
                let mi = ADAM_BETA1 * m[i] as f64 + (1.0 - ADAM_BETA1) * gi;
                let vi = ADAM_BETA2 * v[i] as f64 + (1.0 - ADAM_BETA2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                p[i] = (p[i] as f64 - lr * (mi / c1) / ((vi / c2).sqrt() + ADAM_EPS)) as f32;
            }
        }
    }
}

/// Model, optimizer and progress: everything a resumed run needs.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub net: DualArbNet<f32>,
    pub adam: Adam,
    /// Next epoch to run.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: u64,
    pub best_valid_psnr: f64,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let net = DualArbNet::init(config.model.clone())?;
        let adam = Adam::new(&config.model);
        Ok(TrainState {
            config,
            net,
            adam,
            epoch: 0,
            step: 0,
            best_valid_psnr: f64::NEG_INFINITY,
        })
    }
}

/// Mean loss and gradient over a batch; per-sample work may run in
/// parallel, the reduction is in sample order.
pub fn batch_gradient(
    net: &DualArbNet<f32>,
    batch: &[Sample],
    opts: &LossOptions,
) -> Result<(LossReport, ParameterSet<f32>, Vec<usize>)> {
    let inv = 1.0 / batch.len() as f32;
    let per_sample: Vec<Result<(LossReport, ParameterSet<f32>)>> = batch
        .par_iter()
        .map(|s| {
            let reference = net.config.use_ref.then_some(&s.reference);
            let (sr, cache) = net.forward_train(&s.tar_lr, reference, &s.task)?;
            let (report, mut g) = full_loss_with_grad(&sr, &s.hr, &s.mask, opts)?;
            g.data.iter_mut().for_each(|v| *v *= inv);
            Ok((report, net.backward(&cache, &g)))
        })
        .collect();
    let mut grad = ParameterSet::zeros(&net.config);
    let (mut l_rec, mut l_k) = (0.0, 0.0);
    let mut bad = Vec::new();
    let mut lambda = 0.0;
    for (i, r) in per_sample.into_iter().enumerate() {
        match r {
            Ok((rep, g)) if rep.l_full.is_finite() && g.is_finite() => {
                l_rec += rep.l_rec;
                l_k += rep.l_k;
                lambda = rep.lambda_k;
                grad.add_assign(&g);
            }
            Ok(_) | Err(Error::NonFinite(_)) => bad.push(i),
            Err(e) => return Err(e),
        }
    }
    let n = batch.len() as f64;
    let (l_rec, l_k) = (l_rec / n, l_k / n);
    Ok((
        LossReport {
            l_rec,
            l_k,
            l_full: l_rec + lambda * l_k,
            lambda_k: lambda,
        },
        grad,
        bad,
    ))
}

/// One Adam step on `batch` at learning rate `lr`.
pub fn train_step(state: &mut TrainState, batch: &[Sample], lr: f64, epoch: usize) -> Result<LossReport> {
    let opts = state.config.loss_options();
    let (report, grad, bad) = batch_gradient(&state.net, batch, &opts)?;
    if !bad.is_empty() {
        return Err(Error::NonFiniteLoss {
            epoch,
            step: state.step as usize,
            samples: bad
                .iter()
                .map(|&i| format!("#{i} pair {} t{}", batch[i].pair, batch[i].transform))
                .collect(),
        });
    }
    state.adam.update(&mut state.net.params, &grad, lr);
    state.step += 1;
    Ok(report)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: u64,
    pub stage: Stage,
    pub lr: f64,
    pub l_rec: f64,
    pub l_k: f64,
    pub l_full: f64,
    pub s: f64,
    pub ref_mode: RefMode,
}

/// Mean PSNR of whole-slice reconstructions with HR references.
pub fn validate_psnr(net: &DualArbNet<f32>, data: &PairSet, scales: &[f64], max_pairs: Option<usize>) -> Result<f64> {
    let n = max_pairs.unwrap_or(data.len()).min(data.len());
    let jobs: Vec<(usize, f64)> = (0..n).flat_map(|i| scales.iter().map(move |&s| (i, s))).collect();
    let values: Vec<Result<f64>> = jobs
        .par_iter()
        .map(|&(i, s)| {
            let (tar, reference) = &data.pairs[i];
            let lr_dims = crate::kspace::lr_dims_for(tar.dims(), s);
            let lr = degrade_to(&tar.cast::<f64>(), lr_dims)?.cast::<f32>();
            let task = ScaleTask::new(lr_dims, reference.dims(), tar.dims(), RefMode::Hr)?;
            let out = net.forward(&lr, Some(reference), &task, false)?;
            psnr(&out.sr_tar.map(|v| v.clamp(0.0, 1.0)), tar, 1.0)
        })
        .collect();
    let values = values.into_iter().collect::<Result<Vec<_>>>()?;
    if values.is_empty() {
        return Ok(f64::NAN);
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub stage: Stage,
    pub lr: f64,
    pub mean_l_full: f64,
    pub valid_psnr: Option<f64>,
    pub improved: bool,
}

pub fn steps_per_epoch(config: &TrainConfig, train: &PairSet) -> usize {
    config
        .steps_per_epoch
        .unwrap_or_else(|| train.len().div_ceil(config.batch_size).max(1))
}

/// Runs epoch `state.epoch`, reporting every step to `on_step`.
pub fn run_epoch(
    state: &mut TrainState,
    train: &PairSet,
    valid: Option<&PairSet>,
    on_step: &mut dyn FnMut(&LogRecord) -> Result<()>,
) -> Result<EpochSummary> {
    let epoch = state.epoch;
    let stage = state.config.schedule.stage_for_epoch(epoch)?;
    let steps = steps_per_epoch(&state.config, train);
    let mut total = 0.0;
    for step in 0..steps {
        let (draw, batch) = sample_batch(
            train,
            &stage,
            state.config.seed,
            epoch,
            step,
            state.config.batch_size,
            state.config.lr_patch,
        )?;
        let report = train_step(state, &batch, stage.lr, epoch)?;
        total += report.l_full;
        on_step(&LogRecord {
            epoch,
            step: state.step,
            stage: stage.stage,
            lr: stage.lr,
            l_rec: report.l_rec,
            l_k: report.l_k,
            l_full: report.l_full,
            s: batch[0].task.s_tar.value(),
            ref_mode: draw.reference.mode,
        })?;
    }
    let valid_psnr = match valid {
        Some(v) if !v.is_empty() && !state.config.valid_scales.is_empty() => Some(validate_psnr(
            &state.net,
            v,
            &state.config.valid_scales,
            state.config.valid_pairs,
        )?),
        _ => None,
    };
    let improved = valid_psnr.is_some_and(|p| p > state.best_valid_psnr);
    if improved {
        state.best_valid_psnr = valid_psnr.unwrap();
    }
    state.epoch += 1;
    Ok(EpochSummary {
        epoch,
        stage: stage.stage,
        lr: stage.lr,
        mean_l_full: total / steps as f64,
        valid_psnr,
        improved,
    })
}

/// Files written by [`fit`] under its output directory.
pub const LOG_FILE: &str = "train_log.jsonl";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// Runs epochs from `state.epoch` to the end of the schedule (or at most
/// `max_epochs` of them). With `out_dir`, appends the step log and writes
/// the last and best checkpoints after every epoch.
pub fn fit(
    state: &mut TrainState,
    train: &PairSet,
    valid: Option<&PairSet>,
    out_dir: Option<&std::path::Path>,
    max_epochs: Option<usize>,
    on_epoch: &mut dyn FnMut(&EpochSummary),
) -> Result<Vec<EpochSummary>> {
    use std::io::Write;
    let total = state.config.schedule.total_epochs();
    let end = max_epochs.map_or(total, |m| (state.epoch + m).min(total));
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            let f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((std::io::BufWriter::new(f), path))
        }
        None => None,
    };
    let mut summaries = Vec::new();
    while state.epoch < end {
        let summary = run_epoch(state, train, valid, &mut |rec| {
            if let Some((w, path)) = log.as_mut() {
                let line = serde_json::to_string(rec)?;
                writeln!(w, "{line}").map_err(|e| Error::io(&*path, e))?;
            }
            Ok(())
        })?;
        if let Some(dir) = out_dir {
            if let Some((w, path)) = log.as_mut() {
                w.flush().map_err(|e| Error::io(&*path, e))?;
            }
            crate::checkpoint::save_checkpoint(state, &dir.join(LAST_CHECKPOINT))?;
            if summary.improved || (summary.valid_psnr.is_none() && state.epoch == end) {
                crate::checkpoint::save_checkpoint(state, &dir.join(BEST_CHECKPOINT))?;
            }
        }
        log::info!(
            "epoch {} ({}, lr {:e}): l_full {:.5}, valid psnr {:?}",
            summary.epoch,
            summary.stage,
            summary.lr,
            summary.mean_l_full,
            summary.valid_psnr
        );
        on_epoch(&summary);
        summaries.push(summary);
    }
    Ok(summaries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dihedral_group_laws() {
        let p = Plane::from_fn(4, 4, |i, j| (i * 4 + j) as f64);
        assert_eq!(dihedral(&p, 0).unwrap(), p);
        let flip = dihedral(&p, 4).unwrap();
        assert_eq!(dihedral(&flip, 4).unwrap(), p);
        assert_eq!(flip.get(0, 0), 3.0);
        let mut q = p.clone();
        for _ in 0..4 {
            q = dihedral(&q, 1).unwrap();
        }
        assert_eq!(q, p);
        // quarter turn counter-clockwise: top-right corner moves to top-left
        assert_eq!(dihedral(&p, 1).unwrap().get(0, 0), 3.0);
        let all: Vec<_> = (0..8).map(|t| dihedral(&p, t).unwrap().data).collect();
        for a in 0..8 {
            for b in a + 1..8 {
                assert_ne!(all[a], all[b]);
            }
        }
        assert!(dihedral(&Plane::from_fn(2, 3, |_, _| 0.0), 1).is_err());
        assert!(dihedral(&Plane::from_fn(2, 3, |_, _| 0.0), 2).is_ok());
    }

    #[test]
    fn adam_first_step_matches_hand_recurrence() {
        let cfg = ModelConfig::tiny();
        let mut params = ParameterSet::<f32>::zeros(&cfg);
        let mut grad = ParameterSet::<f32>::zeros(&cfg);
        grad.arrays_mut()[0].1[0] = 1.0;
        let mut adam = Adam::new(&cfg);
        adam.update(&mut params, &grad, 1e-4);
        let p = params.arrays()[0].1[0] as f64;
        assert!((p - (-1e-4 / (1.0 + 1e-8))).abs() < 1e-10);
        assert_eq!(params.arrays()[0].1[1], 0.0);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let cfg = ModelConfig::tiny();
        let mut params: ParameterSet<f32> = crate::model::init_params(&cfg).unwrap();
        let before = params.clone();
        let mut adam = Adam::new(&cfg);
        adam.update(&mut params, &ParameterSet::zeros(&cfg), 1e-4);
        assert_eq!(params, before);
        assert_eq!(adam.t, 1);
    }
}
