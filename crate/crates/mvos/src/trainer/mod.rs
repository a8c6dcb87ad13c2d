//! Training and inference procedures: two-phase training (static images with
//! recurrence bypassed, then full video clips), dual learning rates, early
//! stopping on held-out J-mean, optional per-sequence online fine-tuning, and
//! the multi-object inference loop with gaussian-blob self-feedback.

mod optim;

pub use optim::{OptimKind, Optimizer};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::convlstm::{ConvLstmState, StateVars};
use crate::error::{Error, Result};
use crate::losses;
use crate::mask::{Image, Mask};
use crate::metrics::jaccard;
use crate::modulators::{crop_and_resize, fit_blob, render_blob, visual_modulate_params};
use crate::scalar::Scalar;
use crate::segnet::{predict_mask, probabilities, FrameMods, Recurrence, RecurrentState, SegNet};
use crate::synthdata::{AffineJitter, VideoSample};
use crate::tensor::{checkpoint, Parameter, Tape, Tensor};

/// Which conditioning/recurrence components are live; the ablation arms of
/// the benchmark are exactly the four corners that matter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArmConfig {
    pub use_recurrence: bool,
    pub use_visual_mod: bool,
    pub use_spatial_mod: bool,
}

impl ArmConfig {
    pub fn full() -> ArmConfig {
        ArmConfig {
            use_recurrence: true,
            use_visual_mod: true,
            use_spatial_mod: true,
        }
    }

    pub fn no_recurrence() -> ArmConfig {
        ArmConfig {
            use_recurrence: false,
            ..ArmConfig::full()
        }
    }

    pub fn no_visual() -> ArmConfig {
        ArmConfig {
            use_visual_mod: false,
            ..ArmConfig::full()
        }
    }

    pub fn no_spatial() -> ArmConfig {
        ArmConfig {
            use_spatial_mod: false,
            ..ArmConfig::full()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Lovasz,
    Bce,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr_non_recurrent: f64,
    pub lr_recurrent: f64,
    pub optimizer: OptimKind,
    pub loss: LossKind,
    pub batch: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub bptt_len: usize,
    /// Frames per validation sequence during early stopping; 0 = all.
    pub val_frames: usize,
    pub jitter: AffineJitter,
    pub arm: ArmConfig,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_non_recurrent: 1e-4,
            lr_recurrent: 1e-3,
            optimizer: OptimKind::adam_default(),
            loss: LossKind::Lovasz,
            batch: 1,
            max_epochs: 12,
            early_stop_patience: 3,
            bptt_len: 8,
            val_frames: 0,
            jitter: AffineJitter {
                max_shift: 4.0,
                scale_lo: 0.9,
                scale_hi: 1.1,
                max_rotation_deg: 10.0,
                seed: 0,
            },
            arm: ArmConfig::full(),
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_non_recurrent <= 0.0 || self.lr_recurrent <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.early_stop_patience < 1 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if self.batch < 1 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if self.bptt_len < 2 {
            return Err(Error::Config("bptt_len must be >= 2 for video training".into()));
        }
        self.jitter.validate()
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneConfig {
    pub iterations: usize,
    pub lr: f64,
    pub jitter: AffineJitter,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            iterations: 100,
            lr: 1e-4,
            jitter: AffineJitter {
                max_shift: 6.0,
                scale_lo: 0.85,
                scale_hi: 1.15,
                max_rotation_deg: 15.0,
                seed: 0,
            },
        }
    }
}

/// Where the spatial prior's mask came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlobSource {
    /// Ground-truth previous-frame masks (training).
    TeacherForced,
    /// The model's own previous predictions (inference).
    SelfFeedback,
}

#[derive(Debug, Clone)]
pub struct EpochStat {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub j_mean: f64,
}

pub fn history_to_csv(history: &[EpochStat]) -> String {
    let mut s = String::from("epoch,split,loss,j_mean\n");
    for r in history {
        s.push_str(&format!("{},{},{},{}\n", r.epoch, r.split, r.loss, r.j_mean));
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<EpochStat>,
    pub best_epoch: usize,
    pub best_val_j: f64,
    pub skipped_empty: usize,
    pub blob_source: BlobSource,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<VideoSample>,
    pub val: Vec<VideoSample>,
}

// ---- shared helpers -------------------------------------------------------

fn snapshot<E: Scalar>(model: &SegNet<E>) -> Vec<Vec<E>> {
    model.parameters().iter().map(|p| p.value.data.clone()).collect()
}

fn restore<E: Scalar>(model: &mut SegNet<E>, snap: &[Vec<E>]) {
    for (p, s) in model.parameters_mut().into_iter().zip(snap) {
        p.value.data.copy_from_slice(s);
    }
}

fn save_checkpoint<E: Scalar>(model: &SegNet<E>, path: &Path) -> Result<()> {
    checkpoint::save(path, &model.parameters())
}

/// Accumulate this tape's parameter gradients, scaled, into `acc`.
fn accumulate_grads<E: Scalar>(
    params: &[&Parameter<E>],
    tape: &Tape<E>,
    scale: E,
    acc: &mut [Option<Vec<E>>],
) {
    for (i, p) in params.iter().enumerate() {
        if let Some(g) = tape.param_grad(p) {
            let dst = acc[i].get_or_insert_with(|| vec![E::ZERO; g.len()]);
            for (d, &v) in dst.iter_mut().zip(g) {
                *d += v * scale;
            }
        }
    }
}

/// Object crop for the visual modulator, optionally from jointly jittered
/// (frame, mask); falls back to the unjittered pair when the jitter empties
/// the mask.
fn object_crop<E: Scalar>(
    frame: &Image,
    mask: &Mask,
    crop_size: usize,
    jitter: Option<(&AffineJitter, u64)>,
) -> Result<Tensor<E>> {
    if let Some((j, draw)) = jitter {
        let d = j.sample(draw);
        let mj = crate::synthdata::warp_mask(mask, &d);
        if !mj.is_empty_mask() {
            let fj = crate::synthdata::warp_image(frame, &d);
            return crop_and_resize(&fj.to_tensor::<E>(), &mj, crop_size);
        }
    }
    crop_and_resize(&frame.to_tensor::<E>(), mask, crop_size)
}

/// Full-resolution location heatmap from a mask, optionally jittered (with
/// empty-jitter fallback). The mask itself must be non-empty.
fn heatmap_from_mask<E: Scalar>(mask: &Mask, jitter: Option<(&AffineJitter, u64)>) -> Result<Tensor<E>> {
    let source = match jitter {
        Some((j, draw)) => {
            let mj = j.apply_mask(mask, draw);
            if mj.is_empty_mask() {
                mask.clone()
            } else {
                mj
            }
        }
        None => mask.clone(),
    };
    let blob = fit_blob(&source)?;
    Ok(render_blob(&blob, mask.h, mask.w))
}

/// Last non-empty ground-truth mask at or before `t - 1` (frame 0 for t=0);
/// teacher forcing walks back past fully occluded frames.
fn teacher_blob_mask<'a>(seq: &'a [Mask], t: usize) -> &'a Mask {
    let mut i = t.saturating_sub(1);
    loop {
        if !seq[i].is_empty_mask() {
            return &seq[i];
        }
        if i == 0 {
            return &seq[0];
        }
        i -= 1;
    }
}

fn record_loss<E: Scalar>(
    kind: LossKind,
    tape: &mut Tape<E>,
    logits: crate::tensor::VarId,
    gt: &Mask,
) -> Result<crate::tensor::VarId> {
    match kind {
        LossKind::Lovasz => losses::lovasz_hinge(tape, logits, gt),
        LossKind::Bce => losses::bce_with_logits(tape, logits, gt),
    }
}

// ---- phase 1: static images, recurrence bypassed --------------------------

pub fn train_phase1<E: Scalar>(
    model: &mut SegNet<E>,
    corpus: &Corpus,
    cfg: &TrainConfig,
    sink: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if corpus.train.is_empty() {
        return Err(Error::Data("phase 1: empty training corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, &model.parameters());
    let mut draw_counter: u64 = 0;
    let mut skipped_empty = 0usize;

    let mut history = Vec::new();
    let mut best_val_j = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_snap = snapshot(model);
    let mut since_best = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..corpus.train.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_j = 0.0;
        let mut steps = 0usize;

        let mut batch_count = 0usize;
        let mut acc: Vec<Option<Vec<E>>> = vec![None; model.parameters().len()];
        for &si in &order {
            let sample = &corpus.train[si];
            let obj = rng.gen_range(0..sample.masks.len());
            let gt = &sample.masks[obj][0];
            if gt.is_empty_mask() {
                skipped_empty += 1;
                continue;
            }
            let frame = &sample.frames[0];
            let mut tape = Tape::new();
            let gamma_vars = if cfg.arm.use_visual_mod {
                let crop = object_crop::<E>(frame, gt, model.config.crop_size, Some((&cfg.jitter, draw_counter)))?;
                draw_counter += 1;
                let crop = tape.leaf(crop);
                Some(model.vm.forward(&mut tape, crop)?)
            } else {
                None
            };
            let beta_vars = if cfg.arm.use_spatial_mod {
                let heat = heatmap_from_mask::<E>(gt, Some((&cfg.jitter, draw_counter)))?;
                draw_counter += 1;
                Some(model.sm.forward(&mut tape, &heat, &model.config.modulated_stage_dims())?)
            } else {
                None
            };
            let f = tape.leaf(frame.to_tensor());
            let fm = FrameMods {
                gammas: gamma_vars.as_deref(),
                betas: beta_vars.as_deref(),
            };
            let (logits, _) = model.forward_frame_tape(&mut tape, f, fm, Recurrence::Bypass)?;
            let loss = record_loss(cfg.loss, &mut tape, logits, gt)?;
            tape.backward(loss)?;
            epoch_loss += tape.value(loss).item().to_f64();
            epoch_j += jaccard(&predict_mask(&tape.detach(logits), cfg.threshold)?, gt)?;
            steps += 1;
            accumulate_grads(
                &model.parameters(),
                &tape,
                E::from_f64(1.0 / cfg.batch as f64),
                &mut acc,
            );
            batch_count += 1;
            if batch_count == cfg.batch {
                let mut refs = model.parameters_mut();
                opt.step(&mut refs, &acc, cfg.lr_recurrent, cfg.lr_non_recurrent, true);
                acc = vec![None; refs.len()];
                batch_count = 0;
            }
        }
        if batch_count > 0 {
            let mut refs = model.parameters_mut();
            opt.step(&mut refs, &acc, cfg.lr_recurrent, cfg.lr_non_recurrent, true);
        }
        if steps == 0 {
            return Err(Error::Data("phase 1: every drawn sample had an empty mask".into()));
        }

        let (val_loss, val_j) = eval_static(model, &corpus.val, cfg)?;
        history.push(EpochStat {
            epoch,
            split: "train",
            loss: epoch_loss / steps as f64,
            j_mean: epoch_j / steps as f64,
        });
        history.push(EpochStat {
            epoch,
            split: "val",
            loss: val_loss,
            j_mean: val_j,
        });

        if val_j > best_val_j {
            best_val_j = val_j;
            best_epoch = epoch;
            best_snap = snapshot(model);
            since_best = 0;
            if let Some(dir) = sink {
                save_checkpoint(model, &dir.join("best.ckpt"))?;
            }
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                break;
            }
        }
    }

    if let Some(dir) = sink {
        save_checkpoint(model, &dir.join("final.ckpt"))?;
        std::fs::write(dir.join("history.csv"), history_to_csv(&history))?;
    }
    restore(model, &best_snap);
    Ok(TrainReport {
        history,
        best_epoch,
        best_val_j,
        skipped_empty,
        blob_source: BlobSource::TeacherForced,
    })
}

/// Validation for phase 1: single-frame bypass forward with unjittered
/// modulator inputs; returns (mean loss, mean J).
fn eval_static<E: Scalar>(model: &SegNet<E>, samples: &[VideoSample], cfg: &TrainConfig) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut j_sum = 0.0;
    let mut n = 0usize;
    for sample in samples {
        let frame = &sample.frames[0];
        for seq in &sample.masks {
            let gt = &seq[0];
            if gt.is_empty_mask() {
                continue;
            }
            let mut tape = Tape::new();
            let gamma_vars = if cfg.arm.use_visual_mod {
                let crop = object_crop::<E>(frame, gt, model.config.crop_size, None)?;
                let crop = tape.leaf(crop);
                Some(model.vm.forward(&mut tape, crop)?)
            } else {
                None
            };
            let beta_vars = if cfg.arm.use_spatial_mod {
                let heat = heatmap_from_mask::<E>(gt, None)?;
                Some(model.sm.forward(&mut tape, &heat, &model.config.modulated_stage_dims())?)
            } else {
                None
            };
            let f = tape.leaf(frame.to_tensor());
            let fm = FrameMods {
                gammas: gamma_vars.as_deref(),
                betas: beta_vars.as_deref(),
            };
            let (logits, _) = model.forward_frame_tape(&mut tape, f, fm, Recurrence::Bypass)?;
            let loss = record_loss(cfg.loss, &mut tape, logits, gt)?;
            loss_sum += tape.value(loss).item().to_f64();
            j_sum += jaccard(&predict_mask(&tape.detach(logits), cfg.threshold)?, gt)?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Data("phase 1 validation: no scoreable objects".into()));
    }
    Ok((loss_sum / n as f64, j_sum / n as f64))
}

// ---- phase 2: video clips, full recurrence ---------------------------------

pub fn train_phase2<E: Scalar>(
    model: &mut SegNet<E>,
    corpus: &Corpus,
    cfg: &TrainConfig,
    sink: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if corpus.train.is_empty() {
        return Err(Error::Data("phase 2: empty training corpus".into()));
    }
    for (i, s) in corpus.train.iter().chain(&corpus.val).enumerate() {
        if s.len() < cfg.bptt_len {
            return Err(Error::Data(format!(
                "phase 2: sequence {i} shorter ({}) than bptt_len ({})",
                s.len(),
                cfg.bptt_len
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9E37));
    let mut opt = Optimizer::new(cfg.optimizer, &model.parameters());
    let mut draw_counter: u64 = 1 << 32;
    let mut skipped_empty = 0usize;

    let mut history = Vec::new();
    let mut best_val_j = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_snap = snapshot(model);
    let mut since_best = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..corpus.train.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_j = 0.0;
        let mut steps = 0usize;
        let mut batch_count = 0usize;
        let mut acc: Vec<Option<Vec<E>>> = vec![None; model.parameters().len()];

        for &si in &order {
            let sample = &corpus.train[si];
            let obj = rng.gen_range(0..sample.masks.len());
            let gt_seq = &sample.masks[obj];
            if gt_seq[0].is_empty_mask() {
                skipped_empty += 1;
                continue;
            }
            let start = rng.gen_range(0..=sample.len() - cfg.bptt_len);

            let mut tape = Tape::new();
            let gamma_vars = if cfg.arm.use_visual_mod {
                let crop = object_crop::<E>(
                    &sample.frames[0],
                    &gt_seq[0],
                    model.config.crop_size,
                    Some((&cfg.jitter, draw_counter)),
                )?;
                draw_counter += 1;
                let crop = tape.leaf(crop);
                Some(model.vm.forward(&mut tape, crop)?)
            } else {
                None
            };

            let mut states: Option<Vec<StateVars>> = cfg.arm.use_recurrence.then(|| {
                model
                    .init_state()
                    .states
                    .iter()
                    .map(|s| StateVars::bind(&mut tape, s))
                    .collect()
            });

            let mut frame_losses = Vec::with_capacity(cfg.bptt_len);
            let mut last_logits = None;
            for i in 0..cfg.bptt_len {
                let t = start + i;
                let beta_vars = if cfg.arm.use_spatial_mod {
                    let src = teacher_blob_mask(gt_seq, t);
                    let heat = heatmap_from_mask::<E>(src, Some((&cfg.jitter, draw_counter)))?;
                    draw_counter += 1;
                    Some(model.sm.forward(&mut tape, &heat, &model.config.modulated_stage_dims())?)
                } else {
                    None
                };
                let f = tape.leaf(sample.frames[t].to_tensor());
                let fm = FrameMods {
                    gammas: gamma_vars.as_deref(),
                    betas: beta_vars.as_deref(),
                };
                let logits = match &states {
                    Some(sv) => {
                        let (logits, new_states) =
                            model.forward_frame_tape(&mut tape, f, fm, Recurrence::Active(sv))?;
                        states = Some(new_states.unwrap());
                        logits
                    }
                    None => {
                        let (logits, _) = model.forward_frame_tape(&mut tape, f, fm, Recurrence::Bypass)?;
                        logits
                    }
                };
                frame_losses.push(record_loss(cfg.loss, &mut tape, logits, &gt_seq[t])?);
                last_logits = Some((logits, t));
            }
            let mut total = frame_losses[0];
            for &l in &frame_losses[1..] {
                total = tape.add(total, l)?;
            }
            let loss = tape.scale(total, E::from_f64(1.0 / frame_losses.len() as f64))?;
            tape.backward(loss)?;
            epoch_loss += tape.value(loss).item().to_f64();
            if let Some((logits, t)) = last_logits {
                epoch_j += jaccard(&predict_mask(&tape.detach(logits), cfg.threshold)?, &gt_seq[t])?;
            }
            steps += 1;
            accumulate_grads(
                &model.parameters(),
                &tape,
                E::from_f64(1.0 / cfg.batch as f64),
                &mut acc,
            );
            batch_count += 1;
            if batch_count == cfg.batch {
                let mut refs = model.parameters_mut();
                opt.step(&mut refs, &acc, cfg.lr_recurrent, cfg.lr_non_recurrent, false);
                acc = vec![None; refs.len()];
                batch_count = 0;
            }
        }
        if batch_count > 0 {
            let mut refs = model.parameters_mut();
            opt.step(&mut refs, &acc, cfg.lr_recurrent, cfg.lr_non_recurrent, false);
        }
        if steps == 0 {
            return Err(Error::Data("phase 2: every drawn clip had an empty first mask".into()));
        }

        let val_j = eval_videos(model, &corpus.val, cfg)?;
        history.push(EpochStat {
            epoch,
            split: "train",
            loss: epoch_loss / steps as f64,
            j_mean: epoch_j / steps as f64,
        });
        history.push(EpochStat {
            epoch,
            split: "val",
            loss: f64::NAN,
            j_mean: val_j,
        });

        if val_j > best_val_j {
            best_val_j = val_j;
            best_epoch = epoch;
            best_snap = snapshot(model);
            since_best = 0;
            if let Some(dir) = sink {
                save_checkpoint(model, &dir.join("best.ckpt"))?;
            }
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                break;
            }
        }
    }

    if let Some(dir) = sink {
        save_checkpoint(model, &dir.join("final.ckpt"))?;
        std::fs::write(dir.join("history.csv"), history_to_csv(&history))?;
    }
    restore(model, &best_snap);
    Ok(TrainReport {
        history,
        best_epoch,
        best_val_j,
        skipped_empty,
        blob_source: BlobSource::TeacherForced,
    })
}

/// Mean per-object, per-frame J of full self-feedback inference over a
/// validation set, optionally truncated to the first `val_frames` frames.
fn eval_videos<E: Scalar>(model: &SegNet<E>, samples: &[VideoSample], cfg: &TrainConfig) -> Result<f64> {
    let mut j_sum = 0.0;
    let mut n = 0usize;
    for sample in samples {
        let t_cap = if cfg.val_frames == 0 {
            sample.len()
        } else {
            sample.len().min(cfg.val_frames.max(2))
        };
        let frames = &sample.frames[..t_cap];
        let masks0: Vec<(u32, Mask)> = sample
            .object_ids
            .iter()
            .zip(&sample.masks)
            .map(|(&id, seq)| (id, seq[0].clone()))
            .collect();
        let out = infer_sequence(model, frames, &masks0, cfg.threshold, &cfg.arm)?;
        for ((_, pred_seq), gt_seq) in out.sequences.iter().zip(&sample.masks) {
            for t in 1..t_cap {
                j_sum += jaccard(&pred_seq[t], &gt_seq[t])?;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Data("phase 2 validation: nothing to score".into()));
    }
    Ok(j_sum / n as f64)
}

// ---- online fine-tuning ----------------------------------------------------

/// Adapt a clone of the model to one test sequence by training on jittered
/// copies of its first frame. The input model is untouched.
pub fn online_finetune<E: Scalar>(
    model: &SegNet<E>,
    frame0: &Image,
    masks0: &[(u32, Mask)],
    fcfg: &FinetuneConfig,
    arm: &ArmConfig,
) -> Result<SegNet<E>> {
    for (id, m) in masks0 {
        if m.is_empty_mask() {
            return Err(Error::Data(format!("online finetune: empty frame-0 mask for object {id}")));
        }
    }
    let mut tuned = model.clone();
    if fcfg.iterations == 0 {
        return Ok(tuned);
    }
    let mut opt = Optimizer::new(OptimKind::adam_default(), &tuned.parameters());
    for iter in 0..fcfg.iterations {
        let (_, mask0) = &masks0[iter % masks0.len()];
        let d = fcfg.jitter.sample(iter as u64);
        let mut fj = crate::synthdata::warp_image(frame0, &d);
        let mut mj = crate::synthdata::warp_mask(mask0, &d);
        if mj.is_empty_mask() {
            fj = frame0.clone();
            mj = mask0.clone();
        }
        let mut tape = Tape::new();
        let gamma_vars = if arm.use_visual_mod {
            let crop = crop_and_resize(&fj.to_tensor::<E>(), &mj, tuned.config.crop_size)?;
            let crop = tape.leaf(crop);
            Some(tuned.vm.forward(&mut tape, crop)?)
        } else {
            None
        };
        let beta_vars = if arm.use_spatial_mod {
            let blob = fit_blob(&mj)?;
            let heat: Tensor<E> = render_blob(&blob, mj.h, mj.w);
            Some(tuned.sm.forward(&mut tape, &heat, &tuned.config.modulated_stage_dims())?)
        } else {
            None
        };
        let f = tape.leaf(fj.to_tensor());
        let fm = FrameMods {
            gammas: gamma_vars.as_deref(),
            betas: beta_vars.as_deref(),
        };
        let logits = if arm.use_recurrence {
            let states: Vec<StateVars> = tuned
                .init_state()
                .states
                .iter()
                .map(|s| StateVars::bind(&mut tape, s))
                .collect();
            let (logits, _) = tuned.forward_frame_tape(&mut tape, f, fm, Recurrence::Active(&states))?;
            logits
        } else {
            let (logits, _) = tuned.forward_frame_tape(&mut tape, f, fm, Recurrence::Bypass)?;
            logits
        };
        let loss = losses::lovasz_hinge(&mut tape, logits, &mj)?;
        tape.backward(loss)?;
        let mut acc: Vec<Option<Vec<E>>> = vec![None; tuned.parameters().len()];
        accumulate_grads(&tuned.parameters(), &tape, E::ONE, &mut acc);
        let mut refs = tuned.parameters_mut();
        // uniform rate for all components
        opt.step(&mut refs, &acc, fcfg.lr, fcfg.lr, false);
    }
    Ok(tuned)
}

// ---- inference --------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct InferReport {
    /// Pairwise-disjoint per-object mask sequences; frame 0 is the given mask.
    pub sequences: Vec<(u32, Vec<Mask>)>,
    /// Frames where an empty prediction forced the blob prior to fall back
    /// to the last non-empty mask.
    pub fallback_frames: usize,
    pub blob_source: BlobSource,
}

/// Semi-supervised multi-object inference: per object, gamma comes from its
/// first-frame crop and beta from the blob of its previous prediction; the
/// per-pixel merge keeps the highest probability above threshold (lowest
/// object id on ties), then splits back into disjoint binary masks.
pub fn infer_sequence<E: Scalar>(
    model: &SegNet<E>,
    frames: &[Image],
    masks0: &[(u32, Mask)],
    threshold: f64,
    arm: &ArmConfig,
) -> Result<InferReport> {
    if frames.is_empty() {
        return Err(Error::Data("infer_sequence: no frames".into()));
    }
    if masks0.is_empty() {
        return Err(Error::Data("infer_sequence: no objects".into()));
    }
    for (id, m) in masks0 {
        if m.is_empty_mask() {
            return Err(Error::Data(format!("infer_sequence: empty frame-0 mask for object {id}")));
        }
        if m.h != frames[0].h || m.w != frames[0].w {
            return Err(Error::dim("height", frames[0].h, m.h, "frame-0 mask"));
        }
    }
    let n_obj = masks0.len();
    let (h, w) = (frames[0].h, frames[0].w);
    let dims = model.config.modulated_stage_dims();

    let gammas: Vec<Option<Vec<Vec<E>>>> = masks0
        .iter()
        .map(|(_, m)| -> Result<Option<Vec<Vec<E>>>> {
            if arm.use_visual_mod {
                let crop = crop_and_resize(&frames[0].to_tensor::<E>(), m, model.config.crop_size)?;
                Ok(Some(visual_modulate_params(&model.vm, &crop)?))
            } else {
                Ok(None)
            }
        })
        .collect::<Result<_>>()?;

    let mut states: Vec<RecurrentState<E>> = (0..n_obj).map(|_| model.init_state()).collect();
    let mut prev: Vec<Mask> = masks0.iter().map(|(_, m)| m.clone()).collect();
    let mut outputs: Vec<Vec<Mask>> = masks0.iter().map(|(_, m)| vec![m.clone()]).collect();
    let mut fallback_frames = 0usize;

    let frame_tensors: Vec<Tensor<E>> = frames.iter().map(|f| f.to_tensor()).collect();

    // frame 0 builds the recurrent state; its output is the given mask
    if arm.use_recurrence {
        for o in 0..n_obj {
            let (_, s) = run_one(
                model,
                &frame_tensors[0],
                gammas[o].as_deref(),
                arm.use_spatial_mod.then_some(&prev[o]),
                Some(&states[o]),
                &dims,
            )?;
            states[o] = s.unwrap();
        }
    }

    for t in 1..frames.len() {
        let mut probs: Vec<Vec<f64>> = Vec::with_capacity(n_obj);
        for o in 0..n_obj {
            let state = arm.use_recurrence.then_some(&states[o]);
            let (logits, s) = run_one(
                model,
                &frame_tensors[t],
                gammas[o].as_deref(),
                arm.use_spatial_mod.then_some(&prev[o]),
                state,
                &dims,
            )?;
            if let Some(s) = s {
                states[o] = s;
            }
            probs.push(probabilities(&logits));
        }
        let mut masks_t = merge_probabilities(&probs, h, w, threshold);
        for o in 0..n_obj {
            if masks_t[o].is_empty_mask() {
                fallback_frames += 1; // prior keeps the last non-empty mask
            } else {
                prev[o] = masks_t[o].clone();
            }
            outputs[o].push(masks_t[o].clone());
        }
    }

    Ok(InferReport {
        sequences: masks0
            .iter()
            .map(|(id, _)| *id)
            .zip(outputs)
            .map(|(id, seq)| (id, seq))
            .collect(),
        fallback_frames,
        blob_source: BlobSource::SelfFeedback,
    })
}

/// One value-level frame pass with optional conditioning and recurrence.
fn run_one<E: Scalar>(
    model: &SegNet<E>,
    frame: &Tensor<E>,
    gammas: Option<&[Vec<E>]>,
    blob_mask: Option<&Mask>,
    state: Option<&RecurrentState<E>>,
    dims: &[(usize, usize)],
) -> Result<(Tensor<E>, Option<RecurrentState<E>>)> {
    let mut tape = Tape::new();
    let gamma_vars = match gammas {
        Some(g) => Some(model.bind_gammas(&mut tape, g)?),
        None => None,
    };
    let beta_vars = match blob_mask {
        Some(m) => {
            let blob = fit_blob(m)?;
            let heat: Tensor<E> = render_blob(&blob, m.h, m.w);
            Some(model.sm.forward(&mut tape, &heat, dims)?)
        }
        None => None,
    };
    let f = tape.leaf(frame.clone());
    let fm = FrameMods {
        gammas: gamma_vars.as_deref(),
        betas: beta_vars.as_deref(),
    };
    match state {
        Some(st) => {
            let sv: Vec<StateVars> = st.states.iter().map(|s| StateVars::bind(&mut tape, s)).collect();
            let (logits, new_states) = model.forward_frame_tape(&mut tape, f, fm, Recurrence::Active(&sv))?;
            let new = RecurrentState {
                states: new_states
                    .unwrap()
                    .iter()
                    .map(|s| ConvLstmState {
                        h: tape.detach(s.h),
                        c: tape.detach(s.c),
                    })
                    .collect(),
            };
            Ok((tape.detach(logits), Some(new)))
        }
        None => {
            let (logits, _) = model.forward_frame_tape(&mut tape, f, fm, Recurrence::Bypass)?;
            Ok((tape.detach(logits), None))
        }
    }
}
