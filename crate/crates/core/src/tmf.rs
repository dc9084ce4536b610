//! Clip-wise temporal fusion transformer over concatenated per-frame
//! features.
//!
//! Per clip of `K` frames: input projection, sinusoidal positions over
//! `0..K`, a stack of pre-norm encoder blocks and a per-frame affine head
//! with the task activation. Positions past the end of a video (padding)
//! are zeroed before the projection, so their feature values never reach
//! the loss.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{clip_windows, Task, TaskSpec};
use crate::error::{Error, Result};
use crate::losses::task_loss_grad;
use crate::mae::{check_shapes, task_activation};
use crate::nn::layers::{encoder_block, init_block, linear, Dropout};
use crate::nn::posenc::sinusoidal_1d;
use crate::nn::{AdamW, Graph, Mat, NodeId, OptimizerSpec, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TmfConfig {
    /// Width of the concatenated input features.
    pub input_dim: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub clip_length: usize,
    /// Exclude padded positions from attention keys.
    #[serde(default)]
    pub mask_padded_attention: bool,
    pub task: TaskSpec,
}

impl TmfConfig {
    pub fn new(input_dim: usize, task: TaskSpec) -> Self {
        TmfConfig {
            input_dim,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            ff_dim: 256,
            dropout: 0.3,
            clip_length: 100,
            mask_padded_attention: false,
            task,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_dim == 0 || self.d_model == 0 || self.n_heads == 0 || self.ff_dim == 0 {
            return bad("tmf dimensions must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.clip_length == 0 {
            return bad("clip_length must be positive".into());
        }
        self.task.validate()
    }
}

/// One fixed-length training window of a video.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingClip {
    pub video_id: String,
    pub start: usize,
    /// `[K × d]`, zero past the end of the video.
    pub features: Mat,
    /// `[K × n_outputs]`, zero where not valid.
    pub labels: Mat,
    /// Frame inside the video and labelled.
    pub valid: Vec<bool>,
    /// Frame inside the video (labelled or not).
    pub in_video: Vec<bool>,
}

/// Cuts a video into non-overlapping clips of `k` frames. `targets[t]` is the
/// label row of frame `t` or `None` when unlabelled.
pub fn make_training_clips(
    video_id: &str,
    features: ArrayView2<f64>,
    targets: &[Option<Vec<f64>>],
    k: usize,
    n_outputs: usize,
) -> Result<Vec<TrainingClip>> {
    let n = features.nrows();
    if targets.len() != n {
        return Err(Error::Alignment(format!(
            "{video_id}: {n} feature rows but {} label rows",
            targets.len()
        )));
    }
    let d = features.ncols();
    clip_windows(n, k)?
        .into_iter()
        .map(|(start, len)| {
            let mut f = Array2::zeros((k, d));
            f.slice_mut(s![..len, ..])
                .assign(&features.slice(s![start..start + len, ..]));
            let mut labels = Array2::zeros((k, n_outputs));
            let mut valid = vec![false; k];
            for i in 0..len {
                if let Some(row) = &targets[start + i] {
                    if row.len() != n_outputs {
                        return Err(Error::arg(format!(
                            "{video_id}#{}: label row has {} values, expected {n_outputs}",
                            start + i,
                            row.len()
                        )));
                    }
                    labels.row_mut(i).assign(&ndarray::ArrayView1::from(row.as_slice()));
                    valid[i] = true;
                }
            }
            Ok(TrainingClip {
                video_id: video_id.to_string(),
                start,
                features: f,
                labels,
                valid,
                in_video: (0..k).map(|i| i < len).collect(),
            })
        })
        .collect()
}

/// Stacked clips.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipBatch {
    /// `[B × K × d]`
    pub features: Array3<f64>,
    /// `[B × K × n_outputs]`
    pub labels: Array3<f64>,
    /// `[B × K]`; labels at false positions are ignored by the loss.
    pub valid: Array2<bool>,
    /// `[B × K]`; false marks padding past the end of a video.
    pub in_video: Array2<bool>,
}

impl ClipBatch {
    pub fn from_clips(clips: &[&TrainingClip]) -> Result<Self> {
        let Some(first) = clips.first() else {
            return Err(Error::arg("empty clip batch"));
        };
        let (k, d) = first.features.dim();
        let n_out = first.labels.ncols();
        let b = clips.len();
        let mut batch = ClipBatch {
            features: Array3::zeros((b, k, d)),
            labels: Array3::zeros((b, k, n_out)),
            valid: Array2::from_elem((b, k), false),
            in_video: Array2::from_elem((b, k), false),
        };
        for (i, c) in clips.iter().enumerate() {
            if c.features.dim() != (k, d) || c.labels.dim() != (k, n_out) {
                return Err(Error::arg("clips in a batch differ in shape"));
            }
            batch.features.index_axis_mut(Axis(0), i).assign(&c.features);
            batch.labels.index_axis_mut(Axis(0), i).assign(&c.labels);
            for t in 0..k {
                batch.valid[[i, t]] = c.valid[t];
                batch.in_video[[i, t]] = c.in_video[t];
            }
        }
        Ok(batch)
    }

    pub fn size(&self) -> usize {
        self.features.dim().0
    }

    pub fn clip_length(&self) -> usize {
        self.features.dim().1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TmfModel {
    pub config: TmfConfig,
    pub params: ParamStore,
}

impl TmfModel {
    pub fn new(config: TmfConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        params.init_linear(&mut rng, "in_proj", config.input_dim, config.d_model);
        for l in 0..config.n_layers {
            init_block(&mut params, &mut rng, &format!("block{l}"), config.d_model, config.ff_dim);
        }
        params.init_linear(&mut rng, "head", config.d_model, config.task.n_outputs);
        Ok(TmfModel { config, params })
    }

    pub fn from_params(config: TmfConfig, params: ParamStore) -> Result<Self> {
        let fresh = Self::new(config, 0)?;
        check_shapes(&fresh.params, &params)?;
        Ok(TmfModel {
            config: fresh.config,
            params,
        })
    }

    fn check_clip(&self, features: ArrayView2<f64>) -> Result<()> {
        if features.nrows() != self.config.clip_length {
            return Err(Error::arg(format!(
                "clip has {} frames, model expects {}",
                features.nrows(),
                self.config.clip_length
            )));
        }
        if features.ncols() != self.config.input_dim {
            return Err(Error::arg(format!(
                "features have width {}, model expects {}",
                features.ncols(),
                self.config.input_dim
            )));
        }
        Ok(())
    }

    /// Graph for one clip; returns the activated outputs `[K × n_outputs]`.
    fn clip_graph(
        &self,
        g: &mut Graph,
        features: ArrayView2<f64>,
        in_video: &[bool],
        mut drop: Option<&mut Dropout<'_>>,
    ) -> NodeId {
        let cfg = &self.config;
        let mut x = features.to_owned();
        for (t, inside) in in_video.iter().enumerate() {
            if !inside {
                x.row_mut(t).fill(0.0);
            }
        }
        let x = g.constant(x);
        let x = linear(g, &self.params, "in_proj", x);
        let pos = g.constant(sinusoidal_1d(cfg.clip_length, cfg.d_model));
        let mut x = g.add(x, pos);
        let key_valid = cfg.mask_padded_attention.then_some(in_video);
        for l in 0..cfg.n_layers {
            x = encoder_block(
                g,
                &self.params,
                &format!("block{l}"),
                x,
                cfg.n_heads,
                key_valid,
                drop.as_deref_mut(),
            );
        }
        let logits = linear(g, &self.params, "head", x);
        task_activation(g, cfg.task.task, logits)
    }

    /// Predictions `[B × K × n_outputs]`. Dropout is active only when
    /// `training`, drawing from `dropout_seed`.
    pub fn forward(&self, batch: &ClipBatch, training: bool, dropout_seed: u64) -> Result<Array3<f64>> {
        let mut g = Graph::new();
        let outs = self.batch_graph(&mut g, batch, training, dropout_seed)?;
        let (b, k, _) = batch.features.dim();
        let mut out = Array3::zeros((b, k, self.config.task.n_outputs));
        for (i, id) in outs.iter().enumerate() {
            out.index_axis_mut(Axis(0), i).assign(g.value(*id));
        }
        Ok(out)
    }

    fn batch_graph(
        &self,
        g: &mut Graph,
        batch: &ClipBatch,
        training: bool,
        dropout_seed: u64,
    ) -> Result<Vec<NodeId>> {
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let mut drop = Dropout {
            p: self.config.dropout,
            rng: &mut rng,
        };
        let mut outs = Vec::with_capacity(batch.size());
        for i in 0..batch.size() {
            let f = batch.features.index_axis(Axis(0), i);
            self.check_clip(f)?;
            let in_video = batch.in_video.row(i).to_vec();
            let d = if training { Some(&mut drop) } else { None };
            outs.push(self.clip_graph(g, f, &in_video, d));
        }
        Ok(outs)
    }

    /// Loss over the valid frames of the batch, flattened across clips, and
    /// parameter gradients. `None` when the batch has too few valid frames
    /// for the task loss.
    pub fn loss_and_grads(
        &self,
        batch: &ClipBatch,
        training: bool,
        dropout_seed: u64,
    ) -> Result<Option<(f64, BTreeMap<String, Mat>)>> {
        let k = batch.clip_length();
        let rows: Vec<usize> = batch
            .valid
            .indexed_iter()
            .filter(|(_, v)| **v)
            .map(|((i, t), _)| i * k + t)
            .collect();
        let min_rows = if self.config.task.task == Task::Va { 2 } else { 1 };
        if rows.len() < min_rows {
            return Ok(None);
        }
        let mut g = Graph::new();
        let outs = self.batch_graph(&mut g, batch, training, dropout_seed)?;
        let all = if outs.len() == 1 { outs[0] } else { g.concat_rows(&outs) };
        let flat = g.gather_rows(all, &rows);
        let n_out = self.config.task.n_outputs;
        let labels = batch
            .labels
            .to_shape((batch.size() * k, n_out))
            .expect("contiguous labels")
            .select(Axis(0), &rows);
        let (l, grad) = task_loss_grad(&self.config.task, g.value(flat).view(), labels.view())?;
        let root = g.external_loss(flat, l, grad);
        Ok(Some((l, g.backward(root).into_params())))
    }

    /// Mean loss over the valid frames of `clips` without dropout.
    pub fn evaluate_loss(&self, clips: &[TrainingClip], batch_size: usize) -> Result<f64> {
        let mut total = 0.0;
        let mut n = 0usize;
        for chunk in clips.chunks(batch_size.max(1)) {
            let refs: Vec<&TrainingClip> = chunk.iter().collect();
            let batch = ClipBatch::from_clips(&refs)?;
            let n_valid = batch.valid.iter().filter(|v| **v).count();
            if let Some((l, _)) = self.loss_and_grads(&batch, false, 0)? {
                total += l * n_valid as f64;
                n += n_valid;
            }
        }
        if n == 0 {
            return Err(Error::arg("no valid frames to evaluate"));
        }
        Ok(total / n as f64)
    }

    /// One shuffled pass over `clips`, stopping early after `max_steps`
    /// optimiser steps.
    pub fn train_epoch(
        &mut self,
        clips: &[TrainingClip],
        opt: &mut AdamW,
        batch_size: usize,
        rng: &mut ChaCha8Rng,
        max_steps: Option<usize>,
    ) -> Result<EpochStats> {
        use rand::Rng;
        if clips.is_empty() {
            return Err(Error::arg("no training clips"));
        }
        if batch_size == 0 {
            return Err(Error::arg("batch size must be positive"));
        }
        let mut order: Vec<usize> = (0..clips.len()).collect();
        order.shuffle(rng);
        let mut stats = EpochStats::default();
        for chunk in order.chunks(batch_size) {
            if max_steps.is_some_and(|m| stats.step_losses.len() >= m) {
                break;
            }
            let refs: Vec<&TrainingClip> = chunk.iter().map(|&i| &clips[i]).collect();
            let batch = ClipBatch::from_clips(&refs)?;
            let seed: u64 = rng.random();
            match self.loss_and_grads(&batch, true, seed)? {
                Some((l, grads)) => {
                    opt.step(&mut self.params, &grads);
                    stats.step_losses.push(l);
                }
                None => {
                    log::warn!("skipping a batch of {} clips without enough labelled frames", refs.len());
                    stats.skipped_batches += 1;
                }
            }
        }
        Ok(stats)
    }

    /// Per-frame predictions for a whole video: non-overlapping clips, each
    /// run without dropout, padding dropped.
    pub fn predict_video(&self, features: ArrayView2<f64>) -> Result<Mat> {
        let n = features.nrows();
        if n == 0 {
            return Err(Error::arg("empty video"));
        }
        let k = self.config.clip_length;
        let d = features.ncols();
        let mut out = Array2::zeros((n, self.config.task.n_outputs));
        for (start, len) in clip_windows(n, k)? {
            let mut clip = Array2::zeros((k, d));
            clip.slice_mut(s![..len, ..])
                .assign(&features.slice(s![start..start + len, ..]));
            self.check_clip(clip.view())?;
            let in_video: Vec<bool> = (0..k).map(|i| i < len).collect();
            let mut g = Graph::new();
            let y = self.clip_graph(&mut g, clip.view(), &in_video, None);
            out.slice_mut(s![start..start + len, ..])
                .assign(&g.value(y).slice(s![..len, ..]));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochStats {
    pub step_losses: Vec<f64>,
    pub skipped_batches: usize,
}

impl EpochStats {
    pub fn mean_loss(&self) -> Option<f64> {
        (!self.step_losses.is_empty()).then(|| self.step_losses.iter().sum::<f64>() / self.step_losses.len() as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TmfTrainOptions {
    pub epochs: usize,
    /// Optional cap on optimiser steps across all epochs.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct TmfTrainOutcome {
    pub model: TmfModel,
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    pub skipped_batches: usize,
}

pub fn tmf_train(
    clips: &[TrainingClip],
    model: TmfModel,
    opt: OptimizerSpec,
    options: TmfTrainOptions,
) -> Result<TmfTrainOutcome> {
    let mut model = model;
    let mut adam = AdamW::new(opt);
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut outcome = TmfTrainOutcome {
        model: model.clone(),
        step_losses: Vec::new(),
        epoch_losses: Vec::new(),
        skipped_batches: 0,
    };
    for _ in 0..options.epochs {
        let remaining = options.max_steps.map(|m| m.saturating_sub(outcome.step_losses.len()));
        if remaining == Some(0) {
            break;
        }
        let stats = model.train_epoch(clips, &mut adam, options.batch_size, &mut rng, remaining)?;
        if let Some(l) = stats.mean_loss() {
            outcome.epoch_losses.push(l);
        }
        outcome.skipped_batches += stats.skipped_batches;
        outcome.step_losses.extend(stats.step_losses);
    }
    outcome.model = model;
    Ok(outcome)
}
