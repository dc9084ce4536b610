//! Stage runners behind the command-line interface.
//!
//! Artifacts under the configured `work_dir`:
//!
//! ```text
//! labels/{task}.csv                    label CSV of every synthetic video
//! mae.ckpt, pretrain_loss.csv          pretrain
//! finetune_{task}/model.ckpt           finetune
//! finetune_{task}/val_metrics.jsonl
//! cache/                               per-provider feature cache
//! fuse_{task}/model.ckpt               fuse-train
//! fuse_{task}/val_metrics.jsonl
//! predictions_{task}_{smooth}.csv      predict
//! report_{task}_{smooth}.json          evaluate
//! crossval_{task}/fold{i}.json         crossval
//! crossval_{task}/summary.json
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{ClassWeighting, ExperimentConfig, VISION_FINETUNED, VISION_RAW};
use crate::datamodel::{
    load_labels, make_folds, save_labels, write_file, FoldSplit, FrameRecord, SmoothingKind, Task, TaskSpec,
};
use crate::error::{Error, Result};
use crate::features::{
    align_audio, combine, config_hash, extract_vision_with_gaps, FeatureCache, FeatureSequence,
    SyntheticAudioProvider,
};
use crate::losses::compute_class_weights_smoothed;
use crate::mae::{attach_head, pretrain, FineTuneModel, MaeConfig, MaeModel, PretrainOptions};
use crate::metrics::{evaluate, MetricsReport};
use crate::nn::{AdamW, OptimizerSpec};
use crate::postprocess::{apply_policy, fill_missing};
use crate::synth::{generate_videos, pretraining_images, sample_labeled_frames, SyntheticVideo};
use crate::tmf::{make_training_clips, TmfConfig, TmfModel, TrainingClip};

const KIND_MAE: &str = "mae";
const KIND_FINETUNE: &str = "finetune";
const KIND_TMF: &str = "tmf";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct FinetuneMeta {
    mae: MaeConfig,
    task: TaskSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct FuseMeta {
    tmf: TmfConfig,
    vision_providers: Vec<String>,
    audio_providers: Vec<String>,
}

/// One line of `val_metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub aggregate: f64,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSummary {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub step_losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub metrics_log: PathBuf,
    pub epochs: Vec<EpochLog>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossvalSummary {
    pub task: Task,
    pub n_folds: usize,
    pub fold_aggregates: Vec<f64>,
    pub mean_aggregate: f64,
}

/// One row of a predictions CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub video_id: String,
    pub frame_index: usize,
    pub values: Vec<f64>,
}

pub fn write_predictions(path: &Path, task: Task, rows: &[PredictionRow]) -> Result<()> {
    let mut out = String::from("video_id,frame_index,");
    out.push_str(&task.output_columns().join(","));
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{},{}", r.video_id, r.frame_index);
        for v in &r.values {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

pub fn read_predictions(path: &Path, task: Task) -> Result<Vec<PredictionRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines();
    let expected = format!("video_id,frame_index,{}", task.output_columns().join(","));
    match lines.next() {
        Some(h) if h.trim_end() == expected => {}
        Some(h) => return Err(parse_err(1, format!("expected header `{expected}`, found `{h}`"))),
        None => return Err(parse_err(1, "empty file".into())),
    }
    let width = 2 + task.n_outputs();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != width {
            return Err(parse_err(lineno, format!("expected {width} fields, found {}", fields.len())));
        }
        let frame_index = fields[1]
            .parse()
            .map_err(|_| parse_err(lineno, format!("bad frame index `{}`", fields[1])))?;
        let values = fields[2..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| parse_err(lineno, format!("bad value `{f}`"))))
            .collect::<Result<_>>()?;
        rows.push(PredictionRow {
            video_id: fields[0].to_string(),
            frame_index,
            values,
        });
    }
    Ok(rows)
}

/// Scores a predictions file against a label file. Both must list exactly
/// the same `(video_id, frame_index)` keys; unlabelled frames are skipped.
pub fn evaluate_files(predictions: &Path, labels: &Path, task: Task) -> Result<MetricsReport> {
    let preds = read_predictions(predictions, task)?;
    let records = load_labels(labels, &TaskSpec::new(task))?;
    let mut by_key: BTreeMap<(&str, usize), &PredictionRow> = BTreeMap::new();
    for p in &preds {
        if by_key.insert((p.video_id.as_str(), p.frame_index), p).is_some() {
            return Err(Error::Alignment(format!(
                "duplicate prediction for {}#{}",
                p.video_id, p.frame_index
            )));
        }
    }
    let label_keys: Vec<(&str, usize)> = records.iter().map(|r| (r.video_id.as_str(), r.frame_index)).collect();
    let pred_keys: Vec<(&str, usize)> = by_key.keys().copied().collect();
    if let Some(i) = (0..label_keys.len().max(pred_keys.len())).find(|&i| label_keys.get(i) != pred_keys.get(i)) {
        let show = |k: Option<&(&str, usize)>| k.map_or("<end of file>".to_string(), |(v, f)| format!("{v}#{f}"));
        return Err(Error::Alignment(format!(
            "row {}: labels have {} but predictions have {}",
            i + 1,
            show(label_keys.get(i)),
            show(pred_keys.get(i))
        )));
    }
    let labelled: Vec<&FrameRecord> = records.iter().filter(|r| r.has_label(task)).collect();
    if labelled.is_empty() {
        return Err(Error::arg("no labelled frames to evaluate"));
    }
    let n = task.n_outputs();
    let mut outputs = Array2::zeros((labelled.len(), n));
    let mut targets = Array2::zeros((labelled.len(), n));
    for (i, r) in labelled.iter().enumerate() {
        let p = by_key[&(r.video_id.as_str(), r.frame_index)];
        outputs.row_mut(i).assign(&ndarray::ArrayView1::from(p.values.as_slice()));
        let t = r.target_row(task).expect("filtered to labelled");
        targets.row_mut(i).assign(&ndarray::ArrayView1::from(t.as_slice()));
    }
    evaluate(task, outputs.view(), targets.view())
}

fn class_counts(task: Task, rows: &[Vec<f64>]) -> Vec<u64> {
    let mut counts = vec![0u64; task.n_outputs()];
    for r in rows {
        for (c, v) in r.iter().enumerate() {
            if *v >= 0.5 {
                counts[c] += 1;
            }
        }
    }
    counts
}

fn task_spec(task: Task, weighting: ClassWeighting, train_targets: &[Vec<f64>]) -> Result<TaskSpec> {
    let spec = TaskSpec::new(task);
    if task == Task::Va || weighting == ClassWeighting::Uniform {
        return Ok(spec);
    }
    let w = compute_class_weights_smoothed(&class_counts(task, train_targets))?;
    spec.with_class_weights(w.weights)
}

fn append_jsonl(buf: &mut String, log: &EpochLog) -> Result<()> {
    buf.push_str(&serde_json::to_string(log)?);
    buf.push('\n');
    Ok(())
}

pub struct Pipeline {
    pub config: ExperimentConfig,
}

impl Pipeline {
    pub fn new(config: ExperimentConfig) -> Self {
        Pipeline { config }
    }

    pub fn from_file(path: impl AsRef<Path>, seed: Option<u64>) -> Result<Self> {
        let mut config = ExperimentConfig::load(path)?;
        if let Some(s) = seed {
            config.seed = s;
        }
        Ok(Pipeline::new(config))
    }

    pub fn work_dir(&self) -> &Path {
        &self.config.work_dir
    }

    fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.config.work_dir.join(rel)
    }

    pub fn mae_checkpoint_path(&self) -> PathBuf {
        self.path("mae.ckpt")
    }

    pub fn pretrain_loss_path(&self) -> PathBuf {
        self.path("pretrain_loss.csv")
    }

    pub fn finetune_dir(&self, task: Task) -> PathBuf {
        self.path(format!("finetune_{task}"))
    }

    pub fn fuse_dir(&self, task: Task) -> PathBuf {
        self.path(format!("fuse_{task}"))
    }

    pub fn cache(&self) -> FeatureCache {
        FeatureCache::new(self.path("cache"))
    }

    pub fn labels_path(&self, task: Task) -> PathBuf {
        self.path(format!("labels/{task}.csv"))
    }

    fn smoothing_kind(&self, smooth: Option<SmoothingKind>) -> SmoothingKind {
        smooth.unwrap_or(self.config.smoothing.kind)
    }

    pub fn predictions_path(&self, task: Task, smooth: Option<SmoothingKind>) -> PathBuf {
        self.path(format!("predictions_{task}_{}.csv", kind_name(self.smoothing_kind(smooth))))
    }

    pub fn report_path(&self, task: Task, smooth: Option<SmoothingKind>) -> PathBuf {
        self.path(format!("report_{task}_{}.json", kind_name(self.smoothing_kind(smooth))))
    }

    pub fn crossval_dir(&self, task: Task) -> PathBuf {
        self.path(format!("crossval_{task}"))
    }

    pub fn videos(&self) -> Result<Vec<SyntheticVideo>> {
        generate_videos(&self.config.data.synth, self.config.seed_for("data"))
    }

    pub fn folds(&self, videos: &[SyntheticVideo]) -> Result<FoldSplit> {
        let ids: Vec<&str> = videos.iter().map(|v| v.video_id.as_str()).collect();
        make_folds(&ids, self.config.data.n_folds, self.config.seed_for("folds"))
    }

    /// Writes the label CSV of every video for `task`.
    pub fn write_labels(&self, task: Task, videos: &[SyntheticVideo]) -> Result<PathBuf> {
        let records: Vec<FrameRecord> = videos.iter().flat_map(|v| v.records()).collect();
        let path = self.labels_path(task);
        save_labels(&path, &records, task)?;
        Ok(path)
    }

    fn require(&self, path: &Path, stage: &str) -> Result<()> {
        if path.is_file() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "missing {}: run `affectkit {stage}` first",
                path.display()
            )))
        }
    }

    fn split<'a>(&self, videos: &'a [SyntheticVideo], folds: &FoldSplit, held_out: usize) -> (Vec<&'a SyntheticVideo>, Vec<&'a SyntheticVideo>) {
        videos
            .iter()
            .partition(|v| folds.fold_of(&v.video_id) != Some(held_out))
    }

    pub fn run_pretrain(&self) -> Result<PretrainSummary> {
        let cfg = &self.config;
        let images = pretraining_images(
            cfg.pretrain.n_images,
            cfg.data.synth.image_size,
            cfg.data.synth.channels,
            cfg.seed_for("pretrain/data"),
        );
        let model = MaeModel::new(cfg.mae.clone(), cfg.seed_for("mae/init"))?;
        let opt = OptimizerSpec::adamw(cfg.pretrain.lr).with_weight_decay(cfg.pretrain.weight_decay);
        let out = pretrain(
            &images,
            model,
            opt,
            PretrainOptions {
                steps: cfg.pretrain.steps,
                batch_size: cfg.pretrain.batch_size,
                seed: cfg.seed_for("pretrain/loop"),
            },
        )?;
        let ckpt = self.mae_checkpoint_path();
        Checkpoint::new(KIND_MAE, &out.model.config, cfg.pretrain.steps as u64, out.model.params.clone())?.save(&ckpt)?;
        let mut csv = String::from("step,loss\n");
        let every = cfg.pretrain.log_every;
        for (i, chunk) in out.step_losses.chunks(every).enumerate() {
            let step = i * every + chunk.len();
            let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
            let _ = writeln!(csv, "{step},{mean}");
        }
        let loss_csv = self.pretrain_loss_path();
        write_file(&loss_csv, csv.as_bytes())?;
        log::info!(
            "pretrain: {} steps, loss {:.5} -> {:.5}",
            out.step_losses.len(),
            out.step_losses.first().copied().unwrap_or(f64::NAN),
            out.step_losses.last().copied().unwrap_or(f64::NAN)
        );
        Ok(PretrainSummary {
            checkpoint: ckpt,
            loss_csv,
            step_losses: out.step_losses,
        })
    }

    fn load_mae(&self) -> Result<MaeModel> {
        let path = self.mae_checkpoint_path();
        self.require(&path, "pretrain")?;
        let ck = Checkpoint::load(&path)?;
        ck.expect_kind(KIND_MAE)?;
        MaeModel::from_params(ck.config_as()?, ck.params)
    }

    fn frame_batch(
        &self,
        videos: &[&SyntheticVideo],
        picks: &[(usize, usize)],
        task: Task,
    ) -> (Vec<Array3<f64>>, Vec<Vec<f64>>) {
        let synth = &self.config.data.synth;
        picks
            .iter()
            .map(|&(v, t)| {
                let vid = videos[v];
                let img = vid.render(t, synth.image_size, synth.channels);
                let target = vid.records()[t].target_row(task).expect("sampled frames are annotated");
                (img, target)
            })
            .unzip()
    }

    pub fn run_finetune(&self, task: Task) -> Result<TrainSummary> {
        let cfg = &self.config;
        let ft = &cfg.finetune;
        let mae = self.load_mae()?;
        let videos = self.videos()?;
        self.write_labels(task, &videos)?;
        let folds = self.folds(&videos)?;
        let (train, val) = self.split(&videos, &folds, cfg.data.val_fold);
        let train_owned: Vec<SyntheticVideo> = train.iter().map(|v| (*v).clone()).collect();
        let val_owned: Vec<SyntheticVideo> = val.iter().map(|v| (*v).clone()).collect();
        let train_picks = sample_labeled_frames(&train_owned, ft.max_train_frames, cfg.seed_for("finetune/train_frames"));
        let val_picks = sample_labeled_frames(&val_owned, ft.max_val_frames, cfg.seed_for("finetune/val_frames"));
        let min_val = if task == Task::Va { 2 } else { 1 };
        if train_picks.is_empty() || val_picks.len() < min_val {
            return Err(Error::Config("not enough labelled frames for fine-tuning".into()));
        }
        let (train_imgs, train_targets) = self.frame_batch(&train, &train_picks, task);
        let (val_imgs, val_targets) = self.frame_batch(&val, &val_picks, task);
        let spec = task_spec(task, ft.class_weighting, &train_targets)?;
        let mut model = attach_head(&mae, spec.clone(), cfg.seed_for(&format!("finetune/{task}/head")))?;
        model.set_freeze_encoder(ft.freeze_encoder);
        let mut opt = AdamW::new(OptimizerSpec::adamw(ft.lr).with_weight_decay(ft.weight_decay));
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed_for(&format!("finetune/{task}/loop")));
        let targets = rows_to_matrix(&train_targets, task.n_outputs());
        let val_t = rows_to_matrix(&val_targets, task.n_outputs());
        let mut epochs = Vec::new();
        let mut jsonl = String::new();
        for epoch in 1..=ft.epochs {
            let loss = model.train_epoch(&train_imgs, targets.view(), &mut opt, ft.batch_size, &mut rng)?;
            let preds = predict_frames(&model, &val_imgs)?;
            let report = evaluate(task, preds.view(), val_t.view())?;
            let log = EpochLog {
                epoch,
                train_loss: Some(loss),
                val_loss: None,
                aggregate: report.aggregate,
                report,
            };
            log::info!("finetune {task} epoch {epoch}: loss {loss:.5}, val {:.4}", log.aggregate);
            append_jsonl(&mut jsonl, &log)?;
            epochs.push(log);
        }
        let dir = self.finetune_dir(task);
        let metrics_log = dir.join("val_metrics.jsonl");
        write_file(&metrics_log, jsonl.as_bytes())?;
        let params = model.all_params();
        let meta = FinetuneMeta {
            mae: model.mae_config.clone(),
            task: spec,
        };
        let checkpoint = dir.join("model.ckpt");
        Checkpoint::new(KIND_FINETUNE, &meta, opt.steps(), params)?.save(&checkpoint)?;
        Ok(TrainSummary {
            checkpoint,
            metrics_log,
            epochs,
        })
    }

    fn load_finetuned(&self, task: Task) -> Result<FineTuneModel> {
        let path = self.finetune_dir(task).join("model.ckpt");
        self.require(&path, &format!("finetune --task {task}"))?;
        let ck = Checkpoint::load(&path)?;
        ck.expect_kind(KIND_FINETUNE)?;
        let meta: FinetuneMeta = ck.config_as()?;
        FineTuneModel::from_params(meta.mae, meta.task, &ck.params)
    }

    /// Encoders for the configured vision providers, keyed by provider id.
    fn vision_encoders(&self, task: Task) -> Result<BTreeMap<String, FineTuneModel>> {
        let mut out = BTreeMap::new();
        for id in &self.config.features.set.vision_providers {
            let model = match id.as_str() {
                VISION_FINETUNED => self.load_finetuned(task)?,
                VISION_RAW => attach_head(&self.load_mae()?, TaskSpec::new(task), 0)?,
                other => return Err(Error::Config(format!("unknown vision provider `{other}`"))),
            };
            out.insert(id.clone(), model);
        }
        Ok(out)
    }

    /// Combined per-frame features of one video, served from the cache when
    /// possible.
    fn video_features(
        &self,
        video: &SyntheticVideo,
        encoders: &BTreeMap<String, FineTuneModel>,
        cache: &FeatureCache,
    ) -> Result<FeatureSequence> {
        let synth = &self.config.data.synth;
        let data_seed = self.config.seed_for("data");
        let mut seqs = Vec::new();
        for (id, enc) in encoders {
            let hash = config_hash(&(id, enc.encoder.checksum(), synth, data_seed))?;
            let seq = cache.get_or_compute(id, &video.video_id, &hash, || {
                let frames = video.render_all(synth.image_size, synth.channels);
                let views: Vec<_> = frames.iter().map(|f| f.as_ref().map(|a| a.view())).collect();
                extract_vision_with_gaps(id, &video.video_id, enc, &views)
            })?;
            seqs.push(seq);
        }
        for id in &self.config.features.set.audio_providers {
            let p = self
                .config
                .audio_provider(id)
                .ok_or_else(|| Error::Config(format!("audio provider `{id}` not configured")))?;
            let provider_seed = self.config.seed_for(&format!("audio/{id}"));
            let hash = config_hash(&(p, provider_seed, synth, data_seed))?;
            let seq = cache.get_or_compute(id, &video.video_id, &hash, || {
                let provider = SyntheticAudioProvider::new(id.clone(), provider_seed, p.d, p.profile)?
                    .with_rate(p.rate)
                    .with_noise(p.noise_std);
                let raw = provider.generate(&video.video_id, video.latent_matrix().view(), synth.fps)?;
                align_audio(&raw, p.rate, synth.fps, video.len())
            })?;
            seqs.push(seq);
        }
        combine(&seqs, &self.config.features.set)
    }

    fn all_features(&self, task: Task, videos: &[SyntheticVideo]) -> Result<BTreeMap<String, FeatureSequence>> {
        let encoders = self.vision_encoders(task)?;
        let cache = self.cache();
        videos
            .iter()
            .map(|v| Ok((v.video_id.clone(), self.video_features(v, &encoders, &cache)?)))
            .collect()
    }

    fn clips_for(&self, task: Task, videos: &[&SyntheticVideo], feats: &BTreeMap<String, FeatureSequence>, k: usize) -> Result<(Vec<TrainingClip>, Vec<Vec<f64>>)> {
        let mut clips = Vec::new();
        let mut targets_seen = Vec::new();
        for v in videos {
            let targets: Vec<Option<Vec<f64>>> = v.records().iter().map(|r| r.target_row(task)).collect();
            targets_seen.extend(targets.iter().flatten().cloned());
            clips.extend(make_training_clips(
                &v.video_id,
                feats[&v.video_id].features.view(),
                &targets,
                k,
                task.n_outputs(),
            )?);
        }
        Ok((clips, targets_seen))
    }

    /// Trains the fusion model on every video outside `held_out`; returns the
    /// model and its per-epoch validation log on the held-out videos.
    fn train_fusion(
        &self,
        task: Task,
        videos: &[SyntheticVideo],
        feats: &BTreeMap<String, FeatureSequence>,
        folds: &FoldSplit,
        held_out: usize,
        seed_scope: &str,
    ) -> Result<(TmfModel, Vec<EpochLog>)> {
        let cfg = &self.config;
        let ft = &cfg.fuse_train;
        let (train, val) = self.split(videos, folds, held_out);
        let k = cfg.tmf.clip_length;
        let (train_clips, train_targets) = self.clips_for(task, &train, feats, k)?;
        let (val_clips, _) = self.clips_for(task, &val, feats, k)?;
        let spec = task_spec(task, ft.class_weighting, &train_targets)?;
        let input_dim = feats.values().next().map(|f| f.d()).ok_or_else(|| Error::arg("no videos"))?;
        let t = &cfg.tmf;
        let tmf_cfg = TmfConfig {
            input_dim,
            d_model: t.d_model,
            n_layers: t.n_layers,
            n_heads: t.n_heads,
            ff_dim: t.ff_dim,
            dropout: t.dropout,
            clip_length: t.clip_length,
            mask_padded_attention: t.mask_padded_attention,
            task: spec,
        };
        let mut model = TmfModel::new(tmf_cfg, cfg.seed_for(&format!("{seed_scope}/init")))?;
        let mut opt = AdamW::new(OptimizerSpec::adamw(ft.lr).with_weight_decay(ft.weight_decay));
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed_for(&format!("{seed_scope}/loop")));
        let mut logs = Vec::new();
        let mut steps = 0usize;
        for epoch in 1..=ft.epochs {
            let remaining = ft.max_steps.map(|m| m.saturating_sub(steps));
            if remaining == Some(0) {
                break;
            }
            let stats = model.train_epoch(&train_clips, &mut opt, ft.batch_size, &mut rng, remaining)?;
            steps += stats.step_losses.len();
            let val_loss = model.evaluate_loss(&val_clips, ft.batch_size).ok();
            let report = self.score_videos(task, &model, &val, feats, None)?;
            let log = EpochLog {
                epoch,
                train_loss: stats.mean_loss(),
                val_loss,
                aggregate: report.aggregate,
                report,
            };
            log::info!(
                "{seed_scope} epoch {epoch}: loss {:?}, val loss {:?}, val score {:.4}",
                log.train_loss,
                log.val_loss,
                log.aggregate
            );
            logs.push(log);
        }
        Ok((model, logs))
    }

    pub fn run_fuse_train(&self, task: Task) -> Result<TrainSummary> {
        let videos = self.videos()?;
        self.write_labels(task, &videos)?;
        let folds = self.folds(&videos)?;
        let feats = self.all_features(task, &videos)?;
        let (model, epochs) = self.train_fusion(task, &videos, &feats, &folds, self.config.data.val_fold, &format!("fuse/{task}"))?;
        let dir = self.fuse_dir(task);
        let mut jsonl = String::new();
        for e in &epochs {
            append_jsonl(&mut jsonl, e)?;
        }
        let metrics_log = dir.join("val_metrics.jsonl");
        write_file(&metrics_log, jsonl.as_bytes())?;
        let meta = FuseMeta {
            tmf: model.config.clone(),
            vision_providers: self.config.features.set.vision_providers.clone(),
            audio_providers: self.config.features.set.audio_providers.clone(),
        };
        let checkpoint = dir.join("model.ckpt");
        Checkpoint::new(KIND_TMF, &meta, epochs.len() as u64, model.params.clone())?.save(&checkpoint)?;
        Ok(TrainSummary {
            checkpoint,
            metrics_log,
            epochs,
        })
    }

    fn load_fusion(&self, task: Task) -> Result<TmfModel> {
        let path = self.fuse_dir(task).join("model.ckpt");
        self.require(&path, &format!("fuse-train --task {task}"))?;
        let ck = Checkpoint::load(&path)?;
        ck.expect_kind(KIND_TMF)?;
        let meta: FuseMeta = ck.config_as()?;
        if meta.tmf.task.task != task {
            return Err(Error::Config(format!(
                "checkpoint is for task {}, not {task}",
                meta.tmf.task.task
            )));
        }
        let set = &self.config.features.set;
        if meta.vision_providers != set.vision_providers || meta.audio_providers != set.audio_providers {
            return Err(Error::Config("checkpoint was trained on a different feature set".into()));
        }
        TmfModel::from_params(meta.tmf, ck.params)
    }

    /// Final per-frame outputs of one video: model predictions on frames with
    /// a face, nearest-frame fill for the rest, then smoothing.
    fn video_outputs(
        &self,
        task: Task,
        model: &TmfModel,
        video: &SyntheticVideo,
        feats: &FeatureSequence,
        smooth: Option<SmoothingKind>,
    ) -> Result<Array2<f64>> {
        let raw = model.predict_video(feats.features.view())?;
        let present: BTreeMap<usize, Vec<f64>> = (0..video.len())
            .filter(|&t| video.face_present[t])
            .map(|t| (t, raw.row(t).to_vec()))
            .collect();
        let filled = fill_missing(&present, video.len())?;
        let mut spec = TaskSpec::new(task);
        spec.smoothing = self.config.smoothing.spec_for(task, smooth);
        apply_policy(filled.view(), &spec)
    }

    fn score_videos(
        &self,
        task: Task,
        model: &TmfModel,
        videos: &[&SyntheticVideo],
        feats: &BTreeMap<String, FeatureSequence>,
        smooth: Option<SmoothingKind>,
    ) -> Result<MetricsReport> {
        let mut outs = Vec::new();
        let mut targets = Vec::new();
        for v in videos {
            let y = self.video_outputs(task, model, v, &feats[&v.video_id], smooth)?;
            for (t, r) in v.records().iter().enumerate() {
                if let Some(row) = r.target_row(task) {
                    outs.push(y.row(t).to_vec());
                    targets.push(row);
                }
            }
        }
        if outs.is_empty() {
            return Err(Error::Config("held-out videos have no labelled frames".into()));
        }
        let n = task.n_outputs();
        evaluate(task, rows_to_matrix(&outs, n).view(), rows_to_matrix(&targets, n).view())
    }

    pub fn run_predict(&self, task: Task, smooth: Option<SmoothingKind>) -> Result<PathBuf> {
        let model = self.load_fusion(task)?;
        let videos = self.videos()?;
        self.write_labels(task, &videos)?;
        let feats = self.all_features(task, &videos)?;
        let mut rows = Vec::new();
        for v in &videos {
            let y = self.video_outputs(task, &model, v, &feats[&v.video_id], smooth)?;
            for (t, r) in y.rows().into_iter().enumerate() {
                rows.push(PredictionRow {
                    video_id: v.video_id.clone(),
                    frame_index: t,
                    values: r.to_vec(),
                });
            }
        }
        let path = self.predictions_path(task, smooth);
        write_predictions(&path, task, &rows)?;
        Ok(path)
    }

    pub fn run_evaluate(&self, task: Task, smooth: Option<SmoothingKind>) -> Result<MetricsReport> {
        let preds = self.predictions_path(task, smooth);
        self.require(&preds, &format!("predict --task {task}"))?;
        let labels = self.labels_path(task);
        if !labels.is_file() {
            self.write_labels(task, &self.videos()?)?;
        }
        let report = evaluate_files(&preds, &labels, task)?;
        report.save(self.report_path(task, smooth))?;
        Ok(report)
    }

    pub fn run_crossval(&self, task: Task, smooth: Option<SmoothingKind>) -> Result<CrossvalSummary> {
        let videos = self.videos()?;
        self.write_labels(task, &videos)?;
        let folds = self.folds(&videos)?;
        let feats = self.all_features(task, &videos)?;
        let dir = self.crossval_dir(task);
        let mut aggregates = Vec::with_capacity(folds.n_folds);
        for f in 0..folds.n_folds {
            let (model, _) = self.train_fusion(task, &videos, &feats, &folds, f, &format!("crossval/{task}/fold{f}"))?;
            let held: Vec<&SyntheticVideo> = videos
                .iter()
                .filter(|v| folds.fold_of(&v.video_id) == Some(f))
                .collect();
            let report = self.score_videos(task, &model, &held, &feats, smooth)?;
            report.save(dir.join(format!("fold{f}.json")))?;
            aggregates.push(report.aggregate);
        }
        let summary = CrossvalSummary {
            task,
            n_folds: folds.n_folds,
            mean_aggregate: aggregates.iter().sum::<f64>() / aggregates.len() as f64,
            fold_aggregates: aggregates,
        };
        write_file(&dir.join("summary.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
        folds.save(dir.join("folds.json"))?;
        Ok(summary)
    }

    /// Provider ids whose features sit in the cache.
    pub fn cached_providers(&self) -> Result<BTreeSet<String>> {
        let dir = self.cache().dir().to_path_buf();
        if !dir.is_dir() {
            return Ok(BTreeSet::new());
        }
        let mut out = BTreeSet::new();
        for e in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let e = e.map_err(|e| Error::io(&dir, e))?;
            if let Some(name) = e.file_name().to_str() {
                if let Some((p, _)) = name.split_once("__") {
                    out.insert(p.to_string());
                }
            }
        }
        Ok(out)
    }
}

fn kind_name(kind: SmoothingKind) -> &'static str {
    match kind {
        SmoothingKind::None => "none",
        SmoothingKind::Gaussian => "gaussian",
        SmoothingKind::Median => "median",
        SmoothingKind::Average => "average",
    }
}

fn rows_to_matrix(rows: &[Vec<f64>], n: usize) -> Array2<f64> {
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), n), flat).expect("rows of equal width")
}

fn predict_frames(model: &FineTuneModel, images: &[Array3<f64>]) -> Result<Array2<f64>> {
    let mut parts = Vec::new();
    for chunk in images.chunks(32) {
        let views: Vec<_> = chunk.iter().map(|i| i.view()).collect();
        parts.push(model.predict(&views)?);
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &views).expect("same width"))
}
