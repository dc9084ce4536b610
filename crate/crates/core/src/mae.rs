//! Masked autoencoder over square face crops, and the fine-tuning model that
//! replaces its decoder with a single affine head.

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Task, TaskSpec};
use crate::error::{Error, Result};
use crate::losses::task_loss_grad;
use crate::nn::layers::{encoder_block, init_block, layer_norm, linear};
use crate::nn::posenc::sinusoidal_2d;
use crate::nn::{AdamW, Graph, Mat, NodeId, OptimizerSpec, ParamStore};

/// Square image cut into non-overlapping square patches, raster order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
}

impl PatchGrid {
    pub fn new(image_size: usize, patch_size: usize, channels: usize) -> Result<Self> {
        if image_size == 0 || patch_size == 0 || channels == 0 {
            return Err(Error::arg("grid sizes must be positive"));
        }
        if !image_size.is_multiple_of(patch_size) {
            return Err(Error::arg(format!(
                "image size {image_size} is not divisible by patch size {patch_size}"
            )));
        }
        Ok(PatchGrid {
            image_size,
            patch_size,
            channels,
        })
    }

    pub fn side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.side() * self.side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// `[H×W×C]` image to `[n_patches × patch_size²·C]`; each row flattens one
/// patch in `(y, x, c)` order.
pub fn patchify(image: ArrayView3<f64>, grid: &PatchGrid) -> Result<Mat> {
    let (h, w, c) = image.dim();
    if h != grid.image_size || w != grid.image_size || c != grid.channels {
        return Err(Error::arg(format!(
            "image is {h}×{w}×{c}, grid expects {0}×{0}×{1}",
            grid.image_size, grid.channels
        )));
    }
    let (p, side) = (grid.patch_size, grid.side());
    let mut out = Array2::zeros((grid.n_patches(), grid.patch_dim()));
    for pr in 0..side {
        for pc in 0..side {
            let mut row = out.row_mut(pr * side + pc);
            let mut k = 0;
            for y in 0..p {
                for x in 0..p {
                    for ch in 0..c {
                        row[k] = image[[pr * p + y, pc * p + x, ch]];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn unpatchify(patches: ArrayView2<f64>, grid: &PatchGrid) -> Result<Array3<f64>> {
    if patches.dim() != (grid.n_patches(), grid.patch_dim()) {
        return Err(Error::arg(format!(
            "patch matrix is {:?}, grid expects ({}, {})",
            patches.dim(),
            grid.n_patches(),
            grid.patch_dim()
        )));
    }
    let (p, side, c) = (grid.patch_size, grid.side(), grid.channels);
    let mut img = Array3::zeros((grid.image_size, grid.image_size, c));
    for pr in 0..side {
        for pc in 0..side {
            let row = patches.row(pr * side + pc);
            let mut k = 0;
            for y in 0..p {
                for x in 0..p {
                    for ch in 0..c {
                        img[[pr * p + y, pc * p + x, ch]] = row[k];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Which patches are hidden from the encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub masked: Vec<bool>,
    pub mask_ratio: f64,
}

impl MaskPlan {
    /// Every patch visible; used when encoding for downstream tasks.
    pub fn all_visible(n_patches: usize) -> Self {
        MaskPlan {
            masked: vec![false; n_patches],
            mask_ratio: 0.0,
        }
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&i| !self.masked[i]).collect()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&i| self.masked[i]).collect()
    }

    pub fn n_masked(&self) -> usize {
        self.masked.iter().filter(|m| **m).count()
    }
}

/// Number of masked patches for a ratio: `⌊ratio · n⌋`.
pub fn mask_count(n_patches: usize, mask_ratio: f64) -> usize {
    (mask_ratio * n_patches as f64).floor() as usize
}

/// Masks `⌊ratio · n⌋` patches drawn uniformly without replacement.
pub fn sample_mask(grid: &PatchGrid, mask_ratio: f64, seed: u64) -> Result<MaskPlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_mask_with(grid, mask_ratio, &mut rng)
}

pub fn sample_mask_with<R: Rng>(grid: &PatchGrid, mask_ratio: f64, rng: &mut R) -> Result<MaskPlan> {
    if !(mask_ratio > 0.0 && mask_ratio < 1.0) {
        return Err(Error::arg(format!("mask ratio {mask_ratio} outside (0, 1)")));
    }
    let n = grid.n_patches();
    let k = mask_count(n, mask_ratio);
    if k == 0 || k == n {
        return Err(Error::arg(format!(
            "ratio {mask_ratio} masks {k} of {n} patches; need at least one masked and one visible"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut masked = vec![false; n];
    order[..k].iter().for_each(|&i| masked[i] = true);
    Ok(MaskPlan { masked, mask_ratio })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaeConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub encoder_dim: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub decoder_dim: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    #[serde(default = "default_mask_ratio")]
    pub mask_ratio: f64,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    /// Reconstruction loss over every patch instead of masked ones only.
    #[serde(default)]
    pub loss_on_all_patches: bool,
}

fn default_mask_ratio() -> f64 {
    0.75
}

fn default_mlp_ratio() -> usize {
    4
}

impl Default for MaeConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl MaeConfig {
    /// CPU-sized default: 32×32 grayscale, 8×8 patches.
    pub fn toy() -> Self {
        MaeConfig {
            image_size: 32,
            patch_size: 8,
            channels: 1,
            encoder_dim: 64,
            encoder_layers: 2,
            encoder_heads: 4,
            decoder_dim: 32,
            decoder_layers: 1,
            decoder_heads: 4,
            mask_ratio: 0.75,
            mlp_ratio: 2,
            loss_on_all_patches: false,
        }
    }

    /// ViT-Base encoder with the usual lightweight decoder on 224×224 RGB.
    pub fn vit_base() -> Self {
        MaeConfig {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            encoder_dim: 768,
            encoder_layers: 12,
            encoder_heads: 12,
            decoder_dim: 512,
            decoder_layers: 8,
            decoder_heads: 16,
            mask_ratio: 0.75,
            mlp_ratio: 4,
            loss_on_all_patches: false,
        }
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::new(self.image_size, self.patch_size, self.channels)
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.grid().map_err(|e| Error::Config(e.to_string()))?;
        for (name, dim, heads) in [
            ("encoder", self.encoder_dim, self.encoder_heads),
            ("decoder", self.decoder_dim, self.decoder_heads),
        ] {
            if dim == 0 || heads == 0 || dim % heads != 0 {
                return Err(Error::Config(format!(
                    "{name} dim {dim} must be a positive multiple of {heads} heads"
                )));
            }
            if dim % 4 != 0 {
                return Err(Error::Config(format!(
                    "{name} dim {dim} must be divisible by 4 for 2-D position encoding"
                )));
            }
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        let k = mask_count(grid.n_patches(), self.mask_ratio);
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) || k == 0 || k == grid.n_patches() {
            return Err(Error::Config(format!(
                "mask ratio {} unusable for {} patches",
                self.mask_ratio,
                grid.n_patches()
            )));
        }
        Ok(())
    }
}

/// Encoder tokens after the final norm, and their row mean.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub tokens: Mat,
    pub pooled: Array1<f64>,
}

/// Builds the encoder over the visible patch rows; returns the normed tokens.
fn encode_graph(g: &mut Graph, store: &ParamStore, cfg: &MaeConfig, patches: &Mat, visible: &[usize]) -> NodeId {
    let pos = sinusoidal_2d(cfg.image_size / cfg.patch_size, cfg.encoder_dim).select(Axis(0), visible);
    let x = g.constant(patches.select(Axis(0), visible));
    let x = linear(g, store, "patch_embed", x);
    let pos = g.constant(pos);
    let mut x = g.add(x, pos);
    for l in 0..cfg.encoder_layers {
        x = encoder_block(g, store, &format!("enc.block{l}"), x, cfg.encoder_heads, None, None);
    }
    layer_norm(g, store, "enc.norm", x)
}

/// Decoder over encoder tokens plus the shared mask token at masked slots.
fn decode_graph(g: &mut Graph, store: &ParamStore, cfg: &MaeConfig, tokens: NodeId, plan: &MaskPlan) -> NodeId {
    let n_visible = g.value(tokens).nrows();
    let y = linear(g, store, "dec.embed", tokens);
    let mask_token = g.param(store, "dec.mask_token");
    let pool = g.concat_rows(&[y, mask_token]);
    let mut next_visible = 0;
    let idx: Vec<usize> = plan
        .masked
        .iter()
        .map(|&m| {
            if m {
                n_visible
            } else {
                next_visible += 1;
                next_visible - 1
            }
        })
        .collect();
    let full = g.gather_rows(pool, &idx);
    let pos = g.constant(sinusoidal_2d(cfg.image_size / cfg.patch_size, cfg.decoder_dim));
    let mut x = g.add(full, pos);
    for l in 0..cfg.decoder_layers {
        x = encoder_block(g, store, &format!("dec.block{l}"), x, cfg.decoder_heads, None, None);
    }
    let x = layer_norm(g, store, "dec.norm", x);
    linear(g, store, "dec.pred", x)
}

fn init_encoder<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &MaeConfig) {
    let grid_dim = cfg.patch_size * cfg.patch_size * cfg.channels;
    store.init_linear(rng, "patch_embed", grid_dim, cfg.encoder_dim);
    for l in 0..cfg.encoder_layers {
        init_block(store, rng, &format!("enc.block{l}"), cfg.encoder_dim, cfg.encoder_dim * cfg.mlp_ratio);
    }
    store.init_layer_norm("enc.norm", cfg.encoder_dim);
}

fn is_encoder_param(name: &str) -> bool {
    name.starts_with("patch_embed.") || name.starts_with("enc.")
}

/// Masked autoencoder parameters together with their configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct MaeModel {
    pub config: MaeConfig,
    pub params: ParamStore,
}

impl MaeModel {
    pub fn new(config: MaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        init_encoder(&mut params, &mut rng, &config);
        params.init_linear(&mut rng, "dec.embed", config.encoder_dim, config.decoder_dim);
        params.insert(
            "dec.mask_token",
            Array2::from_shape_fn((1, config.decoder_dim), |_| rng.random_range(-0.02..0.02)),
        );
        for l in 0..config.decoder_layers {
            init_block(
                &mut params,
                &mut rng,
                &format!("dec.block{l}"),
                config.decoder_dim,
                config.decoder_dim * config.mlp_ratio,
            );
        }
        params.init_layer_norm("dec.norm", config.decoder_dim);
        let patch_dim = config.grid()?.patch_dim();
        params.init_linear(&mut rng, "dec.pred", config.decoder_dim, patch_dim);
        Ok(MaeModel { config, params })
    }

    pub fn from_params(config: MaeConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = MaeModel::new(config.clone(), 0)?;
        check_shapes(&reference.params, &params)?;
        Ok(MaeModel { config, params })
    }

    /// Encoder-only parameters (patch embedding and encoder blocks).
    pub fn encoder_params(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (k, v) in self.params.iter().filter(|(k, _)| is_encoder_param(k)) {
            out.insert(k.clone(), v.clone());
        }
        out
    }

    fn check_plan(&self, plan: &MaskPlan) -> Result<PatchGrid> {
        let grid = self.config.grid()?;
        if plan.masked.len() != grid.n_patches() {
            return Err(Error::Config(format!(
                "mask plan covers {} patches, model grid has {}",
                plan.masked.len(),
                grid.n_patches()
            )));
        }
        if plan.masked.iter().all(|m| *m) {
            return Err(Error::arg("mask plan hides every patch"));
        }
        Ok(grid)
    }

    /// Reconstruction of every patch and the encoder output over visible
    /// patches.
    pub fn forward(&self, image: ArrayView3<f64>, plan: &MaskPlan) -> Result<(Mat, EncoderOutput)> {
        let grid = self.check_plan(plan)?;
        let patches = patchify(image, &grid)?;
        let mut g = Graph::new();
        let tokens = encode_graph(&mut g, &self.params, &self.config, &patches, &plan.visible_indices());
        let recon = decode_graph(&mut g, &self.params, &self.config, tokens, plan);
        let tokens = g.value(tokens).clone();
        let pooled = tokens.mean_axis(Axis(0)).expect("non-empty tokens");
        Ok((g.value(recon).clone(), EncoderOutput { tokens, pooled }))
    }

    /// Mean reconstruction loss over a batch and its parameter gradients.
    pub fn loss_and_grads(
        &self,
        images: &[ArrayView3<f64>],
        plans: &[MaskPlan],
    ) -> Result<(f64, std::collections::BTreeMap<String, Mat>)> {
        if images.is_empty() || images.len() != plans.len() {
            return Err(Error::arg("need one mask plan per image"));
        }
        let scale = 1.0 / images.len() as f64;
        let mut g = Graph::new();
        let mut total: Option<NodeId> = None;
        let mut value = 0.0;
        for (img, plan) in images.iter().zip(plans) {
            let grid = self.check_plan(plan)?;
            let patches = patchify(img.view(), &grid)?;
            let tokens = encode_graph(&mut g, &self.params, &self.config, &patches, &plan.visible_indices());
            let recon = decode_graph(&mut g, &self.params, &self.config, tokens, plan);
            let (l, grad) = mae_loss_grad(g.value(recon).view(), patches.view(), plan, self.config.loss_on_all_patches)?;
            value += l * scale;
            let node = g.external_loss(recon, l * scale, grad * scale);
            total = Some(match total {
                Some(t) => g.add(t, node),
                None => node,
            });
        }
        let grads = g.backward(total.expect("non-empty batch")).into_params();
        Ok((value, grads))
    }
}

pub(crate) fn check_shapes(reference: &ParamStore, params: &ParamStore) -> Result<()> {
    for (name, t) in reference.iter() {
        match params.get(name) {
            Some(p) if p.dim() == t.dim() => {}
            Some(p) => {
                return Err(Error::Config(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    p.dim(),
                    t.dim()
                )))
            }
            None => return Err(Error::Config(format!("parameter `{name}` missing"))),
        }
    }
    if let Some(extra) = params.names().find(|n| !reference.contains(n)) {
        return Err(Error::Config(format!("unexpected parameter `{extra}`")));
    }
    Ok(())
}

/// `mae_forward` as a free function.
pub fn mae_forward(image: ArrayView3<f64>, plan: &MaskPlan, model: &MaeModel) -> Result<(Mat, EncoderOutput)> {
    model.forward(image, plan)
}

fn loss_rows(plan: &MaskPlan, all_patches: bool) -> Vec<usize> {
    if all_patches {
        (0..plan.masked.len()).collect()
    } else {
        plan.masked_indices()
    }
}

/// Mean squared pixel error over the masked patches (or over all patches
/// when `all_patches` is set).
pub fn mae_loss(recon: ArrayView2<f64>, target: ArrayView2<f64>, plan: &MaskPlan, all_patches: bool) -> Result<f64> {
    mae_loss_grad(recon, target, plan, all_patches).map(|(l, _)| l)
}

pub fn mae_loss_grad(
    recon: ArrayView2<f64>,
    target: ArrayView2<f64>,
    plan: &MaskPlan,
    all_patches: bool,
) -> Result<(f64, Mat)> {
    if recon.dim() != target.dim() {
        return Err(Error::arg(format!(
            "reconstruction {:?} and target {:?} differ in shape",
            recon.dim(),
            target.dim()
        )));
    }
    if plan.masked.len() != recon.nrows() {
        return Err(Error::arg("mask plan does not match patch count"));
    }
    let rows = loss_rows(plan, all_patches);
    if rows.is_empty() {
        return Err(Error::arg("no masked patches to score"));
    }
    let count = (rows.len() * recon.ncols()) as f64;
    let mut grad = Array2::zeros(recon.dim());
    let mut sum = 0.0;
    for &r in &rows {
        for c in 0..recon.ncols() {
            let d = recon[[r, c]] - target[[r, c]];
            sum += d * d;
            grad[[r, c]] = 2.0 * d / count;
        }
    }
    Ok((sum / count, grad))
}

/// Options for a pretraining run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub model: MaeModel,
    /// Mean batch loss at each optimisation step.
    pub step_losses: Vec<f64>,
    /// Mean batch loss per pass over the dataset (last pass may be partial).
    pub epoch_losses: Vec<f64>,
}

/// Self-supervised reconstruction training with fresh masks every step.
pub fn pretrain(
    dataset: &[Array3<f64>],
    model: MaeModel,
    opt: OptimizerSpec,
    options: PretrainOptions,
) -> Result<PretrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::arg("empty pretraining dataset"));
    }
    if options.batch_size == 0 {
        return Err(Error::arg("batch size must be positive"));
    }
    let grid = model.config.grid()?;
    let mut model = model;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut adam = AdamW::new(opt);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut step_losses = Vec::with_capacity(options.steps);
    let mut epoch_losses = Vec::new();
    let mut epoch_acc = (0.0, 0usize);
    for _ in 0..options.steps {
        let mut batch = Vec::with_capacity(options.batch_size);
        while batch.len() < options.batch_size.min(dataset.len()) {
            if cursor == order.len() {
                if epoch_acc.1 > 0 {
                    epoch_losses.push(epoch_acc.0 / epoch_acc.1 as f64);
                    epoch_acc = (0.0, 0);
                }
                order = (0..dataset.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let plans: Vec<MaskPlan> = batch
            .iter()
            .map(|_| sample_mask_with(&grid, model.config.mask_ratio, &mut rng))
            .collect::<Result<_>>()?;
        let views: Vec<_> = batch.iter().map(|&i| dataset[i].view()).collect();
        let (loss, grads) = model.loss_and_grads(&views, &plans)?;
        adam.step(&mut model.params, &grads);
        step_losses.push(loss);
        epoch_acc.0 += loss;
        epoch_acc.1 += 1;
    }
    if epoch_acc.1 > 0 {
        epoch_losses.push(epoch_acc.0 / epoch_acc.1 as f64);
    }
    Ok(PretrainOutcome {
        model,
        step_losses,
        epoch_losses,
    })
}

/// Activation turning head outputs into task predictions: sigmoid for AU,
/// softmax for EXPR and tanh (range `[-1, 1]`) for VA.
pub(crate) fn task_activation(g: &mut Graph, task: Task, logits: NodeId) -> NodeId {
    match task {
        Task::Au => g.sigmoid(logits),
        Task::Expr => g.softmax_rows(logits),
        Task::Va => g.tanh(logits),
    }
}

/// Pretrained encoder with its decoder removed and a linear task head on the
/// mean-pooled tokens. During fine-tuning every patch is visible.
#[derive(Clone, Debug, PartialEq)]
pub struct FineTuneModel {
    pub mae_config: MaeConfig,
    pub task: TaskSpec,
    pub encoder: ParamStore,
    pub head: ParamStore,
}

/// Drops the decoder of `mae` and attaches a fresh head for `task`.
pub fn attach_head(mae: &MaeModel, task: TaskSpec, seed: u64) -> Result<FineTuneModel> {
    task.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut head = ParamStore::new();
    head.init_linear(&mut rng, "head", mae.config.encoder_dim, task.n_outputs);
    Ok(FineTuneModel {
        mae_config: mae.config.clone(),
        task,
        encoder: mae.encoder_params(),
        head,
    })
}

impl FineTuneModel {
    /// Rebuilds a model from one flat store holding encoder and head
    /// parameters, as written by [`FineTuneModel::all_params`].
    pub fn from_params(mae_config: MaeConfig, task: TaskSpec, params: &ParamStore) -> Result<Self> {
        task.validate()?;
        let reference = attach_head(&MaeModel::new(mae_config.clone(), 0)?, task.clone(), 0)?;
        check_shapes(&reference.all_params(), params)?;
        Ok(FineTuneModel {
            mae_config,
            task,
            encoder: params.subset_where(|n| !n.starts_with("head.")),
            head: params.subset("head."),
        })
    }

    /// Encoder and head parameters in one unfrozen store.
    pub fn all_params(&self) -> ParamStore {
        let mut out = self.encoder.clone();
        out.unfreeze();
        out.extend(&self.head);
        out
    }

    pub fn set_freeze_encoder(&mut self, freeze: bool) {
        if freeze {
            self.encoder.freeze();
        } else {
            self.encoder.unfreeze();
        }
    }

    fn pooled_graph(&self, g: &mut Graph, image: ArrayView3<f64>) -> Result<NodeId> {
        let grid = self.mae_config.grid()?;
        let patches = patchify(image, &grid)?;
        let all: Vec<usize> = (0..grid.n_patches()).collect();
        let tokens = encode_graph(g, &self.encoder, &self.mae_config, &patches, &all);
        Ok(g.mean_rows(tokens))
    }

    fn outputs_graph(&self, g: &mut Graph, images: &[ArrayView3<f64>]) -> Result<(NodeId, NodeId)> {
        if images.is_empty() {
            return Err(Error::arg("no images"));
        }
        let pooled: Vec<NodeId> = images
            .iter()
            .map(|img| self.pooled_graph(g, img.view()))
            .collect::<Result<_>>()?;
        let stacked = if pooled.len() == 1 {
            pooled[0]
        } else {
            g.concat_rows(&pooled)
        };
        let logits = linear(g, &self.head, "head", stacked);
        let out = task_activation(g, self.task.task, logits);
        Ok((logits, out))
    }

    /// Raw head outputs `[B × n_outputs]` before the task activation.
    pub fn logits(&self, images: &[ArrayView3<f64>]) -> Result<Mat> {
        let mut g = Graph::new();
        let (logits, _) = self.outputs_graph(&mut g, images)?;
        Ok(g.value(logits).clone())
    }

    /// Task predictions `[B × n_outputs]`.
    pub fn predict(&self, images: &[ArrayView3<f64>]) -> Result<Mat> {
        let mut g = Graph::new();
        let (_, out) = self.outputs_graph(&mut g, images)?;
        Ok(g.value(out).clone())
    }

    /// Mean-pooled encoder output for one image (all patches visible).
    pub fn encode(&self, image: ArrayView3<f64>) -> Result<EncoderOutput> {
        let grid = self.mae_config.grid()?;
        let patches = patchify(image, &grid)?;
        let all: Vec<usize> = (0..grid.n_patches()).collect();
        let mut g = Graph::new();
        let tokens = encode_graph(&mut g, &self.encoder, &self.mae_config, &patches, &all);
        let tokens = g.value(tokens).clone();
        let pooled = tokens.mean_axis(Axis(0)).expect("non-empty tokens");
        Ok(EncoderOutput { tokens, pooled })
    }

    /// Task loss on a batch and gradients for every trainable parameter.
    pub fn loss_and_grads(
        &self,
        images: &[ArrayView3<f64>],
        targets: ArrayView2<f64>,
    ) -> Result<(f64, std::collections::BTreeMap<String, Mat>)> {
        let mut g = Graph::new();
        let (_, out) = self.outputs_graph(&mut g, images)?;
        let (l, grad) = task_loss_grad(&self.task, g.value(out).view(), targets)?;
        let root = g.external_loss(out, l, grad);
        Ok((l, g.backward(root).into_params()))
    }

    /// One shuffled pass over `(image, target row)` pairs; returns the mean
    /// batch loss.
    pub fn train_epoch(
        &mut self,
        images: &[Array3<f64>],
        targets: ArrayView2<f64>,
        opt: &mut AdamW,
        batch_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        if images.is_empty() || images.len() != targets.nrows() {
            return Err(Error::arg("need one target row per image"));
        }
        if batch_size == 0 {
            return Err(Error::arg("batch size must be positive"));
        }
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(rng);
        let mut total = 0.0;
        let mut n_batches = 0;
        for chunk in order.chunks(batch_size) {
            // CCC needs two samples; fold a trailing singleton into no batch.
            if self.task.task == Task::Va && chunk.len() < 2 {
                continue;
            }
            let views: Vec<_> = chunk.iter().map(|&i| images[i].view()).collect();
            let t = targets.select(Axis(0), chunk);
            let (l, grads) = self.loss_and_grads(&views, t.view())?;
            opt.step(&mut self.encoder, &grads);
            opt.step(&mut self.head, &grads);
            total += l;
            n_batches += 1;
        }
        Ok(if n_batches == 0 { 0.0 } else { total / n_batches as f64 })
    }
}
