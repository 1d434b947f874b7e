//! Pre-training loops, the optimizer and the learning-rate schedule.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::contrastive::{npid_loss, pirl_loss, sample_negatives, sample_negatives_excluding, MemoryBank, NceConfig};
use crate::data::{ChannelStats, Dataset};
use crate::error::{Error, Result};
use crate::model::{EncoderModel, ModelConfig, SlotOrder};
use crate::seed::{self, Stream};
use crate::tensor::{ParamStore, Scalar, Tape, Tensor, Var};
use crate::transforms::{
    jigsaw_transform, permutation_count, rotate_image, standard_augment, AugmentConfig, JigsawGeometry,
    PermutationSet,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    PirlJigsaw,
    PirlRotation,
    PirlCombined,
    CovariantJigsaw,
    Npid,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::PirlJigsaw => "pirl-jigsaw",
            Self::PirlRotation => "pirl-rotation",
            Self::PirlCombined => "pirl-combined",
            Self::CovariantJigsaw => "covariant-jigsaw",
            Self::Npid => "npid",
        }
    }

    /// Whether the transformed view is a patch set.
    pub fn uses_patches(self) -> bool {
        matches!(self, Self::PirlJigsaw | Self::PirlCombined | Self::CovariantJigsaw)
    }

    pub fn uses_bank(self) -> bool {
        !matches!(self, Self::CovariantJigsaw)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PermSpec {
    pub grid: usize,
    /// Size of the contrastive transform set; the covariant task uses `model.cls_classes` instead.
    pub count: usize,
    pub seed: u64,
}

impl Default for PermSpec {
    fn default() -> Self {
        Self {
            grid: 3,
            count: 362_880,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewConfig {
    /// Side of the whole-image views.
    pub size: usize,
    pub jigsaw: JigsawGeometry,
    pub augment: AugmentConfig,
    pub jigsaw_augment: AugmentConfig,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            size: 96,
            jigsaw: JigsawGeometry::default(),
            augment: AugmentConfig::standard(),
            jigsaw_augment: AugmentConfig::jigsaw(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: TaskKind,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub bank_momentum: f64,
    /// One negative draw per step, excluding the whole batch, instead of one per image.
    pub shared_negatives: bool,
    /// Checkpoint interval in epochs; 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
    pub nce: NceConfig,
    pub perms: PermSpec,
    pub model: ModelConfig,
    pub views: ViewConfig,
    /// Standardization statistics; filled from the training data when absent.
    pub stats: Option<ChannelStats>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::PirlJigsaw,
            seed: 0,
            epochs: 50,
            batch_size: 128,
            lr_initial: 0.03,
            lr_final: 3e-5,
            momentum: 0.9,
            weight_decay: 1e-4,
            bank_momentum: 0.5,
            shared_negatives: false,
            checkpoint_every: 10,
            nce: NceConfig::default(),
            perms: PermSpec::default(),
            model: ModelConfig::default(),
            views: ViewConfig::default(),
            stats: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, dataset_len: usize) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 || self.batch_size == 0 {
            return cfg("epochs and batch size must be at least 1".into());
        }
        if !(self.lr_final > 0.0 && self.lr_initial >= self.lr_final && self.lr_initial.is_finite()) {
            return cfg(format!(
                "learning rates need lr_initial >= lr_final > 0, got {} and {}",
                self.lr_initial, self.lr_final
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return cfg(format!(
                "momentum {} must lie in [0, 1) and weight decay {} must be non-negative",
                self.momentum, self.weight_decay
            ));
        }
        if !(0.0..1.0).contains(&self.bank_momentum) {
            return cfg(format!("bank momentum {} must lie in [0, 1)", self.bank_momentum));
        }
        if dataset_len == 0 {
            return cfg("empty training set".into());
        }
        self.model.validate()?;
        let g = self.views.jigsaw.grid;
        if self.model.grid != g || self.perms.grid != g {
            return cfg(format!(
                "grid sides disagree: model {}, views {}, perms {}",
                self.model.grid, g, self.perms.grid
            ));
        }
        self.views.jigsaw.validate().map_err(config_err)?;
        self.views.augment.validate().map_err(config_err)?;
        self.views.jigsaw_augment.validate().map_err(config_err)?;
        if self.views.size < 16 {
            return cfg(format!("view size {} is below the trunk minimum of 16", self.views.size));
        }
        if self.task.uses_patches() && self.views.jigsaw.patch < 16 {
            return cfg(format!("patch side {} is below the trunk minimum of 16", self.views.jigsaw.patch));
        }
        let set = self.perm_set_size();
        if set == 0 || set as u128 > permutation_count(g) {
            return Err(Error::SetTooLarge {
                requested: set as u128,
                available: permutation_count(g),
            });
        }
        if self.task.uses_bank() {
            self.nce.validate(dataset_len)?;
        }
        Ok(())
    }

    /// A small network and geometry for smoke runs on 32x32 images.
    pub fn tiny(task: TaskKind) -> Self {
        Self {
            task,
            epochs: 5,
            batch_size: 4,
            lr_initial: 0.05,
            lr_final: 0.005,
            checkpoint_every: 0,
            nce: NceConfig {
                negatives: 2,
                ..NceConfig::default()
            },
            perms: PermSpec {
                count: 30,
                ..PermSpec::default()
            },
            model: ModelConfig {
                channels: [4, 8, 8, 16],
                embed_dim: 16,
                cls_classes: 10,
                ..ModelConfig::default()
            },
            views: ViewConfig {
                size: 32,
                jigsaw: JigsawGeometry {
                    working_size: 48,
                    grid: 3,
                    patch: 16,
                    jitter: 0,
                },
                ..ViewConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn perm_set_size(&self) -> usize {
        match self.task {
            TaskKind::CovariantJigsaw => self.model.cls_classes,
            _ => self.perms.count,
        }
    }
}

fn config_err(e: Error) -> Error {
    match e {
        Error::InvalidArgument(m) => Error::Config(m),
        other => other,
    }
}

pub fn cosine_lr(step: usize, total: usize, lr0: f64, lr1: f64) -> Result<f64> {
    if total == 0 || step > total {
        return Err(Error::invalid(format!("schedule step {step} outside 0..={total}")));
    }
    let t = step as f64 / total as f64;
    Ok(lr1 + (lr0 - lr1) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0)
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the velocity.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: T,
    pub weight_decay: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(store: &ParamStore<T>, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum: T::from_f64_lossy(momentum),
            weight_decay: T::from_f64_lossy(weight_decay),
            velocity: store.ids().map(|id| vec![T::zero(); store.value(id).numel()]).collect(),
        }
    }

    pub fn velocity(&self, index: usize) -> &[T] {
        &self.velocity[index]
    }

    pub fn velocity_mut(&mut self, index: usize) -> &mut [T] {
        &mut self.velocity[index]
    }

    /// `v = mu * v + grad + wd * p; p -= lr * v`. Nothing changes if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: T) -> Result<()> {
        for id in store.ids() {
            if let Some(pos) = store.grad(id).iter().position(|g| !g.is_finite()) {
                return Err(Error::NumericalInstability(format!(
                    "non-finite gradient in {} at element {pos}",
                    store.name(id)
                )));
            }
        }
        let ids: Vec<_> = store.ids().collect();
        for (vel, id) in self.velocity.iter_mut().zip(ids) {
            let (value, grad) = store.value_and_grad_mut(id);
            for ((p, v), &g) in value.data_mut().iter_mut().zip(vel.iter_mut()).zip(grad) {
                *v = self.momentum * *v + g + self.weight_decay * *p;
                *p = *p - lr * *v;
            }
        }
        Ok(())
    }
}

/// The transformed view fed to head g.
#[derive(Debug, Clone)]
pub enum TransformedInput<T> {
    /// `[B * g^2, 3, p, p]`, item-major.
    Patches(Tensor<T>),
    /// `[B, 3, S, S]`.
    Whole(Tensor<T>),
}

/// Forward pass of the contrastive objective.
#[derive(Debug, Clone, Copy)]
pub struct ContrastiveForward {
    pub loss: Var,
    pub transformed: Option<Var>,
    pub untransformed: Var,
    pub f: Var,
}

pub fn embed_transformed<T: Scalar>(
    model: &EncoderModel<T>,
    tape: &mut Tape<T>,
    input: TransformedInput<T>,
    order: SlotOrder,
) -> Result<Var> {
    match input {
        TransformedInput::Patches(p) => {
            let x = tape.constant(p)?;
            let trunk = model.encode_trunk(tape, x)?;
            model.head_g(tape, trunk.pooled, order)
        }
        TransformedInput::Whole(v) => {
            let x = tape.constant(v)?;
            let trunk = model.encode_trunk(tape, x)?;
            model.head_g_rotation(tape, trunk.pooled)
        }
    }
}

/// Builds the contrastive loss. Without a transformed view this is the
/// instance-discrimination objective alone.
pub fn contrastive_forward<T: Scalar>(
    model: &EncoderModel<T>,
    tape: &mut Tape<T>,
    views: Tensor<T>,
    transformed: Option<TransformedInput<T>>,
    bank_rows: Tensor<T>,
    negatives: Tensor<T>,
    nce: &NceConfig,
    order: SlotOrder,
) -> Result<ContrastiveForward> {
    let x = tape.constant(views)?;
    let trunk = model.encode_trunk(tape, x)?;
    let f = model.head_f(tape, trunk.pooled)?;
    let m = tape.constant(bank_rows)?;
    let negs = tape.constant(negatives)?;
    match transformed {
        Some(input) => {
            let g = embed_transformed(model, tape, input, order)?;
            let l = pirl_loss(tape, m, f, g, negs, nce)?;
            Ok(ContrastiveForward {
                loss: l.total,
                transformed: Some(l.transformed),
                untransformed: l.untransformed,
                f,
            })
        }
        None => {
            let l = npid_loss(tape, m, f, negs, nce.temperature)?;
            Ok(ContrastiveForward {
                loss: l,
                transformed: None,
                untransformed: l,
                f,
            })
        }
    }
}

/// Mean permutation-classification cross-entropy.
pub fn covariant_forward<T: Scalar>(
    model: &EncoderModel<T>,
    tape: &mut Tape<T>,
    patches: Tensor<T>,
    targets: &[usize],
) -> Result<Var> {
    let x = tape.constant(patches)?;
    let trunk = model.encode_trunk(tape, x)?;
    let logits = model.covariant_logits(tape, trunk.pooled)?;
    let ce = tape.softmax_cross_entropy(logits, targets)?;
    tape.mean(ce)
}

/// Concatenates tensors of equal shape along a new (or, with `merge`, the existing) leading axis.
pub fn stack(parts: &[Tensor<f32>], merge: bool) -> Result<Tensor<f32>> {
    let first = parts.first().ok_or_else(|| Error::invalid("cannot stack zero tensors"))?;
    let mut data = Vec::with_capacity(first.numel() * parts.len());
    for p in parts {
        if p.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                op: "stack",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        data.extend_from_slice(p.data());
    }
    let mut shape = first.shape().to_vec();
    if merge {
        shape[0] *= parts.len();
    } else {
        shape.insert(0, parts.len());
    }
    Tensor::new(shape, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub term_transformed: Option<f64>,
    pub term_untransformed: Option<f64>,
}

/// One training run's state.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    data: &'a Dataset,
    stats: ChannelStats,
    pub model: EncoderModel<f32>,
    pub sgd: Sgd<f32>,
    pub bank: Option<MemoryBank<f32>>,
    pset: Option<PermutationSet>,
    /// Skips bank writes; used to show the bank never feeds gradients back.
    pub bank_frozen: bool,
    steps_per_epoch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &TrainConfig, data: &'a Dataset) -> Result<Self> {
        cfg.validate(data.len())?;
        let mut cfg = cfg.clone();
        let stats = *cfg.stats.get_or_insert_with(|| data.channel_stats());
        let model = EncoderModel::new(cfg.model.clone())?;
        let sgd = Sgd::new(model.params(), cfg.momentum, cfg.weight_decay);
        let bank = if cfg.task.uses_bank() {
            Some(MemoryBank::new(data.len(), cfg.model.embed_dim, cfg.bank_momentum, cfg.seed)?)
        } else {
            None
        };
        let pset = match cfg.task {
            TaskKind::PirlRotation | TaskKind::Npid => None,
            _ => Some(PermutationSet::generate(cfg.perms.grid, cfg.perm_set_size(), cfg.perms.seed)?),
        };
        Ok(Self {
            steps_per_epoch: data.len().div_ceil(cfg.batch_size),
            cfg,
            data,
            stats,
            model,
            sgd,
            bank,
            pset,
            bank_frozen: false,
        })
    }

    /// The resolved configuration, including standardization statistics.
    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch * self.cfg.epochs
    }

    pub fn permutation_set(&self) -> Option<&PermutationSet> {
        self.pset.as_ref()
    }

    /// Iteration order for one epoch; dataset indices themselves never move.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut seed::rng(self.cfg.seed, Stream::Shuffle, &[epoch as u64]));
        order
    }

    pub fn batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        self.epoch_order(epoch).chunks(self.cfg.batch_size).map(<[usize]>::to_vec).collect()
    }

    fn views(&self, epoch: usize, batch: &[usize]) -> Result<Tensor<f32>> {
        let size = self.cfg.views.size;
        let parts = batch
            .par_iter()
            .map(|&i| {
                let s = seed::derive(self.cfg.seed, Stream::ImageView, &[epoch as u64, i as u64]);
                standard_augment(self.data.image(i), &self.cfg.views.augment, size, &self.stats, s)
            })
            .collect::<Result<Vec<_>>>()?;
        stack(&parts, false)
    }

    /// Transformed views and the transform drawn for each image (permutation id or quarter turns).
    fn transformed(&self, epoch: usize, batch: &[usize]) -> Result<(TransformedInput<f32>, Vec<usize>)> {
        let cfg = &self.cfg;
        let parts = batch
            .par_iter()
            .map(|&i| -> Result<(Tensor<f32>, usize)> {
                let coords = [epoch as u64, i as u64];
                let mut choice = seed::rng(cfg.seed, Stream::TransformChoice, &coords);
                let s = seed::derive(cfg.seed, Stream::TransformedView, &coords);
                let img = self.data.image(i);
                match cfg.task {
                    TaskKind::PirlRotation => {
                        let k = choice.random_range(0..4);
                        let rotated = rotate_image(img, k)?;
                        let t = standard_augment(&rotated, &cfg.views.augment, cfg.views.size, &self.stats, s)?;
                        Ok((t, k))
                    }
                    _ => {
                        let pset = self.pset.as_ref().expect("patch tasks carry a permutation set");
                        let perm = choice.random_range(0..pset.len());
                        let src = if cfg.task == TaskKind::PirlCombined {
                            rotate_image(img, choice.random_range(0..4))?
                        } else {
                            img.clone()
                        };
                        let ps = jigsaw_transform(
                            &src,
                            perm,
                            pset,
                            &cfg.views.jigsaw_augment,
                            &cfg.views.jigsaw,
                            &self.stats,
                            s,
                        )?;
                        Ok((ps.patches, perm))
                    }
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let (tensors, choices): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
        let input = if cfg.task == TaskKind::PirlRotation {
            TransformedInput::Whole(stack(&tensors, false)?)
        } else {
            TransformedInput::Patches(stack(&tensors, true)?)
        };
        Ok((input, choices))
    }

    fn negatives(&self, step: usize, batch: &[usize]) -> Result<Tensor<f32>> {
        let bank = self.bank.as_ref().expect("contrastive tasks carry a bank");
        let n = self.cfg.nce.negatives;
        let mut idx = Vec::with_capacity(batch.len() * n);
        if self.cfg.shared_negatives {
            let s = seed::derive(self.cfg.seed, Stream::Negatives, &[step as u64]);
            let shared = sample_negatives_excluding(bank.len(), batch, n, s)?;
            for _ in batch {
                idx.extend_from_slice(&shared);
            }
        } else {
            for &i in batch {
                let s = seed::derive(self.cfg.seed, Stream::Negatives, &[step as u64, i as u64]);
                idx.extend(sample_negatives(bank.len(), i, n, s)?);
            }
        }
        bank.gather(&idx)?.reshape(&[batch.len(), n, bank.dim()])
    }

    /// Forward, backward, optimizer step and bank write for one batch.
    pub fn step(&mut self, epoch: usize, step: usize, batch: &[usize]) -> Result<StepMetrics> {
        let lr = cosine_lr(step, self.total_steps(), self.cfg.lr_initial, self.cfg.lr_final)?;
        let views = if self.cfg.task.uses_bank() {
            Some(self.views(epoch, batch)?)
        } else {
            None
        };
        let transformed = match self.cfg.task {
            TaskKind::Npid => None,
            _ => Some(self.transformed(epoch, batch)?),
        };
        let mut tape = Tape::new();
        let order = SlotOrder::Shuffled(seed::derive(self.cfg.seed, Stream::HeadShuffle, &[step as u64]));
        let (loss, terms, f) = match (views, transformed) {
            (Some(views), transformed) => {
                let bank = self.bank.as_ref().expect("contrastive tasks carry a bank");
                let rows = bank.gather(batch)?;
                let negs = self.negatives(step, batch)?;
                let out = contrastive_forward(
                    &self.model,
                    &mut tape,
                    views,
                    transformed.map(|t| t.0),
                    rows,
                    negs,
                    &self.cfg.nce,
                    order,
                )?;
                (out.loss, (out.transformed, Some(out.untransformed)), Some(out.f))
            }
            (None, Some((TransformedInput::Patches(p), perms))) => {
                let loss = covariant_forward(&self.model, &mut tape, p, &perms)?;
                (loss, (Some(loss), None), None)
            }
            (None, _) => unreachable!("covariant task always builds patches"),
        };
        let value = |v: Var| tape.value(v).item() as f64;
        let metrics = StepMetrics {
            step,
            epoch,
            lr,
            loss: value(loss),
            term_transformed: terms.0.map(value),
            term_untransformed: terms.1.map(value),
        };
        let params = self.model.params_mut();
        params.zero_grad();
        tape.backward(loss, params)?;
        self.sgd.step(params, lr as f32)?;
        if let (Some(f), Some(bank)) = (f, self.bank.as_mut()) {
            if !self.bank_frozen {
                let fv = tape.value(f);
                for (r, &i) in batch.iter().enumerate() {
                    bank.update(i, fv.row(r))?;
                }
            }
        }
        Ok(metrics)
    }

    pub fn checkpoint(&self, epoch: usize) -> Result<Checkpoint> {
        let echo = serde_json::to_string(&self.cfg).map_err(|e| Error::Format(e.to_string()))?;
        let mut ckpt = Checkpoint::new(echo);
        self.model.to_checkpoint(&mut ckpt);
        let params = self.model.params();
        for (k, id) in params.ids().enumerate() {
            let v = Tensor::new(params.value(id).shape().to_vec(), self.sgd.velocity(k).to_vec())?;
            ckpt.push(&format!("momentum/{}", params.name(id)), &v);
        }
        if let Some(bank) = &self.bank {
            ckpt.push("bank/rows", bank.rows());
        }
        ckpt.push("state/epoch", &Tensor::<f64>::scalar(epoch as f64));
        Ok(ckpt)
    }
}

/// Result of a completed run.
pub struct TrainOutcome {
    pub model: EncoderModel<f32>,
    pub bank: Option<MemoryBank<f32>>,
    pub metrics: Vec<StepMetrics>,
    pub checkpoint: Checkpoint,
    pub config: TrainConfig,
}

/// Runs every epoch. With an output directory, writes `metrics.jsonl`,
/// `timing.jsonl`, periodic `checkpoint-epochNNNN.ckpt` files and `final.ckpt`.
/// A failing step aborts the run; checkpoints already written stay in place.
pub fn pretrain(cfg: &TrainConfig, data: &Dataset, out: Option<&Path>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg, data)?;
    let mut sinks = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let open = |name: &str| -> Result<BufWriter<File>> {
                let p = dir.join(name);
                Ok(BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?))
            };
            Some((dir, open("metrics.jsonl")?, open("timing.jsonl")?))
        }
        None => None,
    };
    let start = Instant::now();
    let mut metrics = Vec::with_capacity(trainer.total_steps());
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in trainer.batches(epoch) {
            let m = trainer.step(epoch, step, &batch)?;
            if let Some((dir, mfile, tfile)) = sinks.as_mut() {
                let line = serde_json::to_string(&m).map_err(|e| Error::Format(e.to_string()))?;
                let io = |e| Error::io(*dir, e);
                writeln!(mfile, "{line}").map_err(io)?;
                writeln!(tfile, "{{\"step\":{step},\"wall_time_s\":{:.3}}}", start.elapsed().as_secs_f64()).map_err(io)?;
            }
            metrics.push(m);
            step += 1;
        }
        if let Some((dir, mfile, tfile)) = sinks.as_mut() {
            mfile.flush().map_err(|e| Error::io(*dir, e))?;
            tfile.flush().map_err(|e| Error::io(*dir, e))?;
            let every = cfg.checkpoint_every;
            if every > 0 && (epoch + 1) % every == 0 && epoch + 1 < cfg.epochs {
                trainer
                    .checkpoint(epoch + 1)?
                    .save(&dir.join(format!("checkpoint-epoch{:04}.ckpt", epoch + 1)))?;
            }
        }
    }
    let checkpoint = trainer.checkpoint(cfg.epochs)?;
    if let Some((dir, ..)) = &sinks {
        checkpoint.save(&dir.join("final.ckpt"))?;
    }
    Ok(TrainOutcome {
        config: trainer.cfg.clone(),
        model: trainer.model,
        bank: trainer.bank,
        metrics,
        checkpoint,
    })
}

/// The permutation-classification baseline.
pub fn pretrain_covariant(cfg: &TrainConfig, data: &Dataset, out: Option<&Path>) -> Result<TrainOutcome> {
    if cfg.task != TaskKind::CovariantJigsaw {
        return Err(Error::Config(format!("covariant pretraining needs task covariant-jigsaw, got {}", cfg.task.name())));
    }
    pretrain(cfg, data, out)
}

/// Model and resolved configuration stored in a training checkpoint.
pub fn load_trained(ckpt: &Checkpoint) -> Result<(TrainConfig, EncoderModel<f32>)> {
    let cfg: TrainConfig = serde_json::from_str(&ckpt.config)
        .map_err(|e| Error::Format(format!("checkpoint config echo: {e}")))?;
    let model = EncoderModel::from_checkpoint(cfg.model.clone(), ckpt)?;
    Ok((cfg, model))
}
