//! Convolutional trunk with the projection heads used by the contrastive and
//! covariant objectives.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::seed::{self, Stream};
use crate::tensor::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};

pub const STAGES: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Output channels of the four trunk stages; the last is the trunk feature width.
    pub channels: [usize; STAGES],
    pub embed_dim: usize,
    /// Jigsaw grid side; the patch head consumes `grid^2` patches.
    pub grid: usize,
    /// Output width of the permutation classifier.
    pub cls_classes: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: [32, 64, 128, 256],
            embed_dim: 128,
            grid: 3,
            cls_classes: 100,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn feature_dim(&self) -> usize {
        self.channels[STAGES - 1]
    }

    pub fn patches(&self) -> usize {
        self.grid * self.grid
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) || self.embed_dim == 0 || self.grid == 0 || self.cls_classes == 0 {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Names and shapes of every parameter in registration order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        let mut out = Vec::new();
        let mut in_ch = 3;
        for (s, &ch) in self.channels.iter().enumerate() {
            for conv in 1..=2 {
                let c_in = if conv == 1 { in_ch } else { ch };
                let base = format!("trunk.stage{}.conv{conv}", s + 1);
                out.push((format!("{base}.weight"), vec![ch, c_in, 3, 3], Init::Kaiming(c_in * 9)));
                out.push((format!("{base}.bias"), vec![ch], Init::Zero));
            }
            in_ch = ch;
        }
        let (dim, emb, p) = (self.feature_dim(), self.embed_dim, self.patches());
        let mut linear = |name: &str, fan_in: usize, fan_out: usize, init: Init| {
            out.push((format!("{name}.weight"), vec![fan_in, fan_out], init));
            out.push((format!("{name}.bias"), vec![fan_out], Init::Zero));
        };
        linear("head_f", dim, emb, Init::Kaiming(dim));
        linear("head_g.patch", dim, emb, Init::Kaiming(dim));
        linear("head_g.fuse", p * emb, emb, Init::Kaiming(p * emb));
        linear("head_g_rot", dim, emb, Init::Kaiming(dim));
        linear("covariant", p * dim, self.cls_classes, Init::Zero);
        out
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    Kaiming(usize),
    Zero,
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
}

/// Order in which per-patch embeddings are concatenated before fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotOrder {
    Identity,
    /// Independent random order per item, keyed by `(seed, item)`.
    Shuffled(u64),
}

#[derive(Debug, Clone, Copy)]
pub struct TrunkOutput {
    pub stages: [Var; STAGES],
    pub pooled: Var,
}

#[derive(Debug, Clone)]
pub struct EncoderModel<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    convs: Vec<Conv>,
    head_f: Linear,
    head_g_patch: Linear,
    head_g_fuse: Linear,
    head_g_rot: Linear,
    covariant: Linear,
}

impl<T: Scalar> EncoderModel<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (i, (name, shape, init)) in config.layout().into_iter().enumerate() {
            let t = match init {
                Init::Zero => Tensor::zeros(&shape),
                Init::Kaiming(fan_in) => Tensor::randn(
                    &shape,
                    (2.0 / fan_in as f64).sqrt(),
                    seed::derive(config.init_seed, Stream::Init, &[i as u64]),
                ),
            };
            params.insert(name, t)?;
        }
        Self::bind(config, params)
    }

    fn bind(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let lin = |name: &str| -> Result<Linear> {
            Ok(Linear {
                weight: params.expect_id(&format!("{name}.weight"))?,
                bias: params.expect_id(&format!("{name}.bias"))?,
            })
        };
        let mut convs = Vec::with_capacity(2 * STAGES);
        for s in 1..=STAGES {
            for c in 1..=2 {
                let base = format!("trunk.stage{s}.conv{c}");
                convs.push(Conv {
                    weight: params.expect_id(&format!("{base}.weight"))?,
                    bias: params.expect_id(&format!("{base}.bias"))?,
                });
            }
        }
        Ok(Self {
            head_f: lin("head_f")?,
            head_g_patch: lin("head_g.patch")?,
            head_g_fuse: lin("head_g.fuse")?,
            head_g_rot: lin("head_g_rot")?,
            covariant: lin("covariant")?,
            convs,
            config,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Replaces the parameter values; names and shapes must match.
    pub fn load_params(&mut self, other: &ParamStore<T>) -> Result<()> {
        for id in self.params.ids().collect::<Vec<_>>() {
            let name = self.params.name(id).to_string();
            let src = other.value(other.expect_id(&name)?);
            if src.shape() != self.params.value(id).shape() {
                return Err(Error::ShapeMismatch {
                    op: "load_params",
                    lhs: self.params.value(id).shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            *self.params.value_mut(id) = src.clone();
        }
        Ok(())
    }

    fn linear(&self, tape: &mut Tape<T>, x: Var, l: Linear) -> Result<Var> {
        let w = tape.param(&self.params, l.weight)?;
        let b = tape.param(&self.params, l.bias)?;
        tape.linear(x, w, b)
    }

    /// Four conv-relu-conv-relu-pool stages and a global average pool.
    pub fn encode_trunk(&self, tape: &mut Tape<T>, x: Var) -> Result<TrunkOutput> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::InvalidShape {
                op: "encode_trunk",
                shape,
                reason: "expected [N, 3, H, W]".into(),
            });
        }
        let min_side = 1 << STAGES;
        if shape[2] < min_side || shape[3] < min_side {
            return Err(Error::InvalidShape {
                op: "encode_trunk",
                shape,
                reason: format!("spatial size must be at least {min_side}"),
            });
        }
        let mut h = x;
        let mut stages = [x; STAGES];
        for (s, pair) in self.convs.chunks(2).enumerate() {
            for conv in pair {
                let w = tape.param(&self.params, conv.weight)?;
                let b = tape.param(&self.params, conv.bias)?;
                h = tape.conv2d(h, w, b, 1, 1)?;
                h = tape.relu(h)?;
            }
            h = tape.avg_pool2d(h)?;
            stages[s] = h;
        }
        let pooled = tape.global_avg_pool(h)?;
        Ok(TrunkOutput { stages, pooled })
    }

    pub fn head_f(&self, tape: &mut Tape<T>, pooled: Var) -> Result<Var> {
        self.linear(tape, pooled, self.head_f)
    }

    /// Patch-set embedding from `[N * g^2, D]` (or `[N, g^2, D]`) trunk features.
    pub fn head_g(&self, tape: &mut Tape<T>, patch_pooled: Var, order: SlotOrder) -> Result<Var> {
        let p = self.config.patches();
        let dim = self.config.feature_dim();
        let emb = self.config.embed_dim;
        let rows = self.patch_rows(tape, patch_pooled, "head_g")?;
        let n = rows / p;
        let flat = tape.reshape(patch_pooled, &[rows, dim])?;
        let per_patch = self.linear(tape, flat, self.head_g_patch)?;
        let ordered = match order {
            SlotOrder::Identity => per_patch,
            SlotOrder::Shuffled(seed) => {
                let idx = shuffled_slots(seed, n, p);
                tape.gather_rows(per_patch, &idx)?
            }
        };
        let concat = tape.reshape(ordered, &[n, p * emb])?;
        self.linear(tape, concat, self.head_g_fuse)
    }

    /// Single linear layer on the rotated view's pooled feature.
    pub fn head_g_rotation(&self, tape: &mut Tape<T>, pooled: Var) -> Result<Var> {
        self.linear(tape, pooled, self.head_g_rot)
    }

    /// Permutation-class logits from the slot-ordered concatenation of patch features.
    pub fn covariant_logits(&self, tape: &mut Tape<T>, patch_pooled: Var) -> Result<Var> {
        let p = self.config.patches();
        let rows = self.patch_rows(tape, patch_pooled, "covariant_logits")?;
        let concat = tape.reshape(patch_pooled, &[rows / p, p * self.config.feature_dim()])?;
        self.linear(tape, concat, self.covariant)
    }

    fn patch_rows(&self, tape: &Tape<T>, v: Var, op: &'static str) -> Result<usize> {
        let p = self.config.patches();
        let shape = tape.value(v).shape();
        let dim = self.config.feature_dim();
        let rows = match shape {
            [r, d] if *d == dim => *r,
            [n, q, d] if *q == p && *d == dim => n * q,
            _ => 0,
        };
        if rows == 0 || rows % p != 0 {
            return Err(Error::InvalidShape {
                op,
                shape: shape.to_vec(),
                reason: format!("expected {p} patch features of width {dim} per item"),
            });
        }
        Ok(rows)
    }

    pub fn to_checkpoint(&self, ckpt: &mut Checkpoint) {
        for id in self.params.ids() {
            ckpt.push(self.params.name(id), self.params.value(id));
        }
    }

    pub fn from_checkpoint(config: ModelConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut model = Self::new(config)?;
        for id in model.params.ids().collect::<Vec<_>>() {
            let name = model.params.name(id).to_string();
            let t: Tensor<T> = ckpt.get(&name)?;
            if t.shape() != model.params.value(id).shape() {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint parameter",
                    lhs: model.params.value(id).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            *model.params.value_mut(id) = t;
        }
        Ok(model)
    }

    pub fn cast<U: Scalar>(&self) -> EncoderModel<U> {
        EncoderModel::bind(self.config.clone(), self.params.cast()).expect("same layout")
    }
}

/// Row gather indices that shuffle each item's `p` slots independently.
pub fn shuffled_slots(seed: u64, items: usize, p: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx = Vec::with_capacity(items * p);
    for i in 0..items {
        let mut order: Vec<usize> = (0..p).collect();
        order.shuffle(&mut seed::rng(seed, Stream::HeadShuffle, &[i as u64]));
        idx.extend(order.into_iter().map(|s| i * p + s));
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            channels: [4, 4, 6, 8],
            embed_dim: 5,
            grid: 2,
            cls_classes: 7,
            init_seed: 3,
        }
    }

    fn input(n: usize, side: usize, seed: u64) -> Tensor<f64> {
        Tensor::randn(&[n, 3, side, side], 1.0, seed)
    }

    #[test]
    fn desk_shapes() {
        let model = EncoderModel::<f32>::new(ModelConfig::default()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[2, 3, 96, 96], 1.0, 1)).unwrap();
        let out = model.encode_trunk(&mut tape, x).unwrap();
        let sides: Vec<usize> = out.stages.iter().map(|&s| tape.value(s).shape()[2]).collect();
        assert_eq!(sides, vec![48, 24, 12, 6]);
        assert_eq!(tape.value(out.pooled).shape(), &[2, 256]);
        let f = model.head_f(&mut tape, out.pooled).unwrap();
        assert_eq!(tape.value(f).shape(), &[2, 128]);
    }

    #[test]
    fn patch_head_concat_width() {
        let cfg = ModelConfig::default();
        let layout = cfg.layout();
        let fuse = layout.iter().find(|(n, _, _)| n == "head_g.fuse.weight").unwrap();
        assert_eq!(fuse.1, vec![1152, 128]);
        let cls = layout.iter().find(|(n, _, _)| n == "covariant.weight").unwrap();
        assert_eq!(cls.1[1], 100);
    }

    #[test]
    fn zero_input_is_finite_and_bias_driven() {
        let model = EncoderModel::<f64>::new(tiny()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 16, 16])).unwrap();
        let out = model.encode_trunk(&mut tape, x).unwrap();
        // zero biases at init -> zero features
        assert!(tape.value(out.pooled).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_rows_are_bit_identical() {
        let model = EncoderModel::<f32>::new(tiny()).unwrap();
        let one = Tensor::<f32>::randn(&[1, 3, 16, 16], 1.0, 4);
        let mut two = one.data().to_vec();
        two.extend_from_slice(one.data());
        let mut tape = Tape::new();
        let a = tape.constant(one).unwrap();
        let b = tape.constant(Tensor::new(vec![2, 3, 16, 16], two).unwrap()).unwrap();
        let pa = model.encode_trunk(&mut tape, a).unwrap().pooled;
        let pb = model.encode_trunk(&mut tape, b).unwrap().pooled;
        let (ra, rb) = (tape.value(pa).data(), tape.value(pb).data());
        assert_eq!(&rb[..8], ra);
        assert_eq!(&rb[8..], ra);
    }

    #[test]
    fn wrong_channels_rejected() {
        let model = EncoderModel::<f32>::new(tiny()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 16, 16])).unwrap();
        assert!(model.encode_trunk(&mut tape, x).is_err());
    }

    #[test]
    fn head_f_bias_only() {
        let mut model = EncoderModel::<f64>::new(tiny()).unwrap();
        let w = model.params.expect_id("head_f.weight").unwrap();
        let b = model.params.expect_id("head_f.bias").unwrap();
        model.params.value_mut(w).data_mut().iter_mut().for_each(|v| *v = 0.0);
        model.params.value_mut(b).data_mut().copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[3, 8], 1.0, 2)).unwrap();
        let f = model.head_f(&mut tape, x).unwrap();
        for r in 0..3 {
            assert_eq!(tape.value(f).row(r), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        }
    }

    #[test]
    fn head_f_identity_copies_prefix() {
        let mut model = EncoderModel::<f64>::new(tiny()).unwrap();
        let w = model.params.expect_id("head_f.weight").unwrap();
        let data = model.params.value_mut(w).data_mut();
        data.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..5 {
            data[i * 5 + i] = 1.0;
        }
        let mut tape = Tape::new();
        let xt = Tensor::randn(&[2, 8], 1.0, 6);
        let x = tape.constant(xt.clone()).unwrap();
        let f = model.head_f(&mut tape, x).unwrap();
        for r in 0..2 {
            assert_eq!(tape.value(f).row(r), &xt.row(r)[..5]);
        }
    }

    #[test]
    fn symmetric_fuse_ignores_slot_order() {
        let mut model = EncoderModel::<f64>::new(tiny()).unwrap();
        let fuse = model.params.expect_id("head_g.fuse.weight").unwrap();
        // every slot block gets the same [emb, emb] matrix
        let block = Tensor::<f64>::randn(&[5, 5], 1.0, 8);
        let data = model.params.value_mut(fuse).data_mut();
        for slot in 0..4 {
            data[slot * 25..(slot + 1) * 25].copy_from_slice(block.data());
        }
        let feats = Tensor::<f64>::randn(&[2 * 4, 8], 1.0, 9);
        let run = |order| {
            let mut tape = Tape::new();
            let x = tape.constant(feats.clone()).unwrap();
            let g = model.head_g(&mut tape, x, order).unwrap();
            tape.value(g).clone()
        };
        let a = run(SlotOrder::Shuffled(1));
        let b = run(SlotOrder::Shuffled(2));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_patch_count_rejected() {
        let model = EncoderModel::<f64>::new(tiny()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[6, 8])).unwrap();
        assert!(model.head_g(&mut tape, x, SlotOrder::Identity).is_err());
        let y = tape.constant(Tensor::zeros(&[2, 3, 8])).unwrap();
        assert!(model.covariant_logits(&mut tape, y).is_err());
    }

    #[test]
    fn covariant_starts_uniform() {
        let model = EncoderModel::<f64>::new(tiny()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(input(2 * 4, 16, 1)).unwrap();
        let trunk = model.encode_trunk(&mut tape, x).unwrap();
        let logits = model.covariant_logits(&mut tape, trunk.pooled).unwrap();
        assert_eq!(tape.value(logits).shape(), &[2, 7]);
        assert!(tape.value(logits).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn param_count_ignores_permutation_count_except_classifier() {
        let a = ModelConfig::default();
        let b = ModelConfig {
            cls_classes: 1000,
            ..a.clone()
        };
        let delta = b.param_count() - a.param_count();
        assert_eq!(delta, 900 * (9 * 256 + 1));
        assert_eq!(EncoderModel::<f32>::new(a.clone()).unwrap().params().numel(), a.param_count());
    }

    #[test]
    fn shuffled_slots_permute_within_items() {
        let idx = shuffled_slots(5, 3, 9);
        for item in 0..3 {
            let mut chunk = idx[item * 9..(item + 1) * 9].to_vec();
            chunk.sort_unstable();
            assert_eq!(chunk, (item * 9..(item + 1) * 9).collect::<Vec<_>>());
        }
    }
}
