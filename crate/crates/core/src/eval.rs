//! Frozen-feature linear probes, invariance-distance histograms and sweeps.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ChannelStats, Dataset};
use crate::error::{Error, Result};
use crate::model::{EncoderModel, SlotOrder, STAGES};
use crate::seed::{self, Stream};
use crate::tensor::{ParamStore, Tape, Tensor, NORM_EPS};
use crate::training::{embed_transformed, pretrain, stack, Sgd, TrainConfig, TransformedInput};
use crate::transforms::{
    jigsaw_transform, permutation_count, rotate_image, standard_augment, AugmentConfig, PermutationSet,
};

/// Where probe features are read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Layer {
    /// Output of trunk stage `1..=4`.
    Stage(usize),
    Pooled,
}

impl Layer {
    pub fn all() -> Vec<Layer> {
        let mut v: Vec<Layer> = (1..=STAGES).map(Layer::Stage).collect();
        v.push(Layer::Pooled);
        v
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layer::Stage(s) => write!(f, "stage-{s}"),
            Layer::Pooled => f.write_str("pooled"),
        }
    }
}

impl FromStr for Layer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "pooled" {
            return Ok(Layer::Pooled);
        }
        match s.strip_prefix("stage-").and_then(|n| n.parse::<usize>().ok()) {
            Some(n) if (1..=STAGES).contains(&n) => Ok(Layer::Stage(n)),
            _ => Err(Error::UnknownLayer(s.to_string())),
        }
    }
}

impl TryFrom<String> for Layer {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Layer> for String {
    fn from(l: Layer) -> String {
        l.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub layer: Layer,
    pub epochs: usize,
    /// Initial rate, divided by ten after each third of training.
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Per-stage features are average-pooled to at most this width.
    pub max_dim: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            layer: Layer::Pooled,
            epochs: 30,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 128,
            seed: 0,
            max_dim: 4096,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.max_dim == 0 {
            return Err(Error::Config("probe epochs, batch size and max_dim must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "probe optimizer settings out of range: lr {}, momentum {}, weight decay {}",
                self.lr, self.momentum, self.weight_decay
            )));
        }
        Ok(())
    }

    /// Step decay: `lr`, `lr / 10` and `lr / 100` over three equal spans.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let third = epoch * 3 / self.epochs.max(1);
        self.lr * 0.1f64.powi(third.min(2) as i32)
    }
}

/// Torch-style adaptive average pooling of `[N, C, H, W]` to `[N, C * s * s]`.
pub fn adaptive_avg_pool(x: &Tensor<f32>, s: usize) -> Result<Tensor<f32>> {
    let &[n, c, h, w] = x.shape() else {
        return Err(Error::InvalidShape {
            op: "adaptive_avg_pool",
            shape: x.shape().to_vec(),
            reason: "expected [N, C, H, W]".into(),
        });
    };
    if s == 0 || s > h || s > w {
        return Err(Error::invalid(format!("cannot pool {h}x{w} maps to {s}x{s}")));
    }
    let bounds = |i: usize, len: usize| (i * len / s, ((i + 1) * len).div_ceil(s));
    let mut out = Vec::with_capacity(n * c * s * s);
    for map in x.data().chunks(h * w) {
        for oy in 0..s {
            let (y0, y1) = bounds(oy, h);
            for ox in 0..s {
                let (x0, x1) = bounds(ox, w);
                let mut acc = 0f32;
                for y in y0..y1 {
                    acc += map[y * w + x0..y * w + x1].iter().sum::<f32>();
                }
                out.push(acc / ((y1 - y0) * (x1 - x0)) as f32);
            }
        }
    }
    Tensor::new(vec![n, c * s * s], out)
}

/// Largest pooled side keeping `channels * s^2 <= max_dim`, and at least 1.
pub fn pooled_side(channels: usize, side: usize, max_dim: usize) -> usize {
    let mut s = 1;
    while s < side && channels * (s + 1) * (s + 1) <= max_dim {
        s += 1;
    }
    s
}

/// Deterministic eval view: full image resized, standardized, no augmentation.
pub fn eval_views(data: &Dataset, idx: &[usize], size: usize, stats: &ChannelStats) -> Result<Tensor<f32>> {
    let parts = idx
        .par_iter()
        .map(|&i| standard_augment(data.image(i), &AugmentConfig::none(), size, stats, 0))
        .collect::<Result<Vec<_>>>()?;
    stack(&parts, false)
}

const EXTRACT_BATCH: usize = 64;

/// Frozen features for each requested layer, `[|D|, F]` apiece.
pub fn extract_features(
    model: &EncoderModel<f32>,
    data: &Dataset,
    size: usize,
    stats: &ChannelStats,
    layers: &[Layer],
    max_dim: usize,
) -> Result<Vec<Tensor<f32>>> {
    let mut cols: Vec<Vec<f32>> = vec![Vec::new(); layers.len()];
    let mut widths = vec![0; layers.len()];
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(EXTRACT_BATCH) {
        let mut tape = Tape::new();
        let x = tape.constant(eval_views(data, chunk, size, stats)?)?;
        let trunk = model.encode_trunk(&mut tape, x)?;
        for (k, layer) in layers.iter().enumerate() {
            let feats = match layer {
                Layer::Pooled => tape.value(trunk.pooled).clone(),
                Layer::Stage(s) => {
                    let t = tape.value(trunk.stages[s - 1]);
                    let sh = t.shape();
                    adaptive_avg_pool(t, pooled_side(sh[1], sh[2].min(sh[3]), max_dim))?
                }
            };
            widths[k] = feats.shape()[1];
            cols[k].extend_from_slice(feats.data());
        }
    }
    cols.into_iter()
        .zip(widths)
        .map(|(c, w)| Tensor::new(vec![data.len(), w], c))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

fn labels_of(data: &Dataset) -> Result<&[u8]> {
    data.labels()
        .ok_or_else(|| Error::invalid(format!("dataset {} has no labels", data.source())))
}

/// Multinomial logistic regression on fixed features, standardized with
/// training-set statistics.
pub fn train_linear_probe(
    train_x: &Tensor<f32>,
    train_y: &[u8],
    test_x: &Tensor<f32>,
    test_y: &[u8],
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    cfg.validate()?;
    let (n, f) = (train_x.shape()[0], train_x.shape()[1]);
    if train_y.len() != n || test_y.len() != test_x.shape()[0] || test_x.shape()[1] != f || n == 0 {
        return Err(Error::ShapeMismatch {
            op: "linear probe",
            lhs: train_x.shape().to_vec(),
            rhs: test_x.shape().to_vec(),
        });
    }
    let classes = *train_y.iter().max().unwrap() as usize + 1;
    if let Some(&bad) = test_y.iter().find(|&&y| y as usize >= classes) {
        return Err(Error::invalid(format!(
            "label set mismatch: test label {bad} never occurs among the {classes} training classes"
        )));
    }
    let (mean, std) = column_stats(train_x);
    let norm = |x: &Tensor<f32>| -> Tensor<f32> {
        let mut t = x.clone();
        for row in t.data_mut().chunks_mut(f) {
            for ((v, m), s) in row.iter_mut().zip(&mean).zip(&std) {
                *v = (*v - m) / s;
            }
        }
        t
    };
    let (train_x, test_x) = (norm(train_x), norm(test_x));

    let mut store = ParamStore::<f32>::new();
    let w = store.insert("probe.weight", Tensor::zeros(&[f, classes]))?;
    let b = store.insert("probe.bias", Tensor::zeros(&[classes]))?;
    let mut sgd = Sgd::new(&store, cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seed::rng(cfg.seed, Stream::Probe, &[epoch as u64]));
        let lr = cfg.lr_at(epoch) as f32;
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let x = tape.constant(gather(&train_x, batch)?)?;
            let (wv, bv) = (tape.param(&store, w)?, tape.param(&store, b)?);
            let logits = tape.linear(x, wv, bv)?;
            let targets: Vec<usize> = batch.iter().map(|&i| train_y[i] as usize).collect();
            let ce = tape.softmax_cross_entropy(logits, &targets)?;
            let loss = tape.mean(ce)?;
            store.zero_grad();
            tape.backward(loss, &mut store)?;
            sgd.step(&mut store, lr)?;
        }
    }
    let accuracy = |x: &Tensor<f32>, y: &[u8]| -> f64 {
        let (wd, bd) = (store.value(w).data(), store.value(b).data());
        let correct = x
            .data()
            .par_chunks(f)
            .zip(y.par_iter())
            .filter(|(row, &label)| {
                let mut best = (f32::NEG_INFINITY, 0);
                for k in 0..classes {
                    let s = bd[k] + row.iter().enumerate().map(|(j, &v)| v * wd[j * classes + k]).sum::<f32>();
                    if s > best.0 {
                        best = (s, k);
                    }
                }
                best.1 == label as usize
            })
            .count();
        correct as f64 / y.len().max(1) as f64
    };
    Ok(ProbeResult {
        train_accuracy: accuracy(&train_x, train_y),
        test_accuracy: accuracy(&test_x, test_y),
    })
}

fn column_stats(x: &Tensor<f32>) -> (Vec<f32>, Vec<f32>) {
    let (n, f) = (x.shape()[0], x.shape()[1]);
    let mut mean = vec![0f64; f];
    let mut sq = vec![0f64; f];
    for row in x.data().chunks(f) {
        for (j, &v) in row.iter().enumerate() {
            mean[j] += v as f64;
            sq[j] += (v as f64) * (v as f64);
        }
    }
    let mut std = vec![0f32; f];
    for j in 0..f {
        mean[j] /= n as f64;
        let var = (sq[j] / n as f64 - mean[j] * mean[j]).max(0.0);
        std[j] = if var.sqrt() > 1e-6 { var.sqrt() as f32 } else { 1.0 };
    }
    (mean.into_iter().map(|m| m as f32).collect(), std)
}

fn gather(x: &Tensor<f32>, rows: &[usize]) -> Result<Tensor<f32>> {
    let f = x.shape()[1];
    let mut out = Vec::with_capacity(rows.len() * f);
    for &r in rows {
        out.extend_from_slice(x.row(r));
    }
    Tensor::new(vec![rows.len(), f], out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub layer: Layer,
    pub feature_dim: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub train_accuracy: f64,
    pub accuracy: f64,
}

/// Probes every layer in `layers` on features extracted once.
pub fn probe_layers(
    model: &EncoderModel<f32>,
    train: &Dataset,
    test: &Dataset,
    size: usize,
    stats: &ChannelStats,
    layers: &[Layer],
    cfg: &ProbeConfig,
) -> Result<Vec<ProbeReport>> {
    cfg.validate()?;
    let (ty, vy) = (labels_of(train)?, labels_of(test)?);
    let tr = extract_features(model, train, size, stats, layers, cfg.max_dim)?;
    let te = extract_features(model, test, size, stats, layers, cfg.max_dim)?;
    layers
        .iter()
        .zip(tr.iter().zip(&te))
        .map(|(&layer, (a, b))| {
            let r = train_linear_probe(a, ty, b, vy, cfg)?;
            Ok(ProbeReport {
                layer,
                feature_dim: a.shape()[1],
                train_size: train.len(),
                test_size: test.len(),
                train_accuracy: r.train_accuracy,
                accuracy: r.test_accuracy,
            })
        })
        .collect()
}

pub fn linear_probe(
    model: &EncoderModel<f32>,
    train: &Dataset,
    test: &Dataset,
    size: usize,
    stats: &ChannelStats,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    Ok(probe_layers(model, train, test, size, stats, &[cfg.layer], cfg)?.remove(0))
}

pub fn layer_probe(
    model: &EncoderModel<f32>,
    train: &Dataset,
    test: &Dataset,
    size: usize,
    stats: &ChannelStats,
    cfg: &ProbeConfig,
) -> Result<Vec<ProbeReport>> {
    probe_layers(model, train, test, size, stats, &Layer::all(), cfg)
}

/// Transform family used for the transformed side of the invariance histogram.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformFamily {
    Jigsaw,
    Rotation,
    Combined,
    /// Rotation by a fixed number of quarter turns; zero is the identity.
    FixedRotation(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvarianceConfig {
    pub family: TransformFamily,
    pub samples: usize,
    pub draws: usize,
    pub bins: usize,
    pub seed: u64,
}

impl Default for InvarianceConfig {
    fn default() -> Self {
        Self {
            family: TransformFamily::Jigsaw,
            samples: 1000,
            draws: 5,
            bins: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramReport {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub mean: f64,
    pub variance: f64,
    pub samples: u64,
    /// Pairs dropped because an embedding was degenerate.
    pub skipped: u64,
}

impl HistogramReport {
    /// Mean and variance recomputed from bin centers.
    pub fn binned_moments(&self) -> (f64, f64) {
        let n = self.counts.iter().sum::<u64>().max(1) as f64;
        let centers: Vec<f64> = self.edges.windows(2).map(|e| (e[0] + e[1]) / 2.0).collect();
        let mean = centers.iter().zip(&self.counts).map(|(c, &k)| c * k as f64).sum::<f64>() / n;
        let var = centers
            .iter()
            .zip(&self.counts)
            .map(|(c, &k)| (c - mean).powi(2) * k as f64)
            .sum::<f64>()
            / n;
        (mean, var)
    }
}

fn unit(v: &[f32]) -> Option<Vec<f64>> {
    let n = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    (n > NORM_EPS && n.is_finite()).then(|| v.iter().map(|&x| x as f64 / n).collect())
}

/// Distances `|f(I)/|f(I)| - g(I^t)/|g(I^t)||` over sampled images and fresh transform draws.
///
/// The untransformed side is the deterministic eval view; the transformed
/// side uses the run's training-time augmentation for its family.
pub fn invariance_histogram(
    model: &EncoderModel<f32>,
    train_cfg: &TrainConfig,
    data: &Dataset,
    cfg: &InvarianceConfig,
) -> Result<HistogramReport> {
    if cfg.bins == 0 || cfg.draws == 0 || cfg.samples == 0 || data.is_empty() {
        return Err(Error::Config("invariance histogram needs samples, draws and bins".into()));
    }
    let stats = train_cfg.stats.unwrap_or_else(|| data.channel_stats());
    let views = &train_cfg.views;
    let pset = match cfg.family {
        TransformFamily::Jigsaw | TransformFamily::Combined => Some(PermutationSet::generate(
            train_cfg.perms.grid,
            train_cfg.perm_set_size(),
            train_cfg.perms.seed,
        )?),
        TransformFamily::FixedRotation(k) if k > 3 => {
            return Err(Error::invalid(format!("rotation index {k} outside 0..=3")))
        }
        _ => None,
    };
    let count = cfg.samples.min(data.len());
    let mut chosen = index::sample(&mut seed::rng(cfg.seed, Stream::Histogram, &[]), data.len(), count).into_vec();
    chosen.sort_unstable();

    let edges: Vec<f64> = (0..=cfg.bins).map(|i| 2.0 * i as f64 / cfg.bins as f64).collect();
    let mut counts = vec![0u64; cfg.bins];
    let (mut n, mut mean, mut m2, mut skipped) = (0u64, 0f64, 0f64, 0u64);
    for chunk in chosen.chunks(EXTRACT_BATCH / cfg.draws.min(EXTRACT_BATCH).max(1)) {
        let mut tape = Tape::new();
        let x = tape.constant(eval_views(data, chunk, views.size, &stats)?)?;
        let trunk = model.encode_trunk(&mut tape, x)?;
        let f = model.head_f(&mut tape, trunk.pooled)?;
        let fv = tape.value(f).clone();

        let pairs: Vec<(usize, usize)> =
            chunk.iter().flat_map(|&i| (0..cfg.draws).map(move |d| (i, d))).collect();
        let parts = pairs
            .par_iter()
            .map(|&(i, d)| -> Result<Tensor<f32>> {
                let coords = [i as u64, d as u64];
                let mut choice = seed::rng(cfg.seed, Stream::TransformChoice, &coords);
                let s = seed::derive(cfg.seed, Stream::TransformedView, &coords);
                let img = data.image(i);
                match cfg.family {
                    TransformFamily::Jigsaw | TransformFamily::Combined => {
                        let pset = pset.as_ref().expect("jigsaw families carry a permutation set");
                        let perm = choice.random_range(0..pset.len());
                        let src = if cfg.family == TransformFamily::Combined {
                            rotate_image(img, choice.random_range(0..4))?
                        } else {
                            img.clone()
                        };
                        let ps = jigsaw_transform(&src, perm, pset, &views.jigsaw_augment, &views.jigsaw, &stats, s)?;
                        Ok(ps.patches)
                    }
                    TransformFamily::Rotation | TransformFamily::FixedRotation(_) => {
                        let k = match cfg.family {
                            TransformFamily::FixedRotation(k) => k,
                            _ => choice.random_range(0..4),
                        };
                        standard_augment(&rotate_image(img, k)?, &views.augment, views.size, &stats, s)
                    }
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let input = match cfg.family {
            TransformFamily::Jigsaw | TransformFamily::Combined => TransformedInput::Patches(stack(&parts, true)?),
            _ => TransformedInput::Whole(stack(&parts, false)?),
        };
        let g = embed_transformed(model, &mut tape, input, SlotOrder::Identity)?;
        let gv = tape.value(g);
        for (r, _) in pairs.iter().enumerate() {
            let (Some(a), Some(b)) = (unit(fv.row(r / cfg.draws)), unit(gv.row(r))) else {
                skipped += 1;
                continue;
            };
            let d = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt().min(2.0);
            let bin = ((d / 2.0 * cfg.bins as f64) as usize).min(cfg.bins - 1);
            counts[bin] += 1;
            n += 1;
            let delta = d - mean;
            mean += delta / n as f64;
            m2 += delta * (d - mean);
        }
    }
    Ok(HistogramReport {
        edges,
        counts,
        mean,
        variance: if n > 0 { m2 / n as f64 } else { 0.0 },
        samples: n,
        skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKind {
    Lambda,
    Negatives,
    Permutations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kind: SweepKind,
    pub value: f64,
    pub accuracy: Option<f64>,
    pub final_loss: Option<f64>,
    pub error: Option<String>,
}

/// Applies one sweep value to a base configuration.
pub fn sweep_config(kind: SweepKind, value: f64, base: &TrainConfig) -> Result<TrainConfig> {
    let mut cfg = base.clone();
    let count = |v: f64| -> Result<usize> {
        if v >= 1.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(Error::Config(format!("{kind:?} sweep value {v} must be a positive integer")))
        }
    };
    match kind {
        SweepKind::Lambda => cfg.nce.lambda = value,
        SweepKind::Negatives => cfg.nce.negatives = count(value)?,
        SweepKind::Permutations => {
            let cap = permutation_count(cfg.perms.grid).min(usize::MAX as u128) as usize;
            cfg.perms.count = count(value)?.min(cap);
        }
    }
    Ok(cfg)
}

/// Pretrains and probes once per value. Failed runs become error rows.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    kind: SweepKind,
    values: &[f64],
    base: &TrainConfig,
    train: &Dataset,
    probe_train: &Dataset,
    probe_test: &Dataset,
    probe: &ProbeConfig,
    out: Option<&Path>,
) -> Vec<SweepRow> {
    values
        .iter()
        .enumerate()
        .map(|(k, &value)| {
            let run = || -> Result<(f64, f64)> {
                let cfg = sweep_config(kind, value, base)?;
                let dir = out.map(|d| d.join(format!("run-{k:02}")));
                let trained = pretrain(&cfg, train, dir.as_deref())?;
                let stats = trained.config.stats.expect("resolved by the trainer");
                let report = linear_probe(&trained.model, probe_train, probe_test, cfg.views.size, &stats, probe)?;
                let last = trained.metrics.last().map_or(f64::NAN, |m| m.loss);
                Ok((report.accuracy, last))
            };
            match run() {
                Ok((acc, loss)) => SweepRow {
                    kind,
                    value,
                    accuracy: Some(acc),
                    final_loss: Some(loss),
                    error: None,
                },
                Err(e) => SweepRow {
                    kind,
                    value,
                    accuracy: None,
                    final_loss: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

/// Writes `sweep.csv` and `sweep.jsonl`.
pub fn write_sweep(rows: &[SweepRow], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("sweep.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::Format(format!("{}: {e}", csv_path.display())))?;
    let csv_err = |e: csv::Error| Error::Format(format!("{}: {e}", csv_path.display()));
    w.write_record(["kind", "value", "accuracy", "final_loss", "error"]).map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let kind = serde_json::to_value(r.kind).map_err(|e| Error::Format(e.to_string()))?;
        w.write_record([
            kind.as_str().unwrap_or_default().to_string(),
            r.value.to_string(),
            opt(r.accuracy),
            opt(r.final_loss),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    let mut jsonl = String::new();
    for r in rows {
        jsonl.push_str(&serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?);
        jsonl.push('\n');
    }
    let p = dir.join("sweep.jsonl");
    fs::write(&p, jsonl).map_err(|e| Error::io(&p, e))
}
