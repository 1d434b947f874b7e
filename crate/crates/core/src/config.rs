//! Run configuration as a flat JSON object with dotted keys, e.g.
//! `{"task": "pirl-jigsaw", "train.epochs": 5, "probe.layer": "stage-3"}`.
//!
//! Every key must name a field of [`RunConfig`]; missing keys take the
//! defaults, and the fully resolved document is what gets echoed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::contrastive::NceConfig;
use crate::data::{load_cifar10, synth_dataset, ChannelStats, Dataset};
use crate::error::{Error, Result};
use crate::eval::{InvarianceConfig, ProbeConfig, SweepKind};
use crate::model::ModelConfig;
use crate::training::{PermSpec, TaskKind, TrainConfig, ViewConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Synth,
    Cifar10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// CIFAR-10 binary directory.
    pub path: String,
    pub synth_train: usize,
    pub synth_test: usize,
    pub synth_seed: u64,
    /// Keep only the first `n` images of each split; 0 keeps all.
    pub train_limit: usize,
    pub test_limit: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synth,
            path: String::new(),
            synth_train: 2000,
            synth_test: 1000,
            synth_seed: 0,
            train_limit: 0,
            test_limit: 0,
        }
    }
}

impl DataConfig {
    /// Train and test splits.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        let (train, test) = match self.source {
            DataSource::Synth => (
                synth_dataset(self.synth_train, self.synth_seed)?,
                synth_dataset(self.synth_test, self.synth_seed.wrapping_add(1))?,
            ),
            DataSource::Cifar10 => {
                if self.path.is_empty() {
                    return Err(Error::Config("data.path must point at the CIFAR-10 binary directory".into()));
                }
                let c = load_cifar10(Path::new(&self.path))?;
                (c.train, c.test)
            }
        };
        let cut = |d: Dataset, n: usize| if n == 0 || n >= d.len() { d } else { d.head(n) };
        Ok((cut(train, self.train_limit), cut(test, self.test_limit)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub bank_momentum: f64,
    pub shared_negatives: bool,
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub kind: SweepKind,
    pub values: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            kind: SweepKind::Lambda,
            values: vec![0.0, 0.25, 0.5, 0.75, 1.0],
        }
    }
}

pub const RANDOM_INIT: &str = "random-init";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskKind,
    pub seed: u64,
    pub data: DataConfig,
    pub train: TrainSection,
    pub nce: NceConfig,
    pub perms: PermSpec,
    pub model: ModelConfig,
    pub views: ViewConfig,
    pub stats: Option<ChannelStats>,
    /// Checkpoints read by probe, layer-probe and invariance; `random-init`
    /// stands for a freshly initialized network.
    pub checkpoints: Vec<String>,
    pub probe: ProbeConfig,
    pub invariance: InvarianceConfig,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_train(&TrainConfig::default())
    }
}

impl RunConfig {
    pub fn from_train(t: &TrainConfig) -> Self {
        Self {
            task: t.task,
            seed: t.seed,
            data: DataConfig::default(),
            train: TrainSection {
                epochs: t.epochs,
                batch_size: t.batch_size,
                lr_initial: t.lr_initial,
                lr_final: t.lr_final,
                momentum: t.momentum,
                weight_decay: t.weight_decay,
                bank_momentum: t.bank_momentum,
                shared_negatives: t.shared_negatives,
                checkpoint_every: t.checkpoint_every,
            },
            nce: t.nce,
            perms: t.perms,
            model: t.model.clone(),
            views: t.views,
            stats: t.stats,
            checkpoints: Vec::new(),
            probe: ProbeConfig::default(),
            invariance: InvarianceConfig::default(),
            sweep: SweepSection::default(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            task: self.task,
            seed: self.seed,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr_initial: t.lr_initial,
            lr_final: t.lr_final,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            bank_momentum: t.bank_momentum,
            shared_negatives: t.shared_negatives,
            checkpoint_every: t.checkpoint_every,
            nce: self.nce,
            perms: self.perms,
            model: self.model.clone(),
            views: self.views,
            stats: self.stats,
        }
    }

    pub fn checkpoint_list(&self) -> Vec<String> {
        if self.checkpoints.is_empty() {
            vec![RANDOM_INIT.to_string()]
        } else {
            self.checkpoints.clone()
        }
    }

    /// Parses a flat document layered over the defaults.
    pub fn from_flat_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        let Value::Object(map) = v else {
            return Err(Error::Config("config must be a JSON object of dotted keys".into()));
        };
        Self::default().with_entries(map.into_iter())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_flat_json(&text)
    }

    /// Applies `key=value` overrides; values are JSON when they parse as JSON, strings otherwise.
    pub fn with_overrides<S: AsRef<str>>(self, overrides: &[S]) -> Result<Self> {
        let mut entries = Vec::with_capacity(overrides.len());
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            entries.push((k.trim().to_string(), value));
        }
        self.with_entries(entries.into_iter())
    }

    fn with_entries(self, entries: impl Iterator<Item = (String, Value)>) -> Result<Self> {
        let mut nested = serde_json::to_value(&self).map_err(|e| Error::Config(e.to_string()))?;
        let known = flatten(&nested);
        for (key, value) in entries {
            let parts: Vec<&str> = key.split('.').collect();
            let is_known = (1..=parts.len()).any(|n| known.contains_key(&parts[..n].join(".")));
            if !is_known {
                return Err(Error::Config(format!("unknown config key {key:?}")));
            }
            set_path(&mut nested, &parts, value);
        }
        serde_json::from_value(nested).map_err(|e| Error::Config(e.to_string()))
    }

    /// The resolved configuration as a flat, key-sorted document.
    pub fn to_flat_json(&self) -> String {
        let nested = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string_pretty(&Value::Object(flatten(&nested))).expect("flat map serializes")
    }

    pub fn checkpoint_path(&self, name: &str) -> Option<PathBuf> {
        (name != RANDOM_INIT).then(|| PathBuf::from(name))
    }
}

fn flatten(v: &Value) -> Map<String, Value> {
    fn walk(prefix: &str, v: &Value, out: &mut Map<String, Value>) {
        match v {
            Value::Object(m) if !m.is_empty() => {
                for (k, x) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, x, out);
                }
            }
            _ => {
                out.insert(prefix.to_string(), v.clone());
            }
        }
    }
    let mut out = Map::new();
    walk("", v, &mut out);
    out
}

fn set_path(root: &mut Value, parts: &[&str], value: Value) {
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        if !cur.get(*p).is_some_and(Value::is_object) {
            cur[*p] = Value::Object(Map::new());
        }
        cur = cur.get_mut(*p).expect("just inserted");
    }
    cur[parts[parts.len() - 1]] = value;
}
