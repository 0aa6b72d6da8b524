//! Experiment configuration as flat `key = value` text.
//!
//! Keys are the [`ExperimentConfig`] field names. Blank lines and `#`
//! comments are ignored; list values are comma separated.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::ConceptLabel;
use crate::error::{Error, Result};
use crate::model::{AdamWParams, ModelConfig, TrainParams};
use crate::probe::ProbeParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ranker {
    Probeless,
    LinearProbe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PruneMode {
    Concept,
    Random,
}

impl FromStr for Ranker {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "probeless" => Ok(Ranker::Probeless),
            "linear_probe" => Ok(Ranker::LinearProbe),
            _ => Err(Error::Config(format!("unknown ranker `{s}` (probeless | linear_probe)"))),
        }
    }
}

impl FromStr for PruneMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concept" => Ok(PruneMode::Concept),
            "random" => Ok(PruneMode::Random),
            _ => Err(Error::Config(format!("unknown prune_mode `{s}` (concept | random)"))),
        }
    }
}

impl Ranker {
    fn as_str(self) -> &'static str {
        match self {
            Ranker::Probeless => "probeless",
            Ranker::LinearProbe => "linear_probe",
        }
    }
}

impl PruneMode {
    fn as_str(self) -> &'static str {
        match self {
            PruneMode::Concept => "concept",
            PruneMode::Random => "random",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Annotated corpus file; when unset the synthetic corpus is generated.
    pub corpus_path: Option<PathBuf>,
    pub n_sentences: usize,
    pub train_fraction: f64,
    pub dev_fraction: f64,

    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
    pub causal: bool,
    pub allow_revival: bool,

    pub train_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,

    pub concept: ConceptLabel,
    /// Sibling sub-concepts for the sub-concept variant.
    pub subconcepts: Vec<ConceptLabel>,
    pub ranker: Ranker,
    pub probe_l1: f64,
    pub probe_l2: f64,
    pub prune_fraction: f64,
    pub prune_mode: PruneMode,
    pub prune_embedding_layer: bool,

    pub snapshot_interval: usize,
    pub max_retrain_epochs: usize,
    pub recovery_epsilon: f64,

    pub seeds: Vec<u64>,
    pub group_size: usize,
    pub saliency_threshold: f64,
    pub similarity_threshold: f64,
    pub hat_k: usize,
    pub top_remapped: usize,
    /// Word vectors in text format; when unset, PPMI-SVD vectors are trained
    /// on the training split.
    pub embeddings_path: Option<PathBuf>,
    pub embedding_dim: usize,
    pub embedding_window: usize,
    pub weighted_similarity: bool,

    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            corpus_path: None,
            n_sentences: 5000,
            train_fraction: 0.8,
            dev_fraction: 0.1,
            n_layers: m.n_layers,
            d_model: m.d_model,
            n_heads: m.n_heads,
            d_ffn: m.d_ffn,
            max_len: m.max_len,
            dropout_rate: m.dropout_rate,
            causal: m.causal,
            allow_revival: m.allow_revival,
            train_epochs: 3,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: AdamWParams::default().weight_decay,
            warmup_fraction: 0.1,
            concept: "SEM:named_entity:location".parse().expect("valid label"),
            subconcepts: ["SEM:named_entity:location:usa", "SEM:named_entity:location:canada"]
                .iter()
                .map(|s| s.parse().expect("valid label"))
                .collect(),
            ranker: Ranker::Probeless,
            probe_l1: 0.0,
            probe_l2: ProbeParams::default().l2,
            prune_fraction: 0.5,
            prune_mode: PruneMode::Concept,
            prune_embedding_layer: true,
            snapshot_interval: 2,
            max_retrain_epochs: 8,
            recovery_epsilon: 0.01,
            seeds: vec![1, 2, 3],
            group_size: 100,
            saliency_threshold: 0.5,
            similarity_threshold: 0.5,
            hat_k: 5,
            top_remapped: 10,
            embeddings_path: None,
            embedding_dim: 64,
            embedding_window: 5,
            weighted_similarity: false,
            out_dir: PathBuf::from("runs"),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("bad value `{v}` for `{key}`: {e}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

fn parse_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 1)));
            }
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "corpus_path" => self.corpus_path = parse_path(v),
            "n_sentences" => self.n_sentences = parse_value(key, v)?,
            "train_fraction" => self.train_fraction = parse_value(key, v)?,
            "dev_fraction" => self.dev_fraction = parse_value(key, v)?,
            "n_layers" => self.n_layers = parse_value(key, v)?,
            "d_model" => self.d_model = parse_value(key, v)?,
            "n_heads" => self.n_heads = parse_value(key, v)?,
            "d_ffn" => self.d_ffn = parse_value(key, v)?,
            "max_len" => self.max_len = parse_value(key, v)?,
            "dropout_rate" => self.dropout_rate = parse_value(key, v)?,
            "causal" => self.causal = parse_value(key, v)?,
            "allow_revival" => self.allow_revival = parse_value(key, v)?,
            "train_epochs" => self.train_epochs = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "weight_decay" => self.weight_decay = parse_value(key, v)?,
            "warmup_fraction" => self.warmup_fraction = parse_value(key, v)?,
            "concept" => self.concept = parse_value(key, v)?,
            "subconcepts" => self.subconcepts = parse_list(key, v)?,
            "ranker" => self.ranker = v.parse()?,
            "probe_l1" => self.probe_l1 = parse_value(key, v)?,
            "probe_l2" => self.probe_l2 = parse_value(key, v)?,
            "prune_fraction" => self.prune_fraction = parse_value(key, v)?,
            "prune_mode" => self.prune_mode = v.parse()?,
            "prune_embedding_layer" => self.prune_embedding_layer = parse_value(key, v)?,
            "snapshot_interval" => self.snapshot_interval = parse_value(key, v)?,
            "max_retrain_epochs" => self.max_retrain_epochs = parse_value(key, v)?,
            "recovery_epsilon" => self.recovery_epsilon = parse_value(key, v)?,
            "seeds" => self.seeds = parse_list(key, v)?,
            "group_size" => self.group_size = parse_value(key, v)?,
            "saliency_threshold" => self.saliency_threshold = parse_value(key, v)?,
            "similarity_threshold" => self.similarity_threshold = parse_value(key, v)?,
            "hat_k" => self.hat_k = parse_value(key, v)?,
            "top_remapped" => self.top_remapped = parse_value(key, v)?,
            "embeddings_path" => self.embeddings_path = parse_path(v),
            "embedding_dim" => self.embedding_dim = parse_value(key, v)?,
            "embedding_window" => self.embedding_window = parse_value(key, v)?,
            "weighted_similarity" => self.weighted_similarity = parse_value(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.prune_fraction) {
            return bad(format!("prune_fraction {} outside [0, 1]", self.prune_fraction));
        }
        if self.snapshot_interval == 0 {
            return bad("snapshot_interval must be >= 1".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        let distinct: BTreeSet<u64> = self.seeds.iter().copied().collect();
        if distinct.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        if self.group_size == 0 || self.hat_k == 0 || self.batch_size == 0 {
            return bad("group_size, hat_k and batch_size must be >= 1".into());
        }
        if self.train_epochs == 0 {
            return bad("train_epochs must be >= 1".into());
        }
        let (t, d) = (self.train_fraction, self.dev_fraction);
        if !(t > 0.0 && d > 0.0 && t + d <= 1.0) {
            return bad(format!("train_fraction {t} and dev_fraction {d} must be positive and sum to <= 1"));
        }
        if !(self.recovery_epsilon >= 0.0) {
            return bad("recovery_epsilon must be >= 0".into());
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ffn: self.d_ffn,
            max_len: self.max_len,
            dropout_rate: self.dropout_rate,
            causal: self.causal,
            allow_revival: self.allow_revival,
            ..ModelConfig::default()
        }
    }

    pub fn train_params(&self, epochs: usize, seed: u64) -> TrainParams {
        TrainParams {
            epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            adamw: AdamWParams {
                weight_decay: self.weight_decay,
                ..AdamWParams::default()
            },
            warmup_fraction: self.warmup_fraction,
            snapshot_interval: self.snapshot_interval,
            recovery_target: None,
            early_stop: false,
            seed,
        }
    }

    pub fn probe_params(&self, seed: u64) -> ProbeParams {
        ProbeParams {
            l1: self.probe_l1,
            l2: self.probe_l2,
            seed,
            ..ProbeParams::default()
        }
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("write to string");
        kv("corpus_path", opt(&self.corpus_path));
        kv("n_sentences", self.n_sentences.to_string());
        kv("train_fraction", self.train_fraction.to_string());
        kv("dev_fraction", self.dev_fraction.to_string());
        kv("n_layers", self.n_layers.to_string());
        kv("d_model", self.d_model.to_string());
        kv("n_heads", self.n_heads.to_string());
        kv("d_ffn", self.d_ffn.to_string());
        kv("max_len", self.max_len.to_string());
        kv("dropout_rate", self.dropout_rate.to_string());
        kv("causal", self.causal.to_string());
        kv("allow_revival", self.allow_revival.to_string());
        kv("train_epochs", self.train_epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr", self.lr.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("warmup_fraction", self.warmup_fraction.to_string());
        kv("concept", self.concept.to_string());
        kv("subconcepts", join(&self.subconcepts));
        kv("ranker", self.ranker.as_str().into());
        kv("probe_l1", self.probe_l1.to_string());
        kv("probe_l2", self.probe_l2.to_string());
        kv("prune_fraction", self.prune_fraction.to_string());
        kv("prune_mode", self.prune_mode.as_str().into());
        kv("prune_embedding_layer", self.prune_embedding_layer.to_string());
        kv("snapshot_interval", self.snapshot_interval.to_string());
        kv("max_retrain_epochs", self.max_retrain_epochs.to_string());
        kv("recovery_epsilon", self.recovery_epsilon.to_string());
        kv("seeds", join(&self.seeds));
        kv("group_size", self.group_size.to_string());
        kv("saliency_threshold", self.saliency_threshold.to_string());
        kv("similarity_threshold", self.similarity_threshold.to_string());
        kv("hat_k", self.hat_k.to_string());
        kv("top_remapped", self.top_remapped.to_string());
        kv("embeddings_path", opt(&self.embeddings_path));
        kv("embedding_dim", self.embedding_dim.to_string());
        kv("embedding_window", self.embedding_window.to_string());
        kv("weighted_similarity", self.weighted_similarity.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        s
    }

    /// SHA-256 of the canonical text with seeds and output directory
    /// removed, so paired runs over different seeds share a hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seeds = vec![0];
        c.out_dir = PathBuf::new();
        Sha256::digest(c.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
