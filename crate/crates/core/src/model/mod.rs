//! Small transformer encoder for per-token tag classification.
//!
//! Neurons are the units of each representation layer: layer 0 is the
//! embedding sum, layers 1..=L are the block outputs (after the second layer
//! norm). Neuron `(l, i)` has global id `l·d + i`. Every representation is
//! multiplied by the model's [`PruneMask`], so pruned units read exactly zero.

mod checkpoint;
mod forward;
mod optim;
mod params;
mod train;

pub use checkpoint::{
    load_checkpoint, model_fingerprint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use forward::{Batch, ForwardOutput};
pub use optim::{adamw_update, AdamWParams, LrSchedule, OptimizerState};
pub use params::{ParamSet, Tensor};
pub use train::{
    encode_corpus, evaluate, predict_tags, train, EpochRecord, TrainParams, TrainReport,
};

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{BioTag, ConceptCorpus};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub n_tags: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
    pub seed: u64,
    /// Causal self-attention (decoder-style variant).
    pub causal: bool,
    /// When set, pruning zeroes weights once but leaves the units trainable.
    pub allow_revival: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_ffn: 256,
            vocab_size: 1,
            n_tags: 1,
            max_len: 32,
            dropout_rate: 0.1,
            seed: 0,
            causal: false,
            allow_revival: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("vocab_size", self.vocab_size),
            ("n_tags", self.n_tags),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Number of maskable neurons, `(L + 1)·d`.
    pub fn n_neurons(&self) -> usize {
        (self.n_layers + 1) * self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Binary keep-mask over representation units, one row per layer `0..=L`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneMask {
    layers: Vec<Vec<bool>>,
}

impl PruneMask {
    pub fn all_alive(n_layers_plus_1: usize, d: usize) -> Self {
        Self {
            layers: vec![vec![true; d]; n_layers_plus_1],
        }
    }

    pub fn for_config(config: &ModelConfig) -> Self {
        Self::all_alive(config.n_layers + 1, config.d_model)
    }

    /// Mask with the given global neuron ids pruned.
    pub fn from_pruned(
        n_layers_plus_1: usize,
        d: usize,
        pruned: impl IntoIterator<Item = usize>,
    ) -> Result<Self> {
        let mut m = Self::all_alive(n_layers_plus_1, d);
        for id in pruned {
            if id >= n_layers_plus_1 * d {
                return Err(Error::Config(format!("neuron id {id} out of range")));
            }
            m.layers[id / d][id % d] = false;
        }
        Ok(m)
    }

    pub fn from_layers(layers: Vec<Vec<bool>>) -> Result<Self> {
        let d = layers.first().map_or(0, Vec::len);
        if layers.is_empty() || d == 0 || layers.iter().any(|l| l.len() != d) {
            return Err(Error::Config("mask layers must be non-empty and equal width".into()));
        }
        Ok(Self { layers })
    }

    pub fn n_layers_plus_1(&self) -> usize {
        self.layers.len()
    }

    pub fn width(&self) -> usize {
        self.layers[0].len()
    }

    pub fn n_neurons(&self) -> usize {
        self.n_layers_plus_1() * self.width()
    }

    pub fn layer(&self, l: usize) -> &[bool] {
        &self.layers[l]
    }

    pub fn layers(&self) -> &[Vec<bool>] {
        &self.layers
    }

    pub fn is_alive(&self, id: usize) -> bool {
        let d = self.width();
        self.layers[id / d][id % d]
    }

    pub fn alive_ids(&self) -> Vec<usize> {
        (0..self.n_neurons()).filter(|&i| self.is_alive(i)).collect()
    }

    pub fn pruned_ids(&self) -> BTreeSet<usize> {
        (0..self.n_neurons()).filter(|&i| !self.is_alive(i)).collect()
    }

    pub fn n_pruned(&self) -> usize {
        self.layers.iter().flatten().filter(|&&a| !a).count()
    }

    pub fn alive_in_layer(&self, l: usize) -> usize {
        self.layers[l].iter().filter(|&&a| a).count()
    }

    /// Elementwise minimum (a neuron survives only if alive in both).
    pub fn intersect(&self, other: &PruneMask) -> Result<PruneMask> {
        self.check_same_shape(other)?;
        Ok(PruneMask {
            layers: self
                .layers
                .iter()
                .zip(&other.layers)
                .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| x && y).collect())
                .collect(),
        })
    }

    fn check_same_shape(&self, other: &PruneMask) -> Result<()> {
        if self.n_layers_plus_1() != other.n_layers_plus_1() || self.width() != other.width() {
            return Err(Error::Config(format!(
                "mask shape {}x{} does not match {}x{}",
                self.n_layers_plus_1(),
                self.width(),
                other.n_layers_plus_1(),
                other.width()
            )));
        }
        Ok(())
    }

    /// CSV with header `layer,index,alive`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,index,alive\n");
        for (l, row) in self.layers.iter().enumerate() {
            for (i, &a) in row.iter().enumerate() {
                s.push_str(&format!("{l},{i},{}\n", u8::from(a)));
            }
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<PruneMask> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "layer,index,alive")) => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    message: "expected header `layer,index,alive`".into(),
                })
            }
        }
        let mut cells: Vec<(usize, usize, bool)> = Vec::new();
        for (i, line) in lines {
            let parse_err = |m: &str| Error::Parse {
                line: i + 1,
                message: m.to_string(),
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(parse_err("expected 3 fields"));
            }
            let l = f[0].parse().map_err(|_| parse_err("bad layer"))?;
            let idx = f[1].parse().map_err(|_| parse_err("bad index"))?;
            let alive = match f[2] {
                "1" => true,
                "0" => false,
                _ => return Err(parse_err("alive must be 0 or 1")),
            };
            cells.push((l, idx, alive));
        }
        let n_layers = cells.iter().map(|c| c.0).max().map_or(0, |m| m + 1);
        let d = cells.iter().map(|c| c.1).max().map_or(0, |m| m + 1);
        if n_layers * d != cells.len() {
            return Err(Error::Validation("mask CSV does not cover a full grid".into()));
        }
        let mut m = PruneMask::all_alive(n_layers, d);
        for (l, i, a) in cells {
            m.layers[l][i] = a;
        }
        Ok(m)
    }
}

/// Token classifier. `T` is `f32` for training and `f64` for gradient checks.
#[derive(Clone, Debug, PartialEq)]
pub struct TaggerModel<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    pub mask: PruneMask,
    /// Token strings by id.
    pub vocab: Vec<String>,
    /// Tag strings by class id.
    pub tags: Vec<String>,
}

/// Tag inventory for a set of entity types: `O`, then `B-X`, `I-X` per type.
pub fn tag_inventory<'a>(entity_types: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let types: BTreeSet<&str> = entity_types.into_iter().collect();
    let mut tags = vec!["O".to_string()];
    for t in types {
        tags.push(format!("B-{t}"));
        tags.push(format!("I-{t}"));
    }
    tags
}

/// Model config sized for a corpus (vocabulary and tag set taken from it).
pub fn config_for_corpus(base: &ModelConfig, corpus: &ConceptCorpus) -> (ModelConfig, Vec<String>) {
    let tags = tag_inventory(corpus.entity_types().iter().map(String::as_str));
    let mut cfg = base.clone();
    cfg.vocab_size = corpus.vocab().len().max(1);
    cfg.n_tags = tags.len();
    (cfg, tags)
}

impl<T: Scalar> TaggerModel<T> {
    /// Seeded initialisation: weights ~ N(0, 0.02), embeddings ~ N(0, 1),
    /// layer-norm gains 1, biases 0. Mask all-ones.
    pub fn init(config: ModelConfig, vocab: Vec<String>, tags: Vec<String>) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} entries but vocab_size is {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        if tags.len() != config.n_tags {
            return Err(Error::Config(format!(
                "tag inventory has {} entries but n_tags is {}",
                tags.len(),
                config.n_tags
            )));
        }
        let mut params = ParamSet::zeros_for(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let weight = Normal::new(0.0, 0.02).expect("valid normal");
        let embed = Normal::new(0.0, 1.0).expect("valid normal");
        for t in params.tensors.iter_mut() {
            let kind = params::kind_of(&t.name);
            for x in t.data.iter_mut() {
                *x = match kind {
                    params::Kind::Embedding => T::from_f64_lossy(embed.sample(&mut rng)),
                    params::Kind::Weight => T::from_f64_lossy(weight.sample(&mut rng)),
                    params::Kind::Gain => T::one(),
                    params::Kind::Bias => T::zero(),
                };
            }
        }
        let mask = PruneMask::for_config(&config);
        Ok(Self {
            config,
            params,
            mask,
            vocab,
            tags,
        })
    }

    pub fn n_parameters(&self) -> usize {
        self.params.n_scalars()
    }

    pub fn tag_id(&self, tag: &BioTag) -> Option<usize> {
        let s = tag.to_string();
        self.tags.iter().position(|t| *t == s)
    }

    /// Converts every parameter to another scalar type (mask and labels kept).
    pub fn cast<U: Scalar>(&self) -> TaggerModel<U> {
        TaggerModel {
            config: self.config.clone(),
            params: self.params.cast(),
            mask: self.mask.clone(),
            vocab: self.vocab.clone(),
            tags: self.tags.clone(),
        }
    }

    /// Zeroes the producing parameters of masked units and the weights that
    /// read from them. Forward results are unchanged by this (the unit already
    /// reads zero); it makes the weight matrices match `W ⊙ Φ`.
    pub fn zero_masked_weights(&mut self, mask: &PruneMask) {
        let d = self.config.d_model;
        let n_tags = self.config.n_tags;
        let l_max = self.config.n_layers;
        for l in 0..=l_max {
            for i in 0..d {
                if mask.layer(l)[i] {
                    continue;
                }
                if l == 0 {
                    for name in [params::TOK_EMB, params::POS_EMB] {
                        let t = self.params.get_mut(name);
                        let rows = t.data.len() / d;
                        for r in 0..rows {
                            t.data[r * d + i] = T::zero();
                        }
                    }
                } else {
                    let b = l - 1;
                    self.params.get_mut(&params::block_name(b, "ln2_g")).data[i] = T::zero();
                    self.params.get_mut(&params::block_name(b, "ln2_b")).data[i] = T::zero();
                }
                if l < l_max {
                    for w in ["wq", "wk", "wv"] {
                        let t = self.params.get_mut(&params::block_name(l, w));
                        for c in 0..d {
                            t.data[i * d + c] = T::zero();
                        }
                    }
                } else {
                    let t = self.params.get_mut(params::CLS_W);
                    for c in 0..n_tags {
                        t.data[i * n_tags + c] = T::zero();
                    }
                }
            }
        }
    }
}
