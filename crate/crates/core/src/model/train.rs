//! Mini-batch training loop with snapshots and an optional recovery stop.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{BioTag, ConceptCorpus};
use crate::error::{Error, Result};
use crate::metrics::{entity_prf, EntityScores};

use super::forward::Batch;
use super::optim::{AdamWParams, LrSchedule, OptimizerState};
use super::TaggerModel;

const EVAL_BATCH: usize = 64;
const DROPOUT_STREAM: u64 = 0xD20D_0A17;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adamw: AdamWParams,
    /// Fraction of all steps spent in linear warmup.
    pub warmup_fraction: f64,
    pub snapshot_interval: usize,
    /// Dev F1 at which training counts as recovered.
    pub recovery_target: Option<f64>,
    /// Stop at the first epoch that reaches `recovery_target`.
    pub early_stop: bool,
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 8,
            lr: 3e-4,
            adamw: AdamWParams::default(),
            warmup_fraction: 0.1,
            snapshot_interval: 2,
            recovery_target: None,
            early_stop: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub dev: Option<EntityScores>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub snapshot_epochs: Vec<usize>,
    pub recovered_at: Option<usize>,
    pub stopped_early: bool,
}

/// Token ids and gold tag ids for every sentence of `corpus`.
pub fn encode_corpus<T>(
    model: &TaggerModel<T>,
    corpus: &ConceptCorpus,
) -> Result<(Vec<Vec<usize>>, Vec<Vec<usize>>)> {
    let vocab: std::collections::HashMap<&str, usize> = model
        .vocab
        .iter()
        .enumerate()
        .map(|(i, t)| (t.as_str(), i))
        .collect();
    let tag_ids: std::collections::HashMap<&str, usize> = model
        .tags
        .iter()
        .enumerate()
        .map(|(i, t)| (t.as_str(), i))
        .collect();
    let mut oov = BTreeSet::new();
    let mut ids = Vec::with_capacity(corpus.len());
    let mut gold = Vec::with_capacity(corpus.len());
    for sent in corpus.sentences() {
        let mut s_ids = Vec::with_capacity(sent.len());
        let mut s_gold = Vec::with_capacity(sent.len());
        for tok in sent {
            match vocab.get(tok.text.as_str()) {
                Some(&i) => s_ids.push(i),
                None => {
                    oov.insert(tok.text.clone());
                }
            }
            let tag = tok.tag.to_string();
            let t = *tag_ids
                .get(tag.as_str())
                .ok_or_else(|| Error::Input(format!("tag {tag} not in the model's tag set")))?;
            s_gold.push(t);
        }
        ids.push(s_ids);
        gold.push(s_gold);
    }
    if !oov.is_empty() {
        let list: Vec<String> = oov.into_iter().take(20).collect();
        return Err(Error::Input(format!(
            "out-of-vocabulary tokens: {}",
            list.join(", ")
        )));
    }
    Ok((ids, gold))
}

/// Argmax tag per token (ties resolve to the lower tag id).
pub fn predict_tags(model: &TaggerModel<f32>, corpus: &ConceptCorpus) -> Result<Vec<Vec<BioTag>>> {
    let (ids, _) = encode_corpus(model, corpus)?;
    let tags: Vec<BioTag> = model
        .tags
        .iter()
        .map(|t| t.parse())
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(EVAL_BATCH) {
        let batch = Batch::new(chunk);
        let fw = model.forward(&batch)?;
        for (s, sent) in chunk.iter().enumerate() {
            let o = batch.offsets[s];
            let row_tags = (0..sent.len())
                .map(|t| {
                    let row = fw.logits.row(o + t);
                    let mut best = 0;
                    for (k, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = k;
                        }
                    }
                    tags[best].clone()
                })
                .collect();
            out.push(row_tags);
        }
    }
    Ok(out)
}

pub fn evaluate(model: &TaggerModel<f32>, corpus: &ConceptCorpus) -> Result<EntityScores> {
    let pred = predict_tags(model, corpus)?;
    entity_prf(&corpus.tag_sequences(), &pred)
}

fn mix(seed: u64, a: u64) -> u64 {
    // splitmix64 finaliser over the pair
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Trains `model` in place.
///
/// `on_snapshot(epoch, model, optimizer)` runs every `snapshot_interval`
/// epochs and after the final epoch. Shuffling and dropout are seeded from
/// `params.seed`, so identical inputs give bit-identical parameters.
pub fn train(
    model: &mut TaggerModel<f32>,
    train_corpus: &ConceptCorpus,
    dev: Option<&ConceptCorpus>,
    params: &TrainParams,
    on_snapshot: &mut dyn FnMut(usize, &TaggerModel<f32>, &OptimizerState<f32>) -> Result<()>,
) -> Result<TrainReport> {
    if params.epochs == 0 {
        return Err(Error::Config("epochs must be >= 1".into()));
    }
    if params.snapshot_interval == 0 {
        return Err(Error::Config("snapshot_interval must be >= 1".into()));
    }
    if params.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let (ids, gold) = encode_corpus(model, train_corpus)?;
    let usable: Vec<usize> = (0..ids.len()).filter(|&i| !ids[i].is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::Input("training corpus has no tokens".into()));
    }
    let steps_per_epoch = usable.len().div_ceil(params.batch_size) as u64;
    let total = steps_per_epoch * params.epochs as u64;
    let schedule = LrSchedule {
        base_lr: params.lr,
        warmup_steps: (params.warmup_fraction * total as f64).round() as u64,
        total_steps: total,
    };
    let mut opt = OptimizerState::new(&model.params, schedule, params.adamw);

    let mut report = TrainReport {
        epochs: Vec::new(),
        snapshot_epochs: Vec::new(),
        recovered_at: None,
        stopped_early: false,
    };
    for epoch in 1..=params.epochs {
        let mut order = usable.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(params.seed, epoch as u64)));
        let mut loss_sum = 0.0f64;
        let mut tok_sum = 0usize;
        for chunk in order.chunks(params.batch_size) {
            let sents: Vec<&[usize]> = chunk.iter().map(|&i| ids[i].as_slice()).collect();
            let batch = Batch::new(&sents);
            let g: Vec<usize> = chunk.iter().flat_map(|&i| gold[i].iter().copied()).collect();
            let dropout_seed = mix(params.seed ^ DROPOUT_STREAM, opt.step);
            let (loss, grads) = model.loss_and_gradients(&batch, &g, Some(dropout_seed))?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}")));
            }
            model.adamw_step(&mut opt, &grads)?;
            loss_sum += loss as f64 * batch.n_tokens() as f64;
            tok_sum += batch.n_tokens();
        }
        let dev_scores = dev.map(|d| evaluate(model, d)).transpose()?;
        let f1 = dev_scores.as_ref().map(|s| s.overall.f1);
        log::info!(
            "epoch {epoch}: loss {:.4}{}",
            loss_sum / tok_sum as f64,
            f1.map(|f| format!(", dev F1 {f:.3}")).unwrap_or_default()
        );
        report.epochs.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / tok_sum as f64,
            dev: dev_scores,
        });
        let recovered = matches!((f1, params.recovery_target), (Some(f), Some(t)) if f >= t);
        if recovered && report.recovered_at.is_none() {
            report.recovered_at = Some(epoch);
        }
        let stop = recovered && params.early_stop;
        if epoch % params.snapshot_interval == 0 || epoch == params.epochs || stop {
            on_snapshot(epoch, model, &opt)?;
            report.snapshot_epochs.push(epoch);
        }
        if stop {
            report.stopped_early = epoch < params.epochs;
            break;
        }
    }
    Ok(report)
}
