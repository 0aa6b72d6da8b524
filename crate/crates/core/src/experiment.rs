//! End-to-end runs: fine-tune, identify concept neurons, prune, retrain with
//! snapshots, then analyse saliency and HAT similarity at every snapshot.
//!
//! Output layout under `out_dir`:
//!
//! ```text
//! config.txt
//! seed-<s>/base/         base checkpoint, dev activations, training log
//! seed-<s>/<variant>/    mask, ranking, tables, trajectories, HATs, summary.json
//! aggregate/<variant>/   tables folded over seeds in seed order
//! ```
//!
//! Every file is a pure function of the config and seeds.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::activations::{extract_activations, write_dump, ActivationMatrix};
use crate::config::{ExperimentConfig, PruneMode, Ranker};
use crate::corpus::{
    concept_binary_labels, generate_corpus, read_corpus, split_corpus, ConceptCorpus, ConceptLabel, CorpusSpec,
};
use crate::embeddings::{
    concept_similarity, read_word_vectors, scatter_csv, similarity_saliency_join, train_embeddings, EmbeddingTable,
    SimilarityJoin, SimilarityRecord,
};
use crate::error::{Error, Result};
use crate::hats::{extract_hats, hat_evolution, HatReport, HatSet};
use crate::metrics::{EntityScores, Prf};
use crate::model::{config_for_corpus, evaluate, save_checkpoint, train, EpochRecord, PruneMask, TaggerModel};
use crate::probe::linear_probe_rank;
use crate::pruning::{apply_mask, build_mask, random_mask, union_masks};
use crate::ranking::{
    binary_class_means, layer_saliency_summary, probeless_rank, ranking_csv, saliency_scores, LayerSummary,
    NeuronRanking, SaliencyTable,
};
use crate::report::{
    distribution_table, performance_table, saliency_trajectory, similarity_trajectory, write_json, write_table,
    write_text, EpochTag, Stage,
};

// independent streams derived from the run seed
const RETRAIN_STREAM: u64 = 0x5EED_0001;
const RANDOM_MASK_STREAM: u64 = 0x5EED_0002;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    Concept,
    Random,
    Subconcept,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Concept => "concept",
            Variant::Random => "random",
            Variant::Subconcept => "subconcept",
        })
    }
}

/// Per-seed state shared by every variant: the data splits and the
/// fine-tuned base model with its analysis inputs.
pub struct BaseStage {
    pub seed: u64,
    pub train: ConceptCorpus,
    pub dev: ConceptCorpus,
    pub model: TaggerModel<f32>,
    pub scores: EntityScores,
    pub epochs: Vec<EpochRecord>,
    pub acts: ActivationMatrix,
    pub hats: Vec<HatSet>,
    pub embeddings: EmbeddingTable,
}

/// Saliency of every alive neuron at one point of the timeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotAnalysis {
    pub tag: EpochTag,
    pub f1: f64,
    pub summary: Vec<LayerSummary>,
    /// Relative to the seed directory.
    pub checkpoint: Option<PathBuf>,
    pub dump: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub variant: Variant,
    pub config_hash: String,
    /// Concept whose saliency is analysed.
    pub concept: String,
    pub base_f1: f64,
    pub pruned_f1: f64,
    pub pruned_drop: f64,
    pub recovery_target: f64,
    pub recovered: bool,
    pub recovered_at: Option<usize>,
    pub retrain_f1: Vec<(usize, f64)>,
    pub pruned_per_layer: Vec<usize>,
    /// S: neurons removed by the mask.
    pub pruned: Vec<usize>,
    /// R: alive neurons salient after the final retraining epoch, most
    /// salient first.
    pub remapped: Vec<usize>,
    pub snapshots: Vec<SnapshotAnalysis>,
    pub stage_scores: Vec<(Stage, Prf)>,
    pub scatter_quadrants: [usize; 4],
    pub median_similarity_high_saliency: Option<f64>,
    pub hat_reports: Vec<Vec<HatReport>>,
}

impl SeedResult {
    pub fn base_summary(&self) -> &[LayerSummary] {
        &self.snapshots[0].summary
    }

    pub fn final_summary(&self) -> &[LayerSummary] {
        &self.snapshots.last().expect("base snapshot present").summary
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config_hash: String,
    pub out_dir: PathBuf,
    pub runs: BTreeMap<Variant, Vec<SeedResult>>,
}

/// Sum over layers `0..=ceil(L/2)` of the retrained minus base share of
/// salient neurons.
pub fn early_middle_gain(base: &[LayerSummary], retrained: &[LayerSummary], n_layers: usize) -> f64 {
    let upto = n_layers.div_ceil(2);
    base.iter()
        .zip(retrained)
        .filter(|(b, _)| b.layer <= upto)
        .map(|(b, r)| r.pct_salient.unwrap_or(0.0) - b.pct_salient.unwrap_or(0.0))
        .sum()
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

fn load_corpus(config: &ExperimentConfig, seed: u64) -> Result<ConceptCorpus> {
    match &config.corpus_path {
        Some(p) => read_corpus(p),
        None => generate_corpus(&CorpusSpec::default_ner(config.n_sentences), seed),
    }
}

/// Fine-tunes the base model for one seed and writes `seed-<s>/base/`.
pub fn prepare_base(config: &ExperimentConfig, seed: u64) -> Result<BaseStage> {
    let dir = seed_dir(&config.out_dir, seed).join("base");
    let corpus = load_corpus(config, seed)?;
    let test_fraction = (1.0 - config.train_fraction - config.dev_fraction).max(0.0);
    let (train_set, dev, _test) = split_corpus(&corpus, (config.train_fraction, config.dev_fraction, test_fraction), seed)?;
    let base_cfg = crate::model::ModelConfig {
        seed,
        ..config.model_config()
    };
    let (model_cfg, tags) = config_for_corpus(&base_cfg, &corpus);
    let mut model = TaggerModel::<f32>::init(model_cfg, corpus.vocab().tokens().to_vec(), tags)?;
    log::info!("seed {seed}: fine-tuning base model on {} sentences", train_set.len());
    let report = train(
        &mut model,
        &train_set,
        Some(&dev),
        &config.train_params(config.train_epochs, seed),
        &mut |_, _, _| Ok(()),
    )?;
    save_checkpoint(&model, None, &dir.join("model.ckpt"))?;
    let scores = evaluate(&model, &dev)?;
    log::info!("seed {seed}: base dev F1 {:.3}", scores.overall.f1);
    write_json(&dir.join("train_log.json"), &report.epochs)?;

    let acts = extract_activations(&model, &dev)?;
    write_dump(&acts, &dir.join("dev.acts"))?;
    let hats = (0..acts.n_cols)
        .map(|j| extract_hats(&acts, j, config.hat_k))
        .collect::<Result<Vec<_>>>()?;
    write_json(&dir.join("hats.json"), &hats)?;
    let embeddings = match &config.embeddings_path {
        Some(p) => read_word_vectors(p)?,
        None => train_embeddings(&train_set, config.embedding_dim, config.embedding_window)?,
    };
    Ok(BaseStage {
        seed,
        train: train_set,
        dev,
        model,
        scores,
        epochs: report.epochs,
        acts,
        hats,
        embeddings,
    })
}

fn concept_ranking(
    config: &ExperimentConfig,
    acts: &ActivationMatrix,
    dev: &ConceptCorpus,
    concept: &ConceptLabel,
    seed: u64,
) -> Result<NeuronRanking> {
    let labels = concept_binary_labels(dev, concept);
    if labels.positives() == 0 {
        return Err(Error::ClassSupport(concept.to_string()));
    }
    let name = concept.to_string();
    match config.ranker {
        Ranker::Probeless => probeless_rank(&binary_class_means(acts, &labels, &name)?, &name),
        Ranker::LinearProbe => linear_probe_rank(acts, &labels.labels, &name, &config.probe_params(seed)),
    }
}

fn saliency(
    config: &ExperimentConfig,
    acts: &ActivationMatrix,
    dev: &ConceptCorpus,
    concept: &ConceptLabel,
    mask: &PruneMask,
    seed: u64,
) -> Result<(NeuronRanking, SaliencyTable, Vec<LayerSummary>)> {
    let ranking = concept_ranking(config, acts, dev, concept, seed)?;
    let table = saliency_scores(&ranking, config.group_size, true, mask)?;
    let summary = layer_saliency_summary(&table, mask, config.saliency_threshold)?;
    Ok((ranking, table, summary))
}

fn subconcept_labels(config: &ExperimentConfig) -> Result<(Vec<ConceptLabel>, ConceptLabel)> {
    let subs = &config.subconcepts;
    if subs.len() < 2 {
        return Err(Error::Config("the sub-concept variant needs at least two sub-concepts".into()));
    }
    let parent = subs[0]
        .parent()
        .ok_or_else(|| Error::Config(format!("sub-concept {} has no parent", subs[0])))?;
    for (i, s) in subs.iter().enumerate() {
        if s.parent().as_ref() != Some(&parent) {
            return Err(Error::Config(format!("{s} is not a sibling of {}", subs[0])));
        }
        if subs[..i].contains(s) {
            return Err(Error::Config(format!("sub-concept {s} listed twice")));
        }
    }
    Ok((subs.clone(), parent))
}

fn analysis_concept(config: &ExperimentConfig, variant: Variant) -> Result<ConceptLabel> {
    match variant {
        Variant::Subconcept => Ok(subconcept_labels(config)?.1),
        _ => Ok(config.concept.clone()),
    }
}

fn prune_pool(config: &ExperimentConfig) -> Vec<usize> {
    let d = config.d_model;
    let first = if config.prune_embedding_layer { 0 } else { d };
    (first..(config.n_layers + 1) * d).collect()
}

fn build_variant_mask(
    config: &ExperimentConfig,
    base: &BaseStage,
    variant: Variant,
    concept_ranking_: &NeuronRanking,
) -> Result<PruneMask> {
    let (lp1, d) = (config.n_layers + 1, config.d_model);
    let pool = prune_pool(config);
    let min_id = pool[0];
    match variant {
        Variant::Concept => build_mask(&concept_ranking_.restricted(|j| j >= min_id), config.prune_fraction, lp1, d),
        Variant::Random => {
            // same count the concept mask would remove from the same pool
            let count = (config.prune_fraction * pool.len() as f64).floor() as usize;
            random_mask(count, lp1, d, base.seed ^ RANDOM_MASK_STREAM, Some(&pool))
        }
        Variant::Subconcept => {
            let (subs, _) = subconcept_labels(config)?;
            let masks = subs
                .iter()
                .map(|s| {
                    let r = concept_ranking(config, &base.acts, &base.dev, s, base.seed)?;
                    build_mask(&r.restricted(|j| j >= min_id), config.prune_fraction, lp1, d)
                })
                .collect::<Result<Vec<_>>>()?;
            union_masks(&masks)
        }
    }
}

fn rel(p: &Path, root: &Path) -> PathBuf {
    p.strip_prefix(root).unwrap_or(p).to_path_buf()
}

/// Prune, retrain and analyse one variant on top of a prepared base stage.
pub fn run_variant(config: &ExperimentConfig, base: &BaseStage, variant: Variant) -> Result<SeedResult> {
    let seed = base.seed;
    let root = seed_dir(&config.out_dir, seed);
    let dir = root.join(variant.to_string());
    let d = config.d_model;
    let lp1 = config.n_layers + 1;
    let concept = analysis_concept(config, variant)?;

    let all_alive = PruneMask::all_alive(lp1, d);
    let (base_ranking, base_table, base_summary) = saliency(config, &base.acts, &base.dev, &concept, &all_alive, seed)?;
    write_text(&dir.join("ranking.csv"), &ranking_csv(&base_ranking, Some(&base_table), d))?;

    let mask = build_variant_mask(config, base, variant, &base_ranking)?;
    write_text(&dir.join("mask.csv"), &mask.to_csv())?;
    let pruned: Vec<usize> = mask.pruned_ids().into_iter().collect();
    let mut model = base.model.clone();
    apply_mask(&mut model, &mask)?;
    if let Some(j) = pruned.iter().find(|&&j| model.mask.is_alive(j)) {
        return Err(Error::Completeness(format!("pruned neuron {j} is still alive")));
    }
    log::info!("seed {seed} [{variant}]: pruned {} neurons", pruned.len());

    let mut stage_scores = vec![(Stage::Base, base.scores.overall)];
    let pruned_scores = evaluate(&model, &base.dev)?;
    stage_scores.push((Stage::Pruned, pruned_scores.overall));
    let pruned_acts = extract_activations(&model, &base.dev)?;
    let pruned_dump = dir.join("dumps").join("pruned.acts");
    write_dump(&pruned_acts, &pruned_dump)?;
    let pruned_ckpt = dir.join("checkpoints").join("pruned.ckpt");
    save_checkpoint(&model, None, &pruned_ckpt)?;
    let (_, _, pruned_summary) = saliency(config, &pruned_acts, &base.dev, &concept, &model.mask, seed)?;

    let base_f1 = base.scores.overall.f1;
    let recovery_target = base_f1 - config.recovery_epsilon;
    let mut params = config.train_params(config.max_retrain_epochs, seed ^ RETRAIN_STREAM);
    params.recovery_target = Some(recovery_target);

    let mut snaps: Vec<(usize, ActivationMatrix, PathBuf, PathBuf)> = Vec::new();
    let mut retrain_f1 = Vec::new();
    let mut recovered_at = None;
    if config.max_retrain_epochs > 0 {
        let report = train(&mut model, &base.train, Some(&base.dev), &params, &mut |epoch, m, opt| {
            let ckpt = dir.join("checkpoints").join(format!("epoch-{epoch}.ckpt"));
            save_checkpoint(m, Some(opt), &ckpt)?;
            let acts = extract_activations(m, &base.dev)?;
            let dump = dir.join("dumps").join(format!("epoch-{epoch}.acts"));
            write_dump(&acts, &dump)?;
            snaps.push((epoch, acts, ckpt, dump));
            Ok(())
        })?;
        recovered_at = report.recovered_at;
        for e in &report.epochs {
            let f1 = e.dev.as_ref().map_or(0.0, |s| s.overall.f1);
            retrain_f1.push((e.epoch, f1));
            if snaps.iter().any(|s| s.0 == e.epoch) {
                if let Some(s) = &e.dev {
                    stage_scores.push((Stage::Retrained(e.epoch), s.overall));
                }
            }
        }
    }

    let mut snapshots = vec![
        SnapshotAnalysis {
            tag: EpochTag::Epoch(0),
            f1: base_f1,
            summary: base_summary,
            checkpoint: Some(rel(&root.join("base").join("model.ckpt"), &root)),
            dump: rel(&root.join("base").join("dev.acts"), &root),
        },
        SnapshotAnalysis {
            tag: EpochTag::PostPrune,
            f1: pruned_scores.overall.f1,
            summary: pruned_summary,
            checkpoint: Some(rel(&pruned_ckpt, &root)),
            dump: rel(&pruned_dump, &root),
        },
    ];
    let mut tables = Vec::new();
    for (epoch, acts, ckpt, dump) in &snaps {
        let (_, table, summary) = saliency(config, acts, &base.dev, &concept, &model.mask, seed)?;
        let f1 = retrain_f1.iter().find(|(e, _)| e == epoch).map_or(0.0, |x| x.1);
        snapshots.push(SnapshotAnalysis {
            tag: EpochTag::Epoch(*epoch),
            f1,
            summary,
            checkpoint: Some(rel(ckpt, &root)),
            dump: rel(dump, &root),
        });
        tables.push(table);
    }

    // R and similarity to the pre-prune HATs
    let alive = model.mask.alive_ids();
    let final_table = tables.last().unwrap_or(&base_table);
    let mut remapped: Vec<usize> = alive
        .iter()
        .copied()
        .filter(|&j| final_table.saliency[j].is_some_and(|s| s > config.saliency_threshold))
        .collect();
    remapped.sort_by(|&a, &b| {
        final_table.saliency[b]
            .unwrap_or(0.0)
            .total_cmp(&final_table.saliency[a].unwrap_or(0.0))
            .then(a.cmp(&b))
    });
    let mut sim_series = Vec::new();
    let mut join = SimilarityJoin::default();
    for (i, (epoch, acts, _, _)) in snaps.iter().enumerate() {
        let records = alive
            .iter()
            .map(|&j| {
                let mut r = concept_similarity(
                    &base.hats[j],
                    &extract_hats(acts, j, config.hat_k)?,
                    &base.embeddings,
                    config.weighted_similarity,
                );
                r.saliency = tables[i].saliency[j];
                Ok(r)
            })
            .collect::<Result<Vec<SimilarityRecord>>>()?;
        let in_r: Vec<SimilarityRecord> = records.iter().filter(|r| remapped.contains(&r.neuron)).cloned().collect();
        sim_series.push((EpochTag::Epoch(*epoch), in_r));
        if i + 1 == snaps.len() {
            join = similarity_saliency_join(&records, &tables[i], d, config.similarity_threshold);
        }
    }

    let mut stages: Vec<(String, &ActivationMatrix)> = vec![("base".into(), &base.acts)];
    stages.extend(snaps.iter().map(|(e, a, _, _)| (format!("epoch {e}"), a)));
    let stage_refs: Vec<(&str, &ActivationMatrix)> = stages.iter().map(|(s, a)| (s.as_str(), *a)).collect();
    let hat_reports = remapped
        .iter()
        .take(config.top_remapped)
        .map(|&j| hat_evolution(j, &stage_refs, config.hat_k))
        .collect::<Result<Vec<_>>>()?;

    let result = SeedResult {
        seed,
        variant,
        config_hash: config.hash(),
        concept: concept.to_string(),
        base_f1,
        pruned_f1: pruned_scores.overall.f1,
        pruned_drop: base_f1 - pruned_scores.overall.f1,
        recovery_target,
        recovered: recovered_at.is_some(),
        recovered_at,
        retrain_f1,
        pruned_per_layer: (0..lp1).map(|l| d - mask.alive_in_layer(l)).collect(),
        pruned,
        remapped,
        snapshots,
        stage_scores,
        scatter_quadrants: join.quadrants,
        median_similarity_high_saliency: join.median_high_saliency,
        hat_reports,
    };
    write_seed_reports(&dir, &result, &join, &sim_series, lp1, d)?;
    Ok(result)
}

fn write_seed_reports(
    dir: &Path,
    r: &SeedResult,
    join: &SimilarityJoin,
    sim_series: &[(EpochTag, Vec<SimilarityRecord>)],
    lp1: usize,
    d: usize,
) -> Result<()> {
    let perf = performance_table(&[r.stage_scores.iter().cloned().collect()])?;
    write_table(dir, "performance", &perf.to_csv(), &perf)?;
    let dist = distribution_table(r.base_summary(), r.final_summary())?;
    write_table(dir, "distribution", &dist.to_csv(), &dist)?;
    let series: Vec<(EpochTag, Vec<LayerSummary>)> = r.snapshots.iter().map(|s| (s.tag, s.summary.clone())).collect();
    let traj = saliency_trajectory(&series);
    write_table(dir, "saliency_trajectory", &traj.to_csv(), &traj)?;
    let sim = similarity_trajectory(sim_series, lp1, d);
    write_table(dir, "similarity_trajectory", &sim.to_csv(), &sim)?;
    write_table(dir, "scatter", &scatter_csv(join), join)?;
    write_json(&dir.join("hats.json"), &r.hat_reports)?;
    write_text(&dir.join("hats.txt"), &hat_text(&r.hat_reports))?;
    write_json(&dir.join("summary.json"), r)
}

fn hat_text(reports: &[Vec<HatReport>]) -> String {
    let mut s = String::new();
    for series in reports {
        let Some(first) = series.first() else { continue };
        let _ = writeln!(s, "neuron {}", first.neuron);
        for r in series {
            let toks: Vec<String> = r
                .entries
                .iter()
                .map(|e| {
                    let mark = if r.reappeared.contains(&e.token) { "*" } else { "" };
                    format!("{}{mark} ({:.3})", e.token, e.score)
                })
                .collect();
            let _ = writeln!(s, "  {:<10} {}", r.stage, toks.join(", "));
        }
    }
    s
}

#[derive(Serialize)]
struct AggregateRow<'a> {
    seed: u64,
    base_f1: f64,
    pruned_f1: f64,
    pruned_drop: f64,
    recovered: bool,
    recovered_at: Option<usize>,
    n_pruned: usize,
    n_remapped: usize,
    median_similarity_high_saliency: Option<f64>,
    base_pct: Vec<Option<f64>>,
    retrained_pct: Vec<Option<f64>>,
    concept: &'a str,
}

fn mean_summary(runs: &[&[LayerSummary]]) -> Vec<LayerSummary> {
    let n = runs.len() as f64;
    (0..runs[0].len())
        .map(|l| {
            let avg = |f: &dyn Fn(&LayerSummary) -> Option<f64>| {
                let v: Vec<f64> = runs.iter().filter_map(|r| f(&r[l])).collect();
                (v.len() == runs.len()).then(|| v.iter().sum::<f64>() / n)
            };
            LayerSummary {
                layer: runs[0][l].layer,
                alive: runs.iter().map(|r| r[l].alive).sum(),
                salient: runs.iter().map(|r| r[l].salient).sum(),
                mean_saliency: avg(&|s| s.mean_saliency),
                pct_salient: avg(&|s| s.pct_salient),
            }
        })
        .collect()
}

fn write_aggregate(config: &ExperimentConfig, variant: Variant, runs: &[SeedResult]) -> Result<()> {
    let dir = config.out_dir.join("aggregate").join(variant.to_string());
    let maps: Vec<BTreeMap<Stage, Prf>> = runs.iter().map(|r| r.stage_scores.iter().cloned().collect()).collect();
    let perf = performance_table(&maps)?;
    write_table(&dir, "performance", &perf.to_csv(), &perf)?;
    let bases: Vec<&[LayerSummary]> = runs.iter().map(SeedResult::base_summary).collect();
    let finals: Vec<&[LayerSummary]> = runs.iter().map(SeedResult::final_summary).collect();
    let dist = distribution_table(&mean_summary(&bases), &mean_summary(&finals))?;
    write_table(&dir, "distribution", &dist.to_csv(), &dist)?;
    let rows: Vec<AggregateRow> = runs
        .iter()
        .map(|r| AggregateRow {
            seed: r.seed,
            base_f1: r.base_f1,
            pruned_f1: r.pruned_f1,
            pruned_drop: r.pruned_drop,
            recovered: r.recovered,
            recovered_at: r.recovered_at,
            n_pruned: r.pruned.len(),
            n_remapped: r.remapped.len(),
            median_similarity_high_saliency: r.median_similarity_high_saliency,
            base_pct: r.base_summary().iter().map(|s| s.pct_salient).collect(),
            retrained_pct: r.final_summary().iter().map(|s| s.pct_salient).collect(),
            concept: &r.concept,
        })
        .collect();
    write_json(&dir.join("runs.json"), &rows)
}

fn write_comparison(config: &ExperimentConfig, concept: &[SeedResult], random: &[SeedResult]) -> Result<()> {
    let mut s = String::from("seed,concept_gain,random_gain\n");
    let mut gains = Vec::new();
    for (c, r) in concept.iter().zip(random) {
        let gc = early_middle_gain(c.base_summary(), c.final_summary(), config.n_layers);
        let gr = early_middle_gain(r.base_summary(), r.final_summary(), config.n_layers);
        let _ = writeln!(s, "{},{:.3},{:.3}", c.seed, gc, gr);
        gains.push((c.seed, gc, gr));
    }
    let n = gains.len() as f64;
    let mc = gains.iter().map(|g| g.1).sum::<f64>() / n;
    let mr = gains.iter().map(|g| g.2).sum::<f64>() / n;
    let _ = writeln!(s, "mean,{mc:.3},{mr:.3}");
    write_table(&config.out_dir.join("aggregate"), "comparison", &s, &gains)
}

/// Writes `aggregate/` from per-seed results, plus the paired comparison
/// when both concept and random runs are present.
pub fn write_aggregates(config: &ExperimentConfig, runs: &BTreeMap<Variant, Vec<SeedResult>>) -> Result<()> {
    for (v, rs) in runs {
        if rs.is_empty() {
            return Err(Error::Completeness(format!("no {v} runs to aggregate")));
        }
        write_aggregate(config, *v, rs)?;
    }
    if let (Some(c), Some(r)) = (runs.get(&Variant::Concept), runs.get(&Variant::Random)) {
        write_comparison(config, c, r)?;
    }
    Ok(())
}

/// Reads `seed-<s>/<variant>/summary.json` for every configured seed.
pub fn load_seed_results(config: &ExperimentConfig) -> Result<BTreeMap<Variant, Vec<SeedResult>>> {
    let mut runs: BTreeMap<Variant, Vec<SeedResult>> = BTreeMap::new();
    for &seed in &config.seeds {
        for v in [Variant::Concept, Variant::Random, Variant::Subconcept] {
            let path = seed_dir(&config.out_dir, seed).join(v.to_string()).join("summary.json");
            if path.is_file() {
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                runs.entry(v).or_default().push(serde_json::from_str(&text)?);
            }
        }
    }
    if runs.is_empty() {
        return Err(Error::Input(format!("no run summaries under {}", config.out_dir.display())));
    }
    Ok(runs)
}

fn run(config: &ExperimentConfig, variants: &[Variant]) -> Result<ExperimentResult> {
    config.validate()?;
    if variants.contains(&Variant::Subconcept) {
        subconcept_labels(config)?;
    }
    write_text(&config.out_dir.join("config.txt"), &config.to_text())?;
    let mut runs: BTreeMap<Variant, Vec<SeedResult>> = BTreeMap::new();
    for &seed in &config.seeds {
        let base = prepare_base(config, seed)?;
        for &v in variants {
            let r = run_variant(config, &base, v)?;
            log::info!(
                "seed {seed} [{v}]: base {:.3} pruned {:.3} recovered {:?}",
                r.base_f1,
                r.pruned_f1,
                r.recovered_at
            );
            runs.entry(v).or_default().push(r);
        }
    }
    write_aggregates(config, &runs)?;
    Ok(ExperimentResult {
        config_hash: config.hash(),
        out_dir: config.out_dir.clone(),
        runs,
    })
}

/// The main experiment; `prune_mode` picks concept or random masks.
pub fn run_neuroplasticity(config: &ExperimentConfig) -> Result<ExperimentResult> {
    let v = match config.prune_mode {
        PruneMode::Concept => Variant::Concept,
        PruneMode::Random => Variant::Random,
    };
    run(config, &[v])
}

/// Paired concept and random-mask runs sharing each seed's base model.
pub fn run_random_baseline(config: &ExperimentConfig) -> Result<ExperimentResult> {
    run(config, &[Variant::Concept, Variant::Random])
}

/// Prunes the union of each sub-concept's top neurons and tracks the parent.
pub fn run_subconcept(config: &ExperimentConfig) -> Result<ExperimentResult> {
    run(config, &[Variant::Subconcept])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(out: &Path) -> ExperimentConfig {
        ExperimentConfig {
            n_sentences: 200,
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ffn: 32,
            train_epochs: 1,
            max_retrain_epochs: 2,
            seeds: vec![5],
            group_size: 4,
            embedding_dim: 8,
            out_dir: out.to_path_buf(),
            ..ExperimentConfig::default()
        }
    }

    fn summary(s: &[(usize, f64)]) -> Vec<LayerSummary> {
        s.iter()
            .map(|&(layer, pct)| LayerSummary {
                layer,
                alive: 1,
                salient: 1,
                mean_saliency: Some(0.5),
                pct_salient: Some(pct),
            })
            .collect()
    }

    #[test]
    fn early_middle_gain_covers_half_the_stack() {
        let b = summary(&[(0, 10.0), (1, 10.0), (2, 10.0), (3, 30.0), (4, 40.0)]);
        let r = summary(&[(0, 12.0), (1, 15.0), (2, 13.0), (3, 30.0), (4, 30.0)]);
        assert!((early_middle_gain(&b, &r, 4) - 10.0).abs() < 1e-12);
        assert!((early_middle_gain(&b, &r, 3) - 10.0).abs() < 1e-12);
        assert!((early_middle_gain(&b, &r, 1) - 7.0).abs() < 1e-12);
    }

    #[test]
    fn subconcepts_must_be_siblings() {
        let mut c = ExperimentConfig::default();
        c.subconcepts.truncate(1);
        assert!(matches!(subconcept_labels(&c), Err(Error::Config(_))));
        c.subconcepts.push("SEM:named_entity:person".parse().unwrap());
        assert!(matches!(subconcept_labels(&c), Err(Error::Config(_))));
        let (_, parent) = subconcept_labels(&ExperimentConfig::default()).unwrap();
        assert_eq!(parent.to_string(), "SEM:named_entity:location");
    }

    #[test]
    fn zero_fraction_prune_is_a_no_op() {
        let tmp = tempfile::tempdir().unwrap();
        let config = ExperimentConfig {
            prune_fraction: 0.0,
            max_retrain_epochs: 0,
            ..tiny(tmp.path())
        };
        let r = run_neuroplasticity(&config).unwrap();
        let s = &r.runs[&Variant::Concept][0];
        assert!(s.pruned.is_empty());
        assert_eq!(s.stage_scores[0].1, s.stage_scores[1].1);
        assert_eq!(s.pruned_f1, s.base_f1);
    }

    #[test]
    fn paired_runs_share_counts_and_write_reports() {
        let tmp = tempfile::tempdir().unwrap();
        let config = tiny(tmp.path());
        let r = run_random_baseline(&config).unwrap();
        let c = &r.runs[&Variant::Concept][0];
        let rnd = &r.runs[&Variant::Random][0];
        assert_eq!(c.pruned.len(), rnd.pruned.len());
        assert_eq!(c.pruned.len(), 24);
        assert_ne!(c.pruned, rnd.pruned);
        assert_eq!(c.config_hash, rnd.config_hash);
        // no gaps: base, post-prune, each snapshot
        let tags: Vec<EpochTag> = c.snapshots.iter().map(|s| s.tag).collect();
        assert_eq!(tags, vec![EpochTag::Epoch(0), EpochTag::PostPrune, EpochTag::Epoch(2)]);
        let dir = seed_dir(tmp.path(), 5).join("concept");
        for f in [
            "performance.csv",
            "performance.json",
            "distribution.csv",
            "saliency_trajectory.csv",
            "similarity_trajectory.csv",
            "scatter.csv",
            "hats.json",
            "mask.csv",
            "summary.json",
        ] {
            assert!(dir.join(f).is_file(), "{f}");
        }
        for s in &c.snapshots {
            assert!(seed_dir(tmp.path(), 5).join(&s.dump).is_file());
        }
        assert!(tmp.path().join("aggregate/comparison.csv").is_file());
        let alive = PruneMask::from_pruned(3, 16, c.pruned.iter().copied()).unwrap();
        assert!(c.pruned.iter().all(|&j| !alive.is_alive(j)));
    }

    #[test]
    fn subconcept_run_tracks_parent() {
        let tmp = tempfile::tempdir().unwrap();
        let config = ExperimentConfig {
            n_sentences: 800,
            max_retrain_epochs: 0,
            ..tiny(tmp.path())
        };
        let r = run_subconcept(&config).unwrap();
        let s = &r.runs[&Variant::Subconcept][0];
        assert_eq!(s.concept, "SEM:named_entity:location");
        assert!(s.pruned.len() >= 24);
    }
}
