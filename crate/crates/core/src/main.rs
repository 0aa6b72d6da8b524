use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use neuroplasticity::activations::{extract_activations, read_dump, write_dump, ActivationMatrix};
use neuroplasticity::config::{ExperimentConfig, PruneMode, Ranker};
use neuroplasticity::corpus::{
    generate_corpus, read_corpus, split_corpus, write_corpus, ConceptCorpus, ConceptLabel, CorpusSpec,
};
use neuroplasticity::embeddings::{concept_similarity, read_word_vectors, train_embeddings};
use neuroplasticity::error::{Error, Result};
use neuroplasticity::experiment::{
    load_seed_results, run_neuroplasticity, run_random_baseline, run_subconcept, write_aggregates, ExperimentResult,
};
use neuroplasticity::hats::extract_hats;
use neuroplasticity::model::{config_for_corpus, load_checkpoint, save_checkpoint, train, PruneMask, TaggerModel};
use neuroplasticity::probe::linear_probe_rank;
use neuroplasticity::pruning::{apply_mask, build_mask, random_mask};
use neuroplasticity::ranking::{
    binary_class_means, layer_saliency_summary, probeless_rank, ranking_csv, saliency_scores, NeuronRanking,
};
use neuroplasticity::report::{write_json, write_text};
use neuroplasticity::stats::fixed;

#[derive(Parser)]
#[command(name = "neuroplasticity", version, about = "Concept pruning and relearning experiments")]
struct Cli {
    /// Flat `key = value` experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Comma-separated seeds, overriding the config.
    #[arg(long, global = true, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Only log warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic annotated corpus (one file per seed).
    GenCorpus,
    /// Fine-tune a base tagger on the training split.
    Train {
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Dump per-token activations of a checkpoint over a corpus.
    ExtractActs {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Rank neurons for the configured concept from an activation dump.
    Rank {
        #[arg(long)]
        acts: PathBuf,
    },
    /// Prune a checkpoint with a concept or random mask.
    Prune {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dump used to rank neurons (concept mode).
        #[arg(long)]
        acts: Option<PathBuf>,
    },
    /// Continue training a (pruned) checkpoint, saving snapshots.
    Retrain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Highest-activating tokens per neuron.
    Hats {
        #[arg(long)]
        acts: PathBuf,
        /// Neuron ids; every neuron when omitted.
        #[arg(long, value_delimiter = ',')]
        neurons: Option<Vec<usize>>,
    },
    /// HAT similarity between two dumps of the same corpus.
    Similarity {
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
        /// Word vectors in text format.
        #[arg(long, conflicts_with = "corpus")]
        embeddings: Option<PathBuf>,
        /// Corpus to train PPMI-SVD vectors on instead.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Rebuild aggregate tables from per-seed summaries under the output directory.
    Report,
    /// Full experiments.
    Experiment {
        #[command(subcommand)]
        kind: ExperimentKind,
    },
}

#[derive(Subcommand)]
enum ExperimentKind {
    /// Concept pruning and retraining on every seed
    Run,
    /// Concept run plus a random mask removing the same number of neurons
    RandomBaseline,
    /// Prune one subconcept and track its siblings and parent
    Subconcept,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seeds) = &cli.seed {
        config.seeds = seeds.clone();
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn corpus_for(config: &ExperimentConfig, path: Option<&Path>, seed: u64) -> Result<ConceptCorpus> {
    match path.or(config.corpus_path.as_deref()) {
        Some(p) => read_corpus(p),
        None => generate_corpus(&CorpusSpec::default_ner(config.n_sentences), seed),
    }
}

fn splits(config: &ExperimentConfig, corpus: &ConceptCorpus, seed: u64) -> Result<(ConceptCorpus, ConceptCorpus)> {
    let test = (1.0 - config.train_fraction - config.dev_fraction).max(0.0);
    let (tr, dev, _) = split_corpus(corpus, (config.train_fraction, config.dev_fraction, test), seed)?;
    Ok((tr, dev))
}

/// Binary concept labels recovered from the token metadata of a dump.
fn dump_labels(acts: &ActivationMatrix, concept: &ConceptLabel) -> Result<Vec<bool>> {
    acts.token_meta
        .iter()
        .map(|t| {
            t.concepts.iter().try_fold(false, |hit, c| {
                let label: ConceptLabel = c.parse()?;
                Ok(hit || concept.covers(&label))
            })
        })
        .collect()
}

fn rank_dump(config: &ExperimentConfig, acts: &ActivationMatrix, seed: u64) -> Result<NeuronRanking> {
    let labels = dump_labels(acts, &config.concept)?;
    let name = config.concept.to_string();
    match config.ranker {
        Ranker::Probeless => {
            let binary = neuroplasticity::corpus::BinaryLabels {
                labels,
                diagnostic: None,
            };
            probeless_rank(&binary_class_means(acts, &binary, &name)?, &name)
        }
        Ranker::LinearProbe => linear_probe_rank(acts, &labels, &name, &config.probe_params(seed)),
    }
}

fn print_result(r: &ExperimentResult) {
    for (variant, runs) in &r.runs {
        for s in runs {
            println!(
                "seed {} [{variant}] base F1 {} pruned {} recovered {} (at {})",
                s.seed,
                fixed(s.base_f1, 3),
                fixed(s.pruned_f1, 3),
                s.recovered,
                s.recovered_at.map_or("-".into(), |e| e.to_string()),
            );
        }
    }
    println!("reports written to {}", r.out_dir.display());
}

fn run(cli: &Cli) -> Result<()> {
    let config = load_config(cli)?;
    let seed = config.seeds[0];
    let out = &config.out_dir;
    match &cli.command {
        Command::GenCorpus => {
            for &s in &config.seeds {
                let c = generate_corpus(&CorpusSpec::default_ner(config.n_sentences), s)?;
                let path = out.join(format!("corpus-seed-{s}.txt"));
                std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
                write_corpus(&c, &path)?;
                println!("{}: {} sentences, {} types", path.display(), c.len(), c.vocab().len());
            }
        }
        Command::Train { corpus } => {
            let c = corpus_for(&config, corpus.as_deref(), seed)?;
            let (tr, dev) = splits(&config, &c, seed)?;
            let base = neuroplasticity::model::ModelConfig {
                seed,
                ..config.model_config()
            };
            let (mc, tags) = config_for_corpus(&base, &c);
            let mut model = TaggerModel::<f32>::init(mc, c.vocab().tokens().to_vec(), tags)?;
            let report = train(
                &mut model,
                &tr,
                Some(&dev),
                &config.train_params(config.train_epochs, seed),
                &mut |_, _, _| Ok(()),
            )?;
            save_checkpoint(&model, None, &out.join("model.ckpt"))?;
            write_json(&out.join("train_log.json"), &report.epochs)?;
            if let Some(f1) = report.epochs.last().and_then(|e| e.dev.as_ref()) {
                println!("dev F1 {}", fixed(f1.overall.f1, 3));
            }
        }
        Command::ExtractActs { checkpoint, corpus } => {
            let (model, _) = load_checkpoint(checkpoint)?;
            let acts = extract_activations(&model, &read_corpus(corpus)?)?;
            let path = out.join("acts.dump");
            write_dump(&acts, &path)?;
            println!("{}: {} tokens x {} neurons", path.display(), acts.n_rows, acts.n_cols);
        }
        Command::Rank { acts } => {
            let m = read_dump(acts, None, false)?;
            let ranking = rank_dump(&config, &m, seed)?;
            let mask = PruneMask::all_alive(m.n_layers_plus_1, m.d);
            let table = saliency_scores(&ranking, config.group_size, true, &mask)?;
            write_text(&out.join("ranking.csv"), &ranking_csv(&ranking, Some(&table), m.d))?;
            let summary = layer_saliency_summary(&table, &mask, config.saliency_threshold)?;
            write_json(&out.join("layer_summary.json"), &summary)?;
            for s in &summary {
                println!(
                    "layer {}: {}% salient",
                    s.layer,
                    s.pct_salient.map_or("-".into(), |p| fixed(p, 2))
                );
            }
        }
        Command::Prune { checkpoint, acts } => {
            let (mut model, _) = load_checkpoint(checkpoint)?;
            let (lp1, d) = (model.config.n_layers + 1, model.config.d_model);
            let first = if config.prune_embedding_layer { 0 } else { d };
            let pool: Vec<usize> = (first..lp1 * d).collect();
            let mask = match config.prune_mode {
                PruneMode::Concept => {
                    let acts = acts
                        .as_ref()
                        .ok_or_else(|| Error::Config("concept pruning needs --acts".into()))?;
                    let ranking = rank_dump(&config, &read_dump(acts, None, false)?, seed)?;
                    build_mask(&ranking.restricted(|j| j >= first), config.prune_fraction, lp1, d)?
                }
                PruneMode::Random => {
                    let count = (config.prune_fraction * pool.len() as f64).floor() as usize;
                    random_mask(count, lp1, d, seed, Some(&pool))?
                }
            };
            apply_mask(&mut model, &mask)?;
            save_checkpoint(&model, None, &out.join("pruned.ckpt"))?;
            write_text(&out.join("mask.csv"), &mask.to_csv())?;
            println!("pruned {} of {} neurons", mask.n_pruned(), mask.n_neurons());
        }
        Command::Retrain { checkpoint, corpus } => {
            let (mut model, _) = load_checkpoint(checkpoint)?;
            let c = corpus_for(&config, corpus.as_deref(), seed)?;
            let (tr, dev) = splits(&config, &c, seed)?;
            let params = config.train_params(config.max_retrain_epochs, seed);
            let report = train(&mut model, &tr, Some(&dev), &params, &mut |epoch, m, opt| {
                save_checkpoint(m, Some(opt), &out.join(format!("epoch-{epoch}.ckpt")))
            })?;
            write_json(&out.join("retrain_log.json"), &report.epochs)?;
            for e in &report.epochs {
                if let Some(s) = &e.dev {
                    println!("epoch {}: dev F1 {}", e.epoch, fixed(s.overall.f1, 3));
                }
            }
        }
        Command::Hats { acts, neurons } => {
            let m = read_dump(acts, None, false)?;
            let ids: Vec<usize> = neurons.clone().unwrap_or_else(|| (0..m.n_cols).collect());
            let sets = ids
                .iter()
                .map(|&j| extract_hats(&m, j, config.hat_k))
                .collect::<Result<Vec<_>>>()?;
            write_json(&out.join("hats.json"), &sets)?;
            for s in &sets {
                println!("{}: {}", s.neuron, s.tokens().collect::<Vec<_>>().join(" "));
            }
        }
        Command::Similarity {
            before,
            after,
            embeddings,
            corpus,
        } => {
            let a = read_dump(before, None, false)?;
            let b = read_dump(after, None, false)?;
            if a.n_cols != b.n_cols || !a.texts().eq(b.texts()) {
                return Err(Error::Alignment("dumps cover different corpora or models".into()));
            }
            let table = match (embeddings, corpus) {
                (Some(p), _) => read_word_vectors(p)?,
                (None, c) => {
                    let c = corpus_for(&config, c.as_deref(), seed)?;
                    train_embeddings(&c, config.embedding_dim, config.embedding_window)?
                }
            };
            let mut csv = String::from("neuron_id,similarity,tokens_before,tokens_after\n");
            let pruned: BTreeSet<usize> = (0..b.n_cols).filter(|&j| b.column(j).all(|v| v == 0.0)).collect();
            for j in (0..a.n_cols).filter(|j| !pruned.contains(j)) {
                let r = concept_similarity(
                    &extract_hats(&a, j, config.hat_k)?,
                    &extract_hats(&b, j, config.hat_k)?,
                    &table,
                    config.weighted_similarity,
                );
                let sim = r.similarity.map(|s| format!("{s:.6}")).unwrap_or_default();
                let _ = writeln!(csv, "{j},{sim},{},{}", r.tokens_used_before, r.tokens_used_after);
            }
            write_text(&out.join("similarity.csv"), &csv)?;
            println!("{}", out.join("similarity.csv").display());
        }
        Command::Report => {
            let runs = load_seed_results(&config)?;
            write_aggregates(&config, &runs)?;
            println!("aggregates written to {}", out.join("aggregate").display());
        }
        Command::Experiment { kind } => {
            let r = match kind {
                ExperimentKind::Run => run_neuroplasticity(&config)?,
                ExperimentKind::RandomBaseline => run_random_baseline(&config)?,
                ExperimentKind::Subconcept => run_subconcept(&config)?,
            };
            print_result(&r);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
