//! Report tables. Every table renders to CSV (3 decimals) and has a JSON
//! mirror with raw values under the same basename.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embeddings::SimilarityRecord;
use crate::error::{Error, Result};
use crate::metrics::Prf;
use crate::ranking::LayerSummary;
use crate::stats::{ci95, fixed, mean, sample_sd};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    Base,
    Pruned,
    Retrained(usize),
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Base => write!(f, "Base"),
            Stage::Pruned => write!(f, "Pruned"),
            Stage::Retrained(k) => write!(f, "Retrained ({k} epochs)"),
        }
    }
}

/// Position on the training timeline: `Epoch(0)` is the base model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EpochTag {
    Epoch(usize),
    PostPrune,
}

impl fmt::Display for EpochTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EpochTag::Epoch(e) => write!(f, "{e}"),
            EpochTag::PostPrune => write!(f, "post-prune"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    fn of(xs: &[f64]) -> Self {
        Self {
            mean: mean(xs).unwrap_or(0.0),
            sd: sample_sd(xs),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerformanceRow {
    pub stage: Stage,
    pub label: String,
    pub runs: usize,
    pub precision: MeanSd,
    pub recall: MeanSd,
    pub f1: MeanSd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerformanceTable {
    pub rows: Vec<PerformanceRow>,
}

/// Mean and sample SD of P/R/F1 per stage across runs.
pub fn performance_table(runs: &[BTreeMap<Stage, Prf>]) -> Result<PerformanceTable> {
    if runs.is_empty() {
        return Err(Error::Completeness("performance table needs at least one run".into()));
    }
    let stages: BTreeSet<Stage> = runs.iter().flat_map(|r| r.keys().copied()).collect();
    for (i, run) in runs.iter().enumerate() {
        if let Some(missing) = stages.iter().find(|s| !run.contains_key(s)) {
            return Err(Error::Completeness(format!("run {i} has no `{missing}` stage")));
        }
    }
    let rows = stages
        .into_iter()
        .map(|stage| {
            let pick = |f: fn(&Prf) -> f64| runs.iter().map(|r| f(&r[&stage])).collect::<Vec<_>>();
            PerformanceRow {
                stage,
                label: stage.to_string(),
                runs: runs.len(),
                precision: MeanSd::of(&pick(|p| p.precision)),
                recall: MeanSd::of(&pick(|p| p.recall)),
                f1: MeanSd::of(&pick(|p| p.f1)),
            }
        })
        .collect();
    Ok(PerformanceTable { rows })
}

impl PerformanceTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,precision_mean,precision_sd,recall_mean,recall_sd,f1_mean,f1_sd\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.label,
                fixed(r.precision.mean, 3),
                fixed(r.precision.sd, 3),
                fixed(r.recall.mean, 3),
                fixed(r.recall.sd, 3),
                fixed(r.f1.mean, 3),
                fixed(r.f1.sd, 3)
            );
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionRow {
    pub layer: usize,
    pub base_pct: Option<f64>,
    pub retrained_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionTable {
    pub rows: Vec<DistributionRow>,
    pub base_argmax: Option<usize>,
    pub retrained_argmax: Option<usize>,
}

fn argmax(vals: impl Iterator<Item = (usize, Option<f64>)>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (l, v) in vals {
        if let Some(v) = v {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((l, v));
            }
        }
    }
    best.map(|b| b.0)
}

/// Side-by-side per-layer salient percentages with each column's argmax.
pub fn distribution_table(base: &[LayerSummary], retrained: &[LayerSummary]) -> Result<DistributionTable> {
    let lb: Vec<usize> = base.iter().map(|s| s.layer).collect();
    let lr: Vec<usize> = retrained.iter().map(|s| s.layer).collect();
    if lb != lr {
        return Err(Error::Alignment(format!("layer sets differ: {lb:?} vs {lr:?}")));
    }
    let rows: Vec<DistributionRow> = base
        .iter()
        .zip(retrained)
        .map(|(b, r)| DistributionRow {
            layer: b.layer,
            base_pct: b.pct_salient,
            retrained_pct: r.pct_salient,
        })
        .collect();
    Ok(DistributionTable {
        base_argmax: argmax(rows.iter().map(|r| (r.layer, r.base_pct))),
        retrained_argmax: argmax(rows.iter().map(|r| (r.layer, r.retrained_pct))),
        rows,
    })
}

fn opt3(x: Option<f64>) -> String {
    x.map(|v| fixed(v, 3)).unwrap_or_default()
}

impl DistributionTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,base_pct,retrained_pct\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.layer, opt3(r.base_pct), opt3(r.retrained_pct));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyPoint {
    pub epoch: String,
    pub layer: usize,
    pub mean_saliency: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyTrajectory {
    pub points: Vec<SaliencyPoint>,
}

/// Mean saliency per layer per snapshot, in the order given.
pub fn saliency_trajectory(snapshots: &[(EpochTag, Vec<LayerSummary>)]) -> SaliencyTrajectory {
    let points = snapshots
        .iter()
        .flat_map(|(tag, layers)| {
            layers.iter().map(move |s| SaliencyPoint {
                epoch: tag.to_string(),
                layer: s.layer,
                mean_saliency: s.mean_saliency,
            })
        })
        .collect();
    SaliencyTrajectory { points }
}

impl SaliencyTrajectory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,layer,mean_saliency\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{}", p.epoch, p.layer, opt3(p.mean_saliency));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityPoint {
    pub epoch: String,
    pub layer: usize,
    pub n: usize,
    pub mean_similarity: Option<f64>,
    pub ci95: f64,
    /// Interval computed from a single value.
    pub ci_degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTrajectory {
    pub points: Vec<SimilarityPoint>,
}

/// Mean and 95% interval of defined similarities per layer per snapshot.
pub fn similarity_trajectory(
    snapshots: &[(EpochTag, Vec<SimilarityRecord>)],
    n_layers_plus_1: usize,
    d: usize,
) -> SimilarityTrajectory {
    let mut points = Vec::new();
    for (tag, records) in snapshots {
        for l in 0..n_layers_plus_1 {
            let vals: Vec<f64> = records
                .iter()
                .filter(|r| r.neuron / d == l)
                .filter_map(|r| r.similarity)
                .collect();
            points.push(SimilarityPoint {
                epoch: tag.to_string(),
                layer: l,
                n: vals.len(),
                mean_similarity: mean(&vals),
                ci95: ci95(&vals),
                ci_degenerate: vals.len() == 1,
            });
        }
    }
    SimilarityTrajectory { points }
}

impl SimilarityTrajectory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,layer,mean_similarity,ci95,n\n");
        for p in &self.points {
            let ci = if p.n == 0 { String::new() } else { fixed(p.ci95, 3) };
            let _ = writeln!(s, "{},{},{},{ci},{}", p.epoch, p.layer, opt3(p.mean_similarity), p.n);
        }
        s
    }
}

/// Writes `<basename>.csv` and its `<basename>.json` mirror.
pub fn write_table<T: Serialize>(dir: &Path, basename: &str, csv: &str, mirror: &T) -> Result<()> {
    write_text(&dir.join(format!("{basename}.csv")), csv)?;
    write_json(&dir.join(format!("{basename}.json")), mirror)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
