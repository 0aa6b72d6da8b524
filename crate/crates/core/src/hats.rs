//! Highest-activating tokens (HATs) per neuron.
//!
//! A token's contribution is its squared deviation from the neuron's mean
//! activation over the whole corpus. By default contributions are
//! aggregated per token type with `max`, so sets hold unique strings.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::activations::ActivationMatrix;
use crate::error::{Error, Result};

pub const DEFAULT_K: usize = 5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum HatAggregation {
    /// One entry per token type, scored by its largest contribution.
    #[default]
    TypeMax,
    /// One entry per occurrence; a token may appear more than once.
    PerOccurrence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HatEntry {
    pub token: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HatSet {
    pub neuron: usize,
    pub k: usize,
    pub entries: Vec<HatEntry>,
    /// Set when the neuron has zero variance (e.g. pruned).
    pub degenerate: bool,
}

impl HatSet {
    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.token.as_str())
    }
}

pub fn extract_hats(m: &ActivationMatrix, neuron: usize, k: usize) -> Result<HatSet> {
    extract_hats_with(m, neuron, k, HatAggregation::TypeMax)
}

pub fn extract_hats_with(m: &ActivationMatrix, neuron: usize, k: usize, agg: HatAggregation) -> Result<HatSet> {
    if neuron >= m.n_cols {
        return Err(Error::Input(format!("neuron {neuron} out of range ({} columns)", m.n_cols)));
    }
    if m.n_rows == 0 {
        return Err(Error::Input("activation matrix has no rows".into()));
    }
    let first = m.values[neuron];
    let degenerate = m.column(neuron).all(|v| v.to_bits() == first.to_bits() || v == first);
    if degenerate {
        return Ok(HatSet {
            neuron,
            k,
            entries: Vec::new(),
            degenerate: true,
        });
    }
    let mu = m.column(neuron).map(f64::from).sum::<f64>() / m.n_rows as f64;
    let mut contrib: Vec<(&str, f64)> = match agg {
        HatAggregation::TypeMax => {
            let mut best: HashMap<&str, f64> = HashMap::new();
            for (a, t) in m.column(neuron).zip(m.texts()) {
                let c = (f64::from(a) - mu).powi(2);
                let e = best.entry(t).or_insert(c);
                if c > *e {
                    *e = c;
                }
            }
            best.into_iter().collect()
        }
        HatAggregation::PerOccurrence => m
            .column(neuron)
            .zip(m.texts())
            .map(|(a, t)| (t, (f64::from(a) - mu).powi(2)))
            .collect(),
    };
    contrib.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    contrib.truncate(k);
    let max = contrib.first().map_or(0.0, |c| c.1);
    let entries = contrib
        .into_iter()
        .map(|(t, c)| HatEntry {
            token: t.to_string(),
            score: c / max,
        })
        .collect();
    Ok(HatSet {
        neuron,
        k,
        entries,
        degenerate: false,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HatReport {
    pub neuron: usize,
    pub stage: String,
    pub entries: Vec<HatEntry>,
    /// Tokens also present in the first (base) snapshot's set.
    pub reappeared: Vec<String>,
}

/// HATs of one neuron across snapshots of the same corpus. The first
/// snapshot is the reference for reappearance flags.
pub fn hat_evolution(neuron: usize, snapshots: &[(&str, &ActivationMatrix)], k: usize) -> Result<Vec<HatReport>> {
    let Some((_, base)) = snapshots.first() else {
        return Ok(Vec::new());
    };
    for (stage, m) in &snapshots[1..] {
        if m.n_rows != base.n_rows || !m.texts().eq(base.texts()) {
            return Err(Error::Alignment(format!("snapshot `{stage}` was extracted from a different corpus")));
        }
    }
    let sets = snapshots
        .iter()
        .map(|(_, m)| extract_hats(m, neuron, k))
        .collect::<Result<Vec<_>>>()?;
    let base_tokens: BTreeSet<&str> = sets[0].tokens().collect();
    Ok(sets
        .iter()
        .zip(snapshots)
        .enumerate()
        .map(|(i, (set, (stage, _)))| HatReport {
            neuron,
            stage: stage.to_string(),
            entries: set.entries.clone(),
            reappeared: if i == 0 {
                Vec::new()
            } else {
                set.tokens()
                    .filter(|t| base_tokens.contains(t))
                    .map(str::to_string)
                    .collect()
            },
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::TokenMeta;
    use proptest::prelude::*;

    fn column(vals: &[f32], texts: &[&str]) -> ActivationMatrix {
        let meta = texts
            .iter()
            .enumerate()
            .map(|(i, t)| TokenMeta {
                sentence: 0,
                position: i,
                text: t.to_string(),
                tag: "O".into(),
                concepts: vec![],
            })
            .collect();
        ActivationMatrix::new(1, 1, vals.to_vec(), meta, [0; 32]).unwrap()
    }

    #[test]
    fn variance_contribution_by_hand() {
        let h = extract_hats(&column(&[5.0, 1.0, 0.0], &["a", "b", "c"]), 0, 5).unwrap();
        let got: Vec<(&str, f64)> = h.entries.iter().map(|e| (e.token.as_str(), e.score)).collect();
        assert_eq!(got[0], ("a", 1.0));
        assert_eq!(got[1].0, "c");
        assert!((got[1].1 - 4.0 / 9.0).abs() < 1e-12);
        assert_eq!(got[2].0, "b");
        assert!((got[2].1 - 1.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn truncation_and_degenerate() {
        let m = column(&[1.0, 2.0, 1.0], &["x", "y", "x"]);
        assert_eq!(extract_hats(&m, 0, 10).unwrap().entries.len(), 2);
        let z = column(&[0.0; 4], &["a", "b", "c", "d"]);
        let h = extract_hats(&z, 0, 5).unwrap();
        assert!(h.degenerate && h.entries.is_empty());
    }

    #[test]
    fn ties_break_lexicographically() {
        let h = extract_hats(&column(&[1.0, -1.0, 0.0, 0.0], &["q", "p", "r", "r"]), 0, 2).unwrap();
        assert_eq!(h.tokens().collect::<Vec<_>>(), vec!["p", "q"]);
    }

    #[test]
    fn per_occurrence_allows_duplicates() {
        let m = column(&[5.0, 5.0, 0.0, 0.0, 0.0, 0.0], &["a", "a", "b", "c", "d", "e"]);
        let h = extract_hats_with(&m, 0, 2, HatAggregation::PerOccurrence).unwrap();
        assert_eq!(h.tokens().collect::<Vec<_>>(), vec!["a", "a"]);
    }

    #[test]
    fn evolution_flags_reappearing_tokens() {
        let texts = ["x", "y", "z", "w", "o", "o", "o", "o", "o", "o"];
        let base = column(&[9.0, 8.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], &texts);
        let later = column(&[9.0, 0.0, 8.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], &texts);
        let r = hat_evolution(0, &[("base", &base), ("epoch 8", &later)], 2).unwrap();
        assert!(r[0].reappeared.is_empty());
        assert_eq!(r[1].reappeared, vec!["x"]);

        let single = hat_evolution(0, &[("base", &base)], 2).unwrap();
        assert_eq!(single.len(), 1);
        assert!(single[0].reappeared.is_empty());

        let other = column(&[1.0; 10], &["a"; 10]);
        assert!(matches!(
            hat_evolution(0, &[("base", &base), ("e2", &other)], 2),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn lexicon_switch_has_no_reappearance() {
        let texts = ["a1", "a2", "b1", "b2", "o", "o"];
        let pre = column(&[5.0, 5.0, 0.0, 0.0, 0.0, 0.0], &texts);
        let post = column(&[0.0, 0.0, 5.0, 5.0, 0.0, 0.0], &texts);
        let r = hat_evolution(0, &[("base", &pre), ("epoch 8", &post)], 2).unwrap();
        assert!(r[1].reappeared.is_empty());
    }

    fn brute_force(vals: &[f32], texts: &[String], k: usize) -> Vec<(String, f64)> {
        let mu = vals.iter().map(|&v| v as f64).sum::<f64>() / vals.len() as f64;
        let mut types: Vec<String> = texts.to_vec();
        types.sort();
        types.dedup();
        let mut all: Vec<(String, f64)> = types
            .into_iter()
            .map(|t| {
                let c = vals
                    .iter()
                    .zip(texts)
                    .filter(|(_, x)| **x == t)
                    .map(|(&v, _)| (v as f64 - mu).powi(2))
                    .fold(f64::NEG_INFINITY, f64::max);
                (t, c)
            })
            .collect();
        // stable sort on a lexicographically sorted list keeps ties in order
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        all.truncate(k);
        let max = all[0].1;
        all.into_iter().map(|(t, c)| (t, c / max)).collect()
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            data in prop::collection::vec((-3i8..=3, 0u8..12), 2..200),
            k in 1usize..8,
        ) {
            let vals: Vec<f32> = data.iter().map(|(v, _)| *v as f32 * 0.5).collect();
            let texts: Vec<String> = data.iter().map(|(_, t)| format!("w{t}")).collect();
            prop_assume!(vals.iter().any(|&v| v != vals[0]));
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            let h = extract_hats(&column(&vals, &refs), 0, k).unwrap();
            let got: Vec<(String, f64)> = h.entries.into_iter().map(|e| (e.token, e.score)).collect();
            prop_assert_eq!(got.clone(), brute_force(&vals, &texts, k));
            prop_assert_eq!(got[0].1, 1.0);
            for w in got.windows(2) {
                prop_assert!(w[0].1 >= w[1].1);
            }
        }

        #[test]
        fn duplicating_corpus_keeps_scores(
            data in prop::collection::vec((-3i8..=3, 0u8..12), 2..100),
        ) {
            let vals: Vec<f32> = data.iter().map(|(v, _)| *v as f32).collect();
            prop_assume!(vals.iter().any(|&v| v != vals[0]));
            let texts: Vec<String> = data.iter().map(|(_, t)| format!("w{t}")).collect();
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            let once = extract_hats(&column(&vals, &refs), 0, 5).unwrap();
            let vals2 = [vals.clone(), vals].concat();
            let refs2 = [refs.clone(), refs].concat();
            let twice = extract_hats(&column(&vals2, &refs2), 0, 5).unwrap();
            prop_assert_eq!(once.tokens().collect::<Vec<_>>(), twice.tokens().collect::<Vec<_>>());
            for (a, b) in once.entries.iter().zip(&twice.entries) {
                prop_assert!((a.score - b.score).abs() < 1e-12);
            }
        }
    }
}
