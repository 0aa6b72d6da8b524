//! Entity-level precision / recall / F1 with exact span and type matching.
//!
//! Chunking follows the lenient IOB2 reading used by seqeval: an `I-X` that
//! follows `O` or a different type opens a new entity, so ill-formed
//! predictions are still scored.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::BioTag;
use crate::error::{Error, Result};

/// Entity span `(type, start, end)` with `end` inclusive.
pub type Span = (String, usize, usize);

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n_gold: usize,
    pub n_pred: usize,
    pub n_matched: usize,
}

impl Prf {
    fn from_counts(matched: usize, n_pred: usize, n_gold: usize, what: &str, diags: &mut Vec<String>) -> Self {
        let precision = if n_pred == 0 {
            diags.push(format!("{what}: no predicted entities; precision set to 0"));
            0.0
        } else {
            matched as f64 / n_pred as f64
        };
        let recall = if n_gold == 0 {
            diags.push(format!("{what}: no gold entities; recall set to 0"));
            0.0
        } else {
            matched as f64 / n_gold as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
            n_gold,
            n_pred,
            n_matched: matched,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EntityScores {
    pub overall: Prf,
    pub per_type: BTreeMap<String, Prf>,
    pub diagnostics: Vec<String>,
}

/// Chunks one tag sequence into entity spans.
pub fn extract_spans(tags: &[BioTag]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<(String, usize)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let starts = match (tag, &open) {
            (BioTag::O, _) => false,
            (BioTag::B(_), _) => true,
            (BioTag::I(t), Some((ot, _))) => t != ot,
            (BioTag::I(_), None) => true,
        };
        if *tag == BioTag::O || starts {
            if let Some((ty, s)) = open.take() {
                spans.push((ty, s, i - 1));
            }
        }
        if starts {
            open = Some((tag.entity_type().unwrap().to_string(), i));
        }
    }
    if let Some((ty, s)) = open {
        spans.push((ty, s, tags.len() - 1));
    }
    spans
}

/// Overall and per-type entity scores over aligned sentences.
pub fn entity_prf(gold: &[Vec<BioTag>], pred: &[Vec<BioTag>]) -> Result<EntityScores> {
    if gold.len() != pred.len() {
        return Err(Error::Alignment(format!(
            "{} gold sentences vs {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    let mut gold_set: BTreeSet<(usize, Span)> = BTreeSet::new();
    let mut pred_set: BTreeSet<(usize, Span)> = BTreeSet::new();
    for (s, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.len() != p.len() {
            return Err(Error::Alignment(format!(
                "sentence {s}: {} gold tags vs {} predicted",
                g.len(),
                p.len()
            )));
        }
        gold_set.extend(extract_spans(g).into_iter().map(|sp| (s, sp)));
        pred_set.extend(extract_spans(p).into_iter().map(|sp| (s, sp)));
    }
    let matched: BTreeSet<_> = gold_set.intersection(&pred_set).collect();
    let mut diagnostics = Vec::new();
    let overall = Prf::from_counts(matched.len(), pred_set.len(), gold_set.len(), "overall", &mut diagnostics);
    let types: BTreeSet<&String> = gold_set.iter().chain(&pred_set).map(|(_, sp)| &sp.0).collect();
    let mut per_type = BTreeMap::new();
    for ty in types {
        let count = |set: &BTreeSet<(usize, Span)>| set.iter().filter(|(_, sp)| &sp.0 == ty).count();
        let m = matched.iter().filter(|(_, sp)| &sp.0 == ty).count();
        let mut sink = Vec::new();
        per_type.insert(
            ty.clone(),
            Prf::from_counts(m, count(&pred_set), count(&gold_set), ty, &mut sink),
        );
    }
    for d in &diagnostics {
        log::debug!("{d}");
    }
    Ok(EntityScores {
        overall,
        per_type,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tags(s: &str) -> Vec<BioTag> {
        s.split_whitespace().map(|t| t.parse().unwrap()).collect()
    }

    #[test]
    fn identical_is_perfect() {
        let g = vec![tags("B-PER I-PER O B-LOC")];
        let r = entity_prf(&g, &g).unwrap();
        assert_eq!((r.overall.precision, r.overall.recall, r.overall.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn half_matched() {
        let g = vec![tags("B-PER O B-LOC O")];
        let p = vec![tags("B-PER O O B-LOC")];
        let r = entity_prf(&g, &p).unwrap().overall;
        assert_eq!((r.precision, r.recall, r.f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn no_predictions() {
        let g = vec![tags("B-PER O")];
        let p = vec![tags("O O")];
        let r = entity_prf(&g, &p).unwrap();
        assert_eq!((r.overall.precision, r.overall.recall, r.overall.f1), (0.0, 0.0, 0.0));
        assert!(!r.diagnostics.is_empty());
    }

    #[test]
    fn lenient_chunking() {
        assert_eq!(
            extract_spans(&tags("I-LOC I-LOC B-LOC I-PER O I-ORG")),
            vec![
                ("LOC".to_string(), 0, 1),
                ("LOC".to_string(), 2, 2),
                ("PER".to_string(), 3, 3),
                ("ORG".to_string(), 5, 5)
            ]
        );
    }

    #[test]
    fn type_mismatch_counts_as_miss() {
        let g = vec![tags("B-PER I-PER")];
        let p = vec![tags("B-LOC I-LOC")];
        let r = entity_prf(&g, &p).unwrap();
        assert_eq!(r.overall.f1, 0.0);
        assert_eq!(r.per_type["PER"].recall, 0.0);
        assert_eq!(r.per_type["LOC"].n_pred, 1);
    }

    /// Span `[s, e]` of type `t` is an entity when a chunk of `t` opens at
    /// `s`, every later tag up to `e` is `I-t`, and the chunk ends at `e`.
    fn brute_spans(tags: &[BioTag]) -> Vec<Span> {
        let ty = |i: usize| tags[i].entity_type().map(str::to_string);
        let opens = |i: usize, t: &str| match &tags[i] {
            BioTag::B(x) => x == t,
            BioTag::I(x) => x == t && (i == 0 || ty(i - 1).as_deref() != Some(t)),
            BioTag::O => false,
        };
        let cont = |i: usize, t: &str| tags[i] == BioTag::I(t.to_string());
        let mut out = Vec::new();
        for s in 0..tags.len() {
            for e in s..tags.len() {
                let Some(t) = ty(s) else { continue };
                if opens(s, &t) && (s + 1..=e).all(|i| cont(i, &t)) && (e + 1 == tags.len() || !cont(e + 1, &t)) {
                    out.push((t, s, e));
                }
            }
        }
        out
    }

    fn brute_prf(gold: &[Vec<BioTag>], pred: &[Vec<BioTag>]) -> (f64, f64, f64) {
        let (mut m, mut np, mut ng) = (0usize, 0usize, 0usize);
        for (g, p) in gold.iter().zip(pred) {
            let gs = brute_spans(g);
            let ps = brute_spans(p);
            ng += gs.len();
            np += ps.len();
            m += ps.iter().filter(|x| gs.contains(x)).count();
        }
        let p = if np == 0 { 0.0 } else { m as f64 / np as f64 };
        let r = if ng == 0 { 0.0 } else { m as f64 / ng as f64 };
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        (p, r, f)
    }

    fn tag_strategy() -> impl Strategy<Value = BioTag> {
        prop_oneof![
            Just(BioTag::O),
            prop::sample::select(vec!["PER", "LOC"]).prop_map(|t| BioTag::B(t.into())),
            prop::sample::select(vec!["PER", "LOC"]).prop_map(|t| BioTag::I(t.into())),
        ]
    }

    proptest! {
        #[test]
        fn matches_brute_force_spans(
            pairs in prop::collection::vec(
                (1usize..=30).prop_flat_map(|n| (
                    prop::collection::vec(tag_strategy(), n),
                    prop::collection::vec(tag_strategy(), n),
                )),
                1..4,
            )
        ) {
            let (gold, pred): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let r = entity_prf(&gold, &pred).unwrap().overall;
            prop_assert_eq!((r.precision, r.recall, r.f1), brute_prf(&gold, &pred));
            // harmonic mean lies between P and R, up to rounding
            let slack = f64::EPSILON * 4.0;
            prop_assert!(r.f1 <= r.precision.max(r.recall) + slack);
            prop_assert!(r.f1 + slack >= r.precision.min(r.recall));
            for g in &gold {
                prop_assert_eq!(extract_spans(g), brute_spans(g));
            }
        }
    }

    #[test]
    fn misaligned_inputs() {
        assert!(matches!(
            entity_prf(&[tags("O")], &[tags("O O")]),
            Err(Error::Alignment(_))
        ));
        assert!(matches!(entity_prf(&[tags("O")], &[]), Err(Error::Alignment(_))));
    }
}
