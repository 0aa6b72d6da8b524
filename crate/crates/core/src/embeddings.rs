//! Token embeddings (PPMI + truncated SVD, or imported) and concept
//! similarity between HAT sets.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::ConceptCorpus;
use crate::error::{Error, Result};
use crate::hats::HatSet;
use crate::ranking::SaliencyTable;
use crate::stats::median;

pub const DEFAULT_DIM: usize = 64;
pub const DEFAULT_WINDOW: usize = 5;
const OVERSAMPLE: usize = 10;
const POWER_ITERS: usize = 4;
const SKETCH_SEED: u64 = 0x5EED_0E4B;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    CorpusTrained,
    Imported,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub provenance: Provenance,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    /// Unit-norm rows, `tokens.len() × dim`.
    vectors: Vec<f32>,
}

impl EmbeddingTable {
    /// Normalises every row; rows with zero norm are dropped with a warning.
    pub fn from_rows(dim: usize, provenance: Provenance, rows: Vec<(String, Vec<f64>)>) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Dimension(format!("embedding dim {dim} < 2")));
        }
        let mut table = Self {
            dim,
            provenance,
            tokens: Vec::new(),
            index: HashMap::new(),
            vectors: Vec::new(),
        };
        let mut dropped = 0;
        for (tok, v) in rows {
            if v.len() != dim {
                return Err(Error::Dimension(format!("`{tok}` has {} components, expected {dim}", v.len())));
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() || table.index.contains_key(&tok) {
                dropped += 1;
                continue;
            }
            table.index.insert(tok.clone(), table.tokens.len());
            table.tokens.push(tok);
            table.vectors.extend(v.iter().map(|x| (x / norm) as f32));
        }
        if dropped > 0 {
            log::warn!("{dropped} embedding rows dropped (zero norm or duplicate)");
        }
        Ok(table)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f32]> {
        self.index
            .get(token)
            .map(|&i| &self.vectors[i * self.dim..(i + 1) * self.dim])
    }

    pub fn cosine(&self, a: &str, b: &str) -> Option<f64> {
        let (x, y) = (self.get(a)?, self.get(b)?);
        Some(x.iter().zip(y).map(|(p, q)| f64::from(*p) * f64::from(*q)).sum())
    }

    /// Text form: `token v1 … vd` per line, preceded by a `count dim` header.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.len(), self.dim);
        for (i, t) in self.tokens.iter().enumerate() {
            s.push_str(t);
            for v in &self.vectors[i * self.dim..(i + 1) * self.dim] {
                let _ = write!(s, " {v}");
            }
            s.push('\n');
        }
        s
    }
}

/// Positive-PMI co-occurrence matrix (symmetric window) factorised by a
/// seeded randomized truncated SVD. Rows are `U·Σ^½`, unit-normalised.
pub fn train_embeddings(corpus: &ConceptCorpus, dim: usize, window: usize) -> Result<EmbeddingTable> {
    if corpus.n_tokens() == 0 {
        return Err(Error::Input("cannot train embeddings on an empty corpus".into()));
    }
    let vocab = corpus.vocab();
    let v = vocab.len();
    if dim > v {
        return Err(Error::Dimension(format!("dim {dim} exceeds vocabulary size {v}")));
    }
    if dim < 2 {
        return Err(Error::Dimension(format!("embedding dim {dim} < 2")));
    }
    let mut counts = DMatrix::<f64>::zeros(v, v);
    for sent in corpus.sentences() {
        let ids: Vec<usize> = sent
            .iter()
            .map(|t| vocab.id(&t.text).expect("corpus tokens are in its vocab"))
            .collect();
        for i in 0..ids.len() {
            for j in i + 1..ids.len().min(i + window + 1) {
                counts[(ids[i], ids[j])] += 1.0;
                counts[(ids[j], ids[i])] += 1.0;
            }
        }
    }
    let row_sums: Vec<f64> = counts.row_iter().map(|r| r.sum()).collect();
    let total: f64 = row_sums.iter().sum();
    let ppmi = DMatrix::from_fn(v, v, |i, j| {
        let c = counts[(i, j)];
        if c == 0.0 {
            0.0
        } else {
            (c * total / (row_sums[i] * row_sums[j])).ln().max(0.0)
        }
    });
    drop(counts);

    let k = (dim + OVERSAMPLE).min(v);
    let mut rng = ChaCha8Rng::seed_from_u64(SKETCH_SEED);
    let omega = DMatrix::<f64>::from_fn(v, k, |_, _| StandardNormal.sample(&mut rng));
    let mut y = &ppmi * omega;
    for _ in 0..POWER_ITERS {
        let q = y.qr().q();
        y = &ppmi * q;
    }
    let q = y.qr().q();
    let b = q.transpose() * &ppmi * &q;
    let b = (&b + b.transpose()) * 0.5;
    let eig = SymmetricEigen::new(b);
    let mut idx: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    idx.sort_by(|&a, &c| {
        eig.eigenvalues[c]
            .abs()
            .total_cmp(&eig.eigenvalues[a].abs())
            .then(a.cmp(&c))
    });
    idx.truncate(dim);
    let u = &q * &eig.eigenvectors;
    let rows = (0..v)
        .map(|i| {
            let vec = idx
                .iter()
                .map(|&c| u[(i, c)] * eig.eigenvalues[c].abs().sqrt())
                .collect();
            (vocab.tokens()[i].clone(), vec)
        })
        .collect();
    EmbeddingTable::from_rows(dim, Provenance::CorpusTrained, rows)
}

/// Parses the plain word-vector text format. A leading `count dim` line is
/// optional.
pub fn parse_word_vectors(text: &str) -> Result<EmbeddingTable> {
    let mut rows = Vec::new();
    let mut dim = None;
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if i == 0 && fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok()) {
            continue;
        }
        let parse_err = |m: String| Error::Parse { line: i + 1, message: m };
        let vals = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| parse_err(format!("bad number `{f}`"))))
            .collect::<Result<Vec<f64>>>()?;
        match dim {
            None => dim = Some(vals.len()),
            Some(d) if d != vals.len() => {
                return Err(parse_err(format!("{} components, expected {d}", vals.len())));
            }
            _ => {}
        }
        rows.push((fields[0].to_string(), vals));
    }
    let dim = dim.ok_or_else(|| Error::Input("no vectors in embedding file".into()))?;
    EmbeddingTable::from_rows(dim, Provenance::Imported, rows)
}

pub fn read_word_vectors(path: &Path) -> Result<EmbeddingTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_word_vectors(&text)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRecord {
    pub neuron: usize,
    pub similarity: Option<f64>,
    pub tokens_used_before: usize,
    pub tokens_used_after: usize,
    pub saliency: Option<f64>,
}

fn mean_vector(set: &HatSet, table: &EmbeddingTable, weighted: bool) -> (Option<Vec<f64>>, usize) {
    let mut acc = vec![0.0f64; table.dim];
    let mut used = 0;
    let mut wsum = 0.0;
    for e in &set.entries {
        if let Some(v) = table.get(&e.token) {
            let w = if weighted { e.score } else { 1.0 };
            for (a, x) in acc.iter_mut().zip(v) {
                *a += w * f64::from(*x);
            }
            used += 1;
            wsum += w;
        }
    }
    if used == 0 || wsum == 0.0 {
        return (None, used);
    }
    acc.iter_mut().for_each(|a| *a /= wsum);
    (Some(acc), used)
}

/// Cosine between the mean embeddings of two HAT sets. OOV tokens are
/// skipped; the result is undefined when either side has nothing to embed
/// or averages to the zero vector.
pub fn concept_similarity(before: &HatSet, after: &HatSet, table: &EmbeddingTable, weighted: bool) -> SimilarityRecord {
    let (a, na) = mean_vector(before, table, weighted);
    let (b, nb) = mean_vector(after, table, weighted);
    let similarity = a.zip(b).and_then(|(a, b)| {
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return None;
        }
        let c = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
        Some(c.clamp(-1.0, 1.0))
    });
    SimilarityRecord {
        neuron: after.neuron,
        similarity,
        tokens_used_before: na,
        tokens_used_after: nb,
        saliency: None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub neuron_id: usize,
    pub layer: usize,
    pub saliency: f64,
    pub similarity: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimilarityJoin {
    pub points: Vec<ScatterPoint>,
    /// hi-sal/hi-sim, hi-sal/lo-sim, lo-sal/hi-sim, lo-sal/lo-sim.
    pub quadrants: [usize; 4],
    /// Median defined similarity among neurons with saliency above threshold.
    pub median_high_saliency: Option<f64>,
}

/// Pairs each record with its neuron's saliency. "High" means strictly
/// above `threshold` on either axis; undefined similarities are kept as
/// points but left out of quadrants and the median.
pub fn similarity_saliency_join(
    records: &[SimilarityRecord],
    table: &SaliencyTable,
    d: usize,
    threshold: f64,
) -> SimilarityJoin {
    let mut out = SimilarityJoin::default();
    let mut high = Vec::new();
    for r in records {
        let Some(sal) = table.saliency.get(r.neuron).copied().flatten() else {
            continue;
        };
        out.points.push(ScatterPoint {
            neuron_id: r.neuron,
            layer: r.neuron / d,
            saliency: sal,
            similarity: r.similarity,
        });
        if let Some(sim) = r.similarity {
            let q = match (sal > threshold, sim > threshold) {
                (true, true) => 0,
                (true, false) => 1,
                (false, true) => 2,
                (false, false) => 3,
            };
            out.quadrants[q] += 1;
            if sal > threshold {
                high.push(sim);
            }
        }
    }
    out.median_high_saliency = median(&high);
    out
}

/// CSV `neuron_id,layer,saliency,similarity,defined`.
pub fn scatter_csv(join: &SimilarityJoin) -> String {
    let mut s = String::from("neuron_id,layer,saliency,similarity,defined\n");
    for p in &join.points {
        let sim = p.similarity.map(|x| format!("{x:.6}")).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{:.6},{sim},{}",
            p.neuron_id,
            p.layer,
            p.saliency,
            u8::from(p.similarity.is_some())
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{AnnotatedToken, BioTag};
    use crate::hats::HatEntry;
    use proptest::prelude::*;

    fn corpus(sents: &[&str]) -> ConceptCorpus {
        ConceptCorpus::new(
            sents
                .iter()
                .map(|s| {
                    s.split_whitespace()
                        .map(|w| AnnotatedToken {
                            text: w.into(),
                            tag: BioTag::O,
                            concepts: Default::default(),
                        })
                        .collect()
                })
                .collect(),
        )
        .unwrap()
    }

    fn hats(neuron: usize, toks: &[&str]) -> HatSet {
        HatSet {
            neuron,
            k: 5,
            entries: toks
                .iter()
                .map(|t| HatEntry {
                    token: t.to_string(),
                    score: 1.0,
                })
                .collect(),
            degenerate: false,
        }
    }

    fn table2d(rows: &[(&str, [f64; 2])]) -> EmbeddingTable {
        EmbeddingTable::from_rows(
            2,
            Provenance::Imported,
            rows.iter().map(|(t, v)| (t.to_string(), v.to_vec())).collect(),
        )
        .unwrap()
    }

    #[test]
    fn shared_contexts_embed_together() {
        let c = corpus(&[
            "the cat sat on a mat",
            "the dog sat on a mat",
            "a bird flew over the hill",
            "the fish swam under a rock",
            "a cat sat on the hill",
            "a dog sat on the hill",
            "the bird flew over a rock",
            "the fish swam under the mat",
        ]);
        let t = train_embeddings(&c, 6, 2).unwrap();
        assert!(t.cosine("cat", "dog").unwrap() >= 0.99);
        for tok in c.vocab().tokens() {
            let n: f64 = t.get(tok).unwrap().iter().map(|x| f64::from(*x).powi(2)).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-5);
        }
        assert!(t.get("zebra").is_none());
        assert!(matches!(train_embeddings(&c, 100, 2), Err(Error::Dimension(_))));
    }

    #[test]
    fn training_is_deterministic() {
        let c = corpus(&["a b c d", "b c d e", "c d e a", "d e a b"]);
        assert_eq!(train_embeddings(&c, 3, 2).unwrap(), train_embeddings(&c, 3, 2).unwrap());
    }

    #[test]
    fn similarity_by_hand() {
        let t = table2d(&[("x", [1.0, 0.0]), ("y", [0.0, 1.0]), ("z", [-1.0, 0.0])]);
        let r = concept_similarity(&hats(0, &["x"]), &hats(0, &["x", "y"]), &t, false);
        assert!((r.similarity.unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        let same = concept_similarity(&hats(0, &["x", "y"]), &hats(0, &["x", "y"]), &t, false);
        assert!((same.similarity.unwrap() - 1.0).abs() < 1e-12);
        let anti = concept_similarity(&hats(0, &["x"]), &hats(0, &["z"]), &t, false);
        assert_eq!(anti.similarity, Some(-1.0));
        let oov = concept_similarity(&hats(0, &["nope"]), &hats(0, &["x"]), &t, false);
        assert_eq!((oov.similarity, oov.tokens_used_before, oov.tokens_used_after), (None, 0, 1));
        let zero = concept_similarity(&hats(0, &["x", "z"]), &hats(0, &["x"]), &t, false);
        assert_eq!(zero.similarity, None);
    }

    #[test]
    fn weighted_mean_uses_scores() {
        let t = table2d(&[("x", [1.0, 0.0]), ("y", [0.0, 1.0])]);
        let mut h = hats(0, &["x", "y"]);
        h.entries[1].score = 0.0;
        let r = concept_similarity(&h, &hats(0, &["x"]), &t, true);
        assert!((r.similarity.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn importer() {
        let t = parse_word_vectors("2 3\nfoo 1 0 0\nbar 0 2 0\n").unwrap();
        assert_eq!((t.len(), t.dim, t.provenance), (2, 3, Provenance::Imported));
        assert_eq!(t.get("bar").unwrap(), &[0.0, 1.0, 0.0]);
        let headerless = parse_word_vectors("foo 1 0\nbar 0 1\n").unwrap();
        assert_eq!(headerless.len(), 2);
        assert!(matches!(
            parse_word_vectors("foo 1 0\nbar 0 1 2\n"),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn join_quadrants_and_median() {
        let mut sal = vec![None; 20];
        let mut recs = Vec::new();
        for j in 0..10 {
            sal[j] = Some(1.0);
            recs.push(SimilarityRecord {
                neuron: j,
                similarity: Some(0.9),
                tokens_used_before: 5,
                tokens_used_after: 5,
                saliency: None,
            });
        }
        for j in 10..12 {
            sal[j] = Some(0.2);
            recs.push(SimilarityRecord {
                neuron: j,
                similarity: Some(0.1),
                tokens_used_before: 5,
                tokens_used_after: 5,
                saliency: None,
            });
        }
        let table = SaliencyTable {
            group_size: 1,
            groups: 5,
            saliency: sal,
        };
        let j = similarity_saliency_join(&recs, &table, 8, 0.5);
        assert_eq!(j.quadrants, [10, 0, 0, 2]);
        assert_eq!(j.median_high_saliency, Some(0.9));
        assert_eq!(j.points[11].layer, 1);

        let empty = similarity_saliency_join(&[], &table, 8, 0.5);
        assert!(empty.points.is_empty() && empty.quadrants == [0; 4]);
        assert!(scatter_csv(&j).starts_with("neuron_id,layer,saliency,similarity,defined\n0,0,1.000000,0.900000,1\n"));
    }

    proptest! {
        #[test]
        fn cosine_symmetric_bounded_scale_invariant(
            vecs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0), 6),
            c in 0.1f64..10.0,
        ) {
            let rows: Vec<(String, Vec<f64>)> = vecs.iter().enumerate()
                .map(|(i, v)| (format!("t{i}"), vec![v.0, v.1, v.2])).collect();
            let scaled: Vec<(String, Vec<f64>)> = rows.iter()
                .map(|(t, v)| (t.clone(), v.iter().map(|x| x * c).collect())).collect();
            let t = EmbeddingTable::from_rows(3, Provenance::Imported, rows).unwrap();
            let ts = EmbeddingTable::from_rows(3, Provenance::Imported, scaled).unwrap();
            let a = hats(0, &["t0", "t1", "t2"]);
            let b = hats(0, &["t3", "t4", "t5"]);
            let ab = concept_similarity(&a, &b, &t, false).similarity;
            let ba = concept_similarity(&b, &a, &t, false).similarity;
            let abs = concept_similarity(&a, &b, &ts, false).similarity;
            match (ab, ba, abs) {
                (Some(x), Some(y), Some(z)) => {
                    prop_assert!((x - y).abs() < 1e-12);
                    prop_assert!((-1.0..=1.0).contains(&x));
                    prop_assert!((x - z).abs() < 1e-5);
                }
                (x, y, _) => prop_assert_eq!(x, y),
            }
        }
    }
}
