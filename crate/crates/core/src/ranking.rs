//! Concept rankings over neurons, grouped saliency and per-layer summaries.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::activations::ActivationMatrix;
use crate::corpus::BinaryLabels;
use crate::error::{Error, Result};
use crate::model::PruneMask;

/// Name given to the complement class in binary label streams.
pub const OTHER_CLASS: &str = "other";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMeans {
    pub classes: Vec<String>,
    /// `q(z)` per class, same order as `classes`.
    pub means: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

impl ClassMeans {
    pub fn class_index(&self, z: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == z)
    }
}

/// Per-class mean activation vectors, accumulated in f64 in row order.
///
/// `labels[r]` indexes into `classes`.
pub fn class_mean_vectors(m: &ActivationMatrix, labels: &[usize], classes: &[String]) -> Result<ClassMeans> {
    if labels.len() != m.n_rows {
        return Err(Error::Alignment(format!(
            "{} labels for {} activation rows",
            labels.len(),
            m.n_rows
        )));
    }
    let mut sums = vec![vec![0.0f64; m.n_cols]; classes.len()];
    let mut counts = vec![0usize; classes.len()];
    for (r, &z) in labels.iter().enumerate() {
        let sum = sums
            .get_mut(z)
            .ok_or_else(|| Error::Alignment(format!("label {z} at row {r} has no class name")))?;
        for (s, &v) in sum.iter_mut().zip(m.row(r)) {
            *s += v as f64;
        }
        counts[z] += 1;
    }
    if let Some(z) = counts.iter().position(|&c| c == 0) {
        return Err(Error::ClassSupport(classes[z].clone()));
    }
    let means = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| s.into_iter().map(|x| x / c as f64).collect())
        .collect();
    Ok(ClassMeans {
        classes: classes.to_vec(),
        means,
        counts,
    })
}

/// Class means for a concept-vs-rest split. Class 0 is the concept.
pub fn binary_class_means(m: &ActivationMatrix, labels: &BinaryLabels, concept: &str) -> Result<ClassMeans> {
    let ids: Vec<usize> = labels.labels.iter().map(|&b| usize::from(!b)).collect();
    class_mean_vectors(m, &ids, &[concept.to_string(), OTHER_CLASS.to_string()])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronRanking {
    pub concept: String,
    /// Neuron ids, most relevant first.
    pub order: Vec<usize>,
    /// Score per neuron id (not per rank).
    pub scores: Vec<f64>,
    #[serde(default)]
    pub diagnostics: Vec<String>,
}

impl NeuronRanking {
    /// Builds the order from scores: descending, ties by ascending id.
    pub fn from_scores(concept: &str, scores: Vec<f64>) -> Result<Self> {
        if let Some(j) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::Numeric(format!("neuron {j} has a non-finite score")));
        }
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
        Ok(Self {
            concept: concept.to_string(),
            order,
            scores,
            diagnostics: Vec::new(),
        })
    }

    /// Same ranking restricted to neurons satisfying `keep`.
    pub fn restricted(&self, keep: impl Fn(usize) -> bool) -> Self {
        Self {
            order: self.order.iter().copied().filter(|&j| keep(j)).collect(),
            ..self.clone()
        }
    }

    /// Rank position of every neuron id present in the order.
    pub fn positions(&self) -> Vec<Option<usize>> {
        let mut pos = vec![None; self.scores.len()];
        for (r, &j) in self.order.iter().enumerate() {
            pos[j] = Some(r);
        }
        pos
    }
}

/// `r(z) = Σ_{z'≠z} |q(z) − q(z')|`, with the sum taken in class order.
pub fn probeless_rank(means: &ClassMeans, z: &str) -> Result<NeuronRanking> {
    if means.classes.len() < 2 {
        return Err(Error::Ranking("at least two classes are needed".into()));
    }
    let zi = means
        .class_index(z)
        .ok_or_else(|| Error::Ranking(format!("class `{z}` not present")))?;
    let q = &means.means[zi];
    let mut r = vec![0.0f64; q.len()];
    for (k, other) in means.means.iter().enumerate() {
        if k == zi {
            continue;
        }
        for (rj, (a, b)) in r.iter_mut().zip(q.iter().zip(other)) {
            *rj += (a - b).abs();
        }
    }
    NeuronRanking::from_scores(z, r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyTable {
    pub group_size: usize,
    pub groups: usize,
    /// Per neuron id; `None` for neurons left out of the grouping.
    pub saliency: Vec<Option<f64>>,
}

/// Chunks the ranking into `G = ceil(N / group_size)` groups; group `g`
/// scores `(G − g) / G`.
pub fn saliency_scores(
    ranking: &NeuronRanking,
    group_size: usize,
    alive_only: bool,
    mask: &PruneMask,
) -> Result<SaliencyTable> {
    if group_size == 0 {
        return Err(Error::Config("saliency group_size must be >= 1".into()));
    }
    let order: Vec<usize> = ranking
        .order
        .iter()
        .copied()
        .filter(|&j| !alive_only || mask.is_alive(j))
        .collect();
    let groups = order.len().div_ceil(group_size);
    let mut saliency = vec![None; ranking.scores.len()];
    for (r, &j) in order.iter().enumerate() {
        let g = r / group_size;
        saliency[j] = Some((groups - g) as f64 / groups as f64);
    }
    Ok(SaliencyTable {
        group_size,
        groups,
        saliency,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: usize,
    pub alive: usize,
    pub salient: usize,
    /// `None` when the layer has no alive neurons.
    pub mean_saliency: Option<f64>,
    pub pct_salient: Option<f64>,
}

/// Per layer: share of alive neurons whose saliency exceeds `threshold`,
/// normalised across layers to percentages.
pub fn layer_saliency_summary(table: &SaliencyTable, mask: &PruneMask, threshold: f64) -> Result<Vec<LayerSummary>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("threshold {threshold} outside [0, 1]")));
    }
    let d = mask.width();
    if table.saliency.len() != mask.n_layers_plus_1() * d {
        return Err(Error::Dimension(format!(
            "saliency table covers {} neurons, mask {}",
            table.saliency.len(),
            mask.n_layers_plus_1() * d
        )));
    }
    let mut out = Vec::with_capacity(mask.n_layers_plus_1());
    for l in 0..mask.n_layers_plus_1() {
        let mut alive = 0;
        let mut salient = 0;
        let mut sum = 0.0;
        for i in 0..d {
            let j = l * d + i;
            if !mask.is_alive(j) {
                continue;
            }
            let s = table.saliency[j]
                .ok_or_else(|| Error::Completeness(format!("alive neuron {j} has no saliency")))?;
            alive += 1;
            sum += s;
            if s > threshold {
                salient += 1;
            }
        }
        out.push(LayerSummary {
            layer: l,
            alive,
            salient,
            mean_saliency: (alive > 0).then(|| sum / alive as f64),
            pct_salient: None,
        });
    }
    let w: Vec<Option<f64>> = out
        .iter()
        .map(|s| (s.alive > 0).then(|| s.salient as f64 / s.alive as f64))
        .collect();
    let total: f64 = w.iter().flatten().sum();
    for (s, w) in out.iter_mut().zip(w) {
        s.pct_salient = w.map(|w| if total > 0.0 { 100.0 * w / total } else { 0.0 });
    }
    Ok(out)
}

/// Spearman correlation between two orderings of the same neuron set.
pub fn spearman(a: &[usize], b: &[usize]) -> Result<f64> {
    let n = a.len();
    let mut pos_b = std::collections::HashMap::with_capacity(n);
    for (r, &j) in b.iter().enumerate() {
        pos_b.insert(j, r);
    }
    if b.len() != n || pos_b.len() != n {
        return Err(Error::Alignment("orderings differ in length or repeat ids".into()));
    }
    if n < 2 {
        return Ok(1.0);
    }
    let mut d2 = 0.0;
    for (ra, j) in a.iter().enumerate() {
        let rb = *pos_b
            .get(j)
            .ok_or_else(|| Error::Alignment(format!("neuron {j} missing from second ordering")))?;
        d2 += (ra as f64 - rb as f64).powi(2);
    }
    let n = n as f64;
    Ok(1.0 - 6.0 * d2 / (n * (n * n - 1.0)))
}

/// Fraction of the first `k` ids shared by both orderings.
pub fn top_k_overlap(a: &[usize], b: &[usize], k: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    let top_b: std::collections::HashSet<&usize> = b.iter().take(k).collect();
    a.iter().take(k).filter(|j| top_b.contains(j)).count() as f64 / k as f64
}

/// CSV `neuron_id,layer,index,score,rank,saliency`, one row per ranked neuron.
pub fn ranking_csv(ranking: &NeuronRanking, table: Option<&SaliencyTable>, d: usize) -> String {
    let mut out = String::from("neuron_id,layer,index,score,rank,saliency\n");
    for (rank, &j) in ranking.order.iter().enumerate() {
        let sal = table
            .and_then(|t| t.saliency[j])
            .map(|s| format!("{s}"))
            .unwrap_or_default();
        let _ = writeln!(out, "{j},{},{},{},{},{sal}", j / d, j % d, ranking.scores[j], rank + 1);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn matrix(rows: Vec<Vec<f32>>) -> ActivationMatrix {
        let n = rows[0].len();
        let meta = (0..rows.len())
            .map(|i| crate::activations::TokenMeta {
                sentence: 0,
                position: i,
                text: format!("t{i}"),
                tag: "O".into(),
                concepts: vec![],
            })
            .collect();
        ActivationMatrix::new(1, n, rows.concat(), meta, [0; 32]).unwrap()
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn class_means_by_hand() {
        let m = matrix(vec![vec![1.0, 3.0], vec![3.0, 5.0]]);
        let q = class_mean_vectors(&m, &[0, 0], &names(1)).unwrap();
        assert_eq!(q.means[0], vec![2.0, 4.0]);
        let q = class_mean_vectors(&m, &[0, 1], &names(2)).unwrap();
        assert_eq!(q.means, vec![vec![1.0, 3.0], vec![3.0, 5.0]]);
        assert!(matches!(
            class_mean_vectors(&m, &[0, 0], &names(2)),
            Err(Error::ClassSupport(c)) if c == "c1"
        ));
    }

    #[test]
    fn probeless_by_hand() {
        let means = ClassMeans {
            classes: vec!["A".into(), "B".into()],
            means: vec![vec![2.0, 0.0, 2.0], vec![0.0, 0.0, 2.0]],
            counts: vec![1, 1],
        };
        let r = probeless_rank(&means, "A").unwrap();
        assert_eq!(r.scores, vec![2.0, 0.0, 0.0]);
        assert_eq!(r.order, vec![0, 1, 2]);
        assert_eq!(probeless_rank(&means, "B").unwrap().order, r.order);

        let flat = ClassMeans {
            means: vec![vec![1.0; 4], vec![1.0; 4]],
            ..means.clone()
        };
        assert_eq!(probeless_rank(&flat, "A").unwrap().order, vec![0, 1, 2, 3]);

        let single = ClassMeans {
            classes: vec!["A".into()],
            means: vec![vec![1.0]],
            counts: vec![1],
        };
        assert!(matches!(probeless_rank(&single, "A"), Err(Error::Ranking(_))));
    }

    #[test]
    fn saliency_groups() {
        let r = NeuronRanking::from_scores("x", (0..500).map(|i| -(i as f64)).collect()).unwrap();
        let mask = PruneMask::all_alive(5, 100);
        let t = saliency_scores(&r, 100, true, &mask).unwrap();
        assert_eq!(t.groups, 5);
        let mut vals: Vec<f64> = t.saliency.iter().flatten().copied().collect();
        vals.dedup();
        assert_eq!(vals, vec![1.0, 0.8, 0.6, 0.4, 0.2]);
        assert_eq!(t.saliency[r.order[36]], Some(1.0));

        let r = NeuronRanking::from_scores("x", vec![5.0, 4.0, 3.0, 2.0, 1.0]).unwrap();
        let t = saliency_scores(&r, 2, true, &PruneMask::all_alive(1, 5)).unwrap();
        assert_eq!(t.groups, 3);
        assert_eq!(t.saliency[4], Some(1.0 / 3.0));
        assert_eq!(t.saliency[2], Some(2.0 / 3.0));
        let t = saliency_scores(&r, 10, true, &PruneMask::all_alive(1, 5)).unwrap();
        assert!(t.saliency.iter().all(|s| *s == Some(1.0)));
    }

    #[test]
    fn alive_only_skips_pruned() {
        let r = NeuronRanking::from_scores("x", vec![5.0, 4.0, 3.0, 2.0]).unwrap();
        let mask = PruneMask::from_pruned(1, 4, [0]).unwrap();
        let t = saliency_scores(&r, 1, true, &mask).unwrap();
        assert_eq!(t.saliency, vec![None, Some(1.0), Some(2.0 / 3.0), Some(1.0 / 3.0)]);
        let t = saliency_scores(&r, 1, false, &mask).unwrap();
        assert_eq!(t.saliency[0], Some(1.0));
    }

    #[test]
    fn layer_pct_by_hand() {
        // layer 0: 1 of 4 salient, layer 1: 3 of 4
        let sal = [0.9, 0.1, 0.1, 0.1, 0.9, 0.9, 0.9, 0.1];
        let table = SaliencyTable {
            group_size: 1,
            groups: 8,
            saliency: sal.iter().map(|&s| Some(s)).collect(),
        };
        let s = layer_saliency_summary(&table, &PruneMask::all_alive(2, 4), 0.5).unwrap();
        assert!((s[0].pct_salient.unwrap() - 25.0).abs() < 1e-12);
        assert!((s[1].pct_salient.unwrap() - 75.0).abs() < 1e-12);
        assert!((s[0].mean_saliency.unwrap() - 0.3).abs() < 1e-12);

        let mask = PruneMask::from_pruned(2, 4, [0, 1, 2, 3]).unwrap();
        let s = layer_saliency_summary(&table, &mask, 0.5).unwrap();
        assert_eq!(s[0].pct_salient, None);
        assert_eq!(s[1].pct_salient, Some(100.0));
    }

    #[test]
    fn base_distribution_column_sums_to_100() {
        let col: [f64; 7] = [12.28, 11.36, 10.35, 11.41, 13.51, 19.01, 22.08];
        assert!((col.iter().sum::<f64>() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn spearman_and_overlap() {
        assert_eq!(spearman(&[0, 1, 2, 3], &[0, 1, 2, 3]).unwrap(), 1.0);
        assert_eq!(spearman(&[0, 1, 2, 3], &[3, 2, 1, 0]).unwrap(), -1.0);
        assert_eq!(top_k_overlap(&[0, 1, 2, 3], &[1, 0, 3, 2], 2), 1.0);
        assert_eq!(top_k_overlap(&[0, 1, 2, 3], &[2, 3, 0, 1], 2), 0.0);
    }

    #[test]
    fn ranking_csv_layout() {
        let r = NeuronRanking::from_scores("x", vec![0.5, 2.0, 1.0, 0.0]).unwrap();
        let t = saliency_scores(&r, 2, false, &PruneMask::all_alive(2, 2)).unwrap();
        let csv = ranking_csv(&r, Some(&t), 2);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "neuron_id,layer,index,score,rank,saliency");
        assert_eq!(lines[1], "1,0,1,2,1,1");
        assert_eq!(lines[4], "3,1,1,0,4,0.5");
    }

    fn brute_force_eq1(rows: &[Vec<f32>], labels: &[usize], n_labels: usize, z: usize) -> Vec<f64> {
        let n = rows[0].len();
        let mut q = vec![vec![0.0f64; n]; n_labels];
        let mut c = vec![0usize; n_labels];
        for (row, &l) in rows.iter().zip(labels) {
            c[l] += 1;
            for j in 0..n {
                q[l][j] += row[j] as f64;
            }
        }
        for l in 0..n_labels {
            for j in 0..n {
                q[l][j] /= c[l] as f64;
            }
        }
        let mut r = vec![0.0; n];
        for zp in 0..n_labels {
            if zp != z {
                for j in 0..n {
                    r[j] += (q[z][j] - q[zp][j]).abs();
                }
            }
        }
        r
    }

    fn instance() -> impl Strategy<Value = (Vec<Vec<f32>>, Vec<usize>, usize)> {
        (2usize..=4, 1usize..=50, 1usize..=50).prop_flat_map(|(k, n_rows, n_cols)| {
            let rows = prop::collection::vec(prop::collection::vec(-10.0f32..10.0, n_cols), n_rows.max(k));
            let labels = prop::collection::vec(0..k, n_rows.max(k)).prop_map(move |mut l| {
                // every class gets at least one row
                for (z, slot) in l.iter_mut().take(k).enumerate() {
                    *slot = z;
                }
                l
            });
            (rows, labels, Just(k))
        })
    }

    proptest! {
        #[test]
        fn probeless_equals_brute_force((rows, labels, k) in instance(), z_seed in 0usize..4) {
            let z = z_seed % k;
            let m = matrix(rows.clone());
            let means = class_mean_vectors(&m, &labels, &names(k)).unwrap();
            let r = probeless_rank(&means, &format!("c{z}")).unwrap();
            let oracle = brute_force_eq1(&rows, &labels, k, z);
            prop_assert_eq!(
                r.scores.iter().map(|s| s.to_bits()).collect::<Vec<_>>(),
                oracle.iter().map(|s| s.to_bits()).collect::<Vec<_>>()
            );
        }

        #[test]
        fn ranking_is_a_permutation_with_monotone_saliency((rows, labels, k) in instance(), g in 1usize..8) {
            let m = matrix(rows);
            let means = class_mean_vectors(&m, &labels, &names(k)).unwrap();
            let r = probeless_rank(&means, "c0").unwrap();
            let mut sorted = r.order.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..m.n_cols).collect::<Vec<_>>());
            for w in r.order.windows(2) {
                prop_assert!(r.scores[w[0]] > r.scores[w[1]]
                    || (r.scores[w[0]] == r.scores[w[1]] && w[0] < w[1]));
            }
            let t = saliency_scores(&r, g, true, &PruneMask::all_alive(1, m.n_cols)).unwrap();
            for w in r.order.windows(2) {
                prop_assert!(t.saliency[w[0]] >= t.saliency[w[1]]);
            }
            prop_assert_eq!(t.saliency[r.order[0]], Some(1.0));
        }

        #[test]
        fn binary_labels_rank_identically((rows, labels, _k) in instance()) {
            let mut labels: Vec<usize> = labels.iter().map(|l| l % 2).collect();
            labels[0] = 0;
            labels[1] = 1;
            let m = matrix(rows);
            let means = class_mean_vectors(&m, &labels, &names(2)).unwrap();
            prop_assert_eq!(probeless_rank(&means, "c0").unwrap().order, probeless_rank(&means, "c1").unwrap().order);
        }

        #[test]
        fn column_scaling_scales_score((rows, labels, k) in instance(), col in 0usize..50, c in 1.5f32..4.0) {
            let col = col % rows[0].len();
            let base = probeless_rank(&class_mean_vectors(&matrix(rows.clone()), &labels, &names(k)).unwrap(), "c0").unwrap();
            let scaled_rows: Vec<Vec<f32>> = rows.iter().map(|r| {
                let mut r = r.clone();
                r[col] *= c;
                r
            }).collect();
            let scaled = probeless_rank(&class_mean_vectors(&matrix(scaled_rows), &labels, &names(k)).unwrap(), "c0").unwrap();
            let expected = base.scores[col] * c as f64;
            prop_assert!((scaled.scores[col] - expected).abs() <= 1e-5 * expected.max(1e-3));
            let rank = |r: &NeuronRanking| r.order.iter().position(|&j| j == col).unwrap();
            prop_assert!(rank(&scaled) <= rank(&base));
        }

        #[test]
        fn pct_sums_to_100(sal in prop::collection::vec(0.0f64..=1.0, 12), pruned in prop::collection::vec(0usize..12, 0..4)) {
            // index 0 of every layer stays alive
            let mask = PruneMask::from_pruned(3, 4, pruned.into_iter().filter(|j| j % 4 != 0)).unwrap();
            let mut sal = sal;
            sal[0] = 1.0;
            let table = SaliencyTable { group_size: 1, groups: 1, saliency: sal.into_iter().map(Some).collect() };
            let s = layer_saliency_summary(&table, &mask, 0.5).unwrap();
            let total: f64 = s.iter().map(|x| x.pct_salient.unwrap()).sum();
            prop_assert!((total - 100.0).abs() < 1e-6);
        }
    }
}
