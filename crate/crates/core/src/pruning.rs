//! Pruning masks from rankings or at random, and their application.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{PruneMask, TaggerModel};
use crate::ranking::NeuronRanking;
use crate::tensor::Scalar;

/// Prunes the first `floor(fraction · N)` neurons of the ranking, where `N`
/// is the ranking length. Neurons outside the ranking stay alive.
pub fn build_mask(ranking: &NeuronRanking, fraction: f64, n_layers_plus_1: usize, d: usize) -> Result<PruneMask> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("prune fraction {fraction} outside [0, 1]")));
    }
    let count = (fraction * ranking.order.len() as f64).floor() as usize;
    PruneMask::from_pruned(n_layers_plus_1, d, ranking.order[..count].iter().copied())
}

/// Uniform sample of `count` neurons from `pool` (default: every neuron).
pub fn random_mask(
    count: usize,
    n_layers_plus_1: usize,
    d: usize,
    seed: u64,
    pool: Option<&[usize]>,
) -> Result<PruneMask> {
    let all: Vec<usize>;
    let pool = match pool {
        Some(p) => p,
        None => {
            all = (0..n_layers_plus_1 * d).collect();
            &all
        }
    };
    if count > pool.len() {
        return Err(Error::Sizing(format!(
            "cannot prune {count} neurons from a pool of {}",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = sample(&mut rng, pool.len(), count);
    PruneMask::from_pruned(n_layers_plus_1, d, picked.into_iter().map(|i| pool[i]))
}

/// Combines `mask` with the model's current mask (elementwise minimum) and
/// zeroes the weights of every pruned unit.
pub fn apply_mask<T: Scalar>(model: &mut TaggerModel<T>, mask: &PruneMask) -> Result<()> {
    if mask.n_layers_plus_1() != model.config.n_layers + 1 || mask.width() != model.config.d_model {
        return Err(Error::Config(format!(
            "mask is {}x{}, model has {} layers of width {}",
            mask.n_layers_plus_1(),
            mask.width(),
            model.config.n_layers + 1,
            model.config.d_model
        )));
    }
    let combined = model.mask.intersect(mask)?;
    model.zero_masked_weights(&combined);
    model.mask = combined;
    Ok(())
}

/// Union of pruned sets (a neuron is pruned if pruned in any input).
pub fn union_masks(masks: &[PruneMask]) -> Result<PruneMask> {
    let (first, rest) = masks
        .split_first()
        .ok_or_else(|| Error::Config("no masks to combine".into()))?;
    rest.iter().try_fold(first.clone(), |acc, m| acc.intersect(m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::extract_activations;
    use crate::corpus::{generate_corpus, ConceptCorpus, CorpusSpec};
    use crate::model::{config_for_corpus, Batch, ModelConfig};
    use proptest::prelude::*;

    fn ranking(n: usize) -> NeuronRanking {
        NeuronRanking::from_scores("c", (0..n).map(|i| (n - i) as f64).collect()).unwrap()
    }

    fn fixture() -> (TaggerModel<f32>, ConceptCorpus) {
        let corpus = generate_corpus(&CorpusSpec::default_ner(5), 2).unwrap();
        let base = ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ffn: 16,
            max_len: 32,
            ..ModelConfig::default()
        };
        let (cfg, tags) = config_for_corpus(&base, &corpus);
        (TaggerModel::init(cfg, corpus.vocab().tokens().to_vec(), tags).unwrap(), corpus)
    }

    #[test]
    fn floor_rule() {
        assert_eq!(build_mask(&ranking(320), 0.5, 5, 64).unwrap().n_pruned(), 160);
        assert_eq!(build_mask(&ranking(320), 0.0, 5, 64).unwrap().n_pruned(), 0);
        let m = build_mask(&ranking(5), 0.5, 1, 5).unwrap();
        assert_eq!(m.pruned_ids().into_iter().collect::<Vec<_>>(), vec![0, 1]);
        assert!(build_mask(&ranking(5), 1.5, 1, 5).is_err());
    }

    #[test]
    fn random_masks() {
        assert_eq!(random_mask(320, 5, 64, 1, None).unwrap().n_pruned(), 320);
        assert_eq!(random_mask(160, 5, 64, 9, None).unwrap(), random_mask(160, 5, 64, 9, None).unwrap());
        assert_ne!(random_mask(160, 5, 64, 9, None).unwrap(), random_mask(160, 5, 64, 10, None).unwrap());
        let pool = [3, 4, 5];
        let m = random_mask(2, 1, 8, 0, Some(&pool)).unwrap();
        assert!(m.pruned_ids().iter().all(|j| pool.contains(j)));
        assert!(matches!(random_mask(4, 1, 8, 0, Some(&pool)), Err(Error::Sizing(_))));
    }

    #[test]
    fn all_ones_mask_is_identity() {
        let (mut m, _) = fixture();
        let before = m.params.clone();
        let ones = PruneMask::for_config(&m.config);
        apply_mask(&mut m, &ones).unwrap();
        assert_eq!(m.params, before);
    }

    #[test]
    fn pruned_columns_are_zero_and_masking_matches_zeroing() {
        let (m, corpus) = fixture();
        let mask = PruneMask::from_pruned(3, 8, [2, 8 + 5, 16 + 7]).unwrap();
        let mut zeroed = m.clone();
        apply_mask(&mut zeroed, &mask).unwrap();
        let acts = extract_activations(&zeroed, &corpus).unwrap();
        for j in [2, 13, 23] {
            assert!(acts.column(j).all(|v| v.to_bits() == 0));
        }
        let mut masked_only = m.clone();
        masked_only.mask = mask;
        let batch = Batch::new(&[vec![0, 1, 2, 3], vec![4, 5]]);
        let a = masked_only.forward(&batch).unwrap().logits;
        let b = zeroed.forward(&batch).unwrap().logits;
        assert_eq!(
            a.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (mut m, _) = fixture();
        assert!(matches!(apply_mask(&mut m, &PruneMask::all_alive(2, 8)), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn idempotent_and_composes(a in prop::collection::vec(0usize..24, 0..10), b in prop::collection::vec(0usize..24, 0..10)) {
            let (m, _) = fixture();
            let ma = PruneMask::from_pruned(3, 8, a).unwrap();
            let mb = PruneMask::from_pruned(3, 8, b).unwrap();

            let mut once = m.clone();
            apply_mask(&mut once, &ma).unwrap();
            let mut twice = once.clone();
            apply_mask(&mut twice, &ma).unwrap();
            prop_assert_eq!(&once, &twice);

            let mut seq = once.clone();
            apply_mask(&mut seq, &mb).unwrap();
            let mut joint = m.clone();
            apply_mask(&mut joint, &ma.intersect(&mb).unwrap()).unwrap();
            prop_assert_eq!(seq, joint);
        }
    }
}
