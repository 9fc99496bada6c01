use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use sdrc_core::episodes::{self, Dataset, DomainSpec, Sample};
use sdrc_core::Tensor;

/// Tiny dataset with the given number of samples per class; images encode
/// their own index so clones can be traced back.
fn toy(sizes: &[usize]) -> Dataset {
    let mut samples = Vec::new();
    for (class, &n) in sizes.iter().enumerate() {
        for _ in 0..n {
            let idx = samples.len() as f32;
            samples.push(Sample {
                class_id: 10 + class as u32,
                image: Tensor::full([1, 2, 2], idx),
                mask: Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap(),
            });
        }
    }
    Dataset { samples }
}

#[test]
fn class_draws_are_uniform_over_eligible_classes() {
    // class 12 has only one sample and can never host a 1-shot episode
    let data = toy(&[3, 7, 1, 4]);
    let draws = 10_000;
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for ep in episodes::sample_episodes(&data, 1, 77, draws).unwrap() {
        *counts.entry(ep.class_id).or_default() += 1;
    }
    assert!(!counts.contains_key(&12));
    let p = 1.0 / 3.0;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for class in [10, 11, 13] {
        let c = counts[&class] as f64;
        assert!((c - draws as f64 * p).abs() < 3.0 * sigma, "class {class}: {c}");
    }
}

#[test]
fn largest_k_uses_every_sample_of_the_class() {
    let data = toy(&[5, 5]);
    for seed in 0..20 {
        let ep = episodes::sample_episode(&data, 4, seed).unwrap();
        let set: BTreeSet<usize> = ep.indices.iter().copied().collect();
        assert_eq!(set.len(), 5);
        assert!(ep.indices.iter().all(|&i| data.samples[i].class_id == ep.class_id));
    }
    assert!(episodes::sample_episode(&data, 5, 0).is_err());
    assert!(episodes::sample_episode(&data, 0, 0).is_err());
}

#[test]
fn episode_samples_match_indices() {
    let data = toy(&[4, 4, 4]);
    let ep = episodes::sample_episode(&data, 2, 5).unwrap();
    assert_eq!(ep.shots(), 2);
    for (s, &i) in ep.supports.iter().zip(&ep.indices) {
        assert_eq!(s, &data.samples[i]);
    }
    assert_eq!(ep.query, data.samples[ep.indices[2]]);
}

#[test]
fn source_and_target_labels_are_disjoint() {
    let src = episodes::generate_domain(&DomainSpec::source(), 4, 2).unwrap();
    let tgt = episodes::generate_domain(&DomainSpec::target(), 4, 2).unwrap();
    let a: BTreeSet<u32> = src.class_ids().into_iter().collect();
    let b: BTreeSet<u32> = tgt.class_ids().into_iter().collect();
    assert!(a.is_disjoint(&b));
    for s in src.samples.iter().chain(&tgt.samples) {
        let fg = s.mask.data().iter().filter(|&&v| v == 1.0).count();
        assert!(fg > 0 && fg < s.mask.len());
        assert!(s.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(s.image.dims(), &[1, 32, 32]);
    }
}

#[test]
fn generation_rejects_tiny_domains() {
    assert!(episodes::generate_domain(&DomainSpec::source(), 1, 4).is_err());
    assert!(episodes::generate_domain(&DomainSpec::source(), 4, 1).is_err());
    let bad = DomainSpec { height: 0, ..DomainSpec::source() };
    assert!(episodes::generate_domain(&bad, 2, 2).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn episodes_are_well_formed(seed in any::<u64>(), k in 1usize..5, sizes in prop::collection::vec(1usize..8, 2..6)) {
        let data = toy(&sizes);
        match episodes::sample_episode(&data, k, seed) {
            Ok(ep) => {
                prop_assert_eq!(ep.indices.len(), k + 1);
                let set: BTreeSet<usize> = ep.indices.iter().copied().collect();
                prop_assert_eq!(set.len(), k + 1);
                prop_assert!(ep.indices.iter().all(|&i| data.samples[i].class_id == ep.class_id));
                prop_assert!(data.indices_of(ep.class_id).len() > k);
                prop_assert_eq!(episodes::sample_episode(&data, k, seed).unwrap(), ep);
            }
            Err(_) => prop_assert!(sizes.iter().all(|&n| n <= k)),
        }
    }
}
