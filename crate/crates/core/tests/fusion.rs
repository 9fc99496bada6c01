use proptest::prelude::*;
use sdrc_core::cpc::{Metric, ScoreStack};
use sdrc_core::fusion::{self, FusionWeights};
use sdrc_core::rng::SplitMix64;
use sdrc_core::Tensor;

fn random(dims: &[usize], seed: u64) -> Tensor {
    let mut rng = SplitMix64::new(seed);
    Tensor::from_fn(dims.to_vec(), |_| rng.uniform(-1.0, 1.0) as f32)
}

fn stack(l: usize, n: usize, seed: u64) -> ScoreStack {
    ScoreStack { maps: random(&[l * l, 2, n, n], seed), metric: Metric::Cosine, components: l }
}

#[test]
fn source_fusion_is_the_pair_mean() {
    let s = stack(2, 3, 1);
    let fused = fusion::fuse_source(&s).unwrap();
    for ch in 0..2 {
        for y in 0..3 {
            for x in 0..3 {
                let total: f64 = (0..4).map(|p| s.maps.at(&[p, ch, y, x]) as f64).sum();
                assert!((fused.at(&[ch, y, x]) as f64 - total / 4.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn afw_fusion_matches_weighted_loop() {
    let s = stack(3, 2, 2);
    let w = FusionWeights::from_tensor(random(&[9, 2], 3)).unwrap();
    let fused = fusion::fuse_afw(&s, &w).unwrap();
    for ch in 0..2 {
        for y in 0..2 {
            for x in 0..2 {
                let total: f64 = (0..9).map(|p| w.w.at(&[p, ch]) as f64 * s.maps.at(&[p, ch, y, x]) as f64).sum();
                assert!((fused.at(&[ch, y, x]) as f64 - total / 9.0).abs() < 1e-6);
            }
        }
    }
    assert_eq!(fusion::fuse_afw(&s, &FusionWeights::ones(3)).unwrap(), fusion::fuse_source(&s).unwrap());
    assert!(fusion::fuse_afw(&s, &FusionWeights::ones(2)).is_err());
    assert!(FusionWeights::from_tensor(Tensor::ones([5, 2])).is_err());
}

#[test]
fn loss_examples() {
    let half = Tensor::full([2, 2, 2], 0.5);
    let target = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    assert!((fusion::bce_loss(&half, &target).unwrap() - std::f64::consts::LN_2).abs() < 1e-7);
    assert_eq!(fusion::total_loss(0.5, 2.0, 0.1).unwrap(), 0.5 + 0.2);
    assert!(fusion::total_loss(0.5, 2.0, -0.1).is_err());
    assert!(fusion::bce_loss(&half, &Tensor::zeros([3, 3])).is_err());
}

#[test]
fn miou_examples() {
    let a = Tensor::new([2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
    assert_eq!(fusion::miou(&a, &a).unwrap().mean, 1.0);
    let all_bg = Tensor::zeros([2, 2]);
    assert_eq!(fusion::miou(&all_bg, &all_bg).unwrap().mean, 1.0);
    let flipped = Tensor::new([2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
    assert_eq!(fusion::miou(&a, &flipped).unwrap().mean, 0.0);
    assert!(fusion::miou(&a, &Tensor::zeros([4])).is_err());
}

#[test]
fn predict_rejects_bad_arguments() {
    let c = random(&[2, 4, 4], 1);
    assert!(fusion::predict(&c, 2, 2, 10.0).is_err());
    assert!(fusion::predict(&c, 8, 8, 0.0).is_err());
    assert!(fusion::predict(&random(&[3, 4, 4], 1), 8, 8, 10.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn prediction_properties(seed in any::<u64>(), n in 1usize..5, scale in 1usize..4, t in 0.1f64..50.0) {
        let c = random(&[2, n, n], seed);
        let (h, w) = (n * scale, n * scale + 1);
        let pred = fusion::predict(&c, h, w, t).unwrap();
        let base = fusion::predict(&c, h, w, 1.0).unwrap();
        prop_assert_eq!(&pred.labels, &base.labels);
        for i in 0..h * w {
            let (bg, fg) = (pred.probs.data()[i] as f64, pred.probs.data()[h * w + i] as f64);
            prop_assert!((bg + fg - 1.0).abs() < 1e-6);
            let label = pred.labels.data()[i];
            prop_assert!(label == 0.0 || label == 1.0);
            // argmax agreement wherever the probabilities are clearly apart
            if (fg - bg).abs() > 1e-5 {
                prop_assert_eq!(label == 1.0, fg > bg);
            }
        }
    }

    #[test]
    fn bce_is_nonnegative(seed in any::<u64>(), n in 1usize..5) {
        let mut rng = SplitMix64::new(seed);
        let fg = Tensor::from_fn([n * n], |_| rng.next_f64() as f32);
        let probs = Tensor::from_fn([2, n, n], |i| if i < n * n { 1.0 - fg.data()[i] } else { fg.data()[i - n * n] });
        let target = Tensor::from_fn([n, n], |_| (rng.next_f64() < 0.5) as u8 as f32);
        prop_assert!(fusion::bce_loss(&probs, &target).unwrap() >= 0.0);
    }

    #[test]
    fn total_loss_monotone_in_orth(bce in 0.0f64..5.0, a in 0.0f64..10.0, b in 0.0f64..10.0, lambda in 0.0f64..2.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(fusion::total_loss(bce, lo, lambda).unwrap() <= fusion::total_loss(bce, hi, lambda).unwrap());
    }

    #[test]
    fn upsample_rows_are_partitions_of_unity(gh in 1usize..5, gw in 1usize..5, sy in 1usize..4, sx in 1usize..4) {
        let (h, w) = (gh * sy, gw * sx);
        let u = fusion::upsample_matrix(gh, gw, h, w);
        for col in 0..h * w {
            let total: f64 = (0..gh * gw).map(|r| u.at(&[r, col]) as f64).sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
        }
    }
}
