use dcl::data::{decode_features, decode_labels, encode_features, encode_labels};
use dcl::eval::{clustering_accuracy, drop_indices, hungarian_match};
use dcl::features::{FeatureMatrix, FeatureNorm};
use dcl::info::{conditional_entropy, entropy, kl_to_uniform, marginal};
use dcl::Tensor;
use proptest::prelude::*;

fn stochastic_rows(max_k: usize) -> impl Strategy<Value = Tensor<f64>> {
    (2..=max_k, 1..12usize).prop_flat_map(|(k, b)| {
        prop::collection::vec(0.0f64..1.0, k * b).prop_map(move |raw| {
            let mut v = raw;
            for row in v.chunks_mut(k) {
                let s: f64 = row.iter().sum::<f64>() + 1e-9;
                row.iter_mut().for_each(|x| *x = (*x + 1e-9 / k as f64) / s);
            }
            Tensor::new(vec![b, k], v).unwrap()
        })
    })
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for at in 0..=p.len() {
            let mut q = p.clone();
            q.insert(at, k - 1);
            out.push(q);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn kl_entropy_identity(p in stochastic_rows(8)) {
        let k = p.shape()[1] as f64;
        let pbar = marginal(&p).unwrap();
        prop_assert!((kl_to_uniform(&pbar) - (k.ln() - entropy(&pbar))).abs() <= 1e-9);
        prop_assert!(conditional_entropy(&p).unwrap() >= 0.0);
        prop_assert!(entropy(&pbar) <= k.ln() + 1e-12);
    }

    #[test]
    fn hungarian_matches_brute_force(k in 1..6usize, seed in any::<u64>()) {
        let mut s = seed | 1;
        let mut next = || { s ^= s << 13; s ^= s >> 7; s ^= s << 17; (s % 50) as f64 };
        let cost: Vec<Vec<f64>> = (0..k).map(|_| (0..k).map(|_| next()).collect()).collect();
        let m = hungarian_match(&cost).unwrap();
        let got: f64 = (0..k).map(|r| cost[r][m[r]]).sum();
        let best = permutations(k).iter().map(|p| (0..k).map(|r| cost[r][p[r]]).sum::<f64>()).fold(f64::INFINITY, f64::min);
        prop_assert_eq!(got, best);
    }

    #[test]
    fn accuracy_is_invariant_to_cluster_relabelling(truth in prop::collection::vec(0..4usize, 1..60), shift in 0..4usize) {
        let pred: Vec<usize> = truth.iter().map(|&t| (t + shift) % 4).collect();
        prop_assert_eq!(clustering_accuracy(&pred, &truth).unwrap().acc, 1.0);
    }

    #[test]
    fn feature_and_label_files_round_trip(rows in 1..20usize, dim in 1..10usize, seed in any::<u64>()) {
        let values: Vec<f32> = (0..rows * dim).map(|i| ((i as u64 ^ seed) % 1000) as f32 / 7.0 - 50.0).collect();
        let f = FeatureMatrix { values: Tensor::new(vec![rows, dim], values).unwrap(), dropout_rate: 0.1, seed };
        let back = decode_features(&encode_features(&f).unwrap()).unwrap();
        prop_assert_eq!(back.values.data(), f.values.data());
        prop_assert_eq!(back.seed, seed);
        let labels: Vec<usize> = (0..rows).map(|i| (i * 7 + seed as usize % 5) % 9).collect();
        prop_assert_eq!(decode_labels(&encode_labels(&labels)).unwrap(), labels);
    }

    #[test]
    fn standardized_columns_have_zero_mean(rows in 2..30usize, dim in 1..6usize, seed in any::<u64>()) {
        let values: Vec<f32> = (0..rows * dim).map(|i| ((i as u64).wrapping_mul(seed | 1) % 97) as f32).collect();
        let m = Tensor::new(vec![rows, dim], values).unwrap();
        let (o, s) = FeatureNorm::Standardize.fit(&m);
        let z = FeatureNorm::apply(&m, &o, &s).unwrap();
        for c in 0..dim {
            let mean: f64 = z.data().iter().skip(c).step_by(dim).map(|&v| v as f64).sum::<f64>() / rows as f64;
            prop_assert!(mean.abs() < 1e-4);
        }
    }

    #[test]
    fn drop_indices_removes_the_requested_share(n in 10..200usize, frac in 0.0..0.6f64, seed in any::<u64>()) {
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let keep = drop_indices(&labels, &[1], frac, seed).unwrap();
        let ones = labels.iter().filter(|&&l| l == 1).count();
        let kept_ones = keep.iter().filter(|&&i| labels[i] == 1).count();
        prop_assert_eq!(ones - kept_ones, (ones as f64 * frac).round() as usize);
        prop_assert_eq!(keep.len(), n - (ones - kept_ones));
        prop_assert!(keep.windows(2).all(|w| w[0] < w[1]));
    }
}
