use proptest::prelude::*;
use srki::retrieval::{build_plan, compression_ratio, topk_indices, CompressionMode, CompressionPolicy};

fn scores(layers: usize, m: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, m), layers)
}

fn case() -> impl Strategy<Value = (usize, usize, usize, usize, Vec<Vec<f64>>, u64)> {
    (1usize..=5, 1usize..=30)
        .prop_flat_map(|(l, m)| (Just(l), Just(m), 1..=m, 0..l, scores(l, m), any::<u64>()))
}

proptest! {
    #[test]
    fn topk_is_sorted_distinct_and_sized(v in prop::collection::vec(-5.0f64..5.0, 0..50), k in 0usize..60) {
        let top = topk_indices(&v, k);
        prop_assert_eq!(top.len(), k.min(v.len()));
        prop_assert!(top.windows(2).all(|w| v[w[0]] >= v[w[1]]));
        let mut uniq = top.clone();
        uniq.sort_unstable();
        uniq.dedup();
        prop_assert_eq!(uniq.len(), top.len());
        if let Some(&last) = top.last() {
            prop_assert!(v.iter().enumerate().filter(|(i, _)| !top.contains(i)).all(|(_, x)| *x <= v[last]));
        }
    }

    #[test]
    fn plans_follow_their_mode((l, m, k, rl, s, seed) in case()) {
        let none = build_plan(&s, &CompressionPolicy::none(), seed).unwrap();
        prop_assert!(none.layers.iter().all(|x| x.len() == m));

        let per = build_plan(&s, &CompressionPolicy::new(CompressionMode::PerLayer, k, rl), seed).unwrap();
        for (layer, rows) in per.layers.iter().enumerate() {
            prop_assert_eq!(rows, &topk_indices(&s[layer], k));
        }

        let reuse = build_plan(&s, &CompressionPolicy::new(CompressionMode::Reuse, k, rl), seed).unwrap();
        for layer in 0..l {
            let want = topk_indices(&s[layer.min(rl)], k);
            prop_assert_eq!(&reuse.layers[layer], &want);
        }
        prop_assert_eq!(reuse.distinct_from(rl), k);

        let random = build_plan(&s, &CompressionPolicy::new(CompressionMode::RandomPreRetrieval, k, rl), seed).unwrap();
        prop_assert!(random.layers.iter().all(|x| x.len() == k));
        prop_assert!(random.layers[rl..].iter().all(|x| x == &topk_indices(&s[rl], k)));
        let again = build_plan(&s, &CompressionPolicy::new(CompressionMode::RandomPreRetrieval, k, rl), seed).unwrap();
        prop_assert_eq!(random, again);
    }

    #[test]
    fn compression_ratio_is_one_minus_fraction(m in 1usize..100_000, frac in 0.0f64..=1.0) {
        let k = ((m as f64) * frac) as usize;
        let r = compression_ratio(m, k).unwrap();
        prop_assert!((0.0..=1.0).contains(&r));
        prop_assert!((r - (1.0 - k as f64 / m as f64)).abs() < 1e-15);
    }
}

#[test]
fn keeping_more_than_the_pool_is_an_error() {
    assert!(compression_ratio(10, 11).is_err());
    assert!(compression_ratio(0, 0).is_err());
}
