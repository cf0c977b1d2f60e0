use srki::eval::{chance_recall, exact_match, id_accuracy, memory_model, recall_at_k, recall_at_top, refusal_accuracy};
use srki::retrieval::{CompressionMode, CompressionPolicy};

fn s(v: &[&str]) -> Vec<String> {
    v.iter().map(|x| x.to_string()).collect()
}

#[test]
fn recall_family() {
    let ranked = [4, 9, 1, 7, 3];
    assert_eq!(recall_at_k(&ranked, &[9, 3], 2).unwrap(), 0.5);
    assert_eq!(recall_at_top(&ranked, &[9, 4]).unwrap(), 1.0);
    assert_eq!(recall_at_top(&ranked, &[9, 1]).unwrap(), 0.0);
    assert_eq!(recall_at_top(&ranked, &[4, 9, 1, 7]).unwrap(), 1.0);
    assert!(recall_at_top(&ranked, &[4]).is_err());
}

#[test]
fn answer_metrics() {
    assert_eq!(id_accuracy("sala [QX] and tomo [B]", &s(&["QX", "B"])), 1.0);
    assert_eq!(id_accuracy("sala [QXZ]", &s(&["QX"])), 0.0);
    assert_eq!(exact_match("it is sala [Q]", &s(&["sala"])), 1.0);
    assert_eq!(exact_match("it is sal", &s(&["sala"])), 0.0);
    assert_eq!(refusal_accuracy("UNKNOWN"), 1.0);
    assert_eq!(refusal_accuracy("UNKNOWN [Q]"), 0.0);
    assert_eq!(refusal_accuracy("sala"), 0.0);
}

#[test]
fn chance_recall_matches_enumeration() {
    // Pool of 6 with 2 correct, k = 3: enumerate all placements.
    let (m, c, k) = (6usize, 2usize, 3usize);
    let mut vals = Vec::new();
    for a in 0..m {
        for b in a + 1..m {
            vals.push([a, b].iter().filter(|&&x| x < k).count() as f64 / c as f64);
        }
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
    let (mu, v) = chance_recall(m, c, k);
    assert!((mu - mean).abs() < 1e-12 && (v - var).abs() < 1e-12, "{mu} {v} vs {mean} {var}");
}

#[test]
fn memory_reuse_never_exceeds_none() {
    for m in [100usize, 1000, 10_000] {
        let none = memory_model(m, 16, 32, 4, &CompressionPolicy::none(), 500).unwrap();
        for mode in [CompressionMode::PerLayer, CompressionMode::Reuse, CompressionMode::RandomPreRetrieval] {
            let e = memory_model(m, 16, 32, 4, &CompressionPolicy::new(mode, 50, 2), 500).unwrap();
            assert!(e.post_selection_steady <= none.post_selection_steady);
            assert!(e.pre_selection_peak >= e.post_selection_steady);
        }
    }
}
