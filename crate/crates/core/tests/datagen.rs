use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use srki::datagen::{
    alias_perturb, encode_sequence, generate_corpus, sample_batch, DataSpec, Mix, QaCounts, QaType, VocabSpec, REFUSAL,
};
use srki::kb::{EntryKind, TextEncoder};
use srki::model::Vocab;

fn spec(seed: u64) -> DataSpec {
    DataSpec {
        vocab: VocabSpec { subjects: 15, relations: 8, objects: 25, aliases: 2, seed },
        triples: 70,
        distractors: 20,
        test_fraction: 0.2,
        train_counts: QaCounts { single: 30, multi_same: 10, multi_diff: 10, unanswerable: 10 },
        test_counts: QaCounts { single: 10, multi_same: 5, multi_diff: 5, unanswerable: 5 },
        id_len: 2,
        seed,
    }
}

#[test]
fn corpus_splits_are_disjoint_and_valid() {
    let enc = TextEncoder::new(8, 1);
    let c = generate_corpus(&spec(3), &enc).unwrap();
    assert_eq!(c.kb.len(), 2 * c.triples.len());
    let train: HashSet<usize> = c.train_triples.iter().copied().collect();
    assert!(c.test_triples.iter().all(|t| !train.contains(t)));
    assert_eq!(c.train_triples.len() + c.test_triples.len(), 70);
    for (qa, allowed) in [(&c.train, &c.train_triples), (&c.test, &c.test_triples)] {
        for ex in qa.iter() {
            ex.validate().unwrap();
            for (&f, &r) in ex.factual_indices.iter().zip(&ex.reference_indices) {
                assert!(allowed.contains(&f));
                assert_eq!(c.kb.partner(f), Some(r));
                assert_eq!(c.kb.entry(f).kind, EntryKind::Factual);
                assert_eq!(c.kb.entry(r).kind, EntryKind::ReferenceId);
            }
            if ex.qa_type == QaType::Unanswerable {
                assert_eq!(ex.answer, REFUSAL);
            }
        }
    }
    let words = c.lexicon.words();
    let vocab = Vocab::new(words.iter().map(String::as_str));
    for ex in c.train.iter().chain(&c.test) {
        encode_sequence(&vocab, &ex.question, &ex.answer).unwrap();
    }
}

#[test]
fn corpus_is_seed_deterministic() {
    let enc = TextEncoder::new(8, 1);
    let a = generate_corpus(&spec(5), &enc).unwrap();
    let b = generate_corpus(&spec(5), &enc).unwrap();
    let c = generate_corpus(&spec(6), &enc).unwrap();
    assert_eq!(a.train, b.train);
    assert_eq!(a.triples, b.triples);
    assert_ne!(a.triples, c.triples);
}

#[test]
fn batch_pool_holds_every_correct_entry_in_pairs() {
    let enc = TextEncoder::new(8, 1);
    let c = generate_corpus(&spec(7), &enc).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let b = sample_batch(&c.train, &c.kb, 40, 6, Mix::default(), &mut rng).unwrap();
        assert_eq!(b.pool.len(), 40);
        assert_eq!(b.source.len(), 40);
        for ex in &b.examples {
            for i in ex.correct() {
                assert!(i < b.pool.len());
            }
            for (&f, &r) in ex.factual_indices.iter().zip(&ex.reference_indices) {
                assert_eq!(c.kb.partner(b.source[f]), Some(b.source[r]));
            }
        }
        let factual = b.source.iter().filter(|&&s| c.kb.entry(s).kind == EntryKind::Factual).count();
        assert_eq!(factual, 20);
    }
}

#[test]
fn alias_perturbation_keeps_answers() {
    let enc = TextEncoder::new(8, 1);
    let c = generate_corpus(&spec(9), &enc).unwrap();
    let perturbed = alias_perturb(&c.test, &c.lexicon, 2);
    assert_eq!(perturbed.len(), c.test.len());
    let mut changed = 0;
    for (a, b) in c.test.iter().zip(&perturbed) {
        assert_eq!(a.answer, b.answer);
        assert_eq!(a.correct(), b.correct());
        changed += usize::from(a.question != b.question);
    }
    assert!(changed > 0);
}
