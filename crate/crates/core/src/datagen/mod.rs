//! Synthetic lexicon, triples and QA corpus.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kb::{build_kb, random_label, KbStore, TextEncoder, Triple};
use crate::model::Vocab;

/// Answer for questions whose fact is not in the KB.
pub const REFUSAL: &str = "UNKNOWN";

/// Words used by the question and answer templates.
pub const TEMPLATE_WORDS: [&str; 6] = ["what", "is", "are", "the", "of", "and"];

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub subjects: usize,
    pub relations: usize,
    pub objects: usize,
    /// Aliases generated for every subject and relation.
    pub aliases: usize,
    pub seed: u64,
}

impl VocabSpec {
    pub fn validate(&self) -> Result<()> {
        if self.subjects < 2 || self.relations < 2 || self.objects < 2 {
            return Err(Error::Config("subject, relation and object pools need at least 2 terms".into()));
        }
        Ok(())
    }

    pub fn capacity(&self) -> usize {
        self.subjects * self.relations
    }
}

/// Term pools drawn from a seeded pseudo-word generator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    pub subjects: Vec<String>,
    pub relations: Vec<String>,
    pub objects: Vec<String>,
    pub aliases: BTreeMap<String, Vec<String>>,
}

impl Lexicon {
    pub fn from_spec(spec: &VocabSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x1e81_c0de);
        let mut used = HashSet::new();
        let mut fresh = |n: usize, rng: &mut ChaCha8Rng| -> Vec<String> {
            let mut out = Vec::with_capacity(n);
            while out.len() < n {
                let w: String = (0..3)
                    .flat_map(|_| {
                        let c = CONSONANTS[rng.random_range(0..CONSONANTS.len())];
                        let v = VOWELS[rng.random_range(0..VOWELS.len())];
                        [char::from(c), char::from(v)]
                    })
                    .collect();
                if used.insert(w.clone()) {
                    out.push(w);
                }
            }
            out
        };
        let subjects = fresh(spec.subjects, &mut rng);
        let relations = fresh(spec.relations, &mut rng);
        let objects = fresh(spec.objects, &mut rng);
        let mut aliases = BTreeMap::new();
        for term in subjects.iter().chain(&relations) {
            aliases.insert(term.clone(), fresh(spec.aliases, &mut rng));
        }
        Ok(Self { subjects, relations, objects, aliases })
    }

    /// Every word the templates can produce, in a fixed order.
    pub fn words(&self) -> Vec<String> {
        let mut out: Vec<String> = TEMPLATE_WORDS.iter().map(|s| s.to_string()).collect();
        out.push(REFUSAL.to_string());
        out.extend(self.subjects.iter().cloned());
        out.extend(self.relations.iter().cloned());
        out.extend(self.objects.iter().cloned());
        for term in self.subjects.iter().chain(&self.relations) {
            out.extend(self.aliases[term].iter().cloned());
        }
        out
    }
}

/// `count` triples with distinct (subject, relation) pairs and uniform objects.
pub fn generate_triples(count: usize, spec: &VocabSpec) -> Result<Vec<Triple>> {
    let lex = Lexicon::from_spec(spec)?;
    generate_triples_from(count, &lex, spec.seed)
}

pub fn generate_triples_from(count: usize, lex: &Lexicon, seed: u64) -> Result<Vec<Triple>> {
    let cap = lex.subjects.len() * lex.relations.len();
    if count == 0 {
        return Err(Error::Invalid("triple count must be at least 1".into()));
    }
    if count > cap {
        return Err(Error::Invalid(format!("{count} triples requested but only {cap} distinct pairs exist")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = lex.relations.len();
    sample(&mut rng, cap, count)
        .into_iter()
        .map(|p| {
            let o = &lex.objects[rng.random_range(0..lex.objects.len())];
            Triple::new(lex.subjects[p / r].clone(), lex.relations[p % r].clone(), o.clone())
        })
        .collect()
}

/// (subject, relation) pairs with no triple.
pub fn absent_pairs(lex: &Lexicon, triples: &[Triple]) -> Vec<(String, String)> {
    let present: HashSet<(&str, &str)> = triples.iter().map(|t| (t.subject.as_str(), t.relation.as_str())).collect();
    let mut out = Vec::new();
    for s in &lex.subjects {
        for r in &lex.relations {
            if !present.contains(&(s.as_str(), r.as_str())) {
                out.push((s.clone(), r.clone()));
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QaType {
    Single,
    MultiSame,
    MultiDiff,
    Unanswerable,
}

impl QaType {
    pub const ALL: [QaType; 4] = [QaType::Single, QaType::MultiSame, QaType::MultiDiff, QaType::Unanswerable];

    pub fn name(self) -> &'static str {
        match self {
            QaType::Single => "single",
            QaType::MultiSame => "multi_same",
            QaType::MultiDiff => "multi_diff",
            QaType::Unanswerable => "unanswerable",
        }
    }

    pub fn is_multi(self) -> bool {
        matches!(self, QaType::MultiSame | QaType::MultiDiff)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaExample {
    pub question: String,
    pub answer: String,
    pub qa_type: QaType,
    pub factual_indices: Vec<usize>,
    pub reference_indices: Vec<usize>,
}

impl QaExample {
    /// Factual and reference indices together.
    pub fn correct(&self) -> Vec<usize> {
        self.factual_indices.iter().chain(&self.reference_indices).copied().collect()
    }

    pub fn validate(&self) -> Result<()> {
        let (f, r) = (self.factual_indices.len(), self.reference_indices.len());
        let want = match self.qa_type {
            QaType::Single => 1,
            QaType::MultiSame | QaType::MultiDiff => 2,
            QaType::Unanswerable => 0,
        };
        if f != want || (r != want && r != 0) {
            return Err(Error::Invalid(format!(
                "{} example has {f} factual and {r} reference indices",
                self.qa_type.name()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaCounts {
    pub single: usize,
    pub multi_same: usize,
    pub multi_diff: usize,
    pub unanswerable: usize,
}

impl QaCounts {
    pub fn total(&self) -> usize {
        self.single + self.multi_same + self.multi_diff + self.unanswerable
    }
}

pub fn single_question(relation: &str, subject: &str) -> String {
    format!("what is the {relation} of {subject} ?")
}

pub fn multi_same_question(r1: &str, r2: &str, subject: &str) -> String {
    format!("what are the {r1} and {r2} of {subject} ?")
}

pub fn multi_diff_question(r1: &str, s1: &str, r2: &str, s2: &str) -> String {
    format!("what are the {r1} of {s1} and the {r2} of {s2} ?")
}

fn answer_part(object: &str, label: Option<&str>) -> String {
    match label {
        Some(l) => format!("{object} [{l}]"),
        None => object.to_string(),
    }
}

/// Label of the reference entry paired with factual entry `i`, if any.
fn label_of(kb: &KbStore, i: usize) -> Option<(usize, String)> {
    let p = kb.partner(i)?;
    kb.entry(p).id_label.clone().map(|l| (p, l))
}

/// QA examples over the factual entries `allowed` of `kb` and the absent
/// pairs `absent`.
pub fn generate_qa(
    kb: &KbStore,
    allowed: &[usize],
    absent: &[(String, String)],
    counts: QaCounts,
    seed: u64,
) -> Result<Vec<QaExample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for &i in allowed {
        if i >= kb.len() || kb.entry(i).kind != crate::kb::EntryKind::Factual {
            return Err(Error::Invalid(format!("entry {i} is not a factual KB entry")));
        }
    }
    let mut out = Vec::with_capacity(counts.total());
    let fact = |i: usize| -> (Vec<usize>, Vec<usize>, String) {
        let t = &kb.entry(i).triple;
        match label_of(kb, i) {
            Some((p, l)) => (vec![i], vec![p], answer_part(&t.object, Some(&l))),
            None => (vec![i], vec![], answer_part(&t.object, None)),
        }
    };

    if counts.single > 0 && allowed.is_empty() {
        return Err(Error::Invalid("no triples available for single-entity questions".into()));
    }
    for _ in 0..counts.single {
        let i = allowed[rng.random_range(0..allowed.len())];
        let t = &kb.entry(i).triple;
        let (f, r, a) = fact(i);
        out.push(QaExample {
            question: single_question(&t.relation, &t.subject),
            answer: a,
            qa_type: QaType::Single,
            factual_indices: f,
            reference_indices: r,
        });
    }

    if counts.multi_same > 0 {
        let mut by_subject: HashMap<&str, Vec<usize>> = HashMap::new();
        for &i in allowed {
            by_subject.entry(kb.entry(i).triple.subject.as_str()).or_default().push(i);
        }
        let mut groups: Vec<Vec<usize>> = by_subject.into_values().filter(|g| g.len() >= 2).collect();
        groups.sort();
        if groups.is_empty() {
            return Err(Error::Invalid("no subject has two relations for same-subject questions".into()));
        }
        for _ in 0..counts.multi_same {
            let g = &groups[rng.random_range(0..groups.len())];
            let pick = sample(&mut rng, g.len(), 2);
            let (a, b) = (g[pick.index(0)], g[pick.index(1)]);
            let (ta, tb) = (&kb.entry(a).triple, &kb.entry(b).triple);
            let (fa, ra, aa) = fact(a);
            let (fb, rb, ab) = fact(b);
            out.push(QaExample {
                question: multi_same_question(&ta.relation, &tb.relation, &ta.subject),
                answer: format!("{aa} and {ab}"),
                qa_type: QaType::MultiSame,
                factual_indices: [fa, fb].concat(),
                reference_indices: [ra, rb].concat(),
            });
        }
    }

    for _ in 0..counts.multi_diff {
        let two_subjects = allowed.iter().any(|&i| kb.entry(i).triple.subject != kb.entry(allowed[0]).triple.subject);
        if !two_subjects {
            return Err(Error::Invalid("two different subjects are needed for cross-subject questions".into()));
        }
        let (a, b) = loop {
            let pick = sample(&mut rng, allowed.len(), 2);
            let (a, b) = (allowed[pick.index(0)], allowed[pick.index(1)]);
            if kb.entry(a).triple.subject != kb.entry(b).triple.subject {
                break (a, b);
            }
        };
        let (ta, tb) = (&kb.entry(a).triple, &kb.entry(b).triple);
        let (fa, ra, aa) = fact(a);
        let (fb, rb, ab) = fact(b);
        out.push(QaExample {
            question: multi_diff_question(&ta.relation, &ta.subject, &tb.relation, &tb.subject),
            answer: format!("{aa} and {ab}"),
            qa_type: QaType::MultiDiff,
            factual_indices: [fa, fb].concat(),
            reference_indices: [ra, rb].concat(),
        });
    }

    if counts.unanswerable > 0 && absent.is_empty() {
        return Err(Error::Invalid("no absent pairs for unanswerable questions".into()));
    }
    for _ in 0..counts.unanswerable {
        let (s, r) = &absent[rng.random_range(0..absent.len())];
        out.push(QaExample {
            question: single_question(r, s),
            answer: REFUSAL.to_string(),
            qa_type: QaType::Unanswerable,
            factual_indices: vec![],
            reference_indices: vec![],
        });
    }
    Ok(out)
}

/// Replaces subject and relation words in each question by a random alias
/// (or the term itself). Answers and indices are untouched.
pub fn alias_perturb(qa: &[QaExample], lex: &Lexicon, seed: u64) -> Vec<QaExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    qa.iter()
        .map(|ex| {
            let words: Vec<String> = ex
                .question
                .split(' ')
                .map(|w| match lex.aliases.get(w) {
                    Some(al) if !al.is_empty() => {
                        let j = rng.random_range(0..=al.len());
                        if j == al.len() { w.to_string() } else { al[j].clone() }
                    }
                    _ => w.to_string(),
                })
                .collect();
            QaExample { question: words.join(" "), ..ex.clone() }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub vocab: VocabSpec,
    /// Triples that questions are asked about.
    pub triples: usize,
    /// Extra KB-only triples that only ever serve as negatives.
    #[serde(default)]
    pub distractors: usize,
    pub test_fraction: f64,
    pub train_counts: QaCounts,
    pub test_counts: QaCounts,
    pub id_len: usize,
    pub seed: u64,
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        self.vocab.validate()?;
        if self.triples == 0 {
            return Err(Error::Config("data needs at least one triple".into()));
        }
        if self.triples + self.distractors > self.vocab.capacity() {
            return Err(Error::Config(format!(
                "{} triples and {} distractors exceed the {} distinct pairs",
                self.triples,
                self.distractors,
                self.vocab.capacity()
            )));
        }
        if !(0.0 < self.test_fraction && self.test_fraction < 1.0) {
            return Err(Error::Config(format!("test_fraction {} must lie in (0, 1)", self.test_fraction)));
        }
        if self.id_len == 0 {
            return Err(Error::Config("id_len must be at least 1".into()));
        }
        Ok(())
    }
}

/// Everything generated from a [`DataSpec`].
#[derive(Clone, Debug)]
pub struct Corpus {
    pub lexicon: Lexicon,
    /// Question triples first, then distractors.
    pub triples: Vec<Triple>,
    /// KB universe: factual entry `i` and its reference entry `i + triples.len()`.
    pub kb: KbStore,
    pub train_triples: Vec<usize>,
    pub test_triples: Vec<usize>,
    pub train: Vec<QaExample>,
    pub test: Vec<QaExample>,
}

pub fn generate_corpus(spec: &DataSpec, encoder: &TextEncoder) -> Result<Corpus> {
    spec.validate()?;
    let lexicon = Lexicon::from_spec(&spec.vocab)?;
    let triples = generate_triples_from(spec.triples + spec.distractors, &lexicon, spec.seed)?;
    let kb = build_kb(&triples, true, spec.seed.wrapping_add(1), encoder, spec.id_len)?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(2));
    let mut order: Vec<usize> = (0..spec.triples).collect();
    order.shuffle(&mut rng);
    let n_test = ((spec.triples as f64 * spec.test_fraction).round() as usize).clamp(1, spec.triples - 1);
    let mut test_triples = order[..n_test].to_vec();
    let mut train_triples = order[n_test..].to_vec();
    test_triples.sort_unstable();
    train_triples.sort_unstable();

    let mut absent = absent_pairs(&lexicon, &triples);
    absent.shuffle(&mut rng);
    let n_abs_test = ((absent.len() as f64 * spec.test_fraction).round() as usize).min(absent.len());
    let (abs_test, abs_train) = absent.split_at(n_abs_test);

    let train = generate_qa(&kb, &train_triples, abs_train, spec.train_counts, spec.seed.wrapping_add(3))?;
    let test = generate_qa(&kb, &test_triples, abs_test, spec.test_counts, spec.seed.wrapping_add(4))?;
    Ok(Corpus { lexicon, triples, kb, train_triples, test_triples, train, test })
}

/// Probability of each QA family in a training batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mix {
    pub single: f64,
    pub multi: f64,
    pub unanswerable: f64,
}

impl Default for Mix {
    fn default() -> Self {
        Self { single: 0.4, multi: 0.4, unanswerable: 0.2 }
    }
}

/// Training examples plus the shared KB pool they were injected with.
#[derive(Clone, Debug)]
pub struct Batch {
    /// Examples with indices remapped into `pool`.
    pub examples: Vec<QaExample>,
    pub pool: KbStore,
    /// Universe index of each pool row.
    pub source: Vec<usize>,
}

/// Samples a batch by QA family, then builds one pool with every correct
/// entry plus uniformly drawn negative triples (both entries of each),
/// shuffled.
pub fn sample_batch<R: Rng>(
    dataset: &[QaExample],
    kb: &KbStore,
    m_train: usize,
    batch_size: usize,
    mix: Mix,
    rng: &mut R,
) -> Result<Batch> {
    if batch_size == 0 {
        return Err(Error::Invalid("batch size must be at least 1".into()));
    }
    let families: [Vec<usize>; 3] = [
        (0..dataset.len()).filter(|&i| dataset[i].qa_type == QaType::Single).collect(),
        (0..dataset.len()).filter(|&i| dataset[i].qa_type.is_multi()).collect(),
        (0..dataset.len()).filter(|&i| dataset[i].qa_type == QaType::Unanswerable).collect(),
    ];
    let weights = [mix.single, mix.multi, mix.unanswerable];
    let total: f64 = weights.iter().zip(&families).filter(|(_, f)| !f.is_empty()).map(|(w, _)| w).sum();
    if !(total > 0.0) {
        return Err(Error::Invalid("no QA family with positive weight has examples".into()));
    }
    let mut picked = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let mut u = rng.random::<f64>() * total;
        let mut fam = 0;
        for (f, (w, members)) in weights.iter().zip(&families).enumerate() {
            if members.is_empty() {
                continue;
            }
            fam = f;
            if u < *w {
                break;
            }
            u -= w;
        }
        let members = &families[fam];
        picked.push(dataset[members[rng.random_range(0..members.len())]].clone());
    }

    let mut chosen: Vec<usize> = Vec::new();
    let mut seen = HashSet::new();
    for ex in &picked {
        for i in ex.correct() {
            if seen.insert(i) {
                chosen.push(i);
            }
        }
    }
    if chosen.len() > m_train {
        return Err(Error::Invalid(format!("{} correct entries overflow a pool of {m_train}", chosen.len())));
    }
    let factual: Vec<usize> =
        (0..kb.len()).filter(|&i| kb.entry(i).kind == crate::kb::EntryKind::Factual && !seen.contains(&i)).collect();
    let mut negatives = factual;
    negatives.shuffle(rng);
    for i in negatives {
        if chosen.len() >= m_train {
            break;
        }
        chosen.push(i);
        seen.insert(i);
        if let Some(p) = kb.partner(i) {
            if chosen.len() < m_train && seen.insert(p) {
                chosen.push(p);
            }
        }
    }
    chosen.shuffle(rng);
    let position: HashMap<usize, usize> = chosen.iter().enumerate().map(|(pos, &i)| (i, pos)).collect();
    let examples = picked
        .into_iter()
        .map(|ex| QaExample {
            factual_indices: ex.factual_indices.iter().map(|i| position[i]).collect(),
            reference_indices: ex.reference_indices.iter().map(|i| position[i]).collect(),
            ..ex
        })
        .collect();
    let pool = kb.select(&chosen)?;
    Ok(Batch { examples, pool, source: chosen })
}

/// Evaluation pool of `size` rows: the example's correct entries plus
/// negative triples (both entries each), shuffled. Returns the pool rows
/// (universe indices) and the example with remapped indices.
pub fn eval_pool<R: Rng>(ex: &QaExample, kb: &KbStore, size: usize, rng: &mut R) -> Result<(Vec<usize>, QaExample)> {
    let one = sample_batch(std::slice::from_ref(ex), kb, size, 1, Mix { single: 1.0, multi: 1.0, unanswerable: 1.0 }, rng)?;
    let ex = one.examples.into_iter().next().expect("one example");
    Ok((one.source, ex))
}

/// A random question/answer pair in the corpus format whose object and
/// label are drawn independently of any KB; used to pretrain the backbone.
pub fn random_pretrain_example<R: Rng>(lex: &Lexicon, id_len: usize, rng: &mut R) -> (String, String) {
    let s = |rng: &mut R| lex.subjects[rng.random_range(0..lex.subjects.len())].clone();
    let r = |rng: &mut R| lex.relations[rng.random_range(0..lex.relations.len())].clone();
    let part = |rng: &mut R| {
        let o = &lex.objects[rng.random_range(0..lex.objects.len())];
        answer_part(o, Some(&random_label(rng, id_len)))
    };
    match rng.random_range(0..10) {
        0..4 => (single_question(&r(rng), &s(rng)), part(rng)),
        4..6 => {
            let (r1, r2, s1) = (r(rng), r(rng), s(rng));
            (multi_same_question(&r1, &r2, &s1), format!("{} and {}", part(rng), part(rng)))
        }
        6..8 => {
            let (r1, s1, r2, s2) = (r(rng), s(rng), r(rng), s(rng));
            (multi_diff_question(&r1, &s1, &r2, &s2), format!("{} and {}", part(rng), part(rng)))
        }
        _ => (single_question(&r(rng), &s(rng)), REFUSAL.to_string()),
    }
}

/// Token ids of a training sequence `<bos> question <sep> answer <eos>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sequence {
    pub tokens: Vec<usize>,
    /// Tokens up to and including `<sep>`.
    pub prompt_len: usize,
}

impl Sequence {
    /// Next-token targets and the mask selecting predictions of answer
    /// tokens and `<eos>`.
    pub fn targets(&self) -> (Vec<usize>, Vec<bool>) {
        let n = self.tokens.len();
        let targets = (0..n).map(|i| if i + 1 < n { self.tokens[i + 1] } else { 0 }).collect();
        let mask = (0..n).map(|i| i + 1 >= self.prompt_len && i + 1 < n).collect();
        (targets, mask)
    }
}

pub fn prompt_tokens(vocab: &Vocab, question: &str) -> Result<Vec<usize>> {
    let mut t = vec![vocab.bos()];
    t.extend(vocab.tokenize(question)?);
    t.push(vocab.sep());
    Ok(t)
}

pub fn encode_sequence(vocab: &Vocab, question: &str, answer: &str) -> Result<Sequence> {
    let mut tokens = prompt_tokens(vocab, question)?;
    let prompt_len = tokens.len();
    tokens.extend(vocab.tokenize(answer)?);
    tokens.push(vocab.eos());
    Ok(Sequence { tokens, prompt_len })
}

/// Gold objects and labels of `ex` looked up in `kb`.
pub fn gold_answers(ex: &QaExample, kb: &KbStore) -> (Vec<String>, Vec<String>) {
    let objects = ex.factual_indices.iter().map(|&i| kb.entry(i).triple.object.clone()).collect();
    let labels = ex.reference_indices.iter().filter_map(|&i| kb.entry(i).id_label.clone()).collect();
    (objects, labels)
}

pub fn write_qa(path: &Path, qa: &[QaExample]) -> Result<()> {
    crate::kb::write_lines(path, qa)
}

pub fn read_qa(path: &Path) -> Result<Vec<QaExample>> {
    let qa: Vec<QaExample> = crate::kb::read_lines(path)?;
    for ex in &qa {
        ex.validate()?;
    }
    Ok(qa)
}
