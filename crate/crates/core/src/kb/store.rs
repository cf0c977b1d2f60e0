use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoder::TextEncoder;
use crate::error::{Error, Result};
use crate::model::AdapterSet;
use crate::numeric::{matmul, Tensor};

/// Default number of letters in a reference label.
pub const DEFAULT_ID_LEN: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

impl Triple {
    pub fn new(subject: impl Into<String>, relation: impl Into<String>, object: impl Into<String>) -> Result<Self> {
        let t = Self { subject: subject.into(), relation: relation.into(), object: object.into() };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("subject", &self.subject), ("relation", &self.relation), ("object", &self.object)] {
            if v.trim().is_empty() {
                return Err(Error::Invalid(format!("triple has an empty {name}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Factual,
    ReferenceId,
}

/// Key text for an entry of the given kind.
pub fn render_key_text(t: &Triple, kind: EntryKind) -> Result<String> {
    t.validate()?;
    Ok(match kind {
        EntryKind::Factual => format!("the {} of {}", t.relation, t.subject),
        EntryKind::ReferenceId => {
            format!("The ID of the knowledge 'the {} of {} is {}'", t.relation, t.subject, t.object)
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct KbEntry {
    pub triple: Triple,
    pub kind: EntryKind,
    pub key_text: String,
    pub value_text: String,
    pub id_label: Option<String>,
    pub key_embedding: Vec<f64>,
    pub value_embedding: Vec<f64>,
}

impl KbEntry {
    pub fn factual(triple: Triple, encoder: &TextEncoder) -> Result<Self> {
        let key_text = render_key_text(&triple, EntryKind::Factual)?;
        let value_text = triple.object.clone();
        Ok(Self {
            key_embedding: encoder.encode(&key_text)?,
            value_embedding: encoder.encode(&value_text)?,
            triple,
            kind: EntryKind::Factual,
            key_text,
            value_text,
            id_label: None,
        })
    }

    pub fn reference(triple: Triple, label: &str, encoder: &TextEncoder) -> Result<Self> {
        if label.is_empty() || !label.chars().all(|c| c.is_ascii_uppercase()) {
            return Err(Error::Invalid(format!("reference label {label:?} must be non-empty uppercase letters")));
        }
        let key_text = render_key_text(&triple, EntryKind::ReferenceId)?;
        Ok(Self {
            key_embedding: encoder.encode(&key_text)?,
            value_embedding: encoder.encode(label)?,
            triple,
            kind: EntryKind::ReferenceId,
            key_text,
            value_text: label.to_string(),
            id_label: Some(label.to_string()),
        })
    }

    /// Same entry with a different reference label (factual entries are returned unchanged).
    pub fn with_label(&self, label: &str, encoder: &TextEncoder) -> Result<Self> {
        match self.kind {
            EntryKind::Factual => Ok(self.clone()),
            EntryKind::ReferenceId => {
                let mut e = self.clone();
                e.value_embedding = encoder.encode(label)?;
                e.value_text = label.to_string();
                e.id_label = Some(label.to_string());
                Ok(e)
            }
        }
    }
}

/// Ordered KB entries with stable indices and a factual/reference pairing map.
#[derive(Clone, Debug, PartialEq)]
pub struct KbStore {
    dim: usize,
    entries: Vec<KbEntry>,
    partner: Vec<Option<usize>>,
}

impl KbStore {
    pub fn from_entries(dim: usize, entries: Vec<KbEntry>) -> Result<Self> {
        for (i, e) in entries.iter().enumerate() {
            if e.key_embedding.len() != dim || e.value_embedding.len() != dim {
                return Err(Error::dim("kb store", format!("entry {i} embeddings are not length {dim}")));
            }
            if e.kind == EntryKind::ReferenceId && e.id_label.as_deref().is_none_or(str::is_empty) {
                return Err(Error::Invalid(format!("reference entry {i} has no label")));
            }
        }
        let mut by_triple: HashMap<(&Triple, EntryKind), usize> = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            by_triple.entry((&e.triple, e.kind)).or_insert(i);
        }
        let partner = entries
            .iter()
            .map(|e| {
                let other = match e.kind {
                    EntryKind::Factual => EntryKind::ReferenceId,
                    EntryKind::ReferenceId => EntryKind::Factual,
                };
                by_triple.get(&(&e.triple, other)).copied()
            })
            .collect();
        Ok(Self { dim, entries, partner })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[KbEntry] {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &KbEntry {
        &self.entries[i]
    }

    /// Index of the entry for the same triple with the other kind.
    pub fn partner(&self, i: usize) -> Option<usize> {
        self.partner[i]
    }

    /// Sub-store holding the given entries in the given order.
    pub fn select(&self, idx: &[usize]) -> Result<KbStore> {
        let entries = idx
            .iter()
            .map(|&i| self.entries.get(i).cloned().ok_or(Error::IndexOutOfRange { index: i, len: self.len() }))
            .collect::<Result<Vec<_>>>()?;
        KbStore::from_entries(self.dim, entries)
    }

    /// `M × P` matrix of key embeddings for the given rows (all rows if `None`).
    pub fn key_matrix(&self, rows: Option<&[usize]>) -> Tensor {
        self.stack(rows, |e| &e.key_embedding)
    }

    pub fn value_matrix(&self, rows: Option<&[usize]>) -> Tensor {
        self.stack(rows, |e| &e.value_embedding)
    }

    fn stack(&self, rows: Option<&[usize]>, f: impl Fn(&KbEntry) -> &Vec<f64>) -> Tensor {
        let mut data = Vec::new();
        let n = match rows {
            Some(r) => {
                for &i in r {
                    data.extend_from_slice(f(&self.entries[i]));
                }
                r.len()
            }
            None => {
                for e in &self.entries {
                    data.extend_from_slice(f(e));
                }
                self.entries.len()
            }
        };
        Tensor::matrix(n, self.dim, data).expect("entry embeddings have store width")
    }
}

/// Random uppercase label of `len` letters.
pub fn random_label<R: Rng>(rng: &mut R, len: usize) -> String {
    (0..len).map(|_| char::from(b'A' + rng.random_range(0..26u8))).collect()
}

/// One factual entry per triple, followed (when requested) by the paired
/// reference entries so that triple `i` sits at `i` and `i + M`.
pub fn build_kb(
    triples: &[Triple],
    include_reference_ids: bool,
    seed: u64,
    encoder: &TextEncoder,
    id_len: usize,
) -> Result<KbStore> {
    if triples.is_empty() {
        return Err(Error::Invalid("cannot build a KB from zero triples".into()));
    }
    if include_reference_ids && id_len == 0 {
        return Err(Error::Invalid("reference label length must be positive".into()));
    }
    let mut seen: HashMap<(&str, &str), usize> = HashMap::new();
    for (i, t) in triples.iter().enumerate() {
        t.validate()?;
        if let Some(prev) = seen.insert((&t.subject, &t.relation), i) {
            log::warn!("triples {prev} and {i} share subject {:?} and relation {:?}; keeping both", t.subject, t.relation);
        }
    }
    let mut entries = Vec::with_capacity(triples.len() * 2);
    for t in triples {
        entries.push(KbEntry::factual(t.clone(), encoder)?);
    }
    if include_reference_ids {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in triples {
            let label = random_label(&mut rng, id_len);
            entries.push(KbEntry::reference(t.clone(), &label, encoder)?);
        }
    }
    KbStore::from_entries(encoder.dim, entries)
}

/// Projects KB embeddings into the model width with one layer's key and
/// value adapters: `keys = E_k · W̃_K`, `values = E_v · W̃_V`.
pub fn project_kb(kb: &KbStore, adapters: &AdapterSet, layer: usize) -> Result<(Tensor, Tensor)> {
    let a = adapters
        .layers()
        .get(layer)
        .ok_or(Error::IndexOutOfRange { index: layer, len: adapters.layers().len() })?;
    if a.key.rows() != kb.dim() || a.value.rows() != kb.dim() {
        return Err(Error::dim(
            "project_kb",
            format!("adapters expect P={}, store has P={}", a.key.rows(), kb.dim()),
        ));
    }
    let keys = matmul(&kb.key_matrix(None), &a.key)?;
    let values = matmul(&kb.value_matrix(None), &a.value)?;
    Ok((keys, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerAdapters;

    fn paris() -> Triple {
        Triple::new("Paris", "capital-of", "France").unwrap()
    }

    #[test]
    fn factual_key_template() {
        assert_eq!(render_key_text(&paris(), EntryKind::Factual).unwrap(), "the capital-of of Paris");
    }

    #[test]
    fn reference_key_template() {
        assert_eq!(
            render_key_text(&paris(), EntryKind::ReferenceId).unwrap(),
            "The ID of the knowledge 'the capital-of of Paris is France'"
        );
    }

    #[test]
    fn empty_relation_is_rejected() {
        assert!(Triple::new("Paris", "", "France").is_err());
        let t = Triple { subject: "Paris".into(), relation: " ".into(), object: "France".into() };
        assert!(render_key_text(&t, EntryKind::Factual).is_err());
    }

    fn three() -> Vec<Triple> {
        vec![
            Triple::new("a", "r", "x").unwrap(),
            Triple::new("b", "r", "y").unwrap(),
            Triple::new("c", "q", "z").unwrap(),
        ]
    }

    #[test]
    fn paired_layout_with_references() {
        let enc = TextEncoder::new(8, 1);
        let kb = build_kb(&three(), true, 9, &enc, DEFAULT_ID_LEN).unwrap();
        assert_eq!(kb.len(), 6);
        for i in 0..3 {
            assert_eq!(kb.entry(i).kind, EntryKind::Factual);
            assert_eq!(kb.entry(i + 3).kind, EntryKind::ReferenceId);
            assert_eq!(kb.entry(i).triple, kb.entry(i + 3).triple);
            assert_eq!(kb.partner(i), Some(i + 3));
            assert_eq!(kb.partner(i + 3), Some(i));
            let e = kb.entry(i + 3);
            assert_eq!(e.id_label.as_deref(), Some(e.value_text.as_str()));
            assert_eq!(e.value_text.len(), DEFAULT_ID_LEN);
        }
    }

    #[test]
    fn factual_only_store() {
        let enc = TextEncoder::new(8, 1);
        let kb = build_kb(&three(), false, 9, &enc, DEFAULT_ID_LEN).unwrap();
        assert_eq!(kb.len(), 3);
        assert!(kb.entries().iter().all(|e| e.kind == EntryKind::Factual && e.id_label.is_none()));
    }

    #[test]
    fn labels_depend_on_seed() {
        // Two independent 3-letter labels collide with probability 26^-3, so
        // across three triples a full match is ~1e-13.
        let enc = TextEncoder::new(8, 1);
        let a = build_kb(&three(), true, 1, &enc, 3).unwrap();
        let b = build_kb(&three(), true, 2, &enc, 3).unwrap();
        let la: Vec<_> = a.entries()[3..].iter().map(|e| e.id_label.clone()).collect();
        let lb: Vec<_> = b.entries()[3..].iter().map(|e| e.id_label.clone()).collect();
        assert_ne!(la, lb);
    }

    #[test]
    fn empty_triple_list_is_an_error() {
        assert!(build_kb(&[], true, 0, &TextEncoder::new(4, 0), 3).is_err());
    }

    #[test]
    fn duplicate_pairs_are_kept() {
        let ts = vec![Triple::new("a", "r", "x").unwrap(), Triple::new("a", "r", "y").unwrap()];
        let kb = build_kb(&ts, false, 0, &TextEncoder::new(4, 0), 3).unwrap();
        assert_eq!(kb.len(), 2);
    }

    fn adapters_with(key: Tensor, value: Tensor, d: usize) -> AdapterSet {
        AdapterSet::from_layers(vec![LayerAdapters { query: Tensor::identity(d), key, value }]).unwrap()
    }

    #[test]
    fn zero_key_adapter_projects_to_zero() {
        let enc = TextEncoder::new(4, 2);
        let kb = build_kb(&three(), true, 0, &enc, 3).unwrap();
        let ad = adapters_with(Tensor::zeros(&[4, 6]), Tensor::zeros(&[4, 6]), 6);
        let (k, _) = project_kb(&kb, &ad, 0).unwrap();
        assert_eq!(k.shape(), &[6, 6]);
        assert!(k.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_adapter_returns_embeddings() {
        let enc = TextEncoder::new(4, 2);
        let kb = build_kb(&three(), false, 0, &enc, 3).unwrap();
        let ad = adapters_with(Tensor::identity(4), Tensor::identity(4), 4);
        let (k, v) = project_kb(&kb, &ad, 0).unwrap();
        assert_eq!(k, kb.key_matrix(None));
        assert_eq!(v, kb.value_matrix(None));
    }

    #[test]
    fn small_projection_matches_hand_matmul() {
        let mk = |key: Vec<f64>, val: Vec<f64>| KbEntry {
            triple: Triple::new("s", "r", "o").unwrap(),
            kind: EntryKind::Factual,
            key_text: String::new(),
            value_text: String::new(),
            id_label: None,
            key_embedding: key,
            value_embedding: val,
        };
        let kb = KbStore::from_entries(2, vec![mk(vec![1.0, 2.0], vec![0.0, 1.0]), mk(vec![-1.0, 0.5], vec![2.0, 0.0])])
            .unwrap();
        let w = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 1.5, 0.25, -0.5]).unwrap();
        let ad = adapters_with(w.clone(), w, 3);
        let (k, v) = project_kb(&kb, &ad, 0).unwrap();
        // [1,2]·W = [0.5+3, -1+0.5, 2-1]; [-1,0.5]·W = [-0.5+0.75, 1+0.125, -2-0.25]
        assert_eq!(k.data(), &[3.5, -0.5, 1.0, 0.25, 1.125, -2.25]);
        // [0,1]·W = [1.5, 0.25, -0.5]; [2,0]·W = [1, -2, 4]
        assert_eq!(v.data(), &[1.5, 0.25, -0.5, 1.0, -2.0, 4.0]);
    }

    #[test]
    fn bad_layer_or_width_is_an_error() {
        let enc = TextEncoder::new(4, 2);
        let kb = build_kb(&three(), false, 0, &enc, 3).unwrap();
        let ad = adapters_with(Tensor::zeros(&[5, 6]), Tensor::zeros(&[5, 6]), 6);
        assert!(project_kb(&kb, &ad, 0).is_err());
        assert!(project_kb(&kb, &ad, 3).is_err());
    }
}
