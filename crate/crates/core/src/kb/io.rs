//! JSONL persistence for triples and KB entries. Embeddings are never
//! written; they are recomputed from the texts on load.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::encoder::TextEncoder;
use super::store::{EntryKind, KbEntry, KbStore, Triple};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct EntryRecord {
    subject: String,
    relation: String,
    object: String,
    kind: EntryKind,
    id_label: Option<String>,
}

pub(crate) fn write_lines<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn write_triples(path: &Path, triples: &[Triple]) -> Result<()> {
    write_lines(path, triples)
}

pub fn read_triples(path: &Path) -> Result<Vec<Triple>> {
    let triples: Vec<Triple> = read_lines(path)?;
    for t in &triples {
        t.validate()?;
    }
    Ok(triples)
}

pub fn write_entries(path: &Path, kb: &KbStore) -> Result<()> {
    write_lines(
        path,
        kb.entries().iter().map(|e| EntryRecord {
            subject: e.triple.subject.clone(),
            relation: e.triple.relation.clone(),
            object: e.triple.object.clone(),
            kind: e.kind,
            id_label: e.id_label.clone(),
        }),
    )
}

pub fn read_entries(path: &Path, encoder: &TextEncoder) -> Result<KbStore> {
    let records: Vec<EntryRecord> = read_lines(path)?;
    let entries = records
        .into_iter()
        .map(|r| {
            let t = Triple::new(r.subject, r.relation, r.object)?;
            match (r.kind, r.id_label) {
                (EntryKind::Factual, _) => KbEntry::factual(t, encoder),
                (EntryKind::ReferenceId, Some(label)) => KbEntry::reference(t, &label, encoder),
                (EntryKind::ReferenceId, None) => Err(Error::Invalid("reference entry without id_label".into())),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    KbStore::from_entries(encoder.dim, entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::build_kb;

    #[test]
    fn entries_reload_with_identical_embeddings() {
        let dir = tempfile::tempdir().unwrap();
        let enc = TextEncoder::new(8, 4);
        let ts = vec![Triple::new("a", "r", "x").unwrap(), Triple::new("b", "q", "y").unwrap()];
        let kb = build_kb(&ts, true, 3, &enc, 3).unwrap();
        let p = dir.path().join("kb.jsonl");
        write_entries(&p, &kb).unwrap();
        assert_eq!(read_entries(&p, &enc).unwrap(), kb);

        let tp = dir.path().join("triples.jsonl");
        write_triples(&tp, &ts).unwrap();
        assert_eq!(read_triples(&tp).unwrap(), ts);
        let first = std::fs::read_to_string(&tp).unwrap();
        assert_eq!(first.lines().next().unwrap(), r#"{"subject":"a","relation":"r","object":"x"}"#);
    }
}
