//! Knowledge-base entries: key/value text rendering, the hashed-feature
//! encoder, the indexed store, and projection into model width.

mod encoder;
mod io;
mod store;

pub use encoder::{encode_text, normalized_words, TextEncoder};
pub use io::{read_entries, read_triples, write_entries, write_triples};
pub(crate) use io::{read_lines, write_lines};
pub use store::{
    build_kb, project_kb, random_label, render_key_text, EntryKind, KbEntry, KbStore, Triple, DEFAULT_ID_LEN,
};
