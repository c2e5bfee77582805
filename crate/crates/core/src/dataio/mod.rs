//! Clip corpora, the `DADF` container, tokenization, window sampling and the
//! synthetic generator.

mod container;
mod corpus;
mod synthetic;
mod text_encoder;
mod vocab;
mod windows;

pub use container::{
    decode_container, encode_container, read_container, write_container, HEADER_LEN, MAGIC,
    RECORD_FIXED_LEN, VERSION,
};
pub use corpus::{ClipRecord, Corpus};
pub use synthetic::{gen_synthetic, SyntheticSpec};
pub use text_encoder::{EncodedText, TextEncoder, DEFAULT_TEXT_SEED};
pub use vocab::{normalize_words, Vocabulary, BOS, CHAR_SLOT, EOS, PAD, UNK};
pub use windows::{sample_windows, WindowSampling, WindowSet};
