//! Text pipeline: tokenization, anonymization, sentence structuring, and
//! the synthetic corpus generator.

pub mod anonymize;
pub mod example;
pub mod segment;
pub mod synth;
pub mod vocab;

pub use anonymize::{anonymize_entities, restore_mentions, EntityMention, MentionOccurrence};
pub use example::{build_example, build_stage2_target, AnonymizedExample, RawDocument};
pub use segment::segment_sentences;
pub use synth::{generate_synthetic_corpus, generate_synthetic_docs, preprocess_docs, SyntheticWorldConfig};
pub use vocab::{tokenize, Vocabulary};
