//! Preprocessed training examples: anonymized, sentence-structured, with
//! per-sentence mentioned-entity labels and the stage-2 mention target.

use crate::error::{CoreError, Result};
use crate::text::anonymize::{anonymize_entities, EntityMention, MentionOccurrence};
use crate::text::segment::segment_sentences;
use crate::text::vocab::{placeholder_index, placeholder_token, Vocabulary, EOS_ID, S_ID};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Outputs are dropped below this many sentences and truncated above that.
pub const MIN_SENTENCES: usize = 5;
pub const MAX_SENTENCES: usize = 15;

/// One corpus document as read from corpus JSONL.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RawDocument {
    pub input: String,
    pub output: String,
    pub entities: Vec<EntityMention>,
    /// Per-sentence latent-state labels; synthetic corpora only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_states: Option<Vec<Option<usize>>>,
}

/// One narrative, anonymized and tokenized, ready for the model.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AnonymizedExample {
    pub input_ids: Vec<usize>,
    /// `<s>` before each sentence, `<eos>` at the end.
    pub output_ids: Vec<usize>,
    /// Half-open token spans over `output_ids`, one per sentence, each
    /// starting at its `<s>` token. They partition everything but `<eos>`.
    pub sentence_spans: Vec<(usize, usize)>,
    /// Entity index mentioned per sentence; `None` means `<none>`.
    pub mentioned_entity: Vec<Option<usize>>,
    /// Every placeholder occurrence of the kept text, in order.
    pub mention_sequence: Vec<MentionOccurrence>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_states: Option<Vec<Option<usize>>>,
    pub input_text: String,
    pub output_text: String,
}

impl AnonymizedExample {
    pub fn n_sentences(&self) -> usize {
        self.sentence_spans.len()
    }

    /// Tokens of sentence `n` without the leading `<s>`.
    pub fn sentence_body(&self, n: usize) -> &[usize] {
        let (s, e) = self.sentence_spans[n];
        &self.output_ids[s + 1..e]
    }

    /// Position of the first occurrence of the labeled placeholder within
    /// the sentence body, if the sentence mentions an entity.
    pub fn placeholder_position(&self, n: usize) -> Option<usize> {
        let entity = self.mentioned_entity[n]?;
        let pid = crate::text::vocab::placeholder_id(entity);
        self.sentence_body(n).iter().position(|&t| t == pid)
    }
}

/// Build a training example. Returns `Ok(None)` when the output is
/// filtered for having fewer than [`MIN_SENTENCES`] sentences.
///
/// When a sentence carries several distinct placeholders, one is sampled
/// uniformly here, once, with the preprocessing seed.
pub fn build_example(
    vocab: &Vocabulary,
    input: &str,
    output: &str,
    mentions: &[EntityMention],
    gold_states: Option<&[Option<usize>]>,
    rng: &mut ChaCha8Rng,
) -> Result<Option<AnonymizedExample>> {
    let (anonymized, all_occurrences) = anonymize_entities(output, mentions)?;
    let mut sentences = segment_sentences(&anonymized);
    if sentences.len() < MIN_SENTENCES {
        return Ok(None);
    }
    let mut gold: Option<Vec<Option<usize>>> = match gold_states {
        Some(g) => {
            if g.len() != sentences.len() {
                return Err(CoreError::Structural(format!(
                    "{} gold states for {} sentences",
                    g.len(),
                    sentences.len()
                )));
            }
            Some(g.to_vec())
        }
        None => None,
    };
    if sentences.len() > MAX_SENTENCES {
        sentences.truncate(MAX_SENTENCES);
        if let Some(g) = gold.as_mut() {
            g.truncate(MAX_SENTENCES);
        }
    }

    let mut output_ids = Vec::new();
    let mut sentence_spans = Vec::new();
    let mut mentioned_entity = Vec::new();
    let mut kept_occurrences = 0;
    for sentence in &sentences {
        let start = output_ids.len();
        output_ids.push(S_ID);
        let body = vocab.encode(sentence);
        // Distinct placeholders in occurrence order.
        let mut present: Vec<usize> = Vec::new();
        for &t in &body {
            if let Some(e) = placeholder_index(t) {
                kept_occurrences += 1;
                if !present.contains(&e) {
                    present.push(e);
                }
            }
        }
        output_ids.extend_from_slice(&body);
        sentence_spans.push((start, output_ids.len()));
        mentioned_entity.push(match present.len() {
            0 => None,
            1 => Some(present[0]),
            k => Some(present[rng.gen_range(0..k)]),
        });
    }
    output_ids.push(EOS_ID);

    let output_text = sentences.join(" ");
    Ok(Some(AnonymizedExample {
        input_ids: vocab.encode(input),
        output_ids,
        sentence_spans,
        mentioned_entity,
        mention_sequence: all_occurrences.into_iter().take(kept_occurrences).collect(),
        gold_states: gold,
        input_text: input.to_string(),
        output_text,
    }))
}

/// Stage-2 target: each placeholder occurrence followed by its surface
/// mention, in mention order, then `<eos>`.
pub fn build_stage2_target(vocab: &Vocabulary, example: &AnonymizedExample) -> Vec<usize> {
    let mut ids = Vec::new();
    for occ in &example.mention_sequence {
        ids.push(vocab.id(&placeholder_token(occ.entity)));
        ids.extend(vocab.encode(&occ.surface));
    }
    ids.push(EOS_ID);
    ids
}

/// Read corpus JSONL ({"input", "output", "entities", ["gold_states"]}).
pub fn read_corpus_jsonl(path: &std::path::Path) -> Result<Vec<RawDocument>> {
    let text = std::fs::read_to_string(path)?;
    let mut docs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let doc: RawDocument = serde_json::from_str(line)
            .map_err(|e| CoreError::Structural(format!("corpus line {}: {e}", i + 1)))?;
        docs.push(doc);
    }
    Ok(docs)
}

pub fn write_jsonl<T: Serialize>(path: &std::path::Path, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_examples_jsonl(path: &std::path::Path) -> Result<Vec<AnonymizedExample>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex: AnonymizedExample = serde_json::from_str(line)
            .map_err(|e| CoreError::Structural(format!("examples line {}: {e}", i + 1)))?;
        out.push(ex);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use crate::text::vocab::placeholder_id;

    fn vocab() -> Vocabulary {
        Vocabulary::build([
            "Alice met Bob and smiled walked home sat down again the sun rose here we go more words",
        ])
    }

    fn mention(surface: &str, start: usize) -> EntityMention {
        EntityMention { surface: surface.into(), start, end: start + surface.len() }
    }

    /// Locate every non-overlapping occurrence of the given surfaces,
    /// longest-first so "Ash Williams" claims its span before "Ash".
    fn find_mentions(doc: &str, names: &[&str]) -> Vec<EntityMention> {
        let mut names: Vec<&str> = names.to_vec();
        names.sort_by_key(|n| std::cmp::Reverse(n.len()));
        let mut claimed: Vec<(usize, usize)> = Vec::new();
        let mut out = Vec::new();
        for name in names {
            let mut from = 0;
            while let Some(rel) = doc[from..].find(name) {
                let start = from + rel;
                let end = start + name.len();
                if !claimed.iter().any(|&(s, e)| start < e && s < end) {
                    claimed.push((start, end));
                    out.push(mention(name, start));
                }
                from = start + 1;
            }
        }
        out.sort_by_key(|m| m.start);
        out
    }

    #[test]
    fn short_output_is_filtered() {
        let v = vocab();
        let mut rng = rng_from(0);
        let out = build_example(&v, "x", "One. Two.", &[], None, &mut rng).unwrap();
        assert!(out.is_none());
    }

    #[test]
    fn spans_partition_and_start_with_s() {
        let v = vocab();
        let mut rng = rng_from(0);
        let doc = "Alice met Bob. Bob smiled. Alice walked. Bob sat. Alice rose.";
        let mentions = vec![
            mention("Alice", 0),
            mention("Bob", 10),
            mention("Bob", 15),
            mention("Alice", 27),
            mention("Bob", 41),
            mention("Alice", 50),
        ];
        let ex = build_example(&v, "in", doc, &mentions, None, &mut rng).unwrap().unwrap();
        assert_eq!(ex.n_sentences(), 5);
        assert_eq!(ex.mentioned_entity.len(), 5);
        let mut cursor = 0;
        for &(s, e) in &ex.sentence_spans {
            assert_eq!(s, cursor);
            assert_eq!(ex.output_ids[s], S_ID);
            cursor = e;
        }
        assert_eq!(cursor + 1, ex.output_ids.len());
        assert_eq!(*ex.output_ids.last().unwrap(), EOS_ID);
        let s_count = ex.output_ids.iter().filter(|&&t| t == S_ID).count();
        assert_eq!(s_count, ex.n_sentences());
    }

    #[test]
    fn sentence_without_placeholder_is_none() {
        let v = vocab();
        let mut rng = rng_from(0);
        let doc = "Alice met Bob. the sun rose. Alice walked. Bob sat. Alice smiled.";
        let mentions = vec![
            mention("Alice", 0),
            mention("Bob", 10),
            mention("Alice", 29),
            mention("Bob", 43),
            mention("Alice", 52),
        ];
        let ex = build_example(&v, "in", doc, &mentions, None, &mut rng).unwrap().unwrap();
        assert!(ex.mentioned_entity[0].is_some());
        assert_eq!(ex.mentioned_entity[1], None);
    }

    #[test]
    fn long_output_truncates_to_fifteen() {
        let v = vocab();
        let mut rng = rng_from(0);
        let doc = (0..20).map(|_| "we go here.").collect::<Vec<_>>().join(" ");
        let ex = build_example(&v, "in", &doc, &[], None, &mut rng).unwrap().unwrap();
        assert_eq!(ex.n_sentences(), MAX_SENTENCES);
    }

    #[test]
    fn multi_placeholder_sentence_sampling_is_seeded() {
        let v = vocab();
        let doc = "Alice met Bob. down here. sat down. walked home. again the sun.";
        let mentions = vec![mention("Alice", 0), mention("Bob", 10)];
        let a = build_example(&v, "in", doc, &mentions, None, &mut rng_from(7)).unwrap().unwrap();
        let b = build_example(&v, "in", doc, &mentions, None, &mut rng_from(7)).unwrap().unwrap();
        assert_eq!(a.mentioned_entity, b.mentioned_entity);
        let e = a.mentioned_entity[0].unwrap();
        assert!(e == 0 || e == 1);
    }

    #[test]
    fn stage2_target_lists_occurrences_in_order() {
        let v = vocab();
        let mut rng = rng_from(0);
        let doc = "Alice met Bob. Bob smiled. sat down. walked home. the sun rose.";
        let mentions = vec![mention("Alice", 0), mention("Bob", 10), mention("Bob", 15)];
        let ex = build_example(&v, "in", doc, &mentions, None, &mut rng).unwrap().unwrap();
        let target = build_stage2_target(&v, &ex);
        let expected = vec![
            placeholder_id(0),
            v.id("Alice"),
            placeholder_id(1),
            v.id("Bob"),
            placeholder_id(1),
            v.id("Bob"),
            EOS_ID,
        ];
        assert_eq!(target, expected);
    }

    #[test]
    fn stage2_target_without_placeholders_is_just_eos() {
        let v = vocab();
        let mut rng = rng_from(0);
        let doc = "the sun rose. sat down. walked home. here we go. more words here.";
        let ex = build_example(&v, "in", doc, &[], None, &mut rng).unwrap().unwrap();
        assert_eq!(build_stage2_target(&v, &ex), vec![EOS_ID]);
    }

    #[test]
    fn stage2_target_reproduces_pair_format_with_multiword_mentions() {
        let v = Vocabulary::build([
            "Ash Williams and his girlfriend Linda take a romantic vacation to cabin While in the sleeps rests wakes walks",
        ]);
        let mut rng = rng_from(0);
        let doc = "Ash Williams and his girlfriend Linda take a vacation. While in the cabin, Ash sleeps. Linda rests. Ash wakes. Ash walks.";
        let mentions = find_mentions(doc, &["Ash Williams", "Linda", "Ash"]);
        let ex = build_example(&v, "in", doc, &mentions, None, &mut rng).unwrap().unwrap();
        // "Ash" is a word-bounded substring of "Ash Williams": same entity.
        let target = build_stage2_target(&v, &ex);
        let expected = vec![
            placeholder_id(0),
            v.id("Ash"),
            v.id("Williams"),
            placeholder_id(1),
            v.id("Linda"),
            placeholder_id(0),
            v.id("Ash"),
            placeholder_id(1),
            v.id("Linda"),
            placeholder_id(0),
            v.id("Ash"),
            placeholder_id(0),
            v.id("Ash"),
            EOS_ID,
        ];
        assert_eq!(target, expected);
    }

    #[test]
    fn placeholder_ids_form_contiguous_prefix() {
        let v = vocab();
        let mut rng = rng_from(0);
        let doc = "Alice met Bob. Bob smiled. Alice walked. Bob sat. Alice rose.";
        let mentions = vec![
            mention("Alice", 0),
            mention("Bob", 10),
            mention("Bob", 15),
            mention("Alice", 27),
            mention("Bob", 41),
            mention("Alice", 50),
        ];
        let ex = build_example(&v, "in", doc, &mentions, None, &mut rng).unwrap().unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for occ in &ex.mention_sequence {
            if !seen.contains(&occ.entity) {
                assert_eq!(occ.entity, seen.len(), "first appearances must count up from 0");
                seen.insert(occ.entity);
            }
        }
    }
}
