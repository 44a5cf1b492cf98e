//! Deterministic batching: seeded shuffle per epoch, whole-sentence
//! truncation to the sequence budget.

use crate::rng::{rng_from, shuffled_indices, subseed_indexed};
use crate::text::{AnonymizedExample, Vocabulary};

/// Index batches for one epoch: a seeded shuffle chunked by batch size;
/// the last chunk keeps its remainder.
pub fn epoch_batches(n_examples: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1 && n_examples >= 1);
    let mut rng = rng_from(subseed_indexed(seed, "batch-shuffle", epoch));
    let order = shuffled_indices(&mut rng, n_examples);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

pub fn batches_per_epoch(n_examples: usize, batch_size: usize) -> u64 {
    n_examples.div_ceil(batch_size) as u64
}

/// The batch scheduled for a given global step.
pub fn batch_for_step(n_examples: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    let bpe = batches_per_epoch(n_examples, batch_size);
    let epoch = step / bpe;
    let idx = (step % bpe) as usize;
    epoch_batches(n_examples, batch_size, seed, epoch).swap_remove(idx)
}

/// Shrink an example to the decoder budget by dropping trailing whole
/// sentences (so span and label invariants survive), and clip the input.
/// Returns a borrowed example untouched when it already fits.
pub fn fit_example<'a>(
    vocab: &Vocabulary,
    ex: &'a AnonymizedExample,
    max_seq_len: usize,
) -> std::borrow::Cow<'a, AnonymizedExample> {
    let fits_output = ex.output_ids.len() - 1 <= max_seq_len;
    let fits_input = ex.input_ids.len() <= max_seq_len;
    if fits_output && fits_input {
        return std::borrow::Cow::Borrowed(ex);
    }
    log::warn!(
        "example with {} output tokens truncated to fit max_seq_len {}",
        ex.output_ids.len(),
        max_seq_len
    );
    let mut out = ex.clone();
    out.input_ids.truncate(max_seq_len);
    // Decoder input length equals the last span's end once <eos> is back.
    while out.sentence_spans.len() > 1 && out.sentence_spans.last().unwrap().1 > max_seq_len {
        let (start, _) = out.sentence_spans.pop().unwrap();
        out.output_ids.truncate(start);
        out.mentioned_entity.pop();
        if let Some(g) = out.gold_states.as_mut() {
            g.pop();
        }
    }
    // Re-terminate and recount occurrences kept by the shorter text.
    if *out.output_ids.last().unwrap() != crate::text::vocab::EOS_ID {
        out.output_ids.push(crate::text::vocab::EOS_ID);
    }
    let kept: usize = out
        .output_ids
        .iter()
        .filter(|&&t| crate::text::vocab::placeholder_index(t).is_some())
        .count();
    out.mention_sequence.truncate(kept);
    out.output_text = vocab.decode(&out.output_ids[..out.output_ids.len() - 1]);
    std::borrow::Cow::Owned(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::synth::{generate_synthetic_corpus, SyntheticWorldConfig};

    #[test]
    fn chunk_sizes_keep_the_remainder() {
        let batches = epoch_batches(25, 12, 0, 0);
        let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![12, 12, 1]);
        let mut all: Vec<usize> = batches.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..25).collect::<Vec<_>>());
    }

    #[test]
    fn same_seed_same_order() {
        assert_eq!(epoch_batches(40, 7, 9, 3), epoch_batches(40, 7, 9, 3));
        assert_ne!(epoch_batches(40, 7, 9, 3), epoch_batches(40, 7, 9, 4));
    }

    #[test]
    fn step_schedule_is_stable() {
        let a = batch_for_step(25, 12, 1, 5);
        let b = batch_for_step(25, 12, 1, 5);
        assert_eq!(a, b);
    }

    #[test]
    fn oversized_example_is_sentence_truncated() {
        let cfg = SyntheticWorldConfig::default_desk(3);
        let (examples, vocab) = generate_synthetic_corpus(&cfg, 5).unwrap();
        let ex = &examples[0];
        let budget = ex.output_ids.len() / 2;
        let cut = fit_example(&vocab, ex, budget);
        assert!(cut.output_ids.len() - 1 <= budget);
        assert_eq!(cut.sentence_spans.len(), cut.mentioned_entity.len());
        assert_eq!(*cut.output_ids.last().unwrap(), crate::text::vocab::EOS_ID);
        let mut cursor = 0;
        for &(s, e) in &cut.sentence_spans {
            assert_eq!(s, cursor);
            assert_eq!(cut.output_ids[s], crate::text::vocab::S_ID);
            cursor = e;
        }
        assert_eq!(cursor + 1, cut.output_ids.len());
        // Mention sequence matches surviving occurrences.
        let kept: usize = cut
            .output_ids
            .iter()
            .filter(|&&t| crate::text::vocab::placeholder_index(t).is_some())
            .count();
        assert_eq!(cut.mention_sequence.len(), kept);
    }

    #[test]
    fn fitting_example_is_borrowed_unchanged() {
        let cfg = SyntheticWorldConfig::default_desk(3);
        let (examples, vocab) = generate_synthetic_corpus(&cfg, 2).unwrap();
        let ex = &examples[0];
        let out = fit_example(&vocab, ex, 512);
        assert!(matches!(out, std::borrow::Cow::Borrowed(_)));
    }
}
