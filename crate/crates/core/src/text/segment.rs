//! Rule-based sentence segmentation.

/// Words whose trailing period does not end a sentence.
pub const ABBREVIATIONS: &[&str] = &[
    "Mr.", "Mrs.", "Ms.", "Dr.", "Prof.", "St.", "Jr.", "Sr.", "vs.", "etc.", "e.g.", "i.e.",
    "No.", "Mt.", "Gen.", "Col.",
];

/// Split on terminal punctuation (`.` `!` `?`) followed by whitespace or
/// end of text. A period attached to an allowlisted abbreviation is not a
/// boundary. Empty input yields an empty list.
pub fn segment_sentences(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut sentences = Vec::new();
    let mut seg_start = 0;
    for i in 0..chars.len() {
        let c = chars[i];
        if c != '.' && c != '!' && c != '?' {
            continue;
        }
        let at_end = i + 1 == chars.len();
        if !at_end && !chars[i + 1].is_whitespace() {
            continue;
        }
        if c == '.' && is_abbreviation(&chars, i) {
            continue;
        }
        let seg: String = chars[seg_start..=i].iter().collect();
        let seg = seg.trim();
        if !seg.is_empty() {
            sentences.push(seg.to_string());
        }
        seg_start = i + 1;
    }
    let tail: String = chars[seg_start.min(chars.len())..].iter().collect();
    let tail = tail.trim();
    if !tail.is_empty() {
        sentences.push(tail.to_string());
    }
    sentences
}

fn is_abbreviation(chars: &[char], dot: usize) -> bool {
    let mut start = dot;
    while start > 0 && !chars[start - 1].is_whitespace() {
        start -= 1;
    }
    let word: String = chars[start..=dot].iter().collect();
    ABBREVIATIONS.contains(&word.as_str())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_on_terminal_punctuation() {
        assert_eq!(segment_sentences("A. B! C?"), vec!["A.", "B!", "C?"]);
    }

    #[test]
    fn abbreviation_does_not_split() {
        assert_eq!(segment_sentences("Mr. X arrived."), vec!["Mr. X arrived."]);
        assert_eq!(
            segment_sentences("Dr. Y spoke. Mrs. Z left."),
            vec!["Dr. Y spoke.", "Mrs. Z left."]
        );
    }

    #[test]
    fn unterminated_text_is_one_segment() {
        assert_eq!(segment_sentences("no punctuation here"), vec!["no punctuation here"]);
    }

    #[test]
    fn empty_input_gives_empty_list() {
        assert!(segment_sentences("").is_empty());
        assert!(segment_sentences("   ").is_empty());
    }

    #[test]
    fn no_empty_segments() {
        let segs = segment_sentences("One.  Two!   ");
        assert_eq!(segs, vec!["One.", "Two!"]);
    }
}
