//! Token vocabulary with reserved specials and entity placeholders.
//!
//! Ids 0..=4 are `<pad>`, `<s>`, `<eos>`, `<unk>`, `<none>`; the next 100
//! ids are the entity placeholders `<e0>`..`<e99>`. Word tokens follow in
//! first-occurrence order over the corpus the vocabulary was built from.

use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

pub const PAD_ID: usize = 0;
pub const S_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;
pub const NONE_ID: usize = 4;
pub const FIRST_PLACEHOLDER_ID: usize = 5;
/// Maximum number of distinct entities per text.
pub const N_PLACEHOLDERS: usize = 100;
pub const FIRST_WORD_ID: usize = FIRST_PLACEHOLDER_ID + N_PLACEHOLDERS;

pub fn placeholder_token(entity: usize) -> String {
    format!("<e{entity}>")
}

pub fn placeholder_id(entity: usize) -> usize {
    debug_assert!(entity < N_PLACEHOLDERS);
    FIRST_PLACEHOLDER_ID + entity
}

/// Entity index of a placeholder token id, if it is one.
pub fn placeholder_index(id: usize) -> Option<usize> {
    (FIRST_PLACEHOLDER_ID..FIRST_WORD_ID).contains(&id).then(|| id - FIRST_PLACEHOLDER_ID)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    #[serde(skip)]
    token_to_id: HashMap<String, usize>,
}

impl Vocabulary {
    fn with_specials() -> Vec<String> {
        let mut tokens = vec![
            "<pad>".to_string(),
            "<s>".to_string(),
            "<eos>".to_string(),
            "<unk>".to_string(),
            "<none>".to_string(),
        ];
        for i in 0..N_PLACEHOLDERS {
            tokens.push(placeholder_token(i));
        }
        tokens
    }

    /// Build from an iterator of texts; word ids follow first occurrence.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Self {
        let mut id_to_token = Self::with_specials();
        let mut token_to_id: HashMap<String, usize> =
            id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        for text in texts {
            for tok in tokenize(text) {
                if !token_to_id.contains_key(&tok) {
                    token_to_id.insert(tok.clone(), id_to_token.len());
                    id_to_token.push(tok);
                }
            }
        }
        Vocabulary { id_to_token, token_to_id }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id of a token; unknown tokens map to `<unk>`.
    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).into_iter().map(|t| self.id(&t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        let toks: Vec<&str> = ids.iter().map(|&i| self.token(i)).collect();
        toks.join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::json!({ "tokens": self.id_to_token });
        std::fs::write(path, serde_json::to_string(&json)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct File {
            tokens: Vec<String>,
        }
        let f: File = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_tokens(f.tokens)
    }

    pub fn from_tokens(id_to_token: Vec<String>) -> Result<Self> {
        let expected = Self::with_specials();
        if id_to_token.len() < expected.len() || id_to_token[..expected.len()] != expected[..] {
            return Err(CoreError::Config("vocabulary file missing reserved token block".into()));
        }
        let mut token_to_id = HashMap::new();
        for (i, t) in id_to_token.iter().enumerate() {
            if token_to_id.insert(t.clone(), i).is_some() {
                return Err(CoreError::Config(format!("duplicate token '{t}' breaks the id bijection")));
            }
        }
        Ok(Vocabulary { id_to_token, token_to_id })
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '\'' || c == '_'
}

/// Whitespace-and-punctuation tokenizer. Reserved-looking tags such as
/// `<e0>` or `<eos>` stay single tokens; every other non-word character
/// stands alone.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if c == '<' {
                // Try to read a <tag> of word characters.
                if let Some(close) = chars[i + 1..].iter().position(|&c| c == '>') {
                    let inner: String = chars[i + 1..i + 1 + close].iter().collect();
                    if !inner.is_empty() && inner.chars().all(|c| c.is_ascii_alphanumeric()) {
                        out.push(format!("<{inner}>"));
                        i += close + 2;
                        continue;
                    }
                }
                out.push("<".to_string());
                i += 1;
            } else if is_word_char(c) {
                let start = i;
                while i < chars.len() && is_word_char(chars[i]) {
                    i += 1;
                }
                out.push(chars[start..i].iter().collect());
            } else {
                out.push(c.to_string());
                i += 1;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exactly_one_hundred_placeholders() {
        let v = Vocabulary::build(std::iter::empty());
        let ph: Vec<usize> = (0..v.len()).filter(|&i| placeholder_index(i).is_some()).collect();
        assert_eq!(ph.len(), N_PLACEHOLDERS);
        assert_eq!(v.token(placeholder_id(0)), "<e0>");
        assert_eq!(v.token(placeholder_id(99)), "<e99>");
    }

    #[test]
    fn ids_are_bijective() {
        let v = Vocabulary::build(["alpha beta gamma alpha"]);
        for id in 0..v.len() {
            assert_eq!(v.id(v.token(id)), id);
        }
    }

    #[test]
    fn simple_encoding() {
        let v = Vocabulary::build(["a b"]);
        assert_eq!(v.encode("a b"), vec![v.id("a"), v.id("b")]);
    }

    #[test]
    fn unknown_token_maps_to_unk() {
        let v = Vocabulary::build(["a b"]);
        assert_eq!(v.encode("zzz"), vec![UNK_ID]);
    }

    #[test]
    fn tags_stay_whole() {
        assert_eq!(tokenize("<e0> ran."), vec!["<e0>", "ran", "."]);
        assert_eq!(tokenize("<e12>Ash"), vec!["<e12>", "Ash"]);
        assert_eq!(tokenize("a<b"), vec!["a", "<", "b"]);
    }

    #[test]
    fn decode_inverts_encode_on_spaced_text() {
        let v = Vocabulary::build(["the quick fox jumps ."]);
        let text = "the quick fox jumps .";
        assert_eq!(v.decode(&v.encode(text)), text);
    }

    #[test]
    fn duplicate_tokens_rejected() {
        let mut toks = Vocabulary::build(std::iter::empty()).id_to_token;
        toks.push("dup".into());
        toks.push("dup".into());
        assert!(Vocabulary::from_tokens(toks).is_err());
    }
}
