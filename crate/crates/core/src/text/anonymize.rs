//! Entity anonymization: replace surface mentions with `<e0>`, `<e1>`, ...
//! placeholders assigned in first-appearance order, and restore them back.

use crate::error::{CoreError, Result};
use crate::rng::{rng_from, subseed};
use crate::text::vocab::{placeholder_token, N_PLACEHOLDERS};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// A surface mention located by byte span in its document.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct EntityMention {
    pub surface: String,
    pub start: usize,
    pub end: usize,
}

/// One placeholder occurrence with its surface string.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct MentionOccurrence {
    pub entity: usize,
    pub surface: String,
}

/// True when `needle` occurs in `hay` bounded by non-word characters.
fn contains_word(hay: &str, needle: &str) -> bool {
    if needle.is_empty() {
        return false;
    }
    for (pos, _) in hay.match_indices(needle) {
        let before_ok = hay[..pos].chars().next_back().map_or(true, |c| !c.is_alphanumeric());
        let after_ok = hay[pos + needle.len()..].chars().next().map_or(true, |c| !c.is_alphanumeric());
        if before_ok && after_ok {
            return true;
        }
    }
    false
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind((0..n).collect())
    }
    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        // Keep the earlier-appearing surface as the root.
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.0[hi] = lo;
    }
}

/// Replace mentions with placeholders. Mentions whose string is a
/// case-sensitive, word-boundary substring of another mention's string
/// share that mention's placeholder. Returns the anonymized document and
/// every occurrence in order.
pub fn anonymize_entities(
    doc: &str,
    mentions: &[EntityMention],
) -> Result<(String, Vec<MentionOccurrence>)> {
    let mut prev_end = 0;
    for m in mentions {
        if m.start < prev_end || m.end > doc.len() || m.start >= m.end {
            return Err(CoreError::Span(format!(
                "mention spans must be sorted, non-overlapping, in-bounds: {}..{}",
                m.start, m.end
            )));
        }
        if &doc[m.start..m.end] != m.surface {
            return Err(CoreError::Structural(format!(
                "mention surface '{}' does not match document slice '{}'",
                m.surface,
                &doc[m.start..m.end]
            )));
        }
        prev_end = m.end;
    }

    // Distinct surfaces in first-appearance order.
    let mut surfaces: Vec<&str> = Vec::new();
    for m in mentions {
        if !surfaces.contains(&m.surface.as_str()) {
            surfaces.push(&m.surface);
        }
    }

    // Merge surfaces related by word-boundary inclusion.
    let mut uf = UnionFind::new(surfaces.len());
    for i in 0..surfaces.len() {
        for j in i + 1..surfaces.len() {
            if contains_word(surfaces[i], surfaces[j]) || contains_word(surfaces[j], surfaces[i]) {
                uf.union(i, j);
            }
        }
    }

    // Placeholder index per root, ordered by the root's first appearance.
    let mut entity_of_surface = vec![usize::MAX; surfaces.len()];
    let mut next = 0;
    let mut entity_of_root = std::collections::HashMap::new();
    for i in 0..surfaces.len() {
        let root = uf.find(i);
        let e = *entity_of_root.entry(root).or_insert_with(|| {
            let e = next;
            next += 1;
            e
        });
        entity_of_surface[i] = e;
    }
    if next > N_PLACEHOLDERS {
        return Err(CoreError::Capacity(format!(
            "{next} distinct entities exceed the {N_PLACEHOLDERS}-placeholder budget"
        )));
    }

    let mut out = String::with_capacity(doc.len());
    let mut occurrences = Vec::with_capacity(mentions.len());
    let mut cursor = 0;
    for m in mentions {
        out.push_str(&doc[cursor..m.start]);
        let sid = surfaces.iter().position(|&s| s == m.surface).unwrap();
        let entity = entity_of_surface[sid];
        out.push_str(&placeholder_token(entity));
        occurrences.push(MentionOccurrence { entity, surface: m.surface.clone() });
        cursor = m.end;
    }
    out.push_str(&doc[cursor..]);
    Ok((out, occurrences))
}

/// Replace each placeholder occurrence with its mention. A missing entry
/// falls back to the last mention already produced for that placeholder,
/// and otherwise to a seeded draw from the name pool.
pub fn restore_mentions(
    anonymized: &str,
    mention_map: &[Option<String>],
    name_pool: &[String],
    seed: u64,
) -> String {
    let mut rng = rng_from(subseed(seed, "restore-names"));
    let mut last_mention: std::collections::HashMap<usize, String> = std::collections::HashMap::new();
    let mut out = String::with_capacity(anonymized.len());
    let mut occurrence = 0;
    let mut rest = anonymized;
    while let Some((entity, start, end)) = next_placeholder(rest) {
        out.push_str(&rest[..start]);
        let supplied = mention_map.get(occurrence).and_then(|m| m.clone());
        let surface = match supplied {
            Some(s) => s,
            None => match last_mention.get(&entity) {
                Some(prev) => prev.clone(),
                None => {
                    if name_pool.is_empty() {
                        placeholder_token(entity)
                    } else {
                        name_pool[rng.gen_range(0..name_pool.len())].clone()
                    }
                }
            },
        };
        last_mention.insert(entity, surface.clone());
        out.push_str(&surface);
        occurrence += 1;
        rest = &rest[end..];
    }
    out.push_str(rest);
    out
}

/// Locate the next `<eNN>` placeholder; returns (entity, start, end).
pub fn next_placeholder(text: &str) -> Option<(usize, usize, usize)> {
    let mut search = 0;
    while let Some(rel) = text[search..].find("<e") {
        let start = search + rel;
        if let Some(close) = text[start..].find('>') {
            let inner = &text[start + 2..start + close];
            if !inner.is_empty() && inner.chars().all(|c| c.is_ascii_digit()) {
                if let Ok(e) = inner.parse::<usize>() {
                    if e < N_PLACEHOLDERS {
                        return Some((e, start, start + close + 1));
                    }
                }
            }
            search = start + 2;
        } else {
            return None;
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mentions_of(doc: &str, names: &[&str]) -> Vec<EntityMention> {
        let mut out = Vec::new();
        for name in names {
            let mut from = 0;
            while let Some(rel) = doc[from..].find(name) {
                let start = from + rel;
                out.push(EntityMention { surface: name.to_string(), start, end: start + name.len() });
                from = start + name.len();
            }
        }
        out.sort_by_key(|m| m.start);
        out
    }

    #[test]
    fn assigns_placeholders_in_first_appearance_order() {
        let doc = "Alice met Bob. Bob smiled.";
        let (anon, seq) = anonymize_entities(doc, &mentions_of(doc, &["Alice", "Bob"])).unwrap();
        assert_eq!(anon, "<e0> met <e1>. <e1> smiled.");
        assert_eq!(
            seq,
            vec![
                MentionOccurrence { entity: 0, surface: "Alice".into() },
                MentionOccurrence { entity: 1, surface: "Bob".into() },
                MentionOccurrence { entity: 1, surface: "Bob".into() },
            ]
        );
    }

    #[test]
    fn substring_mentions_share_a_placeholder() {
        let doc = "Bruce Wayne arrived. Bruce sat.";
        let mentions = vec![
            EntityMention { surface: "Bruce Wayne".into(), start: 0, end: 11 },
            EntityMention { surface: "Bruce".into(), start: 21, end: 26 },
        ];
        let (anon, seq) = anonymize_entities(doc, &mentions).unwrap();
        assert_eq!(anon, "<e0> arrived. <e0> sat.");
        assert_eq!(seq[0].entity, 0);
        assert_eq!(seq[1].entity, 0);
    }

    #[test]
    fn substring_matching_is_word_bounded() {
        // "Ann" occurs inside "Annette" only without a word boundary, so
        // the two stay distinct entities.
        let doc = "Annette waved. Ann left.";
        let mentions = vec![
            EntityMention { surface: "Annette".into(), start: 0, end: 7 },
            EntityMention { surface: "Ann".into(), start: 15, end: 18 },
        ];
        let (anon, _) = anonymize_entities(doc, &mentions).unwrap();
        assert_eq!(anon, "<e0> waved. <e1> left.");
    }

    #[test]
    fn no_entities_is_identity() {
        let doc = "Nothing to see.";
        let (anon, seq) = anonymize_entities(doc, &[]).unwrap();
        assert_eq!(anon, doc);
        assert!(seq.is_empty());
    }

    #[test]
    fn too_many_entities_is_a_capacity_error() {
        let names: Vec<String> = (0..101).map(|i| format!("P{i}x")).collect();
        let doc = names.join(" ");
        let mut mentions = Vec::new();
        let mut pos = 0;
        for n in &names {
            mentions.push(EntityMention { surface: n.clone(), start: pos, end: pos + n.len() });
            pos += n.len() + 1;
        }
        assert!(matches!(
            anonymize_entities(&doc, &mentions),
            Err(CoreError::Capacity(_))
        ));
    }

    #[test]
    fn overlapping_spans_rejected() {
        let doc = "Alice";
        let mentions = vec![
            EntityMention { surface: "Alic".into(), start: 0, end: 4 },
            EntityMention { surface: "lice".into(), start: 1, end: 5 },
        ];
        assert!(anonymize_entities(doc, &mentions).is_err());
    }

    #[test]
    fn restore_full_map_round_trips() {
        let doc = "Alice met Bob. Bob smiled.";
        let mentions = mentions_of(doc, &["Alice", "Bob"]);
        let (anon, seq) = anonymize_entities(doc, &mentions).unwrap();
        let map: Vec<Option<String>> = seq.iter().map(|o| Some(o.surface.clone())).collect();
        assert_eq!(restore_mentions(&anon, &map, &[], 0), doc);
    }

    #[test]
    fn restore_falls_back_to_last_mention() {
        let anon = "<e2> waved. <e2> left.";
        let map = vec![Some("Kim".to_string()), None];
        assert_eq!(restore_mentions(anon, &map, &[], 0), "Kim waved. Kim left.");
    }

    #[test]
    fn restore_unmapped_placeholder_draws_from_pool() {
        let anon = "<e3> waved.";
        let pool = vec!["Pat".to_string(), "Sam".to_string()];
        let a = restore_mentions(anon, &[None], &pool, 9);
        let b = restore_mentions(anon, &[None], &pool, 9);
        assert_eq!(a, b, "same seed, same draw");
        assert!(pool.iter().any(|n| a == format!("{n} waved.")));
    }
}
