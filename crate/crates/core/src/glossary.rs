//! Keyword glossary, word-level multi-pattern matching and keyword filtering.
//!
//! Keywords are matched case-insensitively on word boundaries: text and
//! keywords are split into alphanumeric words, and a keyword occurs where its
//! word sequence appears contiguously in the text. All keywords are compiled
//! into a single trie over interned word ids, so one left-to-right pass finds
//! every keyword. Overlaps resolve leftmost-longest and occurrences never
//! overlap, so "gold mine" in the text counts once for `gold mine` and not
//! also for `gold`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;

use crate::corpus::{Dataset, Document};
use crate::error::{Error, Result};
use crate::text;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlossaryEntry {
    /// Keyword as written in the glossary.
    pub keyword: String,
    pub definition: Option<String>,
}

/// A list of unique domain keywords.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Glossary {
    entries: Vec<GlossaryEntry>,
}

impl Glossary {
    /// Parses `keyword[<TAB>definition]` lines. `#` lines and blank lines are ignored.
    pub fn parse(source: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in source.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let (keyword, definition) = match line.split_once('\t') {
                Some((k, d)) => (k.trim(), Some(d.trim()).filter(|d| !d.is_empty())),
                None => (line.trim(), None),
            };
            if keyword.is_empty() {
                return Err(Error::Glossary(format!("line {}: empty keyword", i + 1)));
            }
            entries.push(GlossaryEntry {
                keyword: keyword.to_owned(),
                definition: definition.map(str::to_owned),
            });
        }
        Glossary::new(entries)
    }

    pub fn new(entries: Vec<GlossaryEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Glossary("empty glossary".into()));
        }
        let mut seen = HashMap::new();
        for entry in &entries {
            let key = normalized(&entry.keyword);
            if key.is_empty() {
                return Err(Error::Glossary(format!(
                    "keyword {:?} contains no words",
                    entry.keyword
                )));
            }
            if let Some(first) = seen.insert(key, &entry.keyword) {
                return Err(Error::Glossary(format!(
                    "duplicate keyword {:?} (same as {first:?})",
                    entry.keyword
                )));
            }
        }
        Ok(Glossary { entries })
    }

    pub fn from_keywords<I, S>(keywords: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Glossary::new(
            keywords
                .into_iter()
                .map(|k| GlossaryEntry {
                    keyword: k.into(),
                    definition: None,
                })
                .collect(),
        )
    }

    pub fn entries(&self) -> &[GlossaryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn normalized(keyword: &str) -> Vec<String> {
    text::words(keyword).collect()
}

pub fn load_glossary(path: impl AsRef<Path>) -> Result<Glossary> {
    let path = path.as_ref();
    let source = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Glossary::parse(&source)
}

/// Per-keyword occurrence counts for one document.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct KeywordMatchResult {
    /// Only keywords with a non-zero count appear.
    pub counts: BTreeMap<String, u64>,
    pub matched: bool,
}

#[derive(Debug, Default, Clone)]
struct Node {
    children: HashMap<u32, u32>,
    keyword: Option<u32>,
}

/// Compiled glossary. Immutable and shareable across threads.
#[derive(Debug, Clone)]
pub struct KeywordMatcher {
    vocabulary: HashMap<String, u32>,
    nodes: Vec<Node>,
    keywords: Vec<String>,
}

impl KeywordMatcher {
    pub fn new(glossary: &Glossary) -> Self {
        let mut vocabulary = HashMap::new();
        let mut nodes = vec![Node::default()];
        let mut keywords = Vec::with_capacity(glossary.len());
        for (k, entry) in glossary.entries().iter().enumerate() {
            let mut at = 0usize;
            for word in normalized(&entry.keyword) {
                let next_id = vocabulary.len() as u32;
                let id = *vocabulary.entry(word).or_insert(next_id);
                at = match nodes[at].children.get(&id) {
                    Some(&child) => child as usize,
                    None => {
                        nodes.push(Node::default());
                        let child = nodes.len() - 1;
                        nodes[at].children.insert(id, child as u32);
                        child
                    }
                };
            }
            nodes[at].keyword = Some(k as u32);
            keywords.push(entry.keyword.clone());
        }
        KeywordMatcher {
            vocabulary,
            nodes,
            keywords,
        }
    }

    pub fn keywords(&self) -> &[String] {
        &self.keywords
    }

    fn word_ids(&self, text: &str) -> Vec<Option<u32>> {
        text::words(text).map(|w| self.vocabulary.get(&w).copied()).collect()
    }

    /// Calls `on_match(keyword_index)` for every non-overlapping occurrence.
    /// Stops early when `on_match` returns false.
    fn scan(&self, text: &str, mut on_match: impl FnMut(usize) -> bool) {
        let ids = self.word_ids(text);
        let mut start = 0;
        while start < ids.len() {
            let mut node = 0usize;
            let mut best = None;
            for (offset, id) in ids[start..].iter().enumerate() {
                let Some(id) = id else { break };
                match self.nodes[node].children.get(id) {
                    Some(&child) => node = child as usize,
                    None => break,
                }
                if let Some(k) = self.nodes[node].keyword {
                    best = Some((k as usize, offset + 1));
                }
            }
            match best {
                Some((k, len)) => {
                    if !on_match(k) {
                        return;
                    }
                    start += len;
                }
                None => start += 1,
            }
        }
    }

    pub fn is_match(&self, text: &str) -> bool {
        let mut found = false;
        self.scan(text, |_| {
            found = true;
            false
        });
        found
    }

    /// Sparse `(keyword index, count)` pairs in keyword order.
    pub fn count_indices(&self, text: &str) -> Vec<(usize, u64)> {
        let mut counts: BTreeMap<usize, u64> = BTreeMap::new();
        self.scan(text, |k| {
            *counts.entry(k).or_default() += 1;
            true
        });
        counts.into_iter().collect()
    }

    pub fn match_text(&self, text: &str) -> KeywordMatchResult {
        let counts: BTreeMap<String, u64> = self
            .count_indices(text)
            .into_iter()
            .map(|(k, n)| (self.keywords[k].clone(), n))
            .collect();
        KeywordMatchResult {
            matched: !counts.is_empty(),
            counts,
        }
    }
}

pub fn match_keywords(doc: &Document, matcher: &KeywordMatcher) -> KeywordMatchResult {
    matcher.match_text(&doc.text)
}

/// Keeps documents containing at least one keyword, in input order.
///
/// Work is split into `batch_size` chunks, each matched in parallel; the
/// result does not depend on either.
pub fn filter_by_keywords(dataset: &Dataset, matcher: &KeywordMatcher, batch_size: usize) -> Result<Dataset> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let mut kept = Vec::new();
    for batch in dataset.documents().chunks(batch_size) {
        kept.extend(filter_batch(batch, matcher).into_iter().cloned());
    }
    Ok(Dataset::from_trusted(kept, dataset.provenance()))
}

pub(crate) fn filter_batch<'a>(batch: &'a [Document], matcher: &KeywordMatcher) -> Vec<&'a Document> {
    let flags: Vec<bool> = batch.par_iter().map(|d| matcher.is_match(&d.text)).collect();
    batch
        .iter()
        .zip(flags)
        .filter_map(|(d, keep)| keep.then_some(d))
        .collect()
}

/// Total occurrences per keyword, descending by count, ties alphabetical.
/// Keywords that never occur are omitted.
pub fn keyword_frequencies(dataset: &Dataset, matcher: &KeywordMatcher) -> Vec<(String, u64)> {
    let totals = dataset
        .documents()
        .par_iter()
        .fold(
            || vec![0u64; matcher.keywords.len()],
            |mut acc, doc| {
                for (k, n) in matcher.count_indices(&doc.text) {
                    acc[k] += n;
                }
                acc
            },
        )
        .reduce(
            || vec![0u64; matcher.keywords.len()],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );
    rank_counts(
        matcher
            .keywords
            .iter()
            .zip(totals)
            .filter(|(_, n)| *n > 0)
            .map(|(k, n)| (k.clone(), n))
            .collect(),
    )
}

fn rank_counts(mut counts: Vec<(String, u64)>) -> Vec<(String, u64)> {
    counts.sort_by(|(ka, na), (kb, nb)| {
        nb.cmp(na)
            .then_with(|| text::fold(ka).cmp(&text::fold(kb)))
            .then_with(|| ka.cmp(kb))
    });
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn matcher(keywords: &[&str]) -> KeywordMatcher {
        KeywordMatcher::new(&Glossary::from_keywords(keywords.iter().copied()).unwrap())
    }

    fn dataset(texts: &[&str]) -> Dataset {
        Dataset::new(
            texts
                .iter()
                .enumerate()
                .map(|(i, t)| Document::new(i.to_string(), *t, "s", "c"))
                .collect(),
            "test",
        )
        .unwrap()
    }

    #[test]
    fn parses_entries_with_optional_definitions() {
        let g = Glossary::parse("crusher\tmachine that breaks rock\ngold").unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.entries()[0].definition.as_deref(), Some("machine that breaks rock"));
        assert_eq!(g.entries()[1].definition, None);
    }

    #[test]
    fn comments_are_ignored() {
        let g = Glossary::parse("# mining terms\ncoal\n\n  # indented comment\ndrill\n").unwrap();
        assert_eq!(g.len(), 2);
    }

    #[test]
    fn case_insensitive_duplicates_rejected() {
        let err = Glossary::parse("Gold\ngold\n").unwrap_err();
        assert!(err.to_string().contains("gold"), "{err}");
    }

    #[test]
    fn empty_glossary_rejected() {
        let err = Glossary::parse("").unwrap_err();
        assert!(err.to_string().contains("empty glossary"));
        assert!(Glossary::parse("# only a comment\n").is_err());
    }

    #[test]
    fn empty_keyword_rejected() {
        assert!(Glossary::parse("\tdefinition without keyword").is_err());
        assert!(Glossary::parse("---").is_err());
    }

    #[test]
    fn counts_each_keyword_once_per_occurrence() {
        let m = matcher(&["crusher", "conveyor", "gold"]);
        let r = m.match_text("The crusher jammed near the conveyor");
        assert!(r.matched);
        assert_eq!(r.counts.len(), 2);
        assert_eq!(r.counts["crusher"], 1);
        assert_eq!(r.counts["conveyor"], 1);
    }

    #[test]
    fn word_boundaries_block_substrings() {
        let r = matcher(&["gold"]).match_text("goldfish");
        assert!(!r.matched);
        assert!(r.counts.is_empty());
    }

    #[test]
    fn matching_ignores_case() {
        assert_eq!(matcher(&["gold"]).match_text("Gold gold GOLD").counts["gold"], 3);
        assert_eq!(matcher(&["Crusher"]).match_text("crusher").counts["Crusher"], 1);
    }

    #[test]
    fn multi_word_keywords_need_contiguous_words() {
        let m = matcher(&["ball mill", "mill"]);
        assert_eq!(m.match_text("a Ball-Mill liner").counts["ball mill"], 1);
        let r = m.match_text("ball and mill");
        assert_eq!(r.counts.get("ball mill"), None);
        assert_eq!(r.counts["mill"], 1);
    }

    #[test]
    fn longest_keyword_wins_without_overlap() {
        let m = matcher(&["gold", "gold mine", "mine"]);
        let r = m.match_text("the gold mine and the gold");
        assert_eq!(r.counts["gold mine"], 1);
        assert_eq!(r.counts["gold"], 1);
        assert_eq!(r.counts.get("mine"), None);
        // prefix of a longer keyword falls back to the shorter match
        assert_eq!(m.match_text("gold mines").counts["gold"], 1);
    }

    #[test]
    fn filter_keeps_matching_documents_in_order() {
        let ds = dataset(&["no match", "coal seam", "nothing", "a drill rig", "still no"]);
        let out = filter_by_keywords(&ds, &matcher(&["coal", "drill"]), 2).unwrap();
        let ids: Vec<_> = out.iter().map(|d| d.id.as_str()).collect();
        assert_eq!(ids, ["1", "3"]);
        let none = filter_by_keywords(&ds, &matcher(&["uranium"]), 10).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn zero_batch_size_rejected() {
        assert!(filter_by_keywords(&dataset(&["x"]), &matcher(&["x"]), 0).is_err());
    }

    #[test]
    fn frequencies_sum_and_rank() {
        let ds = dataset(&["coal and coal", "coal, coal", "Coal coal"]);
        assert_eq!(keyword_frequencies(&ds, &matcher(&["coal"])), vec![("coal".into(), 6)]);
        let tie = dataset(&["drill coal"]);
        let ranked = keyword_frequencies(&tie, &matcher(&["drill", "coal", "gold"]));
        assert_eq!(ranked, vec![("coal".into(), 1), ("drill".into(), 1)]);
    }

    #[test]
    fn frequencies_recover_planted_counts() {
        // oracle: build the corpus with known plant counts
        let mut texts = Vec::new();
        for i in 0..40 {
            texts.push(format!("row {i} the crusher was serviced"));
        }
        for i in 0..10 {
            texts.push(format!("row {i} assay for gold ore"));
        }
        for i in 0..25 {
            texts.push(format!("row {i} goldfish and crushers are unrelated"));
        }
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let ranked = keyword_frequencies(&dataset(&refs), &matcher(&["gold", "crusher", "slurry"]));
        assert_eq!(ranked, vec![("crusher".into(), 40), ("gold".into(), 10)]);
    }

    #[test]
    fn batch_size_does_not_change_output() {
        let words = ["coal", "rock", "drill", "shale", "water", "truck", "gold", "sand"];
        let texts: Vec<String> = (0..10_000usize)
            .map(|i| {
                (0..6)
                    .map(|j| words[(i * 7 + j * 13 + i / 3) % words.len()])
                    .collect::<Vec<_>>()
                    .join(" ")
                    + if i % 5 == 0 { " crusher" } else { "" }
            })
            .collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let ds = dataset(&refs);
        let m = matcher(&["crusher", "gold drill"]);
        let oracle = filter_by_keywords(&ds, &m, ds.len()).unwrap();
        for batch in [1, 7, 1000] {
            assert_eq!(filter_by_keywords(&ds, &m, batch).unwrap(), oracle, "batch {batch}");
        }
    }

    proptest! {
        #[test]
        fn filter_is_an_idempotent_subsequence(
            texts in prop::collection::vec("(gold|coal|rock|sand|[a-z]{1,5})( (gold|coal|rock|sand|[a-z]{1,5})){0,6}", 0..30),
            batch in 1usize..10,
        ) {
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            let ds = dataset(&refs);
            let m = matcher(&["gold", "coal rock"]);
            let once = filter_by_keywords(&ds, &m, batch).unwrap();
            let mut it = ds.iter();
            for d in &once {
                prop_assert!(it.any(|x| x == d));
            }
            prop_assert_eq!(filter_by_keywords(&once, &m, batch).unwrap(), once.clone());
        }

        #[test]
        fn frequency_total_equals_per_document_counts(
            texts in prop::collection::vec("(gold|coal|rock|mine|[a-z]{1,4})( (gold|coal|rock|mine|[a-z]{1,4})){0,8}", 0..30),
        ) {
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            let ds = dataset(&refs);
            let m = matcher(&["gold", "gold mine", "coal", "rock"]);
            let table: u64 = keyword_frequencies(&ds, &m).iter().map(|(_, n)| n).sum();
            let per_doc: u64 = ds.iter().map(|d| match_keywords(d, &m).counts.values().sum::<u64>()).sum();
            prop_assert_eq!(table, per_doc);
        }
    }
}
