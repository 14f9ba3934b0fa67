//! Text dataset model, streaming JSONL I/O, token counting and composition reports.
//!
//! One document per line: `{"id": str, "text": str, "source": str, "category": str}`.
//! Only `text` is required. Extra keys are kept in [`Document::extra`] and written
//! back after the four standard fields, in their original order.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::text;

/// Value used for `source` and `category` when a row omits them.
pub const UNKNOWN: &str = "unknown";

/// One text row.
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub source: String,
    pub category: String,
    /// Keys outside the standard four, preserved for round-trips.
    pub extra: Map<String, Value>,
}

impl Document {
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        source: impl Into<String>,
        category: impl Into<String>,
    ) -> Self {
        Document {
            id: id.into(),
            text: text.into(),
            source: source.into(),
            category: category.into(),
            extra: Map::new(),
        }
    }

    /// Builds a document from one parsed JSONL object. `line` supplies the
    /// default id.
    pub fn from_json(mut object: Map<String, Value>, line: usize) -> Result<Self, String> {
        let text = match object.remove("text") {
            Some(Value::String(s)) => s,
            Some(_) => return Err("\"text\" must be a string".into()),
            None => return Err("missing \"text\" field".into()),
        };
        if text.trim().is_empty() {
            return Err("\"text\" is empty".into());
        }
        let id = match object.remove("id") {
            Some(Value::String(s)) => s,
            Some(Value::Number(n)) => n.to_string(),
            Some(Value::Null) | None => line.to_string(),
            Some(_) => return Err("\"id\" must be a string or integer".into()),
        };
        let mut label = |key: &str| match object.remove(key) {
            Some(Value::String(s)) => Ok(s),
            Some(Value::Null) | None => Ok(UNKNOWN.to_owned()),
            Some(_) => Err(format!("{key:?} must be a string")),
        };
        let source = label("source")?;
        let category = label("category")?;
        Ok(Document {
            id,
            text,
            source,
            category,
            extra: object,
        })
    }

    pub fn to_json(&self) -> Map<String, Value> {
        let mut object = Map::with_capacity(4 + self.extra.len());
        object.insert("id".into(), Value::String(self.id.clone()));
        object.insert("text".into(), Value::String(self.text.clone()));
        object.insert("source".into(), Value::String(self.source.clone()));
        object.insert("category".into(), Value::String(self.category.clone()));
        for (k, v) in &self.extra {
            object.insert(k.clone(), v.clone());
        }
        object
    }
}

/// An ordered collection of documents with unique ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    documents: Vec<Document>,
    provenance: String,
}

impl Dataset {
    /// Validates id uniqueness and non-empty text.
    pub fn new(documents: Vec<Document>, provenance: impl Into<String>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(documents.len());
        for doc in &documents {
            if doc.text.trim().is_empty() {
                return Err(Error::invalid(format!("document {:?} has empty text", doc.id)));
            }
            if !seen.insert(doc.id.as_str()) {
                return Err(Error::DuplicateId(doc.id.clone()));
            }
        }
        Ok(Dataset {
            documents,
            provenance: provenance.into(),
        })
    }

    pub fn empty(provenance: impl Into<String>) -> Self {
        Dataset {
            documents: Vec::new(),
            provenance: provenance.into(),
        }
    }

    /// Keeps the documents for which `keep` returns true. Order is preserved.
    pub fn filtered(&self, mut keep: impl FnMut(&Document) -> bool) -> Dataset {
        Dataset {
            documents: self.documents.iter().filter(|d| keep(d)).cloned().collect(),
            provenance: self.provenance.clone(),
        }
    }

    pub(crate) fn from_trusted(documents: Vec<Document>, provenance: impl Into<String>) -> Self {
        Dataset {
            documents,
            provenance: provenance.into(),
        }
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn into_documents(self) -> Vec<Document> {
        self.documents
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Document> {
        self.documents.iter()
    }

    pub fn get(&self, index: usize) -> Option<&Document> {
        self.documents.get(index)
    }
}

impl<'a> IntoIterator for &'a Dataset {
    type Item = &'a Document;
    type IntoIter = std::slice::Iter<'a, Document>;

    fn into_iter(self) -> Self::IntoIter {
        self.documents.iter()
    }
}

/// Streaming JSONL reader. Fails on the first malformed line or repeated id.
///
/// Whitespace-only lines are skipped but still counted for line numbers.
pub struct JsonlReader<R> {
    lines: std::io::Lines<R>,
    path: PathBuf,
    line: usize,
    seen: HashSet<String>,
    failed: bool,
}

impl JsonlReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(JsonlReader::new(BufReader::new(file), path))
    }
}

impl<R: BufRead> JsonlReader<R> {
    pub fn new(reader: R, path: impl Into<PathBuf>) -> Self {
        JsonlReader {
            lines: reader.lines(),
            path: path.into(),
            line: 0,
            seen: HashSet::new(),
            failed: false,
        }
    }

    /// Reads up to `n` documents.
    pub fn next_batch(&mut self, n: usize) -> Result<Vec<Document>> {
        let mut batch = Vec::with_capacity(n.min(1 << 16));
        while batch.len() < n {
            match self.next() {
                Some(doc) => batch.push(doc?),
                None => break,
            }
        }
        Ok(batch)
    }

    fn parse_error(&mut self, message: impl Into<String>) -> Error {
        self.failed = true;
        Error::Parse {
            path: self.path.clone(),
            line: self.line,
            message: message.into(),
        }
    }
}

impl<R: BufRead> Iterator for JsonlReader<R> {
    type Item = Result<Document>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            let raw = match self.lines.next()? {
                Ok(raw) => raw,
                Err(e) => {
                    self.failed = true;
                    return Some(Err(Error::io(self.path.clone(), e)));
                }
            };
            self.line += 1;
            if raw.trim().is_empty() {
                continue;
            }
            let object = match serde_json::from_str::<Value>(&raw) {
                Ok(Value::Object(object)) => object,
                Ok(_) => return Some(Err(self.parse_error("expected a JSON object"))),
                Err(e) => return Some(Err(self.parse_error(format!("malformed JSON: {e}")))),
            };
            let doc = match Document::from_json(object, self.line) {
                Ok(doc) => doc,
                Err(message) => return Some(Err(self.parse_error(message))),
            };
            if !self.seen.insert(doc.id.clone()) {
                let message = format!("duplicate document id {:?}", doc.id);
                return Some(Err(self.parse_error(message)));
            }
            return Some(Ok(doc));
        }
    }
}

/// Loads a whole JSONL file.
pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let documents = JsonlReader::open(path)?.collect::<Result<Vec<_>>>()?;
    Ok(Dataset::from_trusted(documents, path.display().to_string()))
}

/// Buffered JSONL writer.
pub struct JsonlWriter<W: Write> {
    out: W,
    path: PathBuf,
}

impl JsonlWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(JsonlWriter {
            out: BufWriter::new(file),
            path: path.to_owned(),
        })
    }

    pub fn append(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::options()
            .append(true)
            .create(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(JsonlWriter {
            out: BufWriter::new(file),
            path: path.to_owned(),
        })
    }
}

impl<W: Write> JsonlWriter<W> {
    pub fn new(out: W, path: impl Into<PathBuf>) -> Self {
        JsonlWriter { out, path: path.into() }
    }

    pub fn write_document(&mut self, doc: &Document) -> Result<()> {
        self.write_value(&doc.to_json())
    }

    /// Writes any serializable record as one line.
    pub fn write_value<T: Serialize + ?Sized>(&mut self, value: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, value)?;
        self.out.write_all(b"\n").map_err(|e| Error::io(self.path.clone(), e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(self.path.clone(), e))
    }

    pub fn into_inner(mut self) -> Result<W> {
        self.flush()?;
        Ok(self.out)
    }
}

pub fn write_jsonl(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_documents(dataset.documents(), path)
}

pub fn write_documents(docs: &[Document], path: impl AsRef<Path>) -> Result<()> {
    let mut writer = JsonlWriter::create(path)?;
    for doc in docs {
        writer.write_document(doc)?;
    }
    writer.flush()
}

/// Reads arbitrary JSONL records (QA pairs, eval records, ...).
pub fn read_records<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_records<T: Serialize>(records: &[T], path: impl AsRef<Path>) -> Result<()> {
    let mut writer = JsonlWriter::create(path)?;
    for record in records {
        writer.write_value(record)?;
    }
    writer.flush()
}

/// Counts tokens in one text.
pub trait TokenCounter: Sync {
    fn count(&self, text: &str) -> usize;
}

/// Counts maximal non-whitespace runs. An approximation of model tokenizers.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceCounter;

impl TokenCounter for WhitespaceCounter {
    fn count(&self, text: &str) -> usize {
        text::whitespace_tokens(text)
    }
}

impl<F: Fn(&str) -> usize + Sync> TokenCounter for F {
    fn count(&self, text: &str) -> usize {
        self(text)
    }
}

pub fn token_count(dataset: &Dataset, counter: &dyn TokenCounter) -> u64 {
    dataset.iter().map(|d| counter.count(&d.text) as u64).sum()
}

/// Rows and tokens per category.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CompositionReport {
    pub rows: BTreeMap<String, u64>,
    pub tokens: BTreeMap<String, u64>,
    pub total_rows: u64,
    pub total_tokens: u64,
}

impl CompositionReport {
    pub fn add(&mut self, category: &str, rows: u64, tokens: u64) {
        *self.rows.entry(category.to_owned()).or_default() += rows;
        *self.tokens.entry(category.to_owned()).or_default() += tokens;
        self.total_rows += rows;
        self.total_tokens += tokens;
    }

    /// Plain-text table with token counts in millions.
    pub fn to_table(&self) -> String {
        let mut out = String::from("category\trows\ttokens_m\n");
        for (category, rows) in &self.rows {
            let tokens = self.tokens.get(category).copied().unwrap_or(0);
            out += &format!("{category}\t{rows}\t{:.1}\n", tokens as f64 / 1e6);
        }
        out += &format!("total\t{}\t{:.1}\n", self.total_rows, self.total_tokens as f64 / 1e6);
        out
    }
}

pub fn composition_report(dataset: &Dataset) -> CompositionReport {
    composition_report_with(dataset, &WhitespaceCounter)
}

pub fn composition_report_with(dataset: &Dataset, counter: &dyn TokenCounter) -> CompositionReport {
    let mut report = CompositionReport::default();
    for doc in dataset {
        report.add(&doc.category, 1, counter.count(&doc.text) as u64);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(id: &str, text: &str, category: &str) -> Document {
        Document::new(id, text, "test", category)
    }

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> PathBuf {
        let path = dir.path().join(name);
        std::fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn empty_file_reads_as_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let ds = read_jsonl(write(&dir, "e.jsonl", "")).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn lines_read_in_order_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            &dir,
            "a.jsonl",
            "{\"text\":\"first row\"}\n{\"id\":\"b\",\"text\":\"second\",\"source\":\"c4\",\"category\":\"open_data\"}\n",
        );
        let ds = read_jsonl(&path).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.documents()[0].id, "1");
        assert_eq!(ds.documents()[0].source, UNKNOWN);
        assert_eq!(ds.documents()[0].category, UNKNOWN);
        assert_eq!(ds.documents()[1].id, "b");
        assert_eq!(ds.documents()[1].category, "open_data");
    }

    #[test]
    fn malformed_line_names_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(&dir, "bad.jsonl", "{\"text\":\"a\"}\n{\"text\":\"b\"}\nnot json\n");
        let err = read_jsonl(&path).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        assert!(err.to_string().contains("line 3"));
    }

    #[test]
    fn duplicate_ids_fail() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            &dir,
            "d.jsonl",
            "{\"id\":\"x\",\"text\":\"a\"}\n{\"id\":\"x\",\"text\":\"b\"}\n",
        );
        let err = read_jsonl(&path).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
        assert!(Dataset::new(vec![doc("x", "a", "c"), doc("x", "b", "c")], "").is_err());
    }

    #[test]
    fn missing_or_blank_text_fails() {
        let dir = tempfile::tempdir().unwrap();
        assert!(read_jsonl(write(&dir, "m.jsonl", "{\"id\":\"a\"}\n")).is_err());
        assert!(read_jsonl(write(&dir, "w.jsonl", "{\"text\":\"  \"}\n")).is_err());
    }

    #[test]
    fn unicode_and_extra_keys_survive_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let src = write(
            &dir,
            "u.jsonl",
            "{\"id\":\"u\",\"text\":\"ördeği\",\"source\":\"s\",\"category\":\"c\",\"zeta\":1,\"alpha\":[true]}\n",
        );
        let ds = read_jsonl(&src).unwrap();
        let out = dir.path().join("out.jsonl");
        write_jsonl(&ds, &out).unwrap();
        let back = read_jsonl(&out).unwrap();
        assert_eq!(back.documents(), ds.documents());
        assert_eq!(back.documents()[0].text.as_bytes(), "ördeği".as_bytes());
        let line = std::fs::read_to_string(&out).unwrap();
        assert!(line.find("zeta").unwrap() < line.find("alpha").unwrap());
    }

    #[test]
    fn empty_dataset_writes_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("empty.jsonl");
        write_jsonl(&Dataset::empty("none"), &out).unwrap();
        assert_eq!(std::fs::read(&out).unwrap().len(), 0);
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let err = write_jsonl(&Dataset::empty(""), "/nonexistent-dir/x.jsonl").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn token_counts() {
        let one = Dataset::new(vec![doc("a", "The crusher jammed", "x")], "").unwrap();
        assert_eq!(token_count(&one, &WhitespaceCounter), 3);
        assert_eq!(token_count(&Dataset::empty(""), &WhitespaceCounter), 0);
        let four = Dataset::new((0..4).map(|i| doc(&i.to_string(), "a b c d e", "x")).collect(), "").unwrap();
        assert_eq!(token_count(&four, &WhitespaceCounter), 20);
        let chars = |t: &str| t.chars().count();
        assert_eq!(token_count(&one, &chars), 18);
    }

    #[test]
    fn composition_counts_categories() {
        let docs = ["A", "A", "A", "B", "B"]
            .iter()
            .enumerate()
            .map(|(i, c)| doc(&i.to_string(), "one two", c))
            .collect();
        let report = composition_report(&Dataset::new(docs, "").unwrap());
        assert_eq!(report.rows["A"], 3);
        assert_eq!(report.rows["B"], 2);
        assert_eq!(report.total_rows, 5);
        assert_eq!(report.total_tokens, 10);
    }

    #[test]
    fn composition_arithmetic_on_published_row_counts() {
        let mut report = CompositionReport::default();
        report.add("open_data", 76_229, 0);
        report.add("thesis_reports", 91_628, 0);
        assert_eq!(report.total_rows, 167_857);
        assert!(report.to_table().contains("total\t167857"));
    }

    fn arb_dataset() -> impl Strategy<Value = Dataset> {
        prop::collection::vec(("[a-z]{1,3}", "[a-zA-Zö ]{0,20}[a-z]", "[a-z]{1,2}"), 0..20).prop_map(|rows| {
            let docs = rows
                .into_iter()
                .enumerate()
                .map(|(i, (src, text, cat))| Document::new(format!("d{i}"), text, src, cat))
                .collect();
            Dataset::new(docs, "prop").unwrap()
        })
    }

    proptest! {
        #[test]
        fn jsonl_round_trip_is_identity(ds in arb_dataset()) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("rt.jsonl");
            write_jsonl(&ds, &path).unwrap();
            let back = read_jsonl(&path).unwrap();
            prop_assert_eq!(back.documents(), ds.documents());
        }

        #[test]
        fn token_count_is_additive(a in arb_dataset(), b in arb_dataset()) {
            let joined: Vec<Document> = a.iter().cloned()
                .chain(b.iter().cloned().map(|mut d| { d.id.insert(0, 'b'); d }))
                .collect();
            let joined = Dataset::new(joined, "").unwrap();
            prop_assert_eq!(
                token_count(&joined, &WhitespaceCounter),
                token_count(&a, &WhitespaceCounter) + token_count(&b, &WhitespaceCounter)
            );
        }

        #[test]
        fn composition_totals_match(ds in arb_dataset()) {
            let r = composition_report(&ds);
            prop_assert_eq!(r.total_rows as usize, ds.len());
            prop_assert_eq!(r.rows.values().sum::<u64>(), r.total_rows);
            prop_assert_eq!(r.tokens.values().sum::<u64>(), r.total_tokens);
        }
    }
}
