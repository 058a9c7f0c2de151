//! BEIR-style collections: line-delimited corpus and query records plus
//! tab-separated relevance judgments.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    #[serde(rename = "_id")]
    pub doc_id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
}

impl Document {
    pub fn new(
        doc_id: impl Into<String>,
        title: impl Into<String>,
        text: impl Into<String>,
    ) -> Self {
        Self {
            doc_id: doc_id.into(),
            title: title.into(),
            text: text.into(),
        }
    }

    pub fn has_title(&self) -> bool {
        !self.title.trim().is_empty()
    }

    /// Title first, separated from the body by one space.
    pub fn full_text(&self) -> String {
        if self.title.is_empty() {
            self.text.clone()
        } else {
            format!("{} {}", self.title, self.text)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    #[serde(rename = "_id")]
    pub query_id: String,
    pub text: String,
}

impl Query {
    pub fn new(query_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            query_id: query_id.into(),
            text: text.into(),
        }
    }
}

/// Ordered records with unique ids.
#[derive(Debug, Clone)]
pub struct Collection<T> {
    records: Vec<T>,
    by_id: HashMap<String, usize>,
}

pub type Corpus = Collection<Document>;
pub type Queries = Collection<Query>;

pub trait Record {
    fn id(&self) -> &str;
    fn validate(&self) -> Result<()>;
}

impl Record for Document {
    fn id(&self) -> &str {
        &self.doc_id
    }

    fn validate(&self) -> Result<()> {
        if self.doc_id.is_empty() {
            return Err(Error::InvalidRecord {
                id: String::new(),
                message: "empty _id".into(),
            });
        }
        if self.text.trim().is_empty() {
            return Err(Error::InvalidRecord {
                id: self.doc_id.clone(),
                message: "empty text".into(),
            });
        }
        Ok(())
    }
}

impl Record for Query {
    fn id(&self) -> &str {
        &self.query_id
    }

    fn validate(&self) -> Result<()> {
        if self.query_id.is_empty() {
            return Err(Error::InvalidRecord {
                id: String::new(),
                message: "empty _id".into(),
            });
        }
        if self.text.trim().is_empty() {
            return Err(Error::InvalidRecord {
                id: self.query_id.clone(),
                message: "empty text".into(),
            });
        }
        Ok(())
    }
}

impl<T: Record> Collection<T> {
    pub fn from_records(records: Vec<T>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            r.validate()?;
            if by_id.insert(r.id().to_string(), i).is_some() {
                return Err(Error::DuplicateId(r.id().to_string()));
            }
        }
        Ok(Self { records, by_id })
    }

    pub fn get(&self, id: &str) -> Option<&T> {
        self.by_id.get(id).map(|&i| &self.records[i])
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.records.iter()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.records
    }
}

impl<'a, T> IntoIterator for &'a Collection<T> {
    type Item = &'a T;
    type IntoIter = std::slice::Iter<'a, T>;

    fn into_iter(self) -> Self::IntoIter {
        self.records.iter()
    }
}

fn parse_lines<T, R>(reader: R) -> Result<Collection<T>>
where
    T: Record + for<'de> Deserialize<'de>,
    R: BufRead,
{
    let mut records = Vec::new();
    let mut by_id = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: T =
            serde_json::from_str(&line).map_err(|e| Error::parse(lineno, e.to_string()))?;
        record.validate()?;
        if by_id
            .insert(record.id().to_string(), records.len())
            .is_some()
        {
            return Err(Error::DuplicateId(record.id().to_string()));
        }
        records.push(record);
    }
    Ok(Collection { records, by_id })
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

pub fn parse_corpus<R: BufRead>(reader: R) -> Result<Corpus> {
    parse_lines(reader)
}

pub fn parse_queries<R: BufRead>(reader: R) -> Result<Queries> {
    parse_lines(reader)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let corpus = parse_corpus(open(path)?)?;
    log::info!("loaded {} documents from {}", corpus.len(), path.display());
    Ok(corpus)
}

pub fn load_queries(path: impl AsRef<Path>) -> Result<Queries> {
    let path = path.as_ref();
    let queries = parse_queries(open(path)?)?;
    log::info!("loaded {} queries from {}", queries.len(), path.display());
    Ok(queries)
}

/// Writes records back out in the same line-delimited layout they load from.
pub fn write_records<T: Serialize, W: Write>(records: &[T], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Stream(e.into()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Graded relevance judgments keyed by query then document.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    judgments: BTreeMap<String, BTreeMap<String, u32>>,
    duplicates: usize,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a judgment; an existing pair is overwritten and counted as a duplicate.
    pub fn insert(&mut self, query_id: impl Into<String>, doc_id: impl Into<String>, grade: u32) {
        let prev = self
            .judgments
            .entry(query_id.into())
            .or_default()
            .insert(doc_id.into(), grade);
        if prev.is_some() {
            self.duplicates += 1;
        }
    }

    pub fn grade(&self, query_id: &str, doc_id: &str) -> Option<u32> {
        self.judgments.get(query_id)?.get(doc_id).copied()
    }

    pub fn for_query(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(query_id)
    }

    /// Documents with grade >= `min_grade`, in doc id order.
    pub fn relevant(&self, query_id: &str, min_grade: u32) -> Vec<&str> {
        self.judgments
            .get(query_id)
            .map(|m| {
                m.iter()
                    .filter(|(_, &g)| g >= min_grade)
                    .map(|(d, _)| d.as_str())
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, u32)> {
        self.judgments
            .iter()
            .flat_map(|(q, m)| m.iter().map(move |(d, &g)| (q.as_str(), d.as_str(), g)))
    }

    pub fn len(&self) -> usize {
        self.judgments.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of (query, doc) pairs that were judged more than once while loading.
    pub fn duplicate_count(&self) -> usize {
        self.duplicates
    }

    /// Every judged query must exist in `queries`.
    pub fn check_queries(&self, queries: &Queries) -> Result<()> {
        match self.judgments.keys().find(|q| queries.get(q).is_none()) {
            Some(q) => Err(Error::UnknownId {
                kind: "query",
                id: q.clone(),
            }),
            None => Ok(()),
        }
    }

    pub fn write_tsv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "query-id\tcorpus-id\tscore")?;
        for (q, d, g) in self.iter() {
            writeln!(out, "{q}\t{d}\t{g}")?;
        }
        Ok(())
    }
}

fn split_row(line: &str) -> Vec<&str> {
    if line.contains('\t') {
        line.split('\t').map(str::trim).collect()
    } else {
        line.split_whitespace().collect()
    }
}

fn is_header(fields: &[&str]) -> bool {
    fields
        .first()
        .is_some_and(|f| f.eq_ignore_ascii_case("query-id"))
        || fields
            .get(2)
            .is_some_and(|f| f.eq_ignore_ascii_case("score"))
}

pub fn parse_qrels<R: BufRead>(reader: R) -> Result<Qrels> {
    let mut qrels = Qrels::new();
    let mut seen_row = false;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields = split_row(&line);
        if !seen_row && is_header(&fields) {
            seen_row = true;
            continue;
        }
        seen_row = true;
        let [q, d, g] = fields[..] else {
            return Err(Error::parse(
                lineno,
                format!("expected 3 columns, found {}", fields.len()),
            ));
        };
        if q.is_empty() || d.is_empty() {
            return Err(Error::parse(lineno, "empty query or document id"));
        }
        let grade: u32 = g.parse().map_err(|_| {
            Error::parse(lineno, format!("grade `{g}` is not a non-negative integer"))
        })?;
        qrels.insert(q, d, grade);
    }
    if qrels.duplicates > 0 {
        log::warn!(
            "{} duplicate qrels entries (last value kept)",
            qrels.duplicates
        );
    }
    Ok(qrels)
}

pub fn load_qrels(path: impl AsRef<Path>) -> Result<Qrels> {
    let path = path.as_ref();
    let qrels = parse_qrels(open(path)?)?;
    log::info!("loaded {} judgments from {}", qrels.len(), path.display());
    Ok(qrels)
}
