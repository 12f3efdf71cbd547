//! Caption corpora, lexical resources and the shared caption tokenizer.
//!
//! Every downstream stage compares captions through [`normalize_caption`], so
//! two captions "differ by one word" exactly when their token sequences are at
//! token edit distance one.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },
    #[error("duplicate video_id {0:?}")]
    DuplicateId(String),
    #[error("unknown corpus format {0:?} (expected csv or jsonl)")]
    UnknownFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Lowercase, split on whitespace and trim non-alphanumeric characters from
/// both ends of every token. Tokens that become empty are dropped.
///
/// ```
/// use covr_forge::corpus::normalize_caption;
/// assert_eq!(normalize_caption("Aerial shot of a lake."), ["aerial", "shot", "of", "a", "lake"]);
/// ```
pub fn normalize_caption(raw: &str) -> Vec<String> {
    raw.to_lowercase()
        .split_whitespace()
        .map(|tok| tok.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|tok| !tok.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Canonical string form of a token sequence (single-space join).
pub fn caption_key<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, tok) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(tok.as_ref());
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Csv,
    Jsonl,
}

impl CorpusFormat {
    pub fn from_path(path: &Path) -> Result<Self, CorpusError> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Ok(CorpusFormat::Csv),
            Some("jsonl") | Some("ndjson") => Ok(CorpusFormat::Jsonl),
            other => Err(CorpusError::UnknownFormat(other.unwrap_or("").to_owned())),
        }
    }
}

impl std::str::FromStr for CorpusFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(CorpusFormat::Csv),
            "jsonl" => Ok(CorpusFormat::Jsonl),
            other => Err(CorpusError::UnknownFormat(other.to_owned())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionRecord {
    pub video_id: String,
    pub caption_raw: String,
    pub tokens: Vec<String>,
    pub duration_s: Option<f64>,
    pub flow_magnitude: Option<f64>,
    pub categories: Option<Vec<String>>,
}

impl CaptionRecord {
    pub fn new(video_id: impl Into<String>, caption: impl Into<String>) -> Self {
        let caption_raw = caption.into();
        let tokens = normalize_caption(&caption_raw);
        CaptionRecord {
            video_id: video_id.into(),
            caption_raw,
            tokens,
            duration_s: None,
            flow_magnitude: None,
            categories: None,
        }
    }

    pub fn with_flow(mut self, flow: f64) -> Self {
        self.flow_magnitude = Some(flow);
        self
    }

    pub fn key(&self) -> String {
        caption_key(&self.tokens)
    }
}

/// Wire form shared by the CSV and JSONL readers.
#[derive(Debug, Serialize, Deserialize)]
struct RawRow {
    video_id: String,
    caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    duration_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    flow_magnitude: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    categories: Option<Vec<String>>,
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    video_id: String,
    caption: String,
    #[serde(default)]
    duration_s: Option<f64>,
    #[serde(default)]
    flow_magnitude: Option<f64>,
    #[serde(default)]
    categories: Option<String>,
}

const CATEGORY_SEP: char = ';';

/// An immutable set of caption records keyed by unique `video_id`.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    records: Vec<CaptionRecord>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn from_records(records: Vec<CaptionRecord>) -> Result<Self, CorpusError> {
        let mut by_id = HashMap::with_capacity(records.len());
        for (i, rec) in records.iter().enumerate() {
            if by_id.insert(rec.video_id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateId(rec.video_id.clone()));
            }
        }
        Ok(Corpus { records, by_id })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[CaptionRecord] {
        &self.records
    }

    pub fn get(&self, video_id: &str) -> Option<&CaptionRecord> {
        self.by_id.get(video_id).map(|&i| &self.records[i])
    }

    pub fn contains(&self, video_id: &str) -> bool {
        self.by_id.contains_key(video_id)
    }

    /// Normalized caption key → sorted video ids carrying that caption.
    /// Records whose caption normalizes to nothing are left out.
    pub fn videos_by_caption(&self) -> BTreeMap<String, Vec<String>> {
        let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for rec in &self.records {
            if rec.tokens.is_empty() {
                continue;
            }
            groups.entry(rec.key()).or_default().push(rec.video_id.clone());
        }
        for ids in groups.values_mut() {
            ids.sort();
        }
        groups
    }

    /// Distinct normalized token sequences, sorted by key.
    pub fn distinct_captions(&self) -> Vec<Vec<String>> {
        let mut seen = HashSet::new();
        let mut out: Vec<Vec<String>> = self
            .records
            .iter()
            .filter(|r| !r.tokens.is_empty() && seen.insert(r.key()))
            .map(|r| r.tokens.clone())
            .collect();
        out.sort_by_key(|t| caption_key(t));
        out
    }
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> CorpusError {
    CorpusError::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

fn check_nonneg(path: &Path, line: u64, name: &str, v: Option<f64>) -> Result<(), CorpusError> {
    match v {
        Some(x) if !(x.is_finite() && x >= 0.0) => {
            Err(parse_err(path, line, format!("{name} must be a nonnegative number, got {x}")))
        }
        _ => Ok(()),
    }
}

fn record_from_row(path: &Path, line: u64, row: RawRow) -> Result<CaptionRecord, CorpusError> {
    if row.video_id.is_empty() {
        return Err(parse_err(path, line, "empty video_id"));
    }
    check_nonneg(path, line, "duration_s", row.duration_s)?;
    check_nonneg(path, line, "flow_magnitude", row.flow_magnitude)?;
    Ok(CaptionRecord {
        tokens: normalize_caption(&row.caption),
        video_id: row.video_id,
        caption_raw: row.caption,
        duration_s: row.duration_s,
        flow_magnitude: row.flow_magnitude,
        categories: row.categories,
    })
}

pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Corpus, CorpusError> {
    let records = match format {
        CorpusFormat::Csv => read_csv(path)?,
        CorpusFormat::Jsonl => read_jsonl(path)?,
    };
    let corpus = Corpus::from_records(records)?;
    log::info!("loaded {} caption records from {}", corpus.len(), path.display());
    Ok(corpus)
}

fn read_csv(path: &Path) -> Result<Vec<CaptionRecord>, CorpusError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| parse_err(path, 0, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    for required in ["video_id", "caption"] {
        if !headers.iter().any(|h| h == required) {
            return Err(parse_err(path, 1, format!("missing header column {required:?}")));
        }
    }
    let mut out = Vec::new();
    for result in reader.records() {
        let record = result.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let row: CsvRow = record
            .deserialize(Some(&headers))
            .map_err(|e| parse_err(path, line, e.to_string()))?;
        let categories = row.categories.filter(|c| !c.is_empty()).map(|c| {
            c.split(CATEGORY_SEP)
                .map(|s| s.trim().to_owned())
                .filter(|s| !s.is_empty())
                .collect()
        });
        out.push(record_from_row(
            path,
            line,
            RawRow {
                video_id: row.video_id,
                caption: row.caption,
                duration_s: row.duration_s,
                flow_magnitude: row.flow_magnitude,
                categories,
            },
        )?);
    }
    Ok(out)
}

fn read_jsonl(path: &Path) -> Result<Vec<CaptionRecord>, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i as u64 + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: RawRow =
            serde_json::from_str(&line).map_err(|e| parse_err(path, line_no, e.to_string()))?;
        out.push(record_from_row(path, line_no, row)?);
    }
    Ok(out)
}

pub fn save_corpus(corpus: &Corpus, path: &Path, format: CorpusFormat) -> Result<(), CorpusError> {
    let file = BufWriter::new(File::create(path)?);
    match format {
        CorpusFormat::Csv => {
            let mut w = csv::Writer::from_writer(file);
            w.write_record(["video_id", "caption", "duration_s", "flow_magnitude", "categories"])
                .map_err(|e| parse_err(path, 0, e.to_string()))?;
            for r in corpus.records() {
                let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
                let cats = r
                    .categories
                    .as_ref()
                    .map(|c| c.join(&CATEGORY_SEP.to_string()))
                    .unwrap_or_default();
                w.write_record([
                    r.video_id.as_str(),
                    r.caption_raw.as_str(),
                    &opt(r.duration_s),
                    &opt(r.flow_magnitude),
                    &cats,
                ])
                .map_err(|e| parse_err(path, 0, e.to_string()))?;
            }
            w.flush()?;
        }
        CorpusFormat::Jsonl => {
            let mut w = file;
            for r in corpus.records() {
                let row = RawRow {
                    video_id: r.video_id.clone(),
                    caption: r.caption_raw.clone(),
                    duration_s: r.duration_s,
                    flow_magnitude: r.flow_magnitude,
                    categories: r.categories.clone(),
                };
                serde_json::to_writer(&mut w, &row).map_err(std::io::Error::from)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

/// English dictionary plus zipf-scale word frequencies.
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    dictionary: HashSet<String>,
    zipf: HashMap<String, f64>,
}

impl Lexicon {
    pub fn new<I, S>(dictionary: I, zipf: impl IntoIterator<Item = (S, f64)>) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Lexicon {
            dictionary: dictionary.into_iter().map(|w| w.as_ref().to_lowercase()).collect(),
            zipf: zipf
                .into_iter()
                .map(|(w, s)| (w.as_ref().to_lowercase(), s))
                .collect(),
        }
    }

    pub fn in_dictionary(&self, word: &str) -> bool {
        self.dictionary.contains(word)
    }

    /// `None` means the word has no recorded frequency, which is not the
    /// same as a score of zero.
    pub fn zipf(&self, word: &str) -> Option<f64> {
        self.zipf.get(word).copied()
    }

    pub fn dictionary_len(&self) -> usize {
        self.dictionary.len()
    }

    pub fn zipf_len(&self) -> usize {
        self.zipf.len()
    }
}

pub fn load_lexicon(dict_path: &Path, zipf_path: &Path) -> Result<Lexicon, CorpusError> {
    let mut dictionary = HashSet::new();
    for (i, line) in BufReader::new(File::open(dict_path)?).lines().enumerate() {
        let line = line?;
        let word = line.trim();
        if word.is_empty() {
            continue;
        }
        if word.split_whitespace().count() != 1 {
            return Err(parse_err(dict_path, i as u64 + 1, "expected a single word"));
        }
        dictionary.insert(word.to_lowercase());
    }

    let mut zipf = HashMap::new();
    for (i, line) in BufReader::new(File::open(zipf_path)?).lines().enumerate() {
        let line_no = i as u64 + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (word, score) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(zipf_path, line_no, "expected word<TAB>score"))?;
        let score: f64 = score
            .trim()
            .parse()
            .map_err(|_| parse_err(zipf_path, line_no, format!("bad score {score:?}")))?;
        if !score.is_finite() || word.trim().is_empty() {
            return Err(parse_err(zipf_path, line_no, "expected word<TAB>score"));
        }
        zipf.insert(word.trim().to_lowercase(), score);
    }

    let lex = Lexicon { dictionary, zipf };
    log::info!(
        "lexicon: {} dictionary words, {} zipf entries",
        lex.dictionary_len(),
        lex.zipf_len()
    );
    Ok(lex)
}
