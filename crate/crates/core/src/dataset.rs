//! Data model plus SemEval ABSA XML and canonical JSONL ingestion.
//!
//! A [`Sentence`] carries a set of (category, sentiment) pairs. Pairs use set
//! semantics: duplicates in a source file collapse to one entry and a warning
//! is logged. Sentences without pairs are kept at ingestion so nothing is
//! lost; callers drop them with [`labeled`] before augmentation or training.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("malformed XML at byte {offset}: {message}")]
    Xml { offset: u64, message: String },
    #[error("sentence {sentence_id:?}: {message}")]
    Record { sentence_id: String, message: String },
    #[error("line {line}: {message}")]
    Json { line: usize, message: String },
    #[error("duplicate sentence id {id:?} on lines {first_line} and {second_line}")]
    DuplicateId {
        id: String,
        first_line: usize,
        second_line: usize,
    },
    #[error("invalid value: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

/// Sentiment polarity. The declaration order is the class order used by the
/// classifier: positive = 0, neutral = 1, negative = 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Sentiment {
    Positive,
    Neutral,
    Negative,
}

impl Sentiment {
    pub const ALL: [Sentiment; 3] = [Sentiment::Positive, Sentiment::Neutral, Sentiment::Negative];

    pub fn as_str(self) -> &'static str {
        match self {
            Sentiment::Positive => "positive",
            Sentiment::Neutral => "neutral",
            Sentiment::Negative => "negative",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }
}

impl fmt::Display for Sentiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sentiment {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "positive" => Ok(Sentiment::Positive),
            "neutral" => Ok(Sentiment::Neutral),
            "negative" => Ok(Sentiment::Negative),
            _ => Err(DatasetError::Invalid(format!("unknown sentiment {s:?}"))),
        }
    }
}

impl Serialize for Sentiment {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Sentiment {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

/// One (aspect category, sentiment) label. Ordering is lexicographic on
/// (category, sentiment).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "RawPair")]
pub struct CategorySentimentPair {
    pub category: String,
    pub sentiment: Sentiment,
}

#[derive(Deserialize)]
struct RawPair {
    category: String,
    sentiment: Sentiment,
}

impl TryFrom<RawPair> for CategorySentimentPair {
    type Error = DatasetError;

    fn try_from(raw: RawPair) -> Result<Self> {
        CategorySentimentPair::new(&raw.category, raw.sentiment)
    }
}

impl CategorySentimentPair {
    /// Builds a pair, trimming the category. Empty categories are rejected.
    pub fn new(category: &str, sentiment: Sentiment) -> Result<Self> {
        let category = category.trim();
        if category.is_empty() {
            return Err(DatasetError::Invalid("empty category".into()));
        }
        Ok(Self {
            category: category.to_string(),
            sentiment,
        })
    }
}

impl fmt::Display for CategorySentimentPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.category, self.sentiment)
    }
}

pub type PairSet = BTreeSet<CategorySentimentPair>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSentence")]
pub struct Sentence {
    pub id: String,
    pub text: String,
    pub pairs: PairSet,
}

#[derive(Deserialize)]
struct RawSentence {
    id: String,
    text: String,
    #[serde(default)]
    pairs: Vec<CategorySentimentPair>,
}

impl TryFrom<RawSentence> for Sentence {
    type Error = DatasetError;

    fn try_from(raw: RawSentence) -> Result<Self> {
        Sentence::new(raw.id, raw.text, raw.pairs)
    }
}

impl Sentence {
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        pairs: impl IntoIterator<Item = CategorySentimentPair>,
    ) -> Result<Self> {
        let id = id.into();
        let text = text.into();
        if id.is_empty() {
            return Err(DatasetError::Invalid("empty sentence id".into()));
        }
        if text.trim().is_empty() {
            return Err(DatasetError::Record {
                sentence_id: id,
                message: "empty text".into(),
            });
        }
        let mut set = PairSet::new();
        for pair in pairs {
            if !set.insert(pair.clone()) {
                log::warn!("sentence {id:?}: duplicate pair {pair} collapsed");
            }
        }
        Ok(Self { id, text, pairs: set })
    }

    pub fn is_labeled(&self) -> bool {
        !self.pairs.is_empty()
    }

    /// Distinct categories among the pairs, sorted.
    pub fn categories(&self) -> BTreeSet<&str> {
        self.pairs.iter().map(|p| p.category.as_str()).collect()
    }
}

/// Sentences that carry at least one pair.
pub fn labeled(dataset: &[Sentence]) -> Vec<Sentence> {
    dataset.iter().filter(|s| s.is_labeled()).cloned().collect()
}

// ---------------------------------------------------------------------------
// SemEval XML
// ---------------------------------------------------------------------------

/// Sentences parsed in lenient mode plus the record errors that were skipped.
#[derive(Debug, Default)]
pub struct LenientParse {
    pub sentences: Vec<Sentence>,
    pub skipped: Vec<DatasetError>,
}

/// Parses a SemEval-2015/2016 ABSA document (`Reviews/Review/sentences/
/// sentence` with `Opinions/Opinion` children). Any malformed XML or invalid
/// record aborts.
pub fn parse_semeval_xml(bytes: &[u8]) -> Result<Vec<Sentence>> {
    let mut out = Vec::new();
    SemevalParser::new(bytes).run(&mut |outcome| match outcome {
        Ok(sentence) => {
            out.push(sentence);
            Ok(())
        }
        Err(e) => Err(e),
    })?;
    check_unique_ids(&out)?;
    Ok(out)
}

/// Like [`parse_semeval_xml`] but skips and logs invalid records. Malformed
/// XML ends parsing at the point of the error, keeping what came before.
pub fn parse_semeval_xml_lenient(bytes: &[u8]) -> LenientParse {
    let mut result = LenientParse::default();
    let mut seen = HashMap::new();
    let run = SemevalParser::new(bytes).run(&mut |outcome| {
        match outcome {
            Ok(sentence) => {
                if seen.insert(sentence.id.clone(), ()).is_some() {
                    let err = DatasetError::Record {
                        sentence_id: sentence.id.clone(),
                        message: "duplicate sentence id".into(),
                    };
                    log::warn!("skipping record: {err}");
                    result.skipped.push(err);
                } else {
                    result.sentences.push(sentence);
                }
            }
            Err(err) => {
                log::warn!("skipping record: {err}");
                result.skipped.push(err);
            }
        }
        Ok(())
    });
    if let Err(err) = run {
        log::warn!("stopping at malformed XML: {err}");
        result.skipped.push(err);
    }
    result
}

fn check_unique_ids(sentences: &[Sentence]) -> Result<()> {
    let mut seen = HashMap::new();
    for s in sentences {
        if seen.insert(s.id.as_str(), ()).is_some() {
            return Err(DatasetError::Record {
                sentence_id: s.id.clone(),
                message: "duplicate sentence id".into(),
            });
        }
    }
    Ok(())
}

#[derive(Default)]
struct PendingSentence {
    id: Option<String>,
    text: String,
    pairs: Vec<CategorySentimentPair>,
    error: Option<String>,
}

struct SemevalParser<'a> {
    reader: Reader<&'a [u8]>,
}

impl<'a> SemevalParser<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self {
            reader: Reader::from_reader(bytes),
        }
    }

    fn xml_error(&self, message: impl fmt::Display) -> DatasetError {
        DatasetError::Xml {
            offset: self.reader.buffer_position() as u64,
            message: message.to_string(),
        }
    }

    /// Streams sentences to `sink`. Record-level problems are delivered to the
    /// sink as `Err`; XML-level problems are returned.
    fn run(
        mut self,
        sink: &mut dyn FnMut(Result<Sentence>) -> Result<()>,
    ) -> Result<()> {
        let mut depth = 0usize;
        let mut current: Option<PendingSentence> = None;
        let mut in_text = false;

        loop {
            let event = match self.reader.read_event() {
                Ok(ev) => ev,
                Err(e) => return Err(self.xml_error(e)),
            };
            match event {
                Event::Start(start) => {
                    depth += 1;
                    match start.local_name().as_ref() {
                        b"sentence" => current = Some(self.open_sentence(&start)?),
                        b"text" if current.is_some() => in_text = true,
                        b"Opinion" | b"aspectCategory" => {
                            if let Some(pending) = current.as_mut() {
                                self.read_opinion(&start, pending)?;
                            }
                        }
                        _ => {}
                    }
                }
                Event::Empty(start) => match start.local_name().as_ref() {
                    b"sentence" => {
                        let pending = self.open_sentence(&start)?;
                        sink(finish_sentence(pending))?;
                    }
                    b"Opinion" | b"aspectCategory" => {
                        if let Some(pending) = current.as_mut() {
                            self.read_opinion(&start, pending)?;
                        }
                    }
                    _ => {}
                },
                Event::Text(text) if in_text => {
                    let unescaped = text.unescape().map_err(|e| self.xml_error(e))?;
                    if let Some(pending) = current.as_mut() {
                        pending.text.push_str(&unescaped);
                    }
                }
                Event::CData(data) if in_text => {
                    if let Some(pending) = current.as_mut() {
                        pending.text.push_str(&String::from_utf8_lossy(&data));
                    }
                }
                Event::End(end) => {
                    depth = depth
                        .checked_sub(1)
                        .ok_or_else(|| self.xml_error("unexpected closing tag"))?;
                    match end.local_name().as_ref() {
                        b"text" => in_text = false,
                        b"sentence" => {
                            if let Some(pending) = current.take() {
                                sink(finish_sentence(pending))?;
                            }
                        }
                        _ => {}
                    }
                }
                Event::Eof => {
                    if depth != 0 {
                        return Err(self.xml_error("unexpected end of document"));
                    }
                    return Ok(());
                }
                _ => {}
            }
        }
    }

    fn open_sentence(&self, start: &BytesStart<'_>) -> Result<PendingSentence> {
        let mut pending = PendingSentence::default();
        pending.id = self.attribute(start, b"id")?;
        Ok(pending)
    }

    fn read_opinion(&self, start: &BytesStart<'_>, pending: &mut PendingSentence) -> Result<()> {
        let category = self.attribute(start, b"category")?;
        let polarity = self.attribute(start, b"polarity")?;
        if pending.error.is_some() {
            return Ok(());
        }
        match (category, polarity) {
            (Some(category), Some(polarity)) => {
                let pair = polarity
                    .parse::<Sentiment>()
                    .map_err(|_| format!("unknown polarity {polarity:?}"))
                    .and_then(|s| {
                        CategorySentimentPair::new(&category, s).map_err(|e| e.to_string())
                    });
                match pair {
                    Ok(pair) => pending.pairs.push(pair),
                    Err(message) => pending.error = Some(message),
                }
            }
            (None, _) => pending.error = Some("opinion without category attribute".into()),
            (_, None) => pending.error = Some("opinion without polarity attribute".into()),
        }
        Ok(())
    }

    fn attribute(&self, start: &BytesStart<'_>, name: &[u8]) -> Result<Option<String>> {
        for attr in start.attributes() {
            let attr = attr.map_err(|e| self.xml_error(e))?;
            if attr.key.local_name().as_ref() == name {
                let value = attr.unescape_value().map_err(|e| self.xml_error(e))?;
                return Ok(Some(value.into_owned()));
            }
        }
        Ok(None)
    }
}

fn finish_sentence(pending: PendingSentence) -> Result<Sentence> {
    let id = pending.id.unwrap_or_default();
    if id.is_empty() {
        return Err(DatasetError::Record {
            sentence_id: String::new(),
            message: "sentence without id attribute".into(),
        });
    }
    if let Some(message) = pending.error {
        return Err(DatasetError::Record {
            sentence_id: id,
            message,
        });
    }
    Sentence::new(id, pending.text.trim(), pending.pairs)
}

// ---------------------------------------------------------------------------
// JSONL
// ---------------------------------------------------------------------------

/// Reads canonical JSONL, one sentence per line. Blank lines are ignored.
pub fn read_jsonl_from<R: BufRead>(reader: R) -> Result<Vec<Sentence>> {
    let mut out = Vec::new();
    let mut first_seen: HashMap<String, usize> = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sentence: Sentence = serde_json::from_str(&line).map_err(|e| DatasetError::Json {
            line: line_no,
            message: e.to_string(),
        })?;
        if let Some(&first_line) = first_seen.get(&sentence.id) {
            return Err(DatasetError::DuplicateId {
                id: sentence.id,
                first_line,
                second_line: line_no,
            });
        }
        first_seen.insert(sentence.id.clone(), line_no);
        out.push(sentence);
    }
    Ok(out)
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<Sentence>> {
    read_jsonl_from(BufReader::new(File::open(path)?))
}

pub fn write_jsonl_to<W: Write>(sentences: &[Sentence], mut writer: W) -> Result<()> {
    for s in sentences {
        serde_json::to_writer(&mut writer, s).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn write_jsonl(sentences: &[Sentence], path: impl AsRef<Path>) -> Result<()> {
    write_jsonl_to(sentences, BufWriter::new(File::create(path)?))
}

/// Loads a dataset by extension: `.xml` as SemEval, anything else as JSONL.
pub fn load(path: impl AsRef<Path>, lenient: bool) -> Result<Vec<Sentence>> {
    let path = path.as_ref();
    let is_xml = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("xml"));
    if is_xml {
        let bytes = std::fs::read(path)?;
        if lenient {
            Ok(parse_semeval_xml_lenient(&bytes).sentences)
        } else {
            parse_semeval_xml(&bytes)
        }
    } else {
        read_jsonl(path)
    }
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_sentences: usize,
    /// Sentences with at least one pair.
    pub n_labeled_sentences: usize,
    pub n_categories_distinct: usize,
    pub n_positive: usize,
    pub n_negative: usize,
    pub n_neutral: usize,
}

impl DatasetStats {
    pub fn n_pairs(&self) -> usize {
        self.n_positive + self.n_negative + self.n_neutral
    }
}

pub fn compute_stats(dataset: &[Sentence]) -> DatasetStats {
    let mut stats = DatasetStats {
        n_sentences: dataset.len(),
        ..Default::default()
    };
    let mut categories = BTreeSet::new();
    for sentence in dataset {
        if sentence.is_labeled() {
            stats.n_labeled_sentences += 1;
        }
        for pair in &sentence.pairs {
            categories.insert(pair.category.as_str());
            match pair.sentiment {
                Sentiment::Positive => stats.n_positive += 1,
                Sentiment::Neutral => stats.n_neutral += 1,
                Sentiment::Negative => stats.n_negative += 1,
            }
        }
    }
    stats.n_categories_distinct = categories.len();
    stats
}

/// Seeded shuffle split. Returns `(first, rest)` where `first` holds
/// `round(fraction * len)` sentences.
pub fn split_seeded(dataset: &[Sentence], fraction: f64, seed: u64) -> Result<(Vec<Sentence>, Vec<Sentence>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(DatasetError::Invalid(format!("split fraction {fraction} outside [0, 1]")));
    }
    let mut shuffled = dataset.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = (fraction * shuffled.len() as f64).round() as usize;
    let rest = shuffled.split_off(cut);
    Ok((shuffled, rest))
}
