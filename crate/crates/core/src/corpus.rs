//! Dataset ingestion: CSV loaders, a character-offset tokenizer, vocabulary,
//! id encoding, and seeded train/dev splits.
//!
//! Character indices are Unicode code points. On disk, span ends are
//! inclusive and an absent consequent is written as `-1,-1`; in memory it is
//! `None`. The `-1,-1` sentinel is this crate's own file convention.

use std::collections::HashMap;
use std::fs::File;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DETECTION_HEADER: [&str; 3] = ["sentenceID", "gold_label", "sentence"];
pub const SPAN_HEADER: [&str; 6] =
    ["sentenceID", "sentence", "antecedent_startid", "antecedent_endid", "consequent_startid", "consequent_endid"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Statement {
    pub id: String,
    pub text: String,
    /// Number of code points in `text`.
    pub length: usize,
}

impl Statement {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        let length = text.chars().count();
        Self { id: id.into(), text, length }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinaryLabel {
    NonCounterfactual,
    Counterfactual,
}

impl BinaryLabel {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::NonCounterfactual),
            1 => Some(Self::Counterfactual),
            _ => None,
        }
    }

    pub fn as_u8(self) -> u8 {
        match self {
            Self::NonCounterfactual => 0,
            Self::Counterfactual => 1,
        }
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.as_u8())
    }

    pub fn is_positive(self) -> bool {
        self == Self::Counterfactual
    }
}

/// Inclusive character range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CharSpan {
    pub start: usize,
    pub end: usize,
}

impl CharSpan {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, idx: usize) -> bool {
        self.start <= idx && idx <= self.end
    }

    /// True when the half-open range `[start, end)` shares a character.
    pub fn overlaps_half_open(&self, start: usize, end: usize) -> bool {
        start <= self.end && self.start < end
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpanQuad {
    pub antecedent: CharSpan,
    pub consequent: Option<CharSpan>,
}

impl SpanQuad {
    pub fn new(antecedent: CharSpan, consequent: Option<CharSpan>) -> Self {
        Self { antecedent, consequent }
    }

    /// Checks ordering and bounds against a statement of `length` characters.
    pub fn validate(&self, length: usize) -> Result<()> {
        let check = |name: &str, s: &CharSpan| {
            if s.start > s.end || s.end >= length {
                Err(Error::InvalidInput(format!(
                    "{name} span ({}, {}) invalid for statement of length {length}",
                    s.start, s.end
                )))
            } else {
                Ok(())
            }
        };
        check("antecedent", &self.antecedent)?;
        if let Some(c) = &self.consequent {
            check("consequent", c)?;
        }
        Ok(())
    }

    /// File form: four integers with `-1,-1` for an absent consequent.
    pub fn to_file_ids(&self) -> [i64; 4] {
        let (cs, ce) = match self.consequent {
            Some(c) => (c.start as i64, c.end as i64),
            None => (-1, -1),
        };
        [self.antecedent.start as i64, self.antecedent.end as i64, cs, ce]
    }
}

/// One token with its half-open character range in the source text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub surface: String,
    pub char_start: usize,
    pub char_end: usize,
}

fn open_csv(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(file))
}

fn check_header(reader: &mut csv::Reader<File>, expected: &[&str]) -> Result<()> {
    let header = reader.headers()?;
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != expected {
        return Err(Error::Row {
            row: 0,
            msg: format!("expected header {}, got {}", expected.join(","), got.join(",")),
        });
    }
    Ok(())
}

fn statement_from(row: usize, id: &str, text: &str) -> Result<Statement> {
    let s = Statement::new(id.trim(), text);
    if s.length == 0 {
        return Err(Error::Row { row, msg: "empty sentence".into() });
    }
    Ok(s)
}

/// Reads `sentenceID,gold_label,sentence` rows.
pub fn load_detection_data(path: impl AsRef<Path>) -> Result<Vec<(Statement, BinaryLabel)>> {
    let mut reader = open_csv(path.as_ref())?;
    check_header(&mut reader, &DETECTION_HEADER)?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Row { row, msg: e.to_string() })?;
        if rec.len() != 3 {
            return Err(Error::Row { row, msg: format!("expected 3 fields, got {}", rec.len()) });
        }
        let label = rec[1]
            .trim()
            .parse::<u8>()
            .ok()
            .and_then(BinaryLabel::from_u8)
            .ok_or_else(|| Error::Row { row, msg: format!("label must be 0 or 1, got {:?}", &rec[1]) })?;
        out.push((statement_from(row, &rec[0], &rec[2])?, label));
    }
    Ok(out)
}

/// Reads antecedent/consequent span rows. Consequent ids `-1,-1` mean absent.
pub fn load_span_data(path: impl AsRef<Path>) -> Result<Vec<(Statement, SpanQuad)>> {
    let mut reader = open_csv(path.as_ref())?;
    check_header(&mut reader, &SPAN_HEADER)?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Row { row, msg: e.to_string() })?;
        if rec.len() != 6 {
            return Err(Error::Row { row, msg: format!("expected 6 fields, got {}", rec.len()) });
        }
        let statement = statement_from(row, &rec[0], &rec[1])?;
        let mut ids = [0i64; 4];
        for (k, slot) in ids.iter_mut().enumerate() {
            *slot = rec[k + 2].trim().parse().map_err(|_| Error::Row {
                row,
                msg: format!("{} is not an integer: {:?}", SPAN_HEADER[k + 2], &rec[k + 2]),
            })?;
        }
        let quad = quad_from_ids(ids).map_err(|msg| Error::Row { row, msg })?;
        quad.validate(statement.length).map_err(|e| Error::Row { row, msg: e.to_string() })?;
        out.push((statement, quad));
    }
    Ok(out)
}

/// Reads statements from any CSV carrying `sentenceID` and `sentence`
/// columns, so detection and span files both work as prediction input.
pub fn load_statements(path: impl AsRef<Path>) -> Result<Vec<Statement>> {
    let mut reader = open_csv(path.as_ref())?;
    let header = reader.headers()?.clone();
    let column = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Row { row: 0, msg: format!("missing column {name}") })
    };
    let (id_col, text_col) = (column("sentenceID")?, column("sentence")?);
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Row { row, msg: e.to_string() })?;
        let (id, text) = match (rec.get(id_col), rec.get(text_col)) {
            (Some(id), Some(text)) => (id, text),
            _ => return Err(Error::Row { row, msg: format!("expected at least {} fields", id_col.max(text_col) + 1) }),
        };
        out.push(statement_from(row, id, text)?);
    }
    Ok(out)
}

fn quad_from_ids(ids: [i64; 4]) -> std::result::Result<SpanQuad, String> {
    if ids[0] < 0 || ids[1] < 0 {
        return Err("antecedent ids must be non-negative".into());
    }
    let antecedent = CharSpan::new(ids[0] as usize, ids[1] as usize);
    let consequent = match (ids[2], ids[3]) {
        (-1, -1) => None,
        (s, e) if s >= 0 && e >= 0 => Some(CharSpan::new(s as usize, e as usize)),
        (s, e) => return Err(format!("consequent ids ({s}, {e}) must both be -1 or both non-negative")),
    };
    Ok(SpanQuad { antecedent, consequent })
}

/// Writes span rows in the loader's format.
pub fn write_span_data(path: impl AsRef<Path>, rows: &[(Statement, SpanQuad)]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SPAN_HEADER)?;
    for (s, q) in rows {
        let ids = q.to_file_ids();
        w.write_record([
            s.id.clone(),
            s.text.clone(),
            ids[0].to_string(),
            ids[1].to_string(),
            ids[2].to_string(),
            ids[3].to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes detection rows in the loader's format.
pub fn write_detection_data(path: impl AsRef<Path>, rows: &[(Statement, BinaryLabel)]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(DETECTION_HEADER)?;
    for (s, l) in rows {
        w.write_record([s.id.as_str(), &l.as_u8().to_string(), s.text.as_str()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Seeded permutation split: the first `floor(ratio·N)` permuted items train.
///
/// A 1e-9 slack absorbs products such as `0.29·100` that land just below an
/// integer in floating point.
pub fn split<T: Clone>(data: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidInput(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    if data.len() < 2 {
        return Err(Error::InvalidInput(format!("cannot split {} items", data.len())));
    }
    let n_train = (ratio * data.len() as f64 + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train = order[..n_train].iter().map(|&i| data[i].clone()).collect();
    let dev = order[n_train..].iter().map(|&i| data[i].clone()).collect();
    Ok((train, dev))
}

fn is_apostrophe(c: char) -> bool {
    c == '\'' || c == '\u{2019}'
}

/// Splits on whitespace, then at punctuation. Every non-alphanumeric,
/// non-whitespace character is its own token, except apostrophes between
/// letters/digits (`wouldn't`) and `.`/`,` between digits (`3.5`, `1,000`).
pub fn tokenize(text: &str) -> Result<Vec<TokenSpan>> {
    let chars: Vec<char> = text.chars().collect();
    if chars.iter().all(|c| c.is_whitespace()) {
        return Err(Error::InvalidInput("cannot tokenize empty or whitespace-only text".into()));
    }
    let mut tokens = Vec::new();
    let mut word_start: Option<usize> = None;
    let flush = |tokens: &mut Vec<TokenSpan>, start: &mut Option<usize>, end: usize| {
        if let Some(s) = start.take() {
            tokens.push(TokenSpan { surface: chars[s..end].iter().collect(), char_start: s, char_end: end });
        }
    };
    for (i, &c) in chars.iter().enumerate() {
        let prev = i.checked_sub(1).map(|j| chars[j]);
        let next = chars.get(i + 1).copied();
        let joins_word = c.is_alphanumeric()
            || (is_apostrophe(c) && prev.is_some_and(char::is_alphanumeric) && next.is_some_and(char::is_alphanumeric))
            || ((c == '.' || c == ',')
                && prev.is_some_and(|p| p.is_ascii_digit())
                && next.is_some_and(|n| n.is_ascii_digit()));
        if joins_word {
            word_start.get_or_insert(i);
        } else {
            flush(&mut tokens, &mut word_start, i);
            if !c.is_whitespace() {
                tokens.push(TokenSpan { surface: c.to_string(), char_start: i, char_end: i + 1 });
            }
        }
    }
    flush(&mut tokens, &mut word_start, chars.len());
    Ok(tokens)
}

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
const RESERVED: [&str; 3] = ["[PAD]", "[UNK]", "[CLS]"];

/// Lowercased word vocabulary with reserved PAD/UNK/CLS ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Frequency-ranked (ties broken lexically) over the given texts, keeping
    /// tokens seen at least `min_freq` times, capped at `max_size` entries
    /// including the reserved ones.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_freq: usize, max_size: usize) -> Result<Self> {
        if max_size < RESERVED.len() {
            return Err(Error::Config(format!("vocabulary size {max_size} leaves no room for reserved ids")));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            if text.trim().is_empty() {
                continue;
            }
            for t in tokenize(text)? {
                *counts.entry(normalize_token(&t.surface)).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_freq.max(1)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens =
            RESERVED.iter().map(|s| s.to_string()).chain(ranked.into_iter().map(|(t, _)| t)).take(max_size).collect();
        Self::from_tokens(tokens)
    }

    /// Restores a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::InvalidInput("vocabulary must start with [PAD], [UNK], [CLS]".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, surface: &str) -> usize {
        self.index.get(&normalize_token(surface)).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Case-folds and maps the typographic apostrophe to `'`.
pub fn normalize_token(s: &str) -> String {
    s.to_lowercase().replace('\u{2019}', "'")
}

/// Fixed-length model input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedInput {
    /// Exactly `max_len` ids: CLS, tokens, then PAD.
    pub ids: Vec<usize>,
    /// CLS plus the tokens that fit.
    pub true_len: usize,
}

pub fn encode_ids(tokens: &[TokenSpan], vocab: &Vocab, max_len: usize) -> Result<EncodedInput> {
    if max_len < 2 {
        return Err(Error::Config(format!("max_len must be at least 2, got {max_len}")));
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(tokens.iter().take(max_len - 1).map(|t| vocab.id(&t.surface)));
    let true_len = ids.len();
    ids.resize(max_len, PAD);
    Ok(EncodedInput { ids, true_len })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn spans(text: &str) -> Vec<(String, usize, usize)> {
        tokenize(text).unwrap().into_iter().map(|t| (t.surface, t.char_start, t.char_end)).collect()
    }

    fn s(v: &str, a: usize, b: usize) -> (String, usize, usize) {
        (v.to_string(), a, b)
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(spans("If I had"), vec![s("If", 0, 2), s("I", 3, 4), s("had", 5, 8)]);
        assert_eq!(spans("mess."), vec![s("mess", 0, 4), s(".", 4, 5)]);
        assert_eq!(spans("wouldn't"), vec![s("wouldn't", 0, 8)]);
        assert_eq!(spans("'I wish'"), vec![s("'", 0, 1), s("I", 1, 2), s("wish", 3, 7), s("'", 7, 8)]);
        assert_eq!(spans("paid 1,000.50 dollars"), vec![s("paid", 0, 4), s("1,000.50", 5, 13), s("dollars", 14, 21)]);
        assert_eq!(spans("café, ok"), vec![s("café", 0, 4), s(",", 4, 5), s("ok", 6, 8)]);
        assert!(tokenize("").is_err());
        assert!(tokenize(" \t\n").is_err());
    }

    #[test]
    fn encode_pads_truncates_and_maps_unknowns() {
        let vocab = Vocab::build(["a b c a b c"], 2, 100).unwrap();
        let toks = tokenize("a b c").unwrap();
        let enc = encode_ids(&toks, &vocab, 8).unwrap();
        assert_eq!(enc.true_len, 4);
        assert_eq!(enc.ids[0], CLS);
        assert_eq!(&enc.ids[4..], &[PAD; 4]);
        assert!(enc.ids[1..4].iter().all(|&i| i > CLS));

        let enc = encode_ids(&tokenize("zebra").unwrap(), &vocab, 4).unwrap();
        assert_eq!(enc.ids, vec![CLS, UNK, PAD, PAD]);

        let long: String = (0..70).map(|_| "a ").collect();
        let enc = encode_ids(&tokenize(&long).unwrap(), &vocab, 64).unwrap();
        assert_eq!(enc.true_len, 64);
        assert_eq!(enc.ids.len(), 64);
        assert!(encode_ids(&toks, &vocab, 1).is_err());
    }

    #[test]
    fn vocab_ranking_and_cap() {
        let v = Vocab::build(["x y y z z z", "Z"], 2, 5).unwrap();
        assert_eq!(v.tokens(), &["[PAD]", "[UNK]", "[CLS]", "z", "y"]);
        assert_eq!(v.id("Z"), v.id("z"));
        assert_eq!(v.id("x"), UNK);
        let capped = Vocab::build(["x y y z z z"], 1, 4).unwrap();
        assert_eq!(capped.len(), 4);
        assert!(Vocab::from_tokens(vec!["a".into()]).is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let data: Vec<usize> = (0..3551).collect();
        let (tr, dv) = split(&data, 0.9, 7).unwrap();
        assert_eq!((tr.len(), dv.len()), (3195, 356));
        let (tr2, _) = split(&data, 0.9, 7).unwrap();
        assert_eq!(tr, tr2);
        let (tr3, _) = split(&data, 0.9, 8).unwrap();
        assert_ne!(tr, tr3);
        let mut all: Vec<usize> = tr.iter().chain(&dv).copied().collect();
        all.sort_unstable();
        assert_eq!(all, data);
        assert!(split(&data[..1], 0.9, 0).is_err());
        assert!(split(&data, 1.0, 0).is_err());
    }

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn detection_loader_parses_and_rejects() {
        let f = write_tmp("sentenceID,gold_label,sentence\nid1,1,\"If I had known, I would have come.\"\nid2,0,Thanks for the article.\n");
        let rows = load_detection_data(f.path()).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].1, BinaryLabel::Counterfactual);
        assert_eq!(rows[1].1, BinaryLabel::NonCounterfactual);
        assert_eq!(rows[0].0.text, "If I had known, I would have come.");

        let bad = write_tmp("sentenceID,gold_label,sentence\nid1,1,ok\nid2,2,bad\n");
        let err = load_detection_data(bad.path()).unwrap_err();
        assert!(matches!(err, Error::Row { row: 2, .. }), "{err}");

        let short = write_tmp("sentenceID,gold_label,sentence\nid1,1\n");
        assert!(matches!(load_detection_data(short.path()), Err(Error::Row { row: 1, .. })));

        let header = write_tmp("id,label,text\nid1,1,x\n");
        assert!(load_detection_data(header.path()).is_err());
    }

    #[test]
    fn span_loader_sentinels_and_bounds() {
        let head = SPAN_HEADER.join(",");
        let f =
            write_tmp(&format!("{head}\na,\"If it rained, we stayed.\",0,11,14,23\nb,I wish it were so.,0,17,-1,-1\n"));
        let rows = load_span_data(f.path()).unwrap();
        assert_eq!(rows[0].1.consequent, Some(CharSpan::new(14, 23)));
        assert_eq!(rows[1].1.consequent, None);

        let oob = write_tmp(&format!("{head}\na,short,0,5,-1,-1\n"));
        assert!(matches!(load_span_data(oob.path()), Err(Error::Row { row: 1, .. })));
        let no_ante = write_tmp(&format!("{head}\na,short,-1,-1,-1,-1\n"));
        assert!(load_span_data(no_ante.path()).is_err());
        let half = write_tmp(&format!("{head}\na,short,0,1,-1,3\n"));
        assert!(load_span_data(half.path()).is_err());
        let inverted = write_tmp(&format!("{head}\na,short,3,1,-1,-1\n"));
        assert!(load_span_data(inverted.path()).is_err());
    }
}
