//! Which final-layer heads attend to which tokens.
//!
//! A token's score under a head is the attention it receives as a key,
//! averaged over the unpadded query rows. The heads attaining the per-token
//! maximum are reported 1-based. Tokens are also tagged with a coarse lexical
//! category, and whole statements can be rendered with antecedent and
//! consequent markers or exported as heatmap JSON.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{normalize_token, SpanQuad, Statement, TokenSpan, CLS};
use crate::encoder::AttentionStack;
use crate::error::{Error, Result};
use crate::model::{HeadKind, Model, Pass};
use crate::spans::{denormalize, NormalizedSpanQuad};

/// Relative tolerance for head ties.
pub const TIE_TOLERANCE: f64 = 1e-9;

/// `scores[h][j]`: mean attention token `j` receives under head `h`.
pub fn received_attention(att: &AttentionStack, true_len: usize) -> Result<Vec<Vec<f64>>> {
    if true_len == 0 || true_len > att.num_tokens() {
        return Err(Error::InvalidInput(format!("true_len {true_len} invalid for {} tokens", att.num_tokens())));
    }
    let scores = (0..att.num_heads())
        .map(|h| {
            let mut col = vec![0.0; true_len];
            for q in 0..true_len {
                for (c, w) in col.iter_mut().zip(att.row(h, q)) {
                    *c += w;
                }
            }
            col.iter_mut().for_each(|c| *c /= true_len as f64);
            col
        })
        .collect();
    Ok(scores)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenHeads {
    /// Score per head, head-major order.
    pub scores: Vec<f64>,
    /// 1-based heads within tolerance of the maximum.
    pub heads: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadAttribution {
    pub tokens: Vec<TokenHeads>,
}

/// Per token, every head whose score is within a relative `1e-9` of the best.
pub fn top_heads(scores: &[Vec<f64>]) -> HeadAttribution {
    let tokens = scores.first().map_or(0, Vec::len);
    let tokens = (0..tokens)
        .map(|j| {
            let col: Vec<f64> = scores.iter().map(|h| h[j]).collect();
            let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let heads = col
                .iter()
                .enumerate()
                .filter(|(_, s)| max - **s <= TIE_TOLERANCE * max.abs())
                .map(|(h, _)| h + 1)
                .collect();
            TokenHeads { scores: col, heads }
        })
        .collect();
    HeadAttribution { tokens }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LexCategory {
    Punctuation,
    AuxVerb,
    Conjunction,
    Numeral,
    Other,
}

const AUX_VERBS: &[&str] = &[
    "would",
    "wouldn't",
    "could",
    "couldn't",
    "should",
    "shouldn't",
    "had",
    "has",
    "have",
    "was",
    "were",
    "wish",
    "'d",
    "'ll",
    "will",
    "won't",
    "can",
    "can't",
    "might",
    "must",
];

const CONJUNCTIONS: &[&str] = &["if", "but", "and", "or", "unless", "though", "because", "so"];

const NUMBER_WORDS: &[&str] = &[
    "zero",
    "one",
    "two",
    "three",
    "four",
    "five",
    "six",
    "seven",
    "eight",
    "nine",
    "ten",
    "eleven",
    "twelve",
    "thirteen",
    "fourteen",
    "fifteen",
    "sixteen",
    "seventeen",
    "eighteen",
    "nineteen",
    "twenty",
    "thirty",
    "forty",
    "fifty",
    "sixty",
    "seventy",
    "eighty",
    "ninety",
    "hundred",
    "thousand",
    "million",
    "billion",
    "trillion",
];

fn is_number(s: &str) -> bool {
    let digits: String = s.chars().filter(|c| *c != ',').collect();
    digits.chars().any(|c| c.is_ascii_digit()) && digits.parse::<f64>().is_ok_and(f64::is_finite)
}

pub fn lexical_tag(surface: &str) -> LexCategory {
    let s = normalize_token(surface);
    if !s.is_empty() && s.chars().all(|c| !c.is_alphanumeric() && !c.is_whitespace()) {
        LexCategory::Punctuation
    } else if AUX_VERBS.contains(&s.as_str()) {
        LexCategory::AuxVerb
    } else if CONJUNCTIONS.contains(&s.as_str()) {
        LexCategory::Conjunction
    } else if is_number(&s) || NUMBER_WORDS.contains(&s.as_str()) {
        LexCategory::Numeral
    } else {
        LexCategory::Other
    }
}

pub fn lexical_tags(tokens: &[TokenSpan]) -> Vec<LexCategory> {
    tokens.iter().map(|t| lexical_tag(&t.surface)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedToken {
    pub surface: String,
    pub char_start: usize,
    /// Exclusive.
    pub char_end: usize,
    pub category: LexCategory,
    /// Empty for tokens cut off by the encoder's length limit.
    pub top_heads: Vec<usize>,
    pub antecedent: bool,
    pub consequent: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedReport {
    pub id: String,
    pub text: String,
    pub tokens: Vec<AnnotatedToken>,
}

/// Builds the per-token report. `attribution` covers a prefix of `tokens`
/// (all of them unless the encoder truncated the statement).
pub fn annotate(
    statement: &Statement,
    tokens: &[TokenSpan],
    attribution: &HeadAttribution,
    tags: &[LexCategory],
    predicted: Option<&SpanQuad>,
) -> Result<AnnotatedReport> {
    if tags.len() != tokens.len() {
        return Err(Error::InvalidInput(format!("{} tags for {} tokens", tags.len(), tokens.len())));
    }
    if attribution.tokens.len() > tokens.len() {
        return Err(Error::InvalidInput(format!(
            "attribution covers {} tokens, statement has {}",
            attribution.tokens.len(),
            tokens.len()
        )));
    }
    if let Some(t) = tokens.iter().find(|t| t.char_end > statement.length || t.char_start >= t.char_end) {
        return Err(Error::InvalidInput(format!("token {:?} does not fit the statement", t.surface)));
    }
    if let Some(q) = predicted {
        q.validate(statement.length)?;
    }
    let tokens = tokens
        .iter()
        .zip(tags)
        .enumerate()
        .map(|(i, (t, &category))| AnnotatedToken {
            surface: t.surface.clone(),
            char_start: t.char_start,
            char_end: t.char_end,
            category,
            top_heads: attribution.tokens.get(i).map(|a| a.heads.clone()).unwrap_or_default(),
            antecedent: predicted.is_some_and(|q| q.antecedent.overlaps_half_open(t.char_start, t.char_end)),
            consequent: predicted
                .and_then(|q| q.consequent)
                .is_some_and(|c| c.overlaps_half_open(t.char_start, t.char_end)),
        })
        .collect();
    Ok(AnnotatedReport { id: statement.id.clone(), text: statement.text.clone(), tokens })
}

/// Plain text with `_antecedent_`, `**consequent**`, and `^[heads]` after
/// each token.
pub fn render_text(report: &AnnotatedReport) -> String {
    let chars: Vec<char> = report.text.chars().collect();
    let toks = &report.tokens;
    let mut out = String::new();
    let mut cursor = 0;
    for (i, t) in toks.iter().enumerate() {
        let prev = i.checked_sub(1).map(|p| &toks[p]);
        let next = toks.get(i + 1);
        out.extend(&chars[cursor..t.char_start]);
        if t.antecedent && !prev.is_some_and(|p| p.antecedent) {
            out.push('_');
        }
        if t.consequent && !prev.is_some_and(|p| p.consequent) {
            out.push_str("**");
        }
        out.extend(&chars[t.char_start..t.char_end]);
        if !t.top_heads.is_empty() {
            let heads: Vec<String> = t.top_heads.iter().map(usize::to_string).collect();
            out.push_str(&format!("^[{}]", heads.join(",")));
        }
        if t.consequent && !next.is_some_and(|n| n.consequent) {
            out.push_str("**");
        }
        if t.antecedent && !next.is_some_and(|n| n.antecedent) {
            out.push('_');
        }
        cursor = t.char_end;
    }
    out.extend(&chars[cursor..]);
    out.push('\n');
    out
}

/// Heatmap file contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub tokens: Vec<String>,
    pub num_heads: usize,
    pub num_tokens: usize,
    /// `weights[h][query][key]`.
    pub weights: Vec<Vec<Vec<f64>>>,
    /// `received_attention[h][token]`.
    pub received_attention: Vec<Vec<f64>>,
}

impl Heatmap {
    pub fn new(att: &AttentionStack, tokens: &[String]) -> Result<Self> {
        let t = tokens.len();
        if att.num_tokens() != t {
            return Err(Error::Shape(format!("{} tokens for a {}-token attention stack", t, att.num_tokens())));
        }
        let weights = (0..att.num_heads()).map(|h| (0..t).map(|q| att.row(h, q).to_vec()).collect()).collect();
        Ok(Self {
            tokens: tokens.to_vec(),
            num_heads: att.num_heads(),
            num_tokens: t,
            weights,
            received_attention: received_attention(att, t)?,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Writes a heatmap for `att`, whose token axis must match `tokens`.
pub fn export_attention(att: &AttentionStack, tokens: &[String], path: impl AsRef<Path>) -> Result<Heatmap> {
    let heatmap = Heatmap::new(att, tokens)?;
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(&heatmap)?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))?;
    Ok(heatmap)
}

/// Everything the analysis of one statement produces.
#[derive(Clone, Debug, PartialEq)]
pub struct StatementAnalysis {
    pub report: AnnotatedReport,
    pub heatmap: Heatmap,
    /// Final-layer attention cropped to the encoded positions.
    pub attention: AttentionStack,
    /// Span prediction of a regression model.
    pub predicted: Option<SpanQuad>,
    /// Counterfactual probability of a classification model.
    pub probability: Option<f64>,
}

/// Runs `model` on one statement and attributes its tokens to final-layer
/// heads. The heatmap covers the encoded positions, `[CLS]` included.
pub fn analyze_statement(model: &Model, statement: &Statement) -> Result<StatementAnalysis> {
    let (tokens, input) = model.prepare(&statement.text)?;
    let enc = model.encode(&input, &mut Pass::eval())?;
    let last = enc.attention.last().ok_or_else(|| Error::Shape("encoder has no layers".into()))?;
    let att = last.crop(input.true_len)?;
    let scores = received_attention(&att, input.true_len)?;
    let mut attribution = top_heads(&scores);
    attribution.tokens.remove(0);

    let output = model.predict(std::slice::from_ref(&input))?.remove(0);
    let (predicted, probability) = match model.head() {
        HeadKind::Classification => (None, Some(output[0])),
        HeadKind::Regression => (Some(denormalize(&NormalizedSpanQuad::from_slice(&output), statement.length)?), None),
    };
    let tags = lexical_tags(&tokens);
    let report = annotate(statement, &tokens, &attribution, &tags, predicted.as_ref())?;

    let mut surfaces = vec![model.vocab().tokens()[CLS].clone()];
    surfaces.extend(tokens.iter().take(input.true_len - 1).map(|t| t.surface.clone()));
    let heatmap = Heatmap::new(&att, &surfaces)?;
    Ok(StatementAnalysis { report, heatmap, attention: att, predicted, probability })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{tokenize, CharSpan};
    use crate::tensor::Tensor;

    fn one_hot_stack(targets: &[usize], t: usize) -> AttentionStack {
        let mut data = Vec::new();
        for &j in targets {
            for _ in 0..t {
                let mut row = vec![0.0; t];
                row[j] = 1.0;
                data.extend(row);
            }
        }
        AttentionStack::new(Tensor::new(vec![targets.len(), t, t], data).unwrap()).unwrap()
    }

    #[test]
    fn uniform_attention_scores_equally() {
        let t = 4;
        let att = AttentionStack::new(Tensor::filled(&[2, t, t], 0.25)).unwrap();
        let s = received_attention(&att, t).unwrap();
        assert!(s.iter().flatten().all(|v| (v - 0.25).abs() < 1e-15));
        assert!(received_attention(&att, 5).is_err());
        assert!(received_attention(&att, 0).is_err());
    }

    #[test]
    fn one_hot_columns_and_single_token() {
        let att = one_hot_stack(&[2, 0, 1], 3);
        let s = received_attention(&att, 3).unwrap();
        assert_eq!(s, vec![vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        let a = top_heads(&s);
        let heads: Vec<_> = a.tokens.iter().map(|t| t.heads.clone()).collect();
        assert_eq!(heads, vec![vec![2], vec![3], vec![1]]);
        let single = AttentionStack::new(Tensor::filled(&[2, 1, 1], 1.0)).unwrap();
        assert_eq!(received_attention(&single, 1).unwrap(), vec![vec![1.0], vec![1.0]]);
    }

    #[test]
    fn tie_rules() {
        let a = top_heads(&[vec![0.1], vec![0.7], vec![0.2]]);
        assert_eq!(a.tokens[0].heads, vec![2]);
        let a = top_heads(&[vec![0.1], vec![0.5], vec![0.2], vec![0.5]]);
        assert_eq!(a.tokens[0].heads, vec![2, 4]);
        let a = top_heads(&[vec![0.3], vec![0.3], vec![0.3]]);
        assert_eq!(a.tokens[0].heads, vec![1, 2, 3]);
    }

    #[test]
    fn lexicon() {
        assert_eq!(lexical_tag("wouldn't"), LexCategory::AuxVerb);
        assert_eq!(lexical_tag("Would"), LexCategory::AuxVerb);
        assert_eq!(lexical_tag("wouldn’t"), LexCategory::AuxVerb);
        assert_eq!(lexical_tag("if"), LexCategory::Conjunction);
        assert_eq!(lexical_tag("12"), LexCategory::Numeral);
        assert_eq!(lexical_tag("1,000"), LexCategory::Numeral);
        assert_eq!(lexical_tag("3.5"), LexCategory::Numeral);
        assert_eq!(lexical_tag("twenty"), LexCategory::Numeral);
        assert_eq!(lexical_tag("hundred"), LexCategory::Numeral);
        assert_eq!(lexical_tag("twentyone"), LexCategory::Other);
        assert_eq!(lexical_tag(","), LexCategory::Punctuation);
        assert_eq!(lexical_tag("?"), LexCategory::Punctuation);
        assert_eq!(lexical_tag("pharmacists"), LexCategory::Other);
        assert_eq!(lexical_tag("nan"), LexCategory::Other);
        assert_eq!(lexical_tag("inf"), LexCategory::Other);
    }

    #[test]
    fn annotation_flags_and_rendering() {
        let st = Statement::new("s1", "If it rained, we stayed.");
        let tokens = tokenize(&st.text).unwrap();
        let n = tokens.len();
        let attribution = HeadAttribution {
            tokens: (0..n).map(|_| TokenHeads { scores: vec![0.5, 0.5], heads: vec![1, 2] }).collect(),
        };
        let tags = lexical_tags(&tokens);
        let q = SpanQuad::new(CharSpan::new(0, 11), Some(CharSpan::new(14, 23)));
        let r = annotate(&st, &tokens, &attribution, &tags, Some(&q)).unwrap();
        assert_eq!(r.tokens.len(), n);
        assert!(r.tokens[0].antecedent && !r.tokens[0].consequent);
        assert!(r.tokens[4].consequent);
        let text = render_text(&r);
        assert!(text.starts_with("_If^[1,2] it^[1,2] rained^[1,2]_"), "{text}");
        assert!(
            text.contains("**we^[1,2] stayed^[1,2] .^[1,2]**") || text.contains("**we^[1,2] stayed^[1,2].^[1,2]**"),
            "{text}"
        );

        let absent = SpanQuad::new(CharSpan::new(0, 11), None);
        let r = annotate(&st, &tokens, &attribution, &tags, Some(&absent)).unwrap();
        assert!(r.tokens.iter().all(|t| !t.consequent));
        assert!(annotate(&st, &tokens, &attribution, &tags[1..], None).is_err());
    }

    #[test]
    fn heatmap_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.json");
        let data: Vec<f64> =
            (0..2 * 3 * 3).map(|i| [0.2, 0.3, 0.5][i % 3] + if i % 3 == 0 { 1e-13 } else { 0.0 }).collect();
        let att = AttentionStack::new(Tensor::new(vec![2, 3, 3], data).unwrap()).unwrap();
        let toks: Vec<String> = ["[CLS]", "if", "only"].map(String::from).to_vec();
        let written = export_attention(&att, &toks, &path).unwrap();
        let back = Heatmap::read(&path).unwrap();
        assert_eq!(written, back);
        assert_eq!(back.weights.len(), 2);
        assert_eq!(back.weights[1][2][2], att.weight(1, 2, 2));
        assert!(export_attention(&att, &toks[..2], &path).is_err());
        assert!(export_attention(&att, &toks, dir.path().join("missing/h.json")).is_err());
    }
}
