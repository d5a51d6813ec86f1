//! Binary detection metrics and character-overlap span metrics.
//!
//! Span scoring pools antecedent and consequent characters into one labelled
//! set per example. Precision and recall are the overlap with the predicted
//! and gold sets respectively; two empty sets score 1, an empty set against a
//! non-empty one scores 0. Corpus values are unweighted means over examples.

use serde::{Deserialize, Serialize};

use crate::corpus::{BinaryLabel, CharSpan, SpanQuad};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn harmonic_mean(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Precision, recall, and F1 with the counterfactual class as positive.
pub fn binary_prf(pairs: &[(BinaryLabel, BinaryLabel)]) -> Result<BinaryMetrics> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no predictions to score".into()));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (pred, gold) in pairs {
        match (pred.is_positive(), gold.is_positive()) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    Ok(BinaryMetrics { precision, recall, f1: harmonic_mean(precision, recall), tp, fp, fn_, tn })
}

/// One scored example: a prediction and its gold annotation on a statement of
/// `length` characters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpanPair {
    pub pred: SpanQuad,
    pub gold: SpanQuad,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub exact_match: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub exact_match: f64,
    pub count: usize,
}

/// Sorted, disjoint, inclusive intervals covering a span quad's characters.
fn labelled(q: &SpanQuad) -> Vec<CharSpan> {
    let mut spans: Vec<CharSpan> = std::iter::once(q.antecedent).chain(q.consequent).collect();
    spans.sort_by_key(|s| s.start);
    let mut merged: Vec<CharSpan> = Vec::with_capacity(2);
    for s in spans {
        match merged.last_mut() {
            Some(last) if s.start <= last.end + 1 => last.end = last.end.max(s.end),
            _ => merged.push(s),
        }
    }
    merged
}

fn size(set: &[CharSpan]) -> usize {
    set.iter().map(CharSpan::len).sum()
}

fn intersection(a: &[CharSpan], b: &[CharSpan]) -> usize {
    let mut total = 0;
    for x in a {
        for y in b {
            let lo = x.start.max(y.start);
            let hi = x.end.min(y.end);
            if lo <= hi {
                total += hi - lo + 1;
            }
        }
    }
    total
}

pub fn exact_match(pred: &SpanQuad, gold: &SpanQuad) -> bool {
    pred == gold
}

pub fn score_pair(pair: &SpanPair) -> Result<SpanScore> {
    pair.pred.validate(pair.length)?;
    pair.gold.validate(pair.length)?;
    let (p, g) = (labelled(&pair.pred), labelled(&pair.gold));
    let (np, ng) = (size(&p), size(&g));
    let overlap = intersection(&p, &g);
    let part = |den: usize, other: usize| match (den, other) {
        (0, 0) => 1.0,
        (0, _) => 0.0,
        _ => overlap as f64 / den as f64,
    };
    let precision = part(np, ng);
    let recall = part(ng, np);
    Ok(SpanScore {
        precision,
        recall,
        f1: harmonic_mean(precision, recall),
        exact_match: exact_match(&pair.pred, &pair.gold),
    })
}

pub fn span_prf(pairs: &[SpanPair]) -> Result<SpanMetrics> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no span predictions to score".into()));
    }
    let scores = pairs.iter().map(score_pair).collect::<Result<Vec<_>>>()?;
    let n = scores.len() as f64;
    let mean = |f: fn(&SpanScore) -> f64| scores.iter().map(f).sum::<f64>() / n;
    Ok(SpanMetrics {
        precision: mean(|s| s.precision),
        recall: mean(|s| s.recall),
        f1: mean(|s| s.f1),
        exact_match: mean(|s| f64::from(u8::from(s.exact_match))),
        count: scores.len(),
    })
}

/// Mean absolute character error over the four span coordinates, reading an
/// absent consequent as `(0, 0)`.
pub fn mean_char_error(pairs: &[SpanPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no span predictions to score".into()));
    }
    let coords = |q: &SpanQuad| {
        let c = q.consequent.unwrap_or(CharSpan::new(0, 0));
        [q.antecedent.start, q.antecedent.end, c.start, c.end]
    };
    let total: usize = pairs
        .iter()
        .map(|p| coords(&p.pred).iter().zip(coords(&p.gold)).map(|(a, b)| a.abs_diff(b)).sum::<usize>())
        .sum();
    Ok(total as f64 / (4 * pairs.len()) as f64)
}

/// Renders `key = value` lines for a serializable report.
pub fn to_key_values<T: Serialize>(report: &T) -> Result<String> {
    let value = serde_json::to_value(report)?;
    let mut out = String::new();
    if let serde_json::Value::Object(map) = value {
        for (k, v) in map {
            out.push_str(&format!("{k} = {v}\n"));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use BinaryLabel::{Counterfactual as P, NonCounterfactual as N};

    fn quad(a: (usize, usize), c: Option<(usize, usize)>) -> SpanQuad {
        SpanQuad::new(CharSpan::new(a.0, a.1), c.map(|(s, e)| CharSpan::new(s, e)))
    }

    #[test]
    fn binary_examples() {
        let m = binary_prf(&[(P, P), (N, N), (P, P)]).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        let m = binary_prf(&[(P, P), (P, N), (N, P), (N, N)]).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.5, 0.5, 0.5));
        let m = binary_prf(&[(N, P), (N, N)]).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        assert!(binary_prf(&[]).is_err());
    }

    #[test]
    fn span_examples() {
        let same = SpanPair { pred: quad((0, 9), Some((12, 20))), gold: quad((0, 9), Some((12, 20))), length: 30 };
        let s = score_pair(&same).unwrap();
        assert_eq!((s.precision, s.recall, s.f1, s.exact_match), (1.0, 1.0, 1.0, true));

        let shifted = SpanPair { pred: quad((0, 9), None), gold: quad((5, 14), None), length: 30 };
        let s = score_pair(&shifted).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.5, 0.5, 0.5));

        let extra = SpanPair { pred: quad((0, 9), Some((20, 24))), gold: quad((0, 9), None), length: 30 };
        let s = score_pair(&extra).unwrap();
        assert_eq!(s.precision, 10.0 / 15.0);
        assert_eq!(s.recall, 1.0);
        assert!(!s.exact_match);

        let bad = SpanPair { pred: quad((0, 40), None), gold: quad((0, 9), None), length: 30 };
        assert!(score_pair(&bad).is_err());
    }

    #[test]
    fn overlapping_antecedent_and_consequent_are_pooled() {
        let pair = SpanPair { pred: quad((0, 5), Some((3, 8))), gold: quad((0, 8), None), length: 10 };
        let s = score_pair(&pair).unwrap();
        assert_eq!((s.precision, s.recall), (1.0, 1.0));
        assert!(!s.exact_match);
    }

    #[test]
    fn exact_match_cases() {
        assert!(exact_match(&quad((1, 4), None), &quad((1, 4), None)));
        assert!(!exact_match(&quad((1, 4), None), &quad((1, 5), None)));
        assert!(!exact_match(&quad((1, 4), Some((6, 7))), &quad((1, 4), None)));
    }

    #[test]
    fn char_error_reads_absence_as_origin() {
        let pairs = [SpanPair { pred: quad((1, 4), Some((6, 8))), gold: quad((0, 4), None), length: 10 }];
        assert_eq!(mean_char_error(&pairs).unwrap(), 15.0 / 4.0);
    }

    #[test]
    fn key_value_rendering() {
        let m = binary_prf(&[(P, P), (N, N)]).unwrap();
        let text = to_key_values(&m).unwrap();
        assert!(text.contains("precision = 1.0"));
        assert!(text.contains("fn = 0"));
    }
}
