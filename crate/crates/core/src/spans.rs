//! Length-normalized span codec.
//!
//! Training targets are character indices divided by the statement length,
//! with an absent consequent encoded as `(0, 0)`. Decoding multiplies back,
//! rounds half-up, clamps into the statement, swaps inverted spans, and reads
//! a `(0, 0)` consequent as absent. A genuine one-character consequent at
//! position 0 therefore decodes as absent.

use serde::{Deserialize, Serialize};

use crate::corpus::{CharSpan, SpanQuad};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedSpanQuad {
    pub antecedent_start: f64,
    pub antecedent_end: f64,
    pub consequent_start: f64,
    pub consequent_end: f64,
}

impl NormalizedSpanQuad {
    pub fn new(values: [f64; 4]) -> Self {
        let [antecedent_start, antecedent_end, consequent_start, consequent_end] = values;
        Self { antecedent_start, antecedent_end, consequent_start, consequent_end }
    }

    pub(crate) fn from_slice(v: &[f64]) -> Self {
        Self::new([v[0], v[1], v[2], v[3]])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.antecedent_start, self.antecedent_end, self.consequent_start, self.consequent_end]
    }
}

pub fn normalize(q: &SpanQuad, length: usize) -> Result<NormalizedSpanQuad> {
    if length == 0 {
        return Err(Error::InvalidInput("statement length must be at least 1".into()));
    }
    q.validate(length)?;
    let l = length as f64;
    let (cs, ce) = match q.consequent {
        Some(c) => (c.start as f64 / l, c.end as f64 / l),
        None => (0.0, 0.0),
    };
    Ok(NormalizedSpanQuad::new([q.antecedent.start as f64 / l, q.antecedent.end as f64 / l, cs, ce]))
}

pub fn denormalize(n: &NormalizedSpanQuad, length: usize) -> Result<SpanQuad> {
    if length == 0 {
        return Err(Error::InvalidInput("statement length must be at least 1".into()));
    }
    let values = n.to_array();
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("normalized span value {bad}")));
    }
    let max = (length - 1) as f64;
    let [a0, a1, c0, c1] = values.map(|v| (v * length as f64 + 0.5).floor().clamp(0.0, max) as usize);
    let ordered = |s: usize, e: usize| CharSpan::new(s.min(e), s.max(e));
    let consequent = if c0 == 0 && c1 == 0 { None } else { Some(ordered(c0, c1)) };
    Ok(SpanQuad::new(ordered(a0, a1), consequent))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(a: (usize, usize), c: Option<(usize, usize)>) -> SpanQuad {
        SpanQuad::new(CharSpan::new(a.0, a.1), c.map(|(s, e)| CharSpan::new(s, e)))
    }

    #[test]
    fn normalize_examples() {
        let n = normalize(&quad((0, 43), Some((45, 85))), 100).unwrap();
        assert_eq!(n.to_array(), [0.0, 0.43, 0.45, 0.85]);
        let n = normalize(&quad((5, 20), None), 40).unwrap();
        assert_eq!(n.to_array(), [0.125, 0.5, 0.0, 0.0]);
        assert!(normalize(&quad((5, 40), None), 40).is_err());
        assert!(normalize(&quad((0, 0), None), 0).is_err());
    }

    #[test]
    fn denormalize_examples() {
        let q = denormalize(&NormalizedSpanQuad::new([0.0, 0.43, 0.45, 0.85]), 100).unwrap();
        assert_eq!(q, quad((0, 43), Some((45, 85))));
        let q = denormalize(&NormalizedSpanQuad::new([0.1, 0.5, 0.0, 0.0]), 50).unwrap();
        assert_eq!(q, quad((5, 25), None));
        let q = denormalize(&NormalizedSpanQuad::new([0.6, 0.2, 0.0, 0.0]), 10).unwrap();
        assert_eq!(q, quad((2, 6), None));
        assert!(denormalize(&NormalizedSpanQuad::new([f64::NAN, 0.0, 0.0, 0.0]), 10).is_err());
    }

    #[test]
    fn rounding_is_half_up_and_clamped() {
        // 0.25 * 10 = 2.5 → 3; 1.7 * 10 clamps to 9
        let q = denormalize(&NormalizedSpanQuad::new([0.25, 1.7, 0.0, 0.04]), 10).unwrap();
        assert_eq!(q, quad((3, 9), None));
        // a consequent rounding to (0, 1) stays present
        let q = denormalize(&NormalizedSpanQuad::new([0.0, 0.0, 0.0, 0.06]), 10).unwrap();
        assert_eq!(q, quad((0, 0), Some((0, 1))));
    }

    #[test]
    fn zero_consequent_collides_with_absence() {
        let q = quad((1, 3), Some((0, 0)));
        let back = denormalize(&normalize(&q, 5).unwrap(), 5).unwrap();
        assert_eq!(back.consequent, None);
    }
}
