//! Binary detection metrics and character-overlap span metrics, rendered as
//! JSON and as `key = value` text.
//!
//! cargo run --example metrics_report

use cfdetect::metrics::{binary_prf, exact_match, mean_char_error, score_pair, span_prf, to_key_values, SpanPair};
use cfdetect::{BinaryLabel, CharSpan, SpanQuad};

fn main() -> cfdetect::Result<()> {
    use BinaryLabel::{Counterfactual as P, NonCounterfactual as N};
    let decisions = [(P, P), (P, N), (N, P), (N, N), (P, P)];
    let m = binary_prf(&decisions)?;
    println!("{}", serde_json::to_string_pretty(&m)?);

    let q = |a: (usize, usize), c: Option<(usize, usize)>| {
        SpanQuad::new(CharSpan::new(a.0, a.1), c.map(|(s, e)| CharSpan::new(s, e)))
    };
    let pairs = [
        SpanPair { pred: q((0, 9), Some((12, 20))), gold: q((0, 9), Some((12, 20))), length: 30 },
        SpanPair { pred: q((0, 9), None), gold: q((5, 14), None), length: 30 },
        SpanPair { pred: q((0, 9), Some((20, 24))), gold: q((0, 9), None), length: 30 },
    ];
    for p in &pairs {
        let s = score_pair(p)?;
        println!("p {:.3} r {:.3} f1 {:.3} exact {}", s.precision, s.recall, s.f1, exact_match(&p.pred, &p.gold));
    }
    print!("{}", to_key_values(&span_prf(&pairs)?)?);
    println!("mean_char_error = {}", mean_char_error(&pairs)?);
    Ok(())
}
