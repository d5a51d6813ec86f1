//! Length normalization of span targets and decoding of raw regressor
//! outputs back to character spans.
//!
//! cargo run --example span_codec

use cfdetect::spans::{denormalize, normalize};
use cfdetect::{CharSpan, NormalizedSpanQuad, SpanQuad};

fn main() -> cfdetect::Result<()> {
    let quad = SpanQuad::new(CharSpan::new(0, 43), Some(CharSpan::new(45, 85)));
    let n = normalize(&quad, 100)?;
    println!("{quad:?}\n  -> {:?}\n  -> {:?}", n.to_array(), denormalize(&n, 100)?);

    let absent = SpanQuad::new(CharSpan::new(5, 20), None);
    println!("absent consequent -> {:?}", normalize(&absent, 40)?.to_array());

    // Raw outputs may exceed 1 or come out inverted; decoding clamps and swaps.
    let raw = NormalizedSpanQuad::new([0.6, 0.2, 0.71, 1.4]);
    println!("raw {:?} on length 10 -> {:?}", raw.to_array(), denormalize(&raw, 10)?);

    // A real one-character consequent at index 0 reads back as absent.
    let edge = SpanQuad::new(CharSpan::new(2, 4), Some(CharSpan::new(0, 0)));
    println!("{edge:?} -> {:?}", denormalize(&normalize(&edge, 5)?, 5)?);
    Ok(())
}
