//! Load a detection CSV, tokenize with character offsets, build a
//! vocabulary, encode ids, and make a seeded 90/10 split.
//!
//! cargo run --example tokenize_and_split

use cfdetect::corpus::{encode_ids, load_detection_data, split, tokenize, write_detection_data};
use cfdetect::synthetic::detection_corpus;
use cfdetect::Vocab;

fn main() -> cfdetect::Result<()> {
    let dir = std::env::temp_dir().join("cfdetect-tokenize-example");
    std::fs::create_dir_all(&dir).map_err(|e| cfdetect::Error::io(&dir, e))?;
    let path = dir.join("detect.csv");
    write_detection_data(&path, &detection_corpus(40))?;
    let data = load_detection_data(&path)?;
    println!("loaded {} rows from {}", data.len(), path.display());

    let text = "If I hadn't paid $1,000.50, we wouldn't be here.";
    for t in tokenize(text)? {
        println!("{:>3}..{:<3} {:?}", t.char_start, t.char_end, t.surface);
    }

    let vocab = Vocab::build(data.iter().map(|(s, _)| s.text.as_str()), 1, 1000)?;
    let encoded = encode_ids(&tokenize(&data[0].0.text)?, &vocab, 12)?;
    println!("vocab size {}; {:?} -> {:?} (true_len {})", vocab.len(), data[0].0.text, encoded.ids, encoded.true_len);

    let (train, dev) = split(&data, 0.9, 42)?;
    println!("split: {} train / {} dev", train.len(), dev.len());
    Ok(())
}
