//! Run the encoder on one statement and inspect its per-layer attention and
//! the last-three-layer features the fusion base consumes.
//!
//! cargo run --example encode_attention

use cfdetect::encoder::last3_concat;
use cfdetect::fusion::pool;
use cfdetect::{HeadKind, Model, ModelConfig, Pass, Vocab};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cfdetect::Result<()> {
    let text = "If it had rained, we would have stayed home.";
    let vocab = Vocab::build([text], 1, 100)?;
    let cfg =
        ModelConfig { num_layers: 3, num_heads: 2, model_dim: 16, ffn_dim: 32, max_len: 14, ..ModelConfig::default() };
    let model = Model::new(cfg, vocab, HeadKind::Classification, &mut ChaCha8Rng::seed_from_u64(1))?;

    let (tokens, input) = model.prepare(text)?;
    let out = model.encode(&input, &mut Pass::eval())?;
    println!("{} tokens + [CLS], true_len {}, {} layers", tokens.len(), out.true_len, out.attention.len());

    let last = out.attention.last().expect("at least one layer");
    for h in 0..last.num_heads() {
        let row = last.row(h, 0);
        let sum: f64 = row.iter().sum();
        println!("final layer head {} query [CLS]: row sum {sum:.6}, padded tail {:?}", h + 1, &row[out.true_len..]);
    }

    let (emb, att) = last3_concat(&out)?;
    println!("last-three embeddings {:?}, stacked attention {:?}", emb.shape(), att.tensor().shape());
    let pooled = pool(&emb, out.true_len)?;
    println!("pooled embedding width {}", pooled.len());
    Ok(())
}
