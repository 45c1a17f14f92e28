//! The domain word list and the token each word gets in the simulated
//! vocabulary.

use tdg::data::{generate_benchmark, BenchmarkSpec};
use tdg::embedding::cosine;
use tdg::words::{default_pool, load_word_pool};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let pool = default_pool();
    println!("{} bundled words: {}", pool.len(), pool.words()[..8].join(", "));

    // One word per line; a repeated word is an error.
    let custom = load_word_pool("sketch\nphoto\nwatercolor\ncartoon\n".as_bytes())?;
    println!("custom pool: {:?}", custom.words());

    let ds = generate_benchmark(&BenchmarkSpec::default())?;
    let embedded = ds.meta.vocabulary.embed_pool(&custom)?;
    let toks = embedded.token_embeddings().expect("just embedded");
    for (i, a) in custom.words().iter().enumerate() {
        for (j, b) in custom.words().iter().enumerate().skip(i + 1) {
            println!("cos({a}, {b}) = {:+.3}", cosine(&toks[i], &toks[j])?);
        }
    }
    Ok(())
}
