//! Fits the two context vectors of the prompt template to a fixed batch of
//! image features with momentum SGD.

use tdg::backbone::Backbone;
use tdg::data::{generate_benchmark, BenchmarkSpec};
use tdg::optim::{ParamBlock, SgdState};
use tdg::prompt::{prompt_loss_and_grads, PromptTemplate};
use tdg::rng::RngStream;
use tdg::words::default_pool;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = generate_benchmark(&BenchmarkSpec::default())?;
    let backbone = Backbone::pretrained(&ds.meta)?;
    let vocab = &ds.meta.vocabulary;
    let pool = vocab.embed_pool(&default_pool())?;

    let batch: Vec<_> = ds.samples.iter().step_by(37).take(32).collect();
    let feats = batch
        .iter()
        .map(|s| backbone.image.encode_image(&s.x))
        .collect::<Result<Vec<_>, _>>()?;
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();

    let mut template = PromptTemplate::random(ds.spec().token_dim, &mut RngStream::new(0, "prompt"));
    let mut sgd = SgdState::new();
    for step in 0..=200 {
        let out = prompt_loss_and_grads(
            &template,
            &backbone.text,
            &feats,
            &labels,
            &vocab.category_tokens,
            &pool,
            0.3,
        )?;
        if step % 40 == 0 {
            println!(
                "step {step:3}  L_pl {:+.4}  L_a {:+.4}  L_s {:.4}",
                out.total, out.alignment, out.similarity
            );
        }
        let PromptTemplate { v1, v2 } = &mut template;
        sgd.step(
            &mut [
                ParamBlock::new("v1", v1.as_mut_slice(), &out.grad_v1),
                ParamBlock::new("v2", v2.as_mut_slice(), &out.grad_v2),
            ],
            1e-2,
        )?;
    }
    Ok(())
}
