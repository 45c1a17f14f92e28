//! Cosine classifier: scale invariance, bounded logits and a tangent
//! feature gradient.

use tdg::classifier::NormalizedClassifier;
use tdg::embedding::{dot, normalize};
use tdg::rng::RngStream;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = RngStream::new(0, "example/normalized");
    let cls = NormalizedClassifier::random(4, 6, 10.0, &mut rng)?;
    let z = rng.gaussian_vec(6, 1.0);
    let big: Vec<f64> = z.iter().map(|v| 50.0 * v).collect();

    println!("cosines      {:.3?}", cls.cosine_logits(&z)?);
    let (p, q) = (cls.predict(&z)?, cls.predict(&big)?);
    println!("probs(z)     {:.4?}", p.probabilities);
    println!("probs(50·z)  {:.4?}", q.probabilities);
    println!("argmax {} / {}", p.argmax(), q.argmax());

    let g = cls.backward(&z, 2)?;
    println!("loss {:.4}, grad·ẑ = {:.1e}", g.loss, dot(&g.feature, &normalize(&z)?));
    Ok(())
}
