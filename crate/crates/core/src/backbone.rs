//! Simulated pretrained vision-language backbone.
//!
//! The text tower is a random frozen projection. The image tower starts out
//! aligned with it: it undoes the benchmark's shared base map and pushes the
//! latent code through the same vocabulary map the category tokens use, so
//! source images land near the text features of their class before any
//! fine-tuning.

use crate::data::BenchmarkMeta;
use crate::embedding::{Embedding, Matrix};
use crate::encoders::{ImageEncoder, TextEncoder};
use crate::error::Result;
use crate::rng::RngStream;

/// Mean pooling over the four template slots divides the category token by
/// four; the image tower matches that scale.
const TEMPLATE_SLOTS: f64 = 4.0;

/// Image features come out this many times longer than the matching text
/// features. Like a real backbone, the image tower then has weights large
/// enough that small encoder learning rates only fine-tune it, and the two
/// modalities differ in scale, which is the gap the normalized classifier
/// absorbs.
pub const IMAGE_GAIN: f64 = 16.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub text: TextEncoder,
    pub image: ImageEncoder,
}

impl Backbone {
    /// Deterministic in the benchmark seed.
    pub fn pretrained(meta: &BenchmarkMeta) -> Result<Self> {
        let spec = &meta.spec;
        let mut rng = RngStream::new(spec.seed, "backbone/text");
        let text = TextEncoder::random(spec.embed_dim, spec.token_dim, &mut rng)?;

        // W0 = P_txt · [Q | Q_s] · [P | S]⁺ / 4
        let (raw, tok) = match (&meta.style_map, &meta.vocabulary.style_projection) {
            (Some(sm), Some(q)) => (hstack(&meta.base_map, sm)?, hstack(&meta.vocabulary.projection, q)?),
            _ => (meta.base_map.clone(), meta.vocabulary.projection.clone()),
        };
        let unmix = raw.left_pseudo_inverse()?;
        let mut weight = text.projection().matmul(&tok)?.matmul(&unmix)?;
        for v in weight.data_mut() {
            *v *= IMAGE_GAIN / TEMPLATE_SLOTS;
        }
        let image = ImageEncoder::new(weight, Embedding::zeros(spec.embed_dim))?;
        Ok(Self { text, image })
    }

    /// A backbone whose image tower is an unrelated random map.
    pub fn unaligned(meta: &BenchmarkMeta, seed: u64) -> Result<Self> {
        let aligned = Self::pretrained(meta)?;
        let spec = &meta.spec;
        let mut rng = RngStream::new(seed, "backbone/unaligned-image");
        let weight = Matrix::gaussian(
            spec.embed_dim,
            spec.raw_dim,
            (1.0 / spec.raw_dim as f64).sqrt(),
            &mut rng,
        );
        Ok(Self {
            text: aligned.text,
            image: ImageEncoder::new(weight, Embedding::zeros(spec.embed_dim))?,
        })
    }
}

fn hstack(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let mut data = Vec::with_capacity(a.rows() * (a.cols() + b.cols()));
    for r in 0..a.rows() {
        data.extend_from_slice(a.row(r));
        data.extend_from_slice(b.row(r));
    }
    Matrix::from_rows(a.rows(), a.cols() + b.cols(), data)
}
