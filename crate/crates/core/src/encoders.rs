//! The shared text/image feature space.
//!
//! The text encoder is a frozen linear projection of mean-pooled token
//! embeddings; the image encoder is a trainable affine map on raw features.
//! Both are small enough for every gradient to be written in closed form.

use serde::{Deserialize, Serialize};

use crate::embedding::{check_len, Embedding, Matrix};
use crate::error::{Result, TdgError};
use crate::rng::RngStream;

/// A vector in token space, the input side of the text encoder.
pub type TokenEmbedding = Embedding;

/// Frozen text encoder: `z = P · mean(tokens)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoder {
    projection: Matrix,
}

impl TextEncoder {
    /// Gaussian(0, 1/d_tok) projection, redrawn until it has full row rank.
    pub fn random(embed_dim: usize, token_dim: usize, rng: &mut RngStream) -> Result<Self> {
        if embed_dim == 0 || token_dim == 0 {
            return Err(TdgError::Config("encoder dimensions must be positive".into()));
        }
        if embed_dim > token_dim {
            return Err(TdgError::Config(format!(
                "embedding dimension {embed_dim} exceeds token dimension {token_dim}; projection cannot have full row rank"
            )));
        }
        let std = (1.0 / token_dim as f64).sqrt();
        for _ in 0..100 {
            let projection = Matrix::gaussian(embed_dim, token_dim, std, rng);
            if projection.row_rank() == embed_dim {
                return Ok(Self { projection });
            }
        }
        Err(TdgError::Numeric(
            "could not draw a full-rank text projection in 100 attempts".into(),
        ))
    }

    pub fn from_projection(projection: Matrix) -> Result<Self> {
        if projection.row_rank() != projection.rows() {
            return Err(TdgError::DegenerateInput(
                "text projection does not have full row rank".into(),
            ));
        }
        Ok(Self { projection })
    }

    pub fn projection(&self) -> &Matrix {
        &self.projection
    }

    pub fn token_dim(&self) -> usize {
        self.projection.cols()
    }

    pub fn embed_dim(&self) -> usize {
        self.projection.rows()
    }

    /// Projects an already pooled token vector.
    pub fn project(&self, pooled: &[f64]) -> Result<Embedding> {
        Ok(Embedding::from_raw(self.projection.matvec(pooled)?))
    }

    pub fn encode_text(&self, tokens: &[TokenEmbedding]) -> Result<Embedding> {
        let pooled = mean_pool(tokens, self.token_dim())?;
        self.project(&pooled)
    }

    /// Gradient with respect to the token at `slot`: `(1/L) · Pᵀ · upstream`.
    ///
    /// Under mean pooling this is the same for every slot.
    pub fn encode_text_grad(
        &self,
        tokens: &[TokenEmbedding],
        slot: usize,
        upstream: &[f64],
    ) -> Result<TokenEmbedding> {
        if slot >= tokens.len() {
            return Err(TdgError::Index {
                index: slot,
                len: tokens.len(),
            });
        }
        let back = self.projection.matvec_transpose(upstream)?;
        let inv_len = 1.0 / tokens.len() as f64;
        Ok(Embedding::from_raw(
            back.into_iter().map(|v| v * inv_len).collect(),
        ))
    }
}

fn mean_pool(tokens: &[TokenEmbedding], token_dim: usize) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        return Err(TdgError::DegenerateInput("empty token sequence".into()));
    }
    let mut sum = vec![0.0; token_dim];
    for t in tokens {
        check_len(token_dim, t.len())?;
        for (s, v) in sum.iter_mut().zip(t.iter()) {
            *s += v;
        }
    }
    let n = tokens.len() as f64;
    Ok(sum.into_iter().map(|v| v / n).collect())
}

/// Trainable image encoder: `z = W·x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEncoder {
    pub weight: Matrix,
    pub bias: Embedding,
}

/// Parameter gradients of the image encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoderGrads {
    pub weight: Matrix,
    pub bias: Embedding,
}

impl ImageEncoderGrads {
    pub fn zeros(embed_dim: usize, raw_dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(embed_dim, raw_dim),
            bias: Embedding::zeros(embed_dim),
        }
    }

    pub fn accumulate(&mut self, other: &ImageEncoderGrads) {
        self.weight.add_scaled(1.0, &other.weight);
        self.bias.axpy(1.0, &other.bias);
    }
}

impl ImageEncoder {
    pub fn new(weight: Matrix, bias: Embedding) -> Result<Self> {
        check_len(weight.rows(), bias.len())?;
        if !weight.data().iter().all(|v| v.is_finite()) || !bias.is_finite() {
            return Err(TdgError::Numeric("image encoder parameters must be finite".into()));
        }
        Ok(Self { weight, bias })
    }

    pub fn embed_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn raw_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn encode_image(&self, x: &[f64]) -> Result<Embedding> {
        let mut z = self.weight.matvec(x)?;
        for (zi, bi) in z.iter_mut().zip(self.bias.iter()) {
            *zi += bi;
        }
        Ok(Embedding::from_raw(z))
    }

    /// `(upstream ⊗ x, upstream)`
    pub fn encode_image_grads(&self, x: &[f64], upstream: &[f64]) -> Result<ImageEncoderGrads> {
        check_len(self.raw_dim(), x.len())?;
        check_len(self.embed_dim(), upstream.len())?;
        Ok(ImageEncoderGrads {
            weight: Matrix::outer(upstream, x),
            bias: Embedding::from_raw(upstream.to_vec()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{central_difference_gradient, cosine, cosine_grad, relative_error};

    fn emb(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    #[test]
    fn identity_projection_passes_single_token() {
        let enc = TextEncoder::from_projection(Matrix::identity(3)).unwrap();
        let t = emb(&[0.5, -1.0, 2.0]);
        assert_eq!(enc.encode_text(&[t.clone()]).unwrap(), t);
    }

    #[test]
    fn opposite_tokens_cancel() {
        let enc = TextEncoder::from_projection(Matrix::identity(2)).unwrap();
        let t = emb(&[1.0, 2.0]);
        let z = enc.encode_text(&[t.clone(), t.scaled(-1.0)]).unwrap();
        assert_eq!(z.as_slice(), &[0.0, 0.0]);
        assert!(cosine(&z, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn duplication_does_not_change_mean() {
        let mut rng = RngStream::new(5, "dup");
        let enc = TextEncoder::random(4, 6, &mut rng).unwrap();
        let t1 = Embedding::gaussian(6, 1.0, &mut rng);
        let t2 = Embedding::gaussian(6, 1.0, &mut rng);
        let a = enc.encode_text(&[t1.clone(), t2.clone()]).unwrap();
        let b = enc
            .encode_text(&[t1.clone(), t1.clone(), t2.clone(), t2.clone()])
            .unwrap();
        assert!(relative_error(&a, &b) < 1e-15);
    }

    #[test]
    fn text_encoding_is_order_free() {
        let enc = TextEncoder::from_projection(Matrix::identity(3)).unwrap();
        let a = emb(&[1.0, 0.0, 0.0]);
        let b = emb(&[0.0, 0.0, 2.0]);
        let c = emb(&[0.0, 4.0, 0.0]);
        let x = enc.encode_text(&[a.clone(), b.clone(), c.clone()]).unwrap();
        let y = enc.encode_text(&[c, a, b]).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let enc = TextEncoder::from_projection(Matrix::identity(2)).unwrap();
        assert!(matches!(
            enc.encode_text(&[]),
            Err(TdgError::DegenerateInput(_))
        ));
    }

    #[test]
    fn rank_deficient_projection_is_rejected() {
        let p = Matrix::from_rows(2, 2, vec![1.0, 1.0, 2.0, 2.0]).unwrap();
        assert!(TextEncoder::from_projection(p).is_err());
    }

    #[test]
    fn text_grad_examples() {
        let enc = TextEncoder::from_projection(Matrix::identity(2)).unwrap();
        let g = [0.4, -0.8];
        let t = emb(&[1.0, 1.0]);
        assert_eq!(enc.encode_text_grad(&[t.clone()], 0, &g).unwrap().as_slice(), &g);
        let seq = vec![t.clone(); 4];
        assert_eq!(
            enc.encode_text_grad(&seq, 2, &g).unwrap().as_slice(),
            &[0.1, -0.2]
        );
        assert!(matches!(
            enc.encode_text_grad(&seq, 4, &g),
            Err(TdgError::Index { index: 4, len: 4 })
        ));
    }

    #[test]
    fn text_grad_matches_finite_differences() {
        let mut rng = RngStream::new(17, "text-grad");
        for trial in 0..20 {
            let enc = TextEncoder::random(5, 8, &mut rng).unwrap();
            let tokens: Vec<Embedding> = (0..4).map(|_| Embedding::gaussian(8, 1.0, &mut rng)).collect();
            let target = rng.gaussian_vec(5, 1.0);
            let slot = trial % 4;
            let z = enc.encode_text(&tokens).unwrap();
            let upstream = cosine_grad(&z, &target).unwrap();
            let analytic = enc.encode_text_grad(&tokens, slot, &upstream).unwrap();
            let numeric = central_difference_gradient(
                |v| {
                    let mut seq = tokens.clone();
                    seq[slot] = Embedding::new(v.to_vec()).unwrap();
                    cosine(&enc.encode_text(&seq).unwrap(), &target).unwrap()
                },
                &tokens[slot],
                1e-5,
            )
            .unwrap();
            assert!(relative_error(&analytic, &numeric) <= 1e-6, "trial {trial}");
        }
    }

    #[test]
    fn image_encoder_examples() {
        let b = emb(&[1.0, -2.0]);
        let enc = ImageEncoder::new(Matrix::zeros(2, 3), b.clone()).unwrap();
        assert_eq!(enc.encode_image(&[5.0, 6.0, 7.0]).unwrap(), b);

        let enc = ImageEncoder::new(Matrix::identity(3), Embedding::zeros(3)).unwrap();
        assert_eq!(enc.encode_image(&[5.0, 6.0, 7.0]).unwrap().as_slice(), &[5.0, 6.0, 7.0]);
        assert!(matches!(
            enc.encode_image(&[1.0, 2.0]),
            Err(TdgError::Dimension { .. })
        ));
    }

    #[test]
    fn image_encoder_is_affine() {
        let mut rng = RngStream::new(9, "affine");
        let enc = ImageEncoder::new(
            Matrix::gaussian(3, 4, 1.0, &mut rng),
            Embedding::gaussian(3, 1.0, &mut rng),
        )
        .unwrap();
        let x1 = rng.gaussian_vec(4, 1.0);
        let x2 = rng.gaussian_vec(4, 1.0);
        let sum: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| a + b).collect();
        let lhs = enc.encode_image(&sum).unwrap();
        let e1 = enc.encode_image(&x1).unwrap();
        let e2 = enc.encode_image(&x2).unwrap();
        for i in 0..3 {
            assert!((lhs[i] - (e1[i] + e2[i] - enc.bias[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn image_grads_examples() {
        let enc = ImageEncoder::new(Matrix::zeros(2, 3), Embedding::zeros(2)).unwrap();
        let g = enc.encode_image_grads(&[1.0, 2.0, 3.0], &[0.0, 0.0]).unwrap();
        assert!(g.weight.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.iter().all(|&v| v == 0.0));

        let g = enc.encode_image_grads(&[0.0, 1.0, 0.0], &[2.0, -1.0]).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert_eq!(g.weight.get(r, c) != 0.0, c == 1);
            }
        }
    }

    #[test]
    fn image_grads_match_finite_differences() {
        let mut rng = RngStream::new(21, "image-grad");
        for trial in 0..20 {
            let enc = ImageEncoder::new(
                Matrix::gaussian(3, 5, 1.0, &mut rng),
                Embedding::gaussian(3, 1.0, &mut rng),
            )
            .unwrap();
            let x = rng.gaussian_vec(5, 1.0);
            let target = rng.gaussian_vec(3, 1.0);
            let z = enc.encode_image(&x).unwrap();
            let upstream = cosine_grad(&z, &target).unwrap();
            let grads = enc.encode_image_grads(&x, &upstream).unwrap();

            let numeric_w = central_difference_gradient(
                |w| {
                    let e = ImageEncoder::new(
                        Matrix::from_rows(3, 5, w.to_vec()).unwrap(),
                        enc.bias.clone(),
                    )
                    .unwrap();
                    cosine(&e.encode_image(&x).unwrap(), &target).unwrap()
                },
                enc.weight.data(),
                1e-5,
            )
            .unwrap();
            assert!(relative_error(grads.weight.data(), &numeric_w) <= 1e-6, "trial {trial}");

            let numeric_b = central_difference_gradient(
                |b| {
                    let e = ImageEncoder::new(enc.weight.clone(), Embedding::new(b.to_vec()).unwrap())
                        .unwrap();
                    cosine(&e.encode_image(&x).unwrap(), &target).unwrap()
                },
                &enc.bias,
                1e-5,
            )
            .unwrap();
            assert!(relative_error(&grads.bias, &numeric_b) <= 1e-6, "trial {trial}");
        }
    }
}
