//! Learnable prompt template `[v1] [domain] [v2] [category]` and its
//! objective: an alignment term pulling text features toward same-class image
//! features and a similarity term pushing apart texts that share a category
//! but differ in domain word.

use serde::{Deserialize, Serialize};

use crate::embedding::{check_len, cosine, cosine_grad, Embedding, EPS_NORM};
use crate::encoders::{TextEncoder, TokenEmbedding};
use crate::error::{Result, TdgError};
use crate::rng::RngStream;
use crate::words::DomainWordPool;

/// Standard deviation of the initial context vectors.
pub const PROMPT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub v1: TokenEmbedding,
    pub v2: TokenEmbedding,
}

impl PromptTemplate {
    pub fn new(v1: TokenEmbedding, v2: TokenEmbedding) -> Result<Self> {
        check_len(v1.len(), v2.len())?;
        if !v1.is_finite() || !v2.is_finite() {
            return Err(TdgError::Numeric("prompt vectors must be finite".into()));
        }
        Ok(Self { v1, v2 })
    }

    /// Both context vectors i.i.d. Gaussian(0, 0.02²).
    pub fn random(token_dim: usize, rng: &mut RngStream) -> Self {
        Self {
            v1: Embedding::gaussian(token_dim, PROMPT_INIT_STD, rng),
            v2: Embedding::gaussian(token_dim, PROMPT_INIT_STD, rng),
        }
    }

    pub fn token_dim(&self) -> usize {
        self.v1.len()
    }

    /// `[v1, domain, v2, category]`
    pub fn fill(
        &self,
        domain_tok: &TokenEmbedding,
        category_tok: &TokenEmbedding,
    ) -> Result<Vec<TokenEmbedding>> {
        check_len(self.token_dim(), domain_tok.len())?;
        check_len(self.token_dim(), category_tok.len())?;
        Ok(vec![
            self.v1.clone(),
            domain_tok.clone(),
            self.v2.clone(),
            category_tok.clone(),
        ])
    }
}

/// Slot of `v1` and `v2` in a filled template.
pub const V1_SLOT: usize = 0;
pub const V2_SLOT: usize = 2;
const TEMPLATE_LEN: usize = 4;

/// `N_c × N_d` text features; cell `(i, j)` encodes category `i` with domain word `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextFeatureGrid {
    n_categories: usize,
    n_words: usize,
    features: Vec<Embedding>,
}

impl TextFeatureGrid {
    /// Builds a grid from row-major features, validating every cell norm.
    pub fn from_features(
        n_categories: usize,
        n_words: usize,
        features: Vec<Embedding>,
    ) -> Result<Self> {
        if n_categories == 0 || n_words == 0 {
            return Err(TdgError::DegenerateInput("text grid needs at least one cell".into()));
        }
        check_len(n_categories * n_words, features.len())?;
        let dim = features[0].len();
        for (idx, f) in features.iter().enumerate() {
            check_len(dim, f.len())?;
            if !(f.norm() > EPS_NORM) {
                return Err(TdgError::DegenerateFeature {
                    category: idx / n_words,
                    word: idx % n_words,
                });
            }
        }
        Ok(Self {
            n_categories,
            n_words,
            features,
        })
    }

    pub fn n_categories(&self) -> usize {
        self.n_categories
    }

    pub fn n_words(&self) -> usize {
        self.n_words
    }

    pub fn get(&self, category: usize, word: usize) -> &Embedding {
        &self.features[category * self.n_words + word]
    }

    /// Cells in row-major order with their category label.
    pub fn cells(&self) -> impl Iterator<Item = (usize, &Embedding)> {
        self.features
            .iter()
            .enumerate()
            .map(move |(idx, f)| (idx / self.n_words, f))
    }

    pub fn features(&self) -> &[Embedding] {
        &self.features
    }
}

fn pool_tokens(pool: &DomainWordPool) -> Result<&[TokenEmbedding]> {
    pool.token_embeddings().ok_or_else(|| {
        TdgError::Config("domain word pool has no token embeddings assigned".into())
    })
}

/// `grid[i][j] = E_txt(fill(T, domain_j, category_i))`.
pub fn build_text_grid(
    template: &PromptTemplate,
    encoder: &TextEncoder,
    categories: &[TokenEmbedding],
    pool: &DomainWordPool,
) -> Result<TextFeatureGrid> {
    build_text_grid_from_tokens(template, encoder, categories, pool_tokens(pool)?)
}

pub fn build_text_grid_from_tokens(
    template: &PromptTemplate,
    encoder: &TextEncoder,
    categories: &[TokenEmbedding],
    domain_tokens: &[TokenEmbedding],
) -> Result<TextFeatureGrid> {
    if categories.is_empty() || domain_tokens.is_empty() {
        return Err(TdgError::DegenerateInput(
            "text grid needs at least one category and one domain word".into(),
        ));
    }
    let mut features = Vec::with_capacity(categories.len() * domain_tokens.len());
    for (i, cat) in categories.iter().enumerate() {
        for (j, dom) in domain_tokens.iter().enumerate() {
            let z = encoder.encode_text(&template.fill(dom, cat)?)?;
            if !(z.norm() > EPS_NORM) {
                return Err(TdgError::DegenerateFeature {
                    category: i,
                    word: j,
                });
            }
            features.push(z);
        }
    }
    TextFeatureGrid::from_features(categories.len(), domain_tokens.len(), features)
}

fn check_batch(image_feats: &[Embedding], labels: &[usize], n_categories: usize) -> Result<()> {
    if image_feats.is_empty() {
        return Err(TdgError::DegenerateInput("empty image batch".into()));
    }
    check_len(image_feats.len(), labels.len())?;
    for &y in labels {
        if y >= n_categories {
            return Err(TdgError::Index {
                index: y,
                len: n_categories,
            });
        }
    }
    Ok(())
}

/// Alignment loss: negative mean cosine between each image feature and the
/// text features of its own category.
pub fn loss_alignment(
    image_feats: &[Embedding],
    labels: &[usize],
    grid: &TextFeatureGrid,
) -> Result<f64> {
    check_batch(image_feats, labels, grid.n_categories())?;
    let mut total = 0.0;
    for (z, &y) in image_feats.iter().zip(labels) {
        for j in 0..grid.n_words() {
            total += cosine(z, grid.get(y, j))?;
        }
    }
    Ok(-total / (image_feats.len() as f64 * grid.n_words() as f64))
}

/// Similarity loss: mean pairwise cosine between text features of the same
/// category, diagonal pairs included (each contributes exactly 1).
pub fn loss_similarity(grid: &TextFeatureGrid) -> Result<f64> {
    let nd = grid.n_words();
    let mut total = 0.0;
    for i in 0..grid.n_categories() {
        for j in 0..nd {
            for jp in 0..nd {
                total += if j == jp {
                    1.0
                } else {
                    cosine(grid.get(i, j), grid.get(i, jp))?
                };
            }
        }
    }
    Ok(total / (grid.n_categories() as f64 * (nd * nd) as f64))
}

/// Relative weights of the two prompt terms: `L = alignment·L_a + similarity·L_s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alignment: f64,
    pub similarity: f64,
}

impl LossWeights {
    /// `L_a + λ·L_s`
    pub fn full(lambda: f64) -> Self {
        Self {
            alignment: 1.0,
            similarity: lambda,
        }
    }
}

/// Prompt objective value, its parts, and gradients with respect to `v1`, `v2`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptLoss {
    pub total: f64,
    pub alignment: f64,
    pub similarity: f64,
    pub grad_v1: TokenEmbedding,
    pub grad_v2: TokenEmbedding,
}

/// Gradient of `weights·(L_a, L_s)` with respect to every grid cell.
fn grid_upstream(
    image_feats: &[Embedding],
    labels: &[usize],
    grid: &TextFeatureGrid,
    weights: LossWeights,
) -> Result<Vec<Vec<f64>>> {
    let nd = grid.n_words();
    let nc = grid.n_categories();
    let dim = grid.get(0, 0).len();
    let mut upstream = vec![vec![0.0; dim]; nc * nd];

    if weights.alignment != 0.0 {
        let scale = -weights.alignment / (image_feats.len() as f64 * nd as f64);
        for (z, &y) in image_feats.iter().zip(labels) {
            for j in 0..nd {
                let g = cosine_grad(grid.get(y, j), z)?;
                for (u, gv) in upstream[y * nd + j].iter_mut().zip(g.iter()) {
                    *u += scale * gv;
                }
            }
        }
    }

    // Diagonal terms are constant and contribute no gradient. Each unordered
    // off-diagonal pair appears twice in the double sum.
    if weights.similarity != 0.0 && nd > 1 {
        let scale = 2.0 * weights.similarity / (nc as f64 * (nd * nd) as f64);
        for i in 0..nc {
            for j in 0..nd {
                for jp in 0..nd {
                    if j == jp {
                        continue;
                    }
                    let g = cosine_grad(grid.get(i, j), grid.get(i, jp))?;
                    for (u, gv) in upstream[i * nd + j].iter_mut().zip(g.iter()) {
                        *u += scale * gv;
                    }
                }
            }
        }
    }
    Ok(upstream)
}

/// `L_pl = L_a + λ·L_s` with exact gradients for both context vectors.
#[allow(clippy::too_many_arguments)]
pub fn prompt_loss_and_grads(
    template: &PromptTemplate,
    encoder: &TextEncoder,
    image_feats: &[Embedding],
    labels: &[usize],
    categories: &[TokenEmbedding],
    pool: &DomainWordPool,
    lambda: f64,
) -> Result<PromptLoss> {
    if !(lambda >= 0.0) {
        return Err(TdgError::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    prompt_loss_and_grads_weighted(
        template,
        encoder,
        image_feats,
        labels,
        categories,
        pool_tokens(pool)?,
        LossWeights::full(lambda),
    )
}

/// Same as [`prompt_loss_and_grads`] with explicit term weights and raw
/// domain-word tokens. Image features are constants here.
pub fn prompt_loss_and_grads_weighted(
    template: &PromptTemplate,
    encoder: &TextEncoder,
    image_feats: &[Embedding],
    labels: &[usize],
    categories: &[TokenEmbedding],
    domain_tokens: &[TokenEmbedding],
    weights: LossWeights,
) -> Result<PromptLoss> {
    let grid = build_text_grid_from_tokens(template, encoder, categories, domain_tokens)?;
    check_batch(image_feats, labels, grid.n_categories())?;
    let alignment = loss_alignment(image_feats, labels, &grid)?;
    let similarity = loss_similarity(&grid)?;
    let total = weights.alignment * alignment + weights.similarity * similarity;

    let upstream = grid_upstream(image_feats, labels, &grid, weights)?;
    let mut summed = vec![0.0; encoder.embed_dim()];
    for u in &upstream {
        for (s, v) in summed.iter_mut().zip(u) {
            *s += v;
        }
    }
    // Every cell shares v1 and v2, so their gradients are the sum over cells;
    // the filled sequence only fixes the pooling length.
    let probe = template.fill(&domain_tokens[0], &categories[0])?;
    debug_assert_eq!(probe.len(), TEMPLATE_LEN);
    let grad_v1 = encoder.encode_text_grad(&probe, V1_SLOT, &summed)?;
    let grad_v2 = encoder.encode_text_grad(&probe, V2_SLOT, &summed)?;

    Ok(PromptLoss {
        total,
        alignment,
        similarity,
        grad_v1,
        grad_v2,
    })
}
