//! Frozen linear text-encoder surrogate and similarity scoring.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};
use crate::prompt::PromptContext;

/// Fixed linear map from `context ⊕ class_name` (length `2·d_ctx`) to the
/// `d`-dimensional embedding space. Row-major, immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoder {
    embed_dim: usize,
    context_dim: usize,
    weight: Vec<f64>,
}

impl FrozenEncoder {
    pub fn from_weight(embed_dim: usize, context_dim: usize, weight: Vec<f64>) -> Result<Self> {
        let expected = embed_dim * 2 * context_dim;
        if weight.len() != expected {
            return Err(Error::Dimension { expected, got: weight.len() });
        }
        if !crate::linalg::all_finite(&weight) {
            return Err(Error::Data("encoder weight has non-finite entries".into()));
        }
        Ok(Self { embed_dim, context_dim, weight })
    }

    /// Gaussian entries with variance `1 / (2·d_ctx)`, so encoded vectors keep
    /// roughly the norm of their input.
    pub fn random<R: Rng>(embed_dim: usize, context_dim: usize, rng: &mut R) -> Self {
        let s = (1.0 / (2.0 * context_dim as f64)).sqrt();
        let weight = (0..embed_dim * 2 * context_dim)
            .map(|_| s * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { embed_dim, context_dim, weight }
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn context_dim(&self) -> usize {
        self.context_dim
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    fn row(&self, i: usize) -> &[f64] {
        let w = 2 * self.context_dim;
        &self.weight[i * w..(i + 1) * w]
    }

    pub fn encode_parts(&self, context: &[f64], class_name: &[f64]) -> Result<Vec<f64>> {
        for v in [context, class_name] {
            if v.len() != self.context_dim {
                return Err(Error::Dimension { expected: self.context_dim, got: v.len() });
            }
        }
        Ok((0..self.embed_dim)
            .map(|i| {
                let (wc, wn) = self.row(i).split_at(self.context_dim);
                dot(wc, context) + dot(wn, class_name)
            })
            .collect())
    }

    pub fn encode_prompt(&self, p: &PromptContext) -> Result<Vec<f64>> {
        self.encode_parts(&p.context, &p.class_name)
    }

    /// Pull an embedding-space gradient back to context space: `W_ctxᵀ · g`.
    pub fn context_vjp(&self, grad_embedding: &[f64]) -> Vec<f64> {
        debug_assert_eq!(grad_embedding.len(), self.embed_dim);
        let mut out = vec![0.0; self.context_dim];
        for (i, g) in grad_embedding.iter().enumerate() {
            let wc = &self.row(i)[..self.context_dim];
            crate::linalg::axpy(*g, wc, &mut out);
        }
        out
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension { expected: a.len(), got: b.len() });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `exp(cos(x, e) / τ)`.
pub fn similarity_score(x: &[f64], e: &[f64], temperature: f64) -> Result<f64> {
    Ok((cosine_similarity(x, e)? / temperature).exp())
}
