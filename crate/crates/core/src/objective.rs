//! Class-level and distribution-level separation losses and their
//! closed-form gradients with respect to prompt contexts.
//!
//! For a sample `x` with label `y`, fused ID prompts `t_c = (1-ρ)t^l_c + ρ t^g_c`
//! and OOD prompts `t^o_u`, write `s_c = cos(x, e_c)/τ` and `s̃_u = cos(x, ẽ_u)/τ`.
//! The loss `-log p(y|x) - log p_ID(x)` simplifies to
//!
//! ```text
//! L = -s_y + 2·lse(s, s̃) - lse(s)
//! ```
//!
//! which is what [`EncodedBanks::sample_terms`] evaluates.

use serde::{Deserialize, Serialize};

use crate::encoder::FrozenEncoder;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, log_sum_exp, norm};
use crate::prompt::{PromptBank, PromptContext};

/// One labeled in-distribution embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub label: usize,
}

impl Sample {
    pub fn new(x: Vec<f64>, label: usize) -> Self {
        Self { x, label }
    }
}

/// Raw similarity scores `S(x, t_c)` and `S(x, t^o_u)` for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSlate {
    pub id_scores: Vec<f64>,
    pub ood_scores: Vec<f64>,
}

impl ScoreSlate {
    pub fn new(id_scores: Vec<f64>, ood_scores: Vec<f64>) -> Self {
        debug_assert!(id_scores.iter().chain(&ood_scores).all(|s| s.is_finite() && *s > 0.0));
        Self { id_scores, ood_scores }
    }

    fn total(&self) -> f64 {
        self.id_scores.iter().sum::<f64>() + self.ood_scores.iter().sum::<f64>()
    }

    /// `p(y = c | x)` for every ID class; the denominator includes OOD scores.
    pub fn class_probabilities(&self) -> Vec<f64> {
        let z = self.total();
        self.id_scores.iter().map(|s| s / z).collect()
    }

    /// `p(y_ID = 1 | x)`.
    pub fn id_probability(&self) -> f64 {
        self.id_scores.iter().sum::<f64>() / self.total()
    }

    /// Share of the normalizer held by each OOD prompt.
    pub fn ood_probabilities(&self) -> Vec<f64> {
        let z = self.total();
        self.ood_scores.iter().map(|s| s / z).collect()
    }

    pub fn separation_loss(&self, label: usize) -> Result<f64> {
        let p = self.class_probabilities();
        let pc = *p.get(label).ok_or(Error::InvalidLabel(label))?;
        Ok(-pc.ln() - self.id_probability().ln())
    }
}

/// Per-prompt context gradients for the three trainable banks.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub local: Vec<Vec<f64>>,
    pub global: Vec<Vec<f64>>,
    pub ood: Vec<Vec<f64>>,
}

impl LossGradient {
    pub fn zeros(classes: usize, ood: usize, dim: usize) -> Self {
        Self {
            local: vec![vec![0.0; dim]; classes],
            global: vec![vec![0.0; dim]; classes],
            ood: vec![vec![0.0; dim]; ood],
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.local
            .iter()
            .chain(&self.global)
            .chain(&self.ood)
            .flatten()
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// The three banks a client trains with.
#[derive(Debug, Clone, Copy)]
pub struct Banks<'a> {
    pub local: &'a PromptBank,
    pub global: &'a PromptBank,
    pub ood: &'a PromptBank,
}

/// Owned counterpart of [`Banks`].
#[derive(Debug, Clone, PartialEq)]
pub struct BankSet {
    pub local: PromptBank,
    pub global: PromptBank,
    pub ood: PromptBank,
}

impl BankSet {
    pub fn view(&self) -> Banks<'_> {
        Banks { local: &self.local, global: &self.global, ood: &self.ood }
    }

    /// Plain gradient-descent update of all three banks.
    pub fn descend(&mut self, grad: &LossGradient, lr: f64) {
        for (bank, g) in [
            (&mut self.local, &grad.local),
            (&mut self.global, &grad.global),
            (&mut self.ood, &grad.ood),
        ] {
            for (p, gp) in bank.prompts.iter_mut().zip(g) {
                axpy(-lr, gp, &mut p.context);
            }
        }
    }
}

/// `(1-ρ)·t_l + ρ·t_g`, keeping the class name of `t_l`.
pub fn fuse_prompts(local: &PromptContext, global: &PromptContext, rho: f64) -> Result<PromptContext> {
    match (local.class_id, global.class_id) {
        (Some(a), Some(b)) if a != b => return Err(Error::ClassMismatch(a, b)),
        _ => {}
    }
    if local.context.len() != global.context.len() {
        return Err(Error::Dimension { expected: local.context.len(), got: global.context.len() });
    }
    let context = if rho == 0.0 {
        local.context.clone()
    } else if rho == 1.0 {
        global.context.clone()
    } else {
        local
            .context
            .iter()
            .zip(&global.context)
            .map(|(l, g)| (1.0 - rho) * l + rho * g)
            .collect()
    };
    Ok(local.with_context(context))
}

pub fn class_probabilities(s: &ScoreSlate) -> Vec<f64> {
    s.class_probabilities()
}

pub fn id_probability(s: &ScoreSlate) -> f64 {
    s.id_probability()
}

/// Unit-direction and norm of an encoded prompt.
#[derive(Debug, Clone)]
struct Encoded {
    dir: Vec<f64>,
    norm: f64,
}

impl Encoded {
    fn new(e: Vec<f64>) -> Result<Self> {
        let n = norm(&e);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::ZeroNorm);
        }
        Ok(Self { dir: e.iter().map(|v| v / n).collect(), norm: n })
    }
}

/// Per-sample derivative of the loss w.r.t. the logits `s_c`, `s̃_u`.
#[derive(Debug, Clone)]
pub struct SampleTerms {
    pub loss: f64,
    pub d_id: Vec<f64>,
    pub d_ood: Vec<f64>,
    id_cos: Vec<f64>,
    ood_cos: Vec<f64>,
}

/// Fused ID embeddings and OOD embeddings for a fixed parameter state.
#[derive(Debug, Clone)]
pub struct EncodedBanks<'e> {
    enc: &'e FrozenEncoder,
    id: Vec<Encoded>,
    ood: Vec<Encoded>,
    temperature: f64,
    rho: f64,
}

impl<'e> EncodedBanks<'e> {
    pub fn new(banks: Banks<'_>, enc: &'e FrozenEncoder, temperature: f64, rho: f64) -> Result<Self> {
        if banks.local.len() != banks.global.len() {
            return Err(Error::Bank("local and global banks differ in size".into()));
        }
        let id = banks
            .local
            .prompts
            .iter()
            .zip(&banks.global.prompts)
            .map(|(l, g)| Encoded::new(enc.encode_prompt(&fuse_prompts(l, g, rho)?)?))
            .collect::<Result<Vec<_>>>()?;
        let ood = banks
            .ood
            .prompts
            .iter()
            .map(|p| Encoded::new(enc.encode_prompt(p)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { enc, id, ood, temperature, rho })
    }

    pub fn num_classes(&self) -> usize {
        self.id.len()
    }

    /// Cosines of `x` against the fused ID prompts.
    pub fn id_cosines(&self, x: &[f64]) -> Result<Vec<f64>> {
        let nx = norm(x);
        if nx == 0.0 {
            return Err(Error::ZeroNorm);
        }
        Ok(self.id.iter().map(|e| dot(x, &e.dir) / nx).collect())
    }

    pub fn slate(&self, x: &[f64]) -> Result<ScoreSlate> {
        let nx = norm(x);
        if nx == 0.0 {
            return Err(Error::ZeroNorm);
        }
        let score = |e: &Encoded| (dot(x, &e.dir) / nx / self.temperature).exp();
        Ok(ScoreSlate::new(self.id.iter().map(score).collect(), self.ood.iter().map(score).collect()))
    }

    pub fn sample_terms(&self, x: &[f64], label: usize) -> Result<SampleTerms> {
        if label >= self.id.len() {
            return Err(Error::InvalidLabel(label));
        }
        if x.len() != self.enc.embed_dim() {
            return Err(Error::Dimension { expected: self.enc.embed_dim(), got: x.len() });
        }
        let nx = norm(x);
        if nx == 0.0 {
            return Err(Error::ZeroNorm);
        }
        let id_cos: Vec<f64> = self.id.iter().map(|e| dot(x, &e.dir) / nx).collect();
        let ood_cos: Vec<f64> = self.ood.iter().map(|e| dot(x, &e.dir) / nx).collect();
        let s_id: Vec<f64> = id_cos.iter().map(|c| c / self.temperature).collect();
        let s_ood: Vec<f64> = ood_cos.iter().map(|c| c / self.temperature).collect();
        let all: Vec<f64> = s_id.iter().chain(&s_ood).copied().collect();
        let lse_all = log_sum_exp(&all);
        let lse_id = log_sum_exp(&s_id);
        let loss = -s_id[label] + 2.0 * lse_all - lse_id;
        let d_id = s_id
            .iter()
            .enumerate()
            .map(|(c, s)| {
                let hit = if c == label { 1.0 } else { 0.0 };
                -hit + 2.0 * (s - lse_all).exp() - (s - lse_id).exp()
            })
            .collect();
        let d_ood = s_ood.iter().map(|s| 2.0 * (s - lse_all).exp()).collect();
        Ok(SampleTerms { loss: loss.max(0.0), d_id, d_ood, id_cos, ood_cos })
    }

    /// Accumulate `weight · ∂L/∂e` into embedding-space gradients.
    fn accumulate(&self, x: &[f64], terms: &SampleTerms, weight: f64, g_id: &mut [Vec<f64>], g_ood: &mut [Vec<f64>]) {
        let nx = norm(x);
        let push = |e: &Encoded, cos: f64, d: f64, g: &mut Vec<f64>| {
            // ∂cos/∂e = (x̂ - cos·ê) / ‖e‖
            let k = weight * d / (self.temperature * e.norm);
            axpy(k / nx, x, g);
            axpy(-k * cos, &e.dir, g);
        };
        for (c, e) in self.id.iter().enumerate() {
            push(e, terms.id_cos[c], terms.d_id[c], &mut g_id[c]);
        }
        for (u, e) in self.ood.iter().enumerate() {
            push(e, terms.ood_cos[u], terms.d_ood[u], &mut g_ood[u]);
        }
    }

    /// Weighted loss and context gradient over a batch:
    /// `Σ_i w_i L_i` and `Σ_i w_i ∇L_i`.
    pub fn weighted_loss_gradient(&self, batch: &[Sample], weights: &[f64]) -> Result<(f64, LossGradient)> {
        debug_assert_eq!(batch.len(), weights.len());
        let d = self.enc.embed_dim();
        let mut g_id = vec![vec![0.0; d]; self.id.len()];
        let mut g_ood = vec![vec![0.0; d]; self.ood.len()];
        let mut loss = 0.0;
        for (s, &w) in batch.iter().zip(weights) {
            let terms = self.sample_terms(&s.x, s.label)?;
            loss += w * terms.loss;
            self.accumulate(&s.x, &terms, w, &mut g_id, &mut g_ood);
        }
        Ok((loss, self.pull_back(g_id, g_ood)))
    }

    pub fn per_sample_losses(&self, batch: &[Sample]) -> Result<Vec<f64>> {
        batch.iter().map(|s| Ok(self.sample_terms(&s.x, s.label)?.loss)).collect()
    }

    fn pull_back(&self, g_id: Vec<Vec<f64>>, g_ood: Vec<Vec<f64>>) -> LossGradient {
        let mut local = Vec::with_capacity(g_id.len());
        let mut global = Vec::with_capacity(g_id.len());
        for g in &g_id {
            let gt = self.enc.context_vjp(g);
            local.push(gt.iter().map(|v| (1.0 - self.rho) * v).collect());
            global.push(gt.iter().map(|v| self.rho * v).collect());
        }
        let ood = g_ood.iter().map(|g| self.enc.context_vjp(g)).collect();
        LossGradient { local, global, ood }
    }
}

/// `-log p(y|x) - log p_ID(x)` for one sample.
pub fn separation_loss(
    x: &[f64],
    label: usize,
    banks: Banks<'_>,
    enc: &FrozenEncoder,
    temperature: f64,
    rho: f64,
) -> Result<f64> {
    Ok(EncodedBanks::new(banks, enc, temperature, rho)?.sample_terms(x, label)?.loss)
}

/// Mean separation loss over a batch.
pub fn mean_loss(batch: &[Sample], banks: Banks<'_>, enc: &FrozenEncoder, temperature: f64, rho: f64) -> Result<f64> {
    let eb = EncodedBanks::new(banks, enc, temperature, rho)?;
    let losses = eb.per_sample_losses(batch)?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Mean loss and its gradient with respect to every trainable context.
pub fn loss_gradient(
    batch: &[Sample],
    banks: Banks<'_>,
    enc: &FrozenEncoder,
    temperature: f64,
    rho: f64,
) -> Result<(f64, LossGradient)> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let eb = EncodedBanks::new(banks, enc, temperature, rho)?;
    let w = vec![1.0 / batch.len() as f64; batch.len()];
    eb.weighted_loss_gradient(batch, &w)
}
