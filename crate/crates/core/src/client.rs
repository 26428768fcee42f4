//! Client-side local training and prediction.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::bdro::{bdro_step, ScoringParams};
use crate::config::RunConfig;
use crate::encoder::FrozenEncoder;
use crate::error::{Error, Result};
use crate::linalg::{dot, log_sum_exp, norm};
use crate::objective::{loss_gradient, BankSet, Banks, EncodedBanks, Sample};
use crate::prompt::{PromptBank, Role};

#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    pub samples: Vec<Sample>,
    pub class_counts: Vec<usize>,
}

impl ClientShard {
    pub fn new(client_id: usize, samples: Vec<Sample>, num_classes: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data(format!("client {client_id} has no samples")));
        }
        let mut class_counts = vec![0; num_classes];
        for s in &samples {
            *class_counts.get_mut(s.label).ok_or(Error::InvalidLabel(s.label))? += 1;
        }
        Ok(Self { client_id, samples, class_counts })
    }

    pub fn holds_class(&self, c: usize) -> bool {
        self.class_counts.get(c).is_some_and(|&n| n > 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub local_bank: PromptBank,
    pub staged_global: Option<PromptBank>,
    pub staged_ood: Option<PromptBank>,
}

impl ClientState {
    pub fn new(local_bank: PromptBank) -> Self {
        Self { local_bank, staged_global: None, staged_ood: None }
    }

    pub fn stage(&mut self, global: PromptBank, ood: PromptBank) {
        self.staged_global = Some(global);
        self.staged_ood = Some(ood);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrainStats {
    pub batches: usize,
    pub loss_sum: f64,
}

impl TrainStats {
    pub fn mean_loss(&self) -> Option<f64> {
        (self.batches > 0).then(|| self.loss_sum / self.batches as f64)
    }
}

pub fn scoring(cfg: &RunConfig) -> ScoringParams {
    ScoringParams { temperature: cfg.run.temperature, rho: cfg.run.fusion }
}

/// Plain gradient step on the separation loss. Returns the pre-update loss.
pub fn plain_step(
    banks: &mut BankSet,
    batch: &[Sample],
    enc: &FrozenEncoder,
    lr: f64,
    scoring: ScoringParams,
) -> Result<f64> {
    let (loss, grad) = loss_gradient(batch, banks.view(), enc, scoring.temperature, scoring.rho)?;
    banks.descend(&grad, lr);
    Ok(loss)
}

/// E epochs of shuffled mini-batch training on the staged banks. The local
/// bank stays in `state`; the updated global and OOD banks are returned.
pub fn local_train<R: Rng>(
    state: &mut ClientState,
    shard: &ClientShard,
    enc: &FrozenEncoder,
    cfg: &RunConfig,
    rng: &mut R,
) -> Result<(PromptBank, PromptBank, TrainStats)> {
    if shard.samples.is_empty() {
        return Err(Error::Data(format!("client {} has no samples", shard.client_id)));
    }
    let (global, ood) = match (state.staged_global.take(), state.staged_ood.take()) {
        (Some(g), Some(o)) => (g, o),
        _ => return Err(Error::Bank(format!("client {} has no staged banks", shard.client_id))),
    };
    let mut banks = BankSet { local: state.local_bank.clone(), global, ood };
    let scoring = scoring(cfg);
    let mut stats = TrainStats::default();
    let mut order: Vec<usize> = (0..shard.samples.len()).collect();
    let mut batch = Vec::with_capacity(cfg.run.batch_size);
    for _ in 0..cfg.run.local_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.run.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| shard.samples[i].clone()));
            let loss = if cfg.run.enable_bos {
                bdro_step(&mut banks, &batch, enc, &cfg.bdro, scoring, rng)?
            } else {
                plain_step(&mut banks, &batch, enc, cfg.bdro.outer_lr, scoring)?
            };
            stats.batches += 1;
            stats.loss_sum += loss;
        }
    }
    state.local_bank = banks.local;
    Ok((banks.global, banks.ood, stats))
}

/// Fused-prompt classifier for one client.
pub struct Predictor<'e> {
    encoded: EncodedBanks<'e>,
    temperature: f64,
}

impl<'e> Predictor<'e> {
    pub fn new(local: &PromptBank, global: &PromptBank, enc: &'e FrozenEncoder, temperature: f64, rho: f64) -> Result<Self> {
        let no_ood = PromptBank::new(Role::Ood, Vec::new());
        let encoded = EncodedBanks::new(Banks { local, global, ood: &no_ood }, enc, temperature, rho)?;
        Ok(Self { encoded, temperature })
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let cos = self.encoded.id_cosines(x)?;
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (c, v) in cos.iter().enumerate() {
            let s = (v / self.temperature).exp();
            if s > best_score {
                best = c;
                best_score = s;
            }
        }
        Ok(best)
    }
}

pub fn predict(
    x: &[f64],
    local: &PromptBank,
    global: &PromptBank,
    enc: &FrozenEncoder,
    temperature: f64,
    rho: f64,
) -> Result<usize> {
    Predictor::new(local, global, enc, temperature, rho)?.predict(x)
}

/// Maximum softmax over ID classes of `cos(x, e_c)/τ`, global prompts only.
pub struct McmScorer {
    dirs: Vec<Vec<f64>>,
    temperature: f64,
}

impl McmScorer {
    pub fn new(global: &PromptBank, enc: &FrozenEncoder, temperature: f64) -> Result<Self> {
        let dirs = global
            .prompts
            .iter()
            .map(|p| {
                let e = enc.encode_prompt(p)?;
                let n = norm(&e);
                if n == 0.0 {
                    return Err(Error::ZeroNorm);
                }
                Ok(e.iter().map(|v| v / n).collect())
            })
            .collect::<Result<_>>()?;
        Ok(Self { dirs, temperature })
    }

    pub fn score(&self, x: &[f64]) -> Result<f64> {
        let nx = norm(x);
        if nx == 0.0 {
            return Err(Error::ZeroNorm);
        }
        let logits: Vec<f64> = self.dirs.iter().map(|d| (dot(x, d) / nx).clamp(-1.0, 1.0) / self.temperature).collect();
        mcm_from_logits(&logits)
    }
}

fn mcm_from_logits(logits: &[f64]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::Bank("MCM needs at least one class".into()));
    }
    let lse = log_sum_exp(logits);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((max - lse).exp())
}

pub fn mcm_score(x: &[f64], global: &PromptBank, enc: &FrozenEncoder, temperature: f64) -> Result<f64> {
    McmScorer::new(global, enc, temperature)?.score(x)
}
