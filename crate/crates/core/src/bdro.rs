//! Bi-level distributionally robust optimization.
//!
//! Each step explores worst-case perturbations of the global and OOD banks
//! by penalized gradient ascent, then takes one descent step on the
//! log-sum-exp robust loss over the mini-batch with the perturbations held
//! fixed.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::BdroConfig;
use crate::encoder::FrozenEncoder;
use crate::error::{Error, Result};
use crate::linalg::{add, log_sum_exp, norm};
use crate::objective::{BankSet, Banks, EncodedBanks, LossGradient, Sample};
use crate::prompt::{PromptBank, PromptContext, Role};

/// Halvings tried before an ascent step is abandoned.
const MAX_BACKTRACKS: usize = 40;

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationState {
    pub epsilons: Vec<Vec<f64>>,
    pub target_role: Role,
}

impl PerturbationState {
    pub fn zeros(bank: &PromptBank) -> Self {
        Self {
            epsilons: bank.prompts.iter().map(|p| vec![0.0; p.context.len()]).collect(),
            target_role: bank.role,
        }
    }

    pub fn apply(&self, bank: &PromptBank) -> PromptBank {
        bank.shifted(&self.epsilons)
    }

    /// Mean per-prompt transport cost `‖ε_i‖₂`; zero for an empty bank.
    pub fn mean_cost(&self) -> f64 {
        if self.epsilons.is_empty() {
            return 0.0;
        }
        self.epsilons.iter().map(|e| norm(e)).sum::<f64>() / self.epsilons.len() as f64
    }
}

/// `‖p.context − q.context‖₂`.
pub fn transport_cost(p: &PromptContext, q: &PromptContext) -> Result<f64> {
    if p.context.len() != q.context.len() {
        return Err(Error::Dimension { expected: p.context.len(), got: q.context.len() });
    }
    Ok(crate::linalg::sq_dist(&p.context, &q.context).sqrt())
}

/// `scale · log(mean(exp(f / scale)))`, shifted by the max for stability.
pub fn robust_loss(f_values: &[f64], scale: f64) -> f64 {
    assert!(scale > 0.0 && !f_values.is_empty());
    let z: Vec<f64> = f_values.iter().map(|f| f / scale).collect();
    scale * (log_sum_exp(&z) - (f_values.len() as f64).ln())
}

/// `∂ robust_loss / ∂ f_i`, a softmax of `f / scale`.
pub fn robust_loss_weights(f_values: &[f64], scale: f64) -> Vec<f64> {
    let z: Vec<f64> = f_values.iter().map(|f| f / scale).collect();
    let lse = log_sum_exp(&z);
    z.iter().map(|v| (v - lse).exp()).collect()
}

/// `L(t + ε) − τ·mean_i ‖ε_i‖₂ − γ·Σ_i ‖ε_i‖₁`
fn penalized(loss: f64, eps: &[Vec<f64>], tau_cost: f64, gamma: f64) -> f64 {
    let n = eps.len().max(1) as f64;
    let cost: f64 = eps.iter().map(|e| norm(e)).sum::<f64>() / n;
    let l1: f64 = eps.iter().flatten().map(|v| v.abs()).sum();
    loss - tau_cost * cost - gamma * l1
}

fn signum0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Worst-case exploration around `bank`.
///
/// `loss_eval` receives perturbed contexts `t + ε` and returns the batch loss
/// with its gradient per context. ε starts at `N(0, σ²I)` and takes `steps`
/// ascent steps on the penalized objective; a step that would lower the
/// objective is retried with the learning rate halved.
pub fn perturb_bank<F, R>(
    bank: &PromptBank,
    mut loss_eval: F,
    tau_cost: f64,
    steps: usize,
    cfg: &BdroConfig,
    rng: &mut R,
) -> Result<PerturbationState>
where
    F: FnMut(&[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)>,
    R: Rng,
{
    let mut state = PerturbationState::zeros(bank);
    if cfg.sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.sigma).map_err(|e| Error::Config(e.to_string()))?;
        for e in state.epsilons.iter_mut().flatten() {
            *e = normal.sample(rng);
        }
    }
    if steps == 0 || bank.is_empty() {
        return Ok(state);
    }
    let base = bank.contexts();
    let perturbed = |eps: &[Vec<f64>]| -> Vec<Vec<f64>> {
        base.iter().zip(eps).map(|(t, e)| add(t, e)).collect()
    };
    let n = bank.len() as f64;

    let (loss, mut grad) = loss_eval(&perturbed(&state.epsilons))?;
    let mut value = penalized(loss, &state.epsilons, tau_cost, cfg.gamma);
    for _ in 0..steps {
        let direction: Vec<Vec<f64>> = state
            .epsilons
            .iter()
            .zip(&grad)
            .map(|(e, g)| {
                let en = norm(e);
                g.iter()
                    .zip(e)
                    .map(|(gi, ei)| {
                        let cost = if en > 0.0 { tau_cost * ei / (en * n) } else { 0.0 };
                        gi - cost - cfg.gamma * signum0(*ei)
                    })
                    .collect()
            })
            .collect();
        let mut lr = cfg.inner_lr;
        let mut accepted = false;
        for _ in 0..MAX_BACKTRACKS {
            let trial: Vec<Vec<f64>> = state
                .epsilons
                .iter()
                .zip(&direction)
                .map(|(e, d)| e.iter().zip(d).map(|(a, b)| a + lr * b).collect())
                .collect();
            let (l, g) = loss_eval(&perturbed(&trial))?;
            let v = penalized(l, &trial, tau_cost, cfg.gamma);
            if v >= value {
                state.epsilons = trial;
                grad = g;
                value = v;
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(state)
}

/// Hyperparameters of the bank-level objective shared by every step.
#[derive(Debug, Clone, Copy)]
pub struct ScoringParams {
    pub temperature: f64,
    pub rho: f64,
}

/// Explore worst-case global then OOD perturbations for one batch.
pub fn explore<R: Rng>(
    banks: &BankSet,
    batch: &[Sample],
    enc: &FrozenEncoder,
    cfg: &BdroConfig,
    scoring: ScoringParams,
    rng: &mut R,
) -> Result<(PerturbationState, PerturbationState)> {
    let w = vec![1.0 / batch.len() as f64; batch.len()];
    let eps_g = perturb_bank(
        &banks.global,
        |ctx| {
            let g = banks.global.with_contexts(ctx.to_vec());
            let eb = EncodedBanks::new(
                Banks { local: &banks.local, global: &g, ood: &banks.ood },
                enc,
                scoring.temperature,
                scoring.rho,
            )?;
            let (l, grad) = eb.weighted_loss_gradient(batch, &w)?;
            Ok((l, grad.global))
        },
        cfg.tau1,
        cfg.steps_global,
        cfg,
        rng,
    )?;
    let hat_g = eps_g.apply(&banks.global);
    let eps_o = perturb_bank(
        &banks.ood,
        |ctx| {
            let o = banks.ood.with_contexts(ctx.to_vec());
            let eb = EncodedBanks::new(
                Banks { local: &banks.local, global: &hat_g, ood: &o },
                enc,
                scoring.temperature,
                scoring.rho,
            )?;
            let (l, grad) = eb.weighted_loss_gradient(batch, &w)?;
            Ok((l, grad.ood))
        },
        cfg.tau2,
        cfg.steps_ood,
        cfg,
        rng,
    )?;
    Ok((eps_g, eps_o))
}

/// Robust loss and its gradient w.r.t. the clean contexts with ε fixed.
///
/// `f_i = L_i(t^l, t^g + ε^g, t^o + ε^o) − τ1·mean‖ε^g‖ − τ2·mean‖ε^o‖`, and
/// since `t̂ = t + ε` is a shift, gradients w.r.t. `t̂` equal those w.r.t. `t`.
pub fn robust_objective(
    banks: &BankSet,
    batch: &[Sample],
    enc: &FrozenEncoder,
    eps_g: &PerturbationState,
    eps_o: &PerturbationState,
    cfg: &BdroConfig,
    scoring: ScoringParams,
) -> Result<(f64, LossGradient)> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let hat_g = eps_g.apply(&banks.global);
    let hat_o = eps_o.apply(&banks.ood);
    let eb = EncodedBanks::new(
        Banks { local: &banks.local, global: &hat_g, ood: &hat_o },
        enc,
        scoring.temperature,
        scoring.rho,
    )?;
    let shift = cfg.tau1 * eps_g.mean_cost() + cfg.tau2 * eps_o.mean_cost();
    let f: Vec<f64> = eb.per_sample_losses(batch)?.iter().map(|l| l - shift).collect();
    let scale = cfg.tau2 * cfg.mu;
    let weights = robust_loss_weights(&f, scale);
    let (_, grad) = eb.weighted_loss_gradient(batch, &weights)?;
    Ok((robust_loss(&f, scale), grad))
}

/// One BDRO step: explore, then descend on the robust loss. Returns the
/// robust loss before the update.
pub fn bdro_step<R: Rng>(
    banks: &mut BankSet,
    batch: &[Sample],
    enc: &FrozenEncoder,
    cfg: &BdroConfig,
    scoring: ScoringParams,
    rng: &mut R,
) -> Result<f64> {
    let (eps_g, eps_o) = explore(banks, batch, enc, cfg, scoring, rng)?;
    let (loss, grad) = robust_objective(banks, batch, enc, &eps_g, &eps_o, cfg, scoring)?;
    banks.descend(&grad, cfg.outer_lr);
    Ok(loss)
}
