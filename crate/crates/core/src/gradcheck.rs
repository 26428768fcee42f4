//! Finite-difference certification of the analytic gradients of the
//! separation loss and the robust (BDRO) objective.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::bdro::{explore, robust_objective, ScoringParams};
use crate::config::BdroConfig;
use crate::encoder::FrozenEncoder;
use crate::error::Result;
use crate::objective::{loss_gradient, mean_loss, BankSet, LossGradient, Sample};
use crate::prompt::{PromptBank, PromptContext, Role};
use crate::rng::derive_rng;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-8;

const CLASSES: usize = 3;
const OOD: usize = 2;
const EMBED_DIM: usize = 5;
const CONTEXT_DIM: usize = 4;
const BATCH: usize = 4;

pub const GROUPS: [&str; 6] = ["sep.local", "sep.global", "sep.ood", "bdro.local", "bdro.global", "bdro.ood"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub trials: usize,
    pub tol: f64,
    /// Worst relative error per entry of [`GROUPS`].
    pub worst: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.worst.iter().map(|w| w.1).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_error() <= self.tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn normal_vec<R: Rng>(d: usize, s: f64, rng: &mut R) -> Vec<f64> {
    (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            s * z
        })
        .collect()
}

struct Instance {
    enc: FrozenEncoder,
    banks: BankSet,
    batch: Vec<Sample>,
    scoring: ScoringParams,
    bdro: BdroConfig,
}

fn instance(seed: u64, trial: usize) -> Instance {
    let mut rng = derive_rng(seed, &format!("gradcheck/{trial}"));
    let enc = FrozenEncoder::random(EMBED_DIM, CONTEXT_DIM, &mut rng);
    let id_bank = |role: Role, rng: &mut rand_chacha::ChaCha20Rng| {
        let prompts = (0..CLASSES)
            .map(|c| PromptContext::id(role, c, normal_vec(CONTEXT_DIM, 0.5, rng), normal_vec(CONTEXT_DIM, 1.0, rng)))
            .collect();
        PromptBank::new(role, prompts)
    };
    let local = id_bank(Role::Local, &mut rng);
    let global = id_bank(Role::GlobalId, &mut rng);
    let ood = PromptBank::new(
        Role::Ood,
        (0..OOD).map(|_| PromptContext::ood(normal_vec(CONTEXT_DIM, 0.5, &mut rng), normal_vec(CONTEXT_DIM, 1.0, &mut rng))).collect(),
    );
    let batch = (0..BATCH).map(|_| Sample::new(normal_vec(EMBED_DIM, 1.0, &mut rng), rng.random_range(0..CLASSES))).collect();
    let scoring = ScoringParams { temperature: rng.random_range(0.1..1.0), rho: rng.random_range(0.1..0.9) };
    let bdro = BdroConfig { sigma: 0.1, inner_lr: 0.1, tau1: rng.random_range(0.5..2.0), tau2: rng.random_range(0.5..2.0), mu: rng.random_range(0.5..2.0), ..BdroConfig::default() };
    Instance { enc, banks: BankSet { local, global, ood }, batch, scoring, bdro }
}

fn bank_mut(b: &mut BankSet, g: usize) -> &mut PromptBank {
    match g {
        0 => &mut b.local,
        1 => &mut b.global,
        _ => &mut b.ood,
    }
}

fn grad_part(g: &LossGradient, part: usize) -> &[Vec<f64>] {
    match part {
        0 => &g.local,
        1 => &g.global,
        _ => &g.ood,
    }
}

/// Worst relative error per bank for objective `f` with gradient `grad`.
fn compare(banks: &BankSet, grad: &LossGradient, mut f: impl FnMut(&BankSet) -> Result<f64>) -> Result<[f64; 3]> {
    let mut worst = [0.0; 3];
    for (part, w) in worst.iter_mut().enumerate() {
        let analytic = grad_part(grad, part);
        for (p, row) in analytic.iter().enumerate() {
            for (i, &g) in row.iter().enumerate() {
                let mut plus = banks.clone();
                bank_mut(&mut plus, part).prompts[p].context[i] += FD_STEP;
                let mut minus = banks.clone();
                bank_mut(&mut minus, part).prompts[p].context[i] -= FD_STEP;
                let fd = (f(&plus)? - f(&minus)?) / (2.0 * FD_STEP);
                *w = f64::max(*w, relative_error(g, fd));
            }
        }
    }
    Ok(worst)
}

pub fn run_grad_check(trials: usize, tol: f64, seed: u64) -> Result<GradCheckReport> {
    let mut worst = [0.0f64; 6];
    for t in 0..trials {
        let inst = instance(seed, t);
        let Instance { enc, banks, batch, scoring, bdro } = &inst;
        let (tau, rho) = (scoring.temperature, scoring.rho);

        let (_, g) = loss_gradient(batch, banks.view(), enc, tau, rho)?;
        let sep = compare(banks, &g, |b| mean_loss(batch, b.view(), enc, tau, rho))?;

        let mut rng = derive_rng(seed, &format!("gradcheck/{t}/eps"));
        let (eg, eo) = explore(banks, batch, enc, bdro, *scoring, &mut rng)?;
        let (_, g) = robust_objective(banks, batch, enc, &eg, &eo, bdro, *scoring)?;
        let rob = compare(banks, &g, |b| Ok(robust_objective(b, batch, enc, &eg, &eo, bdro, *scoring)?.0))?;

        for (w, v) in worst.iter_mut().zip(sep.iter().chain(&rob)) {
            *w = w.max(*v);
        }
    }
    Ok(GradCheckReport {
        trials,
        tol,
        worst: GROUPS.iter().map(|s| s.to_string()).zip(worst).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert_eq!(relative_error(0.0, 1e-12), 1e-12 / REL_FLOOR);
    }

    #[test]
    fn few_trials_pass() {
        let r = run_grad_check(10, 1e-4, 3).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.worst.len(), 6);
        assert!(r.max_error() > 1e-12);
    }
}
