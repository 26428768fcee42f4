//! Server step: class-weighted aggregation of global prompts and
//! transport-based calibration against the pooled OOD prompts.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::prompt::{PromptBank, PromptContext, Role};
use crate::transport::{cost_matrix, semiuot_solve, Matrix, TransportPlan};

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregated {
    pub bank: PromptBank,
    /// Classes nobody trained this round; their previous prompt was kept.
    pub kept_classes: Vec<usize>,
}

/// `t^g_c = Σ_k n_kc·t^g_kc / Σ_k n_kc`.
pub fn aggregate_global(banks: &[PromptBank], counts: &[Vec<usize>], prev: &PromptBank) -> Result<Aggregated> {
    if banks.len() != counts.len() {
        return Err(Error::Dimension { expected: banks.len(), got: counts.len() });
    }
    let classes = prev.len();
    for (b, n) in banks.iter().zip(counts) {
        b.validate(classes)?;
        if n.len() != classes {
            return Err(Error::Dimension { expected: classes, got: n.len() });
        }
    }
    let mut prompts = Vec::with_capacity(classes);
    let mut kept_classes = Vec::new();
    for c in 0..classes {
        let total: usize = counts.iter().map(|n| n[c]).sum();
        if total == 0 {
            kept_classes.push(c);
            prompts.push(prev.prompts[c].clone());
            continue;
        }
        let mut ctx = vec![0.0; prev.prompts[c].context.len()];
        for (b, n) in banks.iter().zip(counts).filter(|(_, n)| n[c] > 0) {
            let w = n[c] as f64 / total as f64;
            for (o, v) in ctx.iter_mut().zip(&b.prompts[c].context) {
                *o += w * v;
            }
        }
        prompts.push(prev.prompts[c].with_context(ctx));
    }
    Ok(Aggregated { bank: PromptBank::new(Role::GlobalId, prompts), kept_classes })
}

/// Per-unit transported cost of each OOD prompt: `Σ_c π_cj·C_cj / b_j`.
pub fn alignment_scores(plan: &TransportPlan, cost: &Matrix) -> Vec<f64> {
    (0..plan.cols())
        .map(|j| {
            let moved: f64 = plan.pi.iter().zip(cost).map(|(p, c)| p[j] * c[j]).sum();
            moved / plan.col_marginal[j]
        })
        .collect()
}

/// Indices of the `m` lowest scores, ties to the lowest index, ascending.
pub fn select_seemly(scores: &[f64], m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order.truncate(m);
    order.sort_unstable();
    order
}

/// EMA of each class context toward the row-normalized transport
/// barycenter of the seemly prompts. `restricted` is `C × M`.
pub fn calibrate_global(global: &PromptBank, seemly: &[PromptContext], restricted: &Matrix, alpha: f64) -> Result<PromptBank> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config("server.alpha out of [0,1]".into()));
    }
    if restricted.len() != global.len() {
        return Err(Error::Dimension { expected: global.len(), got: restricted.len() });
    }
    let prompts = global
        .prompts
        .iter()
        .zip(restricted)
        .map(|(p, w)| {
            if w.len() != seemly.len() {
                return Err(Error::Dimension { expected: seemly.len(), got: w.len() });
            }
            let mass: f64 = w.iter().sum();
            if mass <= 0.0 {
                return Ok(p.clone());
            }
            let mut target = vec![0.0; p.context.len()];
            for (wj, s) in w.iter().zip(seemly) {
                if s.context.len() != target.len() {
                    return Err(Error::Dimension { expected: target.len(), got: s.context.len() });
                }
                for (t, v) in target.iter_mut().zip(&s.context) {
                    *t += wj / mass * v;
                }
            }
            let ctx = p.context.iter().zip(&target).map(|(o, t)| alpha * o + (1.0 - alpha) * t).collect();
            Ok(p.with_context(ctx))
        })
        .collect::<Result<_>>()?;
    Ok(PromptBank::new(global.role, prompts))
}

/// The `u` highest-scoring prompts, listed by descending score then index.
pub fn filter_ood(all: &PromptBank, scores: &[f64], u: usize) -> Result<PromptBank> {
    if scores.len() != all.len() {
        return Err(Error::Dimension { expected: all.len(), got: scores.len() });
    }
    if u > all.len() {
        return Err(Error::Bank(format!("cannot keep {u} of {} OOD prompts", all.len())));
    }
    // Membership comes from the same (score, index) order as `select_seemly`,
    // so the two sets stay disjoint under ties.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut kept = order.split_off(order.len() - u);
    kept.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(PromptBank::new(Role::Ood, kept.iter().map(|&j| all.prompts[j].clone()).collect()))
}

/// Interleave client banks prompt by prompt and keep the first `u`.
pub fn round_robin_ood(banks: &[PromptBank], u: usize) -> PromptBank {
    let longest = banks.iter().map(PromptBank::len).max().unwrap_or(0);
    let prompts = (0..longest)
        .flat_map(|i| banks.iter().filter_map(move |b| b.prompts.get(i).cloned()))
        .take(u)
        .collect();
    PromptBank::new(Role::Ood, prompts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOutcome {
    pub new_global: PromptBank,
    pub new_ood: PromptBank,
    pub seemly_indices: Vec<usize>,
    /// `None` when calibration is disabled.
    pub plan: Option<TransportPlan>,
    pub scores: Vec<f64>,
    pub kept_classes: Vec<usize>,
}

pub fn seemly_count(cfg: &RunConfig, j: usize) -> usize {
    let m = cfg.server.top_m.unwrap_or_else(|| (0.1 * j as f64).ceil() as usize);
    m.clamp(1, j.max(1))
}

pub fn server_round(
    client_globals: &[PromptBank],
    client_oods: &[PromptBank],
    counts: &[Vec<usize>],
    prev_global: &PromptBank,
    cfg: &RunConfig,
) -> Result<CalibrationOutcome> {
    if client_globals.is_empty() {
        return Err(Error::Bank("server round without participants".into()));
    }
    if client_oods.len() != client_globals.len() {
        return Err(Error::Dimension { expected: client_globals.len(), got: client_oods.len() });
    }
    let u = cfg.run.num_ood_prompts;
    for b in client_oods {
        b.validate(u)?;
    }
    let agg = aggregate_global(client_globals, counts, prev_global)?;
    if !cfg.run.enable_goc {
        return Ok(CalibrationOutcome {
            new_global: agg.bank,
            new_ood: round_robin_ood(client_oods, u),
            seemly_indices: Vec::new(),
            plan: None,
            scores: Vec::new(),
            kept_classes: agg.kept_classes,
        });
    }

    let pooled = PromptBank::new(Role::Ood, client_oods.iter().flat_map(|b| b.prompts.iter().cloned()).collect());
    let j = pooled.len();
    if j == 0 {
        return Ok(CalibrationOutcome {
            new_global: agg.bank,
            new_ood: pooled,
            seemly_indices: Vec::new(),
            plan: None,
            scores: Vec::new(),
            kept_classes: agg.kept_classes,
        });
    }
    let c = agg.bank.len();
    let cost = cost_matrix(&agg.bank, &pooled)?;
    let a = vec![1.0 / c as f64; c];
    let b = vec![1.0 / j as f64; j];
    let plan = semiuot_solve(&cost, &a, &b, &cfg.semiuot)?;
    let scores = alignment_scores(&plan, &cost);
    let seemly_indices = select_seemly(&scores, seemly_count(cfg, j));
    let seemly: Vec<PromptContext> = seemly_indices.iter().map(|&i| pooled.prompts[i].clone()).collect();
    let restricted: Matrix = plan.pi.iter().map(|row| seemly_indices.iter().map(|&i| row[i]).collect()).collect();
    let new_global = calibrate_global(&agg.bank, &seemly, &restricted, cfg.server.alpha)?;
    let new_ood = filter_ood(&pooled, &scores, u.min(j))?;
    Ok(CalibrationOutcome { new_global, new_ood, seemly_indices, plan: Some(plan), scores, kept_classes: agg.kept_classes })
}
