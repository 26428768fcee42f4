//! Semi-unbalanced optimal transport between global ID prompts (rows) and
//! concatenated OOD prompts (columns), solved by Frank-Wolfe.
//!
//! ```text
//! min_π  Σ π_cj C_cj + λ Σ_c [ r_c log(r_c / a_c) − r_c + a_c ]
//! s.t.   Σ_c π_cj = b_j,  π ≥ 0,      r_c = Σ_j π_cj
//! ```
//!
//! The column marginal is hard; the row marginal is a KL penalty.

use serde::{Deserialize, Serialize};

use crate::config::SemiUotConfig;
use crate::error::{Error, Result};
use crate::linalg::sq_dist;
use crate::prompt::PromptBank;

/// Floor applied to row sums inside the logarithm.
pub const ROW_SUM_FLOOR: f64 = 1e-30;

/// Step-halvings tried before the solver declares a stall.
const MAX_HALVINGS: usize = 60;

/// Single-ulp moves tried per entry when snapping a column sum.
const ULP_WALK: usize = 64;

pub type Matrix = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    pub pi: Matrix,
    pub col_marginal: Vec<f64>,
    pub row_target: Vec<f64>,
    pub objective_value: f64,
    pub iterations: usize,
}

impl TransportPlan {
    pub fn rows(&self) -> usize {
        self.pi.len()
    }

    pub fn cols(&self) -> usize {
        self.col_marginal.len()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        row_sums(&self.pi)
    }

    pub fn col_sums(&self) -> Vec<f64> {
        col_sums(&self.pi, self.cols())
    }
}

pub fn row_sums(pi: &Matrix) -> Vec<f64> {
    pi.iter().map(|r| r.iter().sum()).collect()
}

/// Column sums accumulated in row order.
pub fn col_sums(pi: &Matrix, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for row in pi {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// `C_cj = ‖t^g_c − t^o_j‖²` over context vectors.
pub fn cost_matrix(global: &PromptBank, ood_all: &PromptBank) -> Result<Matrix> {
    global
        .prompts
        .iter()
        .map(|g| {
            ood_all
                .prompts
                .iter()
                .map(|o| {
                    if o.context.len() != g.context.len() {
                        return Err(Error::Dimension { expected: g.context.len(), got: o.context.len() });
                    }
                    Ok(sq_dist(&g.context, &o.context))
                })
                .collect()
        })
        .collect()
}

/// `∇J_cj = C_cj + λ·log(max(r_c, floor) / a_c)`.
pub fn semiuot_gradient(pi: &Matrix, cost: &Matrix, a: &[f64], lambda: f64) -> Matrix {
    let r = row_sums(pi);
    cost.iter()
        .zip(&r)
        .zip(a)
        .map(|((row, rc), ac)| {
            let shift = if lambda == 0.0 { 0.0 } else { lambda * (rc.max(ROW_SUM_FLOOR) / ac).ln() };
            row.iter().map(|c| c + shift).collect()
        })
        .collect()
}

/// Linear-minimization vertex: each column puts all of `b_j` on its
/// minimum-gradient row, ties to the lowest row.
pub fn fw_direction(grad: &Matrix, b: &[f64]) -> Matrix {
    let rows = grad.len();
    let mut s = vec![vec![0.0; b.len()]; rows];
    for (j, bj) in b.iter().enumerate() {
        let mut best = 0;
        for c in 1..rows {
            if grad[c][j] < grad[best][j] {
                best = c;
            }
        }
        if rows > 0 {
            s[best][j] = *bj;
        }
    }
    s
}

pub fn semiuot_objective(pi: &Matrix, cost: &Matrix, a: &[f64], lambda: f64) -> f64 {
    let linear: f64 = pi
        .iter()
        .zip(cost)
        .map(|(p, c)| p.iter().zip(c).map(|(x, y)| x * y).sum::<f64>())
        .sum();
    if lambda == 0.0 {
        return linear;
    }
    let kl: f64 = row_sums(pi)
        .iter()
        .zip(a)
        .map(|(r, ac)| {
            let xlogx = if *r > 0.0 { r * (r / ac).ln() } else { 0.0 };
            xlogx - r + ac
        })
        .sum();
    linear + lambda * kl
}

fn check_instance(cost: &Matrix, a: &[f64], b: &[f64]) -> Result<()> {
    if cost.is_empty() || cost.len() != a.len() {
        return Err(Error::Dimension { expected: a.len(), got: cost.len() });
    }
    for row in cost {
        if row.len() != b.len() {
            return Err(Error::Dimension { expected: b.len(), got: row.len() });
        }
    }
    if a.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Data("row target a must be positive".into()));
    }
    if b.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::Data("column marginal b must be nonnegative".into()));
    }
    Ok(())
}

/// Nudge each column so its row-order sum is exactly `b_j`. The residual is
/// pushed into the largest entries first; if rounding swallows it there,
/// the smallest entries are walked one ulp at a time.
fn snap_columns(pi: &mut Matrix, b: &[f64]) {
    let rows = pi.len();
    let col_sum = |pi: &Matrix, j: usize| -> f64 { pi.iter().map(|row| row[j]).sum() };
    for (j, &bj) in b.iter().enumerate() {
        if col_sum(pi, j) == bj {
            continue;
        }
        let mut order: Vec<usize> = (0..rows).collect();
        order.sort_by(|&x, &y| pi[y][j].total_cmp(&pi[x][j]));
        order.retain(|&r| pi[r][j] > 0.0);
        for &r in &order {
            for _ in 0..4 {
                let sum = col_sum(pi, j);
                if sum == bj {
                    break;
                }
                pi[r][j] = (pi[r][j] + (bj - sum)).max(0.0);
            }
        }
        for &r in order.iter().rev() {
            for _ in 0..ULP_WALK {
                let sum = col_sum(pi, j);
                if sum == bj {
                    break;
                }
                let v = pi[r][j];
                let next = if sum < bj { v.next_up() } else { v.next_down() };
                pi[r][j] = next.max(0.0);
            }
        }
    }
}

/// Solve and call `observe(iterate, objective)` on every iterate, starting
/// with the initial vertex.
pub fn semiuot_solve_traced<F>(
    cost: &Matrix,
    a: &[f64],
    b: &[f64],
    cfg: &SemiUotConfig,
    mut observe: F,
) -> Result<TransportPlan>
where
    F: FnMut(&Matrix, f64),
{
    check_instance(cost, a, b)?;
    let lambda = cfg.lambda;
    let rows = cost.len();
    let cols = b.len();

    // π⁰ = s⁰: all column mass on row 0.
    let mut pi = vec![vec![0.0; cols]; rows];
    pi[0].copy_from_slice(b);
    let mut value = semiuot_objective(&pi, cost, a, lambda);
    observe(&pi, value);

    let mut iterations = 0;
    for i in 0..cfg.max_iters {
        let grad = semiuot_gradient(&pi, cost, a, lambda);
        let s = fw_direction(&grad, b);

        // Open-loop step 1/(i+2), halved while it would raise the objective.
        let mut beta = 1.0 / (i as f64 + 2.0);
        let mut next = None;
        for _ in 0..MAX_HALVINGS {
            let mut trial: Matrix = pi
                .iter()
                .zip(&s)
                .map(|(p, d)| p.iter().zip(d).map(|(x, y)| (1.0 - beta) * x + beta * y).collect())
                .collect();
            snap_columns(&mut trial, b);
            let v = semiuot_objective(&trial, cost, a, lambda);
            if v <= value {
                next = Some((trial, v));
                break;
            }
            beta *= 0.5;
        }
        let Some((trial, v)) = next else { break };
        let decrease = value - v;
        pi = trial;
        iterations = i + 1;
        let prev = value;
        value = v;
        observe(&pi, value);
        if decrease <= cfg.convergence_tol * prev.abs().max(f64::MIN_POSITIVE) {
            break;
        }
    }

    Ok(TransportPlan {
        pi,
        col_marginal: b.to_vec(),
        row_target: a.to_vec(),
        objective_value: value,
        iterations,
    })
}

pub fn semiuot_solve(cost: &Matrix, a: &[f64], b: &[f64], cfg: &SemiUotConfig) -> Result<TransportPlan> {
    semiuot_solve_traced(cost, a, b, cfg, |_, _| {})
}

/// Largest instance accepted by [`exact_ot_small`].
pub const EXACT_OT_MAX: usize = 8;

/// Exact balanced OT with uniform marginals by enumerating permutation
/// couplings (the vertices of the Birkhoff polytope), each scaled by `1/n`.
pub fn exact_ot_small(cost: &Matrix) -> Result<f64> {
    let n = cost.len();
    if n == 0 || n > EXACT_OT_MAX {
        return Err(Error::Data(format!("exact OT needs 1..={EXACT_OT_MAX} points, got {n}")));
    }
    if cost.iter().any(|r| r.len() != n) {
        return Err(Error::Data("exact OT needs a square cost matrix".into()));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    permute(&mut perm, 0, &mut |p| {
        let total: f64 = p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        best = best.min(total);
    });
    Ok(best / n as f64)
}

fn permute(p: &mut Vec<usize>, k: usize, visit: &mut dyn FnMut(&[usize])) {
    if k == p.len() {
        visit(p);
        return;
    }
    for i in k..p.len() {
        p.swap(k, i);
        permute(p, k + 1, visit);
        p.swap(k, i);
    }
}
