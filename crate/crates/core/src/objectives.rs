//! Relation cross-entropy, sentence-level and relation-level InfoNCE,
//! probability-space distillation MSE, and their weighted totals.
//!
//! Tape versions build differentiable scalars; the plain `f64` versions
//! evaluate the same formulas on finished grids.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::codeswitch::RelationAlignment;
use crate::diff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::relcodec::{RelationGrid, ScoredGrid};
use crate::rng::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub tau: f64,
    /// Source phase: weight of `sc + tc`.
    pub w: f64,
    /// Target phase: weight of `tc`.
    pub w1: f64,
    /// Target phase: weight of the distillation term.
    pub w2: f64,
    /// Negatives per positive in the relation contrastive loss.
    pub neg_cap: usize,
    /// Score sentence reps in both directions.
    pub symmetric_sc: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            tau: 0.1,
            w: 0.5,
            w1: 0.5,
            w2: 1.0,
            neg_cap: 128,
            symmetric_sc: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || self.w < 0.0 || self.w1 < 0.0 || self.w2 < 0.0 || self.neg_cap == 0 {
            return Err(Error::Config(format!("invalid loss weights {self:?}")));
        }
        Ok(())
    }
}

/// Added inside the logarithm by [`loss_ce`].
pub const CE_GUARD: f64 = 1e-12;

/// Mean over all cells of `-ln(p_gold + 1e-12)`.
pub fn loss_ce(scored: &ScoredGrid, gold: &RelationGrid) -> Result<f64> {
    if scored.n() != gold.n() {
        return Err(Error::Shape {
            op: "loss_ce",
            lhs: vec![scored.n()],
            rhs: vec![gold.n()],
        });
    }
    let n = gold.n();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            total -= (scored.cell(i, j)[gold.get(i, j).index()] + CE_GUARD).ln();
        }
    }
    Ok(total / (n * n) as f64)
}

/// Differentiable cross-entropy from `[n², R]` logits, through
/// log-softmax.
pub fn ce_loss<T: Real>(tape: &mut Tape<T>, logits: Var, gold: &RelationGrid) -> Result<Var> {
    let r = tape.value(logits).last_dim();
    let cells = gold.n() * gold.n();
    if tape.value(logits).rows() != cells {
        return Err(Error::Shape {
            op: "ce_loss",
            lhs: tape.shape(logits).to_vec(),
            rhs: vec![cells, r],
        });
    }
    let logp = tape.log_softmax(logits);
    let index: Vec<usize> = gold
        .cells()
        .iter()
        .enumerate()
        .map(|(k, c)| k * r + c.index())
        .collect();
    let picked = tape.take(logp, index, &[cells])?;
    let mean = tape.mean(picked)?;
    Ok(tape.scale(mean, -1.0))
}

/// InfoNCE over a batch: row `k` of `src` against every row of `cpt`, the
/// positive being row `k`. Both `[B, d]`.
pub fn sc_loss<T: Real>(tape: &mut Tape<T>, src: Var, cpt: Var, tau: f64, symmetric: bool) -> Result<Var> {
    let b = tape.shape(src)[0];
    if tape.shape(src) != tape.shape(cpt) || b == 0 {
        return Err(Error::Shape {
            op: "sc_loss",
            lhs: tape.shape(src).to_vec(),
            rhs: tape.shape(cpt).to_vec(),
        });
    }
    let one_way = |tape: &mut Tape<T>, a: Var, c: Var| -> Result<Var> {
        let sim = tape.cosine(a, c)?;
        let logits = tape.scale(sim, 1.0 / tau);
        let logp = tape.log_softmax(logits);
        let diag = tape.take(logp, (0..b).map(|k| k * b + k).collect(), &[b])?;
        let mean = tape.mean(diag)?;
        Ok(tape.scale(mean, -1.0))
    };
    let forward = one_way(tape, src, cpt)?;
    if !symmetric {
        return Ok(forward);
    }
    let backward = one_way(tape, cpt, src)?;
    let sum = tape.add(forward, backward)?;
    Ok(tape.scale(sum, 0.5))
}

/// Which cells to project for the relation contrastive loss, and the
/// candidate list of every aligned pair.
///
/// Rows `0..src_cells.len()` of the stacked projection matrix are source
/// cells, the rest counterpart cells. Each candidate list starts with the
/// positive and has the same length for every pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TcPlan {
    pub src_cells: Vec<usize>,
    pub cpt_cells: Vec<usize>,
    /// Row of each anchor within `src_cells`.
    pub anchors: Vec<usize>,
    pub candidates: Vec<Vec<usize>>,
}

impl TcPlan {
    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Samples negatives for every aligned pair. Cells are flat indices
/// (`i·n + j`) into grids of `n_src_cells` and `n_cpt_cells` cells. For
/// pair `p`, up to `k` negatives are drawn uniformly without replacement
/// from the union of both grids minus the pair's own two cells.
pub fn plan_tc(n_src_cells: usize, n_cpt_cells: usize, pairs: &[(usize, usize)], k: usize, seed: u64) -> TcPlan {
    let union = n_src_cells + n_cpt_cells;
    let mut src_row = vec![usize::MAX; n_src_cells];
    let mut cpt_row = vec![usize::MAX; n_cpt_cells];
    let mut plan = TcPlan {
        src_cells: Vec::new(),
        cpt_cells: Vec::new(),
        anchors: Vec::new(),
        candidates: Vec::new(),
    };
    // union index u < n_src_cells is a source cell, otherwise counterpart
    let mut raw: Vec<Vec<usize>> = Vec::with_capacity(pairs.len());
    for (p, &(s, c)) in pairs.iter().enumerate() {
        let pool = union - 2;
        let take = k.min(pool);
        let mut rng = rng_for(seed, "tc.negatives", p as u64);
        let mut list = vec![s, n_src_cells + c];
        for idx in sample(&mut rng, pool, take).into_iter() {
            // skip the pair's own positions; s < n_src_cells + c always
            let mut u = idx;
            if u >= s {
                u += 1;
            }
            if u >= n_src_cells + c {
                u += 1;
            }
            list.push(u);
        }
        raw.push(list);
    }
    let mut row_of = |u: usize, plan: &mut TcPlan| -> usize {
        if u < n_src_cells {
            if src_row[u] == usize::MAX {
                src_row[u] = plan.src_cells.len();
                plan.src_cells.push(u);
            }
            src_row[u]
        } else {
            let c = u - n_src_cells;
            if cpt_row[c] == usize::MAX {
                cpt_row[c] = plan.cpt_cells.len();
                plan.cpt_cells.push(c);
            }
            usize::MAX - cpt_row[c]
        }
    };
    let mut tagged: Vec<Vec<usize>> = Vec::with_capacity(raw.len());
    for list in &raw {
        let rows: Vec<usize> = list.iter().map(|&u| row_of(u, &mut plan)).collect();
        tagged.push(rows);
    }
    let ns = plan.src_cells.len();
    for rows in tagged {
        plan.anchors.push(rows[0]);
        let cands = rows[1..]
            .iter()
            .map(|&r| if r > usize::MAX / 2 { ns + (usize::MAX - r) } else { r })
            .collect();
        plan.candidates.push(cands);
    }
    plan
}

/// [`plan_tc`] for a relation alignment between grids of side `n_src` and
/// `n_cpt`.
pub fn plan_tc_for(n_src: usize, n_cpt: usize, alignment: &RelationAlignment, k: usize, seed: u64) -> TcPlan {
    let pairs: Vec<(usize, usize)> = alignment
        .pairs
        .iter()
        .map(|&((i, j), (a, b))| (i * n_src + j, a * n_cpt + b))
        .collect();
    plan_tc(n_src * n_src, n_cpt * n_cpt, &pairs, k, seed)
}

/// Relation InfoNCE. `zs` and `zc` are projections of `plan.src_cells` and
/// `plan.cpt_cells`. `None` when the plan has no pairs (the loss is zero).
pub fn tc_loss<T: Real>(tape: &mut Tape<T>, zs: Var, zc: Var, plan: &TcPlan, tau: f64) -> Result<Option<Var>> {
    if plan.is_empty() {
        return Ok(None);
    }
    let anchors = tape.take_rows(zs, &plan.anchors)?;
    let all = tape.stack_rows(&[zs, zc])?;
    let m = tape.shape(all)[0];
    let sim = tape.cosine(anchors, all)?;
    let width = plan.candidates[0].len();
    let mut index = Vec::with_capacity(plan.anchors.len() * width);
    for (p, cands) in plan.candidates.iter().enumerate() {
        if cands.len() != width {
            return Err(Error::Contract("ragged negative lists".into()));
        }
        index.extend(cands.iter().map(|&c| p * m + c));
    }
    let logits = tape.take(sim, index, &[plan.anchors.len(), width])?;
    let logits = tape.scale(logits, 1.0 / tau);
    let logp = tape.log_softmax(logits);
    let pos = tape.take(logp, (0..plan.anchors.len()).map(|p| p * width).collect(), &[plan.anchors.len()])?;
    let mean = tape.mean(pos)?;
    Ok(Some(tape.scale(mean, -1.0)))
}

/// Mean squared difference over all `n²·R` entries.
pub fn loss_mse(teacher: &ScoredGrid, student: &ScoredGrid) -> Result<f64> {
    if teacher.n() != student.n() || teacher.classes() != student.classes() {
        return Err(Error::Shape {
            op: "loss_mse",
            lhs: vec![teacher.n(), teacher.n(), teacher.classes()],
            rhs: vec![student.n(), student.n(), student.classes()],
        });
    }
    let (a, b) = (teacher.probs(), student.probs());
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
}

/// Differentiable MSE between student probabilities `[n², R]` and a fixed
/// teacher grid.
pub fn mse_loss<T: Real>(tape: &mut Tape<T>, student: Var, teacher: &ScoredGrid) -> Result<Var> {
    let n = teacher.n();
    let shape = [n * n, teacher.classes()];
    let target = Tensor::<T>::from_f64(&shape, teacher.probs())?;
    if tape.shape(student) != shape {
        return Err(Error::Shape {
            op: "mse_loss",
            lhs: tape.shape(student).to_vec(),
            rhs: shape.to_vec(),
        });
    }
    let t = tape.constant(target);
    let diff = tape.sub(student, t)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean(sq)
}

fn check_component(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(format!("loss component {name}"), format!("value {v}")))
    }
}

/// `ce + w·(sc + tc)`
pub fn total_source(ce: f64, sc: f64, tc: f64, weights: &LossWeights) -> Result<f64> {
    check_component("ce", ce)?;
    check_component("sc", sc)?;
    check_component("tc", tc)?;
    Ok(ce + weights.w * (sc + tc))
}

/// `ce + w1·tc + w2·mse`
pub fn total_target(ce: f64, tc: f64, mse: f64, weights: &LossWeights) -> Result<f64> {
    check_component("ce", ce)?;
    check_component("tc", tc)?;
    check_component("mse", mse)?;
    Ok(ce + weights.w1 * tc + weights.w2 * mse)
}

/// `Σ wᵢ·xᵢ` on the tape, skipping absent terms and zero weights.
pub fn weighted_sum<T: Real>(tape: &mut Tape<T>, terms: &[(Option<Var>, f64)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(v, w) in terms {
        let Some(v) = v else { continue };
        if w == 0.0 {
            continue;
        }
        let scaled = if w == 1.0 { v } else { tape.scale(v, w) };
        acc = Some(match acc {
            None => scaled,
            Some(a) => tape.add(a, scaled)?,
        });
    }
    Ok(acc.unwrap_or_else(|| tape.constant(Tensor::scalar(T::zero()))))
}
