//! Top-k routing plans and the per-rank row layout they induce.
//!
//! A [`RoutingPlan`] records every token's expert choices and weights.
//! [`PlanLayout`] derives the buffer geometry the compiler needs:
//! per-rank received rows, grouped-GEMM `group_list` prefix sums, and
//! contiguous (src, dst, expert) communication segments for both the
//! dispatch direction and the combine return path.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ShapeConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingPlan {
    pub ep_size: usize,
    pub tokens_per_rank: usize,
    pub top_k: usize,
    pub total_experts: usize,
    pub local_experts: usize,
    /// Indexed by global token id (src_rank * tokens_per_rank + local token):
    /// exactly top_k (expert_id, weight) entries, expert ids distinct.
    pub choices: Vec<Vec<(usize, f64)>>,
}

impl RoutingPlan {
    pub fn validate(&self) -> Result<()> {
        if self.total_experts != self.ep_size * self.local_experts {
            return Err(Error::RoutingError("expert/rank factorization mismatch".into()));
        }
        if self.choices.len() != self.ep_size * self.tokens_per_rank {
            return Err(Error::RoutingError(format!(
                "plan has {} token entries, expected {}",
                self.choices.len(),
                self.ep_size * self.tokens_per_rank
            )));
        }
        for (g, cs) in self.choices.iter().enumerate() {
            if cs.len() != self.top_k {
                return Err(Error::RoutingError(format!(
                    "token {g} has {} choices, expected top_k {}",
                    cs.len(),
                    self.top_k
                )));
            }
            let mut seen = std::collections::BTreeSet::new();
            for &(e, w) in cs {
                if e >= self.total_experts {
                    return Err(Error::RoutingError(format!("token {g} routes to expert {e}")));
                }
                if !seen.insert(e) {
                    return Err(Error::RoutingError(format!("token {g} repeats expert {e}")));
                }
                if !(w >= 0.0) {
                    return Err(Error::RoutingError(format!("token {g} has negative weight")));
                }
            }
        }
        Ok(())
    }

    pub fn matches(&self, c: &ShapeConfig) -> bool {
        self.ep_size == c.ep_size
            && self.tokens_per_rank == c.tokens()
            && self.top_k == c.top_k
            && self.total_experts == c.total_experts
            && self.local_experts == c.local_experts
    }

    pub fn expert_rank(&self, expert: usize) -> usize {
        expert / self.local_experts
    }

    pub fn global_token(&self, src_rank: usize, local_token: usize) -> usize {
        src_rank * self.tokens_per_rank + local_token
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        serde_json::to_vec_pretty(self).map_err(|e| Error::ParseError(e.to_string()))
    }

    pub fn from_json(bytes: &[u8]) -> Result<RoutingPlan> {
        let p: RoutingPlan =
            serde_json::from_slice(bytes).map_err(|e| Error::ParseError(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }
}

/// Perfectly balanced deterministic plan: token g's j-th choice is expert
/// (g * top_k + j) mod total_experts, weights proportional to (j + 1).
pub fn balanced_plan(c: &ShapeConfig) -> Result<RoutingPlan> {
    c.validate()?;
    let t = c.tokens();
    let wsum: f64 = (1..=c.top_k).map(|j| j as f64).sum();
    let choices = (0..c.ep_size * t)
        .map(|g| {
            (0..c.top_k)
                .map(|j| (((g * c.top_k + j) % c.total_experts), (j + 1) as f64 / wsum))
                .collect()
        })
        .collect();
    let plan = RoutingPlan {
        ep_size: c.ep_size,
        tokens_per_rank: t,
        top_k: c.top_k,
        total_experts: c.total_experts,
        local_experts: c.local_experts,
        choices,
    };
    plan.validate()?;
    Ok(plan)
}

/// Seeded natural-routing plan: distinct experts sampled without
/// replacement from a categorical with probability proportional to
/// exp(-skew * e / E); weights positive, normalized per token.
pub fn natural_plan(c: &ShapeConfig, seed: u64, skew: f64) -> Result<RoutingPlan> {
    c.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = c.tokens();
    let base: Vec<f64> =
        (0..c.total_experts).map(|e| (-skew * e as f64 / c.total_experts as f64).exp()).collect();
    let unit = Uniform::new(0.0f64, 1.0);
    let wdist = Uniform::new(0.05f64, 1.0);

    let mut choices = Vec::with_capacity(c.ep_size * t);
    for _ in 0..c.ep_size * t {
        let mut probs = base.clone();
        let mut picked = Vec::with_capacity(c.top_k);
        for _ in 0..c.top_k {
            let total: f64 = probs.iter().sum();
            let mut r = unit.sample(&mut rng) * total;
            let mut e = 0;
            for (i, p) in probs.iter().enumerate() {
                r -= p;
                if r <= 0.0 {
                    e = i;
                    break;
                }
                e = i;
            }
            probs[e] = 0.0;
            picked.push(e);
        }
        let raw: Vec<f64> = (0..c.top_k).map(|_| wdist.sample(&mut rng)).collect();
        let sum: f64 = raw.iter().sum();
        choices.push(picked.into_iter().zip(raw.into_iter().map(|w| w / sum)).collect());
    }
    let plan = RoutingPlan {
        ep_size: c.ep_size,
        tokens_per_rank: t,
        top_k: c.top_k,
        total_experts: c.total_experts,
        local_experts: c.local_experts,
        choices,
    };
    plan.validate()?;
    Ok(plan)
}

/// One (src_rank, dst_rank, local_expert) communication segment.
///
/// Rows are contiguous in the destination's receive buffer starting at
/// `dst_row_start`, and the combine return path writes them back into the
/// source's staging buffer contiguously starting at `stage_slot_start`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub dst_row_start: usize,
    pub stage_slot_start: usize,
    /// (local token on src, choice index j), ordered by (token, j).
    pub entries: Vec<(usize, usize)>,
}

/// Buffer geometry induced by a plan.
///
/// Receive-buffer row order on rank d: (local_expert, src_rank, token, j).
/// Staging-slot order on rank s: (global_expert, token, j).
#[derive(Debug, Clone)]
pub struct PlanLayout {
    /// Rows received per rank (= rows each rank's experts process).
    pub recv_rows: Vec<usize>,
    /// Per rank: prefix sums of per-local-expert row counts.
    pub group_list: Vec<Vec<usize>>,
    /// (src, dst, local_expert) -> segment. Empty segments omitted.
    pub segments: BTreeMap<(usize, usize, usize), Segment>,
    /// Per rank d: recv row index -> (src_rank, local token, j).
    pub row_assign: Vec<Vec<(usize, usize, usize)>>,
    /// Per rank s: (local token, j) -> staging slot index.
    pub slot_of: Vec<BTreeMap<(usize, usize), usize>>,
}

impl PlanLayout {
    pub fn build(plan: &RoutingPlan) -> Result<PlanLayout> {
        plan.validate()?;
        let p = plan.ep_size;
        let t = plan.tokens_per_rank;

        // Staging slot order per source rank: sort (token, j) by
        // (global expert, token, j).
        let mut slot_of = vec![BTreeMap::new(); p];
        let mut stage_start: BTreeMap<(usize, usize, usize), usize> = BTreeMap::new();
        for s in 0..p {
            let mut slots: Vec<(usize, usize, usize)> = Vec::with_capacity(t * plan.top_k);
            for tok in 0..t {
                for (j, &(e, _)) in plan.choices[plan.global_token(s, tok)].iter().enumerate() {
                    slots.push((e, tok, j));
                }
            }
            slots.sort();
            for (idx, &(e, tok, j)) in slots.iter().enumerate() {
                slot_of[s].insert((tok, j), idx);
                let d = plan.expert_rank(e);
                let le = e % plan.local_experts;
                stage_start.entry((s, d, le)).or_insert(idx);
            }
        }

        // Segment entries in (token, j) order per (src, dst, local_expert).
        let mut entries: BTreeMap<(usize, usize, usize), Vec<(usize, usize)>> = BTreeMap::new();
        for s in 0..p {
            for tok in 0..t {
                for (j, &(e, _)) in plan.choices[plan.global_token(s, tok)].iter().enumerate() {
                    let d = plan.expert_rank(e);
                    let le = e % plan.local_experts;
                    entries.entry((s, d, le)).or_default().push((tok, j));
                }
            }
        }

        // Receive-buffer sweep per destination: (local_expert, src, token, j).
        let mut recv_rows = vec![0usize; p];
        let mut group_list = vec![Vec::with_capacity(plan.local_experts); p];
        let mut row_assign = vec![Vec::new(); p];
        let mut segments = BTreeMap::new();
        for d in 0..p {
            let mut row = 0usize;
            for le in 0..plan.local_experts {
                for s in 0..p {
                    if let Some(es) = entries.get(&(s, d, le)) {
                        segments.insert(
                            (s, d, le),
                            Segment {
                                dst_row_start: row,
                                stage_slot_start: stage_start[&(s, d, le)],
                                entries: es.clone(),
                            },
                        );
                        for &(tok, j) in es {
                            row_assign[d].push((s, tok, j));
                        }
                        row += es.len();
                    }
                }
                group_list[d].push(row);
            }
            recv_rows[d] = row;
        }

        Ok(PlanLayout { recv_rows, group_list, segments, row_assign, slot_of })
    }
}
