//! Retrieval metrics over the rank of the ground-truth answer.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::RankingResult;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mrr: f64,
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
    pub mean_rank: f64,
    pub ndcg: f64,
    pub episode_count: usize,
}

impl MetricReport {
    /// Field-wise mean of several reports (episode counts are summed).
    pub fn mean_of(reports: &[MetricReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::contract("no reports to average"));
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            mrr: avg(|r| r.mrr),
            r_at_1: avg(|r| r.r_at_1),
            r_at_5: avg(|r| r.r_at_5),
            r_at_10: avg(|r| r.r_at_10),
            mean_rank: avg(|r| r.mean_rank),
            ndcg: avg(|r| r.ndcg),
            episode_count: reports.iter().map(|r| r.episode_count).sum(),
        })
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "MRR {:.4}  R@1 {:.4}  R@5 {:.4}  R@10 {:.4}  Mean {:.2}  NDCG {:.4}  (n={})",
            self.mrr, self.r_at_1, self.r_at_5, self.r_at_10, self.mean_rank, self.ndcg, self.episode_count
        )
    }
}

fn gt_rank(r: &RankingResult) -> Result<usize> {
    r.gt_rank
        .ok_or_else(|| Error::contract("ranking has no ground-truth index"))
}

/// Fraction of rankings with the ground truth in the top `k`.
pub fn recall_at(rankings: &[RankingResult], k: usize) -> Result<f64> {
    if rankings.is_empty() {
        return Err(Error::contract("no episodes"));
    }
    let hits = rankings
        .iter()
        .map(gt_rank)
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|&r| r <= k)
        .count();
    Ok(hits as f64 / rankings.len() as f64)
}

/// `DCG / IDCG` over the full candidate list with discount
/// `1 / log2(1 + rank)`. Without graded relevance the ground truth has gain
/// 1 and every other candidate 0.
pub fn ndcg(result: &RankingResult, relevance: Option<&[f64]>) -> Result<f64> {
    let k = result.ranking.len();
    let gains: Vec<f64> = match relevance {
        Some(rel) => {
            if rel.len() != k {
                return Err(Error::contract(format!(
                    "relevance has {} entries for {k} candidates",
                    rel.len()
                )));
            }
            rel.to_vec()
        }
        None => {
            let gt = result
                .gt_index
                .ok_or_else(|| Error::contract("ranking has no ground-truth index"))?;
            (0..k).map(|c| if c == gt { 1.0 } else { 0.0 }).collect()
        }
    };
    let discount = |pos: usize| 1.0 / ((pos + 2) as f64).log2();
    let dcg: f64 = result
        .ranking
        .iter()
        .enumerate()
        .map(|(pos, &c)| gains[c] * discount(pos))
        .sum();
    let mut ideal = gains;
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg: f64 = ideal.iter().enumerate().map(|(pos, g)| g * discount(pos)).sum();
    if idcg <= 0.0 {
        return Err(Error::contract("relevance is zero for every candidate"));
    }
    Ok(dcg / idcg)
}

/// Aggregates per-episode rankings. `relevance`, when given, holds optional
/// graded relevance per episode.
pub fn compute_metrics(rankings: &[RankingResult], relevance: Option<&[Option<Vec<f64>>]>) -> Result<MetricReport> {
    if rankings.is_empty() {
        return Err(Error::contract("no episodes"));
    }
    if let Some(rel) = relevance {
        if rel.len() != rankings.len() {
            return Err(Error::contract(format!(
                "{} relevance entries for {} rankings",
                rel.len(),
                rankings.len()
            )));
        }
    }
    let n = rankings.len() as f64;
    let ranks = rankings.iter().map(gt_rank).collect::<Result<Vec<_>>>()?;
    let mut ndcg_sum = 0.0;
    for (k, r) in rankings.iter().enumerate() {
        let rel = relevance.and_then(|rel| rel[k].as_deref());
        ndcg_sum += ndcg(r, rel)?;
    }
    Ok(MetricReport {
        mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
        r_at_1: recall_at(rankings, 1)?,
        r_at_5: recall_at(rankings, 5)?,
        r_at_10: recall_at(rankings, 10)?,
        mean_rank: ranks.iter().map(|&r| r as f64).sum::<f64>() / n,
        ndcg: ndcg_sum / n,
        episode_count: rankings.len(),
    })
}
