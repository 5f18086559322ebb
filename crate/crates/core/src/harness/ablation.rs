use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::eval::evaluate;
use super::metrics::MetricReport;
use super::train::train;
use super::RunConfig;
use crate::error::{Error, Result};
use crate::model::{Ablation, Kbgn};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub param_count: usize,
    /// One report per seed, in seed order.
    pub per_seed: Vec<MetricReport>,
    pub mean: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, ablation: Ablation) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.ablation == ablation)
    }

    /// Percentages for MRR, recalls and NDCG; raw mean rank.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Model | Params | MRR | R@1 | R@5 | R@10 | Mean | NDCG |\n");
        out.push_str("|---|---:|---:|---:|---:|---:|---:|---:|\n");
        for r in &self.rows {
            let m = &r.mean;
            out.push_str(&format!(
                "| {} | {} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} |\n",
                r.ablation,
                r.param_count,
                100.0 * m.mrr,
                100.0 * m.r_at_1,
                100.0 * m.r_at_5,
                100.0 * m.r_at_10,
                m.mean_rank,
                100.0 * m.ndcg
            ));
        }
        out
    }
}

/// Comma-separated ablation names.
pub fn parse_ablations(list: &str) -> Result<Vec<Ablation>> {
    let out: Vec<Ablation> = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(Error::config("empty ablation list"));
    }
    Ok(out)
}

/// Trains and evaluates every variant once per seed; rows follow the
/// requested order. Each seed fixes data, initialization and batch order.
pub fn run_ablation_suite(base: &RunConfig, ablations: &[Ablation], seeds: &[u64]) -> Result<AblationTable> {
    if ablations.is_empty() || seeds.is_empty() {
        return Err(Error::config("need at least one ablation and one seed"));
    }
    let data = seeds
        .par_iter()
        .map(|&s| base.clone().with_seed(s).data.load())
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize)> = (0..ablations.len())
        .flat_map(|a| (0..seeds.len()).map(move |s| (a, s)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(a, s)| {
            let (train_set, val_set) = &data[s];
            let mut cfg = base.clone().with_seed(seeds[s]).with_ablation(ablations[a]);
            cfg.resolve(train_set)?;
            let (model, params) = Kbgn::new(cfg.model.clone())?;
            let count = params.scalar_count();
            let tr = train_set.encode()?;
            let va = val_set.encode()?;
            let outcome = train(&model, params, &tr, &[], &cfg.train, None, None)?;
            let eval_set = if va.is_empty() { &tr } else { &va };
            let (report, _) = evaluate(&model, &outcome.params, eval_set, None)?;
            Ok((count, report))
        })
        .collect::<Result<Vec<_>>>()?;

    let rows = ablations
        .iter()
        .enumerate()
        .map(|(a, &ablation)| {
            let chunk = &results[a * seeds.len()..(a + 1) * seeds.len()];
            let per_seed: Vec<MetricReport> = chunk.iter().map(|(_, r)| *r).collect();
            Ok(AblationRow {
                ablation,
                param_count: chunk[0].0,
                mean: MetricReport::mean_of(&per_seed)?,
                per_seed,
            })
        })
        .collect::<Result<_>>()?;
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}
