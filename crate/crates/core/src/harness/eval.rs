use rayon::prelude::*;

use super::checkpoint::Checkpoint;
use super::metrics::{compute_metrics, MetricReport};
use crate::error::{Error, Result};
use crate::model::{EncodedEpisode, Kbgn, ModelConfig};
use crate::numerics::ParameterRegistry;
use crate::retrieval::RankingResult;

/// Ranks every episode with dropout off, in parallel over a shared
/// parameter snapshot. Rankings come back in input order.
pub fn evaluate(
    model: &Kbgn,
    params: &ParameterRegistry,
    episodes: &[EncodedEpisode],
    relevance: Option<&[Option<Vec<f64>>]>,
) -> Result<(MetricReport, Vec<RankingResult>)> {
    if episodes.is_empty() {
        return Err(Error::contract("no episodes"));
    }
    let rankings = episodes
        .par_iter()
        .map(|ep| model.rank(params, ep))
        .collect::<Result<Vec<_>>>()?;
    let report = compute_metrics(&rankings, relevance)?;
    Ok((report, rankings))
}

/// Evaluates a checkpoint after checking it against `expected`.
pub fn evaluate_checkpoint(
    checkpoint: &Checkpoint,
    expected: &ModelConfig,
    episodes: &[EncodedEpisode],
    relevance: Option<&[Option<Vec<f64>>]>,
) -> Result<(MetricReport, Vec<RankingResult>)> {
    let (model, params) = checkpoint.restore(expected)?;
    evaluate(&model, &params, episodes, relevance)
}
