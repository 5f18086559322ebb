//! Per-episode attention and gate dumps, including the
//! object -> round -> object chain through both bridges.

use serde::{Deserialize, Serialize};

use super::data::{ClueModality, PlantedClue};
use crate::error::Result;
use crate::layers::ForwardCtx;
use crate::model::{EncodedEpisode, Kbgn};
use crate::numerics::{ParameterRegistry, Tape, Var};
use crate::retrieval::{RankingResult, SegmentMass};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateSegments {
    pub q: f64,
    pub v: f64,
    pub t: f64,
}

/// Mean gate activation per side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SideGates {
    pub v: Option<f64>,
    pub t: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeChain {
    /// argmax of the vision-side storage attention.
    pub top_vision_object: usize,
    /// Per object, the history entity with the largest relation weight in
    /// the text-to-vision bridge.
    pub top_vt_round: Vec<usize>,
    /// Per history entity, the object with the largest convolution weight
    /// in the vision-to-text bridge.
    pub top_tv_object: Vec<usize>,
    /// `[object, round, object]` followed from `top_vision_object`.
    pub path: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub episode_id: String,
    /// Vision relation selection, `N x N`.
    pub alpha: Option<Vec<Vec<f64>>>,
    /// Text relation selection, `t x t`.
    pub alpha_t: Option<Vec<Vec<f64>>>,
    pub beta_v: Option<Vec<Vec<f64>>>,
    pub beta_t: Option<Vec<Vec<f64>>>,
    /// Objects (rows) over history entities.
    pub gamma_t2v: Option<Vec<Vec<f64>>>,
    pub delta_t2v: Option<Vec<Vec<f64>>>,
    /// History entities (rows) over objects.
    pub gamma_v2t: Option<Vec<Vec<f64>>>,
    pub delta_v2t: Option<Vec<Vec<f64>>>,
    pub eta_v: Vec<f64>,
    pub mu_v: Option<Vec<f64>>,
    pub eta_t: Vec<f64>,
    pub mu_t: Option<Vec<f64>>,
    pub gate_local: SideGates,
    pub gate_global: SideGates,
    pub gate_segments: Option<GateSegments>,
    pub ranking: Vec<usize>,
    pub scores: Vec<f64>,
    pub gt_index: usize,
    pub gt_rank: Option<usize>,
    pub chain: Option<BridgeChain>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planted_clue: Option<PlantedClue>,
    /// Whether the chain starts at the planted object, for vision clues.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clue_hit: Option<bool>,
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

fn matrix(tape: &Tape, v: Option<Var>) -> Option<Vec<Vec<f64>>> {
    v.map(|v| tape.value(v).to_rows())
}

fn vector(tape: &Tape, v: Option<Var>) -> Option<Vec<f64>> {
    v.map(|v| tape.value(v).values().to_vec())
}

fn mean(tape: &Tape, v: Option<Var>) -> Option<f64> {
    v.map(|v| {
        let x = tape.value(v).values();
        x.iter().sum::<f64>() / x.len() as f64
    })
}

impl AttentionTrace {
    fn rows(&self) -> Vec<(&'static str, &[f64])> {
        let mut out: Vec<(&'static str, &[f64])> = Vec::new();
        let mats = [
            ("alpha", &self.alpha),
            ("alpha_t", &self.alpha_t),
            ("beta_v", &self.beta_v),
            ("beta_t", &self.beta_t),
            ("gamma_t2v", &self.gamma_t2v),
            ("delta_t2v", &self.delta_t2v),
            ("gamma_v2t", &self.gamma_v2t),
            ("delta_v2t", &self.delta_v2t),
        ];
        for (name, m) in mats {
            if let Some(m) = m {
                out.extend(m.iter().map(|r| (name, r.as_slice())));
            }
        }
        out.push(("eta_v", &self.eta_v));
        out.push(("eta_t", &self.eta_t));
        if let Some(m) = &self.mu_v {
            out.push(("mu_v", m));
        }
        if let Some(m) = &self.mu_t {
            out.push(("mu_t", m));
        }
        out
    }

    /// Largest `|sum(row) - 1|` over every attention row, with its name.
    pub fn max_row_error(&self) -> (f64, &'static str) {
        self.rows()
            .into_iter()
            .map(|(n, r)| ((r.iter().sum::<f64>() - 1.0).abs(), n))
            .fold((0.0, ""), |a, b| if b.0 > a.0 { b } else { a })
    }

    /// Every tensor a full model produces is present.
    pub fn is_complete(&self) -> bool {
        self.alpha.is_some()
            && self.alpha_t.is_some()
            && self.beta_v.is_some()
            && self.beta_t.is_some()
            && self.gamma_t2v.is_some()
            && self.delta_t2v.is_some()
            && self.gamma_v2t.is_some()
            && self.delta_v2t.is_some()
            && self.mu_v.is_some()
            && self.mu_t.is_some()
            && self.gate_local.v.is_some()
            && self.gate_local.t.is_some()
            && self.gate_global.v.is_some()
            && self.gate_global.t.is_some()
            && self.gate_segments.is_some()
            && self.chain.is_some()
    }
}

/// Evaluation-mode forward pass of one episode, dumped.
pub fn export_trace(
    model: &Kbgn,
    params: &ParameterRegistry,
    episode: &EncodedEpisode,
    episode_id: impl Into<String>,
    clue: Option<PlantedClue>,
) -> Result<AttentionTrace> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, params, episode, &mut ForwardCtx::eval())?;
    let ranking = RankingResult::from_scores(tape.value(out.scores).values().to_vec(), Some(episode.gt_index))?;
    let (v, t) = (&out.bank.vision, &out.bank.text);

    let gamma_t2v = matrix(&tape, v.gamma);
    let delta_v2t = matrix(&tape, t.delta);
    let mu_v = vector(&tape, v.mu);
    let chain = match (&mu_v, &gamma_t2v, &delta_v2t) {
        (Some(mu), Some(g), Some(d)) => {
            let top_vt_round: Vec<usize> = g.iter().map(|r| argmax(r)).collect();
            let top_tv_object: Vec<usize> = d.iter().map(|r| argmax(r)).collect();
            let obj = argmax(mu);
            let round = top_vt_round[obj];
            Some(BridgeChain {
                top_vision_object: obj,
                path: [obj, round, top_tv_object[round]],
                top_vt_round,
                top_tv_object,
            })
        }
        _ => None,
    };
    let gate_segments = match out.fused.gate {
        Some(g) => {
            let m = SegmentMass::from_gate(tape.value(g).values())?;
            Some(GateSegments {
                q: m.query,
                v: m.vision,
                t: m.text,
            })
        }
        None => None,
    };
    let clue_hit = match (clue, &chain) {
        (Some(c), Some(ch)) if c.clue_modality == ClueModality::Vision => Some(ch.top_vision_object == c.clue_node_index),
        _ => None,
    };
    let vu = out.vision_update.as_ref();
    let tu = out.text_update.as_ref();
    Ok(AttentionTrace {
        episode_id: episode_id.into(),
        alpha: matrix(&tape, vu.and_then(|u| u.alpha)),
        alpha_t: matrix(&tape, tu.and_then(|u| u.alpha)),
        beta_v: matrix(&tape, vu.map(|u| u.beta)),
        beta_t: matrix(&tape, tu.map(|u| u.beta)),
        gamma_t2v,
        delta_t2v: matrix(&tape, v.delta),
        gamma_v2t: matrix(&tape, t.gamma),
        delta_v2t,
        eta_v: tape.value(v.eta).values().to_vec(),
        mu_v,
        eta_t: tape.value(t.eta).values().to_vec(),
        mu_t: vector(&tape, t.mu),
        gate_local: SideGates {
            v: mean(&tape, v.gate_local),
            t: mean(&tape, t.gate_local),
        },
        gate_global: SideGates {
            v: mean(&tape, v.gate_global),
            t: mean(&tape, t.gate_global),
        },
        gate_segments,
        ranking: ranking.ranking,
        scores: ranking.scores,
        gt_index: episode.gt_index,
        gt_rank: ranking.gt_rank,
        chain,
        planted_clue: clue,
        clue_hit,
    })
}
