//! Knowledge retrieval gate, discriminative decoder and training loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{ForwardCtx, GatedFusion};
use crate::numerics::{Axis, Linear, ParamInit, ParameterRegistry, Tape, Var};

/// Fused knowledge vector and the gate that produced it.
#[derive(Debug, Clone, Copy)]
pub struct FusedKnowledge {
    /// `1 x d`.
    pub knowledge: Var,
    /// `1 x 3d`, segments (query, vision, text); absent under late fusion.
    pub gate: Option<Var>,
}

/// Mean gate value per `d`-block of the retrieval gate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentMass {
    pub query: f64,
    pub vision: f64,
    pub text: f64,
}

impl SegmentMass {
    pub fn from_gate(gate: &[f64]) -> Result<Self> {
        if gate.is_empty() || !gate.len().is_multiple_of(3) {
            return Err(Error::contract(format!(
                "gate of length {} does not split into three segments",
                gate.len()
            )));
        }
        let d = gate.len() / 3;
        let mean = |s: &[f64]| s.iter().sum::<f64>() / d as f64;
        Ok(Self {
            query: mean(&gate[..d]),
            vision: mean(&gate[d..2 * d]),
            text: mean(&gate[2 * d..]),
        })
    }

    /// Vision share of the vision + text gate mass, query segment excluded.
    pub fn vision_ratio(&self) -> f64 {
        self.vision / (self.vision + self.text)
    }

    pub fn text_ratio(&self) -> f64 {
        1.0 - self.vision_ratio()
    }
}

/// Gated retrieval over `[q, vision, text]`, or plain late fusion when the
/// gate is ablated.
#[derive(Debug, Clone, PartialEq)]
pub enum Retrieval {
    Gated(GatedFusion),
    LateFusion(Linear),
}

impl Retrieval {
    pub fn init(init: &mut ParamInit<'_>, dim: usize, gated: bool) -> Result<Self> {
        if gated {
            Ok(Self::Gated(GatedFusion::init(init, "retrieval", dim, 3)?))
        } else {
            Ok(Self::LateFusion(init.linear("retrieval.out", 3 * dim, dim)?))
        }
    }

    /// `K = W(g * [q, I, H])` with `g = sigmoid(W_r [q, I, H])`.
    pub fn retrieve(
        &self,
        tape: &mut Tape,
        params: &ParameterRegistry,
        query: Var,
        vision: Var,
        text: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<FusedKnowledge> {
        let d = tape.value(query).numel();
        for v in [vision, text] {
            if tape.value(v).numel() != d {
                return Err(Error::contract(format!(
                    "retrieval inputs must share dimension {d}, got {:?}",
                    tape.shape(v)
                )));
            }
        }
        let (knowledge, gate) = match self {
            Retrieval::Gated(g) => {
                let (k, gate) = g.forward(tape, params, &[query, vision, text])?;
                (k, Some(gate))
            }
            Retrieval::LateFusion(out) => {
                let cat = tape.concat(&[query, vision, text], Axis::Cols)?;
                (out.forward(tape, params, cat)?, None)
            }
        };
        let knowledge = ctx.dropout(tape, knowledge)?;
        Ok(FusedKnowledge { knowledge, gate })
    }
}

/// `1 x K` dot-product scores of the fused vector against each candidate row.
pub fn candidate_scores(tape: &mut Tape, knowledge: Var, candidates: Var) -> Result<Var> {
    let (k, _) = tape.value(candidates).dims2()?;
    if k < 2 {
        return Err(Error::contract(format!("need at least 2 candidates, got {k}")));
    }
    let ct = tape.transpose(candidates)?;
    tape.matmul(knowledge, ct)
}

/// Candidate scores with their ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub scores: Vec<f64>,
    /// Candidate indices by descending score, ties by ascending index.
    pub ranking: Vec<usize>,
    /// 1-based rank of the ground truth, when known.
    pub gt_rank: Option<usize>,
    pub gt_index: Option<usize>,
}

impl RankingResult {
    pub fn from_scores(scores: Vec<f64>, gt_index: Option<usize>) -> Result<Self> {
        if scores.len() < 2 {
            return Err(Error::contract(format!(
                "need at least 2 candidate scores, got {}",
                scores.len()
            )));
        }
        if let Some(gt) = gt_index {
            if gt >= scores.len() {
                return Err(Error::contract(format!(
                    "ground truth {gt} out of range for {} candidates",
                    scores.len()
                )));
            }
        }
        let mut ranking: Vec<usize> = (0..scores.len()).collect();
        // stable sort keeps ascending index among equal scores
        ranking.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        let gt_rank = gt_index.map(|gt| ranking.iter().position(|&i| i == gt).expect("permutation") + 1);
        Ok(Self {
            scores,
            ranking,
            gt_rank,
            gt_index,
        })
    }
}

pub fn score_candidates(scores: &[f64], gt_index: Option<usize>) -> Result<RankingResult> {
    RankingResult::from_scores(scores.to_vec(), gt_index)
}

/// Softmax cross-entropy of the candidate scores against the ground truth.
pub fn ranking_loss(tape: &mut Tape, scores: Var, gt_index: usize) -> Result<Var> {
    tape.cross_entropy(scores, gt_index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{numeric_grad, relative_error, Tensor};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gated(dim: usize, seed: u64) -> (ParameterRegistry, Retrieval) {
        let mut reg = ParameterRegistry::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = Retrieval::init(
            &mut ParamInit {
                registry: &mut reg,
                rng: &mut rng,
            },
            dim,
            true,
        )
        .unwrap();
        (reg, r)
    }

    #[test]
    fn ranking_examples() {
        let r = score_candidates(&[0.1, 0.9, 0.5], Some(1)).unwrap();
        assert_eq!(r.ranking, vec![1, 2, 0]);
        assert_eq!(r.gt_rank, Some(1));
        let r = score_candidates(&[0.3; 6], Some(4)).unwrap();
        assert_eq!(r.ranking, (0..6).collect::<Vec<_>>());
        assert_eq!(r.gt_rank, Some(5));
        assert!(score_candidates(&[1.0], None).is_err());
        assert!(score_candidates(&[1.0, 2.0], Some(2)).is_err());
    }

    #[test]
    fn zero_gate_logits_give_half_gates_and_even_ratio() {
        let (mut reg, r) = gated(2, 1);
        reg.get_mut("retrieval.gate.weight").unwrap().values_mut().fill(0.0);
        let out_w: Vec<f64> = (0..12).map(|k| 0.1 * k as f64 - 0.5).collect();
        reg.get_mut("retrieval.out.weight").unwrap().values_mut().copy_from_slice(&out_w);
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::row(vec![1.0, -1.0]));
        let i = tape.constant(Tensor::row(vec![0.5, 0.25]));
        let h = tape.constant(Tensor::row(vec![-2.0, 0.0]));
        let fused = r.retrieve(&mut tape, &reg, q, i, h, &mut ForwardCtx::eval()).unwrap();
        let gate = tape.value(fused.gate.unwrap()).values().to_vec();
        assert!(gate.iter().all(|&g| g == 0.5));
        let mass = SegmentMass::from_gate(&gate).unwrap();
        assert_eq!(mass.vision_ratio(), 0.5);
        let cat = [1.0, -1.0, 0.5, 0.25, -2.0, 0.0];
        for j in 0..2 {
            let want: f64 = (0..6).map(|p| 0.5 * cat[p] * out_w[p * 2 + j]).sum();
            assert!((tape.value(fused.knowledge).values()[j] - want).abs() < 1e-12);
        }
    }

    /// d=2 gate with nonzero weights, recomputed by hand.
    #[test]
    fn retrieval_matches_hand_computation() {
        let (mut reg, r) = gated(2, 2);
        let gw: Vec<f64> = (0..36).map(|k| ((k * 7 % 11) as f64 - 5.0) * 0.1).collect();
        let ow: Vec<f64> = (0..12).map(|k| ((k * 5 % 7) as f64 - 3.0) * 0.2).collect();
        reg.get_mut("retrieval.gate.weight").unwrap().values_mut().copy_from_slice(&gw);
        reg.get_mut("retrieval.out.weight").unwrap().values_mut().copy_from_slice(&ow);
        let cat = [0.3, -0.6, 0.9, 0.1, -0.2, 0.4];
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::row(cat[..2].to_vec()));
        let i = tape.constant(Tensor::row(cat[2..4].to_vec()));
        let h = tape.constant(Tensor::row(cat[4..].to_vec()));
        let fused = r.retrieve(&mut tape, &reg, q, i, h, &mut ForwardCtx::eval()).unwrap();
        let gate: Vec<f64> = (0..6)
            .map(|j| {
                let z: f64 = (0..6).map(|p| cat[p] * gw[p * 6 + j]).sum();
                1.0 / (1.0 + (-z).exp())
            })
            .collect();
        for j in 0..2 {
            let want: f64 = (0..6).map(|p| gate[p] * cat[p] * ow[p * 2 + j]).sum();
            assert!((tape.value(fused.knowledge).values()[j] - want).abs() < 1e-12);
        }
        let mass = SegmentMass::from_gate(tape.value(fused.gate.unwrap()).values()).unwrap();
        assert!(mass.query > 0.0 && mass.query < 1.0);
        let vr = mass.vision_ratio();
        assert!(vr > 0.0 && vr < 1.0);
    }

    #[test]
    fn mismatched_dims_rejected() {
        let (reg, r) = gated(2, 3);
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::row(vec![1.0, -1.0]));
        let i = tape.constant(Tensor::row(vec![0.5, 0.25, 0.0]));
        let err = r.retrieve(&mut tape, &reg, q, i, q, &mut ForwardCtx::eval());
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn loss_values_and_gradient() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::row(vec![0.0; 100]));
        let l = ranking_loss(&mut tape, s, 0).unwrap();
        assert!((tape.value(l).values()[0] - 4.605170185988091).abs() < 1e-12);

        let mut reg = ParameterRegistry::new();
        reg.insert("s", Tensor::row(vec![0.3, -1.2, 2.0, 0.0, 0.7])).unwrap();
        let f = |r: &ParameterRegistry| -> Result<f64> {
            let mut t = Tape::new();
            let s = t.param(r, "s")?;
            let l = ranking_loss(&mut t, s, 3)?;
            Ok(t.value(l).values()[0])
        };
        let mut t = Tape::new();
        let s = t.param(&reg, "s").unwrap();
        let l = ranking_loss(&mut t, s, 3).unwrap();
        t.backward(l).unwrap();
        let g = t.grad(s).unwrap().to_vec();
        let fd = numeric_grad(&reg, "s", 1e-5, f).unwrap();
        for (a, b) in g.iter().zip(&fd) {
            assert!(relative_error(*a, *b, 1e-8) < 1e-7);
        }
        assert!(matches!(ranking_loss(&mut t, s, 5), Err(Error::Contract(_))));
    }

    proptest! {
        #[test]
        fn ranking_is_a_permutation_stable_under_positive_rescale_and_shift(
            scores in proptest::collection::vec(-5.0f64..5.0, 2..30),
            scale in 0.01f64..100.0,
            gt_seed in 0usize..1000,
        ) {
            let gt = gt_seed % scores.len();
            let base = score_candidates(&scores, Some(gt)).unwrap();
            let mut seen = base.ranking.clone();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..scores.len()).collect::<Vec<_>>());
            let rank = base.gt_rank.unwrap();
            prop_assert!(rank >= 1 && rank <= scores.len());
            // exact binary scalings keep ties intact
            let pow2 = 2f64.powi((scale.log2().round()) as i32);
            let scaled: Vec<f64> = scores.iter().map(|s| s * pow2).collect();
            prop_assert_eq!(&score_candidates(&scaled, Some(gt)).unwrap().ranking, &base.ranking);
        }

        #[test]
        fn loss_positive_and_decreasing_in_gt_score(
            others in proptest::collection::vec(-3.0f64..3.0, 1..10),
            a in -5.0f64..5.0,
            delta in 0.01f64..3.0,
        ) {
            let loss = |gt_score: f64| {
                let mut s = vec![gt_score];
                s.extend(&others);
                let mut t = Tape::new();
                let v = t.constant(Tensor::row(s));
                let l = ranking_loss(&mut t, v, 0).unwrap();
                t.value(l).values()[0]
            };
            let (l1, l2) = (loss(a), loss(a + delta));
            prop_assert!(l1 > 0.0 && l2 > 0.0);
            prop_assert!(l2 < l1);
        }
    }
}
