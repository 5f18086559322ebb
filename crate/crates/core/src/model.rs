//! The assembled network: encoders, intra-modal graphs, knowledge storage,
//! knowledge retrieval and the discriminative decoder, with the ablation
//! ladder expressed as structural switches.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cross_bridge::{knowledge_storage_forward, BridgeRole, KnowledgeBank, KnowledgeStorage};
use crate::encoders::{EncoderDims, SentenceEncoders};
use crate::error::{Error, Result};
use crate::intra_graph::{project_regions, GraphUpdate, IntraGraph};
use crate::layers::{DropoutSites, ForwardCtx, RelationMode};
use crate::numerics::{Linear, ParamInit, ParameterRegistry, Tape, Tensor, Var};
use crate::retrieval::{candidate_scores, ranking_loss, FusedKnowledge, RankingResult, Retrieval};

/// Model variants, from the attention-only baseline up to the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Ablation {
    /// Query attention over raw entities of both modalities, late fusion.
    #[serde(rename = "VTA")]
    Vta,
    /// + vision graph.
    #[serde(rename = "VETA")]
    Veta,
    /// + text graph.
    #[serde(rename = "VETE")]
    Vete,
    /// + text-to-vision bridge.
    #[serde(rename = "VT2V")]
    Vt2v,
    /// + vision-to-text bridge.
    #[serde(rename = "TV2T")]
    Tv2t,
    /// Text-to-vision bridge with unlabeled edges.
    #[serde(rename = "V-NoRel")]
    VNoRel,
    /// Text-to-vision bridge with free random relation embeddings.
    #[serde(rename = "V-RRel")]
    VRRel,
    #[serde(rename = "T-NoRel")]
    TNoRel,
    #[serde(rename = "T-RRel")]
    TRRel,
    /// Everything, including the retrieval gate.
    #[default]
    #[serde(rename = "KBGN")]
    Kbgn,
}

impl Ablation {
    pub const ALL: [Ablation; 10] = [
        Ablation::Vta,
        Ablation::Veta,
        Ablation::Vete,
        Ablation::Vt2v,
        Ablation::Tv2t,
        Ablation::VNoRel,
        Ablation::VRRel,
        Ablation::TNoRel,
        Ablation::TRRel,
        Ablation::Kbgn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Vta => "VTA",
            Ablation::Veta => "VETA",
            Ablation::Vete => "VETE",
            Ablation::Vt2v => "VT2V",
            Ablation::Tv2t => "TV2T",
            Ablation::VNoRel => "V-NoRel",
            Ablation::VRRel => "V-RRel",
            Ablation::TNoRel => "T-NoRel",
            Ablation::TRRel => "T-RRel",
            Ablation::Kbgn => "KBGN",
        }
    }

    pub fn structure(self) -> Structure {
        let full = Structure {
            vision_graph: true,
            text_graph: true,
            t2v: Some(RelationMode::Learned),
            v2t: Some(RelationMode::Learned),
            gated_retrieval: true,
        };
        match self {
            Ablation::Vta => Structure {
                vision_graph: false,
                text_graph: false,
                t2v: None,
                v2t: None,
                gated_retrieval: false,
            },
            Ablation::Veta => Structure {
                text_graph: false,
                ..Ablation::Vta.structure().with_vision_graph()
            },
            Ablation::Vete => Structure {
                text_graph: true,
                ..Ablation::Veta.structure()
            },
            Ablation::Vt2v => Structure {
                t2v: Some(RelationMode::Learned),
                ..Ablation::Vete.structure()
            },
            Ablation::Tv2t => Structure {
                v2t: Some(RelationMode::Learned),
                ..Ablation::Vt2v.structure()
            },
            Ablation::VNoRel => Structure {
                t2v: Some(RelationMode::NoRel),
                ..full
            },
            Ablation::VRRel => Structure {
                t2v: Some(RelationMode::Random),
                ..full
            },
            Ablation::TNoRel => Structure {
                v2t: Some(RelationMode::NoRel),
                ..full
            },
            Ablation::TRRel => Structure {
                v2t: Some(RelationMode::Random),
                ..full
            },
            Ablation::Kbgn => full,
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::config(format!("unknown ablation `{s}`")))
    }
}

/// Which components a variant contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Structure {
    pub vision_graph: bool,
    pub text_graph: bool,
    pub t2v: Option<RelationMode>,
    pub v2t: Option<RelationMode>,
    pub gated_retrieval: bool,
}

impl Structure {
    fn with_vision_graph(self) -> Self {
        Self {
            vision_graph: true,
            ..self
        }
    }
}

/// Single source of truth for model sizes and switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// LSTM hidden size, node and edge dimension.
    pub hidden: usize,
    /// Region feature dimension.
    pub feature_dim: usize,
    pub max_len: usize,
    /// Capacity of random relation tables.
    pub max_objects: usize,
    pub max_rounds: usize,
    pub dropout: f64,
    pub dropout_sites: DropoutSites,
    pub ablation: Ablation,
    pub vision_edges: RelationMode,
    pub text_edges: RelationMode,
    /// Sentence vectors are used as produced by the LSTMs.
    pub normalize_sentences: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            embed_dim: 64,
            hidden: 512,
            feature_dim: 2048,
            max_len: 20,
            max_objects: 36,
            max_rounds: 10,
            dropout: 0.5,
            dropout_sites: DropoutSites::All,
            ablation: Ablation::Kbgn,
            vision_edges: RelationMode::Learned,
            text_edges: RelationMode::Learned,
            normalize_sentences: false,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden", self.hidden),
            ("feature_dim", self.feature_dim),
            ("max_len", self.max_len),
            ("max_objects", self.max_objects),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.vocab_size <= crate::encoders::SEP {
            return Err(Error::config("vocabulary must extend past the special tokens"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if self.normalize_sentences {
            return Err(Error::config("sentence normalization is not supported"));
        }
        let s = self.ablation.structure();
        if !s.vision_graph && self.vision_edges != RelationMode::Learned {
            return Err(Error::config(format!(
                "vision edge mode set but {} has no vision graph",
                self.ablation
            )));
        }
        if !s.text_graph && self.text_edges != RelationMode::Learned {
            return Err(Error::config(format!(
                "text edge mode set but {} has no text graph",
                self.ablation
            )));
        }
        Ok(())
    }

    /// Stable hex digest of the configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    fn max_text_nodes(&self) -> usize {
        self.max_rounds + 1
    }
}

/// One episode in token-id form.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedEpisode {
    /// `N x feature_dim`.
    pub features: Tensor,
    pub caption: Vec<usize>,
    pub rounds: Vec<(Vec<usize>, Vec<usize>)>,
    pub question: Vec<usize>,
    pub candidates: Vec<Vec<usize>>,
    pub gt_index: usize,
}

/// Every intermediate a trace or test might inspect.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// `1 x K`.
    pub scores: Var,
    pub query: Var,
    pub vision_nodes: Var,
    pub text_nodes: Var,
    pub vision_update: Option<GraphUpdate>,
    pub text_update: Option<GraphUpdate>,
    pub bank: KnowledgeBank,
    pub fused: FusedKnowledge,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Kbgn {
    pub config: ModelConfig,
    pub encoders: SentenceEncoders,
    pub region_projection: Linear,
    pub vision_graph: Option<IntraGraph>,
    pub text_graph: Option<IntraGraph>,
    pub vision_storage: KnowledgeStorage,
    pub text_storage: KnowledgeStorage,
    pub retrieval: Retrieval,
}

impl Kbgn {
    /// Builds the network and its seeded parameters.
    pub fn new(config: ModelConfig) -> Result<(Self, ParameterRegistry)> {
        config.validate()?;
        let mut registry = ParameterRegistry::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut init = ParamInit {
            registry: &mut registry,
            rng: &mut rng,
        };
        let d = config.hidden;
        let s = config.ablation.structure();
        let encoders = SentenceEncoders::init(
            &mut init,
            EncoderDims {
                vocab_size: config.vocab_size,
                embed_dim: config.embed_dim,
                hidden: d,
                max_len: config.max_len,
            },
        )?;
        let region_projection = init.linear("vision.region_projection", config.feature_dim, d)?;
        let vision_graph = s
            .vision_graph
            .then(|| IntraGraph::init(&mut init, "vision_graph", d, config.vision_edges, config.max_objects))
            .transpose()?;
        let text_graph = s
            .text_graph
            .then(|| IntraGraph::init(&mut init, "text_graph", d, config.text_edges, config.max_text_nodes()))
            .transpose()?;
        let vision_storage = KnowledgeStorage::init(
            &mut init,
            "vision_storage",
            BridgeRole::TextToVision,
            d,
            s.t2v,
            config.max_objects,
            config.max_text_nodes(),
        )?;
        let text_storage = KnowledgeStorage::init(
            &mut init,
            "text_storage",
            BridgeRole::VisionToText,
            d,
            s.v2t,
            config.max_text_nodes(),
            config.max_objects,
        )?;
        let retrieval = Retrieval::init(&mut init, d, s.gated_retrieval)?;
        Ok((
            Self {
                config,
                encoders,
                region_projection,
                vision_graph,
                text_graph,
                vision_storage,
                text_storage,
                retrieval,
            },
            registry,
        ))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParameterRegistry,
        episode: &EncodedEpisode,
        ctx: &mut ForwardCtx,
    ) -> Result<ForwardOutput> {
        let (n, fd) = episode.features.dims2()?;
        if fd != self.config.feature_dim {
            return Err(Error::dim("features", &[n, fd], &[n, self.config.feature_dim]));
        }
        if episode.rounds.len() > self.config.max_rounds {
            return Err(Error::contract(format!(
                "{} rounds exceed the maximum of {}",
                episode.rounds.len(),
                self.config.max_rounds
            )));
        }
        ctx.sites = self.config.dropout_sites;
        let query = self.encoders.encode_question(tape, params, &episode.question)?;
        let history = self
            .encoders
            .encode_history(tape, params, &episode.caption, &episode.rounds)?;
        let candidates = self.encoders.encode_candidates(tape, params, &episode.candidates)?;
        let regions = project_regions(tape, params, &self.region_projection, &episode.features)?;

        let (vision_nodes, vision_update) = match &self.vision_graph {
            Some(g) => {
                let graph = g.build(tape, params, regions)?;
                let up = g.update(tape, params, &graph, query)?;
                (ctx.inner_dropout(tape, up.nodes)?, Some(up))
            }
            None => (regions, None),
        };
        let (text_nodes, text_update) = match &self.text_graph {
            Some(g) => {
                let graph = g.build(tape, params, history)?;
                let up = g.update(tape, params, &graph, query)?;
                (ctx.inner_dropout(tape, up.nodes)?, Some(up))
            }
            None => (history, None),
        };

        let bank = knowledge_storage_forward(
            tape,
            params,
            &self.vision_storage,
            &self.text_storage,
            vision_nodes,
            text_nodes,
            query,
            ctx,
        )?;
        let fused = self
            .retrieval
            .retrieve(tape, params, query, bank.global_vision, bank.global_text, ctx)?;
        let scores = candidate_scores(tape, fused.knowledge, candidates)?;
        Ok(ForwardOutput {
            scores,
            query,
            vision_nodes,
            text_nodes,
            vision_update,
            text_update,
            bank,
            fused,
        })
    }

    /// Deterministic evaluation-mode ranking.
    pub fn rank(&self, params: &ParameterRegistry, episode: &EncodedEpisode) -> Result<RankingResult> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, params, episode, &mut ForwardCtx::eval())?;
        RankingResult::from_scores(tape.value(out.scores).values().to_vec(), Some(episode.gt_index))
    }

    /// Scalar ranking loss of one episode.
    pub fn loss(&self, params: &ParameterRegistry, episode: &EncodedEpisode, ctx: &mut ForwardCtx) -> Result<f64> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, params, episode, ctx)?;
        let l = ranking_loss(&mut tape, out.scores, episode.gt_index)?;
        Ok(tape.value(l).values()[0])
    }

    /// Loss and per-parameter gradients (registry order, zeros where a
    /// parameter is unused) for one episode.
    pub fn loss_and_grads(
        &self,
        params: &ParameterRegistry,
        episode: &EncodedEpisode,
        ctx: &mut ForwardCtx,
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, params, episode, ctx)?;
        let l = ranking_loss(&mut tape, out.scores, episode.gt_index)?;
        tape.backward(l)?;
        let bound: std::collections::HashMap<&str, Var> = tape.bound_params().collect();
        let grads = params
            .iter()
            .map(|(name, t)| {
                bound
                    .get(name)
                    .and_then(|&v| tape.grad(v))
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect();
        Ok((tape.value(l).values()[0], grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(ablation: Ablation) -> ModelConfig {
        ModelConfig {
            vocab_size: 40,
            embed_dim: 6,
            hidden: 6,
            feature_dim: 10,
            max_objects: 6,
            max_rounds: 4,
            ablation,
            ..ModelConfig::default()
        }
    }

    fn episode() -> EncodedEpisode {
        let feats: Vec<f64> = (0..40).map(|k| ((k * 13 % 17) as f64 - 8.0) / 8.0).collect();
        EncodedEpisode {
            features: Tensor::matrix(4, 10, feats).unwrap(),
            caption: vec![5, 6, 7],
            rounds: vec![(vec![8, 9], vec![10]), (vec![11], vec![12, 13])],
            question: vec![14, 15, 16],
            candidates: (0..5).map(|k| vec![17 + k, 30 + k % 3]).collect(),
            gt_index: 2,
        }
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
            let json = serde_json::to_string(&a).unwrap();
            assert_eq!(json, format!("\"{}\"", a.name()));
        }
        assert!(matches!("bogus".parse::<Ablation>(), Err(Error::Config(_))));
    }

    #[test]
    fn parameter_count_is_a_function_of_config() {
        for a in Ablation::ALL {
            let (_, r1) = Kbgn::new(config(a)).unwrap();
            let (_, r2) = Kbgn::new(ModelConfig {
                init_seed: 99,
                ..config(a)
            })
            .unwrap();
            assert_eq!(r1.scalar_count(), r2.scalar_count());
            assert_eq!(r1.names().collect::<Vec<_>>(), r2.names().collect::<Vec<_>>());
        }
    }

    #[test]
    fn ladder_parameter_counts_grow() {
        let count = |a| Kbgn::new(config(a)).unwrap().1.scalar_count();
        assert!(count(Ablation::Vta) < count(Ablation::Veta));
        assert!(count(Ablation::Veta) < count(Ablation::Vete));
        assert!(count(Ablation::Vete) < count(Ablation::Vt2v));
        assert!(count(Ablation::Vt2v) < count(Ablation::Tv2t));
        assert!(count(Ablation::Tv2t) < count(Ablation::Kbgn));
    }

    #[test]
    fn baseline_has_no_edge_or_bridge_parameters() {
        let (_, reg) = Kbgn::new(config(Ablation::Vta)).unwrap();
        assert!(!reg
            .names()
            .any(|n| n.contains("edge") || n.contains("bridge") || n.contains("graph")));
    }

    #[test]
    fn full_model_fills_every_trace_slot() {
        let (model, reg) = Kbgn::new(config(Ablation::Kbgn)).unwrap();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &reg, &episode(), &mut ForwardCtx::eval()).unwrap();
        for side in [out.bank.vision, out.bank.text] {
            assert!(side.gamma.is_some());
            assert!(side.delta.is_some());
            assert!(side.mu.is_some());
            assert!(side.gate_local.is_some());
            assert!(side.gate_global.is_some());
        }
        assert!(out.vision_update.unwrap().alpha.is_some());
        assert!(out.text_update.unwrap().alpha.is_some());
        assert!(out.fused.gate.is_some());
        assert_eq!(tape.shape(out.scores), &[1, 5]);
    }

    #[test]
    fn config_hash_tracks_every_field() {
        let a = config(Ablation::Kbgn);
        let b = ModelConfig {
            ablation: Ablation::Vta,
            ..a.clone()
        };
        assert_eq!(a.hash(), a.clone().hash());
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn inconsistent_edge_modes_rejected() {
        let c = ModelConfig {
            vision_edges: RelationMode::NoRel,
            ..config(Ablation::Vta)
        };
        assert!(matches!(Kbgn::new(c), Err(Error::Config(_))));
    }

    #[test]
    fn rank_is_deterministic_and_feature_dim_checked() {
        let (model, reg) = Kbgn::new(config(Ablation::Kbgn)).unwrap();
        let ep = episode();
        assert_eq!(model.rank(&reg, &ep).unwrap(), model.rank(&reg, &ep).unwrap());
        let mut bad = ep;
        bad.features = Tensor::zeros(&[4, 9]);
        assert!(matches!(model.rank(&reg, &bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn training_dropout_changes_loss_eval_does_not() {
        let (model, reg) = Kbgn::new(config(Ablation::Kbgn)).unwrap();
        let ep = episode();
        let e1 = model.loss(&reg, &ep, &mut ForwardCtx::eval()).unwrap();
        let e2 = model.loss(&reg, &ep, &mut ForwardCtx::eval()).unwrap();
        assert_eq!(e1, e2);
        let t = model
            .loss(&reg, &ep, &mut ForwardCtx::train(0.5, ChaCha8Rng::seed_from_u64(3)))
            .unwrap();
        assert_ne!(t, e1);
    }
}
