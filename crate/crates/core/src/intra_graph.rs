//! Knowledge encoding: fully connected vision and text graphs updated by
//! query-guided relation selection and query-guided graph convolution.

use crate::error::Result;
use crate::layers::{RelationMode, RelationalAttention};
use crate::numerics::{Linear, ParamInit, ParameterRegistry, Tape, Tensor, Var};

/// Nodes plus edge embeddings of a fully connected graph (self pairs
/// included). Edges are stored flattened, row `i * size + j` holding `e_ij`.
#[derive(Debug, Clone, Copy)]
pub struct KnowledgeGraph {
    pub nodes: Var,
    pub edges: Option<Var>,
    pub size: usize,
}

/// Graph over detected image regions.
pub type VisionGraph = KnowledgeGraph;
/// Graph over dialogue entities (caption + question/answer pairs).
pub type TextGraph = KnowledgeGraph;

/// Result of one relation-selection + convolution round.
#[derive(Debug, Clone, Copy)]
pub struct GraphUpdate {
    /// Updated nodes, `size x d`.
    pub nodes: Var,
    pub selected_edges: Option<Var>,
    /// Relation-selection weights, `size x size`; absent for unlabeled edges.
    pub alpha: Option<Var>,
    /// Convolution weights, `size x size`.
    pub beta: Var,
}

/// One intra-modal graph layer (vision or text).
#[derive(Debug, Clone, PartialEq)]
pub struct IntraGraph {
    pub layer: RelationalAttention,
}

impl IntraGraph {
    pub fn init(
        init: &mut ParamInit<'_>,
        prefix: &str,
        dim: usize,
        mode: RelationMode,
        max_nodes: usize,
    ) -> Result<Self> {
        Ok(Self {
            layer: RelationalAttention::init(init, prefix, dim, mode, max_nodes, max_nodes)?,
        })
    }

    /// Builds edges `e_ij = enc([x_i, x_j])` over already projected nodes.
    pub fn build(&self, tape: &mut Tape, params: &ParameterRegistry, nodes: Var) -> Result<KnowledgeGraph> {
        let size = tape.value(nodes).dims2()?.0;
        let edges = self.layer.build_edges(tape, params, nodes, nodes)?;
        Ok(KnowledgeGraph { nodes, edges, size })
    }

    /// `alpha_ij = softmax_j(w_e(W1 q * W2 e_ij))`, `e'_ij = alpha_ij e_ij`.
    pub fn relation_select(
        &self,
        tape: &mut Tape,
        params: &ParameterRegistry,
        graph: &KnowledgeGraph,
        query: Var,
    ) -> Result<Option<(Var, Var)>> {
        graph
            .edges
            .map(|e| self.layer.select(tape, params, e, query, graph.size, graph.size))
            .transpose()
    }

    /// `beta_ij = softmax_j(w_v(q * W3[x_j, e'_ij]))`, `x'_i = sum_j beta_ij x_j`.
    pub fn graph_convolve(
        &self,
        tape: &mut Tape,
        params: &ParameterRegistry,
        graph: &KnowledgeGraph,
        selected: Option<Var>,
        query: Var,
    ) -> Result<(Var, Var)> {
        self.layer
            .convolve(tape, params, graph.nodes, selected, query, graph.size)
    }

    pub fn update(
        &self,
        tape: &mut Tape,
        params: &ParameterRegistry,
        graph: &KnowledgeGraph,
        query: Var,
    ) -> Result<GraphUpdate> {
        let sel = self.relation_select(tape, params, graph, query)?;
        let (selected_edges, alpha) = match sel {
            Some((s, a)) => (Some(s), Some(a)),
            None => (None, None),
        };
        let (nodes, beta) = self.graph_convolve(tape, params, graph, selected_edges, query)?;
        Ok(GraphUpdate {
            nodes,
            selected_edges,
            alpha,
            beta,
        })
    }
}

/// Projects region features (`N x d_v`) into the shared hidden size.
pub fn project_regions(
    tape: &mut Tape,
    params: &ParameterRegistry,
    projection: &Linear,
    features: &Tensor,
) -> Result<Var> {
    let f = tape.constant(features.clone());
    projection.forward(tape, params, f)
}
