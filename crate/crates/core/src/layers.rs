//! Building blocks shared by the intra-modal graphs, the cross-modal bridges,
//! knowledge storage and knowledge retrieval.
//!
//! An intra-modal graph is the special case of a bridge whose center and
//! cross node sets coincide, so both are served by [`RelationalAttention`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Axis, Linear, ParamInit, ParameterRegistry, Tape, Tensor, Var};

/// How edge (relation) embeddings are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RelationMode {
    /// Learned projection of the concatenated endpoint features.
    #[default]
    Learned,
    /// Unlabeled edges: no relation embedding, attention over nodes only.
    NoRel,
    /// Free, randomly initialized embedding per (center, cross) slot.
    Random,
}

/// Where dropout is applied during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DropoutSites {
    /// Only on the retrieved knowledge vector before decoding.
    Knowledge,
    /// Also on every graph-convolution output, including cross-aligned
    /// nodes.
    #[default]
    All,
}

/// Training-time state threaded through a forward pass.
#[derive(Debug)]
pub struct ForwardCtx {
    pub train: bool,
    pub dropout: f64,
    pub sites: DropoutSites,
    rng: ChaCha8Rng,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self {
            train: false,
            dropout: 0.0,
            sites: DropoutSites::Knowledge,
            rng: rand::SeedableRng::seed_from_u64(0),
        }
    }

    pub fn train(dropout: f64, rng: ChaCha8Rng) -> Self {
        Self {
            train: true,
            dropout,
            sites: DropoutSites::Knowledge,
            rng,
        }
    }

    /// Dropout at an inner site; identity unless `sites` is `All`.
    pub fn inner_dropout(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        if self.sites == DropoutSites::All {
            self.dropout(tape, x)
        } else {
            Ok(x)
        }
    }

    /// Inverted dropout; identity at evaluation time.
    pub fn dropout(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        if !self.train || self.dropout <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.dropout;
        let shape = tape.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask = (0..n)
            .map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = tape.constant(Tensor::new(shape, mask)?);
        tape.hadamard(x, mask)
    }
}

/// Row index lists pairing every center `i` with every cross node `j`,
/// flattened row-major as `i * n_cross + j`.
pub fn pair_indices(n_center: usize, n_cross: usize) -> (Vec<usize>, Vec<usize>) {
    let mut centers = Vec::with_capacity(n_center * n_cross);
    let mut crosses = Vec::with_capacity(n_center * n_cross);
    for i in 0..n_center {
        for j in 0..n_cross {
            centers.push(i);
            crosses.push(j);
        }
    }
    (centers, crosses)
}

/// Repeats a `1 x d` row `n` times.
pub fn tile_row(tape: &mut Tape, row: Var, n: usize) -> Result<Var> {
    tape.gather_rows(row, &vec![0; n])
}

/// Multiplies row `k` of `x` (`m x d`) by `weights[k]` (`m x 1`).
pub fn scale_rows(tape: &mut Tape, x: Var, weights: Var) -> Result<Var> {
    let (_, d) = tape.value(x).dims2()?;
    let ones = tape.constant(Tensor::full(&[1, d], 1.0));
    let wide = tape.matmul(weights, ones)?;
    tape.hadamard(wide, x)
}

/// Per-pair scalar logits (`n_center*n_cross x 1`) to an `n_center x n_cross`
/// attention matrix normalized over the cross index.
pub fn attention_matrix(tape: &mut Tape, logits: Var, n_center: usize, n_cross: usize) -> Result<Var> {
    let grid = tape.reshape(logits, &[n_center, n_cross])?;
    tape.softmax(grid, Axis::Cols)
}

#[derive(Debug, Clone, PartialEq)]
pub enum EdgeSource {
    Learned(Linear),
    Random {
        table: String,
        max_center: usize,
        max_cross: usize,
    },
    None,
}

/// Query-guided relation selection plus query-guided convolution over a
/// (possibly bipartite) fully connected graph.
///
/// Selection: `w_ij = softmax_j(score(proj_q(q) * proj_e(e_ij)))`,
/// `e'_ij = w_ij e_ij`.
/// Convolution: `a_ij = softmax_j(score_c(q * proj_c([x_j, e'_ij])))`,
/// `out_i = sum_j a_ij x_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationalAttention {
    pub mode: RelationMode,
    pub edges: EdgeSource,
    pub select_query: Option<Linear>,
    pub select_edge: Option<Linear>,
    pub select_score: Option<Linear>,
    pub conv_proj: Linear,
    pub conv_score: Linear,
    pub dim: usize,
}

/// Output of [`RelationalAttention::forward`].
#[derive(Debug, Clone, Copy)]
pub struct RelationalOutput {
    /// `n_center x d`.
    pub nodes: Var,
    /// Raw edge embeddings, `n_center*n_cross x d`.
    pub edges: Option<Var>,
    /// Selected edges `e'_ij`.
    pub selected: Option<Var>,
    /// Relation-selection weights, `n_center x n_cross`.
    pub select_weights: Option<Var>,
    /// Convolution weights, `n_center x n_cross`.
    pub conv_weights: Var,
}

impl RelationalAttention {
    pub fn init(
        init: &mut ParamInit<'_>,
        prefix: &str,
        dim: usize,
        mode: RelationMode,
        max_center: usize,
        max_cross: usize,
    ) -> Result<Self> {
        let edges = match mode {
            RelationMode::Learned => EdgeSource::Learned(init.linear(&format!("{prefix}.edge_encoder"), 2 * dim, dim)?),
            RelationMode::Random => {
                let table = format!("{prefix}.edge_table");
                init.normal(&table, max_center * max_cross, dim, 1.0 / (dim as f64).sqrt())?;
                EdgeSource::Random {
                    table,
                    max_center,
                    max_cross,
                }
            }
            RelationMode::NoRel => EdgeSource::None,
        };
        let (select_query, select_edge, select_score) = if mode == RelationMode::NoRel {
            (None, None, None)
        } else {
            (
                Some(init.linear(&format!("{prefix}.select_query"), dim, dim)?),
                Some(init.linear(&format!("{prefix}.select_edge"), dim, dim)?),
                Some(init.linear(&format!("{prefix}.select_score"), dim, 1)?),
            )
        };
        let conv_in = if mode == RelationMode::NoRel { dim } else { 2 * dim };
        let conv_proj = init.linear(&format!("{prefix}.conv_proj"), conv_in, dim)?;
        let conv_score = init.linear(&format!("{prefix}.conv_score"), dim, 1)?;
        Ok(Self {
            mode,
            edges,
            select_query,
            select_edge,
            select_score,
            conv_proj,
            conv_score,
            dim,
        })
    }

    /// Edge embeddings for every (center, cross) pair, or `None` when edges
    /// are unlabeled.
    pub fn build_edges(
        &self,
        tape: &mut Tape,
        params: &ParameterRegistry,
        center: Var,
        cross: Var,
    ) -> Result<Option<Var>> {
        let n_c = tape.value(center).dims2()?.0;
        let n_x = tape.value(cross).dims2()?.0;
        let (ci, xi) = pair_indices(n_c, n_x);
        match &self.edges {
            EdgeSource::Learned(enc) => {
                let c = tape.gather_rows(center, &ci)?;
                let x = tape.gather_rows(cross, &xi)?;
                let cat = tape.concat(&[c, x], Axis::Cols)?;
                Ok(Some(enc.forward(tape, params, cat)?))
            }
            EdgeSource::Random {
                table,
                max_center,
                max_cross,
            } => {
                if n_c > *max_center || n_x > *max_cross {
                    return Err(Error::contract(format!(
                        "random relation table sized {max_center}x{max_cross}, graph is {n_c}x{n_x}"
                    )));
                }
                let rows: Vec<usize> = ci.iter().zip(&xi).map(|(i, j)| i * max_cross + j).collect();
                let t = tape.param(params, table)?;
                Ok(Some(tape.gather_rows(t, &rows)?))
            }
            EdgeSource::None => Ok(None),
        }
    }

    /// Returns `(selected edges, weights)`.
    pub fn select(
        &self,
        tape: &mut Tape,
        params: &ParameterRegistry,
        edges: Var,
        query: Var,
        n_center: usize,
        n_cross: usize,
    ) -> Result<(Var, Var)> {
        let (Some(wq), Some(we), Some(ws)) = (&self.select_query, &self.select_edge, &self.select_score) else {
            return Err(Error::contract("relation selection without relation embeddings"));
        };
        let pq = wq.forward(tape, params, query)?;
        let pq = tile_row(tape, pq, n_center * n_cross)?;
        let pe = we.forward(tape, params, edges)?;
        let joint = tape.hadamard(pq, pe)?;
        let logits = ws.forward(tape, params, joint)?;
        let weights = attention_matrix(tape, logits, n_center, n_cross)?;
        let flat = tape.reshape(weights, &[n_center * n_cross, 1])?;
        let selected = scale_rows(tape, edges, flat)?;
        Ok((selected, weights))
    }

    /// Returns `(updated center nodes, weights)`; aggregates bare cross node
    /// values.
    pub fn convolve(
        &self,
        tape: &mut Tape,
        params: &ParameterRegistry,
        cross: Var,
        selected: Option<Var>,
        query: Var,
        n_center: usize,
    ) -> Result<(Var, Var)> {
        let n_x = tape.value(cross).dims2()?.0;
        let (_, xi) = pair_indices(n_center, n_x);
        let x = tape.gather_rows(cross, &xi)?;
        let input = match selected {
            Some(e) => tape.concat(&[x, e], Axis::Cols)?,
            None => x,
        };
        let proj = self.conv_proj.forward(tape, params, input)?;
        let q = tile_row(tape, query, n_center * n_x)?;
        let joint = tape.hadamard(q, proj)?;
        let logits = self.conv_score.forward(tape, params, joint)?;
        let weights = attention_matrix(tape, logits, n_center, n_x)?;
        let nodes = tape.matmul(weights, cross)?;
        Ok((nodes, weights))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParameterRegistry,
        center: Var,
        cross: Var,
        query: Var,
    ) -> Result<RelationalOutput> {
        let n_c = tape.value(center).dims2()?.0;
        let n_x = tape.value(cross).dims2()?.0;
        let edges = self.build_edges(tape, params, center, cross)?;
        let (selected, select_weights) = match edges {
            Some(e) => {
                let (s, w) = self.select(tape, params, e, query, n_c, n_x)?;
                (Some(s), Some(w))
            }
            None => (None, None),
        };
        let (nodes, conv_weights) = self.convolve(tape, params, cross, selected, query, n_c)?;
        Ok(RelationalOutput {
            nodes,
            edges,
            selected,
            select_weights,
            conv_weights,
        })
    }
}

/// `out = proj(sigmoid(gate([parts])) * [parts])`; the gate is as wide as the
/// concatenation.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedFusion {
    pub gate: Linear,
    pub out: Linear,
    pub parts: usize,
}

impl GatedFusion {
    pub fn init(init: &mut ParamInit<'_>, prefix: &str, dim: usize, parts: usize) -> Result<Self> {
        Ok(Self {
            gate: init.linear(&format!("{prefix}.gate"), parts * dim, parts * dim)?,
            out: init.linear(&format!("{prefix}.out"), parts * dim, dim)?,
            parts,
        })
    }

    /// Returns `(fused, gate values)`.
    pub fn forward(&self, tape: &mut Tape, params: &ParameterRegistry, parts: &[Var]) -> Result<(Var, Var)> {
        if parts.len() != self.parts {
            return Err(Error::contract(format!(
                "gated fusion expects {} inputs, got {}",
                self.parts,
                parts.len()
            )));
        }
        let cat = tape.concat(parts, Axis::Cols)?;
        let logits = self.gate.forward(tape, params, cat)?;
        let gate = tape.sigmoid(logits);
        let gated = tape.hadamard(gate, cat)?;
        let fused = self.out.forward(tape, params, gated)?;
        Ok((fused, gate))
    }
}

/// Query-guided attention pooling: `w = softmax_i(score(q * proj(x_i)))`,
/// `pooled = sum_i w_i x_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPool {
    pub proj: Linear,
    pub score: Linear,
}

impl AttentionPool {
    pub fn init(init: &mut ParamInit<'_>, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            proj: init.linear(&format!("{prefix}.proj"), dim, dim)?,
            score: init.linear(&format!("{prefix}.score"), dim, 1)?,
        })
    }

    /// Returns `(pooled 1 x d, weights 1 x n)`.
    pub fn forward(&self, tape: &mut Tape, params: &ParameterRegistry, nodes: Var, query: Var) -> Result<(Var, Var)> {
        let n = tape.value(nodes).dims2()?.0;
        let p = self.proj.forward(tape, params, nodes)?;
        let q = tile_row(tape, query, n)?;
        let joint = tape.hadamard(q, p)?;
        let logits = self.score.forward(tape, params, joint)?;
        let row = tape.transpose(logits)?;
        let weights = tape.softmax(row, Axis::Cols)?;
        let pooled = tape.matmul(weights, nodes)?;
        Ok((pooled, weights))
    }
}
