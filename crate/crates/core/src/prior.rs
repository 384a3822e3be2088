//! Organ–disease knowledge graph, a single multi-head graph attention layer,
//! and its injection into the integrated prompt information.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{multi_head_attention, AttentionParams, Linear, MASK_SCORE};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Organ,
    Disease,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub kind: NodeKind,
}

/// On-disk form. `adjacency`, when given, must be square, binary and
/// symmetric; `edges` are undirected index pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphFile {
    pub nodes: Vec<Node>,
    #[serde(default)]
    pub edges: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adjacency: Option<Vec<Vec<f64>>>,
}

/// Validated graph; the adjacency always carries self-loops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeGraph {
    nodes: Vec<Node>,
    adjacency: Vec<Vec<bool>>,
}

impl KnowledgeGraph {
    pub fn from_edges(nodes: Vec<Node>, edges: &[[usize; 2]]) -> Result<Self> {
        let g = nodes.len();
        if g == 0 {
            return Err(Error::Graph("graph has no nodes".into()));
        }
        let mut adj = vec![vec![false; g]; g];
        for (k, &[i, j]) in edges.iter().enumerate() {
            if i >= g || j >= g {
                return Err(Error::Graph(format!("edge {k} ({i}, {j}) outside {g} nodes")));
            }
            adj[i][j] = true;
            adj[j][i] = true;
        }
        Self::from_adjacency(nodes, adj)
    }

    pub fn from_adjacency(nodes: Vec<Node>, mut adjacency: Vec<Vec<bool>>) -> Result<Self> {
        let g = nodes.len();
        if g == 0 {
            return Err(Error::Graph("graph has no nodes".into()));
        }
        if adjacency.len() != g {
            return Err(Error::Graph(format!("adjacency has {} rows for {g} nodes", adjacency.len())));
        }
        for (i, row) in adjacency.iter().enumerate() {
            if row.len() != g {
                return Err(Error::Graph(format!("adjacency row {i} has {} entries, expected {g}", row.len())));
            }
        }
        for i in 0..g {
            for j in 0..i {
                if adjacency[i][j] != adjacency[j][i] {
                    return Err(Error::Graph(format!("adjacency is asymmetric at ({i}, {j})")));
                }
            }
            adjacency[i][i] = true;
        }
        Ok(Self { nodes, adjacency })
    }

    pub fn from_file(file: GraphFile) -> Result<Self> {
        let mut graph = Self::from_edges(file.nodes, &file.edges)?;
        if let Some(rows) = file.adjacency {
            let g = graph.len();
            if rows.len() != g || rows.iter().any(|r| r.len() != g) {
                return Err(Error::Graph(format!("adjacency is not {g}x{g}")));
            }
            let mut bits = vec![vec![false; g]; g];
            for (i, row) in rows.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    bits[i][j] = match v {
                        0.0 => false,
                        1.0 => true,
                        _ => return Err(Error::Graph(format!("adjacency entry ({i}, {j}) = {v} is not binary"))),
                    };
                    bits[i][j] |= graph.adjacency[i][j] && i != j;
                }
            }
            graph = Self::from_adjacency(graph.nodes, bits)?;
        }
        Ok(graph)
    }

    pub fn to_file(&self) -> GraphFile {
        let mut edges = Vec::new();
        for i in 0..self.len() {
            for j in i + 1..self.len() {
                if self.adjacency[i][j] {
                    edges.push([i, j]);
                }
            }
        }
        GraphFile {
            nodes: self.nodes.clone(),
            edges,
            adjacency: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: GraphFile = serde_json::from_str(&text).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        Self::from_file(file).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            line: 0,
            msg: e.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn adjacent(&self, i: usize, j: usize) -> bool {
        self.adjacency[i][j]
    }

    pub fn adjacency(&self) -> &[Vec<bool>] {
        &self.adjacency
    }

    /// `X_adj` as a 0/1 matrix.
    pub fn adjacency_tensor(&self) -> Tensor {
        let g = self.len();
        let data = self.adjacency.iter().flatten().map(|&b| f64::from(u8::from(b))).collect();
        Tensor::matrix(g, g, data).expect("square")
    }

    /// Undirected edges excluding self-loops.
    pub fn edge_count(&self) -> usize {
        let g = self.len();
        (0..g).map(|i| (i + 1..g).filter(|&j| self.adjacency[i][j]).count()).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    /// Relabels nodes so that new node `k` is old node `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let g = self.len();
        let mut seen = vec![false; g];
        if perm.len() != g || perm.iter().any(|&p| p >= g || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::contract("not a permutation"));
        }
        let nodes = perm.iter().map(|&p| self.nodes[p].clone()).collect();
        let adjacency = perm
            .iter()
            .map(|&a| perm.iter().map(|&b| self.adjacency[a][b]).collect())
            .collect();
        Ok(Self { nodes, adjacency })
    }

    /// Additive score mask: `0` on edges, [`MASK_SCORE`] elsewhere.
    fn score_mask(&self) -> Tensor {
        let g = self.len();
        let data = self
            .adjacency
            .iter()
            .flatten()
            .map(|&b| if b { 0.0 } else { MASK_SCORE })
            .collect();
        Tensor::matrix(g, g, data).expect("square")
    }
}

/// Graph attention parameters. Head `h` owns column block `h` of `weight`
/// and of both attention vectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GatParams {
    pub weight: ParamId,
    pub attn_src: ParamId,
    pub attn_dst: ParamId,
    pub heads: usize,
    pub width: usize,
    pub slope: f64,
}

impl GatParams {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::config(format!(
                "graph width {width} is not divisible by {heads} heads"
            )));
        }
        let dh = width / heads;
        let bound = (6.0 / (1 + dh) as f64).sqrt();
        let mut vec_param = |suffix: &str, rng: &mut R| {
            let data = (0..width).map(|_| rng.random_range(-bound..bound)).collect();
            store.add(format!("{name}.{suffix}"), Tensor::matrix(1, width, data).expect("row"))
        };
        let attn_src = vec_param("attn_src", rng);
        let attn_dst = vec_param("attn_dst", rng);
        Ok(Self {
            weight: store.glorot(format!("{name}.weight"), width, width, rng),
            attn_src,
            attn_dst,
            heads,
            width,
            slope: LEAKY_SLOPE,
        })
    }

    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }
}

#[derive(Debug, Clone)]
pub struct GatOutput {
    pub output: Var,
    /// Per-head `G×G` neighbourhood attention.
    pub weights: Vec<Var>,
}

/// One GAT layer: per head `α = softmax_j(LeakyReLU(a_srcᵀWh_i + a_dstᵀWh_j))`
/// over neighbours, `h'_i = Σ_j α_ij Wh_j`; heads concatenated, then ELU.
pub fn gat_attend(tape: &mut Tape, graph: &KnowledgeGraph, f_od: Var, params: &GatParams) -> Result<GatOutput> {
    let (g, d) = tape.value(f_od).dims2()?;
    if g != graph.len() || d != params.width {
        return Err(Error::Shape {
            op: "gat",
            lhs: vec![g, d],
            rhs: vec![graph.len(), params.width],
        });
    }
    let mask = (0..g).any(|i| (0..g).any(|j| !graph.adjacent(i, j)));
    let mask = if mask { Some(tape.constant(graph.score_mask())?) } else { None };
    let w = tape.param(params.weight)?;
    let a_src = tape.param(params.attn_src)?;
    let a_dst = tape.param(params.attn_dst)?;
    let wh = tape.matmul(f_od, w)?;
    let dh = params.head_width();

    let mut heads = Vec::with_capacity(params.heads);
    let mut weights = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let (whh, src, dst) = if params.heads == 1 {
            (wh, a_src, a_dst)
        } else {
            (
                tape.slice_cols(wh, h * dh, dh)?,
                tape.slice_cols(a_src, h * dh, dh)?,
                tape.slice_cols(a_dst, h * dh, dh)?,
            )
        };
        let s = tape.matmul_bt(whh, src)?;
        let t = tape.matmul_bt(dst, whh)?;
        let e = tape.add_outer(s, t)?;
        let mut e = tape.leaky_relu(e, params.slope)?;
        if let Some(m) = mask {
            e = tape.add(e, m)?;
        }
        let alpha = tape.softmax_rows(e)?;
        weights.push(alpha);
        heads.push(tape.matmul(alpha, whh)?);
    }
    let joined = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    let output = tape.elu(joined)?;
    Ok(GatOutput { output, weights })
}

/// `F_G = GNN(F_OD, X_adj)`.
pub fn gat_forward(tape: &mut Tape, graph: &KnowledgeGraph, f_od: Var, params: &GatParams) -> Result<Var> {
    gat_attend(tape, graph, f_od, params).map(|o| o.output)
}

#[derive(Debug, Clone)]
pub struct PriorParams {
    pub gat: GatParams,
    pub attention: AttentionParams,
    pub projection: Linear,
}

impl PriorParams {
    pub fn new<R: Rng>(store: &mut ParamStore, width: usize, heads: usize, gat_heads: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            gat: GatParams::new(store, "prior.gat", width, gat_heads, rng)?,
            attention: AttentionParams::new(store, "prior.graph_ca", width, heads, rng)?,
            projection: Linear::new(store, "prior.graph_proj", width, width, rng),
        })
    }
}

/// Lower block of `X̂_II`: `Proj(CA(F_G, kv))`.
pub fn graph_prompt(tape: &mut Tape, f_g: Var, prompt_kv: Var, params: &PriorParams) -> Result<Var> {
    let a = multi_head_attention(tape, f_g, prompt_kv, &params.attention, None)?;
    params.projection.forward(tape, a)
}

/// `X̂_II = [X̃_II; Proj(CA(F_G, kv))]`.
pub fn prior_fuse(tape: &mut Tape, x_tilde_ii: Var, f_g: Var, prompt_kv: Var, params: &PriorParams) -> Result<Var> {
    let lower = graph_prompt(tape, f_g, prompt_kv, params)?;
    tape.concat_rows(&[x_tilde_ii, lower])
}
