//! Forward passes, expressed over the differentiation tape.
//!
//! The MFGAT pipeline is: per-view affine transforms, a learnable weighted
//! sum unifying the views, a stack of FGAT layers (two sub-modules each:
//! attention convolution, linear map, dropout, residual, layer norm), a
//! multi-view weighted-sum readout, and an affine classifier head. The
//! baselines replace the middle of that pipeline with bare GAT, GCN, or
//! GraphSAGE convolutions and mean pooling.

use crate::autodiff::{Mode, RngStream, Tape, Tensor, VarId};
use crate::datasets::GraphRecord;
use crate::model::{ModelKind, ModelParams};
use crate::{Error, Result};

/// Per-graph structure shared by every layer of one forward pass.
pub struct GraphContext {
    pub num_nodes: usize,
    neighbors: Vec<Vec<u32>>,
}

impl GraphContext {
    pub fn new(graph: &GraphRecord) -> Self {
        let n = graph.num_nodes();
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in &graph.edges {
            neighbors[a as usize].push(b);
            neighbors[b as usize].push(a);
        }
        GraphContext {
            num_nodes: n,
            neighbors,
        }
    }

    pub fn from_edges(num_nodes: usize, edges: &[(u32, u32)]) -> Self {
        let mut neighbors = vec![Vec::new(); num_nodes];
        for &(a, b) in edges {
            neighbors[a as usize].push(b);
            neighbors[b as usize].push(a);
        }
        GraphContext {
            num_nodes,
            neighbors,
        }
    }

    /// Row-major `n×n` attention mask: graph neighbors plus the node itself,
    /// so no neighborhood is empty.
    fn attention_mask(&self) -> Vec<bool> {
        let n = self.num_nodes;
        let mut mask = vec![false; n * n];
        for (i, nbrs) in self.neighbors.iter().enumerate() {
            mask[i * n + i] = true;
            for &j in nbrs {
                mask[i * n + j as usize] = true;
            }
        }
        mask
    }

    /// Symmetric-normalized propagation with self-loops:
    /// `D̂^{-1/2} (A + I) D̂^{-1/2}`.
    fn gcn_propagation(&self) -> Tensor {
        let n = self.num_nodes;
        let inv_sqrt: Vec<f64> = self
            .neighbors
            .iter()
            .map(|nb| 1.0 / ((nb.len() + 1) as f64).sqrt())
            .collect();
        let mut p = Tensor::zeros(n, n);
        for (i, nbrs) in self.neighbors.iter().enumerate() {
            p[(i, i)] = inv_sqrt[i] * inv_sqrt[i];
            for &j in nbrs {
                p[(i, j as usize)] = inv_sqrt[i] * inv_sqrt[j as usize];
            }
        }
        p
    }

    /// Mean-aggregation matrix: row `i` averages the neighbors of `i`; a
    /// node without neighbors gets an all-zero row.
    fn mean_aggregation(&self) -> Tensor {
        let n = self.num_nodes;
        let mut m = Tensor::zeros(n, n);
        for (i, nbrs) in self.neighbors.iter().enumerate() {
            if !nbrs.is_empty() {
                let w = 1.0 / nbrs.len() as f64;
                for &j in nbrs {
                    m[(i, j as usize)] = w;
                }
            }
        }
        m
    }
}

/// Per-view affine transforms: view `j` maps row `x_i` to `W_j x_i + b_j`.
///
/// `transforms` holds `(weight, bias)` pairs with weights stored
/// `[d_out × d_in]`; all views must share the output dimension.
pub fn transform_views(
    tape: &mut Tape,
    x: VarId,
    transforms: &[(VarId, VarId)],
) -> Result<Vec<VarId>> {
    if transforms.is_empty() {
        return Err(Error::InvalidInput("transform_views with zero views".into()));
    }
    let d_out = tape.value(transforms[0].0).rows();
    let mut views = Vec::with_capacity(transforms.len());
    for &(w, b) in transforms {
        if tape.value(w).rows() != d_out {
            return Err(Error::ShapeMismatch {
                op: "transform_views",
                detail: format!(
                    "views disagree on output dim: {} vs {}",
                    d_out,
                    tape.value(w).rows()
                ),
            });
        }
        let xw = tape.matmul_nt(x, w)?;
        views.push(tape.add_row(xw, b)?);
    }
    Ok(views)
}

/// How the view aggregator weights each view.
#[derive(Clone, Copy)]
pub enum ViewWeights {
    /// One scalar per view: a `1×m` tensor.
    PerView(VarId),
    /// One weight per view and dimension: an `m×d` tensor.
    PerDim(VarId),
}

/// Weighted sum of the views into one unified representation.
pub fn unify_views(tape: &mut Tape, views: &[VarId], weights: ViewWeights) -> Result<VarId> {
    if views.is_empty() {
        return Err(Error::InvalidInput("unify_views with zero views".into()));
    }
    let m = views.len();
    let shape = tape.value(views[0]).shape();
    for &v in views {
        if tape.value(v).shape() != shape {
            return Err(Error::ShapeMismatch {
                op: "unify_views",
                detail: format!("{:?} vs {:?}", shape, tape.value(v).shape()),
            });
        }
    }
    match weights {
        ViewWeights::PerView(w) => {
            if tape.value(w).shape() != (1, m) {
                return Err(Error::ShapeMismatch {
                    op: "unify_views",
                    detail: format!(
                        "{} views but weight shape {:?}",
                        m,
                        tape.value(w).shape()
                    ),
                });
            }
            let mut acc = None;
            for (j, &v) in views.iter().enumerate() {
                let wj = tape.slice_cols(w, j, 1);
                let scaled = tape.mul_scalar_var(v, wj)?;
                acc = Some(match acc {
                    None => scaled,
                    Some(a) => tape.add(a, scaled)?,
                });
            }
            Ok(acc.unwrap())
        }
        ViewWeights::PerDim(w) => {
            if tape.value(w).shape() != (m, shape.1) {
                return Err(Error::ShapeMismatch {
                    op: "unify_views",
                    detail: format!(
                        "{} views of width {} but weight shape {:?}",
                        m,
                        shape.1,
                        tape.value(w).shape()
                    ),
                });
            }
            let mut acc = None;
            for (j, &v) in views.iter().enumerate() {
                let wj = tape.slice_rows(w, j, 1);
                let scaled = tape.mul_row(v, wj)?;
                acc = Some(match acc {
                    None => scaled,
                    Some(a) => tape.add(a, scaled)?,
                });
            }
            Ok(acc.unwrap())
        }
    }
}

/// Graph attention convolution.
///
/// Projects nodes by `weight[d_out × d_in]`, scores every neighbor pair
/// `(i, j)` as `LeakyReLU(aᵀ[W x_i || W x_j])`, normalizes scores over each
/// node's neighborhood (graph neighbors plus the node itself) by masked
/// softmax, and returns `ELU(Σ_j α_ij W x_j)`.
pub fn gat_conv(
    tape: &mut Tape,
    x: VarId,
    ctx: &GraphContext,
    weight: VarId,
    attn: VarId,
    slope: f64,
) -> Result<VarId> {
    let d_out = tape.value(weight).rows();
    if tape.value(attn).shape() != (1, 2 * d_out) {
        return Err(Error::ShapeMismatch {
            op: "gat_conv",
            detail: format!(
                "attention vector {:?} must be 1x{} (twice the output dim)",
                tape.value(attn).shape(),
                2 * d_out
            ),
        });
    }
    let n = ctx.num_nodes;
    let h = tape.matmul_nt(x, weight)?;
    let a_src = tape.slice_cols(attn, 0, d_out);
    let a_tgt = tape.slice_cols(attn, d_out, d_out);
    let s_src = tape.matmul_nt(h, a_src)?;
    let s_tgt = tape.matmul_nt(h, a_tgt)?;
    // Score matrix S[i][j] = s_src[i] + s_tgt[j], built by two rank-one
    // products with constant ones.
    let ones_row = tape.constant(Tensor::filled(1, n, 1.0));
    let ones_col = tape.constant(Tensor::filled(n, 1, 1.0));
    let left = tape.matmul(s_src, ones_row)?;
    let s_tgt_row = tape.transpose(s_tgt);
    let right = tape.matmul(ones_col, s_tgt_row)?;
    let scores = tape.add(left, right)?;
    let scored = tape.leaky_relu(scores, slope);
    let alpha = tape.masked_softmax(scored, &ctx.attention_mask())?;
    let agg = tape.matmul(alpha, h)?;
    Ok(tape.elu(agg))
}

/// Tape variables of one FGAT sub-module.
#[derive(Clone, Copy)]
pub struct SubmoduleVars {
    pub conv_weight: VarId,
    pub conv_attn: VarId,
    pub linear_weight: VarId,
    pub linear_bias: VarId,
    pub gamma: VarId,
    pub beta: VarId,
    pub eps: f64,
    pub dropout: f64,
    pub slope: f64,
}

/// One FGAT sub-module: `LayerNorm(x + Dropout(Linear(GatConv(x))))`.
///
/// The residual demands that the convolution preserves the feature width.
pub fn fgat_submodule_forward(
    tape: &mut Tape,
    x: VarId,
    ctx: &GraphContext,
    sub: &SubmoduleVars,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<VarId> {
    let conv = gat_conv(tape, x, ctx, sub.conv_weight, sub.conv_attn, sub.slope)?;
    let lin = tape.matmul_nt(conv, sub.linear_weight)?;
    let lin = tape.add_row(lin, sub.linear_bias)?;
    let dropped = tape.dropout(lin, sub.dropout, mode, rng)?;
    let residual = tape.add(x, dropped)?;
    Ok(tape.layer_norm(residual, sub.gamma, sub.beta, sub.eps))
}

/// One FGAT layer: two identical sub-modules applied in sequence.
pub fn fgat_layer_forward(
    tape: &mut Tape,
    x: VarId,
    ctx: &GraphContext,
    subs: &[SubmoduleVars; 2],
    mode: Mode,
    rng: &mut RngStream,
) -> Result<VarId> {
    let mid = fgat_submodule_forward(tape, x, ctx, &subs[0], mode, rng)?;
    fgat_submodule_forward(tape, mid, ctx, &subs[1], mode, rng)
}

/// Learnable multi-view global pooling.
///
/// For each view `j`, node weights are the softmax of scores `a_jᵀ x_i`
/// and the view summary is the weighted sum of its node states; summaries
/// are concatenated across views and multiplied elementwise by the fusion
/// weights. Permutation-invariant and size-agnostic by construction.
pub fn multi_view_readout(
    tape: &mut Tape,
    views: &[VarId],
    scores: &[VarId],
    fusion: VarId,
) -> Result<VarId> {
    if views.is_empty() || views.len() != scores.len() {
        return Err(Error::InvalidInput(format!(
            "multi_view_readout with {} views and {} scoring vectors",
            views.len(),
            scores.len()
        )));
    }
    let n = tape.value(views[0]).rows();
    if n == 0 {
        return Err(Error::InvalidInput("readout of an empty graph".into()));
    }
    let all = vec![true; n];
    let mut summaries = Vec::with_capacity(views.len());
    for (&v, &a) in views.iter().zip(scores) {
        let s = tape.matmul_nt(v, a)?;
        let s_row = tape.transpose(s);
        let w = tape.masked_softmax(s_row, &all)?;
        summaries.push(tape.matmul(w, v)?);
    }
    let cat = tape.concat_cols(&summaries)?;
    tape.mul(cat, fusion)
}

/// GCN baseline convolution: `ReLU(D̂^{-1/2} (A+I) D̂^{-1/2} X Wᵀ)`.
pub fn gcn_conv(tape: &mut Tape, x: VarId, ctx: &GraphContext, weight: VarId) -> Result<VarId> {
    let prop = tape.constant(ctx.gcn_propagation());
    let xw = tape.matmul_nt(x, weight)?;
    let mixed = tape.matmul(prop, xw)?;
    Ok(tape.relu(mixed))
}

/// GraphSAGE baseline convolution with the mean aggregator:
/// `ReLU(W_self x_i + W_nb · mean_{j∈N(i)} x_j)`; an empty neighborhood
/// contributes a zero vector.
pub fn sage_conv(
    tape: &mut Tape,
    x: VarId,
    ctx: &GraphContext,
    weight_self: VarId,
    weight_neighbor: VarId,
) -> Result<VarId> {
    let mean = tape.constant(ctx.mean_aggregation());
    let own = tape.matmul_nt(x, weight_self)?;
    let agg = tape.matmul(mean, x)?;
    let nb = tape.matmul_nt(agg, weight_neighbor)?;
    let sum = tape.add(own, nb)?;
    Ok(tape.relu(sum))
}

/// Result of a taped forward pass: the logits plus the tape variables of
/// every parameter, aligned with the parameter order of [`ModelParams`].
pub struct ForwardOutput {
    pub logits: VarId,
    pub param_vars: Vec<VarId>,
}

struct TapedParams<'p> {
    params: &'p ModelParams,
    vars: Vec<VarId>,
}

impl TapedParams<'_> {
    fn var(&self, name: &str) -> VarId {
        self.vars[self.params.index_of(name)]
    }
}

/// Run one graph through the configured model and produce `1×C` logits.
pub fn classify_forward(
    tape: &mut Tape,
    graph: &GraphRecord,
    params: &ModelParams,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<ForwardOutput> {
    let vars: Vec<VarId> = params
        .iter()
        .map(|(_, t, _)| tape.leaf(t.clone()))
        .collect();
    let logits = classify_forward_with_vars(tape, graph, params, &vars, mode, rng)?;
    Ok(ForwardOutput {
        logits,
        param_vars: vars,
    })
}

/// Forward pass against caller-supplied parameter leaves (aligned with the
/// parameter order); `params` contributes only names and config. Used by
/// the end-to-end gradient check, which owns the leaves it perturbs.
pub(crate) fn classify_forward_with_vars(
    tape: &mut Tape,
    graph: &GraphRecord,
    params: &ModelParams,
    vars: &[VarId],
    mode: Mode,
    rng: &mut RngStream,
) -> Result<VarId> {
    let cfg = &params.config;
    if graph.node_features.cols() != cfg.input_dim {
        return Err(Error::Validation(format!(
            "graph has {}-dimensional features but the model expects {}",
            graph.node_features.cols(),
            cfg.input_dim
        )));
    }
    let tp = TapedParams {
        params,
        vars: vars.to_vec(),
    };
    let ctx = GraphContext::new(graph);
    let x = tape.constant(graph.node_features.clone());

    let logits = match cfg.kind {
        ModelKind::Mfgat | ModelKind::Fgat => mfgat_logits(tape, x, &ctx, &tp, mode, rng)?,
        ModelKind::Gat => {
            let mut h = x;
            for l in 0..cfg.num_layers {
                h = gat_conv(
                    tape,
                    h,
                    &ctx,
                    tp.var(&format!("gat.{l}.weight")),
                    tp.var(&format!("gat.{l}.attn")),
                    cfg.leaky_slope,
                )?;
            }
            let pooled = mean_pool(tape, h, ctx.num_nodes)?;
            classifier_head(tape, pooled, &tp)?
        }
        ModelKind::Gcn => {
            let mut h = x;
            for l in 0..cfg.num_layers {
                h = gcn_conv(tape, h, &ctx, tp.var(&format!("gcn.{l}.weight")))?;
            }
            let pooled = mean_pool(tape, h, ctx.num_nodes)?;
            classifier_head(tape, pooled, &tp)?
        }
        ModelKind::Sage => {
            let mut h = x;
            for l in 0..cfg.num_layers {
                h = sage_conv(
                    tape,
                    h,
                    &ctx,
                    tp.var(&format!("sage.{l}.weight_self")),
                    tp.var(&format!("sage.{l}.weight_neighbor")),
                )?;
            }
            let pooled = mean_pool(tape, h, ctx.num_nodes)?;
            classifier_head(tape, pooled, &tp)?
        }
    };
    Ok(logits)
}

fn mfgat_logits(
    tape: &mut Tape,
    x: VarId,
    ctx: &GraphContext,
    tp: &TapedParams,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<VarId> {
    let cfg = &tp.params.config;
    let m = cfg.num_views;

    let transforms: Vec<(VarId, VarId)> = (0..m)
        .map(|j| {
            (
                tp.var(&format!("view_transform.{j}.weight")),
                tp.var(&format!("view_transform.{j}.bias")),
            )
        })
        .collect();
    let views = transform_views(tape, x, &transforms)?;

    let agg = tp.var("view_agg.weights");
    let weights = if cfg.per_dim_view_weights {
        ViewWeights::PerDim(agg)
    } else {
        ViewWeights::PerView(agg)
    };

    let layers: Vec<[SubmoduleVars; 2]> = (0..cfg.num_layers)
        .map(|l| {
            let sub = |s: usize| {
                let base = format!("layer.{l}.sub.{s}");
                SubmoduleVars {
                    conv_weight: tp.var(&format!("{base}.conv.weight")),
                    conv_attn: tp.var(&format!("{base}.conv.attn")),
                    linear_weight: tp.var(&format!("{base}.linear.weight")),
                    linear_bias: tp.var(&format!("{base}.linear.bias")),
                    gamma: tp.var(&format!("{base}.norm.gamma")),
                    beta: tp.var(&format!("{base}.norm.beta")),
                    eps: cfg.layer_norm_eps,
                    dropout: cfg.dropout,
                    slope: cfg.leaky_slope,
                }
            };
            [sub(0), sub(1)]
        })
        .collect();

    let run_stack = |tape: &mut Tape, mut h: VarId, rng: &mut RngStream| -> Result<VarId> {
        for layer in &layers {
            h = fgat_layer_forward(tape, h, ctx, layer, mode, rng)?;
        }
        Ok(h)
    };

    let view_states: Vec<VarId> = if cfg.unified_path {
        let unified = unify_views(tape, &views, weights)?;
        let h = run_stack(tape, unified, rng)?;
        (0..m)
            .map(|j| {
                let w = tp.var(&format!("proj.{j}.weight"));
                let b = tp.var(&format!("proj.{j}.bias"));
                let hw = tape.matmul_nt(h, w)?;
                tape.add_row(hw, b)
            })
            .collect::<Result<_>>()?
    } else {
        views
            .iter()
            .map(|&v| run_stack(tape, v, rng))
            .collect::<Result<_>>()?
    };

    let scores: Vec<VarId> = (0..m)
        .map(|j| tp.var(&format!("readout.score.{j}")))
        .collect();
    let pooled = multi_view_readout(tape, &view_states, &scores, tp.var("readout.fusion"))?;
    classifier_head(tape, pooled, tp)
}

fn mean_pool(tape: &mut Tape, h: VarId, n: usize) -> Result<VarId> {
    let mean_row = tape.constant(Tensor::filled(1, n, 1.0 / n as f64));
    tape.matmul(mean_row, h)
}

fn classifier_head(tape: &mut Tape, pooled: VarId, tp: &TapedParams) -> Result<VarId> {
    let w = tp.var("classifier.weight");
    let b = tp.var("classifier.bias");
    let pw = tape.matmul_nt(pooled, w)?;
    tape.add_row(pw, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::new(rows, cols, v.to_vec())
    }

    #[test]
    fn transform_identity_view_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.leaf(Tensor::identity(2));
        let b = tape.leaf(Tensor::zeros(1, 2));
        let views = transform_views(&mut tape, x, &[(w, b)]).unwrap();
        assert_eq!(tape.value(views[0]).values(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn transform_hand_evaluated_row() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 2, &[1.0, 2.0]));
        let w = tape.leaf(t(2, 2, &[0.0, 1.0, 1.0, 0.0]));
        let b = tape.leaf(t(1, 2, &[1.0, 1.0]));
        let views = transform_views(&mut tape, x, &[(w, b)]).unwrap();
        assert_eq!(tape.value(views[0]).values(), &[3.0, 2.0]);
    }

    #[test]
    fn transform_zero_weight_gives_bias_rows() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(3, 2, &[9.0, 8.0, 7.0, 6.0, 5.0, 4.0]));
        let w = tape.leaf(Tensor::zeros(2, 2));
        let b = tape.leaf(t(1, 2, &[0.5, -0.5]));
        let views = transform_views(&mut tape, x, &[(w, b)]).unwrap();
        for r in 0..3 {
            assert_eq!(tape.value(views[0]).row(r), &[0.5, -0.5]);
        }
    }

    #[test]
    fn unify_single_view_with_unit_weight_is_identity() {
        let mut tape = Tape::new();
        let v = tape.leaf(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.leaf(Tensor::filled(1, 1, 1.0));
        let u = unify_views(&mut tape, &[v], ViewWeights::PerView(w)).unwrap();
        assert_eq!(tape.value(u).values(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn unify_convex_combination_of_identical_views() {
        let mut tape = Tape::new();
        let v1 = tape.leaf(t(1, 2, &[5.0, -1.0]));
        let v2 = tape.leaf(t(1, 2, &[5.0, -1.0]));
        let w = tape.leaf(t(1, 2, &[0.3, 0.7]));
        let u = unify_views(&mut tape, &[v1, v2], ViewWeights::PerView(w)).unwrap();
        for (a, e) in tape.value(u).values().iter().zip([5.0, -1.0]) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn unify_hand_evaluated_weighted_sum() {
        let mut tape = Tape::new();
        let v1 = tape.leaf(t(1, 2, &[1.0, 2.0]));
        let v2 = tape.leaf(t(1, 2, &[3.0, 4.0]));
        let w = tape.leaf(t(1, 2, &[0.5, 2.0]));
        let u = unify_views(&mut tape, &[v1, v2], ViewWeights::PerView(w)).unwrap();
        assert_eq!(tape.value(u).values(), &[6.5, 9.0]);
    }

    #[test]
    fn unify_rejects_weight_length_mismatch() {
        let mut tape = Tape::new();
        let v = tape.leaf(t(1, 2, &[1.0, 2.0]));
        let w = tape.leaf(t(1, 2, &[0.5, 2.0]));
        assert!(unify_views(&mut tape, &[v], ViewWeights::PerView(w)).is_err());
    }

    #[test]
    fn gat_conv_isolated_node_is_elu_of_projection() {
        let mut tape = Tape::new();
        let ctx = GraphContext::from_edges(1, &[]);
        let x = tape.leaf(t(1, 2, &[1.0, -2.0]));
        let w = tape.leaf(Tensor::identity(2));
        let a = tape.leaf(t(1, 4, &[0.3, -0.2, 0.9, 0.4]));
        let y = gat_conv(&mut tape, x, &ctx, w, a, 0.2).unwrap();
        // Only the self-loop: α = 1, output = ELU(x).
        let expected = [1.0, (-2.0f64).exp() - 1.0];
        for (v, e) in tape.value(y).values().iter().zip(expected) {
            assert!((v - e).abs() < 1e-12);
        }
    }

    #[test]
    fn gat_conv_hand_evaluated_two_nodes() {
        // W = I, a = [0,0,1,0]: the score of any pair is the first feature
        // of the target, so softmax([0,1]) = [0.26894, 0.73106] for both
        // rows, and each output row is 0.73106·[1,0].
        let mut tape = Tape::new();
        let ctx = GraphContext::from_edges(2, &[(0, 1)]);
        let x = tape.leaf(t(2, 2, &[0.0, 0.0, 1.0, 0.0]));
        let w = tape.leaf(Tensor::identity(2));
        let a = tape.leaf(t(1, 4, &[0.0, 0.0, 1.0, 0.0]));
        let y = gat_conv(&mut tape, x, &ctx, w, a, 0.2).unwrap();
        let alpha = 1.0f64.exp() / (1.0 + 1.0f64.exp());
        for r in 0..2 {
            assert!((tape.value(y)[(r, 0)] - alpha).abs() < 1e-12);
            assert!(tape.value(y)[(r, 1)].abs() < 1e-12);
        }
    }

    #[test]
    fn gat_conv_identical_neighbors_split_attention_evenly() {
        let mut tape = Tape::new();
        let ctx = GraphContext::from_edges(3, &[(0, 1), (0, 2)]);
        // All nodes identical: every attention row is uniform, so each
        // output row equals ELU(Wx) of the shared feature.
        let x = tape.leaf(t(3, 2, &[0.4, -0.7, 0.4, -0.7, 0.4, -0.7]));
        let mut rng = RngStream::new(3);
        let w = tape.leaf(Tensor::uniform(2, 2, -1.0, 1.0, &mut rng));
        let a = tape.leaf(Tensor::uniform(1, 4, -1.0, 1.0, &mut rng));
        let y = gat_conv(&mut tape, x, &ctx, w, a, 0.2).unwrap();
        for r in 1..3 {
            for c in 0..2 {
                assert!((tape.value(y)[(r, c)] - tape.value(y)[(0, c)]).abs() < 1e-12);
            }
        }
    }

    fn test_submodule(tape: &mut Tape, d: usize, seed: u64, dropout: f64) -> SubmoduleVars {
        let mut rng = RngStream::new(seed);
        SubmoduleVars {
            conv_weight: tape.leaf(Tensor::uniform(d, d, -0.5, 0.5, &mut rng)),
            conv_attn: tape.leaf(Tensor::uniform(1, 2 * d, -0.5, 0.5, &mut rng)),
            linear_weight: tape.leaf(Tensor::uniform(d, d, -0.5, 0.5, &mut rng)),
            linear_bias: tape.leaf(Tensor::uniform(1, d, -0.1, 0.1, &mut rng)),
            gamma: tape.leaf(Tensor::filled(1, d, 1.0)),
            beta: tape.leaf(Tensor::zeros(1, d)),
            eps: 1e-5,
            dropout,
            slope: 0.2,
        }
    }

    #[test]
    fn submodule_preserves_shape() {
        let mut tape = Tape::new();
        let ctx = GraphContext::from_edges(5, &[(0, 1), (1, 2), (2, 3), (3, 4)]);
        let mut rng = RngStream::new(1);
        let x = tape.leaf(Tensor::uniform(5, 8, -1.0, 1.0, &mut rng));
        let sub = test_submodule(&mut tape, 8, 2, 0.0);
        let y = fgat_submodule_forward(&mut tape, x, &ctx, &sub, Mode::Eval, &mut rng).unwrap();
        assert_eq!(tape.value(y).shape(), (5, 8));
    }

    #[test]
    fn submodule_with_zero_linear_is_layer_norm_of_input() {
        let mut tape = Tape::new();
        let ctx = GraphContext::from_edges(3, &[(0, 1), (1, 2)]);
        let mut rng = RngStream::new(4);
        let x = tape.leaf(Tensor::uniform(3, 4, -1.0, 1.0, &mut rng));
        let mut sub = test_submodule(&mut tape, 4, 5, 0.0);
        sub.linear_weight = tape.leaf(Tensor::zeros(4, 4));
        sub.linear_bias = tape.leaf(Tensor::zeros(1, 4));
        let y = fgat_submodule_forward(&mut tape, x, &ctx, &sub, Mode::Eval, &mut rng).unwrap();
        let expected = tape.layer_norm(x, sub.gamma, sub.beta, sub.eps);
        assert_eq!(tape.value(y), tape.value(expected));
    }

    #[test]
    fn submodule_eval_runs_are_identical() {
        let run = || {
            let mut tape = Tape::new();
            let ctx = GraphContext::from_edges(4, &[(0, 1), (1, 2), (2, 3)]);
            let mut rng = RngStream::new(9);
            let x = tape.leaf(Tensor::uniform(4, 6, -1.0, 1.0, &mut rng));
            let sub = test_submodule(&mut tape, 6, 10, 0.5);
            let y =
                fgat_submodule_forward(&mut tape, x, &ctx, &sub, Mode::Eval, &mut rng).unwrap();
            tape.value(y).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn layer_is_permutation_equivariant() {
        let n = 6;
        let edges = [(0u32, 1u32), (1, 2), (2, 3), (3, 4), (4, 5), (0, 3), (1, 4)];
        let mut rng = RngStream::new(12);
        let x = Tensor::uniform(n, 5, -1.0, 1.0, &mut rng);
        let perm: Vec<usize> = vec![3, 0, 5, 1, 4, 2];

        let run = |features: &Tensor, edges: &[(u32, u32)]| {
            let mut tape = Tape::new();
            let ctx = GraphContext::from_edges(n, edges);
            let xv = tape.leaf(features.clone());
            let subs = [
                test_submodule(&mut tape, 5, 20, 0.0),
                test_submodule(&mut tape, 5, 21, 0.0),
            ];
            let mut rng = RngStream::new(0);
            let y = fgat_layer_forward(&mut tape, xv, &ctx, &subs, Mode::Eval, &mut rng).unwrap();
            tape.value(y).clone()
        };

        let base = run(&x, &edges);
        let mut px = Tensor::zeros(n, 5);
        for i in 0..n {
            px.values_mut()[perm[i] * 5..(perm[i] + 1) * 5].copy_from_slice(x.row(i));
        }
        let pedges: Vec<(u32, u32)> = edges
            .iter()
            .map(|&(a, b)| (perm[a as usize] as u32, perm[b as usize] as u32))
            .collect();
        let permuted = run(&px, &pedges);
        for i in 0..n {
            for c in 0..5 {
                assert!(
                    (permuted[(perm[i], c)] - base[(i, c)]).abs() < 1e-9,
                    "node {i} feature {c}"
                );
            }
        }
    }

    #[test]
    fn stacked_layers_respect_the_receptive_field() {
        // Two layers = four attention hops. On a path of nine nodes,
        // perturbing node 8 cannot reach nodes 0..=3.
        let n = 9;
        let edges: Vec<(u32, u32)> = (0..8).map(|i| (i as u32, i as u32 + 1)).collect();
        let run = |features: &Tensor| {
            let mut tape = Tape::new();
            let ctx = GraphContext::from_edges(n, &edges);
            let xv = tape.leaf(features.clone());
            let l0 = [
                test_submodule(&mut tape, 3, 30, 0.0),
                test_submodule(&mut tape, 3, 31, 0.0),
            ];
            let l1 = [
                test_submodule(&mut tape, 3, 32, 0.0),
                test_submodule(&mut tape, 3, 33, 0.0),
            ];
            let mut rng = RngStream::new(0);
            let h = fgat_layer_forward(&mut tape, xv, &ctx, &l0, Mode::Eval, &mut rng).unwrap();
            let y = fgat_layer_forward(&mut tape, h, &ctx, &l1, Mode::Eval, &mut rng).unwrap();
            tape.value(y).clone()
        };
        let mut rng = RngStream::new(40);
        let x = Tensor::uniform(n, 3, -1.0, 1.0, &mut rng);
        let base = run(&x);
        let mut bumped = x.clone();
        bumped[(8, 1)] += 10.0;
        let shifted = run(&bumped);
        for node in 0..=3 {
            for c in 0..3 {
                assert_eq!(
                    base[(node, c)],
                    shifted[(node, c)],
                    "node {node} inside the receptive-field boundary moved"
                );
            }
        }
        // The perturbed node itself must move.
        assert!(base.row(8) != shifted.row(8));
    }

    #[test]
    fn readout_single_node_is_fused_concat() {
        let mut tape = Tape::new();
        let v1 = tape.leaf(t(1, 2, &[1.0, 2.0]));
        let v2 = tape.leaf(t(1, 2, &[3.0, 4.0]));
        let a1 = tape.leaf(Tensor::zeros(1, 2));
        let a2 = tape.leaf(Tensor::zeros(1, 2));
        let fusion = tape.leaf(t(1, 4, &[1.0, 2.0, 3.0, 4.0]));
        let y = multi_view_readout(&mut tape, &[v1, v2], &[a1, a2], fusion).unwrap();
        assert_eq!(tape.value(y).values(), &[1.0, 4.0, 9.0, 16.0]);
    }

    #[test]
    fn readout_hand_evaluated_uniform_weights() {
        // One view, d = 1, nodes [1] and [3], zero scoring vector gives
        // uniform node weights; fusion weight 2 doubles the mean.
        let mut tape = Tape::new();
        let v = tape.leaf(t(2, 1, &[1.0, 3.0]));
        let a = tape.leaf(Tensor::zeros(1, 1));
        let fusion = tape.leaf(t(1, 1, &[2.0]));
        let y = multi_view_readout(&mut tape, &[v], &[a], fusion).unwrap();
        assert!((tape.value(y).item() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn readout_is_permutation_invariant() {
        let mut rng = RngStream::new(15);
        let v = Tensor::uniform(5, 3, -1.0, 1.0, &mut rng);
        let a = Tensor::uniform(1, 3, -1.0, 1.0, &mut rng);
        let fusion = Tensor::uniform(1, 3, 0.5, 1.5, &mut rng);
        let run = |v: &Tensor| {
            let mut tape = Tape::new();
            let vv = tape.leaf(v.clone());
            let av = tape.leaf(a.clone());
            let fv = tape.leaf(fusion.clone());
            let y = multi_view_readout(&mut tape, &[vv], &[av], fv).unwrap();
            tape.value(y).clone()
        };
        let base = run(&v);
        let perm = [4, 2, 0, 3, 1];
        let mut pv = Tensor::zeros(5, 3);
        for i in 0..5 {
            pv.values_mut()[perm[i] * 3..(perm[i] + 1) * 3].copy_from_slice(v.row(i));
        }
        let permuted = run(&pv);
        assert!(base.max_abs_diff(&permuted) < 1e-12);
    }

    #[test]
    fn gcn_isolated_node_is_relu_of_projection() {
        let mut tape = Tape::new();
        let ctx = GraphContext::from_edges(1, &[]);
        let x = tape.leaf(t(1, 2, &[1.0, -1.0]));
        let w = tape.leaf(Tensor::identity(2));
        let y = gcn_conv(&mut tape, x, &ctx, w).unwrap();
        assert_eq!(tape.value(y).values(), &[1.0, 0.0]);
    }

    #[test]
    fn gcn_two_connected_nodes_average_with_half_weights() {
        let mut tape = Tape::new();
        let ctx = GraphContext::from_edges(2, &[(0, 1)]);
        let x = tape.leaf(t(2, 2, &[2.0, 0.0, 0.0, 4.0]));
        let w = tape.leaf(Tensor::identity(2));
        let y = gcn_conv(&mut tape, x, &ctx, w).unwrap();
        // Every normalized entry is 1/2, so each row is 0.5(x₀+x₁).
        for r in 0..2 {
            assert!((tape.value(y)[(r, 0)] - 1.0).abs() < 1e-12);
            assert!((tape.value(y)[(r, 1)] - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sage_without_neighbors_uses_self_weight_only() {
        let mut tape = Tape::new();
        let ctx = GraphContext::from_edges(1, &[]);
        let x = tape.leaf(t(1, 2, &[3.0, -2.0]));
        let ws = tape.leaf(Tensor::identity(2));
        let wn = tape.leaf(Tensor::filled(2, 2, 100.0));
        let y = sage_conv(&mut tape, x, &ctx, ws, wn).unwrap();
        assert_eq!(tape.value(y).values(), &[3.0, 0.0]);
    }

    #[test]
    fn sage_fixed_point_with_half_identity_weights() {
        let mut tape = Tape::new();
        let ctx = GraphContext::from_edges(3, &[(0, 1), (0, 2)]);
        let x = tape.leaf(t(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]));
        let half = Tensor::identity(2).map(|v| v * 0.5);
        let ws = tape.leaf(half.clone());
        let wn = tape.leaf(half);
        let y = sage_conv(&mut tape, x, &ctx, ws, wn).unwrap();
        for r in 0..3 {
            assert!((tape.value(y)[(r, 0)] - 1.0).abs() < 1e-12);
            assert!((tape.value(y)[(r, 1)] - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sage_star_center_hand_evaluated() {
        let mut tape = Tape::new();
        let ctx = GraphContext::from_edges(3, &[(0, 1), (0, 2)]);
        let x = tape.leaf(t(3, 2, &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0]));
        let ws = tape.leaf(Tensor::zeros(2, 2));
        let wn = tape.leaf(Tensor::identity(2));
        let y = sage_conv(&mut tape, x, &ctx, ws, wn).unwrap();
        assert_eq!(tape.value(y).row(0), &[0.5, 0.5]);
    }

    fn tiny_graph(seed: u64, n: usize, d: usize, edges: &[(u32, u32)]) -> GraphRecord {
        let mut rng = RngStream::new(seed);
        GraphRecord {
            node_features: Tensor::uniform(n, d, -1.0, 1.0, &mut rng),
            edges: edges.to_vec(),
            label: 0,
            graph_id: 1,
        }
    }

    #[test]
    fn classify_forward_emits_class_count_logits_with_unit_softmax() {
        let graph = tiny_graph(7, 5, 3, &[(0, 1), (1, 2), (2, 3), (3, 4)]);
        for kind in [
            ModelKind::Mfgat,
            ModelKind::Fgat,
            ModelKind::Gat,
            ModelKind::Gcn,
            ModelKind::Sage,
        ] {
            let mut cfg = ModelConfig::new(kind, 3, 2);
            cfg.hidden_dim = 8;
            let params = build_model(&cfg, &mut RngStream::new(8)).unwrap();
            let mut tape = Tape::new();
            let mut rng = RngStream::new(1);
            let out =
                classify_forward(&mut tape, &graph, &params, Mode::Eval, &mut rng).unwrap();
            let logits = tape.value(out.logits);
            assert_eq!(logits.shape(), (1, 2), "{kind:?}");
            let max = logits.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.values().iter().map(|v| (v - max).exp()).sum();
            let softmax_sum: f64 = logits.values().iter().map(|v| (v - max).exp() / z).sum();
            assert!((softmax_sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn classify_forward_eval_is_deterministic() {
        let graph = tiny_graph(17, 6, 3, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0)]);
        let mut cfg = ModelConfig::new(ModelKind::Mfgat, 3, 2);
        cfg.hidden_dim = 8;
        cfg.dropout = 0.4;
        let params = build_model(&cfg, &mut RngStream::new(2)).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let mut rng = RngStream::new(33);
            let out =
                classify_forward(&mut tape, &graph, &params, Mode::Eval, &mut rng).unwrap();
            tape.value(out.logits).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn classify_forward_is_permutation_invariant() {
        let n = 6;
        let edges = [(0u32, 1u32), (1, 2), (2, 3), (3, 4), (4, 5), (1, 4)];
        let graph = tiny_graph(19, n, 3, &edges);
        let mut cfg = ModelConfig::new(ModelKind::Mfgat, 3, 2);
        cfg.hidden_dim = 8;
        let params = build_model(&cfg, &mut RngStream::new(3)).unwrap();
        let run = |g: &GraphRecord| {
            let mut tape = Tape::new();
            let mut rng = RngStream::new(0);
            let out = classify_forward(&mut tape, g, &params, Mode::Eval, &mut rng).unwrap();
            tape.value(out.logits).clone()
        };
        let base = run(&graph);
        let perm = [5, 3, 1, 0, 4, 2];
        let mut px = Tensor::zeros(n, 3);
        for i in 0..n {
            px.values_mut()[perm[i] * 3..(perm[i] + 1) * 3]
                .copy_from_slice(graph.node_features.row(i));
        }
        let permuted = GraphRecord {
            node_features: px,
            edges: edges
                .iter()
                .map(|&(a, b)| (perm[a as usize] as u32, perm[b as usize] as u32))
                .collect(),
            label: 0,
            graph_id: 1,
        };
        assert!(base.max_abs_diff(&run(&permuted)) < 1e-9);
    }

    #[test]
    fn mfgat_single_frozen_view_equals_fgat_bitwise() {
        let graph = tiny_graph(23, 5, 4, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 0)]);
        let mut cfg = ModelConfig::new(ModelKind::Fgat, 4, 2);
        cfg.hidden_dim = 4;
        let fgat = build_model(&cfg, &mut RngStream::new(6)).unwrap();
        // Same tensors reinterpreted as MFGAT with one view.
        let mut as_mfgat = fgat.clone();
        as_mfgat.config.kind = ModelKind::Mfgat;
        as_mfgat.config.num_views = 1;

        let run = |params: &ModelParams| {
            let mut tape = Tape::new();
            let mut rng = RngStream::new(0);
            let out = classify_forward(&mut tape, &graph, params, Mode::Eval, &mut rng).unwrap();
            tape.value(out.logits).clone()
        };
        assert_eq!(run(&fgat), run(&as_mfgat));
    }

    #[test]
    fn classify_forward_rejects_wrong_feature_dim() {
        let graph = tiny_graph(29, 4, 5, &[(0, 1)]);
        let cfg = ModelConfig::new(ModelKind::Mfgat, 3, 2);
        let params = build_model(&cfg, &mut RngStream::new(1)).unwrap();
        let mut tape = Tape::new();
        let mut rng = RngStream::new(1);
        assert!(classify_forward(&mut tape, &graph, &params, Mode::Eval, &mut rng).is_err());
    }
}
