//! Model architectures: MFGAT and the GCN/GAT/GraphSAGE/FGAT baselines.
//!
//! [`ModelConfig`] describes an architecture, [`build_model`] allocates and
//! initializes its parameter set, and [`classify_forward`] runs a graph
//! through the selected architecture on a differentiation tape. Checkpoints
//! are JSON containers holding the config echo plus every named parameter
//! tensor with its shape.

mod forward;

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{RngStream, Tensor};
use crate::{Error, Result};

pub use forward::{
    classify_forward, fgat_layer_forward, fgat_submodule_forward, gat_conv, gcn_conv,
    multi_view_readout, sage_conv, transform_views, unify_views, ForwardOutput, GraphContext,
    SubmoduleVars, ViewWeights,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mfgat,
    Fgat,
    Gat,
    Gcn,
    Sage,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Mfgat => "mfgat",
            ModelKind::Fgat => "fgat",
            ModelKind::Gat => "gat",
            ModelKind::Gcn => "gcn",
            ModelKind::Sage => "sage",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mfgat" => Ok(ModelKind::Mfgat),
            "fgat" => Ok(ModelKind::Fgat),
            "gat" => Ok(ModelKind::Gat),
            "gcn" => Ok(ModelKind::Gcn),
            "sage" | "graphsage" => Ok(ModelKind::Sage),
            other => Err(Error::InvalidInput(format!("unknown model kind {other:?}"))),
        }
    }
}

/// Architecture hyperparameters.
///
/// `num_views`, `unified_path`, and `per_dim_view_weights` only affect the
/// MFGAT/FGAT family; the baselines read `hidden_dim` and `num_layers`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub num_views: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// FGAT layers for MFGAT/FGAT (each holds two sub-modules); bare
    /// convolution layers for the baselines.
    pub num_layers: usize,
    pub num_classes: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub layer_norm_eps: f64,
    /// Feed the unified view mixture through the shared FGAT stack and read
    /// out per-view affine projections of the result; when false each view
    /// passes through the stack separately.
    pub unified_path: bool,
    /// Weight views per dimension (`m×d` aggregator) instead of one scalar
    /// per view.
    pub per_dim_view_weights: bool,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, input_dim: usize, num_classes: usize) -> Self {
        ModelConfig {
            kind,
            num_views: 3,
            input_dim,
            hidden_dim: 64,
            num_layers: 2,
            num_classes,
            dropout: 0.1,
            leaky_slope: 0.2,
            layer_norm_eps: 1e-5,
            unified_path: true,
            per_dim_view_weights: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let reject = |field: &str, why: String| {
            Err(Error::Validation(format!("config field {field}: {why}")))
        };
        if self.num_views < 1 {
            return reject("num_views", format!("{} < 1", self.num_views));
        }
        if self.input_dim < 1 {
            return reject("input_dim", format!("{} < 1", self.input_dim));
        }
        if self.hidden_dim < 1 {
            return reject("hidden_dim", format!("{} < 1", self.hidden_dim));
        }
        if self.num_layers < 1 {
            return reject("num_layers", format!("{} < 1", self.num_layers));
        }
        if self.num_classes < 2 {
            return reject("num_classes", format!("{} < 2", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return reject("dropout", format!("{} outside [0, 1)", self.dropout));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) || self.leaky_slope == 0.0 {
            return reject("leaky_slope", format!("{} outside (0, 1)", self.leaky_slope));
        }
        if self.layer_norm_eps <= 0.0 {
            return reject("layer_norm_eps", format!("{} <= 0", self.layer_norm_eps));
        }
        if self.kind == ModelKind::Fgat && self.input_dim > self.hidden_dim {
            return reject(
                "hidden_dim",
                format!(
                    "the fgat variant embeds inputs by a frozen identity, so \
                     hidden_dim ({}) must be at least input_dim ({})",
                    self.hidden_dim, self.input_dim
                ),
            );
        }
        Ok(())
    }
}

/// The full learnable parameter set: named tensors in a stable order.
///
/// Frozen entries take part in every forward pass but are excluded from
/// optimizer updates (the FGAT variant's identity input embedding).
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    frozen: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    fn new(config: ModelConfig) -> Self {
        ModelParams {
            config,
            names: Vec::new(),
            tensors: Vec::new(),
            frozen: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn push(&mut self, name: String, tensor: Tensor, frozen: bool) {
        assert!(
            self.index.insert(name.clone(), self.names.len()).is_none(),
            "duplicate parameter {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        self.frozen.push(frozen);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[self.index_of(name)]
    }

    pub fn set(&mut self, name: &str, tensor: Tensor) {
        let i = self.index_of(name);
        assert_eq!(self.tensors[i].shape(), tensor.shape(), "shape change for {name}");
        self.tensors[i] = tensor;
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn is_frozen(&self, i: usize) -> bool {
        self.frozen[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, bool)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .zip(&self.frozen)
            .map(|((n, t), &f)| (n.as_str(), t, f))
    }

    /// Total number of scalar parameters, frozen entries included.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}

/// Glorot-uniform bound `sqrt(6 / (fan_in + fan_out))` for a weight stored
/// as `[fan_out × fan_in]`.
fn glorot(rows: usize, cols: usize, rng: &mut RngStream) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::uniform(rows, cols, -bound, bound, rng)
}

/// Rectangular identity: ones on the main diagonal. Embeds `cols`-dim input
/// into the first `cols` coordinates of a `rows`-dim space.
fn rect_identity(rows: usize, cols: usize) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    for i in 0..rows.min(cols) {
        t[(i, i)] = 1.0;
    }
    t
}

/// Allocate and initialize every parameter of the configured model.
///
/// Weights are Glorot-uniform, biases zero, layer-norm gains one and shifts
/// zero. View and fusion weights start at one and readout scoring vectors
/// at zero, giving a neutral mixture with uniform initial node weights. The
/// FGAT variant is the MFGAT code path with one view whose transform is a
/// frozen identity embedding.
pub fn build_model(config: &ModelConfig, rng: &mut RngStream) -> Result<ModelParams> {
    config.validate()?;
    let mut config = config.clone();
    if config.kind == ModelKind::Fgat {
        config.num_views = 1;
    }
    let mut p = ModelParams::new(config.clone());
    let (m, din, dh, c) = (
        config.num_views,
        config.input_dim,
        config.hidden_dim,
        config.num_classes,
    );

    match config.kind {
        ModelKind::Mfgat | ModelKind::Fgat => {
            for j in 0..m {
                if config.kind == ModelKind::Fgat {
                    p.push(
                        format!("view_transform.{j}.weight"),
                        rect_identity(dh, din),
                        true,
                    );
                    p.push(format!("view_transform.{j}.bias"), Tensor::zeros(1, dh), true);
                } else {
                    p.push(
                        format!("view_transform.{j}.weight"),
                        glorot(dh, din, rng),
                        false,
                    );
                    p.push(format!("view_transform.{j}.bias"), Tensor::zeros(1, dh), false);
                }
            }
            if config.per_dim_view_weights {
                p.push("view_agg.weights".into(), Tensor::filled(m, dh, 1.0), false);
            } else {
                p.push("view_agg.weights".into(), Tensor::filled(1, m, 1.0), false);
            }
            for l in 0..config.num_layers {
                for s in 0..2 {
                    let base = format!("layer.{l}.sub.{s}");
                    p.push(format!("{base}.conv.weight"), glorot(dh, dh, rng), false);
                    p.push(format!("{base}.conv.attn"), glorot(1, 2 * dh, rng), false);
                    p.push(format!("{base}.linear.weight"), glorot(dh, dh, rng), false);
                    p.push(format!("{base}.linear.bias"), Tensor::zeros(1, dh), false);
                    p.push(format!("{base}.norm.gamma"), Tensor::filled(1, dh, 1.0), false);
                    p.push(format!("{base}.norm.beta"), Tensor::zeros(1, dh), false);
                }
            }
            if config.unified_path {
                for j in 0..m {
                    p.push(format!("proj.{j}.weight"), glorot(dh, dh, rng), false);
                    p.push(format!("proj.{j}.bias"), Tensor::zeros(1, dh), false);
                }
            }
            for j in 0..m {
                p.push(format!("readout.score.{j}"), Tensor::zeros(1, dh), false);
            }
            p.push("readout.fusion".into(), Tensor::filled(1, m * dh, 1.0), false);
            p.push("classifier.weight".into(), glorot(c, m * dh, rng), false);
            p.push("classifier.bias".into(), Tensor::zeros(1, c), false);
        }
        ModelKind::Gat => {
            for l in 0..config.num_layers {
                let d_in = if l == 0 { din } else { dh };
                p.push(format!("gat.{l}.weight"), glorot(dh, d_in, rng), false);
                p.push(format!("gat.{l}.attn"), glorot(1, 2 * dh, rng), false);
            }
            p.push("classifier.weight".into(), glorot(c, dh, rng), false);
            p.push("classifier.bias".into(), Tensor::zeros(1, c), false);
        }
        ModelKind::Gcn => {
            for l in 0..config.num_layers {
                let d_in = if l == 0 { din } else { dh };
                p.push(format!("gcn.{l}.weight"), glorot(dh, d_in, rng), false);
            }
            p.push("classifier.weight".into(), glorot(c, dh, rng), false);
            p.push("classifier.bias".into(), Tensor::zeros(1, c), false);
        }
        ModelKind::Sage => {
            for l in 0..config.num_layers {
                let d_in = if l == 0 { din } else { dh };
                p.push(format!("sage.{l}.weight_self"), glorot(dh, d_in, rng), false);
                p.push(format!("sage.{l}.weight_neighbor"), glorot(dh, d_in, rng), false);
            }
            p.push("classifier.weight".into(), glorot(c, dh, rng), false);
            p.push("classifier.bias".into(), Tensor::zeros(1, c), false);
        }
    }
    Ok(p)
}

/// End-to-end gradient check: the full MFGAT loss on a random graph.
///
/// Builds a small multi-view model, runs a train-mode forward pass with a
/// re-created dropout stream, and compares every parameter gradient against
/// central differences with step `h`.
pub fn mfgat_grad_check(seed: u64, h: f64) -> Result<crate::autodiff::GradCheckReport> {
    use crate::autodiff::grad_check;
    use crate::datasets::GraphRecord;

    let mut rng = RngStream::new(seed);
    let n = 6;
    let mut edges = std::collections::BTreeSet::new();
    while edges.len() < 8 {
        let a = rng.below(n) as u32;
        let b = rng.below(n) as u32;
        if a != b {
            edges.insert((a.min(b), a.max(b)));
        }
    }
    let graph = GraphRecord {
        node_features: Tensor::uniform(n, 4, -1.0, 1.0, &mut rng),
        edges: edges.into_iter().collect(),
        label: 1,
        graph_id: 1,
    };

    let mut cfg = ModelConfig::new(ModelKind::Mfgat, 4, 2);
    cfg.num_views = 2;
    cfg.hidden_dim = 8;
    cfg.num_layers = 2;
    cfg.dropout = 0.2;
    let model = build_model(&cfg, &mut rng)?;
    let named: Vec<(String, Tensor)> = model
        .iter()
        .map(|(n, t, _)| (n.to_string(), t.clone()))
        .collect();
    let drop_seed = seed ^ 0xD0;

    // The checker owns the parameter leaves; the forward pass reads their
    // values off the tape, so the model struct only supplies names/config.
    grad_check(&named, h, move |tape, vars| {
        let mut drop_rng = RngStream::new(drop_seed);
        let logits = forward::classify_forward_with_vars(
            tape,
            &graph,
            &model,
            vars,
            crate::autodiff::Mode::Train,
            &mut drop_rng,
        )?;
        tape.cross_entropy(logits, graph.label)
    })
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    config: ModelConfig,
    params: Vec<CheckpointEntry>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    frozen: bool,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

/// Write a checkpoint: JSON with the config echo plus every named tensor.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        config: params.config.clone(),
        params: params
            .iter()
            .map(|(name, t, frozen)| CheckpointEntry {
                name: name.to_string(),
                frozen,
                rows: t.rows(),
                cols: t.cols(),
                values: t.values().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_string(&file)
        .map_err(|e| Error::InvalidInput(format!("checkpoint serialization: {e}")))?;
    std::fs::write(path, json).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Load a checkpoint written by [`save_checkpoint`], validating shapes.
pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| Error::Format {
        file: path.display().to_string(),
        line: 0,
        msg: e.to_string(),
    })?;
    let mut p = ModelParams::new(file.config);
    for entry in file.params {
        if entry.values.len() != entry.rows * entry.cols {
            return Err(Error::Validation(format!(
                "checkpoint tensor {} has {} values for shape {}x{}",
                entry.name,
                entry.values.len(),
                entry.rows,
                entry.cols
            )));
        }
        let t = Tensor::new(entry.rows, entry.cols, entry.values);
        if !t.all_finite() {
            return Err(Error::NonFinite(format!("checkpoint tensor {}", entry.name)));
        }
        p.push(entry.name, t, entry.frozen);
    }
    Ok(p)
}
